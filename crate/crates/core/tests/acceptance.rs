//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Extra arguments select criteria by substring, e.g.
//! `cargo test -p ffdconv --test acceptance -- oracle metrics`.
//! A failing criterion is reported but only fails the process when
//! `FFDCONV_ACCEPTANCE_STRICT=1`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ffdconv::audio::{log_mel, FeatureParams, WaveClip};
use ffdconv::block::{block_forward, BlockConfig, BlockKind, ConvBlock};
use ffdconv::ddf::{ddf_forward, ddf_reference, random_instance, FilterAxis};
use ffdconv::filtergen::{gen_channel_filters, gen_spatial_filters};
use ffdconv::gradcheck::{run_suite, SuiteOptions};
use ffdconv::model::{checkpoint_to_bytes, ModelConfig, SedModel};
use ffdconv::ops::conv2d;
use ffdconv::sed::{
    benchmark_split, decode_events, eb_counts, eb_f1, ib_counts, ib_f1, median_filter, metrics_csv, train_loop,
    EventAnnotation, EventCounts, SyntheticSpec, TrainConfig,
};
use ffdconv::{ParamStore, Tape, Tensor};

/// Counts allocations of exactly one watched byte size while armed.
struct Watch;

static ARMED: AtomicBool = AtomicBool::new(false);
static WATCH_A: AtomicUsize = AtomicUsize::new(usize::MAX);
static WATCH_B: AtomicUsize = AtomicUsize::new(usize::MAX);
static HITS: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Watch {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        System.alloc_zeroed(layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note(new_size);
        System.realloc(ptr, layout, new_size)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

fn note(size: usize) {
    if ARMED.load(Ordering::Relaxed)
        && (size == WATCH_A.load(Ordering::Relaxed) || size == WATCH_B.load(Ordering::Relaxed))
    {
        HITS.fetch_add(1, Ordering::Relaxed);
    }
}

#[global_allocator]
static GLOBAL: Watch = Watch;

/// Allocations of `sizes` bytes made while `f` runs.
fn watched_allocations<R>(sizes: [usize; 2], f: impl FnOnce() -> R) -> (R, usize) {
    WATCH_A.store(sizes[0], Ordering::SeqCst);
    WATCH_B.store(sizes[1], Ordering::SeqCst);
    HITS.store(0, Ordering::SeqCst);
    ARMED.store(true, Ordering::SeqCst);
    let r = f();
    ARMED.store(false, Ordering::SeqCst);
    (r, HITS.load(Ordering::SeqCst))
}

type Outcome = Result<String, String>;

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let reports = run_suite(&SuiteOptions::default(), None).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let required = [
        "conv2d",
        "linear",
        "softmax",
        "pool2d",
        "gru",
        "ddf",
        "spatial_gen",
        "channel_gen",
        "tiny_model",
    ];
    let mut problems = Vec::new();
    for op in required {
        if !reports.iter().any(|r| r.op == op) {
            problems.push(format!("{op} not checked"));
        }
    }
    let mut worst_f64: f64 = 0.0;
    for r in &reports {
        if !r.passed() || r.instances < 20 {
            problems.push(r.to_string());
        }
        if r.dtype == ffdconv::DType::F64 {
            worst_f64 = worst_f64.max(r.worst);
        }
    }
    if worst_f64 >= 1e-6 {
        problems.push(format!("worst f64 rel err {worst_f64:.2e} >= 1e-6"));
    }
    if elapsed >= Duration::from_secs(300) {
        problems.push(format!("took {elapsed:.0?}"));
    }
    let summary = format!(
        "{} checks x 20 instances, worst f64 rel err {worst_f64:.2e}, {:.1}s",
        reports.len(),
        elapsed.as_secs_f64()
    );
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", problems.join("; ")))
    }
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0dd);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let axis = FilterAxis::ALL[i % 3];
        let k = [1, 3, 5][(i / 3) % 3];
        let dims = [
            rng.gen_range(1..=3),
            [1, 2, 4][rng.gen_range(0..3)],
            rng.gen_range(1..=12),
            rng.gen_range(1..=12),
        ];
        let (x, s, c) = random_instance::<f64>(axis, dims, k, i as u64).map_err(|e| e.to_string())?;
        let fused = ddf_forward(&x, &s, &c).map_err(|e| e.to_string())?;
        let reference = ddf_reference(&x, &s, &c).map_err(|e| e.to_string())?;
        for (a, b) in fused.data().iter().zip(reference.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let msg = format!("200 instances, all axes, K in {{1,3,5}}, max abs diff {worst:.2e} (limit 1e-12)");
    if worst < 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn degenerate_collapse() -> Outcome {
    let run = || -> ffdconv::Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (b, ci, co, t, f, k) = (2, 3, 4, 10, 12, 3);
        let cfg = BlockConfig::new(BlockKind::Ffd, ci, co, t, f);
        let block = ConvBlock::new(cfg, "blk")?;
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut rng);
        // Zero generator weights leave only the biases: every spatial row and
        // every channel row is then the same vector.
        let zero = |store: &mut ParamStore<f64>, name: &str| -> ffdconv::Result<()> {
            let p = store.get_mut(name)?;
            p.value = Tensor::zeros(p.value.shape().to_vec());
            Ok(())
        };
        zero(&mut store, "blk.spatial.weight")?;
        zero(&mut store, "blk.channel.fc2.weight")?;
        store.get_mut("blk.spatial.bias")?.value = Tensor::uniform(vec![k * k], -1.0, 1.0, &mut rng);
        let row: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tiled: Vec<f64> = (0..co).flat_map(|_| row.iter().copied()).collect();
        store.get_mut("blk.channel.fc2.bias")?.value = Tensor::from_f64(vec![co * k * k], &tiled)?;
        store.get_mut("blk.bn.gamma")?.value = Tensor::uniform(vec![co], 0.5, 1.5, &mut rng);
        store.get_mut("blk.bn.beta")?.value = Tensor::uniform(vec![co], -0.5, 0.5, &mut rng);

        let x = Tensor::<f64>::uniform(vec![b, ci, t, f], -1.0, 1.0, &mut rng);
        let temperature = 2.0;
        let y = block_forward(&block, &store, &x, temperature)?;

        // Static composition: 1x1 transform, one 3x3 depthwise kernel as a
        // diagonal dense conv, batch norm, gated activation.
        let p = |n: &str| store.get(n).map(|p| p.value.clone());
        let z = conv2d(
            &x,
            &p("blk.transform.weight")?,
            Some(&p("blk.transform.bias")?),
            (1, 1),
            (0, 0),
        )?;
        let s = gen_spatial_filters(&z, &cfg.spatial_gen().unwrap(), &store, "blk", Some(temperature))?;
        let c = gen_channel_filters(&z, &cfg.channel_gen().unwrap(), &store, "blk")?;
        let kk = k * k;
        let s0 = &s.values.data()[..kk];
        let c0 = &c.values.data()[..kk];
        assert!(s.values.data().chunks(kk).all(|r| r == s0), "spatial rows differ");
        assert!(c.values.data().chunks(kk).all(|r| r == c0), "channel rows differ");
        let mut w = vec![0.0; co * co * kk];
        for ch in 0..co {
            for tap in 0..kk {
                w[(ch * co + ch) * kk + tap] = s0[tap] * c0[tap];
            }
        }
        let w = Tensor::new(vec![co, co, k, k], w)?;
        let h = conv2d(&z, &w, None, (1, 1), (1, 1))?;
        let mut tape = Tape::inference();
        let hv = tape.constant(h);
        let gamma = tape.constant(p("blk.bn.gamma")?);
        let beta = tape.constant(p("blk.bn.beta")?);
        let (n, _) = tape.batch_norm(hv, gamma, beta, None)?;
        let gw = tape.constant(p("blk.glu.weight")?);
        let gb = tape.constant(p("blk.glu.bias")?);
        let g = tape.conv2d(n, gw, Some(gb), (1, 1), (0, 0))?;
        let g = tape.sigmoid(g)?;
        let out = tape.mul(n, g)?;
        let expect = tape.value(out);
        Ok(y.data()
            .iter()
            .zip(expect.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    };
    let diff = run().map_err(|e| e.to_string())?;
    let msg =
        format!("ffd block with constant rows vs static depthwise composition: max abs diff {diff:.2e} (limit 1e-10)");
    if diff < 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn feature_shape() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<f64> = (0..160_000).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let clip = WaveClip::new(samples, 16_000).map_err(|e| e.to_string())?;
    let mel = log_mel(&clip, &FeatureParams::default()).map_err(|e| e.to_string())?;
    let msg = format!("10 s at 16 kHz -> {:?}", mel.values.shape());
    if mel.values.shape() == [626, 128] && mel.values.data().iter().all(|v| v.is_finite()) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ev(class: usize, on: f64, off: f64) -> EventAnnotation {
    EventAnnotation::new(class, on, off).unwrap()
}

/// Median over a window with edge replication, by counting ones.
fn median_oracle(seq: &[u8], length: usize) -> Vec<u8> {
    let n = seq.len() as isize;
    let half = (length / 2) as isize;
    (0..n)
        .map(|t| {
            let ones = (t - half..=t + half)
                .filter(|&i| seq[i.clamp(0, n - 1) as usize] == 1)
                .count();
            u8::from(ones > length / 2)
        })
        .collect()
}

fn metrics() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let gt = vec![ev(0, 1.0, 2.0), ev(1, 3.0, 5.0)];
    check("eb identical", eb_f1(&gt, &gt, 0.2).f1 == 1.0);
    check(
        "eb shifted 0.1",
        eb_f1(&[ev(0, 1.0, 2.0)], &[ev(0, 1.1, 2.1)], 0.2).f1 == 1.0,
    );
    let miss = eb_f1(&[], &[ev(0, 1.0, 2.0)], 0.2);
    check("eb no predictions", miss.recall == 0.0 && miss.f1 == 0.0);
    check(
        "eb one-to-one",
        eb_counts(&[ev(0, 1.0, 2.0)], &[ev(0, 1.0, 2.0), ev(0, 1.05, 2.05)], 0.2)
            == EventCounts { tp: 1, fp: 0, fn_: 1 },
    );
    check("ib identical", ib_f1(&gt, &gt, 0.5, 0.5).f1 == 1.0);
    check(
        "ib half overlap",
        ib_counts(&[ev(0, 0.0, 1.0)], &[ev(0, 0.5, 1.5)], 0.5, 0.5) == EventCounts { tp: 1, fp: 0, fn_: 0 },
    );
    check(
        "ib disjoint",
        ib_f1(&[ev(0, 0.0, 1.0)], &[ev(0, 2.0, 3.0)], 0.5, 0.5).f1 == 0.0,
    );

    let col = |v: &[f64]| Tensor::<f64>::from_f64(vec![v.len(), 1], v).unwrap();
    let filtered = median_filter(&col(&[0., 1., 0., 1., 1., 1., 0.]), 3).unwrap();
    check("median example", filtered.data() == [0., 0., 1., 1., 1., 1., 0.]);
    let probs = {
        let mut v = vec![0.0; 40];
        v[10..20].fill(0.9);
        col(&v)
    };
    let events = decode_events(&probs, &[0.5], 0.064).unwrap();
    check(
        "decode frames 10..19",
        events.len() == 1 && (events[0].onset - 0.64).abs() < 1e-12 && (events[0].offset - 1.28).abs() < 1e-12,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let length = [1, 3, 5, 7, 9][rng.gen_range(0..5)];
        let seq: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let as_f: Vec<f64> = seq.iter().map(|&b| b as f64).collect();
        let got = median_filter(&col(&as_f), length).unwrap();
        let want: Vec<f64> = median_oracle(&seq, length).iter().map(|&b| b as f64).collect();
        if got.data() != want.as_slice() {
            mismatches += 1;
        }
    }
    check("median vs enumeration", mismatches == 0);
    if failures.is_empty() {
        Ok("hand-derived eb/ib/median/decode examples exact; median matches enumeration on 1000 sequences".into())
    } else {
        Err(format!(
            "failed: {} ({mismatches} median mismatches)",
            failures.join(", ")
        ))
    }
}

fn small_run(seed: u64) -> ffdconv::Result<(Vec<u8>, String)> {
    let spec = SyntheticSpec::default();
    let (train, val) = benchmark_split::<f32>(&spec, 32, 16, seed)?;
    let cfg = TrainConfig {
        epochs: 2,
        seed,
        ..TrainConfig::default()
    };
    let mut model = SedModel::<f32>::new(ModelConfig::desk(spec.frames, spec.bands, spec.n_classes), seed)?;
    let history = train_loop(&mut model, &train, &val, &cfg)?;
    Ok((checkpoint_to_bytes(&model, &Default::default())?, metrics_csv(&history)))
}

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

fn determinism() -> Outcome {
    let runs = [
        ("run 1", in_pool(2, || small_run(11))),
        ("run 2", in_pool(2, || small_run(11))),
        ("1 thread", in_pool(1, || small_run(11))),
        ("4 threads", in_pool(4, || small_run(11))),
    ];
    let mut out = Vec::new();
    for (name, r) in runs {
        out.push((name, r.map_err(|e| format!("{name}: {e}"))?));
    }
    let (first_name, first) = &out[0];
    let differing: Vec<&str> = out[1..].iter().filter(|(_, r)| r != first).map(|(n, _)| *n).collect();
    if differing.is_empty() {
        Ok(format!(
            "checkpoint ({} bytes) and metrics identical across 2 runs and 1/2/4 threads",
            first.0.len()
        ))
    } else {
        Err(format!("{} differ from {first_name}", differing.join(", ")))
    }
}

fn best_of<R>(reps: usize, mut f: impl FnMut() -> R) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn fused_kernel() -> Outcome {
    let (b, c, t, f, k) = (4, 64, 156, 16, 3);
    let mut lines = Vec::new();
    let mut ok = true;
    for axis in FilterAxis::ALL {
        let (x, s, ch) = random_instance::<f32>(axis, [b, c, t, f], k, 5).map_err(|e| e.to_string())?;
        let l = axis.locations(t, f);
        let combined = l * c * k * k * std::mem::size_of::<f32>();
        let sizes = [combined, b * combined];
        let (_, fused_hits) = watched_allocations(sizes, || ddf_forward(&x, &s, &ch).unwrap());
        let (_, ref_hits) = watched_allocations(sizes, || ddf_reference(&x, &s, &ch).unwrap());
        let fused = best_of(9, || ddf_forward(&x, &s, &ch).unwrap());
        let reference = best_of(3, || ddf_reference(&x, &s, &ch).unwrap());
        let speedup = reference / fused;
        ok &= speedup >= 5.0 && fused_hits == 0 && ref_hits > 0;
        lines.push(format!(
            "{axis} {speedup:.1}x ({:.2} vs {:.2} ms), [L,C,K2] buffers fused {fused_hits} / reference {ref_hits}",
            fused * 1e3,
            reference * 1e3
        ));
    }
    let msg = lines.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

#[derive(Clone, Copy)]
struct Variant {
    name: &'static str,
    kind: BlockKind,
    window: usize,
    attention: bool,
}

const STATIC: Variant = Variant {
    name: "static",
    kind: BlockKind::Static,
    window: 3,
    attention: true,
};
const FTD: Variant = Variant {
    name: "ftd",
    kind: BlockKind::Ftd,
    window: 3,
    attention: true,
};
const FFD: Variant = Variant {
    name: "ffd",
    kind: BlockKind::Ffd,
    window: 3,
    attention: true,
};
const FFD_W1: Variant = Variant {
    name: "ffd W=1",
    kind: BlockKind::Ffd,
    window: 1,
    attention: true,
};
const FFD_NO_ATT: Variant = Variant {
    name: "ffd attention off",
    kind: BlockKind::Ffd,
    window: 3,
    attention: false,
};

/// Final validation EB-F1 on the default benchmark, one value per seed.
fn benchmark(v: Variant) -> ffdconv::Result<Vec<f64>> {
    let spec = SyntheticSpec::default();
    (0..3)
        .map(|seed| {
            let (train, val) = benchmark_split::<f32>(&spec, 400, 100, seed)?;
            let mut mc = ModelConfig::desk(spec.frames, spec.bands, spec.n_classes).with_variant(v.kind);
            mc.window = v.window;
            mc.use_attention = v.attention;
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let mut model = SedModel::<f32>::new(mc, seed)?;
            let history = train_loop(&mut model, &train, &val, &cfg)?;
            let f1 = history.last().map_or(0.0, |r| r.eb_f1);
            eprintln!("  {} seed {seed}: eb_f1 {f1:.4}", v.name);
            Ok(f1)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Tables {
    results: Vec<(&'static str, Vec<f64>)>,
    table1_time: Duration,
}

impl Tables {
    fn mean_of(&self, name: &str) -> f64 {
        mean(&self.results.iter().find(|(n, _)| *n == name).expect("variant ran").1)
    }

    fn describe(&self, names: &[&str]) -> String {
        names
            .iter()
            .map(|n| {
                let per_seed = &self.results.iter().find(|(m, _)| m == n).unwrap().1;
                let seeds: Vec<String> = per_seed.iter().map(|v| format!("{v:.3}")).collect();
                format!("{n} {:.4} [{}]", mean(per_seed), seeds.join(" "))
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn run_tables(table2: bool) -> ffdconv::Result<Tables> {
    let started = Instant::now();
    let mut results = Vec::new();
    for v in [STATIC, FTD, FFD] {
        results.push((v.name, benchmark(v)?));
    }
    let table1_time = started.elapsed();
    if table2 {
        for v in [FFD_W1, FFD_NO_ATT] {
            results.push((v.name, benchmark(v)?));
        }
    }
    Ok(Tables { results, table1_time })
}

fn table1(t: &Tables) -> Outcome {
    let (s, ftd, ffd) = (t.mean_of("static"), t.mean_of("ftd"), t.mean_of("ffd"));
    let msg = format!(
        "mean EB-F1 over 3 seeds: {} ({:.0}s); need ffd > ftd >= static and ffd - static >= 0.05",
        t.describe(&["static", "ftd", "ffd"]),
        t.table1_time.as_secs_f64()
    );
    if ffd > ftd && ftd >= s && ffd - s >= 0.05 && t.table1_time < Duration::from_secs(30 * 60) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn table2(t: &Tables) -> Outcome {
    let best = t.mean_of("ffd");
    let (w1, no_att) = (t.mean_of("ffd W=1"), t.mean_of("ffd attention off"));
    let msg = format!(
        "mean EB-F1 over 3 seeds: {}; need W=3 with attention >= each other row - 0.01",
        t.describe(&["ffd", "ffd W=1", "ffd attention off"])
    );
    if best >= w1 - 0.01 && best >= no_att - 0.01 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    // Ignore libtest flags that cargo forwards.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let strict = std::env::var("FFDCONV_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match &outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            failed += 1;
            println!("FAIL {name}: {detail}");
        }
    };

    let quick: [(&str, fn() -> Outcome); 7] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("degenerate collapse", degenerate_collapse),
        ("feature shape", feature_shape),
        ("metrics", metrics),
        ("determinism", determinism),
        ("fused kernel", fused_kernel),
    ];
    for (name, f) in quick {
        if wanted(name) {
            report(name, f());
        }
    }
    let (t1, t2) = (wanted("table 1 ordering"), wanted("table 2 ablation"));
    if t1 || t2 {
        match run_tables(t2) {
            Ok(tables) => {
                if t1 {
                    report("table 1 ordering", table1(&tables));
                }
                if t2 {
                    report("table 2 ablation", table2(&tables));
                }
            }
            Err(e) => report("table 1 ordering", Err(e.to_string())),
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        if strict {
            std::process::exit(1);
        }
    }
}
