//! `ffdconv` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or malformed
//! input file, 3 numeric failure (non-finite values, divergence, failed
//! gradient check).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ffdconv::audio::{read_wav, FeatureParams, MelExtractor};
use ffdconv::block::BlockKind;
use ffdconv::ddf::{ddf_forward, ddf_reference, random_instance, FilterAxis};
use ffdconv::gradcheck::{run_suite, suite_ops, SuiteOptions};
use ffdconv::io::{read_tensor_file, write_tensor_file};
use ffdconv::kv::KvConfig;
use ffdconv::model::{load_checkpoint, save_checkpoint, ModelConfig, SedModel};
use ffdconv::sed::{
    benchmark_split, evaluate, metrics_csv, read_dataset, synth_dataset, train_loop, write_dataset, Dataset,
    SyntheticSpec, TrainConfig,
};
use ffdconv::{DType, Error, Scalar, Tensor};

#[derive(Parser, Debug)]
#[command(
    name = "ffdconv",
    version,
    about = "Frequency-dependent dynamic convolution for sound event detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Log-mel features for every .wav file in a directory.
    Featurize(FeaturizeArgs),
    /// Writes a synthetic banded-event dataset.
    SynthData(SynthArgs),
    /// Runs the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Trains a detector and writes a checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Scores a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Times the fused DDF kernel against the brute-force reference.
    Bench(BenchArgs),
    /// Per-layer activations of one clip.
    DumpActivations(DumpArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Flags shared by the subcommands that read a run configuration.
#[derive(Args, Debug, Clone)]
struct Common {
    /// key=value file; keys are prefixed `data.`, `model.` or `train.`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    /// Directory of .wav files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key=value file overriding the extraction parameters.
    #[arg(long)]
    feature_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Precision,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Number of clips.
    #[arg(long, default_value_t = 100)]
    clips: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Restrict to checks whose tape runs in this precision.
    #[arg(long, value_enum)]
    dtype: Option<Precision>,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only these ops (repeatable).
    #[arg(long = "op")]
    ops: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    #[arg(long)]
    variant: Option<BlockKind>,
    /// Generator window W.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_enum)]
    attention: Option<Switch>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset directory for training; synthesized from `data.*` when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation dataset directory; synthesized when absent.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for `model.ffdc`, `metrics.csv` and `run.cfg`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Precision,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; the synthetic validation split when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metrics CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Precision,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A `[T, F]` FFDT feature file, or a .wav file to featurize.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    feature_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Precision,
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 1,
            msg: msg.into(),
        }
    }

    fn numeric(msg: impl Into<String>) -> Self {
        Self {
            code: 3,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Format { .. } => 2,
            e if e.is_numeric() => 3,
            _ => 1,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn io_context(path: &Path, e: Error) -> Failure {
    let mut f = Failure::from(e);
    f.msg = format!("{}: {}", path.display(), f.msg);
    f
}

fn read_kv(path: &Path) -> CliResult<KvConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_context(path, e.into()))?;
    Ok(KvConfig::parse(&text)?)
}

/// Splits `data.`/`model.`/`train.` keys into three configs.
struct RunConfig {
    data: KvConfig,
    model: KvConfig,
    train: KvConfig,
    /// `data.train_clips` / `data.val_clips`, when given.
    clips: (Option<usize>, Option<usize>),
}

impl RunConfig {
    fn load(common: &Common) -> CliResult<Self> {
        let file = match &common.config {
            Some(p) => read_kv(p)?,
            None => KvConfig::new(),
        };
        let mut rc = RunConfig {
            data: KvConfig::new(),
            model: KvConfig::new(),
            train: KvConfig::new(),
            clips: (None, None),
        };
        for key in file.keys() {
            let value = file.get_str(key).unwrap_or_default();
            let (section, rest) = key
                .split_once('.')
                .ok_or_else(|| Failure::usage(format!("config key {key:?} needs a data./model./train. prefix")))?;
            match (section, rest) {
                ("data", "train_clips") => rc.clips.0 = Some(parse_value(key, value)?),
                ("data", "val_clips") => rc.clips.1 = Some(parse_value(key, value)?),
                ("data", k) => rc.data.set(k, value),
                ("model", k) => rc.model.set(k, value),
                ("train", k) => rc.train.set(k, value),
                _ => return Err(Failure::usage(format!("unknown config section in {key:?}"))),
            }
        }
        Ok(rc)
    }

    fn train_clips(&self) -> usize {
        self.clips.0.unwrap_or(400)
    }

    fn val_clips(&self) -> usize {
        self.clips.1.unwrap_or(100)
    }

    fn spec(&self) -> CliResult<SyntheticSpec> {
        Ok(SyntheticSpec::from_kv(&self.data)?)
    }

    fn train_config(&self, seed: Option<u64>, epochs: Option<usize>) -> CliResult<TrainConfig> {
        let mut tc = TrainConfig::default();
        tc.apply_kv(&self.train)?;
        if let Some(s) = seed {
            tc.seed = s;
        }
        if let Some(e) = epochs {
            tc.epochs = e;
        }
        tc.validate()?;
        Ok(tc)
    }

    fn model_config(&self, spec: &SyntheticSpec, flags: &ModelFlags) -> CliResult<ModelConfig> {
        let mut mc = ModelConfig::desk(spec.frames, spec.bands, spec.n_classes);
        if let Some(v) = flags.variant {
            mc = mc.with_variant(v);
        }
        mc.apply_kv(&self.model)?;
        if let Some(v) = flags.variant {
            mc = mc.with_variant(v);
        }
        if let Some(w) = flags.window {
            mc.window = w;
        }
        if let Some(a) = flags.attention {
            mc.use_attention = a == Switch::On;
        }
        mc.validate()?;
        Ok(mc)
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> CliResult<V>
where
    V::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Failure::usage(format!("config key {key:?}: cannot parse {v:?}: {e}")))
}

fn feature_params(path: Option<&Path>) -> CliResult<FeatureParams> {
    match path {
        Some(p) => Ok(FeatureParams::from_kv(&read_kv(p)?)?),
        None => Ok(FeatureParams::default()),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_context(dir, e.into()))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_context(path, e.into()))
}

fn featurize(args: &FeaturizeArgs) -> CliResult {
    let params = feature_params(args.feature_config.as_deref())?;
    let extractor = MelExtractor::new(params.clone())?;
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(&args.input)
        .map_err(|e| io_context(&args.input, e.into()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(Failure::usage(format!("no .wav files in {}", args.input.display())));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| io_context(&args.out, e.into()))?;
    for wav in &wavs {
        let clip = read_wav(wav, params.sample_rate).map_err(|e| io_context(wav, e))?;
        let mel = extractor.extract(&clip).map_err(|e| io_context(wav, e))?;
        let stem = wav.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
        let path = args.out.join(format!("{stem}.ffdt"));
        match args.dtype {
            Precision::F32 => write_tensor_file(&path, &mel.values.cast::<f32>())?,
            Precision::F64 => write_tensor_file(&path, &mel.values)?,
        }
        log::info!("{} -> {} {:?}", wav.display(), path.display(), mel.values.shape());
    }
    write_file(&args.out.join("features.cfg"), params.to_kv().to_string())?;
    println!("featurized {} files into {}", wavs.len(), args.out.display());
    Ok(())
}

fn synth_data(args: &SynthArgs) -> CliResult {
    let rc = RunConfig::load(&args.common)?;
    let spec = rc.spec()?;
    let data = synth_dataset::<f32>(&spec, args.clips, args.common.seed.unwrap_or(0))?;
    write_dataset(&data, &args.out).map_err(|e| io_context(&args.out, e))?;
    println!("wrote {} clips to {}", data.len(), args.out.display());
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> CliResult {
    let known = suite_ops();
    if let Some(bad) = args.ops.iter().find(|o| !known.contains(&o.as_str())) {
        return Err(Failure::usage(format!(
            "unknown op {bad:?}; known: {}",
            known.join(", ")
        )));
    }
    let opts = SuiteOptions {
        instances: args.instances,
        seed: args.seed,
        ..SuiteOptions::default()
    };
    let only: Vec<&str> = args.ops.iter().map(String::as_str).collect();
    let started = Instant::now();
    let reports = run_suite(&opts, (!only.is_empty()).then_some(&only[..]))?;
    let dtype = args.dtype.map(DType::from);
    let mut failed = 0;
    for r in reports.iter().filter(|r| dtype.is_none_or(|d| d == r.dtype)) {
        println!("{r}");
        failed += usize::from(!r.passed());
    }
    println!("{:.1}s", started.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn load_dataset<T: Scalar>(dir: &Path) -> CliResult<Dataset<T>> {
    read_dataset(dir).map_err(|e| io_context(dir, e))
}

fn train_typed<T: Scalar>(args: &TrainArgs) -> CliResult {
    let rc = RunConfig::load(&args.common)?;
    let tc = rc.train_config(args.common.seed, args.epochs)?;
    let (train, val) = match (&args.data, &args.val) {
        (Some(d), Some(v)) => (load_dataset::<T>(d)?, load_dataset::<T>(v)?),
        (Some(d), None) => {
            let train = load_dataset::<T>(d)?;
            let val = synth_dataset(&train.spec, rc.val_clips(), 2000 + tc.seed)?;
            (train, val)
        }
        (None, Some(_)) => return Err(Failure::usage("--val needs --data")),
        (None, None) => benchmark_split(&rc.spec()?, rc.train_clips(), rc.val_clips(), tc.seed)?,
    };
    let mc = rc.model_config(&train.spec, &args.model)?;
    let mut model = SedModel::<T>::new(mc.clone(), tc.seed)?;
    log::info!("{} parameters", model.param_count());
    let started = Instant::now();
    let history = train_loop(&mut model, &train, &val, &tc)?;
    let mut meta = KvConfig::new();
    for (k, v) in [("data", train.spec.to_kv()), ("train", tc.to_kv())] {
        for key in v.keys() {
            meta.set(format!("{k}.{key}"), v.get_str(key).unwrap_or_default());
        }
    }
    meta.set("data.val_clips", val.len());
    std::fs::create_dir_all(&args.out).map_err(|e| io_context(&args.out, e.into()))?;
    let ckpt = args.out.join("model.ffdc");
    save_checkpoint(&model, &meta, &ckpt).map_err(|e| io_context(&ckpt, e))?;
    write_file(&args.out.join("metrics.csv"), metrics_csv(&history))?;
    let mut run = meta.clone();
    for key in mc.to_kv().keys() {
        run.set(format!("model.{key}"), mc.to_kv().get_str(key).unwrap_or_default());
    }
    write_file(&args.out.join("run.cfg"), run.to_string())?;
    let last = history.last();
    println!(
        "trained {} epochs in {:.1}s; final eb_f1 {:.4} ib_f1 {:.4}; checkpoint {}",
        history.len(),
        started.elapsed().as_secs_f64(),
        last.map_or(0.0, |r| r.eb_f1),
        last.map_or(0.0, |r| r.ib_f1),
        ckpt.display()
    );
    Ok(())
}

/// Checkpoint metadata under `section.`, with the prefix removed.
fn stored_section(meta: &KvConfig, section: &str) -> KvConfig {
    let mut kv = KvConfig::new();
    for key in meta.keys() {
        if let Some(k) = key.strip_prefix(section).and_then(|k| k.strip_prefix('.')) {
            kv.set(k, meta.get_str(key).unwrap_or_default());
        }
    }
    kv
}

fn evaluate_typed<T: Scalar>(args: &EvaluateArgs) -> CliResult {
    let (model, meta) = load_checkpoint::<T>(&args.checkpoint).map_err(|e| io_context(&args.checkpoint, e))?;
    let rc = RunConfig::load(&args.common)?;
    let mut tc = TrainConfig::default();
    tc.apply_kv(&stored_section(&meta, "train"))?;
    tc.apply_kv(&rc.train)?;
    if let Some(s) = args.common.seed {
        tc.seed = s;
    }
    tc.validate()?;
    let data = match &args.data {
        Some(d) => load_dataset::<T>(d)?,
        None => {
            // Regenerate the validation split the checkpoint was trained against,
            // with any `data.*` keys from --config layered on top.
            let mut data_kv = stored_section(&meta, "data");
            let stored_val = data_kv.get::<usize>("val_clips")?;
            data_kv.remove("val_clips");
            data_kv.remove("train_clips");
            for key in rc.data.keys() {
                data_kv.set(key, rc.data.get_str(key).unwrap_or_default());
            }
            let n = rc.clips.1.or(stored_val).unwrap_or(100);
            benchmark_split::<T>(&SyntheticSpec::from_kv(&data_kv)?, 0, n, tc.seed)?.1
        }
    };
    let m = evaluate(&model, &data, &tc)?;
    let mut csv = String::from("clips,loss,eb_precision,eb_recall,eb_f1,ib_precision,ib_recall,ib_f1\n");
    let _ = writeln!(
        csv,
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        data.len(),
        m.loss,
        m.eb.precision,
        m.eb.recall,
        m.eb.f1,
        m.ib.precision,
        m.ib.recall,
        m.ib.f1
    );
    write_file(&args.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn time<R>(reps: usize, mut f: impl FnMut() -> R) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        std::hint::black_box(f());
        best = best.min(t.elapsed().as_secs_f64());
    }
    best
}

fn bench(args: &BenchArgs) -> CliResult {
    let dims = [4, 64, 156, 16];
    let k = 3;
    let outputs = dims.iter().product::<usize>() as f64;
    let mut csv = String::from("axis,fused_ns_per_output,reference_ns_per_output,speedup\n");
    println!("B=4 C=64 T=156 F=16 K=3, f32, best of {}", args.reps);
    for axis in FilterAxis::ALL {
        let (x, s, c) = random_instance::<f32>(axis, dims, k, args.seed)?;
        let fused = time(args.reps, || ddf_forward(&x, &s, &c));
        let reference = time(args.reps, || ddf_reference(&x, &s, &c));
        let (nf, nr) = (fused * 1e9 / outputs, reference * 1e9 / outputs);
        println!(
            "{:<10} fused {nf:8.2} ns/out  reference {nr:8.2} ns/out  speedup {:6.1}x",
            axis.to_string(),
            nr / nf
        );
        let _ = writeln!(csv, "{axis},{nf:.3},{nr:.3},{:.3}", nr / nf);
    }
    if let Some(out) = &args.out {
        write_file(out, csv)?;
    }
    Ok(())
}

fn dump_typed<T: Scalar>(args: &DumpArgs) -> CliResult {
    let (model, _) = load_checkpoint::<T>(&args.checkpoint).map_err(|e| io_context(&args.checkpoint, e))?;
    let is_wav = args.input.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav"));
    let features: Tensor<T> = if is_wav {
        let params = feature_params(args.feature_config.as_deref())?;
        let clip = read_wav(&args.input, params.sample_rate).map_err(|e| io_context(&args.input, e))?;
        MelExtractor::new(params)?.extract(&clip)?.values.cast()
    } else {
        read_tensor_file(&args.input)
            .map_err(|e| io_context(&args.input, e))?
            .into_tensor()
    };
    let [t, f] = features.dims::<2>("dump-activations input")?;
    let x = features.reshape(vec![1, 1, t, f])?;
    let layers = model.activations(&x)?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_context(&args.out, e.into()))?;
    for (i, a) in layers.iter().enumerate() {
        let [_, c, lt, lf] = a.dims::<4>("activation")?;
        let squeezed = a.clone().reshape(vec![c, lt, lf])?;
        write_tensor_file(args.out.join(format!("layer{i}.ffdt")), &squeezed)?;
        // Channel-mean trace of every band over time.
        let mut csv = String::from("frame");
        for b in 0..lf {
            let _ = write!(csv, ",band_{b}");
        }
        csv.push('\n');
        for tt in 0..lt {
            let _ = write!(csv, "{tt}");
            for b in 0..lf {
                let mean = (0..c).map(|ch| squeezed.at(&[ch, tt, b]).as_f64()).sum::<f64>() / c as f64;
                let _ = write!(csv, ",{mean:.6}");
            }
            csv.push('\n');
        }
        write_file(&args.out.join(format!("layer{i}_bands.csv")), csv)?;
    }
    println!("dumped {} layers to {}", layers.len(), args.out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Featurize(a) => featurize(a),
        Command::SynthData(a) => synth_data(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => match a.dtype {
            Precision::F32 => train_typed::<f32>(a),
            Precision::F64 => train_typed::<f64>(a),
        },
        Command::Evaluate(a) => match a.dtype {
            Precision::F32 => evaluate_typed::<f32>(a),
            Precision::F64 => evaluate_typed::<f64>(a),
        },
        Command::Bench(a) => bench(a),
        Command::DumpActivations(a) => match a.dtype {
            Precision::F32 => dump_typed::<f32>(a),
            Precision::F64 => dump_typed::<f64>(a),
        },
    }
}

fn init_threads() -> CliResult {
    let Ok(v) = std::env::var("FFDCONV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("FFDCONV_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|_| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
