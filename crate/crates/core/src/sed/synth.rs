//! Synthetic frequency-banded event spectrograms.
//!
//! Each clip is a log-spectrogram-like `[T, F]` map: a random noise floor,
//! optionally a per-clip offset for every band (a fixed coloration, as if the
//! recording chain had its own frequency response), plus events. An event of
//! class `c` adds a smooth time envelope times a band profile restricted to
//! the class band range. Event boundaries fall on label-frame boundaries so
//! the labels are exact.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::init::rng;
use crate::io::{read_tensor_file, write_tensor_file};
use crate::kv::KvConfig;
use crate::sed::annotations::{format_annotations, parse_annotations, LabeledEvent};
use crate::sed::EventAnnotation;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub frames: usize,
    pub bands: usize,
    pub clip_seconds: f64,
    /// Feature frames per label frame.
    pub label_pool: usize,
    /// `[low, high)` band range per class.
    pub class_bands: Vec<(usize, usize)>,
    /// Event duration range in seconds.
    pub duration: (f64, f64),
    /// Inclusive range of events per clip.
    pub events: (usize, usize),
    /// Peak amplitude range of an event.
    pub event_level: (f64, f64),
    /// Amplitude of the uniform noise floor.
    pub noise_level: f64,
    /// Half-width of the uniform per-clip, per-band offset; 0 disables it.
    pub coloration: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            frames: 128,
            bands: 64,
            clip_seconds: 10.0,
            label_pool: 4,
            class_bands: vec![(0, 16), (16, 32), (32, 48), (48, 64)],
            duration: (1.0, 3.0),
            events: (1, 3),
            event_level: (0.6, 1.0),
            noise_level: 0.3,
            coloration: 0.0,
        }
    }
}

const KEYS: &[&str] = &[
    "classes",
    "frames",
    "bands",
    "clip_seconds",
    "label_pool",
    "class_bands",
    "duration",
    "events",
    "event_level",
    "noise_level",
    "coloration",
];

fn parse_range<V: std::str::FromStr>(key: &str, s: &str) -> Result<(V, V)>
where
    V::Err: std::fmt::Display,
{
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| Error::Config(format!("{key}: expected <low>-<high>, got {s:?}")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<V>()
            .map_err(|e| Error::Config(format!("{key}: {v:?}: {e}")))
    };
    Ok((p(a)?, p(b)?))
}

impl SyntheticSpec {
    pub fn label_frames(&self) -> usize {
        self.frames / self.label_pool.max(1)
    }

    pub fn label_hop(&self) -> f64 {
        self.clip_seconds / self.label_frames() as f64
    }

    pub fn class_name(class: usize) -> String {
        format!("class{class}")
    }

    pub fn class_of(label: &str) -> Option<usize> {
        label.strip_prefix("class")?.parse().ok()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.bands == 0 || self.n_classes == 0 {
            return bad("frames, bands and classes must be positive".into());
        }
        if self.label_pool == 0 || self.frames % self.label_pool != 0 {
            return bad(format!(
                "label_pool {} must divide frames {}",
                self.label_pool, self.frames
            ));
        }
        if !(self.clip_seconds > 0.0) {
            return bad("clip length must be positive".into());
        }
        if self.class_bands.len() != self.n_classes {
            return bad(format!(
                "{} band ranges for {} classes",
                self.class_bands.len(),
                self.n_classes
            ));
        }
        for (c, &(lo, hi)) in self.class_bands.iter().enumerate() {
            if lo >= hi || hi > self.bands {
                return bad(format!(
                    "class {c}: band range [{lo}, {hi}) outside [0, {})",
                    self.bands
                ));
            }
            if self.class_bands[..c].contains(&(lo, hi)) {
                return bad(format!("class {c}: band range repeats an earlier class"));
            }
        }
        let (dmin, dmax) = self.duration;
        if !(0.0 < dmin && dmin <= dmax) {
            return bad(format!("bad duration range {dmin}-{dmax}"));
        }
        if dmax > self.clip_seconds {
            return bad(format!("duration {dmax} s exceeds the {} s clip", self.clip_seconds));
        }
        if self.events.0 > self.events.1 {
            return bad("bad events-per-clip range".into());
        }
        if !(self.event_level.0 <= self.event_level.1 && self.noise_level >= 0.0 && self.coloration >= 0.0) {
            return bad("bad levels".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("classes", self.n_classes);
        kv.set("frames", self.frames);
        kv.set("bands", self.bands);
        kv.set("clip_seconds", self.clip_seconds);
        kv.set("label_pool", self.label_pool);
        let bands: Vec<String> = self.class_bands.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        kv.set("class_bands", bands.join(","));
        kv.set("duration", format!("{}-{}", self.duration.0, self.duration.1));
        kv.set("events", format!("{}-{}", self.events.0, self.events.1));
        kv.set("event_level", format!("{}-{}", self.event_level.0, self.event_level.1));
        kv.set("noise_level", self.noise_level);
        kv.set("coloration", self.coloration);
        kv
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        kv.reject_unknown(KEYS)?;
        kv.apply("classes", &mut self.n_classes)?;
        kv.apply("frames", &mut self.frames)?;
        kv.apply("bands", &mut self.bands)?;
        kv.apply("clip_seconds", &mut self.clip_seconds)?;
        kv.apply("label_pool", &mut self.label_pool)?;
        if let Some(v) = kv.get_list::<String>("class_bands")? {
            self.class_bands = v.iter().map(|s| parse_range("class_bands", s)).collect::<Result<_>>()?;
        }
        if let Some(s) = kv.get_str("duration") {
            self.duration = parse_range("duration", s)?;
        }
        if let Some(s) = kv.get_str("events") {
            self.events = parse_range("events", s)?;
        }
        if let Some(s) = kv.get_str("event_level") {
            self.event_level = parse_range("event_level", s)?;
        }
        kv.apply("noise_level", &mut self.noise_level)?;
        kv.apply("coloration", &mut self.coloration)?;
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut s = Self::default();
        s.apply_kv(kv)?;
        s.validate()?;
        Ok(s)
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}

/// Features, frame labels and event lists for a set of clips.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub spec: SyntheticSpec,
    /// `[n, T, F]`.
    pub features: Tensor<T>,
    /// `[n, T', classes]` with entries in {0, 1}.
    pub labels: Tensor<T>,
    pub annotations: Vec<Vec<EventAnnotation>>,
    pub names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Features of the listed clips as `[b, 1, T, F]`.
    pub fn batch_features(&self, idx: &[usize]) -> Result<Tensor<T>> {
        gather(&self.features, idx, true)
    }

    /// Labels of the listed clips as `[b, T', classes]`.
    pub fn batch_labels(&self, idx: &[usize]) -> Result<Tensor<T>> {
        gather(&self.labels, idx, false)
    }

    /// Clip-level labels `[b, classes]`: 1 when the class occurs in the clip.
    pub fn batch_weak_labels(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let c = self.spec.n_classes;
        let mut out = Tensor::zeros(vec![idx.len(), c]);
        for (row, &i) in idx.iter().enumerate() {
            for e in &self.annotations[i] {
                out.set(&[row, e.class], T::one());
            }
        }
        Ok(out)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let f = gather(&self.features, idx, false)?;
        Ok(Self {
            spec: self.spec.clone(),
            features: f,
            labels: gather(&self.labels, idx, false)?,
            annotations: idx.iter().map(|&i| self.annotations[i].clone()).collect(),
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
        })
    }
}

fn gather<T: Scalar>(src: &Tensor<T>, idx: &[usize], channel_axis: bool) -> Result<Tensor<T>> {
    let n = src.dim(0);
    let per = src.numel() / n.max(1);
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        if i >= n {
            return Err(Error::Invalid(format!("clip index {i} out of range ({n} clips)")));
        }
        data.extend_from_slice(&src.data()[i * per..(i + 1) * per]);
    }
    let mut shape = vec![idx.len()];
    if channel_axis {
        shape.push(1);
    }
    shape.extend_from_slice(&src.shape()[1..]);
    Tensor::new(shape, data)
}

/// Frame `j` of `[T', classes]` is active when its centre lies inside an event.
pub fn labels_from_events<T: Scalar>(
    events: &[EventAnnotation],
    n_classes: usize,
    label_frames: usize,
    hop: f64,
) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(vec![label_frames, n_classes]);
    for e in events {
        if e.class >= n_classes {
            return Err(Error::Invalid(format!("event class {} >= {n_classes}", e.class)));
        }
        for j in 0..label_frames {
            let centre = (j as f64 + 0.5) * hop;
            if e.onset <= centre && centre < e.offset {
                out.set(&[j, e.class], T::one());
            }
        }
    }
    Ok(out)
}

const PLACEMENT_TRIES: usize = 20;

fn clip_seed(seed: u64, clip: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (clip as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn raised_cosine(x: f64) -> f64 {
    0.5 - 0.5 * (std::f64::consts::PI * x.clamp(0.0, 1.0)).cos()
}

fn synth_clip(spec: &SyntheticSpec, seed: u64) -> (Vec<f64>, Vec<EventAnnotation>) {
    let mut r = rng(seed);
    let (t_len, f_len) = (spec.frames, spec.bands);
    let mut x: Vec<f64> = (0..t_len * f_len).map(|_| spec.noise_level * r.gen::<f64>()).collect();
    if spec.coloration > 0.0 {
        let offsets: Vec<f64> = (0..f_len)
            .map(|_| r.gen_range(-spec.coloration..=spec.coloration))
            .collect();
        for row in x.chunks_mut(f_len) {
            for (v, o) in row.iter_mut().zip(&offsets) {
                *v += o;
            }
        }
    }
    let lf = spec.label_frames();
    let hop = spec.label_hop();
    let n_events = r.gen_range(spec.events.0..=spec.events.1);
    let mut events = Vec::with_capacity(n_events);
    // Label-frame spans per class; same-class events keep a gap of one frame.
    let mut spans: Vec<(usize, usize, usize)> = Vec::new();
    for _ in 0..n_events {
        let class = r.gen_range(0..spec.n_classes);
        let dur = r.gen_range(spec.duration.0..=spec.duration.1);
        let len = ((dur / hop).round() as usize).clamp(1, lf);
        let placed = (0..PLACEMENT_TRIES)
            .map(|_| r.gen_range(0..=lf - len))
            .find(|&s| spans.iter().all(|&(c, a, b)| c != class || s > b || s + len < a));
        let Some(start) = placed else { continue };
        spans.push((class, start, start + len));
        let level = r.gen_range(spec.event_level.0..=spec.event_level.1);
        let (lo, hi) = spec.class_bands[class];
        let width = (hi - lo) as f64;
        let profile: Vec<f64> = (lo..hi)
            .map(|f| {
                let shape = (std::f64::consts::PI * ((f - lo) as f64 + 0.5) / width).sin();
                shape * r.gen_range(0.8..1.2)
            })
            .collect();
        let (t0, t1) = (start * spec.label_pool, (start + len) * spec.label_pool);
        let ramp = ((t1 - t0) as f64 / 4.0).min(2.0).max(1.0);
        for t in t0..t1 {
            let edge = ((t - t0) as f64 + 0.5).min((t1 - t) as f64 - 0.5);
            let env = level * raised_cosine((edge + 0.5) / ramp);
            let row = &mut x[t * f_len..(t + 1) * f_len];
            for (f, p) in (lo..hi).zip(&profile) {
                row[f] += env * p;
            }
        }
        events.push(EventAnnotation {
            class,
            onset: start as f64 * hop,
            offset: (start + len) as f64 * hop,
        });
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class.cmp(&b.class)));
    (x, events)
}

/// Generates `n_clips` clips; clip `i` depends only on `(spec, seed, i)`.
pub fn synth_dataset<T: Scalar>(spec: &SyntheticSpec, n_clips: usize, seed: u64) -> Result<Dataset<T>> {
    spec.validate()?;
    let clips: Vec<(Vec<f64>, Vec<EventAnnotation>)> = (0..n_clips)
        .into_par_iter()
        .map(|i| synth_clip(spec, clip_seed(seed, i)))
        .collect();
    let lf = spec.label_frames();
    let mut features = Vec::with_capacity(n_clips * spec.frames * spec.bands);
    let mut labels = Vec::with_capacity(n_clips * lf * spec.n_classes);
    let mut annotations = Vec::with_capacity(n_clips);
    for (x, ev) in clips {
        features.extend(x.into_iter().map(T::of));
        let l: Tensor<T> = labels_from_events(&ev, spec.n_classes, lf, spec.label_hop())?;
        labels.extend_from_slice(l.data());
        annotations.push(ev);
    }
    Ok(Dataset {
        spec: spec.clone(),
        features: Tensor::new(vec![n_clips, spec.frames, spec.bands], features)?,
        labels: Tensor::new(vec![n_clips, lf, spec.n_classes], labels)?,
        annotations,
        names: (0..n_clips).map(|i| format!("clip_{i:05}")).collect(),
    })
}

/// Training and validation sets for run `seed`: clip seeds `1000 + seed`
/// and `2000 + seed`, so the two never share a clip.
pub fn benchmark_split<T: Scalar>(
    spec: &SyntheticSpec,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    Ok((
        synth_dataset(spec, n_train, 1000 + seed)?,
        synth_dataset(spec, n_val, 2000 + seed)?,
    ))
}

pub const SPEC_FILE: &str = "spec.cfg";
pub const ANNOTATION_FILE: &str = "annotations.tsv";

/// Writes `spec.cfg`, one `<name>.ffdt` `[T, F]` tensor per clip and
/// `annotations.tsv`.
pub fn write_dataset<T: Scalar>(dataset: &Dataset<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(SPEC_FILE), dataset.spec.to_kv().to_string())?;
    let (t, f) = (dataset.spec.frames, dataset.spec.bands);
    let mut rows = Vec::new();
    for (i, name) in dataset.names.iter().enumerate() {
        let clip = Tensor::new(vec![t, f], dataset.features.data()[i * t * f..(i + 1) * t * f].to_vec())?;
        write_tensor_file(dir.join(format!("{name}.ffdt")), &clip)?;
        for e in &dataset.annotations[i] {
            rows.push(LabeledEvent {
                filename: format!("{name}.ffdt"),
                onset: e.onset,
                offset: e.offset,
                label: SyntheticSpec::class_name(e.class),
            });
        }
    }
    std::fs::write(dir.join(ANNOTATION_FILE), format_annotations(&rows))?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`]; clips are taken in file
/// name order and labels are rebuilt from the annotations.
pub fn read_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let spec = SyntheticSpec::from_kv(&KvConfig::parse(&std::fs::read_to_string(dir.join(SPEC_FILE))?)?)?;
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().map(str::to_owned))
        .filter_map(|n| n.strip_suffix(".ffdt").map(str::to_owned))
        .collect();
    names.sort();
    let rows = parse_annotations(&std::fs::read_to_string(dir.join(ANNOTATION_FILE))?)?;
    let mut annotations = vec![Vec::new(); names.len()];
    for row in rows {
        let stem = row.filename.strip_suffix(".ffdt").unwrap_or(&row.filename);
        let i = names
            .binary_search_by(|n| n.as_str().cmp(stem))
            .map_err(|_| Error::format("annotations", format!("unknown clip {:?}", row.filename)))?;
        let class = SyntheticSpec::class_of(&row.label)
            .filter(|&c| c < spec.n_classes)
            .ok_or_else(|| Error::format("annotations", format!("unknown label {:?}", row.label)))?;
        annotations[i].push(EventAnnotation::new(class, row.onset, row.offset)?);
    }
    let (t, f, lf) = (spec.frames, spec.bands, spec.label_frames());
    let mut features = Vec::with_capacity(names.len() * t * f);
    let mut labels = Vec::with_capacity(names.len() * lf * spec.n_classes);
    for (name, ev) in names.iter().zip(&annotations) {
        let clip = read_tensor_file(dir.join(format!("{name}.ffdt")))?.into_tensor::<T>();
        if clip.shape() != [t, f] {
            return Err(Error::format(
                "dataset",
                format!("{name}: shape {:?}, expected [{t}, {f}]", clip.shape()),
            ));
        }
        features.extend_from_slice(clip.data());
        let l: Tensor<T> = labels_from_events(ev, spec.n_classes, lf, spec.label_hop())?;
        labels.extend_from_slice(l.data());
    }
    let n = names.len();
    Ok(Dataset {
        features: Tensor::new(vec![n, t, f], features)?,
        labels: Tensor::new(vec![n, lf, spec.n_classes], labels)?,
        spec,
        annotations,
        names,
    })
}
