//! Supervised training and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::autograd::Tape;
use crate::block::ForwardOptions;
use crate::error::{Error, Result};
use crate::init::rng;
use crate::kv::KvConfig;
use crate::model::SedModel;
use crate::sed::metrics::{eb_counts, ib_counts, EventCounts, Prf};
use crate::sed::optim::{rampup, Adam};
use crate::sed::postprocess::{decode_events, median_filter};
use crate::sed::synth::Dataset;
use crate::sed::EventAnnotation;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    /// Epochs of exponential learning-rate ramp-up.
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Median filter length in output frames.
    pub median_length: usize,
    /// Per-class decision thresholds; empty means 0.5 for every class.
    pub thresholds: Vec<f64>,
    /// Weight of the clip-level loss.
    pub weak_weight: f64,
    /// Attention temperature at epoch 0, annealed linearly to 1.
    pub temperature_start: f64,
    pub anneal_epochs: f64,
    pub collar: f64,
    pub dtc: f64,
    pub gtc: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            warmup_epochs: 5.0,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            median_length: 7,
            thresholds: Vec::new(),
            weak_weight: 0.5,
            temperature_start: 30.0,
            anneal_epochs: 50.0,
            collar: 0.2,
            dtc: 0.5,
            gtc: 0.5,
        }
    }
}

const KEYS: &[&str] = &[
    "lr_max",
    "warmup_epochs",
    "epochs",
    "batch_size",
    "seed",
    "median_length",
    "thresholds",
    "weak_weight",
    "temperature_start",
    "anneal_epochs",
    "collar",
    "dtc",
    "gtc",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.median_length % 2 == 0 {
            return bad("median_length must be odd");
        }
        if self.thresholds.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
            return bad("thresholds must lie in (0, 1)");
        }
        if !(self.temperature_start >= 1.0) {
            return bad("temperature_start must be at least 1");
        }
        if !(self.dtc > 0.0 && self.dtc <= 1.0 && self.gtc > 0.0 && self.gtc <= 1.0) {
            return bad("dtc and gtc must lie in (0, 1]");
        }
        Ok(())
    }

    /// Attention temperature at (fractional) `epoch`.
    pub fn temperature(&self, epoch: f64) -> f64 {
        if self.anneal_epochs <= 0.0 {
            return 1.0;
        }
        let p = (epoch / self.anneal_epochs).clamp(0.0, 1.0);
        self.temperature_start + (1.0 - self.temperature_start) * p
    }

    pub fn thresholds_for(&self, n_classes: usize) -> Result<Vec<f64>> {
        match self.thresholds.len() {
            0 => Ok(vec![0.5; n_classes]),
            n if n == n_classes => Ok(self.thresholds.clone()),
            n => Err(Error::Config(format!("{n} thresholds for {n_classes} classes"))),
        }
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("lr_max", self.lr_max);
        kv.set("warmup_epochs", self.warmup_epochs);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("median_length", self.median_length);
        let th: Vec<String> = self.thresholds.iter().map(f64::to_string).collect();
        kv.set("thresholds", th.join(","));
        kv.set("weak_weight", self.weak_weight);
        kv.set("temperature_start", self.temperature_start);
        kv.set("anneal_epochs", self.anneal_epochs);
        kv.set("collar", self.collar);
        kv.set("dtc", self.dtc);
        kv.set("gtc", self.gtc);
        kv
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        kv.reject_unknown(KEYS)?;
        kv.apply("lr_max", &mut self.lr_max)?;
        kv.apply("warmup_epochs", &mut self.warmup_epochs)?;
        kv.apply("epochs", &mut self.epochs)?;
        kv.apply("batch_size", &mut self.batch_size)?;
        kv.apply("seed", &mut self.seed)?;
        kv.apply("median_length", &mut self.median_length)?;
        if let Some(v) = kv.get_list::<f64>("thresholds")? {
            self.thresholds = v;
        }
        kv.apply("weak_weight", &mut self.weak_weight)?;
        kv.apply("temperature_start", &mut self.temperature_start)?;
        kv.apply("anneal_epochs", &mut self.anneal_epochs)?;
        kv.apply("collar", &mut self.collar)?;
        kv.apply("dtc", &mut self.dtc)?;
        kv.apply("gtc", &mut self.gtc)?;
        self.validate()
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub eb: Prf,
    pub ib: Prf,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's minibatches.
    pub loss: f64,
    pub eb_f1: f64,
    pub ib_f1: f64,
}

/// CSV with header `epoch,loss,eb_f1,ib_f1`.
pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,eb_f1,ib_f1\n");
    for r in history {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.epoch, r.loss, r.eb_f1, r.ib_f1);
    }
    s
}

fn batch_loss<T: Scalar>(
    model: &SedModel<T>,
    data: &Dataset<T>,
    idx: &[usize],
    opts: ForwardOptions,
    weak_weight: f64,
    tape: &mut Tape<T>,
) -> Result<(crate::autograd::Var, crate::model::ForwardTrace<T>)> {
    let x = tape.constant(data.batch_features(idx)?);
    let trace = model.forward(tape, x, opts)?;
    let strong_t = tape.constant(data.batch_labels(idx)?);
    let weak_t = tape.constant(data.batch_weak_labels(idx)?);
    let strong = tape.bce(trace.strong, strong_t)?;
    let weak = tape.bce(trace.weak, weak_t)?;
    let weak = tape.scale(weak, weak_weight)?;
    let loss = tape.add(strong, weak)?;
    Ok((loss, trace))
}

fn check_shapes<T: Scalar>(model: &SedModel<T>, data: &Dataset<T>) -> Result<()> {
    let cfg = model.config();
    let spec = &data.spec;
    if (spec.frames, spec.bands, spec.n_classes) != (cfg.frames, cfg.bands, cfg.n_classes) {
        return Err(Error::Config(format!(
            "dataset is {}x{} with {} classes, model expects {}x{} with {}",
            spec.frames, spec.bands, spec.n_classes, cfg.frames, cfg.bands, cfg.n_classes
        )));
    }
    if spec.label_frames() != cfg.output_frames() {
        return Err(Error::Config(format!(
            "dataset has {} label frames, model outputs {}",
            spec.label_frames(),
            cfg.output_frames()
        )));
    }
    Ok(())
}

/// Trains `model` in place and returns one record per epoch, validated on `val`.
pub fn train_loop<T: Scalar>(
    model: &mut SedModel<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_shapes(model, train)?;
    check_shapes(model, val)?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng(cfg.seed ^ ((epoch as u64 + 1) << 32)));
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let progress = epoch as f64 + step as f64 / steps_per_epoch as f64;
            let temperature = cfg.temperature(progress);
            let opts = ForwardOptions::train(temperature);
            let mut tape = Tape::new();
            let (loss, trace) = batch_loss(model, train, idx, opts, cfg.weak_weight, &mut tape)?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: value,
                });
            }
            total += value;
            let grads = tape.backward_scalar(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&grads)?;
            adam.step(&mut model.params, cfg.lr_max * rampup(progress, cfg.warmup_epochs));
            model.update_running_stats(&trace.batch_stats);
            model.set_temperature(temperature);
            log::debug!("epoch {epoch} step {step} loss {value:.5}");
        }
        let m = evaluate(model, val, cfg)?;
        let rec = EpochRecord {
            epoch,
            loss: total / steps_per_epoch as f64,
            eb_f1: m.eb.f1,
            ib_f1: m.ib.f1,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} eb_f1 {:.4} ib_f1 {:.4}",
            rec.loss,
            rec.eb_f1,
            rec.ib_f1
        );
        history.push(rec);
    }
    Ok(history)
}

/// Events decoded from the model's frame posteriors for every clip.
pub fn predict_events<T: Scalar>(
    model: &SedModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<EventAnnotation>>> {
    Ok(predict(model, data, cfg)?.0)
}

fn predict<T: Scalar>(
    model: &SedModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(Vec<Vec<EventAnnotation>>, f64)> {
    check_shapes(model, data)?;
    let thresholds = cfg.thresholds_for(data.spec.n_classes)?;
    let hop = data.spec.label_hop();
    let mut out = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(cfg.batch_size) {
        let mut tape = Tape::inference();
        let (l, trace) = batch_loss(model, data, idx, model.eval_options(), cfg.weak_weight, &mut tape)?;
        loss += tape.value(l).data()[0].as_f64() * idx.len() as f64;
        let strong = tape.value(trace.strong);
        let [_, frames, classes] = strong.dims::<3>("predict")?;
        for (b, _) in idx.iter().enumerate() {
            let per = frames * classes;
            let probs = Tensor::new(vec![frames, classes], strong.data()[b * per..(b + 1) * per].to_vec())?;
            let smooth = median_filter(&probs, cfg.median_length)?;
            out.push(decode_events(&smooth, &thresholds, hop)?);
        }
    }
    Ok((out, loss / data.len().max(1) as f64))
}

/// Micro-averaged event metrics over all clips.
pub fn evaluate<T: Scalar>(model: &SedModel<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<EvalMetrics> {
    let (pred, loss) = predict(model, data, cfg)?;
    let mut eb = EventCounts::default();
    let mut ib = EventCounts::default();
    for (p, g) in pred.iter().zip(&data.annotations) {
        eb += eb_counts(p, g, cfg.collar);
        ib += ib_counts(p, g, cfg.dtc, cfg.gtc);
    }
    Ok(EvalMetrics {
        loss,
        eb: eb.prf(),
        ib: ib.prf(),
    })
}
