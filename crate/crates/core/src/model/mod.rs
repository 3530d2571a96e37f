//! The convolutional-recurrent detector.
//!
//! A stack of [`ConvBlock`]s with average pooling after each layer, a mean
//! over the remaining frequency bands, stacked bidirectional GRUs, a per-frame
//! sigmoid classifier (strong output) and attention pooling over frames for
//! the clip-level (weak) output.

mod checkpoint;
mod gru;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_checkpoint_expecting, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gru::{gru_forward, GruWeights};

use std::collections::BTreeMap;

use crate::autograd::{ParamStore, Tape, Var};
use crate::block::{Activation, BlockConfig, BlockKind, ConvBlock, ForwardOptions, NormKind};
use crate::error::{check_dim, Error, Result};
use crate::init::{kaiming_uniform, rng};
use crate::kv::KvConfig;
use crate::ops::{ChannelStats, PoolMode};
use crate::tensor::{Scalar, Tensor};

/// Buffer holding the evaluation temperature.
pub const TEMPERATURE_BUFFER: &str = "temperature";

/// Momentum of the running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub bands: usize,
    pub n_classes: usize,
    /// Block kind per layer; the first is static.
    pub kinds: Vec<BlockKind>,
    pub channels: Vec<usize>,
    /// `(time, frequency)` average-pooling factor after each layer.
    pub pools: Vec<(usize, usize)>,
    pub kernel_size: usize,
    pub window: usize,
    pub use_attention: bool,
    pub norm: NormKind,
    pub activation: Activation,
    pub reduction: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
}

impl Default for ModelConfig {
    /// Full-size configuration: 626×128 inputs, 7 blocks, 2 bidirectional GRU layers.
    fn default() -> Self {
        let mut kinds = vec![BlockKind::Ffd; 7];
        kinds[0] = BlockKind::Static;
        Self {
            frames: 626,
            bands: 128,
            n_classes: 10,
            kinds,
            channels: vec![16, 32, 64, 128, 128, 128, 128],
            pools: vec![(2, 2), (2, 2), (1, 2), (1, 2), (1, 2), (1, 2), (1, 2)],
            kernel_size: 3,
            window: 3,
            use_attention: true,
            norm: NormKind::Batch,
            activation: Activation::Glu,
            reduction: 4,
            gru_hidden: 128,
            gru_layers: 2,
        }
    }
}

const KEYS: &[&str] = &[
    "frames",
    "bands",
    "classes",
    "kinds",
    "channels",
    "pools",
    "kernel_size",
    "window",
    "attention",
    "norm",
    "activation",
    "reduction",
    "gru_hidden",
    "gru_layers",
];

fn parse_pool(s: &str) -> Result<(usize, usize)> {
    let (t, f) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("pool {s:?}: expected <time>x<freq>")))?;
    let num = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| Error::Config(format!("pool {s:?}: {e}")))
    };
    Ok((num(t)?, num(f)?))
}

pub(crate) fn parse_switch(s: &str) -> Result<bool> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected on/off, got {s:?}"))),
    }
}

impl ModelConfig {
    /// A small configuration for desk-scale experiments on `frames × bands` inputs.
    pub fn desk(frames: usize, bands: usize, n_classes: usize) -> Self {
        Self {
            frames,
            bands,
            n_classes,
            kinds: vec![
                BlockKind::Static,
                BlockKind::Ffd,
                BlockKind::Ffd,
                BlockKind::Ffd,
                BlockKind::Ffd,
                BlockKind::Ffd,
            ],
            channels: vec![8, 16, 16, 32, 32, 32],
            pools: vec![(2, 2), (2, 2), (1, 2), (1, 2), (1, 2), (1, 2)],
            gru_hidden: 32,
            gru_layers: 2,
            ..Self::default()
        }
    }

    /// Layers after the first all become `kind`.
    pub fn with_variant(mut self, kind: BlockKind) -> Self {
        for k in self.kinds.iter_mut().skip(1) {
            *k = kind;
        }
        self
    }

    pub fn layers(&self) -> usize {
        self.kinds.len()
    }

    /// `(frames, bands)` entering each layer, plus the final extents.
    pub fn extents(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(self.frames, self.bands)];
        let (mut t, mut f) = (self.frames, self.bands);
        for &(pt, pf) in &self.pools {
            t /= pt.max(1);
            f /= pf.max(1);
            out.push((t, f));
        }
        out
    }

    pub fn output_frames(&self) -> usize {
        self.extents().last().map_or(0, |e| e.0)
    }

    pub fn block_config(&self, layer: usize) -> BlockConfig {
        let (t, f) = self.extents()[layer];
        let in_ch = if layer == 0 { 1 } else { self.channels[layer - 1] };
        BlockConfig {
            kind: self.kinds[layer],
            in_channels: in_ch,
            out_channels: self.channels[layer],
            kernel_size: self.kernel_size,
            window: self.window,
            use_attention: self.use_attention,
            norm: self.norm,
            activation: self.activation,
            reduction: self.reduction,
            frames: t,
            bands: f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kinds.len();
        if n == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.channels.len() != n || self.pools.len() != n {
            return Err(Error::Config(format!(
                "{n} kinds but {} channel counts and {} pools",
                self.channels.len(),
                self.pools.len()
            )));
        }
        if self.kinds[0] != BlockKind::Static {
            return Err(Error::Config("the first layer must be static".into()));
        }
        if self.n_classes == 0 || self.gru_hidden == 0 || self.gru_layers == 0 {
            return Err(Error::Config(
                "classes, gru_hidden and gru_layers must be positive".into(),
            ));
        }
        if self.pools.iter().any(|&(t, f)| t == 0 || f == 0) {
            return Err(Error::Config("pooling factors must be positive".into()));
        }
        let freq: usize = self.pools.iter().map(|p| p.1).product();
        if freq > self.bands {
            return Err(Error::Config(format!(
                "frequency pooling {freq} exceeds {} bands",
                self.bands
            )));
        }
        if self.extents().iter().any(|&(t, f)| t == 0 || f == 0) {
            return Err(Error::Config("pooling schedule empties the feature map".into()));
        }
        for i in 0..n {
            self.block_config(i).validate()?;
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let blocks: usize = (0..self.layers()).map(|i| self.block_config(i).param_count()).sum();
        let h = self.gru_hidden;
        let mut gru = 0;
        for l in 0..self.gru_layers {
            let d = if l == 0 {
                *self.channels.last().unwrap_or(&0)
            } else {
                2 * h
            };
            gru += 2 * (3 * h * d + 3 * h * h + 6 * h);
        }
        let heads = 2 * (self.n_classes * 2 * h + self.n_classes);
        blocks + gru + heads
    }

    pub fn to_kv(&self) -> KvConfig {
        let join = |v: Vec<String>| v.join(",");
        let mut kv = KvConfig::new();
        kv.set("frames", self.frames);
        kv.set("bands", self.bands);
        kv.set("classes", self.n_classes);
        kv.set("kinds", join(self.kinds.iter().map(|k| k.to_string()).collect()));
        kv.set("channels", join(self.channels.iter().map(|c| c.to_string()).collect()));
        kv.set(
            "pools",
            join(self.pools.iter().map(|(t, f)| format!("{t}x{f}")).collect()),
        );
        kv.set("kernel_size", self.kernel_size);
        kv.set("window", self.window);
        kv.set("attention", if self.use_attention { "on" } else { "off" });
        kv.set("norm", self.norm);
        kv.set("activation", self.activation);
        kv.set("reduction", self.reduction);
        kv.set("gru_hidden", self.gru_hidden);
        kv.set("gru_layers", self.gru_layers);
        kv
    }

    /// Overrides fields present in `kv`; keys must all be model keys.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        kv.reject_unknown(KEYS)?;
        kv.apply("frames", &mut self.frames)?;
        kv.apply("bands", &mut self.bands)?;
        kv.apply("classes", &mut self.n_classes)?;
        if let Some(v) = kv.get_list::<BlockKind>("kinds")? {
            self.kinds = v;
        }
        if let Some(v) = kv.get_list::<usize>("channels")? {
            self.channels = v;
        }
        if let Some(v) = kv.get_list::<String>("pools")? {
            self.pools = v.iter().map(|s| parse_pool(s)).collect::<Result<_>>()?;
        }
        kv.apply("kernel_size", &mut self.kernel_size)?;
        kv.apply("window", &mut self.window)?;
        if let Some(s) = kv.get_str("attention") {
            self.use_attention = parse_switch(s)?;
        }
        kv.apply("norm", &mut self.norm)?;
        kv.apply("activation", &mut self.activation)?;
        kv.apply("reduction", &mut self.reduction)?;
        kv.apply("gru_hidden", &mut self.gru_hidden)?;
        kv.apply("gru_layers", &mut self.gru_layers)?;
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        c.validate()?;
        Ok(c)
    }

    pub fn model_keys() -> &'static [&'static str] {
        KEYS
    }
}

/// Batched detector outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SedOutput<T> {
    /// `[B, T', classes]` frame posteriors.
    pub strong: Tensor<T>,
    /// `[B, classes]` clip posteriors.
    pub weak: Tensor<T>,
}

/// Handles produced by [`SedModel::forward`].
pub struct ForwardTrace<T> {
    pub strong: Var,
    pub weak: Var,
    /// Output of each conv block before pooling.
    pub layers: Vec<Var>,
    /// Batch statistics per layer in training mode.
    pub batch_stats: Vec<Option<ChannelStats<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SedModel<T> {
    config: ModelConfig,
    blocks: Vec<ConvBlock>,
    pub params: ParamStore<T>,
    /// Running normalization statistics, `conv{i}.bn.running_{mean,var}`,
    /// and the attention temperature reached in training, `temperature`.
    pub buffers: BTreeMap<String, Tensor<T>>,
}

fn gru_prefix(layer: usize, reverse: bool) -> String {
    format!("gru{layer}.{}", if reverse { "bwd" } else { "fwd" })
}

impl<T: Scalar> SedModel<T> {
    /// Builds the model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::empty(config)?;
        let mut r = rng(seed);
        for b in &model.blocks {
            b.init(&mut model.params, &mut r);
        }
        let h = model.config.gru_hidden;
        for l in 0..model.config.gru_layers {
            let d = if l == 0 {
                *model.config.channels.last().expect("validated")
            } else {
                2 * h
            };
            for reverse in [false, true] {
                GruWeights::init(d, h, &mut r).insert_into(&mut model.params, &gru_prefix(l, reverse));
            }
        }
        let c = model.config.n_classes;
        for head in ["strong", "att"] {
            model
                .params
                .insert(format!("{head}.weight"), kaiming_uniform(vec![c, 2 * h], 2 * h, &mut r));
            model.params.insert(format!("{head}.bias"), Tensor::zeros(vec![c]));
        }
        Ok(model)
    }

    /// Structure and buffers without parameters.
    fn empty(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.layers())
            .map(|i| ConvBlock::new(config.block_config(i), format!("conv{i}")))
            .collect::<Result<Vec<_>>>()?;
        let mut buffers = BTreeMap::new();
        buffers.insert(TEMPERATURE_BUFFER.to_owned(), Tensor::ones(vec![1]));
        if config.norm == NormKind::Batch {
            for (i, &c) in config.channels.iter().enumerate() {
                buffers.insert(format!("conv{i}.bn.running_mean"), Tensor::zeros(vec![c]));
                buffers.insert(format!("conv{i}.bn.running_var"), Tensor::ones(vec![c]));
            }
        }
        Ok(Self {
            config,
            blocks,
            params: ParamStore::new(),
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Attention temperature used outside training.
    pub fn temperature(&self) -> f64 {
        self.buffers
            .get(TEMPERATURE_BUFFER)
            .map_or(1.0, |t| t.data()[0].as_f64())
    }

    /// Records the temperature the filters were last trained at, so that
    /// evaluation generates the same filters.
    pub fn set_temperature(&mut self, temperature: f64) {
        self.buffers
            .insert(TEMPERATURE_BUFFER.to_owned(), Tensor::full(vec![1], T::of(temperature)));
    }

    pub fn eval_options(&self) -> ForwardOptions {
        ForwardOptions::eval(self.temperature())
    }

    fn running(&self, layer: usize) -> Option<ChannelStats<T>> {
        let mean = self.buffers.get(&format!("conv{layer}.bn.running_mean"))?;
        let var = self.buffers.get(&format!("conv{layer}.bn.running_var"))?;
        Some(ChannelStats {
            mean: mean.data().to_vec(),
            var: var.data().to_vec(),
        })
    }

    /// Records the network on `tape` for features `x [B, 1, T, F]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, opts: ForwardOptions) -> Result<ForwardTrace<T>> {
        self.forward_with(&self.params, tape, x, opts)
    }

    /// [`forward`](Self::forward) reading weights from `params` instead of
    /// the model's own store.
    pub fn forward_with(
        &self,
        params: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace<T>> {
        let cfg = &self.config;
        let [b, c, t, f] = tape.value(x).dims::<4>("model")?;
        check_dim("model", "channel", 1, c)?;
        check_dim("model", "frames", cfg.frames, t)?;
        check_dim("model", "bands", cfg.bands, f)?;
        let mut h = x;
        let mut layers = Vec::with_capacity(self.blocks.len());
        let mut batch_stats = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let running = if opts.training { None } else { self.running(i) };
            let out = block.forward(tape, params, running.as_ref(), h, opts)?;
            layers.push(out.y);
            batch_stats.push(out.batch_stats);
            let pool = cfg.pools[i];
            h = if pool == (1, 1) {
                out.y
            } else {
                tape.pool2d(out.y, PoolMode::Avg, pool, pool)?
            };
        }
        let collapsed = tape.mean_axis(h, 3)?;
        let mut seq = tape.permute(collapsed, &[0, 2, 1])?;
        for l in 0..cfg.gru_layers {
            let fwd = tape.gru_from_store(params, &gru_prefix(l, false), seq, false)?;
            let bwd = tape.gru_from_store(params, &gru_prefix(l, true), seq, true)?;
            seq = tape.concat(&[fwd, bwd], 2)?;
        }
        let ws = params.leaf(tape, "strong.weight")?;
        let bs = params.leaf(tape, "strong.bias")?;
        let logits = tape.linear(seq, ws, Some(bs))?;
        let strong = tape.sigmoid(logits)?;
        let wa = params.leaf(tape, "att.weight")?;
        let ba = params.leaf(tape, "att.bias")?;
        let att_logits = tape.linear(seq, wa, Some(ba))?;
        let att = tape.softmax(att_logits, 1)?;
        let weighted = tape.mul(att, strong)?;
        let weak = tape.sum_axis(weighted, 1)?;
        debug_assert_eq!(tape.value(weak).shape(), &[b, cfg.n_classes]);
        Ok(ForwardTrace {
            strong,
            weak,
            layers,
            batch_stats,
        })
    }

    /// Evaluation-mode inference on `[B, 1, T, F]` features.
    pub fn infer(&self, features: &Tensor<T>) -> Result<SedOutput<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(features.clone());
        let tr = self.forward(&mut tape, x, self.eval_options())?;
        Ok(SedOutput {
            strong: tape.value(tr.strong).clone(),
            weak: tape.value(tr.weak).clone(),
        })
    }

    /// Evaluation-mode per-layer block outputs, before pooling.
    pub fn activations(&self, features: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::inference();
        let x = tape.constant(features.clone());
        let tr = self.forward(&mut tape, x, self.eval_options())?;
        Ok(tr.layers.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Exponential moving average of batch statistics into the buffers.
    pub fn update_running_stats(&mut self, stats: &[Option<ChannelStats<T>>]) {
        let m = T::of(BN_MOMENTUM);
        for (i, s) in stats.iter().enumerate() {
            let Some(s) = s else { continue };
            for (key, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("conv{i}.bn.{key}")) {
                    for (r, &v) in buf.data_mut().iter_mut().zip(batch) {
                        *r = (T::one() - m) * *r + m * v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            frames: 16,
            bands: 8,
            n_classes: 3,
            kinds: vec![BlockKind::Static, BlockKind::Ffd],
            channels: vec![4, 4],
            pools: vec![(2, 2), (1, 2)],
            gru_hidden: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_schedule_gives_156_frames() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.output_frames(), 156);
        assert_eq!(c.extents().last().unwrap().1, 1);
    }

    #[test]
    fn closed_form_count_matches_enumeration() {
        for kind in BlockKind::ALL {
            let cfg = tiny().with_variant(kind);
            let m = SedModel::<f32>::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.param_count(), cfg.param_count(), "{kind}");
        }
        let stat = ModelConfig::default().with_variant(BlockKind::Static);
        let ffd = ModelConfig::default();
        let diff: usize = (1..7)
            .map(|i| ffd.block_config(i).param_count() - stat.block_config(i).param_count())
            .sum();
        assert_eq!(ffd.param_count() - stat.param_count(), diff);
    }

    #[test]
    fn outputs_are_posteriors() {
        let m = SedModel::<f64>::new(tiny(), 3).unwrap();
        let x = Tensor::uniform(vec![2, 1, 16, 8], -3.0, 3.0, &mut rng(1));
        let out = m.infer(&x).unwrap();
        assert_eq!(out.strong.shape(), &[2, 8, 3]);
        assert_eq!(out.weak.shape(), &[2, 3]);
        for b in 0..2 {
            for c in 0..3 {
                let w = out.weak.at(&[b, c]);
                let max = (0..8).map(|t| out.strong.at(&[b, t, c])).fold(0.0, f64::max);
                assert!((0.0..=1.0).contains(&w) && w <= max + 1e-6);
            }
        }
        assert!(out.strong.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn config_checks() {
        let mut c = tiny();
        c.kinds[0] = BlockKind::Ffd;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.pools = vec![(2, 4), (1, 4)];
        assert!(c.validate().is_err());
        let m = SedModel::<f64>::new(tiny(), 0).unwrap();
        assert!(m.infer(&Tensor::zeros(vec![1, 1, 15, 8])).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let c = tiny().with_variant(BlockKind::Ftd);
        let back = ModelConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let mut kv = KvConfig::new();
        kv.set("bogus", 1);
        assert!(ModelConfig::from_kv(&kv).is_err());
    }
}
