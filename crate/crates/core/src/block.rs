//! Convolution blocks: a static 3×3 convolution or a dynamic-filtering
//! convolution, each followed by optional batch normalization and an
//! activation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::ddf::FilterAxis;
use crate::error::{check_dim, Error, Result};
use crate::filtergen::{ChannelGen, SpatialGen};
use crate::init::kaiming_uniform;
use crate::ops::ChannelStats;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Static,
    /// Dynamic filters shared along time, varying with frequency.
    Ffd,
    /// Dynamic filters shared along frequency, varying with time.
    Ftd,
    /// Dynamic filters per time-frequency bin.
    Ddf,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [BlockKind::Static, BlockKind::Ffd, BlockKind::Ftd, BlockKind::Ddf];

    pub fn axis(self) -> Option<FilterAxis> {
        match self {
            BlockKind::Static => None,
            BlockKind::Ffd => Some(FilterAxis::Frequency),
            BlockKind::Ftd => Some(FilterAxis::Time),
            BlockKind::Ddf => Some(FilterAxis::Pixel),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Static => "static",
            BlockKind::Ffd => "ffd",
            BlockKind::Ftd => "ftd",
            BlockKind::Ddf => "ddf",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown block kind {s:?} (static|ffd|ftd|ddf)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    None,
    Batch,
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormKind::None),
            "batch" => Ok(NormKind::Batch),
            _ => Err(Error::Config(format!("unknown norm {s:?} (none|batch)"))),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::None => "none",
            NormKind::Batch => "batch",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// `x ⊙ σ(W x + b)` with a 1×1 gate convolution.
    Glu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "glu" => Ok(Activation::Glu),
            _ => Err(Error::Config(format!("unknown activation {s:?} (relu|glu)"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Glu => "glu",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Dynamic kernel size `K`; the static block is always 3×3.
    pub kernel_size: usize,
    /// Generator window `W`.
    pub window: usize,
    pub use_attention: bool,
    pub norm: NormKind,
    pub activation: Activation,
    /// Channel-branch bottleneck ratio.
    pub reduction: usize,
    /// Input extents the generators are built for.
    pub frames: usize,
    pub bands: usize,
}

impl BlockConfig {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize, frames: usize, bands: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
            kernel_size: 3,
            window: 3,
            use_attention: true,
            norm: NormKind::Batch,
            activation: Activation::Glu,
            reduction: 4,
            frames,
            bands,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Invalid("channel counts must be positive".into()));
        }
        if self.frames == 0 || self.bands == 0 {
            return Err(Error::Invalid("block extents must be positive".into()));
        }
        if let Some(g) = self.spatial_gen() {
            g.validate()?;
        }
        Ok(())
    }

    pub fn spatial_gen(&self) -> Option<SpatialGen> {
        self.kind.axis().map(|axis| SpatialGen {
            axis,
            kernel_size: self.kernel_size,
            window: self.window,
            channels: self.out_channels,
            frames: self.frames,
            bands: self.bands,
        })
    }

    pub fn channel_gen(&self) -> Option<ChannelGen> {
        self.kind.axis().map(|_| ChannelGen {
            kernel_size: self.kernel_size,
            channels: self.out_channels,
            reduction: self.reduction,
        })
    }

    /// Closed-form count of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (ci, co) = (self.in_channels, self.out_channels);
        let conv = match self.kind {
            BlockKind::Static => co * ci * 9 + co,
            _ => {
                co * ci
                    + co
                    + self.spatial_gen().map_or(0, |g| g.param_count())
                    + self.channel_gen().map_or(0, |g| g.param_count())
            }
        };
        let norm = match self.norm {
            NormKind::Batch => 2 * co,
            NormKind::None => 0,
        };
        let act = match self.activation {
            Activation::Glu => co * co + co,
            Activation::Relu => 0,
        };
        conv + norm + act
    }
}

/// Per-call switches shared by every block of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Batch statistics and running-average updates when true.
    pub training: bool,
    /// Attention-constraint temperature.
    pub temperature: f64,
}

impl ForwardOptions {
    /// Running statistics; `temperature` should be the last one trained at.
    pub fn eval(temperature: f64) -> Self {
        Self {
            training: false,
            temperature,
        }
    }

    pub fn train(temperature: f64) -> Self {
        Self {
            training: true,
            temperature,
        }
    }
}

pub struct BlockOutput<T> {
    pub y: Var,
    /// Batch statistics when normalizing in training mode.
    pub batch_stats: Option<ChannelStats<T>>,
}

/// A block bound to a parameter prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub config: BlockConfig,
    pub prefix: String,
}

impl ConvBlock {
    pub fn new(config: BlockConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            prefix: prefix.into(),
        })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = &self.config;
        let (ci, co) = (c.in_channels, c.out_channels);
        match c.kind {
            BlockKind::Static => {
                store.insert(
                    self.name("conv.weight"),
                    kaiming_uniform(vec![co, ci, 3, 3], ci * 9, rng),
                );
                store.insert(self.name("conv.bias"), Tensor::zeros(vec![co]));
            }
            _ => {
                store.insert(
                    self.name("transform.weight"),
                    kaiming_uniform(vec![co, ci, 1, 1], ci, rng),
                );
                store.insert(self.name("transform.bias"), Tensor::zeros(vec![co]));
                if let Some(g) = c.spatial_gen() {
                    g.init(store, &self.prefix, rng);
                }
                if let Some(g) = c.channel_gen() {
                    g.init(store, &self.prefix, rng);
                }
            }
        }
        if c.norm == NormKind::Batch {
            store.insert(self.name("bn.gamma"), Tensor::ones(vec![co]));
            store.insert(self.name("bn.beta"), Tensor::zeros(vec![co]));
        }
        if c.activation == Activation::Glu {
            store.insert(self.name("glu.weight"), kaiming_uniform(vec![co, co, 1, 1], co, rng));
            store.insert(self.name("glu.bias"), Tensor::zeros(vec![co]));
        }
    }

    /// Records the block on `tape`. `running` supplies the normalization
    /// statistics outside training.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        running: Option<&ChannelStats<T>>,
        x: Var,
        opts: ForwardOptions,
    ) -> Result<BlockOutput<T>> {
        let c = &self.config;
        let [_, ci, t, f] = tape.value(x).dims::<4>("block")?;
        check_dim("block", "channel", c.in_channels, ci)?;
        let h = match c.kind {
            BlockKind::Static => {
                let w = store.leaf(tape, &self.name("conv.weight"))?;
                let b = store.leaf(tape, &self.name("conv.bias"))?;
                tape.conv2d(x, w, Some(b), (1, 1), (1, 1))?
            }
            kind => {
                let axis = kind.axis().expect("dynamic kind");
                if axis != FilterAxis::Time {
                    check_dim("block", "frames", c.frames, t)?;
                }
                if axis != FilterAxis::Frequency {
                    check_dim("block", "bands", c.bands, f)?;
                }
                let w = store.leaf(tape, &self.name("transform.weight"))?;
                let b = store.leaf(tape, &self.name("transform.bias"))?;
                let z = tape.conv2d(x, w, Some(b), (1, 1), (0, 0))?;
                let temperature = c.use_attention.then_some(opts.temperature);
                let spatial =
                    c.spatial_gen()
                        .expect("dynamic kind")
                        .record(tape, store, &self.prefix, z, temperature)?;
                let channel = c
                    .channel_gen()
                    .expect("dynamic kind")
                    .record(tape, store, &self.prefix, z)?;
                tape.ddf(z, spatial, channel, axis, c.kernel_size)?
            }
        };
        let (h, batch_stats) = match c.norm {
            NormKind::None => (h, None),
            NormKind::Batch => {
                let gamma = store.leaf(tape, &self.name("bn.gamma"))?;
                let beta = store.leaf(tape, &self.name("bn.beta"))?;
                if opts.training {
                    let (y, stats) = tape.batch_norm(h, gamma, beta, None)?;
                    (y, Some(stats))
                } else {
                    let stats = running
                        .ok_or_else(|| Error::Invalid(format!("{}: running statistics missing", self.prefix)))?;
                    (tape.batch_norm(h, gamma, beta, Some(stats))?.0, None)
                }
            }
        };
        let y = match c.activation {
            Activation::Relu => tape.relu(h)?,
            Activation::Glu => {
                let w = store.leaf(tape, &self.name("glu.weight"))?;
                let b = store.leaf(tape, &self.name("glu.bias"))?;
                let g = tape.conv2d(h, w, Some(b), (1, 1), (0, 0))?;
                let g = tape.sigmoid(g)?;
                tape.mul(h, g)?
            }
        };
        Ok(BlockOutput { y, batch_stats })
    }
}

/// Evaluates one block on a tensor without recording gradients, using batch
/// statistics when it normalizes.
pub fn block_forward<T: Scalar>(
    block: &ConvBlock,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    temperature: f64,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let out = block.forward(&mut tape, store, None, xv, ForwardOptions::train(temperature))?;
    Ok(tape.value(out.y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng;

    #[test]
    fn parameter_counts_match_enumeration() {
        let mut small = BlockConfig::new(BlockKind::Static, 1, 2, 8, 8);
        small.norm = NormKind::None;
        small.activation = Activation::Relu;
        assert_eq!(small.param_count(), 20);
        for kind in BlockKind::ALL {
            for norm in [NormKind::None, NormKind::Batch] {
                for act in [Activation::Relu, Activation::Glu] {
                    let mut cfg = BlockConfig::new(kind, 3, 8, 6, 10);
                    cfg.norm = norm;
                    cfg.activation = act;
                    let block = ConvBlock::new(cfg, "b").unwrap();
                    let mut store = ParamStore::<f32>::new();
                    block.init(&mut store, &mut rng(0));
                    assert_eq!(store.numel(), cfg.param_count(), "{kind} {norm} {act}");
                }
            }
        }
    }

    #[test]
    fn output_shape_and_extent_checks() {
        let cfg = BlockConfig::new(BlockKind::Ffd, 2, 4, 6, 10);
        let block = ConvBlock::new(cfg, "b").unwrap();
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut rng(1));
        let x = Tensor::uniform(vec![3, 2, 6, 10], -1.0, 1.0, &mut rng(2));
        let y = block_forward(&block, &store, &x, 1.0).unwrap();
        assert_eq!(y.shape(), &[3, 4, 6, 10]);
        let wrong = Tensor::zeros(vec![3, 2, 7, 10]);
        assert!(matches!(
            block_forward(&block, &store, &wrong, 1.0),
            Err(Error::Dim { axis: "frames", .. })
        ));
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("ffd".parse::<BlockKind>().unwrap(), BlockKind::Ffd);
        assert!("fft".parse::<BlockKind>().is_err());
    }
}
