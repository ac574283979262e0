//! Building blocks shared by the backbone and every auxiliary classifier.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Mode, Var};
use crate::params::{Owner, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Two 3x3 conv-BN-ReLU layers with an identity or projection shortcut.
    BasicResidual,
    /// A single 3x3 conv-BN-ReLU layer per block.
    PlainConv,
    /// Global average pooling followed by one fully connected layer.
    ClassifierHead,
}

/// One stage: `num_blocks` blocks of `kind` producing `out_channels`.
/// A stride of 2 halves the spatial extent once, at the first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub out_channels: usize,
    pub num_blocks: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn residual(out_channels: usize, num_blocks: usize, stride: usize) -> Self {
        Self {
            kind: BlockKind::BasicResidual,
            out_channels,
            num_blocks,
            stride,
        }
    }

    pub fn plain(out_channels: usize, num_blocks: usize, stride: usize) -> Self {
        Self {
            kind: BlockKind::PlainConv,
            out_channels,
            num_blocks,
            stride,
        }
    }

    pub fn classifier(num_classes: usize) -> Self {
        Self {
            kind: BlockKind::ClassifierHead,
            out_channels: num_classes,
            num_blocks: 1,
            stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.num_blocks == 0 {
            return Err(Error::config(format!(
                "block spec {self:?} needs positive out_channels and num_blocks"
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::config(format!(
                "block spec {self:?} has stride {}, expected 1 or 2",
                self.stride
            )));
        }
        if self.kind == BlockKind::ClassifierHead && (self.stride != 1 || self.num_blocks != 1) {
            return Err(Error::config(
                "classifier-head spec must have stride 1 and a single block",
            ));
        }
        Ok(())
    }
}

/// Number of spatial halvings along a path of stages.
pub fn count_downsamples<'a>(specs: impl IntoIterator<Item = &'a BlockSpec>) -> usize {
    specs.into_iter().filter(|s| s.stride == 2).count()
}

/// Creates named, initialized parameters in a store.
///
/// Conv and linear weights are drawn from `N(0, 2/fan_in)`; biases and BN
/// shifts start at zero, BN scales at one, running variance at one.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    owner: Owner,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, owner: Owner) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            owner,
        }
    }

    /// Runs `f` with `name` appended to the parameter-name prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.len();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(name);
        let out = f(self);
        self.prefix.truncate(saved);
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    fn add(&mut self, leaf: &str, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = self.full_name(leaf);
        self.store.add(name, value, kind, self.owner)
    }

    pub fn he_normal(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::of(dist.sample(self.rng))).collect();
        self.add(leaf, Tensor::new(shape, data)?, ParamKind::Trainable)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(
            leaf,
            Tensor::full(shape, T::of(value)),
            ParamKind::Trainable,
        )
    }

    pub fn running(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(
            leaf,
            Tensor::full(shape, T::of(value)),
            ParamKind::RunningStat,
        )
    }
}

/// Per-forward state: mode, the dropout stream and the batch statistics
/// waiting to be folded into running statistics.
pub struct ForwardCtx<'r> {
    pub mode: Mode,
    pub dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
    pub(crate) stat_updates: Vec<StatUpdate>,
}

pub(crate) struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<f64>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: 0.0,
            rng: None,
            stat_updates: Vec::new(),
        }
    }

    pub fn train(dropout: f64, rng: Option<&'r mut ChaCha8Rng>) -> Self {
        Self {
            mode: Mode::Train,
            dropout,
            rng,
            stat_updates: Vec::new(),
        }
    }

    /// Applies the collected batch statistics to the running statistics by
    /// exponential moving average.
    pub fn apply_stat_updates<T: Scalar>(self, store: &mut ParamStore<T>) {
        for up in self.stat_updates {
            let mean: Vec<T> = up.stats.mean.iter().map(|&v| T::of(v)).collect();
            let var: Vec<T> = up.stats.var.iter().map(|&v| T::of(v)).collect();
            crate::norm::ema_update(store.value_mut(up.mean).data_mut(), &mean);
            crate::norm::ema_update(store.value_mut(up.var).data_mut(), &var);
        }
    }

    pub fn pending_updates(&self) -> usize {
        self.stat_updates.len()
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[channels], 1.0)?,
            beta: pb.constant("beta", &[channels], 0.0)?,
            running_mean: pb.running("running_mean", &[channels], 0.0)?,
            running_var: pb.running("running_var", &[channels], 1.0)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = g.batchnorm_train(x, gamma, beta)?;
                ctx.stat_updates.push(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats: BatchStats {
                        mean: stats.mean.iter().map(|v| v.as_f64()).collect(),
                        var: stats.var.iter().map(|v| v.as_f64()).collect(),
                    },
                });
                Ok(y)
            }
            Mode::Eval => g.batchnorm_eval(
                x,
                gamma,
                beta,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
            ),
        }
    }
}

/// Convolution followed by batch-norm (no convolution bias).
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBn {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = pb.he_normal(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
        )?;
        let bn = pb.scope("bn", |pb| BatchNorm::build(pb, out_channels))?;
        Ok(Self {
            weight,
            bn,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.conv2d(x, w, None, self.stride, self.padding)?;
        self.bn.forward(g, store, y, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    /// 1x1 projection when channels or stride change; identity otherwise.
    pub shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = pb.scope("conv1", |pb| {
            ConvBn::build(pb, in_channels, out_channels, 3, stride)
        })?;
        let conv2 = pb.scope("conv2", |pb| {
            ConvBn::build(pb, out_channels, out_channels, 3, 1)
        })?;
        let shortcut = if in_channels != out_channels || stride != 1 {
            Some(pb.scope("shortcut", |pb| {
                ConvBn::build(pb, in_channels, out_channels, 1, stride)
            })?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            shortcut,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let h = self.conv1.forward(g, store, x, ctx)?;
        let mut h = g.relu(h);
        if ctx.dropout > 0.0 && ctx.mode == Mode::Train {
            let p = ctx.dropout;
            let rng = ctx
                .rng
                .as_deref_mut()
                .ok_or_else(|| Error::usage("train-mode dropout needs a random stream"))?;
            h = g.dropout(h, p, Mode::Train, rng)?;
        }
        let h = self.conv2.forward(g, store, h, ctx)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, store, x, ctx)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }
}

/// Global average pooling + fully connected layer.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Classifier {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        in_channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: pb.he_normal("weight", &[num_classes, in_channels], in_channels)?,
            bias: pb.constant("bias", &[num_classes], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(pooled, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Residual(ResidualBlock),
    Plain(ConvBn),
    Classifier(Classifier),
}

/// A parameterized sub-network built from one [`BlockSpec`].
#[derive(Debug, Clone)]
pub struct Stage {
    pub spec: BlockSpec,
    pub in_channels: usize,
    pub blocks: Vec<Block>,
}

/// Builds a stage taking `in_channels` inputs; parameter names are
/// `block{i}.…` under the builder's current scope.
pub fn build_stage<T: Scalar>(
    spec: &BlockSpec,
    in_channels: usize,
    pb: &mut ParamBuilder<'_, T>,
) -> Result<Stage> {
    spec.validate()?;
    if in_channels == 0 {
        return Err(Error::config("stage needs at least one input channel"));
    }
    let mut blocks = Vec::with_capacity(spec.num_blocks);
    let mut cin = in_channels;
    for i in 0..spec.num_blocks {
        let stride = if i == 0 { spec.stride } else { 1 };
        let block = pb.scope(&format!("block{i}"), |pb| -> Result<Block> {
            Ok(match spec.kind {
                BlockKind::BasicResidual => {
                    Block::Residual(ResidualBlock::build(pb, cin, spec.out_channels, stride)?)
                }
                BlockKind::PlainConv => {
                    Block::Plain(ConvBn::build(pb, cin, spec.out_channels, 3, stride)?)
                }
                BlockKind::ClassifierHead => {
                    Block::Classifier(Classifier::build(pb, cin, spec.out_channels)?)
                }
            })
        })?;
        blocks.push(block);
        cin = spec.out_channels;
    }
    Ok(Stage {
        spec: *spec,
        in_channels,
        blocks,
    })
}

impl Stage {
    /// Output shape (without batch axis) for an input of `in_shape`.
    pub fn output_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        stage_output_shape(&self.spec, self.in_channels, in_shape)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let shape = g.shape(x);
        self.output_shape(&shape[1..])?;
        for block in &self.blocks {
            x = match block {
                Block::Residual(b) => b.forward(g, store, x, ctx)?,
                Block::Plain(c) => {
                    let y = c.forward(g, store, x, ctx)?;
                    g.relu(y)
                }
                Block::Classifier(c) => c.forward(g, store, x)?,
            };
        }
        Ok(x)
    }
}

/// Shape arithmetic for one stage: `C x H x W` → `out x ceil(H/s) x ceil(W/s)`,
/// or `K` for a classifier head.
pub fn stage_output_shape(
    spec: &BlockSpec,
    in_channels: usize,
    in_shape: &[usize],
) -> Result<Vec<usize>> {
    let &[c, h, w] = in_shape else {
        return Err(Error::config(format!(
            "stage expects a C x H x W feature map, got {in_shape:?}"
        )));
    };
    if c != in_channels {
        return Err(Error::config(format!(
            "stage expects {in_channels} input channels, got {c}"
        )));
    }
    if spec.kind == BlockKind::ClassifierHead {
        return Ok(vec![spec.out_channels]);
    }
    if spec.stride == 2 && (h < 2 || w < 2) {
        return Err(Error::config(format!(
            "stride-2 stage cannot down-sample a {h}x{w} feature map"
        )));
    }
    Ok(vec![
        spec.out_channels,
        h.div_ceil(spec.stride),
        w.div_ceil(spec.stride),
    ])
}
