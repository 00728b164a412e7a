//! Encoder → projector → predictor stack.
//!
//! `z = projector(encoder(x))`, `p = predictor(z)`. The siamese loss only
//! ever hands gradients to `p`; the projector and encoder see the siamese
//! objective solely through the predictor, plus whatever gradient the
//! supervised contrastive branch sends directly into `z`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{
    global_avg_pool, global_avg_pool_backward, max_pool2, max_pool2_backward, relu, relu_backward, BatchNorm, BnCache,
    Conv2d, ConvCache, Linear, Mode, Module, Param, PoolCache,
};
use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Architecture {
    /// Conv–BN–ReLU blocks with 2×2 max pooling between them.
    SmallConv,
    /// Residual basic blocks with strided downsampling.
    ResNetLike,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct EncoderConfig {
    pub architecture: Architecture,
    /// Channel width of each stage.
    pub widths: Vec<usize>,
    /// Residual blocks per stage (`ResNetLike` only).
    pub depths: Vec<usize>,
    /// Projector / predictor output dimension `d`.
    pub feature_dim: usize,
    /// Side of the (square) input in pixels.
    pub input_side: usize,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Desk-scale default: four conv blocks, `d = 128`, 32-pixel inputs.
    pub fn desk() -> Self {
        Self {
            architecture: Architecture::SmallConv,
            widths: vec![8, 16, 32, 64],
            depths: vec![],
            feature_dim: 128,
            input_side: 32,
            in_channels: 3,
        }
    }

    /// ResNet-50-sized widths and depths with a 2048-d output at 128 pixels.
    pub fn paper_scale() -> Self {
        Self {
            architecture: Architecture::ResNetLike,
            widths: vec![256, 512, 1024, 2048],
            depths: vec![3, 4, 6, 3],
            feature_dim: 2048,
            input_side: 128,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 {
            return Err(Error::Config(alloc::format!("feature dim must be ≥ 8, got {}", self.feature_dim)));
        }
        if self.input_side < 16 {
            return Err(Error::Config(alloc::format!("input side must be ≥ 16, got {}", self.input_side)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("encoder widths must be nonempty and positive".into()));
        }
        if self.architecture == Architecture::ResNetLike
            && (self.depths.len() != self.widths.len() || self.depths.contains(&0))
        {
            return Err(Error::Config("resnet-like encoder needs one positive depth per stage".into()));
        }
        if self.architecture == Architecture::SmallConv && self.input_side >> (self.widths.len() - 1) == 0 {
            return Err(Error::Config("too many pooling stages for the input side".into()));
        }
        Ok(())
    }

    /// Width of the backbone output.
    pub fn backbone_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub pool: bool,
}

#[derive(Clone, Debug)]
struct ConvBlockCache<T> {
    conv: ConvCache<T>,
    bn: BnCache<T>,
    act: Tensor<T>,
    pool: Option<PoolCache>,
}

impl<T: Scalar> ConvBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, ConvBlockCache<T>) {
        let (y, conv) = self.conv.forward(x);
        let (y, bn) = self.bn.forward(&y, mode);
        let act = relu(y);
        if self.pool {
            let (out, pool) = max_pool2(&act);
            (out, ConvBlockCache { conv, bn, act, pool: Some(pool) })
        } else {
            (act.clone(), ConvBlockCache { conv, bn, act, pool: None })
        }
    }

    fn backward(&mut self, cache: &ConvBlockCache<T>, grad: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let mut g = match &cache.pool {
            Some(p) => max_pool2_backward(p, grad),
            None => grad.clone(),
        };
        relu_backward(&cache.act, &mut g);
        let g = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.conv, &g, input_grad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm<T>)>,
}

#[derive(Clone, Debug)]
struct BasicBlockCache<T> {
    c1: ConvCache<T>,
    b1: BnCache<T>,
    a1: Tensor<T>,
    c2: ConvCache<T>,
    b2: BnCache<T>,
    short: Option<(ConvCache<T>, BnCache<T>)>,
    out: Tensor<T>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || cin != cout)
            .then(|| (Conv2d::new(cin, cout, 1, stride, false, rng), BatchNorm::new(cout, true)));
        Self {
            conv1: Conv2d::new(cin, cout, 3, stride, false, rng),
            bn1: BatchNorm::new(cout, true),
            conv2: Conv2d::new(cout, cout, 3, 1, false, rng),
            bn2: BatchNorm::new(cout, true),
            shortcut,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, BasicBlockCache<T>) {
        let (y, c1) = self.conv1.forward(x);
        let (y, b1) = self.bn1.forward(&y, mode);
        let a1 = relu(y);
        let (y, c2) = self.conv2.forward(&a1);
        let (mut y, b2) = self.bn2.forward(&y, mode);
        let short = match &mut self.shortcut {
            Some((conv, bn)) => {
                let (s, cc) = conv.forward(x);
                let (s, bc) = bn.forward(&s, mode);
                y.add_assign(&s);
                Some((cc, bc))
            }
            None => {
                y.add_assign(x);
                None
            }
        };
        let out = relu(y);
        (out.clone(), BasicBlockCache { c1, b1, a1, c2, b2, short, out })
    }

    fn backward(&mut self, cache: &BasicBlockCache<T>, grad: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let mut g = grad.clone();
        relu_backward(&cache.out, &mut g);
        let skip = match (&mut self.shortcut, &cache.short) {
            (Some((conv, bn)), Some((cc, bc))) => {
                let gs = bn.backward(bc, &g);
                conv.backward(cc, &gs, input_grad)
            }
            _ => input_grad.then(|| g.clone()),
        };
        let g2 = self.bn2.backward(&cache.b2, &g);
        let mut g1 = self.conv2.backward(&cache.c2, &g2, true).unwrap();
        relu_backward(&cache.a1, &mut g1);
        let g1 = self.bn1.backward(&cache.b1, &g1);
        let main = self.conv1.backward(&cache.c1, &g1, input_grad);
        match (main, skip) {
            (Some(mut m), Some(s)) => {
                m.add_assign(&s);
                Some(m)
            }
            _ => None,
        }
    }
}

// one per model, so the size gap between variants does not matter
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder<T> {
    SmallConv(Vec<ConvBlock<T>>),
    ResNetLike { stem: ConvBlock<T>, blocks: Vec<BasicBlock<T>> },
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    blocks: Vec<ConvBlockCache<T>>,
    residual: Vec<BasicBlockCache<T>>,
    pooled_shape: Vec<usize>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        match cfg.architecture {
            Architecture::SmallConv => {
                let mut cin = cfg.in_channels;
                let last = cfg.widths.len() - 1;
                let blocks = cfg
                    .widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let b = ConvBlock {
                            conv: Conv2d::new(cin, w, 3, 1, false, rng),
                            bn: BatchNorm::new(w, true),
                            pool: i < last,
                        };
                        cin = w;
                        b
                    })
                    .collect();
                Encoder::SmallConv(blocks)
            }
            Architecture::ResNetLike => {
                let w0 = cfg.widths[0];
                let stem = ConvBlock {
                    conv: Conv2d::new(cfg.in_channels, w0, 3, 1, false, rng),
                    bn: BatchNorm::new(w0, true),
                    pool: false,
                };
                let mut blocks = Vec::new();
                let mut cin = w0;
                for (stage, (&w, &depth)) in cfg.widths.iter().zip(&cfg.depths).enumerate() {
                    for i in 0..depth {
                        let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                        blocks.push(BasicBlock::new(cin, w, stride, rng));
                        cin = w;
                    }
                }
                Encoder::ResNetLike { stem, blocks }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, EncoderCache<T>) {
        let mut cache = EncoderCache { blocks: Vec::new(), residual: Vec::new(), pooled_shape: Vec::new() };
        let mut h = x.clone();
        match self {
            Encoder::SmallConv(blocks) => {
                for b in blocks {
                    let (y, c) = b.forward(&h, mode);
                    cache.blocks.push(c);
                    h = y;
                }
            }
            Encoder::ResNetLike { stem, blocks } => {
                let (y, c) = stem.forward(&h, mode);
                cache.blocks.push(c);
                h = y;
                for b in blocks {
                    let (y, c) = b.forward(&h, mode);
                    cache.residual.push(c);
                    h = y;
                }
            }
        }
        cache.pooled_shape = h.shape().to_vec();
        (global_avg_pool(&h), cache)
    }

    /// Accumulates gradients for `∂L/∂(backbone output)`; input gradient is
    /// never needed (images are leaves).
    pub fn backward(&mut self, cache: &EncoderCache<T>, grad: &Tensor<T>) {
        let mut g = global_avg_pool_backward(&cache.pooled_shape, grad);
        match self {
            Encoder::SmallConv(blocks) => {
                for (i, (b, c)) in blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
                    if let Some(next) = b.backward(c, &g, i > 0) {
                        g = next;
                    }
                }
            }
            Encoder::ResNetLike { stem, blocks } => {
                for (b, c) in blocks.iter_mut().zip(&cache.residual).rev() {
                    g = b.backward(c, &g, true).unwrap();
                }
                stem.backward(&cache.blocks[0], &g, false);
            }
        }
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }
    fn buffers(&self) -> Vec<&Vec<T>> {
        self.bn.buffers()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.bn.buffers_mut()
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv1.params();
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        if let Some((c, b)) = &self.shortcut {
            v.extend(c.params());
            v.extend(b.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some((c, b)) = &mut self.shortcut {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        v
    }
    fn buffers(&self) -> Vec<&Vec<T>> {
        let mut v = self.bn1.buffers();
        v.extend(self.bn2.buffers());
        if let Some((_, b)) = &self.shortcut {
            v.extend(b.buffers());
        }
        v
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = self.bn1.buffers_mut();
        v.extend(self.bn2.buffers_mut());
        if let Some((_, b)) = &mut self.shortcut {
            v.extend(b.buffers_mut());
        }
        v
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Encoder::SmallConv(b) => b.iter().flat_map(|b| b.params()).collect(),
            Encoder::ResNetLike { stem, blocks } => {
                let mut v = stem.params();
                v.extend(blocks.iter().flat_map(|b| b.params()));
                v
            }
        }
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Encoder::SmallConv(b) => b.iter_mut().flat_map(|b| b.params_mut()).collect(),
            Encoder::ResNetLike { stem, blocks } => {
                let mut v = stem.params_mut();
                v.extend(blocks.iter_mut().flat_map(|b| b.params_mut()));
                v
            }
        }
    }
    fn buffers(&self) -> Vec<&Vec<T>> {
        match self {
            Encoder::SmallConv(b) => b.iter().flat_map(|b| b.buffers()).collect(),
            Encoder::ResNetLike { stem, blocks } => {
                let mut v = stem.buffers();
                v.extend(blocks.iter().flat_map(|b| b.buffers()));
                v
            }
        }
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Encoder::SmallConv(b) => b.iter_mut().flat_map(|b| b.buffers_mut()).collect(),
            Encoder::ResNetLike { stem, blocks } => {
                let mut v = stem.buffers_mut();
                v.extend(blocks.iter_mut().flat_map(|b| b.buffers_mut()));
                v
            }
        }
    }
}

/// Linear → optional BN → optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub linear: Linear<T>,
    pub bn: Option<BatchNorm<T>>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
struct DenseCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    out: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    layers: Vec<DenseCache<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Three layers, every output batch-normalized, the last without affine
    /// parameters or activation.
    pub fn projector<R: Rng + ?Sized>(in_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![
                Dense { linear: Linear::new(in_dim, dim, false, rng), bn: Some(BatchNorm::new(dim, true)), relu: true },
                Dense { linear: Linear::new(dim, dim, false, rng), bn: Some(BatchNorm::new(dim, true)), relu: true },
                Dense { linear: Linear::new(dim, dim, false, rng), bn: Some(BatchNorm::new(dim, false)), relu: false },
            ],
        }
    }

    /// Two-layer bottleneck (`dim → dim/4 → dim`).
    pub fn predictor<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let hidden = (dim / 4).max(1);
        Self {
            layers: vec![
                Dense {
                    linear: Linear::new(dim, hidden, false, rng),
                    bn: Some(BatchNorm::new(hidden, true)),
                    relu: true,
                },
                Dense { linear: Linear::new(hidden, dim, true, rng), bn: None, relu: false },
            ],
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, MlpCache<T>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &mut self.layers {
            let y = l.linear.forward(&h);
            let (y, bn) = match &mut l.bn {
                Some(b) => {
                    let (y, c) = b.forward(&y, mode);
                    (y, Some(c))
                }
                None => (y, None),
            };
            let y = if l.relu { relu(y) } else { y };
            caches.push(DenseCache { input: h, bn, out: y.clone() });
            h = y;
        }
        (h, MlpCache { layers: caches })
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = grad.clone();
        for (l, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            if l.relu {
                relu_backward(&c.out, &mut g);
            }
            if let (Some(b), Some(bc)) = (&mut l.bn, &c.bn) {
                g = b.backward(bc, &g);
            }
            g = l.linear.backward(&c.input, &g);
        }
        g
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.linear.params());
            if let Some(b) = &l.bn {
                v.extend(b.params());
            }
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend(l.linear.params_mut());
            if let Some(b) = &mut l.bn {
                v.extend(b.params_mut());
            }
        }
        v
    }
    fn buffers(&self) -> Vec<&Vec<T>> {
        self.layers.iter().filter_map(|l| l.bn.as_ref()).flat_map(|b| b.buffers()).collect()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers.iter_mut().filter_map(|l| l.bn.as_mut()).flat_map(|b| b.buffers_mut()).collect()
    }
}

/// Projector outputs `z` and predictor outputs `p` for two views of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbeddings<T> {
    pub z1: Tensor<T>,
    pub z2: Tensor<T>,
    pub p1: Tensor<T>,
    pub p2: Tensor<T>,
}

impl<T: Scalar> ViewEmbeddings<T> {
    pub fn cast<U: Scalar>(&self) -> ViewEmbeddings<U> {
        ViewEmbeddings { z1: self.z1.cast(), z2: self.z2.cast(), p1: self.p1.cast(), p2: self.p2.cast() }
    }
}

/// How far a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Depth {
    Backbone,
    Projector,
    Predictor,
}

#[derive(Clone, Debug)]
pub struct BranchOutput<T> {
    pub h: Tensor<T>,
    pub z: Option<Tensor<T>>,
    pub p: Option<Tensor<T>>,
    cache: BranchCache<T>,
}

#[derive(Clone, Debug)]
struct BranchCache<T> {
    encoder: EncoderCache<T>,
    projector: Option<MlpCache<T>>,
    predictor: Option<MlpCache<T>>,
}

/// Upstream gradients for one branch. `z` is the gradient that reaches the
/// projector output directly, never through the predictor.
#[derive(Clone, Debug, Default)]
pub struct BranchGrad<'a, T> {
    pub h: Option<&'a Tensor<T>>,
    pub z: Option<&'a Tensor<T>>,
    pub p: Option<&'a Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSiam<T> {
    pub config: EncoderConfig,
    pub encoder: Encoder<T>,
    pub projector: Mlp<T>,
    pub predictor: Mlp<T>,
}

impl<T: Scalar> SimSiam<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config, rng);
        let projector = Mlp::projector(config.backbone_dim(), config.feature_dim, rng);
        let predictor = Mlp::predictor(config.feature_dim, rng);
        Ok(Self { config, encoder, projector, predictor })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.input_side || s[2] != c.input_side || s[3] != c.in_channels || s[0] == 0 {
            return Err(Error::Shape(alloc::format!(
                "expected N×{0}×{0}×{1} images, got {s:?}",
                c.input_side,
                c.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward_branch(&mut self, x: &Tensor<T>, depth: Depth, mode: Mode) -> Result<BranchOutput<T>> {
        self.check_input(x)?;
        let (h, encoder) = self.encoder.forward(x, mode);
        let mut out =
            BranchOutput { h, z: None, p: None, cache: BranchCache { encoder, projector: None, predictor: None } };
        if depth >= Depth::Projector {
            let (z, c) = self.projector.forward(&out.h, mode);
            out.cache.projector = Some(c);
            out.z = Some(z);
        }
        if depth >= Depth::Predictor {
            let (p, c) = self.predictor.forward(out.z.as_ref().unwrap(), mode);
            out.cache.predictor = Some(c);
            out.p = Some(p);
        }
        Ok(out)
    }

    pub fn backward_branch(&mut self, out: &BranchOutput<T>, grad: BranchGrad<'_, T>) {
        let mut gz: Option<Tensor<T>> = grad.z.cloned();
        if let (Some(gp), Some(pc)) = (grad.p, &out.cache.predictor) {
            let through = self.predictor.backward(pc, gp);
            match &mut gz {
                Some(g) => g.add_assign(&through),
                None => gz = Some(through),
            }
        }
        let mut gh: Option<Tensor<T>> = grad.h.cloned();
        if let (Some(gz), Some(pc)) = (&gz, &out.cache.projector) {
            let through = self.projector.backward(pc, gz);
            match &mut gh {
                Some(g) => g.add_assign(&through),
                None => gh = Some(through),
            }
        }
        if let Some(gh) = gh {
            self.encoder.backward(&out.cache.encoder, &gh);
        }
    }

    /// Both views through the full stack.
    pub fn forward_views(
        &mut self,
        view1: &Tensor<T>,
        view2: &Tensor<T>,
        mode: Mode,
    ) -> Result<(ViewEmbeddings<T>, [BranchOutput<T>; 2])> {
        if view1.shape() != view2.shape() {
            return Err(Error::Shape(alloc::format!("views differ: {:?} vs {:?}", view1.shape(), view2.shape())));
        }
        let b1 = self.forward_branch(view1, Depth::Predictor, mode)?;
        let b2 = self.forward_branch(view2, Depth::Predictor, mode)?;
        let e = ViewEmbeddings {
            z1: b1.z.clone().unwrap(),
            z2: b2.z.clone().unwrap(),
            p1: b1.p.clone().unwrap(),
            p2: b2.p.clone().unwrap(),
        };
        Ok((e, [b1, b2]))
    }

    /// Un-normalized projector outputs in eval mode.
    pub fn encode_features(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_branch(images, Depth::Projector, Mode::Eval)?.z.unwrap())
    }

    /// Backbone (pooled encoder) outputs in eval mode.
    pub fn encode_backbone(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_branch(images, Depth::Backbone, Mode::Eval)?.h)
    }

    pub fn encoder_params(&self) -> Vec<&Param<T>> {
        self.encoder.params()
    }
}

impl<T: Scalar> Module<T> for SimSiam<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.encoder.params();
        v.extend(self.projector.params());
        v.extend(self.predictor.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.projector.params_mut());
        v.extend(self.predictor.params_mut());
        v
    }
    fn buffers(&self) -> Vec<&Vec<T>> {
        let mut v = self.encoder.buffers();
        v.extend(self.projector.buffers());
        v.extend(self.predictor.buffers());
        v
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = self.encoder.buffers_mut();
        v.extend(self.projector.buffers_mut());
        v.extend(self.predictor.buffers_mut());
        v
    }
}

/// Encoder plus a single affine layer to two logits, trained end to end
/// with cross-entropy (the fully supervised arm).
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub config: EncoderConfig,
    pub encoder: Encoder<T>,
    pub head: Linear<T>,
}

pub struct ClassifierOutput<T> {
    pub logits: Tensor<T>,
    h: Tensor<T>,
    cache: EncoderCache<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config, rng);
        let head = Linear::new(config.backbone_dim(), 2, true, rng);
        Ok(Self { config, encoder, head })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> ClassifierOutput<T> {
        let (h, cache) = self.encoder.forward(x, mode);
        ClassifierOutput { logits: self.head.forward(&h), h, cache }
    }

    pub fn backward(&mut self, out: &ClassifierOutput<T>, grad_logits: &Tensor<T>) {
        let gh = self.head.backward(&out.h, grad_logits);
        self.encoder.backward(&out.cache, &gh);
    }
}

impl<T: Scalar> Module<T> for Classifier<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.encoder.params();
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v
    }
    fn buffers(&self) -> Vec<&Vec<T>> {
        self.encoder.buffers()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.encoder.buffers_mut()
    }
}
