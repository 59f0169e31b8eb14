use rand::Rng;

use super::arch::{Architecture, BlockKind, BlockSpec};
use super::mask::ArchMask;
use crate::tensor::nn::{bind, Bind, Linear};
use crate::tensor::{BatchStats, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistics moving average.
pub const BN_DECAY: f64 = 0.9;

/// Convolution followed by batch norm, with running statistics.
#[derive(Clone, Debug)]
pub struct ConvBn<S> {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl<S: Scalar> ConvBn<S> {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        // He-normal on fan-in.
        let fan_in = (c_in / groups) * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[c_out, c_in / groups, k, k], (2.0 / fan_in as f64).sqrt(), rng),
        );
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::ones(&[c_out]));
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(&[c_out]));
        ConvBn {
            weight,
            gamma,
            beta,
            running_mean: vec![S::zero(); c_out],
            running_var: vec![S::one(); c_out],
            stride,
            pad: k / 2,
            groups,
        }
    }

    fn forward(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        opts: &ForwardOpts,
        stats: &mut Vec<BatchStats<S>>,
    ) -> Result<Var> {
        let w = bind(g, store, self.weight, opts.bind);
        let y = g.conv2d(x, w, self.stride, self.pad, self.groups)?;
        let gamma = bind(g, store, self.gamma, opts.bind);
        let beta = bind(g, store, self.beta, opts.bind);
        if opts.bn_train {
            let (out, s) = g.batch_norm_train(y, gamma, beta, BN_EPS)?;
            stats.push(s);
            Ok(out)
        } else {
            g.batch_norm_eval(y, gamma, beta, &self.running_mean, &self.running_var, BN_EPS)
        }
    }

    fn absorb(&mut self, s: &BatchStats<S>) {
        let d = S::lit(BN_DECAY);
        let n: f64 = s.count as f64;
        let unbias: f64 = if s.count > 1 { n / (n - 1.0) } else { 1.0 };
        let unbias = S::lit(unbias);
        for (r, &m) in self.running_mean.iter_mut().zip(&s.mean) {
            *r = d * *r + (S::one() - d) * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&s.var) {
            *r = d * *r + (S::one() - d) * v * unbias;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block<S> {
    pub spec: BlockSpec,
    /// Residual/plain: first k×k conv. Inverted residual: 1×1 expansion.
    pub conv1: ConvBn<S>,
    /// Depthwise k×k conv (inverted residual only).
    pub dw: Option<ConvBn<S>>,
    /// Residual/plain: second k×k conv. Inverted residual: 1×1 projection.
    pub conv2: ConvBn<S>,
    pub shortcut: Option<ConvBn<S>>,
}

impl<S> Block<S> {
    fn conv_bns(&self) -> impl Iterator<Item = &ConvBn<S>> {
        std::iter::once(&self.conv1)
            .chain(self.dw.iter())
            .chain(std::iter::once(&self.conv2))
            .chain(self.shortcut.iter())
    }

    fn conv_bns_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<S>> {
        std::iter::once(&mut self.conv1)
            .chain(self.dw.iter_mut())
            .chain(std::iter::once(&mut self.conv2))
            .chain(self.shortcut.iter_mut())
    }
}

/// How a forward pass treats batch norm, parameters and masks.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts<'a> {
    pub bn_train: bool,
    pub bind: Bind,
    pub mask: Option<&'a ArchMask>,
}

impl<'a> ForwardOpts<'a> {
    pub fn train() -> Self {
        ForwardOpts {
            bn_train: true,
            bind: Bind::Train,
            mask: None,
        }
    }

    pub fn eval(mask: Option<&'a ArchMask>) -> Self {
        ForwardOpts {
            bn_train: false,
            bind: Bind::Frozen,
            mask,
        }
    }
}

/// A block-structured CNN whose blocks' inner channels can be masked or removed.
#[derive(Debug)]
pub struct PrunableModel<S> {
    pub arch: Architecture,
    pub store: ParamStore<S>,
    pub stem: ConvBn<S>,
    pub blocks: Vec<Block<S>>,
    pub head: Linear,
}

impl<S: Scalar> Clone for PrunableModel<S> {
    fn clone(&self) -> Self {
        PrunableModel {
            arch: self.arch.clone(),
            store: self.store.clone(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
        }
    }
}

impl<S: Scalar> PrunableModel<S> {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        if arch.stem.pool_stride != 1 {
            return Err(Error::Config(format!(
                "{}: stem pooling is supported by the FLOPs engine only",
                arch.name
            )));
        }
        let mut store = ParamStore::new();
        let stem = ConvBn::new(
            &mut store,
            "stem",
            arch.in_channels,
            arch.stem.channels,
            arch.stem.kernel,
            arch.stem.stride,
            1,
            rng,
        );
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for spec in &arch.blocks {
            let p = format!("block{}", spec.index);
            let (k, s, m) = (spec.kernel, spec.stride, spec.inner);
            let block = match spec.kind {
                BlockKind::Residual | BlockKind::PlainConv => {
                    let conv1 = ConvBn::new(&mut store, &format!("{p}.conv1"), spec.c_in, m, k, s, 1, rng);
                    let conv2 = ConvBn::new(&mut store, &format!("{p}.conv2"), m, spec.c_out, k, 1, 1, rng);
                    let shortcut = spec.has_projection_shortcut().then(|| {
                        ConvBn::new(&mut store, &format!("{p}.shortcut"), spec.c_in, spec.c_out, 1, s, 1, rng)
                    });
                    Block {
                        spec: spec.clone(),
                        conv1,
                        dw: None,
                        conv2,
                        shortcut,
                    }
                }
                BlockKind::InvertedResidual => {
                    let conv1 = ConvBn::new(&mut store, &format!("{p}.conv1"), spec.c_in, m, 1, 1, 1, rng);
                    let dw = ConvBn::new(&mut store, &format!("{p}.dw"), m, m, k, s, m, rng);
                    let conv2 = ConvBn::new(&mut store, &format!("{p}.conv2"), m, spec.c_out, 1, 1, 1, rng);
                    Block {
                        spec: spec.clone(),
                        conv1,
                        dw: Some(dw),
                        conv2,
                        shortcut: None,
                    }
                }
            };
            blocks.push(block);
        }
        let last = arch.blocks.last().map_or(arch.stem.channels, |b| b.c_out);
        let head = Linear::new(&mut store, "head", last, arch.num_classes, rng);
        Ok(PrunableModel {
            arch,
            store,
            stem,
            blocks,
            head,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Logits for `x: [N,C,H,W]`. In training-BN mode the batch statistics of
    /// every BN layer are returned (see [`Self::absorb_stats`]).
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: Var,
        opts: &ForwardOpts,
    ) -> Result<(Var, Vec<BatchStats<S>>)> {
        self.forward_with(g, &self.store, x, opts)
    }

    /// [`Self::forward`] reading parameters from `st`, which must share this
    /// model's layout. Gradients are routed to `st`.
    pub fn forward_with(
        &self,
        g: &mut Graph<S>,
        st: &ParamStore<S>,
        x: Var,
        opts: &ForwardOpts,
    ) -> Result<(Var, Vec<BatchStats<S>>)> {
        if let Some(m) = opts.mask {
            m.validate(&self.arch)?;
        }
        let mut stats = Vec::new();
        let mut h = self.stem.forward(g, st, x, opts, &mut stats)?;
        h = g.relu(h);
        for (i, b) in self.blocks.iter().enumerate() {
            let keep: Option<Vec<S>> = opts.mask.and_then(|m| {
                let v = &m.blocks[i];
                (!v.iter().all(|&k| k))
                    .then(|| v.iter().map(|&k| if k { S::one() } else { S::zero() }).collect())
            });
            let apply_mask = |g: &mut Graph<S>, v: Var| -> Result<Var> {
                match &keep {
                    Some(k) => g.channel_mask(v, k),
                    None => Ok(v),
                }
            };
            h = match b.spec.kind {
                BlockKind::Residual | BlockKind::PlainConv => {
                    let mut y = b.conv1.forward(g, st, h, opts, &mut stats)?;
                    y = g.relu(y);
                    y = apply_mask(g, y)?;
                    y = b.conv2.forward(g, st, y, opts, &mut stats)?;
                    if b.spec.kind == BlockKind::Residual {
                        let skip = match &b.shortcut {
                            Some(sc) => sc.forward(g, st, h, opts, &mut stats)?,
                            None => h,
                        };
                        y = g.add(y, skip)?;
                    }
                    g.relu(y)
                }
                BlockKind::InvertedResidual => {
                    let dw = b.dw.as_ref().expect("inverted residual has depthwise conv");
                    let mut y = b.conv1.forward(g, st, h, opts, &mut stats)?;
                    y = g.relu6(y);
                    y = dw.forward(g, st, y, opts, &mut stats)?;
                    y = g.relu6(y);
                    y = apply_mask(g, y)?;
                    y = b.conv2.forward(g, st, y, opts, &mut stats)?;
                    if b.spec.has_identity_add() {
                        y = g.add(y, h)?;
                    }
                    y
                }
            };
        }
        let pooled = g.global_avg_pool(h)?;
        let logits = self.head.forward(g, st, pooled, opts.bind)?;
        Ok((logits, stats))
    }

    /// Fold training-mode batch statistics into the running estimates.
    pub fn absorb_stats(&mut self, stats: &[BatchStats<S>]) -> Result<()> {
        let mut layers: Vec<&mut ConvBn<S>> = std::iter::once(&mut self.stem)
            .chain(self.blocks.iter_mut().flat_map(|b| b.conv_bns_mut()))
            .collect();
        if layers.len() != stats.len() {
            return Err(Error::InvalidArgument(format!(
                "{} batch statistics for {} BN layers",
                stats.len(),
                layers.len()
            )));
        }
        for (l, s) in layers.iter_mut().zip(stats) {
            l.absorb(s);
        }
        Ok(())
    }

    /// Eval-mode logits without building gradients.
    pub fn logits(&self, images: Tensor<S>, mask: Option<&ArchMask>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let x = g.constant(images);
        let (y, _) = self.forward(&mut g, x, &ForwardOpts::eval(mask))?;
        Ok(g.value(y).clone())
    }

    /// All BN layers in a fixed order (stem, then each block's convs).
    pub fn conv_bns(&self) -> Vec<&ConvBn<S>> {
        std::iter::once(&self.stem)
            .chain(self.blocks.iter().flat_map(|b| b.conv_bns()))
            .collect()
    }

    /// Ranking of block `l` (0-based) inner channels by the L1 norm of the
    /// first convolution's filters.
    pub fn rank_block(&self, l: usize) -> Vec<usize> {
        super::mask::rank_channels_l1(self.store.value(self.blocks[l].conv1.weight))
    }

    pub fn rank_all(&self) -> Vec<Vec<usize>> {
        (0..self.blocks.len()).map(|l| self.rank_block(l)).collect()
    }

    pub fn cast<T: Scalar>(&self) -> PrunableModel<T> {
        let conv = |c: &ConvBn<S>| ConvBn {
            weight: c.weight,
            gamma: c.gamma,
            beta: c.beta,
            running_mean: c.running_mean.iter().map(|v| T::lit(v.as_f64())).collect(),
            running_var: c.running_var.iter().map(|v| T::lit(v.as_f64())).collect(),
            stride: c.stride,
            pad: c.pad,
            groups: c.groups,
        };
        PrunableModel {
            arch: self.arch.clone(),
            store: self.store.cast(),
            stem: conv(&self.stem),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    spec: b.spec.clone(),
                    conv1: conv(&b.conv1),
                    dw: b.dw.as_ref().map(conv),
                    conv2: conv(&b.conv2),
                    shortcut: b.shortcut.as_ref().map(conv),
                })
                .collect(),
            head: self.head.clone(),
        }
    }

    pub fn values_finite(&self) -> bool {
        self.store.iter().all(|p| p.value.is_finite())
    }
}
