#![allow(dead_code)]

use coprune::model::arch::{ArchDescription, BlockKind, BlockRecord, StemRecord};
use coprune::model::{ArchMask, Architecture, PrunableModel};
use coprune::tensor::{Scalar, Tensor};
use rand::Rng;

/// A small random architecture mixing all block kinds.
pub fn random_arch<R: Rng>(rng: &mut R, max_blocks: usize) -> Architecture {
    let n = rng.random_range(1..=max_blocks);
    let mut blocks = Vec::new();
    for _ in 0..n {
        let kind = match rng.random_range(0..3) {
            0 => BlockKind::Residual,
            1 => BlockKind::InvertedResidual,
            _ => BlockKind::PlainConv,
        };
        blocks.push(BlockRecord {
            kind,
            out_channels: rng.random_range(2..6),
            inner_channels: rng.random_range(1..7),
            stride: rng.random_range(1..=2),
            kernel: if rng.random_bool(0.7) { 3 } else { 1 },
        });
    }
    ArchDescription {
        name: "random".into(),
        in_channels: 3,
        input_size: 8,
        num_classes: 4,
        stem: StemRecord {
            channels: rng.random_range(2..5),
            kernel: 3,
            stride: 1,
            pool_stride: 1,
        },
        blocks,
    }
    .resolve()
    .unwrap()
}

pub fn random_mask<R: Rng>(rng: &mut R, arch: &Architecture) -> ArchMask {
    ArchMask {
        blocks: arch
            .blocks
            .iter()
            .map(|b| {
                let mut v: Vec<bool> = (0..b.inner).map(|_| rng.random_bool(0.5)).collect();
                let keep = rng.random_range(0..b.inner);
                v[keep] = true;
                v
            })
            .collect(),
    }
}

/// Give every BN layer non-trivial running statistics and affine terms.
pub fn perturb_bn<S: Scalar, R: Rng>(model: &mut PrunableModel<S>, rng: &mut R) {
    let ids: Vec<_> = model
        .conv_bns()
        .iter()
        .flat_map(|c| [c.gamma, c.beta])
        .collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v = S::lit(rng.random_range(0.5..1.5));
        }
    }
    let mut layers: Vec<_> = std::iter::once(&mut model.stem)
        .chain(model.blocks.iter_mut().flat_map(|b| {
            std::iter::once(&mut b.conv1)
                .chain(b.dw.iter_mut())
                .chain(std::iter::once(&mut b.conv2))
                .chain(b.shortcut.iter_mut())
        }))
        .collect();
    for l in layers.iter_mut() {
        for v in l.running_mean.iter_mut() {
            *v = S::lit(rng.random_range(-0.5..0.5));
        }
        for v in l.running_var.iter_mut() {
            *v = S::lit(rng.random_range(0.5..2.0));
        }
    }
}

pub fn random_images<S: Scalar, R: Rng>(rng: &mut R, n: usize, arch: &Architecture) -> Tensor<S> {
    Tensor::randn(&[n, arch.in_channels, arch.input_size, arch.input_size], 1.0, rng)
}
