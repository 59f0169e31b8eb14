mod common;

use common::*;
use coprune::model::align::{train_step_weights, AlignGrouping, WeightLoss};
use coprune::model::arch::ArchDescription;
use coprune::model::flops::{flops_of_block, full_breakdown};
use coprune::model::{ArchMask, ForwardOpts, PrunableModel};
use coprune::tensor::checkpoint::Checkpoint;
use coprune::tensor::gradcheck::{self, GradCheckConfig};
use coprune::tensor::nn::Bind;
use coprune::tensor::optim::{Sgd, SgdConfig};
use coprune::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn resnet8() -> PrunableModel<f32> {
    let arch = ArchDescription::preset("resnet8").unwrap().resolve().unwrap();
    PrunableModel::new(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

#[test]
fn all_ones_mask_is_exactly_the_unmasked_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let arch = random_arch(&mut rng, 4);
        let mut m = PrunableModel::<f32>::new(arch.clone(), &mut rng).unwrap();
        perturb_bn(&mut m, &mut rng);
        let x: Tensor<f32> = random_images(&mut rng, 3, &arch);
        let ones = ArchMask::all_ones(&arch);
        let a = m.logits(x.clone(), None).unwrap();
        let b = m.logits(x, Some(&ones)).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn masked_forward_matches_physical_prune_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let arch = random_arch(&mut rng, 4);
        let mut m = PrunableModel::<f32>::new(arch.clone(), &mut rng).unwrap();
        perturb_bn(&mut m, &mut rng);
        let mask = random_mask(&mut rng, &arch);
        let x: Tensor<f32> = random_images(&mut rng, 2, &arch);
        let masked = m.logits(x.clone(), Some(&mask)).unwrap();
        let pruned = m.physical_prune(&mask).unwrap();
        let phys = pruned.logits(x, None).unwrap();
        worst = worst.max(masked.max_abs_diff(&phys));
    }
    assert!(worst <= 1e-5, "max |Δlogit| = {worst}");
}

#[test]
fn single_channel_survivors_give_finite_logits() {
    let m = resnet8();
    let mask = ArchMask {
        blocks: m
            .arch
            .blocks
            .iter()
            .map(|b| (0..b.inner).map(|i| i == 0).collect())
            .collect(),
    };
    let x: Tensor<f32> = random_images(&mut ChaCha8Rng::seed_from_u64(0), 2, &m.arch);
    assert!(m.logits(x, Some(&mask)).unwrap().is_finite());
}

#[test]
fn mask_length_mismatch_is_an_error() {
    let m = resnet8();
    let mut mask = ArchMask::all_ones(&m.arch);
    mask.blocks[0].pop();
    let x: Tensor<f32> = random_images(&mut ChaCha8Rng::seed_from_u64(0), 1, &m.arch);
    assert!(m.logits(x, Some(&mask)).is_err());
}

#[test]
fn physical_prune_with_all_ones_keeps_structure() {
    let m = resnet8();
    let p = m.physical_prune(&ArchMask::all_ones(&m.arch)).unwrap();
    assert_eq!(p.arch, m.arch);
    assert_eq!(full_breakdown(&p.arch), full_breakdown(&m.arch));
}

#[test]
fn half_mask_halves_prunable_flops() {
    let m = resnet8();
    let mask = ArchMask {
        blocks: m.arch.blocks.iter().map(|b| (0..b.inner).map(|i| i % 2 == 0).collect()).collect(),
    };
    let p = m.physical_prune(&mask).unwrap();
    let before = full_breakdown(&m.arch);
    let after = full_breakdown(&p.arch);
    assert_eq!(2 * after.prunable, before.prunable);
    assert_eq!(after.fixed, before.fixed);
}

#[test]
fn align_loss_hand_values() {
    let mut m = resnet8();
    let ones = ArchMask::all_ones(&m.arch);
    let mut g = Graph::new();
    let l = m.align_loss(&mut g, &ones, AlignGrouping::PerLayer, Bind::Frozen).unwrap();
    assert_eq!(g.scalar_value(l), 0.0);

    // Zero the first block, then place [3, 4] in one removed channel group.
    let b = &m.blocks[0];
    let (w1, w2) = (b.conv1.weight, b.conv2.weight);
    m.store.value_mut(w1).fill(0.0);
    m.store.value_mut(w2).fill(0.0);
    m.store.value_mut(w1).data_mut()[0] = 3.0;
    // conv2 weight [c_out, inner, 3, 3]: element (0, 0, 0, 0) belongs to inner channel 0.
    m.store.value_mut(w2).data_mut()[0] = 4.0;
    let mut mask = ArchMask::all_ones(&m.arch);
    mask.blocks[0][0] = false;
    for grouping in [AlignGrouping::PerLayer, AlignGrouping::PerChannel] {
        let mut g = Graph::new();
        let l = m.align_loss(&mut g, &mask, grouping, Bind::Frozen).unwrap();
        assert!((g.scalar_value(l) - 5.0).abs() < 1e-6);
    }
}

fn tiny_f64_model(seed: u64) -> PrunableModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = random_arch(&mut rng, 3);
    PrunableModel::new(arch, &mut rng).unwrap()
}

#[test]
fn align_loss_gradient_matches_finite_differences() {
    for (seed, grouping) in [(5, AlignGrouping::PerLayer), (6, AlignGrouping::PerChannel)] {
        let m = tiny_f64_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = random_mask(&mut rng, &m.arch);
        if let Some(l) = m.arch.blocks.iter().position(|b| b.inner > 1) {
            mask.blocks[l][0] = false;
            mask.blocks[l][1] = true;
        }
        let mut store = m.store.clone();
        let report = gradcheck::check(&mut [&mut store], GradCheckConfig::default(), |g, s| {
            m.align_loss_with(g, s[0], &mask, grouping, Bind::Train)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);

        // Kept weights receive exactly zero gradient.
        let mut g = Graph::new();
        let l = m.align_loss(&mut g, &mask, grouping, Bind::Train).unwrap();
        let grads = g.backward(l).unwrap();
        for (blk, keep) in m.blocks.iter().zip(&mask.blocks) {
            let mut ids = vec![(blk.conv1.weight, 0usize), (blk.conv2.weight, 1usize)];
            if let Some(d) = &blk.dw {
                ids.push((d.weight, 0));
            }
            for (id, axis) in ids {
                let shape = m.store.value(id).shape().to_vec();
                let inner: usize = shape[axis + 1..].iter().product();
                let Some(gr) = grads.get(&m.store, id) else { continue };
                for (c, &v) in gr.data().iter().enumerate() {
                    if keep[(c / inner) % shape[axis]] {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    // conv → BN → ReLU → … → linear → cross-entropy in training-BN mode.
    let arch = ArchDescription::from_json(
        r#"{"name":"t","in_channels":2,"input_size":5,"num_classes":3,
            "stem":{"channels":3},
            "blocks":[{"kind":"residual","out_channels":4,"inner_channels":3,"stride":2},
                      {"kind":"inverted-residual","out_channels":4,"inner_channels":4},
                      {"kind":"plain-conv","out_channels":2,"inner_channels":2}]}"#,
    )
    .unwrap()
    .resolve()
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = PrunableModel::<f64>::new(arch.clone(), &mut rng).unwrap();
    perturb_bn(&mut model, &mut rng);
    let x: Tensor<f64> = random_images(&mut rng, 4, &arch);
    let labels = [0usize, 2, 1, 2];
    let mut store = model.store.clone();
    let report = gradcheck::check(
        &mut [&mut store],
        GradCheckConfig {
            max_coords: 16,
            ..Default::default()
        },
        |g, s| {
            let xv = g.constant(x.clone());
            let (logits, _) = model.forward_with(g, s[0], xv, &ForwardOpts::train())?;
            g.softmax_cross_entropy(logits, &labels)
        },
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn zero_beta_gives_pure_classification_loss() {
    let mut m = resnet8();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f32> = random_images(&mut rng, 4, &m.arch);
    let mut mask = ArchMask::all_ones(&m.arch);
    mask.blocks[0][0] = false;
    let mut opt = Sgd::new(SgdConfig::default());
    let out = train_step_weights(&mut m, &mut opt, x, &[0, 1, 2, 3], &mask, WeightLoss::new(0.0)).unwrap();
    assert_eq!(out.l_w, out.l_class);
    assert!(out.l_align > 0.0);
}

#[test]
fn all_ones_mask_step_equals_plain_step() {
    let base = resnet8();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Tensor<f32> = random_images(&mut rng, 4, &base.arch);
    let ones = ArchMask::all_ones(&base.arch);
    let mut a = base.clone();
    let mut b = base.clone();
    let mut oa = Sgd::new(SgdConfig::default());
    let mut ob = Sgd::new(SgdConfig::default());
    let la = train_step_weights(&mut a, &mut oa, x.clone(), &[0, 1, 2, 3], &ones, WeightLoss::new(0.5)).unwrap();
    let lb = train_step_weights(&mut b, &mut ob, x, &[0, 1, 2, 3], &ones, WeightLoss::new(0.0)).unwrap();
    assert_eq!(la.l_align, 0.0);
    assert_eq!(la.l_w, lb.l_w);
    for (p, q) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(p.value.data(), q.value.data());
    }
}

#[test]
fn pure_alignment_shrinks_masked_group() {
    let mut m = resnet8();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mask = random_mask(&mut rng, &m.arch);
    let mut opt = Sgd::new(SgdConfig {
        lr: 0.01,
        momentum: 0.9,
        weight_decay: 0.0,
    });
    let loss = WeightLoss {
        beta: 1.0,
        class_weight: 0.0,
        grouping: AlignGrouping::PerLayer,
    };
    let dummy: Tensor<f32> = Tensor::zeros(&[1, 3, 32, 32]);
    let mut prev = f64::INFINITY;
    for _ in 0..100 {
        let out = train_step_weights(&mut m, &mut opt, dummy.clone(), &[0], &mask, loss).unwrap();
        assert!(out.l_align < prev, "{} !< {prev}", out.l_align);
        prev = out.l_align;
    }
}

#[test]
fn model_checkpoint_round_trip() {
    let mut m = resnet8();
    perturb_bn(&mut m, &mut ChaCha8Rng::seed_from_u64(9));
    let mut ck = Checkpoint::new();
    m.push_to_checkpoint(&mut ck, "model");
    let dir = tempfile::tempdir().unwrap();
    ck.write(dir.path(), "m").unwrap();
    let back = Checkpoint::read(dir.path(), "m").unwrap();
    let mut fresh = PrunableModel::<f32>::new(m.arch.clone(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    fresh.load_from_checkpoint(&back, "model").unwrap();
    let x: Tensor<f32> = random_images(&mut ChaCha8Rng::seed_from_u64(1), 2, &m.arch);
    assert_eq!(m.logits(x.clone(), None).unwrap().data(), fresh.logits(x, None).unwrap().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn block_flops_are_linear_in_kept_channels(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = random_arch(&mut rng, 4);
        for b in &arch.blocks {
            let unit = flops_of_block(b, 1).unwrap();
            prop_assert!(unit > 0);
            for m in 1..=b.inner {
                prop_assert_eq!(flops_of_block(b, m).unwrap(), m as u64 * unit);
            }
        }
    }

    #[test]
    fn align_loss_is_permutation_equivariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = tiny_f64_model(seed);
        let mask = random_mask(&mut rng, &m.arch);
        let value = |m: &PrunableModel<f64>, mask: &ArchMask| {
            let mut g = Graph::new();
            let l = m.align_loss(&mut g, mask, AlignGrouping::PerLayer, Bind::Frozen).unwrap();
            g.scalar_value(l)
        };
        let before = value(&m, &mask);
        // Permute the inner channels of every block and the mask identically.
        let mut permuted = mask.clone();
        for (l, blk) in m.blocks.clone().iter().enumerate() {
            let c = blk.spec.inner;
            let mut perm: Vec<usize> = (0..c).collect();
            for i in (1..c).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            permuted.blocks[l] = perm.iter().map(|&p| mask.blocks[l][p]).collect();
            let mut ids = vec![(blk.conv1.weight, 0usize), (blk.conv2.weight, 1usize)];
            if let Some(d) = &blk.dw {
                ids.push((d.weight, 0));
            }
            for (id, axis) in ids {
                let t = m.store.value(id).clone();
                let shape = t.shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut data = t.data().to_vec();
                for o in 0..outer {
                    for (new, &old) in perm.iter().enumerate() {
                        let dst = (o * c + new) * inner;
                        let src = (o * c + old) * inner;
                        data[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
                    }
                }
                *m.store.value_mut(id) = Tensor::new(&shape, data).unwrap();
            }
        }
        let after = value(&m, &permuted);
        prop_assert!((before - after).abs() <= 1e-12 * before.abs().max(1.0));
    }
}
