use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mask::ArchMask;
use super::network::{ConvBn, PrunableModel};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Keep the indices `i` along `axis` with `keep[i]`.
pub fn select_axis<S: Scalar>(t: &Tensor<S>, axis: usize, keep: &[bool]) -> Tensor<S> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let d = shape[axis];
    let mut data = Vec::with_capacity(t.numel());
    for o in 0..outer {
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            let off = (o * d + i) * inner;
            data.extend_from_slice(&t.data()[off..off + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.iter().filter(|&&k| k).count();
    Tensor::new(&new_shape, data).expect("selected shape")
}

fn select_vec<S: Copy>(v: &[S], keep: &[bool]) -> Vec<S> {
    v.iter().zip(keep).filter(|(_, &k)| k).map(|(&x, _)| x).collect()
}

impl<S: Scalar> PrunableModel<S> {
    /// A smaller model with the masked inner channels physically removed.
    pub fn physical_prune(&self, mask: &ArchMask) -> Result<PrunableModel<S>> {
        mask.validate(&self.arch)?;
        let mut arch = self.arch.clone();
        for (spec, v) in arch.blocks.iter_mut().zip(&mask.blocks) {
            spec.inner = v.iter().filter(|&&k| k).count();
        }
        // Weights are overwritten below; the rng only fixes the layout.
        let mut out = PrunableModel::<S>::new(arch, &mut ChaCha8Rng::seed_from_u64(0))?;

        copy_conv_bn(self, &mut out, |m| &m.stem, |m| &mut m.stem, None, None);
        for (l, keep) in mask.blocks.iter().enumerate() {
            let k = Some(keep.as_slice());
            copy_conv_bn(self, &mut out, |m| &m.blocks[l].conv1, |m| &mut m.blocks[l].conv1, k, None);
            if self.blocks[l].dw.is_some() {
                copy_conv_bn(
                    self,
                    &mut out,
                    |m| m.blocks[l].dw.as_ref().unwrap(),
                    |m| m.blocks[l].dw.as_mut().unwrap(),
                    k,
                    None,
                );
            }
            copy_conv_bn(self, &mut out, |m| &m.blocks[l].conv2, |m| &mut m.blocks[l].conv2, None, k);
            if self.blocks[l].shortcut.is_some() {
                copy_conv_bn(
                    self,
                    &mut out,
                    |m| m.blocks[l].shortcut.as_ref().unwrap(),
                    |m| m.blocks[l].shortcut.as_mut().unwrap(),
                    None,
                    None,
                );
            }
        }
        // Parameter ids follow construction order, which the pruned model shares.
        for id in [self.head.weight, self.head.bias] {
            *out.store.value_mut(id) = self.store.value(id).clone();
        }
        Ok(out)
    }

    /// Add every parameter and BN running statistic to `ck` under `prefix`.
    pub fn push_to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_store(prefix, &self.store);
        for (i, c) in self.conv_bns().iter().enumerate() {
            let n = c.running_mean.len();
            ck.push(
                format!("{prefix}.running.{i}.mean"),
                &Tensor::new(&[n], c.running_mean.clone()).expect("len"),
            );
            ck.push(
                format!("{prefix}.running.{i}.var"),
                &Tensor::new(&[n], c.running_var.clone()).expect("len"),
            );
        }
    }

    pub fn load_from_checkpoint(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        ck.load_store(prefix, &mut self.store)?;
        let mut layers: Vec<&mut ConvBn<S>> = std::iter::once(&mut self.stem)
            .chain(self.blocks.iter_mut().flat_map(|b| {
                std::iter::once(&mut b.conv1)
                    .chain(b.dw.iter_mut())
                    .chain(std::iter::once(&mut b.conv2))
                    .chain(b.shortcut.iter_mut())
            }))
            .collect();
        for (i, c) in layers.iter_mut().enumerate() {
            for (tag, dst) in [("mean", &mut c.running_mean), ("var", &mut c.running_var)] {
                let key = format!("{prefix}.running.{i}.{tag}");
                let t = ck
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                if t.numel() != dst.len() {
                    return Err(Error::Checkpoint(format!("{key}: length mismatch")));
                }
                *dst = t.data().iter().map(|&v| S::lit(v as f64)).collect();
            }
        }
        Ok(())
    }
}

/// Copy one conv+BN, optionally keeping a subset of output (`out_keep`) or
/// input (`in_keep`) channels.
fn copy_conv_bn<S: Scalar>(
    src: &PrunableModel<S>,
    dst: &mut PrunableModel<S>,
    get: impl Fn(&PrunableModel<S>) -> &ConvBn<S>,
    get_mut: impl Fn(&mut PrunableModel<S>) -> &mut ConvBn<S>,
    out_keep: Option<&[bool]>,
    in_keep: Option<&[bool]>,
) {
    let s = get(src);
    let mut w = src.store.value(s.weight).clone();
    let (mut gamma, mut beta) = (src.store.value(s.gamma).clone(), src.store.value(s.beta).clone());
    let (mut rm, mut rv) = (s.running_mean.clone(), s.running_var.clone());
    if let Some(k) = out_keep {
        // Depthwise weights are [C, 1, k, k]; slicing axis 0 covers both cases.
        w = select_axis(&w, 0, k);
        gamma = select_axis(&gamma, 0, k);
        beta = select_axis(&beta, 0, k);
        rm = select_vec(&rm, k);
        rv = select_vec(&rv, k);
    }
    if let Some(k) = in_keep {
        w = select_axis(&w, 1, k);
    }
    let (wid, gid, bid) = (s.weight, s.gamma, s.beta);
    *dst.store.value_mut(wid) = w;
    *dst.store.value_mut(gid) = gamma;
    *dst.store.value_mut(bid) = beta;
    let d = get_mut(dst);
    d.running_mean = rm;
    d.running_var = rv;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_axis_picks_slices() {
        let t = Tensor::<f32>::from_f64(&[2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap();
        let a = select_axis(&t, 1, &[true, false, true]);
        assert_eq!(a.shape(), &[2, 2]);
        assert_eq!(a.data(), &[0., 2., 3., 5.]);
        let b = select_axis(&t, 0, &[false, true]);
        assert_eq!(b.data(), &[3., 4., 5.]);
    }
}
