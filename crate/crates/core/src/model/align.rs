//! Group-lasso alignment of weights with a target mask, and the weight
//! training step that uses it.

use serde::{Deserialize, Serialize};

use super::mask::ArchMask;
use super::network::{ForwardOpts, PrunableModel};
use crate::tensor::nn::{bind, Bind};
use crate::tensor::optim::Sgd;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

/// How removed channels are grouped under the L2 norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignGrouping {
    /// One norm per block over the union of its removed channels.
    #[default]
    PerLayer,
    /// One norm per removed channel, summed.
    PerChannel,
}

impl<S: Scalar> PrunableModel<S> {
    /// `Σ_l ‖(1 − v_l) ⊙ W_l‖₂` over each block's first-conv output slices,
    /// depthwise slices (inverted residual) and second-conv input slices.
    pub fn align_loss(
        &self,
        g: &mut Graph<S>,
        mask: &ArchMask,
        grouping: AlignGrouping,
        b: Bind,
    ) -> Result<Var> {
        self.align_loss_with(g, &self.store, mask, grouping, b)
    }

    /// [`Self::align_loss`] over the weights in `store`.
    pub fn align_loss_with(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        mask: &ArchMask,
        grouping: AlignGrouping,
        b: Bind,
    ) -> Result<Var> {
        mask.validate(&self.arch)?;
        let mut terms = Vec::new();
        for (blk, keep) in self.blocks.iter().zip(&mask.blocks) {
            if keep.iter().all(|&k| k) {
                continue;
            }
            let w1 = bind(g, store, blk.conv1.weight, b);
            let wd = blk.dw.as_ref().map(|d| bind(g, store, d.weight, b));
            let w2 = bind(g, store, blk.conv2.weight, b);
            let groups: Vec<Vec<bool>> = match grouping {
                AlignGrouping::PerLayer => vec![keep.clone()],
                AlignGrouping::PerChannel => keep
                    .iter()
                    .enumerate()
                    .filter(|(_, &k)| !k)
                    .map(|(i, _)| (0..keep.len()).map(|j| j != i).collect())
                    .collect(),
            };
            for grp in &groups {
                let mut parts: Vec<(Var, usize, &[bool])> = vec![(w1, 0, grp)];
                if let Some(wd) = wd {
                    parts.push((wd, 0, grp));
                }
                parts.push((w2, 1, grp));
                terms.push(g.masked_group_norm(&parts)?);
            }
        }
        let mut total = g.constant(Tensor::scalar(S::zero()));
        for t in terms {
            total = g.add(total, t)?;
        }
        Ok(total)
    }

    /// L2 norm of each inner channel's weight group in block `l`.
    pub fn channel_group_norms(&self, l: usize) -> Vec<f64> {
        let blk = &self.blocks[l];
        let c = blk.spec.inner;
        let mut sq = vec![0.0f64; c];
        let mut add = |w: &Tensor<S>, axis: usize| {
            let shape = w.shape();
            let inner: usize = shape[axis + 1..].iter().product();
            for (i, v) in w.data().iter().enumerate() {
                sq[(i / inner) % c] += v.as_f64() * v.as_f64();
            }
        };
        add(self.store.value(blk.conv1.weight), 0);
        if let Some(d) = &blk.dw {
            add(self.store.value(d.weight), 0);
        }
        add(self.store.value(blk.conv2.weight), 1);
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// Mean removed-channel group norm over mean kept-channel group norm,
    /// pooled across blocks. `None` when nothing is removed.
    pub fn masked_to_kept_norm_ratio(&self, mask: &ArchMask) -> Option<f64> {
        let (mut m_sum, mut m_n, mut k_sum, mut k_n) = (0.0, 0usize, 0.0, 0usize);
        for (l, keep) in mask.blocks.iter().enumerate() {
            for (norm, &k) in self.channel_group_norms(l).into_iter().zip(keep) {
                if k {
                    k_sum += norm;
                    k_n += 1;
                } else {
                    m_sum += norm;
                    m_n += 1;
                }
            }
        }
        (m_n > 0 && k_n > 0).then(|| (m_sum / m_n as f64) / (k_sum / k_n as f64))
    }
}

/// Loss weights for one weight-training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightLoss {
    pub beta: f64,
    /// Multiplier on the classification term (1 in normal training).
    pub class_weight: f64,
    pub grouping: AlignGrouping,
}

impl WeightLoss {
    pub fn new(beta: f64) -> Self {
        WeightLoss {
            beta,
            class_weight: 1.0,
            grouping: AlignGrouping::PerLayer,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_w: f64,
    pub l_class: f64,
    pub l_align: f64,
}

/// One SGD step on `class_weight·L_class + β·L_align`. The classification
/// term uses the full (unmasked) network in training-BN mode.
pub fn train_step_weights<S: Scalar>(
    model: &mut PrunableModel<S>,
    opt: &mut Sgd<S>,
    images: Tensor<S>,
    labels: &[usize],
    mask: &ArchMask,
    loss: WeightLoss,
) -> Result<StepLosses> {
    if loss.beta < 0.0 {
        return Err(Error::InvalidArgument(format!("beta {} < 0", loss.beta)));
    }
    let mut g = Graph::new();
    let (l_class, stats) = if loss.class_weight != 0.0 {
        let x = g.constant(images);
        let (logits, stats) = model.forward(&mut g, x, &ForwardOpts::train())?;
        (Some(g.softmax_cross_entropy(logits, labels)?), stats)
    } else {
        (None, Vec::new())
    };
    let l_align = model.align_loss(&mut g, mask, loss.grouping, Bind::Train)?;

    let mut total = g.scale(l_align, loss.beta);
    if let Some(lc) = l_class {
        let weighted = g.scale(lc, loss.class_weight);
        total = g.add(weighted, total)?;
    }
    let out = StepLosses {
        l_w: g.scalar_value(total).as_f64(),
        l_class: l_class.map_or(0.0, |v| g.scalar_value(v).as_f64()),
        l_align: g.scalar_value(l_align).as_f64(),
    };
    if !out.l_w.is_finite() {
        return Err(Error::NonFinite(format!("weight loss {}", out.l_w)));
    }
    let grads = g.backward(total)?;
    model.store.zero_grad();
    grads.accumulate_into(&mut model.store);
    opt.step(&mut model.store)?;
    if !stats.is_empty() {
        model.absorb_stats(&stats)?;
    }
    Ok(out)
}
