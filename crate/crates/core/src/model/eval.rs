use super::mask::ArchMask;
use super::network::PrunableModel;
use crate::data::Dataset;
use crate::tensor::Scalar;
use crate::{par, Error, Result};

/// Index of the largest entry; the first one on ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode top-1 accuracy on `data[idx]`. Batches may run in parallel;
/// correct counts are summed in batch order.
pub fn accuracy<S: Scalar>(
    model: &PrunableModel<S>,
    data: &Dataset,
    idx: &[usize],
    mask: Option<&ArchMask>,
    batch: usize,
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Dataset("accuracy on an empty subset".into()));
    }
    let chunks: Vec<&[usize]> = idx.chunks(batch.max(1)).collect();
    let counts = par::map_slice(&chunks, |chunk| -> Result<usize> {
        let (x, labels) = data.batch::<S>(chunk);
        let logits = model.logits(x, mask)?;
        let k = logits.dim(1);
        Ok(labels
            .iter()
            .enumerate()
            .filter(|&(r, &y)| argmax(&logits.data()[r * k..(r + 1) * k]) == y)
            .count())
    });
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / idx.len() as f64)
}
