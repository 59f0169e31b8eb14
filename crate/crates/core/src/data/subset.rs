use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fixed index list into the training split used for reward evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSubset {
    pub indices: Vec<usize>,
    pub seed: u64,
}

/// Stratified sample of `size` indices with per-class counts differing by at
/// most one wherever class sizes allow. Sorted ascending.
pub fn stratified_indices(labels: &[usize], num_classes: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    let n = labels.len();
    if size == 0 || size > n {
        return Err(Error::Dataset(format!("subset size {size} not in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Dataset(format!("label {l} >= {num_classes}")));
        }
        by_class[l].push(i);
    }
    for c in &mut by_class {
        c.shuffle(&mut rng);
    }
    // Water-filling: repeatedly hand one slot to each class that still has
    // samples, in a seeded class order, until `size` slots are assigned.
    let mut quota = vec![0usize; num_classes];
    let mut remaining = size;
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng);
    while remaining > 0 {
        let open: Vec<usize> = order.iter().copied().filter(|&c| quota[c] < by_class[c].len()).collect();
        let share = (remaining / open.len()).max(1);
        for &c in &open {
            if remaining == 0 {
                break;
            }
            let take = share.min(by_class[c].len() - quota[c]).min(remaining);
            quota[c] += take;
            remaining -= take;
        }
    }
    let mut out: Vec<usize> = by_class
        .iter()
        .zip(&quota)
        .flat_map(|(c, &q)| c[..q].iter().copied())
        .collect();
    out.sort_unstable();
    Ok(out)
}

pub fn make_reward_subset(labels: &[usize], num_classes: usize, size: usize, seed: u64) -> Result<RewardSubset> {
    Ok(RewardSubset {
        indices: stratified_indices(labels, num_classes, size, seed)?,
        seed,
    })
}
