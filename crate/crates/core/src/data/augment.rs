//! Random crop (zero padding of 4) and horizontal flip for training batches.

use rand::Rng;

use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 4;

/// Augment every image of a `[N, C, H, W]` batch in place.
pub fn augment_batch<S: Scalar, R: Rng + ?Sized>(batch: &mut Tensor<S>, rng: &mut R) {
    let (n, c, h, w) = (batch.dim(0), batch.dim(1), batch.dim(2), batch.dim(3));
    let per = c * h * w;
    let mut scratch = vec![S::zero(); per];
    for i in 0..n {
        let dy = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        let dx = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        let flip = rng.random_bool(0.5);
        let img = &mut batch.data_mut()[i * per..(i + 1) * per];
        shift_flip(img, &mut scratch, c, h, w, dy, dx, flip);
        img.copy_from_slice(&scratch);
    }
}

/// `out[y][x] = img[y + dy][x' + dx]` (zero outside), with `x' = w−1−x` when
/// flipping.
#[allow(clippy::too_many_arguments)]
pub fn shift_flip<S: Scalar>(
    img: &[S],
    out: &mut [S],
    c: usize,
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    flip: bool,
) {
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let xs = if flip { w - 1 - x } else { x };
                let (sy, sx) = (y as isize + dy, xs as isize + dx);
                out[(ch * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    img[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    S::zero()
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_flip() {
        let img: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let mut out = vec![0.0; 6];
        shift_flip(&img, &mut out, 1, 2, 3, 0, 0, false);
        assert_eq!(out, img);
        shift_flip(&img, &mut out, 1, 2, 3, 0, 0, true);
        assert_eq!(out, vec![2., 1., 0., 5., 4., 3.]);
        shift_flip(&img, &mut out, 1, 2, 3, 1, 0, false);
        assert_eq!(out, vec![3., 4., 5., 0., 0., 0.]);
    }
}
