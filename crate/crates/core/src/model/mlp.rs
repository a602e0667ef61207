//! The feed-forward block as a sum of independent slices.
//!
//! With the up-projection `W_up: d × D_ff` split into `N` column bands and the
//! down-projection `W_down: D_ff × d` split into the matching row bands,
//! `relu(X·W_up)·W_down == Σₙ relu(X·W_upₙ)·W_downₙ`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Mat};

/// Hidden-unit range of slice `n` out of `num_slices`.
pub fn slice_range(ffn_dim: usize, num_slices: usize, n: usize) -> Range<usize> {
    let w = ffn_dim / num_slices;
    n * w..(n + 1) * w
}

pub fn relu_in_place(m: &mut Mat) {
    for v in &mut m.data {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

/// Unsliced `relu(X·W_up)·W_down`.
pub fn mlp_forward(up: &Mat, down: &Mat, x: &Mat) -> Result<Mat> {
    if x.cols != up.rows || up.cols != down.rows || down.cols != x.cols {
        return Err(Error::Shape(format!(
            "mlp: x {}x{}, up {}x{}, down {}x{}",
            x.rows, x.cols, up.rows, up.cols, down.rows, down.cols
        )));
    }
    let mut h = matmul(&x.data, &up.data, x.rows, x.cols, up.cols);
    relu_in_place(&mut h);
    Ok(matmul(&h.data, &down.data, h.rows, h.cols, down.cols))
}

/// `Σₙ relu(X·W_upₙ)·W_downₙ` over explicit slice blocks.
pub fn mlp_forward_sliced(up_blocks: &[Mat], down_blocks: &[Mat], x: &Mat) -> Result<Mat> {
    if up_blocks.is_empty() || up_blocks.len() != down_blocks.len() {
        return Err(Error::Shape(format!(
            "mlp: {} up blocks vs {} down blocks",
            up_blocks.len(),
            down_blocks.len()
        )));
    }
    let mut y = Mat::zeros(x.rows, x.cols);
    for (up, down) in up_blocks.iter().zip(down_blocks) {
        let part = mlp_forward(up, down, x)?;
        for (a, b) in y.data.iter_mut().zip(&part.data) {
            *a += b;
        }
    }
    Ok(y)
}

/// Splits full projections into `num_slices` aligned blocks.
pub fn split_mlp(up: &Mat, down: &Mat, num_slices: usize) -> Result<(Vec<Mat>, Vec<Mat>)> {
    if num_slices == 0 || up.cols % num_slices != 0 || down.rows != up.cols {
        return Err(Error::Shape(format!(
            "cannot split hidden width {} into {num_slices} slices",
            up.cols
        )));
    }
    let ups = (0..num_slices)
        .map(|n| up.col_block(slice_range(up.cols, num_slices, n)))
        .collect();
    let downs = (0..num_slices)
        .map(|n| down.row_block(slice_range(up.cols, num_slices, n)))
        .collect();
    Ok((ups, downs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn one_slice_is_exactly_unsliced() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (up, down, x) = (random(6, 24, &mut rng), random(24, 6, &mut rng), random(5, 6, &mut rng));
        let (ups, downs) = split_mlp(&up, &down, 1).unwrap();
        assert_eq!(
            mlp_forward_sliced(&ups, &downs, &x).unwrap(),
            mlp_forward(&up, &down, &x).unwrap()
        );
    }

    #[test]
    fn integer_example_matches_exactly() {
        // d = 2, hidden 8, N = 2 with small integers: every partial sum is an
        // exactly representable integer, so both routes agree bit for bit.
        let up = Mat::from_vec(
            2,
            8,
            vec![1., -2., 3., 0., -1., 2., 1., -3., 2., 1., -1., 4., 3., -2., 0., 1.],
        );
        let down = Mat::from_vec(
            8,
            2,
            vec![1., 2., -1., 0., 3., 1., 0., -2., 2., 2., -3., 1., 1., 1., 4., -1.],
        );
        let x = Mat::from_vec(3, 2, vec![1., 2., -1., 3., 2., -2.]);
        let (ups, downs) = split_mlp(&up, &down, 2).unwrap();
        let sliced = mlp_forward_sliced(&ups, &downs, &x).unwrap();
        let full = mlp_forward(&up, &down, &x).unwrap();
        assert_eq!(sliced, full);
        // Hand-computed first row: x = (1, 2) -> pre = (5, 0, 1, 8, 5, -2, 1, -1),
        // relu -> (5, 0, 1, 8, 5, 0, 1, 0); y = 5*(1,2) + 1*(3,1) + 8*(0,-2)
        // + 5*(2,2) + 1*(1,1) = (19, 6).
        assert_eq!(full.row(0), &[19.0, 6.0]);
    }

    #[test]
    fn random_slices_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 16;
        let (up, down, x) = (
            random(d, 4 * d, &mut rng),
            random(4 * d, d, &mut rng),
            random(9, d, &mut rng),
        );
        let (ups, downs) = split_mlp(&up, &down, 4).unwrap();
        let dev = mlp_forward_sliced(&ups, &downs, &x)
            .unwrap()
            .max_abs_diff(&mlp_forward(&up, &down, &x).unwrap());
        assert!(dev < 1e-12, "deviation {dev}");
    }

    #[test]
    fn shape_errors() {
        let up = Mat::zeros(2, 8);
        let down = Mat::zeros(8, 2);
        assert!(split_mlp(&up, &down, 3).is_err());
        assert!(mlp_forward(&up, &down, &Mat::zeros(1, 3)).is_err());
        assert!(mlp_forward_sliced(&[up.clone()], &[], &Mat::zeros(1, 2)).is_err());
    }
}
