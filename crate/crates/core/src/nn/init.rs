//! Orthogonal weight initialization.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::Params;

/// A `rows × cols` matrix with orthonormal rows (rows ≤ cols) or columns
/// (rows > cols), drawn uniformly via the QR decomposition of a Gaussian
/// matrix with the sign of R's diagonal folded into Q.
pub fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows < cols { q.transpose() } else { q };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(gain * m[(i, j)]);
        }
    }
    out
}

/// Orthogonal (gain 1) for every weight block, zero for every bias.
pub fn init_orthogonal<R: Rng + ?Sized>(params: &mut Params, rng: &mut R) {
    for block in &mut params.blocks {
        if block.is_bias() {
            block.data.iter_mut().for_each(|v| *v = 0.0);
        } else {
            let (rows, cols) = block.matrix_dims();
            block.data = orthogonal_matrix(rows, cols, 1.0, rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram(m: &[f64], rows: usize, cols: usize, by_rows: bool) -> Vec<f64> {
        let n = if by_rows { rows } else { cols };
        let mut g = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                g[a * n + b] = if by_rows {
                    (0..cols).map(|k| m[a * cols + k] * m[b * cols + k]).sum()
                } else {
                    (0..rows).map(|k| m[k * cols + a] * m[k * cols + b]).sum()
                };
            }
        }
        g
    }

    #[test]
    fn wide_and_tall_matrices_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (rows, cols) in [(3, 7), (7, 3), (5, 5)] {
            let m = orthogonal_matrix(rows, cols, 1.0, &mut rng);
            let by_rows = rows <= cols;
            let n = rows.min(cols);
            let g = gram(&m, rows, cols, by_rows);
            for a in 0..n {
                for b in 0..n {
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((g[a * n + b] - want).abs() < 1e-10);
                }
            }
        }
    }
}
