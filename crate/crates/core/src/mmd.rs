//! RBF-kernel maximum mean discrepancy between two sample sets.

use crate::error::{Error, Result};
use crate::numcore::{squared_distance, Tensor2};

/// Median of pairwise squared distances over the pooled sample, capped at
/// `max_points` rows from each side to keep the heuristic cheap.
pub fn median_bandwidth(x: &Tensor2, y: &Tensor2, max_points: usize) -> f64 {
    let pool: Vec<&[f64]> = x.iter_rows().take(max_points).chain(y.iter_rows().take(max_points)).collect();
    let mut d = Vec::with_capacity(pool.len() * pool.len() / 2);
    for i in 0..pool.len() {
        for j in (i + 1)..pool.len() {
            d.push(squared_distance(pool[i], pool[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Biased estimate of MMD² with kernel `exp(-|a-b|² / bandwidth)`.
pub fn mmd2_rbf(x: &Tensor2, y: &Tensor2, bandwidth: f64) -> Result<f64> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Argument("MMD needs non-empty samples".into()));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape {
            op: "mmd2_rbf",
            detail: format!("{} vs {} columns", x.cols(), y.cols()),
        });
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Argument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let mean_kernel = |a: &Tensor2, b: &Tensor2| {
        let mut s = 0.0;
        for ra in a.iter_rows() {
            for rb in b.iter_rows() {
                s += (-squared_distance(ra, rb) / bandwidth).exp();
            }
        }
        s / (a.rows() * b.rows()) as f64
    };
    Ok(mean_kernel(x, x) + mean_kernel(y, y) - 2.0 * mean_kernel(x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_samples_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor2::random_normal(50, 3, 1.0, &mut rng);
        assert!(mmd2_rbf(&x, &x, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn grows_with_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor2::random_normal(200, 2, 1.0, &mut rng);
        let y = Tensor2::random_normal(200, 2, 1.0, &mut rng);
        let near = mmd2_rbf(&x, &y, 2.0).unwrap();
        let far = mmd2_rbf(&x, &y.map(|v| v + 2.0), 2.0).unwrap();
        assert!(far > near * 10.0);
    }
}
