use ndarray::{Array2, Axis};

use crate::error::{ensure, Result};

/// Sinkhorn-Knopp balancing of `exp(logits / temp)` over a `B × K` batch.
///
/// Each iteration scales columns to sum `B/K` and then rows to sum 1. A single
/// row cannot be balanced against itself, so `B = 1` returns the plain softmax.
pub fn sinkhorn_knopp(logits: &Array2<f64>, temp: f64, n_iters: usize) -> Result<Array2<f64>> {
    Ok(sinkhorn_knopp_trace(logits, temp, n_iters)?.0)
}

/// Like [`sinkhorn_knopp`], also returning after every iteration the largest
/// absolute deviation of a column sum from `B/K`.
pub fn sinkhorn_knopp_trace(logits: &Array2<f64>, temp: f64, n_iters: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let (b, k) = logits.dim();
    ensure!(b >= 1 && k >= 1, Shape, "sinkhorn input is empty ({b}×{k})");
    ensure!(temp > 0.0, Config, "sinkhorn temperature must be > 0");
    ensure!(n_iters >= 1, Config, "sinkhorn needs at least one iteration");
    ensure!(
        logits.iter().all(|v| v.is_finite()),
        Numerical,
        "sinkhorn input has non-finite logits"
    );
    if b == 1 {
        let mut q = logits.mapv(|v| v / temp);
        let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        q.mapv_inplace(|v| (v - max).exp());
        let s = q.sum();
        q.mapv_inplace(|v| v / s);
        return Ok((q, Vec::new()));
    }
    // Iterate in the log domain so rows far below the global max cannot
    // underflow to an all-zero row.
    let mut lq = logits.mapv(|v| v / temp);
    let log_target = (b as f64 / k as f64).ln();
    let col_target = b as f64 / k as f64;
    let mut trace = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let col_lse: Vec<f64> = lq.columns().into_iter().map(|c| logsumexp(c.iter().copied())).collect();
        for mut row in lq.rows_mut() {
            row.iter_mut().zip(&col_lse).for_each(|(v, c)| *v += log_target - c);
        }
        for mut row in lq.rows_mut() {
            let s = logsumexp(row.iter().copied());
            row.mapv_inplace(|v| v - s);
        }
        let q = lq.mapv(f64::exp);
        trace.push(q.sum_axis(Axis(0)).iter().map(|c| (c - col_target).abs()).fold(0.0, f64::max));
    }
    let q = lq.mapv(f64::exp);
    Ok((q, trace))
}

fn logsumexp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_row_is_softmax() {
        let l = array![[1.0, 2.0, 0.5]];
        let q = sinkhorn_knopp(&l, 0.5, 3).unwrap();
        let e: Vec<f64> = l.iter().map(|v| (v / 0.5f64).exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in q.iter().zip(e.iter()) {
            assert!((a - b / s).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let l = array![[3.0, 1.0, 0.0, -1.0], [0.0, 0.1, 0.2, 0.3], [5.0, 5.0, -5.0, 0.0]];
        let q = sinkhorn_knopp(&l, 0.1, 3).unwrap();
        for r in q.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_nan() {
        let l = array![[f64::NAN, 1.0], [0.0, 0.0]];
        assert!(sinkhorn_knopp(&l, 0.1, 3).is_err());
    }

    #[test]
    fn huge_logits_stay_finite() {
        let l = array![[1e4, -1e4], [-1e4, 1e4], [1e4, 1e4]];
        let q = sinkhorn_knopp(&l, 0.05, 3).unwrap();
        assert!(q.iter().all(|v| v.is_finite()));
    }
}
