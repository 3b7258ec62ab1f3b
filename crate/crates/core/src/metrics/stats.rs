use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{ensure, Error, Result};
use crate::rng::stream_rng;

pub const DEFAULT_REPLICATES: usize = 1000;
pub const LOW_N_THRESHOLD: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub n_replicates: usize,
    pub seed: u64,
    /// Also report the 2.5/97.5 percentile interval.
    pub percentile: bool,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            n_replicates: DEFAULT_REPLICATES,
            seed: 0,
            percentile: false,
        }
    }
}

/// Non-finite floats are written as JSON `null` and read back as NaN.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        x.is_finite().then_some(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|x| x.is_finite().then_some(*x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let v = Vec::<Option<f64>>::deserialize(d)?;
            Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
        }
    }
}

/// Replicate metric values plus the resampling identity needed for pairing.
/// A replicate whose resample leaves the metric undefined is NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicates {
    pub seed: u64,
    pub n_samples: usize,
    #[serde(with = "nan_as_null::vec")]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric_name: String,
    #[serde(with = "nan_as_null")]
    pub point: f64,
    /// Mean of the defined replicate metrics (μ).
    #[serde(with = "nan_as_null")]
    pub boot_mean: f64,
    /// Population variance of the defined replicate metrics (v).
    #[serde(with = "nan_as_null")]
    pub boot_var: f64,
    /// `μ − v`. The interval half-width is the variance itself, not a
    /// standard deviation or a quantile.
    #[serde(with = "nan_as_null")]
    pub ci_low: f64,
    /// `μ + v`.
    #[serde(with = "nan_as_null")]
    pub ci_high: f64,
    pub n_replicates: usize,
    /// Replicates whose resample left the metric undefined.
    #[serde(default)]
    pub n_undefined: usize,
    pub n_samples: usize,
    pub percentile_ci: Option<(f64, f64)>,
    pub replicates: Replicates,
}

/// Mean and population variance of the finite entries; NaN when none are.
fn mean_var(all: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = all.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    // shifted by the first value so that constant input is exact
    let x0 = v[0];
    let mean = x0 + v.iter().map(|x| x - x0).sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Resampled index sequence of replicate `r`: `n` draws with replacement
/// from `0..n`, from stream `(seed, r)`.
pub fn resample_indices(seed: u64, r: usize, n: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, "bootstrap", r as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Non-parametric bootstrap of `metric` over the sample positions in
/// `indices`. `metric` receives the indices of one (re)sample.
pub fn bootstrap_indices<F>(name: &str, indices: &[usize], metric: F, opts: &BootstrapOptions) -> Result<MetricReport>
where
    F: Fn(&[usize]) -> f64,
{
    ensure!(!indices.is_empty(), Param, "bootstrap over an empty sample");
    ensure!(opts.n_replicates >= 1, Param, "n_replicates must be ≥ 1");
    let n = indices.len();
    let point = metric(indices);
    let mut values = Vec::with_capacity(opts.n_replicates);
    let mut buf = vec![0usize; n];
    for r in 0..opts.n_replicates {
        for (b, i) in buf.iter_mut().zip(resample_indices(opts.seed, r, n)) {
            *b = indices[i];
        }
        values.push(metric(&buf));
    }
    let (mu, v) = mean_var(&values);
    let n_undefined = values.iter().filter(|x| !x.is_finite()).count();
    let percentile_ci = (opts.percentile && n_undefined < values.len()).then(|| {
        let mut s: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        s.sort_by(f64::total_cmp);
        (percentile(&s, 0.025), percentile(&s, 0.975))
    });
    Ok(MetricReport {
        metric_name: name.to_string(),
        point,
        boot_mean: mu,
        boot_var: v,
        ci_low: mu - v,
        ci_high: mu + v,
        n_replicates: opts.n_replicates,
        n_undefined,
        n_samples: n,
        percentile_ci,
        replicates: Replicates {
            seed: opts.seed,
            n_samples: n,
            values,
        },
    })
}

/// Bootstrap over all `n_samples` samples.
pub fn bootstrap_ci<F>(name: &str, n_samples: usize, metric: F, opts: &BootstrapOptions) -> Result<MetricReport>
where
    F: Fn(&[usize]) -> f64,
{
    let idx: Vec<usize> = (0..n_samples).collect();
    bootstrap_indices(name, &idx, metric, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub t_statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Two-sided paired t-test over equal-length vectors, `df = n − 1`. Zero
/// variance of the differences gives `p = 1` when the mean difference is 0
/// and `p = 0` otherwise.
pub fn paired_t_test_values(a: &[f64], b: &[f64]) -> Result<PairedTestResult> {
    ensure!(a.len() == b.len(), Param, "paired vectors differ in length ({} vs {})", a.len(), b.len());
    let n = a.len();
    ensure!(n >= 2, Param, "paired t-test needs at least two pairs");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            PairedTestResult { t_statistic: 0.0, p_value: 1.0, n }
        } else {
            PairedTestResult {
                t_statistic: mean.signum() * f64::INFINITY,
                p_value: 0.0,
                n,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(PairedTestResult { t_statistic: t, p_value: p, n })
}

/// Paired test over bootstrap replicates; refuses vectors that were not
/// drawn from the same resampling sequence. Pairs where either side is
/// undefined are dropped.
pub fn paired_t_test(a: &Replicates, b: &Replicates) -> Result<PairedTestResult> {
    ensure!(
        a.seed == b.seed,
        Param,
        "replicates come from different seeds ({} vs {}); pairing is invalid",
        a.seed,
        b.seed
    );
    ensure!(
        a.n_samples == b.n_samples,
        Param,
        "replicates resample different sample counts ({} vs {})",
        a.n_samples,
        b.n_samples
    );
    ensure!(
        a.values.len() == b.values.len(),
        Param,
        "paired vectors differ in length ({} vs {})",
        a.values.len(),
        b.values.len()
    );
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .values
        .iter()
        .zip(&b.values)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| (*x, *y))
        .unzip();
    paired_t_test_values(&x, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupEntry {
    pub n: usize,
    pub low_n: bool,
    pub report: MetricReport,
}

/// Per-subgroup bootstrap of `metric`; groups smaller than
/// [`LOW_N_THRESHOLD`] are flagged.
pub fn subgroup_report<F>(
    name: &str,
    subgroups: &[String],
    metric: F,
    opts: &BootstrapOptions,
) -> Result<BTreeMap<String, SubgroupEntry>>
where
    F: Fn(&[usize]) -> f64,
{
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in subgroups.iter().enumerate() {
        groups.entry(g.as_str()).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(g, idx)| {
            let report = bootstrap_indices(name, &idx, &metric, opts)?;
            Ok((
                g.to_string(),
                SubgroupEntry {
                    n: idx.len(),
                    low_n: idx.len() < LOW_N_THRESHOLD,
                    report,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_metric_has_zero_variance() {
        let r = bootstrap_ci("c", 20, |_| 0.7, &BootstrapOptions::default()).unwrap();
        assert_eq!(r.boot_var, 0.0);
        assert_eq!(r.ci_low, 0.7);
        assert_eq!(r.ci_high, 0.7);
    }

    #[test]
    fn degenerate_t_tests() {
        let a = [1.0, 2.0, 3.0];
        let r = paired_t_test_values(&a, &a).unwrap();
        assert_eq!((r.t_statistic, r.p_value), (0.0, 1.0));
        let b = [0.5, 1.5, 2.5];
        assert_eq!(paired_t_test_values(&a, &b).unwrap().p_value, 0.0);
    }

    #[test]
    fn undefined_replicates_round_trip_and_are_excluded() {
        let r = bootstrap_ci("u", 6, |idx| if idx.contains(&0) { 1.0 } else { f64::NAN }, &BootstrapOptions {
            n_replicates: 50,
            ..Default::default()
        })
        .unwrap();
        assert!(r.n_undefined > 0 && r.n_undefined < 50);
        assert_eq!((r.boot_mean, r.boot_var), (1.0, 0.0));
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_undefined, r.n_undefined);
        assert_eq!(back.replicates.values.iter().filter(|x| x.is_nan()).count(), r.n_undefined);
        let t = paired_t_test(&r.replicates, &back.replicates).unwrap();
        assert_eq!(t.n, 50 - r.n_undefined);
    }

    #[test]
    fn mismatched_seeds_rejected() {
        let a = Replicates { seed: 1, n_samples: 5, values: vec![0.1, 0.2] };
        let b = Replicates { seed: 2, n_samples: 5, values: vec![0.1, 0.3] };
        assert!(paired_t_test(&a, &b).is_err());
    }
}
