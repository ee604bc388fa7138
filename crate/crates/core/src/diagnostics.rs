//! Chain post-processing: running mean energy, energy histograms,
//! effective sample size, convergence detection and per-step cost
//! benchmarks.

use crate::gmm::GmmSpec;
use crate::ode::{DivergenceMode, OdeFlow, ProbeMode, TimeGrid};
use crate::prior::GaussianPrior;
use crate::sampler::{
    init_chain, mc_step, DetEngine, FpEngine, LogDetSource, McConfig, Method, TrajectoryEngine,
};
use crate::sigma_b::SigmaBNet;
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Cumulative mean of an energy series: entry `n` is the arithmetic mean
/// of the first `n + 1` values.
pub fn running_mean(series: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut mean = 0.0;
    for (i, &x) in series.iter().enumerate() {
        mean += (x - mean) / (i + 1) as f64;
        out.push(mean);
    }
    out
}

/// Fixed-width histogram with out-of-range values kept in flagged
/// overflow counters, never silently dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyHistogram {
    /// `n_bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    /// Counts are raw; densities are derived on demand.
    pub normalized: bool,
}

impl EnergyHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// Probability density per bin (in-range mass only).
    pub fn densities(&self) -> Vec<f64> {
        let in_range: u64 = self.counts.iter().sum();
        if in_range == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let width = self.edges[i + 1] - self.edges[i];
                c as f64 / (in_range as f64 * width)
            })
            .collect()
    }
}

pub fn histogram(values: &[f64], n_bins: usize, range: (f64, f64)) -> Result<EnergyHistogram> {
    let (lo, hi) = range;
    if n_bins < 1 {
        return Err(CoreError::invalid("histogram needs at least one bin"));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(CoreError::invalid(format!(
            "histogram range must be finite with lo < hi, got [{lo}, {hi}]"
        )));
    }
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0u64; n_bins];
    let mut underflow = 0;
    let mut overflow = 0;
    for &v in values {
        if v < lo {
            underflow += 1;
        } else if v > hi {
            overflow += 1;
        } else {
            // hi itself lands in the top bin
            let bin = (((v - lo) / width) as usize).min(n_bins - 1);
            counts[bin] += 1;
        }
    }
    Ok(EnergyHistogram {
        edges,
        counts,
        underflow,
        overflow,
        normalized: false,
    })
}

fn autocovariance(series: &[f64], mean: f64, lag: usize) -> f64 {
    let n = series.len();
    let mut acc = 0.0;
    for i in 0..n - lag {
        acc += (series[i] - mean) * (series[i + lag] - mean);
    }
    acc / n as f64
}

/// Effective sample size via the integrated autocorrelation time with
/// Geyer initial-positive-sequence truncation: consecutive
/// autocorrelation pairs are summed while the pair sums stay positive.
/// Clamped to `[1, n]`; a (near-)constant series reports 1.
pub fn ess(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < 10 {
        return Err(CoreError::invalid(format!(
            "ess needs at least 10 samples, got {n}"
        )));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0 = autocovariance(series, mean, 0);
    let scale = series.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if c0 <= 1e-15 * scale.max(1.0) {
        return Ok(1.0);
    }
    let mut tau = 1.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = (autocovariance(series, mean, lag)
            + autocovariance(series, mean, lag + 1))
            / c0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    Ok((n as f64 / tau).clamp(1.0, n as f64))
}

/// Integrated autocorrelation time, `n / ess`.
pub fn iact(series: &[f64]) -> Result<f64> {
    Ok(series.len() as f64 / ess(series)?)
}

/// First index at which the running mean enters the band
/// `center +- halfwidth` and stays inside for `window` consecutive
/// entries. `None` when it never does.
pub fn convergence_step(
    running_mean: &[f64],
    center: f64,
    halfwidth: f64,
    window: usize,
) -> Option<usize> {
    let window = window.max(1);
    let mut run = 0usize;
    for (i, &m) in running_mean.iter().enumerate() {
        if (m - center).abs() <= halfwidth {
            run += 1;
            if run >= window {
                return Some(i + 1 - window);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// One row of the step-cost table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub dim: usize,
    pub median_seconds: f64,
    pub ratio_vs_fp: f64,
}

/// Benchmark problem dimensions and methods: median wall-clock per MC
/// step over `reps` measured steps, warm-up excluded, with ratios
/// relative to the perturbed-flow method at the same dimension.
///
/// `cost_model` picks how the divergence baseline evaluates its
/// integrand: `PerCoordinate` reproduces the D-pass cost structure of a
/// brute-force Jacobian; `Analytic` is the fast closed form used by
/// statistical runs.
pub fn benchmark_step_cost(
    dims: &[usize],
    methods: &[Method],
    reps: usize,
    cost_model: DivergenceMode,
    seed: u64,
) -> Result<Vec<CostRow>> {
    if dims.is_empty() || reps == 0 {
        return Err(CoreError::invalid("benchmark needs dims and reps >= 1"));
    }
    let mut ordered: Vec<Method> = vec![Method::Fp];
    for &m in methods {
        if !ordered.contains(&m) {
            ordered.push(m);
        }
    }
    let mut rows = Vec::new();
    for &dim in dims {
        let mut gen_rng = crate::rng::stream(seed, &format!("bench-target-{dim}"));
        let target = GmmSpec::random_scaled(dim, 4, 4.0, &mut gen_rng)?;
        let model = target.corrupt(0.3, 1.0, &mut gen_rng)?;
        let flow = OdeFlow::new(model, TimeGrid::default_gmm());
        let prior = GaussianPrior::new(dim, flow.grid().t_max())?;
        let mut net_rng = crate::rng::stream(seed, &format!("bench-net-{dim}"));
        let net = SigmaBNet::new(dim, 64, 4, 1e-6, &mut net_rng)?;
        let sigma_f = 0.01;
        let config = McConfig {
            k_update: 5.min(dim),
            n_steps: 0,
            burn_in: Some(0),
            thin: 0,
            shared_indices: false,
        };

        let mut fp_median = f64::NAN;
        for &method in &ordered {
            let engine: Box<dyn TrajectoryEngine> = match method {
                Method::Fp => Box::new(FpEngine::new(&flow, sigma_f, &net, &target, &prior)?),
                Method::BfJacob => Box::new(DetEngine::new(
                    LogDetSource::Divergence {
                        flow: &flow,
                        mode: cost_model,
                    },
                    &target,
                    &prior,
                )?),
                Method::Hutch(probes) => Box::new(DetEngine::new(
                    LogDetSource::Hutchinson {
                        flow: &flow,
                        probes,
                        probe_mode: ProbeMode::Redraw,
                    },
                    &target,
                    &prior,
                )?),
                Method::Direct => {
                    return Err(CoreError::invalid(
                        "direct sampling has no MC step to benchmark",
                    ))
                }
            };
            let chain_rng = crate::rng::stream(seed, &format!("bench-chain-{dim}-{method}"));
            let mut state = init_chain(engine.as_ref(), chain_rng)?;
            let warmup = (reps / 4).clamp(1, 5);
            for _ in 0..warmup {
                mc_step(engine.as_ref(), &mut state, &config)?;
            }
            let mut times: Vec<f64> = (0..reps)
                .map(|_| {
                    let t0 = Instant::now();
                    mc_step(engine.as_ref(), &mut state, &config).map(|_| ())?;
                    Ok(t0.elapsed().as_secs_f64())
                })
                .collect::<Result<_>>()?;
            times.sort_by(f64::total_cmp);
            let median = times[times.len() / 2];
            if method == Method::Fp {
                fp_median = median;
            }
            rows.push(CostRow {
                method: method.to_string(),
                dim,
                median_seconds: median,
                ratio_vs_fp: median / fp_median,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_mean_of_constant_series_is_constant() {
        let series = vec![2.5; 40];
        let rm = running_mean(&series);
        assert!(rm.iter().all(|&m| (m - 2.5).abs() < 1e-14));
    }

    #[test]
    fn running_mean_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let series: Vec<f64> = (0..500).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let rm = running_mean(&series);
        for n in [1usize, 7, 100, 500] {
            let naive = series[..n].iter().sum::<f64>() / n as f64;
            assert!((rm[n - 1] - naive).abs() < 1e-12, "at n = {n}");
        }
    }

    #[test]
    fn running_mean_final_value_survives_thinning_recombination() {
        let series: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let rm = running_mean(&series);
        // post-hoc subsampling recombined over all offsets gives the same
        // final mean as thin = 1
        let thin = 4;
        let mut sum = 0.0;
        for offset in 0..thin {
            sum += series.iter().skip(offset).step_by(thin).sum::<f64>();
        }
        let recombined = sum / series.len() as f64;
        assert!((rm[99] - recombined).abs() < 1e-12);
    }

    #[test]
    fn histogram_single_bin_holds_everything() {
        let h = histogram(&[0.1, 0.5, 0.9], 1, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![3]);
        assert_eq!(h.total(), 3);
    }

    #[test]
    fn histogram_counts_plus_overflow_equals_input_length() {
        let values = [-1.0, 0.0, 0.25, 0.5, 1.0, 2.0, f64::from(3u8)];
        let h = histogram(&values, 4, (0.0, 1.0)).unwrap();
        assert_eq!(h.total() as usize, values.len());
        assert_eq!(h.underflow, 1);
        assert_eq!(h.overflow, 2);
    }

    #[test]
    fn histogram_uniform_data_fills_bins_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let n_bins = 20;
        let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let h = histogram(&values, n_bins, (0.0, 1.0)).unwrap();
        let p = 1.0 / n_bins as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in h.counts.iter().enumerate() {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev < 4.0 * sd, "bin {i}: count {c}, dev {dev}");
        }
    }

    #[test]
    fn histogram_rejects_bad_arguments() {
        assert!(histogram(&[1.0], 0, (0.0, 1.0)).is_err());
        assert!(histogram(&[1.0], 4, (1.0, 0.0)).is_err());
    }

    #[test]
    fn ess_of_iid_series_is_near_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let series: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let e = ess(&series).unwrap();
        assert!(
            e > 0.8 * n as f64 && e <= 1.2 * n as f64,
            "ess {e} for n {n}"
        );
    }

    #[test]
    fn ess_of_constant_series_is_degenerate() {
        let series = vec![3.7; 100];
        let e = ess(&series).unwrap();
        assert!(e <= 2.0, "ess {e}");
        assert!(ess(&series[..5]).is_err());
    }

    #[test]
    fn ess_of_ar1_matches_analytic_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let phi = 0.9;
        let mut series = Vec::with_capacity(n);
        let mut x = 0.0;
        for _ in 0..n {
            x = phi * x + rng.sample::<f64, _>(rand_distr::StandardNormal);
            series.push(x);
        }
        let e = ess(&series).unwrap();
        let expected = n as f64 * (1.0 - phi) / (1.0 + phi);
        let ratio = e / expected;
        assert!(
            (1.0 / 1.5..=1.5).contains(&ratio),
            "ess {e}, expected {expected}"
        );
    }

    #[test]
    fn ess_never_exceeds_length() {
        let series: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let e = ess(&series).unwrap();
        assert!((1.0..=64.0).contains(&e));
    }

    #[test]
    fn convergence_step_finds_band_entry() {
        let mut series = vec![5.0; 10];
        series.extend(vec![1.05; 20]);
        let rm = running_mean(&series);
        // running mean decays toward 1.05; find where it stays within 1 +- 0.5
        let step = convergence_step(&rm, 1.0, 0.5, 5);
        assert!(step.is_some());
        assert!(convergence_step(&rm, -10.0, 0.5, 5).is_none());
    }
}
