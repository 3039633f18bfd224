//! Paired comparison of per-step encoder gradient norms with and without mixing.

use rayon::prelude::*;
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

use crate::engine::{derive_seed, ttt_episode, EpisodeConfig, EpisodeMode, EpisodeResources};
use crate::error::{Error, Result};
use crate::network::SplitNetworkState;
use crate::tensor::Tensor;

/// Per-step norms of one paired run.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradNormTrace {
    pub sample: usize,
    pub plain: Vec<f64>,
    pub mixed: Vec<f64>,
}

impl GradNormTrace {
    pub fn mean_plain(&self) -> f64 {
        mean(&self.plain)
    }

    pub fn mean_mixed(&self) -> f64 {
        mean(&self.mixed)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradNormSummary {
    pub traces: Vec<GradNormTrace>,
    pub mean_plain: f64,
    pub mean_mixed: f64,
    /// Samples whose mixed mean is strictly below the plain mean.
    pub mixed_lower: usize,
    pub ties: usize,
    /// One-sided sign test, H1: mixed < plain.
    pub sign_test_p: f64,
    /// One-sided paired t-test on `plain − mixed`, H1: mean difference > 0.
    pub paired_t: f64,
    pub paired_t_p: f64,
    pub passed: bool,
}

impl GradNormSummary {
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\nsample,step,plain,mixed\n");
        for t in &self.traces {
            for (k, (p, m)) in t.plain.iter().zip(&t.mixed).enumerate() {
                s.push_str(&format!("{},{k},{p},{m}\n", t.sample));
            }
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_pair(plain: &EpisodeConfig, mixed: &EpisodeConfig) -> Result<()> {
    let mut a = plain.clone();
    a.mix_enabled = mixed.mix_enabled;
    if a != *mixed {
        return Err(Error::config(
            "paired configurations may differ only in mix_enabled",
        ));
    }
    if !matches!(plain.mode, EpisodeMode::SingleReset) {
        return Err(Error::config(
            "gradient-norm comparison needs single_reset episodes",
        ));
    }
    Ok(())
}

/// One-sided sign test and paired t-test of `plain − mixed` per-sample means.
pub fn paired_tests(plain: &[f64], mixed: &[f64]) -> Result<(usize, usize, f64, f64, f64)> {
    let d: Vec<f64> = plain.iter().zip(mixed).map(|(p, m)| p - m).collect();
    let lower = d.iter().filter(|&&x| x > 0.0).count();
    let ties = d.iter().filter(|&&x| x == 0.0).count();
    let trials = (d.len() - ties) as u64;
    let sign_p = if trials == 0 {
        1.0
    } else {
        let b =
            Binomial::new(0.5, trials).map_err(|e| Error::numerical("sign test", e.to_string()))?;
        if lower == 0 {
            1.0
        } else {
            b.sf(lower as u64 - 1)
        }
    };
    let n = d.len() as f64;
    let md = mean(&d);
    let var = d.iter().map(|x| (x - md) * (x - md)).sum::<f64>() / (n - 1.0);
    let (t, tp) = if d.len() < 2 {
        (f64::NAN, f64::NAN)
    } else if var == 0.0 {
        // all differences equal
        let t = if md > 0.0 {
            f64::INFINITY
        } else if md < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        (
            t,
            if md > 0.0 {
                0.0
            } else if md < 0.0 {
                1.0
            } else {
                0.5
            },
        )
    } else {
        let t = md / (var / n).sqrt();
        let dist = StudentsT::new(0.0, 1.0, n - 1.0)
            .map_err(|e| Error::numerical("t-test", e.to_string()))?;
        (t, 1.0 - dist.cdf(t))
    };
    Ok((lower, ties, sign_p, t, tp))
}

/// Runs each test sample through both configurations with a shared seed.
pub fn grad_norm_compare(
    state: &SplitNetworkState,
    test: &Tensor,
    plain: &EpisodeConfig,
    mixed: &EpisodeConfig,
    res: EpisodeResources<'_>,
) -> Result<GradNormSummary> {
    check_pair(plain, mixed)?;
    let traces: Vec<GradNormTrace> = (0..test.rows())
        .into_par_iter()
        .map(|i| {
            let x = test.select_rows(&[i]);
            let run = |cfg: &EpisodeConfig| -> Result<Vec<f64>> {
                let mut s = state.clone();
                let mut c = cfg.clone();
                c.seed = derive_seed(cfg.seed, i as u64);
                let r = ttt_episode(&mut s, &x, &c, res)?;
                Ok(r.trace.iter().map(|t| t.grad_norm_theta).collect())
            };
            Ok(GradNormTrace {
                sample: i,
                plain: run(plain)?,
                mixed: run(mixed)?,
            })
        })
        .collect::<Result<_>>()?;
    if traces
        .iter()
        .flat_map(|t| t.plain.iter().chain(&t.mixed))
        .any(|v| !v.is_finite())
    {
        return Err(Error::numerical(
            "gradient-norm comparison",
            "non-finite norm",
        ));
    }
    let per_plain: Vec<f64> = traces.iter().map(|t| t.mean_plain()).collect();
    let per_mixed: Vec<f64> = traces.iter().map(|t| t.mean_mixed()).collect();
    let (mixed_lower, ties, sign_test_p, paired_t, paired_t_p) =
        paired_tests(&per_plain, &per_mixed)?;
    let (mean_plain, mean_mixed) = (mean(&per_plain), mean(&per_mixed));
    Ok(GradNormSummary {
        traces,
        mean_plain,
        mean_mixed,
        mixed_lower,
        ties,
        sign_test_p,
        paired_t,
        paired_t_p,
        passed: mean_mixed <= mean_plain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_matches_binomial_tail() {
        // 9 of 10 positive: P(X >= 9) = 11/1024
        let plain = [2.0; 10];
        let mut mixed = [1.0; 10];
        mixed[0] = 3.0;
        let (lower, ties, p, t, tp) = paired_tests(&plain, &mixed).unwrap();
        assert_eq!((lower, ties), (9, 0));
        assert!((p - 11.0 / 1024.0).abs() < 1e-12);
        assert!(t > 0.0 && tp < 0.05);
    }

    #[test]
    fn identical_samples_are_all_ties() {
        let v = [1.0, 2.0, 3.0];
        let (lower, ties, p, t, tp) = paired_tests(&v, &v).unwrap();
        assert_eq!((lower, ties, p), (0, 3, 1.0));
        assert_eq!((t, tp), (0.0, 0.5));
    }
}
