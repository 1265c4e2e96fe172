use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Sex;

/// Log of the density `Q_i = sum_{j != i} exp(-(a_i - a_j)^2 / sigma_d)`,
/// evaluated with log-sum-exp so sparse rosters do not underflow.
pub fn kde_log_density(ages: &[f64], sigma_d: f64) -> Result<Vec<f64>> {
    if ages.len() < 2 {
        return Err(Error::contract(format!(
            "density needs at least two subjects, got {}",
            ages.len()
        )));
    }
    Ok((0..ages.len())
        .map(|i| {
            let terms = ages
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &aj)| -(ages[i] - aj).powi(2) / sigma_d);
            log_sum_exp(terms)
        })
        .collect())
}

pub fn kde_density(ages: &[f64], sigma_d: f64) -> Result<Vec<f64>> {
    Ok(kde_log_density(ages, sigma_d)?.into_iter().map(f64::exp).collect())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln w_i(a*) = -(a* - a_i)^2 / sigma - ln Q_i`.
pub fn kde_log_weights(anchor: f64, ages: &[f64], log_q: &[f64], sigma: f64) -> Vec<f64> {
    ages.iter()
        .zip(log_q)
        .map(|(&a, &lq)| -(anchor - a).powi(2) / sigma - lq)
        .collect()
}

/// `w_i(a*) = exp(-(a* - a_i)^2 / sigma) / Q_i`, given `ln Q`. May overflow
/// or underflow for sparse rosters; [`normalize_log_weights`] does not.
pub fn kde_weights(anchor: f64, ages: &[f64], log_q: &[f64], sigma: f64) -> Vec<f64> {
    kde_log_weights(anchor, ages, log_q, sigma)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Weights proportional to `exp(log_w)`, summing to 1.
pub fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return vec![1.0 / log_w.len() as f64; log_w.len()];
    }
    let e: Vec<f64> = log_w.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Draws `k` distinct indices, one at a time, each with probability
/// proportional to the remaining weights. Once the remaining mass is zero
/// the rest are drawn uniformly.
pub fn sample_weighted<R: Rng>(weights: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > weights.len() {
        return Err(Error::contract(format!(
            "cannot draw {k} distinct subjects from {}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::contract("sampling weights must be finite and non-negative"));
    }
    let mut left: Vec<usize> = (0..weights.len()).collect();
    let mut out = Vec::with_capacity(k);
    let mut warned = false;
    while out.len() < k {
        let total: f64 = left.iter().map(|&i| weights[i]).sum();
        let pos = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pos = left.len() - 1;
            for (p, &i) in left.iter().enumerate() {
                if r < weights[i] {
                    pos = p;
                    break;
                }
                r -= weights[i];
            }
            // Rounding can land past the end; pick the last positive weight.
            if weights[left[pos]] == 0.0 {
                pos = left.iter().rposition(|&i| weights[i] > 0.0).unwrap_or(pos);
            }
            pos
        } else {
            if !warned && out.is_empty() {
                warn!("all sampling weights are zero; drawing uniformly");
            }
            warned = true;
            rng.random_range(0..left.len())
        };
        out.push(left.swap_remove(pos));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CentralityMode {
    /// Attribute-conditioned average displacement.
    Conditional,
    /// Global batch average, regardless of attributes.
    Lt2019,
    Off,
}

impl fmt::Display for CentralityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CentralityMode::Conditional => "conditional",
            CentralityMode::Lt2019 => "lt2019",
            CentralityMode::Off => "off",
        })
    }
}

impl FromStr for CentralityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "conditional" => Ok(CentralityMode::Conditional),
            "lt2019" => Ok(CentralityMode::Lt2019),
            "off" => Ok(CentralityMode::Off),
            other => Err(Error::Config(format!("unknown centrality mode {other:?}"))),
        }
    }
}

/// One step's subjects and their centrality weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CentralityBatch {
    /// Index of the anchor subject; it is always `indices[0]`.
    pub anchor: usize,
    pub anchor_age: f64,
    pub indices: Vec<usize>,
    /// Weights of `indices` in the average displacement, summing to 1;
    /// empty when centrality is off.
    pub weights: Vec<f64>,
}

/// Draws training batches. In conditional mode the batch is the anchor plus
/// `B - 1` same-sex subjects drawn with probability proportional to their
/// KDE weight at the anchor's age.
#[derive(Clone, Debug)]
pub struct CentralitySampler {
    mode: CentralityMode,
    ages: Vec<f64>,
    sexes: Vec<Sex>,
    /// `ln Q_i` within each subject's sex group.
    log_q: Vec<f64>,
    sigma: f64,
    batch: usize,
}

impl CentralitySampler {
    /// `ages` are in the units the kernel widths refer to.
    pub fn new(
        mode: CentralityMode,
        ages: Vec<f64>,
        sexes: Vec<Sex>,
        sigma: f64,
        sigma_d: f64,
        batch: usize,
    ) -> Result<Self> {
        if ages.len() != sexes.len() {
            return Err(Error::contract("ages and sexes differ in length"));
        }
        if batch == 0 || batch > ages.len() {
            return Err(Error::contract(format!(
                "batch size {batch} invalid for {} subjects",
                ages.len()
            )));
        }
        let mut mode = mode;
        let mut log_q = vec![0.0; ages.len()];
        if mode == CentralityMode::Conditional {
            for sex in Sex::ALL {
                let idx: Vec<usize> = (0..ages.len()).filter(|&i| sexes[i] == sex).collect();
                if idx.is_empty() {
                    continue;
                }
                if idx.len() < batch.max(2) {
                    warn!(
                        "only {} subjects of sex {sex}; falling back to global centrality",
                        idx.len()
                    );
                    mode = CentralityMode::Lt2019;
                    break;
                }
                let group: Vec<f64> = idx.iter().map(|&i| ages[i]).collect();
                for (&i, lq) in idx.iter().zip(kde_log_density(&group, sigma_d)?) {
                    log_q[i] = lq;
                }
            }
        }
        Ok(CentralitySampler {
            mode,
            ages,
            sexes,
            log_q,
            sigma,
            batch,
        })
    }

    pub fn mode(&self) -> CentralityMode {
        self.mode
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Result<CentralityBatch> {
        let n = self.ages.len();
        let anchor = rng.random_range(0..n);
        let mut indices = vec![anchor];
        let weights = match self.mode {
            CentralityMode::Conditional => {
                let pool: Vec<usize> = (0..n)
                    .filter(|&i| i != anchor && self.sexes[i] == self.sexes[anchor])
                    .collect();
                let ages: Vec<f64> = pool.iter().map(|&i| self.ages[i]).collect();
                let lq: Vec<f64> = pool.iter().map(|&i| self.log_q[i]).collect();
                let w = normalize_log_weights(&kde_log_weights(self.ages[anchor], &ages, &lq, self.sigma));
                indices.extend(sample_weighted(&w, self.batch - 1, rng)?.into_iter().map(|p| pool[p]));
                normalize_log_weights(&kde_log_weights(
                    self.ages[anchor],
                    &indices.iter().map(|&i| self.ages[i]).collect::<Vec<_>>(),
                    &indices.iter().map(|&i| self.log_q[i]).collect::<Vec<_>>(),
                    self.sigma,
                ))
            }
            CentralityMode::Lt2019 | CentralityMode::Off => {
                let rest: Vec<usize> = (0..n).filter(|&i| i != anchor).collect();
                let picks = sample_weighted(&vec![1.0; rest.len()], self.batch - 1, rng)?;
                indices.extend(picks.into_iter().map(|p| rest[p]));
                if self.mode == CentralityMode::Off {
                    Vec::new()
                } else {
                    vec![1.0 / self.batch as f64; self.batch]
                }
            }
        };
        Ok(CentralityBatch {
            anchor,
            anchor_age: self.ages[anchor],
            indices,
            weights,
        })
    }
}
