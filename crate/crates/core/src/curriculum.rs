//! Difficulty scoring, active-subset selection and the time-varying
//! schedules (`lambda`, `tau`, `phi`, `mu`).

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_domains::WeatherCondition;
use crate::error::{Error, Result};

/// Weather weights for the prior score, highest for the easiest conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorScoreTable {
    weights: [f64; 5],
}

impl Default for PriorScoreTable {
    fn default() -> Self {
        let mut weights = [0.0; 5];
        weights[WeatherCondition::Sunny.index()] = 5.0;
        weights[WeatherCondition::SunsetNight.index()] = 4.5;
        weights[WeatherCondition::Cloudy.index()] = 4.0;
        weights[WeatherCondition::Foggy.index()] = 3.5;
        weights[WeatherCondition::Rainstorm.index()] = 3.0;
        Self { weights }
    }
}

impl PriorScoreTable {
    /// Custom weights; every condition must be listed with a positive weight.
    pub fn with_weights(pairs: &[(WeatherCondition, f64)]) -> Result<Self> {
        let mut weights = [f64::NAN; 5];
        for &(w, v) in pairs {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("weight for {w} must be positive")));
            }
            weights[w.index()] = v;
        }
        if let Some(w) = WeatherCondition::ALL
            .iter()
            .find(|w| weights[w.index()].is_nan())
        {
            return Err(Error::invalid(format!("no weight given for {w}")));
        }
        Ok(Self { weights })
    }

    pub fn weight(&self, w: WeatherCondition) -> f64 {
        self.weights[w.index()]
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::MIN, f64::max)
    }

    /// `iqa * weight(weather) / max_weight`, in `[0, 1]`.
    pub fn prior_score(&self, iqa: f64, weather: WeatherCondition) -> Result<f64> {
        if !(0.0..=1.0).contains(&iqa) {
            return Err(Error::invalid(format!("IQA score {iqa} outside [0, 1]")));
        }
        Ok(iqa * self.weight(weather) / self.max_weight())
    }
}

pub fn prior_score(iqa: f64, weather: WeatherCondition) -> Result<f64> {
    PriorScoreTable::default().prior_score(iqa, weather)
}

/// Coupled schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Total epochs `T`.
    pub epochs: usize,
    /// Period `N` of the adaptive scalar, in iterations.
    pub period: usize,
    /// Growth rate `k` of the subset proportion.
    pub growth: f64,
    /// Initial subset proportion.
    pub lambda0: f64,
    pub gamma_base: f64,
    pub beta_base: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            period: 1000,
            growth: 2.0,
            lambda0: 0.5,
            gamma_base: 0.2,
            beta_base: 1.0,
        }
    }
}

impl TrainSchedule {
    pub fn lambda(&self, t: f64) -> f64 {
        lambda_schedule(t, self)
    }

    pub fn tau(&self, t: f64) -> f64 {
        tau_schedule(t, self.epochs)
    }

    pub fn phi(&self, t: f64) -> f64 {
        phi_schedule(t, self.epochs)
    }

    pub fn mu(&self, n: u64) -> f64 {
        adaptive_scalar(n, self.period)
    }

    /// Schedule time of 0-based epoch `e`: the first epoch sits at `t = 0`
    /// and the last at `t = T`, so every schedule spans its full range.
    pub fn epoch_time(&self, e: usize) -> f64 {
        if self.epochs <= 1 {
            return 0.0;
        }
        (e.min(self.epochs - 1) as f64) * self.epochs as f64 / (self.epochs - 1) as f64
    }
}

/// `lambda0 + (1 - lambda0)(1 - exp(-k t / T))`.
pub fn lambda_schedule(t: f64, s: &TrainSchedule) -> f64 {
    let big_t = s.epochs.max(1) as f64;
    s.lambda0 + (1.0 - s.lambda0) * (1.0 - (-s.growth * t / big_t).exp())
}

/// Focal exponent `5 t / T`.
pub fn tau_schedule(t: f64, epochs: usize) -> f64 {
    5.0 * t / epochs.max(1) as f64
}

/// Dynamic-score weight `t / T`.
pub fn phi_schedule(t: f64, epochs: usize) -> f64 {
    t / epochs.max(1) as f64
}

/// `sin(pi n / 2N)` below `N`, then 1.
pub fn adaptive_scalar(n: u64, period: usize) -> f64 {
    if period == 0 || n >= period as u64 {
        return 1.0;
    }
    (FRAC_PI_2 * n as f64 / period as f64).sin()
}

/// `(mu * gamma, mu * beta)`.
pub fn modulated_scalars(mu: f64, gamma_base: f64, beta_base: f64) -> (f64, f64) {
    (mu * gamma_base, mu * beta_base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore {
    pub sample_id: String,
    pub prior: f64,
    /// `1 - normalized CE`, in `[0, 1]`.
    pub dynamic: f64,
    pub blended: f64,
}

/// `(1 - phi) prior + phi (1 - ce_norm)`.
pub fn difficulty_score(prior: f64, ce_norm: f64, phi: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::invalid(format!("phi = {phi} outside [0, 1]")));
    }
    Ok((1.0 - phi) * prior + phi * (1.0 - ce_norm))
}

/// Scores a source pool from priors and per-sample cross-entropy.
///
/// CE is min-max normalized over the pool; when every CE is equal the
/// dynamic term is 0.5 for all samples.
pub fn score_pool(
    ids: &[String],
    priors: &[f64],
    per_sample_ce: &[f64],
    phi: f64,
) -> Result<Vec<DifficultyScore>> {
    if ids.len() != priors.len() || ids.len() != per_sample_ce.len() {
        return Err(Error::invalid("score inputs differ in length"));
    }
    let lo = per_sample_ce.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = per_sample_ce
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    ids.iter()
        .zip(priors)
        .zip(per_sample_ce)
        .map(|((id, &prior), &ce)| {
            let ce_norm = if span > 0.0 && span.is_finite() {
                (ce - lo) / span
            } else {
                0.5
            };
            Ok(DifficultyScore {
                sample_id: id.clone(),
                prior,
                dynamic: 1.0 - ce_norm,
                blended: difficulty_score(prior, ce_norm, phi)?,
            })
        })
        .collect()
}

/// Size of the active subset at time `t`: `ceil(lambda(t) |A|)`, at least one.
pub fn subset_size(pool: usize, t: f64, sched: &TrainSchedule) -> usize {
    let want = (sched.lambda(t) * pool as f64).ceil() as usize;
    want.clamp(1.min(pool), pool)
}

/// The highest-scoring `ceil(lambda(t) |A|)` samples. Ties go to the
/// lexicographically smaller id.
pub fn select_subset(
    scores: &[DifficultyScore],
    t: f64,
    sched: &TrainSchedule,
) -> Result<BTreeSet<String>> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot select from an empty score list"));
    }
    let mut order: Vec<&DifficultyScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.blended
            .partial_cmp(&a.blended)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    let n = subset_size(scores.len(), t, sched);
    Ok(order[..n].iter().map(|s| s.sample_id.clone()).collect())
}

#[derive(Serialize)]
struct ScoreDumpRow<'a> {
    epoch: usize,
    id: &'a str,
    prior: f64,
    dynamic: f64,
    blended: f64,
    selected: bool,
}

/// Appends one line per sample to a score dump.
pub fn append_score_dump(
    path: &Path,
    epoch: usize,
    scores: &[DifficultyScore],
    selected: &BTreeSet<String>,
) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for s in scores {
        let row = ScoreDumpRow {
            epoch,
            id: &s.sample_id,
            prior: s.prior,
            dynamic: s.dynamic,
            blended: s.blended,
            selected: selected.contains(&s.sample_id),
        };
        serde_json::to_writer(&mut f, &row)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(epochs: usize) -> TrainSchedule {
        TrainSchedule {
            epochs,
            ..Default::default()
        }
    }

    #[test]
    fn prior_scores() {
        assert!((prior_score(0.8, WeatherCondition::Sunny).unwrap() - 0.8).abs() < 1e-12);
        assert!((prior_score(0.8, WeatherCondition::Rainstorm).unwrap() - 0.48).abs() < 1e-12);
        for w in WeatherCondition::ALL {
            assert_eq!(prior_score(0.0, w).unwrap(), 0.0);
        }
        assert!(prior_score(1.2, WeatherCondition::Sunny).is_err());
        assert!(prior_score(-0.1, WeatherCondition::Sunny).is_err());
        let t = PriorScoreTable::default();
        assert_eq!(t.max_weight(), 5.0);
        let ordered = [
            WeatherCondition::Sunny,
            WeatherCondition::SunsetNight,
            WeatherCondition::Cloudy,
            WeatherCondition::Foggy,
            WeatherCondition::Rainstorm,
        ];
        assert!(ordered.windows(2).all(|w| t.weight(w[0]) > t.weight(w[1])));
    }

    #[test]
    fn difficulty_blends() {
        assert_eq!(difficulty_score(0.37, 0.9, 0.0).unwrap(), 0.37);
        assert!((difficulty_score(0.6, 0.2, 0.5).unwrap() - 0.70).abs() < 1e-12);
        assert!(difficulty_score(0.5, 0.5, 1.5).is_err());
        let ids: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let s = score_pool(&ids, &[0.1, 0.2, 0.3], &[2.0, 0.5, 1.0], 1.0).unwrap();
        assert_eq!(s[1].blended, 1.0, "lowest CE scores 1 at phi = 1");
        assert_eq!(s[0].blended, 0.0);
        let flat = score_pool(&ids, &[0.1, 0.2, 0.3], &[1.0, 1.0, 1.0], 1.0).unwrap();
        assert!(flat.iter().all(|d| d.dynamic == 0.5));
    }

    #[test]
    fn lambda_values() {
        let s = sched(10);
        assert_eq!(s.lambda(0.0), 0.5);
        assert!((s.lambda(10.0) - 0.93233).abs() < 1e-4);
        let xs: Vec<f64> = (0..=10).map(|t| s.lambda(t as f64)).collect();
        assert!(xs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn tau_phi_mu_values() {
        assert_eq!(tau_schedule(0.0, 8), 0.0);
        assert_eq!(tau_schedule(8.0, 8), 5.0);
        assert_eq!(tau_schedule(4.0, 8), 2.5);
        assert_eq!(phi_schedule(8.0, 8), 1.0);
        assert_eq!(adaptive_scalar(0, 1000), 0.0);
        assert!((adaptive_scalar(500, 1000) - 0.70711).abs() < 1e-4);
        assert_eq!(adaptive_scalar(1000, 1000), 1.0);
        assert_eq!(adaptive_scalar(5000, 1000), 1.0);
        assert_eq!(modulated_scalars(0.0, 0.2, 1.0), (0.0, 0.0));
        assert_eq!(modulated_scalars(1.0, 0.2, 1.0), (0.2, 1.0));
        assert_eq!(modulated_scalars(0.5, 0.2, 1.0), (0.1, 0.5));
    }

    #[test]
    fn epoch_time_spans_range() {
        let s = sched(5);
        assert_eq!(s.epoch_time(0), 0.0);
        assert_eq!(s.epoch_time(4), 5.0);
        assert_eq!(sched(1).epoch_time(0), 0.0);
    }

    fn scored(vals: &[(&str, f64)]) -> Vec<DifficultyScore> {
        vals.iter()
            .map(|(id, b)| DifficultyScore {
                sample_id: id.to_string(),
                prior: *b,
                dynamic: 0.0,
                blended: *b,
            })
            .collect()
    }

    #[test]
    fn selects_top_half_at_start() {
        let vals: Vec<(String, f64)> = (0..10)
            .map(|i| (format!("s{i}"), i as f64 / 10.0))
            .collect();
        let v: Vec<(&str, f64)> = vals.iter().map(|(a, b)| (a.as_str(), *b)).collect();
        let sel = select_subset(&scored(&v), 0.0, &sched(10)).unwrap();
        let want: BTreeSet<String> = (5..10).map(|i| format!("s{i}")).collect();
        assert_eq!(sel, want);
    }

    #[test]
    fn full_proportion_selects_everything() {
        let s = TrainSchedule {
            lambda0: 1.0,
            ..sched(10)
        };
        let sc = scored(&[("a", 0.1), ("b", 0.5), ("c", 0.2)]);
        assert_eq!(select_subset(&sc, 3.0, &s).unwrap().len(), 3);
    }

    #[test]
    fn ties_prefer_lower_id() {
        // lambda(0) * 3 rounds up to 2: one of the tied pair makes the cut
        let sc = scored(&[("b", 0.5), ("a", 0.5), ("c", 0.9)]);
        let sel = select_subset(&sc, 0.0, &sched(10)).unwrap();
        assert_eq!(sel, ["a", "c"].iter().map(|s| s.to_string()).collect());
        assert!(select_subset(&[], 0.0, &sched(10)).is_err());
    }
}
