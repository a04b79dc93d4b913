//! Sample-level boosting state.
//!
//! After each round the weight of every training sample is multiplied by
//! `p_i^{-α}`, where `p_i` is the probability the trained model assigns to the
//! sample's true class. During training, each sample's weight is also
//! standardized against running statistics and used to shrink or grow its
//! softmax scale inside a clipped band.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::PROB_FLOOR;

/// Bound on the standardized hardness before it modulates the scale.
pub const SCALE_CLIP: f64 = 0.33;

/// Per-sample probabilities keyed by sample id.
pub type SampleProbs = BTreeMap<u64, f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    round: u32,
    alpha: f64,
    /// Sorted, unique sample ids.
    ids: Vec<u64>,
    weights: Vec<f64>,
}

impl WeightTable {
    /// Round-1 table: every weight exactly 1.
    pub fn init(sample_ids: impl IntoIterator<Item = u64>, alpha: f64) -> Result<Self> {
        let mut ids: Vec<u64> = sample_ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::Contract("weight table needs at least one sample".into()));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::config("boost.alpha", format!("must be non-negative, got {alpha}")));
        }
        let weights = vec![1.0; ids.len()];
        Ok(Self {
            round: 1,
            alpha,
            ids,
            weights,
        })
    }

    /// Table for `num_samples` samples with ids `0..num_samples`.
    pub fn init_dense(num_samples: usize, alpha: f64) -> Result<Self> {
        Self::init(0..num_samples as u64, alpha)
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.ids.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn get(&self, id: u64) -> Option<f64> {
        self.ids.binary_search(&id).ok().map(|i| self.weights[i])
    }

    /// `d ← d · p^{-α}` for every sample, advancing the round.
    pub fn update_weights(&self, probs: &SampleProbs) -> Result<Self> {
        let mut weights = Vec::with_capacity(self.weights.len());
        for (id, d) in self.iter() {
            let p = *probs
                .get(&id)
                .ok_or_else(|| Error::Coverage(format!("no probability for sample {id}")))?;
            if !(PROB_FLOOR..=1.0).contains(&p) {
                return Err(Error::Contract(format!(
                    "probability {p} for sample {id} outside [{PROB_FLOOR:e}, 1]"
                )));
            }
            let w = d * p.powf(-self.alpha);
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Numeric(format!(
                    "weight of sample {id} became {w}"
                )));
            }
            weights.push(w);
        }
        Ok(Self {
            round: self.round + 1,
            alpha: self.alpha,
            ids: self.ids.clone(),
            weights,
        })
    }

    /// Rescales the weights so they sum to the sample count.
    pub fn renormalized(&self) -> Self {
        let sum: f64 = self.weights.iter().sum();
        let k = self.weights.len() as f64 / sum;
        Self {
            weights: self.weights.iter().map(|w| w * k).collect(),
            ..self.clone()
        }
    }

    /// Population mean and standard deviation of all weights.
    pub fn stats(&self) -> (f64, f64) {
        mean_std(&self.weights)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,weight\n");
        for (id, w) in self.iter() {
            writeln!(out, "{id},{w:.16e}").expect("write to String");
        }
        out
    }

    pub fn from_csv(text: &str, round: u32, alpha: f64) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("sample_id,weight") {
            return Err(Error::Format {
                offset: 0,
                message: "weight table must start with `sample_id,weight`".into(),
            });
        }
        let mut ids = Vec::new();
        let mut weights = Vec::new();
        let mut offset = "sample_id,weight\n".len() as u64;
        for line in lines {
            let bad = |msg: &str| Error::Format {
                offset,
                message: format!("{msg}: `{line}`"),
            };
            let (id, w) = line.split_once(',').ok_or_else(|| bad("expected two columns"))?;
            let id: u64 = id.parse().map_err(|_| bad("bad sample id"))?;
            let w: f64 = w.parse().map_err(|_| bad("bad weight"))?;
            if !(w.is_finite() && w > 0.0) {
                return Err(bad("weights must be positive"));
            }
            if ids.last().is_some_and(|&last| last >= id) {
                return Err(bad("sample ids must be strictly increasing"));
            }
            ids.push(id);
            weights.push(w);
            offset += line.len() as u64 + 1;
        }
        if ids.is_empty() {
            return Err(Error::Format {
                offset,
                message: "weight table has no rows".into(),
            });
        }
        Ok(Self {
            round,
            alpha,
            ids,
            weights,
        })
    }

    /// Writes `<path>` as CSV and `<path>.meta` with the round metadata.
    pub fn save(&self, path: &Path, meta: &WeightMeta) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let meta_path = meta_path(path);
        let text = toml::to_string(meta).expect("meta serializes");
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, WeightMeta)> {
        let meta_path = meta_path(path);
        let meta_text =
            std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: WeightMeta = toml::from_str(&meta_text).map_err(|e| Error::Format {
            offset: e.span().map_or(0, |s| s.start as u64),
            message: format!("{}: {}", meta_path.display(), e.message()),
        })?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = Self::from_csv(&text, meta.round, meta.alpha)?;
        Ok((table, meta))
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Sidecar record stored next to a weight table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightMeta {
    pub round: u32,
    pub alpha: f64,
    pub lambda: f64,
    pub ema_momentum: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Running weight statistics used to standardize hardness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardnessStats {
    pub running_mean: f64,
    pub running_std: f64,
    pub ema_momentum: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl HardnessStats {
    pub fn new(running_mean: f64, running_std: f64, ema_momentum: f64, lambda: f64, epsilon: f64) -> Self {
        Self {
            running_mean,
            running_std,
            ema_momentum,
            lambda,
            epsilon,
        }
    }

    /// Statistics seeded from the whole table, as at the start of a round.
    pub fn from_table(table: &WeightTable, ema_momentum: f64, lambda: f64, epsilon: f64) -> Self {
        let (mean, std) = table.stats();
        Self::new(mean, std, ema_momentum, lambda, epsilon)
    }

    /// EMA update with the population mean and std of one batch of weights.
    pub fn update_running_stats(&self, batch_weights: &[f64]) -> Result<Self> {
        if batch_weights.is_empty() {
            return Err(Error::Contract("empty batch in running stats update".into()));
        }
        let (mean, std) = mean_std(batch_weights);
        let m = self.ema_momentum;
        let next = Self {
            running_mean: m * self.running_mean + (1.0 - m) * mean,
            running_std: m * self.running_std + (1.0 - m) * std,
            ..*self
        };
        if !(next.running_mean.is_finite() && next.running_std.is_finite()) {
            return Err(Error::Numeric("running hardness statistics diverged".into()));
        }
        Ok(next)
    }

    /// `d̂ = λ · (d − mean) / max(std, ε)`.
    pub fn normalize_hardness(&self, d: f64) -> f64 {
        (d - self.running_mean) / self.running_std.max(self.epsilon) * self.lambda
    }
}

/// `s' = s − clip(d̂, −0.33, 0.33)·s`.
pub fn adapt_scale(base_scale: f64, d_hat: f64) -> f64 {
    base_scale - d_hat.clamp(-SCALE_CLIP, SCALE_CLIP) * base_scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(pairs: &[(u64, f64)]) -> SampleProbs {
        pairs.iter().copied().collect()
    }

    #[test]
    fn init_table_examples() {
        let t = WeightTable::init_dense(10, 0.1).unwrap();
        assert_eq!(t.round(), 1);
        assert_eq!(t.alpha(), 0.1);
        assert!(t.weights().iter().all(|&w| w == 1.0));
        let one = WeightTable::init_dense(1, 0.0).unwrap();
        assert_eq!(one.weights(), &[1.0]);
        assert!(WeightTable::init_dense(0, 0.1).is_err());
    }

    #[test]
    fn update_examples() {
        let t = WeightTable::init_dense(2, 0.0).unwrap();
        let u = t.update_weights(&probs(&[(0, 0.3), (1, 0.9)])).unwrap();
        assert_eq!(u.round(), 2);
        assert_eq!(u.weights(), t.weights());

        let t = WeightTable::init_dense(2, 0.1).unwrap();
        let u = t.update_weights(&probs(&[(0, 1.0), (1, 0.5)])).unwrap();
        assert_eq!(u.weights()[0], 1.0);
        assert!((u.weights()[1] - 2f64.powf(0.1)).abs() < 1e-15);
        assert!((u.weights()[1] - 1.071_773_46).abs() < 1e-8);
    }

    #[test]
    fn update_errors() {
        let t = WeightTable::init_dense(2, 0.1).unwrap();
        assert!(matches!(
            t.update_weights(&probs(&[(0, 0.5)])),
            Err(Error::Coverage(_))
        ));
        assert!(matches!(
            t.update_weights(&probs(&[(0, 0.5), (1, 0.0)])),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            t.update_weights(&probs(&[(0, 0.5), (1, 1.5)])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn running_stats_examples() {
        let s = HardnessStats::new(5.0, 5.0, 0.0, 1.0, 1e-6);
        let u = s.update_running_stats(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((u.running_mean, u.running_std), (1.0, 0.0));
        let u = s.update_running_stats(&[0.0, 2.0]).unwrap();
        assert_eq!((u.running_mean, u.running_std), (1.0, 1.0));
        let s = HardnessStats::new(1.0, 0.0, 0.9, 1.0, 1e-6);
        let u = s.update_running_stats(&[2.0, 2.0]).unwrap();
        assert!((u.running_mean - 1.1).abs() < 1e-15);
        assert!(s.update_running_stats(&[]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = HardnessStats::new(1.0, 0.0, 0.99, 1.0, 1e-6);
        assert_eq!(s.normalize_hardness(1.0), 0.0);
        let s = HardnessStats::new(1.0, 0.5, 0.99, 1.0, 1e-6);
        assert_eq!(s.normalize_hardness(2.0), 2.0);
        let s = HardnessStats { lambda: 0.5, ..s };
        assert_eq!(s.normalize_hardness(2.0), 1.0);
    }

    #[test]
    fn adapt_scale_examples() {
        assert_eq!(adapt_scale(64.0, 0.0), 64.0);
        assert!((adapt_scale(64.0, 5.0) - 42.88).abs() < 1e-12);
        assert!((adapt_scale(64.0, -0.2) - 76.8).abs() < 1e-12);
        assert!((adapt_scale(64.0, -9.0) - 85.12).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let t = WeightTable::init_dense(4, 0.1).unwrap();
        let u = t
            .update_weights(&probs(&[(0, 0.123456789), (1, 1e-12), (2, 0.5), (3, 0.999)]))
            .unwrap();
        let back = WeightTable::from_csv(&u.to_csv(), u.round(), u.alpha()).unwrap();
        assert_eq!(back, u);
        assert!(WeightTable::from_csv("id,w\n", 1, 0.1).is_err());
        assert!(WeightTable::from_csv("sample_id,weight\n1,2\n0,1\n", 1, 0.1).is_err());
    }

    #[test]
    fn save_and_load_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.csv");
        let t = WeightTable::init_dense(3, 0.3).unwrap();
        let meta = WeightMeta {
            round: 1,
            alpha: 0.3,
            lambda: 1.0,
            ema_momentum: 0.99,
        };
        t.save(&path, &meta).unwrap();
        let (back, m) = WeightTable::load(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(m, meta);
    }

    #[test]
    fn renormalize_sums_to_count() {
        let t = WeightTable::init_dense(3, 0.5)
            .unwrap()
            .update_weights(&probs(&[(0, 0.1), (1, 0.5), (2, 0.9)]))
            .unwrap()
            .renormalized();
        assert!((t.weights().iter().sum::<f64>() - 3.0).abs() < 1e-12);
    }
}
