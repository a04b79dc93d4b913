//! Ensemble match scores and open-set verification / identification metrics.
//!
//! The ensemble score of a pair is `Σ_k β_k · cos(embed_k(a), embed_k(b))`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvalSplit, LabeledSample, Tier, TierPair};
use crate::error::{Error, Result};
use crate::numeric::{dot, EmbeddingModel};

/// FAR operating points reported for verification.
pub const FAR_TARGETS: [f64; 3] = [1e-3, 1e-2, 1e-1];
/// Ranks reported for identification.
pub const RANKS: [usize; 3] = [1, 5, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    models: Vec<EmbeddingModel>,
    betas: Vec<f64>,
}

impl Ensemble {
    pub fn new(models: Vec<EmbeddingModel>, betas: Vec<f64>) -> Result<Self> {
        if models.is_empty() || models.len() != betas.len() {
            return Err(Error::Contract(format!(
                "ensemble needs matching non-empty models and betas, got {} and {}",
                models.len(),
                betas.len()
            )));
        }
        if let Some(b) = betas.iter().find(|b| !b.is_finite()) {
            return Err(Error::Contract(format!("beta {b} is not finite")));
        }
        let dim = models[0].input_dim();
        if models.iter().any(|m| m.input_dim() != dim) {
            return Err(Error::Dimension("ensemble members disagree on input dim".into()));
        }
        Ok(Self { models, betas })
    }

    pub fn single(model: EmbeddingModel) -> Self {
        Self {
            models: vec![model],
            betas: vec![1.0],
        }
    }

    pub fn models(&self) -> &[EmbeddingModel] {
        &self.models
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn with_betas(&self, betas: Vec<f64>) -> Result<Self> {
        Self::new(self.models.clone(), betas)
    }

    /// Per-model embeddings of `input`.
    pub fn embed(&self, input: &[f64]) -> Result<EnsembleEmbedding> {
        Ok(EnsembleEmbedding(
            self.models
                .iter()
                .map(|m| m.embed(input))
                .collect::<Result<_>>()?,
        ))
    }

    /// Embeds every sample; parallel over samples, results in input order.
    pub fn embed_all(&self, samples: &[LabeledSample]) -> Result<Vec<EnsembleEmbedding>> {
        samples.par_iter().map(|s| self.embed(&s.input)).collect()
    }

    /// Weighted sum of per-model cosines between two precomputed embeddings.
    pub fn score_embedded(&self, a: &EnsembleEmbedding, b: &EnsembleEmbedding) -> f64 {
        self.betas
            .iter()
            .zip(a.0.iter().zip(&b.0))
            .map(|(beta, (x, y))| beta * dot(x, y))
            .sum()
    }

    pub fn ensemble_score(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        Ok(self.score_embedded(&self.embed(a)?, &self.embed(b)?))
    }
}

/// One unit embedding per ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEmbedding(pub Vec<Vec<f64>>);

/// A scored verification pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub genuine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub accuracy: f64,
    pub threshold: f64,
    pub tar_at_far: Vec<TarAtFar>,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// ROC over thresholds `{+∞} ∪ distinct scores ∪ {−∞}`, descending; a pair is
/// accepted when `score ≥ threshold`.
pub fn roc_curve(pairs: &[ScoredPair]) -> Result<Vec<RocPoint>> {
    let genuine = pairs.iter().filter(|p| p.genuine).count();
    let impostor = pairs.len() - genuine;
    if impostor == 0 {
        return Err(Error::Contract("no impostor pairs; FAR is undefined".into()));
    }
    if genuine == 0 {
        return Err(Error::Contract("no genuine pairs; TAR is undefined".into()));
    }
    if pairs.iter().any(|p| !p.score.is_finite()) {
        return Err(Error::Numeric("non-finite verification score".into()));
    }
    let mut sorted: Vec<ScoredPair> = pairs.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        tar: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].genuine {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            far: fp as f64 / impostor as f64,
            tar: tp as f64 / genuine as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        far: 1.0,
        tar: 1.0,
    });
    Ok(points)
}

/// Accuracy at the threshold maximizing `(TPR + TNR) / 2` and TAR at each FAR target.
///
/// For a FAR target the operating threshold is the lowest one whose empirical
/// FAR does not exceed the target, i.e. the highest attainable TAR.
pub fn verification_metrics(pairs: &[ScoredPair]) -> Result<VerificationReport> {
    let roc = roc_curve(pairs)?;
    let genuine = pairs.iter().filter(|p| p.genuine).count();
    let impostor = pairs.len() - genuine;
    let mut best: Option<(f64, &RocPoint)> = None;
    for p in &roc {
        let balanced = (p.tar + (1.0 - p.far)) / 2.0;
        if best.is_none_or(|(b, _)| balanced > b) {
            best = Some((balanced, p));
        }
    }
    let (_, best) = best.expect("roc is never empty");
    let tp = best.tar * genuine as f64;
    let tn = (1.0 - best.far) * impostor as f64;
    let accuracy = (tp + tn) / pairs.len() as f64;
    let tar_at_far = FAR_TARGETS
        .iter()
        .map(|&target| {
            let p = roc
                .iter()
                .rev()
                .find(|p| p.far <= target)
                .expect("threshold +inf has FAR 0");
            TarAtFar {
                far: target,
                tar: p.tar,
                threshold: p.threshold,
            }
        })
        .collect();
    Ok(VerificationReport {
        accuracy,
        threshold: best.threshold,
        tar_at_far,
        genuine_pairs: genuine,
        impostor_pairs: impostor,
    })
}

/// Scores the split's verification pairs and computes the metrics.
pub fn verification_eval(split: &EvalSplit, ensemble: &Ensemble) -> Result<VerificationReport> {
    let emb = ensemble.embed_all(&split.samples)?;
    verification_metrics(&score_pairs(split, ensemble, &emb, |_| true))
}

fn score_pairs(
    split: &EvalSplit,
    ensemble: &Ensemble,
    emb: &[EnsembleEmbedding],
    keep: impl Fn(TierPair) -> bool,
) -> Vec<ScoredPair> {
    split
        .verification_pairs
        .iter()
        .filter(|p| keep(p.tier_pair))
        .map(|p| ScoredPair {
            score: ensemble.score_embedded(&emb[p.a], &emb[p.b]),
            genuine: p.same_class,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    /// `(k, accuracy)` for each reported rank.
    pub rank_accuracy: Vec<(usize, f64)>,
    pub probes: usize,
}

impl IdentificationReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.rank_accuracy
            .iter()
            .find(|(r, _)| *r == k)
            .map(|(_, a)| *a)
    }
}

/// Rank of the true class for each probe given a `probes × gallery` score
/// matrix: descending by score, ties ordered by lower class id.
pub fn probe_ranks(
    scores: &[Vec<f64>],
    gallery_classes: &[usize],
    probe_classes: &[usize],
) -> Result<Vec<usize>> {
    let mut uniq = gallery_classes.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() != gallery_classes.len() {
        return Err(Error::Contract("gallery classes must be unique".into()));
    }
    scores
        .iter()
        .zip(probe_classes)
        .map(|(row, &class)| {
            if row.len() != gallery_classes.len() {
                return Err(Error::Dimension("score row length != gallery size".into()));
            }
            let t = gallery_classes
                .iter()
                .position(|&g| g == class)
                .ok_or_else(|| {
                    Error::Contract(format!("probe class {class} is not in the gallery"))
                })?;
            let true_score = row[t];
            let ahead = row
                .iter()
                .zip(gallery_classes)
                .filter(|&(&s, &g)| s > true_score || (s == true_score && g < class))
                .count();
            Ok(ahead + 1)
        })
        .collect()
}

pub fn rank_accuracy(ranks: &[usize]) -> IdentificationReport {
    let n = ranks.len();
    IdentificationReport {
        rank_accuracy: RANKS
            .iter()
            .map(|&k| {
                let hit = ranks.iter().filter(|&&r| r <= k).count();
                (k, if n == 0 { 0.0 } else { hit as f64 / n as f64 })
            })
            .collect(),
        probes: n,
    }
}

fn identification_from_embeddings(
    split: &EvalSplit,
    ensemble: &Ensemble,
    emb: &[EnsembleEmbedding],
    probes: &[usize],
) -> Result<IdentificationReport> {
    let gallery_classes: Vec<usize> = split
        .gallery
        .iter()
        .map(|&g| split.samples[g].class_id)
        .collect();
    let scores: Vec<Vec<f64>> = probes
        .iter()
        .map(|&p| {
            split
                .gallery
                .iter()
                .map(|&g| ensemble.score_embedded(&emb[p], &emb[g]))
                .collect()
        })
        .collect();
    let probe_classes: Vec<usize> = probes.iter().map(|&p| split.samples[p].class_id).collect();
    Ok(rank_accuracy(&probe_ranks(
        &scores,
        &gallery_classes,
        &probe_classes,
    )?))
}

/// Closed-set rank-k identification of every probe against the gallery.
pub fn identification_eval(split: &EvalSplit, ensemble: &Ensemble) -> Result<IdentificationReport> {
    let emb = ensemble.embed_all(&split.samples)?;
    identification_from_embeddings(split, ensemble, &emb, &split.probes)
}

/// Metrics for one stratum; a section is absent when the stratum cannot
/// support it (e.g. no impostor pairs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub verification: Option<VerificationReport>,
    pub identification: Option<IdentificationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: StratumReport,
    /// Easy-easy pairs; easy probes.
    pub easy: StratumReport,
    /// Pairs with at least one hard member; hard probes.
    pub hard: StratumReport,
}

pub fn evaluate(split: &EvalSplit, ensemble: &Ensemble) -> Result<EvalReport> {
    let emb = ensemble.embed_all(&split.samples)?;
    let verify = |keep: &dyn Fn(TierPair) -> bool| -> Result<Option<VerificationReport>> {
        let pairs = score_pairs(split, ensemble, &emb, keep);
        let genuine = pairs.iter().filter(|p| p.genuine).count();
        if genuine == 0 || genuine == pairs.len() {
            return Ok(None);
        }
        verification_metrics(&pairs).map(Some)
    };
    let identify = |tier: Option<Tier>| -> Result<Option<IdentificationReport>> {
        let probes: Vec<usize> = split
            .probes
            .iter()
            .copied()
            .filter(|&p| tier.is_none_or(|t| split.samples[p].tier == t))
            .collect();
        if probes.is_empty() {
            return Ok(None);
        }
        identification_from_embeddings(split, ensemble, &emb, &probes).map(Some)
    };
    Ok(EvalReport {
        overall: StratumReport {
            verification: verify(&|_| true)?,
            identification: identify(None)?,
        },
        easy: StratumReport {
            verification: verify(&|t| t == TierPair::EasyEasy)?,
            identification: identify(Some(Tier::Easy))?,
        },
        hard: StratumReport {
            verification: verify(&|t| t != TierPair::EasyEasy)?,
            identification: identify(Some(Tier::Hard))?,
        },
    })
}

/// ROC of all verification pairs for plotting.
pub fn roc_for_split(split: &EvalSplit, ensemble: &Ensemble) -> Result<Vec<RocPoint>> {
    let emb = ensemble.embed_all(&split.samples)?;
    roc_curve(&score_pairs(split, ensemble, &emb, |_| true))
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("far,tar\n");
    for p in points {
        writeln!(out, "{:.16e},{:.16e}", p.far, p.tar).expect("write to String");
    }
    out
}

impl EvalReport {
    /// Flat `metric → value` view, e.g. `hard.identification.rank1`.
    pub fn flatten(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (name, s) in [("overall", &self.overall), ("easy", &self.easy), ("hard", &self.hard)] {
            if let Some(v) = &s.verification {
                out.insert(format!("{name}.verification.accuracy"), v.accuracy);
                for t in &v.tar_at_far {
                    out.insert(format!("{name}.verification.tar@far={:e}", t.far), t.tar);
                }
                out.insert(format!("{name}.verification.genuine_pairs"), v.genuine_pairs as f64);
                out.insert(format!("{name}.verification.impostor_pairs"), v.impostor_pairs as f64);
            }
            if let Some(i) = &s.identification {
                for (k, a) in &i.rank_accuracy {
                    out.insert(format!("{name}.identification.rank{k}"), *a);
                }
                out.insert(format!("{name}.identification.probes"), i.probes as f64);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            offset: e.column() as u64,
            message: format!("eval report JSON: {e}"),
        })
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.flatten() {
            writeln!(out, "{k},{v:.16e}").expect("write to String");
        }
        out
    }

    pub fn hard_rank1(&self) -> Option<f64> {
        self.hard.identification.as_ref().and_then(|i| i.rank(1))
    }

    pub fn easy_verification_accuracy(&self) -> Option<f64> {
        self.easy.verification.as_ref().map(|v| v.accuracy)
    }
}

/// Metric-by-metric comparison of two reports.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTable {
    /// `(metric, a, b, b − a)`.
    pub rows: Vec<(String, f64, f64, f64)>,
}

pub const DELTA_CSV_HEADER: &str = "metric,a,b,delta";

pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<DeltaTable> {
    let fa = a.flatten();
    let fb = b.flatten();
    if fa.keys().ne(fb.keys()) {
        let only_a: Vec<_> = fa.keys().filter(|k| !fb.contains_key(*k)).collect();
        let only_b: Vec<_> = fb.keys().filter(|k| !fa.contains_key(*k)).collect();
        return Err(Error::Schema(format!(
            "metric sets differ; only in a: {only_a:?}, only in b: {only_b:?}"
        )));
    }
    Ok(DeltaTable {
        rows: fa
            .into_iter()
            .zip(fb.into_values())
            .map(|((k, va), vb)| (k, va, vb, vb - va))
            .collect(),
    })
}

impl DeltaTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{DELTA_CSV_HEADER}\n");
        for (k, a, b, d) in &self.rows {
            writeln!(out, "{k},{a:.16e},{b:.16e},{d:.16e}").expect("write to String");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>12}  {:>12}  {:>12}\n", "metric", "a", "b", "delta");
        for (k, a, b, d) in &self.rows {
            writeln!(out, "{k:<width$}  {a:>12.6}  {b:>12.6}  {d:>+12.6}").expect("write");
        }
        out
    }
}
