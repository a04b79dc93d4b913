//! Angular-margin classification head.
//!
//! For a unit feature `x_i` and unit centers `W_j`, with `θ_{j,i} = arccos⟨x_i, W_j⟩`,
//! the logits are
//!
//! ```text
//! f_{y_i} = s·cos(m_s·θ + m_a) − m_c
//! f_j     = s·cos(θ)                      (j ≠ y_i)
//! ```
//!
//! and the sample-weighted loss is `L = −(1/N) Σ d_i · log p_i` with `p_i` the
//! softmax probability of the true class. The per-sample scale `s` may differ
//! from the configured base scale (see [`crate::boost::adapt_scale`]).

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, l2_norm, Matrix};

/// Lower clamp on softmax probabilities; keeps `p^{-α}` finite.
pub const PROB_FLOOR: f64 = 1e-12;
/// Slack allowed on θ outside `[0, π]`.
pub const THETA_SLACK: f64 = 1e-9;
/// Allowed deviation from unit norm for features and centers.
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// `sin θ` is clamped below at this value in the arccos derivative.
pub const SIN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginParams {
    /// Multiplicative angular margin.
    pub m_s: f64,
    /// Additive angular margin, radians.
    pub m_a: f64,
    /// Additive cosine margin.
    pub m_c: f64,
    pub base_scale: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        MarginPreset::CosFace.params(30.0)
    }
}

impl MarginParams {
    pub fn new(m_s: f64, m_a: f64, m_c: f64, base_scale: f64) -> Result<Self> {
        let p = Self {
            m_s,
            m_a,
            m_c,
            base_scale,
        };
        p.validate("margin.")?;
        Ok(p)
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, v) in [("m_s", self.m_s), ("m_a", self.m_a), ("m_c", self.m_c)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    format!("{prefix}{name}"),
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        if !(self.base_scale.is_finite() && self.base_scale > 0.0) {
            return Err(Error::config(
                format!("{prefix}base_scale"),
                format!("must be positive, got {}", self.base_scale),
            ));
        }
        if self.m_s > 1.0 && self.m_s * PI + self.m_a > PI {
            return Err(Error::config(
                format!("{prefix}m_s"),
                format!(
                    "m_s·π + m_a = {} leaves [0, π]; the positive-branch angle must stay in range",
                    self.m_s * PI + self.m_a
                ),
            ));
        }
        Ok(())
    }
}

/// Named margin configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginPreset {
    /// Additive cosine margin 0.35.
    CosFace,
    /// Additive angular margin 0.5 rad.
    ArcFace,
    /// Fixed-norm reading of AdaFace: the 0.4 margin split evenly between an
    /// angular and a cosine term.
    AdafaceLike,
}

impl MarginPreset {
    pub const ALL: [MarginPreset; 3] = [
        MarginPreset::CosFace,
        MarginPreset::ArcFace,
        MarginPreset::AdafaceLike,
    ];

    pub fn params(self, base_scale: f64) -> MarginParams {
        let (m_s, m_a, m_c) = match self {
            MarginPreset::CosFace => (1.0, 0.0, 0.35),
            MarginPreset::ArcFace => (1.0, 0.5, 0.0),
            MarginPreset::AdafaceLike => (1.0, 0.2, 0.2),
        };
        MarginParams {
            m_s,
            m_a,
            m_c,
            base_scale,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MarginPreset::CosFace => "cosface",
            MarginPreset::ArcFace => "arcface",
            MarginPreset::AdafaceLike => "adaface-like",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Logit for one (sample, class) angle.
pub fn margin_logit(theta: f64, params: &MarginParams, scale: f64, is_positive: bool) -> Result<f64> {
    if !(-THETA_SLACK..=PI + THETA_SLACK).contains(&theta) {
        return Err(Error::Domain(format!("theta {theta} outside [0, π]")));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Domain(format!("scale must be positive, got {scale}")));
    }
    Ok(if is_positive {
        scale * (params.m_s * theta + params.m_a).cos() - params.m_c
    } else {
        scale * theta.cos()
    })
}

/// Logits of one sample against every class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRow {
    pub logits: Vec<f64>,
    /// Clamped cosines `⟨x_i, W_j⟩`, kept for the backward pass.
    pub cosines: Vec<f64>,
    pub label: usize,
    pub applied_scale: f64,
}

impl LogitRow {
    pub fn positive_logit(&self) -> f64 {
        self.logits[self.label]
    }

    pub fn theta_positive(&self) -> f64 {
        self.cosines[self.label].acos()
    }
}

fn check_unit_rows(m: &Matrix, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        let n = l2_norm(m.row(r));
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!(
                "{what} row {r} has norm {n}, expected unit length"
            )));
        }
    }
    Ok(())
}

/// Computes margin logits for a batch.
///
/// `features` is `N × D`, `centers` is `C × D`; both must hold unit rows.
pub fn forward_logits(
    features: &Matrix,
    centers: &Matrix,
    labels: &[usize],
    params: &MarginParams,
    per_sample_scale: &[f64],
) -> Result<Vec<LogitRow>> {
    let n = features.rows();
    if labels.len() != n || per_sample_scale.len() != n {
        return Err(Error::Dimension(format!(
            "{n} features, {} labels, {} scales",
            labels.len(),
            per_sample_scale.len()
        )));
    }
    if features.cols() != centers.cols() {
        return Err(Error::Dimension(format!(
            "feature dim {} != center dim {}",
            features.cols(),
            centers.cols()
        )));
    }
    check_unit_rows(features, "feature")?;
    check_unit_rows(centers, "center")?;
    let c = centers.rows();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let label = labels[i];
        if label >= c {
            return Err(Error::Contract(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let scale = per_sample_scale[i];
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Contract(format!(
                "per-sample scale {i} must be positive, got {scale}"
            )));
        }
        let x = features.row(i);
        let mut logits = Vec::with_capacity(c);
        let mut cosines = Vec::with_capacity(c);
        for j in 0..c {
            let cos = dot(x, centers.row(j)).clamp(-1.0, 1.0);
            let logit = if j == label {
                scale * (params.m_s * cos.acos() + params.m_a).cos() - params.m_c
            } else {
                scale * cos
            };
            cosines.push(cos);
            logits.push(logit);
        }
        rows.push(LogitRow {
            logits,
            cosines,
            label,
            applied_scale: scale,
        });
    }
    Ok(rows)
}

/// Full softmax over a row (max-subtracted, fixed summation order).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|f| (f - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log p` of the true class before clamping.
fn log_prob_unclamped(row: &LogitRow) -> f64 {
    let max = row.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.logits.iter().map(|f| (f - max).exp()).sum();
    row.positive_logit() - max - z.ln()
}

/// Softmax probability of the true class, clamped to `[PROB_FLOOR, 1]`.
pub fn softmax_prob(row: &LogitRow) -> f64 {
    log_prob_unclamped(row).exp().clamp(PROB_FLOOR, 1.0)
}

/// `L = −(1/N) Σ d_i log p_i`.
pub fn weighted_loss(rows: &[LogitRow], weights: &[f64]) -> Result<f64> {
    if rows.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} rows but {} weights",
            rows.len(),
            weights.len()
        )));
    }
    if rows.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = rows
        .iter()
        .zip(weights)
        .map(|(r, &d)| -d * softmax_prob(r).ln())
        .sum();
    Ok(total / rows.len() as f64)
}

/// Gradients of [`weighted_loss`] with respect to the unit features and the
/// unit centers.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub features: Matrix,
    pub centers: Matrix,
}

/// Analytic backward pass of the weighted margin loss.
///
/// Near `θ ∈ {0, π}` the arccos derivative uses `sin θ` clamped below at
/// [`SIN_FLOOR`].
pub fn loss_backward(
    rows: &[LogitRow],
    weights: &[f64],
    features: &Matrix,
    centers: &Matrix,
    params: &MarginParams,
) -> Result<HeadGradients> {
    let n = rows.len();
    if weights.len() != n || features.rows() != n {
        return Err(Error::Dimension(format!(
            "{n} rows, {} weights, {} features",
            weights.len(),
            features.rows()
        )));
    }
    let mut gf = Matrix::zeros(features.rows(), features.cols());
    let mut gc = Matrix::zeros(centers.rows(), centers.cols());
    if n == 0 {
        return Ok(HeadGradients {
            features: gf,
            centers: gc,
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut dlogit = vec![0.0; centers.rows()];
    for (i, row) in rows.iter().enumerate() {
        // Clamped probabilities contribute a constant, hence no gradient.
        if log_prob_unclamped(row).exp() < PROB_FLOOR {
            continue;
        }
        let w = weights[i] * inv_n;
        if w == 0.0 {
            continue;
        }
        let probs = softmax(&row.logits);
        let s = row.applied_scale;
        for (j, (&p, &cos)) in probs.iter().zip(&row.cosines).enumerate() {
            let dl_df = w * (p - if j == row.label { 1.0 } else { 0.0 });
            let df_dcos = if j == row.label {
                let theta = cos.acos();
                let sin_theta = (1.0 - cos * cos).max(0.0).sqrt().max(SIN_FLOOR);
                s * params.m_s * (params.m_s * theta + params.m_a).sin() / sin_theta
            } else {
                s
            };
            dlogit[j] = dl_df * df_dcos;
        }
        let x = features.row(i);
        let gx = gf.row_mut(i);
        for (j, &g) in dlogit.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, &wc) in gx.iter_mut().zip(centers.row(j)) {
                *d += g * wc;
            }
            for (d, &xv) in gc.row_mut(j).iter_mut().zip(x) {
                *d += g * xv;
            }
        }
    }
    Ok(HeadGradients {
        features: gf,
        centers: gc,
    })
}

/// Denominator under the assumption that every negative cosine is zero.
pub fn approx_denominator(pos_logit: f64, num_classes: usize) -> Result<f64> {
    if num_classes == 0 {
        return Err(Error::Contract("num_classes must be at least 1".into()));
    }
    Ok(pos_logit.exp() + (num_classes - 1) as f64)
}

/// Exact softmax denominator `Σ_j exp(f_j)`.
pub fn exact_denominator(row: &LogitRow) -> f64 {
    row.logits.iter().map(|f| f.exp()).sum()
}

/// Mean relative gap `|exact − approx| / exact` over a batch.
pub fn denominator_gap(rows: &[LogitRow]) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in rows {
        let exact = exact_denominator(r);
        let approx = approx_denominator(r.positive_logit(), r.logits.len())?;
        total += (exact - approx).abs() / exact;
    }
    Ok(total / rows.len() as f64)
}

/// Reads a sample weight as a rescaling of the margin head: `(d·s, d·m_c)`.
pub fn effective_margin_decomposition(d: f64, params: &MarginParams) -> Result<(f64, f64)> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::Contract(format!("weight must be positive, got {d}")));
    }
    Ok((d * params.base_scale, d * params.m_c))
}

/// Both sides of `(e^{f})^d = e^{d·s·cos(m_s θ + m_a) − d·m_c}` for the positive logit.
pub fn weighted_exponent_sides(theta: f64, d: f64, params: &MarginParams) -> Result<(f64, f64)> {
    let f = margin_logit(theta, params, params.base_scale, true)?;
    let (eff_scale, eff_margin) = effective_margin_decomposition(d, params)?;
    let lhs = f.exp().powf(d);
    let rhs = (eff_scale * (params.m_s * theta + params.m_a).cos() - eff_margin).exp();
    Ok((lhs, rhs))
}

/// One row of the `(θ, p, d)` diagnostic dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostic {
    pub sample_id: u64,
    pub theta: f64,
    pub prob: f64,
    pub weight: f64,
}

pub fn write_diagnostics_csv(path: &Path, rows: &[Diagnostic]) -> Result<()> {
    let mut out = String::from("sample_id,theta,prob,weight\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            r.sample_id, r.theta, r.prob, r.weight
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
