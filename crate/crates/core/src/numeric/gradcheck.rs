//! Finite-difference gradient checking with a five-point central stencil.

use super::model::{EmbeddingModel, Gradients};
use crate::error::Result;

/// Initial stencil step. Its truncation error is O(h^4).
pub const FD_STEP: f64 = 1e-4;
/// Smallest step tried when refining in high-curvature regions.
pub const MIN_FD_STEP: f64 = 1e-7;
/// Two successive estimates agreeing to this relative accuracy end the
/// refinement.
const SETTLE: f64 = 1e-7;

/// Denominator floor for the relative error. Loss evaluations carry about
/// 1e-9 of accumulated roundoff, so entries smaller than this are compared
/// in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn block_names(model: &EmbeddingModel) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..model.layers().len() {
        names.push(format!("layer{l}.weight"));
        names.push(format!("layer{l}.bias"));
    }
    names.push("centers".into());
    names
}

/// Compares the analytic gradient returned by `loss` against central
/// differences over every parameter of `model`.
///
/// `loss` must return the scalar loss and its gradient for the given model.
pub fn grad_check<F>(model: &EmbeddingModel, loss: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&EmbeddingModel) -> Result<(f64, Gradients)>,
{
    let (_, analytic) = loss(model)?;
    let analytic_blocks: Vec<Vec<f64>> = analytic.blocks().iter().map(|b| b.to_vec()).collect();
    let names = block_names(model);
    let mut probe = model.clone();
    let mut blocks = Vec::with_capacity(names.len());
    for (b, name) in names.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (j, &analytic) in analytic_blocks[b].iter().enumerate() {
            let orig = probe.param_blocks()[b][j];
            let mut estimate = |h: f64| -> Result<f64> {
                let mut at = |k: f64| -> Result<f64> {
                    probe.param_blocks_mut()[b][j] = orig + k * h;
                    Ok(loss(&probe)?.0)
                };
                let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
                Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
            };
            // Shrink the step until the estimate stops moving; this depends
            // only on the loss, never on the analytic value.
            let mut h = FD_STEP;
            let mut numeric = estimate(h)?;
            while h / 4.0 >= MIN_FD_STEP {
                let finer = estimate(h / 4.0)?;
                if (finer - numeric).abs() <= SETTLE * finer.abs().max(numeric.abs()).max(1.0) {
                    // Keep the coarser step: same accuracy, less roundoff.
                    break;
                }
                numeric = finer;
                h /= 4.0;
            }
            probe.param_blocks_mut()[b][j] = orig;
            worst = worst.max(relative_error(analytic, numeric));
        }
        blocks.push(BlockError {
            name,
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { blocks, tolerance })
}
