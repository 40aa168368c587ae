//! Central finite-difference verification of analytic gradients, both at the
//! loss level (gradients w.r.t. embeddings) and through the MLP (gradients
//! w.r.t. parameters).
//!
//! A trial is excluded and redrawn when the point sits within
//! [`KINK_MARGIN`] of a hinge kink (or, through the model, a ReLU kink), or
//! when a ±step perturbation changes which tuple members get mined or which
//! hinges are active.

use rand::Rng;
use serde::Serialize;

use super::mlp::{Gradients, Mlp, MlpConfig};
use crate::embedding::{Embedding, Metric};
use crate::error::Result;
use crate::losses::{batch_objective, LossKind, LossSpec, Margins, MinedLoss};
use crate::mining::{MiningBatch, MiningError};
use crate::seed;

pub const FD_STEP: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Loss,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: LossKind,
    pub level: Level,
    pub trials: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Shape of the random batches used as check points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceShape {
    pub places: usize,
    pub views: usize,
    pub dim: usize,
    /// Distance between place centres; entries are centre + U(−1, 1).
    pub place_separation: f64,
}

impl Default for InstanceShape {
    fn default() -> Self {
        InstanceShape {
            places: 3,
            views: 3,
            dim: 4,
            place_separation: 0.5,
        }
    }
}

fn random_batch(shape: &InstanceShape, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<String>) {
    let mut points = Vec::new();
    let mut places = Vec::new();
    for p in 0..shape.places {
        let centre: Vec<f64> = (0..shape.dim)
            .map(|d| {
                if d == p % shape.dim {
                    shape.place_separation * p as f64
                } else {
                    0.0
                }
            })
            .collect();
        for _ in 0..shape.views {
            points.push(
                centre
                    .iter()
                    .map(|c| c + rng.random_range(-1.0..1.0))
                    .collect(),
            );
            places.push(format!("place{p}"));
        }
    }
    (points, places)
}

/// `max |a − n| / max(‖a‖∞, ‖n‖∞)`, zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale.max(1e-8)
}

fn embeddings(points: &[Vec<f64>]) -> Vec<Embedding> {
    points
        .iter()
        .map(|p| Embedding::from_trusted(p.clone()))
        .collect()
}

fn anchor_loss(
    spec: &LossSpec,
    points: &[Vec<f64>],
    places: &[String],
    seed: u64,
) -> Result<MinedLoss, MiningError> {
    let e = embeddings(points);
    let batch = MiningBatch::new(&e, places, 0).expect("well-formed instance");
    spec.anchor_loss(&batch, seed)
}

fn same_piece(a: &MinedLoss, b: &MinedLoss) -> bool {
    a.members == b.members
        && a.hinge_args
            .iter()
            .zip(&b.hinge_args)
            .all(|(x, y)| (*x > 0.0) == (*y > 0.0))
}

/// Loss-level check of `spec` with the true analytic gradient.
pub fn gradcheck_loss(
    spec: &LossSpec,
    shape: &InstanceShape,
    trials: usize,
    seed: u64,
) -> GradcheckReport {
    gradcheck_loss_with(spec, shape, trials, seed, anchor_loss)
}

/// Loss-level check where the analytic side comes from `analytic`; the
/// numeric side always uses the real loss. Lets tests feed a corrupted
/// gradient as a negative control.
pub fn gradcheck_loss_with<F>(
    spec: &LossSpec,
    shape: &InstanceShape,
    trials: usize,
    seed: u64,
    analytic: F,
) -> GradcheckReport
where
    F: Fn(&LossSpec, &[Vec<f64>], &[String], u64) -> Result<MinedLoss, MiningError>,
{
    let mut rng = seed::rng(seed);
    let mut done = 0;
    let mut excluded = 0;
    let mut max_err = 0.0f64;
    let attempts = trials.saturating_mul(50).max(1);
    for attempt in 0..attempts {
        if done == trials {
            break;
        }
        let (mut points, places) = random_batch(shape, &mut rng);
        let loss_seed = seed::derive_indexed(seed, "triplet", attempt as u64);
        let Ok(base) = anchor_loss(spec, &points, &places, loss_seed) else {
            excluded += 1;
            continue;
        };
        if base.hinge_args.iter().any(|a| a.abs() < KINK_MARGIN) {
            excluded += 1;
            continue;
        }
        let Ok(claimed) = analytic(spec, &points, &places, loss_seed) else {
            excluded += 1;
            continue;
        };
        let mut analytic_grad = vec![vec![0.0; shape.dim]; points.len()];
        claimed.scatter(1.0, &mut analytic_grad);

        let mut numeric = Vec::with_capacity(points.len() * shape.dim);
        let mut smooth = true;
        'outer: for i in 0..points.len() {
            for d in 0..shape.dim {
                let orig = points[i][d];
                points[i][d] = orig + FD_STEP;
                let plus = anchor_loss(spec, &points, &places, loss_seed);
                points[i][d] = orig - FD_STEP;
                let minus = anchor_loss(spec, &points, &places, loss_seed);
                points[i][d] = orig;
                match (plus, minus) {
                    (Ok(p), Ok(m)) if same_piece(&p, &base) && same_piece(&m, &base) => {
                        numeric.push((p.value() - m.value()) / (2.0 * FD_STEP));
                    }
                    _ => {
                        smooth = false;
                        break 'outer;
                    }
                }
            }
        }
        if !smooth {
            excluded += 1;
            continue;
        }
        let flat: Vec<f64> = analytic_grad.into_iter().flatten().collect();
        max_err = max_err.max(relative_error(&flat, &numeric));
        done += 1;
    }
    GradcheckReport {
        loss: spec.kind,
        level: Level::Loss,
        trials: done,
        excluded,
        max_rel_error: max_err,
        tolerance: LOSS_TOLERANCE,
        passed: done == trials && max_err <= LOSS_TOLERANCE,
    }
}

/// Small network used for the through-model check.
pub fn gradcheck_model_config(normalize: bool, seed: u64) -> MlpConfig {
    MlpConfig {
        input_dim: 6,
        hidden_dims: vec![8],
        output_dim: 4,
        final_l2_normalize: normalize,
        seed,
        ..MlpConfig::default()
    }
}

struct ModelEval {
    value: f64,
    signature: Vec<(Vec<usize>, Vec<bool>)>,
    relu_pattern: Vec<bool>,
}

fn model_objective(
    model: &Mlp,
    features: &[Vec<f64>],
    places: &[String],
    spec: &LossSpec,
    seed: u64,
) -> Result<Option<(ModelEval, Gradients, f64)>> {
    let traces = features
        .iter()
        .map(|f| model.forward_trace(f))
        .collect::<Result<Vec<_>>>()?;
    let embeddings: Vec<Embedding> = traces.iter().map(|t| t.output.clone()).collect();
    let Some(outcome) = batch_objective(&embeddings, places, spec, seed)? else {
        return Ok(None);
    };
    let mut grads = Gradients::zeros_like(model);
    for (t, g) in traces.iter().zip(&outcome.grads) {
        model.backward(t, g, &mut grads)?;
    }
    let relu_margin = traces
        .iter()
        .map(|t| t.min_relu_margin())
        .fold(f64::INFINITY, f64::min);
    let relu_pattern = traces.iter().flat_map(|t| t.relu_pattern()).collect();
    Ok(Some((
        ModelEval {
            value: outcome.value,
            signature: outcome.signature,
            relu_pattern,
        },
        grads,
        relu_margin.min(outcome.min_hinge_margin),
    )))
}

/// Through-model check: gradients of the batch objective w.r.t. every MLP
/// parameter against central differences.
pub fn gradcheck_model(
    spec: &LossSpec,
    trials: usize,
    seed: u64,
    normalize: bool,
) -> GradcheckReport {
    let shape = InstanceShape {
        places: 3,
        views: 3,
        dim: 6,
        place_separation: 1.0,
    };
    let mut rng = seed::rng(seed);
    let mut done = 0;
    let mut excluded = 0;
    let mut max_err = 0.0f64;
    let attempts = trials.saturating_mul(50).max(1);
    for attempt in 0..attempts {
        if done == trials {
            break;
        }
        let (features, places) = random_batch(&shape, &mut rng);
        let model =
            Mlp::new(gradcheck_model_config(normalize, rng.random())).expect("valid config");
        let loss_seed = seed::derive_indexed(seed, "model-batch", attempt as u64);
        let Ok(Some((base, grads, margin))) =
            model_objective(&model, &features, &places, spec, loss_seed)
        else {
            excluded += 1;
            continue;
        };
        if margin < KINK_MARGIN {
            excluded += 1;
            continue;
        }
        let analytic = grads.flatten();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut smooth = true;
        for p in 0..model.num_params() {
            let eval_at = |delta: f64| {
                let mut m = model.clone();
                *m.param_mut(p) += delta;
                model_objective(&m, &features, &places, spec, loss_seed)
                    .ok()
                    .flatten()
            };
            match (eval_at(FD_STEP), eval_at(-FD_STEP)) {
                (Some((plus, _, _)), Some((minus, _, _)))
                    if plus.signature == base.signature
                        && minus.signature == base.signature
                        && plus.relu_pattern == base.relu_pattern =>
                {
                    numeric.push((plus.value - minus.value) / (2.0 * FD_STEP));
                }
                _ => {
                    smooth = false;
                    break;
                }
            }
        }
        if !smooth {
            excluded += 1;
            continue;
        }
        max_err = max_err.max(relative_error(&analytic, &numeric));
        done += 1;
    }
    GradcheckReport {
        loss: spec.kind,
        level: Level::Model,
        trials: done,
        excluded,
        max_rel_error: max_err,
        tolerance: MODEL_TOLERANCE,
        passed: done == trials && max_err <= MODEL_TOLERANCE,
    }
}

/// Default spec used by the CLI and acceptance checks for `kind`.
pub fn default_spec(kind: LossKind, metric: Metric) -> LossSpec {
    LossSpec {
        metric,
        margins: Margins::default(),
        ..LossSpec::new(kind, 2)
    }
}
