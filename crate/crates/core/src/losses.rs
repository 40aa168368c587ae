//! Metric-learning losses with analytic gradients.
//!
//! Every loss here is a sum of hinge terms of the form
//!
//! ```text
//! h( d(pull.0, pull.1) − push + margin ),   push = d(push.0, push.1) or a constant
//! ```
//!
//! evaluated by one engine ([`eval_terms`]). The individual losses only differ
//! in how they assemble terms, which is what makes `quit_trihard(k = 1)` and
//! `trihard` (or `quit_quad(k = 1)` and `quadruplet`) agree bit for bit.
//!
//! A hinge at exactly zero counts as inactive and contributes no gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{add_distance_grad, check_same_dim, raw_distance, Embedding, Metric};
use crate::error::{Error, Result};
use crate::mining::{build_tuples, MiningBatch, MiningError, PositivePolicy, Strategy, Tuple};
use crate::seed;

pub fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// `alpha` is the relative-distance margin, `beta` the absolute one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Margins {
            alpha: 0.3,
            beta: 0.2,
        }
    }
}

impl Margins {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let m = Margins { alpha, beta };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite()
            && self.beta.is_finite()
            && self.alpha >= 0.0
            && self.beta >= 0.0)
        {
            return Err(Error::invalid(format!(
                "margins must be finite and nonnegative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Position of an input within a tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Anchor,
    Positive(usize),
    Negative(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grads: BTreeMap<Role, Vec<f64>>,
    pub active_terms: usize,
}

impl LossResult {
    pub fn grad(&self, role: Role) -> Option<&[f64]> {
        self.grads.get(&role).map(Vec::as_slice)
    }
}

/// Anchor, its `k` positives (nearest first) and role-tagged negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct QuintupletTuple {
    pub anchor: Embedding,
    pub positives: Vec<Embedding>,
    pub negatives: Vec<Embedding>,
}

impl QuintupletTuple {
    pub fn k(&self) -> usize {
        self.positives.len()
    }
}

#[derive(Clone, Copy, Debug)]
enum Push {
    Pair(usize, usize),
    Const(f64),
}

#[derive(Clone, Copy, Debug)]
struct Term {
    margin: f64,
    pull: (usize, usize),
    push: Push,
}

/// Evaluates `terms` over the points of `roles`. Returns the value, one
/// gradient per role and the number of active hinges, plus the raw hinge
/// arguments for callers that need kink distances.
fn eval_terms(roles: &[(Role, &[f64])], terms: &[Term], metric: Metric) -> (LossResult, Vec<f64>) {
    let dim = roles[0].1.len();
    let mut grads = vec![vec![0.0; dim]; roles.len()];
    let mut value = 0.0;
    let mut active = 0;
    let mut args = Vec::with_capacity(terms.len());
    for t in terms {
        let (pa, pb) = (roles[t.pull.0].1, roles[t.pull.1].1);
        let push = match t.push {
            Push::Pair(i, j) => raw_distance(roles[i].1, roles[j].1, metric),
            Push::Const(c) => c,
        };
        let arg = raw_distance(pa, pb, metric) - push + t.margin;
        args.push(arg);
        value += hinge(arg);
        if arg > 0.0 {
            active += 1;
            add_distance_grad(pa, pb, metric, 1.0, &mut grads[t.pull.0]);
            add_distance_grad(pb, pa, metric, 1.0, &mut grads[t.pull.1]);
            if let Push::Pair(i, j) = t.push {
                let (na, nb) = (roles[i].1, roles[j].1);
                add_distance_grad(na, nb, metric, -1.0, &mut grads[i]);
                add_distance_grad(nb, na, metric, -1.0, &mut grads[j]);
            }
        }
    }
    let grads = roles.iter().map(|r| r.0).zip(grads).collect();
    (
        LossResult {
            value,
            grads,
            active_terms: active,
        },
        args,
    )
}

fn tuple_roles<'a>(
    anchor: &'a Embedding,
    positives: &[&'a Embedding],
    negatives: &[&'a Embedding],
) -> Result<Vec<(Role, &'a [f64])>> {
    check_same_dim(
        std::iter::once(anchor)
            .chain(positives.iter().copied())
            .chain(negatives.iter().copied()),
    )?;
    let mut roles = vec![(Role::Anchor, anchor.as_slice())];
    roles.extend(
        positives
            .iter()
            .enumerate()
            .map(|(i, p)| (Role::Positive(i), p.as_slice())),
    );
    roles.extend(
        negatives
            .iter()
            .enumerate()
            .map(|(i, n)| (Role::Negative(i), n.as_slice())),
    );
    Ok(roles)
}

/// Terms for `k` positives against a hardest-negative push (role layout:
/// anchor, positives, negatives).
fn quit_trihard_terms(k: usize, alpha: f64) -> Vec<Term> {
    let n = 1 + k;
    (0..k)
        .map(|i| Term {
            margin: alpha,
            pull: (0, 1 + i),
            push: Push::Pair(0, n),
        })
        .collect()
}

fn quit_quad_terms(k: usize, m: &Margins) -> Vec<Term> {
    let (n1, n2) = (1 + k, 2 + k);
    let relative = (0..k).map(|i| Term {
        margin: m.alpha,
        pull: (0, 1 + i),
        push: Push::Pair(0, n1),
    });
    let absolute = (0..k).map(|i| Term {
        margin: m.beta,
        pull: (0, 1 + i),
        push: Push::Pair(n1, n2),
    });
    relative.chain(absolute).collect()
}

/// `h(d(a,p) − d(a,n) + α)`.
pub fn triplet_loss(
    a: &Embedding,
    p: &Embedding,
    n: &Embedding,
    m: &Margins,
    metric: Metric,
) -> Result<LossResult> {
    let roles = tuple_roles(a, &[p], &[n])?;
    Ok(eval_terms(&roles, &quit_trihard_terms(1, m.alpha), metric).0)
}

/// `h(d(a,p) − d(a,n1) + α) + h(d(a,p) − d(n1,n2) + β)`.
pub fn quadruplet_loss(
    a: &Embedding,
    p: &Embedding,
    n1: &Embedding,
    n2: &Embedding,
    m: &Margins,
    metric: Metric,
) -> Result<LossResult> {
    let roles = tuple_roles(a, &[p], &[n1, n2])?;
    Ok(eval_terms(&roles, &quit_quad_terms(1, m), metric).0)
}

/// Generic quintuplet loss `Σᵢ h(d(a, pᵢ) − neg_distance + α)` with the
/// negative term supplied as a number. Only the anchor and positives receive
/// gradients.
pub fn quit_loss(
    t: &QuintupletTuple,
    neg_distance: f64,
    m: &Margins,
    metric: Metric,
) -> Result<LossResult> {
    if t.positives.is_empty() {
        return Err(Error::invalid("quit_loss needs k >= 1 positives"));
    }
    if !neg_distance.is_finite() {
        return Err(Error::NonFinite("negative distance"));
    }
    let positives: Vec<_> = t.positives.iter().collect();
    let roles = tuple_roles(&t.anchor, &positives, &[])?;
    let terms: Vec<_> = (0..t.k())
        .map(|i| Term {
            margin: m.alpha,
            pull: (0, 1 + i),
            push: Push::Const(neg_distance),
        })
        .collect();
    Ok(eval_terms(&roles, &terms, metric).0)
}

/// Tuple-level form of the trihard fusion: anchor, `k` positives and one
/// negative (the hardest, when mined).
pub fn quit_trihard_tuple(t: &QuintupletTuple, m: &Margins, metric: Metric) -> Result<LossResult> {
    let (pos, neg) = tuple_refs(t, 1)?;
    let roles = tuple_roles(&t.anchor, &pos, &neg)?;
    Ok(eval_terms(&roles, &quit_trihard_terms(t.k(), m.alpha), metric).0)
}

/// Tuple-level form of the quadruplet fusion: anchor, `k` positives, `n1`, `n2`.
pub fn quit_quad_tuple(t: &QuintupletTuple, m: &Margins, metric: Metric) -> Result<LossResult> {
    let (pos, neg) = tuple_refs(t, 2)?;
    let roles = tuple_roles(&t.anchor, &pos, &neg)?;
    Ok(eval_terms(&roles, &quit_quad_terms(t.k(), m), metric).0)
}

fn tuple_refs(t: &QuintupletTuple, negatives: usize) -> Result<(Vec<&Embedding>, Vec<&Embedding>)> {
    if t.positives.is_empty() {
        return Err(Error::invalid("tuple needs k >= 1 positives"));
    }
    if t.negatives.len() != negatives {
        return Err(Error::invalid(format!(
            "tuple needs exactly {negatives} negatives, got {}",
            t.negatives.len()
        )));
    }
    Ok((t.positives.iter().collect(), t.negatives.iter().collect()))
}

/// A loss evaluated on a mined tuple, with the batch index behind every role.
#[derive(Clone, Debug, PartialEq)]
pub struct MinedLoss {
    pub result: LossResult,
    pub members: BTreeMap<Role, usize>,
    /// Hinge arguments of every term, active or not.
    pub hinge_args: Vec<f64>,
}

impl MinedLoss {
    pub fn value(&self) -> f64 {
        self.result.value
    }

    /// Adds `weight ×` each role's gradient to the gradient of the batch
    /// member it came from.
    pub fn scatter(&self, weight: f64, out: &mut [Vec<f64>]) {
        for (role, &idx) in &self.members {
            let g = &self.result.grads[role];
            for (o, v) in out[idx].iter_mut().zip(g) {
                *o += weight * v;
            }
        }
    }
}

/// Evaluates the loss on a tuple already mined from `batch`.
pub fn loss_on_tuple(
    batch: &MiningBatch<'_>,
    tuple: &Tuple,
    m: &Margins,
    metric: Metric,
    quad: bool,
) -> MinedLoss {
    let emb = batch.embeddings();
    let (members, terms): (Vec<(Role, usize)>, Vec<Term>) = match tuple {
        Tuple::PerAnchor {
            anchor,
            positives,
            negatives,
            ..
        } => {
            let mut members = vec![(Role::Anchor, *anchor)];
            members.extend(
                positives
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (Role::Positive(i), p)),
            );
            members.extend(
                negatives
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| (Role::Negative(i), n)),
            );
            let terms = if quad {
                quit_quad_terms(positives.len(), m)
            } else {
                quit_trihard_terms(positives.len(), m.alpha)
            };
            (members, terms)
        }
        Tuple::Batch(pairs) => {
            let members = vec![
                (Role::Anchor, pairs.positive.0),
                (Role::Positive(0), pairs.positive.1),
                (Role::Negative(0), pairs.negative.0),
                (Role::Negative(1), pairs.negative.1),
            ];
            let terms = vec![Term {
                margin: m.alpha,
                pull: (0, 1),
                push: Push::Pair(2, 3),
            }];
            (members, terms)
        }
    };
    let roles: Vec<_> = members
        .iter()
        .map(|&(r, i)| (r, emb[i].as_slice()))
        .collect();
    let (result, hinge_args) = eval_terms(&roles, &terms, metric);
    MinedLoss {
        result,
        members: members.into_iter().collect(),
        hinge_args,
    }
}

/// Nearest positive against the hardest negative.
pub fn trihard_loss(
    batch: &MiningBatch<'_>,
    m: &Margins,
    metric: Metric,
) -> Result<MinedLoss, MiningError> {
    quit_trihard_loss(batch, 1, m, metric, PositivePolicy::Clamp)
}

/// `h(max d(positive pair) − min d(negative pair) + α)` over the whole batch.
/// The anchor index is ignored.
pub fn msml_loss(
    batch: &MiningBatch<'_>,
    m: &Margins,
    metric: Metric,
) -> Result<MinedLoss, MiningError> {
    let t = build_tuples(batch, 1, Strategy::Msml, PositivePolicy::Clamp, 0, metric)?;
    Ok(loss_on_tuple(batch, &t, m, metric, false))
}

/// `Σᵢ h(d(a, pᵢ) − d(a, n_hard) + α)` over the `k` nearest positives.
pub fn quit_trihard_loss(
    batch: &MiningBatch<'_>,
    k: usize,
    m: &Margins,
    metric: Metric,
    policy: PositivePolicy,
) -> Result<MinedLoss, MiningError> {
    let t = build_tuples(batch, k, Strategy::Trihard, policy, 0, metric)?;
    Ok(loss_on_tuple(batch, &t, m, metric, false))
}

/// `Σᵢ h(d(a,pᵢ) − d(a,n1) + α) + Σᵢ h(d(a,pᵢ) − d(n1,n2) + β)`.
pub fn quit_quad_loss(
    batch: &MiningBatch<'_>,
    k: usize,
    m: &Margins,
    metric: Metric,
    policy: PositivePolicy,
) -> Result<MinedLoss, MiningError> {
    let t = build_tuples(batch, k, Strategy::Quad, policy, 0, metric)?;
    Ok(loss_on_tuple(batch, &t, m, metric, true))
}

/// Nearest positive against a negative drawn uniformly under `seed`.
pub fn triplet_batch_loss(
    batch: &MiningBatch<'_>,
    m: &Margins,
    metric: Metric,
    seed: u64,
) -> Result<MinedLoss, MiningError> {
    let t = build_tuples(
        batch,
        1,
        Strategy::Triplet,
        PositivePolicy::Clamp,
        seed,
        metric,
    )?;
    Ok(loss_on_tuple(batch, &t, m, metric, false))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    Quad,
    Trihard,
    Msml,
    QuitTrihard,
    QuitQuad,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Triplet,
        LossKind::Quad,
        LossKind::Trihard,
        LossKind::Msml,
        LossKind::QuitTrihard,
        LossKind::QuitQuad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Quad => "quad",
            LossKind::Trihard => "trihard",
            LossKind::Msml => "msml",
            LossKind::QuitTrihard => "quit_trihard",
            LossKind::QuitQuad => "quit_quad",
        }
    }

    /// Whether `k` affects this loss.
    pub fn uses_k(self) -> bool {
        matches!(self, LossKind::QuitTrihard | LossKind::QuitQuad)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = LossKind::ALL.iter().map(|l| l.name()).collect();
                Error::invalid(format!(
                    "unknown loss {s:?}; valid losses: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Everything needed to evaluate a loss on a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub k: usize,
    pub margins: Margins,
    pub metric: Metric,
    pub positive_policy: PositivePolicy,
}

impl LossSpec {
    pub fn new(kind: LossKind, k: usize) -> Self {
        LossSpec {
            kind,
            k,
            margins: Margins::default(),
            metric: Metric::SquaredL2,
            positive_policy: PositivePolicy::Clamp,
        }
    }

    /// `k` actually used by the loss: 1 for the single-positive losses.
    pub fn effective_k(&self) -> usize {
        if self.kind.uses_k() {
            self.k
        } else {
            1
        }
    }

    /// Loss for the batch's current anchor. `seed` only matters for
    /// [`LossKind::Triplet`].
    pub fn anchor_loss(
        &self,
        batch: &MiningBatch<'_>,
        seed: u64,
    ) -> Result<MinedLoss, MiningError> {
        let (m, metric, policy) = (&self.margins, self.metric, self.positive_policy);
        match self.kind {
            LossKind::Triplet => triplet_batch_loss(batch, m, metric, seed),
            LossKind::Quad => quit_quad_loss(batch, 1, m, metric, policy),
            LossKind::Trihard => trihard_loss(batch, m, metric),
            LossKind::Msml => msml_loss(batch, m, metric),
            LossKind::QuitTrihard => quit_trihard_loss(batch, self.k, m, metric, policy),
            LossKind::QuitQuad => quit_quad_loss(batch, self.k, m, metric, policy),
        }
    }
}

/// Loss and per-sample gradients for a whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    pub value: f64,
    /// One gradient per batch member.
    pub grads: Vec<Vec<f64>>,
    /// Anchors (or, for MSML, batches) that produced a tuple.
    pub contributing: usize,
    /// Anchors skipped because mining found no valid tuple.
    pub skipped: usize,
    /// Smallest |hinge argument| over every evaluated term.
    pub min_hinge_margin: f64,
    /// Mined batch indices per contributing tuple, in role order, followed by
    /// which hinge terms were active. Two evaluations with equal signatures
    /// lie on the same smooth piece of the objective.
    pub signature: Vec<(Vec<usize>, Vec<bool>)>,
}

/// Batch objective: the mean of per-anchor losses over every anchor that
/// yields a tuple (MSML is a single batch-level term). Anchors are visited in
/// index order so the reduction is deterministic. Returns `None` when no
/// anchor yields a tuple.
pub fn batch_objective(
    embeddings: &[Embedding],
    place_ids: &[String],
    spec: &LossSpec,
    seed: u64,
) -> Result<Option<BatchOutcome>> {
    let dim = check_same_dim(embeddings)?;
    let base = MiningBatch::new(embeddings, place_ids, 0)?;
    let mined: Vec<MinedLoss> = if spec.kind == LossKind::Msml {
        spec.anchor_loss(&base, seed).ok().into_iter().collect()
    } else {
        (0..embeddings.len())
            .filter_map(|a| {
                spec.anchor_loss(
                    &base.with_anchor(a),
                    seed::derive_indexed(seed, "anchor", a as u64),
                )
                .ok()
            })
            .collect()
    };
    let skipped = if spec.kind == LossKind::Msml {
        1 - mined.len()
    } else {
        embeddings.len() - mined.len()
    };
    if mined.is_empty() {
        return Ok(None);
    }
    let weight = 1.0 / mined.len() as f64;
    let mut grads = vec![vec![0.0; dim]; embeddings.len()];
    let mut total = 0.0;
    let mut min_margin = f64::INFINITY;
    let mut signature = Vec::with_capacity(mined.len());
    for m in &mined {
        total += m.value();
        m.scatter(weight, &mut grads);
        for a in &m.hinge_args {
            min_margin = min_margin.min(a.abs());
        }
        signature.push((
            m.members.values().copied().collect(),
            m.hinge_args.iter().map(|&a| a > 0.0).collect(),
        ));
    }
    Ok(Some(BatchOutcome {
        value: total * weight,
        grads,
        contributing: mined.len(),
        skipped,
        min_hinge_margin: min_margin,
        signature,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1(x: f64) -> Embedding {
        Embedding::new(vec![x]).unwrap()
    }

    fn m() -> Margins {
        Margins::default()
    }

    const SQ: Metric = Metric::SquaredL2;

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(0.5), 0.5);
        assert_eq!(hinge(-1.7), 0.0);
        assert_eq!(hinge(0.0), 0.0);
    }

    #[test]
    fn triplet_examples() {
        let r = triplet_loss(&e1(0.0), &e1(1.0), &e1(3.0), &m(), SQ).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.active_terms, 0);
        assert!(r.grads.values().all(|g| g.iter().all(|&v| v == 0.0)));

        let r = triplet_loss(&e1(0.0), &e1(1.0), &e1(1.1), &m(), SQ).unwrap();
        assert!((r.value - 0.09).abs() < 1e-12);
        // ∂/∂a = 2(a−p) − 2(a−n) = −2 + 2.2
        assert!((r.grad(Role::Anchor).unwrap()[0] - 0.2).abs() < 1e-12);
        assert_eq!(r.grad(Role::Positive(0)).unwrap()[0], 2.0);
        assert!((r.grad(Role::Negative(0)).unwrap()[0] + 2.2).abs() < 1e-12);

        let r = triplet_loss(&e1(0.5), &e1(0.5), &e1(0.5), &m(), SQ).unwrap();
        assert_eq!(r.value, 0.3);
        assert_eq!(r.grad(Role::Anchor).unwrap(), &[0.0]);
    }

    #[test]
    fn quadruplet_examples() {
        let z = e1(1.0);
        let r = quadruplet_loss(&z, &z, &z, &z, &m(), SQ).unwrap();
        assert!((r.value - 0.5).abs() < 1e-12);

        let r = quadruplet_loss(&e1(0.0), &e1(1.0), &e1(3.0), &e1(0.0), &m(), SQ).unwrap();
        assert_eq!(r.value, 0.0);

        let r = quadruplet_loss(&e1(0.0), &e1(2.0), &e1(1.0), &e1(1.5), &m(), SQ).unwrap();
        assert!((r.value - 7.25).abs() < 1e-12);
        assert_eq!(r.active_terms, 2);
    }

    #[test]
    fn quit_examples() {
        let t = QuintupletTuple {
            anchor: e1(0.0),
            positives: vec![e1(0.5), e1(1.0)],
            negatives: vec![],
        };
        let r = quit_loss(&t, 1.44, &m(), SQ).unwrap();
        assert_eq!(r.value, 0.0);

        let t = QuintupletTuple {
            anchor: e1(0.0),
            positives: vec![e1(1.0), e1(1.1)],
            negatives: vec![],
        };
        let r = quit_loss(&t, 1.0, &m(), SQ).unwrap();
        assert!((r.value - 0.81).abs() < 1e-12);
        assert_eq!(r.active_terms, 2);
        assert_eq!(
            r.grads.keys().copied().collect::<Vec<_>>(),
            vec![Role::Anchor, Role::Positive(0), Role::Positive(1)]
        );

        let empty = QuintupletTuple {
            anchor: e1(0.0),
            positives: vec![],
            negatives: vec![],
        };
        assert!(quit_loss(&empty, 1.0, &m(), SQ).is_err());
    }

    #[test]
    fn quit_k1_equals_triplet() {
        let (a, p, n) = (e1(0.2), e1(0.9), e1(1.0));
        let trip = triplet_loss(&a, &p, &n, &m(), SQ).unwrap();
        let t = QuintupletTuple {
            anchor: a.clone(),
            positives: vec![p],
            negatives: vec![],
        };
        let q = quit_loss(
            &t,
            crate::embedding::distance(&a, &n, SQ).unwrap(),
            &m(),
            SQ,
        )
        .unwrap();
        assert_eq!(trip.value.to_bits(), q.value.to_bits());
    }

    fn batch_1d(xs: &[f64], places: &[&str]) -> (Vec<Embedding>, Vec<String>) {
        (
            xs.iter().map(|&x| e1(x)).collect(),
            places.iter().map(|s| s.to_string()).collect(),
        )
    }

    #[test]
    fn trihard_examples() {
        let (e, p) = batch_1d(&[0.0, 1.0, 2.0, 5.0], &["A", "A", "B", "B"]);
        let b = MiningBatch::new(&e, &p, 0).unwrap();
        let r = trihard_loss(&b, &m(), SQ).unwrap();
        assert_eq!(r.members[&Role::Negative(0)], 2);
        assert_eq!(r.value(), 0.0);

        let (e, p) = batch_1d(&[0.0, 1.0, 1.2, 9.0], &["A", "A", "B", "B"]);
        let b = MiningBatch::new(&e, &p, 0).unwrap();
        let r = trihard_loss(&b, &m(), SQ).unwrap();
        assert_eq!(r.members[&Role::Negative(0)], 2);
        assert_eq!(r.value(), 0.0);

        let (e, p) = batch_1d(&[0.0, 0.0, 0.6, -0.8], &["A", "A", "B", "C"]);
        let b = MiningBatch::new(&e, &p, 0).unwrap();
        assert_eq!(trihard_loss(&b, &m(), SQ).unwrap().value(), 0.0);
    }

    #[test]
    fn trihard_surfaces_mining_errors() {
        let (e, p) = batch_1d(&[0.0, 1.0], &["A", "A"]);
        let b = MiningBatch::new(&e, &p, 0).unwrap();
        assert_eq!(trihard_loss(&b, &m(), SQ), Err(MiningError::NoNegative));
    }

    #[test]
    fn msml_examples() {
        // positive pairs: (0,1) d=4, (2,3) d=0.25; nearest negative pair (1,2) d=1
        let (e, p) = batch_1d(&[0.0, 2.0, 3.0, 3.5], &["A", "A", "B", "B"]);
        let b = MiningBatch::new(&e, &p, 0).unwrap();
        let r = msml_loss(&b, &m(), SQ).unwrap();
        assert!((r.value() - 3.3).abs() < 1e-12);

        let (e, p) = batch_1d(&[0.0, 0.1, 5.0, 5.1], &["A", "A", "B", "B"]);
        let b = MiningBatch::new(&e, &p, 0).unwrap();
        assert_eq!(msml_loss(&b, &m(), SQ).unwrap().value(), 0.0);

        let (e, p) = batch_1d(&[0.0, 1.0], &["A", "B"]);
        let b = MiningBatch::new(&e, &p, 0).unwrap();
        assert_eq!(msml_loss(&b, &m(), SQ), Err(MiningError::NoPositivePair));
    }

    #[test]
    fn quit_trihard_example_and_errors() {
        let (e, p) = batch_1d(&[0.0, 0.5, 1.0, 1.2, 3.0], &["A", "A", "A", "B", "B"]);
        let b = MiningBatch::new(&e, &p, 0).unwrap();
        let r = quit_trihard_loss(&b, 2, &m(), SQ, PositivePolicy::Clamp).unwrap();
        assert_eq!(r.members[&Role::Negative(0)], 3);
        assert_eq!(r.value(), 0.0);
        assert_eq!(r.hinge_args.len(), 2);

        assert_eq!(
            quit_trihard_loss(&b, 5, &m(), SQ, PositivePolicy::Strict),
            Err(MiningError::FewerPositivesThanK { k: 5, available: 2 })
        );
        let clamped = quit_trihard_loss(&b, 5, &m(), SQ, PositivePolicy::Clamp).unwrap();
        assert_eq!(clamped.hinge_args.len(), 2);
    }

    #[test]
    fn quit_quad_examples() {
        let (e, p) = batch_1d(&[1.0; 5], &["A", "A", "A", "B", "C"]);
        let b = MiningBatch::new(&e, &p, 0).unwrap();
        let r = quit_quad_loss(&b, 2, &m(), SQ, PositivePolicy::Clamp).unwrap();
        assert!((r.value() - 1.0).abs() < 1e-12);

        let (e, p) = batch_1d(&[0.0, 0.5, 1.0, 1.2], &["A", "A", "A", "B"]);
        let b = MiningBatch::new(&e, &p, 0).unwrap();
        assert!(matches!(
            quit_quad_loss(&b, 2, &m(), SQ, PositivePolicy::Clamp),
            Err(MiningError::NotEnoughNegatives { .. })
        ));
    }

    #[test]
    fn l2_metric_gradients_are_unit_directions() {
        let a = Embedding::new(vec![0.0, 0.0]).unwrap();
        let p = Embedding::new(vec![3.0, 4.0]).unwrap();
        let n = Embedding::new(vec![0.0, 1.0]).unwrap();
        let r = triplet_loss(&a, &p, &n, &m(), Metric::L2).unwrap();
        assert!((r.value - (5.0 - 1.0 + 0.3)).abs() < 1e-12);
        let gp = r.grad(Role::Positive(0)).unwrap();
        assert!((gp[0] - 0.6).abs() < 1e-12 && (gp[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn loss_kind_parsing_lists_valid_names() {
        assert_eq!(
            "quit_trihard".parse::<LossKind>().unwrap(),
            LossKind::QuitTrihard
        );
        let err = "softmax".parse::<LossKind>().unwrap_err().to_string();
        for k in LossKind::ALL {
            assert!(err.contains(k.name()));
        }
    }

    #[test]
    fn margins_validate() {
        assert!(Margins::new(-0.1, 0.2).is_err());
        assert!(Margins::new(0.3, f64::NAN).is_err());
        assert!(Margins::new(0.0, 0.0).is_ok());
    }

    #[test]
    fn batch_objective_averages_over_anchors() {
        let (e, p) = batch_1d(&[0.0, 0.5, 0.6, 0.7], &["A", "A", "B", "B"]);
        let spec = LossSpec::new(LossKind::Trihard, 1);
        let out = batch_objective(&e, &p, &spec, 0).unwrap().unwrap();
        let mut sum = 0.0;
        for a in 0..4 {
            let b = MiningBatch::new(&e, &p, a).unwrap();
            sum += trihard_loss(&b, &spec.margins, SQ).unwrap().value();
        }
        assert!((out.value - sum / 4.0).abs() < 1e-15);
        assert_eq!(out.contributing, 4);

        let (e, p) = batch_1d(&[0.0, 1.0], &["A", "A"]);
        assert!(batch_objective(&e, &p, &spec, 0).unwrap().is_none());
    }
}
