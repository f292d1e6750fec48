//! Multi-positive contrastive losses over a log-score matrix.
//!
//! Every loss is evaluated from log-scores with per-row log-sum-exp shifts
//! and returns its gradient with respect to the log-scores; gradients with
//! respect to raw scores are derived on request. The [`closed_form`] module
//! holds the textbook score-space derivatives as an independent route.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::DenseMatrix;
use crate::similarity::{BatchLayout, Domain};

/// Positive and negative index sets for every row of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairIndexSets {
    layout: BatchLayout,
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
    /// Rows that take part in the loss.
    active: Vec<bool>,
    /// Whether the self-pair of a row is admissible as a trivial positive.
    self_pair: Vec<bool>,
}

impl PairIndexSets {
    /// Unified sets: `j ≠ i` is positive iff it is a view of the same sample;
    /// every other index except `i` is negative.
    pub fn build(layout: BatchLayout) -> Self {
        let m = layout.total();
        let mut positives = Vec::with_capacity(m);
        let mut negatives = Vec::with_capacity(m);
        for i in 0..m {
            let (pos, neg): (Vec<usize>, Vec<usize>) = (0..m)
                .filter(|&j| j != i)
                .partition(|&j| layout.sample_of(j) == layout.sample_of(i));
            positives.push(pos);
            negatives.push(neg);
        }
        Self {
            layout,
            positives,
            negatives,
            active: vec![true; m],
            self_pair: vec![true; m],
        }
    }

    /// Explicit per-row sets; every row is active and admits its self-pair.
    pub fn from_lists(layout: BatchLayout, positives: Vec<Vec<usize>>, negatives: Vec<Vec<usize>>) -> Result<Self> {
        let m = layout.total();
        if positives.len() != m || negatives.len() != m {
            return Err(Error::shape(
                "PairIndexSets::from_lists",
                m,
                positives.len().max(negatives.len()),
            ));
        }
        for i in 0..m {
            for &j in positives[i].iter().chain(&negatives[i]) {
                if j >= m {
                    return Err(Error::IndexOutOfRange { index: j, limit: m });
                }
                if j == i {
                    return Err(Error::Contract(format!("row {i} lists itself")));
                }
            }
            if positives[i].iter().any(|p| negatives[i].contains(p)) {
                return Err(Error::Contract(format!("row {i}: positive and negative sets overlap")));
            }
        }
        Ok(Self {
            layout,
            positives,
            negatives,
            active: vec![true; m],
            self_pair: vec![true; m],
        })
    }

    /// Sets for `n` samples with `image_views` + `text_views` views each.
    pub fn for_views(n: usize, image_views: usize, text_views: usize) -> Result<Self> {
        Ok(Self::build(BatchLayout::new(n, image_views, text_views)?))
    }

    /// Restriction to pairs of one domain combination, as used by separated
    /// supervision: rows without any pair of that domain become inactive.
    pub fn restricted_to(&self, domain: Domain) -> Self {
        let layout = self.layout;
        let m = layout.total();
        let keep = |i: usize, j: usize| layout.domain(i, j) == domain;
        let positives: Vec<Vec<usize>> = (0..m)
            .map(|i| self.positives[i].iter().copied().filter(|&j| keep(i, j)).collect())
            .collect();
        let negatives: Vec<Vec<usize>> = (0..m)
            .map(|i| self.negatives[i].iter().copied().filter(|&j| keep(i, j)).collect())
            .collect();
        let self_pair: Vec<bool> = (0..m).map(|i| keep(i, i)).collect();
        let active = (0..m)
            .map(|i| self.active[i] && (!positives[i].is_empty() || !negatives[i].is_empty()))
            .collect();
        Self {
            layout,
            positives,
            negatives,
            active,
            self_pair,
        }
    }

    /// Deactivates rows whose positive iteration set would be empty.
    pub fn requiring_positives(&self, include_trivial: bool) -> Self {
        let mut out = self.clone();
        for i in 0..out.rows() {
            let has_trivial = include_trivial && out.self_pair[i];
            if out.positives[i].is_empty() && !has_trivial {
                out.active[i] = false;
            }
        }
        out
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn layout(&self) -> BatchLayout {
        self.layout
    }

    pub fn rows(&self) -> usize {
        self.positives.len()
    }

    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positives[i]
    }

    pub fn negatives(&self, i: usize) -> &[usize] {
        &self.negatives[i]
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn admits_self_pair(&self, i: usize) -> bool {
        self.self_pair[i]
    }

    /// Positive iteration set of row `i`, with the self-pair appended when
    /// requested and admissible.
    pub fn iteration_set(&self, i: usize, include_trivial: bool) -> Vec<usize> {
        let mut set = self.positives[i].clone();
        if include_trivial && self.self_pair[i] {
            set.push(i);
        }
        set
    }
}

/// Per-domain balancing weights indexed by [`Domain::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainWeights(pub [f64; 3]);

impl DomainWeights {
    pub const UNIT: DomainWeights = DomainWeights([1.0; 3]);

    pub fn get(&self, domain: Domain) -> f64 {
        self.0[domain.index()]
    }
}

/// `(1/v², 1/(2vt), 1/t²)`: each domain combination then carries a weighted
/// positive mass of `N`, counting ordered pairs and including self-pairs.
pub fn domain_weights(image_views: usize, text_views: usize) -> Result<DomainWeights> {
    if image_views == 0 || text_views == 0 {
        return Err(Error::Contract("view counts must be >= 1".into()));
    }
    let v = image_views as f64;
    let t = text_views as f64;
    Ok(DomainWeights([1.0 / (v * v), 1.0 / (2.0 * v * t), 1.0 / (t * t)]))
}

/// Number of ordered positive pairs per domain, self-pairs optional.
pub fn positive_pair_counts(sets: &PairIndexSets, include_trivial: bool) -> [usize; 3] {
    let mut counts = [0; 3];
    for i in 0..sets.rows() {
        for p in sets.iteration_set(i, include_trivial) {
            counts[sets.layout.domain(i, p).index()] += 1;
        }
    }
    counts
}

/// Sum of `w_{D(i,p)}` over every iterated positive pair, per domain.
pub fn weighted_positive_mass(sets: &PairIndexSets, weights: &DomainWeights, include_trivial: bool) -> [f64; 3] {
    let counts = positive_pair_counts(sets, include_trivial);
    let mut mass = [0.0; 3];
    for d in Domain::ALL {
        mass[d.index()] = counts[d.index()] as f64 * weights.get(d);
    }
    mass
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    InfoNce,
    MilNce,
    SupCon,
    MpNce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::InfoNce => "infonce",
            LossKind::MilNce => "milnce",
            LossKind::SupCon => "supcon",
            LossKind::MpNce => "mpnce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpNceOptions {
    pub include_trivial: bool,
    pub apply_weights: bool,
}

impl Default for MpNceOptions {
    fn default() -> Self {
        Self {
            include_trivial: true,
            apply_weights: true,
        }
    }
}

/// One `(row, positive)` contribution; MIL-NCE reports one term per row
/// with no positive index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairTerm {
    pub row: usize,
    pub positive: Option<usize>,
    pub value: f64,
}

/// Mean log-scores of positive (non-self) and negative pairs per domain;
/// `NaN` where a domain has no pairs of that kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreDiagnostics {
    pub positive_mean: [f64; 3],
    pub negative_mean: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    pub row_losses: Vec<f64>,
    pub terms: Vec<PairTerm>,
    /// `∂L/∂ log s_{i,j}`.
    pub grad_log_scores: DenseMatrix,
    pub diagnostics: ScoreDiagnostics,
}

impl LossReport {
    /// `∂L/∂s_{i,j} = (∂L/∂ log s_{i,j}) · exp(−log s_{i,j})`.
    pub fn grad_scores(&self, log_scores: &DenseMatrix) -> Result<DenseMatrix> {
        self.grad_log_scores.zip_map(log_scores, |g, l| g * (-l).exp())
    }

    /// Weighted sum of reports computed on the same score matrix.
    pub fn combine(parts: &[(f64, LossReport)]) -> Result<LossReport> {
        let first = &parts
            .first()
            .ok_or_else(|| Error::Contract("combine needs at least one report".into()))?
            .1;
        let (r, c) = first.grad_log_scores.shape();
        let mut grad = DenseMatrix::zeros(r, c);
        let mut loss = 0.0;
        let mut row_losses = vec![0.0; first.row_losses.len()];
        let mut terms = Vec::new();
        for (coef, part) in parts {
            loss += coef * part.loss;
            let mut g = part.grad_log_scores.clone();
            g.scale(*coef);
            grad.add_assign(&g)?;
            for (acc, v) in row_losses.iter_mut().zip(&part.row_losses) {
                *acc += coef * v;
            }
            terms.extend(part.terms.iter().map(|t| PairTerm {
                value: coef * t.value,
                ..*t
            }));
        }
        Ok(LossReport {
            loss,
            row_losses,
            terms,
            grad_log_scores: grad,
            diagnostics: first.diagnostics,
        })
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log(e^a + e^b)`, tolerating `-∞` in either argument.
fn log_add_exp(a: f64, b: f64) -> f64 {
    let max = a.max(b);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + ((a - max).exp() + (b - max).exp()).ln()
}

fn diagnostics(log_scores: &DenseMatrix, sets: &PairIndexSets) -> ScoreDiagnostics {
    let mut pos = [(0.0, 0usize); 3];
    let mut neg = [(0.0, 0usize); 3];
    let layout = sets.layout;
    for i in (0..sets.rows()).filter(|&i| sets.active[i]) {
        for &p in &sets.positives[i] {
            let d = layout.domain(i, p).index();
            pos[d].0 += log_scores.get(i, p);
            pos[d].1 += 1;
        }
        for &n in &sets.negatives[i] {
            let d = layout.domain(i, n).index();
            neg[d].0 += log_scores.get(i, n);
            neg[d].1 += 1;
        }
    }
    let mean = |(s, c): (f64, usize)| if c == 0 { f64::NAN } else { s / c as f64 };
    ScoreDiagnostics {
        positive_mean: pos.map(mean),
        negative_mean: neg.map(mean),
    }
}

struct RowResult {
    loss: f64,
    terms: Vec<PairTerm>,
}

fn evaluate_rows(
    log_scores: &DenseMatrix,
    sets: &PairIndexSets,
    mut row_fn: impl FnMut(usize, &mut DenseMatrix) -> Result<RowResult>,
) -> Result<LossReport> {
    let m = sets.rows();
    log_scores.ensure_shape("loss log-scores", m, m)?;
    let active: Vec<usize> = (0..m).filter(|&i| sets.active[i]).collect();
    if active.is_empty() {
        return Err(Error::Contract("no active rows in pair sets".into()));
    }
    let scale = 1.0 / active.len() as f64;
    let mut grad = DenseMatrix::zeros(m, m);
    let mut row_losses = vec![0.0; m];
    let mut terms = Vec::new();
    let mut row_grad = DenseMatrix::zeros(1, m);
    let mut total = 0.0;
    for &i in &active {
        row_grad.data_mut().fill(0.0);
        let row = row_fn(i, &mut row_grad)?;
        row_losses[i] = row.loss;
        total += row.loss;
        terms.extend(row.terms);
        for (g, r) in grad.row_mut(i).iter_mut().zip(row_grad.data()) {
            *g = r * scale;
        }
    }
    let loss = total * scale;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite(format!("loss value {loss}")));
    }
    Ok(LossReport {
        loss,
        row_losses,
        terms,
        grad_log_scores: grad,
        diagnostics: diagnostics(log_scores, sets),
    })
}

fn negative_lse(log_scores: &DenseMatrix, sets: &PairIndexSets, i: usize) -> f64 {
    let row = log_scores.row(i);
    log_sum_exp(sets.negatives[i].iter().map(|&n| row[n]))
}

/// Single-positive InfoNCE: `−log(s_p / (s_p + Σ_n s_n))`.
pub fn infonce_loss(log_scores: &DenseMatrix, sets: &PairIndexSets) -> Result<LossReport> {
    evaluate_rows(log_scores, sets, |i, g| {
        let pos = &sets.positives[i];
        if pos.len() != 1 {
            return Err(Error::Contract(format!(
                "InfoNCE needs exactly one positive, row {i} has {}",
                pos.len()
            )));
        }
        let p = pos[0];
        let row = log_scores.row(i);
        let neg = negative_lse(log_scores, sets, i);
        let all = log_add_exp(row[p], neg);
        let loss = all - row[p];
        g.data_mut()[p] = (row[p] - all).exp() - 1.0;
        for &n in &sets.negatives[i] {
            g.data_mut()[n] = (row[n] - all).exp();
        }
        Ok(RowResult {
            loss,
            terms: vec![PairTerm {
                row: i,
                positive: Some(p),
                value: loss,
            }],
        })
    })
}

/// MIL-NCE: `−log(Σ_p s_p / (Σ_p s_p + Σ_n s_n))`.
pub fn milnce_loss(log_scores: &DenseMatrix, sets: &PairIndexSets) -> Result<LossReport> {
    evaluate_rows(log_scores, sets, |i, g| {
        let pos = &sets.positives[i];
        if pos.is_empty() {
            return Err(Error::Contract(format!("MIL-NCE row {i} has no positives")));
        }
        let row = log_scores.row(i);
        let pos_lse = log_sum_exp(pos.iter().map(|&p| row[p]));
        let all = log_add_exp(pos_lse, negative_lse(log_scores, sets, i));
        let loss = all - pos_lse;
        for &p in pos {
            g.data_mut()[p] = (row[p] - all).exp() - (row[p] - pos_lse).exp();
        }
        for &n in &sets.negatives[i] {
            g.data_mut()[n] = (row[n] - all).exp();
        }
        Ok(RowResult {
            loss,
            terms: vec![PairTerm {
                row: i,
                positive: None,
                value: loss,
            }],
        })
    })
}

/// SupCon: mean over positives of `−log(s_p / (Σ_p' s_p' + Σ_n s_n))`.
pub fn supcon_loss(log_scores: &DenseMatrix, sets: &PairIndexSets) -> Result<LossReport> {
    evaluate_rows(log_scores, sets, |i, g| {
        let pos = &sets.positives[i];
        if pos.is_empty() {
            return Err(Error::Contract(format!("SupCon row {i} has no positives")));
        }
        let row = log_scores.row(i);
        let pos_lse = log_sum_exp(pos.iter().map(|&p| row[p]));
        let all = log_add_exp(pos_lse, negative_lse(log_scores, sets, i));
        let k = pos.len() as f64;
        let terms: Vec<PairTerm> = pos
            .iter()
            .map(|&p| PairTerm {
                row: i,
                positive: Some(p),
                value: all - row[p],
            })
            .collect();
        let loss = terms.iter().map(|t| t.value).sum::<f64>() / k;
        for &p in pos {
            g.data_mut()[p] = (row[p] - all).exp() - 1.0 / k;
        }
        for &n in &sets.negatives[i] {
            g.data_mut()[n] = (row[n] - all).exp();
        }
        Ok(RowResult { loss, terms })
    })
}

/// MP-NCE: mean over the positive iteration set of
/// `−w_{D(i,p)} log(s_p / (s_p + Σ_n s_n))`, optionally including the
/// self-pair and the domain weights.
pub fn mpnce_loss(
    log_scores: &DenseMatrix,
    sets: &PairIndexSets,
    weights: &DomainWeights,
    options: MpNceOptions,
) -> Result<LossReport> {
    let layout = sets.layout;
    evaluate_rows(log_scores, sets, |i, g| {
        let iter = sets.iteration_set(i, options.include_trivial);
        if iter.is_empty() {
            return Err(Error::Contract(format!(
                "MP-NCE row {i} has an empty positive iteration set"
            )));
        }
        let row = log_scores.row(i);
        let neg = negative_lse(log_scores, sets, i);
        let inv_k = 1.0 / iter.len() as f64;
        let mut terms = Vec::with_capacity(iter.len());
        let mut loss = 0.0;
        for &p in &iter {
            let w = if options.apply_weights {
                weights.get(layout.domain(i, p))
            } else {
                1.0
            };
            let all = log_add_exp(row[p], neg);
            let value = w * (all - row[p]);
            loss += value;
            terms.push(PairTerm {
                row: i,
                positive: Some(p),
                value,
            });
            let c = w * inv_k;
            g.data_mut()[p] += c * ((row[p] - all).exp() - 1.0);
            for &n in &sets.negatives[i] {
                g.data_mut()[n] += c * (row[n] - all).exp();
            }
        }
        Ok(RowResult {
            loss: loss * inv_k,
            terms,
        })
    })
}

/// Loss selector covering the full family and the MP-NCE ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub mpnce: MpNceOptions,
}

impl LossSpec {
    pub fn evaluate(
        &self,
        log_scores: &DenseMatrix,
        sets: &PairIndexSets,
        weights: &DomainWeights,
    ) -> Result<LossReport> {
        match self.kind {
            LossKind::InfoNce => infonce_loss(log_scores, sets),
            LossKind::MilNce => milnce_loss(log_scores, sets),
            LossKind::SupCon => supcon_loss(log_scores, sets),
            LossKind::MpNce => mpnce_loss(log_scores, sets, weights, self.mpnce),
        }
    }

    /// Display label used in comparison tables.
    pub fn label(&self) -> String {
        match self.kind {
            LossKind::MpNce => match (self.mpnce.include_trivial, self.mpnce.apply_weights) {
                (true, true) => "mpnce".into(),
                (true, false) => "mpnce-no-weights".into(),
                (false, false) => "mpnce-no-trivial-no-weights".into(),
                (false, true) => "mpnce-no-trivial".into(),
            },
            other => other.name().into(),
        }
    }
}

/// Score-space derivatives written directly from the analytic formulas, kept
/// independent of the log-space implementation above.
pub mod closed_form {
    /// MIL-NCE: `∂L/∂s_q = −Σneg / (Σpos · (Σpos + Σneg))`, identical for every
    /// positive `q`.
    pub fn milnce_grad(positive_scores: &[f64], negative_sum: f64) -> f64 {
        let pos: f64 = positive_scores.iter().sum();
        -negative_sum / (pos * (pos + negative_sum))
    }

    /// SupCon: `∂L/∂s_q = (s_q − (Σpos + Σneg)/|P|) / (s_q (Σpos + Σneg))`.
    pub fn supcon_grad(positive_scores: &[f64], negative_sum: f64, q: usize) -> f64 {
        let total: f64 = positive_scores.iter().sum::<f64>() + negative_sum;
        let k = positive_scores.len() as f64;
        let s = positive_scores[q];
        (s - total / k) / (s * total)
    }

    /// Multi-positive InfoNCE without weights or self-pair:
    /// `∂L/∂s_q = −Σneg / (|P| s_q (s_q + Σneg))`.
    pub fn mpnce_grad(positive_scores: &[f64], negative_sum: f64, q: usize) -> f64 {
        let k = positive_scores.len() as f64;
        let s = positive_scores[q];
        -negative_sum / (k * s * (s + negative_sum))
    }

    pub fn milnce_value(positive_scores: &[f64], negative_sum: f64) -> f64 {
        let pos: f64 = positive_scores.iter().sum();
        -(pos / (pos + negative_sum)).ln()
    }
}
