//! Focal loss and the penalty-rebalanced variant used during fine-tuning.
//!
//! For a positive class slot with score `p` and reference level `p*`:
//!
//! ```text
//! p_t = p / (1 + p* - p)^beta        (y = 1)
//! p_t = 1 - p                        (y = 0)
//! L   = max(0, -alpha_t (1 - p_t)^gamma log p_t)
//! ```
//!
//! With `beta = 0` this is the focal loss; with `gamma = 0, alpha = 1` and a
//! positive label it is cross-entropy. Negative slots never see `beta`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the reference score `p*` is chosen for a positive slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PStarMode {
    Fixed(f64),
    /// `p* = max_i p_i` over the anchor's class scores.
    Dynamic,
}

impl fmt::Display for PStarMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PStarMode::Fixed(v) => write!(f, "fixed({v})"),
            PStarMode::Dynamic => f.write_str("dynamic"),
        }
    }
}

/// Hyper-parameters of the loss surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlatLossConfig", into = "FlatLossConfig")]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_mix: f64,
    pub p_star_mode: PStarMode,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 5.0,
            gamma: 2.0,
            lambda_mix: 0.1,
            p_star_mode: PStarMode::Dynamic,
            epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("loss config: {what}")));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be >= 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return bad("lambda must be in [0, 1]");
        }
        if let PStarMode::Fixed(v) = self.p_star_mode {
            if !(v > 0.0 && v <= 1.0) {
                return bad("fixed p* must be in (0, 1]");
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return bad("epsilon must be in (0, 1e-3]");
        }
        Ok(())
    }

    /// Same configuration with the penalty switched off.
    pub fn focal(&self) -> Self {
        Self { beta: 0.0, ..*self }
    }

    fn alpha_t(&self, positive: bool) -> f64 {
        if positive {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }

    fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.epsilon, 1.0 - self.epsilon)
    }
}

/// On-disk form: flat keys `alpha,beta,gamma,lambda,p_star_mode,p_star_value,epsilon`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub p_star_mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_star_value: Option<f64>,
    pub epsilon: f64,
}

impl TryFrom<FlatLossConfig> for LossConfig {
    type Error = Error;

    fn try_from(flat: FlatLossConfig) -> Result<Self> {
        let p_star_mode = match (flat.p_star_mode.as_str(), flat.p_star_value) {
            ("dynamic", _) => PStarMode::Dynamic,
            ("fixed", Some(v)) => PStarMode::Fixed(v),
            ("fixed", None) => {
                return Err(Error::Config("p_star_mode = fixed needs p_star_value".into()))
            }
            (other, _) => return Err(Error::Config(format!("unknown p_star_mode `{other}`"))),
        };
        let cfg = LossConfig {
            alpha: flat.alpha,
            beta: flat.beta,
            gamma: flat.gamma,
            lambda_mix: flat.lambda,
            p_star_mode,
            epsilon: flat.epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<LossConfig> for FlatLossConfig {
    fn from(cfg: LossConfig) -> Self {
        let (mode, value) = match cfg.p_star_mode {
            PStarMode::Dynamic => ("dynamic", None),
            PStarMode::Fixed(v) => ("fixed", Some(v)),
        };
        FlatLossConfig {
            alpha: cfg.alpha,
            beta: cfg.beta,
            gamma: cfg.gamma,
            lambda: cfg.lambda_mix,
            p_star_mode: mode.to_string(),
            p_star_value: value,
            epsilon: cfg.epsilon,
        }
    }
}

impl FromStr for PStarMode {
    type Err = Error;

    /// Accepts `dynamic` or a number in (0, 1].
    fn from_str(s: &str) -> Result<Self> {
        if s == "dynamic" {
            return Ok(PStarMode::Dynamic);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("p* must be `dynamic` or a number, got `{s}`")))?;
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Config(format!("fixed p* {v} not in (0, 1]")));
        }
        Ok(PStarMode::Fixed(v))
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} not in (0, 1]")))
    }
}

/// `h(p, p*) = log(1 + p* - p)`.
pub fn penalty(p: f64, p_star: f64) -> Result<f64> {
    check_unit("p", p)?;
    check_unit("p*", p_star)?;
    Ok((1.0 + p_star - p).ln())
}

/// Largest score of an anchor.
pub fn dynamic_p_star(scores: &[f64]) -> Result<f64> {
    scores
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::EmptyInput("anchor scores"))
}

/// Rebalanced probability of the true outcome.
pub fn rebalanced_pt(p: f64, p_star: f64, beta: f64, positive: bool) -> Result<f64> {
    check_unit("p", p)?;
    if !positive {
        return Ok(1.0 - p);
    }
    check_unit("p*", p_star)?;
    if beta < 0.0 {
        return Err(Error::Domain(format!("beta = {beta} is negative")));
    }
    Ok(p / (1.0 + p_star - p).powf(beta))
}

fn finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(what))
    }
}

/// Loss of one class slot. `p` is clamped to `[eps, 1 - eps]` first.
pub fn rebalanced_loss(p: f64, positive: bool, p_star: f64, cfg: &LossConfig) -> Result<f64> {
    let p = cfg.clamp(p);
    let p_t = rebalanced_pt(p, p_star, cfg.beta, positive)?;
    // p_t >= 1 only happens in the expected case, where -log p_t <= 0.
    if p_t >= 1.0 {
        return Ok(0.0);
    }
    let raw = -cfg.alpha_t(positive) * (1.0 - p_t).powf(cfg.gamma) * p_t.ln();
    Ok(finite(raw, "rebalanced loss")?.max(0.0))
}

/// Standard focal loss of one class slot.
pub fn focal_loss(p: f64, positive: bool, cfg: &LossConfig) -> Result<f64> {
    rebalanced_loss(p, positive, 1.0, &cfg.focal())
}

/// `dL/dp` of [`rebalanced_loss`] with `p*` held constant, by direct
/// differentiation. Zero where the clamp to zero (or the probability
/// clamp) is active.
pub fn loss_gradient(p: f64, p_star: f64, cfg: &LossConfig, positive: bool) -> Result<f64> {
    if p < cfg.epsilon || p > 1.0 - cfg.epsilon {
        return Ok(0.0);
    }
    let alpha_t = cfg.alpha_t(positive);
    let g = cfg.gamma;
    let grad = if positive {
        let q = 1.0 + p_star - p;
        let p_t = rebalanced_pt(p, p_star, cfg.beta, true)?;
        if p_t >= 1.0 {
            return Ok(0.0);
        }
        let dlog = 1.0 / p + cfg.beta / q;
        let mut grad = -alpha_t * (1.0 - p_t).powf(g) * dlog;
        if g != 0.0 {
            let dpt = p_t * dlog;
            grad += alpha_t * g * (1.0 - p_t).powf(g - 1.0) * dpt * p_t.ln();
        }
        grad
    } else {
        let mut grad = alpha_t * p.powf(g) / (1.0 - p);
        if g != 0.0 {
            grad -= alpha_t * g * p.powf(g - 1.0) * (1.0 - p).ln();
        }
        grad
    };
    finite(grad, "loss gradient")
}

/// The piecewise closed-form gradient as published, kept for
/// cross-checking [`loss_gradient`].
pub fn closed_form_gradient(p: f64, p_star: f64, cfg: &LossConfig, positive: bool) -> f64 {
    let alpha_t = cfg.alpha_t(positive);
    let (beta, gamma) = (cfg.beta, cfg.gamma);
    if positive {
        let q = 1.0 - p + p_star;
        let qb = q.powf(beta);
        let base = 1.0 - p / qb;
        if base <= 0.0 {
            return 0.0;
        }
        let modulated = base.powf(gamma);
        let active = alpha_t * beta * modulated * q.ln() - alpha_t * modulated * p.ln() > 0.0;
        if !active {
            return 0.0;
        }
        let num = alpha_t
            * ((beta - 1.0) * p + p_star + 1.0)
            * modulated
            * (gamma * p * p.ln() + (1.0 - beta * gamma * q.ln()) * p - qb);
        num / (p * (p - p_star - 1.0) * (p - qb))
    } else if alpha_t * p.powf(gamma) * (1.0 - p).ln() < 0.0 {
        alpha_t * p.powf(gamma) / (1.0 - p) - alpha_t * gamma * (1.0 - p).ln() * p.powf(gamma - 1.0)
    } else {
        0.0
    }
}

/// Central difference `(L(p + h) - L(p - h)) / 2h` of [`rebalanced_loss`].
pub fn finite_diff_gradient(
    p: f64,
    p_star: f64,
    cfg: &LossConfig,
    positive: bool,
    h: f64,
) -> Result<f64> {
    if h.is_nan() || h <= 0.0 || p + h == p || p - h == p {
        return Err(Error::Domain(format!("step {h} underflows at p = {p}")));
    }
    if p - h < cfg.epsilon || p + h > 1.0 - cfg.epsilon {
        return Err(Error::Domain(format!(
            "p +/- h = [{}, {}] leaves the clamp range",
            p - h,
            p + h
        )));
    }
    let up = rebalanced_loss(p + h, positive, p_star, cfg)?;
    let down = rebalanced_loss(p - h, positive, p_star, cfg)?;
    Ok((up - down) / (2.0 * h))
}

/// Sigmoid scores of one anchor together with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPrediction {
    pub scores: Vec<f64>,
    /// Index into `scores` of the ground-truth class, `None` for background.
    pub label: Option<usize>,
}

impl AnchorPrediction {
    fn reference(&self, cfg: &LossConfig) -> Result<f64> {
        match cfg.p_star_mode {
            PStarMode::Fixed(v) => Ok(v),
            PStarMode::Dynamic => dynamic_p_star(&self.scores),
        }
    }

    fn p_star(&self, cfg: &LossConfig) -> Result<f64> {
        match self.label {
            Some(_) => self.reference(cfg),
            None => Ok(1.0),
        }
    }
}

/// Sum of slot losses over all classes of one anchor, using `cfg.beta` on
/// the positive slot.
pub fn anchor_loss(pred: &AnchorPrediction, cfg: &LossConfig) -> Result<f64> {
    let p_star = pred.p_star(cfg)?;
    pred.scores
        .iter()
        .enumerate()
        .map(|(c, &p)| rebalanced_loss(p, pred.label == Some(c), p_star, cfg))
        .sum()
}

/// `dL/dp` for every class slot of one anchor (`p*` treated as a constant).
pub fn anchor_loss_grad(pred: &AnchorPrediction, cfg: &LossConfig) -> Result<Vec<f64>> {
    let p_star = pred.p_star(cfg)?;
    pred.scores
        .iter()
        .enumerate()
        .map(|(c, &p)| loss_gradient(p, p_star, cfg, pred.label == Some(c)))
        .collect()
}

/// Per-anchor weights of the mixed objective
/// `lambda * L(s) + (1 - lambda) * L(n)`.
///
/// An anchor is novel when its ground-truth slot is routed to the novel term.
/// `L(n)` is the mean rebalanced loss over novel anchors and `L(s)` the mean
/// focal loss over all other anchors, seen positives and background alike.
/// An empty group contributes zero. Returns `(weight, novel)` per anchor.
fn group_weights(preds: &[AnchorPrediction], novel_slots: &[bool], lambda: f64) -> Result<Vec<(f64, bool)>> {
    let mut novel = Vec::with_capacity(preds.len());
    for pred in preds {
        if pred.scores.len() != novel_slots.len() {
            return Err(Error::Dimension(format!(
                "anchor has {} scores but {} slots are routed",
                pred.scores.len(),
                novel_slots.len()
            )));
        }
        novel.push(pred.label.is_some_and(|k| novel_slots[k]));
    }
    let novel_count = novel.iter().filter(|&&n| n).count();
    let seen_count = preds.len() - novel_count;
    Ok(novel
        .into_iter()
        .map(|n| {
            if n {
                ((1.0 - lambda) / novel_count as f64, true)
            } else {
                (lambda / seen_count as f64, false)
            }
        })
        .collect())
}

/// The mixed fine-tuning objective over a batch of anchors. `novel_slots[c]`
/// marks class slot `c` as a novel class.
pub fn anchor_group_loss(preds: &[AnchorPrediction], novel_slots: &[bool], cfg: &LossConfig) -> Result<f64> {
    let focal = cfg.focal();
    let mut total = 0.0;
    for (pred, (w, novel)) in preds.iter().zip(group_weights(preds, novel_slots, cfg.lambda_mix)?) {
        if w == 0.0 {
            continue;
        }
        total += w * anchor_loss(pred, if novel { cfg } else { &focal })?;
    }
    finite(total, "group loss")
}

/// Gradient of [`anchor_group_loss`] with respect to every score.
pub fn anchor_group_loss_grad(
    preds: &[AnchorPrediction],
    novel_slots: &[bool],
    cfg: &LossConfig,
) -> Result<Vec<Vec<f64>>> {
    let focal = cfg.focal();
    preds
        .iter()
        .zip(group_weights(preds, novel_slots, cfg.lambda_mix)?)
        .map(|(pred, (w, novel))| {
            if w == 0.0 {
                return Ok(vec![0.0; pred.scores.len()]);
            }
            let g = anchor_loss_grad(pred, if novel { cfg } else { &focal })?;
            Ok(g.into_iter().map(|x| w * x).collect())
        })
        .collect()
}

/// Plain focal objective: slot losses summed over all anchors and divided by
/// the number of positive anchors (at least one).
pub fn focal_batch_loss(preds: &[AnchorPrediction], cfg: &LossConfig) -> Result<f64> {
    let focal = cfg.focal();
    let norm = positive_count(preds).max(1) as f64;
    let mut total = 0.0;
    for pred in preds {
        total += anchor_loss(pred, &focal)?;
    }
    finite(total / norm, "focal loss")
}

pub fn focal_batch_loss_grad(preds: &[AnchorPrediction], cfg: &LossConfig) -> Result<Vec<Vec<f64>>> {
    let focal = cfg.focal();
    let norm = positive_count(preds).max(1) as f64;
    preds
        .iter()
        .map(|pred| Ok(anchor_loss_grad(pred, &focal)?.into_iter().map(|g| g / norm).collect()))
        .collect()
}

fn positive_count(preds: &[AnchorPrediction]) -> usize {
    preds.iter().filter(|p| p.label.is_some()).count()
}

/// Reference level used when tracing a loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurveReference {
    Fixed(f64),
    /// `p* = max(p, competitor)`: the ground-truth score competes with one
    /// other class score.
    Dynamic { competitor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub p: f64,
    pub loss: f64,
    pub grad: f64,
}

/// Loss and gradient of a positive slot on a uniform grid over `[eps, 1 - eps]`.
pub fn loss_curve(cfg: &LossConfig, reference: CurveReference, samples: usize) -> Result<Vec<CurvePoint>> {
    if samples < 2 {
        return Err(Error::Config("loss curve needs at least 2 samples".into()));
    }
    let (lo, hi) = (cfg.epsilon, 1.0 - cfg.epsilon);
    (0..samples)
        .map(|i| {
            let p = lo + (hi - lo) * i as f64 / (samples - 1) as f64;
            let p_star = match reference {
                CurveReference::Fixed(v) => v,
                CurveReference::Dynamic { competitor } => p.max(competitor),
            };
            Ok(CurvePoint {
                p,
                loss: rebalanced_loss(p, true, p_star, cfg)?,
                grad: loss_gradient(p, p_star, cfg, true)?,
            })
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(mut out: W, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(out, "p,loss,grad")?;
    for pt in curve {
        writeln!(out, "{},{},{}", pt.p, pt.loss, pt.grad)?;
    }
    Ok(())
}

/// One row of a gradient-check table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckPoint {
    pub p: f64,
    pub p_star: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub positive: bool,
    pub analytic: f64,
    pub numeric: f64,
    pub closed_form: f64,
    pub rel_error: f64,
    pub passed: bool,
}

/// Grid and tolerances for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckGrid {
    pub p_values: Vec<f64>,
    pub p_stars: Vec<f64>,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub step: f64,
    pub tolerance: f64,
    /// Points this close to a kink of the loss are skipped.
    pub exclusion: f64,
}

impl Default for GradCheckGrid {
    fn default() -> Self {
        Self {
            p_values: (1..100).map(|i| i as f64 / 100.0).collect(),
            p_stars: vec![0.1, 0.3, 0.5, 0.8, 1.0],
            betas: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            gammas: vec![0.0, 2.0],
            alphas: vec![0.25, 1.0],
            step: 1e-6,
            tolerance: 1e-4,
            exclusion: 1e-3,
        }
    }
}

fn near_kink(p: f64, p_star: f64, beta: f64, positive: bool, cfg: &LossConfig, delta: f64) -> bool {
    if p - delta < cfg.epsilon || p + delta > 1.0 - cfg.epsilon {
        return true;
    }
    if !positive {
        return false;
    }
    // p_t is increasing in p, so the clamp boundary p_t = 1 is crossed
    // inside the window iff the endpoints straddle it.
    let lo = (p - delta) / (1.0 + p_star - (p - delta)).powf(beta);
    let hi = (p + delta) / (1.0 + p_star - (p + delta)).powf(beta);
    lo < 1.0 && hi >= 1.0
}

/// Compares [`loss_gradient`] against central differences over a grid.
/// `corrupt` perturbs the analytic gradient and exists to prove the check
/// can fail.
pub fn grad_check(
    grid: &GradCheckGrid,
    base: &LossConfig,
    corrupt: Option<&dyn Fn(f64) -> f64>,
) -> Result<Vec<GradCheckPoint>> {
    let mut rows = Vec::new();
    for &alpha in &grid.alphas {
        for &gamma in &grid.gammas {
            for &beta in &grid.betas {
                let cfg = LossConfig {
                    alpha,
                    beta,
                    gamma,
                    ..*base
                };
                for &p_star in &grid.p_stars {
                    for positive in [true, false] {
                        for &p in &grid.p_values {
                            if near_kink(p, p_star, beta, positive, &cfg, grid.exclusion) {
                                continue;
                            }
                            let mut analytic = loss_gradient(p, p_star, &cfg, positive)?;
                            if let Some(f) = corrupt {
                                analytic = f(analytic);
                            }
                            let numeric = finite_diff_gradient(p, p_star, &cfg, positive, grid.step)?;
                            let rel_error = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
                            rows.push(GradCheckPoint {
                                p,
                                p_star,
                                beta,
                                gamma,
                                alpha,
                                positive,
                                analytic,
                                numeric,
                                closed_form: closed_form_gradient(p, p_star, &cfg, positive),
                                rel_error,
                                passed: rel_error < grid.tolerance,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}
