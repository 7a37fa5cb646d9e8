//! First-order and quasi-Newton optimizers over flat parameter slices.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Lbfgs,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Lbfgs => "lbfgs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            "lbfgs" => Some(OptimizerKind::Lbfgs),
            _ => None,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(grad: &[f64]) -> Result<()> {
    if grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("gradient"))
    }
}

/// Plain gradient descent: `theta <- theta - lr * g`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn delta(&self, grad: &[f64]) -> Vec<f64> {
        grad.iter().map(|g| self.lr * g).collect()
    }

    pub fn step(&self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_finite(grad)?;
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// The amount the next step would subtract from the parameters, without
    /// advancing the moment estimates.
    pub fn delta(&self, grad: &[f64]) -> Vec<f64> {
        let t = self.t + 1;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                let m = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                self.lr * (m / c1) / ((v / c2).sqrt() + self.eps)
            })
            .collect()
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_finite(grad)?;
        if grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, &g) in grad.iter().enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Result of one L-BFGS iteration.
#[derive(Clone, Debug)]
pub struct LbfgsStep {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub evaluations: usize,
    pub line_search_failed: bool,
}

/// Limited-memory BFGS with a strong-Wolfe line search.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
    /// Step length tried first once curvature pairs exist.
    pub initial_step: f64,
    s_hist: VecDeque<Vec<f64>>,
    y_hist: VecDeque<Vec<f64>>,
}

impl Default for Lbfgs {
    fn default() -> Self {
        Lbfgs {
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 20,
            initial_step: 1.0,
            s_hist: VecDeque::new(),
            y_hist: VecDeque::new(),
        }
    }
}

pub(crate) struct LineSearchPoint {
    pub alpha: f64,
    pub f: f64,
    pub g: Vec<f64>,
    pub dphi: f64,
}

impl Lbfgs {
    pub fn with_initial_step(initial_step: f64) -> Self {
        Lbfgs {
            initial_step,
            ..Lbfgs::default()
        }
    }

    pub fn reset(&mut self) {
        self.s_hist.clear();
        self.y_hist.clear();
    }

    /// Stores a curvature pair unless `s·y <= 1e-10`.
    pub(crate) fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) {
        if dot(&s, &y) > 1e-10 {
            if self.s_hist.len() == self.memory {
                self.s_hist.pop_front();
                self.y_hist.pop_front();
            }
            self.s_hist.push_back(s);
            self.y_hist.push_back(y);
        }
    }

    pub fn history_len(&self) -> usize {
        self.s_hist.len()
    }

    /// Two-loop recursion: returns `-H g`.
    pub(crate) fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let k = self.s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&self.y_hist[i], &self.s_hist[i]);
            alphas[i] = rho * dot(&self.s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y_hist[i]) {
                *qj -= alphas[i] * yj;
            }
        }
        if let (Some(s), Some(y)) = (self.s_hist.back(), self.y_hist.back()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let rho = 1.0 / dot(&self.y_hist[i], &self.s_hist[i]);
            let beta = rho * dot(&self.y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s_hist[i]) {
                *qj += (alphas[i] - beta) * sj;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// Performs one iteration from `x` (where the objective is `f`, `g`),
    /// updating `x` in place.
    pub fn step<F>(&mut self, x: &mut [f64], f: f64, g: &[f64], mut objective: F) -> Result<LbfgsStep>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        check_finite(g)?;
        let gnorm = dot(g, g).sqrt();
        if gnorm == 0.0 {
            return Ok(LbfgsStep {
                loss: f,
                grad: g.to_vec(),
                evaluations: 0,
                line_search_failed: false,
            });
        }
        let mut d = self.direction(g);
        let mut dphi0 = dot(g, &d);
        if !(dphi0 < 0.0) {
            self.reset();
            d = g.iter().map(|v| -v).collect();
            dphi0 = -gnorm * gnorm;
        }
        let alpha0 = if self.s_hist.is_empty() {
            self.initial_step.min(1.0 / gnorm)
        } else {
            self.initial_step
        };

        let mut evaluations = 0;
        let accepted = self.strong_wolfe(x, &d, f, dphi0, alpha0, &mut objective, &mut evaluations)?;
        let (alpha, f_new, g_new, failed) = match accepted {
            Some(pt) => (pt.alpha, pt.f, pt.g, false),
            None => {
                self.reset();
                match steepest_descent_fallback(x, f, g, self.c1, &mut objective, &mut evaluations)? {
                    Some((alpha, f_new, g_new)) => {
                        for (xi, gi) in x.iter_mut().zip(g) {
                            *xi -= alpha * gi;
                        }
                        return Ok(LbfgsStep {
                            loss: f_new,
                            grad: g_new,
                            evaluations,
                            line_search_failed: true,
                        });
                    }
                    None => {
                        return Ok(LbfgsStep {
                            loss: f,
                            grad: g.to_vec(),
                            evaluations,
                            line_search_failed: true,
                        })
                    }
                }
            }
        };

        let s: Vec<f64> = d.iter().map(|di| alpha * di).collect();
        let y: Vec<f64> = g_new.iter().zip(g).map(|(a, b)| a - b).collect();
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        self.push_pair(s, y);
        Ok(LbfgsStep {
            loss: f_new,
            grad: g_new,
            evaluations,
            line_search_failed: failed,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn strong_wolfe<F>(
        &self,
        x: &[f64],
        d: &[f64],
        f0: f64,
        dphi0: f64,
        alpha_init: f64,
        objective: &mut F,
        evaluations: &mut usize,
    ) -> Result<Option<LineSearchPoint>>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let eval = |alpha: f64, evaluations: &mut usize| -> Result<LineSearchPoint> {
            let trial: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
            let (f, g) = objective(&trial)?;
            *evaluations += 1;
            let dphi = dot(&g, d);
            Ok(LineSearchPoint { alpha, f, g, dphi })
        };
        self.search(f0, dphi0, alpha_init, eval, evaluations)
    }

    /// Strong-Wolfe search on `φ(α)`, where `eval` returns the point at `α`
    /// with `dphi = φ'(α)`.
    pub(crate) fn search<E>(
        &self,
        f0: f64,
        dphi0: f64,
        alpha_init: f64,
        mut eval: E,
        evaluations: &mut usize,
    ) -> Result<Option<LineSearchPoint>>
    where
        E: FnMut(f64, &mut usize) -> Result<LineSearchPoint>,
    {
        let mut prev = LineSearchPoint {
            alpha: 0.0,
            f: f0,
            g: Vec::new(),
            dphi: dphi0,
        };
        let mut alpha = alpha_init;
        let mut first = true;
        while *evaluations < self.max_line_search {
            let cur = eval(alpha, evaluations)?;
            if !cur.f.is_finite() || cur.g.iter().any(|v| !v.is_finite()) {
                alpha = 0.5 * (prev.alpha + alpha);
                continue;
            }
            if cur.f > f0 + self.c1 * alpha * dphi0 || (!first && cur.f >= prev.f) {
                return self.zoom(prev, cur, f0, dphi0, &mut eval, evaluations);
            }
            if cur.dphi.abs() <= -self.c2 * dphi0 {
                return Ok(Some(cur));
            }
            if cur.dphi >= 0.0 {
                return self.zoom(cur, prev, f0, dphi0, &mut eval, evaluations);
            }
            let next = cubic_min(prev.alpha, prev.f, prev.dphi, cur.alpha, cur.f, cur.dphi)
                .unwrap_or(2.0 * alpha)
                .clamp(alpha * 1.1, alpha * 10.0);
            prev = cur;
            alpha = next;
            first = false;
        }
        Ok(None)
    }

    fn zoom<E>(
        &self,
        mut lo: LineSearchPoint,
        mut hi: LineSearchPoint,
        f0: f64,
        dphi0: f64,
        eval: &mut E,
        evaluations: &mut usize,
    ) -> Result<Option<LineSearchPoint>>
    where
        E: FnMut(f64, &mut usize) -> Result<LineSearchPoint>,
    {
        while *evaluations < self.max_line_search {
            let (a, b) = if lo.alpha < hi.alpha {
                (lo.alpha, hi.alpha)
            } else {
                (hi.alpha, lo.alpha)
            };
            let width = b - a;
            if width <= f64::EPSILON * b.max(1.0) {
                break;
            }
            let guess = cubic_min(lo.alpha, lo.f, lo.dphi, hi.alpha, hi.f, hi.dphi)
                .unwrap_or(0.5 * (a + b));
            let alpha = guess.clamp(a + 0.1 * width, b - 0.1 * width);
            let cur = eval(alpha, evaluations)?;
            if !cur.f.is_finite() || cur.f > f0 + self.c1 * alpha * dphi0 || cur.f >= lo.f {
                hi = cur;
            } else {
                if cur.dphi.abs() <= -self.c2 * dphi0 {
                    return Ok(Some(cur));
                }
                if cur.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = std::mem::replace(&mut lo, cur);
                } else {
                    lo = cur;
                }
            }
        }
        Ok(None)
    }
}

/// Minimiser of the cubic interpolating two points and slopes, if it exists.
fn cubic_min(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64) -> Option<f64> {
    if x1 == x2 {
        return None;
    }
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let disc = d1 * d1 - g1 * g2;
    if disc < 0.0 {
        return None;
    }
    let d2 = (x2 - x1).signum() * disc.sqrt();
    let denom = g2 - g1 + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let m = x2 - (x2 - x1) * (g2 + d2 - d1) / denom;
    m.is_finite().then_some(m)
}

/// Backtracking Armijo search along the negative gradient. Returns the
/// accepted step length together with the new loss and gradient.
fn steepest_descent_fallback<F>(
    x: &[f64],
    f0: f64,
    g: &[f64],
    c1: f64,
    objective: &mut F,
    evaluations: &mut usize,
) -> Result<Option<(f64, f64, Vec<f64>)>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let gg = dot(g, g);
    let mut alpha = (1.0 / gg.sqrt()).min(1.0);
    for _ in 0..30 {
        let trial: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi - alpha * gi).collect();
        let (f, g_new) = objective(&trial)?;
        *evaluations += 1;
        if f.is_finite() && f <= f0 - c1 * alpha * gg {
            return Ok(Some((alpha, f, g_new)));
        }
        alpha *= 0.5;
    }
    Ok(None)
}

/// Optimizer together with its running state.
#[derive(Clone, Debug)]
pub enum OptimizerState {
    Sgd(Sgd),
    Adam(Adam),
    Lbfgs(Lbfgs),
}

/// Outcome of [`optimizer_step`].
#[derive(Clone, Debug)]
pub struct StepReport {
    /// Objective at the parameters before the step.
    pub loss_before: f64,
    pub evaluations: usize,
    pub line_search_failed: bool,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd(Sgd { lr }),
            OptimizerKind::Adam => OptimizerState::Adam(Adam::new(lr, n_params)),
            OptimizerKind::Lbfgs => OptimizerState::Lbfgs(Lbfgs::with_initial_step(lr)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Sgd(_) => OptimizerKind::Sgd,
            OptimizerState::Adam(_) => OptimizerKind::Adam,
            OptimizerState::Lbfgs(_) => OptimizerKind::Lbfgs,
        }
    }

    /// Parameter change the next first-order step would subtract for `grad`,
    /// leaving the state untouched. `None` for L-BFGS.
    pub fn peek_delta(&self, grad: &[f64]) -> Option<Vec<f64>> {
        match self {
            OptimizerState::Sgd(s) => Some(s.delta(grad)),
            OptimizerState::Adam(a) => Some(a.delta(grad)),
            OptimizerState::Lbfgs(_) => None,
        }
    }

    /// Applies a first-order update with a precomputed gradient.
    pub fn apply_gradient(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        match self {
            OptimizerState::Sgd(s) => s.step(params, grad),
            OptimizerState::Adam(a) => a.step(params, grad),
            OptimizerState::Lbfgs(_) => Err(Error::invalid(
                "lbfgs needs a loss-and-gradient closure, not a single gradient",
            )),
        }
    }
}

/// One optimizer step on `params`. `objective` returns the loss and
/// gradient at a given point; first-order methods call it once, L-BFGS
/// calls it from inside its line search.
pub fn optimizer_step<F>(state: &mut OptimizerState, params: &mut [f64], mut objective: F) -> Result<StepReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (loss, grad) = objective(params)?;
    check_finite(&grad)?;
    match state {
        OptimizerState::Sgd(s) => {
            s.step(params, &grad)?;
        }
        OptimizerState::Adam(a) => {
            a.step(params, &grad)?;
        }
        OptimizerState::Lbfgs(l) => {
            let out = l.step(params, loss, &grad, &mut objective)?;
            return Ok(StepReport {
                loss_before: loss,
                evaluations: out.evaluations + 1,
                line_search_failed: out.line_search_failed,
            });
        }
    }
    Ok(StepReport {
        loss_before: loss,
        evaluations: 1,
        line_search_failed: false,
    })
}
