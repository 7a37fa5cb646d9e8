//! Orthant-wise L-BFGS for `smooth(M) + Σ c_d·|M_d|`.
//!
//! Curvature pairs come from the smooth gradient only. Directions are built
//! from the pseudo-gradient, restricted to its descent orthant, and every
//! trial point is projected so no coordinate crosses zero in one step.

use crate::error::Result;
use crate::nn::optim::{Lbfgs, LineSearchPoint};

pub(crate) struct OwlQn {
    lbfgs: Lbfgs,
    c: Vec<f64>,
    max_evaluations: usize,
}

pub(crate) struct OwlStep {
    pub loss: f64,
    pub smooth_grad: Vec<f64>,
    pub evaluations: usize,
    /// No point satisfying the sufficient-decrease test was found.
    pub stalled: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn pseudo_gradient(x: &[f64], g: &[f64], c: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(c)
        .map(|((&xi, &gi), &ci)| {
            if xi > 0.0 {
                gi + ci
            } else if xi < 0.0 {
                gi - ci
            } else if gi + ci < 0.0 {
                gi + ci
            } else if gi - ci > 0.0 {
                gi - ci
            } else {
                0.0
            }
        })
        .collect()
}

impl OwlQn {
    pub(crate) fn new(c: Vec<f64>, initial_step: f64) -> Self {
        OwlQn {
            lbfgs: Lbfgs::with_initial_step(initial_step),
            c,
            max_evaluations: 20,
        }
    }

    /// One iteration from `x`, where the full objective is `f` and the smooth
    /// gradient `g`. `objective` returns the full loss and smooth gradient.
    pub(crate) fn step<F>(&mut self, x: &mut [f64], f: f64, g: &[f64], mut objective: F) -> Result<OwlStep>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let pg = pseudo_gradient(x, g, &self.c);
        let pg_norm = dot(&pg, &pg).sqrt();
        let unchanged = |evaluations| OwlStep {
            loss: f,
            smooth_grad: g.to_vec(),
            evaluations,
            stalled: true,
        };
        if pg_norm == 0.0 {
            return Ok(unchanged(0));
        }
        let mut d = self.lbfgs.direction(&pg);
        for (di, &pi) in d.iter_mut().zip(&pg) {
            if *di * pi >= 0.0 {
                *di = 0.0;
            }
        }
        if d.iter().all(|&di| di == 0.0) {
            self.lbfgs.reset();
            d = pg.iter().map(|v| -v).collect();
        }
        let orthant: Vec<f64> = x
            .iter()
            .zip(&pg)
            .map(|(&xi, &pi)| if xi != 0.0 { xi.signum() } else { -pi.signum() })
            .collect();
        let alpha = if self.lbfgs.history_len() == 0 {
            self.lbfgs.initial_step.min(1.0 / pg_norm)
        } else {
            self.lbfgs.initial_step
        };
        let project = |alpha: f64| -> Vec<f64> {
            x.iter()
                .zip(&d)
                .zip(&orthant)
                .map(|((&xi, &di), &oi)| {
                    let v = xi + alpha * di;
                    if v * oi > 0.0 {
                        v
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let c = &self.c;
        // φ(α) = F(project(x + α·d)); clipped coordinates do not move
        let eval = |alpha: f64, evaluations: &mut usize| -> Result<LineSearchPoint> {
            let trial = project(alpha);
            let (f_new, g_new) = objective(&trial)?;
            *evaluations += 1;
            let dphi = (0..trial.len())
                .filter(|&i| trial[i] != 0.0)
                .map(|i| (g_new[i] + c[i] * orthant[i]) * d[i])
                .sum();
            Ok(LineSearchPoint {
                alpha,
                f: f_new,
                g: g_new,
                dphi,
            })
        };
        let dphi0 = dot(&pg, &d);
        let mut evaluations = 0;
        let found = self.lbfgs.search(f, dphi0, alpha, eval, &mut evaluations)?;
        let best = match found {
            Some(pt) => (project(pt.alpha), pt.f, pt.g),
            None => {
                // backtrack on the sufficient-decrease test alone
                let mut accepted = None;
                let mut alpha = alpha;
                while evaluations < 2 * self.max_evaluations {
                    let trial = project(alpha);
                    let (f_new, g_new) = objective(&trial)?;
                    evaluations += 1;
                    let decrease: f64 = pg.iter().zip(trial.iter().zip(x.iter())).map(|(p, (t, xi))| p * (t - xi)).sum();
                    if f_new.is_finite() && f_new <= f + self.lbfgs.c1 * decrease {
                        accepted = Some((trial, f_new, g_new));
                        break;
                    }
                    alpha *= 0.5;
                }
                match accepted {
                    Some(best) => best,
                    None => {
                        self.lbfgs.reset();
                        return Ok(unchanged(evaluations));
                    }
                }
            }
        };
        let (trial, f_new, g_new) = best;
        let s: Vec<f64> = trial.iter().zip(x.iter()).map(|(t, xi)| t - xi).collect();
        let y: Vec<f64> = g_new.iter().zip(g).map(|(a, b)| a - b).collect();
        self.lbfgs.push_pair(s, y);
        x.copy_from_slice(&trial);
        Ok(OwlStep {
            loss: f_new,
            smooth_grad: g_new,
            evaluations,
            stalled: false,
        })
    }
}
