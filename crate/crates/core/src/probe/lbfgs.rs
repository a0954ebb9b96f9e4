//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Search directions come from the two-loop recursion over the last
//! `history` curvature pairs. Every step is deterministic: no randomised
//! restarts, fixed interpolation rules, fixed iteration caps.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lbfgs {
    /// Number of stored `(s, y)` pairs.
    pub history: usize,
    pub max_iter: usize,
    /// Stop once the gradient's max-norm drops below this.
    pub gtol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_evals: usize,
}

impl Default for Lbfgs {
    fn default() -> Self {
        Lbfgs {
            history: 10,
            max_iter: 1000,
            gtol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_evals: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_max_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(g: &[f64]) -> f64 {
    g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// A point evaluated along the search line.
#[derive(Clone)]
struct Probe1d {
    alpha: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

impl Lbfgs {
    /// Minimises `objective`, which writes the gradient into its second
    /// argument and returns the value.
    pub fn minimize<F>(&self, mut objective: F, x0: Vec<f64>) -> Minimum
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let n = x0.len();
        let mut x = x0;
        let mut grad = vec![0.0; n];
        let mut value = objective(&x, &mut grad);
        let mut hist: VecDeque<Pair> = VecDeque::with_capacity(self.history);
        let mut iterations = 0;

        while iterations < self.max_iter {
            if max_norm(&grad) < self.gtol {
                break;
            }
            if !value.is_finite() {
                break;
            }
            let mut dir = self.direction(&grad, &hist);
            let mut slope = dot(&grad, &dir);
            if !(slope < 0.0) {
                hist.clear();
                dir = grad.iter().map(|g| -g).collect();
                slope = dot(&grad, &dir);
            }
            let first_step = if hist.is_empty() {
                (1.0 / max_norm(&grad)).min(1.0)
            } else {
                1.0
            };

            let accepted = self
                .line_search(&mut objective, &x, value, slope, &dir, first_step)
                .or_else(|| {
                    // retry along steepest descent with an empty memory
                    if hist.is_empty() {
                        return None;
                    }
                    hist.clear();
                    dir = grad.iter().map(|g| -g).collect();
                    slope = dot(&grad, &dir);
                    self.line_search(&mut objective, &x, value, slope, &dir, (1.0 / max_norm(&grad)).min(1.0))
                });
            let Some(step) = accepted else { break };

            let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = step.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                if hist.len() == self.history {
                    hist.pop_front();
                }
                hist.push_back(Pair { s, y, rho: 1.0 / sy });
            }
            x = step.x;
            grad = step.grad;
            value = step.value;
            iterations += 1;
        }

        let gnorm = max_norm(&grad);
        Minimum {
            x,
            value,
            grad_max_norm: gnorm,
            iterations,
            converged: gnorm < self.gtol,
        }
    }

    /// Two-loop recursion: returns `-H g`.
    fn direction(&self, grad: &[f64], hist: &VecDeque<Pair>) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(hist.len());
        for p in hist.iter().rev() {
            let a = p.rho * dot(&p.s, &q);
            for (qi, yi) in q.iter_mut().zip(&p.y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some(last) = hist.back() {
            let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for (p, a) in hist.iter().zip(alphas.iter().rev()) {
            let b = p.rho * dot(&p.y, &q);
            for (qi, si) in q.iter_mut().zip(&p.s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    fn eval<F>(&self, objective: &mut F, x0: &[f64], dir: &[f64], alpha: f64) -> Probe1d
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let x: Vec<f64> = x0.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
        let mut grad = vec![0.0; x.len()];
        let value = objective(&x, &mut grad);
        let slope = dot(&grad, dir);
        Probe1d {
            alpha,
            value,
            slope,
            x,
            grad,
        }
    }

    /// Bracketing phase of the strong-Wolfe search followed by zoom.
    fn line_search<F>(
        &self,
        objective: &mut F,
        x0: &[f64],
        f0: f64,
        g0: f64,
        dir: &[f64],
        first: f64,
    ) -> Option<Probe1d>
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let origin = Probe1d {
            alpha: 0.0,
            value: f0,
            slope: g0,
            x: x0.to_vec(),
            grad: Vec::new(),
        };
        let mut prev = origin;
        let mut alpha = first;
        let mut evals = 0;
        while evals < self.max_line_evals {
            let cur = self.eval(objective, x0, dir, alpha);
            evals += 1;
            if !cur.value.is_finite() {
                alpha = 0.5 * (prev.alpha + alpha);
                continue;
            }
            if cur.value > f0 + self.c1 * alpha * g0 || (evals > 1 && cur.value >= prev.value) {
                return self.zoom(objective, x0, f0, g0, dir, prev, cur, evals);
            }
            if cur.slope.abs() <= -self.c2 * g0 {
                return Some(cur);
            }
            if cur.slope >= 0.0 {
                let p = prev.clone();
                return self.zoom(objective, x0, f0, g0, dir, cur, p, evals);
            }
            prev = cur;
            alpha *= 2.0;
        }
        None
    }

    #[allow(clippy::too_many_arguments)]
    fn zoom<F>(
        &self,
        objective: &mut F,
        x0: &[f64],
        f0: f64,
        g0: f64,
        dir: &[f64],
        mut lo: Probe1d,
        mut hi: Probe1d,
        mut evals: usize,
    ) -> Option<Probe1d>
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        while evals < self.max_line_evals {
            let alpha = interpolate(&lo, &hi);
            if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
                break;
            }
            let cur = self.eval(objective, x0, dir, alpha);
            evals += 1;
            if !cur.value.is_finite() || cur.value > f0 + self.c1 * alpha * g0 || cur.value >= lo.value {
                hi = cur;
            } else {
                if cur.slope.abs() <= -self.c2 * g0 {
                    return Some(cur);
                }
                if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        // best sufficient-decrease point seen, if it moved at all
        if lo.alpha > 0.0 && lo.value < f0 {
            Some(lo)
        } else {
            None
        }
    }
}

/// Minimiser of the cubic through both end points, kept well inside the
/// interval; falls back to bisection.
fn interpolate(lo: &Probe1d, hi: &Probe1d) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let (left, right) = (a.min(b), a.max(b));
    let width = right - left;
    let mid = 0.5 * (a + b);
    if !hi.value.is_finite() {
        return mid;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    if t.is_finite() && t > left + 0.1 * width && t < right - 0.1 * width {
        t
    } else {
        mid
    }
}
