//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub history: usize,
    pub max_iterations: usize,
    /// Converged when the largest gradient entry falls below this.
    pub grad_tol: f64,
    /// Converged when the relative objective decrease falls below this.
    pub rel_ftol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            history: 10,
            max_iterations: 500,
            grad_tol: 1e-6,
            rel_ftol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimize `f`, which returns the objective and writes the gradient into
/// its second argument.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.history);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha = vec![0.0; opts.history];

    for it in 0..opts.max_iterations {
        if max_abs(&g) <= opts.grad_tol {
            return LbfgsResult {
                x,
                value: fx,
                iterations: it,
                converged: true,
            };
        }
        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        for (k, (s, y, rho)) in hist.iter().enumerate().rev() {
            alpha[k] = rho * dot(s, &d);
            d.iter_mut()
                .zip(y)
                .for_each(|(di, yi)| *di -= alpha[k] * yi);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let scale = 1.0 / max_abs(&g).max(1.0);
            d.iter_mut().for_each(|v| *v *= scale);
        }
        for (k, (s, y, rho)) in hist.iter().enumerate() {
            let beta = rho * dot(y, &d);
            d.iter_mut()
                .zip(s)
                .for_each(|(di, si)| *di += (alpha[k] - beta) * si);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            x_new
                .iter_mut()
                .zip(&x)
                .zip(&d)
                .for_each(|((xn, xi), di)| *xn = xi + step * di);
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    if hist.len() == opts.history {
                        hist.pop_front();
                    }
                    hist.push_back((s, y, 1.0 / sy));
                }
                let decrease = fx - f_new;
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                fx = f_new;
                accepted = true;
                if decrease <= opts.rel_ftol * fx.abs().max(1.0) {
                    return LbfgsResult {
                        x,
                        value: fx,
                        iterations: it + 1,
                        converged: true,
                    };
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            let converged = max_abs(&g) <= opts.grad_tol;
            return LbfgsResult {
                x,
                value: fx,
                iterations: it + 1,
                converged,
            };
        }
    }
    let converged = max_abs(&g) <= opts.grad_tol;
    LbfgsResult {
        x,
        value: fx,
        iterations: opts.max_iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let r = minimize(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            vec![-1.2, 1.0],
            &LbfgsOptions {
                max_iterations: 1000,
                rel_ftol: 0.0,
                ..LbfgsOptions::default()
            },
        );
        assert!(r.converged);
        assert!(
            (r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5,
            "{:?}",
            r.x
        );
    }

    #[test]
    fn quadratic_solution_is_exact() {
        // f = ½ xᵀ A x - bᵀ x with diagonal A.
        let a = [1.0, 4.0, 9.0, 0.5];
        let b = [1.0, -2.0, 3.0, 0.25];
        let r = minimize(
            |x, g| {
                let mut f = 0.0;
                for k in 0..4 {
                    g[k] = a[k] * x[k] - b[k];
                    f += 0.5 * a[k] * x[k] * x[k] - b[k] * x[k];
                }
                f
            },
            vec![0.0; 4],
            &LbfgsOptions {
                rel_ftol: 0.0,
                grad_tol: 1e-10,
                ..LbfgsOptions::default()
            },
        );
        for k in 0..4 {
            assert!((r.x[k] - b[k] / a[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn reports_non_convergence() {
        let r = minimize(
            |x, g| {
                g[0] = -1.0 / (1.0 + x[0].exp());
                (1.0 + (-x[0]).exp()).ln()
            },
            vec![0.0],
            &LbfgsOptions {
                max_iterations: 3,
                rel_ftol: 0.0,
                ..LbfgsOptions::default()
            },
        );
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
    }
}
