use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst discrepancy found by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// `(parameter, element)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Central-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    Second,
    /// `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, error `O(h^4)`.
    /// Tolerates larger steps, which keeps rounding noise in `f` small.
    Fourth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    pub stencil: Stencil,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that entries whose
    /// true gradient is zero are judged by absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            stencil: Stencil::Second,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from the given parameter leaves. The relative
/// error of an element is `|analytic - numeric| / max(floor, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let GradCheckOptions { step, stencil, tol, floor } = *opts;
    if !(step > 0.0) {
        return Err(Error::param("step", "must be positive"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| Error::NonFinite(format!("no gradient for parameter {p}")))?
            .clone();
        for e in 0..params[p].numel() {
            let orig = params[p].data()[e];
            let mut diff = |h: f64| -> Result<f64> {
                work[p].data_mut()[e] = orig + h;
                let up = eval(&work)?;
                work[p].data_mut()[e] = orig - h;
                let down = eval(&work)?;
                work[p].data_mut()[e] = orig;
                Ok(up - down)
            };
            let numeric = match stencil {
                Stencil::Second => diff(step)? / (2.0 * step),
                Stencil::Fourth => (8.0 * diff(step)? - diff(2.0 * step)?) / (12.0 * step),
            };
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / floor.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some((p, e));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..r * c)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    fn check(f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, params: &[Tensor]) {
        let opts = GradCheckOptions {
            tol: 1e-6,
            ..Default::default()
        };
        let r = grad_check(f, params, &opts).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn arithmetic_with_broadcast() {
        check(
            |g, v| {
                let a = g.add(v[0], v[1])?;
                let b = g.mul(a, v[2])?;
                let c = g.sub(b, v[1])?;
                let d = g.div(c, v[3])?;
                Ok(g.sum(d))
            },
            &[
                mat(3, 4, 1),
                mat(1, 4, 2),
                mat(3, 1, 3),
                mat(3, 4, 4).map(|x| x.abs() + 1.0),
            ],
        );
    }

    #[test]
    fn matmul_and_transpose() {
        check(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                let t = g.transpose(p)?;
                let q = g.matmul(t, v[2])?;
                let s = g.tanh(q);
                Ok(g.sum(s))
            },
            &[mat(3, 5, 5), mat(5, 2, 6), mat(3, 4, 7)],
        );
    }

    #[test]
    fn nonlinearities() {
        check(
            |g, v| {
                let a = g.sigmoid(v[0]);
                let b = g.log_sigmoid(v[0]);
                let c = g.exp(v[0]);
                let d = g.square(v[0]);
                let sq = g.offset(d, 1.0);
                let e = g.log(sq)?;
                let cl = g.clamp(v[0], -0.5, 0.5);
                let parts = [a, b, c, e, cl];
                let mut acc = g.sum(parts[0]);
                for p in &parts[1..] {
                    let s = g.mean(*p)?;
                    acc = g.add(acc, s)?;
                }
                Ok(acc)
            },
            &[mat(2, 3, 8)],
        );
    }

    #[test]
    fn structural_ops() {
        check(
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let r = g.concat(&[c, c], 0)?;
                let s = g.slice(r, 0, 1, 2)?;
                let s = g.slice(s, 1, 1, 3)?;
                let rs = g.reshape(s, &[3, 2])?;
                let sa = g.sum_axis(rs, 0)?;
                let sb = g.sum_axis(rs, 1)?;
                let b = g.broadcast_to(sa, &[3, 2])?;
                let m = g.mul(b, sb)?;
                let sq = g.square(m);
                Ok(g.sum(sq))
            },
            &[mat(2, 2, 9), mat(2, 2, 10)],
        );
    }

    #[test]
    fn distances_and_log_softmax() {
        check(
            |g, v| {
                let d = g.sqdist(v[0], v[1])?;
                let n = g.neg(d);
                let l = g.log_softmax_rows(n)?;
                let w = g.mul(l, v[2])?;
                Ok(g.sum(w))
            },
            &[mat(4, 2, 11), mat(3, 2, 12), mat(4, 3, 13)],
        );
    }

    #[test]
    fn fourth_order_stencil_is_exact_on_quartics() {
        let opts = GradCheckOptions {
            step: 0.1,
            stencil: Stencil::Fourth,
            tol: 1e-12,
            ..Default::default()
        };
        let r = grad_check(
            |g, v| {
                let s = g.square(v[0]);
                let q = g.square(s);
                Ok(g.sum(q))
            },
            &[mat(2, 2, 14)],
            &opts,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // the clamp kink at 0.5 makes one-sided differences disagree
        let r = grad_check(
            |g, v| {
                let c = g.clamp(v[0], -1.0, 0.5);
                Ok(g.sum(c))
            },
            &[Tensor::scalar(0.5)],
            &GradCheckOptions {
                step: 1e-3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!r.passed);
    }
}
