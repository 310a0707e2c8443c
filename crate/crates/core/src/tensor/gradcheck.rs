//! Central finite-difference checking of analytic gradients.
//!
//! The checker re-evaluates a scalar function while nudging one input
//! coordinate at a time, entirely independent of the tape's backward rules.
//! A coordinate that fails the tolerance is probed again with one-sided
//! differences; if those disagree with each other the point sits on a kink
//! (relu, abs, clamp) where the analytic subgradient is still legitimate,
//! and the failure is flagged as such rather than counted.

use super::{Result, Tensor};

/// Diagnosis for one checked coordinate.
#[derive(Debug, Clone)]
pub struct CoordDiag {
    /// Which input tensor the coordinate belongs to.
    pub input: usize,
    /// Flat index within that input.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// One-sided derivatives disagree: the function is not differentiable
    /// here and the mismatch does not indict the backward rule.
    pub kink: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates actually evaluated (after any subsampling).
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinates exceeding the tolerance, kinks included.
    pub failures: Vec<CoordDiag>,
}

impl GradCheckReport {
    /// True when every checked coordinate either met the tolerance or sits
    /// on a detected kink.
    pub fn ok(&self) -> bool {
        self.failures.iter().all(|d| d.kink)
    }

    pub fn summary(&self) -> String {
        let kinks = self.failures.iter().filter(|d| d.kink).count();
        format!(
            "checked {} coords, max rel err {:.3e}, {} failures ({} kinks)",
            self.checked,
            self.max_rel_err,
            self.failures.len(),
            kinks
        )
    }
}

/// Checks `analytic` against central differences of `f` at `x0`.
///
/// `f` must evaluate the full forward pass from scratch; it is called
/// `2 * checked + extra` times. With `max_coords` set, evenly spaced
/// coordinates are checked instead of all of them.
pub fn finite_diff_check(
    f: impl Fn(&Tensor<f64>) -> Result<f64>,
    x0: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport> {
    let wrap = |xs: &[Tensor<f64>]| f(&xs[0]);
    finite_diff_check_multi(wrap, &[x0.clone()], &[analytic.clone()], eps, tol, max_coords)
}

/// Multi-input variant: checks the gradient of `f` with respect to every
/// tensor in `x0` against the matching entry of `analytic`.
pub fn finite_diff_check_multi(
    f: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    x0: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport> {
    assert_eq!(x0.len(), analytic.len(), "one analytic gradient per input");
    for (x, g) in x0.iter().zip(analytic) {
        assert_eq!(x.shape(), g.shape(), "gradient shape must match input");
    }
    let total: usize = x0.iter().map(|x| x.numel()).sum();
    let budget = max_coords.unwrap_or(total).min(total).max(1);
    let stride = total.div_ceil(budget);

    let mut xs: Vec<Tensor<f64>> = x0.to_vec();
    let mut checked = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut failures = Vec::new();

    let mut flat = 0usize;
    for (ti, x) in x0.iter().enumerate() {
        for i in 0..x.numel() {
            if flat % stride != 0 {
                flat += 1;
                continue;
            }
            flat += 1;
            checked += 1;
            let orig = x.data()[i];

            let eval = |v: f64, xs: &mut Vec<Tensor<f64>>| -> Result<f64> {
                set_coord(&mut xs[ti], i, v);
                let y = f(xs);
                set_coord(&mut xs[ti], i, orig);
                y
            };
            let fp = eval(orig + eps, &mut xs)?;
            let fm = eval(orig - eps, &mut xs)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].data()[i];
            let rel = rel_err(a, numeric);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            if rel > tol {
                let f0 = f(&xs)?;
                let fwd = (fp - f0) / eps;
                let bwd = (f0 - fm) / eps;
                let kink = rel_err(fwd, bwd) > 10.0 * tol;
                failures.push(CoordDiag {
                    input: ti,
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                    kink,
                });
            }
        }
    }
    Ok(GradCheckReport { checked, max_rel_err, failures })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn set_coord(t: &mut Tensor<f64>, i: usize, v: f64) {
    t.data_mut()[i] = v;
}
