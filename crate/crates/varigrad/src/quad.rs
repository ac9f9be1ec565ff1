use crate::error::{Error, Result};

/// Options for adaptive Simpson integration.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureOptions {
    /// Absolute error target for the whole interval.
    pub abs_tol: f64,
    /// Maximum bisection depth before giving up.
    pub max_depth: u32,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions { abs_tol: 1e-10, max_depth: 60 }
    }
}

/// Adaptive Simpson quadrature with Richardson extrapolation. The integrand
/// must be finite on [a, b]; singular endpoints are the caller's problem
/// (subtract or expand the singular core first).
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, opts: QuadratureOptions) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) || a >= b {
        return Err(Error::Domain(format!("bad integration interval [{a}, {b}]")));
    }
    if !(opts.abs_tol > 0.0) {
        return Err(Error::Domain("quadrature tolerance must be positive".into()));
    }
    let eval = |x: f64| -> Result<f64> {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("integrand not finite at x={x}")))
        }
    };
    let m = 0.5 * (a + b);
    let fa = eval(a)?;
    let fm = eval(m)?;
    let fb = eval(b)?;
    let whole = simpson(a, b, fa, fm, fb);
    recurse(&eval, a, b, fa, fm, fb, whole, opts.abs_tol, opts.max_depth)
}

#[inline]
fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    eval: &dyn Fn(f64) -> Result<f64>,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = eval(lm)?;
    let frm = eval(rm)?;
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    // Simpson halving gains a factor 16; delta/15 is the standard error model.
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::Numeric(format!(
            "quadrature failed to converge on [{a}, {b}]"
        )));
    }
    let l = recurse(eval, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let r = recurse(eval, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Ok(l + r)
}
