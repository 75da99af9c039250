//! Generating-function evaluation, iteration, and inversion, plus the
//! Seneta-Heyde norming table.
//!
//! Everything near the fixed point 1 lives in log scale: the table stores
//! `x_n = -ln(phi_n^{-1}(s))` rather than `phi_n^{-1}(s)` itself. By
//! generation 40 the inverse point sits within `m^{-40}` of 1, so direct
//! storage would lose every significant digit; `x_n` keeps full relative
//! precision all the way down. Derivative products accumulate as
//! `lnD_n = sum_k ln(phi'(e^{-x_k}))` with compensated summation.

use thiserror::Error;

use crate::offspring::{Family, OffspringLaw};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PgfError {
    #[error("pgf argument {0} outside the domain (0, 1)")]
    Domain(f64),
    #[error("inversion target must be positive and finite, got {0}")]
    BadTarget(f64),
    #[error("generation {requested} exceeds the table horizon {horizon}")]
    Horizon { requested: usize, horizon: usize },
    #[error("pgf inversion failed to converge after {0} iterations")]
    NoConvergence(usize),
    #[error("internal invariant violated: {0}")]
    Internal(&'static str),
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Default, Clone, Copy)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// `phi(s) = E[s^nu]`, absolute error below 1e-14.
pub fn pgf_eval(law: &OffspringLaw, s: f64) -> Result<f64, PgfError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(PgfError::Domain(s));
    }
    Ok(match law.family() {
        Family::Deterministic { k } => pow_u64(s, *k),
        Family::ShiftedGeometric { p } => p * s / (1.0 - (1.0 - p) * s),
        _ => {
            let mut acc = Compensated::default();
            for pt in law.support() {
                acc.add(law.pmf(pt) * pow_u64(s, pt));
                if law.tail_mass_bound_after(pt) * pow_u64(s, pt) < 1e-17 * acc.value() {
                    break;
                }
            }
            acc.value()
        }
    })
}

/// `phi'(s) = E[nu s^{nu-1}]`, absolute error below 1e-14; always below the
/// mean on (0, 1).
pub fn pgf_derivative(law: &OffspringLaw, s: f64) -> Result<f64, PgfError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(PgfError::Domain(s));
    }
    Ok(pgf_derivative_at_exp(law, -s.ln()))
}

fn pow_u64(s: f64, e: u64) -> f64 {
    if e <= i32::MAX as u64 {
        s.powi(e as i32)
    } else {
        (e as f64 * s.ln()).exp()
    }
}

/// `-ln(phi(e^{-x}))` for `x > 0`, accurate for `x` all the way down to the
/// underflow threshold. This is the map the norming recursion iterates.
pub fn neg_log_pgf(law: &OffspringLaw, x: f64) -> f64 {
    debug_assert!(x > 0.0);
    match law.family() {
        Family::Deterministic { k } => *k as f64 * x,
        Family::ShiftedGeometric { p } => {
            // -ln phi(e^-x) = x + ln(1 + (1-p)(1 - e^-x)/p)
            let em = -f64::exp_m1(-x);
            x + f64::ln_1p((1.0 - p) * em / p)
        }
        _ => {
            if x < 0.25 {
                // g = 1 - phi(e^-x) = sum q_l (1 - e^{-l x}), termwise exact
                let mut acc = Compensated::default();
                for pt in law.support() {
                    acc.add(law.pmf(pt) * -f64::exp_m1(-(pt as f64) * x));
                    let tail = law
                        .tail_mass_bound_after(pt)
                        .min(x * law.tail_mean_bound_after(pt));
                    if tail < 1e-18 + 1e-17 * acc.value() {
                        break;
                    }
                }
                -f64::ln_1p(-acc.value())
            } else {
                let mut acc = Compensated::default();
                for pt in law.support() {
                    acc.add(law.pmf(pt) * (-(pt as f64) * x).exp());
                    let tail = law.tail_mass_bound_after(pt) * (-((pt + 1) as f64) * x).exp();
                    if tail < 1e-18 + 1e-17 * acc.value() {
                        break;
                    }
                }
                -acc.value().ln()
            }
        }
    }
}

/// `phi'(e^{-x})` for `x > 0`.
pub fn pgf_derivative_at_exp(law: &OffspringLaw, x: f64) -> f64 {
    debug_assert!(x > 0.0);
    match law.family() {
        Family::Deterministic { k } => *k as f64 * (-((k - 1) as f64) * x).exp(),
        Family::ShiftedGeometric { p } => {
            let denom = p + (1.0 - p) * -f64::exp_m1(-x);
            p / (denom * denom)
        }
        _ => {
            let mut acc = Compensated::default();
            for pt in law.support() {
                acc.add(pt as f64 * law.pmf(pt) * (-((pt - 1) as f64) * x).exp());
                let tail = law.tail_mean_bound_after(pt) * (-(pt as f64) * x).exp();
                if tail < 1e-18 + 1e-17 * acc.value() {
                    break;
                }
            }
            acc.value()
        }
    }
}

/// `ln(phi'(e^{-x}))`, the increments of the `lnD` accumulation.
pub fn ln_pgf_derivative_at_exp(law: &OffspringLaw, x: f64) -> f64 {
    match law.family() {
        Family::Deterministic { k } => (*k as f64).ln() - (k - 1) as f64 * x,
        Family::ShiftedGeometric { p } => {
            let em = -f64::exp_m1(-x);
            p.ln() - 2.0 * (p.ln() + f64::ln_1p((1.0 - p) * em / p))
        }
        _ => pgf_derivative_at_exp(law, x).ln(),
    }
}

const MAX_INVERT_ITERS: usize = 200;

/// Solves `-ln(phi(e^{-x})) = y` for `x`, i.e. computes
/// `x = -ln(phi^{-1}(e^{-y}))` without ever leaving log scale.
///
/// The bracket `[y/(1.5 m), y]` is analytically valid: `phi(s) > s^m` by
/// Jensen gives the lower end, `phi(s) < s` the upper. A secant step is
/// taken when it stays inside the bracket, bisection otherwise, so the
/// returned `x` satisfies `|neg_log_pgf(x) - y| <= 1e-13 y` (and `x < y`).
pub fn invert_pgf_log(law: &OffspringLaw, y: f64) -> Result<f64, PgfError> {
    if !(y > 0.0 && y.is_finite()) {
        return Err(PgfError::BadTarget(y));
    }
    let mut lo = y / (1.5 * law.mean());
    let mut hi = y;
    let tol = 1e-13 * y;

    let mut x0 = lo;
    let mut f0 = neg_log_pgf(law, x0) - y;
    if f0.abs() <= tol {
        return Ok(x0);
    }
    let mut x1 = hi;
    let mut f1 = neg_log_pgf(law, x1) - y;
    if f1.abs() <= tol {
        return Ok(x1);
    }

    for _ in 0..MAX_INVERT_ITERS {
        let secant = x1 - f1 * (x1 - x0) / (f1 - f0);
        let candidate = if secant.is_finite() && secant > lo && secant < hi {
            secant
        } else {
            0.5 * (lo + hi)
        };
        let fc = neg_log_pgf(law, candidate) - y;
        if fc.abs() <= tol {
            return Ok(candidate);
        }
        if fc < 0.0 {
            lo = candidate;
        } else {
            hi = candidate;
        }
        x0 = x1;
        f0 = f1;
        x1 = candidate;
        f1 = fc;
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(PgfError::NoConvergence(MAX_INVERT_ITERS))
}

/// Per-generation norming data for a fixed `s`: `x_n = -ln(phi_n^{-1}(s))`,
/// `c_n = 1/x_n`, and `lnD_n = ln(phi_n'(phi_n^{-1}(s)))`.
#[derive(Debug, Clone)]
pub struct NormingTable {
    s: f64,
    mean: f64,
    x: Vec<f64>,
    ln_d: Vec<f64>,
}

/// One row of [`NormingTable::ratio_diagnostics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioRow {
    pub n: usize,
    pub c_ratio: f64,
    pub d_ratio: f64,
}

/// Builds rows `0..=n_max` by iterating [`invert_pgf_log`]:
/// `x_n` solves `-ln(phi(e^{-x_n})) = x_{n-1}`, and `lnD` accumulates
/// `ln(phi'(e^{-x_n}))` under compensated summation.
pub fn build_norming_table(
    law: &OffspringLaw,
    s: f64,
    n_max: usize,
) -> Result<NormingTable, PgfError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(PgfError::Domain(s));
    }
    let mut x = Vec::with_capacity(n_max + 1);
    let mut ln_d = Vec::with_capacity(n_max + 1);
    x.push(-s.ln());
    ln_d.push(0.0);
    let mut acc = Compensated::default();
    for n in 1..=n_max {
        let next = invert_pgf_log(law, x[n - 1])?;
        if next >= x[n - 1] || next <= 0.0 {
            return Err(PgfError::Internal("x_n must decrease strictly"));
        }
        x.push(next);
        acc.add(ln_pgf_derivative_at_exp(law, next));
        ln_d.push(acc.value());
    }
    Ok(NormingTable {
        s,
        mean: law.mean(),
        x,
        ln_d,
    })
}

impl NormingTable {
    pub fn s(&self) -> f64 {
        self.s
    }

    /// Mean of the law the table was built for.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Largest generation with a row.
    pub fn horizon(&self) -> usize {
        self.x.len() - 1
    }

    pub fn require(&self, n: usize) -> Result<(), PgfError> {
        if n > self.horizon() {
            Err(PgfError::Horizon {
                requested: n,
                horizon: self.horizon(),
            })
        } else {
            Ok(())
        }
    }

    /// `x_n = 1/c_n = -ln(phi_n^{-1}(s))`.
    pub fn x(&self, n: usize) -> f64 {
        self.x[n]
    }

    /// Seneta-Heyde constant `c_n`.
    pub fn c(&self, n: usize) -> f64 {
        1.0 / self.x[n]
    }

    pub fn ln_d(&self, n: usize) -> f64 {
        self.ln_d[n]
    }

    /// `D_n = phi_n'(phi_n^{-1}(s))`.
    pub fn d(&self, n: usize) -> f64 {
        self.ln_d[n].exp()
    }

    /// `c_{n+1}/c_n`, which converges to the mean.
    pub fn c_ratio(&self, n: usize) -> f64 {
        self.x[n] / self.x[n + 1]
    }

    /// `D_{n+1}/D_n`, which also converges to the mean.
    pub fn d_ratio(&self, n: usize) -> f64 {
        (self.ln_d[n + 1] - self.ln_d[n]).exp()
    }

    pub fn ratio_diagnostics(&self) -> Vec<RatioRow> {
        (0..self.horizon())
            .map(|n| RatioRow {
                n,
                c_ratio: self.c_ratio(n),
                d_ratio: self.d_ratio(n),
            })
            .collect()
    }

    /// CSV rows `n,x,c,lnD,c_ratio,D_ratio` at 17 significant digits; the
    /// ratio columns are empty on the final row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,x,c,lnD,c_ratio,D_ratio\n");
        for n in 0..=self.horizon() {
            if n < self.horizon() {
                out.push_str(&format!(
                    "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                    n,
                    self.x(n),
                    self.c(n),
                    self.ln_d(n),
                    self.c_ratio(n),
                    self.d_ratio(n)
                ));
            } else {
                out.push_str(&format!(
                    "{},{:.16e},{:.16e},{:.16e},,\n",
                    n,
                    self.x(n),
                    self.c(n),
                    self.ln_d(n)
                ));
            }
        }
        out
    }
}
