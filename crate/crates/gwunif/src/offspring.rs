//! Offspring-law families: exact pmf/cdf evaluation with analytic tail
//! bounds, moment diagnostics, and exact inverse-CDF sampling.
//!
//! All families put zero mass on 0 children (the tree never dies out) and
//! have mean strictly above 1. The dyadic power-log family carries its mass
//! on `{1} ∪ {2^j : j >= 1}` with `pmf(2^j) = C 2^{-j} j^{-2}`; it is the
//! canonical witness for `E[nu ln nu] = inf` because the partial sums of
//! `l ln(l) q_l` grow like `C ln(2) H_J` — harmonically, without bound.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

/// Absolute tolerance for mass-normalization checks.
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LawError {
    #[error("offspring mean must exceed 1, got {0}")]
    MeanNotSupercritical(f64),
    #[error("probability out of range: {0}")]
    BadProbability(f64),
    #[error("finite-support masses must sum to 1, got {0}")]
    MassNotNormalized(f64),
    #[error("deterministic offspring count must be at least 2, got {0}")]
    DegenerateCount(u64),
    #[error("dyadic target mean {requested} outside the valid interval (1, {max})")]
    DyadicMeanOutOfRange { requested: f64, max: f64 },
    #[error("malformed law spec: offending token `{0}`")]
    Parse(String),
}

/// `Li_2(1/2) = (pi^2 - 6 ln^2 2)/12`, the total mass the dyadic family puts
/// on powers of two per unit of scale.
pub fn li2_half() -> f64 {
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    let ln2 = std::f64::consts::LN_2;
    (pi2 - 6.0 * ln2 * ln2) / 12.0
}

/// Mean gained per unit of dyadic scale: `pi^2/6 - Li_2(1/2)`.
fn dyadic_mean_slope() -> f64 {
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    let ln2 = std::f64::consts::LN_2;
    (pi2 + 6.0 * ln2 * ln2) / 12.0
}

/// Largest admissible target mean for [`OffspringLaw::dyadic_power_log`]
/// (the point where `pmf(1)` hits zero), about 2.8253.
pub fn dyadic_max_mean() -> f64 {
    1.0 + dyadic_mean_slope() / li2_half()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// Point mass at `k >= 2` children.
    Deterministic { k: u64 },
    /// Masses `q_1..q_K` on `1..=K`.
    FiniteSupport { probs: Vec<f64> },
    /// `q_l = p (1-p)^{l-1}` on `l >= 1`; mean `1/p`.
    ShiftedGeometric { p: f64 },
    /// `pmf(2^j) = C 2^{-j} j^{-2}`, remainder on 1; `E[nu ln nu] = inf`.
    DyadicPowerLog { scale: f64 },
}

/// An offspring distribution on the positive integers with mean in `(1, inf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringLaw {
    family: Family,
    mean: f64,
    xlogx_finite: bool,
}

impl OffspringLaw {
    pub fn deterministic(k: u64) -> Result<Self, LawError> {
        if k < 2 {
            return Err(LawError::DegenerateCount(k));
        }
        Ok(Self {
            family: Family::Deterministic { k },
            mean: k as f64,
            xlogx_finite: true,
        })
    }

    /// Masses `probs[i] = q_{i+1}`; no mass on zero by construction.
    pub fn finite_support(probs: &[f64]) -> Result<Self, LawError> {
        if probs.is_empty() {
            return Err(LawError::MassNotNormalized(0.0));
        }
        for &p in probs {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(LawError::BadProbability(p));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(LawError::MassNotNormalized(total));
        }
        let mean: f64 = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (i as f64 + 1.0) * p)
            .sum();
        if mean <= 1.0 {
            return Err(LawError::MeanNotSupercritical(mean));
        }
        Ok(Self {
            family: Family::FiniteSupport {
                probs: probs.to_vec(),
            },
            mean,
            xlogx_finite: true,
        })
    }

    pub fn shifted_geometric(p: f64) -> Result<Self, LawError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(LawError::BadProbability(p));
        }
        Ok(Self {
            family: Family::ShiftedGeometric { p },
            mean: 1.0 / p,
            xlogx_finite: true,
        })
    }

    /// Solves `mean = 1 + C (pi^2/6 - Li_2(1/2))` for the scale `C`. The
    /// target mean must leave `pmf(1) = 1 - C Li_2(1/2)` nonnegative.
    pub fn dyadic_power_log(target_mean: f64) -> Result<Self, LawError> {
        let max = dyadic_max_mean();
        if !(target_mean > 1.0 && target_mean < max) {
            return Err(LawError::DyadicMeanOutOfRange {
                requested: target_mean,
                max,
            });
        }
        let scale = (target_mean - 1.0) / dyadic_mean_slope();
        Ok(Self {
            family: Family::DyadicPowerLog { scale },
            mean: target_mean,
            xlogx_finite: false,
        })
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// Expected number of children per vertex.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Whether `E[nu ln nu] < inf` (an analytic property of the family).
    pub fn xlogx_finite(&self) -> bool {
        self.xlogx_finite
    }

    /// Scale `C` of the dyadic family, if this is one.
    pub fn dyadic_scale(&self) -> Option<f64> {
        match self.family {
            Family::DyadicPowerLog { scale } => Some(scale),
            _ => None,
        }
    }

    /// Exact mass at `l`; zero off the support (total on positive integers).
    pub fn pmf(&self, l: u64) -> f64 {
        if l == 0 {
            return 0.0;
        }
        match &self.family {
            Family::Deterministic { k } => {
                if l == *k {
                    1.0
                } else {
                    0.0
                }
            }
            Family::FiniteSupport { probs } => {
                probs.get(l as usize - 1).copied().unwrap_or(0.0)
            }
            Family::ShiftedGeometric { p } => {
                if l <= 1 << 20 {
                    p * (1.0 - p).powi((l - 1) as i32)
                } else {
                    p * ((l - 1) as f64 * (1.0 - p).ln()).exp()
                }
            }
            Family::DyadicPowerLog { scale } => {
                if l == 1 {
                    1.0 - scale * li2_half()
                } else if l.is_power_of_two() {
                    let j = l.trailing_zeros() as f64;
                    scale * 0.5f64.powi(l.trailing_zeros() as i32) / (j * j)
                } else {
                    0.0
                }
            }
        }
    }

    /// `ln pmf(l)`; `-inf` off the support.
    pub fn ln_pmf(&self, l: u64) -> f64 {
        match &self.family {
            Family::ShiftedGeometric { p } => {
                if l == 0 {
                    f64::NEG_INFINITY
                } else {
                    p.ln() + (l - 1) as f64 * (1.0 - p).ln()
                }
            }
            Family::DyadicPowerLog { scale } => {
                if l > 1 && l.is_power_of_two() {
                    let j = l.trailing_zeros() as f64;
                    scale.ln() - j * std::f64::consts::LN_2 - 2.0 * j.ln()
                } else {
                    self.pmf(l).ln()
                }
            }
            _ => self.pmf(l).ln(),
        }
    }

    /// `P(nu <= l)`, exact per family.
    pub fn cdf(&self, l: u64) -> f64 {
        match &self.family {
            Family::Deterministic { k } => {
                if l >= *k {
                    1.0
                } else {
                    0.0
                }
            }
            Family::FiniteSupport { probs } => {
                let upto = (l as usize).min(probs.len());
                probs[..upto].iter().sum::<f64>().min(1.0)
            }
            Family::ShiftedGeometric { p } => {
                if l == 0 {
                    0.0
                } else {
                    -f64::exp_m1(l as f64 * (1.0 - p).ln())
                }
            }
            Family::DyadicPowerLog { .. } => {
                if l == 0 {
                    return 0.0;
                }
                let mut total = self.pmf(1);
                let mut pt = 2u64;
                while pt <= l {
                    total += self.pmf(pt);
                    if pt > u64::MAX / 2 {
                        break;
                    }
                    pt *= 2;
                }
                total.min(1.0)
            }
        }
    }

    /// Analytic upper bound on the tail mass `P(nu > l)`. Exact for bounded
    /// and geometric families; for the dyadic family it is the bound
    /// `C 2^{-J} (J+1)^{-2}` with `J = floor(log2 l)`.
    pub fn tail_mass_bound_after(&self, l: u64) -> f64 {
        match &self.family {
            Family::Deterministic { k } => {
                if l >= *k {
                    0.0
                } else {
                    1.0
                }
            }
            Family::FiniteSupport { .. } => (1.0 - self.cdf(l)).max(0.0),
            Family::ShiftedGeometric { p } => (1.0 - p).powf(l as f64),
            Family::DyadicPowerLog { scale } => {
                if l == 0 {
                    return 1.0;
                }
                if l == 1 {
                    return scale * li2_half();
                }
                let j = 63 - l.leading_zeros();
                let jf = j as f64;
                scale * 0.5f64.powi(j as i32) / ((jf + 1.0) * (jf + 1.0))
            }
        }
    }

    /// Analytic upper bound on the tail of the mean, `sum_{l' > l} l' q_{l'}`.
    pub fn tail_mean_bound_after(&self, l: u64) -> f64 {
        match &self.family {
            Family::Deterministic { k } => {
                if l >= *k {
                    0.0
                } else {
                    *k as f64
                }
            }
            Family::FiniteSupport { probs } => probs
                .iter()
                .enumerate()
                .skip(l as usize)
                .map(|(i, &p)| (i as f64 + 1.0) * p)
                .sum(),
            Family::ShiftedGeometric { p } => {
                // sum_{l' > l} l' p (1-p)^{l'-1} = (1-p)^l (l p + 1)/p
                (1.0 - p).powf(l as f64) * (l as f64 * p + 1.0) / p
            }
            Family::DyadicPowerLog { scale } => {
                if l == 0 {
                    return self.mean;
                }
                if l == 1 {
                    // exact: sum over powers of two of C j^{-2} = C pi^2/6
                    return scale * std::f64::consts::PI * std::f64::consts::PI / 6.0;
                }
                let j = (63 - l.leading_zeros()) as f64;
                // sum_{j' > J} C j'^{-2} < C / J
                scale / j
            }
        }
    }

    /// Partial sum `sum_{l <= L} l ln(l) q_l`, the divergence diagnostic for
    /// the `E[nu ln nu]` condition.
    pub fn xlogx_partial_sum(&self, l_max: u64) -> f64 {
        match &self.family {
            Family::Deterministic { k } => {
                if *k <= l_max {
                    let kf = *k as f64;
                    kf * kf.ln()
                } else {
                    0.0
                }
            }
            Family::FiniteSupport { probs } => probs
                .iter()
                .enumerate()
                .take(l_max as usize)
                .map(|(i, &p)| {
                    let lf = i as f64 + 1.0;
                    lf * lf.ln() * p
                })
                .sum(),
            Family::ShiftedGeometric { p } => {
                let r = 1.0 - p;
                let mut pow = r; // r^{l-1} at l = 2
                let mut total = 0.0;
                for l in 2..=l_max {
                    let lf = l as f64;
                    let term = lf * lf.ln() * p * pow;
                    total += term;
                    pow *= r;
                    if pow == 0.0 {
                        break;
                    }
                }
                total
            }
            Family::DyadicPowerLog { scale } => {
                // term at l = 2^j is exactly C ln(2)/j; l = 1 contributes 0
                let mut total = 0.0;
                let mut j = 1u32;
                while (1u64 << j) <= l_max {
                    total += scale * std::f64::consts::LN_2 / j as f64;
                    if j >= 63 {
                        break;
                    }
                    j += 1;
                }
                total
            }
        }
    }

    /// Ascending support points.
    pub fn support(&self) -> SupportIter<'_> {
        SupportIter { law: self, idx: 0 }
    }

    /// Largest support point for bounded families.
    pub fn support_max(&self) -> Option<u64> {
        match &self.family {
            Family::Deterministic { k } => Some(*k),
            Family::FiniteSupport { probs } => Some(probs.len() as u64),
            _ => None,
        }
    }

    /// `sum_{lo < l < hi} l q_l e^{-(l-1) x}` over the open window, exact per
    /// family (closed form for the geometric, support enumeration otherwise).
    /// With `x = 0` this is the plain restricted first moment.
    pub fn first_moment_tilted_range(&self, x: f64, lo: f64, hi: f64) -> f64 {
        let first = first_int_above(lo);
        let last = last_int_below(hi);
        if last < first {
            return 0.0;
        }
        match &self.family {
            Family::Deterministic { k } => {
                if *k >= first && *k <= last {
                    *k as f64 * (-((*k - 1) as f64) * x).exp()
                } else {
                    0.0
                }
            }
            Family::FiniteSupport { probs } => {
                let mut total = 0.0;
                for l in first..=last.min(probs.len() as u64) {
                    total += l as f64 * probs[l as usize - 1] * (-((l - 1) as f64) * x).exp();
                }
                total
            }
            Family::ShiftedGeometric { p } => {
                // p sum_{l=A}^{B} l r^{l-1} with r = (1-p) e^{-x}, summed from
                // the left edge so nothing cancels:
                //   r^{A-1} [ A (1-r^{n+1})/(1-r) + r (1-(n+1)r^n + n r^{n+1})/(1-r)^2 ]
                let ln_r = (1.0 - p).ln() - x;
                let r = ln_r.exp();
                let lead = ((first - 1) as f64 * ln_r).exp();
                if lead == 0.0 {
                    return 0.0;
                }
                let n = (last - first) as f64;
                let rn = (n * ln_r).exp();
                let rn1 = rn * r;
                let one_minus_r = -f64::exp_m1(ln_r);
                let geom = (1.0 - rn1) / one_minus_r;
                let ramp = r * (1.0 - (n + 1.0) * rn + n * rn1) / (one_minus_r * one_minus_r);
                p * lead * (first as f64 * geom + ramp)
            }
            Family::DyadicPowerLog { .. } => {
                let mut total = 0.0;
                for pt in self.support() {
                    if pt > last {
                        break;
                    }
                    if pt >= first {
                        total += pt as f64 * self.pmf(pt) * (-((pt - 1) as f64) * x).exp();
                    }
                }
                total
            }
        }
    }

    /// One exact inverse-CDF draw. Hot loops should hold a [`LawSampler`]
    /// and reuse its prefix-sum cache instead.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        LawSampler::new(self).sample(rng)
    }

    /// Canonical spec string, re-parsable by [`OffspringLaw::from_str`].
    pub fn spec_string(&self) -> String {
        match &self.family {
            Family::Deterministic { k } => format!("deterministic:k={k}"),
            Family::FiniteSupport { probs } => {
                let parts: Vec<String> = probs.iter().map(|p| p.to_string()).collect();
                format!("finite:{}", parts.join(","))
            }
            Family::ShiftedGeometric { p } => format!("geometric:p={p}"),
            Family::DyadicPowerLog { .. } => format!("dyadic:m={}", self.mean),
        }
    }
}

impl fmt::Display for OffspringLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.spec_string())
    }
}

/// Smallest integer strictly greater than `v` (clamped to >= 1).
fn first_int_above(v: f64) -> u64 {
    let f = v.floor();
    let next = f + 1.0;
    if next < 1.0 {
        1
    } else if next >= u64::MAX as f64 {
        u64::MAX
    } else {
        next as u64
    }
}

/// Largest integer strictly smaller than `v` (0 when there is none).
fn last_int_below(v: f64) -> u64 {
    if v <= 1.0 {
        return 0;
    }
    let c = v.ceil();
    let prev = if c == v { v - 1.0 } else { c - 1.0 };
    if prev >= u64::MAX as f64 {
        u64::MAX
    } else {
        prev as u64
    }
}

/// Ascending support points of a law.
pub struct SupportIter<'a> {
    law: &'a OffspringLaw,
    idx: u64,
}

impl Iterator for SupportIter<'_> {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        let i = self.idx;
        self.idx += 1;
        match self.law.family {
            Family::Deterministic { k } => (i == 0).then_some(k),
            Family::FiniteSupport { ref probs } => {
                (i < probs.len() as u64).then_some(i + 1)
            }
            Family::ShiftedGeometric { .. } => i.checked_add(1),
            Family::DyadicPowerLog { .. } => {
                if i == 0 {
                    Some(1)
                } else if i <= 62 {
                    Some(1u64 << i)
                } else {
                    None
                }
            }
        }
    }
}

/// Exact inverse-CDF sampler with lazily extended prefix sums. Returns the
/// least support point whose CDF reaches the uniform draw `u in (0, 1]`.
pub struct LawSampler<'a> {
    law: &'a OffspringLaw,
    support: SupportIter<'a>,
    points: Vec<u64>,
    cum: Vec<f64>,
    stalled: u32,
}

impl<'a> LawSampler<'a> {
    pub fn new(law: &'a OffspringLaw) -> Self {
        Self {
            law,
            support: law.support(),
            points: Vec::new(),
            cum: Vec::new(),
            stalled: 0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> u64 {
        // map [0,1) to (0,1] so a zero draw cannot select below the support
        self.quantile(1.0 - rng.gen::<f64>())
    }

    /// Least `l` with `CDF(l) >= u`.
    pub fn quantile(&mut self, u: f64) -> u64 {
        while self.cum.last().copied().unwrap_or(0.0) < u {
            match self.support.next() {
                Some(pt) => {
                    let mass = self.law.pmf(pt);
                    let next = self.cum.last().copied().unwrap_or(0.0) + mass;
                    self.points.push(pt);
                    self.cum.push(next);
                    // prefix sums top out just below 1 in floating point;
                    // give up on the <= 1e-15 sliver after a long stall
                    if mass < f64::EPSILON {
                        self.stalled += 1;
                        if self.stalled > 128 {
                            return *self.points.last().unwrap();
                        }
                    } else {
                        self.stalled = 0;
                    }
                }
                None => return *self.points.last().expect("law has empty support"),
            }
        }
        let pos = self.cum.partition_point(|&c| c < u);
        self.points[pos.min(self.points.len() - 1)]
    }
}

impl FromStr for OffspringLaw {
    type Err = LawError;

    /// Grammar: `deterministic:k=2`, `finite:0.5,0.5`, `geometric:p=0.5`,
    /// `dyadic:m=2.0`.
    fn from_str(s: &str) -> Result<Self, LawError> {
        let (head, rest) = s
            .split_once(':')
            .ok_or_else(|| LawError::Parse(s.to_string()))?;
        match head {
            "deterministic" => {
                let k = parse_kv(rest, "k")?
                    .parse::<u64>()
                    .map_err(|_| LawError::Parse(rest.to_string()))?;
                Self::deterministic(k)
            }
            "geometric" => {
                let p = parse_kv(rest, "p")?
                    .parse::<f64>()
                    .map_err(|_| LawError::Parse(rest.to_string()))?;
                Self::shifted_geometric(p)
            }
            "dyadic" => {
                let m = parse_kv(rest, "m")?
                    .parse::<f64>()
                    .map_err(|_| LawError::Parse(rest.to_string()))?;
                Self::dyadic_power_log(m)
            }
            "finite" => {
                let probs = rest
                    .split(',')
                    .map(|tok| {
                        tok.trim()
                            .parse::<f64>()
                            .map_err(|_| LawError::Parse(tok.to_string()))
                    })
                    .collect::<Result<Vec<f64>, LawError>>()?;
                Self::finite_support(&probs)
            }
            other => Err(LawError::Parse(other.to_string())),
        }
    }
}

fn parse_kv<'s>(rest: &'s str, key: &str) -> Result<&'s str, LawError> {
    let (k, v) = rest
        .split_once('=')
        .ok_or_else(|| LawError::Parse(rest.to_string()))?;
    if k != key {
        return Err(LawError::Parse(k.to_string()));
    }
    Ok(v)
}
