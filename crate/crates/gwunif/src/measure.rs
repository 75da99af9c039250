//! Uniform (branching) measure weights, Holder-exponent trajectories along
//! the spine, offspring-burst detection, and the divergence-sum diagnostic
//! that separates `E[nu ln nu] < inf` laws from heavy-tailed ones.
//!
//! Cylinder weights use the ratio form `Z_k(u)/Z_{n+k}`: it is exact at
//! finite horizons and partitions to 1 by construction. Holder and growth
//! exponents are finite-horizon trajectories with running extrema -- nothing
//! here extrapolates a limit.

use thiserror::Error;

use crate::offspring::OffspringLaw;
use crate::pgf::{NormingTable, PgfError};
use crate::spine::MarkedTree;
use crate::tree::{GwTree, TreeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Pgf(#[from] PgfError),
    #[error("burst window must satisfy 1 < a < b < m, got a={a}, b={b}, m={m}")]
    BadWindow { a: f64, b: f64, m: f64 },
    #[error("marked tree of depth {depth} cannot serve {len} entries at horizon {horizon}")]
    TooShallow {
        depth: usize,
        len: usize,
        horizon: usize,
    },
}

/// Finite-horizon uniform-measure weight of the ball at vertex `index` of
/// generation `gen`: `Z_k(u)/Z_{gen+k}`. Errors if truncation touched the
/// window (the ratio form is only used where it is exact).
pub fn unif_weight(
    tree: &GwTree,
    gen: usize,
    index: usize,
    k: usize,
) -> Result<f64, MeasureError> {
    let num = tree.subtree_population(gen, index, k)?;
    let denom = tree.subtree_population(0, 0, gen + k)?;
    Ok(num as f64 / denom as f64)
}

/// Per-generation spine statistics along one marked tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub n: usize,
    /// Exact drawn `nu(xi_n)`.
    pub nu_spine: u64,
    /// Materialized population at generation `n`.
    pub z_n: u64,
    /// `W_hat_k(xi_n) = Z_k(xi_n)/c_k`.
    pub w_spine: f64,
    /// `sum_{u in H(xi_n)} W_hat_k(u)`.
    pub sibling_w_sum: f64,
    /// `-(1/n) ln(m^{-n} W_hat(xi_n)/W_hat(e))`.
    pub holder_hat: f64,
    /// `(1/n) ln(W_hat(xi_n))`.
    pub growth_hat: f64,
    /// Sharp finite-horizon ceiling `(1/n) ln(Z_{n+k}/c_k)`; `Z_k(xi_n)`
    /// can never exceed the full generation it sits in.
    pub growth_bound: f64,
    /// Whether `a^n < nu(xi_n) < b^n` for the configured window.
    pub burst: bool,
    /// False when truncation biased any population in this entry.
    pub exact: bool,
}

/// A full spine trajectory at one fixed estimation horizon.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub horizon: usize,
    /// `W_hat_k(e)` (root estimate at the same horizon).
    pub w_root: f64,
    /// Mean of the offspring law.
    pub mean: f64,
    pub entries: Vec<TrajectoryEntry>,
}

/// Fills a [`TrajectoryRecord`] with entries `n = 1..=len` from a marked
/// tree, estimating every `W` at horizon `horizon`. The tree must be at
/// least `len + horizon + 1` deep (the sibling inequality check needs one
/// extra level). `burst_window = (a, b)` flags generations with
/// `a^n < nu(xi_n) < b^n`.
pub fn holder_trajectory(
    marked: &MarkedTree,
    table: &NormingTable,
    len: usize,
    horizon: usize,
    burst_window: Option<(f64, f64)>,
) -> Result<TrajectoryRecord, MeasureError> {
    if marked.depth() < len + horizon + 1 {
        return Err(MeasureError::TooShallow {
            depth: marked.depth(),
            len,
            horizon,
        });
    }
    table.require(len + horizon)?;
    if let Some((a, b)) = burst_window {
        if !(1.0 < a && a < b && b < table.mean()) {
            return Err(MeasureError::BadWindow {
                a,
                b,
                m: table.mean(),
            });
        }
    }
    let x_k = table.x(horizon);
    let ln_m = table.mean().ln();
    let tree = marked.tree();
    let (z_root, root_exact) = tree.subtree_population_lenient(0, 0, horizon);
    let w_root = z_root as f64 * x_k;
    let ln_w_root = w_root.ln();

    let mut entries = Vec::with_capacity(len);
    for n in 1..=len {
        let (z_spine, spine_exact) = marked.spine_subtree_population(n, horizon);
        let (z_sib, sib_exact) = marked.sibling_population(n, horizon);
        let w_spine = z_spine as f64 * x_k;
        let nu_spine = marked.spine_nu(n);
        let nf = n as f64;
        let burst = burst_window
            .map(|(a, b)| {
                let nu = nu_spine as f64;
                a.powi(n as i32) < nu && nu < b.powi(n as i32)
            })
            .unwrap_or(false);
        entries.push(TrajectoryEntry {
            n,
            nu_spine,
            z_n: tree.z(n),
            w_spine,
            sibling_w_sum: z_sib as f64 * x_k,
            holder_hat: ln_m - (w_spine.ln() - ln_w_root) / nf,
            growth_hat: w_spine.ln() / nf,
            growth_bound: (tree.z(n + horizon) as f64 * x_k).ln() / nf,
            burst,
            exact: spine_exact && sib_exact && root_exact,
        });
    }
    Ok(TrajectoryRecord {
        horizon,
        w_root,
        mean: table.mean(),
        entries,
    })
}

/// Generations whose spine offspring land in the open window `(a^n, b^n)`.
pub fn burst_scan(record: &TrajectoryRecord, a: f64, b: f64) -> Result<Vec<usize>, MeasureError> {
    if !(1.0 < a && a < b && b < record.mean) {
        return Err(MeasureError::BadWindow {
            a,
            b,
            m: record.mean,
        });
    }
    Ok(record
        .entries
        .iter()
        .filter(|e| {
            let nu = e.nu_spine as f64;
            a.powi(e.n as i32) < nu && nu < b.powi(e.n as i32)
        })
        .map(|e| e.n)
        .collect())
}

/// Exact `P(nu(xi_n) in (a^n, b^n))` under the spine law at generation `n`:
/// `D_n/D_{n+1} sum_{a^n < l < b^n} l q_l e^{-(l-1)/c_{n+1}}`, summed in
/// closed form or over the support, never by Monte Carlo.
pub fn spine_burst_prob(
    law: &OffspringLaw,
    table: &NormingTable,
    n: usize,
    a: f64,
    b: f64,
) -> Result<f64, MeasureError> {
    if !(1.0 < a && a < b && b < law.mean()) {
        return Err(MeasureError::BadWindow {
            a,
            b,
            m: law.mean(),
        });
    }
    table.require(n + 1)?;
    let ratio = (table.ln_d(n) - table.ln_d(n + 1)).exp();
    let restricted =
        law.first_moment_tilted_range(table.x(n + 1), a.powi(n as i32), b.powi(n as i32));
    Ok(ratio * restricted)
}

/// Partial sums `S_N = sum_{n <= N} P(nu(xi_n) in (a^n, b^n))` for
/// `N = 0..=n_max`. Divergent growth of `S_N` is the desk-scale shadow of
/// the `E[nu ln nu] = inf` burst mechanism.
pub fn burst_partial_sums(
    law: &OffspringLaw,
    table: &NormingTable,
    n_max: usize,
    a: f64,
    b: f64,
) -> Result<Vec<f64>, MeasureError> {
    let mut sums = Vec::with_capacity(n_max + 1);
    let mut acc = 0.0;
    for n in 0..=n_max {
        acc += spine_burst_prob(law, table, n, a, b)?;
        sums.push(acc);
    }
    Ok(sums)
}

/// Distribution summary of `max_n growth_hat_n` over a family of replicas.
#[derive(Debug, Clone)]
pub struct GrowthSummary {
    pub replicas: usize,
    /// One `max_{n <= N} growth_hat_n` per replica, in replica order.
    pub max_growth: Vec<f64>,
    pub median: f64,
    /// Median absolute deviation around the median.
    pub mad: f64,
    /// Entries where `growth_hat` exceeded its sharp ceiling (always 0
    /// unless the estimates are broken).
    pub bound_violations: usize,
}

pub fn growth_summary(records: &[TrajectoryRecord]) -> GrowthSummary {
    let mut max_growth = Vec::with_capacity(records.len());
    let mut violations = 0usize;
    for record in records {
        let mut best = f64::NEG_INFINITY;
        for e in &record.entries {
            if e.growth_hat > e.growth_bound + 1e-12 {
                violations += 1;
            }
            best = best.max(e.growth_hat);
        }
        max_growth.push(best);
    }
    let med = median(&max_growth);
    let deviations: Vec<f64> = max_growth.iter().map(|v| (v - med).abs()).collect();
    GrowthSummary {
        replicas: records.len(),
        median: med,
        mad: median(&deviations),
        bound_violations: violations,
        max_growth,
    }
}

/// Median (average of middle pair for even lengths); NaN on empty input.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgf::build_norming_table;
    use crate::spine::{sample_marked_tree_windowed, MarkedTree};
    use crate::tree::{simulate_gw, GwTree};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::LN_2;

    fn det2() -> OffspringLaw {
        OffspringLaw::deterministic(2).unwrap()
    }

    fn geo_half() -> OffspringLaw {
        OffspringLaw::shifted_geometric(0.5).unwrap()
    }

    fn dyadic2() -> OffspringLaw {
        OffspringLaw::dyadic_power_log(2.0).unwrap()
    }

    fn assert_close(got: f64, want: f64, tol: f64) {
        assert!(
            (got - want).abs() <= tol,
            "got {got}, want {want} (tol {tol})"
        );
    }

    fn marked(
        law: &OffspringLaw,
        table: &NormingTable,
        depth: usize,
        k: usize,
        seed: u64,
    ) -> MarkedTree {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        sample_marked_tree_windowed(law, table, depth, Some(k), 1 << 22, &mut rng).unwrap()
    }

    #[test]
    fn deterministic_weights_are_exact_powers_of_two() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let tree = simulate_gw(&det2(), 10, 1 << 20, &mut rng);
        for (n, k) in [(1usize, 3usize), (4, 4), (7, 3)] {
            for i in 0..tree.z(n) as usize {
                let w = unif_weight(&tree, n, i, k).unwrap();
                assert_eq!(w, 0.5f64.powi(n as i32), "weight at ({n}, {i})");
            }
        }
    }

    #[test]
    fn explicit_ratio_example() {
        // Z_1 = 2, Z_2(u_1) = 2, Z_2(u_2) = 3, Z_3 = 5: weights 0.4 and 0.6
        let tree = GwTree::from_counts(&[vec![2], vec![1, 2], vec![2, 1, 2]]);
        assert_eq!(unif_weight(&tree, 1, 0, 2).unwrap(), 0.4);
        assert_eq!(unif_weight(&tree, 1, 1, 2).unwrap(), 0.6);
    }

    #[test]
    fn weights_partition_to_one() {
        for seed in 0..10 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let tree = simulate_gw(&geo_half(), 10, 1 << 22, &mut rng);
            assert!(!tree.any_truncation());
            for (n, k) in [(2usize, 3usize), (4, 6), (1, 9)] {
                // integer telescoping is the exactness claim
                let num_total: u64 = (0..tree.z(n) as usize)
                    .map(|i| tree.subtree_population(n, i, k).unwrap())
                    .sum();
                assert_eq!(num_total, tree.z(n + k));
                let float_total: f64 = (0..tree.z(n) as usize)
                    .map(|i| unif_weight(&tree, n, i, k).unwrap())
                    .sum();
                assert!((float_total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_holder_is_exactly_ln2() {
        let law = det2();
        let k = 4;
        let table = build_norming_table(&law, 0.5, 20).unwrap();
        let m = marked(&law, &table, 15, k, 7);
        let record = holder_trajectory(&m, &table, 10, k, Some((1.2, 1.9))).unwrap();
        assert_eq!(record.entries.len(), 10);
        for e in &record.entries {
            assert_eq!(e.holder_hat, 2.0f64.ln(), "holder at n={}", e.n);
            assert_eq!(e.nu_spine, 2);
            // growth_hat = (1/n) ln(ln 2) up to solver residual in x_k
            assert_close(e.growth_hat, LN_2.ln() / e.n as f64, 1e-10);
            assert!(e.exact);
        }
        // bursts: a^n < 2 < b^n happens at n = 2, 3 only (1.2^4 > 2)
        let bursts = burst_scan(&record, 1.2, 1.9).unwrap();
        assert_eq!(bursts, vec![2, 3]);
    }

    #[test]
    fn holder_growth_identity_and_sibling_inequality() {
        let k = 4usize;
        for (law, seed) in [(geo_half(), 11u64), (dyadic2(), 13u64)] {
            let table = build_norming_table(&law, 0.5, 30).unwrap();
            let m = marked(&law, &table, 20, k, seed);
            let record = holder_trajectory(&m, &table, 15, k, Some((1.2, 1.8))).unwrap();
            let ln_w_root = record.w_root.ln();
            for e in &record.entries {
                // holder + growth - (1/n) ln W(e) = ln m
                let lhs = e.holder_hat + e.growth_hat - ln_w_root / e.n as f64;
                assert_close(lhs, record.mean.ln(), 1e-12);
                assert!(e.growth_hat <= e.growth_bound + 1e-12);
            }
            // sibling inequality at matched horizons, as exact integers:
            // Z_{k+1}(xi_n) >= sum_{u in H(xi_n)} Z_k(u)
            for n in 1..=15 {
                let (z_next, _) = m.spine_subtree_population(n, k + 1);
                let (z_sib, _) = m.sibling_population(n, k);
                assert!(z_next >= z_sib, "sibling inequality failed at n={n}");
            }
        }
    }

    #[test]
    fn geometric_holder_concentrates_near_ln_m() {
        // desk-scale shadow of dim = ln m for an XlogX law
        let law = geo_half();
        let k = 5usize;
        let len = 20usize;
        let table = build_norming_table(&law, 0.5, len + k + 2).unwrap();
        let mut finals = Vec::new();
        for seed in 0..300u64 {
            let m = marked(&law, &table, len + k + 1, k, 1000 + seed);
            let record = holder_trajectory(&m, &table, len, k, None).unwrap();
            finals.push(record.entries.last().unwrap().holder_hat);
        }
        let med = median(&finals);
        assert!(
            (med - LN_2).abs() < 0.2 * LN_2,
            "median holder_hat_20 = {med}, want within 20% of ln 2"
        );
    }

    #[test]
    fn burst_window_validation() {
        let law = geo_half();
        let table = build_norming_table(&law, 0.5, 5).unwrap();
        assert!(matches!(
            spine_burst_prob(&law, &table, 2, 0.9, 1.5),
            Err(MeasureError::BadWindow { .. })
        ));
        assert!(matches!(
            spine_burst_prob(&law, &table, 2, 1.5, 1.2),
            Err(MeasureError::BadWindow { .. })
        ));
        assert!(matches!(
            spine_burst_prob(&law, &table, 2, 1.2, 2.0),
            Err(MeasureError::BadWindow { .. })
        ));
    }

    #[test]
    fn bounded_support_bursts_vanish_once_window_clears_support() {
        let law = det2();
        let table = build_norming_table(&law, 0.5, 30).unwrap();
        // a^n > 2 for n >= 4
        for n in 4..=25 {
            assert_eq!(spine_burst_prob(&law, &table, n, 1.2, 1.9).unwrap(), 0.0);
        }
        assert!(spine_burst_prob(&law, &table, 2, 1.2, 1.9).unwrap() > 0.999);
    }

    #[test]
    fn burst_probability_matches_direct_tilted_summation() {
        // independent route: sum q~^s_l over support points in the window,
        // with masses computed from raw table values
        let law = dyadic2();
        let table = build_norming_table(&law, 0.5, 12).unwrap();
        let (a, b) = (1.2f64, 1.9f64);
        for n in [3usize, 7, 10] {
            let (lo, hi) = (a.powi(n as i32), b.powi(n as i32));
            let ratio = (table.ln_d(n) - table.ln_d(n + 1)).exp();
            let mut direct = 0.0;
            for pt in law.support() {
                let v = pt as f64;
                if v > lo && v < hi {
                    direct += law.pmf(pt) * v * (-(v - 1.0) * table.x(n + 1)).exp() * ratio;
                }
                if v >= hi {
                    break;
                }
            }
            let got = spine_burst_prob(&law, &table, n, a, b).unwrap();
            assert_close(got, direct, 1e-13);
        }
    }

    #[test]
    fn proof_step_lower_bound_holds_numerically() {
        // P(nu(xi_n) in (a^n,b^n)) >= (D_n/D_{n+1}) e^{-b^n/c_n} E[nu; window]
        let (a, b) = (1.2f64, 1.8f64);
        for law in [geo_half(), dyadic2()] {
            let table = build_norming_table(&law, 0.5, 21).unwrap();
            for n in 0..=20usize {
                let prob = spine_burst_prob(&law, &table, n, a, b).unwrap();
                let ratio = (table.ln_d(n) - table.ln_d(n + 1)).exp();
                let plain_moment =
                    law.first_moment_tilted_range(0.0, a.powi(n as i32), b.powi(n as i32));
                let lower = ratio * (-b.powi(n as i32) * table.x(n)).exp() * plain_moment;
                assert!(
                    prob >= lower - 1e-12,
                    "lower bound broke at n={n} for {law}: {prob} < {lower}"
                );
            }
        }
    }

    #[test]
    fn divergence_sums_separate_the_families() {
        let (a, b) = (1.2f64, 1.8f64);
        let geo_table = build_norming_table(&geo_half(), 0.5, 41).unwrap();
        let geo_sums = burst_partial_sums(&geo_half(), &geo_table, 40, a, b).unwrap();
        let geo_inc = geo_sums[40] - geo_sums[30];
        assert!(geo_inc >= 0.0);
        assert!(geo_inc < 1e-6, "geometric tail increment {geo_inc}");

        let dy_table = build_norming_table(&dyadic2(), 0.5, 41).unwrap();
        let dy_sums = burst_partial_sums(&dyadic2(), &dy_table, 40, a, b).unwrap();
        let dy_inc = dy_sums[40] - dy_sums[30];
        assert!(dy_inc > 10.0 * 1e-6);
        assert!(dy_inc > 10.0 * geo_inc.max(1e-6));
        // partial sums are nondecreasing
        for w in dy_sums.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn monte_carlo_burst_counts_match_exact_sums() {
        use crate::spine::sample_spine_nu_sequence;
        let law = dyadic2();
        let n_max = 25usize;
        let (a, b) = (1.2f64, 1.8f64);
        let table = build_norming_table(&law, 0.5, n_max + 2).unwrap();
        let probs: Vec<f64> = (0..=n_max)
            .map(|n| spine_burst_prob(&law, &table, n, a, b).unwrap())
            .collect();
        let expected: f64 = probs.iter().sum();
        let exact_sd: f64 = probs.iter().map(|p| p * (1.0 - p)).sum::<f64>().sqrt();

        let replicas = 4000u32;
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        let mut total = 0u64;
        for _ in 0..replicas {
            let nus = sample_spine_nu_sequence(&law, &table, n_max + 1, &mut rng).unwrap();
            for (n, &nu) in nus.iter().enumerate() {
                let v = nu as f64;
                if a.powi(n as i32) < v && v < b.powi(n as i32) {
                    total += 1;
                }
            }
        }
        let mc_mean = total as f64 / f64::from(replicas);
        let se = exact_sd / f64::from(replicas).sqrt();
        assert!(
            (mc_mean - expected).abs() < 4.0 * se,
            "MC {mc_mean} vs exact {expected} (se {se})"
        );
    }

    #[test]
    fn growth_summary_separates_families_at_matched_mean() {
        let k = 4usize;
        let len = 20usize;
        let replicas = 200u64;
        let mut all = Vec::new();
        for law in [geo_half(), dyadic2()] {
            let table = build_norming_table(&law, 0.5, len + k + 2).unwrap();
            let records: Vec<TrajectoryRecord> = (0..replicas)
                .map(|seed| {
                    let m = marked(&law, &table, len + k + 1, k, 5000 + seed);
                    holder_trajectory(&m, &table, len, k, None).unwrap()
                })
                .collect();
            let summary = growth_summary(&records);
            assert_eq!(summary.bound_violations, 0);
            all.push(summary);
        }
        let (geo, dy) = (&all[0], &all[1]);
        assert!(
            dy.median > geo.median,
            "dyadic median {} should exceed geometric {}",
            dy.median,
            geo.median
        );
    }

    #[test]
    fn deterministic_growth_summary_is_degenerate() {
        let law = det2();
        let k = 3;
        let table = build_norming_table(&law, 0.5, 20).unwrap();
        let records: Vec<TrajectoryRecord> = (0..5)
            .map(|seed| {
                let m = marked(&law, &table, 15, k, seed);
                holder_trajectory(&m, &table, 10, k, None).unwrap()
            })
            .collect();
        let summary = growth_summary(&records);
        // growth_hat_n = ln(ln 2)/n < 0, maximized at n = N
        assert_close(summary.median, LN_2.ln() / 10.0, 1e-9);
        assert!(summary.mad < 1e-12);
        assert_eq!(summary.bound_violations, 0);
    }

    #[test]
    fn median_and_quantile_helpers() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 3.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.0), 1.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 1.0), 4.0);
    }
}
