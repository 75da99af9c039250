//! Exhaustive enumeration of small trees for finite-support laws, and exact
//! verification of the change-of-measure identities against it.
//!
//! The identities are algebraic, so small instances exercise them fully;
//! exactness matters more than scale here. Every probability is assembled in
//! log space and exponentiated only for the final comparison, which keeps
//! 1e-12 tolerances honest at depth 3.
//!
//! The central check: for every depth-`n` tree shape `T` and every vertex
//! `u` of its generation `n`,
//!
//! ```text
//! P(marked tree matches T with spine at u) = (dM_n / Z_n) GW(T)
//! ```
//!
//! where the left side is the literal product of tilted-law masses and
//! uniform spine choices along the construction, and the right side comes
//! from the martingale formulas. Summing over `u` gives `dM_n GW(T)`, and
//! conditioning gives the uniform spine location `1/Z_n`.

use thiserror::Error;

use crate::offspring::OffspringLaw;
use crate::pgf::{NormingTable, PgfError};
use crate::spine::{ln_offspine_mass, ln_spine_mass};

/// Default ceiling on enumeration size.
pub const DEFAULT_ENUM_BUDGET: usize = 1 << 17;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("enumeration needs a finite-support law, got `{0}`")]
    UnboundedSupport(String),
    #[error("enumeration budget exceeded at depth {depth}: {count} > {max} trees")]
    Budget {
        depth: usize,
        count: usize,
        max: usize,
    },
    #[error(transparent)]
    Pgf(#[from] PgfError),
}

/// One fully explicit tree shape: offspring counts for every vertex of the
/// first `depth` generations, populations, and the exact GW log-probability.
#[derive(Debug, Clone)]
pub struct EnumeratedTree {
    /// `counts[g][i]` = offspring of vertex `i` at generation `g` (BFS).
    pub counts: Vec<Vec<u64>>,
    /// Populations `Z_0..Z_depth`.
    pub z: Vec<u64>,
    /// `ln GW(T)` = sum of `ln q` over all vertices above the last level.
    pub ln_prob: f64,
}

impl EnumeratedTree {
    pub fn depth(&self) -> usize {
        self.counts.len()
    }

    pub fn prob(&self) -> f64 {
        self.ln_prob.exp()
    }

    /// Root-to-leaf vertex indices for the leaf `index` at the last level.
    pub fn path_to(&self, index: usize) -> Vec<usize> {
        let depth = self.depth();
        let mut path = vec![0usize; depth + 1];
        path[depth] = index;
        for g in (0..depth).rev() {
            let child = path[g + 1];
            // parent = the vertex whose child block contains `child`
            let mut acc = 0usize;
            let mut parent = 0usize;
            for (i, &c) in self.counts[g].iter().enumerate() {
                acc += c as usize;
                if child < acc {
                    parent = i;
                    break;
                }
            }
            path[g] = parent;
        }
        path
    }

    /// Flat canonical key comparable with `MarkedTree::shape_key` minus the
    /// spine position.
    pub fn shape_key(&self) -> Vec<u64> {
        self.counts.iter().flatten().copied().collect()
    }
}

fn positive_support(law: &OffspringLaw) -> Result<Vec<u64>, OracleError> {
    if law.support_max().is_none() {
        return Err(OracleError::UnboundedSupport(law.to_string()));
    }
    Ok(law.support().filter(|&l| law.pmf(l) > 0.0).collect())
}

/// Every distinct depth-`depth` tree with its exact GW probability.
pub fn enumerate_trees(
    law: &OffspringLaw,
    depth: usize,
    max_trees: usize,
) -> Result<Vec<EnumeratedTree>, OracleError> {
    let support = positive_support(law)?;
    let mut trees = vec![EnumeratedTree {
        counts: Vec::new(),
        z: vec![1],
        ln_prob: 0.0,
    }];
    for g in 0..depth {
        let mut extended = Vec::new();
        for tree in &trees {
            let slots = *tree.z.last().unwrap() as usize;
            let mut digits = vec![0usize; slots];
            loop {
                let assignment: Vec<u64> = digits.iter().map(|&d| support[d]).collect();
                let ln_step: f64 = assignment.iter().map(|&l| law.ln_pmf(l)).sum();
                let z_next: u64 = assignment.iter().sum();
                let mut counts = tree.counts.clone();
                counts.push(assignment);
                let mut z = tree.z.clone();
                z.push(z_next);
                extended.push(EnumeratedTree {
                    counts,
                    z,
                    ln_prob: tree.ln_prob + ln_step,
                });
                if extended.len() > max_trees {
                    return Err(OracleError::Budget {
                        depth: g + 1,
                        count: extended.len(),
                        max: max_trees,
                    });
                }
                // odometer
                let mut pos = 0;
                loop {
                    if pos == digits.len() {
                        break;
                    }
                    digits[pos] += 1;
                    if digits[pos] < support.len() {
                        break;
                    }
                    digits[pos] = 0;
                    pos += 1;
                }
                if pos == digits.len() {
                    break;
                }
            }
        }
        trees = extended;
    }
    Ok(trees)
}

/// Outcome of one oracle check, JSON-serializable by the experiment layer.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckReport {
    pub check: String,
    pub law: String,
    pub depth: usize,
    pub max_abs_error: f64,
    pub pass: bool,
}

impl CheckReport {
    fn new(check: &str, law: &OffspringLaw, depth: usize, max_abs_error: f64, tol: f64) -> Self {
        CheckReport {
            check: check.to_string(),
            law: law.to_string(),
            depth,
            max_abs_error,
            pass: max_abs_error < tol,
        }
    }
}

/// `ln` of the construction probability that the marked tree matches `tree`
/// up to its depth with the spine ending at `leaf`.
fn ln_marked_mass(
    law: &OffspringLaw,
    table: &NormingTable,
    tree: &EnumeratedTree,
    leaf: usize,
) -> f64 {
    let path = tree.path_to(leaf);
    let mut ln = 0.0;
    for (g, counts) in tree.counts.iter().enumerate() {
        let spine_here = path[g];
        for (i, &c) in counts.iter().enumerate() {
            if i == spine_here {
                // spine factor and the uniform child choice
                ln += ln_spine_mass(law, table, g, c) - (c as f64).ln();
            } else {
                ln += ln_offspine_mass(law, table, g, c);
            }
        }
    }
    ln
}

/// `ln(dM_n)` for a tree shape from the martingale formulas.
fn ln_dm(table: &NormingTable, n: usize, z_n: u64) -> f64 {
    table.x(n) + (z_n as f64).ln() - table.ln_d(n) - z_n as f64 * table.x(n)
}

/// Enumeration completeness: GW probabilities sum to 1.
pub fn verify_enumeration(
    law: &OffspringLaw,
    depth: usize,
    max_trees: usize,
) -> Result<CheckReport, OracleError> {
    let trees = enumerate_trees(law, depth, max_trees)?;
    let total: f64 = trees.iter().map(EnumeratedTree::prob).sum();
    Ok(CheckReport::new(
        "enumeration_completeness",
        law,
        depth,
        (total - 1.0).abs(),
        1e-12,
    ))
}

/// The induction identity: construction probability of each `(T, u)` pair
/// equals `(dM_n/Z_n) GW(T)`, checked in linear space.
pub fn verify_change_of_measure(
    law: &OffspringLaw,
    table: &NormingTable,
    depth: usize,
    max_trees: usize,
) -> Result<Vec<CheckReport>, OracleError> {
    table.require(depth)?;
    let trees = enumerate_trees(law, depth, max_trees)?;
    let mut max_err: f64 = 0.0;
    let mut max_sum_err: f64 = 0.0;
    let mut marked_total = 0.0;
    for tree in &trees {
        let z_n = tree.z[depth];
        let ln_rhs_per_vertex = ln_dm(table, depth, z_n) - (z_n as f64).ln() + tree.ln_prob;
        let mut tree_total = 0.0;
        for leaf in 0..z_n as usize {
            let lhs = ln_marked_mass(law, table, tree, leaf).exp();
            tree_total += lhs;
            max_err = max_err.max((lhs - ln_rhs_per_vertex.exp()).abs());
        }
        marked_total += tree_total;
        // summing over the generation: P(T_n matches) = dM_n GW(T_n)
        let rhs_sum = (ln_dm(table, depth, z_n) + tree.ln_prob).exp();
        max_sum_err = max_sum_err.max((tree_total - rhs_sum).abs());
    }
    Ok(vec![
        CheckReport::new("change_of_measure", law, depth, max_err, 1e-10),
        CheckReport::new("change_of_measure_sum", law, depth, max_sum_err, 1e-10),
        CheckReport::new(
            "marked_total_mass",
            law,
            depth,
            (marked_total - 1.0).abs(),
            1e-10,
        ),
    ])
}

/// Conditional spine location: `P(xi_n = u | tree) = 1/Z_n` exactly.
pub fn verify_uniform_conditional(
    law: &OffspringLaw,
    table: &NormingTable,
    depth: usize,
    max_trees: usize,
) -> Result<Vec<CheckReport>, OracleError> {
    table.require(depth)?;
    let trees = enumerate_trees(law, depth, max_trees)?;
    let mut max_err: f64 = 0.0;
    let mut max_norm_err: f64 = 0.0;
    for tree in &trees {
        let z_n = tree.z[depth];
        let masses: Vec<f64> = (0..z_n as usize)
            .map(|leaf| ln_marked_mass(law, table, tree, leaf).exp())
            .collect();
        let total: f64 = masses.iter().sum();
        for mass in &masses {
            max_err = max_err.max((mass / total - 1.0 / z_n as f64).abs());
        }
        let conditional_sum: f64 = masses.iter().map(|m| m / total).sum();
        max_norm_err = max_norm_err.max((conditional_sum - 1.0).abs());
    }
    Ok(vec![
        CheckReport::new("uniform_conditional", law, depth, max_err, 1e-12),
        CheckReport::new("conditional_normalization", law, depth, max_norm_err, 1e-12),
    ])
}

/// One-step martingale property over enumerated extensions: for every
/// depth-`n-1` history, `E[M_n | T] = M_{n-1}` and `E[dM_n | T] = dM_{n-1}`.
pub fn verify_martingales(
    law: &OffspringLaw,
    table: &NormingTable,
    depth: usize,
    max_trees: usize,
) -> Result<Vec<CheckReport>, OracleError> {
    table.require(depth)?;
    let support = positive_support(law)?;
    let mut max_m_err: f64 = 0.0;
    let mut max_dm_err: f64 = 0.0;
    for n in 1..=depth {
        let histories = enumerate_trees(law, n - 1, max_trees)?;
        for history in &histories {
            let z_prev = *history.z.last().unwrap();
            let slots = z_prev as usize;
            let mut e_m = 0.0;
            let mut e_dm = 0.0;
            let mut digits = vec![0usize; slots];
            loop {
                let mut ln_step = 0.0;
                let mut z_next = 0u64;
                for &d in &digits {
                    ln_step += law.ln_pmf(support[d]);
                    z_next += support[d];
                }
                let weight = ln_step.exp();
                e_m += weight * (-(z_next as f64) * table.x(n)).exp();
                e_dm += weight * ln_dm(table, n, z_next).exp();
                let mut pos = 0;
                loop {
                    if pos == digits.len() {
                        break;
                    }
                    digits[pos] += 1;
                    if digits[pos] < support.len() {
                        break;
                    }
                    digits[pos] = 0;
                    pos += 1;
                }
                if pos == digits.len() {
                    break;
                }
            }
            let m_prev = (-(z_prev as f64) * table.x(n - 1)).exp();
            let dm_prev = ln_dm(table, n - 1, z_prev).exp();
            max_m_err = max_m_err.max((e_m - m_prev).abs());
            max_dm_err = max_dm_err.max((e_dm - dm_prev).abs());
        }
    }
    Ok(vec![
        CheckReport::new("martingale_m", law, depth, max_m_err, 1e-12),
        CheckReport::new("martingale_dm", law, depth, max_dm_err, 1e-12),
    ])
}

/// Off-spine subtree law at generation `n`: the construction's product of
/// tilted masses equals `GW(subtree)` reweighted by the finite-depth density
/// `M_j(u) = e^{1/c_n} e^{-Z_j/c_{n+j}}`, and that density integrates to 1.
pub fn verify_offspine_subtree_law(
    law: &OffspringLaw,
    table: &NormingTable,
    n: usize,
    subtree_depth: usize,
    max_trees: usize,
) -> Result<Vec<CheckReport>, OracleError> {
    table.require(n + subtree_depth)?;
    let shapes = enumerate_trees(law, subtree_depth, max_trees)?;
    let mut max_err: f64 = 0.0;
    let mut density_total = 0.0;
    for shape in &shapes {
        // construction route: every sigma-level-i vertex draws the off-spine
        // tilt of generation n+i
        let mut ln_lhs = 0.0;
        for (i, counts) in shape.counts.iter().enumerate() {
            for &c in counts {
                ln_lhs += ln_offspine_mass(law, table, n + i, c);
            }
        }
        let z_j = *shape.z.last().unwrap();
        let ln_density = table.x(n) - z_j as f64 * table.x(n + subtree_depth);
        let rhs = (shape.ln_prob + ln_density).exp();
        max_err = max_err.max((ln_lhs.exp() - rhs).abs());
        density_total += rhs;
    }
    Ok(vec![
        CheckReport::new("offspine_subtree_law", law, n, max_err, 1e-10),
        CheckReport::new(
            "offspine_density_normalization",
            law,
            n,
            (density_total - 1.0).abs(),
            1e-12,
        ),
    ])
}

/// The full verification suite at one depth.
pub fn run_all(
    law: &OffspringLaw,
    table: &NormingTable,
    depth: usize,
    max_trees: usize,
) -> Result<Vec<CheckReport>, OracleError> {
    let mut reports = vec![verify_enumeration(law, depth, max_trees)?];
    reports.extend(verify_change_of_measure(law, table, depth, max_trees)?);
    reports.extend(verify_uniform_conditional(law, table, depth, max_trees)?);
    reports.extend(verify_martingales(law, table, depth, max_trees)?);
    let subtree_depth = depth.min(2).max(1);
    reports.extend(verify_offspine_subtree_law(
        law,
        table,
        1,
        subtree_depth,
        max_trees,
    )?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgf::build_norming_table;
    use crate::spine::sample_marked_tree;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::collections::HashMap;

    fn det2() -> OffspringLaw {
        OffspringLaw::deterministic(2).unwrap()
    }

    fn half_half() -> OffspringLaw {
        OffspringLaw::finite_support(&[0.5, 0.5]).unwrap()
    }

    #[test]
    fn enumeration_counts_and_completeness() {
        let one = enumerate_trees(&det2(), 3, 100).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].prob() - 1.0).abs() < 1e-15);

        let law = half_half();
        assert_eq!(enumerate_trees(&law, 1, 100).unwrap().len(), 2);
        assert_eq!(enumerate_trees(&law, 2, 100).unwrap().len(), 6);
        let depth3 = enumerate_trees(&law, 3, 1000).unwrap();
        assert_eq!(depth3.len(), 42);
        for depth in 1..=3 {
            let report = verify_enumeration(&law, depth, 1000).unwrap();
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn enumeration_budget_and_support_guards() {
        assert!(matches!(
            enumerate_trees(&half_half(), 4, 50),
            Err(OracleError::Budget { .. })
        ));
        let geo = OffspringLaw::shifted_geometric(0.5).unwrap();
        assert!(matches!(
            enumerate_trees(&geo, 2, 100),
            Err(OracleError::UnboundedSupport(_))
        ));
    }

    #[test]
    fn paths_walk_back_to_the_root() {
        let law = half_half();
        let trees = enumerate_trees(&law, 3, 1000).unwrap();
        for tree in &trees {
            for leaf in 0..tree.z[3] as usize {
                let path = tree.path_to(leaf);
                assert_eq!(path[0], 0);
                assert_eq!(path[3], leaf);
                for g in 0..3 {
                    // child index falls inside the parent's block
                    let start: u64 = tree.counts[g][..path[g]].iter().sum();
                    let end = start + tree.counts[g][path[g]];
                    assert!((path[g + 1] as u64) >= start && (path[g + 1] as u64) < end);
                }
            }
        }
    }

    #[test]
    fn deterministic_binary_depth2_mass_is_a_quarter() {
        let law = det2();
        let table = build_norming_table(&law, 0.5, 3).unwrap();
        let trees = enumerate_trees(&law, 2, 10).unwrap();
        assert_eq!(trees.len(), 1);
        for leaf in 0..4 {
            let mass = ln_marked_mass(&law, &table, &trees[0], leaf).exp();
            assert!((mass - 0.25).abs() < 1e-13, "leaf {leaf}: {mass}");
        }
        for report in verify_change_of_measure(&law, &table, 2, 10).unwrap() {
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn change_of_measure_passes_at_depth3() {
        let law = half_half();
        for s in [0.3, 0.5, 0.7] {
            let table = build_norming_table(&law, s, 4).unwrap();
            for report in verify_change_of_measure(&law, &table, 3, 1000).unwrap() {
                assert!(report.pass, "s={s}: {report:?}");
                assert!(report.max_abs_error < 1e-10);
            }
        }
    }

    #[test]
    fn uniform_conditional_is_exact() {
        let law = half_half();
        let table = build_norming_table(&law, 0.5, 4).unwrap();
        for report in verify_uniform_conditional(&law, &table, 3, 1000).unwrap() {
            assert!(report.pass, "{report:?}");
        }
        let det = det2();
        let dtable = build_norming_table(&det, 0.5, 3).unwrap();
        let reports = verify_uniform_conditional(&det, &dtable, 2, 10).unwrap();
        assert!(reports.iter().all(|r| r.pass));
    }

    #[test]
    fn martingale_one_step_expectations_are_exact() {
        let law = half_half();
        let table = build_norming_table(&law, 0.5, 3).unwrap();
        for report in verify_martingales(&law, &table, 3, 1000).unwrap() {
            assert!(report.pass, "{report:?}");
        }
        let det = det2();
        let dtable = build_norming_table(&det, 0.5, 3).unwrap();
        for report in verify_martingales(&det, &dtable, 3, 10).unwrap() {
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn offspine_subtree_density_matches_construction() {
        let law = half_half();
        let table = build_norming_table(&law, 0.5, 5).unwrap();
        for (n, j) in [(1usize, 1usize), (1, 2), (2, 2)] {
            for report in verify_offspine_subtree_law(&law, &table, n, j, 1000).unwrap() {
                assert!(report.pass, "n={n} j={j}: {report:?}");
            }
        }
        // deterministic: density is identically 1 on the single shape
        let det = det2();
        let dtable = build_norming_table(&det, 0.5, 4).unwrap();
        let shapes = enumerate_trees(&det, 2, 10).unwrap();
        let z2 = shapes[0].z[2] as f64;
        let density = (dtable.x(1) - z2 * dtable.x(3)).exp();
        assert!((density - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_marked_trees_match_enumerated_law() {
        // total-variation distance between 10^6 sampled (tree, spine) pairs
        // at depth 2 and the exact enumerated law stays below 0.01
        let law = half_half();
        let table = build_norming_table(&law, 0.5, 3).unwrap();
        let trees = enumerate_trees(&law, 2, 100).unwrap();
        let mut exact: HashMap<Vec<u64>, f64> = HashMap::new();
        for tree in &trees {
            for leaf in 0..tree.z[2] as usize {
                let mut key = tree.shape_key();
                key.push(leaf as u64);
                exact.insert(key, ln_marked_mass(&law, &table, tree, leaf).exp());
            }
        }
        let total_exact: f64 = exact.values().sum();
        assert!((total_exact - 1.0).abs() < 1e-10);

        let samples = 1_000_000u32;
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        let mut counts: HashMap<Vec<u64>, u64> = HashMap::new();
        for _ in 0..samples {
            let marked = sample_marked_tree(&law, &table, 2, 1 << 10, &mut rng).unwrap();
            *counts.entry(marked.shape_key()).or_default() += 1;
        }
        let mut tv = 0.0;
        for (key, p) in &exact {
            let emp = counts.get(key).copied().unwrap_or(0) as f64 / f64::from(samples);
            tv += (emp - p).abs();
        }
        // any sampled key outside the enumeration would be a bug
        for key in counts.keys() {
            assert!(exact.contains_key(key), "sampled unseen shape {key:?}");
        }
        tv *= 0.5;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn run_all_produces_a_full_passing_report() {
        let law = half_half();
        let table = build_norming_table(&law, 0.5, 4).unwrap();
        let reports = run_all(&law, &table, 3, DEFAULT_ENUM_BUDGET).unwrap();
        assert_eq!(reports.len(), 10);
        assert!(reports.iter().all(|r| r.pass), "{reports:#?}");
    }
}
