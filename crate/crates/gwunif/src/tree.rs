//! Plain Galton-Watson simulation, population bookkeeping, subtree-window
//! estimates `W_hat_k(u) = Z_k(u)/c_k`, and martingale traces.
//!
//! Trees are stored generation-streamed: flat per-generation arrays with
//! parent indices instead of node objects, since populations grow
//! geometrically and locality dominates. Children of consecutive vertices
//! are contiguous, so the descendant set of any vertex at any depth is an
//! index range and subtree populations are O(depth) range expansions.
//!
//! A vertex cap truncates growth breadth-first rather than failing: a
//! heavy-tailed offspring burst can exceed any budget. Truncation is
//! recorded per vertex and every downstream consumer sees the bias flag.

use rand::Rng;
use thiserror::Error;

use crate::offspring::{LawSampler, OffspringLaw};
use crate::pgf::{NormingTable, PgfError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("subtree window at generation {gen}, vertex {index} hit truncated growth")]
    Truncated { gen: usize, index: usize },
    #[error("generation {requested} beyond simulated depth {depth}")]
    DepthExceeded { requested: usize, depth: usize },
    #[error(transparent)]
    Pgf(#[from] PgfError),
}

/// One generation of a tree: per-vertex records in breadth-first order.
#[derive(Debug, Clone, Default)]
pub struct Generation {
    parent: Vec<u32>,
    nu: Vec<u64>,
    truncated: Vec<bool>,
    /// `offsets[i]` = number of materialized children of vertices `< i`.
    offsets: Vec<u32>,
    /// Prefix counts of vertices whose offspring are missing or partial.
    incomplete_prefix: Vec<u32>,
}

impl Generation {
    fn root() -> Self {
        Generation {
            parent: vec![0],
            nu: vec![0],
            truncated: vec![false],
            offsets: vec![0, 0],
            incomplete_prefix: vec![0, 1],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn parent(&self, i: usize) -> usize {
        self.parent[i] as usize
    }

    /// Drawn child count (0 when offspring were never drawn).
    pub fn nu(&self, i: usize) -> u64 {
        self.nu[i]
    }

    pub fn truncated(&self, i: usize) -> bool {
        self.truncated[i]
    }

    /// Materialized children of vertex `i` as an index range into the next
    /// generation.
    pub fn children(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i] as usize..self.offsets[i + 1] as usize
    }

    pub fn materialized_children(&self, i: usize) -> u64 {
        u64::from(self.offsets[i + 1] - self.offsets[i])
    }

    fn range_incomplete(&self, lo: usize, hi: usize) -> bool {
        self.incomplete_prefix[hi] > self.incomplete_prefix[lo]
    }

    /// Called once the offspring of every vertex in this generation are
    /// settled.
    fn seal(&mut self) {
        let n = self.len();
        self.incomplete_prefix = Vec::with_capacity(n + 1);
        self.incomplete_prefix.push(0);
        let mut acc = 0u32;
        for i in 0..n {
            if self.nu[i] == 0 || self.truncated[i] {
                acc += 1;
            }
            self.incomplete_prefix.push(acc);
        }
    }
}

/// A Galton-Watson tree (possibly cap-truncated) up to a fixed depth.
#[derive(Debug, Clone)]
pub struct GwTree {
    generations: Vec<Generation>,
}

/// Incremental breadth-first construction shared by the plain and the
/// marked-tree samplers. The caller drives one generation at a time and
/// decides each vertex's drawn offspring count; the builder owns the cap.
pub(crate) struct TreeBuilder {
    generations: Vec<Generation>,
    budget: u64,
}

impl TreeBuilder {
    pub(crate) fn new(cap: u64) -> Self {
        // parent indices and offsets are u32; anything bigger than that
        // would not fit in memory anyway
        let cap = cap.clamp(1, u64::from(u32::MAX) - 1);
        TreeBuilder {
            generations: vec![Generation::root()],
            budget: cap - 1,
        }
    }

    /// Takes `slots` vertices out of the budget up front; used to keep a
    /// spine line alive to full depth no matter what the cap does.
    pub(crate) fn reserve(&mut self, slots: u64) -> u64 {
        let granted = slots.min(self.budget);
        self.budget -= granted;
        granted
    }

    pub(crate) fn budget(&self) -> u64 {
        self.budget
    }

    pub(crate) fn last_len(&self) -> usize {
        self.generations.last().unwrap().len()
    }

    pub(crate) fn generation(&self, g: usize) -> &Generation {
        &self.generations[g]
    }

    /// Materializes the next generation. `nus[i]` is the drawn offspring
    /// count of vertex `i` in the current last generation (0 = not drawn);
    /// `guaranteed` grants vertex `i` that many child slots outside the
    /// budget. Returns the new generation size.
    pub(crate) fn push_generation(&mut self, nus: Vec<u64>, guaranteed: &[(usize, u64)]) -> usize {
        let cur = self.generations.last_mut().unwrap();
        assert_eq!(nus.len(), cur.len());
        cur.nu = nus;
        let n = cur.len();
        let mut parent: Vec<u32> = Vec::new();
        let mut offsets: Vec<u32> = Vec::with_capacity(n + 1);
        offsets.push(0);
        cur.truncated = vec![false; n];
        for i in 0..n {
            let want = cur.nu[i];
            let granted = guaranteed
                .iter()
                .find(|(v, _)| *v == i)
                .map(|(_, g)| *g)
                .unwrap_or(0);
            let extra = want.saturating_sub(granted).min(self.budget);
            self.budget -= extra;
            let take = granted.min(want) + extra;
            for _ in 0..take {
                parent.push(i as u32);
            }
            cur.truncated[i] = take < want;
            offsets.push(parent.len() as u32);
        }
        cur.offsets = offsets;
        cur.seal();
        let size = parent.len();
        let next = Generation {
            nu: vec![0; size],
            truncated: vec![false; size],
            offsets: vec![0; size + 1],
            incomplete_prefix: (0..=size as u32).collect(),
            parent,
        };
        self.generations.push(next);
        size
    }

    pub(crate) fn finish(self) -> GwTree {
        GwTree {
            generations: self.generations,
        }
    }
}

/// Simulates a plain Galton-Watson tree: i.i.d. offspring per vertex,
/// breadth-first truncation once `cap` vertices are materialized.
pub fn simulate_gw<R: Rng + ?Sized>(
    law: &OffspringLaw,
    depth: usize,
    cap: u64,
    rng: &mut R,
) -> GwTree {
    let mut sampler = LawSampler::new(law);
    let mut builder = TreeBuilder::new(cap);
    for _ in 0..depth {
        let n = builder.last_len();
        let mut nus = vec![0u64; n];
        let mut intended = 0u64;
        for slot in nus.iter_mut() {
            // vertices past the point where the budget runs out could not
            // materialize a single child; leave their offspring undrawn
            if intended >= builder.budget() {
                break;
            }
            let nu = sampler.sample(rng);
            *slot = nu;
            intended = intended.saturating_add(nu);
        }
        // a fully capped generation still pads the tree to the requested
        // depth so per-generation consumers see a fixed shape
        builder.push_generation(nus, &[]);
    }
    builder.finish()
}

/// Population sizes only, no tree storage; the cheap path for martingale
/// Monte Carlo at scale. The running population is clamped at `cap`.
pub fn simulate_populations<R: Rng + ?Sized>(
    law: &OffspringLaw,
    depth: usize,
    cap: u64,
    rng: &mut R,
) -> Vec<u64> {
    let mut sampler = LawSampler::new(law);
    let mut z = Vec::with_capacity(depth + 1);
    z.push(1u64);
    for _ in 0..depth {
        let cur = *z.last().unwrap();
        let mut next = 0u64;
        for _ in 0..cur {
            next = next.saturating_add(sampler.sample(rng));
            if next >= cap {
                next = cap;
                break;
            }
        }
        z.push(next);
    }
    z
}

impl GwTree {
    /// Builds an untruncated tree from explicit child counts:
    /// `counts[g][i]` is the offspring count of vertex `i` at generation `g`.
    ///
    /// Panics when the shape is inconsistent (the root generation must have
    /// one vertex and `counts[g+1].len()` must equal `sum(counts[g])`).
    pub fn from_counts(counts: &[Vec<u64>]) -> GwTree {
        assert!(!counts.is_empty(), "need at least the root generation");
        assert_eq!(counts[0].len(), 1, "generation 0 has exactly the root");
        let mut builder = TreeBuilder::new(u64::MAX);
        for (g, gen_counts) in counts.iter().enumerate() {
            assert_eq!(
                gen_counts.len(),
                builder.last_len(),
                "generation {g} count vector has the wrong length"
            );
            assert!(
                gen_counts.iter().all(|&c| c > 0),
                "offspring counts must be positive"
            );
            builder.push_generation(gen_counts.clone(), &[]);
        }
        builder.finish()
    }

    pub fn depth(&self) -> usize {
        self.generations.len() - 1
    }

    /// Materialized population at generation `n`.
    pub fn z(&self, n: usize) -> u64 {
        self.generations[n].len() as u64
    }

    pub fn populations(&self) -> Vec<u64> {
        self.generations.iter().map(|g| g.len() as u64).collect()
    }

    pub fn generation(&self, n: usize) -> &Generation {
        &self.generations[n]
    }

    pub fn any_truncation(&self) -> bool {
        self.generations
            .iter()
            .any(|g| g.truncated.iter().any(|&t| t))
    }

    fn require_depth(&self, n: usize) -> Result<(), TreeError> {
        if n > self.depth() {
            Err(TreeError::DepthExceeded {
                requested: n,
                depth: self.depth(),
            })
        } else {
            Ok(())
        }
    }

    /// Descendants at depth `k` below the vertex range `[lo, hi)` of
    /// generation `gen`, plus whether the count is exact (no truncated or
    /// undrawn offspring anywhere along the window).
    pub(crate) fn range_population(
        &self,
        gen: usize,
        lo: usize,
        hi: usize,
        k: usize,
    ) -> (u64, bool) {
        let mut lo = lo;
        let mut hi = hi;
        let mut exact = true;
        for step in 0..k {
            let g = &self.generations[gen + step];
            if g.range_incomplete(lo, hi) {
                exact = false;
            }
            lo = g.offsets[lo] as usize;
            hi = g.offsets[hi] as usize;
        }
        ((hi - lo) as u64, exact)
    }

    /// `Z_k(u)`: number of descendants of `u` exactly `k` levels below.
    /// Errors when the window was capped anywhere.
    pub fn subtree_population(&self, gen: usize, index: usize, k: usize) -> Result<u64, TreeError> {
        self.require_depth(gen + k)?;
        let (count, exact) = self.range_population(gen, index, index + 1, k);
        if exact {
            Ok(count)
        } else {
            Err(TreeError::Truncated { gen, index })
        }
    }

    /// `Z_k(u)` with an exactness flag instead of an error.
    pub fn subtree_population_lenient(&self, gen: usize, index: usize, k: usize) -> (u64, bool) {
        if gen + k > self.depth() {
            return (0, false);
        }
        self.range_population(gen, index, index + 1, k)
    }

    /// Finite-horizon Seneta-Heyde estimate `W_hat_k(u) = Z_k(u)/c_k`.
    pub fn estimate_w(
        &self,
        gen: usize,
        index: usize,
        table: &NormingTable,
        k: usize,
    ) -> Result<f64, TreeError> {
        table.require(k)?;
        let z = self.subtree_population(gen, index, k)?;
        Ok(z as f64 * table.x(k))
    }

    /// Per-generation `M_n = e^{-Z_n/c_n}`, `dM_n = e^{1/c_n} (Z_n/D_n) M_n`,
    /// and `W_hat_n = Z_n/c_n`.
    pub fn martingale_trace(&self, table: &NormingTable) -> Result<MartingaleTrace, TreeError> {
        table.require(self.depth())?;
        let rows = (0..=self.depth())
            .map(|n| {
                let z = self.z(n) as f64;
                let x = table.x(n);
                MartingaleRow {
                    n,
                    m: (-z * x).exp(),
                    dm: z * (x - table.ln_d(n) - z * x).exp(),
                    w_hat: z * x,
                }
            })
            .collect();
        Ok(MartingaleTrace { rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MartingaleRow {
    pub n: usize,
    /// `M_n = phi_n^{-1}(s)^{Z_n} = e^{-Z_n/c_n}`, in (0, 1).
    pub m: f64,
    /// Derivative martingale `dM_n`.
    pub dm: f64,
    /// `W_hat_n = Z_n/c_n`.
    pub w_hat: f64,
}

#[derive(Debug, Clone)]
pub struct MartingaleTrace {
    rows: Vec<MartingaleRow>,
}

impl MartingaleTrace {
    pub fn rows(&self) -> &[MartingaleRow] {
        &self.rows
    }

    pub fn row(&self, n: usize) -> MartingaleRow {
        self.rows[n]
    }
}

/// Operational envelope for the derivative martingale:
/// `dM_n <= e^{1/c_0} e^{-1} max_{j<=n}(c_j/D_j)`, from `x e^{-x} <= 1/e`.
pub fn derivative_martingale_bound(table: &NormingTable, depth: usize) -> f64 {
    let mut max_ratio: f64 = 0.0;
    for j in 0..=depth.min(table.horizon()) {
        max_ratio = max_ratio.max((-table.x(j).ln() - table.ln_d(j)).exp());
    }
    (table.x(0) - 1.0).exp() * max_ratio
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgf::build_norming_table;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::LN_2;

    fn det2() -> OffspringLaw {
        OffspringLaw::deterministic(2).unwrap()
    }

    fn geo_half() -> OffspringLaw {
        OffspringLaw::shifted_geometric(0.5).unwrap()
    }

    #[test]
    fn deterministic_populations_are_powers() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let tree = simulate_gw(&det2(), 4, 1 << 20, &mut rng);
        assert_eq!(tree.populations(), vec![1, 2, 4, 8, 16]);
        assert!(!tree.any_truncation());
    }

    #[test]
    fn one_step_split_is_fair() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let law = OffspringLaw::finite_support(&[0.5, 0.5]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let runs = 10_000u64;
        let mut ones = 0u64;
        for _ in 0..runs {
            let tree = simulate_gw(&law, 1, 16, &mut rng);
            match tree.z(1) {
                1 => ones += 1,
                2 => {}
                z => panic!("unexpected Z_1 = {z}"),
            }
        }
        let e = runs as f64 / 2.0;
        let stat = (ones as f64 - e).powi(2) / e + ((runs - ones) as f64 - e).powi(2) / e;
        let crit = ChiSquared::new(1.0).unwrap().inverse_cdf(1.0 - 1e-3);
        assert!(stat < crit, "chi-square {stat} >= {crit}");
    }

    #[test]
    fn geometric_population_mean_matches_m_to_the_n() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let replicas = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..replicas {
            let z = simulate_populations(&geo_half(), 10, 1 << 24, &mut rng);
            let z10 = z[10] as f64;
            sum += z10;
            sumsq += z10 * z10;
        }
        let mean = sum / replicas as f64;
        let var = (sumsq / replicas as f64 - mean * mean).max(0.0);
        let se = (var / replicas as f64).sqrt();
        assert!(
            (mean - 1024.0).abs() < 5.0 * se,
            "mean {mean} not within 5 se ({se}) of 1024"
        );
    }

    #[test]
    fn subtree_populations_partition_generations() {
        // deterministic: any vertex at any height has 2^k descendants
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let tree = simulate_gw(&det2(), 6, 1 << 20, &mut rng);
        assert_eq!(tree.subtree_population(2, 3, 3).unwrap(), 8);
        assert_eq!(
            tree.subtree_population(0, 0, 6).unwrap(),
            tree.z(6),
            "root subtree is the whole generation"
        );

        // random trees: sum over |u| = n of Z_k(u) equals Z_{n+k} exactly
        for seed in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let tree = simulate_gw(&geo_half(), 9, 1 << 22, &mut rng);
            assert!(!tree.any_truncation());
            for (n, k) in [(1usize, 2usize), (3, 4), (2, 7)] {
                let total: u64 = (0..tree.z(n) as usize)
                    .map(|i| tree.subtree_population(n, i, k).unwrap())
                    .sum();
                assert_eq!(total, tree.z(n + k));
            }
        }
    }

    #[test]
    fn truncation_is_flagged_and_propagates() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let tree = simulate_gw(&det2(), 8, 40, &mut rng);
        assert!(tree.any_truncation());
        assert!(tree.z(8) < 256);
        let err = tree.subtree_population(0, 0, 8);
        assert!(matches!(err, Err(TreeError::Truncated { .. })));
        let (count, exact) = tree.subtree_population_lenient(0, 0, 8);
        assert!(!exact);
        assert_eq!(count, tree.z(8));
        assert!(matches!(
            tree.subtree_population(0, 0, 9),
            Err(TreeError::DepthExceeded { .. })
        ));
    }

    #[test]
    fn estimate_w_deterministic_is_ln2_at_every_horizon() {
        let law = det2();
        let table = build_norming_table(&law, 0.5, 12).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let tree = simulate_gw(&law, 10, 1 << 20, &mut rng);
        for (gen, idx, k) in [(0usize, 0usize, 4usize), (3, 5, 7), (6, 63, 2)] {
            let w = tree.estimate_w(gen, idx, &table, k).unwrap();
            assert!((w - LN_2).abs() < 1e-12, "got {w}");
        }
    }

    #[test]
    fn root_w_hat_is_minus_log_m() {
        let law = geo_half();
        let table = build_norming_table(&law, 0.5, 12).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let tree = simulate_gw(&law, 12, 1 << 22, &mut rng);
        let trace = tree.martingale_trace(&table).unwrap();
        for k in [3usize, 8, 12] {
            let w = tree.estimate_w(0, 0, &table, k).unwrap();
            let row = trace.row(k);
            assert!((w - row.w_hat).abs() < 1e-12);
            assert!((-(row.m.ln()) - w).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_martingales_are_constant() {
        let law = det2();
        let table = build_norming_table(&law, 0.5, 10).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let tree = simulate_gw(&law, 10, 1 << 20, &mut rng);
        let trace = tree.martingale_trace(&table).unwrap();
        for row in trace.rows() {
            assert!((row.m - 0.5).abs() < 1e-12, "M_{} = {}", row.n, row.m);
            assert!((row.dm - 1.0).abs() < 1e-12, "dM_{} = {}", row.n, row.dm);
            assert!((row.w_hat - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_law_one_step_martingale_mean_is_s() {
        // E[M_1] = q_1 t + q_2 t^2 with t = phi_1^{-1}(s): equals s exactly
        let law = OffspringLaw::finite_support(&[0.5, 0.5]).unwrap();
        for s in [0.3, 0.5, 0.7] {
            let table = build_norming_table(&law, s, 1).unwrap();
            let t = (-table.x(1)).exp();
            let expected = 0.5 * t + 0.5 * t * t;
            assert!((expected - s).abs() < 1e-13);
        }
    }

    #[test]
    fn monte_carlo_martingale_mean_stays_at_s() {
        let law = geo_half();
        let s = 0.5;
        let table = build_norming_table(&law, s, 6).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let replicas = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..replicas {
            let z = simulate_populations(&law, 6, 1 << 22, &mut rng);
            let m = (-(z[6] as f64) * table.x(6)).exp();
            sum += m;
            sumsq += m * m;
        }
        let mean = sum / replicas as f64;
        let var = (sumsq / replicas as f64 - mean * mean).max(0.0);
        let se = (var / replicas as f64).sqrt();
        assert!(
            (mean - s).abs() < 4.0 * se,
            "E[M_6] = {mean}, se {se}, want {s}"
        );
    }

    #[test]
    fn derivative_martingale_respects_operational_bound() {
        for law in [geo_half(), OffspringLaw::dyadic_power_log(2.0).unwrap()] {
            let table = build_norming_table(&law, 0.5, 14).unwrap();
            let bound = derivative_martingale_bound(&table, 14);
            let mut rng = ChaCha12Rng::seed_from_u64(29);
            for _ in 0..200 {
                let tree = simulate_gw(&law, 14, 1 << 22, &mut rng);
                let trace = tree.martingale_trace(&table).unwrap();
                for row in trace.rows() {
                    assert!(
                        row.dm <= bound * (1.0 + 1e-12),
                        "dM_{} = {} exceeds bound {bound}",
                        row.n,
                        row.dm
                    );
                }
            }
        }
    }

    #[test]
    fn from_counts_builds_exact_trees() {
        let tree = GwTree::from_counts(&[vec![2], vec![1, 3]]);
        assert_eq!(tree.populations(), vec![1, 2, 4]);
        assert_eq!(tree.generation(1).nu(1), 3);
        assert_eq!(tree.generation(1).children(1), 1..4);
        assert_eq!(tree.generation(2).parent(3), 1);
        assert!(!tree.any_truncation());
        assert_eq!(tree.subtree_population(1, 1, 1).unwrap(), 3);
    }
}
