//! Generation-dependent tilted offspring laws and the marked-tree sampler.
//!
//! A marked tree is a tree plus a distinguished ray (the spine). Conditional
//! on the first `k` generations and the spine location, the construction
//! draws independently:
//!
//! * spine vertex: `P(nu(xi_k) = l) = q_l l exp(-(l-1)/c_{k+1}) D_k/D_{k+1}`
//! * any other generation-`k` vertex: `P(nu(u) = l) = q_l e^{1/c_k} e^{-l/c_{k+1}}`
//! * the next spine vertex is uniform among the children of `xi_k`.
//!
//! Both tilts are evaluated in log space from the shared [`NormingTable`];
//! nothing is recomputed inside the samplers. As `k` grows the spine law
//! converges pointwise to the classical size-biased law `l q_l / m`.

use rand::Rng;
use thiserror::Error;

use crate::offspring::OffspringLaw;
use crate::pgf::{NormingTable, PgfError};
use crate::tree::{GwTree, TreeBuilder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpineError {
    #[error(transparent)]
    Pgf(#[from] PgfError),
    #[error("vertex cap {cap} cannot hold a depth-{depth} spine")]
    CapTooSmall { cap: u64, depth: usize },
}

/// Which of the two tilted laws of the construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiltKind {
    Spine,
    OffSpine,
}

pub(crate) fn ln_spine_mass(law: &OffspringLaw, table: &NormingTable, k: usize, l: u64) -> f64 {
    law.ln_pmf(l) + (l as f64).ln() - (l - 1) as f64 * table.x(k + 1) + table.ln_d(k)
        - table.ln_d(k + 1)
}

pub(crate) fn ln_offspine_mass(law: &OffspringLaw, table: &NormingTable, k: usize, l: u64) -> f64 {
    law.ln_pmf(l) + table.x(k) - l as f64 * table.x(k + 1)
}

/// Spine offspring mass `q~^s_l` at generation `k`.
pub fn spine_law(
    law: &OffspringLaw,
    table: &NormingTable,
    k: usize,
    l: u64,
) -> Result<f64, SpineError> {
    table.require(k + 1)?;
    if l == 0 || law.pmf(l) == 0.0 {
        return Ok(0.0);
    }
    Ok(ln_spine_mass(law, table, k, l).exp())
}

/// Off-spine offspring mass `q~_l` at generation `k`.
pub fn offspine_law(
    law: &OffspringLaw,
    table: &NormingTable,
    k: usize,
    l: u64,
) -> Result<f64, SpineError> {
    table.require(k + 1)?;
    if l == 0 || law.pmf(l) == 0.0 {
        return Ok(0.0);
    }
    Ok(ln_offspine_mass(law, table, k, l).exp())
}

/// Total tilted mass summed over the support with its analytic tail bound;
/// `total + tail_bound` brackets 1 when the tilt is consistent.
#[derive(Debug, Clone, Copy)]
pub struct MassTotal {
    pub total: f64,
    pub tail_bound: f64,
}

/// Sums the tilted law at generation `k` over the support until the analytic
/// tail bound drops below 1e-13.
pub fn tilted_mass_total(
    law: &OffspringLaw,
    table: &NormingTable,
    k: usize,
    kind: TiltKind,
) -> Result<MassTotal, SpineError> {
    table.require(k + 1)?;
    let x_next = table.x(k + 1);
    let mut total = 0.0;
    let mut tail = f64::INFINITY;
    for pt in law.support() {
        let mass = match kind {
            TiltKind::Spine => spine_law(law, table, k, pt)?,
            TiltKind::OffSpine => offspine_law(law, table, k, pt)?,
        };
        total += mass;
        tail = match kind {
            // sum_{l > L} l q_l e^{-(l-1)x} ratio <= ratio e^{-Lx} tail_mean(L)
            TiltKind::Spine => {
                (table.ln_d(k) - table.ln_d(k + 1) - pt as f64 * x_next).exp()
                    * law.tail_mean_bound_after(pt)
            }
            // sum_{l > L} q_l e^{x_k - l x} <= e^{x_k -(L+1)x} tail_mass(L)
            TiltKind::OffSpine => {
                (table.x(k) - (pt + 1) as f64 * x_next).exp() * law.tail_mass_bound_after(pt)
            }
        };
        if tail < 1e-13 {
            break;
        }
    }
    Ok(MassTotal {
        total,
        tail_bound: tail,
    })
}

/// Exact inverse-CDF sampler for a tilted law at a fixed generation, with
/// lazily extended prefix sums; the exponential tilt makes the tail
/// summable, so extension always terminates.
pub struct TiltedSampler<'a> {
    law: &'a OffspringLaw,
    table: &'a NormingTable,
    k: usize,
    kind: TiltKind,
    support: crate::offspring::SupportIter<'a>,
    points: Vec<u64>,
    cum: Vec<f64>,
    stalled: u32,
}

impl<'a> TiltedSampler<'a> {
    pub fn new(
        law: &'a OffspringLaw,
        table: &'a NormingTable,
        k: usize,
        kind: TiltKind,
    ) -> Result<Self, SpineError> {
        table.require(k + 1)?;
        Ok(TiltedSampler {
            law,
            table,
            k,
            kind,
            support: law.support(),
            points: Vec::new(),
            cum: Vec::new(),
            stalled: 0,
        })
    }

    fn mass(&self, l: u64) -> f64 {
        if self.law.pmf(l) == 0.0 {
            return 0.0;
        }
        match self.kind {
            TiltKind::Spine => ln_spine_mass(self.law, self.table, self.k, l).exp(),
            TiltKind::OffSpine => ln_offspine_mass(self.law, self.table, self.k, l).exp(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> u64 {
        self.quantile(1.0 - rng.gen::<f64>())
    }

    pub fn quantile(&mut self, u: f64) -> u64 {
        while self.cum.last().copied().unwrap_or(0.0) < u {
            match self.support.next() {
                Some(pt) => {
                    let mass = self.mass(pt);
                    let next = self.cum.last().copied().unwrap_or(0.0) + mass;
                    self.points.push(pt);
                    self.cum.push(next);
                    if mass < f64::EPSILON {
                        self.stalled += 1;
                        if self.stalled > 128 {
                            return *self.points.last().unwrap();
                        }
                    } else {
                        self.stalled = 0;
                    }
                }
                None => return *self.points.last().expect("tilted law has empty support"),
            }
        }
        let pos = self.cum.partition_point(|&c| c < u);
        self.points[pos.min(self.points.len() - 1)]
    }
}

/// One draw from the spine law at generation `k`.
pub fn sample_spine_children<R: Rng + ?Sized>(
    law: &OffspringLaw,
    table: &NormingTable,
    k: usize,
    rng: &mut R,
) -> Result<u64, SpineError> {
    Ok(TiltedSampler::new(law, table, k, TiltKind::Spine)?.sample(rng))
}

/// The spine offspring sequence `nu(xi_0), ..., nu(xi_{depth-1})` alone,
/// without growing any tree. This is all the burst diagnostics need.
pub fn sample_spine_nu_sequence<R: Rng + ?Sized>(
    law: &OffspringLaw,
    table: &NormingTable,
    depth: usize,
    rng: &mut R,
) -> Result<Vec<u64>, SpineError> {
    let mut out = Vec::with_capacity(depth);
    for k in 0..depth {
        let mut sampler = TiltedSampler::new(law, table, k, TiltKind::Spine)?;
        out.push(sampler.sample(rng));
    }
    Ok(out)
}

/// A tree together with its spine `xi_0 = root, xi_1, ...` and the exact
/// drawn spine offspring counts (which survive even when the vertex cap
/// truncates sibling materialization).
#[derive(Debug, Clone)]
pub struct MarkedTree {
    tree: GwTree,
    spine: Vec<u32>,
    spine_nu: Vec<u64>,
}

impl MarkedTree {
    pub fn tree(&self) -> &GwTree {
        &self.tree
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    /// Index of `xi_n` within generation `n`.
    pub fn spine_index(&self, n: usize) -> usize {
        self.spine[n] as usize
    }

    /// Exact drawn `nu(xi_n)`, `n < depth`.
    pub fn spine_nu(&self, n: usize) -> u64 {
        self.spine_nu[n]
    }

    /// `|H(xi_n)| = nu(xi_n) - 1`.
    pub fn sibling_count(&self, n: usize) -> u64 {
        self.spine_nu[n] - 1
    }

    /// Materialized sibling indices in generation `n+1` (excludes the spine
    /// child; may be fewer than `sibling_count` under truncation).
    pub fn siblings(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        let spine_child = self.spine[n + 1] as usize;
        self.tree
            .generation(n)
            .children(self.spine_index(n))
            .filter(move |&i| i != spine_child)
    }

    /// `Z_k(xi_n)` with exactness flag.
    pub fn spine_subtree_population(&self, n: usize, k: usize) -> (u64, bool) {
        self.tree
            .subtree_population_lenient(n, self.spine_index(n), k)
    }

    /// `sum_{u in H(xi_n)} Z_k(u)` with exactness flag.
    pub fn sibling_population(&self, n: usize, k: usize) -> (u64, bool) {
        if n + 1 + k > self.tree.depth() {
            return (0, false);
        }
        let gen = self.tree.generation(n);
        let si = self.spine_index(n);
        let ch = gen.children(si);
        let (total, ex_total) = self.tree.range_population(n + 1, ch.start, ch.end, k);
        let sc = self.spine_index(n + 1);
        let (spine_part, ex_spine) = self.tree.range_population(n + 1, sc, sc + 1, k);
        (
            total - spine_part,
            ex_total && ex_spine && !gen.truncated(si),
        )
    }

    /// Flat canonical encoding (per-generation offspring counts, then the
    /// final spine index); two marked trees are equal in law iff their keys
    /// match at the compared depth.
    pub fn shape_key(&self) -> Vec<u64> {
        let mut key = Vec::new();
        for n in 0..self.depth() {
            let gen = self.tree.generation(n);
            for i in 0..gen.len() {
                key.push(gen.nu(i));
            }
        }
        key.push(self.spine[self.depth()] as u64);
        key
    }
}

/// Samples a marked tree to `depth` with unbounded sibling growth (up to the
/// vertex cap).
pub fn sample_marked_tree<R: Rng + ?Sized>(
    law: &OffspringLaw,
    table: &NormingTable,
    depth: usize,
    cap: u64,
    rng: &mut R,
) -> Result<MarkedTree, SpineError> {
    sample_marked_tree_windowed(law, table, depth, None, cap, rng)
}

/// Samples a marked tree to `depth`, growing each off-spine subtree hanging
/// at the spine only `sibling_window` generations deep (statistics at
/// horizon `k` need exactly `sibling_window = k`). The spine line itself is
/// never truncated: one child slot per generation is reserved outside the
/// cap, and when the cap bites inside a generation the remaining vertices
/// keep truncation flags.
pub fn sample_marked_tree_windowed<R: Rng + ?Sized>(
    law: &OffspringLaw,
    table: &NormingTable,
    depth: usize,
    sibling_window: Option<usize>,
    cap: u64,
    rng: &mut R,
) -> Result<MarkedTree, SpineError> {
    table.require(depth)?;
    let mut builder = TreeBuilder::new(cap);
    if builder.reserve(depth as u64) < depth as u64 {
        return Err(SpineError::CapTooSmall { cap, depth });
    }
    let mut spine: Vec<u32> = vec![0];
    let mut spine_nu: Vec<u64> = Vec::with_capacity(depth);
    // remaining growth depth per off-spine vertex of the current generation
    let mut windows: Vec<usize> = vec![0];

    for k in 0..depth {
        let n = builder.last_len();
        let si = spine[k] as usize;
        let mut spine_sampler = TiltedSampler::new(law, table, k, TiltKind::Spine)?;
        let mut off_sampler = TiltedSampler::new(law, table, k, TiltKind::OffSpine)?;

        // one canonical pass: offspring counts in vertex order, then the
        // uniform spine-child choice
        let mut nus = vec![0u64; n];
        let mut intended = 0u64;
        for i in 0..n {
            if i == si {
                let nu = spine_sampler.sample(rng);
                nus[i] = nu;
                spine_nu.push(nu);
                intended = intended.saturating_add(nu);
            } else if windows[i] > 0 && intended < builder.budget() {
                let nu = off_sampler.sample(rng);
                nus[i] = nu;
                intended = intended.saturating_add(nu);
            }
        }
        let nu_spine = nus[si];
        let pick = rng.gen_range(0..nu_spine) as usize;

        builder.push_generation(nus, &[(si, 1)]);

        // locate the spine child among the materialized children of xi_k; a
        // pick past a truncated block clamps to the last slot (siblings are
        // exchangeable, so any materialized slot is equivalent in law)
        let children = builder.generation(k).children(si);
        debug_assert!(!children.is_empty());
        let spine_child = children.start + pick.min(children.len() - 1);
        spine.push(spine_child as u32);

        let new_gen = builder.generation(k + 1);
        let mut next_windows = vec![0usize; new_gen.len()];
        for (idx, w) in next_windows.iter_mut().enumerate() {
            let p = new_gen.parent(idx);
            if idx == spine_child {
                continue;
            }
            *w = if p == si {
                sibling_window.unwrap_or(depth)
            } else {
                windows[p].saturating_sub(1)
            };
        }
        windows = next_windows;
    }

    Ok(MarkedTree {
        tree: builder.finish(),
        spine,
        spine_nu,
    })
}
