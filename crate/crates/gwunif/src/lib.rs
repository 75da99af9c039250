//! Galton-Watson trees normed the Seneta-Heyde way, size-biased spine
//! decompositions, and the uniform (branching) measure on the tree boundary.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`offspring`] — offspring-law families with exact pmf/cdf evaluation,
//!   analytic tail bounds, and exact inverse-CDF sampling. Includes a
//!   heavy-tailed dyadic power-log family with `E[nu ln nu] = inf`.
//! * [`pgf`] — generating-function iteration in log scale and the norming
//!   table `c_n = -1/ln(phi_n^{-1}(s))` together with the derivative products
//!   `D_n = phi_n'(phi_n^{-1}(s))`.
//! * [`spine`] — the generation-dependent tilted offspring laws of the
//!   change of measure and the marked-tree sampler (tree plus distinguished
//!   ray).
//! * [`tree`] — plain Galton-Watson simulation, subtree populations, and the
//!   martingale traces `M_n`, `dM_n`, `W_hat_n = Z_n/c_n`.
//! * [`measure`] — uniform-measure cylinder weights, Holder-exponent
//!   trajectories along rays, offspring-burst scans, and the divergence-sum
//!   diagnostic that separates `E[nu ln nu] < inf` laws from the rest.
//! * [`oracle`] — exhaustive small-depth enumeration for finite-support laws
//!   and exact verification of the change-of-measure identities.
//! * [`experiment`] — seeded, replica-deterministic experiment runners with
//!   CSV/JSON emission; the CLI and the browser demo are thin layers over it.

pub mod experiment;
pub mod measure;
pub mod offspring;
pub mod oracle;
pub mod pgf;
pub mod spine;
pub mod tree;

pub use experiment::ExperimentConfig;
pub use measure::{TrajectoryEntry, TrajectoryRecord};
pub use offspring::{LawError, OffspringLaw};
pub use pgf::{NormingTable, PgfError};
pub use spine::MarkedTree;
pub use tree::{GwTree, MartingaleTrace};

/// Version string embedded in every emitted artifact for provenance.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
