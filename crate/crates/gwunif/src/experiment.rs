//! Reproducible experiment runners: seeded replica streams, norming-table
//! CSV, spine-trajectory CSV and summary JSON, burst diagnostics, and the
//! verification suite, all with embedded config provenance.
//!
//! Replica `i` draws from a ChaCha12 stream obtained by seeding with the
//! master seed and selecting stream id `i`. Streams are independent of each
//! other and of worker scheduling, so results merge in replica order and
//! repeated runs are byte-identical regardless of the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{
    burst_partial_sums, growth_summary, holder_trajectory, quantile, spine_burst_prob,
    MeasureError, TrajectoryRecord,
};
use crate::offspring::{LawError, OffspringLaw};
use crate::oracle::{self, CheckReport, OracleError};
use crate::pgf::{build_norming_table, NormingTable, PgfError};
use crate::spine::{sample_marked_tree_windowed, sample_spine_nu_sequence, SpineError};
use crate::tree::{simulate_gw, TreeError};
use crate::ARTIFACT_VERSION;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Law(#[from] LawError),
    #[error(transparent)]
    Pgf(#[from] PgfError),
    #[error(transparent)]
    Spine(#[from] SpineError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config file: {0}")]
    ConfigFile(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Everything an experiment needs; serializable so runs can be described by
/// a JSON manifest and reproduced exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Law spec string, e.g. `geometric:p=0.5` or `dyadic:m=2`.
    pub law: String,
    /// Optional comparison law for two-family diagnostics.
    pub law2: Option<String>,
    /// Fixed parameter of the norming, in (0, 1).
    pub s: f64,
    /// Trajectory length / table depth, per subcommand.
    pub depth: usize,
    /// Estimation horizon for `W_hat`.
    pub horizon: usize,
    /// Vertex cap per replica.
    pub cap: u64,
    pub replicas: u64,
    pub seed: u64,
    /// Burst window lower base.
    pub a: f64,
    /// Burst window upper base; 0 means auto (`min(1.9, 0.95 m)`).
    pub b: f64,
    pub format: OutputFormat,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            law: "geometric:p=0.5".to_string(),
            law2: None,
            s: 0.5,
            depth: 20,
            horizon: 5,
            cap: 10_000_000,
            replicas: 100,
            seed: 1,
            a: 1.2,
            b: 0.0,
            format: OutputFormat::Csv,
        }
    }
}

impl ExperimentConfig {
    pub fn law(&self) -> Result<OffspringLaw, LawError> {
        self.law.parse()
    }

    pub fn law2(&self) -> Result<Option<OffspringLaw>, LawError> {
        self.law2.as_deref().map(str::parse).transpose()
    }

    /// Burst window with the auto default `b = min(1.9, 0.95 m)` resolved.
    pub fn burst_window(&self, mean: f64) -> (f64, f64) {
        let b = if self.b > 0.0 {
            self.b
        } else {
            (0.95 * mean).min(1.9)
        };
        (self.a, b)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(ExperimentError::Config(format!(
                "s must lie in (0,1), got {}",
                self.s
            )));
        }
        if self.replicas == 0 {
            return Err(ExperimentError::Config("replicas must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(ExperimentError::Config("depth must be >= 1".into()));
        }
        Ok(())
    }

    fn provenance_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    fn csv_header(&self, kind: &str) -> String {
        format!(
            "# gwunif {ARTIFACT_VERSION} {kind}\n# config {}\n",
            self.provenance_json()
        )
    }
}

/// The documented seed-splitting rule: master seed, stream id = replica.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Norming-table CSV (`n,x,c,lnD,c_ratio,D_ratio`) with provenance header.
pub fn norming_csv(config: &ExperimentConfig) -> Result<String, ExperimentError> {
    config.validate()?;
    let law = config.law()?;
    let table = build_norming_table(&law, config.s, config.depth)?;
    Ok(config.csv_header("norming") + &table.to_csv())
}

/// One spine-trajectory replica: a windowed marked tree deep enough for
/// `depth` entries at horizon `horizon`, plus the filled record.
pub fn spine_replica(
    config: &ExperimentConfig,
    law: &OffspringLaw,
    table: &NormingTable,
    replica: u64,
) -> Result<TrajectoryRecord, ExperimentError> {
    let mut rng = replica_rng(config.seed, replica);
    let total_depth = config.depth + config.horizon + 1;
    let marked = sample_marked_tree_windowed(
        law,
        table,
        total_depth,
        Some(config.horizon),
        config.cap,
        &mut rng,
    )?;
    let window = config.burst_window(law.mean());
    Ok(holder_trajectory(
        &marked,
        table,
        config.depth,
        config.horizon,
        Some(window),
    )?)
}

/// Builds the shared law and table for spine runs.
pub fn spine_inputs(
    config: &ExperimentConfig,
) -> Result<(OffspringLaw, NormingTable), ExperimentError> {
    config.validate()?;
    let law = config.law()?;
    let table = build_norming_table(&law, config.s, config.depth + config.horizon + 2)?;
    Ok((law, table))
}

/// All replicas, serially. Callers that parallelize map `spine_replica`
/// over `0..replicas` themselves and keep replica order when merging.
pub fn spine_records(config: &ExperimentConfig) -> Result<Vec<TrajectoryRecord>, ExperimentError> {
    let (law, table) = spine_inputs(config)?;
    (0..config.replicas)
        .map(|r| spine_replica(config, &law, &table, r))
        .collect()
}

/// Trajectory CSV: `replica,n,nu_spine,z_n,w_hat_spine,truncated`.
pub fn trajectory_csv(config: &ExperimentConfig, records: &[TrajectoryRecord]) -> String {
    let mut out = config.csv_header("spine");
    out.push_str("replica,n,nu_spine,z_n,w_hat_spine,truncated\n");
    for (replica, record) in records.iter().enumerate() {
        for e in &record.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                replica,
                e.n,
                e.nu_spine,
                e.z_n,
                e.w_spine,
                u8::from(!e.exact)
            ));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct QuantileBlock {
    pub p10: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
}

fn quantile_block(values: &[f64]) -> QuantileBlock {
    QuantileBlock {
        p10: quantile(values, 0.10),
        p25: quantile(values, 0.25),
        p50: quantile(values, 0.50),
        p75: quantile(values, 0.75),
        p90: quantile(values, 0.90),
    }
}

/// Summary JSON for a spine experiment: quantiles of the final Holder
/// estimate and of the running-max growth estimate, burst counts, and the
/// exact divergence partial sums for the same window.
#[derive(Debug, Clone, Serialize)]
pub struct SpineSummary {
    pub version: String,
    pub config: ExperimentConfig,
    pub family: String,
    pub mean: f64,
    pub replicas: usize,
    pub holder_final: QuantileBlock,
    pub growth_max: QuantileBlock,
    pub growth_max_median: f64,
    pub growth_max_mad: f64,
    pub burst_window: (f64, f64),
    pub burst_total: u64,
    pub bursts_per_replica: f64,
    pub exact_burst_partial_sums: Vec<f64>,
    pub bound_violations: usize,
    pub truncated_entries: usize,
}

pub fn spine_summary(
    config: &ExperimentConfig,
    law: &OffspringLaw,
    table: &NormingTable,
    records: &[TrajectoryRecord],
) -> Result<SpineSummary, ExperimentError> {
    let holder_final: Vec<f64> = records
        .iter()
        .filter_map(|r| r.entries.last().map(|e| e.holder_hat))
        .collect();
    let growth = growth_summary(records);
    let window = config.burst_window(law.mean());
    let burst_total: u64 = records
        .iter()
        .map(|r| r.entries.iter().filter(|e| e.burst).count() as u64)
        .sum();
    let truncated_entries = records
        .iter()
        .map(|r| r.entries.iter().filter(|e| !e.exact).count())
        .sum();
    let sums = burst_partial_sums(law, table, config.depth, window.0, window.1)?;
    Ok(SpineSummary {
        version: ARTIFACT_VERSION.to_string(),
        config: config.clone(),
        family: law.to_string(),
        mean: law.mean(),
        replicas: records.len(),
        holder_final: quantile_block(&holder_final),
        growth_max: quantile_block(&growth.max_growth),
        growth_max_median: growth.median,
        growth_max_mad: growth.mad,
        burst_window: window,
        burst_total,
        bursts_per_replica: burst_total as f64 / records.len().max(1) as f64,
        exact_burst_partial_sums: sums,
        bound_violations: growth.bound_violations,
        truncated_entries,
    })
}

/// Spine experiment in the configured format (CSV trajectories or summary
/// JSON).
pub fn run_spine(config: &ExperimentConfig) -> Result<String, ExperimentError> {
    let (law, table) = spine_inputs(config)?;
    let records = spine_records(config)?;
    match config.format {
        OutputFormat::Csv => Ok(trajectory_csv(config, &records)),
        OutputFormat::Json => {
            let summary = spine_summary(config, &law, &table, &records)?;
            Ok(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")
        }
    }
}

/// Population/martingale CSV over plain GW replicas:
/// `replica,n,z_n,m_n,dm_n,w_hat`.
pub fn population_csv(config: &ExperimentConfig) -> Result<String, ExperimentError> {
    config.validate()?;
    let law = config.law()?;
    let table = build_norming_table(&law, config.s, config.depth)?;
    let mut out = config.csv_header("populations");
    out.push_str("replica,n,z_n,m_n,dm_n,w_hat\n");
    for replica in 0..config.replicas {
        let mut rng = replica_rng(config.seed, replica);
        let tree = simulate_gw(&law, config.depth, config.cap, &mut rng);
        let trace = tree.martingale_trace(&table)?;
        for row in trace.rows() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                replica,
                row.n,
                tree.z(row.n),
                row.m,
                row.dm,
                row.w_hat
            ));
        }
    }
    Ok(out)
}

/// Burst diagnostics for one family.
#[derive(Debug, Clone, Serialize)]
pub struct BurstFamilyReport {
    pub family: String,
    pub mean: f64,
    pub xlogx_finite: bool,
    /// Exact `S_N` for `N = 0..=depth`.
    pub exact_partial_sums: Vec<f64>,
    pub s_final: f64,
    /// `S_depth - S_{depth-10}`: the tail increment the divergence shows up in.
    pub tail_increment: f64,
    pub mc_replicas: u64,
    pub mc_mean_bursts: f64,
    /// Exact standard error of the per-replica burst count.
    pub mc_exact_se: f64,
    pub mc_within_4se: bool,
}

/// Burst summary JSON across one or two families.
#[derive(Debug, Clone, Serialize)]
pub struct BurstOutput {
    pub version: String,
    pub config: ExperimentConfig,
    pub a: f64,
    pub b: f64,
    pub families: Vec<BurstFamilyReport>,
}

fn burst_family_report(
    config: &ExperimentConfig,
    law: &OffspringLaw,
    a: f64,
    b: f64,
    seed_lane: u64,
) -> Result<BurstFamilyReport, ExperimentError> {
    let depth = config.depth;
    let table = build_norming_table(law, config.s, depth + 1)?;
    let sums = burst_partial_sums(law, &table, depth, a, b)?;
    let probs: Vec<f64> = (0..=depth)
        .map(|n| spine_burst_prob(law, &table, n, a, b))
        .collect::<Result<_, _>>()?;
    let variance: f64 = probs.iter().map(|p| p * (1.0 - p)).sum();

    let mut total = 0u64;
    for replica in 0..config.replicas {
        // lane-offset streams keep the two families' draws independent
        let mut rng = replica_rng(config.seed, seed_lane.wrapping_add(replica));
        let nus = sample_spine_nu_sequence(law, &table, depth + 1, &mut rng)?;
        for (n, &nu) in nus.iter().enumerate().take(depth + 1) {
            let v = nu as f64;
            if a.powi(n as i32) < v && v < b.powi(n as i32) {
                total += 1;
            }
        }
    }
    let mc_mean = total as f64 / config.replicas as f64;
    let se = (variance / config.replicas as f64).sqrt();
    let s_final = *sums.last().unwrap();
    Ok(BurstFamilyReport {
        family: law.to_string(),
        mean: law.mean(),
        xlogx_finite: law.xlogx_finite(),
        s_final,
        tail_increment: s_final - sums[depth.saturating_sub(10)],
        exact_partial_sums: sums,
        mc_replicas: config.replicas,
        mc_mean_bursts: mc_mean,
        mc_exact_se: se,
        mc_within_4se: (mc_mean - s_final).abs() <= 4.0 * se,
    })
}

/// Exact divergence partial sums plus a Monte Carlo cross-check, for the
/// primary law and optionally a comparison law.
pub fn run_bursts(config: &ExperimentConfig) -> Result<String, ExperimentError> {
    config.validate()?;
    let law = config.law()?;
    let (a, b) = config.burst_window(law.mean());
    let mut families = vec![burst_family_report(config, &law, a, b, 0)?];
    if let Some(second) = config.law2()? {
        let (a2, b2) = config.burst_window(second.mean());
        families.push(burst_family_report(
            config,
            &second,
            a2,
            b2,
            1 << 32,
        )?);
    }
    let out = BurstOutput {
        version: ARTIFACT_VERSION.to_string(),
        config: config.clone(),
        a,
        b,
        families,
    };
    Ok(serde_json::to_string_pretty(&out).expect("burst output serializes") + "\n")
}

/// Verification-suite JSON and the overall pass flag.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyOutput {
    pub version: String,
    pub config: ExperimentConfig,
    pub reports: Vec<CheckReport>,
    pub all_pass: bool,
}

pub fn run_verify(config: &ExperimentConfig) -> Result<(String, bool), ExperimentError> {
    config.validate()?;
    let law = config.law()?;
    let depth = config.depth.min(4);
    let table = build_norming_table(&law, config.s, depth + 3)?;
    let reports = oracle::run_all(&law, &table, depth, oracle::DEFAULT_ENUM_BUDGET)?;
    let all_pass = reports.iter().all(|r| r.pass);
    let out = VerifyOutput {
        version: ARTIFACT_VERSION.to_string(),
        config: config.clone(),
        reports,
        all_pass,
    };
    Ok((
        serde_json::to_string_pretty(&out).expect("verify output serializes") + "\n",
        all_pass,
    ))
}
