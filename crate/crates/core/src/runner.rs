//! Experiment drivers: random serving-mode allocation, single optimized
//! runs and probability sweeps with Monte Carlo averaging.
//!
//! Seeds are derived from one master seed. Topology draw `t` uses
//! [`topology_seed`], and its statistics a child of that. Mode draw `d` of
//! topology `t` uses [`mode_seed`], which does not depend on `p`. Every grid
//! point therefore sees the same uniforms (common random numbers), and raising
//! `p` only ever turns NCJT UEs into CJT UEs.

use rand::Rng;

use crate::chanstat::{self, PrecodingStatistics};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::netgen::Scenario;
use crate::output::{SummaryRow, SweepRow};
use crate::rates::{ModeAssignment, ServingMode};
use crate::sca::{self, ScaOutcome};
use crate::seeding::{self, derive_seed, stream_rng};

/// Each UE is CJT with probability `p`, independently.
pub fn allocate_modes(num_ues: usize, p: f64, seed: u64) -> Result<ModeAssignment> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("probability {p} outside [0, 1]")));
    }
    let mut rng = stream_rng(seed, seeding::STREAM_MODES);
    Ok(ModeAssignment::new(
        (0..num_ues).map(|_| if rng.random::<f64>() < p { ServingMode::Cjt } else { ServingMode::Ncjt }).collect(),
    ))
}

pub fn topology_seed(master: u64, topo_trial: usize) -> u64 {
    derive_seed(master, seeding::TAG_TOPOLOGY, topo_trial as u64)
}

pub fn statistics_seed(scenario_seed: u64) -> u64 {
    derive_seed(scenario_seed, seeding::TAG_STATISTICS, 0)
}

pub fn mode_seed(master: u64, topo_trial: usize, mode_trial: usize) -> u64 {
    derive_seed(derive_seed(master, seeding::TAG_MODE_DRAW, topo_trial as u64), seeding::TAG_MODE_DRAW, mode_trial as u64)
}

/// Scenario and Monte Carlo statistics for one seed.
pub fn prepare(config: &SystemConfig, seed: u64) -> Result<(Scenario, PrecodingStatistics)> {
    let scenario = Scenario::generate(config, seed)?;
    let stats = chanstat::estimate_statistics(&scenario, config, statistics_seed(seed))?;
    Ok((scenario, stats))
}

#[derive(Debug, Clone)]
pub struct SingleRun {
    pub scenario: Scenario,
    pub stats: PrecodingStatistics,
    pub outcome: ScaOutcome,
}

impl SingleRun {
    /// Fronthaul traffic per AP at the operating rates `mu`.
    pub fn operating_fronthaul(&self) -> Vec<f64> {
        let layout = &self.stats.layout;
        (0..self.stats.num_aps)
            .map(|m| {
                self.outcome.flows.iter().zip(&self.outcome.state.mu).filter(|(f, _)| f.serves(layout, m)).map(|(_, mu)| mu.max(0.0)).sum()
            })
            .collect()
    }
}

/// Scenario generation, statistics and SCA for one seed and mode vector.
pub fn run_single(config: &SystemConfig, modes: &ModeAssignment, seed: u64) -> Result<SingleRun> {
    config.validate()?;
    if modes.len() != config.num_ues {
        return Err(Error::Mode(format!("{} modes given for K = {}", modes.len(), config.num_ues)));
    }
    let (scenario, stats) = prepare(config, seed)?;
    let outcome = sca::run_sca(&stats, modes, config)?;
    Ok(SingleRun { scenario, stats, outcome })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: SystemConfig,
    pub p_grid: Vec<f64>,
    pub cmax_values: Vec<f64>,
    pub serving_set_sizes: Vec<usize>,
    pub topology_draws: usize,
    pub mode_draws: usize,
    pub seed: u64,
}

impl SweepSpec {
    /// Default grid `0, 0.1, ..., 1` with 10 topologies and 5 mode draws,
    /// at the base configuration's cap and serving-set size.
    pub fn new(base: SystemConfig) -> Self {
        Self {
            p_grid: default_p_grid(),
            cmax_values: vec![base.fronthaul_cap_bps_hz],
            serving_set_sizes: vec![base.serving_set_size],
            topology_draws: 10,
            mode_draws: 5,
            seed: base.seed,
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.p_grid.is_empty() || self.p_grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("p grid must be nonempty with values in [0, 1]".into());
        }
        if self.cmax_values.is_empty() || self.cmax_values.iter().any(|c| !(*c > 0.0)) {
            return fail("fronthaul caps must be positive".into());
        }
        if self.serving_set_sizes.is_empty() {
            return fail("no serving-set sizes given".into());
        }
        if self.topology_draws == 0 || self.mode_draws == 0 {
            return fail("draw counts must be at least 1".into());
        }
        for &s in &self.serving_set_sizes {
            SystemConfig { serving_set_size: s, ..self.base.clone() }.validate()?;
        }
        Ok(())
    }
}

pub fn default_p_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
}

impl SweepResult {
    /// Grid value with the largest mean sum-rate for each `(cmax, serving_set_size)`,
    /// first maximum on ties.
    pub fn argmax_p(&self) -> Vec<(f64, usize, f64)> {
        let mut out: Vec<(f64, usize, f64, f64)> = Vec::new();
        for s in &self.summary {
            if s.n_samples == 0 {
                continue;
            }
            match out.iter_mut().find(|o| o.0 == s.cmax && o.1 == s.serving_set_size) {
                Some(o) if s.mean_sum_rate > o.3 => {
                    o.2 = s.p;
                    o.3 = s.mean_sum_rate;
                }
                Some(_) => {}
                None => out.push((s.cmax, s.serving_set_size, s.p, s.mean_sum_rate)),
            }
        }
        out.into_iter().map(|(c, s, p, _)| (c, s, p)).collect()
    }

    pub fn failed_runs(&self) -> usize {
        self.rows.iter().filter(|r| !r.converged).count()
    }
}

/// Mean and standard error over the converged rows of each grid point, in
/// `(serving_set_size, cmax, p)` order of first appearance.
pub fn aggregate(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, f64, f64)> = Vec::new();
    for r in rows {
        let key = (r.serving_set_size, r.cmax, r.p);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(s, c, p)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.serving_set_size == s && r.cmax == c && r.p == p && r.converged)
                .map(|r| r.sum_rate)
                .collect();
            let n = vals.len();
            let mean = if n > 0 { vals.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let stderr = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0) / n as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow { p, cmax: c, serving_set_size: s, mean_sum_rate: mean, stderr, n_samples: n }
        })
        .collect()
}

/// Runs every `(serving set, topology, cap, p, mode draw)` cell. Statistics
/// are computed once per topology and serving-set size. `on_row` sees each
/// row as it completes.
pub fn sweep_p_with(spec: &SweepSpec, mut on_row: impl FnMut(&SweepRow)) -> Result<SweepResult> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &serving in &spec.serving_set_sizes {
        for t in 0..spec.topology_draws {
            let config = SystemConfig { serving_set_size: serving, ..spec.base.clone() };
            let (_, stats) = prepare(&config, topology_seed(spec.seed, t))?;
            for &cmax in &spec.cmax_values {
                let config = SystemConfig { fronthaul_cap_bps_hz: cmax, ..config.clone() };
                for &p in &spec.p_grid {
                    for d in 0..spec.mode_draws {
                        let modes = allocate_modes(config.num_ues, p, mode_seed(spec.seed, t, d))?;
                        let row = match sca::run_sca(&stats, &modes, &config) {
                            Ok(out) => SweepRow {
                                p,
                                cmax,
                                serving_set_size: serving,
                                topo_trial: t,
                                mode_trial: d,
                                n_cjt: modes.count_cjt(),
                                sum_rate: out.objective(),
                                recomputed_sum_rate: out.report.sum_rate_bps_hz,
                                iterations: out.iterations(),
                                converged: out.aborted.is_none(),
                            },
                            Err(_) => SweepRow {
                                p,
                                cmax,
                                serving_set_size: serving,
                                topo_trial: t,
                                mode_trial: d,
                                n_cjt: modes.count_cjt(),
                                sum_rate: f64::NAN,
                                recomputed_sum_rate: f64::NAN,
                                iterations: 0,
                                converged: false,
                            },
                        };
                        on_row(&row);
                        rows.push(row);
                    }
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        a.serving_set_size
            .cmp(&b.serving_set_size)
            .then(a.cmax.total_cmp(&b.cmax))
            .then(a.p.total_cmp(&b.p))
            .then(a.topo_trial.cmp(&b.topo_trial))
            .then(a.mode_trial.cmp(&b.mode_trial))
    });
    let summary = aggregate(&rows);
    Ok(SweepResult { rows, summary })
}

pub fn sweep_p(spec: &SweepSpec) -> Result<SweepResult> {
    sweep_p_with(spec, |_| {})
}
