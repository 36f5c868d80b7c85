//! Successive convex approximation of the fronthaul-constrained sum-rate
//! maximization over per-AP power coefficients.

pub mod ipm;
pub mod subproblem;
pub mod surrogate;

use crate::chanstat::PrecodingStatistics;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::rates::{self, ModeAssignment, PowerSolution, RateReport};
use ipm::{BarrierProgram, IpmSettings, IpmStatus};
use subproblem::{Anchor, FlowKind, ScaledModel, Subproblem};

/// Budgets and pre-log factor of one optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaParams {
    pub prelog: f64,
    pub max_ap_power_w: f64,
    pub fronthaul_cap_bps_hz: f64,
}

impl ScaParams {
    pub fn from_config(config: &SystemConfig) -> Self {
        Self {
            prelog: config.prelog(),
            max_ap_power_w: config.max_ap_power_w,
            fronthaul_cap_bps_hz: config.fronthaul_cap_bps_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaSettings {
    pub max_iterations: usize,
    /// Stop once the relative objective change drops below this.
    pub rel_tol: f64,
    pub ipm: IpmSettings,
}

impl Default for ScaSettings {
    fn default() -> Self {
        Self { max_iterations: 30, rel_tol: 1e-4, ipm: IpmSettings::default() }
    }
}

impl ScaSettings {
    pub fn from_config(config: &SystemConfig) -> Self {
        Self { max_iterations: config.sca_max_iters, ..Self::default() }
    }
}

/// Largest violation of each constraint family in normalized row units.
/// The linearized-SINR and interference links are met with equality by
/// construction and have no rows of their own.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FamilyResiduals {
    pub log_rate: f64,
    pub power: f64,
    /// Fronthaul rows together with the `mu <= nu` charge links.
    pub fronthaul: f64,
    pub bounds: f64,
}

impl FamilyResiduals {
    pub fn max(&self) -> f64 {
        [self.log_rate, self.power, self.fronthaul, self.bounds].into_iter().fold(0.0, f64::max)
    }
}

/// Solution of one convex subproblem. Per-flow vectors follow `flows`.
#[derive(Debug, Clone)]
pub struct SubproblemSolution {
    /// `sqrt(p / P_max)` in stacked serving order.
    pub u: Vec<f64>,
    pub mu: Vec<f64>,
    /// SINR proxy `xi` (dimensionless).
    pub xi: Vec<f64>,
    /// Interference-plus-noise proxy in units of the noise power.
    pub theta: Vec<f64>,
    /// `sum mu` in bit/s/Hz.
    pub objective: f64,
    pub residuals: FamilyResiduals,
    pub kkt_residual: f64,
    pub gap: f64,
    pub ipm_iterations: usize,
}

/// Solves the subproblem from its anchor-derived interior start.
pub fn solve_subproblem(sp: &Subproblem, anchor: &Anchor, settings: &IpmSettings) -> Result<SubproblemSolution> {
    let x0 = sp.interior_point(anchor)?;
    let mut res = ipm::solve(sp, &x0, settings);
    if res.status != IpmStatus::Converged && !settings.separate_dual_step {
        let spent = res.iterations;
        res = ipm::solve(sp, &x0, &IpmSettings { separate_dual_step: true, ..*settings });
        res.iterations += spent;
    }
    if res.status != IpmStatus::Converged {
        return Err(Error::NonConvergence { iterations: res.iterations, gap: res.gap, residual: res.residual });
    }
    let mut g = vec![0.0; sp.num_constraints()];
    if !sp.constraints(&res.x, &mut g) {
        return Err(Error::Numerical("subproblem solution left the domain".into()));
    }
    let residuals = sp.family_residuals(&g);
    let (u, mu, xi, theta) = sp.unpack(&res.x);
    Ok(SubproblemSolution {
        u,
        objective: mu.iter().sum(),
        mu,
        xi,
        theta,
        residuals,
        kkt_residual: res.residual,
        gap: res.gap,
        ipm_iterations: res.iterations,
    })
}

/// One row of the convergence trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective_bps_hz: f64,
    /// `max_m (sum of mu on AP m - C_max)`, clipped at zero.
    pub max_fronthaul_violation: f64,
    /// `max_m (sum_k p_mk - P_max)` in watts, clipped at zero.
    pub max_power_violation: f64,
    pub ipm_iterations: usize,
}

/// Iterate of the outer loop.
#[derive(Debug, Clone)]
pub struct ScaState {
    pub iteration: usize,
    pub u: Vec<f64>,
    pub mu: Vec<f64>,
    pub xi: Vec<f64>,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScaOutcome {
    pub power: PowerSolution,
    pub state: ScaState,
    pub flows: Vec<FlowKind>,
    pub trace: Vec<IterationRecord>,
    /// Rates recomputed from the final powers.
    pub report: RateReport,
    /// The relative-change stop rule fired before the iteration cap.
    pub stop_rule_met: bool,
    /// Set when a later subproblem failed; the outcome holds the last good iterate.
    pub aborted: Option<String>,
}

impl ScaOutcome {
    pub fn objective(&self) -> f64 {
        self.state.objective
    }

    pub fn iterations(&self) -> usize {
        self.state.iteration
    }
}

fn trivial_outcome(stats: &PrecodingStatistics, modes: &ModeAssignment, params: &ScaParams) -> Result<ScaOutcome> {
    let power = PowerSolution::zeros(stats.num_aps, stats.num_ues);
    let report = rates::evaluate(stats, &power, modes, params.prelog)?;
    Ok(ScaOutcome {
        power,
        state: ScaState { iteration: 0, u: vec![0.0; stats.layout.len], mu: Vec::new(), xi: Vec::new(), theta: Vec::new(), objective: 0.0, history: vec![0.0] },
        flows: Vec::new(),
        trace: vec![IterationRecord { iteration: 0, objective_bps_hz: 0.0, max_fronthaul_violation: 0.0, max_power_violation: 0.0, ipm_iterations: 0 }],
        report,
        stop_rule_met: true,
        aborted: None,
    })
}

/// Runs SCA with the budgets and iteration cap taken from `config`.
pub fn run_sca(stats: &PrecodingStatistics, modes: &ModeAssignment, config: &SystemConfig) -> Result<ScaOutcome> {
    run_sca_with(stats, modes, &ScaParams::from_config(config), &ScaSettings::from_config(config))
}

pub fn run_sca_with(stats: &PrecodingStatistics, modes: &ModeAssignment, params: &ScaParams, settings: &ScaSettings) -> Result<ScaOutcome> {
    if modes.len() != stats.num_ues {
        return Err(Error::Mode(format!("{} modes for {} UEs", modes.len(), stats.num_ues)));
    }
    if params.max_ap_power_w < 0.0 || params.fronthaul_cap_bps_hz < 0.0 {
        return Err(Error::Domain("negative power or fronthaul budget".into()));
    }
    if params.max_ap_power_w == 0.0 || params.fronthaul_cap_bps_hz == 0.0 {
        return trivial_outcome(stats, modes, params);
    }
    let model = ScaledModel::new(stats, modes, params.prelog, params.max_ap_power_w, params.fronthaul_cap_bps_hz)?;
    if model.flows.iter().all(|f| f.degenerate) {
        return trivial_outcome(stats, modes, params);
    }

    let start = PowerSolution::equal_split(&stats.layout, stats.num_aps, params.max_ap_power_w);
    let u0: Vec<f64> = start.stacked_sqrt(&stats.layout).iter().map(|v| v / params.max_ap_power_w.sqrt()).collect();
    let mut anchor = Anchor::tight(&model, u0);
    let mut state: Option<ScaState> = None;
    let mut trace = Vec::new();
    let mut stop_rule_met = false;
    let mut aborted = None;

    for t in 1..=settings.max_iterations.max(1) {
        let step = Subproblem::new(&model, &anchor).and_then(|sp| solve_subproblem(&sp, &anchor, &settings.ipm));
        let sol = match step {
            Ok(sol) => sol,
            Err(e) if state.is_some() => {
                aborted = Some(format!("iteration {t}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let fronthaul_excess = (0..model.num_aps)
            .map(|m| {
                let load: f64 = model.flows.iter().zip(&sol.mu).filter(|(f, _)| f.fronthaul_aps.contains(&m)).map(|(_, mu)| mu).sum();
                load - params.fronthaul_cap_bps_hz
            })
            .fold(0.0, f64::max);
        let power_excess = model
            .power_rows
            .iter()
            .map(|row| row.iter().map(|&i| sol.u[i] * sol.u[i]).sum::<f64>() * params.max_ap_power_w - params.max_ap_power_w)
            .fold(0.0, f64::max);
        trace.push(IterationRecord {
            iteration: t,
            objective_bps_hz: sol.objective,
            max_fronthaul_violation: fronthaul_excess,
            max_power_violation: power_excess,
            ipm_iterations: sol.ipm_iterations,
        });

        let previous = state.as_ref().map(|s| s.objective);
        let mut history = state.map(|s| s.history).unwrap_or_default();
        history.push(sol.objective);
        let theta: Vec<f64> = sol.theta.iter().map(|v| if v.is_finite() { *v } else { 1.0 }).collect();
        anchor = Anchor { u: sol.u.clone(), theta: theta.clone() };
        state = Some(ScaState { iteration: t, u: sol.u, mu: sol.mu, xi: sol.xi, theta, objective: sol.objective, history });

        if let Some(prev) = previous {
            if (sol.objective - prev).abs() <= settings.rel_tol * prev.abs().max(f64::MIN_POSITIVE) {
                stop_rule_met = true;
                break;
            }
        }
    }
    let state = state.expect("at least one SCA iteration ran");

    // Per-AP budgets hold strictly at an interior point; guard against rounding anyway.
    let mut power = PowerSolution::from_stacked_sqrt(&stats.layout, stats.num_aps, &state.u);
    for row in power.p.iter_mut() {
        for v in row.iter_mut() {
            *v *= params.max_ap_power_w;
        }
        let total: f64 = row.iter().sum();
        if total > params.max_ap_power_w {
            let s = params.max_ap_power_w / total;
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
    let report = rates::evaluate(stats, &power, modes, params.prelog)?;
    Ok(ScaOutcome {
        power,
        flows: model.flows.iter().map(|f| f.kind).collect(),
        state,
        trace,
        report,
        stop_rule_met,
        aborted,
    })
}

/// True rate of each flow from a report, aligned with `ScaOutcome::flows`.
pub fn flow_rates(report: &RateReport, flows: &[FlowKind]) -> Vec<f64> {
    flows
        .iter()
        .map(|f| match *f {
            FlowKind::Cjt { ue } => report.rate_bps_hz[ue],
            FlowKind::Ncjt { ue, pos, .. } => report.rate_ncjt_per_ap[ue][pos],
        })
        .collect()
}
