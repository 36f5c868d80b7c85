//! Convex subproblem solved at each SCA iteration.
//!
//! Units are normalized so that the solver sees O(1) numbers: powers become
//! `u = sqrt(p / P_max)` and every SINR quantity is divided by the noise power.
//! For each rate flow `j` (a CJT UE, or one NCJT stream `(m, s)`) the program
//! carries `mu_j` (rate), `xi'_j = xi_j / s_j` (scaled SINR proxy) and
//! `theta'_j = theta_j / theta_t_j` (interference proxy relative to its anchor).

use nalgebra::{DMatrix, DVector};

use super::ipm::BarrierProgram;
use crate::chanstat::{PrecodingStatistics, ServingLayout};
use crate::error::{Error, Result};
use crate::rates::ModeAssignment;

const LN2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Cjt { ue: usize },
    Ncjt { ue: usize, ap: usize, pos: usize },
}

impl FlowKind {
    pub fn ue(&self) -> usize {
        match *self {
            FlowKind::Cjt { ue } | FlowKind::Ncjt { ue, .. } => ue,
        }
    }

    /// Whether the flow crosses the fronthaul of `ap`.
    pub fn serves(&self, layout: &crate::chanstat::ServingLayout, ap: usize) -> bool {
        match *self {
            FlowKind::Cjt { ue } => layout.position(ue, ap).is_some(),
            FlowKind::Ncjt { ap: a, .. } => a == ap,
        }
    }
}

#[derive(Debug, Clone)]
enum Term {
    /// `u_k^T C u_k` with `C` at `ScaledModel::dense[idx]`.
    Dense { ue: usize, idx: usize },
    /// `sum_pos w_pos u_k[pos]^2`.
    Diag { ue: usize, weights: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Flow {
    pub kind: FlowKind,
    /// Stacked indices carrying the desired signal.
    pub signal: Vec<usize>,
    /// APs whose fronthaul carries this flow.
    pub fronthaul_aps: Vec<usize>,
    /// Victim whose shared interference terms apply.
    victim: usize,
    /// Extra diagonal term on the victim's own block (NCJT self streams).
    own: Option<Vec<f64>>,
    pub degenerate: bool,
}

/// Statistics rescaled to the solver's units for one mode assignment.
#[derive(Debug, Clone)]
pub struct ScaledModel {
    pub layout: ServingLayout,
    pub num_aps: usize,
    pub num_ues: usize,
    /// Scaled signal gains `b * sqrt(P_max / sigma^2)` in stacked order.
    pub b: Vec<f64>,
    dense: Vec<DMatrix<f64>>,
    /// Shared interference terms per victim UE.
    victim_terms: Vec<Vec<Term>>,
    pub flows: Vec<Flow>,
    /// Stacked indices of each AP's power row.
    pub power_rows: Vec<Vec<usize>>,
    pub prelog: f64,
    pub cmax: f64,
    pub max_ap_power_w: f64,
    pub sigma2_w: f64,
}

impl ScaledModel {
    pub fn new(stats: &PrecodingStatistics, modes: &ModeAssignment, prelog: f64, max_ap_power_w: f64, cmax: f64) -> Result<Self> {
        if modes.len() != stats.num_ues {
            return Err(Error::Mode(format!("{} modes for {} UEs", modes.len(), stats.num_ues)));
        }
        if !(max_ap_power_w > 0.0) || !(cmax > 0.0) {
            return Err(Error::Domain("scaled model needs positive power and fronthaul budgets".into()));
        }
        let layout = stats.layout.clone();
        let k_count = stats.num_ues;
        let gain = max_ap_power_w / stats.sigma2_w;
        let b: Vec<f64> = stats.b.iter().map(|v| v * gain.sqrt()).collect();

        let mut dense = Vec::new();
        let mut dense_index = vec![usize::MAX; k_count * k_count];
        let mut victim_terms = Vec::with_capacity(k_count);
        for v in 0..k_count {
            let mut terms = Vec::new();
            for k in 0..k_count {
                let pair = stats.pair(k, v);
                if modes.is_cjt(k) {
                    let c = &stats.interference[pair];
                    if c.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Numerical(format!("non-finite interference matrix ({k}, {v})")));
                    }
                    let min_eig = if c.nrows() > 0 { c.clone().symmetric_eigenvalues().min() } else { 0.0 };
                    if min_eig < -1e-9 * c.trace().abs().max(f64::MIN_POSITIVE) {
                        return Err(Error::Numerical(format!("interference matrix ({k}, {v}) is not PSD")));
                    }
                    dense_index[pair] = dense.len();
                    dense.push(c * gain);
                    terms.push(Term::Dense { ue: k, idx: dense_index[pair] });
                } else if k != v || modes.is_cjt(v) {
                    let m2 = &stats.raw_second_moment[pair];
                    let weights = (0..m2.nrows()).map(|p| m2[(p, p)].max(0.0) * gain).collect();
                    terms.push(Term::Diag { ue: k, weights });
                }
            }
            victim_terms.push(terms);
        }

        let mut flows = Vec::new();
        for k in 0..k_count {
            let block = layout.block(k);
            let set = &layout.serving_sets[k];
            if modes.is_cjt(k) {
                let signal: Vec<usize> = block.clone().collect();
                let degenerate = signal.iter().all(|&i| b[i] <= 0.0);
                flows.push(Flow {
                    kind: FlowKind::Cjt { ue: k },
                    signal,
                    fronthaul_aps: set.clone(),
                    victim: k,
                    own: None,
                    degenerate,
                });
            } else {
                let rank = stats.decoding_rank(k);
                let m2 = &stats.raw_second_moment[stats.pair(k, k)];
                for (pos, &ap) in set.iter().enumerate() {
                    // Own streams decoded no later than this one are cancelled.
                    let own = (0..set.len())
                        .map(|q| {
                            let bq = stats.b[block.start + q];
                            let raw = m2[(q, q)];
                            let w = if rank[q] <= rank[pos] { raw - bq * bq } else { raw };
                            w.max(0.0) * gain
                        })
                        .collect();
                    let idx = block.start + pos;
                    flows.push(Flow {
                        kind: FlowKind::Ncjt { ue: k, ap, pos },
                        signal: vec![idx],
                        fronthaul_aps: vec![ap],
                        victim: k,
                        own: Some(own),
                        degenerate: b[idx] <= 0.0,
                    });
                }
            }
        }

        let mut power_rows = vec![Vec::new(); stats.num_aps];
        for k in 0..k_count {
            for (pos, &m) in layout.serving_sets[k].iter().enumerate() {
                power_rows[m].push(layout.offsets[k] + pos);
            }
        }

        Ok(Self {
            layout,
            num_aps: stats.num_aps,
            num_ues: k_count,
            b,
            dense,
            victim_terms,
            flows,
            power_rows,
            prelog,
            cmax,
            max_ap_power_w,
            sigma2_w: stats.sigma2_w,
        })
    }

    pub fn num_powers(&self) -> usize {
        self.layout.len
    }

    /// Scaled signal amplitude `b_j^T u` of a flow.
    pub fn signal(&self, flow: &Flow, u: &[f64]) -> f64 {
        flow.signal.iter().map(|&i| self.b[i] * u[i]).sum()
    }

    fn term_value(&self, term: &Term, u: &[f64]) -> f64 {
        match term {
            Term::Dense { ue, idx } => {
                let x = &u[self.layout.block(*ue)];
                let c = &self.dense[*idx];
                let mut s = 0.0;
                for (r, &xr) in x.iter().enumerate() {
                    for (l, &xl) in x.iter().enumerate() {
                        s += xl * c[(l, r)] * xr;
                    }
                }
                s
            }
            Term::Diag { ue, weights } => u[self.layout.block(*ue)].iter().zip(weights).map(|(x, w)| w * x * x).sum(),
        }
    }

    /// Adds `scale * grad(term)` into `out` (length `P`).
    fn term_gradient(&self, term: &Term, u: &[f64], scale: f64, out: &mut [f64]) {
        match term {
            Term::Dense { ue, idx } => {
                let block = self.layout.block(*ue);
                let x = &u[block.clone()];
                let c = &self.dense[*idx];
                for (l, o) in out[block].iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (r, &xr) in x.iter().enumerate() {
                        s += c[(l, r)] * xr;
                    }
                    *o += 2.0 * scale * s;
                }
            }
            Term::Diag { ue, weights } => {
                let block = self.layout.block(*ue);
                for ((o, x), w) in out[block.clone()].iter_mut().zip(&u[block]).zip(weights) {
                    *o += 2.0 * scale * w * x;
                }
            }
        }
    }

    fn term_hessian_add(&self, term: &Term, scale: f64, out: &mut DMatrix<f64>) {
        match term {
            Term::Dense { ue, idx } => {
                let block = self.layout.block(*ue);
                let c = &self.dense[*idx];
                for (a, l) in block.clone().enumerate() {
                    for (bb, r) in block.clone().enumerate() {
                        out[(l, r)] += 2.0 * scale * c[(a, bb)];
                    }
                }
            }
            Term::Diag { ue, weights } => {
                for (i, w) in self.layout.block(*ue).zip(weights) {
                    out[(i, i)] += 2.0 * scale * w;
                }
            }
        }
    }

    /// Scaled interference-plus-noise minus one (`Q_j(u)`), per flow.
    pub fn interference(&self, flow: &Flow, u: &[f64]) -> f64 {
        let mut q: f64 = self.victim_terms[flow.victim].iter().map(|t| self.term_value(t, u)).sum();
        if let Some(w) = &flow.own {
            q += self.term_value(&Term::Diag { ue: flow.victim, weights: w.clone() }, u);
        }
        q
    }

    fn own_value(&self, flow: &Flow, u: &[f64]) -> f64 {
        flow.own.as_ref().map_or(0.0, |w| u[self.layout.block(flow.victim)].iter().zip(w).map(|(x, w)| w * x * x).sum())
    }

    fn own_gradient(&self, flow: &Flow, u: &[f64], scale: f64, out: &mut [f64]) {
        if let Some(w) = &flow.own {
            let block = self.layout.block(flow.victim);
            for ((o, x), w) in out[block.clone()].iter_mut().zip(&u[block]).zip(w) {
                *o += 2.0 * scale * w * x;
            }
        }
    }
}

/// Linearization data of one active flow.
#[derive(Debug, Clone)]
pub struct FlowAnchor {
    pub flow: usize,
    /// `theta_t` in noise units.
    pub theta: f64,
    /// `f_t = (b^T u_t)^2 / theta_t`.
    pub f: f64,
    /// `2 b^T u_t / theta_t`.
    pub coef: f64,
}

impl FlowAnchor {
    /// Weight `f_t / theta_t` of the interference term in the linearized SINR.
    pub fn kappa(&self) -> f64 {
        self.f / self.theta
    }
}

/// Point in the variables of the transformed problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    /// `sqrt(p / P_max)` in stacked order.
    pub u: Vec<f64>,
    /// Interference proxy per flow (noise units); ignored for degenerate flows.
    pub theta: Vec<f64>,
}

impl Anchor {
    /// Anchor with `theta` equal to the true interference at `u`.
    pub fn tight(model: &ScaledModel, u: Vec<f64>) -> Self {
        let theta = model.flows.iter().map(|f| model.interference(f, &u) + 1.0).collect();
        Self { u, theta }
    }
}

/// The convex program for one anchor.
///
/// The per-flow proxies `xi` and `theta` are eliminated: at any optimum the
/// interference constraint holds with equality (`theta = Q(u) + 1`) and so does
/// the linearized SINR link (`xi = F`), leaving for each flow
/// `mu <= prelog log2(1 + h(u))` with the concave
/// `h(u) = coef b^T u - (f_t / theta_t) (Q(u) + 1)`.
///
/// Rates may go negative, as in the transformed program. The fronthaul rows
/// therefore charge `nu >= max(mu, 0)` rather than `mu`, so a flow that gives
/// up its rate cannot free capacity for the others.
///
/// Variables are `[u (P), mu (J), nu (J)]`, with `nu` present only when there
/// are fronthaul rows. Constraint rows are ordered as rate links, power rows,
/// fronthaul rows, `u >= 0`, then `mu <= nu` and `nu >= 0`. APs whose flow sets
/// coincide share one fronthaul row.
#[derive(Debug, Clone)]
pub struct Subproblem<'a> {
    pub model: &'a ScaledModel,
    pub anchors: Vec<FlowAnchor>,
    /// Distinct nonempty fronthaul rows as `(ap, indices into anchors)`.
    pub fronthaul_rows: Vec<(usize, Vec<usize>)>,
    /// APs with a nonempty fronthaul row, duplicates included.
    fronthaul_aps: usize,
    /// Nonempty power rows as `(ap, stacked indices)`.
    pub power_rows: Vec<(usize, Vec<usize>)>,
    flow_rows: Vec<Vec<usize>>,
    objective: Vec<f64>,
    /// Active flows grouped by victim UE.
    victims: Vec<(usize, Vec<usize>)>,
}

/// Sizes of the transformed program and of the reduced form handed to the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProgramCounts {
    pub powers: usize,
    pub cjt_flows: usize,
    pub ncjt_flows: usize,
    /// Powers plus `(mu, xi, theta)` per flow.
    pub variables: usize,
    /// Rate, linearized-SINR and interference rows: three per flow.
    pub flow_rows: usize,
    pub power_rows: usize,
    pub fronthaul_rows: usize,
    pub solver_variables: usize,
    pub solver_constraints: usize,
}

/// Values of the concave link functions at a point.
struct LinkEval {
    /// `h_j(u)`.
    h: Vec<f64>,
    /// `grad h_j(u)`, dense.
    grad: Vec<Vec<f64>>,
}

impl<'a> Subproblem<'a> {
    pub fn new(model: &'a ScaledModel, anchor: &Anchor) -> Result<Self> {
        let p = model.num_powers();
        if anchor.u.len() != p || anchor.theta.len() != model.flows.len() {
            return Err(Error::Domain("anchor dimensions do not match the model".into()));
        }
        let mut anchors = Vec::new();
        for (j, flow) in model.flows.iter().enumerate() {
            if flow.degenerate {
                continue;
            }
            let theta = anchor.theta[j];
            if !(theta > 0.0) {
                return Err(Error::Domain(format!("anchor theta of flow {j} is {theta}")));
            }
            let s = model.signal(flow, &anchor.u);
            anchors.push(FlowAnchor { flow: j, theta, f: s * s / theta, coef: 2.0 * s / theta });
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); model.num_aps];
        for (a, fa) in anchors.iter().enumerate() {
            for &m in &model.flows[fa.flow].fronthaul_aps {
                rows[m].push(a);
            }
        }
        let mut fronthaul_rows: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut fronthaul_aps = 0;
        if model.cmax.is_finite() {
            for (m, r) in rows.into_iter().enumerate().filter(|(_, r)| !r.is_empty()) {
                fronthaul_aps += 1;
                // APs serving exactly the same flows give the same row; one copy suffices.
                if !fronthaul_rows.iter().any(|(_, other)| *other == r) {
                    fronthaul_rows.push((m, r));
                }
            }
        }
        let mut flow_rows = vec![Vec::new(); anchors.len()];
        for (r, (_, members)) in fronthaul_rows.iter().enumerate() {
            for &a in members {
                flow_rows[a].push(r);
            }
        }
        let power_rows = model.power_rows.iter().cloned().enumerate().filter(|(_, r)| !r.is_empty()).collect();
        let nu = if fronthaul_rows.is_empty() { 0 } else { anchors.len() };
        let mut objective = vec![0.0; p + anchors.len() + nu];
        for a in 0..anchors.len() {
            objective[p + a] = -1.0;
        }
        let mut victims: Vec<(usize, Vec<usize>)> = Vec::new();
        for (a, fa) in anchors.iter().enumerate() {
            let v = model.flows[fa.flow].victim;
            match victims.last_mut() {
                Some((last, list)) if *last == v => list.push(a),
                _ => victims.push((v, vec![a])),
            }
        }
        Ok(Self { model, anchors, fronthaul_rows, fronthaul_aps, power_rows, flow_rows, objective, victims })
    }

    pub fn counts(&self) -> ProgramCounts {
        let cjt = self.anchors.iter().filter(|a| matches!(self.model.flows[a.flow].kind, FlowKind::Cjt { .. })).count();
        ProgramCounts {
            powers: self.p(),
            cjt_flows: cjt,
            ncjt_flows: self.j() - cjt,
            variables: self.p() + 3 * self.j(),
            flow_rows: 3 * self.j(),
            power_rows: self.power_rows.len(),
            fronthaul_rows: self.fronthaul_aps,
            solver_variables: self.num_vars(),
            solver_constraints: self.num_constraints(),
        }
    }

    fn p(&self) -> usize {
        self.model.num_powers()
    }

    fn j(&self) -> usize {
        self.anchors.len()
    }

    pub fn mu_index(&self, a: usize) -> usize {
        self.p() + a
    }

    fn has_nu(&self) -> bool {
        !self.fronthaul_rows.is_empty()
    }

    fn nu_index(&self, a: usize) -> usize {
        self.p() + self.j() + a
    }

    fn power_row_offset(&self) -> usize {
        self.j()
    }

    fn fronthaul_row_offset(&self) -> usize {
        self.power_row_offset() + self.power_rows.len()
    }

    fn u_bound_offset(&self) -> usize {
        self.fronthaul_row_offset() + self.fronthaul_rows.len()
    }

    fn nu_link_offset(&self) -> usize {
        self.u_bound_offset() + self.p()
    }

    fn nu_bound_offset(&self) -> usize {
        self.nu_link_offset() + self.j()
    }

    /// `Q_j(u)` for every active flow, sharing per-victim work.
    pub fn interference_all(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.j()];
        for (v, members) in &self.victims {
            let base: f64 = self.model.victim_terms[*v].iter().map(|t| self.model.term_value(t, u)).sum();
            for &a in members {
                out[a] = base + self.model.own_value(&self.model.flows[self.anchors[a].flow], u);
            }
        }
        out
    }

    /// Linearized SINR `h_j(u)` for every active flow.
    pub fn linearized_sinr(&self, u: &[f64]) -> Vec<f64> {
        let q = self.interference_all(u);
        self.anchors
            .iter()
            .zip(q)
            .map(|(fa, q)| fa.coef * self.model.signal(&self.model.flows[fa.flow], u) - fa.kappa() * (q + 1.0))
            .collect()
    }

    fn links(&self, u: &[f64], with_grad: bool) -> LinkEval {
        let h = self.linearized_sinr(u);
        let mut grad = Vec::new();
        if with_grad {
            grad = vec![Vec::new(); self.j()];
            for (v, members) in &self.victims {
                let mut base = vec![0.0; self.p()];
                for t in &self.model.victim_terms[*v] {
                    self.model.term_gradient(t, u, 1.0, &mut base);
                }
                for &a in members {
                    let fa = &self.anchors[a];
                    let flow = &self.model.flows[fa.flow];
                    let mut gq = base.clone();
                    self.model.own_gradient(flow, u, 1.0, &mut gq);
                    let k = fa.kappa();
                    gq.iter_mut().for_each(|x| *x *= -k);
                    for &i in &flow.signal {
                        gq[i] += fa.coef * self.model.b[i];
                    }
                    grad[a] = gq;
                }
            }
        }
        LinkEval { h, grad }
    }

    /// `prelog / ((1 + h) ln 2)` and `prelog / ((1 + h)^2 ln 2)`.
    fn log_terms(&self, h: f64) -> (f64, f64) {
        let z = 1.0 + h;
        (self.model.prelog / (z * LN2), self.model.prelog / (z * z * LN2))
    }

    /// Strictly feasible starting point derived from the anchor.
    pub fn interior_point(&self, anchor: &Anchor) -> Result<Vec<f64>> {
        let p = self.p();
        let mut x = vec![0.0; self.num_vars()];
        for i in 0..p {
            x[i] = (0.98 * anchor.u[i]).max(1e-9);
        }
        for (_, row) in &self.power_rows {
            let total: f64 = row.iter().map(|&i| x[i] * x[i]).sum();
            if total >= 0.99 {
                let s = (0.98 / total).sqrt();
                row.iter().for_each(|&i| x[i] *= s);
            }
        }
        let h = self.linearized_sinr(&x[..p]);
        let mut mu = vec![0.0; self.j()];
        for (a, &ha) in h.iter().enumerate() {
            if !(ha > -1.0) || !ha.is_finite() {
                return Err(Error::Numerical(format!("no interior start for flow {}", self.anchors[a].flow)));
            }
            let l = self.model.prelog * (1.0 + ha).log2();
            // Slack of at least one half on every rate link keeps the start well centered.
            mu[a] = (0.5 * l).min(l - 0.5);
        }
        if !self.has_nu() {
            for (a, m) in mu.iter().enumerate() {
                x[self.mu_index(a)] = *m;
            }
            return Ok(x);
        }
        let nu: Vec<f64> = mu.iter().map(|m| 1.5 * m.max(0.0) + 0.5).collect();
        let usage = self
            .fronthaul_rows
            .iter()
            .map(|(_, members)| members.iter().map(|&a| nu[a]).sum::<f64>() / self.model.cmax)
            .fold(0.0, f64::max);
        let shrink = if usage > 0.5 { 0.5 / usage } else { 1.0 };
        for a in 0..self.j() {
            x[self.mu_index(a)] = if mu[a] > 0.0 { mu[a] * shrink } else { mu[a] };
            x[self.nu_index(a)] = nu[a] * shrink;
        }
        Ok(x)
    }

    /// Largest positive entry of each row family of a constraint vector.
    pub fn family_residuals(&self, g: &[f64]) -> super::FamilyResiduals {
        let fam = |r: std::ops::Range<usize>| g[r].iter().fold(0.0_f64, |m, v| m.max(*v));
        let (pr, fr, ub) = (self.power_row_offset(), self.fronthaul_row_offset(), self.u_bound_offset());
        let mut out = super::FamilyResiduals {
            log_rate: fam(0..pr),
            power: fam(pr..fr),
            fronthaul: fam(fr..ub),
            bounds: fam(ub..ub + self.p()),
        };
        if self.has_nu() {
            let (lo, bo) = (self.nu_link_offset(), self.nu_bound_offset());
            out.fronthaul = out.fronthaul.max(fam(lo..bo));
            out.bounds = out.bounds.max(fam(bo..g.len()));
        }
        out
    }

    /// Physical per-flow values at a solver point: `(u, mu, xi, theta)`,
    /// with `xi` and `theta` at their tight values. Degenerate flows get
    /// `mu = xi = 0` and `theta = NaN`.
    pub fn unpack(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.model.flows.len();
        let u = &x[..self.p()];
        let (mut mu, mut xi, mut theta) = (vec![0.0; n], vec![0.0; n], vec![f64::NAN; n]);
        let h = self.linearized_sinr(u);
        let q = self.interference_all(u);
        for (a, fa) in self.anchors.iter().enumerate() {
            mu[fa.flow] = x[self.mu_index(a)];
            xi[fa.flow] = h[a];
            theta[fa.flow] = q[a] + 1.0;
        }
        (u.to_vec(), mu, xi, theta)
    }
}

impl BarrierProgram for Subproblem<'_> {
    fn num_vars(&self) -> usize {
        self.p() + self.j() + if self.has_nu() { self.j() } else { 0 }
    }

    fn num_constraints(&self) -> usize {
        self.j() + self.power_rows.len() + self.fronthaul_rows.len() + self.p() + if self.has_nu() { 2 * self.j() } else { 0 }
    }

    fn objective(&self) -> &[f64] {
        &self.objective
    }

    fn constraints(&self, x: &[f64], out: &mut [f64]) -> bool {
        let p = self.p();
        let u = &x[..p];
        let h = self.linearized_sinr(u);
        for (a, &ha) in h.iter().enumerate() {
            if !(ha > -1.0) {
                return false;
            }
            out[a] = x[self.mu_index(a)] - self.model.prelog * (1.0 + ha).log2();
        }
        let off = self.power_row_offset();
        for (r, (_, row)) in self.power_rows.iter().enumerate() {
            out[off + r] = row.iter().map(|&i| u[i] * u[i]).sum::<f64>() - 1.0;
        }
        let off = self.fronthaul_row_offset();
        for (r, (_, members)) in self.fronthaul_rows.iter().enumerate() {
            out[off + r] = members.iter().map(|&a| x[self.nu_index(a)]).sum::<f64>() / self.model.cmax - 1.0;
        }
        let off = self.u_bound_offset();
        for i in 0..p {
            out[off + i] = -u[i];
        }
        if self.has_nu() {
            let (lo, bo) = (self.nu_link_offset(), self.nu_bound_offset());
            for a in 0..self.j() {
                out[lo + a] = x[self.mu_index(a)] - x[self.nu_index(a)];
                out[bo + a] = -x[self.nu_index(a)];
            }
        }
        out.iter().all(|v| v.is_finite())
    }

    fn constraint_gradient(&self, x: &[f64], i: usize) -> Vec<(usize, f64)> {
        let p = self.p();
        let j = self.j();
        if i < j {
            let links = self.links(&x[..p], true);
            let (ell, _) = self.log_terms(links.h[i]);
            let mut g: Vec<(usize, f64)> = links.grad[i].iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(k, v)| (k, -ell * v)).collect();
            g.push((self.mu_index(i), 1.0));
            return g;
        }
        let i = i - j;
        if i < self.power_rows.len() {
            return self.power_rows[i].1.iter().map(|&k| (k, 2.0 * x[k])).collect();
        }
        let i = i - self.power_rows.len();
        if i < self.fronthaul_rows.len() {
            return self.fronthaul_rows[i].1.iter().map(|&a| (self.nu_index(a), 1.0 / self.model.cmax)).collect();
        }
        let i = i - self.fronthaul_rows.len();
        if i < p {
            return vec![(i, -1.0)];
        }
        let i = i - p;
        if i < j {
            return vec![(self.mu_index(i), 1.0), (self.nu_index(i), -1.0)];
        }
        vec![(self.nu_index(i - j), -1.0)]
    }

    fn constraint_hessian(&self, x: &[f64], i: usize) -> Vec<(usize, usize, f64)> {
        let p = self.p();
        let j = self.j();
        if i < j {
            // -prelog log2(1 + h): ell * (-hess h) + rho * grad h grad h^T, with -hess h = kappa hess Q.
            let links = self.links(&x[..p], true);
            let (ell, rho) = self.log_terms(links.h[i]);
            let fa = &self.anchors[i];
            let flow = &self.model.flows[fa.flow];
            let mut h = DMatrix::zeros(p, p);
            let w = ell * fa.kappa();
            for t in &self.model.victim_terms[flow.victim] {
                self.model.term_hessian_add(t, w, &mut h);
            }
            if let Some(own) = &flow.own {
                self.model.term_hessian_add(&Term::Diag { ue: flow.victim, weights: own.clone() }, w, &mut h);
            }
            let gvec = DVector::from_column_slice(&links.grad[i]);
            h += &gvec * gvec.transpose() * rho;
            let mut out = Vec::new();
            for c in 0..p {
                for r in 0..p {
                    if h[(r, c)] != 0.0 {
                        out.push((r, c, h[(r, c)]));
                    }
                }
            }
            return out;
        }
        let i = i - j;
        if i < self.power_rows.len() {
            return self.power_rows[i].1.iter().map(|&k| (k, k, 2.0)).collect();
        }
        Vec::new()
    }

    fn gradient_transpose(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let p = self.p();
        let u = &x[..p];
        out.iter_mut().for_each(|o| *o = 0.0);
        let h = self.linearized_sinr(u);
        // Rate rows: mu_j - prelog log2(1 + h_j); grad_u = -ell_j grad h_j.
        let weight: Vec<f64> = (0..self.j()).map(|a| v[a] * self.log_terms(h[a]).0).collect();
        for (vic, members) in &self.victims {
            let wq: f64 = members.iter().map(|&a| weight[a] * self.anchors[a].kappa()).sum();
            if wq != 0.0 {
                for t in &self.model.victim_terms[*vic] {
                    self.model.term_gradient(t, u, wq, &mut out[..p]);
                }
            }
            for &a in members {
                let fa = &self.anchors[a];
                let flow = &self.model.flows[fa.flow];
                let wa = weight[a] * fa.kappa();
                if wa != 0.0 {
                    self.model.own_gradient(flow, u, wa, &mut out[..p]);
                }
                for &i in &flow.signal {
                    out[i] -= weight[a] * fa.coef * self.model.b[i];
                }
            }
        }
        for a in 0..self.j() {
            out[self.mu_index(a)] += v[a];
        }
        let off = self.power_row_offset();
        for (r, (_, row)) in self.power_rows.iter().enumerate() {
            for &k in row {
                out[k] += 2.0 * u[k] * v[off + r];
            }
        }
        let off = self.fronthaul_row_offset();
        for (r, (_, members)) in self.fronthaul_rows.iter().enumerate() {
            for &a in members {
                out[self.nu_index(a)] += v[off + r] / self.model.cmax;
            }
        }
        let off = self.u_bound_offset();
        for k in 0..p {
            out[k] -= v[off + k];
        }
        if self.has_nu() {
            let (lo, bo) = (self.nu_link_offset(), self.nu_bound_offset());
            for a in 0..self.j() {
                out[self.mu_index(a)] += v[lo + a];
                out[self.nu_index(a)] -= v[lo + a] + v[bo + a];
            }
        }
    }

    fn gradient_apply(&self, x: &[f64], dx: &[f64], out: &mut [f64]) {
        let p = self.p();
        let u = &x[..p];
        let du = &dx[..p];
        let links = self.links(u, true);
        for a in 0..self.j() {
            let (ell, _) = self.log_terms(links.h[a]);
            let dh: f64 = links.grad[a].iter().zip(du).map(|(g, d)| g * d).sum();
            out[a] = dx[self.mu_index(a)] - ell * dh;
        }
        let off = self.power_row_offset();
        for (r, (_, row)) in self.power_rows.iter().enumerate() {
            out[off + r] = row.iter().map(|&k| 2.0 * u[k] * du[k]).sum();
        }
        let off = self.fronthaul_row_offset();
        for (r, (_, members)) in self.fronthaul_rows.iter().enumerate() {
            out[off + r] = members.iter().map(|&a| dx[self.nu_index(a)]).sum::<f64>() / self.model.cmax;
        }
        let off = self.u_bound_offset();
        for k in 0..p {
            out[off + k] = -du[k];
        }
        if self.has_nu() {
            let (lo, bo) = (self.nu_link_offset(), self.nu_bound_offset());
            for a in 0..self.j() {
                out[lo + a] = dx[self.mu_index(a)] - dx[self.nu_index(a)];
                out[bo + a] = -dx[self.nu_index(a)];
            }
        }
    }

    /// Eliminates the rate variables flow by flow and solves the remaining
    /// system on `u` and the fronthaul multipliers, followed by iterative
    /// refinement against the unreduced matrix.
    fn solve_newton(&self, x: &[f64], lambda: &[f64], d: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
        let p = self.p();
        let j = self.j();
        let n = self.num_vars();
        let u = &x[..p];
        let links = self.links(u, true);
        let cmax = self.model.cmax;
        let has_nu = self.has_nu();

        // Hessian terms and the rows that touch u only.
        let mut s_base = DMatrix::<f64>::zeros(p, p);
        let off = self.power_row_offset();
        for (r, (_, row)) in self.power_rows.iter().enumerate() {
            let (lr, dr) = (lambda[off + r], d[off + r]);
            for &k in row {
                s_base[(k, k)] += 2.0 * lr;
                for &l in row {
                    s_base[(k, l)] += 4.0 * dr * u[k] * u[l];
                }
            }
        }
        let off = self.u_bound_offset();
        for k in 0..p {
            s_base[(k, k)] += d[off + k];
        }
        let mut ell = vec![0.0; j];
        let mut rho = vec![0.0; j];
        for a in 0..j {
            (ell[a], rho[a]) = self.log_terms(links.h[a]);
        }
        for (vic, members) in &self.victims {
            let w: f64 = members.iter().map(|&a| lambda[a] * ell[a] * self.anchors[a].kappa()).sum();
            for t in &self.model.victim_terms[*vic] {
                self.model.term_hessian_add(t, w, &mut s_base);
            }
            for &a in members {
                let fa = &self.anchors[a];
                if let Some(own) = &self.model.flows[fa.flow].own {
                    let term = Term::Diag { ue: *vic, weights: own.clone() };
                    self.model.term_hessian_add(&term, lambda[a] * ell[a] * fa.kappa(), &mut s_base);
                }
            }
        }
        let mut cols = DMatrix::<f64>::zeros(p, j);
        for a in 0..j {
            for (k, g) in links.grad[a].iter().enumerate() {
                cols[(k, a)] = *g;
            }
        }

        // Rate row a has gradient (-ell a_a ; e_mu) and adds rho a a^T to the
        // Hessian, so it couples mu_a to u through beta a_a. The (mu, nu) block
        // per flow is [[d + e, -e], [-e, e + f]] plus the fronthaul rows on nu.
        let (lo, bo) = (self.nu_link_offset(), self.nu_bound_offset());
        let fh_off = self.fronthaul_row_offset();
        let rf = if has_nu { self.fronthaul_rows.len() } else { 0 };
        let fh_w: Vec<f64> = (0..rf).map(|r| d[fh_off + r] / (cmax * cmax)).collect();
        let beta: Vec<f64> = (0..j).map(|a| -d[a] * ell[a]).collect();
        let e: Vec<f64> = (0..j).map(|a| if has_nu { d[lo + a] } else { 0.0 }).collect();
        let f: Vec<f64> = (0..j).map(|a| if has_nu { d[bo + a] } else { 0.0 }).collect();
        let delta: Vec<f64> = (0..j).map(|a| d[a] + e[a]).collect();
        let gamma: Vec<f64> = (0..j).map(|a| if has_nu { f[a] + e[a] * d[a] / delta[a] } else { 1.0 }).collect();
        let c_nu: Vec<f64> = (0..j).map(|a| beta[a] * e[a] / delta[a]).collect();
        // Weight of a a^T after eliminating mu and nu:
        // lambda rho + d ell^2 - beta^2 / delta - c^2 / gamma, simplified.
        let reduced_w: Vec<f64> = (0..j)
            .map(|a| lambda[a] * rho[a] + if has_nu { d[a] * ell[a] * ell[a] * (e[a] / delta[a]) * (f[a] / gamma[a]) } else { 0.0 })
            .collect();
        let full_w: Vec<f64> = (0..j).map(|a| lambda[a] * rho[a] + d[a] * ell[a] * ell[a]).collect();

        let mut s = s_base.clone();
        if j > 0 {
            let mut scaled = cols.clone();
            for a in 0..j {
                scaled.column_mut(a).scale_mut(reduced_w[a]);
            }
            s.gemm(1.0, &scaled, &cols.transpose(), 1.0);
        }

        // With y_r = w_r sum_{a in r} dnu_a the reduced system is
        // [S, -Y; -Y^T, -C] [du; y] = [ru; -ry], C = W^-1 + U^T diag(gamma)^-1 U.
        enum Factor {
            Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
            Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
        }
        let factor = if rf > 0 {
            let mut kkt = DMatrix::<f64>::zeros(p + rf, p + rf);
            kkt.view_mut((0, 0), (p, p)).copy_from(&s);
            for r in 0..rf {
                kkt[(p + r, p + r)] = -1.0 / fh_w[r];
            }
            for a in 0..j {
                let w = c_nu[a] / gamma[a];
                for &r in &self.flow_rows[a] {
                    for &r2 in &self.flow_rows[a] {
                        kkt[(p + r, p + r2)] -= 1.0 / gamma[a];
                    }
                    for k in 0..p {
                        kkt[(k, p + r)] -= w * cols[(k, a)];
                        kkt[(p + r, k)] -= w * cols[(k, a)];
                    }
                }
            }
            Factor::Lu(kkt.lu())
        } else {
            let chol = match s.clone().cholesky() {
                Some(c) => c,
                None => {
                    let ridge = 1e-12 * s.diagonal().amax().max(1.0);
                    for k in 0..p {
                        s[(k, k)] += ridge;
                    }
                    s.cholesky()?
                }
            };
            Factor::Chol(chol)
        };

        let solve = |rhs: &[f64]| -> Option<Vec<f64>> {
            let r_mu: Vec<f64> = (0..j).map(|a| rhs[self.mu_index(a)]).collect();
            let big_r: Vec<f64> = (0..j).map(|a| if has_nu { rhs[self.nu_index(a)] + e[a] / delta[a] * r_mu[a] } else { 0.0 }).collect();
            let mut ru = DVector::from_column_slice(&rhs[..p]);
            for a in 0..j {
                let coef = beta[a] / delta[a] * r_mu[a] + if has_nu { c_nu[a] / gamma[a] * big_r[a] } else { 0.0 };
                if coef != 0.0 {
                    ru.axpy(-coef, &cols.column(a), 1.0);
                }
            }
            let (du, y) = match &factor {
                Factor::Chol(chol) => (chol.solve(&ru), DVector::<f64>::zeros(0)),
                Factor::Lu(lu) => {
                    let mut full = DVector::<f64>::zeros(p + rf);
                    full.rows_mut(0, p).copy_from(&ru);
                    for a in 0..j {
                        for &r in &self.flow_rows[a] {
                            full[p + r] -= big_r[a] / gamma[a];
                        }
                    }
                    let sol = lu.solve(&full)?;
                    (sol.rows(0, p).into_owned(), sol.rows(p, rf).into_owned())
                }
            };
            let adu = cols.transpose() * &du;
            let mut out = du.as_slice().to_vec();
            out.resize(n, 0.0);
            for a in 0..j {
                let mut en = 0.0;
                if has_nu {
                    let ys: f64 = self.flow_rows[a].iter().map(|&r| y[r]).sum();
                    let v = (big_r[a] - c_nu[a] * adu[a] - ys) / gamma[a];
                    out[self.nu_index(a)] = v;
                    en = e[a] * v;
                }
                out[self.mu_index(a)] = (r_mu[a] - beta[a] * adu[a] + en) / delta[a];
            }
            Some(out)
        };

        // The unreduced Newton matrix applied to a vector.
        let apply = |v: &[f64]| -> Vec<f64> {
            let vu = DVector::from_column_slice(&v[..p]);
            let av = cols.transpose() * &vu;
            let mut coef = DVector::<f64>::zeros(j);
            let mut out = vec![0.0; n];
            for a in 0..j {
                coef[a] = full_w[a] * av[a] + beta[a] * v[self.mu_index(a)];
            }
            let ou = &s_base * &vu + &cols * coef;
            out[..p].copy_from_slice(ou.as_slice());
            let mut fh = vec![0.0; rf];
            for a in 0..j {
                for &r in &self.flow_rows[a] {
                    if has_nu {
                        fh[r] += v[self.nu_index(a)];
                    }
                }
            }
            for a in 0..j {
                let (vm, vn) = (v[self.mu_index(a)], if has_nu { v[self.nu_index(a)] } else { 0.0 });
                out[self.mu_index(a)] = beta[a] * av[a] + delta[a] * vm - e[a] * vn;
                if has_nu {
                    let coupling: f64 = self.flow_rows[a].iter().map(|&r| fh_w[r] * fh[r]).sum();
                    out[self.nu_index(a)] = -e[a] * vm + (e[a] + f[a]) * vn + coupling;
                }
            }
            out
        };

        let amax = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let residual = |dx: &[f64]| -> Vec<f64> { rhs.iter().zip(apply(dx)).map(|(a, b)| a - b).collect() };
        let target = 1e-12 * amax(rhs);
        if let Some(mut dx) = solve(rhs) {
            let mut r = residual(&dx);
            for _ in 0..3 {
                let before = amax(&r);
                if before <= target {
                    return Some(dx);
                }
                let Some(corr) = solve(&r) else { break };
                let trial: Vec<f64> = dx.iter().zip(&corr).map(|(a, b)| a + b).collect();
                let r_trial = residual(&trial);
                if amax(&r_trial) >= before {
                    break;
                }
                (dx, r) = (trial, r_trial);
            }
            if amax(&r) <= target {
                return Some(dx);
            }
        }

        // Near-degenerate systems: pivoted LU on the unreduced matrix.
        let mut full = DMatrix::<f64>::zeros(n, n);
        full.view_mut((0, 0), (p, p)).copy_from(&s_base);
        let mut scaled = cols.clone();
        for a in 0..j {
            scaled.column_mut(a).scale_mut(full_w[a]);
        }
        full.view_mut((0, 0), (p, p)).gemm(1.0, &scaled, &cols.transpose(), 1.0);
        for a in 0..j {
            let m = self.mu_index(a);
            for k in 0..p {
                full[(k, m)] = beta[a] * cols[(k, a)];
                full[(m, k)] = beta[a] * cols[(k, a)];
            }
            full[(m, m)] = delta[a];
            if has_nu {
                let nu = self.nu_index(a);
                full[(m, nu)] = -e[a];
                full[(nu, m)] = -e[a];
                full[(nu, nu)] += e[a] + f[a];
            }
        }
        for (r, (_, members)) in self.fronthaul_rows.iter().enumerate().take(rf) {
            for &a in members {
                for &b in members {
                    full[(self.nu_index(a), self.nu_index(b))] += fh_w[r];
                }
            }
        }
        let dx = full.lu().solve(&DVector::from_column_slice(rhs))?;
        Some(dx.as_slice().to_vec())
    }
}
