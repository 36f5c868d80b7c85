//! Channel sampling, MMSE estimation under pilot contamination, conjugate
//! beamforming and Monte Carlo estimation of the precoding statistics.
//!
//! The statistics are indexed through the *stacked serving vector*: UE `k`
//! owns the block `offsets[k]..offsets[k] + |M_k|`, position `pos` in that
//! block standing for AP `M_k[pos]`. Power variables use the same layout.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::netgen::{PilotAssignment, Scenario, SpatialModel, Topology};
use crate::seeding::{self, derive_seed, stream_rng};

/// Trials accumulated per independent RNG block.
pub const TRIAL_BLOCK: usize = 256;
/// Fewer trials than this sets [`PrecodingStatistics::low_trial_count`].
pub const MIN_TRIALS: usize = 100;

/// One complex `N`-vector per `(ap, ue)` pair, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub aps: usize,
    pub ues: usize,
    pub antennas: usize,
    pub data: Vec<Complex64>,
}

impl ChannelSet {
    pub fn zeros(aps: usize, ues: usize, antennas: usize) -> Self {
        Self { aps, ues, antennas, data: vec![Complex64::new(0.0, 0.0); aps * ues * antennas] }
    }

    #[inline]
    pub fn get(&self, ap: usize, ue: usize) -> &[Complex64] {
        let start = (ap * self.ues + ue) * self.antennas;
        &self.data[start..start + self.antennas]
    }

    #[inline]
    pub fn get_mut(&mut self, ap: usize, ue: usize) -> &mut [Complex64] {
        let start = (ap * self.ues + ue) * self.antennas;
        &mut self.data[start..start + self.antennas]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// `x^H y`
#[inline]
pub fn inner(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter().zip(y).fold(Complex64::new(0.0, 0.0), |acc, (a, b)| acc + a.conj() * b)
}

#[inline]
fn mat_vec(a: &DMatrix<Complex64>, x: &[Complex64], out: &mut [Complex64]) {
    let n = a.nrows();
    for o in out.iter_mut() {
        *o = Complex64::new(0.0, 0.0);
    }
    for (c, xc) in x.iter().enumerate() {
        let col = a.column(c);
        for r in 0..n {
            out[r] += col[r] * xc;
        }
    }
}

fn complex_normal(rng: &mut impl Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Hermitian square root `A` with `A A^H = R`; small negative eigenvalues are clamped.
pub fn psd_sqrt(r: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let n = r.nrows();
    let trace = r.trace().re.abs();
    if trace == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let eig = SymmetricEigen::try_new(r.clone(), 1e-14, 10_000)
        .ok_or_else(|| Error::Numerical("eigendecomposition did not converge".into()))?;
    let min = eig.eigenvalues.min();
    if !min.is_finite() || min < -1e-9 * trace {
        return Err(Error::Numerical(format!("covariance not PSD (min eigenvalue {min:.3e}, trace {trace:.3e})")));
    }
    let roots = eig.eigenvalues.map(|v| Complex64::new(v.max(0.0).sqrt(), 0.0));
    let u = &eig.eigenvectors;
    Ok(u * DMatrix::from_diagonal(&roots) * u.adjoint())
}

/// Draws `h[m][k] ~ CN(0, R[m][k])`.
#[derive(Debug, Clone)]
pub struct ChannelSampler {
    aps: usize,
    ues: usize,
    antennas: usize,
    roots: Vec<DMatrix<Complex64>>,
}

impl ChannelSampler {
    pub fn new(spatial: &SpatialModel) -> Result<Self> {
        let aps = spatial.covariances.len();
        let ues = spatial.covariances[0].len();
        let antennas = spatial.antennas();
        let mut roots = Vec::with_capacity(aps * ues);
        for row in &spatial.covariances {
            for r in row {
                roots.push(psd_sqrt(r)?);
            }
        }
        Ok(Self { aps, ues, antennas, roots })
    }

    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut ChannelSet) {
        let mut z = vec![Complex64::new(0.0, 0.0); self.antennas];
        for m in 0..self.aps {
            for k in 0..self.ues {
                z.iter_mut().for_each(|v| *v = complex_normal(rng));
                mat_vec(&self.roots[m * self.ues + k], &z, out.get_mut(m, k));
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> ChannelSet {
        let mut out = ChannelSet::zeros(self.aps, self.ues, self.antennas);
        self.sample_into(rng, &mut out);
        out
    }
}

/// One realization of the true channels for a given trial seed.
pub fn sample_true_channels(spatial: &SpatialModel, trial_seed: u64) -> Result<ChannelSet> {
    let sampler = ChannelSampler::new(spatial)?;
    Ok(sampler.sample(&mut stream_rng(trial_seed, 0)))
}

/// `Psi[t][m] = sum_{l: t_l = t} tau_p p_l R[m][l] + sigma_ul^2 I`.
pub fn compute_psi(spatial: &SpatialModel, pilots: &PilotAssignment, config: &SystemConfig) -> Vec<Vec<DMatrix<Complex64>>> {
    let n = spatial.antennas();
    let sigma2 = config.noise_power_w();
    let weight = config.tau_p as f64 * config.pilot_power_w;
    (0..pilots.tau_p)
        .map(|t| {
            let users = pilots.users_of(t);
            spatial
                .covariances
                .iter()
                .map(|row| {
                    let mut psi = DMatrix::<Complex64>::identity(n, n) * Complex64::new(sigma2, 0.0);
                    for &l in &users {
                        psi += &row[l] * Complex64::new(weight, 0.0);
                    }
                    psi
                })
                .collect()
        })
        .collect()
}

fn hermitian_inverse(psi: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    psi.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("pilot correlation matrix is singular".into()))
}

/// Closed form `E||h_hat[m][k]||^2 = p tau_p tr(R Psi^-1 R)`, indexed `[ap][ue]`.
pub fn norm_constants(spatial: &SpatialModel, pilots: &PilotAssignment, config: &SystemConfig) -> Result<Vec<Vec<f64>>> {
    let psi = compute_psi(spatial, pilots, config);
    let scale = config.pilot_power_w * config.tau_p as f64;
    spatial
        .covariances
        .iter()
        .enumerate()
        .map(|(m, row)| {
            row.iter()
                .enumerate()
                .map(|(k, r)| {
                    let inv = hermitian_inverse(&psi[pilots.pilot_index[k]][m])?;
                    Ok(scale * (r * inv * r).trace().re)
                })
                .collect()
        })
        .collect()
}

/// Precomputed MMSE filters `sqrt(p) R Psi^-1` for every `(ap, ue)` pair.
#[derive(Debug, Clone)]
pub struct MmseEstimator {
    aps: usize,
    ues: usize,
    antennas: usize,
    tau_p: f64,
    pilot_amplitude: f64,
    noise_std: f64,
    pilots: PilotAssignment,
    filters: Vec<DMatrix<Complex64>>,
    norms: Vec<Vec<f64>>,
}

impl MmseEstimator {
    pub fn new(spatial: &SpatialModel, pilots: &PilotAssignment, config: &SystemConfig) -> Result<Self> {
        let aps = spatial.covariances.len();
        let ues = spatial.covariances[0].len();
        let psi = compute_psi(spatial, pilots, config);
        let amp = config.pilot_power_w.sqrt();
        let mut filters = Vec::with_capacity(aps * ues);
        for (m, row) in spatial.covariances.iter().enumerate() {
            let inverses = psi.iter().map(|per_ap| hermitian_inverse(&per_ap[m])).collect::<Result<Vec<_>>>()?;
            for (k, r) in row.iter().enumerate() {
                filters.push(r * &inverses[pilots.pilot_index[k]] * Complex64::new(amp, 0.0));
            }
        }
        Ok(Self {
            aps,
            ues,
            antennas: spatial.antennas(),
            tau_p: config.tau_p as f64,
            pilot_amplitude: amp,
            noise_std: (config.tau_p as f64 * config.noise_power_w()).sqrt(),
            pilots: pilots.clone(),
            filters,
            norms: norm_constants(spatial, pilots, config)?,
        })
    }

    pub fn norm_constants(&self) -> &[Vec<f64>] {
        &self.norms
    }

    /// Forms the despread pilot observations and applies the MMSE filters.
    pub fn estimate_into(&self, h: &ChannelSet, rng: &mut impl Rng, out: &mut ChannelSet) {
        let n = self.antennas;
        let mut y = vec![Complex64::new(0.0, 0.0); n];
        let users: Vec<Vec<usize>> = (0..self.pilots.tau_p).map(|t| self.pilots.users_of(t)).collect();
        for m in 0..self.aps {
            for cohort in &users {
                // noise is drawn even for unused pilots to keep the stream layout fixed
                for v in y.iter_mut() {
                    *v = complex_normal(rng) * self.noise_std;
                }
                for &l in cohort {
                    for (v, hv) in y.iter_mut().zip(h.get(m, l)) {
                        *v += hv * (self.pilot_amplitude * self.tau_p);
                    }
                }
                for &k in cohort {
                    mat_vec(&self.filters[m * self.ues + k], &y, out.get_mut(m, k));
                }
            }
        }
    }

    pub fn estimate(&self, h: &ChannelSet, rng: &mut impl Rng) -> ChannelSet {
        let mut out = ChannelSet::zeros(self.aps, self.ues, self.antennas);
        self.estimate_into(h, rng, &mut out);
        out
    }
}

/// MMSE estimates of `h` with fresh pilot noise drawn from `trial_seed`.
pub fn mmse_estimate(
    h: &ChannelSet,
    spatial: &SpatialModel,
    pilots: &PilotAssignment,
    config: &SystemConfig,
    trial_seed: u64,
) -> Result<ChannelSet> {
    let est = MmseEstimator::new(spatial, pilots, config)?;
    Ok(est.estimate(h, &mut stream_rng(trial_seed, 1)))
}

/// Normalized conjugate beamformers `w = h_hat / sqrt(E||h_hat||^2)` on serving
/// pairs, zero elsewhere.
pub fn cb_precoder(h_hat: &ChannelSet, topology: &Topology, norms: &[Vec<f64>]) -> Result<ChannelSet> {
    let mut w = ChannelSet::zeros(h_hat.aps, h_hat.ues, h_hat.antennas);
    cb_precoder_into(h_hat, topology, norms, &mut w)?;
    Ok(w)
}

fn cb_precoder_into(h_hat: &ChannelSet, topology: &Topology, norms: &[Vec<f64>], w: &mut ChannelSet) -> Result<()> {
    w.data.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
    for (k, set) in topology.serving_sets.iter().enumerate() {
        for &m in set {
            let e = norms[m][k];
            if !(e > 0.0) {
                return Err(Error::DegenerateLink { ap: m, ue: k });
            }
            let scale = 1.0 / e.sqrt();
            for (dst, src) in w.get_mut(m, k).iter_mut().zip(h_hat.get(m, k)) {
                *dst = src * scale;
            }
        }
    }
    Ok(())
}

/// Stacked-vector layout of the serving sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ServingLayout {
    pub serving_sets: Vec<Vec<usize>>,
    pub offsets: Vec<usize>,
    pub len: usize,
}

impl ServingLayout {
    pub fn new(serving_sets: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(serving_sets.len());
        let mut len = 0;
        for set in serving_sets {
            offsets.push(len);
            len += set.len();
        }
        Self { serving_sets: serving_sets.to_vec(), offsets, len }
    }

    pub fn block(&self, ue: usize) -> std::ops::Range<usize> {
        self.offsets[ue]..self.offsets[ue] + self.serving_sets[ue].len()
    }

    pub fn position(&self, ue: usize, ap: usize) -> Option<usize> {
        self.serving_sets[ue].binary_search(&ap).ok()
    }
}

/// Everything produced by one Monte Carlo trial.
#[derive(Debug, Clone)]
pub struct TrialSample {
    pub h: ChannelSet,
    pub h_hat: ChannelSet,
    pub w: ChannelSet,
    /// `gains[i][offsets[k] + pos] = h[M_k[pos]][i]^H w[M_k[pos]][k]`
    pub gains: Vec<Vec<Complex64>>,
}

/// Runs trials for one scenario; reuses its buffers between trials.
#[derive(Debug, Clone)]
pub struct TrialEngine {
    pub layout: ServingLayout,
    sampler: ChannelSampler,
    estimator: MmseEstimator,
    topology: Topology,
}

impl TrialEngine {
    pub fn new(scenario: &Scenario, config: &SystemConfig) -> Result<Self> {
        Ok(Self {
            layout: ServingLayout::new(&scenario.topology.serving_sets),
            sampler: ChannelSampler::new(&scenario.spatial)?,
            estimator: MmseEstimator::new(&scenario.spatial, &scenario.pilots, config)?,
            topology: scenario.topology.clone(),
        })
    }

    pub fn norm_constants(&self) -> &[Vec<f64>] {
        self.estimator.norm_constants()
    }

    pub fn new_sample(&self) -> TrialSample {
        let (m, k, n) = (self.topology.num_aps(), self.topology.num_ues(), self.estimator.antennas);
        TrialSample {
            h: ChannelSet::zeros(m, k, n),
            h_hat: ChannelSet::zeros(m, k, n),
            w: ChannelSet::zeros(m, k, n),
            gains: vec![vec![Complex64::new(0.0, 0.0); self.layout.len]; k],
        }
    }

    pub fn run_trial(&self, rng: &mut impl Rng, s: &mut TrialSample) -> Result<()> {
        self.sampler.sample_into(rng, &mut s.h);
        self.estimator.estimate_into(&s.h, rng, &mut s.h_hat);
        cb_precoder_into(&s.h_hat, &self.topology, self.estimator.norm_constants(), &mut s.w)?;
        for (i, row) in s.gains.iter_mut().enumerate() {
            for (k, set) in self.layout.serving_sets.iter().enumerate() {
                let off = self.layout.offsets[k];
                for (pos, &m) in set.iter().enumerate() {
                    row[off + pos] = inner(s.h.get(m, i), s.w.get(m, k));
                }
            }
        }
        Ok(())
    }
}

/// Order in which an NCJT UE successively decodes the symbols of its serving APs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodingOrder {
    /// Ascending AP index.
    #[default]
    AscendingApIndex,
    /// Strongest mean gain first.
    StrongestFirst,
}

/// Channel/precoder moments that multiply the square-root powers in the SINR
/// expressions. Power coefficients are not folded in.
#[derive(Debug, Clone)]
pub struct PrecodingStatistics {
    pub num_aps: usize,
    pub num_ues: usize,
    pub layout: ServingLayout,
    /// `Re E[h_{m,k}^H w_{m,k}]` at stacked index of `(k, m)`.
    pub b: Vec<f64>,
    /// Monte Carlo standard error of each `b` entry.
    pub b_stderr: Vec<f64>,
    /// `sqrt(E||h_hat||^2)` from the closed form.
    pub b_closed_form: Vec<f64>,
    /// `E[h_{m,i}^H w_{m,k}]` as `mean_gain[i][stacked(k, m)]`.
    pub mean_gain: Vec<Vec<Complex64>>,
    /// `Re E[g g^H]` over the serving block of `k` seen by victim `i`, at `[k * K + i]`.
    pub raw_second_moment: Vec<DMatrix<f64>>,
    /// Interference matrices `C_coh[k][i]` at `[k * K + i]`; for `k == i`
    /// the outer product `b b^T` is removed. PSD-projected.
    pub interference: Vec<DMatrix<f64>>,
    /// Per NCJT UE, serving-set positions in decoding order.
    pub decoding_order: Vec<Vec<usize>>,
    pub sigma2_w: f64,
    pub trials: usize,
    pub low_trial_count: bool,
}

impl PrecodingStatistics {
    /// Builds the statistics from the signal means `b` and the raw second
    /// moments `Re E[g g^H]` (indexed `[k * K + i]`), with ascending-index
    /// decoding. Standard errors and the closed form are left at zero.
    pub fn from_moments(
        num_aps: usize,
        layout: ServingLayout,
        b: Vec<f64>,
        mean_gain: Vec<Vec<Complex64>>,
        raw_second_moment: Vec<DMatrix<f64>>,
        sigma2_w: f64,
    ) -> Result<Self> {
        let ues = layout.serving_sets.len();
        if b.len() != layout.len || raw_second_moment.len() != ues * ues {
            return Err(Error::Domain("moment dimensions disagree with the serving layout".into()));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite signal moment".into()));
        }
        let mut interference = Vec::with_capacity(ues * ues);
        for k in 0..ues {
            let block = layout.block(k);
            for i in 0..ues {
                let mut c = raw_second_moment[k * ues + i].clone();
                if c.nrows() != block.len() {
                    return Err(Error::Domain(format!("moment block ({k}, {i}) has the wrong size")));
                }
                if k == i {
                    let bk = &b[block.clone()];
                    for l in 0..bk.len() {
                        for r in 0..bk.len() {
                            c[(l, r)] -= bk[l] * bk[r];
                        }
                    }
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite moment for UE pair ({k}, {i})")));
                }
                interference.push(project_psd(&c));
            }
        }
        let n = layout.len;
        Ok(Self {
            num_aps,
            num_ues: ues,
            layout,
            b,
            b_stderr: vec![0.0; n],
            b_closed_form: vec![0.0; n],
            mean_gain,
            raw_second_moment,
            interference,
            decoding_order: Vec::new(),
            sigma2_w,
            trials: 0,
            low_trial_count: false,
        }
        .with_decoding_order(DecodingOrder::AscendingApIndex))
    }

    #[inline]
    pub fn pair(&self, k: usize, i: usize) -> usize {
        k * self.num_ues + i
    }

    /// `E|h_{m,i}^H w_{m,k}|^2` for `m = M_k[pos]`.
    #[inline]
    pub fn cross_power(&self, k: usize, i: usize, pos: usize) -> f64 {
        self.raw_second_moment[self.pair(k, i)][(pos, pos)]
    }

    /// Self-link variance `E|h^H w|^2 - b^2` of UE `s` at serving position `pos`.
    #[inline]
    pub fn self_variance(&self, s: usize, pos: usize) -> f64 {
        let b = self.b[self.layout.offsets[s] + pos];
        (self.cross_power(s, s, pos) - b * b).max(0.0)
    }

    /// Length-`M` vector `b_coh_i`, zero off the serving set.
    pub fn b_coh(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_aps];
        for (pos, &m) in self.layout.serving_sets[i].iter().enumerate() {
            out[m] = self.b[self.layout.offsets[i] + pos];
        }
        out
    }

    /// `M x M` matrix `C_coh_{ki}`.
    pub fn c_coh(&self, k: usize, i: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.num_aps, self.num_aps);
        let set = &self.layout.serving_sets[k];
        let c = &self.interference[self.pair(k, i)];
        for (a, &l) in set.iter().enumerate() {
            for (b, &r) in set.iter().enumerate() {
                out[(l, r)] = c[(a, b)];
            }
        }
        out
    }

    pub fn b_nc(&self, m: usize, s: usize) -> f64 {
        self.layout.position(s, m).map_or(0.0, |pos| self.b[self.layout.offsets[s] + pos])
    }

    /// Length-`M` vector with entries `E|h_{m,i}^H w_{m,s}|^2`.
    pub fn c_nc(&self, s: usize, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_aps];
        for (pos, &m) in self.layout.serving_sets[s].iter().enumerate() {
            out[m] = self.cross_power(s, i, pos);
        }
        out
    }

    pub fn var_nc(&self, m: usize, s: usize) -> f64 {
        self.layout.position(s, m).map_or(0.0, |pos| self.self_variance(s, pos))
    }

    /// Decoding rank of each serving position of UE `s` (0 = decoded first).
    pub fn decoding_rank(&self, s: usize) -> Vec<usize> {
        let order = &self.decoding_order[s];
        let mut rank = vec![0; order.len()];
        for (r, &pos) in order.iter().enumerate() {
            rank[pos] = r;
        }
        rank
    }

    pub fn with_decoding_order(mut self, order: DecodingOrder) -> Self {
        self.decoding_order = (0..self.num_ues)
            .map(|s| {
                let block = self.layout.block(s);
                let mut positions: Vec<usize> = (0..block.len()).collect();
                if order == DecodingOrder::StrongestFirst {
                    let b = &self.b[block];
                    positions.sort_by(|&x, &y| b[y].total_cmp(&b[x]).then(x.cmp(&y)));
                }
                positions
            })
            .collect();
        self
    }

    /// Largest `|b - b_closed| / stderr` over all serving pairs.
    pub fn max_b_zscore(&self) -> f64 {
        self.b
            .iter()
            .zip(&self.b_closed_form)
            .zip(&self.b_stderr)
            .map(|((b, c), se)| (b - c).abs() / se.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// Clamps negative eigenvalues of the symmetric part to zero.
pub fn project_psd(c: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (c + c.transpose()) * 0.5;
    if sym.nrows() == 1 {
        return sym.map(|v| v.max(0.0));
    }
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() >= 0.0 {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

#[derive(Debug, Clone)]
struct Accumulator {
    sum_g: Vec<Vec<Complex64>>,
    sum_re2: Vec<f64>,
    sum_gg: Vec<DMatrix<f64>>,
}

impl Accumulator {
    fn new(layout: &ServingLayout, ues: usize) -> Self {
        let mut sum_gg = Vec::with_capacity(ues * ues);
        for k in 0..ues {
            let n = layout.serving_sets[k].len();
            for _ in 0..ues {
                sum_gg.push(DMatrix::zeros(n, n));
            }
        }
        Self {
            sum_g: vec![vec![Complex64::new(0.0, 0.0); layout.len]; ues],
            sum_re2: vec![0.0; layout.len],
            sum_gg,
        }
    }

    fn add(&mut self, layout: &ServingLayout, gains: &[Vec<Complex64>]) {
        let ues = gains.len();
        for (i, g) in gains.iter().enumerate() {
            for (acc, v) in self.sum_g[i].iter_mut().zip(g) {
                *acc += v;
            }
            for k in 0..ues {
                let block = &g[layout.block(k)];
                let mat = &mut self.sum_gg[k * ues + i];
                let n = block.len();
                for r in 0..n {
                    let gr = block[r];
                    for l in 0..=r {
                        let gl = block[l];
                        mat[(l, r)] += gl.re * gr.re + gl.im * gr.im;
                    }
                }
            }
        }
        for k in 0..ues {
            for idx in layout.block(k) {
                let re = gains[k][idx].re;
                self.sum_re2[idx] += re * re;
            }
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        for (a, b) in self.sum_g.iter_mut().zip(&other.sum_g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.sum_re2.iter_mut().zip(&other.sum_re2) {
            *x += y;
        }
        for (a, b) in self.sum_gg.iter_mut().zip(&other.sum_gg) {
            *a += b;
        }
    }
}

/// Monte Carlo estimate of all precoding moments over `config.mc_trials`
/// independent channel and pilot-noise realizations.
pub fn estimate_statistics(scenario: &Scenario, config: &SystemConfig, seed: u64) -> Result<PrecodingStatistics> {
    let engine = TrialEngine::new(scenario, config)?;
    let layout = engine.layout.clone();
    let ues = scenario.topology.num_ues();
    let trials = config.mc_trials.max(1);
    let blocks = trials.div_ceil(TRIAL_BLOCK);

    let mut total = Accumulator::new(&layout, ues);
    let mut sample = engine.new_sample();
    for block in 0..blocks {
        let mut rng = stream_rng(derive_seed(seed, seeding::TAG_TRIAL_BLOCK, block as u64), 0);
        let count = TRIAL_BLOCK.min(trials - block * TRIAL_BLOCK);
        let mut acc = Accumulator::new(&layout, ues);
        for _ in 0..count {
            engine.run_trial(&mut rng, &mut sample)?;
            acc.add(&layout, &sample.gains);
        }
        total.merge(&acc);
    }

    let inv_n = 1.0 / trials as f64;
    let mean_gain: Vec<Vec<Complex64>> = total.sum_g.iter().map(|row| row.iter().map(|v| v * inv_n).collect()).collect();
    let mut b = vec![0.0; layout.len];
    let mut b_stderr = vec![0.0; layout.len];
    let mut b_closed_form = vec![0.0; layout.len];
    let norms = engine.norm_constants();
    for k in 0..ues {
        for (pos, &m) in layout.serving_sets[k].iter().enumerate() {
            let idx = layout.offsets[k] + pos;
            let mean = mean_gain[k][idx].re;
            b[idx] = mean;
            let var = (total.sum_re2[idx] * inv_n - mean * mean).max(0.0);
            b_stderr[idx] = (var / (trials as f64 - 1.0).max(1.0)).sqrt();
            b_closed_form[idx] = norms[m][k].sqrt();
        }
    }

    let mut raw_second_moment = Vec::with_capacity(ues * ues);
    for k in 0..ues {
        for i in 0..ues {
            let mut m2 = total.sum_gg[k * ues + i].clone() * inv_n;
            m2.fill_lower_triangle_with_upper_triangle();
            raw_second_moment.push(m2);
        }
    }
    let mut stats = PrecodingStatistics::from_moments(scenario.topology.num_aps(), layout, b, mean_gain, raw_second_moment, config.noise_power_w())?;
    stats.b_stderr = b_stderr;
    stats.b_closed_form = b_closed_form;
    stats.trials = trials;
    stats.low_trial_count = trials < MIN_TRIALS;
    Ok(stats)
}
