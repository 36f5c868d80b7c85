//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use cellfree::chanstat::{PrecodingStatistics, TrialEngine, TRIAL_BLOCK};
use cellfree::netgen::Scenario;
use cellfree::rates::{ModeAssignment, PowerSolution};
use cellfree::seeding::{derive_seed, stream_rng, TAG_TRIAL_BLOCK};
use cellfree::SystemConfig;
use num_complex::Complex64;
use rand::Rng;

/// Small but fully featured network: pilot sharing, overlapping serving sets.
pub fn small_config() -> SystemConfig {
    SystemConfig {
        num_aps: 5,
        antennas_per_ap: 2,
        num_ues: 6,
        serving_set_size: 3,
        tau_p: 4,
        area_m: 300.0,
        mc_trials: 512,
        ..SystemConfig::default()
    }
}

/// The per-trial gains `g[i][stacked(k, m)] = h_{m,i}^H w_{m,k}` drawn with
/// exactly the random streams the statistics estimator uses for `seed`.
pub fn gain_samples(scenario: &Scenario, config: &SystemConfig, seed: u64) -> Vec<Vec<Vec<Complex64>>> {
    let engine = TrialEngine::new(scenario, config).unwrap();
    let mut sample = engine.new_sample();
    let trials = config.mc_trials;
    let mut out = Vec::with_capacity(trials);
    for block in 0..trials.div_ceil(TRIAL_BLOCK) {
        let mut rng = stream_rng(derive_seed(seed, TAG_TRIAL_BLOCK, block as u64), 0);
        for _ in 0..TRIAL_BLOCK.min(trials - block * TRIAL_BLOCK) {
            engine.run_trial(&mut rng, &mut sample).unwrap();
            out.push(sample.gains.clone());
        }
    }
    out
}

/// Per-UE and per-stream SINRs written as explicit expectations over the
/// sampled gains: `E|D_ki|^2` summed over interferers, minus the desired mean,
/// with NCJT self streams cancelled up to and including the decoded one
/// (ascending AP index). Means of the desired gain use the real part.
pub struct ExplicitSinr {
    pub cjt: Vec<Option<f64>>,
    pub ncjt: Vec<Vec<f64>>,
}

pub fn explicit_sinr(
    samples: &[Vec<Vec<Complex64>>],
    stats: &PrecodingStatistics,
    power: &PowerSolution,
    modes: &ModeAssignment,
) -> ExplicitSinr {
    let layout = &stats.layout;
    let k_count = stats.num_ues;
    let n = samples.len() as f64;
    let sqrt_p = |m: usize, k: usize| power.p[m][k].sqrt();
    let mean_re = |i: usize, idx: usize| samples.iter().map(|s| s[i][idx].re).sum::<f64>() / n;

    let mut cjt = vec![None; k_count];
    let mut ncjt = vec![Vec::new(); k_count];
    for i in 0..k_count {
        // sum over interferers k of E|D_ki|^2
        let mut total = 0.0;
        for k in 0..k_count {
            let set = &layout.serving_sets[k];
            let off = layout.offsets[k];
            let mut acc = 0.0;
            for s in samples {
                if modes.is_cjt(k) {
                    let mut d = Complex64::new(0.0, 0.0);
                    for (pos, &m) in set.iter().enumerate() {
                        d += s[i][off + pos] * sqrt_p(m, k);
                    }
                    acc += d.norm_sqr();
                } else {
                    for (pos, &m) in set.iter().enumerate() {
                        acc += power.p[m][k] * s[i][off + pos].norm_sqr();
                    }
                }
            }
            total += acc / n;
        }
        let set = &layout.serving_sets[i];
        let off = layout.offsets[i];
        if modes.is_cjt(i) {
            let desired: f64 = set.iter().enumerate().map(|(pos, &m)| sqrt_p(m, i) * mean_re(i, off + pos)).sum();
            let signal = desired * desired;
            cjt[i] = Some(if signal == 0.0 { 0.0 } else { signal / (total - signal + stats.sigma2_w) });
        } else {
            let mut cancelled = 0.0;
            let mut out = vec![0.0; set.len()];
            // serving sets are stored in ascending AP order
            for (pos, &m) in set.iter().enumerate() {
                let b = mean_re(i, off + pos);
                let signal = power.p[m][i] * b * b;
                cancelled += signal;
                out[pos] = if signal == 0.0 { 0.0 } else { signal / (total - cancelled + stats.sigma2_w) };
            }
            ncjt[i] = out;
        }
    }
    ExplicitSinr { cjt, ncjt }
}

/// Random power allocation meeting every per-AP budget, zero off the serving sets.
pub fn random_power(rng: &mut impl Rng, stats: &PrecodingStatistics, max_ap_power_w: f64) -> PowerSolution {
    let mut p = PowerSolution::zeros(stats.num_aps, stats.num_ues);
    for (k, set) in stats.layout.serving_sets.iter().enumerate() {
        for &m in set {
            p.p[m][k] = rng.random::<f64>();
        }
    }
    for row in p.p.iter_mut() {
        let total: f64 = row.iter().sum();
        let budget = max_ap_power_w * rng.random_range(0.2..1.0);
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v *= budget / total);
        }
    }
    p
}

pub fn random_modes(rng: &mut impl Rng, num_ues: usize) -> ModeAssignment {
    let bits: String = (0..num_ues).map(|_| if rng.random::<bool>() { '1' } else { '0' }).collect();
    ModeAssignment::from_bits(&bits).unwrap()
}

/// Ergodic rate of each UE when the receiver knows its instantaneous channel
/// gains (genie decoding), averaged over `trials` fresh realizations. NCJT
/// UEs decode their streams in ascending AP order, each stream seeing the
/// not-yet-decoded own streams as interference.
pub fn genie_rates(
    engine: &TrialEngine,
    power: &PowerSolution,
    modes: &ModeAssignment,
    sigma2: f64,
    prelog: f64,
    trials: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let layout = &engine.layout;
    let k_count = layout.serving_sets.len();
    let mut sample = engine.new_sample();
    let mut sums = vec![0.0; k_count];
    for _ in 0..trials {
        engine.run_trial(rng, &mut sample).unwrap();
        for i in 0..k_count {
            let g = &sample.gains[i];
            let stream = |k: usize, pos: usize| g[layout.offsets[k] + pos] * power.p[layout.serving_sets[k][pos]][k].sqrt();
            let mut other = sigma2;
            for k in (0..k_count).filter(|&k| k != i) {
                let len = layout.serving_sets[k].len();
                if modes.is_cjt(k) {
                    other += (0..len).map(|pos| stream(k, pos)).sum::<Complex64>().norm_sqr();
                } else {
                    other += (0..len).map(|pos| stream(k, pos).norm_sqr()).sum::<f64>();
                }
            }
            let len = layout.serving_sets[i].len();
            if modes.is_cjt(i) {
                let s = (0..len).map(|pos| stream(i, pos)).sum::<Complex64>().norm_sqr();
                sums[i] += prelog * (1.0 + s / other).log2();
            } else {
                let mut remaining: f64 = (0..len).map(|pos| stream(i, pos).norm_sqr()).sum();
                for pos in 0..len {
                    let s = stream(i, pos).norm_sqr();
                    remaining -= s;
                    sums[i] += prelog * (1.0 + s / (other + remaining.max(0.0))).log2();
                }
            }
        }
    }
    sums.iter().map(|s| s / trials as f64).collect()
}

/// Largest `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
