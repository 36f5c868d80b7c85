//! Hardening-bound SINRs, achievable rates and fronthaul consumption for a
//! given serving-mode partition and power allocation.

use std::fmt;

use crate::chanstat::{PrecodingStatistics, ServingLayout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServingMode {
    /// Coherent joint transmission: every serving AP sends the same symbol.
    Cjt,
    /// Non-coherent joint transmission: each serving AP sends its own stream.
    Ncjt,
}

/// Partition of the UEs into `G_coh` and `G_nc`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeAssignment {
    modes: Vec<ServingMode>,
}

impl ModeAssignment {
    pub fn new(modes: Vec<ServingMode>) -> Self {
        Self { modes }
    }

    pub fn uniform(num_ues: usize, mode: ServingMode) -> Self {
        Self { modes: vec![mode; num_ues] }
    }

    /// Parses a string such as `"010101"` where `1` marks a CJT UE.
    pub fn from_bits(bits: &str) -> Result<Self> {
        bits.trim()
            .chars()
            .map(|c| match c {
                '1' => Ok(ServingMode::Cjt),
                '0' => Ok(ServingMode::Ncjt),
                other => Err(Error::Mode(format!("invalid mode character {other:?} (expected 0 or 1)"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    /// UE `k` is CJT iff `k` is odd, i.e. `0101...`.
    pub fn alternating(num_ues: usize) -> Self {
        Self::new((0..num_ues).map(|k| if k % 2 == 1 { ServingMode::Cjt } else { ServingMode::Ncjt }).collect())
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn mode(&self, ue: usize) -> ServingMode {
        self.modes[ue]
    }

    pub fn modes(&self) -> &[ServingMode] {
        &self.modes
    }

    pub fn is_cjt(&self, ue: usize) -> bool {
        self.modes[ue] == ServingMode::Cjt
    }

    pub fn g_coh(&self) -> Vec<usize> {
        (0..self.modes.len()).filter(|&k| self.is_cjt(k)).collect()
    }

    pub fn g_nc(&self) -> Vec<usize> {
        (0..self.modes.len()).filter(|&k| !self.is_cjt(k)).collect()
    }

    pub fn count_cjt(&self) -> usize {
        self.modes.iter().filter(|m| **m == ServingMode::Cjt).count()
    }
}

impl fmt::Display for ModeAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.modes {
            f.write_str(if *m == ServingMode::Cjt { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Power coefficients `p[ap][ue]` in watts.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSolution {
    pub p: Vec<Vec<f64>>,
}

impl PowerSolution {
    pub fn zeros(num_aps: usize, num_ues: usize) -> Self {
        Self { p: vec![vec![0.0; num_ues]; num_aps] }
    }

    /// `P_max / |K_m|` on every serving pair.
    pub fn equal_split(layout: &ServingLayout, num_aps: usize, max_ap_power_w: f64) -> Self {
        let num_ues = layout.serving_sets.len();
        let mut load = vec![0usize; num_aps];
        for set in &layout.serving_sets {
            for &m in set {
                load[m] += 1;
            }
        }
        let mut out = Self::zeros(num_aps, num_ues);
        for (k, set) in layout.serving_sets.iter().enumerate() {
            for &m in set {
                out.p[m][k] = max_ap_power_w / load[m] as f64;
            }
        }
        out
    }

    /// `sqrt(p)` in stacked serving-vector order.
    pub fn stacked_sqrt(&self, layout: &ServingLayout) -> Vec<f64> {
        let mut out = vec![0.0; layout.len];
        for (k, set) in layout.serving_sets.iter().enumerate() {
            for (pos, &m) in set.iter().enumerate() {
                out[layout.offsets[k] + pos] = self.p[m][k].max(0.0).sqrt();
            }
        }
        out
    }

    pub fn from_stacked_sqrt(layout: &ServingLayout, num_aps: usize, sqrt_p: &[f64]) -> Self {
        let mut out = Self::zeros(num_aps, layout.serving_sets.len());
        for (k, set) in layout.serving_sets.iter().enumerate() {
            for (pos, &m) in set.iter().enumerate() {
                let v = sqrt_p[layout.offsets[k] + pos];
                out.p[m][k] = v * v;
            }
        }
        out
    }

    pub fn ap_total(&self, ap: usize) -> f64 {
        self.p[ap].iter().sum()
    }

    /// Largest `sum_k p[m][k] - P_max` over APs (nonpositive when feasible).
    pub fn max_power_excess(&self, max_ap_power_w: f64) -> f64 {
        (0..self.p.len()).map(|m| self.ap_total(m) - max_ap_power_w).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Checks nonnegativity, zero off the serving sets and the per-AP budget.
    pub fn check(&self, layout: &ServingLayout, max_ap_power_w: f64, tol: f64) -> Result<()> {
        for (m, row) in self.p.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::Domain(format!("power p[{m}][{k}] = {v} is not a nonnegative number")));
                }
                if v != 0.0 && layout.position(k, m).is_none() {
                    return Err(Error::Domain(format!("AP {m} does not serve UE {k} but has power {v}")));
                }
            }
            if self.ap_total(m) > max_ap_power_w + tol {
                return Err(Error::Domain(format!("AP {m} exceeds its power budget")));
            }
        }
        Ok(())
    }
}

/// Per-UE and per-AP outcome of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub prelog: f64,
    pub modes: ModeAssignment,
    /// SINR of each CJT UE (`None` for NCJT UEs).
    pub sinr_cjt: Vec<Option<f64>>,
    /// SINR of each NCJT symbol stream, per serving-set position (empty for CJT UEs).
    pub sinr_ncjt: Vec<Vec<f64>>,
    /// Per-stream NCJT rate, same layout as `sinr_ncjt`.
    pub rate_ncjt_per_ap: Vec<Vec<f64>>,
    pub rate_bps_hz: Vec<f64>,
    pub fronthaul_bps_hz: Vec<f64>,
    pub sum_rate_bps_hz: f64,
}

pub fn rate_from_sinr(sinr: f64, prelog: f64) -> f64 {
    prelog * (1.0 + sinr.max(0.0)).log2()
}

fn check_shape(stats: &PrecodingStatistics, power: &PowerSolution, modes: &ModeAssignment) -> Result<()> {
    if modes.len() != stats.num_ues || power.p.len() != stats.num_aps || power.p.iter().any(|r| r.len() != stats.num_ues) {
        return Err(Error::Domain("statistics, power and mode dimensions disagree".into()));
    }
    Ok(())
}

/// Interference plus noise seen by `victim` from every stream, before any
/// successive cancellation. `sqrt_p` is in stacked order.
fn raw_denominator(stats: &PrecodingStatistics, sqrt_p: &[f64], modes: &ModeAssignment, victim: usize) -> f64 {
    let layout = &stats.layout;
    let mut total = stats.sigma2_w;
    for k in 0..stats.num_ues {
        let block = &sqrt_p[layout.block(k)];
        let pair = stats.pair(k, victim);
        if modes.is_cjt(k) {
            let c = &stats.interference[pair];
            for (l, &pl) in block.iter().enumerate() {
                if pl == 0.0 {
                    continue;
                }
                for (r, &pr) in block.iter().enumerate() {
                    total += pl * c[(l, r)] * pr;
                }
            }
        } else {
            let m2 = &stats.raw_second_moment[pair];
            for (pos, &v) in block.iter().enumerate() {
                total += v * v * m2[(pos, pos)];
            }
        }
    }
    total
}

/// Effective SINR of CJT UE `ue`.
pub fn sinr_cjt(stats: &PrecodingStatistics, power: &PowerSolution, modes: &ModeAssignment, ue: usize) -> Result<f64> {
    check_shape(stats, power, modes)?;
    if !modes.is_cjt(ue) {
        return Err(Error::Mode(format!("UE {ue} is not in CJT mode")));
    }
    let sqrt_p = power.stacked_sqrt(&stats.layout);
    Ok(sinr_cjt_stacked(stats, &sqrt_p, modes, ue))
}

fn sinr_cjt_stacked(stats: &PrecodingStatistics, sqrt_p: &[f64], modes: &ModeAssignment, ue: usize) -> f64 {
    let block = stats.layout.block(ue);
    let signal: f64 = sqrt_p[block.clone()].iter().zip(&stats.b[block]).map(|(p, b)| p * b).sum();
    let num = signal * signal;
    if num == 0.0 {
        return 0.0;
    }
    num / raw_denominator(stats, sqrt_p, modes, ue)
}

/// Effective SINR of the stream that AP `ap` sends to NCJT UE `ue`.
pub fn sinr_ncjt(stats: &PrecodingStatistics, power: &PowerSolution, modes: &ModeAssignment, ue: usize, ap: usize) -> Result<f64> {
    check_shape(stats, power, modes)?;
    if modes.is_cjt(ue) {
        return Err(Error::Mode(format!("UE {ue} is not in NCJT mode")));
    }
    let pos = stats
        .layout
        .position(ue, ap)
        .ok_or_else(|| Error::Domain(format!("AP {ap} does not serve UE {ue}")))?;
    let sqrt_p = power.stacked_sqrt(&stats.layout);
    Ok(sinr_ncjt_stacked(stats, &sqrt_p, modes, ue)[pos])
}

/// SINRs of all streams of NCJT UE `ue`, indexed by serving position.
fn sinr_ncjt_stacked(stats: &PrecodingStatistics, sqrt_p: &[f64], modes: &ModeAssignment, ue: usize) -> Vec<f64> {
    let block = stats.layout.block(ue);
    let base = raw_denominator(stats, sqrt_p, modes, ue);
    let p = &sqrt_p[block.clone()];
    let b = &stats.b[block];
    let mut out = vec![0.0; p.len()];
    let mut cancelled = 0.0;
    for &pos in &stats.decoding_order[ue] {
        let gain = p[pos] * p[pos] * b[pos] * b[pos];
        cancelled += gain;
        out[pos] = if gain == 0.0 { 0.0 } else { gain / (base - cancelled) };
    }
    out
}

/// `C_m`: CJT UEs cost their full rate at every serving AP, NCJT UEs only
/// the stream that AP carries.
pub fn fronthaul_load(report: &RateReport, layout: &ServingLayout, ap: usize) -> f64 {
    let mut load = 0.0;
    for (k, set) in layout.serving_sets.iter().enumerate() {
        if let Some(pos) = set.iter().position(|&m| m == ap) {
            load += if report.modes.is_cjt(k) { report.rate_bps_hz[k] } else { report.rate_ncjt_per_ap[k][pos] };
        }
    }
    load
}

/// Full rate and fronthaul report for a power allocation.
pub fn evaluate(stats: &PrecodingStatistics, power: &PowerSolution, modes: &ModeAssignment, prelog: f64) -> Result<RateReport> {
    check_shape(stats, power, modes)?;
    power.check(&stats.layout, f64::INFINITY, 0.0)?;
    let sqrt_p = power.stacked_sqrt(&stats.layout);
    evaluate_stacked(stats, &sqrt_p, modes, prelog)
}

pub(crate) fn evaluate_stacked(stats: &PrecodingStatistics, sqrt_p: &[f64], modes: &ModeAssignment, prelog: f64) -> Result<RateReport> {
    let k_count = stats.num_ues;
    let mut sinr_cjt = vec![None; k_count];
    let mut sinr_ncjt = vec![Vec::new(); k_count];
    let mut rate_ncjt_per_ap = vec![Vec::new(); k_count];
    let mut rate = vec![0.0; k_count];
    for k in 0..k_count {
        if modes.is_cjt(k) {
            let g = sinr_cjt_stacked(stats, sqrt_p, modes, k);
            rate[k] = rate_from_sinr(g, prelog);
            sinr_cjt[k] = Some(g);
        } else {
            let g = sinr_ncjt_stacked(stats, sqrt_p, modes, k);
            let r: Vec<f64> = g.iter().map(|&x| rate_from_sinr(x, prelog)).collect();
            rate[k] = r.iter().sum();
            sinr_ncjt[k] = g;
            rate_ncjt_per_ap[k] = r;
        }
    }
    if rate.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numerical("non-finite rate".into()));
    }
    let mut report = RateReport {
        prelog,
        modes: modes.clone(),
        sinr_cjt,
        sinr_ncjt,
        rate_ncjt_per_ap,
        sum_rate_bps_hz: rate.iter().sum(),
        rate_bps_hz: rate,
        fronthaul_bps_hz: Vec::new(),
    };
    report.fronthaul_bps_hz = (0..stats.num_aps).map(|m| fronthaul_load(&report, &stats.layout, m)).collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random moments with a PSD second moment that dominates `b b^T` on the diagonal blocks.
    fn random_stats(rng: &mut ChaCha8Rng, num_aps: usize, sets: &[Vec<usize>], sigma2: f64) -> PrecodingStatistics {
        let layout = ServingLayout::new(sets);
        let ues = sets.len();
        let b: Vec<f64> = (0..layout.len).map(|_| rng.random_range(0.2..2.0)).collect();
        let mut m2 = Vec::new();
        for k in 0..ues {
            let n = sets[k].len();
            for i in 0..ues {
                let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
                let mut c = &a * a.transpose();
                if k == i {
                    let bk = DMatrix::from_column_slice(n, 1, &b[layout.block(k)]);
                    c += &bk * bk.transpose();
                }
                m2.push(c);
            }
        }
        let mean_gain = vec![vec![Complex64::new(0.0, 0.0); layout.len]; ues];
        PrecodingStatistics::from_moments(num_aps, layout, b, mean_gain, m2, sigma2).unwrap()
    }

    fn random_power(rng: &mut ChaCha8Rng, stats: &PrecodingStatistics) -> PowerSolution {
        let mut p = PowerSolution::zeros(stats.num_aps, stats.num_ues);
        for (k, set) in stats.layout.serving_sets.iter().enumerate() {
            for &m in set {
                p.p[m][k] = rng.random_range(0.0..0.2);
            }
        }
        p
    }

    fn scalar_stats(b: f64, second_moment: f64, sigma2: f64) -> PrecodingStatistics {
        let layout = ServingLayout::new(&[vec![0]]);
        let m2 = vec![DMatrix::from_element(1, 1, second_moment)];
        PrecodingStatistics::from_moments(1, layout, vec![b], vec![vec![Complex64::new(b, 0.0)]], m2, sigma2).unwrap()
    }

    #[test]
    fn rate_from_sinr_examples() {
        assert_eq!(rate_from_sinr(0.0, 0.95), 0.0);
        assert!((rate_from_sinr(1.0, 190.0 / 200.0) - 0.95).abs() < 1e-15);
        assert!((rate_from_sinr(3.0, 1.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_link_matches_hand_formula() {
        let (b, m2, s2, p) = (2.0, 5.0, 0.5, 0.3);
        let stats = scalar_stats(b, m2, s2);
        let mut power = PowerSolution::zeros(1, 1);
        power.p[0][0] = p;
        let expected = p * b * b / (p * (m2 - b * b) + s2);
        let cjt = ModeAssignment::uniform(1, ServingMode::Cjt);
        let nc = ModeAssignment::uniform(1, ServingMode::Ncjt);
        assert!((sinr_cjt(&stats, &power, &cjt, 0).unwrap() - expected).abs() < 1e-14);
        assert!((sinr_ncjt(&stats, &power, &nc, 0, 0).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_power_gives_zero_sinr() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stats = random_stats(&mut rng, 3, &[vec![0, 1], vec![1, 2]], 0.1);
        let power = PowerSolution::zeros(3, 2);
        let modes = ModeAssignment::from_bits("10").unwrap();
        let report = evaluate(&stats, &power, &modes, 0.95).unwrap();
        assert_eq!(report.sum_rate_bps_hz, 0.0);
        assert_eq!(sinr_cjt(&stats, &power, &modes, 0).unwrap(), 0.0);
        assert_eq!(sinr_ncjt(&stats, &power, &modes, 1, 2).unwrap(), 0.0);
    }

    #[test]
    fn wrong_mode_and_ap_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stats = random_stats(&mut rng, 3, &[vec![0, 1], vec![1, 2]], 0.1);
        let power = random_power(&mut rng, &stats);
        let modes = ModeAssignment::from_bits("10").unwrap();
        assert!(matches!(sinr_cjt(&stats, &power, &modes, 1), Err(Error::Mode(_))));
        assert!(matches!(sinr_ncjt(&stats, &power, &modes, 0, 0), Err(Error::Mode(_))));
        assert!(matches!(sinr_ncjt(&stats, &power, &modes, 1, 0), Err(Error::Domain(_))));
        assert!(ModeAssignment::from_bits("10x").is_err());
    }

    #[test]
    fn off_serving_power_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stats = random_stats(&mut rng, 3, &[vec![0, 1], vec![1, 2]], 0.1);
        let mut power = random_power(&mut rng, &stats);
        power.p[2][0] = 0.1;
        assert!(evaluate(&stats, &power, &ModeAssignment::from_bits("11").unwrap(), 0.95).is_err());
    }

    #[test]
    fn ncjt_denominators_shrink_along_decoding_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stats = random_stats(&mut rng, 4, &[vec![0, 1, 2, 3], vec![0, 2], vec![1, 3]], 0.05);
        let power = random_power(&mut rng, &stats);
        let modes = ModeAssignment::from_bits("010").unwrap();
        let report = evaluate(&stats, &power, &modes, 1.0).unwrap();
        let b = &stats.b[stats.layout.block(0)];
        let denominators: Vec<f64> = (0..4).map(|pos| power.p[pos][0] * b[pos] * b[pos] / report.sinr_ncjt[0][pos]).collect();
        for w in denominators.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn fronthaul_load_examples() {
        let layout = ServingLayout::new(&[vec![0], vec![0, 1]]);
        let base = RateReport {
            prelog: 1.0,
            modes: ModeAssignment::from_bits("11").unwrap(),
            sinr_cjt: vec![Some(1.0), Some(3.0)],
            sinr_ncjt: vec![Vec::new(), Vec::new()],
            rate_ncjt_per_ap: vec![Vec::new(), Vec::new()],
            rate_bps_hz: vec![1.0, 2.0],
            fronthaul_bps_hz: Vec::new(),
            sum_rate_bps_hz: 3.0,
        };
        assert_eq!(fronthaul_load(&base, &layout, 0), 3.0);
        assert_eq!(fronthaul_load(&base, &layout, 1), 2.0);
        let nc = RateReport {
            modes: ModeAssignment::from_bits("00").unwrap(),
            rate_ncjt_per_ap: vec![vec![0.5], vec![0.25, 1.5]],
            rate_bps_hz: vec![0.5, 1.75],
            ..base.clone()
        };
        assert_eq!(fronthaul_load(&nc, &layout, 0), 0.75);
        assert_eq!(fronthaul_load(&nc, &layout, 1), 1.5);
        let idle = ServingLayout::new(&[vec![0], vec![0]]);
        assert_eq!(fronthaul_load(&base, &idle, 1), 0.0);
    }

    #[test]
    fn pure_cjt_report_has_no_ncjt_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stats = random_stats(&mut rng, 3, &[vec![0, 1], vec![1, 2], vec![0, 2]], 0.1);
        let power = random_power(&mut rng, &stats);
        let all_cjt = evaluate(&stats, &power, &ModeAssignment::uniform(3, ServingMode::Cjt), 1.0).unwrap();
        assert!(all_cjt.sinr_ncjt.iter().chain(&all_cjt.rate_ncjt_per_ap).all(|v| v.is_empty()));
        assert!(all_cjt.sinr_cjt.iter().all(|g| g.is_some()));
        let all_nc = evaluate(&stats, &power, &ModeAssignment::uniform(3, ServingMode::Ncjt), 1.0).unwrap();
        assert!(all_nc.sinr_cjt.iter().all(|g| g.is_none()));
        assert!(all_nc.rate_ncjt_per_ap.iter().all(|v| v.len() == 2));
    }

    #[test]
    fn signal_power_raises_isolated_sinr() {
        // No self-variance: the SINR is the coherent signal power over the noise.
        let b = vec![0.7, 1.3];
        let bb = DMatrix::from_fn(2, 2, |l, r| b[l] * b[r]);
        let layout = ServingLayout::new(&[vec![0, 1]]);
        let zero = vec![vec![Complex64::new(0.0, 0.0); 2]];
        let stats = PrecodingStatistics::from_moments(2, layout, b.clone(), zero, vec![bb], 0.1).unwrap();
        let modes = ModeAssignment::uniform(1, ServingMode::Cjt);
        let mut power = PowerSolution::zeros(2, 1);
        power.p[0][0] = 0.05;
        power.p[1][0] = 0.02;
        let mut last = sinr_cjt(&stats, &power, &modes, 0).unwrap();
        assert!((last - (0.05f64.sqrt() * 0.7 + 0.02f64.sqrt() * 1.3).powi(2) / 0.1).abs() < 1e-12);
        for _ in 0..5 {
            power.p[1][0] += 0.03;
            let next = sinr_cjt(&stats, &power, &modes, 0).unwrap();
            assert!(next > last);
            last = next;
        }
    }

    proptest! {
        #[test]
        fn fronthaul_is_additive(seed in 0u64..500, bits in "[01]{4}") {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets = vec![vec![0, 1, 2], vec![1], vec![0, 2], vec![0, 1, 2]];
            let stats = random_stats(&mut rng, 3, &sets, 0.1);
            let power = random_power(&mut rng, &stats);
            let modes = ModeAssignment::from_bits(&bits).unwrap();
            let report = evaluate(&stats, &power, &modes, 0.95).unwrap();
            let total: f64 = report.fronthaul_bps_hz.iter().sum();
            let expected: f64 = (0..4)
                .map(|k| if modes.is_cjt(k) { sets[k].len() as f64 * report.rate_bps_hz[k] } else { report.rate_bps_hz[k] })
                .sum();
            prop_assert!((total - expected).abs() <= 1e-12 * expected.max(1.0));
            prop_assert!((report.sum_rate_bps_hz - report.rate_bps_hz.iter().sum::<f64>()).abs() <= 1e-12);
            prop_assert!(report.rate_bps_hz.iter().all(|r| *r >= 0.0));
        }
    }
}
