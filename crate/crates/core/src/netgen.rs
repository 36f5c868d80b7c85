//! Scenario generation: AP/UE drops on a torus, path loss with shadowing,
//! local-scattering covariances, largest-gain serving sets and pilot reuse.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::seeding::{self, stream_rng};

/// Distances below this are clamped before evaluating the path loss.
pub const MIN_DISTANCE_M: f64 = 1.0;
pub const PATH_LOSS_AT_1M_DB: f64 = -30.5;
pub const PATH_LOSS_EXPONENT_DB: f64 = 36.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Geometry and large-scale fading of one drop. Matrices are indexed `[ap][ue]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub ap_positions: Vec<Point>,
    pub ue_positions: Vec<Point>,
    /// `M_k`: the APs serving each UE, ascending.
    pub serving_sets: Vec<Vec<usize>>,
    /// `K_m`: the UEs served by each AP, ascending.
    pub served_sets: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
    /// Linear power gain `beta`.
    pub large_scale: Vec<Vec<f64>>,
    /// Nominal angle of arrival at the AP array, radians.
    pub angles: Vec<Vec<f64>>,
}

impl Topology {
    pub fn num_aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn num_ues(&self) -> usize {
        self.ue_positions.len()
    }

    pub fn serves(&self, ap: usize, ue: usize) -> bool {
        self.serving_sets[ue].binary_search(&ap).is_ok()
    }
}

/// Spatial covariance `R[ap][ue]`, each `N x N` Hermitian PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialModel {
    pub covariances: Vec<Vec<DMatrix<Complex64>>>,
}

impl SpatialModel {
    pub fn antennas(&self) -> usize {
        self.covariances[0][0].nrows()
    }
}

/// Pilot index per UE (0-based) and the UEs sharing each UE's pilot.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotAssignment {
    pub tau_p: usize,
    pub pilot_index: Vec<usize>,
    pub cohort: Vec<Vec<usize>>,
}

impl PilotAssignment {
    pub fn from_indices(tau_p: usize, pilot_index: Vec<usize>) -> Self {
        let cohort = pilot_index
            .iter()
            .map(|&t| (0..pilot_index.len()).filter(|&l| pilot_index[l] == t).collect())
            .collect();
        Self { tau_p, pilot_index, cohort }
    }

    /// UEs using pilot `t`, ascending.
    pub fn users_of(&self, t: usize) -> Vec<usize> {
        (0..self.pilot_index.len()).filter(|&l| self.pilot_index[l] == t).collect()
    }
}

/// Everything that defines one network realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub topology: Topology,
    pub spatial: SpatialModel,
    pub pilots: PilotAssignment,
}

impl Scenario {
    pub fn generate(config: &SystemConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let topology = build_topology(config, seed)?;
        let spatial = build_spatial_model(&topology, config)?;
        let pilots = assign_pilots(config.num_ues, config.tau_p, seed)?;
        Ok(Self { topology, spatial, pilots })
    }
}

/// Torus distance from `ap` to the nearest image of `ue`, together with the
/// displacement to that image. Ties keep the first shift in scan order.
pub fn wrap_displacement(ap: Point, ue: Point, area: f64) -> (f64, f64, f64) {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for sx in [-area, 0.0, area] {
        for sy in [-area, 0.0, area] {
            let dx = ue.x + sx - ap.x;
            let dy = ue.y + sy - ap.y;
            let d = dx.hypot(dy);
            if d < best.0 {
                best = (d, dx, dy);
            }
        }
    }
    best
}

pub fn wrap_distance(ap: Point, ue: Point, area: f64) -> f64 {
    wrap_displacement(ap, ue, area).0
}

/// Path gain in dB without shadowing.
pub fn path_loss_db(distance_m: f64) -> Result<f64> {
    if !(distance_m > 0.0) {
        return Err(Error::Domain(format!("distance must be positive, got {distance_m}")));
    }
    let d = distance_m.max(MIN_DISTANCE_M);
    Ok(PATH_LOSS_AT_1M_DB - PATH_LOSS_EXPONENT_DB * d.log10())
}

/// Linear large-scale gain for a given distance and shadowing realization (dB).
pub fn large_scale_gain(distance_m: f64, shadowing_db: f64) -> Result<f64> {
    Ok(db_to_linear(path_loss_db(distance_m)? + shadowing_db))
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Gaussian local scattering covariance for a half-wavelength ULA.
pub fn local_scattering_covariance(beta: f64, nominal_angle_rad: f64, asd_rad: f64, antennas: usize) -> DMatrix<Complex64> {
    let (sin, cos) = nominal_angle_rad.sin_cos();
    DMatrix::from_fn(antennas, antennas, |l, r| {
        let dist = l as f64 - r as f64;
        let phase = Complex64::from_polar(1.0, std::f64::consts::PI * dist * sin);
        let spread = (-0.5 * asd_rad * asd_rad * (std::f64::consts::PI * dist * cos).powi(2)).exp();
        phase * (beta * spread)
    })
}

fn uniform_points(n: usize, area: f64, rng: &mut impl Rng) -> Vec<Point> {
    (0..n)
        .map(|_| Point { x: rng.random::<f64>() * area, y: rng.random::<f64>() * area })
        .collect()
}

pub fn build_topology(config: &SystemConfig, seed: u64) -> Result<Topology> {
    let (m_count, k_count) = (config.num_aps, config.num_ues);
    if config.serving_set_size > m_count || config.serving_set_size == 0 {
        return Err(Error::Config(format!(
            "serving_set_size {} must be in 1..={m_count}",
            config.serving_set_size
        )));
    }
    let ap_positions = uniform_points(m_count, config.area_m, &mut stream_rng(seed, seeding::STREAM_AP_POSITIONS));
    let ue_positions = uniform_points(k_count, config.area_m, &mut stream_rng(seed, seeding::STREAM_UE_POSITIONS));
    let mut shadow_rng = stream_rng(seed, seeding::STREAM_SHADOWING);
    let shadow = Normal::new(0.0, config.shadowing_std_db).map_err(|e| Error::Config(e.to_string()))?;

    let mut distances = vec![vec![0.0; k_count]; m_count];
    let mut angles = vec![vec![0.0; k_count]; m_count];
    let mut large_scale = vec![vec![0.0; k_count]; m_count];
    for m in 0..m_count {
        for k in 0..k_count {
            let (d, dx, dy) = wrap_displacement(ap_positions[m], ue_positions[k], config.area_m);
            // one draw per link even when shadowing is disabled keeps streams aligned
            let f = shadow.sample(&mut shadow_rng);
            distances[m][k] = d;
            angles[m][k] = dy.atan2(dx);
            large_scale[m][k] = large_scale_gain(d.max(MIN_DISTANCE_M), f)?;
        }
    }

    let mut serving_sets = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut order: Vec<usize> = (0..m_count).collect();
        order.sort_by(|&a, &b| large_scale[b][k].total_cmp(&large_scale[a][k]).then(a.cmp(&b)));
        let mut set = order[..config.serving_set_size].to_vec();
        set.sort_unstable();
        serving_sets.push(set);
    }
    let served_sets = (0..m_count)
        .map(|m| (0..k_count).filter(|&k| serving_sets[k].contains(&m)).collect())
        .collect();

    Ok(Topology { ap_positions, ue_positions, serving_sets, served_sets, distances, large_scale, angles })
}

pub fn build_spatial_model(topology: &Topology, config: &SystemConfig) -> Result<SpatialModel> {
    let asd = config.asd_deg.to_radians();
    let covariances = (0..topology.num_aps())
        .map(|m| {
            (0..topology.num_ues())
                .map(|k| local_scattering_covariance(topology.large_scale[m][k], topology.angles[m][k], asd, config.antennas_per_ap))
                .collect()
        })
        .collect();
    Ok(SpatialModel { covariances })
}

/// `tau_p` randomly chosen UEs get mutually orthogonal pilots, the rest draw
/// a pilot uniformly at random.
pub fn assign_pilots(num_ues: usize, tau_p: usize, seed: u64) -> Result<PilotAssignment> {
    if num_ues == 0 {
        return Err(Error::Config("need at least one UE".into()));
    }
    if tau_p == 0 {
        return Err(Error::Config("need at least one pilot".into()));
    }
    let mut rng = stream_rng(seed, seeding::STREAM_PILOTS);
    let mut ues: Vec<usize> = (0..num_ues).collect();
    ues.shuffle(&mut rng);
    let mut pilots: Vec<usize> = (0..tau_p).collect();
    pilots.shuffle(&mut rng);

    let mut index = vec![0; num_ues];
    let orthogonal = tau_p.min(num_ues);
    for (slot, &ue) in ues[..orthogonal].iter().enumerate() {
        index[ue] = pilots[slot];
    }
    for &ue in &ues[orthogonal..] {
        index[ue] = rng.random_range(0..tau_p);
    }
    Ok(PilotAssignment::from_indices(tau_p, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn cfg(m: usize, k: usize, serving: usize) -> SystemConfig {
        SystemConfig { num_aps: m, num_ues: k, serving_set_size: serving, ..Default::default() }
    }

    #[test]
    fn default_drop_respects_area_and_serving_sets() {
        let c = cfg(14, 15, 8);
        let topo = build_topology(&c, 3).unwrap();
        for p in topo.ap_positions.iter().chain(&topo.ue_positions) {
            assert!((0.0..600.0).contains(&p.x) && (0.0..600.0).contains(&p.y));
        }
        for k in 0..15 {
            let set = &topo.serving_sets[k];
            assert_eq!(set.len(), 8);
            assert!(set.windows(2).all(|w| w[0] < w[1]));
            let weakest_in = set.iter().map(|&m| topo.large_scale[m][k]).fold(f64::INFINITY, f64::min);
            for m in (0..14).filter(|m| !set.contains(m)) {
                assert!(topo.large_scale[m][k] <= weakest_in);
            }
        }
        for m in 0..14 {
            for k in 0..15 {
                assert_eq!(topo.served_sets[m].contains(&k), topo.serving_sets[k].contains(&m));
            }
        }
    }

    #[test]
    fn single_ap_single_ue() {
        let topo = build_topology(&cfg(1, 1, 1), 0).unwrap();
        assert_eq!(topo.serving_sets, vec![vec![0]]);
        assert_eq!(topo.served_sets, vec![vec![0]]);
    }

    #[test]
    fn oversized_serving_set_is_config_error() {
        let mut c = cfg(3, 2, 2);
        c.serving_set_size = 4;
        assert!(matches!(build_topology(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn wrap_distance_across_corner() {
        let d = wrap_distance(Point { x: 0.0, y: 0.0 }, Point { x: 599.0, y: 599.0 }, 600.0);
        assert!((d - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn path_loss_reference_points() {
        assert!((path_loss_db(1.0).unwrap() + 30.5).abs() < 1e-12);
        assert!((path_loss_db(10.0).unwrap() + 67.2).abs() < 1e-12);
        assert!((linear_to_db(large_scale_gain(10.0, 0.0).unwrap()) + 67.2).abs() < 1e-9);
        // clamped below 1 m
        assert_eq!(path_loss_db(0.3).unwrap(), -30.5);
        assert!(matches!(path_loss_db(0.0), Err(Error::Domain(_))));
        assert!(matches!(path_loss_db(-2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn scalar_covariance() {
        let r = local_scattering_covariance(3e-9, 0.4, 0.26, 1);
        assert_eq!(r.shape(), (1, 1));
        assert!((r[(0, 0)].re - 3e-9).abs() < 1e-24 && r[(0, 0)].im == 0.0);
    }

    #[test]
    fn zero_spread_covariance_is_rank_one() {
        let (beta, phi, n) = (2.0, 0.7, 6);
        let r = local_scattering_covariance(beta, phi, 0.0, n);
        let a = nalgebra::DVector::from_fn(n, |l, _| Complex64::from_polar(1.0, std::f64::consts::PI * l as f64 * phi.sin()));
        let expected = (&a * a.adjoint()) * Complex64::new(beta, 0.0);
        assert!((r - expected).norm() < 1e-12);
    }

    #[test]
    fn covariance_is_psd_with_expected_trace() {
        let beta = 1e-10;
        let r = local_scattering_covariance(beta, 30f64.to_radians(), 15f64.to_radians(), 8);
        assert!((r.trace().re - 8.0 * beta).abs() < 1e-9 * 8.0 * beta);
        assert!((&r - r.adjoint()).norm() < 1e-25);
        let eig = SymmetricEigen::new(r.clone());
        let trace = r.trace().re;
        for &v in eig.eigenvalues.iter() {
            assert!(v >= -1e-12 * trace);
            assert!(v <= 8.0 * beta * (1.0 + 1e-12));
        }
    }

    #[test]
    fn pilots_singleton_when_enough() {
        let p = assign_pilots(10, 10, 5).unwrap();
        assert!(p.cohort.iter().all(|c| c.len() == 1));
        let mut used = p.pilot_index.clone();
        used.sort_unstable();
        assert_eq!(used, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn pilots_with_five_extra_users() {
        for seed in 0..20 {
            let p = assign_pilots(15, 10, seed).unwrap();
            // all ten pilots in use, five UEs beyond one-per-pilot
            let extra: usize = (0..10).map(|t| p.users_of(t).len().saturating_sub(1)).sum();
            assert_eq!(extra, 5);
            assert!((0..10).all(|t| !p.users_of(t).is_empty()));
            for k in 0..15 {
                assert!(p.cohort[k].contains(&k));
                for l in 0..15 {
                    assert_eq!(p.cohort[k].contains(&l), p.pilot_index[k] == p.pilot_index[l]);
                }
            }
        }
    }

    #[test]
    fn single_user_pilot() {
        let p = assign_pilots(1, 10, 0).unwrap();
        assert_eq!(p.cohort, vec![vec![0]]);
        assert!(matches!(assign_pilots(0, 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_scenario() {
        let c = SystemConfig::default();
        assert_eq!(Scenario::generate(&c, 11).unwrap(), Scenario::generate(&c, 11).unwrap());
        assert_ne!(Scenario::generate(&c, 11).unwrap().topology, Scenario::generate(&c, 12).unwrap().topology);
    }

    proptest! {
        #[test]
        fn wrap_distance_symmetric_and_periodic(ax in 0.0..600.0f64, ay in 0.0..600.0f64,
                                               ux in 0.0..600.0f64, uy in 0.0..600.0f64,
                                               sx in -1i32..=1, sy in -1i32..=1) {
            let a = Point { x: ax, y: ay };
            let u = Point { x: ux, y: uy };
            let d = wrap_distance(a, u, 600.0);
            prop_assert!((d - wrap_distance(u, a, 600.0)).abs() < 1e-9);
            let shift = |p: Point| Point { x: p.x + 600.0 * sx as f64, y: p.y + 600.0 * sy as f64 };
            prop_assert!((d - wrap_distance(shift(a), shift(u), 600.0)).abs() < 1e-9);
            prop_assert!(d <= 300.0 * 2f64.sqrt() + 1e-9);
        }

        #[test]
        fn serving_duality_holds(seed in 0u64..1000, serving in 1usize..6) {
            let topo = build_topology(&cfg(6, 5, serving), seed).unwrap();
            for m in 0..6 {
                for k in 0..5 {
                    prop_assert_eq!(topo.served_sets[m].contains(&k), topo.serving_sets[k].contains(&m));
                }
            }
        }
    }
}
