//! CSV writers. Column names are part of the interface read by the plotting
//! tool, so they are fixed here and nowhere else.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::chanstat::PrecodingStatistics;
use crate::error::Result;
use crate::netgen::{linear_to_db, PilotAssignment, Topology};
use crate::rates::{PowerSolution, RateReport};
use crate::sca::IterationRecord;

pub const AP_POSITIONS_CSV: &str = "ap_positions.csv";
pub const UE_POSITIONS_CSV: &str = "ue_positions.csv";
pub const LINKS_CSV: &str = "links.csv";
pub const STATS_CSV: &str = "stats.csv";
pub const RATES_CSV: &str = "rates.csv";
pub const FRONTHAUL_CSV: &str = "fronthaul.csv";
pub const CONVERGENCE_CSV: &str = "convergence.csv";
pub const POWER_CSV: &str = "power.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

fn write_rows<W: Write, T: Serialize>(out: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `rows` to `path`; a header is written even when there are no rows.
fn write_file<T: Serialize>(path: &Path, header: &[&str], rows: Vec<T>) -> Result<()> {
    let file = File::create(path)?;
    if rows.is_empty() {
        let mut w = csv::Writer::from_writer(file);
        w.write_record(header)?;
        w.flush()?;
        return Ok(());
    }
    write_rows(file, rows)
}

#[derive(Debug, Serialize)]
struct PositionRow {
    id: usize,
    x_m: f64,
    y_m: f64,
}

pub fn write_positions(dir: &Path, topology: &Topology) -> Result<()> {
    let rows = |pts: &[crate::netgen::Point]| pts.iter().enumerate().map(|(id, p)| PositionRow { id, x_m: p.x, y_m: p.y }).collect::<Vec<_>>();
    write_with_id_header(&dir.join(AP_POSITIONS_CSV), "ap_id", rows(&topology.ap_positions))?;
    write_with_id_header(&dir.join(UE_POSITIONS_CSV), "ue_id", rows(&topology.ue_positions))
}

fn write_with_id_header(path: &Path, id: &str, rows: Vec<PositionRow>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([id, "x_m", "y_m"])?;
    for r in rows {
        w.write_record([r.id.to_string(), r.x_m.to_string(), r.y_m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct LinkRow {
    ap_id: usize,
    ue_id: usize,
    distance_m: f64,
    beta_db: f64,
    serving: u8,
    pilot_index: usize,
}

pub fn write_links(path: &Path, topology: &Topology, pilots: &PilotAssignment) -> Result<()> {
    let mut rows = Vec::new();
    for m in 0..topology.num_aps() {
        for k in 0..topology.num_ues() {
            rows.push(LinkRow {
                ap_id: m,
                ue_id: k,
                distance_m: topology.distances[m][k],
                beta_db: linear_to_db(topology.large_scale[m][k]),
                serving: topology.serves(m, k) as u8,
                pilot_index: pilots.pilot_index[k],
            });
        }
    }
    write_file(path, &["ap_id", "ue_id", "distance_m", "beta_db", "serving", "pilot_index"], rows)
}

#[derive(Debug, Serialize)]
struct StatRow {
    kind: &'static str,
    ue_i: usize,
    ue_k: usize,
    ap_l: usize,
    ap_r: usize,
    value: f64,
}

/// One row per nonzero-structure entry. `ue_i` is the victim and `ue_k` the
/// UE whose precoder is involved; AP columns hold AP indices.
pub fn write_stats(path: &Path, stats: &PrecodingStatistics) -> Result<()> {
    let layout = &stats.layout;
    let mut rows = Vec::new();
    for k in 0..stats.num_ues {
        let set = &layout.serving_sets[k];
        for (pos, &m) in set.iter().enumerate() {
            let b = stats.b[layout.offsets[k] + pos];
            rows.push(StatRow { kind: "b_coh", ue_i: k, ue_k: k, ap_l: m, ap_r: m, value: b });
            rows.push(StatRow { kind: "b_nc", ue_i: k, ue_k: k, ap_l: m, ap_r: m, value: b });
            rows.push(StatRow { kind: "var_nc", ue_i: k, ue_k: k, ap_l: m, ap_r: m, value: stats.self_variance(k, pos) });
        }
        for i in 0..stats.num_ues {
            let c = &stats.interference[stats.pair(k, i)];
            for (a, &l) in set.iter().enumerate() {
                for (bpos, &r) in set.iter().enumerate() {
                    rows.push(StatRow { kind: "C_coh", ue_i: i, ue_k: k, ap_l: l, ap_r: r, value: c[(a, bpos)] });
                }
                rows.push(StatRow { kind: "c_nc", ue_i: i, ue_k: k, ap_l: l, ap_r: l, value: stats.cross_power(k, i, a) });
            }
        }
    }
    write_file(path, &["kind", "ue_i", "ue_k", "ap_l", "ap_r", "value"], rows)
}

#[derive(Debug, Serialize)]
struct RateRow {
    ue_id: usize,
    mode: &'static str,
    #[serde(rename = "rate_bpsHz")]
    rate: f64,
}

pub fn write_rates(path: &Path, report: &RateReport) -> Result<()> {
    let rows = report
        .rate_bps_hz
        .iter()
        .enumerate()
        .map(|(k, &rate)| RateRow { ue_id: k, mode: if report.modes.is_cjt(k) { "CJT" } else { "NCJT" }, rate })
        .collect();
    write_file(path, &["ue_id", "mode", "rate_bpsHz"], rows)
}

#[derive(Debug, Serialize)]
struct FronthaulRow {
    ap_id: usize,
    #[serde(rename = "load_bpsHz")]
    load: f64,
    #[serde(rename = "cap_bpsHz")]
    cap: f64,
    slack: f64,
}

/// `loads[m]` is the fronthaul traffic of AP `m`; slack is `cap - load`.
pub fn write_fronthaul(path: &Path, loads: &[f64], cap: f64) -> Result<()> {
    let rows = loads.iter().enumerate().map(|(m, &load)| FronthaulRow { ap_id: m, load, cap, slack: cap - load }).collect();
    write_file(path, &["ap_id", "load_bpsHz", "cap_bpsHz", "slack"], rows)
}

#[derive(Debug, Serialize)]
struct ConvergenceRow {
    iteration: usize,
    #[serde(rename = "objective_bpsHz")]
    objective: f64,
    max_fronthaul_violation: f64,
    max_power_violation: f64,
}

pub fn write_convergence(path: &Path, trace: &[IterationRecord]) -> Result<()> {
    let rows = trace
        .iter()
        .map(|r| ConvergenceRow {
            iteration: r.iteration,
            objective: r.objective_bps_hz,
            max_fronthaul_violation: r.max_fronthaul_violation,
            max_power_violation: r.max_power_violation,
        })
        .collect();
    write_file(path, &["iteration", "objective_bpsHz", "max_fronthaul_violation", "max_power_violation"], rows)
}

#[derive(Debug, Serialize)]
struct PowerRow {
    ap_id: usize,
    ue_id: usize,
    #[serde(rename = "power_W")]
    power: f64,
}

/// Serving pairs only; every other coefficient is zero by construction.
pub fn write_power(path: &Path, power: &PowerSolution, topology: &Topology) -> Result<()> {
    let mut rows = Vec::new();
    for (m, row) in power.p.iter().enumerate() {
        for (k, &p) in row.iter().enumerate() {
            if topology.serves(m, k) {
                rows.push(PowerRow { ap_id: m, ue_id: k, power: p });
            }
        }
    }
    write_file(path, &["ap_id", "ue_id", "power_W"], rows)
}

/// One SCA run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub p: f64,
    #[serde(rename = "cmax_bpsHz")]
    pub cmax: f64,
    pub serving_set_size: usize,
    pub topo_trial: usize,
    pub mode_trial: usize,
    pub n_cjt: usize,
    #[serde(rename = "sum_rate_bpsHz")]
    pub sum_rate: f64,
    #[serde(rename = "recomputed_sum_rate_bpsHz")]
    pub recomputed_sum_rate: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const SWEEP_HEADER: [&str; 10] = [
    "p",
    "cmax_bpsHz",
    "serving_set_size",
    "topo_trial",
    "mode_trial",
    "n_cjt",
    "sum_rate_bpsHz",
    "recomputed_sum_rate_bpsHz",
    "iterations",
    "converged",
];

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_file(path, &SWEEP_HEADER, rows.to_vec())
}

/// Mean and standard error of the converged runs at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub p: f64,
    #[serde(rename = "cmax_bpsHz")]
    pub cmax: f64,
    pub serving_set_size: usize,
    pub mean_sum_rate: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

pub const SUMMARY_HEADER: [&str; 6] = ["p", "cmax_bpsHz", "serving_set_size", "mean_sum_rate", "stderr", "n_samples"];

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_file(path, &SUMMARY_HEADER, rows.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(path: &Path) -> Vec<Vec<String>> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
        r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect()
    }

    #[test]
    fn sweep_and_summary_headers_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let row = SweepRow {
            p: 0.5,
            cmax: 15.0,
            serving_set_size: 8,
            topo_trial: 1,
            mode_trial: 2,
            n_cjt: 7,
            sum_rate: 21.25,
            recomputed_sum_rate: 22.5,
            iterations: 12,
            converged: true,
        };
        write_sweep(&dir.path().join(SWEEP_CSV), &[row]).unwrap();
        let got = read(&dir.path().join(SWEEP_CSV));
        assert_eq!(got[0], SWEEP_HEADER);
        assert_eq!(got[1], ["0.5", "15.0", "8", "1", "2", "7", "21.25", "22.5", "12", "true"]);

        write_summary(&dir.path().join(SUMMARY_CSV), &[]).unwrap();
        assert_eq!(read(&dir.path().join(SUMMARY_CSV)), vec![SUMMARY_HEADER.map(String::from).to_vec()]);
    }

    #[test]
    fn convergence_and_fronthaul_columns() {
        let dir = tempfile::tempdir().unwrap();
        let trace = [IterationRecord { iteration: 1, objective_bps_hz: 10.0, max_fronthaul_violation: 0.0, max_power_violation: 0.0, ipm_iterations: 9 }];
        write_convergence(&dir.path().join(CONVERGENCE_CSV), &trace).unwrap();
        let got = read(&dir.path().join(CONVERGENCE_CSV));
        assert_eq!(got[0], ["iteration", "objective_bpsHz", "max_fronthaul_violation", "max_power_violation"]);
        assert_eq!(got[1], ["1", "10.0", "0.0", "0.0"]);

        write_fronthaul(&dir.path().join(FRONTHAUL_CSV), &[3.0, 15.0], 15.0).unwrap();
        let got = read(&dir.path().join(FRONTHAUL_CSV));
        assert_eq!(got[0], ["ap_id", "load_bpsHz", "cap_bpsHz", "slack"]);
        assert_eq!(got[1], ["0", "3.0", "15.0", "12.0"]);
        assert_eq!(got[2][3], "0.0");
    }

    #[test]
    fn floats_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let v = 0.1 + 0.2;
        write_fronthaul(&dir.path().join(FRONTHAUL_CSV), &[v], 1.0 / 3.0).unwrap();
        let got = read(&dir.path().join(FRONTHAUL_CSV));
        assert_eq!(got[1][1].parse::<f64>().unwrap(), v);
        assert_eq!(got[1][2].parse::<f64>().unwrap(), 1.0 / 3.0);
    }
}
