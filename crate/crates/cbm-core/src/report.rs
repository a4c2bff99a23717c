//! CSV rendering and the JSON run manifest.
//!
//! Floats are written with 17 significant digits so outputs round-trip
//! bit-exactly and equal-seed runs produce byte-identical files.

use crate::analysis::{ConvergenceReport, CostReport, MSweepRow, NSweepRow};
use crate::steppers::TrajectoryRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// 17-significant-digit float formatting (round-trips `f64` exactly).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// `dt_trace.csv`: one row per accepted step.
pub fn dt_trace_csv(rec: &TrajectoryRecord) -> String {
    let mut out = String::from("t,dt,constraint,n_fast_equations\n");
    for s in &rec.steps {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(s.t),
            fmt_f64(s.dt),
            s.constraint.as_str(),
            s.n_fast
        ));
    }
    out
}

/// `trajectory.csv`: one row per cell per stored snapshot.
pub fn trajectory_csv(rec: &TrajectoryRecord) -> String {
    let d = rec.dim;
    let mut out = String::from("t,cell_id,x,y,z\n");
    for snap in &rec.snapshots {
        for (i, id) in snap.ids.iter().enumerate() {
            let coord = |k: usize| {
                if k < d {
                    fmt_f64(snap.coords[d * i + k])
                } else {
                    fmt_f64(0.0)
                }
            };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_f64(snap.t),
                id,
                coord(0),
                coord(1),
                coord(2)
            ));
        }
    }
    out
}

/// `errors.csv`: relative global error per tolerance and method.
pub fn errors_csv(report: &ConvergenceReport) -> String {
    let mut out = String::from("eps,method,rel_error,t_acc\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(r.eps),
            r.method,
            fmt_f64(r.rel_error),
            r.t_acc.map(fmt_f64).unwrap_or_default()
        ));
    }
    out
}

/// `cost.csv`: evaluation counts and wall times per method.
pub fn cost_csv(report: &CostReport) -> String {
    let mut out = String::from("method,f_evals,a_evals,steps,wall_s,rel_wall\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method,
            fmt_f64(r.f_evals),
            r.a_evals,
            r.steps,
            fmt_f64(r.wall_s),
            fmt_f64(r.rel_wall)
        ));
    }
    out
}

/// `sweep_m.csv`: initial multirate levels per ratio.
pub fn sweep_m_csv(rows: &[MSweepRow]) -> String {
    let mut out = String::from("eps,m,dtau1,dtau0,n_fast_equations,constraint\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(r.eps),
            r.m,
            fmt_f64(r.tau1),
            fmt_f64(r.tau0),
            r.n_fast,
            r.constraint.as_str()
        ));
    }
    out
}

/// `sweep_n.csv`: initial step sizes over spheroid sizes and seeds.
pub fn sweep_n_csv(rows: &[NSweepRow]) -> String {
    let mut out = String::from("n_per_dim,n_cells,seed,method,dt_initial,n_fast_equations,dt_steady\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.n_per_dim,
            r.n_cells,
            r.seed,
            r.method,
            fmt_f64(r.dt_initial),
            r.n_fast,
            r.dt_steady.map(fmt_f64).unwrap_or_default()
        ));
    }
    out
}

/// Run manifest written next to the CSV outputs; makes every result
/// reproducible from seed plus configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub package_version: String,
    /// SHA-256 of the canonical scenario JSON.
    pub scenario_hash: String,
    pub seed: u64,
    pub methods: Vec<String>,
    pub eps: Vec<f64>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, scenario_json: &str, seed: u64) -> Self {
        RunManifest {
            schema_version: 1,
            command: command.to_string(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario_hash: sha256_hex(scenario_json.as_bytes()),
            seed,
            methods: Vec::new(),
            eps: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
