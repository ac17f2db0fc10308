//! Run-directory outputs: CSV files with full-precision decimal floats and
//! the JSON run manifest with checksums.
//!
//! Floats are written with Rust's shortest round-trip formatting, so files
//! are diffable and bit-stable across identical runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use otk_core::linalg::Mat;
use otk_core::solve::IterRecord;
use otk_core::systems::Trajectory;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub struct RunDir {
    pub path: PathBuf,
    started: Instant,
    files: Vec<String>,
}

impl RunDir {
    /// Prepare the output directory; an existing non-empty directory needs
    /// the explicit overwrite flag.
    pub fn create(path: &Path, overwrite: bool) -> Result<RunDir> {
        if path.exists() {
            let non_empty = fs::read_dir(path)
                .with_context(|| format!("{}: cannot inspect", path.display()))?
                .next()
                .is_some();
            if non_empty && !overwrite {
                bail!(
                    "{}: output directory is not empty (pass --overwrite to replace it)",
                    path.display()
                );
            }
            if non_empty {
                fs::remove_dir_all(path)
                    .with_context(|| format!("{}: cannot clear", path.display()))?;
            }
        }
        fs::create_dir_all(path).with_context(|| format!("{}: cannot create", path.display()))?;
        Ok(RunDir {
            path: path.to_path_buf(),
            started: Instant::now(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path.join(name);
        fs::write(&p, contents).with_context(|| format!("{}: cannot write", p.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Write the manifest last; it lists and checksums every other file in
    /// the run directory.
    pub fn finish(
        mut self,
        config_path: &Path,
        config_echo: &str,
        experiment: &str,
        seed: Option<u64>,
        convergence: &str,
    ) -> Result<()> {
        let mut files = std::collections::BTreeMap::new();
        for name in &self.files {
            let bytes = fs::read(self.path.join(name))?;
            let mut hasher = Sha256::new();
            hasher.update(&bytes);
            let digest = hasher.finalize();
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            files.insert(name.clone(), hex);
        }
        let manifest = RunManifest {
            config_path: config_path.display().to_string(),
            config_echo: config_echo.to_string(),
            experiment: experiment.to_string(),
            seed,
            convergence: convergence.to_string(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
            files,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        self.files.clear();
        self.write("manifest.json", &text)
    }
}

/// Echo of the run: configuration, outcome, wall-clock time, and the
/// checksummed output files.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: String,
    pub config_echo: String,
    pub experiment: String,
    pub seed: Option<u64>,
    pub convergence: String,
    pub duration_seconds: f64,
    pub files: std::collections::BTreeMap<String, String>,
}

pub fn fmt_float(v: f64) -> String {
    format!("{v}")
}

fn push_row(out: &mut String, cells: &[String]) {
    out.push_str(&cells.join(","));
    out.push('\n');
}

/// `t, x_0.., u_0..` rows.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let d = traj.states.cols();
    let m = traj.controls.cols();
    let mut out = String::new();
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|j| format!("x_{j}")));
    header.extend((0..m).map(|j| format!("u_{j}")));
    push_row(&mut out, &header);
    for (i, &t) in traj.times.iter().enumerate() {
        let mut row = vec![fmt_float(t)];
        row.extend(traj.states.row(i).iter().map(|&v| fmt_float(v)));
        row.extend(traj.controls.row(i).iter().map(|&v| fmt_float(v)));
        push_row(&mut out, &row);
    }
    out
}

/// `iteration, f, h_inf, grad_inf` rows.
pub fn diagnostics_csv(records: &[IterRecord]) -> String {
    let mut out = String::from("iteration,f,h_inf,grad_inf\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.iteration,
            fmt_float(r.f),
            fmt_float(r.h_inf),
            fmt_float(r.grad_inf)
        );
    }
    out
}

/// Stacked trajectory snapshots: `snapshot_index, t, x.., u..`.
pub fn snapshots_csv(snaps: &[(usize, Trajectory)]) -> String {
    let mut out = String::new();
    if let Some((_, first)) = snaps.first() {
        let mut header = vec!["iteration".to_string(), "t".to_string()];
        header.extend((0..first.states.cols()).map(|j| format!("x_{j}")));
        header.extend((0..first.controls.cols()).map(|j| format!("u_{j}")));
        push_row(&mut out, &header);
    }
    for (iter, traj) in snaps {
        for (i, &t) in traj.times.iter().enumerate() {
            let mut row = vec![iter.to_string(), fmt_float(t)];
            row.extend(traj.states.row(i).iter().map(|&v| fmt_float(v)));
            row.extend(traj.controls.row(i).iter().map(|&v| fmt_float(v)));
            push_row(&mut out, &row);
        }
    }
    out
}

/// `step, loss` rows.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i, fmt_float(*l));
    }
    out
}

/// `outer_iteration, loss, grad_inf` rows.
pub fn outer_history_csv(loss: &[f64], grad: &[f64]) -> String {
    let mut out = String::from("outer_iteration,loss,grad_inf\n");
    for (i, (l, g)) in loss.iter().zip(grad).enumerate() {
        let _ = writeln!(out, "{},{},{}", i, fmt_float(*l), fmt_float(*g));
    }
    out
}

pub fn vector_field_csv(report: &otk_core::sysid::VectorFieldReport) -> String {
    let mut out = String::new();
    if let Some(first) = report.rows.first() {
        let mut header: Vec<String> = (0..first.x.len()).map(|j| format!("x_{j}")).collect();
        header.extend((0..first.u.len()).map(|j| format!("u_{j}")));
        header.extend((0..first.true_dx.len()).map(|j| format!("true_dx_{j}")));
        header.extend((0..first.learned_dx.len()).map(|j| format!("learned_dx_{j}")));
        header.extend((0..first.abs_err.len()).map(|j| format!("abs_err_{j}")));
        push_row(&mut out, &header);
    }
    for r in &report.rows {
        let mut row: Vec<String> = r.x.iter().map(|&v| fmt_float(v)).collect();
        row.extend(r.u.iter().map(|&v| fmt_float(v)));
        row.extend(r.true_dx.iter().map(|&v| fmt_float(v)));
        row.extend(r.learned_dx.iter().map(|&v| fmt_float(v)));
        row.extend(r.abs_err.iter().map(|&v| fmt_float(v)));
        push_row(&mut out, &row);
    }
    out
}

/// One dataset episode: `t, u_0.., x_0..` (observed states).
pub fn episode_csv(times: &[f64], controls: &Mat, observed: &Mat) -> String {
    let mut out = String::new();
    let mut header = vec!["t".to_string()];
    header.extend((0..controls.cols()).map(|j| format!("u_{j}")));
    header.extend((0..observed.cols()).map(|j| format!("x_{j}")));
    push_row(&mut out, &header);
    for (i, &t) in times.iter().enumerate() {
        let mut row = vec![fmt_float(t)];
        row.extend(controls.row(i).iter().map(|&v| fmt_float(v)));
        row.extend(observed.row(i).iter().map(|&v| fmt_float(v)));
        push_row(&mut out, &row);
    }
    out
}

/// Model parameters as a JSON document (layer widths plus the flat
/// parameter vector, weights row-major then biases per layer).
pub fn params_json(params: &otk_core::sysid::MlpParams) -> Result<String> {
    #[derive(Serialize)]
    struct ParamsFile<'a> {
        input: usize,
        hidden: &'a [usize],
        output: usize,
        flat: &'a [f64],
    }
    Ok(serde_json::to_string_pretty(&ParamsFile {
        input: params.shape.input,
        hidden: &params.shape.hidden,
        output: params.shape.output,
        flat: &params.flat,
    })?)
}

/// Controls at their node times: `t, u_0..`.
pub fn controls_csv(times: &[f64], controls: &Mat) -> String {
    let mut out = String::new();
    let mut header = vec!["t".to_string()];
    header.extend((0..controls.cols()).map(|j| format!("u_{j}")));
    push_row(&mut out, &header);
    for (i, &t) in times.iter().enumerate() {
        let mut row = vec![fmt_float(t)];
        row.extend(controls.row(i).iter().map(|&v| fmt_float(v)));
        push_row(&mut out, &row);
    }
    out
}
