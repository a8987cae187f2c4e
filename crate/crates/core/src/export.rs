//! CSV outputs. Each file starts with `# config_hash=<sha256> master_seed=<n>`
//! followed by a header row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::absde::{AdjointSolution, PSolution};
use crate::error::{Error, Result};
use crate::experiments::TableRow;
use crate::filtering::FilterEnsemble;
use crate::forward_sim::{ForwardEnsemble, Paths};
use crate::smp::ResidualReport;
use crate::time_grid::TimeGrid;
use crate::variational::GateauxCheck;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvMeta {
    pub config_hash: String,
    pub master_seed: u64,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::domain(format!("csv: {other:?}")),
    }
}

fn open<W: Write>(mut w: W, meta: &CsvMeta, header: &[&str]) -> Result<csv::Writer<W>> {
    writeln!(w, "# config_hash={} master_seed={}", meta.config_hash, meta.master_seed)?;
    let mut out = csv::WriterBuilder::new().from_writer(w);
    out.write_record(header).map_err(csv_err)?;
    Ok(out)
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Create `dir/name` and hand a buffered writer to `f`.
pub fn to_file(dir: &Path, name: &str, f: impl FnOnce(BufWriter<File>) -> Result<()>) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    f(BufWriter::new(File::create(&path)?))?;
    Ok(path)
}

/// `path,k,t,x,Y,Z,Gamma` for the first `max_paths` paths.
pub fn write_ensemble<W: Write>(
    w: W,
    meta: &CsvMeta,
    ens: &ForwardEnsemble<f64>,
    gamma: Option<&Paths<f64>>,
    max_paths: usize,
) -> Result<()> {
    let mut out = open(w, meta, &["path", "k", "t", "x", "Y", "Z", "Gamma"])?;
    for p in 0..ens.paths().min(max_paths) {
        for k in 0..ens.grid.nodes() {
            out.write_record([
                p.to_string(),
                k.to_string(),
                ens.grid.time(k).to_string(),
                ens.x.get(p, k).to_string(),
                ens.y.get(p, k).to_string(),
                ens.z.get(p, k).to_string(),
                opt(gamma.map(|g| g.get(p, k))),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(out)
}

/// `path,k,t,mu_hat,gamma`
pub fn write_filter<W: Write>(w: W, meta: &CsvMeta, grid: &TimeGrid<f64>, fe: &FilterEnsemble<f64>, max_paths: usize) -> Result<()> {
    let mut out = open(w, meta, &["path", "k", "t", "mu_hat", "gamma"])?;
    for p in 0..fe.mu_hat.rows().min(max_paths) {
        for k in 0..grid.nodes() {
            out.write_record([
                p.to_string(),
                k.to_string(),
                grid.time(k).to_string(),
                fe.mu_hat.get(p, k).to_string(),
                fe.riccati.gamma[k].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(out)
}

/// `path,k,t,q,r,r_bar,P,Q_tilde`
pub fn write_adjoint<W: Write>(
    w: W,
    meta: &CsvMeta,
    grid: &TimeGrid<f64>,
    adj: &AdjointSolution<f64>,
    p_solution: &PSolution<f64>,
    max_paths: usize,
) -> Result<()> {
    let mut out = open(w, meta, &["path", "k", "t", "q", "r", "r_bar", "P", "Q_tilde"])?;
    for p in 0..adj.q.rows().min(max_paths) {
        for k in 0..grid.nodes() {
            out.write_record([
                p.to_string(),
                k.to_string(),
                grid.time(k).to_string(),
                adj.q.get(p, k).to_string(),
                adj.r.get(p, k).to_string(),
                adj.r_bar.get(p, k).to_string(),
                p_solution.p.get(p, k).to_string(),
                p_solution.q_tilde.get(p, k).to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(out)
}

/// `direction_id,epsilon,J1,J2,fd_J1,fd_J2,J1_se,J2_se,fd_J1_se,fd_J2_se,gap1,gap1_se,gap2,gap2_se`
pub fn write_variational<W: Write>(w: W, meta: &CsvMeta, checks: &[GateauxCheck<f64>]) -> Result<()> {
    let mut out = open(
        w,
        meta,
        &[
            "direction_id", "epsilon", "J1", "J2", "fd_J1", "fd_J2", "J1_se", "J2_se", "fd_J1_se", "fd_J2_se", "gap1",
            "gap1_se", "gap2", "gap2_se",
        ],
    )?;
    for c in checks {
        out.write_record([
            c.direction.clone(),
            c.epsilon.to_string(),
            c.j1.mean.to_string(),
            opt(c.j2.map(|e| e.mean)),
            c.fd_j1.mean.to_string(),
            opt(c.fd_j2.map(|e| e.mean)),
            c.j1.std_error.to_string(),
            opt(c.j2.map(|e| e.std_error)),
            c.fd_j1.std_error.to_string(),
            opt(c.fd_j2.map(|e| e.std_error)),
            c.gap1.mean.to_string(),
            c.gap1.std_error.to_string(),
            opt(c.gap2.map(|e| e.mean)),
            opt(c.gap2.map(|e| e.std_error)),
        ])
        .map_err(csv_err)?;
    }
    finish(out)
}

/// `k,t,residual,SE,window_flag,max_conditional`
pub fn write_residual<W: Write>(w: W, meta: &CsvMeta, report: &ResidualReport<f64>) -> Result<()> {
    let mut out = open(w, meta, &["k", "t", "residual", "SE", "window_flag", "max_conditional"])?;
    for r in &report.rows {
        out.write_record([
            r.k.to_string(),
            r.t.to_string(),
            r.residual.to_string(),
            r.std_error.to_string(),
            r.window.as_str().to_string(),
            r.max_conditional.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(out)
}

/// `delta,cost_term,mean_terminal,J_half,J_sum` and their standard errors.
pub fn write_table<W: Write>(w: W, meta: &CsvMeta, rows: &[TableRow]) -> Result<()> {
    let mut out = open(
        w,
        meta,
        &["delta", "cost_term", "mean_terminal", "J_half", "J_sum", "cost_term_se", "mean_terminal_se", "J_half_se", "J_sum_se"],
    )?;
    for r in rows {
        out.write_record([
            r.delta.to_string(),
            r.cost_term.mean.to_string(),
            r.mean_terminal.mean.to_string(),
            r.j_half.mean.to_string(),
            r.j_sum.mean.to_string(),
            r.cost_term.std_error.to_string(),
            r.mean_terminal.std_error.to_string(),
            r.j_half.std_error.to_string(),
            r.j_sum.std_error.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Estimate;

    #[test]
    fn table_has_comment_then_header() {
        let meta = CsvMeta { config_hash: "ab".repeat(32), master_seed: 7 };
        let e = Estimate { mean: -1.5, std_error: 0.01 };
        let row = TableRow { delta: 0.4, cost_term: e, mean_terminal: e, j_half: e, j_sum: e };
        let mut buf = Vec::new();
        write_table(&mut buf, &meta, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], format!("# config_hash={} master_seed=7", "ab".repeat(32)));
        assert!(lines[1].starts_with("delta,cost_term,mean_terminal,J_half,J_sum"));
        assert_eq!(lines[2], "0.4,-1.5,-1.5,-1.5,-1.5,0.01,0.01,0.01,0.01");
    }
}
