//! Versioned CSV for metrics rows, curves and loss logs. Reals are written
//! with 17 significant digits so every value round-trips exactly.

use std::io::{Read, Write};

use crate::harness::Curve;
use crate::metrics::{MetricsRow, SCHEMA_VERSION};
use crate::BenchError;

pub const ROW_HEADER: [&str; 23] = [
    "task_id",
    "family",
    "dim",
    "seed",
    "method",
    "oracle",
    "final_dist",
    "final_gap",
    "best_gap",
    "auc_gap",
    "auc_dist",
    "auc_best_gap",
    "hit",
    "oracle_calls",
    "minima_visited",
    "wall_ms",
    "surcharge_calls",
    "aux_calls",
    "shortfall",
    "particle",
    "budget",
    "proxy_reference",
    "schema_version",
];

/// `d.dddddddddddddddde±x`; non-finite values as `NaN`, `inf`, `-inf`.
pub fn fmt_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

fn parse<T: std::str::FromStr>(field: &str, name: &str, line: u64) -> Result<T, BenchError> {
    field
        .parse()
        .map_err(|_| BenchError::Config(format!("line {line}: cannot parse `{field}` in column {name}")))
}

pub fn write_rows<W: Write>(w: W, rows: &[MetricsRow]) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ROW_HEADER)?;
    for r in rows {
        out.write_record([
            r.task_id.clone(),
            r.family.clone(),
            r.dim.to_string(),
            r.seed.to_string(),
            r.method.clone(),
            r.oracle.clone(),
            fmt_real(r.final_dist),
            fmt_real(r.final_gap),
            fmt_real(r.best_gap),
            fmt_real(r.auc_gap),
            fmt_real(r.auc_dist),
            fmt_real(r.auc_best_gap),
            r.hit.to_string(),
            r.oracle_calls.to_string(),
            r.minima_visited.map_or_else(|| "NA".to_string(), |m| m.to_string()),
            fmt_real(r.wall_ms),
            r.surcharge_calls.to_string(),
            r.aux_calls.to_string(),
            r.shortfall.to_string(),
            r.particle.to_string(),
            r.budget.to_string(),
            (r.proxy_reference as u8).to_string(),
            r.schema_version.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(r: R) -> Result<Vec<MetricsRow>, BenchError> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != ROW_HEADER {
        return Err(BenchError::Config(format!("unexpected metrics header: {}", header.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let f = |i: usize| rec.get(i).unwrap_or("");
        let version: u32 = parse(f(22), ROW_HEADER[22], line)?;
        if version != SCHEMA_VERSION {
            return Err(BenchError::Config(format!("line {line}: schema version {version}, expected {SCHEMA_VERSION}")));
        }
        rows.push(MetricsRow {
            task_id: f(0).to_string(),
            family: f(1).to_string(),
            dim: parse(f(2), ROW_HEADER[2], line)?,
            seed: parse(f(3), ROW_HEADER[3], line)?,
            method: f(4).to_string(),
            oracle: f(5).to_string(),
            final_dist: parse(f(6), ROW_HEADER[6], line)?,
            final_gap: parse(f(7), ROW_HEADER[7], line)?,
            best_gap: parse(f(8), ROW_HEADER[8], line)?,
            auc_gap: parse(f(9), ROW_HEADER[9], line)?,
            auc_dist: parse(f(10), ROW_HEADER[10], line)?,
            auc_best_gap: parse(f(11), ROW_HEADER[11], line)?,
            hit: parse(f(12), ROW_HEADER[12], line)?,
            oracle_calls: parse(f(13), ROW_HEADER[13], line)?,
            minima_visited: match f(14) {
                "NA" => None,
                s => Some(parse(s, ROW_HEADER[14], line)?),
            },
            wall_ms: parse(f(15), ROW_HEADER[15], line)?,
            surcharge_calls: parse(f(16), ROW_HEADER[16], line)?,
            aux_calls: parse(f(17), ROW_HEADER[17], line)?,
            shortfall: parse(f(18), ROW_HEADER[18], line)?,
            particle: parse(f(19), ROW_HEADER[19], line)?,
            budget: parse(f(20), ROW_HEADER[20], line)?,
            proxy_reference: parse::<u8>(f(21), ROW_HEADER[21], line)? != 0,
            schema_version: version,
        });
    }
    Ok(rows)
}

/// Long format: `family,dim,method,calls,best_gap`.
pub fn write_curves<W: Write>(w: W, grid: &[u64], curves: &[Curve]) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["family", "dim", "method", "calls", "best_gap"])?;
    for c in curves {
        for (calls, v) in grid.iter().zip(&c.values) {
            out.write_record([c.family.clone(), c.dim.to_string(), c.method.clone(), calls.to_string(), fmt_real(*v)])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Inverse of [`write_curves`]; returns the grid and one curve per series.
pub fn read_curves<R: Read>(r: R) -> Result<(Vec<u64>, Vec<Curve>), BenchError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut curves: Vec<(Curve, Vec<u64>)> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let f = |i: usize| rec.get(i).unwrap_or("");
        let (family, method) = (f(0).to_string(), f(2).to_string());
        let dim: usize = parse(f(1), "dim", line)?;
        let calls: u64 = parse(f(3), "calls", line)?;
        let v: f64 = parse(f(4), "best_gap", line)?;
        match curves.iter_mut().find(|(c, _)| c.family == family && c.dim == dim && c.method == method) {
            Some((c, g)) => {
                c.values.push(v);
                g.push(calls);
            }
            None => curves.push((Curve { family, dim, method, values: vec![v] }, vec![calls])),
        }
    }
    let grid = curves.first().map(|(_, g)| g.clone()).unwrap_or_default();
    if curves.iter().any(|(_, g)| *g != grid) {
        return Err(BenchError::Config("curves do not share one call grid".into()));
    }
    Ok((grid, curves.into_iter().map(|(c, _)| c).collect()))
}

pub const LOSS_HEADER: [&str; 12] =
    ["epoch", "update", "phase", "term", "best", "prog", "plan_sup", "ctrl", "jr", "port", "total", "grad_norm"];

/// Loss curve, one line per optimizer update.
pub fn write_losses<W: Write>(w: W, log: &[shape_core::training::LossRecord]) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(LOSS_HEADER)?;
    for r in log {
        let p = &r.parts;
        out.write_record([
            r.epoch.to_string(),
            r.update.to_string(),
            r.phase.name().to_string(),
            fmt_real(p.term),
            fmt_real(p.best),
            fmt_real(p.prog),
            fmt_real(p.plan_sup),
            fmt_real(p.ctrl),
            fmt_real(p.jr),
            fmt_real(p.port),
            fmt_real(p.total),
            fmt_real(r.grad_norm),
        ])?;
    }
    out.flush()?;
    Ok(())
}
