//! CSV and JSON log files.
//!
//! Every float is written as `{:.16e}` (17 significant digits), which parses
//! back to the identical `f64`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{MetricRow, MetricsSummary};
use super::{ScenarioConfig, SimLog};
use crate::dynamics::{FleetInput, FleetState, RobotInput, RobotState};
use crate::error::{Error, Result};
use crate::optimizer::SolveStatus;
use crate::safety_filter::FilterMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::Config(format!("unknown log format `{other}`"))),
        }
    }
}

const PER_AGENT: [&str; 7] = ["x", "y", "theta", "v_c", "omega_c", "v_s", "omega_s"];
const TRAILING: [&str; 6] = ["intervention", "a", "min_d", "min_wall", "mode", "solver_status"];

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_header(fleet_size: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for i in 1..=fleet_size {
        h.extend(PER_AGENT.iter().map(|c| format!("{c}_{i}")));
    }
    h.extend(TRAILING.iter().map(|c| c.to_string()));
    h
}

/// One row per step: `t`, then per agent `x, y, theta, v_c, omega_c, v_s,
/// omega_s`, then `intervention, a, min_d, min_wall, mode, solver_status`.
pub fn write_csv(log: &SimLog, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let wrap = |e: csv::Error| Error::format(path, e);
    w.write_record(csv_header(log.fleet_size())).map_err(wrap)?;
    let mut row = Vec::new();
    for r in &log.records {
        row.clear();
        row.push(num(r.t));
        for i in 0..log.fleet_size() {
            let (s, c, u) = (&r.x_true.agents[i], &r.u_c.agents[i], &r.u_s.agents[i]);
            row.extend([s.x, s.y, s.theta, c.v, c.omega, u.v, u.omega].map(num));
        }
        row.push(num(r.intervention));
        row.push(if r.alarm { "1" } else { "0" }.to_string());
        row.push(num(r.min_pair));
        row.push(num(r.min_wall));
        row.push(r.mode.as_str().to_string());
        row.push(r.solver.as_ref().map_or("none", |s| s.status.as_str()).to_string());
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub t: f64,
    pub x_true: FleetState,
    pub u_c: FleetInput,
    pub u_s: FleetInput,
    pub intervention: f64,
    pub alarm: bool,
    pub min_pair: f64,
    pub min_wall: f64,
    pub mode: FilterMode,
    pub solver_status: Option<SolveStatus>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvLog {
    pub fleet_size: usize,
    pub rows: Vec<CsvRow>,
}

impl CsvLog {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.rows
            .iter()
            .map(|r| MetricRow {
                t: r.t,
                x_true: r.x_true.clone(),
                intervention: r.intervention,
                agent_intervention: None,
                alarm: r.alarm,
                min_pair: r.min_pair,
                min_wall: r.min_wall,
                mode: r.mode,
            })
            .collect()
    }
}

fn parse_status(s: &str) -> Option<Option<SolveStatus>> {
    Some(match s {
        "none" => None,
        "optimal" => Some(SolveStatus::Optimal),
        "feasible-suboptimal" => Some(SolveStatus::FeasibleSuboptimal),
        "infeasible" => Some(SolveStatus::Infeasible),
        "iteration-limit" => Some(SolveStatus::IterationLimit),
        _ => return None,
    })
}

pub fn read_csv(path: &Path) -> Result<CsvLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(io::BufReader::new(file));
    let header = rdr.headers().map_err(|e| Error::format(path, e))?.clone();
    let width = header.len();
    if width < 1 + TRAILING.len() || (width - 1 - TRAILING.len()) % PER_AGENT.len() != 0 {
        return Err(Error::format(path, format!("unexpected column count {width}")));
    }
    let n = (width - 1 - TRAILING.len()) / PER_AGENT.len();
    if header.iter().ne(csv_header(n).iter().map(String::as_str)) {
        return Err(Error::format(path, "header does not match the log schema"));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", line + 1));
        let f = |k: usize| -> Result<f64> { rec[k].parse::<f64>().map_err(|_| bad(&header[k])) };
        let mut states = Vec::with_capacity(n);
        let mut u_c = Vec::with_capacity(n);
        let mut u_s = Vec::with_capacity(n);
        for i in 0..n {
            let b = 1 + i * PER_AGENT.len();
            states.push(RobotState::new(f(b)?, f(b + 1)?, f(b + 2)?));
            u_c.push(RobotInput::new(f(b + 3)?, f(b + 4)?));
            u_s.push(RobotInput::new(f(b + 5)?, f(b + 6)?));
        }
        let tail = 1 + n * PER_AGENT.len();
        rows.push(CsvRow {
            t: f(0)?,
            x_true: FleetState::new(states),
            u_c: FleetInput::new(u_c),
            u_s: FleetInput::new(u_s),
            intervention: f(tail)?,
            alarm: match &rec[tail + 1] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("a")),
            },
            min_pair: f(tail + 2)?,
            min_wall: f(tail + 3)?,
            mode: FilterMode::parse(&rec[tail + 4]).ok_or_else(|| bad("mode"))?,
            solver_status: parse_status(&rec[tail + 5]).ok_or_else(|| bad("solver_status"))?,
        });
    }
    Ok(CsvLog { fleet_size: n, rows })
}

/// Full run record: configuration, summary and every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonDocument {
    pub config: ScenarioConfig,
    pub summary: MetricsSummary,
    pub log: SimLog,
}

struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        write!(w, "{v:.8e}")
    }
}

pub fn write_json(doc: &JsonDocument, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    doc.serialize(&mut ser).map_err(|e| Error::format(path, e))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json(path: &Path) -> Result<JsonDocument> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(io::BufReader::new(file)).map_err(|e| Error::format(path, e))
}
