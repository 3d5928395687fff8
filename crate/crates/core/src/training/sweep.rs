//! Head-count and temperature sweeps.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};

use super::trainer::{TrainData, Trainer};
use super::checkpoint::TrainState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::Scalar;

pub const SWEEP_HEADER: &str = "sweep,M,sigma,dev_macro_f1";

/// Values for the two one-dimensional sweeps. An empty list skips that sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub heads: Vec<usize>,
    pub sigmas: Vec<f64>,
}

impl SweepGrid {
    /// Parses `M=1,3,5;sigma=0.1,0.2`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut grid = Self {
            heads: Vec::new(),
            sigmas: Vec::new(),
        };
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid part {part:?} is not of the form key=v1,v2")))?;
            let bad = |x: &str| Error::Config(format!("grid value {x:?} for {k} is not a number"));
            match k.trim() {
                "M" => {
                    grid.heads = v
                        .split(',')
                        .map(|x| x.trim().parse().map_err(|_| bad(x)))
                        .collect::<Result<_>>()?
                }
                "sigma" => {
                    grid.sigmas = v
                        .split(',')
                        .map(|x| x.trim().parse().map_err(|_| bad(x)))
                        .collect::<Result<_>>()?
                }
                other => return Err(Error::Config(format!("unknown grid axis {other:?}; use M or sigma"))),
            }
        }
        if grid.heads.is_empty() && grid.sigmas.is_empty() {
            return Err(Error::Config("empty sweep grid".into()));
        }
        Ok(grid)
    }

    /// Cells in output order: the M sweep at the base temperature, then the
    /// sigma sweep at the base head count.
    pub fn cells(&self, base: &RunConfig) -> Vec<SweepCell> {
        let m = self.heads.iter().map(|&h| SweepCell {
            sweep: SweepAxis::Heads,
            heads: h,
            sigma: base.model.temperature,
        });
        let s = self.sigmas.iter().map(|&sigma| SweepCell {
            sweep: SweepAxis::Sigma,
            heads: base.model.heads,
            sigma,
        });
        m.chain(s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Heads,
    Sigma,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Heads => "M",
            SweepAxis::Sigma => "sigma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub sweep: SweepAxis,
    pub heads: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub dev_macro_f1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Cells whose run failed, with the error text.
    pub failures: Vec<(SweepCell, String)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.cell.sweep.as_str(),
                r.cell.heads,
                r.cell.sigma,
                r.dev_macro_f1
            );
        }
        out
    }
}

/// Trains one model per cell (identical settings are trained once) and
/// records its best dev macro F1. Failing cells are logged and skipped.
pub fn hyper_sweep<S: Scalar>(base: &RunConfig, grid: &SweepGrid, data: &TrainData<S>) -> Result<SweepResult> {
    let mut done: Vec<((usize, u64), std::result::Result<f64, String>)> = Vec::new();
    let mut result = SweepResult::default();
    for cell in grid.cells(base) {
        let key = (cell.heads, cell.sigma.to_bits());
        let outcome = match done.iter().find(|(k, _)| *k == key) {
            Some((_, r)) => r.clone(),
            None => {
                let r = run_cell(base, cell, data).map_err(|e| e.to_string());
                done.push((key, r.clone()));
                r
            }
        };
        match outcome {
            Ok(f1) => {
                info!("sweep {} M={} sigma={}: dev macro F1 {f1:.4}", cell.sweep.as_str(), cell.heads, cell.sigma);
                result.rows.push(SweepRow { cell, dev_macro_f1: f1 });
            }
            Err(e) => {
                warn!("sweep cell M={} sigma={} failed: {e}", cell.heads, cell.sigma);
                result.failures.push((cell, e));
            }
        }
    }
    Ok(result)
}

fn run_cell<S: Scalar>(base: &RunConfig, cell: SweepCell, data: &TrainData<S>) -> Result<f64> {
    let mut cfg = base.clone();
    cfg.model.heads = cell.heads;
    cfg.model.temperature = cell.sigma;
    cfg.validate()?;
    let outcome = Trainer::new(TrainState::new(cfg)?, data, None)?.run()?;
    outcome
        .best_f1
        .ok_or_else(|| Error::Consistency("run ended without a dev evaluation".into()))
}

/// Writes the sweep table to `path`.
pub fn write_sweep(result: &SweepResult, path: &Path) -> Result<()> {
    std::fs::write(path, result.to_csv()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing_and_cells() {
        let g = SweepGrid::parse("M=1,3,5,7,9;sigma=0.1,0.2,0.5,1.0").unwrap();
        assert_eq!(g.heads, vec![1, 3, 5, 7, 9]);
        let base = RunConfig::default();
        let cells = g.cells(&base);
        assert_eq!(cells.len(), 9);
        assert!(cells[..5].iter().all(|c| c.sigma == 0.2 && c.sweep == SweepAxis::Heads));
        assert!(cells[5..].iter().all(|c| c.heads == 9 && c.sweep == SweepAxis::Sigma));
        assert_eq!(SweepGrid::parse("M=4").unwrap().cells(&base).len(), 1);
        assert!(SweepGrid::parse("K=1").is_err());
        assert!(SweepGrid::parse("M=a").is_err());
        assert!(SweepGrid::parse("").is_err());
    }
}
