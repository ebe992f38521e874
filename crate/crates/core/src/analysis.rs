//! Study drivers: the (x, y) heatmap sweep, partial voltage windows, the
//! charge-vs-discharge comparison and the early-retention baseline.
//!
//! Every driver works on a cohort of cells with an uncensored end of life and
//! correlates log features with log EOL. A cell whose feature is undefined at
//! some setting makes that entry missing; the cohort never shrinks per entry.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::{grid_cycle, Direction, GriddedCurve, VoltageGrid};
use crate::error::{Error, Result};
use crate::features::{curve_statistics, delta_q_from_curves, feature_row, select_cycle_at, FeatureRow, Statistic};
use crate::model::{capacity_retention_at, compute_eol, CellRecord, EOL_THRESHOLD};
use crate::regress::pearson;

pub const RETENTION_AH: f64 = 200.0;

/// `start, start + step, …` up to and including `end`.
pub fn ah_range(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidInput(format!("step must be positive, got {step}")));
    }
    let n = ((end - start) / step + 1e-9).floor();
    if !(n >= 0.0) {
        return Err(Error::InvalidInput(format!("empty range {start}..{end}")));
    }
    Ok((0..=n as usize).map(|i| start + i as f64 * step).collect())
}

/// Cells with a computable, uncensored end of life.
#[derive(Debug, Clone)]
pub struct Cohort<'a> {
    pub cells: Vec<&'a CellRecord>,
    pub eol: Vec<f64>,
}

impl<'a> Cohort<'a> {
    pub fn new(cells: &'a [CellRecord]) -> Result<Self> {
        let mut cohort = Cohort {
            cells: Vec::new(),
            eol: Vec::new(),
        };
        for cell in cells {
            if let Ok(life) = compute_eol(&cell.diagnostics, EOL_THRESHOLD) {
                if !life.censored && life.value > 0.0 {
                    cohort.cells.push(cell);
                    cohort.eol.push(life.value);
                }
            }
        }
        if cohort.cells.len() < 3 {
            return Err(Error::InsufficientData(format!(
                "need at least 3 cells with an end of life, got {}",
                cohort.cells.len()
            )));
        }
        Ok(cohort)
    }

    pub fn log_eol(&self) -> Vec<f64> {
        self.eol.iter().map(|e| e.log10()).collect()
    }
}

/// Gridded CC curves per cohort cell and target throughput.
struct CurveCache {
    targets: Vec<f64>,
    /// `curves[cell][target]`
    curves: Vec<Vec<Result<GriddedCurve>>>,
}

impl CurveCache {
    fn build(cohort: &Cohort, targets: &[f64], grid: &VoltageGrid, direction: Direction) -> Self {
        let mut targets = targets.to_vec();
        targets.sort_by(f64::total_cmp);
        targets.dedup();
        let curves = cohort
            .cells
            .par_iter()
            .map(|cell| {
                targets
                    .iter()
                    .map(|&t| grid_cycle(select_cycle_at(cell, t)?, grid, direction))
                    .collect()
            })
            .collect();
        Self { targets, curves }
    }

    fn get(&self, cell: usize, target: f64) -> &Result<GriddedCurve> {
        let i = self
            .targets
            .binary_search_by(|t| t.total_cmp(&target))
            .expect("target was cached");
        &self.curves[cell][i]
    }

    /// Log statistic of `ΔQ_{x−y}` for every cell, or `None` if any is undefined.
    fn log_features(&self, x: f64, y: f64, v_floor: Option<f64>, statistic: Statistic) -> Option<Vec<f64>> {
        (0..self.curves.len())
            .map(|c| {
                let (qx, qy) = match (self.get(c, x), self.get(c, y)) {
                    (Ok(qx), Ok(qy)) => (qx, qy),
                    _ => return None,
                };
                let dq = delta_q_from_curves(qx, qy, x, y, v_floor).ok()?;
                statistic.log_value(&curve_statistics(&dq).ok()?)
            })
            .collect()
    }

    fn first_error(&self, targets: &[f64]) -> Option<&Error> {
        (0..self.curves.len())
            .flat_map(|c| targets.iter().map(move |&t| (c, t)))
            .find_map(|(c, t)| self.get(c, t).as_ref().err())
    }
}

fn correlate(features: Option<Vec<f64>>, log_eol: &[f64]) -> Option<f64> {
    pearson(&features?, log_eol).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    pub x_values: Vec<f64>,
    pub y_values: Vec<f64>,
    pub cap: f64,
    pub statistic: Statistic,
    pub direction: Direction,
    /// Also fill entries with `y > x`.
    pub symmetric: bool,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        let ah = ah_range(10.0, 190.0, 10.0).expect("static range");
        Self {
            x_values: ah.clone(),
            y_values: ah,
            cap: 200.0,
            statistic: Statistic::Variance,
            direction: Direction::Discharge,
            symmetric: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapResult {
    pub x_values: Vec<f64>,
    pub y_values: Vec<f64>,
    /// `rho[ix][iy]`
    pub rho: Vec<Vec<Option<f64>>>,
}

impl HeatmapResult {
    pub fn get(&self, x: f64, y: f64) -> Option<f64> {
        let ix = self.x_values.iter().position(|&v| v == x)?;
        let iy = self.y_values.iter().position(|&v| v == y)?;
        self.rho[ix][iy]
    }

    /// Defined entries as `(x, y, rho)` in row-major order.
    pub fn entries(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for (ix, &x) in self.x_values.iter().enumerate() {
            for (iy, &y) in self.y_values.iter().enumerate() {
                if let Some(r) = self.rho[ix][iy] {
                    out.push((x, y, r));
                }
            }
        }
        out
    }

    /// Long form `x_ah,y_ah,rho`; missing entries inside the valid region have an empty `rho`.
    pub fn write_csv<W: Write>(&self, sink: W, cap: f64, symmetric: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["x_ah", "y_ah", "rho"])?;
        for (ix, &x) in self.x_values.iter().enumerate() {
            for (iy, &y) in self.y_values.iter().enumerate() {
                if !in_region(x, y, cap, symmetric) {
                    continue;
                }
                let rho = self.rho[ix][iy].map(|r| r.to_string()).unwrap_or_default();
                w.write_record([x.to_string(), y.to_string(), rho])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn in_region(x: f64, y: f64, cap: f64, symmetric: bool) -> bool {
    x <= cap && y <= cap && (y < x || (symmetric && y > x))
}

pub fn heatmap_sweep(cells: &[CellRecord], grid: &VoltageGrid, cfg: &HeatmapConfig) -> Result<HeatmapResult> {
    let pairs: Vec<(usize, usize)> = (0..cfg.x_values.len())
        .flat_map(|ix| (0..cfg.y_values.len()).map(move |iy| (ix, iy)))
        .filter(|&(ix, iy)| in_region(cfg.x_values[ix], cfg.y_values[iy], cfg.cap, cfg.symmetric))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no (x, y) pairs with y < x <= cap".into()));
    }
    let cohort = Cohort::new(cells)?;
    let log_eol = cohort.log_eol();
    let targets: Vec<f64> = cfg.x_values.iter().chain(&cfg.y_values).copied().collect();
    let cache = CurveCache::build(&cohort, &targets, grid, cfg.direction);
    let values: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|&(ix, iy)| {
            let f = cache.log_features(cfg.x_values[ix], cfg.y_values[iy], None, cfg.statistic);
            correlate(f, &log_eol)
        })
        .collect();
    let mut rho = vec![vec![None; cfg.y_values.len()]; cfg.x_values.len()];
    for (&(ix, iy), v) in pairs.iter().zip(values) {
        rho[ix][iy] = v;
    }
    Ok(HeatmapResult {
        x_values: cfg.x_values.clone(),
        y_values: cfg.y_values.clone(),
        rho,
    })
}

/// Entry with the largest `|rho|`; ties go to the larger `x − y`, then the smaller `y`.
pub fn best_pair(h: &HeatmapResult) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64, f64)> = None;
    for (x, y, r) in h.entries() {
        let better = match best {
            None => true,
            Some((bx, by, br)) => {
                let (a, b) = (r.abs(), br.abs());
                a > b || (a == b && (x - y > bx - by || (x - y == bx - by && y < by)))
            }
        };
        if better {
            best = Some((x, y, r));
        }
    }
    best.map(|(x, y, _)| (x, y))
        .ok_or_else(|| Error::InsufficientData("every heatmap entry is missing".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub x_ah: f64,
    pub y_ah: f64,
    pub v_floor_values: Vec<f64>,
    pub statistics: Vec<Statistic>,
    pub direction: Direction,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            x_ah: 190.0,
            y_ah: 10.0,
            v_floor_values: ah_range(3.0, 4.0, 0.05).expect("static range"),
            statistics: vec![Statistic::Variance, Statistic::Mean, Statistic::Minimum],
            direction: Direction::Discharge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSweepResult {
    pub v_floor_values: Vec<f64>,
    pub rho_by_statistic: BTreeMap<Statistic, Vec<Option<f64>>>,
}

impl WindowSweepResult {
    /// Long form `v_floor_v,statistic,rho`, statistics in the order given.
    pub fn write_csv<W: Write>(&self, sink: W, statistics: &[Statistic]) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["v_floor_v", "statistic", "rho"])?;
        for (i, v) in self.v_floor_values.iter().enumerate() {
            for st in statistics {
                let rho = self.rho_by_statistic[st][i].map(|r| r.to_string()).unwrap_or_default();
                w.write_record([v.to_string(), st.to_string(), rho])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn window_sweep(cells: &[CellRecord], grid: &VoltageGrid, cfg: &WindowConfig) -> Result<WindowSweepResult> {
    for &floor in &cfg.v_floor_values {
        let kept = grid.voltages().filter(|&v| v >= floor).count();
        if kept < 2 {
            return Err(Error::InvalidInput(format!(
                "v_floor {floor} V leaves {kept} grid points, need 2"
            )));
        }
    }
    let cohort = Cohort::new(cells)?;
    let log_eol = cohort.log_eol();
    let cache = CurveCache::build(&cohort, &[cfg.x_ah, cfg.y_ah], grid, cfg.direction);
    let settings: Vec<(Statistic, f64)> = cfg
        .statistics
        .iter()
        .flat_map(|&st| cfg.v_floor_values.iter().map(move |&v| (st, v)))
        .collect();
    let values: Vec<Option<f64>> = settings
        .par_iter()
        .map(|&(st, v)| correlate(cache.log_features(cfg.x_ah, cfg.y_ah, Some(v), st), &log_eol))
        .collect();
    let mut rho_by_statistic = BTreeMap::new();
    for (chunk, &st) in values.chunks(cfg.v_floor_values.len().max(1)).zip(&cfg.statistics) {
        rho_by_statistic.insert(st, chunk.to_vec());
    }
    Ok(WindowSweepResult {
        v_floor_values: cfg.v_floor_values.clone(),
        rho_by_statistic,
    })
}

/// Log-correlations of every statistic with log EOL, one table per direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareResult {
    pub x_ah: f64,
    pub y_ah: f64,
    pub discharge: Vec<(Statistic, Option<f64>)>,
    pub charge: Vec<(Statistic, Option<f64>)>,
}

impl CompareResult {
    pub fn rho(&self, direction: Direction, statistic: Statistic) -> Option<f64> {
        let table = match direction {
            Direction::Charge => &self.charge,
            Direction::Discharge => &self.discharge,
        };
        table.iter().find(|(s, _)| *s == statistic).and_then(|(_, r)| *r)
    }

    /// Long form `direction,statistic,rho`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["direction", "statistic", "rho"])?;
        for (dir, table) in [
            (Direction::Discharge, &self.discharge),
            (Direction::Charge, &self.charge),
        ] {
            for (st, r) in table {
                w.write_record([
                    dir.to_string(),
                    st.to_string(),
                    r.map(|r| r.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn charge_discharge_compare(
    cells: &[CellRecord],
    grid: &VoltageGrid,
    x_ah: f64,
    y_ah: f64,
) -> Result<CompareResult> {
    let cohort = Cohort::new(cells)?;
    let log_eol = cohort.log_eol();
    let table = |direction: Direction| -> Result<Vec<(Statistic, Option<f64>)>> {
        let cache = CurveCache::build(&cohort, &[x_ah, y_ah], grid, direction);
        if let Some(Error::NoCcSegment { cycle_index, direction }) = cache.first_error(&[x_ah, y_ah]) {
            return Err(Error::NoCcSegment {
                cycle_index: *cycle_index,
                direction: direction.clone(),
            });
        }
        Ok(Statistic::ALL
            .iter()
            .map(|&st| (st, correlate(cache.log_features(x_ah, y_ah, None, st), &log_eol)))
            .collect())
    };
    Ok(CompareResult {
        x_ah,
        y_ah,
        discharge: table(Direction::Discharge)?,
        charge: table(Direction::Charge)?,
    })
}

/// Correlation (linear space) between capacity retention at 200 Ah and EOL.
pub fn retention_baseline(cells: &[CellRecord]) -> Result<f64> {
    let cohort = Cohort::new(cells)?;
    let retention = cohort
        .cells
        .iter()
        .map(|c| capacity_retention_at(&c.diagnostics, RETENTION_AH))
        .collect::<Result<Vec<_>>>()?;
    pearson(&retention, &cohort.eol)
}

/// Feature rows for every cell at `(x, y)`, each paired with its own outcome.
pub fn compute_features(
    cells: &[CellRecord],
    grid: &VoltageGrid,
    x_ah: f64,
    y_ah: f64,
    direction: Direction,
) -> Vec<(String, Result<FeatureRow>)> {
    cells
        .par_iter()
        .map(|cell| {
            let row = (|| {
                let qx = grid_cycle(select_cycle_at(cell, x_ah)?, grid, direction)?;
                let qy = grid_cycle(select_cycle_at(cell, y_ah)?, grid, direction)?;
                let stats = curve_statistics(&delta_q_from_curves(&qx, &qy, x_ah, y_ah, None)?)?;
                let eol = compute_eol(&cell.diagnostics, EOL_THRESHOLD)?;
                feature_row(cell.cell_id(), &stats, &eol)
            })();
            (cell.cell_id().to_string(), row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::make_voltage_grid;
    use crate::model::{CellMetadata, ConditionGroup, CycleLog, DiagnosticSeries, Step, StepSample, StepType};

    /// Cell whose discharge capacity at throughput `a` is `(1 − shrink·a)·(4.2 − V)`
    /// on [3.0, 4.2] V, with a straight-line diagnostic trace crossing 80% at `eol`.
    fn toy_cell(id: &str, eol: f64, shrink: f64) -> CellRecord {
        let cycles = (0..25u32)
            .map(|k| {
                let scale = 1.0 - shrink * k as f64 * 10.0;
                let samples = (0..=60)
                    .map(|i| {
                        let v = 4.2 - 1.2 * i as f64 / 60.0;
                        StepSample {
                            test_time: i as f64,
                            current: -1.0,
                            voltage: v,
                            temperature: 25.0,
                            step_capacity: scale * (4.2 - v),
                        }
                    })
                    .collect();
                CycleLog {
                    cycle_index: k + 1,
                    steps: vec![Step {
                        step_type: StepType::CcDischarge,
                        samples,
                    }],
                    throughput_at_start: 0.0,
                }
            })
            .collect();
        let mut rec = CellRecord::from_cycles(
            CellMetadata {
                cell_id: id.into(),
                nominal_capacity: 5.0,
                v_min: 3.0,
                v_max: 4.2,
                condition_group: ConditionGroup::A,
                charge_c_rate: 0.2,
                discharge_c_rate: 0.2,
                nominal_temperature: 25.0,
            },
            cycles,
        )
        .unwrap();
        for (k, c) in rec.cycles.iter_mut().enumerate() {
            c.throughput_at_start = k as f64 * 10.0;
        }
        rec.diagnostics =
            DiagnosticSeries::from_pairs(&[(0.0, 5.0), (2000.0, 5.0 * (1.0 - 0.2 * 2000.0 / eol))]).unwrap();
        rec
    }

    fn toy_fleet() -> Vec<CellRecord> {
        vec![
            toy_cell("a", 1000.0, 2e-4),
            toy_cell("b", 700.0, 3e-4),
            toy_cell("c", 500.0, 5e-4),
        ]
    }

    #[test]
    fn ranges() {
        assert_eq!(ah_range(10.0, 190.0, 10.0).unwrap().len(), 19);
        assert!(ah_range(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn best_pair_rules() {
        let h = HeatmapResult {
            x_values: vec![100.0, 150.0, 190.0],
            y_values: vec![10.0],
            rho: vec![vec![Some(-0.5)], vec![Some(0.9)], vec![Some(-0.9)]],
        };
        assert_eq!(best_pair(&h).unwrap(), (190.0, 10.0));
        let single = HeatmapResult {
            x_values: vec![100.0, 190.0],
            y_values: vec![10.0],
            rho: vec![vec![Some(0.1)], vec![None]],
        };
        assert_eq!(best_pair(&single).unwrap(), (100.0, 10.0));
        let empty = HeatmapResult {
            rho: vec![vec![None], vec![None]],
            ..single
        };
        assert!(best_pair(&empty).is_err());
    }

    #[test]
    fn two_cells_are_too_few() {
        let grid = make_voltage_grid(3.0, 4.2, 50).unwrap();
        let cfg = HeatmapConfig {
            x_values: vec![50.0, 100.0],
            y_values: vec![10.0, 50.0],
            ..Default::default()
        };
        assert!(matches!(
            heatmap_sweep(&toy_fleet()[..2], &grid, &cfg),
            Err(Error::InsufficientData(_))
        ));
        let h = heatmap_sweep(&toy_fleet(), &grid, &cfg).unwrap();
        assert_eq!(h.entries().len(), 3);
        assert_eq!(h.get(10.0, 50.0), None);
    }

    #[test]
    fn heatmap_depends_on_per_cell_values_only() {
        let grid = make_voltage_grid(3.0, 4.2, 50).unwrap();
        let fleet = toy_fleet();
        let doubled: Vec<CellRecord> = fleet.iter().chain(&fleet).cloned().collect();
        let cfg = HeatmapConfig {
            x_values: vec![100.0, 200.0],
            y_values: vec![10.0],
            ..Default::default()
        };
        let a = heatmap_sweep(&fleet, &grid, &cfg).unwrap();
        let b = heatmap_sweep(&doubled, &grid, &cfg).unwrap();
        for ((_, _, ra), (_, _, rb)) in a.entries().into_iter().zip(b.entries()) {
            assert!((ra - rb).abs() < 1e-12);
        }
        assert_eq!(a, heatmap_sweep(&fleet, &grid, &cfg).unwrap());
        let none = HeatmapConfig {
            x_values: vec![10.0],
            y_values: vec![100.0],
            ..Default::default()
        };
        assert!(heatmap_sweep(&fleet, &grid, &none).is_err());
    }

    #[test]
    fn window_full_matches_heatmap() {
        let grid = make_voltage_grid(3.0, 4.2, 50).unwrap();
        let fleet = toy_fleet();
        let h = heatmap_sweep(
            &fleet,
            &grid,
            &HeatmapConfig {
                x_values: vec![190.0],
                y_values: vec![10.0],
                ..Default::default()
            },
        )
        .unwrap();
        let w = window_sweep(
            &fleet,
            &grid,
            &WindowConfig {
                v_floor_values: vec![3.0, 3.5],
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(w.rho_by_statistic[&Statistic::Variance][0], h.get(190.0, 10.0));
        let bad = WindowConfig {
            v_floor_values: vec![4.3],
            ..Default::default()
        };
        assert!(window_sweep(&fleet, &grid, &bad).is_err());
    }

    #[test]
    fn compare_requires_charge_segments() {
        let grid = make_voltage_grid(3.0, 4.2, 50).unwrap();
        assert!(matches!(
            charge_discharge_compare(&toy_fleet(), &grid, 190.0, 10.0),
            Err(Error::NoCcSegment { .. })
        ));
    }

    #[test]
    fn retention_needs_variation() {
        let fleet = toy_fleet();
        // straight-line diagnostics make retention an increasing function of EOL
        let r = retention_baseline(&fleet).unwrap();
        assert!(r > 0.9);
        assert!(retention_baseline(&fleet[..2]).is_err());
        let same = vec![
            toy_cell("a", 800.0, 2e-4),
            toy_cell("b", 800.0, 3e-4),
            toy_cell("c", 800.0, 4e-4),
        ];
        assert!(retention_baseline(&same).is_err());
    }
}
