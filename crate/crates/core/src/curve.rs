//! Capacity as a function of voltage on a shared uniform voltage grid.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CycleLog, StepType};

pub const DEFAULT_GRID_POINTS: usize = 1000;
pub const DEFAULT_V_LO: f64 = 3.0;
pub const DEFAULT_V_HI: f64 = 4.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Charge,
    Discharge,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Charge => "charge",
            Self::Discharge => "discharge",
        }
    }

    pub fn cc_step(self) -> StepType {
        match self {
            Self::Charge => StepType::CcCharge,
            Self::Discharge => StepType::CcDischarge,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Self::Charge => Self::Discharge,
            Self::Discharge => Self::Charge,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "charge" => Ok(Self::Charge),
            "discharge" => Ok(Self::Discharge),
            other => Err(Error::InvalidInput(format!(
                "direction must be charge or discharge, got {other:?}"
            ))),
        }
    }
}

/// Uniform voltage axis with inclusive endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageGrid {
    v_lo: f64,
    v_hi: f64,
    n_points: usize,
}

impl VoltageGrid {
    pub fn new(v_lo: f64, v_hi: f64, n_points: usize) -> Result<Self> {
        if !(v_lo.is_finite() && v_hi.is_finite() && v_lo < v_hi) {
            return Err(Error::InvalidInput(format!(
                "voltage grid needs v_lo < v_hi, got [{v_lo}, {v_hi}]"
            )));
        }
        if n_points < 2 {
            return Err(Error::InvalidInput(format!(
                "voltage grid needs at least 2 points, got {n_points}"
            )));
        }
        Ok(Self { v_lo, v_hi, n_points })
    }

    pub fn v_lo(&self) -> f64 {
        self.v_lo
    }

    pub fn v_hi(&self) -> f64 {
        self.v_hi
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        (self.v_hi - self.v_lo) / (self.n_points - 1) as f64
    }

    pub fn voltage(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            self.v_hi
        } else {
            self.v_lo + i as f64 * self.spacing()
        }
    }

    pub fn voltages(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points).map(|i| self.voltage(i))
    }
}

impl Default for VoltageGrid {
    fn default() -> Self {
        Self {
            v_lo: DEFAULT_V_LO,
            v_hi: DEFAULT_V_HI,
            n_points: DEFAULT_GRID_POINTS,
        }
    }
}

pub fn make_voltage_grid(v_lo: f64, v_hi: f64, n_points: usize) -> Result<VoltageGrid> {
    VoltageGrid::new(v_lo, v_hi, n_points)
}

/// Capacity sampled on a voltage grid; `None` where the source curve did not reach.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedCurve {
    pub grid: VoltageGrid,
    pub q: Vec<Option<f64>>,
    pub direction: Direction,
    /// Throughput at the start of the source cycle, Ah.
    pub throughput_label: f64,
}

impl GriddedCurve {
    pub fn n_defined(&self) -> usize {
        self.q.iter().filter(|v| v.is_some()).count()
    }

    /// `voltage_v,q_ah` rows, empty field where missing.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["voltage_v", "q_ah"])?;
        for (v, q) in self.grid.voltages().zip(&self.q) {
            w.write_record([v.to_string(), q.map(|q| q.to_string()).unwrap_or_default()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(voltage, step capacity)` pairs of the cycle's CC step in `direction`.
/// CV phases are separate step types and never included.
pub fn extract_cc_segment(cycle: &CycleLog, direction: Direction) -> Result<Vec<(f64, f64)>> {
    let step = cycle.step(direction.cc_step()).ok_or_else(|| Error::NoCcSegment {
        cycle_index: cycle.cycle_index,
        direction: direction.to_string(),
    })?;
    Ok(step.samples.iter().map(|s| (s.voltage, s.step_capacity)).collect())
}

/// Drops every sample whose voltage fails to move strictly past the last kept
/// one (downwards on discharge, upwards on charge).
pub fn monotone_filter(samples: &[(f64, f64)], direction: Direction) -> Vec<(f64, f64)> {
    let mut kept: Vec<(f64, f64)> = Vec::with_capacity(samples.len());
    for &(v, q) in samples {
        let advances = match kept.last() {
            None => true,
            Some(&(last, _)) => match direction {
                Direction::Discharge => v < last,
                Direction::Charge => v > last,
            },
        };
        if advances {
            kept.push((v, q));
        }
    }
    kept
}

/// Inverts a time-ordered `(V, Ah)` trace into `Q(V)` on `grid` by linear
/// interpolation between the monotone-filtered samples.
pub fn invert_to_grid(samples: &[(f64, f64)], grid: &VoltageGrid, direction: Direction) -> Result<GriddedCurve> {
    let mut kept = monotone_filter(samples, direction);
    if kept.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} monotone samples survive filtering, need 2",
            kept.len()
        )));
    }
    if direction == Direction::Discharge {
        kept.reverse();
    }
    // kept is now strictly increasing in voltage
    let (lo, hi) = (kept[0].0, kept[kept.len() - 1].0);
    let q = grid
        .voltages()
        .map(|v| {
            if !(v >= lo && v <= hi) {
                return None;
            }
            let idx = kept.partition_point(|&(sv, _)| sv < v);
            let (v1, q1) = kept[idx];
            if v1 == v {
                return Some(q1);
            }
            let (v0, q0) = kept[idx - 1];
            Some(q0 + (q1 - q0) * (v - v0) / (v1 - v0))
        })
        .collect();
    Ok(GriddedCurve {
        grid: *grid,
        q,
        direction,
        throughput_label: 0.0,
    })
}

/// Extracts, filters and grids the CC segment of one cycle.
pub fn grid_cycle(cycle: &CycleLog, grid: &VoltageGrid, direction: Direction) -> Result<GriddedCurve> {
    let samples = extract_cc_segment(cycle, direction)?;
    let mut curve = invert_to_grid(&samples, grid, direction)?;
    curve.throughput_label = cycle.throughput_at_start;
    Ok(curve)
}
