//! Capacity-difference curves `ΔQ_{x-y}(V) = Q_x(V) - Q_y(V)` and their
//! summary statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curve::{grid_cycle, Direction, GriddedCurve, VoltageGrid};
use crate::error::{Error, Result};
use crate::model::{AhThroughputLife, CellRecord, CycleLog};

/// Below this variance (Ah²) skew and kurtosis are reported as 0.
pub const DEGENERATE_VARIANCE: f64 = 1e-18;

/// Cycle whose `throughput_at_start` is nearest `target`; ties go to the earlier cycle.
pub fn select_cycle_at(cell: &CellRecord, target: f64) -> Result<&CycleLog> {
    let mut best: Option<(&CycleLog, f64)> = None;
    for cycle in &cell.cycles {
        let d = (cycle.throughput_at_start - target).abs();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((cycle, d));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::InsufficientData(format!("cell {} has no cycles", cell.cell_id())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaQCurve {
    pub grid: VoltageGrid,
    /// Defined where both source curves are defined (and above any voltage floor).
    pub dq: Vec<Option<f64>>,
    pub x_ah: f64,
    pub y_ah: f64,
    pub direction: Direction,
}

impl DeltaQCurve {
    pub fn n_defined(&self) -> usize {
        self.dq.iter().filter(|v| v.is_some()).count()
    }

    pub fn defined_values(&self) -> Vec<f64> {
        self.dq.iter().flatten().copied().collect()
    }

    /// Marks every grid point below `v_floor` as missing.
    pub fn with_floor(mut self, v_floor: f64) -> Self {
        for (i, v) in self.grid.voltages().enumerate() {
            if v < v_floor {
                self.dq[i] = None;
            }
        }
        self
    }
}

/// Pointwise difference of two gridded curves on their common domain.
pub fn delta_q_from_curves(
    qx: &GriddedCurve,
    qy: &GriddedCurve,
    x_ah: f64,
    y_ah: f64,
    v_floor: Option<f64>,
) -> Result<DeltaQCurve> {
    if qx.grid != qy.grid {
        return Err(Error::InvalidInput("curves are on different voltage grids".into()));
    }
    if qx.direction != qy.direction {
        return Err(Error::InvalidInput("curves have different directions".into()));
    }
    let dq =
        qx.q.iter()
            .zip(&qy.q)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            })
            .collect();
    let mut curve = DeltaQCurve {
        grid: qx.grid,
        dq,
        x_ah,
        y_ah,
        direction: qx.direction,
    };
    if let Some(floor) = v_floor {
        curve = curve.with_floor(floor);
    }
    if curve.n_defined() < 2 {
        return Err(Error::InsufficientData(format!(
            "ΔQ({x_ah}-{y_ah}) has {} defined grid points, need 2",
            curve.n_defined()
        )));
    }
    Ok(curve)
}

/// `ΔQ_{x-y}` for one cell, optionally restricted to voltages at or above `v_floor`.
pub fn delta_q(
    cell: &CellRecord,
    x_ah: f64,
    y_ah: f64,
    grid: &VoltageGrid,
    direction: Direction,
    v_floor: Option<f64>,
) -> Result<DeltaQCurve> {
    let qx = grid_cycle(select_cycle_at(cell, x_ah)?, grid, direction)?;
    let qy = grid_cycle(select_cycle_at(cell, y_ah)?, grid, direction)?;
    delta_q_from_curves(&qx, &qy, x_ah, y_ah, v_floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    pub minimum: f64,
    pub mean: f64,
    pub variance: f64,
    pub skew: f64,
    pub kurtosis: f64,
    pub n_defined: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Minimum,
    Mean,
    Variance,
    Skew,
    Kurtosis,
}

impl Statistic {
    pub const ALL: [Statistic; 5] = [
        Statistic::Minimum,
        Statistic::Mean,
        Statistic::Variance,
        Statistic::Skew,
        Statistic::Kurtosis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Minimum => "minimum",
            Self::Mean => "mean",
            Self::Variance => "variance",
            Self::Skew => "skew",
            Self::Kurtosis => "kurtosis",
        }
    }

    pub fn value(self, stats: &CurveStats) -> f64 {
        match self {
            Self::Minimum => stats.minimum,
            Self::Mean => stats.mean,
            Self::Variance => stats.variance,
            Self::Skew => stats.skew,
            Self::Kurtosis => stats.kurtosis,
        }
    }

    /// `log10 |value|`, or `None` when the magnitude is zero.
    pub fn log_value(self, stats: &CurveStats) -> Option<f64> {
        let v = self.value(stats).abs().log10();
        v.is_finite().then_some(v)
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Statistic::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown statistic {s:?}")))
    }
}

/// Moments over the defined points with 1/n normalisation; kurtosis is not
/// excess (a Gaussian gives 3).
pub fn statistics_of(values: &[f64]) -> Result<CurveStats> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "statistics need 2 defined points, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let minimum = values.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let (skew, kurtosis) = if m2 < DEGENERATE_VARIANCE {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    };
    Ok(CurveStats {
        minimum,
        mean,
        variance: m2,
        skew,
        kurtosis,
        n_defined: n,
    })
}

pub fn curve_statistics(curve: &DeltaQCurve) -> Result<CurveStats> {
    statistics_of(&curve.defined_values())
}

/// Per-cell log features paired with log Ah-throughput life.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub cell_id: String,
    pub log_var: f64,
    pub log_abs_mean: f64,
    pub log_abs_min: f64,
    pub log_eol: f64,
    pub extra: BTreeMap<String, f64>,
}

impl FeatureRow {
    pub const FEATURE_NAMES: [&'static str; 3] = ["log_var", "log_abs_mean", "log_abs_min"];

    pub fn features(&self) -> [f64; 3] {
        [self.log_var, self.log_abs_mean, self.log_abs_min]
    }
}

pub fn feature_row(cell_id: &str, stats: &CurveStats, eol: &AhThroughputLife) -> Result<FeatureRow> {
    if eol.censored {
        return Err(Error::CensoredEol(eol.value));
    }
    let log = |v: f64, what: &'static str| -> Result<f64> {
        let l = v.abs().log10();
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::ZeroMagnitude(what))
        }
    };
    Ok(FeatureRow {
        cell_id: cell_id.to_string(),
        log_var: log(stats.variance, "variance")?,
        log_abs_mean: log(stats.mean, "mean")?,
        log_abs_min: log(stats.minimum, "minimum")?,
        log_eol: log(eol.value, "end of life")?,
        extra: BTreeMap::new(),
    })
}

/// Writes rows as `cell_id,log_var,log_abs_mean,log_abs_min,log_eol[,extra...]`.
/// Extra columns are the union of all rows' keys, sorted; absent values are empty.
pub fn write_features_csv<W: Write>(rows: &[FeatureRow], sink: W) -> Result<()> {
    let extras: Vec<String> = rows
        .iter()
        .flat_map(|r| r.extra.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["cell_id".to_string()];
    header.extend(FeatureRow::FEATURE_NAMES.iter().map(|s| s.to_string()));
    header.push("log_eol".into());
    header.extend(extras.iter().cloned());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.cell_id.clone(),
            r.log_var.to_string(),
            r.log_abs_mean.to_string(),
            r.log_abs_min.to_string(),
            r.log_eol.to_string(),
        ];
        rec.extend(
            extras
                .iter()
                .map(|k| r.extra.get(k).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features_csv<R: Read>(source: R) -> Result<Vec<FeatureRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let required = ["cell_id", "log_var", "log_abs_mean", "log_abs_min", "log_eol"];
    let idx: Vec<usize> = required
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::MalformedRow {
                    line: 1,
                    message: format!("feature file lacks column {name:?}"),
                })
        })
        .collect::<Result<_>>()?;
    let extra_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !idx.contains(i))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let num = |i: usize| -> Result<f64> {
            let raw = record.get(i).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedRow {
                    line,
                    message: format!("{} is not a finite number: {raw:?}", &headers[i]),
                })
        };
        let mut extra = BTreeMap::new();
        for (i, name) in &extra_cols {
            if !record.get(*i).unwrap_or("").is_empty() {
                extra.insert(name.clone(), num(*i)?);
            }
        }
        rows.push(FeatureRow {
            cell_id: record.get(idx[0]).unwrap_or("").to_string(),
            log_var: num(idx[1])?,
            log_abs_mean: num(idx[2])?,
            log_abs_min: num(idx[3])?,
            log_eol: num(idx[4])?,
            extra,
        });
    }
    Ok(rows)
}
