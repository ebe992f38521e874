//! Cell metadata, cycling logs, Ah-throughput accounting and end-of-life.
//!
//! Throughput is the cumulative absolute charge moved through a cell, charge
//! and discharge both counted. It is accumulated by trapezoidal integration of
//! `|current|` over every logged sample of every step.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_HOUR: f64 = 3600.0;

/// Sensor-noise allowance around the protocol voltage window.
pub const VOLTAGE_TOLERANCE: f64 = 0.1;

/// End of life is 80% of the first diagnostic capacity.
pub const EOL_THRESHOLD: f64 = 0.8;

pub const CYCLING_HEADER: [&str; 8] = [
    "cell_id",
    "cycle_index",
    "step_type",
    "test_time_s",
    "current_a",
    "voltage_v",
    "temperature_c",
    "step_capacity_ah",
];

pub const METADATA_HEADER: [&str; 8] = [
    "cell_id",
    "nominal_capacity_ah",
    "v_min",
    "v_max",
    "condition_group",
    "charge_c_rate",
    "discharge_c_rate",
    "nominal_temperature_c",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConditionGroup {
    A,
    B,
    C,
    D,
}

impl FromStr for ConditionGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            other => Err(Error::Metadata(format!("unknown condition group {other:?}"))),
        }
    }
}

impl fmt::Display for ConditionGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetadata {
    pub cell_id: String,
    /// Ah
    pub nominal_capacity: f64,
    /// V
    pub v_min: f64,
    /// V
    pub v_max: f64,
    pub condition_group: ConditionGroup,
    /// 1/h
    pub charge_c_rate: f64,
    /// 1/h
    pub discharge_c_rate: f64,
    /// °C
    pub nominal_temperature: f64,
}

impl CellMetadata {
    pub fn validate(&self) -> Result<()> {
        if self.cell_id.is_empty() {
            return Err(Error::Metadata("empty cell_id".into()));
        }
        if !(self.nominal_capacity > 0.0) {
            return Err(Error::Metadata(format!(
                "{}: nominal capacity must be positive",
                self.cell_id
            )));
        }
        if !(self.v_min < self.v_max) {
            return Err(Error::Metadata(format!("{}: v_min must be below v_max", self.cell_id)));
        }
        if !(self.charge_c_rate > 0.0 && self.discharge_c_rate > 0.0) {
            return Err(Error::Metadata(format!("{}: C-rates must be positive", self.cell_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepType {
    CcCharge,
    CvCharge,
    CcDischarge,
    CvHold,
    Rest,
    DiagC20Charge,
    DiagC20Discharge,
}

impl StepType {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::CcCharge => "cc_charge",
            Self::CvCharge => "cv_charge",
            Self::CcDischarge => "cc_discharge",
            Self::CvHold => "cv_hold",
            Self::Rest => "rest",
            Self::DiagC20Charge => "diag_c20_charge",
            Self::DiagC20Discharge => "diag_c20_discharge",
        }
    }
}

impl FromStr for StepType {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Ok(match s {
            "cc_charge" => Self::CcCharge,
            "cv_charge" => Self::CvCharge,
            "cc_discharge" => Self::CcDischarge,
            "cv_hold" => Self::CvHold,
            "rest" => Self::Rest,
            "diag_c20_charge" => Self::DiagC20Charge,
            "diag_c20_discharge" => Self::DiagC20Discharge,
            _ => return Err(()),
        })
    }
}

impl fmt::Display for StepType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSample {
    /// s
    pub test_time: f64,
    /// A, positive while charging
    pub current: f64,
    /// V
    pub voltage: f64,
    /// °C
    pub temperature: f64,
    /// Ah, cumulative within the step
    pub step_capacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub step_type: StepType,
    pub samples: Vec<StepSample>,
}

impl Step {
    /// Trapezoidal integral of `|current|` over the step, in Ah.
    pub fn throughput(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| 0.5 * (w[0].current.abs() + w[1].current.abs()) * (w[1].test_time - w[0].test_time))
            .sum::<f64>()
            / SECONDS_PER_HOUR
    }

    /// Capacity reported by the last sample of the step.
    pub fn final_capacity(&self) -> Option<f64> {
        self.samples.last().map(|s| s.step_capacity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleLog {
    pub cycle_index: u32,
    pub steps: Vec<Step>,
    /// Ah moved through the cell before this cycle began.
    pub throughput_at_start: f64,
}

impl CycleLog {
    pub fn throughput(&self) -> f64 {
        self.steps.iter().map(Step::throughput).sum()
    }

    pub fn step(&self, step_type: StepType) -> Option<&Step> {
        self.steps.iter().find(|s| s.step_type == step_type)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticPoint {
    /// Ah
    pub throughput: f64,
    /// Ah
    pub discharge_capacity: f64,
}

/// Slow reference discharges, ordered by throughput.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSeries {
    points: Vec<DiagnosticPoint>,
}

impl DiagnosticSeries {
    pub fn new(points: Vec<DiagnosticPoint>) -> Result<Self> {
        for w in points.windows(2) {
            if !(w[1].throughput > w[0].throughput) {
                return Err(Error::InvalidInput(format!(
                    "diagnostic throughput must be strictly increasing ({} then {})",
                    w[0].throughput, w[1].throughput
                )));
            }
        }
        if let Some(p) = points.iter().find(|p| !(p.discharge_capacity > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "diagnostic capacity must be positive, got {} at {} Ah",
                p.discharge_capacity, p.throughput
            )));
        }
        Ok(Self { points })
    }

    /// Convenience constructor from `(throughput, capacity)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(throughput, discharge_capacity)| DiagnosticPoint {
                    throughput,
                    discharge_capacity,
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[DiagnosticPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn initial_capacity(&self) -> Option<f64> {
        self.points.first().map(|p| p.discharge_capacity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub metadata: CellMetadata,
    pub cycles: Vec<CycleLog>,
    pub diagnostics: DiagnosticSeries,
}

impl CellRecord {
    pub fn cell_id(&self) -> &str {
        &self.metadata.cell_id
    }

    /// Rebuilds the per-cycle throughput labels and the diagnostic series
    /// from the logged samples.
    pub fn from_cycles(metadata: CellMetadata, mut cycles: Vec<CycleLog>) -> Result<Self> {
        cycles.sort_by_key(|c| c.cycle_index);
        let mut running = 0.0;
        let mut points = Vec::new();
        for cycle in &mut cycles {
            cycle.throughput_at_start = running;
            for step in &cycle.steps {
                if step.step_type == StepType::DiagC20Discharge {
                    if let Some(cap) = step.final_capacity() {
                        points.push(DiagnosticPoint {
                            throughput: running,
                            discharge_capacity: cap,
                        });
                    }
                }
                running += step.throughput();
            }
        }
        Ok(Self {
            metadata,
            cycles,
            diagnostics: DiagnosticSeries::new(points)?,
        })
    }
}

/// Ah-throughput at which capacity reached the end-of-life threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AhThroughputLife {
    pub value: f64,
    /// The threshold was never reached; `value` is the last observed throughput.
    pub censored: bool,
}

/// Throughput at which the piecewise-linear capacity trace first reaches
/// `threshold_fraction` of the initial (first diagnostic) capacity.
pub fn compute_eol(diagnostics: &DiagnosticSeries, threshold_fraction: f64) -> Result<AhThroughputLife> {
    let pts = diagnostics.points();
    if pts.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "end of life needs at least 2 diagnostic points, got {}",
            pts.len()
        )));
    }
    let threshold = threshold_fraction * pts[0].discharge_capacity;
    if pts[0].discharge_capacity <= threshold {
        return Ok(AhThroughputLife {
            value: pts[0].throughput,
            censored: false,
        });
    }
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.discharge_capacity <= threshold {
            if b.discharge_capacity == threshold {
                return Ok(AhThroughputLife {
                    value: b.throughput,
                    censored: false,
                });
            }
            let t = (a.discharge_capacity - threshold) / (a.discharge_capacity - b.discharge_capacity);
            return Ok(AhThroughputLife {
                value: a.throughput + t * (b.throughput - a.throughput),
                censored: false,
            });
        }
    }
    Ok(AhThroughputLife {
        value: pts[pts.len() - 1].throughput,
        censored: true,
    })
}

/// Interpolated diagnostic capacity at `throughput`, relative to the initial capacity.
pub fn capacity_retention_at(diagnostics: &DiagnosticSeries, throughput: f64) -> Result<f64> {
    let pts = diagnostics.points();
    let (first, last) = match (pts.first(), pts.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::InsufficientData("no diagnostic points".into())),
    };
    if !(throughput >= first.throughput && throughput <= last.throughput) {
        return Err(Error::InsufficientData(format!(
            "{throughput} Ah outside diagnostic span [{}, {}] Ah",
            first.throughput, last.throughput
        )));
    }
    let idx = pts.partition_point(|p| p.throughput < throughput);
    let capacity = if pts[idx].throughput == throughput {
        pts[idx].discharge_capacity
    } else {
        let (a, b) = (pts[idx - 1], pts[idx]);
        let t = (throughput - a.throughput) / (b.throughput - a.throughput);
        a.discharge_capacity + t * (b.discharge_capacity - a.discharge_capacity)
    };
    Ok(capacity / first.discharge_capacity)
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

struct Columns {
    index: Vec<usize>,
}

impl Columns {
    fn resolve(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Self> {
        let index = wanted
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h.trim() == *name)
                    .ok_or_else(|| Error::Metadata(format!("missing column {name:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { index })
    }

    fn get<'r>(&self, record: &'r csv::StringRecord, col: usize) -> &'r str {
        record.get(self.index[col]).unwrap_or("").trim()
    }
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_f64(record: &csv::StringRecord, cols: &Columns, col: usize, name: &str) -> Result<f64> {
    let raw = cols.get(record, col);
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::MalformedRow {
            line: line_of(record),
            message: format!("field {name} is not a finite number: {raw:?}"),
        })
}

/// Parses a metadata CSV into cell metadata, in file order.
pub fn read_metadata_csv<R: Read>(source: R) -> Result<Vec<CellMetadata>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let cols = Columns::resolve(reader.headers()?, &METADATA_HEADER)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = line_of(&record);
        let field = |col: usize| -> Result<&str> {
            let v = cols.get(&record, col);
            if v.is_empty() {
                Err(Error::Metadata(format!(
                    "line {line}: missing field {}",
                    METADATA_HEADER[col]
                )))
            } else {
                Ok(v)
            }
        };
        let number = |col: usize| -> Result<f64> {
            let raw = field(col)?;
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::Metadata(format!(
                    "line {line}: field {} is not a number: {raw:?}",
                    METADATA_HEADER[col]
                ))
            })
        };
        let meta = CellMetadata {
            cell_id: field(0)?.to_string(),
            nominal_capacity: number(1)?,
            v_min: number(2)?,
            v_max: number(3)?,
            condition_group: field(4)?.parse()?,
            charge_c_rate: number(5)?,
            discharge_c_rate: number(6)?,
            nominal_temperature: number(7)?,
        };
        meta.validate()?;
        if out.iter().any(|m: &CellMetadata| m.cell_id == meta.cell_id) {
            return Err(Error::Metadata(format!(
                "line {line}: duplicate cell_id {:?}",
                meta.cell_id
            )));
        }
        out.push(meta);
    }
    Ok(out)
}

/// Reads a cycling log (possibly holding several cells) together with its
/// metadata file and returns one record per metadata row, in metadata order.
///
/// Consecutive rows of one cell sharing `(cycle_index, step_type)` form a step.
/// Cells listed in the metadata but absent from the log come back with no cycles.
pub fn ingest_cycling_csv<L: Read, M: Read>(log_source: L, metadata_source: M) -> Result<Vec<CellRecord>> {
    let metadata = read_metadata_csv(metadata_source)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(log_source);
    let cols = Columns::resolve(reader.headers()?, &CYCLING_HEADER).map_err(|e| match e {
        Error::Metadata(m) => Error::MalformedRow { line: 1, message: m },
        other => other,
    })?;

    // cell -> cycle_index -> steps (with the line each step started on)
    let mut cells: BTreeMap<String, BTreeMap<u32, Vec<Step>>> = BTreeMap::new();
    let mut last_key: BTreeMap<String, (u32, StepType)> = BTreeMap::new();

    for record in reader.records() {
        let record = record?;
        let line = line_of(&record);
        let cell_id = cols.get(&record, 0).to_string();
        let meta = metadata
            .iter()
            .find(|m| m.cell_id == cell_id)
            .ok_or_else(|| Error::Metadata(format!("line {line}: no metadata for cell {cell_id:?}")))?;
        let cycle_raw = cols.get(&record, 1);
        let cycle_index: u32 = cycle_raw
            .parse()
            .ok()
            .filter(|&c| c >= 1)
            .ok_or_else(|| Error::MalformedRow {
                line,
                message: format!("cycle_index must be an integer >= 1, got {cycle_raw:?}"),
            })?;
        let step_raw = cols.get(&record, 2);
        let step_type: StepType = step_raw.parse().map_err(|_| Error::UnknownStepType {
            line,
            value: step_raw.to_string(),
        })?;
        let sample = StepSample {
            test_time: parse_f64(&record, &cols, 3, "test_time_s")?,
            current: parse_f64(&record, &cols, 4, "current_a")?,
            voltage: parse_f64(&record, &cols, 5, "voltage_v")?,
            temperature: parse_f64(&record, &cols, 6, "temperature_c")?,
            step_capacity: parse_f64(&record, &cols, 7, "step_capacity_ah")?,
        };
        let (lo, hi) = (meta.v_min - VOLTAGE_TOLERANCE, meta.v_max + VOLTAGE_TOLERANCE);
        if !(sample.voltage >= lo && sample.voltage <= hi) {
            return Err(Error::VoltageOutOfRange {
                line,
                cell_id,
                voltage: sample.voltage,
                lo,
                hi,
            });
        }

        let steps = cells
            .entry(cell_id.clone())
            .or_default()
            .entry(cycle_index)
            .or_default();
        let continues = last_key.get(&cell_id) == Some(&(cycle_index, step_type));
        match steps.last_mut() {
            Some(step) if continues => {
                let prev = step.samples.last().expect("steps are never empty").test_time;
                if sample.test_time < prev {
                    return Err(Error::NonMonotoneTime {
                        line,
                        previous: prev,
                        current: sample.test_time,
                    });
                }
                step.samples.push(sample);
            }
            _ => steps.push(Step {
                step_type,
                samples: vec![sample],
            }),
        }
        last_key.insert(cell_id, (cycle_index, step_type));
    }

    metadata
        .into_iter()
        .map(|meta| {
            let cycles = cells
                .remove(&meta.cell_id)
                .unwrap_or_default()
                .into_iter()
                .map(|(cycle_index, mut steps)| {
                    steps.sort_by(|a, b| a.samples[0].test_time.total_cmp(&b.samples[0].test_time));
                    CycleLog {
                        cycle_index,
                        steps,
                        throughput_at_start: 0.0,
                    }
                })
                .collect();
            CellRecord::from_cycles(meta, cycles)
        })
        .collect()
}

/// Writes cells in the cycling-log CSV schema.
pub fn write_cycling_csv<W: Write>(cells: &[CellRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(CYCLING_HEADER)?;
    for cell in cells {
        for cycle in &cell.cycles {
            let idx = cycle.cycle_index.to_string();
            for step in &cycle.steps {
                for s in &step.samples {
                    w.write_record([
                        cell.cell_id(),
                        idx.as_str(),
                        step.step_type.as_str(),
                        &s.test_time.to_string(),
                        &s.current.to_string(),
                        &s.voltage.to_string(),
                        &s.temperature.to_string(),
                        &s.step_capacity.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_metadata_csv<W: Write>(metadata: &[CellMetadata], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(METADATA_HEADER)?;
    for m in metadata {
        w.write_record([
            m.cell_id.clone(),
            m.nominal_capacity.to_string(),
            m.v_min.to_string(),
            m.v_max.to_string(),
            m.condition_group.to_string(),
            m.charge_c_rate.to_string(),
            m.discharge_c_rate.to_string(),
            m.nominal_temperature.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
