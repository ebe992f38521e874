//! Seeded synthetic cycling data with closed-form lifetimes.
//!
//! Capacity follows `C(a) = C0 · (1 − δ·(1 − e^{−a/τ}) − β·a^γ)` in Ah
//! throughput `a`: a fast break-in loss `δ` that saturates within a few Ah,
//! then a power-law fade. With `δ = 0` this is the plain `C0·(1 − β·a^γ)` law.
//!
//! Lost capacity is taken out of the low-state-of-charge knee of the OCV curve:
//! an aged cell follows the fresh curve at high voltage and reaches the knee
//! early, so capacity-difference curves concentrate below the knee voltage.
//! Resistance grows linearly with throughput and shifts CC voltages by `I·R`.
//! Without a CV hold at `v_min`, each charge starts from where the previous
//! discharge cut off, so the low end of the charge curve is lost as `R` grows.
//!
//! Randomness comes from ChaCha8 with one stream per cell index under the
//! fleet seed, so each cell is reproducible on its own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::Direction;
use crate::error::{Error, Result};
use crate::model::{CellMetadata, CellRecord, ConditionGroup, CycleLog, Step, StepSample, StepType, SECONDS_PER_HOUR};

pub const FLEET_RNG: &str = "ChaCha8 (rand_chacha), stream = cell index";

const DIAG_SAMPLES: usize = 41;
const DIAG_TEMPERATURE: f64 = 25.0;
const MAX_THROUGHPUT: f64 = 50_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Ah
    pub nominal_capacity: f64,
    /// `(soc, V)` pairs, strictly increasing in both.
    pub ocv_knots: Vec<(f64, f64)>,
    /// Upper edge of the steep low-soc segment.
    pub knee_soc: f64,
    /// β, 1/Ah^γ
    pub fade_rate: f64,
    /// γ
    pub fade_exponent: f64,
    /// δ, fraction of nominal capacity
    pub break_in_loss: f64,
    /// τ, Ah
    pub break_in_scale: f64,
    /// Ω
    pub r0: f64,
    /// 1/Ah
    pub resistance_growth: f64,
    /// A
    pub charge_current: f64,
    /// A
    pub discharge_current: f64,
    /// V
    pub voltage_noise_sigma: f64,
    /// Relative noise on diagnostic capacity measurements.
    pub capacity_noise_sigma: f64,
    pub samples_per_curve: usize,
    pub eol_fraction: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// When true, charges start where the previous CC discharge cut off, with
    /// an extra start-of-charge voltage jump; when false a CV hold at `v_min`
    /// empties the cell first and charges start without the jump.
    pub charge_truncation: bool,
    /// Start-of-charge jump in V per unit of relative resistance growth
    /// `R(a)/r0 − 1`; it fades out linearly over `charge_jump_span`.
    pub charge_jump: f64,
    /// Ah
    pub charge_jump_span: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            nominal_capacity: 5.0,
            ocv_knots: vec![
                (0.0, 3.0),
                (0.02, 3.28),
                (0.05, 3.45),
                (0.1, 3.56),
                (0.3, 3.67),
                (0.55, 3.83),
                (0.8, 4.0),
                (1.0, 4.2),
            ],
            knee_soc: 0.1,
            fade_rate: 1.7e-3,
            fade_exponent: 0.6,
            break_in_loss: 0.0,
            break_in_scale: 2.0,
            r0: 0.002,
            resistance_growth: 1e-5,
            charge_current: 1.0,
            discharge_current: 1.0,
            voltage_noise_sigma: 0.002,
            capacity_noise_sigma: 0.004,
            samples_per_curve: 400,
            eol_fraction: 0.8,
            v_min: 3.0,
            v_max: 4.2,
            charge_truncation: true,
            charge_jump: 60.0,
            charge_jump_span: 0.5,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.nominal_capacity > 0.0) {
            return bad("nominal capacity must be positive".into());
        }
        if self.ocv_knots.len() < 2 {
            return bad("need at least two OCV knots".into());
        }
        for w in self.ocv_knots.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return bad(format!("OCV knots must increase strictly: {:?} then {:?}", w[0], w[1]));
            }
        }
        let (first, last) = (self.ocv_knots[0], self.ocv_knots[self.ocv_knots.len() - 1]);
        if first.0 != 0.0 || last.0 != 1.0 {
            return bad("OCV knots must span soc 0 to 1".into());
        }
        if first.1 < self.v_min || last.1 > self.v_max {
            return bad(format!(
                "OCV endpoints {} V..{} V outside [{}, {}] V",
                first.1, last.1, self.v_min, self.v_max
            ));
        }
        if !(self.knee_soc > 0.0 && self.knee_soc < 1.0) {
            return bad("knee soc must lie in (0, 1)".into());
        }
        let non_negative = [
            self.fade_rate,
            self.break_in_loss,
            self.r0,
            self.resistance_growth,
            self.voltage_noise_sigma,
            self.capacity_noise_sigma,
            self.charge_jump,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0)) {
            return bad("fade, break-in, resistance and noise parameters must be >= 0".into());
        }
        if !(self.fade_exponent > 0.0) || !(self.break_in_scale > 0.0) || !(self.charge_jump_span > 0.0) {
            return bad("fade exponent, break-in scale and charge jump span must be positive".into());
        }
        if !(self.charge_current > 0.0 && self.discharge_current > 0.0) {
            return bad("currents must be positive".into());
        }
        if self.samples_per_curve < 2 {
            return bad("need at least 2 samples per curve".into());
        }
        if !(self.eol_fraction > 0.0 && self.eol_fraction < 1.0) {
            return bad("eol fraction must lie in (0, 1)".into());
        }
        if self.break_in_loss >= 1.0 - self.eol_fraction {
            return bad("break-in loss alone would end the cell's life".into());
        }
        Ok(())
    }
}

/// Piecewise-linear open-circuit voltage.
pub fn ocv(soc: f64, knots: &[(f64, f64)]) -> Result<f64> {
    if !(0.0..=1.0).contains(&soc) {
        return Err(Error::InvalidInput(format!("soc {soc} outside [0, 1]")));
    }
    let i = knots.partition_point(|k| k.0 < soc);
    if i == 0 {
        return Ok(knots[0].1);
    }
    if i == knots.len() {
        return Ok(knots[knots.len() - 1].1);
    }
    let (s1, v1) = knots[i];
    if s1 == soc {
        return Ok(v1);
    }
    let (s0, v0) = knots[i - 1];
    Ok(v0 + (v1 - v0) * (soc - s0) / (s1 - s0))
}

/// Inverse of [`ocv`], clamped to [0, 1].
pub fn soc_at_voltage(v: f64, knots: &[(f64, f64)]) -> f64 {
    if v <= knots[0].1 {
        return knots[0].0;
    }
    let i = knots.partition_point(|k| k.1 < v);
    if i == knots.len() {
        return knots[knots.len() - 1].0;
    }
    let (s1, v1) = knots[i];
    if v1 == v {
        return s1;
    }
    let (s0, v0) = knots[i - 1];
    s0 + (s1 - s0) * (v - v0) / (v1 - v0)
}

/// Remaining capacity after `a` Ah of throughput.
pub fn capacity_at(a: f64, params: &SynthParams) -> Result<f64> {
    if !(a >= 0.0) {
        return Err(Error::InvalidInput(format!("throughput {a} must be >= 0")));
    }
    let loss = params.break_in_loss * (1.0 - (-a / params.break_in_scale).exp())
        + params.fade_rate * a.powf(params.fade_exponent);
    let c = params.nominal_capacity * (1.0 - loss);
    if !(c > 0.0) {
        return Err(Error::InvalidInput(format!(
            "capacity would be {c} Ah after {a} Ah of throughput"
        )));
    }
    Ok(c)
}

/// Throughput at which [`capacity_at`] reaches `eol_fraction × nominal`.
///
/// `((1 − f − δ)/β)^{1/γ}` once the break-in term has saturated, polished by
/// Newton steps on the full law for the cases where it has not.
pub fn true_eol(params: &SynthParams) -> Result<f64> {
    let target_loss = 1.0 - params.eol_fraction;
    let room = target_loss - params.break_in_loss;
    if !(params.fade_rate > 0.0) || !(room > 0.0) {
        return Err(Error::InvalidInput("the cell never reaches end of life".into()));
    }
    let (beta, gamma, delta, tau) = (
        params.fade_rate,
        params.fade_exponent,
        params.break_in_loss,
        params.break_in_scale,
    );
    let mut a = (room / beta).powf(1.0 / gamma);
    for _ in 0..50 {
        let e = (-a / tau).exp();
        let f = delta * (1.0 - e) + beta * a.powf(gamma) - target_loss;
        if f == 0.0 {
            break;
        }
        let df = delta * e / tau + beta * gamma * a.powf(gamma - 1.0);
        let next = a - f / df;
        if next == a || !(next > 0.0) {
            break;
        }
        a = next;
    }
    Ok(a)
}

pub fn resistance_at(a: f64, params: &SynthParams) -> f64 {
    params.r0 * (1.0 + params.resistance_growth * a)
}

/// Charge/soc bookkeeping for a cell at one point of its life. Lost capacity
/// comes out of the bottom of the soc range: above `knee_top` the cell follows
/// the fresh curve, below it the remaining charge is compressed linearly.
#[derive(Debug, Clone, Copy)]
struct AgedWindow {
    nominal: f64,
    capacity: f64,
    knee_top: f64,
}

impl AgedWindow {
    fn new(capacity: f64, params: &SynthParams) -> Self {
        let loss = (params.nominal_capacity - capacity).max(0.0);
        let knee_top = params.knee_soc.max(loss / (0.95 * params.nominal_capacity)).min(1.0);
        Self {
            nominal: params.nominal_capacity,
            capacity,
            knee_top,
        }
    }

    fn knee_charge(&self) -> f64 {
        self.nominal * (1.0 - self.knee_top)
    }

    /// Charge removed when discharging from full down to `soc`.
    fn discharged(&self, soc: f64) -> f64 {
        if soc >= self.knee_top {
            self.nominal * (1.0 - soc)
        } else {
            let q0 = self.knee_charge();
            q0 + (self.capacity - q0) * (self.knee_top - soc) / self.knee_top
        }
    }

    fn soc_after(&self, discharged: f64) -> f64 {
        let q0 = self.knee_charge();
        if discharged <= q0 {
            (1.0 - discharged / self.nominal).min(1.0)
        } else {
            (self.knee_top - (discharged - q0) * self.knee_top / (self.capacity - q0)).max(0.0)
        }
    }
}

/// One CC trace with its noiseless end state.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTrace {
    /// `(voltage, step capacity)` in time order.
    pub samples: Vec<(f64, f64)>,
    pub end_soc: f64,
}

fn noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma)
            .expect("sigma is finite and positive")
            .sample(rng)
    } else {
        0.0
    }
}

/// Constant-current trace at throughput `a`, starting from `start_soc`, with
/// `n` samples evenly spaced in capacity plus the sample at the voltage limit.
fn cc_trace(
    a: f64,
    direction: Direction,
    start_soc: f64,
    n: usize,
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<CurveTrace> {
    let window = AgedWindow::new(capacity_at(a, params)?, params);
    let r = resistance_at(a, params);
    let knots = &params.ocv_knots;
    let q_start = window.discharged(start_soc);
    let mut clean: Vec<(f64, f64)> = Vec::with_capacity(n + 1);
    let end_soc;
    match direction {
        Direction::Discharge => {
            let drop = params.discharge_current * r;
            let span = window.capacity - q_start;
            for k in 0..n {
                let q = span * k as f64 / (n - 1) as f64;
                let v = ocv(window.soc_after(q_start + q), knots)? - drop;
                if v < params.v_min {
                    break;
                }
                if v <= params.v_max {
                    clean.push((v, q));
                }
            }
            let cutoff = params.v_min + drop;
            end_soc = if cutoff > knots[0].1 {
                soc_at_voltage(cutoff, knots)
            } else {
                0.0
            };
            let q_end = window.discharged(end_soc) - q_start;
            let v_end = ocv(end_soc, knots)? - drop;
            if clean.last().is_none_or(|&(v, q)| v > v_end && q < q_end) {
                clean.push((v_end, q_end));
            }
        }
        Direction::Charge => {
            let rise = params.charge_current * r;
            let jump = charge_jump_at(a, params);
            for k in 0..n {
                let q = q_start * k as f64 / (n - 1) as f64;
                let v = ocv(window.soc_after(q_start - q), knots)?
                    + rise
                    + jump * (1.0 - q / params.charge_jump_span).max(0.0);
                if v > params.v_max {
                    break;
                }
                if v >= params.v_min {
                    clean.push((v, q));
                }
            }
            let cutoff = params.v_max - rise;
            end_soc = if cutoff < knots[knots.len() - 1].1 {
                soc_at_voltage(cutoff, knots).max(start_soc)
            } else {
                1.0
            };
            let q_end = q_start - window.discharged(end_soc);
            let v_end = ocv(end_soc, knots)? + rise;
            if clean.last().is_none_or(|&(v, q)| v < v_end && q < q_end) {
                clean.push((v_end, q_end));
            }
        }
    }
    let sigma = params.voltage_noise_sigma;
    let samples = clean.into_iter().map(|(v, q)| (v + noise(rng, sigma), q)).collect();
    Ok(CurveTrace { samples, end_soc })
}

/// Extra voltage at the very start of a truncated charge.
pub fn charge_jump_at(a: f64, params: &SynthParams) -> f64 {
    if params.charge_truncation {
        params.charge_jump * params.resistance_growth * a
    } else {
        0.0
    }
}

/// Soc at which a CC discharge at throughput `a` hits `v_min`.
pub fn discharge_cutoff_soc(a: f64, params: &SynthParams) -> f64 {
    let cutoff = params.v_min + params.discharge_current * resistance_at(a, params);
    if cutoff > params.ocv_knots[0].1 {
        soc_at_voltage(cutoff, &params.ocv_knots)
    } else {
        0.0
    }
}

/// CC charge or discharge trace of a cell that has seen `a` Ah of throughput.
///
/// Discharges start full. Charges start at the discharge cutoff when
/// `charge_truncation` is set and from empty otherwise.
pub fn synth_cycle_curve(
    a: f64,
    direction: Direction,
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(f64, f64)>> {
    let start = match direction {
        Direction::Discharge => 1.0,
        Direction::Charge if params.charge_truncation => discharge_cutoff_soc(a, params),
        Direction::Charge => 0.0,
    };
    Ok(cc_trace(a, direction, start, params.samples_per_curve, params, rng)?.samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub group: ConditionGroup,
    /// °C
    pub temperature: f64,
    pub charge_c_rate: f64,
    pub discharge_c_rate: f64,
    /// Multiplies the base fade rate.
    pub fade_multiplier: f64,
    /// Multiplies the base resistance.
    pub resistance_multiplier: f64,
}

/// Four C-rate groups at hot, cold and room temperature.
pub fn default_conditions() -> Vec<Condition> {
    let groups = [
        (ConditionGroup::A, 0.2, 0.2, 1.0),
        (ConditionGroup::B, 0.2, 1.5, 1.1),
        (ConditionGroup::C, 1.5, 1.5, 1.2),
        (ConditionGroup::D, 2.0, 2.0, 1.3),
    ];
    // temperature, fade multiplier, resistance multiplier
    let temps = [(45.0, 1.3, 0.8), (-5.0, 1.15, 2.0), (25.0, 1.0, 1.0)];
    groups
        .iter()
        .flat_map(|&(group, chg, dis, gm)| {
            temps.iter().map(move |&(temperature, tm, rm)| Condition {
                group,
                temperature,
                charge_c_rate: chg,
                discharge_c_rate: dis,
                fade_multiplier: gm * tm,
                resistance_multiplier: rm,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    pub n_cells: usize,
    pub seed: u64,
    pub base: SynthParams,
    /// Cell `i` uses `conditions[i % len]`.
    pub conditions: Vec<Condition>,
    /// Fade rate is scaled by `exp(U(−j, j))`.
    pub fade_jitter: f64,
    /// Resistance growth is scaled by `exp(U(−j, j))`.
    pub resistance_jitter: f64,
    /// Break-in loss is drawn from `U(0, max)`.
    pub break_in_max: f64,
    /// Cycles starting beyond this throughput are logged at their end points only.
    pub full_resolution_until: f64,
    /// Diagnostics are scheduled at every multiple of this expected capacity loss.
    pub diagnostic_loss_step: f64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            n_cells: 12,
            seed: 0,
            base: SynthParams::default(),
            conditions: default_conditions(),
            fade_jitter: 0.1,
            resistance_jitter: 0.3,
            break_in_max: 0.01,
            full_resolution_until: 220.0,
            diagnostic_loss_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCell {
    pub record: CellRecord,
    pub true_eol: f64,
    pub params: SynthParams,
    pub condition: Condition,
}

/// Per-cell summary written to the fleet manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell_id: String,
    pub condition: Condition,
    pub fade_rate: f64,
    pub resistance_growth: f64,
    pub break_in_loss: f64,
    pub true_eol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetManifest {
    pub seed: u64,
    pub rng: String,
    pub config: FleetConfig,
    pub cells: Vec<CellSummary>,
}

impl FleetManifest {
    pub fn new(config: &FleetConfig, cells: &[SynthCell]) -> Self {
        Self {
            seed: config.seed,
            rng: FLEET_RNG.into(),
            config: config.clone(),
            cells: cells
                .iter()
                .map(|c| CellSummary {
                    cell_id: c.record.cell_id().to_string(),
                    condition: c.condition.clone(),
                    fade_rate: c.params.fade_rate,
                    resistance_growth: c.params.resistance_growth,
                    break_in_loss: c.params.break_in_loss,
                    true_eol: c.true_eol,
                })
                .collect(),
        }
    }
}

/// Cell parameters after condition multipliers and jitter drawn from `rng`.
fn cell_params(config: &FleetConfig, condition: &Condition, rng: &mut ChaCha8Rng) -> SynthParams {
    let mut log_jitter = |half: f64| {
        if half > 0.0 {
            rng.random_range(-half..=half).exp()
        } else {
            1.0
        }
    };
    let fade = log_jitter(config.fade_jitter);
    let growth = log_jitter(config.resistance_jitter);
    let break_in = if config.break_in_max > 0.0 {
        rng.random_range(0.0..=config.break_in_max)
    } else {
        0.0
    };
    let base = &config.base;
    SynthParams {
        fade_rate: base.fade_rate * condition.fade_multiplier * fade,
        resistance_growth: base.resistance_growth * growth,
        r0: base.r0 * condition.resistance_multiplier,
        break_in_loss: base.break_in_loss + break_in,
        charge_current: condition.charge_c_rate * base.nominal_capacity,
        discharge_current: condition.discharge_c_rate * base.nominal_capacity,
        ..base.clone()
    }
}

struct LogBuilder<'a> {
    params: &'a SynthParams,
    temperature: f64,
    time: f64,
    throughput: f64,
    soc: f64,
}

impl LogBuilder<'_> {
    fn finish(&mut self, step_type: StepType, samples: Vec<StepSample>) -> Step {
        let step = Step { step_type, samples };
        self.throughput += step.throughput();
        if let Some(last) = step.samples.last() {
            self.time = last.test_time;
        }
        step
    }

    fn cc_step(&mut self, direction: Direction, n: usize, rng: &mut ChaCha8Rng) -> Result<Step> {
        let trace = cc_trace(self.throughput, direction, self.soc, n, self.params, rng)?;
        let (current, step_type) = match direction {
            Direction::Charge => (self.params.charge_current, StepType::CcCharge),
            Direction::Discharge => (-self.params.discharge_current, StepType::CcDischarge),
        };
        let t0 = self.time;
        let samples = trace
            .samples
            .iter()
            .map(|&(voltage, q)| StepSample {
                test_time: t0 + q / current.abs() * SECONDS_PER_HOUR,
                current,
                voltage,
                temperature: self.temperature,
                step_capacity: q,
            })
            .collect();
        self.soc = trace.end_soc;
        Ok(self.finish(step_type, samples))
    }

    /// Constant-voltage phase moving the cell to `target_soc`, with current
    /// decaying linearly from `i_start` to C/50.
    fn cv_step(&mut self, step_type: StepType, voltage: f64, i_start: f64, target_soc: f64) -> Result<Option<Step>> {
        let window = AgedWindow::new(capacity_at(self.throughput, self.params)?, self.params);
        let charge = (window.discharged(self.soc) - window.discharged(target_soc)).abs();
        self.soc = target_soc;
        if !(charge > 1e-12) {
            return Ok(None);
        }
        let i_end = self.params.nominal_capacity / 50.0;
        let i0 = i_start.abs().max(i_end);
        let hours = 2.0 * charge / (i0 + i_end);
        let sign = if step_type == StepType::CvHold { -1.0 } else { 1.0 };
        let t0 = self.time;
        let samples = [0.0, 0.5, 1.0]
            .iter()
            .map(|&f| {
                let i = i0 + (i_end - i0) * f;
                StepSample {
                    test_time: t0 + f * hours * SECONDS_PER_HOUR,
                    current: sign * i,
                    voltage,
                    temperature: self.temperature,
                    step_capacity: 0.5 * (i0 + i) * f * hours,
                }
            })
            .collect();
        Ok(Some(self.finish(step_type, samples)))
    }

    /// Slow near-equilibrium sweep between `from` and `to` soc.
    fn diag_step(&mut self, step_type: StepType, from: f64, to: f64, rng: &mut ChaCha8Rng) -> Result<Step> {
        let window = AgedWindow::new(capacity_at(self.throughput, self.params)?, self.params);
        let current = self.params.nominal_capacity / 20.0;
        let signed = if step_type == StepType::DiagC20Discharge {
            -current
        } else {
            current
        };
        let q_from = window.discharged(from);
        let gain = 1.0 + noise(rng, self.params.capacity_noise_sigma);
        let t0 = self.time;
        let samples = (0..DIAG_SAMPLES)
            .map(|k| {
                let soc = (from + (to - from) * k as f64 / (DIAG_SAMPLES - 1) as f64).clamp(0.0, 1.0);
                let q = gain * (window.discharged(soc) - q_from).abs();
                Ok(StepSample {
                    test_time: t0 + q / current * SECONDS_PER_HOUR,
                    current: signed,
                    voltage: ocv(soc, &self.params.ocv_knots)? + noise(rng, self.params.voltage_noise_sigma),
                    temperature: DIAG_TEMPERATURE,
                    step_capacity: q,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.soc = to;
        Ok(self.finish(step_type, samples))
    }
}

/// Full cycling history of one cell: regular CC-CV charge / CC discharge
/// cycles with slow diagnostics scheduled at expected capacity-loss steps,
/// ending at the first diagnostic below the end-of-life threshold.
fn simulate_cell(
    cell_id: String,
    config: &FleetConfig,
    condition: &Condition,
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<CellRecord> {
    let expected_fade = config.base.fade_rate * condition.fade_multiplier;
    let expected_at = |loss: f64| (loss / expected_fade).powf(1.0 / params.fade_exponent);
    let mut log = LogBuilder {
        params,
        temperature: condition.temperature,
        time: 0.0,
        throughput: 0.0,
        soc: 1.0,
    };
    // The reference test is a cycle of its own at zero throughput. Later tests
    // follow the regular steps of a cycle so the recorded cycle start stays
    // the state at which its CC curves were measured.
    let reference_step = log.diag_step(StepType::DiagC20Discharge, 1.0, 0.0, rng)?;
    let reference = reference_step.final_capacity().unwrap_or(0.0);
    let mut cycles = vec![CycleLog {
        cycle_index: 1,
        steps: vec![reference_step],
        throughput_at_start: 0.0,
    }];
    // No tests inside the early window, so cycle starts there stay evenly spaced.
    let mut diag_index = 1u32;
    let mut next_diag = expected_at(config.diagnostic_loss_step);
    while next_diag <= config.full_resolution_until {
        diag_index += 1;
        next_diag = expected_at(diag_index as f64 * config.diagnostic_loss_step);
    }
    for cycle_index in 2u32.. {
        if log.throughput > MAX_THROUGHPUT {
            return Err(Error::InvalidInput(format!(
                "{cell_id} did not reach end of life within {MAX_THROUGHPUT} Ah"
            )));
        }
        let start = log.throughput;
        let n = if start <= config.full_resolution_until {
            params.samples_per_curve
        } else {
            2
        };
        let mut steps = Vec::new();
        steps.push(log.cc_step(Direction::Charge, n, rng)?);
        if let Some(cv) = log.cv_step(StepType::CvCharge, params.v_max, params.charge_current, 1.0)? {
            steps.push(cv);
        }
        steps.push(log.cc_step(Direction::Discharge, n, rng)?);
        if !params.charge_truncation {
            if let Some(cv) = log.cv_step(StepType::CvHold, params.v_min, params.discharge_current, 0.0)? {
                steps.push(cv);
            }
        }
        let mut done = false;
        if log.throughput >= next_diag {
            let from = log.soc;
            steps.push(log.diag_step(StepType::DiagC20Charge, from, 1.0, rng)?);
            let diag = log.diag_step(StepType::DiagC20Discharge, 1.0, 0.0, rng)?;
            done = diag.final_capacity().unwrap_or(0.0) < params.eol_fraction * reference;
            steps.push(diag);
            while next_diag <= log.throughput {
                diag_index += 1;
                next_diag = expected_at(diag_index as f64 * config.diagnostic_loss_step);
            }
        }
        cycles.push(CycleLog {
            cycle_index,
            steps,
            throughput_at_start: start,
        });
        if done {
            break;
        }
    }
    let metadata = CellMetadata {
        cell_id,
        nominal_capacity: params.nominal_capacity,
        v_min: params.v_min,
        v_max: params.v_max,
        condition_group: condition.group,
        charge_c_rate: condition.charge_c_rate,
        discharge_c_rate: condition.discharge_c_rate,
        nominal_temperature: condition.temperature,
    };
    CellRecord::from_cycles(metadata, cycles)
}

/// Generates one synthetic cell; `index` selects the condition and RNG stream.
pub fn synth_cell(config: &FleetConfig, index: usize) -> Result<SynthCell> {
    if config.conditions.is_empty() {
        return Err(Error::InvalidInput("fleet needs at least one condition".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let condition = config.conditions[index % config.conditions.len()].clone();
    let params = cell_params(config, &condition, &mut rng);
    params.validate()?;
    let record = simulate_cell(format!("cell{:02}", index + 1), config, &condition, &params, &mut rng)?;
    Ok(SynthCell {
        true_eol: true_eol(&params)?,
        record,
        params,
        condition,
    })
}

pub fn synth_fleet(config: &FleetConfig) -> Result<Vec<SynthCell>> {
    if config.n_cells < 2 {
        return Err(Error::InvalidInput(format!(
            "fleet needs at least 2 cells, got {}",
            config.n_cells
        )));
    }
    config.base.validate()?;
    (0..config.n_cells)
        .into_par_iter()
        .map(|i| synth_cell(config, i))
        .collect()
}

/// Smallest and largest true end of life any seed can produce under `config`,
/// from the extremes of the condition grid and the jitter bounds.
pub fn eol_bounds(config: &FleetConfig) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in &config.conditions {
        for (fade, break_in) in [
            ((-config.fade_jitter).exp(), 0.0),
            (config.fade_jitter.exp(), config.break_in_max),
        ] {
            let p = SynthParams {
                fade_rate: config.base.fade_rate * c.fade_multiplier * fade,
                break_in_loss: config.base.break_in_loss + break_in,
                ..config.base.clone()
            };
            let eol = true_eol(&p)?;
            lo = lo.min(eol);
            hi = hi.max(eol);
        }
    }
    Ok((lo, hi))
}
