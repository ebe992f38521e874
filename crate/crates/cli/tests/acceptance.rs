//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::result::Result;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dqlife_core::analysis::{
    charge_discharge_compare, compute_features, heatmap_sweep, retention_baseline, window_sweep, HeatmapConfig,
    WindowConfig,
};
use dqlife_core::features::{delta_q_from_curves, DeltaQCurve};
use dqlife_core::synth::{ocv, synth_cycle_curve};
use dqlife_core::*;

const RANDOM_INSTANCES: usize = 200;
const ORACLE_RTOL: f64 = 1e-10;
const RIDGE_MEAN_TOL: f64 = 1e-6;
const ORTHOGONALITY_TOL: f64 = 1e-9;
const IDENTITY_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;
const MIN_CORRELATION: f64 = -0.85;
const WINDOW_DROP: f64 = 0.2;
const RMSE_RATIO: f64 = 0.7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Largest elementwise difference relative to the largest reference magnitude.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

// ---- independent oracles ----

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// minimum, mean, variance, skew, kurtosis with 1/n moments.
fn oracle_moments(v: &[f64]) -> [f64; 5] {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let central = |k: i32| v.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / n;
    let m2 = central(2);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    [min, mean, m2, central(3) / m2.powf(1.5), central(4) / (m2 * m2)]
}

fn oracle_eol(points: &[(f64, f64)], fraction: f64) -> (f64, bool) {
    let threshold = fraction * points[0].1;
    if points[0].1 <= threshold {
        return (points[0].0, false);
    }
    for i in 1..points.len() {
        let (t0, c0) = points[i - 1];
        let (t1, c1) = points[i];
        if c1 <= threshold {
            let slope = (c1 - c0) / (t1 - t0);
            return (t0 + (threshold - c0) / slope, false);
        }
    }
    (points[points.len() - 1].0, true)
}

/// Gaussian elimination with partial pivoting on a dense system.
#[allow(clippy::needless_range_loop)]
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Ridge on population-standardised features with an unpenalised intercept,
/// solved as one (p + 1)-dimensional system. Returns (intercept, weights).
fn oracle_ridge(x: &[Vec<f64>], y: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let n = x.len();
    let p = x[0].len();
    let nf = n as f64;
    let mut z = vec![vec![0.0; p]; n];
    for j in 0..p {
        let m = x.iter().map(|r| r[j]).sum::<f64>() / nf;
        let s = (x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / nf).sqrt();
        for i in 0..n {
            z[i][j] = (x[i][j] - m) / s;
        }
    }
    // design row = [1, z...]
    let mut a = vec![vec![0.0; p + 1]; p + 1];
    let mut b = vec![0.0; p + 1];
    for i in 0..n {
        let row: Vec<f64> = std::iter::once(1.0).chain(z[i].iter().copied()).collect();
        for r in 0..=p {
            b[r] += row[r] * y[i];
            for c in 0..=p {
                a[r][c] += row[r] * row[c];
            }
        }
    }
    for (k, row) in a.iter_mut().enumerate().skip(1) {
        row[k] += alpha;
    }
    let sol = gauss_solve(a, b);
    (sol[0], sol[1..].to_vec())
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Dataset {
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let y: Vec<f64> = x
        .iter()
        .map(|r| 3.0 + r.iter().sum::<f64>() * 0.2 + rng.random_range(-0.3..0.3))
        .collect();
    let ids = (0..n).map(|i| format!("c{i}")).collect();
    let names = (0..p).map(|j| format!("f{j}")).collect();
    Dataset::new(x, y, ids, names).unwrap()
}

// ---- criteria ----

fn exact_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = BTreeMap::new();
    let mut bump = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0f64);
        *w = w.max(e);
    };
    for _ in 0..RANDOM_INSTANCES {
        let n = rng.random_range(3..=12usize);

        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        bump(
            "pearson",
            rel_err(&[pearson(&a, &b).unwrap()], &[oracle_pearson(&a, &b)]),
        );

        let grid = VoltageGrid::new(3.0, 4.2, n).unwrap();
        let dq: Vec<Option<f64>> = (0..n).map(|_| Some(rng.random_range(-0.5..0.5))).collect();
        let values: Vec<f64> = dq.iter().flatten().copied().collect();
        let curve = DeltaQCurve {
            grid,
            dq,
            x_ah: 190.0,
            y_ah: 10.0,
            direction: Direction::Discharge,
        };
        let s = curve_statistics(&curve).unwrap();
        let got = [s.minimum, s.mean, s.variance, s.skew, s.kurtosis];
        let want = oracle_moments(&values);
        for k in 0..5 {
            bump("curve_statistics", rel_err(&[got[k]], &[want[k]]));
        }

        let mut t = 0.0;
        let mut c = 5.0;
        let mut pts = vec![(t, c)];
        for _ in 1..n {
            t += rng.random_range(10.0..400.0);
            c -= rng.random_range(0.0..0.4);
            pts.push((t, c));
        }
        let series = DiagnosticSeries::from_pairs(&pts).unwrap();
        let fraction = rng.random_range(0.6..0.95);
        let life = compute_eol(&series, fraction).unwrap();
        let (want, censored) = oracle_eol(&pts, fraction);
        bump("compute_eol", rel_err(&[life.value], &[want]));
        if life.censored != censored {
            bump("compute_eol", f64::INFINITY);
        }

        let p = rng.random_range(1..=3usize);
        let n = n.max(p + 2);
        let data = random_dataset(&mut rng, n, p);
        let alpha = rng.random_range(0.0..10.0);
        let model = fit_ridge(&data, alpha).unwrap();
        let (intercept, weights) = oracle_ridge(&data.x, &data.y, alpha);
        bump("fit_ridge", rel_err(&model.weights, &weights));
        bump("fit_ridge", rel_err(&[model.intercept], &[intercept]));
    }
    let pass = worst.values().all(|&e| e <= ORACLE_RTOL);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        pass,
        format!("max relative error over {RANDOM_INSTANCES} instances: {detail}"),
    )
}

fn ridge_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let alphas = [0.0, 0.01, 0.1, 1.0, 8.0, 100.0, 1e4];
    let mut monotone = true;
    let mut worst_mean = 0.0f64;
    let mut worst_orth = 0.0f64;
    for _ in 0..RANDOM_INSTANCES {
        let p = rng.random_range(1..=3usize);
        let n = rng.random_range(p + 2..=12);
        let data = random_dataset(&mut rng, n, p);

        let norms: Vec<f64> = alphas
            .iter()
            .map(|&a| {
                fit_ridge(&data, a)
                    .unwrap()
                    .weights
                    .iter()
                    .map(|w| w * w)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        monotone &= norms.windows(2).all(|w| w[1] <= w[0]);

        let y_mean = data.y.iter().sum::<f64>() / n as f64;
        let big = fit_ridge(&data, 1e12).unwrap();
        for yh in predict(&big, &data.x).unwrap() {
            worst_mean = worst_mean.max((yh - y_mean).abs());
        }

        let ols = fit_ridge(&data, 0.0).unwrap();
        let fitted = predict(&ols, &data.x).unwrap();
        for j in 0..p {
            let g: f64 = (0..n)
                .map(|i| {
                    let z = (data.x[i][j] - ols.feature_means[j]) / ols.feature_scales[j];
                    z * (data.y[i] - fitted[i])
                })
                .sum();
            worst_orth = worst_orth.max(g.abs());
        }
    }
    let pass = monotone && worst_mean <= RIDGE_MEAN_TOL && worst_orth <= ORTHOGONALITY_TOL;
    outcome(
        pass,
        format!(
            "weight norm non-increasing in alpha: {monotone}; alpha=1e12 max |prediction - mean| {worst_mean:.1e}; alpha=0 max |Z^T r| {worst_orth:.1e}"
        ),
    )
}

fn delta_q_identities() -> Outcome {
    let grid = VoltageGrid::default();
    let params = SynthParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let curves: Vec<GriddedCurve> = [10.0, 100.0, 190.0]
        .iter()
        .map(|&a| {
            let s = synth_cycle_curve(a, Direction::Discharge, &params, &mut rng).unwrap();
            invert_to_grid(&s, &grid, Direction::Discharge).unwrap()
        })
        .collect();
    let mut self_diff = 0.0f64;
    let mut antisym = 0.0f64;
    let mut scale = 0.0f64;
    for (i, qx) in curves.iter().enumerate() {
        let d = delta_q_from_curves(qx, qx, 0.0, 0.0, None).unwrap();
        self_diff = self_diff.max(d.defined_values().iter().fold(0.0, |m, v| m.max(v.abs())));
        for qy in &curves[..i] {
            let xy = delta_q_from_curves(qx, qy, 0.0, 0.0, None).unwrap();
            let yx = delta_q_from_curves(qy, qx, 0.0, 0.0, None).unwrap();
            for (a, b) in xy.dq.iter().zip(&yx.dq) {
                if let (Some(a), Some(b)) = (a, b) {
                    antisym = antisym.max((a + b).abs());
                }
            }
            let var = curve_statistics(&xy).unwrap().variance;
            for c in [-3.0, 0.5, 7.0] {
                let scaled = DeltaQCurve {
                    dq: xy.dq.iter().map(|v| v.map(|v| c * v)).collect(),
                    ..xy.clone()
                };
                let v2 = curve_statistics(&scaled).unwrap().variance;
                scale = scale.max(rel_err(&[v2], &[c * c * var]));
            }
        }
    }
    let pass = self_diff <= IDENTITY_TOL && antisym <= IDENTITY_TOL && scale <= IDENTITY_TOL;
    outcome(
        pass,
        format!("self-difference {self_diff:.1e}, swap {antisym:.1e}, variance scaling {scale:.1e}"),
    )
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct Fleet {
    cells: Vec<CellRecord>,
    grid: VoltageGrid,
    log_var_rho: f64,
}

fn correlation_study(fleet: &Fleet) -> Outcome {
    let r = fleet.log_var_rho;
    outcome(
        r <= MIN_CORRELATION,
        format!("rho(log var dQ 190-10, log EOL) = {r:.4}, need <= {MIN_CORRELATION}"),
    )
}

fn heatmap_trend(fleet: &Fleet) -> Outcome {
    let cfg = HeatmapConfig::default();
    let h = heatmap_sweep(&fleet.cells, &fleet.grid, &cfg).unwrap();
    let sym = heatmap_sweep(
        &fleet.cells,
        &fleet.grid,
        &HeatmapConfig {
            symmetric: true,
            ..cfg.clone()
        },
    )
    .unwrap();
    let Some(target) = h.get(190.0, 10.0).map(f64::abs) else {
        return outcome(false, "entry (190, 10) is missing");
    };
    let mut rivals = Vec::new();
    for &y in &cfg.y_values {
        if let Some(r) = h.get(190.0, y) {
            rivals.push(((190.0, y), r.abs()));
        }
    }
    for &x in &cfg.x_values {
        if let Some(r) = h.get(x, 10.0) {
            rivals.push(((x, 10.0), r.abs()));
        }
    }
    let (best_at, best) = rivals.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let mut mirror = 0.0f64;
    let mut mirror_ok = true;
    for &x in &cfg.x_values {
        for &y in &cfg.y_values {
            if y >= x {
                continue;
            }
            match (h.get(x, y), sym.get(x, y), sym.get(y, x)) {
                (Some(a), Some(b), Some(c)) => mirror = mirror.max((a - b).abs()).max((a - c).abs()),
                (None, None, None) => {}
                _ => mirror_ok = false,
            }
        }
    }
    let pass = target >= best && mirror_ok && mirror <= SYMMETRY_TOL;
    outcome(
        pass,
        format!(
            "|rho(190, 10)| = {target:.4}; largest in its row/column {best:.4} at {best_at:?}; symmetric entries differ by {mirror:.1e}"
        ),
    )
}

fn window_drop_off(fleet: &Fleet) -> Outcome {
    let params = SynthParams::default();
    let knee_v = ocv(params.knee_soc, &params.ocv_knots).unwrap();
    let floors = WindowConfig::default().v_floor_values;
    let floor = floors.iter().copied().find(|&v| v >= knee_v).unwrap();
    let cfg = WindowConfig {
        v_floor_values: vec![floors[0], floor],
        statistics: vec![Statistic::Variance],
        ..Default::default()
    };
    let w = window_sweep(&fleet.cells, &fleet.grid, &cfg).unwrap();
    let rho = &w.rho_by_statistic[&Statistic::Variance];
    match (rho[0], rho[1]) {
        (Some(full), Some(cut)) => outcome(
            cut.abs() <= full.abs() - WINDOW_DROP,
            format!(
                "|rho| full window {:.4}, floor {floor:.2} V {:.4}, drop {:.4}, need >= {WINDOW_DROP}",
                full.abs(),
                cut.abs(),
                full.abs() - cut.abs()
            ),
        ),
        other => outcome(false, format!("missing correlation: {other:?}")),
    }
}

fn charge_gap(fleet: &Fleet) -> Outcome {
    let c = charge_discharge_compare(&fleet.cells, &fleet.grid, 190.0, 10.0).unwrap();
    match (
        c.rho(Direction::Charge, Statistic::Variance),
        c.rho(Direction::Discharge, Statistic::Variance),
    ) {
        (Some(ch), Some(dis)) => outcome(
            ch.abs() < dis.abs(),
            format!("|rho| charge {:.4}, discharge {:.4}", ch.abs(), dis.abs()),
        ),
        other => outcome(false, format!("missing correlation: {other:?}")),
    }
}

fn prediction_beats_baseline(fleet: &Fleet) -> Outcome {
    let rows: Vec<FeatureRow> = compute_features(&fleet.cells, &fleet.grid, 190.0, 10.0, Direction::Discharge)
        .into_iter()
        .map(|(_, r)| r.unwrap())
        .collect();
    let data = Dataset::from_feature_rows(&rows).unwrap();
    let cfg = SplitConfig::default();
    let model = split_evaluate(&data, &cfg).unwrap();
    let base = regress_to_mean_baseline(&data, &cfg).unwrap();
    let ratio = model.test_rmse / base.test_rmse;
    outcome(
        ratio <= RMSE_RATIO,
        format!(
            "test RMSE {:.1} Ah vs baseline {:.1} Ah over {} splits, ratio {ratio:.3}, need <= {RMSE_RATIO}",
            model.test_rmse, base.test_rmse, cfg.n_splits
        ),
    )
}

fn baseline_ordering(fleet: &Fleet) -> Outcome {
    let ret = retention_baseline(&fleet.cells).unwrap();
    outcome(
        ret.abs() < fleet.log_var_rho.abs(),
        format!(
            "|rho| retention at 200 Ah {:.4}, log var {:.4}",
            ret.abs(),
            fleet.log_var_rho.abs()
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dqlife"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn cli_pass(root: &Path) -> Result<(), String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let fleet = root.join("synth");
    run_cli(&["synth", "--out", &s(&fleet), "--seed", "0"])?;
    let cycling = s(&fleet.join("cycling.csv"));
    let meta = s(&fleet.join("metadata.csv"));
    let data = ["--input", cycling.as_str(), "--metadata", meta.as_str()];
    for cmd in ["features", "curve", "heatmap", "window", "compare"] {
        let out = s(&root.join(cmd));
        let mut args = vec![cmd, "--out", out.as_str()];
        args.extend(data);
        run_cli(&args)?;
    }
    let features = s(&root.join("features").join("features.csv"));
    for cmd in ["fit", "evaluate"] {
        let out = s(&root.join(cmd));
        run_cli(&[cmd, "--input", &features, "--out", &out])?;
    }
    Ok(())
}

fn cli_determinism() -> Outcome {
    let tmp = std::env::temp_dir().join(format!("dqlife-acceptance-{}", std::process::id()));
    let (a, b) = (tmp.join("a"), tmp.join("b"));
    let result = cli_pass(&a).and_then(|_| cli_pass(&b));
    let out = match result {
        Err(e) => outcome(false, format!("command failed: {e}")),
        Ok(()) => {
            let (fa, fb) = (snapshot(&a), snapshot(&b));
            let differing: Vec<&String> = fa
                .keys()
                .chain(fb.keys())
                .filter(|k| fa.get(*k) != fb.get(*k))
                .collect();
            outcome(
                differing.is_empty(),
                if differing.is_empty() {
                    format!("{} output files byte-identical across two runs", fa.len())
                } else {
                    format!("differing files: {differing:?}")
                },
            )
        }
    };
    let _ = fs::remove_dir_all(&tmp);
    out
}

fn main() -> ExitCode {
    let start = Instant::now();
    let synth = synth_fleet(&FleetConfig::default()).unwrap();
    let cells: Vec<CellRecord> = synth.into_iter().map(|c| c.record).collect();
    let grid = VoltageGrid::default();
    let (lv, le): (Vec<f64>, Vec<f64>) = compute_features(&cells, &grid, 190.0, 10.0, Direction::Discharge)
        .into_iter()
        .map(|(_, r)| {
            let r = r.unwrap();
            (r.log_var, r.log_eol)
        })
        .unzip();
    let fleet = Fleet {
        log_var_rho: pearson(&lv, &le).unwrap(),
        cells,
        grid,
    };

    let criteria: [(&str, Check); 10] = [
        ("exact numerics against oracles", Box::new(exact_numerics)),
        ("ridge properties", Box::new(ridge_properties)),
        ("dQ identities", Box::new(delta_q_identities)),
        ("synthetic correlation study", Box::new(|| correlation_study(&fleet))),
        ("heatmap trend", Box::new(|| heatmap_trend(&fleet))),
        ("window-sweep drop-off", Box::new(|| window_drop_off(&fleet))),
        ("charge vs discharge gap", Box::new(|| charge_gap(&fleet))),
        (
            "prediction beats baseline",
            Box::new(|| prediction_beats_baseline(&fleet)),
        ),
        ("baseline ordering", Box::new(|| baseline_ordering(&fleet))),
        ("CLI determinism", Box::new(cli_determinism)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {}: {} ({})",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            name,
            o.detail
        );
    }
    println!(
        "acceptance: {}/10 passed in {:.1} s",
        10 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
