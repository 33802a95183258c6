//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use pdgp::gp::*;
use pdgp::metrics::StepRecord;
use pdgp::network::SyntheticLoad;
use pdgp::runner::{run, simulate, Mode, RunOutcome, RunSpec, SimOptions, Summary};
use pdgp::scenario::{build_scenario, true_gradient, ReferenceConfig, LoadConfig, Scenario, ScenarioConfig};
use pdgp::solver::{model_based_step, pd_step, SolverState, StepInputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---- 1. kernel derivatives ------------------------------------------------------

fn se(x: f64, y: f64, l: f64) -> f64 {
    (-(x - y).powi(2) / (2.0 * l * l)).exp()
}

const W: [f64; 3] = [1.0, -2.0, 1.0];

fn fd_02(x: f64, y: f64, l: f64) -> f64 {
    let d = |h: f64| (0..3).map(|i| W[i] * se(x + (i as f64 - 1.0) * h, y, l)).sum::<f64>() / (h * h);
    let h = 1e-2 * l;
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn fd_22(x: f64, y: f64, l: f64) -> f64 {
    let d = |h: f64| {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += W[i] * W[j] * se(x + (i as f64 - 1.0) * h, y + (j as f64 - 1.0) * h, l);
            }
        }
        acc / h.powi(4)
    };
    let h = 2e-2 * l;
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn kernel_identities() -> Verdict {
    let mut worst: f64 = 0.0;
    for ell in [1.0, 10.0] {
        let p = KernelParams::new(1.0, ell, 0.0, 0.0).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let x = -2.0 * ell + 4.0 * ell * i as f64 / 19.0;
                let y = -2.0 * ell + 4.0 * ell * j as f64 / 19.0 + 0.013 * ell;
                // Relative to the magnitude of each derivative's variance scale.
                worst = worst.max((deriv_cov_02(x, y, &p) - fd_02(x, y, ell)).abs() * ell * ell);
                worst = worst.max((deriv_cov_22(x, y, &p) - fd_22(x, y, ell)).abs() * ell.powi(4) / 3.0);
            }
        }
    }
    verdict(worst < 1e-5, format!("max relative error {worst:.2e} (< 1e-5)"))
}

// ---- 2. posterior oracles -------------------------------------------------------

#[derive(Clone, Copy)]
enum Node {
    Value(f64),
    Curv(f64),
}

fn node_cov(a: Node, b: Node, sf: f64, l: f64) -> f64 {
    let (x, is_a_curv) = match a {
        Node::Value(x) => (x, false),
        Node::Curv(x) => (x, true),
    };
    let (y, is_b_curv) = match b {
        Node::Value(y) => (y, false),
        Node::Curv(y) => (y, true),
    };
    let r2 = (x - y).powi(2);
    let e = sf * sf * (-r2 / (2.0 * l * l)).exp();
    match (is_a_curv, is_b_curv) {
        (false, false) => e,
        (true, true) => e * (r2 * r2 / l.powi(8) - 6.0 * r2 / l.powi(6) + 3.0 / l.powi(4)),
        _ => e * (r2 / l.powi(4) - 1.0 / (l * l)),
    }
}

/// Dense conditioning: `(node, prior mean, value, noise variance)` observations.
fn condition(target: Node, obs: &[(Node, f64, f64, f64)], sf: f64, l: f64) -> (f64, f64) {
    let n = obs.len();
    let soo = DMatrix::from_fn(n, n, |i, j| node_cov(obs[i].0, obs[j].0, sf, l) + if i == j { obs[i].3 } else { 0.0 });
    let sto = DVector::from_fn(n, |i, _| node_cov(target, obs[i].0, sf, l));
    let resid = DVector::from_fn(n, |i, _| obs[i].2 - obs[i].1);
    let lu = soo.lu();
    let w = lu.solve(&resid).unwrap();
    let v = lu.solve(&sto).unwrap();
    (sto.dot(&w), node_cov(target, target, sf, l) - sto.dot(&v))
}

fn posterior_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    for _ in 0..50 {
        let (sf, l, sn, mu) = (rng.random_range(0.5..2.0), rng.random_range(1.0..2.5), rng.random_range(0.1..0.5), rng.random_range(-1.0..1.0));
        let params = KernelParams::new(sf, l, sn, mu).unwrap();
        let (p, q) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let mut model = GpModel::with_grid(params, ShapeBounds::new(0.2, 2.0).unwrap(), 0.0, 10.0, q).unwrap();
        for _ in 0..p {
            let x: f64 = rng.random_range(0.0..10.0);
            model.add_feedback(x, 0.3 * (x - 4.0).powi(2) + rng.random_range(-0.5..0.5));
        }
        model.u2_estimate = (0..q).map(|_| rng.random_range(0.2..2.0)).collect();
        let mut obs: Vec<_> = model.data.points.iter().zip(&model.data.values).map(|(x, z)| (Node::Value(*x), mu, *z, sn * sn)).collect();
        for &xs in &[0.0, 3.3, 7.1, 10.0] {
            let (m, v) = gp_posterior(&model, xs).unwrap();
            let (om, ov) = condition(Node::Value(xs), &obs, sf, l);
            worst = worst.max(rel(m, mu + om)).max(rel(v, ov.max(0.0)));
        }
        obs.extend(model.enforcement.iter().zip(&model.u2_estimate).map(|(s, u)| (Node::Curv(*s), 0.0, *u, 0.0)));
        for &xs in &[0.0, 2.5, 5.0, 8.8] {
            let (m, _) = constrained_posterior_mean(&model, xs).unwrap();
            let (om, _) = condition(Node::Value(xs), &obs, sf, l);
            worst = worst.max(rel(m, mu + om));
        }
    }
    verdict(worst < 1e-8, format!("max relative deviation {worst:.2e} over 50 datasets (< 1e-8)"))
}

// ---- 3. derivative error versus data ----------------------------------------------

fn derivative_error(p: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = KernelParams::new(1.0, 10.0, 1.5, 0.0).unwrap();
    let mut m = GpModel::with_grid(params, ShapeBounds::new(0.05, 0.5).unwrap(), 0.0, 10.0, 8).unwrap();
    let noise = Normal::new(0.0, 1.5).unwrap();
    for _ in 0..p {
        let x: f64 = rng.random::<f64>() * 10.0;
        m.add_feedback(x, 0.05 * (x - 5.0).powi(2) + noise.sample(&mut rng));
    }
    m.refresh_curvature(seed, &GibbsSettings::default()).unwrap();
    let shape = m.surrogate(SurrogateKind::ShapeConstrained).unwrap();
    let plain = m.surrogate(SurrogateKind::Plain).unwrap();
    let (mut es, mut ep) = (0.0, 0.0);
    for i in 0..=50 {
        let x = i as f64 * 0.2;
        let truth = 0.1 * (x - 5.0);
        es += (shape.gradient(x, 0.1, 0.0, 10.0).unwrap() - truth).abs();
        ep += (plain.gradient(x, 0.1, 0.0, 10.0).unwrap() - truth).abs();
    }
    (es / 51.0, ep / 51.0)
}

fn derivative_error_trend() -> Verdict {
    let avg = |p| {
        let (s, q) = (0..20).map(|seed| derivative_error(p, seed)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        (s / 20.0, q / 20.0)
    };
    let (s5, p5) = avg(5);
    let (s50, p50) = avg(50);
    let pass = s50 < s5 && p50 < p5 && s5 <= p5;
    verdict(pass, format!("shape-constrained {s5:.4} -> {s50:.4}, plain {p5:.4} -> {p50:.4} (p = 5 -> 50)"))
}

// ---- 4. measurement-based versus model-based update -------------------------------

fn update_equivalence() -> Verdict {
    let mut cfg = ScenarioConfig::default();
    cfg.constraint.meas_noise_std = 0.0;
    let sc = build_scenario(&cfg).unwrap();
    let top = &sc.topology;
    let grads = |s: &SolverState| -> Vec<Vec<f64>> {
        sc.users.iter().enumerate().map(|(m, us)| us.iter().enumerate().map(|(n, u)| true_gradient(u, s.x_user[m][n])).collect()).collect()
    };
    let mut a = SolverState::new(vec![0.0, 5.0, 16.0], vec![vec![-2.0, 6.0], vec![1.0, 4.0, 9.0], vec![3.0]], cfg.alpha);
    let mut b = a.clone();
    let mut worst: f64 = 0.0;
    for t in 0..1000 {
        let active: Vec<bool> = cfg.devices.iter().map(|d| t % d.update_every == 0).collect();
        let y = sc.plant.measure_output(t, &a.x_dev, 5).unwrap()[0];
        let (dc, c) = (sc.constraint.constraint_gradient(t, y).unwrap(), sc.constraint.constraint_value(t, y).unwrap());
        let ga = grads(&a);
        let inputs = StepInputs { t, a_matrix: sc.plant.a_at(t).unwrap(), grad_c: &[dc], c_val: c, user_grads: &ga, device_active: &active };
        a = pd_step(&a, top, &sc.sets, &inputs).unwrap();
        b = model_based_step(&b, top, &sc.sets, &sc.plant, &sc.constraint, t, &grads(&b), &active).unwrap();
        let xa = top.stack(&a.x_dev, &a.x_user).unwrap();
        let xb = top.stack(&b.x_dev, &b.x_user).unwrap();
        worst = worst.max((xa - xb).amax()).max((a.nu - b.nu).abs());
        worst = worst.max(a.lambda.iter().zip(&b.lambda).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
    }
    verdict(worst < 1e-12, format!("max |difference| {worst:.2e} over 1000 steps (< 1e-12)"))
}

// ---- 5. static regret rate --------------------------------------------------------

fn static_config(steps: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.horizon_s = steps as f64 * cfg.step_s;
    cfg.alpha = 1.0 / (steps as f64).sqrt();
    cfg.load = LoadConfig::Synthetic(SyntheticLoad { base_kw: 40.0, harmonics: vec![], noise_std_kw: 0.0 });
    cfg.reference = ReferenceConfig::Piecewise { levels_kw: vec![59.5] };
    cfg.constraint.meas_noise_std = 0.0;
    cfg
}

fn static_regret_rate(bounds: &mut Vec<(String, Summary)>) -> Verdict {
    let mut pts = Vec::new();
    for t in [100usize, 1000, 10_000] {
        let s = build_scenario(&static_config(t)).unwrap();
        let out = simulate(&s, SimOptions::new(Mode::Clairvoyant)).unwrap();
        pts.push(((t as f64).ln(), (out.summary.regret_global / t as f64).ln()));
        bounds.push((format!("static T={t}"), out.summary));
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    verdict(slope <= -0.35, format!("log-log slope of Reg_T/T = {slope:.3} (<= -0.35)"))
}

// ---- 6. bound inequalities ------------------------------------------------------

fn bound_inequalities(runs: &[(String, Summary)]) -> Verdict {
    let bad: Vec<&str> =
        runs.iter().filter(|(_, s)| !(s.regret_global <= s.regret_bound && s.acv <= s.acv_bound)).map(|(n, _)| n.as_str()).collect();
    let tightest = runs.iter().map(|(_, s)| s.regret_global / s.regret_bound).fold(f64::NEG_INFINITY, f64::max);
    let detail = if bad.is_empty() {
        format!("{} runs, largest Reg_T / bound = {tightest:.2e}", runs.len())
    } else {
        format!("violated in: {}", bad.join(", "))
    };
    verdict(bad.is_empty(), detail)
}

// ---- 7–9. default scenario --------------------------------------------------------

struct DefaultRuns {
    scenario: Scenario,
    gp: RunOutcome,
    clairvoyant: RunOutcome,
}

fn default_runs() -> DefaultRuns {
    let scenario = build_scenario(&ScenarioConfig::default()).unwrap();
    let opts = |mode| SimOptions { oracle_cadence: Some(12), ..SimOptions::new(mode) };
    let gp = simulate(&scenario, opts(Mode::Gp)).unwrap();
    let clairvoyant = simulate(&scenario, opts(Mode::Clairvoyant)).unwrap();
    DefaultRuns { scenario, gp, clairvoyant }
}

fn tracking(runs: &DefaultRuns) -> Verdict {
    let recs = &runs.gp.records;
    let warm = recs.len() / 20;
    let ok = recs[warm..].iter().filter(|r| r.c_val <= 0.0).count();
    let frac = ok as f64 / (recs.len() - warm) as f64;
    verdict(frac >= 0.8, format!("feasible on {:.1}% of steps after warm-up (>= 80%)", 100.0 * frac))
}

fn running(recs: &[StepRecord], f: impl Fn(&StepRecord) -> f64) -> Vec<f64> {
    recs.iter()
        .scan(0.0, |acc, r| {
            *acc += f(r);
            Some(*acc)
        })
        .collect()
}

fn learning_trends(runs: &DefaultRuns) -> Verdict {
    let costs = runs.scenario.costs();
    let reg = |o: &RunOutcome| running(&o.records, |r| pdgp::metrics::regret_increment(r, &costs).unwrap());
    let (rg, rc) = (reg(&runs.gp), reg(&runs.clairvoyant));
    let gap: Vec<f64> = rg.iter().zip(&rc).map(|(a, b)| a - b).collect();
    let n = gap.len();
    let (w, q) = (n / 10, n / 4);
    let first = (gap[w] - gap[0]) / w as f64;
    let last = (gap[n - 1] - gap[n - 1 - w]) / w as f64;
    let err = |r: &StepRecord| r.g_est.iter().flatten().zip(r.g_true.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let xi = running(&runs.gp.records, |r| err(r).sqrt());
    let big = running(&runs.gp.records, err);
    let slopes = |v: &[f64]| ((v[q] - v[0]) / q as f64, (v[n - 1] - v[n - 1 - q]) / q as f64);
    let (xi1, xi4) = slopes(&xi);
    let (b1, b4) = slopes(&big);
    let pass = rc[n - 1] <= rg[n - 1] && last < first && xi4 < xi1 && b4 < b1;
    verdict(
        pass,
        format!(
            "Reg_T clairvoyant {:.1} <= gp {:.1}; gap/step first 10% {first:.4}, last 10% {last:.4}; \
             xi slope {xi1:.3} -> {xi4:.3}; Xi slope {b1:.3} -> {b4:.3}",
            rc[n - 1],
            rg[n - 1]
        ),
    )
}

fn consensus(runs: &DefaultRuns) -> Verdict {
    let ivs = runs.scenario.intervals();
    let hour = (3600.0 / runs.scenario.config.step_s) as usize;
    let mut latest = 0;
    let mut missing = Vec::new();
    for (m, users) in runs.scenario.users.iter().enumerate() {
        for n in 0..users.len() {
            let hit = runs.gp.records.iter().position(|r| (r.x_dev[m] - r.x_user[m][n]).abs() / ivs[m].width() < 1e-2);
            match hit {
                Some(t) if t < hour => latest = latest.max(t),
                _ => missing.push(format!("({m},{n})")),
            }
        }
    }
    let at_hour = runs.gp.records.get(hour - 1).map_or(f64::NAN, |r| {
        let ivs = &ivs;
        (0..ivs.len()).flat_map(|m| r.x_user[m].iter().map(move |u| (r.x_dev[m] - u).abs() / ivs[m].width())).fold(0.0, f64::max)
    });
    if missing.is_empty() {
        verdict(
            true,
            format!(
                "every user below 1e-2 by step {latest} ({} s, < 3600 s); max disagreement at 1 h {at_hour:.4}",
                latest as f64 * runs.scenario.config.step_s
            ),
        )
    } else {
        verdict(false, format!("not within the first hour: {}", missing.join(" ")))
    }
}

// ---- 10. determinism --------------------------------------------------------------

fn determinism(bounds: &mut Vec<(String, Summary)>) -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    for mode in Mode::ALL {
        let files: Vec<Vec<u8>> = (0..2)
            .map(|k| {
                let dir = root.path().join(format!("{mode}_{k}"));
                let spec = RunSpec { config_path: None, mode, seed: None, output_dir: dir.clone(), steps_override: None, oracle_cadence: Some(12) };
                let out = run(&spec).unwrap();
                if k == 0 {
                    bounds.push((format!("default {mode}"), out.summary));
                }
                std::fs::read(dir.join("steps.csv")).unwrap()
            })
            .collect();
        if files[0] != files[1] {
            differing.push(mode.to_string());
        }
    }
    if differing.is_empty() {
        verdict(true, "byte-identical steps.csv for gp, gp_plain and clairvoyant")
    } else {
        verdict(false, format!("CSV differs for {}", differing.join(", ")))
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Verdict, Duration)> = Vec::new();
    let mut timed = |id, name, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let line = (id, name, v, start.elapsed());
        println!("{} [{}] {}: {} ({:.2?})", if line.2.pass { "PASS" } else { "FAIL" }, line.0, line.1, line.2.detail, line.3);
        results.push(line);
    };
    let mut bound_runs: Vec<(String, Summary)> = Vec::new();

    timed(1, "kernel-derivative identities", &mut kernel_identities);
    timed(2, "posterior oracle equivalence", &mut posterior_oracles);
    timed(3, "derivative error trend", &mut derivative_error_trend);
    timed(4, "update equivalence", &mut update_equivalence);
    timed(5, "static regret rate", &mut || static_regret_rate(&mut bound_runs));
    let start = Instant::now();
    let runs = default_runs();
    println!("      default scenario, gp and clairvoyant at oracle cadence 12 ({:.2?})", start.elapsed());
    bound_runs.push(("default gp (cadence 12)".into(), runs.gp.summary.clone()));
    bound_runs.push(("default clairvoyant (cadence 12)".into(), runs.clairvoyant.summary.clone()));
    timed(7, "tracking", &mut || tracking(&runs));
    timed(8, "clairvoyant versus learned trends", &mut || learning_trends(&runs));
    timed(9, "consensus within the first hour", &mut || consensus(&runs));
    timed(10, "determinism", &mut || determinism(&mut bound_runs));
    timed(6, "bound inequalities", &mut || bound_inequalities(&bound_runs));

    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
