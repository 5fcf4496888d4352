//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Experiment settings live in `configs/acceptance/`. Heavy runs are
//! serialized behind a lock so the wall-clock budgets are measured without
//! interference from each other.
//!
//! Run with `cargo test -p tdlab --test acceptance -- --nocapture`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::Deserialize;
use tdlab::harness::{run_sweep, RunConfig, SweepAxis, SweepMetrics, SweepResult};
use tdlab::oracle::{policy_evaluation, DEFAULT_TOL};
use tdlab::selftest::{run_selftest, SelftestReport, DEFAULT_SEEDS};
use tdlab::tabular::{reference_mdp, reference_policy, train_tabular, TabularConfig, TabularRule};

static HEAVY: Mutex<()> = Mutex::new(());

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn out_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// Prints past the test harness's output capture.
fn verdict(n: u32, title: &str, pass: bool, detail: &str) -> bool {
    let line = format!("{} criterion {n:>2} ({title}): {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn acceptance_config(name: &str) -> RunConfig {
    let mut cfg = RunConfig::load(repo_root().join("configs/acceptance").join(name)).unwrap();
    cfg.output_path = out_dir().join(name.replace(".toml", ".csv")).to_string_lossy().into_owned();
    cfg
}

/// Runs the config's own `[sweep]` grid, timed.
fn sweep_from(name: &str) -> (SweepResult, Duration) {
    let cfg = acceptance_config(name);
    let spec = cfg.sweep.clone().expect("acceptance sweep configs carry a [sweep] table");
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let res = run_sweep(&cfg, &spec.axes, &spec.seeds).unwrap();
    (res, start.elapsed())
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn failed_runs(res: &SweepResult) -> usize {
    res.cells.iter().flat_map(|c| &c.runs).filter(|r| r.final_metrics.is_none()).count()
}

fn selftest() -> &'static SelftestReport {
    static R: OnceLock<SelftestReport> = OnceLock::new();
    R.get_or_init(|| run_selftest(DEFAULT_SEEDS))
}

fn check_detail(rep: &SelftestReport, name: &str) -> (bool, String) {
    let c = rep.get(name).unwrap_or_else(|| panic!("missing check {name}"));
    (c.passed, c.detail.clone())
}

#[test]
fn criterion_01_gradient_correctness() {
    let rep = selftest();
    let grads: Vec<_> = rep.checks.iter().filter(|c| c.name.starts_with("grad/")).collect();
    let ok = grads.len() == 7 && grads.iter().all(|c| c.passed) && rep.seconds < 10.0;
    let worst = grads.iter().map(|c| format!("{} [{}]", c.name.trim_start_matches("grad/"), c.detail)).collect::<Vec<_>>();
    let detail = format!("{}; selftest {:.2}s", worst.join(", "), rep.seconds);
    assert!(verdict(1, "gradient correctness", ok, &detail));
}

#[test]
fn criterion_02_stop_gradient_contract() {
    let (ok, d) = check_detail(selftest(), "stop_gradient");
    assert!(verdict(2, "stop-gradient contract", ok, &format!("{d} on {DEFAULT_SEEDS} seeds")));
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TabularExperiment {
    noise: f64,
    seeds: Vec<u64>,
    tabular: TabularConfig,
}

fn median(xs: &[f64]) -> f64 {
    tdlab::harness::median(xs)
}

#[test]
fn criterion_03_oracle_accuracy() {
    let text = std::fs::read_to_string(repo_root().join("configs/acceptance/c03_tabular.toml")).unwrap();
    let exp: TabularExperiment = toml::from_str(&text).unwrap();
    let start = Instant::now();
    let mdp = reference_mdp();
    let pi = reference_policy();
    let noisy = pi.with_exploration(exp.noise).unwrap();
    let oracle = policy_evaluation(&mdp, &pi, DEFAULT_TOL).unwrap();
    // E_π Q* equals V* of the same policy; computed explicitly as the reference
    let v_ref: Vec<f64> = (0..mdp.n_states())
        .map(|s| (0..mdp.n_actions()).map(|a| pi.prob(s, a) * oracle.q_star[s][a]).sum())
        .collect();
    let (mut dec_v, mut dec_q, mut vtd_v) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &exp.seeds {
        let cfg = TabularConfig { seed, ..exp.tabular.clone() };
        let dec = train_tabular(&mdp, &pi, &pi, TabularRule::Decomposed { use_beta: false }, &cfg).unwrap();
        let vtd = train_tabular(&mdp, &noisy, &pi, TabularRule::Vtd, &cfg).unwrap();
        dec_v.push(dec.v_error(&oracle.v_star));
        dec_q.push(dec.q_error(&oracle.q_star));
        vtd_v.push(vtd.v_error(&v_ref));
    }
    let elapsed = start.elapsed();
    let worst = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let ok = worst(&dec_v) < 0.05
        && worst(&dec_q) < 0.05
        && median(&vtd_v) >= median(&dec_v)
        && elapsed < Duration::from_secs(120);
    let detail = format!(
        "decomposed max |V-V*| {:.4}, max |Q-Q*| {:.4}; median |V-E_pi Q*| value TD {:.4} vs decomposed {:.4}; {:.1}s",
        worst(&dec_v),
        worst(&dec_q),
        median(&vtd_v),
        median(&dec_v),
        elapsed.as_secs_f64()
    );
    assert!(verdict(3, "oracle accuracy", ok, &detail));
}

#[test]
fn criterion_04_vtd_bound() {
    let (ok, d) = check_detail(selftest(), "bound/vtd");
    assert!(verdict(4, "value TD bound", ok, &d));
}

#[test]
fn criterion_05_misguidance_witness() {
    let (ok, d) = check_detail(selftest(), "witness/misguidance");
    assert!(verdict(5, "misguidance witness", ok, &d));
}

#[test]
fn criterion_06_beta_stationary_point() {
    let (ok, d) = check_detail(selftest(), "beta/stationary_point");
    assert!(verdict(6, "beta stationary point", ok, &d));
}

fn reward(m: &SweepMetrics) -> f64 {
    m.mean_reward
}

#[test]
fn criterion_07_faster_learning() {
    let (res, elapsed) = sweep_from("c07_faster_learning.toml");
    let mut ok = failed_runs(&res) == 0 && minutes(elapsed) < 15.0;
    let mut any_final_better = false;
    let mut parts = Vec::new();
    for b in ["a2c", "hac_lite"] {
        let cell = |mode| res.cell(&[(SweepAxis::Backbone, b), (SweepAxis::TdMode, mode)]).unwrap();
        let (dec, orig) = (cell("decomposed"), cell("original"));
        let (de, oe) = (dec.median_early(reward), orig.median_early(reward));
        let (df, of) = (dec.median(reward), orig.median(reward));
        ok &= de >= oe;
        any_final_better |= df > of;
        parts.push(format!("{b}: early {de:.2} vs {oe:.2}, final {df:.2} vs {of:.2}"));
    }
    ok &= any_final_better;
    let detail = format!("{} (decomposed vs original); {:.1} min", parts.join("; "), minutes(elapsed));
    assert!(verdict(7, "faster learning", ok, &detail));
}

fn sigma_sweep() -> &'static (SweepResult, Duration) {
    static R: OnceLock<(SweepResult, Duration)> = OnceLock::new();
    R.get_or_init(|| sweep_from("c08_sigma_sweep.toml"))
}

fn sigma_values() -> Vec<String> {
    let cfg = acceptance_config("c08_sigma_sweep.toml");
    cfg.sweep.unwrap().axes.into_iter().find(|a| a.axis == SweepAxis::Sigma).unwrap().values
}

#[test]
fn criterion_08_exploration_robustness() {
    let (res, elapsed) = sigma_sweep();
    let sigmas = sigma_values();
    let med = |s: &str, mode: &str| res.cell(&[(SweepAxis::Sigma, s), (SweepAxis::TdMode, mode)]).unwrap().median(reward);
    let mut ok = failed_runs(res) == 0 && minutes(*elapsed) < 45.0;
    let mut parts = Vec::new();
    for s in &sigmas {
        let (d, o) = (med(s, "decomposed"), med(s, "original"));
        ok &= d >= o;
        parts.push(format!("σ={s} {d:.2}/{o:.2}"));
    }
    let (lo, hi) = (sigmas.first().unwrap(), sigmas.last().unwrap());
    let retained = med(hi, "decomposed") / med(lo, "decomposed");
    ok &= retained >= 0.7;
    let detail = format!(
        "decomposed/original medians {}; retained {:.1}% at σ={hi}; {:.1} min",
        parts.join(", "),
        100.0 * retained,
        minutes(*elapsed)
    );
    assert!(verdict(8, "exploration robustness", ok, &detail));
}

/// Adjacent pairs that go the wrong way.
fn inversions(xs: &[f64], increasing: bool) -> usize {
    xs.windows(2).filter(|w| if increasing { w[1] < w[0] } else { w[1] > w[0] }).count()
}

#[test]
fn criterion_09_beta_trend() {
    let (res, _) = sigma_sweep();
    let sigmas = sigma_values();
    let cells: Vec<_> = sigmas
        .iter()
        .map(|s| res.cell(&[(SweepAxis::Sigma, s), (SweepAxis::TdMode, "decomposed")]).unwrap())
        .collect();
    let betas: Vec<f64> = cells.iter().map(|c| c.median(|m| m.mean_beta)).collect();
    let alphas: Vec<f64> = cells.iter().map(|c| c.median(|m| m.mean_alpha)).collect();
    let ok = inversions(&betas, true) <= 1 && inversions(&alphas, false) <= 1 && betas.iter().all(|b| b.is_finite());
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let detail = format!("σ {}: β {} ; α {}", sigmas.join(" "), fmt(&betas), fmt(&alphas));
    assert!(verdict(9, "beta trend", ok, &detail));
}

#[test]
fn criterion_10_beta_ablation() {
    let (res, elapsed) = sweep_from("c10_beta_ablation.toml");
    let mut wins = 0;
    let mut parts = Vec::new();
    for b in ["a2c", "dqn", "ddpg", "hac_lite"] {
        let med = |v| res.cell(&[(SweepAxis::Backbone, b), (SweepAxis::BetaAblation, v)]).unwrap().median(reward);
        let (on, off) = (med("on"), med("off"));
        wins += usize::from(on >= off);
        parts.push(format!("{b} {on:.2}/{off:.2}"));
    }
    let ok = wins >= 3 && failed_runs(&res) == 0;
    let detail = format!("with/without β: {}; {wins}/4 backbones; {:.1} min", parts.join(", "), minutes(elapsed));
    assert!(verdict(10, "beta ablation", ok, &detail));
}

#[test]
fn criterion_11_determinism() {
    let template = repo_root().join("configs/template.toml");
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let run = |tag: &str| {
        let dir = out_dir().join(format!("determinism_{tag}"));
        let status = Command::new(env!("CARGO_BIN_EXE_tdlab"))
            .arg("train")
            .arg(&template)
            .env("TDLAB_OUTPUT_DIR", &dir)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(dir.join("runs/train.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let ok = a == b && !a.is_empty();
    let detail = format!("{} bytes each, identical: {}; {:.1} min", a.len(), a == b, minutes(start.elapsed()));
    assert!(verdict(11, "determinism", ok, &detail));
}

/// Spearman rank correlation (average ranks for ties).
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

#[test]
fn spearman_reference_values() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
}

#[test]
fn criterion_12_learning_rate_study() {
    let (res, elapsed) = sweep_from("c12_lr_study.toml");
    let lr_q: Vec<f64> = res.cells.iter().map(|c| c.value(SweepAxis::LrQ).unwrap().parse().unwrap()).collect();
    let action: Vec<f64> = res.cells.iter().map(|c| c.median(|m| m.mean_action_td_loss)).collect();
    let state: Vec<f64> = res.cells.iter().map(|c| c.median(|m| m.mean_state_td_loss)).collect();
    let (ra, rs) = (spearman(&lr_q, &action), spearman(&lr_q, &state));
    let ok = ra < 0.0 && rs < 0.0 && failed_runs(&res) == 0;
    let detail = format!(
        "Spearman(lr_q, action TD) {ra:.3}, Spearman(lr_q, state TD) {rs:.3} over {} cells; {:.1} min",
        res.cells.len(),
        minutes(elapsed)
    );
    assert!(verdict(12, "learning-rate study", ok, &detail));
}
