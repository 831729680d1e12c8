//! Acceptance suite. Runs every criterion in order, prints one
//! `[PASS]`, `[FAIL]` or `[SKIP]` line each and exits non-zero on any failure.
//!
//! Set `NEXICA_PEMS_DIR` to a directory holding `speeds.csv`, `meta.csv` and
//! `drive_times.csv` to run the real-data criterion.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nexica::classify::roc_auc;
use nexica::correspond::{count_correspondences, CorrespondenceCounts, EventIndex};
use nexica::events::{extract_events, EventSeries};
use nexica::groundtruth::NegativeRatio;
use nexica::mle::{estimate, gradient, pair_probabilities, EstimateCase};
use nexica::pipeline::{count_table, estimate_table, grid_search, run_pipeline, RunConfig};
use nexica::synth::{generate_event_pair, generate_network, RandomEdges, SynthSpec};
use nexica_validation as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---- 1 & 2: estimator against the oracle ----

/// Deterministic mix of count tables: multinomial draws from the model,
/// uniform cells, and sparse tables with many zero cells.
fn random_tables(n: usize) -> Vec<[u64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7ab1e);
    let mut tables = Vec::with_capacity(n);
    while tables.len() < n {
        let t = match tables.len() % 3 {
            0 => {
                let window = 10f64.powf(rng.gen_range(1.0..5.0)).round() as u64;
                let s = rng.gen_range(0.005..0.5);
                let c = rng.gen_range(0.0..1.0);
                let f = pair_probabilities(s, c).unwrap();
                let mut left = window;
                let mut rest = 1.0;
                let mut cells = [0u64; 4];
                for i in 0..3 {
                    let p = (f[i] / rest).clamp(0.0, 1.0);
                    cells[i] = Binomial::new(left, p).unwrap().sample(&mut rng);
                    left -= cells[i];
                    rest -= f[i];
                }
                cells[3] = left;
                cells
            }
            1 => [(); 4].map(|_| rng.gen_range(0..=25_000)),
            _ => {
                let mut cells = [0u64; 4];
                cells[0] = rng.gen_range(0..=99_000);
                for c in &mut cells[1..] {
                    if rng.gen_bool(0.6) {
                        *c = rng.gen_range(1..=50);
                    }
                }
                cells
            }
        };
        if t.iter().sum::<u64>() > 0 {
            tables.push(t);
        }
    }
    tables
}

fn table(cells: [u64; 4]) -> CorrespondenceCounts {
    CorrespondenceCounts::from_cells(cells[0], cells[1], cells[2], cells[3])
}

fn mle_oracle() -> Verdict {
    let started = Instant::now();
    let tables = random_tables(1000);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut tally = [0usize; 4];
    for &cells in &tables {
        let e = estimate(&table(cells)).unwrap();
        tally[EstimateCase::ALL.iter().position(|c| *c == e.case).unwrap()] += 1;
        match oracle::maximise(cells) {
            None => {
                if e.case != EstimateCase::Undefined {
                    failures.push(format!("{cells:?}: {} but not identifiable", e.case));
                }
            }
            Some(m) => {
                let err = (e.p_s - m.s).abs().max((e.p_c - m.c).abs());
                worst = worst.max(err);
                let edge_ok = match e.case {
                    EstimateCase::BoundaryPc0 => m.c == 0.0,
                    EstimateCase::BoundaryPc1 => m.c == 1.0,
                    EstimateCase::Interior => true,
                    EstimateCase::Undefined => false,
                };
                if !(err <= 1e-6) || !edge_ok || m.log_likelihood < m.grid_best - 1e-12 * m.grid_best.abs() {
                    failures.push(format!("{cells:?}: {} ({}, {}) vs oracle ({}, {})", e.case, e.p_s, e.p_c, m.s, m.c));
                }
            }
        }
    }
    let elapsed = started.elapsed();
    let detail = format!(
        "{} tables (interior {}, pc0 {}, pc1 {}, undefined {}), worst coordinate error {worst:.2e}, {:.1} s{}",
        tables.len(),
        tally[0],
        tally[1],
        tally[2],
        tally[3],
        secs(elapsed),
        failures.first().map(|f| format!("; first mismatch {f}")).unwrap_or_default()
    );
    verdict(failures.is_empty() && elapsed < Duration::from_secs(60), detail)
}

fn gradients() -> Verdict {
    let mut checked = 0;
    let mut on_edge = 0;
    let mut failures = Vec::new();
    let (mut worst_rel, mut worst_zero) = (0.0f64, 0.0f64);
    for cells in random_tables(1000) {
        let counts = table(cells);
        let e = estimate(&counts).unwrap();
        if e.case != EstimateCase::Interior {
            continue;
        }
        // work with ell / window so the vanishing tolerance is scale free
        let w = counts.window as f64;
        let analytic = |s: f64, c: f64| {
            let (ds, dc) = gradient(&counts, s, c);
            (ds / w, dc / w)
        };
        let numeric = |s: f64, c: f64, h: f64| {
            let (ds, dc) = oracle::numeric_gradient(cells, s, c, h);
            (ds / w, dc / w)
        };
        let (s, c) = (e.p_s, e.p_c);
        let h = 1e-3 * s.min(1.0 - s).min(if cells[2] > 0 { 1.0 - c } else { 1.0 });

        // relative agreement away from the stationary point
        let probe_s = s + 0.05 * s.min(1.0 - s);
        let probe_c = if c < 0.5 { c + 0.05 * (1.0 - c) } else { c - 0.05 * c };
        let hp = 1e-3 * probe_s.min(1.0 - probe_s).min(1.0 - probe_c);
        let (a, n) = (analytic(probe_s, probe_c), numeric(probe_s, probe_c, hp));
        let rel = (a.0 - n.0).abs().max((a.1 - n.1).abs()) / a.0.abs().max(a.1.abs());
        worst_rel = worst_rel.max(rel);
        if !(rel <= 1e-5) {
            failures.push(format!("{cells:?}: relative gap {rel:.2e} at ({probe_s}, {probe_c})"));
        }

        let (a, n) = (analytic(s, c), numeric(s, c, h));
        if cells[2] == 0 {
            // p_c = 1 with no unmatched cause events: only d/dp_s can vanish,
            // d/dp_c must point out of the square
            on_edge += 1;
            let zero = a.0.abs().max(n.0.abs());
            worst_zero = worst_zero.max(zero);
            if !(zero <= 1e-8 && a.1 >= 0.0) {
                failures.push(format!("{cells:?}: edge gradient {a:?} / {n:?}"));
            }
        } else {
            checked += 1;
            let zero = a.0.abs().max(a.1.abs()).max(n.0.abs()).max(n.1.abs());
            worst_zero = worst_zero.max(zero);
            if !(zero <= 1e-8) {
                failures.push(format!("{cells:?}: gradient {a:?} / {n:?} at ({s}, {c})"));
            }
        }
    }
    let detail = format!(
        "{checked} interior stationary points plus {on_edge} at p_c = 1 (A10 = 0); worst relative gap {worst_rel:.2e}, \
         worst |grad| / window at the estimate {worst_zero:.2e}{}",
        failures.first().map(|f| format!("; first failure {f}")).unwrap_or_default()
    );
    verdict(failures.is_empty() && checked > 0, detail)
}

// ---- 3 ----

fn normalisation() -> Verdict {
    let mut worst = 0.0f64;
    for i in 0..=100 {
        for j in 0..=100 {
            let f = pair_probabilities(i as f64 / 100.0, j as f64 / 100.0).unwrap();
            worst = worst.max((f.iter().sum::<f64>() - 1.0).abs());
        }
    }
    verdict(worst <= 1e-12, format!("101 x 101 grid, worst |sum - 1| = {worst:.1e}"))
}

// ---- 4 ----

fn recovery() -> Verdict {
    let started = Instant::now();
    let (lag, n) = (3, 52_416);
    let mut ok = true;
    let mut cells = Vec::new();
    for p_s in [0.05, 0.1] {
        for p_c in [0.0, 0.4, 0.8] {
            let mut errors: Vec<f64> = (0..100)
                .map(|seed| {
                    let (a, b) = generate_event_pair(p_s, p_c, lag, n, seed).unwrap();
                    let counts =
                        count_correspondences(&EventIndex::from_series(&a), &EventIndex::from_series(&b), lag, 0).unwrap();
                    (estimate(&counts).unwrap().p_c - p_c).abs()
                })
                .collect();
            errors.sort_by(f64::total_cmp);
            // even count: the median is the mean of the middle two
            let median = 0.5 * (errors[49] + errors[50]);
            let max = errors[99];
            ok &= median <= 0.01 && max <= 0.03;
            cells.push(format!("({p_s}, {p_c}) median {median:.4} max {max:.4}"));
        }
    }
    let elapsed = started.elapsed();
    verdict(
        ok && elapsed < Duration::from_secs(300),
        format!("{}; {:.1} s", cells.join(", "), secs(elapsed)),
    )
}

// ---- 5 ----

fn correspondence_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let mut mismatch = None;
    for _ in 0..10_000 {
        let lag = rng.gen_range(1..=8);
        let tau = rng.gen_range(0..=2);
        let m = rng.gen_range(lag + tau + 1..=64);
        let density = rng.gen_range(0.0..1.0);
        let mut draw = || (0..m).map(|_| rng.gen_bool(density)).collect::<Vec<_>>();
        let (cause, effect) = (draw(), draw());
        let got = count_correspondences(&EventIndex::from_events(&cause), &EventIndex::from_events(&effect), lag, tau)
            .unwrap();
        let want = oracle::nested_loop_counts(&cause, &effect, lag, tau);
        if got.cells() != want || got.window != want.iter().sum::<u64>() {
            mismatch = Some(format!("M {m} lag {lag} tau {tau}: {:?} vs {want:?}", got.cells()));
            break;
        }
    }
    match mismatch {
        None => Verdict::Pass("10000 random inputs, M <= 64, lags 1..8, tau 0..2, all equal".into()),
        Some(m) => Verdict::Fail(m),
    }
}

// ---- 6 & 10 ----

fn synthetic_network(dir: &Path) {
    let mut spec = SynthSpec::new(20, 52_416, 0.05, Vec::new(), 0);
    spec.random_edges = Some(RandomEdges {
        count: 10,
        p_c_min: 0.3,
        p_c_max: 0.9,
    });
    generate_network(&spec).unwrap().write_dir(dir).unwrap();
}

fn synthetic_config(data: &Path, out: PathBuf) -> RunConfig {
    RunConfig {
        speeds: Some(data.join("speeds.csv")),
        meta: Some(data.join("meta.csv")),
        drive_times: Some(data.join("drive_times.csv")),
        truth: Some(data.join("truth.csv")),
        out_dir: out,
        ratio: NegativeRatio::PerPositive(5),
        folds: 5,
        seed: 0,
        ..RunConfig::default()
    }
}

fn end_to_end_auc() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synthetic_network(&data);
    let cfg = synthetic_config(&data, tmp.path().join("run"));
    let metrics = run_pipeline(&cfg).unwrap().metrics;
    let Some(ev) = metrics.evaluation else {
        return Verdict::Fail(format!("no evaluation: {:?}", metrics.evaluation_skipped));
    };
    let detail = format!(
        "{} positives, {} negatives, {} trees: forest AUC {:.4} +/- {:.4}, scalar p_c AUC {:.4} +/- {:.4}",
        ev.positives, ev.negatives, ev.n_trees, ev.forest_auc, ev.forest_auc_std, ev.scalar_pc_auc, ev.scalar_pc_auc_std
    );
    let detail = if ev.scalar_pc_auc >= ev.forest_auc {
        format!("{detail}; scalar threshold is not strictly lower")
    } else {
        detail
    };
    verdict(ev.forest_auc >= 0.95 && ev.scalar_pc_auc < ev.forest_auc, detail)
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synthetic_network(&data);
    let a = synthetic_config(&data, tmp.path().join("a"));
    let b = synthetic_config(&data, tmp.path().join("b"));
    run_pipeline(&a).unwrap();
    run_pipeline(&b).unwrap();
    let (x, y) = (
        fs::read(a.out_dir.join("metrics.json")).unwrap(),
        fs::read(b.out_dir.join("metrics.json")).unwrap(),
    );
    verdict(x == y, format!("two runs, metrics.json {} and {} bytes, identical: {}", x.len(), y.len(), x == y))
}

// ---- 7 ----

fn roc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x40c);
    let mut cases = 0;
    for _ in 0..5_000 {
        let n = rng.gen_range(2..=200);
        // a small score alphabet forces plenty of ties
        let levels = rng.gen_range(1..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let p = rng.gen_range(0.05..0.95);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        cases += 1;
        let auc = roc_auc(&scores, &labels).unwrap().auc;
        let (num, den) = oracle::mann_whitney(&scores, &labels);
        let want = num as f64 / den as f64;
        if auc != want {
            return Verdict::Fail(format!("n {n}: roc {auc} vs Mann-Whitney {num}/{den} = {want}"));
        }
    }
    Verdict::Pass(format!("{cases} random cases up to 200 samples with ties, all exactly equal"))
}

// ---- 8 ----

fn performance() -> Verdict {
    let (stations, slots, l_max) = (195, 52_416, 8);
    let spec = SynthSpec::new(stations, slots, 0.05, Vec::new(), 8);
    let speeds = generate_network(&spec).unwrap().speed_series().unwrap();

    let started = Instant::now();
    let events: Vec<EventSeries> = speeds.iter().map(|s| extract_events(s, 0.25).unwrap().0).collect();
    let t_events = started.elapsed();
    let mut table = count_table(&events, l_max, 0).unwrap();
    let t_counts = started.elapsed() - t_events;
    estimate_table(&mut table).unwrap();
    let total = started.elapsed();
    let t_mle = total - t_events - t_counts;

    let tuples = table.records.len();
    let per_tuple = t_counts / tuples.max(1) as u32;
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let detail = format!(
        "{tuples} tuples on {threads} thread(s): events {:.1} s, counts {:.1} s ({:.1} us per tuple), MLE {:.1} s, total {:.1} s",
        secs(t_events),
        secs(t_counts),
        per_tuple.as_secs_f64() * 1e6,
        secs(t_mle),
        secs(total)
    );
    verdict(
        tuples == 302_640 && total <= Duration::from_secs(300) && per_tuple < Duration::from_millis(1),
        detail,
    )
}

// ---- 9 ----

fn real_data_grid() -> Verdict {
    let Some(dir) = std::env::var_os("NEXICA_PEMS_DIR").map(PathBuf::from) else {
        return Verdict::Skip("set NEXICA_PEMS_DIR to a directory of real speed data to run".into());
    };
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        speeds: Some(dir.join("speeds.csv")),
        meta: Some(dir.join("meta.csv")),
        drive_times: Some(dir.join("drive_times.csv")),
        out_dir: tmp.path().join("grid"),
        ..RunConfig::default()
    };
    let rows = grid_search(&cfg, &[0.05, 0.25], &[0, 1], true).unwrap();
    let cell = |alpha: f64, tau: usize| rows.iter().find(|r| r.alpha == alpha && r.tau == tau).unwrap();
    let (Some(high), Some(low), Some(balanced)) =
        (cell(0.25, 1).full_auc, cell(0.05, 0).full_auc, cell(0.25, 0).balanced_auc)
    else {
        return Verdict::Fail("grid cells without an AUC (too few labelled tuples)".into());
    };
    verdict(
        high > low && (high - 0.8851).abs() <= 0.05 && (low - 0.8003).abs() <= 0.05 && balanced >= 0.99,
        format!("full AUC (0.25, 1) {high:.4}, full AUC (0.05, 0) {low:.4}, balanced AUC (0.25, 0) {balanced:.4}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Verdict); 10] = [
        (1, "estimator matches the likelihood oracle", mle_oracle),
        (2, "analytic gradients match finite differences", gradients),
        (3, "pair probabilities sum to one", normalisation),
        (4, "planted p_c is recovered", recovery),
        (5, "correspondence counts match nested loops", correspondence_oracle),
        (6, "end-to-end synthetic AUC", end_to_end_auc),
        (7, "ROC AUC equals Mann-Whitney U", roc_oracle),
        (8, "full-size sweep performance", performance),
        (9, "real-data grid trend", real_data_grid),
        (10, "identical runs give identical metrics", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::Fail(format!("panicked: {msg}"))
            });
        let took = secs(started.elapsed());
        let (tag, detail) = match result {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {id:>2} {name} ({took:.1} s): {detail}");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
