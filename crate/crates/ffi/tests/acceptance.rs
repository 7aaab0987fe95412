//! Acceptance run: one pass/fail line per criterion.
//!
//! Criteria 5 to 8 train the stock ablation suites at the default
//! 2000-iteration configuration over three seeds and compare seed means.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;

use taxovis::ablate::{AblationReport, Runner, Suite};
use taxovis::config::RunConfig;
use taxovis::corpus;
use taxovis::synth::stock_config;
use taxovis::taxonomy::DatasetId;

#[path = "../../core/tests/evaluator.rs"]
mod evaluator;
#[path = "../../core/tests/gradients.rs"]
mod gradients;
#[path = "../../core/tests/hungarian.rs"]
mod hungarian;
#[path = "../../core/tests/oracles.rs"]
mod oracles;
#[path = "../../core/tests/pipeline.rs"]
mod pipeline;

const SEEDS: [u64; 3] = [0, 1, 2];
const RECALL_MIN: f64 = 0.9;
const DILUTION_MARGIN: f64 = 1.0;
const RESCUE_GAIN: f64 = 2.0;
const TAXO_LOSS_SLACK: f64 = 0.5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Runs named checks, catching panics; the first failure is reported.
fn run_checks(checks: Vec<(&'static str, fn())>, only: &[&str]) -> Outcome {
    let mut n = 0;
    for (name, f) in checks {
        if !only.is_empty() && !only.contains(&name) {
            continue;
        }
        n += 1;
        if let Err(e) = panic::catch_unwind(AssertUnwindSafe(f)) {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            return outcome(false, format!("{name} failed: {msg}"));
        }
    }
    outcome(true, format!("{n} checks"))
}

fn ap(report: &AblationReport, row: &str, d: &DatasetId) -> f64 {
    report.row(row).unwrap_or_else(|| panic!("no row {row}")).results[d].ap
}

fn fmt_aps(report: &AblationReport, row: &str, ds: &[DatasetId]) -> String {
    ds.iter()
        .map(|d| format!("{}={:.2}", d, ap(report, row, d)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn criterion_5(comp: &AblationReport, a: &DatasetId) -> Outcome {
    let row = comp.row("II +TCM&TIM").unwrap();
    let s = row.selection[a];
    let per_seed: Vec<String> = row
        .runs
        .iter()
        .map(|r| format!("{:.3}", r.selection[a].recall))
        .collect();
    outcome(
        s.recall >= RECALL_MIN,
        format!(
            "top-{} recall on {a} val {:.3} (seeds {}), need >= {RECALL_MIN}",
            s.n_t,
            s.recall,
            per_seed.join(", ")
        ),
    )
}

fn criterion_6(comp: &AblationReport, ds: &[DatasetId]) -> Vec<(&'static str, Outcome)> {
    let a = &ds[0];
    let single = ap(comp, "0 single-dataset baseline", a);
    let joint = ap(comp, "I baseline", a);
    let six_a = outcome(
        joint <= single + DILUTION_MARGIN,
        format!("{a} AP joint baseline {joint:.2} vs single-dataset {single:.2}, need <= +{DILUTION_MARGIN}"),
    );
    let gains: Vec<f64> = ds
        .iter()
        .map(|d| ap(comp, "II +TCM&TIM", d) - ap(comp, "I baseline", d))
        .collect();
    let six_b = outcome(
        gains.iter().all(|&g| g >= RESCUE_GAIN),
        format!(
            "TCM/TIM gain over joint baseline {} (baseline {}), need >= {RESCUE_GAIN} on every set",
            ds.iter()
                .zip(&gains)
                .map(|(d, g)| format!("{d}={g:+.2}"))
                .collect::<Vec<_>>()
                .join(" "),
            fmt_aps(comp, "I baseline", ds)
        ),
    );
    let deltas: Vec<f64> = ds
        .iter()
        .map(|d| ap(comp, "III +taxonomy loss", d) - ap(comp, "II +TCM&TIM", d))
        .collect();
    let improved = deltas.iter().filter(|&&x| x > 0.0).count();
    let six_c = outcome(
        deltas.iter().all(|&x| x >= -TAXO_LOSS_SLACK) && improved >= 2,
        format!(
            "taxonomy loss delta {}, need all >= -{TAXO_LOSS_SLACK} and >= 2 gains",
            ds.iter()
                .zip(&deltas)
                .map(|(d, x)| format!("{d}={x:+.2}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    );
    vec![("6a", six_a), ("6b", six_b), ("6c", six_c)]
}

fn criterion_7(nt: &AblationReport, a: &DatasetId) -> Outcome {
    let by_nt = |n: usize| {
        nt.rows
            .iter()
            .find(|r| r.n_t == n)
            .unwrap_or_else(|| panic!("no N_T={n} row"))
            .results[a]
            .ap
    };
    let k = nt.rows.iter().map(|r| r.n_t).max().unwrap();
    let (one, five, ten, all) = (by_nt(1), by_nt(5), by_nt(10), by_nt(k));
    let listing = nt
        .rows
        .iter()
        .map(|r| format!("{}:{:.2}", r.n_t, r.results[a].ap))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        five.min(ten) > one.max(all),
        format!("{a} AP by N_T {listing}; need min(5,10) > max(1,{k})"),
    )
}

fn criterion_8(agg: &AblationReport, ds: &[DatasetId]) -> Outcome {
    let mean = |row: &str| ds.iter().map(|d| ap(agg, row, d)).sum::<f64>() / ds.len() as f64;
    let (add, concat, cross) = (mean("add"), mean("concat"), mean("cross-attention"));
    outcome(
        cross >= add && cross >= concat,
        format!("mean AP add {add:.2}, concat {concat:.2}, cross-attention {cross:.2}"),
    )
}

fn main() -> ExitCode {
    let mut lines: Vec<(String, Outcome)> = Vec::new();
    let mut push = |id: &str, o: Outcome| {
        println!("criterion {id}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        lines.push((id.to_string(), o));
    };

    push("1", run_checks(oracles::checks(), &[]));
    push("2", run_checks(gradients::checks(), &[]));
    push("3", run_checks(hungarian::checks(), &[]));
    push("4", run_checks(evaluator::checks(), &[]));

    let corpus = corpus::generate(&stock_config(0)).expect("stock corpus");
    let base = RunConfig::default();
    let ds = base.train_datasets();
    let mut runner = Runner::new(&corpus);
    let mut suite = |s: Suite| {
        let started = std::time::Instant::now();
        let report = runner
            .suite(s, &base, &SEEDS, |name, log| {
                if log.iteration + 1 == base.optim.iterations {
                    eprintln!("  trained {name}");
                }
            })
            .expect("ablation suite");
        eprintln!("  suite {s} done in {:.0}s", started.elapsed().as_secs_f64());
        let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join(format!("{s}.json")),
            serde_json::to_string_pretty(&report).unwrap(),
        )
        .unwrap();
        report
    };
    let comp = suite(Suite::Components);
    push("5", criterion_5(&comp, &ds[0]));
    for (id, o) in criterion_6(&comp, &ds) {
        push(id, o);
    }
    let nt = suite(Suite::NtSize);
    push("7", criterion_7(&nt, &ds[0]));
    let agg = suite(Suite::Aggregation);
    push("8", criterion_8(&agg, &ds));

    push(
        "9",
        run_checks(
            pipeline::checks(),
            &[
                "sampler_ratios_over_110000_draws",
                "training_is_deterministic_and_checkpoints_round_trip",
            ],
        ),
    );
    push("10", run_checks(pipeline::checks(), &["ablated_model_reduces_to_the_baseline_bitwise"]));

    let failed: Vec<&str> = lines.iter().filter(|l| !l.1.pass).map(|l| l.0.as_str()).collect();
    println!(
        "acceptance: {} of {} passed{}",
        lines.len() - failed.len(),
        lines.len(),
        if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
