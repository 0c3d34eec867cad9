//! Acceptance suite: one PASS/FAIL line per criterion, then a summary.
//! Runs sequentially on one thread so the timing criteria mean CPU time.

use std::time::Instant;

use eaglenet::config::{EnergyKind, GraphKind, LossKind, Pooling, RunConfig};
use eaglenet::error::Result;
use eaglenet::losses::{ce_loss_value, sigmoid_loss_value, SIGMOID_BIAS_INIT, SIGMOID_TAU_P_INIT};
use eaglenet::model::Model;
use eaglenet::retrieval::EvalReport;
use eaglenet::tensor::Tensor;
use eaglenet::train::train;
use eaglenet_reference::checks::{
    attention_invariants, fusion_oracle_deviation, graph_oracle_deviation, langevin_theory,
    langevin_variance, reuse_fraction,
};
use eaglenet_reference::desk::{self, DeskRun};
use eaglenet_reference::{grad_check_path, LossPath};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_SECS: f64 = 120.0;
const ALPHA_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-10;
const LANGEVIN_REL_TOL: f64 = 0.10;
const REUSE_RANGE: (f64, f64) = (0.94, 0.96);
const SIGMOID_UNIT_TOL: f64 = 1e-12;
const ZERO_LOGIT_TOL: f64 = 1e-6;
const TRAIN_R1_MIN: f64 = 90.0;
const HELDOUT_R1_MIN: f64 = 60.0;
const DESK_BUDGET_SECS: f64 = 15.0 * 60.0;
const DETERMINISM_TOL: f64 = 1e-6;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn line(o: &Outcome) {
    println!("{} {:<24} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let paths = [
        LossPath::Main(LossKind::Ce),
        LossPath::Main(LossKind::Sigmoid),
        LossPath::Eam(EnergyKind::Cossim, Pooling::Avg),
        LossPath::Eam(EnergyKind::Bilinear, Pooling::Avg),
        LossPath::Eam(EnergyKind::Mlp, Pooling::Avg),
        LossPath::Total(LossKind::Ce),
        LossPath::Total(LossKind::Sigmoid),
    ];
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for path in paths {
        let r = grad_check_path(path);
        println!("     {:<24} {r}", path.name());
        worst = worst.max(r.max_rel_err);
        if r.max_rel_err > GRAD_TOL {
            failed.push(path.name());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!("worst rel err {worst:.2e} (tol {GRAD_TOL:.0e}), {secs:.1}s (budget {GRAD_BUDGET_SECS}s)");
    if !failed.is_empty() {
        detail.push_str(&format!("; failing: {}", failed.join(", ")));
    }
    Outcome {
        name: "gradient correctness",
        passed: failed.is_empty() && secs < GRAD_BUDGET_SECS,
        detail,
    }
}

fn attention_aggregation() -> Result<Outcome> {
    let st = attention_invariants(1000, 2024)?;
    Ok(Outcome {
        name: "attention invariants",
        passed: st.holds(ALPHA_TOL),
        detail: format!(
            "{} graphs: max |Σα−1| {:.1e}, empty-row mass {}, min w {}, max |Σw−1| {:.1e}, S=0 exact {}/{}",
            st.graphs, st.alpha_row_err, st.empty_row_mass, st.w_min, st.w_sum_err, st.s0_exact, st.s0_graphs
        ),
    })
}

fn dual_implementation() -> Result<Outcome> {
    let rgat = graph_oracle_deviation(GraphKind::Rgat, 100, 11)?;
    let gat = graph_oracle_deviation(GraphKind::Gat, 100, 12)?;
    let fusion = fusion_oracle_deviation(100, 13)?;
    Ok(Outcome {
        name: "dense oracles",
        passed: rgat <= ORACLE_TOL && gat <= ORACLE_TOL && fusion <= ORACLE_TOL,
        detail: format!("100 instances each, max |Δ|: rgat {rgat:.1e}, gat {gat:.1e}, fusion {fusion:.1e} (tol {ORACLE_TOL:.0e})"),
    })
}

fn langevin_stationarity() -> Result<Outcome> {
    let sigma2 = 0.005;
    let slow = langevin_variance(0.01, sigma2, 5000, 10_000, 31)?;
    let slow_theory = langevin_theory(0.01, sigma2);
    let reset = langevin_variance(1.0, sigma2, 5000, 10_000, 32)?;
    let rel = |a: f64, b: f64| (a / b - 1.0).abs();
    Ok(Outcome {
        name: "langevin stationarity",
        passed: rel(slow, slow_theory) <= LANGEVIN_REL_TOL && rel(reset, sigma2) <= LANGEVIN_REL_TOL,
        detail: format!(
            "η=0.01: var {slow:.5} vs {slow_theory:.5} ({:+.1}%); η=1: var {reset:.5} vs {sigma2} ({:+.1}%)",
            100.0 * (slow / slow_theory - 1.0),
            100.0 * (reset / sigma2 - 1.0)
        ),
    })
}

fn buffer_reuse() -> Outcome {
    let p = RunConfig::default().eam.reuse_prob;
    let f = reuse_fraction(p, 10_000, 41);
    Outcome {
        name: "replay buffer reuse",
        passed: (REUSE_RANGE.0..=REUSE_RANGE.1).contains(&f),
        detail: format!("p={p}, reused {f:.4} of 10000 draws"),
    }
}

fn loss_unit_values() -> Result<Outcome> {
    let ce_b1 = ce_loss_value(&Tensor::matrix(1, 1, vec![0.37])?, 1.0 / 0.07)?;
    // One positive pair at similarity s with τ·s + b = 0.
    let model = Model::new(&RunConfig::default(), 4, 2)?;
    let tau_p = model.store.by_name("loss.tau_p").expect("tau_p").tensor.item();
    let bias = model.store.by_name("loss.bias").expect("bias").tensor.item();
    let s0 = -bias / tau_p.exp();
    let term = sigmoid_loss_value(&Tensor::matrix(1, 1, vec![s0])?, tau_p, bias)?;
    let paper_s0 = 12.93 / 4.77f64.exp();
    let inits = tau_p == 4.77 && bias == -12.93 && SIGMOID_TAU_P_INIT == 4.77 && SIGMOID_BIAS_INIT == -12.93;
    Ok(Outcome {
        name: "loss unit values",
        passed: ce_b1 == 0.0
            && (term - 2f64.ln()).abs() <= SIGMOID_UNIT_TOL
            && inits
            && (s0 - paper_s0).abs() <= ZERO_LOGIT_TOL,
        detail: format!(
            "ce(B=1) = {ce_b1}; zero-logit term − ln2 = {:.1e}; inits τ_p={tau_p}, b={bias}; s0 = {s0:.6} vs 12.93/e^4.77 = {paper_s0:.6}",
            term - 2f64.ln()
        ),
    })
}

fn rsum(r: &EvalReport) -> f64 {
    r.t2v.rsum + r.v2t.rsum
}

fn desk_learning(runs: &[DeskRun]) -> Outcome {
    let secs: f64 = runs.iter().map(|r| r.seconds).sum();
    let ok = runs
        .iter()
        .all(|r| r.train.t2v.r1 >= TRAIN_R1_MIN && r.heldout.t2v.r1 >= HELDOUT_R1_MIN);
    let per: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: train {:.1} / held-out {:.1}", r.seed, r.train.t2v.r1, r.heldout.t2v.r1))
        .collect();
    Outcome {
        name: "desk-scale learning",
        passed: ok && secs < DESK_BUDGET_SECS,
        detail: format!(
            "t2v R@1 (≥{TRAIN_R1_MIN} / ≥{HELDOUT_R1_MIN}) {}; {:.0}s for {} runs (budget {DESK_BUDGET_SECS}s)",
            per.join(", "),
            secs,
            runs.len()
        ),
    }
}

fn ablation_direction(full: &[DeskRun], no_frl: &[DeskRun], data: &desk::Data) -> Result<Outcome> {
    let mean = |runs: &[DeskRun]| runs.iter().map(|r| rsum(&r.heldout)).sum::<f64>() / runs.len() as f64;
    let (rs_full, rs_plain) = (mean(full), mean(no_frl));
    let mut gaps = Vec::new();
    for r in full {
        let (matched, mismatched) = desk::energy_gap(&r.model, &data.1)?.expect("full model has an energy");
        println!("     seed {}: matched energy {matched:.4}, mismatched {mismatched:.4}", r.seed);
        gaps.push((matched, mismatched));
    }
    let k = gaps.len() as f64;
    let matched = gaps.iter().map(|g| g.0).sum::<f64>() / k;
    let mismatched = gaps.iter().map(|g| g.1).sum::<f64>() / k;
    let margin = mismatched - matched;
    Ok(Outcome {
        name: "ablation direction",
        passed: rs_full >= rs_plain && margin > 0.0,
        detail: format!(
            "held-out Rsum full {rs_full:.1} vs no-FRL {rs_plain:.1}; energy matched {matched:.4} < mismatched {mismatched:.4} (margin {margin:.4})"
        ),
    })
}

fn determinism(data: &desk::Data) -> Result<Outcome> {
    let mut cfg = desk::config(7);
    cfg.train.max_steps = 20;
    let run = || -> Result<(EvalReport, String)> {
        let out = train(&cfg, &data.0, None, None)?;
        let report = eaglenet::train::evaluate_model(&out.model, &data.1, cfg.eval.sample_seed)?;
        Ok((report, out.last_checkpoint().store.hash()))
    };
    let (a, ha) = run()?;
    let (b, hb) = run()?;
    let fields = |r: &EvalReport| {
        [r.t2v, r.v2t]
            .iter()
            .flat_map(|m| [m.r1, m.r5, m.r10, m.mdr, m.mnr, m.rsum])
            .collect::<Vec<_>>()
    };
    let diff = fields(&a)
        .iter()
        .zip(fields(&b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(Outcome {
        name: "determinism",
        passed: diff <= DETERMINISM_TOL && ha == hb,
        detail: format!("max metric diff {diff:.1e}; parameter hashes {} ({}…)", if ha == hb { "equal" } else { "differ" }, &ha[..12]),
    })
}

fn main() {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    let record = |o: Outcome, outcomes: &mut Vec<Outcome>| {
        line(&o);
        outcomes.push(o);
    };
    let fail = |name: &'static str, e: eaglenet::error::Error| Outcome {
        name,
        passed: false,
        detail: format!("error: {e}"),
    };

    record(gradient_correctness(), &mut outcomes);
    record(attention_aggregation().unwrap_or_else(|e| fail("attention invariants", e)), &mut outcomes);
    record(dual_implementation().unwrap_or_else(|e| fail("dense oracles", e)), &mut outcomes);
    record(langevin_stationarity().unwrap_or_else(|e| fail("langevin stationarity", e)), &mut outcomes);
    record(buffer_reuse(), &mut outcomes);
    record(loss_unit_values().unwrap_or_else(|e| fail("loss unit values", e)), &mut outcomes);

    match desk::datasets() {
        Ok(data) => {
            let runs = |variant: &str| -> Result<Vec<DeskRun>> {
                desk::SEEDS
                    .iter()
                    .map(|&seed| {
                        let r = desk::run(variant, seed, &data)?;
                        println!(
                            "     {variant} seed {seed}: train t2v R@1 {:.1}, held-out t2v R@1 {:.1} v2t R@1 {:.1}, Rsum {:.1} ({:.0}s)",
                            r.train.t2v.r1,
                            r.heldout.t2v.r1,
                            r.heldout.v2t.r1,
                            rsum(&r.heldout),
                            r.seconds
                        );
                        Ok(r)
                    })
                    .collect()
            };
            match runs("full") {
                Ok(full) => {
                    record(desk_learning(&full), &mut outcomes);
                    let abl = runs("no-frl").and_then(|plain| ablation_direction(&full, &plain, &data));
                    record(abl.unwrap_or_else(|e| fail("ablation direction", e)), &mut outcomes);
                }
                Err(e) => {
                    record(fail("desk-scale learning", e), &mut outcomes);
                    record(
                        Outcome { name: "ablation direction", passed: false, detail: "skipped: full runs failed".into() },
                        &mut outcomes,
                    );
                }
            }
            record(determinism(&data).unwrap_or_else(|e| fail("determinism", e)), &mut outcomes);
        }
        Err(e) => {
            for name in ["desk-scale learning", "ablation direction", "determinism"] {
                record(fail(name, eaglenet::error::Error::InvalidDataset(e.to_string())), &mut outcomes);
            }
        }
    }

    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!(
        "\nacceptance: {passed}/{} criteria passed in {:.0}s",
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    for o in outcomes.iter().filter(|o| !o.passed) {
        println!("  failed: {}", o.name);
    }
    if passed != outcomes.len() {
        std::process::exit(1);
    }
}
