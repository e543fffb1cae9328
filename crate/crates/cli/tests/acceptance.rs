//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p seed-cli --test acceptance`; extra
//! arguments after `--` select criteria by substring (`-- reaching gate`).
//! The learning criteria train 5 seeds at full budget and take hours. Gate
//! invariance audits every gated run made before it.

use std::cell::RefCell;
use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seed_cli::oracle_report;
use seed_core::feedback::ScriptOracle;
use seed_core::gradcheck::check_all;
use seed_core::replay::{ReplayBuffer, Transition};
use seed_core::script::StageTable;
use seed_core::sim::TaskKind;
use seed_core::skills::MAX_PARAM_DIM;
use seed_core::train::{
    run_training, FeedbackMode, JsonlSink, MetricRecord, Observers, RunMetrics, TrainConfig, TrainObserver,
};

const SEEDS: u64 = 5;

/// Tallies gated decisions and any that changed the world without a +1.
#[derive(Default)]
struct GateAudit {
    gated_runs: u64,
    non_positive: u64,
    broken: u64,
}

thread_local! {
    static AUDIT: RefCell<GateAudit> = RefCell::default();
}

struct GateWatch {
    gated: bool,
}

impl TrainObserver for GateWatch {
    fn record(&mut self, r: &MetricRecord) -> std::io::Result<()> {
        if let (true, MetricRecord::Step(s)) = (self.gated, r) {
            if s.feedback != Some(1) {
                AUDIT.with_borrow_mut(|a| {
                    a.non_positive += 1;
                    if s.executed || s.state_hash_before != s.state_hash_after {
                        a.broken += 1;
                    }
                });
            }
        }
        Ok(())
    }
}

fn train(cfg: &TrainConfig) -> RunMetrics {
    let t = Instant::now();
    let mut oracle = ScriptOracle::default();
    oracle.tau_ok = cfg.tau_ok;
    let provider: Option<&mut dyn seed_core::feedback::FeedbackProvider> =
        if cfg.feedback_mode.uses_feedback() { Some(&mut oracle) } else { None };
    let gated = cfg.gated();
    if gated {
        AUDIT.with_borrow_mut(|a| a.gated_runs += 1);
    }
    let m = run_training(cfg, provider, &mut GateWatch { gated }, None)
        .expect("training runs")
        .metrics;
    eprintln!(
        "  {:?} {:?} seed {}: final {:.2}, violations {:.4}, {:.0}s",
        cfg.task,
        cfg.feedback_mode,
        cfg.seed,
        m.final_success_rate(),
        m.safety_violation_ratio(),
        t.elapsed().as_secs_f64()
    );
    m
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Five-seed runs at a fixed budget, shared between criteria.
#[derive(Default)]
struct Runs(HashMap<(TaskKind, FeedbackMode, u64), Vec<RunMetrics>>);

impl Runs {
    fn get(&mut self, task: TaskKind, mode: FeedbackMode, steps: u64) -> &[RunMetrics] {
        self.0.entry((task, mode, steps)).or_insert_with(|| {
            (0..SEEDS)
                .map(|seed| {
                    train(&TrainConfig {
                        max_decision_steps: steps,
                        seed,
                        ..TrainConfig::for_task(task, mode)
                    })
                })
                .collect()
        })
    }
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn gradient_fidelity(_: &mut Runs) -> Verdict {
    let checks = check_all(20, 2024).expect("gradient checks run");
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.1e}", c.loss, c.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(checks.iter().all(|c| c.passed(1e-4)), format!("max relative error {detail} (tol 1e-4, 20 instances each)"))
}

fn oracle_consistency(_: &mut Runs) -> Verdict {
    let r = oracle_report(&TaskKind::ALL, 0..20, seed_core::feedback::DEFAULT_TAU_OK, &StageTable::for_task);
    let passed = r.checks.iter().filter(|c| c.passed).count();
    verdict(r.all_passed(), format!("{passed}/{} scripted solutions approved and successful", r.checks.len()))
}

fn learning_reaching(runs: &mut Runs) -> Verdict {
    let m = mean(runs.get(TaskKind::Reaching, FeedbackMode::OracleScript, 2_000).iter().map(|m| m.final_success_rate()));
    verdict(m >= 0.9, format!("mean eval success {m:.3} at 2000 steps over {SEEDS} seeds (need >= 0.9)"))
}

fn learning_stacking(runs: &mut Runs) -> Verdict {
    let seed = mean(runs.get(TaskKind::Stacking, FeedbackMode::OracleScript, 20_000).iter().map(|m| m.final_success_rate()));
    let env = mean(runs.get(TaskKind::Stacking, FeedbackMode::EnvReward, 20_000).iter().map(|m| m.final_success_rate()));
    verdict(
        seed >= 0.8 && env < seed,
        format!("SEED {seed:.3} (need >= 0.8), sparse-reward baseline {env:.3} (need < SEED), 20000 steps, {SEEDS} seeds"),
    )
}

fn gate_invariance(_: &mut Runs) -> Verdict {
    if AUDIT.with_borrow(|a| a.gated_runs) == 0 {
        train(&TrainConfig {
            max_decision_steps: 2_000,
            ..TrainConfig::for_task(TaskKind::Stacking, FeedbackMode::OracleScript)
        });
    }
    let (n, non, broken) = AUDIT.with_borrow(|a| (a.gated_runs, a.non_positive, a.broken));
    verdict(
        n > 0 && non > 0 && broken == 0,
        format!("{broken} of {non} non-positive decisions changed the world across {n} gated runs"),
    )
}

fn tagged(id: usize, feedback: i8) -> Transition {
    Transition {
        obs: vec![id as f64],
        skill_one_hot: vec![1.0],
        params_padded: [0.0; MAX_PARAM_DIM],
        feedback,
        affordance: 0.0,
        env_reward: 0.0,
        next_obs: vec![0.0],
        done: false,
        executed: feedback == 1,
    }
}

/// Expected positives per batch, and whether every positive (or non-positive) must appear exactly once.
fn contract(np: usize, nn: usize, batch: usize) -> (usize, Option<bool>) {
    let half_pos = (batch + 1) / 2;
    let half_neg = batch / 2;
    if np == 0 {
        (0, None)
    } else if nn == 0 {
        (batch, None)
    } else if np < half_pos && np < nn {
        (np, Some(true))
    } else if nn < half_neg && nn < np {
        (batch - nn, Some(false))
    } else {
        (half_pos, None)
    }
}

fn balanced_exactness(_: &mut Runs) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut batches, mut bad) = (0u64, 0u64);
    let mut regimes = [0u64; 3];
    while batches < 100_000 {
        let regime = (batches / 100 % 3) as usize;
        let capacity = rng.random_range(20..400);
        let pushes = rng.random_range(1..2 * capacity);
        let p_pos = match regime {
            0 => 0.0,
            1 => rng.random_range(0.005..0.1),
            _ => rng.random_range(0.3..0.95),
        };
        let mut buf = ReplayBuffer::new(capacity);
        let mut fb = Vec::new();
        for id in 0..pushes {
            let f = if rng.random_bool(p_pos) { 1 } else { rng.random_range(-1..=0) };
            buf.push(tagged(id, f)).unwrap();
            fb.push(f);
        }
        let live = &fb[pushes.saturating_sub(capacity)..];
        let np = live.iter().filter(|f| **f == 1).count();
        let nn = live.len() - np;
        for _ in 0..100 {
            let size = rng.random_range(1..300);
            let items = buf.sample_balanced(size, &mut rng).unwrap();
            let (want, once) = contract(np, nn, size);
            let got = items.iter().filter(|t| t.feedback == 1).count();
            let mut ok = items.len() == size && got == want;
            if let Some(pos) = once {
                let mut ids: Vec<usize> = items.iter().filter(|t| (t.feedback == 1) == pos).map(|t| t.obs[0] as usize).collect();
                ids.sort_unstable();
                let before = ids.len();
                ids.dedup();
                ok &= ids.len() == before && ids.len() == if pos { np } else { nn };
            }
            bad += !ok as u64;
            batches += 1;
            regimes[regime] += 1;
        }
    }
    verdict(
        bad == 0,
        format!(
            "{bad} of {batches} batches off contract (none/few/abundant positives: {}/{}/{})",
            regimes[0], regimes[1], regimes[2]
        ),
    )
}

fn safety_ordering(runs: &mut Runs) -> Verdict {
    let seed = mean(runs.get(TaskKind::Stacking, FeedbackMode::OracleScript, 20_000).iter().map(|m| m.safety_violation_ratio()));
    let aff = mean(runs.get(TaskKind::Stacking, FeedbackMode::EnvRewardAff, 20_000).iter().map(|m| m.safety_violation_ratio()));
    verdict(
        seed < aff,
        format!("violations per step: gated SEED {seed:.4} vs ungated affordance baseline {aff:.4}, 20000 steps, {SEEDS} seeds"),
    )
}

fn reproducibility(_: &mut Runs) -> Verdict {
    let run = |task, steps| {
        let cfg = TrainConfig {
            max_decision_steps: steps,
            seed: 17,
            ..TrainConfig::for_task(task, FeedbackMode::OracleScript)
        };
        let mut oracle = ScriptOracle::default();
        let mut sink = JsonlSink::new(Vec::new());
        let mut gate = GateWatch { gated: cfg.gated() };
        run_training(&cfg, Some(&mut oracle), &mut Observers(vec![&mut sink, &mut gate]), None).expect("training runs");
        sink.into_inner()
    };
    let pairs = [(TaskKind::Reaching, 1_000), (TaskKind::Stacking, 1_000), (TaskKind::CookingHotdog, 500)];
    let mut bytes = 0;
    let mut same = true;
    for (task, steps) in pairs {
        let a = run(task, steps);
        same &= a == run(task, steps);
        bytes += a.len();
    }
    verdict(same, format!("3 config/seed pairs rerun, {bytes} metric bytes compared"))
}

type Criterion = (&'static str, fn(&mut Runs) -> Verdict);

const CRITERIA: [Criterion; 8] = [
    ("gradient_fidelity", gradient_fidelity),
    ("oracle_consistency", oracle_consistency),
    ("learning_reaching", learning_reaching),
    ("learning_stacking", learning_stacking),
    ("balanced_exactness", balanced_exactness),
    ("safety_ordering", safety_ordering),
    ("reproducibility", reproducibility),
    ("gate_invariance", gate_invariance),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut runs = Runs::default();
    let mut failed = 0;
    for (name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let v = check(&mut runs);
        println!(
            "{} {name}: {} [{:.1}s]",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
        failed += !v.passed as i32;
    }
    std::process::exit(failed.min(1));
}
