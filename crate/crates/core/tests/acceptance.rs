//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Runs full desk-scale training, so it is kept
//! out of the default test run: `cargo test --test acceptance`.

#[allow(dead_code)]
#[path = "support/gradcheck.rs"]
mod gradcheck;
#[path = "support/oracle.rs"]
mod oracle;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thoughtctl::analysis;
use thoughtctl::evaluation;
use thoughtctl::harness::{self, RunConfig, TranscriptSource};
use thoughtctl::model::ModelParams;
use thoughtctl::numerics::Tensor;
use thoughtctl::thought_bank::{self, ThoughtBank};
use thoughtctl::training::StepMetrics;

type Check = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Check) {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let (ok, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!(
            "{} {name}: {detail} [{secs:.1}s]",
            if ok { "PASS" } else { "FAIL" }
        );
        self.results.push((name.to_string(), ok));
    }
}

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).expect("work dir");
    dir
}

fn tail_entropy(steps: &[StepMetrics], n: usize) -> f64 {
    let tail = &steps[steps.len().saturating_sub(n)..];
    tail.iter().map(|m| m.entropy_mean).sum::<f64>() / tail.len() as f64
}

fn gradient_fidelity() -> Check {
    let (len, groups) = gradcheck::run(5);
    let worst = groups
        .iter()
        .max_by(|a, b| a.rel.total_cmp(&b.rel))
        .expect("groups");
    let silent: Vec<&str> = groups
        .iter()
        .filter(|g| g.norm == 0.0)
        .map(|g| g.group.as_str())
        .collect();
    ensure(
        len <= 16 && silent.is_empty() && worst.rel <= gradcheck::TOLERANCE,
        format!(
            "{} groups, worst {} rel err {:.2e}, seq len {len}, silent {silent:?}",
            groups.len(),
            worst.group,
            worst.rel
        ),
    )
}

fn orthogonal_init() -> Check {
    let bank = ThoughtBank::init_orthogonal(8, 64, 0.02, 7).map_err(|e| e.to_string())?;
    let v = &bank.vectors;
    let mut max_dot = 0.0f64;
    let mut max_norm_err = 0.0f64;
    for i in 0..8 {
        let r = v.row_slice(i);
        max_norm_err = max_norm_err.max((r.iter().map(|x| x * x).sum::<f64>().sqrt() - 0.02).abs());
        for j in i + 1..8 {
            max_dot = max_dot.max(
                r.iter()
                    .zip(v.row_slice(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .abs(),
            );
        }
    }
    let er = analysis::effective_rank(v).map_err(|e| e.to_string())?;
    ensure(
        max_dot <= 1e-10 && max_norm_err <= 1e-12 && (er - 8.0).abs() <= 1e-9,
        format!("max |ti·tj| {max_dot:.1e}, norm err {max_norm_err:.1e}, effective rank {er:.12}"),
    )
}

fn uniform_entropy(step0_reward: Option<f64>) -> Check {
    let mut bank = ThoughtBank::init_orthogonal(8, 64, 0.02, 3).map_err(|e| e.to_string())?;
    bank.query_proj.data_mut().iter_mut().for_each(|w| *w = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let h: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = thought_bank::select(&h, &bank, &[0.0; 64]).map_err(|e| e.to_string())?;
        worst = worst.max((s.entropy - 8f64.ln()).abs());
    }
    let r0 = step0_reward.ok_or("paired training run did not produce a step-0 log")?;
    ensure(
        worst <= 1e-9 && (r0 + 2.079).abs() <= 0.15,
        format!("max |H − ln 8| {worst:.1e} over 50 positions; step-0 mean reward {r0:.4}"),
    )
}

fn gate_off() -> Check {
    let cfg = RunConfig::default().effective_model();
    let mut params = ModelParams::init(&cfg, 21).map_err(|e| e.to_string())?;
    // A trained-looking gate so the forced-off path is not trivially closed.
    params.bank.gate_bias.data_mut()[0] = 2.0;
    let gap = harness::gate_off_gap(&params, &cfg, 100, 5).map_err(|e| e.to_string())?;
    ensure(
        gap <= 1e-12,
        format!("max logit gap {gap:.1e} over 100 random inputs"),
    )
}

struct Paired {
    with: Vec<StepMetrics>,
    without: Vec<StepMetrics>,
    ckpt: PathBuf,
    data: PathBuf,
}

fn paired_runs(dir: &Path) -> Result<Paired, String> {
    let base = RunConfig::default();
    let data = dir.join("data.jsonl");
    harness::cmd_gen_data(base.data.n, base.data.seed, &data).map_err(|e| e.to_string())?;
    let train = |lambda: f64, name: &str| {
        let mut cfg = base.clone();
        cfg.train.lambda = lambda;
        harness::cmd_train(&cfg, &data, &dir.join(name), None).map_err(|e| e.to_string())
    };
    let with = train(0.1, "lambda_0.1")?;
    let without = train(0.0, "lambda_0")?;
    Ok(Paired {
        with: with.log.steps,
        without: without.log.steps,
        ckpt: dir.join("lambda_0.1").join(harness::CHECKPOINT_FILE),
        data,
    })
}

fn entropy_pressure(p: &Paired) -> Check {
    let n_train =
        harness::train_split(&harness::read_dataset(&p.data).map_err(|e| e.to_string())?).len();
    let (a, b) = (tail_entropy(&p.with, 100), tail_entropy(&p.without, 100));
    ensure(
        p.with.len() == 1000 && n_train == 2000 && a <= 0.7 * b,
        format!(
            "{} steps on {n_train} problems; final-100 entropy λ=0.1 {a:.4} vs λ=0 {b:.4} (ratio {:.4}, need ≤ 0.7)",
            p.with.len(),
            a / b
        ),
    )
}

fn learnability(p: &Paired) -> Check {
    let ck = harness::load_checkpoint(&p.ckpt, None).map_err(|e| e.to_string())?;
    let mut cfg = ck.config.clone();
    cfg.eval.max_depth = Some(2);
    cfg.eval.limit = None;
    let dataset = harness::read_dataset(&p.data).map_err(|e| e.to_string())?;
    let ev = harness::evaluate_params(&cfg, &ck.state.params, &dataset, TranscriptSource::Model)
        .map_err(|e| e.to_string())?;
    let by_depth: Vec<String> = [1u8, 2]
        .iter()
        .map(|&d| {
            let rows: Vec<_> = ev.rows.iter().filter(|r| r.depth == d).collect();
            let acc = rows.iter().filter(|r| r.correct).count() as f64 / rows.len().max(1) as f64;
            format!("depth {d} {acc:.3} (n={})", rows.len())
        })
        .collect();
    ensure(
        ev.report.accuracy >= 0.90,
        format!(
            "held-out accuracy {:.3} over {} problems [{}], need ≥ 0.90; depth match {:.3}, path match {:.3}",
            ev.report.accuracy,
            ev.report.n_problems,
            by_depth.join(", "),
            ev.report.depth_match,
            ev.report.path_match
        ),
    )
}

fn controllability() -> Check {
    let s = evaluation::controllability_score(0.813, 0.027, 0.412).map_err(|e| e.to_string())?;
    ensure((s - 0.5756).abs() <= 1e-12, format!("score {s:.16}"))
}

fn oracle_eval(p: &Paired, dir: &Path) -> Check {
    let oracle = harness::oracle_transcript;
    let o = harness::cmd_eval_with(
        &p.ckpt,
        &p.data,
        &dir.join("oracle_eval"),
        TranscriptSource::Custom(&oracle),
    )
    .map_err(|e| e.to_string())?;
    let r = &o.report;
    ensure(
        r.accuracy == 1.0 && r.depth_match == 1.0 && r.path_match == 1.0 && r.length_match >= 0.9,
        format!(
            "{} problems: accuracy {}, depth {}, path {}, length {:.4}",
            r.n_problems, r.accuracy, r.depth_match, r.path_match, r.length_match
        ),
    )
}

fn mutual_information() -> Check {
    let controls: Vec<(u8, u8, u8)> = (0..400)
        .map(|i| [(1, 1, 0), (2, 3, 1), (4, 2, 1), (5, 5, 0)][i % 4])
        .collect();
    let ids: Vec<usize> = (0..400).map(|i| [3, 0, 7, 5][i % 4]).collect();
    let exact = analysis::mutual_information_bits(&controls, &ids).map_err(|e| e.to_string())?;
    let constant = analysis::mutual_information_bits(&controls, &vec![2usize; 400])
        .map_err(|e| e.to_string())?;
    ensure(
        (exact - 2.0).abs() <= 1e-12 && constant == 0.0,
        format!("deterministic 4-way mapping {exact:.15} bits; constant mapping {constant} bits"),
    )
}

fn pca() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let rows: Vec<Vec<f64>> = (0..64)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let p = analysis::pca_project(&Tensor::from_rows(&rows).unwrap(), 8)
            .map_err(|e| e.to_string())?;
        let ev = oracle::covariance_eigenvalues(&rows);
        let total: f64 = ev.iter().sum();
        for (e, f) in ev.iter().zip(&p.explained) {
            worst = worst.max((e / total - f).abs());
        }
    }
    let dir = [0.3, -1.2, 0.7, 2.0, 0.0, -0.4, 1.1, 0.9];
    let rank1: Vec<Vec<f64>> = (0..64)
        .map(|i| dir.iter().map(|x| x * (i as f64 - 20.0)).collect())
        .collect();
    let f1 = analysis::pca_project(&Tensor::from_rows(&rank1).unwrap(), 1)
        .map_err(|e| e.to_string())?
        .explained[0];
    ensure(
        worst <= 1e-10 && (f1 - 1.0).abs() <= 1e-12,
        format!("max gap to covariance oracle {worst:.1e} over 20 random 64×8; rank-1 first fraction {f1:.15}"),
    )
}

/// Desk model and data, shortened training per row so all nine rows fit in
/// a few minutes.
fn ablation(dir: &Path) -> Check {
    let mut cfg = RunConfig::default();
    cfg.train.total_steps = 200;
    cfg.eval.limit = Some(100);
    let table = harness::cmd_ablate(&cfg, &dir.join("ablation")).map_err(|e| e.to_string())?;
    print!("{}", table.markdown());
    if table.failed() > 0 || table.rows.len() != 9 {
        return Err(format!(
            "{} of {} rows failed",
            table.failed(),
            table.rows.len()
        ));
    }
    let m = |i: usize| table.rows[i].result.as_ref().expect("row ok");
    let (full_thought, no_thought, two) = (m(3), m(2), m(4));
    let ln8 = 8f64.ln();
    let header_ok = fs::read_to_string(dir.join("ablation/ablation.csv"))
        .map_err(|e| e.to_string())?
        .starts_with(&harness::ABLATION_COLUMNS.join(","));
    let gap = no_thought.gate_off_max_diff.unwrap_or(f64::INFINITY);
    let ft_train = (full_thought.train_entropy - ln8).abs();
    let ft_eval = (full_thought.ent_avg - ln8).abs();
    ensure(
        header_ok && ft_train <= 1e-12 && ft_eval <= 1e-12 && full_thought.ent_std <= 1e-12 && gap <= 1e-12 && two.ent_avg <= 2f64.ln() + 1e-12,
        format!(
            "9 rows; Full Thought |H − ln 8| train {ft_train:.1e} eval {ft_eval:.1e}; No Thought gate-off gap {gap:.1e}; 2 Vectors entropy {:.4}",
            two.ent_avg
        ),
    )
}

fn determinism(dir: &Path) -> Check {
    let mut cfg = RunConfig::default();
    cfg.train.total_steps = 40;
    cfg.train.warmup_steps = 20;
    cfg.checkpoint_every = 20;
    let data = dir.join("det_data.jsonl");
    harness::cmd_gen_data(400, 3, &data).map_err(|e| e.to_string())?;
    let run = |name: &str, resume: Option<&Path>| {
        harness::cmd_train(&cfg, &data, &dir.join(name), resume).map_err(|e| e.to_string())
    };
    run("det_a", None)?;
    run("det_b", None)?;
    run(
        "det_resumed",
        Some(&dir.join("det_a").join(harness::snapshot_name(20))),
    )?;
    let read = |p: PathBuf| fs::read(p).map_err(|e| e.to_string());
    let a = read(dir.join("det_a").join(harness::METRICS_FILE))?;
    let b = read(dir.join("det_b").join(harness::METRICS_FILE))?;
    let resumed =
        String::from_utf8(read(dir.join("det_resumed").join(harness::METRICS_FILE))?).unwrap();
    let text = String::from_utf8(a.clone()).unwrap();
    let tail: Vec<&str> = text.lines().skip(20).collect();
    let same_ckpt = read(dir.join("det_a").join(harness::CHECKPOINT_FILE))?
        == read(dir.join("det_resumed").join(harness::CHECKPOINT_FILE))?;
    ensure(
        a == b && resumed.lines().collect::<Vec<_>>() == tail && same_ckpt,
        format!(
            "repeat run logs identical: {}; resumed steps 20–39 identical: {}; final checkpoints identical: {same_ckpt}",
            a == b,
            resumed.lines().collect::<Vec<_>>() == tail
        ),
    )
}

fn main() -> ExitCode {
    let dir = work_dir();
    let mut suite = Suite {
        results: Vec::new(),
    };
    suite.run("1 gradient fidelity", gradient_fidelity);
    suite.run("2 orthogonal init", orthogonal_init);
    println!("training paired desk runs (λ = 0.1 and λ = 0, 1000 steps each)...");
    let t = Instant::now();
    let paired = catch_unwind(AssertUnwindSafe(|| paired_runs(&dir)))
        .unwrap_or_else(|_| Err("training panicked".into()));
    println!("paired runs took {:.1}s", t.elapsed().as_secs_f64());
    let step0 = paired
        .as_ref()
        .ok()
        .and_then(|p| p.with.first().map(|m| m.reward_mean));
    suite.run("3 uniform entropy and step-0 reward", || {
        uniform_entropy(step0)
    });
    suite.run("4 gate-off equivalence", gate_off);
    let needs = |f: &dyn Fn(&Paired) -> Check| match &paired {
        Ok(p) => f(p),
        Err(e) => Err(format!("paired runs failed: {e}")),
    };
    suite.run("5 entropy pressure", || needs(&entropy_pressure));
    suite.run("6 task learnability", || needs(&learnability));
    suite.run("7 controllability arithmetic", controllability);
    suite.run("8 oracle-transcript evaluation", || {
        needs(&|p| oracle_eval(p, &dir))
    });
    suite.run("9 mutual information", mutual_information);
    suite.run("10 pca correctness", pca);
    suite.run("11 ablation harness", || ablation(&dir));
    suite.run("12 determinism and resume", || determinism(&dir));
    let failed: Vec<&str> = suite
        .results
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| n.as_str())
        .collect();
    println!(
        "{} of {} criteria passed",
        suite.results.len() - failed.len(),
        suite.results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join("; "));
        ExitCode::FAILURE
    }
}
