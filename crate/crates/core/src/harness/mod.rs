//! Experiment commands: data generation, training, evaluation, analysis
//! exports and the ablation sweep.

mod checkpoint;
mod config;

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{
    Ablation, DataConfig, EvalConfig, EvalSplit, PcaSource, RunConfig, K_VECTOR_CHOICES,
};

use crate::analysis::{
    self, ActivationMatrix, ActivationStats, AnalysisError, Correlation, RowLabel,
};
use crate::control_encoder::ControlSignal;
use crate::evaluation::{self, EvalError, EvalReport, ProblemRow, Transcript};
use crate::model::{self, Interventions, ModelConfig, ModelError, ModelParams};
use crate::numerics::Tensor;
use crate::taskgen::{self, Problem, TaskError, Vocab};
use crate::training::{self, StepMetrics, TrainError, TrainLog, TrainSetup, TrainState};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("{what} mismatch: expected {expected}, found {found}")]
    Mismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

impl HarnessError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn read_to_string(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Problem>, HarnessError> {
    let f = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(taskgen::read_jsonl(BufReader::new(f))?)
}

pub fn cmd_gen_data(n: usize, seed: u64, out: &Path) -> Result<Vec<Problem>, HarnessError> {
    if n == 0 {
        return Err(HarnessError::Usage("--n must be positive".into()));
    }
    let problems = taskgen::build_dataset(n, seed)?;
    write_file(out, taskgen::to_jsonl(&problems).as_bytes())?;
    Ok(problems)
}

pub fn train_split(problems: &[Problem]) -> Vec<Problem> {
    problems
        .iter()
        .filter(|p| taskgen::is_train(p.id))
        .cloned()
        .collect()
}

/// Evaluation subset in id order.
pub fn eval_problems(problems: &[Problem], e: &EvalConfig) -> Vec<Problem> {
    let mut out: Vec<Problem> = problems
        .iter()
        .filter(|p| match e.split {
            EvalSplit::Train => taskgen::is_train(p.id),
            EvalSplit::Test => !taskgen::is_train(p.id),
            EvalSplit::All => true,
        })
        .filter(|p| e.max_depth.is_none_or(|d| p.control.depth() <= d))
        .cloned()
        .collect();
    out.sort_by_key(|p| p.id);
    if let Some(n) = e.limit {
        out.truncate(n);
    }
    out
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: TrainLog,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

pub fn snapshot_name(step: u64) -> String {
    format!("checkpoint_step{step}.ckpt")
}

/// Trains on the even-id split of the dataset file.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, HarnessError> {
    let train = train_split(&read_dataset(data)?);
    train_run(cfg, &train, out, resume)
}

/// Runs to `cfg.train.total_steps`, from initialization or from `resume`.
/// Writes the config echo, per-step metrics (only the steps run here), the
/// final checkpoint, periodic snapshots and a reward histogram.
pub fn train_run(
    cfg: &RunConfig,
    problems: &[Problem],
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    if problems.is_empty() {
        return Err(HarnessError::Usage("training split is empty".into()));
    }
    let model_cfg = cfg.effective_model();
    let mut state = match resume {
        Some(p) => load_checkpoint(p, Some(&model_cfg))?.state,
        None => TrainState::new(ModelParams::init(&model_cfg, cfg.train.seed)?),
    };
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let vocab = Vocab::standard();
    let setup = TrainSetup {
        model: &model_cfg,
        train: &cfg.train,
        vocab: &vocab,
        interventions: cfg.interventions(),
    };
    let metrics_path = out.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path).map_err(|e| HarnessError::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let mut io_err = None;
    let mut log = TrainLog::default();
    let total = cfg.train.total_steps;
    let mut result: Result<(), HarnessError> = Ok(());
    while state.step() < total {
        let until = match cfg.checkpoint_every {
            0 => total,
            n => ((state.step() / n + 1) * n).min(total),
        };
        let chunk = training::train(problems, &mut state, &setup, until, |m| {
            if io_err.is_none() {
                io_err = writeln!(metrics, "{}", m.to_json()).err();
            }
        });
        match chunk {
            Ok(l) => {
                log.steps.extend(l.steps);
                log.micro_rewards.extend(l.micro_rewards);
            }
            Err(e) => {
                result = Err(e.into());
                break;
            }
        }
        if cfg.checkpoint_every > 0
            && state.step() % cfg.checkpoint_every == 0
            && state.step() < total
        {
            let ck = Checkpoint {
                config: cfg.clone(),
                state: state.clone(),
            };
            save_checkpoint(&ck, &out.join(snapshot_name(state.step())))?;
        }
    }
    if let Err(e) = metrics.flush() {
        io_err.get_or_insert(e);
    }
    if let Some(e) = io_err {
        return Err(HarnessError::io(&metrics_path, e));
    }
    result?;
    state.params.clear_grads();
    let ck = Checkpoint {
        config: cfg.clone(),
        state,
    };
    save_checkpoint(&ck, &out.join(CHECKPOINT_FILE))?;
    let window = (cfg.train.accum_steps * 50).max(1);
    let hist = analysis::reward_histogram_csv(&log.micro_rewards, model_cfg.k_thoughts, window, 20);
    write_file(&out.join("reward_histogram.csv"), hist.as_bytes())?;
    Ok(TrainOutcome {
        state: ck.state,
        log,
    })
}

/// Where evaluation transcripts come from.
#[derive(Clone, Copy)]
pub enum TranscriptSource<'a> {
    /// Greedy generation from the checkpointed model.
    Model,
    /// Caller-supplied transcripts, bypassing the model.
    Custom(&'a (dyn Fn(&Problem) -> Transcript + Sync)),
}

/// The generator's own target as if the model had produced it.
pub fn oracle_transcript(p: &Problem) -> Transcript {
    Transcript {
        text: p.target.clone(),
        mean_entropy: 0.0,
        selections: Vec::new(),
    }
}

fn check_compatible(
    cfg: &ModelConfig,
    vocab: &Vocab,
    problems: &[Problem],
) -> Result<(), HarnessError> {
    if cfg.vocab_size != vocab.len() {
        return Err(HarnessError::Mismatch {
            what: "vocabulary size".into(),
            expected: vocab.len().to_string(),
            found: cfg.vocab_size.to_string(),
        });
    }
    for p in problems {
        let (tokens, prompt_len) = p.sequence(vocab)?;
        if prompt_len >= cfg.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq,
            }
            .into());
        }
    }
    Ok(())
}

fn worker_count(requested: usize, work: usize) -> usize {
    let n = match requested {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    n.clamp(1, work.max(1))
}

/// Transcripts in input order regardless of how the work is split.
pub fn transcribe_parallel(
    params: &ModelParams,
    cfg: &ModelConfig,
    problems: &[Problem],
    iv: Interventions,
    threads: usize,
) -> Result<Vec<Transcript>, HarnessError> {
    let vocab = Vocab::standard();
    let workers = worker_count(threads, problems.len());
    if workers == 1 {
        return Ok(evaluation::transcribe_all(
            params, cfg, &vocab, problems, iv,
        )?);
    }
    let chunk = problems.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = problems
            .chunks(chunk)
            .map(|c| {
                let vocab = &vocab;
                s.spawn(move || evaluation::transcribe_all(params, cfg, vocab, c, iv))
            })
            .collect();
        let mut out = Vec::with_capacity(problems.len());
        for h in handles {
            out.extend(h.join().expect("transcription worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub problems: usize,
    pub positions: usize,
    pub pca_source: PcaSource,
    pub pca_explained: Option<Vec<f64>>,
    pub effective_rank_bank: f64,
    pub effective_rank_activations: Option<f64>,
    pub activation: Option<ActivationStats>,
    /// Control tuple against per-position argmax thought.
    pub mutual_information_bits: Option<f64>,
    pub correlation_method: Correlation,
    /// Per-problem mean entropy against correctness.
    pub entropy_correct_correlation: Option<f64>,
    /// Why any of the optional values above is missing.
    pub notes: Vec<String>,
}

pub struct AnalysisOutput {
    pub summary: AnalysisSummary,
    pub pca_csv: Option<String>,
    pub weights_csv: Option<String>,
}

fn mean_rows(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    let mut n = 0usize;
    for r in rows {
        acc.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// `problems`, `transcripts` and `rows` must be aligned and in id order.
pub fn analyze(
    params: &ModelParams,
    eval: &EvalConfig,
    source: PcaSource,
    problems: &[Problem],
    transcripts: &[Transcript],
    rows: &[ProblemRow],
) -> Result<AnalysisOutput, HarnessError> {
    let mut notes = Vec::new();
    let mut note = |what: &str, e: &dyn std::fmt::Display| notes.push(format!("{what}: {e}"));
    let effective_rank_bank = analysis::effective_rank(&params.bank.vectors)?;
    let with_sel: Vec<usize> = (0..problems.len())
        .filter(|&i| !transcripts[i].selections.is_empty())
        .collect();
    let labels: Vec<RowLabel> = with_sel
        .iter()
        .map(|&i| RowLabel {
            id: problems[i].id,
            control: problems[i].control,
            correct: rows[i].correct,
            mean_entropy: transcripts[i].mean_entropy,
        })
        .collect();
    let k = params.bank.vectors.rows();
    let d = params.bank.vectors.cols();
    let mean_weights: Vec<Vec<f64>> = with_sel
        .iter()
        .map(|&i| {
            mean_rows(
                transcripts[i].selections.iter().map(|s| s.weights.clone()),
                k,
            )
        })
        .collect();
    let positions: Vec<(ControlSignal, &crate::thought_bank::SelectionState)> = with_sel
        .iter()
        .flat_map(|&i| {
            transcripts[i]
                .selections
                .iter()
                .map(move |s| (problems[i].control, s))
        })
        .collect();

    let (mut pca_explained, mut pca_csv, mut effective_rank_activations, mut weights_csv) =
        (None, None, None, None);
    if !labels.is_empty() {
        let matrix = match source {
            PcaSource::SelectionWeights => ActivationMatrix::selection_weights(
                Tensor::from_rows(&mean_weights)?,
                labels.clone(),
            ),
            PcaSource::CombinedVectors => {
                let combined: Vec<Vec<f64>> = with_sel
                    .iter()
                    .map(|&i| {
                        mean_rows(
                            transcripts[i].selections.iter().map(|s| s.combined.clone()),
                            d,
                        )
                    })
                    .collect();
                ActivationMatrix::combined_vectors(Tensor::from_rows(&combined)?, labels.clone())
            }
        };
        match matrix.and_then(|m| {
            let kc = eval.pca_components.min(m.values.cols());
            let p = analysis::pca_project(&m.values, kc)?;
            Ok((m, p))
        }) {
            Ok((m, p)) => {
                pca_csv = Some(analysis::pca_csv(&p, &m.labels));
                pca_explained = Some(p.explained);
                match analysis::effective_rank(&m.values) {
                    Ok(r) => effective_rank_activations = Some(r),
                    Err(e) => note("effective rank of activations", &e),
                }
            }
            Err(e) => note("pca", &e),
        }
        let ids: Vec<u64> = labels.iter().map(|l| l.id).collect();
        weights_csv = Some(analysis::weights_csv(&ids, &mean_weights));
    } else {
        note("selection analyses", &"no selection states were recorded");
    }

    let activation = if positions.is_empty() {
        None
    } else {
        let w: Vec<Vec<f64>> = positions.iter().map(|(_, s)| s.weights.clone()).collect();
        match analysis::activation_stats(&w, analysis::ACTIVE_THRESHOLD) {
            Ok(s) => Some(s),
            Err(e) => {
                note("activation stats", &e);
                None
            }
        }
    };
    let mutual_information_bits = if positions.is_empty() {
        None
    } else {
        let c: Vec<usize> = positions.iter().map(|(c, _)| c.grid_index()).collect();
        let t: Vec<usize> = positions.iter().map(|(_, s)| s.argmax()).collect();
        Some(analysis::mutual_information_bits(&c, &t)?)
    };
    let ent: Vec<f64> = transcripts.iter().map(|t| t.mean_entropy).collect();
    let correct: Vec<f64> = rows
        .iter()
        .map(|r| f64::from(u8::from(r.correct)))
        .collect();
    let entropy_correct_correlation = match eval.correlation.compute(&ent, &correct) {
        Ok(r) => Some(r),
        Err(e) => {
            note("entropy/correctness correlation", &e);
            None
        }
    };
    Ok(AnalysisOutput {
        summary: AnalysisSummary {
            problems: problems.len(),
            positions: positions.len(),
            pca_source: source,
            pca_explained,
            effective_rank_bank,
            effective_rank_activations,
            activation,
            mutual_information_bits,
            correlation_method: eval.correlation,
            entropy_correct_correlation,
            notes,
        },
        pca_csv,
        weights_csv,
    })
}

pub struct Evaluated {
    pub problems: Vec<Problem>,
    pub transcripts: Vec<Transcript>,
    pub report: EvalReport,
    pub rows: Vec<ProblemRow>,
}

/// Scores `params` (built from `cfg`) on the configured evaluation subset.
pub fn evaluate_params(
    cfg: &RunConfig,
    params: &ModelParams,
    dataset: &[Problem],
    source: TranscriptSource<'_>,
) -> Result<Evaluated, HarnessError> {
    let problems = eval_problems(dataset, &cfg.eval);
    if problems.is_empty() {
        return Err(HarnessError::Usage("evaluation set is empty".into()));
    }
    let model_cfg = cfg.effective_model();
    check_compatible(&model_cfg, &Vocab::standard(), &problems)?;
    let transcripts = match source {
        TranscriptSource::Model => transcribe_parallel(
            params,
            &model_cfg,
            &problems,
            cfg.interventions(),
            cfg.eval.threads,
        )?,
        TranscriptSource::Custom(f) => problems.iter().map(f).collect(),
    };
    let (report, rows) = evaluation::evaluate_transcripts(&problems, &transcripts)?;
    Ok(Evaluated {
        problems,
        transcripts,
        report,
        rows,
    })
}

fn write_analysis(out: &Path, stem: &str, a: &AnalysisOutput) -> Result<(), HarnessError> {
    if let Some(csv) = &a.pca_csv {
        write_file(&out.join(format!("{stem}.csv")), csv.as_bytes())?;
    }
    Ok(())
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub rows: Vec<ProblemRow>,
    pub analysis: AnalysisSummary,
}

pub fn cmd_eval(ckpt: &Path, data: &Path, out: &Path) -> Result<EvalOutcome, HarnessError> {
    cmd_eval_with(ckpt, data, out, TranscriptSource::Model)
}

/// Writes `report.json`, `problems.csv`, `analysis.json`, `pca.csv` and `weights.csv`.
pub fn cmd_eval_with(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    source: TranscriptSource<'_>,
) -> Result<EvalOutcome, HarnessError> {
    let ck = load_checkpoint(ckpt, None)?;
    let dataset = read_dataset(data)?;
    let ev = evaluate_params(&ck.config, &ck.state.params, &dataset, source)?;
    let a = analyze(
        &ck.state.params,
        &ck.config.eval,
        ck.config.eval.pca_source,
        &ev.problems,
        &ev.transcripts,
        &ev.rows,
    )?;
    write_json(&out.join("report.json"), &ev.report)?;
    write_file(
        &out.join("problems.csv"),
        evaluation::rows_csv(&ev.rows).as_bytes(),
    )?;
    write_json(&out.join("analysis.json"), &a.summary)?;
    write_analysis(out, "pca", &a)?;
    if let Some(w) = &a.weights_csv {
        write_file(&out.join("weights.csv"), w.as_bytes())?;
    }
    Ok(EvalOutcome {
        report: ev.report,
        rows: ev.rows,
        analysis: a.summary,
    })
}

/// Both PCA variants plus the weight table: `analysis.json` holds
/// `{selection_weights, combined_vectors}` summaries.
pub fn cmd_analyze(
    ckpt: &Path,
    data: &Path,
    out: &Path,
) -> Result<[AnalysisSummary; 2], HarnessError> {
    let ck = load_checkpoint(ckpt, None)?;
    let dataset = read_dataset(data)?;
    let ev = evaluate_params(
        &ck.config,
        &ck.state.params,
        &dataset,
        TranscriptSource::Model,
    )?;
    let run = |source| {
        analyze(
            &ck.state.params,
            &ck.config.eval,
            source,
            &ev.problems,
            &ev.transcripts,
            &ev.rows,
        )
    };
    let sel = run(PcaSource::SelectionWeights)?;
    let comb = run(PcaSource::CombinedVectors)?;
    write_analysis(out, "pca_selection_weights", &sel)?;
    write_analysis(out, "pca_combined_vectors", &comb)?;
    if let Some(w) = &sel.weights_csv {
        write_file(&out.join("weights.csv"), w.as_bytes())?;
    }
    #[derive(Serialize)]
    struct Both<'a> {
        selection_weights: &'a AnalysisSummary,
        combined_vectors: &'a AnalysisSummary,
    }
    write_json(
        &out.join("analysis.json"),
        &Both {
            selection_weights: &sel.summary,
            combined_vectors: &comb.summary,
        },
    )?;
    Ok([sel.summary, comb.summary])
}

/// Early, middle and late injection points at about 24%, 50% and 83% of depth.
pub fn layer_points(n_layers: usize) -> [usize; 3] {
    let at = |num: usize| ((n_layers * num) as f64 / 42.0).round() as usize;
    let last = n_layers.saturating_sub(1);
    [at(10).min(last), (n_layers / 2).min(last), at(35).min(last)]
}

/// The fixed row set, in table order.
pub fn ablation_configs(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut full = base.clone();
    full.ablation = Ablation::default();
    let with = |f: &dyn Fn(&mut Ablation)| {
        let mut c = full.clone();
        f(&mut c.ablation);
        c
    };
    let [early, mid, late] = layer_points(base.model.n_layers);
    vec![
        ("Full".into(), full.clone()),
        ("No Control".into(), with(&|a| a.no_control = true)),
        ("No Thought".into(), with(&|a| a.no_thought = true)),
        ("Full Thought".into(), with(&|a| a.full_thought = true)),
        ("2 Vectors".into(), with(&|a| a.k_vectors = Some(2))),
        ("4 Vectors".into(), with(&|a| a.k_vectors = Some(4))),
        (
            format!("Layer {early} (early)"),
            with(&|a| a.injection_layer = Some(early)),
        ),
        (
            format!("Layer {mid} (mid)"),
            with(&|a| a.injection_layer = Some(mid)),
        ),
        (
            format!("Layer {late} (late)"),
            with(&|a| a.injection_layer = Some(late)),
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub acc: f64,
    pub ctrl: f64,
    pub depth: f64,
    pub length: f64,
    pub ent_avg: f64,
    pub ent_std: f64,
    pub k: usize,
    pub injection_layer: usize,
    /// Mean training-log entropy over the final (up to) 100 steps.
    pub train_entropy: f64,
    /// Largest logit gap between forced-zero gates and no injection at all,
    /// for the row that forces gates off.
    pub gate_off_max_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub result: Result<RowMetrics, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_COLUMNS: [&str; 7] = [
    "config", "acc", "ctrl", "depth", "length", "ent_avg", "ent_std",
];

impl AblationTable {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.result.is_err()).count()
    }

    pub fn csv(&self) -> String {
        let mut s = ABLATION_COLUMNS.join(",");
        s.push_str(",status\n");
        for r in &self.rows {
            match &r.result {
                Ok(m) => s.push_str(&format!(
                    "{},{},{},{},{},{},{},ok\n",
                    r.name, m.acc, m.ctrl, m.depth, m.length, m.ent_avg, m.ent_std
                )),
                Err(e) => s.push_str(&format!(
                    "{},,,,,,,failed: {}\n",
                    r.name,
                    e.replace([',', '\n'], ";")
                )),
            }
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = format!(
            "| {} |\n|{}\n",
            ABLATION_COLUMNS.join(" | "),
            "---|".repeat(ABLATION_COLUMNS.len())
        );
        for r in &self.rows {
            match &r.result {
                Ok(m) => s.push_str(&format!(
                    "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.4} | {:.4} |\n",
                    r.name, m.acc, m.ctrl, m.depth, m.length, m.ent_avg, m.ent_std
                )),
                Err(e) => s.push_str(&format!(
                    "| {} | FAILED: {} | | | | | |\n",
                    r.name,
                    e.replace(['|', '\n'], " ")
                )),
            }
        }
        s
    }
}

/// Max |logits(gates forced to 0) − logits(no injection)| over random inputs.
pub fn gate_off_gap(
    params: &ModelParams,
    cfg: &ModelConfig,
    inputs: usize,
    seed: u64,
) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let gate_off = Interventions {
        force_gate_zero: true,
        ..Default::default()
    };
    let plain = Interventions {
        disable_injection: true,
        ..Default::default()
    };
    for _ in 0..inputs {
        let len = rng.random_range(1..=cfg.max_seq.min(32));
        let tokens: Vec<usize> = (0..len)
            .map(|_| rng.random_range(0..cfg.vocab_size))
            .collect();
        let c = ControlSignal::grid()[rng.random_range(0..ControlSignal::grid().len())];
        let a = model::forward(params, cfg, &tokens, &c, gate_off)?;
        let b = model::forward(params, cfg, &tokens, &c, plain)?;
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

fn run_ablation_row(
    cfg: &RunConfig,
    dataset: &[Problem],
    train: &[Problem],
    dir: &Path,
) -> Result<RowMetrics, HarnessError> {
    let outcome = train_run(cfg, train, dir, None)?;
    let ev = evaluate_params(cfg, &outcome.state.params, dataset, TranscriptSource::Model)?;
    write_json(&dir.join("report.json"), &ev.report)?;
    let model_cfg = cfg.effective_model();
    let gate_off_max_diff = if cfg.ablation.no_thought {
        Some(gate_off_gap(
            &outcome.state.params,
            &model_cfg,
            100,
            cfg.train.seed ^ 0x9a7e,
        )?)
    } else {
        None
    };
    let tail: Vec<&StepMetrics> = outcome.log.steps.iter().rev().take(100).collect();
    let train_entropy = tail.iter().map(|m| m.entropy_mean).sum::<f64>() / tail.len().max(1) as f64;
    let r = ev.report;
    Ok(RowMetrics {
        acc: r.accuracy,
        ctrl: r.controllability,
        depth: r.depth_match,
        length: r.length_match,
        ent_avg: r.entropy_mean,
        ent_std: r.entropy_std,
        k: model_cfg.k_thoughts,
        injection_layer: model_cfg.injection_layer,
        train_entropy,
        gate_off_max_diff,
    })
}

fn slug(name: &str) -> String {
    let s: String = name
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    s.split('_')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

/// Trains and evaluates every row with the base seed and data. A failing row
/// is recorded in the table and the sweep continues; callers treat
/// `failed() > 0` as an overall failure. Writes `ablation.csv`,
/// `ablation.md`, `ablation.json` and one directory per row.
pub fn cmd_ablate(base: &RunConfig, out: &Path) -> Result<AblationTable, HarnessError> {
    base.validate()?;
    let dataset = taskgen::build_dataset_with(base.data.n, base.data.seed, &base.data.gen())?;
    let train = train_split(&dataset);
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        let dir = out.join("rows").join(slug(&name));
        let result = cfg
            .validate()
            .and_then(|_| run_ablation_row(&cfg, &dataset, &train, &dir))
            .map_err(|e| e.to_string());
        rows.push(AblationRow { name, result });
    }
    let table = AblationTable { rows };
    write_file(&out.join("ablation.csv"), table.csv().as_bytes())?;
    write_file(&out.join("ablation.md"), table.markdown().as_bytes())?;
    write_json(&out.join("ablation.json"), &table)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_points_at_desk_depth() {
        assert_eq!(layer_points(4), [1, 2, 3]);
        assert_eq!(layer_points(42), [10, 21, 35]);
        assert_eq!(layer_points(1), [0, 0, 0]);
    }

    #[test]
    fn ablation_rows_are_fixed() {
        let rows = ablation_configs(&RunConfig::default());
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "Full",
                "No Control",
                "No Thought",
                "Full Thought",
                "2 Vectors",
                "4 Vectors",
                "Layer 1 (early)",
                "Layer 2 (mid)",
                "Layer 3 (late)"
            ]
        );
        assert!(rows.iter().all(|(_, c)| c.validate().is_ok()));
        assert!(rows[2].1.interventions().force_gate_zero);
        assert_eq!(rows[4].1.effective_model().k_thoughts, 2);
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("Layer 1 (early)"), "layer_1_early");
        assert_eq!(slug("No Control"), "no_control");
    }

    #[test]
    fn eval_subset_filters_and_orders() {
        let ds = taskgen::build_dataset(200, 1).unwrap();
        let e = EvalConfig {
            max_depth: Some(2),
            limit: Some(10),
            ..Default::default()
        };
        let sub = eval_problems(&ds, &e);
        assert_eq!(sub.len(), 10);
        assert!(sub.iter().all(|p| p.id % 2 == 1 && p.control.depth() <= 2));
        assert!(sub.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn table_marks_failures() {
        let t = AblationTable {
            rows: vec![AblationRow {
                name: "Full".into(),
                result: Err("boom, twice".into()),
            }],
        };
        assert_eq!(t.failed(), 1);
        assert!(t.csv().contains("Full,,,,,,,failed: boom; twice"));
        assert!(t.markdown().contains("FAILED"));
    }
}
