//! Accuracy, per-dimension control matching, the weighted controllability
//! score, and entropy statistics grouped by depth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control_encoder::ControlSignal;
use crate::model::{self, Interventions, ModelConfig, ModelError, ModelParams};
use crate::taskgen::{self, Problem, TaskError, Vocab};
use crate::thought_bank::SelectionState;

pub const CONTROL_WEIGHTS: (f64, f64, f64) = (0.6, 0.2, 0.2);
pub const LENGTH_TOLERANCE: f64 = 0.10;
pub const PATH_DETECTOR: &str =
    "rule: stepwise when >= 2 steps, or multi-line with at least one relation line";
/// Generation budget beyond the prompt.
pub const MAX_NEW_TOKENS: usize = 160;

const RELATION_CHARS: &[char] = &['+', '-', '*', '/', '=', '×', '÷', '−'];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("nothing to evaluate")]
    Empty,
    #[error("{outputs} outputs for {problems} problems")]
    Misaligned { outputs: usize, problems: usize },
    #[error("no entropy records for depth {0}")]
    MissingDepth(u8),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

fn has_relation(line: &str) -> bool {
    let chars: Vec<char> = line.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if !RELATION_CHARS.contains(&c) {
            continue;
        }
        let left = chars[..i].iter().rev().find(|c| !c.is_whitespace());
        let right = chars[i + 1..].iter().find(|c| !c.is_whitespace());
        if left.is_some_and(char::is_ascii_digit) || right.is_some_and(char::is_ascii_digit) {
            return true;
        }
    }
    false
}

fn is_bare_number(line: &str) -> bool {
    let t = line.trim().trim_end_matches('.');
    !t.is_empty() && t.chars().all(|c| c.is_ascii_digit())
}

/// Lines holding an arithmetic relation (a digit next to an operator or `=`,
/// ignoring spaces) plus bare-number lines; at least 1 for non-blank output.
pub fn count_steps(output: &str) -> usize {
    let lines: Vec<&str> = output.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return 0;
    }
    lines
        .iter()
        .filter(|l| has_relation(l) || is_bare_number(l))
        .count()
        .max(1)
}

pub fn match_depth(output: &str, target_depth: usize) -> bool {
    count_steps(output) == target_depth
}

/// Step count expected for `c`: its depth when stepwise, one for a direct answer.
pub fn expected_steps(c: &ControlSignal) -> usize {
    if c.path() == 1 {
        c.depth() as usize
    } else {
        1
    }
}

/// `|output − target| ≤ 10% of target`, boundary inclusive.
pub fn match_length(output_tokens: usize, target_tokens: usize) -> bool {
    10 * output_tokens.abs_diff(target_tokens) <= target_tokens
}

/// 1 for stepwise output, 0 for direct.
pub fn detect_path(output: &str) -> u8 {
    let lines: Vec<&str> = output.lines().filter(|l| !l.trim().is_empty()).collect();
    let multi_line_relation = lines.len() >= 2 && lines.iter().any(|l| has_relation(l));
    u8::from(count_steps(output) >= 2 || multi_line_relation)
}

pub fn controllability_score(d: f64, l: f64, p: f64) -> Result<f64, EvalError> {
    for (name, value) in [("depth_match", d), ("length_match", l), ("path_match", p)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(EvalError::OutOfRange { name, value });
        }
    }
    let (wd, wl, wp) = CONTROL_WEIGHTS;
    Ok(wd * d + wl * l + wp * p)
}

/// Last maximal run of ASCII digits.
pub fn extract_answer(output: &str) -> Option<i64> {
    let bytes = output.as_bytes();
    let end = bytes.iter().rposition(u8::is_ascii_digit)? + 1;
    let start = bytes[..end]
        .iter()
        .rposition(|b| !b.is_ascii_digit())
        .map_or(0, |i| i + 1);
    output[start..end].parse().ok()
}

pub fn accuracy(outputs: &[String], problems: &[Problem]) -> Result<f64, EvalError> {
    if problems.is_empty() {
        return Err(EvalError::Empty);
    }
    if outputs.len() != problems.len() {
        return Err(EvalError::Misaligned {
            outputs: outputs.len(),
            problems: problems.len(),
        });
    }
    let hits = outputs
        .iter()
        .zip(problems)
        .filter(|(o, p)| extract_answer(o) == Some(p.answer))
        .count();
    Ok(hits as f64 / problems.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub range: f64,
    pub count: usize,
}

impl GroupStats {
    /// Population statistics; `None` for an empty slice.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            mean,
            std,
            min,
            max,
            range: max - min,
            count: xs.len(),
        })
    }
}

fn group_by_depth(records: &[(ControlSignal, f64)]) -> BTreeMap<u8, Vec<f64>> {
    let mut groups: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for (c, h) in records {
        groups.entry(c.depth()).or_default().push(*h);
    }
    groups
}

/// Per-depth entropy statistics; every depth 1–5 must be present.
pub fn entropy_stats(
    records: &[(ControlSignal, f64)],
) -> Result<BTreeMap<u8, GroupStats>, EvalError> {
    let groups = group_by_depth(records);
    let (lo, hi) = crate::control_encoder::DEPTH_RANGE;
    (lo..=hi)
        .map(|d| {
            let g = groups.get(&d).ok_or(EvalError::MissingDepth(d))?;
            Ok((d, GroupStats::of(g).expect("group is non-empty")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEntropy {
    pub depth: u8,
    #[serde(flatten)]
    pub stats: GroupStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub path_detector: String,
    pub n_problems: usize,
    pub accuracy: f64,
    pub depth_match: f64,
    pub length_match: f64,
    pub path_match: f64,
    pub controllability: f64,
    pub entropy_mean: f64,
    pub entropy_std: f64,
    pub avg_length: f64,
    /// Depths present in the evaluated set only.
    pub entropy_by_depth: Vec<DepthEntropy>,
}

/// One line of the per-problem table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRow {
    pub id: u64,
    pub depth: u8,
    pub length: u8,
    pub path: u8,
    pub predicted_answer: Option<i64>,
    pub correct: bool,
    pub steps: usize,
    pub tokens: usize,
    pub path_detected: u8,
    pub mean_entropy: f64,
}

pub const ROW_HEADER: &str =
    "id,depth,length,path,predicted_answer,correct,steps,tokens,path_detected,mean_entropy";

impl ProblemRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.id,
            self.depth,
            self.length,
            self.path,
            self.predicted_answer
                .map_or(String::new(), |a| a.to_string()),
            u8::from(self.correct),
            self.steps,
            self.tokens,
            self.path_detected,
            self.mean_entropy
        )
    }
}

pub fn rows_csv(rows: &[ProblemRow]) -> String {
    let mut s = String::from(ROW_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Scores `outputs[i]` (generated text, end marker removed) against `problems[i]`.
/// `mean_entropy[i]` is the average selection entropy while producing it.
pub fn evaluate_outputs(
    problems: &[Problem],
    outputs: &[String],
    mean_entropy: &[f64],
) -> Result<(EvalReport, Vec<ProblemRow>), EvalError> {
    if problems.is_empty() {
        return Err(EvalError::Empty);
    }
    if outputs.len() != problems.len() || mean_entropy.len() != problems.len() {
        return Err(EvalError::Misaligned {
            outputs: outputs.len().min(mean_entropy.len()),
            problems: problems.len(),
        });
    }
    let mut order: Vec<usize> = (0..problems.len()).collect();
    order.sort_by_key(|&i| problems[i].id);
    let mut rows = Vec::with_capacity(problems.len());
    let (mut dm, mut lm, mut pm) = (0usize, 0usize, 0usize);
    for &i in &order {
        let (p, out) = (&problems[i], &outputs[i]);
        let c = p.control;
        let steps = count_steps(out);
        let tokens = out.chars().count();
        let path_detected = detect_path(out);
        let predicted = extract_answer(out);
        dm += usize::from(steps == expected_steps(&c));
        lm += usize::from(match_length(tokens, taskgen::target_tokens(&c)));
        pm += usize::from(path_detected == c.path());
        rows.push(ProblemRow {
            id: p.id,
            depth: c.depth(),
            length: c.length(),
            path: c.path(),
            predicted_answer: predicted,
            correct: predicted == Some(p.answer),
            steps,
            tokens,
            path_detected,
            mean_entropy: mean_entropy[i],
        });
    }
    let n = problems.len() as f64;
    let (depth_match, length_match, path_match) = (dm as f64 / n, lm as f64 / n, pm as f64 / n);
    let records: Vec<(ControlSignal, f64)> = rows
        .iter()
        .map(|r| {
            (
                ControlSignal::new(r.depth.into(), r.length.into(), r.path.into()).expect("valid"),
                r.mean_entropy,
            )
        })
        .collect();
    let all = GroupStats::of(&rows.iter().map(|r| r.mean_entropy).collect::<Vec<_>>())
        .expect("non-empty");
    let entropy_by_depth = group_by_depth(&records)
        .into_iter()
        .map(|(depth, xs)| DepthEntropy {
            depth,
            stats: GroupStats::of(&xs).expect("non-empty"),
        })
        .collect();
    let report = EvalReport {
        path_detector: PATH_DETECTOR.into(),
        n_problems: problems.len(),
        accuracy: rows.iter().filter(|r| r.correct).count() as f64 / n,
        depth_match,
        length_match,
        path_match,
        controllability: controllability_score(depth_match, length_match, path_match)?,
        entropy_mean: all.mean,
        entropy_std: all.std,
        avg_length: rows.iter().map(|r| r.tokens as f64).sum::<f64>() / n,
        entropy_by_depth,
    };
    Ok((report, rows))
}

/// Model output for one problem.
#[derive(Debug, Clone)]
pub struct Transcript {
    pub text: String,
    pub mean_entropy: f64,
    /// Selection states of the positions that produced the output.
    pub selections: Vec<SelectionState>,
}

/// Greedy generation under the problem's own control signal.
pub fn transcribe(
    params: &ModelParams,
    cfg: &ModelConfig,
    vocab: &Vocab,
    problem: &Problem,
    iv: Interventions,
) -> Result<Transcript, EvalError> {
    let prompt = vocab.tokenize(&problem.prompt)?;
    let max_new = MAX_NEW_TOKENS.min(cfg.max_seq.saturating_sub(prompt.len()));
    let g = model::generate(
        params,
        cfg,
        &prompt,
        &problem.control,
        iv,
        max_new,
        vocab.eos(),
    )?;
    let mut out = g.generated().to_vec();
    if out.last() == Some(&vocab.eos()) {
        out.pop();
    }
    let selections = g.generated_selections().to_vec();
    let mean_entropy = if selections.is_empty() {
        0.0
    } else {
        selections.iter().map(|s| s.entropy).sum::<f64>() / selections.len() as f64
    };
    Ok(Transcript {
        text: vocab.detokenize(&out)?,
        mean_entropy,
        selections,
    })
}

pub fn transcribe_all(
    params: &ModelParams,
    cfg: &ModelConfig,
    vocab: &Vocab,
    problems: &[Problem],
    iv: Interventions,
) -> Result<Vec<Transcript>, EvalError> {
    problems
        .iter()
        .map(|p| transcribe(params, cfg, vocab, p, iv))
        .collect()
}

pub fn evaluate_transcripts(
    problems: &[Problem],
    transcripts: &[Transcript],
) -> Result<(EvalReport, Vec<ProblemRow>), EvalError> {
    let texts: Vec<String> = transcripts.iter().map(|t| t.text.clone()).collect();
    let ents: Vec<f64> = transcripts.iter().map(|t| t.mean_entropy).collect();
    evaluate_outputs(problems, &texts, &ents)
}
