//! Synthetic arithmetic problems with exact control labels, and the
//! character-level vocabulary.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control_encoder::ControlSignal;

/// Target character count per unit of the length control.
pub const TOKENS_PER_LENGTH: usize = 12;
pub const OPERAND_RANGE: (i64, i64) = (2, 99);
pub const INTERMEDIATE_RANGE: (i64, i64) = (0, 999);
/// Verbosity filler. Targets end with a word-aligned suffix of it followed by the answer.
pub const FILLER: &str =
    "thus after working through each of the steps we can now say that the final answer is ";
pub const EOS_CHAR: char = '#';
const PAD_CHAR: char = '.';
const MIN_ANSWER_LINE: usize = "is ".len();
const MAX_DRAWS: usize = 1000;

const VOCAB_CHARS: &str = "0123456789+-*/=?()×÷− \n.acefghiklnoprstuwy#";

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("character {ch:?} at offset {offset} is not in the vocabulary")]
    UnknownChar { ch: char, offset: usize },
    #[error("token id {id} at offset {offset} is not in the vocabulary")]
    UnknownToken { id: usize, offset: usize },
    #[error("no valid chain for control {control} after {MAX_DRAWS} draws")]
    RetriesExhausted { control: ControlSignal },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("dataset size must be positive")]
    EmptyDataset,
    #[error("dataset line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense character vocabulary; the last id is the end-of-answer marker.
#[derive(Debug, Clone)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        let chars: Vec<char> = VOCAB_CHARS.chars().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.index[&EOS_CHAR]
    }

    /// Offsets in errors count characters, not bytes.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, TaskError> {
        text.chars()
            .enumerate()
            .map(|(offset, ch)| {
                self.index
                    .get(&ch)
                    .copied()
                    .ok_or(TaskError::UnknownChar { ch, offset })
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String, TaskError> {
        ids.iter()
            .enumerate()
            .map(|(offset, &id)| {
                self.chars
                    .get(id)
                    .copied()
                    .ok_or(TaskError::UnknownToken { id, offset })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
}

impl Op {
    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
        }
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub id: u64,
    pub prompt: String,
    pub control: ControlSignal,
    pub target: String,
    pub answer: i64,
}

#[derive(Serialize, Deserialize)]
struct ProblemRecord {
    id: u64,
    prompt: String,
    depth: i64,
    length: i64,
    path: i64,
    target: String,
    answer: i64,
}

impl Problem {
    /// Renders the prompt and target for a left-to-right chain.
    pub fn from_chain(id: u64, control: ControlSignal, operands: &[i64], ops: &[Op]) -> Self {
        assert_eq!(
            operands.len(),
            ops.len() + 1,
            "chain needs one more operand than operators"
        );
        let mut prompt = operands[0].to_string();
        for (op, b) in ops.iter().zip(&operands[1..]) {
            prompt.push(op.symbol());
            prompt.push_str(&b.to_string());
        }
        prompt.push_str("=?");

        // Stepwise body: "a+b=r" then one "±b=r" line per further operation.
        let mut body = String::new();
        let mut acc = operands[0];
        for (i, (op, &b)) in ops.iter().zip(&operands[1..]).enumerate() {
            let r = op.apply(acc, b);
            if control.path() == 1 {
                if i == 0 {
                    body.push_str(&acc.to_string());
                }
                body.push_str(&format!("{}{b}={r}\n", op.symbol()));
            }
            acc = r;
        }
        let answer = acc;
        let budget = target_tokens(&control);
        // A chain of two or more steps that already overflows the budget ends on its
        // last step line, which carries the answer.
        let overflow = body.len() + MIN_ANSWER_LINE + answer.to_string().len() > budget;
        let target = if control.path() == 1 && control.depth() >= 2 && overflow {
            body.trim_end().to_string()
        } else {
            render_answer_line(body, answer, budget)
        };
        Self {
            id,
            prompt,
            control,
            target,
            answer,
        }
    }

    /// Model input: prompt, target, end marker.
    pub fn sequence(&self, vocab: &Vocab) -> Result<(Vec<usize>, usize), TaskError> {
        let mut toks = vocab.tokenize(&self.prompt)?;
        let prompt_len = toks.len();
        toks.extend(vocab.tokenize(&self.target)?);
        toks.push(vocab.eos());
        Ok((toks, prompt_len))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ProblemRecord {
            id: self.id,
            prompt: self.prompt.clone(),
            depth: self.control.depth() as i64,
            length: self.control.length() as i64,
            path: self.control.path() as i64,
            target: self.target.clone(),
            answer: self.answer,
        })
        .expect("record serializes")
    }

    pub fn from_json(line: &str) -> Result<Self, String> {
        let r: ProblemRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let control = ControlSignal::new(r.depth, r.length, r.path).map_err(|e| e.to_string())?;
        Ok(Self {
            id: r.id,
            prompt: r.prompt,
            control,
            target: r.target,
            answer: r.answer,
        })
    }
}

/// Length target in characters: `12 × length`.
pub fn target_tokens(c: &ControlSignal) -> usize {
    TOKENS_PER_LENGTH * c.length() as usize
}

/// Appends the answer line: the longest word-aligned filler suffix that fits
/// the budget (at least its final word), the answer, then padding up to `budget`.
fn render_answer_line(mut text: String, answer: i64, budget: usize) -> String {
    let ans = answer.to_string();
    let room = budget.saturating_sub(text.chars().count() + ans.len());
    text.push_str(filler_suffix(room));
    text.push_str(&ans);
    let used = text.chars().count();
    text.extend(std::iter::repeat_n(PAD_CHAR, budget.saturating_sub(used)));
    text
}

fn filler_suffix(room: usize) -> &'static str {
    let starts = std::iter::once(0).chain(
        FILLER
            .char_indices()
            .filter(|&(_, c)| c == ' ')
            .map(|(i, _)| i + 1),
    );
    let mut best = "is ";
    for s in starts {
        let suffix = &FILLER[s..];
        if !suffix.is_empty() && suffix.len() <= room && suffix.len() > best.len() {
            best = suffix;
        }
    }
    best
}

/// Largest operand drawn; operands are uniform over `[2, operand_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub operand_max: i64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            operand_max: OPERAND_RANGE.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if !(OPERAND_RANGE.0 + 1..=OPERAND_RANGE.1).contains(&self.operand_max) {
            return Err(TaskError::Config(format!(
                "operand_max {} must lie in [{}, {}]",
                self.operand_max,
                OPERAND_RANGE.0 + 1,
                OPERAND_RANGE.1
            )));
        }
        Ok(())
    }
}

/// Draws a valid chain for `c` and renders it.
pub fn generate_problem(
    rng: &mut impl Rng,
    c: ControlSignal,
    id: u64,
) -> Result<Problem, TaskError> {
    generate_problem_with(rng, c, id, &GenConfig::default())
}

pub fn generate_problem_with(
    rng: &mut impl Rng,
    c: ControlSignal,
    id: u64,
    gen: &GenConfig,
) -> Result<Problem, TaskError> {
    let depth = c.depth() as usize;
    for _ in 0..MAX_DRAWS {
        let operands: Vec<i64> = (0..=depth)
            .map(|_| rng.random_range(OPERAND_RANGE.0..=gen.operand_max))
            .collect();
        let ops: Vec<Op> = (0..depth)
            .map(|_| {
                if rng.random::<bool>() {
                    Op::Add
                } else {
                    Op::Sub
                }
            })
            .collect();
        let mut acc = operands[0];
        let mut ok = true;
        for (op, &b) in ops.iter().zip(&operands[1..]) {
            acc = op.apply(acc, b);
            ok &= (INTERMEDIATE_RANGE.0..=INTERMEDIATE_RANGE.1).contains(&acc);
        }
        if ok {
            return Ok(Problem::from_chain(id, c, &operands, &ops));
        }
    }
    Err(TaskError::RetriesExhausted { control: c })
}

/// Grid point of problem `id`. Every aligned block of 50 ids is a permutation
/// of the grid, and within each block of 100 the even ids and the odd ids each
/// cover it once.
pub fn grid_point(id: u64) -> ControlSignal {
    let j = (id % 100) / 2;
    let parity = id % 2;
    ControlSignal::grid()[((j + 25 * parity) % 50) as usize]
}

/// Problems `0..n`, each drawn from its own `(seed, id)` stream.
pub fn build_dataset(n: usize, seed: u64) -> Result<Vec<Problem>, TaskError> {
    build_dataset_with(n, seed, &GenConfig::default())
}

pub fn build_dataset_with(n: usize, seed: u64, gen: &GenConfig) -> Result<Vec<Problem>, TaskError> {
    gen.validate()?;
    if n == 0 {
        return Err(TaskError::EmptyDataset);
    }
    (0..n as u64)
        .map(|id| {
            let mut rng = problem_rng(seed, id);
            generate_problem_with(&mut rng, grid_point(id), id, gen)
        })
        .collect()
}

pub fn problem_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Even ids train, odd ids evaluate.
pub fn is_train(id: u64) -> bool {
    id.is_multiple_of(2)
}

pub fn split(problems: &[Problem]) -> (Vec<Problem>, Vec<Problem>) {
    problems.iter().cloned().partition(|p| is_train(p.id))
}

pub fn write_jsonl(problems: &[Problem], mut w: impl Write) -> Result<(), TaskError> {
    for p in problems {
        writeln!(w, "{}", p.to_json())?;
    }
    Ok(())
}

pub fn to_jsonl(problems: &[Problem]) -> String {
    let mut out = Vec::new();
    write_jsonl(problems, &mut out).expect("writing to memory");
    String::from_utf8(out).expect("json is utf-8")
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<Problem>, TaskError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Problem::from_json(&line).map_err(|msg| TaskError::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}
