//! The learnable thought-vector bank: attention-style selection over `K`
//! vectors, the selection entropy and its reward, and the scalar gate that
//! mixes the selected thought back into the hidden state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{self, NumericsError, Tape, Tensor, Var};
use crate::params::{normal_tensor, param_struct};

/// Initial value of the gate bias; `sigmoid(-2) ≈ 0.12` keeps early thought influence small.
pub const GATE_BIAS_INIT: f64 = -2.0;
pub const DEFAULT_THOUGHT_SCALE: f64 = 0.02;
const PROJ_INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BankError {
    #[error("cannot place {k} orthogonal thought vectors in {d} dimensions")]
    TooManyThoughts { k: usize, d: usize },
    #[error("thought bank needs at least 2 vectors, got {0}")]
    TooFewThoughts(usize),
    #[error("thought scale must be positive, got {0}")]
    BadScale(f64),
    #[error("expected length {expected}, got {found} for {what}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("not a probability vector: {0}")]
    NotSimplex(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `vectors: K×d`, `query_proj: d×d`, `out_proj: d×d`, `gate_weight: 2d×1`, `gate_bias: [1]`.
///
/// Row convention: a hidden row `h` is mapped as `h·query_proj`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThoughtBank<T = Tensor> {
    pub vectors: T,
    pub query_proj: T,
    pub out_proj: T,
    pub gate_weight: T,
    pub gate_bias: T,
}

param_struct!(ThoughtBank {
    vectors,
    query_proj,
    out_proj,
    gate_weight,
    gate_bias
});

impl ThoughtBank {
    /// Orthogonal rows of norm `scale`, small random projections, gate bias −2.
    pub fn init_orthogonal(k: usize, d: usize, scale: f64, seed: u64) -> Result<Self, BankError> {
        if k < 2 {
            return Err(BankError::TooFewThoughts(k));
        }
        if k > d {
            return Err(BankError::TooManyThoughts { k, d });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(BankError::BadScale(scale));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = normal_tensor(&[k, d], 1.0, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..k).map(|i| raw.row_slice(i).to_vec()).collect();
        // Modified Gram-Schmidt, applied twice for orthogonality to working precision.
        for _ in 0..2 {
            for i in 0..k {
                for j in 0..i {
                    let proj = numerics::dot(&rows[i], &rows[j]);
                    let (head, tail) = rows.split_at_mut(i);
                    for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                        *x -= proj * y;
                    }
                }
                let norm = numerics::dot(&rows[i], &rows[i]).sqrt();
                rows[i].iter_mut().for_each(|x| *x /= norm);
            }
        }
        for row in &mut rows {
            row.iter_mut().for_each(|x| *x *= scale);
        }
        Ok(Self {
            vectors: Tensor::from_rows(&rows)?,
            query_proj: normal_tensor(&[d, d], PROJ_INIT_STD, &mut rng),
            out_proj: normal_tensor(&[d, d], PROJ_INIT_STD, &mut rng),
            gate_weight: normal_tensor(&[2 * d, 1], PROJ_INIT_STD, &mut rng),
            gate_bias: Tensor::scalar(GATE_BIAS_INIT),
        })
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn d(&self) -> usize {
        self.vectors.cols()
    }
}

/// Selection outcome at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    pub weights: Vec<f64>,
    pub combined: Vec<f64>,
    pub gate: f64,
    pub entropy: f64,
}

impl SelectionState {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        best
    }

    pub fn reward(&self) -> f64 {
        -self.entropy
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), BankError> {
    if expected == found {
        Ok(())
    } else {
        Err(BankError::Length {
            what,
            expected,
            found,
        })
    }
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `p = softmax(((h·Wq + control_mod)·Vᵀ)/√d)`, `combined = pᵀ·V`.
pub fn select(
    h: &[f64],
    bank: &ThoughtBank,
    control_mod: &[f64],
) -> Result<SelectionState, BankError> {
    let (k, d) = (bank.k(), bank.d());
    check_len("hidden state", d, h.len())?;
    check_len("control modulator", d, control_mod.len())?;
    let mut query = numerics::vec_mat(h, bank.query_proj.data(), d, Some(control_mod));
    query.iter_mut().for_each(|q| *q /= (d as f64).sqrt());
    let mut weights: Vec<f64> = (0..k)
        .map(|i| numerics::dot(&query, bank.vectors.row_slice(i)))
        .collect();
    numerics::softmax_in_place(&mut weights);
    Ok(from_weights(weights, bank))
}

/// State for externally fixed weights (the uniform-selection ablation uses this).
pub fn from_weights(weights: Vec<f64>, bank: &ThoughtBank) -> SelectionState {
    let d = bank.d();
    let mut combined = vec![0.0; d];
    for (i, &w) in weights.iter().enumerate() {
        for (c, &v) in combined.iter_mut().zip(bank.vectors.row_slice(i)) {
            *c += w * v;
        }
    }
    let entropy = entropy_unchecked(&weights);
    SelectionState {
        weights,
        combined,
        gate: 0.0,
        entropy,
    }
}

pub fn uniform_weights(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn selection_entropy(p: &[f64]) -> Result<f64, BankError> {
    if p.is_empty() {
        return Err(BankError::NotSimplex("empty".into()));
    }
    if let Some((i, &x)) = p.iter().enumerate().find(|(_, &x)| !(x >= 0.0)) {
        return Err(BankError::NotSimplex(format!("entry {i} is {x}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(BankError::NotSimplex(format!("sums to {total}")));
    }
    Ok(entropy_unchecked(p).clamp(0.0, (p.len() as f64).ln()))
}

/// Self-supervised reward `R = −H(p)`.
pub fn entropy_reward(p: &[f64]) -> Result<f64, BankError> {
    selection_entropy(p).map(|h| -h)
}

/// `g = sigmoid(gate_weight·[h, combined] + gate_bias + gate_shift)`;
/// returns `h + g·(combined·out_proj)` and stores `g` in `state.gate`.
///
/// `forced_gate` replaces the computed gate (ablation and test hook).
pub fn gate_combine(
    h: &[f64],
    state: &mut SelectionState,
    bank: &ThoughtBank,
    gate_shift: f64,
    forced_gate: Option<f64>,
) -> Result<Vec<f64>, BankError> {
    let d = bank.d();
    check_len("hidden state", d, h.len())?;
    check_len("combined thought", d, state.combined.len())?;
    let gw = bank.gate_weight.data();
    let z = numerics::dot(&gw[..d], h)
        + numerics::dot(&gw[d..], &state.combined)
        + bank.gate_bias.data()[0]
        + gate_shift;
    let gate = forced_gate.unwrap_or_else(|| numerics::sigmoid(z));
    state.gate = gate;
    if gate == 0.0 {
        return Ok(h.to_vec());
    }
    let contrib = numerics::vec_mat(&state.combined, bank.out_proj.data(), d, None);
    Ok(h.iter().zip(&contrib).map(|(x, c)| x + gate * c).collect())
}

/// How the injection site is altered for ablations and equivalence tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InjectionMode {
    pub force_gate_zero: bool,
    pub uniform_selection: bool,
}

/// Tape handles produced by [`inject`].
pub struct InjectionVars {
    pub output: Var,
    /// `T × K` selection weights.
    pub weights: Var,
    /// `T × 1` per-position entropy in nats.
    pub entropy: Var,
    /// `T × 1` gate values.
    pub gate: Var,
}

/// Recorded version of [`select`] + [`gate_combine`] over every row of `x: T×d`.
///
/// `control_mod` is `1×d` and `gate_shift` is `1×1`; `None` means zero.
pub fn inject(
    tape: &mut Tape,
    x: Var,
    bank: &ThoughtBank<Var>,
    control_mod: Option<Var>,
    gate_shift: Option<Var>,
    mode: InjectionMode,
) -> Result<InjectionVars, BankError> {
    let (t, d) = tape.value(x).dims2();
    let k = tape.value(bank.vectors).rows();
    let weights = if mode.uniform_selection {
        tape.constant(Tensor::new(&[t, k], vec![1.0 / k as f64; t * k])?)
    } else {
        let mut q = tape.matmul(x, bank.query_proj)?;
        if let Some(cm) = control_mod {
            q = tape.add_row(q, cm)?;
        }
        let logits = tape.matmul_bt(q, bank.vectors)?;
        let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
        tape.softmax(logits)?
    };
    let entropy = tape.row_entropy(weights)?;
    let combined = tape.matmul(weights, bank.vectors)?;
    if mode.force_gate_zero {
        let gate = tape.constant(Tensor::zeros(&[t, 1]));
        return Ok(InjectionVars {
            output: x,
            weights,
            entropy,
            gate,
        });
    }
    let pair = tape.concat_cols(x, combined)?;
    let mut z = tape.matmul(pair, bank.gate_weight)?;
    z = tape.add_row(z, bank.gate_bias)?;
    if let Some(shift) = gate_shift {
        z = tape.add_row(z, shift)?;
    }
    let gate = tape.sigmoid(z)?;
    let contrib = tape.matmul(combined, bank.out_proj)?;
    let gated = tape.mul_col(contrib, gate)?;
    let output = tape.add(x, gated)?;
    Ok(InjectionVars {
        output,
        weights,
        entropy,
        gate,
    })
}
