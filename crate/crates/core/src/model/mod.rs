//! Pre-norm decoder-only transformer with the thought bank injected at the
//! input of block `injection_layer`.

mod decode;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control_encoder::{self, ControlError, ControlSignal, EncoderConfig, EncoderParams};
use crate::numerics::{NumericsError, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::params::{normal_tensor, param_struct};
use crate::thought_bank::{
    self, BankError, InjectionMode, InjectionVars, SelectionState, ThoughtBank,
};

pub use decode::{generate, Decoder, Generation};

const INIT_STD: f64 = 0.02;
const ENCODER_INIT_ATTEMPTS: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("empty token sequence")]
    Empty,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    /// 0-based block index whose input receives the thought injection.
    pub injection_layer: usize,
    pub k_thoughts: usize,
    pub thought_scale: f64,
    pub ffn_mult: usize,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    /// Desk-scale defaults: d 64, 4 layers, 4 heads, injection mid-stack, 8 thoughts.
    pub fn desk(vocab_size: usize) -> Self {
        let d_model = 64;
        Self {
            vocab_size,
            d_model,
            n_layers: 4,
            n_heads: 4,
            max_seq: 256,
            injection_layer: 2,
            k_thoughts: 8,
            thought_scale: thought_bank::DEFAULT_THOUGHT_SCALE,
            ffn_mult: 4,
            encoder: EncoderConfig::desk(d_model),
        }
    }

    /// Small configuration for gradient checks and unit tests.
    pub fn toy(vocab_size: usize) -> Self {
        let d_model = 16;
        Self {
            vocab_size,
            d_model,
            n_layers: 2,
            n_heads: 2,
            max_seq: 32,
            injection_layer: 1,
            k_thoughts: 4,
            thought_scale: 0.5,
            ffn_mult: 2,
            encoder: EncoderConfig {
                hidden1: 16,
                hidden2: 16,
                out: d_model + 4,
                dropout: 0.1,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return fail("sizes must be positive".into());
        }
        if self.injection_layer >= self.n_layers {
            return fail(format!(
                "injection_layer {} must be below n_layers {}",
                self.injection_layer, self.n_layers
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.k_thoughts < 2 || self.k_thoughts > self.d_model {
            return fail(format!(
                "k_thoughts {} must lie in [2, d_model]",
                self.k_thoughts
            ));
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be positive".into());
        }
        self.encoder.validate(self.d_model)?;
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(crate::taskgen::Vocab::standard().len())
    }
}

/// Runtime alterations of the injection site.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interventions {
    /// Encoder output replaced by zeros.
    pub no_control: bool,
    /// Gates forced to 0: hidden states pass through untouched.
    pub force_gate_zero: bool,
    /// Selection weights replaced by the uniform distribution.
    pub uniform_selection: bool,
    /// Skip the injection site entirely (plain transformer).
    pub disable_injection: bool,
}

impl Interventions {
    fn mode(&self) -> InjectionMode {
        InjectionMode {
            force_gate_zero: self.force_gate_zero,
            uniform_selection: self.uniform_selection,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T = Tensor> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub w_qkv: T,
    pub b_qkv: T,
    pub w_o: T,
    pub b_o: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w_ff1: T,
    pub b_ff1: T,
    pub w_ff2: T,
    pub b_ff2: T,
}

param_struct!(Block {
    ln1_g,
    ln1_b,
    w_qkv,
    b_qkv,
    w_o,
    b_o,
    ln2_g,
    ln2_b,
    w_ff1,
    b_ff1,
    w_ff2,
    b_ff2
});

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: T,
    pub lnf_b: T,
    pub w_lm: T,
    pub b_lm: T,
    pub bank: ThoughtBank<T>,
    pub encoder: EncoderParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            lnf_g: f(&self.lnf_g),
            lnf_b: f(&self.lnf_b),
            w_lm: f(&self.w_lm),
            b_lm: f(&self.b_lm),
            bank: self.bank.map(f),
            encoder: self.encoder.map(f),
        }
    }

    /// Visits every leaf in a fixed order with a dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("tok_emb".into(), &self.tok_emb);
        f("pos_emb".into(), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}."), f);
        }
        f("lnf_g".into(), &self.lnf_g);
        f("lnf_b".into(), &self.lnf_b);
        f("w_lm".into(), &self.w_lm);
        f("b_lm".into(), &self.b_lm);
        self.bank.visit("bank.", f);
        self.encoder.visit("encoder.", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("tok_emb".into(), &mut self.tok_emb);
        f("pos_emb".into(), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}."), f);
        }
        f("lnf_g".into(), &mut self.lnf_g);
        f("lnf_b".into(), &mut self.lnf_b);
        f("w_lm".into(), &mut self.w_lm);
        f("b_lm".into(), &mut self.b_lm);
        self.bank.visit_mut("bank.", f);
        self.encoder.visit_mut("encoder.", f);
    }

    pub fn leaves<'a>(&'a self) -> Vec<(String, &'a T)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t: &'a T| out.push((name, t)));
        out
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let hidden = cfg.ffn_mult * d;
        let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                w_qkv: normal_tensor(&[d, 3 * d], INIT_STD, &mut rng),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_o: normal_tensor(&[d, d], resid_std, &mut rng),
                b_o: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w_ff1: normal_tensor(&[d, hidden], INIT_STD, &mut rng),
                b_ff1: Tensor::zeros(&[hidden]),
                w_ff2: normal_tensor(&[hidden, d], resid_std, &mut rng),
                b_ff2: Tensor::zeros(&[d]),
            })
            .collect();
        let tok_emb = normal_tensor(&[cfg.vocab_size, d], INIT_STD, &mut rng);
        let pos_emb = normal_tensor(&[cfg.max_seq, d], INIT_STD, &mut rng);
        let w_lm = normal_tensor(&[d, cfg.vocab_size], INIT_STD, &mut rng);
        let bank =
            ThoughtBank::init_orthogonal(cfg.k_thoughts, d, cfg.thought_scale, rng.next_u64())?;
        // Redraw the encoder if ReLU + LayerNorm collapses two grid points.
        let mut encoder = EncoderParams::init(&cfg.encoder, d, &mut rng)?;
        let mut attempts = 1;
        while let Err(e) = encoder.check_injective() {
            if attempts == ENCODER_INIT_ATTEMPTS {
                return Err(e.into());
            }
            encoder = EncoderParams::init(&cfg.encoder, d, &mut rng)?;
            attempts += 1;
        }
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Tensor::filled(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            w_lm,
            b_lm: Tensor::zeros(&[cfg.vocab_size]),
            bank,
            encoder,
        })
    }

    /// Zero-filled parameters with the layout `cfg` implies.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        Ok(Self::init_shapes(cfg)?.map(&mut |s| Tensor::zeros(s)))
    }

    pub fn num_parameters(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks tensor shapes against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let reference = ModelParams::init_shapes(cfg)?;
        let mine = self.leaves();
        let theirs = reference.leaves();
        if mine.len() != theirs.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, found {}",
                theirs.len(),
                mine.len()
            )));
        }
        for ((name, t), (_, r)) in mine.iter().zip(&theirs) {
            if t.shape() != r.as_slice() {
                return Err(ModelError::Config(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    r,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn init_shapes(cfg: &ModelConfig) -> Result<ModelParams<Vec<usize>>, ModelError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let h = cfg.ffn_mult * d;
        let e = &cfg.encoder;
        let s = |v: &[usize]| v.to_vec();
        Ok(ModelParams {
            tok_emb: s(&[cfg.vocab_size, d]),
            pos_emb: s(&[cfg.max_seq, d]),
            blocks: (0..cfg.n_layers)
                .map(|_| Block {
                    ln1_g: s(&[d]),
                    ln1_b: s(&[d]),
                    w_qkv: s(&[d, 3 * d]),
                    b_qkv: s(&[3 * d]),
                    w_o: s(&[d, d]),
                    b_o: s(&[d]),
                    ln2_g: s(&[d]),
                    ln2_b: s(&[d]),
                    w_ff1: s(&[d, h]),
                    b_ff1: s(&[h]),
                    w_ff2: s(&[h, d]),
                    b_ff2: s(&[d]),
                })
                .collect(),
            lnf_g: s(&[d]),
            lnf_b: s(&[d]),
            w_lm: s(&[d, cfg.vocab_size]),
            b_lm: s(&[cfg.vocab_size]),
            bank: ThoughtBank {
                vectors: s(&[cfg.k_thoughts, d]),
                query_proj: s(&[d, d]),
                out_proj: s(&[d, d]),
                gate_weight: s(&[2 * d, 1]),
                gate_bias: s(&[1]),
            },
            encoder: EncoderParams {
                w1: s(&[3, e.hidden1]),
                b1: s(&[e.hidden1]),
                ln1_g: s(&[e.hidden1]),
                ln1_b: s(&[e.hidden1]),
                w2: s(&[e.hidden1, e.hidden2]),
                b2: s(&[e.hidden2]),
                ln2_g: s(&[e.hidden2]),
                ln2_b: s(&[e.hidden2]),
                skip: s(&[e.hidden1, e.hidden2]),
                w3: s(&[e.hidden2, e.out]),
                b3: s(&[e.out]),
                ln3_g: s(&[e.out]),
                ln3_b: s(&[e.out]),
                gate_w: s(&[e.out - d, 1]),
                gate_b: s(&[1]),
            },
        })
    }

    pub fn all_finite(&self) -> bool {
        self.leaves().iter().all(|(_, t)| t.is_finite())
    }

    pub fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    /// Drops every gradient buffer.
    pub fn clear_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.clear_grad());
    }

    /// Adds `scale ×` the tape gradients of `vars` into each tensor's grad buffer.
    pub fn accumulate_grads(&mut self, vars: &ModelParams<Var>, tape: &Tape, scale: f64) {
        let vs = vars.leaves();
        let mut i = 0;
        self.visit_mut(&mut |_, t| {
            let (_, v) = &vs[i];
            i += 1;
            match tape.grad(**v) {
                Some(g) => t.accumulate_grad(g, scale),
                None if t.grad().is_none() => t.accumulate_grad(&vec![0.0; t.len()], 0.0),
                None => {}
            }
        });
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::Empty);
    }
    if tokens.len() > cfg.max_seq {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: t,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Handles into a recorded forward pass.
pub struct Recorded {
    /// `T × vocab`.
    pub logits: Var,
    /// Present unless the injection site is disabled.
    pub injection: Option<InjectionVars>,
    pub params: ModelParams<Var>,
}

fn block_tape(tape: &mut Tape, x: Var, b: &Block<Var>, heads: usize) -> Result<Var, NumericsError> {
    let a = tape.layer_norm(x, b.ln1_g, b.ln1_b, LAYER_NORM_EPS)?;
    let qkv = tape.matmul(a, b.w_qkv)?;
    let qkv = tape.add_row(qkv, b.b_qkv)?;
    let att = tape.causal_attention(qkv, heads)?;
    let o = tape.matmul(att, b.w_o)?;
    let o = tape.add_row(o, b.b_o)?;
    let x = tape.add(x, o)?;
    let m = tape.layer_norm(x, b.ln2_g, b.ln2_b, LAYER_NORM_EPS)?;
    let f = tape.matmul(m, b.w_ff1)?;
    let f = tape.add_row(f, b.b_ff1)?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, b.w_ff2)?;
    let f = tape.add_row(f, b.b_ff2)?;
    tape.add(x, f)
}

/// Records the full forward pass. `dropout` enables encoder dropout (training mode).
pub fn record_forward(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    control: &ControlSignal,
    iv: Interventions,
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<Recorded, ModelError> {
    check_tokens(cfg, tokens)?;
    let pv = params.map(&mut |t| tape.param(t));
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = tape.embedding(pv.tok_emb, tokens)?;
    let pos = tape.embedding(pv.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut injection = None;
    for (l, block) in pv.blocks.iter().enumerate() {
        if l == cfg.injection_layer && !iv.disable_injection {
            let (control_mod, gate_shift) = if iv.no_control {
                (None, None)
            } else {
                let mask = match dropout {
                    Some(ref mut rng) if cfg.encoder.dropout > 0.0 => {
                        Some(control_encoder::dropout_mask(
                            cfg.encoder.out,
                            cfg.encoder.dropout,
                            &mut **rng,
                        ))
                    }
                    _ => None,
                };
                let (s, g) =
                    control_encoder::encode_tape(tape, control, &pv.encoder, cfg.d_model, mask)?;
                (Some(s), Some(g))
            };
            let inj = thought_bank::inject(tape, x, &pv.bank, control_mod, gate_shift, iv.mode())?;
            x = inj.output;
            injection = Some(inj);
        }
        x = block_tape(tape, x, block, cfg.n_heads)?;
    }
    let x = tape.layer_norm(x, pv.lnf_g, pv.lnf_b, LAYER_NORM_EPS)?;
    let logits = tape.matmul(x, pv.w_lm)?;
    let logits = tape.add_row(logits, pv.b_lm)?;
    Ok(Recorded {
        logits,
        injection,
        params: pv,
    })
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub selections: Vec<SelectionState>,
}

/// Evaluation-mode forward over a whole sequence.
pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    control: &ControlSignal,
    iv: Interventions,
) -> Result<ForwardOutput, ModelError> {
    let mut tape = Tape::new();
    let rec = record_forward(&mut tape, params, cfg, tokens, control, iv, None)?;
    let selections = match &rec.injection {
        None => Vec::new(),
        Some(inj) => {
            let w = tape.value(inj.weights);
            let e = tape.value(inj.entropy);
            let g = tape.value(inj.gate);
            (0..tokens.len())
                .map(|i| {
                    let mut s = thought_bank::from_weights(w.row_slice(i).to_vec(), &params.bank);
                    s.entropy = e.data()[i];
                    s.gate = g.data()[i];
                    s
                })
                .collect()
        }
    };
    Ok(ForwardOutput {
        logits: tape.value(rec.logits).clone(),
        selections,
    })
}
