//! Incremental decoding with per-layer key/value caches.

use super::{check_tokens, Interventions, ModelConfig, ModelError, ModelParams};
use crate::control_encoder::{self, ControlCode, ControlSignal};
use crate::numerics::{self, LAYER_NORM_EPS};
use crate::thought_bank::{self, SelectionState};

/// Feeds one token at a time, reusing cached keys and values.
pub struct Decoder<'a> {
    params: &'a ModelParams,
    cfg: &'a ModelConfig,
    iv: Interventions,
    code: ControlCode,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
    selections: Vec<SelectionState>,
}

impl<'a> Decoder<'a> {
    pub fn new(
        params: &'a ModelParams,
        cfg: &'a ModelConfig,
        control: &ControlSignal,
        iv: Interventions,
    ) -> Self {
        let d = cfg.d_model;
        let code = if iv.no_control {
            ControlCode {
                selection: vec![0.0; d],
                gate_shift: 0.0,
            }
        } else {
            control_encoder::split_code(
                &control_encoder::encode(control, &params.encoder),
                d,
                &params.encoder,
            )
        };
        Self {
            params,
            cfg,
            iv,
            code,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            pos: 0,
            selections: Vec::new(),
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// One selection state per token fed so far (empty when injection is disabled).
    pub fn selections(&self) -> &[SelectionState] {
        &self.selections
    }

    pub fn into_selections(self) -> Vec<SelectionState> {
        self.selections
    }

    /// Feeds `token` at the next position and returns its next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>, ModelError> {
        let cfg = self.cfg;
        let p = self.params;
        if self.pos >= cfg.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: self.pos + 1,
                max: cfg.max_seq,
            });
        }
        if token >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: cfg.vocab_size,
            });
        }
        let d = cfg.d_model;
        let mut x: Vec<f64> = p
            .tok_emb
            .row_slice(token)
            .iter()
            .zip(p.pos_emb.row_slice(self.pos))
            .map(|(a, b)| a + b)
            .collect();
        for l in 0..cfg.n_layers {
            if l == cfg.injection_layer && !self.iv.disable_injection {
                x = self.inject(&x)?;
            }
            x = self.block(l, &x);
        }
        let mut h = vec![0.0; d];
        numerics::layer_norm_row(&x, p.lnf_g.data(), p.lnf_b.data(), LAYER_NORM_EPS, &mut h);
        self.pos += 1;
        Ok(numerics::vec_mat(
            &h,
            p.w_lm.data(),
            cfg.vocab_size,
            Some(p.b_lm.data()),
        ))
    }

    fn inject(&mut self, h: &[f64]) -> Result<Vec<f64>, ModelError> {
        let bank = &self.params.bank;
        let mut state = if self.iv.uniform_selection {
            thought_bank::from_weights(thought_bank::uniform_weights(bank.k()), bank)
        } else {
            thought_bank::select(h, bank, &self.code.selection)?
        };
        let forced = self.iv.force_gate_zero.then_some(0.0);
        let out = thought_bank::gate_combine(h, &mut state, bank, self.code.gate_shift, forced)?;
        self.selections.push(state);
        Ok(out)
    }

    fn block(&mut self, l: usize, x: &[f64]) -> Vec<f64> {
        let cfg = self.cfg;
        let b = &self.params.blocks[l];
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let mut a = vec![0.0; d];
        numerics::layer_norm_row(x, b.ln1_g.data(), b.ln1_b.data(), LAYER_NORM_EPS, &mut a);
        let qkv = numerics::vec_mat(&a, b.w_qkv.data(), 3 * d, Some(b.b_qkv.data()));
        self.keys[l].extend_from_slice(&qkv[d..2 * d]);
        self.values[l].extend_from_slice(&qkv[2 * d..]);
        let keys = &self.keys[l];
        let values = &self.values[l];
        let n = keys.len() / d;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut att = vec![0.0; d];
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let q = &qkv[h * dh..(h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = numerics::dot(q, &keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            }
            numerics::softmax_in_place(&mut scores);
            let o = &mut att[h * dh..(h + 1) * dh];
            for (j, &w) in scores.iter().enumerate() {
                for (oc, &vc) in o
                    .iter_mut()
                    .zip(&values[j * d + h * dh..j * d + (h + 1) * dh])
                {
                    *oc += w * vc;
                }
            }
        }
        let o = numerics::vec_mat(&att, b.w_o.data(), d, Some(b.b_o.data()));
        let x: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let mut m = vec![0.0; d];
        numerics::layer_norm_row(&x, b.ln2_g.data(), b.ln2_b.data(), LAYER_NORM_EPS, &mut m);
        let hidden = cfg.ffn_mult * d;
        let mut f = numerics::vec_mat(&m, b.w_ff1.data(), hidden, Some(b.b_ff1.data()));
        f.iter_mut().for_each(|v| *v = numerics::gelu(*v));
        let f = numerics::vec_mat(&f, b.w_ff2.data(), d, Some(b.b_ff2.data()));
        x.iter().zip(&f).map(|(a, b)| a + b).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    /// Prompt followed by the generated tokens (terminator included when emitted).
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    /// States for every position fed through the model.
    pub selections: Vec<SelectionState>,
}

impl Generation {
    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    /// States for the positions that produced generated tokens.
    pub fn generated_selections(&self) -> &[SelectionState] {
        let start = (self.prompt_len - 1).min(self.selections.len());
        &self.selections[start..]
    }
}

/// Greedy decoding: argmax with ties going to the lowest id, stopping after
/// `eos`, after `max_new` tokens, or at `max_seq`.
pub fn generate(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    control: &ControlSignal,
    iv: Interventions,
    max_new: usize,
    eos: usize,
) -> Result<Generation, ModelError> {
    check_tokens(cfg, prompt)?;
    let mut dec = Decoder::new(params, cfg, control, iv);
    let mut tokens = prompt.to_vec();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t)?;
    }
    let mut produced = 0;
    while produced < max_new && tokens.len() < cfg.max_seq {
        let next = argmax(&logits);
        tokens.push(next);
        produced += 1;
        if next == eos || produced == max_new || tokens.len() == cfg.max_seq {
            break;
        }
        logits = dec.step(next)?;
    }
    Ok(Generation {
        tokens,
        prompt_len: prompt.len(),
        selections: dec.into_selections(),
    })
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
