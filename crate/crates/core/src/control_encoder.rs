//! Control signals and the expanding MLP that turns them into a selection
//! modulator plus a gate-bias shift.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, NumericsError, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::params::{normal_tensor, param_struct};

pub const DEPTH_RANGE: (u8, u8) = (1, 5);
pub const LENGTH_RANGE: (u8, u8) = (2, 6);
pub const PATH_RANGE: (u8, u8) = (0, 1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("control field `{field}` = {value} outside [{min}, {max}]")]
    OutOfRange {
        field: &'static str,
        value: i64,
        min: u8,
        max: u8,
    },
    #[error("encoder output width {w_out} must exceed model width {d}")]
    OutputTooNarrow { w_out: usize, d: usize },
    #[error("dropout rate {0} not in [0, 1)")]
    BadDropout(f64),
    #[error("control encodings collide on the grid; re-seed the encoder")]
    NotInjective,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `(depth, length, path)` conditioning tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawControl", into = "RawControl")]
pub struct ControlSignal {
    depth: u8,
    length: u8,
    path: u8,
}

#[derive(Serialize, Deserialize)]
struct RawControl {
    depth: i64,
    length: i64,
    path: i64,
}

impl TryFrom<RawControl> for ControlSignal {
    type Error = ControlError;
    fn try_from(r: RawControl) -> Result<Self, Self::Error> {
        ControlSignal::new(r.depth, r.length, r.path)
    }
}

impl From<ControlSignal> for RawControl {
    fn from(c: ControlSignal) -> Self {
        RawControl {
            depth: c.depth.into(),
            length: c.length.into(),
            path: c.path.into(),
        }
    }
}

fn check(field: &'static str, value: i64, (min, max): (u8, u8)) -> Result<u8, ControlError> {
    if value < min as i64 || value > max as i64 {
        Err(ControlError::OutOfRange {
            field,
            value,
            min,
            max,
        })
    } else {
        Ok(value as u8)
    }
}

impl ControlSignal {
    pub fn new(depth: i64, length: i64, path: i64) -> Result<Self, ControlError> {
        Ok(Self {
            depth: check("depth", depth, DEPTH_RANGE)?,
            length: check("length", length, LENGTH_RANGE)?,
            path: check("path", path, PATH_RANGE)?,
        })
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn length(&self) -> u8 {
        self.length
    }

    pub fn path(&self) -> u8 {
        self.path
    }

    /// All 50 grid points in (depth, length, path) lexicographic order.
    pub fn grid() -> Vec<ControlSignal> {
        let mut out = Vec::with_capacity(50);
        for depth in DEPTH_RANGE.0..=DEPTH_RANGE.1 {
            for length in LENGTH_RANGE.0..=LENGTH_RANGE.1 {
                for path in PATH_RANGE.0..=PATH_RANGE.1 {
                    out.push(ControlSignal {
                        depth,
                        length,
                        path,
                    });
                }
            }
        }
        out
    }

    /// Dense index into [`ControlSignal::grid`].
    pub fn grid_index(&self) -> usize {
        ((self.depth - 1) as usize * 5 + (self.length - 2) as usize) * 2 + self.path as usize
    }
}

impl fmt::Display for ControlSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}l{}p{}", self.depth, self.length, self.path)
    }
}

/// Maps each field onto `[0, 1]`.
pub fn normalize_control(c: &ControlSignal) -> [f64; 3] {
    [
        f64::from(c.depth - 1) / 4.0,
        f64::from(c.length - 2) / 4.0,
        f64::from(c.path),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub out: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale widths `3 → 32 → 64 → d + 16`.
    pub fn desk(d_model: usize) -> Self {
        Self {
            hidden1: 32,
            hidden2: 64,
            out: d_model + 16,
            dropout: 0.1,
        }
    }

    /// `3 → 256 → 512 → 4096`.
    pub fn wide() -> Self {
        Self {
            hidden1: 256,
            hidden2: 512,
            out: 4096,
            dropout: 0.1,
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<(), ControlError> {
        if self.out <= d_model {
            return Err(ControlError::OutputTooNarrow {
                w_out: self.out,
                d: d_model,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ControlError::BadDropout(self.dropout));
        }
        Ok(())
    }
}

/// Three affine stages, each followed by ReLU then LayerNorm, with a learned
/// skip projection from stage 1 onto stage 2. The output tail feeds `gate_w`/`gate_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub w1: T,
    pub b1: T,
    pub ln1_g: T,
    pub ln1_b: T,
    pub w2: T,
    pub b2: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub skip: T,
    pub w3: T,
    pub b3: T,
    pub ln3_g: T,
    pub ln3_b: T,
    pub gate_w: T,
    pub gate_b: T,
}

param_struct!(EncoderParams {
    w1,
    b1,
    ln1_g,
    ln1_b,
    w2,
    b2,
    ln2_g,
    ln2_b,
    skip,
    w3,
    b3,
    ln3_g,
    ln3_b,
    gate_w,
    gate_b
});

fn he(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl EncoderParams {
    pub fn init(
        cfg: &EncoderConfig,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ControlError> {
        cfg.validate(d_model)?;
        let (h1, h2, out) = (cfg.hidden1, cfg.hidden2, cfg.out);
        let tail = out - d_model;
        Ok(Self {
            w1: normal_tensor(&[3, h1], he(3), rng),
            b1: normal_tensor(&[h1], 0.1, rng),
            ln1_g: Tensor::filled(&[h1], 1.0),
            ln1_b: Tensor::zeros(&[h1]),
            w2: normal_tensor(&[h1, h2], he(h1), rng),
            b2: Tensor::zeros(&[h2]),
            ln2_g: Tensor::filled(&[h2], 1.0),
            ln2_b: Tensor::zeros(&[h2]),
            skip: normal_tensor(&[h1, h2], 1.0 / (h1 as f64).sqrt(), rng),
            w3: normal_tensor(&[h2, out], he(h2), rng),
            b3: Tensor::zeros(&[out]),
            ln3_g: Tensor::filled(&[out], 1.0),
            ln3_b: Tensor::zeros(&[out]),
            gate_w: normal_tensor(&[tail, 1], 0.02, rng),
            gate_b: Tensor::scalar(0.0),
        })
    }

    pub fn out_width(&self) -> usize {
        self.w3.cols()
    }

    /// Ensures the 50 grid encodings are pairwise distinct.
    pub fn check_injective(&self) -> Result<(), ControlError> {
        let codes: Vec<Vec<f64>> = ControlSignal::grid()
            .iter()
            .map(|c| encode(c, self))
            .collect();
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                let dist: f64 = codes[i]
                    .iter()
                    .zip(&codes[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if !(dist > 0.0) {
                    return Err(ControlError::NotInjective);
                }
            }
        }
        Ok(())
    }
}

fn stage(x: &[f64], w: &Tensor, b: &Tensor, g: &Tensor, beta: &Tensor) -> Vec<f64> {
    let mut y = numerics::vec_mat(x, w.data(), w.cols(), Some(b.data()));
    y.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut out = vec![0.0; y.len()];
    numerics::layer_norm_row(&y, g.data(), beta.data(), LAYER_NORM_EPS, &mut out);
    out
}

/// Deterministic (dropout-off) encoding, length `w_out`.
pub fn encode(c: &ControlSignal, p: &EncoderParams) -> Vec<f64> {
    let x = normalize_control(c);
    let s1 = stage(&x, &p.w1, &p.b1, &p.ln1_g, &p.ln1_b);
    let mut s2 = stage(&s1, &p.w2, &p.b2, &p.ln2_g, &p.ln2_b);
    let skip = numerics::vec_mat(&s1, p.skip.data(), p.skip.cols(), None);
    s2.iter_mut().zip(&skip).for_each(|(a, b)| *a += b);
    stage(&s2, &p.w3, &p.b3, &p.ln3_g, &p.ln3_b)
}

/// Encoding with optional inverted dropout on the output vector.
pub fn encode_train(
    c: &ControlSignal,
    p: &EncoderParams,
    dropout: f64,
    rng: Option<&mut dyn rand::RngCore>,
) -> Vec<f64> {
    let mut out = encode(c, p);
    if let Some(rng) = rng {
        let mask = dropout_mask(out.len(), dropout, rng);
        out.iter_mut().zip(&mask).for_each(|(o, m)| *o *= m);
    }
    out
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, else `1/(1−rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut dyn rand::RngCore) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

/// Encoder output split into the selection modulator (first `d`) and the scalar gate shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlCode {
    pub selection: Vec<f64>,
    pub gate_shift: f64,
}

pub fn split_code(out: &[f64], d: usize, p: &EncoderParams) -> ControlCode {
    let gate_shift = numerics::dot(&out[d..], p.gate_w.data()) + p.gate_b.data()[0];
    ControlCode {
        selection: out[..d].to_vec(),
        gate_shift,
    }
}

fn stage_tape(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    g: Var,
    beta: Var,
) -> Result<Var, NumericsError> {
    let y = tape.matmul(x, w)?;
    let y = tape.add_row(y, b)?;
    let y = tape.relu(y)?;
    tape.layer_norm(y, g, beta, LAYER_NORM_EPS)
}

/// Recorded encoder. Returns `(selection modulator 1×d, gate shift 1×1)`.
pub fn encode_tape(
    tape: &mut Tape,
    c: &ControlSignal,
    p: &EncoderParams<Var>,
    d: usize,
    dropout_mask: Option<Vec<f64>>,
) -> Result<(Var, Var), NumericsError> {
    let x = tape.constant(Tensor::row(normalize_control(c).to_vec()));
    let s1 = stage_tape(tape, x, p.w1, p.b1, p.ln1_g, p.ln1_b)?;
    let s2 = stage_tape(tape, s1, p.w2, p.b2, p.ln2_g, p.ln2_b)?;
    let skip = tape.matmul(s1, p.skip)?;
    let s2 = tape.add(s2, skip)?;
    let mut out = stage_tape(tape, s2, p.w3, p.b3, p.ln3_g, p.ln3_b)?;
    if let Some(mask) = dropout_mask {
        out = tape.mul_const(out, mask)?;
    }
    let w_out = tape.value(out).cols();
    let selection = tape.slice_cols(out, 0, d)?;
    let tail = tape.slice_cols(out, d, w_out - d)?;
    let shift = tape.matmul(tail, p.gate_w)?;
    let shift = tape.add_row(shift, p.gate_b)?;
    Ok((selection, shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, seed: u64) -> EncoderParams {
        EncoderParams::init(
            &EncoderConfig::desk(d),
            d,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn normalization_examples() {
        let c = |a, b, p| normalize_control(&ControlSignal::new(a, b, p).unwrap());
        assert_eq!(c(1, 2, 0), [0.0, 0.0, 0.0]);
        assert_eq!(c(5, 6, 1), [1.0, 1.0, 1.0]);
        assert_eq!(c(3, 4, 1), [0.5, 0.5, 1.0]);
    }

    #[test]
    fn out_of_range_names_field() {
        for (d, l, p, field) in [
            (0, 2, 0, "depth"),
            (6, 2, 0, "depth"),
            (1, 7, 0, "length"),
            (1, 1, 0, "length"),
            (1, 2, 2, "path"),
        ] {
            match ControlSignal::new(d, l, p) {
                Err(ControlError::OutOfRange { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn grid_indexing() {
        let grid = ControlSignal::grid();
        assert_eq!(grid.len(), 50);
        for (i, c) in grid.iter().enumerate() {
            assert_eq!(c.grid_index(), i);
        }
    }

    #[test]
    fn encode_is_deterministic_and_sized() {
        let p = params(16, 2);
        let c = ControlSignal::new(2, 5, 1).unwrap();
        let a = encode(&c, &p);
        assert_eq!(a, encode(&c, &p));
        assert_eq!(a.len(), 32);
        p.check_injective().unwrap();
    }

    #[test]
    fn tape_encoder_matches_plain() {
        let d = 16;
        let p = params(d, 4);
        for c in ControlSignal::grid().iter().step_by(7) {
            let mut tape = Tape::new();
            let pv = p.map(&mut |t| tape.param(t));
            let (sel, shift) = encode_tape(&mut tape, c, &pv, d, None).unwrap();
            let code = split_code(&encode(c, &p), d, &p);
            for (a, b) in tape.value(sel).data().iter().zip(&code.selection) {
                assert!((a - b).abs() < 1e-13);
            }
            assert!((tape.value(shift).data()[0] - code.gate_shift).abs() < 1e-13);
        }
    }

    #[test]
    fn narrow_output_rejected() {
        let mut cfg = EncoderConfig::desk(16);
        cfg.out = 16;
        assert!(cfg.validate(16).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        let p = params(16, 9);
        let c = ControlSignal::new(4, 3, 0).unwrap();
        let clean = encode(&c, &p);
        let coord = (0..clean.len())
            .max_by(|&a, &b| clean[a].abs().total_cmp(&clean[b].abs()))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| encode_train(&c, &p, 0.1, Some(&mut rng))[coord])
            .sum::<f64>()
            / n as f64;
        assert!(((mean - clean[coord]) / clean[coord]).abs() < 0.02);
    }

    #[test]
    fn serde_rejects_invalid_control() {
        let ok: ControlSignal = serde_json::from_str(r#"{"depth":3,"length":4,"path":1}"#).unwrap();
        assert_eq!(ok, ControlSignal::new(3, 4, 1).unwrap());
        assert!(
            serde_json::from_str::<ControlSignal>(r#"{"depth":9,"length":4,"path":1}"#).is_err()
        );
    }
}
