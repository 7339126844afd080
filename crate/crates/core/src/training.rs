//! Cross-entropy plus λ-weighted selection entropy, trained with AdamW,
//! global-norm clipping and gradient accumulation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, Interventions, ModelConfig, ModelError, ModelParams};
use crate::numerics::{self, NumericsError, Tape, Tensor, Var};
use crate::taskgen::{Problem, TaskError, Vocab};
use crate::thought_bank::SelectionState;

const DROPOUT_STREAM_SALT: u64 = 0x5eed_d00d;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty answer span")]
    EmptySpan,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error(
        "optimizer state does not match parameter {name}: expected {expected:?}, found {found:?}"
    )]
    StateMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch: usize,
    pub accum_steps: usize,
    pub lambda: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
}

/// Learning-rate shape over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup over `warmup_steps`, then cosine decay to zero at `total_steps`.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch: 1,
            accum_steps: 8,
            lambda: 0.1,
            warmup_steps: 100,
            total_steps: 1000,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lambda >= 0.0) {
            return fail("lambda must be non-negative");
        }
        if self.warmup_steps > self.total_steps {
            return fail("warmup_steps exceeds total_steps");
        }
        if self.accum_steps == 0 {
            return fail("accum_steps must be at least 1");
        }
        if self.batch != 1 {
            return fail(
                "only batch = 1 is supported; use accum_steps for larger effective batches",
            );
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.eps > 0.0) {
            return fail("lr, clip_norm and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// AdamW moments with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = params.map(&mut |t| Tensor::zeros(t.shape()));
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Learning rate used by optimizer step `step`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => {
            if step < cfg.warmup_steps {
                cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64
            } else {
                let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
                let t = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
                cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Linear ramp from 0 to `λ` over `warmup_steps`, constant afterwards.
pub fn lambda_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lambda
    } else {
        cfg.lambda * step as f64 / cfg.warmup_steps as f64
    }
}

fn mean_ce(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64, TrainError> {
    let (_, v) = logits.dims2();
    let mut total = 0.0;
    let mut count = 0;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let row = logits.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            debug_assert!(t < v);
            total += lse - row[t];
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptySpan);
    }
    Ok(total / count as f64)
}

/// `L = CE_mean(answer span) + λ · mean_positions H(p)`.
pub fn combined_loss(
    logits: &Tensor,
    targets: &[Option<usize>],
    selections: &[SelectionState],
    lambda: f64,
) -> Result<f64, TrainError> {
    let ce = mean_ce(logits, targets)?;
    if lambda == 0.0 || selections.is_empty() {
        return Ok(ce);
    }
    let h = selections.iter().map(|s| s.entropy).sum::<f64>() / selections.len() as f64;
    Ok(ce + lambda * h)
}

/// Handles of the recorded loss.
pub struct LossVars {
    pub loss: Var,
    pub ce: Var,
    pub entropy_mean: Option<Var>,
}

/// Recorded version of [`combined_loss`] over the outputs of `model::record_forward`.
pub fn record_loss(
    tape: &mut Tape,
    rec: &model::Recorded,
    targets: &[Option<usize>],
    lambda: f64,
) -> Result<LossVars, TrainError> {
    if targets.iter().all(Option::is_none) {
        return Err(TrainError::EmptySpan);
    }
    let ce = tape.cross_entropy(rec.logits, targets)?;
    let entropy_mean = match &rec.injection {
        Some(inj) => Some(tape.mean(inj.entropy)?),
        None => None,
    };
    let loss = match entropy_mean {
        Some(h) if lambda != 0.0 => {
            let w = tape.scale(h, lambda)?;
            tape.add(ce, w)?
        }
        _ => ce,
    };
    Ok(LossVars {
        loss,
        ce,
        entropy_mean,
    })
}

/// Next-token targets over the answer span: position `i` predicts token `i+1`
/// for every `i ≥ prompt_len − 1`.
pub fn answer_targets(tokens: &[usize], prompt_len: usize) -> Vec<Option<usize>> {
    (0..tokens.len())
        .map(|i| {
            if i + 1 < tokens.len() && i + 1 >= prompt_len {
                Some(tokens[i + 1])
            } else {
                None
            }
        })
        .collect()
}

/// Scales every gradient by `threshold / g` when the global norm `g` exceeds
/// `threshold`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], threshold: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > threshold {
        let s = threshold / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

fn clip_param_grads(params: &mut ModelParams, threshold: f64) -> f64 {
    let mut sq = 0.0;
    params.visit(&mut |_, t| sq += t.grad().map_or(0.0, |g| g.iter().map(|x| x * x).sum()));
    let norm = sq.sqrt();
    if norm > threshold {
        let s = threshold / norm;
        params.visit_mut(&mut |_, t| {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        });
    }
    norm
}

/// One AdamW update of a flat parameter with bias correction at step `t ≥ 1`.
pub fn adamw_step(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
    }
}

/// Applies AdamW to every parameter using its accumulated gradient (missing
/// gradients count as zero) and increments the step counter once.
pub fn adamw_update(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let mut mismatch = None;
    {
        let ms = state.m.leaves();
        let vs = state.v.leaves();
        let mut i = 0;
        params.visit(&mut |name, t| {
            for other in [ms.get(i), vs.get(i)] {
                let found = other.map(|(_, o)| o.shape().to_vec()).unwrap_or_default();
                if found != t.shape() && mismatch.is_none() {
                    mismatch = Some(TrainError::StateMismatch {
                        name: name.clone(),
                        expected: t.shape().to_vec(),
                        found,
                    });
                }
            }
            i += 1;
        });
        if mismatch.is_none() && ms.len() != i {
            mismatch = Some(TrainError::StateMismatch {
                name: "<count>".into(),
                expected: vec![i],
                found: vec![ms.len()],
            });
        }
    }
    if let Some(e) = mismatch {
        return Err(e);
    }
    state.step += 1;
    let t = state.step;
    let mut ms = take_leaves(&mut state.m);
    let mut vs = take_leaves(&mut state.v);
    let mut i = 0;
    params.visit_mut(&mut |_, p| {
        let g = p.grad().map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec);
        adamw_step(p.data_mut(), &g, ms[i].data_mut(), vs[i].data_mut(), t, cfg);
        i += 1;
    });
    restore_leaves(&mut state.m, &mut ms);
    restore_leaves(&mut state.v, &mut vs);
    Ok(())
}

fn take_leaves(p: &mut ModelParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    p.visit_mut(&mut |_, t| out.push(std::mem::replace(t, Tensor::scalar(0.0))));
    out
}

fn restore_leaves(p: &mut ModelParams, leaves: &mut Vec<Tensor>) {
    let mut it = leaves.drain(..);
    p.visit_mut(&mut |_, t| *t = it.next().expect("leaf count unchanged"));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub ce: f64,
    pub entropy_mean: f64,
    pub reward_mean: f64,
    pub grad_norm: f64,
    pub lambda: f64,
}

impl StepMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Parameters, optimizer moments and step counter: everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: OptimizerState,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let opt = OptimizerState::new(&params);
        Self { params, opt }
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }
}

pub struct TrainSetup<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub vocab: &'a Vocab,
    pub interventions: Interventions,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepMetrics>,
    /// Mean per-position reward of every micro-batch, in order.
    pub micro_rewards: Vec<f64>,
}

struct Encoded {
    tokens: Vec<usize>,
    targets: Vec<Option<usize>>,
    problem: usize,
}

/// Data order depends only on `(seed, micro-batch index)`, so a resumed run
/// sees exactly the examples the uninterrupted run would have.
struct Schedule {
    seed: u64,
    n: usize,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl Schedule {
    fn index(&mut self, micro: u64) -> usize {
        let epoch = micro / self.n as u64;
        if self.epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.perm[(micro % self.n as u64) as usize]
    }
}

fn dropout_rng(seed: u64, micro: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_STREAM_SALT);
    rng.set_stream(micro);
    rng
}

/// Runs optimizer steps from `state.step()` up to `until` (exclusive), calling
/// `on_step` after each one.
pub fn train(
    dataset: &[Problem],
    state: &mut TrainState,
    setup: &TrainSetup<'_>,
    until: u64,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainLog, TrainError> {
    let cfg = setup.train;
    cfg.validate()?;
    setup.model.validate()?;
    let mut log = TrainLog::default();
    if state.step() >= until {
        return Ok(log);
    }
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let encoded: Vec<Encoded> = dataset
        .iter()
        .enumerate()
        .map(|(problem, p)| {
            let (tokens, prompt_len) = p.sequence(setup.vocab)?;
            let targets = answer_targets(&tokens, prompt_len);
            Ok(Encoded {
                tokens,
                targets,
                problem,
            })
        })
        .collect::<Result<_, TrainError>>()?;
    let mut schedule = Schedule {
        seed: cfg.seed,
        n: encoded.len(),
        epoch: None,
        perm: Vec::new(),
    };
    let accum = cfg.accum_steps as u64;
    let scale = 1.0 / accum as f64;
    while state.step() < until {
        let step = state.step();
        let lambda = lambda_schedule(step, cfg);
        state.params.zero_grads();
        let mut ce_sum = 0.0;
        let mut ent_sum = 0.0;
        for a in 0..accum {
            let micro = step * accum + a;
            let ex = &encoded[schedule.index(micro)];
            let p = &dataset[ex.problem];
            let mut rng = dropout_rng(cfg.seed, micro);
            let mut tape = Tape::new();
            let rec = model::record_forward(
                &mut tape,
                &state.params,
                setup.model,
                &ex.tokens,
                &p.control,
                setup.interventions,
                Some(&mut rng),
            )?;
            let lv = record_loss(&mut tape, &rec, &ex.targets, lambda)?;
            let loss = tape.value(lv.loss).data()[0];
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { step });
            }
            tape.backward(lv.loss)?;
            state.params.accumulate_grads(&rec.params, &tape, scale);
            ce_sum += tape.value(lv.ce).data()[0];
            let h = lv.entropy_mean.map_or(0.0, |h| tape.value(h).data()[0]);
            ent_sum += h;
            log.micro_rewards.push(-h);
        }
        let grad_norm = clip_param_grads(&mut state.params, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        let step_cfg = TrainConfig {
            lr: lr_at(step, cfg),
            ..cfg.clone()
        };
        adamw_update(&mut state.params, &mut state.opt, &step_cfg)?;
        if !state.params.all_finite() {
            return Err(TrainError::NonFinite { step });
        }
        let entropy_mean = ent_sum / accum as f64;
        let m = StepMetrics {
            step,
            ce: ce_sum / accum as f64,
            entropy_mean,
            reward_mean: -entropy_mean,
            grad_norm,
            lambda,
        };
        on_step(&m);
        log.steps.push(m);
    }
    Ok(log)
}

/// Post-clip global norm of the gradients currently stored on `params`.
pub fn grad_norm(params: &ModelParams) -> f64 {
    let mut sq = 0.0;
    params.visit(&mut |_, t| sq += t.grad().map_or(0.0, |g| numerics::dot(g, g)));
    sq.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen;
    use crate::thought_bank::{self, ThoughtBank};

    fn uniform_states(n: usize, k: usize) -> Vec<SelectionState> {
        let bank = ThoughtBank::init_orthogonal(k, 8, 0.02, 0).unwrap();
        (0..n)
            .map(|_| thought_bank::from_weights(thought_bank::uniform_weights(k), &bank))
            .collect()
    }

    #[test]
    fn combined_loss_cases() {
        let logits =
            Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let targets = [Some(1), None, Some(3)];
        let ce = mean_ce(&logits, &targets).unwrap();
        let sel = uniform_states(3, 8);
        assert_eq!(combined_loss(&logits, &targets, &sel, 0.0).unwrap(), ce);
        let l = combined_loss(&logits, &targets, &sel, 0.1).unwrap();
        assert!((l - ce - 0.1 * 8f64.ln()).abs() < 1e-12);
        assert!((0.1 * 8f64.ln() - 0.20794).abs() < 1e-5);
        let bank = ThoughtBank::init_orthogonal(8, 8, 0.02, 0).unwrap();
        let mut onehot = vec![0.0; 8];
        onehot[2] = 1.0;
        let sel: Vec<_> = (0..3)
            .map(|_| thought_bank::from_weights(onehot.clone(), &bank))
            .collect();
        assert_eq!(combined_loss(&logits, &targets, &sel, 0.1).unwrap(), ce);
        assert!(matches!(
            combined_loss(&logits, &[None, None, None], &sel, 0.1),
            Err(TrainError::EmptySpan)
        ));
    }

    #[test]
    fn lambda_ramp() {
        let cfg = TrainConfig::default();
        assert_eq!(lambda_schedule(0, &cfg), 0.0);
        assert_eq!(lambda_schedule(100, &cfg), 0.1);
        assert!((lambda_schedule(50, &cfg) - 0.05).abs() < 1e-15);
        assert_eq!(lambda_schedule(900, &cfg), 0.1);
    }

    #[test]
    fn clipping_cases() {
        let mut g = vec![vec![0.3, 0.4]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 0.5);
        assert_eq!(g, vec![vec![0.3, 0.4]]);
        let mut g = vec![vec![2.0, 0.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 2.0);
        assert_eq!(g, vec![vec![1.0, 0.0]]);
        let mut g = vec![vec![0.0; 3], vec![0.0]];
        clip_global_norm(&mut g, 1.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn adamw_cases() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut p, mut m, mut v) = (vec![0.0], vec![0.0], vec![0.0]);
        adamw_step(&mut p, &[1.0], &mut m, &mut v, 1, &cfg);
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);

        let mut p = vec![0.7, -1.3];
        let before = p.clone();
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(p, before);

        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 2, &cfg);
        for (a, b) in p.iter().zip(&before) {
            assert!((a - b * (1.0 - 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_rejects_mismatched_state() {
        let cfg = ModelConfig::toy(taskgen::Vocab::standard().len());
        let mut p = ModelParams::init(&cfg, 0).unwrap();
        let mut other = cfg.clone();
        other.k_thoughts = 3;
        let mut st = OptimizerState::new(&ModelParams::init(&other, 0).unwrap());
        assert!(matches!(
            adamw_update(&mut p, &mut st, &TrainConfig::default()),
            Err(TrainError::StateMismatch { .. })
        ));
    }

    #[test]
    fn answer_target_mask() {
        let t = answer_targets(&[5, 6, 7, 8, 9], 2);
        assert_eq!(t, vec![None, Some(7), Some(8), Some(9), None]);
    }

    fn tiny_run(lambda: f64, steps: u64) -> (TrainState, TrainLog) {
        let vocab = taskgen::Vocab::standard();
        let mut mcfg = ModelConfig::toy(vocab.len());
        mcfg.max_seq = 128;
        let tcfg = TrainConfig {
            total_steps: steps,
            warmup_steps: steps.min(2),
            accum_steps: 2,
            lambda,
            seed: 3,
            ..Default::default()
        };
        let data = taskgen::build_dataset(12, 1).unwrap();
        let mut st = TrainState::new(ModelParams::init(&mcfg, 1).unwrap());
        let setup = TrainSetup {
            model: &mcfg,
            train: &tcfg,
            vocab: &vocab,
            interventions: Interventions::default(),
        };
        let log = train(&data, &mut st, &setup, steps, |_| {}).unwrap();
        (st, log)
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let vocab = taskgen::Vocab::standard();
        let mcfg = ModelConfig::toy(vocab.len());
        let (st, log) = tiny_run(0.1, 0);
        assert!(log.steps.is_empty());
        assert_eq!(
            st.params,
            ModelParams::init(
                &ModelConfig {
                    max_seq: 128,
                    ..mcfg
                },
                1
            )
            .unwrap()
        );
    }

    #[test]
    fn runs_are_deterministic_and_clipped() {
        let (a, la) = tiny_run(0.1, 4);
        let (b, lb) = tiny_run(0.1, 4);
        assert_eq!(la.steps, lb.steps);
        assert_eq!(a.params, b.params);
        assert_eq!(la.steps.len(), 4);
        assert_eq!(la.micro_rewards.len(), 8);
        assert_eq!(la.steps[0].lambda, 0.0);
        assert_eq!(a.step(), 4);
        assert!(grad_norm(&a.params) <= 1.0 + 1e-9);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let vocab = taskgen::Vocab::standard();
        let mut mcfg = ModelConfig::toy(vocab.len());
        mcfg.max_seq = 128;
        let tcfg = TrainConfig {
            total_steps: 6,
            warmup_steps: 2,
            accum_steps: 2,
            seed: 3,
            ..Default::default()
        };
        let data = taskgen::build_dataset(5, 1).unwrap();
        let setup = TrainSetup {
            model: &mcfg,
            train: &tcfg,
            vocab: &vocab,
            interventions: Interventions::default(),
        };
        let init = ModelParams::init(&mcfg, 1).unwrap();
        let mut full = TrainState::new(init.clone());
        let all = train(&data, &mut full, &setup, 6, |_| {}).unwrap();
        let mut part = TrainState::new(init);
        let first = train(&data, &mut part, &setup, 3, |_| {}).unwrap();
        let rest = train(&data, &mut part, &setup, 6, |_| {}).unwrap();
        assert_eq!(&all.steps[..3], &first.steps[..]);
        assert_eq!(&all.steps[3..], &rest.steps[..]);
        assert_eq!(full, part);
    }

    #[test]
    fn empty_dataset_rejected() {
        let vocab = taskgen::Vocab::standard();
        let mcfg = ModelConfig::toy(vocab.len());
        let tcfg = TrainConfig::default();
        let setup = TrainSetup {
            model: &mcfg,
            train: &tcfg,
            vocab: &vocab,
            interventions: Interventions::default(),
        };
        let mut st = TrainState::new(ModelParams::init(&mcfg, 1).unwrap());
        assert!(matches!(
            train(&[], &mut st, &setup, 1, |_| {}),
            Err(TrainError::EmptyDataset)
        ));
    }
}
