use thoughtctl::control_encoder::ControlSignal;
use thoughtctl::model::{self, Interventions, ModelConfig, ModelParams};
use thoughtctl::numerics::Tape;
use thoughtctl::taskgen::Vocab;
use thoughtctl::training::{self, answer_targets};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

struct Case {
    cfg: ModelConfig,
    tokens: Vec<usize>,
    targets: Vec<Option<usize>>,
    control: ControlSignal,
    lambda: f64,
}

fn loss(case: &Case, params: &ModelParams) -> f64 {
    let mut tape = Tape::new();
    let rec = model::record_forward(
        &mut tape,
        params,
        &case.cfg,
        &case.tokens,
        &case.control,
        Interventions::default(),
        None,
    )
    .unwrap();
    let lv = training::record_loss(&mut tape, &rec, &case.targets, case.lambda).unwrap();
    tape.value(lv.loss).data()[0]
}

fn analytic(case: &Case, params: &ModelParams) -> ModelParams {
    let mut tape = Tape::new();
    let rec = model::record_forward(
        &mut tape,
        params,
        &case.cfg,
        &case.tokens,
        &case.control,
        Interventions::default(),
        None,
    )
    .unwrap();
    let lv = training::record_loss(&mut tape, &rec, &case.targets, case.lambda).unwrap();
    tape.backward(lv.loss).unwrap();
    let mut out = params.clone();
    out.zero_grads();
    out.accumulate_grads(&rec.params, &tape, 1.0);
    out
}

fn toy_case(seed: u64) -> (Case, ModelParams) {
    let vocab = Vocab::standard();
    let cfg = ModelConfig::toy(vocab.len());
    let mut params = ModelParams::init(&cfg, seed).unwrap();
    // Push the gate and the selection away from their flat starting point so
    // every branch carries signal.
    params.bank.gate_bias.data_mut()[0] = 0.3;
    params
        .bank
        .query_proj
        .data_mut()
        .iter_mut()
        .for_each(|w| *w *= 40.0);
    params.blocks.iter_mut().for_each(|b| {
        b.w_qkv.data_mut().iter_mut().for_each(|w| *w *= 20.0);
        b.w_o.data_mut().iter_mut().for_each(|w| *w *= 20.0);
    });
    let tokens = vocab.tokenize("31+7=?38\nis 38.").unwrap();
    let targets = answer_targets(&tokens, 6);
    let case = Case {
        cfg,
        tokens,
        targets,
        control: ControlSignal::new(3, 4, 1).unwrap(),
        lambda: 0.1,
    };
    (case, params)
}

/// Group name: `blocks.0.w_qkv` → `blocks.w_qkv`, `bank.vectors` stays.
fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    if parts[0] == "blocks" {
        format!("blocks.{}", parts[2])
    } else {
        name.to_string()
    }
}

fn set_coord(p: &mut ModelParams, leaf: usize, j: usize, value: f64) {
    let mut k = 0;
    p.visit_mut(&mut |_, t| {
        if k == leaf {
            t.data_mut()[j] = value;
        }
        k += 1;
    });
}

pub struct GroupError {
    pub group: String,
    pub norm: f64,
    pub rel: f64,
}

/// Per-group relative error `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`
/// with the max taken coordinate-wise, sorted by group name.
pub fn run(seed: u64) -> (usize, Vec<GroupError>) {
    let (case, params) = toy_case(seed);
    let grads = analytic(&case, &params);
    let analytic_flat: Vec<(String, Vec<f64>)> = grads
        .leaves()
        .into_iter()
        .map(|(n, t)| (n, t.grad().expect("grad buffer").to_vec()))
        .collect();

    let mut per_group: std::collections::BTreeMap<String, (f64, f64)> = Default::default();
    let mut probe = params.clone();
    let names: Vec<String> = params.leaves().into_iter().map(|(n, _)| n).collect();
    for (li, name) in names.iter().enumerate() {
        let n = analytic_flat[li].1.len();
        for j in 0..n {
            let base = params.leaves()[li].1.data()[j];
            set_coord(&mut probe, li, j, base + STEP);
            let up = loss(&case, &probe);
            set_coord(&mut probe, li, j, base - STEP);
            let down = loss(&case, &probe);
            set_coord(&mut probe, li, j, base);
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic_flat[li].1[j];
            let e = per_group.entry(group_of(name)).or_default();
            e.0 += (a - numeric).powi(2);
            e.1 += a.powi(2).max(numeric.powi(2));
        }
    }
    let groups = per_group
        .into_iter()
        .map(|(group, (diff, scale))| GroupError {
            group,
            norm: scale.sqrt(),
            rel: diff.sqrt() / scale.sqrt().max(1e-12),
        })
        .collect();
    (case.tokens.len(), groups)
}
