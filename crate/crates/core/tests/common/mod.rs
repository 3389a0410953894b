//! Finite-difference gradient checks shared by several test targets.

use modecast::autodiff::gradcheck::{max_relative_error, numeric_gradients};
use modecast::autodiff::{Tape, Tensor, Var};
use modecast::forecaster::{ForecastModel, ForecasterConfig, Mode, NormKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const FLOOR: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 10;

pub type OpFn = dyn Fn(&mut Tape, &[Var]) -> Var;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Projects the op output on fixed random weights so every output element
/// contributes to the scalar.
fn projected(tape: &mut Tape, out: Var, probe: &Tensor) -> Var {
    let p = tape.constant(probe.clone().reshaped(tape.shape(out).to_vec()).unwrap());
    let y = tape.mul(out, p).unwrap();
    tape.sum_all(y).unwrap()
}

pub fn check_op(name: &str, op: &OpFn, inputs: &[Tensor], probe_seed: u64) -> f64 {
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars);
        tape.value(out).len()
    };
    let probe = random(
        &mut ChaCha8Rng::seed_from_u64(probe_seed),
        &[out_len],
        -1.0,
        1.0,
    );

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = op(&mut tape, &vars);
    let loss = projected(&mut tape, out, &probe);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.get(*v).unwrap().clone())
        .collect();

    let numeric = numeric_gradients(
        |xs| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = op(&mut tape, &vars);
            let loss = projected(&mut tape, out, &probe);
            tape.value(loss).item().unwrap()
        },
        inputs,
        H,
    );
    let _ = name;
    max_relative_error(&analytic, &numeric, FLOOR)
}

/// Input shapes and value ranges for each op, plus the op itself.
pub fn op_cases() -> Vec<(&'static str, Vec<(Vec<usize>, f64, f64)>, Box<OpFn>)> {
    let any = |s: &[usize]| (s.to_vec(), -2.0, 2.0);
    let pos = |s: &[usize]| (s.to_vec(), 0.5, 2.0);
    vec![
        (
            "add",
            vec![any(&[3, 4]), any(&[3, 4])],
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            vec![any(&[3, 4]), any(&[3, 4])],
            Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![any(&[3, 4]), any(&[3, 4])],
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        ),
        (
            "div",
            vec![any(&[3, 4]), pos(&[3, 4])],
            Box::new(|t, v| t.div(v[0], v[1]).unwrap()),
        ),
        (
            "add_row",
            vec![any(&[2, 3, 4]), any(&[4])],
            Box::new(|t, v| t.add_row(v[0], v[1]).unwrap()),
        ),
        (
            "matmul",
            vec![any(&[3, 5]), any(&[5, 2])],
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "bmm",
            vec![any(&[2, 3, 4]), any(&[2, 4, 5])],
            Box::new(|t, v| t.bmm(v[0], v[1]).unwrap()),
        ),
        (
            "transpose",
            vec![any(&[2, 3, 4])],
            Box::new(|t, v| t.transpose(v[0]).unwrap()),
        ),
        (
            "reshape",
            vec![any(&[2, 6])],
            Box::new(|t, v| t.reshape(v[0], &[3, 4]).unwrap()),
        ),
        (
            "slice",
            vec![any(&[3, 5, 2])],
            Box::new(|t, v| t.slice(v[0], 1, 1, 4).unwrap()),
        ),
        (
            "concat",
            vec![any(&[2, 3]), any(&[2, 1]), any(&[2, 2])],
            Box::new(|t, v| t.concat(&[v[0], v[1], v[2]], 1).unwrap()),
        ),
        (
            "sum",
            vec![any(&[3, 4, 2])],
            Box::new(|t, v| t.sum(v[0], 1).unwrap()),
        ),
        (
            "mean",
            vec![any(&[3, 4, 2])],
            Box::new(|t, v| t.mean(v[0], 0).unwrap()),
        ),
        (
            "sum_all",
            vec![any(&[3, 4])],
            Box::new(|t, v| t.sum_all(v[0]).unwrap()),
        ),
        (
            "mean_all",
            vec![any(&[3, 4])],
            Box::new(|t, v| t.mean_all(v[0]).unwrap()),
        ),
        (
            "softmax_last",
            vec![any(&[2, 3, 4])],
            Box::new(|t, v| t.softmax(v[0], 2).unwrap()),
        ),
        (
            "softmax_mid",
            vec![any(&[2, 3, 4])],
            Box::new(|t, v| t.softmax(v[0], 1).unwrap()),
        ),
        (
            "relu",
            vec![any(&[4, 5])],
            Box::new(|t, v| t.relu(v[0]).unwrap()),
        ),
        (
            "gelu",
            vec![any(&[4, 5])],
            Box::new(|t, v| t.gelu(v[0]).unwrap()),
        ),
        (
            "sqrt",
            vec![pos(&[4, 5])],
            Box::new(|t, v| t.sqrt(v[0]).unwrap()),
        ),
        (
            "exp",
            vec![any(&[4, 5])],
            Box::new(|t, v| t.exp(v[0]).unwrap()),
        ),
        (
            "scale",
            vec![any(&[4, 5])],
            Box::new(|t, v| t.scale(v[0], -1.7).unwrap()),
        ),
        (
            "add_scalar",
            vec![any(&[4, 5])],
            Box::new(|t, v| t.add_scalar(v[0], 0.3).unwrap()),
        ),
        (
            "div_scalar",
            vec![any(&[4, 5]), pos(&[1])],
            Box::new(|t, v| t.div_scalar(v[0], v[1]).unwrap()),
        ),
        (
            "batch_norm",
            vec![any(&[6, 4]), pos(&[4]), any(&[4])],
            Box::new(|t, v| t.batch_norm(v[0], v[1], v[2], 1e-5).unwrap().0),
        ),
        (
            "batch_norm_eval",
            vec![any(&[6, 4]), pos(&[4]), any(&[4])],
            Box::new(|t, v| {
                t.batch_norm_eval(
                    v[0],
                    v[1],
                    v[2],
                    &[0.1, -0.2, 0.3, 0.0],
                    &[1.5, 0.5, 2.0, 1.0],
                    1e-5,
                )
                .unwrap()
            }),
        ),
        (
            "layer_norm",
            vec![any(&[5, 4]), pos(&[4]), any(&[4])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        (
            "mse",
            vec![any(&[3, 4]), any(&[3, 4])],
            Box::new(|t, v| t.mse(v[0], v[1]).unwrap()),
        ),
    ]
}

/// Random inputs for op case `specs` under `seed`.
pub fn op_inputs(name: &str, specs: &[(Vec<usize>, f64, f64)], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 131 + 7);
    specs
        .iter()
        .map(|(shape, lo, hi)| {
            let mut t = random(&mut rng, shape, *lo, *hi);
            if name == "relu" {
                // Keep samples off the kink.
                for x in t.data_mut() {
                    if x.abs() < 0.05 {
                        *x += 0.1;
                    }
                }
            }
            t
        })
        .collect()
}

pub fn tiny_config(norm: NormKind) -> ForecasterConfig {
    ForecasterConfig {
        lookback: 8,
        horizon: 2,
        patch_len: 4,
        stride: 2,
        d_model: 4,
        n_heads: 2,
        n_layers: 1,
        d_ff: 8,
        norm,
        dropout: 0.0,
    }
}

pub fn check_model(norm: NormKind, seed: u64) -> f64 {
    let model = ForecastModel::new(tiny_config(norm), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let batch = 3;
    let windows: Vec<f64> = (0..batch * 8)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let targets: Vec<f64> = (0..batch * 2)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();

    let step = model.loss_and_grads(&windows, &targets, batch).unwrap();
    let values: Vec<Tensor> = model.parameters().iter().map(|p| p.value.clone()).collect();
    let numeric = numeric_gradients(
        |xs| {
            let mut m = model.clone();
            m.set_parameter_values(xs.to_vec()).unwrap();
            m.loss(&windows, &targets, batch, Mode::Train).unwrap()
        },
        &values,
        H,
    );
    max_relative_error(&step.grads, &numeric, FLOOR)
}
