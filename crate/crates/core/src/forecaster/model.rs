//! The patch attention network for a single channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ForecasterConfig, NormKind};
use super::prep::{patch_rows, InstanceStats};
use crate::autodiff::{BatchStats, Checkpoint, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;
const RUNNING_MOMENTUM: f64 = 0.1;
const CHECKPOINT_KIND: &str = "modecast-forecaster";

/// Indices into the flat parameter list for one encoder layer.
#[derive(Debug, Clone)]
struct LayerSlots {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    norm1: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
    norm2: (usize, usize),
}

#[derive(Debug, Clone)]
struct Slots {
    w_p: usize,
    w_pos: usize,
    layers: Vec<LayerSlots>,
    head_w: usize,
    head_b: usize,
}

/// Exponential moving averages of batch-norm statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// Blends in one batch; the batch variance is made unbiased first.
    fn update(&mut self, batch: &BatchStats, rows: usize) {
        let correction = if rows > 1 {
            rows as f64 / (rows - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * b * correction;
        }
    }
}

/// Whether the forward pass uses batch statistics (training) or the
/// running statistics (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output of a recorded forward pass.
pub(crate) struct Forward {
    /// `[batch, horizon]` predictions in the input scale.
    pub pred: Var,
    /// Per layer and head, `[batch, N, N]` attention weights.
    pub attention: Vec<Vec<Var>>,
    /// Batch statistics of every batch-norm layer (training mode only).
    pub batch_stats: Vec<BatchStats>,
}

/// Loss, parameter gradients and batch statistics of one minibatch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub batch_stats: Vec<BatchStats>,
    pub rows: usize,
}

/// One channel's forecaster: patch embedding, a stack of encoder layers and
/// a flatten-linear head, wrapped in per-window instance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    config: ForecasterConfig,
    params: Vec<Parameter>,
    running: Vec<RunningStats>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

fn build_slots(
    config: &ForecasterConfig,
    mut add: impl FnMut(String, Vec<usize>, Init) -> usize,
) -> Slots {
    let (d, p, n, t, ff) = (
        config.d_model,
        config.patch_len,
        config.n_patches(),
        config.horizon,
        config.d_ff,
    );
    let w_p = add("embed.w_p".into(), vec![d, p], Init::Uniform { fan_in: p });
    let w_pos = add(
        "embed.w_pos".into(),
        vec![d, n],
        Init::Uniform { fan_in: d },
    );
    let layers = (0..config.n_layers)
        .map(|l| {
            let name = |s: &str| format!("layers.{l}.{s}");
            LayerSlots {
                wq: add(name("attn.wq"), vec![d, d], Init::Uniform { fan_in: d }),
                wk: add(name("attn.wk"), vec![d, d], Init::Uniform { fan_in: d }),
                wv: add(name("attn.wv"), vec![d, d], Init::Uniform { fan_in: d }),
                wo: add(name("attn.wo"), vec![d, d], Init::Uniform { fan_in: d }),
                bo: add(name("attn.bo"), vec![d], Init::Uniform { fan_in: d }),
                norm1: (
                    add(name("norm1.gamma"), vec![d], Init::Ones),
                    add(name("norm1.beta"), vec![d], Init::Zeros),
                ),
                ff1: (
                    add(name("ff.w1"), vec![d, ff], Init::Uniform { fan_in: d }),
                    add(name("ff.b1"), vec![ff], Init::Uniform { fan_in: d }),
                ),
                ff2: (
                    add(name("ff.w2"), vec![ff, d], Init::Uniform { fan_in: ff }),
                    add(name("ff.b2"), vec![d], Init::Uniform { fan_in: ff }),
                ),
                norm2: (
                    add(name("norm2.gamma"), vec![d], Init::Ones),
                    add(name("norm2.beta"), vec![d], Init::Zeros),
                ),
            }
        })
        .collect();
    let head_w = add(
        "head.w".into(),
        vec![t, n * d],
        Init::Uniform { fan_in: n * d },
    );
    let head_b = add("head.b".into(), vec![t], Init::Uniform { fan_in: n * d });
    Slots {
        w_p,
        w_pos,
        layers,
        head_w,
        head_b,
    }
}

impl ForecastModel {
    /// Builds a model with weights drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// norm scales at 1 and norm shifts at 0.
    pub fn new(config: ForecasterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        build_slots(&config, |name, shape, init| {
            let len: usize = shape.iter().product();
            let data = match init {
                Init::Ones => vec![1.0; len],
                Init::Zeros => vec![0.0; len],
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            params.push(Parameter::new(
                name,
                Tensor::new(shape, data).expect("shape matches"),
            ));
            params.len() - 1
        });
        let running = Self::fresh_running(&config);
        Ok(Self {
            config,
            params,
            running,
        })
    }

    fn fresh_running(config: &ForecasterConfig) -> Vec<RunningStats> {
        match config.norm {
            NormKind::Batch => (0..2 * config.n_layers)
                .map(|_| RunningStats::new(config.d_model))
                .collect(),
            NormKind::Layer => Vec::new(),
        }
    }

    fn slots(&self) -> Slots {
        let mut next = 0;
        build_slots(&self.config, |_, _, _| {
            next += 1;
            next - 1
        })
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    /// Replaces every parameter value, in [`parameters`](Self::parameters) order.
    pub fn set_parameter_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(
                    "set_parameter_values",
                    p.value.shape(),
                    v.shape(),
                ));
            }
            p.value = v;
        }
        Ok(())
    }

    /// Zeroes the output head so every forecast equals the window mean.
    pub fn zero_head(&mut self) {
        let s = self.slots();
        self.params[s.head_w].value.fill(0.0);
        self.params[s.head_b].value.fill(0.0);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats], rows: usize) {
        for (r, b) in self.running.iter_mut().zip(stats) {
            r.update(b, rows);
        }
    }

    fn check_windows(&self, windows: &[f64], batch: usize) -> Result<()> {
        let l = self.config.lookback;
        if batch == 0 || windows.len() != batch * l {
            return Err(Error::LengthMismatch {
                left: windows.len(),
                right: batch * l,
            });
        }
        if let Some(index) = windows.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    /// Records the forward pass of `batch` windows (`[batch, L]`, row-major)
    /// on `tape`, with parameters already bound as `vars`.
    pub(crate) fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        windows: &[f64],
        batch: usize,
        mode: Mode,
    ) -> Result<Forward> {
        self.check_windows(windows, batch)?;
        let c = &self.config;
        let (l, p, s, d, t, n) = (
            c.lookback,
            c.patch_len,
            c.stride,
            c.d_model,
            c.horizon,
            c.n_patches(),
        );
        let slots = self.slots();

        let mut stats = Vec::with_capacity(batch);
        let mut patches = Vec::with_capacity(batch * n * p);
        let mut normalized = vec![0.0; l];
        for w in windows.chunks_exact(l) {
            let st = InstanceStats::of(w);
            for (o, x) in normalized.iter_mut().zip(w) {
                *o = (x - st.mean) / st.std;
            }
            patch_rows(&normalized, p, s, &mut patches);
            stats.push(st);
        }
        let patches = tape.constant(Tensor::new([batch * n, p], patches)?);

        // Embedding: tokens are rows of x, [batch * N, D].
        let w_p_t = tape.transpose(vars[slots.w_p])?;
        let x = tape.matmul(patches, w_p_t)?;
        let pos = tape.transpose(vars[slots.w_pos])?;
        let pos = tape.reshape(pos, &[n * d])?;
        let x = tape.reshape(x, &[batch, n * d])?;
        let x = tape.add_row(x, pos)?;
        let mut x = tape.reshape(x, &[batch * n, d])?;

        let mut attention = Vec::with_capacity(c.n_layers);
        let mut batch_stats = Vec::new();
        for (li, layer) in slots.layers.iter().enumerate() {
            let (z, attn) = self.attention_block(tape, vars, layer, x, batch)?;
            let z = tape.add(x, z)?;
            let z = self.norm(tape, vars, layer.norm1, z, 2 * li, mode, &mut batch_stats)?;
            let h = tape.matmul(z, vars[layer.ff1.0])?;
            let h = tape.add_row(h, vars[layer.ff1.1])?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, vars[layer.ff2.0])?;
            let h = tape.add_row(h, vars[layer.ff2.1])?;
            let y = tape.add(z, h)?;
            x = self.norm(
                tape,
                vars,
                layer.norm2,
                y,
                2 * li + 1,
                mode,
                &mut batch_stats,
            )?;
            attention.push(attn);
        }

        let flat = tape.reshape(x, &[batch, n * d])?;
        let head_t = tape.transpose(vars[slots.head_w])?;
        let out = tape.matmul(flat, head_t)?;
        let out = tape.add_row(out, vars[slots.head_b])?;

        let std = tape.constant(Tensor::new(
            [batch, t],
            stats
                .iter()
                .flat_map(|st| std::iter::repeat_n(st.std, t))
                .collect(),
        )?);
        let mean = tape.constant(Tensor::new(
            [batch, t],
            stats
                .iter()
                .flat_map(|st| std::iter::repeat_n(st.mean, t))
                .collect(),
        )?);
        let out = tape.mul(out, std)?;
        let pred = tape.add(out, mean)?;
        Ok(Forward {
            pred,
            attention,
            batch_stats,
        })
    }

    fn attention_block(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        layer: &LayerSlots,
        x: Var,
        batch: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let c = &self.config;
        let (n, dk) = (c.n_patches(), c.head_dim());
        let q = tape.matmul(x, vars[layer.wq])?;
        let k = tape.matmul(x, vars[layer.wk])?;
        let v = tape.matmul(x, vars[layer.wv])?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(c.n_heads);
        let mut maps = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let split = |tape: &mut Tape, m: Var| -> Result<Var> {
                let part = tape.slice(m, 1, h * dk, (h + 1) * dk)?;
                tape.reshape(part, &[batch, n, dk])
            };
            let qh = split(tape, q)?;
            let kh = split(tape, k)?;
            let vh = split(tape, v)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.bmm(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let a = tape.softmax(scores, 2)?;
            let o = tape.bmm(a, vh)?;
            heads.push(tape.reshape(o, &[batch * n, dk])?);
            maps.push(a);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let out = tape.matmul(cat, vars[layer.wo])?;
        let out = tape.add_row(out, vars[layer.bo])?;
        Ok((out, maps))
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        (gamma, beta): (usize, usize),
        x: Var,
        index: usize,
        mode: Mode,
        batch_stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let (g, b) = (vars[gamma], vars[beta]);
        match (self.config.norm, mode) {
            (NormKind::Layer, _) => tape.layer_norm(x, g, b, NORM_EPS),
            (NormKind::Batch, Mode::Train) => {
                let (y, st) = tape.batch_norm(x, g, b, NORM_EPS)?;
                batch_stats.push(st);
                Ok(y)
            }
            (NormKind::Batch, Mode::Eval) => {
                let r = &self.running[index];
                tape.batch_norm_eval(x, g, b, &r.mean, &r.var, NORM_EPS)
            }
        }
    }

    /// Binds every parameter to `tape`.
    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Training-mode MSE on a minibatch plus gradients for every parameter.
    pub fn loss_and_grads(
        &self,
        windows: &[f64],
        targets: &[f64],
        batch: usize,
    ) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let fwd = self.forward_on(&mut tape, &vars, windows, batch, Mode::Train)?;
        let target = self.target_var(&mut tape, targets, batch)?;
        let loss = tape.mse(fwd.pred, target)?;
        let loss_value = tape.value(loss).item().expect("scalar loss");
        if !loss_value.is_finite() {
            return Err(Error::Diverged(format!("training loss is {loss_value}")));
        }
        let mut g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|v| g.take(*v).expect("every parameter is a trainable leaf"))
            .collect();
        Ok(StepOutput {
            loss: loss_value,
            grads,
            batch_stats: fwd.batch_stats,
            rows: batch * self.config.n_patches(),
        })
    }

    /// Loss value only, in the given mode. Running statistics are untouched.
    pub fn loss(&self, windows: &[f64], targets: &[f64], batch: usize, mode: Mode) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let fwd = self.forward_on(&mut tape, &vars, windows, batch, mode)?;
        let target = self.target_var(&mut tape, targets, batch)?;
        let loss = tape.mse(fwd.pred, target)?;
        Ok(tape.value(loss).item().expect("scalar loss"))
    }

    fn target_var(&self, tape: &mut Tape, targets: &[f64], batch: usize) -> Result<Var> {
        let t = self.config.horizon;
        if targets.len() != batch * t {
            return Err(Error::LengthMismatch {
                left: targets.len(),
                right: batch * t,
            });
        }
        Ok(tape.constant(Tensor::new([batch, t], targets.to_vec())?))
    }

    /// Inference on `batch` windows laid out row-major; returns
    /// `batch * horizon` values.
    pub fn predict_batch(&self, windows: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let fwd = self.forward_on(&mut tape, &vars, windows, batch, Mode::Eval)?;
        Ok(tape.value(fwd.pred).data().to_vec())
    }

    /// Forecast of the next `horizon` values after one lookback window.
    pub fn predict(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.config.lookback {
            return Err(Error::LengthMismatch {
                left: window.len(),
                right: self.config.lookback,
            });
        }
        self.predict_batch(window, 1)
    }

    /// Forecast plus the `[N, N]` attention map of every layer and head.
    pub fn predict_with_attention(&self, window: &[f64]) -> Result<(Vec<f64>, Vec<Vec<Tensor>>)> {
        if window.len() != self.config.lookback {
            return Err(Error::LengthMismatch {
                left: window.len(),
                right: self.config.lookback,
            });
        }
        let n = self.config.n_patches();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let fwd = self.forward_on(&mut tape, &vars, window, 1, Mode::Eval)?;
        let maps = fwd
            .attention
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|a| tape.value(*a).clone().reshaped([n, n]))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((tape.value(fwd.pred).data().to_vec(), maps))
    }

    /// Applies encoder layer `layer` (inference mode) to an embedded patch
    /// sequence `x: [D, N]`, returning `[D, N]`.
    pub fn encode_layer(&self, layer: usize, x: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let n = c.n_patches();
        if layer >= c.n_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range (model has {})",
                c.n_layers
            )));
        }
        if x.shape() != [c.d_model, n] {
            return Err(Error::shape("encode_layer", x.shape(), &[c.d_model, n]));
        }
        let slots = self.slots();
        let ls = &slots.layers[layer];
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x.transposed()?);
        let (z, _) = self.attention_block(&mut tape, &vars, ls, x, 1)?;
        let z = tape.add(x, z)?;
        let mut unused = Vec::new();
        let z = self.norm(
            &mut tape,
            &vars,
            ls.norm1,
            z,
            2 * layer,
            Mode::Eval,
            &mut unused,
        )?;
        let h = tape.matmul(z, vars[ls.ff1.0])?;
        let h = tape.add_row(h, vars[ls.ff1.1])?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, vars[ls.ff2.0])?;
        let h = tape.add_row(h, vars[ls.ff2.1])?;
        let y = tape.add(z, h)?;
        let y = self.norm(
            &mut tape,
            &vars,
            ls.norm2,
            y,
            2 * layer + 1,
            Mode::Eval,
            &mut unused,
        )?;
        tape.value(y).transposed()
    }

    /// Parameters and running statistics as a checkpoint.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (i, r) in self.running.iter().enumerate() {
            let (layer, which) = (i / 2, i % 2 + 1);
            tensors.push((
                format!("layers.{layer}.norm{which}.running_mean"),
                Tensor::vector(r.mean.clone()),
            ));
            tensors.push((
                format!("layers.{layer}.norm{which}.running_var"),
                Tensor::vector(r.var.clone()),
            ));
        }
        Ok(Checkpoint {
            metadata: serde_json::json!({
                "kind": CHECKPOINT_KIND,
                "config": serde_json::to_value(&self.config)?,
                "extra": extra,
            }),
            tensors,
        })
    }

    /// Rebuilds a model from [`to_checkpoint`](Self::to_checkpoint) output.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.metadata.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint("not a forecaster checkpoint".into()));
        }
        let config: ForecasterConfig = serde_json::from_value(
            ckpt.metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing config".into()))?,
        )?;
        let mut model = Self::new(config, 0)?;
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = ckpt
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        for p in &mut model.params {
            p.value = fetch(&p.name, p.value.shape())?;
        }
        let d = model.config.d_model;
        for (i, r) in model.running.iter_mut().enumerate() {
            let (layer, which) = (i / 2, i % 2 + 1);
            r.mean = fetch(&format!("layers.{layer}.norm{which}.running_mean"), &[d])?.into_data();
            r.var = fetch(&format!("layers.{layer}.norm{which}.running_var"), &[d])?.into_data();
        }
        Ok(model)
    }
}
