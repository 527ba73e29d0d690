//! Finite-difference verification of the analytic gradients, at 64-bit.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{attention_scores, pool_descriptors};
use crate::birnn::{bidirectional_pass, lstm_cell, LstmVars};
use crate::config::{BranchSpec, ModelConfig};
use crate::error::Result;
use crate::graph::{Graph, OpKind, Var};
use crate::head::classify;
use crate::kbranch::{branch_forward, fuse_descriptors, BranchVars};
use crate::model::{Model, ParamRole};
use crate::tensor::Tensor;
use crate::train::init::xavier_init;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// A check passes when every relative error is below this.
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound on the denominator of the relative error, so that gradients
/// that are zero up to rounding do not divide by ~0.
pub const DENOM_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, DENOM_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// One entry per model parameter.
    pub params: Vec<CheckEntry>,
    /// One entry per isolated module check.
    pub modules: Vec<CheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().chain(&self.modules).map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().chain(&self.modules).all(|e| e.max_rel_error < TOLERANCE)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = |title: &str, entries: &[CheckEntry]| {
            let _ = writeln!(s, "{title}");
            for e in entries {
                let mark = if e.max_rel_error < TOLERANCE { "ok  " } else { "FAIL" };
                let _ = writeln!(s, "  {mark} {:<28} n={:<5} rel={:.3e} abs={:.3e}", e.name, e.numel, e.max_rel_error, e.max_abs_error);
            }
        };
        section("parameters", &self.params);
        section("modules", &self.modules);
        let _ = writeln!(s, "max_rel_error={:e}", self.max_rel_error());
        let _ = writeln!(s, "tolerance={TOLERANCE:e}");
        let _ = writeln!(s, "result={}", if self.passed() { "pass" } else { "fail" });
        s
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

struct Accum {
    max_rel: f64,
    max_abs: f64,
}

impl Accum {
    fn new() -> Self {
        Self { max_rel: 0.0, max_abs: 0.0 }
    }

    fn add(&mut self, analytic: f64, numeric: f64) {
        self.max_rel = self.max_rel.max(relative_error(analytic, numeric));
        self.max_abs = self.max_abs.max((analytic - numeric).abs());
    }

    fn entry(self, name: &str, numel: usize) -> CheckEntry {
        CheckEntry { name: name.to_string(), numel, max_rel_error: self.max_rel, max_abs_error: self.max_abs }
    }
}

/// Checks the full-model loss gradient against central differences for every
/// element of every parameter. `fault` corrupts one backward rule.
pub fn check_model(
    config: ModelConfig,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<Vec<CheckEntry>> {
    let mut model = Model::<f64>::build(config, |name, shape, role| match role {
        ParamRole::Weight => xavier_init(shape, seed, name),
        ParamRole::Bias => {
            let mut rng = crate::train::init::param_rng(seed ^ 0xb1a5, name);
            normal_tensor(&mut rng, shape, 0.1)
        }
    })?;
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subsets: Vec<Tensor<f64>> = cfg
        .branches
        .iter()
        .map(|b| normal_tensor(&mut rng, &[b.channels(), b.height, b.width], 1.0))
        .collect();
    let labels = Tensor::from_vec((0..cfg.classes).map(|c| f64::from(u8::from(c % 2 == 0))).collect());

    let (_, grads) = model.loss_and_grads_with_fault(&subsets, &labels, fault)?;
    let mut out = Vec::with_capacity(grads.len());
    for (i, grad) in grads.iter().enumerate() {
        let mut acc = Accum::new();
        for j in 0..grad.len() {
            let orig = model.params().tensors()[i].data()[j];
            model.params_mut().tensors_mut()[i].data_mut()[j] = orig + STEP;
            let plus = model.loss(&subsets, &labels)?;
            model.params_mut().tensors_mut()[i].data_mut()[j] = orig - STEP;
            let minus = model.loss(&subsets, &labels)?;
            model.params_mut().tensors_mut()[i].data_mut()[j] = orig;
            acc.add(grad.data()[j], (plus - minus) / (2.0 * STEP));
        }
        let name = model.params().iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default();
        out.push(acc.entry(&name, grad.len()));
    }
    Ok(out)
}

/// Checks an arbitrary graph function of `inputs`. Non-scalar outputs are
/// reduced with a fixed random weighting so every output element matters.
pub fn check_function<B>(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, build: B) -> Result<CheckEntry>
where
    B: for<'a> Fn(&mut Graph<'a, f64>, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |xs: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars)?;
        let shape = g.shape(out).to_vec();
        let w = weights
            .get_or_insert_with(|| normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1e), &shape, 1.0))
            .clone();
        let wv = g.constant(w);
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, t)| grads.get(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, gs))
    };

    let (_, grads) = eval(&inputs, true)?;
    let mut acc = Accum::new();
    let mut numel = 0;
    let mut xs = inputs;
    for (i, grad) in grads.iter().enumerate() {
        numel += grad.len();
        for j in 0..grad.len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let (plus, _) = eval(&xs, false)?;
            xs[i].data_mut()[j] = orig - STEP;
            let (minus, _) = eval(&xs, false)?;
            xs[i].data_mut()[j] = orig;
            acc.add(grad.data()[j], (plus - minus) / (2.0 * STEP));
        }
    }
    Ok(acc.entry(name, numel))
}

fn lstm_tensors(rng: &mut ChaCha8Rng, hidden: usize, input: usize) -> Vec<Tensor<f64>> {
    let mut v = Vec::with_capacity(12);
    for _ in 0..4 {
        v.push(normal_tensor(rng, &[hidden, input], 0.5));
    }
    for _ in 0..4 {
        v.push(normal_tensor(rng, &[hidden, hidden], 0.5));
    }
    for _ in 0..4 {
        v.push(normal_tensor(rng, &[hidden], 0.2));
    }
    v
}

fn lstm_vars(v: &[Var]) -> LstmVars {
    LstmVars {
        w: [v[0], v[1], v[2], v[3]],
        u: [v[4], v[5], v[6], v[7]],
        b: [v[8], v[9], v[10], v[11]],
    }
}

/// Inputs for the K-branch CNN plus fusion: per branch a patch batch, the
/// conv kernels/biases and the FC pair; then the fusion pair.
fn kbranch_inputs(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Vec<Tensor<f64>>> {
    let grid = cfg.grid();
    let mut v = Vec::new();
    for b in &cfg.branches {
        v.push(normal_tensor(rng, &[cfg.patches, b.channels(), b.height / grid, b.width / grid], 1.0));
        let mut cin = b.channels();
        for l in &b.layers {
            v.push(normal_tensor(rng, &[l.filters, cin, l.kernel, l.kernel], 0.4));
            v.push(normal_tensor(rng, &[l.filters], 0.1));
            cin = l.filters;
        }
        v.push(normal_tensor(rng, &[b.fc_out, b.fc_in(grid)?], 0.4));
        v.push(normal_tensor(rng, &[b.fc_out], 0.1));
    }
    v.push(normal_tensor(rng, &[cfg.descriptor_width, cfg.fusion_in()], 0.4));
    v.push(normal_tensor(rng, &[cfg.descriptor_width], 0.1));
    Ok(v)
}

fn kbranch_graph(g: &mut Graph<'_, f64>, v: &[Var], branches: &[BranchSpec], fc_relu: bool) -> Result<Var> {
    let mut at = 0;
    let mut outs = Vec::new();
    for spec in branches {
        let x = v[at];
        at += 1;
        let mut convs = Vec::new();
        for _ in &spec.layers {
            convs.push((v[at], v[at + 1]));
            at += 2;
        }
        let vars = BranchVars { convs, fc_weight: v[at], fc_bias: v[at + 1] };
        at += 2;
        outs.push(branch_forward(g, x, spec, &vars, fc_relu)?);
    }
    fuse_descriptors(g, &outs, v[at], v[at + 1])
}

/// Isolated checks of every building block on small random inputs.
pub fn check_modules(seed: u64) -> Result<Vec<CheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize], scale: f64| normal_tensor(&mut rng, shape, scale);
    let mut out = Vec::new();

    out.push(check_function("conv2d 3x3", vec![r(&[2, 6, 6], 1.0), r(&[3, 2, 3, 3], 0.5), r(&[3], 0.2)], seed, |g, v| {
        g.conv2d(v[0], v[1], v[2])
    })?);
    out.push(check_function(
        "conv2d 2x2 batched",
        vec![r(&[2, 2, 5, 5], 1.0), r(&[2, 2, 2, 2], 0.5), r(&[2], 0.2)],
        seed,
        |g, v| g.conv2d(v[0], v[1], v[2]),
    )?);
    out.push(check_function("maxpool2", vec![r(&[2, 5, 5], 1.0)], seed, |g, v| g.maxpool2(v[0]))?);
    out.push(check_function("linear", vec![r(&[4, 5], 1.0), r(&[3, 5], 0.5), r(&[3], 0.2)], seed, |g, v| {
        g.linear(v[0], v[1], v[2])
    })?);
    out.push(check_function("matmul", vec![r(&[3, 4], 1.0), r(&[4, 2], 1.0)], seed, |g, v| g.matmul(v[0], v[1]))?);
    out.push(check_function("activations", vec![r(&[7], 1.0)], seed, |g, v| {
        let a = g.tanh(v[0]);
        let b = g.sigmoid(v[0]);
        let c = g.relu(v[0]);
        let ab = g.mul(a, b)?;
        g.add(ab, c)
    })?);
    out.push(check_function("softmax_rows", vec![r(&[3, 5], 1.0)], seed, |g, v| g.softmax_rows(v[0]))?);

    let mut cell = vec![r(&[4], 1.0), r(&[3], 0.5), r(&[3], 0.5)];
    cell.extend(lstm_tensors(&mut rng, 3, 4));
    out.push(check_function("lstm_cell", cell, seed, |g, v| {
        let (h, c) = lstm_cell(g, v[0], v[1], v[2], &lstm_vars(&v[3..]))?;
        g.concat(&[h, c], 0)
    })?);

    let mut bi = vec![normal_tensor(&mut rng, &[4, 3], 1.0)];
    bi.extend(lstm_tensors(&mut rng, 2, 3));
    bi.extend(lstm_tensors(&mut rng, 2, 3));
    out.push(check_function("bidirectional_pass", bi, seed, |g, v| {
        bidirectional_pass(g, v[0], &[lstm_vars(&v[1..13])], &[lstm_vars(&v[13..25])])
    })?);

    let mut r = |shape: &[usize], scale: f64| normal_tensor(&mut rng, shape, scale);
    out.push(check_function("attention", vec![r(&[6, 4], 1.0), r(&[3, 6], 0.7), r(&[2, 3], 0.7)], seed, |g, v| {
        let a = attention_scores(g, v[0], v[1], v[2])?;
        pool_descriptors(g, v[0], a)
    })?);
    out.push(check_function("classifier", vec![r(&[4, 2], 1.0), r(&[3, 8], 0.5), r(&[3], 0.2)], seed, |g, v| {
        classify(g, v[0], v[1], v[2])
    })?);

    let target = Tensor::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0]);
    let t1 = target.clone();
    out.push(check_function("bce_with_logits", vec![r(&[5], 2.0)], seed, move |g, v| g.bce_with_logits(v[0], &t1))?);
    out.push(check_function("bce_prob", vec![r(&[5], 2.0)], seed, move |g, v| {
        let p = g.sigmoid(v[0]);
        g.bce_prob(p, &target)
    })?);

    let cfg = ModelConfig::shrunken();
    let inputs = kbranch_inputs(&mut rng, &cfg)?;
    let branches = cfg.branches.clone();
    out.push(check_function("kbranch cnn", inputs, seed, move |g, v| {
        kbranch_graph(g, v, &branches, cfg.branch_fc_relu)
    })?);
    Ok(out)
}

/// Full-model and per-module gradient checks for `config` at 64-bit.
pub fn gradcheck(config: ModelConfig, seed: u64) -> Result<GradcheckReport> {
    Ok(GradcheckReport { params: check_model(config, seed, None)?, modules: check_modules(seed)? })
}
