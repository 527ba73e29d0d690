//! The full network: K-branch CNN → bidirectional LSTM → multi-attention →
//! multi-label classifier.

use crate::attention::{attention_scores, pool_descriptors};
use crate::birnn::{bidirectional_pass, LstmVars, GATES};
use crate::config::{LstmMode, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::head::{classify, posteriors};
use crate::kbranch::{branch_forward, fuse_descriptors, split_patches, BranchVars, PatchSet};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::train::init::xavier_init;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Clone, Debug)]
struct BranchIds {
    convs: Vec<(ParamId, ParamId)>,
    fc: (ParamId, ParamId),
}

#[derive(Clone, Copy, Debug)]
struct LstmIds {
    w: [ParamId; 4],
    u: [ParamId; 4],
    b: [ParamId; 4],
}

#[derive(Clone, Debug)]
struct Layout {
    branches: Vec<BranchIds>,
    fusion: (ParamId, ParamId),
    fwd: Vec<LstmIds>,
    bwd: Vec<LstmIds>,
    attention: (ParamId, ParamId),
    classifier: (ParamId, ParamId),
}

/// Graph handles of every model value produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Every parameter leaf, in store order.
    pub params: Vec<Var>,
    /// Local descriptors ψ, one row per patch: `[R × d_ψ]`.
    pub local: Var,
    /// Sequential descriptors φ, one row per patch: `[R × 2·hidden]`.
    pub sequential: Var,
    /// Attention matrix A: `[T × R]`.
    pub attention: Var,
    /// Image descriptor Ψ: `[d_φ × T]`.
    pub image: Var,
    /// Class logits z: `[C]`.
    pub logits: Var,
}

/// Result of a gradient-free forward pass.
#[derive(Clone, Debug)]
pub struct Inference<F> {
    pub probabilities: Vec<F>,
    pub attention: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
}

impl<F: Real> Model<F> {
    /// Builds a model whose parameters come from `fill(name, shape, role)`.
    pub fn build(
        config: ModelConfig,
        mut fill: impl FnMut(&str, &[usize], ParamRole) -> Tensor<F>,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut add = |name: String, shape: Vec<usize>, role| {
            let t = fill(&name, &shape, role);
            debug_assert_eq!(t.shape(), shape.as_slice());
            store.push(name, t)
        };
        let grid = config.grid();

        let mut branches = Vec::new();
        for (k, spec) in config.branches.iter().enumerate() {
            let mut cin = spec.channels();
            let mut convs = Vec::new();
            for (l, layer) in spec.layers.iter().enumerate() {
                let w = add(
                    format!("branch{k}.conv{l}.weight"),
                    vec![layer.filters, cin, layer.kernel, layer.kernel],
                    ParamRole::Weight,
                );
                let b = add(format!("branch{k}.conv{l}.bias"), vec![layer.filters], ParamRole::Bias);
                convs.push((w, b));
                cin = layer.filters;
            }
            let fc_in = spec.fc_in(grid)?;
            let fw = add(format!("branch{k}.fc.weight"), vec![spec.fc_out, fc_in], ParamRole::Weight);
            let fb = add(format!("branch{k}.fc.bias"), vec![spec.fc_out], ParamRole::Bias);
            branches.push(BranchIds { convs, fc: (fw, fb) });
        }
        let d_psi = config.descriptor_width;
        let fusion = (
            add("fusion.weight".into(), vec![d_psi, config.fusion_in()], ParamRole::Weight),
            add("fusion.bias".into(), vec![d_psi], ParamRole::Bias),
        );

        let sets = match config.lstm_mode {
            LstmMode::Shared => 1,
            LstmMode::PerPosition => config.patches,
        };
        let hidden = config.hidden;
        let mut lstm = |dir: &str| -> Vec<LstmIds> {
            (0..sets)
                .map(|r| {
                    let prefix = match config.lstm_mode {
                        LstmMode::Shared => format!("lstm.{dir}"),
                        LstmMode::PerPosition => format!("lstm.{dir}.r{r}"),
                    };
                    let w = GATES.map(|gate| {
                        add(format!("{prefix}.W_{gate}"), vec![hidden, d_psi], ParamRole::Weight)
                    });
                    let u = GATES.map(|gate| {
                        add(format!("{prefix}.U_{gate}"), vec![hidden, hidden], ParamRole::Weight)
                    });
                    let b = GATES
                        .map(|gate| add(format!("{prefix}.b_{gate}"), vec![hidden], ParamRole::Bias));
                    LstmIds { w, u, b }
                })
                .collect()
        };
        let fwd = lstm("fwd");
        let bwd = lstm("bwd");

        let d_phi = config.sequential_width();
        let attention = (
            add("attention.W_a1".into(), vec![config.attention_width, d_phi], ParamRole::Weight),
            add(
                "attention.W_a2".into(),
                vec![config.attention_heads, config.attention_width],
                ParamRole::Weight,
            ),
        );
        let classifier = (
            add("classifier.weight".into(), vec![config.classes, config.classifier_in()], ParamRole::Weight),
            add("classifier.bias".into(), vec![config.classes], ParamRole::Bias),
        );

        let layout = Layout { branches, fusion, fwd, bwd, attention, classifier };
        Ok(Self { config, params: store, layout })
    }

    /// Xavier-uniform weights and zero biases, deterministic per
    /// `(seed, parameter name)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, |name, shape, role| match role {
            ParamRole::Weight => xavier_init(shape, seed, name),
            ParamRole::Bias => Tensor::zeros(shape),
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, |_, shape, _| Tensor::zeros(shape))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }

    /// Copy of this model in another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    pub fn split<'s>(&self, subsets: &'s [Tensor<F>]) -> Result<PatchSet<F>> {
        if subsets.len() != self.config.branches.len() {
            return Err(Error::dim(format!(
                "model has {} branches, sample has {} band subsets",
                self.config.branches.len(),
                subsets.len()
            )));
        }
        for (k, (s, b)) in subsets.iter().zip(&self.config.branches).enumerate() {
            if s.shape() != [b.channels(), b.height, b.width] {
                return Err(Error::dim(format!(
                    "subset {k}: model expects {:?}, sample has {:?}",
                    [b.channels(), b.height, b.width],
                    s.shape()
                )));
            }
        }
        split_patches(subsets, self.config.patches)
    }

    /// Records the whole network on `g`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, F>, patches: &'a PatchSet<F>) -> Result<Forward> {
        let params = self.params.bind(g);
        let p = |id: ParamId| params[id.index()];
        let cfg = &self.config;
        if patches.subset_count() != cfg.branches.len() || patches.patch_count() != cfg.patches {
            return Err(Error::dim(format!(
                "patch set has {} subsets x {} patches, model expects {} x {}",
                patches.subset_count(),
                patches.patch_count(),
                cfg.branches.len(),
                cfg.patches
            )));
        }

        let mut outputs = Vec::with_capacity(cfg.branches.len());
        for (k, (spec, ids)) in cfg.branches.iter().zip(&self.layout.branches).enumerate() {
            let vars = BranchVars {
                convs: ids.convs.iter().map(|&(w, b)| (p(w), p(b))).collect(),
                fc_weight: p(ids.fc.0),
                fc_bias: p(ids.fc.1),
            };
            let x = g.input(patches.subset(k));
            outputs.push(branch_forward(g, x, spec, &vars, cfg.branch_fc_relu)?);
        }
        let local = fuse_descriptors(g, &outputs, p(self.layout.fusion.0), p(self.layout.fusion.1))?;

        let bind_lstm = |ids: &LstmIds| LstmVars { w: ids.w.map(p), u: ids.u.map(p), b: ids.b.map(p) };
        let fwd: Vec<LstmVars> = self.layout.fwd.iter().map(bind_lstm).collect();
        let bwd: Vec<LstmVars> = self.layout.bwd.iter().map(bind_lstm).collect();
        let sequential = bidirectional_pass(g, local, &fwd, &bwd)?;

        let omega = g.transpose(sequential)?;
        let (w1, w2) = self.layout.attention;
        let attention = attention_scores(g, omega, p(w1), p(w2))?;
        let image = pool_descriptors(g, omega, attention)?;
        let (cw, cb) = self.layout.classifier;
        let logits = classify(g, image, p(cw), p(cb))?;
        Ok(Forward { params, local, sequential, attention, image, logits })
    }

    /// Loss of one sample and the gradient for every parameter, in store
    /// order.
    pub fn loss_and_grads(&self, subsets: &[Tensor<F>], labels: &Tensor<F>) -> Result<(F, Vec<Tensor<F>>)> {
        self.loss_and_grads_with_fault(subsets, labels, None)
    }

    #[doc(hidden)]
    pub fn loss_and_grads_with_fault(
        &self,
        subsets: &[Tensor<F>],
        labels: &Tensor<F>,
        fault: Option<OpKind>,
    ) -> Result<(F, Vec<Tensor<F>>)> {
        let patches = self.split(subsets)?;
        let mut g = Graph::new();
        if let Some(kind) = fault {
            g.inject_fault(kind);
        }
        let fwd = self.forward(&mut g, &patches)?;
        let loss = g.bce_with_logits(fwd.logits, labels)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        let out = fwd
            .params
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.get(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, out))
    }

    /// Scalar loss only; used by finite-difference checks.
    pub fn loss(&self, subsets: &[Tensor<F>], labels: &Tensor<F>) -> Result<F> {
        let patches = self.split(subsets)?;
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, &patches)?;
        let loss = g.bce_with_logits(fwd.logits, labels)?;
        Ok(g.value(loss).item())
    }

    pub fn infer(&self, subsets: &[Tensor<F>]) -> Result<Inference<F>> {
        let patches = self.split(subsets)?;
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, &patches)?;
        Ok(Inference {
            probabilities: posteriors(g.value(fwd.logits).data()),
            attention: g.value(fwd.attention).clone(),
        })
    }
}
