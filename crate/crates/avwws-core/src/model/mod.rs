//! The audio-visual wake word spotting architecture: audio and visual
//! frontends, a transformer/conformer encoder with an optional frame-level
//! cross-modal attention sublayer, convolution fusion, attentive pooling
//! and a sigmoid classifier, plus early/late simple-fusion baselines and
//! uni-modal variants.

mod config;
mod layers;
mod params;

pub use config::{BlockKind, FusionKind, Modality, ModelConfig};
pub use layers::{
    attentive_pool, audio_frontend, classify, conv_fusion, encoder_block, flcma, forward,
    mhsa_time, run_eval_forward, uni_modal_features, uni_modal_forward, visual_frontend,
};
pub use params::{
    halved, init_params, multimodal_parameter_specs, stage_kernels, unimodal_parameter_specs,
    Init, ParamSpec, ParamStore,
};

use std::collections::{BTreeMap, HashMap};

use crate::error::Result;
use crate::synth::derive_seed;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Attention maps exposed by a forward pass for analysis and rollout.
#[derive(Debug, Clone)]
pub struct AttentionArtifacts<S: Scalar> {
    /// Per encoder block: `[B, T, h, M, M]` cross-modal attention.
    pub flcma: Vec<Tensor<S>>,
    /// Per stream, per encoder block: `[B, h, T, T]` time attention.
    pub mhsa: BTreeMap<String, Vec<Tensor<S>>>,
    /// Attentive-pooling weights `[B, T]`.
    pub pool_alpha: Option<Tensor<S>>,
}

impl<S: Scalar> Default for AttentionArtifacts<S> {
    fn default() -> Self {
        Self {
            flcma: Vec::new(),
            mhsa: BTreeMap::new(),
            pool_alpha: None,
        }
    }
}

/// Per-forward context: the tape, the parameter store, and the bookkeeping
/// shared by all layers (parameter leaf memoization, dropout seeding,
/// attention collection).
pub struct ModelCtx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    params: &'a ParamStore<S>,
    vars: HashMap<String, Var>,
    with_grad: bool,
    train_mode: bool,
    dropout_p: f64,
    seed: u64,
    dropout_counter: u64,
    collect_attention: bool,
    pub attention: AttentionArtifacts<S>,
}

impl<'a, S: Scalar> ModelCtx<'a, S> {
    /// Deterministic inference context: no gradients, dropout off.
    pub fn new(tape: &'a mut Tape<S>, params: &'a ParamStore<S>) -> Self {
        Self {
            tape,
            params,
            vars: HashMap::new(),
            with_grad: false,
            train_mode: false,
            dropout_p: 0.0,
            seed: 0,
            dropout_counter: 0,
            collect_attention: false,
            attention: AttentionArtifacts::default(),
        }
    }

    /// Register parameters as differentiable leaves.
    pub fn with_grad(mut self) -> Self {
        self.with_grad = true;
        self
    }

    /// Enable training mode: dropout at rate `p`, masks seeded from `seed`.
    pub fn training(mut self, p: f64, seed: u64) -> Self {
        self.train_mode = true;
        self.dropout_p = p;
        self.seed = seed;
        self
    }

    /// Record attention maps and pooling weights during the pass.
    pub fn collecting_attention(mut self) -> Self {
        self.collect_attention = true;
        self
    }

    /// Leaf var of a named parameter (memoized per forward, so repeated use
    /// accumulates gradient into one leaf).
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?;
        let v = self.tape.leaf(t, self.with_grad);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Pre-register a var to serve as the named parameter (e.g. a slice of
    /// a flattened parameter vector in gradient checks).
    pub fn preset_param(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// Vars of every parameter touched by the pass, for gradient readout.
    pub fn used_params(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    pub(crate) fn dropout(&mut self, x: Var) -> Result<Var> {
        if !self.train_mode || self.dropout_p == 0.0 {
            return Ok(x);
        }
        self.dropout_counter += 1;
        let seed = derive_seed(self.seed, "dropout", self.dropout_counter);
        self.tape.dropout(x, self.dropout_p, seed)
    }

    pub(crate) fn collecting(&self) -> bool {
        self.collect_attention
    }
}

/// Value-level stack of equal-shape tensors along a fresh axis (used to
/// assemble attention-map exports without touching the tape).
pub(crate) fn stack_values<S: Scalar>(tensors: &[Tensor<S>], axis: usize) -> Tensor<S> {
    let base = tensors[0].shape().to_vec();
    let mut shape = base.clone();
    shape.insert(axis, tensors.len());
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis..].iter().product();
    let mut data = vec![S::ZERO; tensors.len() * outer * inner];
    for (k, t) in tensors.iter().enumerate() {
        for o in 0..outer {
            let dst = (o * tensors.len() + k) * inner;
            data[dst..dst + inner].copy_from_slice(&t.data()[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::new(shape, data).expect("consistent stack shape")
}
