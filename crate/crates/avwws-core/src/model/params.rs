//! Named parameter store and initialization.
//!
//! Parameter names are the stable contract for checkpoints and pretrain
//! transfer: a uni-modal model's names are a subset of the multi-modal
//! model's, so transfer is copy-by-name. Names sort deterministically
//! (BTreeMap), which fixes checkpoint layout and update order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::model::config::{BlockKind, FusionKind, Modality, ModelConfig};
use crate::synth::derive_seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    UniformFanIn(usize),
    /// Fan-in uniform damped by a factor; residual sublayer output
    /// projections start small so blocks are near-identity at init, which
    /// keeps small-budget training stable (gradients stay nonzero).
    UniformFanInDamped(usize),
    /// Small uniform, for positional tables.
    UniformSmall,
    Zero,
    One,
}

/// Shape and initializer of one named parameter.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Flat map of parameter name to tensor value.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("unknown parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        match self.map.get(name) {
            Some(old) if old.shape() != value.shape() => Err(Error::Incompatible(format!(
                "parameter `{name}`: shape {:?} vs {:?}",
                old.shape(),
                value.shape()
            ))),
            _ => {
                self.map.insert(name.to_string(), value);
                Ok(())
            }
        }
    }

    pub fn insert(&mut self, name: String, value: Tensor<S>) {
        self.map.insert(name, value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<T>()))
                .collect(),
        }
    }
}

fn linear(specs: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![d_in, d_out],
        init: Init::UniformFanIn(d_in),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![d_out],
        init: Init::Zero,
    });
}

fn layer_norm(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.g"),
        shape: vec![d],
        init: Init::One,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![d],
        init: Init::Zero,
    });
}

fn conv2d(specs: &mut Vec<ParamSpec>, prefix: &str, cout: usize, cin: usize, kh: usize, kw: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![cout, cin, kh, kw],
        init: Init::UniformFanIn(cin * kh * kw),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![cout],
        init: Init::Zero,
    });
}

fn ffn(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize, hidden: usize) {
    layer_norm(specs, &format!("{prefix}.ln"), d);
    linear(specs, &format!("{prefix}.lin1"), d, hidden);
    specs.push(ParamSpec {
        name: format!("{prefix}.lin2.w"),
        shape: vec![hidden, d],
        init: Init::UniformFanInDamped(hidden),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.lin2.b"),
        shape: vec![d],
        init: Init::Zero,
    });
}

fn mhsa(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    layer_norm(specs, &format!("{prefix}.ln"), d);
    for proj in ["wq", "wk", "wv"] {
        specs.push(ParamSpec {
            name: format!("{prefix}.{proj}"),
            shape: vec![d, d],
            init: Init::UniformFanIn(d),
        });
    }
    specs.push(ParamSpec {
        name: format!("{prefix}.wo"),
        shape: vec![d, d],
        init: Init::UniformFanInDamped(d),
    });
    for bias in ["bq", "bk", "bv", "bo"] {
        specs.push(ParamSpec {
            name: format!("{prefix}.{bias}"),
            shape: vec![d],
            init: Init::Zero,
        });
    }
}

fn conv_module(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize, kernel: usize) {
    layer_norm(specs, &format!("{prefix}.ln"), d);
    linear(specs, &format!("{prefix}.pw1"), d, 2 * d);
    specs.push(ParamSpec {
        name: format!("{prefix}.dw.w"),
        shape: vec![d, kernel],
        init: Init::UniformFanIn(kernel),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.dw.b"),
        shape: vec![d],
        init: Init::Zero,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.pw2.w"),
        shape: vec![d, d],
        init: Init::UniformFanInDamped(d),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.pw2.b"),
        shape: vec![d],
        init: Init::Zero,
    });
}

/// Downsampling kernels chosen so strided output extents divide exactly:
/// kernel 4 pad 1 on even inputs, kernel 3 pad 1 on odd inputs (both halve,
/// rounding up for odd). Shortcut kernels 2/1 likewise.
pub fn stage_kernels(size: usize) -> (usize, usize) {
    if size % 2 == 0 {
        (4, 2)
    } else {
        (3, 1)
    }
}

/// Spatial size after one exact stride-2 downsampling.
pub fn halved(size: usize) -> usize {
    size.div_ceil(2)
}

fn frontend_specs(specs: &mut Vec<ParamSpec>, modality: Modality, cfg: &ModelConfig) {
    let d = cfg.embed_dim;
    match modality {
        Modality::Audio => {
            let c1 = d / 4;
            let c2 = d / 2;
            // kernel-4 stride-2 subsampling convs: 256x80 -> 128x40 -> 64x20
            conv2d(specs, "frontend.audio.conv1", c1, 1, 4, 4);
            conv2d(specs, "frontend.audio.conv2", c2, c1, 4, 4);
            linear(specs, "frontend.audio.proj", c2 * (crate::audio::N_MELS / 4), d);
        }
        Modality::Visual => {
            let stem = cfg.stem_channels();
            specs.push(ParamSpec {
                name: "frontend.visual.stem.w".into(),
                shape: vec![stem, 3, 5, 7, 7],
                init: Init::UniformFanIn(3 * 5 * 7 * 7),
            });
            specs.push(ParamSpec {
                name: "frontend.visual.stem.b".into(),
                shape: vec![stem],
                init: Init::Zero,
            });
            let mut cin = stem;
            let mut size = cfg.video_size / 2; // after the cropped stem
            for (i, width) in cfg.visual_stage_widths().into_iter().enumerate() {
                let (k_down, k_short) = stage_kernels(size);
                let p = format!("frontend.visual.stage{}", i + 1);
                conv2d(specs, &format!("{p}.conv1"), width, cin, k_down, k_down);
                conv2d(specs, &format!("{p}.conv2"), width, width, 3, 3);
                conv2d(specs, &format!("{p}.short"), width, cin, k_short, k_short);
                cin = width;
                size = halved(size);
            }
            linear(specs, "frontend.visual.proj", cin, d);
        }
    }
    specs.push(ParamSpec {
        name: format!("pos.{}", modality.stream()),
        shape: vec![cfg.video_frames, d],
        init: Init::UniformSmall,
    });
}

fn encoder_stream_specs(specs: &mut Vec<ParamSpec>, block: usize, stream: &str, cfg: &ModelConfig) {
    let d = cfg.embed_dim;
    let hidden = cfg.ffn_dim();
    let p = format!("enc.block{block}.{stream}");
    match cfg.block_kind {
        BlockKind::Transformer => {
            mhsa(specs, &format!("{p}.mhsa"), d);
            ffn(specs, &format!("{p}.ffn"), d, hidden);
        }
        BlockKind::Conformer => {
            ffn(specs, &format!("{p}.ffn1"), d, hidden);
            mhsa(specs, &format!("{p}.mhsa"), d);
            conv_module(specs, &format!("{p}.conv"), d, cfg.conv_module_kernel);
            ffn(specs, &format!("{p}.ffn2"), d, hidden);
        }
    }
    layer_norm(specs, &format!("{p}.ln_out"), d);
}

fn flcma_specs(specs: &mut Vec<ParamSpec>, block: usize, cfg: &ModelConfig) {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let p = format!("enc.block{block}.flcma");
    layer_norm(specs, &format!("{p}.ln"), d);
    for head in 0..cfg.n_heads {
        for proj in ["wq", "wk", "wv"] {
            specs.push(ParamSpec {
                name: format!("{p}.head{head}.{proj}"),
                shape: vec![d, dh],
                init: Init::UniformFanIn(d),
            });
        }
        for bias in ["bq", "bk", "bv"] {
            specs.push(ParamSpec {
                name: format!("{p}.head{head}.{bias}"),
                shape: vec![dh],
                init: Init::Zero,
            });
        }
    }
    specs.push(ParamSpec {
        name: format!("{p}.wo"),
        shape: vec![d, d],
        init: Init::UniformFanInDamped(d),
    });
    specs.push(ParamSpec {
        name: format!("{p}.bo"),
        shape: vec![d],
        init: Init::Zero,
    });
}

fn head_specs(specs: &mut Vec<ParamSpec>, cfg: &ModelConfig) {
    let d = cfg.embed_dim;
    linear(specs, "pool", d, d); // pool.w / pool.b
    specs.push(ParamSpec {
        name: "pool.v".into(),
        shape: vec![d],
        init: Init::UniformFanIn(d),
    });
    linear(specs, "cls.lin1", d, d / 2);
    linear(specs, "cls.lin2", d / 2, 1);
}

/// Parameter table of the full audio-visual model for `cfg`.
pub fn multimodal_parameter_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    frontend_specs(&mut specs, Modality::Audio, cfg);
    frontend_specs(&mut specs, Modality::Visual, cfg);
    for block in 0..cfg.n_blocks {
        if cfg.has_flcma() {
            flcma_specs(&mut specs, block, cfg);
        }
        for stream in cfg.encoder_streams() {
            encoder_stream_specs(&mut specs, block, stream, cfg);
        }
    }
    match cfg.fusion {
        FusionKind::Flcma => {
            let k = cfg.conv_fusion_kernel;
            conv2d(&mut specs, "fusion.conv1", 4, 2, k, k);
            conv2d(&mut specs, "fusion.conv2", 2, 4, k, k);
            conv2d(&mut specs, "fusion.conv3", 1, 2, k, k);
        }
        FusionKind::Early => {
            let d = cfg.embed_dim;
            specs.push(ParamSpec {
                name: "early.wfc".into(),
                shape: vec![2 * d, d],
                init: Init::UniformFanIn(2 * d),
            });
        }
        FusionKind::Late => {
            linear(&mut specs, "late.comb", 2 * cfg.embed_dim, cfg.embed_dim);
        }
    }
    head_specs(&mut specs, cfg);
    specs
}

/// Parameter table of a uni-modal model (frontend + encoder stream +
/// pool + classifier), structurally the matching sub-network of the
/// late-fusion model.
pub fn unimodal_parameter_specs(cfg: &ModelConfig, modality: Modality) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    frontend_specs(&mut specs, modality, cfg);
    for block in 0..cfg.n_blocks {
        encoder_stream_specs(&mut specs, block, modality.stream(), cfg);
    }
    head_specs(&mut specs, cfg);
    specs
}

/// Initialize parameters for the spec list: seeded per parameter name, so
/// values are independent of insertion order.
pub fn init_params<S: Scalar>(specs: &[ParamSpec], seed: u64) -> ParamStore<S> {
    let mut store = ParamStore::new();
    for spec in specs {
        let t = match spec.init {
            Init::Zero => Tensor::zeros(&spec.shape),
            Init::One => Tensor::full(&spec.shape, S::ONE),
            Init::UniformFanIn(fan_in) => {
                // Kaiming-uniform bound: keeps activation variance roughly
                // stable through ReLU-separated conv/linear chains.
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &spec.name, 0));
                Tensor::from_fn(&spec.shape, |_| {
                    S::from_f64(rng.random_range(-bound..bound))
                })
            }
            Init::UniformFanInDamped(fan_in) => {
                let bound = 0.1 * (6.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &spec.name, 0));
                Tensor::from_fn(&spec.shape, |_| {
                    S::from_f64(rng.random_range(-bound..bound))
                })
            }
            Init::UniformSmall => {
                let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &spec.name, 0));
                Tensor::from_fn(&spec.shape, |_| S::from_f64(rng.random_range(-0.02..0.02)))
            }
        };
        store.insert(spec.name.clone(), t);
    }
    store
}
