//! Training: weighted BCE loss, linear-warmup Adam, the end-to-end loop,
//! and the pretrain -> transfer -> fine-tune procedure.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{spec_augment, SpecAugmentConfig};
use crate::error::{Error, Result};
use crate::metrics::frr_far;
use crate::model::{
    forward, init_params, multimodal_parameter_specs, uni_modal_forward,
    unimodal_parameter_specs, Modality, ModelConfig, ModelCtx, ParamStore,
};
use crate::runtime;
use crate::synth::{derive_seed, AvSample};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub finetune_lr: f64,
    /// Weighted BCE class weights (negative:positive = 1:5 by default).
    pub w_neg: f64,
    pub w_pos: f64,
    pub max_steps: usize,
    /// Dev evaluation / logging period in steps.
    pub eval_every: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub use_spec_augment: bool,
    /// Global gradient-norm clip; small-batch training collapses into
    /// constant predictions on some seeds without it.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn tiny(seed: u64) -> Self {
        Self {
            batch_size: 16,
            base_lr: 1e-3,
            warmup_steps: 500,
            finetune_lr: 1e-4,
            w_neg: 1.0,
            w_pos: 5.0,
            max_steps: 300,
            eval_every: 50,
            seed,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            use_spec_augment: true,
            grad_clip: Some(5.0),
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            batch_size: 48,
            warmup_steps: 10_000,
            max_steps: 50_000,
            eval_every: 1_000,
            ..Self::tiny(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("train.{name}"), msg))
            }
        };
        field("batch_size", self.batch_size > 0, "must be > 0")?;
        field("base_lr", self.base_lr > 0.0, "must be > 0")?;
        field("finetune_lr", self.finetune_lr > 0.0, "must be > 0")?;
        field("w_neg", self.w_neg > 0.0, "must be > 0")?;
        field("w_pos", self.w_pos > 0.0, "must be > 0")?;
        field("max_steps", self.max_steps > 0, "must be > 0")?;
        field("eval_every", self.eval_every > 0, "must be > 0")?;
        field(
            "adam_beta1",
            (0.0..1.0).contains(&self.adam_beta1),
            "must be in [0,1)",
        )?;
        field(
            "adam_beta2",
            (0.0..1.0).contains(&self.adam_beta2),
            "must be in [0,1)",
        )?;
        field("adam_eps", self.adam_eps > 0.0, "must be > 0")?;
        field(
            "grad_clip",
            self.grad_clip.map_or(true, |c| c > 0.0),
            "must be > 0 when set",
        )?;
        Ok(())
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrPolicy {
    /// Linear warmup 0 -> base over `warmup_steps`, constant afterwards.
    Warmup,
    /// Constant rate (fine-tuning).
    Constant(f64),
}

/// Learning rate at 1-based `step`.
pub fn lr_at(step: usize, cfg: &TrainConfig, policy: LrPolicy) -> f64 {
    match policy {
        LrPolicy::Constant(lr) => lr,
        LrPolicy::Warmup => {
            if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
                cfg.base_lr
            } else {
                cfg.base_lr * step as f64 / cfg.warmup_steps as f64
            }
        }
    }
}

/// Weighted binary cross-entropy over a batch, on the tape:
/// mean of -[w_pos·y·ln p + w_neg·(1-y)·ln(1-p)], probabilities clamped
/// to [1e-7, 1-1e-7].
pub fn weighted_bce<S: Scalar>(
    tape: &mut Tape<S>,
    probs: Var,
    labels: &[u8],
    w_neg: f64,
    w_pos: f64,
) -> Result<Var> {
    let n = tape.numel(probs);
    if n != labels.len() {
        return Err(Error::invalid(
            "weighted_bce",
            format!("{n} probabilities vs {} labels", labels.len()),
        ));
    }
    let pos_w = Tensor::from_fn(&[n], |i| {
        if labels[i] == 1 {
            S::from_f64(w_pos)
        } else {
            S::ZERO
        }
    });
    let neg_w = Tensor::from_fn(&[n], |i| {
        if labels[i] == 0 {
            S::from_f64(w_neg)
        } else {
            S::ZERO
        }
    });
    let p = tape.clamp(probs, 1e-7, 1.0 - 1e-7)?;
    let log_p = tape.ln(p)?;
    let neg_p = tape.scale(p, -1.0)?;
    let one_minus = tape.add_scalar(neg_p, 1.0)?;
    let log_1p = tape.ln(one_minus)?;
    let wp = tape.constant(&pos_w);
    let wn = tape.constant(&neg_w);
    let pos_term = tape.mul(log_p, wp)?;
    let neg_term = tape.mul(log_1p, wn)?;
    let sum = tape.add(pos_term, neg_term)?;
    let mean = tape.mean_all(sum)?;
    tape.scale(mean, -1.0)
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    pub step: usize,
}

/// One bias-corrected Adam update over every gradient entry. Gradients
/// with NaN/Inf abort, naming the parameter.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bias1 = 1.0 - b1.powf(t);
    let bias2 = 1.0 - b2.powf(t);
    for (name, grad) in grads {
        if !grad.is_all_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
        let p = params.get(name)?;
        if p.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let mut new_data = p.data().to_vec();
        for i in 0..n {
            let g = grad.data()[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            new_data[i] -= (lr * m_hat / (v_hat.sqrt() + cfg.adam_eps)) as f32;
        }
        let shape = p.shape().to_vec();
        params.set(name, Tensor::new(shape, new_data)?)?;
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            let scaled: Vec<f32> = g.data().iter().map(|&v| v * scale).collect();
            *g = Tensor::new(g.shape().to_vec(), scaled).expect("same shape");
        }
    }
}

/// Which network the loop trains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelVariant {
    MultiModal,
    UniModal(Modality),
}

/// One row of the training step log
/// (CSV columns: step,lr,train_loss,dev_frr,dev_far,dev_wws).
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_frr: f64,
    pub dev_far: f64,
    pub dev_wws: f64,
}

pub fn step_log_csv(rows: &[StepLog]) -> String {
    let mut out = String::from("step,lr,train_loss,dev_frr,dev_far,dev_wws\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.lr, r.train_loss, r.dev_frr, r.dev_far, r.dev_wws
        ));
    }
    out
}

/// Result of one training run: final and best-dev-WWS parameters.
pub struct TrainOutcome {
    pub final_params: ParamStore<f32>,
    pub best_params: ParamStore<f32>,
    pub best_dev_wws: f64,
    pub final_dev_wws: f64,
    pub log: Vec<StepLog>,
}

fn assemble_batch(
    samples: &[&AvSample],
    video_size: usize,
    augment: Option<(u64, &SpecAugmentConfig)>,
) -> Result<(Tensor<f32>, Tensor<f32>, Vec<u8>)> {
    let b = samples.len();
    let audio_len = crate::audio::TARGET_FRAMES * crate::audio::N_MELS;
    let video_len = crate::synth::VIDEO_FRAMES * video_size * video_size * 3;
    let parts: Vec<Result<(Vec<f32>, Vec<f32>)>> = runtime::map_collect(b, |i| {
        let s = samples[i];
        let frames = match augment {
            Some((seed, cfg)) => spec_augment(&s.audio, cfg, derive_seed(seed, &s.id, 0))?.frames,
            None => s.audio.frames.clone(),
        };
        let audio = crate::audio::normalize_fbank(&frames).data().to_vec();
        let video = s.video.to_tensor().data().to_vec();
        Ok((audio, video))
    });
    let mut audio_data = Vec::with_capacity(b * audio_len);
    let mut video_data = Vec::with_capacity(b * video_len);
    for part in parts {
        let (a, v) = part?;
        audio_data.extend(a);
        video_data.extend(v);
    }
    Ok((
        Tensor::new(
            vec![b, crate::audio::TARGET_FRAMES, crate::audio::N_MELS],
            audio_data,
        )?,
        Tensor::new(
            vec![b, crate::synth::VIDEO_FRAMES, video_size, video_size, 3],
            video_data,
        )?,
        samples.iter().map(|s| s.label).collect(),
    ))
}

fn forward_variant<S: Scalar>(
    ctx: &mut ModelCtx<S>,
    variant: ModelVariant,
    audio: Var,
    video: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    match variant {
        ModelVariant::MultiModal => forward(ctx, audio, video, cfg),
        ModelVariant::UniModal(Modality::Audio) => {
            uni_modal_forward(ctx, Modality::Audio, audio, cfg)
        }
        ModelVariant::UniModal(Modality::Visual) => {
            uni_modal_forward(ctx, Modality::Visual, video, cfg)
        }
    }
}

/// Deterministic eval-mode scores for a split, batched.
pub fn score_split(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    variant: ModelVariant,
    samples: &[AvSample],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let refs: Vec<&AvSample> = samples.iter().collect();
    let chunks: Vec<&[&AvSample]> = refs.chunks(batch_size).collect();
    let per_chunk: Vec<Result<Vec<f64>>> = runtime::map_collect(chunks.len(), |ci| {
        let (audio, video, _) = assemble_batch(chunks[ci], cfg.video_size, None)?;
        let mut tape = Tape::new();
        let mut ctx = ModelCtx::new(&mut tape, params);
        let a = ctx.tape.constant(&audio);
        let v = ctx.tape.constant(&video);
        let probs = forward_variant(&mut ctx, variant, a, v, cfg)?;
        Ok(tape.value(probs).iter().map(|&p| p as f64).collect())
    });
    let mut scores = Vec::with_capacity(samples.len());
    for c in per_chunk {
        scores.extend(c?);
    }
    Ok(scores)
}

fn dev_metrics(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    variant: ModelVariant,
    dev: &[AvSample],
    batch_size: usize,
) -> Result<(f64, f64, f64)> {
    let scores = score_split(params, cfg, variant, dev, batch_size)?;
    let labels: Vec<u8> = dev.iter().map(|s| s.label).collect();
    let c = frr_far(&scores, &labels, 0.5)?;
    Ok((c.frr, c.far, c.wws()))
}

/// Core training loop: seeded epoch shuffles, weighted BCE, Adam with the
/// given schedule, periodic dev evaluation at threshold 0.5, best-dev-WWS
/// checkpoint selection.
pub fn train_loop(
    mut params: ParamStore<f32>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    policy: LrPolicy,
    variant: ModelVariant,
    train: &[AvSample],
    dev: &[AvSample],
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train.len() < train_cfg.batch_size {
        return Err(Error::config(
            "train.batch_size",
            "batch size exceeds training split",
        ));
    }
    let aug_cfg = SpecAugmentConfig::default();
    let mut adam = AdamState::default();
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut last_loss = f64::NAN;
    let mut step = 0usize;
    let mut epoch = 0usize;

    'outer: loop {
        // seeded per-epoch permutation
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(train_cfg.seed, "shuffle", epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for batch_idx in order.chunks(train_cfg.batch_size) {
            if batch_idx.len() < train_cfg.batch_size {
                break; // drop ragged tail; next epoch reshuffles
            }
            step += 1;
            let batch: Vec<&AvSample> = batch_idx.iter().map(|&i| &train[i]).collect();
            let augment = if train_cfg.use_spec_augment {
                Some((derive_seed(train_cfg.seed, "specaug", (epoch * 1_000_003 + step) as u64), &aug_cfg))
            } else {
                None
            };
            let (audio, video, labels) = assemble_batch(&batch, model_cfg.video_size, augment)?;

            let mut tape = Tape::new();
            let used: Vec<(String, Var)> = {
                let mut ctx = ModelCtx::new(&mut tape, &params).with_grad().training(
                    model_cfg.dropout,
                    derive_seed(train_cfg.seed, "step", step as u64),
                );
                let a = ctx.tape.constant(&audio);
                let v = ctx.tape.constant(&video);
                let probs = forward_variant(&mut ctx, variant, a, v, model_cfg)?;
                let loss =
                    weighted_bce(ctx.tape, probs, &labels, train_cfg.w_neg, train_cfg.w_pos)?;
                last_loss = ctx.tape.value(loss)[0] as f64;
                if !last_loss.is_finite() {
                    return Err(Error::NonFinite { op: "train_loss" });
                }
                ctx.tape.backward(loss)?;
                ctx.used_params()
                    .iter()
                    .map(|(k, v)| (k.clone(), *v))
                    .collect()
            };
            let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for (name, var) in used {
                match tape.grad(var) {
                    Some(_) => {
                        grads.insert(name, tape.grad_tensor(var));
                    }
                    None => {
                        return Err(Error::invalid(
                            "train",
                            format!("no gradient reached parameter `{name}`"),
                        ))
                    }
                }
            }
            drop(tape);
            if let Some(max_norm) = train_cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            let lr = lr_at(step, train_cfg, policy);
            adam_step(&mut params, &grads, &mut adam, lr, train_cfg)?;

            if step % train_cfg.eval_every == 0 || step == train_cfg.max_steps {
                let (frr, far, wws) =
                    dev_metrics(&params, model_cfg, variant, dev, train_cfg.batch_size)?;
                log.push(StepLog {
                    step,
                    lr,
                    train_loss: last_loss,
                    dev_frr: frr,
                    dev_far: far,
                    dev_wws: wws,
                });
                let better = match &best {
                    None => true,
                    Some((best_wws, _)) => wws < *best_wws,
                };
                if better {
                    best = Some((wws, params.clone()));
                }
            }
            if step >= train_cfg.max_steps {
                break 'outer;
            }
        }
        epoch += 1;
    }

    let final_dev_wws = log.last().map(|l| l.dev_wws).unwrap_or(f64::NAN);
    let (best_dev_wws, best_params) = best.unwrap_or((final_dev_wws, params.clone()));
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_dev_wws,
        final_dev_wws,
        log,
    })
}

/// Train a model from fresh initialization.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    variant: ModelVariant,
    train_split: &[AvSample],
    dev_split: &[AvSample],
) -> Result<TrainOutcome> {
    let specs = match variant {
        ModelVariant::MultiModal => multimodal_parameter_specs(model_cfg),
        ModelVariant::UniModal(m) => unimodal_parameter_specs(model_cfg, m),
    };
    let params = init_params::<f32>(&specs, derive_seed(train_cfg.seed, "init", 0));
    train_loop(
        params,
        model_cfg,
        train_cfg,
        LrPolicy::Warmup,
        variant,
        train_split,
        dev_split,
    )
}

/// Which donor supplied each transferred parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferManifest {
    pub copied_from_audio: Vec<String>,
    pub copied_from_visual: Vec<String>,
    pub fresh: Vec<String>,
}

impl TransferManifest {
    pub fn copied(&self) -> impl Iterator<Item = &String> {
        self.copied_from_audio.iter().chain(&self.copied_from_visual)
    }
}

/// Initialize a multi-modal model from two uni-modal donors: every
/// parameter whose name exists in a donor is copied (shared head
/// parameters come from the audio donor); parameters without a uni-modal
/// counterpart (cross-modal attention, fusion) stay freshly initialized.
pub fn pretrain_transfer(
    audio_donor: &ParamStore<f32>,
    visual_donor: &ParamStore<f32>,
    av_params: &mut ParamStore<f32>,
) -> Result<TransferManifest> {
    let mut manifest = TransferManifest {
        copied_from_audio: Vec::new(),
        copied_from_visual: Vec::new(),
        fresh: Vec::new(),
    };
    let names: Vec<String> = av_params.names().map(String::from).collect();
    for name in names {
        let (source, donor) = if audio_donor.contains(&name) {
            ("audio", audio_donor)
        } else if visual_donor.contains(&name) {
            ("visual", visual_donor)
        } else {
            manifest.fresh.push(name);
            continue;
        };
        let value = donor.get(&name)?;
        if value.shape() != av_params.get(&name)?.shape() {
            return Err(Error::Incompatible(format!(
                "parameter `{name}`: donor shape {:?} vs model shape {:?}",
                value.shape(),
                av_params.get(&name)?.shape()
            )));
        }
        av_params.set(&name, value.clone())?;
        if source == "audio" {
            manifest.copied_from_audio.push(name);
        } else {
            manifest.copied_from_visual.push(name);
        }
    }
    Ok(manifest)
}

/// Fine-tune (constant learning rate, no warmup) from given parameters.
pub fn fine_tune(
    params: ParamStore<f32>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    variant: ModelVariant,
    train_split: &[AvSample],
    dev_split: &[AvSample],
) -> Result<TrainOutcome> {
    train_loop(
        params,
        model_cfg,
        train_cfg,
        LrPolicy::Constant(train_cfg.finetune_lr),
        variant,
        train_split,
        dev_split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockKind, FusionKind};
    use crate::tensor::check_gradient;

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig {
            warmup_steps: 100,
            base_lr: 1e-3,
            ..TrainConfig::tiny(0)
        };
        assert_eq!(lr_at(100, &cfg, LrPolicy::Warmup), 1e-3);
        assert_eq!(lr_at(50, &cfg, LrPolicy::Warmup), 5e-4);
        assert_eq!(lr_at(100_000, &cfg, LrPolicy::Warmup), 1e-3);
        assert_eq!(lr_at(1, &cfg, LrPolicy::Constant(1e-4)), 1e-4);
        assert_eq!(lr_at(99_999, &cfg, LrPolicy::Constant(1e-4)), 1e-4);
    }

    #[test]
    fn bce_perfect_predictions_near_zero() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(&Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let loss = weighted_bce(&mut tape, p, &[1, 0, 1, 0], 1.0, 5.0).unwrap();
        assert!(tape.value(loss)[0] < 1e-6);
    }

    #[test]
    fn bce_half_probability_balanced_batch() {
        // loss = ((1+5)/2)·ln 2 for p = 0.5 on a balanced batch
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(&Tensor::full(&[4], 0.5));
        let loss = weighted_bce(&mut tape, p, &[1, 0, 1, 0], 1.0, 5.0).unwrap();
        let want = 3.0 * std::f64::consts::LN_2;
        assert!((tape.value(loss)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let labels = [1u8, 0, 1, 0, 0, 1];
        let x = {
            let mut rng = ChaCha20Rng::seed_from_u64(5);
            Tensor::from_fn(&[6], |_| rng.random_range(-2.0..2.0))
        };
        let report = check_gradient(
            |tape, vars| {
                let p = tape.sigmoid(vars[0])?;
                weighted_bce(tape, p, &labels, 1.0, 5.0)
            },
            &[x],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "rel err {}", report.max_rel_err);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let cfg = TrainConfig::tiny(0);
        let mut params = ParamStore::new();
        params.insert("x".into(), Tensor::full(&[3], 1.5f32));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::zeros(&[3]));
        let mut state = AdamState::default();
        adam_step(&mut params, &grads, &mut state, 0.1, &cfg).unwrap();
        assert_eq!(params.get("x").unwrap().data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn adam_single_step_on_square() {
        // f(x) = x^2 at x = 1: grad 2; bias-corrected first step moves by
        // exactly lr (up to eps), so x ≈ 0.9 at lr 0.1.
        let cfg = TrainConfig::tiny(0);
        let mut params = ParamStore::new();
        params.insert("x".into(), Tensor::full(&[1], 1.0f32));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::full(&[1], 2.0f32));
        let mut state = AdamState::default();
        adam_step(&mut params, &grads, &mut state, 0.1, &cfg).unwrap();
        let x = params.get("x").unwrap().data()[0];
        assert!((x - 0.9).abs() < 1e-6, "x = {x}");
        // |Δ| never exceeds lr for the first step (f32-scale slack)
        assert!((1.0 - x).abs() <= 0.1 + 1e-6);
    }

    #[test]
    fn adam_rejects_nan_gradient_with_name() {
        let cfg = TrainConfig::tiny(0);
        let mut params = ParamStore::new();
        params.insert("layer.w".into(), Tensor::full(&[1], 1.0f32));
        let mut grads = BTreeMap::new();
        grads.insert("layer.w".to_string(), Tensor::full(&[1], f32::NAN));
        let mut state = AdamState::default();
        match adam_step(&mut params, &grads, &mut state, 0.1, &cfg) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "layer.w"),
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }

    #[test]
    fn adam_deterministic() {
        let cfg = TrainConfig::tiny(0);
        let run = || {
            let mut params = ParamStore::new();
            params.insert("x".into(), Tensor::full(&[4], 0.3f32));
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::from_fn(&[4], |i| i as f32 * 0.1));
            let mut state = AdamState::default();
            for _ in 0..5 {
                adam_step(&mut params, &grads, &mut state, 0.01, &cfg).unwrap();
            }
            params.get("x").unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_loss_scale_preserves_update_direction() {
        // scaling the loss (hence the gradient) by a positive constant
        // leaves the sign pattern of the first update unchanged
        let cfg = TrainConfig::tiny(0);
        let grad_vals = [0.5f32, -1.25, 0.003, -0.04];
        let run = |scale: f32| {
            let mut params = ParamStore::new();
            params.insert("x".into(), Tensor::zeros(&[4]));
            let mut grads = BTreeMap::new();
            grads.insert(
                "x".to_string(),
                Tensor::from_fn(&[4], |i| grad_vals[i] * scale),
            );
            let mut state = AdamState::default();
            adam_step(&mut params, &grads, &mut state, 0.1, &cfg).unwrap();
            params.get("x").unwrap().data().to_vec()
        };
        let a = run(1.0);
        let b = run(7.5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.signum(), y.signum());
        }
    }

    #[test]
    fn transfer_partition_exact_for_all_variants() {
        for kind in [BlockKind::Transformer, BlockKind::Conformer] {
            let cfg = ModelConfig::tiny(kind, FusionKind::Flcma);
            let audio = init_params::<f32>(
                &unimodal_parameter_specs(&cfg, Modality::Audio),
                1,
            );
            let visual = init_params::<f32>(
                &unimodal_parameter_specs(&cfg, Modality::Visual),
                2,
            );
            let mut av = init_params::<f32>(&multimodal_parameter_specs(&cfg), 3);
            let manifest = pretrain_transfer(&audio, &visual, &mut av).unwrap();
            let mut seen: std::collections::BTreeSet<&String> = Default::default();
            for n in manifest.copied().chain(manifest.fresh.iter()) {
                assert!(seen.insert(n), "{kind:?}: `{n}` appears twice");
            }
            assert_eq!(seen.len(), av.len(), "{kind:?}: partition must cover all");
            // cross-modal attention and fusion have no uni-modal counterpart
            assert!(manifest.fresh.iter().all(|n| n.contains("flcma") || n.starts_with("fusion.")));
            assert!(manifest
                .fresh
                .iter()
                .any(|n| n.contains("flcma")));
        }
    }

    #[test]
    fn transfer_shape_mismatch_names_parameter() {
        let cfg = ModelConfig::tiny(BlockKind::Transformer, FusionKind::Flcma);
        let mut bigger = cfg.clone();
        bigger.embed_dim = 64;
        let audio = init_params::<f32>(&unimodal_parameter_specs(&bigger, Modality::Audio), 1);
        let visual = init_params::<f32>(&unimodal_parameter_specs(&cfg, Modality::Visual), 2);
        let mut av = init_params::<f32>(&multimodal_parameter_specs(&cfg), 3);
        match pretrain_transfer(&audio, &visual, &mut av) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains('`'), "{msg}"),
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }
}
