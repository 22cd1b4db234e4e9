//! Checkpoint evaluation: batched eval-mode inference over a split,
//! detection metrics at a threshold policy, CSV reports, and
//! attention-rollout exports.

use crate::error::{Error, Result};
use crate::metrics::{attention_rollout, auc, average_maps, frr_far, threshold_sweep};
use crate::model::{AttentionArtifacts, ModelConfig, ModelCtx, ParamStore};
use crate::synth::AvSample;
use crate::train::{score_split, ModelVariant};
use crate::tensor::Tape;

/// Full evaluation result for one split.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub n_wake: usize,
    pub n_non_wake: usize,
    pub n_fr: usize,
    pub n_fa: usize,
    pub frr: f64,
    pub far: f64,
    pub wws: f64,
    pub auc: f64,
    pub threshold: f64,
    /// (id, score, label) per sample, in split order.
    pub per_sample: Vec<(String, f64, u8)>,
}

impl MetricsReport {
    /// Report CSV: one header and one row. Rates appear as percentages;
    /// AUC is raw in [0,1] with the display-convention column
    /// (100·AUC − 99) alongside.
    pub fn report_csv(&self) -> String {
        let mut out = String::from(
            "n_wake,n_non_wake,n_fr,n_fa,frr_pct,far_pct,wws_pct,auc,auc_base99,threshold\n",
        );
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            self.n_wake,
            self.n_non_wake,
            self.n_fr,
            self.n_fa,
            self.frr * 100.0,
            self.far * 100.0,
            self.wws * 100.0,
            self.auc,
            self.auc * 100.0 - 99.0,
            self.threshold
        ));
        out
    }

    /// Scores CSV: `id,score,label` per sample.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("id,score,label\n");
        for (id, score, label) in &self.per_sample {
            out.push_str(&format!("{id},{score},{label}\n"));
        }
        out
    }

    /// One-line stdout summary.
    pub fn summary_line(&self) -> String {
        format!(
            "FRR={:.2}% FAR={:.2}% WWS={:.2}% AUC={:.4}",
            self.frr * 100.0,
            self.far * 100.0,
            self.wws * 100.0,
            self.auc
        )
    }
}

/// How the decision threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Sweep on the dev split, apply the minimizer to the target split.
    SweepOnDev,
}

/// Evaluate parameters on a split. `dev` supplies the sweep when the
/// policy asks for one.
pub fn evaluate(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    variant: ModelVariant,
    split: &[AvSample],
    dev: &[AvSample],
    policy: ThresholdPolicy,
    batch_size: usize,
) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    let threshold = match policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::SweepOnDev => {
            let dev_scores = score_split(params, cfg, variant, dev, batch_size)?;
            let dev_labels: Vec<u8> = dev.iter().map(|s| s.label).collect();
            threshold_sweep(&dev_scores, &dev_labels, None)?.0
        }
    };
    let scores = score_split(params, cfg, variant, split, batch_size)?;
    let labels: Vec<u8> = split.iter().map(|s| s.label).collect();
    let counts = frr_far(&scores, &labels, threshold)?;
    let auc_value = auc(&scores, &labels)?;
    Ok(MetricsReport {
        n_wake: counts.n_wake,
        n_non_wake: counts.n_non_wake,
        n_fr: counts.n_fr,
        n_fa: counts.n_fa,
        frr: counts.frr,
        far: counts.far,
        wws: counts.wws(),
        auc: auc_value,
        threshold,
        per_sample: split
            .iter()
            .zip(&scores)
            .map(|(s, &score)| (s.id.clone(), score, s.label))
            .collect(),
    })
}

// ── attention rollout export ────────────────────────────────────────────

/// Rollout analysis of one sample's attention record.
#[derive(Debug, Clone)]
pub struct RolloutAnalysis {
    /// Per-input-frame attention mass (length T, sums to 1): the pooled
    /// attribution alpha·R of rollout matrix R and pooling weights alpha.
    pub time_weights: Vec<f64>,
    /// The rollout matrix itself, T x T row-major.
    pub rollout: Vec<f64>,
    /// Frame-level cross-modal maps of the last encoder block:
    /// `[T, h, M, M]`.
    pub flcma_last: Option<Vec<f64>>,
    pub t: usize,
    pub heads: usize,
    pub modalities: usize,
}

/// Run an attention-collecting forward on one sample and reduce the maps:
/// per block, heads and streams of the time attention are averaged into one
/// T x T map; the rollout is their residual-adjusted product; the exported
/// per-frame weight is the pooling-weighted attribution.
pub fn rollout_analysis(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    sample: &AvSample,
) -> Result<RolloutAnalysis> {
    let audio = crate::audio::normalize_fbank(&sample.audio.frames)
        .reshaped(&[1, crate::audio::TARGET_FRAMES, crate::audio::N_MELS])?;
    let video = sample.video.to_tensor().reshaped(&[
        1,
        crate::synth::VIDEO_FRAMES,
        sample.video.size,
        sample.video.size,
        3,
    ])?;
    let mut tape = Tape::new();
    let mut ctx = ModelCtx::new(&mut tape, params).collecting_attention();
    let a = ctx.tape.constant(&audio);
    let v = ctx.tape.constant(&video);
    let _probs = crate::model::forward(&mut ctx, a, v, cfg)?;
    let attention = std::mem::take(&mut ctx.attention);
    drop(ctx);
    rollout_from_artifacts(&attention, cfg)
}

pub fn rollout_from_artifacts(
    attention: &AttentionArtifacts<f32>,
    cfg: &ModelConfig,
) -> Result<RolloutAnalysis> {
    let t = cfg.video_frames;
    let h = cfg.n_heads;
    let n_blocks = cfg.n_blocks;
    // average heads, then streams, per block
    let mut per_block: Vec<Vec<f64>> = Vec::with_capacity(n_blocks);
    for block in 0..n_blocks {
        let mut stream_maps = Vec::new();
        for maps in attention.mhsa.values() {
            let m = maps.get(block).ok_or_else(|| {
                Error::invalid("rollout", format!("missing MHSA map for block {block}"))
            })?;
            // (1,h,T,T): average heads
            let head_maps: Vec<Vec<f64>> = (0..h)
                .map(|j| {
                    m.data()[j * t * t..(j + 1) * t * t]
                        .iter()
                        .map(|&v| v as f64)
                        .collect()
                })
                .collect();
            stream_maps.push(average_maps(&head_maps)?);
        }
        per_block.push(average_maps(&stream_maps)?);
    }
    let rollout = attention_rollout(&per_block, t)?;
    let alpha: Vec<f64> = attention
        .pool_alpha
        .as_ref()
        .ok_or_else(|| Error::invalid("rollout", "missing pooling weights"))?
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let mut time_weights = vec![0.0f64; t];
    for (o, &a) in alpha.iter().enumerate().take(t) {
        for (c, w) in time_weights.iter_mut().enumerate() {
            *w += a * rollout[o * t + c];
        }
    }
    let flcma_last = attention.flcma.last().map(|maps| {
        // (1, T, h, M, M) -> (T, h, M, M)
        maps.data().iter().map(|&v| v as f64).collect()
    });
    Ok(RolloutAnalysis {
        time_weights,
        rollout,
        flcma_last,
        t,
        heads: h,
        modalities: cfg.n_modalities,
    })
}

impl RolloutAnalysis {
    /// CSV export `frame_index,weight` of the per-frame attention mass.
    pub fn time_attention_csv(&self) -> String {
        let mut out = String::from("frame_index,weight\n");
        for (i, w) in self.time_weights.iter().enumerate() {
            out.push_str(&format!("{i},{w}\n"));
        }
        out
    }

    /// CSV export `frame,head,row,col,weight` of the last block's
    /// cross-modal maps.
    pub fn flcma_csv(&self) -> Result<String> {
        let maps = self
            .flcma_last
            .as_ref()
            .ok_or_else(|| Error::invalid("rollout", "model has no cross-modal maps"))?;
        let m = self.modalities;
        let mut out = String::from("frame,head,row,col,weight\n");
        for frame in 0..self.t {
            for head in 0..self.heads {
                for row in 0..m {
                    for col in 0..m {
                        let idx = ((frame * self.heads + head) * m + row) * m + col;
                        out.push_str(&format!("{frame},{head},{row},{col},{}\n", maps[idx]));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Indices of strict local maxima of the time-attention mass after a
    /// light 3-point smoothing.
    pub fn attention_peaks(&self) -> Vec<usize> {
        let w = &self.time_weights;
        let n = w.len();
        let smooth: Vec<f64> = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(1);
                let hi = (i + 1).min(n - 1);
                (w[lo] + w[i] + w[hi]) / 3.0
            })
            .collect();
        let mut peaks = Vec::new();
        for i in 1..n - 1 {
            if smooth[i] > smooth[i - 1] && smooth[i] >= smooth[i + 1] {
                peaks.push(i);
            }
        }
        peaks
    }
}
