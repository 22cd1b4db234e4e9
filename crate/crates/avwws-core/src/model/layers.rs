//! Layer implementations. Every function records onto the context's tape
//! and returns the output var, so the same code path serves inference,
//! training, and 64-bit gradient checking.

use crate::error::{Error, Result};
use crate::model::config::{BlockKind, FusionKind, Modality, ModelConfig};
use crate::model::params::{halved, stage_kernels};
use crate::model::{stack_values, ModelCtx};
use crate::tensor::{Scalar, Tensor, Var};

fn linear<S: Scalar>(ctx: &mut ModelCtx<S>, x: Var, prefix: &str) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let y = ctx.tape.matmul(x, w)?;
    ctx.tape.add_broadcast(y, b)
}

fn layer_norm_p<S: Scalar>(ctx: &mut ModelCtx<S>, x: Var, prefix: &str) -> Result<Var> {
    let g = ctx.p(&format!("{prefix}.g"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    ctx.tape.layer_norm(x, g, b, 1e-5)
}

fn conv2d_p<S: Scalar>(
    ctx: &mut ModelCtx<S>,
    x: Var,
    prefix: &str,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    ctx.tape.conv2d(x, w, b, stride, pad)
}

// ── frontends ───────────────────────────────────────────────────────────

/// Audio frontend: `[B, 256, 80]` FBank to `[B, 64, D]`. Two stride-2
/// subsampling convolutions divide the time axis by exactly rate = 4, the
/// frequency axis by 4; channels x frequency then project to D.
pub fn audio_frontend<S: Scalar>(ctx: &mut ModelCtx<S>, a: Var, cfg: &ModelConfig) -> Result<Var> {
    let shape = ctx.tape.shape(a).to_vec();
    if shape.len() != 3 || shape[1] != cfg.audio_frames || shape[2] != crate::audio::N_MELS {
        return Err(Error::ShapeMismatch {
            op: "audio_frontend",
            lhs: vec![0, cfg.audio_frames, crate::audio::N_MELS],
            rhs: shape,
        });
    }
    let b = shape[0];
    let x = ctx.tape.reshape(a, &[b, 1, cfg.audio_frames, crate::audio::N_MELS])?;
    let c1 = conv2d_p(ctx, x, "frontend.audio.conv1", (2, 2), (1, 1))?;
    let r1 = ctx.tape.relu(c1)?;
    let c2 = conv2d_p(ctx, r1, "frontend.audio.conv2", (2, 2), (1, 1))?;
    let r2 = ctx.tape.relu(c2)?;
    // (B, C2, T, F') -> (B, T, C2*F') -> (B, T, D)
    let t = cfg.video_frames;
    let c2_ch = cfg.embed_dim / 2;
    let freq = crate::audio::N_MELS / 4;
    let perm = ctx.tape.permute(r2, &[0, 2, 1, 3])?;
    let flat = ctx.tape.reshape(perm, &[b, t, c2_ch * freq])?;
    linear(ctx, flat, "frontend.audio.proj")
}

/// Visual frontend: `[B, 64, S, S, 3]` video to `[B, 64, D]`. A 3-D stem
/// (kernel 5x7x7, temporal stride 1, spatial stride 2) over the input
/// cropped to odd spatial extent, reduced residual 2-D stages per frame,
/// global average pooling, and a linear projection. T = 64 is preserved.
pub fn visual_frontend<S: Scalar>(ctx: &mut ModelCtx<S>, v: Var, cfg: &ModelConfig) -> Result<Var> {
    let shape = ctx.tape.shape(v).to_vec();
    let s = cfg.video_size;
    if shape.len() != 5 || shape[1] != cfg.video_frames || shape[2] != s || shape[3] != s || shape[4] != 3
    {
        return Err(Error::ShapeMismatch {
            op: "visual_frontend",
            lhs: vec![0, cfg.video_frames, s, s, 3],
            rhs: shape,
        });
    }
    let b = shape[0];
    let t = cfg.video_frames;
    // Subtract each clip's temporal-mean frame: the static face carries no
    // wake information and would otherwise swamp the lip-motion signal
    // through the spatial pooling. Then (B,T,S,S,3) -> (B,3,T,S,S), cropped
    // to odd spatial extent so the stride-2 kernel-7 stem divides exactly.
    let centered = ctx.tape.center_axis(v, 1)?;
    let x = ctx.tape.permute(centered, &[0, 4, 1, 2, 3])?;
    let x = ctx.tape.slice_axis(x, 3, 0, s - 1)?;
    let x = ctx.tape.slice_axis(x, 4, 0, s - 1)?;
    let stem_w = ctx.p("frontend.visual.stem.w")?;
    let stem_b = ctx.p("frontend.visual.stem.b")?;
    let stem = ctx.tape.conv3d(x, stem_w, stem_b, (1, 2, 2), (2, 3, 3))?;
    let stem = ctx.tape.relu(stem)?;
    // per-frame 2-D stages: (B,C0,T,s,s) -> (B*T, C0, s, s)
    let c0 = cfg.stem_channels();
    let mut size = s / 2;
    let perm = ctx.tape.permute(stem, &[0, 2, 1, 3, 4])?;
    let mut x = ctx.tape.reshape(perm, &[b * t, c0, size, size])?;
    for (i, _width) in cfg.visual_stage_widths().into_iter().enumerate() {
        let p = format!("frontend.visual.stage{}", i + 1);
        let (k_down, k_short) = stage_kernels(size);
        let main = conv2d_p(ctx, x, &format!("{p}.conv1"), (2, 2), (1, 1))?;
        debug_assert_eq!(ctx.tape.shape(main)[2], halved(size), "stage {i} kernel {k_down}");
        let main = ctx.tape.relu(main)?;
        let main = conv2d_p(ctx, main, &format!("{p}.conv2"), (1, 1), (1, 1))?;
        let short = conv2d_p(ctx, x, &format!("{p}.short"), (2, 2), (0, 0))?;
        debug_assert_eq!(ctx.tape.shape(short)[2], halved(size), "shortcut kernel {k_short}");
        let sum = ctx.tape.add(main, short)?;
        x = ctx.tape.relu(sum)?;
        size = halved(size);
    }
    let pooled = ctx.tape.global_avg_pool(x)?; // (B*T, C_last)
    let proj = linear(ctx, pooled, "frontend.visual.proj")?;
    ctx.tape.reshape(proj, &[b, t, cfg.embed_dim])
}

// ── attention sublayers ─────────────────────────────────────────────────

/// Frame-level cross-modal attention. For each time frame independently,
/// each head projects the M modality embeddings to queries/keys/values,
/// attends over the modality axis (an MxM softmax), and the concatenated
/// heads pass through the output projection. No attention across time.
///
/// Input and output are `[B, M, T, D]`; generic in M.
pub fn flcma<S: Scalar>(
    ctx: &mut ModelCtx<S>,
    x: Var,
    block: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != cfg.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "flcma",
            lhs: vec![0, 0, 0, cfg.embed_dim],
            rhs: shape,
        });
    }
    let prefix = format!("enc.block{block}.flcma");
    let dh = cfg.head_dim();
    let xn = layer_norm_p(ctx, x, &format!("{prefix}.ln"))?;
    let xp = ctx.tape.permute(xn, &[0, 2, 1, 3])?; // (B,T,M,D)
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut head_maps = Vec::new();
    for j in 0..cfg.n_heads {
        let hp = format!("{prefix}.head{j}");
        let q = {
            let w = ctx.p(&format!("{hp}.wq"))?;
            let b = ctx.p(&format!("{hp}.bq"))?;
            let m = ctx.tape.matmul(xp, w)?;
            ctx.tape.add_broadcast(m, b)?
        };
        let k = {
            let w = ctx.p(&format!("{hp}.wk"))?;
            let b = ctx.p(&format!("{hp}.bk"))?;
            let m = ctx.tape.matmul(xp, w)?;
            ctx.tape.add_broadcast(m, b)?
        };
        let v = {
            let w = ctx.p(&format!("{hp}.wv"))?;
            let b = ctx.p(&format!("{hp}.bv"))?;
            let m = ctx.tape.matmul(xp, w)?;
            ctx.tape.add_broadcast(m, b)?
        };
        let logits = ctx.tape.matmul_nt(q, k)?; // (B,T,M,M)
        let scaled = ctx.tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let attn = ctx.tape.softmax(scaled, 3)?;
        if ctx.collecting() {
            head_maps.push(ctx.tape.tensor(attn));
        }
        heads.push(ctx.tape.matmul(attn, v)?); // (B,T,M,dh)
    }
    let concat = ctx.tape.concat(&heads, 3)?; // (B,T,M,D)
    let wo = ctx.p(&format!("{prefix}.wo"))?;
    let bo = ctx.p(&format!("{prefix}.bo"))?;
    let proj = ctx.tape.matmul(concat, wo)?;
    let proj = ctx.tape.add_broadcast(proj, bo)?;
    if ctx.collecting() {
        ctx.attention.flcma.push(stack_values(&head_maps, 2)); // (B,T,h,M,M)
    }
    ctx.tape.permute(proj, &[0, 2, 1, 3]) // (B,M,T,D)
}

/// Standard multi-head self-attention over the time axis of one stream.
/// Input and output `[B, T, D]`. `prefix` names the parameter group.
pub fn mhsa_time<S: Scalar>(
    ctx: &mut ModelCtx<S>,
    x: Var,
    prefix: &str,
    stream: &str,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "mhsa_time",
            lhs: vec![0, 0, cfg.embed_dim],
            rhs: shape,
        });
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let (h, dh) = (cfg.n_heads, cfg.head_dim());
    let xn = layer_norm_p(ctx, x, &format!("{prefix}.ln"))?;
    let split = |ctx: &mut ModelCtx<S>, which: &str| -> Result<Var> {
        let w = ctx.p(&format!("{prefix}.w{which}"))?;
        let bias = ctx.p(&format!("{prefix}.b{which}"))?;
        let m = ctx.tape.matmul(xn, w)?;
        let m = ctx.tape.add_broadcast(m, bias)?;
        let r = ctx.tape.reshape(m, &[b, t, h, dh])?;
        ctx.tape.permute(r, &[0, 2, 1, 3]) // (B,h,T,dh)
    };
    let q = split(ctx, "q")?;
    let k = split(ctx, "k")?;
    let v = split(ctx, "v")?;
    let logits = ctx.tape.matmul_nt(q, k)?; // (B,h,T,T)
    let scaled = ctx.tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
    let attn = ctx.tape.softmax(scaled, 3)?;
    if ctx.collecting() {
        let map = ctx.tape.tensor(attn);
        ctx.attention
            .mhsa
            .entry(stream.to_string())
            .or_default()
            .push(map);
    }
    let o = ctx.tape.matmul(attn, v)?; // (B,h,T,dh)
    let o = ctx.tape.permute(o, &[0, 2, 1, 3])?;
    let o = ctx.tape.reshape(o, &[b, t, d])?;
    let wo = ctx.p(&format!("{prefix}.wo"))?;
    let bo = ctx.p(&format!("{prefix}.bo"))?;
    let proj = ctx.tape.matmul(o, wo)?;
    ctx.tape.add_broadcast(proj, bo)
}

/// Position-wise feed-forward sublayer (pre-norm). Swish in conformer
/// blocks, ReLU in transformer blocks.
fn ffn_sublayer<S: Scalar>(
    ctx: &mut ModelCtx<S>,
    x: Var,
    prefix: &str,
    kind: BlockKind,
) -> Result<Var> {
    let xn = layer_norm_p(ctx, x, &format!("{prefix}.ln"))?;
    let h = linear(ctx, xn, &format!("{prefix}.lin1"))?;
    let act = match kind {
        BlockKind::Conformer => ctx.tape.swish(h)?,
        BlockKind::Transformer => ctx.tape.relu(h)?,
    };
    linear(ctx, act, &format!("{prefix}.lin2"))
}

/// Conformer convolution module: pointwise expansion, GLU gate, depthwise
/// temporal convolution, swish, pointwise projection. Pre-norm.
fn conv_module<S: Scalar>(
    ctx: &mut ModelCtx<S>,
    x: Var,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let xn = layer_norm_p(ctx, x, &format!("{prefix}.ln"))?;
    let expanded = linear(ctx, xn, &format!("{prefix}.pw1"))?; // (B,T,2D)
    let gated = ctx.tape.glu(expanded)?; // (B,T,D)
    let chan = ctx.tape.permute(gated, &[0, 2, 1])?; // (B,D,T)
    let w = ctx.p(&format!("{prefix}.dw.w"))?;
    let bias = ctx.p(&format!("{prefix}.dw.b"))?;
    let conv = ctx
        .tape
        .conv1d_depthwise(chan, w, bias, (cfg.conv_module_kernel - 1) / 2)?;
    let act = ctx.tape.swish(conv)?;
    let back = ctx.tape.permute(act, &[0, 2, 1])?;
    let back = ctx.tape.reshape(back, &[b, t, d])?;
    linear(ctx, back, &format!("{prefix}.pw2"))
}

// ── encoder block ───────────────────────────────────────────────────────

fn split_streams<S: Scalar>(ctx: &mut ModelCtx<S>, x: Var, n: usize) -> Result<Vec<Var>> {
    let shape = ctx.tape.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[2], shape[3]);
    (0..n)
        .map(|m| {
            let s = ctx.tape.slice_axis(x, 1, m, 1)?;
            ctx.tape.reshape(s, &[b, t, d])
        })
        .collect()
}

fn residual<S: Scalar>(ctx: &mut ModelCtx<S>, x: Var, sub: Var, weight: f64) -> Result<Var> {
    let dropped = ctx.dropout(sub)?;
    let scaled = if weight == 1.0 {
        dropped
    } else {
        ctx.tape.scale(dropped, weight)?
    };
    ctx.tape.add(x, scaled)
}

/// One encoder block over `[B, M, T, D]` (M = number of streams; 1 for
/// uni-modal and early-fused models).
///
/// Transformer: x + FLCMA, x + MHSA, x + FFN, final LN.
/// Conformer (Macaron): x + 1/2 FFN1, x + FLCMA, x + MHSA, x + CONV,
/// x + 1/2 FFN2, final LN. All sublayers pre-norm; the cross-modal
/// sublayer appears only in FLCMA-fusion models.
pub fn encoder_block<S: Scalar>(
    ctx: &mut ModelCtx<S>,
    x: Var,
    streams: &[&'static str],
    block: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != streams.len() || shape[3] != cfg.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "encoder_block",
            lhs: vec![0, streams.len(), 0, cfg.embed_dim],
            rhs: shape,
        });
    }
    let with_flcma = cfg.has_flcma();
    let per_stream = |ctx: &mut ModelCtx<S>, x: Var, first_half: bool| -> Result<Vec<Var>> {
        let parts = split_streams(ctx, x, streams.len())?;
        let mut out = Vec::with_capacity(parts.len());
        for (m, xm) in parts.into_iter().enumerate() {
            let p = format!("enc.block{block}.{}", streams[m]);
            let mut y = xm;
            match cfg.block_kind {
                BlockKind::Conformer if first_half => {
                    let f = ffn_sublayer(ctx, y, &format!("{p}.ffn1"), cfg.block_kind)?;
                    y = residual(ctx, y, f, 0.5)?;
                }
                BlockKind::Conformer => {
                    let a = mhsa_time(ctx, y, &format!("{p}.mhsa"), streams[m], cfg)?;
                    y = residual(ctx, y, a, 1.0)?;
                    let c = conv_module(ctx, y, &format!("{p}.conv"), cfg)?;
                    y = residual(ctx, y, c, 1.0)?;
                    let f = ffn_sublayer(ctx, y, &format!("{p}.ffn2"), cfg.block_kind)?;
                    y = residual(ctx, y, f, 0.5)?;
                    y = layer_norm_p(ctx, y, &format!("{p}.ln_out"))?;
                }
                BlockKind::Transformer if first_half => {}
                BlockKind::Transformer => {
                    let a = mhsa_time(ctx, y, &format!("{p}.mhsa"), streams[m], cfg)?;
                    y = residual(ctx, y, a, 1.0)?;
                    let f = ffn_sublayer(ctx, y, &format!("{p}.ffn"), cfg.block_kind)?;
                    y = residual(ctx, y, f, 1.0)?;
                    y = layer_norm_p(ctx, y, &format!("{p}.ln_out"))?;
                }
            }
            out.push(y);
        }
        Ok(out)
    };

    let mut x = x;
    if cfg.block_kind == BlockKind::Conformer {
        let halves = per_stream(ctx, x, true)?;
        x = ctx.tape.stack(&halves, 1)?;
    }
    if with_flcma {
        let cm = flcma(ctx, x, block, cfg)?;
        x = residual(ctx, x, cm, 1.0)?;
    }
    let full = per_stream(ctx, x, false)?;
    ctx.tape.stack(&full, 1)
}

// ── fusion heads ────────────────────────────────────────────────────────

/// Convolution fusion of the modal feature `[B, 2, T, D]`: a 2-D conv stack
/// with channels 2 -> 4 -> 2 -> 1 (ReLU between, none after the last),
/// squeezed to `[B, T, D]`.
pub fn conv_fusion<S: Scalar>(ctx: &mut ModelCtx<S>, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != 2 {
        return Err(Error::ShapeMismatch {
            op: "conv_fusion",
            lhs: vec![0, 2, 0, 0],
            rhs: shape,
        });
    }
    let pad = cfg.conv_fusion_kernel / 2;
    let c1 = conv2d_p(ctx, x, "fusion.conv1", (1, 1), (pad, pad))?;
    let r1 = ctx.tape.relu(c1)?;
    let c2 = conv2d_p(ctx, r1, "fusion.conv2", (1, 1), (pad, pad))?;
    let r2 = ctx.tape.relu(c2)?;
    let c3 = conv2d_p(ctx, r2, "fusion.conv3", (1, 1), (pad, pad))?;
    ctx.tape.reshape(c3, &[shape[0], shape[2], shape[3]])
}

/// Attentive pooling over time: score each frame with v·tanh(Wx + b),
/// softmax over T, and return the weighted sum `[B, D]`.
pub fn attentive_pool<S: Scalar>(ctx: &mut ModelCtx<S>, x: Var) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "attentive_pool",
            lhs: vec![0, 0, 0],
            rhs: shape,
        });
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let hidden = linear(ctx, x, "pool")?;
    let act = ctx.tape.tanh(hidden)?;
    let v = ctx.p("pool.v")?;
    let v_col = ctx.tape.reshape(v, &[d, 1])?;
    let scores = ctx.tape.matmul(act, v_col)?; // (B,T,1)
    let scores = ctx.tape.reshape(scores, &[b, t])?;
    let alpha = ctx.tape.softmax(scores, 1)?;
    if ctx.collecting() {
        ctx.attention.pool_alpha = Some(ctx.tape.tensor(alpha));
    }
    let alpha_row = ctx.tape.reshape(alpha, &[b, 1, t])?;
    let pooled = ctx.tape.matmul(alpha_row, x)?; // (B,1,D)
    ctx.tape.reshape(pooled, &[b, d])
}

/// Classifier: linear D -> D/2, ReLU, linear D/2 -> 1, sigmoid. `[B]`.
pub fn classify<S: Scalar>(ctx: &mut ModelCtx<S>, e: Var) -> Result<Var> {
    let shape = ctx.tape.shape(e).to_vec();
    let b = shape[0];
    let h = linear(ctx, e, "cls.lin1")?;
    let r = ctx.tape.relu(h)?;
    let o = linear(ctx, r, "cls.lin2")?;
    let p = ctx.tape.sigmoid(o)?;
    ctx.tape.reshape(p, &[b])
}

// ── full model ──────────────────────────────────────────────────────────

fn frontend_with_pos<S: Scalar>(
    ctx: &mut ModelCtx<S>,
    modality: Modality,
    clip: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let feat = match modality {
        Modality::Audio => audio_frontend(ctx, clip, cfg)?,
        Modality::Visual => visual_frontend(ctx, clip, cfg)?,
    };
    let pos = ctx.p(&format!("pos.{}", modality.stream()))?;
    ctx.tape.add_broadcast(feat, pos)
}

/// Full audio-visual forward pass to wake-word probabilities `[B]`.
/// The fusion kind selects the pipeline:
/// - flcma: frontends -> stacked modal feature -> N FLCMA blocks ->
///   convolution fusion -> pool -> classify;
/// - early: concatenated features -> projection -> N standard blocks;
/// - late: two uni-modal encoder stacks -> concat -> projection.
pub fn forward<S: Scalar>(
    ctx: &mut ModelCtx<S>,
    audio: Var,
    video: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    cfg.validate()?;
    let xa = frontend_with_pos(ctx, Modality::Audio, audio, cfg)?;
    let xv = frontend_with_pos(ctx, Modality::Visual, video, cfg)?;
    let shape = ctx.tape.shape(xa).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let streams: Vec<&'static str> = cfg.encoder_streams();

    let fused: Var = match cfg.fusion {
        FusionKind::Flcma | FusionKind::Late => {
            // audio is modality index 0
            let mut x = ctx.tape.stack(&[xa, xv], 1)?; // (B,2,T,D)
            for block in 0..cfg.n_blocks {
                x = encoder_block(ctx, x, &streams, block, cfg)?;
            }
            if cfg.fusion == FusionKind::Flcma {
                conv_fusion(ctx, x, cfg)?
            } else {
                // concat along D, project back to D
                let parts = split_streams(ctx, x, 2)?;
                let cat = ctx.tape.concat(&parts, 2)?; // (B,T,2D)
                linear(ctx, cat, "late.comb")?
            }
        }
        FusionKind::Early => {
            let cat = ctx.tape.concat(&[xa, xv], 2)?; // (B,T,2D)
            let wfc = ctx.p("early.wfc")?;
            let proj = ctx.tape.matmul(cat, wfc)?; // X_fused, no bias
            let mut x = ctx.tape.reshape(proj, &[b, 1, t, d])?;
            for block in 0..cfg.n_blocks {
                x = encoder_block(ctx, x, &streams, block, cfg)?;
            }
            ctx.tape.reshape(x, &[b, t, d])?
        }
    };
    let pooled = attentive_pool(ctx, fused)?;
    classify(ctx, pooled)
}

/// Uni-modal encoder features: frontend + positional table + N standard
/// blocks, `[B, T, D]`. The sub-path shared between a uni-modal model and
/// the matching modality slice of a multi-modal one.
pub fn uni_modal_features<S: Scalar>(
    ctx: &mut ModelCtx<S>,
    modality: Modality,
    clip: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    // uni-modal encoders always use standard (non-cross-modal) blocks
    let uni_cfg = ModelConfig {
        fusion: FusionKind::Late,
        ..cfg.clone()
    };
    let feat = frontend_with_pos(ctx, modality, clip, &uni_cfg)?;
    let shape = ctx.tape.shape(feat).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let mut x = ctx.tape.reshape(feat, &[b, 1, t, d])?;
    let streams = [modality.stream()];
    for block in 0..uni_cfg.n_blocks {
        x = encoder_block(ctx, x, &streams, block, &uni_cfg)?;
    }
    ctx.tape.reshape(x, &[b, t, d])
}

/// Uni-modal forward: frontend -> N standard blocks -> pool -> classify.
/// Structurally the matching sub-network of the late-fusion model.
pub fn uni_modal_forward<S: Scalar>(
    ctx: &mut ModelCtx<S>,
    modality: Modality,
    clip: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let feats = uni_modal_features(ctx, modality, clip, cfg)?;
    let pooled = attentive_pool(ctx, feats)?;
    classify(ctx, pooled)
}

/// Convenience: run a no-grad eval forward over prepared clip tensors and
/// return probabilities plus collected attention artifacts.
pub fn run_eval_forward<S: Scalar>(
    params: &crate::model::ParamStore<S>,
    cfg: &ModelConfig,
    audio: &Tensor<S>,
    video: &Tensor<S>,
    collect_attention: bool,
) -> Result<(Tensor<S>, crate::model::AttentionArtifacts<S>)> {
    let mut tape = crate::tensor::Tape::new();
    let mut ctx = ModelCtx::new(&mut tape, params);
    if collect_attention {
        ctx = ctx.collecting_attention();
    }
    let a = ctx.tape.constant(audio);
    let v = ctx.tape.constant(video);
    let probs = forward(&mut ctx, a, v, cfg)?;
    let out = ctx.tape.tensor(probs);
    let attention = std::mem::take(&mut ctx.attention);
    Ok((out, attention))
}
