//! Layer-level oracle equivalence and structural properties of the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use avwws_core::model::{
    attentive_pool, classify, conv_fusion, encoder_block, flcma, forward, init_params, mhsa_time,
    multimodal_parameter_specs, BlockKind, FusionKind, ModelConfig, ModelCtx, ParamStore,
};
use avwws_core::tensor::{Tape, Tensor};

fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn tiny_cfg(kind: BlockKind, fusion: FusionKind) -> ModelConfig {
    ModelConfig::tiny(kind, fusion)
}

/// Raw-loop layer norm over the last axis, for oracles.
fn ln_rows(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + 1e-5).sqrt();
        for i in 0..d {
            out[r * d + i] = g[i] * (row[i] - mean) * istd + b[i];
        }
    }
    out
}

/// Direct per-frame loop oracle for frame-level cross-modal attention,
/// written against the definition, independent of the tape path.
#[allow(clippy::too_many_arguments)]
fn flcma_loop_oracle(
    x: &[f64], // (B,M,T,D)
    (b, m, t, d): (usize, usize, usize, usize),
    h: usize,
    params: &ParamStore<f64>,
    block: usize,
) -> Vec<f64> {
    let dh = d / h;
    let p = format!("enc.block{block}.flcma");
    let g = params.get(&format!("{p}.ln.g")).unwrap().data().to_vec();
    let beta = params.get(&format!("{p}.ln.b")).unwrap().data().to_vec();
    let xn = ln_rows(x, d, &g, &beta);
    // per (batch, frame): gather the M modality rows
    let mut concat_heads = vec![0.0; b * m * t * d];
    for bi in 0..b {
        for ti in 0..t {
            // rows[m][d] of normalized input at this frame
            let mut rows = vec![vec![0.0; d]; m];
            for (mi, row) in rows.iter_mut().enumerate() {
                let base = ((bi * m + mi) * t + ti) * d;
                row.copy_from_slice(&xn[base..base + d]);
            }
            for head in 0..h {
                let hp = format!("{p}.head{head}");
                let wq = params.get(&format!("{hp}.wq")).unwrap().data();
                let bq = params.get(&format!("{hp}.bq")).unwrap().data();
                let wk = params.get(&format!("{hp}.wk")).unwrap().data();
                let bk = params.get(&format!("{hp}.bk")).unwrap().data();
                let wv = params.get(&format!("{hp}.wv")).unwrap().data();
                let bv = params.get(&format!("{hp}.bv")).unwrap().data();
                let project = |w: &[f64], bias: &[f64]| -> Vec<Vec<f64>> {
                    rows.iter()
                        .map(|row| {
                            (0..dh)
                                .map(|j| {
                                    bias[j]
                                        + (0..d).map(|i| row[i] * w[i * dh + j]).sum::<f64>()
                                })
                                .collect()
                        })
                        .collect()
                };
                let q = project(wq, bq);
                let k = project(wk, bk);
                let v = project(wv, bv);
                // M x M logits, softmax over the last (modal) axis
                for qi in 0..m {
                    let mut logits = vec![0.0; m];
                    for (ki, logit) in logits.iter_mut().enumerate() {
                        *logit = (0..dh).map(|j| q[qi][j] * k[ki][j]).sum::<f64>()
                            / (dh as f64).sqrt();
                    }
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for j in 0..dh {
                        let mut o = 0.0;
                        for ki in 0..m {
                            o += exps[ki] / z * v[ki][j];
                        }
                        concat_heads[((bi * m + qi) * t + ti) * d + head * dh + j] = o;
                    }
                }
            }
        }
    }
    // output projection
    let wo = params.get(&format!("{p}.wo")).unwrap().data();
    let bo = params.get(&format!("{p}.bo")).unwrap().data();
    let mut out = vec![0.0; b * m * t * d];
    for r in 0..b * m * t {
        for j in 0..d {
            let mut acc = bo[j];
            for i in 0..d {
                acc += concat_heads[r * d + i] * wo[i * d + j];
            }
            out[r * d + j] = acc;
        }
    }
    out
}

fn flcma_params(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    init_params::<f64>(&multimodal_parameter_specs(cfg), seed)
}

#[test]
fn flcma_matches_loop_oracle_many_seeds() {
    // B=1, M=2, T=3, D=4, h=2 plus varied shapes; 100 seeded instances
    let mut cfg = tiny_cfg(BlockKind::Transformer, FusionKind::Flcma);
    cfg.embed_dim = 4;
    cfg.n_heads = 2;
    for seed in 0..100 {
        let (b, m, t) = (1 + (seed as usize) % 2, 2, 3 + (seed as usize) % 3);
        let params = flcma_params(&cfg, 100 + seed);
        let x = seeded(&[b, m, t, 4], 200 + seed);
        let want = flcma_loop_oracle(x.data(), (b, m, t, 4), 2, &params, 0);
        let mut tape = Tape::new();
        let mut ctx = ModelCtx::new(&mut tape, &params);
        let xv = ctx.tape.constant(&x);
        let y = flcma(&mut ctx, xv, 0, &cfg).unwrap();
        let got = tape.value(y);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "seed {seed}: {g} vs {w}");
        }
    }
}

#[test]
fn flcma_single_modality_is_projected_values() {
    // M=1: softmax over one element is 1, so output = Wo·(V) + bo
    let mut cfg = tiny_cfg(BlockKind::Transformer, FusionKind::Flcma);
    cfg.embed_dim = 8;
    cfg.n_heads = 2;
    let params = flcma_params(&cfg, 7);
    let x = seeded(&[2, 1, 3, 8], 8);
    let want = flcma_loop_oracle(x.data(), (2, 1, 3, 8), 2, &params, 0);
    let mut tape = Tape::new();
    let mut ctx = ModelCtx::new(&mut tape, &params);
    let xv = ctx.tape.constant(&x);
    let y = flcma(&mut ctx, xv, 0, &cfg).unwrap();
    for (g, w) in tape.value(y).iter().zip(&want) {
        assert!((g - w).abs() < 1e-9);
    }
}

#[test]
fn flcma_zero_query_key_gives_uniform_attention() {
    // W_q = W_k = 0 -> logits all equal -> attention uniform over M;
    // pre-projection output per modality = mean over modalities of V rows.
    let mut cfg = tiny_cfg(BlockKind::Transformer, FusionKind::Flcma);
    cfg.embed_dim = 8;
    cfg.n_heads = 2;
    let mut params = flcma_params(&cfg, 21);
    for head in 0..2 {
        for proj in ["wq", "wk"] {
            params
                .set(
                    &format!("enc.block0.flcma.head{head}.{proj}"),
                    Tensor::zeros(&[8, 4]),
                )
                .unwrap();
        }
        for bias in ["bq", "bk"] {
            params
                .set(&format!("enc.block0.flcma.head{head}.{bias}"), Tensor::zeros(&[4]))
                .unwrap();
        }
    }
    let x = seeded(&[1, 2, 3, 8], 22);
    let mut tape = Tape::new();
    let mut ctx = ModelCtx::new(&mut tape, &params).collecting_attention();
    let xv = ctx.tape.constant(&x);
    let _ = flcma(&mut ctx, xv, 0, &cfg).unwrap();
    let maps = &ctx.attention.flcma[0]; // (B,T,h,M,M)
    assert!(maps.data().iter().all(|&v| (v - 0.5).abs() < 1e-9));
}

#[test]
fn flcma_attention_rows_stochastic_and_permutation_equivariant() {
    let mut cfg = tiny_cfg(BlockKind::Transformer, FusionKind::Flcma);
    cfg.embed_dim = 8;
    cfg.n_heads = 2;
    let params = flcma_params(&cfg, 31);
    let x = seeded(&[1, 2, 4, 8], 32);
    let run = |input: &Tensor<f64>| -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let mut ctx = ModelCtx::new(&mut tape, &params).collecting_attention();
        let xv = ctx.tape.constant(input);
        let y = flcma(&mut ctx, xv, 0, &cfg).unwrap();
        let out = ctx.tape.value(y).to_vec();
        (out, ctx.attention.flcma[0].data().to_vec())
    };
    let (y, maps) = run(&x);
    // rows of each MxM map sum to 1
    for chunk in maps.chunks(2) {
        let s: f64 = chunk.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    // swap modalities: output must swap identically (no modal positional term)
    let (b, m, t, d) = (1, 2, 4, 8);
    let swap = |v: &[f64]| -> Vec<f64> {
        let mut out = v.to_vec();
        for bi in 0..b {
            for mi in 0..m {
                let src = ((bi * m + mi) * t) * d;
                let dst = ((bi * m + (1 - mi)) * t) * d;
                out[dst..dst + t * d].copy_from_slice(&v[src..src + t * d]);
            }
        }
        out
    };
    let x_swapped = Tensor::new(vec![b, m, t, d], swap(x.data())).unwrap();
    let (y_swapped, _) = run(&x_swapped);
    let y_expect = swap(&y);
    for (a, w) in y_swapped.iter().zip(&y_expect) {
        assert!((a - w).abs() < 1e-9);
    }
}

/// Independent loop oracle for per-stream time attention.
fn mhsa_loop_oracle(
    x: &[f64],
    (b, t, d): (usize, usize, usize),
    h: usize,
    params: &ParamStore<f64>,
    prefix: &str,
) -> Vec<f64> {
    let dh = d / h;
    let g = params.get(&format!("{prefix}.ln.g")).unwrap().data().to_vec();
    let beta = params.get(&format!("{prefix}.ln.b")).unwrap().data().to_vec();
    let xn = ln_rows(x, d, &g, &beta);
    let proj = |which: &str| -> (Vec<f64>, Vec<f64>) {
        (
            params.get(&format!("{prefix}.w{which}")).unwrap().data().to_vec(),
            params.get(&format!("{prefix}.b{which}")).unwrap().data().to_vec(),
        )
    };
    let (wq, bq) = proj("q");
    let (wk, bk) = proj("k");
    let (wv, bv) = proj("v");
    let apply = |w: &[f64], bias: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; b * t * d];
        for r in 0..b * t {
            for j in 0..d {
                let mut acc = bias[j];
                for i in 0..d {
                    acc += xn[r * d + i] * w[i * d + j];
                }
                out[r * d + j] = acc;
            }
        }
        out
    };
    let q = apply(&wq, &bq);
    let k = apply(&wk, &bk);
    let v = apply(&wv, &bv);
    let mut o = vec![0.0; b * t * d];
    for bi in 0..b {
        for head in 0..h {
            for ti in 0..t {
                let mut logits = vec![0.0; t];
                for (tj, logit) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for j in 0..dh {
                        dot += q[(bi * t + ti) * d + head * dh + j]
                            * k[(bi * t + tj) * d + head * dh + j];
                    }
                    *logit = dot / (dh as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..dh {
                    let mut acc = 0.0;
                    for tj in 0..t {
                        acc += exps[tj] / z * v[(bi * t + tj) * d + head * dh + j];
                    }
                    o[(bi * t + ti) * d + head * dh + j] = acc;
                }
            }
        }
    }
    let wo = params.get(&format!("{prefix}.wo")).unwrap().data();
    let bo = params.get(&format!("{prefix}.bo")).unwrap().data();
    let mut out = vec![0.0; b * t * d];
    for r in 0..b * t {
        for j in 0..d {
            let mut acc = bo[j];
            for i in 0..d {
                acc += o[r * d + i] * wo[i * d + j];
            }
            out[r * d + j] = acc;
        }
    }
    out
}

#[test]
fn mhsa_matches_loop_oracle_many_seeds() {
    let mut cfg = tiny_cfg(BlockKind::Transformer, FusionKind::Late);
    cfg.embed_dim = 4;
    cfg.n_heads = 2;
    let prefix = "enc.block0.audio.mhsa";
    for seed in 0..100 {
        let params = init_params::<f64>(&multimodal_parameter_specs(&cfg), 500 + seed);
        let (b, t) = (1 + (seed as usize) % 2, 2 + (seed as usize) % 4);
        let x = seeded(&[b, t, 4], 600 + seed);
        let want = mhsa_loop_oracle(x.data(), (b, t, 4), 2, &params, prefix);
        let mut tape = Tape::new();
        let mut ctx = ModelCtx::new(&mut tape, &params);
        let xv = ctx.tape.constant(&x);
        let y = mhsa_time(&mut ctx, xv, prefix, "audio", &cfg).unwrap();
        for (g, w) in tape.value(y).iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "seed {seed}");
        }
    }
}

#[test]
fn mhsa_t1_attention_is_one_and_rows_sum_to_one() {
    let cfg = tiny_cfg(BlockKind::Transformer, FusionKind::Late);
    let params = init_params::<f64>(&multimodal_parameter_specs(&cfg), 1);
    let x = seeded(&[2, 1, 32], 2);
    let mut tape = Tape::new();
    let mut ctx = ModelCtx::new(&mut tape, &params).collecting_attention();
    let xv = ctx.tape.constant(&x);
    let _ = mhsa_time(&mut ctx, xv, "enc.block0.audio.mhsa", "audio", &cfg).unwrap();
    let map = &ctx.attention.mhsa["audio"][0];
    assert!(map.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

    let x2 = seeded(&[1, 7, 32], 3);
    let mut tape2 = Tape::new();
    let mut ctx2 = ModelCtx::new(&mut tape2, &params).collecting_attention();
    let xv2 = ctx2.tape.constant(&x2);
    let _ = mhsa_time(&mut ctx2, xv2, "enc.block0.audio.mhsa", "audio", &cfg).unwrap();
    let map2 = ctx2.attention.mhsa["audio"][0].clone();
    for row in map2.data().chunks(7) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn encoder_block_preserves_shape_and_zeroed_sublayers_are_identity() {
    for kind in [BlockKind::Transformer, BlockKind::Conformer] {
        for fusion in [FusionKind::Flcma, FusionKind::Late] {
            let mut cfg = tiny_cfg(kind, fusion);
            cfg.embed_dim = 16;
            cfg.dropout = 0.0;
            let mut params = init_params::<f64>(&multimodal_parameter_specs(&cfg), 3);
            // zero every sublayer output projection (and its bias)
            let zero_names: Vec<String> = params
                .names()
                .filter(|n| {
                    n.starts_with("enc.block0")
                        && (n.ends_with("mhsa.wo")
                            || n.ends_with("mhsa.bo")
                            || n.ends_with("lin2.w")
                            || n.ends_with("lin2.b")
                            || n.ends_with("pw2.w")
                            || n.ends_with("pw2.b")
                            || n.ends_with("flcma.wo")
                            || n.ends_with("flcma.bo"))
                })
                .map(String::from)
                .collect();
            for name in zero_names {
                let shape = params.get(&name).unwrap().shape().to_vec();
                params.set(&name, Tensor::zeros(&shape)).unwrap();
            }
            let x = seeded(&[2, 2, 5, 16], 4);
            let mut tape = Tape::new();
            let mut ctx = ModelCtx::new(&mut tape, &params);
            let xv = ctx.tape.constant(&x);
            let y = encoder_block(&mut ctx, xv, &["audio", "visual"], 0, &cfg).unwrap();
            assert_eq!(ctx.tape.shape(y), x.shape());
            // identity up to the final LN: compare against LN applied directly
            let g = ctx.p("enc.block0.audio.ln_out.g").unwrap();
            let b = ctx.p("enc.block0.audio.ln_out.b").unwrap();
            let want = {
                let audio_slice = ctx.tape.slice_axis(xv, 1, 0, 1).unwrap();
                ctx.tape.layer_norm(audio_slice, g, b, 1e-5).unwrap()
            };
            let got_audio = ctx.tape.slice_axis(y, 1, 0, 1).unwrap();
            assert_eq!(
                ctx.tape.value(got_audio),
                ctx.tape.value(want),
                "{kind:?}/{fusion:?}: zeroed block must be identity up to final LN"
            );
        }
    }
}

#[test]
fn conv_fusion_shape_zero_and_oracle() {
    let mut cfg = tiny_cfg(BlockKind::Transformer, FusionKind::Flcma);
    cfg.embed_dim = 8;
    let params = init_params::<f64>(&multimodal_parameter_specs(&cfg), 9);

    // zero input + zero biases -> zero output (biases init to zero already)
    let zeros = Tensor::zeros(&[1, 2, 4, 8]);
    let mut tape = Tape::new();
    let mut ctx = ModelCtx::new(&mut tape, &params);
    let z = ctx.tape.constant(&zeros);
    let y = conv_fusion(&mut ctx, z, &cfg).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 8]);
    assert!(tape.value(y).iter().all(|&v| v == 0.0));

    // equivalence with a direct loop conv stack on a 2x4x4 map
    let x = seeded(&[1, 2, 4, 4], 10);
    let mut cfg2 = cfg.clone();
    cfg2.embed_dim = 8; // unused by fusion itself
    let run_loop = |x: &[f64]| -> Vec<f64> {
        let conv = |inp: &[f64], cin: usize, cout: usize, h: usize, w: usize, wgt: &[f64], bias: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; cout * h * w];
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = y as isize + ky - 1;
                                    let ix = xx as isize + kx - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += inp[(ci * h + iy as usize) * w + ix as usize]
                                            * wgt[((co * cin + ci) * 3 + ky as usize) * 3
                                                + kx as usize];
                                    }
                                }
                            }
                        }
                        out[(co * h + y) * w + xx] = acc;
                    }
                }
            }
            out
        };
        let relu = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.max(0.0)).collect() };
        let w1 = params.get("fusion.conv1.w").unwrap().data();
        let b1 = params.get("fusion.conv1.b").unwrap().data();
        let w2 = params.get("fusion.conv2.w").unwrap().data();
        let b2 = params.get("fusion.conv2.b").unwrap().data();
        let w3 = params.get("fusion.conv3.w").unwrap().data();
        let b3 = params.get("fusion.conv3.b").unwrap().data();
        let c1 = relu(conv(x, 2, 4, 4, 4, w1, b1));
        let c2 = relu(conv(&c1, 4, 2, 4, 4, w2, b2));
        conv(&c2, 2, 1, 4, 4, w3, b3)
    };
    let want = run_loop(x.data());
    let mut tape2 = Tape::new();
    let mut ctx2 = ModelCtx::new(&mut tape2, &params);
    let xv = ctx2.tape.constant(&x);
    let y2 = conv_fusion(&mut ctx2, xv, &cfg2).unwrap();
    for (g, w) in tape2.value(y2).iter().zip(&want) {
        assert!((g - w).abs() < 1e-6);
    }
}

#[test]
fn attentive_pool_properties() {
    let cfg = tiny_cfg(BlockKind::Transformer, FusionKind::Late);
    let mut params = init_params::<f64>(&multimodal_parameter_specs(&cfg), 12);

    // T = 1: output equals the single frame
    let x1 = seeded(&[2, 1, 32], 13);
    let mut tape = Tape::new();
    let mut ctx = ModelCtx::new(&mut tape, &params);
    let xv = ctx.tape.constant(&x1);
    let y = attentive_pool(&mut ctx, xv).unwrap();
    for (a, b) in tape.value(y).iter().zip(x1.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    // v = 0: uniform weights, output = time mean; alpha sums to 1
    params.set("pool.v", Tensor::zeros(&[32])).unwrap();
    let x = seeded(&[1, 5, 32], 14);
    let mut tape2 = Tape::new();
    let mut ctx2 = ModelCtx::new(&mut tape2, &params).collecting_attention();
    let xv2 = ctx2.tape.constant(&x);
    let y2 = attentive_pool(&mut ctx2, xv2).unwrap();
    let alpha = ctx2.attention.pool_alpha.clone().unwrap();
    assert!(alpha.data().iter().all(|&a| (a - 0.2).abs() < 1e-9));
    let s: f64 = alpha.data()[..5].iter().sum();
    assert!((s - 1.0).abs() < 1e-6);
    for j in 0..32 {
        let mean: f64 = (0..5).map(|t| x.data()[t * 32 + j]).sum::<f64>() / 5.0;
        assert!((tape2.value(y2)[j] - mean).abs() < 1e-9);
    }
}

#[test]
fn classifier_properties() {
    let cfg = tiny_cfg(BlockKind::Transformer, FusionKind::Late);
    let mut params = init_params::<f64>(&multimodal_parameter_specs(&cfg), 15);

    // zero weights and biases -> sigmoid(0) = 0.5 for any input
    params.set("cls.lin1.w", Tensor::zeros(&[32, 16])).unwrap();
    params.set("cls.lin2.w", Tensor::zeros(&[16, 1])).unwrap();
    let e = seeded(&[3, 32], 16);
    let mut tape = Tape::new();
    let mut ctx = ModelCtx::new(&mut tape, &params);
    let ev = ctx.tape.constant(&e);
    let y = classify(&mut ctx, ev).unwrap();
    assert!(tape.value(y).iter().all(|&p| (p - 0.5).abs() < 1e-12));

    // outputs strictly in (0,1); monotone in final-layer bias
    let params2 = init_params::<f64>(&multimodal_parameter_specs(&cfg), 17);
    let run_with_bias = |bias: f64| -> Vec<f64> {
        let mut p = params2.clone();
        p.set("cls.lin2.b", Tensor::full(&[1], bias)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = ModelCtx::new(&mut tape, &p);
        let ev = ctx.tape.constant(&e);
        let y = classify(&mut ctx, ev).unwrap();
        tape.value(y).to_vec()
    };
    let lo = run_with_bias(-1.0);
    let hi = run_with_bias(1.0);
    for (l, h) in lo.iter().zip(&hi) {
        assert!(*l > 0.0 && *l < 1.0 && *h > 0.0 && *h < 1.0);
        assert!(h > l, "sigmoid must be monotone in the bias");
    }
}

#[test]
fn early_fusion_identity_projection_selects_audio() {
    // W_fc = [I; 0]: the fused feature equals the audio feature entering
    // the encoder. Check by comparing against the same model run on a
    // visual input replaced with a different clip: outputs must match.
    let mut cfg = tiny_cfg(BlockKind::Transformer, FusionKind::Early);
    cfg.dropout = 0.0;
    let d = cfg.embed_dim;
    let mut params = init_params::<f64>(&multimodal_parameter_specs(&cfg), 18);
    let mut wfc = vec![0.0f64; 2 * d * d];
    for i in 0..d {
        wfc[i * d + i] = 1.0; // top half identity, bottom half zero
    }
    params
        .set("early.wfc", Tensor::new(vec![2 * d, d], wfc).unwrap())
        .unwrap();
    let audio = seeded(&[1, 256, 80], 19);
    let video_a = {
        let mut rng = ChaCha20Rng::seed_from_u64(20);
        Tensor::from_fn(&[1, 64, 32, 32, 3], |_| rng.random_range(0.0..1.0))
    };
    let video_b = {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        Tensor::from_fn(&[1, 64, 32, 32, 3], |_| rng.random_range(0.0..1.0))
    };
    let run = |video: &Tensor<f64>| -> Vec<f64> {
        let mut tape = Tape::new();
        let mut ctx = ModelCtx::new(&mut tape, &params);
        let a = ctx.tape.constant(&audio);
        let v = ctx.tape.constant(video);
        let y = forward(&mut ctx, a, v, &cfg).unwrap();
        tape.value(y).to_vec()
    };
    let ya = run(&video_a);
    let yb = run(&video_b);
    for (a, b) in ya.iter().zip(&yb) {
        assert!((a - b).abs() < 1e-9, "visual stream must be projected away");
    }
}

#[test]
fn forward_shapes_for_all_variants() {
    for kind in [BlockKind::Transformer, BlockKind::Conformer] {
        for fusion in [FusionKind::Flcma, FusionKind::Early, FusionKind::Late] {
            let mut cfg = tiny_cfg(kind, fusion);
            cfg.n_blocks = 1;
            let params = init_params::<f64>(&multimodal_parameter_specs(&cfg), 23);
            let audio = seeded(&[2, 256, 80], 24);
            let mut rng = ChaCha20Rng::seed_from_u64(25);
            let video = Tensor::from_fn(&[2, 64, 32, 32, 3], |_| rng.random_range(0.0..1.0));
            let mut tape = Tape::new();
            let mut ctx = ModelCtx::new(&mut tape, &params);
            let a = ctx.tape.constant(&audio);
            let v = ctx.tape.constant(&video);
            let y = forward(&mut ctx, a, v, &cfg).unwrap();
            assert_eq!(tape.shape(y), &[2], "{kind:?}/{fusion:?}");
            assert!(tape.value(y).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

#[test]
fn visual_frontend_temporal_shift_equivariance() {
    // A circular temporal shift of the input shifts the frontend output by
    // the same amount on interior frames (temporal stride 1, symmetric
    // padding; the clip-mean frame is shift-invariant under a circular
    // shift, and all later stages act per frame).
    use avwws_core::model::visual_frontend;
    let mut cfg = tiny_cfg(BlockKind::Conformer, FusionKind::Late);
    cfg.embed_dim = 16;
    let params = init_params::<f64>(&multimodal_parameter_specs(&cfg), 41);
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let t = 64usize;
    let base = Tensor::from_fn(&[1, t, 32, 32, 3], |_| rng.random_range(0.0..1.0));
    let k = 3usize;
    let frame = 32 * 32 * 3;
    let shifted = Tensor::from_fn(&[1, t, 32, 32, 3], |i| {
        let (ti, rest) = (i / frame, i % frame);
        base.data()[((ti + t - k) % t) * frame + rest]
    });
    let run = |clip: &Tensor<f64>| -> Vec<f64> {
        let mut tape = Tape::new();
        let mut ctx = ModelCtx::new(&mut tape, &params);
        let v = ctx.tape.constant(clip);
        let y = visual_frontend(&mut ctx, v, &cfg).unwrap();
        tape.value(y).to_vec()
    };
    let y_base = run(&base);
    let y_shift = run(&shifted);
    // interior frames: the 5-tap stem reaches 2 frames each way
    let d = cfg.embed_dim;
    for ti in (k + 2)..(t - 2) {
        for j in 0..d {
            let a = y_shift[ti * d + j];
            let b = y_base[(ti - k) * d + j];
            assert!(
                (a - b).abs() < 1e-9,
                "frame {ti} dim {j}: shifted {a} vs base {b}"
            );
        }
    }
}

#[test]
fn eval_forward_deterministic() {
    let cfg = tiny_cfg(BlockKind::Conformer, FusionKind::Flcma);
    let params = init_params::<f64>(&multimodal_parameter_specs(&cfg), 29);
    let audio = seeded(&[1, 256, 80], 30);
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    let video = Tensor::from_fn(&[1, 64, 32, 32, 3], |_| rng.random_range(0.0..1.0));
    let run = || -> Vec<f64> {
        let mut tape = Tape::new();
        let mut ctx = ModelCtx::new(&mut tape, &params);
        let a = ctx.tape.constant(&audio);
        let v = ctx.tape.constant(&video);
        let y = forward(&mut ctx, a, v, &cfg).unwrap();
        tape.value(y).to_vec()
    };
    assert_eq!(run(), run());
}
