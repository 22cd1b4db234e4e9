//! Loop oracles shared between integration-test targets. Written directly
//! against the layer definitions; independent of the tape implementation.

#![allow(dead_code)]

use avwws_core::model::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn seeded_tensor(shape: &[usize], seed: u64) -> avwws_core::tensor::Tensor<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    avwws_core::tensor::Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn ln_rows(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
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

/// Frame-level cross-modal attention oracle over `[B, M, T, D]`.
pub fn flcma_loop_oracle(
    x: &[f64],
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
    let mut concat_heads = vec![0.0; b * m * t * d];
    for bi in 0..b {
        for ti in 0..t {
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
                                    bias[j] + (0..d).map(|i| row[i] * w[i * dh + j]).sum::<f64>()
                                })
                                .collect()
                        })
                        .collect()
                };
                let q = project(wq, bq);
                let k = project(wk, bk);
                let v = project(wv, bv);
                for qi in 0..m {
                    let mut logits = vec![0.0; m];
                    for (ki, logit) in logits.iter_mut().enumerate() {
                        *logit =
                            (0..dh).map(|j| q[qi][j] * k[ki][j]).sum::<f64>() / (dh as f64).sqrt();
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

/// Per-stream time attention oracle over `[B, T, D]`.
pub fn mhsa_loop_oracle(
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
            params
                .get(&format!("{prefix}.w{which}"))
                .unwrap()
                .data()
                .to_vec(),
            params
                .get(&format!("{prefix}.b{which}"))
                .unwrap()
                .data()
                .to_vec(),
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

/// Direct loop conv2d (cross-correlation), one batch of images.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_loop_oracle(
    x: &[f64],
    (b, cin, h, w): (usize, usize, usize, usize),
    wgt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Vec<f64> {
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[((bi * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * wgt[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Direct loop conv3d (cross-correlation), single sample.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_loop_oracle(
    x: &[f64],
    (cin, t, h, w): (usize, usize, usize, usize),
    wgt: &[f64],
    (cout, kt, kh, kw): (usize, usize, usize, usize),
    bias: &[f64],
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Vec<f64> {
    let ot = (t + 2 * pad.0 - kt) / stride.0 + 1;
    let oh = (h + 2 * pad.1 - kh) / stride.1 + 1;
    let ow = (w + 2 * pad.2 - kw) / stride.2 + 1;
    let mut out = vec![0.0; cout * ot * oh * ow];
    for co in 0..cout {
        for ott in 0..ot {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for qt in 0..kt {
                            for qy in 0..kh {
                                for qx in 0..kw {
                                    let it = (ott * stride.0 + qt) as isize - pad.0 as isize;
                                    let iy = (oy * stride.1 + qy) as isize - pad.1 as isize;
                                    let ix = (ox * stride.2 + qx) as isize - pad.2 as isize;
                                    if it >= 0
                                        && iy >= 0
                                        && ix >= 0
                                        && (it as usize) < t
                                        && (iy as usize) < h
                                        && (ix as usize) < w
                                    {
                                        acc += x[((ci * t + it as usize) * h + iy as usize) * w
                                            + ix as usize]
                                            * wgt[(((co * cin + ci) * kt + qt) * kh + qy) * kw
                                                + qx];
                                    }
                                }
                            }
                        }
                    }
                    out[((co * ot + ott) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}
