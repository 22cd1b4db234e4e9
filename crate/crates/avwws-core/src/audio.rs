//! Acoustic features: log-mel filterbanks (FBank) and SpecAugment.
//!
//! The pipeline per frame: pre-emphasis 0.97, Hann window, power spectrum
//! via a radix-2 real FFT (size = next power of two ≥ window), triangular
//! mel filterbank on the HTK scale from 0 Hz to Nyquist, natural log with a
//! floor of 1e-10. 25 ms windows with a 10 ms shift; clips are fit to
//! exactly 256 frames by uniform subsampling or symmetric edge padding.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::runtime;
use crate::tensor::Tensor;

pub const N_MELS: usize = 80;
pub const TARGET_FRAMES: usize = 256;
pub const SAMPLE_RATE: u32 = 16_000;
pub const WIN_MS: usize = 25;
pub const HOP_MS: usize = 10;
pub const PRE_EMPHASIS: f32 = 0.97;
pub const LOG_FLOOR: f32 = 1e-10;

/// Mono waveform with samples nominally in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform", "empty sample buffer"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("waveform", "sample_rate must be > 0"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Samples per analysis window (25 ms).
    pub fn window_len(&self) -> usize {
        self.sample_rate as usize * WIN_MS / 1000
    }

    /// Samples per frame shift (10 ms).
    pub fn hop_len(&self) -> usize {
        self.sample_rate as usize * HOP_MS / 1000
    }
}

/// A fixed-size FBank clip: exactly 256 frames of 80 log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankClip {
    /// `[256, 80]`
    pub frames: Tensor<f32>,
}

impl FbankClip {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.shape() != [TARGET_FRAMES, N_MELS] {
            return Err(Error::ShapeMismatch {
                op: "fbank_clip",
                lhs: vec![TARGET_FRAMES, N_MELS],
                rhs: frames.shape().to_vec(),
            });
        }
        if !frames.is_all_finite() {
            return Err(Error::NonFinite { op: "fbank_clip" });
        }
        Ok(Self { frames })
    }
}

// ── FFT ─────────────────────────────────────────────────────────────────

/// In-place iterative radix-2 FFT over interleaved (re, im) pairs.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cur_re, mut cur_im) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let u_re = re[i + k];
                let u_im = im[i + k];
                let v_re = re[i + k + len / 2] * cur_re - im[i + k + len / 2] * cur_im;
                let v_im = re[i + k + len / 2] * cur_im + im[i + k + len / 2] * cur_re;
                re[i + k] = u_re + v_re;
                im[i + k] = u_im + v_im;
                re[i + k + len / 2] = u_re - v_re;
                im[i + k + len / 2] = u_im - v_im;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Power spectrum (|X_k|²) of a real frame, bins 0..=n/2.
fn power_spectrum(frame: &[f64], n_fft: usize, out: &mut [f64]) {
    let mut re = vec![0.0f64; n_fft];
    let mut im = vec![0.0f64; n_fft];
    re[..frame.len()].copy_from_slice(frame);
    fft_in_place(&mut re, &mut im);
    for (k, o) in out.iter_mut().enumerate() {
        *o = re[k] * re[k] + im[k] * im[k];
    }
}

// ── mel scale ───────────────────────────────────────────────────────────

/// HTK mel scale: 2595·log10(1 + f/700).
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` triangular filters spanning
/// 0 Hz to Nyquist.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|k| mel_to_hz(mel_max * k as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filterbank: `n_mels` rows of weights over `n_bins` FFT bins.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    // n_mels + 2 edge points, uniformly spaced in mel
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|k| mel_to_hz(mel_max * k as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    let mut bank = vec![vec![0.0f64; n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        for (k, &f) in bin_hz.iter().enumerate() {
            if f > lo && f < center {
                bank[m][k] = (f - lo) / (center - lo);
            } else if (f - center).abs() < f64::EPSILON {
                bank[m][k] = 1.0;
            } else if f > center && f < hi {
                bank[m][k] = (hi - f) / (hi - center);
            }
        }
    }
    bank
}

// ── FBank extraction ────────────────────────────────────────────────────

/// Raw FBank features `[T_raw, 80]` from a waveform.
///
/// The analysis runs in f64 throughout; `S` only selects the output storage
/// precision (f32 for the model path, f64 for invariant checks).
pub fn fbank_with<S: crate::tensor::Scalar>(w: &Waveform) -> Result<Tensor<S>> {
    let win = w.window_len();
    let hop = w.hop_len();
    if w.samples.len() < win {
        return Err(Error::invalid(
            "fbank",
            format!("waveform too short: {} samples < window {win}", w.samples.len()),
        ));
    }
    let n_frames = (w.samples.len() - win) / hop + 1;
    let n_fft = win.next_power_of_two();
    let bank = mel_filterbank(N_MELS, n_fft, w.sample_rate);
    let n_bins = n_fft / 2 + 1;

    // pre-emphasis over the whole waveform: y[n] = x[n] − 0.97·x[n−1]
    let mut emph = vec![0.0f64; w.samples.len()];
    emph[0] = w.samples[0] as f64;
    for i in 1..w.samples.len() {
        emph[i] = w.samples[i] as f64 - PRE_EMPHASIS as f64 * w.samples[i - 1] as f64;
    }
    // periodic Hann window
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();

    let rows: Vec<Vec<S>> = runtime::map_collect(n_frames, |t| {
        let mut frame = vec![0.0f64; win];
        for i in 0..win {
            frame[i] = emph[t * hop + i] * hann[i];
        }
        let mut power = vec![0.0f64; n_bins];
        power_spectrum(&frame, n_fft, &mut power);
        let mut row = vec![S::ZERO; N_MELS];
        for m in 0..N_MELS {
            let mut e = 0.0f64;
            for (k, &w) in bank[m].iter().enumerate() {
                if w > 0.0 {
                    e += w * power[k];
                }
            }
            row[m] = S::from_f64(e.max(LOG_FLOOR as f64).ln());
        }
        row
    });
    let mut data = Vec::with_capacity(n_frames * N_MELS);
    for r in rows {
        data.extend(r);
    }
    Tensor::new(vec![n_frames, N_MELS], data)
}

/// Raw FBank features `[T_raw, 80]` in the model's f32 precision.
pub fn fbank(w: &Waveform) -> Result<Tensor<f32>> {
    fbank_with::<f32>(w)
}

/// Fit a raw feature matrix to exactly `TARGET_FRAMES` rows: uniform index
/// subsampling when longer, symmetric edge padding when shorter.
pub fn fit_frames(f: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = f.shape();
    if shape.len() != 2 || shape[1] != N_MELS {
        return Err(Error::ShapeMismatch {
            op: "fit_frames",
            lhs: vec![0, N_MELS],
            rhs: shape.to_vec(),
        });
    }
    let t_raw = shape[0];
    let src = f.data();
    let mut out = Vec::with_capacity(TARGET_FRAMES * N_MELS);
    if t_raw >= TARGET_FRAMES {
        for i in 0..TARGET_FRAMES {
            let idx = i * t_raw / TARGET_FRAMES;
            out.extend_from_slice(&src[idx * N_MELS..(idx + 1) * N_MELS]);
        }
    } else {
        let pad_total = TARGET_FRAMES - t_raw;
        let pad_front = pad_total / 2;
        for _ in 0..pad_front {
            out.extend_from_slice(&src[0..N_MELS]);
        }
        out.extend_from_slice(src);
        for _ in 0..pad_total - pad_front {
            out.extend_from_slice(&src[(t_raw - 1) * N_MELS..t_raw * N_MELS]);
        }
    }
    Tensor::new(vec![TARGET_FRAMES, N_MELS], out)
}

/// Waveform to a fixed 256-frame FBank clip.
pub fn fbank_clip(w: &Waveform) -> Result<FbankClip> {
    let raw = fbank(w)?;
    FbankClip::new(fit_frames(&raw)?)
}

/// Per-clip global mean/variance normalization, applied at model input
/// (stored clips keep raw log energies).
pub fn normalize_fbank(t: &Tensor<f32>) -> Tensor<f32> {
    let n = t.numel() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var.sqrt() + 1e-5);
    Tensor::from_fn(t.shape(), |i| ((t.data()[i] as f64 - mean) * inv) as f32)
}

// ── SpecAugment ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct SpecAugmentConfig {
    pub n_freq_masks: usize,
    /// Maximum frequency-mask width (bins).
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    /// Maximum time-mask width (frames).
    pub max_time_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            n_freq_masks: 2,
            max_freq_width: 10,
            n_time_masks: 2,
            max_time_width: 20,
        }
    }
}

/// Mask random time and frequency bands, filling with the clip mean.
/// Deterministic for a given seed; the label is untouched by construction.
pub fn spec_augment(clip: &FbankClip, cfg: &SpecAugmentConfig, seed: u64) -> Result<FbankClip> {
    if cfg.max_freq_width > N_MELS {
        return Err(Error::invalid(
            "spec_augment",
            format!("freq mask width {} exceeds {N_MELS} bins", cfg.max_freq_width),
        ));
    }
    if cfg.max_time_width > TARGET_FRAMES {
        return Err(Error::invalid(
            "spec_augment",
            format!("time mask width {} exceeds {TARGET_FRAMES} frames", cfg.max_time_width),
        ));
    }
    if cfg.n_freq_masks == 0 && cfg.n_time_masks == 0 {
        return Ok(clip.clone());
    }
    let src = clip.frames.data();
    let mean = src.iter().map(|&v| v as f64).sum::<f64>() / src.len() as f64;
    let fill = mean as f32;
    let mut data = src.to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for _ in 0..cfg.n_freq_masks {
        let width = rng.random_range(0..=cfg.max_freq_width);
        if width == 0 {
            continue;
        }
        let start = rng.random_range(0..=N_MELS - width);
        for t in 0..TARGET_FRAMES {
            for m in start..start + width {
                data[t * N_MELS + m] = fill;
            }
        }
    }
    for _ in 0..cfg.n_time_masks {
        let width = rng.random_range(0..=cfg.max_time_width);
        if width == 0 {
            continue;
        }
        let start = rng.random_range(0..=TARGET_FRAMES - width);
        for t in start..start + width {
            for m in 0..N_MELS {
                data[t * N_MELS + m] = fill;
            }
        }
    }
    FbankClip::new(Tensor::new(vec![TARGET_FRAMES, N_MELS], data)?)
}

// ── WAV reading (16-bit PCM mono) ───────────────────────────────────────

/// Read a single-channel 16-bit little-endian PCM WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format(format!("{}: not a RIFF/WAVE file", path.display())));
    }
    let mut pos = 12usize;
    let mut sample_rate = 0u32;
    let mut channels = 0u16;
    let mut bits = 0u16;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("short fmt chunk".into()));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 {
                    return Err(Error::Format(format!("unsupported WAV format {format}")));
                }
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    if channels != 1 || bits != 16 {
        return Err(Error::Format(format!(
            "need mono 16-bit PCM, got {channels} channel(s) at {bits} bits"
        )));
    }
    let samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Write a mono 16-bit PCM WAV (used by tests and corpus export).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}
