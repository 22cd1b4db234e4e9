//! Seeded synthetic audio-visual wake-word corpus.
//!
//! Positives embed a deterministic wake pattern: two repetitions of a
//! two-syllable rising-tone pair in the audio, with a synchronized
//! lip-aperture ellipse in the video whose opening follows the syllable
//! envelope. Negatives carry distractor tones and lip motion with different
//! temporal structure. Audio and video can be corrupted independently
//! (additive noise at a target SNR; per-frame lip occlusion), which is what
//! makes the task require fusion under the `split` mode.
//!
//! Everything is a pure function of the seed stream: per-sample seeds are
//! derived from (corpus seed, split name, index), so splits are disjoint
//! and parallel generation is deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{fbank_clip, FbankClip, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::runtime;
use crate::tensor::Tensor;

pub const VIDEO_FRAMES: usize = 64;
pub const VIDEO_CHANNELS: usize = 3;
/// Seconds per video frame (25 fps).
pub const FRAME_SECONDS: f64 = 0.040;
/// Waveform length chosen so raw FBank extraction yields exactly 256 frames.
pub const WAVE_SAMPLES: usize = 41_200;

// Wake pattern layout, in video frames: two repetitions of a two-syllable
// pair. Each syllable spans 4 frames (160 ms); the second repetition starts
// 12 frames after the first.
pub const SYLLABLE_FRAMES: usize = 4;
pub const REP_GAP_FRAMES: usize = 12;
pub const PATTERN_FRAMES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossNoiseMode {
    /// No corruption: both modalities clean.
    None,
    /// Every sample's audio corrupted at a random SNR from the range.
    AudioOnly,
    /// Every sample's video occluded at the configured rate.
    VideoOnly,
    /// Alternating halves: audio corrupted at the low end of the SNR range,
    /// or video occluded at the configured rate. Applied to both classes so
    /// corruption itself carries no label information.
    Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_train_pos: usize,
    pub n_train_neg: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    /// Positive fraction for dev/eval splits (1:4 ratio by default).
    pub pos_fraction: f64,
    /// SNR range in dB for audio corruption.
    pub audio_snr_range: (f64, f64),
    /// Per-frame occlusion probability for video corruption.
    pub occlusion_rate: f64,
    pub cross_noise_mode: CrossNoiseMode,
    /// Square video side: 32 (tiny) or 112 (paper shape).
    pub video_size: usize,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn tiny(seed: u64) -> Self {
        Self {
            n_train_pos: 400,
            n_train_neg: 1600,
            n_dev: 400,
            n_eval: 400,
            pos_fraction: 0.2,
            audio_snr_range: (-15.0, 15.0),
            occlusion_rate: 0.9,
            cross_noise_mode: CrossNoiseMode::Split,
            video_size: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("corpus.{name}"), msg))
            }
        };
        field("n_train_pos", self.n_train_pos > 0, "must be > 0")?;
        field("n_train_neg", self.n_train_neg > 0, "must be > 0")?;
        field("n_dev", self.n_dev > 0, "must be > 0")?;
        field("n_eval", self.n_eval > 0, "must be > 0")?;
        field(
            "pos_fraction",
            self.pos_fraction > 0.0 && self.pos_fraction < 1.0,
            "must be in (0,1)",
        )?;
        field(
            "audio_snr_range",
            self.audio_snr_range.0 <= self.audio_snr_range.1
                && self.audio_snr_range.0 >= -15.0
                && self.audio_snr_range.1 <= 15.0,
            "must be an ordered range within [-15, 15] dB",
        )?;
        field(
            "occlusion_rate",
            (0.0..=1.0).contains(&self.occlusion_rate),
            "must be in [0,1]",
        )?;
        field(
            "video_size",
            self.video_size >= 16,
            "side must be at least 16 pixels",
        )?;
        Ok(())
    }
}

/// Fixed-length RGB clip with pixel values quantized to 1/255 steps.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    /// `[64, size, size, 3]`, row-major, u8-quantized intensities.
    pub data: Vec<u8>,
    pub size: usize,
}

impl VideoClip {
    pub fn new(data: Vec<u8>, size: usize) -> Result<Self> {
        if data.len() != VIDEO_FRAMES * size * size * VIDEO_CHANNELS {
            return Err(Error::invalid(
                "video_clip",
                format!("expected {} bytes for size {size}", VIDEO_FRAMES * size * size * 3),
            ));
        }
        Ok(Self { data, size })
    }

    /// `[64, size, size, 3]` tensor with values in [0,1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn(
            &[VIDEO_FRAMES, self.size, self.size, VIDEO_CHANNELS],
            |i| self.data[i] as f32 / 255.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Seed that fully determines the clean render of this sample.
    pub pattern_seed: u64,
    /// SNR of applied audio corruption, if any.
    pub snr_db: Option<f64>,
    /// Rate of applied video occlusion, if any.
    pub occlusion_rate: Option<f64>,
    /// Video-frame onsets of the two wake-pattern repetitions (positives).
    pub wake_onsets: Option<[usize; 2]>,
}

#[derive(Debug, Clone)]
pub struct AvSample {
    pub id: String,
    pub label: u8,
    pub audio: FbankClip,
    pub video: VideoClip,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<AvSample>,
    pub dev: Vec<AvSample>,
    pub eval: Vec<AvSample>,
    pub video_size: usize,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[AvSample]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "eval" => Ok(&self.eval),
            other => Err(Error::invalid("corpus", format!("unknown split `{other}`"))),
        }
    }
}

/// Deterministic stream-seed derivation (FNV-1a over the tag, then a
/// splitmix64 avalanche).
pub fn derive_seed(base: u64, tag: &str, k: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ base.wrapping_mul(0x9E3779B97F4A7C15);
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h = (h ^ k).wrapping_mul(0x100000001b3);
    let mut z = h.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

// ── clean sample rendering ──────────────────────────────────────────────

/// One tonal syllable: a rising chirp under a raised-cosine envelope.
#[derive(Debug, Clone, Copy)]
struct Syllable {
    start_s: f64,
    dur_s: f64,
    f0: f64,
    f1: f64,
    phase: f64,
}

fn raised_cosine(u: f64, dur: f64) -> f64 {
    if u < 0.0 || u >= dur {
        0.0
    } else {
        let s = (std::f64::consts::PI * u / dur).sin();
        s * s
    }
}

fn wake_syllables(onset_frame: usize, rng: &mut ChaCha20Rng) -> Vec<Syllable> {
    let dur = SYLLABLE_FRAMES as f64 * FRAME_SECONDS;
    let mut syl = Vec::with_capacity(4);
    for rep in 0..2 {
        let rep_start = (onset_frame + rep * REP_GAP_FRAMES) as f64 * FRAME_SECONDS;
        syl.push(Syllable {
            start_s: rep_start,
            dur_s: dur,
            f0: 600.0,
            f1: 900.0,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        });
        syl.push(Syllable {
            start_s: rep_start + dur,
            dur_s: dur,
            f0: 900.0,
            f1: 1300.0,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        });
    }
    syl
}

fn render_audio(syllables: &[Syllable], amp: f64, noise_seed: u64) -> Vec<f32> {
    let mut out = vec![0.0f32; WAVE_SAMPLES];
    for s in syllables {
        let i0 = ((s.start_s * SAMPLE_RATE as f64).floor().max(0.0)) as usize;
        let i1 = (((s.start_s + s.dur_s) * SAMPLE_RATE as f64).ceil() as usize).min(WAVE_SAMPLES);
        for (i, o) in out.iter_mut().enumerate().take(i1).skip(i0) {
            let u = i as f64 / SAMPLE_RATE as f64 - s.start_s;
            let env = raised_cosine(u, s.dur_s);
            if env > 0.0 {
                // linear chirp: phase integral of f0 + (f1-f0)·u/dur
                let phi = std::f64::consts::TAU
                    * (s.f0 * u + 0.5 * (s.f1 - s.f0) * u * u / s.dur_s)
                    + s.phase;
                *o += (amp * env * phi.sin()) as f32;
            }
        }
    }
    // low ambience floor keeps FBank cells off the log floor
    let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0f64, 1e-3).expect("valid sigma");
    for o in &mut out {
        *o += normal.sample(&mut rng) as f32;
    }
    out
}

/// Lip aperture in [0,1] at each video frame from the syllable envelopes.
fn aperture_series(syllables: &[Syllable]) -> Vec<f64> {
    (0..VIDEO_FRAMES)
        .map(|v| {
            let tau = (v as f64 + 0.5) * FRAME_SECONDS;
            syllables
                .iter()
                .map(|s| raised_cosine(tau - s.start_s, s.dur_s))
                .fold(0.0f64, f64::max)
        })
        .collect()
}

/// Mouth-region bounding box (row0, row1, col0, col1) for side length `s`.
pub fn mouth_box(s: usize) -> (usize, usize, usize, usize) {
    let f = s as f64;
    (
        (0.55 * f) as usize,
        ((0.82 * f) as usize).min(s),
        (0.26 * f) as usize,
        ((0.74 * f) as usize).min(s),
    )
}

fn render_video(aperture: &[f64], size: usize, tint_seed: u64) -> Vec<u8> {
    let mut rng = ChaCha20Rng::seed_from_u64(tint_seed);
    let bg: [f64; 3] = [
        0.12 + rng.random_range(0.0..0.06),
        0.12 + rng.random_range(0.0..0.06),
        0.14 + rng.random_range(0.0..0.06),
    ];
    let face: [f64; 3] = [0.78, 0.71, 0.66];
    let lips: [f64; 3] = [0.45, 0.20, 0.20];
    let dark: [f64; 3] = [0.08, 0.05, 0.05];
    let s = size as f64;
    let (fc_x, fc_y, fr_x, fr_y) = (0.5 * s, 0.45 * s, 0.40 * s, 0.48 * s);
    let (m_x, m_y) = (0.5 * s, 0.68 * s);
    let m_rx = 0.17 * s;

    let mut out = vec![0u8; VIDEO_FRAMES * size * size * VIDEO_CHANNELS];
    for (v, &a) in aperture.iter().enumerate() {
        let m_ry = (0.018 + 0.10 * a) * s;
        let frame = &mut out[v * size * size * 3..(v + 1) * size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                let in_face = {
                    let dx = (xf - fc_x) / fr_x;
                    let dy = (yf - fc_y) / fr_y;
                    dx * dx + dy * dy <= 1.0
                };
                let mouth = {
                    let dx = (xf - m_x) / m_rx;
                    let dy = (yf - m_y) / m_ry;
                    dx * dx + dy * dy
                };
                let color = if mouth <= 1.0 {
                    // open interior is darker than the lip ring
                    if mouth <= 0.55 && a > 0.12 {
                        dark
                    } else {
                        lips
                    }
                } else if in_face {
                    face
                } else {
                    bg
                };
                let px = (y * size + x) * 3;
                for c in 0..3 {
                    frame[px + c] = (color[c] * 255.0).round() as u8;
                }
            }
        }
    }
    out
}

/// Everything needed to re-render a sample's clean waveform and video.
struct CleanRender {
    waveform: Vec<f32>,
    aperture: Vec<f64>,
    wake_onsets: Option<[usize; 2]>,
}

fn clean_render(pattern_seed: u64, label: u8) -> CleanRender {
    let mut rng = ChaCha20Rng::seed_from_u64(pattern_seed);
    if label == 1 {
        let onset = rng.random_range(4..=(VIDEO_FRAMES - PATTERN_FRAMES - 4));
        let syl = wake_syllables(onset, &mut rng);
        let noise_seed = rng.random::<u64>();
        CleanRender {
            waveform: render_audio(&syl, 0.45, noise_seed),
            aperture: aperture_series(&syl),
            wake_onsets: Some([onset, onset + REP_GAP_FRAMES]),
        }
    } else {
        // Distractor audio and lip motion with non-wake temporal structure.
        // Kinds 4–7 are hard negatives: the pair spoken once, or a pair
        // repeated with the wrong rhythm.
        let audio_kind = rng.random_range(0..8u32);
        let syl: Vec<Syllable> = match audio_kind {
            0 => {
                // one long falling chirp
                let start = rng.random_range(0.2..1.2);
                vec![Syllable {
                    start_s: start,
                    dur_s: 1.0,
                    f0: 1400.0,
                    f1: 500.0,
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }]
            }
            1 => {
                // three short evenly spaced beeps
                let start = rng.random_range(0.1..1.0);
                (0..3)
                    .map(|k| Syllable {
                        start_s: start + 0.4 * k as f64,
                        dur_s: 0.10,
                        f0: 750.0,
                        f1: 750.0,
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                    })
                    .collect()
            }
            2 => {
                // continuous low hum
                vec![Syllable {
                    start_s: 0.0,
                    dur_s: WAVE_SAMPLES as f64 / SAMPLE_RATE as f64,
                    f0: 300.0,
                    f1: 300.0,
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }]
            }
            3 => Vec::new(), // near silence
            4 | 5 => {
                // the wake syllable pair spoken once: no repetition
                let onset = rng.random_range(4..=(VIDEO_FRAMES - PATTERN_FRAMES - 4));
                wake_syllables(onset, &mut rng).into_iter().take(2).collect()
            }
            _ => {
                // tone pair repeated with the wrong spacing and duration
                let dur = rng.random_range(5.0..7.0) * FRAME_SECONDS;
                let gap_frames = rng.random_range(20..28) as f64;
                let onset = rng.random_range(2.0..12.0) * FRAME_SECONDS;
                let mut v = Vec::with_capacity(4);
                for rep in 0..2 {
                    let start = onset + rep as f64 * gap_frames * FRAME_SECONDS;
                    v.push(Syllable {
                        start_s: start,
                        dur_s: dur,
                        f0: 650.0,
                        f1: 950.0,
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                    });
                    v.push(Syllable {
                        start_s: start + dur,
                        dur_s: dur,
                        f0: 950.0,
                        f1: 1250.0,
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                    });
                }
                v
            }
        };
        let amp = if audio_kind == 2 { 0.2 } else { 0.4 };
        let noise_seed = rng.random::<u64>();
        let waveform = render_audio(&syl, amp, noise_seed);

        if audio_kind == 4 || audio_kind == 5 {
            // same speaker: lips show the single repetition too
            return CleanRender {
                aperture: aperture_series(&syl),
                waveform,
                wake_onsets: None,
            };
        }
        let video_kind = rng.random_range(0..3u32);
        let aperture: Vec<f64> = match video_kind {
            0 => {
                // periodic chewing
                let period = rng.random_range(12.0..22.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (0..VIDEO_FRAMES)
                    .map(|v| {
                        0.5 + 0.5 * (std::f64::consts::TAU * v as f64 / period + phase).sin()
                    })
                    .collect()
            }
            1 => {
                // one long opening
                let start = rng.random_range(4..VIDEO_FRAMES - 24) as f64;
                (0..VIDEO_FRAMES)
                    .map(|v| raised_cosine(v as f64 - start, 20.0))
                    .collect()
            }
            _ => vec![0.0; VIDEO_FRAMES], // closed lips
        };
        CleanRender {
            waveform,
            aperture,
            wake_onsets: None,
        }
    }
}

// ── corruption ──────────────────────────────────────────────────────────

/// Additive white + babble-like noise at a target SNR, applied to the
/// waveform. The babble is a sum of random in-band tone bursts, so its band
/// energy is non-stationary: at low SNR it buries the wake pattern's
/// temporal envelope rather than shifting it by a constant.
pub fn corrupt_waveform(w: &[f32], snr_db: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = w.len();
    let clip_s = n as f64 / SAMPLE_RATE as f64;
    let bursts: Vec<Syllable> = (0..20)
        .map(|_| {
            let f0 = rng.random_range(450.0..1600.0);
            Syllable {
                start_s: rng.random_range(0.0..clip_s - 0.1),
                dur_s: rng.random_range(0.10..0.30),
                f0,
                f1: f0 * rng.random_range(0.9..1.5),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    let weights: Vec<f64> = (0..bursts.len()).map(|_| rng.random_range(0.5..1.5)).collect();
    let normal = Normal::new(0.0f64, 0.3).expect("valid sigma");
    let mut noise = vec![0.0f64; n];
    for (i, v) in noise.iter_mut().enumerate() {
        let t = i as f64 / SAMPLE_RATE as f64;
        let mut babble = 0.0;
        for (s, wgt) in bursts.iter().zip(&weights) {
            let u = t - s.start_s;
            let env = raised_cosine(u, s.dur_s);
            if env > 0.0 {
                let phi = std::f64::consts::TAU
                    * (s.f0 * u + 0.5 * (s.f1 - s.f0) * u * u / s.dur_s)
                    + s.phase;
                babble += wgt * env * phi.sin();
            }
        }
        *v = babble + normal.sample(&mut rng);
    }
    let sig_power = (w.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / n as f64).max(1e-4);
    let noise_power = noise.iter().map(|&x| x * x).sum::<f64>() / n as f64;
    let target_noise_power = sig_power / 10f64.powf(snr_db / 10.0);
    let scale = (target_noise_power / noise_power).sqrt();
    w.iter()
        .zip(&noise)
        .map(|(&x, &nv)| x + (nv * scale) as f32)
        .collect()
}

/// Corrupt a sample's audio at the given SNR. The clean waveform is
/// re-rendered from the pattern seed, noise is added pre-FBank, and the
/// FBank clip is recomputed. Label and video untouched.
pub fn corrupt_audio(s: &AvSample, snr_db: f64, seed: u64) -> Result<AvSample> {
    let clean = clean_render(s.meta.pattern_seed, s.label);
    let noisy = corrupt_waveform(&clean.waveform, snr_db, seed);
    let audio = fbank_clip(&Waveform::new(noisy, SAMPLE_RATE)?)?;
    Ok(AvSample {
        id: s.id.clone(),
        label: s.label,
        audio,
        video: s.video.clone(),
        meta: SampleMeta {
            snr_db: Some(snr_db),
            ..s.meta.clone()
        },
    })
}

/// Occlude each frame independently with probability `rate`: a flat gray
/// rectangle over the lip region. Label and audio untouched.
pub fn corrupt_video(s: &AvSample, rate: f64, seed: u64) -> Result<AvSample> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("corrupt_video", format!("rate {rate} outside [0,1]")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let size = s.video.size;
    let (r0, r1, c0, c1) = mouth_box(size);
    let mut data = s.video.data.clone();
    for v in 0..VIDEO_FRAMES {
        if rng.random::<f64>() < rate {
            let frame = &mut data[v * size * size * 3..(v + 1) * size * size * 3];
            for y in r0..r1 {
                for x in c0..c1 {
                    let px = (y * size + x) * 3;
                    frame[px] = 128;
                    frame[px + 1] = 128;
                    frame[px + 2] = 128;
                }
            }
        }
    }
    Ok(AvSample {
        id: s.id.clone(),
        label: s.label,
        audio: s.audio.clone(),
        video: VideoClip::new(data, size)?,
        meta: SampleMeta {
            occlusion_rate: Some(rate),
            ..s.meta.clone()
        },
    })
}

// ── corpus assembly ─────────────────────────────────────────────────────

fn split_labels(n: usize, n_pos: usize, seed: u64) -> Vec<u8> {
    let mut labels = vec![0u8; n];
    for l in labels.iter_mut().take(n_pos) {
        *l = 1;
    }
    // seeded Fisher-Yates
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

fn generate_split(cfg: &CorpusConfig, split: &str, n: usize, n_pos: usize) -> Result<Vec<AvSample>> {
    let labels = split_labels(n, n_pos, derive_seed(cfg.seed, split, u64::MAX));
    // class-local index drives the alternating corruption halves
    let mut class_idx = vec![0usize; n];
    let mut counts = [0usize; 2];
    for (i, &l) in labels.iter().enumerate() {
        class_idx[i] = counts[l as usize];
        counts[l as usize] += 1;
    }
    let samples: Vec<Result<AvSample>> = runtime::map_collect(n, |i| {
        let label = labels[i];
        let pattern_seed = derive_seed(cfg.seed, split, i as u64);
        let clean = clean_render(pattern_seed, label);
        let id = format!("{split}-{i:05}");
        let tint_seed = derive_seed(pattern_seed, "tint", 0);
        let video = VideoClip::new(
            render_video(&clean.aperture, cfg.video_size, tint_seed),
            cfg.video_size,
        )?;
        let meta = SampleMeta {
            pattern_seed,
            snr_db: None,
            occlusion_rate: None,
            wake_onsets: clean.wake_onsets,
        };

        enum Plan {
            Clean,
            Audio(f64),
            Video(f64),
        }
        let plan = match cfg.cross_noise_mode {
            CrossNoiseMode::None => Plan::Clean,
            CrossNoiseMode::AudioOnly => {
                let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(pattern_seed, "snr", 0));
                Plan::Audio(rng.random_range(cfg.audio_snr_range.0..=cfg.audio_snr_range.1))
            }
            CrossNoiseMode::VideoOnly => Plan::Video(cfg.occlusion_rate),
            CrossNoiseMode::Split => {
                if class_idx[i] % 2 == 0 {
                    Plan::Audio(cfg.audio_snr_range.0)
                } else {
                    Plan::Video(cfg.occlusion_rate)
                }
            }
        };

        match plan {
            Plan::Clean => {
                let audio = fbank_clip(&Waveform::new(clean.waveform, SAMPLE_RATE)?)?;
                Ok(AvSample {
                    id,
                    label,
                    audio,
                    video,
                    meta,
                })
            }
            Plan::Audio(snr) => {
                let noisy = corrupt_waveform(
                    &clean.waveform,
                    snr,
                    derive_seed(pattern_seed, "audio_noise", 0),
                );
                let audio = fbank_clip(&Waveform::new(noisy, SAMPLE_RATE)?)?;
                Ok(AvSample {
                    id,
                    label,
                    audio,
                    video,
                    meta: SampleMeta {
                        snr_db: Some(snr),
                        ..meta
                    },
                })
            }
            Plan::Video(rate) => {
                let audio = fbank_clip(&Waveform::new(clean.waveform, SAMPLE_RATE)?)?;
                let base = AvSample {
                    id,
                    label,
                    audio,
                    video,
                    meta,
                };
                corrupt_video(&base, rate, derive_seed(pattern_seed, "occlusion", 0))
            }
        }
    });
    samples.into_iter().collect()
}

/// Generate the train/dev/eval splits of a labeled corpus.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let n_train = cfg.n_train_pos + cfg.n_train_neg;
    let dev_pos = ((cfg.n_dev as f64) * cfg.pos_fraction).round() as usize;
    let eval_pos = ((cfg.n_eval as f64) * cfg.pos_fraction).round() as usize;
    Ok(Corpus {
        train: generate_split(cfg, "train", n_train, cfg.n_train_pos)?,
        dev: generate_split(cfg, "dev", cfg.n_dev, dev_pos)?,
        eval: generate_split(cfg, "eval", cfg.n_eval, eval_pos)?,
        video_size: cfg.video_size,
    })
}

// ── template oracles ────────────────────────────────────────────────────
//
// Deterministic detectors used to certify corpus difficulty: matched-filter
// correlation of a modality's energy/aperture envelope against the known
// wake-pattern template, maximized over onsets.

/// Template sampled on a grid with `per_frame` points per video frame.
fn pattern_template(per_frame: usize) -> Vec<f64> {
    let n = PATTERN_FRAMES * per_frame;
    let dur = SYLLABLE_FRAMES as f64;
    (0..n)
        .map(|i| {
            let v = i as f64 / per_frame as f64; // video-frame units
            let mut e: f64 = 0.0;
            for rep in 0..2 {
                let base = (rep * REP_GAP_FRAMES) as f64;
                e = e.max(raised_cosine(v - base, dur));
                e = e.max(raised_cosine(v - base - dur, dur));
            }
            e
        })
        .collect()
}

/// Max normalized cross-correlation of `series` with `template` over lags.
fn max_correlation(series: &[f64], template: &[f64]) -> f64 {
    let n = template.len();
    if series.len() < n {
        return 0.0;
    }
    let t_mean = template.iter().sum::<f64>() / n as f64;
    let t_centered: Vec<f64> = template.iter().map(|v| v - t_mean).collect();
    let t_norm = t_centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best = 0.0f64;
    for lag in 0..=series.len() - n {
        let win = &series[lag..lag + n];
        let mean = win.iter().sum::<f64>() / n as f64;
        let mut dot = 0.0;
        let mut norm = 0.0;
        for (w, t) in win.iter().zip(&t_centered) {
            let c = w - mean;
            dot += c * t;
            norm += c * c;
        }
        let denom = norm.sqrt() * t_norm;
        if denom > 1e-12 {
            best = best.max(dot / denom);
        }
    }
    best
}

/// Audio-only matched-filter score from the stored FBank clip: band energy
/// (550–1450 Hz) envelope correlated against the wake template.
pub fn audio_template_score(s: &AvSample) -> f64 {
    let centers = crate::audio::mel_center_frequencies(crate::audio::N_MELS, SAMPLE_RATE);
    let band: Vec<usize> = centers
        .iter()
        .enumerate()
        .filter(|(_, &f)| (550.0..=1450.0).contains(&f))
        .map(|(i, _)| i)
        .collect();
    let frames = s.audio.frames.data();
    let series: Vec<f64> = (0..crate::audio::TARGET_FRAMES)
        .map(|t| {
            band.iter()
                .map(|&m| (frames[t * crate::audio::N_MELS + m] as f64).exp())
                .sum::<f64>()
        })
        .collect();
    // 4 audio frames per video frame
    max_correlation(&series, &pattern_template(4))
}

/// Lip-aperture series measured from the stored video: dark-pixel count in
/// the mouth box per frame.
pub fn measured_aperture(v: &VideoClip) -> Vec<f64> {
    let (r0, r1, c0, c1) = mouth_box(v.size);
    (0..VIDEO_FRAMES)
        .map(|f| {
            let frame = &v.data[f * v.size * v.size * 3..(f + 1) * v.size * v.size * 3];
            let mut dark = 0usize;
            for y in r0..r1 {
                for x in c0..c1 {
                    if frame[(y * v.size + x) * 3] < 64 {
                        dark += 1;
                    }
                }
            }
            dark as f64
        })
        .collect()
}

/// Video-only matched-filter score: measured aperture correlated against
/// the wake template.
pub fn video_template_score(s: &AvSample) -> f64 {
    max_correlation(&measured_aperture(&s.video), &pattern_template(1))
}

/// Fusion oracle: the better of the two uni-modal scores.
pub fn fused_template_score(s: &AvSample) -> f64 {
    audio_template_score(s).max(video_template_score(s))
}
