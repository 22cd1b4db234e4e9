//! Corpus difficulty certification: template-oracle AUC bounds that make
//! the synthetic task meaningful (uni-modal detectors degrade under
//! corruption; a fused detector does not).

use avwws_core::metrics::auc;
use avwws_core::synth::{
    audio_template_score, corrupt_audio, corrupt_video, fused_template_score, generate_corpus,
    video_template_score, AvSample, CorpusConfig, CrossNoiseMode,
};

fn oracle_auc(samples: &[AvSample], score: impl Fn(&AvSample) -> f64) -> f64 {
    let scores: Vec<f64> = samples.iter().map(&score).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    auc(&scores, &labels).unwrap()
}

fn dev_cfg(mode: CrossNoiseMode) -> CorpusConfig {
    CorpusConfig {
        n_train_pos: 1,
        n_train_neg: 1,
        n_dev: 200,
        n_eval: 2,
        cross_noise_mode: mode,
        ..CorpusConfig::tiny(20240 + mode as u64)
    }
}

#[test]
fn clean_corpus_audio_oracle_separates() {
    let corpus = generate_corpus(&dev_cfg(CrossNoiseMode::None)).unwrap();
    let a = oracle_auc(&corpus.dev, audio_template_score);
    println!("clean dev: audio oracle AUC = {a:.4}");
    assert!(a > 0.95, "audio oracle AUC {a} ≤ 0.95 on clean dev");
}

#[test]
fn snr_minus_15_degrades_audio_oracle() {
    let corpus = generate_corpus(&dev_cfg(CrossNoiseMode::None)).unwrap();
    let corrupted: Vec<AvSample> = corpus
        .dev
        .iter()
        .map(|s| corrupt_audio(s, -15.0, s.meta.pattern_seed ^ 0xA5).unwrap())
        .collect();
    let a = oracle_auc(&corrupted, audio_template_score);
    println!("-15 dB dev: audio oracle AUC = {a:.4}");
    assert!(a < 0.7, "audio oracle AUC {a} ≥ 0.7 at -15 dB");
}

#[test]
fn full_occlusion_blinds_video_oracle() {
    let corpus = generate_corpus(&dev_cfg(CrossNoiseMode::None)).unwrap();
    let corrupted: Vec<AvSample> = corpus
        .dev
        .iter()
        .map(|s| corrupt_video(s, 1.0, s.meta.pattern_seed ^ 0x5A).unwrap())
        .collect();
    let a = oracle_auc(&corrupted, video_template_score);
    println!("occluded dev: video oracle AUC = {a:.4}");
    assert!((a - 0.5).abs() <= 0.1, "video oracle AUC {a} not within 0.5 ± 0.1");
}

#[test]
fn split_mode_requires_fusion() {
    let corpus = generate_corpus(&dev_cfg(CrossNoiseMode::Split)).unwrap();
    let a = oracle_auc(&corpus.dev, audio_template_score);
    let v = oracle_auc(&corpus.dev, video_template_score);
    let f = oracle_auc(&corpus.dev, fused_template_score);
    println!("split dev: audio={a:.4} video={v:.4} fused={f:.4}");
    assert!(a < 0.85, "audio oracle AUC {a} ≥ 0.85 under split noise");
    assert!(v < 0.85, "video oracle AUC {v} ≥ 0.85 under split noise");
    assert!(f > 0.95, "fused oracle AUC {f} ≤ 0.95 under split noise");
}
