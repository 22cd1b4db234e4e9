//! Temporary probe: full ablation grid at the candidate config.
use avwws_core::ablation::{ablation_csv, run_ablation, unimodal_csv};
use avwws_core::model::{BlockKind, FusionKind, ModelConfig};
use avwws_core::synth::{generate_corpus, CorpusConfig, CrossNoiseMode};
use avwws_core::train::TrainConfig;

#[test]
#[ignore]
fn probe_grid() {
    let ccfg = CorpusConfig {
        n_train_pos: 104,
        n_train_neg: 408,
        n_dev: 192,
        n_eval: 192,
        cross_noise_mode: CrossNoiseMode::Split,
        ..CorpusConfig::tiny(777)
    };
    let t0 = std::time::Instant::now();
    let corpus = generate_corpus(&ccfg).unwrap();
    let base = ModelConfig::tiny(BlockKind::Conformer, FusionKind::Flcma);
    let tcfg = TrainConfig {
        batch_size: 12,
        max_steps: 260,
        eval_every: 130,
        warmup_steps: 70,
        base_lr: 3e-3,
        ..TrainConfig::tiny(42)
    };
    let result = run_ablation(&corpus, &base, &tcfg).unwrap();
    println!("GRID ({:.1} min):", t0.elapsed().as_secs_f64() / 60.0);
    print!("{}", ablation_csv(&result));
    println!("UNIMODAL:");
    print!("{}", unimodal_csv(&result));
}
