//! Temporary probe: steps/sec for the tiny profile.
use avwws_core::model::{BlockKind, FusionKind, ModelConfig};
use avwws_core::synth::{generate_corpus, CorpusConfig, CrossNoiseMode};
use avwws_core::train::{train, ModelVariant, TrainConfig};

#[test]
#[ignore]
fn probe_step_rate() {
    let cfg = CorpusConfig {
        n_train_pos: 40,
        n_train_neg: 120,
        n_dev: 40,
        n_eval: 8,
        cross_noise_mode: CrossNoiseMode::Split,
        ..CorpusConfig::tiny(1)
    };
    let t0 = std::time::Instant::now();
    let corpus = generate_corpus(&cfg).unwrap();
    println!("corpus gen: {:.1} s", t0.elapsed().as_secs_f64());
    let mcfg = ModelConfig::tiny(BlockKind::Conformer, FusionKind::Flcma);
    let tcfg = TrainConfig {
        max_steps: 10,
        eval_every: 10,
        ..TrainConfig::tiny(2)
    };
    let t1 = std::time::Instant::now();
    let out = train(&mcfg, &tcfg, ModelVariant::MultiModal, &corpus.train, &corpus.dev).unwrap();
    let dt = t1.elapsed().as_secs_f64();
    println!(
        "10 steps in {:.1} s -> {:.2} s/step; loss {:.4}; dev wws {:.3}",
        dt,
        dt / 10.0,
        out.log.last().unwrap().train_loss,
        out.final_dev_wws
    );
}
