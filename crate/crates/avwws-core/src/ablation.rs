//! The ablation grid: {transformer, conformer} x {late, early, flcma,
//! flcma+pretrain} trained with one shared seed and equal budget, plus the
//! uni-modal reference models that serve as pretrain donors and AUC
//! baselines. Evaluation follows the dev-sweep protocol: the decision
//! threshold minimizes dev WWS and is then applied to the eval split.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::eval::{evaluate, MetricsReport, ThresholdPolicy};
use crate::model::{BlockKind, FusionKind, Modality, ModelConfig, ParamStore};
use crate::synth::Corpus;
use crate::train::{
    fine_tune, pretrain_transfer, train, ModelVariant, TrainConfig, TransferManifest,
};

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub method: String,
    pub block_kind: BlockKind,
    pub dev: MetricsReport,
    pub eval: MetricsReport,
}

#[derive(Debug)]
pub struct AblationResult {
    /// The eight grid rows, in table order.
    pub rows: Vec<AblationRow>,
    /// Uni-modal reference rows (audio/visual per block kind).
    pub unimodal: Vec<AblationRow>,
    /// Best-dev checkpoint per method name (grid and uni-modal).
    pub checkpoints: BTreeMap<String, (ModelConfig, ParamStore<f32>)>,
    /// Transfer manifests of the pretrain variants.
    pub manifests: BTreeMap<String, TransferManifest>,
}

fn kind_tag(kind: BlockKind) -> &'static str {
    match kind {
        BlockKind::Transformer => "transformer",
        BlockKind::Conformer => "conformer",
    }
}

fn report_pair(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    variant: ModelVariant,
    corpus: &Corpus,
    batch: usize,
) -> Result<(MetricsReport, MetricsReport)> {
    let dev = evaluate(
        params,
        cfg,
        variant,
        &corpus.dev,
        &corpus.dev,
        ThresholdPolicy::SweepOnDev,
        batch,
    )?;
    let eval = evaluate(
        params,
        cfg,
        variant,
        &corpus.eval,
        &corpus.dev,
        ThresholdPolicy::Fixed(dev.threshold),
        batch,
    )?;
    Ok((dev, eval))
}

/// Train and evaluate the full grid. Every run shares `train_cfg` (equal
/// budget); per-run seeds derive from the method name, so the whole
/// procedure is a pure function of (corpus, configs).
pub fn run_ablation(
    corpus: &Corpus,
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<AblationResult> {
    let mut result = AblationResult {
        rows: Vec::new(),
        unimodal: Vec::new(),
        checkpoints: BTreeMap::new(),
        manifests: BTreeMap::new(),
    };
    let eval_batch = train_cfg.batch_size.max(16);

    for kind in [BlockKind::Transformer, BlockKind::Conformer] {
        // uni-modal references (also the pretrain donors)
        let mut donors: BTreeMap<Modality, ParamStore<f32>> = BTreeMap::new();
        for modality in [Modality::Audio, Modality::Visual] {
            let method = format!("{}_{}_unimodal", modality.stream(), kind_tag(kind));
            let cfg = ModelConfig {
                fusion: FusionKind::Late,
                ..base_model.clone()
            };
            let mut tcfg = train_cfg.clone();
            tcfg.seed = crate::synth::derive_seed(train_cfg.seed, &method, 0);
            let out = train(
                &cfg,
                &tcfg,
                ModelVariant::UniModal(modality),
                &corpus.train,
                &corpus.dev,
            )?;
            let (dev, eval) = report_pair(
                &out.best_params,
                &cfg,
                ModelVariant::UniModal(modality),
                corpus,
                eval_batch,
            )?;
            result.unimodal.push(AblationRow {
                method: method.clone(),
                block_kind: kind,
                dev,
                eval,
            });
            result
                .checkpoints
                .insert(method, (cfg.clone(), out.best_params.clone()));
            donors.insert(modality, out.best_params);
        }

        // the four grid variants, in table order
        for fusion_tag in ["late", "early", "flcma", "flcma_pretrain"] {
            let method = format!("av_{}_{}", kind_tag(kind), fusion_tag);
            let fusion = match fusion_tag {
                "late" => FusionKind::Late,
                "early" => FusionKind::Early,
                _ => FusionKind::Flcma,
            };
            let cfg = ModelConfig {
                fusion,
                block_kind: kind,
                ..base_model.clone()
            };
            let mut tcfg = train_cfg.clone();
            tcfg.seed = crate::synth::derive_seed(train_cfg.seed, &method, 0);
            let out = if fusion_tag == "flcma_pretrain" {
                let mut params = crate::model::init_params::<f32>(
                    &crate::model::multimodal_parameter_specs(&cfg),
                    crate::synth::derive_seed(tcfg.seed, "init", 0),
                );
                let manifest = pretrain_transfer(
                    &donors[&Modality::Audio],
                    &donors[&Modality::Visual],
                    &mut params,
                )?;
                result.manifests.insert(method.clone(), manifest);
                fine_tune(
                    params,
                    &cfg,
                    &tcfg,
                    ModelVariant::MultiModal,
                    &corpus.train,
                    &corpus.dev,
                )?
            } else {
                train(
                    &cfg,
                    &tcfg,
                    ModelVariant::MultiModal,
                    &corpus.train,
                    &corpus.dev,
                )?
            };
            let (dev, eval) = report_pair(
                &out.best_params,
                &cfg,
                ModelVariant::MultiModal,
                corpus,
                eval_batch,
            )?;
            result.rows.push(AblationRow {
                method: method.clone(),
                block_kind: kind,
                dev,
                eval,
            });
            result.checkpoints.insert(method, (cfg, out.best_params));
        }
    }
    Ok(result)
}

fn row_csv(out: &mut String, row: &AblationRow) {
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        row.method,
        row.dev.auc,
        row.dev.frr * 100.0,
        row.dev.far * 100.0,
        row.dev.wws * 100.0,
        row.eval.auc,
        row.eval.frr * 100.0,
        row.eval.far * 100.0,
        row.eval.wws * 100.0,
        row.dev.threshold,
        kind_tag(row.block_kind),
    ));
}

const CSV_HEADER: &str =
    "method,dev_auc,dev_frr_pct,dev_far_pct,dev_wws_pct,eval_auc,eval_frr_pct,eval_far_pct,eval_wws_pct,threshold,block_kind\n";

/// The 8-row grid table.
pub fn ablation_csv(result: &AblationResult) -> String {
    let mut out = String::from(CSV_HEADER);
    for row in &result.rows {
        row_csv(&mut out, row);
    }
    out
}

/// The uni-modal reference table.
pub fn unimodal_csv(result: &AblationResult) -> String {
    let mut out = String::from(CSV_HEADER);
    for row in &result.unimodal {
        row_csv(&mut out, row);
    }
    out
}
