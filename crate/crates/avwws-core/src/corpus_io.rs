//! Corpus serialization: a JSON manifest (ids, labels, meta) plus one
//! binary tensor file per sample in the checkpoint array format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::FbankClip;
use crate::ckpt::{load_tensors, save_tensors, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::runtime;
use crate::synth::{AvSample, Corpus, CorpusConfig, SampleMeta, VideoClip, VIDEO_FRAMES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub label: u8,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub video_size: usize,
    pub train: Vec<SampleEntry>,
    pub dev: Vec<SampleEntry>,
    pub eval: Vec<SampleEntry>,
}

fn sample_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("samples").join(format!("{id}.bin"))
}

fn entry(s: &AvSample) -> SampleEntry {
    SampleEntry {
        id: s.id.clone(),
        label: s.label,
        meta: s.meta.clone(),
    }
}

/// Write the manifest and per-sample tensors under `dir`.
pub fn save_corpus(dir: &Path, corpus: &Corpus, config: &CorpusConfig) -> Result<()> {
    std::fs::create_dir_all(dir.join("samples"))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        video_size: corpus.video_size,
        train: corpus.train.iter().map(entry).collect(),
        dev: corpus.dev.iter().map(entry).collect(),
        eval: corpus.eval.iter().map(entry).collect(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let all: Vec<&AvSample> = corpus
        .train
        .iter()
        .chain(&corpus.dev)
        .chain(&corpus.eval)
        .collect();
    let results: Vec<Result<()>> = runtime::map_collect(all.len(), |i| {
        let s = all[i];
        let video = s.video.to_tensor();
        save_tensors(
            &sample_path(dir, &s.id),
            &[
                ("fbank".to_string(), &s.audio.frames),
                ("video".to_string(), &video),
            ],
        )
    });
    results.into_iter().collect()
}

fn load_sample(dir: &Path, e: &SampleEntry, video_size: usize) -> Result<AvSample> {
    let arrays = load_tensors(&sample_path(dir, &e.id))?;
    let mut fbank: Option<Tensor<f32>> = None;
    let mut video: Option<Tensor<f32>> = None;
    for (name, t) in arrays {
        match name.as_str() {
            "fbank" => fbank = Some(t),
            "video" => video = Some(t),
            other => {
                return Err(Error::Format(format!("{}: unexpected array `{other}`", e.id)))
            }
        }
    }
    let fbank = fbank.ok_or_else(|| Error::Format(format!("{}: missing fbank", e.id)))?;
    let video = video.ok_or_else(|| Error::Format(format!("{}: missing video", e.id)))?;
    if video.shape() != [VIDEO_FRAMES, video_size, video_size, 3] {
        return Err(Error::Format(format!(
            "{}: video shape {:?} does not match manifest size {video_size}",
            e.id,
            video.shape()
        )));
    }
    // video values are u8/255 quantized; recover the byte representation
    let data: Vec<u8> = video
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(AvSample {
        id: e.id.clone(),
        label: e.label,
        audio: FbankClip::new(fbank)?,
        video: VideoClip::new(data, video_size)?,
        meta: e.meta.clone(),
    })
}

/// Load a corpus written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<(Corpus, CorpusConfig)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingInput(manifest_path));
    }
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "manifest format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let load_split = |entries: &[SampleEntry]| -> Result<Vec<AvSample>> {
        let results: Vec<Result<AvSample>> = runtime::map_collect(entries.len(), |i| {
            load_sample(dir, &entries[i], manifest.video_size)
        });
        results.into_iter().collect()
    };
    Ok((
        Corpus {
            train: load_split(&manifest.train)?,
            dev: load_split(&manifest.dev)?,
            eval: load_split(&manifest.eval)?,
            video_size: manifest.video_size,
        },
        manifest.config,
    ))
}
