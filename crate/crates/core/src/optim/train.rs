use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{clip_global_norm, Hyper, OptimizerKind, OptimizerState};
use crate::corpus::Window;
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::model::{
    accumulate_grads, read_checkpoint, write_checkpoint, CheckpointHeader, EncoderConfig, ModelParams,
};

/// Windows per work unit when fanning a batch out over threads. Fixed so the
/// gradient sum order does not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Defaults to the optimizer's own default when unset.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 256,
            optimizer: OptimizerKind::Adamax,
            lr: None,
            weight_decay: 0.01,
            clip_norm: None,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.optimizer.default_lr())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Hyper::new(self.lr(), self.weight_decay).validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LessonSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl LessonSplit {
    pub fn is_train(&self, lesson: &str) -> bool {
        self.train.binary_search_by(|l| l.as_str().cmp(lesson)).is_ok()
    }
}

/// Lesson-level split, stratified by teacher: each teacher with at least two
/// lessons contributes at least one lesson to each side.
pub fn split_lessons(windows: &[Window], test_fraction: f64, seed: u64) -> Result<LessonSplit> {
    let mut by_teacher: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for w in windows {
        by_teacher.entry(&w.teacher_id).or_default().insert(&w.lesson_id);
    }
    let mut split = LessonSplit::default();
    for (teacher, lessons) in by_teacher {
        let mut lessons: Vec<&str> = lessons.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[crate::hash::fnv1a64(teacher.as_bytes())]));
        lessons.shuffle(&mut rng);
        let n = lessons.len();
        let n_test = if n >= 2 {
            ((test_fraction * n as f64).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        split.test.extend(lessons[..n_test].iter().map(|s| s.to_string()));
        split.train.extend(lessons[n_test..].iter().map(|s| s.to_string()));
    }
    split.train.sort();
    split.test.sort();
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::invalid(format!(
            "lesson split left a side empty ({} train, {} test lessons)",
            split.train.len(),
            split.test.len()
        )));
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochCheckpoint {
    /// 1-based.
    pub epoch: u32,
    pub params: ModelParams,
    /// Mean training loss over the epoch's windows.
    pub train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<EpochCheckpoint>,
    pub split: LessonSplit,
}

/// Trains on the labeled windows of training lessons and returns one
/// checkpoint per epoch.
pub fn train(
    windows: &[Window],
    store: &EmbeddingStore,
    cfg: &TrainConfig,
    enc: &EncoderConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    enc.validate()?;
    let split = split_lessons(windows, cfg.test_fraction, derive_seed(cfg.seed, &[0]))?;
    let train_set: Vec<&Window> = windows
        .iter()
        .filter(|w| w.has_labels() && split.is_train(&w.lesson_id))
        .collect();
    if train_set.is_empty() {
        return Err(Error::invalid("no labeled windows in training lessons"));
    }
    let inputs: Vec<Vec<&[f64]>> = train_set
        .iter()
        .map(|w| store.window(w))
        .collect::<Result<_>>()?;

    let mut params = ModelParams::init(store.dim(), enc, derive_seed(cfg.seed, &[1]))?;
    let hyper = Hyper::new(cfg.lr(), cfg.weight_decay);
    let mut opt = OptimizerState::for_params(cfg.optimizer, hyper, &params)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut checkpoints = Vec::with_capacity(cfg.epochs as usize);

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let partials: Vec<(f64, ModelParams)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = params.zeros_like();
                    let mut l = 0.0;
                    for &i in chunk {
                        let seed = derive_seed(cfg.seed, &[3, epoch as u64, i as u64]);
                        l += accumulate_grads(
                            &params,
                            enc,
                            &inputs[i],
                            &train_set[i].labels,
                            Some(seed),
                            &mut g,
                        )?;
                    }
                    Ok((l, g))
                })
                .collect::<Result<_>>()?;
            let mut iter = partials.into_iter();
            let (mut batch_loss, mut grads) = iter.next().expect("batch is non-empty");
            for (l, g) in iter {
                batch_loss += l;
                grads.add_scaled(&g, 1.0);
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            opt.step_params(&mut params, &grads)?;
            loss_sum += batch_loss;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        log::info!("epoch {epoch}: train loss {train_loss:.6}");
        checkpoints.push(EpochCheckpoint {
            epoch,
            params: params.clone(),
            train_loss,
        });
    }
    Ok(TrainOutcome { checkpoints, split })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub cfg_digest: String,
    pub seed: u64,
    pub epochs: u32,
    pub checkpoints: Vec<String>,
    pub train_losses: Vec<f64>,
    pub split: LessonSplit,
}

pub fn checkpoint_path(dir: &Path, epoch: u32) -> PathBuf {
    dir.join(format!("epoch_{epoch}.bin"))
}

/// Writes `epoch_{k}.bin` for every checkpoint plus `manifest.json`.
pub fn write_run(
    dir: impl AsRef<Path>,
    outcome: &TrainOutcome,
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    cfg_digest: &str,
) -> Result<RunManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for c in &outcome.checkpoints {
        let header = CheckpointHeader {
            cfg_digest: cfg_digest.to_string(),
            epoch: c.epoch,
            seed: cfg.seed,
            train_loss: c.train_loss,
            input_dim: c.params.input_dim,
            encoder: enc.clone(),
            tensors: Vec::new(),
        };
        let path = checkpoint_path(dir, c.epoch);
        write_checkpoint(&path, &header, &c.params)?;
        names.push(path.file_name().unwrap().to_string_lossy().into_owned());
    }
    let manifest = RunManifest {
        cfg_digest: cfg_digest.to_string(),
        seed: cfg.seed,
        epochs: outcome.checkpoints.len() as u32,
        checkpoints: names,
        train_losses: outcome.checkpoints.iter().map(|c| c.train_loss).collect(),
        split: outcome.split.clone(),
    };
    let f = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(manifest)
}

/// Loads the manifest and every checkpoint it lists.
pub fn read_run(dir: impl AsRef<Path>) -> Result<(RunManifest, Vec<(CheckpointHeader, ModelParams)>)> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::MissingArtifact(mpath));
    }
    let manifest: RunManifest = serde_json::from_reader(File::open(&mpath)?)?;
    let ckpts = manifest
        .checkpoints
        .iter()
        .map(|n| read_checkpoint(dir.join(n)))
        .collect::<Result<_>>()?;
    Ok((manifest, ckpts))
}
