//! Config-driven orchestration of the experiment: simulate or ingest a
//! corpus, train, score every checkpoint, run the three analyses and render
//! the report charts.
//!
//! Output layout under `paths.out`:
//!
//! ```text
//! data/       corpus.jsonl ratings.csv vam.csv embeddings.embs truth.json
//! windows/    train.jsonl prefix.jsonl
//! ckpt/       epoch_{k}.bin manifest.json
//! scores/     windows.csv prefix.csv
//! analysis/   spearman.csv gtheory.csv taucca.csv
//! report/     spearman.svg gtheory.svg taucca.svg
//! ```

mod evaluate;
mod report;
mod scores;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use evaluate::{
    eval_gtheory, eval_spearman, eval_taucca, read_gtheory_csv, read_spearman_csv, read_taucca_csv, GtheoryRow,
    SpearmanRow, TauccaRow,
};
pub use report::render_report;
pub use scores::{read_scores, write_scores, ScoreRow, ScoreTable};

use crate::corpus::{build_labeled_windows, read_ratings, read_transcripts, read_windows, write_windows, PrefixUnit, WindowConfig};
use crate::embeddings::{synth_embed, EmbeddingStore, SentenceId, SynthEmbedConfig};
use crate::error::{Error, Result};
use crate::gtheory::EmConfig;
use crate::hash::{derive_seed_str, fnv1a64};
use crate::items::{Instrument, ItemRegistry};
use crate::metrics::{BenchmarkConfig, PartialSpearmanConfig};
use crate::model::{score_windows, EncoderConfig};
use crate::optim::{read_run, train, write_run, TrainConfig};
use crate::simdata::{self, SimConfig};
use crate::taucca::{KccaConfig, TauVariant};

/// Environment variable that overrides `paths.out`.
pub const OUT_ENV: &str = "CHALKLINE_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstrumentSelection {
    Mqi,
    Class,
    #[default]
    Both,
}

impl InstrumentSelection {
    pub fn instruments(self) -> Vec<Instrument> {
        match self {
            InstrumentSelection::Mqi => vec![Instrument::Mqi],
            InstrumentSelection::Class => vec![Instrument::Class],
            InstrumentSelection::Both => Instrument::ALL.to_vec(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InstrumentSelection::Mqi => "mqi",
            InstrumentSelection::Class => "class",
            InstrumentSelection::Both => "both",
        }
    }
}

impl fmt::Display for InstrumentSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InstrumentSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mqi" => Ok(InstrumentSelection::Mqi),
            "class" => Ok(InstrumentSelection::Class),
            "both" => Ok(InstrumentSelection::Both),
            other => Err(Error::Config(format!("unknown instrument selection {other:?}"))),
        }
    }
}

/// Input locations. Unset inputs default to the files `simulate` writes
/// under `<out>/data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    pub corpus: Option<PathBuf>,
    pub ratings: Option<PathBuf>,
    pub vam: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Item registry TOML; the built-in 25-item registry when unset.
    pub items: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out: PathBuf::from("out"),
            corpus: None,
            ratings: None,
            vam: None,
            embeddings: None,
            items: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSynthConfig {
    pub dim: usize,
}

impl Default for EmbedSynthConfig {
    fn default() -> Self {
        EmbedSynthConfig { dim: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpearmanStageConfig {
    pub partial: PartialSpearmanConfig,
    pub benchmark: BenchmarkConfig,
    /// Lesson-label permutations for the null band on pooled rows; 0 skips.
    pub null_permutations: usize,
    pub null_level: f64,
}

impl Default for SpearmanStageConfig {
    fn default() -> Self {
        SpearmanStageConfig {
            partial: PartialSpearmanConfig::default(),
            benchmark: BenchmarkConfig::default(),
            null_permutations: 200,
            null_level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtheoryStageConfig {
    pub em: EmConfig,
    /// Boundary of the prefix windows that are decomposed.
    pub prefix_unit: PrefixUnit,
}

impl Default for GtheoryStageConfig {
    fn default() -> Self {
        GtheoryStageConfig {
            em: EmConfig::default(),
            prefix_unit: PrefixUnit::Sentence,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitLevel {
    Lesson,
    Chapter,
}

impl UnitLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitLevel::Lesson => "lesson",
            UnitLevel::Chapter => "chapter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauccaStageConfig {
    pub kcca: KccaConfig,
    pub variant: TauVariant,
    pub levels: Vec<UnitLevel>,
    /// Restrict units to lessons held out of training. Training lessons
    /// carry memorized rater labels into the scores.
    pub held_out_only: bool,
    /// Permutations for the null band on the first correlation; 0 skips.
    pub null_permutations: usize,
    pub null_level: f64,
}

impl Default for TauccaStageConfig {
    fn default() -> Self {
        TauccaStageConfig {
            kcca: KccaConfig::default(),
            variant: TauVariant::default(),
            levels: vec![UnitLevel::Lesson, UnitLevel::Chapter],
            held_out_only: true,
            null_permutations: 200,
            null_level: 0.95,
        }
    }
}

/// Everything one run needs. Module seed fields are overwritten from
/// `seed` by [`PipelineConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub instrument: InstrumentSelection,
    pub paths: Paths,
    pub simdata: SimConfig,
    pub embed_synth: EmbedSynthConfig,
    pub windows: WindowConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub spearman: SpearmanStageConfig,
    pub gtheory: GtheoryStageConfig,
    pub taucca: TauccaStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            instrument: InstrumentSelection::Both,
            paths: Paths::default(),
            simdata: SimConfig::default(),
            embed_synth: EmbedSynthConfig::default(),
            windows: WindowConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            spearman: SpearmanStageConfig::default(),
            gtheory: GtheoryStageConfig::default(),
            taucca: TauccaStageConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Copy with every module seed derived from `seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.simdata.seed = derive_seed_str(self.seed, "simdata");
        c.train.seed = derive_seed_str(self.seed, "train");
        c.spearman.partial.seed = derive_seed_str(self.seed, "spearman");
        c.spearman.benchmark.partial.seed = derive_seed_str(self.seed, "benchmark");
        c
    }

    /// Hex digest of the resolved config. The output directory is excluded
    /// so identical runs in different places share a digest.
    pub fn digest(&self) -> String {
        let mut c = self.resolved();
        c.paths.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }

    pub fn validate(&self, items: &ItemRegistry) -> Result<()> {
        for (name, p) in [
            ("corpus", &self.paths.corpus),
            ("ratings", &self.paths.ratings),
            ("vam", &self.paths.vam),
            ("embeddings", &self.paths.embeddings),
            ("items", &self.paths.items),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!("paths.{name}: {} does not exist", p.display())));
                }
            }
        }
        if self.paths.out.as_os_str().is_empty() {
            return Err(Error::Config("paths.out must not be empty".into()));
        }
        if self.paths.corpus.is_none() {
            self.simdata.validate(items)?;
        }
        if self.embed_synth.dim < 8 {
            return Err(Error::Config("embed_synth.dim must be at least 8".into()));
        }
        self.windows.validate()?;
        self.encoder.validate()?;
        if self.encoder.n_heads != items.len() {
            return Err(Error::Config(format!(
                "encoder.n_heads is {} but the registry has {} items",
                self.encoder.n_heads,
                items.len()
            )));
        }
        self.train.validate()?;
        for level in [self.spearman.null_level, self.taucca.null_level, self.spearman.partial.ci_level] {
            if !(level > 0.0 && level < 1.0) {
                return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
            }
        }
        self.taucca.kcca.validate()?;
        if self.taucca.levels.is_empty() {
            return Err(Error::Config("taucca.levels must name at least one level".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Ingest,
    EmbedSynth,
    Train,
    Score,
    EvalSpearman,
    EvalGtheory,
    EvalTaucca,
    Report,
    All,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Simulate,
        Stage::Ingest,
        Stage::EmbedSynth,
        Stage::Train,
        Stage::Score,
        Stage::EvalSpearman,
        Stage::EvalGtheory,
        Stage::EvalTaucca,
        Stage::Report,
        Stage::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Ingest => "ingest",
            Stage::EmbedSynth => "embed-synth",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::EvalSpearman => "eval-spearman",
            Stage::EvalGtheory => "eval-gtheory",
            Stage::EvalTaucca => "eval-taucca",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Fails with [`Error::MissingArtifact`] unless `path` exists.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// A validated config plus the resolved artifact paths.
pub struct Pipeline {
    cfg: PipelineConfig,
    digest: String,
    items: ItemRegistry,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        let items = match &cfg.paths.items {
            Some(p) => {
                require(p)?;
                ItemRegistry::from_toml_str(&fs::read_to_string(p)?)?
            }
            None => ItemRegistry::builtin(),
        };
        cfg.validate(&items)?;
        let digest = cfg.digest();
        Ok(Pipeline {
            cfg: cfg.resolved(),
            digest,
            items,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn items(&self) -> &ItemRegistry {
        &self.items
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.paths.out
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir().join("data")
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.input(&self.cfg.paths.corpus, simdata::CORPUS_FILE)
    }

    pub fn ratings_path(&self) -> PathBuf {
        self.input(&self.cfg.paths.ratings, simdata::RATINGS_FILE)
    }

    pub fn vam_path(&self) -> PathBuf {
        self.input(&self.cfg.paths.vam, simdata::VAM_FILE)
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.input(&self.cfg.paths.embeddings, simdata::EMBEDDINGS_FILE)
    }

    fn input(&self, explicit: &Option<PathBuf>, file: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.data_dir().join(file))
    }

    pub fn train_windows_path(&self) -> PathBuf {
        self.out_dir().join("windows").join("train.jsonl")
    }

    pub fn prefix_windows_path(&self) -> PathBuf {
        self.out_dir().join("windows").join("prefix.jsonl")
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.out_dir().join("ckpt")
    }

    pub fn window_scores_path(&self) -> PathBuf {
        self.out_dir().join("scores").join("windows.csv")
    }

    pub fn prefix_scores_path(&self) -> PathBuf {
        self.out_dir().join("scores").join("prefix.csv")
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.out_dir().join("analysis")
    }

    pub fn spearman_csv(&self) -> PathBuf {
        self.analysis_dir().join("spearman.csv")
    }

    pub fn gtheory_csv(&self) -> PathBuf {
        self.analysis_dir().join("gtheory.csv")
    }

    pub fn taucca_csv(&self) -> PathBuf {
        self.analysis_dir().join("taucca.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir().join("report")
    }

    fn simulated(&self) -> bool {
        self.cfg.paths.corpus.is_none()
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        log::info!("stage {stage} (config {})", self.digest);
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::Ingest => self.ingest(),
            Stage::EmbedSynth => self.embed_synth(),
            Stage::Train => self.train(),
            Stage::Score => self.score(),
            Stage::EvalSpearman => eval_spearman(self).map(drop),
            Stage::EvalGtheory => eval_gtheory(self).map(drop),
            Stage::EvalTaucca => eval_taucca(self).map(drop),
            Stage::Report => render_report(self),
            Stage::All => self.all(),
        }
    }

    /// Every stage in order. `simulate` runs only without an explicit
    /// corpus; `embed-synth` only when the embedding store is absent.
    pub fn all(&self) -> Result<()> {
        if self.simulated() {
            self.run(Stage::Simulate)?;
        }
        self.run(Stage::Ingest)?;
        if !self.embeddings_path().exists() {
            self.run(Stage::EmbedSynth)?;
        }
        for st in [
            Stage::Train,
            Stage::Score,
            Stage::EvalSpearman,
            Stage::EvalGtheory,
            Stage::EvalTaucca,
            Stage::Report,
        ] {
            self.run(st)?;
        }
        Ok(())
    }

    pub fn simulate(&self) -> Result<()> {
        let out = simdata::simulate(&self.cfg.simdata, &self.items)?;
        let dir = self.data_dir();
        simdata::write_sim(&dir, &out)?;
        log::info!(
            "simulated {} lessons, {} ratings, {} sentences into {}",
            out.transcripts.len(),
            out.ratings.len(),
            out.store.len(),
            dir.display()
        );
        Ok(())
    }

    pub fn ingest(&self) -> Result<()> {
        let (corpus, ratings) = (self.corpus_path(), self.ratings_path());
        require(&corpus)?;
        require(&ratings)?;
        let lessons = read_transcripts(&corpus)?;
        let ratings = read_ratings(&ratings)?;
        let instruments = self.cfg.instrument.instruments();
        let train = build_labeled_windows(&lessons, &ratings, &self.items, &instruments, &self.cfg.windows)?;
        let prefix_cfg = WindowConfig {
            prefix_mode: true,
            prefix_unit: self.cfg.gtheory.prefix_unit,
            ..self.cfg.windows.clone()
        };
        let prefix = build_labeled_windows(&lessons, &ratings, &self.items, &instruments, &prefix_cfg)?;
        fs::create_dir_all(self.out_dir().join("windows"))?;
        write_windows(self.train_windows_path(), &train)?;
        write_windows(self.prefix_windows_path(), &prefix)?;
        log::info!("ingested {} lessons: {} windows, {} prefix windows", lessons.len(), train.len(), prefix.len());
        Ok(())
    }

    /// Writes a signal-free synthetic store covering every corpus sentence.
    pub fn embed_synth(&self) -> Result<()> {
        let corpus = self.corpus_path();
        require(&corpus)?;
        let lessons = read_transcripts(&corpus)?;
        let cfg = SynthEmbedConfig::new(self.cfg.embed_synth.dim, derive_seed_str(self.cfg.seed, "embed-synth"))?;
        let mut store = EmbeddingStore::new(cfg.dim, "synthetic")?;
        for t in &lessons {
            for (_, s) in t.sentences() {
                let id = SentenceId::of(&t.lesson_id, s.index);
                store.insert(id, synth_embed(&s.text, None, &cfg)?)?;
            }
        }
        let path = self.embeddings_path();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        store.save(&path)?;
        log::info!("wrote {} synthetic embeddings to {}", store.len(), path.display());
        Ok(())
    }

    fn load_store(&self) -> Result<EmbeddingStore> {
        let path = self.embeddings_path();
        require(&path)?;
        EmbeddingStore::load(path)
    }

    fn load_windows(&self, path: PathBuf) -> Result<Vec<crate::corpus::Window>> {
        require(&path)?;
        read_windows(path)
    }

    pub fn train(&self) -> Result<()> {
        let windows = self.load_windows(self.train_windows_path())?;
        let store = self.load_store()?;
        let outcome = train(&windows, &store, &self.cfg.train, &self.cfg.encoder)?;
        let dir = self.ckpt_dir();
        if dir.exists() {
            for entry in fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == "bin") {
                    fs::remove_file(p)?;
                }
            }
        }
        let manifest = write_run(&dir, &outcome, &self.cfg.train, &self.cfg.encoder, &self.digest)?;
        log::info!("wrote {} checkpoints to {}", manifest.checkpoints.len(), dir.display());
        Ok(())
    }

    pub fn score(&self) -> Result<()> {
        let windows = self.load_windows(self.train_windows_path())?;
        let prefix = self.load_windows(self.prefix_windows_path())?;
        let store = self.load_store()?;
        let dir = self.ckpt_dir();
        require(&dir.join("manifest.json"))?;
        let (manifest, ckpts) = read_run(&dir)?;
        let mut main = ScoreTable::new(&self.items);
        let mut pre = ScoreTable::new(&self.items);
        for (header, params) in &ckpts {
            let s = score_windows(params, &header.encoder, &windows, &store)?;
            main.extend(header.epoch, &windows, s, &manifest.split);
            let s = score_windows(params, &header.encoder, &prefix, &store)?;
            pre.extend(header.epoch, &prefix, s, &manifest.split);
        }
        fs::create_dir_all(self.out_dir().join("scores"))?;
        write_scores(self.window_scores_path(), &main, &self.digest, self.cfg.seed)?;
        write_scores(self.prefix_scores_path(), &pre, &self.digest, self.cfg.seed)?;
        log::info!("scored {} checkpoints", ckpts.len());
        Ok(())
    }
}
