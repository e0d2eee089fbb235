//! Reproducible experiment runs: a TOML config, a run directory holding
//! every artifact, and cached stages that are skipped when their outputs
//! already exist.

use std::cell::{OnceCell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::context::{evaluate_context, train_context_model, ContextConfig, ContextModel, ContextTrainConfig, HistorySpec};
use crate::corpus::{generate_corpus, CorpusConfig, CorpusManifest, Split};
use crate::error::{Error, Result};
use crate::eval::{emit_tables, EvalReport};
use crate::features::{write_feature_file, FeaturePipeline};
use crate::nn::Checkpoint;
use crate::slu::{adapt, SluTask, TaskKind};
use crate::training::{
    asr_wer, build_decoded_histories, evaluate_slu, history_embeddings, pretrain_asr, train_slu, DecodedHistoryCache,
    FeatureStore, HistorySource, RegimeSpec, SluEvaluation, Stage, TrainingPlan, TransducerDecoder,
};
use crate::transducer::{TransducerConfig, TransducerModel};

/// Default output root when neither the config nor the command line names one.
pub const OUTPUT_ROOT_ENV: &str = "CONVSLU_OUTPUT_ROOT";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOCK_FILE: &str = "run.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSettings {
    /// Writes one binary feature file per utterance during extract-features.
    #[serde(default)]
    pub write_files: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSettings {
    #[serde(default)]
    pub model: ContextConfig,
    #[serde(default = "ContextTrainConfig::desk")]
    pub train: ContextTrainConfig,
}

impl Default for ContextSettings {
    fn default() -> Self {
        Self {
            model: ContextConfig::default(),
            train: ContextTrainConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransducerSettings {
    pub preset: String,
}

impl Default for TransducerSettings {
    fn default() -> Self {
        Self { preset: "desk".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSettings {
    /// CTC encoder pre-training before transducer training.
    #[serde(default = "yes")]
    pub ctc_pretrain: bool,
    #[serde(default = "desk_ctc")]
    pub ctc: TrainingPlan,
    #[serde(default = "desk_asr")]
    pub asr: TrainingPlan,
    #[serde(default = "desk_slu")]
    pub slu: TrainingPlan,
}

fn yes() -> bool {
    true
}

fn desk_ctc() -> TrainingPlan {
    TrainingPlan::desk(Stage::CtcPretrain)
}

fn desk_asr() -> TrainingPlan {
    TrainingPlan::desk(Stage::AsrRnnt)
}

fn desk_slu() -> TrainingPlan {
    TrainingPlan::desk(Stage::Slu)
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            ctc_pretrain: true,
            ctc: desk_ctc(),
            asr: desk_asr(),
            slu: desk_slu(),
        }
    }
}

/// Everything a run depends on. Written back into the run directory in
/// fully resolved form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Corpus generation seed.
    pub seed: u64,
    pub task: TaskKind,
    /// Run directory. Relative paths resolve against the output root.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default = "default_features")]
    pub features: FeatureSettings,
    #[serde(default)]
    pub context: ContextSettings,
    #[serde(default)]
    pub transducer: TransducerSettings,
    #[serde(default)]
    pub training: TrainingSettings,
    /// History rendering for single-row commands. Defaults per task.
    #[serde(default)]
    pub history: Option<HistorySpec>,
    /// Regime for single-row commands. Defaults to the baseline.
    #[serde(default = "RegimeSpec::baseline")]
    pub regime: RegimeSpec,
}

fn default_features() -> FeatureSettings {
    FeatureSettings { write_files: false }
}

impl ExperimentConfig {
    pub fn new(seed: u64, task: TaskKind) -> Self {
        Self {
            seed,
            task,
            output_dir: None,
            corpus: CorpusConfig::default(),
            features: default_features(),
            context: ContextSettings::default(),
            transducer: TransducerSettings::default(),
            training: TrainingSettings::default(),
            history: None,
            regime: RegimeSpec::baseline(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The config with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.context.model.validate()?;
        self.context.train.validate()?;
        TransducerConfig::preset(&self.transducer.preset)?.validate()?;
        for (plan, stage) in [
            (&self.training.ctc, Stage::CtcPretrain),
            (&self.training.asr, Stage::AsrRnnt),
            (&self.training.slu, Stage::Slu),
        ] {
            if plan.stage != stage {
                return Err(Error::Config(format!("plan for {stage} declares stage {}", plan.stage)));
            }
            plan.validate()?;
        }
        self.history_spec().validate()?;
        let r = &self.regime;
        if r.train.is_some() != r.test.is_some() {
            return Err(Error::Config("regime train and test must both be set or both absent".into()));
        }
        if r.uses_history() && !self.history_spec().uses_history() {
            return Err(Error::Config("a history regime needs a history spec that renders preceding turns".into()));
        }
        Ok(())
    }

    pub fn history_spec(&self) -> HistorySpec {
        self.history.unwrap_or_else(|| default_history(self.task))
    }

    /// Every speed factor a training plan asks for.
    pub fn speeds(&self) -> Vec<f64> {
        let t = &self.training;
        let mut out: Vec<f64> = Vec::new();
        let ctc = if t.ctc_pretrain { &t.ctc.speeds[..] } else { &[] };
        for &s in ctc.iter().chain(&t.asr.speeds).chain(&t.slu.speeds) {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }

    /// Resolves the run directory: an absolute `output_dir` wins, otherwise
    /// it is joined onto `root`, the environment root, or `runs`.
    pub fn run_dir(&self, root: Option<&Path>) -> PathBuf {
        let name = self
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("{}-seed{}", self.task, self.seed)));
        if name.is_absolute() {
            return name;
        }
        let root = root
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(name)
    }
}

/// History rendering used by the matrix for a task: plain history text
/// for intent, speaker+history+acts for dialog acts.
pub fn default_history(task: TaskKind) -> HistorySpec {
    match task {
        TaskKind::Intent => HistorySpec::text(),
        TaskKind::DialogAct => HistorySpec::speaker_text_acts(),
    }
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub id: String,
    pub history: Option<HistorySpec>,
    pub train: Option<HistorySource>,
    pub test: Option<HistorySource>,
    /// Row whose trained model this row evaluates (itself unless the row
    /// only changes the test-time history source).
    pub model_of: String,
}

impl MatrixRow {
    fn baseline(id: &str) -> Self {
        Self {
            id: id.into(),
            history: None,
            train: None,
            test: None,
            model_of: id.into(),
        }
    }

    fn with_history(id: &str, spec: HistorySpec, train: HistorySource, test: HistorySource, model_of: &str) -> Self {
        Self {
            id: id.into(),
            history: Some(spec),
            train: Some(train),
            test: Some(test),
            model_of: model_of.into(),
        }
    }

    pub fn regime_label(&self) -> String {
        match (self.train, self.test) {
            (Some(a), Some(b)) => format!("{a}/{b}"),
            _ => String::new(),
        }
    }

    pub fn description(&self) -> String {
        match &self.history {
            None => "speech features".into(),
            Some(spec) => format!("speech + {} embedding", spec.label()),
        }
    }

    pub fn uses_dec(&self) -> bool {
        self.train == Some(HistorySource::Dec) || self.test == Some(HistorySource::Dec)
    }
}

/// The SLU grid: intent rows D1–D4 and dialog-act rows C1–C10.
pub fn matrix_rows(task: TaskKind) -> Vec<MatrixRow> {
    use HistorySource::{Dec, Ref};
    let (prefix, specs) = match task {
        TaskKind::Intent => ("D", vec![HistorySpec::text()]),
        TaskKind::DialogAct => (
            "C",
            vec![HistorySpec::speaker_acts(), HistorySpec::speaker_text(), HistorySpec::speaker_text_acts()],
        ),
    };
    let mut rows = vec![MatrixRow::baseline(&format!("{prefix}1"))];
    for spec in specs {
        let n = rows.len() + 1;
        let [a, b, c] = [n, n + 1, n + 2].map(|k| format!("{prefix}{k}"));
        rows.push(MatrixRow::with_history(&a, spec, Ref, Ref, &a));
        rows.push(MatrixRow::with_history(&b, spec, Ref, Dec, &a));
        rows.push(MatrixRow::with_history(&c, spec, Dec, Dec, &c));
    }
    rows
}

/// Context-encoder comparison rows, keyed by row id.
pub fn context_rows(task: TaskKind) -> Vec<(String, HistorySpec)> {
    let (prefix, specs) = match task {
        TaskKind::Intent => ("A", vec![HistorySpec::current_only(), HistorySpec::text(), HistorySpec::speaker_text()]),
        TaskKind::DialogAct => (
            "B",
            vec![
                HistorySpec::current_only(),
                HistorySpec::speaker_acts(),
                HistorySpec::speaker_text(),
                HistorySpec::speaker_text_acts(),
            ],
        ),
    };
    specs
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("{prefix}{}", i + 1), s))
        .collect()
}

/// Artifact kinds a run can be forced to recompute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Artifact {
    Corpus,
    Features,
    Asr,
    Adapted,
    Context,
    DecHistories,
    SluModel,
    Report,
}

impl Artifact {
    pub const ALL: [Artifact; 8] = [
        Artifact::Corpus,
        Artifact::Features,
        Artifact::Asr,
        Artifact::Adapted,
        Artifact::Context,
        Artifact::DecHistories,
        Artifact::SluModel,
        Artifact::Report,
    ];
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Consistency(format!(
                "{} is locked by another run (delete {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ck.to_bytes())
}

fn slug(spec: &HistorySpec) -> String {
    spec.label().replace(['+', '/'], "_")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrSummary {
    pub checkpoint: String,
    pub best_valid_wer: f64,
    pub test_wer: f64,
}

/// One run directory and its cached stages.
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    /// Progress messages on stderr.
    pub verbose: bool,
    force: BTreeSet<Artifact>,
    _lock: RunLock,
    corpus: OnceCell<(CorpusManifest, String)>,
    store: OnceCell<FeatureStore>,
    asr: OnceCell<TransducerModel>,
    dec: OnceCell<DecodedHistoryCache>,
    adapted: RefCell<BTreeMap<bool, Rc<TransducerModel>>>,
    contexts: RefCell<BTreeMap<String, Rc<ContextModel>>>,
    models: RefCell<BTreeMap<String, Rc<TransducerModel>>>,
}

impl Run {
    /// Claims the run directory and records the resolved config. A
    /// directory created from a different config is refused unless every
    /// artifact is forced.
    pub fn open(config: ExperimentConfig, root: Option<&Path>, force: &[Artifact]) -> Result<Self> {
        config.validate()?;
        let dir = config.run_dir(root);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let lock = RunLock::acquire(&dir)?;
        let resolved = config.to_toml()?;
        let cfg_path = dir.join(CONFIG_FILE);
        if cfg_path.exists() {
            let previous = ExperimentConfig::load(&cfg_path)?;
            if previous != config && force.len() != Artifact::ALL.len() {
                return Err(Error::Consistency(format!(
                    "{} holds a run with a different config; use a new output directory or force a full re-run",
                    dir.display()
                )));
            }
        }
        write_atomic(&cfg_path, resolved.as_bytes())?;
        Ok(Self {
            config,
            dir,
            verbose: false,
            force: force.iter().copied().collect(),
            _lock: lock,
            corpus: OnceCell::new(),
            store: OnceCell::new(),
            asr: OnceCell::new(),
            dec: OnceCell::new(),
            adapted: RefCell::new(BTreeMap::new()),
            contexts: RefCell::new(BTreeMap::new()),
            models: RefCell::new(BTreeMap::new()),
        })
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[{}] {}", self.dir.display(), msg.as_ref());
        }
    }

    fn reuse(&self, artifact: Artifact, path: &Path) -> bool {
        !self.force.contains(&artifact) && path.exists()
    }

    pub fn task(&self) -> SluTask {
        SluTask::new(self.config.task)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.dir.join("corpus")
    }

    pub fn corpus(&self) -> Result<&CorpusManifest> {
        Ok(&self.corpus_with_fingerprint()?.0)
    }

    pub fn corpus_fingerprint(&self) -> Result<&str> {
        Ok(&self.corpus_with_fingerprint()?.1)
    }

    fn corpus_with_fingerprint(&self) -> Result<&(CorpusManifest, String)> {
        if let Some(c) = self.corpus.get() {
            return Ok(c);
        }
        let dir = self.corpus_dir();
        let manifest = if self.reuse(Artifact::Corpus, &dir.join(crate::corpus::MANIFEST_FILE)) {
            let m = CorpusManifest::load(&dir)?;
            if m.seed != self.config.seed || m.config != self.config.corpus {
                return Err(Error::Consistency(format!("{} was generated from different settings", dir.display())));
            }
            m
        } else {
            self.note("generating corpus");
            let m = generate_corpus(self.config.seed, &self.config.corpus)?;
            m.save(&dir)?;
            m
        };
        let fp = manifest.fingerprint()?;
        Ok(self.corpus.get_or_init(|| (manifest, fp)))
    }

    /// Writes one WAV file per utterance under the corpus directory.
    pub fn write_audio(&self) -> Result<()> {
        self.corpus()?.write_waveforms(&self.corpus_dir())
    }

    /// Features for every utterance at every configured speed, with
    /// normalization statistics recorded under `features/`.
    pub fn store(&self) -> Result<&FeatureStore> {
        if let Some(s) = self.store.get() {
            return Ok(s);
        }
        let corpus = self.corpus()?;
        self.note("extracting features");
        let store = FeatureStore::build(corpus, &self.config.speeds())?;
        let stats_path = self.dir.join("features").join("norm_stats.json");
        if !self.reuse(Artifact::Features, &stats_path) {
            fs::create_dir_all(stats_path.parent().unwrap()).map_err(|e| Error::io(&stats_path, e))?;
            store.stats.save(&stats_path)?;
        }
        Ok(self.store.get_or_init(|| store))
    }

    /// Normalization statistics, plus per-utterance feature files when the
    /// config asks for them. Returns the number of files written.
    pub fn extract_features(&self) -> Result<usize> {
        let store = self.store()?;
        if !self.config.features.write_files {
            return Ok(0);
        }
        let corpus = self.corpus()?;
        let pipeline = FeaturePipeline::new(store.stats.clone())?;
        let dir = self.dir.join("features");
        let mut n = 0;
        for c in &corpus.conversations {
            for t in &c.turns {
                let path = dir.join(format!("{}_{:02}.feat", c.id, t.index));
                if self.reuse(Artifact::Features, &path) {
                    continue;
                }
                write_feature_file(&path, &pipeline.process(&corpus.waveform(c, t)?)?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn asr_path(&self) -> PathBuf {
        self.dir.join("asr").join("model.ckpt")
    }

    /// The pre-trained ASR transducer.
    pub fn asr(&self) -> Result<&TransducerModel> {
        if let Some(m) = self.asr.get() {
            return Ok(m);
        }
        let path = self.asr_path();
        let model = if self.reuse(Artifact::Asr, &path) {
            TransducerModel::from_checkpoint(&Checkpoint::load(&path)?)?
        } else {
            let corpus = self.corpus()?;
            let store = self.store()?;
            self.note("pre-training ASR");
            let t = &self.config.training;
            let config = TransducerConfig::preset(&self.config.transducer.preset)?;
            let trained = pretrain_asr(corpus, store, config, t.ctc_pretrain.then_some(&t.ctc), &t.asr)?;
            let dir = path.parent().unwrap();
            write_json(&dir.join("log.json"), &trained.log)?;
            let ck = trained.model.to_checkpoint();
            let summary = AsrSummary {
                checkpoint: ck.fingerprint(),
                best_valid_wer: trained.best_valid_wer,
                test_wer: asr_wer(&trained.model, corpus, store, Split::Test)?,
            };
            write_json(&dir.join("summary.json"), &summary)?;
            save_checkpoint(&ck, &path)?;
            self.note(format!("ASR test WER {:.2}%", 100.0 * summary.test_wer));
            trained.model
        };
        Ok(self.asr.get_or_init(|| model))
    }

    pub fn asr_summary(&self) -> Result<AsrSummary> {
        self.asr()?;
        let path = self.dir.join("asr").join("summary.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn adapted_path(&self, history: bool) -> PathBuf {
        let name = if history { "adapted-history.ckpt" } else { "adapted.ckpt" };
        self.dir.join("slu").join(name)
    }

    /// The ASR model after output (and optionally input) surgery.
    pub fn adapted(&self, history: bool) -> Result<Rc<TransducerModel>> {
        if let Some(m) = self.adapted.borrow().get(&history) {
            return Ok(m.clone());
        }
        let path = self.adapted_path(history);
        let model = if self.reuse(Artifact::Adapted, &path) {
            TransducerModel::from_checkpoint(&Checkpoint::load(&path)?)?
        } else {
            let m = adapt(self.asr()?, &self.task(), history, self.config.training.slu.seed)?;
            save_checkpoint(&m.to_checkpoint(), &path)?;
            m
        };
        let model = Rc::new(model);
        self.adapted.borrow_mut().insert(history, model.clone());
        Ok(model)
    }

    pub fn context_dir(&self, spec: &HistorySpec) -> PathBuf {
        self.dir.join("context").join(slug(spec))
    }

    /// Context encoder trained with `spec` on the run's task.
    pub fn context(&self, spec: &HistorySpec) -> Result<Rc<ContextModel>> {
        let key = slug(spec);
        if let Some(m) = self.contexts.borrow().get(&key) {
            return Ok(m.clone());
        }
        let dir = self.context_dir(spec);
        let path = dir.join("model.ckpt");
        let model = if self.reuse(Artifact::Context, &path) {
            let m = ContextModel::from_checkpoint(&Checkpoint::load(&path)?)?;
            if m.spec != *spec || m.task != self.config.task {
                return Err(Error::Consistency(format!("{} holds a different context model", path.display())));
            }
            m
        } else {
            self.note(format!("training context encoder ({})", spec.label()));
            let ctx = &self.config.context;
            let trained = train_context_model(self.corpus()?, self.config.task, *spec, ctx.model, &ctx.train)?;
            write_json(&dir.join("log.json"), &trained.log)?;
            save_checkpoint(&trained.model.to_checkpoint(), &path)?;
            trained.model
        };
        let model = Rc::new(model);
        self.contexts.borrow_mut().insert(key, model.clone());
        Ok(model)
    }

    /// Test-split score of a context encoder as a table row.
    pub fn context_report(&self, row: &str, spec: &HistorySpec) -> Result<EvalReport> {
        let path = self.context_dir(spec).join("report.json");
        if self.reuse(Artifact::Report, &path) && !self.force.contains(&Artifact::Context) {
            return EvalReport::load(&path);
        }
        let model = self.context(spec)?;
        let corpus_fp = self.corpus_fingerprint()?.to_string();
        let checkpoints = vec![model.to_checkpoint().fingerprint()];
        let report = EvalReport {
            table: format!("context-{}", self.config.task),
            row: row.into(),
            description: spec.label(),
            regime: String::new(),
            metric_name: metric_name(self.config.task).into(),
            metric: evaluate_context(&model, self.corpus()?, Split::Test)?,
            wer: None,
            per_conversation: BTreeMap::new(),
            fingerprint: EvalReport::fingerprint_of(&corpus_fp, &checkpoints),
            corpus_fingerprint: corpus_fp,
            checkpoints,
        };
        report.save(&path)?;
        Ok(report)
    }

    /// Every context-encoder row for the run's task.
    pub fn context_table(&self) -> Result<Vec<EvalReport>> {
        context_rows(self.config.task)
            .iter()
            .map(|(row, spec)| self.context_report(row, spec))
            .collect()
    }

    pub fn rows(&self) -> Vec<MatrixRow> {
        matrix_rows(self.config.task)
    }

    /// The row matching the config's history and regime, or an ad hoc row.
    pub fn configured_row(&self) -> MatrixRow {
        let r = &self.config.regime;
        let history = r.uses_history().then(|| self.config.history_spec());
        let rows = self.rows();
        if let Some(row) = rows
            .iter()
            .find(|row| row.history == history && row.train == r.train && row.test == r.test)
        {
            return row.clone();
        }
        let id = format!("S-{}-{}", history.as_ref().map(slug).unwrap_or_default(), r.label().replace('/', "-"));
        let model_of = match (r.train, r.test) {
            (Some(HistorySource::Ref), Some(HistorySource::Dec)) => {
                format!("S-{}-REF-REF", history.as_ref().map(slug).unwrap_or_default())
            }
            _ => id.clone(),
        };
        MatrixRow {
            id,
            history,
            train: r.train,
            test: r.test,
            model_of,
        }
    }

    fn row_by_id(&self, id: &str) -> Result<MatrixRow> {
        let cfg = self.configured_row();
        if cfg.id == id {
            return Ok(cfg);
        }
        if let Some(row) = self.rows().into_iter().find(|r| r.id == id) {
            return Ok(row);
        }
        if let Some(spec) = cfg.history.filter(|_| id == cfg.model_of) {
            return Ok(MatrixRow::with_history(id, spec, HistorySource::Ref, HistorySource::Ref, id));
        }
        Err(Error::Config(format!("unknown row {id}")))
    }

    pub fn row_dir(&self, id: &str) -> PathBuf {
        self.dir.join("rows").join(id)
    }

    fn baseline_row(&self) -> MatrixRow {
        self.rows().remove(0)
    }

    /// Fingerprint of the no-history baseline checkpoint.
    pub fn baseline_fingerprint(&self) -> Result<String> {
        Ok(self.model(&self.baseline_row())?.to_checkpoint().fingerprint())
    }

    pub fn dec_path(&self) -> PathBuf {
        self.dir.join("dec").join("histories.jsonl")
    }

    /// Baseline decodes of every split, the source of DEC histories.
    pub fn dec_histories(&self) -> Result<&DecodedHistoryCache> {
        if let Some(c) = self.dec.get() {
            return Ok(c);
        }
        let baseline = self.baseline_fingerprint()?;
        if let Some(b) = &self.config.regime.baseline {
            if *b != baseline {
                return Err(Error::Consistency(format!("config names baseline {b} but the run's baseline is {baseline}")));
            }
        }
        let path = self.dec_path();
        let cache = if self.reuse(Artifact::DecHistories, &path) {
            let c = DecodedHistoryCache::load(&path)?;
            if c.baseline != baseline {
                return Err(Error::Consistency(format!("{} was decoded by a different baseline", path.display())));
            }
            c
        } else {
            self.note("decoding baseline histories");
            let model = self.model(&self.baseline_row())?;
            let decoder = TransducerDecoder {
                model: &model,
                store: self.store()?,
                task: self.task(),
            };
            let c = build_decoded_histories(&decoder, self.corpus()?, &[Split::Train, Split::Valid, Split::Test])?;
            fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
            c.save(&path)?;
            c
        };
        Ok(self.dec.get_or_init(|| cache))
    }

    fn regime_of(&self, row: &MatrixRow) -> Result<RegimeSpec> {
        let baseline = if row.uses_dec() { Some(self.baseline_fingerprint()?) } else { None };
        Ok(RegimeSpec {
            train: row.train,
            test: row.test,
            baseline,
        })
    }

    /// The trained SLU model evaluated by `row`.
    pub fn model(&self, row: &MatrixRow) -> Result<Rc<TransducerModel>> {
        if row.model_of != row.id {
            return self.model(&self.row_by_id(&row.model_of)?);
        }
        if let Some(m) = self.models.borrow().get(&row.id) {
            return Ok(m.clone());
        }
        let dir = self.row_dir(&row.id);
        let path = dir.join("model.ckpt");
        let model = if self.reuse(Artifact::SluModel, &path) {
            TransducerModel::from_checkpoint(&Checkpoint::load(&path)?)?
        } else {
            let regime = self.regime_of(row)?;
            let init = self.adapted(row.history.is_some())?;
            let context = row.history.as_ref().map(|s| self.context(s)).transpose()?;
            let cache = if row.uses_dec() { Some(self.dec_histories()?) } else { None };
            self.note(format!("training row {} {}", row.id, row.regime_label()));
            let trained = train_slu(
                &init,
                self.corpus()?,
                self.store()?,
                &self.task(),
                &regime,
                context.as_deref(),
                cache,
                &self.config.training.slu,
            )?;
            write_json(&dir.join("log.json"), &trained.log)?;
            save_checkpoint(&trained.model.to_checkpoint(), &path)?;
            trained.model
        };
        let model = Rc::new(model);
        self.models.borrow_mut().insert(row.id.clone(), model.clone());
        Ok(model)
    }

    /// Decodes `split` with the row's model and test-side histories.
    pub fn decode_row(&self, row: &MatrixRow, split: Split) -> Result<SluEvaluation> {
        let model = self.model(row)?;
        let histories = match (&row.history, row.test) {
            (Some(spec), Some(src)) => {
                let context = self.context(spec)?;
                let cache = if src == HistorySource::Dec { Some(self.dec_histories()?) } else { None };
                Some(history_embeddings(&context, self.corpus()?, src, cache, &[split])?)
            }
            _ => None,
        };
        evaluate_slu(&model, self.corpus()?, self.store()?, &self.task(), split, histories.as_ref())
    }

    /// Writes per-utterance hypotheses for `split` and returns the path.
    pub fn write_hypotheses(&self, row: &MatrixRow, split: Split) -> Result<PathBuf> {
        let eval = self.decode_row(row, split)?;
        let path = self.row_dir(&row.id).join(format!("hypotheses-{split}.jsonl"));
        write_jsonl(&path, &eval.utterances)?;
        Ok(path)
    }

    /// Test-split report for one row; cached as `report.json`.
    pub fn evaluate_row(&self, row: &MatrixRow) -> Result<EvalReport> {
        let dir = self.row_dir(&row.id);
        let path = dir.join("report.json");
        if self.reuse(Artifact::Report, &path) && !self.force.contains(&Artifact::SluModel) {
            return EvalReport::load(&path);
        }
        let eval = self.decode_row(row, Split::Test)?;
        self.note(format!("row {} {} = {:.4}", row.id, eval.metric_name, eval.metric));
        let mut checkpoints = vec![self.asr()?.to_checkpoint().fingerprint(), self.model(row)?.to_checkpoint().fingerprint()];
        if let Some(spec) = &row.history {
            checkpoints.push(self.context(spec)?.to_checkpoint().fingerprint());
        }
        if row.uses_dec() {
            checkpoints.push(self.dec_histories()?.baseline.clone());
        }
        let corpus_fp = self.corpus_fingerprint()?.to_string();
        let report = EvalReport {
            table: self.config.task.to_string(),
            row: row.id.clone(),
            description: row.description(),
            regime: row.regime_label(),
            metric_name: eval.metric_name.clone(),
            metric: eval.metric,
            wer: Some(eval.wer),
            per_conversation: eval.per_conversation.clone(),
            fingerprint: EvalReport::fingerprint_of(&corpus_fp, &checkpoints),
            corpus_fingerprint: corpus_fp,
            checkpoints,
        };
        write_jsonl(&dir.join(format!("hypotheses-{}.jsonl", Split::Test)), &eval.utterances)?;
        report.save(&path)?;
        Ok(report)
    }

    /// Trains and evaluates every row of the task's grid, then writes the
    /// tables.
    pub fn run_matrix(&self) -> Result<Vec<EvalReport>> {
        let reports = self
            .rows()
            .iter()
            .map(|row| self.evaluate_row(row))
            .collect::<Result<Vec<_>>>()?;
        emit_tables(&reports, &self.dir.join("tables"))?;
        Ok(reports)
    }

    /// All reports present in the run directory.
    pub fn collect_reports(&self) -> Result<Vec<EvalReport>> {
        let mut reports = Vec::new();
        for sub in ["rows", "context"] {
            let dir = self.dir.join(sub);
            let Ok(entries) = fs::read_dir(&dir) else { continue };
            let mut paths: Vec<PathBuf> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.path().join("report.json"))
                .filter(|p| p.exists())
                .collect();
            paths.sort();
            for p in paths {
                reports.push(EvalReport::load(&p)?);
            }
        }
        Ok(reports)
    }

    pub fn emit_tables(&self) -> Result<Vec<PathBuf>> {
        emit_tables(&self.collect_reports()?, &self.dir.join("tables"))
    }
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Intent => "accuracy",
        TaskKind::DialogAct => "f1",
    }
}

/// Writes `text` to a fresh file, refusing to clobber one that exists.
pub fn write_new_file(path: &Path, text: &str) -> Result<()> {
    let file = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// A small config suitable for smoke runs and tests.
pub fn smoke_config(seed: u64, task: TaskKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(seed, task);
    c.corpus = CorpusConfig {
        conversations_per_intent: 2,
        num_agents: 2,
        num_callers: 6,
        valid_callers: 1,
        test_callers: 2,
        ..CorpusConfig::default()
    };
    c.context.model = ContextConfig {
        layers: 1,
        heads: 2,
        dim: 16,
        ff: 32,
        max_len: 128,
    };
    c.context.train.epochs = 1;
    for plan in [&mut c.training.ctc, &mut c.training.asr, &mut c.training.slu] {
        plan.epochs = 1;
        plan.speeds = vec![1.0];
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_shapes() {
        let d = matrix_rows(TaskKind::Intent);
        assert_eq!(d.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["D1", "D2", "D3", "D4"]);
        assert_eq!(d[2].model_of, "D2");
        assert_eq!(d[3].regime_label(), "DEC/DEC");
        let c = matrix_rows(TaskKind::DialogAct);
        assert_eq!(c.len(), 10);
        assert_eq!(c[7].id, "C8");
        assert_eq!(c[7].history, Some(HistorySpec::speaker_text_acts()));
        assert_eq!(c[8].model_of, "C8");
        assert_eq!(c[9].regime_label(), "DEC/DEC");
        assert!(c[0].history.is_none());
    }

    #[test]
    fn config_round_trips_with_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\ntask = \"intent\"\n").unwrap();
        assert_eq!(c, ExperimentConfig::new(3, TaskKind::Intent));
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("seed = 3\ntask = \"intent\"\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = ExperimentConfig::from_toml("seed = 3\ntask = \"intent\"\n[corpus]\nsize = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn half_regimes_are_rejected() {
        let text = "seed = 3\ntask = \"intent\"\n[regime]\ntrain = \"REF\"\n";
        assert!(ExperimentConfig::from_toml(text).is_err());
    }

    #[test]
    fn run_dir_resolution() {
        let mut c = ExperimentConfig::new(5, TaskKind::DialogAct);
        assert_eq!(c.run_dir(Some(Path::new("/x"))), PathBuf::from("/x/dialog-act-seed5"));
        c.output_dir = Some(PathBuf::from("/abs/run"));
        assert_eq!(c.run_dir(Some(Path::new("/x"))), PathBuf::from("/abs/run"));
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Consistency(_))));
        drop(a);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn mismatched_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let c = smoke_config(1, TaskKind::Intent);
        drop(Run::open(c.clone(), Some(dir.path()), &[]).unwrap());
        let mut other = c.clone();
        other.training.slu.epochs = 2;
        assert!(matches!(Run::open(other.clone(), Some(dir.path()), &[]), Err(Error::Consistency(_))));
        assert!(Run::open(other, Some(dir.path()), &Artifact::ALL).is_ok());
    }

    #[test]
    fn speeds_union_is_sorted() {
        let mut c = ExperimentConfig::new(1, TaskKind::Intent);
        c.training.slu.speeds = vec![1.0];
        assert_eq!(c.speeds(), vec![0.9, 1.0, 1.1]);
        c.training.ctc_pretrain = false;
        c.training.asr.speeds = vec![1.0];
        assert_eq!(c.speeds(), vec![1.0]);
    }
}
