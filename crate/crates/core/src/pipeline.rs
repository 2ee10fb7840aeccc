//! Self-training orchestration.
//!
//! Every iteration lives in `WORKDIR/iterN/` and runs these stages in order:
//!
//! | stage      | outputs                                             |
//! |------------|-----------------------------------------------------|
//! | `generate` | `{tune,dev,transfer}.nbest` via the `generate_nbest` hook |
//! | `score`    | `scores/{set}.{name}.tsv` via the `score_<name>` hooks |
//! | `assemble` | `{set}.matrix.tsv`                                  |
//! | `tune`     | `weights.tsv`                                       |
//! | `select`   | `mask.txt`                                          |
//! | `rerank`   | `labels.*`, `dev.selections.tsv`                    |
//! | `evaluate` | `evaluation.json`                                   |
//!
//! A finished stage leaves an empty `.<stage>.done` marker; re-running an
//! iteration skips marked stages. `WORKDIR/ledger.jsonl` receives one JSON
//! object per finished iteration and is only ever appended to.
//!
//! Hook commands run through `sh -c` with the iteration directory as working
//! directory. Placeholders are substituted textually: `{ITER}`, `{IN}`,
//! `{OUT}`, `{SET}` (tune, dev or transfer), `{NAME}` (score hooks only) and
//! `{PREV}` (label prefix of the previous iteration, empty in iteration 1).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    with_suffix, write_pseudo_labels, ExternalScoreTable, LabelFormat, NBestCorpus, ReferenceSet,
    SourceCorpus,
};
use crate::distill::rerank_labels;
use crate::error::{Error, Result};
use crate::features::{assemble_matrix, FeatureMatrix, FeatureSpec, NativeFeature};
use crate::metrics::HypothesisStats;
use crate::mira::{tune_mira, MiraConfig, MiraSettings, WeightVector};
use crate::rerank::{rerank, select_models, SelectionMask};

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const GENERATE_HOOK: &str = "generate_nbest";
const SETS: [&str; 3] = ["tune", "dev", "transfer"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub tune_src: PathBuf,
    pub tune_refs: Vec<PathBuf>,
    pub dev_src: PathBuf,
    pub dev_refs: Vec<PathBuf>,
    pub transfer_src: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Any of `mbr_bleu`, `mbr_chrf`, `len`, `len_ratio`.
    pub native: Vec<String>,
    /// Teacher score names from the n-best file; `total` is the combined score.
    pub passthrough: Vec<String>,
    /// Names of features scored by `score_<name>` hooks.
    pub external: Vec<String>,
}

impl FeatureConfig {
    pub fn spec(&self) -> Result<FeatureSpec> {
        Ok(FeatureSpec {
            passthrough: self.passthrough.clone(),
            native: self
                .native
                .iter()
                .map(|n| n.parse())
                .collect::<Result<Vec<NativeFeature>>>()?,
        })
    }
}

fn default_iterations() -> usize {
    3
}

fn default_min_delta() -> f64 {
    0.1
}

fn default_top_k() -> usize {
    5
}

fn default_parallelism() -> usize {
    1
}

fn default_format() -> LabelFormat {
    LabelFormat::Parallel
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub workdir: PathBuf,
    #[serde(default = "default_iterations")]
    pub iterations_max: usize,
    /// Minimum dev BLEU gain between consecutive iterations to keep going.
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    /// Stage name to command template.
    pub hooks: BTreeMap<String, String>,
    pub data: DataConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub mira: MiraSettings,
    #[serde(default = "default_top_k")]
    pub top_k_models: usize,
    /// Maximum number of score hooks running at once.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_format")]
    pub label_format: LabelFormat,
}

impl PipelineConfig {
    /// Parses JSON when the text starts with `{`, TOML otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    /// Loads a config file; relative paths are taken relative to its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.workdir);
        fix(&mut self.data.tune_src);
        fix(&mut self.data.dev_src);
        fix(&mut self.data.transfer_src);
        self.data.tune_refs.iter_mut().for_each(fix);
        self.data.dev_refs.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations_max == 0 {
            return Err(Error::Config("iterations_max must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::Config(
                "min_delta must be a non-negative number".into(),
            ));
        }
        if self.top_k_models == 0 {
            return Err(Error::Config("top_k_models must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.data.tune_refs.is_empty() || self.data.dev_refs.is_empty() {
            return Err(Error::Config(
                "tune and dev sets need at least one reference file".into(),
            ));
        }
        if !self.hooks.contains_key(GENERATE_HOOK) {
            return Err(Error::Config(format!("missing `{GENERATE_HOOK}` hook")));
        }
        for name in &self.features.external {
            if !self.hooks.contains_key(&score_hook(name)) {
                return Err(Error::Config(format!(
                    "missing `{}` hook for external feature `{name}`",
                    score_hook(name)
                )));
            }
        }
        let spec = self.features.spec()?;
        let names: Vec<String> = spec
            .passthrough
            .iter()
            .cloned()
            .chain(spec.native.iter().map(|f| f.name().to_string()))
            .chain(self.features.external.iter().cloned())
            .collect();
        if names.is_empty() {
            return Err(Error::ZeroFeatures);
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::DuplicateFeature(n.clone()));
            }
        }
        MiraConfig::try_from(&self.mira)?;
        Ok(())
    }

    pub fn iteration_dir(&self, iter: usize) -> PathBuf {
        self.workdir.join(format!("iter{iter}"))
    }

    fn labels_prefix(&self, iter: usize) -> PathBuf {
        self.iteration_dir(iter).join("labels")
    }

    fn label_files(&self, prefix: &Path) -> Vec<PathBuf> {
        match self.label_format {
            LabelFormat::Parallel => vec![with_suffix(prefix, "src"), with_suffix(prefix, "tgt")],
            LabelFormat::Tsv => vec![with_suffix(prefix, "tsv")],
        }
    }
}

fn score_hook(name: &str) -> String {
    format!("score_{name}")
}

/// Ledger record of one finished iteration. Paths are relative to the
/// working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub iter: usize,
    pub dev_bleu: f64,
    pub tune_bleu: f64,
    pub best_epoch: usize,
    pub active_features: Vec<String>,
    pub weights_path: PathBuf,
    pub labels_paths: Vec<PathBuf>,
    /// Unix seconds.
    pub started: u64,
    pub finished: u64,
    /// Exit status per hook invocation, keyed `hook:set`.
    pub hook_status: BTreeMap<String, i32>,
}

impl IterationState {
    /// Checks that the referenced files still exist and parse.
    pub fn check_files(&self, workdir: &Path) -> Result<()> {
        WeightVector::from_path(&workdir.join(&self.weights_path))?;
        for p in &self.labels_paths {
            let p = workdir.join(p);
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "ledger references missing file {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set.
fn now_unix() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
    {
        return v;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Replaces `path` atomically with `contents`.
fn replace_file(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = with_suffix(path, "tmp");
    fs::write(&tmp, contents).map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

/// Append-only JSON-lines ledger.
#[derive(Debug, Clone)]
pub struct Ledger {
    path: PathBuf,
}

impl Ledger {
    pub fn new(workdir: &Path) -> Self {
        Self {
            path: workdir.join(LEDGER_FILE),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read(&self) -> Result<Vec<IterationState>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let f = fs::File::open(&self.path).map_err(|e| Error::file(&self.path, e))?;
        let mut entries: Vec<IterationState> = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let st: IterationState =
                serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
            if st.iter != entries.len() + 1 {
                return Err(Error::parse(
                    i + 1,
                    format!("ledger iteration {} out of sequence", st.iter),
                ));
            }
            entries.push(st);
        }
        Ok(entries)
    }

    pub fn append(&self, state: &IterationState) -> Result<()> {
        let existing = self.read()?;
        if state.iter != existing.len() + 1 {
            return Err(Error::Config(format!(
                "ledger has {} entries; cannot append iteration {}",
                existing.len(),
                state.iter
            )));
        }
        let mut bytes = if self.path.exists() {
            fs::read(&self.path).map_err(|e| Error::file(&self.path, e))?
        } else {
            Vec::new()
        };
        bytes.extend(
            serde_json::to_string(state)
                .map_err(|e| Error::Config(e.to_string()))?
                .bytes(),
        );
        bytes.push(b'\n');
        replace_file(&self.path, &bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    Score,
    Assemble,
    Tune,
    Select,
    Rerank,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Score,
        Stage::Assemble,
        Stage::Tune,
        Stage::Select,
        Stage::Rerank,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Score => "score",
            Stage::Assemble => "assemble",
            Stage::Tune => "tune",
            Stage::Select => "select",
            Stage::Rerank => "rerank",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn marker(self, iter_dir: &Path) -> PathBuf {
        iter_dir.join(format!(".{}.done", self.name()))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::MaxIterations => "max_iterations",
        })
    }
}

/// Whether the loop should stop after the given dev BLEU history.
pub fn stop_reason(dev_bleu: &[f64], iterations_max: usize, min_delta: f64) -> Option<StopReason> {
    if let [.., prev, last] = dev_bleu {
        if last - prev < min_delta {
            return Some(StopReason::Converged);
        }
    }
    (dev_bleu.len() >= iterations_max).then_some(StopReason::MaxIterations)
}

/// Index of the best dev BLEU; ties go to the earliest.
pub fn best_iteration(dev_bleu: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in dev_bleu.iter().enumerate() {
        if best.is_none_or(|b| v > dev_bleu[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainOutcome {
    /// State of the best-dev iteration, whose labels are the final output.
    pub final_state: IterationState,
    pub stop_reason: StopReason,
    pub history: Vec<IterationState>,
    pub final_labels: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Evaluation {
    dev_bleu: f64,
}

/// Runs one iteration, or finishes a partially completed one.
pub struct IterationRunner<'a> {
    config: &'a PipelineConfig,
    iter: usize,
    dir: PathBuf,
    prev_labels: Option<PathBuf>,
}

impl<'a> IterationRunner<'a> {
    pub fn new(
        config: &'a PipelineConfig,
        iter: usize,
        prev: Option<&IterationState>,
    ) -> Result<Self> {
        let prev_labels = match prev {
            Some(p) => {
                p.check_files(&config.workdir)?;
                Some(config.labels_prefix(p.iter))
            }
            None if iter > 1 => {
                return Err(Error::Config(format!(
                    "iteration {iter} needs the previous iteration's state"
                )))
            }
            None => None,
        };
        let dir = config.iteration_dir(iter);
        fs::create_dir_all(dir.join("scores")).map_err(|e| Error::file(&dir, e))?;
        Ok(Self {
            config,
            iter,
            dir,
            prev_labels,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        stage.marker(&self.dir).exists()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn nbest_path(&self, set: &str) -> PathBuf {
        self.path(&format!("{set}.nbest"))
    }

    fn score_path(&self, set: &str, name: &str) -> PathBuf {
        self.dir.join("scores").join(format!("{set}.{name}.tsv"))
    }

    fn matrix_path(&self, set: &str) -> PathBuf {
        self.path(&format!("{set}.matrix.tsv"))
    }

    fn source_path(&self, set: &str) -> &Path {
        match set {
            "tune" => &self.config.data.tune_src,
            "dev" => &self.config.data.dev_src,
            _ => &self.config.data.transfer_src,
        }
    }

    fn started(&self) -> Result<u64> {
        let p = self.path(".started");
        if let Ok(s) = fs::read_to_string(&p) {
            if let Ok(v) = s.trim().parse() {
                return Ok(v);
            }
        }
        let now = now_unix();
        replace_file(&p, now.to_string().as_bytes())?;
        Ok(now)
    }

    fn hook_status(&self) -> Result<BTreeMap<String, i32>> {
        let p = self.path("hook_status.json");
        match fs::read_to_string(&p) {
            Ok(s) => {
                serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
            Err(_) => Ok(BTreeMap::new()),
        }
    }

    fn record_status(&self, results: &[(String, i32)]) -> Result<()> {
        let mut status = self.hook_status()?;
        status.extend(results.iter().cloned());
        let body = serde_json::to_vec_pretty(&status).map_err(|e| Error::Config(e.to_string()))?;
        replace_file(&self.path("hook_status.json"), &body)
    }

    fn render(&self, template: &str, input: &Path, output: &Path, set: &str, name: &str) -> String {
        let prev = self
            .prev_labels
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        template
            .replace("{ITER}", &self.iter.to_string())
            .replace("{IN}", &input.display().to_string())
            .replace("{OUT}", &output.display().to_string())
            .replace("{SET}", set)
            .replace("{NAME}", name)
            .replace("{PREV}", &prev)
    }

    fn run_hook(&self, stage: Stage, key: &str, command: &str) -> (String, Result<i32>) {
        log::info!("iter {} {stage}: {command}", self.iter);
        let output = Command::new("sh")
            .arg("-c")
            .arg(command)
            .current_dir(&self.dir)
            .output();
        let result = match output {
            Err(e) => Err(Error::Hook {
                stage: format!("{stage} ({key})"),
                msg: format!("could not start `{command}`: {e}"),
            }),
            Ok(out) => {
                let code = out.status.code().unwrap_or(-1);
                if out.status.success() {
                    Ok(code)
                } else {
                    let stderr = String::from_utf8_lossy(&out.stderr);
                    let tail: Vec<&str> = stderr.lines().rev().take(20).collect();
                    let tail: Vec<&str> = tail.into_iter().rev().collect();
                    Err(Error::Hook {
                        stage: format!("{stage} ({key})"),
                        msg: format!(
                            "`{command}` exited with {}: {}",
                            out.status,
                            tail.join("\n")
                        ),
                    })
                }
            }
        };
        (key.to_string(), result)
    }

    /// Runs hook jobs, at most `parallelism` at a time, recording statuses.
    fn run_hooks(&self, stage: Stage, jobs: Vec<(String, String)>) -> Result<()> {
        let mut results: Vec<(String, Result<i32>)> = Vec::new();
        for chunk in jobs.chunks(self.config.parallelism) {
            let chunk_results: Vec<(String, Result<i32>)> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(key, cmd)| s.spawn(move || self.run_hook(stage, key, cmd)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("hook thread panicked"))
                    .collect()
            });
            let failed = chunk_results.iter().any(|(_, r)| r.is_err());
            results.extend(chunk_results);
            if failed {
                break;
            }
        }
        let mut statuses = Vec::new();
        let mut first_err = None;
        for (key, r) in results {
            match r {
                Ok(code) => statuses.push((key, code)),
                Err(e) => {
                    if let Error::Hook { msg, .. } = &e {
                        let code = msg
                            .split("exit status: ")
                            .nth(1)
                            .and_then(|s| s.split(':').next())
                            .and_then(|s| s.trim().parse().ok())
                            .unwrap_or(-1);
                        statuses.push((key, code));
                    }
                    first_err.get_or_insert(e);
                }
            }
        }
        self.record_status(&statuses)?;
        match first_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn load_nbest(&self, set: &str) -> Result<NBestCorpus> {
        NBestCorpus::from_path(&self.nbest_path(set))
    }

    fn load_sources(&self, set: &str) -> Result<SourceCorpus> {
        SourceCorpus::from_path(self.source_path(set))
    }

    fn stage_generate(&self) -> Result<()> {
        let template = &self.config.hooks[GENERATE_HOOK];
        let jobs = SETS
            .iter()
            .map(|set| {
                let cmd = self.render(
                    template,
                    self.source_path(set),
                    &self.nbest_path(set),
                    set,
                    "",
                );
                (format!("{GENERATE_HOOK}:{set}"), cmd)
            })
            .collect::<Vec<_>>();
        // generation is usually the heavy stage; keep it sequential
        for job in jobs {
            self.run_hooks(Stage::Generate, vec![job])?;
        }
        for set in SETS {
            let corpus = self.load_nbest(set)?;
            let sources = self.load_sources(set)?;
            if corpus.len() != sources.len() {
                return Err(Error::Misaligned(format!(
                    "{set}: n-best covers {} sentences, source has {}",
                    corpus.len(),
                    sources.len()
                )));
            }
        }
        Ok(())
    }

    fn stage_score(&self) -> Result<()> {
        let mut jobs = Vec::new();
        for set in SETS {
            for name in &self.config.features.external {
                let template = &self.config.hooks[&score_hook(name)];
                let cmd = self.render(
                    template,
                    &self.nbest_path(set),
                    &self.score_path(set, name),
                    set,
                    name,
                );
                jobs.push((format!("{}:{set}", score_hook(name)), cmd));
            }
        }
        self.run_hooks(Stage::Score, jobs)?;
        for set in SETS {
            let corpus = self.load_nbest(set)?;
            for t in self.score_tables(set)? {
                t.validate(&corpus)?;
            }
        }
        Ok(())
    }

    fn score_tables(&self, set: &str) -> Result<Vec<ExternalScoreTable>> {
        self.config
            .features
            .external
            .iter()
            .map(|name| ExternalScoreTable::from_path(&self.score_path(set, name), name))
            .collect()
    }

    fn stage_assemble(&self) -> Result<()> {
        let spec = self.config.features.spec()?;
        for set in SETS {
            let corpus = self.load_nbest(set)?;
            let matrix = assemble_matrix(&corpus, &spec, &self.score_tables(set)?)?;
            matrix.to_path(&self.matrix_path(set))?;
        }
        Ok(())
    }

    fn stage_tune(&self) -> Result<()> {
        let matrix = FeatureMatrix::from_path(&self.matrix_path("tune"))?;
        let corpus = self.load_nbest("tune")?;
        let refs = ReferenceSet::from_paths(&self.config.data.tune_refs)?;
        let run = tune_mira(
            &matrix,
            &corpus,
            &refs,
            &MiraConfig::try_from(&self.config.mira)?,
        )?;
        let mut buf = Vec::new();
        run.best_weights
            .write_tsv(&mut buf, Some((run.best_epoch, run.best_bleu())))?;
        replace_file(&self.path("weights.tsv"), &buf)
    }

    fn load_mask(&self) -> Result<SelectionMask> {
        let p = self.path("mask.txt");
        let text = fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
        Ok(SelectionMask {
            active: text
                .lines()
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
            k: self.config.top_k_models,
        })
    }

    fn stage_select(&self) -> Result<()> {
        let weights = WeightVector::from_path(&self.path("weights.tsv"))?;
        let mask = select_models(&weights, self.config.top_k_models);
        let body: String = mask.active.iter().map(|a| format!("{a}\n")).collect();
        replace_file(&self.path("mask.txt"), body.as_bytes())
    }

    fn stage_rerank(&self) -> Result<()> {
        let weights = WeightVector::from_path(&self.path("weights.tsv"))?;
        let mask = self.load_mask()?;

        let corpus = self.load_nbest("transfer")?;
        let matrix = FeatureMatrix::from_path(&self.matrix_path("transfer"))?;
        let labels = rerank_labels(&matrix, &corpus, &weights, Some(&mask))?;
        let sources = self.load_sources("transfer")?;
        write_pseudo_labels(
            &sources,
            &labels.labels,
            self.config.label_format,
            &self.config.labels_prefix(self.iter),
        )?;

        let corpus = self.load_nbest("dev")?;
        let matrix = FeatureMatrix::from_path(&self.matrix_path("dev"))?;
        let result = rerank(&matrix, &corpus, &weights, Some(&mask))?;
        let mut buf = Vec::new();
        result.write_tsv(&mut buf)?;
        replace_file(&self.path("dev.selections.tsv"), &buf)
    }

    fn dev_selections(&self) -> Result<Vec<usize>> {
        let p = self.path("dev.selections.tsv");
        let text = fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
        text.lines()
            .enumerate()
            .map(|(i, l)| {
                l.split('\t')
                    .nth(1)
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(|| Error::parse(i + 1, "bad selection line"))
            })
            .collect()
    }

    fn stage_evaluate(&self) -> Result<()> {
        let corpus = self.load_nbest("dev")?;
        let refs = ReferenceSet::from_paths(&self.config.data.dev_refs)?;
        let selections = self.dev_selections()?;
        if selections.len() != corpus.len() {
            return Err(Error::Misaligned(
                "dev selections do not cover the dev set".into(),
            ));
        }
        let dev_bleu = HypothesisStats::compute(&corpus, &refs)?
            .corpus_bleu(&selections)
            .value;
        let body = serde_json::to_vec(&Evaluation { dev_bleu })
            .map_err(|e| Error::Config(e.to_string()))?;
        replace_file(&self.path("evaluation.json"), &body)
    }

    /// Runs one stage unless its marker exists.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        if self.is_done(stage) {
            log::info!("iter {} {stage}: already done", self.iter);
            return Ok(());
        }
        match stage {
            Stage::Generate => self.stage_generate(),
            Stage::Score => self.stage_score(),
            Stage::Assemble => self.stage_assemble(),
            Stage::Tune => self.stage_tune(),
            Stage::Select => self.stage_select(),
            Stage::Rerank => self.stage_rerank(),
            Stage::Evaluate => self.stage_evaluate(),
        }?;
        let marker = stage.marker(&self.dir);
        fs::write(&marker, b"").map_err(|e| Error::file(&marker, e))
    }

    /// Runs every remaining stage and returns the iteration's ledger record.
    pub fn run(&self) -> Result<IterationState> {
        let started = self.started()?;
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        let eval_path = self.path("evaluation.json");
        let eval: Evaluation = serde_json::from_str(
            &fs::read_to_string(&eval_path).map_err(|e| Error::file(&eval_path, e))?,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        let weights_text = fs::read_to_string(self.path("weights.tsv"))?;
        let (best_epoch, tune_bleu) = parse_trailer(&weights_text).unwrap_or((0, f64::NAN));
        let rel = |p: PathBuf| {
            p.strip_prefix(&self.config.workdir)
                .map(Path::to_path_buf)
                .unwrap_or(p)
        };
        Ok(IterationState {
            iter: self.iter,
            dev_bleu: eval.dev_bleu,
            tune_bleu,
            best_epoch,
            active_features: self.load_mask()?.active,
            weights_path: rel(self.path("weights.tsv")),
            labels_paths: self
                .config
                .label_files(&self.config.labels_prefix(self.iter))
                .into_iter()
                .map(rel)
                .collect(),
            started,
            finished: now_unix(),
            hook_status: self.hook_status()?,
        })
    }
}

fn parse_trailer(weights_text: &str) -> Option<(usize, f64)> {
    let line = weights_text
        .lines()
        .find(|l| l.starts_with("#best_epoch"))?;
    let f: Vec<&str> = line.split('\t').collect();
    Some((f.get(1)?.parse().ok()?, f.get(3)?.parse().ok()?))
}

/// Runs (or resumes) iteration `prev.iter + 1`.
pub fn run_iteration(
    config: &PipelineConfig,
    prev: Option<&IterationState>,
) -> Result<IterationState> {
    config.validate()?;
    let iter = prev.map_or(1, |p| p.iter + 1);
    IterationRunner::new(config, iter, prev)?.run()
}

/// Loops iterations until dev BLEU stops improving by `min_delta` or the
/// iteration budget is spent, then copies the best-dev labels to
/// `WORKDIR/final.*`.
pub fn run_selftrain(config: &PipelineConfig, resume: bool) -> Result<SelfTrainOutcome> {
    config.validate()?;
    fs::create_dir_all(&config.workdir).map_err(|e| Error::file(&config.workdir, e))?;
    let ledger = Ledger::new(&config.workdir);
    let mut history = ledger.read()?;
    if !resume && (!history.is_empty() || config.iteration_dir(1).exists()) {
        return Err(Error::Config(format!(
            "{} already holds a run; pass --resume to continue it",
            config.workdir.display()
        )));
    }
    for st in &history {
        st.check_files(&config.workdir)?;
    }

    let stop = loop {
        let devs: Vec<f64> = history.iter().map(|s| s.dev_bleu).collect();
        if let Some(reason) = stop_reason(&devs, config.iterations_max, config.min_delta) {
            break reason;
        }
        let state = run_iteration(config, history.last())?;
        log::info!(
            "iteration {} finished: dev BLEU {:.4}",
            state.iter,
            state.dev_bleu
        );
        ledger.append(&state)?;
        history.push(state);
    };

    let devs: Vec<f64> = history.iter().map(|s| s.dev_bleu).collect();
    let best = best_iteration(&devs).expect("at least one iteration");
    let final_state = history[best].clone();
    let mut final_labels = Vec::new();
    for (from, to) in config
        .label_files(&config.labels_prefix(final_state.iter))
        .into_iter()
        .zip(config.label_files(&config.workdir.join("final")))
    {
        let bytes = fs::read(&from).map_err(|e| Error::file(&from, e))?;
        replace_file(&to, &bytes)?;
        final_labels.push(to);
    }
    Ok(SelfTrainOutcome {
        final_state,
        stop_reason: stop,
        history,
        final_labels,
    })
}

/// Renders the ledger as an aligned text table.
pub fn format_status(entries: &[IterationState]) -> String {
    let mut out = String::from("iter\tdev_bleu\ttune_bleu\tbest_epoch\tactive\tseconds\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{}\t{}\t{}\n",
            e.iter,
            e.dev_bleu,
            e.tune_bleu,
            e.best_epoch,
            e.active_features.join(","),
            e.finished.saturating_sub(e.started)
        ));
    }
    out
}
