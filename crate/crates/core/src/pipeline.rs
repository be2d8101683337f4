//! End-to-end orchestration: personas → profiles → assignments → trials →
//! reports, each stage persisted so a rerun resumes where it stopped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, DeltaSummary, Formula, Grouping};
use crate::counterfactual::{self, FactorialParticipant, FactorialPlan};
use crate::game::{self, GroundingPlacement, TrialJob, TrialOptions, TrialSubject};
use crate::gateway::{Backend, Gateway, RemoteBackend, RemoteConfig, ReplayBackend, DEFAULT_MAX_ATTEMPTS, DEFAULT_RETRY_BUDGET};
use crate::matcher::{self, AssignmentRow};
use crate::model::{
    Backstory, Framing, Game, GameSpec, GenerationParams, HumanParticipant, Method, Party, TraitProfile, TrialRecord,
};
use crate::persona::{self, InterviewScript, InterviewSettings};
use crate::seed::{derive_seed, sha256_hex};
use crate::simulator::{Simulator, SimulatorConfig};
use crate::survey::{self, TraitSchema};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    fn new(field: &str, reason: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn stage_err(stage: &'static str) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Stage { stage, message }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Built-in deterministic simulator.
    #[default]
    Simulator,
    /// Completions endpoint over HTTP.
    Remote,
    /// Recorded completions keyed by prompt hash and seed.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    /// Replay fixture (JSONL).
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub critic_temperature: f64,
    #[serde(default)]
    pub simulator: SimulatorConfig,
}

fn default_in_flight() -> usize {
    8
}
fn default_attempts() -> u32 {
    DEFAULT_MAX_ATTEMPTS
}
fn default_retry_budget() -> u32 {
    DEFAULT_RETRY_BUDGET
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_temperature() -> f64 {
    GenerationParams::GENERATION_TEMPERATURE
}
fn default_true() -> bool {
    true
}
fn default_personas() -> usize {
    20
}
fn default_repeats() -> u32 {
    1
}

impl Default for BackendSection {
    fn default() -> Self {
        toml::from_str("").expect("every backend field has a default")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaSection {
    /// TOML trait schema; the built-in schema when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub game: Game,
    #[serde(default)]
    pub roster: Option<PathBuf>,
    #[serde(default = "default_personas")]
    pub personas: usize,
    /// Root of every random substream. Required.
    pub seed: Option<i64>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_true")]
    pub grounding: bool,
    #[serde(default = "default_true")]
    pub filtering: bool,
    #[serde(default)]
    pub placement: GroundingPlacement,
    /// Trials per participant and partner party.
    #[serde(default = "default_repeats")]
    pub repeats: u32,
}

fn default_method() -> Method {
    Method::DeepBind
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorsSection {
    /// Run the pool × framing × year counterfactual design.
    #[serde(default = "default_true")]
    pub counterfactual: bool,
    /// Run the grounding × filtering ablation grid.
    #[serde(default)]
    pub ablation: bool,
    #[serde(default)]
    pub pools: Option<[String; 2]>,
    #[serde(default)]
    pub framings: Option<[Framing; 2]>,
    #[serde(default)]
    pub years: Option<[i32; 2]>,
}

impl Default for FactorsSection {
    fn default() -> Self {
        toml::from_str("").expect("every factors field has a default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub schema: SchemaSection,
    pub study: StudySection,
    #[serde(default)]
    pub factors: FactorsSection,
    pub output: OutputSection,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    /// Parses `text`, resolving relative paths against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            ConfigError::new(&field, e.message().to_string())
        })?;
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &self.study.roster {
            self.study.roster = Some(resolve(base, p));
        }
        if let Some(p) = &self.schema.path {
            self.schema.path = Some(resolve(base, p));
        }
        if let Some(p) = &self.backend.fixture {
            self.backend.fixture = Some(resolve(base, p));
        }
        self.output.dir = resolve(base, &self.output.dir);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.study.seed {
            None => return Err(ConfigError::new("seed", "an explicit root seed is required")),
            Some(s) if s < 0 => return Err(ConfigError::new("seed", format!("must be non-negative, got {s}"))),
            _ => {}
        }
        match &self.study.roster {
            None => return Err(ConfigError::new("roster", "a roster CSV is required")),
            Some(p) if !p.is_file() => {
                return Err(ConfigError::new("roster", format!("{} does not exist", p.display())))
            }
            _ => {}
        }
        if let Some(p) = &self.schema.path {
            if !p.is_file() {
                return Err(ConfigError::new("schema", format!("{} does not exist", p.display())));
            }
        }
        if self.study.personas == 0 {
            return Err(ConfigError::new("personas", "must be positive"));
        }
        if self.study.repeats == 0 {
            return Err(ConfigError::new("repeats", "must be positive"));
        }
        let b = &self.backend;
        if b.max_in_flight == 0 {
            return Err(ConfigError::new("max_in_flight", "must be positive"));
        }
        if b.max_attempts == 0 {
            return Err(ConfigError::new("max_attempts", "must be positive"));
        }
        if !(b.temperature > 0.0 && b.temperature.is_finite()) {
            return Err(ConfigError::new("temperature", "generation temperature must be positive"));
        }
        if b.critic_temperature != 0.0 {
            return Err(ConfigError::new("critic_temperature", "critics decode greedily (0.0)"));
        }
        match b.kind {
            BackendKind::Simulator => {}
            BackendKind::Remote => {
                if b.endpoint.is_none() {
                    return Err(ConfigError::new("endpoint", "required for the remote backend"));
                }
                if b.model.is_none() {
                    return Err(ConfigError::new("model", "required for the remote backend"));
                }
            }
            BackendKind::Replay => match &b.fixture {
                None => return Err(ConfigError::new("fixture", "required for the replay backend")),
                Some(p) if !p.is_file() => {
                    return Err(ConfigError::new("fixture", format!("{} does not exist", p.display())))
                }
                _ => {}
            },
        }
        self.plan().validate().map_err(|e| ConfigError::new("factors", e.to_string()))?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.study.seed.expect("validated config has a seed") as u64
    }

    pub fn plan(&self) -> FactorialPlan {
        let mut plan = FactorialPlan::for_game(self.study.game);
        if let Some(p) = &self.factors.pools {
            plan.pools = p.clone();
        }
        if let Some(f) = self.factors.framings {
            plan.framings = f;
        }
        if let Some(y) = self.factors.years {
            plan.years = y;
        }
        plan
    }

    pub fn schema(&self) -> Result<TraitSchema, ConfigError> {
        match &self.schema.path {
            Some(p) => TraitSchema::load(p).map_err(|e| ConfigError::new("schema", e.to_string())),
            None => Ok(TraitSchema::default()),
        }
    }

    fn trial_options(&self) -> TrialOptions {
        let mut opts = TrialOptions::new(self.seed()).ablation(self.study.grounding, self.study.filtering);
        opts.max_attempts = self.backend.max_attempts;
        opts.placement = self.study.placement;
        opts.temperature = self.backend.temperature;
        opts
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    PipelineConfig::from_toml(&text, base)
}

/// Backend described by the config, capped at `max_in_flight` requests.
pub fn build_backend(config: &BackendSection) -> Result<Arc<dyn Backend>, PipelineError> {
    let inner: Arc<dyn Backend> = match config.kind {
        BackendKind::Simulator => Arc::new(Simulator::new(config.simulator.clone())),
        BackendKind::Remote => {
            let mut remote = RemoteConfig::new(
                config.endpoint.clone().unwrap_or_default(),
                config.model.clone().unwrap_or_default(),
            );
            remote.retry_budget = config.retry_budget;
            remote.timeout_ms = config.timeout_ms;
            if let Some(var) = &config.auth_env {
                let token = std::env::var(var)
                    .map_err(|_| ConfigError::new("auth_env", format!("environment variable {var} is not set")))?;
                remote.auth_token = Some(token);
            }
            Arc::new(RemoteBackend::new(remote).map_err(|e| stage_err("backend")(e.to_string()))?)
        }
        BackendKind::Replay => {
            let path = config.fixture.as_deref().unwrap_or(Path::new(""));
            Arc::new(ReplayBackend::load(path).map_err(|e| stage_err("backend")(e.to_string()))?)
        }
    };
    Ok(Arc::new(Gateway::new(inner, config.max_in_flight)))
}

/// One emitted file and its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestStage {
    pub name: String,
    pub files: Vec<ManifestFile>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: Vec<ManifestStage>,
}

impl Manifest {
    pub fn stage(&self, name: &str) -> Option<&ManifestStage> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn files(&self) -> impl Iterator<Item = &ManifestFile> {
        self.stages.iter().flat_map(|s| &s.files)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Stage names in execution order; the manifest lists them this way.
pub const STAGES: [&str; 7] = ["personas", "profiles", "assignments", "trials", "counterfactual", "ablation", "reports"];

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let io = |message: String| PipelineError::Io {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| io(e.to_string()))?;
    let mut items = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| io(format!("line {}: {e}", n + 1)))?);
    }
    Ok(items)
}

/// Stage runner bound to one config, output directory and backend.
pub struct Pipeline {
    config: PipelineConfig,
    schema: TraitSchema,
    backend: Arc<dyn Backend>,
    manifest: Manifest,
    resumed: Vec<&'static str>,
}

pub const PERSONAS_FILE: &str = "personas.jsonl";
pub const PROFILES_FILE: &str = "profiles.jsonl";
pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const COUNTERFACTUAL_FILE: &str = "counterfactual_trials.jsonl";
pub const ABLATION_FILE: &str = "ablation_trials.jsonl";
pub const REPORT_FILE: &str = "report.md";

/// The four grounding × filtering arms, labelled as in the ablation tables.
pub const ABLATION_ARMS: [(&str, bool, bool); 4] = [
    ("Date + Consistency", true, true),
    ("Date, No consistency", true, false),
    ("No date, Consistency", false, true),
    ("No date, No consistency", false, false),
];

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let backend = build_backend(&config.backend)?;
        Self::with_backend(config, backend)
    }

    /// Uses `backend` for every model call instead of the configured one.
    pub fn with_backend(config: PipelineConfig, backend: Arc<dyn Backend>) -> Result<Self, PipelineError> {
        config.validate()?;
        let schema = config.schema()?;
        let pipeline = Self {
            config,
            schema,
            backend,
            manifest: Manifest::default(),
            resumed: Vec::new(),
        };
        pipeline.save_manifest()?;
        Ok(pipeline)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Stages loaded from an earlier run instead of recomputed.
    pub fn resumed(&self) -> &[&'static str] {
        &self.resumed
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.output.dir.join(name)
    }

    fn save_manifest(&self) -> Result<(), PipelineError> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.path(MANIFEST_FILE), format!("{json}\n").as_bytes())
    }

    fn record(&mut self, stage: &str, files: &[&str]) -> Result<(), PipelineError> {
        let mut entries = Vec::with_capacity(files.len());
        for name in files {
            let path = self.path(name);
            let bytes = std::fs::read(&path).map_err(|e| PipelineError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
            entries.push(ManifestFile {
                path: name.to_string(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        self.manifest.stages.retain(|s| s.name != stage);
        self.manifest.stages.push(ManifestStage {
            name: stage.to_string(),
            files: entries,
        });
        self.manifest.stages.sort_by_key(|s| STAGES.iter().position(|n| *n == s.name));
        self.save_manifest()
    }

    /// Loads `file` if a previous run left it, otherwise computes and persists it.
    fn stage<T, F>(&mut self, name: &'static str, file: &str, compute: F) -> Result<Vec<T>, PipelineError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce(&Self) -> Result<Vec<T>, PipelineError>,
    {
        let path = self.path(file);
        if self.manifest.stage(name).is_some() {
            return read_jsonl(&path);
        }
        if path.is_file() {
            tracing::info!(stage = name, "resuming from {}", path.display());
            let items = read_jsonl(&path)?;
            self.record(name, &[file])?;
            self.resumed.push(name);
            return Ok(items);
        }
        tracing::info!(stage = name, "running");
        let items = compute(self)?;
        write_atomic(&path, to_jsonl(&items).as_bytes())?;
        self.record(name, &[file])?;
        Ok(items)
    }

    pub fn personas(&mut self) -> Result<Vec<Backstory>, PipelineError> {
        self.stage("personas", PERSONAS_FILE, |p| {
            let script = InterviewScript::default();
            let root = p.config.seed();
            let backend: &dyn Backend = &*p.backend;
            (0..p.config.study.personas)
                .into_par_iter()
                .map(|i| {
                    let mut settings = InterviewSettings::new(&script, derive_seed(root, "persona", &i.to_string()));
                    settings.max_attempts = p.config.backend.max_attempts;
                    settings.gen.temperature = p.config.backend.temperature;
                    persona::generate_backstory(backend, backend, &persona::persona_id_for(root, i), &settings)
                        .map_err(|e| format!("persona {i}: {e}"))
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(stage_err("personas"))
        })
    }

    pub fn profiles(&mut self) -> Result<Vec<TraitProfile>, PipelineError> {
        let personas = self.personas()?;
        self.stage("profiles", PROFILES_FILE, |p| {
            survey::survey_population(&personas, &p.schema, &*p.backend)
                .map_err(|(id, e)| stage_err("profiles")(format!("persona {id}: {e}")))
        })
    }

    pub fn roster(&self) -> Result<Vec<HumanParticipant>, PipelineError> {
        let path = self.config.study.roster.as_deref().expect("validated config has a roster");
        matcher::load_roster(path, &self.schema).map_err(|e| stage_err("assignments")(e.to_string()))
    }

    pub fn assignments(&mut self) -> Result<Vec<AssignmentRow>, PipelineError> {
        let profiles = self.profiles()?;
        self.stage("assignments", ASSIGNMENTS_FILE, |p| {
            let humans = p.roster()?;
            let err = |e: matcher::MatchError| stage_err("assignments")(e.to_string());
            let weights = matcher::build_weight_matrix(&humans, &profiles, &p.schema).map_err(err)?;
            let assignment = matcher::optimal_assignment(&weights).map_err(err)?;
            Ok(matcher::assignment_rows(&weights, &assignment))
        })
    }

    /// Matched humans with their persona's backstory and profile.
    fn matched(&mut self) -> Result<Vec<(HumanParticipant, Backstory, TraitProfile)>, PipelineError> {
        let rows = self.assignments()?;
        let personas: BTreeMap<String, Backstory> =
            self.personas()?.into_iter().map(|b| (b.persona_id.clone(), b)).collect();
        let profiles: BTreeMap<String, TraitProfile> =
            self.profiles()?.into_iter().map(|p| (p.persona_id.clone(), p)).collect();
        let humans: BTreeMap<String, HumanParticipant> =
            self.roster()?.into_iter().map(|h| (h.id.clone(), h)).collect();
        rows.iter()
            .map(|r| {
                let missing = |what: &str, id: &str| stage_err("assignments")(format!("unknown {what} `{id}`"));
                Ok((
                    humans.get(&r.human_id).ok_or_else(|| missing("human", &r.human_id))?.clone(),
                    personas.get(&r.persona_id).ok_or_else(|| missing("persona", &r.persona_id))?.clone(),
                    profiles.get(&r.persona_id).ok_or_else(|| missing("persona", &r.persona_id))?.clone(),
                ))
            })
            .collect()
    }

    fn study_framing(&self, pool: &str) -> Result<Framing, PipelineError> {
        let plan = self.config.plan();
        plan.pool_index(pool)
            .map(|i| plan.framings[usize::from(i)])
            .or_else(|| pool.parse::<Framing>().ok().filter(|f| f.game() == self.config.study.game))
            .ok_or_else(|| stage_err("trials")(format!("pool `{pool}` is not a {:?} study", self.config.study.game)))
    }

    fn study_jobs<'a>(
        &self,
        matched: &'a [(HumanParticipant, Backstory, TraitProfile)],
        stage: &str,
    ) -> Result<Vec<TrialJob<'a>>, PipelineError> {
        let plan = self.config.plan();
        let mut jobs = Vec::new();
        for (human, backstory, profile) in matched {
            let framing = self.study_framing(&human.pool)?;
            let year = plan
                .pool_index(&human.pool)
                .map_or(framing.study_year(), |i| plan.years[usize::from(i)]);
            let spec = GameSpec::with_year(framing, Some(year));
            for partner in Party::BOTH {
                for rep in 0..self.config.study.repeats {
                    jobs.push(TrialJob {
                        subject: TrialSubject {
                            backstory,
                            profile,
                            participant_id: Some(&human.id),
                            self_party: human.party,
                            pool: &human.pool,
                        },
                        method: self.config.study.method,
                        spec,
                        partner,
                        seed: derive_seed(self.config.seed(), stage, &format!("{}/{}/{rep}", human.id, partner.label())),
                    });
                }
            }
        }
        Ok(jobs)
    }

    pub fn trials(&mut self) -> Result<Vec<TrialRecord>, PipelineError> {
        let matched = self.matched()?;
        self.stage("trials", TRIALS_FILE, |p| {
            let jobs = p.study_jobs(&matched, "trial")?;
            game::run_trials(&*p.backend, &*p.backend, &p.schema, &jobs, &p.config.trial_options())
                .map_err(|(i, e)| stage_err("trials")(format!("trial {i}: {e}")))
        })
    }

    pub fn counterfactual(&mut self) -> Result<Vec<TrialRecord>, PipelineError> {
        let matched = self.matched()?;
        self.stage("counterfactual", COUNTERFACTUAL_FILE, |p| {
            let plan = p.config.plan();
            let participants: Vec<FactorialParticipant<'_>> = matched
                .iter()
                .filter(|(h, _, _)| plan.pool_index(&h.pool).is_some())
                .map(|(h, b, pr)| FactorialParticipant {
                    subject: TrialSubject {
                        backstory: b,
                        profile: pr,
                        participant_id: Some(&h.id),
                        self_party: h.party,
                        pool: &h.pool,
                    },
                    id: &h.id,
                })
                .collect();
            let opts = p.config.trial_options().with_seed(derive_seed(p.config.seed(), "counterfactual", ""));
            counterfactual::run_factorial(&*p.backend, &*p.backend, &p.schema, &plan, &participants, p.config.study.method, &opts)
                .map(|run| run.trials)
                .map_err(|e| stage_err("counterfactual")(e.to_string()))
        })
    }

    /// The study trials under each grounding × filtering arm.
    pub fn ablation(&mut self) -> Result<Vec<(String, Vec<TrialRecord>)>, PipelineError> {
        let matched = self.matched()?;
        let tagged: Vec<(String, TrialRecord)> = self.stage("ablation", ABLATION_FILE, |p| {
            let jobs = p.study_jobs(&matched, "trial")?;
            let mut out = Vec::new();
            for (label, grounding, filtering) in ABLATION_ARMS {
                let opts = p.config.trial_options().ablation(grounding, filtering);
                let records = game::run_trials(&*p.backend, &*p.backend, &p.schema, &jobs, &opts)
                    .map_err(|(i, e)| stage_err("ablation")(format!("{label}, trial {i}: {e}")))?;
                out.extend(records.into_iter().map(|r| (label.to_string(), r)));
            }
            Ok(out)
        })?;
        Ok(ABLATION_ARMS
            .iter()
            .map(|(label, _, _)| {
                let records = tagged.iter().filter(|(l, _)| l == label).map(|(_, r)| r.clone()).collect();
                (label.to_string(), records)
            })
            .collect())
    }

    /// Recomputes every table from the persisted trial stores.
    pub fn reports(&mut self) -> Result<Vec<String>, PipelineError> {
        let trials = self.trials()?;
        let mut files: Vec<(String, String)> = Vec::new();
        let mut report = format!(
            "# {:?} game — {} personas, method {}, {}\n\n",
            self.config.study.game,
            self.config.study.personas,
            self.config.study.method,
            arm_label(self.config.study.grounding, self.config.study.filtering)
        );

        let plan = self.config.plan();
        let mut deltas = Vec::new();
        for framing in plan.framings {
            let subset: Vec<TrialRecord> = trials.iter().filter(|t| t.game_spec.framing == framing).cloned().collect();
            let year = subset.first().and_then(|t| t.game_spec.year).unwrap_or(framing.study_year());
            match analysis::delta_table(&subset) {
                Ok(s) => deltas.push((format!("{framing} {year}"), s)),
                Err(e) => {
                    let _ = writeln!(report, "- {framing}: {e}");
                }
            }
        }
        report.push_str("## Partisan Δ by study\n\n");
        report.push_str(&analysis::delta_markdown(&deltas));
        files.push(("delta.csv".into(), analysis::delta_csv(&deltas).map_err(|e| stage_err("reports")(e.to_string()))?));

        let human_rows = analysis::aggregate_participants(&trials, &Grouping::Human);
        report.push_str("\n## Allocation model with a study indicator\n\n");
        push_regression(&mut report, &mut files, "regression_human", &human_rows, Formula::Human)?;

        if self.config.factors.counterfactual {
            let cf = self.counterfactual()?;
            let rows = counterfactual::cells_from_trials(&plan, &cf).map_err(|e| stage_err("reports")(e.to_string()))?;
            files.push(("cells.csv".into(), counterfactual::cells_csv(&rows).map_err(|e| stage_err("reports")(e.to_string()))?));
            report.push('\n');
            report.push_str(&counterfactual::report_markdown(&plan, &rows));
            let cf_rows = analysis::aggregate_participants(&cf, &plan.grouping());
            report.push_str("\n## Counterfactual allocation model\n\n");
            push_regression(&mut report, &mut files, "regression_counterfactual", &cf_rows, Formula::Counterfactual)?;
        }

        if self.config.factors.ablation {
            let arms = self.ablation()?;
            let summaries = ablation_table(&arms).map_err(|e| stage_err("reports")(e.to_string()))?;
            files.push(("ablation.csv".into(), analysis::delta_csv(&summaries).map_err(|e| stage_err("reports")(e.to_string()))?));
            report.push_str("\n## Grounding and filtering ablation\n\n");
            report.push_str(&analysis::delta_markdown(&summaries));
        }

        files.push((REPORT_FILE.into(), report));
        for (name, body) in &files {
            write_atomic(&self.path(name), body.as_bytes())?;
        }
        let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
        self.record("reports", &names)?;
        Ok(files.into_iter().map(|(n, _)| n).collect())
    }

    /// Every stage the config enables, in order.
    pub fn run_all(&mut self) -> Result<Manifest, PipelineError> {
        self.trials()?;
        if self.config.factors.counterfactual {
            self.counterfactual()?;
        }
        if self.config.factors.ablation {
            self.ablation()?;
        }
        self.reports()?;
        Ok(self.manifest.clone())
    }
}

fn arm_label(grounding: bool, filtering: bool) -> &'static str {
    ABLATION_ARMS
        .iter()
        .find(|(_, g, f)| *g == grounding && *f == filtering)
        .map(|(l, _, _)| *l)
        .expect("every combination is labelled")
}

/// Δ summary of each ablation arm.
pub fn ablation_table(arms: &[(String, Vec<TrialRecord>)]) -> Result<Vec<(String, DeltaSummary)>, analysis::AnalysisError> {
    arms.iter()
        .map(|(label, trials)| analysis::delta_table(trials).map(|s| (label.clone(), s)))
        .collect()
}

fn push_regression(
    report: &mut String,
    files: &mut Vec<(String, String)>,
    stem: &str,
    rows: &[analysis::DesignRow],
    formula: Formula,
) -> Result<(), PipelineError> {
    match analysis::fit_ols(rows, formula) {
        Ok(fit) => {
            report.push_str(&analysis::regression_markdown(&fit, formula));
            let csv = analysis::regression_csv(&fit, formula).map_err(|e| stage_err("reports")(e.to_string()))?;
            files.push((format!("{stem}.csv"), csv));
        }
        Err(e) => {
            let _ = writeln!(report, "Not estimable on this run: {e}.");
        }
    }
    Ok(())
}

/// Loads `config` and runs every enabled stage.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Manifest, PipelineError> {
    Pipeline::new(config.clone())?.run_all()
}
