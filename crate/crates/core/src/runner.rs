//! Execution of the experiment grid.
//!
//! A run covers every (pattern, temperature, side) cell. Each cell collects
//! `n_agents` independent decisions into `<run_id>/<pattern>_<temperature>_<side>.jsonl`
//! and the run is summarised in `<run_id>/manifest.json`.
//!
//! Transcript files are append-only JSON Lines. Records are written in agent
//! order regardless of which worker finished first, and every random draw a
//! mock makes is keyed by (seed, cell, agent, attempt), so mock-backed runs
//! are reproducible byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{format_temperature, CellId, CellResults};
use crate::backend::{derive_seed, AgentCall, Backend, HttpSettings};
use crate::game::GameConfig;
use crate::parser::{parse_decision, ParseError, ParsedDecision};
use crate::prompt::{
    default_exemplars, load_exemplars, render_prompt, validate_template, Exemplar, PromptError,
    PromptTemplate, PromptingMethod, Side,
};
use crate::reference::{
    load_reference, synthesize_reference, ReferenceDataset, ReferenceError, ResponderSample,
    MAX_OFFER,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_REQUERY_LIMIT: u32 = 3;
/// Consecutive agents whose backend calls fail outright before a cell is
/// abandoned.
pub const BACKEND_FAILURE_STREAK: usize = 3;
pub const TABLE1_TEMPERATURES: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
pub const BUNDLED_TABLE1_CONFIG: &str = include_str!("../configs/table1.toml");

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Prompt(#[from] PromptError),
    #[error("reference data: {0}")]
    Reference(#[from] ReferenceError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}:{line}: corrupt transcript record: {message}")]
    CorruptTranscript {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("template changed since the run started (manifest {expected}, now {actual})")]
    TemplateMismatch { expected: String, actual: String },
    #[error("run directory {0} already holds a manifest; use resume")]
    AlreadyExists(PathBuf),
    #[error("no transcripts found under {0}")]
    NoTranscripts(PathBuf),
}

impl RunError {
    /// True for problems with inputs rather than the environment.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            RunError::Config(_)
                | RunError::Prompt(_)
                | RunError::TemplateMismatch { .. }
                | RunError::AlreadyExists(_)
                | RunError::NoTranscripts(_)
        ) || matches!(self, RunError::Reference(e) if !matches!(e, ReferenceError::Io(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPattern {
    pub label: String,
    pub model_id: String,
    pub method: PromptingMethod,
    pub temperatures: Vec<f64>,
}

impl ExperimentPattern {
    /// The four simulation settings A-D. Chain-of-thought omits temperature 2.0.
    pub fn table1() -> Vec<ExperimentPattern> {
        let p = |label: &str, model: &str, method, temps: &[f64]| ExperimentPattern {
            label: label.into(),
            model_id: model.into(),
            method,
            temperatures: temps.to_vec(),
        };
        vec![
            p("A", "gpt-3.5-turbo-0613", PromptingMethod::ZeroShot, &TABLE1_TEMPERATURES),
            p("B", "gpt-4-1106-preview", PromptingMethod::ZeroShot, &TABLE1_TEMPERATURES),
            p("C", "gpt-4-1106-preview", PromptingMethod::FewShot, &TABLE1_TEMPERATURES),
            p(
                "D",
                "gpt-4-1106-preview",
                PromptingMethod::ChainOfThought,
                &TABLE1_TEMPERATURES[..4],
            ),
        ]
    }
}

/// Differences between `patterns` and the bundled A-D grid.
pub fn table1_deviations(patterns: &[ExperimentPattern]) -> Vec<String> {
    let expected = ExperimentPattern::table1();
    let mut findings = Vec::new();
    if patterns.len() != expected.len() {
        findings.push(format!("expected 4 patterns, found {}", patterns.len()));
    }
    for want in &expected {
        match patterns.iter().find(|p| p.label == want.label) {
            None => findings.push(format!("pattern {} is missing", want.label)),
            Some(got) if got != want => findings.push(format!(
                "pattern {} differs: {} x {} x {:?}",
                got.label, got.model_id, got.method, got.temperatures
            )),
            Some(_) => {}
        }
    }
    findings
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ResponderOfferSource {
    /// Draw with replacement from the reference proposer offers.
    ReferenceDistribution,
    /// Cycle through 0, 5, ..., 100.
    UniformGrid,
    /// Repeat or truncate the given list.
    FixedList { values: Vec<u32> },
}

impl ResponderOfferSource {
    pub fn describe(&self) -> String {
        match self {
            ResponderOfferSource::ReferenceDistribution => {
                "responders see offers drawn with replacement from the reference proposer distribution".into()
            }
            ResponderOfferSource::UniformGrid => {
                "responders see offers cycling over 0, 5, ..., 100".into()
            }
            ResponderOfferSource::FixedList { values } => {
                format!("responders see the fixed offer list {values:?}")
            }
        }
    }
}

/// Offers shown to `n` responder agents, indexed by agent.
pub fn draw_responder_offers(
    source: &ResponderOfferSource,
    n: usize,
    reference: Option<&ReferenceDataset>,
    seed: u64,
) -> Result<Vec<u32>, RunError> {
    match source {
        ResponderOfferSource::ReferenceDistribution => {
            let reference = reference.ok_or_else(|| {
                RunError::Config("reference-distribution offers need a reference dataset".into())
            })?;
            let pool = &reference.proposer_samples;
            if pool.is_empty() {
                return Err(RunError::Config(
                    "reference dataset has no proposer offers to draw from".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n).map(|_| pool[rng.gen_range(0..pool.len())].offer).collect())
        }
        ResponderOfferSource::UniformGrid => Ok((0..n).map(|i| (i % 21) as u32 * 5).collect()),
        ResponderOfferSource::FixedList { values } => {
            if values.is_empty() {
                return Err(RunError::Config("fixed offer list is empty".into()));
            }
            if let Some(bad) = values.iter().find(|&&v| v > MAX_OFFER) {
                return Err(RunError::Config(format!("fixed offer {bad} is outside [0, 100]")));
            }
            Ok(values.iter().copied().cycle().take(n).collect())
        }
    }
}

fn default_n_agents() -> usize {
    1000
}

fn default_sides() -> Vec<Side> {
    Side::BOTH.to_vec()
}

fn default_requery_limit() -> u32 {
    DEFAULT_REQUERY_LIMIT
}

fn default_offer_source() -> ResponderOfferSource {
    ResponderOfferSource::ReferenceDistribution
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub patterns: Vec<ExperimentPattern>,
    #[serde(default = "default_n_agents")]
    pub n_agents: usize,
    #[serde(default = "default_sides")]
    pub sides: Vec<Side>,
    #[serde(default = "default_offer_source")]
    pub responder_offers: ResponderOfferSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub reproducible_timestamps: bool,
    /// Permit chain-of-thought at temperature 2.0.
    #[serde(default)]
    pub allow_cot_t2: bool,
    #[serde(default = "default_requery_limit")]
    pub requery_limit: u32,
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default)]
    pub exemplars: Option<PathBuf>,
    /// Reference CSV; a synthetic stand-in is generated when absent.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub backend: HttpSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    /// Loads a config file. Template, exemplar and reference paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config = Self::from_toml(&text)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.template, &mut config.exemplars, &mut config.reference]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn bundled_table1() -> Self {
        Self::from_toml(BUNDLED_TABLE1_CONFIG).expect("bundled config parses")
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |msg: String| Err(RunError::Config(msg));
        if self.run_id.trim().is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return bad(format!(
                "run_id {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                self.run_id
            ));
        }
        if self.n_agents == 0 {
            return bad("n_agents must be at least 1".into());
        }
        if self.sides.is_empty() {
            return bad("at least one side is required".into());
        }
        if self.patterns.is_empty() {
            return bad("no experiment patterns".into());
        }
        if self.backend.max_parallel == 0 {
            return bad("backend.max_parallel must be at least 1".into());
        }
        let mut labels = BTreeSet::new();
        for p in &self.patterns {
            if p.label.is_empty() || p.label.contains(['/', '\\', '_']) {
                return bad(format!("pattern label {:?} is not usable in file names", p.label));
            }
            if !labels.insert(&p.label) {
                return bad(format!("duplicate pattern label {}", p.label));
            }
            if p.temperatures.is_empty() {
                return bad(format!("pattern {} has no temperatures", p.label));
            }
            let mut seen = BTreeSet::new();
            for &t in &p.temperatures {
                if !(0.0..=2.0).contains(&t) {
                    return bad(format!("pattern {}: temperature {t} is outside [0, 2]", p.label));
                }
                if !seen.insert(format_temperature(t)) {
                    return bad(format!("pattern {}: temperature {t} listed twice", p.label));
                }
                if p.method == PromptingMethod::ChainOfThought && t >= 2.0 && !self.allow_cot_t2 {
                    return bad(format!(
                        "pattern {}: chain-of-thought at temperature 2.0 is excluded from the grid \
                         (responses are too slow to collect); pass --force-cot-t2 to run it anyway",
                        p.label
                    ));
                }
            }
        }
        if let ResponderOfferSource::FixedList { values } = &self.responder_offers {
            if values.is_empty() || values.iter().any(|&v| v > MAX_OFFER) {
                return bad("fixed responder offers must be a non-empty list within [0, 100]".into());
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut cells = Vec::new();
        for p in &self.patterns {
            for &t in &p.temperatures {
                for &side in &self.sides {
                    cells.push(CellKey {
                        pattern: p.label.clone(),
                        model_id: p.model_id.clone(),
                        method: p.method,
                        temperature: t,
                        side,
                    });
                }
            }
        }
        cells
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub pattern: String,
    pub model_id: String,
    pub method: PromptingMethod,
    pub temperature: f64,
    pub side: Side,
}

impl CellKey {
    pub fn file_name(&self) -> String {
        format!(
            "{}_{}_{}.jsonl",
            self.pattern,
            format_temperature(self.temperature),
            self.side
        )
    }

    fn stream_key(&self) -> u64 {
        // FNV-1a over the file name, which is unique per cell.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.file_name().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// Template, exemplars and reference data a run is executed with.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub template: PromptTemplate,
    pub exemplars: Vec<Exemplar>,
    pub reference: Arc<ReferenceDataset>,
    pub game: GameConfig,
}

impl RunInputs {
    pub fn resolve(config: &RunConfig) -> Result<Self, RunError> {
        let template = match &config.template {
            Some(path) => PromptTemplate::load(path)?,
            None => PromptTemplate::default(),
        };
        let findings = validate_template(&template);
        if !findings.is_empty() {
            return Err(RunError::Config(format!("template: {}", findings.join("; "))));
        }
        let exemplars = match &config.exemplars {
            Some(path) => load_exemplars(path)?,
            None => default_exemplars(),
        };
        let reference = match &config.reference {
            Some(path) => load_reference(path)?,
            None => synthesize_reference(config.seed, 1000)?,
        };
        Ok(Self {
            template,
            exemplars,
            reference: Arc::new(reference),
            game: GameConfig::default(),
        })
    }

    pub fn template_hash(&self) -> String {
        self.template.fingerprint(&self.exemplars)
    }
}

/// Result of one agent query: a decision, an unparseable reply, or a backend
/// failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseOutcome {
    Ok(ParsedDecision),
    Error(ParseError),
    BackendError(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub run_id: String,
    pub pattern_label: String,
    pub model_id: String,
    pub method: PromptingMethod,
    pub temperature: f64,
    pub side: Side,
    pub agent_index: u64,
    pub offer_shown: Option<u32>,
    pub prompt_text: String,
    pub raw_response: String,
    pub parsed: ParseOutcome,
    /// 1 for the first query of this agent, 2..=4 for requeries.
    pub attempt_count: u32,
    /// HTTP attempts the backend spent on this query.
    pub backend_attempts: u32,
    pub latency_ms: u64,
    pub timestamp: Option<String>,
}

impl TranscriptRecord {
    pub fn decision(&self) -> Option<&ParsedDecision> {
        match &self.parsed {
            ParseOutcome::Ok(d) => Some(d),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub completed: usize,
    pub parse_failures: usize,
    pub requeries: usize,
    pub backend_errors: usize,
}

impl CellCounts {
    pub fn lines(&self) -> usize {
        self.completed + self.parse_failures + self.backend_errors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    #[serde(flatten)]
    pub key: CellKey,
    pub file: String,
    pub n_agents: usize,
    pub counts: CellCounts,
    pub complete: bool,
    /// Set when the cell was abandoned because the backend kept failing.
    pub abandoned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: RunConfig,
    pub backend_label: String,
    /// How to rebuild the backend on resume, e.g. `mock:equilibrium` or `http`.
    pub backend_spec: String,
    pub template_hash: String,
    pub reference_provenance: String,
    pub responder_offer_policy: String,
    pub parse_failure_policy: String,
    pub started_at: Option<String>,
    pub finished_at: Option<String>,
    pub cells: Vec<CellSummary>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| RunError::CorruptTranscript {
            file: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn save(&self, run_dir: &Path) -> Result<(), RunError> {
        let path = run_dir.join(MANIFEST_FILE);
        let tmp = run_dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|c| c.complete)
    }
}

/// Lets a caller stop a run between agents. Records already in flight are
/// still written.
#[derive(Debug, Default)]
pub struct RunControl {
    cancel: AtomicBool,
}

impl RunControl {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }
}

fn now_timestamp(reproducible: bool) -> Option<String> {
    (!reproducible).then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
}

/// Reads a transcript. A final line without a newline is a torn write and
/// is dropped (and truncated away when `repair` is set); any other
/// unreadable line is an error.
pub fn read_transcript(path: &Path, repair: bool) -> Result<Vec<TranscriptRecord>, RunError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut records = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        let (line, terminated) = match rest.iter().position(|&b| b == b'\n') {
            Some(i) => (&rest[..i], true),
            None => (rest, false),
        };
        let parsed = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<TranscriptRecord>(s).map_err(|e| e.to_string()));
        match parsed {
            Ok(record) => records.push(record),
            Err(_) if !terminated => {
                if repair {
                    let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
                    file.set_len(offset as u64).map_err(io_err(path))?;
                }
                break;
            }
            Err(message) => {
                return Err(RunError::CorruptTranscript {
                    file: path.to_path_buf(),
                    line: line_no,
                    message,
                })
            }
        }
        offset += line.len() + usize::from(terminated);
    }
    Ok(records)
}

pub fn count_records(records: &[TranscriptRecord]) -> CellCounts {
    let mut counts = CellCounts::default();
    for r in records {
        match r.parsed {
            ParseOutcome::Ok(_) => counts.completed += 1,
            ParseOutcome::Error(_) => counts.parse_failures += 1,
            ParseOutcome::BackendError(_) => counts.backend_errors += 1,
        }
        if r.attempt_count > 1 {
            counts.requeries += 1;
        }
    }
    counts
}

struct CellContext<'a> {
    config: &'a RunConfig,
    inputs: &'a RunInputs,
    cell: &'a CellKey,
    offers: Option<Vec<u32>>,
    stream_key: u64,
}

struct AgentOutcome {
    records: Vec<TranscriptRecord>,
    backend_failed: bool,
}

fn run_agent(ctx: &CellContext<'_>, backend: &dyn Backend, index: usize) -> AgentOutcome {
    let offer_shown = ctx.offers.as_ref().map(|o| o[index]);
    let prompt = render_prompt(
        &ctx.inputs.template,
        ctx.cell.method,
        ctx.cell.side,
        &ctx.inputs.exemplars,
        offer_shown,
    );
    let base = |prompt_text: String| TranscriptRecord {
        run_id: ctx.config.run_id.clone(),
        pattern_label: ctx.cell.pattern.clone(),
        model_id: ctx.cell.model_id.clone(),
        method: ctx.cell.method,
        temperature: ctx.cell.temperature,
        side: ctx.cell.side,
        agent_index: index as u64,
        offer_shown,
        prompt_text,
        raw_response: String::new(),
        parsed: ParseOutcome::BackendError(String::new()),
        attempt_count: 1,
        backend_attempts: 0,
        latency_ms: 0,
        timestamp: None,
    };
    let prompt = match prompt {
        Ok(p) => p,
        Err(e) => {
            // Inputs are validated up front, so this only fires on exemplar problems.
            let mut record = base(String::new());
            record.parsed = ParseOutcome::BackendError(format!("prompt rendering failed: {e}"));
            return AgentOutcome {
                records: vec![record],
                backend_failed: true,
            };
        }
    };

    let mut records = Vec::new();
    for attempt in 1..=ctx.config.requery_limit + 1 {
        let call = AgentCall {
            prompt: &prompt,
            model_id: &ctx.cell.model_id,
            temperature: ctx.cell.temperature,
            stream: derive_seed(&[
                ctx.config.seed,
                ctx.stream_key,
                index as u64,
                u64::from(attempt),
            ]),
        };
        let mut record = base(prompt.text.clone());
        record.attempt_count = attempt;
        let response = backend.complete(&call);
        record.timestamp = now_timestamp(ctx.config.reproducible_timestamps);
        match response {
            Err(e) => {
                record.parsed = ParseOutcome::BackendError(e.to_string());
                records.push(record);
                return AgentOutcome {
                    records,
                    backend_failed: true,
                };
            }
            Ok(resp) => {
                record.backend_attempts = resp.attempt_count;
                record.latency_ms = resp.latency_ms;
                let parsed =
                    parse_decision(ctx.cell.side, &resp.raw_text, ctx.inputs.game.total_good);
                record.raw_response = resp.raw_text;
                let done = parsed.is_ok();
                record.parsed = match parsed {
                    Ok(d) => ParseOutcome::Ok(d),
                    Err(e) => ParseOutcome::Error(e),
                };
                records.push(record);
                if done {
                    break;
                }
            }
        }
    }
    AgentOutcome {
        records,
        backend_failed: false,
    }
}

fn append_records(
    file: &mut File,
    path: &Path,
    records: &[TranscriptRecord],
) -> Result<(), RunError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

fn run_cell(
    ctx: &CellContext<'_>,
    backend: &dyn Backend,
    control: &RunControl,
    run_dir: &Path,
) -> Result<CellSummary, RunError> {
    let path = run_dir.join(ctx.cell.file_name());
    let existing = read_transcript(&path, true)?;
    let done: BTreeSet<u64> = existing
        .iter()
        .filter(|r| r.decision().is_some())
        .map(|r| r.agent_index)
        .collect();
    let pending: Vec<usize> = (0..ctx.config.n_agents)
        .filter(|i| !done.contains(&(*i as u64)))
        .collect();

    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;

    let abandoned = AtomicBool::new(false);
    if !pending.is_empty() {
        let next = AtomicUsize::new(0);
        let failure_streak = AtomicUsize::new(0);
        let workers = ctx.config.backend.max_parallel.max(1).min(pending.len());
        let (tx, rx) = mpsc::channel::<(usize, AgentOutcome)>();
        let mut write_result = Ok(());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let (pending, next, failure_streak, abandoned) =
                    (&pending, &next, &failure_streak, &abandoned);
                scope.spawn(move || loop {
                    if control.is_cancelled() || abandoned.load(Ordering::SeqCst) {
                        break;
                    }
                    let slot = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&index) = pending.get(slot) else { break };
                    let outcome = run_agent(ctx, backend, index);
                    if outcome.backend_failed {
                        if failure_streak.fetch_add(1, Ordering::SeqCst) + 1
                            >= BACKEND_FAILURE_STREAK
                        {
                            abandoned.store(true, Ordering::SeqCst);
                        }
                    } else {
                        failure_streak.store(0, Ordering::SeqCst);
                    }
                    if tx.send((slot, outcome)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            // Single writer: emit agents in pending order.
            let mut buffered: BTreeMap<usize, AgentOutcome> = BTreeMap::new();
            let mut next_slot = 0usize;
            for (slot, outcome) in rx {
                buffered.insert(slot, outcome);
                while let Some(outcome) = buffered.remove(&next_slot) {
                    if write_result.is_ok() {
                        write_result = append_records(&mut file, &path, &outcome.records);
                    }
                    next_slot += 1;
                }
            }
            // Cancellation can leave gaps; finished agents are still kept.
            for outcome in buffered.into_values() {
                if write_result.is_ok() {
                    write_result = append_records(&mut file, &path, &outcome.records);
                }
            }
        });
        write_result?;
    }

    let records = read_transcript(&path, false)?;
    let counts = count_records(&records);
    let completed_agents: BTreeSet<u64> = records
        .iter()
        .filter(|r| r.decision().is_some())
        .map(|r| r.agent_index)
        .collect();
    Ok(CellSummary {
        key: ctx.cell.clone(),
        file: ctx.cell.file_name(),
        n_agents: ctx.config.n_agents,
        complete: completed_agents.len() >= ctx.config.n_agents,
        abandoned: abandoned.load(Ordering::SeqCst),
        counts,
    })
}

fn execute(
    config: &RunConfig,
    inputs: &RunInputs,
    backend: &dyn Backend,
    backend_spec: &str,
    control: &RunControl,
    mut manifest: RunManifest,
) -> Result<RunManifest, RunError> {
    let run_dir = config.run_dir();
    let offer_seed = derive_seed(&[config.seed, 0x0FFE_5EED]);
    let responder_offers = if config.sides.contains(&Side::Responder) {
        Some(draw_responder_offers(
            &config.responder_offers,
            config.n_agents,
            Some(&inputs.reference),
            offer_seed,
        )?)
    } else {
        None
    };

    manifest.backend_label = backend.label();
    manifest.backend_spec = backend_spec.to_string();
    manifest.finished_at = None;
    let cells = config.cells();
    if manifest.cells.len() != cells.len() {
        manifest.cells = cells
            .iter()
            .map(|key| CellSummary {
                key: key.clone(),
                file: key.file_name(),
                n_agents: config.n_agents,
                counts: CellCounts::default(),
                complete: false,
                abandoned: false,
            })
            .collect();
    }
    manifest.save(&run_dir)?;

    for (i, cell) in cells.iter().enumerate() {
        if control.is_cancelled() {
            break;
        }
        let ctx = CellContext {
            config,
            inputs,
            cell,
            offers: (cell.side == Side::Responder)
                .then(|| responder_offers.clone())
                .flatten(),
            stream_key: cell.stream_key(),
        };
        manifest.cells[i] = run_cell(&ctx, backend, control, &run_dir)?;
        manifest.save(&run_dir)?;
    }
    if !control.is_cancelled() {
        manifest.finished_at = now_timestamp(config.reproducible_timestamps);
    }
    manifest.save(&run_dir)?;
    Ok(manifest)
}

/// Runs every cell of the grid into `<output_dir>/<run_id>/`.
pub fn run(
    config: &RunConfig,
    inputs: &RunInputs,
    backend: &dyn Backend,
    backend_spec: &str,
    control: &RunControl,
) -> Result<RunManifest, RunError> {
    config.validate()?;
    let run_dir = config.run_dir();
    if run_dir.join(MANIFEST_FILE).exists() {
        return Err(RunError::AlreadyExists(run_dir));
    }
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let manifest = RunManifest {
        run_id: config.run_id.clone(),
        config: config.clone(),
        backend_label: backend.label(),
        backend_spec: backend_spec.to_string(),
        template_hash: inputs.template_hash(),
        reference_provenance: inputs.reference.provenance.clone(),
        responder_offer_policy: config.responder_offers.describe(),
        parse_failure_policy: format!(
            "unparseable replies are re-queried up to {} times; the agent is left missing if all fail",
            config.requery_limit
        ),
        started_at: now_timestamp(config.reproducible_timestamps),
        finished_at: None,
        cells: Vec::new(),
    };
    execute(config, inputs, backend, backend_spec, control, manifest)
}

/// Completes the agents a previous run did not finish. The template and
/// exemplars must hash to the value recorded in the manifest.
pub fn resume(
    manifest_path: &Path,
    inputs: &RunInputs,
    backend: &dyn Backend,
    control: &RunControl,
) -> Result<RunManifest, RunError> {
    let manifest = RunManifest::load(manifest_path)?;
    let actual = inputs.template_hash();
    if actual != manifest.template_hash {
        return Err(RunError::TemplateMismatch {
            expected: manifest.template_hash,
            actual,
        });
    }
    let mut config = manifest.config.clone();
    // The manifest may have been moved along with its run directory.
    if let Some(run_dir) = manifest_path.parent() {
        if let Some(parent) = run_dir.parent() {
            config.output_dir = parent.to_path_buf();
        }
        if let Some(name) = run_dir.file_name() {
            config.run_id = name.to_string_lossy().into_owned();
        }
    }
    config.validate()?;
    let spec = manifest.backend_spec.clone();
    execute(&config, inputs, backend, &spec, control, manifest)
}

/// Successful decisions of a run directory, grouped by (pattern, temperature).
pub fn collect_results(run_dir: &Path) -> Result<Vec<CellResults>, RunError> {
    let mut files: Vec<PathBuf> = fs::read_dir(run_dir)
        .map_err(io_err(run_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(RunError::NoTranscripts(run_dir.to_path_buf()));
    }
    let run_id = run_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut cells: BTreeMap<(String, String), CellResults> = BTreeMap::new();
    for file in files {
        for record in read_transcript(&file, false)? {
            let Some(decision) = record.decision() else { continue };
            let key = (
                record.pattern_label.clone(),
                format_temperature(record.temperature),
            );
            let cell = cells.entry(key).or_insert_with(|| CellResults {
                id: CellId {
                    run_id: if record.run_id.is_empty() {
                        run_id.clone()
                    } else {
                        record.run_id.clone()
                    },
                    pattern: record.pattern_label.clone(),
                    temperature: record.temperature,
                },
                proposer_offers: Vec::new(),
                responder_samples: Vec::new(),
            });
            match (decision.offer, decision.choice, record.offer_shown) {
                (Some(offer), _, _) => cell.proposer_offers.push(offer),
                (_, Some(choice), Some(shown)) => cell.responder_samples.push(ResponderSample {
                    offer: shown,
                    accepted: choice.is_accept(),
                }),
                _ => {
                    return Err(RunError::CorruptTranscript {
                        file: file.clone(),
                        line: 0,
                        message: format!(
                            "agent {} has a decision without the data it needs",
                            record.agent_index
                        ),
                    })
                }
            }
        }
    }
    Ok(cells.into_values().collect())
}
