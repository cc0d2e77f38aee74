//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 for usage, validation and configuration
//! errors, 2 for runtime failures (backend, I/O).

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{analyze_cell, format_temperature, AnalysisError, AnalysisOptions, Weighting};
use crate::backend::{Backend, BackendError, HttpBackend, MockBackend, MockSpec};
use crate::prompt::{render_prompt, validate_template, PromptingMethod, Side};
use crate::reference::{synthesize_reference, ReferenceDataset};
use crate::report::{
    bubble_svg, emit_cell_report, histogram_svg, read_comparisons, read_curves, read_fits,
    read_histograms, regression_svg, write_comparisons, ReportError,
};
use crate::runner::{
    collect_results, draw_responder_offers, resume, run, table1_deviations, RunConfig, RunControl,
    RunError, RunInputs, RunManifest, MANIFEST_FILE,
};

#[derive(Debug, Parser)]
#[command(name = "ugsim", version, about = "Simulate LLM agents in the ultimatum game")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment grid.
    Run(RunArgs),
    /// Finish an interrupted run.
    Resume(ResumeArgs),
    /// Compute histograms, acceptance curves and fits for a run directory.
    Analyze(AnalyzeArgs),
    /// Redraw figures and print the comparison table from analysis CSVs.
    Report(ReportArgs),
    /// Check a run configuration without running it.
    Validate(ValidateArgs),
    /// Write a synthetic reference dataset.
    SynthReference(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML). Defaults to the bundled A-D grid.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// http, mock:equilibrium, mock:empirical, mock:threshold=N or mock:scripted=FILE
    #[arg(long, default_value = "http")]
    pub backend: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; the run lands in <out>/<run_id>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Keep only these pattern labels (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub pattern: Vec<String>,
    /// Replace each kept pattern's temperatures (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub temperature: Vec<f64>,
    /// Only run this side.
    #[arg(long)]
    pub side: Option<Side>,
    #[arg(long)]
    pub n_agents: Option<usize>,
    /// Omit wall-clock timestamps so transcripts are byte-reproducible.
    #[arg(long)]
    pub reproducible: bool,
    /// Print the grid and sample prompts without querying any backend.
    #[arg(long)]
    pub dry_run: bool,
    /// Allow chain-of-thought at temperature 2.0.
    #[arg(long)]
    pub force_cot_t2: bool,
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    /// manifest.json of the run, or its directory.
    pub manifest: PathBuf,
    /// Overrides the backend recorded in the manifest.
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub run_dir: PathBuf,
    /// Where to write artifacts. Defaults to <run_dir>/analysis.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reference CSV. Defaults to the one the run used.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = crate::analysis::DEFAULT_BIN_WIDTH)]
    pub bin_width: u32,
    #[arg(long, default_value_t = crate::analysis::DEFAULT_BREAKPOINT)]
    pub breakpoint: u32,
    #[arg(long, default_value = "by_count")]
    pub weighting: Weighting,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `analyze`.
    pub analysis_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force_cot_t2: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Samples per side.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// A backend named on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendChoice {
    Http,
    Equilibrium,
    Empirical,
    Threshold(u32),
    Scripted(PathBuf),
}

impl FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = match s.split_once('=') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("http", None) => Ok(BackendChoice::Http),
            ("mock:equilibrium", None) => Ok(BackendChoice::Equilibrium),
            ("mock:empirical", None) => Ok(BackendChoice::Empirical),
            ("mock:threshold", Some(n)) => n
                .parse()
                .map(BackendChoice::Threshold)
                .map_err(|_| format!("bad threshold {n:?}")),
            ("mock:scripted", Some(p)) if !p.is_empty() => Ok(BackendChoice::Scripted(p.into())),
            _ => Err(format!(
                "unknown backend {s:?}; expected http, mock:equilibrium, mock:empirical, \
                 mock:threshold=N or mock:scripted=FILE"
            )),
        }
    }
}

impl fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendChoice::Http => f.write_str("http"),
            BackendChoice::Equilibrium => f.write_str("mock:equilibrium"),
            BackendChoice::Empirical => f.write_str("mock:empirical"),
            BackendChoice::Threshold(n) => write!(f, "mock:threshold={n}"),
            BackendChoice::Scripted(p) => write!(f, "mock:scripted={}", p.display()),
        }
    }
}

impl BackendChoice {
    /// Scripted paths become absolute so the recorded backend string stays valid on resume.
    fn anchored(self) -> Self {
        match self {
            BackendChoice::Scripted(p) => {
                BackendChoice::Scripted(std::path::absolute(&p).unwrap_or(p))
            }
            other => other,
        }
    }

    pub fn build(&self, config: &RunConfig, inputs: &RunInputs) -> Result<Box<dyn Backend>, CliError> {
        let total_good = inputs.game.total_good;
        let mock = |spec| -> Result<Box<dyn Backend>, CliError> {
            Ok(Box::new(MockBackend::new(spec, total_good).map_err(CliError::Backend)?))
        };
        match self {
            BackendChoice::Http => {
                // Model and temperature are supplied per call.
                let settings = config.backend.backend_config("unset", 0.0);
                Ok(Box::new(HttpBackend::new(settings).map_err(CliError::Backend)?))
            }
            BackendChoice::Equilibrium => mock(MockSpec::Equilibrium),
            BackendChoice::Empirical => mock(MockSpec::EmpiricalSampler {
                reference: Arc::clone(&inputs.reference),
                seed: config.seed,
            }),
            BackendChoice::Threshold(t) => mock(MockSpec::ThresholdResponder { threshold: *t }),
            BackendChoice::Scripted(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("scripted responses {}: {e}", path.display()))
                })?;
                let responses: Vec<String> = serde_json::from_str(&text).map_err(|e| {
                    CliError::Config(format!(
                        "scripted responses {} must be a JSON array of strings: {e}",
                        path.display()
                    ))
                })?;
                mock(MockSpec::Scripted { responses })
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Run(#[from] RunError),
    #[error("{0}")]
    Backend(BackendError),
    #[error("{0}")]
    Analysis(#[from] AnalysisError),
    #[error("{0}")]
    Report(#[from] ReportError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let config = match self {
            CliError::Config(_) | CliError::Analysis(_) => true,
            CliError::Run(e) => e.is_configuration(),
            CliError::Backend(e) => matches!(e, BackendError::Config(_)),
            CliError::Report(e) => matches!(e, ReportError::Format { .. }),
            CliError::Runtime(_) => false,
        };
        if config {
            1
        } else {
            2
        }
    }
}

type Out<'a> = &'a mut dyn Write;

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, out: Out<'_>, err: Out<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: Out<'_>) -> Result<(), CliError> {
    match command {
        Command::Run(args) => cmd_run(args, out),
        Command::Resume(args) => cmd_resume(args, out),
        Command::Analyze(args) => cmd_analyze(args, out),
        Command::Report(args) => cmd_report(args, out),
        Command::Validate(args) => cmd_validate(args, out),
        Command::SynthReference(args) => cmd_synth(args, out),
    }
}

fn io(e: std::io::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::bundled_table1(),
    })
}

/// Applies command-line overrides to a loaded config.
pub fn apply_run_overrides(config: &mut RunConfig, args: &RunArgs) -> Result<(), CliError> {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(id) = &args.run_id {
        config.run_id = id.clone();
    }
    if let Some(n) = args.n_agents {
        config.n_agents = n;
    }
    if args.reproducible {
        config.reproducible_timestamps = true;
    }
    if args.force_cot_t2 {
        config.allow_cot_t2 = true;
    }
    if !args.pattern.is_empty() {
        let wanted: BTreeSet<&str> = args.pattern.iter().map(String::as_str).collect();
        let known: BTreeSet<&str> = config.patterns.iter().map(|p| p.label.as_str()).collect();
        if let Some(missing) = wanted.difference(&known).next() {
            return Err(CliError::Config(format!("no pattern labelled {missing} in the config")));
        }
        config.patterns.retain(|p| wanted.contains(p.label.as_str()));
    }
    if !args.temperature.is_empty() {
        for p in &mut config.patterns {
            p.temperatures = args.temperature.clone();
        }
    }
    if let Some(side) = args.side {
        config.sides = vec![side];
    }
    Ok(())
}

fn print_grid(config: &RunConfig, out: Out<'_>) -> std::io::Result<()> {
    writeln!(
        out,
        "run {} into {} ({} agents per cell, seed {})",
        config.run_id,
        config.run_dir().display(),
        config.n_agents,
        config.seed
    )?;
    for cell in config.cells() {
        writeln!(
            out,
            "  {:<2} {:<20} {:<17} T={:<4} {:<9} -> {}",
            cell.pattern,
            cell.model_id,
            cell.method.as_str(),
            format_temperature(cell.temperature),
            cell.side.as_str(),
            cell.file_name()
        )?;
    }
    Ok(())
}

fn dry_run(config: &RunConfig, inputs: &RunInputs, out: Out<'_>) -> Result<(), CliError> {
    print_grid(config, out).map_err(io)?;
    let sample_offer = draw_responder_offers(
        &config.responder_offers,
        1,
        Some(&inputs.reference),
        config.seed,
    )?[0];
    let methods: BTreeSet<PromptingMethod> = config.patterns.iter().map(|p| p.method).collect();
    for method in PromptingMethod::ALL.iter().filter(|m| methods.contains(m)) {
        for &side in &config.sides {
            let offer = (side == Side::Responder).then_some(sample_offer);
            let prompt = render_prompt(&inputs.template, *method, side, &inputs.exemplars, offer)
                .map_err(RunError::from)?;
            writeln!(out, "\n===== {} / {} =====\n{}", method.as_str(), side, prompt.text)
                .map_err(io)?;
        }
    }
    writeln!(out, "\ndry run: no backend was contacted").map_err(io)
}

fn summarize(manifest: &RunManifest, out: Out<'_>) -> Result<(), CliError> {
    for c in &manifest.cells {
        writeln!(
            out,
            "{:<32} completed {:>5}/{:<5} parse failures {:>4} requeries {:>4} backend errors {:>4}{}",
            c.file,
            c.counts.completed,
            c.n_agents,
            c.counts.parse_failures,
            c.counts.requeries,
            c.counts.backend_errors,
            if c.abandoned { "  (abandoned)" } else { "" }
        )
        .map_err(io)?;
    }
    if manifest.is_complete() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "run {} is incomplete; finish it with `ugsim resume`",
            manifest.run_id
        )))
    }
}

fn cmd_run(args: RunArgs, out: Out<'_>) -> Result<(), CliError> {
    let mut config = load_config(args.config.as_deref())?;
    apply_run_overrides(&mut config, &args)?;
    let choice = BackendChoice::from_str(&args.backend)
        .map_err(CliError::Config)?
        .anchored();
    config.validate()?;
    let inputs = RunInputs::resolve(&config)?;
    if args.dry_run {
        return dry_run(&config, &inputs, out);
    }
    let backend = choice.build(&config, &inputs)?;
    let manifest = run(&config, &inputs, backend.as_ref(), &choice.to_string(), &RunControl::new())?;
    writeln!(out, "wrote {}", config.run_dir().join(MANIFEST_FILE).display()).map_err(io)?;
    summarize(&manifest, out)
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn cmd_resume(args: ResumeArgs, out: Out<'_>) -> Result<(), CliError> {
    let path = manifest_path(&args.manifest);
    let manifest = RunManifest::load(&path)?;
    let spec = args.backend.unwrap_or_else(|| manifest.backend_spec.clone());
    let choice = BackendChoice::from_str(&spec).map_err(CliError::Config)?;
    let inputs = RunInputs::resolve(&manifest.config)?;
    let backend = choice.build(&manifest.config, &inputs)?;
    let manifest = resume(&path, &inputs, backend.as_ref(), &RunControl::new())?;
    summarize(&manifest, out)
}

fn analysis_reference(args: &AnalyzeArgs) -> Result<ReferenceDataset, CliError> {
    if let Some(path) = &args.reference {
        return Ok(crate::reference::load_reference(path).map_err(RunError::from)?);
    }
    let manifest = args.run_dir.join(MANIFEST_FILE);
    if manifest.exists() {
        let manifest = RunManifest::load(&manifest)?;
        let inputs = RunInputs::resolve(&manifest.config)?;
        return Ok(Arc::unwrap_or_clone(inputs.reference));
    }
    Err(CliError::Config(format!(
        "{} has no manifest; pass --reference",
        args.run_dir.display()
    )))
}

fn cmd_analyze(args: AnalyzeArgs, out: Out<'_>) -> Result<(), CliError> {
    if !args.run_dir.is_dir() {
        return Err(CliError::Config(format!(
            "run directory {} does not exist",
            args.run_dir.display()
        )));
    }
    let cells = collect_results(&args.run_dir)?;
    if cells.is_empty() {
        return Err(CliError::Config(format!(
            "{} contains transcripts but no successful decisions",
            args.run_dir.display()
        )));
    }
    let reference = analysis_reference(&args)?;
    let options = AnalysisOptions {
        bin_width: args.bin_width,
        breakpoint: args.breakpoint,
        weighting: args.weighting,
    };
    let dir = args.out.unwrap_or_else(|| args.run_dir.join("analysis"));
    let mut comparisons = Vec::new();
    for cell in &cells {
        let analysis = analyze_cell(cell, &reference, &options).map_err(|e| {
            CliError::Config(format!("cell {}: {e}", cell.id.stem()))
        })?;
        emit_cell_report(&analysis, &dir)?;
        comparisons.push(analysis.comparison);
    }
    let summary = dir.join("summary.csv");
    write_comparisons(&summary, &comparisons)?;
    print_comparisons(&comparisons, out).map_err(io)?;
    writeln!(out, "wrote {} cells to {}", comparisons.len(), dir.display()).map_err(io)
}

fn print_comparisons(
    reports: &[crate::analysis::ComparisonReport],
    out: Out<'_>,
) -> std::io::Result<()> {
    let f = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
    writeln!(
        out,
        "{:<8} {:>5} {:>6} {:>6} {:>8} {:>10} {:>9} {:>8} {:>8}",
        "cell", "temp", "n_prop", "n_resp", "tv", "mean_offer", "reject", "jump", "ref_jump"
    )?;
    for c in reports {
        writeln!(
            out,
            "{:<8} {:>5} {:>6} {:>6} {:>8} {:>10} {:>9} {:>8} {:>8}",
            c.cell.pattern,
            format_temperature(c.cell.temperature),
            c.n_proposers,
            c.n_responders,
            f(c.tv_distance),
            f(c.equilibrium.mean_offer),
            f(c.equilibrium.rejection_rate),
            f(c.jump),
            f(c.reference_jump)
        )?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs, out: Out<'_>) -> Result<(), CliError> {
    let summary = args.analysis_dir.join("summary.csv");
    if !summary.exists() {
        return Err(CliError::Config(format!(
            "{} has no summary.csv; run `ugsim analyze` first",
            args.analysis_dir.display()
        )));
    }
    let comparisons = read_comparisons(&summary)?;
    for c in &comparisons {
        let stem = c.cell.stem();
        let path = |suffix: &str| args.analysis_dir.join(format!("{stem}_{suffix}"));
        let title = format!(
            "pattern {} at temperature {}",
            c.cell.pattern,
            format_temperature(c.cell.temperature)
        );
        let histograms = read_histograms(&path("histogram.csv"))?;
        let curves = read_curves(&path("acceptance.csv"))?;
        let fits = read_fits(&path("fit.csv"))?;
        let h: Vec<_> = histograms.iter().rev().map(|(k, v)| (k.as_str(), v)).collect();
        let cv: Vec<_> = curves.iter().rev().map(|(k, v)| (k.as_str(), v)).collect();
        let fv: Vec<_> = fits.iter().rev().map(|(k, v)| (k.as_str(), v)).collect();
        for (suffix, svg) in [
            ("histogram.svg", histogram_svg(&title, &h)),
            ("regression.svg", regression_svg(&title, &cv, &fv)),
            ("bubbles.svg", bubble_svg(&title, &cv)),
        ] {
            std::fs::write(path(suffix), svg).map_err(io)?;
        }
    }
    print_comparisons(&comparisons, out).map_err(io)
}

fn cmd_validate(args: ValidateArgs, out: Out<'_>) -> Result<(), CliError> {
    let mut config = load_config(args.config.as_deref())?;
    if args.force_cot_t2 {
        config.allow_cot_t2 = true;
    }
    config.validate()?;
    let per_side: Vec<usize> = config.patterns.iter().map(|p| p.temperatures.len()).collect();
    writeln!(
        out,
        "{} patterns / {} cells per side ({})",
        config.patterns.len(),
        per_side.iter().sum::<usize>(),
        per_side
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("+")
    )
    .map_err(io)?;
    for p in &config.patterns {
        writeln!(
            out,
            "  {}: {} {} T = {}",
            p.label,
            p.model_id,
            p.method.as_str(),
            p.temperatures
                .iter()
                .map(|&t| format_temperature(t))
                .collect::<Vec<_>>()
                .join(", ")
        )
        .map_err(io)?;
    }
    writeln!(
        out,
        "sides: {}; {} agents per cell",
        config
            .sides
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(", "),
        config.n_agents
    )
    .map_err(io)?;
    let deviations = table1_deviations(&config.patterns);
    if deviations.is_empty() {
        writeln!(out, "grid matches the bundled A-D grid").map_err(io)?;
    } else {
        for d in deviations {
            writeln!(out, "note: differs from the bundled A-D grid: {d}").map_err(io)?;
        }
    }
    let inputs = RunInputs::resolve(&config)?;
    for finding in validate_template(&inputs.template) {
        writeln!(out, "template: {finding}").map_err(io)?;
    }
    writeln!(out, "template hash {}", inputs.template_hash()).map_err(io)?;
    writeln!(out, "reference: {}", inputs.reference.provenance).map_err(io)?;
    Ok(())
}

fn cmd_synth(args: SynthArgs, out: Out<'_>) -> Result<(), CliError> {
    let data = synthesize_reference(args.seed, args.n).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    data.save(&args.out).map_err(io)?;
    writeln!(
        out,
        "wrote {} proposer and {} responder samples to {}",
        data.proposer_samples.len(),
        data.responder_samples.len(),
        args.out.display()
    )
    .map_err(io)
}
