//! Python bindings. Results come back as plain dicts, lists and tuples.

use std::path::PathBuf;
use std::str::FromStr;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use ugsim::analysis::{self, AcceptanceCurve, Histogram, PiecewiseFit, SegmentFit, Weighting};
use ugsim::game::{self, GameConfig, Offer, ResponderChoice};
use ugsim::parser::{self, ExtractionMode, ParseError, ParseErrorKind, ParsedDecision};
use ugsim::prompt::{self, PromptTemplate, PromptingMethod, Side};
use ugsim::reference::{self, ResponderSample};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_arg<T: FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(value_err)
}

/// Payoffs in coins as `(proposer, responder)`.
#[pyfunction]
#[pyo3(signature = (offer, choice, total_good = 100))]
fn payoff(offer: i64, choice: &str, total_good: u32) -> PyResult<(u32, u32)> {
    let config = GameConfig::new(total_good, 100).map_err(value_err)?;
    let offer = Offer::new(&config, offer).map_err(value_err)?;
    let choice: ResponderChoice = parse_arg(choice)?;
    let p = game::payoff(&config, offer, choice).map_err(value_err)?;
    Ok((p.proposer_payoff, p.responder_payoff))
}

/// The subgame perfect equilibrium `(offer, choice)`.
#[pyfunction]
fn equilibrium() -> (u32, &'static str) {
    let (offer, choice) = game::equilibrium(&GameConfig::default());
    (offer.coins(), choice.as_str())
}

fn samples_from(samples: Vec<(u32, bool)>) -> Vec<ResponderSample> {
    samples
        .into_iter()
        .map(|(offer, accepted)| ResponderSample { offer, accepted })
        .collect()
}

/// Synthetic reference dataset as a dict with `proposer_offers`,
/// `responder_samples` (list of `(offer, accepted)`) and `provenance`.
#[pyfunction]
#[pyo3(signature = (seed = 7, n = 1000))]
fn synthesize_reference(py: Python<'_>, seed: u64, n: usize) -> PyResult<Bound<'_, PyDict>> {
    let data = reference::synthesize_reference(seed, n).map_err(value_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("proposer_offers", data.proposer_offers())?;
    d.set_item(
        "responder_samples",
        data.responder_samples
            .iter()
            .map(|s| (s.offer, s.accepted))
            .collect::<Vec<_>>(),
    )?;
    d.set_item("provenance", data.provenance)?;
    Ok(d)
}

/// Renders the prompt for one agent with the built-in exemplars.
#[pyfunction]
#[pyo3(signature = (method, side, offer = None, template_path = None))]
fn render_prompt(
    method: &str,
    side: &str,
    offer: Option<u32>,
    template_path: Option<PathBuf>,
) -> PyResult<String> {
    let method: PromptingMethod = parse_arg(method)?;
    let side: Side = parse_arg(side)?;
    let template = match template_path {
        Some(p) => PromptTemplate::load(&p).map_err(value_err)?,
        None => PromptTemplate::default(),
    };
    prompt::render_prompt(&template, method, side, &prompt::default_exemplars(), offer)
        .map(|p| p.text)
        .map_err(value_err)
}

fn parse_result(
    py: Python<'_>,
    result: Result<ParsedDecision, ParseError>,
) -> PyResult<Bound<'_, PyDict>> {
    let d = PyDict::new_bound(py);
    match result {
        Ok(decision) => {
            d.set_item("ok", true)?;
            d.set_item("offer", decision.offer)?;
            d.set_item("choice", decision.choice.map(|c| c.as_str()))?;
            d.set_item(
                "mode",
                match decision.extraction_mode {
                    ExtractionMode::Structured => "structured",
                    ExtractionMode::Fallback => "fallback",
                },
            )?;
        }
        Err(e) => {
            d.set_item("ok", false)?;
            d.set_item(
                "error",
                match e.kind {
                    ParseErrorKind::NoValue => "no_value",
                    ParseErrorKind::OutOfRange => "out_of_range",
                    ParseErrorKind::Ambiguous => "ambiguous",
                    ParseErrorKind::MalformedStructure => "malformed_structure",
                },
            )?;
            d.set_item("excerpt", e.excerpt)?;
        }
    }
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (text, total_good = 100))]
fn parse_proposer<'py>(py: Python<'py>, text: &str, total_good: u32) -> PyResult<Bound<'py, PyDict>> {
    parse_result(py, parser::parse_proposer(text, total_good))
}

#[pyfunction]
fn parse_responder<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    parse_result(py, parser::parse_responder(text))
}

fn histogram_dict<'py>(py: Python<'py>, h: &Histogram) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("bin_width", h.bin_width)?;
    d.set_item("bin_starts", &h.bin_starts)?;
    d.set_item("counts", &h.counts)?;
    d.set_item("frequencies", &h.frequencies)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (offers, bin_width = 5))]
fn histogram(py: Python<'_>, offers: Vec<u32>, bin_width: u32) -> PyResult<Bound<'_, PyDict>> {
    let h = analysis::normalized_histogram(&offers, bin_width).map_err(value_err)?;
    histogram_dict(py, &h)
}

/// Total variation distance between the binned distributions of two offer lists.
#[pyfunction]
#[pyo3(signature = (a, b, bin_width = 5))]
fn tv_distance(a: Vec<u32>, b: Vec<u32>, bin_width: u32) -> PyResult<f64> {
    let ha = analysis::normalized_histogram(&a, bin_width).map_err(value_err)?;
    let hb = analysis::normalized_histogram(&b, bin_width).map_err(value_err)?;
    analysis::tv_distance(&ha, &hb).map_err(value_err)
}

fn curve_list<'py>(py: Python<'py>, c: &AcceptanceCurve) -> PyResult<Bound<'py, PyList>> {
    let list = PyList::empty_bound(py);
    for p in &c.points {
        let d = PyDict::new_bound(py);
        d.set_item("offer", p.offer)?;
        d.set_item("accepted", p.accepted)?;
        d.set_item("total", p.total)?;
        d.set_item("rate", p.rate)?;
        list.append(d)?;
    }
    Ok(list)
}

/// Acceptance rate per offer from `(offer, accepted)` pairs.
#[pyfunction]
fn acceptance_curve(py: Python<'_>, samples: Vec<(u32, bool)>) -> PyResult<Bound<'_, PyList>> {
    let c = analysis::acceptance_curve(&samples_from(samples)).map_err(value_err)?;
    curve_list(py, &c)
}

fn segment_dict<'py>(py: Python<'py>, s: &SegmentFit) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("status", s.status.as_str())?;
    d.set_item("slope", s.slope)?;
    d.set_item("intercept", s.intercept)?;
    d.set_item("n_points", s.n_points)?;
    d.set_item("residual_dof", s.residual_dof)?;
    d.set_item(
        "band",
        s.band
            .iter()
            .map(|b| (b.offer, b.fitted, b.lower, b.upper))
            .collect::<Vec<_>>(),
    )?;
    Ok(d)
}

fn fit_dict<'py>(py: Python<'py>, f: &PiecewiseFit) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("breakpoint", f.breakpoint)?;
    d.set_item("weighting", f.weighting.as_str())?;
    d.set_item("confidence", f.confidence)?;
    d.set_item("left", segment_dict(py, &f.left)?)?;
    d.set_item("right", segment_dict(py, &f.right)?)?;
    d.set_item("jump", f.jump)?;
    Ok(d)
}

/// Separate linear fits of acceptance rate below and at-or-above the
/// breakpoint. Band entries are `(offer, fitted, lower, upper)`.
#[pyfunction]
#[pyo3(signature = (samples, breakpoint = 50, weighting = "by_count"))]
fn piecewise_fit<'py>(
    py: Python<'py>,
    samples: Vec<(u32, bool)>,
    breakpoint: u32,
    weighting: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let weighting: Weighting = parse_arg(weighting)?;
    let c = analysis::acceptance_curve(&samples_from(samples)).map_err(value_err)?;
    let f = analysis::piecewise_fit(&c, breakpoint, weighting).map_err(value_err)?;
    fit_dict(py, &f)
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns `(exit_code, stdout, stderr)`.
#[pyfunction]
fn cli(args: Vec<String>) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = ugsim::cli::main_with_args(
        std::iter::once("ugsim".to_string()).chain(args),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}

/// Successful decisions of a run directory as a list of cell dicts.
#[pyfunction]
fn collect_results(py: Python<'_>, run_dir: PathBuf) -> PyResult<Bound<'_, PyList>> {
    let cells = ugsim::runner::collect_results(&run_dir)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let list = PyList::empty_bound(py);
    for cell in cells {
        let d = PyDict::new_bound(py);
        d.set_item("pattern", &cell.id.pattern)?;
        d.set_item("temperature", cell.id.temperature)?;
        d.set_item("proposer_offers", &cell.proposer_offers)?;
        d.set_item(
            "responder_samples",
            cell.responder_samples
                .iter()
                .map(|s| (s.offer, s.accepted))
                .collect::<Vec<_>>(),
        )?;
        list.append(d)?;
    }
    Ok(list)
}

#[pymodule]
#[pyo3(name = "ugsim")]
fn ugsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    init(m)
}

/// Adds the module's functions to `m`.
pub fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(payoff, m)?)?;
    m.add_function(wrap_pyfunction!(equilibrium, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_reference, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_proposer, m)?)?;
    m.add_function(wrap_pyfunction!(parse_responder, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(tv_distance, m)?)?;
    m.add_function(wrap_pyfunction!(acceptance_curve, m)?)?;
    m.add_function(wrap_pyfunction!(piecewise_fit, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add_function(wrap_pyfunction!(collect_results, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
