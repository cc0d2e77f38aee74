//! Distribution summaries and comparisons for simulated and reference data.
//!
//! Covers normalized offer histograms, per-offer acceptance curves, a
//! two-segment linear fit of acceptance on offer with a fixed breakpoint,
//! total variation distance, and distance from the subgame perfect
//! equilibrium.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::reference::{ResponderSample, MAX_OFFER};

pub const DEFAULT_BIN_WIDTH: u32 = 5;
pub const DEFAULT_BREAKPOINT: u32 = 50;
pub const CONFIDENCE_LEVEL: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no data: {0}")]
    Empty(&'static str),
    #[error("bin width {0} must be positive and divide 100")]
    InvalidBinWidth(u32),
    #[error("offer {0} is outside [0, 100]")]
    OfferOutOfRange(u32),
    #[error("histograms use different binning")]
    BinningMismatch,
    #[error("breakpoint {0} must lie strictly between 0 and 100")]
    BreakpointOutOfRange(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: u32,
    pub bin_starts: Vec<u32>,
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index of the most populated bin (lowest on ties).
    pub fn modal_bin(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }

    /// Inclusive offer range covered by bin `i`.
    pub fn bin_range(&self, i: usize) -> (u32, u32) {
        let start = self.bin_starts[i];
        let last = i + 1 == self.bin_starts.len();
        let end = if last { MAX_OFFER } else { start + self.bin_width - 1 };
        (start, end)
    }
}

/// Bins offers as `[k*w, (k+1)*w)`, with the top bin closed at 100.
pub fn normalized_histogram(offers: &[u32], bin_width: u32) -> Result<Histogram, AnalysisError> {
    if bin_width == 0 || MAX_OFFER % bin_width != 0 {
        return Err(AnalysisError::InvalidBinWidth(bin_width));
    }
    if offers.is_empty() {
        return Err(AnalysisError::Empty("no offers to bin"));
    }
    let n_bins = (MAX_OFFER / bin_width) as usize;
    let mut counts = vec![0u64; n_bins];
    for &offer in offers {
        if offer > MAX_OFFER {
            return Err(AnalysisError::OfferOutOfRange(offer));
        }
        let idx = ((offer / bin_width) as usize).min(n_bins - 1);
        counts[idx] += 1;
    }
    let total = offers.len() as f64;
    Ok(Histogram {
        bin_width,
        bin_starts: (0..n_bins as u32).map(|k| k * bin_width).collect(),
        frequencies: counts.iter().map(|&c| c as f64 / total).collect(),
        counts,
    })
}

/// Half the L1 distance between two identically binned histograms.
pub fn tv_distance(a: &Histogram, b: &Histogram) -> Result<f64, AnalysisError> {
    if a.bin_width != b.bin_width || a.bin_starts != b.bin_starts {
        return Err(AnalysisError::BinningMismatch);
    }
    let sum: f64 = a
        .frequencies
        .iter()
        .zip(&b.frequencies)
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok((0.5 * sum).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub offer: u32,
    pub accepted: u64,
    pub total: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceCurve {
    /// One point per distinct offer, ascending.
    pub points: Vec<CurvePoint>,
}

pub fn acceptance_curve(samples: &[ResponderSample]) -> Result<AcceptanceCurve, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::Empty("no responder samples"));
    }
    let mut tallies = std::collections::BTreeMap::<u32, (u64, u64)>::new();
    for s in samples {
        if s.offer > MAX_OFFER {
            return Err(AnalysisError::OfferOutOfRange(s.offer));
        }
        let entry = tallies.entry(s.offer).or_default();
        entry.0 += u64::from(s.accepted);
        entry.1 += 1;
    }
    Ok(AcceptanceCurve {
        points: tallies
            .into_iter()
            .map(|(offer, (accepted, total))| CurvePoint {
                offer,
                accepted,
                total,
                rate: accepted as f64 / total as f64,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Each offer's rate is weighted by how many decisions it aggregates.
    ByCount,
    Unweighted,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::ByCount => "by_count",
            Weighting::Unweighted => "unweighted",
        }
    }
}

impl std::str::FromStr for Weighting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "by_count" => Ok(Weighting::ByCount),
            "unweighted" => Ok(Weighting::Unweighted),
            other => Err(format!("unknown weighting {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentStatus {
    Fitted,
    /// Fewer than two distinct offers: a flat line at the weighted mean.
    Degenerate,
    Empty,
}

impl SegmentStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentStatus::Fitted => "fitted",
            SegmentStatus::Degenerate => "degenerate",
            SegmentStatus::Empty => "empty",
        }
    }
}

impl std::str::FromStr for SegmentStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fitted" => Ok(SegmentStatus::Fitted),
            "degenerate" => Ok(SegmentStatus::Degenerate),
            "empty" => Ok(SegmentStatus::Empty),
            other => Err(format!("unknown segment status {other:?}")),
        }
    }
}

/// Fitted value and confidence band at one grid offer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub offer: u32,
    pub fitted: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFit {
    pub status: SegmentStatus,
    pub slope: f64,
    pub intercept: f64,
    /// Distinct offers (curve points) in the segment.
    pub n_points: usize,
    pub total_weight: f64,
    /// Residual degrees of freedom, `n_points - 2` when fitted.
    pub residual_dof: usize,
    /// Offers that went into this segment.
    pub offers: Vec<u32>,
    pub band: Vec<BandPoint>,
}

impl SegmentFit {
    pub fn value_at(&self, offer: f64) -> f64 {
        self.intercept + self.slope * offer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseFit {
    pub breakpoint: u32,
    pub weighting: Weighting,
    pub confidence: f64,
    /// Offers below the breakpoint.
    pub left: SegmentFit,
    /// Offers at or above the breakpoint.
    pub right: SegmentFit,
    /// Right line at the breakpoint minus the left line extrapolated there.
    pub jump: Option<f64>,
}

impl PiecewiseFit {
    pub fn band_points(&self) -> impl Iterator<Item = &BandPoint> {
        self.left.band.iter().chain(self.right.band.iter())
    }
}

fn fit_segment(
    points: &[&CurvePoint],
    weighting: Weighting,
    grid: std::ops::RangeInclusive<u32>,
) -> SegmentFit {
    let offers: Vec<u32> = points.iter().map(|p| p.offer).collect();
    let weights: Vec<f64> = points
        .iter()
        .map(|p| match weighting {
            Weighting::ByCount => p.total as f64,
            Weighting::Unweighted => 1.0,
        })
        .collect();
    let total_weight: f64 = weights.iter().sum();
    let n = points.len();

    if n == 0 {
        return SegmentFit {
            status: SegmentStatus::Empty,
            slope: 0.0,
            intercept: 0.0,
            n_points: 0,
            total_weight: 0.0,
            residual_dof: 0,
            offers,
            band: Vec::new(),
        };
    }

    let xbar = points
        .iter()
        .zip(&weights)
        .map(|(p, w)| w * f64::from(p.offer))
        .sum::<f64>()
        / total_weight;
    let ybar = points.iter().zip(&weights).map(|(p, w)| w * p.rate).sum::<f64>() / total_weight;

    if n < 2 {
        let band = grid
            .map(|offer| BandPoint {
                offer,
                fitted: ybar,
                lower: None,
                upper: None,
            })
            .collect();
        return SegmentFit {
            status: SegmentStatus::Degenerate,
            slope: 0.0,
            intercept: ybar,
            n_points: n,
            total_weight,
            residual_dof: 0,
            offers,
            band,
        };
    }

    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (p, w) in points.iter().zip(&weights) {
        let dx = f64::from(p.offer) - xbar;
        sxx += w * dx * dx;
        sxy += w * dx * (p.rate - ybar);
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;

    let residual_dof = n - 2;
    let half_width_scale = if residual_dof > 0 {
        let rss: f64 = points
            .iter()
            .zip(&weights)
            .map(|(p, w)| {
                let r = p.rate - (intercept + slope * f64::from(p.offer));
                w * r * r
            })
            .sum();
        let sigma2 = rss / residual_dof as f64;
        let t = StudentsT::new(0.0, 1.0, residual_dof as f64)
            .map(|d| d.inverse_cdf(0.5 + CONFIDENCE_LEVEL / 2.0))
            .ok();
        t.map(|t| (t, sigma2))
    } else {
        None
    };

    let band = grid
        .map(|offer| {
            let x = f64::from(offer);
            let fitted = intercept + slope * x;
            let (lower, upper) = match half_width_scale {
                Some((t, sigma2)) => {
                    let se = (sigma2 * (1.0 / total_weight + (x - xbar).powi(2) / sxx)).sqrt();
                    (Some(fitted - t * se), Some(fitted + t * se))
                }
                None => (None, None),
            };
            BandPoint {
                offer,
                fitted,
                lower,
                upper,
            }
        })
        .collect();

    SegmentFit {
        status: SegmentStatus::Fitted,
        slope,
        intercept,
        n_points: n,
        total_weight,
        residual_dof,
        offers,
        band,
    }
}

/// Fits acceptance rate on offer separately below and at-or-above the
/// breakpoint. Fitted values are not clamped to `[0, 1]`.
pub fn piecewise_fit(
    curve: &AcceptanceCurve,
    breakpoint: u32,
    weighting: Weighting,
) -> Result<PiecewiseFit, AnalysisError> {
    if breakpoint == 0 || breakpoint >= MAX_OFFER {
        return Err(AnalysisError::BreakpointOutOfRange(breakpoint));
    }
    if curve.points.is_empty() {
        return Err(AnalysisError::Empty("acceptance curve has no points"));
    }
    let (left_pts, right_pts): (Vec<&CurvePoint>, Vec<&CurvePoint>) =
        curve.points.iter().partition(|p| p.offer < breakpoint);
    let left = fit_segment(&left_pts, weighting, 0..=breakpoint - 1);
    let right = fit_segment(&right_pts, weighting, breakpoint..=MAX_OFFER);
    let jump = (left.status != SegmentStatus::Empty && right.status != SegmentStatus::Empty)
        .then(|| {
            let x = f64::from(breakpoint);
            right.value_at(x) - left.value_at(x)
        });
    Ok(PiecewiseFit {
        breakpoint,
        weighting,
        confidence: CONFIDENCE_LEVEL,
        left,
        right,
        jump,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumGap {
    /// Mean proposer offer in coins; the equilibrium offer is 0.
    pub mean_offer: Option<f64>,
    /// Share of responders rejecting; the equilibrium responder never does.
    pub rejection_rate: Option<f64>,
}

pub fn equilibrium_gap(
    proposer_offers: &[u32],
    responder_samples: &[ResponderSample],
) -> Result<EquilibriumGap, AnalysisError> {
    if proposer_offers.is_empty() && responder_samples.is_empty() {
        return Err(AnalysisError::Empty("no proposer or responder data"));
    }
    let mean_offer = (!proposer_offers.is_empty()).then(|| {
        proposer_offers.iter().map(|&o| f64::from(o)).sum::<f64>() / proposer_offers.len() as f64
    });
    let rejection_rate = (!responder_samples.is_empty()).then(|| {
        responder_samples.iter().filter(|s| !s.accepted).count() as f64
            / responder_samples.len() as f64
    });
    Ok(EquilibriumGap {
        mean_offer,
        rejection_rate,
    })
}

fn mean(values: &[u32]) -> Option<f64> {
    (!values.is_empty())
        .then(|| values.iter().map(|&v| f64::from(v)).sum::<f64>() / values.len() as f64)
}

/// Identifies one (pattern, temperature) cell of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellId {
    pub run_id: String,
    pub pattern: String,
    pub temperature: f64,
}

impl CellId {
    /// `<pattern>_<temperature>`, e.g. `B_1.5`.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.pattern, format_temperature(self.temperature))
    }
}

/// One decimal when that is exact (`0.0`, `1.5`), otherwise the shortest
/// round-trip form.
pub fn format_temperature(t: f64) -> String {
    let one_decimal = format!("{t:.1}");
    if one_decimal.parse::<f64>() == Ok(t) {
        one_decimal
    } else {
        t.to_string()
    }
}

/// Decisions collected for one (pattern, temperature) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResults {
    pub id: CellId,
    pub proposer_offers: Vec<u32>,
    pub responder_samples: Vec<ResponderSample>,
}

impl CellResults {
    pub fn is_empty(&self) -> bool {
        self.proposer_offers.is_empty() && self.responder_samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub cell: CellId,
    pub n_proposers: usize,
    pub n_responders: usize,
    /// Against the reference proposer histogram.
    pub tv_distance: Option<f64>,
    /// Simulated mean offer minus reference mean offer.
    pub mean_offer_gap: Option<f64>,
    pub equilibrium: EquilibriumGap,
    pub jump: Option<f64>,
    pub reference_jump: Option<f64>,
}

/// Everything computed for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAnalysis {
    pub histogram: Option<Histogram>,
    pub reference_histogram: Histogram,
    pub curve: Option<AcceptanceCurve>,
    pub fit: Option<PiecewiseFit>,
    pub reference_curve: AcceptanceCurve,
    pub reference_fit: PiecewiseFit,
    pub comparison: ComparisonReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub bin_width: u32,
    pub breakpoint: u32,
    pub weighting: Weighting,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            bin_width: DEFAULT_BIN_WIDTH,
            breakpoint: DEFAULT_BREAKPOINT,
            weighting: Weighting::ByCount,
        }
    }
}

pub fn analyze_cell(
    cell: &CellResults,
    reference: &crate::reference::ReferenceDataset,
    options: &AnalysisOptions,
) -> Result<CellAnalysis, AnalysisError> {
    if cell.is_empty() {
        return Err(AnalysisError::Empty("cell has no successful decisions"));
    }
    let reference_offers = reference.proposer_offers();
    let reference_histogram = normalized_histogram(&reference_offers, options.bin_width)?;
    let reference_curve = acceptance_curve(&reference.responder_samples)?;
    let reference_fit = piecewise_fit(&reference_curve, options.breakpoint, options.weighting)?;

    let histogram = if cell.proposer_offers.is_empty() {
        None
    } else {
        Some(normalized_histogram(&cell.proposer_offers, options.bin_width)?)
    };
    let (curve, fit) = if cell.responder_samples.is_empty() {
        (None, None)
    } else {
        let curve = acceptance_curve(&cell.responder_samples)?;
        let fit = piecewise_fit(&curve, options.breakpoint, options.weighting)?;
        (Some(curve), Some(fit))
    };
    let tv = histogram
        .as_ref()
        .map(|h| tv_distance(h, &reference_histogram))
        .transpose()?;
    let mean_offer_gap = match (mean(&cell.proposer_offers), mean(&reference_offers)) {
        (Some(sim), Some(reference)) => Some(sim - reference),
        _ => None,
    };
    let comparison = ComparisonReport {
        cell: cell.id.clone(),
        n_proposers: cell.proposer_offers.len(),
        n_responders: cell.responder_samples.len(),
        tv_distance: tv,
        mean_offer_gap,
        equilibrium: equilibrium_gap(&cell.proposer_offers, &cell.responder_samples)?,
        jump: fit.as_ref().and_then(|f| f.jump),
        reference_jump: reference_fit.jump,
    };
    Ok(CellAnalysis {
        histogram,
        reference_histogram,
        curve,
        fit,
        reference_curve,
        reference_fit,
        comparison,
    })
}
