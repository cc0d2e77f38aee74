//! Empirical reference data: human proposer offers and responder decisions.
//!
//! Files are UTF-8 CSV with a `kind,offer,accepted` header. Proposer rows
//! leave `accepted` empty (or omit it); responder rows carry `0` or `1`. An
//! optional leading `# provenance: <label>` comment names the source.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_OFFER: u32 = 100;
const PROVENANCE_PREFIX: &str = "# provenance:";

/// Probability mass (per mille) of the synthetic proposer distribution.
///
/// Peak at 50, secondary mass at 40, 2% above 60.
pub const SYNTHETIC_PROPOSER_PMF: [(u32, u32); 19] = [
    (0, 20),
    (5, 10),
    (10, 30),
    (15, 20),
    (20, 50),
    (25, 40),
    (30, 80),
    (35, 50),
    (40, 170),
    (45, 80),
    (50, 380),
    (55, 20),
    (60, 30),
    (65, 5),
    (70, 5),
    (75, 3),
    (80, 3),
    (90, 2),
    (100, 2),
];

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("i/o error reading reference data: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: field `{field}`: {message}")]
    Malformed {
        row: u64,
        field: &'static str,
        message: String,
    },
    #[error("row {row}: offer {offer} is outside [0, {MAX_OFFER}]")]
    OutOfRange { row: u64, offer: i64 },
    #[error("synthetic reference needs at least 100 samples, got {0}")]
    TooFewSamples(usize),
    #[error("reference dataset is empty: {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposerSample {
    pub offer: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponderSample {
    pub offer: u32,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceDataset {
    pub proposer_samples: Vec<ProposerSample>,
    pub responder_samples: Vec<ResponderSample>,
    pub provenance: String,
}

impl ReferenceDataset {
    pub fn proposer_offers(&self) -> Vec<u32> {
        self.proposer_samples.iter().map(|s| s.offer).collect()
    }

    /// Checks the dataset is usable as a comparison target.
    pub fn ensure_comparable(&self) -> Result<(), ReferenceError> {
        if self.proposer_samples.is_empty() {
            return Err(ReferenceError::Empty("no proposer samples"));
        }
        if self.responder_samples.is_empty() {
            return Err(ReferenceError::Empty("no responder samples"));
        }
        if self.provenance.trim().is_empty() {
            return Err(ReferenceError::Empty("provenance label is blank"));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{PROVENANCE_PREFIX} {}", self.provenance.replace('\n', " "))?;
        writeln!(out, "kind,offer,accepted")?;
        for s in &self.proposer_samples {
            writeln!(out, "proposer,{}", s.offer)?;
        }
        for s in &self.responder_samples {
            writeln!(out, "responder,{},{}", s.offer, u8::from(s.accepted))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::io::BufWriter::new(File::create(path)?);
        self.write_csv(&mut file)?;
        file.flush()
    }
}

/// Loads and validates a reference CSV file.
pub fn load_reference(path: &Path) -> Result<ReferenceDataset, ReferenceError> {
    let file = File::open(path)?;
    read_reference(file, &path.display().to_string())
}

/// Parses reference CSV from any reader. `default_provenance` is used when
/// the data carries no provenance comment.
pub fn read_reference<R: Read>(
    reader: R,
    default_provenance: &str,
) -> Result<ReferenceDataset, ReferenceError> {
    let mut buffered = BufReader::new(reader);
    let mut provenance = default_provenance.to_string();
    let mut first = String::new();
    buffered.read_line(&mut first)?;
    let first_trimmed = first.trim_start_matches('\u{feff}');
    let mut header_consumed = false;
    // The csv reader starts counting after the first physical line.
    let line_offset = 1;
    if let Some(label) = first_trimmed.strip_prefix(PROVENANCE_PREFIX) {
        provenance = label.trim().to_string();
    } else {
        check_header(first_trimmed)?;
        header_consumed = true;
    }

    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(!header_consumed)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(buffered);
    if !header_consumed {
        let headers = csv_reader.headers().map_err(|e| csv_error(e, 1 + line_offset))?;
        check_header(&headers.iter().collect::<Vec<_>>().join(","))?;
    }

    let mut dataset = ReferenceDataset {
        proposer_samples: Vec::new(),
        responder_samples: Vec::new(),
        provenance,
    };
    for result in csv_reader.records() {
        let record = result.map_err(|e| csv_error(e, 0))?;
        let row = record.position().map(|p| p.line()).unwrap_or(0) + line_offset;
        let kind = record.get(0).unwrap_or("");
        let offer = parse_offer(row, record.get(1))?;
        match kind {
            "proposer" => {
                if let Some(extra) = record.get(2) {
                    if !extra.is_empty() {
                        return Err(ReferenceError::Malformed {
                            row,
                            field: "accepted",
                            message: "proposer rows must not carry a decision".into(),
                        });
                    }
                }
                dataset.proposer_samples.push(ProposerSample { offer });
            }
            "responder" => {
                let accepted = match record.get(2) {
                    Some("1") => true,
                    Some("0") => false,
                    Some(other) => {
                        return Err(ReferenceError::Malformed {
                            row,
                            field: "accepted",
                            message: format!("expected 0 or 1, got {other:?}"),
                        })
                    }
                    None => {
                        return Err(ReferenceError::Malformed {
                            row,
                            field: "accepted",
                            message: "missing".into(),
                        })
                    }
                };
                dataset.responder_samples.push(ResponderSample { offer, accepted });
            }
            other => {
                return Err(ReferenceError::Malformed {
                    row,
                    field: "kind",
                    message: format!("expected `proposer` or `responder`, got {other:?}"),
                })
            }
        }
    }
    Ok(dataset)
}

fn check_header(line: &str) -> Result<(), ReferenceError> {
    let cols: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if cols != ["kind", "offer", "accepted"] {
        return Err(ReferenceError::Malformed {
            row: 1,
            field: "header",
            message: format!("expected `kind,offer,accepted`, got {:?}", line.trim()),
        });
    }
    Ok(())
}

fn csv_error(e: csv::Error, row_hint: u64) -> ReferenceError {
    let row = e.position().map(|p| p.line()).unwrap_or(row_hint);
    ReferenceError::Malformed {
        row,
        field: "record",
        message: e.to_string(),
    }
}

fn parse_offer(row: u64, field: Option<&str>) -> Result<u32, ReferenceError> {
    let raw = field.ok_or(ReferenceError::Malformed {
        row,
        field: "offer",
        message: "missing".into(),
    })?;
    let value: i64 = raw.parse().map_err(|_| ReferenceError::Malformed {
        row,
        field: "offer",
        message: format!("not an integer: {raw:?}"),
    })?;
    if !(0..=i64::from(MAX_OFFER)).contains(&value) {
        return Err(ReferenceError::OutOfRange { row, offer: value });
    }
    Ok(value as u32)
}

/// Acceptance probability used by the synthetic responder generator.
pub fn synthetic_acceptance_probability(offer: u32) -> f64 {
    if offer < 50 {
        (0.1 + 0.012 * f64::from(offer)).clamp(0.0, 1.0)
    } else {
        0.9
    }
}

/// Splits `n` samples across the synthetic proposer support by largest
/// remainder, so every dataset honours the distribution's shape exactly.
fn synthetic_offer_quota(n: usize) -> Vec<u32> {
    let total: u64 = SYNTHETIC_PROPOSER_PMF.iter().map(|&(_, w)| u64::from(w)).sum();
    let mut counts: Vec<(u32, usize, u64)> = SYNTHETIC_PROPOSER_PMF
        .iter()
        .map(|&(offer, w)| {
            let exact = n as u64 * u64::from(w);
            (offer, (exact / total) as usize, exact % total)
        })
        .collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // Ties go to the heavier weight, then the lower offer.
    order.sort_by(|&a, &b| {
        counts[b]
            .2
            .cmp(&counts[a].2)
            .then(SYNTHETIC_PROPOSER_PMF[b].1.cmp(&SYNTHETIC_PROPOSER_PMF[a].1))
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i].1 += 1;
    }
    counts
        .into_iter()
        .flat_map(|(offer, count, _)| std::iter::repeat(offer).take(count))
        .collect()
}

/// Seeded stand-in for a human reference dataset.
///
/// Proposer offers follow [`SYNTHETIC_PROPOSER_PMF`] in exact proportion
/// (shuffled by the seed). Responders see offers from the same distribution
/// and accept with [`synthetic_acceptance_probability`].
pub fn synthesize_reference(seed: u64, n: usize) -> Result<ReferenceDataset, ReferenceError> {
    if n < 100 {
        return Err(ReferenceError::TooFewSamples(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proposer_offers = synthetic_offer_quota(n);
    proposer_offers.shuffle(&mut rng);
    let mut responder_offers = synthetic_offer_quota(n);
    responder_offers.shuffle(&mut rng);
    let responder_samples = responder_offers
        .into_iter()
        .map(|offer| ResponderSample {
            offer,
            accepted: rng.gen_bool(synthetic_acceptance_probability(offer)),
        })
        .collect();
    Ok(ReferenceDataset {
        proposer_samples: proposer_offers
            .into_iter()
            .map(|offer| ProposerSample { offer })
            .collect(),
        responder_samples,
        provenance: format!("synthetic stand-in (seed={seed}, n={n})"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn load_str(s: &str) -> Result<ReferenceDataset, ReferenceError> {
        read_reference(s.as_bytes(), "inline")
    }

    #[test]
    fn parses_rows() {
        let ds = load_str("kind,offer,accepted\nproposer,50\nresponder,30,1\nresponder,10,0\n")
            .unwrap();
        assert_eq!(ds.proposer_samples, vec![ProposerSample { offer: 50 }]);
        assert_eq!(
            ds.responder_samples,
            vec![
                ResponderSample {
                    offer: 30,
                    accepted: true
                },
                ResponderSample {
                    offer: 10,
                    accepted: false
                }
            ]
        );
        assert_eq!(ds.provenance, "inline");
    }

    #[test]
    fn out_of_range_names_row() {
        let err = load_str("kind,offer,accepted\nproposer,50\nresponder,130,1\n").unwrap_err();
        assert!(matches!(err, ReferenceError::OutOfRange { row: 3, offer: 130 }), "{err}");
    }

    #[test]
    fn malformed_rows_name_field() {
        let err = load_str("kind,offer,accepted\nproposer,abc\n").unwrap_err();
        assert!(
            matches!(err, ReferenceError::Malformed { row: 2, field: "offer", .. }),
            "{err}"
        );
        let err = load_str("kind,offer,accepted\nproposer,5\nresponder,5,yes\n").unwrap_err();
        assert!(
            matches!(err, ReferenceError::Malformed { row: 3, field: "accepted", .. }),
            "{err}"
        );
        let err = load_str("kind,offer,accepted\nresponder,5\n").unwrap_err();
        assert!(matches!(err, ReferenceError::Malformed { field: "accepted", .. }));
        let err = load_str("kind,offer,accepted\nbidder,5\n").unwrap_err();
        assert!(matches!(err, ReferenceError::Malformed { field: "kind", .. }));
        let err = load_str("type,value\nproposer,5\n").unwrap_err();
        assert!(matches!(err, ReferenceError::Malformed { row: 1, field: "header", .. }));
    }

    #[test]
    fn provenance_comment_offsets_rows() {
        let err = load_str("# provenance: lab\nkind,offer,accepted\nproposer,-3\n").unwrap_err();
        assert!(matches!(err, ReferenceError::OutOfRange { row: 3, offer: -3 }), "{err}");
    }

    #[test]
    fn synthesize_requires_enough_samples() {
        assert!(matches!(
            synthesize_reference(1, 99),
            Err(ReferenceError::TooFewSamples(99))
        ));
    }

    #[test]
    fn synthetic_shape_seed7() {
        let ds = synthesize_reference(7, 1000).unwrap();
        assert_eq!(ds.proposer_samples.len(), 1000);
        assert_eq!(ds.responder_samples.len(), 1000);
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for s in &ds.proposer_samples {
            *counts.entry(s.offer).or_default() += 1;
        }
        let (mode, _) = counts.iter().max_by_key(|(_, c)| **c).unwrap();
        assert_eq!(*mode, 50);

        let rate = |offer: u32| {
            let group: Vec<_> = ds
                .responder_samples
                .iter()
                .filter(|s| s.offer == offer)
                .collect();
            group.iter().filter(|s| s.accepted).count() as f64 / group.len() as f64
        };
        assert!(rate(50) - rate(45) > 0.15, "{} vs {}", rate(50), rate(45));
    }

    #[test]
    fn synthetic_mass_contract_holds_for_many_sizes() {
        for n in [100, 101, 333, 1000, 4321] {
            let ds = synthesize_reference(3, n).unwrap();
            let offers = ds.proposer_offers();
            let mid = offers.iter().filter(|&&o| (40..=50).contains(&o)).count();
            let high = offers.iter().filter(|&&o| o > 60).count();
            assert_eq!(offers.len(), n);
            assert!(mid as f64 / n as f64 > 0.5);
            assert!((high as f64 / n as f64) < 0.05);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_seed_sensitive() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        synthesize_reference(7, 500).unwrap().write_csv(&mut a).unwrap();
        synthesize_reference(7, 500).unwrap().write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            synthesize_reference(7, 500).unwrap().proposer_samples,
            synthesize_reference(8, 500).unwrap().proposer_samples
        );
    }

    #[test]
    fn pmf_sums_to_one() {
        assert_eq!(SYNTHETIC_PROPOSER_PMF.iter().map(|p| p.1).sum::<u32>(), 1000);
    }

    #[test]
    fn acceptance_probability_shape() {
        assert!((synthetic_acceptance_probability(0) - 0.1).abs() < 1e-12);
        assert!((synthetic_acceptance_probability(45) - 0.64).abs() < 1e-12);
        assert_eq!(synthetic_acceptance_probability(50), 0.9);
        assert_eq!(synthetic_acceptance_probability(100), 0.9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn csv_round_trip(
                proposers in proptest::collection::vec(0u32..=100, 0..50),
                responders in proptest::collection::vec((0u32..=100, any::<bool>()), 0..50),
                label in "[a-zA-Z0-9 ,=()]{1,30}",
            ) {
                let ds = ReferenceDataset {
                    proposer_samples: proposers.into_iter().map(|offer| ProposerSample { offer }).collect(),
                    responder_samples: responders.into_iter().map(|(offer, accepted)| ResponderSample { offer, accepted }).collect(),
                    provenance: label.trim().to_string(),
                };
                prop_assume!(!ds.provenance.is_empty());
                let mut buf = Vec::new();
                ds.write_csv(&mut buf).unwrap();
                let back = read_reference(buf.as_slice(), "unused").unwrap();
                prop_assert_eq!(back, ds);
            }
        }
    }
}
