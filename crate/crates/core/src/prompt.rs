//! Prompt assembly for proposer and responder agents.
//!
//! Every prompt has three parts: the game explanation, the decision
//! situation (with any exemplars for the chosen prompting method), and the
//! output-format instruction. An optional persona paragraph goes first.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::game::ResponderChoice;

pub const OFFER_PLACEHOLDER: &str = "{offer}";

const FEW_SHOT_HEADER: &str = "Here are examples of decisions made by other participants:";
const COT_HEADER: &str =
    "Here are examples of decisions made by other participants, each followed by the reason for it:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptingMethod {
    ZeroShot,
    FewShot,
    ChainOfThought,
}

impl PromptingMethod {
    pub const ALL: [PromptingMethod; 3] = [
        PromptingMethod::ZeroShot,
        PromptingMethod::FewShot,
        PromptingMethod::ChainOfThought,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptingMethod::ZeroShot => "zero_shot",
            PromptingMethod::FewShot => "few_shot",
            PromptingMethod::ChainOfThought => "chain_of_thought",
        }
    }
}

impl fmt::Display for PromptingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptingMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "zero_shot" | "zeroshot" => Ok(PromptingMethod::ZeroShot),
            "few_shot" | "fewshot" => Ok(PromptingMethod::FewShot),
            "chain_of_thought" | "cot" => Ok(PromptingMethod::ChainOfThought),
            other => Err(format!("unknown prompting method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Proposer,
    Responder,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Proposer, Side::Responder];

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Proposer => "proposer",
            Side::Responder => "responder",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "proposer" => Ok(Side::Proposer),
            "responder" => Ok(Side::Responder),
            other => Err(format!("unknown side {other:?}")),
        }
    }
}

/// An example decision shown to the agent under few-shot and CoT prompting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub side: Side,
    pub offer: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<ResponderChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl Exemplar {
    fn line(&self) -> String {
        match self.decision {
            Some(choice) if self.side == Side::Responder => {
                format!("Offer: {} -> Decision: {}", self.offer, choice)
            }
            _ => format!("Offer: {}", self.offer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub game_explanation: String,
    pub situation_proposer: String,
    pub situation_responder: String,
    pub output_format_proposer: String,
    pub output_format_responder: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub method: PromptingMethod,
    pub side: Side,
    pub offer_shown: Option<u32>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("chain-of-thought exemplar {index} (offer {offer}) has no rationale")]
    MissingRationale { index: usize, offer: u32 },
    #[error("responder exemplar {index} (offer {offer}) has no decision")]
    MissingDecision { index: usize, offer: u32 },
    #[error("{0} prompting needs at least one exemplar for this side")]
    NoExemplars(PromptingMethod),
    #[error("responder prompts need an offer to show")]
    MissingOffer,
    #[error("offer {0} is outside [0, 100]")]
    OfferOutOfRange(u32),
    #[error("offer placeholder could not be filled: {0}")]
    Placeholder(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("template file line {line}: {message}")]
    TemplateSyntax { line: usize, message: String },
    #[error("exemplar file: {0}")]
    ExemplarFile(String),
    #[error("i/o error: {0}")]
    Io(String),
}

const DEFAULT_GAME_EXPLANATION: &str = "\
You are taking part in an economic experiment called the ultimatum game. \
Two players, a proposer and a responder, divide 100 coins between them. \
The proposer first decides how many of the 100 coins to offer to the responder. \
The responder then decides whether to accept or reject the offer. \
If the responder accepts, the responder receives the offered coins and the proposer keeps the rest. \
If the responder rejects, neither player receives any coins. \
The game is played only once, and the two players do not know each other. \
At the end of the game, each coin will be redeemed for 100 dollars.";

const DEFAULT_SITUATION_PROPOSER: &str = "\
You are the proposer. Decide how many of the 100 coins you will offer to the responder.";

const DEFAULT_SITUATION_RESPONDER: &str = "\
You are the responder. The proposer has offered you {offer} of the 100 coins and will keep the rest. \
Decide whether to accept or reject this offer.";

const DEFAULT_FORMAT_PROPOSER: &str = "\
End your answer with a final line containing only a JSON object of the form {\"offer\": N}, \
where N is the whole number of coins you offer, from 0 to 100.";

const DEFAULT_FORMAT_RESPONDER: &str = "\
End your answer with a final line containing only a JSON object of the form {\"decision\": \"accept\"} \
or {\"decision\": \"reject\"}.";

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            game_explanation: DEFAULT_GAME_EXPLANATION.to_string(),
            situation_proposer: DEFAULT_SITUATION_PROPOSER.to_string(),
            situation_responder: DEFAULT_SITUATION_RESPONDER.to_string(),
            output_format_proposer: DEFAULT_FORMAT_PROPOSER.to_string(),
            output_format_responder: DEFAULT_FORMAT_RESPONDER.to_string(),
            persona: None,
        }
    }
}

const TEMPLATE_KEYS: [&str; 6] = [
    "game_explanation",
    "situation_proposer",
    "situation_responder",
    "output_format_proposer",
    "output_format_responder",
    "persona",
];

impl PromptTemplate {
    /// Parses the template file format: a `[key]` line opens each section and
    /// the following lines, up to the next key, are its value. Blank lines at
    /// the edges of a value are trimmed; lines starting with `#` outside any
    /// section are comments.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut values: [Option<String>; 6] = Default::default();
        let mut current: Option<usize> = None;
        let mut buf: Vec<&str> = Vec::new();

        fn flush(
            values: &mut [Option<String>; 6],
            current: Option<usize>,
            buf: &mut Vec<&str>,
        ) {
            if let Some(idx) = current {
                values[idx] = Some(buf.join("\n").trim_matches('\n').trim_end().to_string());
            }
            buf.clear();
        }

        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') && !trimmed.contains(' ') {
                let key = &trimmed[1..trimmed.len() - 1];
                let idx = TEMPLATE_KEYS.iter().position(|k| *k == key).ok_or_else(|| {
                    PromptError::TemplateSyntax {
                        line: lineno + 1,
                        message: format!("unknown key [{key}]"),
                    }
                })?;
                if values[idx].is_some() || current == Some(idx) {
                    return Err(PromptError::TemplateSyntax {
                        line: lineno + 1,
                        message: format!("duplicate key [{key}]"),
                    });
                }
                flush(&mut values, current, &mut buf);
                current = Some(idx);
            } else if current.is_some() {
                buf.push(line);
            } else if !(trimmed.is_empty() || trimmed.starts_with('#')) {
                return Err(PromptError::TemplateSyntax {
                    line: lineno + 1,
                    message: "text outside of any [key] section".into(),
                });
            }
        }
        flush(&mut values, current, &mut buf);

        let [game, sit_p, sit_r, fmt_p, fmt_r, persona] = values;
        let required = |v: Option<String>, key: &str| {
            v.ok_or_else(|| PromptError::InvalidTemplate(format!("missing [{key}] section")))
        };
        Ok(Self {
            game_explanation: required(game, "game_explanation")?,
            situation_proposer: required(sit_p, "situation_proposer")?,
            situation_responder: required(sit_r, "situation_responder")?,
            output_format_proposer: required(fmt_p, "output_format_proposer")?,
            output_format_responder: required(fmt_r, "output_format_responder")?,
            persona: persona.filter(|p| !p.trim().is_empty()),
        })
    }

    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        let fields = [
            ("game_explanation", Some(&self.game_explanation)),
            ("situation_proposer", Some(&self.situation_proposer)),
            ("situation_responder", Some(&self.situation_responder)),
            ("output_format_proposer", Some(&self.output_format_proposer)),
            ("output_format_responder", Some(&self.output_format_responder)),
            ("persona", self.persona.as_ref()),
        ];
        for (key, value) in fields {
            if let Some(value) = value {
                out.push_str(&format!("[{key}]\n{value}\n\n"));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Hex SHA-256 over the template and the exemplars it is used with.
    pub fn fingerprint(&self, exemplars: &[Exemplar]) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_file_text().as_bytes());
        hasher.update(serde_json::to_vec(exemplars).unwrap_or_default());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Lists every violated template invariant; empty when the template is valid.
pub fn validate_template(template: &PromptTemplate) -> Vec<String> {
    let mut findings = Vec::new();
    let required = [
        ("game_explanation", &template.game_explanation),
        ("situation_proposer", &template.situation_proposer),
        ("situation_responder", &template.situation_responder),
        ("output_format_proposer", &template.output_format_proposer),
        ("output_format_responder", &template.output_format_responder),
    ];
    for (key, value) in required {
        if value.trim().is_empty() {
            findings.push(format!("{key} is empty"));
        }
    }
    let placeholders = template.situation_responder.matches(OFFER_PLACEHOLDER).count();
    if placeholders != 1 {
        findings.push(format!(
            "situation_responder must contain exactly one {OFFER_PLACEHOLDER} placeholder, found {placeholders}"
        ));
    }
    for (key, value) in required.iter().filter(|(k, _)| *k != "situation_responder") {
        if value.contains(OFFER_PLACEHOLDER) {
            findings.push(format!("{key} contains an offer placeholder it can never fill"));
        }
    }
    if let Some(persona) = &template.persona {
        if persona.trim().is_empty() {
            findings.push("persona is set but blank".into());
        }
    }
    findings
}

/// Builds the prompt for one agent.
pub fn render_prompt(
    template: &PromptTemplate,
    method: PromptingMethod,
    side: Side,
    exemplars: &[Exemplar],
    offer_shown: Option<u32>,
) -> Result<RenderedPrompt, PromptError> {
    let findings = validate_template(template);
    if !findings.is_empty() {
        return Err(PromptError::InvalidTemplate(findings.join("; ")));
    }

    let situation = match side {
        Side::Proposer => template.situation_proposer.clone(),
        Side::Responder => {
            let offer = offer_shown.ok_or(PromptError::MissingOffer)?;
            if offer > 100 {
                return Err(PromptError::OfferOutOfRange(offer));
            }
            let filled = template
                .situation_responder
                .replacen(OFFER_PLACEHOLDER, &offer.to_string(), 1);
            if filled.contains(OFFER_PLACEHOLDER) || filled == template.situation_responder {
                return Err(PromptError::Placeholder(
                    "situation_responder still holds a placeholder after substitution".into(),
                ));
            }
            filled
        }
    };
    let offer_shown = match side {
        Side::Proposer => None,
        Side::Responder => offer_shown,
    };

    let mut sections: Vec<String> = Vec::with_capacity(5);
    if let Some(persona) = &template.persona {
        sections.push(persona.trim().to_string());
    }
    sections.push(template.game_explanation.trim().to_string());
    sections.push(situation.trim().to_string());
    if let Some(block) = exemplar_block(method, side, exemplars)? {
        sections.push(block);
    }
    sections.push(
        match side {
            Side::Proposer => &template.output_format_proposer,
            Side::Responder => &template.output_format_responder,
        }
        .trim()
        .to_string(),
    );

    Ok(RenderedPrompt {
        text: sections.join("\n\n"),
        method,
        side,
        offer_shown,
    })
}

fn exemplar_block(
    method: PromptingMethod,
    side: Side,
    exemplars: &[Exemplar],
) -> Result<Option<String>, PromptError> {
    let header = match method {
        PromptingMethod::ZeroShot => return Ok(None),
        PromptingMethod::FewShot => FEW_SHOT_HEADER,
        PromptingMethod::ChainOfThought => COT_HEADER,
    };
    let relevant: Vec<&Exemplar> = exemplars.iter().filter(|e| e.side == side).collect();
    if relevant.is_empty() {
        return Err(PromptError::NoExemplars(method));
    }
    let mut lines = vec![header.to_string()];
    for (index, ex) in relevant.iter().enumerate() {
        if side == Side::Responder && ex.decision.is_none() {
            return Err(PromptError::MissingDecision {
                index,
                offer: ex.offer,
            });
        }
        lines.push(ex.line());
        if method == PromptingMethod::ChainOfThought {
            let reason = ex
                .rationale
                .as_deref()
                .map(str::trim)
                .filter(|r| !r.is_empty())
                .ok_or(PromptError::MissingRationale {
                    index,
                    offer: ex.offer,
                })?;
            lines.push(format!("Reason: {reason}"));
        }
    }
    Ok(Some(lines.join("\n")))
}

/// Loads exemplars from a JSON array file.
pub fn load_exemplars(path: &Path) -> Result<Vec<Exemplar>, PromptError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
    let exemplars: Vec<Exemplar> = serde_json::from_str(&text)
        .map_err(|e| PromptError::ExemplarFile(format!("{}: {e}", path.display())))?;
    for (index, ex) in exemplars.iter().enumerate() {
        if ex.offer > 100 {
            return Err(PromptError::ExemplarFile(format!(
                "exemplar {index}: offer {} is outside [0, 100]",
                ex.offer
            )));
        }
    }
    Ok(exemplars)
}

/// Ten proposer and ten responder exemplars shaped like typical human play,
/// each with a short rationale.
pub fn default_exemplars() -> Vec<Exemplar> {
    use ResponderChoice::{Accept, Reject};
    let proposer: [(u32, &str); 10] = [
        (50, "An equal split is fair and the responder is very likely to accept it."),
        (40, "Keeping a little more is reasonable, and 40 coins is still enough that the responder should accept."),
        (50, "Splitting evenly avoids the risk of rejection, which would leave me with nothing."),
        (30, "I want to keep most of the coins, but I still offer enough to make accepting worthwhile."),
        (50, "Half of the coins is the offer most people consider fair."),
        (45, "An offer close to half is likely to be accepted while letting me keep slightly more."),
        (40, "The responder gains 40 coins by accepting and nothing by rejecting, so this is a safe offer."),
        (20, "A small offer lets me keep most of the coins, since any positive amount is better than nothing for the responder."),
        (50, "If the responder feels treated unfairly they may reject, so I split the coins evenly."),
        (35, "I take a larger share but leave a meaningful amount so the offer does not look insulting."),
    ];
    let responder: [(u32, bool, &str); 10] = [
        (50, true, "An equal split is fair, so I accept."),
        (40, true, "40 coins is a reasonable share and much better than nothing."),
        (10, false, "This offer is very unfair, and rejecting it denies the proposer the coins as well."),
        (30, true, "The split favours the proposer, but 30 coins is still worth taking."),
        (50, true, "Half of the coins is a fair offer."),
        (20, false, "20 coins is too little compared with what the proposer keeps, so I reject."),
        (45, true, "The offer is close to an even split, so I accept it."),
        (0, false, "Accepting nothing gains me nothing, so I reject the offer."),
        (60, true, "The proposer is giving me more than half, so I gladly accept."),
        (25, true, "The offer is low, but receiving 25 coins is better than receiving none."),
    ];
    proposer
        .into_iter()
        .map(|(offer, why)| Exemplar {
            side: Side::Proposer,
            offer,
            decision: None,
            rationale: Some(why.to_string()),
        })
        .chain(responder.into_iter().map(|(offer, accepted, why)| Exemplar {
            side: Side::Responder,
            offer,
            decision: Some(if accepted { Accept } else { Reject }),
            rationale: Some(why.to_string()),
        }))
        .collect()
}
