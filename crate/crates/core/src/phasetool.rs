//! Phase-definition lookup and the reasoning-turn prompt builder.
//!
//! The tool maps a phase to its Go Zone definition and decides which phase
//! conditions the second turn: the ground truth while training (rectifying
//! classification errors), the model's own prediction at inference.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::SurgicalPhase;

/// Bundled lexicon: `letter<TAB>name<TAB>definition`, one phase per line.
pub const BUNDLED_LEXICON: &str = include_str!("../data/phase_definitions.tsv");

/// Bundled reasoning-turn template with `{phase_name}`, `{choice_letter}` and
/// `{definition}` placeholders.
pub const TURN2_TEMPLATE: &str = include_str!("../data/turn2_template.txt");

/// Stand-in used when the first turn yields no phase and the fallback is
/// enabled.
pub const UNIDENTIFIED_PHASE_NAME: &str = "Unidentified Phase";
pub const UNIDENTIFIED_LETTER: &str = "?";
pub const UNIDENTIFIED_DEFINITION: &str = "The surgical phase could not be identified. Locate the Go Zone from the visible anatomy alone.";

const PLACEHOLDERS: [&str; 3] = ["phase_name", "choice_letter", "definition"];

static BRACED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([^{}]*)\}").expect("valid regex"));

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("lexicon has no definition for phase {0}")]
    MissingPhase(char),
    #[error("lexicon defines phase {0} more than once")]
    DuplicatePhase(char),
    #[error("reading lexicon: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template placeholder {{{0}}} is not recognized")]
    UnknownPlaceholder(String),
    #[error("template never uses placeholder {{{0}}}")]
    MissingPlaceholder(&'static str),
    #[error("template has an unbalanced brace")]
    StrayBrace,
    #[error("rendered prompt still contains a placeholder")]
    Unsubstituted,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("mode {mode} needs the {which} phase, which is absent")]
    MissingPhase { mode: ToolMode, which: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseDefinition {
    pub phase: SurgicalPhase,
    /// Row name as written in the lexicon file.
    pub name: String,
    pub definition_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: [PhaseDefinition; 4],
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut slots: [Option<PhaseDefinition>; 4] = Default::default();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| LexiconError::Parse { line: idx + 1, message };
            let mut parts = line.splitn(3, '\t');
            let (Some(letter), Some(name), Some(definition)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err("expected letter, name and definition separated by tabs".into()));
            };
            let mut chars = letter.trim().chars();
            let phase = match (chars.next(), chars.next()) {
                (Some(c), None) => SurgicalPhase::from_letter(c).map_err(|e| err(e.to_string()))?,
                _ => return Err(err(format!("bad phase letter {letter:?}"))),
            };
            if definition.trim().is_empty() {
                return Err(err("empty definition".into()));
            }
            let slot = &mut slots[phase.index()];
            if slot.is_some() {
                return Err(LexiconError::DuplicatePhase(phase.letter()));
            }
            *slot = Some(PhaseDefinition {
                phase,
                name: name.to_string(),
                definition_text: definition.to_string(),
            });
        }
        let mut out = Vec::with_capacity(4);
        for (phase, slot) in SurgicalPhase::ALL.iter().zip(slots) {
            out.push(slot.ok_or(LexiconError::MissingPhase(phase.letter()))?);
        }
        let entries: [PhaseDefinition; 4] = out.try_into().expect("four phases");
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn lookup(&self, phase: SurgicalPhase) -> &PhaseDefinition {
        &self.entries[phase.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PhaseDefinition> {
        self.entries.iter()
    }
}

/// Definition for `phase` from the bundled lexicon.
pub fn lookup(phase: SurgicalPhase) -> PhaseDefinition {
    Lexicon::bundled().lookup(phase).clone()
}

/// How the tool picks the conditioning phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToolMode {
    /// Use the ground truth, rectifying wrong predictions.
    Training,
    /// Use the model's own prediction.
    #[default]
    Inference,
    /// Training without rectification (ablation).
    #[serde(rename = "no-rectify")]
    TrainingNoRectify,
}

impl fmt::Display for ToolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolMode::Training => "training",
            ToolMode::Inference => "inference",
            ToolMode::TrainingNoRectify => "no-rectify",
        })
    }
}

impl FromStr for ToolMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "training" | "train" => Ok(ToolMode::Training),
            "inference" => Ok(ToolMode::Inference),
            "no-rectify" | "training-no-rectify" => Ok(ToolMode::TrainingNoRectify),
            other => Err(format!(
                "unknown mode {other:?}; expected training, inference or no-rectify"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub effective_phase: SurgicalPhase,
    pub rectified: bool,
}

/// Pick the phase whose definition conditions the second turn.
pub fn resolve(
    predicted: Option<SurgicalPhase>,
    truth: Option<SurgicalPhase>,
    mode: ToolMode,
) -> Result<Resolution, ToolError> {
    match mode {
        ToolMode::Training => {
            let truth = truth.ok_or(ToolError::MissingPhase { mode, which: "ground-truth" })?;
            Ok(Resolution {
                effective_phase: truth,
                rectified: predicted != Some(truth),
            })
        }
        ToolMode::Inference | ToolMode::TrainingNoRectify => {
            let predicted = predicted.ok_or(ToolError::MissingPhase { mode, which: "predicted" })?;
            Ok(Resolution {
                effective_phase: predicted,
                rectified: false,
            })
        }
    }
}

/// Behaviour when the mode needs a predicted phase and there is none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPhaseFallback {
    /// Condition on a neutral "unidentified phase" definition.
    #[default]
    StubDefinition,
    /// Surface [`ToolError::MissingPhase`].
    Reject,
}

/// Validated prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, TemplateError> {
        let text = text.into();
        let mut used = BTreeSet::new();
        for cap in BRACED.captures_iter(&text) {
            let name = &cap[1];
            if !PLACEHOLDERS.contains(&name) {
                return Err(TemplateError::UnknownPlaceholder(name.to_string()));
            }
            used.insert(name.to_string());
        }
        let stripped = BRACED.replace_all(&text, "");
        if stripped.contains('{') || stripped.contains('}') {
            return Err(TemplateError::StrayBrace);
        }
        if let Some(missing) = PLACEHOLDERS.iter().find(|p| !used.contains(**p)) {
            return Err(TemplateError::MissingPlaceholder(missing));
        }
        Ok(Self { text })
    }

    pub fn bundled() -> Self {
        Self::new(TURN2_TEMPLATE).expect("bundled template is valid")
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Substitute all three fields in a single pass, so values containing
    /// braces are inserted literally.
    pub fn render(&self, phase_name: &str, choice_letter: &str, definition: &str) -> String {
        BRACED
            .replace_all(&self.text, |cap: &regex::Captures<'_>| match &cap[1] {
                "phase_name" => phase_name.to_string(),
                "choice_letter" => choice_letter.to_string(),
                _ => definition.to_string(),
            })
            .into_owned()
    }
}

/// Reasoning-turn prompt for `effective_phase` using the bundled lexicon and
/// template.
pub fn build_turn2_prompt(effective_phase: SurgicalPhase, choice_letter: char) -> String {
    PromptTemplate::bundled().render(
        effective_phase.display_name(),
        &choice_letter.to_string(),
        &Lexicon::bundled().lookup(effective_phase).definition_text,
    )
}

/// Outcome of a tool invocation, as recorded in transcripts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDecision {
    pub mode: ToolMode,
    pub predicted_phase: Option<SurgicalPhase>,
    /// `None` when the stub fallback was used.
    pub effective_phase: Option<SurgicalPhase>,
    pub rectified: bool,
}

/// Lexicon, template and fallback policy bundled together.
#[derive(Debug, Clone)]
pub struct PhaseTool {
    pub lexicon: Lexicon,
    pub template: PromptTemplate,
    pub fallback: MissingPhaseFallback,
}

impl Default for PhaseTool {
    fn default() -> Self {
        Self {
            lexicon: Lexicon::bundled(),
            template: PromptTemplate::bundled(),
            fallback: MissingPhaseFallback::default(),
        }
    }
}

impl PhaseTool {
    pub fn decide(
        &self,
        predicted: Option<SurgicalPhase>,
        truth: Option<SurgicalPhase>,
        mode: ToolMode,
    ) -> Result<ToolDecision, ToolError> {
        match resolve(predicted, truth, mode) {
            Ok(r) => Ok(ToolDecision {
                mode,
                predicted_phase: predicted,
                effective_phase: Some(r.effective_phase),
                rectified: r.rectified,
            }),
            Err(ToolError::MissingPhase { which: "predicted", .. })
                if self.fallback == MissingPhaseFallback::StubDefinition =>
            {
                Ok(ToolDecision {
                    mode,
                    predicted_phase: None,
                    effective_phase: None,
                    rectified: false,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Reasoning-turn prompt for a decision. The letter always follows the
    /// effective phase.
    pub fn prompt(&self, decision: &ToolDecision) -> String {
        match decision.effective_phase {
            Some(p) => self.template.render(
                p.display_name(),
                &p.letter().to_string(),
                &self.lexicon.lookup(p).definition_text,
            ),
            None => self.template.render(
                UNIDENTIFIED_PHASE_NAME,
                UNIDENTIFIED_LETTER,
                UNIDENTIFIED_DEFINITION,
            ),
        }
    }

    /// Definition text embedded for a decision.
    pub fn definition_for(&self, decision: &ToolDecision) -> &str {
        match decision.effective_phase {
            Some(p) => &self.lexicon.lookup(p).definition_text,
            None => UNIDENTIFIED_DEFINITION,
        }
    }
}
