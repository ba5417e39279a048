//! Prompt construction for the three operating modes.
//!
//! A template set holds one template per mode plus a response marker. The
//! rendered prompt ends with the marker, so the model's completion region
//! starts immediately after it. The `compact` set uses short structural
//! markers that tiny word-level models can condition on; the `assistant` set
//! carries the long natural-language instructions used with full-size chat
//! models, selectable by config.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

pub const INSTRUCTION_PLACEHOLDER: &str = "<instruction>";
pub const RATIONALE_PLACEHOLDER: &str = "<rationale>";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("mode {mode:?} does not take a rationale")]
    UnexpectedRationale { mode: PromptMode },
    #[error("mode {mode:?} requires a rationale")]
    MissingRationale { mode: PromptMode },
    #[error("full text does not start with the prompt")]
    PromptNotPrefix,
    #[error("invalid template set: {0}")]
    InvalidTemplate(String),
    #[error("unknown template set {0:?}")]
    UnknownSet(String),
}

/// The three prompt modes: answer from instruction, rationale from
/// instruction, and answer from instruction plus rationale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptMode {
    InstructionToAnswer,
    InstructionToRationale,
    InstructionRationaleToAnswer,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [
        PromptMode::InstructionToAnswer,
        PromptMode::InstructionToRationale,
        PromptMode::InstructionRationaleToAnswer,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            PromptMode::InstructionToAnswer => "instruction_to_answer",
            PromptMode::InstructionToRationale => "instruction_to_rationale",
            PromptMode::InstructionRationaleToAnswer => "instruction_rationale_to_answer",
        }
    }

    pub fn takes_rationale(&self) -> bool {
        matches!(self, PromptMode::InstructionRationaleToAnswer)
    }
}

/// One template per mode plus the response marker.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplateSet {
    name: String,
    templates: BTreeMap<&'static str, String>,
    response_marker: String,
}

const KEY_I_TO_A: &str = "instruction_to_answer";
const KEY_I_TO_R: &str = "instruction_to_rationale";
const KEY_IR_TO_A: &str = "instruction_rationale_to_answer";

impl PromptTemplateSet {
    /// Mode markers `[A]`/`[R]`/`[AR]`, `<SEP>` between instruction and
    /// rationale, `=>` as the response marker.
    pub fn compact() -> Self {
        Self::from_parts(
            "compact",
            "[A] <instruction> =>",
            "[R] <instruction> =>",
            "[AR] <instruction> <SEP> <rationale> =>",
            "=>",
        )
        .expect("builtin set is valid")
    }

    /// Long-form assistant prompts with an explicit task description block.
    pub fn assistant() -> Self {
        let preamble = "You are an AI assistant `M'. Provide a response to the given instruction denoted by Task Description.\n\n[TASK DESCRIPTION STARTS]\n<Task Description>: ";
        let closing = "\n[TASK DESCRIPTION ENDS]\n\nFor the given <Task Description>, give your response. [M RESPONSE BEGINS]:";
        let answer = format!(
            "{preamble}In this task, you will be given an `Instruction'. Generate the correct answer for the given instruction.\n`Instruction' - <instruction>{closing}"
        );
        let rationale = format!(
            "{preamble}In this task, you will be given an `Instruction'. Generate descriptive reasoning on how to derive the correct answer for the instruction such that the descriptive reasoning will be useful to another AI assistant to generate the correct answer.\n`Instruction' - <instruction>{closing}"
        );
        let combined = format!(
            "{preamble}In this task, you will be given an `Instruction' and a rationale denoted by `Rationale'. Analyse the rationale and come up with the correct answer for the given instruction.\n`Instruction' - <instruction>\n`Rationale' - <rationale>{closing}"
        );
        Self::from_parts(
            "assistant",
            &answer,
            &rationale,
            &combined,
            "[M RESPONSE BEGINS]:",
        )
        .expect("builtin set is valid")
    }

    pub fn by_name(name: &str) -> Result<Self, PromptError> {
        match name {
            "compact" => Ok(Self::compact()),
            "assistant" => Ok(Self::assistant()),
            other => Err(PromptError::UnknownSet(other.to_string())),
        }
    }

    fn from_parts(
        name: &str,
        answer: &str,
        rationale: &str,
        combined: &str,
        marker: &str,
    ) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        templates.insert(KEY_I_TO_A, answer.to_string());
        templates.insert(KEY_I_TO_R, rationale.to_string());
        templates.insert(KEY_IR_TO_A, combined.to_string());
        let set = Self {
            name: name.to_string(),
            templates,
            response_marker: marker.to_string(),
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<(), PromptError> {
        if self.response_marker.is_empty() {
            return Err(PromptError::InvalidTemplate(
                "empty response marker".to_string(),
            ));
        }
        for (key, template) in &self.templates {
            if !template.contains(INSTRUCTION_PLACEHOLDER) {
                return Err(PromptError::InvalidTemplate(format!(
                    "{key} lacks the {INSTRUCTION_PLACEHOLDER} placeholder"
                )));
            }
            if !template.ends_with(&self.response_marker) {
                return Err(PromptError::InvalidTemplate(format!(
                    "{key} does not end with the response marker"
                )));
            }
        }
        if !self.templates[KEY_IR_TO_A].contains(RATIONALE_PLACEHOLDER) {
            return Err(PromptError::InvalidTemplate(format!(
                "{KEY_IR_TO_A} lacks the {RATIONALE_PLACEHOLDER} placeholder"
            )));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn response_marker(&self) -> &str {
        &self.response_marker
    }

    fn template_key(mode: PromptMode) -> &'static str {
        match mode {
            PromptMode::InstructionToAnswer => KEY_I_TO_A,
            PromptMode::InstructionToRationale => KEY_I_TO_R,
            PromptMode::InstructionRationaleToAnswer => KEY_IR_TO_A,
        }
    }

    pub fn template(&self, mode: PromptMode) -> &str {
        &self.templates[Self::template_key(mode)]
    }

    /// Substitute the placeholders verbatim. A rationale must be supplied
    /// exactly when the mode takes one.
    pub fn render(
        &self,
        mode: PromptMode,
        instruction: &str,
        rationale: Option<&str>,
    ) -> Result<String, PromptError> {
        match (mode.takes_rationale(), rationale) {
            (false, Some(_)) => return Err(PromptError::UnexpectedRationale { mode }),
            (true, None) => return Err(PromptError::MissingRationale { mode }),
            _ => {}
        }
        let mut out = self
            .template(mode)
            .replacen(INSTRUCTION_PLACEHOLDER, instruction, 1);
        if let Some(r) = rationale {
            out = out.replacen(RATIONALE_PLACEHOLDER, r, 1);
        }
        Ok(out)
    }

    /// Texts whose words must be present in the model vocabulary for this set
    /// to be usable: every template with placeholders stripped.
    pub fn vocabulary_seed_texts(&self) -> Vec<String> {
        self.templates
            .values()
            .map(|t| {
                t.replace(INSTRUCTION_PLACEHOLDER, " ")
                    .replace(RATIONALE_PLACEHOLDER, " ")
            })
            .collect()
    }

    /// Plain-text key-value serialization, newlines escaped as `\n`.
    pub fn save_kv(&self, path: &Path) -> std::io::Result<()> {
        let mut body = String::new();
        body.push_str(&format!("name={}\n", escape(&self.name)));
        body.push_str(&format!(
            "response_marker={}\n",
            escape(&self.response_marker)
        ));
        for (key, template) in &self.templates {
            body.push_str(&format!("{key}={}\n", escape(template)));
        }
        std::fs::write(path, body)
    }

    pub fn load_kv(path: &Path) -> Result<Self, PromptError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| PromptError::InvalidTemplate(format!("{}: {e}", path.display())))?;
        let mut name = None;
        let mut marker = None;
        let mut templates: BTreeMap<&'static str, String> = BTreeMap::new();
        for (lineno, line) in body.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PromptError::InvalidTemplate(format!("line {}: missing '='", lineno + 1))
            })?;
            let value = unescape(value);
            match key {
                "name" => name = Some(value),
                "response_marker" => marker = Some(value),
                KEY_I_TO_A => {
                    templates.insert(KEY_I_TO_A, value);
                }
                KEY_I_TO_R => {
                    templates.insert(KEY_I_TO_R, value);
                }
                KEY_IR_TO_A => {
                    templates.insert(KEY_IR_TO_A, value);
                }
                other => {
                    return Err(PromptError::InvalidTemplate(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )));
                }
            }
        }
        for key in [KEY_I_TO_A, KEY_I_TO_R, KEY_IR_TO_A] {
            if !templates.contains_key(key) {
                return Err(PromptError::InvalidTemplate(format!("missing key {key:?}")));
            }
        }
        let set = Self {
            name: name
                .ok_or_else(|| PromptError::InvalidTemplate("missing key \"name\"".to_string()))?,
            templates,
            response_marker: marker.ok_or_else(|| {
                PromptError::InvalidTemplate("missing key \"response_marker\"".to_string())
            })?,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Suffix of `full_text` after the prompt (and therefore after the response
/// marker that terminates it). Errors when the prompt is not a prefix.
pub fn completion_region<'a>(prompt: &str, full_text: &'a str) -> Result<&'a str, PromptError> {
    full_text
        .strip_prefix(prompt)
        .ok_or(PromptError::PromptNotPrefix)
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}
