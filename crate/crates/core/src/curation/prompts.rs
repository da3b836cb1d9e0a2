//! Prompt templates for captioning and modification-text generation.
//!
//! The modification template carries the named placeholders `{cap1}`
//! (reference caption) and `{cap2}` (target caption). The caption and
//! direct-modification templates take no placeholders.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CAP_REF: &str = "{cap1}";
pub const CAP_TARGET: &str = "{cap2}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    /// Single-image caption, `P_c`.
    Caption,
    /// Caption-grounded modification text, `P_m`.
    Modify,
    /// Modification text from the two images alone, `P_m′`.
    ModifyDirect,
}

impl PromptKind {
    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Caption => "P_c",
            PromptKind::Modify => "P_m",
            PromptKind::ModifyDirect => "P_m_direct",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const DEFAULT_MODIFY: &str = r#"# Task Description
You are an expert in image understanding and modification. Given image 1 with the caption "{cap1}" and image 2 with the caption "{cap2}", your task is to generate a clear and concise modification instruction that, when applied to image 1, will make it visually resemble image 2.

The modification may involve:
- Adjusting the color, shape, size, quantity, or texture of objects.
- Changing the position, angle, or arrangement of objects.
- Changing the position, angle, or arrangement of objects.
- Modifying the background.

Instructions:
- Provide only the modification instruction as a direct command.
- Do not include explanations, reasoning, or comparisons to the original or target images.
- Ensure the instruction is specific, actionable, and focused.
"#;

const DEFAULT_CAPTION: &str = r#"# Task Description
You are an expert in image analysis and description. Your job is to generate one precise and concise sentence that fully describes the content of the given image. Focus on the most important details, such as:
- The primary objects or elements in the image.
- The relationships, positions, or actions of these objects.
- The overall setting, background, or scene type.

Provide the modification text in one clear and concise sentence without any explanation or additional context.
"#;

const DEFAULT_MODIFY_DIRECT: &str = r#"# Task Description
You are an expert in image understanding and modification. Given image 1 and image 2, your task is to generate a clear and concise modification instruction that, when applied to image 1, will make it visually resemble image 2.

The modification may involve:
- Adjusting the color, shape, size, quantity, or texture of objects.
- Changing the position, angle, or arrangement of objects.
- Changing the position, angle, or arrangement of objects.
- Modifying the background.

Instructions:
- Provide only the modification instruction as a direct command.
- Do not include explanations, reasoning, or comparisons to the original or target images.
- Ensure the instruction is specific, actionable, and focused.
"#;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(kind: PromptKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
        }
    }

    /// Built-in text for `kind`.
    pub fn builtin(kind: PromptKind) -> Self {
        let text = match kind {
            PromptKind::Caption => DEFAULT_CAPTION,
            PromptKind::Modify => DEFAULT_MODIFY,
            PromptKind::ModifyDirect => DEFAULT_MODIFY_DIRECT,
        };
        Self::new(kind, text)
    }

    pub fn from_file(kind: PromptKind, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(kind, text))
    }

    fn error(&self, reason: impl Into<String>) -> Error {
        Error::Template {
            name: self.kind.name().to_owned(),
            reason: reason.into(),
        }
    }

    fn expect_kind(&self, kind: PromptKind) -> Result<()> {
        if self.kind != kind {
            return Err(self.error(format!("used where {kind} is required")));
        }
        Ok(())
    }

    /// Renders a template that takes no placeholders.
    pub fn render_plain(&self) -> Result<String> {
        if self.kind == PromptKind::Modify {
            return Err(self.error("needs captions; use render_with_captions"));
        }
        for ph in [CAP_REF, CAP_TARGET] {
            if self.text.contains(ph) {
                return Err(self.error(format!("unexpected placeholder {ph}")));
            }
        }
        Ok(self.text.clone())
    }

    /// Substitutes both captions. Each placeholder must occur exactly once.
    pub fn render_with_captions(&self, cap_ref: &str, cap_target: &str) -> Result<String> {
        self.expect_kind(PromptKind::Modify)?;
        for ph in [CAP_REF, CAP_TARGET] {
            match self.text.matches(ph).count() {
                1 => {}
                0 => return Err(self.error(format!("missing placeholder {ph}"))),
                n => return Err(self.error(format!("placeholder {ph} appears {n} times"))),
            }
        }
        // Split at the placeholders so caption text is never re-scanned.
        let (first, first_val, second, second_val) = {
            let a = self.text.find(CAP_REF).unwrap_or_default();
            let b = self.text.find(CAP_TARGET).unwrap_or_default();
            if a < b {
                (a, cap_ref, b, cap_target)
            } else {
                (b, cap_target, a, cap_ref)
            }
        };
        let ph_len = CAP_REF.len();
        let mut out = String::with_capacity(self.text.len() + cap_ref.len() + cap_target.len());
        out.push_str(&self.text[..first]);
        out.push_str(first_val);
        out.push_str(&self.text[first + ph_len..second]);
        out.push_str(second_val);
        out.push_str(&self.text[second + ph_len..]);
        Ok(out)
    }
}

/// The three templates used by a curation run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub caption: PromptTemplate,
    pub modify: PromptTemplate,
    pub modify_direct: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            caption: PromptTemplate::builtin(PromptKind::Caption),
            modify: PromptTemplate::builtin(PromptKind::Modify),
            modify_direct: PromptTemplate::builtin(PromptKind::ModifyDirect),
        }
    }
}
