//! LLM-driven consolidation of a response set into one caption.
//!
//! The prompt template lives in `prompts/consolidation.txt`. The original
//! caption fills `<original caption>` and the transform captions are listed
//! one per line, numbered from 1, after "The crops captions are:". A fixed
//! output-format directive follows so the answer can be split into the final
//! caption and the explanation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, LlmClient};
pub use crate::responses::{Response, ResponseOrigin, ResponseSet};

const TEMPLATE: &str = include_str!("prompts/consolidation.txt");
const ORIGINAL_SLOT: &str = "<original caption>";
const CROPS_SLOT: &str = " <crops captions>";

pub const CAPTION_HEADER: &str = "FINAL CAPTION:";
pub const EXPLANATION_HEADER: &str = "EXPLANATION:";

const FORMAT_DIRECTIVE: &str =
    "\n\nFormat your answer exactly as follows, with nothing before the first header:\n\
FINAL CAPTION: <the final caption only>\n\
EXPLANATION: <the explanation of the data consolidation process>\n";

const FORMAT_REMINDER: &str =
    "\nYour previous answer could not be parsed. Answer again and start with the line \
\"FINAL CAPTION:\" followed by the caption, then a line starting with \"EXPLANATION:\".\n";

/// Renders the consolidation prompt for `set`.
pub fn build_prompt(set: &ResponseSet) -> String {
    let crops: String = set
        .transforms()
        .enumerate()
        .map(|(i, text)| format!("\n{}. {}", i + 1, text))
        .collect();
    let (head, rest) = TEMPLATE
        .split_once(ORIGINAL_SLOT)
        .expect("template has original slot");
    let (middle, tail) = rest.split_once(CROPS_SLOT).expect("template has crops slot");
    let mut prompt = String::with_capacity(TEMPLATE.len() + crops.len() + 256);
    prompt.push_str(head);
    prompt.push_str(set.original());
    prompt.push_str(middle);
    prompt.push_str(&crops);
    prompt.push_str(tail.trim_end());
    prompt.push_str(FORMAT_DIRECTIVE);
    prompt
}

/// Prompt used for the single retry after an unparseable answer.
pub fn build_retry_prompt(set: &ResponseSet) -> String {
    let mut prompt = build_prompt(set);
    prompt.push_str(FORMAT_REMINDER);
    prompt
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsolidationResult {
    pub final_caption: String,
    pub explanation: String,
    pub raw_completion: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("completion is empty")]
    Empty,
    #[error("completion has no \"FINAL CAPTION:\" header")]
    MissingCaptionHeader,
    #[error("final caption section is empty")]
    EmptyCaption,
}

#[derive(Debug, Error)]
pub enum ConsolidationError {
    #[error("consolidator request failed: {0}")]
    Client(#[from] ClientError),
    #[error("consolidator output unparseable after retry ({last_error}); last completion: {last_raw:?}")]
    Failed {
        last_error: ParseError,
        last_raw: String,
    },
}

fn find_ignore_case(haystack: &str, needle: &str, from: usize) -> Option<usize> {
    let hay = haystack.as_bytes();
    let pat = needle.as_bytes();
    (from..=hay.len().checked_sub(pat.len())?).find(|&i| hay[i..i + pat.len()].eq_ignore_ascii_case(pat))
}

/// Strips the `**` that markdown-bolded headers leave next to a section.
fn unbold(section: &str) -> &str {
    let s = section.trim();
    let s = s.strip_prefix("**").unwrap_or(s);
    s.strip_suffix("**").unwrap_or(s).trim()
}

/// Splits a completion into final caption and explanation. Header matching is
/// ASCII case-insensitive; the caption runs up to the first explanation header
/// after it, or to the end of the text.
pub fn parse_consolidation(raw: &str) -> Result<ConsolidationResult, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let start = find_ignore_case(raw, CAPTION_HEADER, 0).ok_or(ParseError::MissingCaptionHeader)?
        + CAPTION_HEADER.len();
    let mut warnings = Vec::new();
    let (caption, explanation) = match find_ignore_case(raw, EXPLANATION_HEADER, start) {
        Some(pos) => (&raw[start..pos], unbold(&raw[pos + EXPLANATION_HEADER.len()..])),
        None => {
            warnings.push("completion has no EXPLANATION section".to_owned());
            (&raw[start..], "")
        }
    };
    let caption = unbold(caption);
    if caption.is_empty() {
        return Err(ParseError::EmptyCaption);
    }
    Ok(ConsolidationResult {
        final_caption: caption.to_owned(),
        explanation: explanation.to_owned(),
        raw_completion: raw.to_owned(),
        warnings,
    })
}

/// Renders a well-formed answer, the inverse of [`parse_consolidation`].
pub fn render_consolidation(caption: &str, explanation: &str) -> String {
    format!("{CAPTION_HEADER} {caption}\n{EXPLANATION_HEADER} {explanation}")
}

/// Builds the prompt, asks the LLM and parses the answer. One retry with a
/// format reminder is made on a parse failure; a second failure is an error.
/// The result is always the LLM's synthesis, never the original caption.
pub async fn consolidate(
    set: &ResponseSet,
    llm: &dyn LlmClient,
) -> Result<ConsolidationResult, ConsolidationError> {
    let raw = llm.complete(&build_prompt(set)).await?;
    let first_error = match parse_consolidation(&raw) {
        Ok(r) => return Ok(r),
        Err(e) => e,
    };
    log::warn!("consolidator output unparseable ({first_error}), retrying with format reminder");
    let raw = llm.complete(&build_retry_prompt(set)).await?;
    parse_consolidation(&raw).map_err(|last_error| ConsolidationError::Failed {
        last_error,
        last_raw: raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_contains_every_step_and_slot() {
        let set = ResponseSet::new("a cat on a sofa", ["a dog", "a dog on grass"]).unwrap();
        let p = build_prompt(&set);
        assert!(p.starts_with("You are a multi-caption reasoning agent."));
        for step in [
            "\n1. Identify the content",
            "\n2. Identify consistent",
            "\n3. Evaluate consistency",
            "\n4. Check caption alignment",
            "\n5. Resolve conflicts",
            "\n1. A final caption",
            "\n2. An explanation",
        ] {
            assert!(p.contains(step), "missing {step:?}");
        }
        assert!(p.contains("The original image caption is: a cat on a sofa."));
        assert!(p.contains("The crops captions are:\n1. a dog\n2. a dog on grass\n\nFormat your answer"));
        assert!(!p.contains(ORIGINAL_SLOT) && !p.contains("<crops captions>"));
    }

    #[test]
    fn single_crop_lists_one_caption() {
        let set = ResponseSet::new("x", ["only crop"]).unwrap();
        let p = build_prompt(&set);
        assert!(p.contains("The crops captions are:\n1. only crop\n\n"));
        assert!(!p.contains("\n2. only"));
    }

    #[test]
    fn parses_well_formed() {
        let r = parse_consolidation("FINAL CAPTION: a stop sign.\nEXPLANATION: majority of captions agree.")
            .unwrap();
        assert_eq!(r.final_caption, "a stop sign.");
        assert_eq!(r.explanation, "majority of captions agree.");
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn caption_without_explanation_warns() {
        let r = parse_consolidation("FINAL CAPTION: a bench in snow").unwrap();
        assert_eq!(r.final_caption, "a bench in snow");
        assert_eq!(r.explanation, "");
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            parse_consolidation("The image shows a bench."),
            Err(ParseError::MissingCaptionHeader)
        );
        assert_eq!(parse_consolidation("  "), Err(ParseError::Empty));
        assert_eq!(
            parse_consolidation("FINAL CAPTION:\nEXPLANATION: nothing"),
            Err(ParseError::EmptyCaption)
        );
    }

    #[test]
    fn tolerates_markdown_bold_and_case() {
        let r = parse_consolidation(
            "Sure!\n**Final Caption:** A wooden bench in a snowy park.\n\n**Explanation:** crops agree.",
        )
        .unwrap();
        assert_eq!(r.final_caption, "A wooden bench in a snowy park.");
        assert_eq!(r.explanation, "crops agree.");
    }

    #[test]
    fn explanation_header_never_leaks_into_caption() {
        let r = parse_consolidation("FINAL CAPTION: dogs EXPLANATION: x EXPLANATION: y").unwrap();
        assert_eq!(r.final_caption, "dogs");
        assert!(!r.final_caption.contains(EXPLANATION_HEADER));
    }
}
