//! Instruction templates, one per task. Spans are named by reading order:
//! the first is the title, the second the subtitle, the rest body text.
//!
//! | task | template |
//! |---|---|
//! | text addition | `Add the title "X" and the subtitle "Y" to this image.` |
//! | text deletion | `Remove the title "X" from this image.` / `Remove all text from this image.` |
//! | text modification | `Change the title "OLD" to "NEW".` |
//! | multi-aspect | `Redesign this poster at WxH keeping the title "X".` |
//! | restyle | `Restyle this poster with a new color palette, keeping the title "X".` |

use crate::filtering::DetectedSpan;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptTask {
    TextAddition,
    TextDeletion,
    /// Span `index` (reading order) is replaced by `new`.
    TextModification { index: usize, new: String },
    MultiAspect { width: u32, height: u32 },
    Restyle,
}

pub fn role_name(index: usize) -> &'static str {
    match index {
        0 => "title",
        1 => "subtitle",
        _ => "body text",
    }
}

/// `the title "A"`, `the title "A" and the subtitle "B"`,
/// `the title "A", the subtitle "B" and the body text "C"`.
fn enumerate(spans: &[DetectedSpan]) -> String {
    let parts: Vec<String> = spans
        .iter()
        .enumerate()
        .map(|(i, s)| format!("the {} \"{}\"", role_name(i), s.text))
        .collect();
    match parts.split_last() {
        None => String::new(),
        Some((last, [])) => last.clone(),
        Some((last, rest)) => format!("{} and {last}", rest.join(", ")),
    }
}

pub fn extract_source_prompt(spans: &[DetectedSpan], task: &PromptTask) -> String {
    let listed = enumerate(spans);
    match task {
        PromptTask::TextAddition if spans.is_empty() => "Add text to this image.".into(),
        PromptTask::TextAddition => format!("Add {listed} to this image."),
        PromptTask::TextDeletion if spans.is_empty() => "Remove all text from this image.".into(),
        PromptTask::TextDeletion => format!("Remove {listed} from this image."),
        PromptTask::TextModification { index, new } => match spans.get(*index) {
            Some(old) => format!("Change the {} \"{}\" to \"{new}\".", role_name(*index), old.text),
            None => format!("Add the text \"{new}\" to this image."),
        },
        PromptTask::MultiAspect { width, height } if spans.is_empty() => {
            format!("Redesign this poster at {width}x{height}.")
        }
        PromptTask::MultiAspect { width, height } => {
            format!("Redesign this poster at {width}x{height} keeping {listed}.")
        }
        PromptTask::Restyle if spans.is_empty() => "Restyle this poster with a new color palette.".into(),
        PromptTask::Restyle => format!("Restyle this poster with a new color palette, keeping {listed}."),
    }
}
