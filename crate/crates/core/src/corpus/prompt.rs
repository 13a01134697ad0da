//! Question/answer templates for the text parsing tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsingTask {
    FullText,
    TextInBox,
    GroundText,
    Formula2Latex,
    Table2Markdown,
    Chart2Csv,
}

pub fn bbox_tag(b: [u32; 4]) -> String {
    format!("<bbox>{}, {}, {}, {}</bbox>", b[0], b[1], b[2], b[3])
}

pub fn ocr_tag(text: &str) -> String {
    format!("<ocr>{text}</ocr>")
}

/// Builds `(question, answer)` for `task` from a record's answer text and box.
pub fn make_parsing_prompt(
    answer: &str,
    bbox: Option<[u32; 4]>,
    task: ParsingTask,
) -> Result<(String, String)> {
    Ok(match task {
        ParsingTask::FullText => ("Recognizing full text.".into(), answer.into()),
        ParsingTask::TextInBox => {
            let b = bbox.ok_or(Error::MissingField("bbox"))?;
            (
                format!("Recognizing the text within the bounding box {}.", bbox_tag(b)),
                answer.into(),
            )
        }
        ParsingTask::GroundText => {
            let b = bbox.ok_or(Error::MissingField("bbox"))?;
            (
                format!("Predict the bounding box of the text {}", ocr_tag(answer)),
                bbox_tag(b),
            )
        }
        ParsingTask::Formula2Latex => ("Converting the formula into LaTeX format.".into(), answer.into()),
        ParsingTask::Table2Markdown => ("Converting the table into Markdown format.".into(), answer.into()),
        ParsingTask::Chart2Csv => ("Converting the chart into CSV format.".into(), answer.into()),
    })
}
