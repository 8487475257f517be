use serde::{Deserialize, Serialize};

use super::{TaskError, CONNECTIVES};
use crate::toylm::vocab::{ANSWER_MARKER, END, NEWLINE, STEP_MARKER, STEP_MARKER_TEXT};
use crate::toylm::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based position among the parsed steps.
    pub number: usize,
    /// Number written in the text, if any.
    pub stated: Option<u32>,
    /// Canonical line text without the trailing newline.
    pub text: String,
    /// Token range `[start, end)` of the line, newline included.
    pub span: (usize, usize),
}

impl Step {
    /// Words after the step header with leading connectives removed.
    pub fn body_words(&self) -> Vec<&str> {
        let rest = self.text.strip_prefix(STEP_MARKER_TEXT).unwrap_or(&self.text);
        let rest = match rest.find(':') {
            Some(i) => &rest[i + 1..],
            None => rest,
        };
        rest.split_whitespace()
            .skip_while(|w| CONNECTIVES.contains(w))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub steps: Vec<Step>,
    pub answer: Option<String>,
    pub truncated: bool,
    /// Set when step numbers were out of sequence or stray lines were skipped.
    pub warning: bool,
}

/// Splits generated tokens into steps and an answer. `offset` is added to
/// every span so they index the full sequence.
pub fn parse_tokens(
    tokens: &[usize],
    offset: usize,
    truncated: bool,
    vocab: &Vocabulary,
) -> Result<StepTrace, TaskError> {
    let mut steps = Vec::new();
    let mut answer = None;
    let mut warning = false;
    let end = tokens.iter().position(|&t| t == END).unwrap_or(tokens.len());
    let mut i = 0;
    while i < end {
        let line_end = tokens[i..end]
            .iter()
            .position(|&t| t == NEWLINE)
            .map_or(end, |p| i + p);
        let line = &tokens[i..line_end];
        match line.first() {
            None => {}
            Some(&STEP_MARKER) => {
                let stated = match line {
                    [_, n, colon, ..] if vocab.symbol(*colon)? == ":" => vocab.as_number(*n),
                    _ => None,
                };
                let number = steps.len() + 1;
                if stated != Some(number as u32) {
                    warning = true;
                }
                steps.push(Step {
                    number,
                    stated,
                    text: vocab.detokenize(line)?,
                    span: (offset + i, offset + (line_end + 1).min(end)),
                });
            }
            Some(&ANSWER_MARKER) => {
                answer = Some(vocab.detokenize(&line[1..])?);
                break;
            }
            Some(_) => warning = true,
        }
        i = line_end + 1;
    }
    if steps.is_empty() {
        return Err(TaskError::EmptyTrace);
    }
    if answer.is_none() && !truncated {
        return Err(TaskError::MalformedTrace("no answer line".into()));
    }
    Ok(StepTrace {
        steps,
        answer,
        truncated,
        warning,
    })
}

pub fn parse_steps(text: &str, vocab: &Vocabulary, truncated: bool) -> Result<StepTrace, TaskError> {
    parse_tokens(&vocab.tokenize(text)?, 0, truncated, vocab)
}

/// Text form of a parsed trace.
pub fn render(trace: &StepTrace) -> String {
    let mut s = String::new();
    for st in &trace.steps {
        s.push_str(&st.text);
        s.push('\n');
    }
    if let Some(a) = &trace.answer {
        s.push_str("<Answer>: ");
        s.push_str(a);
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_steps_and_answer() {
        let v = Vocabulary::new();
        let t = parse_steps(
            "- Step 1: 7 + 5 = 12\n- Step 2: so 12 * 3 = 36\n<Answer>: 36\n",
            &v,
            false,
        )
        .unwrap();
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.answer.as_deref(), Some("36"));
        assert!(!t.warning);
        assert_eq!(t.steps[0].span, (0, 9));
        assert_eq!(t.steps[1].span, (9, 19));
        assert_eq!(t.steps[1].body_words(), vec!["12", "*", "3", "=", "36"]);
    }

    #[test]
    fn missing_answer() {
        let v = Vocabulary::new();
        let text = "- Step 1: 7 + 5 = 12\n";
        assert!(matches!(
            parse_steps(text, &v, false),
            Err(TaskError::MalformedTrace(_))
        ));
        let t = parse_steps(text, &v, true).unwrap();
        assert!(t.truncated && t.answer.is_none());
    }

    #[test]
    fn no_steps() {
        let v = Vocabulary::new();
        assert!(matches!(
            parse_steps("<Answer>: 3\n", &v, false),
            Err(TaskError::EmptyTrace)
        ));
    }

    #[test]
    fn renumbers_with_warning() {
        let v = Vocabulary::new();
        let t = parse_steps(
            "- Step 1: 7 + 5 = 12\n- Step 3: 12 * 3 = 36\n<Answer>: 36",
            &v,
            false,
        )
        .unwrap();
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.steps[1].number, 2);
        assert_eq!(t.steps[1].stated, Some(3));
        assert!(t.warning);
    }

    #[test]
    fn spans_are_offset_and_stop_at_end_token() {
        let v = Vocabulary::new();
        let mut toks = v.tokenize("- Step 1: 7 + 5 = 12\n<Answer>: 12\n").unwrap();
        toks.push(END);
        toks.extend(v.tokenize("- Step 2: 1 + 1 = 2\n").unwrap());
        let t = parse_tokens(&toks, 30, false, &v).unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.steps[0].span, (30, 39));
    }

    proptest! {
        #[test]
        fn parse_render_roundtrip(
            bodies in proptest::collection::vec((0u32..200, 0usize..3, 0u32..200, 0u32..200), 1..8),
            ans in 0u32..200,
        ) {
            let v = Vocabulary::new();
            let ops = ["+", "-", "*"];
            let mut text = String::new();
            for (k, (a, o, b, c)) in bodies.iter().enumerate() {
                text.push_str(&format!("- Step {}: {a} {} {b} = {c}\n", k + 1, ops[*o]));
            }
            text.push_str(&format!("<Answer>: {ans}\n"));
            let t = parse_steps(&text, &v, false).unwrap();
            prop_assert_eq!(render(&t), text.clone());
            let again = parse_steps(&render(&t), &v, false).unwrap();
            prop_assert_eq!(again, t);
        }
    }
}
