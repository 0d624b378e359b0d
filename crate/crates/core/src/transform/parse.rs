//! Section parser for transformation outputs.
//!
//! Headers are recognised only at the start of a line, case-insensitively,
//! with optional markdown decoration (`**Step 1:**`, `## Pass 2:`). Only the
//! headers belonging to the requested kind count; anything else is content
//! of the current section. Text before the first header is ignored.

use serde::{Deserialize, Serialize};

use super::TransformKind;
use crate::eval::boxed_contents;

/// Soft limit on steps per approach block; exceeding it only warns.
pub const MAX_STEPS: u32 = 7;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("transformation output is empty")]
    EmptyOutput,
    #[error("missing section {0:?}")]
    MissingSection(String),
    #[error("section {0:?} appears more than once")]
    DuplicateSection(String),
    #[error("unexpected section {0:?}")]
    UnexpectedSection(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Header {
    Problem,
    Approach,
    Step(u32),
    Pass(u32),
    CommonMistakes,
    MisleadingIntuitions,
    CriticalChecks,
    CorrectApproach,
    Answer,
}

impl Header {
    fn name(self) -> String {
        match self {
            Header::Problem => "Problem".into(),
            Header::Approach => "Approach".into(),
            Header::Step(n) => format!("Step {n}"),
            Header::Pass(n) => format!("Pass {n}"),
            Header::CommonMistakes => "Common Mistakes".into(),
            Header::MisleadingIntuitions => "Misleading Intuitions".into(),
            Header::CriticalChecks => "Critical Checks".into(),
            Header::CorrectApproach => "Correct Approach".into(),
            Header::Answer => "Answer".into(),
        }
    }
}

/// A named piece of a parsed output, e.g. `Pass 2` or `Critical Checks`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedSection {
    pub name: String,
    pub body: String,
}

/// One solution path of a structural output.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ApproachBlock {
    pub approach: Option<String>,
    /// Sorted by step number, numbered 1..=N without gaps.
    pub steps: Vec<(u32, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub kind: TransformKind,
    pub problem: Option<String>,
    /// Structural outputs only; at least one block.
    pub blocks: Vec<ApproachBlock>,
    /// Semantic and reflection outputs: the required sections in canonical
    /// order.
    pub sections: Vec<NamedSection>,
    pub answer: Option<String>,
    /// Content of the last balanced `\boxed{...}` anywhere in the output.
    pub boxed_answer: Option<String>,
    /// How many boxed values the output contained.
    pub boxed_count: usize,
    pub warnings: Vec<String>,
}

/// Strips markdown emphasis and heading marks around a header.
fn strip_decoration(s: &str) -> &str {
    s.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '#' | '_' | '>'))
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

/// Skips an optional parenthetical such as `(brief)` or `(core moves)`.
fn skip_paren(s: &str) -> &str {
    let t = s.trim_start();
    if let Some(rest) = t.strip_prefix('(') {
        if let Some(end) = rest.find(')') {
            return &rest[end + 1..];
        }
    }
    s
}

/// Consumes the separator after a header name: `:` (possibly wrapped in
/// emphasis marks), or for steps also `---`, an em dash or `.`. Returns the
/// remaining content.
fn separator(s: &str, allow_dash: bool) -> Option<&str> {
    let t = s.trim_start_matches(['*', '_', ' ']);
    let rest = if let Some(r) = t.strip_prefix(':') {
        r
    } else if allow_dash {
        t.strip_prefix("---")
            .or_else(|| t.strip_prefix('\u{2014}'))
            .or_else(|| t.strip_prefix("--"))
            .or_else(|| t.strip_prefix('.'))?
    } else {
        return None;
    };
    Some(rest.trim_start_matches(['*', '_']).trim())
}

fn number(s: &str) -> Option<(u32, &str)> {
    let t = s.trim_start();
    let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 || digits > 3 {
        return None;
    }
    Some((t[..digits].parse().ok()?, &t[digits..]))
}

/// Recognises a header line for `kind`, returning it and the inline content
/// following the separator.
pub(crate) fn header(line: &str, kind: TransformKind) -> Option<(Header, &str)> {
    let s = strip_decoration(line);
    if let Some(r) = strip_prefix_ci(s, "problem") {
        return separator(r, false).map(|c| (Header::Problem, c));
    }
    if let Some(r) = strip_prefix_ci(s, "answer") {
        return separator(r, false).map(|c| (Header::Answer, c));
    }
    match kind {
        TransformKind::StructuralNorm => {
            if let Some(r) = strip_prefix_ci(s, "approach") {
                return separator(r, false).map(|c| (Header::Approach, c));
            }
            let r = strip_prefix_ci(s, "step ")?;
            let (n, r) = number(r)?;
            separator(r, true).map(|c| (Header::Step(n), c))
        }
        TransformKind::SemanticDistill => {
            let r = strip_prefix_ci(s, "pass ")?;
            let (n, r) = number(r)?;
            separator(skip_paren(r), false).map(|c| (Header::Pass(n), c))
        }
        TransformKind::Reflection => {
            let table = [
                ("common mistakes", Header::CommonMistakes),
                ("misleading intuitions", Header::MisleadingIntuitions),
                ("critical checks", Header::CriticalChecks),
                ("correct approach", Header::CorrectApproach),
            ];
            table.iter().find_map(|(p, h)| {
                let r = strip_prefix_ci(s, p)?;
                separator(skip_paren(r), false).map(|c| (*h, c))
            })
        }
    }
}

/// Splits the output into (header, body) pairs in document order.
fn sections(raw: &str, kind: TransformKind) -> Vec<(Header, String)> {
    let mut out: Vec<(Header, String)> = Vec::new();
    for line in raw.lines() {
        if let Some((h, content)) = header(line, kind) {
            out.push((h, content.to_string()));
        } else if let Some((_, body)) = out.last_mut() {
            if !body.is_empty() || !line.trim().is_empty() {
                if !body.is_empty() {
                    body.push('\n');
                }
                body.push_str(line.trim_end());
            }
        }
    }
    for (_, body) in &mut out {
        let t = body.trim_end().len();
        body.truncate(t);
    }
    out
}

fn single(found: &[(Header, String)], h: Header) -> Result<Option<String>, ParseError> {
    let mut it = found.iter().filter(|(x, _)| *x == h);
    let first = it.next().map(|(_, b)| b.clone());
    if it.next().is_some() {
        return Err(ParseError::DuplicateSection(h.name()));
    }
    Ok(first)
}

pub fn parse_transform_output(kind: TransformKind, raw: &str) -> Result<ParsedOutput, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::EmptyOutput);
    }
    let found = sections(raw, kind);
    let problem = single(&found, Header::Problem)?;
    let answer = single(&found, Header::Answer)?;
    let boxes = boxed_contents(raw);
    let mut parsed = ParsedOutput {
        kind,
        problem,
        blocks: Vec::new(),
        sections: Vec::new(),
        answer,
        boxed_answer: boxes.last().cloned(),
        boxed_count: boxes.len(),
        warnings: Vec::new(),
    };
    if parsed.boxed_count > 1 {
        parsed
            .warnings
            .push(format!("{} boxed values; kept the last", parsed.boxed_count));
    }
    match kind {
        TransformKind::StructuralNorm => parse_blocks(&found, &mut parsed)?,
        TransformKind::SemanticDistill => {
            for (h, _) in &found {
                if let Header::Pass(n) = h {
                    if !(1..=3).contains(n) {
                        return Err(ParseError::UnexpectedSection(h.name()));
                    }
                }
            }
            for n in 1..=3 {
                parsed.sections.push(required(&found, Header::Pass(n))?);
            }
        }
        TransformKind::Reflection => {
            for h in [
                Header::CommonMistakes,
                Header::MisleadingIntuitions,
                Header::CriticalChecks,
                Header::CorrectApproach,
            ] {
                parsed.sections.push(required(&found, h)?);
            }
        }
    }
    Ok(parsed)
}

fn required(found: &[(Header, String)], h: Header) -> Result<NamedSection, ParseError> {
    let body = single(found, h)?.ok_or_else(|| ParseError::MissingSection(h.name()))?;
    Ok(NamedSection { name: h.name(), body })
}

/// Groups steps into blocks delimited by `Approach:` headers. Steps before
/// the first `Approach:` form their own block.
fn parse_blocks(found: &[(Header, String)], parsed: &mut ParsedOutput) -> Result<(), ParseError> {
    let mut blocks: Vec<ApproachBlock> = Vec::new();
    let mut current: Option<ApproachBlock> = None;
    for (h, body) in found {
        match h {
            Header::Approach => {
                blocks.extend(current.take());
                current = Some(ApproachBlock {
                    approach: Some(body.clone()),
                    steps: Vec::new(),
                });
            }
            Header::Step(n) => current
                .get_or_insert_with(Default::default)
                .steps
                .push((*n, body.clone())),
            _ => {}
        }
    }
    blocks.extend(current);
    if blocks.is_empty() {
        return Err(ParseError::MissingSection("Step 1".into()));
    }
    for block in &mut blocks {
        block.steps.sort_by_key(|(n, _)| *n);
        for (i, (n, _)) in block.steps.iter().enumerate() {
            let want = i as u32 + 1;
            if *n < want {
                return Err(ParseError::DuplicateSection(format!("Step {n}")));
            }
            if *n > want {
                return Err(ParseError::MissingSection(format!("Step {want}")));
            }
        }
        if block.steps.is_empty() {
            return Err(ParseError::MissingSection("Step 1".into()));
        }
        if block.steps.len() as u32 > MAX_STEPS {
            parsed
                .warnings
                .push(format!("{} steps exceeds the limit of {MAX_STEPS}", block.steps.len()));
        }
    }
    parsed.blocks = blocks;
    Ok(())
}
