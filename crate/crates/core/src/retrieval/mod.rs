//! Retrieval corpora: unit construction, chunking, the embedded index and
//! top-k search.

mod index;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusUnit, TraceRecord, UnitMode};
use crate::tokenize::Tokenizer;

pub use index::{Hit, Index, IndexError, IndexHeader, RetrievedContext, FORMAT_VERSION, MAGIC};

pub const DEFAULT_CHUNK_LIMIT: usize = 512;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub source_id: String,
    pub seq: u32,
    /// Half-open range of token indices in the source.
    pub token_span: (usize, usize),
    pub text: String,
}

/// Cuts `text` into windows of `limit` tokens advancing by `limit - overlap`.
///
/// Without overlap the chunk texts tile the source: each chunk runs from its
/// first token (from byte 0 for the first chunk) up to the next chunk's
/// first token, so whitespace is kept and concatenating the texts gives the
/// source back. With overlap each text spans its first to last token.
pub fn chunk_text(source_id: &str, text: &str, limit: usize, overlap: usize, tokenizer: &dyn Tokenizer) -> Vec<Chunk> {
    assert!(limit >= 1, "chunk limit must be >= 1");
    assert!(overlap < limit, "overlap must be smaller than the limit");
    let spans: Vec<Range<usize>> = tokenizer.spans(text);
    if spans.is_empty() {
        return Vec::new();
    }
    let step = limit - overlap;
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        starts.push(s);
        if s + limit >= spans.len() {
            break;
        }
        s += step;
    }
    starts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let e = (s + limit).min(spans.len());
            let (b0, b1) = if overlap == 0 {
                let b0 = if i == 0 { 0 } else { spans[s].start };
                let b1 = starts.get(i + 1).map_or(text.len(), |&n| spans[n].start);
                (b0, b1)
            } else {
                (spans[s].start, spans[e - 1].end)
            };
            Chunk {
                source_id: source_id.to_string(),
                seq: i as u32,
                token_span: (s, e),
                text: text[b0..b1].to_string(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub limit: usize,
    pub overlap: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            limit: DEFAULT_CHUNK_LIMIT,
            overlap: 0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum UnitError {
    #[error("record {0:?} has no final_output, required for mode output")]
    MissingFinalOutput(String),
    #[error("mode {0} units come from the transform stage, not from raw records")]
    TransformedMode(UnitMode),
}

/// Text of a full-trace unit: the problem statement followed by the trace,
/// or the trace alone.
pub fn full_text(rec: &TraceRecord, include_problem: bool) -> String {
    if include_problem {
        rec.comparison_text()
    } else {
        rec.trace.clone()
    }
}

/// Units built directly from records. Transformed modes are produced by the
/// transform stage and rejected here.
pub fn build_units(
    records: &[TraceRecord],
    mode: UnitMode,
    chunk: ChunkConfig,
    include_problem: bool,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<CorpusUnit>, UnitError> {
    let unit = |rec: &TraceRecord, seq: u32, text: String| CorpusUnit {
        unit_id: CorpusUnit::make_id(&rec.id, mode, seq),
        source_id: rec.id.clone(),
        mode,
        seq,
        domain: rec.domain,
        text,
    };
    let mut out = Vec::new();
    for rec in records {
        match mode {
            UnitMode::Full => out.push(unit(rec, 0, full_text(rec, include_problem))),
            UnitMode::Chunk => {
                let text = full_text(rec, include_problem);
                for c in chunk_text(&rec.id, &text, chunk.limit, chunk.overlap, tokenizer) {
                    out.push(unit(rec, c.seq, c.text));
                }
            }
            UnitMode::FinalOutput => {
                let f = rec
                    .final_output
                    .clone()
                    .ok_or_else(|| UnitError::MissingFinalOutput(rec.id.clone()))?;
                out.push(unit(rec, 0, f));
            }
            m => return Err(UnitError::TransformedMode(m)),
        }
    }
    Ok(out)
}
