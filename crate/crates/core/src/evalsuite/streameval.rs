//! Line-keyed retrieval stream: content lines `line <key>: REGISTER_CONTENT is <value>`
//! interleaved with a query every `q` lines asking for the value `d` lines back.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{CachePolicy, KvCache};
use crate::model::Model;

/// Byte tokens per rendered line (content lines and complete query lines alike).
pub const LINE_TOKENS: usize = 36;
const MAX_LINES: usize = 10_000;
/// Greedy decoding budget for one answer.
pub const MAX_ANSWER_TOKENS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEvalParams {
    pub n_queries: usize,
    /// Content lines between consecutive queries.
    pub lines_per_query: usize,
    /// How many content lines before the query the answer sits.
    pub distance: usize,
}

impl Default for StreamEvalParams {
    fn default() -> Self {
        Self {
            n_queries: 100,
            lines_per_query: 10,
            distance: 20,
        }
    }
}

impl StreamEvalParams {
    /// Layout of the `needle` training corpus.
    pub fn training() -> Self {
        Self {
            n_queries: 50,
            lines_per_query: 2,
            distance: 1,
        }
    }

    fn first_query_line(&self) -> usize {
        self.distance.div_ceil(self.lines_per_query) * self.lines_per_query
    }

    fn n_lines(&self) -> usize {
        self.first_query_line() + (self.n_queries - 1) * self.lines_per_query + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    /// The query follows this content line.
    pub after_line: usize,
    /// Content line whose value is asked for.
    pub asks: usize,
    pub answer: String,
    /// Tokens from the first value token of the asked line to the first answer token.
    pub token_distance: usize,
}

/// One rendered piece of the stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    Query { prompt: String, answer: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEvalSample {
    pub params: StreamEvalParams,
    pub values: Vec<u32>,
    pub queries: Vec<Query>,
}

pub fn content_line(key: usize, value: u32) -> String {
    format!("line {key:04}: REGISTER_CONTENT is {value:04}\n")
}

fn query_prompt(key: usize) -> String {
    format!("line {key:04}? REGISTER_CONTENT is ")
}

/// Inverse of [`content_line`].
pub fn parse_line(line: &str) -> Option<(usize, u32)> {
    let rest = line.trim_end_matches('\n').strip_prefix("line ")?;
    let (key, value) = rest.split_once(": REGISTER_CONTENT is ")?;
    Some((key.parse().ok()?, value.parse().ok()?))
}

pub fn gen_streameval(params: &StreamEvalParams, seed: u64) -> Result<StreamEvalSample> {
    if params.distance == 0 || params.lines_per_query == 0 || params.n_queries == 0 {
        return Err(Error::Config(format!("invalid StreamEval layout {params:?}")));
    }
    let n_lines = params.n_lines();
    if n_lines > MAX_LINES {
        return Err(Error::Config(format!("{n_lines} lines exceed four-digit keys")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<u32> = sample_indices(&mut rng, MAX_LINES, n_lines)
        .into_iter()
        .map(|v| v as u32)
        .collect();
    let mut sample = StreamEvalSample {
        params: *params,
        values,
        queries: Vec::with_capacity(params.n_queries),
    };
    let value_offset = "line 0000: REGISTER_CONTENT is ".len();
    let mut value_pos = Vec::with_capacity(n_lines);
    let mut pos = 0;
    for line in 0..n_lines {
        value_pos.push(pos + value_offset);
        pos += LINE_TOKENS;
        if let Some(asks) = sample.query_after(line) {
            let answer_pos = pos + value_offset;
            sample.queries.push(Query {
                after_line: line,
                asks,
                answer: format!("{:04}", sample.values[asks]),
                token_distance: answer_pos - value_pos[asks],
            });
            pos += LINE_TOKENS;
        }
    }
    Ok(sample)
}

impl StreamEvalSample {
    fn query_after(&self, line: usize) -> Option<usize> {
        let p = &self.params;
        (line >= p.first_query_line() && (line - p.first_query_line()) % p.lines_per_query == 0)
            .then(|| line - p.distance)
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut text = String::new();
        let mut q = self.queries.iter().peekable();
        for (line, &value) in self.values.iter().enumerate() {
            text.push_str(&content_line(line, value));
            if let Some(query) = q.next_if(|query| query.after_line == line) {
                out.push(Segment::Text(std::mem::take(&mut text)));
                out.push(Segment::Query {
                    prompt: query_prompt(query.asks),
                    answer: query.answer.clone(),
                });
            }
        }
        if !text.is_empty() {
            out.push(Segment::Text(text));
        }
        out
    }

    /// Whole stream with every query followed by its ground-truth answer.
    pub fn render_with_answers(&self) -> String {
        self.segments()
            .into_iter()
            .map(|s| match s {
                Segment::Text(t) => t,
                Segment::Query { prompt, answer } => format!("{prompt}{answer}\n"),
            })
            .collect()
    }
}

/// Something that can answer a StreamEval query given the stream so far.
pub trait Answerer {
    /// Feed stream text (including ground-truth answers of earlier queries).
    fn feed(&mut self, text: &str) -> Result<()>;
    /// Answer a query whose prompt has not been fed yet. The prompt and
    /// the generated answer must not leak into the stream.
    fn answer(&mut self, prompt: &str) -> Result<String>;
}

/// Exact match after whitespace trim, averaged over all queries.
pub fn score_with(answerer: &mut dyn Answerer, sample: &StreamEvalSample) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for seg in sample.segments() {
        match seg {
            Segment::Text(t) => answerer.feed(&t)?,
            Segment::Query { prompt, answer } => {
                let got = answerer.answer(&prompt)?;
                hits += usize::from(got.trim() == answer.trim());
                total += 1;
                answerer.feed(&format!("{prompt}{answer}\n"))?;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Greedy decoding against a streaming cache; answers are generated on a
/// copy of the cache so the stream only ever contains ground truth.
pub struct CacheAnswerer<'m> {
    model: &'m Model,
    cache: KvCache,
    prefix: Vec<u32>,
}

impl<'m> CacheAnswerer<'m> {
    pub fn new(model: &'m Model, policy: CachePolicy) -> Result<Self> {
        let prefix = crate::model::prepend_sink_tokens(&[], model.cfg());
        let cache = model.new_cache(policy)?;
        Ok(Self { model, cache, prefix })
    }
}

impl Answerer for CacheAnswerer<'_> {
    fn feed(&mut self, text: &str) -> Result<()> {
        let mut tokens = std::mem::take(&mut self.prefix);
        tokens.extend(text.bytes().map(u32::from));
        for t in tokens {
            self.model.decode_step(&mut self.cache, t)?;
        }
        Ok(())
    }

    fn answer(&mut self, prompt: &str) -> Result<String> {
        let mut fork = self.cache.clone();
        let mut logits = Vec::new();
        for t in prompt.bytes() {
            logits = self.model.decode_step(&mut fork, u32::from(t))?;
        }
        let mut out = String::new();
        for _ in 0..MAX_ANSWER_TOKENS {
            let next = greedy(&logits, self.model.cfg().data_vocab());
            if next == u32::from(b'\n') {
                break;
            }
            out.push(char::from(next as u8));
            logits = self.model.decode_step(&mut fork, next)?;
        }
        Ok(out)
    }
}

/// Argmax over the data alphabet (sink ids are never emitted).
fn greedy(logits: &[f32], data_vocab: usize) -> u32 {
    let mut best = 0;
    for (i, &l) in logits[..data_vocab].iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Accuracy of greedy decoding under `policy`.
pub fn score_streameval(model: &Model, policy: CachePolicy, sample: &StreamEvalSample) -> Result<f64> {
    let mut answerer = CacheAnswerer::new(model, policy)?;
    score_with(&mut answerer, sample)
}
