//! The multi-annotator emphasis dataset, the static embedding table, and the
//! word vocabulary built from them.
//!
//! File formats:
//! - Emphasis file: UTF-8, blocks separated by one blank line. Each block is an
//!   optional `#id <string>` line followed by one row per word:
//!   `token\tL1\t...\tL9` with each label in {B, I, O}.
//! - Embedding file: one entry per line, `token v1 v2 ... v_d`, single-space
//!   separated, no header.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ANNOTATORS: usize = 9;

/// One of the three per-word emphasis classes. The class index doubles as the
/// column of the model's 3-way output distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmphasisLabel {
    /// Beginning word of an emphasized span.
    B,
    /// Interior word of an emphasized span.
    I,
    /// Not emphasized.
    O,
}

impl EmphasisLabel {
    pub fn parse(s: &str) -> Option<EmphasisLabel> {
        match s {
            "B" => Some(EmphasisLabel::B),
            "I" => Some(EmphasisLabel::I),
            "O" => Some(EmphasisLabel::O),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmphasisLabel::B => "B",
            EmphasisLabel::I => "I",
            EmphasisLabel::O => "O",
        }
    }

    /// Column index in the model's per-word class distribution.
    pub fn class_index(self) -> usize {
        match self {
            EmphasisLabel::B => 0,
            EmphasisLabel::I => 1,
            EmphasisLabel::O => 2,
        }
    }

    pub fn emphasized(self) -> bool {
        !matches!(self, EmphasisLabel::O)
    }
}

/// One sentence with its nine annotations and derived per-word emphasis
/// frequencies.
#[derive(Debug, Clone)]
pub struct SentenceRecord {
    /// Explicit `#id` from the file, if present.
    pub id: Option<String>,
    pub tokens: Vec<String>,
    /// Exactly nine label sequences, each the length of `tokens`.
    pub annotations: Vec<Vec<EmphasisLabel>>,
    /// Per word: fraction of annotators labeling it B or I.
    pub emphasis_freq: Vec<f64>,
}

impl SentenceRecord {
    pub fn new(
        id: Option<String>,
        tokens: Vec<String>,
        annotations: Vec<Vec<EmphasisLabel>>,
    ) -> Result<SentenceRecord> {
        if tokens.is_empty() {
            return Err(Error::contract("sentence record with no tokens"));
        }
        if annotations.len() != ANNOTATORS {
            return Err(Error::contract(format!(
                "expected {ANNOTATORS} annotations, got {}",
                annotations.len()
            )));
        }
        for a in &annotations {
            if a.len() != tokens.len() {
                return Err(Error::contract(format!(
                    "annotation length {} != token count {}",
                    a.len(),
                    tokens.len()
                )));
            }
        }
        let emphasis_freq = aggregate_emphasis(&annotations)?;
        Ok(SentenceRecord {
            id,
            tokens,
            annotations,
            emphasis_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Position-wise fraction of annotations marking the word B or I.
pub fn aggregate_emphasis(annotations: &[Vec<EmphasisLabel>]) -> Result<Vec<f64>> {
    let n = match annotations.first() {
        Some(a) => a.len(),
        None => return Err(Error::contract("no annotations to aggregate")),
    };
    if annotations.iter().any(|a| a.len() != n) {
        return Err(Error::contract("annotation lengths disagree"));
    }
    let total = annotations.len() as f64;
    let mut freq = vec![0.0; n];
    for a in annotations {
        for (f, &l) in freq.iter_mut().zip(a) {
            if l.emphasized() {
                *f += 1.0;
            }
        }
    }
    for f in freq.iter_mut() {
        *f /= total;
    }
    Ok(freq)
}

/// A parsed emphasis file: records plus non-fatal findings.
#[derive(Debug)]
pub struct LoadedCorpus {
    pub records: Vec<SentenceRecord>,
    /// BIO violations (an I with no earlier B in the same annotation) and
    /// similar accepted-but-suspect content, with line numbers.
    pub warnings: Vec<String>,
}

/// Parse the blank-line-separated block format described in the module docs.
pub fn parse_emphasis_file(text: &str) -> Result<LoadedCorpus> {
    let mut records = Vec::new();
    let mut warnings = Vec::new();

    struct Block {
        id: Option<String>,
        first_line: usize,
        rows: Vec<(usize, String, Vec<EmphasisLabel>)>,
    }

    let mut block: Option<Block> = None;
    let mut flush = |block: &mut Option<Block>, warnings: &mut Vec<String>| -> Result<()> {
        if let Some(b) = block.take() {
            if b.rows.is_empty() {
                return Ok(());
            }
            let tokens: Vec<String> = b.rows.iter().map(|(_, t, _)| t.clone()).collect();
            let mut annotations = vec![Vec::with_capacity(tokens.len()); ANNOTATORS];
            for (_, _, labels) in &b.rows {
                for (ann, &l) in annotations.iter_mut().zip(labels) {
                    ann.push(l);
                }
            }
            for (a_idx, ann) in annotations.iter().enumerate() {
                let mut seen_b = false;
                for (pos, &l) in ann.iter().enumerate() {
                    match l {
                        EmphasisLabel::B => seen_b = true,
                        EmphasisLabel::I if !seen_b => warnings.push(format!(
                            "line {}: annotator {} has I at position {} with no earlier B; \
                             treated as emphasized",
                            b.rows[pos].0,
                            a_idx + 1,
                            pos + 1
                        )),
                        _ => {}
                    }
                }
            }
            let record =
                SentenceRecord::new(b.id, tokens, annotations).map_err(|e| Error::Parse {
                    line: b.first_line,
                    message: e.to_string(),
                })?;
            records.push(record);
        }
        Ok(())
    };

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut block, &mut warnings)?;
            continue;
        }
        if let Some(rest) = line.strip_prefix("#id") {
            let id = rest.trim().to_string();
            if block.as_ref().is_some_and(|b| !b.rows.is_empty()) {
                return Err(Error::Parse {
                    line: lineno,
                    message: "#id must be the first line of a block".into(),
                });
            }
            block = Some(Block {
                id: Some(id),
                first_line: lineno,
                rows: Vec::new(),
            });
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 1 + ANNOTATORS {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "expected token + {ANNOTATORS} labels ({} columns), got {}",
                    1 + ANNOTATORS,
                    fields.len()
                ),
            });
        }
        let token = fields[0].to_string();
        if token.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty token".into(),
            });
        }
        let mut labels = Vec::with_capacity(ANNOTATORS);
        for f in &fields[1..] {
            match EmphasisLabel::parse(f) {
                Some(l) => labels.push(l),
                None => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("unknown label symbol {f:?}"),
                    })
                }
            }
        }
        match block.as_mut() {
            Some(b) => b.rows.push((lineno, token, labels)),
            None => {
                block = Some(Block {
                    id: None,
                    first_line: lineno,
                    rows: vec![(lineno, token, labels)],
                })
            }
        }
    }
    flush(&mut block, &mut warnings)?;
    Ok(LoadedCorpus { records, warnings })
}

/// Render records back into the canonical block format.
pub fn serialize_emphasis_file(records: &[SentenceRecord]) -> String {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if let Some(id) = &r.id {
            out.push_str("#id ");
            out.push_str(id);
            out.push('\n');
        }
        for (w, token) in r.tokens.iter().enumerate() {
            out.push_str(token);
            for ann in &r.annotations {
                out.push('\t');
                out.push_str(ann[w].as_str());
            }
            out.push('\n');
        }
    }
    out
}

/// One (sentence, annotator) training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSample {
    pub sentence: usize,
    pub annotator: usize,
}

/// Expand records into their 9-per-sentence training samples.
pub fn expand_samples(sentence_indices: &[usize]) -> Vec<TrainSample> {
    let mut out = Vec::with_capacity(sentence_indices.len() * ANNOTATORS);
    for &sentence in sentence_indices {
        for annotator in 0..ANNOTATORS {
            out.push(TrainSample {
                sentence,
                annotator,
            });
        }
    }
    out
}

// ── embeddings ──────────────────────────────────────────────────────

/// Static token -> vector table with a mean-vector fallback for unknowns.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    entries: HashMap<String, Vec<f64>>,
    oov_vector: Vec<f64>,
    pub duplicates: usize,
}

impl EmbeddingTable {
    pub fn from_entries(dim: usize, entries: HashMap<String, Vec<f64>>) -> Result<EmbeddingTable> {
        if entries.is_empty() {
            return Err(Error::contract("embedding table with no entries"));
        }
        let mut oov = vec![0.0; dim];
        for v in entries.values() {
            if v.len() != dim {
                return Err(Error::contract(format!(
                    "embedding vector length {} != dimension {dim}",
                    v.len()
                )));
            }
            for (o, x) in oov.iter_mut().zip(v) {
                *o += x;
            }
        }
        let count = entries.len() as f64;
        for o in oov.iter_mut() {
            *o /= count;
        }
        Ok(EmbeddingTable {
            dim,
            entries,
            oov_vector: oov,
            duplicates: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn oov_vector(&self) -> &[f64] {
        &self.oov_vector
    }

    /// Lookup chain: exact token, lowercased token, then the OOV vector.
    pub fn lookup(&self, token: &str) -> &[f64] {
        if let Some(v) = self.entries.get(token) {
            return v;
        }
        let lower = token.to_lowercase();
        if let Some(v) = self.entries.get(&lower) {
            return v;
        }
        &self.oov_vector
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token) || self.entries.contains_key(&token.to_lowercase())
    }
}

/// Load a text embedding file: `token v1 ... v_d` per line.
///
/// Duplicate tokens keep the first vector; the count is reported on the table.
pub fn load_embeddings(text: &str, expected_dim: usize) -> Result<EmbeddingTable> {
    let mut entries: HashMap<String, Vec<f64>> = HashMap::new();
    let mut duplicates = 0;
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or("");
        if token.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "missing token".into(),
            });
        }
        let mut vector = Vec::with_capacity(expected_dim);
        for f in fields {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad float {f:?}"),
            })?;
            vector.push(v);
        }
        if vector.len() != expected_dim {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "expected {expected_dim} values, got {}",
                    vector.len()
                ),
            });
        }
        if entries.contains_key(token) {
            duplicates += 1;
        } else {
            entries.insert(token.to_string(), vector);
        }
    }
    let mut table = EmbeddingTable::from_entries(expected_dim, entries)?;
    table.duplicates = duplicates;
    Ok(table)
}

/// Static per-word vectors for one sentence, via [`EmbeddingTable::lookup`].
pub fn lookup_sequence(record: &SentenceRecord, table: &EmbeddingTable) -> Result<Tensor> {
    if record.tokens.is_empty() {
        return Err(Error::contract("lookup_sequence on empty record"));
    }
    let mut data = Vec::with_capacity(record.len() * table.dim);
    for token in &record.tokens {
        data.extend_from_slice(table.lookup(token));
    }
    Tensor::new(&[record.len(), table.dim], data)
}

// ── word vocabulary ─────────────────────────────────────────────────

/// Index 0 is the reserved out-of-vocabulary row.
pub const OOV_ID: usize = 0;

/// Trainable-vocabulary index: maps dataset tokens to embedding-matrix rows.
#[derive(Debug, Clone)]
pub struct WordVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordVocab {
    /// Build from dataset tokens, in first-appearance order, with the OOV row
    /// first. Returns the vocabulary and the initial embedding matrix rows
    /// (row 0 = the table's OOV vector).
    pub fn build<'a>(
        token_streams: impl IntoIterator<Item = &'a SentenceRecord>,
        table: &EmbeddingTable,
    ) -> (WordVocab, Vec<f64>) {
        let mut tokens = vec![String::new()];
        let mut index = HashMap::new();
        let mut init = table.oov_vector().to_vec();
        for record in token_streams {
            for token in &record.tokens {
                if !index.contains_key(token.as_str()) {
                    index.insert(token.clone(), tokens.len());
                    tokens.push(token.clone());
                    init.extend_from_slice(table.lookup(token));
                }
            }
        }
        (WordVocab { tokens, index }, init)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<WordVocab> {
        if tokens.first().map(String::as_str) != Some("") {
            return Err(Error::contract("word vocabulary must reserve row 0"));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(1) {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(WordVocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Exact form, then lowercase, then OOV.
    pub fn id(&self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        match self.index.get(&token.to_lowercase()) {
            Some(&i) => i,
            None => OOV_ID,
        }
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

// ── dataset statistic ───────────────────────────────────────────────

/// Result of the similar-word co-emphasis scan.
#[derive(Debug, Clone, Copy)]
pub struct CoEmphasisStat {
    /// Fraction of sentences where the nearest embedding neighbor of the most
    /// emphasized word is itself emphasized above the sentence median.
    pub fraction: f64,
    pub sentences: usize,
    pub hits: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// For each sentence: take the top-frequency emphasized word A (earliest on
/// ties) and its nearest embedding neighbor B within the sentence; count the
/// sentence as a hit when B's frequency strictly exceeds the sentence's median
/// word frequency. Sentences where B is undefined (single word, or A has zero
/// frequency) count as misses.
pub fn co_emphasis_statistic(records: &[SentenceRecord], table: &EmbeddingTable) -> CoEmphasisStat {
    let mut hits = 0;
    for r in records {
        if r.len() < 2 {
            continue;
        }
        let mut a_idx = 0;
        for (i, &f) in r.emphasis_freq.iter().enumerate() {
            if f > r.emphasis_freq[a_idx] {
                a_idx = i;
            }
        }
        if r.emphasis_freq[a_idx] == 0.0 {
            continue;
        }
        let a_vec = table.lookup(&r.tokens[a_idx]);
        let mut b_idx = None;
        let mut best = f64::NEG_INFINITY;
        for (i, token) in r.tokens.iter().enumerate() {
            if i == a_idx {
                continue;
            }
            let sim = cosine(a_vec, table.lookup(token));
            if sim > best {
                best = sim;
                b_idx = Some(i);
            }
        }
        if let Some(b) = b_idx {
            if r.emphasis_freq[b] > median(&r.emphasis_freq) {
                hits += 1;
            }
        }
    }
    CoEmphasisStat {
        fraction: if records.is_empty() {
            0.0
        } else {
            hits as f64 / records.len() as f64
        },
        sentences: records.len(),
        hits,
    }
}
