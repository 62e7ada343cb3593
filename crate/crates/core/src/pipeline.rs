//! Aligning records, trees, vocabularies, and graphs into model-ready
//! sentences.

use std::sync::Arc;

use crate::corpus::{EmbeddingTable, SentenceRecord, WordVocab};
use crate::error::{Error, Result};
use crate::model::SentenceInputs;
use crate::parse_tree::{build_ssg, validate_alignment, ParseTree, StructureGraph, TagVocab};
use crate::tensor::Tensor;
use crate::wsg::build_wsg;

/// One sentence with everything a forward pass needs.
#[derive(Debug, Clone)]
pub struct PreparedSentence {
    /// Index of the source record (or input line, for label-free prediction).
    pub record: usize,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub word_tag_ids: Vec<usize>,
    pub ssg: StructureGraph,
    /// Normalized word-similarity adjacency; absent when no embedding table
    /// was supplied (structure-only training).
    pub a_hat: Option<Arc<Vec<f64>>>,
    /// Gold emphasis frequencies; zeros for label-free prediction inputs.
    pub gold_freq: Vec<f64>,
}

impl PreparedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn inputs(&self) -> SentenceInputs<'_> {
        SentenceInputs {
            token_ids: &self.token_ids,
            word_tag_ids: &self.word_tag_ids,
            ssg_node_tags: &self.ssg.node_tags,
            ssg_neighbors: &self.ssg.neighbors,
            ssg_word_alignment: &self.ssg.word_alignment,
            a_hat: self.a_hat.as_ref(),
        }
    }
}

fn prepare_one(
    index: usize,
    tokens: &[String],
    gold_freq: Vec<f64>,
    tree: &ParseTree,
    word_vocab: &WordVocab,
    tag_vocab: &TagVocab,
    table: Option<&EmbeddingTable>,
) -> Result<PreparedSentence> {
    let report = validate_alignment(tree, tokens);
    if !report.ok {
        let detail: Vec<String> = report
            .mismatches
            .iter()
            .take(3)
            .map(|(pos, leaf, token)| {
                format!(
                    "position {pos}: tree has {:?}, sentence has {:?}",
                    leaf.as_deref().unwrap_or("<nothing>"),
                    token.as_deref().unwrap_or("<nothing>")
                )
            })
            .collect();
        return Err(Error::contract(format!(
            "record {index}: tree leaves do not match tokens ({})",
            detail.join("; ")
        )));
    }
    let ssg = build_ssg(tree, tag_vocab);
    let word_tag_ids: Vec<usize> = ssg
        .word_alignment
        .iter()
        .map(|&node| ssg.node_tags[node])
        .collect();
    let a_hat = match table {
        Some(table) => {
            let n = tokens.len();
            let mut data = Vec::with_capacity(n * table.dim);
            for t in tokens {
                data.extend_from_slice(table.lookup(t));
            }
            let vectors = Tensor::new(&[n, table.dim], data)?;
            Some(build_wsg(&vectors)?.a_hat)
        }
        None => None,
    };
    Ok(PreparedSentence {
        record: index,
        tokens: tokens.to_vec(),
        token_ids: word_vocab.ids(tokens),
        word_tag_ids,
        ssg,
        a_hat,
        gold_freq,
    })
}

/// Prepare labeled records against their order-aligned trees.
pub fn prepare_sentences(
    records: &[SentenceRecord],
    trees: &[ParseTree],
    word_vocab: &WordVocab,
    tag_vocab: &TagVocab,
    table: Option<&EmbeddingTable>,
) -> Result<Vec<PreparedSentence>> {
    if records.len() != trees.len() {
        return Err(Error::contract(format!(
            "{} records but {} trees",
            records.len(),
            trees.len()
        )));
    }
    records
        .iter()
        .zip(trees)
        .enumerate()
        .map(|(i, (r, tree))| {
            prepare_one(
                i,
                &r.tokens,
                r.emphasis_freq.clone(),
                tree,
                word_vocab,
                tag_vocab,
                table,
            )
        })
        .collect()
}

/// Prepare label-free token sequences (prediction inputs).
pub fn prepare_token_lists(
    sentences: &[Vec<String>],
    trees: &[ParseTree],
    word_vocab: &WordVocab,
    tag_vocab: &TagVocab,
    table: Option<&EmbeddingTable>,
) -> Result<Vec<PreparedSentence>> {
    if sentences.len() != trees.len() {
        return Err(Error::contract(format!(
            "{} sentences but {} trees",
            sentences.len(),
            trees.len()
        )));
    }
    sentences
        .iter()
        .zip(trees)
        .enumerate()
        .map(|(i, (tokens, tree))| {
            if tokens.is_empty() {
                return Err(Error::contract(format!("sentence {i} has no tokens")));
            }
            prepare_one(
                i,
                tokens,
                vec![0.0; tokens.len()],
                tree,
                word_vocab,
                tag_vocab,
                table,
            )
        })
        .collect()
}

/// Deterministic sentence-level dev split: shuffles sentence indices with the
/// seed and carves off `fraction`, keeping at least one training sentence.
/// Returns (train_indices, dev_indices), each sorted.
pub fn dev_split(count: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut indices: Vec<usize> = (0..count).collect();
    if fraction <= 0.0 || count < 2 {
        return (indices, Vec::new());
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5EED_5147);
    indices.shuffle(&mut rng);
    let dev_len = ((count as f64 * fraction).round() as usize)
        .min(count - 1)
        .max(1);
    let mut dev: Vec<usize> = indices[..dev_len].to_vec();
    let mut train: Vec<usize> = indices[dev_len..].to_vec();
    dev.sort_unstable();
    train.sort_unstable();
    (train, dev)
}
