//! Match-m evaluation: overlap of predicted and gold top-m word sets,
//! normalized by `min(sentence length, m)` and averaged over a dataset.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{forward, Mode, ModelParams};
use crate::pipeline::PreparedSentence;
use crate::tensor::Tape;
use crate::train::parallel_map;

/// How top-set ties in the gold scores are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieMode {
    /// Earliest sentence position wins at the cut boundary, for both gold and
    /// predicted sets. Deterministic; the default everywhere.
    Strict,
    /// Sensitivity reporting only: a prediction counts as matched if *any*
    /// tie-consistent gold set achieves the overlap.
    Optimistic,
}

impl TieMode {
    pub fn parse(s: &str) -> Option<TieMode> {
        match s {
            "strict" => Some(TieMode::Strict),
            "optimistic" => Some(TieMode::Optimistic),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TieMode::Strict => "strict",
            TieMode::Optimistic => "optimistic",
        }
    }
}

/// Indices of the `min(n, m)` largest scores; ties break toward earlier
/// positions. The result is sorted by position.
pub fn top_m(scores: &[f64], m: usize) -> Vec<usize> {
    let k = scores.len().min(m);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// `|top_m(pred) n top_m(gold)| / min(n, m)` under the strict tie rule.
pub fn match_m(pred: &[f64], gold: &[f64], m: usize) -> Result<f64> {
    match_m_with_mode(pred, gold, m, TieMode::Strict)
}

/// Match-m under either tie mode.
pub fn match_m_with_mode(pred: &[f64], gold: &[f64], m: usize, mode: TieMode) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::contract(format!(
            "prediction length {} != gold length {}",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::contract("match_m on an empty sentence"));
    }
    if m == 0 {
        return Err(Error::contract("match_m needs m >= 1"));
    }
    let k = pred.len().min(m);
    let pred_set = top_m(pred, m);
    let overlap = match mode {
        TieMode::Strict => {
            let gold_set = top_m(gold, m);
            pred_set.iter().filter(|i| gold_set.contains(i)).count()
        }
        TieMode::Optimistic => {
            // The k-th gold value splits the candidates into "always in" and
            // "tied at the boundary"; fill the tie slots to favor the
            // prediction.
            let mut sorted: Vec<f64> = gold.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let cutoff = sorted[k - 1];
            let sure: usize = pred_set.iter().filter(|&&i| gold[i] > cutoff).count();
            let tied: usize = pred_set.iter().filter(|&&i| gold[i] == cutoff).count();
            let sure_total = gold.iter().filter(|&&g| g > cutoff).count();
            let slots = k - sure_total;
            sure + tied.min(slots)
        }
    };
    Ok(overlap as f64 / k as f64)
}

/// Dataset-level Match-1..4 plus their mean and the per-sentence breakdown.
#[derive(Debug, Clone)]
pub struct MatchReport {
    pub match_scores: [f64; 4],
    pub average: f64,
    pub per_sentence: Vec<[f64; 4]>,
}

impl MatchReport {
    pub fn from_per_sentence(per_sentence: Vec<[f64; 4]>) -> MatchReport {
        let n = per_sentence.len().max(1) as f64;
        let mut match_scores = [0.0; 4];
        for row in &per_sentence {
            for (acc, v) in match_scores.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for acc in match_scores.iter_mut() {
            *acc /= n;
        }
        let average = match_scores.iter().sum::<f64>() / 4.0;
        MatchReport {
            match_scores,
            average,
            per_sentence,
        }
    }

    /// The tab-separated report line: `variant m1 m2 m3 m4 average`.
    pub fn report_line(&self, variant: &str) -> String {
        format!(
            "{variant}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.match_scores[0], self.match_scores[1], self.match_scores[2],
            self.match_scores[3], self.average
        )
    }
}

/// Score `pred_emph = p(B) + p(I)` against gold frequencies per sentence.
pub fn score_sentence(pred: &[f64], gold: &[f64], mode: TieMode) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (m, slot) in out.iter_mut().enumerate() {
        *slot = match_m_with_mode(pred, gold, m + 1, mode)?;
    }
    Ok(out)
}

/// Eval-mode forward over every sentence, parallelized across up to `threads`
/// workers; aggregation order is fixed by sentence index, so the report is
/// identical for any thread count.
pub fn evaluate(
    params: &ModelParams,
    sentences: &[&PreparedSentence],
    mode: TieMode,
    threads: usize,
) -> Result<MatchReport> {
    let snapshot = params.snapshot();
    let jobs: Vec<&PreparedSentence> = sentences.to_vec();
    let rows: Vec<Result<[f64; 4]>> = parallel_map(jobs, threads, |_, sentence| {
        let local = ModelParams::attach(&snapshot, false)?;
        let tape = Tape::no_grad();
        let out = forward(&tape, &sentence.inputs(), &local, &mut Mode::Eval)?;
        score_sentence(&out.emphasis_prob(), &sentence.gold_freq, mode)
    });
    let per_sentence: Vec<[f64; 4]> = rows.into_iter().collect::<Result<_>>()?;
    Ok(MatchReport::from_per_sentence(per_sentence))
}

// ── case tables ─────────────────────────────────────────────────────

/// One word of a case-study table.
#[derive(Debug, Clone)]
pub struct CaseRow {
    pub token: String,
    pub gold: f64,
    pub gold_rank: String,
    pub pred: f64,
    pub pred_rank: String,
}

/// Per-word gold and predicted probabilities with rankings; ties render as
/// `lo/hi` over the shared rank range.
#[derive(Debug, Clone)]
pub struct CaseTable {
    pub rows: Vec<CaseRow>,
}

/// Rank string per score: strictly greater scores push the rank down, equal
/// scores share a `lo/hi` range.
pub fn rank_strings(scores: &[f64]) -> Vec<String> {
    scores
        .iter()
        .map(|&s| {
            let greater = scores.iter().filter(|&&o| o > s).count();
            let equal = scores.iter().filter(|&&o| o == s).count();
            if equal <= 1 {
                format!("{}", greater + 1)
            } else {
                format!("{}/{}", greater + 1, greater + equal)
            }
        })
        .collect()
}

/// Run the model on one prepared sentence and build its case table.
pub fn case_table(params: &ModelParams, sentence: &PreparedSentence) -> Result<CaseTable> {
    let tape = Tape::no_grad();
    let out = forward(&tape, &sentence.inputs(), params, &mut Mode::Eval)?;
    let pred = out.emphasis_prob();
    Ok(build_case_table(
        &sentence.tokens,
        &sentence.gold_freq,
        &pred,
    ))
}

/// Assemble a case table from already-computed scores.
pub fn build_case_table(tokens: &[String], gold: &[f64], pred: &[f64]) -> CaseTable {
    let gold_ranks = rank_strings(gold);
    let pred_ranks = rank_strings(pred);
    let rows = tokens
        .iter()
        .enumerate()
        .map(|(i, token)| CaseRow {
            token: token.clone(),
            gold: gold[i],
            gold_rank: gold_ranks[i].clone(),
            pred: pred[i],
            pred_rank: pred_ranks[i].clone(),
        })
        .collect();
    CaseTable { rows }
}

impl fmt::Display for CaseTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "token\tgold\tpredicted")?;
        for row in &self.rows {
            writeln!(
                f,
                "{}\t{:.3}({})\t{:.3}({})",
                row.token, row.gold, row.gold_rank, row.pred, row.pred_rank
            )?;
        }
        Ok(())
    }
}
