//! Adam optimization, batching, dropout, the training loop, and tag-embedding
//! pretraining.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{SentenceRecord, TrainSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MatchReport, TieMode};
use crate::model::{
    forward, nll_loss_weighted, Mode, ModelDims, ModelParams, ParamsSnapshot, Variant,
};
use crate::pipeline::PreparedSentence;
use crate::tensor::{Tape, Tensor};

/// Everything a training run needs to be reproducible.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub dims: ModelDims,
    pub variant: Variant,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Fraction of training sentences carved out for checkpoint selection;
    /// zero trains on everything and keeps the last epoch.
    pub dev_fraction: f64,
    pub freeze_embeddings: bool,
    /// Worker threads for per-sentence forward/backward; 0 = all cores.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            epochs: 100,
            dropout: 0.5,
            dims: ModelDims::glove(),
            variant: Variant::Full,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            dev_fraction: 0.1,
            freeze_embeddings: false,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::contract("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract("dropout must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::contract("dev fraction must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::contract("Adam betas must be in [0, 1)"));
        }
        if self.eps_adam <= 0.0 {
            return Err(Error::contract("Adam epsilon must be positive"));
        }
        self.dims.validate()
    }

    pub fn worker_threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        }
    }
}

// ── Adam ────────────────────────────────────────────────────────────

/// First/second moment buffers per parameter, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> AdamState {
        AdamState {
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction over named parameters, reading each
/// tensor's accumulated gradient. A missing gradient counts as zero. Any NaN
/// gradient aborts before touching parameters, naming the offender.
pub fn adam_step(
    params: &[(String, Tensor)],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "Adam state tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    let grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, t)| t.grad()).collect();
    for ((name, _), grad) in params.iter().zip(&grads) {
        if let Some(g) = grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let correction1 = 1.0 - config.beta1.powi(t);
    let correction2 = 1.0 - config.beta2.powi(t);
    for (idx, (_, tensor)) in params.iter().enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let zero;
        let g = match &grads[idx] {
            Some(g) => g.as_slice(),
            None => {
                zero = vec![0.0; tensor.numel()];
                zero.as_slice()
            }
        };
        tensor.update_data(|data| {
            for i in 0..data.len() {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                data[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps_adam);
            }
        });
    }
    Ok(())
}

// ── batching ────────────────────────────────────────────────────────

/// Samples of one sentence that share a single forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleGroup {
    pub sentence: usize,
    pub annotators: Vec<usize>,
}

/// A batch of at most `batch_size` samples, grouped by sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub groups: Vec<SampleGroup>,
}

impl Batch {
    pub fn sample_count(&self) -> usize {
        self.groups.iter().map(|g| g.annotators.len()).sum()
    }
}

/// Shuffle samples with the given generator and chunk them; within a chunk,
/// samples of the same sentence are grouped (first-appearance order) so each
/// sentence's graph encodings are computed once per batch.
pub fn make_batches(
    samples: &[TrainSample],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Batch> {
    let mut order: Vec<TrainSample> = samples.to_vec();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let mut groups: Vec<SampleGroup> = Vec::new();
            for s in chunk {
                match groups.iter_mut().find(|g| g.sentence == s.sentence) {
                    Some(g) => g.annotators.push(s.annotator),
                    None => groups.push(SampleGroup {
                        sentence: s.sentence,
                        annotators: vec![s.annotator],
                    }),
                }
            }
            Batch { groups }
        })
        .collect()
}

// ── dropout ─────────────────────────────────────────────────────────

/// Inverted-dropout mask: in training mode each entry is 0 with probability
/// `rate` and `1/(1-rate)` otherwise, so the expectation is the identity; in
/// eval mode (or at rate 0) the mask is all ones.
pub fn dropout_mask(
    shape: &[usize],
    rate: f64,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Tensor::ones(shape);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
        .collect();
    Tensor::new(shape, data)
}

// ── worker pool ─────────────────────────────────────────────────────

/// Map a function over items on up to `threads` scoped workers, preserving
/// input order in the output. Falls back to inline execution for one thread
/// or one item.
pub(crate) fn parallel_map<I, R, F>(items: Vec<I>, threads: usize, f: F) -> Vec<R>
where
    I: Send,
    R: Send,
    F: Fn(usize, I) -> R + Sync,
{
    let n = items.len();
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 || n <= 1 {
        return items
            .into_iter()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect();
    }
    let work: Vec<std::sync::Mutex<Option<I>>> = items
        .into_iter()
        .map(|i| std::sync::Mutex::new(Some(i)))
        .collect();
    let counter = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let slots: Vec<std::sync::Mutex<&mut Option<R>>> =
        results.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let idx = counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if idx >= n {
                    break;
                }
                let item = work[idx].lock().unwrap().take().unwrap();
                let out = f(idx, item);
                **slots[idx].lock().unwrap() = Some(out);
            });
        }
    });
    drop(slots);
    results.into_iter().map(|r| r.unwrap()).collect()
}

// ── training loop ───────────────────────────────────────────────────

/// One metrics-log line.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub train_loss: f64,
    /// Dev Match report when a dev split exists.
    pub dev: Option<MatchReport>,
}

impl EpochMetrics {
    /// Tab-separated log line: epoch, train loss, dev Match-1..4, dev average
    /// (`NA` columns without a dev split).
    pub fn log_line(&self) -> String {
        match &self.dev {
            Some(d) => format!(
                "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                self.epoch,
                self.train_loss,
                d.match_scores[0],
                d.match_scores[1],
                d.match_scores[2],
                d.match_scores[3],
                d.average
            ),
            None => format!(
                "{}\t{:.6}\tNA\tNA\tNA\tNA\tNA",
                self.epoch, self.train_loss
            ),
        }
    }
}

/// What a finished (or aborted) run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    /// The selected parameters: best dev average when a dev split exists,
    /// last epoch otherwise.
    pub model: ModelParams,
    pub log: Vec<EpochMetrics>,
    /// Epoch the returned model comes from (1-based; 0 = initialization).
    pub selected_epoch: usize,
    /// Set when training stopped early (non-finite loss); the model is the
    /// last finite-state checkpoint.
    pub aborted: Option<String>,
    /// Gold-label probabilities that hit the clamp floor, for reporting.
    pub clamped_probs: usize,
}

struct GroupResult {
    loss_sum: f64,
    clamped: usize,
    grads: Vec<Vec<f64>>,
}

/// Per-word label multiplicities over the group's annotators, row-major n x 3.
fn label_counts(record: &SentenceRecord, annotators: &[usize]) -> Vec<f64> {
    let n = record.len();
    let mut counts = vec![0.0; n * 3];
    for &a in annotators {
        for (i, label) in record.annotations[a].iter().enumerate() {
            counts[i * 3 + label.class_index()] += 1.0;
        }
    }
    counts
}

fn run_group(
    snapshot: &ParamsSnapshot,
    sentence: &PreparedSentence,
    record: &SentenceRecord,
    annotators: &[usize],
    trainable_names: &[String],
    dropout: f64,
    mut rng: ChaCha8Rng,
) -> Result<GroupResult> {
    let params = ModelParams::attach(snapshot, true)?;
    let tape = Tape::new();
    let mut mode = Mode::Train {
        dropout,
        rng: &mut rng,
    };
    let out = forward(&tape, &sentence.inputs(), &params, &mut mode)?;
    let counts = label_counts(record, annotators);
    let (loss, clamped) = nll_loss_weighted(&tape, &out.p, &counts)?;
    tape.backward(&loss)?;
    let by_name: std::collections::HashMap<String, Tensor> =
        params.named_tensors().into_iter().collect();
    let grads = trainable_names
        .iter()
        .map(|name| {
            let t = &by_name[name];
            t.grad().unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    Ok(GroupResult {
        loss_sum: loss.item(),
        clamped,
        grads,
    })
}

/// Train `model` on the given sentence split.
///
/// `records` and `prepared` are aligned by index; `train_sentences` and
/// `dev_sentences` index into them. Per-sentence forward/backward passes run
/// on up to `config.threads` workers; gradients are combined in slot order, so
/// results are identical for any thread count. The whole run is a pure
/// function of (model initialization, data, config).
pub fn train_loop(
    records: &[SentenceRecord],
    prepared: &[PreparedSentence],
    train_sentences: &[usize],
    dev_sentences: &[usize],
    model: ModelParams,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_sentences.is_empty() {
        return Err(Error::contract("no training sentences"));
    }
    let samples = crate::corpus::expand_samples(train_sentences);
    let threads = config.worker_threads();

    let named = model.named_tensors();
    let trainable: Vec<(String, Tensor)> = named
        .into_iter()
        .filter(|(name, _)| !(config.freeze_embeddings && name == "word_embed"))
        .collect();
    let trainable_names: Vec<String> = trainable.iter().map(|(n, _)| n.clone()).collect();
    let mut adam = AdamState::new(&trainable);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(u64::MAX);

    let dev_refs: Vec<&PreparedSentence> = dev_sentences.iter().map(|&i| &prepared[i]).collect();

    let mut log: Vec<EpochMetrics> = Vec::new();
    let mut clamped_total = 0usize;
    let mut best: Option<(f64, usize, ParamsSnapshot)> = None;
    let mut batch_counter: u64 = 0;

    for epoch in 1..=config.epochs {
        let batches = make_batches(&samples, config.batch_size, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_samples = 0usize;
        for batch in &batches {
            let snapshot = model.snapshot();
            let jobs: Vec<(SampleGroup, ChaCha8Rng)> = batch
                .groups
                .iter()
                .enumerate()
                .map(|(slot, group)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream((batch_counter << 16) | slot as u64);
                    (group.clone(), rng)
                })
                .collect();
            batch_counter += 1;
            let results = parallel_map(jobs, threads, |_, (group, rng)| {
                run_group(
                    &snapshot,
                    &prepared[group.sentence],
                    &records[group.sentence],
                    &group.annotators,
                    &trainable_names,
                    config.dropout,
                    rng,
                )
            });

            let batch_samples = batch.sample_count();
            let scale = 1.0 / batch_samples as f64;
            let mut batch_loss = 0.0;
            let mut accum: Vec<Vec<f64>> = trainable
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect();
            for result in results {
                let r = result?;
                batch_loss += r.loss_sum;
                clamped_total += r.clamped;
                for (acc, g) in accum.iter_mut().zip(&r.grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * scale;
                    }
                }
            }
            if !batch_loss.is_finite() {
                let selected_epoch = epoch - 1;
                return Ok(TrainOutcome {
                    model,
                    log,
                    selected_epoch,
                    aborted: Some(format!(
                        "non-finite loss in epoch {epoch}; kept the last finite parameters"
                    )),
                    clamped_probs: clamped_total,
                });
            }
            epoch_loss += batch_loss;
            epoch_samples += batch_samples;
            for ((_, tensor), acc) in trainable.iter().zip(&accum) {
                tensor.accumulate_grad(acc);
            }
            adam_step(&trainable, &mut adam, config)?;
            for (_, tensor) in &trainable {
                tensor.zero_grad();
            }
        }

        let dev = if dev_refs.is_empty() {
            None
        } else {
            Some(evaluate(&model, &dev_refs, TieMode::Strict, threads)?)
        };
        if let Some(d) = &dev {
            let better = match &best {
                Some((score, _, _)) => d.average > *score,
                None => true,
            };
            if better {
                best = Some((d.average, epoch, model.snapshot()));
            }
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: epoch_loss / epoch_samples.max(1) as f64,
            dev,
        };
        progress(&metrics);
        log.push(metrics);
    }

    let (model, selected_epoch) = match best {
        Some((_, epoch, snapshot)) => (ModelParams::attach(&snapshot, true)?, epoch),
        None => {
            let epochs = config.epochs;
            (model, epochs)
        }
    };
    Ok(TrainOutcome {
        model,
        log,
        selected_epoch,
        aborted: None,
        clamped_probs: clamped_total,
    })
}

/// Train the structure-graph-only classifier and hand back its learned tag
/// embedding matrix (`|T| x d2`) for initializing the full model, plus the
/// run's metrics log.
pub fn pretrain_ssg(
    records: &[SentenceRecord],
    prepared: &[PreparedSentence],
    train_sentences: &[usize],
    dev_sentences: &[usize],
    tag_len: usize,
    config: &TrainConfig,
    progress: impl FnMut(&EpochMetrics),
) -> Result<(Tensor, Vec<EpochMetrics>)> {
    let mut cfg = config.clone();
    cfg.variant = Variant::SsgOnly;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // The structure-only classifier never reads word embeddings; a single OOV
    // row satisfies the layout.
    let word_init = vec![0.0; cfg.dims.d1];
    let model = ModelParams::init(&cfg.dims, Variant::SsgOnly, word_init, tag_len, &mut rng)?;
    if cfg.epochs == 0 {
        let tag_embed = model.tag_embed.clone();
        return Ok((tag_embed, Vec::new()));
    }
    let outcome = train_loop(
        records,
        prepared,
        train_sentences,
        dev_sentences,
        model,
        &cfg,
        progress,
    )?;
    Ok((outcome.model.tag_embed.clone(), outcome.log))
}
