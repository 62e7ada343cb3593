//! The three-branch network: sequence encoder, word-similarity GCN, and
//! structure-graph attention, joined by a small classification head.

pub mod attention;
pub mod gcn;
pub mod gru;

pub use attention::{graph_attention_layer, AttnLayer};
pub use gcn::{gcn_apply, gcn_gated_layer, GcnLayer};
pub use gru::{encode_sequence, gru_cell, GruDirection, GruLayer};

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::EmphasisLabel;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Probabilities below this floor are clamped before the log in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Widths and layer counts for one embedding preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    /// Word embedding width (also the WSG node width).
    pub d1: usize,
    /// Tag embedding width.
    pub d2: usize,
    /// GRU hidden size per direction.
    pub hidden: usize,
    /// Structure-graph node state width.
    pub d_s: usize,
    /// Hidden width of the classification head.
    pub head_hidden: usize,
    pub gru_layers: usize,
    pub graph_layers: usize,
    pub leaky_slope: f64,
}

impl ModelDims {
    /// The 300-d static-embedding preset.
    pub fn glove() -> ModelDims {
        ModelDims {
            d1: 300,
            d2: 50,
            hidden: 512,
            d_s: 300,
            head_hidden: 256,
            gru_layers: 2,
            graph_layers: 2,
            leaky_slope: 0.2,
        }
    }

    /// The 2048-d contextual-vector preset (vectors still arrive as a static
    /// table; no encoder fine-tuning happens here).
    pub fn elmo() -> ModelDims {
        ModelDims {
            d1: 2048,
            d2: 50,
            hidden: 1024,
            d_s: 512,
            head_hidden: 256,
            gru_layers: 2,
            graph_layers: 2,
            leaky_slope: 0.2,
        }
    }

    pub fn encoder_width(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d1,
            self.d2,
            self.hidden,
            self.d_s,
            self.head_hidden,
            self.gru_layers,
            self.graph_layers,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::contract("model dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::contract("leaky slope must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Which branches take part in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoWsg,
    NoSsg,
    NoBoth,
    /// Structure-graph branch alone; used to pretrain tag embeddings.
    SsgOnly,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "full" => Some(Variant::Full),
            "no_wsg" => Some(Variant::NoWsg),
            "no_ssg" => Some(Variant::NoSsg),
            "no_both" => Some(Variant::NoBoth),
            "ssg_only" => Some(Variant::SsgOnly),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoWsg => "no_wsg",
            Variant::NoSsg => "no_ssg",
            Variant::NoBoth => "no_both",
            Variant::SsgOnly => "ssg_only",
        }
    }

    /// The four reportable ablation variants.
    pub fn reportable() -> [Variant; 4] {
        [Variant::Full, Variant::NoWsg, Variant::NoSsg, Variant::NoBoth]
    }

    pub fn uses_encoder(self) -> bool {
        !matches!(self, Variant::SsgOnly)
    }

    pub fn uses_wsg(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSsg)
    }

    pub fn uses_ssg(self) -> bool {
        matches!(self, Variant::Full | Variant::NoWsg | Variant::SsgOnly)
    }
}

/// Head input width for a variant: `[h, v_L, w_L]` segments in that order,
/// with absent branches dropped.
pub fn head_input_dim(dims: &ModelDims, variant: Variant) -> usize {
    let mut width = 0;
    if variant.uses_encoder() {
        width += dims.encoder_width();
    }
    if variant.uses_ssg() {
        width += dims.d_s;
    }
    if variant.uses_wsg() {
        width += dims.d1;
    }
    width
}

/// Two-affine classification head ending in three logits.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Every trainable tensor of the model. All branches are always allocated;
/// `variant` decides which ones the forward pass consumes (unused branches
/// keep their initialization and receive zero gradient).
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub variant: Variant,
    pub word_embed: Tensor,
    pub tag_embed: Tensor,
    pub gru: Vec<GruLayer>,
    pub gcn: Vec<GcnLayer>,
    pub attn: Vec<AttnLayer>,
    pub head: HeadParams,
}

/// Cross-thread snapshot of the parameter data (zero-copy `Arc` clones).
#[derive(Debug, Clone)]
pub struct ParamsSnapshot {
    pub dims: ModelDims,
    pub variant: Variant,
    entries: Vec<(String, Vec<usize>, Arc<Vec<f64>>)>,
}

impl ParamsSnapshot {
    /// Assemble a snapshot from externally stored tensors (checkpoint loads).
    /// Entries must arrive in the model's fixed construction order.
    pub fn from_entries(
        dims: ModelDims,
        variant: Variant,
        entries: Vec<(String, Vec<usize>, Arc<Vec<f64>>)>,
    ) -> ParamsSnapshot {
        ParamsSnapshot {
            dims,
            variant,
            entries,
        }
    }

    pub fn entries(&self) -> &[(String, Vec<usize>, Arc<Vec<f64>>)] {
        &self.entries
    }
}

fn structure<F>(
    dims: &ModelDims,
    variant: Variant,
    vocab_len: usize,
    tag_len: usize,
    next: &mut F,
) -> Result<ModelParams>
where
    F: FnMut(&str, &[usize]) -> Result<Tensor>,
{
    dims.validate()?;
    if vocab_len == 0 || tag_len == 0 {
        return Err(Error::contract("empty vocabulary"));
    }
    let word_embed = next("word_embed", &[vocab_len, dims.d1])?;
    let tag_embed = next("tag_embed", &[tag_len, dims.d2])?;

    let mut gru = Vec::with_capacity(dims.gru_layers);
    for layer in 0..dims.gru_layers {
        let input = if layer == 0 {
            dims.d1 + dims.d2
        } else {
            dims.encoder_width()
        };
        let mut direction = |name: &str| -> Result<GruDirection> {
            let h = dims.hidden;
            Ok(GruDirection {
                w_z: next(&format!("gru.{layer}.{name}.w_z"), &[input, h])?,
                u_z: next(&format!("gru.{layer}.{name}.u_z"), &[h, h])?,
                b_z: next(&format!("gru.{layer}.{name}.b_z"), &[h])?,
                w_r: next(&format!("gru.{layer}.{name}.w_r"), &[input, h])?,
                u_r: next(&format!("gru.{layer}.{name}.u_r"), &[h, h])?,
                b_r: next(&format!("gru.{layer}.{name}.b_r"), &[h])?,
                w_h: next(&format!("gru.{layer}.{name}.w_h"), &[input, h])?,
                u_h: next(&format!("gru.{layer}.{name}.u_h"), &[h, h])?,
                b_h: next(&format!("gru.{layer}.{name}.b_h"), &[h])?,
            })
        };
        let fwd = direction("fwd")?;
        let bwd = direction("bwd")?;
        gru.push(GruLayer { fwd, bwd });
    }

    let mut gcn = Vec::with_capacity(dims.graph_layers);
    for layer in 0..dims.graph_layers {
        gcn.push(GcnLayer {
            w_l: next(&format!("gcn.{layer}.w_l"), &[dims.d1, dims.d1])?,
            w_g: next(&format!("gcn.{layer}.w_g"), &[dims.d1, dims.d1])?,
        });
    }

    let mut attn = Vec::with_capacity(dims.graph_layers);
    for layer in 0..dims.graph_layers {
        let input = if layer == 0 { dims.d2 } else { dims.d_s };
        attn.push(AttnLayer {
            w_k: next(&format!("attn.{layer}.w_k"), &[input, dims.d_s])?,
            w_q: next(&format!("attn.{layer}.w_q"), &[input, dims.d_s])?,
            w_v: next(&format!("attn.{layer}.w_v"), &[input, dims.d_s])?,
        });
    }

    let head_in = head_input_dim(dims, variant);
    let head = HeadParams {
        w1: next("head.w1", &[head_in, dims.head_hidden])?,
        b1: next("head.b1", &[dims.head_hidden])?,
        w2: next("head.w2", &[dims.head_hidden, 3])?,
        b2: next("head.b2", &[3])?,
    };

    Ok(ModelParams {
        dims: *dims,
        variant,
        word_embed,
        tag_embed,
        gru,
        gcn,
        attn,
        head,
    })
}

impl ModelParams {
    /// Fresh parameters: fan-balanced uniform weights, zero biases, small
    /// uniform tag embeddings, and the given word-embedding initialization
    /// (row-major `vocab_len x d1`, row 0 = OOV vector).
    pub fn init(
        dims: &ModelDims,
        variant: Variant,
        word_init: Vec<f64>,
        tag_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelParams> {
        if word_init.len() % dims.d1 != 0 {
            return Err(Error::contract(format!(
                "word init length {} is not a multiple of d1={}",
                word_init.len(),
                dims.d1
            )));
        }
        let vocab_len = word_init.len() / dims.d1;
        let mut word_init = Some(word_init);
        let mut next = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let data = if name == "word_embed" {
                word_init.take().expect("word_embed requested once")
            } else if name == "tag_embed" {
                let n: usize = shape.iter().product();
                (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
            } else if shape.len() == 1 {
                vec![0.0; shape[0]]
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let n: usize = shape.iter().product();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            Tensor::param(shape, data)
        };
        structure(dims, variant, vocab_len, tag_len, &mut next)
    }

    pub fn vocab_len(&self) -> usize {
        self.word_embed.shape()[0]
    }

    pub fn tag_len(&self) -> usize {
        self.tag_embed.shape()[0]
    }

    /// Every tensor with its name, in the fixed construction order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("word_embed".to_string(), self.word_embed.clone()));
        out.push(("tag_embed".to_string(), self.tag_embed.clone()));
        for (layer, l) in self.gru.iter().enumerate() {
            for (name, d) in [("fwd", &l.fwd), ("bwd", &l.bwd)] {
                out.push((format!("gru.{layer}.{name}.w_z"), d.w_z.clone()));
                out.push((format!("gru.{layer}.{name}.u_z"), d.u_z.clone()));
                out.push((format!("gru.{layer}.{name}.b_z"), d.b_z.clone()));
                out.push((format!("gru.{layer}.{name}.w_r"), d.w_r.clone()));
                out.push((format!("gru.{layer}.{name}.u_r"), d.u_r.clone()));
                out.push((format!("gru.{layer}.{name}.b_r"), d.b_r.clone()));
                out.push((format!("gru.{layer}.{name}.w_h"), d.w_h.clone()));
                out.push((format!("gru.{layer}.{name}.u_h"), d.u_h.clone()));
                out.push((format!("gru.{layer}.{name}.b_h"), d.b_h.clone()));
            }
        }
        for (layer, l) in self.gcn.iter().enumerate() {
            out.push((format!("gcn.{layer}.w_l"), l.w_l.clone()));
            out.push((format!("gcn.{layer}.w_g"), l.w_g.clone()));
        }
        for (layer, l) in self.attn.iter().enumerate() {
            out.push((format!("attn.{layer}.w_k"), l.w_k.clone()));
            out.push((format!("attn.{layer}.w_q"), l.w_q.clone()));
            out.push((format!("attn.{layer}.w_v"), l.w_v.clone()));
        }
        out.push(("head.w1".to_string(), self.head.w1.clone()));
        out.push(("head.b1".to_string(), self.head.b1.clone()));
        out.push(("head.w2".to_string(), self.head.w2.clone()));
        out.push(("head.b2".to_string(), self.head.b2.clone()));
        out
    }

    /// Branch tensors never read by this params' variant; perturbing them must
    /// not change any output.
    pub fn unused_tensors(&self) -> Vec<(String, Tensor)> {
        self.named_tensors()
            .into_iter()
            .filter(|(name, _)| {
                (!self.variant.uses_wsg() && name.starts_with("gcn."))
                    || (!self.variant.uses_ssg() && name.starts_with("attn."))
            })
            .collect()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_tensors() {
            t.zero_grad();
        }
    }

    /// Cheap, thread-safe copy of all parameter data.
    pub fn snapshot(&self) -> ParamsSnapshot {
        ParamsSnapshot {
            dims: self.dims,
            variant: self.variant,
            entries: self
                .named_tensors()
                .into_iter()
                .map(|(name, t)| (name, t.shape().to_vec(), t.data_arc()))
                .collect(),
        }
    }

    /// Rebuild a params struct over a snapshot's buffers without copying.
    pub fn attach(snapshot: &ParamsSnapshot, requires_grad: bool) -> Result<ModelParams> {
        if snapshot.entries.len() < 2 {
            return Err(Error::contract("snapshot is missing the embedding tables"));
        }
        let vocab_len = snapshot.entries[0].1[0];
        let tag_len = snapshot.entries[1].1[0];
        let mut cursor = 0usize;
        let mut next = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let (stored_name, stored_shape, data) = snapshot
                .entries
                .get(cursor)
                .ok_or_else(|| Error::contract(format!("snapshot missing tensor {name}")))?;
            if stored_name != name {
                return Err(Error::contract(format!(
                    "snapshot tensor {cursor} is {stored_name:?}, expected {name:?}"
                )));
            }
            if stored_shape != shape {
                return Err(Error::contract(format!(
                    "snapshot tensor {name} has shape {stored_shape:?}, expected {shape:?}"
                )));
            }
            cursor += 1;
            Tensor::from_shared(shape, Arc::clone(data), requires_grad)
        };
        let params = structure(
            &snapshot.dims,
            snapshot.variant,
            vocab_len,
            tag_len,
            &mut next,
        )?;
        if cursor != snapshot.entries.len() {
            return Err(Error::contract("snapshot has extra tensors"));
        }
        Ok(params)
    }
}

/// Forward/backward mode. Training mode owns the dropout rate and RNG.
pub enum Mode<'a> {
    Eval,
    Train {
        dropout: f64,
        rng: &'a mut ChaCha8Rng,
    },
}

impl Mode<'_> {
    pub(crate) fn apply_dropout(&mut self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train { dropout, rng } => {
                if *dropout == 0.0 {
                    return Ok(x.clone());
                }
                gru::make_mask(tape, x.shape(), *dropout, rng, x)
            }
        }
    }
}

/// Per-sentence inputs assembled by the data pipeline.
#[derive(Debug, Clone)]
pub struct SentenceInputs<'a> {
    /// Word-vocabulary row per token.
    pub token_ids: &'a [usize],
    /// Tag-vocabulary id of each word's preterminal.
    pub word_tag_ids: &'a [usize],
    /// Tag-vocabulary id per structure-graph node.
    pub ssg_node_tags: &'a [usize],
    /// Neighbor sets (with self-loops) per structure-graph node.
    pub ssg_neighbors: &'a [Vec<usize>],
    /// Structure-graph node index of each word's preterminal.
    pub ssg_word_alignment: &'a [usize],
    /// Normalized word-similarity adjacency, row-major `n x n`.
    pub a_hat: Option<&'a Arc<Vec<f64>>>,
}

/// Everything a forward pass produces.
#[derive(Debug)]
pub struct ForwardOutput {
    /// Encoder states, `n x 2*hidden` (absent for the SSG-only classifier).
    pub h: Option<Tensor>,
    /// WSG branch output, `n x d1`.
    pub w_l: Option<Tensor>,
    /// SSG branch output gathered at the word preterminals, `n x d_s`.
    pub v_l: Option<Tensor>,
    /// Per-word class distributions, `n x 3`.
    pub p: Tensor,
}

impl ForwardOutput {
    /// Per-word emphasis probability `p(B) + p(I)`.
    pub fn emphasis_prob(&self) -> Vec<f64> {
        self.p
            .to_vec()
            .chunks_exact(3)
            .map(|row| row[0] + row[1])
            .collect()
    }
}

/// Affine -> leaky_relu -> affine -> row softmax, with dropout on the
/// concatenated input in training mode.
pub fn classify(
    tape: &Tape,
    features: &Tensor,
    head: &HeadParams,
    slope: f64,
    mode: &mut Mode<'_>,
) -> Result<Tensor> {
    let x = mode.apply_dropout(tape, features)?;
    let hidden = tape.leaky_relu(
        &tape.add_row_bias(&tape.matmul(&x, &head.w1)?, &head.b1)?,
        slope,
    )?;
    let logits = tape.add_row_bias(&tape.matmul(&hidden, &head.w2)?, &head.b2)?;
    tape.softmax_rows(&logits)
}

/// Negative log likelihood of the gold labels under `p` (`n x 3`), summed over
/// words. Probabilities below [`PROB_FLOOR`] are clamped first; the count of
/// clamped gold entries is returned for reporting.
pub fn nll_loss(tape: &Tape, p: &Tensor, labels: &[EmphasisLabel]) -> Result<(Tensor, usize)> {
    let n = p.shape()[0];
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{n} rows of probabilities but {} labels",
            labels.len()
        )));
    }
    let cols: Vec<usize> = labels.iter().map(|l| l.class_index()).collect();
    let picked = tape.pick(p, &cols)?;
    let clamped_count = picked.data().iter().filter(|&&v| v < PROB_FLOOR).count();
    let safe = tape.clamp_min(&picked, PROB_FLOOR)?;
    let logs = tape.log(&safe)?;
    let total = tape.sum(&logs)?;
    let loss = tape.scale(&total, -1.0)?;
    Ok((loss, clamped_count))
}

/// Weighted form used when several annotator samples share one forward pass:
/// `counts` is row-major `n x 3` with integer label multiplicities, and the
/// loss is `-sum_ic counts[i][c] * log p[i][c]` (equal to summing
/// [`nll_loss`] over the individual samples).
pub fn nll_loss_weighted(tape: &Tape, p: &Tensor, counts: &[f64]) -> Result<(Tensor, usize)> {
    if counts.len() != p.numel() {
        return Err(Error::contract(format!(
            "counts length {} does not match distribution size {}",
            counts.len(),
            p.numel()
        )));
    }
    let clamped_count = p
        .data()
        .iter()
        .zip(counts)
        .filter(|&(&prob, &c)| c > 0.0 && prob < PROB_FLOOR)
        .map(|(_, &c)| c as usize)
        .sum();
    let weights = Tensor::new(p.shape(), counts.to_vec())?;
    let safe = tape.clamp_min(p, PROB_FLOOR)?;
    let logs = tape.log(&safe)?;
    let weighted = tape.mul(&logs, &weights)?;
    let total = tape.sum(&weighted)?;
    let loss = tape.scale(&total, -1.0)?;
    Ok((loss, clamped_count))
}

/// Run the branches selected by `params.variant` and classify every word.
pub fn forward(
    tape: &Tape,
    inputs: &SentenceInputs<'_>,
    params: &ModelParams,
    mode: &mut Mode<'_>,
) -> Result<ForwardOutput> {
    let n = inputs.token_ids.len();
    if n == 0 {
        return Err(Error::contract("forward on an empty sentence"));
    }
    if inputs.word_tag_ids.len() != n || inputs.ssg_word_alignment.len() != n {
        return Err(Error::contract(
            "token, tag, and alignment lengths disagree",
        ));
    }
    let variant = params.variant;

    let h = if variant.uses_encoder() {
        let words = tape.gather_rows(&params.word_embed, inputs.token_ids)?;
        let tags = tape.gather_rows(&params.tag_embed, inputs.word_tag_ids)?;
        Some(encode_sequence(tape, &words, &tags, &params.gru, mode)?)
    } else {
        None
    };

    let w_l = if variant.uses_wsg() {
        let a_hat_data = inputs
            .a_hat
            .ok_or_else(|| Error::contract("variant needs a word-similarity graph"))?;
        let a_hat = Tensor::from_shared(&[n, n], Arc::clone(a_hat_data), false)?;
        let mut state = tape.gather_rows(&params.word_embed, inputs.token_ids)?;
        for layer in &params.gcn {
            state = gcn_gated_layer(tape, &state, &a_hat, layer, params.dims.leaky_slope)?;
        }
        Some(state)
    } else {
        None
    };

    let v_l = if variant.uses_ssg() {
        let mut state = tape.gather_rows(&params.tag_embed, inputs.ssg_node_tags)?;
        for layer in &params.attn {
            state = graph_attention_layer(tape, &state, inputs.ssg_neighbors, layer)?;
        }
        Some(tape.gather_rows(&state, inputs.ssg_word_alignment)?)
    } else {
        None
    };

    let mut segments: Vec<&Tensor> = Vec::new();
    if let Some(h) = &h {
        segments.push(h);
    }
    if let Some(v) = &v_l {
        segments.push(v);
    }
    if let Some(w) = &w_l {
        segments.push(w);
    }
    let features = tape.concat_cols(&segments)?;
    let p = classify(tape, &features, &params.head, params.dims.leaky_slope, mode)?;

    Ok(ForwardOutput { h, w_l, v_l, p })
}

#[cfg(test)]
mod tests;
