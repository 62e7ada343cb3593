//! Binary checkpoint container: version tag, config echo, vocabularies, and
//! every parameter tensor with name, shape, and row-major data. Writing is
//! deterministic, so save -> load -> save is byte-identical.

use std::path::Path;
use std::sync::Arc;

use crate::corpus::WordVocab;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams, ParamsSnapshot, Variant};
use crate::parse_tree::TagVocab;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EMPHSEL1";
const KIND_MODEL: u8 = 0;
const KIND_TAG_EMBED: u8 = 1;

/// A loaded model checkpoint.
pub struct Checkpoint {
    pub config_echo: String,
    pub params: ModelParams,
    pub word_vocab: WordVocab,
    pub tag_vocab: TagVocab,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: u8) -> Writer {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(kind);
        Writer { buf }
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn strings(&mut self, items: &[String]) {
        self.u64(items.len() as u64);
        for s in items {
            self.string(s);
        }
    }

    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.string(name);
        self.u64(shape.len() as u64);
        for &d in shape {
            self.u64(d as u64);
        }
        for &v in data {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], kind: u8) -> Result<Reader<'a>> {
        if buf.len() < 9 || &buf[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        if buf[8] != kind {
            return Err(Error::Checkpoint(format!(
                "wrong artifact kind {} (expected {kind})",
                buf[8]
            )));
        }
        Ok(Reader { buf, pos: 9 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("non-UTF8 string".into()))
    }

    fn strings(&mut self) -> Result<Vec<String>> {
        let count = self.u64()? as usize;
        (0..count).map(|_| self.string()).collect()
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name = self.string()?;
        let rank = self.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Ok((name, shape, data))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(())
    }
}

fn write_dims(w: &mut Writer, dims: &ModelDims) {
    w.u64(dims.d1 as u64);
    w.u64(dims.d2 as u64);
    w.u64(dims.hidden as u64);
    w.u64(dims.d_s as u64);
    w.u64(dims.head_hidden as u64);
    w.u64(dims.gru_layers as u64);
    w.u64(dims.graph_layers as u64);
    w.f64(dims.leaky_slope);
}

fn read_dims(r: &mut Reader) -> Result<ModelDims> {
    Ok(ModelDims {
        d1: r.u64()? as usize,
        d2: r.u64()? as usize,
        hidden: r.u64()? as usize,
        d_s: r.u64()? as usize,
        head_hidden: r.u64()? as usize,
        gru_layers: r.u64()? as usize,
        graph_layers: r.u64()? as usize,
        leaky_slope: r.f64()?,
    })
}

/// Serialize a model checkpoint to bytes.
pub fn model_to_bytes(
    params: &ModelParams,
    word_vocab: &WordVocab,
    tag_vocab: &TagVocab,
    config_echo: &str,
) -> Vec<u8> {
    let mut w = Writer::new(KIND_MODEL);
    w.string(config_echo);
    w.string(params.variant.as_str());
    write_dims(&mut w, &params.dims);
    w.strings(word_vocab.tokens());
    w.strings(tag_vocab.names());
    let named = params.named_tensors();
    w.u64(named.len() as u64);
    for (name, tensor) in &named {
        w.tensor(name, tensor.shape(), &tensor.data());
    }
    w.buf
}

/// Write a model checkpoint.
pub fn save_model(
    path: &Path,
    params: &ModelParams,
    word_vocab: &WordVocab,
    tag_vocab: &TagVocab,
    config_echo: &str,
) -> Result<()> {
    std::fs::write(path, model_to_bytes(params, word_vocab, tag_vocab, config_echo))?;
    Ok(())
}

/// Parse a model checkpoint from bytes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, KIND_MODEL)?;
    let config_echo = r.string()?;
    let variant_name = r.string()?;
    let variant = Variant::parse(&variant_name)
        .ok_or_else(|| Error::Checkpoint(format!("unknown variant {variant_name:?}")))?;
    let dims = read_dims(&mut r)?;
    let word_vocab = WordVocab::from_tokens(r.strings()?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tag_vocab =
        TagVocab::from_names(r.strings()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.u64()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, shape, data) = r.tensor()?;
        entries.push((name, shape, Arc::new(data)));
    }
    r.done()?;
    let snapshot = ParamsSnapshot::from_entries(dims, variant, entries);
    let params = ModelParams::attach(&snapshot, true)
        .map_err(|e| Error::Checkpoint(format!("inconsistent tensors: {e}")))?;
    Ok(Checkpoint {
        config_echo,
        params,
        word_vocab,
        tag_vocab,
    })
}

/// Read a model checkpoint from disk.
pub fn load_model(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}

/// Write a pretrained tag-embedding artifact (`|T| x d2` plus the tag names).
pub fn save_tag_embedding(
    path: &Path,
    tag_embed: &Tensor,
    tag_vocab: &TagVocab,
    config_echo: &str,
) -> Result<()> {
    let mut w = Writer::new(KIND_TAG_EMBED);
    w.string(config_echo);
    w.strings(tag_vocab.names());
    w.tensor("tag_embed", tag_embed.shape(), &tag_embed.data());
    std::fs::write(path, w.buf)?;
    Ok(())
}

/// Read a tag-embedding artifact: (tag names, embedding tensor).
pub fn load_tag_embedding(path: &Path) -> Result<(TagVocab, Tensor)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, KIND_TAG_EMBED)?;
    let _echo = r.string()?;
    let tag_vocab =
        TagVocab::from_names(r.strings()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let (name, shape, data) = r.tensor()?;
    r.done()?;
    if name != "tag_embed" || shape.len() != 2 || shape[0] != tag_vocab.len() {
        return Err(Error::Checkpoint("malformed tag-embedding artifact".into()));
    }
    let tensor = Tensor::param(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((tag_vocab, tensor))
}
