//! Dataset text format and binary checkpoints.
//!
//! Dataset files hold one sample per line:
//!
//! ```text
//! <label>\t<user fields>\t<item fields>
//! ```
//!
//! Fields are space-separated `name=value` tokens. A bare `name`, or a
//! token whose value is not a number (`gender=male`), is a categorical
//! attribute with value 1. The first field on each side names the user or
//! item itself.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{AttributeValuePair, DataSample, EmbeddingTable, Side, Vocabulary};
use crate::error::{GmcfError, Result};
use crate::model::ModelParams;
use crate::variants::VariantConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub samples: Vec<DataSample>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ParseOptions {
    /// Treat the label column as a rating; label is 1 iff rating > threshold.
    pub threshold: Option<f64>,
    /// Drop users with fewer positive samples than this.
    pub min_positives: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseReport {
    pub lines: usize,
    pub samples: usize,
    pub positives: usize,
    pub users: usize,
    pub dropped_users: usize,
    pub attributes: usize,
}

fn parse_fields(
    text: &str,
    side: Side,
    vocab: &mut Vocabulary,
    grow: bool,
    line: usize,
) -> Result<Vec<AttributeValuePair>> {
    let err = |message: String| GmcfError::Parse { line, message };
    let mut out: Vec<AttributeValuePair> = Vec::new();
    for token in text.split_whitespace() {
        // `name=<number>` is numeric; any other token, `=` included, is a
        // categorical attribute with value 1
        let (name, val) = match token.split_once('=').map(|(n, v)| (n, v.parse::<f64>())) {
            Some((n, Ok(val))) => {
                if !val.is_finite() {
                    return Err(err(format!("non-finite value in '{token}'")));
                }
                (n, val)
            }
            _ => (token, 1.0),
        };
        if name.is_empty() {
            return Err(err(format!("empty attribute name in '{token}'")));
        }
        let att = if grow {
            vocab.intern(name, side).map_err(|e| err(e.to_string()))?
        } else {
            let att = vocab
                .lookup(name)
                .ok_or_else(|| err(format!("unknown attribute '{name}'")))?;
            if att.side != side {
                return Err(err(format!("attribute '{name}' belongs to the other side")));
            }
            att
        };
        if out.iter().any(|p| p.att == att) {
            return Err(err(format!("attribute '{name}' repeats")));
        }
        out.push(AttributeValuePair::new(att, val));
    }
    if out.is_empty() {
        let which = if side == Side::User { "user" } else { "item" };
        return Err(err(format!("no {which} fields")));
    }
    Ok(out)
}

fn parse_line(
    text: &str,
    line: usize,
    vocab: &mut Vocabulary,
    grow: bool,
    threshold: Option<f64>,
) -> Result<DataSample> {
    let err = |message: String| GmcfError::Parse { line, message };
    let cols: Vec<&str> = text.split('\t').collect();
    if cols.len() != 3 {
        return Err(err(format!("expected 3 tab-separated columns, found {}", cols.len())));
    }
    let raw: f64 = cols[0]
        .trim()
        .parse()
        .map_err(|_| err(format!("bad label '{}'", cols[0])))?;
    let label = match threshold {
        Some(t) => {
            if raw > t {
                1.0
            } else {
                0.0
            }
        }
        None if raw == 0.0 || raw == 1.0 => raw,
        None => return Err(err(format!("label must be 0 or 1, got {raw}"))),
    };
    let user = parse_fields(cols[1], Side::User, vocab, grow, line)?;
    let item = parse_fields(cols[2], Side::Item, vocab, grow, line)?;
    DataSample::new(user, item, label).map_err(|e| err(e.to_string()))
}

fn parse_all(
    text: &str,
    vocab: &mut Vocabulary,
    grow: bool,
    opts: ParseOptions,
) -> Result<(Vec<DataSample>, ParseReport)> {
    let mut samples = Vec::new();
    let mut lines = 0;
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        samples.push(parse_line(line, k + 1, vocab, grow, opts.threshold)?);
    }

    let mut positives_by_user: HashMap<usize, usize> = HashMap::new();
    for s in &samples {
        *positives_by_user.entry(s.user_key()).or_default() += s.label as usize;
    }
    let users = positives_by_user.len();
    let dropped_users = positives_by_user.values().filter(|&&n| n < opts.min_positives).count();
    samples.retain(|s| positives_by_user[&s.user_key()] >= opts.min_positives);
    if samples.is_empty() {
        return Err(GmcfError::EmptyDataset);
    }
    let report = ParseReport {
        lines,
        samples: samples.len(),
        positives: samples.iter().filter(|s| s.label == 1.0).count(),
        users,
        dropped_users,
        attributes: vocab.len(),
    };
    Ok((samples, report))
}

/// Parses a dataset, assigning attribute ids in first-appearance order.
pub fn parse_dataset_str(text: &str, opts: ParseOptions) -> Result<(Dataset, ParseReport)> {
    let mut vocab = Vocabulary::new();
    let (samples, report) = parse_all(text, &mut vocab, true, opts)?;
    Ok((Dataset { vocab, samples }, report))
}

/// Parses against a fixed vocabulary; unknown attributes are errors.
pub fn parse_with_vocab(text: &str, vocab: &Vocabulary, opts: ParseOptions) -> Result<Vec<DataSample>> {
    let mut vocab = vocab.clone();
    Ok(parse_all(text, &mut vocab, false, opts)?.0)
}

pub fn parse_dataset(path: impl AsRef<Path>, opts: ParseOptions) -> Result<(Dataset, ParseReport)> {
    parse_dataset_str(&std::fs::read_to_string(path)?, opts)
}

/// Parses one sample line against a fixed vocabulary.
pub fn parse_sample_line(line: &str, vocab: &Vocabulary) -> Result<DataSample> {
    let mut vocab = vocab.clone();
    parse_line(line.trim_end_matches(['\r', '\n']), 1, &mut vocab, false, None)
}

fn write_fields(out: &mut String, fields: &[AttributeValuePair], vocab: &Vocabulary) {
    for (k, p) in fields.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        out.push_str(vocab.name(p.att.id));
        if p.val != 1.0 {
            let _ = write!(out, "={}", p.val);
        }
    }
}

pub fn sample_to_line(sample: &DataSample, vocab: &Vocabulary) -> String {
    let mut out = format!("{}\t", sample.label as u8);
    write_fields(&mut out, &sample.user_chars, vocab);
    out.push('\t');
    write_fields(&mut out, &sample.item_chars, vocab);
    out
}

pub fn dataset_to_string(samples: &[DataSample], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&sample_to_line(s, vocab));
        out.push('\n');
    }
    out
}

const MAGIC_PREFIX: &[u8; 7] = b"GMCFCKP";
const VERSION: u8 = b'1';

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
}

/// Layout, all integers little-endian:
///
/// ```text
/// "GMCFCKP1"
/// u64 dim, u64 universe, u64 hidden_layers
/// u64 variant length, variant bytes
/// u64 interaction-MLP arrays, u64 fusion arrays
/// per attribute: u8 side, u32 name length, name bytes
/// u64 float count, f64 values in registry order
/// u64 FNV-1a of everything above
/// ```
pub fn checkpoint_to_bytes(params: &ModelParams, vocab: &Vocabulary) -> Result<Vec<u8>> {
    if vocab.len() != params.embeddings.len() {
        return Err(GmcfError::Contract(format!(
            "vocabulary has {} names but the model has {} embeddings",
            vocab.len(),
            params.embeddings.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC_PREFIX);
    out.push(VERSION);
    let u64le = |out: &mut Vec<u8>, x: usize| out.extend_from_slice(&(x as u64).to_le_bytes());
    u64le(&mut out, params.dim());
    u64le(&mut out, params.embeddings.len());
    u64le(&mut out, params.hidden_layers());
    let variant = params.variant().to_string();
    u64le(&mut out, variant.len());
    out.extend_from_slice(variant.as_bytes());
    let (mlp_arrays, fuse_arrays) = array_counts(params);
    u64le(&mut out, mlp_arrays);
    u64le(&mut out, fuse_arrays);
    for id in 0..vocab.len() {
        out.push(vocab.side(id).tag());
        let name = vocab.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
    }
    let params_list = params.parameters();
    let floats: usize = params_list.iter().map(|p| p.value.len()).sum();
    u64le(&mut out, floats);
    for p in params_list {
        for x in &p.value {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

fn array_counts(params: &ModelParams) -> (usize, usize) {
    let n = params.parameters().len();
    let emb = params.embeddings.len();
    let mlp = params.inner_mlp.as_ref().map_or(0, |m| m.param_count())
        + params.cross_mlp.as_ref().map_or(0, |m| m.param_count());
    (mlp, n - emb - mlp)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(GmcfError::Corrupt(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().unwrap());
        usize::try_from(v).map_err(|_| GmcfError::Corrupt(format!("header value {v} out of range")))
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..7] != MAGIC_PREFIX {
        return Err(GmcfError::UnsupportedFormat);
    }
    if bytes[7] != VERSION {
        return Err(GmcfError::UnsupportedVersion(bytes[7]));
    }
    if bytes.len() < 16 {
        return Err(GmcfError::Corrupt("truncated before checksum".into()));
    }
    let body = &bytes[..bytes.len() - 8];
    let mut r = Reader { bytes: body, pos: 8 };
    let dim = r.u64()?;
    let universe = r.u64()?;
    let hidden_layers = r.u64()?;
    let vlen = r.u64()?;
    let variant_text =
        std::str::from_utf8(r.take(vlen)?).map_err(|_| GmcfError::Corrupt("variant is not UTF-8".into()))?;
    let variant: VariantConfig = variant_text
        .parse()
        .map_err(|_| GmcfError::Corrupt(format!("unknown variant '{variant_text}'")))?;
    let mlp_arrays = r.u64()?;
    let fuse_arrays = r.u64()?;
    if dim == 0 || universe == 0 || hidden_layers > 4 {
        return Err(GmcfError::Corrupt("implausible header".into()));
    }
    // shape of every array follows from the header
    let zeros = EmbeddingTable::from_vectors(dim, vec![vec![0.0; dim]; universe])?;
    let mut params = ModelParams::from_embeddings(zeros, variant, hidden_layers, 0)?;
    if array_counts(&params) != (mlp_arrays, fuse_arrays) {
        return Err(GmcfError::Corrupt("array counts disagree with the variant".into()));
    }
    let mut vocab = Vocabulary::new();
    for id in 0..universe {
        let side = Side::from_tag(r.take(1)?[0])
            .ok_or_else(|| GmcfError::Corrupt(format!("bad side tag for attribute {id}")))?;
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| GmcfError::Corrupt(format!("name of attribute {id} is not UTF-8")))?;
        let att = vocab
            .intern(name, side)
            .map_err(|e| GmcfError::Corrupt(e.to_string()))?;
        if att.id != id {
            return Err(GmcfError::Corrupt(format!("duplicate attribute name '{name}'")));
        }
    }
    let floats = r.u64()?;
    let expected: usize = params.parameters().iter().map(|p| p.value.len()).sum();
    if floats != expected {
        return Err(GmcfError::Corrupt(format!(
            "{floats} floats declared, model needs {expected}"
        )));
    }
    if body.len() - r.pos != 8 * floats {
        return Err(GmcfError::Corrupt(format!(
            "payload is {} bytes, expected {}",
            body.len() - r.pos,
            8 * floats
        )));
    }
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if stored != fnv1a(body) {
        return Err(GmcfError::Corrupt("checksum mismatch".into()));
    }
    for p in params.parameters_mut() {
        for x in p.value.iter_mut() {
            *x = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
    }
    Ok(Checkpoint { params, vocab })
}

pub fn save_checkpoint(params: &ModelParams, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(params, vocab)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
