//! Attribute-value pairs, data samples and the embedding table they share.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Parameter;
use crate::error::{GmcfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn tag(self) -> u8 {
        match self {
            Side::User => 0,
            Side::Item => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Side> {
        match tag {
            0 => Some(Side::User),
            1 => Some(Side::Item),
            _ => None,
        }
    }
}

/// Index into the union attribute universe. The side is carried along so
/// that a sample can be validated without consulting the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeId {
    pub id: usize,
    pub side: Side,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeValuePair {
    pub att: AttributeId,
    pub val: f64,
}

impl AttributeValuePair {
    pub fn new(att: AttributeId, val: f64) -> Self {
        Self { att, val }
    }

    /// Categorical presence.
    pub fn present(att: AttributeId) -> Self {
        Self { att, val: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub user_chars: Vec<AttributeValuePair>,
    pub item_chars: Vec<AttributeValuePair>,
    pub label: f64,
}

impl DataSample {
    pub fn new(user_chars: Vec<AttributeValuePair>, item_chars: Vec<AttributeValuePair>, label: f64) -> Result<Self> {
        let sample = Self {
            user_chars,
            item_chars,
            label,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_chars.is_empty() || self.item_chars.is_empty() {
            return Err(GmcfError::Contract(
                "a sample needs at least one user and one item attribute".into(),
            ));
        }
        if self.label != 0.0 && self.label != 1.0 {
            return Err(GmcfError::Contract(format!("label must be 0 or 1, got {}", self.label)));
        }
        for (chars, side) in [(&self.user_chars, Side::User), (&self.item_chars, Side::Item)] {
            for (k, pair) in chars.iter().enumerate() {
                if pair.att.side != side {
                    return Err(GmcfError::Contract(format!(
                        "attribute {} is on the wrong side",
                        pair.att.id
                    )));
                }
                if !pair.val.is_finite() {
                    return Err(GmcfError::Numeric(format!(
                        "value of attribute {} is not finite",
                        pair.att.id
                    )));
                }
                if chars[..k].iter().any(|p| p.att.id == pair.att.id) {
                    return Err(GmcfError::Contract(format!(
                        "attribute {} repeats within one side",
                        pair.att.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// The first user attribute identifies the user.
    pub fn user_key(&self) -> usize {
        self.user_chars[0].att.id
    }

    /// The first item attribute identifies the item.
    pub fn item_key(&self) -> usize {
        self.item_chars[0].att.id
    }

    /// Drops the side attributes that `regime` excludes, keeping each
    /// side's identifying first field.
    pub fn restricted(&self, regime: AttributeRegime) -> DataSample {
        let keep = |chars: &[AttributeValuePair], all: bool| {
            if all {
                chars.to_vec()
            } else {
                chars[..1].to_vec()
            }
        };
        DataSample {
            user_chars: keep(&self.user_chars, regime.user_attrs()),
            item_chars: keep(&self.item_chars, regime.item_attrs()),
            label: self.label,
        }
    }
}

/// Which side attributes a model gets to see beyond the two ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeRegime {
    None,
    UserOnly,
    ItemOnly,
    Both,
}

impl AttributeRegime {
    pub const ALL: [AttributeRegime; 4] = [Self::None, Self::UserOnly, Self::ItemOnly, Self::Both];

    pub fn user_attrs(self) -> bool {
        matches!(self, Self::UserOnly | Self::Both)
    }

    pub fn item_attrs(self) -> bool {
        matches!(self, Self::ItemOnly | Self::Both)
    }
}

impl fmt::Display for AttributeRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::UserOnly => "user",
            Self::ItemOnly => "item",
            Self::Both => "both",
        })
    }
}

impl std::str::FromStr for AttributeRegime {
    type Err = GmcfError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.to_string() == s)
            .ok_or_else(|| GmcfError::InvalidConfig(format!("unknown regime '{s}' (none|user|item|both)")))
    }
}

/// Attribute names in first-appearance order. Ids are positions in `names`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    names: Vec<String>,
    sides: Vec<Side>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id for `name`, assigning the next free id on first sight.
    /// Fails if the name was previously seen on the other side.
    pub fn intern(&mut self, name: &str, side: Side) -> Result<AttributeId> {
        if let Some(&id) = self.index.get(name) {
            if self.sides[id] != side {
                return Err(GmcfError::Contract(format!(
                    "attribute '{name}' appears on both user and item side"
                )));
            }
            return Ok(AttributeId { id, side });
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.sides.push(side);
        self.index.insert(name.to_string(), id);
        Ok(AttributeId { id, side })
    }

    pub fn lookup(&self, name: &str) -> Option<AttributeId> {
        self.index.get(name).map(|&id| AttributeId {
            id,
            side: self.sides[id],
        })
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn side(&self, id: usize) -> Side {
        self.sides[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = AttributeId> + '_ {
        self.sides
            .iter()
            .enumerate()
            .map(|(id, &side)| AttributeId { id, side })
    }
}

/// One trainable vector per attribute, shared by every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<Parameter>,
}

impl EmbeddingTable {
    pub fn from_vectors(dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(GmcfError::InvalidConfig("embedding dim must be >= 1".into()));
        }
        let vectors = vectors
            .into_iter()
            .enumerate()
            .map(|(k, v)| {
                if v.len() != dim {
                    return Err(GmcfError::shape(
                        "embedding",
                        format!("vector {k} has length {}, expected {dim}", v.len()),
                    ));
                }
                Ok(Parameter::vector(format!("emb.{k}"), v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, id: usize) -> Result<&[f64]> {
        self.vectors
            .get(id)
            .map(|p| p.value.as_slice())
            .ok_or(GmcfError::MissingEmbedding(id))
    }

    pub fn vector_mut(&mut self, id: usize) -> Result<&mut [f64]> {
        self.vectors
            .get_mut(id)
            .map(|p| p.value.as_mut_slice())
            .ok_or(GmcfError::MissingEmbedding(id))
    }

    pub fn parameter(&self, id: usize) -> Result<&Parameter> {
        self.vectors.get(id).ok_or(GmcfError::MissingEmbedding(id))
    }

    pub(crate) fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.vectors.iter()
    }

    pub(crate) fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.vectors.iter_mut()
    }
}

/// Draws every vector from U(-1/sqrt(dim), 1/sqrt(dim)) with a seeded ChaCha8 stream.
pub fn init_embeddings(universe: usize, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(GmcfError::InvalidConfig("embedding dim must be >= 1".into()));
    }
    if universe == 0 {
        return Err(GmcfError::InvalidConfig("attribute universe is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let vectors = (0..universe)
        .map(|_| (0..dim).map(|_| rng.gen_range(-bound..=bound)).collect())
        .collect();
    EmbeddingTable::from_vectors(dim, vectors)
}

/// `val * v_att`.
pub fn node_representation(pair: &AttributeValuePair, table: &EmbeddingTable) -> Result<Vec<f64>> {
    let v = table.vector(pair.att.id)?;
    Ok(v.iter().map(|x| pair.val * x).collect())
}
