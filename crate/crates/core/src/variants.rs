//! Ablation variants and the factorization-machine reduction.
//!
//! A [`VariantConfig`] selects how inner interactions, cross interactions and
//! node fusion are modeled. Variants are written as comma-separated
//! `key=value` strings, e.g. `inner=mlp,cross=bi,fuse=gru`.

use std::fmt;
use std::str::FromStr;

use crate::data::{AttributeValuePair, DataSample, EmbeddingTable};
use crate::error::{GmcfError, Result};
use crate::model::{forward, ForwardResult, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InnerKind {
    Mlp,
    Bi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CrossKind {
    Bi,
    /// Cross pairs go through the inner-interaction MLP.
    MlpShared,
    /// Cross pairs go through a second MLP of the same shape.
    MlpSeparate,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FuseKind {
    Gru,
    /// `u + z + s`
    Sum,
    /// `3d -> 4d -> d` MLP over `[u, z, s]`.
    Mlp,
    /// `u + s/2`, the linear fuse under which the model reduces to a
    /// factorization machine. Only valid in the single-graph layout.
    FmLinear,
}

/// Node layout. `Pair` is the user-graph/item-graph model matched by a dot
/// product. `Single` treats every attribute pair of the sample as a cross
/// interaction over the union node set and matches linearly with
/// `sum(v_user) + sum(v_item)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GraphLayout {
    Pair,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VariantConfig {
    pub inner: InnerKind,
    pub cross: CrossKind,
    pub fuse: FuseKind,
    pub layout: GraphLayout,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self::canonical()
    }
}

impl VariantConfig {
    /// `<MLP, Bi>` with GRU fusion.
    pub fn canonical() -> Self {
        Self {
            inner: InnerKind::Mlp,
            cross: CrossKind::Bi,
            fuse: FuseKind::Gru,
            layout: GraphLayout::Pair,
        }
    }

    /// Element-wise products everywhere, linear fuse, linear match.
    pub fn fm_reduction() -> Self {
        Self {
            inner: InnerKind::Bi,
            cross: CrossKind::Bi,
            fuse: FuseKind::FmLinear,
            layout: GraphLayout::Single,
        }
    }

    pub fn new(inner: InnerKind, cross: CrossKind, fuse: FuseKind) -> Self {
        Self {
            inner,
            cross,
            fuse,
            layout: GraphLayout::Pair,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fuse == FuseKind::FmLinear && self.layout != GraphLayout::Single {
            return Err(GmcfError::InvalidConfig(
                "fuse=fm is only defined with graph=single".into(),
            ));
        }
        if self.layout == GraphLayout::Single && self.cross == CrossKind::None {
            return Err(GmcfError::InvalidConfig(
                "graph=single models every pair as a cross interaction; cross=none is empty".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_inner_mlp(&self) -> bool {
        let inner = self.layout == GraphLayout::Pair && self.inner == InnerKind::Mlp;
        inner || self.cross == CrossKind::MlpShared
    }

    pub fn uses_cross_mlp(&self) -> bool {
        self.cross == CrossKind::MlpSeparate
    }
}

impl fmt::Display for VariantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = match self.inner {
            InnerKind::Mlp => "mlp",
            InnerKind::Bi => "bi",
        };
        let cross = match self.cross {
            CrossKind::Bi => "bi",
            CrossKind::MlpShared => "mlp-shared",
            CrossKind::MlpSeparate => "mlp-separate",
            CrossKind::None => "none",
        };
        let fuse = match self.fuse {
            FuseKind::Gru => "gru",
            FuseKind::Sum => "sum",
            FuseKind::Mlp => "mlp",
            FuseKind::FmLinear => "fm",
        };
        write!(f, "inner={inner},cross={cross},fuse={fuse}")?;
        if self.layout == GraphLayout::Single {
            write!(f, ",graph=single")?;
        }
        Ok(())
    }
}

impl FromStr for VariantConfig {
    type Err = GmcfError;

    /// Accepts `key=value` lists (missing keys take the canonical value) and
    /// the shorthands `gmcf` and `fm`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "gmcf" | "" => return Ok(Self::canonical()),
            "fm" => return Ok(Self::fm_reduction()),
            _ => {}
        }
        let bad = |what: &str| GmcfError::InvalidConfig(format!("bad variant '{s}': {what}"));
        let mut cfg = Self::canonical();
        for part in s.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| bad(&format!("'{part}' is not key=value")))?;
            match (key.trim(), value.trim().to_ascii_lowercase().as_str()) {
                ("inner", "mlp") => cfg.inner = InnerKind::Mlp,
                ("inner", "bi") => cfg.inner = InnerKind::Bi,
                ("cross", "bi") => cfg.cross = CrossKind::Bi,
                ("cross", "mlp" | "mlp-shared") => cfg.cross = CrossKind::MlpShared,
                ("cross", "mlp-separate" | "mlp2") => cfg.cross = CrossKind::MlpSeparate,
                ("cross", "none") => cfg.cross = CrossKind::None,
                ("fuse", "gru") => cfg.fuse = FuseKind::Gru,
                ("fuse", "sum") => cfg.fuse = FuseKind::Sum,
                ("fuse", "mlp") => cfg.fuse = FuseKind::Mlp,
                ("fuse", "fm") => cfg.fuse = FuseKind::FmLinear,
                ("graph", "pair") => cfg.layout = GraphLayout::Pair,
                ("graph", "single") => cfg.layout = GraphLayout::Single,
                (k, v) => return Err(bad(&format!("unknown setting {k}={v}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the forward pass under `config`, which must match the variant the
/// parameters were built for.
pub fn apply_variant(config: &VariantConfig, params: &ModelParams, sample: &DataSample) -> Result<ForwardResult> {
    if *config != params.variant() {
        return Err(GmcfError::InvalidConfig(format!(
            "parameters were built for '{}', not '{config}'",
            params.variant()
        )));
    }
    forward(params, sample)
}

/// Factorization-machine prediction over an arbitrary node set:
/// `sum_i sum(v_i) val_i + sum_{i<j} <v_i, v_j> val_i val_j`, no bias.
pub fn fm_predict_pairs(pairs: &[AttributeValuePair], table: &EmbeddingTable) -> Result<f64> {
    let vs = pairs
        .iter()
        .map(|p| table.vector(p.att.id))
        .collect::<Result<Vec<_>>>()?;
    let mut y = 0.0;
    for (p, v) in pairs.iter().zip(&vs) {
        y += v.iter().sum::<f64>() * p.val;
    }
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            let dot: f64 = vs[i].iter().zip(vs[j]).map(|(a, b)| a * b).sum();
            y += dot * pairs[i].val * pairs[j].val;
        }
    }
    Ok(y)
}

/// FM prediction over the union of both sides' attributes.
pub fn fm_predict(sample: &DataSample, table: &EmbeddingTable) -> Result<f64> {
    let union: Vec<AttributeValuePair> = sample.user_chars.iter().chain(&sample.item_chars).copied().collect();
    fm_predict_pairs(&union, table)
}

/// The reduced model pipeline: element-wise products for every pair of the
/// union node set, `u + s/2` fusion and `sum + sum` matching. Agrees with
/// [`fm_predict`] up to rounding.
pub fn fm_reduction_predict(sample: &DataSample, table: &EmbeddingTable) -> Result<f64> {
    let params = ModelParams::from_embeddings(table.clone(), VariantConfig::fm_reduction(), 1, 0)?;
    Ok(forward(&params, sample)?.score)
}
