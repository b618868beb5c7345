//! Complete attribute graphs built from one side of a sample.
//!
//! Edges are never stored: every unordered pair of distinct nodes is an
//! inner-interaction edge.

use crate::data::{node_representation, AttributeId, AttributeValuePair, DataSample, EmbeddingTable};
use crate::error::{GmcfError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub pair: AttributeValuePair,
    /// `val * v_att`
    pub repr: Vec<f64>,
}

impl GraphNode {
    pub fn att(&self) -> AttributeId {
        self.pair.att
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeGraph {
    nodes: Vec<GraphNode>,
}

impl AttributeGraph {
    pub fn from_pairs(pairs: &[AttributeValuePair], table: &EmbeddingTable) -> Result<Self> {
        if pairs.is_empty() {
            return Err(GmcfError::Contract("an attribute graph needs at least one node".into()));
        }
        let nodes = pairs
            .iter()
            .map(|pair| {
                Ok(GraphNode {
                    pair: *pair,
                    repr: node_representation(pair, table)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        let p = self.nodes.len();
        p * (p - 1) / 2
    }

    /// N(i): every other node. No self-loops.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&j| j != i)
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].repr.len()
    }
}

/// User graph and item graph of one sample, nodes in the sample's attribute order.
pub fn build_graphs(sample: &DataSample, table: &EmbeddingTable) -> Result<(AttributeGraph, AttributeGraph)> {
    Ok((
        AttributeGraph::from_pairs(&sample.user_chars, table)?,
        AttributeGraph::from_pairs(&sample.item_chars, table)?,
    ))
}
