use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    EmbeddingUp,
    GradientDown,
}

/// One payload crossing the party boundary during a training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub direction: Direction,
    pub party_id: usize,
    pub batch_index: usize,
    pub payload: Matrix,
}

/// Elementwise sum of one `EmbeddingUp` per expected party. Summation runs
/// in ascending party-id order regardless of arrival order.
pub fn aggregate_embeddings(messages: &[RoundMessage], expected_parties: &[usize]) -> Result<Matrix> {
    if messages.is_empty() {
        return Err(Error::Protocol("no embeddings to aggregate".into()));
    }
    let batch = messages[0].batch_index;
    let shape = messages[0].payload.shape();
    for m in messages {
        if m.direction != Direction::EmbeddingUp {
            return Err(Error::Protocol(format!(
                "party {} sent {:?} during aggregation",
                m.party_id, m.direction
            )));
        }
        if m.batch_index != batch {
            return Err(Error::Protocol(format!(
                "party {} sent batch {} while aggregating batch {batch}",
                m.party_id, m.batch_index
            )));
        }
        if m.payload.shape() != shape {
            return Err(Error::Protocol(format!(
                "party {} embedding is {:?}, expected {shape:?}",
                m.party_id,
                m.payload.shape()
            )));
        }
    }
    let missing: Vec<usize> = expected_parties
        .iter()
        .copied()
        .filter(|p| !messages.iter().any(|m| m.party_id == *p))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!("missing embeddings from parties {missing:?}")));
    }
    let mut ordered: Vec<&RoundMessage> = messages.iter().collect();
    ordered.sort_by_key(|m| m.party_id);
    if ordered.windows(2).any(|w| w[0].party_id == w[1].party_id) {
        return Err(Error::Protocol("duplicate embedding from one party".into()));
    }
    if let Some(extra) = ordered.iter().find(|m| !expected_parties.contains(&m.party_id)) {
        return Err(Error::Protocol(format!("unexpected party {}", extra.party_id)));
    }
    let mut sum = Matrix::zeros(shape.0, shape.1);
    for m in ordered {
        sum.add_assign(&m.payload)?;
    }
    Ok(sum)
}
