//! Prompt ensemble: cluster the entities emitted by several prompt runs by
//! embedding similarity and give every cluster a majority-voted label, or
//! `unknown` when no label wins at least two votes outright.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EntityLabel;
use crate::embedding::{cosine_similarity, embed_all, EmbeddingError, EmbeddingProvider, EmbeddingVector};
use crate::prompt::PromptStrategy;
use crate::response::ExtractedEntity;

/// Minimum votes for a label to win a cluster.
pub const MIN_SUPPORT: usize = 2;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least 2 prompt runs, got {0}")]
    TooFewRuns(usize),
    #[error("entity `{text}` is tagged {found} but filed under {key}")]
    SourceMismatch { text: String, found: PromptStrategy, key: PromptStrategy },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Per-strategy extraction results feeding the ensemble.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    runs: BTreeMap<PromptStrategy, Vec<ExtractedEntity>>,
}

impl PredictionSet {
    pub fn new(runs: BTreeMap<PromptStrategy, Vec<ExtractedEntity>>) -> Result<Self, EnsembleError> {
        if runs.len() < 2 {
            return Err(EnsembleError::TooFewRuns(runs.len()));
        }
        for (key, entities) in &runs {
            if let Some(e) = entities.iter().find(|e| e.source != *key) {
                return Err(EnsembleError::SourceMismatch { text: e.text.clone(), found: e.source, key: *key });
            }
        }
        Ok(Self { runs })
    }

    pub fn strategies(&self) -> Vec<PromptStrategy> {
        self.runs.keys().copied().collect()
    }

    /// All entities ordered by strategy name, then ordinal.
    pub fn flatten(&self) -> Vec<ExtractedEntity> {
        let mut all: Vec<ExtractedEntity> = self.runs.values().flatten().cloned().collect();
        all.sort_by(|a, b| a.source.cmp(&b.source).then(a.ordinal.cmp(&b.ordinal)));
        all
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityCluster {
    pub members: Vec<(ExtractedEntity, EmbeddingVector)>,
    /// Text of the founding member.
    pub representative: String,
    pub sources: BTreeSet<PromptStrategy>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub text: String,
    pub label: EntityLabel,
    pub source: PromptStrategy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub text: String,
    pub label: EntityLabel,
    pub support: usize,
    pub cluster_size: usize,
    pub members: Vec<ClusterMember>,
}

/// Greedy leader clustering over items `0..n` in index order. Each item
/// joins the first cluster whose leader (first member) has
/// `similarity(leader, item) >= tau`, or founds a new cluster. Clusters are
/// returned in creation order as lists of item indices.
pub fn leader_cluster<E>(
    n: usize,
    tau: f64,
    mut similarity: impl FnMut(usize, usize) -> Result<f64, E>,
) -> Result<Vec<Vec<usize>>, E> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    'items: for item in 0..n {
        for cluster in clusters.iter_mut() {
            if similarity(cluster[0], item)? >= tau {
                cluster.push(item);
                continue 'items;
            }
        }
        clusters.push(vec![item]);
    }
    Ok(clusters)
}

/// Leader-clusters entities (already in deterministic order) by cosine
/// similarity of their embeddings.
pub fn cluster_entities(
    all_entities: Vec<(ExtractedEntity, EmbeddingVector)>,
    tau: f64,
) -> Result<Vec<EntityCluster>, EmbeddingError> {
    let groups = leader_cluster(all_entities.len(), tau, |leader, item| {
        cosine_similarity(&all_entities[leader].1, &all_entities[item].1).map(|s| s.value())
    })?;
    let mut slots: Vec<Option<(ExtractedEntity, EmbeddingVector)>> = all_entities.into_iter().map(Some).collect();
    Ok(groups
        .into_iter()
        .map(|indices| {
            let members: Vec<(ExtractedEntity, EmbeddingVector)> =
                indices.iter().map(|&i| slots[i].take().expect("each item in one cluster")).collect();
            EntityCluster {
                representative: members[0].0.text.clone(),
                sources: members.iter().map(|(e, _)| e.source).collect(),
                members,
            }
        })
        .collect())
}

/// Majority label with abstention. `unknown` members never win; the winner
/// needs at least [`MIN_SUPPORT`] votes and a strict maximum. Returns the
/// label and its support (0 when abstaining).
pub fn vote(labels: impl IntoIterator<Item = EntityLabel>) -> (EntityLabel, usize) {
    let mut freq: BTreeMap<EntityLabel, usize> = BTreeMap::new();
    for label in labels.into_iter().filter(|l| l.is_gold()) {
        *freq.entry(label).or_default() += 1;
    }
    let Some(&best) = freq.values().max() else {
        return (EntityLabel::Unknown, 0);
    };
    let winners: Vec<EntityLabel> = freq.iter().filter(|(_, &f)| f == best).map(|(&l, _)| l).collect();
    if best >= MIN_SUPPORT && winners.len() == 1 {
        (winners[0], best)
    } else {
        (EntityLabel::Unknown, 0)
    }
}

pub fn majority_vote(cluster: &EntityCluster) -> EnsemblePrediction {
    let (label, support) = vote(cluster.members.iter().map(|(e, _)| e.label));
    EnsemblePrediction {
        text: cluster.representative.clone(),
        label,
        support,
        cluster_size: cluster.members.len(),
        members: cluster
            .members
            .iter()
            .map(|(e, _)| ClusterMember { text: e.text.clone(), label: e.label, source: e.source })
            .collect(),
    }
}

/// Flatten, embed, cluster and vote. Output follows cluster creation order.
pub fn run_ensemble(
    predictions: &PredictionSet,
    tau: f64,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<EnsemblePrediction>, EnsembleError> {
    let entities = predictions.flatten();
    let texts: Vec<String> = entities.iter().map(|e| e.text.clone()).collect();
    let vectors = embed_all(&texts, provider)?;
    let clusters = cluster_entities(entities.into_iter().zip(vectors).collect(), tau)?;
    Ok(clusters.iter().map(majority_vote).collect())
}
