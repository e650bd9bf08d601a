//! Assignment of text slots to image branches, plus text-diversity
//! statistics.
//!
//! Three regimes: identity (M == H, part-by-part), grouped (M >= H,
//! deterministic agglomerative clustering of the texts), and free (each text
//! goes to its most similar branch).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity_matrix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    Identity,
    Grouped,
    Free,
}

impl std::fmt::Display for PlanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlanMode::Identity => write!(f, "identity"),
            PlanMode::Grouped => write!(f, "grouped"),
            PlanMode::Free => write!(f, "free"),
        }
    }
}

/// Maps each of M text slots to an image branch in [0, H).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchingPlan {
    pub assignment: Vec<usize>,
    pub mode: PlanMode,
}

impl MatchingPlan {
    pub fn texts(&self) -> usize {
        self.assignment.len()
    }

    pub fn validate(&self, branches: usize) -> Result<()> {
        if let Some(&bad) = self.assignment.iter().find(|&&b| b >= branches) {
            return Err(Error::PlanOutOfRange {
                entry: bad,
                branches,
            });
        }
        if self.mode == PlanMode::Identity {
            if self.assignment.len() != branches {
                return Err(Error::CardinalityMismatch(format!(
                    "identity plan needs M == H, got M={} H={branches}",
                    self.assignment.len()
                )));
            }
            if self.assignment.iter().enumerate().any(|(m, &b)| m != b) {
                return Err(Error::CardinalityMismatch(
                    "identity plan must map slot m to branch m".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Slot m goes to branch m; requires M == H.
pub fn plan_identity(texts: usize, branches: usize) -> Result<MatchingPlan> {
    if texts != branches {
        return Err(Error::CardinalityMismatch(format!(
            "identity matching needs M == H, got M={texts} H={branches}"
        )));
    }
    Ok(MatchingPlan {
        assignment: (0..texts).collect(),
        mode: PlanMode::Identity,
    })
}

/// Deterministic agglomerative grouping of M texts into H clusters.
///
/// Starts from singletons and repeatedly merges the pair of clusters with
/// the highest average pairwise cosine similarity; ties go to the pair with
/// the lowest smallest-member index (then the lowest other smallest-member).
/// Cluster labels are assigned by ascending smallest member.
pub fn plan_grouped(text_embeddings: &Tensor, branches: usize) -> Result<MatchingPlan> {
    let m = text_embeddings.rows();
    if text_embeddings.rank() != 2 || m == 0 {
        return Err(Error::ShapeMismatch(
            "grouped matching expects [M,d] text embeddings".into(),
        ));
    }
    if m < branches || branches == 0 {
        return Err(Error::CardinalityMismatch(format!(
            "grouped matching needs M >= H >= 1, got M={m} H={branches}"
        )));
    }
    let sims = cosine_similarity_matrix(text_embeddings, text_embeddings)?;
    let mut clusters: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    while clusters.len() > branches {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &x in &clusters[a] {
                    for &y in &clusters[b] {
                        total += sims.get(&[x, y]);
                    }
                }
                let score = total / (clusters[a].len() * clusters[b].len()) as f64;
                let lo = clusters[a][0].min(clusters[b][0]);
                let hi = clusters[a][0].max(clusters[b][0]);
                let better = match &best {
                    None => true,
                    Some((s, l, h, _, _)) => {
                        score > *s || (score == *s && (lo, hi) < (*l, *h))
                    }
                };
                if better {
                    best = Some((score, lo, hi, a, b));
                }
            }
        }
        let (_, _, _, a, b) = best.expect("at least one mergeable pair");
        let absorbed = clusters.remove(b);
        clusters[a].extend(absorbed);
        clusters[a].sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    let mut assignment = vec![0; m];
    for (label, cluster) in clusters.iter().enumerate() {
        for &member in cluster {
            assignment[member] = label;
        }
    }
    Ok(MatchingPlan {
        assignment,
        mode: PlanMode::Grouped,
    })
}

/// Each text goes to the branch with maximum cosine similarity; ties break
/// to the lowest branch index.
pub fn plan_free(image_embeddings: &Tensor, text_embeddings: &Tensor) -> Result<MatchingPlan> {
    let sims = cosine_similarity_matrix(text_embeddings, image_embeddings)?;
    let h = image_embeddings.rows();
    let assignment = (0..text_embeddings.rows())
        .map(|m| {
            let row = sims.row(m);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let _ = h;
    Ok(MatchingPlan {
        assignment,
        mode: PlanMode::Free,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SimilarityStats {
    pub mean: f64,
    pub variance: f64,
}

/// Mean and population variance of the M*(M-1)/2 distinct pairwise cosine
/// similarities between text embeddings.
pub fn text_similarity_stats(text_embeddings: &Tensor) -> Result<SimilarityStats> {
    let m = text_embeddings.rows();
    if m < 2 {
        return Err(Error::TooFewTexts(m));
    }
    let sims = cosine_similarity_matrix(text_embeddings, text_embeddings)?;
    let mut values = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            values.push(sims.get(&[i, j]));
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SimilarityStats { mean, variance })
}
