//! Inference-time fusion, retrieval and classification metrics, branch
//! customization, and attention-mask export.
//!
//! Fusion always applies to whichever side of a pair carries multiple
//! branches. Average fusion deliberately skips renormalizing the mean image
//! embedding: scoring against the averaged embedding and averaging
//! per-branch scores are then the same linear map, which is the efficiency
//! identity the average strategy rests on.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ViewTag;
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};
use crate::training::{run_indexed, LoadedDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Max,
    NormMax,
    Average,
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionKind::Max => write!(f, "max"),
            FusionKind::NormMax => write!(f, "norm_max"),
            FusionKind::Average => write!(f, "average"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionStrategy {
    pub kind: FusionKind,
    /// Branch indices to fuse over; all branches when unset.
    pub branch_subset: Option<Vec<usize>>,
}

impl FusionStrategy {
    pub fn new(kind: FusionKind) -> Self {
        Self {
            kind,
            branch_subset: None,
        }
    }

    pub fn with_subset(kind: FusionKind, subset: Vec<usize>) -> Self {
        Self {
            kind,
            branch_subset: Some(subset),
        }
    }

    fn subset(&self, branches: usize) -> Result<Vec<usize>> {
        match &self.branch_subset {
            None => Ok((0..branches).collect()),
            Some(s) => {
                if s.is_empty() {
                    return Err(Error::EmptySubset);
                }
                if let Some(&bad) = s.iter().find(|&&b| b >= branches) {
                    return Err(Error::BranchOutOfRange {
                        branch: bad,
                        branches,
                    });
                }
                Ok(s.clone())
            }
        }
    }
}

/// Per-branch score mean/std over a gallery; required by norm-max fusion.
#[derive(Clone, Debug)]
pub struct GalleryStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-branch statistics of one image set's scores over a text gallery.
pub fn compute_gallery_stats(image_embeddings: &Tensor, gallery: &Tensor) -> Result<GalleryStats> {
    let h = image_embeddings.rows();
    let q = gallery.rows();
    if q == 0 {
        return Err(Error::SizeMismatch("empty gallery".into()));
    }
    let mut mean = vec![0.0; h];
    let mut std = vec![0.0; h];
    for b in 0..h {
        let scores: Vec<f64> = (0..q).map(|i| dot(image_embeddings.row(b), gallery.row(i))).collect();
        let mu = scores.iter().sum::<f64>() / q as f64;
        let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / q as f64;
        mean[b] = mu;
        std[b] = var.sqrt();
    }
    Ok(GalleryStats { mean, std })
}

/// Fused scores of one image embedding set against Q text embeddings.
///
/// Average: `<mean_h v_h, t_q>` over the branch subset, mean not
/// renormalized. Max: best per-branch score. NormMax: per-branch z-score
/// against `gallery_stats`, then max.
pub fn fuse_scores(
    image_embeddings: &Tensor,
    text_embeddings: &Tensor,
    strategy: &FusionStrategy,
    gallery_stats: Option<&GalleryStats>,
) -> Result<Vec<f64>> {
    if image_embeddings.rank() != 2 || text_embeddings.rank() != 2 {
        return Err(Error::ShapeMismatch(
            "fuse_scores expects [H,d] images and [Q,d] texts".into(),
        ));
    }
    if image_embeddings.cols() != text_embeddings.cols() {
        return Err(Error::ShapeMismatch(format!(
            "dimension mismatch {} vs {}",
            image_embeddings.cols(),
            text_embeddings.cols()
        )));
    }
    let subset = strategy.subset(image_embeddings.rows())?;
    let q = text_embeddings.rows();
    match strategy.kind {
        FusionKind::Average => {
            let d = image_embeddings.cols();
            let mut mean = vec![0.0; d];
            for &b in &subset {
                for (acc, v) in mean.iter_mut().zip(image_embeddings.row(b)) {
                    *acc += v;
                }
            }
            for v in &mut mean {
                *v /= subset.len() as f64;
            }
            Ok((0..q).map(|i| dot(&mean, text_embeddings.row(i))).collect())
        }
        FusionKind::Max => Ok((0..q)
            .map(|i| {
                subset
                    .iter()
                    .map(|&b| dot(image_embeddings.row(b), text_embeddings.row(i)))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()),
        FusionKind::NormMax => {
            let stats = gallery_stats.ok_or(Error::MissingGalleryStats)?;
            if stats.mean.len() != image_embeddings.rows() {
                return Err(Error::SizeMismatch(format!(
                    "stats cover {} branches, image set has {}",
                    stats.mean.len(),
                    image_embeddings.rows()
                )));
            }
            Ok((0..q)
                .map(|i| {
                    subset
                        .iter()
                        .map(|&b| {
                            let s = dot(image_embeddings.row(b), text_embeddings.row(i));
                            (s - stats.mean[b]) / stats.std[b].max(1e-12)
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect())
        }
    }
}

impl crate::encoders::EmbeddingSet {
    /// Fused scores of this set's image branches against its own texts.
    pub fn fuse(
        &self,
        strategy: &FusionStrategy,
        gallery_stats: Option<&GalleryStats>,
    ) -> Result<Vec<f64>> {
        fuse_scores(
            &self.image_embeddings,
            &self.text_embeddings,
            strategy,
            gallery_stats,
        )
    }

    /// Unit-normalized mean of the selected image branches.
    pub fn customize(&self, subset: &[usize]) -> Result<Tensor> {
        customize_branches(&self.image_embeddings, subset)
    }
}

/// Unit-normalized mean of the selected branch embeddings.
pub fn customize_branches(image_embeddings: &Tensor, subset: &[usize]) -> Result<Tensor> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let strategy = FusionStrategy::with_subset(FusionKind::Average, subset.to_vec());
    let chosen = strategy.subset(image_embeddings.rows())?;
    let d = image_embeddings.cols();
    let mut mean = vec![0.0; d];
    for &b in &chosen {
        for (acc, v) in mean.iter_mut().zip(image_embeddings.row(b)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= chosen.len() as f64;
    }
    crate::tensor::l2_normalize(&Tensor::vector(mean)?)
}

/// Scores of one query vector against a gallery of embedding sets, fused
/// over each set's branches; norm-max statistics are taken across the
/// gallery per branch.
fn fuse_against_sets(
    query: &[f64],
    gallery: &[Tensor],
    strategy: &FusionStrategy,
) -> Result<Vec<f64>> {
    let h = gallery[0].rows();
    let subset = strategy.subset(h)?;
    let raw: Vec<Vec<f64>> = gallery
        .iter()
        .map(|set| (0..h).map(|b| dot(set.row(b), query)).collect())
        .collect();
    match strategy.kind {
        FusionKind::Average => Ok(raw
            .iter()
            .map(|r| subset.iter().map(|&b| r[b]).sum::<f64>() / subset.len() as f64)
            .collect()),
        FusionKind::Max => Ok(raw
            .iter()
            .map(|r| subset.iter().map(|&b| r[b]).fold(f64::NEG_INFINITY, f64::max))
            .collect()),
        FusionKind::NormMax => {
            let g = gallery.len() as f64;
            let mut mean = vec![0.0; h];
            let mut std = vec![0.0; h];
            for b in 0..h {
                let mu = raw.iter().map(|r| r[b]).sum::<f64>() / g;
                let var = raw.iter().map(|r| (r[b] - mu) * (r[b] - mu)).sum::<f64>() / g;
                mean[b] = mu;
                std[b] = var.sqrt();
            }
            Ok(raw
                .iter()
                .map(|r| {
                    subset
                        .iter()
                        .map(|&b| (r[b] - mean[b]) / std[b].max(1e-12))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect())
        }
    }
}

/// Rank of `target` under descending score with ties broken by lower index.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    let mut rank = 1;
    for (i, &v) in scores.iter().enumerate() {
        if v > s || (v == s && i < target) {
            rank += 1;
        }
    }
    rank
}

/// Recall at each cutoff, in percent. Queries and gallery items are
/// embedding matrices; rows beyond one mark the multi-branch side (only one
/// side may have several rows).
pub fn retrieval_recall(
    queries: &[Tensor],
    gallery: &[Tensor],
    ground_truth: &[usize],
    ks: &[usize],
    strategy: &FusionStrategy,
) -> Result<BTreeMap<usize, f64>> {
    if queries.len() != ground_truth.len() {
        return Err(Error::SizeMismatch(format!(
            "{} queries vs {} ground-truth entries",
            queries.len(),
            ground_truth.len()
        )));
    }
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::SizeMismatch("empty retrieval problem".into()));
    }
    if let Some(&bad) = ground_truth.iter().find(|&&g| g >= gallery.len()) {
        return Err(Error::SizeMismatch(format!(
            "ground truth {bad} outside gallery of {}",
            gallery.len()
        )));
    }
    let gallery_branched = gallery[0].rows() > 1;
    if gallery.iter().any(|g| g.rows() != gallery[0].rows()) {
        return Err(Error::SizeMismatch(
            "gallery items must share a branch count".into(),
        ));
    }

    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (qi, query) in queries.iter().enumerate() {
        let scores = if gallery_branched {
            if query.rows() != 1 {
                return Err(Error::SizeMismatch(
                    "only one side of a retrieval pair may be multi-branch".into(),
                ));
            }
            fuse_against_sets(query.row(0), gallery, strategy)?
        } else {
            let texts = Tensor::stack_rows(
                &gallery.iter().map(|g| g.row_tensor(0)).collect::<Vec<_>>(),
            )?;
            let stats = if strategy.kind == FusionKind::NormMax {
                Some(compute_gallery_stats(query, &texts)?)
            } else {
                None
            };
            fuse_scores(query, &texts, strategy, stats.as_ref())?
        };
        let rank = rank_of(&scores, ground_truth[qi]);
        for (&k, h) in hits.iter_mut() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|(k, h)| (k, 100.0 * h as f64 / queries.len() as f64))
        .collect())
}

/// Top-1/top-5 zero-shot accuracy (percent) of image sets against class
/// text embeddings.
pub fn zero_shot_classify(
    image_sets: &[Tensor],
    labels: &[usize],
    class_texts: &Tensor,
    strategy: &FusionStrategy,
) -> Result<(f64, f64)> {
    if class_texts.rows() == 0 {
        return Err(Error::SizeMismatch("need at least one class".into()));
    }
    if image_sets.len() != labels.len() {
        return Err(Error::SizeMismatch(format!(
            "{} images vs {} labels",
            image_sets.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_texts.rows()) {
        return Err(Error::SizeMismatch(format!(
            "label {bad} outside {} classes",
            class_texts.rows()
        )));
    }
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (set, &label) in image_sets.iter().zip(labels) {
        let stats = if strategy.kind == FusionKind::NormMax {
            Some(compute_gallery_stats(set, class_texts)?)
        } else {
            None
        };
        let scores = fuse_scores(set, class_texts, strategy, stats.as_ref())?;
        let rank = rank_of(&scores, label);
        if rank <= 1 {
            top1 += 1;
        }
        if rank <= 5 {
            top5 += 1;
        }
    }
    let n = image_sets.len() as f64;
    Ok((100.0 * top1 as f64 / n, 100.0 * top5 as f64 / n))
}

/// Indices of the ceil(fraction * P) highest-scoring patches, ties broken
/// toward lower patch index; returned ascending.
pub fn top_patch_mask(scores: &[f64], fraction: f64) -> Vec<usize> {
    let p = scores.len();
    let count = (fraction * p as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(count).collect();
    selected.sort_unstable();
    selected
}

pub struct AttentionMask {
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub grid: usize,
}

/// Class-token attention mask for one branch: selects the top 20% of
/// patches, dumps per-patch scores as CSV and a grid heatmap as PGM.
pub fn attention_mask(
    model: &Model,
    image: &Tensor,
    branch: usize,
    csv_path: &Path,
    pgm_path: &Path,
) -> Result<AttentionMask> {
    let scores = model.patch_attention(image, branch)?;
    let selected = top_patch_mask(&scores, 0.2);
    let grid = model.config.grid();

    let mut csv = String::from("patch_index,score\n");
    for (i, s) in scores.iter().enumerate() {
        csv.push_str(&format!("{i},{s}\n"));
    }
    fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
    crate::data::write_pgm(pgm_path, grid, &scores)?;
    Ok(AttentionMask {
        scores,
        selected,
        grid,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RecallAtK {
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
}

impl RecallAtK {
    pub fn from_map(map: &BTreeMap<usize, f64>) -> RecallAtK {
        RecallAtK {
            r1: map.get(&1).copied().unwrap_or(0.0),
            r5: map.get(&5).copied().unwrap_or(0.0),
            r10: map.get(&10).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t: RecallAtK,
    pub t2i: RecallAtK,
}

/// Dataset encoded for evaluation: one `[H,d]` set per image, one `[d]` vector
/// per text slot.
pub struct EncodedEval {
    pub image_sets: Vec<Tensor>,
    pub texts: Vec<Vec<Tensor>>,
    pub views: Vec<ViewTag>,
}

pub fn encode_dataset(model: &Model, data: &LoadedDataset, threads: usize) -> Result<EncodedEval> {
    let image_sets: Vec<Result<Tensor>> = run_indexed(data.samples.len(), threads, |i| {
        model.encode_image(&data.images[i])
    });
    let texts: Vec<Result<Vec<Tensor>>> = run_indexed(data.samples.len(), threads, |i| {
        data.samples[i]
            .tokens
            .iter()
            .map(|t| model.encode_text(t))
            .collect()
    });
    Ok(EncodedEval {
        image_sets: image_sets.into_iter().collect::<Result<_>>()?,
        texts: texts.into_iter().collect::<Result<_>>()?,
        views: data.samples[0].texts.iter().map(|(v, _)| *v).collect(),
    })
}

/// Exact-match retrieval in both directions for one text slot: text queries
/// against the image gallery and image queries against that slot's texts.
pub fn per_view_retrieval(
    enc: &EncodedEval,
    slot: usize,
    strategy: &FusionStrategy,
) -> Result<RetrievalReport> {
    let n = enc.image_sets.len();
    let gt: Vec<usize> = (0..n).collect();
    let text_items: Vec<Tensor> = enc
        .texts
        .iter()
        .map(|t| t[slot].reshape(vec![1, t[slot].len()]))
        .collect::<Result<_>>()?;
    let t2i = retrieval_recall(&text_items, &enc.image_sets, &gt, &[1, 5, 10], strategy)?;
    let i2t = retrieval_recall(&enc.image_sets, &text_items, &gt, &[1, 5, 10], strategy)?;
    Ok(RetrievalReport {
        i2t: RecallAtK::from_map(&i2t),
        t2i: RecallAtK::from_map(&t2i),
    })
}
