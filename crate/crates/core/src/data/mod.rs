//! Synthetic (image, multi-texts) dataset generation, manifest ingestion,
//! and caption filtering.

pub mod caption;
pub mod render;
pub mod scene;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use caption::{
    background_class_text, bow_embedding, caption_view, object_class_text, ViewTag, Vocabulary,
    EOS_TOKEN, UNK_TOKEN,
};
pub use render::{pixel_region, read_ppm, render_image, write_pgm, write_ppm, PixelRegion};
pub use scene::{
    generate_scene, LatentScene, ATTRIBUTE_COUNT, BACKGROUND_COUNT, OBJECT_COUNT, RELATION_COUNT,
    STYLE_COUNT,
};

use crate::error::{Error, Result};

pub const MAX_TEXT_TOKENS: usize = 77;
const MIN_CAPTION_CHARS: usize = 10;
const RESAMPLE_ATTEMPTS: u64 = 5;

/// splitmix64; used to derive independent seeds from (base, index) pairs.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E3779B97F4A7C15);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// One image plus its view-tagged texts; the unit of the training dataset.
#[derive(Clone, Debug)]
pub struct MultiTextSample {
    pub id: u64,
    /// Path as written in the manifest, relative to the manifest directory.
    pub image_rel: String,
    /// Resolved on ingest.
    pub image_path: PathBuf,
    pub texts: Vec<(ViewTag, String)>,
    /// Tokenized texts (terminal token included), aligned with `texts`.
    pub tokens: Vec<Vec<usize>>,
    pub scene: Option<LatentScene>,
}

impl MultiTextSample {
    pub fn text_for(&self, view: ViewTag) -> Option<&str> {
        self.texts
            .iter()
            .find(|(v, _)| *v == view)
            .map(|(_, t)| t.as_str())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestText {
    view: ViewTag,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: u64,
    image: String,
    texts: Vec<ManifestText>,
    scene: Option<LatentScene>,
}

/// Write `n` rendered scenes plus a JSONL manifest and the vocabulary file
/// under `out_dir`; returns the manifest path. Deterministic in
/// (n, views, base_seed, image_size).
pub fn generate_dataset(
    n: usize,
    views: &[ViewTag],
    base_seed: u64,
    image_size: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be positive".into()));
    }
    if views.is_empty() {
        return Err(Error::InvalidConfig("need at least one view".into()));
    }
    if views.contains(&ViewTag::RawAlt) {
        return Err(Error::UnsupportedView("raw_alt".into()));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = Vec::new();
    for i in 0..n {
        let scene = generate_scene(mix_seed(base_seed, i as u64));
        let image = render_image(&scene, image_size)?;
        let rel = format!("images/img_{i:05}.ppm");
        write_ppm(&out_dir.join(&rel), &image)?;

        let mut texts = Vec::with_capacity(views.len());
        for (vi, &view) in views.iter().enumerate() {
            let caption_base = mix_seed(base_seed, (i as u64) << 16 | (vi as u64 + 1));
            // Too-short captions are re-sampled with stepped seeds, then
            // dropped outright.
            let mut accepted = None;
            for attempt in 0..RESAMPLE_ATTEMPTS {
                let text = caption_view(&scene, view, mix_seed(caption_base, attempt))?;
                if text.chars().count() > MIN_CAPTION_CHARS {
                    accepted = Some(text);
                    break;
                }
            }
            if let Some(text) = accepted {
                texts.push(ManifestText { view, text });
            }
        }
        if texts.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "sample {i} lost every caption to the length filter"
            )));
        }
        let record = ManifestRecord {
            id: i as u64,
            image: rel,
            texts,
            scene: Some(scene),
        };
        manifest.push(serde_json::to_string(&record).expect("manifest record serializes"));
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for line in &manifest {
        writeln!(f, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }

    let vocab_path = out_dir.join("vocab.json");
    fs::write(&vocab_path, Vocabulary::builtin().to_json())
        .map_err(|e| Error::io(&vocab_path, e))?;
    Ok(manifest_path)
}

/// Parse a JSONL manifest, verify images exist, tokenize every text.
/// Errors carry their 1-based manifest line.
pub fn ingest_jsonl(manifest_path: &Path) -> Result<Vec<MultiTextSample>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let contents =
        fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let vocab = Vocabulary::builtin();
    let mut samples = Vec::new();
    for (i, raw) in contents.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.texts.is_empty() {
            return Err(Error::Parse {
                line,
                message: "sample has no texts".into(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for t in &record.texts {
            if t.view != ViewTag::RawAlt && !seen.insert(t.view) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate view {}", t.view),
                });
            }
        }
        let image_path = base.join(&record.image);
        if !image_path.is_file() {
            return Err(Error::MissingImage(image_path));
        }
        let mut tokens = Vec::with_capacity(record.texts.len());
        for t in &record.texts {
            let ids = vocab.tokenize(&t.text);
            if ids.len() > MAX_TEXT_TOKENS {
                return Err(Error::TextTooLong {
                    line,
                    len: ids.len(),
                    max: MAX_TEXT_TOKENS,
                });
            }
            tokens.push(ids);
        }
        samples.push(MultiTextSample {
            id: record.id,
            image_rel: record.image,
            image_path,
            texts: record.texts.into_iter().map(|t| (t.view, t.text)).collect(),
            tokens,
            scene: record.scene,
        });
    }
    Ok(samples)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ViewWordStats {
    pub avg_words: f64,
    pub word_variance: f64,
}

/// Text-diversity summary of a dataset: bag-of-words pairwise similarity
/// averaged over samples, plus whitespace word-count statistics per view.
#[derive(Clone, Debug, Serialize)]
pub struct DiversityReport {
    pub samples: usize,
    pub mean_pairwise_similarity: f64,
    pub variance_pairwise_similarity: f64,
    pub per_view: std::collections::BTreeMap<String, ViewWordStats>,
}

pub fn diversity_report(samples: &[MultiTextSample]) -> Result<DiversityReport> {
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for s in samples {
        if s.texts.len() < 2 {
            continue;
        }
        let rows: Vec<crate::tensor::Tensor> = s
            .texts
            .iter()
            .map(|(_, t)| bow_embedding(t))
            .collect::<Result<_>>()?;
        let stats =
            crate::matching::text_similarity_stats(&crate::tensor::Tensor::stack_rows(&rows)?)?;
        means.push(stats.mean);
        vars.push(stats.variance);
    }
    if means.is_empty() {
        return Err(Error::TooFewTexts(0));
    }
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    let variance = vars.iter().sum::<f64>() / vars.len() as f64;

    let mut counts: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for s in samples {
        for (view, text) in &s.texts {
            counts
                .entry(view.name().to_string())
                .or_default()
                .push(text.split_whitespace().count() as f64);
        }
    }
    let per_view = counts
        .into_iter()
        .map(|(view, ws)| {
            let avg = ws.iter().sum::<f64>() / ws.len() as f64;
            let var = ws.iter().map(|w| (w - avg) * (w - avg)).sum::<f64>() / ws.len() as f64;
            (
                view,
                ViewWordStats {
                    avg_words: avg,
                    word_variance: var,
                },
            )
        })
        .collect();

    Ok(DiversityReport {
        samples: samples.len(),
        mean_pairwise_similarity: mean,
        variance_pairwise_similarity: variance,
        per_view,
    })
}

/// Image-text scorer used by the optional second filtering stage.
pub trait CaptionScorer {
    /// Cosine-style score of text `text_idx` against the sample's image.
    fn score(&self, sample: &MultiTextSample, text_idx: usize) -> f64;
}

impl<F: Fn(&MultiTextSample, usize) -> f64> CaptionScorer for F {
    fn score(&self, sample: &MultiTextSample, text_idx: usize) -> f64 {
        self(sample, text_idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    /// Character length at or below the minimum.
    TooShort,
    /// Scored below the provided threshold.
    LowScore,
    /// Every text of the sample was rejected.
    NoTextsLeft,
}

#[derive(Debug)]
pub struct Rejection {
    pub sample_id: u64,
    pub view: Option<ViewTag>,
    pub reason: RejectReason,
}

pub struct FilterOutcome {
    pub kept: Vec<MultiTextSample>,
    pub rejected: Vec<Rejection>,
}

/// Drop texts with character length <= `min_chars` and, when a scorer is
/// given, texts scoring below `score_threshold`; samples left with no texts
/// are dropped wholesale.
pub fn filter_captions(
    samples: Vec<MultiTextSample>,
    min_chars: usize,
    score_threshold: Option<f64>,
    scorer: Option<&dyn CaptionScorer>,
) -> Result<FilterOutcome> {
    if let Some(th) = score_threshold {
        if scorer.is_none() {
            return Err(Error::InvalidConfig(
                "score threshold given without a scorer".into(),
            ));
        }
        if !(-1.0..=1.0).contains(&th) {
            return Err(Error::InvalidConfig(format!(
                "score threshold {th} outside [-1, 1]"
            )));
        }
    }
    let mut kept = Vec::with_capacity(samples.len());
    let mut rejected = Vec::new();
    for sample in samples {
        let mut texts = Vec::new();
        let mut tokens = Vec::new();
        for (idx, (view, text)) in sample.texts.iter().enumerate() {
            if text.chars().count() <= min_chars {
                rejected.push(Rejection {
                    sample_id: sample.id,
                    view: Some(*view),
                    reason: RejectReason::TooShort,
                });
                continue;
            }
            if let (Some(th), Some(sc)) = (score_threshold, scorer) {
                if sc.score(&sample, idx) < th {
                    rejected.push(Rejection {
                        sample_id: sample.id,
                        view: Some(*view),
                        reason: RejectReason::LowScore,
                    });
                    continue;
                }
            }
            texts.push((*view, text.clone()));
            tokens.push(sample.tokens[idx].clone());
        }
        if texts.is_empty() {
            rejected.push(Rejection {
                sample_id: sample.id,
                view: None,
                reason: RejectReason::NoTextsLeft,
            });
        } else {
            kept.push(MultiTextSample {
                texts,
                tokens,
                ..sample
            });
        }
    }
    Ok(FilterOutcome { kept, rejected })
}
