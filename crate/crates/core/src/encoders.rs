//! Two-tower transformer encoders.
//!
//! The image tower comes in three variants: a vanilla single-class-token
//! encoder, a CLS variant that carries H class tokens through one shared
//! sequence, and an MLP variant that replicates the down-projection of the
//! final few feed-forward blocks H times so each branch finishes the forward
//! pass through its own replicas. Both towers project into a shared
//! embedding space and emit unit-norm rows.

use serde::{Deserialize, Serialize};

use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::autodiff::{NodeId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Cls,
    Mlp,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Vanilla => write!(f, "vanilla"),
            Variant::Cls => write!(f, "cls"),
            Variant::Mlp => write!(f, "mlp"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub branch_count: usize,
    pub variant: Variant,
    pub vocab_size: usize,
    pub max_text_tokens: usize,
    pub ffn_dim: usize,
    /// How many of the final blocks carry parallel down-projections in the
    /// MLP variant.
    pub mlp_expanded_blocks: usize,
    /// Initial temperature 1/exp(log_scale); stored as its reciprocal here.
    pub temperature_init: f64,
    pub temperature_clamp_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            width: 64,
            depth: 4,
            heads: 4,
            embed_dim: 64,
            branch_count: 1,
            variant: Variant::Vanilla,
            vocab_size: 128,
            max_text_tokens: 77,
            ffn_dim: 256,
            mlp_expanded_blocks: 3,
            temperature_init: 0.07,
            temperature_clamp_max: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.variant == Variant::Vanilla && self.branch_count != 1 {
            return Err(Error::InvalidConfig(
                "vanilla variant requires branch_count 1".into(),
            ));
        }
        if self.branch_count == 0 || self.depth == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig(
                "branch_count, depth and embed_dim must be positive".into(),
            ));
        }
        if self.variant == Variant::Mlp && self.mlp_expanded_blocks > self.depth {
            return Err(Error::InvalidConfig(format!(
                "mlp_expanded_blocks {} exceeds depth {}",
                self.mlp_expanded_blocks, self.depth
            )));
        }
        if self.vocab_size < 2 || self.max_text_tokens == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidConfig(
                "vocab_size, max_text_tokens and ffn_dim must be positive".into(),
            ));
        }
        if self.temperature_init <= 0.0 || self.temperature_clamp_max <= 0.0 {
            return Err(Error::InvalidConfig(
                "temperature settings must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Rows of class tokens physically present in the image sequence.
    fn cls_rows(&self) -> usize {
        match self.variant {
            Variant::Cls => self.branch_count,
            _ => 1,
        }
    }
}

/// Learnable softmax temperature in log-scale parameterization.
#[derive(Clone, Copy, Debug)]
pub struct Temperature {
    pub log_scale: f64,
    pub clamp_max: f64,
}

impl Temperature {
    pub fn tau(&self) -> f64 {
        1.0 / self.log_scale.exp()
    }

    /// Scale applied to cosine logits, clamped to `clamp_max`.
    pub fn clamped_scale(&self) -> f64 {
        self.log_scale.exp().min(self.clamp_max)
    }
}

/// H unit-norm image embeddings plus M unit-norm text embeddings sharing one
/// space.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub image_embeddings: Tensor,
    pub text_embeddings: Tensor,
}

impl EmbeddingSet {
    pub fn new(image_embeddings: Tensor, text_embeddings: Tensor) -> Result<Self> {
        for t in [&image_embeddings, &text_embeddings] {
            if t.rank() != 2 {
                return Err(Error::ShapeMismatch(
                    "embedding sets hold [rows, d] matrices".into(),
                ));
            }
            for i in 0..t.rows() {
                let n = crate::tensor::norm(t.row(i));
                if (n - 1.0).abs() > 1e-6 {
                    return Err(Error::ShapeMismatch(format!(
                        "embedding row {i} has norm {n}, expected 1"
                    )));
                }
            }
        }
        if image_embeddings.cols() != text_embeddings.cols() {
            return Err(Error::ShapeMismatch(
                "image and text embeddings must share a dimension".into(),
            ));
        }
        Ok(Self {
            image_embeddings,
            text_embeddings,
        })
    }
}

/// Parameter counts split into the single-branch base and the extra weight
/// spent on branches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub base: usize,
    pub branch_overhead: usize,
    pub overhead_fraction: f64,
}

/// Closed-form parameter tally for a config; the test suite cross-checks it
/// against direct enumeration of the instantiated tensors.
pub fn count_parameters(config: &ModelConfig) -> Result<ParamCount> {
    config.validate()?;
    let w = config.width;
    let ffn = config.ffn_dim;
    let d = config.embed_dim;
    let block = 2 * w            // ln1
        + 3 * (w * w + w)        // q, k, v
        + (w * w + w)            // attention out
        + 2 * w                  // ln2
        + (w * ffn + ffn)        // fc1
        + (ffn * w + w); // fc2
    let tower_common = config.depth * block + 2 * w + w * d;
    let text = config.vocab_size * w + config.max_text_tokens * w + tower_common;
    let image = config.patch_dim() * w + w      // patch embedding
        + w                                     // one class token
        + (config.patch_count() + 1) * w        // positions: patches + class slot
        + tower_common;
    let base = text + image + 1; // +1 for the temperature
    let h = config.branch_count;
    let branch_overhead = match config.variant {
        Variant::Vanilla => 0,
        Variant::Cls => (h - 1) * w,
        Variant::Mlp => (h - 1) * config.mlp_expanded_blocks * (ffn * w + w),
    };
    Ok(ParamCount {
        total: base + branch_overhead,
        base,
        branch_overhead,
        overhead_fraction: branch_overhead as f64 / base as f64,
    })
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Per-parameter-name RNG stream so initialization is independent of
/// construction order.
fn name_stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a64(name).wrapping_add(seed.wrapping_mul(0x9E3779B97F4A7C15)))
}

/// Normal(0, std) truncated at two standard deviations.
fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n)
        .map(|_| loop {
            let x = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect()
}

/// One tower's forward output on a tape.
pub struct ImageForward {
    /// `[H, d]` unit-norm branch embeddings.
    pub embeddings: NodeId,
    /// Final-block attention nodes: one shared node for vanilla/CLS, one per
    /// branch stream for MLP.
    pub final_attention: Vec<NodeId>,
    /// Class-token rows at the head of the sequence.
    pub cls_rows: usize,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

struct BlockIds {
    ln1_g: usize,
    ln1_b: usize,
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    o_w: usize,
    o_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    /// Plain fc2, or all H replicas for an expanded block.
    fc2: Vec<(usize, usize)>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let w = config.width;
        let std = 0.02;

        let weight = |params: &mut ParamSet, name: String, shape: Vec<usize>| -> Result<()> {
            let n = shape.iter().product();
            let mut rng = name_stream(seed, &name);
            params.add(name, Tensor::from_parts(shape, trunc_normal(&mut rng, n, std)))?;
            Ok(())
        };
        let zeros = |params: &mut ParamSet, name: String, shape: Vec<usize>| -> Result<()> {
            params.add(name, Tensor::zeros(shape))?;
            Ok(())
        };
        let ones = |params: &mut ParamSet, name: String, shape: Vec<usize>| -> Result<()> {
            let n = shape.iter().product();
            params.add(name, Tensor::from_parts(shape, vec![1.0; n]))?;
            Ok(())
        };

        let tower = |params: &mut ParamSet, prefix: &str, expanded: bool| -> Result<()> {
            for i in 0..config.depth {
                let b = format!("{prefix}.b{i}");
                ones(params, format!("{b}.ln1.g"), vec![w])?;
                zeros(params, format!("{b}.ln1.b"), vec![w])?;
                for nm in ["q", "k", "v", "o"] {
                    weight(params, format!("{b}.attn.{nm}.w"), vec![w, w])?;
                    zeros(params, format!("{b}.attn.{nm}.b"), vec![w])?;
                }
                ones(params, format!("{b}.ln2.g"), vec![w])?;
                zeros(params, format!("{b}.ln2.b"), vec![w])?;
                weight(params, format!("{b}.mlp.fc1.w"), vec![w, config.ffn_dim])?;
                zeros(params, format!("{b}.mlp.fc1.b"), vec![config.ffn_dim])?;
                let replicated = expanded && i >= config.depth - config.mlp_expanded_blocks;
                if replicated {
                    for h in 0..config.branch_count {
                        weight(params, format!("{b}.mlp.fc2.{h}.w"), vec![config.ffn_dim, w])?;
                        zeros(params, format!("{b}.mlp.fc2.{h}.b"), vec![w])?;
                    }
                } else {
                    weight(params, format!("{b}.mlp.fc2.w"), vec![config.ffn_dim, w])?;
                    zeros(params, format!("{b}.mlp.fc2.b"), vec![w])?;
                }
            }
            ones(params, format!("{prefix}.ln_f.g"), vec![w])?;
            zeros(params, format!("{prefix}.ln_f.b"), vec![w])?;
            weight(params, format!("{prefix}.proj"), vec![w, config.embed_dim])?;
            Ok(())
        };

        weight(&mut params, "txt.tok_embed".into(), vec![config.vocab_size, w])?;
        weight(&mut params, "txt.pos_embed".into(), vec![config.max_text_tokens, w])?;
        tower(&mut params, "txt", false)?;

        weight(&mut params, "img.patch_embed.w".into(), vec![config.patch_dim(), w])?;
        zeros(&mut params, "img.patch_embed.b".into(), vec![w])?;
        weight(&mut params, "img.cls".into(), vec![config.cls_rows(), w])?;
        weight(&mut params, "img.pos_embed".into(), vec![config.patch_count() + 1, w])?;
        tower(&mut params, "img", config.variant == Variant::Mlp)?;

        params.add(
            "temp.log_scale",
            Tensor::scalar((1.0 / config.temperature_init).ln()),
        )?;

        Ok(Self { config, params })
    }

    pub fn temperature(&self) -> Temperature {
        Temperature {
            log_scale: self.params.by_name("temp.log_scale").unwrap().value.data()[0],
            clamp_max: self.config.temperature_clamp_max,
        }
    }

    pub fn tau(&self) -> f64 {
        self.temperature().tau()
    }

    fn p(&self, name: &str) -> usize {
        self.params
            .lookup(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn block_ids(&self, prefix: &str, i: usize, replicated: bool) -> BlockIds {
        let b = format!("{prefix}.b{i}");
        let fc2 = if replicated {
            (0..self.config.branch_count)
                .map(|h| {
                    (
                        self.p(&format!("{b}.mlp.fc2.{h}.w")),
                        self.p(&format!("{b}.mlp.fc2.{h}.b")),
                    )
                })
                .collect()
        } else {
            vec![(self.p(&format!("{b}.mlp.fc2.w")), self.p(&format!("{b}.mlp.fc2.b")))]
        };
        BlockIds {
            ln1_g: self.p(&format!("{b}.ln1.g")),
            ln1_b: self.p(&format!("{b}.ln1.b")),
            q_w: self.p(&format!("{b}.attn.q.w")),
            q_b: self.p(&format!("{b}.attn.q.b")),
            k_w: self.p(&format!("{b}.attn.k.w")),
            k_b: self.p(&format!("{b}.attn.k.b")),
            v_w: self.p(&format!("{b}.attn.v.w")),
            v_b: self.p(&format!("{b}.attn.v.b")),
            o_w: self.p(&format!("{b}.attn.o.w")),
            o_b: self.p(&format!("{b}.attn.o.b")),
            ln2_g: self.p(&format!("{b}.ln2.g")),
            ln2_b: self.p(&format!("{b}.ln2.b")),
            fc1_w: self.p(&format!("{b}.mlp.fc1.w")),
            fc1_b: self.p(&format!("{b}.mlp.fc1.b")),
            fc2,
        }
    }

    /// Pre-norm transformer block; `replica` picks the fc2 copy in expanded
    /// blocks. Returns the block output and the attention node.
    fn block(
        &self,
        tape: &mut Tape,
        x: NodeId,
        ids: &BlockIds,
        replica: usize,
    ) -> Result<(NodeId, NodeId)> {
        let pm = |t: &mut Tape, idx: usize| t.param(&self.params, idx);
        let ln1_g = pm(tape, ids.ln1_g);
        let ln1_b = pm(tape, ids.ln1_b);
        let normed = tape.layer_norm(x, ln1_g, ln1_b)?;
        let mut qkv = Vec::with_capacity(3);
        for (wi, bi) in [(ids.q_w, ids.q_b), (ids.k_w, ids.k_b), (ids.v_w, ids.v_b)] {
            let wn = pm(tape, wi);
            let bn = pm(tape, bi);
            let h = tape.matmul(normed, wn)?;
            qkv.push(tape.add_bias(h, bn)?);
        }
        let att = tape.attention(qkv[0], qkv[1], qkv[2], self.config.heads)?;
        let o_w = pm(tape, ids.o_w);
        let o_b = pm(tape, ids.o_b);
        let proj = tape.matmul(att, o_w)?;
        let proj = tape.add_bias(proj, o_b)?;
        let x = tape.add(x, proj)?;

        let ln2_g = pm(tape, ids.ln2_g);
        let ln2_b = pm(tape, ids.ln2_b);
        let normed = tape.layer_norm(x, ln2_g, ln2_b)?;
        let fc1_w = pm(tape, ids.fc1_w);
        let fc1_b = pm(tape, ids.fc1_b);
        let h = tape.matmul(normed, fc1_w)?;
        let h = tape.add_bias(h, fc1_b)?;
        let h = tape.gelu(h);
        let (fc2_w, fc2_b) = ids.fc2[replica.min(ids.fc2.len() - 1)];
        let fc2_w = pm(tape, fc2_w);
        let fc2_b = pm(tape, fc2_b);
        let h = tape.matmul(h, fc2_w)?;
        let h = tape.add_bias(h, fc2_b)?;
        let x = tape.add(x, h)?;
        Ok((x, att))
    }

    /// Encode one token sequence to a `[1, d]` unit-norm node. The sequence is
    /// expected to end in the tokenizer's terminal token; the final position
    /// is pooled.
    pub fn encode_text_tape(&self, tape: &mut Tape, tokens: &[usize]) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::ShapeMismatch("cannot encode an empty text".into()));
        }
        if tokens.len() > self.config.max_text_tokens {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_text_tokens,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        let tok_embed = tape.param(&self.params, self.p("txt.tok_embed"));
        let pos_embed = tape.param(&self.params, self.p("txt.pos_embed"));
        let x = tape.gather(tok_embed, tokens.to_vec())?;
        let pos = tape.gather(pos_embed, (0..tokens.len()).collect())?;
        let mut x = tape.add(x, pos)?;
        for i in 0..self.config.depth {
            let ids = self.block_ids("txt", i, false);
            (x, _) = self.block(tape, x, &ids, 0)?;
        }
        let g = tape.param(&self.params, self.p("txt.ln_f.g"));
        let b = tape.param(&self.params, self.p("txt.ln_f.b"));
        let x = tape.layer_norm(x, g, b)?;
        let last = tape.slice_rows(x, tokens.len() - 1, 1)?;
        let proj = tape.param(&self.params, self.p("txt.proj"));
        let e = tape.matmul(last, proj)?;
        tape.l2_normalize_rows(e)
    }

    /// Encode an image to H unit-norm branch embeddings on the tape.
    pub fn encode_image_tape(&self, tape: &mut Tape, image: &Tensor) -> Result<ImageForward> {
        let patches = patchify(image, self.config.image_size, self.config.patch_size)?;
        let cls_rows = self.config.cls_rows();
        let p_count = self.config.patch_count();

        let patches = tape.input(patches);
        let pe_w = tape.param(&self.params, self.p("img.patch_embed.w"));
        let pe_b = tape.param(&self.params, self.p("img.patch_embed.b"));
        let x = tape.matmul(patches, pe_w)?;
        let x = tape.add_bias(x, pe_b)?;
        let cls = tape.param(&self.params, self.p("img.cls"));
        let seq = tape.concat_rows(&[cls, x])?;
        // Class tokens share position slot 0; patches take slots 1..=P.
        let mut pos_ids = vec![0; cls_rows];
        pos_ids.extend(1..=p_count);
        let pos_embed = tape.param(&self.params, self.p("img.pos_embed"));
        let pos = tape.gather(pos_embed, pos_ids)?;
        let mut x = tape.add(seq, pos)?;

        let expanded_from = if self.config.variant == Variant::Mlp {
            self.config.depth - self.config.mlp_expanded_blocks
        } else {
            self.config.depth
        };

        let mut last_att = 0;
        for i in 0..expanded_from {
            let ids = self.block_ids("img", i, false);
            (x, last_att) = self.block(tape, x, &ids, 0)?;
        }

        let g = self.p("img.ln_f.g");
        let b = self.p("img.ln_f.b");
        let proj = self.p("img.proj");

        if self.config.variant == Variant::Mlp && expanded_from < self.config.depth {
            // Fork: each branch finishes the tower through its own fc2
            // replicas, then contributes its class-token embedding.
            let mut rows = Vec::with_capacity(self.config.branch_count);
            let mut atts = Vec::with_capacity(self.config.branch_count);
            for h in 0..self.config.branch_count {
                let mut stream = x;
                let mut att = last_att;
                for i in expanded_from..self.config.depth {
                    let ids = self.block_ids("img", i, true);
                    (stream, att) = self.block(tape, stream, &ids, h)?;
                }
                let gg = tape.param(&self.params, g);
                let bb = tape.param(&self.params, b);
                let normed = tape.layer_norm(stream, gg, bb)?;
                let clsrow = tape.slice_rows(normed, 0, 1)?;
                let pj = tape.param(&self.params, proj);
                let e = tape.matmul(clsrow, pj)?;
                rows.push(tape.l2_normalize_rows(e)?);
                atts.push(att);
            }
            let embeddings = tape.concat_rows(&rows)?;
            Ok(ImageForward {
                embeddings,
                final_attention: atts,
                cls_rows,
            })
        } else {
            let gg = tape.param(&self.params, g);
            let bb = tape.param(&self.params, b);
            let normed = tape.layer_norm(x, gg, bb)?;
            let clsrows = tape.slice_rows(normed, 0, cls_rows)?;
            let pj = tape.param(&self.params, proj);
            let e = tape.matmul(clsrows, pj)?;
            let embeddings = tape.l2_normalize_rows(e)?;
            Ok(ImageForward {
                embeddings,
                final_attention: vec![last_att],
                cls_rows,
            })
        }
    }

    /// Plain-value text encoding: `[d]`, unit norm, deterministic in
    /// (tokens, params).
    pub fn encode_text(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let node = self.encode_text_tape(&mut tape, tokens)?;
        Ok(tape.value(node).row_tensor(0))
    }

    /// Plain-value image encoding: `[H, d]` with unit-norm rows.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.encode_image_tape(&mut tape, image)?;
        Ok(tape.value(fwd.embeddings).clone())
    }

    /// Vanilla tower output: single `[d]` embedding from the lone class token.
    pub fn encode_image_vanilla(&self, image: &Tensor) -> Result<Tensor> {
        if self.config.variant != Variant::Vanilla {
            return Err(Error::InvalidConfig(
                "encode_image_vanilla requires the vanilla variant".into(),
            ));
        }
        Ok(self.encode_image(image)?.row_tensor(0))
    }

    /// CLS tower output: `[H, d]`, row h produced by class token h.
    pub fn encode_image_cls(&self, image: &Tensor) -> Result<Tensor> {
        if self.config.variant != Variant::Cls {
            return Err(Error::InvalidConfig(
                "encode_image_cls requires the cls variant".into(),
            ));
        }
        self.encode_image(image)
    }

    /// MLP tower output: `[H, d]`, branch h produced through fc2 replica h.
    pub fn encode_image_mlp(&self, image: &Tensor) -> Result<Tensor> {
        if self.config.variant != Variant::Mlp {
            return Err(Error::InvalidConfig(
                "encode_image_mlp requires the mlp variant".into(),
            ));
        }
        self.encode_image(image)
    }

    /// Per-patch attention scores for one branch: the class token's
    /// final-block attention row, averaged over heads. For the CLS variant
    /// the row belongs to class token `branch`; for vanilla/MLP the single
    /// shared class token is read (from branch `branch`'s stream for MLP).
    pub fn patch_attention(&self, image: &Tensor, branch: usize) -> Result<Vec<f64>> {
        if branch >= self.config.branch_count {
            return Err(Error::BranchOutOfRange {
                branch,
                branches: self.config.branch_count,
            });
        }
        let mut tape = Tape::new();
        let fwd = self.encode_image_tape(&mut tape, image)?;
        let att_node = if fwd.final_attention.len() == 1 {
            fwd.final_attention[0]
        } else {
            fwd.final_attention[branch]
        };
        let (probs, heads) = tape
            .attention_probs(att_node)
            .expect("final attention node");
        let t = fwd.cls_rows + self.config.patch_count();
        let row = if self.config.variant == Variant::Cls {
            branch
        } else {
            0
        };
        let p_count = self.config.patch_count();
        let mut scores = vec![0.0; p_count];
        for h in 0..heads {
            let base = h * t * t + row * t;
            for (p, s) in scores.iter_mut().enumerate() {
                *s += probs[base + fwd.cls_rows + p];
            }
        }
        for s in &mut scores {
            *s /= heads as f64;
        }
        Ok(scores)
    }
}

/// Split a `[3,S,S]` image into non-overlapping patch rows of length 3*p*p,
/// channel-major within each patch, patches in row-major grid order.
pub fn patchify(image: &Tensor, image_size: usize, patch_size: usize) -> Result<Tensor> {
    let s = image_size;
    if image.shape() != [3, s, s] {
        return Err(Error::ShapeMismatch(format!(
            "expected image [3,{s},{s}], got {:?}",
            image.shape()
        )));
    }
    let p = patch_size;
    let grid = s / p;
    let data = image.data();
    let mut out = Vec::with_capacity(grid * grid * 3 * p * p);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..3 {
                for py in 0..p {
                    let y = gy * p + py;
                    let base = c * s * s + y * s + gx * p;
                    out.extend_from_slice(&data[base..base + p]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![grid * grid, 3 * p * p], out))
}
