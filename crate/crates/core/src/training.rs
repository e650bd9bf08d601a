//! Deterministic mini-batch training over any loss/encoder/plan combination.
//!
//! Each step encodes the batch sample by sample (parallel when M2M_THREADS
//! allows, with results reduced in sample order so the schedule is
//! bit-identical to the single-threaded one), stitches the embeddings into a
//! small loss tape, backpropagates through both stages, and applies a
//! decoupled-weight-decay adaptive-moment update under a linear-warmup-then-
//! cosine schedule.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamSet, Tape};
use crate::data::{ingest_jsonl, mix_seed, read_ppm, MultiTextSample};
use crate::encoders::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{self, LogitScale, LossKind, Reduction};
use crate::matching::{plan_free, plan_grouped, plan_identity, MatchingPlan, PlanMode};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"M2MCKPT1";

/// Worker-thread cap from the M2M_THREADS environment variable; defaults to
/// 1 so runs are bit-exact unless explicitly widened.
pub fn worker_threads() -> usize {
    std::env::var("M2M_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Ordered map over 0..n, sequential or on a cached rayon pool; results
/// come back in index order either way, so the reduction schedule matches
/// the single-threaded one bit for bit.
pub(crate) fn run_indexed<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if threads <= 1 || n <= 1 {
        (0..n).map(f).collect()
    } else {
        use rayon::prelude::*;
        let pool = pool_for(threads);
        pool.install(|| (0..n).into_par_iter().map(|i| f(i)).collect())
    }
}

fn pool_for(threads: usize) -> std::sync::Arc<rayon::ThreadPool> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let pools = POOLS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = pools.lock().expect("pool registry");
    guard
        .entry(threads)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("thread pool"),
            )
        })
        .clone()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Linear warmup steps; unset means min(500, 10% of total).
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub reduction: Reduction,
    pub plan_mode: PlanMode,
    /// Dataset manifest path.
    pub manifest: String,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            warmup_steps: None,
            seed: 0,
            loss_kind: LossKind::M2M,
            reduction: Reduction::MeanOverPairs,
            plan_mode: PlanMode::Identity,
            manifest: String::new(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "contrastive training needs batch_size >= 2".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Piecewise schedule: linear ramp over `warmup` steps, cosine decay to zero
/// at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = warmup.min(total);
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else if total == warmup {
        peak
    } else {
        let progress = (step - warmup) as f64 / (total - warmup) as f64;
        peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adaptive moments with decoupled weight decay. Decay touches only rank-2+
/// tensors; biases, gains, and the temperature are exempt.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let decayed = params.get(i).value.rank() >= 2;
            let p = params.get_mut(i);
            let grads = p.grad.data().to_vec();
            let values = p.value.data_mut();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, &g) in grads.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut update = mhat / (vhat.sqrt() + self.eps);
                if decayed {
                    update += self.weight_decay * values[j];
                }
                values[j] -= lr * update;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub tau: f64,
    pub lr: f64,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,epoch,loss,tau,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.epoch, r.loss, r.tau, r.lr
        ));
    }
    out
}

/// Everything needed to resume or evaluate a run.
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub opt_t: u64,
    pub params: Vec<(String, Tensor)>,
    pub opt_m: Vec<Vec<f64>>,
    pub opt_v: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture(model: &Model, train: &TrainConfig, step: u64, opt: &AdamW) -> Checkpoint {
        let (m, v) = opt.moments();
        Checkpoint {
            model: model.config.clone(),
            train: train.clone(),
            step,
            opt_t: opt.t,
            params: model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            opt_m: m.to_vec(),
            opt_v: v.to_vec(),
        }
    }

    /// Rebuild the model and optimizer exactly as captured.
    pub fn restore(&self) -> Result<(Model, AdamW)> {
        let mut model = Model::new(self.model.clone(), 0)?;
        if self.params.len() != model.params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                self.params.len()
            )));
        }
        for (name, value) in &self.params {
            let idx = model.params.lookup(name).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("unknown parameter {name}"))
            })?;
            if model.params.get(idx).value.shape() != value.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    model.params.get(idx).value.shape()
                )));
            }
            model.params.get_mut(idx).value = value.clone();
        }
        let mut opt = AdamW::new(&model.params, self.train.weight_decay);
        if self.opt_m.len() != model.params.len() || self.opt_v.len() != model.params.len() {
            return Err(Error::CorruptCheckpoint("optimizer moment count".into()));
        }
        opt.restore_moments(self.opt_t, self.opt_m.clone(), self.opt_v.clone());
        Ok((model, opt))
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    value_off: usize,
    m_off: usize,
    v_off: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    opt_t: u64,
    entries: Vec<HeaderEntry>,
    payload_len: usize,
}

/// Self-describing binary: magic, little-endian header length, JSON header
/// (names, shapes, element offsets), then a little-endian f64 payload.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(ckpt.params.len());
    let mut payload: Vec<f64> = Vec::new();
    for (i, (name, value)) in ckpt.params.iter().enumerate() {
        let value_off = payload.len();
        payload.extend_from_slice(value.data());
        let m_off = payload.len();
        payload.extend_from_slice(&ckpt.opt_m[i]);
        let v_off = payload.len();
        payload.extend_from_slice(&ckpt.opt_v[i]);
        entries.push(HeaderEntry {
            name: name.clone(),
            shape: value.shape().to_vec(),
            value_off,
            m_off,
            v_off,
        });
    }
    let header = Header {
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        step: ckpt.step,
        opt_t: ckpt.opt_t,
        entries,
        payload_len: payload.len(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::CorruptCheckpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let payload_bytes = &bytes[16 + header_len..];
    if payload_bytes.len() != header.payload_len * 8 {
        return Err(Error::CorruptCheckpoint(format!(
            "payload holds {} bytes, header wants {}",
            payload_bytes.len(),
            header.payload_len * 8
        )));
    }
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let take = |off: usize, len: usize| -> Result<Vec<f64>> {
        payload
            .get(off..off + len)
            .map(|s| s.to_vec())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("offset {off}+{len} out of range")))
    };
    let mut params = Vec::with_capacity(header.entries.len());
    let mut opt_m = Vec::with_capacity(header.entries.len());
    let mut opt_v = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        let len: usize = e.shape.iter().product();
        params.push((e.name.clone(), Tensor::new(e.shape.clone(), take(e.value_off, len)?)?));
        opt_m.push(take(e.m_off, len)?);
        opt_v.push(take(e.v_off, len)?);
    }
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        step: header.step,
        opt_t: header.opt_t,
        params,
        opt_m,
        opt_v,
    })
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// In-memory dataset ready for batching.
pub struct LoadedDataset {
    pub samples: Vec<MultiTextSample>,
    pub images: Vec<Tensor>,
    /// Texts per sample; uniform across the dataset.
    pub slots: usize,
}

/// Load a manifest, read every image, and check slot uniformity.
pub fn load_dataset(manifest: &Path) -> Result<LoadedDataset> {
    let samples = ingest_jsonl(manifest)?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    let slots = samples[0].texts.len();
    if let Some(bad) = samples.iter().find(|s| s.texts.len() != slots) {
        return Err(Error::InvalidConfig(format!(
            "sample {} has {} texts, expected {slots}",
            bad.id,
            bad.texts.len()
        )));
    }
    let threads = worker_threads();
    let images: Vec<Result<Tensor>> =
        run_indexed(samples.len(), threads, |i| read_ppm(&samples[i].image_path));
    let images = images.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset {
        samples,
        images,
        slots,
    })
}

/// Per-sample forward state kept alive between the loss tape's backward and
/// the encoder backward.
struct SampleForward {
    tape: Tape,
    image_node: usize,
    text_nodes: Vec<usize>,
    image_emb: Tensor,
    text_embs: Vec<Tensor>,
}

fn forward_sample(model: &Model, image: &Tensor, tokens: &[Vec<usize>]) -> Result<SampleForward> {
    let mut tape = Tape::new();
    let fwd = model.encode_image_tape(&mut tape, image)?;
    let mut text_nodes = Vec::with_capacity(tokens.len());
    let mut text_embs = Vec::with_capacity(tokens.len());
    for t in tokens {
        let node = model.encode_text_tape(&mut tape, t)?;
        text_embs.push(tape.value(node).clone());
        text_nodes.push(node);
    }
    let image_emb = tape.value(fwd.embeddings).clone();
    Ok(SampleForward {
        tape,
        image_node: fwd.embeddings,
        text_nodes,
        image_emb,
        text_embs,
    })
}

/// One optimizer step's loss value and gradients, accumulated into
/// `model.params` in deterministic sample order.
fn batch_forward_backward(
    model: &mut Model,
    images: &[&Tensor],
    tokens: &[&[Vec<usize>]],
    plan: Option<&MatchingPlan>,
    loss_kind: LossKind,
    reduction: Reduction,
    threads: usize,
) -> Result<f64> {
    let k = images.len();
    let h = model.config.branch_count;
    let slots = tokens[0].len();
    let d = model.config.embed_dim;

    let forwards: Vec<Result<SampleForward>> = {
        let m: &Model = model;
        run_indexed(k, threads, |i| forward_sample(m, images[i], tokens[i]))
    };
    let forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;

    // Loss tape over stacked embeddings; one [K,d] leaf per branch and slot.
    let mut ltape = Tape::new();
    let mut branch_leaves = Vec::with_capacity(h);
    for b in 0..h {
        let rows: Vec<Tensor> = forwards.iter().map(|f| f.image_emb.row_tensor(b)).collect();
        branch_leaves.push(ltape.input(Tensor::stack_rows(&rows)?));
    }
    let mut slot_leaves = Vec::with_capacity(slots);
    for m in 0..slots {
        let rows: Vec<Tensor> = forwards
            .iter()
            .map(|f| f.text_embs[m].row_tensor(0))
            .collect();
        slot_leaves.push(ltape.input(Tensor::stack_rows(&rows)?));
    }
    let temp_idx = model.params.lookup("temp.log_scale").expect("temperature");
    let temp_leaf = ltape.param(&model.params, temp_idx);
    let inv_tau = ltape.exp(temp_leaf);
    let scale = LogitScale::Node(inv_tau);

    let loss_node = match loss_kind {
        LossKind::O2O => losses::o2o_tape(&mut ltape, branch_leaves[0], slot_leaves[0], scale, reduction)?,
        LossKind::O2M => losses::o2m_tape(&mut ltape, branch_leaves[0], &slot_leaves, scale, reduction)?,
        LossKind::M2M => {
            let plan = plan.ok_or_else(|| {
                Error::InvalidConfig("multi-to-multi loss needs a matching plan".into())
            })?;
            losses::m2m_tape(&mut ltape, &branch_leaves, &slot_leaves, plan, scale, reduction)?
        }
    };
    let loss = ltape.scalar_value(loss_node);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    let lgrads = ltape.backward(loss_node)?;

    // Scatter the leaf adjoints back to each sample and finish its tape.
    let sample_grads: Vec<Result<Vec<(usize, Vec<f64>)>>> = {
        let forwards_ref = &forwards;
        let lgrads_ref = &lgrads;
        let branch_leaves = &branch_leaves;
        let slot_leaves = &slot_leaves;
        run_indexed(k, threads, move |i| {
            let f = &forwards_ref[i];
            let mut img_seed = vec![0.0; h * d];
            for (b, &leaf) in branch_leaves.iter().enumerate() {
                if let Some(g) = lgrads_ref.wrt(leaf) {
                    img_seed[b * d..(b + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
                }
            }
            let mut seeds = vec![(f.image_node, img_seed)];
            for (m, &leaf) in slot_leaves.iter().enumerate() {
                if let Some(g) = lgrads_ref.wrt(leaf) {
                    seeds.push((f.text_nodes[m], g[i * d..(i + 1) * d].to_vec()));
                }
            }
            let grads = f.tape.backward_seeded(&seeds)?;
            Ok(grads.param_grads(&f.tape))
        })
    };

    lgrads.accumulate_into(&ltape, &mut model.params);
    for per_sample in sample_grads {
        for (idx, g) in per_sample? {
            let dst = model.params.get_mut(idx).grad.data_mut();
            for (d, v) in dst.iter_mut().zip(&g) {
                *d += v;
            }
        }
    }
    Ok(loss)
}

fn clamp_temperature(model: &mut Model) {
    let max_log = model.config.temperature_clamp_max.ln();
    let idx = model.params.lookup("temp.log_scale").expect("temperature");
    let v = &mut model.params.get_mut(idx).value.data_mut()[0];
    if *v > max_log {
        *v = max_log;
    }
}

/// Slot-centroid text embeddings over a probe prefix of the dataset; the
/// input to epoch-level grouped matching.
fn slot_centroids(model: &Model, data: &LoadedDataset, threads: usize) -> Result<Tensor> {
    let probe = data.samples.len().min(64);
    let embs: Vec<Result<Vec<Tensor>>> = run_indexed(probe, threads, |i| {
        data.samples[i]
            .tokens
            .iter()
            .map(|t| model.encode_text(t))
            .collect()
    });
    let embs = embs.into_iter().collect::<Result<Vec<_>>>()?;
    let d = model.config.embed_dim;
    let mut rows = Vec::with_capacity(data.slots);
    for m in 0..data.slots {
        let mut mean = vec![0.0; d];
        for e in &embs {
            for (acc, v) in mean.iter_mut().zip(e[m].data()) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v /= probe as f64;
        }
        rows.push(crate::tensor::l2_normalize(&Tensor::vector(mean)?)?);
    }
    Tensor::stack_rows(&rows)
}

/// Batch-mean branch and slot embeddings for per-batch free matching.
fn batch_mean_plan(
    model: &Model,
    forward_images: &[Tensor],
    forward_texts: &[Vec<Tensor>],
) -> Result<MatchingPlan> {
    let h = model.config.branch_count;
    let d = model.config.embed_dim;
    let k = forward_images.len();
    let mut vmean = vec![vec![0.0; d]; h];
    for img in forward_images {
        for b in 0..h {
            for (acc, v) in vmean[b].iter_mut().zip(img.row(b)) {
                *acc += v;
            }
        }
    }
    let slots = forward_texts[0].len();
    let mut tmean = vec![vec![0.0; d]; slots];
    for texts in forward_texts {
        for (m, t) in texts.iter().enumerate() {
            for (acc, v) in tmean[m].iter_mut().zip(t.data()) {
                *acc += v;
            }
        }
    }
    let norm_rows = |rows: Vec<Vec<f64>>| -> Result<Tensor> {
        let rows: Result<Vec<Tensor>> = rows
            .into_iter()
            .map(|r| {
                let mut v = r;
                for x in &mut v {
                    *x /= k as f64;
                }
                crate::tensor::l2_normalize(&Tensor::vector(v)?)
            })
            .collect();
        Tensor::stack_rows(&rows?)
    };
    plan_free(&norm_rows(vmean)?, &norm_rows(tmean)?)
}

fn build_epoch_plan(
    model: &Model,
    data: &LoadedDataset,
    mode: PlanMode,
    threads: usize,
) -> Result<Option<MatchingPlan>> {
    let h = model.config.branch_count;
    match mode {
        PlanMode::Identity => {
            if data.slots != h {
                return Err(Error::PlanCardinality {
                    mode: mode.to_string(),
                    texts: data.slots,
                    branches: h,
                });
            }
            Ok(Some(plan_identity(data.slots, h)?))
        }
        PlanMode::Grouped => {
            if data.slots < h {
                return Err(Error::PlanCardinality {
                    mode: mode.to_string(),
                    texts: data.slots,
                    branches: h,
                });
            }
            let centroids = slot_centroids(model, data, threads)?;
            Ok(Some(plan_grouped(&centroids, h)?))
        }
        PlanMode::Free => Ok(None), // rebuilt per batch
    }
}

/// Run the training loop; `resume` continues an earlier run exactly (for
/// identity and free plans; a grouped plan rebuilt mid-epoch sees current
/// rather than epoch-start weights).
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    let threads = worker_threads();
    let data = load_dataset(Path::new(&train_cfg.manifest))?;

    if matches!(train_cfg.loss_kind, LossKind::O2O | LossKind::O2M)
        && model_cfg.branch_count != 1
    {
        return Err(Error::InvalidConfig(format!(
            "loss {} pairs texts with a single image embedding; branch_count must be 1",
            train_cfg.loss_kind
        )));
    }

    let (mut model, mut opt) = match resume {
        Some(ckpt) => ckpt.restore()?,
        None => {
            let model = Model::new(model_cfg.clone(), train_cfg.seed)?;
            let opt = AdamW::new(&model.params, train_cfg.weight_decay);
            (model, opt)
        }
    };

    let k = train_cfg.batch_size;
    if data.samples.len() < k {
        return Err(Error::InvalidConfig(format!(
            "dataset of {} samples cannot fill a batch of {k}",
            data.samples.len()
        )));
    }
    let steps_per_epoch = data.samples.len() / k;
    // The schedule always spans the configured epochs; max_steps only stops
    // the run early, so a resumed run replays the identical schedule.
    let total_steps = steps_per_epoch * train_cfg.epochs.max(1);
    let run_until = train_cfg.max_steps.unwrap_or(total_steps).min(total_steps);
    if run_until == 0 {
        return Err(Error::InvalidConfig("no training steps to run".into()));
    }
    let warmup = train_cfg
        .warmup_steps
        .unwrap_or_else(|| 500.min(total_steps / 10));

    let mut metrics = Vec::new();
    let mut step = resume.map_or(0, |c| c.step) as usize;

    'outer: while step < run_until {
        let epoch = step / steps_per_epoch;
        let mut order: Vec<usize> = (0..data.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(train_cfg.seed, epoch as u64));
        order.shuffle(&mut rng);

        // Matching plans only steer the multi-to-multi loss.
        let epoch_plan = if train_cfg.loss_kind == LossKind::M2M {
            build_epoch_plan(&model, &data, train_cfg.plan_mode, threads)?
        } else {
            None
        };

        let start_batch = step % steps_per_epoch;
        for b in start_batch..steps_per_epoch {
            let idx = &order[b * k..(b + 1) * k];
            let images: Vec<&Tensor> = idx.iter().map(|&i| &data.images[i]).collect();
            let tokens: Vec<&[Vec<usize>]> =
                idx.iter().map(|&i| data.samples[i].tokens.as_slice()).collect();

            let plan = match (&epoch_plan, train_cfg.loss_kind) {
                (Some(p), _) => Some(p.clone()),
                (None, LossKind::M2M) => {
                    // Free matching from this batch's current embeddings.
                    let imgs: Vec<Tensor> = {
                        let m = &model;
                        run_indexed(k, threads, |i| m.encode_image(images[i]))
                            .into_iter()
                            .collect::<Result<Vec<_>>>()?
                    };
                    let txts: Vec<Vec<Tensor>> = {
                        let m = &model;
                        run_indexed(k, threads, |i| {
                            tokens[i].iter().map(|t| m.encode_text(t)).collect()
                        })
                        .into_iter()
                        .collect::<Result<Vec<_>>>()?
                    };
                    Some(batch_mean_plan(&model, &imgs, &txts)?)
                }
                (None, _) => None,
            };
            if let Some(p) = &plan {
                p.validate(model.config.branch_count)?;
            }

            model.params.zero_grads();
            let loss = batch_forward_backward(
                &mut model,
                &images,
                &tokens,
                plan.as_ref(),
                train_cfg.loss_kind,
                train_cfg.reduction,
                threads,
            )?;
            let lr = lr_at(step, total_steps, train_cfg.learning_rate, warmup);
            opt.step(&mut model.params, lr);
            clamp_temperature(&mut model);

            metrics.push(MetricsRow {
                step: step as u64,
                epoch,
                loss,
                tau: model.tau(),
                lr,
            });
            step += 1;
            if step >= run_until {
                break 'outer;
            }
        }
    }

    let checkpoint = Checkpoint::capture(&model, train_cfg, step as u64, &opt);
    Ok(TrainOutcome {
        checkpoint,
        metrics,
    })
}
