//! The contrastive objective family: one-to-one, one-to-multi-positive, and
//! multi-to-multi, each as the average of two symmetric InfoNCE directions.
//!
//! One direction scores every positive row against the full column of
//! anchors across the batch: row j of the logit matrix holds
//! `<p_j, a_k> / tau` for all k, and the loss is the negative log-softmax of
//! the diagonal. The multi-text variants sum that kernel over text slots; in
//! the multi-to-multi loss each slot contrasts against its matched image
//! branch only, and the image-to-text mirror pools over the same slot across
//! the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::matching::MatchingPlan;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// The raw double sum over batch rows and text slots.
    Sum,
    /// Sum divided by the number of (row, slot) log terms.
    MeanOverPairs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    O2O,
    O2M,
    M2M,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::O2O => write!(f, "o2o"),
            LossKind::O2M => write!(f, "o2m"),
            LossKind::M2M => write!(f, "m2m"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub kind: LossKind,
    pub reduction: Reduction,
}

/// Inverse temperature on the tape: either a constant 1/tau or a node
/// (exp of the learnable log-scale) so gradients reach the temperature.
#[derive(Clone, Copy)]
pub enum LogitScale {
    Const(f64),
    Node(NodeId),
}

fn scale_logits(tape: &mut Tape, sims: NodeId, scale: LogitScale) -> Result<NodeId> {
    match scale {
        LogitScale::Const(c) => Ok(tape.scale(sims, c)),
        LogitScale::Node(s) => tape.mul_scalar(sims, s),
    }
}

/// Sum over the batch of `-log softmax_k(<p_j, a_k>/tau)[j]`; `anchors` and
/// `positives` are `[K,d]` nodes with unit-norm rows.
fn infonce_sum(
    tape: &mut Tape,
    anchors: NodeId,
    positives: NodeId,
    scale: LogitScale,
) -> Result<NodeId> {
    let k = tape.value(anchors).rows();
    if tape.value(anchors).shape() != tape.value(positives).shape() {
        return Err(Error::ShapeMismatch(format!(
            "anchors {:?} vs positives {:?}",
            tape.value(anchors).shape(),
            tape.value(positives).shape()
        )));
    }
    let sims = tape.matmul_nt(positives, anchors)?;
    let logits = scale_logits(tape, sims, scale)?;
    let logp = tape.log_softmax(logits)?;
    let diag = tape.pick_per_row(logp, (0..k).collect())?;
    let total = tape.sum_all(diag);
    Ok(tape.scale(total, -1.0))
}

fn apply_reduction(
    tape: &mut Tape,
    raw: NodeId,
    reduction: Reduction,
    pairs: usize,
) -> NodeId {
    match reduction {
        Reduction::Sum => raw,
        Reduction::MeanOverPairs => tape.scale(raw, 1.0 / pairs as f64),
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(Error::TemperatureNonPositive(tau));
    }
    Ok(())
}

/// One InfoNCE direction on the tape. `t2i` of the one-to-one loss is
/// `infonce_direction(anchors = images, positives = texts)`.
pub fn infonce_direction_tape(
    tape: &mut Tape,
    anchors: NodeId,
    positives: NodeId,
    scale: LogitScale,
    reduction: Reduction,
) -> Result<NodeId> {
    let k = tape.value(anchors).rows();
    let raw = infonce_sum(tape, anchors, positives, scale)?;
    Ok(apply_reduction(tape, raw, reduction, k))
}

/// Symmetric one-to-one loss over `[K,d]` image and text nodes.
pub fn o2o_tape(
    tape: &mut Tape,
    images: NodeId,
    texts: NodeId,
    scale: LogitScale,
    reduction: Reduction,
) -> Result<NodeId> {
    let k = tape.value(images).rows();
    let t2i = infonce_sum(tape, images, texts, scale)?;
    let i2t = infonce_sum(tape, texts, images, scale)?;
    let sum = tape.add(t2i, i2t)?;
    let half = tape.scale(sum, 0.5);
    Ok(apply_reduction(tape, half, reduction, k))
}

/// One-to-multi-positive loss: each of M slot matrices (`[K,d]`) versus one
/// image matrix `[K,d]`. The image-to-text mirror pools each slot across the
/// batch rather than the full K*M texts.
pub fn o2m_tape(
    tape: &mut Tape,
    images: NodeId,
    text_slots: &[NodeId],
    scale: LogitScale,
    reduction: Reduction,
) -> Result<NodeId> {
    if text_slots.is_empty() {
        return Err(Error::ShapeMismatch("o2m needs at least one text slot".into()));
    }
    let k = tape.value(images).rows();
    let mut acc: Option<NodeId> = None;
    for &slot in text_slots {
        let t2i = infonce_sum(tape, images, slot, scale)?;
        let i2t = infonce_sum(tape, slot, images, scale)?;
        let both = tape.add(t2i, i2t)?;
        acc = Some(match acc {
            None => both,
            Some(a) => tape.add(a, both)?,
        });
    }
    let half = tape.scale(acc.unwrap(), 0.5);
    Ok(apply_reduction(tape, half, reduction, k * text_slots.len()))
}

/// Multi-to-multi loss: slot m contrasts against image branch plan(m) only.
pub fn m2m_tape(
    tape: &mut Tape,
    image_branches: &[NodeId],
    text_slots: &[NodeId],
    plan: &MatchingPlan,
    scale: LogitScale,
    reduction: Reduction,
) -> Result<NodeId> {
    if text_slots.is_empty() || image_branches.is_empty() {
        return Err(Error::ShapeMismatch(
            "m2m needs at least one branch and one slot".into(),
        ));
    }
    if plan.texts() != text_slots.len() {
        return Err(Error::CardinalityMismatch(format!(
            "plan covers {} slots, got {}",
            plan.texts(),
            text_slots.len()
        )));
    }
    plan.validate(image_branches.len())?;
    let k = tape.value(image_branches[0]).rows();
    let mut acc: Option<NodeId> = None;
    for (m, &slot) in text_slots.iter().enumerate() {
        let branch = image_branches[plan.assignment[m]];
        let t2i = infonce_sum(tape, branch, slot, scale)?;
        let i2t = infonce_sum(tape, slot, branch, scale)?;
        let both = tape.add(t2i, i2t)?;
        acc = Some(match acc {
            None => both,
            Some(a) => tape.add(a, both)?,
        });
    }
    let half = tape.scale(acc.unwrap(), 0.5);
    Ok(apply_reduction(tape, half, reduction, k * text_slots.len()))
}

fn matrix_input(tape: &mut Tape, t: &Tensor, what: &str) -> Result<NodeId> {
    if t.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects a [K,d] matrix, got {:?}",
            t.shape()
        )));
    }
    Ok(tape.input(t.clone()))
}

/// Rank-3 `[K,M,d]` tensor sliced into M matrices of shape `[K,d]`.
fn slot_inputs(tape: &mut Tape, t: &Tensor, what: &str) -> Result<Vec<NodeId>> {
    if t.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects [K,M,d], got {:?}",
            t.shape()
        )));
    }
    let (k, m, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(m);
    for slot in 0..m {
        let mut data = Vec::with_capacity(k * d);
        for i in 0..k {
            let base = (i * m + slot) * d;
            data.extend_from_slice(&t.data()[base..base + d]);
        }
        out.push(tape.input(Tensor::from_parts(vec![k, d], data)));
    }
    Ok(out)
}

/// One InfoNCE direction as a plain value.
pub fn infonce_direction(
    anchors: &Tensor,
    positives: &Tensor,
    tau: f64,
    reduction: Reduction,
) -> Result<f64> {
    check_tau(tau)?;
    let mut tape = Tape::new();
    let a = matrix_input(&mut tape, anchors, "anchors")?;
    let p = matrix_input(&mut tape, positives, "positives")?;
    let l = infonce_direction_tape(&mut tape, a, p, LogitScale::Const(1.0 / tau), reduction)?;
    Ok(tape.scalar_value(l))
}

/// Symmetric one-to-one loss over `[K,d]` tensors.
pub fn loss_o2o(images: &Tensor, texts: &Tensor, tau: f64, reduction: Reduction) -> Result<f64> {
    check_tau(tau)?;
    let mut tape = Tape::new();
    let v = matrix_input(&mut tape, images, "images")?;
    let t = matrix_input(&mut tape, texts, "texts")?;
    let l = o2o_tape(&mut tape, v, t, LogitScale::Const(1.0 / tau), reduction)?;
    Ok(tape.scalar_value(l))
}

/// One-to-multi loss over images `[K,d]` and texts `[K,M,d]`.
pub fn loss_o2m(images: &Tensor, texts: &Tensor, tau: f64, reduction: Reduction) -> Result<f64> {
    check_tau(tau)?;
    let mut tape = Tape::new();
    let v = matrix_input(&mut tape, images, "images")?;
    let slots = slot_inputs(&mut tape, texts, "texts")?;
    if images.rows() != texts.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "batch sizes disagree: {} images vs {} text rows",
            images.rows(),
            texts.shape()[0]
        )));
    }
    let l = o2m_tape(&mut tape, v, &slots, LogitScale::Const(1.0 / tau), reduction)?;
    Ok(tape.scalar_value(l))
}

/// Multi-to-multi loss over images `[K,H,d]`, texts `[K,M,d]` and a plan.
pub fn loss_m2m(
    images: &Tensor,
    texts: &Tensor,
    plan: &MatchingPlan,
    tau: f64,
    reduction: Reduction,
) -> Result<f64> {
    check_tau(tau)?;
    if images.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "m2m images expect [K,H,d], got {:?}",
            images.shape()
        )));
    }
    if texts.rank() != 3 || texts.shape()[0] != images.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "m2m texts expect [K,M,d] with matching K, got {:?}",
            texts.shape()
        )));
    }
    let mut tape = Tape::new();
    let branches = slot_inputs(&mut tape, images, "images")?;
    let slots = slot_inputs(&mut tape, texts, "texts")?;
    let l = m2m_tape(
        &mut tape,
        &branches,
        &slots,
        plan,
        LogitScale::Const(1.0 / tau),
        reduction,
    )?;
    Ok(tape.scalar_value(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::plan_identity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = crate::tensor::norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    }

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        Tensor::from_parts(vec![rows.len(), d], rows.concat())
    }

    /// Rank-3 `[K,M,d]` from per-row, per-slot vectors.
    fn cube(rows: &[Vec<Vec<f64>>]) -> Tensor {
        let k = rows.len();
        let m = rows[0].len();
        let d = rows[0][0].len();
        let mut data = Vec::with_capacity(k * m * d);
        for row in rows {
            for slot in row {
                data.extend_from_slice(slot);
            }
        }
        Tensor::from_parts(vec![k, m, d], data)
    }

    /// Independent oracle: the direction formula written straight out.
    fn brute_infonce(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> f64 {
        let k = anchors.len();
        let mut total = 0.0;
        for j in 0..k {
            let pos = crate::tensor::dot(&positives[j], &anchors[j]) / tau;
            let denom: f64 = (0..k)
                .map(|kk| (crate::tensor::dot(&positives[j], &anchors[kk]) / tau).exp())
                .sum();
            total -= (pos.exp() / denom).ln();
        }
        total
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let v = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(loss_o2o(&v, &v, 1.0, Reduction::Sum).unwrap().abs() < 1e-12);
        assert!(
            infonce_direction(&v, &v, 0.5, Reduction::Sum)
                .unwrap()
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn orthonormal_pairs_match_closed_form() {
        let e = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln(); // 0.6265234...
        let got = infonce_direction(&e, &e, 1.0, Reduction::Sum).unwrap();
        assert!((got - expected).abs() < 1e-9, "got {got}");
        assert!((got - 0.6265234).abs() < 1e-6);
        // Both o2o directions coincide by symmetry.
        let o2o = loss_o2o(&e, &e, 1.0, Reduction::Sum).unwrap();
        assert!((o2o - expected).abs() < 1e-9);
    }

    #[test]
    fn uniform_logits_give_chance_level() {
        // All four pairwise similarities equal: every term is ln K exactly.
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let v = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = Tensor::matrix(2, 2, vec![r, r, r, r]).unwrap();
        let got = infonce_direction(&v, &t, 1.0, Reduction::Sum).unwrap();
        assert!((got - 2.0 * 2.0f64.ln()).abs() <= 1e-12, "got {got}");
    }

    #[test]
    fn matches_brute_force_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [2usize, 3, 5] {
            let a = unit_rows(&mut rng, k, 7);
            let p = unit_rows(&mut rng, k, 7);
            let got = infonce_direction(&mat(&a), &mat(&p), 0.3, Reduction::Sum).unwrap();
            let want = brute_infonce(&a, &p, 0.3);
            assert!((got - want).abs() < 1e-10, "k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn o2m_reduces_to_o2o_at_single_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = unit_rows(&mut rng, 3, 5);
        let t = unit_rows(&mut rng, 3, 5);
        let slots: Vec<Vec<Vec<f64>>> = t.iter().map(|row| vec![row.clone()]).collect();
        for reduction in [Reduction::Sum, Reduction::MeanOverPairs] {
            let o2m = loss_o2m(&mat(&v), &cube(&slots), 0.2, reduction).unwrap();
            let o2o = loss_o2o(&mat(&v), &mat(&t), 0.2, reduction).unwrap();
            assert!((o2m - o2o).abs() <= 1e-12);
        }
    }

    #[test]
    fn o2m_single_image_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = unit_rows(&mut rng, 1, 4);
        let slots = vec![unit_rows(&mut rng, 3, 4)];
        let loss = loss_o2m(&mat(&v), &cube(&slots), 0.5, Reduction::Sum).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn o2m_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = 2;
        let m = 2;
        let v = unit_rows(&mut rng, k, 6);
        let per_row: Vec<Vec<Vec<f64>>> = (0..k).map(|_| unit_rows(&mut rng, m, 6)).collect();
        let tau = 0.4;
        let got = loss_o2m(&mat(&v), &cube(&per_row), tau, Reduction::Sum).unwrap();

        // Oracle straight from the double-sum formula plus the same-slot
        // image-to-text mirror.
        let mut t2i = 0.0;
        let mut i2t = 0.0;
        for slot in 0..m {
            let texts: Vec<Vec<f64>> = (0..k).map(|i| per_row[i][slot].clone()).collect();
            t2i += brute_infonce(&v, &texts, tau);
            i2t += brute_infonce(&texts, &v, tau);
        }
        let want = 0.5 * (t2i + i2t);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn m2m_reduces_to_o2o_at_h1_m1() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = unit_rows(&mut rng, 4, 5);
        let t = unit_rows(&mut rng, 4, 5);
        let vcube: Vec<Vec<Vec<f64>>> = v.iter().map(|r| vec![r.clone()]).collect();
        let tcube: Vec<Vec<Vec<f64>>> = t.iter().map(|r| vec![r.clone()]).collect();
        let plan = plan_identity(1, 1).unwrap();
        for reduction in [Reduction::Sum, Reduction::MeanOverPairs] {
            let m2m = loss_m2m(&cube(&vcube), &cube(&tcube), &plan, 0.3, reduction).unwrap();
            let o2o = loss_o2o(&mat(&v), &mat(&t), 0.3, reduction).unwrap();
            assert!((m2m - o2o).abs() <= 1e-12);
        }
    }

    #[test]
    fn m2m_single_row_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vcube = vec![unit_rows(&mut rng, 2, 4)];
        let tcube = vec![unit_rows(&mut rng, 2, 4)];
        let plan = plan_identity(2, 2).unwrap();
        let loss = loss_m2m(&cube(&vcube), &cube(&tcube), &plan, 0.5, Reduction::Sum).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn m2m_on_stacked_disjoint_problems_sums_the_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 3;
        let va = unit_rows(&mut rng, k, 6);
        let ta = unit_rows(&mut rng, k, 6);
        let vb = unit_rows(&mut rng, k, 6);
        let tb = unit_rows(&mut rng, k, 6);

        let vcube: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|i| vec![va[i].clone(), vb[i].clone()])
            .collect();
        let tcube: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|i| vec![ta[i].clone(), tb[i].clone()])
            .collect();
        let plan = plan_identity(2, 2).unwrap();
        let stacked = loss_m2m(&cube(&vcube), &cube(&tcube), &plan, 0.3, Reduction::Sum).unwrap();
        let parts = loss_o2o(&mat(&va), &mat(&ta), 0.3, Reduction::Sum).unwrap()
            + loss_o2o(&mat(&vb), &mat(&tb), 0.3, Reduction::Sum).unwrap();
        assert!((stacked - parts).abs() <= 1e-10, "{stacked} vs {parts}");
    }

    #[test]
    fn sharpening_temperature_decreases_loss_when_diagonal_wins() {
        // Build a batch whose positives are each row's argmax, then check
        // tau -> tau/10 strictly decreases the loss.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = 4;
        let d = 8;
        let base = unit_rows(&mut rng, k, d);
        let texts: Vec<Vec<f64>> = base
            .iter()
            .map(|row| {
                let jitter: Vec<f64> = row
                    .iter()
                    .map(|x| x + rng.gen_range(-0.05..0.05))
                    .collect();
                let n = crate::tensor::norm(&jitter);
                jitter.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let v = mat(&base);
        let t = mat(&texts);
        // Confirm the diagonal dominates each row in both directions.
        let sims = crate::tensor::cosine_similarity_matrix(&t, &v).unwrap();
        for j in 0..k {
            for kk in 0..k {
                if kk != j {
                    assert!(sims.get(&[j, j]) > sims.get(&[j, kk]));
                    assert!(sims.get(&[j, j]) > sims.get(&[kk, j]));
                }
            }
        }
        let broad = loss_o2o(&v, &t, 1.0, Reduction::Sum).unwrap();
        let sharp = loss_o2o(&v, &t, 0.1, Reduction::Sum).unwrap();
        assert!(sharp < broad, "sharp {sharp} vs broad {broad}");
    }

    #[test]
    fn losses_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = 5;
        let v = unit_rows(&mut rng, k, 6);
        let t = unit_rows(&mut rng, k, 6);
        let perm = [3usize, 0, 4, 1, 2];
        let vp: Vec<Vec<f64>> = perm.iter().map(|&i| v[i].clone()).collect();
        let tp: Vec<Vec<f64>> = perm.iter().map(|&i| t[i].clone()).collect();
        for reduction in [Reduction::Sum, Reduction::MeanOverPairs] {
            let a = loss_o2o(&mat(&v), &mat(&t), 0.3, reduction).unwrap();
            let b = loss_o2o(&mat(&vp), &mat(&tp), 0.3, reduction).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn losses_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let k = rng.gen_range(1..5);
            let v = unit_rows(&mut rng, k, 4);
            let t = unit_rows(&mut rng, k, 4);
            for reduction in [Reduction::Sum, Reduction::MeanOverPairs] {
                assert!(loss_o2o(&mat(&v), &mat(&t), 0.5, reduction).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let v = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            loss_o2o(&v, &v, 0.0, Reduction::Sum),
            Err(Error::TemperatureNonPositive(_))
        ));
        assert!(matches!(
            infonce_direction(&v, &v, -1.0, Reduction::Sum),
            Err(Error::TemperatureNonPositive(_))
        ));
    }

    #[test]
    fn argmax_is_invariant_to_logit_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let v = unit_rows(&mut rng, 6, 5);
        let t = unit_rows(&mut rng, 6, 5);
        let sims = crate::tensor::cosine_similarity_matrix(&mat(&t), &mat(&v)).unwrap();
        for row in 0..6 {
            let argmax = |scale: f64| {
                let mut best = 0;
                for j in 0..6 {
                    if sims.get(&[row, j]) * scale > sims.get(&[row, best]) * scale {
                        best = j;
                    }
                }
                best
            };
            assert_eq!(argmax(1.0), argmax(17.3));
            assert_eq!(argmax(1.0), argmax(0.02));
        }
    }

    #[test]
    fn o2o_gradients_pass_the_central_difference_oracle() {
        // Random K=3, d=8 batch through a trainable linear projection.
        use crate::autodiff::{finite_difference_check, ParamSet};
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let k = 3;
        let d_in = 4;
        let d_out = 8;
        let vx = mat(&unit_rows(&mut rng, k, d_in));
        let tx = mat(&unit_rows(&mut rng, k, d_in));
        let mut params = ParamSet::new();
        let wdata: Vec<f64> = (0..d_in * d_out).map(|_| rng.gen_range(-0.5..0.5)).collect();
        params
            .add("w", Tensor::from_parts(vec![d_in, d_out], wdata))
            .unwrap();

        let run = |p: &ParamSet, record: Option<&mut ParamSet>| -> f64 {
            let mut tape = Tape::new();
            let w = tape.param(p, 0);
            let vi = tape.input(vx.clone());
            let ti = tape.input(tx.clone());
            let vproj = tape.matmul(vi, w).unwrap();
            let vn = tape.l2_normalize_rows(vproj).unwrap();
            let tproj = tape.matmul(ti, w).unwrap();
            let tn = tape.l2_normalize_rows(tproj).unwrap();
            let loss = o2o_tape(
                &mut tape,
                vn,
                tn,
                LogitScale::Const(1.0 / 0.3),
                Reduction::MeanOverPairs,
            )
            .unwrap();
            if let Some(ps) = record {
                let grads = tape.backward(loss).unwrap();
                grads.accumulate_into(&tape, ps);
            }
            tape.scalar_value(loss)
        };

        params.zero_grads();
        let mut rec = params.clone();
        run(&params, Some(&mut rec));
        for i in 0..params.len() {
            params.get_mut(i).grad = rec.get(i).grad.clone();
        }
        let err = finite_difference_check(|p| Ok(run(p, None)), &mut params, 1e-4).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
