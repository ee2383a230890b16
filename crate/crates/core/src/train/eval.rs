//! Voting evaluation and perturbation sweeps.
//!
//! Inference is student-only: the teacher branch is discarded and every
//! alignment head runs through its fused (reparameterized) matrix. Voting
//! averages logits over passes whose farthest-point sampling seeds are
//! `(base_seed, pass, cloud)` derived streams, so results are reproducible
//! to the byte.

use super::{TrainError, STREAM_FPS, STREAM_VOTE};
use crate::data::{CorruptedView, Protocol};
use crate::geom::PointCloud;
use crate::net::{plan_cloud, student_forward, teacher_forward, ForwardMode, Model, Session};
use crate::rng::Rng;
use std::fmt::Write as _;

/// Accuracy summary over a labeled set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Per class: (label, correct, total).
    pub per_class: Vec<(usize, usize, usize)>,
    pub n: usize,
}

fn argmax_min_index(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn tally(
    predictions: impl Iterator<Item = (usize, usize)>,
    n_classes: usize,
) -> EvalResult {
    let mut correct_by_class = vec![0usize; n_classes];
    let mut total_by_class = vec![0usize; n_classes];
    let mut correct = 0;
    let mut n = 0;
    for (pred, label) in predictions {
        total_by_class[label] += 1;
        if pred == label {
            correct += 1;
            correct_by_class[label] += 1;
        }
        n += 1;
    }
    EvalResult {
        accuracy: correct as f64 / n as f64,
        per_class: (0..n_classes)
            .filter(|&c| total_by_class[c] > 0)
            .map(|c| (c, correct_by_class[c], total_by_class[c]))
            .collect(),
        n,
    }
}

/// Student-branch evaluation with logit averaging over `vote_count` passes
/// that differ only in their farthest-point sampling seeds.
pub fn evaluate_voting(
    model: &Model,
    test_set: &[PointCloud],
    vote_count: usize,
    base_seed: u64,
) -> Result<EvalResult, TrainError> {
    if test_set.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    if vote_count == 0 {
        return Err(TrainError::BadConfig("vote_count must be >= 1".into()));
    }
    let mut preds = Vec::with_capacity(test_set.len());
    for (i, cloud) in test_set.iter().enumerate() {
        let label = cloud.label.ok_or(TrainError::MissingLabel(i))?;
        if label >= model.n_classes {
            return Err(TrainError::LabelOutOfRange {
                label,
                n_classes: model.n_classes,
            });
        }
        let mut summed = vec![0.0f64; model.n_classes];
        for pass in 0..vote_count {
            let mut fps_rng = Rng::from_streams(&[
                base_seed,
                STREAM_VOTE,
                pass as u64,
                i as u64,
            ]);
            let plan = plan_cloud(cloud.points(), &model.enc, &mut fps_rng)?;
            let mut sess = Session::new(&model.params, true);
            let out = student_forward(&mut sess, &plan, model, ForwardMode::Infer)?;
            for (s, &v) in summed.iter_mut().zip(sess.g.values(out.logits)) {
                *s += v;
            }
        }
        preds.push((argmax_min_index(&summed), label));
    }
    Ok(tally(preds.into_iter(), model.n_classes))
}

/// Teacher-branch accuracy (single pass, fused heads); used to verify that
/// the invariant branch is unaffected by test-set rotation.
pub fn evaluate_teacher(
    model: &Model,
    test_set: &[PointCloud],
    base_seed: u64,
) -> Result<EvalResult, TrainError> {
    if test_set.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let mut preds = Vec::with_capacity(test_set.len());
    for (i, cloud) in test_set.iter().enumerate() {
        let label = cloud.label.ok_or(TrainError::MissingLabel(i))?;
        let mut fps_rng = Rng::from_streams(&[base_seed, STREAM_FPS, i as u64]);
        let plan = plan_cloud(cloud.points(), &model.enc, &mut fps_rng)?;
        let mut sess = Session::new(&model.params, true);
        let out = teacher_forward(&mut sess, &plan, model, ForwardMode::Infer)?;
        preds.push((
            argmax_min_index(sess.g.values(out.logits)),
            label,
        ));
    }
    Ok(tally(preds.into_iter(), model.n_classes))
}

/// One row of a perturbation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub protocol: Protocol,
    pub level: f64,
    pub accuracy: f64,
    pub seed: u64,
}

/// Serialize sweep rows (`protocol,level,accuracy,seed`, 9 significant
/// digits).
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("protocol,level,accuracy,seed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.8e},{:.8e},{}",
            r.protocol.name(),
            r.level,
            r.accuracy,
            r.seed
        );
    }
    out
}

/// Evaluate the model under one corruption protocol across a grid of
/// severity levels. Level 0 reproduces the clean accuracy exactly (same
/// evaluation seeds, identity corruption).
pub fn perturbation_sweep(
    model: &Model,
    test_set: &[PointCloud],
    protocol: Protocol,
    grid: &[f64],
    vote_count: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::BadGrid("empty grid".into()));
    }
    for &level in grid {
        let ok = match protocol {
            Protocol::Rotation => (0.0..=180.0).contains(&level),
            Protocol::Noise => level >= 0.0,
            Protocol::Outlier => (0.0..=1.0).contains(&level),
        };
        if !ok || !level.is_finite() {
            return Err(TrainError::BadGrid(format!(
                "level {level} invalid for {}",
                protocol.name()
            )));
        }
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &level in grid {
        let corrupted = CorruptedView::new(test_set, protocol, level, seed).materialize()?;
        let result = evaluate_voting(model, &corrupted, vote_count, seed)?;
        rows.push(SweepRow {
            protocol,
            level,
            accuracy: result.accuracy,
            seed,
        });
    }
    Ok(rows)
}
