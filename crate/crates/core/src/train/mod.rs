//! Loss assembly and the joint (online-distillation) training loop.
//!
//! Teacher and student are trained together: the distillation terms send
//! gradients into both branches, every level's alignment loss compares
//! patch blocks at shared centers, and Adam updates one flat parameter set.
//! Everything is driven by derived generator streams, so a seed fully
//! determines every metric and checkpoint byte.

mod eval;

pub use eval::{
    evaluate_teacher, evaluate_voting, perturbation_sweep, sweep_to_csv, EvalResult, SweepRow,
};

use crate::align::{attention_map, kl_alignment_loss, nmi_loss, AlignError};
use crate::autodiff::{Adam, DiffError, Id, ParamStore};
use crate::data::DataError;
use crate::geom::{apply_transform, random_rotation, GeomError, PointCloud};
use crate::net::{
    plan_cloud, student_forward, teacher_forward, BranchOut, CloudPlan, EncoderConfig,
    ForwardMode, Model, NetError, Session,
};
use crate::rng::Rng;
use std::fmt::Write as _;
use thiserror::Error;

pub(crate) const STREAM_FPS: u64 = 0x4650_5321;
pub(crate) const STREAM_SHUFFLE: u64 = 0x5348_5546;
pub(crate) const STREAM_KL: u64 = 0x4b4c_5350;
pub(crate) const STREAM_VOTE: u64 = 0x564f_5445;
pub(crate) const STREAM_AUG: u64 = 0x4155_4752;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("cloud {0} has no label")]
    MissingLabel(usize),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("bad grid: {0}")]
    BadGrid(String),
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("non-finite value during training: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        match e {
            DiffError::NonFinite { op } => TrainError::NonFinite(format!("op {op}")),
            other => TrainError::Net(NetError::Diff(other)),
        }
    }
}

/// Which training arm to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillMode {
    /// Student only, cross-entropy only.
    NoDistill,
    /// Teacher + student with a direct feature L2 alignment (no attention
    /// maps, no NMI, no heads).
    NaiveAlign,
    /// Full pipeline: alignment heads, sampled attention KL, NMI terms.
    Full,
}

/// Training and evaluation settings.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sample_m: usize,
    pub nmi_bins: usize,
    pub nmi_bandwidth: f64,
    pub vote_count: usize,
    pub rotation_max_deg: f64,
    pub mode: DistillMode,
    /// Rotate training inputs randomly (the data-augmentation baseline).
    pub augment: bool,
    /// Cut the KL gradient into the teacher branch (ablation switch; the
    /// default is mutual learning).
    pub stop_teacher_grad: bool,
    /// Weight of the naive L2 alignment term.
    pub naive_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 32,
            learning_rate: 0.001,
            seed: 7,
            temperature: 4.0,
            lambda1: 0.5,
            lambda2: 0.5,
            sample_m: 8,
            nmi_bins: 16,
            nmi_bandwidth: 1.0 / 16.0,
            vote_count: 3,
            rotation_max_deg: 30.0,
            mode: DistillMode::Full,
            augment: false,
            stop_teacher_grad: false,
            naive_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.vote_count == 0 {
            return Err(TrainError::BadConfig("vote_count must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::BadConfig("temperature must be > 0".into()));
        }
        if self.sample_m == 0 {
            return Err(TrainError::BadConfig("sample_m must be >= 1".into()));
        }
        if self.nmi_bins < 2 || !(self.nmi_bandwidth > 0.0) {
            return Err(TrainError::BadConfig("bad nmi settings".into()));
        }
        if !(0.0..=180.0).contains(&self.rotation_max_deg) {
            return Err(TrainError::BadConfig("bad rotation_max_deg".into()));
        }
        Ok(())
    }
}

/// Per-epoch training record. `loss_total` always equals the sum of the
/// five loss components (within accumulation rounding).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_kl: f64,
    pub loss_nmi_t: f64,
    pub loss_nmi_s: f64,
    pub ce_t: f64,
    pub ce_s: f64,
    pub acc_student: f64,
    pub acc_teacher: f64,
    /// Measured wall time; serialized as 0 so identical runs write
    /// byte-identical files (live timing belongs to logs, not artifacts).
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,loss_total,loss_kl,loss_nmi_t,loss_nmi_s,ce_t,ce_s,acc_student,acc_teacher,wall_seconds";

fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Serialize metric records to the bit-exact CSV format.
pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            fmt9(r.loss_total),
            fmt9(r.loss_kl),
            fmt9(r.loss_nmi_t),
            fmt9(r.loss_nmi_s),
            fmt9(r.ce_t),
            fmt9(r.ce_s),
            fmt9(r.acc_student),
            fmt9(r.acc_teacher),
            fmt9(0.0),
        );
    }
    out
}

/// Cross-entropy of a `1 x n_classes` logit row against the true class,
/// stabilized with a max shift. Shift-invariant by construction.
pub fn cross_entropy(
    sess: &mut Session,
    logits: Id,
    label: usize,
) -> Result<Id, TrainError> {
    let n_classes = sess.g.cols(logits);
    if label >= n_classes {
        return Err(TrainError::LabelOutOfRange { label, n_classes });
    }
    let m = sess.g.max_reduce(logits, 1)?; // 1 x 1
    let ones = sess.g.constant_from(1, n_classes, vec![1.0; n_classes]);
    let m_tiled = sess.g.matmul(m, ones)?;
    let shifted = sess.g.sub(logits, m_tiled)?;
    let e = sess.g.exp(shifted)?;
    let s = sess.g.sum_reduce(e, 1)?;
    let lse = sess.g.log(s)?;
    let mut onehot = vec![0.0; n_classes];
    onehot[label] = 1.0;
    let oh = sess.g.constant_from(1, n_classes, onehot);
    let picked = sess.g.mul(logits, oh)?;
    let logit_y = sess.g.sum_reduce(picked, 1)?;
    let total = sess.g.add(m, lse)?;
    Ok(sess.g.sub(total, logit_y)?)
}

/// The five loss components of one cloud, as graph nodes.
pub struct LossParts {
    pub total: Id,
    pub kl: Id,
    pub nmi_t: Id,
    pub nmi_s: Id,
    pub ce_t: Id,
    pub ce_s: Id,
}

impl LossParts {
    pub fn values(&self, sess: &Session) -> [f64; 6] {
        [
            sess.g.value_scalar(self.total),
            sess.g.value_scalar(self.kl),
            sess.g.value_scalar(self.nmi_t),
            sess.g.value_scalar(self.nmi_s),
            sess.g.value_scalar(self.ce_t),
            sess.g.value_scalar(self.ce_s),
        ]
    }
}

fn mean_of(sess: &mut Session, terms: &[Id]) -> Result<Id, TrainError> {
    assert!(!terms.is_empty());
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = sess.g.add(acc, t)?;
    }
    Ok(sess.g.scalar_mul(acc, 1.0 / terms.len() as f64)?)
}

/// Assemble the full training loss for one cloud.
///
/// Full mode: mean-over-levels attention KL (patch-paired through the
/// shared plan) + per-branch NMI terms + both cross-entropies. Naive mode
/// books its L2 alignment under the distillation slot. The total is the
/// in-order sum of the five components, so component additivity holds at
/// every step.
pub fn total_loss(
    sess: &mut Session,
    plan: &CloudPlan,
    teacher: Option<&BranchOut>,
    student: &BranchOut,
    label: usize,
    cfg: &TrainConfig,
    kl_rng: &mut Rng,
) -> Result<LossParts, TrainError> {
    let zero = sess.g.scalar_constant(0.0);
    let ce_s = cross_entropy(sess, student.logits, label)?;
    let ce_t = match teacher {
        Some(t) => cross_entropy(sess, t.logits, label)?,
        None => zero,
    };

    let (mut kl, mut nmi_t, mut nmi_s) = (zero, zero, zero);
    match (cfg.mode, teacher) {
        (DistillMode::Full, Some(t_out)) => {
            let mut kl_levels = Vec::new();
            let mut nmi_t_levels = Vec::new();
            let mut nmi_s_levels = Vec::new();
            for (li, lp) in plan.levels.iter().enumerate() {
                let channels = student.levels[li].channels;
                let t_split = t_out.splits[li].as_ref().expect("full mode has heads");
                let s_split = student.splits[li].as_ref().expect("full mode has heads");
                let q_t = sess.param(&format!("t.l{li}.align.q"))?;
                let q_s = sess.param(&format!("s.l{li}.align.q"))?;
                let (t_xl, t_xh, t_pre) = if cfg.stop_teacher_grad {
                    (
                        sess.g.detach(t_split.x_l),
                        sess.g.detach(t_split.x_h),
                        sess.g.detach(t_split.pre),
                    )
                } else {
                    (t_split.x_l, t_split.x_h, t_split.pre)
                };
                let sample_m = cfg.sample_m.min(lp.align_k);
                let m = lp.centers.len();
                let mut kl_patches = Vec::with_capacity(m);
                let mut nt_patches = Vec::with_capacity(m);
                let mut ns_patches = Vec::with_capacity(m);
                for ci in 0..m {
                    let rows = &lp.align_flat[ci * lp.align_k..(ci + 1) * lp.align_k];
                    let t_l = sess.g.gather_rows(t_xl, rows)?;
                    let s_l = sess.g.gather_rows(s_split.x_l, rows)?;
                    let attn_t = attention_map(&mut sess.g, t_l, q_t)?;
                    let attn_s = attention_map(&mut sess.g, s_l, q_s)?;
                    kl_patches.push(kl_alignment_loss(
                        &mut sess.g,
                        attn_t,
                        attn_s,
                        cfg.temperature,
                        cfg.lambda1,
                        cfg.lambda2,
                        sample_m,
                        channels,
                        kl_rng,
                    )?);

                    let t_h = sess.g.gather_rows(t_xh, rows)?;
                    let t_x = sess.g.gather_rows(t_pre, rows)?;
                    nt_patches.push(nmi_loss(
                        &mut sess.g,
                        t_h,
                        t_x,
                        cfg.nmi_bins,
                        cfg.nmi_bandwidth,
                    )?);
                    let s_h = sess.g.gather_rows(s_split.x_h, rows)?;
                    let s_x = sess.g.gather_rows(s_split.pre, rows)?;
                    ns_patches.push(nmi_loss(
                        &mut sess.g,
                        s_h,
                        s_x,
                        cfg.nmi_bins,
                        cfg.nmi_bandwidth,
                    )?);
                }
                kl_levels.push(mean_of(sess, &kl_patches)?);
                nmi_t_levels.push(mean_of(sess, &nt_patches)?);
                nmi_s_levels.push(mean_of(sess, &ns_patches)?);
            }
            kl = mean_of(sess, &kl_levels)?;
            nmi_t = mean_of(sess, &nmi_t_levels)?;
            nmi_s = mean_of(sess, &nmi_s_levels)?;
        }
        (DistillMode::NaiveAlign, Some(t_out)) => {
            // Direct feature L2 between the branches, booked under the
            // distillation slot so component additivity still holds.
            let mut terms = Vec::new();
            for (li, lv) in student.levels.iter().enumerate() {
                let d = sess.g.sub(t_out.levels[li].feat, lv.feat)?;
                let sq = sess.g.square(d)?;
                let rows = sess.g.mean_reduce(sq, 0)?;
                let scalar = sess.g.mean_reduce(rows, 1)?;
                terms.push(scalar);
            }
            let l2 = mean_of(sess, &terms)?;
            kl = sess.g.scalar_mul(l2, cfg.naive_weight)?;
        }
        (DistillMode::NoDistill, _) | (_, None) => {}
    }

    let a = sess.g.add(kl, nmi_t)?;
    let b = sess.g.add(a, nmi_s)?;
    let c = sess.g.add(b, ce_t)?;
    let total = sess.g.add(c, ce_s)?;
    Ok(LossParts {
        total,
        kl,
        nmi_t,
        nmi_s,
        ce_t,
        ce_s,
    })
}

/// Plan a cloud once and run both branches on the shared structure,
/// guaranteeing one-to-one patch correspondence for the alignment losses.
pub fn shared_center_forward(
    sess: &mut Session,
    points: &[[f64; 3]],
    model: &Model,
    fps_rng: &mut Rng,
    mode: ForwardMode,
) -> Result<(CloudPlan, Option<BranchOut>, BranchOut), TrainError> {
    let plan = plan_cloud(points, &model.enc, fps_rng)?;
    let student = student_forward(sess, &plan, model, mode)?;
    let teacher = if model.with_teacher {
        Some(teacher_forward(sess, &plan, model, mode)?)
    } else {
        None
    };
    Ok((plan, teacher, student))
}

/// Central-finite-difference check of the full training loss (both
/// branches, alignment heads, all loss terms) against the tape gradients,
/// over every parameter component.
///
/// Returns `(max relative error, components checked)` with the error
/// metric `|a - fd| / max(1, |a|, |fd|)`. Patch structure and sampled KL
/// rows are frozen per cloud, so perturbed evaluations see the identical
/// graph shape. The check runs at a jittered init: the exact zero-`u` head
/// init is a structural kink of the loss (max-pooled features tie across
/// centers and the residual's min-max argument swaps precisely at zero),
/// and the attention KL is identically zero there, so a generic nearby
/// point both avoids the kink and actually exercises the KL path.
pub fn pipeline_grad_check(
    clouds: &[PointCloud],
    enc: &EncoderConfig,
    n_classes: usize,
    cfg: &TrainConfig,
    step: f64,
) -> Result<(f64, usize), TrainError> {
    let mut model = Model::init(enc.clone(), n_classes, true, true, cfg.seed)?;
    let mut jitter = Rng::from_streams(&[cfg.seed, 0x4a49_5454]); // "JITT"
    for pi in 0..model.params.len() {
        let t = model.params.tensor_mut(pi);
        for v in &mut t.values {
            *v += 0.05 * jitter.normal();
        }
    }
    let mut plans: Vec<CloudPlan> = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            plan_cloud(
                c.points(),
                enc,
                &mut Rng::from_streams(&[cfg.seed, STREAM_FPS, i as u64]),
            )
        })
        .collect::<Result<_, _>>()?;

    // Pin the feature-space patch membership at the base point: the tape
    // differentiates within the current piecewise region, and perturbed
    // evaluations must stay in it.
    for plan in &mut plans {
        let mut sess = Session::new(&model.params, false);
        let out = student_forward(&mut sess, plan, &model, ForwardMode::Train)?;
        for (lp, idx) in plan.levels.iter_mut().zip(out.fsp_indices) {
            lp.frozen_fsp = Some(idx);
        }
    }

    // Loss over all clouds for a given parameter assignment; the model's
    // architecture is fixed, only the bound store varies.
    let run = |store: &ParamStore,
               want_grads: bool|
     -> Result<(f64, Option<Vec<Vec<f64>>>), TrainError> {
        let mut total = 0.0;
        let mut grads: Option<Vec<Vec<f64>>> = want_grads.then(|| {
            (0..store.len())
                .map(|i| vec![0.0; store.by_index(i).1.len()])
                .collect()
        });
        for (i, cloud) in clouds.iter().enumerate() {
            let mut sess = Session::new(store, false);
            let student = student_forward(&mut sess, &plans[i], &model, ForwardMode::Train)?;
            let teacher = teacher_forward(&mut sess, &plans[i], &model, ForwardMode::Train)?;
            let mut kl_rng = Rng::from_streams(&[cfg.seed, STREAM_KL, i as u64]);
            let parts = total_loss(
                &mut sess,
                &plans[i],
                Some(&teacher),
                &student,
                cloud.label.ok_or(TrainError::MissingLabel(i))?,
                cfg,
                &mut kl_rng,
            )?;
            total += sess.g.value_scalar(parts.total);
            if let Some(acc) = grads.as_mut() {
                sess.g.backward(parts.total)?;
                sess.add_grads_to(acc);
            }
        }
        Ok((total, grads))
    };

    let (_, analytic) = run(&model.params, true)?;
    let analytic = analytic.unwrap();

    let mut store = model.params.clone();
    let mut max_rel = 0.0_f64;
    let mut components = 0;
    let mut worst = String::new();
    for pi in 0..store.len() {
        for ci in 0..store.by_index(pi).1.len() {
            let orig = store.by_index(pi).1.values[ci];
            store.tensor_mut(pi).values[ci] = orig + step;
            let (plus, _) = run(&store, false)?;
            store.tensor_mut(pi).values[ci] = orig - step;
            let (minus, _) = run(&store, false)?;
            store.tensor_mut(pi).values[ci] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let a = analytic[pi][ci];
            let rel = (a - fd).abs() / 1.0_f64.max(a.abs()).max(fd.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = format!(
                    "{}[{ci}] analytic {a:.6e} fd {fd:.6e}",
                    store.by_index(pi).0
                );
            }
            components += 1;
        }
    }
    if !worst.is_empty() {
        eprintln!("pipeline_grad_check worst: {worst}");
    }
    Ok((max_rel, components))
}

/// Train on `train_set`, evaluating on `val_set` each epoch; returns the
/// model and the per-epoch metric series. Deterministic given the config.
pub fn fit(
    train_set: &[PointCloud],
    val_set: &[PointCloud],
    enc: EncoderConfig,
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<MetricsRecord>), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::BadConfig("empty training set".into()));
    }
    for (i, c) in train_set.iter().chain(val_set.iter()).enumerate() {
        let label = c.label.ok_or(TrainError::MissingLabel(i))?;
        if label >= n_classes {
            return Err(TrainError::LabelOutOfRange { label, n_classes });
        }
    }
    let with_teacher = cfg.mode != DistillMode::NoDistill;
    let with_heads = cfg.mode == DistillMode::Full;
    let mut model = Model::init(enc.clone(), n_classes, with_teacher, with_heads, cfg.seed)?;

    // Patch structure depends only on geometry and the per-cloud FPS
    // stream, so canonical-pose plans are computed once and reused across
    // epochs. Augmented runs rotate the inputs and must re-plan.
    let cached_plans: Option<Vec<CloudPlan>> = if cfg.augment {
        None
    } else {
        Some(
            train_set
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    plan_cloud(
                        c.points(),
                        &enc,
                        &mut Rng::from_streams(&[cfg.seed, STREAM_FPS, i as u64]),
                    )
                })
                .collect::<Result<_, _>>()?,
        )
    };

    let mut adam = Adam::new(cfg.learning_rate, &model.params);
    let n_params = model.params.len();
    let param_lens: Vec<usize> = (0..n_params)
        .map(|i| model.params.by_index(i).1.len())
        .collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let epoch_start = std::time::Instant::now();
        let mut shuffle_rng = Rng::from_streams(&[cfg.seed, STREAM_SHUFFLE, epoch as u64]);
        shuffle_rng.shuffle(&mut order);

        let mut sums = [0.0f64; 6];
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> =
                param_lens.iter().map(|&l| vec![0.0; l]).collect();
            for &idx in batch {
                let cloud = &train_set[idx];
                let mut kl_rng = Rng::from_streams(&[
                    cfg.seed,
                    STREAM_KL,
                    epoch as u64,
                    idx as u64,
                ]);
                let mut sess = Session::new(&model.params, false);
                let parts = if let Some(plans) = &cached_plans {
                    let plan = &plans[idx];
                    let student = student_forward(&mut sess, plan, &model, ForwardMode::Train)?;
                    let teacher = if with_teacher {
                        Some(teacher_forward(&mut sess, plan, &model, ForwardMode::Train)?)
                    } else {
                        None
                    };
                    total_loss(
                        &mut sess,
                        plan,
                        teacher.as_ref(),
                        &student,
                        cloud.label.unwrap(),
                        cfg,
                        &mut kl_rng,
                    )?
                } else {
                    let mut aug_rng = Rng::from_streams(&[
                        cfg.seed,
                        STREAM_AUG,
                        epoch as u64,
                        idx as u64,
                    ]);
                    let rot = random_rotation(cfg.rotation_max_deg, &mut aug_rng)?;
                    let rotated = apply_transform(cloud, &rot)?;
                    let mut fps_rng = Rng::from_streams(&[
                        cfg.seed,
                        STREAM_FPS,
                        epoch as u64,
                        idx as u64,
                    ]);
                    let (plan, teacher, student) = shared_center_forward(
                        &mut sess,
                        rotated.points(),
                        &model,
                        &mut fps_rng,
                        ForwardMode::Train,
                    )?;
                    total_loss(
                        &mut sess,
                        &plan,
                        teacher.as_ref(),
                        &student,
                        cloud.label.unwrap(),
                        cfg,
                        &mut kl_rng,
                    )?
                };
                sess.g.backward(parts.total)?;
                sess.add_grads_to(&mut grads);
                for (s, v) in sums.iter_mut().zip(parts.values(&sess)) {
                    *s += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            adam.step(&mut model.params, &grads);
        }

        let n = train_set.len() as f64;
        let acc_student = if val_set.is_empty() {
            0.0
        } else {
            evaluate_voting(&model, val_set, 1, cfg.seed)?.accuracy
        };
        let acc_teacher = if with_teacher && !val_set.is_empty() {
            evaluate_teacher(&model, val_set, cfg.seed)?.accuracy
        } else {
            0.0
        };
        metrics.push(MetricsRecord {
            epoch,
            loss_total: sums[0] / n,
            loss_kl: sums[1] / n,
            loss_nmi_t: sums[2] / n,
            loss_nmi_s: sums[3] / n,
            ce_t: sums[4] / n,
            ce_s: sums[5] / n,
            acc_student,
            acc_teacher,
            wall_seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }
    Ok((model, metrics))
}
