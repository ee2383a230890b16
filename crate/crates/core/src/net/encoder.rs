//! The hierarchical teacher and student branches over a shared per-cloud
//! plan.
//!
//! All discrete structure (farthest-point centers, patch membership,
//! spherical sub-regions, invariant patch coordinates, alignment
//! neighborhoods) depends only on geometry and the sampling seed, so it is
//! computed once per cloud in [`plan_cloud`] and consumed by both branches.
//! That sharing is what gives the alignment losses a one-to-one patch
//! correspondence between teacher and student.

use super::blocks::{feature_space_patch, gsm_planned, plan_balls, BallPlan};
use super::{init_mlp, mlp_rows, EncoderConfig, FeatureMap, NetError, Session};
use crate::align::{aligned_forward, register_head, AlignMode};
use crate::autodiff::{Id, ParamStore, Tensor};
use crate::geom::{
    compute_lra_table, farthest_point_sample, knn3, Patch, PointCloud,
};
use crate::invariant::{invariant_coords, order_neighbors, COORD_WIDTH};
use crate::rng::Rng;

/// Forward flavor: training keeps the explicit alignment path and split
/// outputs; inference uses the fused head and binds parameters as
/// constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Infer,
}

/// Low/high split of one level's pre-alignment features.
pub struct SplitOut {
    pub pre: Id,
    pub x_l: Id,
    pub x_h: Id,
}

/// Shared discrete structure of one encoder level for one cloud.
pub struct LevelPlan {
    /// Background-space coordinates of this level's centers (an FPS subset
    /// of the previous level's points).
    pub centers: Vec<[f64; 3]>,
    /// Cached invariant patch coordinates, `(m * k) x 8`.
    pub teacher_coords: Tensor,
    /// Flattened ordered patch membership, `(m * k)` indices into the
    /// previous level's point list.
    pub teacher_flat: Vec<usize>,
    /// Spherical sub-region membership and coordinate rows per radius.
    pub balls: BallPlan,
    /// Flattened alignment-patch membership, `(m * align_k)` indices into
    /// this level's centers.
    pub align_flat: Vec<usize>,
    pub align_k: usize,
    pub k: usize,
    /// Number of patches whose invariant coordinates are degenerate.
    pub degenerate_patches: usize,
    /// Pinned feature-space patch membership (gradient checking only).
    pub frozen_fsp: Option<Vec<usize>>,
}

/// All levels' structure for one cloud.
pub struct CloudPlan {
    pub points: Vec<[f64; 3]>,
    pub levels: Vec<LevelPlan>,
}

impl CloudPlan {
    pub fn degenerate(&self) -> bool {
        self.levels.iter().any(|l| l.degenerate_patches > 0)
    }
}

/// Build the shared structure for one cloud. `rng` drives only the FPS
/// starting points, so a fixed seed fixes every center and patch.
pub fn plan_cloud(
    points: &[[f64; 3]],
    cfg: &EncoderConfig,
    rng: &mut Rng,
) -> Result<CloudPlan, NetError> {
    let mut prev: Vec<[f64; 3]> = points.to_vec();
    let mut levels = Vec::with_capacity(cfg.levels.len());
    for (li, lv) in cfg.levels.iter().enumerate() {
        let n_prev = prev.len();
        if lv.k + 1 > n_prev {
            return Err(NetError::BadConfig(format!(
                "level {li}: k = {} needs at least {} points, have {n_prev}",
                lv.k,
                lv.k + 1
            )));
        }
        let prev_cloud = PointCloud::new(prev.clone(), None)?;
        let fps = farthest_point_sample(&prev_cloud, lv.centers, rng)?;
        let centers: Vec<[f64; 3]> = fps.iter().map(|&i| prev[i]).collect();

        // Teacher patches: k nearest previous-level points (self excluded),
        // canonically ordered, mapped to invariant coordinates.
        let lras = compute_lra_table(&prev, lv.k.min(n_prev));
        let knn_sets = knn3(&prev, &centers, lv.k + 1)?;
        let mut teacher_flat = Vec::with_capacity(lv.centers * lv.k);
        let mut coord_rows = Vec::with_capacity(lv.centers * lv.k * COORD_WIDTH);
        let mut degenerate_patches = 0;
        for (ci, &center_idx) in fps.iter().enumerate() {
            let neighbor_indices: Vec<usize> = knn_sets[ci]
                .iter()
                .copied()
                .filter(|&j| j != center_idx)
                .take(lv.k)
                .collect();
            let patch = Patch {
                center_index: center_idx,
                neighbor_indices,
                level: li,
            };
            let center_lra = lras[center_idx];
            let (ordered, order_failed) = if center_lra.degenerate {
                (patch.clone(), true)
            } else {
                match order_neighbors(&prev, &patch, center_lra.axis) {
                    Ok(p) => (p, false),
                    Err(_) => (patch.clone(), true),
                }
            };
            let coords = invariant_coords(&prev, &ordered, &lras);
            if coords.degenerate || order_failed {
                degenerate_patches += 1;
            }
            coord_rows.extend_from_slice(&coords.values);
            teacher_flat.extend_from_slice(&ordered.neighbor_indices);
        }
        let teacher_coords =
            Tensor::new(lv.centers * lv.k, COORD_WIDTH, coord_rows);

        let balls = plan_balls(&prev, &centers, &lv.radii, lv.k);

        // Alignment patches: k nearest centers among this level's centers
        // (self included) so teacher and student blocks pair one-to-one.
        let align_k = lv.k.min(centers.len());
        let align_sets = knn3(&centers, &centers, align_k)?;
        let align_flat: Vec<usize> = align_sets.into_iter().flatten().collect();

        levels.push(LevelPlan {
            centers: centers.clone(),
            teacher_coords,
            teacher_flat,
            balls,
            align_flat,
            align_k,
            k: lv.k,
            degenerate_patches,
            frozen_fsp: None,
        });
        prev = centers;
    }
    Ok(CloudPlan {
        points: points.to_vec(),
        levels,
    })
}

/// Both branches of the network plus the per-level alignment heads, stored
/// as one flat parameter set with a fixed insertion order.
pub struct Model {
    pub enc: EncoderConfig,
    pub n_classes: usize,
    pub with_teacher: bool,
    pub with_heads: bool,
    pub params: ParamStore,
}

impl Model {
    pub fn init(
        enc: EncoderConfig,
        n_classes: usize,
        with_teacher: bool,
        with_heads: bool,
        seed: u64,
    ) -> Result<Model, NetError> {
        enc.validate()?;
        if n_classes == 0 {
            return Err(NetError::BadConfig("n_classes must be >= 1".into()));
        }
        let mut rng = Rng::from_streams(&[seed, 0x494e_4954]); // "INIT"
        let mut params = ParamStore::new();

        let mut prev_c = 3;
        for (li, lv) in enc.levels.iter().enumerate() {
            init_mlp(
                &mut params,
                &format!("s.l{li}.fsp"),
                2 * prev_c,
                &lv.channels,
                &mut rng,
            );
            let sf_c = *lv.channels.last().unwrap();
            for ri in 0..lv.radii.len() {
                init_mlp(
                    &mut params,
                    &format!("s.l{li}.gsm.r{ri}"),
                    6 + sf_c,
                    &lv.channels,
                    &mut rng,
                );
            }
            prev_c = lv.out_channels();
        }
        let last_c = enc.levels.last().unwrap().out_channels();
        init_mlp(&mut params, "s.head", last_c, &[last_c, n_classes], &mut rng);

        if with_teacher {
            let mut prev_c = 0;
            for (li, lv) in enc.levels.iter().enumerate() {
                let mut widths = lv.channels.clone();
                *widths.last_mut().unwrap() = lv.out_channels();
                init_mlp(
                    &mut params,
                    &format!("t.l{li}.mlp"),
                    COORD_WIDTH + prev_c,
                    &widths,
                    &mut rng,
                );
                prev_c = lv.out_channels();
            }
            init_mlp(&mut params, "t.head", last_c, &[last_c, n_classes], &mut rng);
        }

        if with_heads {
            let branches: &[&str] = if with_teacher { &["s", "t"] } else { &["s"] };
            for &b in branches {
                for li in 0..enc.levels.len() {
                    let c = enc.out_channels(li);
                    register_head(
                        &mut params,
                        &format!("{b}.l{li}.align"),
                        c,
                        enc.rank(li),
                        &mut rng,
                    )
                    .map_err(|e| NetError::BadConfig(e.to_string()))?;
                }
            }
        }

        Ok(Model {
            enc,
            n_classes,
            with_teacher,
            with_heads,
            params,
        })
    }

    /// Rebuild a model around a loaded checkpoint, verifying that the
    /// parameter names and shapes match this architecture exactly.
    pub fn from_params(
        enc: EncoderConfig,
        n_classes: usize,
        with_teacher: bool,
        with_heads: bool,
        params: ParamStore,
    ) -> Result<Model, NetError> {
        let reference = Model::init(enc.clone(), n_classes, with_teacher, with_heads, 0)?;
        if reference.params.len() != params.len() {
            return Err(NetError::BadConfig(format!(
                "checkpoint has {} tensors, architecture expects {}",
                params.len(),
                reference.params.len()
            )));
        }
        for i in 0..params.len() {
            let (name_ref, t_ref) = reference.params.by_index(i);
            let (name, t) = params.by_index(i);
            if name != name_ref || t.rows != t_ref.rows || t.cols != t_ref.cols {
                return Err(NetError::BadConfig(format!(
                    "checkpoint tensor {i} is {name} ({}x{}), expected {name_ref} ({}x{})",
                    t.rows, t.cols, t_ref.rows, t_ref.cols
                )));
            }
        }
        Ok(Model {
            enc,
            n_classes,
            with_teacher,
            with_heads,
            params,
        })
    }
}

/// One branch's forward products.
pub struct BranchOut {
    pub levels: Vec<FeatureMap>,
    /// Per level: the low/high split when an alignment head ran in train
    /// mode.
    pub splits: Vec<Option<SplitOut>>,
    /// Per level: the feature-space patch membership the student used
    /// (empty for the teacher).
    pub fsp_indices: Vec<Vec<usize>>,
    pub global: Id,
    pub logits: Id,
}

fn align_stage(
    sess: &mut Session,
    x: Id,
    branch: &str,
    level: usize,
    with_heads: bool,
    mode: ForwardMode,
) -> Result<(Id, Option<SplitOut>), NetError> {
    if !with_heads {
        return Ok((x, None));
    }
    let prefix = format!("{branch}.l{level}.align");
    let amode = match mode {
        ForwardMode::Train => AlignMode::Train,
        ForwardMode::Infer => AlignMode::Infer,
    };
    aligned_forward(sess, x, &prefix, amode)
        .map_err(|e| NetError::BadConfig(e.to_string()))
}

/// Student branch: identity coordinates in, feature-space patches and the
/// multi-radius separable mapping per level, classification head at the
/// end. Not rotation invariant by construction.
pub fn student_forward(
    sess: &mut Session,
    plan: &CloudPlan,
    model: &Model,
    mode: ForwardMode,
) -> Result<BranchOut, NetError> {
    let n = plan.points.len();
    let coords: Vec<f64> = plan.points.iter().flatten().copied().collect();
    let mut feat = sess.g.constant_from(n, 3, coords);
    let mut levels = Vec::with_capacity(model.enc.levels.len());
    let mut splits = Vec::with_capacity(model.enc.levels.len());
    let mut fsp_indices = Vec::with_capacity(model.enc.levels.len());
    for (li, lv) in model.enc.levels.iter().enumerate() {
        let lp = &plan.levels[li];
        let k_fsp = lv.k.min(sess.g.rows(feat));
        let (x_sf, used_fsp) = feature_space_patch(
            sess,
            feat,
            k_fsp,
            &format!("s.l{li}.fsp"),
            &lv.channels,
            lp.frozen_fsp.as_deref(),
        )?;
        fsp_indices.push(used_fsp);
        let gsm = gsm_planned(sess, &lp.balls, x_sf, &format!("s.l{li}.gsm"), &lv.channels)?;
        let (out, split) = align_stage(sess, gsm, "s", li, model.with_heads, mode)?;
        feat = out;
        levels.push(FeatureMap {
            level: li,
            centers: lp.centers.clone(),
            feat,
            channels: lv.out_channels(),
        });
        splits.push(split);
    }
    let global = sess.g.max_reduce(feat, 0)?;
    let last_c = model.enc.levels.last().unwrap().out_channels();
    let logits = mlp_rows(sess, global, "s.head", &[last_c, model.n_classes], false)?;
    Ok(BranchOut {
        levels,
        splits,
        fsp_indices,
        global,
        logits,
    })
}

/// Teacher branch: cached invariant patch coordinates per level (deeper
/// levels concatenate the previous level's features of each ordered
/// neighbor), shared-MLP pooling, classification head. Rotation invariant
/// end to end, up to degenerate patches.
pub fn teacher_forward(
    sess: &mut Session,
    plan: &CloudPlan,
    model: &Model,
    mode: ForwardMode,
) -> Result<BranchOut, NetError> {
    assert!(model.with_teacher, "model was built without a teacher branch");
    let mut prev_feat: Option<Id> = None;
    let mut levels = Vec::with_capacity(model.enc.levels.len());
    let mut splits = Vec::with_capacity(model.enc.levels.len());
    for (li, lv) in model.enc.levels.iter().enumerate() {
        let lp = &plan.levels[li];
        let coords = sess.g.constant(&lp.teacher_coords);
        let rows = match prev_feat {
            None => coords,
            Some(pf) => {
                let nbr = sess.g.gather_rows(pf, &lp.teacher_flat)?;
                sess.g.concat(1, &[coords, nbr])?
            }
        };
        let mut widths = lv.channels.clone();
        *widths.last_mut().unwrap() = lv.out_channels();
        let h = mlp_rows(sess, rows, &format!("t.l{li}.mlp"), &widths, true)?;
        let pooled = sess.g.block_max_rows(h, lv.k)?;
        let (out, split) = align_stage(sess, pooled, "t", li, model.with_heads, mode)?;
        prev_feat = Some(out);
        levels.push(FeatureMap {
            level: li,
            centers: lp.centers.clone(),
            feat: out,
            channels: lv.out_channels(),
        });
        splits.push(split);
    }
    let feat = prev_feat.expect("at least one level");
    let global = sess.g.max_reduce(feat, 0)?;
    let last_c = model.enc.levels.last().unwrap().out_channels();
    let logits = mlp_rows(sess, global, "t.head", &[last_c, model.n_classes], false)?;
    Ok(BranchOut {
        levels,
        splits,
        fsp_indices: Vec::new(),
        global,
        logits,
    })
}
