//! Encoder building blocks and the two hierarchical branches.
//!
//! Both branches share the same skeleton per level: patches are formed in
//! background space around farthest-point-sampled centers, mapped row-wise
//! by shared-weight MLPs, and pooled by channel-wise max. The teacher
//! consumes rotation-invariant patch coordinates; the student consumes raw
//! coordinates through a graph representation plus a feature-space patch
//! stage and a multi-radius separable mapping.

mod blocks;
mod encoder;
#[cfg(test)]
mod tests;

pub use blocks::{
    classify_head, feature_space_patch, graph_rep, gsm_block, gsm_planned, idw_upsample,
    layer_norm_rows, plan_balls, pointnet_map, BallPlan,
};
pub use encoder::{
    plan_cloud, student_forward, teacher_forward, BranchOut, CloudPlan, ForwardMode, LevelPlan,
    Model, SplitOut,
};

use crate::autodiff::{DiffError, Graph, Id, ParamStore, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("bad encoder config: {0}")]
    BadConfig(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
}

/// Per-level encoder settings.
///
/// `channels` are the per-radius MLP widths of the separable mapping; the
/// level's output channel count is `channels.last() * radii.len()`. The
/// feature-space stage uses the same widths, and the teacher MLP widens its
/// last layer to the level output so both branches agree by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelConfig {
    pub centers: usize,
    pub k: usize,
    pub radii: Vec<f64>,
    pub channels: Vec<usize>,
}

impl LevelConfig {
    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) * self.radii.len()
    }
}

/// Full encoder architecture shared by teacher and student.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub levels: Vec<LevelConfig>,
    /// Rank ratio of the alignment heads: rank = floor(rank_fraction * C).
    pub rank_fraction: f64,
}

impl EncoderConfig {
    /// Three levels, 128/64/16 centers, k = 16, output channels 64/128/256.
    pub fn default_desk() -> Self {
        let level = |m: usize, r: f64, w: usize| LevelConfig {
            centers: m,
            k: 16,
            radii: vec![r, 2.0 * r],
            channels: vec![w, w],
        };
        EncoderConfig {
            levels: vec![
                level(128, 0.2, 32),
                level(64, 0.4, 64),
                level(16, 0.8, 128),
            ],
            rank_fraction: 0.25,
        }
    }

    pub fn out_channels(&self, level: usize) -> usize {
        self.levels[level].out_channels()
    }

    /// Alignment head rank at a level; the Whitney constraint `r < C / 2`
    /// is enforced by [`EncoderConfig::validate`].
    pub fn rank(&self, level: usize) -> usize {
        ((self.rank_fraction * self.out_channels(level) as f64).floor() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.levels.is_empty() {
            return Err(NetError::BadConfig("at least one level required".into()));
        }
        if !(0.0 < self.rank_fraction && self.rank_fraction < 0.5) {
            return Err(NetError::BadConfig(format!(
                "rank_fraction {} outside (0, 0.5)",
                self.rank_fraction
            )));
        }
        let mut prev_m = usize::MAX;
        for (i, lv) in self.levels.iter().enumerate() {
            if lv.centers == 0 {
                return Err(NetError::BadConfig(format!("level {i}: zero centers")));
            }
            if lv.centers > prev_m {
                return Err(NetError::BadConfig(format!(
                    "level {i}: centers must not increase ({} > {prev_m})",
                    lv.centers
                )));
            }
            if lv.k < 2 {
                return Err(NetError::BadConfig(format!("level {i}: k must be >= 2")));
            }
            if lv.radii.is_empty() {
                return Err(NetError::BadConfig(format!("level {i}: no radii")));
            }
            if !lv.radii.windows(2).all(|w| w[0] < w[1]) || lv.radii[0] <= 0.0 {
                return Err(NetError::BadConfig(format!(
                    "level {i}: radii must be positive and strictly increasing"
                )));
            }
            if lv.channels.is_empty() || lv.channels.iter().any(|&c| c == 0) {
                return Err(NetError::BadConfig(format!(
                    "level {i}: channels must be nonempty and positive"
                )));
            }
            let c = lv.out_channels();
            let r = self.rank(i);
            if r >= c.div_ceil(2) {
                return Err(NetError::BadConfig(format!(
                    "level {i}: rank {r} must stay below half of {c} channels"
                )));
            }
            prev_m = lv.centers;
        }
        Ok(())
    }
}

/// A per-level feature matrix bound to its background-space centers.
pub struct FeatureMap {
    pub level: usize,
    pub centers: Vec<[f64; 3]>,
    pub feat: Id,
    pub channels: usize,
}

/// One forward pass: a graph plus the parameter bindings made into it.
///
/// Binding the same name twice returns the same leaf, so gradients
/// accumulate correctly for shared weights.
pub struct Session<'a> {
    pub g: Graph,
    params: &'a ParamStore,
    bound: Vec<(usize, Id)>,
    by_pos: std::collections::HashMap<usize, Id>,
    infer: bool,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamStore, infer: bool) -> Self {
        Session {
            g: Graph::new(),
            params,
            bound: Vec::new(),
            by_pos: std::collections::HashMap::new(),
            infer,
        }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn infer(&self) -> bool {
        self.infer
    }

    /// Bind a named parameter into the graph (as a constant in infer mode).
    pub fn param(&mut self, name: &str) -> Result<Id, NetError> {
        let pos = self
            .params
            .position(name)
            .ok_or_else(|| NetError::UnknownParam(name.to_string()))?;
        if let Some(&id) = self.by_pos.get(&pos) {
            return Ok(id);
        }
        let (_, tensor) = self.params.by_index(pos);
        let id = if self.infer {
            self.g.constant(tensor)
        } else {
            self.g.leaf(tensor)
        };
        self.by_pos.insert(pos, id);
        self.bound.push((pos, id));
        Ok(id)
    }

    /// Accumulate this session's parameter gradients (after `backward`)
    /// into `acc`, indexed by parameter store position.
    pub fn add_grads_to(&self, acc: &mut [Vec<f64>]) {
        for &(pos, id) in &self.bound {
            if let Some(g) = self.g.grad(id) {
                let slot = &mut acc[pos];
                for (s, &v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
    }
}

/// `matmul(ones(n x 1), row)`: explicit row tiling with no broadcasting.
pub(crate) fn tile_row(g: &mut Graph, row: Id, n: usize) -> Result<Id, DiffError> {
    let ones = g.constant_from(n, 1, vec![1.0; n]);
    g.matmul(ones, row)
}

/// Shared-weight MLP applied to each row. ReLU after every layer except,
/// optionally, the last.
pub(crate) fn mlp_rows(
    sess: &mut Session,
    x: Id,
    prefix: &str,
    widths: &[usize],
    relu_last: bool,
) -> Result<Id, NetError> {
    let mut h = x;
    let n_layers = widths.len();
    for (i, _) in widths.iter().enumerate() {
        let w = sess.param(&format!("{prefix}.{i}.w"))?;
        let b = sess.param(&format!("{prefix}.{i}.b"))?;
        let rows = sess.g.rows(h);
        let hw = sess.g.matmul(h, w)?;
        let bias = tile_row(&mut sess.g, b, rows)?;
        h = sess.g.add(hw, bias)?;
        if relu_last || i + 1 < n_layers {
            h = sess.g.relu(h)?;
        }
    }
    Ok(h)
}

/// Register the weights of an MLP with the given widths into a store.
///
/// Biases start at a small positive constant rather than zero: a row that
/// dies entirely through one ReLU layer would otherwise park the next
/// layer's pre-activations exactly on the ReLU kink, which breaks
/// finite-difference gradient verification at init.
pub(crate) fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    widths: &[usize],
    rng: &mut crate::rng::Rng,
) {
    let mut d = in_dim;
    for (i, &w) in widths.iter().enumerate() {
        let scale = (2.0 / d as f64).sqrt();
        let weight = Tensor::from_fn(d, w, |_, _| rng.normal() * scale);
        store.insert(&format!("{prefix}.{i}.w"), weight);
        store.insert(
            &format!("{prefix}.{i}.b"),
            Tensor::new(1, w, vec![0.01; w]),
        );
        d = w;
    }
}

#[cfg(test)]
mod config_tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let cfg = EncoderConfig::default_desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.out_channels(0), 64);
        assert_eq!(cfg.out_channels(1), 128);
        assert_eq!(cfg.out_channels(2), 256);
        assert_eq!(cfg.rank(0), 16);
    }

    #[test]
    fn rank_constraint_rejected() {
        let mut cfg = EncoderConfig::default_desk();
        cfg.rank_fraction = 0.49;
        // floor(0.49 * 64) = 31 < 32: fine. Push C down so the bound trips.
        cfg.levels[0].channels = vec![1];
        cfg.levels[0].radii = vec![0.2, 0.4];
        // C = 2, rank = max(1, floor(0.98)) = 1, but 1 >= ceil(2/2) = 1.
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn increasing_centers_rejected() {
        let mut cfg = EncoderConfig::default_desk();
        cfg.levels[1].centers = 500;
        assert!(cfg.validate().is_err());
    }
}
