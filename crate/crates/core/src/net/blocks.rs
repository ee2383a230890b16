//! The encoder's operation set: graph representation, shared-MLP pooling,
//! feature-space patches, the multi-radius separable mapping, IDW
//! upsampling, and the classification head.

use super::{mlp_rows, tile_row, NetError, Session};
use crate::autodiff::{DiffError, Graph, Id, Tensor};
use crate::geom::{ball_query, knn, knn3};

/// Graph representation of one patch: row `i` is
/// `center (+) (neighbor_i - center)`.
pub fn graph_rep(g: &mut Graph, center: Id, neighbors: Id) -> Result<Id, DiffError> {
    if g.rows(center) != 1 || g.cols(center) != g.cols(neighbors) {
        return Err(DiffError::ShapeMismatch {
            op: "graph_rep",
            detail: format!(
                "center {}x{}, neighbors {}x{}",
                g.rows(center),
                g.cols(center),
                g.rows(neighbors),
                g.cols(neighbors)
            ),
        });
    }
    let k = g.rows(neighbors);
    let tiled = tile_row(g, center, k)?;
    let edges = g.sub(neighbors, tiled)?;
    g.concat(1, &[tiled, edges])
}

/// Shared-weight MLP per row followed by channel-wise max over rows:
/// a permutation-invariant patch readout.
pub fn pointnet_map(
    sess: &mut Session,
    patch_rows: Id,
    prefix: &str,
    widths: &[usize],
) -> Result<Id, NetError> {
    let h = mlp_rows(sess, patch_rows, prefix, widths, true)?;
    Ok(sess.g.max_reduce(h, 0)?)
}

/// Per-point feature-space patches: every point is a patch center, its
/// k nearest neighbors are found in feature space, and the graph
/// representation of each patch is mapped and pooled. Returns the new
/// `m x channels.last()` feature matrix plus the flattened membership.
///
/// `frozen` substitutes a fixed membership for the feature-space query;
/// gradient checking uses it so finite-difference evaluations see the same
/// piecewise region the tape differentiated.
pub fn feature_space_patch(
    sess: &mut Session,
    feat: Id,
    k: usize,
    prefix: &str,
    widths: &[usize],
    frozen: Option<&[usize]>,
) -> Result<(Id, Vec<usize>), NetError> {
    let (m, c) = (sess.g.rows(feat), sess.g.cols(feat));
    let flat_nbr: Vec<usize> = match frozen {
        Some(idx) => {
            assert_eq!(idx.len(), m * k, "frozen membership has wrong size");
            idx.to_vec()
        }
        None => {
            let vals = sess.g.values(feat).to_vec();
            knn(&vals, c, &vals, k)?.into_iter().flatten().collect()
        }
    };
    let mut flat_ctr = Vec::with_capacity(m * k);
    for i in 0..m {
        flat_ctr.extend(std::iter::repeat(i).take(k));
    }
    let nbr_rows = sess.g.gather_rows(feat, &flat_nbr)?;
    let ctr_rows = sess.g.gather_rows(feat, &flat_ctr)?;
    let edges = sess.g.sub(nbr_rows, ctr_rows)?;
    let rows = sess.g.concat(1, &[ctr_rows, edges])?;
    let h = mlp_rows(sess, rows, prefix, widths, true)?;
    let pooled = sess.g.block_max_rows(h, k)?;
    Ok((pooled, flat_nbr))
}

/// Precomputed geometry of one level's spherical sub-regions.
pub struct BallPlan {
    /// Per radius: flattened `(m * k)` neighbor indices into the previous
    /// level's points.
    pub flat: Vec<Vec<usize>>,
    /// Per radius: constant `(m * k) x 6` graph-representation rows of the
    /// background coordinates.
    pub geo: Vec<Tensor>,
    pub k: usize,
}

/// Build ball-query membership and coordinate graph rows for every center
/// and radius.
pub fn plan_balls(
    prev_points: &[[f64; 3]],
    centers: &[[f64; 3]],
    radii: &[f64],
    k: usize,
) -> BallPlan {
    let m = centers.len();
    let mut flat = Vec::with_capacity(radii.len());
    let mut geo = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut idx = Vec::with_capacity(m * k);
        let mut rows = Vec::with_capacity(m * k * 6);
        for &center in centers {
            let ball = ball_query(prev_points, center, r, k);
            for &j in &ball {
                let p = prev_points[j];
                rows.extend_from_slice(&[
                    center[0],
                    center[1],
                    center[2],
                    p[0] - center[0],
                    p[1] - center[1],
                    p[2] - center[2],
                ]);
            }
            idx.extend_from_slice(&ball);
        }
        flat.push(idx);
        geo.push(Tensor::new(m * k, 6, rows));
    }
    BallPlan {
        flat,
        geo,
        k,
    }
}

/// Graphwise separable mapping over precomputed sub-regions: one MLP per
/// radius over `[coordinate graph rows (+) feature-space rows]`, pooled per
/// center and concatenated across radii.
pub fn gsm_planned(
    sess: &mut Session,
    plan: &BallPlan,
    x_sf: Id,
    prefix: &str,
    widths: &[usize],
) -> Result<Id, NetError> {
    let mut pooled = Vec::with_capacity(plan.flat.len());
    for (ri, flat) in plan.flat.iter().enumerate() {
        let geo = sess.g.constant(&plan.geo[ri]);
        let sf = sess.g.gather_rows(x_sf, flat)?;
        let rows = sess.g.concat(1, &[geo, sf])?;
        let h = mlp_rows(sess, rows, &format!("{prefix}.r{ri}"), widths, true)?;
        pooled.push(sess.g.block_max_rows(h, plan.k)?);
    }
    Ok(sess.g.concat(1, &pooled)?)
}

/// Convenience wrapper computing the ball plan on the fly.
pub fn gsm_block(
    sess: &mut Session,
    prev_points: &[[f64; 3]],
    centers: &[[f64; 3]],
    x_sf: Id,
    radii: &[f64],
    k: usize,
    prefix: &str,
    widths: &[usize],
) -> Result<Id, NetError> {
    let plan = plan_balls(prev_points, centers, radii, k);
    gsm_planned(sess, &plan, x_sf, prefix, widths)
}

/// Inverse-distance-weighted upsampling of coarse features onto fine
/// centers.
///
/// Weights are `1 / (d^p + 1e-8)` over the `k` nearest coarse centers,
/// normalized to sum 1; a fine center exactly coinciding with a coarse
/// center takes that coarse feature unchanged.
pub fn idw_upsample(
    g: &mut Graph,
    coarse_feat: Id,
    coarse_centers: &[[f64; 3]],
    fine_centers: &[[f64; 3]],
    p: f64,
    k: usize,
) -> Result<Id, NetError> {
    const EPS: f64 = 1e-8;
    if !(p > 0.0) {
        return Err(NetError::BadConfig(format!("idw power {p} must be > 0")));
    }
    let c = g.cols(coarse_feat);
    let nbrs = knn3(coarse_centers, fine_centers, k)?;
    let mut flat = Vec::with_capacity(fine_centers.len() * k);
    let mut weights = Vec::with_capacity(fine_centers.len() * k * c);
    for (fi, row) in nbrs.iter().enumerate() {
        let f = fine_centers[fi];
        let dists: Vec<f64> = row
            .iter()
            .map(|&j| {
                let q = coarse_centers[j];
                ((f[0] - q[0]).powi(2) + (f[1] - q[1]).powi(2) + (f[2] - q[2]).powi(2)).sqrt()
            })
            .collect();
        let w: Vec<f64> = if dists[0] == 0.0 {
            // Exact coincidence: the nearest coarse feature, untouched.
            let mut w = vec![0.0; k];
            w[0] = 1.0;
            w
        } else {
            let raw: Vec<f64> = dists.iter().map(|&d| 1.0 / (d.powf(p) + EPS)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|&v| v / total).collect()
        };
        flat.extend_from_slice(row);
        for &wi in &w {
            weights.extend(std::iter::repeat(wi).take(c));
        }
    }
    let rows = g.gather_rows(coarse_feat, &flat)?;
    let wmat = g.constant_from(flat.len(), c, weights);
    let weighted = g.mul(rows, wmat)?;
    Ok(g.block_sum_rows(weighted, k)?)
}

/// Channel-wise max over all rows, then a two-layer MLP (hidden ReLU layer,
/// linear logits) to `n_classes` scores.
pub fn classify_head(
    sess: &mut Session,
    feat: Id,
    prefix: &str,
    hidden: usize,
    n_classes: usize,
) -> Result<Id, NetError> {
    let global = sess.g.max_reduce(feat, 0)?;
    mlp_rows(sess, global, prefix, &[hidden, n_classes], false)
}

/// Row-wise normalization over channels with an epsilon floor; independent
/// of batch composition.
pub fn layer_norm_rows(g: &mut Graph, x: Id, eps: f64) -> Result<Id, DiffError> {
    let cols = g.cols(x);
    let mean = g.mean_reduce(x, 1)?; // r x 1
    let ones = g.constant_from(1, cols, vec![1.0; cols]);
    let mean_tiled = g.matmul(mean, ones)?;
    let centered = g.sub(x, mean_tiled)?;
    let sq = g.square(centered)?;
    let var = g.mean_reduce(sq, 1)?;
    let var_eps = g.scalar_add(var, eps)?;
    let std = g.sqrt(var_eps)?;
    let std_tiled = g.matmul(std, ones)?;
    g.div(centered, std_tiled)
}
