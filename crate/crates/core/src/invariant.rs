//! Rotation-invariant per-patch coordinates for the teacher branch.
//!
//! Each ordered neighbor of a patch is mapped to eight pose-free components:
//! one distance and seven angles built from the local reference axes of the
//! center and its neighbors. All angles come from `atan2(|cross|, dot)`
//! (stable near 0 and pi); the two signed components use a fixed triple
//! product convention so the whole matrix is invariant under proper rigid
//! motions.

use crate::geom::{cross3, dot3, norm3, scale3, sub3, Lra, Patch};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InvariantError {
    #[error("degenerate patch: all neighbors project onto the reference axis")]
    DegeneratePatch,
    #[error("patch needs at least 2 neighbors, got {0}")]
    TooFewNeighbors(usize),
}

/// The `k x 8` invariant coordinate matrix of one patch, one row per
/// ordered neighbor.
///
/// Columns: `0` distance to the center (>= 0); `1, 2, 4, 5, 6` unsigned
/// angles in `[0, pi]`; `3, 7` signed angles in `[-pi, pi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantPatchCoords {
    pub k: usize,
    /// Row-major `k x 8`.
    pub values: Vec<f64>,
    /// Set when any participating axis or the neighbor ordering was
    /// degenerate; such patches are excluded from invariance guarantees.
    pub degenerate: bool,
}

pub const COORD_WIDTH: usize = 8;

/// Angle between two vectors via `atan2(|u x v|, u . v)`; zero-length
/// vectors yield 0.
fn angle_between(u: [f64; 3], v: [f64; 3]) -> f64 {
    let c = cross3(u, v);
    let s = norm3(c);
    let d = dot3(u, v);
    if s == 0.0 && d == 0.0 {
        return 0.0;
    }
    s.atan2(d)
}

/// Reorder patch neighbors by ascending azimuth of their projections onto
/// the plane orthogonal to `lra_center`.
///
/// The zero-azimuth reference direction is the projection of the nearest
/// neighbor (distance ties by smallest index; neighbors that project onto
/// the axis are skipped as reference candidates). The ordering depends only
/// on geometry, so it is invariant under proper rigid motion and independent
/// of the incoming list order.
pub fn order_neighbors(
    points: &[[f64; 3]],
    patch: &Patch,
    lra_center: [f64; 3],
) -> Result<Patch, InvariantError> {
    let k = patch.neighbor_indices.len();
    if k < 2 {
        return Err(InvariantError::TooFewNeighbors(k));
    }
    let center = points[patch.center_index];
    let axis = lra_center;

    struct Entry {
        index: usize,
        dist: f64,
        proj: [f64; 3],
        proj_norm: f64,
    }
    let mut entries: Vec<Entry> = patch
        .neighbor_indices
        .iter()
        .map(|&i| {
            let rel = sub3(points[i], center);
            let along = dot3(rel, axis);
            let proj = sub3(rel, scale3(axis, along));
            Entry {
                index: i,
                dist: norm3(rel),
                proj,
                proj_norm: norm3(proj),
            }
        })
        .collect();

    let scale = entries
        .iter()
        .map(|e| e.dist)
        .fold(0.0_f64, f64::max)
        .max(1e-300);
    let threshold = 1e-12 * scale;

    // Reference: nearest neighbor with a usable projection.
    let reference = entries
        .iter()
        .filter(|e| e.proj_norm > threshold)
        .min_by(|a, b| {
            a.dist
                .partial_cmp(&b.dist)
                .unwrap()
                .then(a.index.cmp(&b.index))
        })
        .ok_or(InvariantError::DegeneratePatch)?;

    let reference_index = reference.index;
    let e1 = scale3(reference.proj, 1.0 / reference.proj_norm);
    let e2 = cross3(axis, e1);

    let mut keyed: Vec<(f64, f64, usize)> = entries
        .iter_mut()
        .map(|e| {
            // The reference azimuth is 0 by construction; computing it via
            // atan2 would leave +-eps noise that can wrap to just below 2*pi
            // and rotate the whole cycle.
            let az = if e.index == reference_index || e.proj_norm <= threshold {
                0.0
            } else {
                let a = dot3(e.proj, e2).atan2(dot3(e.proj, e1));
                if a < 0.0 {
                    a + 2.0 * std::f64::consts::PI
                } else {
                    a
                }
            };
            (az, e.dist, e.index)
        })
        .collect();
    keyed.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then(a.2.cmp(&b.2))
    });

    Ok(Patch {
        center_index: patch.center_index,
        neighbor_indices: keyed.into_iter().map(|(_, _, i)| i).collect(),
        level: patch.level,
    })
}

/// Build the `k x 8` invariant coordinates of an ordered patch.
///
/// `lras` supplies one axis per point of `points` (see
/// [`crate::geom::compute_lra_table`]). Row `i` describes ordered neighbor
/// `i` together with its cyclic successor `i + 1` (wrapping to the first
/// neighbor).
pub fn invariant_coords(
    points: &[[f64; 3]],
    patch: &Patch,
    lras: &[Lra],
) -> InvariantPatchCoords {
    let k = patch.neighbor_indices.len();
    let center = points[patch.center_index];
    let lra_center = lras[patch.center_index];
    let mut degenerate = lra_center.degenerate;
    let mut values = Vec::with_capacity(k * COORD_WIDTH);

    for i in 0..k {
        let ni = patch.neighbor_indices[i];
        let nj = patch.neighbor_indices[(i + 1) % k];
        let a_i = points[ni];
        let a_j = points[nj];
        let lra_i = lras[ni];
        let lra_j = lras[nj];
        degenerate |= lra_i.degenerate || lra_j.degenerate;

        let to_center = sub3(center, a_i); // alpha_i -> alpha
        let to_next = sub3(a_j, a_i); // alpha_i -> alpha_{i+1}
        let next_to_center = sub3(center, a_j); // alpha_{i+1} -> alpha

        let col1 = angle_between(lra_i.axis, to_center);
        // Sign conventions. The triple products are rotation-invariant, but
        // when two local axes coincide (common: neighboring points often
        // share their exact k-NN set) the product vanishes identically and
        // its sign is pure noise. A one-sided dead zone at -tau keeps those
        // rows stable: anything above -tau maps to +1, and only the
        // measure-zero band around the -tau boundary is flagged.
        let mut signed = |triple: f64, scale: f64| -> f64 {
            let tau = 1e-9 * scale.max(1e-300);
            if (triple + tau).abs() <= 1e-3 * tau {
                degenerate = true;
            }
            if triple >= -tau {
                1.0
            } else {
                -1.0
            }
        };
        let sign_i = signed(
            dot3(cross3(lra_center.axis, to_center), lra_i.axis),
            norm3(to_center),
        );
        let sign_pair = signed(
            dot3(cross3(to_next, lra_j.axis), lra_i.axis),
            norm3(to_next),
        );

        values.push(norm3(to_center));
        values.push(col1);
        values.push(angle_between(lra_center.axis, to_center));
        values.push(sign_i * col1);
        values.push(angle_between(next_to_center, to_next));
        values.push(angle_between(lra_i.axis, to_next));
        values.push(angle_between(lra_j.axis, to_next));
        values.push(sign_pair * angle_between(lra_i.axis, lra_j.axis));
    }

    InvariantPatchCoords {
        k,
        values,
        degenerate,
    }
}
