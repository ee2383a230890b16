//! Local reference axes from neighborhood covariance.
//!
//! The LRA of a point is the eigenvector of its neighborhood covariance with
//! the smallest eigenvalue, oriented toward the patch center relative to the
//! neighbor barycenter. The eigensolver is the closed-form trigonometric
//! method for 3x3 symmetric matrices with cross-product eigenvector
//! extraction; keeping it in-crate pins the tie rules that determinism
//! depends on.

use super::{cross3, dot3, norm3, scale3, sub3};

/// A local reference axis. `degenerate` marks neighborhoods whose smallest
/// covariance eigenvalue is not isolated (collinear or coincident points);
/// the axis then falls back to global +z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lra {
    pub axis: [f64; 3],
    pub degenerate: bool,
}

fn normalize3(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm3(v);
    (n > 0.0).then(|| scale3(v, 1.0 / n))
}

/// Force the first nonzero component positive. Zero vectors pass through.
fn lex_positive(v: [f64; 3]) -> [f64; 3] {
    for a in 0..3 {
        if v[a] != 0.0 {
            return if v[a] < 0.0 { scale3(v, -1.0) } else { v };
        }
    }
    v
}

fn lex_less(a: [f64; 3], b: [f64; 3]) -> bool {
    for i in 0..3 {
        if a[i] != b[i] {
            return a[i] < b[i];
        }
    }
    false
}

fn mat_mul_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// One eigenvector of symmetric `a` for eigenvalue `lambda`, via the
/// largest cross product of rows of `a - lambda I`. Returns `None` when the
/// eigenvalue has geometric multiplicity > 1 (all cross products vanish).
fn eigenvector_for(a: &[[f64; 3]; 3], lambda: f64, scale: f64) -> Option<[f64; 3]> {
    let m = [
        [a[0][0] - lambda, a[0][1], a[0][2]],
        [a[1][0], a[1][1] - lambda, a[1][2]],
        [a[2][0], a[2][1], a[2][2] - lambda],
    ];
    let candidates = [
        cross3(m[0], m[1]),
        cross3(m[0], m[2]),
        cross3(m[1], m[2]),
    ];
    let mut best = candidates[0];
    let mut best_n = norm3(best);
    for &c in &candidates[1..] {
        let n = norm3(c);
        if n > best_n {
            best = c;
            best_n = n;
        }
    }
    if best_n <= 1e-12 * scale * scale {
        return None;
    }
    normalize3(best)
}

/// Closed-form eigendecomposition of a symmetric 3x3 matrix.
///
/// Returns eigenvalues in ascending order with matching unit eigenvectors
/// (rows of the returned array). Eigenvectors are sign-canonicalized to
/// lexicographic-positive; exact eigenvalue ties are ordered by
/// lexicographic eigenvector comparison.
pub fn sym_eigen3(a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let amax = a
        .iter()
        .flatten()
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max);
    if amax == 0.0 {
        return (
            [0.0, 0.0, 0.0],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        );
    }
    // Work on the scaled matrix for conditioning; eigenvalues scale back.
    let inv = 1.0 / amax;
    let s = [
        [a[0][0] * inv, a[0][1] * inv, a[0][2] * inv],
        [a[1][0] * inv, a[1][1] * inv, a[1][2] * inv],
        [a[2][0] * inv, a[2][1] * inv, a[2][2] * inv],
    ];
    let q = (s[0][0] + s[1][1] + s[2][2]) / 3.0;
    let off2 = s[0][1] * s[0][1] + s[0][2] * s[0][2] + s[1][2] * s[1][2];
    let p2 = (s[0][0] - q).powi(2) + (s[1][1] - q).powi(2) + (s[2][2] - q).powi(2) + 2.0 * off2;
    let (vals, vecs): ([f64; 3], [[f64; 3]; 3]) = if p2 <= 1e-30 {
        // Scalar multiple of the identity: any orthonormal basis works.
        (
            [q, q, q],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
    } else {
        let p = (p2 / 6.0).sqrt();
        let b = [
            [(s[0][0] - q) / p, s[0][1] / p, s[0][2] / p],
            [s[1][0] / p, (s[1][1] - q) / p, s[1][2] / p],
            [s[2][0] / p, s[2][1] / p, (s[2][2] - q) / p],
        ];
        let r = (super::det3(&b) / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e_big = q + 2.0 * p * phi.cos();
        let e_small = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
        let e_mid = 3.0 * q - e_big - e_small;

        let v_small = eigenvector_for(&s, e_small, 1.0);
        let v_big = eigenvector_for(&s, e_big, 1.0);
        let (v_small, v_big) = match (v_small, v_big) {
            (Some(vs), Some(vb)) => {
                // Re-orthogonalize the less separated vector.
                let proj = dot3(vb, vs);
                let vb = normalize3(sub3(vb, scale3(vs, proj))).unwrap_or([0.0, 0.0, 1.0]);
                (vs, vb)
            }
            (Some(vs), None) => (vs, orthogonal_unit(vs)),
            (None, Some(vb)) => (orthogonal_unit(vb), vb),
            (None, None) => ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        };
        let v_mid = cross3(v_big, v_small);
        let v_mid = normalize3(v_mid).unwrap_or([0.0, 0.0, 1.0]);
        ([e_small, e_mid, e_big], [v_small, v_mid, v_big])
    };

    let mut pairs: Vec<(f64, [f64; 3])> = vals
        .iter()
        .zip(vecs.iter())
        .map(|(&v, &w)| (v * amax, lex_positive(w)))
        .collect();
    pairs.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .unwrap()
            .then_with(|| {
                if lex_less(x.1, y.1) {
                    std::cmp::Ordering::Less
                } else if lex_less(y.1, x.1) {
                    std::cmp::Ordering::Greater
                } else {
                    std::cmp::Ordering::Equal
                }
            })
    });
    (
        [pairs[0].0, pairs[1].0, pairs[2].0],
        [pairs[0].1, pairs[1].1, pairs[2].1],
    )
}

/// Deterministic unit vector orthogonal to `v`.
fn orthogonal_unit(v: [f64; 3]) -> [f64; 3] {
    let basis = if v[0].abs() <= v[1].abs() && v[0].abs() <= v[2].abs() {
        [1.0, 0.0, 0.0]
    } else if v[1].abs() <= v[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    normalize3(cross3(v, basis)).unwrap_or([0.0, 0.0, 1.0])
}

/// Local reference axis of the neighborhood around `center_index`.
///
/// The axis is the smallest-eigenvalue eigenvector of the covariance of the
/// neighbor set about its barycenter. Sign: oriented so that
/// `dot(axis, center - barycenter) >= 0`, with lexicographic-positive as the
/// fallback on an exact zero. Degenerate neighborhoods (smallest eigenvalue
/// not isolated) return +z with the flag set so callers can exclude them.
pub fn compute_lra(
    points: &[[f64; 3]],
    neighbor_indices: &[usize],
    center_index: usize,
) -> Lra {
    let k = neighbor_indices.len();
    if k < 2 {
        return Lra {
            axis: [0.0, 0.0, 1.0],
            degenerate: true,
        };
    }
    let mut bary = [0.0; 3];
    for &i in neighbor_indices {
        for a in 0..3 {
            bary[a] += points[i][a];
        }
    }
    for b in &mut bary {
        *b /= k as f64;
    }
    let mut cov = [[0.0; 3]; 3];
    for &i in neighbor_indices {
        let d = sub3(points[i], bary);
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += d[r] * d[c];
            }
        }
    }
    for row in &mut cov {
        for v in row {
            *v /= k as f64;
        }
    }
    let (vals, vecs) = sym_eigen3(cov);
    // The smallest eigenvalue must be isolated from the middle one, and the
    // neighborhood must have nonzero extent. The isolation threshold sits
    // above the ~sqrt(eps) resolution of the trigonometric eigensolver.
    let scale = vals[2].abs().max(1e-300);
    if vals[2] <= 1e-24 || (vals[1] - vals[0]) <= 1e-6 * scale {
        return Lra {
            axis: [0.0, 0.0, 1.0],
            degenerate: true,
        };
    }
    let mut axis = vecs[0];
    let toward = sub3(points[center_index], bary);
    let d = dot3(axis, toward);
    if d < 0.0 {
        axis = scale3(axis, -1.0);
    } else if d == 0.0 {
        axis = lex_positive(axis);
    }
    // A sign decision with no real margin flips under reevaluation in a
    // rotated frame; such axes are usable but not trustworthy, so flag them.
    let extent = vals[2].sqrt();
    let tnorm = norm3(toward);
    let sign_unstable = tnorm <= 1e-9 * extent || d.abs() <= 1e-7 * tnorm;
    Lra {
        axis,
        degenerate: sign_unstable,
    }
}

/// LRAs for every point of a set, each from its `k_lra` nearest neighbors
/// (self included) within the same set.
pub fn compute_lra_table(points: &[[f64; 3]], k_lra: usize) -> Vec<Lra> {
    let k = k_lra.min(points.len());
    let neighbors = super::knn3(points, points, k).expect("k clamped to set size");
    neighbors
        .iter()
        .enumerate()
        .map(|(i, nbrs)| compute_lra(points, nbrs, i))
        .collect()
}
