//! The alignment model: low-rank feature split, attention maps over
//! patches, temperature-scaled symmetric KL with row sampling, the NMI
//! regularizer, and inference-time fusion of the whole path into one linear
//! map.

use crate::autodiff::{DiffError, Graph, Id, Tensor};
use crate::net::{NetError, Session, SplitOut};
use crate::rng::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("bad temperature {0}: must be > 0")]
    BadTemperature(f64),
    #[error("bad count: sample_m {sample_m} for {k} rows")]
    BadCount { sample_m: usize, k: usize },
    #[error("bad bins {0}: need at least 2")]
    BadBins(usize),
    #[error("bad bandwidth {0}: must be > 0")]
    BadBandwidth(f64),
    #[error("rank {rank} violates the embedding bound for {channels} channels")]
    BadRank { rank: usize, channels: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Trainable split-and-query head attached to one encoder level.
///
/// `d` (`r x C`) projects features down to rank `r`, `u` (`C x r`) lifts
/// them back (their product reconstructs the low-frequency part), and `q`
/// (`C x C`) is the query matrix, shared between attention's query and key
/// roles. Zero-initialized `u` makes the initial split `x_l = 0, x_h = x`,
/// and identity `q` makes the whole head an exact identity at start. The
/// rank stays below half the channel count so the low-frequency part can be
/// re-embedded after alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankHead {
    pub d: Tensor,
    pub u: Tensor,
    pub q: Tensor,
    pub rank: usize,
    pub channels: usize,
}

impl LowRankHead {
    pub fn init(channels: usize, rank: usize, rng: &mut Rng) -> Result<Self, AlignError> {
        if rank == 0 || 2 * rank >= channels {
            return Err(AlignError::BadRank { rank, channels });
        }
        let scale = 1.0 / (channels as f64).sqrt();
        Ok(LowRankHead {
            d: Tensor::from_fn(rank, channels, |_, _| rng.normal() * scale),
            u: Tensor::zeros(channels, rank),
            q: Tensor::identity(channels),
            rank,
            channels,
        })
    }
}

/// Register a head's three tensors under `{prefix}.d/.u/.q`.
pub fn register_head(
    store: &mut crate::autodiff::ParamStore,
    prefix: &str,
    channels: usize,
    rank: usize,
    rng: &mut Rng,
) -> Result<(), AlignError> {
    let head = LowRankHead::init(channels, rank, rng)?;
    store.insert(&format!("{prefix}.d"), head.d);
    store.insert(&format!("{prefix}.u"), head.u);
    store.insert(&format!("{prefix}.q"), head.q);
    Ok(())
}

/// Split `x` (`k x C`) into its low-rank reconstruction and the residual:
/// `x_l = x . d^T . u^T`, `x_h = x - x_l` (so `x_l + x_h = x` exactly).
pub fn lowrank_split(g: &mut Graph, x: Id, d: Id, u: Id) -> Result<(Id, Id), DiffError> {
    let dt = g.transpose(d)?;
    let ut = g.transpose(u)?;
    let down = g.matmul(x, dt)?;
    let x_l = g.matmul(down, ut)?;
    let x_h = g.sub(x, x_l)?;
    Ok((x_l, x_h))
}

/// Attention map of one patch: `A = (x_l q^T)(x_l q^T)^T`, a symmetric PSD
/// `k x k` Gram matrix of query-projected rows.
pub fn attention_map(g: &mut Graph, x_l: Id, q: Id) -> Result<Id, DiffError> {
    let qt = g.transpose(q)?;
    let y = g.matmul(x_l, qt)?;
    let yt = g.transpose(y)?;
    g.matmul(y, yt)
}

/// Temperature-scaled symmetric KL between teacher and student attention
/// maps over a shared random subset of rows.
///
/// `sample_m` row indices are drawn once (without replacement) and reused
/// for both maps and both divergence directions; each sampled row becomes a
/// distribution through row softmax at the given temperature. The result is
/// `(T^2 / C) * (l1 * KL(P_t || P_s) + l2 * KL(P_s || P_t)) / sample_m`.
/// Gradients flow into both maps.
#[allow(clippy::too_many_arguments)]
pub fn kl_alignment_loss(
    g: &mut Graph,
    attn_t: Id,
    attn_s: Id,
    temperature: f64,
    lambda1: f64,
    lambda2: f64,
    sample_m: usize,
    channels: usize,
    rng: &mut Rng,
) -> Result<Id, AlignError> {
    if !(temperature > 0.0) {
        return Err(AlignError::BadTemperature(temperature));
    }
    let k = g.rows(attn_t);
    if sample_m == 0 || sample_m > k {
        return Err(AlignError::BadCount { sample_m, k });
    }
    let idx = rng.sample_without_replacement(k, sample_m);
    let rows_t = g.gather_rows(attn_t, &idx)?;
    let rows_s = g.gather_rows(attn_s, &idx)?;
    let kl_ts = g.kl_div_rows(rows_t, rows_s, temperature)?;
    let kl_st = g.kl_div_rows(rows_s, rows_t, temperature)?;
    let wts = g.scalar_mul(kl_ts, lambda1)?;
    let wst = g.scalar_mul(kl_st, lambda2)?;
    let sum = g.add(wts, wst)?;
    let scale = temperature * temperature / (channels as f64 * sample_m as f64);
    Ok(g.scalar_mul(sum, scale)?)
}

/// Differentiable NMI between the residual and the full features of one
/// patch, averaged over channels (see the estimator notes on
/// [`Graph::nmi_channels`]). Minimizing it limits how much of the manifold
/// structure the residual retains.
pub fn nmi_loss(
    g: &mut Graph,
    x_h: Id,
    x: Id,
    bins: usize,
    bandwidth: f64,
) -> Result<Id, AlignError> {
    if bins < 2 {
        return Err(AlignError::BadBins(bins));
    }
    if !(bandwidth > 0.0) {
        return Err(AlignError::BadBandwidth(bandwidth));
    }
    Ok(g.nmi_channels(x_h, x, bins, bandwidth)?)
}

fn matmul_plain(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows);
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for kk in 0..a.cols {
            let av = a.values[i * a.cols + kk];
            for j in 0..b.cols {
                out.values[i * b.cols + j] += av * b.values[kk * b.cols + j];
            }
        }
    }
    out
}

/// Fuse split, query transform, and recombination into one matrix:
/// `W = I - U D + Q U D`, with row-vector application `x_out = x W^T`.
pub fn reparameterize(d: &Tensor, u: &Tensor, q: &Tensor) -> Tensor {
    let c = u.rows;
    let ud = matmul_plain(u, d);
    let qud = matmul_plain(q, &ud);
    let mut w = Tensor::identity(c);
    for i in 0..c * c {
        w.values[i] = w.values[i] - ud.values[i] + qud.values[i];
    }
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    /// Explicit split path; exposes `(pre, x_l, x_h)` for the losses.
    Train,
    /// Single fused linear map built from the current parameter values.
    Infer,
}

/// Apply the alignment head registered under `{prefix}` to features `x`.
///
/// Train mode returns the split for loss construction; infer mode folds the
/// head into one constant matrix. Both modes compute the same function of
/// the same parameters.
pub fn aligned_forward(
    sess: &mut Session,
    x: Id,
    prefix: &str,
    mode: AlignMode,
) -> Result<(Id, Option<SplitOut>), AlignError> {
    match mode {
        AlignMode::Train => {
            let d = sess.param(&format!("{prefix}.d"))?;
            let u = sess.param(&format!("{prefix}.u"))?;
            let q = sess.param(&format!("{prefix}.q"))?;
            let (x_l, x_h) = lowrank_split(&mut sess.g, x, d, u)?;
            let qt = sess.g.transpose(q)?;
            let x_lq = sess.g.matmul(x_l, qt)?;
            let out = sess.g.add(x_h, x_lq)?;
            Ok((out, Some(SplitOut { pre: x, x_l, x_h })))
        }
        AlignMode::Infer => {
            let get = |n: &str| {
                sess.params()
                    .get(n)
                    .cloned()
                    .ok_or_else(|| NetError::UnknownParam(n.to_string()))
            };
            let d = get(&format!("{prefix}.d"))?;
            let u = get(&format!("{prefix}.u"))?;
            let q = get(&format!("{prefix}.q"))?;
            let w = reparameterize(&d, &u, &q);
            let mut wt = Tensor::zeros(w.cols, w.rows);
            for r in 0..w.rows {
                for c in 0..w.cols {
                    wt.values[c * w.rows + r] = w.values[r * w.cols + c];
                }
            }
            let wt = sess.g.constant(&wt);
            let out = sess.g.matmul(x, wt)?;
            Ok((out, None))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, ParamStore};

    fn random_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn zero_u_gives_identity_split() {
        let mut rng = Rng::new(1);
        let head = LowRankHead::init(8, 2, &mut rng).unwrap();
        let x = random_tensor(5, 8, &mut rng);
        let mut g = Graph::new();
        let xi = g.constant(&x);
        let d = g.constant(&head.d);
        let u = g.constant(&head.u);
        let (x_l, x_h) = lowrank_split(&mut g, xi, d, u).unwrap();
        assert!(g.values(x_l).iter().all(|&v| v == 0.0));
        assert_eq!(g.values(x_h), x.values.as_slice());
    }

    #[test]
    fn split_matches_explicit_projector() {
        // u . d built from an orthonormal basis of a subspace S gives
        // x_l = projection onto S.
        let c = 6;
        let r = 2;
        let mut rng = Rng::new(2);
        let mut b1: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let n1: f64 = b1.iter().map(|v| v * v).sum::<f64>().sqrt();
        b1.iter_mut().for_each(|v| *v /= n1);
        let mut b2: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let dot: f64 = b1.iter().zip(&b2).map(|(a, b)| a * b).sum();
        for i in 0..c {
            b2[i] -= dot * b1[i];
        }
        let n2: f64 = b2.iter().map(|v| v * v).sum::<f64>().sqrt();
        b2.iter_mut().for_each(|v| *v /= n2);

        // d rows = basis vectors; u = d^T, so u.d projects onto S.
        let mut d = Tensor::zeros(r, c);
        d.values[..c].copy_from_slice(&b1);
        d.values[c..].copy_from_slice(&b2);
        let u = Tensor::from_fn(c, r, |i, j| d.values[j * c + i]);

        let x = random_tensor(4, c, &mut rng);
        let mut g = Graph::new();
        let xi = g.constant(&x);
        let di = g.constant(&d);
        let ui = g.constant(&u);
        let (x_l, _) = lowrank_split(&mut g, xi, di, ui).unwrap();

        for row in 0..4 {
            for col in 0..c {
                let mut expect = 0.0;
                for basis in [&b1, &b2] {
                    let proj: f64 =
                        (0..c).map(|i| x.values[row * c + i] * basis[i]).sum();
                    expect += proj * basis[col];
                }
                let got = g.values(x_l)[row * c + col];
                assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn split_is_exact_and_rank_bounded() {
        let mut rng = Rng::new(3);
        let c = 10;
        let r = 3;
        let d = random_tensor(r, c, &mut rng);
        let u = random_tensor(c, r, &mut rng);
        let x = random_tensor(12, c, &mut rng);
        let mut g = Graph::new();
        let (xi, di, ui) = (g.constant(&x), g.constant(&d), g.constant(&u));
        let (x_l, x_h) = lowrank_split(&mut g, xi, di, ui).unwrap();
        for i in 0..x.len() {
            // x_h is subtraction-defined, so this identity is bitwise...
            assert_eq!(g.values(x_h)[i], x.values[i] - g.values(x_l)[i]);
            // ...and reconstruction is exact to within one rounding step.
            let recon = g.values(x_l)[i] + g.values(x_h)[i];
            let tol = 2.0 * f64::EPSILON * x.values[i].abs().max(g.values(x_l)[i].abs());
            assert!((recon - x.values[i]).abs() <= tol);
        }
        let m = nalgebra::DMatrix::from_row_slice(12, c, g.values(x_l));
        let svd = m.svd(false, false);
        let above: usize = svd.singular_values.iter().filter(|&&s| s > 1e-9).count();
        assert!(above <= r, "rank {above} > {r}");
    }

    #[test]
    fn attention_map_symmetric_psd() {
        let mut rng = Rng::new(4);
        let x_l = random_tensor(6, 5, &mut rng);
        let q = random_tensor(5, 5, &mut rng);
        let mut g = Graph::new();
        let (xi, qi) = (g.constant(&x_l), g.constant(&q));
        let a = attention_map(&mut g, xi, qi).unwrap();
        let vals = g.values(a);
        for i in 0..6 {
            for j in 0..6 {
                assert!((vals[i * 6 + j] - vals[j * 6 + i]).abs() < 1e-12);
            }
        }
        let m = nalgebra::DMatrix::from_row_slice(6, 6, vals);
        let eig = m.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-9));
    }

    #[test]
    fn attention_identity_q_cases() {
        // Orthogonal rows with q = I: off-diagonals vanish.
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let q = g.constant(&Tensor::identity(2));
        let a = attention_map(&mut g, x, q).unwrap();
        assert_eq!(g.values(a), &[1.0, 0.0, 0.0, 1.0]);

        // Identical unit-norm rows: all entries 1.
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]));
        let q = g.constant(&Tensor::identity(2));
        let a = attention_map(&mut g, x, q).unwrap();
        assert!(g.values(a).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn kl_loss_zero_at_equality_and_nonnegative() {
        let mut rng = Rng::new(5);
        let a = random_tensor(6, 6, &mut rng);
        let mut g = Graph::new();
        let t = g.leaf(&a);
        let s = g.leaf(&a.clone());
        let loss =
            kl_alignment_loss(&mut g, t, s, 4.0, 0.5, 0.5, 3, 16, &mut Rng::new(9)).unwrap();
        assert_eq!(g.value_scalar(loss), 0.0);
        g.backward(loss).unwrap();
        assert!(g.grad(t).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.grad(s).unwrap().iter().all(|&v| v == 0.0));

        for _ in 0..50 {
            let mut g = Graph::new();
            let t = g.constant(&random_tensor(5, 5, &mut rng));
            let s = g.constant(&random_tensor(5, 5, &mut rng));
            let loss = kl_alignment_loss(&mut g, t, s, 2.0, 0.7, 0.3, 4, 8, &mut rng).unwrap();
            assert!(g.value_scalar(loss) >= 0.0);
        }
    }

    #[test]
    fn kl_loss_errors() {
        let mut rng = Rng::new(6);
        let a = random_tensor(4, 4, &mut rng);
        let mut g = Graph::new();
        let t = g.constant(&a);
        let s = g.constant(&a.clone());
        assert!(matches!(
            kl_alignment_loss(&mut g, t, s, 0.0, 0.5, 0.5, 2, 8, &mut rng),
            Err(AlignError::BadTemperature(_))
        ));
        assert!(matches!(
            kl_alignment_loss(&mut g, t, s, 1.0, 0.5, 0.5, 9, 8, &mut rng),
            Err(AlignError::BadCount { .. })
        ));
    }

    #[test]
    fn hand_checked_single_direction_kl() {
        // lambda2 = 0, one sampled row out of one, T = 1, C = 1:
        // loss = KL(softmax(row_t) || softmax(row_s)).
        let t_row = Tensor::new(1, 2, vec![0.0, 3.0_f64.ln()]);
        let s_row = Tensor::new(1, 2, vec![0.0, 0.0]);
        let p: [f64; 2] = [0.25, 0.75];
        let q: [f64; 2] = [0.5, 0.5];
        let expect: f64 = p.iter().zip(&q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum();
        let mut g = Graph::new();
        let ti = g.constant(&t_row);
        let si = g.constant(&s_row);
        let loss =
            kl_alignment_loss(&mut g, ti, si, 1.0, 1.0, 0.0, 1, 1, &mut Rng::new(0)).unwrap();
        assert!((g.value_scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn reparameterization_trivial_cases() {
        let mut rng = Rng::new(7);
        let c = 6;
        let r = 2;
        // u = 0 -> w = identity.
        let head = LowRankHead::init(c, r, &mut rng).unwrap();
        let w = reparameterize(&head.d, &head.u, &head.q);
        assert_eq!(w, Tensor::identity(c));
        // q = identity -> w = identity regardless of u, d.
        let u = random_tensor(c, r, &mut rng);
        let d = random_tensor(r, c, &mut rng);
        let w = reparameterize(&d, &u, &Tensor::identity(c));
        for i in 0..c * c {
            let expect = if i / c == i % c { 1.0 } else { 0.0 };
            assert!((w.values[i] - expect).abs() < 1e-12);
        }
    }

    fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / 1.0_f64.max(x.abs()).max(y.abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn train_and_infer_paths_agree() {
        let mut rng = Rng::new(8);
        for trial in 0..100 {
            let c = [6, 8, 12][trial % 3];
            let r = (c / 4).max(1);
            let mut store = ParamStore::new();
            register_head(&mut store, "h", c, r, &mut rng).unwrap();
            // Random head values, not just init.
            for name in ["h.d", "h.u", "h.q"] {
                let pos = store.position(name).unwrap();
                let t = store.tensor_mut(pos);
                for v in &mut t.values {
                    *v = rng.normal();
                }
            }
            let x = random_tensor(7, c, &mut rng);

            let mut train = Session::new(&store, false);
            let xi = train.g.constant(&x);
            let (out_t, split) = aligned_forward(&mut train, xi, "h", AlignMode::Train).unwrap();
            assert!(split.is_some());

            let mut infer = Session::new(&store, true);
            let xi = infer.g.constant(&x);
            let (out_i, split) = aligned_forward(&mut infer, xi, "h", AlignMode::Infer).unwrap();
            assert!(split.is_none());

            let diff = max_rel_diff(train.g.values(out_t), infer.g.values(out_i));
            assert!(diff < 1e-12, "trial {trial}: paths differ by {diff}");
        }
    }

    #[test]
    fn zero_init_head_is_identity_in_both_modes() {
        let mut rng = Rng::new(9);
        let mut store = ParamStore::new();
        register_head(&mut store, "h", 8, 2, &mut rng).unwrap();
        let x = random_tensor(5, 8, &mut rng);
        for infer in [false, true] {
            let mode = if infer { AlignMode::Infer } else { AlignMode::Train };
            let mut sess = Session::new(&store, infer);
            let xi = sess.g.constant(&x);
            let (out, _) = aligned_forward(&mut sess, xi, "h", mode).unwrap();
            assert_eq!(sess.g.values(out), x.values.as_slice());
        }
    }

    #[test]
    fn aligned_forward_gradcheck() {
        let mut rng = Rng::new(10);
        let c = 6;
        let r = 2;
        let x = random_tensor(5, c, &mut rng);
        let d = random_tensor(r, c, &mut rng);
        let u = random_tensor(c, r, &mut rng);
        let q = random_tensor(c, c, &mut rng);
        let report = grad_check(
            |g, ids| {
                let (x, d, u, q) = (ids[0], ids[1], ids[2], ids[3]);
                let (x_l, x_h) = lowrank_split(g, x, d, u)?;
                let qt = g.transpose(q)?;
                let x_lq = g.matmul(x_l, qt)?;
                let out = g.add(x_h, x_lq)?;
                let sq = g.square(out)?;
                let s = g.sum_reduce(sq, 0)?;
                g.sum_reduce(s, 1)
            },
            &[x, d, u, q],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }

    #[test]
    fn nmi_loss_bounds_and_errors() {
        let mut rng = Rng::new(11);
        let x = random_tensor(64, 3, &mut rng);
        let mut g = Graph::new();
        let xi = g.constant(&x);
        let xh = g.constant(&random_tensor(64, 3, &mut rng));
        assert!(matches!(
            nmi_loss(&mut g, xh, xi, 1, 0.5),
            Err(AlignError::BadBins(1))
        ));
        assert!(matches!(
            nmi_loss(&mut g, xh, xi, 8, 0.0),
            Err(AlignError::BadBandwidth(_))
        ));
        let loss = nmi_loss(&mut g, xh, xi, 8, 0.5).unwrap();
        let v = g.value_scalar(loss);
        assert!((0.0..=1.02).contains(&v), "nmi {v}");
    }

    #[test]
    fn nmi_decreases_with_added_independent_noise() {
        // NMI(x + noise, x) should trend downward as noise grows.
        let mut rng = Rng::new(12);
        let k = 2048;
        let base: Vec<f64> = (0..k).map(|_| rng.uniform(0.0, 1.0)).collect();
        let mut last = f64::INFINITY;
        let mut decreasing = 0;
        let sigmas = [0.0, 0.1, 0.3, 1.0, 3.0];
        for &sigma in &sigmas {
            let noisy: Vec<f64> = base.iter().map(|&v| v + sigma * rng.normal()).collect();
            let mut g = Graph::new();
            let a = g.constant(&Tensor::new(k, 1, noisy));
            let b = g.constant(&Tensor::new(k, 1, base.clone()));
            let nmi = g.nmi_channels(a, b, 16, 1.0 / 16.0).unwrap();
            let v = g.value_scalar(nmi);
            if v < last {
                decreasing += 1;
            }
            last = v;
        }
        assert!(decreasing >= 4, "only {decreasing} decreasing steps");
    }
}
