//! Block-level contracts: shapes, permutation invariance, pooling
//! reductions, IDW rules, and the rotation behavior of the two branches.

use super::*;
use crate::autodiff::{Graph, Tensor};
use crate::geom::{apply_transform, random_rotation, PointCloud};
use crate::rng::Rng;

fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            [
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
            ]
        })
        .collect()
}

fn tiny_enc() -> EncoderConfig {
    EncoderConfig {
        levels: vec![
            LevelConfig {
                centers: 16,
                k: 4,
                radii: vec![0.4, 0.8],
                channels: vec![8, 4],
            },
            LevelConfig {
                centers: 8,
                k: 4,
                radii: vec![0.8, 1.6],
                channels: vec![8, 8],
            },
        ],
        rank_fraction: 0.25,
    }
}

#[test]
fn graph_rep_rows() {
    let mut g = Graph::new();
    let center = g.constant(&Tensor::new(1, 3, vec![0.0, 0.0, 0.0]));
    let nbrs = g.constant(&Tensor::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    let rep = graph_rep(&mut g, center, nbrs).unwrap();
    assert_eq!(g.rows(rep), 2);
    assert_eq!(g.cols(rep), 6);
    assert_eq!(
        g.values(rep),
        &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn graph_rep_translation_moves_only_vertex_columns() {
    let mut rng = Rng::new(2);
    let c: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    let n: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
    let t = [0.3, -0.7, 0.2];

    let run = |shift: bool| {
        let mut g = Graph::new();
        let cv: Vec<f64> = c
            .iter()
            .enumerate()
            .map(|(i, &v)| if shift { v + t[i] } else { v })
            .collect();
        let nv: Vec<f64> = n
            .iter()
            .enumerate()
            .map(|(i, &v)| if shift { v + t[i % 3] } else { v })
            .collect();
        let center = g.constant(&Tensor::new(1, 3, cv));
        let nbrs = g.constant(&Tensor::new(3, 3, nv));
        let rep = graph_rep(&mut g, center, nbrs).unwrap();
        g.values(rep).to_vec()
    };
    let base = run(false);
    let moved = run(true);
    for r in 0..3 {
        for col in 0..6 {
            let d = moved[r * 6 + col] - base[r * 6 + col];
            if col < 3 {
                assert!((d - t[col]).abs() < 1e-12, "vertex column shifts by t");
            } else {
                assert!(d.abs() < 1e-12, "edge column unchanged");
            }
        }
    }
}

fn store_with_mlp(prefix: &str, in_dim: usize, widths: &[usize], seed: u64) -> crate::autodiff::ParamStore {
    let mut store = crate::autodiff::ParamStore::new();
    let mut rng = Rng::new(seed);
    init_mlp(&mut store, prefix, in_dim, widths, &mut rng);
    store
}

#[test]
fn pointnet_singleton_equals_mlp_row() {
    let store = store_with_mlp("p", 3, &[6, 4], 3);
    let row = Tensor::new(1, 3, vec![0.2, -0.4, 0.9]);

    let mut sess = Session::new(&store, false);
    let x = sess.g.constant(&row);
    let pooled = pointnet_map(&mut sess, x, "p", &[6, 4]).unwrap();
    let via_pool = sess.g.values(pooled).to_vec();

    let mut sess = Session::new(&store, false);
    let x = sess.g.constant(&row);
    let direct = mlp_rows(&mut sess, x, "p", &[6, 4], true).unwrap();
    assert_eq!(via_pool, sess.g.values(direct));
}

#[test]
fn pointnet_duplicate_rows_and_permutation_bitwise() {
    let store = store_with_mlp("p", 3, &[8, 5], 4);
    let mut rng = Rng::new(5);
    let rows: Vec<f64> = (0..12).map(|_| rng.normal()).collect();

    let eval = |data: Vec<f64>, k: usize| {
        let mut sess = Session::new(&store, false);
        let x = sess.g.constant(&Tensor::new(k, 3, data));
        let pooled = pointnet_map(&mut sess, x, "p", &[8, 5]).unwrap();
        sess.g.values(pooled).to_vec()
    };

    let base = eval(rows.clone(), 4);

    // Duplicated rows pool to the same output.
    let mut dup = rows.clone();
    dup.extend_from_slice(&rows[..3]);
    assert_eq!(eval(dup, 5), base);

    // Any row permutation is bit-identical.
    let perm: Vec<f64> = [2usize, 0, 3, 1]
        .iter()
        .flat_map(|&r| rows[r * 3..(r + 1) * 3].to_vec())
        .collect();
    assert_eq!(eval(perm, 4), base);
}

#[test]
fn feature_space_patch_contracts() {
    let store = store_with_mlp("f", 4, &[6, 3], 6);
    let mut rng = Rng::new(7);
    let m = 5;
    let feat = Tensor::from_fn(m, 2, |_, _| rng.normal());

    // m = k: every patch sees all points.
    let mut sess = Session::new(&store, false);
    let x = sess.g.constant(&feat);
    let (out, membership) = feature_space_patch(&mut sess, x, m, "f", &[6, 3], None).unwrap();
    assert_eq!(sess.g.rows(out), m);
    assert_eq!(sess.g.cols(out), 3);
    assert_eq!(membership.len(), m * m);

    // Two identical feature rows produce identical output rows.
    let mut vals = feat.values.clone();
    vals[2] = vals[0];
    vals[3] = vals[1];
    let mut sess = Session::new(&store, false);
    let x = sess.g.constant(&Tensor::new(m, 2, vals));
    let (out, _) = feature_space_patch(&mut sess, x, 3, "f", &[6, 3], None).unwrap();
    let v = sess.g.values(out);
    assert_eq!(&v[0..3], &v[3..6], "identical inputs, identical rows");
}

#[test]
fn gsm_single_radius_single_k_reduces_to_pointnet() {
    let mut store = crate::autodiff::ParamStore::new();
    let mut rng = Rng::new(8);
    init_mlp(&mut store, "g.r0", 6 + 2, &[5, 4], &mut rng);

    let prev = vec![[0.0, 0.0, 0.0], [0.55, 0.0, 0.0]];
    let centers = vec![[0.5, 0.0, 0.0]];
    let sf = Tensor::new(2, 2, vec![0.3, -0.2, 0.8, 0.1]);

    // k = 1 ball around the center catches only the nearest point; the gsm
    // output must equal the plain MLP of that single fused row.
    let mut sess = Session::new(&store, false);
    let sf_id = sess.g.constant(&sf);
    let out = gsm_block(&mut sess, &prev, &centers, sf_id, &[0.2], 1, "g", &[5, 4]).unwrap();
    let got = sess.g.values(out).to_vec();

    let fused = vec![
        0.5, 0.0, 0.0, // center
        0.05, 0.0, 0.0, // nearest (index 1) minus center
        0.8, 0.1, // its feature row
    ];
    let mut sess = Session::new(&store, false);
    let row = sess.g.constant(&Tensor::new(1, 8, fused));
    let direct = mlp_rows(&mut sess, row, "g.r0", &[5, 4], true).unwrap();
    assert_eq!(got, sess.g.values(direct));
}

#[test]
fn gsm_output_channels_are_sum_of_per_radius_widths() {
    let mut store = crate::autodiff::ParamStore::new();
    let mut rng = Rng::new(9);
    init_mlp(&mut store, "g.r0", 6 + 3, &[6, 4], &mut rng);
    init_mlp(&mut store, "g.r1", 6 + 3, &[6, 4], &mut rng);

    let prev = random_points(20, 10);
    let centers = random_points(5, 11);
    let sf = Tensor::from_fn(20, 3, |_, _| rng.normal());
    let mut sess = Session::new(&store, false);
    let sf_id = sess.g.constant(&sf);
    let out = gsm_block(
        &mut sess,
        &prev,
        &centers,
        sf_id,
        &[0.5, 1.0],
        4,
        "g",
        &[6, 4],
    )
    .unwrap();
    assert_eq!(sess.g.rows(out), 5);
    assert_eq!(sess.g.cols(out), 8); // 4 + 4
}

#[test]
fn gsm_permuting_points_in_a_subregion_leaves_output_unchanged() {
    let mut store = crate::autodiff::ParamStore::new();
    let mut rng = Rng::new(12);
    init_mlp(&mut store, "g.r0", 6 + 2, &[5, 3], &mut rng);

    let prev = random_points(10, 13);
    let centers = vec![prev[0]];
    let sf_rows: Vec<f64> = (0..20).map(|_| rng.normal()).collect();

    let eval = |order: &[usize]| {
        let prev_p: Vec<[f64; 3]> = order.iter().map(|&i| prev[i]).collect();
        let sf_p: Vec<f64> = order
            .iter()
            .flat_map(|&i| sf_rows[i * 2..(i + 1) * 2].to_vec())
            .collect();
        let mut sess = Session::new(&store, false);
        let sf_id = sess.g.constant(&Tensor::new(10, 2, sf_p));
        let out =
            gsm_block(&mut sess, &prev_p, &centers, sf_id, &[0.9], 6, "g", &[5, 3]).unwrap();
        sess.g.values(out).to_vec()
    };

    let identity: Vec<usize> = (0..10).collect();
    let mut shuffled = identity.clone();
    Rng::new(14).shuffle(&mut shuffled);
    assert_eq!(eval(&identity), eval(&shuffled));
}

#[test]
fn idw_rules() {
    let coarse_centers = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let feat = Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

    // Coincident fine center: exactly that coarse feature.
    let mut g = Graph::new();
    let f = g.constant(&feat);
    let out = idw_upsample(&mut g, f, &coarse_centers, &[[1.0, 0.0, 0.0]], 2.0, 3).unwrap();
    assert_eq!(g.values(out), &[3.0, 4.0]);

    // Two equidistant coarse points: arithmetic mean.
    let mut g = Graph::new();
    let f = g.constant(&feat);
    let out = idw_upsample(&mut g, f, &coarse_centers, &[[0.5, 0.0, 0.0]], 2.0, 2).unwrap();
    assert_eq!(g.values(out), &[2.0, 3.0]);

    // Random instance: matches a direct weighted-average oracle.
    let rng = Rng::new(15);
    let fine = random_points(7, 16);
    let mut g = Graph::new();
    let f = g.constant(&feat);
    let out = idw_upsample(&mut g, f, &coarse_centers, &fine, 2.0, 3).unwrap();
    for (fi, fc) in fine.iter().enumerate() {
        let mut weights: Vec<f64> = coarse_centers
            .iter()
            .map(|c| {
                let d2 = (0..3).map(|a| (fc[a] - c[a]).powi(2)).sum::<f64>();
                1.0 / (d2 + 1e-8)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for ch in 0..2 {
            let expect: f64 = (0..3)
                .map(|ci| weights[ci] * feat.values[ci * 2 + ch])
                .sum();
            let got = g.values(out)[fi * 2 + ch];
            assert!(
                (got - expect).abs() < 1e-9,
                "fine {fi} ch {ch}: {got} vs {expect}"
            );
        }
    }
    let _ = rng;
}

#[test]
fn classify_head_shapes() {
    let mut store = crate::autodiff::ParamStore::new();
    let mut rng = Rng::new(17);
    init_mlp(&mut store, "h", 6, &[6, 1], &mut rng);
    let mut sess = Session::new(&store, false);
    let feat = sess.g.constant(&Tensor::from_fn(5, 6, |_, _| rng.normal()));
    let logits = classify_head(&mut sess, feat, "h", 6, 1).unwrap();
    assert_eq!((sess.g.rows(logits), sess.g.cols(logits)), (1, 1));
    assert!(sess.g.values(logits)[0].is_finite());
}

#[test]
fn layer_norm_rows_moments() {
    let mut rng = Rng::new(18);
    let mut g = Graph::new();
    let x = g.constant(&Tensor::from_fn(4, 8, |_, _| rng.normal() * 3.0 + 1.0));
    let y = layer_norm_rows(&mut g, x, 1e-5).unwrap();
    for r in 0..4 {
        let row = &g.values(y)[r * 8..(r + 1) * 8];
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn plan_is_deterministic_and_centers_nest() {
    let pts = random_points(64, 19);
    let cfg = tiny_enc();
    let a = plan_cloud(&pts, &cfg, &mut Rng::from_streams(&[1, 2])).unwrap();
    let b = plan_cloud(&pts, &cfg, &mut Rng::from_streams(&[1, 2])).unwrap();
    for (la, lb) in a.levels.iter().zip(&b.levels) {
        assert_eq!(la.centers, lb.centers);
        assert_eq!(la.teacher_flat, lb.teacher_flat);
        assert_eq!(la.align_flat, lb.align_flat);
    }
    // Level centers are a subset of the previous level's points.
    for c in &a.levels[1].centers {
        assert!(a.levels[0].centers.contains(c));
    }
}

#[test]
fn branch_shape_contract_and_determinism() {
    let pts = random_points(64, 20);
    let cfg = tiny_enc();
    let model = Model::init(cfg.clone(), 4, true, true, 99).unwrap();
    let plan = plan_cloud(&pts, &cfg, &mut Rng::from_streams(&[3])).unwrap();

    let run = || {
        let mut sess = Session::new(&model.params, false);
        let s = student_forward(&mut sess, &plan, &model, ForwardMode::Train).unwrap();
        let t = teacher_forward(&mut sess, &plan, &model, ForwardMode::Train).unwrap();
        for (li, lv) in cfg.levels.iter().enumerate() {
            assert_eq!(sess.g.rows(s.levels[li].feat), lv.centers);
            assert_eq!(sess.g.cols(s.levels[li].feat), lv.out_channels());
            assert_eq!(sess.g.cols(t.levels[li].feat), lv.out_channels());
            assert!(s.splits[li].is_some());
        }
        assert_eq!((sess.g.rows(s.logits), sess.g.cols(s.logits)), (1, 4));
        (
            sess.g.values(s.logits).to_vec(),
            sess.g.values(t.logits).to_vec(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn teacher_level_is_rotation_invariant_student_is_not() {
    let pts = {
        // A curved, generic surface sample: no degenerate patches.
        let mut rng = Rng::new(21);
        (0..48)
            .map(|_| {
                let x: f64 = rng.uniform(-1.0, 1.0);
                let y: f64 = rng.uniform(-1.0, 1.0);
                [x, y, 0.5 * x * x + 0.4 * y * y + 0.1 * x * y]
            })
            .collect::<Vec<_>>()
    };
    let cfg = EncoderConfig {
        levels: vec![LevelConfig {
            centers: 12,
            k: 6,
            radii: vec![0.6],
            channels: vec![8, 8],
        }],
        rank_fraction: 0.25,
    };
    let model = Model::init(cfg.clone(), 3, true, false, 5).unwrap();

    let eval = |points: &[[f64; 3]]| {
        let plan = plan_cloud(points, &cfg, &mut Rng::from_streams(&[77])).unwrap();
        assert!(!plan.degenerate(), "test surface must be generic");
        let mut sess = Session::new(&model.params, false);
        let t = teacher_forward(&mut sess, &plan, &model, ForwardMode::Train).unwrap();
        let s = student_forward(&mut sess, &plan, &model, ForwardMode::Train).unwrap();
        (
            sess.g.values(t.global).to_vec(),
            sess.g.values(s.global).to_vec(),
        )
    };

    let (t_base, s_base) = eval(&pts);
    let mut rot_rng = Rng::new(22);
    let rot = random_rotation(30.0, &mut rot_rng).unwrap();
    let cloud = PointCloud::new(pts, None).unwrap();
    let rotated = apply_transform(&cloud, &rot).unwrap();
    let (t_rot, s_rot) = eval(rotated.points());

    let rel = |a: &[f64], b: &[f64]| {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        num / den
    };
    assert!(
        rel(&t_base, &t_rot) < 1e-4,
        "teacher must be invariant, got {}",
        rel(&t_base, &t_rot)
    );
    assert!(
        rel(&s_base, &s_rot) > 1e-3,
        "student must be pose-sensitive, got {}",
        rel(&s_base, &s_rot)
    );
}
