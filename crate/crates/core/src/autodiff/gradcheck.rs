//! Central-finite-difference verification of analytic gradients.
//!
//! This is the universal gradient oracle of the crate: every primitive and
//! every composite loss is checked against it. The function under test is a
//! closure rebuilding the same graph from leaf tensors, so perturbed
//! evaluations see exactly the same structure.

use super::{DiffError, Graph, Id, Tensor};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Max over all components of `|analytic - fd| / max(1, |analytic|, |fd|)`.
    pub max_rel_err: f64,
    /// `(tensor index, component index)` of the worst component.
    pub worst: (usize, usize),
    /// Total number of scalar components checked.
    pub components: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare the tape gradient of `f` at `point` against central finite
/// differences with the given step.
///
/// `f` must be deterministic and must treat its inputs as the only varying
/// quantities; it is invoked `2 * n + 1` times for `n` total components.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<GradReport, DiffError>
where
    F: Fn(&mut Graph, &[Id]) -> Result<Id, DiffError>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<Id> = point.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &ids)?;
    if g.rows(loss) * g.cols(loss) != 1 {
        return Err(DiffError::NotScalar);
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(point)
        .map(|(&id, t)| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |tensors: &[Tensor]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let ids: Vec<Id> = tensors.iter().map(|t| g.leaf(t)).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.value_scalar(loss))
    };

    let mut work: Vec<Tensor> = point.to_vec();
    let mut max_rel_err = 0.0_f64;
    let mut worst = (0, 0);
    let mut components = 0;
    for (ti, t) in point.iter().enumerate() {
        for ci in 0..t.len() {
            let orig = work[ti].values[ci];
            work[ti].values[ci] = orig + step;
            let plus = eval(&work)?;
            work[ti].values[ci] = orig - step;
            let minus = eval(&work)?;
            work[ti].values[ci] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let a = analytic[ti][ci];
            let rel = (a - fd).abs() / 1.0_f64.max(a.abs()).max(fd.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (ti, ci);
            }
            components += 1;
        }
    }
    Ok(GradReport {
        max_rel_err,
        worst,
        components,
    })
}

// Random sampling helpers for the primitive suite. Kink-sensitive
// primitives get points with margins so finite differences never cross a
// decision boundary.

use crate::rng::Rng;

fn random_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.uniform(-1.5, 1.5))
}

fn random_tensor_margin(rows: usize, cols: usize, margin: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let mut v = rng.uniform(-1.5, 1.5);
        while v.abs() < margin {
            v = rng.uniform(-1.5, 1.5);
        }
        v
    })
}

fn random_positive(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.uniform(0.2, 2.0))
}

/// Tensor whose per-column and per-row maxima are separated, keeping
/// finite differences away from argmax flips.
fn max_safe_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    loop {
        let t = random_tensor(rows, cols, rng);
        let mut ok = true;
        'outer: for c in 0..cols {
            let mut col: Vec<f64> = (0..rows).map(|r| t.values[r * cols + c]).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for w in col.windows(2) {
                if (w[0] - w[1]).abs() < 1e-2 {
                    ok = false;
                    break 'outer;
                }
            }
            for r in 0..rows {
                let mut row: Vec<f64> = (0..cols).map(|cc| t.values[r * cols + cc]).collect();
                row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if (row[0] - row[1]).abs() < 1e-2 {
                    ok = false;
                    break 'outer;
                }
            }
        }
        if ok {
            return t;
        }
    }
}

/// Samples for the NMI check: per-channel extremes separated so min-max
/// normalization has stable argexts under the finite-difference step.
fn nmi_safe_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    loop {
        let t = Tensor::from_fn(rows, cols, |_, _| rng.uniform(0.0, 1.0));
        let mut ok = true;
        for c in 0..cols {
            let mut col: Vec<f64> = (0..rows).map(|r| t.values[r * cols + c]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if col[1] - col[0] < 5e-2 || col[rows - 1] - col[rows - 2] < 5e-2 {
                ok = false;
                break;
            }
        }
        if ok {
            return t;
        }
    }
}

type CaseFn = Box<dyn Fn(&mut Graph, &[Id]) -> Result<Id, DiffError>>;
type SampleFn = Box<dyn Fn(&mut Rng) -> Vec<Tensor>>;

fn scalarize(g: &mut Graph, x: Id) -> Result<Id, DiffError> {
    // Weighted sum so gradients differ per component.
    let (r, c) = (g.rows(x), g.cols(x));
    let w = Tensor::from_fn(r, c, |i, j| 0.3 + 0.17 * (i * c + j) as f64);
    let wid = g.constant(&w);
    let p = g.mul(x, wid)?;
    let s = g.sum_reduce(p, 0)?;
    g.sum_reduce(s, 1)
}

fn primitive_cases() -> Vec<(&'static str, CaseFn, SampleFn)> {
    vec![
        (
            "add",
            Box::new(|g, ids| {
                let y = g.add(ids[0], ids[1])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(3, 4, rng), random_tensor(3, 4, rng)]),
        ),
        (
            "sub",
            Box::new(|g, ids| {
                let y = g.sub(ids[0], ids[1])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(3, 4, rng), random_tensor(3, 4, rng)]),
        ),
        (
            "mul",
            Box::new(|g, ids| {
                let y = g.mul(ids[0], ids[1])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(3, 4, rng), random_tensor(3, 4, rng)]),
        ),
        (
            "div",
            Box::new(|g, ids| {
                let y = g.div(ids[0], ids[1])?;
                scalarize(g, y)
            }),
            Box::new(|rng| {
                vec![
                    random_tensor(3, 4, rng),
                    random_tensor_margin(3, 4, 0.3, rng),
                ]
            }),
        ),
        (
            "scalar_mul_add",
            Box::new(|g, ids| {
                let y = g.scalar_mul(ids[0], -1.7)?;
                let z = g.scalar_add(y, 0.4)?;
                scalarize(g, z)
            }),
            Box::new(|rng| vec![random_tensor(2, 5, rng)]),
        ),
        (
            "matmul",
            Box::new(|g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(4, 3, rng), random_tensor(3, 2, rng)]),
        ),
        (
            "transpose",
            Box::new(|g, ids| {
                let y = g.transpose(ids[0])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(3, 5, rng)]),
        ),
        (
            "concat_rows",
            Box::new(|g, ids| {
                let y = g.concat(0, &[ids[0], ids[1]])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(2, 3, rng), random_tensor(4, 3, rng)]),
        ),
        (
            "concat_cols",
            Box::new(|g, ids| {
                let y = g.concat(1, &[ids[0], ids[1]])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(3, 2, rng), random_tensor(3, 4, rng)]),
        ),
        (
            "relu",
            Box::new(|g, ids| {
                let y = g.relu(ids[0])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor_margin(3, 4, 1e-2, rng)]),
        ),
        (
            "log",
            Box::new(|g, ids| {
                let y = g.log(ids[0])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_positive(3, 4, rng)]),
        ),
        (
            "exp",
            Box::new(|g, ids| {
                let y = g.exp(ids[0])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(3, 4, rng)]),
        ),
        (
            "square",
            Box::new(|g, ids| {
                let y = g.square(ids[0])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(3, 4, rng)]),
        ),
        (
            "sqrt",
            Box::new(|g, ids| {
                let y = g.sqrt(ids[0])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_positive(3, 4, rng)]),
        ),
        (
            "max_reduce_rows",
            Box::new(|g, ids| {
                let y = g.max_reduce(ids[0], 0)?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![max_safe_tensor(4, 3, rng)]),
        ),
        (
            "max_reduce_cols",
            Box::new(|g, ids| {
                let y = g.max_reduce(ids[0], 1)?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![max_safe_tensor(4, 3, rng)]),
        ),
        (
            "mean_reduce",
            Box::new(|g, ids| {
                let y = g.mean_reduce(ids[0], 0)?;
                let z = g.mean_reduce(ids[0], 1)?;
                let a = scalarize(g, y)?;
                let b = scalarize(g, z)?;
                g.add(a, b)
            }),
            Box::new(|rng| vec![random_tensor(4, 3, rng)]),
        ),
        (
            "sum_reduce",
            Box::new(|g, ids| {
                let y = g.sum_reduce(ids[0], 0)?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(4, 3, rng)]),
        ),
        (
            "softmax_rows",
            Box::new(|g, ids| {
                let y = g.softmax_rows(ids[0], 2.5)?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(3, 5, rng)]),
        ),
        (
            "gather_rows",
            Box::new(|g, ids| {
                let y = g.gather_rows(ids[0], &[2, 0, 2, 1])?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(3, 4, rng)]),
        ),
        (
            "block_max_rows",
            Box::new(|g, ids| {
                let y = g.block_max_rows(ids[0], 3)?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![max_safe_tensor(6, 4, rng)]),
        ),
        (
            "block_sum_rows",
            Box::new(|g, ids| {
                let y = g.block_sum_rows(ids[0], 3)?;
                scalarize(g, y)
            }),
            Box::new(|rng| vec![random_tensor(6, 4, rng)]),
        ),
        (
            "kl_div_rows",
            Box::new(|g, ids| {
                let y = g.kl_div_rows(ids[0], ids[1], 3.0)?;
                g.scalar_mul(y, 1.3)
            }),
            Box::new(|rng| vec![random_tensor(3, 4, rng), random_tensor(3, 4, rng)]),
        ),
        (
            "nmi_channels",
            Box::new(|g, ids| {
                let y = g.nmi_channels(ids[0], ids[1], 6, 0.5)?;
                g.scalar_mul(y, 2.0)
            }),
            Box::new(|rng| vec![nmi_safe_tensor(10, 2, rng), nmi_safe_tensor(10, 2, rng)]),
        ),
    ]
}

/// Run the finite-difference verification of every primitive at `trials`
/// random points each; returns the worst report per primitive.
pub fn primitive_suite(
    trials: usize,
    seed: u64,
) -> Result<Vec<(&'static str, GradReport)>, DiffError> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for (name, case, sample) in primitive_cases() {
        let mut worst: Option<GradReport> = None;
        for _ in 0..trials {
            let point = sample(&mut rng);
            let report = grad_check(&case, &point, 1e-5)?;
            if worst
                .as_ref()
                .map(|w| report.max_rel_err > w.max_rel_err)
                .unwrap_or(true)
            {
                worst = Some(report);
            }
        }
        out.push((name, worst.expect("at least one trial")));
    }
    Ok(out)
}
