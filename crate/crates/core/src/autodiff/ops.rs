//! Primitive operations: forward evaluation and analytic vector-Jacobian
//! products.
//!
//! Saved forward state (argmax indices, softmax outputs, histogram
//! assignments) lives inside the op variant so backward never recomputes a
//! nonlinearity. Reduction tie rules are fixed: the first index wins.

use super::{DiffError, Graph, Id, Node};

/// Recorded primitive applications.
pub enum Op {
    Leaf,
    Constant,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    ScalarMul(Id, f64),
    ScalarAdd(Id),
    Matmul(Id, Id),
    Transpose(Id),
    ConcatRows(Vec<Id>),
    ConcatCols(Vec<Id>),
    Relu(Id),
    Log(Id),
    Exp(Id),
    Square(Id),
    Sqrt(Id),
    MaxReduce {
        x: Id,
        axis: u8,
        argmax: Vec<u32>,
    },
    MeanReduce {
        x: Id,
        axis: u8,
    },
    SumReduce {
        x: Id,
        axis: u8,
    },
    SoftmaxRows {
        x: Id,
        temperature: f64,
    },
    GatherRows {
        x: Id,
        indices: Vec<u32>,
    },
    BlockMaxRows {
        x: Id,
        block: u32,
        argmax: Vec<u32>,
    },
    BlockSumRows {
        x: Id,
        block: u32,
    },
    KlDivRows {
        a: Id,
        b: Id,
        temperature: f64,
        log_p: Vec<f64>,
        log_q: Vec<f64>,
    },
    NmiChannels {
        xh: Id,
        x: Id,
        saved: Box<NmiSaved>,
    },
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}

// Dense helpers shared by forward and backward paths.

/// `out += a (ar x ac) . b (ac x bc)`, row-major, ikj order.
fn matmul_acc(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize, out: &mut [f64]) {
    for i in 0..ar {
        let arow = &a[i * ac..(i + 1) * ac];
        let orow = &mut out[i * bc..(i + 1) * bc];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * bc..(kk + 1) * bc];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a (ar x ac) . b^T (bc x ac)`: rows of `a` dotted with rows of `b`.
fn matmul_abt_acc(a: &[f64], ar: usize, ac: usize, b: &[f64], br: usize, out: &mut [f64]) {
    for i in 0..ar {
        let arow = &a[i * ac..(i + 1) * ac];
        let orow = &mut out[i * br..(i + 1) * br];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * ac..(kk + 1) * ac];
            let mut dot = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                dot += x * y;
            }
            *o += dot;
        }
    }
}

/// `out += a^T (ac x ar) . b (ar x bc)`.
fn matmul_atb_acc(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize, out: &mut [f64]) {
    for i in 0..ar {
        let arow = &a[i * ac..(i + 1) * ac];
        let brow = &b[i * bc..(i + 1) * bc];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * bc..(kk + 1) * bc];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    fn same_shape(&self, op: &'static str, a: Id, b: Id) -> Result<(usize, usize), DiffError> {
        let (na, nb) = (&self.nodes[a.idx()], &self.nodes[b.idx()]);
        if na.rows != nb.rows || na.cols != nb.cols {
            return Err(shape_err(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    na.rows, na.cols, nb.rows, nb.cols
                ),
            ));
        }
        Ok((na.rows, na.cols))
    }

    fn zip_ew(
        &mut self,
        op_name: &'static str,
        a: Id,
        b: Id,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Id, DiffError> {
        let (rows, cols) = self.same_shape(op_name, a, b)?;
        let values: Vec<f64> = self.nodes[a.idx()]
            .values
            .iter()
            .zip(&self.nodes[b.idx()].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires(a) || self.requires(b);
        self.push(op_name, rows, cols, values, op, rg)
    }

    fn map_ew(
        &mut self,
        op_name: &'static str,
        x: Id,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Id, DiffError> {
        let n = &self.nodes[x.idx()];
        let (rows, cols) = (n.rows, n.cols);
        let values: Vec<f64> = n.values.iter().map(|&v| f(v)).collect();
        let rg = self.requires(x);
        self.push(op_name, rows, cols, values, op, rg)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id, DiffError> {
        self.zip_ew("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id, DiffError> {
        self.zip_ew("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id, DiffError> {
        self.zip_ew("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Id, b: Id) -> Result<Id, DiffError> {
        self.zip_ew("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scalar_mul(&mut self, x: Id, c: f64) -> Result<Id, DiffError> {
        self.map_ew("scalar_mul", x, |v| v * c, Op::ScalarMul(x, c))
    }

    pub fn scalar_add(&mut self, x: Id, c: f64) -> Result<Id, DiffError> {
        self.map_ew("scalar_add", x, |v| v + c, Op::ScalarAdd(x))
    }

    pub fn relu(&mut self, x: Id) -> Result<Id, DiffError> {
        self.map_ew("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn log(&mut self, x: Id) -> Result<Id, DiffError> {
        self.map_ew("log", x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Id) -> Result<Id, DiffError> {
        self.map_ew("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Id) -> Result<Id, DiffError> {
        self.map_ew("square", x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Id) -> Result<Id, DiffError> {
        self.map_ew("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id, DiffError> {
        let (na, nb) = (&self.nodes[a.idx()], &self.nodes[b.idx()]);
        if na.cols != nb.rows {
            return Err(shape_err(
                "matmul",
                format!("{}x{} . {}x{}", na.rows, na.cols, nb.rows, nb.cols),
            ));
        }
        let (ar, ac, bc) = (na.rows, na.cols, nb.cols);
        let mut values = vec![0.0; ar * bc];
        matmul_acc(&na.values, ar, ac, &nb.values, bc, &mut values);
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", ar, bc, values, Op::Matmul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Id) -> Result<Id, DiffError> {
        let n = &self.nodes[x.idx()];
        let (rows, cols) = (n.rows, n.cols);
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                values[c * rows + r] = n.values[r * cols + c];
            }
        }
        let rg = self.requires(x);
        self.push("transpose", cols, rows, values, Op::Transpose(x), rg)
    }

    /// Concatenate along an axis: `0` stacks rows, `1` joins columns.
    pub fn concat(&mut self, axis: usize, inputs: &[Id]) -> Result<Id, DiffError> {
        match axis {
            0 => self.concat_rows(inputs),
            1 => self.concat_cols(inputs),
            _ => Err(DiffError::BadArg(format!("concat axis {axis}"))),
        }
    }

    pub fn concat_rows(&mut self, inputs: &[Id]) -> Result<Id, DiffError> {
        if inputs.is_empty() {
            return Err(DiffError::BadArg("concat of zero inputs".into()));
        }
        let cols = self.nodes[inputs[0].idx()].cols;
        let mut rows = 0;
        for &i in inputs {
            let n = &self.nodes[i.idx()];
            if n.cols != cols {
                return Err(shape_err("concat_rows", format!("{} vs {cols} cols", n.cols)));
            }
            rows += n.rows;
        }
        let mut values = Vec::with_capacity(rows * cols);
        for &i in inputs {
            values.extend_from_slice(&self.nodes[i.idx()].values);
        }
        let rg = inputs.iter().any(|&i| self.requires(i));
        self.push(
            "concat_rows",
            rows,
            cols,
            values,
            Op::ConcatRows(inputs.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, inputs: &[Id]) -> Result<Id, DiffError> {
        if inputs.is_empty() {
            return Err(DiffError::BadArg("concat of zero inputs".into()));
        }
        let rows = self.nodes[inputs[0].idx()].rows;
        let mut cols = 0;
        for &i in inputs {
            let n = &self.nodes[i.idx()];
            if n.rows != rows {
                return Err(shape_err("concat_cols", format!("{} vs {rows} rows", n.rows)));
            }
            cols += n.cols;
        }
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut offset = 0;
            for &i in inputs {
                let n = &self.nodes[i.idx()];
                let src = &n.values[r * n.cols..(r + 1) * n.cols];
                values[r * cols + offset..r * cols + offset + n.cols].copy_from_slice(src);
                offset += n.cols;
            }
        }
        let rg = inputs.iter().any(|&i| self.requires(i));
        self.push(
            "concat_cols",
            rows,
            cols,
            values,
            Op::ConcatCols(inputs.to_vec()),
            rg,
        )
    }

    /// Max over an axis, keeping the first argmax on ties. Axis 0 reduces
    /// rows (output `1 x c`), axis 1 reduces columns (output `r x 1`).
    pub fn max_reduce(&mut self, x: Id, axis: usize) -> Result<Id, DiffError> {
        let n = &self.nodes[x.idx()];
        let (rows, cols) = (n.rows, n.cols);
        let (out_r, out_c, len) = match axis {
            0 => (1, cols, cols),
            1 => (rows, 1, rows),
            _ => return Err(DiffError::BadArg(format!("max_reduce axis {axis}"))),
        };
        let mut values = vec![f64::NEG_INFINITY; len];
        let mut argmax = vec![0u32; len];
        for r in 0..rows {
            for c in 0..cols {
                let v = n.values[r * cols + c];
                let (slot, arg) = if axis == 0 { (c, r) } else { (r, c) };
                if v > values[slot] {
                    values[slot] = v;
                    argmax[slot] = arg as u32;
                }
            }
        }
        let rg = self.requires(x);
        self.push(
            "max_reduce",
            out_r,
            out_c,
            values,
            Op::MaxReduce {
                x,
                axis: axis as u8,
                argmax,
            },
            rg,
        )
    }

    pub fn mean_reduce(&mut self, x: Id, axis: usize) -> Result<Id, DiffError> {
        let n = &self.nodes[x.idx()];
        let (rows, cols) = (n.rows, n.cols);
        let (out_r, out_c, len, denom) = match axis {
            0 => (1, cols, cols, rows as f64),
            1 => (rows, 1, rows, cols as f64),
            _ => return Err(DiffError::BadArg(format!("mean_reduce axis {axis}"))),
        };
        let mut values = vec![0.0; len];
        for r in 0..rows {
            for c in 0..cols {
                let slot = if axis == 0 { c } else { r };
                values[slot] += n.values[r * cols + c];
            }
        }
        for v in &mut values {
            *v /= denom;
        }
        let rg = self.requires(x);
        self.push(
            "mean_reduce",
            out_r,
            out_c,
            values,
            Op::MeanReduce {
                x,
                axis: axis as u8,
            },
            rg,
        )
    }

    pub fn sum_reduce(&mut self, x: Id, axis: usize) -> Result<Id, DiffError> {
        let n = &self.nodes[x.idx()];
        let (rows, cols) = (n.rows, n.cols);
        let (out_r, out_c, len) = match axis {
            0 => (1, cols, cols),
            1 => (rows, 1, rows),
            _ => return Err(DiffError::BadArg(format!("sum_reduce axis {axis}"))),
        };
        let mut values = vec![0.0; len];
        for r in 0..rows {
            for c in 0..cols {
                let slot = if axis == 0 { c } else { r };
                values[slot] += n.values[r * cols + c];
            }
        }
        let rg = self.requires(x);
        self.push(
            "sum_reduce",
            out_r,
            out_c,
            values,
            Op::SumReduce {
                x,
                axis: axis as u8,
            },
            rg,
        )
    }

    /// Row-wise `softmax(x / temperature)` with max-shift stabilization.
    pub fn softmax_rows(&mut self, x: Id, temperature: f64) -> Result<Id, DiffError> {
        if !(temperature > 0.0) {
            return Err(DiffError::BadArg(format!(
                "softmax temperature {temperature} must be > 0"
            )));
        }
        let n = &self.nodes[x.idx()];
        let (rows, cols) = (n.rows, n.cols);
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &n.values[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut values[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                let e = ((v - m) / temperature).exp();
                *o = e;
                sum += e;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.requires(x);
        self.push(
            "softmax_rows",
            rows,
            cols,
            values,
            Op::SoftmaxRows { x, temperature },
            rg,
        )
    }

    /// Select rows by index; indices may repeat. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: Id, indices: &[usize]) -> Result<Id, DiffError> {
        let n = &self.nodes[x.idx()];
        let (rows, cols) = (n.rows, n.cols);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(DiffError::BadArg(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let mut values = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            values.extend_from_slice(&n.values[i * cols..(i + 1) * cols]);
        }
        let rg = self.requires(x);
        self.push(
            "gather_rows",
            indices.len(),
            cols,
            values,
            Op::GatherRows {
                x,
                indices: indices.iter().map(|&i| i as u32).collect(),
            },
            rg,
        )
    }

    /// Max-pool over consecutive row blocks of size `block`:
    /// `(m*block) x c -> m x c`. First argmax wins ties.
    pub fn block_max_rows(&mut self, x: Id, block: usize) -> Result<Id, DiffError> {
        let n = &self.nodes[x.idx()];
        let (rows, cols) = (n.rows, n.cols);
        if block == 0 || rows % block != 0 {
            return Err(shape_err(
                "block_max_rows",
                format!("{rows} rows not divisible into blocks of {block}"),
            ));
        }
        let m = rows / block;
        let mut values = vec![f64::NEG_INFINITY; m * cols];
        let mut argmax = vec![0u32; m * cols];
        for g in 0..m {
            for r in 0..block {
                let src = &n.values[(g * block + r) * cols..(g * block + r + 1) * cols];
                for c in 0..cols {
                    if src[c] > values[g * cols + c] {
                        values[g * cols + c] = src[c];
                        argmax[g * cols + c] = r as u32;
                    }
                }
            }
        }
        let rg = self.requires(x);
        self.push(
            "block_max_rows",
            m,
            cols,
            values,
            Op::BlockMaxRows {
                x,
                block: block as u32,
                argmax,
            },
            rg,
        )
    }

    /// Sum over consecutive row blocks of size `block`.
    pub fn block_sum_rows(&mut self, x: Id, block: usize) -> Result<Id, DiffError> {
        let n = &self.nodes[x.idx()];
        let (rows, cols) = (n.rows, n.cols);
        if block == 0 || rows % block != 0 {
            return Err(shape_err(
                "block_sum_rows",
                format!("{rows} rows not divisible into blocks of {block}"),
            ));
        }
        let m = rows / block;
        let mut values = vec![0.0; m * cols];
        for g in 0..m {
            for r in 0..block {
                let src = &n.values[(g * block + r) * cols..(g * block + r + 1) * cols];
                for c in 0..cols {
                    values[g * cols + c] += src[c];
                }
            }
        }
        let rg = self.requires(x);
        self.push(
            "block_sum_rows",
            m,
            cols,
            values,
            Op::BlockSumRows {
                x,
                block: block as u32,
            },
            rg,
        )
    }

    /// Sum over rows of `KL(softmax(a_row / T) || softmax(b_row / T))`,
    /// returned as a scalar.
    ///
    /// The backward pass uses the algebraically simplified Jacobians
    /// (`(q - p) / T` on the `b` side), so bitwise-identical inputs produce
    /// exactly zero loss and exactly zero gradients.
    pub fn kl_div_rows(&mut self, a: Id, b: Id, temperature: f64) -> Result<Id, DiffError> {
        if !(temperature > 0.0) {
            return Err(DiffError::BadArg(format!(
                "kl temperature {temperature} must be > 0"
            )));
        }
        let (rows, cols) = self.same_shape("kl_div_rows", a, b)?;
        let log_softmax = |vals: &[f64]| {
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &vals[r * cols..(r + 1) * cols];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for &v in row {
                    sum += ((v - m) / temperature).exp();
                }
                let lse = sum.ln();
                for (c, &v) in row.iter().enumerate() {
                    out[r * cols + c] = (v - m) / temperature - lse;
                }
            }
            out
        };
        let log_p = log_softmax(&self.nodes[a.idx()].values);
        let log_q = log_softmax(&self.nodes[b.idx()].values);
        let mut total = 0.0;
        for i in 0..rows * cols {
            total += log_p[i].exp() * (log_p[i] - log_q[i]);
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(
            "kl_div_rows",
            1,
            1,
            vec![total],
            Op::KlDivRows {
                a,
                b,
                temperature,
                log_p,
                log_q,
            },
            rg,
        )
    }

    /// Differentiable normalized mutual information between the channels of
    /// two `k x c` sample blocks, averaged over channels (see
    /// [`nmi_forward`] for the estimator).
    pub fn nmi_channels(
        &mut self,
        xh: Id,
        x: Id,
        bins: usize,
        bandwidth: f64,
    ) -> Result<Id, DiffError> {
        if bins < 2 {
            return Err(DiffError::BadArg(format!("nmi bins {bins} must be >= 2")));
        }
        if !(bandwidth > 0.0) {
            return Err(DiffError::BadArg(format!(
                "nmi bandwidth {bandwidth} must be > 0"
            )));
        }
        let (rows, cols) = self.same_shape("nmi_channels", xh, x)?;
        if rows < 2 {
            return Err(DiffError::BadArg("nmi needs at least 2 samples".into()));
        }
        let saved = nmi_forward(
            &self.nodes[xh.idx()].values,
            &self.nodes[x.idx()].values,
            rows,
            cols,
            bins,
            bandwidth,
        );
        let value = saved.mean_nmi;
        let rg = self.requires(xh) || self.requires(x);
        self.push(
            "nmi_channels",
            1,
            1,
            vec![value],
            Op::NmiChannels {
                xh,
                x,
                saved: Box::new(saved),
            },
            rg,
        )
    }
}

/// Forward state of the NMI estimator for one `k x c` pair.
///
/// Estimator: per channel, samples are min-max normalized to `[0, 1]`,
/// soft-assigned to `bins` Gaussian kernels centered at `(j + 0.5) / bins`
/// with absolute width `sigma = bandwidth / bins` (bandwidth is measured in
/// bin widths), and row-normalized. The joint soft histogram is
/// `P = Ah^T Ax / k`; entropies and mutual information use natural log with
/// `0 ln 0 = 0`. Channels with a sample range below `1e-12` or an entropy
/// below `1e-9` contribute `0`.
pub struct NmiSaved {
    k: usize,
    c: usize,
    bins: usize,
    sigma: f64,
    mean_nmi: f64,
    channels: Vec<Option<NmiChannel>>,
}

struct NmiChannel {
    // Soft assignment matrices, k x bins, row-normalized.
    ah: Vec<f64>,
    ax: Vec<f64>,
    // Normalized samples.
    uh: Vec<f64>,
    ux: Vec<f64>,
    ext_h: (usize, usize, f64), // (argmin, argmax, range)
    ext_x: (usize, usize, f64),
    joint: Vec<f64>, // bins x bins
    ph: Vec<f64>,
    px: Vec<f64>,
    i_val: f64,
    hh: f64,
    hx: f64,
}

const LN_FLOOR: f64 = 1e-300;

/// Min-max normalize a channel; returns None when the range is degenerate.
fn normalize_channel(
    vals: &[f64],
    k: usize,
    cols: usize,
    ch: usize,
) -> Option<(Vec<f64>, (usize, usize, f64))> {
    let mut imin = 0;
    let mut imax = 0;
    for i in 1..k {
        let v = vals[i * cols + ch];
        if v < vals[imin * cols + ch] {
            imin = i;
        }
        if v > vals[imax * cols + ch] {
            imax = i;
        }
    }
    let lo = vals[imin * cols + ch];
    let hi = vals[imax * cols + ch];
    let range = hi - lo;
    if range < 1e-12 {
        return None;
    }
    let u: Vec<f64> = (0..k).map(|i| (vals[i * cols + ch] - lo) / range).collect();
    Some((u, (imin, imax, range)))
}

/// Soft assignments of normalized samples to bin kernels (softmax over the
/// Gaussian log-weights, so underflow cannot zero a row).
fn soft_assign(u: &[f64], bins: usize, sigma: f64) -> Vec<f64> {
    let k = u.len();
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut a = vec![0.0; k * bins];
    for (i, &ui) in u.iter().enumerate() {
        let row = &mut a[i * bins..(i + 1) * bins];
        let mut best = f64::NEG_INFINITY;
        for (j, slot) in row.iter_mut().enumerate() {
            let center = (j as f64 + 0.5) / bins as f64;
            let e = -(ui - center) * (ui - center) * inv2s2;
            *slot = e;
            if e > best {
                best = e;
            }
        }
        let mut sum = 0.0;
        for slot in row.iter_mut() {
            *slot = (*slot - best).exp();
            sum += *slot;
        }
        for slot in row.iter_mut() {
            *slot /= sum;
        }
    }
    a
}

fn nmi_forward(
    xh: &[f64],
    x: &[f64],
    k: usize,
    cols: usize,
    bins: usize,
    bandwidth: f64,
) -> NmiSaved {
    let sigma = bandwidth / bins as f64;
    let mut channels = Vec::with_capacity(cols);
    let mut total = 0.0;
    for ch in 0..cols {
        let Some((uh, ext_h)) = normalize_channel(xh, k, cols, ch) else {
            channels.push(None);
            continue;
        };
        let Some((ux, ext_x)) = normalize_channel(x, k, cols, ch) else {
            channels.push(None);
            continue;
        };
        let ah = soft_assign(&uh, bins, sigma);
        let ax = soft_assign(&ux, bins, sigma);
        // Joint P = Ah^T Ax / k; marginals are its row/column sums.
        let mut joint = vec![0.0; bins * bins];
        matmul_atb_acc(&ah, k, bins, &ax, bins, &mut joint);
        for v in &mut joint {
            *v /= k as f64;
        }
        let mut ph = vec![0.0; bins];
        let mut px = vec![0.0; bins];
        for j in 0..bins {
            for l in 0..bins {
                ph[j] += joint[j * bins + l];
                px[l] += joint[j * bins + l];
            }
        }
        let hh: f64 = -ph
            .iter()
            .map(|&p| if p > 0.0 { p * p.max(LN_FLOOR).ln() } else { 0.0 })
            .sum::<f64>();
        let hx: f64 = -px
            .iter()
            .map(|&p| if p > 0.0 { p * p.max(LN_FLOOR).ln() } else { 0.0 })
            .sum::<f64>();
        if hh < 1e-9 || hx < 1e-9 {
            channels.push(None);
            continue;
        }
        let mut plogp = 0.0;
        for &p in &joint {
            if p > 0.0 {
                plogp += p * p.max(LN_FLOOR).ln();
            }
        }
        // I = sum P ln P + Hh + Hx  (equals Hh + Hx - Hjoint)
        let i_val = plogp + hh + hx;
        total += i_val / (hh * hx).sqrt();
        channels.push(Some(NmiChannel {
            ah,
            ax,
            uh,
            ux,
            ext_h,
            ext_x,
            joint,
            ph,
            px,
            i_val,
            hh,
            hx,
        }));
    }
    NmiSaved {
        k,
        c: cols,
        bins,
        sigma,
        mean_nmi: total / cols as f64,
        channels,
    }
}

/// Backward for one side (the `Ah`/`uh` side when `h_side`, else `Ax`/`ux`)
/// of one NMI channel; accumulates into `dx` (k x cols, column `ch`).
#[allow(clippy::too_many_arguments)]
fn nmi_backward_side(
    chan: &NmiChannel,
    k: usize,
    bins: usize,
    sigma: f64,
    upstream: f64,
    h_side: bool,
    dx: &mut [f64],
    cols: usize,
    ch: usize,
) {
    let (a_self, a_other, u, ext, h_other) = if h_side {
        (&chan.ah, &chan.ax, &chan.uh, chan.ext_h, chan.hx)
    } else {
        (&chan.ax, &chan.ah, &chan.ux, chan.ext_x, chan.hh)
    };
    let s = (chan.hh * chan.hx).sqrt();
    let i_val = chan.i_val;
    let kf = k as f64;

    // d nmi / d (own marginal entropy): product rule through s.
    // nmi = I / s, I = plogp + Hh + Hx, s = sqrt(Hh Hx).
    // dnmi/dH_self = 1/s - I * H_other / (2 s^3)
    let dnmi_dh = 1.0 / s - i_val * h_other / (2.0 * s * s * s);

    // Per-marginal-bin coefficients.
    // dI/dA_self(i,j) has a term sum_l A_other(i,l) (ln P_jl + 1) / k from
    // plogp (joint indexed (self_bin, other_bin)), and dH_self/dA_self(i,j)
    // = -(ln p_self_j + 1)/k feeding both I (+Hh+Hx term) and s.
    let p_self: &[f64] = if h_side { &chan.ph } else { &chan.px };
    let mut dham = vec![0.0; bins]; // d(H_self)/d p_self_j = -(ln p + 1)
    for j in 0..bins {
        dham[j] = -(p_self[j].max(LN_FLOOR).ln() + 1.0);
    }

    // G(i,j) = dnmi / dA_self(i,j)
    let mut g_mat = vec![0.0; k * bins];
    for i in 0..k {
        for j in 0..bins {
            let mut dplogp = 0.0;
            for l in 0..bins {
                let p_jl = if h_side {
                    chan.joint[j * bins + l]
                } else {
                    chan.joint[l * bins + j]
                };
                dplogp += a_other[i * bins + l] * (p_jl.max(LN_FLOOR).ln() + 1.0);
            }
            let di = dplogp / kf + dham[j] / kf; // dI/dA (plogp + own-entropy term)
            let dh = dham[j] / kf; // dH_self/dA
            g_mat[i * bins + j] = upstream * (di / s + (dnmi_dh - 1.0 / s) * dh);
        }
    }
    // Note: dI/dA includes dH_self/dA once (I = plogp + Hh + Hx); the s-path
    // contributes (dnmi_dh - 1/s) * dH extra because di/s already carried the
    // 1/s * dH part.

    // Through the row softmax: dE(i,j) = A(i,j) * (G(i,j) - sum_l G(i,l) A(i,l))
    // then through the Gaussian exponent to du_i.
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut du = vec![0.0; k];
    for i in 0..k {
        let arow = &a_self[i * bins..(i + 1) * bins];
        let grow = &g_mat[i * bins..(i + 1) * bins];
        let dot: f64 = arow.iter().zip(grow).map(|(a, g)| a * g).sum();
        let mut acc = 0.0;
        for j in 0..bins {
            let de = arow[j] * (grow[j] - dot);
            let center = (j as f64 + 0.5) / bins as f64;
            acc += de * (-(u[i] - center) * inv_s2);
        }
        du[i] = acc;
    }

    // Through min-max normalization u_i = (v_i - v_min) / range.
    let (imin, imax, range) = ext;
    let s0: f64 = du.iter().sum();
    let s1: f64 = du.iter().zip(u).map(|(d, ui)| d * ui).sum();
    for i in 0..k {
        dx[i * cols + ch] += du[i] / range;
    }
    dx[imin * cols + ch] += (s1 - s0) / range;
    dx[imax * cols + ch] -= s1 / range;
}

/// Dispatch the vector-Jacobian product of node `nid` (upstream gradient
/// `g`) into its inputs' gradient buffers.
pub(crate) fn accumulate_vjp(
    nodes: &[Node],
    nid: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    // Allocate-or-get an input gradient buffer, skipping non-differentiable
    // inputs entirely.
    macro_rules! buf {
        ($id:expr) => {{
            let i = $id.idx();
            if !nodes[i].requires_grad {
                None
            } else {
                Some(
                    grads[i]
                        .get_or_insert_with(|| vec![0.0; nodes[i].values.len()])
                        .as_mut_slice(),
                )
            }
        }};
    }

    let node = &nodes[nid];
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            if let Some(da) = buf!(a) {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if let Some(db) = buf!(b) {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = buf!(a) {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if let Some(db) = buf!(b) {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.idx()].values, &nodes[b.idx()].values);
            if let Some(da) = buf!(a) {
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
            }
            if let Some(db) = buf!(b) {
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (&nodes[a.idx()].values, &nodes[b.idx()].values);
            if let Some(da) = buf!(a) {
                for i in 0..g.len() {
                    da[i] += g[i] / bv[i];
                }
            }
            if let Some(db) = buf!(b) {
                for i in 0..g.len() {
                    db[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        Op::ScalarMul(a, c) => {
            if let Some(da) = buf!(a) {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
        }
        Op::ScalarAdd(a) => {
            if let Some(da) = buf!(a) {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Matmul(a, b) => {
            let (na, nb) = (&nodes[a.idx()], &nodes[b.idx()]);
            let (ar, ac, bc) = (na.rows, na.cols, nb.cols);
            if let Some(da) = buf!(a) {
                // dA += G . B^T
                matmul_abt_acc(g, ar, bc, &nb.values, ac, da);
            }
            if let Some(db) = buf!(b) {
                // dB += A^T . G
                matmul_atb_acc(&na.values, ar, ac, g, bc, db);
            }
        }
        Op::Transpose(a) => {
            let (rows, cols) = (node.rows, node.cols); // transposed dims
            if let Some(da) = buf!(a) {
                for r in 0..rows {
                    for c in 0..cols {
                        da[c * rows + r] += g[r * cols + c];
                    }
                }
            }
        }
        Op::ConcatRows(inputs) => {
            let cols = node.cols;
            let mut offset = 0;
            for &i in inputs {
                let len = nodes[i.idx()].values.len();
                if let Some(di) = buf!(i) {
                    for (d, &gv) in di.iter_mut().zip(&g[offset * cols..]) {
                        *d += gv;
                    }
                }
                offset += len / cols;
            }
        }
        Op::ConcatCols(inputs) => {
            let rows = node.rows;
            let total_cols = node.cols;
            let mut offset = 0;
            for &i in inputs {
                let ic = nodes[i.idx()].cols;
                if let Some(di) = buf!(i) {
                    for r in 0..rows {
                        for c in 0..ic {
                            di[r * ic + c] += g[r * total_cols + offset + c];
                        }
                    }
                }
                offset += ic;
            }
        }
        Op::Relu(a) => {
            let av = &nodes[a.idx()].values;
            if let Some(da) = buf!(a) {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
        }
        Op::Log(a) => {
            let av = &nodes[a.idx()].values;
            if let Some(da) = buf!(a) {
                for i in 0..g.len() {
                    da[i] += g[i] / av[i];
                }
            }
        }
        Op::Exp(a) => {
            if let Some(da) = buf!(a) {
                for i in 0..g.len() {
                    da[i] += g[i] * node.values[i];
                }
            }
        }
        Op::Square(a) => {
            let av = &nodes[a.idx()].values;
            if let Some(da) = buf!(a) {
                for i in 0..g.len() {
                    da[i] += g[i] * 2.0 * av[i];
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(da) = buf!(a) {
                for i in 0..g.len() {
                    da[i] += g[i] * 0.5 / node.values[i];
                }
            }
        }
        Op::MaxReduce { x, axis, argmax } => {
            let xc = nodes[x.idx()].cols;
            if let Some(dx) = buf!(x) {
                if *axis == 0 {
                    for (c, &arg) in argmax.iter().enumerate() {
                        dx[arg as usize * xc + c] += g[c];
                    }
                } else {
                    for (r, &arg) in argmax.iter().enumerate() {
                        dx[r * xc + arg as usize] += g[r];
                    }
                }
            }
        }
        Op::MeanReduce { x, axis } | Op::SumReduce { x, axis } => {
            let nx = &nodes[x.idx()];
            let (xr, xc) = (nx.rows, nx.cols);
            let scale = match &node.op {
                Op::MeanReduce { .. } => {
                    1.0 / if *axis == 0 { xr as f64 } else { xc as f64 }
                }
                _ => 1.0,
            };
            if let Some(dx) = buf!(x) {
                for r in 0..xr {
                    for c in 0..xc {
                        let gv = if *axis == 0 { g[c] } else { g[r] };
                        dx[r * xc + c] += gv * scale;
                    }
                }
            }
        }
        Op::SoftmaxRows { x, temperature } => {
            let p = &node.values;
            let cols = node.cols;
            if let Some(dx) = buf!(x) {
                for r in 0..node.rows {
                    let prow = &p[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] += prow[c] * (grow[c] - dot) / temperature;
                    }
                }
            }
        }
        Op::GatherRows { x, indices } => {
            let cols = node.cols;
            if let Some(dx) = buf!(x) {
                for (out_r, &src) in indices.iter().enumerate() {
                    let dst = &mut dx[src as usize * cols..(src as usize + 1) * cols];
                    let grow = &g[out_r * cols..(out_r + 1) * cols];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
            }
        }
        Op::BlockMaxRows { x, block, argmax } => {
            let cols = node.cols;
            let b = *block as usize;
            if let Some(dx) = buf!(x) {
                for grp in 0..node.rows {
                    for c in 0..cols {
                        let r = argmax[grp * cols + c] as usize;
                        dx[(grp * b + r) * cols + c] += g[grp * cols + c];
                    }
                }
            }
        }
        Op::BlockSumRows { x, block } => {
            let cols = node.cols;
            let b = *block as usize;
            if let Some(dx) = buf!(x) {
                for grp in 0..node.rows {
                    let grow = &g[grp * cols..(grp + 1) * cols];
                    for r in 0..b {
                        let dst = &mut dx[(grp * b + r) * cols..(grp * b + r + 1) * cols];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
            }
        }
        Op::KlDivRows {
            a,
            b,
            temperature,
            log_p,
            log_q,
        } => {
            let gu = g[0];
            let t = *temperature;
            if let Some(da) = buf!(a) {
                // Row-local: dA = p * (d - sum(p*d)) / T with d = log_p - log_q.
                let cols = nodes[a.idx()].cols;
                let rows = nodes[a.idx()].rows;
                for r in 0..rows {
                    let lp = &log_p[r * cols..(r + 1) * cols];
                    let lq = &log_q[r * cols..(r + 1) * cols];
                    let mut pd = 0.0;
                    for c in 0..cols {
                        pd += lp[c].exp() * (lp[c] - lq[c]);
                    }
                    for c in 0..cols {
                        da[r * cols + c] += gu * lp[c].exp() * ((lp[c] - lq[c]) - pd) / t;
                    }
                }
            }
            if let Some(db) = buf!(b) {
                for i in 0..log_p.len() {
                    db[i] += gu * (log_q[i].exp() - log_p[i].exp()) / t;
                }
            }
        }
        Op::NmiChannels { xh, x, saved } => {
            let gu = g[0] / saved.c as f64; // mean over channels
            let (k, bins, sigma, cols) = (saved.k, saved.bins, saved.sigma, saved.c);
            if let Some(dxh) = buf!(xh) {
                for (ch, chan) in saved.channels.iter().enumerate() {
                    if let Some(chan) = chan {
                        nmi_backward_side(chan, k, bins, sigma, gu, true, dxh, cols, ch);
                    }
                }
            }
            if let Some(dx) = buf!(x) {
                for (ch, chan) in saved.channels.iter().enumerate() {
                    if let Some(chan) = chan {
                        nmi_backward_side(chan, k, bins, sigma, gu, false, dx, cols, ch);
                    }
                }
            }
        }
    }
}
