//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A `Tape` records one expression per training step; `backward` replays it
//! in reverse, accumulating adjoints in f64. Recording is single-threaded;
//! evaluation of recorded values is plain data and can be read from anywhere.


use crate::error::{Error, Result};
use crate::math::{sinc, versinc};

use super::tensor::Tensor;

/// Handle to a tape node. Shape is carried so op builders can check
/// compatibility without touching the tape.
#[derive(Debug, Clone, Copy)]
pub struct Var {
    idx: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn index(&self) -> usize {
        self.idx
    }
}

/// Geometry of a voxel grid for the trilinear gather op. Voxels are
/// cell-centered: voxel (i,j,k) sits at min + (i+0.5)*cell.
#[derive(Debug, Clone, Copy)]
pub struct GridGeom {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub channels: usize,
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
}

impl GridGeom {
    pub fn cell(&self) -> [f64; 3] {
        [
            (self.box_max[0] - self.box_min[0]) / self.nx as f64,
            (self.box_max[1] - self.box_min[1]) / self.ny as f64,
            (self.box_max[2] - self.box_min[2]) / self.nz as f64,
        ]
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.box_min[a] && p[a] <= self.box_max[a])
    }

    fn flat(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.ny + iy) * self.nz + iz
    }
}

// Op arguments are kept even where backward ignores them (e.g. the added
// constant) so a recorded tape stays auditable in Debug output.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Source { needs_grad: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sigmoid(usize),
    Pow(usize, f64),
    Sinc(usize),
    Versinc(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    RowSum(usize),
    RowNorm(usize),
    MatMul(usize, usize),
    Transpose(usize),
    RepeatCols(usize, usize),
    BroadcastRows(usize, usize),
    SliceRows(usize, usize, usize),
    ScaleByScalar(usize, usize),
    StopGradient(usize),
    TrilinearGather { voxels: usize, coords: usize, grid: GridGeom },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. One per optimization step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `backward`. Untouched nodes read as zero.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, zeros if no adjoint reached it.
    pub fn tensor(&self, v: Var) -> Tensor {
        match &self.slots[v.idx] {
            Some(buf) => Tensor::from_vec(v.rows, v.cols, buf.clone()),
            None => Tensor::zeros(v.rows, v.cols),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots[v.idx].as_deref()
    }
}

enum Slot<'a> {
    Unused,
    Owned(Vec<f64>),
    External(&'a mut [f64]),
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value stored on tape");
        let idx = self.nodes.len();
        let (rows, cols) = value.shape();
        self.nodes.push(Node { value, op });
        Var { idx, rows, cols }
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Source { needs_grad: true })
    }

    /// Fixed input: adjoints are discarded, saving the buffer.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Source { needs_grad: false })
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_values(a, b, |x, y| x + y);
        self.push(v, Op::Add(a.idx, b.idx))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_values(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a.idx, b.idx))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_values(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a.idx, b.idx))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_values(a, b, |x, y| x / y);
        self.push(v, Op::Div(a.idx, b.idx))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.idx].value.map(|x| x * k);
        self.push(v, Op::Scale(a.idx, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.idx].value.map(|x| x + k);
        self.push(v, Op::AddScalar(a.idx, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// 1 - a, a common compositing step.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.idx].value.map(f64::exp);
        self.push(v, Op::Exp(a.idx))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a.idx].value.map(f64::ln);
        self.push(v, Op::Log(a.idx))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.idx].value.map(softplus);
        self.push(v, Op::Softplus(a.idx))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.idx].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a.idx))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let v = self.nodes[a.idx].value.map(|x| x.powf(p));
        self.push(v, Op::Pow(a.idx, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.pow(a, 2.0)
    }

    /// sin(x)/x, exact value and derivative at 0.
    pub fn sinc(&mut self, a: Var) -> Var {
        let v = self.nodes[a.idx].value.map(sinc);
        self.push(v, Op::Sinc(a.idx))
    }

    /// (1-cos(x))/x^2, exact value and derivative at 0.
    pub fn versinc(&mut self, a: Var) -> Var {
        let v = self.nodes[a.idx].value.map(versinc);
        self.push(v, Op::Versinc(a.idx))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.idx].value.map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.idx, lo, hi))
    }

    /// Full reduction to a [1,1] scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.idx].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a.idx))
    }

    /// Row-wise sum: [r,c] -> [r,1].
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.idx].value;
        let (r, c) = t.shape();
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = t.data()[i * c..(i + 1) * c].iter().sum();
        }
        self.push(Tensor::from_vec(r, 1, out), Op::RowSum(a.idx))
    }

    /// Row-wise Euclidean norm: [r,c] -> [r,1]. Zero rows get zero gradient.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.idx].value;
        let (r, c) = t.shape();
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = t.data()[i * c..(i + 1) * c]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
        }
        self.push(Tensor::from_vec(r, 1, out), Op::RowNorm(a.idx))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let av = self.nodes[a.idx].value.data();
        let bv = self.nodes[b.idx].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = av[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let t = Tensor::from_vec(m, n, out);
        self.push(t, Op::MatMul(a.idx, b.idx))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.idx].value;
        let (r, c) = t.shape();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.get(i, j);
            }
        }
        self.push(Tensor::from_vec(c, r, out), Op::Transpose(a.idx))
    }

    /// [r,1] -> [r,c] by repeating the column.
    pub fn repeat_cols(&mut self, a: Var, c: usize) -> Var {
        assert_eq!(a.cols, 1, "repeat_cols wants a column vector");
        let t = &self.nodes[a.idx].value;
        let r = t.rows();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let v = t.get(i, 0);
            out[i * c..(i + 1) * c].fill(v);
        }
        self.push(Tensor::from_vec(r, c, out), Op::RepeatCols(a.idx, c))
    }

    /// [1,c] -> [r,c] by repeating the row.
    pub fn broadcast_rows(&mut self, a: Var, r: usize) -> Var {
        assert_eq!(a.rows, 1, "broadcast_rows wants a row vector");
        let t = &self.nodes[a.idx].value;
        let c = t.cols();
        let mut out = Vec::with_capacity(r * c);
        for _ in 0..r {
            out.extend_from_slice(t.data());
        }
        self.push(Tensor::from_vec(r, c, out), Op::BroadcastRows(a.idx, r))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= a.rows, "slice_rows out of range");
        let t = &self.nodes[a.idx].value;
        let c = t.cols();
        let out = t.data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::from_vec(len, c, out), Op::SliceRows(a.idx, start, len))
    }

    /// Multiply a tensor by a [1,1] scalar variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!((s.rows, s.cols), (1, 1), "scale_by wants a scalar var");
        let sv = self.nodes[s.idx].value.item();
        let v = self.nodes[a.idx].value.map(|x| x * sv);
        self.push(v, Op::ScaleByScalar(a.idx, s.idx))
    }

    /// Identity value, zero adjoint: blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.nodes[a.idx].value.clone();
        self.push(v, Op::StopGradient(a.idx))
    }

    /// Trilinearly interpolate `voxels` ([voxel_count, channels]) at `coords`
    /// ([n,3], same units as the grid box). Rows outside the box come back
    /// zero and receive no gradient. Differentiable in both inputs.
    pub fn trilinear_gather(&mut self, voxels: Var, coords: Var, grid: GridGeom) -> Var {
        assert_eq!(voxels.rows, grid.voxel_count(), "voxel count mismatch");
        assert_eq!(voxels.cols, grid.channels, "voxel channel mismatch");
        assert_eq!(coords.cols, 3, "coords must be [n,3]");
        let n = coords.rows;
        let vox = self.nodes[voxels.idx].value.data();
        let pts = self.nodes[coords.idx].value.data();
        let ch = grid.channels;
        let mut out = vec![0.0; n * ch];
        for i in 0..n {
            let p = [pts[i * 3], pts[i * 3 + 1], pts[i * 3 + 2]];
            trilinear_sample(&grid, vox, p, &mut out[i * ch..i * ch + ch]);
        }
        let t = Tensor::from_vec(n, ch, out);
        self.push(t, Op::TrilinearGather { voxels: voxels.idx, coords: coords.idx, grid })
    }

    fn binary_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(
            (a.rows, a.cols),
            (b.rows, b.cols),
            "elementwise op shape mismatch"
        );
        self.nodes[a.idx].value.zip(&self.nodes[b.idx].value, f)
    }

    /// Adjoints of every node reachable from `output`, which must be scalar.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut slots: Vec<Slot> = (0..self.nodes.len()).map(|_| Slot::Unused).collect();
        self.backward_pass(output, &mut slots, false)?;
        let out = slots
            .into_iter()
            .map(|s| match s {
                Slot::Owned(v) => Some(v),
                _ => None,
            })
            .collect();
        Ok(Gradients { slots: out })
    }

    /// Like `backward`, but adjoints of the listed vars are accumulated
    /// directly into caller-owned buffers (which are NOT zeroed here), so a
    /// sequence of tapes can share one gradient accumulator.
    pub fn backward_into(&self, output: Var, sinks: &mut [(Var, &mut [f64])]) -> Result<()> {
        let mut slots: Vec<Slot> = (0..self.nodes.len()).map(|_| Slot::Unused).collect();
        for (var, buf) in sinks.iter_mut() {
            assert_eq!(var.rows * var.cols, buf.len(), "sink buffer size mismatch");
            slots[var.idx] = Slot::External(buf);
        }
        self.backward_pass(output, &mut slots, true)
    }

    fn backward_pass(&self, output: Var, slots: &mut [Slot], has_external: bool) -> Result<()> {
        if output.rows * output.cols != 1 {
            return Err(Error::usage("backward requires a scalar output"));
        }
        // Seed d(out)/d(out) = 1.
        add_into(slots, output.idx, 1, &|buf| buf[0] += 1.0);
        for idx in (0..=output.idx).rev() {
            // Sources and stop-gradients propagate nothing; leave their
            // accumulated slot (possibly external) in place.
            if matches!(
                self.nodes[idx].op,
                Op::Source { .. } | Op::StopGradient(_)
            ) {
                continue;
            }
            // Grads of interior nodes are finished once visited; take the
            // buffer out so memory is released as the pass walks down.
            let slot = std::mem::replace(&mut slots[idx], Slot::Unused);
            match slot {
                Slot::Unused => continue,
                Slot::Owned(g) => self.apply_adjoint(idx, &g, slots),
                Slot::External(g) => {
                    debug_assert!(has_external);
                    self.apply_adjoint(idx, g, slots);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn apply_adjoint(&self, idx: usize, g: &[f64], slots: &mut [Slot]) {
        let node = &self.nodes[idx];
        let len_of = |i: usize| self.nodes[i].value.len();
        match &node.op {
            Op::Source { .. } | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                add_into(slots, *a, len_of(*a), &|buf| axpy(buf, g, 1.0));
                if self.wants_grad(*b) {
                    add_into(slots, *b, len_of(*b), &|buf| axpy(buf, g, 1.0));
                }
            }
            Op::Sub(a, b) => {
                add_into(slots, *a, len_of(*a), &|buf| axpy(buf, g, 1.0));
                if self.wants_grad(*b) {
                    add_into(slots, *b, len_of(*b), &|buf| axpy(buf, g, -1.0));
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if self.wants_grad(*a) {
                    add_into(slots, *a, len_of(*a), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * bv[i];
                        }
                    });
                }
                if self.wants_grad(*b) {
                    add_into(slots, *b, len_of(*b), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if self.wants_grad(*a) {
                    add_into(slots, *a, len_of(*a), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] / bv[i];
                        }
                    });
                }
                if self.wants_grad(*b) {
                    add_into(slots, *b, len_of(*b), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                        }
                    });
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                add_into(slots, *a, len_of(*a), &|buf| axpy(buf, g, k));
            }
            Op::AddScalar(a, _) => {
                add_into(slots, *a, len_of(*a), &|buf| axpy(buf, g, 1.0));
            }
            Op::Exp(a) => {
                let out = node.value.data();
                add_into(slots, *a, len_of(*a), &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * out[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = self.nodes[*a].value.data();
                add_into(slots, *a, len_of(*a), &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / av[i];
                    }
                });
            }
            Op::Softplus(a) => {
                let av = self.nodes[*a].value.data();
                add_into(slots, *a, len_of(*a), &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * sigmoid(av[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                add_into(slots, *a, len_of(*a), &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Pow(a, p) => {
                let p = *p;
                let av = self.nodes[*a].value.data();
                add_into(slots, *a, len_of(*a), &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * p * av[i].powf(p - 1.0);
                    }
                });
            }
            Op::Sinc(a) => {
                let av = self.nodes[*a].value.data();
                add_into(slots, *a, len_of(*a), &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * dsinc(av[i]);
                    }
                });
            }
            Op::Versinc(a) => {
                let av = self.nodes[*a].value.data();
                add_into(slots, *a, len_of(*a), &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * dversinc(av[i]);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let av = self.nodes[*a].value.data();
                add_into(slots, *a, len_of(*a), &|buf| {
                    for i in 0..buf.len() {
                        if av[i] > lo && av[i] < hi {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g[0];
                add_into(slots, *a, len_of(*a), &|buf| {
                    for v in buf.iter_mut() {
                        *v += gs;
                    }
                });
            }
            Op::RowSum(a) => {
                let c = self.nodes[*a].value.cols();
                add_into(slots, *a, len_of(*a), &|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        for v in &mut buf[i * c..(i + 1) * c] {
                            *v += gi;
                        }
                    }
                });
            }
            Op::RowNorm(a) => {
                let av = self.nodes[*a].value.data();
                let out = node.value.data();
                let c = self.nodes[*a].value.cols();
                add_into(slots, *a, len_of(*a), &|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        if out[i] == 0.0 {
                            continue;
                        }
                        let s = gi / out[i];
                        for j in 0..c {
                            buf[i * c + j] += s * av[i * c + j];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.shape();
                let n = self.nodes[*b].value.cols();
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if self.wants_grad(*a) {
                    // dA = G B^T
                    add_into(slots, *a, m * k, &|buf| {
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * bv[kk * n + j];
                                }
                                buf[i * k + kk] += acc;
                            }
                        }
                    });
                }
                if self.wants_grad(*b) {
                    // dB = A^T G
                    add_into(slots, *b, k * n, &|buf| {
                        for kk in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += av[i * k + kk] * g[i * n + j];
                                }
                                buf[kk * n + j] += acc;
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[*a].value.shape();
                add_into(slots, *a, r * c, &|buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::RepeatCols(a, c) => {
                let c = *c;
                let r = self.nodes[*a].value.rows();
                add_into(slots, *a, r, &|buf| {
                    for i in 0..r {
                        buf[i] += g[i * c..(i + 1) * c].iter().sum::<f64>();
                    }
                });
            }
            Op::BroadcastRows(a, r) => {
                let r = *r;
                let c = self.nodes[*a].value.cols();
                add_into(slots, *a, c, &|buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::SliceRows(a, start, len) => {
                let c = self.nodes[*a].value.cols();
                let (start, len) = (*start, *len);
                add_into(slots, *a, len_of(*a), &|buf| {
                    axpy(&mut buf[start * c..(start + len) * c], &g[..len * c], 1.0);
                });
            }
            Op::ScaleByScalar(a, s) => {
                let sv = self.nodes[*s].value.item();
                let av = self.nodes[*a].value.data();
                if self.wants_grad(*a) {
                    add_into(slots, *a, len_of(*a), &|buf| axpy(buf, g, sv));
                }
                if self.wants_grad(*s) {
                    let dot: f64 = g.iter().zip(av.iter()).map(|(x, y)| x * y).sum();
                    add_into(slots, *s, 1, &|buf| buf[0] += dot);
                }
            }
            Op::TrilinearGather { voxels, coords, grid } => {
                let pts = self.nodes[*coords].value.data();
                let vox = self.nodes[*voxels].value.data();
                let n = self.nodes[*coords].value.rows();
                let ch = grid.channels;
                let cell = grid.cell();
                let grad_vox = self.wants_grad(*voxels);
                let grad_pts = self.wants_grad(*coords);
                if grad_vox {
                    add_into(slots, *voxels, len_of(*voxels), &|buf| {
                        for i in 0..n {
                            let p = [pts[i * 3], pts[i * 3 + 1], pts[i * 3 + 2]];
                            if !grid.contains(p) {
                                continue;
                            }
                            let cw = CellWeights::locate(grid, p);
                            for (w, flat) in cw.corners(grid) {
                                for c in 0..ch {
                                    buf[flat * ch + c] += w * g[i * ch + c];
                                }
                            }
                        }
                    });
                }
                if grad_pts {
                    add_into(slots, *coords, n * 3, &|buf| {
                        for i in 0..n {
                            let p = [pts[i * 3], pts[i * 3 + 1], pts[i * 3 + 2]];
                            if !grid.contains(p) {
                                continue;
                            }
                            let cw = CellWeights::locate(grid, p);
                            for axis in 0..3 {
                                if !cw.interior[axis] {
                                    continue;
                                }
                                let mut acc = 0.0;
                                for (dw, flat) in cw.corner_weight_derivs(grid, axis) {
                                    for c in 0..ch {
                                        acc += dw * vox[flat * ch + c] * g[i * ch + c];
                                    }
                                }
                                buf[i * 3 + axis] += acc / cell[axis];
                            }
                        }
                    });
                }
            }
        }
    }

    fn wants_grad(&self, idx: usize) -> bool {
        !matches!(self.nodes[idx].op, Op::Source { needs_grad: false })
    }
}

/// Fractional cell location for one query point.
struct CellWeights {
    base: [usize; 3],
    frac: [f64; 3],
    /// Per axis: query falls strictly inside the voxel-center lattice, so the
    /// interpolant is locally linear there (edge margins are held constant).
    interior: [bool; 3],
}

impl CellWeights {
    fn locate(grid: &GridGeom, p: [f64; 3]) -> CellWeights {
        let cell = grid.cell();
        let dims = [grid.nx, grid.ny, grid.nz];
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut interior = [false; 3];
        for a in 0..3 {
            let g = (p[a] - grid.box_min[a]) / cell[a] - 0.5;
            let i0 = (g.floor() as isize).clamp(0, dims[a] as isize - 2) as usize;
            let f = g - i0 as f64;
            base[a] = i0;
            frac[a] = f.clamp(0.0, 1.0);
            interior[a] = (0.0..=1.0).contains(&f);
        }
        CellWeights { base, frac, interior }
    }

    fn corners(&self, grid: &GridGeom) -> [(f64, usize); 8] {
        let [fx, fy, fz] = self.frac;
        let [ix, iy, iz] = self.base;
        let mut out = [(0.0, 0usize); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let (cx, cy, cz) = (k >> 2 & 1, k >> 1 & 1, k & 1);
            let w = pick(fx, cx) * pick(fy, cy) * pick(fz, cz);
            *slot = (w, grid.flat(ix + cx, iy + cy, iz + cz));
        }
        out
    }

    /// d(weight)/d(frac[axis]) for each corner.
    fn corner_weight_derivs(&self, grid: &GridGeom, axis: usize) -> [(f64, usize); 8] {
        let [fx, fy, fz] = self.frac;
        let [ix, iy, iz] = self.base;
        let mut out = [(0.0, 0usize); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let c = [k >> 2 & 1, k >> 1 & 1, k & 1];
            let f = [fx, fy, fz];
            let mut dw = 1.0;
            for a in 0..3 {
                if a == axis {
                    dw *= if c[a] == 1 { 1.0 } else { -1.0 };
                } else {
                    dw *= pick(f[a], c[a]);
                }
            }
            *slot = (dw, grid.flat(ix + c[0], iy + c[1], iz + c[2]));
        }
        out
    }
}

fn pick(f: f64, c: usize) -> f64 {
    if c == 1 {
        f
    } else {
        1.0 - f
    }
}

/// Trilinear interpolation of a cell-centered grid at one point, writing all
/// channels into `out` (zeroing it first). Out-of-box points read as zero.
/// Shared by the gather op's forward pass and the plain field query.
pub fn trilinear_sample(grid: &GridGeom, voxels: &[f64], p: [f64; 3], out: &mut [f64]) {
    let ch = grid.channels;
    debug_assert_eq!(out.len(), ch);
    out.fill(0.0);
    if !grid.contains(p) {
        return;
    }
    let cw = CellWeights::locate(grid, p);
    for (w, flat) in cw.corners(grid) {
        let src = &voxels[flat * ch..flat * ch + ch];
        for c in 0..ch {
            out[c] += w * src[c];
        }
    }
}

fn add_into(slots: &mut [Slot], idx: usize, len: usize, add: &dyn Fn(&mut [f64])) {
    match &mut slots[idx] {
        Slot::Unused => {
            let mut buf = vec![0.0; len];
            add(&mut buf);
            slots[idx] = Slot::Owned(buf);
        }
        Slot::Owned(buf) => add(buf),
        Slot::External(buf) => add(buf),
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += k * s;
    }
}

pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow.
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dsinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        -x / 3.0 + x * x2 / 30.0
    } else {
        (x * x.cos() - x.sin()) / (x * x)
    }
}

fn dversinc(x: f64) -> f64 {
    // d/dx [0.5 sinc(x/2)^2], stable for all x.
    0.5 * sinc(0.5 * x) * dsinc(0.5 * x)
}

/// Shared gradient accumulator keyed by leaf, used across per-patch tapes.
pub struct GradBuffer {
    pub data: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(len: usize) -> Self {
        GradBuffer { data: vec![0.0; len] }
    }

    pub fn reset(&mut self) {
        self.data.fill(0.0);
    }
}
