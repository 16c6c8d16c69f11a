//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] is rebuilt for every training step. Ops append nodes and
//! return [`Tensor`] handles; `backward` walks the tape in reverse and
//! accumulates gradients for every node that requires them. All data is
//! `f32` and dynamically shaped; single-threaded by construction so a
//! fixed seed reproduces runs exactly.

use ndarray::{s, Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

use crate::error::{DismoError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, f32),
    AddScalar(usize, #[allow(dead_code)] f32),
    /// [M,K] x [K,N]
    Matmul(usize, usize),
    /// x [B,N] + bias [N]
    AddRow(usize, usize),
    /// x [B,N] * v [N]
    MulRow(usize, usize),
    Exp(usize),
    LeakyRelu(usize, f32),
    Tanh(usize),
    Abs(usize),
    Square(usize),
    Softplus(usize),
    MeanAll(usize),
    SumAll(usize),
    Reshape(usize),
    /// x [B,Ci,H,W], w [Co,Ci,k,k], b [Co]; square kernel, pad = k/2.
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    UpsampleNearest2(usize),
    /// Normalize each row of [B,D] to zero mean, unit population variance.
    NormRows { x: usize, eps: f32 },
    /// Normalize each (b, c) spatial slice of [B,C,H,W].
    NormChannels { x: usize, eps: f32 },
    /// Scale each row of [B,D] to unit L2 norm (x / (||x|| + eps)).
    L2NormRows { x: usize, eps: f32 },
    /// table [N,D] gathered at `indices` -> [B,D].
    GatherRows { table: usize, indices: Vec<usize> },
    /// x [B,C,H,W] * s [B,C] broadcast over H,W.
    MulChannels(usize, usize),
    AddChannels(usize, usize),
    /// log sum exp over each row of [B,N] -> [B].
    LogSumExpRows(usize),
    /// pick x[b, idx[b]] -> [B].
    PickCols { x: usize, idx: Vec<usize> },
    /// concat [B,Da] and [B,Db] along axis 1.
    ConcatCols(usize, usize),
    /// x [B,C,H,W] averaged over the spatial axes -> [B,C].
    MeanSpatial(usize),
    /// a [M,K] x b [N,K]^T -> [M,N].
    MatmulNT(usize, usize),
    /// stop-gradient view of a node.
    Detach(#[allow(dead_code)] usize),
}

struct Node {
    data: ArrayD<f32>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by tensor handle.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f32>>>,
}

impl Gradients {
    pub fn get(&self, t: Tensor) -> Option<&ArrayD<f32>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: Tensor) -> Option<ArrayD<f32>> {
        self.grads.get_mut(t.id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, data: ArrayD<f32>, op: Op, requires_grad: bool) -> Tensor {
        self.nodes.push(Node {
            data,
            op,
            requires_grad,
        });
        Tensor {
            id: self.nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, data: ArrayD<f32>, requires_grad: bool) -> Tensor {
        self.push(data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, data: ArrayD<f32>) -> Tensor {
        self.leaf(data, false)
    }

    pub fn scalar(&mut self, v: f32) -> Tensor {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn data(&self, t: Tensor) -> &ArrayD<f32> {
        &self.nodes[t.id].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.id].data.shape()
    }

    pub fn value(&self, t: Tensor) -> f32 {
        let d = &self.nodes[t.id].data;
        debug_assert_eq!(d.len(), 1);
        d.iter().next().copied().unwrap()
    }

    fn same_shape(&self, a: Tensor, b: Tensor) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DismoError::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b)?;
        let data = &self.nodes[a.id].data + &self.nodes[b.id].data;
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(data, Op::Add(a.id, b.id), rg))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b)?;
        let data = &self.nodes[a.id].data - &self.nodes[b.id].data;
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(data, Op::Sub(a.id, b.id), rg))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b)?;
        let data = &self.nodes[a.id].data * &self.nodes[b.id].data;
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(data, Op::Mul(a.id, b.id), rg))
    }

    pub fn mul_scalar(&mut self, a: Tensor, v: f32) -> Tensor {
        let data = &self.nodes[a.id].data * v;
        let rg = self.rg(&[a.id]);
        self.push(data, Op::MulScalar(a.id, v), rg)
    }

    pub fn add_scalar(&mut self, a: Tensor, v: f32) -> Tensor {
        let data = &self.nodes[a.id].data + v;
        let rg = self.rg(&[a.id]);
        self.push(data, Op::AddScalar(a.id, v), rg)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let av = as2(&self.nodes[a.id].data)?;
        let bv = as2(&self.nodes[b.id].data)?;
        if av.ncols() != bv.nrows() {
            return Err(DismoError::Shape(format!(
                "matmul inner dims: {} vs {}",
                av.ncols(),
                bv.nrows()
            )));
        }
        let data = av.dot(&bv).into_dyn();
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(data, Op::Matmul(a.id, b.id), rg))
    }

    pub fn add_row(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let xv = as2(&self.nodes[x.id].data)?;
        let bv = as1(&self.nodes[bias.id].data)?;
        if xv.ncols() != bv.len() {
            return Err(DismoError::Shape(format!(
                "bias width {} vs {}",
                bv.len(),
                xv.ncols()
            )));
        }
        let data = (&xv + &bv).into_dyn();
        let rg = self.rg(&[x.id, bias.id]);
        Ok(self.push(data, Op::AddRow(x.id, bias.id), rg))
    }

    pub fn mul_row(&mut self, x: Tensor, v: Tensor) -> Result<Tensor> {
        let xv = as2(&self.nodes[x.id].data)?;
        let vv = as1(&self.nodes[v.id].data)?;
        if xv.ncols() != vv.len() {
            return Err(DismoError::Shape(format!(
                "mul_row width {} vs {}",
                vv.len(),
                xv.ncols()
            )));
        }
        let data = (&xv * &vv).into_dyn();
        let rg = self.rg(&[x.id, v.id]);
        Ok(self.push(data, Op::MulRow(x.id, v.id), rg))
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let data = self.nodes[a.id].data.mapv(f32::exp);
        let rg = self.rg(&[a.id]);
        self.push(data, Op::Exp(a.id), rg)
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f32) -> Tensor {
        let data = self.nodes[a.id]
            .data
            .mapv(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.rg(&[a.id]);
        self.push(data, Op::LeakyRelu(a.id, slope), rg)
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let data = self.nodes[a.id].data.mapv(f32::tanh);
        let rg = self.rg(&[a.id]);
        self.push(data, Op::Tanh(a.id), rg)
    }

    pub fn abs(&mut self, a: Tensor) -> Tensor {
        let data = self.nodes[a.id].data.mapv(f32::abs);
        let rg = self.rg(&[a.id]);
        self.push(data, Op::Abs(a.id), rg)
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        let data = self.nodes[a.id].data.mapv(|v| v * v);
        let rg = self.rg(&[a.id]);
        self.push(data, Op::Square(a.id), rg)
    }

    /// Numerically stable log(1 + exp(x)).
    pub fn softplus(&mut self, a: Tensor) -> Tensor {
        let data = self.nodes[a.id]
            .data
            .mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        let rg = self.rg(&[a.id]);
        self.push(data, Op::Softplus(a.id), rg)
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let m = self.nodes[a.id].data.mean().unwrap_or(0.0);
        let rg = self.rg(&[a.id]);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::MeanAll(a.id), rg)
    }

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let m = self.nodes[a.id].data.sum();
        let rg = self.rg(&[a.id]);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::SumAll(a.id), rg)
    }

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        let data = self.nodes[a.id]
            .data
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| DismoError::Shape(format!("reshape: {e}")))?;
        let rg = self.rg(&[a.id]);
        Ok(self.push(data, Op::Reshape(a.id), rg))
    }

    pub fn detach(&mut self, a: Tensor) -> Tensor {
        let data = self.nodes[a.id].data.clone();
        self.push(data, Op::Detach(a.id), false)
    }

    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Tensor, stride: usize) -> Result<Tensor> {
        let xv = as4(&self.nodes[x.id].data)?;
        let wv = as4(&self.nodes[w.id].data)?;
        let bv = as1(&self.nodes[b.id].data)?;
        let (co, ci, kh, kw) = (
            wv.shape()[0],
            wv.shape()[1],
            wv.shape()[2],
            wv.shape()[3],
        );
        if kh != kw {
            return Err(DismoError::Shape("conv kernel must be square".into()));
        }
        if xv.shape()[1] != ci || bv.len() != co {
            return Err(DismoError::Shape(format!(
                "conv2d channels: x has {}, w expects {}, bias {}",
                xv.shape()[1],
                ci,
                bv.len()
            )));
        }
        let out = conv2d_forward(&xv, &wv, &bv, stride);
        let rg = self.rg(&[x.id, w.id, b.id]);
        Ok(self.push(
            out.into_dyn(),
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.id,
                stride,
            },
            rg,
        ))
    }

    pub fn upsample_nearest2(&mut self, x: Tensor) -> Result<Tensor> {
        let xv = as4(&self.nodes[x.id].data)?;
        let (b, c, h, w) = dims4(&xv);
        let mut out = Array4::<f32>::zeros((b, c, h * 2, w * 2));
        for bi in 0..b {
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        let v = xv[[bi, ci, yi, xi]];
                        out[[bi, ci, 2 * yi, 2 * xi]] = v;
                        out[[bi, ci, 2 * yi + 1, 2 * xi]] = v;
                        out[[bi, ci, 2 * yi, 2 * xi + 1]] = v;
                        out[[bi, ci, 2 * yi + 1, 2 * xi + 1]] = v;
                    }
                }
            }
        }
        let rg = self.rg(&[x.id]);
        Ok(self.push(out.into_dyn(), Op::UpsampleNearest2(x.id), rg))
    }

    /// Per-row normalization of [B,D] to zero mean / unit population variance.
    pub fn norm_rows(&mut self, x: Tensor, eps: f32) -> Result<Tensor> {
        let xv = as2(&self.nodes[x.id].data)?;
        if xv.ncols() < 2 {
            return Err(DismoError::Invalid(
                "instance normalization needs at least 2 elements per row".into(),
            ));
        }
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let m = row.mean().unwrap();
            row -= m;
            let var = row.mapv(|v| v * v).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            row *= inv;
        }
        let rg = self.rg(&[x.id]);
        Ok(self.push(out.into_dyn(), Op::NormRows { x: x.id, eps }, rg))
    }

    /// Per-(instance, channel) spatial normalization of [B,C,H,W].
    pub fn norm_channels(&mut self, x: Tensor, eps: f32) -> Result<Tensor> {
        let xv = as4(&self.nodes[x.id].data)?;
        let (b, c, h, w) = dims4(&xv);
        if h * w < 2 {
            return Err(DismoError::Invalid(
                "spatial instance normalization needs spatial extent >= 2".into(),
            ));
        }
        let mut out = xv.to_owned();
        for bi in 0..b {
            for ci in 0..c {
                let mut sl = out.slice_mut(s![bi, ci, .., ..]);
                let m = sl.mean().unwrap();
                sl -= m;
                let var = sl.mapv(|v| v * v).mean().unwrap();
                let inv = 1.0 / (var + eps).sqrt();
                sl *= inv;
            }
        }
        let rg = self.rg(&[x.id]);
        Ok(self.push(out.into_dyn(), Op::NormChannels { x: x.id, eps }, rg))
    }

    /// Scale each row of [B,D] by 1 / (||row|| + eps).
    pub fn l2_norm_rows(&mut self, x: Tensor, eps: f32) -> Result<Tensor> {
        let xv = as2(&self.nodes[x.id].data)?;
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let n = row.mapv(|v| v * v).sum().sqrt();
            let inv = 1.0 / (n + eps);
            row *= inv;
        }
        let rg = self.rg(&[x.id]);
        Ok(self.push(out.into_dyn(), Op::L2NormRows { x: x.id, eps }, rg))
    }

    pub fn gather_rows(&mut self, table: Tensor, indices: &[usize]) -> Result<Tensor> {
        let tv = as2(&self.nodes[table.id].data)?;
        let n = tv.nrows();
        for &i in indices {
            if i >= n {
                return Err(DismoError::Invalid(format!(
                    "index {i} out of range for table of {n} rows"
                )));
            }
        }
        let mut out = Array2::<f32>::zeros((indices.len(), tv.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(i));
        }
        let rg = self.rg(&[table.id]);
        Ok(self.push(
            out.into_dyn(),
            Op::GatherRows {
                table: table.id,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn mul_channels(&mut self, x: Tensor, sc: Tensor) -> Result<Tensor> {
        let xv = as4(&self.nodes[x.id].data)?;
        let sv = as2(&self.nodes[sc.id].data)?;
        check_channels(&xv, &sv)?;
        let mut out = xv.to_owned();
        let (b, c, _, _) = dims4(&xv);
        for bi in 0..b {
            for ci in 0..c {
                let mut sl = out.slice_mut(s![bi, ci, .., ..]);
                sl *= sv[[bi, ci]];
            }
        }
        let rg = self.rg(&[x.id, sc.id]);
        Ok(self.push(out.into_dyn(), Op::MulChannels(x.id, sc.id), rg))
    }

    pub fn add_channels(&mut self, x: Tensor, sc: Tensor) -> Result<Tensor> {
        let xv = as4(&self.nodes[x.id].data)?;
        let sv = as2(&self.nodes[sc.id].data)?;
        check_channels(&xv, &sv)?;
        let mut out = xv.to_owned();
        let (b, c, _, _) = dims4(&xv);
        for bi in 0..b {
            for ci in 0..c {
                let mut sl = out.slice_mut(s![bi, ci, .., ..]);
                sl += sv[[bi, ci]];
            }
        }
        let rg = self.rg(&[x.id, sc.id]);
        Ok(self.push(out.into_dyn(), Op::AddChannels(x.id, sc.id), rg))
    }

    pub fn logsumexp_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let xv = as2(&self.nodes[x.id].data)?;
        let mut out = Array1::<f32>::zeros(xv.nrows());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let s: f32 = row.iter().map(|&v| (v - mx).exp()).sum();
            out[r] = mx + s.ln();
        }
        let rg = self.rg(&[x.id]);
        Ok(self.push(out.into_dyn(), Op::LogSumExpRows(x.id), rg))
    }

    pub fn pick_cols(&mut self, x: Tensor, idx: &[usize]) -> Result<Tensor> {
        let xv = as2(&self.nodes[x.id].data)?;
        if idx.len() != xv.nrows() {
            return Err(DismoError::Shape(
                "pick_cols: one index per row required".into(),
            ));
        }
        let mut out = Array1::<f32>::zeros(xv.nrows());
        for (r, &c) in idx.iter().enumerate() {
            if c >= xv.ncols() {
                return Err(DismoError::Invalid(format!("column {c} out of range")));
            }
            out[r] = xv[[r, c]];
        }
        let rg = self.rg(&[x.id]);
        Ok(self.push(
            out.into_dyn(),
            Op::PickCols {
                x: x.id,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let av = as2(&self.nodes[a.id].data)?;
        let bv = as2(&self.nodes[b.id].data)?;
        if av.nrows() != bv.nrows() {
            return Err(DismoError::Shape("concat_cols row mismatch".into()));
        }
        let out = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .map_err(|e| DismoError::Shape(format!("concat: {e}")))?;
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(out.into_dyn(), Op::ConcatCols(a.id, b.id), rg))
    }

    pub fn mean_spatial(&mut self, x: Tensor) -> Result<Tensor> {
        let xv = as4(&self.nodes[x.id].data)?;
        let (b, c, h, w) = dims4(&xv);
        let mut out = Array2::<f32>::zeros((b, c));
        let denom = (h * w) as f32;
        for bi in 0..b {
            for ci in 0..c {
                out[[bi, ci]] = xv.slice(s![bi, ci, .., ..]).sum() / denom;
            }
        }
        let rg = self.rg(&[x.id]);
        Ok(self.push(out.into_dyn(), Op::MeanSpatial(x.id), rg))
    }

    /// a [M,K] times b [N,K] transposed -> [M,N].
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let av = as2(&self.nodes[a.id].data)?;
        let bv = as2(&self.nodes[b.id].data)?;
        if av.ncols() != bv.ncols() {
            return Err(DismoError::Shape(format!(
                "matmul_nt: inner dims {} vs {}",
                av.ncols(),
                bv.ncols()
            )));
        }
        let out = av.dot(&bv.t());
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(out.into_dyn(), Op::MatmulNT(a.id, b.id), rg))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        if self.nodes[loss.id].data.len() != 1 {
            return Err(DismoError::Invalid(
                "backward requires a scalar loss".into(),
            ));
        }
        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(ArrayD::from_elem(
            self.nodes[loss.id].data.raw_dim(),
            1.0,
        ));
        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                // still record for leaves that asked for it
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &ArrayD<f32>,
        grads: &mut [Option<ArrayD<f32>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g * -1.0);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * &self.nodes[*b].data);
                accumulate(grads, *b, g * &self.nodes[*a].data);
            }
            Op::MulScalar(a, v) => accumulate(grads, *a, g * *v),
            Op::AddScalar(a, _) => accumulate(grads, *a, g.clone()),
            Op::Matmul(a, b) => {
                let gv = as2(g)?;
                let av = as2(&self.nodes[*a].data)?;
                let bv = as2(&self.nodes[*b].data)?;
                accumulate(grads, *a, gv.dot(&bv.t()).into_dyn());
                accumulate(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::AddRow(x, bias) => {
                accumulate(grads, *x, g.clone());
                let gv = as2(g)?;
                accumulate(grads, *bias, gv.sum_axis(Axis(0)).into_dyn());
            }
            Op::MulRow(x, v) => {
                let gv = as2(g)?;
                let vv = as1(&self.nodes[*v].data)?;
                let xv = as2(&self.nodes[*x].data)?;
                accumulate(grads, *x, (&gv * &vv).into_dyn());
                accumulate(grads, *v, (&gv * &xv).sum_axis(Axis(0)).into_dyn());
            }
            Op::Exp(a) => {
                let y = &node.data;
                let mut gx = g.clone();
                gx.zip_mut_with(y, |gv, &yv| *gv *= yv);
                accumulate(grads, *a, gx);
            }
            Op::LeakyRelu(a, slope) => {
                let xin = &self.nodes[*a].data;
                let mut gx = g.clone();
                gx.zip_mut_with(xin, |gv, &xv| {
                    if xv < 0.0 {
                        *gv *= slope;
                    }
                });
                accumulate(grads, *a, gx);
            }
            Op::Tanh(a) => {
                let y = &node.data;
                let mut gx = g.clone();
                gx.zip_mut_with(y, |gv, &yv| *gv *= 1.0 - yv * yv);
                accumulate(grads, *a, gx);
            }
            Op::Abs(a) => {
                let xin = &self.nodes[*a].data;
                let mut gx = g.clone();
                gx.zip_mut_with(xin, |gv, &xv| {
                    if xv < 0.0 {
                        *gv = -*gv;
                    } else if xv == 0.0 {
                        *gv = 0.0;
                    }
                });
                accumulate(grads, *a, gx);
            }
            Op::Square(a) => {
                let xin = &self.nodes[*a].data;
                let mut gx = g.clone();
                gx.zip_mut_with(xin, |gv, &xv| *gv *= 2.0 * xv);
                accumulate(grads, *a, gx);
            }
            Op::Softplus(a) => {
                let xin = &self.nodes[*a].data;
                let mut gx = g.clone();
                gx.zip_mut_with(xin, |gv, &xv| *gv *= sigmoid(xv));
                accumulate(grads, *a, gx);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].data.len() as f32;
                let gs = g.iter().next().copied().unwrap();
                accumulate(
                    grads,
                    *a,
                    ArrayD::from_elem(self.nodes[*a].data.raw_dim(), gs / n),
                );
            }
            Op::SumAll(a) => {
                let gs = g.iter().next().copied().unwrap();
                accumulate(
                    grads,
                    *a,
                    ArrayD::from_elem(self.nodes[*a].data.raw_dim(), gs),
                );
            }
            Op::Reshape(a) => {
                let gx = g
                    .clone()
                    .into_shape_with_order(self.nodes[*a].data.raw_dim())
                    .expect("reshape backward");
                accumulate(grads, *a, gx);
            }
            Op::Conv2d { x, w, b, stride } => {
                let xv = as4(&self.nodes[*x].data)?;
                let wv = as4(&self.nodes[*w].data)?;
                let gv = as4(g)?;
                let (gx, gw, gb) = conv2d_backward(&xv, &wv, &gv, *stride);
                accumulate(grads, *x, gx.into_dyn());
                accumulate(grads, *w, gw.into_dyn());
                accumulate(grads, *b, gb.into_dyn());
            }
            Op::UpsampleNearest2(x) => {
                let gv = as4(g)?;
                let (b, c, h2, w2) = dims4(&gv);
                let (h, w) = (h2 / 2, w2 / 2);
                let mut gx = Array4::<f32>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for yi in 0..h {
                            for xi in 0..w {
                                gx[[bi, ci, yi, xi]] = gv[[bi, ci, 2 * yi, 2 * xi]]
                                    + gv[[bi, ci, 2 * yi + 1, 2 * xi]]
                                    + gv[[bi, ci, 2 * yi, 2 * xi + 1]]
                                    + gv[[bi, ci, 2 * yi + 1, 2 * xi + 1]];
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx.into_dyn());
            }
            Op::NormRows { x, eps } => {
                let xv = as2(&self.nodes[*x].data)?;
                let gv = as2(g)?;
                let mut gx = Array2::<f32>::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let grow = gv.row(r);
                    let gr = norm_backward_1d(&row.to_owned(), &grow.to_owned(), *eps);
                    gx.row_mut(r).assign(&gr);
                }
                accumulate(grads, *x, gx.into_dyn());
            }
            Op::NormChannels { x, eps } => {
                let xv = as4(&self.nodes[*x].data)?;
                let gv = as4(g)?;
                let (b, c, h, w) = dims4(&xv);
                let mut gx = Array4::<f32>::zeros(xv.raw_dim());
                for bi in 0..b {
                    for ci in 0..c {
                        let flat = xv
                            .slice(s![bi, ci, .., ..])
                            .to_owned()
                            .into_shape_with_order(h * w)
                            .unwrap();
                        let gflat = gv
                            .slice(s![bi, ci, .., ..])
                            .to_owned()
                            .into_shape_with_order(h * w)
                            .unwrap();
                        let gr = norm_backward_1d(&flat, &gflat, *eps)
                            .into_shape_with_order((h, w))
                            .unwrap();
                        gx.slice_mut(s![bi, ci, .., ..]).assign(&gr);
                    }
                }
                accumulate(grads, *x, gx.into_dyn());
            }
            Op::L2NormRows { x, eps } => {
                let xv = as2(&self.nodes[*x].data)?;
                let gv = as2(g)?;
                let mut gx = Array2::<f32>::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let grow = gv.row(r);
                    let n = row.mapv(|v| v * v).sum().sqrt();
                    let denom = n + eps;
                    // y = x / (n + eps); dy/dx = I/(n+eps) - x x^T / (n (n+eps)^2)
                    let dot: f32 = row
                        .iter()
                        .zip(grow.iter())
                        .map(|(&xv_, &gv_)| xv_ * gv_)
                        .sum();
                    for c in 0..row.len() {
                        let direct = grow[c] / denom;
                        let correction = if n > 0.0 {
                            row[c] * dot / (n * denom * denom)
                        } else {
                            0.0
                        };
                        gx[[r, c]] = direct - correction;
                    }
                }
                accumulate(grads, *x, gx.into_dyn());
            }
            Op::GatherRows { table, indices } => {
                let tv = as2(&self.nodes[*table].data)?;
                let gv = as2(g)?;
                let mut gt = Array2::<f32>::zeros(tv.raw_dim());
                for (r, &i) in indices.iter().enumerate() {
                    let mut dst = gt.row_mut(i);
                    dst += &gv.row(r);
                }
                accumulate(grads, *table, gt.into_dyn());
            }
            Op::MulChannels(x, sc) => {
                let xv = as4(&self.nodes[*x].data)?;
                let sv = as2(&self.nodes[*sc].data)?;
                let gv = as4(g)?;
                let (b, c, _, _) = dims4(&xv);
                let mut gx = gv.to_owned();
                let mut gs = Array2::<f32>::zeros(sv.raw_dim());
                for bi in 0..b {
                    for ci in 0..c {
                        let mut sl = gx.slice_mut(s![bi, ci, .., ..]);
                        sl *= sv[[bi, ci]];
                        let dot = (&gv.slice(s![bi, ci, .., ..])
                            * &xv.slice(s![bi, ci, .., ..]))
                            .sum();
                        gs[[bi, ci]] = dot;
                    }
                }
                accumulate(grads, *x, gx.into_dyn());
                accumulate(grads, *sc, gs.into_dyn());
            }
            Op::AddChannels(x, sc) => {
                let gv = as4(g)?;
                let (b, c, _, _) = dims4(&gv);
                let mut gs = Array2::<f32>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        gs[[bi, ci]] = gv.slice(s![bi, ci, .., ..]).sum();
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *sc, gs.into_dyn());
            }
            Op::LogSumExpRows(x) => {
                let xv = as2(&self.nodes[*x].data)?;
                let gv = as1(g)?;
                let mut gx = Array2::<f32>::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let exps: Vec<f32> = row.iter().map(|&v| (v - mx).exp()).collect();
                    let sum: f32 = exps.iter().sum();
                    for c in 0..row.len() {
                        gx[[r, c]] = gv[r] * exps[c] / sum;
                    }
                }
                accumulate(grads, *x, gx.into_dyn());
            }
            Op::PickCols { x, idx } => {
                let xv = as2(&self.nodes[*x].data)?;
                let gv = as1(g)?;
                let mut gx = Array2::<f32>::zeros(xv.raw_dim());
                for (r, &c) in idx.iter().enumerate() {
                    gx[[r, c]] = gv[r];
                }
                accumulate(grads, *x, gx.into_dyn());
            }
            Op::ConcatCols(a, b) => {
                let gv = as2(g)?;
                let da = as2(&self.nodes[*a].data)?.ncols();
                accumulate(grads, *a, gv.slice(s![.., ..da]).to_owned().into_dyn());
                accumulate(grads, *b, gv.slice(s![.., da..]).to_owned().into_dyn());
            }
            Op::MeanSpatial(x) => {
                let xv = as4(&self.nodes[*x].data)?;
                let (b, c, h, w) = dims4(&xv);
                let gv = as2(g)?;
                let denom = (h * w) as f32;
                let mut gx = ndarray::Array4::<f32>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        gx.slice_mut(s![bi, ci, .., ..]).fill(gv[[bi, ci]] / denom);
                    }
                }
                accumulate(grads, *x, gx.into_dyn());
            }
            Op::MatmulNT(a, b) => {
                let gv = as2(g)?;
                let av = as2(&self.nodes[*a].data)?;
                let bv = as2(&self.nodes[*b].data)?;
                accumulate(grads, *a, gv.dot(&bv).into_dyn());
                accumulate(grads, *b, gv.t().dot(&av).into_dyn());
            }
        }
        Ok(())
    }
}

fn check_channels(
    x: &ndarray::ArrayView4<'_, f32>,
    sc: &ndarray::ArrayView2<'_, f32>,
) -> Result<()> {
    if x.shape()[0] != sc.shape()[0] || x.shape()[1] != sc.shape()[1] {
        return Err(DismoError::Shape(format!(
            "per-channel broadcast: x is {:?}, scale is {:?}",
            x.shape(),
            sc.shape()
        )));
    }
    Ok(())
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f32>>], id: usize, g: ArrayD<f32>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Backward of y = (x - mean) / sqrt(var + eps) over a single vector.
fn norm_backward_1d(x: &Array1<f32>, gy: &Array1<f32>, eps: f32) -> Array1<f32> {
    let n = x.len() as f32;
    let m = x.mean().unwrap();
    let xc = x.mapv(|v| v - m);
    let var = xc.mapv(|v| v * v).mean().unwrap();
    let inv_std = 1.0 / (var + eps).sqrt();
    let gy_mean = gy.mean().unwrap();
    let dot = (&xc * gy).sum() / n;
    // dL/dx = inv_std * (gy - mean(gy) - xc * dot / (var + eps))
    xc.iter()
        .zip(gy.iter())
        .map(|(&xcv, &gv)| inv_std * (gv - gy_mean - xcv * dot / (var + eps)))
        .collect()
}

fn as1(a: &ArrayD<f32>) -> Result<ndarray::ArrayView1<'_, f32>> {
    a.view()
        .into_dimensionality::<Ix1>()
        .map_err(|e| DismoError::Shape(format!("expected 1-d: {e}")))
}

fn as2(a: &ArrayD<f32>) -> Result<ndarray::ArrayView2<'_, f32>> {
    a.view()
        .into_dimensionality::<Ix2>()
        .map_err(|e| DismoError::Shape(format!("expected 2-d: {e}")))
}

fn as4(a: &ArrayD<f32>) -> Result<ndarray::ArrayView4<'_, f32>> {
    a.view()
        .into_dimensionality::<Ix4>()
        .map_err(|e| DismoError::Shape(format!("expected 4-d: {e}")))
}

fn dims4<S: ndarray::Data<Elem = f32>>(
    a: &ndarray::ArrayBase<S, Ix4>,
) -> (usize, usize, usize, usize) {
    let sh = a.shape();
    (sh[0], sh[1], sh[2], sh[3])
}

fn out_hw(h: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (h + 2 * pad - k) / stride + 1
}

/// Lay out padded patches as a [Ci*k*k, B*Ho*Wo] matrix.
fn im2col(x: &ndarray::ArrayView4<'_, f32>, k: usize, stride: usize) -> Array2<f32> {
    let (b, c, h, w) = dims4(x);
    let pad = k / 2;
    let ho = out_hw(h, k, stride);
    let wo = out_hw(w, k, stride);
    let mut cols = Array2::<f32>::zeros((c * k * k, b * ho * wo));
    for bi in 0..b {
        for yo in 0..ho {
            for xo in 0..wo {
                let col = bi * ho * wo + yo * wo + xo;
                for ci in 0..c {
                    for ky in 0..k {
                        let yi = (yo * stride + ky) as isize - pad as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xi = (xo * stride + kx) as isize - pad as isize;
                            if xi < 0 || xi >= w as isize {
                                continue;
                            }
                            cols[[ci * k * k + ky * k + kx, col]] =
                                x[[bi, ci, yi as usize, xi as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f32>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> Array4<f32> {
    let pad = k / 2;
    let ho = out_hw(h, k, stride);
    let wo = out_hw(w, k, stride);
    let mut x = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for yo in 0..ho {
            for xo in 0..wo {
                let col = bi * ho * wo + yo * wo + xo;
                for ci in 0..c {
                    for ky in 0..k {
                        let yi = (yo * stride + ky) as isize - pad as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xi = (xo * stride + kx) as isize - pad as isize;
                            if xi < 0 || xi >= w as isize {
                                continue;
                            }
                            x[[bi, ci, yi as usize, xi as usize]] +=
                                cols[[ci * k * k + ky * k + kx, col]];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv2d_forward(
    x: &ndarray::ArrayView4<'_, f32>,
    w: &ndarray::ArrayView4<'_, f32>,
    bias: &ndarray::ArrayView1<'_, f32>,
    stride: usize,
) -> Array4<f32> {
    let (b, _c, h, wd) = dims4(x);
    let co = w.shape()[0];
    let k = w.shape()[2];
    let ho = out_hw(h, k, stride);
    let wo = out_hw(wd, k, stride);
    let cols = im2col(x, k, stride);
    let w2 = w
        .to_owned()
        .into_shape_with_order((co, w.len() / co))
        .unwrap();
    let out2 = w2.dot(&cols); // [Co, B*Ho*Wo]
    let mut out = Array4::<f32>::zeros((b, co, ho, wo));
    for bi in 0..b {
        for coi in 0..co {
            for yo in 0..ho {
                for xo in 0..wo {
                    out[[bi, coi, yo, xo]] =
                        out2[[coi, bi * ho * wo + yo * wo + xo]] + bias[coi];
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &ndarray::ArrayView4<'_, f32>,
    w: &ndarray::ArrayView4<'_, f32>,
    gout: &ndarray::ArrayView4<'_, f32>,
    stride: usize,
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (b, c, h, wd) = dims4(x);
    let co = w.shape()[0];
    let k = w.shape()[2];
    let ho = gout.shape()[2];
    let wo = gout.shape()[3];
    // gout as [Co, B*Ho*Wo]
    let mut g2 = Array2::<f32>::zeros((co, b * ho * wo));
    for bi in 0..b {
        for coi in 0..co {
            for yo in 0..ho {
                for xo in 0..wo {
                    g2[[coi, bi * ho * wo + yo * wo + xo]] = gout[[bi, coi, yo, xo]];
                }
            }
        }
    }
    let cols = im2col(x, k, stride);
    let gw2 = g2.dot(&cols.t()); // [Co, Ci*k*k]
    let gw = gw2.into_shape_with_order((co, c, k, k)).unwrap();
    let w2 = w
        .to_owned()
        .into_shape_with_order((co, w.len() / co))
        .unwrap();
    let gcols = w2.t().dot(&g2); // [Ci*k*k, B*Ho*Wo]
    let gx = col2im(&gcols, b, c, h, wd, k, stride);
    let gb = g2.sum_axis(Axis(1));
    (gx, gw, gb)
}
