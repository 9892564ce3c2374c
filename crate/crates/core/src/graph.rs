//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] is a per-forward-pass Wengert list: every operation records
//! its parents and a backward rule, and [`Graph::backward`] runs one reverse
//! sweep. All values are `f64` so analytic gradients resolve cleanly against
//! central finite differences.
//!
//! Node ids are topologically ordered by construction. Gradients for interior
//! nodes are consumed during the sweep; leaf nodes (parameters, constants)
//! keep theirs and can be read from the returned [`Gradients`].

use ndarray::{concatenate, ArrayD, Axis, Ix1, Ix2, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule of one operation: given parent values, own output and the
/// incoming gradient, produce one gradient per parent.
pub trait OpBackward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Option<Box<dyn OpBackward>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients after a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => *acc += &g,
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf node (parameter or constant input).
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Insert a 0-d scalar leaf.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.var(ndarray::arr0(value).into_dyn())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 0-d node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1, "scalar_value on non-scalar node");
        *t.iter().next().unwrap()
    }

    /// Insert a node computed by a custom op. `value` must already be the
    /// op's forward result on the parents.
    pub fn custom(&mut self, value: Tensor, parents: Vec<Var>, op: Box<dyn OpBackward>) -> Var {
        let parents = parents.into_iter().map(|v| v.0).collect();
        self.push(value, parents, Some(op))
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, op: Option<Box<dyn OpBackward>>) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()) || op.is_some());
        self.nodes.push(Node { value, parents, op });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Gradients {
        let seed = ndarray::arr0(1.0).into_dyn();
        self.backward_seeded(vec![(loss, seed)])
    }

    /// Reverse sweep with explicit gradient seeds. Multiple seeds accumulate,
    /// which lets a caller inject externally computed gradients (e.g. a
    /// closed-form regulariser term) into intermediate nodes.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        for (v, s) in seeds {
            assert_eq!(
                s.shape(),
                self.nodes[v.0].value.shape(),
                "seed gradient shape mismatch"
            );
            accumulate(&mut grads[v.0], s);
        }
        for id in (0..self.nodes.len()).rev() {
            if self.nodes[id].op.is_none() {
                continue; // leaf: keep its gradient
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let inputs: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|&p| &self.nodes[p].value)
                .collect();
            let pgrads = node
                .op
                .as_ref()
                .unwrap()
                .backward(&inputs, &node.value, &g);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                accumulate(&mut grads[p], pg);
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) + self.value(b);
        self.push(value, vec![a.0, b.0], Some(Box::new(AddOp)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) - self.value(b);
        self.push(value, vec![a.0, b.0], Some(Box::new(SubOp)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) * self.value(b);
        self.push(value, vec![a.0, b.0], Some(Box::new(MulOp)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, vec![a.0], Some(Box::new(ScaleOp(c))))
    }

    /// `[n, d] + [d]` row-broadcast bias add.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let b = self
            .value(bias)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        assert_eq!(x.ncols(), b.len());
        let value = (&x + &b).into_dyn();
        self.push(value, vec![a.0, bias.0], Some(Box::new(AddBiasOp)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_fwd);
        self.push(value, vec![a.0], Some(Box::new(GeluOp)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, vec![a.0], Some(Box::new(ReluOp)))
    }

    // ---- linear algebra ----

    /// `[n, k] x [k, m]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let y = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(x.ncols(), y.nrows(), "matmul inner dim mismatch");
        let value = x.dot(&y).into_dyn();
        self.push(value, vec![a.0, b.0], Some(Box::new(MatMulOp)))
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let value = x.t().as_standard_layout().to_owned().into_dyn();
        self.push(value, vec![a.0], Some(Box::new(Transpose2Op)))
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .view()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let old = self.value(a).shape().to_vec();
        self.push(value, vec![a.0], Some(Box::new(ReshapeOp { old })))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(NarrowOp { axis, start, len })),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes = parts.iter().map(|v| self.value(*v).shape()[axis]).collect();
        let parents = parts.iter().map(|v| v.0).collect();
        self.push(value, parents, Some(Box::new(ConcatOp { axis, sizes })))
    }

    /// Gather rows of a `[n, d]` matrix. Duplicate indices accumulate in the
    /// backward scatter.
    pub fn select_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let mut out = ndarray::Array2::zeros((indices.len(), x.ncols()));
        for (row, &i) in indices.iter().enumerate() {
            out.row_mut(row).assign(&x.row(i));
        }
        let n = x.nrows();
        self.push(
            out.into_dyn(),
            vec![a.0],
            Some(Box::new(SelectRowsOp { indices, n })),
        )
    }

    // ---- normalisation / activations over rows ----

    /// Layer normalisation of each row of a `[n, d]` matrix with learned
    /// `gamma`/`beta` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let g = self
            .value(gamma)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let b = self
            .value(beta)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let (n, d) = (xv.nrows(), xv.ncols());
        let mut xhat = ndarray::Array2::zeros((n, d));
        let mut inv_std = ndarray::Array1::zeros(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mu = row.mean().unwrap();
            let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mu) * is;
            }
        }
        let mut out = ndarray::Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                out[[i, j]] = xhat[[i, j]] * g[j] + b[j];
            }
        }
        self.push(
            out.into_dyn(),
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(LayerNormOp { xhat, inv_std })),
        )
    }

    /// Row-wise softmax of a `[n, m]` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out.into_dyn(), vec![a.0], Some(Box::new(SoftmaxRowsOp)))
    }

    /// Row-wise log-softmax of a `[n, m]` matrix.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(out.into_dyn(), vec![a.0], Some(Box::new(LogSoftmaxRowsOp)))
    }

    /// Normalise each row of a `[n, d]` matrix to unit length.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let mut out = x.to_owned();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let s = n + eps;
            row.mapv_inplace(|v| v / s);
        }
        self.push(
            out.into_dyn(),
            vec![a.0],
            Some(Box::new(L2NormalizeRowsOp { norms, eps })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ndarray::arr0(self.value(a).sum()).into_dyn();
        self.push(value, vec![a.0], Some(Box::new(SumAllOp)))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let value = ndarray::arr0(self.value(a).sum() / n as f64).into_dyn();
        self.push(value, vec![a.0], Some(Box::new(MeanAllOp)))
    }

    /// Column means of a `[n, d]` matrix, yielding `[d]`.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let value = x.mean_axis(Axis(0)).unwrap().into_dyn();
        self.push(value, vec![a.0], Some(Box::new(MeanAxis0Op)))
    }

    // ---- composite losses ----

    /// Mean of `softplus(x) - y*x` over all entries: binary cross-entropy
    /// with logits against constant targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape());
        let n = x.len() as f64;
        let mut total = 0.0;
        for (&xi, &yi) in x.iter().zip(targets.iter()) {
            total += softplus(xi) - yi * xi;
        }
        let value = ndarray::arr0(total / n).into_dyn();
        self.push(
            value,
            vec![logits.0],
            Some(Box::new(BceWithLogitsOp {
                targets: targets.clone(),
            })),
        )
    }

    /// Per-pair rotation: channels `(2j, 2j+1)` of row `i` rotate by
    /// `angles[i, j]`. The rotary-embedding primitive.
    pub fn rotate_pairs(&mut self, a: Var, angles: ndarray::Array2<f64>) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(x.nrows(), angles.nrows());
        assert_eq!(x.ncols(), angles.ncols() * 2, "need one angle per channel pair");
        let value = apply_pair_rotation(&x.to_owned(), &angles, 1.0).into_dyn();
        self.push(value, vec![a.0], Some(Box::new(RotatePairsOp { angles })))
    }

    /// Cubic 3D convolution, stride 1, zero padding `k/2` (odd `k`, so shape
    /// is preserved): `x [Cin,D,H,W]`, `kernel [Cout,Cin,k,k,k]`,
    /// `bias [Cout]` -> `[Cout,D,H,W]`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv3d input must be [C,D,H,W]");
        assert_eq!(ks.len(), 5, "conv3d kernel must be [Cout,Cin,k,k,k]");
        assert_eq!(ks[1], xs[0], "kernel input channels mismatch");
        assert!(
            ks[2] == ks[3] && ks[3] == ks[4] && ks[2] % 2 == 1,
            "kernel must be cubic with odd side"
        );
        assert_eq!(self.value(bias).shape(), [ks[0]]);
        let k = ks[2];
        let (c_out, n) = (ks[0], xs[1] * xs[2] * xs[3]);
        let cols = im2col(self.value(x), k);
        let w2 = self
            .value(kernel)
            .view()
            .into_shape_with_order((c_out, ks[1] * k * k * k))
            .unwrap()
            .to_owned();
        let mut out2 = w2.dot(&cols);
        let b = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        for co in 0..c_out {
            out2.row_mut(co).mapv_inplace(|v| v + b[co]);
        }
        let value = out2
            .into_shape_with_order(IxDyn(&[c_out, xs[1], xs[2], xs[3]]))
            .unwrap();
        debug_assert_eq!(n, value.len() / c_out);
        self.push(
            value,
            vec![x.0, kernel.0, bias.0],
            Some(Box::new(Conv3dOp { k })),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor on each spatial
    /// axis of a `[C,D,H,W]` tensor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1, "upsample factor must be positive");
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("upsample input must be [C,D,H,W]");
        let (c, d, h, w) = xv.dim();
        let value = ndarray::Array4::from_shape_fn(
            (c, d * factor, h * factor, w * factor),
            |(ci, z, y, xq)| xv[[ci, z / factor, y / factor, xq / factor]],
        );
        self.push(
            value.into_dyn(),
            vec![x.0],
            Some(Box::new(UpsampleNearestOp { factor })),
        )
    }

    /// Trilinear resize of a `[C,D,H,W]` tensor to exact `target` spatial
    /// dims (half-pixel centres, clamped). Resizing to the input shape is
    /// the bitwise identity.
    pub fn resize_trilinear(&mut self, x: Var, target: [usize; 3]) -> Var {
        assert!(target.iter().all(|&t| t >= 1), "empty resize target");
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("resize input must be [C,D,H,W]");
        let (c, d, h, w) = xv.dim();
        let taps = [
            axis_taps(d, target[0]),
            axis_taps(h, target[1]),
            axis_taps(w, target[2]),
        ];
        let mut value = ndarray::Array4::zeros((c, target[0], target[1], target[2]));
        for ci in 0..c {
            for (z, tz) in taps[0].iter().enumerate() {
                for (y, ty) in taps[1].iter().enumerate() {
                    for (xq, tx) in taps[2].iter().enumerate() {
                        let mut acc = 0.0;
                        for (zi, wz) in [(tz.0, 1.0 - tz.2), (tz.1, tz.2)] {
                            if wz == 0.0 {
                                continue;
                            }
                            for (yi, wy) in [(ty.0, 1.0 - ty.2), (ty.1, ty.2)] {
                                if wy == 0.0 {
                                    continue;
                                }
                                for (xi, wx) in [(tx.0, 1.0 - tx.2), (tx.1, tx.2)] {
                                    if wx == 0.0 {
                                        continue;
                                    }
                                    acc += wz * wy * wx * xv[[ci, zi, yi, xi]];
                                }
                            }
                        }
                        value[[ci, z, y, xq]] = acc;
                    }
                }
            }
        }
        self.push(
            value.into_dyn(),
            vec![x.0],
            Some(Box::new(ResizeTrilinearOp {
                input_dhw: [d, h, w],
                taps,
            })),
        )
    }
}

// ---- op impls ----

struct AddOp;
impl OpBackward for AddOp {
    fn backward(&self, _i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        vec![g.clone(), g.clone()]
    }
}

struct SubOp;
impl OpBackward for SubOp {
    fn backward(&self, _i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        vec![g.clone(), -g]
    }
}

struct MulOp;
impl OpBackward for MulOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        vec![g * i[1], g * i[0]]
    }
}

struct ScaleOp(f64);
impl OpBackward for ScaleOp {
    fn backward(&self, _i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        vec![g * self.0]
    }
}

struct AddBiasOp;
impl OpBackward for AddBiasOp {
    fn backward(&self, _i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct GeluOp;
impl OpBackward for GeluOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        vec![g * &i[0].mapv(gelu_grad)]
    }
}

struct ReluOp;
impl OpBackward for ReluOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        vec![g * &i[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })]
    }
}

struct MatMulOp;
impl OpBackward for MatMulOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let a = i[0].view().into_dimensionality::<Ix2>().unwrap();
        let b = i[1].view().into_dimensionality::<Ix2>().unwrap();
        let gm = g.view().into_dimensionality::<Ix2>().unwrap();
        vec![gm.dot(&b.t()).into_dyn(), a.t().dot(&gm).into_dyn()]
    }
}

struct Transpose2Op;
impl OpBackward for Transpose2Op {
    fn backward(&self, _i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let gm = g.view().into_dimensionality::<Ix2>().unwrap();
        vec![gm.t().as_standard_layout().to_owned().into_dyn()]
    }
}

struct ReshapeOp {
    old: Vec<usize>,
}
impl OpBackward for ReshapeOp {
    fn backward(&self, _i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        vec![g
            .view()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&self.old))
            .unwrap()]
    }
}

struct NarrowOp {
    axis: usize,
    start: usize,
    len: usize,
}
impl OpBackward for NarrowOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let mut out = Tensor::zeros(i[0].raw_dim());
        out.slice_axis_mut(
            Axis(self.axis),
            ndarray::Slice::from(self.start..self.start + self.len),
        )
        .assign(g);
        vec![out]
    }
}

struct ConcatOp {
    axis: usize,
    sizes: Vec<usize>,
}
impl OpBackward for ConcatOp {
    fn backward(&self, _i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let mut grads = Vec::with_capacity(self.sizes.len());
        let mut start = 0;
        for &s in &self.sizes {
            grads.push(
                g.slice_axis(Axis(self.axis), ndarray::Slice::from(start..start + s))
                    .as_standard_layout()
                    .to_owned(),
            );
            start += s;
        }
        grads
    }
}

struct SelectRowsOp {
    indices: Vec<usize>,
    n: usize,
}
impl OpBackward for SelectRowsOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let d = i[0].shape()[1];
        let gm = g.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = ndarray::Array2::zeros((self.n, d));
        for (row, &idx) in self.indices.iter().enumerate() {
            let mut dst = out.row_mut(idx);
            dst += &gm.row(row);
        }
        vec![out.into_dyn()]
    }
}

struct LayerNormOp {
    xhat: ndarray::Array2<f64>,
    inv_std: ndarray::Array1<f64>,
}
impl OpBackward for LayerNormOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let gamma = i[1].view().into_dimensionality::<Ix1>().unwrap();
        let gm = g.view().into_dimensionality::<Ix2>().unwrap();
        let (n, d) = (self.xhat.nrows(), self.xhat.ncols());
        let mut dx = ndarray::Array2::zeros((n, d));
        let mut dgamma = ndarray::Array1::zeros(d);
        let mut dbeta = ndarray::Array1::zeros(d);
        for r in 0..n {
            let mut mean_gh = 0.0;
            let mut mean_gh_xhat = 0.0;
            for c in 0..d {
                let gh = gm[[r, c]] * gamma[c];
                mean_gh += gh;
                mean_gh_xhat += gh * self.xhat[[r, c]];
                dgamma[c] += gm[[r, c]] * self.xhat[[r, c]];
                dbeta[c] += gm[[r, c]];
            }
            mean_gh /= d as f64;
            mean_gh_xhat /= d as f64;
            for c in 0..d {
                let gh = gm[[r, c]] * gamma[c];
                dx[[r, c]] =
                    self.inv_std[r] * (gh - mean_gh - self.xhat[[r, c]] * mean_gh_xhat);
            }
        }
        vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
    }
}

struct SoftmaxRowsOp;
impl OpBackward for SoftmaxRowsOp {
    fn backward(&self, _i: &[&Tensor], o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let y = o.view().into_dimensionality::<Ix2>().unwrap();
        let gm = g.view().into_dimensionality::<Ix2>().unwrap();
        let mut dx = y.to_owned();
        for (mut drow, (yrow, grow)) in dx
            .rows_mut()
            .into_iter()
            .zip(y.rows().into_iter().zip(gm.rows()))
        {
            let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
            for (dv, (&yv, &gv)) in drow.iter_mut().zip(yrow.iter().zip(grow.iter())) {
                *dv = yv * (gv - dot);
            }
        }
        vec![dx.into_dyn()]
    }
}

struct LogSoftmaxRowsOp;
impl OpBackward for LogSoftmaxRowsOp {
    fn backward(&self, _i: &[&Tensor], o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let y = o.view().into_dimensionality::<Ix2>().unwrap();
        let gm = g.view().into_dimensionality::<Ix2>().unwrap();
        let mut dx = y.to_owned();
        for (mut drow, (yrow, grow)) in dx
            .rows_mut()
            .into_iter()
            .zip(y.rows().into_iter().zip(gm.rows()))
        {
            let gsum: f64 = grow.sum();
            for (dv, (&yv, &gv)) in drow.iter_mut().zip(yrow.iter().zip(grow.iter())) {
                *dv = gv - yv.exp() * gsum;
            }
        }
        vec![dx.into_dyn()]
    }
}

struct L2NormalizeRowsOp {
    norms: Vec<f64>,
    eps: f64,
}
impl OpBackward for L2NormalizeRowsOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let x = i[0].view().into_dimensionality::<Ix2>().unwrap();
        let gm = g.view().into_dimensionality::<Ix2>().unwrap();
        let mut dx = x.to_owned();
        for r in 0..x.nrows() {
            let n = self.norms[r];
            let s = n + self.eps;
            let dot: f64 = x.row(r).iter().zip(gm.row(r).iter()).map(|(a, b)| a * b).sum();
            for c in 0..x.ncols() {
                let straight = gm[[r, c]] / s;
                let radial = if n > 0.0 {
                    x[[r, c]] * dot / (n * s * s)
                } else {
                    0.0
                };
                dx[[r, c]] = straight - radial;
            }
        }
        vec![dx.into_dyn()]
    }
}

struct SumAllOp;
impl OpBackward for SumAllOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let gs = *g.iter().next().unwrap();
        vec![Tensor::from_elem(i[0].raw_dim(), gs)]
    }
}

struct MeanAllOp;
impl OpBackward for MeanAllOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let gs = *g.iter().next().unwrap() / i[0].len() as f64;
        vec![Tensor::from_elem(i[0].raw_dim(), gs)]
    }
}

struct MeanAxis0Op;
impl OpBackward for MeanAxis0Op {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let n = i[0].shape()[0];
        let gv = g.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = ndarray::Array2::zeros((n, gv.len()));
        let scaled = &gv / n as f64;
        for mut row in out.rows_mut() {
            row.assign(&scaled);
        }
        vec![out.into_dyn()]
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct BceWithLogitsOp {
    targets: Tensor,
}
impl OpBackward for BceWithLogitsOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let gs = *g.iter().next().unwrap() / i[0].len() as f64;
        let mut dx = i[0].clone();
        for (d, &y) in dx.iter_mut().zip(self.targets.iter()) {
            *d = gs * (sigmoid(*d) - y);
        }
        vec![dx]
    }
}

fn apply_pair_rotation(
    x: &ndarray::Array2<f64>,
    angles: &ndarray::Array2<f64>,
    sign: f64,
) -> ndarray::Array2<f64> {
    let mut out = x.clone();
    for r in 0..x.nrows() {
        for j in 0..angles.ncols() {
            let theta = angles[[r, j]] * sign;
            let (sin, cos) = theta.sin_cos();
            let a = x[[r, 2 * j]];
            let b = x[[r, 2 * j + 1]];
            out[[r, 2 * j]] = a * cos - b * sin;
            out[[r, 2 * j + 1]] = a * sin + b * cos;
        }
    }
    out
}

struct RotatePairsOp {
    angles: ndarray::Array2<f64>,
}
impl OpBackward for RotatePairsOp {
    fn backward(&self, _i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        // rotation is orthogonal: backward rotates by the negated angles
        let gm = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        vec![apply_pair_rotation(&gm, &self.angles, -1.0).into_dyn()]
    }
}

/// `[Cin k^3, D*H*W]` patch matrix of a zero-padded `[Cin,D,H,W]` input.
fn im2col(x: &Tensor, k: usize) -> ndarray::Array2<f64> {
    let xv = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (c, d, h, w) = xv.dim();
    let p = (k / 2) as isize;
    let mut cols = ndarray::Array2::zeros((c * k * k * k, d * h * w));
    let mut row = 0;
    for ci in 0..c {
        for dz in 0..k as isize {
            for dy in 0..k as isize {
                for dx in 0..k as isize {
                    let mut col = 0;
                    for z in 0..d as isize {
                        let zz = z + dz - p;
                        for y in 0..h as isize {
                            let yy = y + dy - p;
                            for xq in 0..w as isize {
                                let xx = xq + dx - p;
                                if zz >= 0
                                    && zz < d as isize
                                    && yy >= 0
                                    && yy < h as isize
                                    && xx >= 0
                                    && xx < w as isize
                                {
                                    cols[[row, col]] =
                                        xv[[ci, zz as usize, yy as usize, xx as usize]];
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Scatter-add transpose of [`im2col`].
fn col2im(cols: &ndarray::Array2<f64>, c: usize, d: usize, h: usize, w: usize, k: usize) -> Tensor {
    let p = (k / 2) as isize;
    let mut out = ndarray::Array4::<f64>::zeros((c, d, h, w));
    let mut row = 0;
    for ci in 0..c {
        for dz in 0..k as isize {
            for dy in 0..k as isize {
                for dx in 0..k as isize {
                    let mut col = 0;
                    for z in 0..d as isize {
                        let zz = z + dz - p;
                        for y in 0..h as isize {
                            let yy = y + dy - p;
                            for xq in 0..w as isize {
                                let xx = xq + dx - p;
                                if zz >= 0
                                    && zz < d as isize
                                    && yy >= 0
                                    && yy < h as isize
                                    && xx >= 0
                                    && xx < w as isize
                                {
                                    out[[ci, zz as usize, yy as usize, xx as usize]] +=
                                        cols[[row, col]];
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    out.into_dyn()
}

struct Conv3dOp {
    k: usize,
}
impl OpBackward for Conv3dOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let xs = i[0].shape();
        let ks = i[1].shape().to_vec();
        let (c_in, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let c_out = ks[0];
        let n = d * h * w;
        let g2 = g
            .view()
            .as_standard_layout()
            .into_shape_with_order((c_out, n))
            .unwrap()
            .to_owned();
        let cols = im2col(i[0], self.k);
        let w2 = i[1]
            .view()
            .into_shape_with_order((c_out, c_in * self.k * self.k * self.k))
            .unwrap()
            .to_owned();
        let grad_kernel = g2
            .dot(&cols.t())
            .into_shape_with_order(IxDyn(&ks))
            .unwrap();
        let grad_x = col2im(&w2.t().dot(&g2), c_in, d, h, w, self.k);
        let grad_bias = g2.sum_axis(Axis(1)).into_dyn();
        vec![grad_x, grad_kernel, grad_bias]
    }
}

struct UpsampleNearestOp {
    factor: usize,
}
impl OpBackward for UpsampleNearestOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let s = i[0].shape();
        let f = self.factor;
        let mut out = ndarray::Array4::<f64>::zeros((s[0], s[1], s[2], s[3]));
        for ((c, z, y, x), val) in gv.indexed_iter() {
            out[[c, z / f, y / f, x / f]] += val;
        }
        vec![out.into_dyn()]
    }
}

/// Per-output-index source taps `(lo, hi, frac)` for one axis under the
/// half-pixel-centre convention: source position `(i+0.5)*in/out - 0.5`,
/// clamped to the valid range.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

struct ResizeTrilinearOp {
    input_dhw: [usize; 3],
    taps: [Vec<(usize, usize, f64)>; 3],
}
impl OpBackward for ResizeTrilinearOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let c = i[0].shape()[0];
        let [d, h, w] = self.input_dhw;
        let mut out = ndarray::Array4::<f64>::zeros((c, d, h, w));
        for ((ci, z, y, xq), val) in gv.indexed_iter() {
            let tz = self.taps[0][z];
            let ty = self.taps[1][y];
            let tx = self.taps[2][xq];
            for (zi, wz) in [(tz.0, 1.0 - tz.2), (tz.1, tz.2)] {
                if wz == 0.0 {
                    continue;
                }
                for (yi, wy) in [(ty.0, 1.0 - ty.2), (ty.1, ty.2)] {
                    if wy == 0.0 {
                        continue;
                    }
                    for (xi, wx) in [(tx.0, 1.0 - tx.2), (tx.1, tx.2)] {
                        if wx == 0.0 {
                            continue;
                        }
                        out[[ci, zi, yi, xi]] += wz * wy * wx * val;
                    }
                }
            }
        }
        vec![out.into_dyn()]
    }
}

/// Gradient-checking helpers used by unit tests and the acceptance suite.
pub mod check {
    use super::Tensor;

    /// Central finite-difference gradient of a scalar-valued function.
    pub fn finite_diff<F: FnMut(&Tensor) -> f64>(mut f: F, x: &Tensor, step: f64) -> Tensor {
        let mut grad = Tensor::zeros(x.raw_dim());
        let mut probe = x.clone();
        for idx in 0..x.len() {
            let orig = probe.as_slice_mut().unwrap()[idx];
            probe.as_slice_mut().unwrap()[idx] = orig + step;
            let hi = f(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig - step;
            let lo = f(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig;
            grad.as_slice_mut().unwrap()[idx] = (hi - lo) / (2.0 * step);
        }
        grad
    }

    /// Worst-case relative disagreement between two gradients.
    pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
        assert_eq!(analytic.shape(), numeric.shape());
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }
}
