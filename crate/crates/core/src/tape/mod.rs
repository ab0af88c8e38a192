//! Reverse-mode autodiff over an append-only operation tape.
//!
//! Every operation records its inputs by reference, its output value, and
//! enough metadata to replay the exact adjoint. `Tape::backward` consumes the
//! tape and returns per-leaf gradients. Because the tape is append-only and
//! inputs must already exist when an op is recorded, cycles cannot occur.

mod nn;
mod seq;

pub use nn::PadMode;
pub(crate) use seq::A_SERIES_EPS;

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a value recorded on a tape. Only valid for the tape that minted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Relu(TensorRef),
    Sigmoid(TensorRef),
    Silu(TensorRef),
    Softplus(TensorRef),
    Exp(TensorRef),
    Neg(TensorRef),
    Abs(TensorRef),
    Add(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    Div(TensorRef, TensorRef),
    AddConst(TensorRef),
    Scale(TensorRef, Scalar),
    SumAll(TensorRef),
    MeanAll(TensorRef),
    Reshape(TensorRef),
    SliceOuter {
        x: TensorRef,
        index: usize,
    },
    Linear {
        x: TensorRef,
        w: TensorRef,
        b: Option<TensorRef>,
    },
    Conv2d {
        x: TensorRef,
        k: TensorRef,
        stride: usize,
        pad: usize,
        mode: PadMode,
        groups: usize,
    },
    LayerNorm {
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: Scalar,
    },
    PixelShuffle {
        x: TensorRef,
        r: usize,
    },
    GlobalAvgPool(TensorRef),
    ChannelScale {
        x: TensorRef,
        s: TensorRef,
    },
    ChannelBias {
        x: TensorRef,
        b: TensorRef,
    },
    Fft2(TensorRef),
    RowScale {
        x: TensorRef,
        s: TensorRef,
    },
    GatherRows {
        x: TensorRef,
        idx: Vec<usize>,
    },
    ImageToTokens {
        x: TensorRef,
        pos: Vec<(usize, usize)>,
    },
    ScatterTokens {
        base: TensorRef,
        tokens: TensorRef,
        pos: Vec<(usize, usize)>,
    },
    PatchVariances {
        x: TensorRef,
        ph: usize,
        pw: usize,
    },
    PadReflectBr {
        x: TensorRef,
        bottom: usize,
        right: usize,
    },
    CropTl {
        x: TensorRef,
        h: usize,
        w: usize,
    },
    ZohABar {
        a: TensorRef,
        delta: TensorRef,
    },
    ZohBBar {
        a: TensorRef,
        delta: TensorRef,
        b: TensorRef,
    },
    SelectiveScan {
        abar: TensorRef,
        bbar: TensorRef,
        c: TensorRef,
        d: TensorRef,
        x: TensorRef,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<Scalar>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Vec<Scalar>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the scalar root w.r.t. the given node. Leaves that never
    /// influenced the root get a zero gradient, per the disconnected-leaf
    /// contract.
    pub fn get(&self, r: TensorRef) -> Vec<Scalar> {
        match &self.grads[r.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[r.0]],
        }
    }
}

pub(crate) struct GradStore {
    slots: Vec<Option<Vec<Scalar>>>,
}

impl GradStore {
    pub(crate) fn accum(&mut self, r: TensorRef, delta: Vec<Scalar>) {
        match &mut self.slots[r.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta),
        }
    }
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

    pub fn value(&self, r: TensorRef) -> &[Scalar] {
        &self.nodes[r.0].value
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.0].shape
    }

    /// Copies a recorded value out as a plain tensor.
    pub fn tensor(&self, r: TensorRef) -> Tensor {
        let n = &self.nodes[r.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn check_ref(&self, r: TensorRef) -> Result<()> {
        if r.0 >= self.nodes.len() {
            return Err(Error::Shape(format!(
                "tensor ref {} does not belong to this tape (len {})",
                r.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<Scalar>,
        op: Op,
        requires_grad: bool,
    ) -> Result<TensorRef> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(TensorRef(self.nodes.len() - 1))
    }

    pub(crate) fn rg(&self, r: TensorRef) -> bool {
        self.nodes[r.0].requires_grad
    }

    /// Records a leaf from a tensor; gradient participation follows
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<TensorRef> {
        self.push(
            "leaf",
            t.shape.clone(),
            t.data.clone(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Records a constant leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<Scalar>) -> Result<TensorRef> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "constant shape {:?} does not match {} values",
                shape,
                data.len()
            )));
        }
        self.push("constant", shape, data, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: Scalar) -> Result<TensorRef> {
        self.constant(vec![1], vec![v])
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: TensorRef,
        f: impl Fn(Scalar) -> Scalar,
        op: Op,
    ) -> Result<TensorRef> {
        self.check_ref(x)?;
        let value = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(name, shape, value, op, rg)
    }

    pub fn relu(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.unary("exp", x, Scalar::exp, Op::Exp(x))
    }

    pub fn neg(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    pub fn abs(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.unary("abs", x, Scalar::abs, Op::Abs(x))
    }

    pub fn add_const(&mut self, x: TensorRef, c: Scalar) -> Result<TensorRef> {
        self.unary("add_const", x, |v| v + c, Op::AddConst(x))
    }

    pub fn scale(&mut self, x: TensorRef, c: Scalar) -> Result<TensorRef> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    /// Shapes must match, or one side must be a single-element scalar that
    /// broadcasts over the other. No other broadcasting exists.
    fn binary(
        &mut self,
        name: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(Scalar, Scalar) -> Scalar,
        op: Op,
    ) -> Result<TensorRef> {
        self.check_ref(a)?;
        self.check_ref(b)?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let value: Vec<Scalar>;
        let shape: Vec<usize>;
        if na.shape == nb.shape {
            value = na
                .value
                .iter()
                .zip(&nb.value)
                .map(|(&x, &y)| f(x, y))
                .collect();
            shape = na.shape.clone();
        } else if nb.value.len() == 1 {
            let y = nb.value[0];
            value = na.value.iter().map(|&x| f(x, y)).collect();
            shape = na.shape.clone();
        } else if na.value.len() == 1 {
            let x = na.value[0];
            value = nb.value.iter().map(|&y| f(x, y)).collect();
            shape = nb.shape.clone();
        } else {
            return Err(Error::Shape(format!(
                "{name}: shapes {:?} and {:?} are incompatible",
                na.shape, nb.shape
            )));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(name, shape, value, op, rg)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn sum_all(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.check_ref(x)?;
        let s: Scalar = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push("sum_all", vec![1], vec![s], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.check_ref(x)?;
        let n = self.nodes[x.0].value.len();
        if n == 0 {
            return Err(Error::Shape("mean_all of empty tensor".into()));
        }
        let s: Scalar = self.nodes[x.0].value.iter().sum::<Scalar>() / n as Scalar;
        let rg = self.rg(x);
        self.push("mean_all", vec![1], vec![s], Op::MeanAll(x), rg)
    }

    pub fn reshape(&mut self, x: TensorRef, shape: Vec<usize>) -> Result<TensorRef> {
        self.check_ref(x)?;
        if numel(&shape) != self.nodes[x.0].value.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[x.0].shape, shape
            )));
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        self.push("reshape", shape, value, Op::Reshape(x), rg)
    }

    /// Extracts slice `index` along the outermost axis.
    pub fn slice_outer(&mut self, x: TensorRef, index: usize) -> Result<TensorRef> {
        self.check_ref(x)?;
        let node = &self.nodes[x.0];
        if node.shape.is_empty() || index >= node.shape[0] {
            return Err(Error::Shape(format!(
                "slice index {} out of range for shape {:?}",
                index, node.shape
            )));
        }
        let inner: Vec<usize> = if node.shape.len() == 1 {
            vec![1]
        } else {
            node.shape[1..].to_vec()
        };
        let m = numel(&inner);
        let value = node.value[index * m..(index + 1) * m].to_vec();
        let rg = self.rg(x);
        self.push("slice_outer", inner, value, Op::SliceOuter { x, index }, rg)
    }

    /// Reverse pass from a scalar root. Consumes the tape; the per-node
    /// gradients survive in the returned map.
    pub fn backward(self, root: TensorRef) -> Result<Gradients> {
        self.check_ref(root)?;
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut store = GradStore {
            slots: vec![None; n],
        };
        store.slots[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = store.slots[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut store)?;
            store.slots[i] = Some(g);
        }
        let lens = self.nodes.iter().map(|nd| nd.value.len()).collect();
        Ok(Gradients {
            grads: store.slots,
            lens,
        })
    }

    fn backward_node(&self, i: usize, g: &[Scalar], store: &mut GradStore) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Relu(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x);
                    let d = g
                        .iter()
                        .zip(xs)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    store.accum(*x, d);
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let y = &self.nodes[i].value;
                    let d = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (1.0 - yi)).collect();
                    store.accum(*x, d);
                }
            }
            Op::Silu(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x);
                    let d = g
                        .iter()
                        .zip(xs)
                        .map(|(&gi, &xi)| {
                            let s = sigmoid(xi);
                            gi * (s + xi * s * (1.0 - s))
                        })
                        .collect();
                    store.accum(*x, d);
                }
            }
            Op::Softplus(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x);
                    let d = g.iter().zip(xs).map(|(&gi, &xi)| gi * sigmoid(xi)).collect();
                    store.accum(*x, d);
                }
            }
            Op::Exp(x) => {
                if self.rg(*x) {
                    let y = &self.nodes[i].value;
                    let d = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect();
                    store.accum(*x, d);
                }
            }
            Op::Neg(x) => {
                if self.rg(*x) {
                    store.accum(*x, g.iter().map(|&gi| -gi).collect());
                }
            }
            Op::Abs(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x);
                    let d = g
                        .iter()
                        .zip(xs)
                        .map(|(&gi, &xi)| gi * sign(xi))
                        .collect();
                    store.accum(*x, d);
                }
            }
            Op::Add(a, b) => {
                self.binary_adjoint(*a, *b, g, store, |_, _, gi| (gi, gi));
            }
            Op::Sub(a, b) => {
                self.binary_adjoint(*a, *b, g, store, |_, _, gi| (gi, -gi));
            }
            Op::Mul(a, b) => {
                self.binary_adjoint(*a, *b, g, store, |x, y, gi| (gi * y, gi * x));
            }
            Op::Div(a, b) => {
                self.binary_adjoint(*a, *b, g, store, |x, y, gi| (gi / y, -gi * x / (y * y)));
            }
            Op::AddConst(x) => {
                if self.rg(*x) {
                    store.accum(*x, g.to_vec());
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    store.accum(*x, g.iter().map(|&gi| gi * c).collect());
                }
            }
            Op::SumAll(x) => {
                if self.rg(*x) {
                    store.accum(*x, vec![g[0]; self.value(*x).len()]);
                }
            }
            Op::MeanAll(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len() as Scalar;
                    store.accum(*x, vec![g[0] / n; self.value(*x).len()]);
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    store.accum(*x, g.to_vec());
                }
            }
            Op::SliceOuter { x, index } => {
                if self.rg(*x) {
                    let mut d = vec![0.0; self.value(*x).len()];
                    let m = g.len();
                    d[index * m..(index + 1) * m].copy_from_slice(g);
                    store.accum(*x, d);
                }
            }
            Op::Linear { x, w, b } => self.backward_linear(*x, *w, *b, g, store),
            Op::Conv2d {
                x,
                k,
                stride,
                pad,
                mode,
                groups,
            } => self.backward_conv2d(*x, *k, *stride, *pad, *mode, *groups, g, store),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => self.backward_layer_norm(*x, *gamma, *beta, *eps, g, store),
            Op::PixelShuffle { x, r } => self.backward_pixel_shuffle(*x, *r, g, store),
            Op::GlobalAvgPool(x) => self.backward_global_avg_pool(*x, g, store),
            Op::ChannelScale { x, s } => self.backward_channel_scale(*x, *s, g, store),
            Op::ChannelBias { x, b } => self.backward_channel_bias(*x, *b, g, store),
            Op::Fft2(x) => self.backward_fft2(*x, g, store),
            Op::RowScale { x, s } => self.backward_row_scale(*x, *s, g, store),
            Op::GatherRows { x, idx } => self.backward_gather_rows(*x, idx, g, store),
            Op::ImageToTokens { x, pos } => self.backward_image_to_tokens(*x, pos, g, store),
            Op::ScatterTokens { base, tokens, pos } => {
                self.backward_scatter_tokens(*base, *tokens, pos, g, store)
            }
            Op::PatchVariances { x, ph, pw } => {
                self.backward_patch_variances(*x, *ph, *pw, g, store)
            }
            Op::PadReflectBr { x, bottom, right } => {
                self.backward_pad_reflect_br(*x, *bottom, *right, g, store)
            }
            Op::CropTl { x, h, w } => self.backward_crop_tl(*x, *h, *w, g, store),
            Op::ZohABar { a, delta } => self.backward_zoh_abar(*a, *delta, g, store),
            Op::ZohBBar { a, delta, b } => self.backward_zoh_bbar(*a, *delta, *b, g, store),
            Op::SelectiveScan { abar, bbar, c, d, x } => {
                self.backward_selective_scan(*abar, *bbar, *c, *d, *x, g, store)
            }
        }
        Ok(())
    }

    /// Shared adjoint plumbing for elementwise binaries with scalar broadcast.
    fn binary_adjoint(
        &self,
        a: TensorRef,
        b: TensorRef,
        g: &[Scalar],
        store: &mut GradStore,
        df: impl Fn(Scalar, Scalar, Scalar) -> (Scalar, Scalar),
    ) {
        let av = self.value(a);
        let bv = self.value(b);
        let (need_a, need_b) = (self.rg(a), self.rg(b));
        if !need_a && !need_b {
            return;
        }
        let mut da = vec![0.0; av.len()];
        let mut db = vec![0.0; bv.len()];
        for (i, &gi) in g.iter().enumerate() {
            let x = av[if av.len() == 1 { 0 } else { i }];
            let y = bv[if bv.len() == 1 { 0 } else { i }];
            let (dx, dy) = df(x, y, gi);
            da[if av.len() == 1 { 0 } else { i }] += dx;
            db[if bv.len() == 1 { 0 } else { i }] += dy;
        }
        if need_a {
            store.accum(a, da);
        }
        if need_b {
            store.accum(b, db);
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: Scalar) -> Scalar {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sign(x: Scalar) -> Scalar {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::gradcheck::max_grad_err;

    fn leaf_from(tape: &mut Tape, data: &[Scalar]) -> TensorRef {
        let t = Tensor::from_vec(vec![data.len()], data.to_vec())
            .unwrap()
            .with_grad();
        tape.leaf(&t).unwrap()
    }

    #[test]
    fn activation_fixed_points() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, &[0.0]);
        let si = tape.silu(x).unwrap();
        let sg = tape.sigmoid(x).unwrap();
        let sp = tape.softplus(x).unwrap();
        assert_eq!(tape.value(si)[0], 0.0);
        assert_eq!(tape.value(sg)[0], 0.5);
        // Independent oracle for ln 2: the series sum 1/(k 2^k).
        let ln2: Scalar = (1..60).map(|k| 1.0 / (k as Scalar * (2.0 as Scalar).powi(k))).sum();
        assert!((tape.value(sp)[0] - ln2).abs() < 1e-12);
    }

    #[test]
    fn binary_requires_matching_or_scalar_shapes() {
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, &[1.0, 2.0, 3.0]);
        let b = leaf_from(&mut tape, &[1.0, 2.0]);
        assert!(tape.add(a, b).is_err());
        let s = tape.scalar_const(2.0).unwrap();
        let y = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(y), &[2.0, 4.0, 6.0]);
        let y2 = tape.sub(s, a).unwrap();
        assert_eq!(tape.value(y2), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, &[1.0, 2.0]);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum_all(sq).unwrap();
        assert_eq!(tape.value(y)[0], 5.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x), vec![2.0, 4.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, &[1.0, 2.0]);
        let unused = leaf_from(&mut tape, &[7.0, 8.0, 9.0]);
        let y = tape.sum_all(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(unused), vec![0.0; 3]);
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, &[1.0]);
        let z = tape.scalar_const(0.0).unwrap();
        assert!(matches!(
            tape.div(x, z),
            Err(Error::NonFinite { op: "div" })
        ));
        let big = leaf_from(&mut tape, &[1e308]);
        assert!(tape.exp(big).is_err());
    }

    #[test]
    fn foreign_ref_is_rejected() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, &[1.0]);
        let _ = x;
        let mut other = Tape::new();
        assert!(other.relu(TensorRef(5)).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, &[1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        // Points chosen away from the relu/abs kinks.
        let x0 = [0.7, -1.3, 2.1, -0.4];
        for build in [
            |t: &mut Tape, x: TensorRef| {
                let y = t.relu(x)?;
                t.sum_all(y)
            },
            |t: &mut Tape, x: TensorRef| {
                let y = t.sigmoid(x)?;
                t.sum_all(y)
            },
            |t: &mut Tape, x: TensorRef| {
                let y = t.silu(x)?;
                t.sum_all(y)
            },
            |t: &mut Tape, x: TensorRef| {
                let y = t.softplus(x)?;
                t.sum_all(y)
            },
            |t: &mut Tape, x: TensorRef| {
                let y = t.exp(x)?;
                t.sum_all(y)
            },
            |t: &mut Tape, x: TensorRef| {
                let y = t.abs(x)?;
                t.sum_all(y)
            },
            |t: &mut Tape, x: TensorRef| {
                let y = t.neg(x)?;
                let y = t.scale(y, 1.5)?;
                let y = t.add_const(y, 0.25)?;
                t.mean_all(y)
            },
        ] {
            let err = max_grad_err(&x0, 1e-5, build).unwrap();
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn binary_gradients_match_finite_differences() {
        let x0 = [0.7, -1.3, 2.1, -0.4, 0.9, 1.7];
        let err = max_grad_err(&x0, 1e-5, |t, x| {
            let a = t.slice_extract(x, 0, 3)?;
            let b = t.slice_extract(x, 3, 3)?;
            let s = t.mul(a, b)?;
            let q = t.div(a, b)?;
            let m = t.sub(s, q)?;
            let m = t.add(m, a)?;
            t.sum_all(m)
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn slice_and_reshape_round_trip() {
        let mut tape = Tape::new();
        let t = Tensor::from_vec(vec![2, 3], (0..6).map(|v| v as Scalar).collect()).unwrap();
        let x = tape.leaf(&t).unwrap();
        let row1 = tape.slice_outer(x, 1).unwrap();
        assert_eq!(tape.shape(row1), &[3]);
        assert_eq!(tape.value(row1), &[3.0, 4.0, 5.0]);
        let r = tape.reshape(x, vec![3, 2]).unwrap();
        assert_eq!(tape.value(r), tape.value(x));
        assert!(tape.reshape(x, vec![4]).is_err());
        assert!(tape.slice_outer(x, 2).is_err());
    }
}

#[cfg(test)]
impl Tape {
    /// Test helper: views `count` elements starting at `start` of a rank-1
    /// tensor as a fresh gradient-carrying slice.
    pub(crate) fn slice_extract(
        &mut self,
        x: TensorRef,
        start: usize,
        count: usize,
    ) -> Result<TensorRef> {
        let idx: Vec<usize> = (start..start + count).collect();
        self.gather_rows(x, idx)
    }
}
