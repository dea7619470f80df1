//! Elementwise, matrix, reduction, and shape ops with differentiable
//! backward rules.
//!
//! Backward implementations are written in terms of the same public ops, so
//! every gradient is itself a graph that [`grad`](super::grad) can
//! differentiate again. Binary elementwise ops require exactly matching
//! shapes; use [`Tensor::broadcast_to`] / [`Tensor::reshape`] to line shapes
//! up explicitly.

use super::{BackwardOp, Tensor};
use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, IxDyn, Slice};

fn same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

// ---------------------------------------------------------------------------
// binary elementwise
// ---------------------------------------------------------------------------

struct AddOp;
impl BackwardOp for AddOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
    fn name(&self) -> &'static str {
        "add"
    }
}

struct SubOp;
impl BackwardOp for SubOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone()), Some(-g)]
    }
    fn name(&self) -> &'static str {
        "sub"
    }
}

struct MulOp;
impl BackwardOp for MulOp {
    fn backward(&self, p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g * &p[1]), Some(g * &p[0])]
    }
    fn name(&self) -> &'static str {
        "mul"
    }
}

struct DivOp;
impl BackwardOp for DivOp {
    fn backward(&self, p: &[Tensor], o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        // d(a/b)/da = 1/b,  d(a/b)/db = -a/b^2 = -(a/b)/b
        let ga = g / &p[1];
        let gb = -&(&(g * o) / &p[1]);
        vec![Some(ga), Some(gb)]
    }
    fn name(&self) -> &'static str {
        "div"
    }
}

impl std::ops::Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        same_shape("add", self, rhs);
        Tensor::from_op(
            self.data() + rhs.data(),
            vec![self.clone(), rhs.clone()],
            Box::new(AddOp),
        )
    }
}

impl std::ops::Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        same_shape("sub", self, rhs);
        Tensor::from_op(
            self.data() - rhs.data(),
            vec![self.clone(), rhs.clone()],
            Box::new(SubOp),
        )
    }
}

impl std::ops::Mul for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: &Tensor) -> Tensor {
        same_shape("mul", self, rhs);
        Tensor::from_op(
            self.data() * rhs.data(),
            vec![self.clone(), rhs.clone()],
            Box::new(MulOp),
        )
    }
}

impl std::ops::Div for &Tensor {
    type Output = Tensor;
    fn div(self, rhs: &Tensor) -> Tensor {
        same_shape("div", self, rhs);
        Tensor::from_op(
            self.data() / rhs.data(),
            vec![self.clone(), rhs.clone()],
            Box::new(DivOp),
        )
    }
}

// ---------------------------------------------------------------------------
// unary
// ---------------------------------------------------------------------------

struct NegOp;
impl BackwardOp for NegOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(-g)]
    }
    fn name(&self) -> &'static str {
        "neg"
    }
}

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::from_op(
            self.data().mapv(|v| -v),
            vec![self.clone()],
            Box::new(NegOp),
        )
    }
}

struct ScaleOp(f64);
impl BackwardOp for ScaleOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.scale(self.0))]
    }
    fn name(&self) -> &'static str {
        "scale"
    }
}

struct AddScalarOp;
impl BackwardOp for AddScalarOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone())]
    }
    fn name(&self) -> &'static str {
        "add_scalar"
    }
}

/// Elementwise multiply by a captured constant mask. Used as the backward of
/// the piecewise-linear activations, where the local slope is constant
/// almost everywhere.
struct MaskMulOp(ArrayD<f64>);
impl BackwardOp for MaskMulOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.mask_mul(self.0.clone()))]
    }
    fn name(&self) -> &'static str {
        "mask_mul"
    }
}

struct TanhOp;
impl BackwardOp for TanhOp {
    fn backward(&self, _p: &[Tensor], o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        // 1 - tanh^2
        let one_minus = (-&o.square()).add_scalar(1.0);
        vec![Some(g * &one_minus)]
    }
    fn name(&self) -> &'static str {
        "tanh"
    }
}

struct SigmoidOp;
impl BackwardOp for SigmoidOp {
    fn backward(&self, _p: &[Tensor], o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        // s * (1 - s)
        let ds = o * &(-o).add_scalar(1.0);
        vec![Some(g * &ds)]
    }
    fn name(&self) -> &'static str {
        "sigmoid"
    }
}

struct ExpOp;
impl BackwardOp for ExpOp {
    fn backward(&self, _p: &[Tensor], o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g * o)]
    }
    fn name(&self) -> &'static str {
        "exp"
    }
}

struct LnOp;
impl BackwardOp for LnOp {
    fn backward(&self, p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g / &p[0])]
    }
    fn name(&self) -> &'static str {
        "ln"
    }
}

struct SqrtOp;
impl BackwardOp for SqrtOp {
    fn backward(&self, _p: &[Tensor], o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        // 1 / (2 sqrt(x)); intentionally no epsilon -- a zero argument must
        // surface as a non-finite gradient instead of being masked.
        vec![Some(g / &o.scale(2.0))]
    }
    fn name(&self) -> &'static str {
        "sqrt"
    }
}

impl Tensor {
    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_op(
            self.data().mapv(|v| c * v),
            vec![self.clone()],
            Box::new(ScaleOp(c)),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(
            self.data().mapv(|v| v + c),
            vec![self.clone()],
            Box::new(AddScalarOp),
        )
    }

    fn mask_mul(&self, mask: ArrayD<f64>) -> Tensor {
        assert_eq!(self.shape(), mask.shape(), "mask_mul: shape mismatch");
        Tensor::from_op(
            self.data() * &mask,
            vec![self.clone()],
            Box::new(MaskMulOp(mask)),
        )
    }

    pub fn relu(&self) -> Tensor {
        let mask = self.data().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.mask_mul(mask)
    }

    pub fn leaky_relu(&self, negative_slope: f64) -> Tensor {
        let mask = self
            .data()
            .mapv(|v| if v > 0.0 { 1.0 } else { negative_slope });
        self.mask_mul(mask)
    }

    pub fn tanh(&self) -> Tensor {
        Tensor::from_op(
            self.data().mapv(f64::tanh),
            vec![self.clone()],
            Box::new(TanhOp),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        Tensor::from_op(
            self.data().mapv(|v| 1.0 / (1.0 + (-v).exp())),
            vec![self.clone()],
            Box::new(SigmoidOp),
        )
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(
            self.data().mapv(f64::exp),
            vec![self.clone()],
            Box::new(ExpOp),
        )
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(
            self.data().mapv(f64::ln),
            vec![self.clone()],
            Box::new(LnOp),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        Tensor::from_op(
            self.data().mapv(f64::sqrt),
            vec![self.clone()],
            Box::new(SqrtOp),
        )
    }

    pub fn square(&self) -> Tensor {
        self * self
    }
}

// ---------------------------------------------------------------------------
// matrix ops (2-D only)
// ---------------------------------------------------------------------------

struct MatmulOp;
impl BackwardOp for MatmulOp {
    fn backward(&self, p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let ga = g.matmul(&p[1].transpose2d());
        let gb = p[0].transpose2d().matmul(g);
        vec![Some(ga), Some(gb)]
    }
    fn name(&self) -> &'static str {
        "matmul"
    }
}

struct TransposeOp;
impl BackwardOp for TransposeOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.transpose2d())]
    }
    fn name(&self) -> &'static str {
        "transpose2d"
    }
}

impl Tensor {
    /// Matrix product of two rank-2 tensors: `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let a = self
            .data()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: lhs must be rank 2");
        let b = rhs
            .data()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: rhs must be rank 2");
        assert_eq!(
            a.ncols(),
            b.nrows(),
            "matmul: inner dims {:?} x {:?}",
            self.shape(),
            rhs.shape()
        );
        let out = a.dot(&b).into_dyn();
        Tensor::from_op(out, vec![self.clone(), rhs.clone()], Box::new(MatmulOp))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "transpose2d: rank must be 2");
        let out = self.data().t().to_owned();
        Tensor::from_op(out, vec![self.clone()], Box::new(TransposeOp))
    }
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

struct ReshapeOp {
    orig: Vec<usize>,
}
impl BackwardOp for ReshapeOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.reshape(&self.orig))]
    }
    fn name(&self) -> &'static str {
        "reshape"
    }
}

struct BroadcastToOp {
    orig: Vec<usize>,
}
impl BackwardOp for BroadcastToOp {
    fn backward(&self, _p: &[Tensor], o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let axes: Vec<usize> = self
            .orig
            .iter()
            .zip(o.shape())
            .enumerate()
            .filter(|(_, (&od, &nd))| od == 1 && nd != 1)
            .map(|(i, _)| i)
            .collect();
        let summed = if axes.is_empty() {
            g.clone()
        } else {
            g.sum_axes(&axes, true)
        };
        vec![Some(summed)]
    }
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
}

struct SumAxesOp {
    axes: Vec<usize>,
    keepdim: bool,
    orig: Vec<usize>,
}
impl BackwardOp for SumAxesOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let kept = if self.keepdim {
            g.clone()
        } else {
            let mut shape = self.orig.clone();
            for &ax in &self.axes {
                shape[ax] = 1;
            }
            g.reshape(&shape)
        };
        vec![Some(kept.broadcast_to(&self.orig))]
    }
    fn name(&self) -> &'static str {
        "sum_axes"
    }
}

impl Tensor {
    /// Same elements in row-major order, new shape (total size must match).
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let orig = self.shape().to_vec();
        // Normalize layout first: transposes and concatenations can leave
        // non-standard strides, and reinterpretation is defined row-major.
        let out = self
            .data()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| {
                panic!("reshape: {:?} -> {:?} size mismatch", orig, shape);
            });
        Tensor::from_op(out, vec![self.clone()], Box::new(ReshapeOp { orig }))
    }

    /// Expand size-1 axes to `shape`. Rank must already match; use
    /// [`Tensor::reshape`] first to insert axes.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        let orig = self.shape().to_vec();
        assert_eq!(
            orig.len(),
            shape.len(),
            "broadcast_to: rank mismatch {:?} -> {:?}",
            orig,
            shape
        );
        for (&od, &nd) in orig.iter().zip(shape) {
            assert!(
                od == nd || od == 1,
                "broadcast_to: cannot expand {:?} to {:?}",
                orig,
                shape
            );
        }
        let out = self
            .data()
            .broadcast(IxDyn(shape))
            .expect("broadcast_to: checked dims")
            .to_owned();
        Tensor::from_op(out, vec![self.clone()], Box::new(BroadcastToOp { orig }))
    }

    /// Sum over `axes`. With `keepdim` the reduced axes stay as size 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        assert!(!axes.is_empty(), "sum_axes: empty axis list");
        let orig = self.shape().to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), axes.len(), "sum_axes: duplicate axes");
        assert!(
            *sorted.last().expect("nonempty") < orig.len(),
            "sum_axes: axis out of range for shape {:?}",
            orig
        );

        let mut out = self.data().clone();
        // Reduce from the highest axis down so earlier indices stay valid.
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(Axis(ax));
        }
        if keepdim {
            let mut shape = orig.clone();
            for &ax in &sorted {
                shape[ax] = 1;
            }
            out = out
                .into_shape_with_order(IxDyn(&shape))
                .expect("sum_axes: keepdim reshape");
        }
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(SumAxesOp {
                axes: sorted,
                keepdim,
                orig,
            }),
        )
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let count: usize = axes.iter().map(|&ax| self.shape()[ax]).product();
        self.sum_axes(axes, keepdim).scale(1.0 / count as f64)
    }

    /// Sum of all elements as a `[1]`-shaped scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        self.reshape(&[self.len()]).sum_axes(&[0], true)
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// concat / narrow / zero-pad (a closed trio: each one's backward is another)
// ---------------------------------------------------------------------------

struct ConcatOp {
    axis: usize,
    offsets: Vec<usize>,
    lens: Vec<usize>,
}
impl BackwardOp for ConcatOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        self.offsets
            .iter()
            .zip(&self.lens)
            .map(|(&off, &len)| Some(g.narrow(self.axis, off, len)))
            .collect()
    }
    fn name(&self) -> &'static str {
        "concat"
    }
}

struct NarrowOp {
    axis: usize,
    start: usize,
    orig_len: usize,
}
impl BackwardOp for NarrowOp {
    fn backward(&self, _p: &[Tensor], o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let len = o.shape()[self.axis];
        let after = self.orig_len - self.start - len;
        vec![Some(g.pad_zero(self.axis, self.start, after))]
    }
    fn name(&self) -> &'static str {
        "narrow"
    }
}

struct PadZeroOp {
    axis: usize,
    before: usize,
    orig_len: usize,
}
impl BackwardOp for PadZeroOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.narrow(self.axis, self.before, self.orig_len))]
    }
    fn name(&self) -> &'static str {
        "pad_zero"
    }
}

/// Concatenate along `axis`; all other dims must match.
pub fn concat(tensors: &[Tensor], axis: usize) -> Tensor {
    assert!(!tensors.is_empty(), "concat: no inputs");
    let rank = tensors[0].shape().len();
    assert!(axis < rank, "concat: axis {axis} out of range");
    for t in tensors {
        assert_eq!(t.shape().len(), rank, "concat: rank mismatch");
        for d in 0..rank {
            if d != axis {
                assert_eq!(
                    t.shape()[d],
                    tensors[0].shape()[d],
                    "concat: dim {d} mismatch"
                );
            }
        }
    }
    let views: Vec<ArrayViewD<f64>> = tensors.iter().map(|t| t.data().view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat: checked dims");

    let mut offsets = Vec::with_capacity(tensors.len());
    let mut lens = Vec::with_capacity(tensors.len());
    let mut off = 0;
    for t in tensors {
        offsets.push(off);
        lens.push(t.shape()[axis]);
        off += t.shape()[axis];
    }
    Tensor::from_op(
        out,
        tensors.to_vec(),
        Box::new(ConcatOp {
            axis,
            offsets,
            lens,
        }),
    )
}

impl Tensor {
    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let orig_len = self.shape()[axis];
        assert!(
            start + len <= orig_len,
            "narrow: [{start}, {}) out of range 0..{orig_len}",
            start + len
        );
        let out = self
            .data()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(NarrowOp {
                axis,
                start,
                orig_len,
            }),
        )
    }

    /// Zero padding along one axis: `before` zeros, the data, `after` zeros.
    pub fn pad_zero(&self, axis: usize, before: usize, after: usize) -> Tensor {
        let orig_len = self.shape()[axis];
        let mut shape = self.shape().to_vec();
        shape[axis] = before + orig_len + after;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(before..before + orig_len))
            .assign(self.data());
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(PadZeroOp {
                axis,
                before,
                orig_len,
            }),
        )
    }
}
