//! 2-D convolution, its two adjoints, and max pooling.
//!
//! `conv2d`, `conv2d_grad_input`, and `conv2d_grad_weight` form a closed
//! triple: the backward rule of each is expressed with the other two (the
//! map is bilinear in input and weight), so arbitrarily nested gradients
//! work. `conv2d_grad_input` doubles as the forward pass of a transposed
//! convolution, which is how the generator upsamples.
//!
//! Data layout is NCHW for activations and `(out_ch, in_ch, kh, kw)` for
//! kernels. Padding is symmetric zero padding; output sizes use the usual
//! floor rule `(dim + 2*pad - kernel) / stride + 1`.

use super::{BackwardOp, Tensor};
use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};

fn out_dim(dim: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        dim + 2 * pad >= kernel,
        "conv: kernel {kernel} larger than padded input {}",
        dim + 2 * pad
    );
    (dim + 2 * pad - kernel) / stride + 1
}

fn dims4(t: &Tensor, what: &str) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "{what}: expected rank 4, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

// ---------------------------------------------------------------------------
// raw kernels (plain array in, plain array out)
// ---------------------------------------------------------------------------

/// Unfold padded patches into a `(n*oh*ow, ci*kh*kw)` matrix.
fn im2col(
    x: &ArrayViewD<f64>,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
) -> (Array2<f64>, usize, usize) {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = out_dim(h, kh, sh, ph);
    let ow = out_dim(w, kw, sw, pw);
    let xs = x.as_standard_layout();
    let xf = xs.as_slice().expect("standard layout");

    let cols = ci * kh * kw;
    let mut col = vec![0.0; n * oh * ow * cols];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let row = ((b * oh + i) * ow + j) * cols;
                for c in 0..ci {
                    let xc = (b * ci + c) * h * w;
                    for u in 0..kh {
                        let ih = (i * sh + u) as isize - ph as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        let xr = xc + ih as usize * w;
                        let cr = row + (c * kh + u) * kw;
                        for v in 0..kw {
                            let iw = (j * sw + v) as isize - pw as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            col[cr + v] = xf[xr + iw as usize];
                        }
                    }
                }
            }
        }
    }
    (
        Array2::from_shape_vec((n * oh * ow, cols), col).expect("im2col shape"),
        oh,
        ow,
    )
}

/// Scatter-add a `(n*oh*ow, ci*kh*kw)` patch matrix back onto the input grid
/// (the adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im(
    contrib: &Array2<f64>,
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) -> ArrayD<f64> {
    let cf = contrib.as_slice().expect("standard layout");
    let cols = ci * kh * kw;
    let mut out = vec![0.0; n * ci * h * w];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let row = ((b * oh + i) * ow + j) * cols;
                for c in 0..ci {
                    let xc = (b * ci + c) * h * w;
                    for u in 0..kh {
                        let ih = (i * sh + u) as isize - ph as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        let xr = xc + ih as usize * w;
                        let cr = row + (c * kh + u) * kw;
                        for v in 0..kw {
                            let iw = (j * sw + v) as isize - pw as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            out[xr + iw as usize] += cf[cr + v];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, ci, h, w]), out).expect("col2im shape")
}

/// `(n, co, oh, ow)` -> `(n*oh*ow, co)` row-major by output position.
fn nchw_to_rows(g: &ArrayViewD<f64>) -> Array2<f64> {
    let (n, co, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let gs = g.as_standard_layout();
    let gf = gs.as_slice().expect("standard layout");
    let mut rows = vec![0.0; n * oh * ow * co];
    for b in 0..n {
        for c in 0..co {
            let src = (b * co + c) * oh * ow;
            for p in 0..oh * ow {
                rows[((b * oh * ow) + p) * co + c] = gf[src + p];
            }
        }
    }
    Array2::from_shape_vec((n * oh * ow, co), rows).expect("rows shape")
}

fn rows_to_nchw(rows: &Array2<f64>, n: usize, co: usize, oh: usize, ow: usize) -> ArrayD<f64> {
    let rf = rows.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for c in 0..co {
            let dst = (b * co + c) * oh * ow;
            for p in 0..oh * ow {
                out[dst + p] = rf[((b * oh * ow) + p) * co + c];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, co, oh, ow]), out).expect("nchw shape")
}

fn weight_matrix(w: &ArrayViewD<f64>) -> Array2<f64> {
    let (co, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    w.as_standard_layout()
        .to_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .expect("weight matrix")
}

fn conv2d_data(
    x: &ArrayViewD<f64>,
    w: &ArrayViewD<f64>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> ArrayD<f64> {
    let (n, _ci, _h, _w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (col, oh, ow) = im2col(x, kh, kw, stride.0, stride.1, padding.0, padding.1);
    let w2 = weight_matrix(w);
    let out2 = col.dot(&w2.t());
    rows_to_nchw(&out2, n, co, oh, ow)
}

fn conv_grad_input_data(
    gout: &ArrayViewD<f64>,
    w: &ArrayViewD<f64>,
    stride: (usize, usize),
    padding: (usize, usize),
    input_hw: (usize, usize),
) -> ArrayD<f64> {
    let (n, _co, oh, ow) = (
        gout.shape()[0],
        gout.shape()[1],
        gout.shape()[2],
        gout.shape()[3],
    );
    let (_, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let g2 = nchw_to_rows(gout);
    let w2 = weight_matrix(w);
    let contrib = g2.dot(&w2);
    col2im(
        &contrib, n, ci, input_hw.0, input_hw.1, kh, kw, stride.0, stride.1, padding.0, padding.1,
        oh, ow,
    )
}

fn conv_grad_weight_data(
    x: &ArrayViewD<f64>,
    gout: &ArrayViewD<f64>,
    stride: (usize, usize),
    padding: (usize, usize),
    kernel_hw: (usize, usize),
) -> ArrayD<f64> {
    let ci = x.shape()[1];
    let co = gout.shape()[1];
    let (col, _oh, _ow) = im2col(
        x, kernel_hw.0, kernel_hw.1, stride.0, stride.1, padding.0, padding.1,
    );
    let g2 = nchw_to_rows(gout);
    let dw2 = g2.t().dot(&col);
    dw2.into_shape_with_order(IxDyn(&[co, ci, kernel_hw.0, kernel_hw.1]))
        .expect("grad weight shape")
}

// ---------------------------------------------------------------------------
// graph ops
// ---------------------------------------------------------------------------

struct Conv2dOp {
    stride: (usize, usize),
    padding: (usize, usize),
}
impl BackwardOp for Conv2dOp {
    fn backward(&self, p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (&p[0], &p[1]);
        let input_hw = (x.shape()[2], x.shape()[3]);
        let kernel_hw = (w.shape()[2], w.shape()[3]);
        let gx = conv2d_grad_input(g, w, self.stride, self.padding, input_hw);
        let gw = conv2d_grad_weight(x, g, self.stride, self.padding, kernel_hw);
        vec![Some(gx), Some(gw)]
    }
    fn name(&self) -> &'static str {
        "conv2d"
    }
}

struct ConvGradInputOp {
    stride: (usize, usize),
    padding: (usize, usize),
}
impl BackwardOp for ConvGradInputOp {
    fn backward(&self, p: &[Tensor], _o: &Tensor, u: &Tensor) -> Vec<Option<Tensor>> {
        let (a, w) = (&p[0], &p[1]);
        let kernel_hw = (w.shape()[2], w.shape()[3]);
        // out = a (*) w  is bilinear: d/da is a plain conv of the cotangent,
        // d/dw correlates the cotangent (input role) with a (output role).
        let ga = conv2d(u, w, self.stride, self.padding);
        let gw = conv2d_grad_weight(u, a, self.stride, self.padding, kernel_hw);
        vec![Some(ga), Some(gw)]
    }
    fn name(&self) -> &'static str {
        "conv2d_grad_input"
    }
}

struct ConvGradWeightOp {
    stride: (usize, usize),
    padding: (usize, usize),
}
impl BackwardOp for ConvGradWeightOp {
    fn backward(&self, p: &[Tensor], _o: &Tensor, v: &Tensor) -> Vec<Option<Tensor>> {
        let (x, a) = (&p[0], &p[1]);
        let input_hw = (x.shape()[2], x.shape()[3]);
        let gx = conv2d_grad_input(a, v, self.stride, self.padding, input_hw);
        let ga = conv2d(x, v, self.stride, self.padding);
        vec![Some(gx), Some(ga)]
    }
    fn name(&self) -> &'static str {
        "conv2d_grad_weight"
    }
}

/// Cross-correlation of `x` `(n, ci, h, w)` with kernels `w`
/// `(co, ci, kh, kw)`, symmetric zero `padding`, floor output rule.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Tensor {
    let (_n, ci, h, wd) = dims4(x, "conv2d input");
    let (_co, wci, kh, kw) = dims4(w, "conv2d weight");
    assert_eq!(ci, wci, "conv2d: channel mismatch");
    out_dim(h, kh, stride.0, padding.0);
    out_dim(wd, kw, stride.1, padding.1);
    let data = conv2d_data(&x.data().view(), &w.data().view(), stride, padding);
    Tensor::from_op(
        data,
        vec![x.clone(), w.clone()],
        Box::new(Conv2dOp { stride, padding }),
    )
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output-shaped
/// tensor back to an input of size `input_hw`. Also the forward pass of a
/// transposed convolution (see [`conv_transpose2d`]).
pub fn conv2d_grad_input(
    gout: &Tensor,
    w: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    input_hw: (usize, usize),
) -> Tensor {
    let (_n, co, oh, ow) = dims4(gout, "conv2d_grad_input gout");
    let (wco, _ci, kh, kw) = dims4(w, "conv2d_grad_input weight");
    assert_eq!(co, wco, "conv2d_grad_input: channel mismatch");
    assert_eq!(
        out_dim(input_hw.0, kh, stride.0, padding.0),
        oh,
        "conv2d_grad_input: inconsistent output height"
    );
    assert_eq!(
        out_dim(input_hw.1, kw, stride.1, padding.1),
        ow,
        "conv2d_grad_input: inconsistent output width"
    );
    let data = conv_grad_input_data(
        &gout.data().view(),
        &w.data().view(),
        stride,
        padding,
        input_hw,
    );
    Tensor::from_op(
        data,
        vec![gout.clone(), w.clone()],
        Box::new(ConvGradInputOp { stride, padding }),
    )
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_weight(
    x: &Tensor,
    gout: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    kernel_hw: (usize, usize),
) -> Tensor {
    let (n, _ci, h, w) = dims4(x, "conv2d_grad_weight input");
    let (gn, _co, oh, ow) = dims4(gout, "conv2d_grad_weight gout");
    assert_eq!(n, gn, "conv2d_grad_weight: batch mismatch");
    assert_eq!(
        out_dim(h, kernel_hw.0, stride.0, padding.0),
        oh,
        "conv2d_grad_weight: inconsistent output height"
    );
    assert_eq!(
        out_dim(w, kernel_hw.1, stride.1, padding.1),
        ow,
        "conv2d_grad_weight: inconsistent output width"
    );
    let data = conv_grad_weight_data(
        &x.data().view(),
        &gout.data().view(),
        stride,
        padding,
        kernel_hw,
    );
    Tensor::from_op(
        data,
        vec![x.clone(), gout.clone()],
        Box::new(ConvGradWeightOp { stride, padding }),
    )
}

/// Transposed convolution (fractionally strided upsampling).
///
/// `x` is `(n, in_ch, h, w)`, `weight` is `(in_ch, out_ch, kh, kw)`, and
/// `output_hw` picks the output size among the `stride` candidates that the
/// floor rule folds together.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    output_hw: (usize, usize),
) -> Tensor {
    conv2d_grad_input(x, weight, stride, padding, output_hw)
}

// ---------------------------------------------------------------------------
// max pooling (scatter/gather closed pair over captured argmax indices)
// ---------------------------------------------------------------------------

use std::rc::Rc;

struct PoolIndices {
    /// For each output element (row-major NCHW), the flat index of the input
    /// element that won the max.
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

struct MaxPoolOp {
    idx: Rc<PoolIndices>,
}
impl BackwardOp for MaxPoolOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(pool_scatter(g, self.idx.clone()))]
    }
    fn name(&self) -> &'static str {
        "maxpool2d"
    }
}

struct PoolScatterOp {
    idx: Rc<PoolIndices>,
}
impl BackwardOp for PoolScatterOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(pool_gather(g, self.idx.clone()))]
    }
    fn name(&self) -> &'static str {
        "pool_scatter"
    }
}

struct PoolGatherOp {
    idx: Rc<PoolIndices>,
}
impl BackwardOp for PoolGatherOp {
    fn backward(&self, _p: &[Tensor], _o: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(pool_scatter(g, self.idx.clone()))]
    }
    fn name(&self) -> &'static str {
        "pool_gather"
    }
}

/// Route output-shaped values to the argmax positions (zeros elsewhere).
fn pool_scatter(g: &Tensor, idx: Rc<PoolIndices>) -> Tensor {
    assert_eq!(g.shape(), &idx.output_shape[..], "pool_scatter shape");
    let gs = g.data().as_standard_layout();
    let gf = gs.as_slice().expect("standard layout");
    let mut out = vec![0.0; idx.input_shape.iter().product()];
    for (o, &i) in idx.argmax.iter().enumerate() {
        out[i] += gf[o];
    }
    let data = ArrayD::from_shape_vec(IxDyn(&idx.input_shape), out).expect("scatter shape");
    Tensor::from_op(data, vec![g.clone()], Box::new(PoolScatterOp { idx }))
}

/// Read input-shaped values back at the argmax positions.
fn pool_gather(u: &Tensor, idx: Rc<PoolIndices>) -> Tensor {
    assert_eq!(u.shape(), &idx.input_shape[..], "pool_gather shape");
    let us = u.data().as_standard_layout();
    let uf = us.as_slice().expect("standard layout");
    let vals: Vec<f64> = idx.argmax.iter().map(|&i| uf[i]).collect();
    let data = ArrayD::from_shape_vec(IxDyn(&idx.output_shape), vals).expect("gather shape");
    Tensor::from_op(data, vec![u.clone()], Box::new(PoolGatherOp { idx }))
}

/// Max pooling over `kernel` windows at `stride`, no padding. Ties keep the
/// first (row-major) maximum, matching the deterministic scatter in the
/// backward pass.
pub fn maxpool2d(x: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Tensor {
    let (n, c, h, w) = dims4(x, "maxpool2d input");
    let oh = out_dim(h, kernel.0, stride.0, 0);
    let ow = out_dim(w, kernel.1, stride.1, 0);
    let xs = x.data().as_standard_layout();
    let xf = xs.as_slice().expect("standard layout");

    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for u in 0..kernel.0 {
                        let ih = i * stride.0 + u;
                        for v in 0..kernel.1 {
                            let iw = j * stride.1 + v;
                            let val = xf[base + ih * w + iw];
                            if val > best {
                                best = val;
                                best_idx = base + ih * w + iw;
                            }
                        }
                    }
                    let o = ((b * c + ch) * oh + i) * ow + j;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    let idx = Rc::new(PoolIndices {
        argmax,
        input_shape: vec![n, c, h, w],
        output_shape: vec![n, c, oh, ow],
    });
    let data = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).expect("pool shape");
    Tensor::from_op(data, vec![x.clone()], Box::new(MaxPoolOp { idx }))
}
