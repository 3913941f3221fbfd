//! Layer kernels on NHWC buffers.
//!
//! Convolutions are 3x3, stride 1, zero padding 1, lowered to a matrix
//! product through an im2col buffer of shape `[n*h*w, 9*c_in]` whose column
//! order is `(ky, kx, c_in)`. Kernels are stored as `[9*c_in, c_out]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// `c = a' * b' + beta * c`, where `'` is an optional transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    let a = ArrayView2::from_shape((a_rows, a_cols), a).expect("gemm: a shape");
    let b = ArrayView2::from_shape((b_rows, b_cols), b).expect("gemm: b shape");
    let a = if trans_a { a.t() } else { a };
    let b = if trans_b { b.t() } else { b };
    let mut c = ArrayViewMut2::from_shape((a.nrows(), b.ncols()), c).expect("gemm: c shape");
    general_mat_mul(T::one(), &a, &b, beta, &mut c);
}

pub fn im2col<T: Real>(input: &[T], d: Dims) -> Vec<T> {
    let k = 9 * d.c;
    let mut col = vec![T::zero(); d.pixels() * k];
    for b in 0..d.n {
        for y in 0..d.h {
            for x in 0..d.w {
                let row = ((b * d.h + y) * d.w + x) * k;
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let src = ((b * d.h + iy as usize) * d.w + ix as usize) * d.c;
                        let dst = row + (ky * 3 + kx) * d.c;
                        col[dst..dst + d.c].copy_from_slice(&input[src..src + d.c]);
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds an im2col gradient back to input positions.
pub fn col2im<T: Real>(dcol: &[T], d: Dims) -> Vec<T> {
    let k = 9 * d.c;
    let mut dinput = vec![T::zero(); d.len()];
    for b in 0..d.n {
        for y in 0..d.h {
            for x in 0..d.w {
                let row = ((b * d.h + y) * d.w + x) * k;
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let dst = ((b * d.h + iy as usize) * d.w + ix as usize) * d.c;
                        let src = row + (ky * 3 + kx) * d.c;
                        for (o, &g) in dinput[dst..dst + d.c].iter_mut().zip(&dcol[src..src + d.c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
    dinput
}

/// Returns `(output, im2col buffer)`; the buffer is needed for backward.
pub fn conv_forward<T: Real>(input: &[T], d: Dims, weight: &[T], bias: &[T], c_out: usize) -> (Vec<T>, Vec<T>) {
    let col = im2col(input, d);
    let rows = d.pixels();
    let mut out = Vec::with_capacity(rows * c_out);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(&col, rows, 9 * d.c, false, weight, 9 * d.c, c_out, false, T::one(), &mut out);
    (out, col)
}

pub struct ConvGrads<T> {
    pub dinput: Option<Vec<T>>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

/// Gradients of a convolution given its im2col buffer and output gradient.
/// `need_input` is false for the first layer.
pub fn conv_backward<T: Real>(
    dout: &[T],
    col: &[T],
    d: Dims,
    weight: &[T],
    c_out: usize,
    need_input: bool,
) -> ConvGrads<T> {
    let rows = d.pixels();
    let k = 9 * d.c;
    let mut dweight = vec![T::zero(); k * c_out];
    gemm(col, rows, k, true, dout, rows, c_out, false, T::zero(), &mut dweight);
    let mut dbias = vec![T::zero(); c_out];
    for r in dout.chunks_exact(c_out) {
        for (b, &g) in dbias.iter_mut().zip(r) {
            *b += g;
        }
    }
    let dinput = need_input.then(|| {
        let mut dcol = vec![T::zero(); rows * k];
        gemm(dout, rows, c_out, false, weight, k, c_out, true, T::zero(), &mut dcol);
        col2im(&dcol, d)
    });
    ConvGrads { dinput, dweight, dbias }
}

pub fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Masks `grad` with the ReLU output: gradient flows where the output is
/// strictly positive.
pub fn relu_backward_in_place<T: Real>(grad: &mut [T], output: &[T]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max-pool, stride 2. Returns the pooled buffer and, per output
/// element, the flat input index of the winner. Ties keep the first maximum
/// in scan order.
pub fn maxpool_forward<T: Real>(input: &[T], d: Dims) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (d.h / 2, d.w / 2);
    let mut out = Vec::with_capacity(d.n * oh * ow * d.c);
    let mut arg = Vec::with_capacity(out.capacity());
    for b in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..d.c {
                    let mut best_i = ((b * d.h + 2 * oy) * d.w + 2 * ox) * d.c + c;
                    let mut best = input[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((b * d.h + 2 * oy + dy) * d.w + 2 * ox + dx) * d.c + c;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Real>(dout: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut din = vec![T::zero(); input_len];
    for (&g, &i) in dout.iter().zip(arg) {
        din[i as usize] += g;
    }
    din
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Real>(input: &[T], d: Dims) -> Vec<T> {
    let (oh, ow) = (2 * d.h, 2 * d.w);
    let mut out = Vec::with_capacity(d.n * oh * ow * d.c);
    for b in 0..d.n {
        for y in 0..oh {
            for x in 0..ow {
                let src = ((b * d.h + y / 2) * d.w + x / 2) * d.c;
                out.extend_from_slice(&input[src..src + d.c]);
            }
        }
    }
    out
}

/// `d` is the dims of the (small) input.
pub fn upsample_backward<T: Real>(dout: &[T], d: Dims) -> Vec<T> {
    let (oh, ow) = (2 * d.h, 2 * d.w);
    let mut din = vec![T::zero(); d.len()];
    for b in 0..d.n {
        for y in 0..oh {
            for x in 0..ow {
                let dst = ((b * d.h + y / 2) * d.w + x / 2) * d.c;
                let src = ((b * oh + y) * ow + x) * d.c;
                for (o, &g) in din[dst..dst + d.c].iter_mut().zip(&dout[src..src + d.c]) {
                    *o += g;
                }
            }
        }
    }
    din
}
