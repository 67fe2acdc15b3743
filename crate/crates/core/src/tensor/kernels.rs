//! Raw buffer kernels shared by the forward and backward passes.

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is
/// `k x n`. A transposed operand is stored in its untransposed row-major form.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides address exactly
    // the `m x k`, `k x n` and `m x n` row-major (or transposed) buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits a shape around `axis` into `(outer, dim, inner)` extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output `out[idx] = input[permuted idx]`, where output axis `i` is input
/// axis `axes[i]`.
pub(crate) fn permute(input: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = input.len();
    let mut out = Vec::with_capacity(total);
    let rank = out_shape.len();
    if rank == 0 {
        return (out_shape, input.to_vec());
    }
    // Innermost axis handled as a strided run; outer axes via an odometer.
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    let mut counter = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < total {
        let mut src = base;
        for _ in 0..run {
            out.push(input[src]);
            src += run_stride;
        }
        // advance odometer on axes [0, last)
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            base += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Softmax over `axis` with max subtraction.
pub(crate) fn softmax(input: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |d: usize| o * dim * inner + d * inner + i;
            let max = (0..dim).map(|d| input[at(d)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for d in 0..dim {
                let e = (input[at(d)] - max).exp();
                out[at(d)] = e;
                total += e;
            }
            for d in 0..dim {
                out[at(d)] /= total;
            }
        }
    }
    out
}

/// Sum over `axis`, dropping it.
pub(crate) fn sum_axis(input: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for d in 0..dim {
            let src = &input[(o * dim + d) * inner..(o * dim + d + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (x, y) in dst.iter_mut().zip(src) {
                *x += y;
            }
        }
    }
    out
}

/// Broadcast `input` (numpy rules, left-padded with unit axes) to `target`.
pub(crate) fn broadcast(input: &[f64], shape: &[usize], target: &[usize]) -> Vec<f64> {
    let pad = target.len() - shape.len();
    let src_shape: Vec<usize> = std::iter::repeat_n(1, pad).chain(shape.iter().copied()).collect();
    let src_strides = strides(&src_shape);
    let eff: Vec<usize> = src_shape
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let total: usize = target.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; target.len()];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(input[src]);
        let mut ax = target.len();
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            src += eff[ax];
            if counter[ax] < target[ax] {
                break;
            }
            src -= eff[ax] * target[ax];
            counter[ax] = 0;
        }
    }
    out
}

/// Adjoint of [`broadcast`]: sum `grad` (shaped `target`) back onto `shape`.
pub(crate) fn unbroadcast(grad: &[f64], shape: &[usize], target: &[usize]) -> Vec<f64> {
    let pad = target.len() - shape.len();
    let src_shape: Vec<usize> = std::iter::repeat_n(1, pad).chain(shape.iter().copied()).collect();
    let src_strides = strides(&src_shape);
    let eff: Vec<usize> = src_shape
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut out = vec![0.0; shape.iter().product()];
    let mut counter = vec![0usize; target.len()];
    let mut src = 0usize;
    for &g in grad {
        out[src] += g;
        let mut ax = target.len();
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            src += eff[ax];
            if counter[ax] < target[ax] {
                break;
            }
            src -= eff[ax] * target[ax];
            counter[ax] = 0;
        }
    }
    out
}
