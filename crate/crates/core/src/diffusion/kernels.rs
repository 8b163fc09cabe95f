//! Dense kernels for the denoiser: 3×3 "same" convolutions via im2col and
//! GEMM, 2× average pooling, 2× nearest upsampling, SiLU, and the adjoint of
//! each. Feature maps are channel-major `[c][h][w]` slices.

/// `C = op(A)·op(B) + beta·C` for row-major operands, where `op(A)` is
/// `m×k` and `op(B)` is `k×n`. A transposed operand is stored in its
/// untransposed shape (`k×m` or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given shapes and strides lies inside the corresponding slice, and `c`
    // is uniquely borrowed.
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

/// Unfolds `[cin][h][w]` into `[cin·9][h·w]` patches with zero padding.
pub(crate) fn im2col(input: &[f64], cin: usize, h: usize, w: usize, cols: &mut Vec<f64>) {
    let hw = h * w;
    cols.clear();
    cols.resize(cin * 9 * hw, 0.0);
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds patch gradients back onto `[cin][h][w]`.
pub(crate) fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    out.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Shape and parameter views of one 3×3 convolution layer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv3 {
    pub cin: usize,
    pub cout: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv3 {
    pub fn param_count(cin: usize, cout: usize) -> usize {
        cout * cin * 9 + cout
    }

    pub fn fan_in(&self) -> usize {
        self.cin * 9
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.weight..self.weight + self.cout * self.cin * 9]
    }

    /// `out = W ⋆ input + b`; leaves the unfolded input in `cols`.
    pub fn forward(
        &self,
        params: &[f64],
        input: &[f64],
        h: usize,
        w: usize,
        cols: &mut Vec<f64>,
        out: &mut Vec<f64>,
    ) {
        let hw = h * w;
        im2col(input, self.cin, h, w, cols);
        out.clear();
        out.resize(self.cout * hw, 0.0);
        gemm(self.cout, self.cin * 9, hw, self.weights(params), false, cols, false, 0.0, out);
        for (co, plane) in out.chunks_mut(hw).enumerate() {
            let b = params[self.bias + co];
            plane.iter_mut().for_each(|v| *v += b);
        }
    }

    /// Accumulates weight and bias gradients given the unfolded input.
    pub fn accumulate_param_grad(&self, grad_out: &[f64], cols: &[f64], hw: usize, grads: &mut [f64]) {
        let k = self.cin * 9;
        let dw = &mut grads[self.weight..self.weight + self.cout * k];
        gemm(self.cout, hw, k, grad_out, false, cols, true, 1.0, dw);
        for (co, plane) in grad_out.chunks(hw).enumerate() {
            grads[self.bias + co] += plane.iter().sum::<f64>();
        }
    }

    /// Gradient with respect to the layer input.
    pub fn input_grad(
        &self,
        params: &[f64],
        grad_out: &[f64],
        h: usize,
        w: usize,
        scratch: &mut Vec<f64>,
        grad_in: &mut Vec<f64>,
    ) {
        let hw = h * w;
        let k = self.cin * 9;
        scratch.clear();
        scratch.resize(k * hw, 0.0);
        gemm(k, self.cout, hw, self.weights(params), true, grad_out, false, 0.0, scratch);
        grad_in.clear();
        grad_in.resize(self.cin * hw, 0.0);
        col2im(scratch, self.cin, h, w, grad_in);
    }
}

/// 2×2 mean pooling of `[c][h][w]` into `[c][h/2][w/2]`.
pub(crate) fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let src = &input[ch * h * w..][..h * w];
        let dst = &mut out[ch * ho * wo..][..ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let i = 2 * y * w + 2 * x;
                dst[y * wo + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`], added into `grad_in` (`[c][h][w]`).
pub(crate) fn avg_pool2_adjoint_add(grad_out: &[f64], c: usize, h: usize, w: usize, grad_in: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        let src = &grad_out[ch * ho * wo..][..ho * wo];
        let dst = &mut grad_in[ch * h * w..][..h * w];
        for y in 0..ho {
            for x in 0..wo {
                let g = 0.25 * src[y * wo + x];
                let i = 2 * y * w + 2 * x;
                dst[i] += g;
                dst[i + 1] += g;
                dst[i + w] += g;
                dst[i + w + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2× upsampling of `[c][h][w]`, added into `out`
/// (`[c][2h][2w]`).
pub(crate) fn upsample2_add(input: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (ho, wo) = (2 * h, 2 * w);
    for ch in 0..c {
        let src = &input[ch * h * w..][..h * w];
        let dst = &mut out[ch * ho * wo..][..ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                dst[y * wo + x] += src[(y / 2) * w + x / 2];
            }
        }
    }
}

/// Adjoint of nearest upsampling: sums each 2×2 block of `[c][2h][2w]`.
pub(crate) fn upsample2_adjoint(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let wo = 2 * w;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &grad_out[ch * 4 * h * w..][..4 * h * w];
        let dst = &mut out[ch * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * wo + 2 * x;
                dst[y * w + x] = src[i] + src[i + 1] + src[i + wo] + src[i + wo + 1];
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a = pseudo_random(m * k, 1);
        let b = pseudo_random(k * n, 2);
        for &(at, bt) in &[(false, false), (true, false), (false, true), (true, true)] {
            let get_a = |i: usize, p: usize| if at { a[p * m + i] } else { a[i * k + p] };
            let get_b = |p: usize, j: usize| if bt { b[j * k + p] } else { b[p * n + j] };
            let mut c = vec![1.0; m * n];
            gemm(m, k, n, &a, at, &b, bt, 0.5, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let expected = 0.5 + (0..k).map(|p| get_a(i, p) * get_b(p, j)).sum::<f64>();
                    assert!((c[i * n + j] - expected).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (cin, cout, h, w) = (2, 3, 5, 4);
        let conv = Conv3 { cin, cout, weight: 0, bias: cout * cin * 9 };
        let params = pseudo_random(Conv3::param_count(cin, cout), 3);
        let input = pseudo_random(cin * h * w, 4);
        let (mut cols, mut out) = (Vec::new(), Vec::new());
        conv.forward(&params, &input, h, w, &mut cols, &mut out);
        for co in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = params[conv.bias + co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += params[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * input[(ci * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    assert!((out[(co * h + y) * w + x] - acc).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn adjoint_pairs() {
        let (c, h, w) = (2, 6, 4);
        let x = pseudo_random(c * h * w, 5);
        let cols_probe = pseudo_random(c * 9 * h * w, 6);
        let mut cols = Vec::new();
        im2col(&x, c, h, w, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im(&cols_probe, c, h, w, &mut back);
        assert!((dot(&cols, &cols_probe) - dot(&x, &back)).abs() < 1e-12);

        let pooled_probe = pseudo_random(c * h * w / 4, 7);
        let mut pooled_back = vec![0.0; c * h * w];
        avg_pool2_adjoint_add(&pooled_probe, c, h, w, &mut pooled_back);
        assert!((dot(&avg_pool2(&x, c, h, w), &pooled_probe) - dot(&x, &pooled_back)).abs() < 1e-12);

        let small = pseudo_random(c * 3 * 2, 8);
        let mut up = vec![0.0; c * 6 * 4];
        upsample2_add(&small, c, 3, 2, &mut up);
        let probe = pseudo_random(c * 6 * 4, 9);
        assert!((dot(&up, &probe) - dot(&small, &upsample2_adjoint(&probe, c, 3, 2))).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative_matches_difference_quotient() {
        for &x in &[-4.0, -1.0, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_derivative(x)).abs() < 1e-8);
        }
    }
}
