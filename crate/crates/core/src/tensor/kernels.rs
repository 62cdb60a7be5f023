//! Raw buffer kernels behind the graph operations.

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit in the padded input.
pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride > 0 && kernel <= padded).then(|| (padded - kernel) / stride + 1)
}

/// Source row (or column) sampled by nearest-neighbour resampling.
#[inline]
pub fn upsample_index(target_index: usize, source_extent: usize, target_extent: usize) -> usize {
    target_index * source_extent / target_extent
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Visits every (patch-matrix offset, input offset) pair that lands inside
    /// the unpadded input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.padding as isize);
        let positions = self.positions();
        for c in 0..self.c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oi in 0..self.h_out {
                        let ii = (oi * s) as isize + ki as isize - p;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let base_in = (c * self.h + ii as usize) * self.w;
                        for oj in 0..self.w_out {
                            let jj = (oj * s) as isize + kj as isize - p;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            f(row * positions + oi * self.w_out + oj, base_in + jj as usize);
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `input` (C×H×W) into a (C·k·k)×(H'·W') patch matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.patch_len() * g.positions()];
    g.for_each_tap(|col, src| cols[col] = input[src]);
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    g.for_each_tap(|col, dst| out[dst] += cols[col]);
    out
}

/// `c = a·b + beta·c` for row-major operands, with optional transposition of
/// `a` (stored k×m) and `b` (stored n×k).
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
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` is exclusively borrowed.
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
