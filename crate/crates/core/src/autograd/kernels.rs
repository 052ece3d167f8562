//! Dense f32 kernels shared by the forward and backward passes.

/// `c (+)= a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`, with optional
/// transposition of either operand (the buffer is then read as its transpose).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // stored a is m×k (rsa=k, csa=1) or, when transposed, k×m (rsa=1, csa=m)
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are sized m*k, k*n and m*n (asserted above) and the
    // strides index within them.
    unsafe {
        matrixmultiply::sgemm(
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

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out` with the linear offsets of the two
/// broadcast operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if a == out && b == out {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    let nb = numel(b);
    if a == out && nb > 0 && out.ends_with(b) {
        for i in 0..total {
            f(i, i, i % nb);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Geometry of a padded, strided 3-D convolution with a cubic kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv3dGeom {
    pub cin: usize,
    pub input: [usize; 3],
    pub kernel: usize,
    pub stride: [usize; 3],
    pub pad: usize,
    pub output: [usize; 3],
}

impl Conv3dGeom {
    pub fn new(cin: usize, input: [usize; 3], kernel: usize, stride: [usize; 3], pad: usize) -> Self {
        let mut output = [0; 3];
        for i in 0..3 {
            output[i] = (input[i] + 2 * pad - kernel) / stride[i] + 1;
        }
        Self {
            cin,
            input,
            kernel,
            stride,
            pad,
            output,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    pub fn out_voxels(&self) -> usize {
        numel(&self.output)
    }

    fn in_voxels(&self) -> usize {
        numel(&self.input)
    }

    /// Unfolds one sample `[cin, d, h, w]` into `[cin·k³, out_voxels]`.
    pub fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let k = self.kernel;
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        let ov = self.out_voxels();
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &x[c * self.in_voxels()..(c + 1) * self.in_voxels()];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let dst = &mut cols[row * ov..(row + 1) * ov];
                        let mut o = 0;
                        for z in 0..od {
                            let iz = (z * self.stride[0] + kz) as isize - self.pad as isize;
                            for y in 0..oh {
                                let iy = (y * self.stride[1] + ky) as isize - self.pad as isize;
                                for xx in 0..ow {
                                    let ix =
                                        (xx * self.stride[2] + kx) as isize - self.pad as isize;
                                    dst[o] = if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= d as isize
                                        || iy >= h as isize
                                        || ix >= w as isize
                                    {
                                        0.0
                                    } else {
                                        xc[(iz as usize * h + iy as usize) * w + ix as usize]
                                    };
                                    o += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back onto the input.
    pub fn col2im(&self, cols: &[f32], gx: &mut [f32]) {
        let k = self.kernel;
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        let ov = self.out_voxels();
        let iv = self.in_voxels();
        let mut row = 0;
        for c in 0..self.cin {
            let gc = &mut gx[c * iv..(c + 1) * iv];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let src = &cols[row * ov..(row + 1) * ov];
                        let mut o = 0;
                        for z in 0..od {
                            let iz = (z * self.stride[0] + kz) as isize - self.pad as isize;
                            for y in 0..oh {
                                let iy = (y * self.stride[1] + ky) as isize - self.pad as isize;
                                for xx in 0..ow {
                                    let ix =
                                        (xx * self.stride[2] + kx) as isize - self.pad as isize;
                                    if iz >= 0
                                        && iy >= 0
                                        && ix >= 0
                                        && iz < d as isize
                                        && iy < h as isize
                                        && ix < w as isize
                                    {
                                        gc[(iz as usize * h + iy as usize) * w + ix as usize] +=
                                            src[o];
                                    }
                                    o += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-5);
        }
        // transposed storage of a (k×m) and b (n×k)
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, false);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]), Some(vec![2, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn conv_geometry_matches_stride_plan() {
        let g1 = Conv3dGeom::new(1, [16, 32, 32], 3, [2, 2, 2], 1);
        assert_eq!(g1.output, [8, 16, 16]);
        let g2 = Conv3dGeom::new(32, g1.output, 3, [1, 2, 2], 1);
        assert_eq!(g2.output, [8, 8, 8]);
        let g3 = Conv3dGeom::new(128, g2.output, 3, [2, 2, 2], 1);
        assert_eq!(g3.output, [4, 4, 4]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Conv3dGeom::new(2, [3, 4, 5], 3, [1, 2, 2], 1);
        let n_in = 2 * 3 * 4 * 5;
        let x: Vec<f32> = (0..n_in).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let n_col = g.col_rows() * g.out_voxels();
        let y: Vec<f32> = (0..n_col).map(|i| ((i * 3) % 7) as f32 - 3.0).collect();
        let mut cols = vec![0.0; n_col];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; n_in];
        g.col2im(&y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert_eq!(lhs, rhs);
    }
}
