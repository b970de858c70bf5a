//! `f64` compute kernels shared by the recorded graph and the inference path.

use super::TensorError;

/// Storage of a logical matrix operand relative to its row-major buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Operand stored as-is.
    RowMajor,
    /// Operand is the transpose of the stored row-major buffer.
    Transposed,
}

fn strides(layout: Layout, rows: usize, cols: usize) -> (isize, isize) {
    match layout {
        Layout::RowMajor => (cols as isize, 1),
        Layout::Transposed => (1, rows as isize),
    }
}

/// `C[m×n] = A[m×k] · B[k×n]` with optional transposed storage of either operand.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_into(m, k, n, a, la, b, lb, 0.0, &mut c);
    c
}

/// `C = A·B + beta·C` into an existing row-major buffer.
#[allow(clippy::too_many_arguments)]
pub fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = strides(la, m, k);
    let (rsb, csb) = strides(lb, k, n);
    // SAFETY: buffer lengths are checked above and the strides describe
    // exactly those buffers.
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

/// Dimensions of a valid-padding, stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize]) -> Result<Self, TensorError> {
        let [batch, in_channels, height, width] = *x else {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: x.to_vec(),
            });
        };
        let [filters, kc, kh, kw] = *k else {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: k.to_vec(),
            });
        };
        if kc != in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: x.to_vec(),
                right: k.to_vec(),
            });
        }
        if kh > height || kw > width || kh == 0 || kw == 0 {
            return Err(TensorError::KernelTooLarge {
                input: x.to_vec(),
                kernel: k.to_vec(),
            });
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            filters,
            kh,
            kw,
            out_h: height - kh + 1,
            out_w: width - kw + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_h, self.out_w]
    }

    /// Rows of the unfolded patch matrix (`C·kh·kw`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    /// Output positions per sample (`out_h·out_w`).
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn sample_cols(&self) -> usize {
        self.patch_len() * self.positions()
    }
}

/// Unfolds every sample into a `[C·kh·kw × out_h·out_w]` block, samples stacked.
pub fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let mut cols = vec![0.0; g.batch * g.sample_cols()];
    let plane = g.height * g.width;
    let positions = g.positions();
    for n in 0..g.batch {
        let block = &mut cols[n * g.sample_cols()..(n + 1) * g.sample_cols()];
        for c in 0..g.in_channels {
            let src = &x[(n * g.in_channels + c) * plane..][..plane];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (c * g.kh + i) * g.kw + j;
                    let dst = &mut block[row * positions..(row + 1) * positions];
                    for oh in 0..g.out_h {
                        let s = &src[(oh + i) * g.width + j..][..g.out_w];
                        dst[oh * g.out_w..(oh + 1) * g.out_w].copy_from_slice(s);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the input.
pub fn col2im(g: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let plane = g.height * g.width;
    let positions = g.positions();
    let mut dx = vec![0.0; g.batch * g.in_channels * plane];
    for n in 0..g.batch {
        let block = &cols[n * g.sample_cols()..(n + 1) * g.sample_cols()];
        for c in 0..g.in_channels {
            let dst = &mut dx[(n * g.in_channels + c) * plane..][..plane];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (c * g.kh + i) * g.kw + j;
                    let src = &block[row * positions..(row + 1) * positions];
                    for oh in 0..g.out_h {
                        let d = &mut dst[(oh + i) * g.width + j..][..g.out_w];
                        for (o, s) in d.iter_mut().zip(&src[oh * g.out_w..(oh + 1) * g.out_w]) {
                            *o += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns `(output, cols)`; `cols` is kept for the backward pass.
pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], k: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(g, x);
    let (f, p, l) = (g.filters, g.patch_len(), g.positions());
    let mut out = vec![0.0; g.batch * f * l];
    for n in 0..g.batch {
        gemm_into(
            f,
            p,
            l,
            k,
            Layout::RowMajor,
            &cols[n * p * l..(n + 1) * p * l],
            Layout::RowMajor,
            0.0,
            &mut out[n * f * l..(n + 1) * f * l],
        );
    }
    (out, cols)
}

/// Gradient w.r.t. the kernel given upstream `dy` and the cached patch matrix.
pub fn conv2d_kernel_grad(g: &ConvGeometry, cols: &[f64], dy: &[f64]) -> Vec<f64> {
    let (f, p, l) = (g.filters, g.patch_len(), g.positions());
    let mut dk = vec![0.0; f * p];
    for n in 0..g.batch {
        gemm_into(
            f,
            l,
            p,
            &dy[n * f * l..(n + 1) * f * l],
            Layout::RowMajor,
            &cols[n * p * l..(n + 1) * p * l],
            Layout::Transposed,
            1.0,
            &mut dk,
        );
    }
    dk
}

/// Gradient w.r.t. the input.
pub fn conv2d_input_grad(g: &ConvGeometry, k: &[f64], dy: &[f64]) -> Vec<f64> {
    let (f, p, l) = (g.filters, g.patch_len(), g.positions());
    let mut dcols = vec![0.0; g.batch * p * l];
    for n in 0..g.batch {
        gemm_into(
            p,
            f,
            l,
            k,
            Layout::Transposed,
            &dy[n * f * l..(n + 1) * f * l],
            Layout::RowMajor,
            0.0,
            &mut dcols[n * p * l..(n + 1) * p * l],
        );
    }
    col2im(g, &dcols)
}

/// 2×2, stride-2 max pooling (floor). Returns output and the flat input index
/// of each selected maximum; the first maximum in scan order wins ties.
pub fn maxpool2_forward<T: PartialOrd + Copy>(
    shape: [usize; 4],
    x: &[T],
) -> (Vec<T>, Vec<usize>, [usize; 4]) {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, [n, c, oh, ow])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(
            gemm(2, 2, 2, &a, Layout::RowMajor, &b, Layout::RowMajor),
            vec![19.0, 22.0, 43.0, 50.0]
        );
        // aᵀ·b
        assert_eq!(
            gemm(2, 2, 2, &a, Layout::Transposed, &b, Layout::RowMajor),
            vec![26.0, 30.0, 38.0, 44.0]
        );
        // a·bᵀ
        assert_eq!(
            gemm(2, 2, 2, &a, Layout::RowMajor, &b, Layout::Transposed),
            vec![17.0, 23.0, 39.0, 53.0]
        );
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(&[2, 2, 5, 4], &[3, 2, 3, 2]).unwrap();
        let x: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&g, &x);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&g, &y);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn maxpool_floor_and_argmax() {
        let x: Vec<f64> = vec![1.0, 5.0, 2.0, 3.0, 4.0, 0.0, 9.0, 1.0, 7.0];
        let (out, arg, shape) = maxpool2_forward([1, 1, 3, 3], &x);
        assert_eq!(shape, [1, 1, 1, 1]);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![1]);
    }
}
