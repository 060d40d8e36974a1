//! Dense kernels behind the tape ops. All loops run in a fixed order so results
//! are bit-reproducible.

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape m×k and `op(b)` of
/// shape k×n. A transposed operand is stored row-major in its transposed
/// shape (k×m for `a`, n×k for `b`).
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
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Expands one C×H×W image into a (C·kh·kw)×(out_h·out_w) patch matrix.
pub(crate) fn im2col(image: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let out_len = g.out_len();
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for y in 0..g.out_h {
                    let sy = y + i;
                    for x in 0..g.out_w {
                        let sx = x + j;
                        dst[y * g.out_w + x] = if sy < g.pad
                            || sx < g.pad
                            || sy - g.pad >= g.height
                            || sx - g.pad >= g.width
                        {
                            0.0
                        } else {
                            image[(c * g.height + sy - g.pad) * g.width + sx - g.pad]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeometry, image: &mut [f64]) {
    let out_len = g.out_len();
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for y in 0..g.out_h {
                    let sy = y + i;
                    if sy < g.pad || sy - g.pad >= g.height {
                        continue;
                    }
                    for x in 0..g.out_w {
                        let sx = x + j;
                        if sx < g.pad || sx - g.pad >= g.width {
                            continue;
                        }
                        image[(c * g.height + sy - g.pad) * g.width + sx - g.pad] +=
                            src[y * g.out_w + x];
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of an n×c matrix.
pub(crate) fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    for (row, out) in logits.chunks(classes).zip(probs.chunks_mut(classes)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &z) in out.iter_mut().zip(row) {
            *o = (z - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_flags_agree_with_naive_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (a_t, b_t) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                if a_t { &at } else { &a },
                a_t,
                if b_t { &bt } else { &b },
                b_t,
                0.0,
                &mut c,
            );
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            channels: 2,
            height: 4,
            width: 5,
            kh: 3,
            kw: 3,
            pad: 1,
            out_h: 4,
            out_w: 5,
        };
        let img: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let probe: Vec<f64> = (0..g.patch_len() * g.out_len())
            .map(|i| (i as f64 * 0.3).cos())
            .collect();
        let mut cols = vec![0.0; probe.len()];
        im2col(&img, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im_add(&probe, &g, &mut back);
        let rhs: f64 = back.iter().zip(&img).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
