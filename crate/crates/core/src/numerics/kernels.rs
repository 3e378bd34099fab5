//! Plain array kernels shared by the graph ops and the scalar-valued helpers.
//!
//! Every output element is produced by exactly one loop with a fixed
//! iteration order, so results do not depend on the rayon pool size.

use rayon::prelude::*;

use super::DenseArray;
use crate::error::{Error, Result};

/// Work size (multiply-adds) above which row loops are spread across threads.
const PAR_THRESHOLD: usize = 1 << 15;

/// `a · b` for `[m,k] × [k,n]`.
pub fn matmul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    let row = |(i, orow): (usize, &mut [f64])| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Ok(DenseArray::from_parts(vec![m, n], out))
}

/// `a · bᵀ` for `[m,k] × [n,k]`.
pub fn matmul_nt(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    let row = |(i, orow): (usize, &mut [f64])| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Ok(DenseArray::from_parts(vec![m, n], out))
}

/// `aᵀ · b` for `[k,m] × [k,n]`.
pub fn matmul_tn(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    matmul(&a.transpose()?, b)
        .map(|r| DenseArray::from_parts(vec![m, n], r.into_data()))
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(x: &DenseArray) -> Result<DenseArray> {
    let (_, c) = x.dims2("row_softmax")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(DenseArray::from_parts(x.shape().to_vec(), out))
}

/// Row-wise log-sum-exp, stabilized by the row maximum.
pub fn row_logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Euclidean norms of the rows of a 2-D array.
pub fn row_norms(x: &DenseArray) -> Result<Vec<f64>> {
    x.dims2("l2_normalize_rows")?;
    Ok(x.rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Scales every row to unit L2 norm. Rows with norm below `eps` are an error.
pub fn l2_normalize_rows(x: &DenseArray, eps: f64) -> Result<DenseArray> {
    if !(eps > 0.0) {
        return Err(Error::invalid("l2_normalize_rows: eps must be positive"));
    }
    let norms = row_norms(x)?;
    let (_, c) = x.dims2("l2_normalize_rows")?;
    let mut out = x.data().to_vec();
    for (i, (row, &n)) in out.chunks_mut(c).zip(&norms).enumerate() {
        if n < eps {
            return Err(Error::DegenerateEmbedding { row: i, norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(DenseArray::from_parts(x.shape().to_vec(), out))
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    pub fn check(x: &DenseArray, w: &DenseArray, b: &DenseArray) -> Result<Self> {
        let (xs, ws) = (x.shape(), w.shape());
        let ([batch, c_in, h, wd], [c_out, wc_in, k, k2]) = (xs, ws) else {
            return Err(Error::shape("conv2d", xs, ws));
        };
        if c_in != wc_in || k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if b.shape() != [*c_out] {
            return Err(Error::shape("conv2d", ws, b.shape()));
        }
        Ok(Self {
            batch: *batch,
            c_in: *c_in,
            c_out: *c_out,
            h: *h,
            w: *wd,
            k: *k,
        })
    }

    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    /// Valid output index range along an axis of length `len` for kernel offset `off`.
    fn span(&self, off: usize, len: usize) -> (usize, usize) {
        let shift = off as isize - self.pad();
        let lo = (-shift).max(0) as usize;
        let hi = ((len as isize) - shift).min(len as isize).max(0) as usize;
        (lo, hi)
    }
}

/// Same-padded, stride-1 2-D convolution. `x: [B,Cin,H,W]`, `w: [Cout,Cin,K,K]`, `b: [Cout]`.
pub fn conv2d(x: &DenseArray, w: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let d = ConvDims::check(x, w, b)?;
    let plane = d.h * d.w;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; d.batch * d.c_out * plane];
    out.par_chunks_mut(d.c_out * plane)
        .enumerate()
        .for_each(|(bi, ob)| {
            let xb = &xd[bi * d.c_in * plane..(bi + 1) * d.c_in * plane];
            for co in 0..d.c_out {
                let oc = &mut ob[co * plane..(co + 1) * plane];
                oc.iter_mut().for_each(|v| *v = bd[co]);
                for ci in 0..d.c_in {
                    let xc = &xb[ci * plane..(ci + 1) * plane];
                    for ky in 0..d.k {
                        let (y0, y1) = d.span(ky, d.h);
                        for kx in 0..d.k {
                            let wv = wd[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                            let (x0, x1) = d.span(kx, d.w);
                            for y in y0..y1 {
                                let iy = y + ky - d.k / 2;
                                let src = &xc[iy * d.w + x0 + kx - d.k / 2..iy * d.w + x1 + kx - d.k / 2];
                                let dst = &mut oc[y * d.w + x0..y * d.w + x1];
                                for (o, &s) in dst.iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(DenseArray::from_parts(vec![d.batch, d.c_out, d.h, d.w], out))
}

/// Gradients of [`conv2d`] with respect to its input, weights and bias.
pub fn conv2d_backward(
    x: &DenseArray,
    w: &DenseArray,
    b: &DenseArray,
    dout: &DenseArray,
    need_dx: bool,
) -> Result<(Option<DenseArray>, DenseArray, DenseArray)> {
    let d = ConvDims::check(x, w, b)?;
    let plane = d.h * d.w;
    let (xd, wd, gd) = (x.data(), w.data(), dout.data());
    let wlen = w.len();

    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; x.len()];
        dx.par_chunks_mut(d.c_in * plane)
            .enumerate()
            .for_each(|(bi, dxb)| {
                let gb = &gd[bi * d.c_out * plane..(bi + 1) * d.c_out * plane];
                for co in 0..d.c_out {
                    let gc = &gb[co * plane..(co + 1) * plane];
                    for ci in 0..d.c_in {
                        let dxc = &mut dxb[ci * plane..(ci + 1) * plane];
                        for ky in 0..d.k {
                            let (y0, y1) = d.span(ky, d.h);
                            for kx in 0..d.k {
                                let wv = wd[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                                let (x0, x1) = d.span(kx, d.w);
                                for y in y0..y1 {
                                    let iy = y + ky - d.k / 2;
                                    let src = &gc[y * d.w + x0..y * d.w + x1];
                                    let start = iy * d.w + x0 + kx - d.k / 2;
                                    let dst = &mut dxc[start..start + (x1 - x0)];
                                    for (o, &g) in dst.iter_mut().zip(src) {
                                        *o += wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        DenseArray::from_parts(x.shape().to_vec(), dx)
    });

    // Per-sample partials, reduced in batch order.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..d.batch)
        .into_par_iter()
        .map(|bi| {
            let xb = &xd[bi * d.c_in * plane..(bi + 1) * d.c_in * plane];
            let gb = &gd[bi * d.c_out * plane..(bi + 1) * d.c_out * plane];
            let mut dw = vec![0.0; wlen];
            let mut db = vec![0.0; d.c_out];
            for co in 0..d.c_out {
                let gc = &gb[co * plane..(co + 1) * plane];
                db[co] = gc.iter().sum();
                for ci in 0..d.c_in {
                    let xc = &xb[ci * plane..(ci + 1) * plane];
                    for ky in 0..d.k {
                        let (y0, y1) = d.span(ky, d.h);
                        for kx in 0..d.k {
                            let (x0, x1) = d.span(kx, d.w);
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let iy = y + ky - d.k / 2;
                                let start = iy * d.w + x0 + kx - d.k / 2;
                                let src = &xc[start..start + (x1 - x0)];
                                let g = &gc[y * d.w + x0..y * d.w + x1];
                                acc += src.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                            }
                            dw[((co * d.c_in + ci) * d.k + ky) * d.k + kx] = acc;
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();
    let mut dw = vec![0.0; wlen];
    let mut db = vec![0.0; d.c_out];
    for (pw, pb) in &partials {
        dw.iter_mut().zip(pw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }
    Ok((
        dx,
        DenseArray::from_parts(w.shape().to_vec(), dw),
        DenseArray::from_parts(b.shape().to_vec(), db),
    ))
}

/// Non-overlapping max pooling over `size × size` windows of a `[B,C,H,W]` array.
/// Trailing rows/columns that do not fill a window are dropped.
/// Returns the pooled array and, per output element, the flat input index of its maximum.
pub fn max_pool2d(x: &DenseArray, size: usize) -> Result<(DenseArray, Vec<usize>)> {
    let [b, c, h, w] = x.shape()[..] else {
        return Err(Error::shape("max_pool2d", x.shape(), &[0, 0, 0, 0]));
    };
    if size == 0 || h < size || w < size {
        return Err(Error::shape("max_pool2d", x.shape(), &[size, size]));
    }
    let (oh, ow) = (h / size, w / size);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((DenseArray::from_parts(vec![b, c, oh, ow], out), arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> DenseArray {
        DenseArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&arr(&[3, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 1.0, 2.0, 3.0])).unwrap();
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(s.row(1)[0], 1.0);
        assert_eq!(s.row(1)[1], 0.0);
        let two = row_softmax(&arr(&[1, 2], &[1.0, 2.0])).unwrap();
        assert!((two.data()[0] - 0.26894).abs() < 1e-5);
        assert!((two.data()[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_inputs() {
        let x = arr(&[2, 4], &[1e6, -1e6, 3.0, 1e6 - 1.0, -5e5, 2e5, 7e5, 1.0]);
        let s = row_softmax(&x).unwrap();
        for r in s.rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize_rows(&arr(&[2, 2], &[3.0, 4.0, 0.6, 0.8]), 1e-12).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-15 && (n.data()[1] - 0.8).abs() < 1e-15);
        assert!((n.data()[2] - 0.6).abs() < 1e-15 && (n.data()[3] - 0.8).abs() < 1e-15);
        let err = l2_normalize_rows(&arr(&[1, 2], &[0.0, 0.0]), 1e-12).unwrap_err();
        assert!(matches!(err, Error::DegenerateEmbedding { row: 0, .. }));
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1x1x3x3 input, single 3x3 kernel of ones: each output is the sum of its padded neighbourhood.
        let x = arr(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = DenseArray::full(&[1, 1, 3, 3], 1.0);
        let b = arr(&[1], &[0.5]);
        let y = conv2d(&x, &w, &b).unwrap();
        assert_eq!(y.data()[4], 45.5);
        assert_eq!(y.data()[0], 1.0 + 2.0 + 4.0 + 5.0 + 0.5);
        assert_eq!(y.data()[8], 5.0 + 6.0 + 8.0 + 9.0 + 0.5);
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let x = arr(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]);
        let (y, arg) = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = arr(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = arr(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(matmul_nt(&a, &b.transpose().unwrap()).unwrap(), c);
        assert_eq!(matmul_tn(&a.transpose().unwrap(), &b).unwrap(), c);
        assert!(matmul(&a, &a).is_err());
    }
}
