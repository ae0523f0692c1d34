//! Dilated 2-D convolution over `[channels][rows][cols]` buffers with zero
//! "same" padding and stride 1.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    /// Valid output index range `[lo, hi)` along an axis of length `n` for tap offset `off`.
    #[inline]
    fn span(n: usize, off: isize) -> (usize, usize) {
        let lo = (-off).max(0) as usize;
        let hi = (n as isize - off).clamp(0, n as isize) as usize;
        (lo, hi.max(lo))
    }

    #[inline]
    fn offset(&self, k: usize) -> isize {
        (k as isize - (self.kernel / 2) as isize) * self.dilation as isize
    }

    pub fn forward(&self, w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
        let plane = rows * cols;
        debug_assert_eq!(x.len(), self.in_ch * plane);
        debug_assert_eq!(out.len(), self.out_ch * plane);
        let kk = self.kernel * self.kernel;
        // row-major loop so the output row stays in L1 across all taps
        for co in 0..self.out_ch {
            for y in 0..rows {
                let dst = &mut out[co * plane + y * cols..co * plane + (y + 1) * cols];
                dst.fill(b[co]);
                for ci in 0..self.in_ch {
                    let xin = &x[ci * plane..(ci + 1) * plane];
                    let wk = &w[(co * self.in_ch + ci) * kk..(co * self.in_ch + ci + 1) * kk];
                    for ky in 0..self.kernel {
                        let dy = self.offset(ky);
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= rows as isize {
                            continue;
                        }
                        let src_row = &xin[sy as usize * cols..(sy as usize + 1) * cols];
                        for kx in 0..self.kernel {
                            let dx = self.offset(kx);
                            let (x0, x1) = Self::span(cols, dx);
                            if x1 <= x0 {
                                continue;
                            }
                            let sx0 = (x0 as isize + dx) as usize;
                            let len = x1 - x0;
                            axpy(wk[ky * self.kernel + kx], &src_row[sx0..sx0 + len], &mut dst[x0..x0 + len]);
                        }
                    }
                }
            }
        }
    }

    /// Accumulates weight and bias gradients, and the input gradient when
    /// `gx` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        w: &[f64],
        x: &[f64],
        rows: usize,
        cols: usize,
        gout: &[f64],
        mut gx: Option<&mut [f64]>,
        gw: &mut [f64],
        gb: &mut [f64],
    ) {
        let plane = rows * cols;
        let kk = self.kernel * self.kernel;
        for co in 0..self.out_ch {
            let g = &gout[co * plane..(co + 1) * plane];
            gb[co] += g.iter().sum::<f64>();
            for y in 0..rows {
                let go = &g[y * cols..(y + 1) * cols];
                for ci in 0..self.in_ch {
                    let widx = (co * self.in_ch + ci) * kk;
                    for ky in 0..self.kernel {
                        let sy = y as isize + self.offset(ky);
                        if sy < 0 || sy >= rows as isize {
                            continue;
                        }
                        let row0 = ci * plane + sy as usize * cols;
                        for kx in 0..self.kernel {
                            let dx = self.offset(kx);
                            let (x0, x1) = Self::span(cols, dx);
                            if x1 <= x0 {
                                continue;
                            }
                            let sx0 = (x0 as isize + dx) as usize;
                            let len = x1 - x0;
                            let wi = widx + ky * self.kernel + kx;
                            let gseg = &go[x0..x0 + len];
                            gw[wi] += dot(gseg, &x[row0 + sx0..row0 + sx0 + len]);
                            if let Some(gx) = gx.as_deref_mut() {
                                axpy(w[wi], gseg, &mut gx[row0 + sx0..row0 + sx0 + len]);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}
