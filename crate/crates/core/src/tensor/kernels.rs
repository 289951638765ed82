//! Dense kernels backing the tape primitives: GEMM and im2col/col2im.

/// Row-major matrix view description: `rows x cols` with explicit strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn rm(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn rm_t(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, `c` row-major `m x n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the callers build views whose extents fit in the slices; the
    // asserts below check the farthest element each view can reach.
    assert!(a.data.len() > ((m - 1) as isize * a.rs + (k - 1) as isize * a.cs) as usize);
    assert!(b.data.len() > ((k - 1) as isize * b.rs + (n - 1) as isize * b.cs) as usize);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided, zero-padded 2-D convolution over a batch.
///
/// `h`, `w` are the spatial extents of the image that is unfolded and `oh`,
/// `ow` those of the sliding-window grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// For every window offset `(k, o)` along one axis, the source index or
    /// `None` when it falls into padding.
    fn axis_map(
        k: usize,
        o: usize,
        stride: usize,
        pad: usize,
        extent: usize,
    ) -> Vec<Option<usize>> {
        let mut map = Vec::with_capacity(k * o);
        for ki in 0..k {
            for oi in 0..o {
                let pos = (oi * stride + ki) as isize - pad as isize;
                map.push((pos >= 0 && (pos as usize) < extent).then_some(pos as usize));
            }
        }
        map
    }
}

/// Unfolds `img` (`n x c x h x w`) into a `(c*kh*kw) x (n*oh*ow)` matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    let ymap = ConvGeom::axis_map(g.kh, g.oh, g.stride, g.pad, g.h);
    let xmap = ConvGeom::axis_map(g.kw, g.ow, g.stride, g.pad, g.w);
    let ohw = g.oh * g.ow;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for ni in 0..g.n {
                    let src = &img[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[ni * ohw..(ni + 1) * ohw];
                    for oy in 0..g.oh {
                        let Some(y) = ymap[ki * g.oh + oy] else {
                            continue;
                        };
                        let src_row = &src[y * g.w..(y + 1) * g.w];
                        let dst_seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, d) in dst_seg.iter_mut().enumerate() {
                            if let Some(x) = xmap[kj * g.ow + ox] {
                                *d = src_row[x];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into an `n x c x h x w` image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut img = vec![0.0; g.n * g.c * g.h * g.w];
    let ymap = ConvGeom::axis_map(g.kh, g.oh, g.stride, g.pad, g.h);
    let xmap = ConvGeom::axis_map(g.kw, g.ow, g.stride, g.pad, g.w);
    let ohw = g.oh * g.ow;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for ni in 0..g.n {
                    let dst = &mut img[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[ni * ohw..(ni + 1) * ohw];
                    for oy in 0..g.oh {
                        let Some(y) = ymap[ki * g.oh + oy] else {
                            continue;
                        };
                        let dst_row = &mut dst[y * g.w..(y + 1) * g.w];
                        let src_seg = &src[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, s) in src_seg.iter().enumerate() {
                            if let Some(x) = xmap[kj * g.ow + ox] {
                                dst_row[x] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    img
}

/// `n x c x hw` to `c x (n*hw)`.
pub(crate) fn batch_to_channel_major(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let src = &x[(ni * c + ci) * hw..][..hw];
            out[(ci * n + ni) * hw..][..hw].copy_from_slice(src);
        }
    }
    out
}

/// `c x (n*hw)` to `n x c x hw`.
pub(crate) fn channel_major_to_batch(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for ni in 0..n {
            let src = &x[(ci * n + ni) * hw..][..hw];
            out[(ni * c + ci) * hw..][..hw].copy_from_slice(src);
        }
    }
    out
}
