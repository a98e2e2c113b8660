//! Dense numeric kernels shared by the differentiable ops.

/// `c = beta * c + a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`, where
/// either operand may be read transposed through its strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds asserted above; strides describe an m×k / k×n view that
    // stays within the slices for both plain and transposed layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major strides of a `rows×cols` matrix.
pub(crate) fn plain(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

/// Strides that read a stored `cols×rows` matrix as its `rows×cols` transpose.
pub(crate) fn transposed(stored_cols: usize) -> (isize, isize) {
    (1, stored_cols as isize)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
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
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[C,H,W]` image into a `[C·kh·kw, oh·ow]` column matrix
/// appended to `cols`.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom, cols: &mut Vec<f64>) {
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        cols.extend(std::iter::repeat_n(0.0, g.ow));
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    cols.extend((0..g.ow).map(|ox| {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        }
                    }));
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear interpolation taps for a continuous `(y, x)` position on an
/// `h×w` grid, clamped to the border. Returns `(flat index, weight)` pairs
/// whose weights sum to one.
pub(crate) fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    [
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ]
}

/// Sparse sampling pattern over the spatial plane of a feature map, in
/// compressed-row form: output position `q` reads
/// `entries[offsets[q]..offsets[q + 1]]`.
#[derive(Clone, Debug, Default)]
pub struct Taps {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl Taps {
    pub fn new() -> Self {
        Taps {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    /// Appends one output position from its `(index, weight)` taps.
    pub fn push(&mut self, taps: impl IntoIterator<Item = (usize, f64)>) {
        self.entries.extend(taps);
        self.offsets.push(self.entries.len());
    }

    pub fn positions(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn get(&self, q: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[q]..self.offsets[q + 1]]
    }

    pub(crate) fn max_index(&self) -> Option<usize> {
        self.entries.iter().map(|&(i, _)| i).max()
    }
}
