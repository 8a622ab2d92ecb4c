//! Trainable layers. Convolutions use "same" zero padding with output
//! extents `ceil(in / stride)`.

use rand::Rng;

use super::tensor::{gemm, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k1: usize,
    pub k2: usize,
    pub s1: usize,
    pub s2: usize,
    pub out_h: usize,
    pub out_w: usize,
    pad_t: usize,
    pad_l: usize,
}

impl ConvGeom {
    pub fn new(in_shape: [usize; 3], out_c: usize, k: (usize, usize), s: (usize, usize)) -> Self {
        let [in_c, in_h, in_w] = in_shape;
        let out_h = in_h.div_ceil(s.0);
        let out_w = in_w.div_ceil(s.1);
        let pad_h = ((out_h - 1) * s.0 + k.0).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * s.1 + k.1).saturating_sub(in_w);
        ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            k1: k.0,
            k2: k.1,
            s1: s.0,
            s2: s.1,
            out_h,
            out_w,
            pad_t: pad_h / 2,
            pad_l: pad_w / 2,
        }
    }

    /// Rows of the unfolded input (`in_c * k1 * k2`).
    pub fn patch_len(&self) -> usize {
        self.in_c * self.k1 * self.k2
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.positions()
    }

    /// Input coordinate for output row/col `o` and kernel tap `k`, if it is
    /// inside the (unpadded) input.
    #[inline]
    fn src(o: usize, stride: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&i| i < extent)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.in_c {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.k1 {
                for j in 0..self.k2 {
                    let row = ((c * self.k1 + i) * self.k2 + j) * p;
                    let dst = &mut cols[row..row + p];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match Self::src(oy, self.s1, i, self.pad_t, self.in_h) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                let src = &plane[iy * self.in_w..(iy + 1) * self.in_w];
                                for (ox, d) in line.iter_mut().enumerate() {
                                    *d = match Self::src(ox, self.s2, j, self.pad_l, self.in_w) {
                                        Some(ix) => src[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.in_c {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.k1 {
                for j in 0..self.k2 {
                    let row = ((c * self.k1 + i) * self.k2 + j) * p;
                    let src = &cols[row..row + p];
                    for oy in 0..self.out_h {
                        let Some(iy) = Self::src(oy, self.s1, i, self.pad_t, self.in_h) else { continue };
                        for ox in 0..self.out_w {
                            if let Some(ix) = Self::src(ox, self.s2, j, self.pad_l, self.in_w) {
                                plane[iy * self.in_w + ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Centered uniform init with Glorot bounds.
fn glorot<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub geom: ConvGeom,
    /// `out_c x (in_c * k1 * k2)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(geom: ConvGeom, rng: &mut R) -> Self {
        let k = geom.patch_len();
        let weight = glorot(rng, geom.out_c * k, k, geom.out_c * geom.k1 * geom.k2);
        Conv2d { geom, weight, bias: vec![0.0; geom.out_c] }
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let g = &self.geom;
        let (k, p) = (g.patch_len(), g.positions());
        let mut cols = vec![0.0; k * p];
        let mut y = vec![0.0; batch * g.out_len()];
        for (xb, yb) in x.chunks_exact(g.in_len()).zip(y.chunks_exact_mut(g.out_len())) {
            g.im2col(xb, &mut cols);
            for (row, &b) in yb.chunks_exact_mut(p).zip(&self.bias) {
                row.fill(b);
            }
            gemm(Trans::N, Trans::N, g.out_c, k, p, 1.0, &self.weight, &cols, 1.0, yb);
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient
    /// when `need_dx`.
    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let g = &self.geom;
        let (k, p) = (g.patch_len(), g.positions());
        let batch = x.len() / g.in_len();
        let mut cols = vec![0.0; k * p];
        let mut dcols = if need_dx { vec![0.0; k * p] } else { Vec::new() };
        let mut dx = if need_dx { vec![0.0; batch * g.in_len()] } else { Vec::new() };
        for b in 0..batch {
            let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
            let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
            g.im2col(xb, &mut cols);
            gemm(Trans::N, Trans::T, g.out_c, p, k, 1.0, dyb, &cols, 1.0, dw);
            for (d, row) in db.iter_mut().zip(dyb.chunks_exact(p)) {
                *d += row.iter().sum::<f64>();
            }
            if need_dx {
                gemm(Trans::T, Trans::N, k, g.out_c, p, 1.0, &self.weight, dyb, 0.0, &mut dcols);
                g.col2im(&dcols, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
            }
        }
        need_dx.then_some(dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Dense { in_dim, out_dim, weight: glorot(rng, in_dim * out_dim, in_dim, out_dim), bias: vec![0.0; out_dim] }
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut y: Vec<f64> = (0..batch).flat_map(|_| self.bias.iter().copied()).collect();
        gemm(Trans::N, Trans::T, batch, self.in_dim, self.out_dim, 1.0, x, &self.weight, 1.0, &mut y);
        y
    }

    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let batch = x.len() / self.in_dim;
        gemm(Trans::T, Trans::N, self.out_dim, batch, self.in_dim, 1.0, dy, x, 1.0, dw);
        for row in dy.chunks_exact(self.out_dim) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![0.0; batch * self.in_dim];
            gemm(Trans::N, Trans::N, batch, self.out_dim, self.in_dim, 1.0, dy, &self.weight, 0.0, &mut dx);
            dx
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
