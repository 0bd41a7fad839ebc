//! Minimal dense layers with hand-written backprop, plus Adam.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

/// Anything made of flat `f64` parameter buffers.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, v: f64) {
        self.visit_mut(&mut |s| s.fill(v));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |s| ok &= s.iter().all(|x| x.is_finite()));
        ok
    }
}

/// Fully connected layer, weights stored row-major as `[n_out][n_in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let mut l = Self::zeros(n_in, n_out);
        for w in l.w.iter_mut() {
            *w = dist.sample(rng);
        }
        l
    }

    /// `y = W x + b` for each of `batch` rows of `x`.
    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        assert_eq!(x.len(), batch * self.n_in, "dense input size");
        let mut y = Vec::with_capacity(batch * self.n_out);
        for _ in 0..batch {
            y.extend_from_slice(&self.b);
        }
        let (n_in, n_out) = (self.n_in as isize, self.n_out as isize);
        // SAFETY: the strides describe `x` (batch x n_in), `w` read as its
        // transpose (n_in x n_out) and `y` (batch x n_out), all in bounds.
        unsafe {
            matrixmultiply::dgemm(
                batch, self.n_in, self.n_out, 1.0,
                x.as_ptr(), n_in, 1,
                self.w.as_ptr(), 1, n_in,
                1.0, y.as_mut_ptr(), n_out, 1,
            );
        }
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], batch: usize, g: &mut Dense) -> Vec<f64> {
        assert_eq!(x.len(), batch * self.n_in, "dense input size");
        assert_eq!(dy.len(), batch * self.n_out, "dense output gradient size");
        for row in dy.chunks_exact(self.n_out) {
            for (gb, d) in g.b.iter_mut().zip(row) {
                *gb += d;
            }
        }
        let mut dx = vec![0.0; batch * self.n_in];
        let (n_in, n_out) = (self.n_in as isize, self.n_out as isize);
        // SAFETY: as in `forward`; `dy` is batch x n_out, `g.w` and `w` are
        // n_out x n_in, `dx` is batch x n_in.
        unsafe {
            matrixmultiply::dgemm(
                self.n_out, batch, self.n_in, 1.0,
                dy.as_ptr(), 1, n_out,
                x.as_ptr(), n_in, 1,
                1.0, g.w.as_mut_ptr(), n_in, 1,
            );
            matrixmultiply::dgemm(
                batch, self.n_out, self.n_in, 1.0,
                dy.as_ptr(), n_out, 1,
                self.w.as_ptr(), n_in, 1,
                0.0, dx.as_mut_ptr(), n_in, 1,
            );
        }
        dx
    }
}

impl Params for Dense {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.w);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn tanh_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.tanh();
    }
}

/// Backprop through `y = tanh(x)` given the activations `y`.
pub fn tanh_backward(y: &[f64], dy: &mut [f64]) {
    for (d, y) in dy.iter_mut().zip(y) {
        *d *= 1.0 - y * y;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// L2-normalizes each row of `x` in place and returns the pre-normalization
/// norms.
pub fn normalize_rows(x: &mut [f64], dim: usize) -> Vec<f64> {
    x.chunks_exact_mut(dim)
        .map(|r| {
            let n = norm(r).max(1e-12);
            r.iter_mut().for_each(|v| *v /= n);
            n
        })
        .collect()
}

/// Backprop through row normalization `z = u / |u|` given `z` and `|u|`.
pub fn normalize_backward(z: &[f64], norms: &[f64], dz: &mut [f64], dim: usize) {
    for ((zr, dr), n) in z.chunks_exact(dim).zip(dz.chunks_exact_mut(dim)).zip(norms) {
        let proj = dot(zr, dr);
        for (d, z) in dr.iter_mut().zip(zr) {
            *d = (*d - z * proj) / n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        let g = grads.to_flat();
        let mut p = params.to_flat();
        assert_eq!(g.len(), self.m.len(), "optimizer sized for a different model");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        params.set_flat(&p);
    }
}

/// Largest relative error between an analytic gradient and central
/// differences of `loss` around `params`, over the given coordinates.
pub fn gradient_check<P: Params + Clone>(
    params: &P,
    analytic: &P,
    coords: &[usize],
    h: f64,
    loss: impl Fn(&P) -> f64,
) -> f64 {
    let base = params.to_flat();
    let ga = analytic.to_flat();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += h;
        probe.set_flat(&plus);
        let lp = loss(&probe);
        let mut minus = base.clone();
        minus[i] -= h;
        probe.set_flat(&minus);
        let lm = loss(&probe);
        let num = (lp - lm) / (2.0 * h);
        let denom = num.abs().max(ga[i].abs()).max(1e-8);
        worst = worst.max((num - ga[i]).abs() / denom);
    }
    worst
}
