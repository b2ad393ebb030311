//! Token-wise layers with hand-written backward passes.
//!
//! Inputs are row-major `[rows × dim]` matrices. Backward functions take the
//! forward input back from the caller, accumulate parameter gradients into
//! [`Gradients`], and return the input gradient. Every reduction runs in a
//! fixed order, so results do not depend on the rayon thread count.

use rand::Rng;
use rayon::prelude::*;

use crate::params::{trunc_normal, Gradients, ParamId, ParamStore};
use crate::tensor::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

const MIN_ROWS_PER_TASK: usize = 16;

/// Affine map `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            vec![in_dim, out_dim],
            trunc_normal(rng, in_dim * out_dim, INIT_STD),
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), vec![out_dim], vec![S::zero(); out_dim])
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn numel(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward<S: Real>(&self, store: &ParamStore<S>, x: &[S]) -> Vec<S> {
        let w = store.get(self.weight);
        let b = self.bias.map(|id| store.get(id));
        affine(x, w, b, self.in_dim, self.out_dim)
    }

    pub fn backward<S: Real>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Gradients<S>,
        x: &[S],
        dy: &[S],
    ) -> Vec<S> {
        let (n_in, n_out) = (self.in_dim, self.out_dim);
        let rows = x.len() / n_in;
        debug_assert_eq!(dy.len(), rows * n_out);
        let w = store.get(self.weight);

        let mut dx = vec![S::zero(); rows * n_in];
        dx.par_chunks_mut(n_in)
            .with_min_len(MIN_ROWS_PER_TASK)
            .zip(dy.par_chunks(n_out))
            .for_each(|(dxr, dyr)| {
                for (i, d) in dxr.iter_mut().enumerate() {
                    let wr = &w[i * n_out..(i + 1) * n_out];
                    *d = wr.iter().zip(dyr).map(|(a, b)| *a * *b).sum();
                }
            });

        grads
            .get_mut(self.weight)
            .par_chunks_mut(n_out)
            .enumerate()
            .for_each(|(i, dwr)| {
                for r in 0..rows {
                    let xi = x[r * n_in + i];
                    if xi == S::zero() {
                        continue;
                    }
                    for (g, d) in dwr.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
                        *g += xi * *d;
                    }
                }
            });

        if let Some(b) = self.bias {
            let db = grads.get_mut(b);
            for dyr in dy.chunks(n_out) {
                for (g, d) in db.iter_mut().zip(dyr) {
                    *g += *d;
                }
            }
        }
        dx
    }
}

/// `x·W + b` over rows.
pub fn affine<S: Real>(x: &[S], w: &[S], b: Option<&[S]>, n_in: usize, n_out: usize) -> Vec<S> {
    let rows = x.len() / n_in;
    debug_assert_eq!(x.len(), rows * n_in);
    debug_assert_eq!(w.len(), n_in * n_out);
    let mut y = vec![S::zero(); rows * n_out];
    y.par_chunks_mut(n_out)
        .with_min_len(MIN_ROWS_PER_TASK)
        .zip(x.par_chunks(n_in))
        .for_each(|(yr, xr)| {
            if let Some(b) = b {
                yr.copy_from_slice(b);
            }
            for (i, &xi) in xr.iter().enumerate() {
                if xi == S::zero() {
                    continue;
                }
                for (o, wv) in yr.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                    *o += xi * *wv;
                }
            }
        });
    y
}

/// Layer normalization over the last axis, with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

/// Per-row statistics saved by [`LayerNorm::forward`].
#[derive(Clone, Debug)]
pub struct LnStats<S> {
    mean: Vec<S>,
    rstd: Vec<S>,
}

impl LayerNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), vec![dim], vec![S::one(); dim]);
        let beta = store.add(format!("{name}.bias"), vec![dim], vec![S::zero(); dim]);
        Self { gamma, beta, dim }
    }

    pub fn numel(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<S: Real>(&self, store: &ParamStore<S>, x: &[S]) -> (Vec<S>, LnStats<S>) {
        let d = self.dim;
        let rows = x.len() / d;
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let eps = S::lit(LAYER_NORM_EPS);
        let n = S::from_usize(d).unwrap();
        let mut y = vec![S::zero(); x.len()];
        let mut mean = vec![S::zero(); rows];
        let mut rstd = vec![S::zero(); rows];
        y.par_chunks_mut(d)
            .with_min_len(MIN_ROWS_PER_TASK)
            .zip(x.par_chunks(d))
            .zip(mean.par_iter_mut().zip(rstd.par_iter_mut()))
            .for_each(|((yr, xr), (m, rs))| {
                let mu = xr.iter().copied().sum::<S>() / n;
                let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
                let r = S::one() / (var + eps).sqrt();
                for (((o, &v), &g), &b) in yr.iter_mut().zip(xr).zip(gamma).zip(beta) {
                    *o = (v - mu) * r * g + b;
                }
                *m = mu;
                *rs = r;
            });
        (y, LnStats { mean, rstd })
    }

    pub fn backward<S: Real>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Gradients<S>,
        x: &[S],
        stats: &LnStats<S>,
        dy: &[S],
    ) -> Vec<S> {
        let d = self.dim;
        let n = S::from_usize(d).unwrap();
        let gamma = store.get(self.gamma);
        let mut dx = vec![S::zero(); x.len()];
        dx.par_chunks_mut(d)
            .with_min_len(MIN_ROWS_PER_TASK)
            .enumerate()
            .for_each(|(r, dxr)| {
                let xr = &x[r * d..(r + 1) * d];
                let dyr = &dy[r * d..(r + 1) * d];
                let (mu, rs) = (stats.mean[r], stats.rstd[r]);
                let mut sum_g = S::zero();
                let mut sum_gx = S::zero();
                for i in 0..d {
                    let g = dyr[i] * gamma[i];
                    sum_g += g;
                    sum_gx += g * (xr[i] - mu) * rs;
                }
                let (mg, mgx) = (sum_g / n, sum_gx / n);
                for i in 0..d {
                    let xhat = (xr[i] - mu) * rs;
                    dxr[i] = rs * (dyr[i] * gamma[i] - mg - xhat * mgx);
                }
            });

        let rows = x.len() / d;
        let mut dgamma = vec![S::zero(); d];
        let mut dbeta = vec![S::zero(); d];
        for r in 0..rows {
            let (mu, rs) = (stats.mean[r], stats.rstd[r]);
            for i in 0..d {
                let g = dy[r * d + i];
                dgamma[i] += g * (x[r * d + i] - mu) * rs;
                dbeta[i] += g;
            }
        }
        for (a, b) in grads.get_mut(self.gamma).iter_mut().zip(dgamma) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.beta).iter_mut().zip(dbeta) {
            *a += b;
        }
        dx
    }
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu<S: Real>(x: S) -> S {
    S::lit(0.5) * x * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<S: Real>(x: S) -> S {
    let cdf = S::lit(0.5) * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * S::lit(0.5)).exp() * S::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub fn gelu_forward<S: Real>(x: &[S]) -> Vec<S> {
    x.par_iter().with_min_len(1024).map(|&v| gelu(v)).collect()
}

pub fn gelu_backward<S: Real>(x: &[S], dy: &[S]) -> Vec<S> {
    x.par_iter()
        .with_min_len(1024)
        .zip(dy)
        .map(|(&v, &d)| d * gelu_grad(v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.to_vec();
            p[i] += h;
            let mut m = x.to_vec();
            m[i] -= h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            assert!((num - analytic[i]).abs() < 1e-6, "i={i}: {num} vs {}", analytic[i]);
        }
    }

    #[test]
    fn affine_matches_naive_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = [0.1, -0.2, 0.3];
        let y = affine(&x, &w, Some(&b), 5, 3);
        for r in 0..2 {
            for o in 0..3 {
                let expect: f64 = b[o] + (0..5).map(|i| x[r * 5 + i] * w[i * 3 + o]).sum::<f64>();
                assert!((y[r * 3 + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_and_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, &mut rng, "fc", 4, 3, true);
        let ln = LayerNorm::new(&mut store, "ln", 3);
        for p in store.iter_mut() {
            for v in p.data.iter_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |store: &ParamStore<f64>, x: &[f64]| {
            let h = lin.forward(store, x);
            let (y, _) = ln.forward(store, &h);
            y.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut grads = Gradients::zeros_like(&store);
        let h = lin.forward(&store, &x);
        let (_, stats) = ln.forward(&store, &h);
        let dh = ln.backward(&store, &mut grads, &h, &stats, &probe);
        let dx = lin.backward(&store, &mut grads, &x, &dh);

        fd_check(|x| loss(&store, x), &x, &dx);
        for id in store.ids().collect::<Vec<_>>() {
            let base = store.get(id).to_vec();
            let f = |v: &[f64]| {
                let mut s = store.clone();
                s.get_mut(id).copy_from_slice(v);
                loss(&s, &x)
            };
            fd_check(f, &base, grads.get(id));
        }
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
        assert!((gelu(1.0f64) - 0.8413447460685429).abs() < 1e-12);
    }
}
