use rand::Rng;

use super::{gemm, Grads, MatMut, MatRef, ParamId, ParamStore, Scalar};

/// Affine map `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let w = ps.xavier(format!("{name}.w"), inp, out, rng);
        let b = Some(ps.zeros(format!("{name}.b"), &[out]));
        Self { w, b, inp, out }
    }

    /// Weight and bias both start at zero.
    pub fn zeroed<T: Scalar>(ps: &mut ParamStore<T>, name: &str, inp: usize, out: usize) -> Self {
        let w = ps.zeros(format!("{name}.w"), &[inp, out]);
        let b = Some(ps.zeros(format!("{name}.b"), &[out]));
        Self { w, b, inp, out }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        assert_eq!(x.len(), rows * self.inp, "linear input shape");
        let mut y = vec![T::zero(); rows * self.out];
        if let Some(b) = self.b {
            let b = ps.get(b);
            for row in y.chunks_exact_mut(self.out) {
                row.copy_from_slice(b);
            }
        }
        gemm(
            T::one(),
            MatRef::new(x, rows, self.inp),
            MatRef::new(ps.get(self.w), self.inp, self.out),
            T::one(),
            MatMut::new(&mut y, rows, self.out),
        );
        y
    }

    /// Accumulates parameter gradients and, if `need_dx`, returns `dL/dx`.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        assert_eq!(dy.len(), rows * self.out, "linear grad shape");
        gemm(
            T::one(),
            MatRef::new(x, rows, self.inp).t(),
            MatRef::new(dy, rows, self.out),
            T::one(),
            MatMut::new(grads.get_mut(self.w), self.inp, self.out),
        );
        if let Some(b) = self.b {
            let gb = grads.get_mut(b);
            for row in dy.chunks_exact(self.out) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); rows * self.inp];
            gemm(
                T::one(),
                MatRef::new(dy, rows, self.out),
                MatRef::new(ps.get(self.w), self.inp, self.out).t(),
                T::zero(),
                MatMut::new(&mut dx, rows, self.inp),
            );
            dx
        })
    }
}

/// Normalized activations and per-row inverse std.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Parameter-free layer norm over the last dimension.
pub fn layer_norm_forward<T: Scalar>(x: &[T], dim: usize) -> LayerNormCache<T> {
    let eps = T::from_f64(1e-6);
    let n = T::from_f64(dim as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / dim);
    for (row, out) in x.chunks_exact(dim).zip(xhat.chunks_exact_mut(dim)) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    LayerNormCache { xhat, rstd }
}

pub fn layer_norm_backward<T: Scalar>(cache: &LayerNormCache<T>, dy: &[T], dim: usize) -> Vec<T> {
    let n = T::from_f64(dim as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for (((g, xh), out), &r) in
        dy.chunks_exact(dim).zip(cache.xhat.chunks_exact(dim)).zip(dx.chunks_exact_mut(dim)).zip(&cache.rstd)
    {
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xh) {
            *o = r * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::from_f64((2.0 / std::f64::consts::PI).sqrt()), T::from_f64(0.044715))
}

/// Tanh approximation of GELU.
pub fn gelu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    let (k, c) = gelu_consts::<T>();
    let half = T::from_f64(0.5);
    x.iter().map(|&v| half * v * (T::one() + (k * (v + c * v * v * v)).fast_tanh())).collect()
}

pub fn gelu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    let (k, c) = gelu_consts::<T>();
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let th = (k * (v + c * v * v * v)).fast_tanh();
            let d = half * (T::one() + th) + half * v * (T::one() - th * th) * k * (T::one() + three * c * v * v);
            g * d
        })
        .collect()
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// Softmax probabilities of every (sample, head), each `n x n`.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    pub probs: Vec<T>,
}

/// Bidirectional multi-head self-attention.
///
/// `qkv` is `(batch * n) x (3 * dim)` with the query, key and value blocks
/// side by side; heads split each block into contiguous `dim / heads`
/// slices. Returns the `(batch * n) x dim` output.
pub fn attention_forward<T: Scalar>(
    qkv: &[T],
    batch: usize,
    n: usize,
    dim: usize,
    heads: usize,
) -> (Vec<T>, AttentionCache<T>) {
    assert_eq!(dim % heads, 0, "dim must divide into heads");
    assert_eq!(qkv.len(), batch * n * 3 * dim, "qkv shape");
    let hd = dim / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let rs = 3 * dim;
    let mut out = vec![T::zero(); batch * n * dim];
    let mut probs = vec![T::zero(); batch * heads * n * n];
    for b in 0..batch {
        let base = b * n * rs;
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * n * n..][..n * n];
            let q = MatRef::strided(qkv, base + h * hd, n, hd, rs, 1);
            let k = MatRef::strided(qkv, base + dim + h * hd, n, hd, rs, 1);
            gemm(scale, q, k.t(), T::zero(), MatMut::new(p, n, n));
            for row in p.chunks_exact_mut(n) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let v = MatRef::strided(qkv, base + 2 * dim + h * hd, n, hd, rs, 1);
            gemm(
                T::one(),
                MatRef::new(p, n, n),
                v,
                T::zero(),
                MatMut::strided(&mut out, b * n * dim + h * hd, n, hd, dim, 1),
            );
        }
    }
    (out, AttentionCache { probs })
}

pub fn attention_backward<T: Scalar>(
    qkv: &[T],
    cache: &AttentionCache<T>,
    dout: &[T],
    batch: usize,
    n: usize,
    dim: usize,
    heads: usize,
) -> Vec<T> {
    let hd = dim / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let rs = 3 * dim;
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut dp = vec![T::zero(); n * n];
    for b in 0..batch {
        let base = b * n * rs;
        for h in 0..heads {
            let p = &cache.probs[(b * heads + h) * n * n..][..n * n];
            let q = MatRef::strided(qkv, base + h * hd, n, hd, rs, 1);
            let k = MatRef::strided(qkv, base + dim + h * hd, n, hd, rs, 1);
            let v = MatRef::strided(qkv, base + 2 * dim + h * hd, n, hd, rs, 1);
            let d_o = MatRef::strided(dout, b * n * dim + h * hd, n, hd, dim, 1);

            // dV = P^T dO
            gemm(
                T::one(),
                MatRef::new(p, n, n).t(),
                d_o,
                T::zero(),
                MatMut::strided(&mut dqkv, base + 2 * dim + h * hd, n, hd, rs, 1),
            );
            // dP = dO V^T, then through the softmax.
            gemm(T::one(), d_o, v.t(), T::zero(), MatMut::new(&mut dp, n, n));
            for (dr, pr) in dp.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                let dot = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            gemm(
                T::one(),
                MatRef::new(&dp, n, n),
                k,
                T::zero(),
                MatMut::strided(&mut dqkv, base + h * hd, n, hd, rs, 1),
            );
            gemm(
                T::one(),
                MatRef::new(&dp, n, n).t(),
                q,
                T::zero(),
                MatMut::strided(&mut dqkv, base + dim + h * hd, n, hd, rs, 1),
            );
        }
    }
    dqkv
}
