//! Minimal neural-network layer kit with hand-written backward passes.
//!
//! Layers hold parameter ids into a shared [`ParamStore`]; forward passes
//! return per-call caches so a network value can be shared immutably across
//! threads (each call owns its tape). Gradients accumulate into a
//! [`Grads`] arena indexed like the store. Everything is f32 and fully
//! deterministic: no threading inside ops, fixed iteration orders.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// Feature map, (channels, height, width), standard layout.
pub type Feat = Array3<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f32>,
}

/// Flat, name-addressed parameter arena. Creation order is fixed by the
/// network constructor, which makes optimizer state and serialization
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Gradient arena parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<ArrayD<f32>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            slots: store
                .entries()
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.slots[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.slots[id.0]
    }

    pub fn slots(&self) -> &[ArrayD<f32>] {
        &self.slots
    }

    /// Elementwise accumulation in slot order.
    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for a in &mut self.slots {
            *a *= s;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// N(0, sqrt(2 / fan_in)).
    Kaiming,
    Zeros,
}

fn init_tensor<R: Rng>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> ArrayD<f32> {
    match init {
        Init::Zeros => ArrayD::zeros(shape.to_vec()),
        Init::Kaiming => {
            let std = (2.0 / fan_in as f32).sqrt();
            ArrayD::from_shape_simple_fn(shape.to_vec(), || {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// d/dx silu(x).
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_feat(x: &Feat) -> Feat {
    x.mapv(silu)
}

/// dout ⊙ silu'(pre), where `pre` is the activation input.
pub fn silu_backward(pre: &Feat, dout: &Feat) -> Feat {
    let mut dx = dout.clone();
    dx.zip_mut_with(pre, |d, &p| *d *= silu_grad(p));
    dx
}

// ---------------------------------------------------------------------------
// Conv2d, stride 1, same padding (odd kernels)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        init: Init,
    ) -> Self {
        assert!(k % 2 == 1, "same-padding conv needs an odd kernel");
        let w = ps.add(
            format!("{name}.w"),
            init_tensor(&[out_ch, in_ch, k, k], in_ch * k * k, init, rng),
        );
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(vec![out_ch]));
        Conv2d { w, b, in_ch, out_ch, k }
    }

    fn w_mat(&self, ps: &ParamStore) -> Array2<f32> {
        let w = ps.get(self.w);
        w.view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.k * self.k))
            .expect("conv weight is standard layout")
            .to_owned()
    }

    pub fn forward(&self, ps: &ParamStore, x: &Feat) -> Feat {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let out_mat = if self.k == 1 {
            let x_mat = x
                .view()
                .into_shape_with_order((c, h * w))
                .expect("standard layout");
            self.w_mat(ps).dot(&x_mat)
        } else {
            let col = im2col(x, self.k);
            self.w_mat(ps).dot(&col)
        };
        let mut out = out_mat
            .into_shape_with_order((self.out_ch, h, w))
            .expect("reshape");
        let b = ps.get(self.b);
        for (ch, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let bias = b[[ch]];
            plane.mapv_inplace(|v| v + bias);
        }
        out
    }

    /// Backward from the cached forward input. Returns dx; accumulates
    /// dW/db into `g`.
    pub fn backward(&self, ps: &ParamStore, x: &Feat, dout: &Feat, g: &mut Grads) -> Feat {
        let (c, h, w) = x.dim();
        let dout_mat = dout
            .view()
            .into_shape_with_order((self.out_ch, h * w))
            .expect("standard layout");

        // db
        {
            let db = g.get_mut(self.b);
            for (o, d) in db.as_slice_mut().unwrap().iter_mut().enumerate() {
                *d += dout_mat.row(o).sum();
            }
        }

        let w_mat = self.w_mat(ps);
        if self.k == 1 {
            let x_mat = x
                .view()
                .into_shape_with_order((c, h * w))
                .expect("standard layout");
            let dw = dout_mat.dot(&x_mat.t());
            *g.get_mut(self.w) += &dw
                .into_shape_with_order(ps.get(self.w).raw_dim())
                .expect("reshape");
            let dx_mat = w_mat.t().dot(&dout_mat);
            dx_mat
                .into_shape_with_order((c, h, w))
                .expect("reshape")
        } else {
            let col = im2col(x, self.k);
            let dw = dout_mat.dot(&col.t());
            *g.get_mut(self.w) += &dw
                .into_shape_with_order(ps.get(self.w).raw_dim())
                .expect("reshape");
            let dcol = w_mat.t().dot(&dout_mat);
            col2im(&dcol, c, h, w, self.k)
        }
    }
}

/// Unrolls x into (in_ch * k * k, h * w) for a same-padded convolution.
fn im2col(x: &Feat, k: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let mut col = Array2::<f32>::zeros((c * k * k, h * w));
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let row_base = row * h * w;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    // Valid xx range keeps sx = xx + dx - pad inside [0, w).
                    let lo = pad.saturating_sub(dx);
                    let hi = (w + pad - dx).min(w);
                    if lo >= hi {
                        continue;
                    }
                    let src = ci * h * w + sy * w + (lo + dx - pad);
                    let dst = row_base + y * w + lo;
                    let n = hi - lo;
                    cs[dst..dst + n].copy_from_slice(&xs[src..src + n]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(dcol: &Array2<f32>, c: usize, h: usize, w: usize, k: usize) -> Feat {
    let pad = k / 2;
    let mut dx = Feat::zeros((c, h, w));
    let ds = dcol.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for dy in 0..k {
            for dxk in 0..k {
                let row = (ci * k + dy) * k + dxk;
                let row_base = row * h * w;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    let lo = pad.saturating_sub(dxk);
                    let hi = (w + pad - dxk).min(w);
                    if lo >= hi {
                        continue;
                    }
                    let dst = ci * h * w + sy * w + (lo + dxk - pad);
                    let src = row_base + y * w + lo;
                    for i in 0..hi - lo {
                        xs[dst + i] += ds[src + i];
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init_tensor(&[out_dim, in_dim], in_dim, init, rng),
        );
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(vec![out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array1<f32>) -> Array1<f32> {
        let w = ps.get(self.w);
        let b = ps.get(self.b);
        let mut out = Array1::zeros(self.out_dim);
        for o in 0..self.out_dim {
            let mut acc = b[[o]];
            for i in 0..self.in_dim {
                acc += w[[o, i]] * x[i];
            }
            out[o] = acc;
        }
        out
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Array1<f32>,
        dout: &Array1<f32>,
        g: &mut Grads,
    ) -> Array1<f32> {
        let w = ps.get(self.w);
        {
            let dw = g.get_mut(self.w);
            for o in 0..self.out_dim {
                for i in 0..self.in_dim {
                    dw[[o, i]] += dout[o] * x[i];
                }
            }
        }
        {
            let db = g.get_mut(self.b);
            for o in 0..self.out_dim {
                db[[o]] += dout[o];
            }
        }
        let mut dx = Array1::zeros(self.in_dim);
        for i in 0..self.in_dim {
            let mut acc = 0.0;
            for o in 0..self.out_dim {
                acc += w[[o, i]] * dout[o];
            }
            dx[i] = acc;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// GroupNorm (parameter-free; modulation layers supply scale/bias)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub groups: usize,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    /// Normalized output (which is also the forward result).
    pub x_hat: Feat,
    pub inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn new(groups: usize) -> Self {
        GroupNorm { groups, eps: 1e-5 }
    }

    pub fn forward(&self, x: &Feat) -> (Feat, GroupNormCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c % self.groups, 0, "channels must divide into groups");
        let per = c / self.groups;
        let m = (per * h * w) as f32;
        let mut x_hat = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for gidx in 0..self.groups {
            let lo = gidx * per;
            let hi = lo + per;
            let mut mean = 0.0f32;
            for ch in lo..hi {
                mean += x.index_axis(Axis(0), ch).sum();
            }
            mean /= m;
            let mut var = 0.0f32;
            for ch in lo..hi {
                for &v in x.index_axis(Axis(0), ch) {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var /= m;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std.push(istd);
            for ch in lo..hi {
                x_hat
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| (v - mean) * istd);
            }
        }
        (x_hat.clone(), GroupNormCache { x_hat, inv_std })
    }

    pub fn backward(&self, cache: &GroupNormCache, dout: &Feat) -> Feat {
        let (c, h, w) = cache.x_hat.dim();
        let per = c / self.groups;
        let m = (per * h * w) as f32;
        let mut dx = Feat::zeros((c, h, w));
        for gidx in 0..self.groups {
            let lo = gidx * per;
            let hi = lo + per;
            let istd = cache.inv_std[gidx];
            let mut mean_dy = 0.0f32;
            let mut mean_dy_xhat = 0.0f32;
            for ch in lo..hi {
                for (&dy, &xh) in dout
                    .index_axis(Axis(0), ch)
                    .iter()
                    .zip(cache.x_hat.index_axis(Axis(0), ch).iter())
                {
                    mean_dy += dy;
                    mean_dy_xhat += dy * xh;
                }
            }
            mean_dy /= m;
            mean_dy_xhat /= m;
            for ch in lo..hi {
                let dyp = dout.index_axis(Axis(0), ch);
                let xhp = cache.x_hat.index_axis(Axis(0), ch);
                let mut dxp = dx.index_axis_mut(Axis(0), ch);
                ndarray::Zip::from(&mut dxp).and(&dyp).and(&xhp).for_each(
                    |d, &dy, &xh| {
                        *d = istd * (dy - mean_dy - xh * mean_dy_xhat);
                    },
                );
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// 2x average pooling.
pub fn avg_pool2(x: &Feat) -> Feat {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let mut out = Feat::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                out[(ch, y, xx)] = 0.25
                    * (x[(ch, 2 * y, 2 * xx)]
                        + x[(ch, 2 * y, 2 * xx + 1)]
                        + x[(ch, 2 * y + 1, 2 * xx)]
                        + x[(ch, 2 * y + 1, 2 * xx + 1)]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dout: &Feat) -> Feat {
    let (c, h, w) = dout.dim();
    let mut dx = Feat::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let d = dout[(ch, y, xx)] * 0.25;
                dx[(ch, 2 * y, 2 * xx)] = d;
                dx[(ch, 2 * y, 2 * xx + 1)] = d;
                dx[(ch, 2 * y + 1, 2 * xx)] = d;
                dx[(ch, 2 * y + 1, 2 * xx + 1)] = d;
            }
        }
    }
    dx
}

/// 2x nearest-neighbour upsampling.
pub fn upsample2(x: &Feat) -> Feat {
    let (c, h, w) = x.dim();
    let mut out = Feat::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for y in 0..h * 2 {
            for xx in 0..w * 2 {
                out[(ch, y, xx)] = x[(ch, y / 2, xx / 2)];
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &Feat) -> Feat {
    let (c, h, w) = dout.dim();
    assert!(h % 2 == 0 && w % 2 == 0);
    let mut dx = Feat::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[(ch, y / 2, xx / 2)] += dout[(ch, y, xx)];
            }
        }
    }
    dx
}

/// Nearest-neighbour downsample by a power-of-two factor (picks the
/// top-left sample of each block). Used to resize one-hot label maps to the
/// decoder resolutions; the result stays one-hot.
pub fn downsample_nearest(x: &Feat, factor: usize) -> Feat {
    if factor == 1 {
        return x.clone();
    }
    let (c, h, w) = x.dim();
    assert!(h % factor == 0 && w % factor == 0);
    let mut out = Feat::zeros((c, h / factor, w / factor));
    for ch in 0..c {
        for y in 0..h / factor {
            for xx in 0..w / factor {
                out[(ch, y, xx)] = x[(ch, y * factor, xx * factor)];
            }
        }
    }
    out
}

/// Channel concatenation.
pub fn concat_channels(a: &Feat, b: &Feat) -> Feat {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits a channel-concatenated gradient back into the two parts.
pub fn split_channels(d: &Feat, first: usize) -> (Feat, Feat) {
    let (c, _, _) = d.dim();
    let a = d.slice(ndarray::s![..first, .., ..]).to_owned();
    let b = d.slice(ndarray::s![first..c, .., ..]).to_owned();
    (a, b)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Deterministic Adam over a whole `ParamStore`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f32, store: &ParamStore) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store
                .entries()
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
            v: store
                .entries()
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, entry) in store.entries_mut().iter_mut().enumerate() {
            let g = &grads.slots()[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = entry.value.as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            for i in 0..p.len() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gs[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                let m_hat = ms[i] / b1t;
                let v_hat = vs[i] / b2t;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Sinusoidal timestep features: [sin(t f_i), cos(t f_i)] with
/// log-spaced frequencies f_i = 10000^(-i / half).
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f32> {
    assert!(dim.is_multiple_of(2), "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}
