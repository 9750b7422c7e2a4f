//! Conditional encoder/decoder denoiser.
//!
//! The encoder consumes the noisy image plus a timestep embedding; the
//! semantic label map enters only through the decoder, via spatially
//! adaptive modulation: each decoder normalization is parameter-free and
//! its scale/bias are predicted per pixel from the (resized) label map.
//! Passing the all-zero null map yields the unconditional estimate.

use super::nn::*;
use ndarray::Array1;
use rand::Rng;

const NORM_GROUPS: usize = 4;

// ---------------------------------------------------------------------------
// Spatially adaptive modulation (label-map-driven scale/bias)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SpadeNorm {
    norm: GroupNorm,
    shared: Conv2d, // cond -> hidden, 3x3
    gamma: Conv2d,  // hidden -> ch, 1x1, zero-init so modulation starts as identity
    beta: Conv2d,   // hidden -> ch, 1x1, zero-init
}

#[derive(Debug, Clone)]
pub struct SpadeCache {
    gn: GroupNormCache,
    pre: Feat,
    hidden: Feat,
    gamma_out: Feat,
}

impl SpadeNorm {
    fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        ch: usize,
        cond_ch: usize,
        hidden: usize,
    ) -> Self {
        SpadeNorm {
            norm: GroupNorm::new(NORM_GROUPS),
            shared: Conv2d::new(ps, rng, &format!("{name}.shared"), cond_ch, hidden, 3, Init::Kaiming),
            gamma: Conv2d::new(ps, rng, &format!("{name}.gamma"), hidden, ch, 1, Init::Zeros),
            beta: Conv2d::new(ps, rng, &format!("{name}.beta"), hidden, ch, 1, Init::Zeros),
        }
    }

    fn forward(&self, ps: &ParamStore, x: &Feat, cond: &Feat) -> (Feat, SpadeCache) {
        let (x_hat, gn) = self.norm.forward(x);
        let pre = self.shared.forward(ps, cond);
        let hidden = silu_feat(&pre);
        let gamma_out = self.gamma.forward(ps, &hidden);
        let beta_out = self.beta.forward(ps, &hidden);
        let mut out = x_hat.clone();
        out.zip_mut_with(&gamma_out, |o, &g| *o *= 1.0 + g);
        out += &beta_out;
        (out, SpadeCache { gn, pre, hidden, gamma_out })
    }

    /// Gradient flows to x and to the modulation convs; the label map is
    /// data, so its gradient is discarded.
    fn backward(
        &self,
        ps: &ParamStore,
        cache: &SpadeCache,
        cond: &Feat,
        dout: &Feat,
        g: &mut Grads,
    ) -> Feat {
        let mut dgamma = dout.clone();
        dgamma.zip_mut_with(&cache.gn.x_hat, |d, &xh| *d *= xh);
        let dbeta = dout;
        let mut dx_hat = dout.clone();
        dx_hat.zip_mut_with(&cache.gamma_out, |d, &ga| *d *= 1.0 + ga);

        let mut dhidden = self.gamma.backward(ps, &cache.hidden, &dgamma, g);
        dhidden += &self.beta.backward(ps, &cache.hidden, dbeta, g);
        let dpre = silu_backward(&cache.pre, &dhidden);
        let _ = self.shared.backward(ps, cond, &dpre, g);
        self.norm.backward(&cache.gn, &dx_hat)
    }
}

// ---------------------------------------------------------------------------
// Residual blocks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d, // zero-init: the block starts as its skip path
    skip: Option<Conv2d>,
    out_ch: usize,
}

#[derive(Debug, Clone)]
pub struct ResCache {
    x: Feat,
    gn1: GroupNormCache,
    a1: Feat,
    gn2: GroupNormCache,
    a2: Feat,
}

impl ResBlock {
    fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        emb_dim: usize,
    ) -> Self {
        ResBlock {
            gn1: GroupNorm::new(NORM_GROUPS),
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, Init::Kaiming),
            temb_proj: Linear::new(ps, rng, &format!("{name}.temb"), emb_dim, out_ch, Init::Kaiming),
            gn2: GroupNorm::new(NORM_GROUPS),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, Init::Zeros),
            skip: (in_ch != out_ch)
                .then(|| Conv2d::new(ps, rng, &format!("{name}.skip"), in_ch, out_ch, 1, Init::Kaiming)),
            out_ch,
        }
    }

    fn forward(&self, ps: &ParamStore, x: &Feat, temb_act: &Array1<f32>) -> (Feat, ResCache) {
        let (n1, gn1) = self.gn1.forward(x);
        let a1 = silu_feat(&n1);
        let mut h = self.conv1.forward(ps, &a1);
        let tb = self.temb_proj.forward(ps, temb_act);
        for ch in 0..self.out_ch {
            let bias = tb[ch];
            h.index_axis_mut(ndarray::Axis(0), ch).mapv_inplace(|v| v + bias);
        }
        let (n2, gn2) = self.gn2.forward(&h);
        let a2 = silu_feat(&n2);
        let h2 = self.conv2.forward(ps, &a2);
        let out = match &self.skip {
            Some(skip) => skip.forward(ps, x) + &h2,
            None => x + &h2,
        };
        (out, ResCache { x: x.clone(), gn1, a1, gn2, a2 })
    }

    /// Returns (dx, dtemb_act contribution).
    fn backward(
        &self,
        ps: &ParamStore,
        cache: &ResCache,
        temb_act: &Array1<f32>,
        dout: &Feat,
        g: &mut Grads,
    ) -> (Feat, Array1<f32>) {
        let da2 = self.conv2.backward(ps, &cache.a2, dout, g);
        let dn2 = silu_backward(&cache.gn2.x_hat, &da2);
        let dh = self.gn2.backward(&cache.gn2, &dn2);
        // Timestep bias: summed gradient per channel.
        let mut dtb = Array1::zeros(self.out_ch);
        for ch in 0..self.out_ch {
            dtb[ch] = dh.index_axis(ndarray::Axis(0), ch).sum();
        }
        let dtemb = self.temb_proj.backward(ps, temb_act, &dtb, g);
        let da1 = self.conv1.backward(ps, &cache.a1, &dh, g);
        let dn1 = silu_backward(&cache.gn1.x_hat, &da1);
        let mut dx = self.gn1.backward(&cache.gn1, &dn1);
        match &self.skip {
            Some(skip) => dx += &skip.backward(ps, &cache.x, dout, g),
            None => dx += dout,
        }
        (dx, dtemb)
    }
}

#[derive(Debug, Clone)]
pub struct SpadeResBlock {
    norm1: SpadeNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    norm2: SpadeNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    out_ch: usize,
}

#[derive(Debug, Clone)]
pub struct SpadeResCache {
    x: Feat,
    s1: SpadeCache,
    n1: Feat,
    a1: Feat,
    s2: SpadeCache,
    n2: Feat,
    a2: Feat,
}

impl SpadeResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        cond_ch: usize,
        emb_dim: usize,
        spade_hidden: usize,
    ) -> Self {
        SpadeResBlock {
            norm1: SpadeNorm::new(ps, rng, &format!("{name}.spade1"), in_ch, cond_ch, spade_hidden),
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, Init::Kaiming),
            temb_proj: Linear::new(ps, rng, &format!("{name}.temb"), emb_dim, out_ch, Init::Kaiming),
            norm2: SpadeNorm::new(ps, rng, &format!("{name}.spade2"), out_ch, cond_ch, spade_hidden),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, Init::Zeros),
            skip: (in_ch != out_ch)
                .then(|| Conv2d::new(ps, rng, &format!("{name}.skip"), in_ch, out_ch, 1, Init::Kaiming)),
            out_ch,
        }
    }

    fn forward(
        &self,
        ps: &ParamStore,
        x: &Feat,
        cond: &Feat,
        temb_act: &Array1<f32>,
    ) -> (Feat, SpadeResCache) {
        let (n1, s1) = self.norm1.forward(ps, x, cond);
        let a1 = silu_feat(&n1);
        let mut h = self.conv1.forward(ps, &a1);
        let tb = self.temb_proj.forward(ps, temb_act);
        for ch in 0..self.out_ch {
            let bias = tb[ch];
            h.index_axis_mut(ndarray::Axis(0), ch).mapv_inplace(|v| v + bias);
        }
        let (n2, s2) = self.norm2.forward(ps, &h, cond);
        let a2 = silu_feat(&n2);
        let h2 = self.conv2.forward(ps, &a2);
        let out = match &self.skip {
            Some(skip) => skip.forward(ps, x) + &h2,
            None => x + &h2,
        };
        (out, SpadeResCache { x: x.clone(), s1, n1, a1, s2, n2, a2 })
    }

    fn backward(
        &self,
        ps: &ParamStore,
        cache: &SpadeResCache,
        cond: &Feat,
        temb_act: &Array1<f32>,
        dout: &Feat,
        g: &mut Grads,
    ) -> (Feat, Array1<f32>) {
        let da2 = self.conv2.backward(ps, &cache.a2, dout, g);
        let dn2 = silu_backward(&cache.n2, &da2);
        let dh = self.norm2.backward(ps, &cache.s2, cond, &dn2, g);
        let mut dtb = Array1::zeros(self.out_ch);
        for ch in 0..self.out_ch {
            dtb[ch] = dh.index_axis(ndarray::Axis(0), ch).sum();
        }
        let dtemb = self.temb_proj.backward(ps, temb_act, &dtb, g);
        let da1 = self.conv1.backward(ps, &cache.a1, &dh, g);
        let dn1 = silu_backward(&cache.n1, &da1);
        let mut dx = self.norm1.backward(ps, &cache.s1, cond, &dn1, g);
        match &self.skip {
            Some(skip) => dx += &skip.backward(ps, &cache.x, dout, g),
            None => dx += dout,
        }
        (dx, dtemb)
    }
}

// ---------------------------------------------------------------------------
// The U-Net
// ---------------------------------------------------------------------------

/// Structural hyperparameters; channel width at level l is
/// base_width * 2^l.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UNetShape {
    pub input_channels: usize,
    pub condition_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub timestep_embedding_dim: usize,
}

#[derive(Debug, Clone)]
pub struct UNet {
    shape: UNetShape,
    stem: Conv2d,
    enc: Vec<ResBlock>,
    mid: ResBlock,
    dec: Vec<SpadeResBlock>, // index = resolution level
    head_norm: GroupNorm,
    head: Conv2d,
    t_lin1: Linear,
    t_lin2: Linear,
}

/// Per-call activation record for the backward pass.
pub struct Tape {
    temb_sin: Array1<f32>,
    e1: Array1<f32>,
    temb: Array1<f32>,
    temb_act: Array1<f32>,
    x_in: Feat,
    enc_caches: Vec<ResCache>,
    enc_outputs_dims: Vec<(usize, usize, usize)>,
    mid_cache: ResCache,
    dec_caches: Vec<SpadeResCache>,
    concat_first: Vec<usize>,
    cond_levels: Vec<Feat>,
    head_gn: GroupNormCache,
    head_a: Feat,
    v_raw: Feat,
}

impl UNet {
    pub fn new<R: Rng>(shape: UNetShape, rng: &mut R) -> (Self, ParamStore) {
        let mut ps = ParamStore::new();
        let widths: Vec<usize> = (0..shape.depth).map(|l| shape.base_width << l).collect();
        let emb = shape.timestep_embedding_dim;
        let spade_hidden = shape.base_width;

        let stem = Conv2d::new(&mut ps, rng, "stem", shape.input_channels, widths[0], 3, Init::Kaiming);
        let mut enc = Vec::new();
        for l in 0..shape.depth {
            let in_ch = if l == 0 { widths[0] } else { widths[l - 1] };
            enc.push(ResBlock::new(&mut ps, rng, &format!("enc{l}"), in_ch, widths[l], emb));
        }
        let mid = ResBlock::new(&mut ps, rng, "mid", widths[shape.depth - 1], widths[shape.depth - 1], emb);
        let mut dec = Vec::new();
        for l in 0..shape.depth {
            let above = if l == shape.depth - 1 { widths[l] } else { widths[l + 1] };
            dec.push(SpadeResBlock::new(
                &mut ps,
                rng,
                &format!("dec{l}"),
                widths[l] + above,
                widths[l],
                shape.condition_channels,
                emb,
                spade_hidden,
            ));
        }
        let head_norm = GroupNorm::new(NORM_GROUPS);
        let head = Conv2d::new(&mut ps, rng, "head", widths[0], 2 * shape.input_channels, 3, Init::Zeros);
        let t_lin1 = Linear::new(&mut ps, rng, "temb.lin1", emb, emb, Init::Kaiming);
        let t_lin2 = Linear::new(&mut ps, rng, "temb.lin2", emb, emb, Init::Kaiming);

        (
            UNet { shape, stem, enc, mid, dec, head_norm, head, t_lin1, t_lin2 },
            ps,
        )
    }

    pub fn shape(&self) -> &UNetShape {
        &self.shape
    }

    /// Forward pass. `cond` has condition_channels channels at the input
    /// resolution; the all-zero map is the unconditional branch. Returns
    /// (eps_hat, v in [0,1], tape).
    pub fn forward(&self, ps: &ParamStore, x: &Feat, t: usize, cond: &Feat) -> (Feat, Feat, Tape) {
        let d = self.shape.depth;
        let (_, h0, w0) = x.dim();

        let temb_sin = timestep_embedding(t, self.shape.timestep_embedding_dim);
        let e1 = self.t_lin1.forward(ps, &temb_sin);
        let ea = e1.mapv(silu);
        let temb = self.t_lin2.forward(ps, &ea);
        let temb_act = temb.mapv(silu);

        let cond_levels: Vec<Feat> = (0..d).map(|l| downsample_nearest(cond, 1 << l)).collect();

        let mut h = self.stem.forward(ps, x);
        let mut enc_caches = Vec::with_capacity(d);
        let mut enc_outputs_dims = Vec::with_capacity(d);
        let mut skips: Vec<Feat> = Vec::with_capacity(d);
        for l in 0..d {
            if l > 0 {
                h = avg_pool2(&h);
            }
            let (out, cache) = self.enc[l].forward(ps, &h, &temb_act);
            enc_caches.push(cache);
            enc_outputs_dims.push(out.dim());
            skips.push(out.clone());
            h = out;
        }

        let (mut h, mid_cache) = self.mid.forward(ps, &h, &temb_act);

        let mut dec_caches: Vec<Option<SpadeResCache>> = (0..d).map(|_| None).collect();
        let mut concat_first = vec![0usize; d];
        for l in (0..d).rev() {
            let skip = &skips[l];
            concat_first[l] = h.dim().0;
            let joined = concat_channels(&h, skip);
            let (out, cache) = self.dec[l].forward(ps, &joined, &cond_levels[l], &temb_act);
            dec_caches[l] = Some(cache);
            h = if l > 0 { upsample2(&out) } else { out };
        }

        let (hn, head_gn) = self.head_norm.forward(&h);
        let head_a = silu_feat(&hn);
        let out = self.head.forward(ps, &head_a);
        let c_out = self.shape.input_channels;
        let eps = out.slice(ndarray::s![..c_out, .., ..]).to_owned();
        let v_raw = out.slice(ndarray::s![c_out.., .., ..]).to_owned();
        let v = v_raw.mapv(sigmoid);

        debug_assert_eq!(eps.dim(), (c_out, h0, w0));
        let tape = Tape {
            temb_sin,
            e1,
            temb,
            temb_act,
            x_in: x.clone(),
            enc_caches,
            enc_outputs_dims,
            mid_cache,
            dec_caches: dec_caches.into_iter().map(Option::unwrap).collect(),
            concat_first,
            cond_levels,
            head_gn,
            head_a,
            v_raw,
        };
        (eps, v, tape)
    }

    /// Backward pass from (d_eps, d_v). Accumulates parameter gradients.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&self, ps: &ParamStore, tape: &Tape, d_eps: &Feat, d_v: &Feat, g: &mut Grads) {
        let d = self.shape.depth;

        // v = sigmoid(v_raw)
        let mut d_vraw = d_v.clone();
        d_vraw.zip_mut_with(&tape.v_raw, |dv, &raw| {
            let s = sigmoid(raw);
            *dv *= s * (1.0 - s);
        });
        let dout = concat_channels(d_eps, &d_vraw);

        let dhead_a = self.head.backward(ps, &tape.head_a, &dout, g);
        let dhn = silu_backward(&tape.head_gn.x_hat, &dhead_a);
        let mut dh = self.head_norm.backward(&tape.head_gn, &dhn);

        let mut dtemb_act: Array1<f32> = Array1::zeros(self.shape.timestep_embedding_dim);
        let mut dskips: Vec<Option<Feat>> = (0..d).map(|_| None).collect();
        for l in 0..d {
            if l > 0 {
                dh = upsample2_backward(&dh);
            }
            let (djoined, dt) = self.dec[l].backward(
                ps,
                &tape.dec_caches[l],
                &tape.cond_levels[l],
                &tape.temb_act,
                &dh,
                g,
            );
            dtemb_act += &dt;
            let (dabove, dskip) = split_channels(&djoined, tape.concat_first[l]);
            dskips[l] = Some(dskip);
            dh = dabove;
        }

        let (dmid, dt) = self
            .mid
            .backward(ps, &tape.mid_cache, &tape.temb_act, &dh, g);
        dtemb_act += &dt;
        dh = dmid;

        for l in (0..d).rev() {
            dh += dskips[l].as_ref().expect("skip gradient");
            debug_assert_eq!(dh.dim(), tape.enc_outputs_dims[l]);
            let (dx, dt) = self.enc[l].backward(ps, &tape.enc_caches[l], &tape.temb_act, &dh, g);
            dtemb_act += &dt;
            dh = if l > 0 { avg_pool2_backward(&dx) } else { dx };
        }

        let _ = self.stem.backward(ps, &tape.x_in, &dh, g);

        // Timestep MLP: temb_act = silu(temb), temb = lin2(silu(lin1(sin))).
        let mut dtemb = dtemb_act;
        dtemb.zip_mut_with(&tape.temb, |d, &p| *d *= silu_grad(p));
        let ea = tape.e1.mapv(silu);
        let dea = self.t_lin2.backward(ps, &ea, &dtemb, g);
        let mut de1 = dea;
        de1.zip_mut_with(&tape.e1, |d, &p| *d *= silu_grad(p));
        let _ = self.t_lin1.backward(ps, &tape.temb_sin, &de1, g);
    }
}
