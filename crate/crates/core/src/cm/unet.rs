//! Time-conditioned convolutional encoder–decoder `F_θ(x, c_noise)`.
//!
//! Layout per resolution level: residual blocks, then a stride-2 conv on the
//! way down; nearest ×2 upsampling + conv, an additive skip, then residual
//! blocks on the way up. A sinusoidal noise embedding passes through a
//! two-layer MLP and is projected into every residual block.

use serde::{Deserialize, Serialize};

use super::nn::{silu, silu_backward, upsample2, upsample2_backward, Act, Conv, Linear, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub emb_dim: usize,
}

impl BackboneConfig {
    /// Small network that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            emb_dim: 32,
        }
    }

    /// Wider and deeper variant for longer training runs.
    pub fn full() -> Self {
        Self {
            base_channels: 64,
            channel_mults: vec![1, 2, 2],
            res_blocks: 2,
            emb_dim: 128,
        }
    }

    pub fn validate(&self, n_r: usize, n_t: usize) -> Result<()> {
        if self.base_channels == 0 || self.res_blocks == 0 || self.channel_mults.is_empty() {
            return Err(Error::InvalidConfig("backbone sizes must be positive".into()));
        }
        if self.channel_mults.contains(&0) {
            return Err(Error::InvalidConfig("channel multipliers must be positive".into()));
        }
        if self.emb_dim < 2 || !self.emb_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig("emb_dim must be even and at least 2".into()));
        }
        let div = 1usize << (self.channel_mults.len() - 1);
        if !n_r.is_multiple_of(div) || !n_t.is_multiple_of(div) {
            return Err(Error::InvalidConfig(format!(
                "{n_r}x{n_t} input is not divisible by {div} for {} levels",
                self.channel_mults.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    #[serde(skip)]
    pub fan_in: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let offset = self.total;
        let entry = ParamEntry {
            name,
            shape,
            offset,
            fan_in,
        };
        self.total += entry.len();
        self.entries.push(entry);
        offset
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Conv {
        let weight = self.push(format!("{name}.weight"), vec![cout, cin, 3, 3], cin * 9);
        let bias = self.push(format!("{name}.bias"), vec![cout], cin * 9);
        Conv {
            cin,
            cout,
            stride,
            weight,
            bias,
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let weight = self.push(format!("{name}.weight"), vec![dout, din], din);
        let bias = self.push(format!("{name}.bias"), vec![dout], din);
        Linear {
            din,
            dout,
            weight,
            bias,
        }
    }

    fn res_block(&mut self, name: &str, ch: usize, emb: usize) -> ResBlock {
        ResBlock {
            conv1: self.conv(&format!("{name}.conv1"), ch, ch, 1),
            conv2: self.conv(&format!("{name}.conv2"), ch, ch, 1),
            emb: self.linear(&format!("{name}.emb"), emb, ch),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    emb: Linear,
}

struct ResCache<T> {
    input: Act<T>,
    cols1: Vec<T>,
    pre: Act<T>,
    cols2: Vec<T>,
}

impl ResBlock {
    fn forward<T: Scalar>(&self, p: &[T], x: Act<T>, e: &[T]) -> (Act<T>, ResCache<T>) {
        let s1 = Act::from_vec(x.c, x.h, x.w, silu(&x.data));
        let (mut pre, cols1) = self.conv1.forward(p, &s1);
        let proj = self.emb.forward(p, e);
        let plane = pre.h * pre.w;
        for (c, &b) in proj.iter().enumerate() {
            pre.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        let s2 = Act::from_vec(pre.c, pre.h, pre.w, silu(&pre.data));
        let (mut out, cols2) = self.conv2.forward(p, &s2);
        out.add_assign(&x);
        let cache = ResCache {
            input: x,
            cols1,
            pre,
            cols2,
        };
        (out, cache)
    }

    fn backward<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: &ResCache<T>,
        dout: Act<T>,
        e: &[T],
        de: &mut [T],
    ) -> Act<T> {
        let (h, w) = (cache.pre.h, cache.pre.w);
        let ds2 = self
            .conv2
            .backward(p, g, &cache.cols2, &dout, h, w, true)
            .expect("input gradient requested");
        let dpre = Act::from_vec(ds2.c, h, w, silu_backward(&cache.pre.data, &ds2.data));
        let plane = h * w;
        let dproj: Vec<T> = (0..dpre.c)
            .map(|c| dpre.data[c * plane..(c + 1) * plane].iter().copied().sum())
            .collect();
        for (d, v) in de.iter_mut().zip(self.emb.backward(p, g, e, &dproj)) {
            *d += v;
        }
        let ds1 = self
            .conv1
            .backward(p, g, &cache.cols1, &dpre, h, w, true)
            .expect("input gradient requested");
        let mut dx = dout;
        for (d, s) in dx.data.iter_mut().zip(silu_backward(&cache.input.data, &ds1.data)) {
            *d += s;
        }
        dx
    }
}

#[derive(Clone)]
struct DownLevel {
    blocks: Vec<ResBlock>,
    down: Option<Conv>,
}

#[derive(Clone)]
struct UpLevel {
    up: Option<Conv>,
    blocks: Vec<ResBlock>,
}

/// Network topology plus parameter layout; weights live in a flat slice
/// supplied by the caller.
#[derive(Clone)]
pub struct UNet {
    config: BackboneConfig,
    n_r: usize,
    n_t: usize,
    entries: Vec<ParamEntry>,
    total: usize,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv,
    down: Vec<DownLevel>,
    mid: ResBlock,
    up: Vec<UpLevel>,
    conv_out: Conv,
}

/// Intermediate values kept for the backward pass.
pub struct Tape<T> {
    sinus: Vec<T>,
    emb_pre: Vec<T>,
    emb_hidden: Vec<T>,
    emb: Vec<T>,
    in_cols: Vec<T>,
    down_caches: Vec<Vec<ResCache<T>>>,
    down_cols: Vec<Option<(Vec<T>, usize, usize)>>,
    mid_cache: ResCache<T>,
    up_cols: Vec<Option<Vec<T>>>,
    up_caches: Vec<Vec<ResCache<T>>>,
    out_pre: Act<T>,
    out_cols: Vec<T>,
}

impl UNet {
    pub fn new(config: &BackboneConfig, n_r: usize, n_t: usize) -> Result<Self> {
        config.validate(n_r, n_t)?;
        let e = config.emb_dim;
        let chans: Vec<usize> = config.channel_mults.iter().map(|m| m * config.base_channels).collect();
        let levels = chans.len();
        let mut b = LayoutBuilder::default();
        let temb1 = b.linear("temb.0", e, e);
        let temb2 = b.linear("temb.1", e, e);
        let conv_in = b.conv("conv_in", 2, chans[0], 1);
        let mut down = Vec::with_capacity(levels);
        for (l, &ch) in chans.iter().enumerate() {
            let blocks = (0..config.res_blocks)
                .map(|r| b.res_block(&format!("down.{l}.res.{r}"), ch, e))
                .collect();
            let dconv = (l + 1 < levels).then(|| b.conv(&format!("down.{l}.downsample"), ch, chans[l + 1], 2));
            down.push(DownLevel { blocks, down: dconv });
        }
        let mid = b.res_block("mid", chans[levels - 1], e);
        let mut up: Vec<UpLevel> = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let uconv = (l + 1 < levels).then(|| b.conv(&format!("up.{l}.upsample"), chans[l + 1], chans[l], 1));
            let blocks = (0..config.res_blocks)
                .map(|r| b.res_block(&format!("up.{l}.res.{r}"), chans[l], e))
                .collect();
            up.push(UpLevel { up: uconv, blocks });
        }
        up.reverse();
        let conv_out = b.conv("conv_out", chans[0], 2, 1);
        Ok(Self {
            config: config.clone(),
            n_r,
            n_t,
            entries: b.entries,
            total: b.total,
            temb1,
            temb2,
            conv_in,
            down,
            mid,
            up,
            conv_out,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.n_r, self.n_t)
    }

    pub fn param_count(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Uniform `±1/√fan_in` initialization for every weight and bias.
    pub fn init_params<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        let mut params = vec![0.0f32; self.total];
        for entry in &self.entries {
            let bound = 1.0 / (entry.fan_in as f64).sqrt();
            for v in &mut params[entry.offset..entry.offset + entry.len()] {
                *v = rng.random_range(-bound..bound) as f32;
            }
        }
        params
    }

    fn sinusoidal<T: Scalar>(&self, c_noise: f64) -> Vec<T> {
        let half = self.config.emb_dim / 2;
        let mut out = Vec::with_capacity(2 * half);
        let args: Vec<f64> = (0..half)
            .map(|i| c_noise * (-(10000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        out.extend(args.iter().map(|a| T::lit(a.sin())));
        out.extend(args.iter().map(|a| T::lit(a.cos())));
        out
    }

    /// Evaluates `F_θ` on a `2 × n_r × n_t` input that is already scaled by
    /// `c_in`, returning the output and the tape for [`UNet::backward`].
    pub fn forward<T: Scalar>(&self, params: &[T], x: Act<T>, c_noise: f64) -> (Act<T>, Tape<T>) {
        debug_assert_eq!(params.len(), self.total);
        debug_assert_eq!((x.c, x.h, x.w), (2, self.n_r, self.n_t));
        let sinus = self.sinusoidal::<T>(c_noise);
        let emb_pre = self.temb1.forward(params, &sinus);
        let emb_hidden = silu(&emb_pre);
        let emb = self.temb2.forward(params, &emb_hidden);

        let (mut h, in_cols) = self.conv_in.forward(params, &x);
        let mut skips = Vec::with_capacity(self.down.len());
        let mut down_caches = Vec::with_capacity(self.down.len());
        let mut down_cols = Vec::with_capacity(self.down.len());
        for level in &self.down {
            let mut caches = Vec::with_capacity(level.blocks.len());
            for blk in &level.blocks {
                let (out, cache) = blk.forward(params, h, &emb);
                caches.push(cache);
                h = out;
            }
            skips.push(h.clone());
            down_caches.push(caches);
            match &level.down {
                Some(conv) => {
                    let (in_h, in_w) = (h.h, h.w);
                    let (out, cols) = conv.forward(params, &h);
                    down_cols.push(Some((cols, in_h, in_w)));
                    h = out;
                }
                None => down_cols.push(None),
            }
        }
        let (out, mid_cache) = self.mid.forward(params, h, &emb);
        h = out;

        let levels = self.up.len();
        let mut up_cols: Vec<Option<Vec<T>>> = (0..levels).map(|_| None).collect();
        let mut up_caches: Vec<Vec<ResCache<T>>> = (0..levels).map(|_| Vec::new()).collect();
        for l in (0..levels).rev() {
            let level = &self.up[l];
            if let Some(conv) = &level.up {
                let upsampled = upsample2(&h);
                let (out, cols) = conv.forward(params, &upsampled);
                up_cols[l] = Some(cols);
                h = out;
            }
            h.add_assign(&skips[l]);
            for blk in &level.blocks {
                let (out, cache) = blk.forward(params, h, &emb);
                up_caches[l].push(cache);
                h = out;
            }
        }
        let s = Act::from_vec(h.c, h.h, h.w, silu(&h.data));
        let (out, out_cols) = self.conv_out.forward(params, &s);
        let tape = Tape {
            sinus,
            emb_pre,
            emb_hidden,
            emb,
            in_cols,
            down_caches,
            down_cols,
            mid_cache,
            up_cols,
            up_caches,
            out_pre: h,
            out_cols,
        };
        (out, tape)
    }

    /// Accumulates `∂⟨dout, F_θ⟩/∂θ` into `grads`.
    pub fn backward<T: Scalar>(&self, params: &[T], grads: &mut [T], tape: &Tape<T>, dout: &Act<T>) {
        debug_assert_eq!(grads.len(), self.total);
        let e = &tape.emb;
        let mut de = vec![T::zero(); e.len()];
        let pre = &tape.out_pre;
        let ds = self
            .conv_out
            .backward(params, grads, &tape.out_cols, dout, pre.h, pre.w, true)
            .expect("input gradient requested");
        let mut dh = Act::from_vec(pre.c, pre.h, pre.w, silu_backward(&pre.data, &ds.data));

        let levels = self.up.len();
        let mut dskips: Vec<Option<Act<T>>> = (0..levels).map(|_| None).collect();
        for l in 0..levels {
            let level = &self.up[l];
            for (blk, cache) in level.blocks.iter().zip(&tape.up_caches[l]).rev() {
                dh = blk.backward(params, grads, cache, dh, e, &mut de);
            }
            dskips[l] = Some(dh.clone());
            if let Some(conv) = &level.up {
                let cols = tape.up_cols[l].as_ref().expect("upsample cache");
                let dup = conv
                    .backward(params, grads, cols, &dh, dh.h, dh.w, true)
                    .expect("input gradient requested");
                dh = upsample2_backward(&dup);
            }
        }
        dh = self.mid.backward(params, grads, &tape.mid_cache, dh, e, &mut de);

        for l in (0..levels).rev() {
            let level = &self.down[l];
            if let Some(conv) = &level.down {
                let (cols, in_h, in_w) = tape.down_cols[l].as_ref().expect("downsample cache");
                dh = conv
                    .backward(params, grads, cols, &dh, *in_h, *in_w, true)
                    .expect("input gradient requested");
            }
            dh.add_assign(dskips[l].as_ref().expect("skip gradient"));
            for (blk, cache) in level.blocks.iter().zip(&tape.down_caches[l]).rev() {
                dh = blk.backward(params, grads, cache, dh, e, &mut de);
            }
        }
        self.conv_in
            .backward(params, grads, &tape.in_cols, &dh, self.n_r, self.n_t, false);

        let dhidden = self.temb2.backward(params, grads, &tape.emb_hidden, &de);
        let dpre = silu_backward(&tape.emb_pre, &dhidden);
        self.temb1.backward(params, grads, &tape.sinus, &dpre);
    }
}
