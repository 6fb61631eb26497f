//! Swin and SwinV2 hierarchical window-attention encoders.
//!
//! Parameter names follow the Hugging Face layout so pretrained checkpoints
//! load by stripping a prefix. Feature maps are taken after each stage's
//! blocks (before patch merging) and passed through a per-stage LayerNorm.
//! Inputs whose stage resolution is not a window multiple are zero-padded
//! per block; the cyclic shift is disabled once a stage fits in one window.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::nn::{drop_path_schedule, ops, DropPath, Init, LayerNorm, Linear, NoiseRng, ParamBuilder};
use crate::nn::{Conv2d, ConvOpts};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwinVersion {
    V1,
    V2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwinConfig {
    pub version: SwinVersion,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub mlp_ratio: usize,
    pub drop_path: f64,
}

impl SwinConfig {
    pub fn widths(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.embed_dim << i)
    }
}

const LN_EPS: f64 = 1e-5;
const INIT: Init = Init::Normal { std: 0.02 };

fn relative_position_index(w: usize) -> Vec<u32> {
    let n = w * w;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dh = (i / w) as isize - (j / w) as isize + w as isize - 1;
            let dw = (i % w) as isize - (j % w) as isize + w as isize - 1;
            idx.push((dh * (2 * w as isize - 1) + dw) as u32);
        }
    }
    idx
}

/// Log-spaced relative coordinates fed to the SwinV2 bias MLP.
fn relative_coords_table(w: usize) -> Vec<f32> {
    let span = 2 * w - 1;
    let norm = (w.max(2) - 1) as f32;
    let f = |d: isize| {
        let x = d as f32 / norm * 8.0;
        x.signum() * (x.abs() + 1.0).log2() / 8f32.log2()
    };
    let mut out = Vec::with_capacity(span * span * 2);
    for a in 0..span {
        for b in 0..span {
            out.push(f(a as isize - (w as isize - 1)));
            out.push(f(b as isize - (w as isize - 1)));
        }
    }
    out
}

/// Additive mask separating the regions that the cyclic shift brings into
/// one window. Shape `(nW, N, N)`.
fn shifted_window_mask(hp: usize, wp: usize, win: usize, shift: usize) -> Vec<f32> {
    let region = |v: usize, len: usize| {
        if v < len - win {
            0
        } else if v < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (hp / win, wp / win);
    let n = win * win;
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for by in 0..nh {
        for bx in 0..nw {
            let ids: Vec<usize> = (0..n)
                .map(|t| {
                    let y = by * win + t / win;
                    let x = bx * win + t % win;
                    region(y, hp) * 3 + region(x, wp)
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    mask.push(if ids[i] == ids[j] { 0.0 } else { -100.0 });
                }
            }
        }
    }
    mask
}

fn window_partition(x: &Tensor, win: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h / win, win, w / win, win, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / win) * (w / win), win * win, c))?)
}

fn window_reverse(x: &Tensor, win: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(D::Minus1)?;
    Ok(x
        .reshape((b, h / win, w / win, win, win, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    Ok(x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::INFINITY)?;
    Ok(x.broadcast_div(&norm)?)
}

struct WindowAttention {
    version: SwinVersion,
    heads: usize,
    win: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    dense: Linear,
    index: Tensor,
    // V1: learned table; V2: MLP over log-spaced coordinates.
    table: Option<Tensor>,
    cpb: Option<(Linear, Linear, Tensor)>,
    logit_scale: Option<Tensor>,
}

impl WindowAttention {
    fn new(pb: &ParamBuilder, version: SwinVersion, dim: usize, heads: usize, win: usize) -> Result<Self> {
        let s = pb.pp("attention").pp("self");
        let dev = pb.device().clone();
        let idx = relative_position_index(win);
        let index = Tensor::from_vec(idx, win * win * win * win, &dev)?;
        let span = 2 * win - 1;
        let (table, cpb, logit_scale, key_bias) = match version {
            SwinVersion::V1 => (
                Some(s.get((span * span, heads), "relative_position_bias_table", INIT)?),
                None,
                None,
                true,
            ),
            SwinVersion::V2 => {
                let mlp = s.pp("continuous_position_bias_mlp");
                let l0 = Linear::with_init(&mlp.pp("0"), 2, 512, true, INIT)?;
                let l2 = Linear::with_init(&mlp.pp("2"), 512, heads, false, INIT)?;
                let coords = Tensor::from_vec(relative_coords_table(win), (span * span, 2), &dev)?
                    .to_dtype(pb.dtype())?;
                let ls = s.get((heads, 1, 1), "logit_scale", Init::Const(10f64.ln()))?;
                (None, Some((l0, l2, coords)), Some(ls), false)
            }
        };
        Ok(Self {
            version,
            heads,
            win,
            query: Linear::with_init(&s.pp("query"), dim, dim, true, INIT)?,
            key: Linear::with_init(&s.pp("key"), dim, dim, key_bias, INIT)?,
            value: Linear::with_init(&s.pp("value"), dim, dim, true, INIT)?,
            dense: Linear::with_init(&pb.pp("attention").pp("output").pp("dense"), dim, dim, true, INIT)?,
            index,
            table,
            cpb,
            logit_scale,
        })
    }

    fn position_bias(&self) -> Result<Tensor> {
        let n = self.win * self.win;
        let table = match (&self.table, &self.cpb) {
            (Some(t), _) => t.clone(),
            (None, Some((l0, l2, coords))) => l2.forward(&l0.forward(coords)?.relu()?)?,
            _ => unreachable!("one bias parameterization is always present"),
        };
        let bias = table
            .index_select(&self.index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()?;
        Ok(match self.version {
            SwinVersion::V1 => bias,
            SwinVersion::V2 => (candle_nn::ops::sigmoid(&bias)? * 16.0)?,
        })
    }

    /// `x`: `(B_, N, C)` windows; `mask`: `(nW, N, N)`.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let q = split_heads(&self.query.forward(x)?, self.heads)?;
        let k = split_heads(&self.key.forward(x)?, self.heads)?;
        let v = split_heads(&self.value.forward(x)?, self.heads)?;
        let mut attn = match self.version {
            SwinVersion::V1 => {
                let q = (q * (1.0 / (hd as f64).sqrt()))?;
                ops::matmul(&q, &k.t()?)?
            }
            SwinVersion::V2 => {
                let scores = ops::matmul(&l2_normalize(&q)?, &l2_normalize(&k)?.t()?)?;
                let scale = self
                    .logit_scale
                    .as_ref()
                    .expect("v2 attention has a logit scale")
                    .clamp(f64::NEG_INFINITY, 100f64.ln())?
                    .exp()?;
                scores.broadcast_mul(&scale.unsqueeze(0)?)?
            }
        };
        attn = attn.broadcast_add(&self.position_bias()?.unsqueeze(0)?)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let attn = ops::softmax_last_dim(&attn)?;
        let out = ops::matmul(&attn, &v)?.transpose(1, 2)?.reshape((bw, n, c))?;
        self.dense.forward(&out)
    }
}

struct SwinBlock {
    version: SwinVersion,
    win: usize,
    shift: usize,
    norm_before: LayerNorm,
    attention: WindowAttention,
    norm_after: LayerNorm,
    intermediate: Linear,
    output: Linear,
    drop_path: DropPath,
}

impl SwinBlock {
    fn new(pb: &ParamBuilder, cfg: &SwinConfig, dim: usize, heads: usize, shift: bool, dp: f64, rng: NoiseRng) -> Result<Self> {
        let hidden = dim * cfg.mlp_ratio;
        Ok(Self {
            version: cfg.version,
            win: cfg.window,
            shift: if shift { cfg.window / 2 } else { 0 },
            norm_before: LayerNorm::new(&pb.pp("layernorm_before"), dim, LN_EPS)?,
            attention: WindowAttention::new(pb, cfg.version, dim, heads, cfg.window)?,
            norm_after: LayerNorm::new(&pb.pp("layernorm_after"), dim, LN_EPS)?,
            intermediate: Linear::with_init(&pb.pp("intermediate").pp("dense"), dim, hidden, true, INIT)?,
            output: Linear::with_init(&pb.pp("output").pp("dense"), hidden, dim, true, INIT)?,
            drop_path: DropPath::new(dp, rng),
        })
    }

    fn attend(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, _, c) = x.dims3()?;
        let win = self.win;
        let (hp, wp) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
        let shift = if h.min(w) <= win { 0 } else { self.shift };
        let mut t = x
            .reshape((b, h, w, c))?
            .pad_with_zeros(1, 0, hp - h)?
            .pad_with_zeros(2, 0, wp - w)?;
        if shift > 0 {
            t = t.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?;
        }
        let mask = if shift > 0 {
            let n = win * win;
            let nw = (hp / win) * (wp / win);
            let m = Tensor::from_vec(shifted_window_mask(hp, wp, win, shift), (nw, n, n), x.device())?;
            Some(m.to_dtype(x.dtype())?)
        } else {
            None
        };
        let windows = window_partition(&t, win)?;
        let attn = self.attention.forward(&windows, mask.as_ref())?;
        let mut t = window_reverse(&attn, win, b, hp, wp)?;
        if shift > 0 {
            t = t.roll(shift as i32, 1)?.roll(shift as i32, 2)?;
        }
        Ok(t.narrow(1, 0, h)?.narrow(2, 0, w)?.reshape((b, h * w, c))?)
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize, train: bool) -> Result<Tensor> {
        match self.version {
            SwinVersion::V1 => {
                let a = self.attend(&self.norm_before.forward(x)?, h, w)?;
                let x = (x + self.drop_path.forward(&a, train)?)?;
                let m = self.intermediate.forward(&self.norm_after.forward(&x)?)?.gelu_erf()?;
                let m = self.output.forward(&m)?;
                Ok((&x + self.drop_path.forward(&m, train)?)?)
            }
            SwinVersion::V2 => {
                let a = self.norm_before.forward(&self.attend(x, h, w)?)?;
                let x = (x + self.drop_path.forward(&a, train)?)?;
                let m = self.output.forward(&self.intermediate.forward(&x)?.gelu_erf()?)?;
                let m = self.norm_after.forward(&m)?;
                Ok((&x + self.drop_path.forward(&m, train)?)?)
            }
        }
    }
}

struct PatchMerging {
    version: SwinVersion,
    reduction: Linear,
    norm: LayerNorm,
}

impl PatchMerging {
    fn new(pb: &ParamBuilder, version: SwinVersion, dim: usize) -> Result<Self> {
        let norm_dim = match version {
            SwinVersion::V1 => 4 * dim,
            SwinVersion::V2 => 2 * dim,
        };
        Ok(Self {
            version,
            reduction: Linear::with_init(&pb.pp("reduction"), 4 * dim, 2 * dim, false, INIT)?,
            norm: LayerNorm::new(&pb.pp("norm"), norm_dim, LN_EPS)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<(Tensor, usize, usize)> {
        let (b, _, c) = x.dims3()?;
        let t = x
            .reshape((b, h, w, c))?
            .pad_with_zeros(1, 0, h % 2)?
            .pad_with_zeros(2, 0, w % 2)?;
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        // channel order: (even row, even col), (odd, even), (even, odd), (odd, odd)
        let t = t
            .reshape((b, h2, 2, w2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h2 * w2, 4 * c))?;
        let out = match self.version {
            SwinVersion::V1 => self.reduction.forward(&self.norm.forward(&t)?)?,
            SwinVersion::V2 => self.norm.forward(&self.reduction.forward(&t)?)?,
        };
        Ok((out, h2, w2))
    }
}

struct Stage {
    blocks: Vec<SwinBlock>,
    downsample: Option<PatchMerging>,
    out_norm: LayerNorm,
}

pub struct Swin {
    patch_embed: Conv2d,
    embed_norm: LayerNorm,
    stages: Vec<Stage>,
    widths: [usize; 4],
}

impl Swin {
    pub fn new(pb: &ParamBuilder, cfg: &SwinConfig, rng: NoiseRng) -> Result<Self> {
        let emb = pb.pp("embeddings");
        let patch_embed = Conv2d::with_init(
            &emb.pp("patch_embeddings").pp("projection"),
            3,
            cfg.embed_dim,
            4,
            ConvOpts::new(4, 0, true),
            INIT,
        )?;
        let embed_norm = LayerNorm::new(&emb.pp("norm"), cfg.embed_dim, LN_EPS)?;
        let dpr = drop_path_schedule(cfg.drop_path, cfg.depths.iter().sum());
        let widths = cfg.widths();
        let mut stages = Vec::new();
        let mut k = 0;
        for (i, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
            let lp = pb.pp("encoder").pp("layers").pp(i);
            let dim = widths[i];
            let blocks = (0..depth)
                .map(|j| {
                    let bp = lp.pp("blocks").pp(j);
                    SwinBlock::new(&bp, cfg, dim, heads, j % 2 == 1, dpr[k + j], rng.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            k += depth;
            let downsample = if i < 3 {
                Some(PatchMerging::new(&lp.pp("downsample"), cfg.version, dim)?)
            } else {
                None
            };
            let out_norm = LayerNorm::new(&pb.pp("hidden_states_norms").pp(format!("stage{}", i + 1)), dim, LN_EPS)?;
            stages.push(Stage {
                blocks,
                downsample,
                out_norm,
            });
        }
        Ok(Self {
            patch_embed,
            embed_norm,
            stages,
            widths,
        })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn probe(&self) -> &Tensor {
        self.patch_embed.weight()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let t = self.patch_embed.forward(x)?;
        let (b, c, mut h, mut w) = t.dims4()?;
        let mut t = self.embed_norm.forward(&t.flatten_from(2)?.transpose(1, 2)?)?;
        let mut outs = Vec::with_capacity(4);
        let mut c = c;
        for stage in &self.stages {
            for blk in &stage.blocks {
                t = blk.forward(&t, h, w, train)?;
            }
            let f = stage
                .out_norm
                .forward(&t)?
                .reshape((b, h, w, c))?
                .permute((0, 3, 1, 2))?
                .contiguous()?;
            outs.push(f);
            if let Some(ds) = &stage.downsample {
                let (nt, nh, nw) = ds.forward(&t, h, w)?;
                t = nt;
                h = nh;
                w = nw;
                c *= 2;
            }
        }
        Ok(outs)
    }
}

/// Additive shift mask as a tensor, exposed for tests.
#[cfg(test)]
fn mask_tensor(hp: usize, wp: usize, win: usize, shift: usize) -> Tensor {
    let n = win * win;
    let nw = (hp / win) * (wp / win);
    Tensor::from_vec(shifted_window_mask(hp, wp, win, shift), (nw, n, n), &candle_core::Device::Cpu).unwrap()
}
