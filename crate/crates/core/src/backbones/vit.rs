//! Plain ViT encoder with four block taps resampled to pyramid strides.
//!
//! Parameter names follow timm. All taps share the stride-16 token grid; they
//! are bilinearly resized to strides 4, 8, 16 and 32, which adds no
//! parameters. The final LayerNorm is applied to the last tap when it is the
//! last block.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{drop_path_schedule, ops, Conv2d, ConvOpts, DropPath, Init, LayerNorm, Linear, NoiseRng, ParamBuilder};
use crate::model::PYRAMID_STRIDES;

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    /// Side of the square position-embedding grid stored in checkpoints.
    pub pos_grid: usize,
    pub drop_path: f64,
}

const LN_EPS: f64 = 1e-6;
const INIT: Init = Init::Normal { std: 0.02 };

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    drop_path: DropPath,
}

impl Block {
    fn new(pb: &ParamBuilder, cfg: &VitConfig, dp: f64, rng: NoiseRng) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), d, LN_EPS)?,
            qkv: Linear::with_init(&pb.pp("attn").pp("qkv"), d, 3 * d, true, INIT)?,
            proj: Linear::with_init(&pb.pp("attn").pp("proj"), d, d, true, INIT)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), d, LN_EPS)?,
            fc1: Linear::with_init(&pb.pp("mlp").pp("fc1"), d, d * cfg.mlp_ratio, true, INIT)?,
            fc2: Linear::with_init(&pb.pp("mlp").pp("fc2"), d * cfg.mlp_ratio, d, true, INIT)?,
            heads: cfg.heads,
            drop_path: DropPath::new(dp, rng),
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (1.0 / (hd as f64).sqrt()))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let attn = ops::softmax_last_dim(&ops::matmul(&q, &k.t()?)?)?;
        let out = ops::matmul(&attn, &v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let a = self.attention(&self.norm1.forward(x)?)?;
        let x = (x + self.drop_path.forward(&a, train)?)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok((&x + self.drop_path.forward(&m, train)?)?)
    }
}

pub struct Vit {
    cfg: VitConfig,
    patch_embed: Conv2d,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    taps: Vec<usize>,
}

impl Vit {
    pub fn new(pb: &ParamBuilder, cfg: &VitConfig, taps: Vec<usize>, rng: NoiseRng) -> Result<Self> {
        if taps.len() != 4 || taps.iter().any(|&t| t >= cfg.depth) {
            return Err(Error::InvalidSpec(format!(
                "ViT with {} blocks cannot tap {taps:?}",
                cfg.depth
            )));
        }
        let d = cfg.dim;
        let patch_embed = Conv2d::with_init(
            &pb.pp("patch_embed").pp("proj"),
            3,
            d,
            cfg.patch,
            ConvOpts::new(cfg.patch, 0, true),
            INIT,
        )?;
        let cls_token = pb.get((1, 1, d), "cls_token", Init::Normal { std: 1e-6 })?;
        let pos_embed = pb.get((1, 1 + cfg.pos_grid * cfg.pos_grid, d), "pos_embed", INIT)?;
        let dpr = drop_path_schedule(cfg.drop_path, cfg.depth);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&pb.pp("blocks").pp(i), cfg, dpr[i], rng.clone()))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&pb.pp("norm"), d, LN_EPS)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            taps,
        })
    }

    pub fn widths(&self) -> [usize; 4] {
        [self.cfg.dim; 4]
    }

    pub fn probe(&self) -> &Tensor {
        self.patch_embed.weight()
    }

    fn positions(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let d = self.cfg.dim;
        let g = self.cfg.pos_grid;
        let cls = self.pos_embed.narrow(1, 0, 1)?;
        let grid = self.pos_embed.narrow(1, 1, g * g)?;
        if gh == g && gw == g {
            return Ok(self.pos_embed.clone());
        }
        let grid = grid.reshape((1, g, g, d))?.permute((0, 3, 1, 2))?.contiguous()?;
        let grid = ops::resize_bilinear(&grid, gh, gw)?
            .flatten_from(2)?
            .transpose(1, 2)?;
        Ok(Tensor::cat(&[&cls, &grid], 1)?)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = x.dims4()?;
        let t = self.patch_embed.forward(x)?;
        let (b, d, gh, gw) = t.dims4()?;
        let t = t.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.cls_token.broadcast_as((b, 1, d))?;
        let mut t = Tensor::cat(&[&cls, &t], 1)?.broadcast_add(&self.positions(gh, gw)?)?;
        let mut grids = Vec::with_capacity(4);
        for (i, blk) in self.blocks.iter().enumerate() {
            t = blk.forward(&t, train)?;
            if self.taps.contains(&i) {
                let mut tok = t.narrow(1, 1, gh * gw)?;
                if i + 1 == self.cfg.depth {
                    tok = self.norm.forward(&tok)?;
                }
                let g = tok.transpose(1, 2)?.reshape((b, d, gh, gw))?;
                grids.push(g);
            }
            if grids.len() == 4 {
                break;
            }
        }
        grids
            .iter()
            .zip(PYRAMID_STRIDES)
            .map(|(g, s)| ops::resize_bilinear(&g.contiguous()?, h / s, w / s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::{Arc, Mutex};

    #[test]
    fn taps_resampled_to_pyramid() {
        let cfg = VitConfig {
            dim: 16,
            depth: 4,
            heads: 2,
            mlp_ratio: 2,
            patch: 16,
            pos_grid: 14,
            drop_path: 0.0,
        };
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let rng = Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(0)));
        let m = Vit::new(&store.root(), &cfg, vec![0, 1, 2, 3], rng).unwrap();
        let x = Tensor::randn(0f32, 1., (1, 3, 64, 96), &Device::Cpu).unwrap();
        let f = m.forward(&x, false).unwrap();
        for (t, s) in f.iter().zip(PYRAMID_STRIDES) {
            assert_eq!(t.dims(), &[1, 16, 64 / s, 96 / s]);
        }
        assert!(Vit::new(&store.root(), &cfg, vec![0, 1, 2, 4], Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(0)))).is_err());
    }
}
