//! ConvNeXt encoder, Hugging Face parameter names.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{
    drop_path_schedule, ops, Conv2d, ConvOpts, DropPath, Init, LayerNorm, LayerNorm2d, Linear,
    NoiseRng, ParamBuilder,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNextConfig {
    pub widths: [usize; 4],
    pub depths: [usize; 4],
    pub drop_path: f64,
    pub layer_scale_init: f64,
}

const LN_EPS: f64 = 1e-6;
const INIT: Init = Init::Normal { std: 0.02 };

struct Layer {
    dw_weight: Tensor,
    dw_bias: Tensor,
    norm: LayerNorm,
    pw1: Linear,
    pw2: Linear,
    gamma: Tensor,
    drop_path: DropPath,
}

impl Layer {
    fn new(pb: &ParamBuilder, dim: usize, dp: f64, ls: f64, rng: NoiseRng) -> Result<Self> {
        Ok(Self {
            dw_weight: pb.pp("dwconv").get((dim, 1, 7, 7), "weight", INIT)?,
            dw_bias: pb.pp("dwconv").get(dim, "bias", Init::ZEROS)?,
            norm: LayerNorm::new(&pb.pp("layernorm"), dim, LN_EPS)?,
            pw1: Linear::with_init(&pb.pp("pwconv1"), dim, 4 * dim, true, INIT)?,
            pw2: Linear::with_init(&pb.pp("pwconv2"), 4 * dim, dim, true, INIT)?,
            gamma: pb.get(dim, "layer_scale_parameter", Init::Const(ls))?,
            drop_path: DropPath::new(dp, rng),
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = ops::depthwise_conv2d(x, &self.dw_weight, Some(&self.dw_bias))?;
        let y = self.norm.forward(&y.permute((0, 2, 3, 1))?)?;
        let y = self.pw2.forward(&self.pw1.forward(&y)?.gelu_erf()?)?;
        let y = y.broadcast_mul(&self.gamma)?.permute((0, 3, 1, 2))?;
        Ok((x + self.drop_path.forward(&y, train)?)?)
    }
}

struct Stage {
    downsample: Option<(LayerNorm2d, Conv2d)>,
    layers: Vec<Layer>,
    out_norm: LayerNorm2d,
}

pub struct ConvNext {
    stem: Conv2d,
    stem_norm: LayerNorm2d,
    stages: Vec<Stage>,
    widths: [usize; 4],
}

impl ConvNext {
    pub fn new(pb: &ParamBuilder, cfg: &ConvNextConfig, rng: NoiseRng) -> Result<Self> {
        let emb = pb.pp("embeddings");
        let stem = Conv2d::with_init(
            &emb.pp("patch_embeddings"),
            3,
            cfg.widths[0],
            4,
            ConvOpts::new(4, 0, true),
            INIT,
        )?;
        let stem_norm = LayerNorm2d::new(&emb.pp("layernorm"), cfg.widths[0], LN_EPS)?;
        let dpr = drop_path_schedule(cfg.drop_path, cfg.depths.iter().sum());
        let mut k = 0;
        let mut stages = Vec::new();
        for s in 0..4 {
            let sp = pb.pp("encoder").pp("stages").pp(s);
            let dim = cfg.widths[s];
            let downsample = if s > 0 {
                let dp = sp.pp("downsampling_layer");
                let prev = cfg.widths[s - 1];
                Some((
                    LayerNorm2d::new(&dp.pp(0), prev, LN_EPS)?,
                    Conv2d::with_init(&dp.pp(1), prev, dim, 2, ConvOpts::new(2, 0, true), INIT)?,
                ))
            } else {
                None
            };
            let layers = (0..cfg.depths[s])
                .map(|l| Layer::new(&sp.pp("layers").pp(l), dim, dpr[k + l], cfg.layer_scale_init, rng.clone()))
                .collect::<Result<Vec<_>>>()?;
            k += cfg.depths[s];
            let out_norm = LayerNorm2d::new(&pb.pp("hidden_states_norms").pp(format!("stage{}", s + 1)), dim, LN_EPS)?;
            stages.push(Stage {
                downsample,
                layers,
                out_norm,
            });
        }
        Ok(Self {
            stem,
            stem_norm,
            stages,
            widths: cfg.widths,
        })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn probe(&self) -> &Tensor {
        self.stem.weight()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut t = self.stem_norm.forward(&self.stem.forward(x)?)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some((norm, conv)) = &stage.downsample {
                t = conv.forward(&norm.forward(&t)?)?;
            }
            for l in &stage.layers {
                t = l.forward(&t, train)?;
            }
            outs.push(stage.out_norm.forward(&t)?);
        }
        Ok(outs)
    }
}
