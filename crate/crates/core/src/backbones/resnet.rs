//! ResNet encoder (basic and bottleneck blocks), Hugging Face parameter names.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{ops, BatchNorm2d, Conv2d, ConvOpts, Init, ParamBuilder};

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    pub stem: usize,
    pub widths: [usize; 4],
    pub depths: [usize; 4],
    pub bottleneck: bool,
}

struct ConvLayer {
    conv: Conv2d,
    norm: BatchNorm2d,
    relu: bool,
}

impl ConvLayer {
    fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, k: usize, stride: usize, relu: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::with_init(
                &pb.pp("convolution"),
                c_in,
                c_out,
                k,
                ConvOpts::new(stride, k / 2, false),
                Init::kaiming_fan_out(c_out * k * k),
            )?,
            norm: BatchNorm2d::new(&pb.pp("normalization"), c_out)?,
            relu,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.norm.forward(&self.conv.forward(x)?, train)?;
        Ok(if self.relu { y.relu()? } else { y })
    }
}

struct ResBlock {
    shortcut: Option<ConvLayer>,
    layers: Vec<ConvLayer>,
}

impl ResBlock {
    fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, stride: usize, bottleneck: bool) -> Result<Self> {
        let shortcut = if c_in != c_out || stride != 1 {
            Some(ConvLayer::new(&pb.pp("shortcut"), c_in, c_out, 1, stride, false)?)
        } else {
            None
        };
        let lp = pb.pp("layer");
        let layers = if bottleneck {
            let mid = c_out / 4;
            vec![
                ConvLayer::new(&lp.pp(0), c_in, mid, 1, 1, true)?,
                ConvLayer::new(&lp.pp(1), mid, mid, 3, stride, true)?,
                ConvLayer::new(&lp.pp(2), mid, c_out, 1, 1, false)?,
            ]
        } else {
            vec![
                ConvLayer::new(&lp.pp(0), c_in, c_out, 3, stride, true)?,
                ConvLayer::new(&lp.pp(1), c_out, c_out, 3, 1, false)?,
            ]
        };
        Ok(Self { shortcut, layers })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let residual = match &self.shortcut {
            Some(s) => s.forward(x, train)?,
            None => x.clone(),
        };
        let mut y = x.clone();
        for l in &self.layers {
            y = l.forward(&y, train)?;
        }
        Ok((y + residual)?.relu()?)
    }
}

pub struct ResNet {
    stem: ConvLayer,
    stages: Vec<Vec<ResBlock>>,
    widths: [usize; 4],
}

impl ResNet {
    pub fn new(pb: &ParamBuilder, cfg: &ResNetConfig) -> Result<Self> {
        let stem = ConvLayer::new(&pb.pp("embedder").pp("embedder"), 3, cfg.stem, 7, 2, true)?;
        let mut stages = Vec::new();
        let mut c_in = cfg.stem;
        for s in 0..4 {
            let sp = pb.pp("encoder").pp("stages").pp(s);
            let blocks = (0..cfg.depths[s])
                .map(|l| {
                    let stride = if s > 0 && l == 0 { 2 } else { 1 };
                    let cin = if l == 0 { c_in } else { cfg.widths[s] };
                    ResBlock::new(&sp.pp("layers").pp(l), cin, cfg.widths[s], stride, cfg.bottleneck)
                })
                .collect::<Result<Vec<_>>>()?;
            c_in = cfg.widths[s];
            stages.push(blocks);
        }
        Ok(Self {
            stem,
            stages,
            widths: cfg.widths,
        })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn probe(&self) -> &Tensor {
        self.stem.conv.weight()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut t = ops::max_pool_3x3_s2(&self.stem.forward(x, train)?)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for blk in stage {
                t = blk.forward(&t, train)?;
            }
            outs.push(t.clone());
        }
        Ok(outs)
    }
}
