//! UPerNet decoder: pyramid pooling on the coarsest level, top-down FPN
//! merging, fusion of all levels at stride 4 and a single-logit head.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, ConvModule, ConvOpts, Dropout, Init, NoiseRng, ParamBuilder};

pub const POOL_SCALES: [usize; 4] = [1, 2, 3, 6];

pub struct UperNet {
    in_widths: [usize; 4],
    ppm: Vec<ConvModule>,
    bottleneck: ConvModule,
    lateral: Vec<ConvModule>,
    fpn: Vec<ConvModule>,
    fpn_bottleneck: ConvModule,
    dropout: Dropout,
    conv_seg: Conv2d,
}

impl UperNet {
    pub fn new(pb: &ParamBuilder, in_widths: [usize; 4], channels: usize, rng: NoiseRng) -> Result<Self> {
        let top = in_widths[3];
        let ppm = (0..POOL_SCALES.len())
            .map(|i| ConvModule::new(&pb.pp("psp_modules").pp(i), top, channels, 1, true))
            .collect::<Result<Vec<_>>>()?;
        let bottleneck = ConvModule::new(&pb.pp("bottleneck"), top + POOL_SCALES.len() * channels, channels, 3, true)?;
        let lateral = (0..3)
            .map(|i| ConvModule::new(&pb.pp("lateral_convs").pp(i), in_widths[i], channels, 1, true))
            .collect::<Result<Vec<_>>>()?;
        let fpn = (0..3)
            .map(|i| ConvModule::new(&pb.pp("fpn_convs").pp(i), channels, channels, 3, true))
            .collect::<Result<Vec<_>>>()?;
        let fpn_bottleneck = ConvModule::new(&pb.pp("fpn_bottleneck"), 4 * channels, channels, 3, true)?;
        let conv_seg = Conv2d::with_init(
            &pb.pp("conv_seg"),
            channels,
            1,
            1,
            ConvOpts::new(1, 0, true),
            Init::Normal { std: 0.01 },
        )?;
        Ok(Self {
            in_widths,
            ppm,
            bottleneck,
            lateral,
            fpn,
            fpn_bottleneck,
            dropout: Dropout::new(0.1, rng),
            conv_seg,
        })
    }

    pub fn in_widths(&self) -> [usize; 4] {
        self.in_widths
    }

    fn psp(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut parts = vec![x.clone()];
        for (m, &s) in self.ppm.iter().zip(&POOL_SCALES) {
            let pooled = m.forward(&ops::adaptive_avg_pool2d(x, s)?, train)?;
            parts.push(ops::resize_bilinear(&pooled, h, w)?);
        }
        self.bottleneck.forward(&Tensor::cat(&parts, 1)?, train)
    }

    /// Logits `(B, 1, H/4, W/4)` from four level-aligned feature maps.
    pub fn forward(&self, levels: &[Tensor], train: bool) -> Result<Tensor> {
        let widths: Vec<usize> = levels.iter().map(|t| t.dims()[1]).collect();
        if widths != self.in_widths {
            return Err(Error::config(
                "decoder",
                format!("decoder expects widths {:?}, got {widths:?}", self.in_widths),
            ));
        }
        let mut lat: Vec<Tensor> = self
            .lateral
            .iter()
            .zip(levels)
            .map(|(m, x)| m.forward(x, train))
            .collect::<Result<_>>()?;
        lat.push(self.psp(&levels[3], train)?);
        for i in (1..4).rev() {
            let (_, _, h, w) = lat[i - 1].dims4()?;
            lat[i - 1] = (&lat[i - 1] + ops::resize_bilinear(&lat[i], h, w)?)?;
        }
        let (_, _, h, w) = lat[0].dims4()?;
        let mut outs = Vec::with_capacity(4);
        for (i, m) in self.fpn.iter().enumerate() {
            outs.push(m.forward(&lat[i], train)?);
        }
        outs.push(lat[3].clone());
        for o in outs.iter_mut().skip(1) {
            *o = ops::resize_bilinear(o, h, w)?;
        }
        let fused = self.fpn_bottleneck.forward(&Tensor::cat(&outs, 1)?, train)?;
        self.conv_seg.forward(&self.dropout.forward(&fused, train)?)
    }
}
