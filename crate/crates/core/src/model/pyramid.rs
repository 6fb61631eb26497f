use candle_core::Tensor;

use crate::error::{Error, Result};

/// Strides of the four pyramid levels relative to the input.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Four batched feature maps `(B, C_i, H / s_i, W / s_i)` at strides 4..32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Builds a pyramid for an input of spatial size `input_hw`, checking
    /// level count, batch agreement and per-level resolution.
    pub fn new(levels: Vec<Tensor>, input_hw: (usize, usize)) -> Result<Self> {
        if levels.len() != PYRAMID_STRIDES.len() {
            return Err(Error::Shape(format!("pyramid needs 4 levels, got {}", levels.len())));
        }
        let batch = levels[0].dim(0)?;
        for (t, s) in levels.iter().zip(PYRAMID_STRIDES) {
            let (b, _, h, w) = t.dims4()?;
            if b != batch || h != input_hw.0 / s || w != input_hw.1 / s {
                return Err(Error::Shape(format!(
                    "level at stride {s} has shape {:?}, expected ({batch}, _, {}, {}) for input {:?}",
                    t.dims(),
                    input_hw.0 / s,
                    input_hw.1 / s,
                    input_hw
                )));
            }
        }
        Ok(Self { levels })
    }

    /// Wraps levels whose shapes were produced by another pyramid's
    /// elementwise transform.
    pub(crate) fn from_levels_unchecked(levels: Vec<Tensor>) -> Self {
        Self { levels }
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn strides(&self) -> [usize; 4] {
        PYRAMID_STRIDES
    }

    /// Channel widths per level.
    pub fn widths(&self) -> Vec<usize> {
        self.levels.iter().map(|t| t.dims()[1]).collect()
    }

    /// Input spatial size implied by the stride-4 level.
    pub fn input_hw(&self) -> (usize, usize) {
        let d = self.levels[0].dims();
        (d[2] * 4, d[3] * 4)
    }

    pub fn map(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(Self {
            levels: self.levels.iter().map(f).collect::<Result<_>>()?,
        })
    }
}
