//! Feature fusion pyramid: triangular grid of attention cells that mixes
//! encoder levels top-down before decoding.
//!
//! Each level is first gated by channel attention (`X^{i,0}`); every further
//! column applies a cross-layer attention cell that folds the next-deeper
//! entry of the previous column into the current one:
//! `X^{i,j+1} = CLA(X^{i,j}, X^{i+1,j})`. With four levels this yields exactly
//! six cells, and the fused output set is the diagonal
//! `{X^{0,3}, X^{1,2}, X^{2,1}, X^{3,0}}`, which preserves the pyramid's
//! channel/stride contract.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2dConfig, Linear};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder};

/// Bottleneck reduction for channel attention: small widths use a gentler
/// reduction so the bottleneck stays expressive.
pub fn reduction_for(channels: usize) -> usize {
    if channels >= 64 {
        16
    } else {
        4
    }
}

/// Squeeze-excite style gate: global average pool, bottleneck MLP, sigmoid,
/// then per-channel rescaling of the input.
#[derive(Debug)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let reduction = reduction_for(channels);
        if channels < reduction {
            return Err(Error::Config(format!(
                "channel attention needs at least {reduction} channels, got {channels}"
            )));
        }
        let bottleneck = channels / reduction;
        Ok(Self {
            fc1: pb.linear("fc1", channels, bottleneck)?,
            fc2: pb.linear("fc2", bottleneck, channels)?,
            channels,
        })
    }

    /// Sigmoid gates in `(0, 1)`, shape `(B, C)`.
    pub fn gates(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "channel attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let pooled = x.mean(3)?.mean(2)?; // (B, C)
        let h = self.fc1.forward(&pooled)?.elu(1.0)?;
        Ok(candle_nn::ops::sigmoid(&self.fc2.forward(&h)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let g = self.gates(x)?.reshape((b, c, 1, 1))?;
        Ok(x.broadcast_mul(&g)?)
    }
}

/// Fuses a level with the next-deeper one: the deeper map is projected to the
/// shallower channel count (3x3 conv + ELU), nearest-upsampled 2x, stacked
/// with the shallower map, gated by channel attention over the stack, and
/// projected back to the shallower width with a 1x1 conv.
#[derive(Debug)]
pub struct CrossLayerAttention {
    kappa: Conv2d,
    ca: ChannelAttention,
    proj: Conv2d,
    channels: usize,
}

impl CrossLayerAttention {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            kappa: pb.conv2d(
                "kappa",
                channels * 2,
                channels,
                3,
                Conv2dConfig {
                    padding: 1,
                    ..Default::default()
                },
            )?,
            ca: ChannelAttention::new(&pb.pp("ca"), channels * 2)?,
            proj: pb.conv2d("proj", channels * 2, channels, 1, Conv2dConfig::default())?,
            channels,
        })
    }

    pub fn forward(&self, lower: &Tensor, higher: &Tensor) -> Result<Tensor> {
        let (lb, lc, lh, lw) = lower.dims4()?;
        let (hb, hc, hh, hw) = higher.dims4()?;
        if lc != self.channels {
            return Err(Error::Shape(format!(
                "cross-layer cell built for {} channels, lower input has {lc}",
                self.channels
            )));
        }
        if hb != lb || hc != 2 * lc || hh * 2 != lh || hw * 2 != lw {
            return Err(Error::Contract(format!(
                "cross-layer inputs must differ by one pyramid level: lower \
                 ({lb},{lc},{lh},{lw}) vs higher ({hb},{hc},{hh},{hw})"
            )));
        }
        let up = self
            .kappa
            .forward(higher)?
            .elu(1.0)?
            .upsample_nearest2d(lh, lw)?;
        let stacked = Tensor::cat(&[lower, &up], 1)?;
        Ok(self.proj.forward(&self.ca.forward(&stacked)?)?)
    }
}

/// The full triangular fusion grid over a four-level pyramid.
#[derive(Debug)]
pub struct FeatureFusionPyramid {
    init: Vec<ChannelAttention>,
    /// `cells[i]` holds the cells for level `i`, one per column it advances
    /// through; level `i` owns `3 - i` cells.
    cells: Vec<Vec<CrossLayerAttention>>,
    base_channels: usize,
}

impl FeatureFusionPyramid {
    pub fn new(pb: &ParamBuilder, base_channels: usize) -> Result<Self> {
        let pb = pb.pp("ffp");
        let mut init = Vec::with_capacity(4);
        for i in 0..4 {
            init.push(ChannelAttention::new(
                &pb.pp(&format!("init{i}")),
                base_channels << i,
            )?);
        }
        let mut cells = Vec::with_capacity(3);
        for i in 0..3 {
            let mut row = Vec::with_capacity(3 - i);
            for j in 0..(3 - i) {
                row.push(CrossLayerAttention::new(
                    &pb.pp(&format!("cell{i}_{j}")),
                    base_channels << i,
                )?);
            }
            cells.push(row);
        }
        Ok(Self {
            init,
            cells,
            base_channels,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    /// Runs the grid; the result obeys the same shape contract as the input.
    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        if pyramid.base_channels() != self.base_channels {
            return Err(Error::Contract(format!(
                "fusion grid built for base width {}, pyramid has {}",
                self.base_channels,
                pyramid.base_channels()
            )));
        }
        let mut column: Vec<Tensor> = Vec::with_capacity(4);
        for i in 0..4 {
            column.push(self.init[i].forward(pyramid.level(i))?);
        }
        let mut outputs = vec![None; 4];
        outputs[3] = Some(column[3].clone());
        for j in 0..3 {
            let mut next = Vec::with_capacity(3 - j);
            for (i, cell_row) in self.cells.iter().enumerate().take(3 - j) {
                next.push(cell_row[j].forward(&column[i], &column[i + 1])?);
            }
            outputs[2 - j] = Some(next[2 - j].clone());
            column = next;
        }
        let levels: Vec<Tensor> = outputs.into_iter().map(Option::unwrap).collect();
        let (_, _, h0, w0) = levels[0].dims4()?;
        FeaturePyramid::new(levels, self.base_channels, h0 * 4, w0 * 4)
    }
}
