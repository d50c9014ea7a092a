//! Small convolutional feature extractor: a stack of 3×3 conv + bias + ReLU
//! stages mapping `[B, C, H, W]` to `[B, S, H/d, W/d]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stages: Vec<Stage>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stages: vec![
                Stage {
                    channels: 16,
                    stride: 2,
                },
                Stage {
                    channels: 32,
                    stride: 2,
                },
                Stage {
                    channels: 64,
                    stride: 1,
                },
            ],
        }
    }
}

impl BackboneConfig {
    /// Total downscale factor `d`.
    pub fn downscale(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    /// Output channel count `S`.
    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stages.is_empty() {
            return Err(Error::Config(
                "backbone needs input channels and at least one stage".into(),
            ));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(Error::Config(
                "backbone stage widths and strides must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial extents of the feature map for an `h`×`w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let d = self.downscale();
        if !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(dim_err!(
                "input {h}×{w} is not divisible by downscale factor {d}"
            ));
        }
        Ok((h / d, w / d))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    convs: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        cfg: BackboneConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.stages.len());
        let mut cin = cfg.in_channels;
        for (i, st) in cfg.stages.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w = store.add(
                format!("{prefix}.{i}.weight"),
                Tensor::randn(vec![st.channels, cin, 3, 3], std, rng),
            );
            let b = store.add(
                format!("{prefix}.{i}.bias"),
                Tensor::zeros(vec![st.channels]),
            );
            convs.push((w, b));
            cin = st.channels;
        }
        Ok(Backbone { cfg, convs })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `x` is `[B, C, H, W]`, or `[C, H, W]` for a single sample (the output
    /// then drops the batch axis too).
    pub fn extract(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let single = shape.len() == 3;
        let x = match shape.len() {
            3 => tape.reshape(x, &[1, shape[0], shape[1], shape[2]])?,
            4 => x,
            _ => {
                return Err(dim_err!(
                    "backbone input must be [B, C, H, W], got {shape:?}"
                ))
            }
        };
        let c = tape.shape(x)[1];
        if c != self.cfg.in_channels {
            return Err(dim_err!(
                "backbone expects {} channels, got {c}",
                self.cfg.in_channels
            ));
        }
        let (h, w) = (tape.shape(x)[2], tape.shape(x)[3]);
        self.cfg.output_hw(h, w)?;
        let mut y = x;
        for (st, &(wid, bid)) in self.cfg.stages.iter().zip(&self.convs) {
            let conv = tape.conv2d(y, bound.var(wid), st.stride, 1)?;
            let b = tape.reshape(bound.var(bid), &[st.channels, 1, 1])?;
            let z = tape.add(conv, b)?;
            y = tape.relu(z)?;
        }
        if single {
            let s = tape.shape(y)[1..].to_vec();
            y = tape.reshape(y, &s)?;
        }
        Ok(y)
    }
}
