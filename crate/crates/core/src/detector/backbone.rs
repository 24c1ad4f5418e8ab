//! Strided convolutional stem shared by the target and query branches.
//!
//! Each stage is a 4×4 convolution with stride 2 and padding 1 followed by
//! ReLU, so every stage maps an extent `n` to `floor(n/2)` and four stages give
//! the total stride of 16.

use rand::Rng;

use crate::cat::SpatialFeature;
use crate::error::{CatError, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const BACKBONE_STRIDE: usize = 16;
pub const MIN_INPUT_EXTENT: usize = 32;
const KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub in_channels: usize,
    pub out_channels: usize,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stages: Vec<ConvStage>,
}

impl Backbone {
    /// `channels` lists the output width of each of the four stages.
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, channels: &[usize; 4], rng: &mut R) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for (i, &c_out) in channels.iter().enumerate() {
            if c_out == 0 {
                return Err(CatError::config("backbone channel counts must be positive"));
            }
            let fan_in = c_in * KERNEL * KERNEL;
            let w = store.register(
                format!("{prefix}.conv{i}.w"),
                Tensor::uniform_fan_in(&[c_out, c_in, KERNEL, KERNEL], fan_in, rng),
            )?;
            let b = store.register(
                format!("{prefix}.conv{i}.b"),
                Tensor::uniform_fan_in(&[c_out], fan_in, rng),
            )?;
            stages.push(ConvStage {
                in_channels: c_in,
                out_channels: c_out,
                w,
                b,
            });
            c_in = c_out;
        }
        Ok(Backbone { stages })
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(3, |s| s.out_channels)
    }
}

/// Run the stem on a `3×H×W` image already on the graph.
pub fn backbone_forward(g: &mut Graph, image: Var, backbone: &Backbone) -> Result<SpatialFeature> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(CatError::Input(format!("backbone expects a 3×H×W image, got {s:?}")));
    }
    if s[1] < MIN_INPUT_EXTENT || s[2] < MIN_INPUT_EXTENT {
        return Err(CatError::Input(format!(
            "image {}×{} is smaller than the {MIN_INPUT_EXTENT}×{MIN_INPUT_EXTENT} minimum",
            s[1], s[2]
        )));
    }
    let mut x = image;
    for stage in &backbone.stages {
        let (w, b) = (g.param(stage.w), g.param(stage.b));
        let y = g.conv2d(x, w, Some(b), 2, 1)?;
        x = g.relu(y);
    }
    SpatialFeature::from_var(g, x, BACKBONE_STRIDE)
}
