//! The cross-attention transformer stack.
//!
//! Target and query feature maps are compressed to `d_model` channels,
//! flattened to sequences and passed through `N` two-stream layers. In the
//! target stream the target sequence attends to the query sequence; the query
//! stream mirrors it. Each stream is
//!
//! ```text
//! X̃ = Norm(X + P + MultiHead(X + P, Xo + Po, Xo))
//! Y = Norm(X̃ + FFN(X̃))
//! ```
//!
//! where `Xo`/`Po` are the other stream's sequence and position encoding.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{ffn, multi_head_attention, FfnParams, MultiHeadParams};
use crate::encoding::EncodingCache;
use crate::error::{CatError, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A `channels × height × width` feature map recorded on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialFeature {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Input pixels per feature cell.
    pub stride: usize,
}

impl SpatialFeature {
    pub fn from_var(g: &Graph, var: Var, stride: usize) -> Result<Self> {
        let s = g.shape(var);
        if s.len() != 3 {
            return Err(CatError::contract(format!("feature map must be C×H×W, got {s:?}")));
        }
        Ok(SpatialFeature {
            var,
            channels: s[0],
            height: s[1],
            width: s[2],
            stride,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Query-to-target and target-to-query attention.
    #[default]
    TwoStream,
    /// Query-to-target attention only; the query sequence passes through.
    OneStream,
}

impl std::str::FromStr for StreamMode {
    type Err = CatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_stream" | "two" => Ok(StreamMode::TwoStream),
            "one_stream" | "one" => Ok(StreamMode::OneStream),
            other => Err(CatError::config(format!("unknown stream mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for StreamMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StreamMode::TwoStream => "two_stream",
            StreamMode::OneStream => "one_stream",
        })
    }
}

/// How the two streams of a layer see each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// Both streams read the layer's inputs.
    #[default]
    Parallel,
    /// The target stream updates first; the query stream attends to its output.
    Alternating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub mode: StreamMode,
    pub order: UpdateOrder,
    pub tie_streams: bool,
    pub projection_bias: bool,
}

impl Default for CatConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl CatConfig {
    /// `d_model = 256, M = 8, N = 4`, FFN width `4·d_model`.
    pub fn paper() -> Self {
        CatConfig {
            d_model: 256,
            heads: 8,
            layers: 4,
            d_ff: 1024,
            mode: StreamMode::TwoStream,
            order: UpdateOrder::Parallel,
            tie_streams: false,
            projection_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(CatError::config("CAT needs at least one layer"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CatError::config(format!(
                "d_model {} must be a multiple of the head count {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(CatError::config(
                "d_model must be divisible by 4 for position encodings",
            ));
        }
        if self.d_ff == 0 {
            return Err(CatError::config("d_ff must be positive"));
        }
        if self.tie_streams && self.mode == StreamMode::OneStream {
            return Err(CatError::config("tie_streams requires two-stream mode"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: store.register(format!("{prefix}.gamma"), Tensor::ones(&[d]))?,
            beta: store.register(format!("{prefix}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamParams {
    pub attn: MultiHeadParams,
    pub ffn: FfnParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

impl StreamParams {
    fn register<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &CatConfig, rng: &mut R) -> Result<Self> {
        Ok(StreamParams {
            attn: MultiHeadParams::register(
                store,
                &format!("{prefix}.attn"),
                cfg.d_model,
                cfg.heads,
                cfg.projection_bias,
                rng,
            )?,
            ffn: FfnParams::register(store, &format!("{prefix}.ffn"), cfg.d_model, cfg.d_ff, rng)?,
            norm1: NormParams::register(store, &format!("{prefix}.norm1"), cfg.d_model)?,
            norm2: NormParams::register(store, &format!("{prefix}.norm2"), cfg.d_model)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatLayerParams {
    pub t_stream: StreamParams,
    /// `None` in one-stream mode. With tied streams this holds the same
    /// parameter handles as `t_stream`.
    pub q_stream: Option<StreamParams>,
    pub tied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatParams {
    pub config: CatConfig,
    pub layers: Vec<CatLayerParams>,
}

impl CatParams {
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &CatConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let t_stream = StreamParams::register(store, &format!("{prefix}.layer{l}.t"), cfg, rng)?;
            let q_stream = match (cfg.mode, cfg.tie_streams) {
                (StreamMode::OneStream, _) => None,
                (StreamMode::TwoStream, true) => Some(t_stream.clone()),
                (StreamMode::TwoStream, false) => Some(StreamParams::register(
                    store,
                    &format!("{prefix}.layer{l}.q"),
                    cfg,
                    rng,
                )?),
            };
            layers.push(CatLayerParams {
                t_stream,
                q_stream,
                tied: cfg.tie_streams,
            });
        }
        Ok(CatParams {
            config: cfg.clone(),
            layers,
        })
    }
}

/// 3×3 (padding 1) then 1×1 convolution from `in_channels` to `d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressParams {
    pub in_channels: usize,
    pub d_model: usize,
    pub conv3_w: ParamId,
    pub conv3_b: ParamId,
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
}

impl CompressParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan3 = in_channels * 9;
        Ok(CompressParams {
            in_channels,
            d_model,
            conv3_w: store.register(
                format!("{prefix}.conv3.w"),
                Tensor::uniform_fan_in(&[d_model, in_channels, 3, 3], fan3, rng),
            )?,
            conv3_b: store.register(
                format!("{prefix}.conv3.b"),
                Tensor::uniform_fan_in(&[d_model], fan3, rng),
            )?,
            conv1_w: store.register(
                format!("{prefix}.conv1.w"),
                Tensor::uniform_fan_in(&[d_model, d_model, 1, 1], d_model, rng),
            )?,
            conv1_b: store.register(
                format!("{prefix}.conv1.b"),
                Tensor::uniform_fan_in(&[d_model], d_model, rng),
            )?,
        })
    }
}

pub fn compress_channels(g: &mut Graph, feat: &SpatialFeature, params: &CompressParams) -> Result<SpatialFeature> {
    if feat.channels != params.in_channels {
        return Err(CatError::dim(
            "compress_channels",
            &[feat.channels, feat.height, feat.width],
            &[params.in_channels],
        ));
    }
    let (w3, b3) = (g.param(params.conv3_w), g.param(params.conv3_b));
    let h = g.conv2d(feat.var, w3, Some(b3), 1, 1)?;
    let (w1, b1) = (g.param(params.conv1_w), g.param(params.conv1_b));
    let out = g.conv2d(h, w1, Some(b1), 1, 0)?;
    SpatialFeature::from_var(g, out, feat.stride)
}

/// `C×H×W → (H·W)×C`, row-major over the grid.
pub fn flatten_spatial(g: &mut Graph, feat: &SpatialFeature) -> Result<Var> {
    let m = g.reshape(feat.var, &[feat.channels, feat.cells()])?;
    g.transpose(m)
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial(
    g: &mut Graph,
    seq: Var,
    height: usize,
    width: usize,
    stride: usize,
) -> Result<SpatialFeature> {
    let s = g.shape(seq).to_vec();
    if s.len() != 2 || s[0] != height * width {
        return Err(CatError::contract(format!(
            "cannot reshape sequence {s:?} to a {height}×{width} grid"
        )));
    }
    let t = g.transpose(seq)?;
    let var = g.reshape(t, &[s[1], height, width])?;
    SpatialFeature::from_var(g, var, stride)
}

/// One stream: `x` attends to `other`.
pub fn stream_forward(
    g: &mut Graph,
    x: Var,
    pos_x: Var,
    other: Var,
    pos_other: Var,
    params: &StreamParams,
) -> Result<Var> {
    let xq = g.add(x, pos_x)?;
    let ok = g.add(other, pos_other)?;
    let attn = multi_head_attention(g, xq, ok, other, &params.attn)?;
    let res = g.add(xq, attn)?;
    let x_tilde = params.norm1.apply(g, res)?;
    let f = ffn(g, x_tilde, &params.ffn)?;
    let res2 = g.add(x_tilde, f)?;
    params.norm2.apply(g, res2)
}

/// One two-stream layer; returns `(Y_t, Y_q)`.
pub fn cat_layer_forward(
    g: &mut Graph,
    x_t: Var,
    x_q: Var,
    p_t: Var,
    p_q: Var,
    layer: &CatLayerParams,
    order: UpdateOrder,
) -> Result<(Var, Var)> {
    let (dt, dq) = (g.shape(x_t).to_vec(), g.shape(x_q).to_vec());
    let d = layer.t_stream.attn.d_model;
    if dt.len() != 2 || dq.len() != 2 || dt[1] != d || dq[1] != d {
        return Err(CatError::dim("cat_layer_forward", &dt, &dq));
    }
    let y_t = stream_forward(g, x_t, p_t, x_q, p_q, &layer.t_stream)?;
    let y_q = match &layer.q_stream {
        None => x_q,
        Some(q_params) => {
            let kv = match order {
                UpdateOrder::Parallel => x_t,
                UpdateOrder::Alternating => y_t,
            };
            stream_forward(g, x_q, p_q, kv, p_t, q_params)?
        }
    };
    Ok((y_t, y_q))
}

#[derive(Clone, Debug)]
pub struct CatOutput {
    pub f_t: SpatialFeature,
    pub f_q: SpatialFeature,
    /// Target feature maps: the stack input followed by each layer's output.
    pub target_trace: Vec<SpatialFeature>,
}

/// Run the full stack on compressed feature maps and reshape back to grids.
pub fn cat_forward(
    g: &mut Graph,
    phi_t: &SpatialFeature,
    phi_q: &SpatialFeature,
    params: &CatParams,
    encodings: &EncodingCache,
) -> Result<CatOutput> {
    let d = params.config.d_model;
    if phi_t.channels != d || phi_q.channels != d {
        return Err(CatError::dim("cat_forward", &[phi_t.channels], &[phi_q.channels, d]));
    }
    let pe_t = encodings.get(phi_t.height, phi_t.width, d)?;
    let pe_q = encodings.get(phi_q.height, phi_q.width, d)?;
    let p_t = g.constant(pe_t.values.clone());
    let p_q = g.constant(pe_q.values.clone());
    let mut x_t = flatten_spatial(g, phi_t)?;
    let mut x_q = flatten_spatial(g, phi_q)?;
    let mut target_trace = vec![*phi_t];
    for layer in &params.layers {
        let (y_t, y_q) = cat_layer_forward(g, x_t, x_q, p_t, p_q, layer, params.config.order)?;
        x_t = y_t;
        x_q = y_q;
        target_trace.push(unflatten_spatial(g, x_t, phi_t.height, phi_t.width, phi_t.stride)?);
    }
    let f_t = *target_trace.last().unwrap();
    let f_q = if params.config.mode == StreamMode::OneStream {
        *phi_q
    } else {
        unflatten_spatial(g, x_q, phi_q.height, phi_q.width, phi_q.stride)?
    };
    Ok(CatOutput { f_t, f_q, target_trace })
}

/// Per-cell L2 norm across channels, min-max scaled to `[0, 1]`. A map whose
/// norms are all equal becomes all zeros.
pub fn response_map(feat: &Tensor) -> Result<Tensor> {
    if feat.rank() != 3 {
        return Err(CatError::contract("response_map expects a C×H×W tensor"));
    }
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let hw = h * w;
    let mut norms = vec![0.0; hw];
    for ch in 0..c {
        for (n, v) in norms.iter_mut().zip(&feat.data()[ch * hw..(ch + 1) * hw]) {
            *n += v * v;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    let lo = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span > 0.0 {
        norms.iter().map(|n| (n - lo) / span).collect()
    } else {
        vec![0.0; hw]
    };
    Tensor::new(vec![h, w], data)
}

/// Mean response over `inside` cells divided by the mean over the rest.
pub fn focus_ratio(map: &Tensor, inside: &[bool]) -> Result<f64> {
    if inside.len() != map.numel() {
        return Err(CatError::dim("focus_ratio", map.shape(), &[inside.len()]));
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in map.data().iter().zip(inside) {
        if m {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    if ni == 0 || no == 0 {
        return Err(CatError::contract(
            "focus ratio needs cells both inside and outside the boxes",
        ));
    }
    const EPS: f64 = 1e-9;
    Ok((si / ni as f64) / (so / no as f64 + EPS))
}

/// Binary greyscale PGM (P5), values scaled from `[0, 1]` to `0..=255`.
pub fn write_pgm<W: Write>(mut w: W, map: &Tensor) -> Result<()> {
    let (h, wd) = (map.shape()[0], map.shape()[1]);
    write!(w, "P5\n{wd} {h}\n255\n")?;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_map_csv<W: Write>(mut w: W, map: &Tensor) -> Result<()> {
    let wd = map.shape()[1];
    for row in map.data().chunks(wd) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}
