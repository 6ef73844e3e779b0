//! Backbone and heads of the three proportion models, with checkpoint I/O.
//!
//! All heads share a valid-padded convolutional backbone. They differ only
//! in how the feature maps become a bag-level prediction:
//!
//! * `Proportion`: 1×1×1 conv to one channel, sigmoid, then the mean of that
//!   probability map over the region aligned to the feature grid.
//! * `Gap`: global average pooling, fully-connected layer, sigmoid.
//! * `Mgap`: as `Gap` but pooling only over the aligned region.
//!
//! Sigmoid outputs are clamped to `[CE_CLAMP, 1 − CE_CLAMP]`, keeping them
//! strictly inside (0, 1) in f32.

mod checkpoint;
mod net;

pub use checkpoint::{
    load_checkpoint, read_tensors, save_checkpoint, write_tensors, Checkpoint, TensorEntry,
};
pub use net::{ForwardPass, Model, Prediction};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nncore::{conv_output_len, NnError, ParamStore, Real, Tensor};
use crate::volumes::{Mask, Shape3, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("layer {layer} ({desc}): {reason}")]
    ShapeUnderflow {
        layer: usize,
        desc: String,
        reason: String,
    },
    #[error("region lost by alignment")]
    RegionLost,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint {
        path: std::path::PathBuf,
        reason: String,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Valid convolution followed by relu.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// Shape-preserving residual block with same-padded convolutions.
    Residual {
        channels: usize,
        #[serde(default = "three")]
        kernel: usize,
    },
}

fn three() -> usize {
    3
}

impl LayerSpec {
    fn describe(&self) -> String {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
            } => format!("conv {out_channels}, {kernel}/{stride}"),
            LayerSpec::Residual { channels, kernel } => format!("residual {channels}, {kernel}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        use LayerSpec::*;
        Self {
            in_channels: 1,
            layers: vec![
                Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                },
                Conv {
                    out_channels: 24,
                    kernel: 3,
                    stride: 2,
                },
                Residual {
                    channels: 24,
                    kernel: 3,
                },
                Conv {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                },
                Residual {
                    channels: 32,
                    kernel: 3,
                },
            ],
        }
    }
}

/// Output grid of the backbone on a given input shape.
///
/// Output voxel `o` along an axis is aligned with the input cell
/// `[offset + o·stride, offset + (o + 1)·stride)`, the `stride`-wide cell
/// centred on its valid receptive field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub input_shape: Shape3,
    pub output_shape: Shape3,
    pub channels: usize,
    pub stride: usize,
    /// Extent of the valid receptive field along each axis.
    pub receptive_field: usize,
    pub offset: usize,
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.layers.iter().fold(self.in_channels, |_, l| match *l {
            LayerSpec::Conv { out_channels, .. } => out_channels,
            LayerSpec::Residual { channels, .. } => channels,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        let mut c = self.in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return bad(format!("layer {i}: zero channel, kernel or stride"));
                    }
                    c = out_channels;
                }
                LayerSpec::Residual { channels, kernel } => {
                    if channels != c {
                        return bad(format!(
                            "layer {i}: residual block of {channels} channels on {c}-channel input"
                        ));
                    }
                    if kernel % 2 == 0 {
                        return bad(format!("layer {i}: residual kernel must be odd"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Output geometry on `input_shape`; errors name the first layer whose
    /// kernel no longer fits.
    pub fn geometry(&self, input_shape: Shape3) -> Result<Geometry> {
        self.validate()?;
        let mut shape = input_shape;
        let mut jump = 1usize;
        let mut rf = 1usize;
        for (i, l) in self.layers.iter().enumerate() {
            if let LayerSpec::Conv { kernel, stride, .. } = *l {
                for a in 0..3 {
                    shape[a] = conv_output_len(shape[a], kernel, stride, 0).ok_or_else(|| {
                        ModelError::ShapeUnderflow {
                            layer: i,
                            desc: l.describe(),
                            reason: format!(
                                "kernel {kernel} exceeds input extent {} on axis {a}",
                                shape[a]
                            ),
                        }
                    })?;
                }
                rf += (kernel - 1) * jump;
                jump *= stride;
            }
        }
        Ok(Geometry {
            input_shape,
            output_shape: shape,
            channels: self.out_channels(),
            stride: jump,
            receptive_field: rf,
            offset: rf.saturating_sub(jump) / 2,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Proportion,
    Gap,
    Mgap,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Proportion => "proportion",
            HeadKind::Gap => "gap",
            HeadKind::Mgap => "mgap",
        }
    }

    pub fn needs_region(self) -> bool {
        !matches!(self, HeadKind::Gap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    /// Omit the output sigmoid (score regression). Not valid for the
    /// proportion head.
    pub linear_output: bool,
    pub init_seed: u64,
    /// Network input is `(HU + input_shift) / input_scale`.
    pub input_shift: f32,
    pub input_scale: f32,
    /// Initial value of the output bias. The default puts a sigmoid output
    /// near the presence threshold, where the sharp interval loss has a
    /// nonzero gradient.
    pub head_bias_init: f64,
    /// Margin around the region's bounding box when cropping inputs.
    pub crop_margin: usize,
    /// Intensity written outside the region before the network sees it.
    pub fill_value: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            head: HeadKind::Proportion,
            linear_output: false,
            init_seed: 0,
            input_shift: 800.0,
            input_scale: 100.0,
            head_bias_init: -5.0,
            crop_margin: 2,
            fill_value: crate::volumes::DEFAULT_FILL_HU,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.linear_output && self.head == HeadKind::Proportion {
            return Err(ModelError::InvalidConfig(
                "the proportion head always ends in a sigmoid".into(),
            ));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite() && self.input_shift.is_finite())
        {
            return Err(ModelError::InvalidConfig(
                "input normalization must be finite with scale > 0".into(),
            ));
        }
        Ok(())
    }

    /// Parameter names and shapes in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c = self.backbone.in_channels;
        for (i, l) in self.backbone.layers.iter().enumerate() {
            match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push((
                        format!("l{i:02}.conv.weight"),
                        vec![out_channels, c, kernel, kernel, kernel],
                    ));
                    out.push((format!("l{i:02}.conv.bias"), vec![out_channels]));
                    c = out_channels;
                }
                LayerSpec::Residual { channels, kernel } => {
                    for j in 1..=2 {
                        out.push((
                            format!("l{i:02}.res.conv{j}.weight"),
                            vec![channels, channels, kernel, kernel, kernel],
                        ));
                        out.push((format!("l{i:02}.res.conv{j}.bias"), vec![channels]));
                    }
                }
            }
        }
        match self.head {
            HeadKind::Proportion => out.push(("head.weight".into(), vec![1, c, 1, 1, 1])),
            HeadKind::Gap | HeadKind::Mgap => out.push(("head.weight".into(), vec![1, c])),
        }
        out.push(("head.bias".into(), vec![1]));
        out
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases except
    /// the head bias. Deterministic in `init_seed`.
    pub fn init_params<T: Real>(&self) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".bias") {
                let b = if name == "head.bias" {
                    self.head_bias_init
                } else {
                    0.0
                };
                vec![T::from_f64_lossy(b); n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    .collect()
            };
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn preprocess_options(&self) -> crate::volumes::PreprocessOptions {
        crate::volumes::PreprocessOptions {
            fill_value: self.fill_value,
            margin: self.crop_margin,
        }
    }

    /// Normalized single-channel network input `[1, D, H, W]`.
    pub fn input_tensor<T: Real>(&self, volume: &Volume) -> Tensor<T> {
        let [d, h, w] = volume.shape;
        let data = volume
            .data
            .iter()
            .map(|&v| T::from_f64_lossy(((v + self.input_shift) / self.input_scale) as f64))
            .collect();
        Tensor {
            shape: vec![1, d, h, w],
            data,
        }
    }
}

/// Crops `region` by the geometry offset, averages it over `stride`³
/// cells, and keeps cells more than half covered.
pub fn align_region_to_grid(region: &Mask, geom: &Geometry) -> Result<Mask> {
    if region.shape != geom.input_shape {
        return Err(ModelError::Volume(VolumeError::ShapeMismatch(format!(
            "region {:?} vs model input {:?}",
            region.shape, geom.input_shape
        ))));
    }
    let s = geom.stride;
    let o = geom.offset;
    let out_shape = geom.output_shape;
    let mut out = Mask::empty(out_shape);
    let cell = |c: usize, a: usize| {
        let lo = (o + c * s).min(region.shape[a]);
        lo..(o + (c + 1) * s).min(region.shape[a])
    };
    let full = (s * s * s) as f64;
    for z in 0..out_shape[0] {
        for y in 0..out_shape[1] {
            for x in 0..out_shape[2] {
                let mut n = 0usize;
                for zz in cell(z, 0) {
                    for yy in cell(y, 1) {
                        for xx in cell(x, 2) {
                            n += region.get(zz, yy, xx) as usize;
                        }
                    }
                }
                if n as f64 / full > 0.5 {
                    out.set(z, y, x, true);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(ModelError::RegionLost);
    }
    Ok(out)
}

/// Nearest-cell upsampling of a feature-grid map back to the input grid.
/// Input voxels outside every aligned cell get 0.
pub fn upsample_to_input(map: &[f32], geom: &Geometry) -> Vec<f32> {
    let [d, h, w] = geom.input_shape;
    let out_shape = geom.output_shape;
    let cell = |v: usize, a: usize| -> Option<usize> {
        let c = v.checked_sub(geom.offset)? / geom.stride;
        (c < out_shape[a]).then_some(c)
    };
    let mut out = vec![0.0; d * h * w];
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if let (Some(cz), Some(cy), Some(cx)) = (cell(z, 0), cell(y, 1), cell(x, 2)) {
                    out[i] = map[(cz * out_shape[1] + cy) * out_shape[2] + cx];
                }
                i += 1;
            }
        }
    }
    out
}
