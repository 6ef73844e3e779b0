use std::collections::BTreeMap;

use super::{align_region_to_grid, Geometry, HeadKind, LayerSpec, ModelConfig, ModelError, Result};
use crate::losses::CE_CLAMP;
use crate::nncore::{Graph, ParamStore, Real, ResidualParams, Tensor, Var};
use crate::volumes::{Mask, Volume};

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// A recorded forward pass, ready for [`Graph::backward`].
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    pub geometry: Geometry,
    /// Bag-level output, shape `[1]`.
    pub y_hat: Var,
    /// Probability map `[1, d, h, w]` (proportion head only).
    pub prob_map: Option<Var>,
    /// Region on the feature grid (heads that use it).
    pub aligned_region: Option<Mask>,
    /// Parameter leaves by name.
    pub params: BTreeMap<String, Var>,
}

impl<T: Real> ForwardPass<T> {
    pub fn y_hat_value(&self) -> f64 {
        self.graph.value(self.y_hat).data[0].to_f64_lossy()
    }

    /// Gradients of every parameter after a backward sweep; parameters the
    /// sweep did not reach get zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(v).shape.clone()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Inference output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y_hat: f64,
    /// Probability map on the feature grid, shape `[d, h, w]`.
    pub prob_map: Option<Vec<f32>>,
    pub geometry: Geometry,
    pub aligned_region: Option<Mask>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = config.init_params()?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            let p = params.get(&name)?;
            if p.shape != shape {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    p.shape
                )));
            }
        }
        if params.len() != config.param_shapes().len() {
            return Err(ModelError::InvalidConfig(
                "unexpected extra parameters".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Records the forward pass on `input` (`[C, D, H, W]`). `region` lives
    /// on the input grid and is required by the proportion and MGAP heads.
    pub fn forward(
        &self,
        input: Tensor<T>,
        region: Option<&Mask>,
        requires_grad: bool,
    ) -> Result<ForwardPass<T>> {
        if input.shape.len() != 4 || input.shape[0] != self.config.backbone.in_channels {
            return Err(ModelError::InvalidConfig(format!(
                "input shape {:?} does not match {} input channels",
                input.shape, self.config.backbone.in_channels
            )));
        }
        let in_shape = [input.shape[1], input.shape[2], input.shape[3]];
        let geometry = self.config.backbone.geometry(in_shape)?;
        let aligned_region = if self.config.head.needs_region() {
            let r = region
                .ok_or_else(|| ModelError::InvalidConfig("this head needs a region mask".into()))?;
            Some(align_region_to_grid(r, &geometry)?)
        } else {
            None
        };

        let mut g = Graph::new();
        let params: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), requires_grad)))
            .collect();
        let p = |name: String| params[&name];

        let mut x = g.leaf(input, false);
        for (i, layer) in self.config.backbone.layers.iter().enumerate() {
            x = match *layer {
                LayerSpec::Conv { stride, .. } => {
                    let c = g.conv3d_valid(
                        x,
                        p(format!("l{i:02}.conv.weight")),
                        p(format!("l{i:02}.conv.bias")),
                        stride,
                    )?;
                    g.relu(c)?
                }
                LayerSpec::Residual { .. } => {
                    let rp = ResidualParams {
                        w1: p(format!("l{i:02}.res.conv1.weight")),
                        b1: p(format!("l{i:02}.res.conv1.bias")),
                        w2: p(format!("l{i:02}.res.conv2.weight")),
                        b2: p(format!("l{i:02}.res.conv2.bias")),
                    };
                    g.residual_block(x, &rp)?
                }
            };
        }

        let (w, b) = (p("head.weight".into()), p("head.bias".into()));
        let (y_hat, prob_map) = match self.config.head {
            HeadKind::Proportion => {
                let logits = g.conv3d_valid(x, w, b, 1)?;
                let prob = g.sigmoid(logits)?;
                let mask = &aligned_region.as_ref().expect("aligned above").data;
                let mean = g.masked_gap(prob, mask)?;
                let lo = T::from_f64_lossy(CE_CLAMP);
                let y = g.clamp(mean, lo, T::one() - lo)?;
                (y, Some(prob))
            }
            HeadKind::Gap | HeadKind::Mgap => {
                let pooled = match &aligned_region {
                    Some(m) => g.masked_gap(x, &m.data)?,
                    None => g.gap(x)?,
                };
                let out = g.fully_connected(pooled, w, b)?;
                let y = if self.config.linear_output {
                    out
                } else {
                    // f32 sigmoid rounds to exactly 1 for logits above ~17.
                    let prob = g.sigmoid(out)?;
                    let lo = T::from_f64_lossy(CE_CLAMP);
                    g.clamp(prob, lo, T::one() - lo)?
                };
                (y, None)
            }
        };

        Ok(ForwardPass {
            graph: g,
            geometry,
            y_hat,
            prob_map,
            aligned_region,
            params,
        })
    }

    /// Inference on a preprocessed volume and its region (same grid).
    pub fn predict(&self, volume: &Volume, region: &Mask) -> Result<Prediction> {
        let input = self.config.input_tensor::<T>(volume);
        let fp = self.forward(input, Some(region), false)?;
        let prob_map = fp.prob_map.map(|v| {
            fp.graph
                .value(v)
                .data
                .iter()
                .map(|x| x.to_f64_lossy() as f32)
                .collect()
        });
        Ok(Prediction {
            y_hat: fp.graph.value(fp.y_hat).data[0].to_f64_lossy(),
            prob_map,
            geometry: fp.geometry,
            aligned_region: fp.aligned_region,
        })
    }
}
