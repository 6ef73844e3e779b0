//! Tape of recorded operations. Nodes are appended in evaluation order, so a
//! reverse sweep over the tape is a valid topological order for backprop.

use super::conv::{conv3d_backward, conv3d_forward_raw, ConvGeom};
use super::{NnError, Real, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Gap(Var),
    MaskedGap {
        input: Var,
        indices: Vec<usize>,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Parameters of a shape-preserving residual block:
/// `relu(x + conv2(relu(conv1(x))))` with same-padded 3×3×3 convolutions.
#[derive(Clone, Copy, Debug)]
pub struct ResidualParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        op: Op<T>,
        name: &'static str,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(NnError::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad {
            op
        } else {
            // Nothing to differentiate: drop cached buffers.
            Op::Leaf
        };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 3D convolution with zero padding `pad` on every side.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            &self.value(input).shape,
            &self.value(weight).shape,
            &self.value(bias).shape,
            stride,
            pad,
        )?;
        let out = conv3d_forward_raw(
            &geom,
            &self.value(input).data,
            &self.value(weight).data,
            &self.value(bias).data,
        );
        let [d, h, w] = geom.out_dims;
        let value = Tensor::new(vec![geom.c_out, d, h, w], out)?;
        self.push(
            value,
            &[input, weight, bias],
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            "conv3d",
        )
    }

    pub fn conv3d_valid(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        self.conv3d(input, weight, bias, stride, 0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(NnError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                va.shape, vb.shape
            )));
        }
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape.clone(), data)?;
        self.push(value, &[a, b], Op::Add(a, b), "add")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data.iter().map(|&e| e.max(T::zero())).collect();
        let value = Tensor::new(v.shape.clone(), data)?;
        self.push(value, &[x], Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data.iter().map(|&e| stable_sigmoid(e)).collect();
        let value = Tensor::new(v.shape.clone(), data)?;
        self.push(value, &[x], Op::Sigmoid(x), "sigmoid")
    }

    /// Elementwise clamp to `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let v = self.value(x);
        let data = v.data.iter().map(|&e| e.max(lo).min(hi)).collect();
        let value = Tensor::new(v.shape.clone(), data)?;
        self.push(value, &[x], Op::Clamp { input: x, lo, hi }, "clamp")
    }

    /// Global average pooling `[C, D, H, W] -> [C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 4 {
            return Err(NnError::ShapeMismatch(format!(
                "gap expects [C, D, H, W], got {:?}",
                v.shape
            )));
        }
        let c = v.shape[0];
        let spatial = v.len() / c;
        let inv = T::one() / T::from_usize(spatial).expect("size");
        let data = v
            .data
            .chunks(spatial)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![c], data)?;
        self.push(value, &[x], Op::Gap(x), "gap")
    }

    /// Per-channel mean over the positions where `mask` is nonzero.
    pub fn masked_gap(&mut self, x: Var, mask: &[u8]) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 4 {
            return Err(NnError::ShapeMismatch(format!(
                "masked_gap expects [C, D, H, W], got {:?}",
                v.shape
            )));
        }
        let c = v.shape[0];
        let spatial = v.len() / c;
        if mask.len() != spatial {
            return Err(NnError::ShapeMismatch(format!(
                "mask has {} voxels, feature grid has {spatial}",
                mask.len()
            )));
        }
        let indices: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (m != 0).then_some(i))
            .collect();
        if indices.is_empty() {
            return Err(NnError::EmptyMask);
        }
        let inv = T::one() / T::from_usize(indices.len()).expect("size");
        let data = v
            .data
            .chunks(spatial)
            .map(|ch| indices.iter().map(|&i| ch[i]).sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![c], data)?;
        self.push(
            value,
            &[x],
            Op::MaskedGap { input: x, indices },
            "masked_gap",
        )
    }

    /// Affine map `[C] -> [O]` with weight `[O, C]` and bias `[O]`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(weight), self.value(bias));
        if vx.shape.len() != 1
            || vw.shape.len() != 2
            || vw.shape[1] != vx.shape[0]
            || vb.shape != [vw.shape[0]]
        {
            return Err(NnError::ShapeMismatch(format!(
                "fully_connected: input {:?}, weight {:?}, bias {:?}",
                vx.shape, vw.shape, vb.shape
            )));
        }
        let c = vx.shape[0];
        let data = vw
            .data
            .chunks(c)
            .zip(&vb.data)
            .map(|(row, &b)| row.iter().zip(&vx.data).map(|(&w, &xv)| w * xv).sum::<T>() + b)
            .collect();
        let value = Tensor::new(vec![vw.shape[0]], data)?;
        self.push(
            value,
            &[x, weight, bias],
            Op::FullyConnected {
                input: x,
                weight,
                bias,
            },
            "fully_connected",
        )
    }

    pub fn residual_block(&mut self, x: Var, p: &ResidualParams) -> Result<Var> {
        let k = self.value(p.w1).shape.get(2).copied().unwrap_or(1);
        let pad = k / 2;
        let h = self.conv3d(x, p.w1, p.b1, 1, pad)?;
        let h = self.relu(h)?;
        let f = self.conv3d(h, p.w2, p.b2, 1, pad)?;
        let (cx, cf) = (self.value(x).shape[0], self.value(f).shape[0]);
        if cx != cf {
            return Err(NnError::ChannelMismatch {
                input: cx,
                branch: cf,
            });
        }
        if self.value(x).shape != self.value(f).shape {
            return Err(NnError::ShapeMismatch(format!(
                "residual branch changed shape {:?} -> {:?}",
                self.value(x).shape,
                self.value(f).shape
            )));
        }
        let s = self.add(x, f)?;
        self.relu(s)
    }

    /// Reverse sweep. Each seed is `(node, dL/dnode)`; seeds for the same
    /// node accumulate. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<()> {
        for node in &mut self.nodes {
            node.grad = None;
        }
        for (v, g) in seeds {
            if g.shape != self.nodes[v.0].value.shape {
                return Err(NnError::ShapeMismatch(format!(
                    "seed gradient {:?} for node of shape {:?}",
                    g.shape, self.nodes[v.0].value.shape
                )));
            }
            accumulate(&mut self.nodes[v.0].grad, &g.data, &g.shape);
        }
        let top = seeds.iter().map(|(v, _)| v.0 + 1).max().unwrap_or(0);
        for i in (0..top).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, grad: &Tensor<T>) {
        // Split so we can read node i while writing to its parents (all < i).
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let g = &grad.data;
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need_input = before[input.0].requires_grad;
                let grads = conv3d_backward(
                    geom,
                    &before[input.0].value.data,
                    &before[weight.0].value.data,
                    g,
                    need_input,
                );
                if let Some(dx) = grads.input {
                    let shape = before[input.0].value.shape.clone();
                    accumulate(&mut before[input.0].grad, &dx, &shape);
                }
                if before[weight.0].requires_grad {
                    let shape = before[weight.0].value.shape.clone();
                    accumulate(&mut before[weight.0].grad, &grads.weight, &shape);
                }
                if before[bias.0].requires_grad {
                    let shape = before[bias.0].value.shape.clone();
                    accumulate(&mut before[bias.0].grad, &grads.bias, &shape);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if before[v.0].requires_grad {
                        accumulate(&mut before[v.0].grad, g, &grad.shape);
                    }
                }
            }
            Op::Relu(x) => {
                let out = &node.value.data;
                let dx: Vec<T> = g
                    .iter()
                    .zip(out)
                    .map(|(&gi, &o)| if o > T::zero() { gi } else { T::zero() })
                    .collect();
                accumulate(&mut before[x.0].grad, &dx, &grad.shape);
            }
            Op::Sigmoid(x) => {
                let out = &node.value.data;
                let dx: Vec<T> = g
                    .iter()
                    .zip(out)
                    .map(|(&gi, &s)| gi * s * (T::one() - s))
                    .collect();
                accumulate(&mut before[x.0].grad, &dx, &grad.shape);
            }
            Op::Clamp { input, lo, hi } => {
                let src = &before[input.0].value.data;
                let dx: Vec<T> = g
                    .iter()
                    .zip(src)
                    .map(|(&gi, &v)| if v < *lo || v > *hi { T::zero() } else { gi })
                    .collect();
                accumulate(&mut before[input.0].grad, &dx, &grad.shape);
            }
            Op::Gap(x) => {
                let shape = before[x.0].value.shape.clone();
                let c = shape[0];
                let spatial = before[x.0].value.len() / c;
                let inv = T::one() / T::from_usize(spatial).expect("size");
                let mut dx = Vec::with_capacity(c * spatial);
                for &gc in g {
                    dx.extend(std::iter::repeat_n(gc * inv, spatial));
                }
                accumulate(&mut before[x.0].grad, &dx, &shape);
            }
            Op::MaskedGap { input, indices } => {
                let shape = before[input.0].value.shape.clone();
                let c = shape[0];
                let spatial = before[input.0].value.len() / c;
                let inv = T::one() / T::from_usize(indices.len()).expect("size");
                let mut dx = vec![T::zero(); c * spatial];
                for (ch, &gc) in g.iter().enumerate() {
                    for &idx in indices {
                        dx[ch * spatial + idx] = gc * inv;
                    }
                }
                accumulate(&mut before[input.0].grad, &dx, &shape);
            }
            Op::FullyConnected {
                input,
                weight,
                bias,
            } => {
                let c = before[input.0].value.shape[0];
                if before[input.0].requires_grad {
                    let w = &before[weight.0].value.data;
                    let mut dx = vec![T::zero(); c];
                    for (o, &go) in g.iter().enumerate() {
                        for j in 0..c {
                            dx[j] += go * w[o * c + j];
                        }
                    }
                    accumulate(&mut before[input.0].grad, &dx, &[c]);
                }
                if before[weight.0].requires_grad {
                    let x = &before[input.0].value.data;
                    let dw: Vec<T> = g
                        .iter()
                        .flat_map(|&go| x.iter().map(move |&xv| go * xv))
                        .collect();
                    let shape = before[weight.0].value.shape.clone();
                    accumulate(&mut before[weight.0].grad, &dw, &shape);
                }
                if before[bias.0].requires_grad {
                    accumulate(&mut before[bias.0].grad, g, &grad.shape);
                }
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, delta: &[T], shape: &[usize]) {
    match slot {
        Some(t) => {
            for (a, &d) in t.data.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: delta.to_vec(),
            })
        }
    }
}

pub(crate) fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
