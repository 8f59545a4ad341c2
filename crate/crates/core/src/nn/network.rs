use super::layers::{
    avg_pool_global, avg_pool_global_backward, relu, relu_backward, BatchNorm, BatchNormCache,
    ConvCache, FullyConnected, MaxPool, MaxPoolCache, StandardConv,
};
use super::loss::softmax_xent;
use super::regularizer::{orthogonality_penalty, RegularizerSpec};
use crate::error::{dim_err, Error, Result};
use crate::ops::{DecoupledCache, DecoupledConvLayer};
use crate::tensor::{Real, Tensor};
use crate::Mode;

/// One stage of a sequential network.
#[derive(Clone, Debug)]
pub enum LayerNode<T> {
    DecoupledConv(DecoupledConvLayer<T>),
    /// Decoupled operator over flattened features, `[B, F] → [B, K]`.
    DecoupledFc(DecoupledConvLayer<T>),
    StandardConv(StandardConv<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    MaxPool(MaxPool),
    AvgPoolGlobal,
    FullyConnected(FullyConnected<T>),
    Flatten,
}

impl<T> LayerNode<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerNode::DecoupledConv(_) => "decoupled-conv",
            LayerNode::DecoupledFc(_) => "decoupled-fc",
            LayerNode::StandardConv(_) => "conv",
            LayerNode::BatchNorm(_) => "batch-norm",
            LayerNode::Relu => "relu",
            LayerNode::MaxPool(_) => "max-pool",
            LayerNode::AvgPoolGlobal => "avg-pool",
            LayerNode::FullyConnected(_) => "fc",
            LayerNode::Flatten => "flatten",
        }
    }

    /// Convolution nodes, the ones the regularizer applies to.
    pub fn is_conv(&self) -> bool {
        matches!(
            self,
            LayerNode::DecoupledConv(_) | LayerNode::StandardConv(_)
        )
    }
}

/// What a trainable tensor is, as far as the optimizer cares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Kernel matrix of a decoupled layer.
    DecoupledKernel {
        weighted: bool,
    },
    /// Per-kernel operator radius.
    Radius,
    ConvKernel,
    FcWeight,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Debug)]
pub struct Param<'a, T> {
    /// `<layer index>.<field>`
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub value: &'a Tensor<T>,
}

#[derive(Debug)]
pub struct ParamMut<'a, T> {
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub value: &'a mut Tensor<T>,
}

/// Mutable access to one entry of the saved state.
#[derive(Debug)]
pub enum StateSlot<'a, T> {
    Tensor(&'a mut Tensor<T>),
    /// Scalar that may not exist yet (the patch-norm average).
    Scalar(&'a mut Option<T>),
}

#[derive(Clone, Debug)]
enum NodeCache<T> {
    Decoupled(DecoupledCache<T>),
    Conv(ConvCache<T>),
    BatchNorm(BatchNormCache<T>),
    Relu(Tensor<T>),
    MaxPool(MaxPoolCache),
    Shape(Vec<usize>),
    Input(Tensor<T>),
}

/// Per-layer state saved by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    nodes: Vec<NodeCache<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Decoupled-layer cache of node `index`, if it is one.
    pub fn decoupled(&self, index: usize) -> Option<&DecoupledCache<T>> {
        match self.nodes.get(index) {
            Some(NodeCache::Decoupled(c)) => Some(c),
            _ => None,
        }
    }
}

/// Gradients from [`Network::backward`], aligned with [`Network::params`].
#[derive(Clone, Debug)]
pub struct NetGrads<T> {
    pub params: Vec<Tensor<T>>,
    pub input: Option<Tensor<T>>,
}

/// Summary statistics of one weighted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub index: usize,
    pub kind: &'static str,
    pub mean_w_norm: f64,
    pub mean_rho: Option<f64>,
}

/// A sequential network trained with softmax cross-entropy.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub layers: Vec<LayerNode<T>>,
    pub regularizer: RegularizerSpec,
}

impl<T: Real> Network<T> {
    pub fn new(layers: Vec<LayerNode<T>>, regularizer: RegularizerSpec) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        regularizer.validate()?;
        Ok(Self {
            layers,
            regularizer,
        })
    }

    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let mut x = input.clone();
        let mut nodes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            let (y, cache) = forward_node(layer, x, mode).map_err(|e| e.at_layer(i, kind))?;
            nodes.push(cache);
            x = y;
        }
        Ok((x, ForwardCache { nodes }))
    }

    /// Evaluation-mode logits.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input, Mode::Eval)?.0)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_logits: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<NetGrads<T>> {
        if cache.nodes.len() != self.layers.len() {
            return Err(Error::Usage(
                "forward cache belongs to a different network".into(),
            ));
        }
        let mut per_layer: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        let mut g = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            let need = need_input_grad || i > 0;
            let layer = &self.layers[i];
            let (gx, grads) = backward_node(layer, &cache.nodes[i], &g, need)
                .map_err(|e| e.at_layer(i, layer.kind()))?;
            per_layer[i] = grads;
            match gx {
                Some(gx) => g = gx,
                None => break,
            }
        }
        Ok(NetGrads {
            params: per_layer.into_iter().flatten().collect(),
            input: if need_input_grad { Some(g) } else { None },
        })
    }

    /// Mean cross-entropy, logits and gradients (regularizer included).
    pub fn loss_and_grads(
        &mut self,
        input: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
        need_input_grad: bool,
    ) -> Result<(f64, Tensor<T>, NetGrads<T>)> {
        let (logits, cache) = self.forward(input, mode)?;
        let (loss, grad_logits) = softmax_xent(&logits, labels)?;
        let mut grads = self.backward(&cache, &grad_logits, need_input_grad)?;
        let penalty = self.regularize(&mut grads.params)?;
        Ok((loss + penalty, logits, grads))
    }

    /// Adds the regularizer gradient of every convolution kernel to `grads`
    /// and returns the penalty.
    pub fn regularize(&self, grads: &mut [Tensor<T>]) -> Result<f64> {
        if self.regularizer == RegularizerSpec::None {
            return Ok(0.0);
        }
        let params = self.params();
        if grads.len() != params.len() {
            return Err(dim_err!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            ));
        }
        let mut total = 0.0;
        for (p, g) in params.iter().zip(grads.iter_mut()) {
            let kernel = matches!(
                p.role,
                ParamRole::DecoupledKernel { .. } | ParamRole::ConvKernel
            );
            if kernel && self.layers[p.layer].is_conv() {
                let (value, grad_cols) =
                    orthogonality_penalty(self.regularizer, &p.value.transpose()?)?;
                total += value;
                g.axpy(T::one(), &grad_cols.transpose()?)?;
            }
        }
        Ok(total)
    }

    pub fn params(&self) -> Vec<Param<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut push = |field: &str, role, value| {
                out.push(Param {
                    name: format!("{i}.{field}"),
                    layer: i,
                    role,
                    value,
                })
            };
            match layer {
                LayerNode::DecoupledConv(l) | LayerNode::DecoupledFc(l) => {
                    push(
                        "weight",
                        ParamRole::DecoupledKernel {
                            weighted: l.spec.is_weighted(),
                        },
                        &l.weight,
                    );
                    if let (true, Some(rho)) = (l.spec.rho_learnable, &l.rho) {
                        push("rho", ParamRole::Radius, rho);
                    }
                }
                LayerNode::StandardConv(l) => {
                    push("weight", ParamRole::ConvKernel, &l.weight);
                    push("bias", ParamRole::Bias, &l.bias);
                }
                LayerNode::FullyConnected(l) => {
                    push("weight", ParamRole::FcWeight, &l.weight);
                    push("bias", ParamRole::Bias, &l.bias);
                }
                LayerNode::BatchNorm(l) => {
                    push("gamma", ParamRole::BnScale, &l.gamma);
                    push("beta", ParamRole::BnShift, &l.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let mut push = |field: &str, role, value| {
                out.push(ParamMut {
                    name: format!("{i}.{field}"),
                    layer: i,
                    role,
                    value,
                })
            };
            match layer {
                LayerNode::DecoupledConv(l) | LayerNode::DecoupledFc(l) => {
                    let weighted = l.spec.is_weighted();
                    let learnable = l.spec.rho_learnable;
                    push(
                        "weight",
                        ParamRole::DecoupledKernel { weighted },
                        &mut l.weight,
                    );
                    if let (true, Some(rho)) = (learnable, l.rho.as_mut()) {
                        push("rho", ParamRole::Radius, rho);
                    }
                }
                LayerNode::StandardConv(l) => {
                    push("weight", ParamRole::ConvKernel, &mut l.weight);
                    push("bias", ParamRole::Bias, &mut l.bias);
                }
                LayerNode::FullyConnected(l) => {
                    push("weight", ParamRole::FcWeight, &mut l.weight);
                    push("bias", ParamRole::Bias, &mut l.bias);
                }
                LayerNode::BatchNorm(l) => {
                    push("gamma", ParamRole::BnScale, &mut l.gamma);
                    push("beta", ParamRole::BnShift, &mut l.beta);
                }
                _ => {}
            }
        }
        out
    }

    /// Every persistent tensor, trainable or not, by name.
    pub fn state_slots(&mut self) -> Vec<(String, StateSlot<'_, T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let mut push = |field: &str, slot| out.push((format!("{i}.{field}"), slot));
            match layer {
                LayerNode::DecoupledConv(l) | LayerNode::DecoupledFc(l) => {
                    push("weight", StateSlot::Tensor(&mut l.weight));
                    if let Some(rho) = l.rho.as_mut() {
                        push("rho", StateSlot::Tensor(rho));
                    }
                    push("norm_ma", StateSlot::Scalar(&mut l.norm_ma));
                }
                LayerNode::StandardConv(l) => {
                    push("weight", StateSlot::Tensor(&mut l.weight));
                    push("bias", StateSlot::Tensor(&mut l.bias));
                }
                LayerNode::FullyConnected(l) => {
                    push("weight", StateSlot::Tensor(&mut l.weight));
                    push("bias", StateSlot::Tensor(&mut l.bias));
                }
                LayerNode::BatchNorm(l) => {
                    push("gamma", StateSlot::Tensor(&mut l.gamma));
                    push("beta", StateSlot::Tensor(&mut l.beta));
                    push("running_mean", StateSlot::Tensor(&mut l.running_mean));
                    push("running_var", StateSlot::Tensor(&mut l.running_var));
                }
                _ => {}
            }
        }
        out
    }

    /// Keeps every operator radius at or above the floor.
    pub fn clamp_radii(&mut self) {
        for layer in &mut self.layers {
            if let LayerNode::DecoupledConv(l) | LayerNode::DecoupledFc(l) = layer {
                l.clamp_rho();
            }
        }
    }

    pub fn layer_stats(&self) -> Vec<LayerStats> {
        let mean_row_norm = |w: &Tensor<T>| -> f64 {
            let (n, d) = w.dims2().unwrap_or((1, w.len()));
            w.data()
                .chunks_exact(d)
                .map(|r| r.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / n as f64
        };
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(index, layer)| {
                let (w, rho) = match layer {
                    LayerNode::DecoupledConv(l) | LayerNode::DecoupledFc(l) => {
                        (&l.weight, l.rho.as_ref())
                    }
                    LayerNode::StandardConv(l) => (&l.weight, None),
                    LayerNode::FullyConnected(l) => (&l.weight, None),
                    _ => return None,
                };
                Some(LayerStats {
                    index,
                    kind: layer.kind(),
                    mean_w_norm: mean_row_norm(w),
                    mean_rho: rho.map(|r| r.mean().as_f64()),
                })
            })
            .collect()
    }
}

fn forward_node<T: Real>(
    layer: &mut LayerNode<T>,
    x: Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, NodeCache<T>)> {
    Ok(match layer {
        LayerNode::DecoupledConv(l) => {
            let (y, c) = l.forward(&x, mode)?;
            (y, NodeCache::Decoupled(c))
        }
        LayerNode::DecoupledFc(l) => {
            let (b, f) = x.dims2()?;
            let (y, c) = l.forward(&x.reshape(&[b, f, 1, 1])?, mode)?;
            let k = l.num_kernels();
            (y.reshape(&[b, k])?, NodeCache::Decoupled(c))
        }
        LayerNode::StandardConv(l) => {
            let (y, c) = l.forward(&x)?;
            (y, NodeCache::Conv(c))
        }
        LayerNode::BatchNorm(l) => {
            let (y, c) = l.forward(&x, mode)?;
            (y, NodeCache::BatchNorm(c))
        }
        LayerNode::Relu => {
            let y = relu(&x);
            (y.clone(), NodeCache::Relu(y))
        }
        LayerNode::MaxPool(p) => {
            let (y, c) = p.forward(&x)?;
            (y, NodeCache::MaxPool(c))
        }
        LayerNode::AvgPoolGlobal => (avg_pool_global(&x)?, NodeCache::Shape(x.shape().to_vec())),
        LayerNode::FullyConnected(l) => (l.forward(&x)?, NodeCache::Input(x)),
        LayerNode::Flatten => {
            let shape = x.shape().to_vec();
            let b = shape[0];
            let rest = x.len() / b;
            (x.reshape(&[b, rest])?, NodeCache::Shape(shape))
        }
    })
}

/// Input gradient (when requested) and parameter gradients of one layer.
type NodeGrads<T> = (Option<Tensor<T>>, Vec<Tensor<T>>);

fn backward_node<T: Real>(
    layer: &LayerNode<T>,
    cache: &NodeCache<T>,
    g: &Tensor<T>,
    need_input_grad: bool,
) -> Result<NodeGrads<T>> {
    let mismatch = || Error::Usage("forward cache does not match the layer".into());
    Ok(match (layer, cache) {
        (LayerNode::DecoupledConv(l), NodeCache::Decoupled(c)) => {
            let grads = l.backward(c, g, need_input_grad)?;
            let mut params = vec![grads.weight];
            params.extend(grads.rho);
            (grads.input, params)
        }
        (LayerNode::DecoupledFc(l), NodeCache::Decoupled(c)) => {
            let (b, k) = g.dims2()?;
            let grads = l.backward(c, &g.clone().reshape(&[b, k, 1, 1])?, need_input_grad)?;
            let mut params = vec![grads.weight];
            params.extend(grads.rho);
            let input = match grads.input {
                Some(gx) => Some(gx.reshape(&[b, l.in_channels])?),
                None => None,
            };
            (input, params)
        }
        (LayerNode::StandardConv(l), NodeCache::Conv(c)) => {
            let (gx, gw, gb) = l.backward(c, g, need_input_grad)?;
            (gx, vec![gw, gb])
        }
        (LayerNode::BatchNorm(l), NodeCache::BatchNorm(c)) => {
            let (gx, gg, gb) = l.backward(c, g)?;
            (Some(gx), vec![gg, gb])
        }
        (LayerNode::Relu, NodeCache::Relu(y)) => (Some(relu_backward(y, g)?), Vec::new()),
        (LayerNode::MaxPool(p), NodeCache::MaxPool(c)) => (Some(p.backward(c, g)?), Vec::new()),
        (LayerNode::AvgPoolGlobal, NodeCache::Shape(s)) => {
            (Some(avg_pool_global_backward(s, g)?), Vec::new())
        }
        (LayerNode::FullyConnected(l), NodeCache::Input(x)) => {
            let (gx, gw, gb) = l.backward(x, g, need_input_grad)?;
            (gx, vec![gw, gb])
        }
        (LayerNode::Flatten, NodeCache::Shape(s)) => (Some(g.clone().reshape(s)?), Vec::new()),
        _ => return Err(mismatch()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::im2col::ConvGeometry;
    use crate::nn::{ArchPreset, ArchSpec, ConvOperator};
    use crate::ops::{AngularKind, MagnitudeKind, OperatorSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_fc_passes_input_through() {
        let fc = FullyConnected {
            weight: Tensor::<f64>::from_f64(
                &[3, 3],
                &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap(),
            bias: Tensor::zeros(&[3]).unwrap(),
        };
        let mut net =
            Network::new(vec![LayerNode::FullyConnected(fc)], RegularizerSpec::None).unwrap();
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn single_sphere_layer_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = OperatorSpec::preset(MagnitudeKind::Sphere, AngularKind::Cosine);
        let layer =
            DecoupledConvLayer::new(2, 4, ConvGeometry::square(3, 1).unwrap(), spec, &mut rng)
                .unwrap();
        let mut net =
            Network::new(vec![LayerNode::DecoupledConv(layer)], RegularizerSpec::None).unwrap();
        let data: Vec<f64> = (0..2 * 2 * 6 * 6)
            .map(|_| rng.random_range(-50.0..50.0))
            .collect();
        let x = Tensor::<f64>::from_f64(&[2, 2, 6, 6], &data).unwrap();
        assert!(net.predict(&x).unwrap().max_abs() <= 1.0);
    }

    #[test]
    fn mnist_cnn6_on_a_blank_image() {
        let op = ConvOperator::Decoupled(OperatorSpec::preset(
            MagnitudeKind::Tanh,
            AngularKind::Cosine,
        ));
        let mut net: Network<f32> = ArchSpec::preset(ArchPreset::MnistCnn6, op)
            .build(&mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let logits = net
            .predict(&Tensor::zeros(&[1, 1, 28, 28]).unwrap())
            .unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
        assert!(logits.is_finite());
    }

    #[test]
    fn shape_error_names_the_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net: Network<f64> = Network::new(
            vec![
                LayerNode::Flatten,
                LayerNode::FullyConnected(FullyConnected::new(5, 2, &mut rng).unwrap()),
            ],
            RegularizerSpec::None,
        )
        .unwrap();
        let err = net
            .predict(&Tensor::zeros(&[1, 1, 2, 2]).unwrap())
            .unwrap_err();
        assert!(matches!(err, Error::Layer { index: 1, .. }));
        assert!(matches!(err.root(), Error::Dimension(_)));
    }

    #[test]
    fn scaling_unweighted_kernels_keeps_predictions() {
        let op = ConvOperator::Decoupled(OperatorSpec::preset(
            MagnitudeKind::Sphere,
            AngularKind::Cosine,
        ));
        let mut spec = ArchSpec::preset(ArchPreset::MnistCnn6, op);
        spec.width_divisor = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net: Network<f64> = spec.build(&mut rng).unwrap();
        let data: Vec<f64> = (0..3 * 784).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::<f64>::from_f64(&[3, 1, 28, 28], &data).unwrap();
        let before = net.predict(&x).unwrap();
        for p in net.params_mut() {
            if p.role == (ParamRole::DecoupledKernel { weighted: false }) {
                *p.value = p.value.scale(7.5);
            }
        }
        let after = net.predict(&x).unwrap();
        assert!(before.max_abs_diff(&after).unwrap() < 1e-9);
    }

    #[test]
    fn param_names_follow_layer_order() {
        let op = ConvOperator::Decoupled(OperatorSpec::preset(
            MagnitudeKind::Ball,
            AngularKind::Cosine,
        ));
        let mut spec = ArchSpec::preset(ArchPreset::Custom, op);
        spec.layers = vec!["conv4".parse().unwrap(), "pool".parse().unwrap()];
        spec.input_size = 4;
        spec.bn = true;
        let net: Network<f64> = spec.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = net.params().into_iter().map(|p| p.name).collect();
        assert_eq!(
            names,
            ["0.weight", "0.rho", "1.gamma", "1.beta", "5.weight", "5.bias"]
        );
    }
}
