//! Execution plan: the flat op sequence a network runs.
//!
//! An [`super::ArchitectureSpec`] is expanded into a `Plan` once; forward
//! inference and backpropagation both walk the same op list. Residual
//! shortcuts are expressed with an explicit save/add pair so the op list
//! stays linear.

use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec};
use crate::se;
use crate::tensor::Tensor;

use super::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum PlanOp {
    StandardConv {
        spec: ConvSpec,
        in_channels: usize,
        param: usize,
    },
    DepthwiseConv {
        spec: ConvSpec,
        param: usize,
    },
    PointwiseConv {
        in_channels: usize,
        out_channels: usize,
        param: usize,
    },
    Relu,
    Se {
        channels: usize,
        bottleneck: usize,
        w_reduce: usize,
        w_expand: usize,
    },
    AvgPool {
        window_h: usize,
        window_w: usize,
    },
    GlobalAvgPool,
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
        param: usize,
    },
    /// Pushes the current activation onto the shortcut stack.
    ResidualSave,
    /// Pops the shortcut stack and adds it to the current activation.
    ResidualAdd,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub(crate) ops: Vec<PlanOp>,
    pub(crate) param_names: Vec<String>,
    pub(crate) param_shapes: Vec<Vec<usize>>,
    pub(crate) input_channels: usize,
    pub(crate) num_classes: usize,
}

impl Plan {
    pub fn num_params(&self) -> usize {
        self.param_shapes.len()
    }

    pub fn param_name(&self, index: usize) -> &str {
        &self.param_names[index]
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub(crate) fn add_param(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.param_names.push(name);
        self.param_shapes.push(shape);
        self.param_shapes.len() - 1
    }

    /// Verifies structural consistency: balanced shortcut stack, channel
    /// continuity, and parameter shapes that match their ops.
    pub(crate) fn check(&self) -> Result<()> {
        let mut channels = self.input_channels;
        let mut spatial = true; // rank-3 activation until global pooling
        let mut depth = 0usize;
        let mut stack: Vec<usize> = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            let fail = |msg: String| Err(Error::Config(format!("plan op {i}: {msg}")));
            match op {
                PlanOp::StandardConv {
                    spec,
                    in_channels,
                    param,
                } => {
                    if !spatial || *in_channels != channels {
                        return fail(format!(
                            "standard conv expects {in_channels} channels, stream has {channels}"
                        ));
                    }
                    let want = vec![spec.out_channels, *in_channels, spec.kernel_h, spec.kernel_w];
                    if self.param_shapes[*param] != want {
                        return fail(format!(
                            "weight shape {:?} != {want:?}",
                            self.param_shapes[*param]
                        ));
                    }
                    channels = spec.out_channels;
                }
                PlanOp::DepthwiseConv { spec, param } => {
                    if !spatial || spec.out_channels != channels {
                        return fail(format!(
                            "depthwise conv on {} channels, stream has {channels}",
                            spec.out_channels
                        ));
                    }
                    let want = vec![channels, spec.kernel_h, spec.kernel_w];
                    if self.param_shapes[*param] != want {
                        return fail(format!(
                            "weight shape {:?} != {want:?}",
                            self.param_shapes[*param]
                        ));
                    }
                }
                PlanOp::PointwiseConv {
                    in_channels,
                    out_channels,
                    param,
                } => {
                    if !spatial || *in_channels != channels {
                        return fail(format!(
                            "pointwise conv expects {in_channels} channels, stream has {channels}"
                        ));
                    }
                    let want = vec![*out_channels, *in_channels];
                    if self.param_shapes[*param] != want {
                        return fail(format!(
                            "weight shape {:?} != {want:?}",
                            self.param_shapes[*param]
                        ));
                    }
                    channels = *out_channels;
                }
                PlanOp::Relu => {}
                PlanOp::Se {
                    channels: c,
                    bottleneck,
                    w_reduce,
                    w_expand,
                } => {
                    if !spatial || *c != channels {
                        return fail(format!("SE on {c} channels, stream has {channels}"));
                    }
                    if self.param_shapes[*w_reduce] != [*bottleneck, *c]
                        || self.param_shapes[*w_expand] != [*c, *bottleneck]
                    {
                        return fail("SE weight shapes inconsistent".into());
                    }
                }
                PlanOp::AvgPool { window_h, window_w } => {
                    if !spatial || *window_h == 0 || *window_w == 0 {
                        return fail("avg pool needs a spatial stream and window >= 1".into());
                    }
                }
                PlanOp::GlobalAvgPool => {
                    if !spatial {
                        return fail("duplicate global pooling".into());
                    }
                    spatial = false;
                }
                PlanOp::FullyConnected {
                    in_dim,
                    out_dim,
                    param,
                } => {
                    if spatial || *in_dim != channels {
                        return fail(format!(
                            "fully-connected expects a {in_dim}-vector, stream has {channels}"
                        ));
                    }
                    if self.param_shapes[*param] != [*out_dim, *in_dim] {
                        return fail("fully-connected weight shape inconsistent".into());
                    }
                    channels = *out_dim;
                }
                PlanOp::ResidualSave => {
                    stack.push(channels);
                    depth += 1;
                }
                PlanOp::ResidualAdd => {
                    let saved = stack.pop().ok_or_else(|| {
                        Error::Config(format!("plan op {i}: shortcut add without save"))
                    })?;
                    if saved != channels {
                        return fail(format!(
                            "shortcut saved {saved} channels but stream has {channels}"
                        ));
                    }
                }
            }
        }
        if !stack.is_empty() {
            return Err(Error::Config(format!(
                "{} unmatched shortcut save(s)",
                stack.len()
            )));
        }
        let _ = depth;
        if channels != self.num_classes || spatial {
            return Err(Error::Config(
                "plan must end with global pooling and a fully-connected output".into(),
            ));
        }
        Ok(())
    }
}

fn elementwise_add(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

/// Runs the plan, returning the logits (no softmax).
///
/// When `cache` is given, each op's input tensor is stored in op order so a
/// backward pass can be run over the same plan.
pub(crate) fn run_plan(
    plan: &Plan,
    params: &ModelParams,
    input: &Tensor,
    parallel: bool,
    mut cache: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let mut cur = input.clone();
    let mut skips: Vec<Tensor> = Vec::new();
    for op in &plan.ops {
        let next = match op {
            PlanOp::StandardConv { spec, param, .. } => {
                nn_conv_dispatch(&cur, params.tensor(*param), spec, parallel, ConvVariant::Std)?
            }
            PlanOp::DepthwiseConv { spec, param } => {
                nn_conv_dispatch(&cur, params.tensor(*param), spec, parallel, ConvVariant::Dw)?
            }
            PlanOp::PointwiseConv { param, .. } => {
                if parallel {
                    nn::conv2d_pointwise(&cur, params.tensor(*param))?
                } else {
                    nn::seq::conv2d_pointwise(&cur, params.tensor(*param))?
                }
            }
            PlanOp::Relu => nn::relu(&cur),
            PlanOp::Se {
                w_reduce, w_expand, ..
            } => se::se_forward(&cur, params.tensor(*w_reduce), params.tensor(*w_expand))?,
            PlanOp::AvgPool { window_h, window_w } => nn::avg_pool2d(&cur, *window_h, *window_w)?,
            PlanOp::GlobalAvgPool => nn::global_avg_pool(&cur)?,
            PlanOp::FullyConnected { param, .. } => {
                nn::fully_connected(&cur, params.tensor(*param))?
            }
            PlanOp::ResidualSave => {
                skips.push(cur.clone());
                cur.clone()
            }
            PlanOp::ResidualAdd => {
                let skip = skips
                    .pop()
                    .ok_or_else(|| Error::Config("shortcut add without save".into()))?;
                elementwise_add(&cur, &skip)
            }
        };
        match cache.as_deref_mut() {
            Some(cache) => cache.push(std::mem::replace(&mut cur, next)),
            None => cur = next,
        }
    }
    Ok(cur)
}

enum ConvVariant {
    Std,
    Dw,
}

fn nn_conv_dispatch(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    parallel: bool,
    variant: ConvVariant,
) -> Result<Tensor> {
    match (variant, parallel) {
        (ConvVariant::Std, true) => nn::conv2d_standard(input, weights, spec),
        (ConvVariant::Std, false) => nn::seq::conv2d_standard(input, weights, spec),
        (ConvVariant::Dw, true) => nn::conv2d_depthwise(input, weights, spec),
        (ConvVariant::Dw, false) => nn::seq::conv2d_depthwise(input, weights, spec),
    }
}
