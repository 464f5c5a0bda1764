//! Network architectures: declarative layer configs, the DS-ResNet presets,
//! construction with deterministic initialization, forward inference, the
//! dilation schedule, and the receptive-field calculator.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec};
use crate::rng::Rng;
use crate::se::SeConfig;
use crate::tensor::Tensor;

mod format;
mod plan;

pub use plan::Plan;
pub(crate) use plan::{run_plan, PlanOp};

/// Kinds a declarative layer line can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    StandardConv,
    Se,
    AvgPool,
    /// `repeat` residual blocks of two depthwise-separable layers each.
    ResidualGroup,
    /// `repeat` plain depthwise-separable layers, no shortcut.
    DsConv,
    GlobalAvgPool,
    SoftmaxFc,
}

/// One line of an architecture description.
///
/// Field meaning depends on `kind`: `kernel_h`/`kernel_w` are the kernel (or
/// pooling window) dims `m` x `r`, `channels` is the filter count `n` (or
/// class count for the output layer), and a dilation of 0 means "use the
/// preset schedule" for the depthwise-separable layers the entry expands to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub channels: usize,
    pub dilation_w: usize,
    pub dilation_h: usize,
    pub repeat: usize,
}

impl LayerConfig {
    fn new(kind: LayerKind) -> LayerConfig {
        LayerConfig {
            kind,
            kernel_h: 0,
            kernel_w: 0,
            channels: 0,
            dilation_w: 0,
            dilation_h: 0,
            repeat: 1,
        }
    }

    pub fn standard_conv(m: usize, r: usize, n: usize) -> LayerConfig {
        LayerConfig {
            kernel_h: m,
            kernel_w: r,
            channels: n,
            dilation_w: 1,
            dilation_h: 1,
            ..LayerConfig::new(LayerKind::StandardConv)
        }
    }

    pub fn se(channels: usize) -> LayerConfig {
        LayerConfig {
            channels,
            ..LayerConfig::new(LayerKind::Se)
        }
    }

    pub fn avg_pool(window_h: usize, window_w: usize) -> LayerConfig {
        LayerConfig {
            kernel_h: window_h,
            kernel_w: window_w,
            ..LayerConfig::new(LayerKind::AvgPool)
        }
    }

    /// Residual group with the preset dilation schedule (dilation 0 = auto).
    pub fn residual_group(m: usize, r: usize, n: usize, blocks: usize) -> LayerConfig {
        LayerConfig {
            kernel_h: m,
            kernel_w: r,
            channels: n,
            repeat: blocks,
            ..LayerConfig::new(LayerKind::ResidualGroup)
        }
    }

    pub fn ds_conv(m: usize, r: usize, n: usize, layers: usize) -> LayerConfig {
        LayerConfig {
            kernel_h: m,
            kernel_w: r,
            channels: n,
            repeat: layers,
            ..LayerConfig::new(LayerKind::DsConv)
        }
    }

    pub fn global_avg_pool() -> LayerConfig {
        LayerConfig::new(LayerKind::GlobalAvgPool)
    }

    pub fn softmax_fc(classes: usize) -> LayerConfig {
        LayerConfig {
            channels: classes,
            ..LayerConfig::new(LayerKind::SoftmaxFc)
        }
    }

    pub fn with_dilation(mut self, dilation_w: usize, dilation_h: usize) -> LayerConfig {
        self.dilation_w = dilation_w;
        self.dilation_h = dilation_h;
        self
    }
}

/// Optional squeeze-and-excitation insertion inside every
/// depthwise-separable layer (the `-d` / `-p` ablation variants).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SePlacement {
    #[default]
    Off,
    AfterDepthwise,
    AfterPointwise,
}

/// A whole network as an ordered list of layer configs.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerConfig>,
    pub se_in_ds: SePlacement,
}

/// Dilation of the `i`th depthwise-separable layer (0-based, counted across
/// all DS layers in network order, excluding the first standard conv):
/// `2^floor(i / 3)`.
pub fn dilation_schedule(i: usize) -> usize {
    1usize << (i / 3).min(62)
}

/// Number of classes in the Speech Commands task: 10 keywords plus
/// "unknown" and "silence".
pub const NUM_CLASSES: usize = 12;

/// MFCC input shape: one channel, 101 frames, 40 coefficients.
pub const INPUT_SHAPE: [usize; 3] = [1, 101, 40];

/// Builds one of the named presets.
///
/// `DS-ResNet18`, `DS-ResNet14` and `DS-ResNet10` are the three reference
/// networks; `DS-ResNet18-n` / `-d` / `-p` are the ablation variants without
/// the front SE block, or with an extra SE block after every depthwise or
/// pointwise convolution.
pub fn preset(name: &str) -> Result<ArchitectureSpec> {
    let canon = name.to_ascii_lowercase();
    let (base, variant) = match canon.strip_suffix("-n") {
        Some(b) => (b.to_string(), Some('n')),
        None => match canon.strip_suffix("-d") {
            Some(b) => (b.to_string(), Some('d')),
            None => match canon.strip_suffix("-p") {
                Some(b) => (b.to_string(), Some('p')),
                None => (canon.clone(), None),
            },
        },
    };
    let mut spec = match base.as_str() {
        "ds-resnet18" => ArchitectureSpec {
            name: "DS-ResNet18".into(),
            input_shape: INPUT_SHAPE,
            num_classes: NUM_CLASSES,
            layers: vec![
                LayerConfig::standard_conv(3, 3, 64),
                LayerConfig::se(64),
                LayerConfig::residual_group(3, 3, 64, 7),
                LayerConfig::ds_conv(3, 3, 64, 1),
                LayerConfig::global_avg_pool(),
                LayerConfig::softmax_fc(NUM_CLASSES),
            ],
            se_in_ds: SePlacement::Off,
        },
        "ds-resnet14" => ArchitectureSpec {
            name: "DS-ResNet14".into(),
            input_shape: INPUT_SHAPE,
            num_classes: NUM_CLASSES,
            layers: vec![
                LayerConfig::standard_conv(3, 3, 32),
                LayerConfig::se(32),
                LayerConfig::avg_pool(2, 2),
                LayerConfig::residual_group(3, 3, 32, 5),
                LayerConfig::ds_conv(3, 3, 32, 1),
                LayerConfig::global_avg_pool(),
                LayerConfig::softmax_fc(NUM_CLASSES),
            ],
            se_in_ds: SePlacement::Off,
        },
        "ds-resnet10" => ArchitectureSpec {
            name: "DS-ResNet10".into(),
            input_shape: INPUT_SHAPE,
            num_classes: NUM_CLASSES,
            layers: vec![
                LayerConfig::standard_conv(3, 3, 32),
                LayerConfig::se(32),
                LayerConfig::avg_pool(4, 2),
                LayerConfig::ds_conv(3, 3, 32, 7),
                LayerConfig::global_avg_pool(),
                LayerConfig::softmax_fc(NUM_CLASSES),
            ],
            se_in_ds: SePlacement::Off,
        },
        _ => return Err(Error::Config(format!("unknown preset '{name}'"))),
    };
    match variant {
        None => {}
        Some('n') => {
            spec.name.push_str("-n");
            spec.layers.retain(|l| l.kind != LayerKind::Se);
        }
        Some('d') => {
            spec.name.push_str("-d");
            spec.se_in_ds = SePlacement::AfterDepthwise;
        }
        Some('p') => {
            spec.name.push_str("-p");
            spec.se_in_ds = SePlacement::AfterPointwise;
        }
        Some(_) => unreachable!(),
    }
    Ok(spec)
}

impl ArchitectureSpec {
    /// Resolved dilation for a DS layer: the entry's explicit value, or the
    /// preset schedule when the entry says 0.
    fn resolve_dilation(layer: &LayerConfig, ds_index: usize) -> (usize, usize) {
        if layer.dilation_h == 0 || layer.dilation_w == 0 {
            let d = dilation_schedule(ds_index);
            (d, d)
        } else {
            (layer.dilation_h, layer.dilation_w)
        }
    }

    /// Total number of depthwise-separable layers.
    pub fn ds_layer_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::ResidualGroup => 2 * l.repeat,
                LayerKind::DsConv => l.repeat,
                _ => 0,
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.expand().map(|_| ())
    }

    /// Expands the declarative description into a flat execution plan.
    ///
    /// Inside a residual block the ordering is: depthwise, pointwise, ReLU,
    /// depthwise, pointwise, shortcut add, ReLU (post-add activation).
    /// Standalone DS layers and the first standard conv each get a trailing
    /// ReLU. No normalization layers anywhere.
    pub fn expand(&self) -> Result<Plan> {
        if self.layers.len() < 2
            || self.layers[self.layers.len() - 2].kind != LayerKind::GlobalAvgPool
            || self.layers[self.layers.len() - 1].kind != LayerKind::SoftmaxFc
        {
            return Err(Error::Config(
                "architecture must end with global average pooling followed by the softmax \
                 fully-connected layer"
                    .into(),
            ));
        }
        let mut plan = Plan {
            ops: Vec::new(),
            param_names: Vec::new(),
            param_shapes: Vec::new(),
            input_channels: self.input_shape[0],
            num_classes: self.num_classes,
        };
        let mut channels = self.input_shape[0];
        let mut ds_index = 0usize;

        for (li, layer) in self.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::StandardConv => {
                    for k in 0..layer.repeat {
                        let spec =
                            ConvSpec::standard(layer.kernel_h, layer.kernel_w, layer.channels)
                                .with_dilation(
                                    layer.dilation_h.max(1),
                                    layer.dilation_w.max(1),
                                );
                        spec.validate()?;
                        let name = if layer.repeat == 1 {
                            format!("conv{li}")
                        } else {
                            format!("conv{li}.{k}")
                        };
                        let param = plan.add_param(
                            name,
                            vec![layer.channels, channels, layer.kernel_h, layer.kernel_w],
                        );
                        plan.ops.push(PlanOp::StandardConv {
                            spec,
                            in_channels: channels,
                            param,
                        });
                        plan.ops.push(PlanOp::Relu);
                        channels = layer.channels;
                    }
                }
                LayerKind::Se => {
                    if layer.channels != channels {
                        return Err(Error::Config(format!(
                            "layer {li}: SE declared for {} channels but the stream has {channels}",
                            layer.channels
                        )));
                    }
                    if layer.repeat != 1 {
                        return Err(Error::Config(format!(
                            "layer {li}: SE does not take a repeat count"
                        )));
                    }
                    push_se(&mut plan, channels, &format!("se{li}"));
                }
                LayerKind::AvgPool => {
                    if layer.kernel_h == 0 || layer.kernel_w == 0 {
                        return Err(Error::Config(format!(
                            "layer {li}: pooling window must be >= 1"
                        )));
                    }
                    for _ in 0..layer.repeat {
                        plan.ops.push(PlanOp::AvgPool {
                            window_h: layer.kernel_h,
                            window_w: layer.kernel_w,
                        });
                    }
                }
                LayerKind::ResidualGroup => {
                    if layer.channels != channels {
                        return Err(Error::Config(format!(
                            "layer {li}: residual group needs equal input and output channels \
                             ({} declared, stream has {channels})",
                            layer.channels
                        )));
                    }
                    for block in 0..layer.repeat {
                        plan.ops.push(PlanOp::ResidualSave);
                        for inner in 0..2 {
                            let name = format!("res{li}.block{block}.ds{inner}");
                            push_ds_layer(
                                &mut plan,
                                self,
                                layer,
                                channels,
                                &mut ds_index,
                                &name,
                            )?;
                            if inner == 0 {
                                plan.ops.push(PlanOp::Relu);
                            }
                        }
                        plan.ops.push(PlanOp::ResidualAdd);
                        plan.ops.push(PlanOp::Relu);
                    }
                }
                LayerKind::DsConv => {
                    if layer.channels != channels {
                        return Err(Error::Config(format!(
                            "layer {li}: depthwise-separable layer needs matching channels \
                             ({} declared, stream has {channels})",
                            layer.channels
                        )));
                    }
                    for k in 0..layer.repeat {
                        let name = format!("ds{li}.layer{k}");
                        push_ds_layer(&mut plan, self, layer, channels, &mut ds_index, &name)?;
                        plan.ops.push(PlanOp::Relu);
                    }
                }
                LayerKind::GlobalAvgPool => {
                    if layer.repeat != 1 {
                        return Err(Error::Config(format!(
                            "layer {li}: global pooling does not take a repeat count"
                        )));
                    }
                    plan.ops.push(PlanOp::GlobalAvgPool);
                }
                LayerKind::SoftmaxFc => {
                    if layer.channels != self.num_classes {
                        return Err(Error::Config(format!(
                            "layer {li}: output layer has {} units but the spec declares {} classes",
                            layer.channels, self.num_classes
                        )));
                    }
                    if layer.repeat != 1 {
                        return Err(Error::Config(format!(
                            "layer {li}: the output layer does not take a repeat count"
                        )));
                    }
                    let param = plan.add_param(
                        format!("fc{li}"),
                        vec![layer.channels, channels],
                    );
                    plan.ops.push(PlanOp::FullyConnected {
                        in_dim: channels,
                        out_dim: layer.channels,
                        param,
                    });
                }
            }
        }
        plan.check()?;
        Ok(plan)
    }

    /// Receptive field along (time, frequency).
    ///
    /// `rf = 1 + sum over layers of (k - 1) * d * J`, where `J` is the
    /// cumulative pooling jump in front of the layer. Pointwise convolutions
    /// and the channel-global SE gate contribute nothing.
    pub fn receptive_field(&self) -> (usize, usize) {
        let (mut rf_h, mut rf_w) = (1usize, 1usize);
        let (mut jump_h, mut jump_w) = (1usize, 1usize);
        let mut ds_index = 0usize;
        for layer in &self.layers {
            match layer.kind {
                LayerKind::StandardConv => {
                    for _ in 0..layer.repeat {
                        rf_h += (layer.kernel_h - 1) * layer.dilation_h.max(1) * jump_h;
                        rf_w += (layer.kernel_w - 1) * layer.dilation_w.max(1) * jump_w;
                    }
                }
                LayerKind::AvgPool => {
                    for _ in 0..layer.repeat {
                        rf_h += (layer.kernel_h - 1) * jump_h;
                        rf_w += (layer.kernel_w - 1) * jump_w;
                        jump_h *= layer.kernel_h;
                        jump_w *= layer.kernel_w;
                    }
                }
                LayerKind::ResidualGroup | LayerKind::DsConv => {
                    let layers = if layer.kind == LayerKind::ResidualGroup {
                        2 * layer.repeat
                    } else {
                        layer.repeat
                    };
                    for _ in 0..layers {
                        let (d_h, d_w) = Self::resolve_dilation(layer, ds_index);
                        rf_h += (layer.kernel_h - 1) * d_h * jump_h;
                        rf_w += (layer.kernel_w - 1) * d_w * jump_w;
                        ds_index += 1;
                    }
                }
                LayerKind::Se | LayerKind::GlobalAvgPool | LayerKind::SoftmaxFc => {}
            }
        }
        (rf_h, rf_w)
    }
}

fn push_se(plan: &mut Plan, channels: usize, name: &str) {
    let cfg = SeConfig::new(channels);
    let b = cfg.bottleneck();
    let w_reduce = plan.add_param(format!("{name}.reduce"), vec![b, channels]);
    let w_expand = plan.add_param(format!("{name}.expand"), vec![channels, b]);
    plan.ops.push(PlanOp::Se {
        channels,
        bottleneck: b,
        w_reduce,
        w_expand,
    });
}

/// Depthwise + pointwise pair, honoring the architecture's SE placement.
fn push_ds_layer(
    plan: &mut Plan,
    spec: &ArchitectureSpec,
    layer: &LayerConfig,
    channels: usize,
    ds_index: &mut usize,
    name: &str,
) -> Result<()> {
    let (d_h, d_w) = ArchitectureSpec::resolve_dilation(layer, *ds_index);
    let conv = ConvSpec::depthwise(layer.kernel_h, layer.kernel_w, channels).with_dilation(d_h, d_w);
    conv.validate()?;
    let dw = plan.add_param(
        format!("{name}.depthwise"),
        vec![channels, layer.kernel_h, layer.kernel_w],
    );
    plan.ops.push(PlanOp::DepthwiseConv { spec: conv, param: dw });
    if spec.se_in_ds == SePlacement::AfterDepthwise {
        push_se(plan, channels, &format!("{name}.se"));
    }
    let pw = plan.add_param(format!("{name}.pointwise"), vec![channels, channels]);
    plan.ops.push(PlanOp::PointwiseConv {
        in_channels: channels,
        out_channels: channels,
        param: pw,
    });
    if spec.se_in_ds == SePlacement::AfterPointwise {
        push_se(plan, channels, &format!("{name}.se"));
    }
    *ds_index += 1;
    Ok(())
}

// ---------------------------------------------------------------------------
// parameters and the built model
// ---------------------------------------------------------------------------

/// All learnable weights of a built network, addressable per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl ModelParams {
    pub(crate) fn new(tensors: Vec<Tensor>, names: Vec<String>) -> ModelParams {
        ModelParams { tensors, names }
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn total_count(&self) -> u64 {
        self.tensors.iter().map(|t| t.len() as u64).sum()
    }

    /// Zero tensors with the same shapes, e.g. for gradients or momentum.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            names: self.names.clone(),
        }
    }
}

/// A built network: plan plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub name: String,
    pub(crate) plan: Plan,
    pub params: ModelParams,
    /// The declarative spec the model was built from; absent on models
    /// loaded from a file.
    pub spec: Option<ArchitectureSpec>,
}

impl Model {
    /// Builds a network with fan-in-scaled Gaussian weights
    /// (`std = sqrt(2 / fan_in)`), deterministic in `seed`.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
        let plan = spec.expand()?;
        let mut rng = Rng::stream(seed, "init");
        let mut tensors = Vec::with_capacity(plan.num_params());
        for shape in plan.param_shapes() {
            let fan_in: usize = match shape.len() {
                // [out, in] matrices and [out, in, kh, kw] kernels
                2 => shape[1],
                4 => shape[1] * shape[2] * shape[3],
                // depthwise kernels [c, kh, kw]: one filter per channel
                3 => shape[1] * shape[2],
                _ => shape.iter().product(),
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len).map(|_| rng.normal() * std).collect();
            tensors.push(Tensor::from_vec(shape, data)?);
        }
        let names = plan.param_names.clone();
        Ok(Model {
            name: spec.name.clone(),
            plan,
            params: ModelParams::new(tensors, names),
            spec: Some(spec.clone()),
        })
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    /// Class posteriors for one feature tensor; softmax of the logits.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let logits = self.logits(features)?;
        Ok(nn::softmax(&logits))
    }

    /// Sequential-path posteriors; bit-identical to [`Model::forward`].
    pub fn forward_seq(&self, features: &Tensor) -> Result<Tensor> {
        let logits = run_plan(&self.plan, &self.params, features, false, None)?;
        Ok(nn::softmax(&logits))
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        run_plan(
            &self.plan,
            &self.params,
            features,
            crate::exec::default_parallel(),
            None,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::save_model(self, path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        format::load_model(path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::model_to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        format::model_from_bytes(bytes)
    }
}

// ---------------------------------------------------------------------------
// textual architecture description files
// ---------------------------------------------------------------------------

impl LayerKind {
    fn token(self) -> &'static str {
        match self {
            LayerKind::StandardConv => "conv",
            LayerKind::Se => "se",
            LayerKind::AvgPool => "avgpool",
            LayerKind::ResidualGroup => "res",
            LayerKind::DsConv => "dsconv",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::SoftmaxFc => "fc",
        }
    }

    fn from_token(tok: &str) -> Option<LayerKind> {
        Some(match tok {
            "conv" => LayerKind::StandardConv,
            "se" => LayerKind::Se,
            "avgpool" => LayerKind::AvgPool,
            "res" => LayerKind::ResidualGroup,
            "dsconv" => LayerKind::DsConv,
            "gap" => LayerKind::GlobalAvgPool,
            "fc" => LayerKind::SoftmaxFc,
            _ => return None,
        })
    }
}

impl fmt::Display for ArchitectureSpec {
    /// One layer per line: `kind m r n d_w d_h repeat`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            writeln!(
                f,
                "{} {} {} {} {} {} {}",
                l.kind.token(),
                l.kernel_h,
                l.kernel_w,
                l.channels,
                l.dilation_w,
                l.dilation_h,
                l.repeat
            )?;
        }
        Ok(())
    }
}

/// Parses a textual architecture description: one layer per line
/// (`kind m r n d_w d_h repeat`), `#` comments and blank lines allowed.
pub fn parse_spec(name: &str, text: &str) -> Result<ArchitectureSpec> {
    let mut layers = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 7 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!(
                    "expected 'kind m r n d_w d_h repeat' (7 fields), got {} fields",
                    parts.len()
                ),
            });
        }
        let kind = LayerKind::from_token(parts[0]).ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: format!("unknown layer kind '{}'", parts[0]),
        })?;
        let mut nums = [0usize; 6];
        for (slot, tok) in nums.iter_mut().zip(&parts[1..]) {
            *slot = tok.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("'{tok}' is not a non-negative integer"),
            })?;
        }
        layers.push(LayerConfig {
            kind,
            kernel_h: nums[0],
            kernel_w: nums[1],
            channels: nums[2],
            dilation_w: nums[3],
            dilation_h: nums[4],
            repeat: nums[5].max(1),
        });
    }
    let num_classes = layers
        .last()
        .filter(|l| l.kind == LayerKind::SoftmaxFc)
        .map(|l| l.channels)
        .ok_or_else(|| Error::Parse {
            line: text.lines().count(),
            msg: "architecture must end with an 'fc' line".into(),
        })?;
    let spec = ArchitectureSpec {
        name: name.to_string(),
        input_shape: INPUT_SHAPE,
        num_classes,
        layers,
        se_in_ds: SePlacement::Off,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_schedule_values() {
        assert_eq!(dilation_schedule(0), 1);
        assert_eq!(dilation_schedule(5), 2);
        assert_eq!(dilation_schedule(10), 8);
        assert_eq!(dilation_schedule(14), 16);
    }

    #[test]
    fn presets_have_expected_ds_layer_counts_and_final_dilation() {
        let s18 = preset("DS-ResNet18").unwrap();
        assert_eq!(s18.ds_layer_count(), 15);
        let s14 = preset("DS-ResNet14").unwrap();
        assert_eq!(s14.ds_layer_count(), 11);
        let s10 = preset("DS-ResNet10").unwrap();
        assert_eq!(s10.ds_layer_count(), 7);
        // final DS layer dilation: 2^floor(14/3) = 16 and 2^floor(10/3) = 8
        assert_eq!(dilation_schedule(14), 16);
        assert_eq!(dilation_schedule(10), 8);
        // DS-ResNet10 has no residual connections
        assert!(s10
            .layers
            .iter()
            .all(|l| l.kind != LayerKind::ResidualGroup));
        assert!(preset("DS-ResNet99").is_err());
    }

    #[test]
    fn preset_plans_wire_the_dilation_schedule_through_groups() {
        // the DS-layer index runs across residual groups and the standalone
        // tail layer, so the final depthwise dilations are 16 (18) and 8 (14)
        let dilations = |name: &str| -> Vec<usize> {
            preset(name)
                .unwrap()
                .expand()
                .unwrap()
                .ops
                .iter()
                .filter_map(|op| match op {
                    PlanOp::DepthwiseConv { spec, .. } => Some(spec.dilation_h),
                    _ => None,
                })
                .collect()
        };
        let d18 = dilations("DS-ResNet18");
        assert_eq!(d18.len(), 15);
        assert_eq!(
            d18,
            vec![1, 1, 1, 2, 2, 2, 4, 4, 4, 8, 8, 8, 16, 16, 16]
        );
        let d14 = dilations("DS-ResNet14");
        assert_eq!(d14.len(), 11);
        assert_eq!(*d14.last().unwrap(), 8);
        let d10 = dilations("DS-ResNet10");
        assert_eq!(d10, vec![1, 1, 1, 2, 2, 2, 4]);
    }

    #[test]
    fn preset_totals_match_reference_tables() {
        for (name, want) in [
            ("DS-ResNet18", 71_936),
            ("DS-ResNet14", 15_232),
            ("DS-ResNet10", 9_984),
        ] {
            let model = Model::build(&preset(name).unwrap(), 1).unwrap();
            assert_eq!(model.params.total_count(), want, "{name}");
        }
    }

    #[test]
    fn se_ablation_variants_change_counts_as_published() {
        let n = Model::build(&preset("DS-ResNet18-n").unwrap(), 1).unwrap();
        assert_eq!(n.params.total_count(), 71_424); // 71936 - 512
        let d = Model::build(&preset("DS-ResNet18-d").unwrap(), 1).unwrap();
        assert_eq!(d.params.total_count(), 79_616); // + 15 * 512
        let p = Model::build(&preset("DS-ResNet18-p").unwrap(), 1).unwrap();
        assert_eq!(p.params.total_count(), 79_616);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = preset("DS-ResNet10").unwrap();
        let a = Model::build(&spec, 7).unwrap();
        let b = Model::build(&spec, 7).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::build(&spec, 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn forward_outputs_probabilities() {
        let spec = preset("DS-ResNet10").unwrap();
        let model = Model::build(&spec, 3).unwrap();
        let mut rng = Rng::from_seed(9);
        let features = Tensor::from_vec(
            &[1, 101, 40],
            (0..101 * 40).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let post = model.forward(&features).unwrap();
        assert_eq!(post.shape(), &[12]);
        let sum: f64 = post.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // deterministic and identical on the sequential path
        assert_eq!(post, model.forward(&features).unwrap());
        assert_eq!(post, model.forward_seq(&features).unwrap());
    }

    #[test]
    fn zero_weights_give_uniform_posteriors() {
        let spec = preset("DS-ResNet10").unwrap();
        let mut model = Model::build(&spec, 3).unwrap();
        for t in model.params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let features = Tensor::zeros(&[1, 101, 40]);
        let post = model.forward(&features).unwrap();
        for &p in post.data() {
            assert!((p - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn receptive_field_matches_hand_recurrence() {
        // single 3x3 conv
        let single = ArchitectureSpec {
            name: "single".into(),
            input_shape: INPUT_SHAPE,
            num_classes: 2,
            layers: vec![
                LayerConfig::standard_conv(3, 3, 4),
                LayerConfig::global_avg_pool(),
                LayerConfig::softmax_fc(2),
            ],
            se_in_ds: SePlacement::Off,
        };
        assert_eq!(single.receptive_field(), (3, 3));

        let s18 = preset("DS-ResNet18").unwrap();
        assert_eq!(s18.receptive_field(), (189, 189));
    }

    #[test]
    fn truncated_stacks_cross_input_coverage_at_13_layers() {
        let stack = |n: usize| ArchitectureSpec {
            name: format!("stack{n}"),
            input_shape: INPUT_SHAPE,
            num_classes: 12,
            layers: vec![
                LayerConfig::standard_conv(3, 3, 64),
                LayerConfig::ds_conv(3, 3, 64, n),
                LayerConfig::global_avg_pool(),
                LayerConfig::softmax_fc(12),
            ],
            se_in_ds: SePlacement::Off,
        };
        let (rf12, _) = stack(12).receptive_field();
        let (rf13, _) = stack(13).receptive_field();
        assert_eq!(rf12, 93);
        assert_eq!(rf13, 125);
        assert!(rf12 < 101 && rf13 >= 101);
    }

    #[test]
    fn receptive_field_is_monotone_in_depth() {
        let mut prev = 0;
        for n in 1..=15 {
            let spec = ArchitectureSpec {
                name: "mono".into(),
                input_shape: INPUT_SHAPE,
                num_classes: 12,
                layers: vec![
                    LayerConfig::ds_conv(3, 3, 1, n),
                    LayerConfig::global_avg_pool(),
                    LayerConfig::softmax_fc(12),
                ],
                se_in_ds: SePlacement::Off,
            };
            let (rf, _) = spec.receptive_field();
            assert!(rf > prev);
            prev = rf;
        }
    }

    #[test]
    fn residual_group_requires_matching_channels() {
        let spec = ArchitectureSpec {
            name: "bad".into(),
            input_shape: INPUT_SHAPE,
            num_classes: 12,
            layers: vec![
                LayerConfig::standard_conv(3, 3, 16),
                LayerConfig::residual_group(3, 3, 32, 1),
                LayerConfig::global_avg_pool(),
                LayerConfig::softmax_fc(12),
            ],
            se_in_ds: SePlacement::Off,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zeroed_residual_block_is_identity_on_nonnegative_input() {
        // With post-add activation, a block whose weights are all zero maps
        // x to relu(0 + x), which is exactly x on the nonnegative inputs the
        // block sees in-network.
        let spec = ArchitectureSpec {
            name: "resid".into(),
            input_shape: [4, 6, 5],
            num_classes: 3,
            layers: vec![
                LayerConfig::residual_group(3, 3, 4, 1),
                LayerConfig::global_avg_pool(),
                LayerConfig::softmax_fc(3),
            ],
            se_in_ds: SePlacement::Off,
        };
        let mut model = Model::build(&spec, 5).unwrap();
        for i in 0..model.params.len() {
            if model.params.name(i).starts_with("res") {
                model.params.tensor_mut(i).data_mut().fill(0.0);
            }
        }
        let mut rng = Rng::from_seed(17);
        let x = Tensor::from_vec(
            &[4, 6, 5],
            (0..4 * 6 * 5).map(|_| rng.next_f64() * 2.0).collect(),
        )
        .unwrap();
        // An identity block means the logits equal FC(GAP(x)) computed
        // directly from the raw input.
        let fc = model.params.tensor(model.params.len() - 1).clone();
        let direct = nn::fully_connected(&nn::global_avg_pool(&x).unwrap(), &fc).unwrap();
        let through = run_plan(&model.plan, &model.params, &x, false, None).unwrap();
        for (a, b) in through.data().iter().zip(direct.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn repeat_counts_apply_to_conv_and_pool_lines() {
        let spec = parse_spec(
            "stacked",
            "conv 3 3 8 1 1 2\navgpool 2 2 0 0 0 2\ndsconv 3 3 8 0 0 1\ngap 0 0 8 0 0 1\nfc 0 0 12 0 0 1\n",
        )
        .unwrap();
        let model = Model::build(&spec, 1).unwrap();
        // conv params: 1*3*3*8 + 8*3*3*8 = 72 + 576; ds layer: 72 + 64; fc: 96
        assert_eq!(model.params.total_count(), 72 + 576 + 72 + 64 + 96);
        let report = crate::cost::analyze(&spec).unwrap();
        assert_eq!(report.total_params, model.params.total_count());
        // two 2x2 pools shrink 101x40 to 25x10
        let ds_row = &report.rows[2];
        assert_eq!((ds_row.h, ds_row.w), (25, 10));
        // repeated pooling compounds the jump: rf = 1 + (2+2) + (1 + 2) + 2*4
        assert_eq!(spec.receptive_field().0, 1 + 2 + 2 + 1 + 2 + 8);

        // repeat counts on se/gap/fc lines are rejected
        assert!(parse_spec(
            "bad",
            "conv 3 3 8 1 1 1\nse 0 0 8 0 0 2\ngap 0 0 8 0 0 1\nfc 0 0 12 0 0 1\n"
        )
        .is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = preset("DS-ResNet14").unwrap();
        let text = spec.to_string();
        let parsed = parse_spec("DS-ResNet14", &text).unwrap();
        assert_eq!(parsed, spec);
    }

    #[test]
    fn spec_parse_errors_name_line_numbers() {
        let err = parse_spec("x", "conv 3 3 64 1 1 1\nbogus 1 2 3 4 5 6\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_spec("x", "conv 3 3\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
