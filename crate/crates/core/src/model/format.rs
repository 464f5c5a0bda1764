//! The "DSRN" binary model file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DSRN" | version: u32 | name_len: u32 | name (UTF-8) | layer_count: u32
//! per layer:
//!   kind: u8 | m r n d_w d_h: 5 x u32 | rank: u8 | dims: rank x u32
//!   | weights: prod(dims) x f32 (row-major)
//! ```
//!
//! Every plan op is one record; ops without weights (activations, pooling,
//! shortcut markers) carry rank 0 and unused config fields are written as 0.
//! Weights are stored as IEEE-754 32-bit floats; the in-memory model uses 64
//! bits, so saving rounds once and a load/save round trip is byte-stable.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::tensor::Tensor;

use super::plan::{Plan, PlanOp};
use super::{Model, ModelParams};

pub(crate) const MAGIC: &[u8; 4] = b"DSRN";
pub(crate) const VERSION: u32 = 1;

const KIND_STANDARD_CONV: u8 = 0;
const KIND_DEPTHWISE_CONV: u8 = 1;
const KIND_POINTWISE_CONV: u8 = 2;
const KIND_SE_REDUCE: u8 = 3;
const KIND_SE_EXPAND: u8 = 4;
const KIND_AVG_POOL: u8 = 5;
const KIND_GLOBAL_AVG_POOL: u8 = 6;
const KIND_FULLY_CONNECTED: u8 = 7;
const KIND_RESIDUAL_SAVE: u8 = 8;
const KIND_RESIDUAL_ADD: u8 = 9;
const KIND_RELU: u8 = 10;

struct Record {
    kind: u8,
    config: [u32; 5], // m, r, n, d_w, d_h
    tensor: Option<(Vec<usize>, Vec<f64>)>,
}

fn push_record(out: &mut Vec<u8>, rec: &Record) {
    out.push(rec.kind);
    for v in rec.config {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &rec.tensor {
        None => out.push(0),
        Some((dims, data)) => {
            out.push(dims.len() as u8);
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
}

pub(crate) fn model_to_bytes(model: &Model) -> Vec<u8> {
    let mut records: Vec<Record> = Vec::new();
    let params = &model.params;
    for op in &model.plan.ops {
        let rec = match op {
            PlanOp::StandardConv { spec, param, .. } => Record {
                kind: KIND_STANDARD_CONV,
                config: [
                    spec.kernel_h as u32,
                    spec.kernel_w as u32,
                    spec.out_channels as u32,
                    spec.dilation_w as u32,
                    spec.dilation_h as u32,
                ],
                tensor: Some(tensor_parts(params.tensor(*param))),
            },
            PlanOp::DepthwiseConv { spec, param } => Record {
                kind: KIND_DEPTHWISE_CONV,
                config: [
                    spec.kernel_h as u32,
                    spec.kernel_w as u32,
                    spec.out_channels as u32,
                    spec.dilation_w as u32,
                    spec.dilation_h as u32,
                ],
                tensor: Some(tensor_parts(params.tensor(*param))),
            },
            PlanOp::PointwiseConv {
                out_channels,
                param,
                ..
            } => Record {
                kind: KIND_POINTWISE_CONV,
                config: [1, 1, *out_channels as u32, 1, 1],
                tensor: Some(tensor_parts(params.tensor(*param))),
            },
            PlanOp::Se {
                channels,
                w_reduce,
                w_expand,
                ..
            } => {
                records.push(Record {
                    kind: KIND_SE_REDUCE,
                    config: [0, 0, *channels as u32, 0, 0],
                    tensor: Some(tensor_parts(params.tensor(*w_reduce))),
                });
                Record {
                    kind: KIND_SE_EXPAND,
                    config: [0, 0, *channels as u32, 0, 0],
                    tensor: Some(tensor_parts(params.tensor(*w_expand))),
                }
            }
            PlanOp::AvgPool { window_h, window_w } => Record {
                kind: KIND_AVG_POOL,
                config: [*window_h as u32, *window_w as u32, 0, 0, 0],
                tensor: None,
            },
            PlanOp::GlobalAvgPool => Record {
                kind: KIND_GLOBAL_AVG_POOL,
                config: [0; 5],
                tensor: None,
            },
            PlanOp::FullyConnected { out_dim, param, .. } => Record {
                kind: KIND_FULLY_CONNECTED,
                config: [0, 0, *out_dim as u32, 0, 0],
                tensor: Some(tensor_parts(params.tensor(*param))),
            },
            PlanOp::ResidualSave => Record {
                kind: KIND_RESIDUAL_SAVE,
                config: [0; 5],
                tensor: None,
            },
            PlanOp::ResidualAdd => Record {
                kind: KIND_RESIDUAL_ADD,
                config: [0; 5],
                tensor: None,
            },
            PlanOp::Relu => Record {
                kind: KIND_RELU,
                config: [0; 5],
                tensor: None,
            },
        };
        records.push(rec);
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let name = model.name.as_bytes();
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in &records {
        push_record(&mut out, rec);
    }
    out
}

fn tensor_parts(t: &Tensor) -> (Vec<usize>, Vec<f64>) {
    (t.shape().to_vec(), t.data().to_vec())
}

pub(crate) fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                format: "DSRN",
                detail: format!("truncated while reading {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub(crate) fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            format: "DSRN",
            detail: "bad magic bytes (expected \"DSRN\")".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            format: "DSRN",
            detail: format!("unsupported version {version} (expected {VERSION})"),
        });
    }
    let name_len = r.u32("name length")? as usize;
    let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| Error::Format {
        format: "DSRN",
        detail: "model name is not valid UTF-8".into(),
    })?;
    let layer_count = r.u32("layer count")? as usize;

    let mut plan = Plan {
        ops: Vec::with_capacity(layer_count),
        param_names: Vec::new(),
        param_shapes: Vec::new(),
        input_channels: 0,
        num_classes: 0,
    };
    let mut tensors: Vec<Tensor> = Vec::new();
    let mut pending_se: Option<(usize, usize)> = None; // (channels, reduce param idx)
    let mut first_weighted_in: Option<usize> = None;

    for li in 0..layer_count {
        let kind = r.u8("record kind")?;
        let mut config = [0u32; 5];
        for c in &mut config {
            *c = r.u32("config int")?;
        }
        let rank = r.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dim")? as usize);
        }
        let count: usize = dims.iter().product();
        let tensor = if rank > 0 {
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f32("weight")? as f64);
            }
            Some(Tensor::from_vec(&dims, data)?)
        } else {
            None
        };

        let add_param = |t: Option<Tensor>,
                             name: String,
                             plan: &mut Plan,
                             tensors: &mut Vec<Tensor>|
         -> Result<usize> {
            let t = t.ok_or_else(|| Error::Format {
                format: "DSRN",
                detail: format!("record {li} ({name}) is missing its weight tensor"),
            })?;
            let idx = plan.add_param(name, t.shape().to_vec());
            tensors.push(t);
            Ok(idx)
        };

        if pending_se.is_some() && kind != KIND_SE_EXPAND {
            return Err(Error::Format {
                format: "DSRN",
                detail: format!("record {li}: SE reduce half not followed by its expand half"),
            });
        }

        match kind {
            KIND_STANDARD_CONV => {
                let t = tensor.ok_or_else(|| Error::Format {
                    format: "DSRN",
                    detail: format!("record {li}: standard conv without weights"),
                })?;
                if t.rank() != 4 {
                    return Err(Error::Format {
                        format: "DSRN",
                        detail: format!("record {li}: standard conv weights must be rank 4"),
                    });
                }
                let in_channels = t.shape()[1];
                first_weighted_in.get_or_insert(in_channels);
                let spec = ConvSpec::standard(
                    config[0] as usize,
                    config[1] as usize,
                    config[2] as usize,
                )
                .with_dilation(config[4] as usize, config[3] as usize);
                let param = add_param(Some(t), format!("conv{li}"), &mut plan, &mut tensors)?;
                plan.ops.push(PlanOp::StandardConv {
                    spec,
                    in_channels,
                    param,
                });
            }
            KIND_DEPTHWISE_CONV => {
                let spec = ConvSpec::depthwise(
                    config[0] as usize,
                    config[1] as usize,
                    config[2] as usize,
                )
                .with_dilation(config[4] as usize, config[3] as usize);
                let param = add_param(tensor, format!("dw{li}"), &mut plan, &mut tensors)?;
                first_weighted_in.get_or_insert(plan.param_shapes[param][0]);
                plan.ops.push(PlanOp::DepthwiseConv { spec, param });
            }
            KIND_POINTWISE_CONV => {
                let param = add_param(tensor, format!("pw{li}"), &mut plan, &mut tensors)?;
                let shape = plan.param_shapes[param].clone();
                if shape.len() != 2 {
                    return Err(Error::Format {
                        format: "DSRN",
                        detail: format!("record {li}: pointwise weights must be rank 2"),
                    });
                }
                first_weighted_in.get_or_insert(shape[1]);
                plan.ops.push(PlanOp::PointwiseConv {
                    in_channels: shape[1],
                    out_channels: shape[0],
                    param,
                });
            }
            KIND_SE_REDUCE => {
                let param = add_param(tensor, format!("se{li}.reduce"), &mut plan, &mut tensors)?;
                pending_se = Some((config[2] as usize, param));
            }
            KIND_SE_EXPAND => {
                let (channels, w_reduce) = pending_se.take().ok_or_else(|| Error::Format {
                    format: "DSRN",
                    detail: format!("record {li}: SE expand half without a preceding reduce"),
                })?;
                let w_expand =
                    add_param(tensor, format!("se{li}.expand"), &mut plan, &mut tensors)?;
                let bottleneck = plan.param_shapes[w_reduce][0];
                plan.ops.push(PlanOp::Se {
                    channels,
                    bottleneck,
                    w_reduce,
                    w_expand,
                });
            }
            KIND_AVG_POOL => plan.ops.push(PlanOp::AvgPool {
                window_h: config[0] as usize,
                window_w: config[1] as usize,
            }),
            KIND_GLOBAL_AVG_POOL => plan.ops.push(PlanOp::GlobalAvgPool),
            KIND_FULLY_CONNECTED => {
                let param = add_param(tensor, format!("fc{li}"), &mut plan, &mut tensors)?;
                let shape = plan.param_shapes[param].clone();
                if shape.len() != 2 {
                    return Err(Error::Format {
                        format: "DSRN",
                        detail: format!("record {li}: fully-connected weights must be rank 2"),
                    });
                }
                plan.num_classes = shape[0];
                plan.ops.push(PlanOp::FullyConnected {
                    in_dim: shape[1],
                    out_dim: shape[0],
                    param,
                });
            }
            KIND_RESIDUAL_SAVE => plan.ops.push(PlanOp::ResidualSave),
            KIND_RESIDUAL_ADD => plan.ops.push(PlanOp::ResidualAdd),
            KIND_RELU => plan.ops.push(PlanOp::Relu),
            other => {
                return Err(Error::Format {
                    format: "DSRN",
                    detail: format!("record {li}: unknown layer kind tag {other}"),
                })
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            format: "DSRN",
            detail: format!("{} trailing bytes after the last record", bytes.len() - r.pos),
        });
    }
    if pending_se.is_some() {
        return Err(Error::Format {
            format: "DSRN",
            detail: "file ends inside an SE record pair".into(),
        });
    }

    plan.input_channels = first_weighted_in.unwrap_or(1);
    plan.check()?;

    for op in &plan.ops {
        if let PlanOp::Se { bottleneck: 0, .. } = op {
            return Err(Error::Format {
                format: "DSRN",
                detail: "SE bottleneck of width 0".into(),
            });
        }
    }

    let names = plan.param_names.clone();
    Ok(Model {
        name,
        plan,
        params: ModelParams::new(tensors, names),
        spec: None,
    })
}

pub(crate) fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
