//! Checkpoint files: 8-byte magic, length-prefixed JSON metadata, then raw
//! little-endian f64 tensors in declaration order (parameters, optional
//! momentum buffers, optional SWA average).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use advlab_core::train::{OptimizerState, SwaState, TrainState};
use advlab_core::{init_model, Activation, Model, ModelSpec, Tensor};

use crate::error::{io_err, CliError};

pub const MAGIC: &[u8; 8] = b"ADVLAB01";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub metric_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwaMeta {
    pub count: usize,
    pub start_epoch: usize,
    /// Whether average tensors follow the momentum buffers; false before
    /// the first SWA update.
    pub has_average: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub activation: Activation,
    /// Next epoch to run when resuming; equals epochs for a finished run.
    pub epoch: usize,
    pub config_digest: String,
    pub seeds: Seeds,
    pub param_shapes: Vec<Vec<usize>>,
    pub has_optimizer: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub swa: Option<SwaMeta>,
}

/// FNV-1a over the resolved config text; checked on load with a warning
/// (not an error) so checkpoints stay usable across compatible configs.
pub fn digest(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.write_f64::<LittleEndian>(*v).expect("vec write");
    }
}

fn read_tensor(input: &mut &[u8], shape: &[usize]) -> Result<Tensor, CliError> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(
            input
                .read_f64::<LittleEndian>()
                .map_err(|_| CliError::Config("checkpoint truncated".into()))?,
        );
    }
    Tensor::new(shape.to_vec(), data).map_err(|e| CliError::Config(e.to_string()))
}

pub fn save_checkpoint(
    path: &Path,
    state: &TrainState,
    activation: Activation,
    config_digest: &str,
    seeds: &Seeds,
    include_optimizer: bool,
) -> Result<(), CliError> {
    let params = state.model.params();
    let meta = CheckpointMeta {
        model: state.model.spec().clone(),
        activation,
        epoch: state.epoch,
        config_digest: config_digest.to_string(),
        seeds: seeds.clone(),
        param_shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        has_optimizer: include_optimizer,
        momentum: state.opt.momentum,
        weight_decay: state.opt.weight_decay,
        lr: state.opt.lr,
        swa: state.swa.as_ref().filter(|_| include_optimizer).map(|s| SwaMeta {
            count: s.count,
            start_epoch: s.start_epoch,
            has_average: !s.average.is_empty(),
        }),
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| CliError::Io(e.to_string()))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes
        .write_u64::<LittleEndian>(meta_json.len() as u64)
        .expect("vec write");
    bytes.extend_from_slice(&meta_json);
    for p in &params {
        write_tensor(&mut bytes, p);
    }
    if include_optimizer {
        for b in &state.opt.buffers {
            write_tensor(&mut bytes, b);
        }
        if let Some(swa) = &state.swa {
            // Either all shapes or none; count 0 means none.
            for a in &swa.average {
                write_tensor(&mut bytes, a);
            }
        }
    }

    let mut f = std::fs::File::create(path).map_err(|e| io_err("cannot create", path, e))?;
    f.write_all(&bytes).map_err(|e| io_err("cannot write", path, e))?;
    Ok(())
}

/// Convenience wrapper for model-only snapshots (best / SWA checkpoints).
pub fn save_model_checkpoint(
    path: &Path,
    model: &Model,
    epoch: usize,
    activation: Activation,
    config_digest: &str,
    seeds: &Seeds,
) -> Result<(), CliError> {
    let state = TrainState {
        model: model.clone(),
        opt: OptimizerState::new(model, 0.0, 0.0, 0.0),
        swa: None,
        epoch,
    };
    save_checkpoint(path, &state, activation, config_digest, seeds, false)
}

pub fn load_checkpoint(
    path: &Path,
    expected_digest: Option<&str>,
) -> Result<(TrainState, CheckpointMeta), CliError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err("cannot read", path, e))?;

    if bytes.len() < MAGIC.len() + 8 {
        return Err(CliError::Config("checkpoint truncated".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CliError::Config(format!(
            "checkpoint {}: bad magic (version mismatch or not a checkpoint)",
            path.display()
        )));
    }
    let mut rest = &bytes[MAGIC.len()..];
    let meta_len = rest.read_u64::<LittleEndian>().expect("length checked") as usize;
    if rest.len() < meta_len {
        return Err(CliError::Config("checkpoint truncated".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&rest[..meta_len])
        .map_err(|e| CliError::Config(format!("checkpoint metadata: {e}")))?;
    let mut rest = &rest[meta_len..];

    if let Some(expected) = expected_digest {
        if expected != meta.config_digest {
            eprintln!(
                "warning: checkpoint config digest {} does not match current config {}",
                meta.config_digest, expected
            );
        }
    }

    let mut model = init_model(meta.model.clone(), meta.activation, 0)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if meta.param_shapes.len() != model.params().len() {
        return Err(CliError::Config(
            "checkpoint parameter count does not match model spec".into(),
        ));
    }
    let mut params = Vec::with_capacity(meta.param_shapes.len());
    for shape in &meta.param_shapes {
        params.push(read_tensor(&mut rest, shape)?);
    }
    model.set_params(&params);

    let mut opt = OptimizerState::new(&model, meta.momentum, meta.weight_decay, meta.lr);
    let mut swa = None;
    if meta.has_optimizer {
        let mut buffers = Vec::with_capacity(meta.param_shapes.len());
        for shape in &meta.param_shapes {
            buffers.push(read_tensor(&mut rest, shape)?);
        }
        opt.buffers = buffers;
        if let Some(sm) = &meta.swa {
            let mut average = Vec::new();
            if sm.has_average {
                for shape in &meta.param_shapes {
                    average.push(read_tensor(&mut rest, shape)?);
                }
            }
            swa = Some(SwaState {
                average,
                count: sm.count,
                start_epoch: sm.start_epoch,
            });
        }
    }
    if !rest.is_empty() {
        return Err(CliError::Config(
            "checkpoint has trailing bytes; refusing to load".into(),
        ));
    }

    let epoch = meta.epoch;
    Ok((TrainState { model, opt, swa, epoch }, meta))
}
