//! Full-state training checkpoints.
//!
//! Unlike the f32 network export, the training checkpoint stores parameters,
//! optimizer momentum, and every rng stream at full f64/bit fidelity, so a
//! resumed run reproduces an uninterrupted one exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{BatchSampler, SamplerState};
use crate::error::{Error, Result};
use crate::model::init_network;
use crate::util::RngSnapshot;

use super::{TrainConfig, TrainState};

const TRAIN_MAGIC: &[u8; 8] = b"RSEGTRN1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TrainHeader {
    version: u32,
    config: TrainConfig,
    step: u64,
    labeled_sampler: SamplerState,
    unlabeled_sampler: Option<SamplerState>,
    aux_rng: RngSnapshot,
    has_frozen_teacher: bool,
    param_count: usize,
    student_checksum: u64,
    teacher_checksum: u64,
}

fn write_f64_blob(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64_blob(bytes: &[u8], offset: &mut usize, len: usize, path: &Path) -> Result<Vec<f64>> {
    let need = len * 8;
    if bytes.len() < *offset + need {
        return Err(Error::Checkpoint(format!(
            "{} truncated: need {need} more bytes at offset {}",
            path.display(),
            offset
        )));
    }
    let out = bytes[*offset..*offset + need]
        .chunks_exact(8)
        .map(|chunk| f64::from_le_bytes(chunk.try_into().expect("chunk of 8")))
        .collect();
    *offset += need;
    Ok(out)
}

/// Persist the full semi-phase state.
pub fn checkpoint_save(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let header = TrainHeader {
        version: VERSION,
        config: cfg.clone(),
        step: state.step,
        labeled_sampler: state.labeled_sampler.state(),
        unlabeled_sampler: state.unlabeled_sampler.as_ref().map(|s| s.state()),
        aux_rng: RngSnapshot::capture(&state.aux_rng),
        has_frozen_teacher: state.frozen_teacher.is_some(),
        param_count: state.student.num_params(),
        student_checksum: state.student.checksum(),
        teacher_checksum: state.teacher.checksum(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;

    let mut blob = Vec::new();
    write_f64_blob(&mut blob, state.student.params());
    write_f64_blob(&mut blob, state.teacher.params());
    write_f64_blob(&mut blob, &state.momentum_buf);
    if let Some(frozen) = &state.frozen_teacher {
        write_f64_blob(&mut blob, frozen.params());
    }

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(TRAIN_MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&(json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&json).map_err(|e| Error::io(path, e))?;
    file.write_all(&blob).map_err(|e| Error::io(path, e))
}

/// Load a training checkpoint, requiring it to match `expected` exactly
/// (resuming under a different configuration is an error, not a reshape).
pub fn checkpoint_load(path: &Path, expected: &TrainConfig) -> Result<TrainState> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != TRAIN_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a training checkpoint (bad magic)",
            path.display()
        )));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + json_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: TrainHeader =
        serde_json::from_slice(&bytes[12..12 + json_len]).map_err(|e| Error::json(path, e))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} unsupported (expected {VERSION})",
            header.version
        )));
    }
    if &header.config != expected {
        return Err(Error::Checkpoint(
            "checkpoint was written under a different training configuration".into(),
        ));
    }

    let mut student = init_network(header.config.net.clone())?;
    let mut teacher = init_network(header.config.net.clone())?;
    if student.num_params() != header.param_count {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: header {}, config implies {}",
            header.param_count,
            student.num_params()
        )));
    }

    let mut offset = 12 + json_len;
    let n = header.param_count;
    let student_params = read_f64_blob(&bytes, &mut offset, n, path)?;
    let teacher_params = read_f64_blob(&bytes, &mut offset, n, path)?;
    let momentum_buf = read_f64_blob(&bytes, &mut offset, n, path)?;
    let frozen_teacher = if header.has_frozen_teacher {
        let params = read_f64_blob(&bytes, &mut offset, n, path)?;
        let mut net = init_network(header.config.net.clone())?;
        net.params_mut().copy_from_slice(&params);
        Some(net)
    } else {
        None
    };

    student.params_mut().copy_from_slice(&student_params);
    teacher.params_mut().copy_from_slice(&teacher_params);
    if student.checksum() != header.student_checksum
        || teacher.checksum() != header.teacher_checksum
    {
        return Err(Error::Checkpoint(
            "parameter blob does not match recorded checksums".into(),
        ));
    }

    Ok(TrainState {
        student,
        teacher,
        step: header.step,
        momentum_buf,
        labeled_sampler: BatchSampler::from_state(header.labeled_sampler),
        unlabeled_sampler: header.unlabeled_sampler.map(BatchSampler::from_state),
        aux_rng: header.aux_rng.restore(),
        frozen_teacher,
    })
}
