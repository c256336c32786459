//! Self-describing binary checkpoints for networks, flow models, and
//! critics: a magic tag, a format version, layer widths, an activation tag,
//! kind-specific metadata, and the flat parameter array (f64, little endian).

use std::io::{Read, Write};
use std::path::Path;

use crate::critic::{CriticKind, CriticNet};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::net::{Activation, MlpParams};
use crate::optim::{AdamConfig, OptimizerState};
use crate::schedule::Schedule;

const MAGIC: &[u8; 4] = b"FMCK";
pub const FORMAT_VERSION: u32 = 1;

const KIND_MLP: u8 = 0;
const KIND_FLOW: u8 = 1;
const KIND_CRITIC: u8 = 2;

/// Checkpoint metadata, readable without reconstructing the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub kind: String,
    pub widths: Vec<usize>,
    pub activation: u8,
    pub schedule: Option<u8>,
    pub dim: Option<usize>,
    pub critic_kind: Option<u8>,
    pub param_count: usize,
}

enum Payload {
    Mlp,
    Flow { schedule: Schedule, dim: usize },
    Critic { kind: CriticKind },
}

fn write_record<W: Write>(w: &mut W, params: &MlpParams, payload: &Payload) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let kind = match payload {
        Payload::Mlp => KIND_MLP,
        Payload::Flow { .. } => KIND_FLOW,
        Payload::Critic { .. } => KIND_CRITIC,
    };
    w.write_all(&[kind, params.activation().tag()])?;
    w.write_all(&(params.widths().len() as u32).to_le_bytes())?;
    for &width in params.widths() {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    match payload {
        Payload::Mlp => {}
        Payload::Flow { schedule, dim } => {
            w.write_all(&[schedule.tag()])?;
            w.write_all(&(*dim as u32).to_le_bytes())?;
        }
        Payload::Critic { kind } => {
            w.write_all(&[kind.tag()])?;
        }
    }
    let flat = params.flat();
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    for v in flat {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct RecordHeader {
    kind: u8,
    activation: Activation,
    widths: Vec<usize>,
    schedule: Option<Schedule>,
    dim: Option<usize>,
    critic_kind: Option<CriticKind>,
}

fn read_header<R: Read>(r: &mut R) -> Result<RecordHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut kb = [0u8; 2];
    r.read_exact(&mut kb)?;
    let (kind, act_tag) = (kb[0], kb[1]);
    let activation = Activation::from_tag(act_tag)?;
    r.read_exact(&mut v4)?;
    let nw = u32::from_le_bytes(v4) as usize;
    if nw < 2 || nw > 64 {
        return Err(Error::Format(format!("implausible layer count {nw}")));
    }
    let mut widths = Vec::with_capacity(nw);
    for _ in 0..nw {
        r.read_exact(&mut v4)?;
        widths.push(u32::from_le_bytes(v4) as usize);
    }
    let mut schedule = None;
    let mut dim = None;
    let mut critic_kind = None;
    match kind {
        KIND_MLP => {}
        KIND_FLOW => {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            schedule = Some(Schedule::from_tag(b[0])?);
            r.read_exact(&mut v4)?;
            dim = Some(u32::from_le_bytes(v4) as usize);
        }
        KIND_CRITIC => {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            critic_kind = Some(CriticKind::from_tag(b[0])?);
        }
        other => return Err(Error::Format(format!("unknown record kind {other}"))),
    }
    Ok(RecordHeader {
        kind,
        activation,
        widths,
        schedule,
        dim,
        critic_kind,
    })
}

fn read_params<R: Read>(r: &mut R, header: &RecordHeader) -> Result<MlpParams> {
    let mut v8 = [0u8; 8];
    r.read_exact(&mut v8)?;
    let count = u64::from_le_bytes(v8) as usize;
    let mut params = MlpParams::zeros(&header.widths, header.activation)?;
    if count != params.param_count() {
        return Err(Error::Format(format!(
            "parameter count {count} does not match widths {:?}",
            header.widths
        )));
    }
    let mut flat = vec![0.0; count];
    for v in flat.iter_mut() {
        r.read_exact(&mut v8)?;
        *v = f64::from_le_bytes(v8);
    }
    params.set_flat(&flat)?;
    if !params.all_finite() {
        return Err(Error::Format("checkpoint holds non-finite parameters".into()));
    }
    Ok(params)
}

pub fn save_mlp(path: &Path, params: &MlpParams) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_record(&mut f, params, &Payload::Mlp)
}

pub fn save_flow(path: &Path, model: &FlowModel) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_record(
        &mut f,
        &model.net,
        &Payload::Flow {
            schedule: model.schedule,
            dim: model.dim,
        },
    )
}

pub fn save_critic(path: &Path, critic: &CriticNet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_record(&mut f, &critic.net, &Payload::Critic { kind: critic.kind })
}

pub fn load_mlp(path: &Path) -> Result<MlpParams> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut f)?;
    if header.kind != KIND_MLP {
        return Err(Error::Format("checkpoint is not a bare network".into()));
    }
    read_params(&mut f, &header)
}

pub fn load_flow(path: &Path) -> Result<FlowModel> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut f)?;
    if header.kind != KIND_FLOW {
        return Err(Error::Format("checkpoint is not a flow model".into()));
    }
    let params = read_params(&mut f, &header)?;
    FlowModel::new(header.dim.unwrap(), header.schedule.unwrap(), params)
}

pub fn load_critic(path: &Path, lr: f64) -> Result<CriticNet> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut f)?;
    if header.kind != KIND_CRITIC {
        return Err(Error::Format("checkpoint is not a critic".into()));
    }
    let params = read_params(&mut f, &header)?;
    let opt = OptimizerState::new(AdamConfig::with_lr(lr), params.param_count());
    Ok(CriticNet {
        net: params,
        kind: header.critic_kind.unwrap(),
        opt,
        trained_steps: 0,
        clamp_events: 0,
    })
}

/// Read metadata only.
pub fn inspect(path: &Path) -> Result<CheckpointMeta> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut f)?;
    let kind = match header.kind {
        KIND_MLP => "mlp",
        KIND_FLOW => "flow-model",
        KIND_CRITIC => "critic",
        _ => unreachable!(),
    };
    let mut count = 0;
    for l in 1..header.widths.len() {
        count += header.widths[l] * header.widths[l - 1] + header.widths[l];
    }
    Ok(CheckpointMeta {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        widths: header.widths.clone(),
        activation: header.activation.tag(),
        schedule: header.schedule.map(|s| s.tag()),
        dim: header.dim,
        critic_kind: header.critic_kind.map(|k| k.tag()),
        param_count: count,
    })
}
