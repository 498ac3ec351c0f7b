//! Binary parameter checkpoints plus a TOML sidecar.
//!
//! Layout: `MWM1`, u32 format version, u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name, a u8 group tag, a u8 rank, one u32 per
//! dimension and the values as little-endian f32. All integers are
//! little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Group, ParamStore, Tensor};
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, WorldModel};

pub const MAGIC: &[u8; 4] = b"MWM1";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_params<W: Write>(mut out: W, params: &ParamStore<f32>) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {}", p.name)))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[p.group.tag(), 2])?;
        let (r, c) = p.value.shape();
        out.write_all(&(r as u32).to_le_bytes())?;
        out.write_all(&(c as u32).to_le_bytes())?;
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(buf: &[u8], pos: &mut usize) -> Result<[u8; N]> {
    let end = *pos + N;
    let bytes = buf.get(*pos..end).ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
    *pos = end;
    Ok(bytes.try_into().expect("length checked"))
}

pub fn read_params<R: Read>(mut input: R) -> Result<ParamStore<f32>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut pos = 0;
    if &take::<4>(&buf, &mut pos)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&buf, &mut pos)?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = u32::from_le_bytes(take(&buf, &mut pos)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&buf, &mut pos)?) as usize;
        let name = buf.get(pos..pos + len).ok_or_else(|| Error::Checkpoint("truncated name".into()))?;
        let name = std::str::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?.to_owned();
        pos += len;
        let [tag, rank] = take::<2>(&buf, &mut pos)?;
        let group = Group::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown group tag {tag}")))?;
        if !(1..=2).contains(&rank) {
            return Err(Error::Checkpoint(format!("unsupported rank {rank} for {name}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&buf, &mut pos)?) as usize);
        }
        let (r, c) = if rank == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            data.push(f32::from_le_bytes(take(&buf, &mut pos)?));
        }
        let value = Tensor::new(r, c, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.insert(&name, group, value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleKeys {
    #[serde(rename = "T")]
    pub steps: usize,
    pub kind: ScheduleKind,
    #[serde(rename = "T_prime")]
    pub sub_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub model: ModelConfig,
    pub diffusion: ScheduleKeys,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

/// Write `path` and its `.toml` sidecar.
pub fn save(path: &Path, model: &WorldModel<f32>, schedule: &ScheduleKeys) -> Result<()> {
    let mut bytes = Vec::new();
    write_params(&mut bytes, &model.params)?;
    fs::write(path, bytes)?;
    let side = Sidecar { model: model.config.clone(), diffusion: schedule.clone() };
    let text = toml::to_string(&side).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(WorldModel<f32>, ScheduleKeys)> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} not found", path.display())));
    }
    let text = fs::read_to_string(sidecar_path(path))
        .map_err(|e| Error::Checkpoint(format!("sidecar for {}: {e}", path.display())))?;
    let side: Sidecar = toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params = read_params(fs::File::open(path)?)?;
    Ok((WorldModel::with_params(side.model, params)?, side.diffusion))
}
