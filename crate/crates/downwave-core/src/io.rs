//! Binary persistence: gridded fields (WGF1), coefficient tensors (WCT1),
//! 8-bit PGM export for visual inspection, and self-describing training
//! checkpoints (WCK1). All multi-byte values are little-endian; all float
//! payloads are 32-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::{GridField, NormStats, DEFAULT_VALUE_MAX};
use crate::model::{ArchDescriptor, DenoiserParams, GradStore, ParamId, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::train::{AdamState, TrainConfig};
use crate::wavelet::CoeffTensor;

const WGF1_MAGIC: &[u8; 4] = b"WGF1";
const WCT1_MAGIC: &[u8; 4] = b"WCT1";
const WCK1_MAGIC: &[u8; 4] = b"WCK1";
const WCK1_VERSION: u32 = 1;

/// Hard cap on element counts read from headers, to fail fast on corrupt
/// files instead of attempting absurd allocations.
const MAX_ELEMENTS: u64 = 1 << 30;

// =========================================================================
// Little-endian primitives
// =========================================================================

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_f32_slice(w: &mut impl Write, data: impl Iterator<Item = f32>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(4096);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
        if buf.len() >= 4096 {
            w.write_all(&buf)?;
            buf.clear();
        }
    }
    w.write_all(&buf)
}

fn read_f32_vec(r: &mut impl Read, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn expect_eof(r: &mut impl Read, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(CoreError::Format(format!("{what}: trailing bytes after payload"))),
    }
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(CoreError::Format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn check_finite(values: &[f32], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Format(format!("{what}: non-finite float in payload")));
    }
    Ok(())
}

// =========================================================================
// WGF1 — gridded fields
// =========================================================================

/// 16-byte header (magic, u32 height, u32 width, u32 reserved) followed by
/// row-major f32 values.
pub fn write_wgf1(path: &Path, field: &GridField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WGF1_MAGIC)?;
    write_u32(&mut w, field.height() as u32)?;
    write_u32(&mut w, field.width() as u32)?;
    write_u32(&mut w, 0)?;
    write_f32_slice(&mut w, field.values().iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn read_wgf1(path: &Path) -> Result<GridField> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, WGF1_MAGIC, "WGF1")?;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let _reserved = read_u32(&mut r)?;
    if h == 0 || w == 0 || (h as u64) * (w as u64) > MAX_ELEMENTS {
        return Err(CoreError::Format(format!("WGF1: implausible dims {h}x{w}")));
    }
    let values = read_f32_vec(&mut r, h * w)?;
    expect_eof(&mut r, "WGF1")?;
    check_finite(&values, "WGF1")?;
    let arr = Array2::from_shape_vec((h, w), values).expect("length checked");
    GridField::new(arr, DEFAULT_VALUE_MAX)
}

// =========================================================================
// WCT1 — coefficient tensors
// =========================================================================

/// Header (magic, u32 level, u32 base_height, u32 base_width) followed by
/// channel-major row-major f32 coefficients.
pub fn write_wct1(path: &Path, coeffs: &CoeffTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WCT1_MAGIC)?;
    write_u32(&mut w, coeffs.level as u32)?;
    write_u32(&mut w, coeffs.base_height as u32)?;
    write_u32(&mut w, coeffs.base_width as u32)?;
    write_f32_slice(&mut w, coeffs.data.iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn read_wct1(path: &Path) -> Result<CoeffTensor> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, WCT1_MAGIC, "WCT1")?;
    let level = read_u32(&mut r)? as usize;
    let bh = read_u32(&mut r)? as usize;
    let bw = read_u32(&mut r)? as usize;
    if level == 0 || level > 16 || bh == 0 || bw == 0 {
        return Err(CoreError::Format(format!(
            "WCT1: implausible header (level {level}, base {bh}x{bw})"
        )));
    }
    let div = 1usize << level;
    if bh % div != 0 || bw % div != 0 {
        return Err(CoreError::Format(format!(
            "WCT1: base dims {bh}x{bw} not divisible by 2^{level}"
        )));
    }
    let channels = 4usize.pow(level as u32);
    let (ph, pw) = (bh / div, bw / div);
    if (channels as u64) * (ph as u64) * (pw as u64) > MAX_ELEMENTS {
        return Err(CoreError::Format("WCT1: implausible payload size".into()));
    }
    let values = read_f32_vec(&mut r, channels * ph * pw)?;
    expect_eof(&mut r, "WCT1")?;
    check_finite(&values, "WCT1")?;
    let data = Array3::from_shape_vec((channels, ph, pw), values).expect("length checked");
    CoeffTensor::new(level, bh, bw, data)
}

// =========================================================================
// PGM export
// =========================================================================

/// Binary 8-bit PGM (P5) with values mapped linearly from [0, value_max] to
/// [0, 255]; out-of-range values clamp. Write-only by design.
pub fn write_pgm(path: &Path, field: &GridField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", field.width(), field.height())?;
    let scale = 255.0 / field.value_max();
    let bytes: Vec<u8> = field
        .values()
        .iter()
        .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

// =========================================================================
// WCK1 — training checkpoints
// =========================================================================

/// Everything needed to sample from or exactly resume a training run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub adam: AdamState,
    pub stats: NormStats,
    pub schedule: NoiseSchedule,
    pub transform_name: String,
    pub factor: usize,
    pub hr_dims: (usize, usize),
    pub train_config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    arch: ArchDescriptor,
    stats: NormStats,
    schedule: NoiseSchedule,
    transform: String,
    factor: usize,
    hr_height: usize,
    hr_width: usize,
    train_config: TrainConfig,
    step: u64,
    tensors: Vec<TensorInfo>,
}

/// Layout: magic, u32 version, u64 meta length, JSON meta, then four f32
/// sections in registration order — weights, EMA weights, Adam first and
/// second moments.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let store = &ckpt.params.store;
    let tensors: Vec<TensorInfo> = (0..store.len())
        .map(|i| {
            let id = ParamId(i);
            TensorInfo {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
            }
        })
        .collect();
    let meta = CheckpointMeta {
        version: WCK1_VERSION,
        arch: ckpt.params.arch.clone(),
        stats: ckpt.stats,
        schedule: ckpt.schedule,
        transform: ckpt.transform_name.clone(),
        factor: ckpt.factor,
        hr_height: ckpt.hr_dims.0,
        hr_width: ckpt.hr_dims.1,
        train_config: ckpt.train_config.clone(),
        step: ckpt.adam.step,
        tensors,
    };
    let meta_bytes =
        serde_json::to_vec(&meta).map_err(|e| CoreError::Format(format!("checkpoint meta: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WCK1_MAGIC)?;
    write_u32(&mut w, WCK1_VERSION)?;
    write_u64(&mut w, meta_bytes.len() as u64)?;
    w.write_all(&meta_bytes)?;
    for i in 0..store.len() {
        write_f32_slice(&mut w, store.get(ParamId(i)).iter().copied())?;
    }
    for i in 0..store.len() {
        write_f32_slice(&mut w, ckpt.params.ema.get(ParamId(i)).iter().copied())?;
    }
    for i in 0..store.len() {
        write_f32_slice(&mut w, ckpt.adam.m.get(ParamId(i)).iter().copied())?;
    }
    for i in 0..store.len() {
        write_f32_slice(&mut w, ckpt.adam.v.get(ParamId(i)).iter().copied())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, WCK1_MAGIC, "WCK1")?;
    let version = read_u32(&mut r)?;
    if version != WCK1_VERSION {
        return Err(CoreError::Format(format!(
            "WCK1: unsupported version {version} (expected {WCK1_VERSION})"
        )));
    }
    let meta_len = read_u64(&mut r)?;
    if meta_len > MAX_ELEMENTS {
        return Err(CoreError::Format("WCK1: implausible meta length".into()));
    }
    let mut meta_bytes = vec![0u8; meta_len as usize];
    r.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| CoreError::Format(format!("WCK1 meta: {e}")))?;
    meta.arch
        .validate()
        .map_err(|e| CoreError::Format(format!("WCK1 arch: {e}")))?;

    let read_store = |r: &mut BufReader<File>| -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for info in &meta.tensors {
            let count: usize = info.shape.iter().product();
            if count as u64 > MAX_ELEMENTS {
                return Err(CoreError::Format(format!(
                    "WCK1: tensor {} implausibly large",
                    info.name
                )));
            }
            let values = read_f32_vec(r, count)?;
            let arr = ArrayD::from_shape_vec(IxDyn(&info.shape), values)
                .map_err(|e| CoreError::Format(format!("WCK1 tensor {}: {e}", info.name)))?;
            store.register(info.name.clone(), arr);
        }
        Ok(store)
    };

    let store = read_store(&mut r)?;
    let ema = read_store(&mut r)?;
    let m_store = read_store(&mut r)?;
    let v_store = read_store(&mut r)?;
    expect_eof(&mut r, "WCK1")?;

    // The architecture must reproduce exactly the stored tensor layout.
    let mut scratch = ParamStore::<f32>::new();
    crate::model::UNet::new(&meta.arch, &mut scratch, &mut crate::rng::stream(0, "model-init", 0))?;
    if scratch.len() != store.len() {
        return Err(CoreError::Format(format!(
            "WCK1: architecture implies {} tensors, file holds {}",
            scratch.len(),
            store.len()
        )));
    }
    for i in 0..scratch.len() {
        let id = ParamId(i);
        if scratch.name(id) != store.name(id) || scratch.get(id).shape() != store.get(id).shape() {
            return Err(CoreError::Format(format!(
                "WCK1: tensor {i} is {} {:?}, architecture implies {} {:?}",
                store.name(id),
                store.get(id).shape(),
                scratch.name(id),
                scratch.get(id).shape()
            )));
        }
    }

    let mut m = GradStore::zeros_like(&store);
    let mut v = GradStore::zeros_like(&store);
    for i in 0..store.len() {
        let id = ParamId(i);
        m.get_mut(id).assign(m_store.get(id));
        v.get_mut(id).assign(v_store.get(id));
    }

    Ok(Checkpoint {
        params: DenoiserParams {
            arch: meta.arch,
            store,
            ema,
        },
        adam: AdamState {
            m,
            v,
            step: meta.step,
        },
        stats: meta.stats,
        schedule: meta.schedule,
        transform_name: meta.transform,
        factor: meta.factor,
        hr_dims: (meta.hr_height, meta.hr_width),
        train_config: meta.train_config,
    })
}

// =========================================================================
// Tests
// =========================================================================
