//! Checkpoint container: magic "W2SC-CKPT", version, step counter, named
//! f32 tensors, CRC32 trailer. Everything needed for bit-exact resume goes
//! in as a tensor: parameters, Adam moments, spectral-norm u vectors, and
//! the effective config (as encoded text).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::TrainError;
use crate::tensorcore::AdamState;
use crate::tensorcore::TensorData;

pub const CKPT_MAGIC: &[u8; 9] = b"W2SC-CKPT";
pub const CKPT_VERSION: u32 = 1;

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    table
}

pub fn crc32(data: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: BTreeMap<String, TensorData<f32>>,
}

impl Checkpoint {
    pub fn new(step: u64) -> Self {
        Checkpoint {
            step,
            tensors: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, name: &str, t: TensorData<f32>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn put_vec(&mut self, name: &str, v: &[f32]) {
        self.put(
            name,
            TensorData {
                shape: vec![v.len()],
                data: v.to_vec(),
            },
        );
    }

    pub fn put_scalar(&mut self, name: &str, v: f32) {
        self.put(name, TensorData::scalar(v));
    }

    pub fn get(&self, name: &str) -> Result<&TensorData<f32>, TrainError> {
        self.tensors
            .get(name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn set_config(&mut self, cfg: &RunConfig) {
        let text = cfg.to_text();
        let data: Vec<f32> = text.bytes().map(|b| b as f32).collect();
        self.put(
            "__config_text__",
            TensorData {
                shape: vec![data.len()],
                data,
            },
        );
    }

    pub fn config(&self) -> Result<RunConfig, TrainError> {
        let t = self.get("__config_text__")?;
        let bytes: Vec<u8> = t.data.iter().map(|&f| f as u8).collect();
        let text = String::from_utf8(bytes)
            .map_err(|e| TrainError::Checkpoint(format!("config text not utf-8: {e}")))?;
        let mut cfg = RunConfig::default();
        cfg.apply(&text)
            .map_err(|e| TrainError::Checkpoint(format!("bad config in checkpoint: {e}")))?;
        Ok(cfg)
    }

    pub fn set_adam(&mut self, prefix: &str, adam: &AdamState<f32>) {
        self.put_scalar(&format!("{prefix}.t"), adam.step as f32);
        for (name, (m, v)) in adam.moments.iter() {
            self.put_vec(&format!("{prefix}.m:{name}"), m);
            self.put_vec(&format!("{prefix}.v:{name}"), v);
        }
    }

    pub fn adam(&self, prefix: &str, beta1: f64, beta2: f64) -> Result<AdamState<f32>, TrainError> {
        let mut adam = AdamState::new(beta1, beta2);
        adam.step = self.get(&format!("{prefix}.t"))?.data[0] as u64;
        let m_prefix = format!("{prefix}.m:");
        for (name, t) in self.tensors.iter() {
            if let Some(param) = name.strip_prefix(&m_prefix) {
                let v = self.get(&format!("{prefix}.v:{param}"))?;
                adam
                    .moments
                    .insert(param.to_string(), (t.data.clone(), v.data.clone()));
            }
        }
        Ok(adam)
    }

    fn payload(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let payload = self.payload();
        let mut f = std::fs::File::create(path)?;
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&payload)?;
        f.write_all(&crc32(&payload).to_le_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < CKPT_MAGIC.len() + 4 || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let payload = &bytes[CKPT_MAGIC.len()..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32(payload) != stored {
            return Err(TrainError::Checkpoint("crc mismatch".into()));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], TrainError> {
            if *pos + n > payload.len() {
                return Err(TrainError::Checkpoint("truncated payload".into()));
            }
            let s = &payload[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| TrainError::Checkpoint(format!("bad tensor name: {e}")))?;
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut pos, n * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, TensorData { shape, data });
        }
        if pos != payload.len() {
            return Err(TrainError::Checkpoint("trailing bytes in payload".into()));
        }
        Ok(Checkpoint { step, tensors })
    }
}
