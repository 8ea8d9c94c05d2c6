use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Source;
use crate::checkpoint::Reader;
use crate::error::{Error, Result};
use crate::video::VideoTensor;
use crate::worldsim::{ActionScript, WorldState};

pub const MAGIC: &[u8; 4] = b"DWT1";
pub const VERSION: u16 = 1;

/// One aligned training/evaluation clip. Videos hold 8-bit-representable
/// values so serialization round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletRecord {
    pub id: String,
    pub interaction: VideoTensor,
    pub static_scene: VideoTensor,
    pub hand: VideoTensor,
    /// Binary silhouette, replicated over the three channels.
    pub hand_mask: VideoTensor,
    pub hand_params: Vec<[f32; 4]>,
    pub label: usize,
    pub seed: u64,
    pub source: Source,
    /// Scene at `t = 0` in its text form.
    pub scene: String,
    /// Camera and hand trajectories in their text form.
    pub script: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    id: String,
    label: usize,
    seed: u64,
    source: Source,
    scene: String,
    script: String,
}

impl TripletRecord {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.interaction.shape()
    }

    pub fn scene_state(&self) -> Result<WorldState> {
        WorldState::from_text(&self.scene)
    }

    pub fn action_script(&self) -> Result<ActionScript> {
        ActionScript::from_text(&self.script)
    }

    /// Checks that every video and the parameter track share `(F, H, W)`.
    pub fn check_alignment(&self) -> Result<()> {
        let s = self.interaction.shape();
        for (name, v) in [("static", &self.static_scene), ("hand", &self.hand), ("mask", &self.hand_mask)] {
            if v.shape() != s {
                return Err(Error::Shape(format!("{name} video {:?} differs from interaction {:?}", v.shape(), s)));
            }
        }
        if self.hand_params.len() != s.0 {
            return Err(Error::Shape(format!("{} hand parameter rows for {} frames", self.hand_params.len(), s.0)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_alignment()?;
        let (f, h, w) = self.shape();
        let meta = toml::to_string(&Meta {
            id: self.id.clone(),
            label: self.label,
            seed: self.seed,
            source: self.source,
            scene: self.scene.clone(),
            script: self.script.clone(),
        })
        .map_err(|e| Error::Malformed(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + 4 * f * h * w * 3 + f * 16 + meta.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [f, h, w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in [&self.interaction, &self.static_scene, &self.hand] {
            out.extend_from_slice(&v.to_u8());
        }
        out.extend(self.hand_mask.data().chunks_exact(3).map(|px| if px[0] > 0.0 { 255u8 } else { 0 }));
        for row in &self.hand_params {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("record shorter than its magic".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Version { found: version, supported: VERSION });
        }
        let (f, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let px = f
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Malformed("header dimensions overflow".into()))?;
        // Everything up to the metadata length field.
        let fixed = 18 + px * 10 + f * 16;
        if bytes.len() < fixed + 4 {
            return Err(Error::Truncated(format!("record needs at least {} bytes, has {}", fixed + 8, bytes.len())));
        }
        let meta_len = u32::from_le_bytes(bytes[fixed..fixed + 4].try_into().expect("4 bytes")) as usize;
        let total = fixed + 4 + meta_len + 4;
        if bytes.len() < total {
            return Err(Error::Truncated(format!("record needs {total} bytes, has {}", bytes.len())));
        }
        let (body, tail) = bytes[..total].split_at(total - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        if bytes.len() != total {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - total)));
        }

        let mut videos = Vec::with_capacity(3);
        for _ in 0..3 {
            videos.push(VideoTensor::from_u8(f, h, w, r.take(px * 3)?)?);
        }
        let mask_bytes = r.take(px)?;
        let mask: Vec<f32> = mask_bytes
            .iter()
            .flat_map(|&b| {
                let v = if b > 0 { 1.0 } else { 0.0 };
                [v, v, v]
            })
            .collect();
        let hand_mask = VideoTensor::from_vec(f, h, w, mask)?;
        let mut hand_params = Vec::with_capacity(f);
        for _ in 0..f {
            let mut row = [0.0f32; 4];
            for v in &mut row {
                *v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            }
            hand_params.push(row);
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Malformed("metadata is not UTF-8".into()))?;
        let meta: Meta = toml::from_str(text).map_err(|e| Error::Malformed(format!("record metadata: {e}")))?;
        let mut it = videos.into_iter();
        Ok(Self {
            id: meta.id,
            interaction: it.next().expect("three videos"),
            static_scene: it.next().expect("three videos"),
            hand: it.next().expect("three videos"),
            hand_mask,
            hand_params,
            label: meta.label,
            seed: meta.seed,
            source: meta.source,
            scene: meta.scene,
            script: meta.script,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

pub fn serialize_record(record: &TripletRecord, path: impl AsRef<Path>) -> Result<()> {
    record.save(path)
}

pub fn load_record(path: impl AsRef<Path>) -> Result<TripletRecord> {
    TripletRecord::from_bytes(&std::fs::read(path)?)
}
