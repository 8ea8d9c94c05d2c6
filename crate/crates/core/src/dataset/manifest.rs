use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::{Source, TripletRecord};
use crate::error::{Error, Result};

const HEADER: &str = "dwm-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Malformed(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: Source,
    pub split: Split,
    /// Hex SHA-256 of the serialized record.
    pub hash: String,
    /// Record file, relative to the manifest's directory.
    pub path: String,
}

/// Record index with content hashes and a synthetic mixing weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Probability of drawing a synthetic dynamic-camera record.
    pub weight: f64,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { entries: Vec::new(), weight: 1.0 }
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(record: &TripletRecord, split: Split) -> Result<ManifestEntry> {
        Ok(ManifestEntry {
            id: record.id.clone(),
            source: record.source,
            split,
            hash: content_hash(&record.to_bytes()?),
            path: format!("{}.dwt", record.id),
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn find(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Fails if an id appears twice (in particular, in two splits).
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Malformed(format!("record {} listed more than once", e.id)));
            }
        }
        Ok(())
    }

    /// Loads one record from `dir` and checks its hash.
    pub fn load(&self, dir: &Path, entry: &ManifestEntry) -> Result<TripletRecord> {
        let bytes = std::fs::read(dir.join(&entry.path))?;
        if content_hash(&bytes) != entry.hash {
            return Err(Error::HashMismatch(entry.id.clone()));
        }
        let rec = TripletRecord::from_bytes(&bytes)?;
        if rec.id != entry.id {
            return Err(Error::Malformed(format!("file {} holds record {}", entry.path, rec.id)));
        }
        Ok(rec)
    }

    /// Verifies every record hash under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        self.check_disjoint()?;
        for e in &self.entries {
            self.load(dir, e)?;
        }
        Ok(())
    }

    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<TripletRecord>> {
        self.split(split).map(|e| self.load(dir, e)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\nweight {}\n", self.weight);
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.id, e.source.name(), e.split, e.hash, e.path));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(HEADER) {
            return Err(Error::Malformed("missing manifest header".into()));
        }
        let weight = lines
            .next()
            .and_then(|l| l.strip_prefix("weight "))
            .and_then(|w| w.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Malformed("missing manifest weight".into()))?;
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let p: Vec<&str> = line.split('\t').collect();
            if p.len() != 5 {
                return Err(Error::Malformed(format!("manifest line {line:?}")));
            }
            entries.push(ManifestEntry {
                id: p[0].into(),
                source: p[1].parse()?,
                split: p[2].parse()?,
                hash: p[3].into(),
                path: p[4].into(),
            });
        }
        let m = Self { entries, weight };
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Concatenates a synthetic and a fixed-camera manifest with a synthetic
/// draw probability of `weight`.
pub fn mix_hybrid(m_syn: &Manifest, m_fix: &Manifest, weight: f64) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Config(format!("mixing weight {weight} outside [0, 1]")));
    }
    let mut entries = m_syn.entries.clone();
    entries.extend(m_fix.entries.iter().cloned());
    let m = Manifest { entries, weight };
    m.check_disjoint()?;
    Ok(m)
}

/// Weighted draws over a pool split by source.
#[derive(Debug, Clone)]
pub struct HybridSampler {
    syn: Vec<usize>,
    fix: Vec<usize>,
    weight: f64,
}

impl HybridSampler {
    /// `sources[i]` is the source of pool item `i`.
    pub fn new(sources: &[Source], weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::Config(format!("mixing weight {weight} outside [0, 1]")));
        }
        let syn: Vec<usize> = (0..sources.len()).filter(|&i| sources[i] != Source::FixedCam).collect();
        let fix: Vec<usize> = (0..sources.len()).filter(|&i| sources[i] == Source::FixedCam).collect();
        if (weight > 0.0 && syn.is_empty()) || (weight < 1.0 && fix.is_empty()) {
            return Err(Error::Invalid(format!(
                "weight {weight} needs records from a source that is absent ({} synthetic, {} fixed-camera)",
                syn.len(),
                fix.len()
            )));
        }
        Ok(Self { syn, fix, weight })
    }

    pub fn for_manifest(m: &Manifest, split: Split) -> Result<Self> {
        let sources: Vec<Source> = m.split(split).map(|e| e.source).collect();
        Self::new(&sources, m.weight)
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let pool = if rng.gen::<f64>() < self.weight { &self.syn } else { &self.fix };
        pool[rng.gen_range(0..pool.len())]
    }

    /// `count` draws from the stream of `epoch_seed`.
    pub fn draws(&self, epoch_seed: u64, count: usize) -> Vec<usize> {
        let mut rng = crate::rng::stream(epoch_seed, "hybrid/draws");
        (0..count).map(|_| self.draw(&mut rng)).collect()
    }
}
