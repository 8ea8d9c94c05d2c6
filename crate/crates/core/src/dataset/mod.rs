//! Training and evaluation corpora built from the simulator.
//!
//! Three sources exist: dynamic-camera synthetic clips with rendered static
//! videos, fixed-camera clips whose static video repeats a hand-free first
//! frame, and a held-out dynamic-camera set used only for evaluation.

mod manifest;
mod record;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{content_hash, mix_hybrid, HybridSampler, Manifest, ManifestEntry, Split};
pub use record::{load_record, serialize_record, TripletRecord};

use crate::error::{Error, Result};
use crate::rng;
use crate::video::VideoTensor;
use crate::worldsim::{
    hand_params_sequence, make_fixed_camera_static, render_hand_mask_video, render_view, rollout_triplet,
    sample_action_script, sample_scene, ActionScript, CameraMotion, Task, WorldConfig, WorldState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    SynDynamic,
    FixedCam,
    HeldOutDynamic,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::SynDynamic, Source::FixedCam, Source::HeldOutDynamic];

    pub fn name(self) -> &'static str {
        match self {
            Source::SynDynamic => "syn_dynamic",
            Source::FixedCam => "fixed_cam",
            Source::HeldOutDynamic => "heldout_dynamic",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            Source::SynDynamic => "syn",
            Source::FixedCam => "fix",
            Source::HeldOutDynamic => "hod",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Source::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Malformed(format!("unknown source {s:?}")))
    }
}

/// Relative task frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskMix {
    pub noop: f64,
    pub nav_only: f64,
    pub pick_place: f64,
    pub open_articulated: f64,
    pub multi_pick: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl TaskMix {
    /// Dynamic-camera mix; includes navigation-only clips.
    pub fn synthetic() -> Self {
        Self { noop: 0.1, nav_only: 0.3, pick_place: 0.35, open_articulated: 0.25, multi_pick: 0.0 }
    }

    /// Fixed-camera mix with multi-object manipulation.
    pub fn fixed_camera() -> Self {
        Self { noop: 0.0, nav_only: 0.0, pick_place: 0.35, open_articulated: 0.3, multi_pick: 0.35 }
    }

    pub fn held_out() -> Self {
        Self { noop: 0.0, nav_only: 0.25, pick_place: 0.3, open_articulated: 0.25, multi_pick: 0.2 }
    }

    pub fn only(task: Task) -> Self {
        let mut m = Self { noop: 0.0, nav_only: 0.0, pick_place: 0.0, open_articulated: 0.0, multi_pick: 0.0 };
        *m.weight_mut(task) = 1.0;
        m
    }

    fn weight_mut(&mut self, task: Task) -> &mut f64 {
        match task {
            Task::Noop => &mut self.noop,
            Task::NavOnly => &mut self.nav_only,
            Task::PickPlace => &mut self.pick_place,
            Task::OpenArticulated => &mut self.open_articulated,
            Task::MultiPick => &mut self.multi_pick,
        }
    }

    pub fn weight(&self, task: Task) -> f64 {
        let mut m = *self;
        *m.weight_mut(task)
    }

    pub fn validate(&self) -> Result<()> {
        let ws: Vec<f64> = Task::ALL.iter().map(|&t| self.weight(t)).collect();
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("task mix weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Task {
        let total: f64 = Task::ALL.iter().map(|&t| self.weight(t)).sum();
        let mut u = rng.gen::<f64>() * total;
        for t in Task::ALL {
            let w = self.weight(t);
            if u < w {
                return t;
            }
            u -= w;
        }
        *Task::ALL.iter().rev().find(|&&t| self.weight(t) > 0.0).expect("positive weight")
    }
}

/// Records kept in memory together with their manifest.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<TripletRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes every record to `dir` and the manifest to `dir/manifest_name`.
    pub fn write(&self, dir: &Path, manifest_name: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (r, e) in self.records.iter().zip(&self.manifest.entries) {
            r.save(dir.join(&e.path))?;
        }
        self.manifest.save(dir.join(manifest_name))
    }

    pub fn merge(mut self, other: Dataset) -> Result<Dataset> {
        self.records.extend(other.records);
        self.manifest.entries.extend(other.manifest.entries);
        self.manifest.check_disjoint()?;
        Ok(self)
    }
}

const MAX_ATTEMPTS: u64 = 32;

fn quantized(mut v: VideoTensor) -> VideoTensor {
    v.quantize_u8();
    v
}

/// Assembles a record from a scene and script.
pub fn record_from_script(
    id: String,
    scene: &WorldState,
    script: &ActionScript,
    seed: u64,
    source: Source,
    cfg: &WorldConfig,
) -> Result<TripletRecord> {
    let tri = rollout_triplet(scene, script, cfg)?;
    let static_scene = match source {
        Source::FixedCam => {
            let first = render_view(scene, script.camera_traj[0], None, cfg)?;
            make_fixed_camera_static(&VideoTensor::from_frames(&vec![first; script.len()])?)?
        }
        _ => tri.static_scene,
    };
    let rec = TripletRecord {
        id,
        interaction: quantized(tri.interaction),
        static_scene: quantized(static_scene),
        hand: quantized(tri.hand),
        hand_mask: render_hand_mask_video(script, cfg)?,
        hand_params: hand_params_sequence(script, cfg),
        label: script.label,
        seed,
        source,
        scene: scene.to_text()?,
        script: script.to_text()?,
    };
    rec.check_alignment()?;
    Ok(rec)
}

fn camera_for(source: Source, rng: &mut impl Rng) -> CameraMotion {
    match source {
        Source::FixedCam => CameraMotion::Fixed,
        Source::HeldOutDynamic => CameraMotion::Track,
        Source::SynDynamic => {
            if rng.gen::<bool>() {
                CameraMotion::Pan
            } else {
                CameraMotion::Track
            }
        }
    }
}

/// Builds the record for `seed`, redrawing scene and task when a draw is
/// infeasible.
pub fn build_record(seed: u64, source: Source, cfg: &WorldConfig, mix: &TaskMix) -> Result<TripletRecord> {
    let id = format!("{}-{seed:08}", source.id_prefix());
    let mut last_err = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut r = rng::stream(seed, &format!("record/{}/{attempt}", source.name()));
        let task = mix.draw(&mut r);
        let camera = camera_for(source, &mut r);
        let scene = match sample_scene(r.gen(), cfg) {
            Ok(s) => s,
            Err(e @ Error::Placement { .. }) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        match sample_action_script(&scene, r.gen(), task, camera, cfg) {
            Ok(script) => return record_from_script(id, &scene, &script, seed, source, cfg),
            Err(e @ Error::InfeasibleTask { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Invalid("no record attempts".into())))
}

fn build_split(
    n: usize,
    seed_base: u64,
    cfg: &WorldConfig,
    mix: &TaskMix,
    source: Source,
    split: Split,
) -> Result<Dataset> {
    cfg.validate()?;
    mix.validate()?;
    let mut ds = Dataset::default();
    for i in 0..n as u64 {
        let rec = build_record(seed_base + i, source, cfg, mix)?;
        ds.manifest.entries.push(Manifest::entry(&rec, split)?);
        ds.records.push(rec);
    }
    ds.manifest.check_disjoint()?;
    Ok(ds)
}

/// `n` dynamic-camera synthetic triplets with seeds `seed_base..seed_base+n`.
pub fn build_synthetic_split(
    n: usize,
    seed_base: u64,
    cfg: &WorldConfig,
    mix: &TaskMix,
    split: Split,
) -> Result<Dataset> {
    build_split(n, seed_base, cfg, mix, Source::SynDynamic, split)
}

/// `n` fixed-camera clips whose static video repeats the hand-free first frame.
pub fn build_fixedcam_split(
    n: usize,
    seed_base: u64,
    cfg: &WorldConfig,
    mix: &TaskMix,
    split: Split,
) -> Result<Dataset> {
    build_split(n, seed_base, cfg, mix, Source::FixedCam, split)
}

/// `n` hand-tracking dynamic-camera clips reserved for evaluation.
pub fn build_heldout_split(n: usize, seed_base: u64, cfg: &WorldConfig, mix: &TaskMix) -> Result<Dataset> {
    build_split(n, seed_base, cfg, mix, Source::HeldOutDynamic, Split::Test)
}
