//! Deterministic 2D raster world with an egocentric crop camera and a
//! two-finger hand.
//!
//! A scene is a background raster plus a list of objects. Objects are
//! either free (they follow a grasping hand) or articulated (a panel slides
//! along an axis when its handle is dragged). The camera is an integer
//! crop window into the world raster.

mod dynamics;
mod render;
mod rollout;
mod scene;
mod script;

pub use dynamics::step_world;
pub use render::{
    hand_params_sequence, hand_sprite_pixels, render_hand_mask_video, render_hand_video, render_view, HandPixel,
};
pub use rollout::{make_fixed_camera_static, rollout_triplet, Triplet};
pub use scene::{sample_scene, BackgroundSpec, Decoration};
pub use script::{sample_action_script, CameraMotion, Task};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rgb = [f32; 3];

/// Axis-aligned integer rectangle in world (or view) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl Rect {
    pub fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        Self { x, y, w, h }
    }

    pub fn contains(&self, px: i32, py: i32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn translate(&self, dx: i32, dy: i32) -> Self {
        Self { x: self.x + dx, y: self.y + dy, ..*self }
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }

    pub fn inside(&self, outer: &Rect) -> bool {
        self.x >= outer.x
            && self.y >= outer.y
            && self.x + self.w <= outer.x + outer.w
            && self.y + self.h <= outer.y + outer.h
    }

    /// Smallest rectangle covering both.
    pub fn union(&self, other: &Rect) -> Rect {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = (self.x + self.w).max(other.x + other.w);
        let y1 = (self.y + self.h).max(other.y + other.h);
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn center(&self) -> (i32, i32) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }
}

/// Slide direction of an articulated panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn unit(self) -> (i32, i32) {
        match self {
            Axis::X => (1, 0),
            Axis::Y => (0, 1),
        }
    }
}

/// Geometry and colors of the two-finger hand sprite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandSprite {
    pub finger_width: i32,
    pub finger_length: i32,
    /// Gap between the fingers at aperture 0.
    pub gap_base: i32,
    /// Extra gap at aperture 1; the gap is `gap_base + round(aperture * gap_span)`.
    pub gap_span: i32,
    pub open_color: Rgb,
    pub closed_color: Rgb,
    /// Color of the fingertip row.
    pub tip_color: Rgb,
}

impl HandSprite {
    pub fn gap(&self, aperture: f32) -> i32 {
        self.gap_base + (aperture.clamp(0.0, 1.0) * self.gap_span as f32).round() as i32
    }

    /// Finger color for the given aperture, snapped to the 8-bit grid.
    pub fn body_color(&self, aperture: f32) -> Rgb {
        let a = aperture.clamp(0.0, 1.0);
        let mut c = [0.0; 3];
        for (k, v) in c.iter_mut().enumerate() {
            let raw = self.closed_color[k] + a * (self.open_color[k] - self.closed_color[k]);
            *v = snap(raw);
        }
        c
    }
}

fn snap(v: f32) -> f32 {
    crate::video::dequantize(crate::video::quantize(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub world_size: usize,
    pub view_size: usize,
    pub num_frames: usize,
    /// Object colors.
    pub palette: Vec<Rgb>,
    pub object_count_range: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub object_extent_range: (usize, usize),
    /// Probability that a placed object is articulated.
    pub articulated_fraction: f64,
    /// Grasp starts when the aperture drops below this value.
    pub grasp_close: f32,
    /// Grasp ends when the aperture rises above this value.
    pub grasp_open: f32,
    pub max_camera_step: i32,
    pub placement_attempts: usize,
    pub hand: HandSprite,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            world_size: 128,
            view_size: 64,
            num_frames: 16,
            palette: default_palette(),
            object_count_range: (1, 3),
            object_extent_range: (8, 18),
            articulated_fraction: 0.35,
            grasp_close: 0.2,
            grasp_open: 0.5,
            max_camera_step: 3,
            placement_attempts: 200,
            hand: HandSprite {
                finger_width: 3,
                finger_length: 12,
                gap_base: 2,
                gap_span: 6,
                open_color: [0.96, 0.80, 0.67],
                closed_color: [0.78, 0.47, 0.35],
                tip_color: [0.55, 0.25, 0.20],
            },
        }
    }
}

impl WorldConfig {
    /// A 32x32 world seen through a 16x16 viewport for 8 frames; small
    /// enough to train every model on one CPU core in minutes.
    pub fn compact() -> Self {
        Self {
            world_size: 32,
            view_size: 16,
            num_frames: 8,
            object_count_range: (1, 3),
            object_extent_range: (3, 5),
            hand: HandSprite { finger_width: 1, finger_length: 4, gap_base: 1, gap_span: 2, ..Self::default().hand },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("worldsim: {m}")));
        if self.view_size == 0 || self.view_size > self.world_size {
            return fail("view_size must be in 1..=world_size");
        }
        if self.num_frames < 2 {
            return fail("num_frames must be at least 2");
        }
        if self.palette.is_empty() {
            return fail("palette is empty");
        }
        if self.palette.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return fail("palette entries must lie in [0,1]");
        }
        let (lo, hi) = self.object_count_range;
        if lo > hi {
            return fail("object_count_range min exceeds max");
        }
        let (elo, ehi) = self.object_extent_range;
        if elo < 2 || elo > ehi || ehi > self.world_size {
            return fail("object_extent_range must satisfy 2 <= min <= max <= world_size");
        }
        if !(0.0..=1.0).contains(&self.articulated_fraction) {
            return fail("articulated_fraction must lie in [0,1]");
        }
        if !(self.grasp_close < self.grasp_open) {
            return fail("grasp_close must be below grasp_open");
        }
        if self.max_camera_step < 0 {
            return fail("max_camera_step must be non-negative");
        }
        let hand = &self.hand;
        if hand.finger_width < 1 || hand.finger_length < 1 || hand.gap_base < 0 || hand.gap_span < 0 {
            return fail("hand sprite dimensions must be positive");
        }
        for c in [hand.open_color, hand.closed_color, hand.tip_color] {
            // Hand masks are derived from nonzero hand-video pixels.
            if c.iter().any(|v| !(1.0 / 255.0..=1.0).contains(v)) {
                return fail("hand colors must lie in [1/255, 1]");
            }
        }
        Ok(())
    }

    pub fn world_rect(&self) -> Rect {
        Rect::new(0, 0, self.world_size as i32, self.world_size as i32)
    }

    /// Position used for a hand that is out of sight for the whole clip.
    pub fn offscreen_position(&self) -> (i32, i32) {
        let far = -4 * self.world_size as i32;
        (far, far)
    }
}

fn default_palette() -> Vec<Rgb> {
    [
        [0.85, 0.20, 0.20],
        [0.20, 0.65, 0.25],
        [0.20, 0.35, 0.85],
        [0.90, 0.80, 0.15],
        [0.70, 0.25, 0.75],
        [0.15, 0.75, 0.80],
        [0.95, 0.55, 0.10],
        [0.45, 0.30, 0.15],
    ]
    .into_iter()
    .map(|c| c.map(snap))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectKind {
    Free,
    Articulated {
        /// Handle rectangle on the closed panel; it moves with the panel.
        handle: Rect,
        axis: Axis,
        max_offset: i32,
        interior_color: Rgb,
        handle_color: Rgb,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    #[serde(flatten)]
    pub kind: ObjectKind,
    pub anchor: (i32, i32),
    pub extent: (i32, i32),
    pub color: Rgb,
}

impl ObjectSpec {
    pub fn body(&self) -> Rect {
        Rect::new(self.anchor.0, self.anchor.1, self.extent.0, self.extent.1)
    }

    pub fn is_articulated(&self) -> bool {
        matches!(self.kind, ObjectKind::Articulated { .. })
    }

    /// Area touched by the object over its whole range of motion for
    /// articulated objects, or its footprint at rest for free ones.
    pub fn swept(&self) -> Rect {
        match &self.kind {
            ObjectKind::Free => self.body(),
            ObjectKind::Articulated { axis, max_offset, .. } => {
                let (ux, uy) = axis.unit();
                self.body().union(&self.body().translate(ux * max_offset, uy * max_offset))
            }
        }
    }
}

/// Free objects carry a position offset; articulated ones an opening
/// fraction in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Pose {
    Offset { dx: i32, dy: i32 },
    Opening { s: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectState {
    pub spec: ObjectSpec,
    pub pose: Pose,
}

impl ObjectState {
    pub fn at_rest(spec: ObjectSpec) -> Self {
        let pose = match spec.kind {
            ObjectKind::Free => Pose::Offset { dx: 0, dy: 0 },
            ObjectKind::Articulated { .. } => Pose::Opening { s: 0.0 },
        };
        Self { spec, pose }
    }

    /// Panel displacement in pixels (articulated) or zero.
    pub fn panel_shift(&self) -> (i32, i32) {
        match (&self.spec.kind, self.pose) {
            (ObjectKind::Articulated { axis, max_offset, .. }, Pose::Opening { s }) => {
                let d = (s * *max_offset as f32).round() as i32;
                let (ux, uy) = axis.unit();
                (ux * d, uy * d)
            }
            _ => (0, 0),
        }
    }

    /// Footprint of a free object at its current position.
    pub fn footprint(&self) -> Rect {
        match self.pose {
            Pose::Offset { dx, dy } => self.spec.body().translate(dx, dy),
            Pose::Opening { .. } => self.spec.body(),
        }
    }

    /// Region in which a closing hand grabs this object.
    pub fn grab_region(&self) -> Rect {
        match &self.spec.kind {
            ObjectKind::Free => self.footprint(),
            ObjectKind::Articulated { handle, .. } => {
                let (sx, sy) = self.panel_shift();
                handle.translate(sx, sy)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandState {
    pub position: (i32, i32),
    /// 0 = closed, 1 = fully open.
    pub aperture: f32,
}

impl HandState {
    pub fn new(x: i32, y: i32, aperture: f32) -> Self {
        Self { position: (x, y), aperture: aperture.clamp(0.0, 1.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Top-left corner of the viewport in world coordinates.
    pub offset: (i32, i32),
}

impl CameraPose {
    pub fn new(x: i32, y: i32) -> Self {
        Self { offset: (x, y) }
    }

    pub fn validate(&self, cfg: &WorldConfig) -> Result<()> {
        let max = (cfg.world_size - cfg.view_size) as i32;
        let (x, y) = self.offset;
        if x < 0 || y < 0 || x > max || y > max {
            return Err(Error::Invalid(format!(
                "camera offset ({x},{y}) puts the {v}px viewport outside the {w}px world",
                v = cfg.view_size,
                w = cfg.world_size
            )));
        }
        Ok(())
    }
}

/// Camera and hand trajectories for one clip, plus the action label that
/// stands in for a text prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionScript {
    pub camera_traj: Vec<CameraPose>,
    pub hand_traj: Vec<HandState>,
    pub label: usize,
    pub label_name: String,
}

impl ActionScript {
    pub fn validate(&self, cfg: &WorldConfig) -> Result<()> {
        let f = cfg.num_frames;
        if self.camera_traj.len() != f || self.hand_traj.len() != f {
            return Err(Error::Invalid(format!(
                "script has {} camera and {} hand entries, expected {f}",
                self.camera_traj.len(),
                self.hand_traj.len()
            )));
        }
        if self.label >= Task::ALL.len() {
            return Err(Error::Invalid(format!("label {} outside the vocabulary", self.label)));
        }
        for cam in &self.camera_traj {
            cam.validate(cfg)?;
        }
        if self.hand_traj.iter().any(|h| !(0.0..=1.0).contains(&h.aperture)) {
            return Err(Error::Invalid("hand aperture outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.hand_traj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hand_traj.is_empty()
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Malformed(e.to_string()))
    }
}

/// Full world state at one instant: the scene at rest plus current object
/// poses and the grasp attachment.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    size: usize,
    background_spec: BackgroundSpec,
    background: Arc<[f32]>,
    pub objects: Vec<ObjectState>,
    /// Index of the object held by the hand.
    pub attachment: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneText {
    world_size: usize,
    attachment: Option<usize>,
    background: BackgroundSpec,
    objects: Vec<ObjectState>,
}

impl WorldState {
    pub fn new(size: usize, background_spec: BackgroundSpec, objects: Vec<ObjectState>) -> Self {
        let background = background_spec.rasterize(size).into();
        Self { size, background_spec, background, objects, attachment: None }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `size x size x 3` background raster.
    pub fn background(&self) -> &[f32] {
        &self.background
    }

    pub fn background_spec(&self) -> &BackgroundSpec {
        &self.background_spec
    }

    pub fn to_text(&self) -> Result<String> {
        let text = SceneText {
            world_size: self.size,
            attachment: self.attachment,
            background: self.background_spec.clone(),
            objects: self.objects.clone(),
        };
        toml::to_string(&text).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let t: SceneText = toml::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        if let Some(a) = t.attachment {
            if a >= t.objects.len() {
                return Err(Error::Malformed(format!("attachment {a} names no object")));
            }
        }
        let mut s = Self::new(t.world_size, t.background, t.objects);
        s.attachment = t.attachment;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_compact_configs_validate() {
        WorldConfig::default().validate().unwrap();
        WorldConfig::compact().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = WorldConfig::compact();
        c.view_size = 64;
        assert!(c.validate().is_err());
        let mut c = WorldConfig::compact();
        c.num_frames = 1;
        assert!(c.validate().is_err());
        let mut c = WorldConfig::compact();
        c.palette.push([1.2, 0.0, 0.0]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn camera_bounds() {
        let c = WorldConfig::compact();
        assert!(CameraPose::new(0, 0).validate(&c).is_ok());
        assert!(CameraPose::new(16, 16).validate(&c).is_ok());
        assert!(CameraPose::new(17, 0).validate(&c).is_err());
        assert!(CameraPose::new(0, -1).validate(&c).is_err());
    }

    #[test]
    fn gap_scales_with_aperture() {
        let hand = WorldConfig::default().hand;
        assert_eq!(hand.gap(1.0) - hand.gap(0.0), hand.gap_span);
    }
}
