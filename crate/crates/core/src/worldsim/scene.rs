use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{snap, Axis, ObjectKind, ObjectSpec, ObjectState, Rect, Rgb, WorldConfig, WorldState};
use crate::error::{Error, Result};
use crate::rng;

/// Static decoration painted into the background raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decoration {
    pub rect: Rect,
    pub color: Rgb,
}

/// Parameters of the background: a vertical gradient modulated by a
/// checkerboard, plus static decorations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub top: Rgb,
    pub bottom: Rgb,
    pub checker_cell: u32,
    pub checker_amp: f32,
    pub decorations: Vec<Decoration>,
}

impl BackgroundSpec {
    /// Uniform gray background with no pattern.
    pub fn flat(gray: f32) -> Self {
        Self { top: [gray; 3], bottom: [gray; 3], checker_cell: 1, checker_amp: 0.0, decorations: vec![] }
    }

    pub fn rasterize(&self, size: usize) -> Vec<f32> {
        let mut out = vec![0.0; size * size * 3];
        let cell = self.checker_cell.max(1) as usize;
        for y in 0..size {
            let v = if size > 1 { y as f32 / (size - 1) as f32 } else { 0.0 };
            for x in 0..size {
                let sign = if ((x / cell) + (y / cell)).is_multiple_of(2) { 1.0 } else { -1.0 };
                let i = (y * size + x) * 3;
                for k in 0..3 {
                    let base = self.top[k] + v * (self.bottom[k] - self.top[k]);
                    out[i + k] = snap((base + sign * self.checker_amp).clamp(0.0, 1.0));
                }
            }
        }
        let bounds = Rect::new(0, 0, size as i32, size as i32);
        for d in &self.decorations {
            for y in d.rect.y.max(0)..(d.rect.y + d.rect.h).min(bounds.h) {
                for x in d.rect.x.max(0)..(d.rect.x + d.rect.w).min(bounds.w) {
                    let i = (y as usize * size + x as usize) * 3;
                    out[i..i + 3].copy_from_slice(&d.color.map(snap));
                }
            }
        }
        out
    }
}

fn muted<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> Rgb {
    let base = rng.gen_range(lo..hi);
    [0, 1, 2].map(|_| snap((base + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0)))
}

/// Samples the scene at `t = 0` for `seed`. Objects never overlap (their
/// full range of motion included) and lie inside the world.
pub fn sample_scene(seed: u64, cfg: &WorldConfig) -> Result<WorldState> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "scene");
    let size = cfg.world_size as i32;

    let unit = (size / 16).max(1);
    let mut decorations = Vec::new();
    for _ in 0..rng.gen_range(2..=5) {
        let w = rng.gen_range(unit..=2 * unit);
        let h = rng.gen_range(unit..=2 * unit);
        let rect = Rect::new(rng.gen_range(0..=size - w), rng.gen_range(0..=size - h), w, h);
        decorations.push(Decoration { rect, color: muted(&mut rng, 0.2, 0.4) });
    }
    let background = BackgroundSpec {
        top: muted(&mut rng, 0.45, 0.7),
        bottom: muted(&mut rng, 0.45, 0.7),
        checker_cell: (2 * unit) as u32,
        checker_amp: rng.gen_range(0.02..0.06),
        decorations,
    };

    let (lo, hi) = cfg.object_count_range;
    let count = rng.gen_range(lo..=hi);
    let (elo, ehi) = cfg.object_extent_range;
    let world = cfg.world_rect();
    let mut placed: Vec<ObjectSpec> = Vec::with_capacity(count);
    let mut attempts = 0;
    while placed.len() < count {
        attempts += 1;
        if attempts > cfg.placement_attempts {
            return Err(Error::Placement { objects: count, attempts: cfg.placement_attempts });
        }
        let w = rng.gen_range(elo..=ehi) as i32;
        let h = rng.gen_range(elo..=ehi) as i32;
        let color = cfg.palette[rng.gen_range(0..cfg.palette.len())];
        let articulated = rng.gen_bool(cfg.articulated_fraction);
        let kind = if articulated {
            let axis = if rng.gen_bool(0.5) { Axis::X } else { Axis::Y };
            let max_offset = match axis {
                Axis::X => w,
                Axis::Y => h,
            };
            let hs = (w.min(h) / 4).max(1);
            ObjectKind::Articulated {
                handle: Rect::new((w - hs) / 2, (h - hs) / 2, hs, hs),
                axis,
                max_offset,
                interior_color: color.map(|c| snap(c * 0.35)),
                handle_color: [snap(0.12); 3],
            }
        } else {
            ObjectKind::Free
        };
        let mut spec = ObjectSpec { kind, anchor: (0, 0), extent: (w, h), color };
        let swept = spec.swept();
        if swept.w + 2 > size || swept.h + 2 > size {
            continue;
        }
        let ax = rng.gen_range(1..=size - swept.w - 1);
        let ay = rng.gen_range(1..=size - swept.h - 1);
        spec.anchor = (ax, ay);
        if let ObjectKind::Articulated { handle, .. } = &mut spec.kind {
            *handle = handle.translate(ax, ay);
        }
        let swept = spec.swept();
        debug_assert!(swept.inside(&world));
        // One pixel of clearance keeps neighbouring objects visually distinct.
        let padded = Rect::new(swept.x - 1, swept.y - 1, swept.w + 2, swept.h + 2);
        if placed.iter().any(|o| o.swept().intersects(&padded)) {
            continue;
        }
        placed.push(spec);
    }

    let objects = placed.into_iter().map(ObjectState::at_rest).collect();
    Ok(WorldState::new(cfg.world_size, background, objects))
}
