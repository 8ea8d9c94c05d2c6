use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionScript, CameraPose, HandState, ObjectState, WorldConfig, WorldState};
use crate::error::{Error, Result};
use crate::rng;

/// Scripted behaviours. The discrete label of each task conditions the
/// denoiser in place of a text prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Noop,
    NavOnly,
    PickPlace,
    OpenArticulated,
    /// Two free objects moved one after the other.
    MultiPick,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Noop, Task::NavOnly, Task::PickPlace, Task::OpenArticulated, Task::MultiPick];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Noop => "no-op",
            Task::NavOnly => "navigate",
            Task::PickPlace => "pick-place",
            Task::OpenArticulated => "open-door",
            Task::MultiPick => "multi-pick",
        }
    }

    pub fn from_label(label: usize) -> Option<Task> {
        Task::ALL.get(label).copied()
    }

    pub fn from_name(name: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == name)
    }

    /// True when the hand acts on an object.
    pub fn manipulates(self) -> bool {
        matches!(self, Task::PickPlace | Task::OpenArticulated | Task::MultiPick)
    }
}

/// How the camera moves over the clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMotion {
    Fixed,
    /// Constant-velocity pan, stopping at world edges.
    Pan,
    /// Follows the hand with bounded per-frame speed.
    Track,
}

fn infeasible(task: Task, reason: &str) -> Error {
    Error::InfeasibleTask { task: task.name().into(), reason: reason.into() }
}

struct Stroke {
    grab: (i32, i32),
    shift: (i32, i32),
}

fn lerp_point(a: (i32, i32), b: (i32, i32), num: i32, den: i32) -> (i32, i32) {
    let f = num as f32 / den as f32;
    (a.0 + ((b.0 - a.0) as f32 * f).round() as i32, a.1 + ((b.1 - a.1) as f32 * f).round() as i32)
}

/// Picks a displacement that keeps `obj` inside the world and clear of all
/// other objects.
fn sample_shift(
    rng: &mut ChaCha8Rng,
    world: &WorldState,
    idx: usize,
    reach: i32,
    cfg: &WorldConfig,
) -> Option<(i32, i32)> {
    let body = world.objects[idx].footprint();
    for _ in 0..64 {
        let dx = rng.gen_range(-reach..=reach);
        let dy = rng.gen_range(-reach..=reach);
        if dx.abs() + dy.abs() < 2 {
            continue;
        }
        let moved = body.translate(dx, dy);
        if !moved.inside(&cfg.world_rect()) {
            continue;
        }
        let clear = world.objects.iter().enumerate().all(|(j, o)| j == idx || !o.spec.swept().intersects(&moved));
        if clear {
            return Some((dx, dy));
        }
    }
    None
}

fn free_indices(world: &WorldState) -> Vec<usize> {
    (0..world.objects.len()).filter(|&i| !world.objects[i].spec.is_articulated()).collect()
}

fn grab_point(o: &ObjectState) -> (i32, i32) {
    o.grab_region().center()
}

fn clamp_cam(x: i32, y: i32, max: i32) -> CameraPose {
    CameraPose::new(x.clamp(0, max), y.clamp(0, max))
}

/// Builds a deterministic camera/hand script for `task` in `scene`.
///
/// Manipulation tasks follow approach, close, drag and release phases. NOOP
/// keeps the hand off-screen under a still camera; NAV_ONLY keeps it
/// off-screen under a panning camera.
pub fn sample_action_script(
    scene: &WorldState,
    seed: u64,
    task: Task,
    camera: CameraMotion,
    cfg: &WorldConfig,
) -> Result<ActionScript> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &format!("script/{}", task.name()));
    let f = cfg.num_frames;
    let view = cfg.view_size as i32;
    let max_cam = (cfg.world_size - cfg.view_size) as i32;
    let reach = (view / 4).max(2);

    let open_lo = (cfg.grasp_open + 0.1).min(1.0);
    let closed_hi = cfg.grasp_close * 0.75;
    let open_a = |rng: &mut ChaCha8Rng| rng.gen_range(open_lo..=1.0f32);
    let closed_a = |rng: &mut ChaCha8Rng| rng.gen_range(0.0..closed_hi);

    let (hand, focus) = match task {
        Task::Noop | Task::NavOnly => {
            let (x, y) = cfg.offscreen_position();
            (vec![HandState::new(x, y, 1.0); f], None)
        }
        Task::PickPlace | Task::OpenArticulated => {
            if f < 5 {
                return Err(infeasible(task, "needs at least 5 frames"));
            }
            let stroke = if task == Task::PickPlace {
                let candidates = free_indices(scene);
                if candidates.is_empty() {
                    return Err(infeasible(task, "no free object"));
                }
                let idx = candidates[rng.gen_range(0..candidates.len())];
                let shift = sample_shift(&mut rng, scene, idx, reach, cfg)
                    .ok_or_else(|| infeasible(task, "no clear destination"))?;
                Stroke { grab: grab_point(&scene.objects[idx]), shift }
            } else {
                let candidates: Vec<usize> =
                    (0..scene.objects.len()).filter(|&i| scene.objects[i].spec.is_articulated()).collect();
                if candidates.is_empty() {
                    return Err(infeasible(task, "no articulated object"));
                }
                let o = &scene.objects[candidates[rng.gen_range(0..candidates.len())]];
                let (ux, uy) = match &o.spec.kind {
                    super::ObjectKind::Articulated { axis, max_offset, .. } => {
                        let (ux, uy) = axis.unit();
                        (ux * max_offset, uy * max_offset)
                    }
                    super::ObjectKind::Free => unreachable!(),
                };
                Stroke { grab: grab_point(o), shift: (ux, uy) }
            };
            let g = stroke.grab;
            let start = (g.0 + rng.gen_range(-reach..=reach), g.1 + rng.gen_range(-reach..=reach));
            let approach = (f / 4).max(1);
            let drag = f - 3 - approach;
            let (ao, ac, ar) = (open_a(&mut rng), closed_a(&mut rng), open_a(&mut rng));
            let end = (g.0 + stroke.shift.0, g.1 + stroke.shift.1);
            let mut hand = Vec::with_capacity(f);
            for t in 0..=approach {
                let (x, y) = lerp_point(start, g, t as i32, approach as i32);
                hand.push(HandState::new(x, y, ao));
            }
            hand.push(HandState::new(g.0, g.1, ac));
            for k in 1..=drag {
                let (x, y) = lerp_point(g, end, k as i32, drag as i32);
                hand.push(HandState::new(x, y, ac));
            }
            hand.push(HandState::new(end.0, end.1, ar));
            debug_assert_eq!(hand.len(), f);
            (hand, Some(lerp_point(start, end, 1, 2)))
        }
        Task::MultiPick => {
            if f < 8 {
                return Err(infeasible(task, "needs at least 8 frames"));
            }
            let candidates = free_indices(scene);
            if candidates.len() < 2 {
                return Err(infeasible(task, "needs two free objects"));
            }
            let first = candidates[rng.gen_range(0..candidates.len())];
            let rest: Vec<usize> = candidates.iter().copied().filter(|&i| i != first).collect();
            let second = rest[rng.gen_range(0..rest.len())];
            let mut moved = scene.clone();
            let mut strokes = Vec::new();
            for idx in [first, second] {
                let shift = sample_shift(&mut rng, &moved, idx, reach, cfg)
                    .ok_or_else(|| infeasible(task, "no clear destination"))?;
                strokes.push(Stroke { grab: grab_point(&moved.objects[idx]), shift });
                // Later strokes must avoid where earlier objects ended up.
                let o = &mut moved.objects[idx];
                o.spec.anchor = (o.spec.anchor.0 + shift.0, o.spec.anchor.1 + shift.1);
            }
            let half = f / 2;
            let mut hand = Vec::with_capacity(f);
            for (i, s) in strokes.iter().enumerate() {
                let len = if i == 0 { half } else { f - half };
                let drag = len - 3;
                let (ao, ac, ar) = (open_a(&mut rng), closed_a(&mut rng), open_a(&mut rng));
                let end = (s.grab.0 + s.shift.0, s.grab.1 + s.shift.1);
                hand.push(HandState::new(s.grab.0, s.grab.1, ao));
                hand.push(HandState::new(s.grab.0, s.grab.1, ac));
                for k in 1..=drag {
                    let (x, y) = lerp_point(s.grab, end, k as i32, drag as i32);
                    hand.push(HandState::new(x, y, ac));
                }
                hand.push(HandState::new(end.0, end.1, ar));
            }
            let focus = lerp_point(strokes[0].grab, strokes[1].grab, 1, 2);
            (hand, Some(focus))
        }
    };

    let motion = match task {
        Task::Noop => CameraMotion::Fixed,
        Task::NavOnly => CameraMotion::Pan,
        _ => camera,
    };
    let start_cam = match focus {
        Some((fx, fy)) => {
            clamp_cam(fx - view / 2 + rng.gen_range(-2..=2), fy - view / 2 + rng.gen_range(-2..=2), max_cam)
        }
        None => CameraPose::new(rng.gen_range(0..=max_cam), rng.gen_range(0..=max_cam)),
    };
    let step = cfg.max_camera_step.max(1).min(max_cam.max(1));
    let mut cams = Vec::with_capacity(f);
    match motion {
        CameraMotion::Fixed => cams.resize(f, start_cam),
        CameraMotion::Pan => {
            let speed = |rng: &mut ChaCha8Rng| rng.gen_range(0..=step.min(2));
            let (sx, sy) = start_cam.offset;
            let mut vx = speed(&mut rng) * if sx * 2 < max_cam { 1 } else { -1 };
            let vy = speed(&mut rng) * if sy * 2 < max_cam { 1 } else { -1 };
            if vx == 0 && vy == 0 && max_cam > 0 {
                vx = if sx * 2 < max_cam { 1 } else { -1 };
            }
            for t in 0..f as i32 {
                cams.push(clamp_cam(sx + vx * t, sy + vy * t, max_cam));
            }
        }
        CameraMotion::Track => {
            let mut cam = start_cam;
            for h in &hand {
                let want = clamp_cam(h.position.0 - view / 2, h.position.1 - view / 2, max_cam);
                let (cx, cy) = cam.offset;
                let nx = cx + (want.offset.0 - cx).clamp(-step, step);
                let ny = cy + (want.offset.1 - cy).clamp(-step, step);
                cam = CameraPose::new(nx, ny);
                cams.push(cam);
            }
        }
    }

    let script =
        ActionScript { camera_traj: cams, hand_traj: hand, label: task.label(), label_name: task.name().into() };
    script.validate(cfg)?;
    Ok(script)
}
