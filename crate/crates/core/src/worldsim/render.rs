use super::{ActionScript, CameraPose, HandState, ObjectKind, ObjectState, Rect, Rgb, WorldConfig, WorldState};
use crate::error::Result;
use crate::video::{Frame, VideoTensor};

/// One visible pixel of the hand sprite, in view coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandPixel {
    pub x: usize,
    pub y: usize,
    pub color: Rgb,
}

fn fill(frame: &mut Frame, rect: Rect, clip: Rect, cam: CameraPose, color: Rgb) {
    let (cx, cy) = cam.offset;
    let view = frame.width() as i32;
    let x0 = rect.x.max(clip.x).max(cx);
    let y0 = rect.y.max(clip.y).max(cy);
    let x1 = (rect.x + rect.w).min(clip.x + clip.w).min(cx + view);
    let y1 = (rect.y + rect.h).min(clip.y + clip.h).min(cy + view);
    for y in y0..y1 {
        for x in x0..x1 {
            frame.set_pixel((x - cx) as usize, (y - cy) as usize, color);
        }
    }
}

fn paint_object(frame: &mut Frame, obj: &ObjectState, world: Rect, cam: CameraPose) {
    match &obj.spec.kind {
        ObjectKind::Free => fill(frame, obj.footprint(), world, cam, obj.spec.color),
        ObjectKind::Articulated { handle, interior_color, handle_color, .. } => {
            let (sx, sy) = obj.panel_shift();
            fill(frame, obj.spec.body(), world, cam, *interior_color);
            fill(frame, obj.spec.body().translate(sx, sy), world, cam, obj.spec.color);
            fill(frame, handle.translate(sx, sy), world, cam, *handle_color);
        }
    }
}

/// Pixels of the hand sprite inside a `view_size` viewport at `cam`.
///
/// The sprite is two vertical finger bars centred on the hand position and
/// separated by an aperture-dependent gap; the top row of each bar is the
/// fingertip.
pub fn hand_sprite_pixels(hand: &HandState, cam: CameraPose, cfg: &WorldConfig) -> Vec<HandPixel> {
    let sprite = &cfg.hand;
    let view = cfg.view_size as i32;
    let cx = hand.position.0 - cam.offset.0;
    let cy = hand.position.1 - cam.offset.1;
    let gap = sprite.gap(hand.aperture);
    let half_left = gap / 2;
    let fw = sprite.finger_width;
    let y0 = cy - sprite.finger_length / 2;
    let body = sprite.body_color(hand.aperture);
    let bars = [cx - half_left - fw, cx + gap - half_left];
    let mut out = Vec::new();
    for y in y0..y0 + sprite.finger_length {
        if y < 0 || y >= view {
            continue;
        }
        let color = if y == y0 { sprite.tip_color } else { body };
        for &bx in &bars {
            for x in bx..bx + fw {
                if x >= 0 && x < view {
                    out.push(HandPixel { x: x as usize, y: y as usize, color });
                }
            }
        }
    }
    out
}

/// Crops the composited world (background, then objects in list order, then
/// the optional hand sprite) to the viewport.
pub fn render_view(world: &WorldState, cam: CameraPose, hand: Option<&HandState>, cfg: &WorldConfig) -> Result<Frame> {
    cam.validate(cfg)?;
    let view = cfg.view_size;
    let size = world.size();
    let (ox, oy) = (cam.offset.0 as usize, cam.offset.1 as usize);
    let bg = world.background();
    let mut data = Vec::with_capacity(view * view * 3);
    for y in 0..view {
        let row = ((oy + y) * size + ox) * 3;
        data.extend_from_slice(&bg[row..row + view * 3]);
    }
    let mut frame = Frame::from_vec(view, view, data)?;
    let bounds = Rect::new(0, 0, size as i32, size as i32);
    for obj in &world.objects {
        paint_object(&mut frame, obj, bounds, cam);
    }
    if let Some(h) = hand {
        for p in hand_sprite_pixels(h, cam, cfg) {
            frame.set_pixel(p.x, p.y, p.color);
        }
    }
    Ok(frame)
}

/// The hand sprite alone on black, along the script's camera trajectory.
pub fn render_hand_video(script: &ActionScript, cfg: &WorldConfig) -> Result<VideoTensor> {
    script.validate(cfg)?;
    let v = cfg.view_size;
    let mut video = VideoTensor::zeros(script.len(), v, v);
    let frame_len = video.frame_len();
    for (t, (hand, cam)) in script.hand_traj.iter().zip(&script.camera_traj).enumerate() {
        let buf = &mut video.data_mut()[t * frame_len..(t + 1) * frame_len];
        for p in hand_sprite_pixels(hand, *cam, cfg) {
            let i = (p.y * v + p.x) * 3;
            buf[i..i + 3].copy_from_slice(&p.color);
        }
    }
    Ok(video)
}

/// Binary silhouette of the hand sprite, replicated to three channels.
pub fn render_hand_mask_video(script: &ActionScript, cfg: &WorldConfig) -> Result<VideoTensor> {
    let mut video = render_hand_video(script, cfg)?;
    for px in video.data_mut().chunks_exact_mut(3) {
        let on = if px.iter().any(|&c| c > 0.0) { 1.0 } else { 0.0 };
        px.fill(on);
    }
    Ok(video)
}

/// Per-frame `(x, y, aperture, visible)` with positions in `[-1, 1]`
/// viewport coordinates (0 at pixel `view_size / 2`).
pub fn hand_params_sequence(script: &ActionScript, cfg: &WorldConfig) -> Vec<[f32; 4]> {
    let v = cfg.view_size as f32;
    script
        .hand_traj
        .iter()
        .zip(&script.camera_traj)
        .map(|(hand, cam)| {
            let rx = (hand.position.0 - cam.offset.0) as f32;
            let ry = (hand.position.1 - cam.offset.1) as f32;
            let visible = rx >= 0.0 && rx < v && ry >= 0.0 && ry < v;
            [
                (2.0 * rx / v - 1.0).clamp(-1.0, 1.0),
                (2.0 * ry / v - 1.0).clamp(-1.0, 1.0),
                hand.aperture,
                if visible { 1.0 } else { 0.0 },
            ]
        })
        .collect()
}
