use super::{HandState, ObjectKind, Pose, WorldConfig, WorldState};

/// Advances the world by one frame of hand motion.
///
/// Rules, applied in order:
/// 1. While attached, the held object follows the hand: free objects
///    translate by the hand displacement (clamped inside the world),
///    articulated objects open by the displacement projected on their axis,
///    divided by `max_offset` and clamped to `[0, 1]`.
/// 2. An attached hand releases once its aperture rises above `grasp_open`.
/// 3. A free hand whose aperture crosses below `grasp_close` grabs the
///    topmost object whose grab region contains the hand position.
pub fn step_world(world: &WorldState, hand_prev: &HandState, hand_now: &HandState, cfg: &WorldConfig) -> WorldState {
    let mut next = world.clone();
    let size = world.size() as i32;
    let dx = hand_now.position.0 - hand_prev.position.0;
    let dy = hand_now.position.1 - hand_prev.position.1;

    if let Some(idx) = next.attachment {
        let obj = &mut next.objects[idx];
        match (&obj.spec.kind, &mut obj.pose) {
            (ObjectKind::Free, Pose::Offset { dx: ox, dy: oy }) => {
                let (ax, ay) = obj.spec.anchor;
                let (w, h) = obj.spec.extent;
                *ox = (*ox + dx).clamp(-ax, size - w - ax);
                *oy = (*oy + dy).clamp(-ay, size - h - ay);
            }
            (ObjectKind::Articulated { axis, max_offset, .. }, Pose::Opening { s }) => {
                let (ux, uy) = axis.unit();
                let along = (dx * ux + dy * uy) as f32;
                *s = (*s + along / *max_offset as f32).clamp(0.0, 1.0);
            }
            _ => unreachable!("pose variant always matches object kind"),
        }
        if hand_now.aperture > cfg.grasp_open {
            next.attachment = None;
        }
    } else if hand_prev.aperture >= cfg.grasp_close && hand_now.aperture < cfg.grasp_close {
        let (hx, hy) = hand_now.position;
        next.attachment = next.objects.iter().rposition(|o| o.grab_region().contains(hx, hy));
    }
    next
}
