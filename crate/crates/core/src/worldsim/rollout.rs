use super::{render_hand_video, render_view, step_world, ActionScript, WorldConfig, WorldState};
use crate::error::{Error, Result};
use crate::video::{Frame, VideoTensor};

/// Three synchronized renderings of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    /// Evolving world with the hand composited on top.
    pub interaction: VideoTensor,
    /// The scene frozen at `t = 0`, seen along the same camera path.
    pub static_scene: VideoTensor,
    /// The hand alone on black.
    pub hand: VideoTensor,
    pub final_state: WorldState,
}

/// Replays `script` in `scene`: frame 0 shows the scene as given, frame `t`
/// shows the world after `t` applications of [`step_world`].
pub fn rollout_triplet(scene: &WorldState, script: &ActionScript, cfg: &WorldConfig) -> Result<Triplet> {
    script.validate(cfg)?;
    if scene.attachment.is_some() {
        return Err(Error::Invalid("rollout must start from a scene with no grasp".into()));
    }
    let mut interaction = Vec::with_capacity(script.len());
    let mut static_frames = Vec::with_capacity(script.len());
    let mut world = scene.clone();
    for t in 0..script.len() {
        let cam = script.camera_traj[t];
        let hand = &script.hand_traj[t];
        if t > 0 {
            world = step_world(&world, &script.hand_traj[t - 1], hand, cfg);
        }
        interaction.push(render_view(&world, cam, Some(hand), cfg)?);
        static_frames.push(render_view(scene, cam, None, cfg)?);
    }
    Ok(Triplet {
        interaction: VideoTensor::from_frames(&interaction)?,
        static_scene: VideoTensor::from_frames(&static_frames)?,
        hand: render_hand_video(script, cfg)?,
        final_state: world,
    })
}

/// Static-scene video for a fixed camera: frame 0 repeated for every frame.
pub fn make_fixed_camera_static(video: &VideoTensor) -> Result<VideoTensor> {
    if video.num_frames() == 0 {
        return Err(Error::Invalid("empty video".into()));
    }
    let first: Frame = video.frame(0);
    VideoTensor::from_frames(&vec![first; video.num_frames()])
}

#[cfg(test)]
mod tests {
    use super::super::{sample_action_script, sample_scene, CameraMotion, Task};
    use super::*;

    #[test]
    fn noop_interaction_is_static_plus_hand() {
        let cfg = WorldConfig::compact();
        for seed in 0..10 {
            let w = sample_scene(seed, &cfg).unwrap();
            let s = sample_action_script(&w, seed, Task::NavOnly, CameraMotion::Pan, &cfg).unwrap();
            let t = rollout_triplet(&w, &s, &cfg).unwrap();
            assert_eq!(t.interaction, t.static_scene);
            assert!(t.hand.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fixed_camera_static_frames_identical() {
        let cfg = WorldConfig::compact();
        let w = sample_scene(2, &cfg).unwrap();
        let s = sample_action_script(&w, 2, Task::Noop, CameraMotion::Fixed, &cfg).unwrap();
        let t = rollout_triplet(&w, &s, &cfg).unwrap();
        for k in 1..cfg.num_frames {
            assert_eq!(t.static_scene.frame_slice(k), t.static_scene.frame_slice(0));
        }
        assert_eq!(make_fixed_camera_static(&t.static_scene).unwrap(), t.static_scene);
    }

    #[test]
    fn fixed_camera_static_is_idempotent() {
        let data: Vec<f32> = (0..4 * 2 * 2 * 3).map(|i| i as f32 / 48.0).collect();
        let v = VideoTensor::from_vec(4, 2, 2, data).unwrap();
        let once = make_fixed_camera_static(&v).unwrap();
        assert_eq!(make_fixed_camera_static(&once).unwrap(), once);
        for k in 0..4 {
            assert_eq!(once.frame_slice(k), v.frame_slice(0));
        }
        assert!(make_fixed_camera_static(&VideoTensor::zeros(0, 2, 2)).is_err());
    }
}
