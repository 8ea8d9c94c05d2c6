use rand::Rng;

use super::frame_perceptual_distance;
use super::probe::Probe;
use crate::codec::Codec;
use crate::dataset::{record_from_script, Source};
use crate::diffusion::{SampleConfig, WorldModel};
use crate::error::{Error, Result};
use crate::video::{Frame, VideoTensor};
use crate::worldsim::{sample_action_script, sample_scene, ActionScript, CameraMotion, Task, WorldConfig, WorldState};

/// What the chosen action should achieve.
#[derive(Debug, Clone, PartialEq)]
pub enum GoalSpec {
    TextLabel(usize),
    /// Desired final view.
    Image(Frame),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub scores: Vec<f64>,
    pub best_index: usize,
}

impl RankingResult {
    /// Argmax with ties going to the lowest index.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Invalid("no scores to rank".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Invalid("NaN score".into()));
        }
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(Self { scores, best_index: best })
    }
}

/// Where candidate outcomes come from.
#[derive(Debug, Clone, Copy)]
pub enum Rollouts<'a> {
    /// Ground-truth simulator rollouts.
    Oracle,
    Model {
        model: &'a WorldModel,
        sample: SampleConfig,
        seed: u64,
    },
}

/// Scoring resources. Image goals need the perceptual codec, label goals
/// the probe.
#[derive(Debug, Clone, Copy, Default)]
pub struct Scorer<'a> {
    pub perceptual: Option<&'a Codec>,
    pub probe: Option<&'a Probe>,
    /// Score image goals against every frame instead of the final one.
    pub whole_video_image_goal: bool,
}

impl Scorer<'_> {
    pub fn score(&self, video: &VideoTensor, goal: &GoalSpec) -> Result<f64> {
        match goal {
            GoalSpec::TextLabel(label) => {
                let probe = self.probe.ok_or_else(|| Error::Config("label goals need a trained probe".into()))?;
                probe.similarity(video, *label)
            }
            GoalSpec::Image(frame) => {
                let codec =
                    self.perceptual.ok_or_else(|| Error::Config("image goals need a perceptual codec".into()))?;
                if (frame.height(), frame.width()) != (video.height(), video.width()) {
                    return Err(Error::Shape("goal image and video frames differ in size".into()));
                }
                if self.whole_video_image_goal {
                    let mut total = 0.0;
                    for t in 0..video.num_frames() {
                        total += frame_perceptual_distance(&video.frame(t), frame, codec)?;
                    }
                    Ok(-total / video.num_frames() as f64)
                } else {
                    Ok(-frame_perceptual_distance(&video.last_frame(), frame, codec)?)
                }
            }
        }
    }
}

/// Outcome video of every candidate, from the simulator or the model.
pub fn rollout_candidates(
    rollouts: &Rollouts<'_>,
    scene: &WorldState,
    candidates: &[ActionScript],
    source: Source,
    world: &WorldConfig,
) -> Result<Vec<VideoTensor>> {
    match rollouts {
        Rollouts::Oracle => candidates
            .iter()
            .map(|s| Ok(record_from_script("candidate".into(), scene, s, 0, source, world)?.interaction))
            .collect(),
        Rollouts::Model { model, sample, seed } => {
            let bundles = candidates
                .iter()
                .map(|s| Ok(model.bundle_for_script(scene, s, source, world)?.0))
                .collect::<Result<Vec<_>>>()?;
            let seeds: Vec<u64> =
                (0..candidates.len() as u64).map(|i| crate::rng::derive_seed(*seed, &format!("rank/{i}"))).collect();
            model.generate_batch(&bundles, sample, &seeds)
        }
    }
}

/// Simulates every candidate and picks the one whose outcome best matches the goal.
pub fn rank_actions(
    rollouts: &Rollouts<'_>,
    scene: &WorldState,
    candidates: &[ActionScript],
    goal: &GoalSpec,
    scorer: &Scorer<'_>,
    source: Source,
    world: &WorldConfig,
) -> Result<RankingResult> {
    if candidates.len() < 2 {
        return Err(Error::Invalid(format!("ranking needs at least two candidates, got {}", candidates.len())));
    }
    let videos = rollout_candidates(rollouts, scene, candidates, source, world)?;
    let scores = videos.iter().map(|v| scorer.score(v, goal)).collect::<Result<Vec<_>>>()?;
    RankingResult::from_scores(scores)
}

/// A scene, its candidate actions and the index of the one that realizes the goal.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingEpisode {
    pub scene: WorldState,
    pub candidates: Vec<ActionScript>,
    pub goal: GoalSpec,
    pub goal_index: usize,
}

const EPISODE_ATTEMPTS: u64 = 200;

/// Smallest mean squared pixel difference allowed between candidate outcomes.
pub const MIN_OUTCOME_SEPARATION: f64 = 2e-3;

fn frame_mse(a: &Frame, b: &Frame) -> f64 {
    let (x, y) = (a.data(), b.data());
    x.iter().zip(y).map(|(p, q)| f64::from(p - q).powi(2)).sum::<f64>() / x.len() as f64
}

/// Image-goal episode: `n` manipulation candidates seen from one shared still
/// camera, with pairwise distinct final frames. The goal is the true final
/// frame of a randomly chosen candidate.
pub fn image_goal_episode(seed: u64, n: usize, world: &WorldConfig) -> Result<RankingEpisode> {
    if n < 2 {
        return Err(Error::Invalid(format!("episodes need at least two candidates, got {n}")));
    }
    let mut rng = crate::rng::stream(seed, "ranking/image-episode");
    for attempt in 0..EPISODE_ATTEMPTS {
        let scene = sample_scene(crate::rng::derive_seed(seed, &format!("scene/{attempt}")), world)?;
        let mut candidates: Vec<ActionScript> = Vec::with_capacity(n);
        for k in 0..4 * n as u64 {
            if candidates.len() == n {
                break;
            }
            let task = if rng.gen_bool(0.7) { Task::PickPlace } else { Task::OpenArticulated };
            let script_seed = crate::rng::derive_seed(seed, &format!("script/{attempt}/{k}"));
            if let Ok(mut s) = sample_action_script(&scene, script_seed, task, CameraMotion::Fixed, world) {
                if let Some(first) = candidates.first() {
                    s.camera_traj = first.camera_traj.clone();
                }
                candidates.push(s);
            }
        }
        if candidates.len() < n {
            continue;
        }
        let outcomes = rollout_candidates(&Rollouts::Oracle, &scene, &candidates, Source::SynDynamic, world)?;
        let finals: Vec<Frame> = outcomes.iter().map(VideoTensor::last_frame).collect();
        let separated = (0..n).all(|i| (i + 1..n).all(|j| frame_mse(&finals[i], &finals[j]) >= MIN_OUTCOME_SEPARATION));
        if separated {
            let goal_index = rng.gen_range(0..n);
            let goal = GoalSpec::Image(finals[goal_index].clone());
            return Ok(RankingEpisode { scene, candidates, goal, goal_index });
        }
    }
    Err(Error::Invalid(format!("no separable image-goal episode for seed {seed}")))
}

/// Label-goal episode: one candidate per task in `tasks`, the goal being the
/// label of a randomly chosen one.
pub fn label_goal_episode(seed: u64, tasks: &[Task], world: &WorldConfig) -> Result<RankingEpisode> {
    if tasks.len() < 2 {
        return Err(Error::Invalid("episodes need at least two candidates".into()));
    }
    if (0..tasks.len()).any(|i| tasks[i + 1..].contains(&tasks[i])) {
        return Err(Error::Invalid("label-goal candidates need distinct tasks".into()));
    }
    let mut rng = crate::rng::stream(seed, "ranking/label-episode");
    'scenes: for attempt in 0..EPISODE_ATTEMPTS {
        let scene = sample_scene(crate::rng::derive_seed(seed, &format!("scene/{attempt}")), world)?;
        let mut candidates = Vec::with_capacity(tasks.len());
        for (k, &task) in tasks.iter().enumerate() {
            let script_seed = crate::rng::derive_seed(seed, &format!("script/{attempt}/{k}"));
            match sample_action_script(&scene, script_seed, task, CameraMotion::Pan, world) {
                Ok(s) => candidates.push(s),
                Err(_) => continue 'scenes,
            }
        }
        let goal_index = rng.gen_range(0..tasks.len());
        let goal = GoalSpec::TextLabel(tasks[goal_index].label());
        return Ok(RankingEpisode { scene, candidates, goal, goal_index });
    }
    Err(Error::Invalid(format!("no feasible label-goal episode for seed {seed}")))
}
