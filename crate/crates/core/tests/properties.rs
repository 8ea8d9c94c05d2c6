use proptest::prelude::*;

use dexworld::codec::{patchify, unpatchify, Codec, CodecConfig};
use dexworld::dataset::{build_fixedcam_split, build_synthetic_split, Manifest, Split, TaskMix, TripletRecord};
use dexworld::diffusion::{
    build_schedule, ConditioningMode, DenoiserConfig, LatentScaling, ScheduleConfig, WorldModel,
};
use dexworld::evaluator::{psnr, ssim, RankingResult};
use dexworld::worldsim::{
    hand_sprite_pixels, make_fixed_camera_static, render_hand_mask_video, rollout_triplet, sample_action_script,
    sample_scene, step_world, ActionScript, CameraMotion, HandState, ObjectKind, Pose, Task, WorldConfig,
};
use dexworld::VideoTensor;

fn world() -> WorldConfig {
    WorldConfig::compact()
}

fn video(f: usize, h: usize, w: usize, values: &[f32]) -> VideoTensor {
    let n = f * h * w * 3;
    VideoTensor::from_vec(f, h, w, values.iter().cycle().take(n).copied().collect()).unwrap()
}

fn task_for(seed: u64) -> Task {
    [Task::Noop, Task::NavOnly, Task::PickPlace, Task::OpenArticulated, Task::MultiPick][(seed % 5) as usize]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn simulation_is_a_pure_function_of_its_inputs(seed in 0u64..5_000, cam in 0usize..3) {
        let cfg = world();
        let camera = [CameraMotion::Fixed, CameraMotion::Pan, CameraMotion::Track][cam];
        let a = sample_scene(seed, &cfg);
        let b = sample_scene(seed, &cfg);
        prop_assert_eq!(a.is_ok(), b.is_ok());
        let (Ok(a), Ok(b)) = (a, b) else { return Ok(()) };
        prop_assert_eq!(&a, &b);
        let sa = sample_action_script(&a, seed, task_for(seed), camera, &cfg);
        let sb = sample_action_script(&b, seed, task_for(seed), camera, &cfg);
        prop_assert_eq!(sa.is_ok(), sb.is_ok());
        if let (Ok(sa), Ok(sb)) = (sa, sb) {
            prop_assert_eq!(&sa, &sb);
            let ta = rollout_triplet(&a, &sa, &cfg).unwrap();
            let tb = rollout_triplet(&b, &sb, &cfg).unwrap();
            prop_assert!(ta.interaction == tb.interaction && ta.static_scene == tb.static_scene && ta.hand == tb.hand);
        }
    }

    #[test]
    fn hand_pixels_are_aligned_across_videos(seed in 0u64..5_000) {
        let cfg = world();
        let Ok(scene) = sample_scene(seed, &cfg) else { return Ok(()) };
        let Ok(script) = sample_action_script(&scene, seed, task_for(seed), CameraMotion::Pan, &cfg) else { return Ok(()) };
        let tri = rollout_triplet(&scene, &script, &cfg).unwrap();
        prop_assert_eq!(tri.interaction.shape(), tri.static_scene.shape());
        prop_assert_eq!(tri.interaction.shape(), tri.hand.shape());
        for t in 0..script.len() {
            let sprite = hand_sprite_pixels(&script.hand_traj[t], script.camera_traj[t], &cfg);
            let (fi, fh) = (tri.interaction.frame(t), tri.hand.frame(t));
            let mut covered = vec![false; cfg.view_size * cfg.view_size];
            for p in &sprite {
                prop_assert_eq!(fi.pixel(p.x, p.y), fh.pixel(p.x, p.y));
                covered[p.y * cfg.view_size + p.x] = true;
            }
            for y in 0..cfg.view_size {
                for x in 0..cfg.view_size {
                    let lit = fh.pixel(x, y) != [0.0; 3];
                    prop_assert!(!lit || covered[y * cfg.view_size + x]);
                }
            }
        }
    }

    #[test]
    fn open_hand_never_changes_the_scene(seed in 0u64..5_000, moves in prop::collection::vec((-3i32..=3, -3i32..=3), 8)) {
        let cfg = world();
        let Ok(scene) = sample_scene(seed, &cfg) else { return Ok(()) };
        let base = sample_action_script(&scene, seed, Task::NavOnly, CameraMotion::Pan, &cfg).unwrap();
        let (cx, cy) = base.camera_traj[0].offset;
        let (mut x, mut y) = (cx + cfg.view_size as i32 / 2, cy + cfg.view_size as i32 / 2);
        let hand_traj = moves
            .iter()
            .map(|&(dx, dy)| {
                x += dx;
                y += dy;
                HandState::new(x, y, 0.9)
            })
            .collect();
        let script = ActionScript { hand_traj, ..base };
        let tri = rollout_triplet(&scene, &script, &cfg).unwrap();
        let mask = render_hand_mask_video(&script, &cfg).unwrap();
        for ((a, b), m) in tri.interaction.data().iter().zip(tri.static_scene.data()).zip(mask.data()) {
            prop_assert!(*m > 0.0 || a == b);
        }
    }

    #[test]
    fn fixed_camera_static_is_a_fixed_point(seed in 0u64..5_000) {
        let cfg = world();
        let Ok(scene) = sample_scene(seed, &cfg) else { return Ok(()) };
        let task = [Task::Noop, Task::PickPlace, Task::OpenArticulated, Task::MultiPick][(seed % 4) as usize];
        let Ok(script) = sample_action_script(&scene, seed, task, CameraMotion::Fixed, &cfg) else { return Ok(()) };
        prop_assert!(script.camera_traj.iter().all(|c| *c == script.camera_traj[0]));
        let tri = rollout_triplet(&scene, &script, &cfg).unwrap();
        prop_assert!(make_fixed_camera_static(&tri.static_scene).unwrap() == tri.static_scene);
    }

    #[test]
    fn world_state_stays_clamped(seed in 0u64..5_000, path in prop::collection::vec((-6i32..=6, -6i32..=6, 0.0f32..1.0), 1..40)) {
        let cfg = world();
        let Ok(mut state) = sample_scene(seed, &cfg) else { return Ok(()) };
        let size = state.size() as i32;
        let first = state.objects.first().map(|o| o.spec.anchor).unwrap_or((size / 2, size / 2));
        let mut prev = HandState::new(first.0, first.1, 1.0);
        for (dx, dy, a) in path {
            let now = HandState::new(prev.position.0 + dx, prev.position.1 + dy, a);
            state = step_world(&state, &prev, &now, &cfg);
            prev = now;
            if let Some(i) = state.attachment {
                prop_assert!(i < state.objects.len());
            }
            for o in &state.objects {
                match (&o.spec.kind, o.pose) {
                    (ObjectKind::Articulated { .. }, Pose::Opening { s }) => {
                        prop_assert!((0.0..=1.0).contains(&s));
                        let r = o.spec.swept();
                        prop_assert!(r.x >= 0 && r.y >= 0 && r.x + r.w <= size && r.y + r.h <= size);
                    }
                    (ObjectKind::Free, _) => {
                        let r = o.footprint();
                        prop_assert!(r.x >= 0 && r.y >= 0 && r.x + r.w <= size && r.y + r.h <= size);
                    }
                    _ => prop_assert!(false, "pose does not match object kind"),
                }
            }
        }
    }

    #[test]
    fn patchify_is_a_bijection(r in 1usize..=2, s in prop::sample::select(vec![1usize, 2, 4]), values in prop::collection::vec(0.0f32..=1.0, 1..64)) {
        let v = video(4, 8, 8, &values);
        let lat = patchify(&v, r, s).unwrap();
        prop_assert_eq!(lat.shape(), (4 / r, 3 * r * s * s, 8 / s, 8 / s));
        prop_assert!(unpatchify(&lat, r, s).unwrap() == v);
    }

    #[test]
    fn learned_encode_is_deterministic_with_the_shape_contract(seed in 0u64..1_000, values in prop::collection::vec(0.0f32..=1.0, 1..64)) {
        let codec = Codec::new(CodecConfig::learned(2, 2, 6), seed).unwrap();
        let v = video(4, 8, 8, &values);
        let a = codec.encode(&v).unwrap();
        prop_assert_eq!(a.shape(), (2, 6, 4, 4));
        prop_assert!(a.data.iter().all(|x| x.is_finite()));
        prop_assert!(a == codec.encode(&v).unwrap());
        let back = codec.decode(&a).unwrap();
        prop_assert!(back.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn schedules_are_monotone(steps in 2usize..2_000, b0 in 1e-5f64..1e-2, span in 0.0f64..0.05) {
        let sched = build_schedule(steps, b0, b0 + span).unwrap();
        for t in 1..=steps {
            let beta = 1.0 - sched.alpha_bar(t) / if t == 1 { 1.0 } else { sched.alpha_bar(t - 1) };
            prop_assert!(beta > 0.0 && beta < 1.0);
            if t > 1 {
                prop_assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn metrics_stay_in_range(a in prop::collection::vec(0.0f32..=1.0, 1..50), b in prop::collection::vec(0.0f32..=1.0, 1..50)) {
        let (va, vb) = (video(2, 8, 8, &a), video(2, 8, 8, &b));
        let p = psnr(&va, &vb).unwrap();
        prop_assert!(p >= 0.0 && p.is_finite());
        prop_assert!(psnr(&va, &va).unwrap() >= p);
        let s = ssim(&va, &vb).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ranking_picks_first_maximum(scores in prop::collection::vec(-3i32..3, 1..10)) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let r = RankingResult::from_scores(scores.clone()).unwrap();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(r.best_index, scores.iter().position(|&s| s == max).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn records_round_trip_and_splits_stay_disjoint(seed in 0u64..100_000, n in 0usize..4) {
        let cfg = world();
        let a = build_synthetic_split(n, seed, &cfg, &TaskMix::synthetic(), Split::Train).unwrap();
        let b = build_fixedcam_split(n, seed, &cfg, &TaskMix::fixed_camera(), Split::Test).unwrap();
        for r in a.records.iter().chain(&b.records) {
            let bytes = r.to_bytes().unwrap();
            prop_assert!(TripletRecord::from_bytes(&bytes).unwrap() == *r);
        }
        let merged = a.merge(b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        merged.write(dir.path(), "m.txt").unwrap();
        let m = Manifest::load_file(dir.path().join("m.txt")).unwrap();
        m.verify(dir.path()).unwrap();
        for e in m.split(Split::Train) {
            prop_assert!(m.split(Split::Test).all(|x| x.id != e.id));
        }
    }

    #[test]
    fn bundles_carry_exactly_one_hand_signal(seed in 0u64..10_000, mode in 0usize..4) {
        let cfg = world();
        let rec = &build_synthetic_split(1, seed, &cfg, &TaskMix::synthetic(), Split::Train).unwrap().records[0];
        let den = DenoiserConfig { conditioning_mode: ConditioningMode::ALL[mode], model_dim: 16, heads: 2, depth: 1, ..DenoiserConfig::compact() };
        let model = WorldModel::new(Codec::patchify(2, 2), LatentScaling::unit_range(), den, ScheduleConfig::default(), 0).unwrap();
        let b = model.bundle_for_record(rec).unwrap();
        prop_assert!(b.c_h.is_some() != b.hand_params.is_some());
        prop_assert!(b.mask.data.iter().all(|&m| m == 1.0));
        let (f, c, h, w) = b.c_s.shape();
        let z = dexworld::codec::LatentTensor::zeros(f, c, h, w);
        let eps = dexworld::diffusion::predict_noise(&model.dit, &z, 500, &b).unwrap();
        prop_assert_eq!(eps.shape(), b.c_s.shape());
    }
}
