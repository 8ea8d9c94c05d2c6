//! End-to-end acceptance run at compact scale.
//!
//! Every criterion prints one `PASS`/`FAIL` line; the test fails if any
//! criterion fails. The training-based criteria share their datasets and
//! perceptual codec across seven diffusion runs.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dexworld::codec::{patchify, train_codec, unpatchify, Codec, CodecConfig, CodecTrainConfig};
use dexworld::dataset::{
    build_fixedcam_split, build_synthetic_split, record_from_script, Source, Split, TaskMix, TripletRecord,
};
use dexworld::diffusion::{
    build_schedule, pretrain_i2v, pretrain_inpainting, ConditioningBundle, ConditioningMode, DenoiserConfig, Dit,
    DitBatch, LatentScaling, MaskSampler, SampleConfig, ScheduleConfig, TrainConfig, TrainState, WorldModel,
};
use dexworld::evaluator::{
    batch_evaluate, image_goal_episode, perceptual_distance, psnr, rank_actions, EvalContext, EvalOutput, Generator,
    Rollouts, Scorer,
};
use dexworld::worldsim::{
    render_hand_mask_video, rollout_triplet, sample_action_script, sample_scene, ActionScript, CameraMotion, HandState,
    ObjectKind, Pose, Rgb, Task, WorldConfig, WorldState,
};
use dexworld::{Error, VideoTensor};

type Check = Result<(bool, String), String>;

/// Writes past the test harness's output capture so results show on success too.
macro_rules! report {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($arg)*);
        let _ = out.flush();
    }};
}

fn err(e: Error) -> String {
    e.to_string()
}

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn run(name: &'static str, f: impl FnOnce() -> Check) -> Line {
    let t0 = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok((pass, detail))) => (pass, detail),
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panic: {msg}"))
        }
    };
    let line = Line { name, pass, detail, secs: t0.elapsed().as_secs_f64() };
    report!("{} {:<44} {} ({:.1}s)", if line.pass { "PASS" } else { "FAIL" }, line.name, line.detail, line.secs);
    line
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Simulator oracle

fn snap(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Single-object world state tracked by the reference loop.
#[derive(Clone, Copy)]
struct RefObject {
    dx: i32,
    dy: i32,
    s: f32,
    held: bool,
}

fn ref_step(
    obj: &mut RefObject,
    spec: &dexworld::worldsim::ObjectSpec,
    prev: &HandState,
    now: &HandState,
    cfg: &WorldConfig,
    size: i32,
) {
    let (mx, my) = (now.position.0 - prev.position.0, now.position.1 - prev.position.1);
    if obj.held {
        match &spec.kind {
            ObjectKind::Free => {
                obj.dx = (obj.dx + mx).max(-spec.anchor.0).min(size - spec.extent.0 - spec.anchor.0);
                obj.dy = (obj.dy + my).max(-spec.anchor.1).min(size - spec.extent.1 - spec.anchor.1);
            }
            ObjectKind::Articulated { axis, max_offset, .. } => {
                let along = match axis {
                    dexworld::worldsim::Axis::X => mx,
                    dexworld::worldsim::Axis::Y => my,
                };
                obj.s = (obj.s + along as f32 / *max_offset as f32).max(0.0).min(1.0);
            }
        }
        if now.aperture > cfg.grasp_open {
            obj.held = false;
        }
        return;
    }
    if prev.aperture >= cfg.grasp_close && now.aperture < cfg.grasp_close {
        let (hx, hy) = now.position;
        let (gx, gy, gw, gh) = match &spec.kind {
            ObjectKind::Free => (spec.anchor.0 + obj.dx, spec.anchor.1 + obj.dy, spec.extent.0, spec.extent.1),
            ObjectKind::Articulated { handle, axis, max_offset, .. } => {
                let d = (obj.s * *max_offset as f32).round() as i32;
                let (px, py) = match axis {
                    dexworld::worldsim::Axis::X => (d, 0),
                    dexworld::worldsim::Axis::Y => (0, d),
                };
                (handle.x + px, handle.y + py, handle.w, handle.h)
            }
        };
        obj.held = hx >= gx && hx < gx + gw && hy >= gy && hy < gy + gh;
    }
}

fn ref_world_pixel(world: &WorldState, obj: &RefObject, x: i32, y: i32) -> Rgb {
    let size = world.size() as i32;
    let i = ((y * size + x) * 3) as usize;
    let bg = world.background();
    let mut c = [bg[i], bg[i + 1], bg[i + 2]];
    let spec = &world.objects[0].spec;
    let inside = |ax: i32, ay: i32, w: i32, h: i32| x >= ax && x < ax + w && y >= ay && y < ay + h;
    match &spec.kind {
        ObjectKind::Free => {
            if inside(spec.anchor.0 + obj.dx, spec.anchor.1 + obj.dy, spec.extent.0, spec.extent.1) {
                c = spec.color;
            }
        }
        ObjectKind::Articulated { handle, axis, max_offset, interior_color, handle_color } => {
            let d = (obj.s * *max_offset as f32).round() as i32;
            let (px, py) = match axis {
                dexworld::worldsim::Axis::X => (d, 0),
                dexworld::worldsim::Axis::Y => (0, d),
            };
            if inside(spec.anchor.0, spec.anchor.1, spec.extent.0, spec.extent.1) {
                c = *interior_color;
            }
            if inside(spec.anchor.0 + px, spec.anchor.1 + py, spec.extent.0, spec.extent.1) {
                c = spec.color;
            }
            if inside(handle.x + px, handle.y + py, handle.w, handle.h) {
                c = *handle_color;
            }
        }
    }
    c
}

/// Hand sprite color at view pixel `(x, y)`, if covered.
fn ref_hand_pixel(hand: &HandState, cam: (i32, i32), cfg: &WorldConfig, x: i32, y: i32) -> Option<Rgb> {
    let sp = &cfg.hand;
    let a = hand.aperture.max(0.0).min(1.0);
    let gap = sp.gap_base + (a * sp.gap_span as f32).round() as i32;
    let (cx, cy) = (hand.position.0 - cam.0, hand.position.1 - cam.1);
    let top = cy - sp.finger_length / 2;
    if y < top || y >= top + sp.finger_length {
        return None;
    }
    let left = cx - gap / 2 - sp.finger_width;
    let right = cx + gap - gap / 2;
    let on_bar = (x >= left && x < left + sp.finger_width) || (x >= right && x < right + sp.finger_width);
    if !on_bar {
        return None;
    }
    if y == top {
        return Some(sp.tip_color);
    }
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = snap(sp.closed_color[k] + a * (sp.open_color[k] - sp.closed_color[k]));
    }
    Some(c)
}

fn simulator_oracle() -> Check {
    let cfg = WorldConfig { world_size: 16, view_size: 16, object_count_range: (1, 1), ..WorldConfig::compact() };
    let view = cfg.view_size as i32;
    let mut exact = 0;
    let mut seed = 0u64;
    let mut scenes = 0;
    while scenes < 50 {
        seed += 1;
        let Ok(scene) = sample_scene(seed, &cfg) else { continue };
        let task = if scene.objects[0].spec.is_articulated() { Task::OpenArticulated } else { Task::PickPlace };
        let Ok(script) = sample_action_script(&scene, seed, task, CameraMotion::Fixed, &cfg) else { continue };
        scenes += 1;
        let tri = rollout_triplet(&scene, &script, &cfg).map_err(err)?;
        let mut obj = RefObject { dx: 0, dy: 0, s: 0.0, held: false };
        if let Pose::Opening { s } = scene.objects[0].pose {
            obj.s = s;
        }
        let initial = obj;
        let mut ok = true;
        for t in 0..script.len() {
            let hand = script.hand_traj[t];
            if t > 0 {
                ref_step(&mut obj, &scene.objects[0].spec, &script.hand_traj[t - 1], &hand, &cfg, scene.size() as i32);
            }
            let cam = script.camera_traj[t].offset;
            let (fi, fs, fh) = (tri.interaction.frame(t), tri.static_scene.frame(t), tri.hand.frame(t));
            for y in 0..view {
                for x in 0..view {
                    let (wx, wy) = (x + cam.0, y + cam.1);
                    let hand_px = ref_hand_pixel(&hand, cam, &cfg, x, y);
                    let want_i = hand_px.unwrap_or_else(|| ref_world_pixel(&scene, &obj, wx, wy));
                    let want_s = ref_world_pixel(&scene, &initial, wx, wy);
                    let want_h = hand_px.unwrap_or([0.0; 3]);
                    let (ux, uy) = (x as usize, y as usize);
                    ok &= fi.pixel(ux, uy) == want_i && fs.pixel(ux, uy) == want_s && fh.pixel(ux, uy) == want_h;
                }
            }
        }
        exact += ok as usize;
    }
    Ok((exact == 50, format!("{exact}/50 single-object 16x16 rollouts pixel-exact")))
}

fn fixed_camera_static() -> Check {
    let cfg = WorldConfig::compact();
    let ds = build_fixedcam_split(100, 40_000, &cfg, &TaskMix::fixed_camera(), Split::Test).map_err(err)?;
    let constant = ds
        .records
        .iter()
        .filter(|r| {
            (1..r.static_scene.num_frames()).all(|t| r.static_scene.frame_slice(t) == r.static_scene.frame_slice(0))
        })
        .count();
    Ok((constant == ds.len(), format!("{constant}/{} fixed-camera static videos constant over time", ds.len())))
}

fn static_preservation() -> Check {
    let cfg = WorldConfig::compact();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = 0;
    let mut visible_hand = 0;
    for i in 0..100u64 {
        let scene = sample_scene(50_000 + i, &cfg).map_err(err)?;
        let nav = sample_action_script(&scene, i, Task::NavOnly, CameraMotion::Pan, &cfg).map_err(err)?;
        let half = cfg.view_size as i32 / 2;
        let (c0x, c0y) = nav.camera_traj[0].offset;
        let (mut hx, mut hy) = (c0x + half + rng.gen_range(-4..=4), c0y + half + rng.gen_range(-4..=4));
        let mut hand = Vec::with_capacity(cfg.num_frames);
        for _ in 0..cfg.num_frames {
            hx += rng.gen_range(-2..=2);
            hy += rng.gen_range(-2..=2);
            // Apertures stay open, so the hand never grasps anything.
            hand.push(HandState::new(hx, hy, rng.gen_range(cfg.grasp_open..=1.0)));
        }
        let script = ActionScript { hand_traj: hand, ..nav };
        let tri = rollout_triplet(&scene, &script, &cfg).map_err(err)?;
        let mask = render_hand_mask_video(&script, &cfg).map_err(err)?;
        visible_hand += mask.data().iter().any(|&m| m > 0.0) as usize;
        let same = tri
            .interaction
            .data()
            .iter()
            .zip(tri.static_scene.data())
            .zip(mask.data())
            .all(|((a, b), m)| *m > 0.0 || a == b);
        ok += same as usize;
    }
    Ok((
        ok == 100,
        format!("{ok}/100 non-touching scripts match static off the hand ({visible_hand} with the hand in view)"),
    ))
}

// ---------------------------------------------------------------------------
// Codec and diffusion numerics

fn codec_checks(codec: &Codec, val: &[TripletRecord]) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = 0;
    for _ in 0..100 {
        let data: Vec<f32> = (0..8 * 16 * 16 * 3).map(|_| rng.gen::<f32>()).collect();
        let v = VideoTensor::from_vec(8, 16, 16, data).map_err(err)?;
        let back = unpatchify(&patchify(&v, 2, 2).map_err(err)?, 2, 2).map_err(err)?;
        let p = Codec::patchify(2, 2);
        let back2 = p.decode(&p.encode(&v).map_err(err)?).map_err(err)?;
        exact += (back == v && back2 == v) as usize;
    }
    let mut ps = Vec::new();
    for r in val {
        let rec = codec.decode(&codec.encode(&r.interaction).map_err(err)?).map_err(err)?;
        ps.push(psnr(&rec, &r.interaction).map_err(err)?);
    }
    let learned = mean(&ps);
    Ok((
        exact == 100 && learned >= 25.0,
        format!("patchify round trip {exact}/100 exact; learned codec validation PSNR {learned:.2} dB (>= 25)"),
    ))
}

fn diffusion_numerics() -> Check {
    let sched = build_schedule(1000, 1e-4, 2e-2).map_err(err)?;
    let monotone = (2..=1000).all(|t| sched.alpha_bar(t) < sched.alpha_bar(t - 1)) && sched.alpha_bar(1000) < 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_var: f64 = 0.0;
    for t in [1usize, 10, 250, 500, 1000] {
        let z0 = vec![0.3f32; 10_000];
        let eps: Vec<f32> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let zt = sched.q_sample(&z0, t, &eps).map_err(err)?;
        let m = zt.iter().map(|&v| v as f64).sum::<f64>() / 1e4;
        let var = zt.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (1e4 - 1.0);
        let want = 1.0 - sched.alpha_bar(t);
        worst_var = worst_var.max((var / want - 1.0).abs());
    }
    let mut worst_grad: f64 = 0.0;
    for mode in ConditioningMode::ALL {
        let cfg = DenoiserConfig {
            latent_channels: 3,
            token_patch: 2,
            model_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            label_vocab: 3,
            conditioning_mode: mode,
            label_dropout: 0.0,
        };
        let mut dit = Dit::<f64>::new(cfg, 11).map_err(err)?;
        dit.randomize(0.2, &mut rng);
        let (n, f, h, w) = (2, 2, 4, 4);
        let mut gauss = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let hand = (!mode.uses_hand_latent()).then(|| (gauss(n * 4 * 4), 4));
        let batch = DitBatch {
            n,
            f,
            h,
            w,
            z_t: gauss(n * f * 3 * h * w),
            cond: gauss(n * f * cfg.cond_channels() * h * w),
            t: vec![17, 640],
            labels: vec![1, 3],
            hand,
        };
        let target = gauss(batch.z_t.len());
        let (_, grads) = dit.loss_and_grads(&batch, &target).map_err(err)?;
        let sizes: Vec<usize> = dit.params.tensors().iter().map(|t| t.numel()).collect();
        let coords: Vec<(usize, usize, f64)> = (0..16)
            .map(|_| {
                let ti = rng.gen_range(0..sizes.len());
                (ti, rng.gen_range(0..sizes[ti]), if rng.gen::<bool>() { 1.0 } else { -1.0 })
            })
            .collect();
        let analytic: f64 = coords.iter().map(|&(ti, i, v)| grads.buffers()[ti][i] * v).sum();
        let step = 1e-5;
        let shifted = |sign: f64| {
            let mut p = dit.clone();
            for &(ti, i, v) in &coords {
                p.params.tensors_mut()[ti].data[i] += sign * step * v;
            }
            p.loss(&batch, &target).expect("loss")
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * step);
        worst_grad = worst_grad.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12));
    }
    Ok((
        monotone && worst_var <= 0.05 && worst_grad <= 1e-3,
        format!(
            "alpha_bar monotone {monotone}; q_sample variance off by at most {:.2}% (<= 5%); gradient relative error {worst_grad:.1e} (<= 1e-3)",
            worst_var * 100.0
        ),
    ))
}

// ---------------------------------------------------------------------------
// Formats

fn formats() -> Check {
    let cfg = WorldConfig::compact();
    let recs = build_synthetic_split(6, 60_000, &cfg, &TaskMix::synthetic(), Split::Test).map_err(err)?.records;
    let mut dwt_ok = true;
    for r in &recs {
        let bytes = r.to_bytes().map_err(err)?;
        let back = TripletRecord::from_bytes(&bytes).map_err(err)?;
        dwt_ok &= back == *r && back.to_bytes().map_err(err)? == bytes;
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        dwt_ok &= TripletRecord::from_bytes(&bad).is_err();
    }

    let den = DenoiserConfig { model_dim: 32, heads: 2, depth: 1, token_patch: 2, ..DenoiserConfig::default() };
    let mut model =
        WorldModel::new(Codec::patchify(2, 2), LatentScaling::unit_range(), den, ScheduleConfig::default(), 3)
            .map_err(err)?;
    let bytes = model.to_checkpoint().map_err(err)?.to_bytes();
    let back = WorldModel::from_checkpoint(&dexworld::checkpoint::Checkpoint::from_bytes(&bytes).map_err(err)?)
        .map_err(err)?;
    let mut ckpt_ok = back.to_checkpoint().map_err(err)?.to_bytes() == bytes;
    let mut bad = bytes.clone();
    let last = bad.len() - 9;
    bad[last] ^= 0x01;
    ckpt_ok &= matches!(dexworld::checkpoint::Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. }));

    let tcfg = TrainConfig { steps: 20, batch: 4, lr: 1e-3, warmup: 2, seed: 9, ..TrainConfig::default() };
    let source = model.dwm_examples(&recs, None).map_err(err)?;
    let schedule = model.schedule.clone();
    let mut straight = model.start_training(tcfg).map_err(err)?;
    straight.run_until(20, &source, &schedule, |_| Ok(())).map_err(err)?;
    let mut first = model.start_training(tcfg).map_err(err)?;
    first.run_until(10, &source, &schedule, |_| Ok(())).map_err(err)?;
    let saved = first.to_checkpoint().map_err(err)?.to_bytes();
    let mut resumed = TrainState::from_checkpoint(&dexworld::checkpoint::Checkpoint::from_bytes(&saved).map_err(err)?)
        .map_err(err)?;
    resumed.run_until(20, &source, &schedule, |_| Ok(())).map_err(err)?;
    let losses = |s: &TrainState| s.history.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
    let resume_ok = losses(&straight) == losses(&resumed) && straight.dit.params == resumed.dit.params;
    model.dit.params = resumed.dit.params.clone();
    Ok((
        dwt_ok && ckpt_ok && resume_ok,
        format!("record round trip {dwt_ok}; checkpoint round trip and checksum rejection {ckpt_ok}; 10-step resume identical {resume_ok}"),
    ))
}

// ---------------------------------------------------------------------------
// Training-based criteria

struct Data {
    world: WorldConfig,
    syn_train: Vec<TripletRecord>,
    fix_train: Vec<TripletRecord>,
    val: Vec<TripletRecord>,
    syn_test: Vec<TripletRecord>,
    fix_test: Vec<TripletRecord>,
    nav_test: Vec<TripletRecord>,
}

impl Data {
    fn build() -> Result<Self, String> {
        let w = WorldConfig::compact();
        let syn = |n, seed, split| build_synthetic_split(n, seed, &w, &TaskMix::synthetic(), split).map(|d| d.records);
        let fix =
            |n, seed, split| build_fixedcam_split(n, seed, &w, &TaskMix::fixed_camera(), split).map(|d| d.records);
        Ok(Self {
            syn_train: syn(256, 1_000, Split::Train).map_err(err)?,
            fix_train: fix(128, 5_000, Split::Train).map_err(err)?,
            val: syn(16, 8_000, Split::Val).map_err(err)?,
            syn_test: syn(32, 9_000, Split::Test).map_err(err)?,
            fix_test: fix(16, 9_500, Split::Test).map_err(err)?,
            nav_test: build_synthetic_split(20, 7_000, &w, &TaskMix::only(Task::NavOnly), Split::Test)
                .map_err(err)?
                .records,
            world: w,
        })
    }

    fn hybrid(&self) -> Vec<TripletRecord> {
        self.syn_train.iter().chain(&self.fix_train).cloned().collect()
    }

    fn train_videos(&self) -> Vec<VideoTensor> {
        self.syn_train.iter().chain(&self.fix_train).map(|r| r.interaction.clone()).collect()
    }

    fn held_out(&self) -> Vec<TripletRecord> {
        self.syn_test.iter().chain(&self.fix_test).cloned().collect()
    }
}

const PRETRAIN_STEPS: u64 = 600;
const FINETUNE_STEPS: u64 = 4000;
const SEEDS: [u64; 3] = [0, 1, 2];

fn train_cfg(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig { steps, batch: 8, lr: 2e-3, warmup: 50, seed, ..TrainConfig::default() }
}

fn base_model() -> Result<WorldModel, String> {
    WorldModel::new(
        Codec::patchify(2, 2),
        LatentScaling::unit_range(),
        DenoiserConfig::compact(),
        ScheduleConfig::default(),
        0,
    )
    .map_err(err)
}

fn identity_psnr(model: &WorldModel, videos: &[&VideoTensor]) -> Result<f64, String> {
    let bundles = videos
        .iter()
        .map(|v| {
            let z = model.encode(v)?;
            let (f, _, h, w) = z.shape();
            Ok(ConditioningBundle {
                c_s: z,
                c_h: None,
                mask: ConditioningBundle::full_mask(f, h, w),
                hand_params: None,
                label: None,
            })
        })
        .collect::<dexworld::Result<Vec<_>>>()
        .map_err(err)?;
    let seeds: Vec<u64> = (0..bundles.len() as u64).collect();
    let out = model.generate_batch(&bundles, &SampleConfig::default(), &seeds).map_err(err)?;
    let ps = out.iter().zip(videos).map(|(o, v)| psnr(o, v)).collect::<dexworld::Result<Vec<_>>>().map_err(err)?;
    Ok(mean(&ps))
}

/// Fine-tunes a copy of `init` in `mode`, scoring `probe_records` after each
/// listed step.
fn finetune(
    init: &WorldModel,
    mode: ConditioningMode,
    records: &[TripletRecord],
    weight: Option<f64>,
    checkpoints: &[u64],
    mut probe: impl FnMut(&WorldModel) -> Result<f64, String>,
) -> Result<(WorldModel, Vec<f64>), String> {
    let mut model = init.clone();
    model.set_mode(mode);
    let cfg = train_cfg(FINETUNE_STEPS, 2);
    let mut state = model.start_training(cfg).map_err(err)?;
    let snapshot = model.clone();
    let source = snapshot.dwm_examples(records, weight).map_err(err)?;
    let mut scores = Vec::new();
    for &until in checkpoints {
        model.train_stage(&mut state, &source, until, |_| Ok(())).map_err(err)?;
        scores.push(probe(&model)?);
    }
    if state.step < FINETUNE_STEPS {
        model.train_stage(&mut state, &source, FINETUNE_STEPS, |_| Ok(())).map_err(err)?;
    }
    Ok((model, scores))
}

fn evaluate(model: &WorldModel, records: &[TripletRecord], seeds: &[u64], codec: &Codec) -> Result<EvalOutput, String> {
    let ctx = EvalContext { perceptual: Some(codec), probe: None };
    batch_evaluate(&Generator::Model { model, sample: SampleConfig::default() }, records, seeds, &ctx).map_err(err)
}

fn perceptual_of(out: &EvalOutput) -> f64 {
    mean(&out.records.iter().map(|r| r.perceptual.unwrap_or(f64::NAN)).collect::<Vec<_>>())
}

fn seed_std(out: &EvalOutput) -> f64 {
    let k = out.records[0].seed_perceptual.len();
    let per_seed: Vec<f64> =
        (0..k).map(|s| mean(&out.records.iter().map(|r| r.seed_perceptual[s]).collect::<Vec<_>>())).collect();
    let m = mean(&per_seed);
    (per_seed.iter().map(|v| (v - m).powi(2)).sum::<f64>() / per_seed.len() as f64).sqrt()
}

fn residual_dynamics(model: &WorldModel, data: &Data, codec: &Codec) -> Check {
    let moving: Vec<TripletRecord> =
        data.syn_test.iter().filter(|r| r.static_scene != r.interaction).cloned().collect();
    let ctx = EvalContext { perceptual: Some(codec), probe: None };
    let m = evaluate(model, &moving, &SEEDS, codec)?;
    let b = batch_evaluate(&Generator::CopyStatic, &moving, &SEEDS, &ctx).map_err(err)?;
    let wins = m.records.iter().zip(&b.records).filter(|(x, y)| x.perceptual < y.perceptual).count();
    let frac = wins as f64 / moving.len() as f64;
    Ok((
        frac >= 0.8,
        format!(
            "model beats copy-static on {wins}/{} records with motion ({:.0}% >= 80%); mean perceptual {:.4} vs {:.4}",
            moving.len(),
            frac * 100.0,
            perceptual_of(&m),
            perceptual_of(&b)
        ),
    ))
}

fn disentanglement(model: &WorldModel, data: &Data, codec: &Codec) -> Check {
    let sc = SampleConfig::default();
    let mut nav_psnr = Vec::new();
    let mut closer = 0;
    let mut cases = 0;
    for (i, rec) in data.nav_test.iter().enumerate() {
        let out = model.generate(&model.bundle_for_record(rec).map_err(err)?, &sc, i as u64).map_err(err)?;
        nav_psnr.push(psnr(&out, &rec.static_scene).map_err(err)?);

        let scene = rec.scene_state().map_err(err)?;
        let script = [Task::PickPlace, Task::OpenArticulated]
            .into_iter()
            .find_map(|t| sample_action_script(&scene, rec.seed, t, CameraMotion::Pan, &data.world).ok());
        let Some(script) = script else { continue };
        let manip =
            record_from_script(format!("{}-manip", rec.id), &scene, &script, rec.seed, Source::SynDynamic, &data.world)
                .map_err(err)?;
        let out = model.generate(&model.bundle_for_record(&manip).map_err(err)?, &sc, i as u64).map_err(err)?;
        let to_gt = perceptual_distance(&out, &manip.interaction, codec).map_err(err)?;
        let to_static = perceptual_distance(&out, &manip.static_scene, codec).map_err(err)?;
        closer += (to_gt < to_static) as usize;
        cases += 1;
    }
    let min = nav_psnr.iter().copied().fold(f64::INFINITY, f64::min);
    let frac = closer as f64 / cases.max(1) as f64;
    Ok((
        min >= 20.0 && frac >= 0.7,
        format!(
            "navigation-only PSNR to static mean {:.2} min {min:.2} dB (>= 20); manipulation closer to GT on {closer}/{cases} ({:.0}% >= 70%)",
            mean(&nav_psnr),
            frac * 100.0
        ),
    ))
}

fn ranking(model: &WorldModel, data: &Data, codec: &Codec) -> Check {
    let scorer = Scorer { perceptual: Some(codec), ..Default::default() };
    let mut oracle = 0;
    let mut learned = 0;
    let episodes = 25;
    for e in 0..episodes {
        let ep = image_goal_episode(70_000 + e, 4, &data.world).map_err(err)?;
        let r = rank_actions(
            &Rollouts::Oracle,
            &ep.scene,
            &ep.candidates,
            &ep.goal,
            &scorer,
            Source::SynDynamic,
            &data.world,
        )
        .map_err(err)?;
        oracle += (r.best_index == ep.goal_index) as usize;
        let rollouts = Rollouts::Model { model, sample: SampleConfig::default(), seed: e };
        let r = rank_actions(&rollouts, &ep.scene, &ep.candidates, &ep.goal, &scorer, Source::SynDynamic, &data.world)
            .map_err(err)?;
        learned += (r.best_index == ep.goal_index) as usize;
    }
    let frac = learned as f64 / episodes as f64;
    Ok((
        oracle == episodes as usize && frac >= 0.6,
        format!(
            "oracle rollouts {oracle}/{episodes} correct; model rollouts {learned}/{episodes} ({:.0}% >= 60%, chance 25%)",
            frac * 100.0
        ),
    ))
}

#[test]
fn acceptance_criteria() {
    let started = Instant::now();
    let mut lines = vec![
        run("1 simulator oracle equivalence", simulator_oracle),
        run("2 fixed-camera static identity", fixed_camera_static),
        run("3 static preservation without contact", static_preservation),
        run("5 diffusion numerics", diffusion_numerics),
        run("13 formats and resume", formats),
    ];

    let data = Data::build().expect("datasets");
    let t0 = Instant::now();
    let (codec, _) = train_codec(&data.train_videos(), CodecConfig::learned(2, 2, 8), &CodecTrainConfig::default())
        .expect("perceptual codec");
    report!("     trained perceptual codec in {:.1}s", t0.elapsed().as_secs_f64());
    lines.push(run("4 codec", || codec_checks(&codec, &data.val)));

    let base = base_model().expect("base model");
    let mut inpaint = base.clone();
    lines.push(run("6 inpainting identity prior", || {
        pretrain_inpainting(&mut inpaint, data.train_videos(), MaskSampler::default(), train_cfg(PRETRAIN_STEPS, 1))
            .map_err(err)?;
        let held: Vec<&VideoTensor> = data.syn_test.iter().map(|r| &r.interaction).collect();
        let trained = identity_psnr(&inpaint, &held)?;
        let untrained = identity_psnr(&base, &held)?;
        Ok((
            trained >= 22.0 && trained - untrained >= 10.0,
            format!("self-conditioned PSNR {trained:.2} dB (>= 22) vs untrained {untrained:.2} dB (gap >= 10)"),
        ))
    }));

    let t0 = Instant::now();
    let mut i2v = base.clone();
    pretrain_i2v(&mut i2v, &data.train_videos(), train_cfg(PRETRAIN_STEPS, 1)).expect("i2v pretraining");
    report!("     pretrained first-frame model in {:.1}s", t0.elapsed().as_secs_f64());

    let hybrid = data.hybrid();
    let marks = [FINETUNE_STEPS / 4, FINETUNE_STEPS / 2, FINETUNE_STEPS];
    let val_score = |m: &WorldModel| evaluate(m, &data.val, &[0], &codec).map(|o| perceptual_of(&o));
    let t0 = Instant::now();
    let (mesh, mesh_curve) = finetune(&inpaint, ConditioningMode::MeshRender, &hybrid, Some(0.5), &marks, val_score)
        .expect("mesh fine-tune");
    report!("     fine-tuned mesh-conditioned model in {:.1}s", t0.elapsed().as_secs_f64());

    lines.push(run("7 residual dynamics vs copy-static", || residual_dynamics(&mesh, &data, &codec)));
    lines.push(run("8 navigation/manipulation split", || disentanglement(&mesh, &data, &codec)));

    lines.push(run("9 conditioning ablation", || {
        let held = data.held_out();
        let (mask, _) = finetune(&inpaint, ConditioningMode::Mask, &hybrid, Some(0.5), &[], |_| Ok(0.0))?;
        let (global, _) = finetune(&inpaint, ConditioningMode::ModulateGlobal, &hybrid, Some(0.5), &[], |_| Ok(0.0))?;
        let scores = [&mesh, &mask, &global]
            .iter()
            .map(|m| evaluate(m, &held, &SEEDS, &codec).map(|o| (perceptual_of(&o), seed_std(&o))))
            .collect::<Result<Vec<_>, String>>()?;
        let [(pm, sm), (pk, sk), (pg, sg)] = [scores[0], scores[1], scores[2]];
        Ok((
            pm <= pk && pm <= pg,
            format!("perceptual mesh {pm:.4}±{sm:.4}, mask {pk:.4}±{sk:.4}, global modulation {pg:.4}±{sg:.4}"),
        ))
    }));

    lines.push(run("10 initialization ablation", || {
        let (_, i2v_curve) = finetune(&i2v, ConditioningMode::MeshRender, &hybrid, Some(0.5), &marks, val_score)?;
        let better = mesh_curve.iter().zip(&i2v_curve).filter(|(a, b)| a <= b).count();
        let fmt = |c: &[f64]| c.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join("/");
        Ok((
            better * 2 > marks.len(),
            format!(
                "validation perceptual at 25/50/100%: inpainting init {} vs first-frame init {} ({better}/3 no worse)",
                fmt(&mesh_curve),
                fmt(&i2v_curve)
            ),
        ))
    }));

    lines.push(run("11 data composition", || {
        let (syn_only, _) = finetune(&inpaint, ConditioningMode::MeshRender, &data.syn_train, None, &[], |_| Ok(0.0))?;
        let h = perceptual_of(&evaluate(&mesh, &data.fix_test, &SEEDS, &codec)?);
        let s = perceptual_of(&evaluate(&syn_only, &data.fix_test, &SEEDS, &codec)?);
        Ok((h < s, format!("fixed-camera test perceptual: hybrid {h:.4} vs synthetic-only {s:.4}")))
    }));

    lines.push(run("12 action ranking", || ranking(&mesh, &data, &codec)));

    lines.sort_by_key(|l| l.name.split(' ').next().and_then(|n| n.parse::<u32>().ok()).unwrap_or(0));
    report!("\nacceptance summary ({:.0}s total)", started.elapsed().as_secs_f64());
    for l in &lines {
        report!("{} {:<44} {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.name).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
