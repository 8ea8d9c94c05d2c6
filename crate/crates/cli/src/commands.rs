use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use dexworld::codec::{train_codec, Codec};
use dexworld::dataset::{
    build_fixedcam_split, build_heldout_split, build_synthetic_split, record_from_script, Dataset, Manifest, Source,
    Split, TripletRecord,
};
use dexworld::diffusion::{ExampleSource, LatentScaling, TrainState, WorldModel};
use dexworld::evaluator::{
    batch_evaluate, image_goal_episode, psnr, rank_actions, reports_to_csv, summary_text, train_probe, write_strip,
    EvalContext, Generator, GoalSpec, Probe, RankingResult, Rollouts, Scorer,
};
use dexworld::trainlog;
use dexworld::video::Frame;
use dexworld::worldsim::{ActionScript, Task, WorldState};
use dexworld::VideoTensor;

use crate::config::{LatentCodec, RunConfig};
use crate::error::{CliError, CliResult};
use crate::Stage;

pub const MANIFEST: &str = "manifest.txt";
pub const CODEC_CKPT: &str = "codec.ckpt";
pub const PROBE_CKPT: &str = "probe.ckpt";

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.data_path().join(MANIFEST)
}

fn load_manifest(path: &Path) -> CliResult<Manifest> {
    if !path.exists() {
        return Err(CliError::Data(format!("no manifest at {} (run gen-data first)", path.display())));
    }
    Ok(Manifest::load_file(path)?)
}

/// Records of `split` drawn from `sources`, in manifest order.
fn load_records(cfg: &RunConfig, split: Split, sources: &[Source]) -> CliResult<Vec<TripletRecord>> {
    let path = manifest_path(cfg);
    let manifest = load_manifest(&path)?;
    let dir = cfg.data_path();
    manifest
        .split(split)
        .filter(|e| sources.contains(&e.source))
        .map(|e| manifest.load(&dir, e).map_err(CliError::from))
        .collect()
}

fn train_videos(cfg: &RunConfig) -> CliResult<Vec<VideoTensor>> {
    let recs = load_records(cfg, Split::Train, &[Source::SynDynamic, Source::FixedCam])?;
    if recs.is_empty() {
        return Err(CliError::Data("the training split is empty".into()));
    }
    Ok(recs.into_iter().map(|r| r.interaction).collect())
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} not found at {}", path.display())))
    }
}

fn load_model(path: &Path) -> CliResult<WorldModel> {
    require(path, "model checkpoint")?;
    Ok(WorldModel::load(path)?)
}

fn optional_codec(cfg: &RunConfig) -> CliResult<Option<Codec>> {
    let path = cfg.output_dir.join(CODEC_CKPT);
    if path.exists() {
        Ok(Some(Codec::load(&path)?))
    } else {
        Ok(None)
    }
}

fn optional_probe(cfg: &RunConfig) -> CliResult<Option<Probe>> {
    let path = cfg.output_dir.join(PROBE_CKPT);
    if path.exists() {
        Ok(Some(Probe::load(&path)?))
    } else {
        Ok(None)
    }
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    let (w, d) = (&cfg.worldsim, &cfg.dataset);
    let parts = [
        build_synthetic_split(d.syn_train.n, d.syn_train.seed, w, &d.syn_mix, Split::Train)?,
        build_synthetic_split(d.syn_val.n, d.syn_val.seed, w, &d.syn_mix, Split::Val)?,
        build_synthetic_split(d.syn_test.n, d.syn_test.seed, w, &d.syn_mix, Split::Test)?,
        build_fixedcam_split(d.fix_train.n, d.fix_train.seed, w, &d.fix_mix, Split::Train)?,
        build_fixedcam_split(d.fix_test.n, d.fix_test.seed, w, &d.fix_mix, Split::Test)?,
        build_heldout_split(d.heldout_test.n, d.heldout_test.seed, w, &d.heldout_mix)?,
    ];
    let mut all = Dataset::default();
    for part in parts {
        all = all.merge(part).map_err(|e| CliError::Config(format!("dataset seed ranges overlap: {e}")))?;
    }
    all.manifest.weight = cfg.diffusion.weight;
    let dir = cfg.data_path();
    all.write(&dir, MANIFEST)?;
    cfg.write_resolved(&dir, "gen-data.resolved.toml")?;
    for split in [Split::Train, Split::Val, Split::Test] {
        info!("{}: {} records", split.name(), all.manifest.split(split).count());
    }
    info!("wrote {} records to {}", all.len(), dir.display());
    Ok(())
}

fn base_model(cfg: &RunConfig) -> CliResult<WorldModel> {
    let dc = &cfg.diffusion;
    let (codec, scaling) = match dc.latent_codec {
        LatentCodec::Patchify => (Codec::patchify(dc.patch.0, dc.patch.1), LatentScaling::unit_range()),
        LatentCodec::Learned => {
            let path = cfg.output_dir.join(CODEC_CKPT);
            if !path.exists() {
                return Err(CliError::Config("latent_codec = \"learned\" needs `train codec` first".into()));
            }
            let codec = Codec::load(&path)?;
            let scaling = LatentScaling::for_codec(&codec, &train_videos(cfg)?)?;
            (codec, scaling)
        }
    };
    Ok(WorldModel::new(codec, scaling, dc.denoiser, dc.schedule, cfg.seed)?)
}

pub fn train(cfg: &RunConfig, stage: Stage, resume: bool, from_scratch: bool, until: Option<u64>) -> CliResult<()> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out, &format!("train-{}.resolved.toml", stage.name()))?;
    match stage {
        Stage::Codec => train_codec_stage(cfg),
        Stage::Probe => train_probe_stage(cfg),
        _ => train_diffusion_stage(cfg, stage, resume, from_scratch, until),
    }
}

fn train_codec_stage(cfg: &RunConfig) -> CliResult<()> {
    let videos = train_videos(cfg)?;
    info!("training {:?} codec on {} videos", cfg.codec.model.mode, videos.len());
    let (codec, log) = train_codec(&videos, cfg.codec.model, &cfg.codec.train)?;
    codec.save(cfg.output_dir.join(CODEC_CKPT))?;
    std::fs::write(cfg.output_dir.join("codec.log.csv"), trainlog::to_csv(&log))?;
    let val = load_records(cfg, Split::Val, &[Source::SynDynamic, Source::FixedCam])?;
    if !val.is_empty() {
        let mut total = 0.0;
        for r in &val {
            total += psnr(&codec.decode(&codec.encode(&r.interaction)?)?, &r.interaction)?;
        }
        info!("validation reconstruction PSNR {:.2} dB", total / val.len() as f64);
    }
    Ok(())
}

fn train_probe_stage(cfg: &RunConfig) -> CliResult<()> {
    let train = load_records(cfg, Split::Train, &[Source::SynDynamic, Source::FixedCam])?;
    if train.is_empty() {
        return Err(CliError::Data("the training split is empty".into()));
    }
    let videos: Vec<&VideoTensor> = train.iter().map(|r| &r.interaction).collect();
    let labels: Vec<usize> = train.iter().map(|r| r.label).collect();
    info!("training label probe on {} videos", videos.len());
    let probe = train_probe(&videos, &labels, Task::ALL.len(), cfg.evaluator.probe)?;
    probe.save(cfg.output_dir.join(PROBE_CKPT))?;
    let val = load_records(cfg, Split::Val, &[Source::SynDynamic, Source::FixedCam])?;
    if !val.is_empty() {
        let mut correct = 0;
        for r in &val {
            correct += (probe.classify(&r.interaction)? == r.label) as usize;
        }
        info!("validation accuracy {correct}/{}", val.len());
    }
    Ok(())
}

fn write_log(path: &Path, state: &TrainState) -> dexworld::Result<()> {
    std::fs::write(path, trainlog::to_csv(&state.history))?;
    Ok(())
}

fn train_diffusion_stage(
    cfg: &RunConfig,
    stage: Stage,
    resume: bool,
    from_scratch: bool,
    until: Option<u64>,
) -> CliResult<()> {
    let out = &cfg.output_dir;
    let name = stage.name();
    let state_path = out.join(format!("{name}.state"));
    let log_path = out.join(format!("{name}.log.csv"));
    let finetune = stage == Stage::Finetune;
    let tcfg = if finetune { cfg.diffusion.finetune } else { cfg.diffusion.pretrain };

    let mut model = if finetune && !from_scratch {
        let init = out.join(format!("{}.ckpt", cfg.diffusion.init.name()));
        if !init.exists() {
            return Err(CliError::Config(format!(
                "fine-tuning starts from {} which does not exist; run `train {}` first or pass --from-scratch",
                init.display(),
                cfg.diffusion.init.name().replace('_', "-")
            )));
        }
        WorldModel::load(&init)?
    } else {
        base_model(cfg)?
    };
    if finetune {
        model.set_mode(cfg.diffusion.denoiser.conditioning_mode);
    }

    let mut state = if resume {
        require(&state_path, "training state")?;
        let s = TrainState::load(&state_path)?;
        if s.cfg != tcfg {
            return Err(CliError::Config(format!(
                "{} was written with a different training config",
                state_path.display()
            )));
        }
        info!("resuming {name} at step {}", s.step);
        s
    } else {
        model.start_training(tcfg)?
    };

    let snapshot = model.clone();
    let source: Box<dyn ExampleSource + '_> = match stage {
        Stage::PretrainInpaint => Box::new(snapshot.inpainting_source(train_videos(cfg)?, cfg.diffusion.masks)?),
        Stage::PretrainI2v => Box::new(snapshot.i2v_examples(&train_videos(cfg)?)?),
        _ => {
            let sources: &[Source] =
                if cfg.diffusion.hybrid { &[Source::SynDynamic, Source::FixedCam] } else { &[Source::SynDynamic] };
            let records = load_records(cfg, Split::Train, sources)?;
            if records.is_empty() {
                return Err(CliError::Data("no training records".into()));
            }
            Box::new(snapshot.dwm_examples(&records, cfg.diffusion.hybrid.then_some(cfg.diffusion.weight))?)
        }
    };

    let target = until.unwrap_or(tcfg.steps).min(tcfg.steps);
    info!("{name}: steps {} -> {target}", state.step);
    let every = cfg.diffusion.checkpoint_every;
    let result = model.train_stage(&mut state, source.as_ref(), target, |s| {
        if s.step % every == 0 {
            s.save(&state_path)?;
            write_log(&log_path, s)?;
            info!("{name} step {} loss {:.5}", s.step, s.history.last().map_or(f64::NAN, |l| l.loss));
        }
        Ok(())
    });
    write_log(&log_path, &state)?;
    result?;
    state.save(&state_path)?;
    model.save(out.join(format!("{name}.ckpt")))?;
    info!("{name}: saved model at step {}", state.step);
    Ok(())
}

pub enum SampleTarget {
    Record(String),
    Script { scene: PathBuf, script: PathBuf },
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn find_record(cfg: &RunConfig, id: &str) -> CliResult<TripletRecord> {
    let manifest = load_manifest(&manifest_path(cfg))?;
    let entry = manifest.find(id).ok_or_else(|| CliError::Data(format!("no record {id:?} in the dataset")))?;
    Ok(manifest.load(&cfg.data_path(), entry)?)
}

fn default_model_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("finetune.ckpt")
}

pub fn sample(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    target: SampleTarget,
    out: Option<PathBuf>,
    sample_seed: Option<u64>,
) -> CliResult<VideoTensor> {
    let rec = match target {
        SampleTarget::Record(id) => find_record(cfg, &id)?,
        SampleTarget::Script { scene, script } => {
            let scene = WorldState::from_text(&read_text(&scene)?)?;
            let script = ActionScript::from_text(&read_text(&script)?)?;
            record_from_script("sample".into(), &scene, &script, cfg.seed, Source::SynDynamic, &cfg.worldsim)?
        }
    };
    let model = load_model(&checkpoint.unwrap_or_else(|| default_model_path(cfg)))?;
    let seed = sample_seed.unwrap_or(cfg.seed);
    let mut video = model.generate(&model.bundle_for_record(&rec)?, &cfg.diffusion.sample, seed)?;
    video.quantize_u8();

    let dir = out.unwrap_or_else(|| cfg.output_dir.join("samples").join(&rec.id));
    video.save_ppm_frames(&dir, "frame")?;
    write_strip(dir.join("strip.ppm"), &rec, &video)?;
    let generated = TripletRecord { id: format!("{}-generated", rec.id), interaction: video.clone(), ..rec.clone() };
    generated.save(dir.join("sample.dwt"))?;
    cfg.write_resolved(&dir, "sample.resolved.toml")?;
    println!("psnr_to_static = {:.3}", psnr(&video, &rec.static_scene)?);
    println!("psnr_to_ground_truth = {:.3}", psnr(&video, &rec.interaction)?);
    info!("wrote {}", dir.display());
    Ok(video)
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    copy_static: bool,
    manifest: Option<PathBuf>,
    label: Option<String>,
) -> CliResult<()> {
    let manifest_file = manifest.unwrap_or_else(|| manifest_path(cfg));
    let m = load_manifest(&manifest_file)?;
    let dir = manifest_file.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = m.load_split(&dir, cfg.eval_split()?)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("split {:?} is empty", cfg.evaluator.split)));
    }
    let codec = optional_codec(cfg)?;
    let probe = optional_probe(cfg)?;
    if codec.is_none() {
        warn!("no {CODEC_CKPT}; the perceptual metric is skipped");
    }
    let ctx = EvalContext { perceptual: codec.as_ref(), probe: probe.as_ref() };

    let ckpt = checkpoint.unwrap_or_else(|| default_model_path(cfg));
    let model = if copy_static { None } else { Some(load_model(&ckpt)?) };
    let generator = match &model {
        Some(model) => Generator::Model { model, sample: cfg.diffusion.sample },
        None => Generator::CopyStatic,
    };
    let label = label.unwrap_or_else(|| match model {
        Some(_) => ckpt.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
        None => "copy_static".into(),
    });
    let output = batch_evaluate(&generator, &records, &cfg.evaluator.seeds, &ctx)?;

    let out = cfg.output_dir.join("eval");
    std::fs::create_dir_all(&out)?;
    let csv = reports_to_csv(&label, &output.reports);
    std::fs::write(out.join(format!("{label}.csv")), &csv)?;
    std::fs::write(out.join(format!("{label}.summary.toml")), summary_text(&label, &output.reports))?;
    let mut per_record = String::from("id,arm,psnr,ssim,perceptual,semantic\n");
    for r in &output.records {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        per_record.push_str(&format!(
            "{},{},{:.6},{:.6},{},{}\n",
            r.id,
            r.arm,
            r.psnr,
            r.ssim,
            opt(r.perceptual),
            opt(r.semantic)
        ));
    }
    std::fs::write(out.join(format!("{label}.records.csv")), per_record)?;
    for rec in records.iter().take(cfg.evaluator.strips) {
        let video = generator.videos(rec, &cfg.evaluator.seeds[..1])?.remove(0);
        write_strip(out.join(format!("{label}_{}.ppm", rec.id)), rec, &video)?;
    }
    cfg.write_resolved(&out, &format!("{label}.resolved.toml"))?;
    print!("{csv}");
    Ok(())
}

/// On-disk list of candidate action scripts.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateFile {
    pub candidate: Vec<ActionScript>,
}

pub enum GoalArg {
    Image(PathBuf),
    Label(String),
}

fn read_image(path: &Path) -> CliResult<Frame> {
    let img = image::open(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Frame::from_vec(h as usize, w as usize, data)?)
}

pub fn rank(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    oracle: bool,
    scene: &Path,
    candidates: &Path,
    goal: GoalArg,
) -> CliResult<RankingResult> {
    let scene = WorldState::from_text(&read_text(scene)?)?;
    let file: CandidateFile = toml::from_str(&read_text(candidates)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", candidates.display())))?;
    let goal = match goal {
        GoalArg::Image(p) => GoalSpec::Image(read_image(&p)?),
        GoalArg::Label(name) => {
            let task = Task::from_name(&name).ok_or_else(|| {
                let names: Vec<&str> = Task::ALL.iter().map(|t| t.name()).collect();
                CliError::Config(format!("unknown task {name:?}; expected one of {names:?}"))
            })?;
            GoalSpec::TextLabel(task.label())
        }
    };
    let codec = optional_codec(cfg)?;
    let probe = optional_probe(cfg)?;
    match &goal {
        GoalSpec::Image(_) if codec.is_none() => {
            return Err(CliError::Config("image goals need `train codec` first".into()))
        }
        GoalSpec::TextLabel(_) if probe.is_none() => {
            return Err(CliError::Config("label goals need `train probe` first".into()))
        }
        _ => {}
    }
    let scorer = Scorer {
        perceptual: codec.as_ref(),
        probe: probe.as_ref(),
        whole_video_image_goal: cfg.evaluator.whole_video_image_goal,
    };
    let model = if oracle { None } else { Some(load_model(&checkpoint.unwrap_or_else(|| default_model_path(cfg)))?) };
    let rollouts = match &model {
        Some(model) => Rollouts::Model { model, sample: cfg.diffusion.sample, seed: cfg.seed },
        None => Rollouts::Oracle,
    };
    let result = rank_actions(&rollouts, &scene, &file.candidate, &goal, &scorer, Source::SynDynamic, &cfg.worldsim)?;
    for (i, s) in result.scores.iter().enumerate() {
        println!("candidate {i} score {s:.6}");
    }
    println!("best {}", result.best_index);
    std::fs::create_dir_all(&cfg.output_dir)?;
    cfg.write_resolved(&cfg.output_dir, "rank.resolved.toml")?;
    Ok(result)
}

pub fn make_episode(cfg: &RunConfig, out: &Path, candidates: usize, seed: u64) -> CliResult<()> {
    let ep = image_goal_episode(seed, candidates, &cfg.worldsim)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("scene.toml"), ep.scene.to_text()?)?;
    let file = CandidateFile { candidate: ep.candidates };
    std::fs::write(out.join("candidates.toml"), toml::to_string(&file).map_err(|e| CliError::Config(e.to_string()))?)?;
    if let GoalSpec::Image(frame) = &ep.goal {
        frame.save_ppm(out.join("goal.ppm"))?;
    }
    std::fs::write(out.join("goal_index.txt"), format!("{}\n", ep.goal_index))?;
    cfg.write_resolved(out, "make-episode.resolved.toml")?;
    info!("episode {seed}: goal is candidate {}", ep.goal_index);
    Ok(())
}
