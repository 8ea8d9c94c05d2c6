use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::probe::Probe;
use super::{perceptual_distance, psnr, psnr_per_frame, ssim};
use crate::codec::Codec;
use crate::dataset::TripletRecord;
use crate::diffusion::{SampleConfig, WorldModel};
use crate::error::{Error, Result};
use crate::video::{video_strip, VideoTensor};

/// Produces the video that is scored against each record's interaction video.
#[derive(Debug, Clone, Copy)]
pub enum Generator<'a> {
    Model {
        model: &'a WorldModel,
        sample: SampleConfig,
    },
    /// Returns the static-scene video unchanged.
    CopyStatic,
}

pub fn copy_static_baseline<'a>() -> Generator<'a> {
    Generator::CopyStatic
}

impl Generator<'_> {
    /// One output per seed. Each record is sampled in its own batch so the
    /// result does not depend on which other records are evaluated.
    pub fn videos(&self, rec: &TripletRecord, seeds: &[u64]) -> Result<Vec<VideoTensor>> {
        match self {
            Generator::CopyStatic => Ok(vec![rec.static_scene.clone(); seeds.len()]),
            Generator::Model { model, sample } => {
                let bundle = model.bundle_for_record(rec)?;
                let item_seeds: Vec<u64> = seeds.iter().map(|&s| crate::rng::derive_seed(s, &rec.id)).collect();
                model.generate_batch(&vec![bundle; seeds.len()], sample, &item_seeds)
            }
        }
    }
}

/// Optional scoring resources; missing ones leave their metric empty.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalContext<'a> {
    pub perceptual: Option<&'a Codec>,
    pub probe: Option<&'a Probe>,
}

/// Seed-averaged metrics of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordScore {
    pub id: String,
    pub arm: String,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: Option<f64>,
    pub semantic: Option<f64>,
    pub psnr_per_frame: Vec<f64>,
    /// Per-seed values, in seed order.
    pub seed_psnr: Vec<f64>,
    pub seed_perceptual: Vec<f64>,
}

/// Averages over the records of one benchmark arm.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub arm: String,
    pub records: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: Option<f64>,
    pub semantic: Option<f64>,
    pub psnr_per_frame: Vec<f64>,
    /// Deviation of the arm mean across seeds.
    pub psnr_seed_std: f64,
    pub perceptual_seed_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub reports: Vec<MetricReport>,
    /// Sorted by arm, then id.
    pub records: Vec<RecordScore>,
}

impl EvalOutput {
    pub fn report(&self, arm: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.arm == arm)
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn std(v: &[f64]) -> f64 {
    let m = mean(v.iter().copied());
    (mean(v.iter().map(|x| (x - m).powi(2)))).sqrt()
}

pub fn score_record(rec: &TripletRecord, outputs: &[VideoTensor], ctx: &EvalContext<'_>) -> Result<RecordScore> {
    let gt = &rec.interaction;
    let mut seed_psnr = Vec::new();
    let mut seed_ssim = Vec::new();
    let mut seed_perceptual = Vec::new();
    let mut seed_semantic = Vec::new();
    let mut frames = vec![0.0; gt.num_frames()];
    for v in outputs {
        seed_psnr.push(psnr(v, gt)?);
        seed_ssim.push(ssim(v, gt)?);
        for (acc, p) in frames.iter_mut().zip(psnr_per_frame(v, gt)?) {
            *acc += p / outputs.len() as f64;
        }
        if let Some(c) = ctx.perceptual {
            seed_perceptual.push(perceptual_distance(v, gt, c)?);
        }
        if let Some(p) = ctx.probe {
            seed_semantic.push(p.similarity(v, rec.label)?);
        }
    }
    Ok(RecordScore {
        id: rec.id.clone(),
        arm: rec.source.name().to_string(),
        psnr: mean(seed_psnr.iter().copied()),
        ssim: mean(seed_ssim),
        perceptual: ctx.perceptual.map(|_| mean(seed_perceptual.iter().copied())),
        semantic: ctx.probe.map(|_| mean(seed_semantic)),
        psnr_per_frame: frames,
        seed_psnr,
        seed_perceptual,
    })
}

/// Scores every record under every seed and averages per arm.
pub fn batch_evaluate(
    generator: &Generator<'_>,
    records: &[TripletRecord],
    seeds: &[u64],
    ctx: &EvalContext<'_>,
) -> Result<EvalOutput> {
    if records.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one seed".into()));
    }
    let mut scores = Vec::with_capacity(records.len());
    for rec in records {
        let outs = generator.videos(rec, seeds)?;
        scores.push(score_record(rec, &outs, ctx)?);
    }
    scores.sort_by(|a, b| (&a.arm, &a.id).cmp(&(&b.arm, &b.id)));
    let mut by_arm: BTreeMap<&str, Vec<&RecordScore>> = BTreeMap::new();
    for s in &scores {
        by_arm.entry(s.arm.as_str()).or_default().push(s);
    }
    let mut reports = Vec::new();
    for (arm, rs) in by_arm {
        let n_frames = rs[0].psnr_per_frame.len();
        let seed_means = |f: &dyn Fn(&RecordScore) -> &Vec<f64>| -> Vec<f64> {
            (0..seeds.len()).map(|k| mean(rs.iter().map(|r| f(r)[k]))).collect()
        };
        let has_perc = rs[0].perceptual.is_some();
        reports.push(MetricReport {
            arm: arm.to_string(),
            records: rs.len(),
            psnr: mean(rs.iter().map(|r| r.psnr)),
            ssim: mean(rs.iter().map(|r| r.ssim)),
            perceptual: has_perc.then(|| mean(rs.iter().map(|r| r.perceptual.unwrap_or(f64::NAN)))),
            semantic: rs[0].semantic.is_some().then(|| mean(rs.iter().map(|r| r.semantic.unwrap_or(f64::NAN)))),
            psnr_per_frame: (0..n_frames).map(|t| mean(rs.iter().map(|r| r.psnr_per_frame[t]))).collect(),
            psnr_seed_std: std(&seed_means(&|r| &r.seed_psnr)),
            perceptual_seed_std: has_perc.then(|| std(&seed_means(&|r| &r.seed_perceptual))),
        });
    }
    Ok(EvalOutput { reports, records: scores })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// One row per arm.
pub fn reports_to_csv(label: &str, reports: &[MetricReport]) -> String {
    let mut out = String::from("model,arm,records,psnr,ssim,perceptual,semantic,psnr_seed_std,perceptual_seed_std\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{label},{},{},{:.6},{:.6},{},{},{:.6},{}",
            r.arm,
            r.records,
            r.psnr,
            r.ssim,
            opt(r.perceptual),
            opt(r.semantic),
            r.psnr_seed_std,
            opt(r.perceptual_seed_std)
        );
    }
    out
}

/// `key = value` lines per arm, noting the proxy metrics in use.
pub fn summary_text(label: &str, reports: &[MetricReport]) -> String {
    let mut out = format!(
        "model = {label}\nperceptual_metric = \"learned codec latent distance\"\nsemantic_metric = \"label probe cosine similarity\"\n"
    );
    for r in reports {
        let _ = writeln!(out, "\n[{}]\nrecords = {}\npsnr = {:.4}\nssim = {:.4}", r.arm, r.records, r.psnr, r.ssim);
        if let Some(p) = r.perceptual {
            let _ = writeln!(out, "perceptual = {p:.6}");
        }
        if let Some(s) = r.semantic {
            let _ = writeln!(out, "semantic = {s:.4}");
        }
    }
    out
}

/// Saves a `static | hand | generated | ground truth` strip as PPM.
pub fn write_strip(path: impl AsRef<Path>, rec: &TripletRecord, generated: &VideoTensor) -> Result<()> {
    video_strip(&[&rec.static_scene, &rec.hand, generated, &rec.interaction])?.save_ppm(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_fixedcam_split, build_synthetic_split, Split, TaskMix};
    use crate::worldsim::WorldConfig;

    #[test]
    fn copy_static_reports_per_arm() {
        let w = WorldConfig::compact();
        let mut recs = build_synthetic_split(3, 0, &w, &TaskMix::synthetic(), Split::Test).unwrap().records;
        recs.extend(build_fixedcam_split(2, 50, &w, &TaskMix::fixed_camera(), Split::Test).unwrap().records);
        let out = batch_evaluate(&Generator::CopyStatic, &recs, &[1, 2, 3], &EvalContext::default()).unwrap();
        assert_eq!(out.reports.len(), 2);
        assert_eq!(out.report("syn_dynamic").unwrap().records, 3);
        let mut rev = recs.clone();
        rev.reverse();
        let back = batch_evaluate(&Generator::CopyStatic, &rev, &[3, 2, 1], &EvalContext::default()).unwrap();
        for (a, b) in out.reports.iter().zip(&back.reports) {
            assert!((a.psnr - b.psnr).abs() < 1e-12);
            assert!((a.ssim - b.ssim).abs() < 1e-12);
        }
        assert!(batch_evaluate(&Generator::CopyStatic, &[], &[1], &EvalContext::default()).is_err());
        let csv = reports_to_csv("static", &out.reports);
        assert_eq!(csv.lines().count(), 3);
    }
}
