//! The desk-scale acceptance report: ten pass/fail criteria, each with its
//! measured values.

use std::path::Path;
use std::time::Instant;

use digitwin_autodiff::{gradcheck::op_suite, Graph};
use digitwin_eval::{
    attention_heatmaps, chi_square_test, stats::pearson, ModelRef, ProbeMode, ProbeReport, ProbeSplit,
};
use digitwin_models::{
    cltt_loss, mask_tubes, Contrastive, EmbeddingBatch, Images, MaeConfig, TrainLog, ViT, ViTConfig, VideoMae,
};
use digitwin_sim::{generate_dataset, EpisodeDataset, Frame, NUM_VIEWPOINTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::pipeline::{self, Model, ModelKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    /// The sizes the criteria are stated at.
    Desk,
    /// Tiny sizes that exercise every step in seconds; thresholds still apply.
    Smoke,
}

/// Sizes and budgets of one acceptance run.
#[derive(Clone, Debug)]
pub struct Params {
    pub cltt_batches: usize,
    pub determinism_frames: usize,
    pub determinism_epochs: usize,
    pub learn_frames: usize,
    pub learn_epochs: usize,
    pub probe_per_subset: usize,
    pub sweep_sizes: Vec<usize>,
    pub mae_frames: usize,
    pub mae_epochs: usize,
    pub mae_heldout_clips: usize,
    pub twoafc_trials_per_viewpoint: usize,
    pub split_seeds: u64,
    pub heatmap_frames: usize,
    pub heads3_frames: usize,
    pub heads3_epochs: usize,
    /// Runtime budgets in seconds, by criterion.
    pub budget_s: [f64; 10],
}

impl Scale {
    pub fn params(self) -> Params {
        match self {
            Scale::Desk => Params {
                cltt_batches: 1000,
                determinism_frames: 8000,
                determinism_epochs: 2,
                learn_frames: 8000,
                learn_epochs: 10,
                probe_per_subset: 300,
                sweep_sizes: vec![0, 500, 2000, 8000],
                mae_frames: 2000,
                mae_epochs: 10,
                mae_heldout_clips: 16,
                twoafc_trials_per_viewpoint: 48,
                split_seeds: 100,
                heatmap_frames: 100,
                heads3_frames: 2000,
                heads3_epochs: 3,
                budget_s: [300.0, 60.0, 1200.0, 3600.0, 10800.0, 7200.0, f64::INFINITY, 1800.0, f64::INFINITY, 300.0],
            },
            Scale::Smoke => Params {
                cltt_batches: 50,
                determinism_frames: 40,
                determinism_epochs: 1,
                learn_frames: 96,
                learn_epochs: 1,
                probe_per_subset: 6,
                sweep_sizes: vec![0, 48, 96],
                mae_frames: 64,
                mae_epochs: 1,
                mae_heldout_clips: 2,
                twoafc_trials_per_viewpoint: 2,
                split_seeds: 5,
                heatmap_frames: 12,
                heads3_frames: 48,
                heads3_epochs: 1,
                budget_s: [f64::INFINITY; 10],
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} {:<24} {} [{:.1}s]",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub fn table(results: &[CriterionResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&r.line());
        out.push('\n');
    }
    let passed = results.iter().filter(|r| r.pass).count();
    out.push_str(&format!("passed {passed}/{}\n", results.len()));
    out
}

/// Models and data shared between criteria.
struct Shared<'a> {
    cfg: Config,
    params: Params,
    work: &'a Path,
    rearing: Option<EpisodeDataset>,
    probes: Option<Vec<EpisodeDataset>>,
    untrained: Option<(Model, ProbeReport)>,
    trained: Option<(Model, TrainLog, ProbeReport)>,
}

impl Shared<'_> {
    fn rearing(&mut self) -> Result<&EpisodeDataset> {
        if self.rearing.is_none() {
            self.rearing = Some(generate_dataset(
                self.cfg.data.condition,
                self.params.learn_frames,
                self.cfg.seed,
                &self.cfg.data.dataset,
            )?);
        }
        Ok(self.rearing.as_ref().expect("just filled"))
    }

    fn probes(&mut self) -> Result<&[EpisodeDataset]> {
        if self.probes.is_none() {
            self.probes = Some(pipeline::probe_sets(&self.cfg)?);
        }
        Ok(self.probes.as_deref().expect("just filled"))
    }

    fn untrained(&mut self) -> Result<&(Model, ProbeReport)> {
        if self.untrained.is_none() {
            let model = pipeline::init_model(&self.cfg, ModelKind::VitCot)?;
            self.probes()?;
            let report = pipeline::probe(&self.cfg, &model, self.probes.as_deref().expect("filled"))?;
            self.untrained = Some((model, report));
        }
        Ok(self.untrained.as_ref().expect("just filled"))
    }

    /// ViT-tiny trained on the full rearing set.
    fn trained(&mut self) -> Result<&(Model, TrainLog, ProbeReport)> {
        if self.trained.is_none() {
            let mut model = pipeline::init_model(&self.cfg, ModelKind::VitCot)?;
            self.rearing()?;
            let log = pipeline::train_model(&mut model, &self.rearing.as_ref().expect("filled").frames, None)?;
            self.probes()?;
            let report = pipeline::probe(&self.cfg, &model, self.probes.as_deref().expect("filled"))?;
            self.trained = Some((model, log, report));
        }
        Ok(self.trained.as_ref().expect("just filled"))
    }
}

/// Runs every criterion in order, reporting each as it finishes.
pub fn run_all(
    base: &Config,
    scale: Scale,
    work: &Path,
    mut report: impl FnMut(&CriterionResult),
) -> Result<Vec<CriterionResult>> {
    std::fs::create_dir_all(work).map_err(crate::error::io_err(work))?;
    let params = scale.params();
    let mut cfg = base.clone();
    cfg.data.probe_per_subset = params.probe_per_subset;
    cfg.vit.train.epochs = params.learn_epochs;
    cfg.cnn.train.epochs = params.learn_epochs;
    cfg.videomae.train.epochs = params.mae_epochs;
    cfg.twoafc.trials.trials_per_viewpoint = params.twoafc_trials_per_viewpoint;
    let mut shared = Shared {
        cfg,
        params,
        work,
        rearing: None,
        probes: None,
        untrained: None,
        trained: None,
    };
    type Check = fn(&mut Shared<'_>) -> Result<(bool, String)>;
    let checks: [(&'static str, Check); 10] = [
        ("gradient suite", gradients),
        ("loss oracle", loss_oracle),
        ("determinism", determinism),
        ("learning effect", learning_effect),
        ("data-size trend", data_size_trend),
        ("masked autoencoder", masked_autoencoder),
        ("cnn baseline", cnn_baseline),
        ("two-alternative choice", two_afc),
        ("probe hygiene", probe_hygiene),
        ("attention heatmaps", heatmaps),
    ];
    let mut results = Vec::new();
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = check(&mut shared);
        let seconds = start.elapsed().as_secs_f64();
        let budget = shared.params.budget_s[i];
        let (pass, mut detail) = match outcome {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let in_budget = seconds <= budget;
        if !in_budget {
            detail.push_str(&format!("; over the {budget:.0}s budget"));
        }
        let r = CriterionResult {
            id: i as u8 + 1,
            name,
            pass: pass && in_budget,
            detail,
            seconds,
        };
        report(&r);
        results.push(r);
    }
    Ok(results)
}

fn frames_of(data: &EpisodeDataset, start: usize, n: usize) -> Vec<&Frame> {
    data.frames[start..start + n].iter().collect()
}

fn gradients(s: &mut Shared<'_>) -> Result<(bool, String)> {
    let suite = op_suite();
    let (worst_op, worst) = suite
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (*n, *e))
        .unwrap_or(("none", f64::NAN));
    let ops_ok = !suite.is_empty() && suite.iter().all(|(_, e)| *e < 1e-6);

    // Two windows of three consecutive frames through ViT-tiny and the loss,
    // analytic single-precision gradients against double-precision central
    // differences of the same weights.
    let data = generate_dataset(1, 12, s.cfg.seed, &s.cfg.data.dataset)?;
    let vit = ViT::<f32>::new(ViTConfig {
        train: Default::default(),
        ..s.cfg.vit.clone()
    })?;
    let imgs32 = Images::<f32>::from_frames(&frames_of(&data, 0, 6), vit.config().image_size)?;
    let imgs64 = Images::<f64>::from_frames(&frames_of(&data, 0, 6), vit.config().image_size)?;
    let window = 3;
    let mut g = Graph::<f32>::new();
    let p = vit.params().bind(&mut g);
    let z = vit.project(&mut g, &p, &imgs32)?;
    let loss = vit.loss(&mut g, &EmbeddingBatch::windows(z, 2, window))?;
    let grads = g.backward(loss)?;
    let base = vit.cast::<f64>();
    let tau = vit.temperature();
    let loss64 = |m: &ViT<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let p = m.params().bind_frozen(&mut g);
        let z = m.forward(&mut g, &p, &imgs64)?.z;
        let l = cltt_loss(&mut g, &EmbeddingBatch::windows(z, 2, window), tau)?;
        Ok(g.scalar_value(l))
    };
    let mut composed = 0.0f64;
    let mut checked = 0;
    for id in vit.params().ids() {
        let Some(analytic) = grads.get(p[id]) else {
            continue;
        };
        let Some((idx, &a)) = analytic.iter().enumerate().max_by(|x, y| x.1.abs().total_cmp(&y.1.abs())) else {
            continue;
        };
        if a.abs() < 1e-6 {
            continue;
        }
        // Richardson-extrapolated central difference; the loss is sharply
        // curved where embeddings nearly coincide.
        let central = |h: f64| -> Result<f64> {
            let mut up = base.clone();
            up.params_mut().get_mut(id).data_mut()[idx] += h;
            let mut down = base.clone();
            down.params_mut().get_mut(id).data_mut()[idx] -= h;
            Ok((loss64(&up)? - loss64(&down)?) / (2.0 * h))
        };
        let h = 1e-6;
        let numeric = (4.0 * central(h / 2.0)? - central(h)?) / 3.0;
        let rel = (f64::from(a) - numeric).abs() / numeric.abs().max(f64::from(a.abs()));
        composed = composed.max(rel);
        checked += 1;
    }
    let composed_ok = checked >= 10 && composed < 1e-3;
    Ok((
        ops_ok && composed_ok,
        format!(
            "{} ops, worst {worst_op} {worst:.2e} (< 1e-6); composed f32 max rel {composed:.2e} over {checked} tensors (< 1e-3)",
            suite.len()
        ),
    ))
}

/// Double-precision evaluation of the loss straight from its definition.
pub fn brute_force_cltt(z: &[f64], dim: usize, groups: &[usize], tau: f64) -> f64 {
    let rows = groups.len();
    let row = |i: usize| &z[i * dim..(i + 1) * dim];
    let cos = |i: usize, j: usize| {
        let (a, b) = (row(i), row(j));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let (mut total, mut anchors) = (0.0, 0);
    for i in 0..rows {
        let (mut num, mut den, mut any) = (0.0, 0.0, false);
        for k in (0..rows).filter(|&k| k != i) {
            let e = (cos(i, k) / tau).exp();
            den += e;
            if groups[k] == groups[i] {
                num += e;
                any = true;
            }
        }
        if any {
            total -= (num / den).ln();
            anchors += 1;
        }
    }
    total / anchors as f64
}

fn cltt_value(z: &[f64], dim: usize, groups: Vec<usize>, tau: f64) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let zv = g.constant(vec![groups.len(), dim], z.to_vec())?;
    let l = cltt_loss(&mut g, &EmbeddingBatch { z: zv, groups }, tau)?;
    Ok(g.scalar_value(l))
}

fn loss_oracle(s: &mut Shared<'_>) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.cfg.seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for trial in 0..s.params.cltt_batches {
        let window = 2 + trial % 2;
        let n_windows = rng.gen_range(2..=8);
        let dim = rng.gen_range(2..=32);
        let tau = rng.gen_range(0.05..1.0);
        let rows = n_windows * window;
        let z: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let groups: Vec<usize> = (0..rows).map(|r| r / window).collect();
        let want = brute_force_cltt(&z, dim, &groups, tau);
        worst = worst.max((cltt_value(&z, dim, groups, tau)? - want).abs());
    }
    let identical = cltt_value(&[0.3, -1.2, 0.5].repeat(4), 3, vec![0, 0, 0, 1], 0.5)?;
    let gap = (identical - 1.5f64.ln()).abs();
    Ok((
        worst < 1e-6 && gap < 1e-9,
        format!(
            "{} batches max |diff| {worst:.2e} (< 1e-6); identical pool {identical:.12} vs ln(3/2), gap {gap:.1e} (< 1e-9)",
            s.params.cltt_batches
        ),
    ))
}

/// Runs the command line in-process with the acceptance configuration.
fn cli(s: &Shared<'_>, args: &[&str], out: &Path) -> Result<RunManifest> {
    let config = s.work.join("acceptance.toml");
    std::fs::write(&config, s.cfg.to_toml()).map_err(crate::error::io_err(&config))?;
    let mut argv: Vec<String> = vec!["digitwin".into()];
    argv.extend(args.iter().map(|a| a.to_string()));
    argv.extend([
        "--config".into(),
        config.display().to_string(),
        "--out".into(),
        out.display().to_string(),
        "--force".into(),
    ]);
    let code = crate::run(&argv);
    if code != 0 {
        return Err(CliError::Run(format!("`{}` exited with {code}", argv[1..].join(" "))));
    }
    RunManifest::read(out)
}

fn determinism(s: &mut Shared<'_>) -> Result<(bool, String)> {
    let frames = s.params.determinism_frames.to_string();
    let epochs = s.params.determinism_epochs.to_string();
    let gen = ["generate-data", "--frames", &frames];
    let a = cli(s, &gen, &s.work.join("gen_a"))?;
    let b = cli(s, &gen, &s.work.join("gen_b"))?;
    let data_same = a.artifacts == b.artifacts && !a.artifacts.is_empty();
    let set = format!("data.frames={frames}");
    let train = ["train", "--model", "vit-cot", "--epochs", &epochs, "--set", &set];
    let ta = cli(s, &train, &s.work.join("train_a"))?;
    let tb = cli(s, &train, &s.work.join("train_b"))?;
    let ckpt_a = ta.artifact("final.ckpt");
    let ckpt_b = tb.artifact("final.ckpt");
    let train_same = ckpt_a.is_some() && ckpt_a == ckpt_b && ta.threads == tb.threads;
    Ok((
        data_same && train_same,
        format!(
            "{frames} frames: {} files identical={data_same}; {epochs}-epoch checkpoint identical={train_same} on {} threads",
            a.artifacts.len(),
            ta.threads
        ),
    ))
}

fn learning_effect(s: &mut Shared<'_>) -> Result<(bool, String)> {
    let before = s.untrained()?.1.mean;
    let (_, log, report) = s.trained()?;
    let after = report.mean;
    let pass = after >= before + 0.05 && after > 0.55;
    Ok((
        pass,
        format!(
            "train11 accuracy untrained {before:.4} trained {after:.4} (need +0.05 and > 0.55); loss {:.3} -> {:.3} over {} epochs",
            log.first_loss().unwrap_or(f64::NAN),
            log.last_loss().unwrap_or(f64::NAN),
            log.epochs.len()
        ),
    ))
}

fn data_size_trend(s: &mut Shared<'_>) -> Result<(bool, String)> {
    let sizes = s.params.sweep_sizes.clone();
    let full = s.params.learn_frames;
    s.untrained()?;
    s.trained()?;
    s.rearing()?;
    s.probes()?;
    let (untrained, trained) = (
        s.untrained.as_ref().expect("filled").1.clone(),
        s.trained.as_ref().expect("filled").2.clone(),
    );
    let cfg = &s.cfg;
    let frames = &s.rearing.as_ref().expect("filled").frames;
    let probes = s.probes.as_deref().expect("filled");
    let report = digitwin_eval::data_size_sweep(
        &sizes,
        |n| Ok(n),
        |&n| {
            // Sizes 0 and the full set reuse the shared models.
            if n == 0 {
                return Ok(untrained.clone());
            }
            if n == full {
                return Ok(trained.clone());
            }
            let run = || -> Result<ProbeReport> {
                let mut m = pipeline::init_model(cfg, ModelKind::VitCot)?;
                pipeline::train_model(&mut m, &frames[..n], None)?;
                pipeline::probe(cfg, &m, probes)
            };
            run().map_err(|e| digitwin_eval::EvalError::Contract(e.to_string()))
        },
    )?;
    let (first, last) = (report.first().accuracy, report.last().accuracy);
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{}:{:.4}", r.frames, r.accuracy))
        .collect();
    Ok((
        last >= first + 0.05 && report.spearman >= 0.0,
        format!("{} spearman {:.3} (need last >= first + 0.05, rho >= 0)", rows.join(" "), report.spearman),
    ))
}

/// Evenly spaced clips of `len` consecutive frames from one episode each.
fn clips<'a>(data: &'a EpisodeDataset, len: usize, count: usize) -> Vec<&'a Frame> {
    let starts = digitwin_models::data::run_starts(&data.frames, len);
    if starts.is_empty() || count == 0 {
        return Vec::new();
    }
    let step = (starts.len() / count).max(1);
    starts
        .iter()
        .step_by(step)
        .take(count)
        .flat_map(|&s| data.frames[s..s + len].iter())
        .collect()
}

fn masked_autoencoder(s: &mut Shared<'_>) -> Result<(bool, String)> {
    let reference = MaeConfig::default();
    let counts_ok = reference.num_tubes() == 512
        && reference.masked_count() == 461
        && (0..10).all(|k| mask_tubes(512, 0.9, k).map(|m| m.masked.len() == 461).unwrap_or(false));

    let cfg = s.cfg.clone();
    let train = generate_dataset(cfg.data.condition, s.params.mae_frames, cfg.seed, &cfg.data.dataset)?;
    let heldout_source = generate_dataset(
        cfg.data.condition,
        cfg.videomae.clip_length * s.params.mae_heldout_clips * 4,
        cfg.seed.wrapping_add(1),
        &cfg.data.dataset,
    )?;
    let held = clips(&heldout_source, cfg.videomae.clip_length, s.params.mae_heldout_clips);
    let n_clips = held.len() / cfg.videomae.clip_length;
    let images = Images::<f32>::from_frames(&held, cfg.videomae.image_size)?;
    let masks = (0..n_clips as u64)
        .map(|k| mask_tubes(cfg.videomae.num_tubes(), cfg.videomae.mask_ratio, 7000 + k))
        .collect::<digitwin_models::Result<Vec<_>>>()?;

    let mut model = VideoMae::<f32>::new(cfg.videomae.clone())?;
    let before = model.clip_loss(&images, &masks)?;
    let log = digitwin_models::train_videomae(&mut model, &train.frames, None)?;
    let after = model.clip_loss(&images, &masks)?;
    let trained = Model::VideoMae(model);
    s.probes()?;
    let acc = pipeline::probe(&cfg, &trained, s.probes.as_deref().expect("filled"))?.mean;
    let pass = counts_ok && n_clips > 0 && after <= 0.7 * before && acc > 0.52;
    Ok((
        pass,
        format!(
            "masks 461/512 {counts_ok}; held-out MSE {before:.5} -> {after:.5} (ratio {:.3}, need <= 0.7) on {n_clips} clips; train loss {:.4} -> {:.4}; probe {acc:.4} (> 0.52)",
            after / before,
            log.first_loss().unwrap_or(f64::NAN),
            log.last_loss().unwrap_or(f64::NAN)
        ),
    ))
}

fn cnn_baseline(s: &mut Shared<'_>) -> Result<(bool, String)> {
    let cfg = s.cfg.clone();
    let mut model = pipeline::init_model(&cfg, ModelKind::Cnn)?;
    let layers = match &model {
        Model::Cnn(c) => c.weighted_layers().len(),
        _ => unreachable!("initialised a cnn"),
    };
    s.rearing()?;
    let log = pipeline::train_model(&mut model, &s.rearing.as_ref().expect("filled").frames, None)?;
    s.probes()?;
    let acc = pipeline::probe(&cfg, &model, s.probes.as_deref().expect("filled"))?.mean;
    let vit = s.trained()?.2.mean;
    let (first, last) = (log.first_loss().unwrap_or(f64::NAN), log.last_loss().unwrap_or(f64::NAN));
    let pass = layers == 10 && last <= 0.7 * first && acc > 0.55;
    Ok((
        pass,
        format!(
            "{layers} weighted layers; loss {first:.4} -> {last:.4} (ratio {:.3}, need <= 0.7); probe {acc:.4} (> 0.55); recorded: cnn - vit = {:+.4} (ordering {} within 3 points)",
            last / first,
            acc - vit,
            if acc >= vit - 0.03 { "holds" } else { "does not hold" }
        ),
    ))
}

fn two_afc(s: &mut Shared<'_>) -> Result<(bool, String)> {
    let reference = chi_square_test(358, 576, 0.5)?;
    let reference_ok = (reference.statistic - 34.03).abs() <= 0.5;
    s.trained()?;
    s.probes()?;
    let model = &s.trained.as_ref().expect("filled").0;
    let imprint = &s.rearing.as_ref().expect("filled").frames;
    let report = pipeline::two_afc(&s.cfg, model, imprint, s.probes.as_deref().expect("filled"))?;
    let n = report.trials.len();
    let pass = reference_ok && report.accuracy > 0.5 && report.chi_square.p_value < 0.05 && n >= 288;
    Ok((
        pass,
        format!(
            "chi2(358/576) = {:.3} (34.03 ± 0.5); trained: {}/{n} correct, accuracy {:.4}, p {:.2e} (need > 0.5, p < 0.05, >= 288 trials)",
            reference.statistic, report.successes, report.accuracy, report.chi_square.p_value
        ),
    ))
}

fn probe_hygiene(s: &mut Shared<'_>) -> Result<(bool, String)> {
    let viewpoints: Vec<u8> = s
        .probes()?
        .iter()
        .flat_map(|d| d.frames.iter().map(|f| f.meta.viewpoint))
        .collect();
    let mut folds = 0;
    let mut leaks = 0;
    for mode in [ProbeMode::Train11, ProbeMode::Train1] {
        for seed in 0..s.params.split_seeds {
            let split = ProbeSplit::new(mode, seed);
            if split.audit(&viewpoints).is_err() {
                leaks += 1;
            }
            // Independent recount from the assigned sample indices.
            for (train, test) in split.assign(&viewpoints) {
                folds += 1;
                let seen: std::collections::BTreeSet<u8> = train.iter().map(|&i| viewpoints[i]).collect();
                if test.iter().any(|&i| seen.contains(&viewpoints[i])) || test.is_empty() || train.is_empty() {
                    leaks += 1;
                }
            }
        }
    }
    let expected = 2 * s.params.split_seeds as usize * NUM_VIEWPOINTS as usize;
    Ok((
        leaks == 0 && folds == expected,
        format!(
            "{folds} folds over {} seeds x 2 modes, {leaks} with shared viewpoints",
            s.params.split_seeds
        ),
    ))
}

/// Shape and range invariants of one model's heatmaps; returns the problems.
fn heatmap_problems(model: ModelRef<'_>, heads: usize, frames: &[&Frame]) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    let sets = attention_heatmaps(model, frames)?;
    let mut problems = Vec::new();
    let mut per_head = vec![Vec::new(); heads];
    if sets.len() != frames.len() {
        problems.push(format!("{} maps for {} frames", sets.len(), frames.len()));
    }
    for (i, set) in sets.iter().enumerate() {
        if set.maps.len() != heads || set.patch_attention.len() != heads {
            problems.push(format!("frame {i}: {} heads", set.maps.len()));
            continue;
        }
        for h in 0..heads {
            let m = &set.maps[h];
            let pa = &set.patch_attention[h];
            let total: f32 = pa.iter().sum();
            if m.len() != set.size * set.size || pa.len() != set.grid * set.grid || (total - 1.0).abs() > 1e-4 {
                problems.push(format!("frame {i} head {h}: shape or attention mass"));
            }
            let (lo, hi) = m.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let range_ok = if set.flat[h] {
                m.iter().all(|&v| v == 0.0)
            } else {
                lo == 0.0 && (hi - 1.0).abs() < 1e-6
            };
            if !range_ok {
                problems.push(format!("frame {i} head {h}: range [{lo}, {hi}]"));
            }
            per_head[h].extend_from_slice(m);
        }
    }
    Ok((problems, per_head))
}

fn heatmaps(s: &mut Shared<'_>) -> Result<(bool, String)> {
    let n = s.params.heatmap_frames;
    s.probes()?;
    s.trained()?;
    let probes = s.probes.as_deref().expect("filled");
    // Frames spread over every probe subset.
    let per = n.div_ceil(probes.len());
    let frames: Vec<&Frame> = pipeline::heatmap_frames(probes, per).into_iter().take(n).collect();
    let tiny = &s.trained.as_ref().expect("filled").0;
    let (mut problems, _) = heatmap_problems(tiny.as_ref(), s.cfg.vit.num_heads, &frames)?;

    let mut cfg3 = ViTConfig::with_heads(3)?;
    cfg3.train = s.cfg.vit.train.clone();
    cfg3.train.epochs = s.params.heads3_epochs;
    let mut vit3 = ViT::<f32>::new(cfg3)?;
    let data = generate_dataset(s.cfg.data.condition, s.params.heads3_frames, s.cfg.seed, &s.cfg.data.dataset)?;
    digitwin_models::train_vit_cot(&mut vit3, &data.frames, None)?;
    let (p3, maps) = heatmap_problems(ModelRef::Vit(&vit3), 3, &frames)?;
    problems.extend(p3);
    let to64 = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
    let mut min_corr = f64::INFINITY;
    for a in 0..3 {
        for b in a + 1..3 {
            min_corr = min_corr.min(pearson(&to64(&maps[a]), &to64(&maps[b])));
        }
    }
    let pass = problems.is_empty() && frames.len() == n && min_corr < 0.99;
    let shown: Vec<&String> = problems.iter().take(3).collect();
    Ok((
        pass,
        format!(
            "{} frames, {} invariant violations {shown:?}; 3-head min pairwise correlation {min_corr:.4} (< 0.99)",
            frames.len(),
            problems.len()
        ),
    ))
}
