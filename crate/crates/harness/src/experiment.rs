//! End-to-end runs: train or load models, attack every sample of every grid
//! cell, score the results and write a manifest.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.txt
//! report.txt
//! tasks.txt
//! checkpoints/{denoiser,classifier,transfer-<seed>}.{bin,arch}
//! cells/k<K>-eps<ε>/records.txt
//! cells/k<K>-eps<ε>/errors.txt            (only when a sample failed)
//! cells/k<K>-eps<ε>/<sample>/{adv,exemplar}.{png,tensor}, trace.txt
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use semadv_core::diffusion::{make_schedule, GuidanceMask, NoiseSchedule};
use semadv_core::evalmetrics::{MsSsim, SampleRecord, TraceSummary, Verdict};
use semadv_core::models::{
    gen_corpus, train_classifier, train_denoiser, ClassifierArch, ClassifierParams, DenoiserArch, DenoiserParams,
    ShapeCorpusSpec, TrainConfig, SHAPE_LEAVES,
};
use semadv_core::numerics::write_tensor;
use semadv_core::resadv::{
    majority_vote, reject_sampling_attack, run_resadv_ddim, AttackConfig, AttackHead, AttackResult, ImageHead,
    RejectOutcome,
};
use semadv_core::splat3d::{
    camera_ring, run_attack_3d, splat_latent_corpus, splat_view_corpus, SplatHead, Template, DEFAULT_POINTS,
    POINT_DIMS, TEMPLATES, VIEW_PITCH,
};
use semadv_core::taxonomy::{original_label_tasks, read_tasks, shape_tasks, write_tasks, EvasionTask};
use semadv_core::{Error, Result, Tensor};

use crate::config::{Config, ExperimentConfig, Mode, StageConfig};
use crate::image_io::{strip, write_png};
use crate::manifest::{sha256_file, RunManifest, MANIFEST_FILE};
use crate::report::{aggregate, render_report, ReportRow};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "SEMADV_THREADS";

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct Models {
    pub denoiser: DenoiserParams,
    pub classifier: ClassifierParams,
    /// Held-out classifiers keyed by model id.
    pub transfer: Vec<(String, ClassifierParams)>,
}

/// Surrogate model id in records and reports.
pub const SURROGATE: &str = "surrogate";

pub fn schedule_for(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.attack.steps, cfg.beta_min, cfg.beta_max)
}

fn train_config(stage: &StageConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: stage.epochs,
        batch_size: stage.batch_size,
        lr: stage.lr,
        seed,
    }
}

fn missing(stem: &Path) -> Error {
    Error::Setup(format!("checkpoint {} not found", stem.display()))
}

/// Class names of the run's label space.
pub fn class_labels(mode: Mode) -> Vec<String> {
    match mode {
        Mode::Image => SHAPE_LEAVES.iter().map(|s| s.to_string()).collect(),
        Mode::Splat => TEMPLATES.iter().map(|t| t.name().to_string()).collect(),
    }
}

pub fn train_denoiser_stage(cfg: &ExperimentConfig, schedule: &NoiseSchedule) -> Result<DenoiserParams> {
    if let Some(stem) = &cfg.denoiser.checkpoint {
        return DenoiserParams::load(stem).map_err(|_| missing(stem));
    }
    let tc = train_config(&cfg.denoiser, cfg.denoiser.seed);
    let (model, _) = match cfg.mode {
        Mode::Image => {
            let data = gen_corpus(&image_corpus_spec(cfg), cfg.per_class)?;
            train_denoiser(DenoiserArch::conv(cfg.side, SHAPE_LEAVES.len()), &data, schedule, &tc)?
        }
        Mode::Splat => {
            let data = splat_latent_corpus(cfg.per_class, cfg.data_seed)?;
            let arch = DenoiserArch::points(DEFAULT_POINTS, POINT_DIMS, TEMPLATES.len());
            train_denoiser(arch, &data, schedule, &tc)?
        }
    };
    Ok(model)
}

/// Trains the classifier of `seed`, or loads the configured checkpoint when
/// `seed` is the surrogate's.
pub fn train_classifier_stage(cfg: &ExperimentConfig, seed: u64) -> Result<ClassifierParams> {
    if seed == cfg.classifier.seed {
        if let Some(stem) = &cfg.classifier.checkpoint {
            return ClassifierParams::load(stem).map_err(|_| missing(stem));
        }
    }
    let tc = train_config(&cfg.classifier, seed);
    let (model, _) = match cfg.mode {
        Mode::Image => {
            let data = gen_corpus(&image_corpus_spec(cfg), cfg.per_class)?;
            let arch = ClassifierArch::new(1, cfg.side, SHAPE_LEAVES.len());
            train_classifier(arch, &data, &tc, cfg.augment_noise)?
        }
        Mode::Splat => {
            let data = splat_view_corpus(cfg.views_per_class, cfg.side, cfg.data_seed + 1)?;
            let arch = ClassifierArch::new(3, cfg.side, TEMPLATES.len());
            train_classifier(arch, &data, &tc, cfg.augment_noise)?
        }
    };
    Ok(model)
}

fn image_corpus_spec(cfg: &ExperimentConfig) -> ShapeCorpusSpec {
    ShapeCorpusSpec {
        resolution: cfg.side,
        seed: cfg.data_seed,
        ..Default::default()
    }
}

pub fn prepare_models(cfg: &ExperimentConfig, schedule: &NoiseSchedule) -> Result<Models> {
    let denoiser = train_denoiser_stage(cfg, schedule)?;
    let classifier = train_classifier_stage(cfg, cfg.classifier.seed)?;
    let transfer = cfg
        .transfer_seeds
        .iter()
        .map(|&s| Ok((format!("transfer-{s}"), train_classifier_stage(cfg, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Models {
        denoiser,
        classifier,
        transfer,
    })
}

pub fn experiment_tasks(cfg: &ExperimentConfig) -> Result<Vec<EvasionTask>> {
    let mut tasks = match (cfg.mode, &cfg.tasks_file) {
        (Mode::Image, Some(path)) => read_tasks(&std::fs::read_to_string(path).map_err(|e| {
            Error::Setup(format!("cannot read task file {}: {e}", path.display()))
        })?)?,
        (Mode::Image, None) => shape_tasks(),
        (Mode::Splat, _) => original_label_tasks(&class_labels(Mode::Splat)),
    };
    if cfg.mode == Mode::Image && cfg.original_tasks {
        tasks.extend(original_label_tasks(&class_labels(Mode::Image)));
    }
    if tasks.is_empty() {
        return Err(Error::Config("the run has no tasks".into()));
    }
    let labels = class_labels(cfg.mode);
    for t in &tasks {
        t.resolve(&labels)?;
    }
    Ok(tasks)
}

/// Seed of sample `index`, attempt `attempt`. Independent of the grid cell,
/// so every cell attacks the same starting noise.
pub fn sample_seed(base: u64, index: usize, attempt: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64 * 1_000_003)
        .wrapping_add(attempt as u64 * 7_919)
}

pub fn cell_name(k: usize, epsilon: f64) -> String {
    format!("k{k}-eps{epsilon}")
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

pub fn sample_id(index: usize, task: &EvasionTask) -> String {
    format!("s{index:04}-{}", sanitize(&task.leaf))
}

/// Everything a sample needs besides its index.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    models: &'a Models,
    tasks: &'a [EvasionTask],
    labels: Vec<String>,
    schedule: &'a NoiseSchedule,
    attack: AttackConfig,
    cell_dir: PathBuf,
}

struct SampleOutcome {
    id: String,
    record: Option<SampleRecord>,
    status: String,
}

impl Context<'_> {
    fn splat_head<'c>(&self, clf: &'c ClassifierParams, template: Template) -> Result<SplatHead<'c, ClassifierParams>> {
        let mut head = SplatHead::new(clf, template, self.cfg.eot_views)?;
        head.ring = camera_ring(self.cfg.eval_views, VIEW_PITCH, self.cfg.side)?;
        Ok(head)
    }

    fn attack_once(&self, task: &EvasionTask, seed: u64) -> Result<AttackResult> {
        let at = task.resolve(&self.labels)?;
        match self.cfg.mode {
            Mode::Image => {
                let head = ImageHead {
                    classifier: &self.models.classifier,
                };
                let mask = GuidanceMask::border(self.cfg.side, self.cfg.side, self.cfg.mask_mid, self.cfg.mask_edge);
                run_resadv_ddim(&self.models.denoiser, &head, &at, &self.attack, &mask, self.schedule, seed)
            }
            Mode::Splat => {
                let head = self.splat_head(&self.models.classifier, Template::from_name(&task.leaf)?)?;
                run_attack_3d(&self.models.denoiser, &head, &at, &self.attack, self.schedule, seed)
            }
        }
    }

    /// Majority-vote labels of `x` under a classifier.
    fn verdict_label(&self, clf: &ClassifierParams, task: &EvasionTask, x: &Tensor) -> Result<usize> {
        let views = match self.cfg.mode {
            Mode::Image => ImageHead { classifier: clf }.evaluate(x)?,
            Mode::Splat => self.splat_head(clf, Template::from_name(&task.leaf)?)?.evaluate(x)?,
        };
        majority_vote(&views).ok_or_else(|| Error::Contract("no views to vote on".into()))
    }

    /// Images compared by the similarity metrics, with their value range.
    fn comparable(&self, task: &EvasionTask, x: &Tensor) -> Result<(Vec<Tensor>, (f64, f64))> {
        match self.cfg.mode {
            Mode::Image => Ok((vec![x.clone()], (-1.0, 1.0))),
            Mode::Splat => {
                let head = self.splat_head(&self.models.classifier, Template::from_name(&task.leaf)?)?;
                Ok((head.ring_images(x)?, (0.0, 1.0)))
            }
        }
    }

    fn run_sample(&self, index: usize) -> SampleOutcome {
        let task = &self.tasks[index % self.tasks.len()];
        let id = sample_id(index, task);
        match self.try_sample(index, task, &id) {
            Ok((record, attempts)) => {
                let status = match &record {
                    Some(_) => format!("ok attempts={attempts}"),
                    None => format!("rejected attempts={attempts}"),
                };
                SampleOutcome { id, record, status }
            }
            Err(e) => SampleOutcome {
                id,
                record: None,
                status: format!("error {}", e.to_string().replace('\n', " ")),
            },
        }
    }

    fn try_sample(&self, index: usize, task: &EvasionTask, id: &str) -> Result<(Option<SampleRecord>, usize)> {
        let base = self.cfg.seed;
        let (result, attempts) = match self.cfg.reject_p_s {
            None => (self.attack_once(task, sample_seed(base, index, 0))?, 1),
            Some(p_s) => {
                let at = task.resolve(&self.labels)?;
                let outcome = reject_sampling_attack(
                    |attempt| self.attack_once(task, sample_seed(base, index, attempt)),
                    |r: &AttackResult| !at.a_text.contains(&r.exemplar_label()),
                    p_s,
                    self.cfg.reject_eps_fail,
                )?;
                match outcome {
                    RejectOutcome::Accepted { result, attempts } => (result, attempts),
                    RejectOutcome::GaveUp { attempts } => return Ok((None, attempts)),
                }
            }
        };
        let at = task.resolve(&self.labels)?;
        let mut record = SampleRecord {
            task_id: id.to_string(),
            leaf: at.cond.token,
            a_text: at.a_text.clone(),
            verdicts: Default::default(),
            ms_ssim: None,
            l2_diff: Some(result.x_adv.sub(&result.x_exemplar)?.norm_l2()),
            trace: TraceSummary::from_trace(&result.trace),
        };
        record.verdicts.insert(
            SURROGATE.to_string(),
            Verdict {
                adv: result.adv_label(),
                exemplar: result.exemplar_label(),
            },
        );
        for (name, clf) in &self.models.transfer {
            record.verdicts.insert(
                name.clone(),
                Verdict {
                    adv: self.verdict_label(clf, task, &result.x_adv)?,
                    exemplar: self.verdict_label(clf, task, &result.x_exemplar)?,
                },
            );
        }
        let (adv_imgs, (lo, hi)) = self.comparable(task, &result.x_adv)?;
        let (ex_imgs, _) = self.comparable(task, &result.x_exemplar)?;
        let side = *adv_imgs[0].shape().last().expect("image has a width");
        let metric = MsSsim {
            data_range: hi - lo,
            ..MsSsim::new(MsSsim::new(1).max_levels(side).max(1))
        };
        let mut total = 0.0;
        for (a, b) in adv_imgs.iter().zip(&ex_imgs) {
            total += metric.compute(a, b)?;
        }
        record.ms_ssim = Some(total / adv_imgs.len() as f64);
        if self.cfg.save_samples {
            let dir = self.cell_dir.join(id);
            std::fs::create_dir_all(&dir)?;
            for (name, x, imgs) in [("adv", &result.x_adv, &adv_imgs), ("exemplar", &result.x_exemplar, &ex_imgs)] {
                let mut out = BufWriter::new(File::create(dir.join(format!("{name}.tensor")))?);
                write_tensor(&mut out, x)?;
                write_png(&dir.join(format!("{name}.png")), &strip(imgs)?, lo, hi)?;
            }
            std::fs::write(dir.join("trace.txt"), result.trace.to_text())?;
        }
        Ok((Some(record), attempts))
    }
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub rows: Vec<ReportRow>,
    pub manifest: RunManifest,
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a thread count, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Setup(format!("thread pool: {e}")))
}

fn prepare_out_dir(out: &Path) -> Result<()> {
    if out.exists() && std::fs::read_dir(out)?.next().is_some() {
        return Err(Error::Setup(format!("output directory {} is not empty", out.display())));
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

pub fn run_experiment(config_path: &Path, out: &Path) -> Result<RunSummary> {
    run_config(&Config::load(config_path)?, out)
}

/// Runs the experiment described by `config` into the empty directory `out`.
pub fn run_config(config: &Config, out: &Path) -> Result<RunSummary> {
    let cfg = ExperimentConfig::from_config(config)?;
    prepare_out_dir(out)?;
    let schedule = schedule_for(&cfg)?;
    let models = prepare_models(&cfg, &schedule)?;

    let mut manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config: config.to_text(),
        ..Default::default()
    };
    for (k, v) in [
        ("experiment", cfg.seed),
        ("data", cfg.data_seed),
        ("denoiser", cfg.denoiser.seed),
        ("classifier", cfg.classifier.seed),
    ] {
        manifest.seeds.insert(k.to_string(), v);
    }
    for &s in &cfg.transfer_seeds {
        manifest.seeds.insert(format!("transfer-{s}"), s);
    }

    let ckpt = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    let mut saved = vec![models.denoiser.save(&ckpt.join("denoiser"))?, models.classifier.save(&ckpt.join("classifier"))?];
    for (name, clf) in &models.transfer {
        saved.push(clf.save(&ckpt.join(name))?);
    }
    for (bin, arch) in saved {
        for p in [bin, arch] {
            let name = p.file_name().expect("file").to_string_lossy().into_owned();
            manifest.checkpoints.insert(name, sha256_file(&p)?);
        }
    }

    let tasks = experiment_tasks(&cfg)?;
    std::fs::write(out.join("tasks.txt"), write_tasks(&tasks))?;

    let pool = thread_pool()?;
    let mut rows = Vec::new();
    for &k in &cfg.k_grid {
        for &eps in &cfg.eps_grid {
            let cell = cell_name(k, eps);
            let cell_dir = out.join("cells").join(&cell);
            std::fs::create_dir_all(&cell_dir)?;
            let ctx = Context {
                cfg: &cfg,
                models: &models,
                tasks: &tasks,
                labels: class_labels(cfg.mode),
                schedule: &schedule,
                attack: cfg.cell_attack(k, eps),
                cell_dir: cell_dir.clone(),
            };
            let outcomes: Vec<SampleOutcome> =
                pool.install(|| (0..cfg.samples).into_par_iter().map(|i| ctx.run_sample(i)).collect());
            let mut records = Vec::new();
            let mut errors = String::new();
            for o in outcomes {
                manifest.outcomes.insert(format!("{cell}/{}", o.id), o.status.clone());
                match o.record {
                    Some(r) => records.push(r),
                    None => errors.push_str(&format!("{} {}\n", o.id, o.status)),
                }
            }
            let text: String = records.iter().map(SampleRecord::to_text).collect();
            std::fs::write(cell_dir.join("records.txt"), text)?;
            let n_errors = errors.lines().count();
            if !errors.is_empty() {
                std::fs::write(cell_dir.join("errors.txt"), errors)?;
            }
            rows.extend(aggregate(&cell, &records, n_errors));
        }
    }
    std::fs::write(out.join("report.txt"), render_report(&rows))?;
    manifest.record_files(out)?;
    manifest.save(out)?;
    Ok(RunSummary {
        dir: out.to_path_buf(),
        rows,
        manifest,
    })
}

/// Result of re-running a manifest.
#[derive(Clone, Debug)]
pub struct Replay {
    pub summary: RunSummary,
    /// Files whose bytes differ from the original run, or exist in only one.
    pub mismatches: Vec<String>,
}

/// Re-runs the configuration recorded in `manifest_path` into `out` and
/// compares every output digest with the original.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<Replay> {
    let original = RunManifest::load(manifest_path)?;
    let config = Config::parse(&original.config)?;
    let cfg = ExperimentConfig::from_config(&config)?;
    for (stage, stem) in [("denoiser", &cfg.denoiser.checkpoint), ("classifier", &cfg.classifier.checkpoint)] {
        if let Some(stem) = stem {
            let bin = PathBuf::from(format!("{}.bin", stem.display()));
            let want = original.checkpoints.get(&format!("{stage}.bin"));
            let have = sha256_file(&bin).map_err(|_| missing(stem))?;
            if want != Some(&have) {
                return Err(Error::Setup(format!(
                    "{stage} checkpoint {} differs from the recorded one",
                    bin.display()
                )));
            }
        }
    }
    let summary = run_config(&config, out)?;
    let mut mismatches: Vec<String> = original
        .files
        .iter()
        .filter(|(k, v)| summary.manifest.files.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    mismatches.extend(
        summary
            .manifest
            .files
            .keys()
            .filter(|k| !original.files.contains_key(*k))
            .cloned(),
    );
    if summary.manifest.outcomes != original.outcomes {
        mismatches.push(format!("{MANIFEST_FILE} outcomes"));
    }
    Ok(Replay { summary, mismatches })
}
