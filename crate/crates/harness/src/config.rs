//! Flat `section.key=value` experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use semadv_core::resadv::AttackConfig;
use semadv_core::{Error, Result};

/// Raw key-value pairs. Lines are `key=value`; blank lines and `#` comments
/// are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parsed value of `key`, or `default` when absent.
    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    /// Comma-separated list, or `default` when absent.
    pub fn get_list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) if v.is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`")))
                })
                .collect(),
        }
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Shape images attacked in pixel space.
    Image,
    /// Splat clouds attacked in latent space and judged from rendered views.
    Splat,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(Mode::Image),
            "3d" => Ok(Mode::Splat),
            _ => Err(Error::Config(format!("experiment.mode must be 2d or 3d, got `{s}`"))),
        }
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Image => "2d",
            Mode::Splat => "3d",
        }
    }
}

/// One training stage; a checkpoint stem replaces training.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Base of every per-sample seed.
    pub seed: u64,
    /// Total samples per grid cell; sample `i` attacks task `i mod tasks`.
    pub samples: usize,
    pub k_grid: Vec<usize>,
    pub eps_grid: Vec<f64>,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Training images (2d) or latents (3d) per class.
    pub per_class: usize,
    /// Rendered classifier training views per class (3d).
    pub views_per_class: usize,
    pub side: usize,
    pub data_seed: u64,
    pub denoiser: StageConfig,
    pub classifier: StageConfig,
    pub augment_noise: f64,
    /// Seeds of held-out classifiers used as transfer targets.
    pub transfer_seeds: Vec<u64>,
    /// `steps`, `k` and `epsilon` are overridden per grid cell.
    pub attack: AttackConfig,
    pub mask_mid: f64,
    pub mask_edge: f64,
    pub eot_views: usize,
    pub eval_views: usize,
    /// Exemplar-acceptance rate for reject sampling; `None` disables it.
    pub reject_p_s: Option<f64>,
    pub reject_eps_fail: f64,
    /// Task file from `build-taxonomy`; the built-in tasks otherwise.
    pub tasks_file: Option<PathBuf>,
    pub original_tasks: bool,
    /// Written alongside each sample: PNGs and float tensors.
    pub save_samples: bool,
}

const KNOWN_KEYS: &[&str] = &[
    "experiment.mode",
    "experiment.seed",
    "experiment.samples",
    "experiment.k_grid",
    "experiment.eps_grid",
    "experiment.save_samples",
    "diffusion.T",
    "diffusion.beta_min",
    "diffusion.beta_max",
    "data.per_class",
    "data.views_per_class",
    "data.side",
    "data.seed",
    "denoiser.epochs",
    "denoiser.batch",
    "denoiser.lr",
    "denoiser.seed",
    "denoiser.checkpoint",
    "classifier.epochs",
    "classifier.batch",
    "classifier.lr",
    "classifier.seed",
    "classifier.noise",
    "classifier.checkpoint",
    "classifier.transfer_seeds",
    "attack.epsilon",
    "attack.K",
    "attack.t_s",
    "attack.t_k",
    "attack.xi1",
    "attack.xi2",
    "attack.m",
    "attack.M",
    "attack.beta",
    "attack.s",
    "attack.eot_views",
    "attack.views",
    "attack.reject_p_s",
    "attack.reject_eps_fail",
    "mask.mid",
    "mask.edge",
    "taxonomy.tasks",
    "taxonomy.original",
];

impl ExperimentConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        if let Some(k) = c.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let mode: Mode = c.get("experiment.mode", Mode::Image)?;
        let (base_attack, beta_max, per_class, side, den_epochs, noise) = match mode {
            Mode::Image => (AttackConfig::default(), 0.1, 250, 16, 15, 0.1),
            Mode::Splat => (AttackConfig::splat_default(), 0.2, 400, 24, 40, 0.05),
        };
        let steps = c.get("diffusion.T", base_attack.steps)?;
        let attack = AttackConfig {
            epsilon: c.get("attack.epsilon", base_attack.epsilon)?,
            k: c.get("attack.K", base_attack.k)?,
            t_s: c.get("attack.t_s", base_attack.t_s)?,
            t_k: c.get("attack.t_k", base_attack.t_k)?,
            xi1: c.get("attack.xi1", base_attack.xi1)?,
            xi2: c.get("attack.xi2", base_attack.xi2)?,
            m: c.get("attack.m", base_attack.m)?,
            m_iter: c.get("attack.M", base_attack.m_iter)?,
            beta_mom: c.get("attack.beta", base_attack.beta_mom)?,
            s: c.get("attack.s", base_attack.s)?,
            steps,
        };
        let path = |key: &str| c.get_str(key).filter(|s| !s.is_empty()).map(PathBuf::from);
        let stage = |name: &str, epochs: usize, lr: f64, seed: u64| -> Result<StageConfig> {
            Ok(StageConfig {
                epochs: c.get(&format!("{name}.epochs"), epochs)?,
                batch_size: c.get(&format!("{name}.batch"), 32)?,
                lr: c.get(&format!("{name}.lr"), lr)?,
                seed: c.get(&format!("{name}.seed"), seed)?,
                checkpoint: path(&format!("{name}.checkpoint")),
            })
        };
        let reject: f64 = c.get("attack.reject_p_s", 0.0)?;
        let cfg = Self {
            mode,
            seed: c.get("experiment.seed", 0)?,
            samples: c.get("experiment.samples", 8)?,
            k_grid: c.get_list("experiment.k_grid", vec![attack.k])?,
            eps_grid: c.get_list("experiment.eps_grid", vec![attack.epsilon])?,
            beta_min: c.get("diffusion.beta_min", 1e-4)?,
            beta_max: c.get("diffusion.beta_max", beta_max)?,
            per_class: c.get("data.per_class", per_class)?,
            views_per_class: c.get("data.views_per_class", 300)?,
            side: c.get("data.side", side)?,
            data_seed: c.get("data.seed", 1)?,
            denoiser: stage("denoiser", den_epochs, 2e-3, 3)?,
            classifier: stage("classifier", 8, 3e-3, 7)?,
            augment_noise: c.get("classifier.noise", noise)?,
            transfer_seeds: c.get_list("classifier.transfer_seeds", Vec::new())?,
            attack,
            mask_mid: c.get("mask.mid", 3.0)?,
            mask_edge: c.get("mask.edge", 0.3)?,
            eot_views: c.get("attack.eot_views", 1)?,
            eval_views: c.get("attack.views", semadv_core::splat3d::EVAL_VIEWS)?,
            reject_p_s: (reject > 0.0).then_some(reject),
            reject_eps_fail: c.get("attack.reject_eps_fail", 0.01)?,
            tasks_file: path("taxonomy.tasks"),
            original_tasks: c.get("taxonomy.original", false)?,
            save_samples: c.get("experiment.save_samples", true)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.samples == 0 {
            return bad("experiment.samples must be positive".into());
        }
        if self.k_grid.is_empty() || self.eps_grid.is_empty() {
            return bad("the K and epsilon grids must be non-empty".into());
        }
        for &k in &self.k_grid {
            for &e in &self.eps_grid {
                self.cell_attack(k, e).validate()?;
            }
        }
        if self.eot_views == 0 || self.eval_views == 0 {
            return bad("attack.eot_views and attack.views must be positive".into());
        }
        if let Some(p) = self.reject_p_s {
            semadv_core::resadv::reject_cap(p, self.reject_eps_fail)?;
        }
        if self.mode == Mode::Splat && self.tasks_file.is_some() {
            return bad("taxonomy.tasks applies to 2d runs only".into());
        }
        Ok(())
    }

    /// Attack settings of one grid cell.
    pub fn cell_attack(&self, k: usize, epsilon: f64) -> AttackConfig {
        AttackConfig {
            k,
            epsilon,
            ..self.attack.clone()
        }
    }
}
