//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use ddlab_core::data::{BlobConfig, SyntheticInit};
use ddlab_core::distill::{DistillConfig, Method};
use ddlab_core::model::{ModelKind, ModelSpec, Norm};
use ddlab_core::train::{Batch, TrainConfig};
use sha2::{Digest, Sha256};

use crate::exit::Exit;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    /// Comma-separated non-negative integers.
    Ints,
    Text,
}

/// Every accepted key with its default. Keys outside this table are rejected.
const DEFAULTS: &[(&str, &str, Kind)] = &[
    ("seed", "0", Kind::Int),
    ("out", "runs", Kind::Text),
    ("data.num_classes", "3", Kind::Int),
    ("data.train_per_class", "500", Kind::Int),
    ("data.test_per_class", "200", Kind::Int),
    ("data.channels", "3", Kind::Int),
    ("data.size", "16", Kind::Int),
    ("data.noise", "0.8", Kind::Float),
    ("model.kind", "convnet", Kind::Text),
    ("model.depth", "3", Kind::Int),
    ("model.width", "32", Kind::Int),
    ("model.norm", "instance", Kind::Text),
    ("train.lr", "0.01", Kind::Float),
    ("train.momentum", "0.9", Kind::Float),
    ("train.iterations", "300", Kind::Int),
    ("train.batch", "64", Kind::Int),
    ("train.record_every", "10", Kind::Int),
    ("eval.iterations", "300", Kind::Int),
    ("eval.seeds", "0,1,2,3,4", Kind::Ints),
    ("distill.methods", "bptt,distribution_matching,gradient_matching,trajectory_matching", Kind::Text),
    ("distill.ipc", "1", Kind::Int),
    ("distill.init", "real", Kind::Text),
    ("distill.probe_every", "0", Kind::Int),
    ("bptt.outer_steps", "100", Kind::Int),
    ("bptt.outer_lr", "10", Kind::Float),
    ("bptt.inner_steps", "10", Kind::Int),
    ("bptt.inner_lr", "0.01", Kind::Float),
    ("bptt.real_batch", "64", Kind::Int),
    ("dm.outer_steps", "100", Kind::Int),
    ("dm.outer_lr", "1", Kind::Float),
    ("dm.real_batch", "64", Kind::Int),
    ("gm.outer_steps", "100", Kind::Int),
    ("gm.outer_lr", "0.1", Kind::Float),
    ("gm.inner_lr", "0.01", Kind::Float),
    ("gm.real_batch", "32", Kind::Int),
    ("gm.resample_every", "10", Kind::Int),
    ("gm.network_steps", "5", Kind::Int),
    ("tm.outer_steps", "100", Kind::Int),
    ("tm.outer_lr", "1", Kind::Float),
    ("tm.inner_steps", "10", Kind::Int),
    ("tm.inner_lr", "0.1", Kind::Float),
    ("tm.expert_steps", "20", Kind::Int),
    ("tm.max_start", "60", Kind::Int),
    ("tm.experts", "3", Kind::Int),
    ("tm.expert_batch", "64", Kind::Int),
    ("tm.learn_lr", "false", Kind::Bool),
    ("tm.lr_lr", "1e-5", Kind::Float),
    ("sweep.method", "bptt", Kind::Text),
    ("sweep.ipcs", "2,5", Kind::Ints),
    ("influence.iterations", "300", Kind::Int),
    ("influence.test_count", "100", Kind::Int),
    ("influence.seeds", "0,1", Kind::Ints),
    ("influence.background", "100", Kind::Int),
    ("influence.top_k", "10", Kind::Int),
    ("curvature.probes", "20", Kind::Int),
    ("curvature.window", "11", Kind::Int),
    ("curvature.lanczos_steps", "64", Kind::Int),
    ("curvature.density_probes", "4", Kind::Int),
    ("curvature.eval_count", "300", Kind::Int),
    ("landscape.resolution", "11", Kind::Int),
    ("landscape.offset", "0", Kind::Float),
    ("landscape.eval_count", "300", Kind::Int),
    ("pool.subset_models", "120", Kind::Int),
    ("pool.subset_min", "0.005", Kind::Float),
    ("pool.subset_max", "0.05", Kind::Float),
    ("pool.subset_iterations", "300", Kind::Int),
    ("pool.early_stop_runs", "4", Kind::Int),
    ("pool.early_stop_every", "5", Kind::Int),
    ("pool.weight_decay_models", "40", Kind::Int),
    ("pool.weight_decay_min", "0.05", Kind::Float),
    ("pool.weight_decay_max", "0.13", Kind::Float),
    ("pool.weight_decay_epochs", "20", Kind::Int),
    ("agree.window", "0.01", Kind::Float),
    ("mix.ks", "0,1,2,5,10", Kind::Ints),
    ("recognize.tolerance", "0.01", Kind::Float),
    ("recognize.record_every", "5", Kind::Int),
    ("search.trials", "100", Kind::Int),
    ("search.models", "convnet,mlp", Kind::Text),
];

/// Keys that locate outputs rather than describe the experiment.
const NOT_DIGESTED: &[&str] = &["out"];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config { values: DEFAULTS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

fn config_error(msg: String) -> anyhow::Error {
    anyhow!(Exit::config(msg))
}

impl Config {
    /// Defaults overridden by the lines of `text`. Blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_error(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| config_error(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(format!("unknown key {key:?}")),
        }
    }

    /// Parses every typed view once so bad values surface as config errors.
    pub fn validate(&self) -> Result<()> {
        for (k, _, kind) in DEFAULTS {
            match kind {
                Kind::Int => drop(self.u64(k)?),
                Kind::Float => drop(self.f64(k)?),
                Kind::Bool => drop(self.bool(k)?),
                Kind::Ints => drop(self.list_usize_or_empty(k)?),
                Kind::Text => {}
            }
        }
        self.blobs()?;
        self.spec()?;
        self.train()?;
        for m in self.methods()? {
            self.distill(m)?.validate().map_err(|e| config_error(e.to_string()))?;
        }
        self.list_u64("eval.seeds")?;
        self.list_u64("influence.seeds")?;
        self.list_usize("mix.ks")?;
        self.list_usize_or_empty("sweep.ipcs")?;
        self.sweep_method()?;
        self.search_specs()?;
        Ok(())
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("config key {key} missing from defaults"))
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| config_error(format!("{key} = {v:?} is not {what}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.typed(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.typed(key, "a non-negative integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.typed(key, "a number")?;
        if !v.is_finite() {
            return Err(config_error(format!("{key} must be finite")));
        }
        Ok(v)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.typed(key, "true or false")
    }

    pub fn str(&self, key: &str) -> &str {
        self.raw(key)
    }

    fn items(&self, key: &str) -> Vec<&str> {
        self.raw(key).split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
    }

    pub fn list_u64(&self, key: &str) -> Result<Vec<u64>> {
        let v: Vec<u64> = self
            .items(key)
            .into_iter()
            .map(|s| s.parse().map_err(|_| config_error(format!("{key}: {s:?} is not an integer"))))
            .collect::<Result<_>>()?;
        if v.is_empty() {
            return Err(config_error(format!("{key} must list at least one value")));
        }
        Ok(v)
    }

    pub fn list_usize_or_empty(&self, key: &str) -> Result<Vec<usize>> {
        if self.items(key).is_empty() {
            return Ok(Vec::new());
        }
        self.list_usize(key)
    }

    pub fn list_usize(&self, key: &str) -> Result<Vec<usize>> {
        Ok(self.list_u64(key)?.into_iter().map(|v| v as usize).collect())
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed").unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    /// Sorted `key = value` lines of every key.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex digest of the experiment-defining keys (seed included).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| !NOT_DIGESTED.contains(&k.as_str())) {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn blobs(&self) -> Result<BlobConfig> {
        let size = self.usize("data.size")?;
        let cfg = BlobConfig {
            num_classes: self.usize("data.num_classes")?,
            train_per_class: self.usize("data.train_per_class")?,
            test_per_class: self.usize("data.test_per_class")?,
            image_shape: [self.usize("data.channels")?, size, size],
            seed: self.seed(),
            noise_sigma: self.f64("data.noise")?,
        };
        if !matches!(cfg.image_shape[0], 1 | 3) || cfg.num_classes < 2 || size < 4 {
            return Err(config_error("data needs 1 or 3 channels, at least 2 classes and size >= 4".into()));
        }
        if cfg.train_per_class == 0 || cfg.test_per_class == 0 {
            return Err(config_error("data.train_per_class and data.test_per_class must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        let b = self.blobs()?;
        let kind = self.str("model.kind");
        let spec = spec_named(kind, b.image_shape, b.num_classes)
            .ok_or_else(|| config_error(format!("model.kind {kind:?} is not convnet, mlp or linear")))?;
        let norm = match self.str("model.norm") {
            "instance" => Norm::InstanceNorm,
            "none" => Norm::None,
            other => return Err(config_error(format!("model.norm {other:?} is not instance or none"))),
        };
        let spec = match spec.kind {
            ModelKind::Linear => spec,
            ModelKind::ConvNet => {
                ModelSpec { depth: self.usize("model.depth")?, width: self.usize("model.width")?, norm, ..spec }
            }
            ModelKind::Mlp => {
                ModelSpec { depth: self.usize("model.depth")?, width: self.usize("model.width")?, ..spec }
            }
        };
        spec.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(spec)
    }

    pub fn search_specs(&self) -> Result<Vec<ModelSpec>> {
        let b = self.blobs()?;
        let base = self.spec()?;
        self.items("search.models")
            .into_iter()
            .map(|k| {
                let s = spec_named(k, b.image_shape, b.num_classes)
                    .ok_or_else(|| config_error(format!("search.models entry {k:?} is not convnet, mlp or linear")))?;
                Ok(if s.kind == base.kind { base.clone() } else { s })
            })
            .collect()
    }

    /// Recipe for training on real data.
    pub fn train(&self) -> Result<TrainConfig> {
        let batch = self.usize("train.batch")?;
        let cfg = TrainConfig {
            lr: self.f64("train.lr")?,
            momentum: self.f64("train.momentum")?,
            iterations: self.usize("train.iterations")?,
            batch: if batch == 0 { Batch::Full } else { Batch::Size(batch) },
            seed: self.seed(),
            record_every: self.usize("train.record_every")?,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(cfg)
    }

    /// Full-batch recipe for training on distilled sets.
    pub fn eval_train(&self, seed: u64) -> Result<TrainConfig> {
        let t = self.train()?;
        let iterations = self.usize("eval.iterations")?;
        Ok(TrainConfig {
            iterations,
            batch: Batch::Full,
            seed,
            record_every: t.record_every.min(iterations.max(1)),
            ..t
        })
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        let v: Vec<Method> = self
            .items("distill.methods")
            .into_iter()
            .map(|s| Method::parse(s).ok_or_else(|| config_error(format!("distill.methods: unknown method {s:?}"))))
            .collect::<Result<_>>()?;
        if v.is_empty() {
            return Err(config_error("distill.methods must list at least one method".into()));
        }
        Ok(v)
    }

    pub fn sweep_method(&self) -> Result<Method> {
        let s = self.str("sweep.method");
        Method::parse(s).ok_or_else(|| config_error(format!("sweep.method: unknown method {s:?}")))
    }

    pub fn distill(&self, method: Method) -> Result<DistillConfig> {
        let mut c = DistillConfig::new(method, self.spec()?);
        c.ipc = self.usize("distill.ipc")?;
        c.seed = self.seed();
        c.probe_every = self.usize("distill.probe_every")?;
        c.probe_iterations = self.usize("eval.iterations")?;
        c.init = match self.str("distill.init") {
            "real" => SyntheticInit::RealImages,
            "xavier" => SyntheticInit::Xavier,
            other => return Err(config_error(format!("distill.init {other:?} is not real or xavier"))),
        };
        let p = prefix(method);
        c.outer_steps = self.usize(&format!("{p}.outer_steps"))?;
        c.outer_lr = self.f64(&format!("{p}.outer_lr"))?;
        match method {
            Method::Bptt => {
                c.inner_steps = self.usize("bptt.inner_steps")?;
                c.inner_lr = self.f64("bptt.inner_lr")?;
                c.real_batch = self.usize("bptt.real_batch")?;
            }
            Method::DistributionMatching => c.real_batch = self.usize("dm.real_batch")?,
            Method::GradientMatching => {
                c.inner_lr = self.f64("gm.inner_lr")?;
                c.real_batch = self.usize("gm.real_batch")?;
                c.resample_every = self.usize("gm.resample_every")?;
                c.network_steps = self.usize("gm.network_steps")?;
            }
            Method::TrajectoryMatching => {
                c.inner_steps = self.usize("tm.inner_steps")?;
                c.inner_lr = self.f64("tm.inner_lr")?;
                c.expert_steps = self.usize("tm.expert_steps")?;
                c.max_start = self.usize("tm.max_start")?;
                c.learn_lr = self.bool("tm.learn_lr")?;
                c.lr_lr = self.f64("tm.lr_lr")?;
            }
        }
        Ok(c)
    }

    /// Recipe for the trajectory-matching expert runs.
    pub fn expert_train(&self) -> Result<TrainConfig> {
        let t = self.train()?;
        let batch = self.usize("tm.expert_batch")?;
        Ok(TrainConfig {
            iterations: self.usize("tm.max_start")? + self.usize("tm.expert_steps")?,
            record_every: 1,
            batch: if batch == 0 { Batch::Full } else { Batch::Size(batch) },
            ..t
        })
    }
}

pub fn prefix(method: Method) -> &'static str {
    match method {
        Method::Bptt => "bptt",
        Method::DistributionMatching => "dm",
        Method::GradientMatching => "gm",
        Method::TrajectoryMatching => "tm",
    }
}

fn spec_named(kind: &str, shape: [usize; 3], classes: usize) -> Option<ModelSpec> {
    match kind {
        "convnet" => Some(ModelSpec::convnet(shape, classes)),
        "mlp" => Some(ModelSpec::mlp(shape, classes, 2, 64)),
        "linear" => Some(ModelSpec::linear(shape, classes)),
        _ => None,
    }
}

/// Reads and parses a config file.
pub fn load(path: &std::path::Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow!(Exit::missing(vec![path.display().to_string()])).context(e.to_string()))
        .with_context(|| format!("reading config {}", path.display()))?;
    Config::parse(&text)
}
