//! Experiment configuration: TOML on disk, typed core objects in memory.

use std::path::{Path, PathBuf};

use ddlab_core::autodiff::AdamConfig;
use ddlab_core::data::{DatasetKind, Mode, SyntheticDataset};
use ddlab_core::distill::{DistillConfig, DistillEval, LogitMods, LossVariant, TopPMasking, DEFAULT_POSTERIOR_DS};
use ddlab_core::teacher::{TeacherConfig, Weighting};
use ddlab_core::{DiffusionProcess, ModelConfig, NoiseSchedule, ProcessKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Metric names accepted in `metrics` and `--metric`.
pub const METRICS: [&str; 5] = ["gm", "gen_ppl", "sample_entropy", "exact_kl", "output_entropy"];

/// Axes accepted by `sweep`.
pub const SWEEP_AXES: [&str; 4] = [
    "sample.steps",
    "sample.temperature",
    "sample.top_p",
    "sample.logit_shift",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output directory; excluded from the content hash.
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    pub dataset: DatasetSpec,
    pub process: ProcessSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub teacher: TeacherSpec,
    #[serde(default)]
    pub distill: DistillSpec,
    #[serde(default)]
    pub sample: SampleSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn default_out_dir() -> String {
    "runs".into()
}

fn default_metrics() -> Vec<String> {
    vec!["exact_kl".into(), "sample_entropy".into()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    CorrelatedBits,
    ModeMixture,
    MarkovChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetName,
    pub positions: usize,
    pub vocab: usize,
    /// Mode sequences of a mode mixture.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<Vec<u32>>,
    /// Unnormalized mode weights, one per mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub noise: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub initial: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transition: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessName {
    Masked,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    #[default]
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub kind: ProcessName,
    #[serde(default)]
    pub schedule: ScheduleName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub embed_width: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub time_width: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            embed_width: 16,
            hidden_width: 32,
            depth: 2,
            time_width: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingName {
    #[default]
    Constant,
    Mdlm,
}

impl From<WeightingName> for Weighting {
    fn from(w: WeightingName) -> Self {
        match w {
            WeightingName::Constant => Weighting::Constant,
            WeightingName::Mdlm => Weighting::Mdlm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weighting: WeightingName,
    pub eval_every: usize,
    pub eval_sampler_steps: usize,
    /// Sampler step counts of the final exact-KL table.
    pub kl_table_steps: Vec<usize>,
    /// Write elapsed milliseconds to the log; off keeps logs byte-identical.
    pub record_wallclock: bool,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            lr: 1e-3,
            weighting: WeightingName::Constant,
            eval_every: 500,
            eval_sampler_steps: 16,
            kl_table_steps: vec![1, 2, 4, 8, 16],
            record_wallclock: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingName {
    #[default]
    Shift,
    Sentinel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    #[default]
    CrossEntropy,
    PosteriorKl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSpec {
    pub steps: usize,
    pub n_noise: usize,
    /// Sampling steps `k` the student is trained for.
    pub student_steps: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub shift: f64,
    pub masking: MaskingName,
    pub soft_target: bool,
    pub aux_updates_per_gen: usize,
    pub variant: VariantName,
    pub posterior_ds: f64,
    pub weighting: WeightingName,
    pub batch_size: usize,
    pub lr: f64,
    pub gen_lr_scale: f64,
    pub decay_steps: usize,
    pub final_lr_fraction: f64,
    pub max_grad_norm: f64,
    /// Force a non-finite loss at this step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault_step: Option<usize>,
    pub entropy_every: usize,
    pub entropy_probes: usize,
    pub kl_every: usize,
    pub noise_draws: usize,
    /// Sampler step counts of the final student-vs-teacher table.
    pub kl_table_steps: Vec<usize>,
}

impl Default for DistillSpec {
    fn default() -> Self {
        let core = DistillConfig::default();
        let eval = DistillEval::default();
        Self {
            steps: 20_000,
            n_noise: 4,
            student_steps: core.student_steps,
            temperature: core.mods.temperature,
            top_p: core.mods.top_p,
            shift: core.mods.shift,
            masking: MaskingName::Shift,
            soft_target: core.soft_target,
            aux_updates_per_gen: core.aux_updates_per_gen,
            variant: VariantName::CrossEntropy,
            posterior_ds: DEFAULT_POSTERIOR_DS,
            weighting: WeightingName::Constant,
            batch_size: core.batch_size,
            lr: core.adam.lr,
            gen_lr_scale: core.gen_lr_scale,
            decay_steps: core.decay_steps,
            final_lr_fraction: core.final_lr_fraction,
            max_grad_norm: core.max_grad_norm,
            fault_step: None,
            entropy_every: eval.entropy_every,
            entropy_probes: eval.entropy_probes,
            kl_every: eval.kl_every,
            noise_draws: eval.noise_draws,
            kl_table_steps: vec![1, 2, 4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    /// Reverse-chain steps `k`.
    pub steps: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub logit_shift: f64,
    pub n_samples: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            steps: 16,
            temperature: 1.0,
            top_p: 1.0,
            logit_shift: 2.0,
            n_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerName {
    #[default]
    Checkpoint,
    Data,
    Uniform,
    Oracle,
}

impl SamplerName {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerName::Checkpoint => "checkpoint",
            SamplerName::Data => "data",
            SamplerName::Uniform => "uniform",
            SamplerName::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub sampler: SamplerName,
    /// Checkpoint evaluated by the `checkpoint` sampler.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub gm_pairs: usize,
    pub gm_batch: usize,
    pub reference_steps: usize,
    pub reference_lr: f64,
    pub entropy_probes: usize,
    pub noise_draws: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            sampler: SamplerName::Checkpoint,
            checkpoint: None,
            gm_pairs: 200,
            gm_batch: 16,
            reference_steps: 3000,
            reference_lr: 0.05,
            entropy_probes: 256,
            noise_draws: 64,
        }
    }
}

/// A parsed config together with its source text for line anchoring.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub source: String,
    pub config: ExperimentConfig,
}

/// 1-based line of `key` inside `[section]` (or the top level when
/// `section` is empty).
pub fn locate(source: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            if !key.is_empty() || current != section {
                continue;
            }
            return Some(i + 1);
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl LoadedConfig {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let source = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config =
            ExperimentConfig::from_toml(&source).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            source,
            config,
        })
    }

    /// A config error anchored at `section.key` when that key is in the file.
    pub fn error(&self, section: &str, key: &str, msg: impl std::fmt::Display) -> CliError {
        let name = match (section.is_empty(), key.is_empty()) {
            (true, _) => key.to_string(),
            (false, true) => section.to_string(),
            (false, false) => format!("{section}.{key}"),
        };
        let line = locate(&self.source, section, key).or_else(|| locate(&self.source, section, ""));
        match line {
            Some(l) => CliError::Config(format!("{}:{l}: {name}: {msg}", self.path.display())),
            None => CliError::Config(format!("{}: {name}: {msg}", self.path.display())),
        }
    }

    /// Semantic checks that parsing alone cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        for m in &c.metrics {
            if !METRICS.contains(&m.as_str()) {
                return Err(self.error("", "metrics", format!("unknown metric {m:?}")));
            }
        }
        c.dataset().map_err(|e| self.error("dataset", "kind", e))?;
        c.model_config(0).validate().map_err(|e| self.error("model", "", e))?;
        let process = c.diffusion_process().map_err(|e| self.error("process", "kind", e))?;
        let checks = [
            ("teacher", "steps", c.teacher.steps > 0),
            ("teacher", "batch_size", c.teacher.batch_size > 0),
            ("teacher", "lr", c.teacher.lr > 0.0),
            ("teacher", "eval_sampler_steps", c.teacher.eval_sampler_steps > 0),
            (
                "teacher",
                "kl_table_steps",
                c.teacher.kl_table_steps.iter().all(|&k| k > 0),
            ),
            ("distill", "steps", c.distill.steps > 0),
            (
                "distill",
                "kl_table_steps",
                c.distill.kl_table_steps.iter().all(|&k| k > 0),
            ),
            ("sample", "steps", c.sample.steps > 0),
            ("sample", "n_samples", c.sample.n_samples > 0),
            ("eval", "gm_pairs", c.eval.gm_pairs >= 2),
            ("eval", "gm_batch", c.eval.gm_batch > 0),
            ("eval", "entropy_probes", c.eval.entropy_probes > 0),
        ];
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        let shift = |v: f64| v.is_finite() && v >= 0.0;
        let surgery = [
            ("distill", "temperature", unit(c.distill.temperature)),
            ("distill", "top_p", unit(c.distill.top_p)),
            ("distill", "shift", shift(c.distill.shift)),
            ("sample", "temperature", unit(c.sample.temperature)),
            ("sample", "top_p", unit(c.sample.top_p)),
            ("sample", "logit_shift", shift(c.sample.logit_shift)),
        ];
        for (section, key, ok) in checks.into_iter().chain(surgery) {
            if !ok {
                return Err(self.error(section, key, "value out of range"));
            }
        }
        c.distill_config()
            .validate(&process)
            .map_err(|e| self.error("distill", "", e))?;
        c.sample_mods().validate().map_err(|e| self.error("sample", "", e))?;
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_toml(source: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(source)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// SHA-256 of the canonical TOML with `out_dir` blanked.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir.clear();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn out_path(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn dataset(&self) -> ddlab_core::Result<SyntheticDataset> {
        let d = &self.dataset;
        let kind = match d.kind {
            DatasetName::CorrelatedBits => DatasetKind::CorrelatedBits,
            DatasetName::ModeMixture => {
                if d.modes.len() != d.weights.len() {
                    return Err(ddlab_core::Error::InvalidArgument(format!(
                        "{} modes but {} weights",
                        d.modes.len(),
                        d.weights.len()
                    )));
                }
                DatasetKind::ModeMixture {
                    modes: d
                        .modes
                        .iter()
                        .zip(&d.weights)
                        .map(|(tokens, &weight)| Mode {
                            tokens: tokens.clone(),
                            weight,
                        })
                        .collect(),
                    noise: d.noise,
                }
            }
            DatasetName::MarkovChain => DatasetKind::MarkovChain {
                initial: d.initial.clone(),
                transition: d.transition.clone(),
            },
        };
        SyntheticDataset::new(kind, d.positions, d.vocab)
    }

    pub fn diffusion_process(&self) -> ddlab_core::Result<DiffusionProcess> {
        let kind = match self.process.kind {
            ProcessName::Masked => ProcessKind::Masked,
            ProcessName::Uniform => ProcessKind::Uniform,
        };
        let schedule = match self.process.schedule {
            ScheduleName::Linear => NoiseSchedule::Linear,
            ScheduleName::Cosine => NoiseSchedule::Cosine,
        };
        DiffusionProcess::new(kind, self.dataset.vocab, schedule)
    }

    pub fn model_config(&self, n_noise: usize) -> ModelConfig {
        let input_vocab = match self.process.kind {
            ProcessName::Masked => self.dataset.vocab + 1,
            ProcessName::Uniform => self.dataset.vocab,
        };
        ModelConfig {
            seq_len: self.dataset.positions,
            vocab: self.dataset.vocab,
            input_vocab,
            embed_width: self.model.embed_width,
            hidden_width: self.model.hidden_width,
            depth: self.model.depth,
            time_width: self.model.time_width,
            n_noise,
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        let t = &self.teacher;
        TeacherConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            },
            weighting: t.weighting.into(),
            eval_every: t.eval_every,
            eval_sampler_steps: t.eval_sampler_steps,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            student_steps: d.student_steps,
            mods: LogitMods {
                temperature: d.temperature,
                top_p: d.top_p,
                shift: d.shift,
                masking: match d.masking {
                    MaskingName::Shift => TopPMasking::Shift,
                    MaskingName::Sentinel => TopPMasking::Sentinel,
                },
            },
            soft_target: d.soft_target,
            aux_updates_per_gen: d.aux_updates_per_gen,
            variant: match d.variant {
                VariantName::CrossEntropy => LossVariant::CrossEntropy,
                VariantName::PosteriorKl => LossVariant::PosteriorKl { ds: d.posterior_ds },
            },
            weighting: d.weighting.into(),
            batch_size: d.batch_size,
            adam: AdamConfig {
                lr: d.lr,
                ..AdamConfig::default()
            },
            gen_lr_scale: d.gen_lr_scale,
            decay_steps: d.decay_steps,
            final_lr_fraction: d.final_lr_fraction,
            max_grad_norm: d.max_grad_norm,
            fault_step: d.fault_step,
        }
    }

    pub fn distill_eval(&self) -> DistillEval {
        DistillEval {
            entropy_every: self.distill.entropy_every,
            entropy_probes: self.distill.entropy_probes,
            kl_every: self.distill.kl_every,
            noise_draws: self.distill.noise_draws,
            noise_seed: self.seed,
        }
    }

    pub fn sample_mods(&self) -> LogitMods {
        LogitMods::new(self.sample.temperature, self.sample.top_p, self.sample.logit_shift)
    }

    /// Copy of `self` with sweep `axis` set to `value`.
    pub fn with_axis(&self, axis: &str, value: &str) -> Result<Self, String> {
        let mut c = self.clone();
        let float = || {
            value
                .parse::<f64>()
                .map_err(|_| format!("{axis} value {value:?} is not a number"))
        };
        match axis {
            "sample.steps" => {
                c.sample.steps = value
                    .parse()
                    .map_err(|_| format!("{axis} value {value:?} is not a step count"))?
            }
            "sample.temperature" => c.sample.temperature = float()?,
            "sample.top_p" => c.sample.top_p = float()?,
            "sample.logit_shift" => c.sample.logit_shift = float()?,
            _ => {
                return Err(format!(
                    "{axis:?} is not sweepable (choose one of {})",
                    SWEEP_AXES.join(", ")
                ))
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str =
        "seed = 3\n\n[dataset]\nkind = \"correlated_bits\"\npositions = 2\nvocab = 2\n\n[process]\nkind = \"masked\"\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.distill, DistillSpec::default());
        assert_eq!(c.model_config(0).input_vocab, 3);
    }

    #[test]
    fn missing_field_is_named() {
        let err = ExperimentConfig::from_toml(&MINIMAL.replace("seed = 3\n", "")).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let err = ExperimentConfig::from_toml(&MINIMAL.replace("positions = 2\n", "")).unwrap_err();
        assert!(err.to_string().contains("positions"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}bogus = 1\n")).is_err());
    }

    #[test]
    fn locate_finds_keys_in_sections() {
        assert_eq!(locate(MINIMAL, "", "seed"), Some(1));
        assert_eq!(locate(MINIMAL, "dataset", "vocab"), Some(6));
        assert_eq!(locate(MINIMAL, "process", ""), Some(8));
        assert_eq!(locate(MINIMAL, "process", "vocab"), None);
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = 4;
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    #[test]
    fn sweep_axes() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.with_axis("sample.steps", "4").unwrap().sample.steps, 4);
        assert_eq!(c.with_axis("sample.top_p", "0.9").unwrap().sample.top_p, 0.9);
        assert!(c.with_axis("distill.lr", "0.1").is_err());
        assert!(c.with_axis("sample.steps", "x").is_err());
    }

    fn config() -> impl Strategy<Value = ExperimentConfig> {
        (
            any::<u64>(),
            1usize..4,
            2usize..4,
            prop::bool::ANY,
            0.01f64..1.0,
            prop::option::of(0usize..100),
            prop::collection::vec(1usize..64, 0..4),
        )
            .prop_map(|(seed, positions, vocab, masked, p, fault, ks)| {
                let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
                c.seed = seed;
                c.dataset.positions = positions;
                c.dataset.vocab = vocab;
                c.dataset.kind = DatasetName::ModeMixture;
                c.dataset.modes = vec![vec![0; positions]];
                c.dataset.weights = vec![p];
                c.process.kind = if masked {
                    ProcessName::Masked
                } else {
                    ProcessName::Uniform
                };
                c.distill.top_p = p;
                c.distill.fault_step = fault;
                c.distill.kl_table_steps = ks;
                c
            })
    }

    proptest! {
        #[test]
        fn toml_round_trips(c in config()) {
            let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.content_hash(), c.content_hash());
        }
    }
}
