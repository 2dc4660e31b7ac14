//! The `train-teacher`, `distill`, `sample`, `eval` and `sweep` subcommands.

use std::path::{Path, PathBuf};

use ddlab_core::autodiff::{AdamConfig, AdamState};
use ddlab_core::diffusion::{ancestral_sample, run_reverse_chain};
use ddlab_core::distill::{run_distillation, student_sample, DistillLogRow, DistillState};
use ddlab_core::metrics::{
    denoiser_output_entropy, exact_chain_distribution, factorized_oracle_chain, generator_output_entropy,
    gradient_moment, kl, oracle_denoiser, sample_entropy, DenoiserPredictor, GeneratorPredictor, ReferenceModel,
};
use ddlab_core::models::Checkpoint;
use ddlab_core::teacher::train_teacher;
use ddlab_core::{
    Denoiser, DiffusionProcess, Error as CoreError, ExactDistribution, Generator, ModelConfig, RngState,
    SyntheticDataset, TokenBatch,
};

use crate::artifacts::{cell, file_digest, stamp, CsvTable, MetricRecord};
use crate::config::{ExperimentConfig, LoadedConfig, SamplerName, METRICS};
use crate::error::{CliError, CliResult};

/// Labels of the independent random streams derived from the seed.
const STREAM_INIT: u64 = 1;
const STREAM_TEACHER: u64 = 2;
const STREAM_DISTILL: u64 = 3;
const STREAM_SAMPLE: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_REFERENCE: u64 = 6;

/// Data samples used to fit the reference model when no exact table exists.
const REFERENCE_SAMPLES: usize = 4096;

pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const AUX_FILE: &str = "aux.ckpt";
pub const STATE_FILE: &str = "distill_state.ckpt";
pub const TEACHER_LOG: &str = "teacher_log.csv";
pub const TEACHER_KL: &str = "teacher_kl.csv";
pub const DISTILL_LOG: &str = "distill_log.csv";
pub const DISTILL_KL: &str = "distill_kl.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const EVAL_FILE: &str = "eval.jsonl";

const DISTILL_COLUMNS: [&str; 5] = ["step", "phase", "loss", "gen_output_entropy", "eval_kl"];

/// A validated experiment with its derived core objects.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dataset: SyntheticDataset,
    pub process: DiffusionProcess,
}

/// Overrides given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub metrics: Vec<String>,
}

impl Experiment {
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let mut loaded = LoadedConfig::read(path)?;
        if let Some(seed) = overrides.seed {
            loaded.config.seed = seed;
        }
        if let Some(out) = &overrides.out {
            loaded.config.out_dir = out.to_string_lossy().into_owned();
        }
        if !overrides.metrics.is_empty() {
            loaded.config.metrics = overrides.metrics.clone();
        }
        loaded.validate()?;
        Self::from_config(loaded.config)
    }

    /// Builds an experiment from an already validated config.
    pub fn from_config(config: ExperimentConfig) -> CliResult<Self> {
        let dataset = config.dataset().map_err(|e| CliError::Config(e.to_string()))?;
        let process = config
            .diffusion_process()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self {
            hash: config.content_hash(),
            config,
            dataset,
            process,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn out_dir(&self) -> CliResult<PathBuf> {
        let out = self.config.out_path();
        std::fs::create_dir_all(&out)?;
        Ok(out)
    }

    fn root_rng(&self) -> RngState {
        RngState::new(self.seed())
    }

    fn table(&self, path: &Path, kind: &str, columns: &[&str]) -> CliResult<CsvTable> {
        CsvTable::create(path, kind, &self.hash, self.seed(), columns)
    }

    fn exact(&self) -> Option<ExactDistribution> {
        self.dataset.exact().ok()
    }

    fn stamp_process(&self, ck: &mut Checkpoint) -> CliResult<()> {
        stamp(ck, &self.hash, self.seed())?;
        ck.set("process", self.process.kind().name())?;
        ck.set("schedule", self.process.schedule().name())?;
        Ok(())
    }

    /// Rejects checkpoints built for another process or sequence length.
    fn check_compatible(&self, ck: &Checkpoint, kinds: &[&str], path: &Path) -> CliResult<ModelConfig> {
        let bad = |msg: String| CliError::Incompatible(format!("{}: {msg}", path.display()));
        let kind = ck.require("kind").map_err(|e| bad(e.to_string()))?;
        if !kinds.contains(&kind) {
            return Err(bad(format!("checkpoint kind {kind:?}, expected one of {kinds:?}")));
        }
        let cfg = ck.model_config().map_err(|e| bad(e.to_string()))?;
        if !cfg.matches(&self.process) || cfg.seq_len != self.dataset.positions() {
            return Err(bad(
                "model shape does not match the configured dataset and process".into()
            ));
        }
        for (key, want) in [
            ("process", self.process.kind().name()),
            ("schedule", self.process.schedule().name()),
        ] {
            if ck.get(key) != Some(want) {
                return Err(bad(format!("{key} is {:?}, config has {want:?}", ck.get(key))));
            }
        }
        Ok(cfg)
    }

    fn load_checkpoint(&self, path: &Path, kinds: &[&str]) -> CliResult<(Checkpoint, ModelConfig)> {
        let ck = Checkpoint::load(path).map_err(|e| CliError::Incompatible(format!("{}: {e}", path.display())))?;
        let cfg = self.check_compatible(&ck, kinds, path)?;
        Ok((ck, cfg))
    }

    /// A trained model from a teacher, auxiliary or generator checkpoint.
    pub fn load_model(&self, path: &Path) -> CliResult<Model> {
        let (ck, cfg) = self.load_checkpoint(path, &["teacher", "aux", "generator"])?;
        let incompatible = |e: CoreError| CliError::Incompatible(format!("{}: {e}", path.display()));
        if ck.require("kind").map_err(incompatible)? == "generator" {
            Ok(Model::Generator(
                ck.generator_from(&cfg, "params").map_err(incompatible)?,
            ))
        } else {
            Ok(Model::Denoiser(ck.to_denoiser().map_err(incompatible)?))
        }
    }
}

/// `generator.ckpt` when it exists in `out`, otherwise `teacher.ckpt`.
pub fn default_checkpoint(out: &Path) -> PathBuf {
    let generator = out.join(GENERATOR_FILE);
    if generator.exists() {
        generator
    } else {
        out.join(TEACHER_FILE)
    }
}

/// Exact KL of the model chain at each step count.
fn kl_table(
    exp: &Experiment,
    steps: &[usize],
    mut chain: impl FnMut(usize) -> ddlab_core::Result<ExactDistribution>,
) -> CliResult<Option<Vec<(usize, f64)>>> {
    let Some(q) = exp.exact() else {
        log::warn!("dataset has no exact table; skipping the KL table");
        return Ok(None);
    };
    let mut rows = Vec::with_capacity(steps.len());
    for &k in steps {
        match chain(k) {
            Ok(p) => rows.push((k, kl(&q, &p)?)),
            Err(CoreError::StateSpace { .. }) => {
                log::warn!("state space too large for the exact chain; skipping the KL table");
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutcome {
    pub checkpoint: PathBuf,
    /// `(sampler steps, exact KL)` rows, when the dataset is enumerable.
    pub kl_table: Option<Vec<(usize, f64)>>,
}

pub fn cmd_train_teacher(exp: &Experiment) -> CliResult<TeacherOutcome> {
    let out = exp.out_dir()?;
    let root = exp.root_rng();
    let mut model = Denoiser::new(exp.config.model_config(0), &mut root.derive(STREAM_INIT))?;
    let log = train_teacher(
        &mut model,
        &exp.dataset,
        &exp.process,
        &exp.config.teacher_config(),
        &mut root.derive(STREAM_TEACHER),
    )?;

    let mut table = exp.table(
        &out.join(TEACHER_LOG),
        "teacher_log",
        &["step", "loss", "eval_kl", "wallclock_ms"],
    )?;
    for row in &log {
        let ms = if exp.config.teacher.record_wallclock {
            row.wallclock_ms.to_string()
        } else {
            String::new()
        };
        table.row([row.step.to_string(), row.loss.to_string(), cell(row.eval_kl), ms])?;
    }
    table.finish()?;

    let mut ck = Checkpoint::from_denoiser("teacher", &model)?;
    exp.stamp_process(&mut ck)?;
    let path = out.join(TEACHER_FILE);
    ck.save(&path)?;

    let predictor = DenoiserPredictor::new(&model);
    let kl_rows = kl_table(exp, &exp.config.teacher.kl_table_steps, |k| {
        exact_chain_distribution(&predictor, &exp.process, exp.dataset.positions(), k)
    })?;
    if let Some(rows) = &kl_rows {
        let mut t = exp.table(&out.join(TEACHER_KL), "teacher_kl", &["steps", "exact_kl"])?;
        println!("{:>6}  {:>12}", "steps", "exact_kl");
        for (k, v) in rows {
            t.row([k.to_string(), v.to_string()])?;
            println!("{k:>6}  {v:>12.6}");
        }
        t.finish()?;
    }
    Ok(TeacherOutcome {
        checkpoint: path,
        kl_table: kl_rows,
    })
}

/// Where `cmd_distill` gets its teacher and whether it resumes or stops early.
#[derive(Debug, Clone, Default)]
pub struct DistillRun {
    pub teacher: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub stop_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub step: usize,
    /// `(k, student KL, teacher KL)` rows once the run is complete.
    pub kl_table: Option<Vec<(usize, f64, f64)>>,
}

fn state_checkpoint(exp: &Experiment, state: &DistillState, teacher_digest: &str) -> CliResult<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.set("kind", "distill_state")?;
    exp.stamp_process(&mut ck)?;
    ck.set("teacher_digest", teacher_digest)?;
    ck.set("step", state.step)?;
    ck.set("rng_seed", state.rng.seed())?;
    ck.set("rng_word_pos", state.rng.word_pos())?;
    ck.set("gen_adam_step", state.gen_adam.step)?;
    ck.set("aux_adam_step", state.aux_adam.step)?;
    ck.set_model_config(state.generator.config())?;
    ck.push_section("gen_params", state.generator.params().values().to_vec())?;
    ck.push_section("aux_params", state.aux.params().values().to_vec())?;
    ck.push_section("gen_m", state.gen_adam.m.clone())?;
    ck.push_section("gen_v", state.gen_adam.v.clone())?;
    ck.push_section("aux_m", state.aux_adam.m.clone())?;
    ck.push_section("aux_v", state.aux_adam.v.clone())?;
    Ok(ck)
}

fn load_state(exp: &Experiment, path: &Path, teacher_digest: &str) -> CliResult<DistillState> {
    let (ck, cfg) = exp.load_checkpoint(path, &["distill_state"])?;
    let bad = |msg: String| CliError::Incompatible(format!("{}: {msg}", path.display()));
    if ck.get("config_hash") != Some(exp.hash.as_str()) {
        return Err(bad("state was written by a different config".into()));
    }
    if ck.get("teacher_digest") != Some(teacher_digest) {
        return Err(bad("state was distilled from a different teacher".into()));
    }
    if cfg.n_noise != exp.config.distill.n_noise {
        return Err(bad(format!("state has n_noise {}", cfg.n_noise)));
    }
    let read = || -> ddlab_core::Result<DistillState> {
        let aux_cfg = ModelConfig {
            n_noise: 0,
            ..cfg.clone()
        };
        let adam = |m: &str, v: &str, step: &str| -> ddlab_core::Result<AdamState> {
            Ok(AdamState {
                m: ck.section(m)?.to_vec(),
                v: ck.section(v)?.to_vec(),
                step: ck.parse(step)?,
            })
        };
        Ok(DistillState {
            generator: ck.generator_from(&cfg, "gen_params")?,
            aux: Denoiser::from_parts(aux_cfg.clone(), ck.store_for(&aux_cfg, "aux_params")?)?,
            gen_adam: adam("gen_m", "gen_v", "gen_adam_step")?,
            aux_adam: adam("aux_m", "aux_v", "aux_adam_step")?,
            step: ck.parse("step")?,
            rng: RngState::from_parts(ck.parse("rng_seed")?, ck.parse("rng_word_pos")?),
        })
    };
    read().map_err(|e| bad(e.to_string()))
}

fn log_cells(row: &DistillLogRow) -> [String; 5] {
    [
        row.step.to_string(),
        row.phase.name().to_string(),
        row.loss.to_string(),
        cell(row.gen_output_entropy),
        cell(row.eval_kl),
    ]
}

pub fn cmd_distill(exp: &Experiment, run: &DistillRun) -> CliResult<DistillOutcome> {
    let out = exp.out_dir()?;
    let teacher_path = run.teacher.clone().unwrap_or_else(|| out.join(TEACHER_FILE));
    let (teacher_ck, _) = exp.load_checkpoint(&teacher_path, &["teacher"])?;
    let teacher = teacher_ck
        .to_denoiser()
        .map_err(|e| CliError::Incompatible(format!("{}: {e}", teacher_path.display())))?;
    let teacher_digest = file_digest(&teacher_path)?;
    let cfg = exp.config.distill_config();
    let total = exp.config.distill.steps;
    let until = run.stop_at.map_or(total, |s| s.min(total));
    let log_path = out.join(DISTILL_LOG);

    let (mut state, mut table) = match &run.resume {
        None => {
            let rng = exp.root_rng().derive(STREAM_DISTILL);
            let state = DistillState::from_teacher(&teacher, exp.config.distill.n_noise, rng)?;
            (state, exp.table(&log_path, "distill_log", &DISTILL_COLUMNS)?)
        }
        Some(path) => {
            let state = load_state(exp, path, &teacher_digest)?;
            let step = state.step;
            let keep = |r: &csv::StringRecord| r.get(0).and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < step);
            let table = CsvTable::reopen(&log_path, "distill_log", &exp.hash, exp.seed(), &DISTILL_COLUMNS, keep)?;
            (state, table)
        }
    };

    let mut rows = Vec::new();
    let result = run_distillation(
        &mut state,
        &teacher,
        &exp.dataset,
        &exp.process,
        &cfg,
        until,
        &exp.config.distill_eval(),
        |row| {
            rows.push(log_cells(row));
            Ok(())
        },
    );
    for r in &rows {
        table.row(r)?;
    }
    table.finish()?;
    result?;

    state_checkpoint(exp, &state, &teacher_digest)?.save(&out.join(STATE_FILE))?;
    let mut gen_ck = Checkpoint::new();
    gen_ck.set("kind", "generator")?;
    gen_ck.set_model_config(state.generator.config())?;
    gen_ck.push_section("params", state.generator.params().values().to_vec())?;
    let mut aux_ck = Checkpoint::from_denoiser("aux", &state.aux)?;
    for ck in [&mut gen_ck, &mut aux_ck] {
        exp.stamp_process(ck)?;
        ck.set("teacher_digest", &teacher_digest)?;
        ck.set("step", state.step)?;
    }
    gen_ck.save(&out.join(GENERATOR_FILE))?;
    aux_ck.save(&out.join(AUX_FILE))?;

    if state.step < total {
        return Ok(DistillOutcome {
            step: state.step,
            kl_table: None,
        });
    }
    let d = &exp.config.distill;
    let student = kl_table(exp, &d.kl_table_steps, |k| {
        let p = GeneratorPredictor::new(&state.generator, d.noise_draws, exp.seed());
        exact_chain_distribution(&p, &exp.process, exp.dataset.positions(), k)
    })?;
    let teacher_rows = kl_table(exp, &d.kl_table_steps, |k| {
        exact_chain_distribution(
            &DenoiserPredictor::new(&teacher),
            &exp.process,
            exp.dataset.positions(),
            k,
        )
    })?;
    let merged = student.zip(teacher_rows).map(|(s, t)| {
        s.iter()
            .zip(&t)
            .map(|(&(k, sk), &(_, tk))| (k, sk, tk))
            .collect::<Vec<_>>()
    });
    if let Some(rows) = &merged {
        let mut t = exp.table(
            &out.join(DISTILL_KL),
            "distill_kl",
            &["steps", "student_kl", "teacher_kl"],
        )?;
        println!("{:>6}  {:>12}  {:>12}", "steps", "student_kl", "teacher_kl");
        for (k, s, tk) in rows {
            t.row([k.to_string(), s.to_string(), tk.to_string()])?;
            println!("{k:>6}  {s:>12.6}  {tk:>12.6}");
        }
        t.finish()?;
    }
    Ok(DistillOutcome {
        step: state.step,
        kl_table: merged,
    })
}

/// A trained network loaded from a checkpoint.
pub enum Model {
    Denoiser(Denoiser),
    Generator(Generator),
}

/// Where evaluation samples come from.
pub enum Source {
    Data,
    Uniform,
    /// The reverse chain driven by the exact factorized oracle.
    Oracle(ExactDistribution),
    Model(Model),
}

impl Source {
    /// Draws `n` sequences. Denoisers use the configured logit surgery;
    /// generators are sampled as trained.
    pub fn draw(
        &self,
        exp: &Experiment,
        cfg: &ExperimentConfig,
        n: usize,
        rng: &mut RngState,
    ) -> ddlab_core::Result<TokenBatch> {
        let (d, k) = (exp.dataset.positions(), exp.dataset.vocab());
        match self {
            Source::Data => Ok(exp.dataset.sample(n, rng)),
            Source::Uniform => TokenBatch::new(n, d, (0..n * d).map(|_| rng.below(k) as u32).collect()),
            Source::Oracle(q) => run_reverse_chain(&exp.process, cfg.sample.steps, n, d, rng, |z, t, _| {
                oracle_denoiser(q, &exp.process, z, t)
            }),
            Source::Model(Model::Denoiser(m)) => {
                ancestral_sample(m, &exp.process, cfg.sample.steps, &cfg.sample_mods(), n, rng)
            }
            Source::Model(Model::Generator(g)) => student_sample(g, &exp.process, cfg.sample.steps, n, rng),
        }
    }

    /// The exact distribution of [`Source::draw`].
    pub fn exact(&self, exp: &Experiment, cfg: &ExperimentConfig) -> ddlab_core::Result<ExactDistribution> {
        let q = exp.dataset.exact()?;
        let d = exp.dataset.positions();
        match self {
            Source::Data => Ok(q),
            Source::Uniform => ExactDistribution::uniform(q.vocab(), d),
            Source::Oracle(_) => factorized_oracle_chain(&q, &exp.process, cfg.sample.steps),
            Source::Model(Model::Denoiser(m)) => {
                let p = DenoiserPredictor {
                    model: m,
                    mods: cfg.sample_mods(),
                };
                exact_chain_distribution(&p, &exp.process, d, cfg.sample.steps)
            }
            Source::Model(Model::Generator(g)) => {
                let p = GeneratorPredictor::new(g, cfg.eval.noise_draws, cfg.seed);
                exact_chain_distribution(&p, &exp.process, d, cfg.sample.steps)
            }
        }
    }
}

/// The source selected by `eval.sampler`.
pub fn open_source(exp: &Experiment, checkpoint: Option<&Path>) -> CliResult<Source> {
    Ok(match exp.config.eval.sampler {
        SamplerName::Data => Source::Data,
        SamplerName::Uniform => Source::Uniform,
        SamplerName::Oracle => Source::Oracle(
            exp.exact()
                .ok_or_else(|| CliError::Config("eval.sampler: the oracle needs an enumerable dataset".into()))?,
        ),
        SamplerName::Checkpoint => {
            let path = checkpoint
                .map(Path::to_path_buf)
                .or_else(|| exp.config.eval.checkpoint.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| default_checkpoint(&exp.config.out_path()));
            Source::Model(exp.load_model(&path)?)
        }
    })
}

pub fn cmd_sample(exp: &Experiment, checkpoint: Option<&Path>) -> CliResult<TokenBatch> {
    let out = exp.out_dir()?;
    let path = checkpoint.map_or_else(|| default_checkpoint(&out), Path::to_path_buf);
    let source = Source::Model(exp.load_model(&path)?);
    let mut rng = exp.root_rng().derive(STREAM_SAMPLE);
    let samples = source.draw(exp, &exp.config, exp.config.sample.n_samples, &mut rng)?;
    let d = samples.positions();
    let columns: Vec<String> = std::iter::once("sample".to_string())
        .chain((0..d).map(|i| format!("x{i}")))
        .collect();
    let columns: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut t = exp.table(&out.join(SAMPLES_FILE), "samples", &columns)?;
    for (i, seq) in samples.sequences().enumerate() {
        t.row(std::iter::once(i.to_string()).chain(seq.iter().map(u32::to_string)))?;
    }
    t.finish()?;
    Ok(samples)
}

/// Unigram entropy with its delta-method standard error.
fn entropy_with_stderr(samples: &TokenBatch, vocab: usize) -> ddlab_core::Result<(f64, f64)> {
    let h = sample_entropy(samples, vocab)?;
    let n = samples.tokens().len() as f64;
    let mut counts = vec![0.0; vocab];
    for &t in samples.tokens() {
        counts[t as usize] += 1.0;
    }
    let second: f64 = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            p * p.ln() * p.ln()
        })
        .sum();
    Ok((h, ((second - h * h).max(0.0) / n).sqrt()))
}

/// `exp(mean token NLL)` with a delta-method standard error over sequences.
fn perplexity_with_stderr(reference: &ReferenceModel, samples: &TokenBatch) -> ddlab_core::Result<(f64, f64)> {
    let d = samples.positions() as f64;
    let per_seq = samples
        .sequences()
        .map(|s| reference.log_prob(s).map(|lp| -lp / d))
        .collect::<ddlab_core::Result<Vec<f64>>>()?;
    let n = per_seq.len() as f64;
    if n < 2.0 {
        return Err(CoreError::InvalidArgument(
            "perplexity needs at least two samples".into(),
        ));
    }
    let mean = per_seq.iter().sum::<f64>() / n;
    let var = per_seq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let ppl = mean.exp();
    Ok((ppl, ppl * (var / n).sqrt()))
}

fn fit_reference(exp: &Experiment, cfg: &ExperimentConfig) -> ddlab_core::Result<ReferenceModel> {
    let mut reference = ReferenceModel::new(exp.dataset.vocab(), exp.dataset.positions())?;
    let adam = AdamConfig {
        lr: cfg.eval.reference_lr,
        ..AdamConfig::default()
    };
    match exp.dataset.exact() {
        Ok(q) => reference.train_exact(&q, cfg.eval.reference_steps, &adam)?,
        Err(_) => {
            let mut rng = RngState::new(cfg.seed).derive(STREAM_REFERENCE);
            let data = exp.dataset.sample(REFERENCE_SAMPLES, &mut rng);
            reference.train_samples(&data, cfg.eval.reference_steps, &adam)?
        }
    }
    Ok(reference)
}

/// One record per metric of `cfg.metrics`, computed on `source`.
///
/// Each metric draws from its own stream keyed by its name, so a record does
/// not depend on which other metrics are requested.
pub fn evaluate(exp: &Experiment, cfg: &ExperimentConfig, source: &Source) -> CliResult<Vec<MetricRecord>> {
    let hash = cfg.content_hash();
    let mut reference = None;
    let mut records = Vec::with_capacity(cfg.metrics.len());
    for name in &cfg.metrics {
        let id = METRICS
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| CliError::Config(format!("metrics: unknown metric {name:?}")))?;
        let mut rng = RngState::new(cfg.seed).derive(STREAM_EVAL).derive(id as u64);
        let n = cfg.sample.n_samples;
        let (value, stderr) = match name.as_str() {
            "exact_kl" => {
                let q = exp
                    .exact()
                    .ok_or_else(|| CliError::Config("metrics: exact_kl needs an enumerable dataset".into()))?;
                (kl(&q, &source.exact(exp, cfg)?)?, None)
            }
            "sample_entropy" => {
                let (h, se) = entropy_with_stderr(&source.draw(exp, cfg, n, &mut rng)?, exp.dataset.vocab())?;
                (h, Some(se))
            }
            "gen_ppl" => {
                if reference.is_none() {
                    reference = Some(fit_reference(exp, cfg)?);
                }
                let samples = source.draw(exp, cfg, n, &mut rng)?;
                let (v, se) = perplexity_with_stderr(reference.as_ref().expect("fitted"), &samples)?;
                (v, Some(se))
            }
            "gm" => {
                if reference.is_none() {
                    reference = Some(fit_reference(exp, cfg)?);
                }
                let gm = gradient_moment(
                    reference.as_ref().expect("fitted"),
                    |b, r| source.draw(exp, cfg, b, r),
                    |b, r| Ok(exp.dataset.sample(b, r)),
                    cfg.eval.gm_batch,
                    cfg.eval.gm_pairs,
                    &mut rng,
                )?;
                (gm.estimate, Some(gm.stderr))
            }
            "output_entropy" => {
                let probes = cfg.eval.entropy_probes;
                let v = match source {
                    Source::Model(Model::Denoiser(m)) => denoiser_output_entropy(m, &exp.process, probes, &mut rng)?,
                    Source::Model(Model::Generator(g)) => generator_output_entropy(g, &exp.process, probes, &mut rng)?,
                    _ => {
                        return Err(CliError::Config(
                            "metrics: output_entropy needs the checkpoint sampler".into(),
                        ))
                    }
                };
                (v, None)
            }
            other => return Err(CliError::Config(format!("metrics: unknown metric {other:?}"))),
        };
        records.push(MetricRecord {
            metric: name.clone(),
            value,
            stderr,
            config_hash: hash.clone(),
            seed: cfg.seed,
        });
    }
    Ok(records)
}

pub fn cmd_eval(exp: &Experiment, checkpoint: Option<&Path>) -> CliResult<Vec<MetricRecord>> {
    let out = exp.out_dir()?;
    let source = open_source(exp, checkpoint)?;
    let records = evaluate(exp, &exp.config, &source)?;
    let mut text = String::new();
    for r in &records {
        let line = r.to_json();
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(out.join(EVAL_FILE), text)?;
    Ok(records)
}

/// One evaluated sweep value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub records: Vec<MetricRecord>,
}

pub fn sweep_file(axis: &str) -> String {
    format!("sweep_{}.csv", axis.replace('.', "_"))
}

pub fn cmd_sweep(
    exp: &Experiment,
    checkpoint: Option<&Path>,
    axis: &str,
    values: &[String],
) -> CliResult<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let c = exp.config.with_axis(axis, v).map_err(CliError::Config)?;
            c.sample_mods()
                .validate()
                .map_err(|e| CliError::Config(format!("{axis} = {v}: {e}")))?;
            if c.sample.steps == 0 {
                return Err(CliError::Config(format!("{axis} = {v}: steps must be >= 1")));
            }
            Ok(c)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let out = exp.out_dir()?;
    let source = open_source(exp, checkpoint)?;
    let mut columns = vec!["value".to_string(), "config_hash".to_string()];
    for m in &exp.config.metrics {
        columns.push(m.clone());
        columns.push(format!("{m}_stderr"));
    }
    let columns: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut table = exp.table(&out.join(sweep_file(axis)), &format!("sweep axis={axis}"), &columns)?;
    let mut rows = Vec::with_capacity(values.len());
    for (v, cfg) in values.iter().zip(&configs) {
        let records = evaluate(exp, cfg, &source)?;
        let mut cells = vec![v.clone(), cfg.content_hash()];
        for r in &records {
            cells.push(r.value.to_string());
            cells.push(cell(r.stderr));
        }
        table.row(&cells)?;
        println!("{}", cells.join(","));
        rows.push(SweepRow {
            value: v.clone(),
            records,
        });
    }
    table.finish()?;
    Ok(rows)
}
