//! Command implementations behind the `efaseg` binary.
//!
//! [`run`] parses arguments, dispatches a subcommand and maps failures to
//! exit codes: 0 success, 2 usage or configuration, 3 numeric failure,
//! 4 I/O.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attention::{Pooling, Variant};
use crate::error::{Error, Result};
use crate::flops::{self, AttentionQuery, Convention};
use crate::harness::{self, SyntheticScene, TrainConfig, TrainState};
use crate::isr::{self, Phase, Ratios, ReductionSchedule};
use crate::model::{Checkpoint, EdaFormer, ModelConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

/// Architecture fields of a run; the training ratios live in the
/// `schedule` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
    pub decoder_depths: [usize; 3],
    pub num_classes: usize,
    pub fusion_channels: usize,
    pub expansion: usize,
    pub variant: Variant,
    pub pooling: Pooling,
    pub sr_projection: bool,
    pub bias_free_projections: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_config(&ModelConfig::nano(3))
    }
}

impl ModelSection {
    pub fn from_config(c: &ModelConfig) -> Self {
        Self {
            in_channels: c.in_channels,
            stage_channels: c.stage_channels,
            stage_depths: c.stage_depths,
            stage_heads: c.stage_heads,
            decoder_depths: c.decoder_depths,
            num_classes: c.num_classes,
            fusion_channels: c.fusion_channels,
            expansion: c.expansion,
            variant: c.variant,
            pooling: c.pooling,
            sr_projection: c.sr_projection,
            bias_free_projections: c.bias_free_projections,
        }
    }
}

/// Synthetic data for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub eval_seed: u64,
    /// Read training scenes from an exported dataset instead of generating.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train_scenes: 200, eval_scenes: 50, height: 64, width: 64, seed: 1, eval_seed: 2, dir: None }
    }
}

/// A full run description: `[model]`, `[schedule]`, `[train]`, `[data]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub schedule: ReductionSchedule,
    pub train: TrainConfig,
    pub data: DataSection,
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            in_channels: m.in_channels,
            stage_channels: m.stage_channels,
            stage_depths: m.stage_depths,
            stage_heads: m.stage_heads,
            decoder_depths: m.decoder_depths,
            num_classes: m.num_classes,
            fusion_channels: m.fusion_channels,
            expansion: m.expansion,
            variant: m.variant,
            pooling: m.pooling,
            sr_projection: m.sr_projection,
            bias_free_projections: m.bias_free_projections,
            train_ratios: self.schedule.train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.schedule.effective_ratios(Phase::Inference)?;
        self.train.validate()?;
        let d = &self.data;
        if d.dir.is_none() {
            self.model_config().check_input(d.height, d.width)?;
            if d.train_scenes == 0 {
                return Err(Error::Config("data.train_scenes must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn training_data(&self) -> Result<Vec<SyntheticScene>> {
        match &self.data.dir {
            Some(dir) => harness::import_dataset(dir),
            None => {
                let d = &self.data;
                harness::generate_dataset(d.train_scenes, d.height, d.width, self.model.num_classes, d.seed)
            }
        }
    }

    pub fn eval_data(&self) -> Result<Vec<SyntheticScene>> {
        let d = &self.data;
        harness::generate_dataset(d.eval_scenes, d.height, d.width, self.model.num_classes, d.eval_seed)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "efaseg",
    version,
    about = "Embedding-free attention segmentation: training, evaluation and cost analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Jsonl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    AppendixB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    EmbeddingFree,
    Embedded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Average,
    Max,
    Overlapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Engine,
    Reference,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run configuration.
    Train {
        /// Run configuration (see config.example).
        config: PathBuf,
        /// Seed for initialization and batch sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint to write; the loss curve goes to `<out>.loss.tsv`.
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Continue from a checkpoint, restoring optimizer state.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Start from a checkpoint's weights with fresh optimizer state and
        /// the configuration's training ratios (fine-tuning).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Print the loss every this many steps (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Evaluate a checkpoint at a reduction schedule.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Effective ratios `[e1,e2,e3,e4]-[d1,d2,d3]`; defaults to the
        /// checkpoint's training ratios.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Evaluate a checkpoint at every schedule listed in a file.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// One schedule per line; `#` starts a comment.
        #[arg(long, conflicts_with = "appendix_c")]
        schedules: Option<PathBuf>,
        /// Use the built-in twenty-schedule list.
        #[arg(long)]
        appendix_c: bool,
        /// Report prefix: writes `<out>.txt` and `<out>.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-component cost of one attention layer.
    AnalyzeFlops {
        /// Emit a predefined set of rows instead of a single layer.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Query token count.
        #[arg(long, default_value_t = 196)]
        hw: usize,
        /// Channel width.
        #[arg(long, default_value_t = 128)]
        c: usize,
        /// Training reduction ratio.
        #[arg(long, default_value_t = 2)]
        r: usize,
        /// Inference multiplier.
        #[arg(long, default_value_t = 1)]
        a: usize,
        #[arg(long, value_enum, default_value_t = VariantArg::EmbeddingFree)]
        variant: VariantArg,
        #[arg(long, value_enum, default_value_t = PoolingArg::Average)]
        pooling: PoolingArg,
        /// Learned projection and norm after pooling.
        #[arg(long)]
        sr_projection: bool,
        /// Give projections a bias vector.
        #[arg(long)]
        bias: bool,
        #[arg(long, value_enum, default_value_t = ConventionArg::Reference)]
        convention: ConventionArg,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Write a synthetic dataset.
    GenData {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Square image extent.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train { config, seed, out: path, resume, init, log_every } => {
            cmd_train(&config, seed, &path, resume.as_deref(), init.as_deref(), log_every, out, err)
        }
        Command::Eval { ckpt, data, schedule, format } => cmd_eval(&ckpt, &data, schedule.as_deref(), format, out),
        Command::Sweep { ckpt, data, schedules, appendix_c, out: prefix } => {
            let list = match (schedules, appendix_c) {
                (Some(p), _) => {
                    isr::parse_schedule_list(&std::fs::read_to_string(&p).map_err(crate::error::io_at(&p))?)?
                }
                (None, true) => isr::appendix_c_schedules(),
                (None, false) => return Err(Error::Usage("pass --schedules FILE or --appendix-c".into())),
            };
            cmd_sweep(&ckpt, &data, &list, prefix.as_deref(), out)
        }
        Command::AnalyzeFlops { preset, hw, c, r, a, variant, pooling, sr_projection, bias, convention, format } => {
            let reports = match preset {
                Some(Preset::AppendixB) => flops::appendix_b(),
                None => {
                    let q = AttentionQuery {
                        r,
                        a,
                        variant: match variant {
                            VariantArg::EmbeddingFree => Variant::EmbeddingFree,
                            VariantArg::Embedded => Variant::Embedded,
                        },
                        pooling: match pooling {
                            PoolingArg::Average => Pooling::Average,
                            PoolingArg::Max => Pooling::Max,
                            PoolingArg::Overlapped => Pooling::Overlapped,
                        },
                        sr_projection,
                        bias_free: !bias,
                        convention: match convention {
                            ConventionArg::Engine => Convention::Engine,
                            ConventionArg::Reference => Convention::Reference,
                        },
                        ..AttentionQuery::from_tokens(hw, c)
                    };
                    vec![flops::attention_cost(&q)?]
                }
            };
            cmd_analyze_flops(&reports, format, out)
        }
        Command::GenData { n, classes, size, seed, out: dir } => cmd_gen_data(n, classes, size, seed, &dir, out),
    }
}

fn json_line(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(out, "{s}")?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    config: &Path,
    seed: u64,
    path: &Path,
    resume: Option<&Path>,
    init: Option<&Path>,
    log_every: u64,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let run = RunConfig::load(config)?;
    let data = run.training_data()?;
    let mcfg = run.model_config();
    let (mut model, mut state) = match (resume, init) {
        (Some(p), _) => {
            let ck = Checkpoint::load(p)?;
            if ck.config != mcfg {
                return Err(Error::Config(format!("{} was trained with a different configuration", p.display())));
            }
            let model = EdaFormer::from_checkpoint(&ck)?;
            let state = TrainState::from_checkpoint(&model, &ck)?;
            (model, state)
        }
        (None, Some(p)) => {
            let ck = Checkpoint::load(p)?;
            let mut base = ck.config.clone();
            base.train_ratios = mcfg.train_ratios;
            if base != mcfg {
                return Err(Error::Config(format!("{} has a different architecture", p.display())));
            }
            let model = EdaFormer::from_checkpoint(&ck)?.with_train_ratios(mcfg.train_ratios)?;
            let state = TrainState::new(&model, seed);
            (model, state)
        }
        (None, None) => {
            let model = EdaFormer::new(mcfg, seed)?;
            let state = TrainState::new(&model, seed);
            (model, state)
        }
    };
    let mut curve = String::from("step\tloss\tlr\tgrad_norm\n");
    let log = harness::train(&mut model, &mut state, &data, &run.train, |s| {
        curve += &format!("{}\t{:.8}\t{:.6e}\t{:.6e}\n", s.step, s.loss, s.lr, s.grad_norm);
        if log_every > 0 && s.step % log_every == 0 {
            let _ = writeln!(err, "step {:>6}  loss {:.4}  lr {:.2e}", s.step, s.loss, s.lr);
        }
    })?;
    let ck = state.checkpoint(&model);
    ck.save(path)?;
    let curve_path = loss_curve_path(path);
    std::fs::write(&curve_path, curve).map_err(crate::error::io_at(&curve_path))?;
    writeln!(out, "checkpoint {}", path.display())?;
    writeln!(out, "steps {} (ran {})", state.step, log.len())?;
    if let Some(last) = log.last() {
        writeln!(out, "final loss {:.6}", last.loss)?;
    }
    writeln!(out, "parameters {}", model.count_parameters())?;
    writeln!(out, "digest {}", ck.digest()?)?;
    if run.data.eval_scenes > 0 && run.data.dir.is_none() {
        let held_out = run.eval_data()?;
        let train = model.config.schedule();
        let m = harness::evaluate(&model, &held_out, &train, Phase::Train)?;
        writeln!(out, "held-out {} accuracy {:.4} mIoU {:.4}", train.train, m.pixel_accuracy, m.miou)?;
        if !run.schedule.is_identity() {
            let s = ReductionSchedule { train: train.train, multipliers: run.schedule.multipliers };
            let m = harness::evaluate(&model, &held_out, &s, Phase::Inference)?;
            let r = s.effective_ratios(Phase::Inference)?;
            writeln!(out, "held-out {r} accuracy {:.4} mIoU {:.4}", m.pixel_accuracy, m.miou)?;
        }
    }
    Ok(())
}

/// Loss-curve file written next to a training checkpoint.
pub fn loss_curve_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".loss.tsv");
    PathBuf::from(s)
}

fn load_model_and_data(ckpt: &Path, data: &Path) -> Result<(EdaFormer, Vec<SyntheticScene>)> {
    let model = EdaFormer::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let scenes = harness::import_dataset(data)?;
    if let Some(s) = scenes.first() {
        model.config.check_input(s.height(), s.width())?;
    }
    Ok((model, scenes))
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    schedule: String,
    pixel_accuracy: f64,
    miou: f64,
    iou: &'a [Option<f64>],
    attention_macs: u64,
    attention_layer_macs: u64,
    model_macs: u64,
}

pub fn cmd_eval(ckpt: &Path, data: &Path, schedule: Option<&str>, format: Format, out: &mut dyn Write) -> Result<()> {
    let target = schedule.map(str::parse::<Ratios>).transpose()?;
    let (model, scenes) = load_model_and_data(ckpt, data)?;
    let train = model.config.schedule();
    let (sched, phase) = match target {
        Some(t) => (train.with_target(t)?, Phase::Inference),
        None => (train, Phase::Train),
    };
    let first = scenes.first().ok_or_else(|| Error::Usage("evaluation needs at least one scene".into()))?;
    let m = harness::evaluate(&model, &scenes, &sched, phase)?;
    let cost = flops::model_cost(&model.config, &sched, phase, first.height(), first.width())?;
    let rec = EvalRecord {
        schedule: sched.effective_ratios(phase)?.to_string(),
        pixel_accuracy: m.pixel_accuracy,
        miou: m.miou,
        iou: &m.iou,
        attention_macs: cost.attention_macs(),
        attention_layer_macs: cost.attention_layer_macs(),
        model_macs: cost.total.macs,
    };
    match format {
        Format::Jsonl => json_line(out, &rec)?,
        Format::Text => {
            writeln!(out, "schedule          {}", rec.schedule)?;
            writeln!(out, "scenes            {}", scenes.len())?;
            writeln!(out, "pixel accuracy    {:.4}", rec.pixel_accuracy)?;
            writeln!(out, "mIoU              {:.4}", rec.miou)?;
            let ious: Vec<String> = m.iou.iter().map(|v| v.map_or("-".to_string(), |x| format!("{x:.4}"))).collect();
            writeln!(out, "class IoU         {}", ious.join(" "))?;
            writeln!(out, "attention MACs    {}", rec.attention_macs)?;
            writeln!(out, "attention layers  {}", rec.attention_layer_macs)?;
            writeln!(out, "model MACs        {}", rec.model_macs)?;
        }
    }
    Ok(())
}

pub fn cmd_sweep(
    ckpt: &Path,
    data: &Path,
    schedules: &[Ratios],
    prefix: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let (model, scenes) = load_model_and_data(ckpt, data)?;
    let (text, lines) = if schedules.is_empty() {
        (sweep_header(), String::new())
    } else {
        let report = isr::sweep(&model, schedules, &scenes)?;
        let mut lines = Vec::new();
        for row in std::iter::once(&report.baseline).chain(&report.rows) {
            json_line(&mut lines, row)?;
        }
        (isr::render_sweep(&report), String::from_utf8(lines).expect("json is UTF-8"))
    };
    if let Some(p) = prefix {
        let with = |ext: &str| {
            let mut s = p.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        std::fs::write(with(".txt"), &text)?;
        std::fs::write(with(".jsonl"), &lines)?;
    }
    write!(out, "{text}")?;
    Ok(())
}

fn sweep_header() -> String {
    let report = isr::SweepReport { baseline: empty_row(), rows: Vec::new() };
    isr::render_sweep(&report).lines().take(2).map(|l| format!("{l}\n")).collect()
}

fn empty_row() -> isr::SweepRow {
    isr::SweepRow {
        schedule: String::new(),
        attention_macs: 0,
        attention_layer_macs: 0,
        model_macs: 0,
        pixel_accuracy: 0.0,
        miou: 0.0,
        miou_delta: 0.0,
        attention_macs_delta: 0.0,
    }
}

#[derive(Serialize)]
struct FlopRecord<'a> {
    report: &'a flops::FlopReport,
    total: flops::Cost,
    display: &'a flops::RenderedRow,
}

pub fn cmd_analyze_flops(reports: &[flops::FlopReport], format: Format, out: &mut dyn Write) -> Result<()> {
    match format {
        Format::Text => {
            write!(out, "{}", flops::render_table(reports))?;
            writeln!(out, "\nexact counts (MACs / params)")?;
            for r in reports {
                let t = r.total();
                writeln!(
                    out,
                    "{:<12} qkv {}/{}  global {}/{}  out {}/{}  others {}/{}  total {}/{}",
                    r.label,
                    r.qkv_embedding.macs,
                    r.qkv_embedding.params,
                    r.global_functioning.macs,
                    r.global_functioning.params,
                    r.output_projection.macs,
                    r.output_projection.params,
                    r.others.macs,
                    r.others.params,
                    t.macs,
                    t.params
                )?;
            }
        }
        Format::Jsonl => {
            for (r, d) in reports.iter().zip(flops::rendered_rows(reports).iter()) {
                json_line(out, &FlopRecord { report: r, total: r.total(), display: d })?;
            }
        }
    }
    Ok(())
}

pub fn cmd_gen_data(n: usize, classes: usize, size: usize, seed: u64, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let scenes = harness::generate_dataset(n, size, size, classes, seed)?;
    let files = harness::export_dataset(dir, &scenes).map_err(|e| match e {
        Error::Io(io) => crate::error::io_at(dir)(io),
        other => other,
    })?;
    writeln!(out, "wrote {} scenes ({} files) to {}", scenes.len(), files.len(), dir.display())?;
    Ok(())
}
