//! The `c2f` command-line harness.
//!
//! Training commands write into the config's `out_dir`:
//!
//! | file            | contents                                         |
//! |-----------------|--------------------------------------------------|
//! | `config.toml`   | the resolved config                              |
//! | `xe_log.jsonl`  | one [`EpochLog`] per XE epoch                    |
//! | `xe_last.ckpt`  | parameters and Adam state after the last epoch   |
//! | `xe_best.ckpt`  | parameters of the best validation-CIDEr epoch    |
//! | `rl_*`          | the same for the RL phase                        |
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 non-finite
//! numerics.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::beam::beam_search;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::decoder::rollout_greedy;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::gradcheck::GradCheckReport;
use crate::model::ModelParams;
use crate::task::{self, Dataset, Example, Split};
use crate::train::log::{append_jsonl, read_jsonl};
use crate::train::rl::train_rl;
use crate::train::xe::{train_xe, xe_grad_check};
use crate::train::{EpochLog, Phase, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "c2f", version, about = "Coarse-to-fine captioning on synthetic grid scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Default, Args)]
pub struct GlobalArgs {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Beam width for final-stage beam search.
    #[arg(long, global = true, value_name = "K")]
    pub beam: Option<usize>,
    /// `train` or `val`.
    #[arg(long, global = true, value_name = "SPLIT")]
    pub split: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the generated train/val scenes as JSONL.
    GenData,
    /// Cross-entropy training; `--checkpoint` resumes from an XE checkpoint.
    TrainXe,
    /// REINFORCE training from an XE checkpoint, or resuming an RL one.
    TrainRl,
    /// Per-stage greedy and final-stage beam metrics as JSON.
    Eval,
    /// Print each stage's caption for one scene.
    Decode(SceneArgs),
    /// Dump the fine stages' attention grids for one scene as JSON.
    ExportAttention(SceneArgs),
    /// Finite-difference check of the full model gradient.
    Gradcheck,
}

#[derive(Debug, Default, Args)]
pub struct SceneArgs {
    /// Scene id in the dataset; defaults to the first scene of the split.
    #[arg(long, value_name = "ID", conflicts_with = "scene_seed")]
    pub scene: Option<u64>,
    /// Decode a freshly generated scene from this seed instead.
    #[arg(long, value_name = "N")]
    pub scene_seed: Option<u64>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = if code == EXIT_OK {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_VALIDATION
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData => {
            let cfg = resolve_config(g)?;
            let data = load_dataset(&cfg)?;
            task::write_dataset(&cfg.out_dir, &data)?;
            say(
                out,
                format!(
                    "wrote {} train and {} val scenes to {}",
                    data.train.len(),
                    data.val.len(),
                    cfg.out_dir.display()
                ),
            )?;
        }
        Command::TrainXe => {
            let cfg = resolve_config(g)?;
            let summary = train_xe_command(&cfg, g.checkpoint.as_deref(), out)?;
            say(out, summary.describe())?;
        }
        Command::TrainRl => {
            let cfg = resolve_config(g)?;
            let ckpt = g
                .checkpoint
                .as_deref()
                .ok_or_else(|| Error::Config("train-rl needs --checkpoint".into()))?;
            let summary = train_rl_command(&cfg, ckpt, out)?;
            say(out, summary.describe())?;
        }
        Command::Eval => {
            let (cfg, ckpt) = checkpoint_and_config(g)?;
            let split = split_arg(g)?;
            let data = load_dataset(&cfg)?;
            let report = eval_command(&cfg, &ckpt.params, &data, split, Some(g.beam.unwrap_or(cfg.beam)))?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(dir) = &g.out {
                write_file(&dir.join(format!("eval_{split}.json")), &json)?;
            }
            say(out, json)?;
        }
        Command::Decode(scene) => {
            let (cfg, ckpt) = checkpoint_and_config(g)?;
            let example = pick_scene(&cfg, g, scene)?;
            let decoded = decode_command(&ckpt.params, &example, g.beam)?;
            for line in decoded.lines(&task::vocabulary())? {
                say(out, line)?;
            }
        }
        Command::ExportAttention(scene) => {
            let (cfg, ckpt) = checkpoint_and_config(g)?;
            let example = pick_scene(&cfg, g, scene)?;
            let export = export_attention(&ckpt.params, &example, &cfg.hash())?;
            let json = serde_json::to_string_pretty(&export)?;
            match &g.out {
                Some(dir) => {
                    let path = dir.join(format!("attention_{}.json", example.scene.id));
                    write_file(&path, &json)?;
                    say(out, format!("wrote {} maps to {}", export.maps.len(), path.display()))?;
                }
                None => say(out, json)?,
            }
        }
        Command::Gradcheck => {
            let cfg = match &g.config {
                Some(_) => resolve_config(g)?,
                None => Config {
                    seed: g.seed.unwrap_or(Config::tiny().seed),
                    ..Config::tiny()
                },
            };
            let report = gradcheck_command(&cfg)?;
            say(out, serde_json::to_string_pretty(&report)?)?;
            if let Some(w) = report.worst() {
                say(
                    out,
                    format!(
                        "{}: worst parameter {} (max relative error {:.3e}, tol {:.1e})",
                        if report.passed { "PASS" } else { "FAIL" },
                        w.name,
                        w.max_rel_error,
                        report.tol
                    ),
                )?;
            }
            if !report.passed {
                return Ok(EXIT_VALIDATION);
            }
        }
    }
    Ok(EXIT_OK)
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `--config` (or the defaults) with `--seed` and `--out` applied.
pub fn resolve_config(g: &GlobalArgs) -> Result<Config> {
    let mut cfg = match &g.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split_arg(g: &GlobalArgs) -> Result<Split> {
    g.split.as_deref().unwrap_or("val").parse()
}

/// Loads `--checkpoint`. The run's config is the one stored in the checkpoint
/// unless `--config` or `--seed` is given, in which case they must agree.
fn checkpoint_and_config(g: &GlobalArgs) -> Result<(Config, Checkpoint)> {
    let path = g
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --checkpoint".into()))?;
    let ckpt = Checkpoint::load(path)?;
    let cfg = if g.config.is_some() || g.seed.is_some() {
        let cfg = resolve_config(g)?;
        ckpt.check_config(&cfg)?;
        cfg
    } else {
        ckpt.manifest.config.clone()
    };
    Ok((cfg, ckpt))
}

/// The dataset described by `cfg`: read from `data_dir`, or generated.
pub fn load_dataset(cfg: &Config) -> Result<Dataset> {
    let data = match &cfg.data_dir {
        Some(dir) => task::read_dataset(dir)?,
        None => task::generate_dataset_on_grid(cfg.grid, cfg.n_train, cfg.n_val, cfg.data_seed())?,
    };
    if let Some(e) = data.train.iter().chain(&data.val).find(|e| e.scene.grid != cfg.grid) {
        return Err(Error::Config(format!(
            "scene {} has grid {}, config expects {}",
            e.scene.id, e.scene.grid, cfg.grid
        )));
    }
    Ok(data)
}

fn pick_scene(cfg: &Config, g: &GlobalArgs, s: &SceneArgs) -> Result<Example> {
    if let Some(seed) = s.scene_seed {
        let scene = task::generate_scene(0, seed, cfg.grid);
        return Ok(Example::new(scene, &task::vocabulary()));
    }
    let data = load_dataset(cfg)?;
    match s.scene {
        Some(id) => data.find(id).cloned(),
        None => data.split(split_arg(g)?).first().cloned().ok_or(Error::Empty),
    }
}

/// What a training command did.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub phase: Phase,
    pub logs: Vec<EpochLog>,
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val_cider: f64,
    pub out_dir: PathBuf,
}

impl TrainSummary {
    fn describe(&self) -> String {
        let phase = match self.phase {
            Phase::Xe => "xe",
            Phase::Rl => "rl",
        };
        format!(
            "{phase}: {} epochs done, best val CIDEr {:.4} at epoch {}, outputs in {}",
            self.epoch,
            self.best_val_cider,
            self.best_epoch,
            self.out_dir.display()
        )
    }
}

pub fn log_path(out_dir: &Path, phase: Phase) -> PathBuf {
    out_dir.join(match phase {
        Phase::Xe => "xe_log.jsonl",
        Phase::Rl => "rl_log.jsonl",
    })
}

pub fn best_path(out_dir: &Path, phase: Phase) -> PathBuf {
    out_dir.join(match phase {
        Phase::Xe => "xe_best.ckpt",
        Phase::Rl => "rl_best.ckpt",
    })
}

pub fn last_path(out_dir: &Path, phase: Phase) -> PathBuf {
    out_dir.join(match phase {
        Phase::Xe => "xe_last.ckpt",
        Phase::Rl => "rl_last.ckpt",
    })
}

/// Prepares `out_dir` and the phase log. A fresh run truncates the log; a
/// resumed run keeps the records up to the resumed epoch.
fn prepare_outputs(cfg: &Config, phase: Phase, resumed_epoch: usize) -> Result<PathBuf> {
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.toml"), &cfg.to_toml_string()?)?;
    let log = log_path(dir, phase);
    let kept = if resumed_epoch > 0 && log.exists() {
        read_jsonl(&log)?
            .into_iter()
            .filter(|r| r.epoch <= resumed_epoch)
            .collect()
    } else {
        Vec::new()
    };
    std::fs::write(&log, "").map_err(|e| Error::io(&log, e))?;
    for r in &kept {
        append_jsonl(&log, r)?;
    }
    Ok(log)
}

fn run_phase(
    cfg: &Config,
    phase: Phase,
    mut state: TrainState,
    data: &Dataset,
    out: &mut dyn Write,
) -> Result<TrainSummary> {
    let log = prepare_outputs(cfg, phase, state.epoch)?;
    let dir = cfg.out_dir.clone();
    let epochs = match phase {
        Phase::Xe => cfg.xe_epochs,
        Phase::Rl => cfg.rl_epochs,
    };
    let on_epoch = |rec: &EpochLog, st: &TrainState| -> Result<()> {
        append_jsonl(&log, rec)?;
        Checkpoint::from_state(cfg, phase, st).save(&last_path(&dir, phase))?;
        if st.best_epoch == rec.epoch {
            if let Some(best) = Checkpoint::best_of(cfg, phase, st) {
                best.save(&best_path(&dir, phase))?;
            }
        }
        say(
            out,
            format!(
                "{} epoch {}/{}: val CIDEr {:.4}, BLEU-4 {:.4}",
                if phase == Phase::Xe { "xe" } else { "rl" },
                rec.epoch,
                epochs,
                rec.val_cider,
                rec.val_bleu4
            ),
        )
    };
    let logs = match phase {
        Phase::Xe => train_xe(&mut state, data, &cfg.xe_config(), on_epoch)?,
        Phase::Rl => train_rl(&mut state, data, &cfg.rl_config()?, on_epoch)?,
    };
    Ok(TrainSummary {
        phase,
        logs,
        epoch: state.epoch,
        best_epoch: state.best_epoch,
        best_val_cider: state.best_val_cider,
        out_dir: dir,
    })
}

/// XE training from scratch, or resumed from an XE checkpoint with optimizer state.
pub fn train_xe_command(cfg: &Config, resume: Option<&Path>, out: &mut dyn Write) -> Result<TrainSummary> {
    let data = load_dataset(cfg)?;
    let state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.check_config(cfg)?;
            if ckpt.manifest.phase != Phase::Xe {
                return Err(Error::Checkpoint("train-xe can only resume an XE checkpoint".into()));
            }
            ckpt.into_state()?
        }
        None => TrainState::new(ModelParams::init(cfg.dims(), cfg.init_seed())?),
    };
    run_phase(cfg, Phase::Xe, state, &data, out)
}

/// RL training starting from an XE checkpoint's parameters, or resuming an RL checkpoint.
pub fn train_rl_command(cfg: &Config, checkpoint: &Path, out: &mut dyn Write) -> Result<TrainSummary> {
    let data = load_dataset(cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_config(cfg)?;
    let state = match ckpt.manifest.phase {
        Phase::Xe => TrainState::new(ckpt.params),
        Phase::Rl => ckpt.into_state()?,
    };
    run_phase(cfg, Phase::Rl, state, &data, out)
}

pub fn eval_command(
    cfg: &Config,
    params: &ModelParams,
    data: &Dataset,
    split: Split,
    beam: Option<usize>,
) -> Result<EvalReport> {
    evaluate(params, data.split(split), &data.corpus, beam, &split.to_string(), &cfg.hash())
}

/// Per-stage greedy captions of one scene, plus an optional beam caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub scene_id: u64,
    pub stages: Vec<Vec<usize>>,
    pub beam: Option<(usize, Vec<usize>)>,
}

impl Decoded {
    pub fn lines(&self, vocab: &crate::vocab::Vocabulary) -> Result<Vec<String>> {
        let last = self.stages.len() - 1;
        let mut lines = vec![format!("scene {}", self.scene_id)];
        for (i, words) in self.stages.iter().enumerate() {
            let tag = match i {
                0 => " (coarse)",
                i if i == last => " (final)",
                _ => "",
            };
            lines.push(format!("stage {i}{tag}: {}", vocab.decode(words)));
        }
        if let Some((k, words)) = &self.beam {
            lines.push(format!("beam {k}: {}", vocab.decode(words)));
        }
        Ok(lines)
    }
}

pub fn decode_command(params: &ModelParams, example: &Example, beam: Option<usize>) -> Result<Decoded> {
    let rollouts = rollout_greedy(params, &example.features)?;
    let beam = match beam {
        Some(k) => Some((k, beam_search(params, &example.features, k)?.words().to_vec())),
        None => None,
    };
    Ok(Decoded {
        scene_id: example.scene.id,
        stages: rollouts.iter().map(|r| r.words().to_vec()).collect(),
        beam,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionRecord {
    /// Fine stage index, `1..=N_f`.
    pub stage: usize,
    /// 0-based decoding step.
    pub t: usize,
    /// Token emitted at this step.
    pub token: String,
    /// `alpha[row][col]`, summing to 1.
    pub alpha: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionExport {
    pub scene_id: u64,
    pub grid: usize,
    pub config_hash: String,
    pub maps: Vec<AttentionRecord>,
}

/// Greedy-decodes `example` and collects every fine-stage attention map.
pub fn export_attention(params: &ModelParams, example: &Example, config_hash: &str) -> Result<AttentionExport> {
    if params.dims.fine_stages == 0 {
        return Err(Error::Config("a coarse-only model has no attention maps".into()));
    }
    let vocab = task::vocabulary();
    let k = params.dims.grid;
    let rollouts = rollout_greedy(params, &example.features)?;
    let mut maps = Vec::new();
    for (stage, r) in rollouts.iter().enumerate().skip(1) {
        for (t, (&tok, a)) in r.tokens.iter().zip(&r.attention).enumerate() {
            maps.push(AttentionRecord {
                stage,
                t,
                token: vocab.token(tok)?.to_string(),
                alpha: a.grid(k),
            });
        }
    }
    Ok(AttentionExport {
        scene_id: example.scene.id,
        grid: k,
        config_hash: config_hash.to_string(),
        maps,
    })
}

/// Gradient check of the XE loss over the full model built from `cfg`, on
/// the first training scene with its shortest reference.
pub fn gradcheck_command(cfg: &Config) -> Result<GradCheckReport> {
    cfg.validate()?;
    let params = ModelParams::init(cfg.dims(), cfg.init_seed())?;
    let scene = task::generate_scene(0, cfg.data_seed(), cfg.grid);
    let example = Example::new(scene, &task::vocabulary());
    let gold = example.gold(0);
    if gold.len() > cfg.max_len {
        return Err(Error::Config(format!(
            "max_len {} is shorter than the {}-token check caption",
            cfg.max_len,
            gold.len()
        )));
    }
    xe_grad_check(&params, &[(&example.features, gold)], cfg.gradcheck_step, cfg.gradcheck_tol)
}
