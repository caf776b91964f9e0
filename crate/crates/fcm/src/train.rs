//! Training and finetuning loops with checkpointing and CSV metric logging.
//!
//! The numeric path is single-threaded and every random draw comes from a
//! stream keyed by (seed, stream, step/epoch), so a run is fully determined by
//! (seed, config, corpus) and resuming from a checkpoint reproduces the
//! uninterrupted trajectory exactly.

use crate::checkpoint::{load_checkpoint, save_checkpoint, CkptError, OptKind};
use crate::data::{pack_corpus, Batch, DataError, PackedSequence};
use crate::eval::{eval_multiple_choice, EvalError, EvalReport, NormMode, Task};
use crate::masking::{MaskConfig, MaskError, MaskVariant};
use crate::model::{
    fcm_loss, init_params, param_shapes, stage_params, Dropout, ModelConfig, ModelError, Params,
};
use crate::optimizer::{
    adafactor_update, clip_global_norm, sgd_momentum_update, LrSetting, OptError, OptState,
    GRAD_CLIP_NORM,
};
use crate::rng::{stream_rng, STREAM_DATA, STREAM_DROPOUT, STREAM_INIT, STREAM_MASK};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus packs into {seqs} sequences, fewer than one batch of {batch_size}")]
    NotEnoughData { seqs: usize, batch_size: usize },
    #[error("non-finite loss at step {step}{}", dump.as_ref().map(|p| format!("; offending batch dumped to {}", p.display())).unwrap_or_default())]
    NonFiniteLoss { step: u64, dump: Option<PathBuf> },
    #[error("checkpoint model config does not match run config")]
    ConfigMismatch,
    #[error("invalid run config: {0}")]
    BadRunConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub optimizer: OptKind,
    pub lr: LrSetting,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout: f32,
    pub mode: Mode,
    #[serde(default)]
    pub ckpt_dir: Option<PathBuf>,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub ckpt_interval: u64,
    #[serde(default)]
    pub metrics_path: Option<PathBuf>,
    /// Keep forgetful masking active during finetuning (off by default; the
    /// standard finetuning objective is plain causal).
    #[serde(default)]
    pub finetune_with_fcm: bool,
}

impl RunConfig {
    /// Desk-scale pre-training defaults: the test-sized model with the
    /// full-scale optimizer settings. Pre-training runs without dropout unless
    /// a dropout ablation asks for it explicitly.
    pub fn desk_pretrain(seed: u64) -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            mask: MaskConfig::fcm_default(),
            optimizer: OptKind::Adafactor,
            lr: LrSetting::RsqrtDecay,
            total_steps: 500,
            batch_size: 8,
            seed,
            dropout: 0.0,
            mode: Mode::Pretrain,
            ckpt_dir: None,
            ckpt_interval: 0,
            metrics_path: None,
            finetune_with_fcm: false,
        }
    }

    /// Desk-scale finetuning defaults: dropout 0.1, constant lr 5e-5,
    /// Adafactor, no forgetful masking.
    pub fn desk_finetune(seed: u64) -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            mask: MaskConfig::disabled(),
            optimizer: OptKind::Adafactor,
            lr: LrSetting::Constant(5e-5),
            total_steps: 200,
            batch_size: 8,
            seed,
            dropout: 0.1,
            mode: Mode::Finetune,
            ckpt_dir: None,
            ckpt_interval: 0,
            metrics_path: None,
            finetune_with_fcm: false,
        }
    }

    /// The full-scale pre-training profile (128M model, batch 1024, sequence
    /// 1024, 180B tokens), kept as configuration truth rather than something
    /// to run on a laptop.
    pub fn full_scale_pretrain() -> Self {
        let model = ModelConfig::palm_128m();
        let tokens_per_step = (1024 * 1024) as u64;
        RunConfig {
            model,
            mask: MaskConfig::fcm_default(),
            optimizer: OptKind::Adafactor,
            lr: LrSetting::RsqrtDecay,
            total_steps: 180_000_000_000 / tokens_per_step,
            batch_size: 1024,
            seed: 0,
            dropout: 0.0,
            mode: Mode::Pretrain,
            ckpt_dir: None,
            ckpt_interval: 0,
            metrics_path: None,
            finetune_with_fcm: false,
        }
    }

    /// The full-scale finetuning profile: batch 512, 20K steps, dropout 0.1.
    pub fn full_scale_finetune() -> Self {
        let mut cfg = Self::full_scale_pretrain();
        cfg.mask = MaskConfig::disabled();
        cfg.lr = LrSetting::Constant(5e-5);
        cfg.total_steps = 20_000;
        cfg.batch_size = 512;
        cfg.dropout = 0.1;
        cfg.mode = Mode::Finetune;
        cfg
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.mask.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::BadRunConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::BadRunConfig(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if self.mode == Mode::Finetune
            && !self.finetune_with_fcm
            && self.mask.variant != MaskVariant::None
        {
            return Err(TrainError::BadRunConfig(
                "finetuning disables forgetful masking; set finetune_with_fcm to override".into(),
            ));
        }
        Ok(())
    }

    fn effective_mask(&self) -> MaskConfig {
        if self.mode == Mode::Finetune && !self.finetune_with_fcm {
            MaskConfig::disabled()
        } else {
            self.mask
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f32,
    pub lr: f32,
    pub grad_norm: f32,
    pub tokens_per_sec: f64,
}

pub struct TrainOutcome {
    pub params: Params,
    pub opt_state: OptState,
    pub metrics: Vec<MetricsRow>,
    pub final_ckpt: Option<PathBuf>,
}

/// Deterministic random-access batch for a given step: epochs shuffle the
/// sequence order under their own stream index, steps walk the epoch.
fn batch_for_step(seqs: &[PackedSequence], batch_size: usize, seed: u64, step: u64) -> Batch {
    let per_epoch = (seqs.len() / batch_size) as u64;
    let epoch = (step - 1) / per_epoch;
    let slot = ((step - 1) % per_epoch) as usize;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut stream_rng(seed, STREAM_DATA, epoch));
    let rows: Vec<&PackedSequence> =
        order[slot * batch_size..(slot + 1) * batch_size].iter().map(|&i| &seqs[i]).collect();
    Batch::from_sequences(&rows)
}

struct MetricsWriter {
    file: Option<std::fs::File>,
}

impl MetricsWriter {
    fn open(path: Option<&Path>) -> Result<Self, TrainError> {
        let file = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                let new = !p.exists();
                let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
                if new {
                    writeln!(f, "step,loss,lr,grad_norm,tokens_per_sec")?;
                }
                Some(f)
            }
            None => None,
        };
        Ok(MetricsWriter { file })
    }

    fn append(&mut self, row: &MetricsRow) -> Result<(), TrainError> {
        if let Some(f) = &mut self.file {
            writeln!(
                f,
                "{},{:.6},{:.8},{:.6},{:.1}",
                row.step, row.loss, row.lr, row.grad_norm, row.tokens_per_sec
            )?;
        }
        Ok(())
    }
}

fn dump_batch(dir: Option<&Path>, step: u64, batch: &Batch) -> Option<PathBuf> {
    let dir = dir?;
    std::fs::create_dir_all(dir).ok()?;
    let path = dir.join(format!("nonfinite_batch_step{step}.txt"));
    let mut text = String::new();
    let s = batch.seq_len();
    for row in batch.ids.data.chunks_exact(s) {
        text.push_str(&row.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "));
        text.push('\n');
    }
    std::fs::write(&path, text).ok()?;
    Some(path)
}

fn ckpt_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:08}.fcmckpt"))
}

/// Run the training loop from `start_step` to `cfg.total_steps`, mutating
/// `params` and `opt_state` in place.
fn train_loop(
    cfg: &RunConfig,
    seqs: &[PackedSequence],
    params: &mut Params,
    opt_state: &mut OptState,
    start_step: u64,
) -> Result<(Vec<MetricsRow>, Option<PathBuf>), TrainError> {
    if seqs.len() < cfg.batch_size {
        return Err(TrainError::NotEnoughData { seqs: seqs.len(), batch_size: cfg.batch_size });
    }
    let shapes: Vec<Vec<usize>> = param_shapes(&cfg.model).into_iter().map(|(_, s)| s).collect();
    let mask_cfg = cfg.effective_mask();
    let mut writer = MetricsWriter::open(cfg.metrics_path.as_deref())?;
    let mut metrics = Vec::new();
    let mut final_ckpt = None;
    let tokens_per_step = (cfg.batch_size * cfg.model.seq_len) as f64;

    for step in start_step + 1..=cfg.total_steps {
        let t0 = Instant::now();
        let batch = batch_for_step(seqs, cfg.batch_size, cfg.seed, step);

        let mut tape = crate::tensor::Tape::new();
        let pn = stage_params(&mut tape, params, &cfg.model, true);
        let mut mask_rng = stream_rng(cfg.seed, STREAM_MASK, step);
        let mut dropout_rng = stream_rng(cfg.seed, STREAM_DROPOUT, step);
        let mut dropout = Dropout { rate: cfg.dropout, rng: &mut dropout_rng };
        let dropout_opt = (cfg.dropout > 0.0).then_some(&mut dropout);
        let out = fcm_loss(&mut tape, &pn, &cfg.model, &batch, &mask_cfg, &mut mask_rng, dropout_opt)?;

        let loss = tape.data(out.loss)[0];
        if !loss.is_finite() {
            let dump = dump_batch(cfg.ckpt_dir.as_deref(), step, &batch);
            return Err(TrainError::NonFiniteLoss { step, dump });
        }
        tape.backward(out.loss)?;

        let mut grads: Vec<Vec<f32>> = pn
            .ids()
            .iter()
            .map(|&id| tape.grad(id).expect("parameter reachable from loss").to_vec())
            .collect();
        let grad_norm = clip_global_norm(&mut grads, GRAD_CLIP_NORM)?;

        let lr = cfg.lr.lr_at(step)? as f32;
        debug_assert_eq!(opt_state.step, step - 1, "optimizer step counter tracks the loop");
        match cfg.optimizer {
            OptKind::Adafactor => {
                adafactor_update(opt_state, &mut params.tensors_mut(), &shapes, &grads, &cfg.lr)?
            }
            OptKind::SgdMomentum => {
                sgd_momentum_update(opt_state, &mut params.tensors_mut(), &grads, lr, 0.9)?
            }
        }

        let row = MetricsRow {
            step,
            loss,
            lr,
            grad_norm,
            tokens_per_sec: tokens_per_step / t0.elapsed().as_secs_f64().max(1e-9),
        };
        writer.append(&row)?;
        metrics.push(row);

        if let Some(dir) = &cfg.ckpt_dir {
            if cfg.ckpt_interval > 0 && step % cfg.ckpt_interval == 0 && step != cfg.total_steps {
                save_checkpoint(params, opt_state, &cfg.model, cfg.optimizer, step, &ckpt_path(dir, step))?;
            }
        }
    }

    if let Some(dir) = &cfg.ckpt_dir {
        let path = ckpt_path(dir, cfg.total_steps);
        save_checkpoint(params, opt_state, &cfg.model, cfg.optimizer, cfg.total_steps, &path)?;
        final_ckpt = Some(path);
    }
    Ok((metrics, final_ckpt))
}

/// Pre-train from scratch (or resume from a checkpoint) on a tokenized corpus.
pub fn run_training(
    cfg: &RunConfig,
    docs: &[Vec<u32>],
    resume: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let seqs = pack_corpus(docs, cfg.model.seq_len)?;
    let (mut params, mut opt_state, start_step) = match resume {
        Some(path) => {
            let (params, opt_state, ckpt_cfg, _kind, step) = load_checkpoint(path)?;
            if ckpt_cfg != cfg.model {
                return Err(TrainError::ConfigMismatch);
            }
            (params, opt_state, step)
        }
        None => {
            let params = init_params(&cfg.model, &mut stream_rng(cfg.seed, STREAM_INIT, 0))?;
            let shapes: Vec<Vec<usize>> =
                param_shapes(&cfg.model).into_iter().map(|(_, s)| s).collect();
            (params, OptState::init(&shapes), 0)
        }
    };
    let (metrics, final_ckpt) = train_loop(cfg, &seqs, &mut params, &mut opt_state, start_step)?;
    Ok(TrainOutcome { params, opt_state, metrics, final_ckpt })
}

pub struct FinetuneOutcome {
    pub params: Params,
    pub opt_state: OptState,
    pub metrics: Vec<MetricsRow>,
    pub final_ckpt: Option<PathBuf>,
    pub eval_reports: Vec<EvalReport>,
}

/// Finetune from a pre-trained checkpoint on task-formatted text, then
/// optionally evaluate. The optimizer state restarts; step counting and the
/// lr schedule begin at 1.
pub fn run_finetune(
    cfg: &RunConfig,
    init_checkpoint: &Path,
    docs: &[Vec<u32>],
    eval_tasks: Option<(&str, &[Task], usize, &[u64])>,
) -> Result<FinetuneOutcome, TrainError> {
    if cfg.mode != Mode::Finetune {
        return Err(TrainError::BadRunConfig("run_finetune requires finetune mode".into()));
    }
    cfg.validate()?;
    let (mut params, _, ckpt_cfg, _, _) = load_checkpoint(init_checkpoint)?;
    if ckpt_cfg != cfg.model {
        return Err(TrainError::ConfigMismatch);
    }
    let seqs = pack_corpus(docs, cfg.model.seq_len)?;
    let shapes: Vec<Vec<usize>> = param_shapes(&cfg.model).into_iter().map(|(_, s)| s).collect();
    let mut opt_state = OptState::init(&shapes);
    let (metrics, final_ckpt) = if cfg.total_steps == 0 {
        (Vec::new(), None)
    } else {
        train_loop(cfg, &seqs, &mut params, &mut opt_state, 0)?
    };

    let mut eval_reports = Vec::new();
    if let Some((name, tasks, k, seeds)) = eval_tasks {
        eval_reports.push(eval_multiple_choice(
            &params,
            &cfg.model,
            name,
            tasks,
            k,
            seeds,
            NormMode::None,
        )?);
    }
    Ok(FinetuneOutcome { params, opt_state, metrics, final_ckpt, eval_reports })
}
