//! Desk-scale ablation grid: pre-train the masking variants on the synthetic
//! arithmetic benchmark across several training seeds, then score the held-out
//! multiple-choice tasks few-shot. Accuracies are reported, not asserted;
//! orderings at this scale are directional only.

use crate::checkpoint::OptKind;
use crate::data::{synth_corpus, SynthKind, MASK};
use crate::eval::{eval_multiple_choice, NormMode};
use crate::masking::{MaskConfig, MaskVariant};
use crate::model::ModelConfig;
use crate::rng::{stream_rng, STREAM_SYNTH};
use crate::train::{run_training, Mode, RunConfig, TrainError};
use crate::optimizer::LrSetting;

#[derive(Debug, Clone)]
pub struct AblationProfile {
    pub model: ModelConfig,
    pub total_steps: u64,
    pub batch_size: usize,
    pub n_docs: usize,
    pub n_eval_instances: usize,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
    pub k: usize,
}

impl AblationProfile {
    /// Fits in minutes on a laptop: five training seeds per variant, three
    /// evaluation seeds, 2-shot scoring.
    pub fn desk() -> Self {
        AblationProfile {
            model: ModelConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 64,
                d_head: 32,
                vocab_size: crate::data::VOCAB_SIZE,
                seq_len: 64,
                d_ff: 256,
                dropout_rate: 0.0,
            },
            total_steps: 200,
            batch_size: 8,
            n_docs: 1024,
            n_eval_instances: 48,
            train_seeds: vec![1, 2, 3, 4, 5],
            eval_seeds: vec![11, 12, 13],
            k: 2,
        }
    }
}

/// The masking-variant comparison grid.
fn variants() -> Vec<(&'static str, MaskConfig, f32)> {
    let attn = |low, high| MaskConfig {
        ratio_low: low,
        ratio_high: high,
        variant: MaskVariant::Attention,
        mask_token_id: MASK,
    };
    vec![
        ("baseline", MaskConfig::disabled(), 0.0),
        ("fcm[0,0.15]", attn(0.0, 0.15), 0.0),
        ("fcm[0.15,0.15]", attn(0.15, 0.15), 0.0),
        (
            "mask_token[0,0.15]",
            MaskConfig {
                ratio_low: 0.0,
                ratio_high: 0.15,
                variant: MaskVariant::Token,
                mask_token_id: MASK,
            },
            0.0,
        ),
        ("baseline+dropout0.1", MaskConfig::disabled(), 0.1),
    ]
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub k: usize,
    pub n_instances: usize,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> &AblationRow {
        self.rows.iter().find(|r| r.name == name).expect("known variant name")
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<22}{:>8}{:>8}   per-seed accuracy ({}-shot, {} instances)\n",
            "variant", "mean", "std", self.k, self.n_instances
        );
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{v:.3}")).collect();
            out.push_str(&format!(
                "{:<22}{:>8.3}{:>8.3}   [{}]\n",
                r.name,
                r.mean,
                r.std,
                seeds.join(", ")
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,accuracy\n");
        for r in &self.rows {
            for (i, v) in r.per_seed.iter().enumerate() {
                out.push_str(&format!("{},{},{:.6}\n", r.name, i, v));
            }
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run the full grid. Deterministic: corpora derive from the training seed
/// alone, so every variant sees identical data at a given seed.
pub fn run_ablation(profile: &AblationProfile) -> Result<AblationTable, TrainError> {
    let mut rows = Vec::new();
    for (name, mask, dropout) in variants() {
        let mut per_seed = Vec::with_capacity(profile.train_seeds.len());
        for &seed in &profile.train_seeds {
            let mut synth_rng = stream_rng(seed, STREAM_SYNTH, 0);
            let data = synth_corpus(SynthKind::Arithmetic, profile.n_docs, &mut synth_rng);
            let cfg = RunConfig {
                model: profile.model.clone(),
                mask,
                optimizer: OptKind::Adafactor,
                lr: LrSetting::RsqrtDecay,
                total_steps: profile.total_steps,
                batch_size: profile.batch_size,
                seed,
                dropout,
                mode: Mode::Pretrain,
                ckpt_dir: None,
                ckpt_interval: 0,
                metrics_path: None,
                finetune_with_fcm: false,
            };
            let out = run_training(&cfg, &data.docs, None)?;
            let tasks: Vec<_> =
                data.mc_tasks.into_iter().take(profile.n_eval_instances).collect();
            let report = eval_multiple_choice(
                &out.params,
                &profile.model,
                "arithmetic",
                &tasks,
                profile.k,
                &profile.eval_seeds,
                NormMode::None,
            )?;
            per_seed.push(report.value);
        }
        let (mean, std) = mean_std(&per_seed);
        rows.push(AblationRow { name, per_seed, mean, std });
    }
    Ok(AblationTable { rows, k: profile.k, n_instances: profile.n_eval_instances })
}
