//! Forgetful causal mask plans: which past tokens a sequence may not see.
//!
//! A plan is drawn once per sequence per step and shared by every target
//! position, so it can be materialized as a single additive attention bias on
//! top of the causal mask. Position 0 (BOS) is never masked; that guarantees
//! every query row keeps at least one visible key.

use crate::tensor::MASK_SENTINEL;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid mask ratio bounds: low {low}, high {high} (need 0 <= low <= high <= 1)")]
    BadBounds { low: f32, high: f32 },
    #[error("malformed mask plan line: {0}")]
    BadDebugLine(String),
}

/// How a hidden token is materialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskVariant {
    /// Hide the token's key/value column behind the attention bias.
    Attention,
    /// Replace the token embedding with the `[mask]` token; attention stays
    /// purely causal and loss targets keep the original ids.
    Token,
    /// No masking: plain causal language modeling.
    None,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskConfig {
    pub ratio_low: f32,
    pub ratio_high: f32,
    pub variant: MaskVariant,
    /// Only used for `MaskVariant::Token`.
    pub mask_token_id: u32,
}

impl MaskConfig {
    /// The headline setting: ratio drawn from [0, 0.15], attention variant.
    pub fn fcm_default() -> Self {
        MaskConfig {
            ratio_low: 0.0,
            ratio_high: 0.15,
            variant: MaskVariant::Attention,
            mask_token_id: crate::data::MASK,
        }
    }

    pub fn disabled() -> Self {
        MaskConfig { ratio_low: 0.0, ratio_high: 0.0, variant: MaskVariant::None, mask_token_id: crate::data::MASK }
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        let ok = (0.0..=1.0).contains(&self.ratio_low)
            && (0.0..=1.0).contains(&self.ratio_high)
            && self.ratio_low <= self.ratio_high;
        if ok {
            Ok(())
        } else {
            Err(MaskError::BadBounds { low: self.ratio_low, high: self.ratio_high })
        }
    }
}

/// Per-sequence record of hidden positions. `keep[j]` is true when position j
/// stays visible; `keep[0]` is always true.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub keep: Vec<bool>,
    pub sampled_ratio: f32,
    pub variant: MaskVariant,
}

impl MaskPlan {
    pub fn keep_all(seq_len: usize, variant: MaskVariant) -> Self {
        MaskPlan { keep: vec![true; seq_len], sampled_ratio: 0.0, variant }
    }

    pub fn masked_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// One-line debug form: ratio then the keep bitstring ('1' = visible).
    pub fn debug_line(&self) -> String {
        let bits: String = self.keep.iter().map(|&k| if k { '1' } else { '0' }).collect();
        format!("{:.6} {}", self.sampled_ratio, bits)
    }

    pub fn from_debug_line(line: &str, variant: MaskVariant) -> Result<Self, MaskError> {
        let mut parts = line.split_whitespace();
        let ratio: f32 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MaskError::BadDebugLine(line.to_string()))?;
        let bits = parts.next().ok_or_else(|| MaskError::BadDebugLine(line.to_string()))?;
        let keep: Vec<bool> = bits
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(MaskError::BadDebugLine(line.to_string())),
            })
            .collect::<Result<_, _>>()?;
        if keep.first() != Some(&true) || parts.next().is_some() {
            return Err(MaskError::BadDebugLine(line.to_string()));
        }
        Ok(MaskPlan { keep, sampled_ratio: ratio, variant })
    }
}

/// Draw one plan for a sequence: ratio r ~ U(low, high), then each position
/// j >= 1 is hidden independently with probability r. Position 0 draws nothing.
pub fn sample_mask_plan(
    seq_len: usize,
    cfg: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<MaskPlan, MaskError> {
    cfg.validate()?;
    assert!(seq_len >= 1, "sequences start with BOS");
    let r = cfg.ratio_low + (cfg.ratio_high - cfg.ratio_low) * rng.gen::<f32>();
    let mut keep = Vec::with_capacity(seq_len);
    keep.push(true);
    for _ in 1..seq_len {
        keep.push(rng.gen::<f32>() >= r);
    }
    Ok(MaskPlan { keep, sampled_ratio: r, variant: cfg.variant })
}

/// Additive attention bias [seq_len, seq_len], row-major over (query, key):
/// 0 where the key is causally reachable and visible, sentinel otherwise. A
/// hidden key column is invisible to every query, its own included.
pub fn build_attention_bias(plan: &MaskPlan) -> Vec<f32> {
    let s = plan.keep.len();
    let mut bias = vec![MASK_SENTINEL; s * s];
    for q in 0..s {
        for k in 0..=q {
            if plan.keep[k] {
                bias[q * s + k] = 0.0;
            }
        }
    }
    bias
}

/// Plain causal bias: every key at or before the query is visible.
pub fn causal_bias(seq_len: usize) -> Vec<f32> {
    build_attention_bias(&MaskPlan::keep_all(seq_len, MaskVariant::None))
}

/// Token-variant materialization: swap hidden ids for the mask token. The
/// caller keeps the original ids for loss targets.
pub fn apply_token_mask(ids: &[u32], plan: &MaskPlan, mask_token_id: u32) -> Vec<u32> {
    ids.iter()
        .zip(&plan.keep)
        .map(|(&id, &k)| if k { id } else { mask_token_id })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, STREAM_MASK};

    fn cfg(low: f32, high: f32) -> MaskConfig {
        MaskConfig { ratio_low: low, ratio_high: high, variant: MaskVariant::Attention, mask_token_id: 258 }
    }

    #[test]
    fn zero_range_keeps_everything() {
        for seed in 0..20 {
            let mut r = stream_rng(seed, STREAM_MASK, 0);
            let plan = sample_mask_plan(8, &cfg(0.0, 0.0), &mut r).unwrap();
            assert!(plan.keep.iter().all(|&k| k));
            assert_eq!(plan.sampled_ratio, 0.0);
        }
    }

    #[test]
    fn full_range_masks_all_but_bos() {
        for seed in 0..20 {
            let mut r = stream_rng(seed, STREAM_MASK, 0);
            let plan = sample_mask_plan(8, &cfg(1.0, 1.0), &mut r).unwrap();
            assert!(plan.keep[0]);
            assert!(plan.keep[1..].iter().all(|&k| !k));
        }
    }

    #[test]
    fn mean_mask_rate_matches_range_midpoint() {
        // E[rate] = (0 + 0.15) / 2 = 0.075 over non-BOS positions.
        let c = cfg(0.0, 0.15);
        let mut masked = 0usize;
        let mut total = 0usize;
        for i in 0..2000u64 {
            let mut r = stream_rng(42, STREAM_MASK, i);
            let plan = sample_mask_plan(51, &c, &mut r).unwrap();
            masked += plan.masked_count();
            total += 50;
        }
        let rate = masked as f64 / total as f64;
        assert!((rate - 0.075).abs() < 0.005, "rate {rate}");
    }

    #[test]
    fn degenerate_range_is_bernoulli() {
        for &c in &[0.1f32, 0.15, 0.3] {
            let mc = cfg(c, c);
            let mut masked = 0usize;
            let mut total = 0usize;
            for i in 0..2000u64 {
                let mut r = stream_rng(9, STREAM_MASK, i);
                let plan = sample_mask_plan(51, &mc, &mut r).unwrap();
                assert!((plan.sampled_ratio - c).abs() < 1e-6);
                masked += plan.masked_count();
                total += 50;
            }
            let rate = masked as f64 / total as f64;
            assert!((rate - c as f64).abs() < 0.01, "c={c} rate={rate}");
        }
    }

    #[test]
    fn bos_never_masked_and_ratio_contained() {
        let c = cfg(0.2, 0.9);
        for i in 0..10_000u64 {
            let mut r = stream_rng(5, STREAM_MASK, i);
            let plan = sample_mask_plan(6, &c, &mut r).unwrap();
            assert!(plan.keep[0]);
            assert!(plan.sampled_ratio >= 0.2 && plan.sampled_ratio <= 0.9);
        }
    }

    #[test]
    fn same_seed_same_plan() {
        let c = cfg(0.0, 0.5);
        let p1 = sample_mask_plan(32, &c, &mut stream_rng(1, STREAM_MASK, 7)).unwrap();
        let p2 = sample_mask_plan(32, &c, &mut stream_rng(1, STREAM_MASK, 7)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn invalid_bounds_rejected() {
        let mut r = stream_rng(0, STREAM_MASK, 0);
        assert!(sample_mask_plan(4, &cfg(0.5, 0.2), &mut r).is_err());
        assert!(sample_mask_plan(4, &cfg(-0.1, 0.2), &mut r).is_err());
        assert!(sample_mask_plan(4, &cfg(0.5, 1.2), &mut r).is_err());
    }

    #[test]
    fn bias_masked_column_invisible_to_all() {
        // seq_len 4, position 2 hidden: allowed key sets per query row.
        let plan = MaskPlan {
            keep: vec![true, true, false, true],
            sampled_ratio: 0.25,
            variant: MaskVariant::Attention,
        };
        let bias = build_attention_bias(&plan);
        let allowed: Vec<Vec<usize>> = (0..4)
            .map(|q| (0..4).filter(|&k| bias[q * 4 + k] == 0.0).collect())
            .collect();
        assert_eq!(allowed, vec![vec![0], vec![0, 1], vec![0, 1], vec![0, 1, 3]]);
    }

    #[test]
    fn bias_without_masking_is_causal() {
        let plan = MaskPlan::keep_all(5, MaskVariant::Attention);
        let bias = build_attention_bias(&plan);
        for q in 0..5 {
            for k in 0..5 {
                let want = if k <= q { 0.0 } else { MASK_SENTINEL };
                assert_eq!(bias[q * 5 + k], want);
            }
        }
        assert_eq!(bias, causal_bias(5));
    }

    #[test]
    fn bias_all_masked_leaves_only_bos() {
        let plan = MaskPlan {
            keep: vec![true, false, false, false],
            sampled_ratio: 1.0,
            variant: MaskVariant::Attention,
        };
        let bias = build_attention_bias(&plan);
        for q in 0..4 {
            for k in 0..4 {
                let want = if k == 0 { 0.0 } else { MASK_SENTINEL };
                assert_eq!(bias[q * 4 + k], want);
            }
        }
    }

    #[test]
    fn bias_never_violates_causality() {
        for seed in 0..200u64 {
            let mut r = stream_rng(seed, STREAM_MASK, 0);
            let plan = sample_mask_plan(17, &cfg(0.0, 1.0), &mut r).unwrap();
            let bias = build_attention_bias(&plan);
            for q in 0..17 {
                for k in 0..17 {
                    if bias[q * 17 + k] == 0.0 {
                        assert!(k <= q, "acausal visible key {k} for query {q}");
                    }
                }
                assert!((0..17).any(|k| bias[q * 17 + k] == 0.0), "empty row {q}");
            }
        }
    }

    #[test]
    fn token_mask_substitutes_hidden_ids() {
        let plan = MaskPlan {
            keep: vec![true, true, false, true],
            sampled_ratio: 0.25,
            variant: MaskVariant::Token,
        };
        let ids = [256, 5, 7, 9];
        assert_eq!(apply_token_mask(&ids, &plan, 99), vec![256, 5, 99, 9]);

        let keep_all = MaskPlan::keep_all(4, MaskVariant::Token);
        assert_eq!(apply_token_mask(&ids, &keep_all, 99), ids.to_vec());
    }

    #[test]
    fn debug_line_round_trip() {
        let plan = MaskPlan {
            keep: vec![true, false, true, true, false],
            sampled_ratio: 0.073_5,
            variant: MaskVariant::Attention,
        };
        let line = plan.debug_line();
        assert_eq!(line, "0.073500 10110");
        let back = MaskPlan::from_debug_line(&line, MaskVariant::Attention).unwrap();
        assert_eq!(back.keep, plan.keep);
        assert!((back.sampled_ratio - plan.sampled_ratio).abs() < 1e-6);
        assert!(MaskPlan::from_debug_line("0.5 10x1", MaskVariant::None).is_err());
        assert!(MaskPlan::from_debug_line("nope", MaskVariant::None).is_err());
        // A masked BOS bit violates the plan invariant.
        assert!(MaskPlan::from_debug_line("0.5 0111", MaskVariant::None).is_err());
    }
}
