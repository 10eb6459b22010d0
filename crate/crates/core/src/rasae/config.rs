use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorStrategy {
    Random,
    Kmeans,
}

/// Hyperparameters of a top-k (archetypal) sparse autoencoder.
///
/// `anchors == 0` trains a free dictionary; otherwise every atom is a convex
/// combination of `anchors` rows fitted from the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    pub input_dim: usize,
    pub n_concepts: usize,
    pub top_k: usize,
    pub anchors: usize,
    pub anchor_strategy: AnchorStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_final: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub aux_lambda: f64,
    pub aux_k: usize,
    pub dead_steps_threshold: usize,
    pub seed: u64,
    pub relaxation_bound: f64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            n_concepts: 0,
            top_k: 5,
            anchors: 0,
            anchor_strategy: AnchorStrategy::Kmeans,
            epochs: 10,
            batch_size: 256,
            lr_max: 5e-3,
            lr_final: 1e-5,
            warmup_frac: 0.05,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            aux_lambda: 1e-5,
            aux_k: 32,
            dead_steps_threshold: 256,
            seed: 0,
            relaxation_bound: 0.0,
        }
    }
}

impl SaeConfig {
    /// Desk-scale archetypal configuration with `4 * n_concepts` anchors.
    pub fn archetypal(input_dim: usize, n_concepts: usize, top_k: usize) -> Self {
        Self {
            input_dim,
            n_concepts,
            top_k,
            anchors: 4 * n_concepts,
            ..Self::default()
        }
    }

    /// Desk-scale configuration with an unconstrained dictionary.
    pub fn free(input_dim: usize, n_concepts: usize, top_k: usize) -> Self {
        Self {
            input_dim,
            n_concepts,
            top_k,
            anchors: 0,
            ..Self::default()
        }
    }

    /// The published large-scale recipe: 32,000 concepts, k = 5, 50 epochs,
    /// AdamW(0.9, 0.999, wd 1e-5), 5% warmup, cosine 5e-4 -> 1e-6, aux 1e-5.
    pub fn published_recipe(input_dim: usize) -> Self {
        Self {
            input_dim,
            n_concepts: 32_000,
            top_k: 5,
            anchors: 4 * 32_000,
            epochs: 50,
            lr_max: 5e-4,
            lr_final: 1e-6,
            warmup_frac: 0.05,
            weight_decay: 1e-5,
            aux_lambda: 1e-5,
            ..Self::default()
        }
    }

    pub fn is_archetypal(&self) -> bool {
        self.anchors > 0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.input_dim == 0 {
            return fail("input_dim must be at least 1".into());
        }
        if self.n_concepts == 0 {
            return fail("n_concepts must be at least 1".into());
        }
        if self.top_k == 0 || self.top_k > self.n_concepts {
            return fail(format!(
                "top_k must lie in 1..={}, got {}",
                self.n_concepts, self.top_k
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return fail(format!("warmup_frac {} outside [0, 1]", self.warmup_frac));
        }
        if !(self.lr_final <= self.lr_max) || self.lr_max < 0.0 {
            return fail(format!(
                "need 0 <= lr_final <= lr_max, got {} and {}",
                self.lr_final, self.lr_max
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if self.relaxation_bound < 0.0 || !self.relaxation_bound.is_finite() {
            return fail("relaxation_bound must be finite and non-negative".into());
        }
        if self.is_archetypal() && self.anchors < self.n_concepts {
            log::warn!(
                "only {} anchors for {} concepts; archetypal atoms will be strongly coupled",
                self.anchors,
                self.n_concepts
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_recipe_constants() {
        let c = SaeConfig::published_recipe(768);
        assert_eq!((c.n_concepts, c.top_k, c.epochs), (32_000, 5, 50));
        assert_eq!((c.lr_max, c.lr_final), (5e-4, 1e-6));
        assert_eq!((c.beta1, c.beta2, c.weight_decay), (0.9, 0.999, 1e-5));
        assert_eq!((c.warmup_frac, c.aux_lambda), (0.05, 1e-5));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let base = SaeConfig::free(4, 8, 2);
        base.validate().unwrap();
        for bad in [
            SaeConfig { top_k: 0, ..base.clone() },
            SaeConfig { top_k: 9, ..base.clone() },
            SaeConfig { lr_final: 1.0, ..base.clone() },
            SaeConfig { warmup_frac: 1.5, ..base.clone() },
            SaeConfig { input_dim: 0, ..base.clone() },
            SaeConfig { relaxation_bound: -1.0, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Validation(_))), "{bad:?}");
        }
    }

    #[test]
    fn json_fills_defaults() {
        let c: SaeConfig =
            serde_json::from_str(r#"{"input_dim": 16, "n_concepts": 32, "top_k": 3}"#).unwrap();
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.aux_k, 32);
        assert!(!c.is_archetypal());
    }
}
