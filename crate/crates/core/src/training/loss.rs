use crate::error::{config_err, Result};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce_weight: 0.3, dice_weight: 0.7, dice_smooth: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.ce_weight) || !ok(self.dice_weight) || !ok(self.dice_smooth) {
            return Err(config_err!("loss weights and smoothing must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `ce_weight · CE + dice_weight · (1 − soft Dice)` over `[B, K, H, W]`
/// logits and flat `[B·H·W]` labels. The soft Dice averages every class,
/// background included.
pub fn combined_loss(tape: &mut Tape, logits: Var, labels: &[usize], weights: &LossWeights) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels)?;
    let dice = tape.soft_dice_loss(logits, labels, weights.dice_smooth)?;
    let ce = tape.scale(ce, weights.ce_weight);
    let dice = tape.scale(dice, weights.dice_weight);
    tape.add(ce, dice)
}
