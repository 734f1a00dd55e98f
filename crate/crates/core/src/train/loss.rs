use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Supervision target: a class index or a soft label on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Soft(Vec<f64>),
}

impl Target {
    pub fn distribution(&self, num_classes: usize) -> Result<Vec<f64>> {
        match self {
            Target::Class(c) if *c < num_classes => {
                let mut y = vec![0.0; num_classes];
                y[*c] = 1.0;
                Ok(y)
            }
            Target::Class(c) => Err(Error::Validation(format!(
                "class {c} outside 0..{num_classes}"
            ))),
            Target::Soft(y) if y.len() == num_classes => Ok(y.clone()),
            Target::Soft(y) => Err(Error::Dimension(format!(
                "soft label of length {}, expected {num_classes}",
                y.len()
            ))),
        }
    }
}

/// Cross-entropy value plus whether any positive-weight probability had to
/// be clamped at [`PROB_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub clamped: bool,
}

/// `−Σ_c y_c log p_c`. With two classes and a hard label this is binary
/// cross-entropy.
pub fn classification_loss(probs: &[f64], target: &Target) -> Result<LossValue> {
    let y = target.distribution(probs.len())?;
    let mut loss = 0.0;
    let mut clamped = false;
    for (&p, &w) in probs.iter().zip(&y) {
        if w == 0.0 {
            continue;
        }
        if p < PROB_FLOOR {
            clamped = true;
        }
        loss -= w * p.max(PROB_FLOOR).ln();
    }
    Ok(LossValue { loss, clamped })
}
