use std::fmt;
use std::str::FromStr;

use crate::attmil::HeadKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PresetName {
    CamilClassification,
    GrazianiRegression,
    CamilRegression,
}

impl PresetName {
    pub const ALL: [PresetName; 3] = [
        PresetName::CamilClassification,
        PresetName::GrazianiRegression,
        PresetName::CamilRegression,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::CamilClassification => "camil_classification",
            PresetName::GrazianiRegression => "graziani_regression",
            PresetName::CamilRegression => "camil_regression",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown preset {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    WeightedCrossEntropy,
    Mse,
    BalancedMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Balancing {
    InverseWeighted,
    None,
    KernelBased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPreset {
    pub name: PresetName,
    pub batch_size: usize,
    pub optimizer: OptimizerChoice,
    pub loss: LossKind,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub balancing: Balancing,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub batch_norm: bool,
}

impl TrainPreset {
    pub fn named(name: PresetName) -> Self {
        let (batch_size, optimizer, loss, epochs, dropout_rate, balancing, batch_norm) = match name
        {
            PresetName::CamilClassification => (
                64,
                OptimizerChoice::Adam,
                LossKind::WeightedCrossEntropy,
                25,
                0.5,
                Balancing::InverseWeighted,
                true,
            ),
            PresetName::GrazianiRegression => (
                1,
                OptimizerChoice::Sgd,
                LossKind::Mse,
                100,
                0.2,
                Balancing::None,
                false,
            ),
            PresetName::CamilRegression => (
                1,
                OptimizerChoice::Adam,
                LossKind::BalancedMse,
                25,
                0.0,
                Balancing::KernelBased,
                false,
            ),
        };
        Self {
            name,
            batch_size,
            optimizer,
            loss,
            epochs,
            dropout_rate,
            balancing,
            lr: 1e-4,
            weight_decay: 1e-2,
            patience: 12,
            batch_norm,
        }
    }

    pub fn camil_classification() -> Self {
        Self::named(PresetName::CamilClassification)
    }

    pub fn graziani_regression() -> Self {
        Self::named(PresetName::GrazianiRegression)
    }

    pub fn camil_regression() -> Self {
        Self::named(PresetName::CamilRegression)
    }

    pub fn head(&self) -> HeadKind {
        match self.loss {
            LossKind::WeightedCrossEntropy => HeadKind::Classification,
            LossKind::Mse | LossKind::BalancedMse => HeadKind::Regression,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Invalid(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid(format!(
                "lr {} / weight decay {} out of range",
                self.lr, self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let consistent = matches!(
            (self.loss, self.balancing),
            (
                LossKind::WeightedCrossEntropy,
                Balancing::InverseWeighted | Balancing::None
            ) | (LossKind::Mse, Balancing::None)
                | (
                    LossKind::BalancedMse,
                    Balancing::KernelBased | Balancing::None
                )
        );
        if !consistent {
            return Err(Error::Invalid(format!(
                "balancing {:?} does not apply to loss {:?}",
                self.balancing, self.loss
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    AddDropout20,
    UseSgd,
    Epochs100,
    NoBalancing,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::AddDropout20,
        Ablation::UseSgd,
        Ablation::Epochs100,
        Ablation::NoBalancing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::AddDropout20 => "add_dropout_20",
            Ablation::UseSgd => "use_sgd",
            Ablation::Epochs100 => "epochs_100",
            Ablation::NoBalancing => "no_balancing",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation {s:?}")))
    }
}

/// Changes exactly one field of the CAMIL regression preset. Without
/// kernel balancing the balanced loss reduces to plain MSE in training.
pub fn ablate(preset: &TrainPreset, toggle: Ablation) -> Result<TrainPreset> {
    if preset.name != PresetName::CamilRegression {
        return Err(Error::Invalid(format!(
            "ablations apply to camil_regression, not {}",
            preset.name
        )));
    }
    let mut p = preset.clone();
    match toggle {
        Ablation::AddDropout20 => p.dropout_rate = 0.2,
        Ablation::UseSgd => p.optimizer = OptimizerChoice::Sgd,
        Ablation::Epochs100 => p.epochs = 100,
        Ablation::NoBalancing => p.balancing = Balancing::None,
    }
    Ok(p)
}
