use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelId {
    Np,
    Cnp,
    Anp,
    Canp,
    Bnp,
    Banp,
}

impl ModelId {
    pub const ALL: [ModelId; 6] = [
        ModelId::Np,
        ModelId::Cnp,
        ModelId::Anp,
        ModelId::Canp,
        ModelId::Bnp,
        ModelId::Banp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelId::Np => "np",
            ModelId::Cnp => "cnp",
            ModelId::Anp => "anp",
            ModelId::Canp => "canp",
            ModelId::Bnp => "bnp",
            ModelId::Banp => "banp",
        }
    }
}

/// A model family member plus the robust-loss flag (`r-` prefix).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelVariant {
    pub id: ModelId,
    pub robust: bool,
}

impl ModelVariant {
    pub fn new(id: ModelId, robust: bool) -> Self {
        ModelVariant { id, robust }
    }

    pub fn plain(id: ModelId) -> Self {
        ModelVariant { id, robust: false }
    }

    /// Latent path with a Gaussian `z`.
    pub fn has_latent(self) -> bool {
        matches!(self.id, ModelId::Np | ModelId::Anp)
    }

    /// Deterministic path reads the context through cross-attention.
    pub fn attention_based(self) -> bool {
        matches!(self.id, ModelId::Anp | ModelId::Canp | ModelId::Banp)
    }

    pub fn bootstrapped(self) -> bool {
        matches!(self.id, ModelId::Bnp | ModelId::Banp)
    }

    /// Has a deterministic context path (every variant except the latent-only np).
    pub fn has_deterministic_path(self) -> bool {
        self.id != ModelId::Np
    }

    /// Neither latent nor bootstrapped: a single prediction per query.
    pub fn is_deterministic(self) -> bool {
        !self.has_latent() && !self.bootstrapped()
    }

    /// Checks the robust flag against the combinations the experiments use.
    pub fn validate(self, allow_any_robust: bool) -> Result<()> {
        if self.robust && !allow_any_robust && !matches!(self.id, ModelId::Anp | ModelId::Banp) {
            return Err(Error::Config(format!(
                "robust training is only configured for anp and banp, not {}; set allow_any_robust to override",
                self.id.name()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.robust {
            write!(f, "r-{}", self.id.name())
        } else {
            f.write_str(self.id.name())
        }
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (robust, base) = match lower.strip_prefix("r-") {
            Some(rest) => (true, rest),
            None => (false, lower.as_str()),
        };
        let id = ModelId::ALL
            .into_iter()
            .find(|m| m.name() == base)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))?;
        Ok(ModelVariant { id, robust })
    }
}

impl Serialize for ModelVariant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelVariant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
