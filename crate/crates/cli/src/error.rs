use std::fmt;

use forge_core::capm::CapmError;
use forge_core::episode::RecordError;
use forge_core::fusion::FusionError;
use forge_core::metrics::MetricError;

/// Process exit classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

pub type Result<T> = std::result::Result<T, Failure>;

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn context(self, ctx: impl fmt::Display) -> Self {
        Self {
            kind: self.kind,
            error: self.error.context(ctx.to_string()),
        }
    }
}

pub fn usage(msg: impl fmt::Display) -> Failure {
    Failure::new(Kind::Usage, anyhow::anyhow!("{msg}"))
}

pub fn data(msg: impl fmt::Display) -> Failure {
    Failure::new(Kind::Data, anyhow::anyhow!("{msg}"))
}

pub fn numeric(msg: impl fmt::Display) -> Failure {
    Failure::new(Kind::Numeric, anyhow::anyhow!("{msg}"))
}

impl From<RecordError> for Failure {
    fn from(e: RecordError) -> Self {
        Failure::new(Kind::Data, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(Kind::Data, e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new(Kind::Data, e)
    }
}

impl From<FusionError> for Failure {
    fn from(e: FusionError) -> Self {
        let kind = match e {
            FusionError::QualityOverflow(..) => Kind::Numeric,
            FusionError::InvalidConfig(_) => Kind::Usage,
            _ => Kind::Data,
        };
        Failure::new(kind, e)
    }
}

impl From<CapmError> for Failure {
    fn from(e: CapmError) -> Self {
        let kind = match e {
            CapmError::InvalidHyper(_) => Kind::Usage,
            CapmError::Format(_) | CapmError::Shape(_) => Kind::Data,
            _ => Kind::Numeric,
        };
        Failure::new(kind, e)
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Failure::new(Kind::Data, e)
    }
}
