use thiserror::Error;

use crate::geometry::FrameId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes. The command-line front end maps each class to a
/// fixed exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or incomplete input.
    Config,
    /// The requested geometry cannot be realised (nothing visible, zero baseline).
    Infeasible,
    /// Input is well formed but numerically degenerate.
    Degenerate,
    /// Two runs that should agree do not.
    Inconsistent,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("frame mismatch: expected {expected}, found {found}")]
    FrameMismatch { expected: FrameId, found: FrameId },

    #[error("point lists differ in length ({source_len} vs {target_len})")]
    LengthMismatch {
        source_len: usize,
        target_len: usize,
    },

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("point is behind the camera (depth {depth_mm:.6} mm)")]
    BehindCamera { depth_mm: f64 },

    #[error("projection ({row:.3}, {col:.3}) px falls outside the sensor")]
    OutsideSensor { row: f64, col: f64 },

    #[error("degenerate viewing geometry: {0}")]
    DegenerateViewingGeometry(String),

    #[error("no convergence after {iterations} iterations (last step {last_step:e})")]
    NonConvergence { iterations: usize, last_step: f64 },

    #[error("rays are parallel, intersection undefined")]
    ParallelRays,

    #[error("nest {nest}: ray gap {gap_mm:.4} mm exceeds {limit_mm} mm")]
    ExcessiveGap {
        nest: String,
        gap_mm: f64,
        limit_mm: f64,
    },

    #[error("unknown or missing nest {0}")]
    UnknownNest(String),

    #[error("unknown mark id {0}")]
    UnknownMark(u32),

    #[error("invalid plate: {0}")]
    InvalidPlate(String),

    #[error("invalid camera model: {0}")]
    InvalidCamera(String),

    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),

    #[error("missing measurement: {0}")]
    MissingMeasurement(String),

    #[error("invalid session: {0}")]
    InvalidSession(String),

    #[error(
        "reversal runs disagree by {translation_mm:.4} mm / {rotation_deg:.4} deg \
         (limits {max_translation_mm} mm / {max_rotation_deg} deg)"
    )]
    InconsistentRuns {
        translation_mm: f64,
        rotation_deg: f64,
        max_translation_mm: f64,
        max_rotation_deg: f64,
    },

    #[error("infeasible placement: {0}")]
    InfeasiblePlacement(String),

    #[error("plate target not visible: {0}")]
    TargetNotVisible(String),

    #[error("mark not visible: {0}")]
    MarkNotVisible(String),

    #[error("image point ({row:.3}, {col:.3}) is out of bounds")]
    OutOfBounds { row: f64, col: f64 },

    #[error("empty input")]
    EmptyInput,

    #[error("cluster {0} has no measurements")]
    EmptyCluster(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Outermost-first list of stage names attached to this error.
    pub fn stages(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut cur = self;
        while let Error::Stage { stage, source } = cur {
            out.push(*stage);
            cur = source;
        }
        out
    }

    pub fn class(&self) -> ErrorClass {
        match self.root() {
            Error::FrameMismatch { .. }
            | Error::LengthMismatch { .. }
            | Error::InvalidRotation(_)
            | Error::UnknownNest(_)
            | Error::UnknownMark(_)
            | Error::InvalidPlate(_)
            | Error::InvalidCamera(_)
            | Error::MissingMeasurement(_)
            | Error::InvalidSession(_)
            | Error::EmptyInput
            | Error::EmptyCluster(_)
            | Error::InvalidConfig(_)
            | Error::Json(_)
            | Error::Io(_) => ErrorClass::Config,
            Error::TargetNotVisible(_)
            | Error::InfeasiblePlacement(_)
            | Error::MarkNotVisible(_)
            | Error::OutOfBounds { .. }
            | Error::OutsideSensor { .. }
            | Error::BehindCamera { .. } => ErrorClass::Infeasible,
            Error::DegenerateConfiguration(_)
            | Error::DegenerateViewingGeometry(_)
            | Error::NonConvergence { .. }
            | Error::ParallelRays
            | Error::ExcessiveGap { .. }
            | Error::DegenerateMotion(_) => ErrorClass::Degenerate,
            Error::InconsistentRuns { .. } => ErrorClass::Inconsistent,
            Error::Stage { .. } => unreachable!("root() strips stages"),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
