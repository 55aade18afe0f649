//! Error codes shared by every pipeline stage.
//!
//! Each code belongs to exactly one module and renders as
//! `module/CODE`, which is what the CLI prints and the FFI layer maps
//! onto integer status values.

use std::fmt;

use serde::{Serialize, Serializer};

macro_rules! error_codes {
    ($( $variant:ident => ($module:literal, $code:literal, $doc:literal) ),+ $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum ErrorCode {
            $( #[doc = $doc] $variant, )+
        }

        impl ErrorCode {
            pub const ALL: &'static [ErrorCode] = &[$( ErrorCode::$variant, )+];

            pub fn module(self) -> &'static str {
                match self { $( ErrorCode::$variant => $module, )+ }
            }

            pub fn code(self) -> &'static str {
                match self { $( ErrorCode::$variant => $code, )+ }
            }

            pub fn describe(self) -> &'static str {
                match self { $( ErrorCode::$variant => $doc, )+ }
            }
        }
    };
}

error_codes! {
    WindowTooTall => ("periodicity", "WINDOW_TOO_TALL", "projection window is not shorter than the image"),
    BadStep => ("periodicity", "BAD_STEP", "projection step must be at least 1 and at most the window height"),
    CurveTooShort => ("periodicity", "CURVE_TOO_SHORT", "projection curve has fewer than 4 samples"),
    BadBounds => ("periodicity", "BAD_BOUNDS", "period search bounds must satisfy 2 <= min < max <= width/2"),
    NoPeak => ("periodicity", "NO_PEAK", "lag curve is flat over the search bounds"),
    NotPeriodic => ("periodicity", "NOT_PERIODIC", "fewer than 3 sub-images produced a period, or fewer than 2 periods fit"),
    AllDirty => ("periodicity", "ALL_DIRTY", "no period band is clean"),
    NoCleanPeriod => ("reference", "NO_CLEAN_PERIOD", "estimate carries no clean period to tile"),
    ImageTooSmall => ("reference", "IMAGE_TOO_SMALL", "image is smaller than one 224x224 patch"),
    LabelMissing => ("reference", "LABEL_MISSING", "image has no image-level label"),
    NoNegativeSources => ("reference", "NO_NEGATIVE_SOURCES", "no defect-free images to sample negatives from"),
    ClassifierFailure => ("patch-detect", "CLASSIFIER_FAILURE", "patch classifier failed on a window"),
    NoMatch => ("selfref-seg", "NO_MATCH", "no background placement reached the correlation threshold"),
    MissingBackground => ("classify", "MISSING_BACKGROUND", "channel mode needs a matched background patch"),
    MissingMask => ("classify", "MISSING_MASK", "channel mode needs a defect mask"),
    InsufficientData => ("classify", "INSUFFICIENT_DATA", "a class has fewer than 10 training samples"),
    EmptySplit => ("classify", "EMPTY_SPLIT", "evaluation split is empty"),
    OverlappingSplits => ("classify", "OVERLAPPING_SPLITS", "train and test splits share an image id"),
    BadArtifact => ("classify", "BAD_ARTIFACT", "model artifact is malformed or of an unknown version"),
    SchemaError => ("impact", "SCHEMA_ERROR", "layout document does not match the schema"),
    UnknownRegion => ("impact", "UNKNOWN_REGION", "rule references a region that is not defined"),
    FrameMismatch => ("impact", "FRAME_MISMATCH", "mask dimensions differ from the layout frame"),
    ModelUnavailable => ("service", "MODEL_UNAVAILABLE", "no available node has a model loaded for the scope"),
    NodeSaturated => ("service", "NODE_SATURATED", "dispatch queue is full"),
    UnknownModel => ("service", "UNKNOWN_MODEL", "deployment plan references an unregistered model"),
    InvalidPlan => ("service", "INVALID_PLAN", "deployment plan names a scope twice or a model under the wrong scope"),
    UnknownNode => ("service", "UNKNOWN_NODE", "node id is not registered"),
    SinkUnreachable => ("service", "SINK_UNREACHABLE", "result sink rejected every delivery attempt"),
    DuplicateVersion => ("service", "DUPLICATE_VERSION", "model id and version already registered"),
    UnknownJob => ("service", "UNKNOWN_JOB", "job id is not known"),
    Conflict => ("service", "CONFLICT", "candidate was already decided"),
    UnknownCandidate => ("service", "UNKNOWN_CANDIDATE", "candidate id is not known"),
    StoreError => ("service", "STORE_ERROR", "persistent store failed"),
    SpecInvalid => ("synthgen", "SPEC_INVALID", "panel or corpus spec is invalid"),
    OutOfBounds => ("synthgen", "OUT_OF_BOUNDS", "defect geometry leaves the image"),
    InvalidImage => ("image", "INVALID_IMAGE", "image is malformed, too small or cannot be decoded"),
    Io => ("io", "IO", "file system or serialization failure"),
    InvalidConfig => ("cli", "INVALID_CONFIG", "configuration value out of range or unknown key"),
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.module(), self.code())
    }
}

impl Serialize for ErrorCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{code}: {message}")]
pub struct Error {
    pub code: ErrorCode,
    pub message: String,
}

impl Error {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Error {
            code,
            message: message.into(),
        }
    }

    pub fn io(context: impl fmt::Display, err: impl fmt::Display) -> Self {
        Error::new(ErrorCode::Io, format!("{context}: {err}"))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn codes_are_unique_per_module() {
        let set: HashSet<String> = ErrorCode::ALL.iter().map(|c| c.to_string()).collect();
        assert_eq!(set.len(), ErrorCode::ALL.len());
    }

    #[test]
    fn display_is_module_qualified() {
        let e = Error::new(ErrorCode::NotPeriodic, "noise");
        assert_eq!(e.to_string(), "periodicity/NOT_PERIODIC: noise");
    }
}
