//! Process exit codes and the mapping from library errors onto them.

use sidesep::datagen::DatagenError;
use sidesep::latentlab::LatentError;
use sidesep::nncore::NnError;
use sidesep::separator::SeparatorError;
use sidesep::trainer::TrainError;
use thiserror::Error;

pub const OK: u8 = 0;
pub const INTERNAL: u8 = 1;
pub const USAGE: u8 = 2;
pub const SCHEMA: u8 = 3;
pub const FEATURES_REQUIRED: u8 = 4;
pub const HASH_MISMATCH: u8 = 5;
pub const DATA: u8 = 6;
pub const NUMERIC: u8 = 7;
pub const IO: u8 = 8;

/// Failures raised by the command layer itself.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("config: {0}")]
    Schema(String),
    #[error("hash mismatch: {0}")]
    HashMismatch(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Schema(_) => SCHEMA,
            Failure::HashMismatch(_) => HASH_MISMATCH,
            Failure::Data(_) => DATA,
            Failure::Numeric(_) => NUMERIC,
            Failure::Io(_) => IO,
        }
    }
}

fn train_code(e: &TrainError) -> Option<u8> {
    Some(match e {
        TrainError::FeaturesRequired { .. } => FEATURES_REQUIRED,
        TrainError::NonFinite { .. } => NUMERIC,
        TrainError::Schedule(_) => SCHEMA,
        TrainError::Dataset(_)
        | TrainError::TrackTooShort { .. }
        | TrainError::MixtureMismatch { .. }
        | TrainError::FeatureMisaligned { .. }
        | TrainError::SplitLeak { .. } => DATA,
        TrainError::Io { .. } => IO,
        TrainError::Separator(inner) => return code_of(inner),
        TrainError::Nn(inner) => return code_of(inner),
        TrainError::Loss(_) => NUMERIC,
        TrainError::Dsp(_) | TrainError::Feature(_) => DATA,
    })
}

fn code_of(e: &(dyn std::error::Error + 'static)) -> Option<u8> {
    if let Some(f) = e.downcast_ref::<Failure>() {
        return Some(f.code());
    }
    if let Some(t) = e.downcast_ref::<TrainError>() {
        return train_code(t);
    }
    if let Some(s) = e.downcast_ref::<SeparatorError>() {
        return match s {
            SeparatorError::FeaturesRequired(_) => Some(FEATURES_REQUIRED),
            SeparatorError::Config(_) => Some(SCHEMA),
            SeparatorError::Nn(inner) => code_of(inner),
            SeparatorError::Input(_)
            | SeparatorError::Checkpoint(_)
            | SeparatorError::Dsp(_)
            | SeparatorError::Feature(_) => Some(DATA),
        };
    }
    if let Some(d) = e.downcast_ref::<DatagenError>() {
        return match d {
            DatagenError::Spec(_) => Some(SCHEMA),
            DatagenError::HashMismatch { .. } => Some(HASH_MISMATCH),
            DatagenError::NotEmpty(_) | DatagenError::Manifest(_) => Some(DATA),
            DatagenError::Io { .. } => Some(IO),
            DatagenError::Train(inner) => code_of(inner),
            DatagenError::Dsp(_) => Some(DATA),
        };
    }
    if let Some(n) = e.downcast_ref::<NnError>() {
        return match n {
            NnError::HashMismatch { .. } => Some(HASH_MISMATCH),
            NnError::NonFinite(_) => Some(NUMERIC),
            NnError::Checkpoint(_) => Some(DATA),
            NnError::Io(_) => Some(IO),
            _ => None,
        };
    }
    if let Some(l) = e.downcast_ref::<LatentError>() {
        return match l {
            LatentError::Separator(inner) => code_of(inner),
            LatentError::MethodMismatch { .. } => Some(SCHEMA),
            _ => Some(DATA),
        };
    }
    if e.downcast_ref::<sidesep::dsp::DspError>().is_some()
        || e.downcast_ref::<sidesep::sidefeat::FeatureError>().is_some()
    {
        return Some(DATA);
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return Some(IO);
    }
    None
}

/// The most specific code found along the error's source chain.
pub fn classify(err: &anyhow::Error) -> u8 {
    err.chain().find_map(code_of).unwrap_or(INTERNAL)
}
