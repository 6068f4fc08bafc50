use offense_core::classifier::ClassifierError;
use offense_core::corpus::CorpusError;
use offense_core::evaluation::EvaluationError;
use offense_core::transfer::TransferError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn to_json(&self) -> String {
        json!({
            "error": {
                "kind": self.kind(),
                "code": self.exit_code(),
                "message": self.to_string(),
            }
        })
        .to_string()
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::Classifier(inner) => inner.into(),
            other => CliError::Checkpoint(other.to_string()),
        }
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ClassifierError::Corpus(inner) => inner.into(),
            ClassifierError::SchemeMismatch { .. } | ClassifierError::Dimension(_) => {
                CliError::Checkpoint(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvaluationError> for CliError {
    fn from(e: EvaluationError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
