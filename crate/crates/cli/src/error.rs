use std::path::PathBuf;

use serde_json::json;
use valprof_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing upstream artifact {}: run `{producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Core(CoreError::Backend(_) | CoreError::MissingCells(_)) => 4,
            CliError::Core(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::Core(CoreError::Backend(_) | CoreError::MissingCells(_)) => "backend",
            CliError::Core(_) => "runtime",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({
            "kind": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        match self {
            CliError::MissingArtifact { path, producer } => {
                body["path"] = json!(path);
                body["producer"] = json!(producer);
            }
            CliError::Core(CoreError::MissingCells(cells)) => {
                body["missing_cells"] = json!(cells);
            }
            _ => {}
        }
        json!({ "error": body })
    }
}
