use std::io;
use std::path::Path;

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid {field}: {rule}")]
    Validation { field: String, rule: String },
    #[error("invariant {invariant} violated at {t_us} us: {detail}")]
    Invariant {
        invariant: String,
        t_us: u64,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

// io::Error is not comparable; compare its kind instead.
impl PartialEq for CliError {
    fn eq(&self, other: &Self) -> bool {
        use CliError::*;
        match (self, other) {
            (
                Parse {
                    line,
                    column,
                    message,
                },
                Parse {
                    line: l,
                    column: c,
                    message: m,
                },
            ) => line == l && column == c && message == m,
            (Validation { field, rule }, Validation { field: f, rule: r }) => {
                field == f && rule == r
            }
            (
                Invariant {
                    invariant,
                    t_us,
                    detail,
                },
                Invariant {
                    invariant: i,
                    t_us: t,
                    detail: d,
                },
            ) => invariant == i && t_us == t && detail == d,
            (Io { path, source }, Io { path: p, source: s }) => {
                path == p && source.kind() == s.kind()
            }
            (Usage(a), Usage(b)) => a == b,
            _ => false,
        }
    }
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation { .. } | CliError::Usage(_) => 2,
            CliError::Invariant { .. } => 3,
            CliError::Io { .. } => 4,
        }
    }

    /// One-line machine-readable form for standard error.
    pub fn to_json_line(&self) -> String {
        let message = self.to_string();
        let value = match self {
            CliError::Parse { line, column, .. } => {
                json!({ "error": "parse", "line": line, "column": column, "message": message })
            }
            CliError::Validation { field, rule } => {
                json!({ "error": "validation", "field": field, "rule": rule, "message": message })
            }
            CliError::Invariant {
                invariant, t_us, ..
            } => {
                json!({ "error": "invariant", "invariant": invariant, "t_us": t_us, "message": message })
            }
            CliError::Io { path, .. } => json!({ "error": "io", "path": path, "message": message }),
            CliError::Usage(_) => json!({ "error": "usage", "message": message }),
        };
        value.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_line_is_single_line() {
        let e = CliError::Usage("bad\nflag".into());
        let line = e.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "usage");
    }

    #[test]
    fn exit_codes() {
        let v = CliError::Validation {
            field: "x".into(),
            rule: "y".into(),
        };
        assert_eq!(v.exit_code(), 2);
        let io = CliError::io(Path::new("/nope"), io::Error::from(io::ErrorKind::NotFound));
        assert_eq!(io.exit_code(), 4);
        assert!(io.to_json_line().contains("\"path\":\"/nope\""));
    }
}
