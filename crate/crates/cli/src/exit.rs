//! Exit codes and the error type that carries them.

use std::fmt;

use ddlab_core::error::CoreError;

pub const CONFIG: i32 = 2;
pub const MISSING_INPUT: i32 = 3;
pub const NUMERICAL: i32 = 4;

#[derive(Debug)]
pub struct Exit {
    pub code: i32,
    pub msg: String,
}

impl Exit {
    pub fn config(msg: impl Into<String>) -> Self {
        Exit { code: CONFIG, msg: format!("config error: {}", msg.into()) }
    }

    pub fn missing(files: Vec<String>) -> Self {
        Exit { code: MISSING_INPUT, msg: format!("missing input: {}", files.join(", ")) }
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Exit {}

/// Process exit status for a failed run.
pub fn code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            if e.is_numerical() {
                return NUMERICAL;
            }
            match e {
                CoreError::Invalid { .. } => return CONFIG,
                CoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => return MISSING_INPUT,
                _ => {}
            }
        }
    }
    1
}
