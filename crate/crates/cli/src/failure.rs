//! Failures carry an exit code class: bad input from the user (1) versus a
//! fault at runtime (2). Success is 0.

use std::fmt;

/// A command failure, classified for the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Wrong arguments, unreadable config, missing files: exit code 1.
    User(anyhow::Error),
    /// The run itself broke (solver divergence, training fault): exit code 2.
    Fault(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::User(_) => 1,
            Failure::Fault(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::User(e) | Failure::Fault(e) => write!(f, "{e:#}"),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Attaches an exit-code class to any error as it crosses into command code.
pub trait Classify<T> {
    fn or_user(self) -> CmdResult<T>;
    fn or_fault(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_user(self) -> CmdResult<T> {
        self.map_err(|e| Failure::User(e.into()))
    }

    fn or_fault(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Fault(e.into()))
    }
}

pub fn user_error<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(Failure::User(anyhow::anyhow!(msg.into())))
}
