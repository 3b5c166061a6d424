use std::fmt;
use std::path::Path;

use flowcast_core::Error as CoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Usage,
    Config,
    Io,
    Prerequisite,
    Data,
    Numeric,
    Solver,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Io => "io",
            Category::Prerequisite => "prerequisite",
            Category::Data => "data",
            Category::Numeric => "numeric",
            Category::Solver => "solver",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        CliError { category, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Category::Data, message)
    }

    pub fn missing(what: &str, path: &Path) -> Self {
        Self::new(Category::Prerequisite, format!("missing {what} at {}", path.display()))
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(Category::Io, format!("{}: {err}", path.display()))
    }

    /// `error[category]: message` on one line.
    pub fn render(&self) -> String {
        let msg = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}]: {msg}", self.category.as_str())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl std::error::Error for CliError {}

fn category_of(e: &CoreError) -> Category {
    match e {
        CoreError::NonFinite { .. } => Category::Numeric,
        CoreError::Solver(_) => Category::Solver,
        CoreError::Member { source, .. } => category_of(source),
        CoreError::Io { .. } => Category::Io,
        _ => Category::Data,
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::new(category_of(&e), e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
