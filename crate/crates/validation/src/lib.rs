//! Helpers shared by the acceptance checks.

use std::path::PathBuf;
use std::time::Duration;

/// Directory holding the bundled scenario configs.
pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn config_path(name: &str) -> PathBuf {
    configs_dir().join(format!("{name}.json"))
}

/// Outcome of one acceptance criterion: a verdict plus the measured values.
#[derive(Debug, Default)]
pub struct Verdict {
    pub clauses: Vec<(String, bool)>,
    pub elapsed: Duration,
}

impl Verdict {
    pub fn check(&mut self, pass: bool, what: impl Into<String>) -> &mut Self {
        self.clauses.push((what.into(), pass));
        self
    }

    pub fn passed(&self) -> bool {
        !self.clauses.is_empty() && self.clauses.iter().all(|(_, p)| *p)
    }
}
