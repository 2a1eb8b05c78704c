use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::CliError;

/// Fixed layout under the output directory.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub const DIRS: [&'static str; 4] = ["checkpoints", "traces", "chains", "reports"];

    pub fn create(root: &Path) -> Result<Self, CliError> {
        for d in Self::DIRS {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", p.display())))?;
        }
        Ok(Layout { root: root.to_path_buf() })
    }

    pub fn checkpoint(&self, stem: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stem}.json"))
    }

    pub fn trace(&self, stem: &str, what: &str) -> PathBuf {
        self.root.join("traces").join(format!("{stem}-{what}.csv"))
    }

    pub fn chains(&self, stem: &str, ext: &str) -> PathBuf {
        self.root.join("chains").join(format!("{stem}.{ext}"))
    }

    pub fn report(&self, stem: &str) -> PathBuf {
        self.root.join("reports").join(format!("{stem}-report.csv"))
    }
}

/// Comment block prepended to every CSV.
pub struct Metadata {
    lines: Vec<(String, String)>,
}

impl Metadata {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let lines = vec![
            ("tool".into(), format!("thmc {}", env!("CARGO_PKG_VERSION"))),
            ("command".into(), command.into()),
            ("config_hash".into(), config.hash()),
            ("seed".into(), config.seed.to_string()),
            ("target".into(), config.target.name.clone()),
        ];
        Metadata { lines }
    }

    pub fn with(&self, key: &str, value: impl ToString) -> Self {
        let mut lines = self.lines.clone();
        lines.push((key.into(), value.to_string()));
        Metadata { lines }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out
    }
}

/// Writes `meta` followed by `body` (header row and data rows).
pub fn write_csv(path: &Path, meta: &Metadata, body: &str) -> Result<(), CliError> {
    let text = format!("{}{}", meta.render(), body);
    fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(())
}
