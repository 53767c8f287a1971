//! Output files. CSVs start with `#` comment lines holding the library
//! version, the command and the resolved config as TOML; JSON documents carry
//! the same in `version`, `command` and `config` fields.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub struct Output {
    dir: PathBuf,
    command: String,
    config: RunConfig,
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    version: &'a str,
    command: &'a str,
    config: &'a RunConfig,
    result: T,
}

impl Output {
    pub fn new(dir: &Path, command: &str, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config: config.clone(),
        })
    }

    pub fn subdir(&self, name: &str) -> Result<Self> {
        Self::new(&self.dir.join(name), &self.command, &self.config)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn header_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("mbcool {}", mbcool_core::VERSION),
            format!("command {}", self.command),
        ];
        lines.extend(self.config.to_toml().lines().map(str::to_string));
        lines
    }

    /// Opens `name` for a CSV body, comment header already written.
    pub fn csv(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        for line in self.header_lines() {
            writeln!(w, "# {line}")?;
        }
        Ok(w)
    }

    pub fn json<T: Serialize>(&self, name: &str, result: T) -> Result<()> {
        let path = self.path(name);
        let doc = Document {
            version: mbcool_core::VERSION,
            command: &self.command,
            config: &self.config,
            result,
        };
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// The resolved config, reusable with `--config`.
    pub fn config_file(&self) -> Result<()> {
        let path = self.path("config.toml");
        let text = format!(
            "# mbcool {}\n# command {}\n{}",
            mbcool_core::VERSION,
            self.command,
            self.config.to_toml()
        );
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn file(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(BufWriter::new(file))
    }
}
