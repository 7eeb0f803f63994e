//! Output directory handling: every artifact is checked before any work starts
//! so a run never half-overwrites a previous one.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    /// Creates `root` if needed and refuses existing `files` unless `force`.
    pub fn prepare(root: &Path, files: &[&str], force: bool) -> Result<Self, CliError> {
        if !force {
            let taken: Vec<&str> = files.iter().copied().filter(|f| root.join(f).exists()).collect();
            if !taken.is_empty() {
                return Err(CliError::Usage(format!(
                    "{} already exists in {}; pass --force to overwrite",
                    taken.join(", "),
                    root.display()
                )));
            }
        }
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn writer(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut w = self.writer(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(equiscope::Error::from)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}
