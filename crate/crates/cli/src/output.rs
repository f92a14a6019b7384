use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use advpatch::Error;
use tempfile::TempDir;

/// An output directory that only appears once the command succeeds.
///
/// Files are written into a hidden sibling staging directory; `commit`
/// renames it into place (or moves its files into an existing directory).
/// Dropping without committing removes everything written so far.
pub struct StagedDir {
    staging: TempDir,
    target: PathBuf,
}

impl StagedDir {
    pub fn new(target: &Path) -> Result<Self, Error> {
        if target.exists() && !target.is_dir() {
            return Err(Error::Usage(format!("output path {} exists and is not a directory", target.display())));
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| io_err(&parent, e))?;
        let staging = tempfile::Builder::new()
            .prefix(".advpatch-staging-")
            .tempdir_in(&parent)
            .map_err(|e| io_err(&parent, e))?;
        Ok(StagedDir {
            staging,
            target: target.to_path_buf(),
        })
    }

    /// Where files should be written before `commit`.
    pub fn path(&self) -> &Path {
        self.staging.path()
    }

    pub fn commit(self) -> Result<PathBuf, Error> {
        if !self.target.exists() {
            let staged = self.staging.keep();
            fs::rename(&staged, &self.target).map_err(|e| io_err(&self.target, e))?;
        } else {
            merge(self.staging.path(), &self.target)?;
        }
        Ok(self.target)
    }
}

fn merge(src: &Path, dst: &Path) -> Result<(), Error> {
    let mut entries: Vec<_> = fs::read_dir(src)
        .map_err(|e| io_err(src, e))?
        .collect::<io::Result<_>>()
        .map_err(|e| io_err(src, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let from = entry.path();
        let to = dst.join(entry.file_name());
        if from.is_dir() {
            fs::create_dir_all(&to).map_err(|e| io_err(&to, e))?;
            merge(&from, &to)?;
        } else {
            fs::rename(&from, &to).map_err(|e| io_err(&to, e))?;
        }
    }
    Ok(())
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
