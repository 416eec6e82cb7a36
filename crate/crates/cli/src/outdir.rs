//! Output directories: lock file, emptiness check and `--force` clearing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use humansense::Error;

use crate::CliResult;

pub const LOCK_FILE: &str = ".humansense.lock";

/// Holds the lock on an output directory until dropped.
#[derive(Debug)]
pub struct OutDir {
    path: PathBuf,
    lock: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// The directory must be empty or missing.
    Fresh,
    /// Existing contents are deleted first.
    Force,
    /// Existing contents are kept.
    Reuse,
}

impl Mode {
    pub fn from_force(force: bool) -> Self {
        if force {
            Mode::Force
        } else {
            Mode::Fresh
        }
    }
}

impl OutDir {
    pub fn acquire(path: &Path, mode: Mode) -> CliResult<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!(
                    "{} is in use by another command (remove {} if it is stale)",
                    path.display(),
                    lock.display()
                ))
            } else {
                Error::io(&lock, e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        let out = OutDir {
            path: path.to_path_buf(),
            lock,
        };
        let others = out.entries()?;
        match mode {
            Mode::Reuse => {}
            Mode::Fresh if others.is_empty() => {}
            Mode::Fresh => {
                return Err(Error::Config(format!(
                    "output directory {} is not empty (pass --force to replace it)",
                    path.display()
                ))
                .into())
            }
            Mode::Force => {
                for p in others {
                    let r = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
                    r.map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        Ok(out)
    }

    fn entries(&self) -> CliResult<Vec<PathBuf>> {
        let rd = fs::read_dir(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut out = Vec::new();
        for entry in rd {
            let p = entry.map_err(|e| Error::io(&self.path, e))?.path();
            if p != self.lock {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutDir::acquire(dir.path(), Mode::Fresh).unwrap();
        assert!(OutDir::acquire(dir.path(), Mode::Reuse).is_err());
        drop(a);
        OutDir::acquire(dir.path(), Mode::Reuse).unwrap();
    }

    #[test]
    fn fresh_refuses_and_force_clears() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("old.txt"), "x").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        assert!(OutDir::acquire(dir.path(), Mode::Fresh).is_err());
        assert!(dir.path().join("old.txt").exists());
        let d = OutDir::acquire(dir.path(), Mode::Force).unwrap();
        assert!(d.entries().unwrap().is_empty());
    }
}
