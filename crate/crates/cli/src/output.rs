//! Artifact writing with removal of everything written when a run fails.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::{compute, CliError};

/// Names of the constants that came from a calibration and of those left at 1.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Provenance {
    pub calibrated: Vec<String>,
    pub defaulted: Vec<String>,
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    provenance: &'a Provenance,
    #[serde(flatten)]
    result: &'a T,
}

pub struct Outputs {
    dir: PathBuf,
    hash: String,
    command: &'static str,
    created: Vec<PathBuf>,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: PathBuf, hash: String, command: &'static str) -> Self {
        Outputs { dir, hash, command, created: Vec::new(), written: Vec::new() }
    }

    pub fn prepare(&mut self) -> Result<(), CliError> {
        self.mkdir(&self.dir.clone())
    }

    fn mkdir(&mut self, dir: &Path) -> Result<(), CliError> {
        let missing: Vec<PathBuf> =
            dir.ancestors().take_while(|p| !p.as_os_str().is_empty() && !p.exists()).map(Path::to_path_buf).collect();
        fs::create_dir_all(dir).map_err(|e| compute(format!("{}: {e}", dir.display())))?;
        self.created.extend(missing.into_iter().rev());
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.written.push(path.clone());
        path
    }

    pub fn csv<R: AsRef<[String]>>(&mut self, name: &str, header: &[&str], rows: &[R]) -> Result<PathBuf, CliError> {
        let path = self.track(self.path(name));
        let mut w = csv::Writer::from_path(&path).map_err(compute)?;
        w.write_record(header).map_err(compute)?;
        for r in rows {
            w.write_record(r.as_ref()).map_err(compute)?;
        }
        w.flush().map_err(compute)?;
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, provenance: &Provenance, result: &T) -> Result<PathBuf, CliError> {
        let path = self.track(self.path(name));
        let artifact = Artifact {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: &self.hash,
            provenance,
            result,
        };
        let text = serde_json::to_string_pretty(&artifact).map_err(compute)?;
        fs::write(&path, text + "\n").map_err(compute)?;
        Ok(path)
    }

    pub fn bytes(&mut self, sub: &str, name: &str, data: &[u8]) -> Result<PathBuf, CliError> {
        let dir = self.dir.join(sub);
        self.mkdir(&dir)?;
        let path = self.track(dir.join(name));
        fs::write(&path, data).map_err(compute)?;
        Ok(path)
    }

    /// Remove every file written and every directory created by this run.
    pub fn cleanup(&mut self) {
        for p in self.written.drain(..) {
            let _ = fs::remove_file(p);
        }
        for d in self.created.drain(..).rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

/// Shortest round-trip decimal form.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}
