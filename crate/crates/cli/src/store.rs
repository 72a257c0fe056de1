//! Results layout `<out>/<digest>/<subcommand>/`, staged writes and the
//! top-level manifest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::exit::Exit;

pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "digest,seed,subcommand,kind,path,sha256\n";

#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: Config,
    pub root: PathBuf,
    pub dir: PathBuf,
}

impl Run {
    pub fn new(cfg: Config) -> Self {
        let root = cfg.out_dir();
        let dir = root.join(cfg.digest());
        Run { cfg, root, dir }
    }

    pub fn sub(&self, subcommand: &str) -> PathBuf {
        self.dir.join(subcommand)
    }

    /// Fails with the missing-input exit code listing every absent path.
    pub fn require(&self, paths: &[PathBuf]) -> Result<()> {
        let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(anyhow!(Exit::missing(missing)))
        }
    }

    pub fn stage(&self, subcommand: &str) -> Result<Stage> {
        let dir = self.sub(subcommand);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Stage { run: self.clone(), subcommand: subcommand.to_string(), dir, staged: Vec::new(), committed: false })
    }
}

/// Outputs of one subcommand run. Files land under temporary names and are
/// renamed into place by [`Stage::commit`]; dropping an uncommitted stage
/// removes them.
pub struct Stage {
    run: Run,
    subcommand: String,
    dir: PathBuf,
    staged: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Stage {
    /// Temporary path for output `name` (a file or a directory).
    pub fn path(&mut self, name: &str) -> PathBuf {
        let tmp = self.dir.join(format!(".{name}.partial"));
        remove(&tmp);
        self.staged.push((tmp.clone(), self.dir.join(name)));
        tmp
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    /// Writes the resolved config, moves every output into place and records
    /// them in the manifest. Returns the final paths.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let resolved = self.run.cfg.resolved();
        self.write("config.txt", resolved)?;
        for (tmp, dest) in &self.staged {
            remove(dest);
            fs::rename(tmp, dest).with_context(|| format!("moving {} into place", dest.display()))?;
        }
        self.committed = true;
        let finals: Vec<PathBuf> = self.staged.iter().map(|(_, d)| d.clone()).collect();
        append_manifest(&self.run, &self.subcommand, &finals)?;
        Ok(finals)
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        if !self.committed {
            for (tmp, _) in &self.staged {
                remove(tmp);
            }
        }
    }
}

fn remove(p: &Path) {
    if p.is_dir() {
        let _ = fs::remove_dir_all(p);
    } else if p.exists() {
        let _ = fs::remove_file(p);
    }
}

fn kind_of(p: &Path) -> &'static str {
    match p.extension().and_then(|e| e.to_str()) {
        Some("svg") => "plot",
        Some("csv") => "table",
        Some("ddlb") | Some("ddls") => "data",
        Some("txt") => "config",
        _ if p.is_dir() => "directory",
        _ => "file",
    }
}

fn append_manifest(run: &Run, subcommand: &str, paths: &[PathBuf]) -> Result<()> {
    let mut rows = String::new();
    for p in paths {
        let sha = if p.is_file() {
            hex::encode(Sha256::digest(fs::read(p).with_context(|| format!("hashing {}", p.display()))?))
        } else {
            String::new()
        };
        let rel = p.strip_prefix(&run.root).unwrap_or(p);
        rows.push_str(&format!(
            "{},{},{},{},{},{}\n",
            run.cfg.digest(),
            run.cfg.seed(),
            subcommand,
            kind_of(p),
            rel.display(),
            sha
        ));
    }
    let path = run.root.join(MANIFEST);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    f.lock().with_context(|| format!("locking {}", path.display()))?;
    if f.metadata()?.len() == 0 {
        f.write_all(MANIFEST_HEADER.as_bytes())?;
    }
    f.write_all(rows.as_bytes())?;
    f.unlock()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_in(dir: &Path) -> Run {
        let mut cfg = Config::default();
        cfg.set("out", dir.to_str().unwrap()).unwrap();
        Run::new(cfg)
    }

    #[test]
    fn committed_outputs_are_listed_in_the_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let run = run_in(tmp.path());
        let mut s = run.stage("demo").unwrap();
        s.write("a.csv", "x\n1\n").unwrap();
        let paths = s.commit().unwrap();
        assert!(paths.iter().all(|p| p.exists()));
        let m = fs::read_to_string(tmp.path().join(MANIFEST)).unwrap();
        assert!(m.starts_with(MANIFEST_HEADER));
        assert!(m.contains("demo,table,"));
        assert!(run.sub("demo").join("config.txt").exists());
    }

    #[test]
    fn dropped_stage_leaves_nothing_behind() {
        let tmp = tempfile::tempdir().unwrap();
        let run = run_in(tmp.path());
        {
            let mut s = run.stage("demo").unwrap();
            s.write("a.csv", "x\n").unwrap();
        }
        assert_eq!(fs::read_dir(run.sub("demo")).unwrap().count(), 0);
        assert!(!tmp.path().join(MANIFEST).exists());
    }

    #[test]
    fn require_lists_missing_paths() {
        let tmp = tempfile::tempdir().unwrap();
        let run = run_in(tmp.path());
        let e = run.require(&[tmp.path().join("x.csv"), tmp.path().join("y.csv")]).unwrap_err();
        let exit = e.downcast_ref::<Exit>().unwrap();
        assert_eq!(exit.code, crate::exit::MISSING_INPUT);
        assert!(exit.msg.contains("x.csv") && exit.msg.contains("y.csv"));
    }
}
