//! Output directory staging: files are written to a hidden sibling
//! directory and moved into place only after the whole run succeeds.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub struct Staging {
    dir: PathBuf,
    out: PathBuf,
    files: Vec<String>,
    committed: bool,
}

impl Staging {
    pub fn new(out: &Path) -> std::io::Result<Self> {
        let name = out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        fs::create_dir_all(parent)?;
        let dir = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir(&dir)?;
        Ok(Self {
            dir,
            out: out.to_path_buf(),
            files: Vec::new(),
            committed: false,
        })
    }

    /// Opens `name` for writing inside the staging directory and hands the
    /// buffered writer to `f`.
    pub fn write<T, E>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> Result<T, E>,
    ) -> Result<T, E>
    where
        E: From<std::io::Error>,
    {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        let out = f(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(out)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        self.write(name, |w| w.write_all(bytes))
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    /// Moves every staged file into the output directory.
    pub fn commit(mut self) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.out)?;
        let mut moved = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let target = self.out.join(name);
            fs::rename(self.dir.join(name), &target)?;
            moved.push(target);
        }
        self.committed = true;
        fs::remove_dir_all(&self.dir)?;
        Ok(moved)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}
