use std::path::{Path, PathBuf};

/// Files and directories a command creates. Unless `commit` is called,
/// dropping the guard deletes them so a failed run leaves nothing behind.
#[derive(Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    /// Records a file that has been written completely.
    pub fn wrote(&mut self, p: &Path) {
        self.files.push(p.to_path_buf());
    }

    /// Creates `dir` (and parents); only directories created here are removed.
    pub fn dir(&mut self, dir: &Path) -> std::io::Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        std::fs::create_dir_all(dir)?;
        self.dirs.extend(missing);
        Ok(())
    }

    pub fn parent_of(&mut self, file: &Path) -> std::io::Result<()> {
        match file.parent() {
            Some(p) if !p.as_os_str().is_empty() => self.dir(p),
            _ => Ok(()),
        }
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        // innermost first
        for d in &self.dirs {
            let _ = std::fs::remove_dir(d);
        }
    }
}
