use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

/// Mutating filesystem operations used by the registry. Reads go straight to
/// `std::fs`; only writes are routed here so faults can be injected.
pub trait Storage: Send + Sync {
    /// Replace `path` with `bytes` via write-to-temp then rename.
    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> io::Result<()>;
    /// Append one newline-terminated record.
    fn append_line(&self, path: &Path, line: &str) -> io::Result<()>;
    fn create_dir_all(&self, path: &Path) -> io::Result<()>;
    fn rename(&self, from: &Path, to: &Path) -> io::Result<()>;
    fn remove_dir_all(&self, path: &Path) -> io::Result<()>;
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_sibling(path: &Path) -> PathBuf {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::SeqCst);
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("file");
    path.with_file_name(format!(".{name}.tmp-{}-{n}", std::process::id()))
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FsStorage;

impl Storage for FsStorage {
    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        let tmp = temp_sibling(path);
        let result = (|| {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    fn append_line(&self, path: &Path, line: &str) -> io::Result<()> {
        let mut f = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        let len = f.metadata()?.len();
        let mut record = String::with_capacity(line.len() + 2);
        if len > 0 {
            // A crash can leave a torn last line; never glue a record onto it.
            let mut last = [0u8; 1];
            f.seek(SeekFrom::Start(len - 1))?;
            f.read_exact(&mut last)?;
            if last[0] != b'\n' {
                record.push('\n');
            }
        }
        record.push_str(line);
        record.push('\n');
        f.write_all(record.as_bytes())?;
        f.sync_data()
    }

    fn create_dir_all(&self, path: &Path) -> io::Result<()> {
        fs::create_dir_all(path)
    }

    fn rename(&self, from: &Path, to: &Path) -> io::Result<()> {
        fs::rename(from, to)
    }

    fn remove_dir_all(&self, path: &Path) -> io::Result<()> {
        match fs::remove_dir_all(path) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            other => other,
        }
    }
}

/// Filesystem storage that fails selected mutating operations.
///
/// Cleanup (`remove_dir_all`) is never failed, matching the registry's use of
/// it only on error paths.
#[derive(Debug, Default)]
pub struct FaultyStorage {
    ops: AtomicUsize,
    fail_at: Option<usize>,
    fail_path: Option<String>,
}

impl FaultyStorage {
    /// Fail the `n`th mutating operation (0-based) and every one after it.
    pub fn fail_from(n: usize) -> Self {
        Self {
            fail_at: Some(n),
            ..Self::default()
        }
    }

    /// Fail every mutating operation whose target path contains `fragment`.
    pub fn fail_paths_containing(fragment: impl Into<String>) -> Self {
        Self {
            fail_path: Some(fragment.into()),
            ..Self::default()
        }
    }

    pub fn operations(&self) -> usize {
        self.ops.load(Ordering::SeqCst)
    }

    fn check(&self, path: &Path) -> io::Result<()> {
        let n = self.ops.fetch_add(1, Ordering::SeqCst);
        let by_count = self.fail_at.is_some_and(|at| n >= at);
        let by_path = self
            .fail_path
            .as_deref()
            .is_some_and(|frag| path.to_string_lossy().contains(frag));
        if by_count || by_path {
            return Err(io::Error::other(format!("injected fault at {}", path.display())));
        }
        Ok(())
    }
}

impl Storage for FaultyStorage {
    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        self.check(path)?;
        FsStorage.write_atomic(path, bytes)
    }

    fn append_line(&self, path: &Path, line: &str) -> io::Result<()> {
        self.check(path)?;
        FsStorage.append_line(path, line)
    }

    fn create_dir_all(&self, path: &Path) -> io::Result<()> {
        self.check(path)?;
        FsStorage.create_dir_all(path)
    }

    fn rename(&self, from: &Path, to: &Path) -> io::Result<()> {
        self.check(to)?;
        FsStorage.rename(from, to)
    }

    fn remove_dir_all(&self, path: &Path) -> io::Result<()> {
        FsStorage.remove_dir_all(path)
    }
}

/// Advisory `flock` held until drop.
#[derive(Debug)]
pub struct FileLock {
    _file: File,
}

impl FileLock {
    pub fn exclusive(path: &Path) -> io::Result<Self> {
        Self::acquire(path, false)?.ok_or_else(|| io::Error::other("lock unavailable"))
    }

    /// `Ok(None)` when another holder has the lock.
    pub fn try_exclusive(path: &Path) -> io::Result<Option<Self>> {
        Self::acquire(path, true)
    }

    #[cfg(unix)]
    fn acquire(path: &Path, nonblocking: bool) -> io::Result<Option<Self>> {
        use std::os::unix::io::AsRawFd;
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(path)?;
        let mut op = libc::LOCK_EX;
        if nonblocking {
            op |= libc::LOCK_NB;
        }
        // SAFETY: flock on a valid descriptor owned by `file`.
        let rc = unsafe { libc::flock(file.as_raw_fd(), op) };
        if rc != 0 {
            let err = io::Error::last_os_error();
            if nonblocking && err.kind() == io::ErrorKind::WouldBlock {
                return Ok(None);
            }
            return Err(err);
        }
        Ok(Some(Self { _file: file }))
    }

    #[cfg(not(unix))]
    fn acquire(path: &Path, _nonblocking: bool) -> io::Result<Option<Self>> {
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(path)?;
        Ok(Some(Self { _file: file }))
    }
}
