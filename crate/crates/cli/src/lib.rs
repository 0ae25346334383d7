//! Subcommands of the `braunet` binary.

pub mod attention;
pub mod gradcheck;
pub mod report;
pub mod run;
pub mod scaling;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use brau_net::{BrauError, Config};
use brau_tensor::TensorError;
use serde_json::Value;
use thiserror::Error;

pub const CONFIG_ECHO: &str = "config.cfg";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Brau(#[from] BrauError),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Brau(e.into())
    }
}

impl CliError {
    /// 1 gradient check, 2 config or usage, 3 data and files, 4 numerical blow-up.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::GradCheck(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Brau(e) => match e {
                BrauError::Data { .. } | BrauError::Io { .. } | BrauError::Checkpoint(_) => 3,
                BrauError::NonFiniteLoss { .. } | BrauError::Tensor(TensorError::NonFinite(_)) => 4,
                _ => 2,
            },
        }
    }
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Brau(BrauError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Config file (or defaults) with `key=value` overrides applied last.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<Config> {
    let mut text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| io_err(p, e))?,
        None => String::new(),
    };
    text.push('\n');
    text += &overrides(sets)?;
    Ok(Config::parse(&text)?)
}

/// `--set` values as config lines.
pub(crate) fn overrides(sets: &[String]) -> Result<String> {
    let mut text = String::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{s}`")))?;
        text += &format!("{} = {}\n", k.trim(), v.trim());
    }
    Ok(text)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Writes the effective config next to a command's outputs.
pub fn echo_config(dir: &Path, cfg: &Config) -> Result<()> {
    write_file(&dir.join(CONFIG_ECHO), cfg.to_text())
}

/// Appends one JSON object per line.
pub struct JsonLines {
    path: std::path::PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, v: &Value) -> Result<()> {
        writeln!(self.out, "{v}").map_err(|e| io_err(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| io_err(&self.path, e))
    }
}

/// Sizes the global pool once; 0 keeps rayon's default.
pub fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("--threads: {e}")))
}
