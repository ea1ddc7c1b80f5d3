use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const METRICS_HEADER: [&str; 4] = ["level", "r2", "rmse_t_ha", "mae_t_ha"];
pub const DIGEST_FILE: &str = "outputs.sha256";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// `x` rounded to 6 significant digits, shortest form.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// Shares summing to 1, formatted like [`num`] with the rounding residual folded
/// into the largest share so the printed values still sum to 1 within 1e-6.
pub fn shares(values: &[f64]) -> Vec<String> {
    let mut rounded: Vec<f64> = values.iter().map(|&v| num(v).parse().unwrap_or(f64::NAN)).collect();
    let residual = 1.0 - rounded.iter().sum::<f64>();
    if let Some(big) = (0..rounded.len()).max_by(|&a, &b| rounded[a].total_cmp(&rounded[b])) {
        rounded[big] = num(rounded[big] + residual).parse().unwrap_or(f64::NAN);
    }
    rounded.into_iter().map(num).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory of one command; records every primary file it writes.
pub struct Run {
    pub out: PathBuf,
    files: Vec<PathBuf>,
}

impl Run {
    pub fn create(out: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        Ok(Self { out: out.to_path_buf(), files: vec![] })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Registers a file written by someone else.
    pub fn record(&mut self, name: &str) {
        self.files.push(self.path(name));
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    pub fn text(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.path(name);
        std::fs::write(&path, content).map_err(|e| CliError::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    /// Writes the resolved settings and a digest list of the primary outputs,
    /// echoing the digests to stdout.
    pub fn finish(self, resolved: &str) -> Result<(), CliError> {
        let cfg = self.path(RESOLVED_CONFIG_FILE);
        std::fs::write(&cfg, resolved).map_err(|e| CliError::io(&cfg, e))?;
        let mut lines = String::new();
        let mut files = self.files.clone();
        files.sort();
        files.dedup();
        for f in &files {
            let bytes = std::fs::read(f).map_err(|e| CliError::io(f, e))?;
            let name = f.strip_prefix(&self.out).unwrap_or(f).display().to_string();
            lines.push_str(&format!("{}  {name}\n", sha256_hex(&bytes)));
        }
        let path = self.path(DIGEST_FILE);
        std::fs::write(&path, &lines).map_err(|e| CliError::io(&path, e))?;
        print!("{lines}");
        Ok(())
    }
}
