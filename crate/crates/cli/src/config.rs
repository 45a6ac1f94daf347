//! Loading run configurations from TOML files or presets.
//!
//! Parse and validation failures are reported as `path:line: message`.

use std::fmt;
use std::path::{Path, PathBuf};

use chstab::presets::{preset, Profile};
use chstab::run::RunConfig;
use chstab::Error;

#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    /// The TOML text the configuration came from, stored with every run.
    pub text: String,
    /// Short name used for default output directories.
    pub name: String,
}

#[derive(Debug)]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.origin, l, self.message),
            None => write!(f, "{}: {}", self.origin, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn to_toml(config: &RunConfig) -> String {
    toml::to_string_pretty(config).expect("run configurations serialize to TOML")
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key` (dotted, e.g. `scheme.dt`) in `text`, if it can be found.
pub fn locate(text: &str, key: &str) -> Option<usize> {
    let (table, leaf) = match key.rsplit_once('.') {
        Some((t, l)) => (Some(t), l),
        None => (None, key),
    };
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(h.trim().to_string());
            continue;
        }
        let Some((k, _)) = line.split_once('=') else {
            continue;
        };
        if k.trim() != leaf {
            continue;
        }
        match table {
            Some(t) if current.as_deref() == Some(t) => return Some(i + 1),
            // bare names also match inside any table
            None => return Some(i + 1),
            _ => {}
        }
    }
    None
}

/// Best guess of the offending key in a validation error.
fn error_key(e: &Error) -> Option<String> {
    match e {
        Error::Config { key, .. } => Some(key.clone()),
        Error::InvalidParameter(msg) | Error::InvalidGrid(msg) => {
            msg.split_whitespace().next().map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric() && c != '_')
                    .to_string()
            })
        }
        _ => None,
    }
}

pub fn parse(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError {
        origin: origin.into(),
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    config.validate().map_err(|e| ConfigError {
        origin: origin.into(),
        line: error_key(&e).and_then(|k| locate(text, &k)),
        message: e.to_string(),
    })?;
    Ok(config)
}

pub fn load(
    config: Option<&Path>,
    preset_name: Option<&str>,
    paper_scale: bool,
) -> anyhow::Result<Loaded> {
    match (config, preset_name) {
        (Some(_), Some(_)) => anyhow::bail!("give either --config or --preset, not both"),
        (Some(path), None) => {
            if paper_scale {
                anyhow::bail!(
                    "--paper-scale applies to presets; set grid and scheme in the file instead"
                );
            }
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
            let config = parse(&text, &path.display().to_string())?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            Ok(Loaded { config, text, name })
        }
        (None, Some(name)) => {
            let profile = if paper_scale {
                Profile::PaperScale
            } else {
                Profile::Desk
            };
            let config = preset(name, profile)?;
            let text = to_toml(&config);
            Ok(Loaded {
                config,
                text,
                name: name.to_string(),
            })
        }
        (None, None) => anyhow::bail!("give --config PATH or --preset NAME"),
    }
}

/// `--out`, else the `output` key, else `runs/<name>`.
pub fn output_dir(out: Option<&Path>, loaded: &Loaded) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| loaded.config.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(&loaded.name))
}
