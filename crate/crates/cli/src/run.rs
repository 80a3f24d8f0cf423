//! Config resolution, run directories and run summaries.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use ttm_core::{RunConfig, Variant};

/// Bad user input. Maps to exit code 1, like a config validation error.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub const OUTPUT_ENV: &str = "TTM_OUTPUT";

pub const GIT_DESCRIBE: &str = env!("TTM_GIT_DESCRIBE");

/// Preset, then the file, then `--set` overrides, then `--seed`.
pub fn resolve_config(preset: &str, file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let text = match file {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| invalid(format!("cannot read config {}: {e}", p.display())))?),
        None => None,
    };
    let mut cfg = RunConfig::load(preset, text.as_deref())?;
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Accepts `full`, `audio-only`, `baseline` or a `+`-joined subset of
/// `vstr`, `psa`, `vmma` and `audio-only` (the form printed by
/// [`Variant::name`]).
pub fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "full" => return Ok(Variant::FULL),
        "baseline" => return Ok(Variant::toggles(false, false, false)),
        _ => {}
    }
    let mut v = Variant::toggles(false, false, false);
    for part in s.split('+') {
        match part {
            "vstr" => v.vstr = true,
            "psa" => v.psa = true,
            "vmma" => v.vmma = true,
            "audio-only" => v.streams = ttm_core::model::StreamSet::AudioOnly,
            _ => return Err(invalid(format!("unknown variant component `{part}` in `{s}`"))),
        }
    }
    Ok(v)
}

pub struct RunDir {
    pub path: PathBuf,
    pub hash: String,
}

impl RunDir {
    /// Creates `<root>/<UTC timestamp>-<config hash>` and writes the
    /// effective config into it. Root: `--out`, then `paths.output`, then
    /// `$TTM_OUTPUT`, then `runs`.
    pub fn create(cfg: &RunConfig, out: Option<&Path>) -> Result<Self> {
        let root = out
            .map(Path::to_path_buf)
            .or_else(|| cfg.paths.output.clone())
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        fs::create_dir_all(&root).with_context(|| format!("creating output root {}", root.display()))?;
        let hash = cfg.hash()?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{stamp}-{hash}");
        let mut n = 0;
        let path = loop {
            let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
            let p = root.join(name);
            match fs::create_dir(&p) {
                Ok(()) => break p,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(e).with_context(|| format!("creating run directory {}", p.display())),
            }
        };
        fs::write(path.join("config.toml"), cfg.to_toml()?)?;
        println!("run_dir={}", path.display());
        Ok(Self { path, hash })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// `summary.json`: common fields plus `extra`.
    pub fn summary(&self, command: &str, cfg: &RunConfig, extra: Value) -> Result<()> {
        let mut s = json!({
            "command": command,
            "config_hash": self.hash,
            "seed": cfg.seed,
            "seeds": cfg.eval.seeds,
            "git_describe": GIT_DESCRIBE,
            "created": chrono::Utc::now().to_rfc3339(),
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut s, extra) {
            m.extend(e);
        }
        self.write("summary.json", serde_json::to_string_pretty(&s)? + "\n")?;
        Ok(())
    }
}

/// A finished training run read back from disk.
pub struct SavedRun {
    pub cfg: RunConfig,
    pub variant: Variant,
    pub checkpoint: PathBuf,
}

pub fn load_run(dir: &Path) -> Result<SavedRun> {
    let read = |name: &str| {
        fs::read_to_string(dir.join(name)).map_err(|e| invalid(format!("{}: {e}", dir.join(name).display())))
    };
    let cfg = RunConfig::load("default", Some(&read("config.toml")?))?;
    cfg.validate()?;
    let summary: Value = serde_json::from_str(&read("summary.json")?).map_err(|e| invalid(format!("summary.json: {e}")))?;
    let variant = summary
        .get("variant")
        .cloned()
        .ok_or_else(|| invalid(format!("{} is not a training run", dir.display())))?;
    let variant: Variant = serde_json::from_value(variant).map_err(|e| invalid(format!("summary.json variant: {e}")))?;
    let checkpoint = dir.join(CHECKPOINT);
    if !checkpoint.is_file() {
        return Err(invalid(format!("missing checkpoint {}", checkpoint.display())));
    }
    Ok(SavedRun { cfg, variant, checkpoint })
}

pub const CHECKPOINT: &str = "model.ckpt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
