//! Line-oriented `key = value` config files with `[section]` headers.
//!
//! One file describes a single experiment; a manifest file with a
//! `[matrix]` section expands into the full combination matrix sharing
//! the manifest's training and dataset settings.

use std::path::{Path, PathBuf};

use crate::codec::CodecLayout;
use crate::error::{Error, Result};
use crate::exp::{desk_spec, enumerate_matrix, DatasetSpec, ExperimentConfig, DEFAULT_LAMBDAS};
use crate::quant::QuantKind;

#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: Vec<(String, String, String)>, // (section, key, value)
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(Error::invalid(format!("line {}: unterminated section header", lineno + 1)));
                }
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            entries.push((section.clone(), key.trim().to_string(), value.trim().to_string()));
        }
        Ok(RawConfig { entries })
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(s, k, _)| s == section && k == key)
            .map(|(_, _, v)| v.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::invalid(format!("[{section}] {key}: cannot parse '{v}'"))
            }),
        }
    }

    fn list<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim().parse::<T>().map_err(|_| {
                        Error::invalid(format!("[{section}] {key}: cannot parse '{p}'"))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

fn dataset_from(raw: &RawConfig, which: &str, default: DatasetSpec) -> Result<DatasetSpec> {
    let kind = raw.get("dataset", "kind").unwrap_or("synth");
    match kind {
        "synth" => {
            let (dc, ds, dseed) = match &default {
                DatasetSpec::Synth { count, size, seed } => (*count, *size, *seed),
                _ => (16, 128, 7),
            };
            Ok(DatasetSpec::Synth {
                count: raw.parsed("dataset", &format!("{which}_count"))?.unwrap_or(dc),
                size: raw.parsed("dataset", &format!("{which}_size"))?.unwrap_or(ds),
                seed: raw.parsed("dataset", "seed")?.unwrap_or(dseed),
            })
        }
        "ppm" => {
            let dir = raw.get("dataset", &format!("{which}_dir")).ok_or_else(|| {
                Error::invalid(format!("[dataset] {which}_dir is required when kind = ppm"))
            })?;
            Ok(DatasetSpec::PpmDir(PathBuf::from(dir)))
        }
        other => Err(Error::invalid(format!("[dataset] kind must be synth or ppm, got '{other}'"))),
    }
}

fn apply_shared(raw: &RawConfig, cfg: &mut ExperimentConfig) -> Result<()> {
    if let Some(v) = raw.parsed("training", "iterations")? {
        cfg.iterations = v;
        // schedule anchors follow the run length unless overridden below
        cfg.spec_ent = desk_spec(cfg.spec_ent.kind, v);
        cfg.spec_dec = desk_spec(cfg.spec_dec.kind, v);
    }
    if let Some(v) = raw.parsed("training", "batch")? {
        cfg.batch = v;
    }
    if let Some(v) = raw.parsed("training", "patch")? {
        cfg.patch = v;
    }
    if let Some(v) = raw.list("training", "lambdas")? {
        cfg.lambdas = v;
    }
    if let Some(v) = raw.list("training", "seeds")? {
        cfg.seeds = v;
    }
    if let Some(v) = raw.parsed("training", "lr")? {
        cfg.lr = v;
    }
    if let Some(ch) = raw.list::<usize>("training", "channels")? {
        if ch.len() != 3 {
            return Err(Error::invalid("[training] channels must be three values: w0,w1,latent"));
        }
        cfg.layout = CodecLayout { width0: ch[0], width1: ch[1], latent_channels: ch[2] };
    }
    cfg.train_data = dataset_from(raw, "train", cfg.train_data.clone())?;
    cfg.test_data = dataset_from(raw, "test", cfg.test_data.clone())?;
    if let Some(dir) = raw.get("output", "dir") {
        cfg.out_dir = PathBuf::from(dir);
    }
    // per-slot hyper-parameter overrides
    for (slot, spec) in [("ent", &mut cfg.spec_ent), ("dec", &mut cfg.spec_dec)] {
        if let Some(v) = raw.parsed("experiment", &format!("{slot}_c"))? {
            spec.c = v;
        }
        if let Some(v) = raw.parsed("experiment", &format!("{slot}_t0"))? {
            spec.t0 = v;
        }
        if let Some(v) = raw.parsed("experiment", &format!("{slot}_k"))? {
            spec.k = v;
        }
    }
    Ok(())
}

/// Load a single-experiment config file.
pub fn experiment_from_file(path: &Path, out_dir: Option<PathBuf>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let raw = RawConfig::parse(&text).map_err(|e| Error::BadFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let ent = QuantKind::parse(
        raw.get("experiment", "ent")
            .ok_or_else(|| Error::invalid("[experiment] ent is required"))?,
    )?;
    let dec = QuantKind::parse(
        raw.get("experiment", "dec")
            .ok_or_else(|| Error::invalid("[experiment] dec is required"))?,
    )?;
    let mut cfg = ExperimentConfig::desk_default(ent, dec, PathBuf::from("results"));
    if let Some(name) = raw.get("experiment", "name") {
        cfg.name = name.to_string();
    }
    apply_shared(&raw, &mut cfg)?;
    if let Some(dir) = out_dir {
        cfg.out_dir = dir;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Expand a manifest (`[matrix] kinds = ...` plus shared settings) into
/// one config per matrix cell.
pub fn matrix_from_manifest(path: &Path, out_dir: Option<PathBuf>) -> Result<Vec<ExperimentConfig>> {
    let text = std::fs::read_to_string(path)?;
    let raw = RawConfig::parse(&text).map_err(|e| Error::BadFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let kinds_str = raw
        .get("matrix", "kinds")
        .ok_or_else(|| Error::invalid("[matrix] kinds is required in a manifest"))?;
    let kinds = kinds_str
        .split(',')
        .map(|s| QuantKind::parse(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    let pairs = enumerate_matrix(&kinds)?;
    let mut configs = Vec::with_capacity(pairs.len());
    for (ent, dec) in pairs {
        let mut cfg = ExperimentConfig::desk_default(ent, dec, PathBuf::from("results"));
        cfg.lambdas = DEFAULT_LAMBDAS.to_vec();
        apply_shared(&raw, &mut cfg)?;
        if let Some(dir) = &out_dir {
            cfg.out_dir = dir.clone();
        }
        cfg.validate()?;
        configs.push(cfg);
    }
    Ok(configs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_overrides() {
        let raw = RawConfig::parse(
            "[experiment]\nent = aun\ndec = ste\n\n[training]\niterations = 100 # comment\nlambdas = 0.003, 0.03\n",
        )
        .unwrap();
        assert_eq!(raw.get("experiment", "ent"), Some("aun"));
        assert_eq!(raw.get("training", "iterations"), Some("100"));
        let l: Vec<f64> = raw.list("training", "lambdas").unwrap().unwrap();
        assert_eq!(l, vec![0.003, 0.03]);
    }

    #[test]
    fn rejects_malformed_line() {
        assert!(RawConfig::parse("[a]\nnonsense\n").is_err());
    }

    #[test]
    fn manifest_expands_full_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cfg");
        std::fs::write(
            &path,
            "[matrix]\nkinds = aun,ste,uq,sga,sth,dsq,sra\n[training]\niterations = 10\n",
        )
        .unwrap();
        let configs = matrix_from_manifest(&path, None).unwrap();
        assert_eq!(configs.len(), 37);
        let sth: Vec<_> = configs
            .iter()
            .filter(|c| {
                c.spec_ent.kind == QuantKind::Sth || c.spec_dec.kind == QuantKind::Sth
            })
            .collect();
        assert_eq!(sth.len(), 1);
        assert_eq!(sth[0].spec_ent.kind, sth[0].spec_dec.kind);
    }
}
