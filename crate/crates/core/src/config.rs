//! Run configuration: one TOML file, every field optional.
//!
//! The master `seed` is copied into every sub-config seed by
//! [`RunConfig::apply_seed`], so a run is determined by the file alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::UNetConfig;
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, FinetuneConfig};
use crate::reconstruction::StepSearchConfig;
use crate::scoring::ScoringParams;
use crate::toy::ToyConfig;
use crate::training::TrainConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ANODIFF_OUT";

/// Per-class thresholds for the public benchmark categories, keyed by their
/// folder names. They were selected for a large pretrained feature extractor
/// and only serve as defaults when a category name matches.
pub const KNOWN_DELTAS: &[(&str, f64)] = &[
    ("carpet", 0.32),
    ("grid", 0.47),
    ("leather", 0.35),
    ("tile", 0.35),
    ("wood", 0.37),
    ("bottle", 0.32),
    ("cable", 0.40),
    ("capsule", 0.40),
    ("hazelnut", 0.50),
    ("metal_nut", 0.40),
    ("pill", 0.35),
    ("screw", 0.32),
    ("toothbrush", 0.50),
    ("transistor", 0.50),
    ("zipper", 0.35),
    ("bracket_black", 0.35),
    ("bracket_brown", 0.35),
    ("bracket_white", 0.35),
    ("connector", 0.35),
    ("metal_plate", 0.25),
    ("tubes", 0.10),
    ("candle", 0.45),
    ("capsules", 0.40),
    ("cashew", 0.40),
    ("chewinggum", 0.45),
    ("fryum", 0.35),
    ("macaroni1", 0.45),
    ("macaroni2", 0.45),
    ("pcb1", 0.30),
    ("pcb2", 0.30),
    ("pcb3", 0.30),
    ("pcb4", 0.30),
    ("pcb5", 0.40),
    ("pcb6", 0.45),
    ("pcb7", 0.30),
    ("pipe_fryum", 0.45),
];

pub fn known_delta(category: &str) -> Option<f64> {
    KNOWN_DELTAS
        .iter()
        .find(|(c, _)| *c == category)
        .map(|&(_, d)| d)
}

/// Step-search settings other than the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub t_start: usize,
    pub t_min: usize,
    pub n_extra: usize,
    pub stride: usize,
    pub diff_layer: Option<usize>,
    pub diff_top_k: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = StepSearchConfig::default();
        Self {
            t_start: d.t_start,
            t_min: d.t_min,
            n_extra: d.n_extra,
            stride: d.stride,
            diff_layer: d.diff_layer,
            diff_top_k: d.diff_top_k,
        }
    }
}

impl SearchSection {
    pub fn with_delta(&self, delta: f64) -> StepSearchConfig {
        StepSearchConfig {
            t_start: self.t_start,
            t_min: self.t_min,
            delta,
            n_extra: self.n_extra,
            stride: self.stride,
            diff_layer: self.diff_layer,
            diff_top_k: self.diff_top_k,
        }
    }
}

/// How the threshold for a category is chosen, first match wins: `fixed`,
/// `per_category`, `calibrate`, the built-in table (if `use_known`), `default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaTable {
    pub default: f64,
    pub fixed: Option<f64>,
    pub per_category: BTreeMap<String, f64>,
    pub use_known: bool,
    /// Derive the threshold from training images, see
    /// [`calibrate_delta`](crate::reconstruction::calibrate_delta).
    pub calibrate: bool,
    pub calibration_images: usize,
}

impl Default for DeltaTable {
    fn default() -> Self {
        Self {
            default: 0.35,
            fixed: None,
            per_category: BTreeMap::new(),
            use_known: true,
            calibrate: false,
            calibration_images: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaChoice {
    Value { delta: f64, source: &'static str },
    Calibrate,
}

impl DeltaTable {
    pub fn resolve(&self, category: &str) -> DeltaChoice {
        if let Some(delta) = self.fixed {
            return DeltaChoice::Value {
                delta,
                source: "fixed",
            };
        }
        if let Some(&delta) = self.per_category.get(category) {
            return DeltaChoice::Value {
                delta,
                source: "per_category",
            };
        }
        if self.calibrate {
            return DeltaChoice::Calibrate;
        }
        if self.use_known {
            if let Some(delta) = known_delta(category) {
                return DeltaChoice::Value {
                    delta,
                    source: "known",
                };
            }
        }
        DeltaChoice::Value {
            delta: self.default,
            source: "default",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |d: f64| d >= 0.0;
        let all = std::iter::once(self.default)
            .chain(self.fixed)
            .chain(self.per_category.values().copied());
        for d in all {
            if !ok(d) {
                return Err(Error::Config(format!(
                    "delta must be >= 0 (inf allowed), got {d}"
                )));
            }
        }
        if self.calibrate && self.calibration_images == 0 {
            return Err(Error::Config("calibration_images must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Working resolution; images are resized to `resolution` squared.
    pub resolution: usize,
    pub dataset_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Categories to process; empty means all found.
    pub categories: Vec<String>,
    pub schedule: ScheduleParams,
    pub denoiser: UNetConfig,
    pub train: TrainConfig,
    pub extractor: ExtractorConfig,
    /// Fine-tune the extractor after denoiser training when present.
    pub finetune: Option<FinetuneConfig>,
    pub search: SearchSection,
    pub delta: DeltaTable,
    pub scoring: ScoringParams,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 64,
            dataset_root: None,
            output_dir: None,
            categories: Vec::new(),
            schedule: ScheduleParams::default(),
            denoiser: UNetConfig::default(),
            train: TrainConfig::default(),
            extractor: ExtractorConfig::default(),
            finetune: None,
            search: SearchSection::default(),
            delta: DeltaTable::default(),
            scoring: ScoringParams::default(),
            toy: ToyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| {
                let before = &text[..s.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                format!("line {line}, column {col}: ")
            });
            Error::Config(format!("{}{}", at.unwrap_or_default(), e.message().trim()))
        })?;
        let seed = cfg.seed;
        Ok(cfg.apply_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Set the master seed and every seed derived from it.
    pub fn apply_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.denoiser.init_seed = seed;
        self.extractor.init_seed = seed.wrapping_add(1);
        if let Some(f) = self.finetune.as_mut() {
            f.seed = seed.wrapping_add(2);
        }
        self.toy.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        let m = self
            .denoiser
            .size_multiple()
            .max(1 << (self.extractor.channels.len().max(1) - 1));
        if !self.resolution.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "resolution {} must be divisible by {m} for the configured networks",
                self.resolution
            )));
        }
        let schedule = self.schedule.build()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        self.search
            .with_delta(self.delta.default)
            .validate(&schedule)?;
        self.delta.validate()?;
        if self
            .scoring
            .layers
            .iter()
            .any(|&l| l >= self.extractor.channels.len())
        {
            return Err(Error::Config(
                "scoring layer beyond the extractor depth".into(),
            ));
        }
        if let Some(l) = self.search.diff_layer {
            if l >= self.extractor.channels.len() {
                return Err(Error::Config(
                    "diff_layer beyond the extractor depth".into(),
                ));
            }
        }
        Ok(())
    }

    /// The complete configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the TOML form with the path fields removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset_root = None;
        c.output_dir = None;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn search_for(&self, delta: f64) -> StepSearchConfig {
        self.search.with_delta(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_through_toml() {
        let mut c = RunConfig::default().apply_seed(9);
        c.delta.per_category.insert("stripes".into(), 0.2);
        c.delta.fixed = Some(f64::INFINITY);
        c.finetune = Some(FinetuneConfig::default());
        let c = c.apply_seed(9);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        let err = RunConfig::from_toml("[search]\ntstart = 3")
            .unwrap_err()
            .to_string();
        assert!(
            err.starts_with("config: line 2, column 1: unknown field `tstart`"),
            "{err}"
        );
        assert!(!err.contains('\n'));
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("/tmp/x".into());
        b.dataset_root = Some("/data".into());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), a.clone().apply_seed(1).hash());
    }

    #[test]
    fn delta_resolution_order() {
        let mut t = DeltaTable::default();
        assert_eq!(
            t.resolve("toothbrush"),
            DeltaChoice::Value {
                delta: 0.5,
                source: "known"
            }
        );
        assert_eq!(
            t.resolve("tubes"),
            DeltaChoice::Value {
                delta: 0.1,
                source: "known"
            }
        );
        assert_eq!(
            t.resolve("stripes"),
            DeltaChoice::Value {
                delta: 0.35,
                source: "default"
            }
        );
        t.calibrate = true;
        assert_eq!(t.resolve("carpet"), DeltaChoice::Calibrate);
        t.per_category.insert("carpet".into(), 0.1);
        assert_eq!(
            t.resolve("carpet"),
            DeltaChoice::Value {
                delta: 0.1,
                source: "per_category"
            }
        );
        t.fixed = Some(0.0);
        assert_eq!(
            t.resolve("carpet"),
            DeltaChoice::Value {
                delta: 0.0,
                source: "fixed"
            }
        );
    }

    #[test]
    fn seed_reaches_every_component() {
        let c = RunConfig::from_toml("seed = 5\n[finetune]\n").unwrap();
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.denoiser.init_seed, 5);
        assert_eq!(c.extractor.init_seed, 6);
        assert_eq!(c.finetune.unwrap().seed, 7);
    }
}
