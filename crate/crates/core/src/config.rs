//! Run configuration files and the bundled presets.

use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::ansatz::{AnsatzConfig, LcnAnsatz, Trainable};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lattice::{build_lattice, CustomBonds, Lattice, LatticeSpec, LatticeType};
use crate::trainer::{EvalConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    #[serde(rename = "type")]
    pub lattice_type: LatticeType,
    #[serde(default)]
    pub n1: usize,
    #[serde(default)]
    pub n2: usize,
    #[serde(default)]
    pub j2: f64,
    /// Custom lattices only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_sites: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bonds: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j2_bonds: Option<Vec<(usize, usize)>>,
}

impl LatticeConfig {
    pub fn to_spec(&self) -> Result<LatticeSpec> {
        if self.lattice_type != LatticeType::Custom {
            if self.n_sites.is_some() || self.bonds.is_some() || self.j2_bonds.is_some() {
                return Err(Error::Config("n_sites and bond lists are only valid for custom lattices".into()));
            }
            return Ok(LatticeSpec::new(self.lattice_type, self.n1, self.n2, self.j2));
        }
        let j1 = self
            .bonds
            .clone()
            .ok_or_else(|| Error::Config("custom lattice needs a bonds list".into()))?;
        let n_sites = match self.n_sites {
            Some(n) => n,
            None => j1.iter().flat_map(|&(a, b)| [a, b]).max().map_or(0, |m| m + 1),
        };
        Ok(LatticeSpec::custom(
            CustomBonds {
                n_sites,
                j1,
                j2: self.j2_bonds.clone().unwrap_or_default(),
            },
            self.j2,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub ansatz: AnsatzConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.ansatz.validate()?;
        self.train.validate()?;
        if !self.lattice.j2.is_finite() {
            return Err(Error::Config("j2 must be finite".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<(Lattice, LcnAnsatz)> {
        let lattice = build_lattice(&self.lattice.to_spec()?)?;
        let ansatz = LcnAnsatz::new(&lattice, self.ansatz.clone())?;
        Ok((lattice, ansatz))
    }

    /// A bundled preset by name, e.g. `square-36-j2=0`.
    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("unknown preset {name}; available: {}", names.join(", ")))
            })?;
        Self::from_toml(text)
    }
}

/// Metadata stored after the arrays of a model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    /// Step whose parameters are stored.
    pub step: usize,
    /// Smoothed training energy per site at `step`, if known.
    pub energy_per_site: Option<f64>,
    pub steps_completed: usize,
}

pub fn save_model(path: &Path, ansatz: &LcnAnsatz, meta: &CheckpointMeta) -> Result<()> {
    save_parameters(path, ansatz.parameters(), meta)
}

pub fn save_parameters(path: &Path, params: &crate::tensor::Parameters, meta: &CheckpointMeta) -> Result<()> {
    Checkpoint::from_parameters(params, serde_json::to_value(meta)?).write(path)
}

/// Rebuilds the lattice and network recorded in a checkpoint.
pub fn load_model(path: &Path) -> Result<(CheckpointMeta, Lattice, LcnAnsatz)> {
    let ck = Checkpoint::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    meta.config.validate()?;
    let (lattice, mut ansatz) = meta.config.build()?;
    ck.apply_to(ansatz.parameters_mut())?;
    Ok((meta, lattice, ansatz))
}

macro_rules! presets {
    ($($name:literal),* $(,)?) => {
        /// `(name, TOML text)` for every file under `presets/`.
        pub const PRESETS: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../../../presets/", $name, ".toml"))),)*
        ];
    };
}

presets!(
    "square-36-j2=0",
    "square-36-j2=0.5",
    "square-100-j2=0",
    "square-100-j2=0.5",
    "honeycomb-32-j2=0",
    "honeycomb-32-j2=0.2",
    "honeycomb-98-j2=0",
    "honeycomb-98-j2=0.2",
    "triangular-36-j2=0",
    "triangular-36-j2=0.08",
    "triangular-36-j2=0.125",
    "triangular-108-j2=0",
    "triangular-108-j2=0.125",
    "kagome-36-j2=0",
    "kagome-36-j2=-0.02",
    "kagome-108-j2=0",
    "two-site",
    "square-16-j2=0",
    "kagome-12-j2=0",
);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_lattice;
    use crate::trainer::DecaySchedule;

    struct Row {
        lattice: &'static str,
        size: usize,
        j2: f64,
        layers: usize,
        batch: usize,
        lr: f64,
        decay: DecaySchedule,
        clip: Option<f64>,
    }

    /// Optimisation hyperparameters as published, one entry per row.
    fn table() -> Vec<Row> {
        let steps = |v: &[usize]| DecaySchedule::Steps(v.to_vec());
        let every = DecaySchedule::Every { every: 4000 };
        let row = |lattice, size, j2, layers, batch, lr, decay, clip| Row {
            lattice,
            size,
            j2,
            layers,
            batch,
            lr,
            decay,
            clip,
        };
        vec![
            row("square", 36, 0.0, 2, 500, 1e-3, steps(&[20000, 40000, 60000]), Some(1.0)),
            row("square", 36, 0.5, 2, 500, 1e-3, steps(&[20000, 40000, 60000]), Some(1.0)),
            row("square", 100, 0.0, 3, 200, 5e-4, steps(&[8000, 12000, 16000]), Some(1.0)),
            row("square", 100, 0.5, 4, 200, 5e-4, steps(&[8000, 12000, 16000]), Some(1.0)),
            row("honeycomb", 32, 0.0, 2, 500, 1e-3, steps(&[20000, 40000, 60000]), Some(1.0)),
            row("honeycomb", 32, 0.2, 2, 500, 1e-3, steps(&[20000, 40000, 60000]), Some(1.0)),
            row("honeycomb", 98, 0.0, 4, 100, 7e-4, steps(&[8000, 12000, 16000]), Some(1.0)),
            row("honeycomb", 98, 0.2, 4, 100, 7e-4, steps(&[10000, 16000, 22000]), Some(1.0)),
            row("triangular", 36, 0.0, 2, 1000, 1e-3, every.clone(), Some(2.0)),
            row("triangular", 36, 0.08, 2, 1000, 1e-3, every.clone(), Some(2.0)),
            row("triangular", 36, 0.125, 2, 1000, 1e-3, every.clone(), Some(2.0)),
            row("triangular", 108, 0.0, 2, 200, 1e-3, every.clone(), None),
            row("triangular", 108, 0.125, 2, 200, 1e-3, every.clone(), None),
            row("kagome", 36, 0.0, 2, 1000, 1e-3, every.clone(), Some(1.0)),
            row("kagome", 36, -0.02, 2, 1000, 1e-3, every.clone(), Some(1.0)),
            row("kagome", 108, 0.0, 2, 200, 1e-3, every, Some(1.0)),
        ]
    }

    #[test]
    fn presets_match_published_hyperparameters() {
        for r in table() {
            let name = format!("{}-{}-j2={}", r.lattice, r.size, r.j2);
            let cfg = RunConfig::preset(&name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.lattice.lattice_type, LatticeType::parse(r.lattice).unwrap(), "{name}");
            assert_eq!(cfg.lattice.j2, r.j2, "{name}");
            assert_eq!(cfg.ansatz.n_layers, r.layers, "{name}");
            assert_eq!(cfg.train.batch_size, r.batch, "{name}");
            assert_eq!(cfg.train.lr, r.lr, "{name}");
            assert_eq!(cfg.train.decay_steps, r.decay, "{name}");
            assert_eq!(cfg.train.grad_clip, r.clip, "{name}");
            let late_clip = matches!(r.lattice, "triangular" | "kagome");
            assert_eq!(cfg.train.clip_after_first_decay, late_clip, "{name}");
            assert_eq!(cfg.ansatz.pre_activation, r.lattice != "triangular", "{name}");
            assert_eq!(cfg.ansatz.mask_enabled, !(r.lattice == "kagome" && r.size == 108), "{name}");
            let pv = r.lattice == "honeycomb" || (r.lattice == "kagome" && r.size == 36);
            assert_eq!(cfg.ansatz.pad_virtual, pv, "{name}");
            assert_eq!((cfg.eval.n_samples, cfg.eval.n_bins), (200_000, 100), "{name}");
            assert_eq!(cfg.train.max_steps, 30000, "{name}");
            let lat = build_lattice(&cfg.lattice.to_spec().unwrap()).unwrap();
            assert_eq!(lat.n_sites, r.size, "{name}");
        }
        assert_eq!(table().len() + 3, PRESETS.len());
    }

    #[test]
    fn every_preset_parses_and_round_trips() {
        for (name, _) in PRESETS {
            let cfg = RunConfig::preset(name).unwrap();
            let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(cfg, again, "{name}");
        }
    }

    #[test]
    fn custom_lattice_from_bond_list() {
        let cfg = RunConfig::preset("two-site").unwrap();
        let lat = build_lattice(&cfg.lattice.to_spec().unwrap()).unwrap();
        assert_eq!(lat.n_sites, 2);
        assert_eq!(lat.j1_bonds.len(), 1);
    }

    #[test]
    fn checkpoint_round_trip_restores_model_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lcn");
        let mut cfg = RunConfig::preset("triangular-36-j2=0").unwrap();
        cfg.ansatz.channels = 4;
        cfg.ansatz.mlp_hidden = 8;
        cfg.ansatz.se_reduction = 2;
        let (_, ansatz) = cfg.build().unwrap();
        let meta = CheckpointMeta {
            config: cfg,
            step: 7,
            energy_per_site: Some(-0.5),
            steps_completed: 9,
        };
        save_model(&path, &ansatz, &meta).unwrap();
        let (back, _, loaded) = load_model(&path).unwrap();
        assert_eq!(back, meta);
        assert!(!back.config.ansatz.pre_activation);
        assert_eq!(loaded.parameters(), ansatz.parameters());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let base = RunConfig::preset("square-36-j2=0").unwrap().to_toml().unwrap();
        let typo = base.replace("batch_size", "batchsize");
        assert!(matches!(RunConfig::from_toml(&typo), Err(Error::Config(_))));
        let bad = base.replace("batch_size = 500", "batch_size = 0");
        assert!(RunConfig::from_toml(&bad).is_err());
        let decay = base.replace("decay_steps = [20000, 40000, 60000]", "decay_steps = [5, 3]");
        assert_ne!(decay, base);
        assert!(RunConfig::from_toml(&decay).is_err());
        assert!(RunConfig::preset("nope").is_err());
    }
}
