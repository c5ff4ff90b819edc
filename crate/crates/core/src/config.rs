//! Run configuration: one flat table of hyperparameters, loadable from TOML
//! or JSON, with `key=value` overrides.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{FoldSpec, Granularity};
use crate::error::{Error, Result};
use crate::objectives::{Alpha, Mixing, ObjectiveParams};

/// Feature flags. Each one implies every flag before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    ContrastiveOnly,
    AddOrdinal,
    AddGating,
    AddLambdas,
    AddMetagradnorm,
}

impl Flag {
    pub const LADDER: [Flag; 5] = [
        Flag::ContrastiveOnly,
        Flag::AddOrdinal,
        Flag::AddGating,
        Flag::AddLambdas,
        Flag::AddMetagradnorm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Flag::ContrastiveOnly => "contrastive_only",
            Flag::AddOrdinal => "add_ordinal",
            Flag::AddGating => "add_gating",
            Flag::AddLambdas => "add_lambdas",
            Flag::AddMetagradnorm => "add_metagradnorm",
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Flag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Flag::LADDER
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown flag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    pub granularity: Granularity,
    pub batch_size: usize,
    pub k_max: usize,
    pub m_max: usize,
    pub tau: f64,
    pub margin_m0: f64,
    pub t_ctr: f64,
    pub t_ord: f64,
    pub lambda_base: f64,
    pub lambda_ord: f64,
    pub gamma: f64,
    pub beta: f64,
    pub eta_theta: f64,
    pub eta_ft: f64,
    pub eta_meta: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub patience: usize,
    pub rank: usize,
    pub lora_alpha: f64,
    pub flags: Vec<Flag>,
    pub fold_spec: FoldSpec,
}

impl Default for TrainingConfig {
    /// Decoder-style settings with every flag on.
    fn default() -> Self {
        TrainingConfig {
            seed: 155,
            granularity: Granularity::Aspect,
            batch_size: 5,
            k_max: 3,
            m_max: 6,
            tau: 0.07,
            margin_m0: 0.05,
            t_ctr: 13.0,
            t_ord: 1.0,
            lambda_base: 1.0,
            lambda_ord: 2.5,
            gamma: 0.5,
            beta: 0.01,
            eta_theta: 1e-4,
            eta_ft: 3e-5,
            eta_meta: 1e-3,
            stage1_epochs: 2,
            stage2_epochs: 6,
            patience: 3,
            rank: 8,
            lora_alpha: 16.0,
            flags: Flag::LADDER.to_vec(),
            fold_spec: FoldSpec::default(),
        }
    }
}

impl TrainingConfig {
    /// Settings sized for synthetic corpora of a few hundred claims: larger
    /// step sizes and more epochs than the defaults, same structure.
    pub fn desk() -> Self {
        TrainingConfig {
            k_max: 3,
            m_max: 6,
            tau: 0.1,
            margin_m0: 0.1,
            eta_theta: 1e-2,
            eta_ft: 1e-2,
            eta_meta: 1e-2,
            stage1_epochs: 10,
            stage2_epochs: 30,
            patience: 5,
            rank: 8,
            lora_alpha: 8.0,
            ..Self::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        let cfg: TrainingConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Applies `key=value` overrides. Values are parsed as TOML, so strings
    /// may be bare (`granularity=category`) and lists use brackets
    /// (`flags=["contrastive_only"]`). Nested fold settings are addressed as
    /// `fold_spec.n_folds=4`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut table = toml::Table::try_from(&*self).expect("config is a table");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one part");
            let mut cur = &mut table;
            for p in parents {
                cur = cur
                    .get_mut(*p)
                    .and_then(|v| v.as_table_mut())
                    .ok_or_else(|| Error::Config(format!("unknown config table {p:?}")))?;
            }
            if !cur.contains_key(*last) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            let old = &cur[*last];
            // integers given for float keys and vice versa
            let value = match (old, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            cur.insert((*last).to_string(), value);
        }
        let cfg: TrainingConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("override: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("margin_m0", self.margin_m0),
            ("t_ctr", self.t_ctr),
            ("t_ord", self.t_ord),
            ("lambda_base", self.lambda_base),
            ("lambda_ord", self.lambda_ord),
            ("gamma", self.gamma),
            ("eta_theta", self.eta_theta),
            ("eta_ft", self.eta_ft),
            ("lora_alpha", self.lora_alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be > 0")));
            }
        }
        for (name, v) in [("beta", self.beta), ("eta_meta", self.eta_meta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be >= 0")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("k_max", self.k_max),
            ("m_max", self.m_max),
            ("rank", self.rank),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        let set: BTreeSet<Flag> = self.flags.iter().copied().collect();
        if set.len() != self.flags.len() {
            return Err(Error::Config("duplicate flag".into()));
        }
        if set.iter().copied().ne(Flag::LADDER[..set.len()].iter().copied()) {
            return Err(Error::Config(format!(
                "flags {:?} skip a step; each flag requires all of {:?} before it",
                self.flags.iter().map(|f| f.as_str()).collect::<Vec<_>>(),
                Flag::LADDER.iter().map(|f| f.as_str()).collect::<Vec<_>>(),
            )));
        }
        Ok(())
    }

    /// Number of ladder steps enabled, 0 for the plain fine-tuning baseline.
    pub fn level(&self) -> usize {
        self.flags.len()
    }

    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }

    /// Whether stage 1 runs at all.
    pub fn structured(&self) -> bool {
        self.level() > 0
    }

    pub fn mixing(&self) -> Mixing {
        if self.has(Flag::AddGating) {
            Mixing::Gated
        } else if self.has(Flag::AddOrdinal) {
            Mixing::Even
        } else {
            Mixing::ContrastiveOnly
        }
    }

    pub fn objective_params(&self) -> ObjectiveParams {
        ObjectiveParams {
            tau: self.tau,
            margin_m0: self.margin_m0,
        }
    }

    /// Starting meta-parameters. Without the lambda flag both weights are 1.
    pub fn initial_alpha(&self) -> Alpha {
        let (lambda_base, lambda_ord) = if self.has(Flag::AddLambdas) {
            (self.lambda_base, self.lambda_ord)
        } else {
            (1.0, 1.0)
        };
        Alpha {
            lambda_base,
            lambda_ord,
            t_ctr: self.t_ctr,
            t_ord: self.t_ord,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // parse as the right-hand side of a one-line document
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    /// Adam with decoupled weight decay.
    AdamW {
        weight_decay: f64,
    },
}

/// Knobs that are not hyperparameters of the method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Update rule for both stages.
    pub optimizer: OptimizerKind,
    /// Meta-step every this many batches.
    pub meta_interval: usize,
    /// Treat gates as constants inside the balancer's gradient norms.
    pub gate_stop_gradient: bool,
    /// Share of train ids held out for early stopping and selection.
    pub val_fraction: f64,
    /// Probability above which a tuple is predicted.
    pub threshold: f64,
    /// Start stage 2 from a fresh adapter instead of the stage-1 one.
    pub reinit_adapter_stage2: bool,
    /// Log one record per batch as well as per epoch.
    pub log_batches: bool,
    /// Build pair sets on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            optimizer: OptimizerKind::AdamW { weight_decay: 0.01 },
            meta_interval: 1,
            gate_stop_gradient: false,
            val_fraction: 0.1,
            threshold: 0.5,
            reinit_adapter_stage2: false,
            log_batches: false,
            parallel: true,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.meta_interval == 0 {
            return Err(Error::Config("meta_interval must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} not in (0, 1)", self.val_fraction)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} not in (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = TrainingConfig::default();
        let back: TrainingConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        back.validate().unwrap();
    }

    #[test]
    fn keys_are_exactly_the_documented_set() {
        let table = toml::Table::try_from(TrainingConfig::default()).unwrap();
        let keys: Vec<&str> = table.keys().map(String::as_str).collect();
        let mut expected = vec![
            "seed",
            "granularity",
            "batch_size",
            "k_max",
            "m_max",
            "tau",
            "margin_m0",
            "t_ctr",
            "t_ord",
            "lambda_base",
            "lambda_ord",
            "gamma",
            "beta",
            "eta_theta",
            "eta_ft",
            "eta_meta",
            "stage1_epochs",
            "stage2_epochs",
            "patience",
            "rank",
            "lora_alpha",
            "flags",
            "fold_spec",
        ];
        expected.sort_unstable();
        let mut keys = keys;
        keys.sort_unstable();
        assert_eq!(keys, expected);
    }

    #[test]
    fn unknown_key_rejected() {
        let text = TrainingConfig::default().to_toml() + "bogus = 1\n";
        assert!(matches!(toml::from_str::<TrainingConfig>(&text), Err(_)));
    }

    #[test]
    fn flag_ladder() {
        let mut cfg = TrainingConfig::default();
        for n in 0..=5 {
            cfg.flags = Flag::LADDER[..n].to_vec();
            cfg.validate().unwrap();
            assert_eq!(cfg.level(), n);
        }
        cfg.flags = vec![Flag::ContrastiveOnly, Flag::AddGating];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.flags = vec![Flag::AddOrdinal];
        assert!(cfg.validate().is_err());
        // order in the file does not matter
        cfg.flags = vec![Flag::AddOrdinal, Flag::ContrastiveOnly];
        cfg.validate().unwrap();
    }

    #[test]
    fn mixing_and_alpha_follow_flags() {
        let mut cfg = TrainingConfig::default();
        cfg.flags = Flag::LADDER[..1].to_vec();
        assert_eq!(cfg.mixing(), Mixing::ContrastiveOnly);
        assert_eq!(cfg.initial_alpha().lambda_base, 1.0);
        cfg.flags = Flag::LADDER[..2].to_vec();
        assert_eq!(cfg.mixing(), Mixing::Even);
        cfg.flags = Flag::LADDER[..3].to_vec();
        assert_eq!(cfg.mixing(), Mixing::Gated);
        assert_eq!(cfg.initial_alpha().lambda_ord, 1.0);
        cfg.flags = Flag::LADDER[..4].to_vec();
        assert_eq!(cfg.initial_alpha().lambda_ord, 2.5);
    }

    #[test]
    fn overrides() {
        let mut cfg = TrainingConfig::default();
        cfg.apply_overrides(&[
            "granularity=category",
            "tau=1",
            "seed = 7",
            "flags=[\"contrastive_only\"]",
            "fold_spec.n_folds=4",
        ])
        .unwrap();
        assert_eq!(cfg.granularity, Granularity::Category);
        assert_eq!(cfg.tau, 1.0);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.flags, vec![Flag::ContrastiveOnly]);
        assert_eq!(cfg.fold_spec.n_folds, 4);
        assert!(cfg.apply_overrides(&["nope=1"]).is_err());
        assert!(cfg.apply_overrides(&["tau=-1"]).is_err());
        assert!(cfg.apply_overrides(&["tau"]).is_err());
        assert!(cfg.apply_overrides(&["granularity=sideways"]).is_err());
    }

    #[test]
    fn json_config_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, serde_json::to_string(&TrainingConfig::desk()).unwrap()).unwrap();
        assert_eq!(TrainingConfig::load(&path).unwrap(), TrainingConfig::desk());
    }
}
