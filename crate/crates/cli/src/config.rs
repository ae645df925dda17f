//! Run configuration: defaults, overlaid by a flat `key = value` file,
//! overlaid by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowrec::catalog::Tokenizer;
use flowrec::decode::Strategy;
use flowrec::flownet::RewardVariant;
use flowrec::policy::PolicyMode;
use flowrec::training::{Granularity, TrainConfig};

use crate::Failure;

/// Every recognised key with its default; `None` means unset.
const KEYS: &[(&str, Option<&str>)] = &[
    ("data", None),
    ("out", None),
    ("tokenizer", None),
    ("lambda", Some("0.005")),
    ("reward_variant", Some("div")),
    ("granularity", Some("1")),
    ("lr", Some("0.1")),
    ("momentum", Some("0")),
    ("batch_size", Some("32")),
    ("max_epochs", Some("7")),
    ("patience", Some("2")),
    ("max_steps", None),
    ("samples", Some("1")),
    ("seed", Some("0")),
    ("sft_weight", Some("1")),
    ("sft_only", Some("false")),
    ("subtb_only", Some("false")),
    ("history_free", Some("false")),
    ("subtb_mean", Some("false")),
    ("mode", Some("contextual")),
    ("dim", Some("16")),
    ("pref_alpha", Some("1")),
    ("pref_scores", None),
    ("frequency_floor", Some("0")),
    ("eval_k", Some("5")),
    ("groups", Some("5")),
    ("k", Some("5")),
    ("fair_k", Some("10")),
    ("temperature", Some("1")),
    ("strategy", Some("topk")),
    ("decode_seed", Some("0")),
    ("split", Some("test")),
];

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Raw settings before typing.
#[derive(Debug, Clone, Default)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn defaults() -> Self {
        Settings(
            KEYS.iter()
                .filter_map(|(k, v)| v.map(|v| (k.to_string(), v.to_string())))
                .collect(),
        )
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), Failure> {
        let key = normalize_key(key);
        if !known(&key) {
            return Err(Failure::usage(format!("unknown configuration key {key:?}")));
        }
        self.0.insert(key, value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Overlays a `key = value` file; blank lines and `#` comments are skipped.
    pub fn load_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Failure::usage(format!("{}:{}: expected key = value", path.display(), n + 1))
            })?;
            self.set(key, value.trim())?;
        }
        Ok(())
    }
}

fn parse<T: FromStr>(s: &Settings, key: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    let raw = s
        .get(key)
        .ok_or_else(|| Failure::usage(format!("missing required setting {key:?}")))?;
    raw.parse()
        .map_err(|e| Failure::usage(format!("bad value {raw:?} for {key}: {e}")))
}

fn parse_opt<T: FromStr>(s: &Settings, key: &str) -> Result<Option<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    match s.get(key) {
        None | Some("") => Ok(None),
        Some(_) => parse(s, key).map(Some),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub tokenizer: Option<Tokenizer>,
    pub train: TrainConfig,
    pub subtb_only: bool,
    pub mode: PolicyMode,
    pub dim: usize,
    pub pref_alpha: f64,
    pub pref_scores: Option<PathBuf>,
    pub frequency_floor: f64,
    pub groups: usize,
    pub k: usize,
    pub fair_k: usize,
    pub temperature: f64,
    pub strategy: Strategy,
    pub decode_seed: u64,
    pub split: flowrec::catalog::Split,
}

fn parse_split(s: &Settings) -> Result<flowrec::catalog::Split, Failure> {
    use flowrec::catalog::Split;
    match s.get("split").unwrap_or("test") {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(Failure::usage(format!("unknown split {other:?}"))),
    }
}

fn split_name(split: flowrec::catalog::Split) -> &'static str {
    use flowrec::catalog::Split;
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

fn variant_name(v: RewardVariant) -> &'static str {
    match v {
        RewardVariant::Plain => "plain",
        RewardVariant::DivPref => "div",
        RewardVariant::MulPref => "mul",
    }
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self, Failure> {
        let sft_only: bool = parse(s, "sft_only")?;
        let subtb_only: bool = parse(s, "subtb_only")?;
        if sft_only && subtb_only {
            return Err(Failure::usage("--sft-only and --subtb-only are mutually exclusive"));
        }
        let mut sft_weight: f64 = parse(s, "sft_weight")?;
        let mut lambda: f64 = parse(s, "lambda")?;
        if subtb_only {
            sft_weight = 0.0;
            if lambda == 0.0 {
                return Err(Failure::usage("--subtb-only needs a positive lambda"));
            }
        }
        if sft_only {
            lambda = 0.0;
        }
        let train = TrainConfig {
            lambda,
            reward_variant: parse(s, "reward_variant")?,
            granularity: parse::<Granularity>(s, "granularity")?,
            learning_rate: parse(s, "lr")?,
            momentum: parse(s, "momentum")?,
            batch_size: parse(s, "batch_size")?,
            max_epochs: parse(s, "max_epochs")?,
            patience: parse(s, "patience")?,
            max_steps: parse_opt(s, "max_steps")?,
            samples_per_example: parse(s, "samples")?,
            seed: parse(s, "seed")?,
            sft_weight,
            sft_only,
            history_free: parse(s, "history_free")?,
            subtb_mean: parse(s, "subtb_mean")?,
            eval_k: parse(s, "eval_k")?,
        };
        train.validate().map_err(Failure::from)?;
        let config = RunConfig {
            data: parse_opt::<PathBuf>(s, "data")?.unwrap_or_default(),
            out: parse_opt::<PathBuf>(s, "out")?.unwrap_or_default(),
            tokenizer: parse_opt(s, "tokenizer")?,
            train,
            subtb_only,
            mode: parse(s, "mode")?,
            dim: parse(s, "dim")?,
            pref_alpha: parse(s, "pref_alpha")?,
            pref_scores: parse_opt(s, "pref_scores")?,
            frequency_floor: parse(s, "frequency_floor")?,
            groups: parse(s, "groups")?,
            k: parse(s, "k")?,
            fair_k: parse(s, "fair_k")?,
            temperature: parse(s, "temperature")?,
            strategy: parse(s, "strategy")?,
            decode_seed: parse(s, "decode_seed")?,
            split: parse_split(s)?,
        };
        if config.mode == PolicyMode::Contextual && config.dim == 0 {
            return Err(Failure::usage("contextual mode needs dim >= 1"));
        }
        if config.k == 0 || config.fair_k == 0 || config.groups == 0 {
            return Err(Failure::usage("k, fair_k and groups must be at least 1"));
        }
        if !config.temperature.is_finite() || config.temperature <= 0.0 {
            return Err(Failure::usage("temperature must be positive"));
        }
        if !config.frequency_floor.is_finite() || config.frequency_floor < 0.0 {
            return Err(Failure::usage("frequency_floor must be non-negative"));
        }
        Ok(config)
    }

    /// The resolved configuration as a `key = value` file that
    /// [`Settings::load_file`] reads back to the same run.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("data", self.data.display().to_string());
        put("out", self.out.display().to_string());
        if let Some(tok) = self.tokenizer {
            put("tokenizer", tok.to_string());
        }
        put("lambda", t.lambda.to_string());
        put("reward_variant", variant_name(t.reward_variant).to_string());
        put("granularity", t.granularity.to_string());
        put("lr", t.learning_rate.to_string());
        put("momentum", t.momentum.to_string());
        put("batch_size", t.batch_size.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("patience", t.patience.to_string());
        if let Some(m) = t.max_steps {
            put("max_steps", m.to_string());
        }
        put("samples", t.samples_per_example.to_string());
        put("seed", t.seed.to_string());
        put("sft_weight", t.sft_weight.to_string());
        put("sft_only", t.sft_only.to_string());
        put("subtb_only", self.subtb_only.to_string());
        put("history_free", t.history_free.to_string());
        put("subtb_mean", t.subtb_mean.to_string());
        put("eval_k", t.eval_k.to_string());
        put("mode", self.mode.to_string());
        put("dim", self.dim.to_string());
        put("pref_alpha", self.pref_alpha.to_string());
        if let Some(p) = &self.pref_scores {
            put("pref_scores", p.display().to_string());
        }
        put("frequency_floor", self.frequency_floor.to_string());
        put("groups", self.groups.to_string());
        put("k", self.k.to_string());
        put("fair_k", self.fair_k.to_string());
        put("temperature", self.temperature.to_string());
        put(
            "strategy",
            match self.strategy {
                Strategy::Topk => "topk",
                Strategy::Sample => "sample",
            }
            .to_string(),
        );
        put("decode_seed", self.decode_seed.to_string());
        put("split", split_name(self.split).to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::from_settings(&Settings::defaults()).unwrap();
        assert_eq!(c.train.lambda, 0.005);
        assert_eq!(c.train.reward_variant, RewardVariant::DivPref);
        assert_eq!(c.k, 5);
        assert_eq!(c.fair_k, 10);
    }

    #[test]
    fn text_round_trip() {
        let mut s = Settings::defaults();
        s.set("lambda", "0.0005").unwrap();
        s.set("granularity", "whole").unwrap();
        s.set("max-steps", "40").unwrap();
        s.set("data", "d").unwrap();
        let c = RunConfig::from_settings(&s).unwrap();
        let dir = std::env::temp_dir().join(format!("flowrec-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.txt");
        std::fs::write(&path, c.to_text()).unwrap();
        let mut again = Settings::defaults();
        again.load_file(&path).unwrap();
        assert_eq!(RunConfig::from_settings(&again).unwrap(), c);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn conflicting_modes_are_rejected() {
        let mut s = Settings::defaults();
        s.set("sft_only", "true").unwrap();
        s.set("subtb_only", "true").unwrap();
        assert!(RunConfig::from_settings(&s).is_err());
        assert!(Settings::defaults().set("nonsense", "1").is_err());
    }
}
