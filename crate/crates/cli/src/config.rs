//! Run configuration: an optional JSON file, overridden by command-line
//! flags, validated before any computation.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use cfens_core::data::{Mode, SyntheticSpec};
use cfens_core::tune::GridSpec;
use cfens_core::{DetectionRule, Error, HyperParams, Method, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Zscore,
    Recon,
    Ext,
}

/// Settings of the reconstruction detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconSettings {
    pub components: usize,
    pub quantile: f64,
    pub gain: f64,
}

impl Default for ReconSettings {
    fn default() -> Self {
        Self {
            components: 3,
            quantile: 0.99,
            gain: 5.0,
        }
    }
}

/// The JSON configuration file. Every key is optional; unknown keys are
/// rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub method: Option<MethodList>,
    pub detector: Option<DetectorKind>,
    pub ext_command: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub theta: Option<f64>,
    #[serde(rename = "S")]
    pub suspect_len: Option<usize>,
    pub context: Option<usize>,
    #[serde(rename = "N")]
    pub samples: Option<usize>,
    pub iterations: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    #[serde(rename = "lambdaT")]
    pub lambda_t: Option<f64>,
    pub sigma_max: Option<f64>,
    #[serde(rename = "lr")]
    pub learning_rate: Option<f64>,
    pub margin_c: Option<f64>,
    pub mode: Option<Mode>,
    pub ar_order: Option<usize>,
    pub recon: Option<ReconSettings>,
    pub grid: Option<GridSpec>,
    pub synth: Option<SyntheticSpec>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::commands::read_text(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A comma-separated method selection; `all` expands to every method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodList(pub Vec<Method>);

impl FromStr for MethodList {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(Method::ALL);
            } else {
                out.push(part.parse()?);
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidParameter {
                name: "method",
                reason: "no method selected".into(),
            });
        }
        let mut seen = Vec::new();
        out.retain(|m| {
            let fresh = !seen.contains(m);
            seen.push(*m);
            fresh
        });
        Ok(MethodList(out))
    }
}

impl TryFrom<String> for MethodList {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodList> for String {
    fn from(m: MethodList) -> String {
        m.0.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",")
    }
}

/// Flags shared by every computing subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON configuration file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input series CSV
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Ground-truth sidecar JSON (defaults to `<input>.truth.json` when present)
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// dpe|ice|sparse-dpe|sparse-ice|fs|naive|all, comma-separated
    #[arg(long, alias = "methods")]
    pub method: Option<MethodList>,
    #[arg(long, value_enum)]
    pub detector: Option<DetectorKind>,
    /// Command line of the external scorer (for --detector ext)
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    pub ext_command: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long = "S")]
    pub suspect_len: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long = "N")]
    pub samples: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long = "lambdaT")]
    pub lambda_t: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub margin_c: Option<f64>,
    /// tp|fp|all
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Order of the autoregressive forecaster
    #[arg(long)]
    pub ar_order: Option<usize>,
}

/// Fully resolved configuration, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: PathBuf,
    pub methods: Vec<Method>,
    pub detector: DetectorKind,
    pub ext_command: Option<Vec<String>>,
    pub seed: u64,
    pub theta: f64,
    #[serde(rename = "S")]
    pub suspect_len: usize,
    pub context: usize,
    #[serde(rename = "N")]
    pub samples: usize,
    pub mode: Mode,
    pub ar_order: usize,
    pub recon: ReconSettings,
    /// Explicit hyperparameter overrides, applied on top of each method's
    /// defaults.
    pub overrides: Overrides,
    pub grid: GridSpec,
    pub synth: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub iterations: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    #[serde(rename = "lambdaT")]
    pub lambda_t: Option<f64>,
    pub sigma_max: Option<f64>,
    pub learning_rate: Option<f64>,
    pub margin_c: Option<f64>,
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let pick = |flag: Option<f64>, file: Option<f64>| flag.or(file);
        let cfg = RunConfig {
            input: args.input.clone().or(file.input),
            truth: args.truth.clone().or(file.truth),
            out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out")),
            methods: args
                .method
                .clone()
                .or(file.method)
                .map(|m| m.0)
                .unwrap_or_else(|| vec![Method::Ice]),
            detector: args.detector.or(file.detector).unwrap_or(DetectorKind::Zscore),
            ext_command: args.ext_command.clone().or(file.ext_command),
            seed: args.seed.or(file.seed).unwrap_or(0),
            theta: pick(args.theta, file.theta).unwrap_or(DetectionRule::default().theta()),
            suspect_len: args.suspect_len.or(file.suspect_len).unwrap_or(10),
            context: args.context.or(file.context).unwrap_or(115),
            samples: args.samples.or(file.samples).unwrap_or(100),
            mode: args.mode.or(file.mode).unwrap_or(Mode::Tp),
            ar_order: args.ar_order.or(file.ar_order).unwrap_or(5),
            recon: file.recon.unwrap_or_default(),
            overrides: Overrides {
                iterations: args.iterations.or(file.iterations),
                lambda1: pick(args.lambda1, file.lambda1),
                lambda2: pick(args.lambda2, file.lambda2),
                lambda_t: pick(args.lambda_t, file.lambda_t),
                sigma_max: pick(args.sigma_max, file.sigma_max),
                learning_rate: pick(args.learning_rate, file.learning_rate),
                margin_c: pick(args.margin_c, file.margin_c),
            },
            grid: file.grid.unwrap_or_default(),
            synth: file.synth,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.rule()?;
        let invalid = |name: &'static str, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.into(),
            })
        };
        if self.suspect_len == 0 {
            return invalid("S", "must be >= 1");
        }
        if self.context == 0 {
            return invalid("context", "must be >= 1");
        }
        if self.samples == 0 {
            return invalid("N", "must be >= 1");
        }
        if self.ar_order == 0 {
            return invalid("ar_order", "must be >= 1");
        }
        if self.detector == DetectorKind::Ext && self.ext_command.as_ref().is_none_or(|c| c.is_empty()) {
            return invalid("ext_command", "required with --detector ext");
        }
        for &m in &self.methods {
            self.hyperparams(m).validate()?;
        }
        self.grid.validate()
    }

    pub fn rule(&self) -> Result<DetectionRule> {
        DetectionRule::new(self.theta)
    }

    /// Method defaults with the explicit overrides applied; the ensemble
    /// size follows `N`.
    pub fn hyperparams(&self, method: Method) -> HyperParams {
        let o = &self.overrides;
        let d = HyperParams::defaults_for(method);
        HyperParams {
            lambda1: o.lambda1.unwrap_or(d.lambda1),
            lambda2: o.lambda2.unwrap_or(d.lambda2),
            lambda_t: o.lambda_t.unwrap_or(d.lambda_t),
            sigma_max: o.sigma_max.unwrap_or(d.sigma_max),
            learning_rate: o.learning_rate.unwrap_or(d.learning_rate),
            iterations: o.iterations.unwrap_or(d.iterations),
            margin_c: o.margin_c.unwrap_or(d.margin_c),
            max_ensemble: self.samples,
            seed: self.seed,
        }
    }

    pub fn input(&self) -> Result<&Path> {
        self.input.as_deref().ok_or(Error::InvalidParameter {
            name: "input",
            reason: "an input CSV is required".into(),
        })
    }

    /// Explicit truth path, or the sidecar written next to the input.
    pub fn truth_path(&self) -> Option<PathBuf> {
        if let Some(t) = &self.truth {
            return Some(t.clone());
        }
        let sidecar = truth_sidecar(self.input.as_deref()?);
        sidecar.exists().then_some(sidecar)
    }
}

/// `dir/name.csv` → `dir/name.truth.json`.
pub fn truth_sidecar(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.truth.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_lists() {
        assert_eq!("all".parse::<MethodList>().unwrap().0.len(), 6);
        assert_eq!("ice,dpe,ice".parse::<MethodList>().unwrap().0, vec![Method::Ice, Method::Dpe]);
        assert!("ice,bogus".parse::<MethodList>().is_err());
        assert!("".parse::<MethodList>().is_err());
    }

    #[test]
    fn flags_override_file_and_defaults_fill_in() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 4, "lr": 0.5, "theta": 0.4, "method": "dpe"}"#).unwrap();
        let args = CommonArgs {
            config: Some(path),
            seed: Some(9),
            ..CommonArgs::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.theta, 0.4);
        assert_eq!(cfg.methods, vec![Method::Dpe]);
        let hp = cfg.hyperparams(Method::Dpe);
        assert_eq!(hp.learning_rate, 0.5);
        assert_eq!(hp.lambda2, 0.1);
        assert_eq!(cfg.suspect_len, 10);
        assert_eq!(cfg.context, 115);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"sede": 4}"#).unwrap();
        let args = CommonArgs {
            config: Some(path),
            ..CommonArgs::default()
        };
        assert!(matches!(RunConfig::resolve(&args), Err(Error::Json(_))));
        let args = CommonArgs {
            theta: Some(1.5),
            ..CommonArgs::default()
        };
        assert!(RunConfig::resolve(&args).is_err());
        let args = CommonArgs {
            learning_rate: Some(-1.0),
            ..CommonArgs::default()
        };
        assert!(RunConfig::resolve(&args).is_err());
        let args = CommonArgs {
            detector: Some(DetectorKind::Ext),
            ..CommonArgs::default()
        };
        assert!(RunConfig::resolve(&args).is_err());
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(truth_sidecar(Path::new("/a/b/s.csv")), PathBuf::from("/a/b/s.truth.json"));
    }
}
