//! Flat `key = value` experiment configuration.
//!
//! One pair per line, `#` starts a comment, unknown keys are rejected, and
//! every numeric range is validated at parse time with the line number in
//! the error.

use std::path::PathBuf;

use samix::pipeline::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scenario {
    Sl,
    SslInstance,
    SslCluster,
    SlPretrained,
}

impl Scenario {
    fn parse(value: &str) -> Option<Scenario> {
        match value {
            "sl" => Some(Scenario::Sl),
            "ssl-i" => Some(Scenario::SslInstance),
            "ssl-c" => Some(Scenario::SslCluster),
            "sl-pretrained" => Some(Scenario::SlPretrained),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum DatasetSpec {
    Cifar(PathBuf),
    Synth { n: usize, classes: usize },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub mixer_checkpoint: Option<PathBuf>,
    pub encoder_checkpoint: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut scenario = None;
        let mut dataset = None;
        let mut mixer_checkpoint = None;
        let mut encoder_checkpoint = None;
        let mut train = TrainConfig::default();
        let mut lr_set = false;
        let mut scenario_line = 0;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(line_no, format!("expected `key = value`, found `{line}`")));
            };
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(err(line_no, format!("key `{key}` has no value")));
            }

            let parse_f64 = |value: &str| -> Result<f64, ConfigError> {
                value
                    .parse::<f64>()
                    .map_err(|_| err(line_no, format!("`{value}` is not a number")))
            };
            let parse_usize = |value: &str| -> Result<usize, ConfigError> {
                value
                    .parse::<usize>()
                    .map_err(|_| err(line_no, format!("`{value}` is not a non-negative integer")))
            };

            match key {
                "scenario" => {
                    scenario = Some(Scenario::parse(value).ok_or_else(|| {
                        err(
                            line_no,
                            format!("unknown scenario `{value}` (expected sl, ssl-i, ssl-c, or sl-pretrained)"),
                        )
                    })?);
                    scenario_line = line_no;
                }
                "dataset" => {
                    dataset = Some(parse_dataset(value, line_no)?);
                }
                "alpha" => {
                    train.alpha = parse_f64(value)?;
                    if train.alpha <= 0.0 {
                        return Err(err(line_no, "alpha must be positive"));
                    }
                }
                "eta" => {
                    train.eta = parse_f64(value)?;
                    if !(0.0..=1.0).contains(&train.eta) {
                        return Err(err(line_no, "eta must lie in [0, 1]"));
                    }
                }
                "beta0" => {
                    train.beta0 = parse_f64(value)?;
                    if train.beta0 < 0.0 {
                        return Err(err(line_no, "beta0 must be non-negative"));
                    }
                }
                "epsilon" => {
                    train.epsilon = parse_f64(value)?;
                    if train.epsilon < 0.0 {
                        return Err(err(line_no, "epsilon must be non-negative"));
                    }
                }
                "temperature" => {
                    train.temperature = parse_f64(value)?;
                    if train.temperature <= 0.0 {
                        return Err(err(line_no, "temperature must be positive"));
                    }
                }
                "lr" => {
                    train.lr = parse_f64(value)?;
                    lr_set = true;
                    if train.lr <= 0.0 {
                        return Err(err(line_no, "lr must be positive"));
                    }
                }
                "epochs" => {
                    train.epochs = parse_usize(value)?;
                    if train.epochs == 0 {
                        return Err(err(line_no, "epochs must be at least 1"));
                    }
                }
                "batch_size" => {
                    train.batch_size = parse_usize(value)?;
                    if train.batch_size < 2 {
                        return Err(err(line_no, "batch_size must be at least 2 to form pairs"));
                    }
                }
                "seed" => {
                    train.seed = value
                        .parse::<u64>()
                        .map_err(|_| err(line_no, format!("`{value}` is not a valid seed")))?;
                }
                "queue_len" => {
                    train.queue_len = parse_usize(value)?;
                    if train.queue_len == 0 {
                        return Err(err(line_no, "queue_len must be at least 1"));
                    }
                }
                "clusters" => {
                    train.clusters = parse_usize(value)?;
                    if train.clusters < 2 {
                        return Err(err(line_no, "clusters must be at least 2"));
                    }
                }
                "mixer_checkpoint" => {
                    mixer_checkpoint = Some(PathBuf::from(value));
                }
                "encoder_checkpoint" => {
                    encoder_checkpoint = Some(PathBuf::from(value));
                }
                other => {
                    return Err(err(line_no, format!("unknown key `{other}`")));
                }
            }
        }

        let scenario = scenario.ok_or_else(|| err(0, "missing required key `scenario`"))?;
        let dataset = dataset.ok_or_else(|| err(0, "missing required key `dataset`"))?;
        if scenario == Scenario::SlPretrained && mixer_checkpoint.is_none() {
            return Err(err(
                scenario_line,
                "scenario sl-pretrained requires the key `mixer_checkpoint`",
            ));
        }
        // contrastive default learning rate unless the config pinned one
        if !lr_set && matches!(scenario, Scenario::SslInstance | Scenario::SslCluster) {
            train.lr = 0.03;
        }

        Ok(ExperimentConfig {
            scenario,
            dataset,
            train,
            mixer_checkpoint,
            encoder_checkpoint,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: 0,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }
}

fn parse_dataset(value: &str, line: usize) -> Result<DatasetSpec, ConfigError> {
    if let Some(path) = value.strip_prefix("cifar:") {
        if path.is_empty() {
            return Err(err(line, "dataset cifar:<path> needs a path"));
        }
        return Ok(DatasetSpec::Cifar(PathBuf::from(path)));
    }
    if let Some(rest) = value.strip_prefix("synth:") {
        let Some((n, classes)) = rest.split_once(',') else {
            return Err(err(line, "dataset synth:<n>,<classes> needs two integers"));
        };
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| err(line, format!("`{n}` is not a sample count")))?;
        let classes: usize = classes
            .trim()
            .parse()
            .map_err(|_| err(line, format!("`{classes}` is not a class count")))?;
        if n < 4 {
            return Err(err(line, "synth dataset needs at least 4 samples"));
        }
        if !(2..=16).contains(&classes) {
            return Err(err(line, "synth classes must lie in [2, 16]"));
        }
        return Ok(DatasetSpec::Synth { n, classes });
    }
    Err(err(
        line,
        format!("unknown dataset `{value}` (expected cifar:<path> or synth:<n>,<classes>)"),
    ))
}
