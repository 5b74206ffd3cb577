//! Settings resolution: command-line flags, an optional key=value file, and
//! documented defaults, merged in that order of precedence.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use fedsession::datahub::PartitionScheme;
use fedsession::localtrain::Algorithm;
use fedsession::server::{EpochPlan, PolyDecay, Variant};
use fedsession::{Error, Result};

/// Raw settings exactly as the user supplied them. Every field is optional;
/// the same keys work as `--flag value` and as `key=value` lines in the file
/// named by `--config`. Flags win over file entries.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct RawSettings {
    /// Data source: `gaussian` (synthetic mixture) or `csv:<path>`. Required.
    #[arg(long = "dataset_name")]
    pub dataset_name: Option<String>,

    /// Model: `softmax_linear` or `mlp1:<hidden_units>`. [default: softmax_linear]
    #[arg(long = "model")]
    pub model: Option<String>,

    /// Local optimizer: fedavg, fedprox, scaffold, or fedacg. [default: fedavg]
    #[arg(long = "algorithm")]
    pub algorithm: Option<String>,

    /// Comma list of session-initialization variants to run: proposed,
    /// previous, average, continuous, random_pilot. [default: proposed]
    #[arg(long = "variant")]
    pub variant: Option<String>,

    /// Clients per session. [default: 20]
    #[arg(long = "num_clients")]
    pub num_clients: Option<String>,

    /// Total sessions S. [default: 6]
    #[arg(long = "num_sessions")]
    pub num_sessions: Option<String>,

    /// Pilot sessions P averaged into the pilot model. [default: 1]
    #[arg(long = "num_sessions_pilot")]
    pub num_sessions_pilot: Option<String>,

    /// Training rounds per session T. [default: 30]
    #[arg(long = "num_rounds")]
    pub num_rounds: Option<String>,

    /// Gradient-computation rounds V run at each post-pilot session start
    /// (warm-start variants only). [default: 1]
    #[arg(long = "num_round_grad_cal")]
    pub num_round_grad_cal: Option<String>,

    /// Fraction of each session's labels kept by the next session. [default: 0.0]
    #[arg(long = "cross_session_label_overlap")]
    pub cross_session_label_overlap: Option<String>,

    /// How samples split across clients within a session: dirichlet,
    /// two_shard, half, partial_overlap, or distinct. [default: dirichlet]
    #[arg(long = "in_session_label_dist")]
    pub in_session_label_dist: Option<String>,

    /// Dirichlet concentration for the dirichlet split. [default: 0.7]
    #[arg(long = "dirichlet_alpha")]
    pub dirichlet_alpha: Option<String>,

    /// Labels active per session; 0 picks half the label space. [default: 0]
    #[arg(long = "labels_per_session")]
    pub labels_per_session: Option<String>,

    /// Sessions that reuse an earlier session's labels, as comma-separated
    /// `target:source` pairs, e.g. `2:0,3:1`. [default: none]
    #[arg(long = "recurrence")]
    pub recurrence: Option<String>,

    /// Learning rate when no schedule file is given. [default: 0.1]
    #[arg(long = "eta")]
    pub eta: Option<String>,

    /// JSON file {"base_lr":..,"end_lr":..,"power":..} for polynomial decay
    /// across each session's rounds. [default: none]
    #[arg(long = "lr_config_path")]
    pub lr_config_path: Option<String>,

    /// Local SGD steps per client per training round. [default: 5]
    #[arg(long = "num_SGD_training")]
    pub num_sgd_training: Option<String>,

    /// Per-client comma list of local steps, overriding num_SGD_training.
    /// [default: none]
    #[arg(long = "num_SGD_training_list")]
    pub num_sgd_training_list: Option<String>,

    /// Mini-batch size during training rounds. [default: 32]
    #[arg(long = "batch_size_training")]
    pub batch_size_training: Option<String>,

    /// Local SGD steps per client per gradient-computation round. [default: 5]
    #[arg(long = "num_SGD_grad_cal")]
    pub num_sgd_grad_cal: Option<String>,

    /// Mini-batch size during gradient-computation rounds. [default: 32]
    #[arg(long = "batch_size_grad_cal")]
    pub batch_size_grad_cal: Option<String>,

    /// Proximal pull strength for fedprox. [default: 1.0]
    #[arg(long = "prox_alpha")]
    pub prox_alpha: Option<String>,

    /// Distillation strength for the continuous variant. [default: 1.0]
    #[arg(long = "kl_coefficient")]
    pub kl_coefficient: Option<String>,

    /// Anchor-pull strength for fedacg clients. [default: 0.01]
    #[arg(long = "acg_beta")]
    pub acg_beta: Option<String>,

    /// Server momentum for fedacg. [default: 0.85]
    #[arg(long = "acg_lambda")]
    pub acg_lambda: Option<String>,

    /// Distance between gradient signatures; only `two_norm` exists.
    /// [default: two_norm]
    #[arg(long = "similarity")]
    pub similarity: Option<String>,

    /// Similarity sensitivity R; a comma list sweeps it. [default: 10.0]
    #[arg(long = "similarity_scale")]
    pub similarity_scale: Option<String>,

    /// Fraction of clients drawn each round. [default: 1.0]
    #[arg(long = "participation_fraction")]
    pub participation_fraction: Option<String>,

    /// Held-out share of each session's pool for accuracy. [default: 0.2]
    #[arg(long = "test_fraction")]
    pub test_fraction: Option<String>,

    /// Comma list of seeds; each runs separately. [default: 0]
    #[arg(long = "seed")]
    pub seed: Option<String>,

    /// Where runs write their files. [default: out]
    #[arg(long = "output_dir")]
    pub output_dir: Option<String>,

    /// Classes in the synthetic mixture. [default: 6]
    #[arg(long = "gaussian_classes")]
    pub gaussian_classes: Option<String>,

    /// Samples per class in the synthetic mixture. [default: 100]
    #[arg(long = "gaussian_per_class")]
    pub gaussian_per_class: Option<String>,

    /// Feature dimension of the synthetic mixture. [default: 2]
    #[arg(long = "gaussian_dim")]
    pub gaussian_dim: Option<String>,

    /// Within-class standard deviation of the synthetic mixture. [default: 0.5]
    #[arg(long = "gaussian_spread")]
    pub gaussian_spread: Option<String>,

    /// Probe pairs per client per round for the data-variability estimate;
    /// 0 disables it. [default: 8]
    #[arg(long = "theta_pairs")]
    pub theta_pairs: Option<String>,

    /// Drift constant assumed when evaluating the convergence bound.
    /// [default: 0.5]
    #[arg(long = "bound_lambda")]
    pub bound_lambda: Option<String>,

    /// Rounds averaged after each session transition in the summary.
    /// [default: 10]
    #[arg(long = "transition_window")]
    pub transition_window: Option<String>,
}

impl RawSettings {
    /// Sets one field by its key name; the key set matches the flag names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = match key {
            "dataset_name" => &mut self.dataset_name,
            "model" => &mut self.model,
            "algorithm" => &mut self.algorithm,
            "variant" => &mut self.variant,
            "num_clients" => &mut self.num_clients,
            "num_sessions" => &mut self.num_sessions,
            "num_sessions_pilot" => &mut self.num_sessions_pilot,
            "num_rounds" => &mut self.num_rounds,
            "num_round_grad_cal" => &mut self.num_round_grad_cal,
            "cross_session_label_overlap" => &mut self.cross_session_label_overlap,
            "in_session_label_dist" => &mut self.in_session_label_dist,
            "dirichlet_alpha" => &mut self.dirichlet_alpha,
            "labels_per_session" => &mut self.labels_per_session,
            "recurrence" => &mut self.recurrence,
            "eta" => &mut self.eta,
            "lr_config_path" => &mut self.lr_config_path,
            "num_SGD_training" => &mut self.num_sgd_training,
            "num_SGD_training_list" => &mut self.num_sgd_training_list,
            "batch_size_training" => &mut self.batch_size_training,
            "num_SGD_grad_cal" => &mut self.num_sgd_grad_cal,
            "batch_size_grad_cal" => &mut self.batch_size_grad_cal,
            "prox_alpha" => &mut self.prox_alpha,
            "kl_coefficient" => &mut self.kl_coefficient,
            "acg_beta" => &mut self.acg_beta,
            "acg_lambda" => &mut self.acg_lambda,
            "similarity" => &mut self.similarity,
            "similarity_scale" => &mut self.similarity_scale,
            "participation_fraction" => &mut self.participation_fraction,
            "test_fraction" => &mut self.test_fraction,
            "seed" => &mut self.seed,
            "output_dir" => &mut self.output_dir,
            "gaussian_classes" => &mut self.gaussian_classes,
            "gaussian_per_class" => &mut self.gaussian_per_class,
            "gaussian_dim" => &mut self.gaussian_dim,
            "gaussian_spread" => &mut self.gaussian_spread,
            "theta_pairs" => &mut self.theta_pairs,
            "bound_lambda" => &mut self.bound_lambda,
            "transition_window" => &mut self.transition_window,
            "config" => {
                return Err(Error::InvalidConfig(
                    "settings files cannot nest another config file".into(),
                ))
            }
            other => {
                return Err(Error::InvalidConfig(format!("unknown settings key `{other}`")))
            }
        };
        *slot = Some(value.to_string());
        Ok(())
    }

    /// Parses a flat `key=value` file (one pair per line, `#` comments).
    pub fn from_file(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut settings = Self::default();
        for (lineno, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{} line {}: expected key=value, found `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            settings.set(key.trim(), value.trim()).map_err(|e| {
                Error::InvalidConfig(format!("{} line {}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(settings)
    }

    /// Fills unset fields from `fallback` (flags over file).
    pub fn or(mut self, fallback: Self) -> Self {
        macro_rules! take {
            ($($field:ident),+ $(,)?) => {
                $( self.$field = self.$field.or(fallback.$field); )+
            };
        }
        take!(
            dataset_name, model, algorithm, variant, num_clients, num_sessions,
            num_sessions_pilot, num_rounds, num_round_grad_cal,
            cross_session_label_overlap, in_session_label_dist, dirichlet_alpha,
            labels_per_session, recurrence, eta, lr_config_path, num_sgd_training,
            num_sgd_training_list, batch_size_training, num_sgd_grad_cal,
            batch_size_grad_cal, prox_alpha, kl_coefficient, acg_beta, acg_lambda,
            similarity, similarity_scale, participation_fraction, test_fraction,
            seed, output_dir, gaussian_classes, gaussian_per_class, gaussian_dim,
            gaussian_spread, theta_pairs, bound_lambda, transition_window,
        );
        self
    }

    pub fn resolve(&self) -> Result<BenchSettings> {
        let dataset = match self.dataset_name.as_deref() {
            None => {
                return Err(Error::InvalidConfig(
                    "missing required key: dataset_name (gaussian or csv:<path>)".into(),
                ))
            }
            Some("gaussian") => DatasetSource::Gaussian {
                classes: parse_one(&self.gaussian_classes, "gaussian_classes", 6usize)?,
                per_class: parse_one(&self.gaussian_per_class, "gaussian_per_class", 100usize)?,
                dim: parse_one(&self.gaussian_dim, "gaussian_dim", 2usize)?,
                spread: parse_one(&self.gaussian_spread, "gaussian_spread", 0.5f64)?,
            },
            Some(other) => match other.strip_prefix("csv:") {
                Some(path) if !path.is_empty() => DatasetSource::Csv(PathBuf::from(path)),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "dataset_name must be `gaussian` or `csv:<path>`, got `{other}`"
                    )))
                }
            },
        };

        let model = match self.model.as_deref().unwrap_or("softmax_linear") {
            "softmax_linear" => ModelChoice::SoftmaxLinear,
            other => match other.strip_prefix("mlp1:").map(str::parse::<usize>) {
                Some(Ok(hidden)) if hidden >= 1 => ModelChoice::Mlp1 { hidden },
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "model must be `softmax_linear` or `mlp1:<hidden_units>`, got `{other}`"
                    )))
                }
            },
        };

        let algorithm = Algorithm::from_str(self.algorithm.as_deref().unwrap_or("fedavg"))?;
        let variants = parse_csv_list(self.variant.as_deref().unwrap_or("proposed"), "variant", |v| {
            Variant::from_str(v)
        })?;

        let num_clients: usize = parse_one(&self.num_clients, "num_clients", 20)?;
        let num_sessions: usize = parse_one(&self.num_sessions, "num_sessions", 6)?;
        let num_sessions_pilot: usize = parse_one(&self.num_sessions_pilot, "num_sessions_pilot", 1)?;
        if num_sessions_pilot < 1 || num_sessions < num_sessions_pilot {
            return Err(Error::InvalidConfig(format!(
                "need num_sessions ≥ num_sessions_pilot ≥ 1, got {num_sessions} and {num_sessions_pilot}"
            )));
        }
        let num_rounds: usize = parse_one(&self.num_rounds, "num_rounds", 30)?;
        if num_rounds < 1 {
            return Err(Error::InvalidConfig("num_rounds must be at least 1".into()));
        }
        let num_round_grad_cal: usize = parse_one(&self.num_round_grad_cal, "num_round_grad_cal", 1)?;
        let overlap: f64 =
            parse_one(&self.cross_session_label_overlap, "cross_session_label_overlap", 0.0)?;
        if !(0.0..1.0).contains(&overlap) {
            return Err(Error::InvalidConfig(format!(
                "cross_session_label_overlap must lie in [0, 1), got {overlap}"
            )));
        }

        let partition = match self.in_session_label_dist.as_deref().unwrap_or("dirichlet") {
            "dirichlet" => PartitionScheme::Dirichlet {
                alpha: parse_one(&self.dirichlet_alpha, "dirichlet_alpha", 0.7)?,
            },
            "two_shard" => PartitionScheme::TwoShard,
            "half" => PartitionScheme::Half,
            "partial_overlap" => PartitionScheme::partial_overlap_default(),
            "distinct" => PartitionScheme::Distinct,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "in_session_label_dist must be one of dirichlet, two_shard, half, \
                     partial_overlap, distinct; got `{other}`"
                )))
            }
        };

        let labels_per_session: usize = parse_one(&self.labels_per_session, "labels_per_session", 0)?;
        let recurrence = parse_recurrence(self.recurrence.as_deref().unwrap_or(""))?;

        let eta: f64 = parse_one(&self.eta, "eta", 0.1)?;
        let lr_schedule = match self.lr_config_path.as_deref().unwrap_or("") {
            "" => None,
            path => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::InvalidConfig(format!("cannot read lr_config_path {path}: {e}"))
                })?;
                let decay: PolyDecay = serde_json::from_str(&text).map_err(|e| {
                    Error::InvalidConfig(format!("{path}: expected {{base_lr, end_lr, power}}: {e}"))
                })?;
                Some(decay)
            }
        };

        let uniform_epochs: usize = parse_one(&self.num_sgd_training, "num_SGD_training", 5)?;
        let epochs = match self.num_sgd_training_list.as_deref().unwrap_or("") {
            "" => EpochPlan::Uniform(uniform_epochs),
            list => {
                let entries = parse_csv_list(list, "num_SGD_training_list", |v| {
                    v.parse::<usize>().map_err(|e| {
                        Error::InvalidConfig(format!("num_SGD_training_list entry `{v}`: {e}"))
                    })
                })?;
                if entries.len() != num_clients {
                    return Err(Error::InvalidConfig(format!(
                        "num_SGD_training_list has {} entries for {num_clients} clients",
                        entries.len()
                    )));
                }
                EpochPlan::PerClient(entries)
            }
        };

        let similarity = self.similarity.as_deref().unwrap_or("two_norm");
        if similarity != "two_norm" {
            return Err(Error::InvalidConfig(format!(
                "similarity `{similarity}` is not available; only the 2-norm distance (`two_norm`) is implemented"
            )));
        }

        let similarity_scales =
            parse_csv_list(self.similarity_scale.as_deref().unwrap_or("10.0"), "similarity_scale", |v| {
                v.parse::<f64>()
                    .map_err(|e| Error::InvalidConfig(format!("similarity_scale entry `{v}`: {e}")))
            })?;
        for &r in &similarity_scales {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "similarity_scale entries must be non-negative and finite, got {r}"
                )));
            }
        }

        let seeds = parse_csv_list(self.seed.as_deref().unwrap_or("0"), "seed", |v| {
            v.parse::<u64>()
                .map_err(|e| Error::InvalidConfig(format!("seed entry `{v}`: {e}")))
        })?;

        Ok(BenchSettings {
            dataset,
            model,
            algorithm,
            variants,
            num_clients,
            num_sessions,
            num_sessions_pilot,
            num_rounds,
            num_round_grad_cal,
            cross_session_label_overlap: overlap,
            partition,
            labels_per_session,
            recurrence,
            eta,
            lr_schedule,
            epochs,
            batch_size_training: parse_one(&self.batch_size_training, "batch_size_training", 32)?,
            num_sgd_grad_cal: parse_one(&self.num_sgd_grad_cal, "num_SGD_grad_cal", 5)?,
            batch_size_grad_cal: parse_one(&self.batch_size_grad_cal, "batch_size_grad_cal", 32)?,
            prox_alpha: parse_one(&self.prox_alpha, "prox_alpha", 1.0)?,
            kl_coefficient: parse_one(&self.kl_coefficient, "kl_coefficient", 1.0)?,
            acg_beta: parse_one(&self.acg_beta, "acg_beta", 0.01)?,
            acg_lambda: parse_one(&self.acg_lambda, "acg_lambda", 0.85)?,
            similarity_scales,
            participation_fraction: parse_one(&self.participation_fraction, "participation_fraction", 1.0)?,
            test_fraction: parse_one(&self.test_fraction, "test_fraction", 0.2)?,
            seeds,
            output_dir: PathBuf::from(self.output_dir.as_deref().unwrap_or("out")),
            theta_pairs: parse_one(&self.theta_pairs, "theta_pairs", 8)?,
            bound_lambda: parse_one(&self.bound_lambda, "bound_lambda", 0.5)?,
            transition_window: parse_one(&self.transition_window, "transition_window", 10)?,
        })
    }
}

/// Fully resolved settings with defaults applied.
#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub dataset: DatasetSource,
    pub model: ModelChoice,
    pub algorithm: Algorithm,
    pub variants: Vec<Variant>,
    pub num_clients: usize,
    pub num_sessions: usize,
    pub num_sessions_pilot: usize,
    pub num_rounds: usize,
    pub num_round_grad_cal: usize,
    pub cross_session_label_overlap: f64,
    pub partition: PartitionScheme,
    /// 0 means "half the label space", resolved once the dataset is loaded.
    pub labels_per_session: usize,
    pub recurrence: Vec<(usize, usize)>,
    pub eta: f64,
    pub lr_schedule: Option<PolyDecay>,
    pub epochs: EpochPlan,
    pub batch_size_training: usize,
    pub num_sgd_grad_cal: usize,
    pub batch_size_grad_cal: usize,
    pub prox_alpha: f64,
    pub kl_coefficient: f64,
    pub acg_beta: f64,
    pub acg_lambda: f64,
    pub similarity_scales: Vec<f64>,
    pub participation_fraction: f64,
    pub test_fraction: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub theta_pairs: usize,
    pub bound_lambda: f64,
    pub transition_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Gaussian {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
    },
    Csv(PathBuf),
}

impl DatasetSource {
    pub fn describe(&self) -> String {
        match self {
            DatasetSource::Gaussian { .. } => "gaussian".into(),
            DatasetSource::Csv(path) => format!("csv:{}", path.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    SoftmaxLinear,
    Mlp1 { hidden: usize },
}

impl ModelChoice {
    pub fn describe(&self) -> String {
        match self {
            ModelChoice::SoftmaxLinear => "softmax_linear".into(),
            ModelChoice::Mlp1 { hidden } => format!("mlp1:{hidden}"),
        }
    }
}

fn parse_one<T: FromStr>(slot: &Option<String>, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match slot {
        None => Ok(default),
        Some(text) => text
            .parse::<T>()
            .map_err(|e| Error::InvalidConfig(format!("{key} `{text}`: {e}"))),
    }
}

fn parse_csv_list<T>(text: &str, key: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(&parse)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::InvalidConfig(format!("{key} must list at least one value")));
    }
    Ok(items)
}

fn parse_recurrence(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (target, source) = item.split_once(':').ok_or_else(|| {
            Error::InvalidConfig(format!(
                "recurrence entry `{item}` must look like target:source"
            ))
        })?;
        let target: usize = target
            .trim()
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("recurrence target `{target}`: {e}")))?;
        let source: usize = source
            .trim()
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("recurrence source `{source}`: {e}")))?;
        pairs.push((target, source));
    }
    Ok(pairs)
}
