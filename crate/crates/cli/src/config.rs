//! Plain-text run configuration: `[env]`, `[perceptor]`, `[train]` sections
//! of `key = value` lines. Command-line `--key value` overrides win. Keys
//! are globally unique, so the sections are documentation, not namespaces.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    CartpoleLqr,
    GotoPose,
    CollectWood,
    CartpolePolicyBaseline,
    GotoPosePolicyBaseline,
    CollectWoodPolicyBaseline,
    GotoPoseFeedforward,
    CollectWoodFeedforward,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        Ok(match s {
            "cartpole-lqr" => Task::CartpoleLqr,
            "goto-pose" => Task::GotoPose,
            "collect-wood" => Task::CollectWood,
            "cartpole-policy-baseline" => Task::CartpolePolicyBaseline,
            "goto-pose-policy-baseline" => Task::GotoPosePolicyBaseline,
            "collect-wood-policy-baseline" => Task::CollectWoodPolicyBaseline,
            "goto-pose-feedforward" => Task::GotoPoseFeedforward,
            "collect-wood-feedforward" => Task::CollectWoodFeedforward,
            other => return Err(ConfigError(format!("unknown task '{other}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::CartpoleLqr => "cartpole-lqr",
            Task::GotoPose => "goto-pose",
            Task::CollectWood => "collect-wood",
            Task::CartpolePolicyBaseline => "cartpole-policy-baseline",
            Task::GotoPosePolicyBaseline => "goto-pose-policy-baseline",
            Task::CollectWoodPolicyBaseline => "collect-wood-policy-baseline",
            Task::GotoPoseFeedforward => "goto-pose-feedforward",
            Task::CollectWoodFeedforward => "collect-wood-feedforward",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerceptorKind {
    Feedforward,
    Autoencoding,
    Stacked,
}

impl PerceptorKind {
    fn parse(s: &str) -> Result<PerceptorKind> {
        Ok(match s {
            "feedforward" => PerceptorKind::Feedforward,
            "autoencoding" => PerceptorKind::Autoencoding,
            "stacked" => PerceptorKind::Stacked,
            other => return Err(ConfigError(format!("unknown perceptor kind '{other}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PerceptorKind::Feedforward => "feedforward",
            PerceptorKind::Autoencoding => "autoencoding",
            PerceptorKind::Stacked => "stacked",
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: Task,
    pub kind: PerceptorKind,
    pub half_images: bool,
    pub temperature: f64,
    pub baseline_shares_trunk: bool,
    pub iterations: usize,
    pub episodes: usize,
    pub gamma: f64,
    pub lr: f64,
    pub w_psi: f64,
    pub w_b: f64,
    pub w_omega: f64,
    pub seed: u64,
    pub workers: usize,
    pub checkpoint_every: usize,
    pub pose_lr_scale: f64,
    pub normalize_advantages: bool,
    pub resume: Option<PathBuf>,
    pub transfer_pose: Option<PathBuf>,
}

const KNOWN_KEYS: &[&str] = &[
    "task",
    "kind",
    "half_images",
    "temperature",
    "baseline_shares_trunk",
    "iterations",
    "episodes",
    "gamma",
    "lr",
    "w_psi",
    "w_b",
    "w_omega",
    "seed",
    "workers",
    "checkpoint_every",
    "pose_lr_scale",
    "normalize_advantages",
    "resume",
    "transfer_pose",
];

/// Parse one config file into a key-value map, rejecting unknown keys.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            ConfigError(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(ConfigError(format!("invalid config key '{key}'")));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn get_parse<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(raw) if raw.is_empty() => Ok(default),
        Some(raw) => raw
            .parse::<T>()
            .map_err(|_| ConfigError(format!("key '{key}': cannot parse '{raw}'"))),
    }
}

/// Merge file values and overrides, then validate into a [`RunConfig`].
pub fn resolve(
    mut map: BTreeMap<String, String>,
    overrides: &BTreeMap<String, String>,
    env_seed: Option<u64>,
) -> Result<RunConfig> {
    for (k, v) in overrides {
        if !KNOWN_KEYS.contains(&k.as_str()) {
            return Err(ConfigError(format!("invalid config key '{k}'")));
        }
        map.insert(k.clone(), v.clone());
    }
    let task = Task::parse(
        map.get("task")
            .ok_or_else(|| ConfigError("missing required key 'task'".into()))?,
    )?;
    let default_kind = match task {
        Task::CartpoleLqr | Task::GotoPoseFeedforward | Task::CollectWoodFeedforward => {
            PerceptorKind::Feedforward
        }
        Task::GotoPose => PerceptorKind::Autoencoding,
        Task::CollectWood => PerceptorKind::Stacked,
        _ => PerceptorKind::Feedforward,
    };
    let kind = match map.get("kind") {
        Some(s) if !s.is_empty() => PerceptorKind::parse(s)?,
        _ => default_kind,
    };
    validate_combo(task, kind)?;

    let seed = match map.get("seed") {
        Some(s) if !s.is_empty() => s
            .parse::<u64>()
            .map_err(|_| ConfigError(format!("key 'seed': cannot parse '{s}'")))?,
        _ => env_seed.unwrap_or(1),
    };

    let resume = map
        .get("resume")
        .filter(|s| !s.is_empty())
        .map(PathBuf::from);
    let transfer_pose = map
        .get("transfer_pose")
        .filter(|s| !s.is_empty())
        .map(PathBuf::from);

    Ok(RunConfig {
        task,
        kind,
        half_images: get_parse(&map, "half_images", false)?,
        temperature: get_parse(&map, "temperature", 1.0)?,
        baseline_shares_trunk: get_parse(&map, "baseline_shares_trunk", true)?,
        iterations: get_parse(&map, "iterations", 1000)?,
        episodes: get_parse(&map, "episodes", 10)?,
        gamma: get_parse(&map, "gamma", 0.99)?,
        lr: get_parse(&map, "lr", 1e-4)?,
        w_psi: get_parse(&map, "w_psi", 1.0)?,
        w_b: get_parse(&map, "w_b", 0.5)?,
        w_omega: get_parse(&map, "w_omega", 1e-3)?,
        seed,
        workers: get_parse(&map, "workers", 0)?,
        checkpoint_every: get_parse(&map, "checkpoint_every", 500)?,
        pose_lr_scale: get_parse(&map, "pose_lr_scale", 0.1)?,
        normalize_advantages: get_parse(&map, "normalize_advantages", true)?,
        resume,
        transfer_pose,
    })
}

fn validate_combo(task: Task, kind: PerceptorKind) -> Result<()> {
    use PerceptorKind::*;
    use Task::*;
    let ok = match task {
        CartpoleLqr => kind == Feedforward,
        GotoPose => matches!(kind, Feedforward | Autoencoding),
        CollectWood => kind == Stacked,
        GotoPoseFeedforward => kind == Feedforward,
        CollectWoodFeedforward => kind == Stacked,
        CartpolePolicyBaseline | GotoPosePolicyBaseline | CollectWoodPolicyBaseline => {
            kind == Feedforward
        }
    };
    if ok {
        Ok(())
    } else {
        Err(ConfigError(format!(
            "task '{}' does not accept perceptor kind '{}'",
            task.name(),
            kind.name()
        )))
    }
}

impl RunConfig {
    /// Whether the task trains a decoder.
    pub fn autoencoding(&self) -> bool {
        match self.task {
            Task::GotoPose => self.kind == PerceptorKind::Autoencoding,
            Task::CollectWood => true,
            _ => false,
        }
    }

    /// Snapshot in the same format the parser reads.
    pub fn resolved_text(&self) -> String {
        format!(
            "[env]\ntask = {}\nhalf_images = {}\n\n[perceptor]\nkind = {}\ntemperature = {}\nbaseline_shares_trunk = {}\n\n[train]\niterations = {}\nepisodes = {}\ngamma = {}\nlr = {}\nw_psi = {}\nw_b = {}\nw_omega = {}\nseed = {}\nworkers = {}\ncheckpoint_every = {}\npose_lr_scale = {}\nnormalize_advantages = {}\nresume = {}\ntransfer_pose = {}\n",
            self.task.name(),
            self.half_images,
            self.kind.name(),
            self.temperature,
            self.baseline_shares_trunk,
            self.iterations,
            self.episodes,
            self.gamma,
            self.lr,
            self.w_psi,
            self.w_b,
            self.w_omega,
            self.seed,
            self.workers,
            self.checkpoint_every,
            self.pose_lr_scale,
            self.normalize_advantages,
            self.resume
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            self.transfer_pose
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        )
    }

    pub fn load(path: &Path, overrides: &BTreeMap<String, String>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let map = parse_config_text(&text)?;
        let env_seed = std::env::var("PGRAD_SEED")
            .ok()
            .and_then(|s| s.parse::<u64>().ok());
        resolve(map, overrides, env_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let text = "[env]\ntask = goto-pose # the task\n\n[train]\niterations = 7\n";
        let map = parse_config_text(text).unwrap();
        assert_eq!(map["task"], "goto-pose");
        assert_eq!(map["iterations"], "7");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_text("bogus = 1\n").unwrap_err();
        assert!(err.0.contains("bogus"));
    }

    #[test]
    fn overrides_win() {
        let map = parse_config_text("task = goto-pose\niterations = 10\n").unwrap();
        let mut ov = BTreeMap::new();
        ov.insert("iterations".to_string(), "3".to_string());
        let cfg = resolve(map, &ov, None).unwrap();
        assert_eq!(cfg.iterations, 3);
    }

    #[test]
    fn invalid_task_kind_combo_rejected() {
        let map = parse_config_text("task = cartpole-lqr\nkind = autoencoding\n").unwrap();
        assert!(resolve(map, &BTreeMap::new(), None).is_err());
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let map = parse_config_text("task = collect-wood\nseed = 9\n").unwrap();
        let cfg = resolve(map, &BTreeMap::new(), None).unwrap();
        let again = parse_config_text(&cfg.resolved_text()).unwrap();
        let cfg2 = resolve(again, &BTreeMap::new(), None).unwrap();
        assert_eq!(cfg2.seed, 9);
        assert_eq!(cfg2.task, Task::CollectWood);
        assert_eq!(cfg2.kind, PerceptorKind::Stacked);
    }
}
