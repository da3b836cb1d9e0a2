//! Layered run configuration.
//!
//! Settings are dotted keys (`mining.q1`). Each key resolves from the first
//! layer that sets it: command-line flag, then the `CIRLAB_<KEY>`
//! environment variable (dots become underscores, upper case), then the
//! config file, then the built-in default.
//!
//! The config file holds one `key = value` per line; `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::curation::{
    AgentEndpoint, CurationOptions, FailurePolicy, MiningConfig, PromptKind, PromptSet, PromptTemplate, Protocol,
};
use crate::error::{Error, Result};
use crate::loss::CollapseConfig;
use crate::tokens::SynthSpec;

/// Environment variable holding the bearer token for the live agent.
pub const API_KEY_ENV: &str = "AGENT_API_KEY";

/// `(key, default, help)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "seed",
        "0",
        "seed for synthesis, mining, batch construction and collapse init",
    ),
    ("threads", "0", "worker threads, 0 = one per core"),
    ("out", "out", "directory for reports"),
    ("embeddings", "", "TEMB store (corpus for curate, candidates for eval)"),
    ("queries", "", "TEMB store of composed-query embeddings for eval"),
    ("annotations", "", "annotation JSONL for eval"),
    ("triplets_out", "", "triplet JSONL path, default <out>/triplets.jsonl"),
    ("mining.q1", "51", "first rank of the target window"),
    ("mining.q2", "60", "last rank of the target window"),
    (
        "mining.allow_reuse",
        "true",
        "allow one item to be the target of several references",
    ),
    ("agent.mode", "mock", "mock or http"),
    (
        "agent.base_url",
        "http://127.0.0.1:8000/v1",
        "chat-completion base URL",
    ),
    ("agent.model", "", "model name sent to the endpoint"),
    ("agent.timeout_secs", "60", "per-request timeout"),
    (
        "agent.max_retries",
        "3",
        "retries after the first attempt",
    ),
    (
        "agent.backoff_ms",
        "500",
        "delay before the first retry, doubled each time",
    ),
    ("agent.temperature", "0", "sampling temperature"),
    ("agent.in_flight", "4", "concurrent agent calls"),
    ("agent.protocol", "two_step", "two_step or direct"),
    ("agent.on_error", "abort", "abort or skip a failing reference"),
    ("agent.images_dir", "", "directory of image files named by id"),
    ("agent.prompt_caption", "", "file overriding the caption template"),
    (
        "agent.prompt_modify",
        "",
        "file overriding the two-step modification template",
    ),
    (
        "agent.prompt_modify_direct",
        "",
        "file overriding the direct modification template",
    ),
    ("bounds.n", "128", "batch size"),
    ("bounds.p", "4", "tokens per synthetic item"),
    ("bounds.d", "16", "synthetic dimension"),
    ("bounds.noise", "0.01", "target perturbation scale"),
    ("bounds.tau", "0.1", "softmax temperature"),
    ("collapse.m", "8", "item count"),
    ("collapse.p", "1", "tokens per item"),
    ("collapse.d", "8", "dimension"),
    ("collapse.tau", "0.1", "temperature"),
    ("collapse.steps", "5000", "ascent steps"),
    ("collapse.step_size", "0.5", "ascent step size"),
    ("collapse.tie_v_to_u", "false", "tie targets to queries"),
    (
        "collapse.threshold",
        "0.01",
        "pass threshold on both errors",
    ),
    ("collapse.trace", "true", "also write the per-step CSV trace"),
    ("eval.ks", "1,5,10,50", "cutoffs"),
    ("bench.n", "256", "synthetic items"),
    ("bench.p", "8", "tokens per item"),
    ("bench.d", "64", "dimension"),
    ("synth.n", "200", "items"),
    ("synth.p", "4", "tokens per item"),
    ("synth.d", "16", "dimension"),
    ("synth.clusters", "8", "cluster count, 0 for none"),
    ("synth.noise", "0.5", "noise around centroids"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        })
    }
}

pub fn env_var_name(key: &str) -> String {
    format!("CIRLAB_{}", key.replace('.', "_").to_uppercase())
}

fn known(key: &str) -> Result<()> {
    if KEYS.iter().any(|(k, _, _)| *k == key) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("unknown setting {key:?}")))
    }
}

/// Parses config file text into key/value pairs.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", no + 1)))?;
        let key = key.trim().to_string();
        known(&key).map_err(|e| Error::InvalidConfig(format!("line {}: {e}", no + 1)))?;
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::InvalidConfig(format!("line {}: {key} set twice", no + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Resolved settings with the layer each value came from.
#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<String, (String, Source)>,
}

impl Settings {
    /// Built-in defaults only.
    pub fn defaults() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), (v.to_string(), Source::Default)))
                .collect(),
        }
    }

    /// Layers file, environment and flag values over the defaults.
    ///
    /// `env` is consulted for every known key through [`env_var_name`].
    pub fn resolve(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut s = Self::defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_config_text(&text)? {
                s.set(&k, v, Source::File)?;
            }
        }
        for (key, _, _) in KEYS {
            if let Some(v) = env(&env_var_name(key)) {
                s.set(key, v, Source::Env)?;
            }
        }
        for (k, v) in flags {
            s.set(k, v.clone(), Source::Flag)?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: String, source: Source) -> Result<()> {
        known(key)?;
        self.values.insert(key.to_string(), (value, source));
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        &self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("unregistered key {key}"))
            .0
    }

    pub fn source(&self, key: &str) -> Source {
        self.values[key].1
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| Error::InvalidConfig(format!("{key} = {raw:?} ({}): {e}", self.source(key))))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::InvalidConfig(format!("{key} is required for this command")))
    }

    /// `key = value  # source` lines in key order.
    pub fn render(&self) -> String {
        self.values
            .iter()
            .map(|(k, (v, src))| format!("{k} = {v}  # {src}\n"))
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn threads(&self) -> Result<usize> {
        self.get("threads")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn triplets_out(&self) -> PathBuf {
        self.path("triplets_out")
            .unwrap_or_else(|| self.out_dir().join("triplets.jsonl"))
    }

    pub fn mining(&self) -> Result<MiningConfig> {
        Ok(MiningConfig {
            q1: self.get("mining.q1")?,
            q2: self.get("mining.q2")?,
            seed: self.seed()?,
            allow_reuse: self.get("mining.allow_reuse")?,
        })
    }

    pub fn agent_is_mock(&self) -> Result<bool> {
        match self.raw("agent.mode") {
            "mock" => Ok(true),
            "http" => Ok(false),
            other => Err(Error::InvalidConfig(format!(
                "agent.mode {other:?} is not mock or http"
            ))),
        }
    }

    /// Endpoint settings; the key is read from [`API_KEY_ENV`] by the caller.
    pub fn endpoint(&self, api_key: Option<String>) -> Result<AgentEndpoint> {
        let endpoint = AgentEndpoint {
            base_url: self.raw("agent.base_url").to_string(),
            model: self.raw("agent.model").to_string(),
            api_key,
            timeout: Duration::from_secs_f64(self.get("agent.timeout_secs")?),
            max_retries: self.get("agent.max_retries")?,
            temperature: self.get("agent.temperature")?,
            backoff: Duration::from_millis(self.get("agent.backoff_ms")?),
        };
        endpoint.validate()?;
        Ok(endpoint)
    }

    pub fn curation(&self) -> Result<CurationOptions> {
        let on_error = match self.raw("agent.on_error") {
            "abort" => FailurePolicy::Abort,
            "skip" => FailurePolicy::Skip,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "agent.on_error {other:?} is not abort or skip"
                )))
            }
        };
        let mut prompts = PromptSet::default();
        for (key, kind) in [
            ("agent.prompt_caption", PromptKind::Caption),
            ("agent.prompt_modify", PromptKind::Modify),
            ("agent.prompt_modify_direct", PromptKind::ModifyDirect),
        ] {
            if let Some(path) = self.path(key) {
                let t = PromptTemplate::from_file(kind, path)?;
                match kind {
                    PromptKind::Caption => prompts.caption = t,
                    PromptKind::Modify => prompts.modify = t,
                    PromptKind::ModifyDirect => prompts.modify_direct = t,
                }
            }
        }
        Ok(CurationOptions {
            protocol: self.get::<Protocol>("agent.protocol")?,
            on_error,
            in_flight: self.get("agent.in_flight")?,
            prompts,
        })
    }

    pub fn collapse(&self) -> Result<CollapseConfig> {
        let cfg = CollapseConfig {
            m: self.get("collapse.m")?,
            p: self.get("collapse.p")?,
            d: self.get("collapse.d")?,
            tau: self.get("collapse.tau")?,
            steps: self.get("collapse.steps")?,
            step_size: self.get("collapse.step_size")?,
            seed: self.seed()?,
            tie_v_to_u: self.get("collapse.tie_v_to_u")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cutoffs, sorted and deduplicated.
    pub fn ks(&self) -> Result<Vec<usize>> {
        let raw = self.raw("eval.ks");
        let mut ks = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .ok()
                    .filter(|&k| k > 0)
                    .ok_or_else(|| Error::InvalidConfig(format!("eval.ks entry {s:?} is not a positive integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        ks.sort_unstable();
        ks.dedup();
        Ok(ks)
    }

    pub fn synth(&self) -> Result<SynthSpec> {
        let clusters: usize = self.get("synth.clusters")?;
        let spec = SynthSpec {
            n: self.get("synth.n")?,
            p: self.get("synth.p")?,
            d: self.get("synth.d")?,
            seed: self.seed()?,
            cluster_count: (clusters > 0).then_some(clusters),
            noise_scale: self.get("synth.noise")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}
