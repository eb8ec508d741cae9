//! Run configuration files: flat `key = value` lines with `#` comments.
//!
//! | key | value |
//! |-----|-------|
//! | `method` | `standard`, `stodepth`, `st` or `gkt` |
//! | `supervision_mode` | `hg`, `lg`, `sg` or `ag` |
//! | `rule` | `edr`, `uniform`, `linear` or `linear_stagewise` |
//! | `q` | EDR ratio, used by `rule = edr` |
//! | `p_last` | survival of the last block, used by the linear rules |
//! | `beta`, `lambda`, `alpha`, `groups` | loss weights, EMA rate, group count |
//! | `epochs`, `batch_size`, `lr0`, `momentum`, `weight_decay`, `seed` | optimisation |
//! | `eval_every`, `grid_eval` | evaluation cadence, subnet-grid evaluation |
//! | `features`, `classes` | network input and output sizes |
//! | `stage_widths`, `stage_blocks` | comma-separated per-stage lists |
//!
//! Unknown or repeated keys are errors. When `rule` is absent the method's
//! default applies: EDR for `gkt`, linear decay to 0.5 for `stodepth`,
//! uniform for `st`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::sampler::SamplingRule;
use crate::trainer::{Method, SupervisionMode, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub network: NetworkConfig,
}

const KEYS: &[&str] = &[
    "method",
    "supervision_mode",
    "rule",
    "q",
    "p_last",
    "beta",
    "lambda",
    "alpha",
    "groups",
    "epochs",
    "batch_size",
    "lr0",
    "momentum",
    "weight_decay",
    "seed",
    "eval_every",
    "grid_eval",
    "features",
    "classes",
    "stage_widths",
    "stage_blocks",
];

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "standard" => Ok(Method::Standard),
            "stodepth" => Ok(Method::Stodepth),
            "st" => Ok(Method::St),
            "gkt" => Ok(Method::Gkt),
            _ => Err(format!(
                "unknown method {s:?} (standard, stodepth, st, gkt)"
            )),
        }
    }
}

impl FromStr for SupervisionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "hg" => Ok(SupervisionMode::Hg),
            "lg" => Ok(SupervisionMode::Lg),
            "sg" => Ok(SupervisionMode::Sg),
            "ag" => Ok(SupervisionMode::Ag),
            _ => Err(format!("unknown supervision mode {s:?} (hg, lg, sg, ag)")),
        }
    }
}

/// Parses a comma-separated list such as `16,32,64`.
pub fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad list entry {v:?}: {e}"))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            detail,
        };
        let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected key = value, got {body:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(line, format!("unknown key {key:?}")));
            }
            if entries.insert(key, (line, value)).is_some() {
                return Err(err(line, format!("key {key:?} given twice")));
            }
        }

        fn get<T: FromStr>(
            entries: &BTreeMap<&str, (usize, &str)>,
            key: &str,
            err: &dyn Fn(usize, String) -> Error,
        ) -> Result<Option<T>>
        where
            T::Err: std::fmt::Display,
        {
            entries
                .get(key)
                .map(|&(line, v)| v.parse::<T>().map_err(|e| err(line, format!("{key}: {e}"))))
                .transpose()
        }
        let list = |key: &str| -> Result<Option<Vec<usize>>> {
            entries
                .get(key)
                .map(|&(line, v)| parse_list(v).map_err(|e| err(line, format!("{key}: {e}"))))
                .transpose()
        };
        let required = |key: &str| {
            Error::InvalidConfig(format!(
                "{}: missing required key {key:?}",
                origin.display()
            ))
        };

        let mut train = TrainConfig::default();
        if let Some(m) = get(&entries, "method", &err)? {
            train.method = m;
        }
        if let Some(m) = get(&entries, "supervision_mode", &err)? {
            train.supervision = m;
        }
        macro_rules! set {
            ($($key:literal => $field:ident),* $(,)?) => {
                $(if let Some(v) = get(&entries, $key, &err)? { train.$field = v; })*
            };
        }
        set!(
            "beta" => beta, "lambda" => lambda, "alpha" => alpha, "groups" => groups,
            "epochs" => epochs, "batch_size" => batch_size, "lr0" => lr0, "momentum" => momentum,
            "weight_decay" => weight_decay, "seed" => seed, "eval_every" => eval_every,
            "grid_eval" => grid_eval,
        );
        let q: Option<f64> = get(&entries, "q", &err)?;
        let p_last: Option<f64> = get(&entries, "p_last", &err)?;
        let rule_name: Option<String> = get(&entries, "rule", &err)?;
        train.rule = match rule_name.as_deref() {
            Some("edr") => SamplingRule::Edr {
                q: q.unwrap_or(0.2),
            },
            Some("uniform") => SamplingRule::Uniform,
            Some("linear") => SamplingRule::LinearDecay {
                p_last: p_last.unwrap_or(0.5),
            },
            Some("linear_stagewise") => SamplingRule::LinearDecayStagewise {
                p_last: p_last.unwrap_or(0.5),
            },
            Some(other) => {
                let line = entries["rule"].0;
                return Err(err(
                    line,
                    format!("unknown rule {other:?} (edr, uniform, linear, linear_stagewise)"),
                ));
            }
            None => match train.method {
                Method::Gkt => SamplingRule::Edr {
                    q: q.unwrap_or(0.2),
                },
                Method::Stodepth => SamplingRule::LinearDecay {
                    p_last: p_last.unwrap_or(0.5),
                },
                Method::St | Method::Standard => SamplingRule::Uniform,
            },
        };

        let network = NetworkConfig {
            features: get(&entries, "features", &err)?.ok_or_else(|| required("features"))?,
            classes: get(&entries, "classes", &err)?.ok_or_else(|| required("classes"))?,
            stage_widths: list("stage_widths")?.ok_or_else(|| required("stage_widths"))?,
            stage_blocks: list("stage_blocks")?.ok_or_else(|| required("stage_blocks"))?,
        };
        let wrap = |e: Error| Error::InvalidConfig(format!("{}: {e}", origin.display()));
        network.validate().map_err(wrap)?;
        train.validate().map_err(wrap)?;
        Ok(RunConfig { train, network })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let method = match t.method {
            Method::Standard => "standard",
            Method::Stodepth => "stodepth",
            Method::St => "st",
            Method::Gkt => "gkt",
        };
        let mode = match t.supervision {
            SupervisionMode::Hg => "hg",
            SupervisionMode::Lg => "lg",
            SupervisionMode::Sg => "sg",
            SupervisionMode::Ag => "ag",
        };
        let rule = match t.rule {
            SamplingRule::Edr { q } => format!("rule = edr\nq = {q}"),
            SamplingRule::Uniform => "rule = uniform".into(),
            SamplingRule::LinearDecay { p_last } => format!("rule = linear\np_last = {p_last}"),
            SamplingRule::LinearDecayStagewise { p_last } => {
                format!("rule = linear_stagewise\np_last = {p_last}")
            }
        };
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let n = &self.network;
        format!(
            "method = {method}\nsupervision_mode = {mode}\n{rule}\nbeta = {}\nlambda = {}\nalpha = {}\n\
             groups = {}\nepochs = {}\nbatch_size = {}\nlr0 = {}\nmomentum = {}\nweight_decay = {}\n\
             seed = {}\neval_every = {}\ngrid_eval = {}\nfeatures = {}\nclasses = {}\n\
             stage_widths = {}\nstage_blocks = {}\n",
            t.beta,
            t.lambda,
            t.alpha,
            t.groups,
            t.epochs,
            t.batch_size,
            t.lr0,
            t.momentum,
            t.weight_decay,
            t.seed,
            t.eval_every,
            t.grid_eval,
            n.features,
            n.classes,
            join(&n.stage_widths),
            join(&n.stage_blocks),
        )
    }
}

/// Output locations of a training run.
pub struct RunPaths {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub knowledge: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        RunPaths {
            metrics: dir.join("metrics.jsonl"),
            checkpoint: dir.join("model.gktm"),
            knowledge: dir.join("knowledge.gktk"),
        }
    }
}
