//! Flat `key = value` configuration files.
//!
//! Every key is optional and falls back to its documented default; unknown
//! keys are errors. Lists are comma-separated; per-level lists (radii,
//! channels) separate levels with `;`.

use mdistill_core::data::{ShapeClass, SyntheticSpec};
use mdistill_core::net::{EncoderConfig, LevelConfig};
use mdistill_core::train::{DistillMode, TrainConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// `(key, default, description)` for every recognized key.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    (
        "data.classes",
        "sphere,cube,cylinder,torus",
        "shape classes (subset of sphere,cube,cylinder,torus,cone)",
    ),
    ("data.points", "256", "points per cloud (>= 32)"),
    ("data.train_per_class", "200", "training clouds per class"),
    ("data.test_per_class", "100", "test clouds per class"),
    ("data.jitter_sigma", "0.01", "per-point Gaussian jitter before normalization"),
    ("data.scale_min", "0.8", "lower bound of the per-cloud scale draw"),
    ("data.scale_max", "1.2", "upper bound of the per-cloud scale draw"),
    ("data.seed", "7", "dataset generator seed"),
    (
        "enc.centers",
        "128,64,16",
        "patch centers per encoder level (non-increasing)",
    ),
    ("enc.k", "16,16,16", "patch neighbor count per level"),
    (
        "enc.radii",
        "0.2,0.4;0.4,0.8;0.8,1.6",
        "spherical query radii per level (levels split by ';')",
    ),
    (
        "enc.channels",
        "32,32;64,64;128,128",
        "per-radius MLP widths per level; level channels = last * number of radii",
    ),
    (
        "enc.rank_fraction",
        "0.25",
        "alignment head rank as a fraction of level channels (< 0.5)",
    ),
    ("train.epochs", "120", "training epochs"),
    ("train.batch_size", "32", "clouds per optimizer step"),
    ("train.learning_rate", "0.001", "Adam learning rate"),
    ("train.seed", "7", "training seed (init, sampling, shuffling)"),
    ("train.temperature", "4.0", "distillation temperature"),
    ("train.lambda1", "0.5", "weight of KL(teacher || student)"),
    ("train.lambda2", "0.5", "weight of KL(student || teacher)"),
    ("train.sample_m", "8", "attention rows sampled per patch (clamped to patch size)"),
    ("train.nmi_bins", "16", "histogram bins of the NMI estimator"),
    (
        "train.nmi_bandwidth",
        "0.0625",
        "NMI kernel width in bin widths (default 1/bins)",
    ),
    ("train.vote_count", "3", "evaluation passes with distinct sampling seeds"),
    (
        "train.rotation_max_deg",
        "30.0",
        "max rotation angle for augmentation and rotated evaluation",
    ),
    ("train.naive_weight", "1.0", "weight of the naive L2 alignment term"),
    (
        "train.stop_teacher_grad",
        "false",
        "cut the alignment gradient into the teacher branch",
    ),
    (
        "train.mode",
        "full",
        "training arm: full | no-distill | naive-align (usually set by flags)",
    ),
];

/// Fully resolved configuration.
#[derive(Clone, Debug)]
pub struct Config {
    pub data: SyntheticSpec,
    pub enc: EncoderConfig,
    pub train: TrainConfig,
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, String> {
    let known: std::collections::HashSet<&str> = SCHEMA.iter().map(|&(k, _, _)| k).collect();
    let mut map = BTreeMap::new();
    for (lno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`", lno + 1));
        };
        let key = key.trim();
        let value = value.trim();
        if !known.contains(key) {
            return Err(format!("line {}: unknown key {key:?}", lno + 1));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(format!("line {}: duplicate key {key:?}", lno + 1));
        }
    }
    Ok(map)
}

struct Lookup {
    map: BTreeMap<String, String>,
}

impl Lookup {
    fn raw(&self, key: &str) -> &str {
        if let Some(v) = self.map.get(key) {
            return v;
        }
        SCHEMA
            .iter()
            .find(|&&(k, _, _)| k == key)
            .map(|&(_, d, _)| d)
            .expect("key must be in schema")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, String> {
        self.raw(key)
            .parse()
            .map_err(|_| format!("bad value for {key}: {:?}", self.raw(key)))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, String> {
        self.raw(key)
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("bad list for {key}: {:?}", self.raw(key)))
    }

    fn parse_levels<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<Vec<T>>, String> {
        self.raw(key)
            .split(';')
            .map(|level| {
                level
                    .split(',')
                    .map(|t| t.trim().parse())
                    .collect::<Result<_, _>>()
            })
            .collect::<Result<_, _>>()
            .map_err(|_| format!("bad per-level list for {key}: {:?}", self.raw(key)))
    }

    fn parse_bool(&self, key: &str) -> Result<bool, String> {
        match self.raw(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(format!("bad boolean for {key}: {other:?}")),
        }
    }
}

pub fn parse_mode(s: &str) -> Result<DistillMode, String> {
    match s {
        "full" => Ok(DistillMode::Full),
        "no-distill" => Ok(DistillMode::NoDistill),
        "naive-align" => Ok(DistillMode::NaiveAlign),
        other => Err(format!("bad train.mode {other:?}")),
    }
}

pub fn mode_name(mode: DistillMode) -> &'static str {
    match mode {
        DistillMode::Full => "full",
        DistillMode::NoDistill => "no-distill",
        DistillMode::NaiveAlign => "naive-align",
    }
}

pub fn from_string(text: &str) -> Result<Config, String> {
    let lk = Lookup {
        map: parse_kv(text)?,
    };

    let classes = lk
        .raw("data.classes")
        .split(',')
        .map(|t| {
            let t = t.trim();
            ShapeClass::parse(t).ok_or_else(|| format!("unknown class {t:?}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let data = SyntheticSpec {
        classes,
        points_per_cloud: lk.parse("data.points")?,
        train_per_class: lk.parse("data.train_per_class")?,
        test_per_class: lk.parse("data.test_per_class")?,
        jitter_sigma: lk.parse("data.jitter_sigma")?,
        scale_min: lk.parse("data.scale_min")?,
        scale_max: lk.parse("data.scale_max")?,
        seed: lk.parse("data.seed")?,
    };
    data.validate().map_err(|e| e.to_string())?;

    let centers: Vec<usize> = lk.parse_list("enc.centers")?;
    let ks: Vec<usize> = lk.parse_list("enc.k")?;
    let radii: Vec<Vec<f64>> = lk.parse_levels("enc.radii")?;
    let channels: Vec<Vec<usize>> = lk.parse_levels("enc.channels")?;
    if centers.len() != ks.len() || centers.len() != radii.len() || centers.len() != channels.len()
    {
        return Err(format!(
            "encoder lists disagree on level count: centers {} / k {} / radii {} / channels {}",
            centers.len(),
            ks.len(),
            radii.len(),
            channels.len()
        ));
    }
    let enc = EncoderConfig {
        levels: centers
            .into_iter()
            .zip(ks)
            .zip(radii.into_iter().zip(channels))
            .map(|((m, k), (r, c))| LevelConfig {
                centers: m,
                k,
                radii: r,
                channels: c,
            })
            .collect(),
        rank_fraction: lk.parse("enc.rank_fraction")?,
    };
    enc.validate().map_err(|e| e.to_string())?;

    let train = TrainConfig {
        epochs: lk.parse("train.epochs")?,
        batch_size: lk.parse("train.batch_size")?,
        learning_rate: lk.parse("train.learning_rate")?,
        seed: lk.parse("train.seed")?,
        temperature: lk.parse("train.temperature")?,
        lambda1: lk.parse("train.lambda1")?,
        lambda2: lk.parse("train.lambda2")?,
        sample_m: lk.parse("train.sample_m")?,
        nmi_bins: lk.parse("train.nmi_bins")?,
        nmi_bandwidth: lk.parse("train.nmi_bandwidth")?,
        vote_count: lk.parse("train.vote_count")?,
        rotation_max_deg: lk.parse("train.rotation_max_deg")?,
        mode: parse_mode(lk.raw("train.mode"))?,
        augment: false,
        stop_teacher_grad: lk.parse_bool("train.stop_teacher_grad")?,
        naive_weight: lk.parse("train.naive_weight")?,
    };
    train.validate().map_err(|e| e.to_string())?;

    Ok(Config { data, enc, train })
}

pub fn load(path: &Path) -> Result<Config, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    from_string(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Serialize a resolved configuration (every key explicit, sorted), so a
/// training run's exact settings ride along with its checkpoint.
pub fn to_resolved_string(cfg: &Config) -> String {
    let mut map = BTreeMap::new();
    let classes: Vec<&str> = cfg.data.classes.iter().map(|c| c.name()).collect();
    map.insert("data.classes", classes.join(","));
    map.insert("data.points", cfg.data.points_per_cloud.to_string());
    map.insert("data.train_per_class", cfg.data.train_per_class.to_string());
    map.insert("data.test_per_class", cfg.data.test_per_class.to_string());
    map.insert("data.jitter_sigma", cfg.data.jitter_sigma.to_string());
    map.insert("data.scale_min", cfg.data.scale_min.to_string());
    map.insert("data.scale_max", cfg.data.scale_max.to_string());
    map.insert("data.seed", cfg.data.seed.to_string());
    let join =
        |it: Vec<String>| -> String { it.join(",") };
    map.insert(
        "enc.centers",
        join(cfg.enc.levels.iter().map(|l| l.centers.to_string()).collect()),
    );
    map.insert(
        "enc.k",
        join(cfg.enc.levels.iter().map(|l| l.k.to_string()).collect()),
    );
    map.insert(
        "enc.radii",
        cfg.enc
            .levels
            .iter()
            .map(|l| join(l.radii.iter().map(|r| r.to_string()).collect()))
            .collect::<Vec<_>>()
            .join(";"),
    );
    map.insert(
        "enc.channels",
        cfg.enc
            .levels
            .iter()
            .map(|l| join(l.channels.iter().map(|c| c.to_string()).collect()))
            .collect::<Vec<_>>()
            .join(";"),
    );
    map.insert("enc.rank_fraction", cfg.enc.rank_fraction.to_string());
    map.insert("train.epochs", cfg.train.epochs.to_string());
    map.insert("train.batch_size", cfg.train.batch_size.to_string());
    map.insert("train.learning_rate", cfg.train.learning_rate.to_string());
    map.insert("train.seed", cfg.train.seed.to_string());
    map.insert("train.temperature", cfg.train.temperature.to_string());
    map.insert("train.lambda1", cfg.train.lambda1.to_string());
    map.insert("train.lambda2", cfg.train.lambda2.to_string());
    map.insert("train.sample_m", cfg.train.sample_m.to_string());
    map.insert("train.nmi_bins", cfg.train.nmi_bins.to_string());
    map.insert("train.nmi_bandwidth", cfg.train.nmi_bandwidth.to_string());
    map.insert("train.vote_count", cfg.train.vote_count.to_string());
    map.insert(
        "train.rotation_max_deg",
        cfg.train.rotation_max_deg.to_string(),
    );
    map.insert("train.naive_weight", cfg.train.naive_weight.to_string());
    map.insert(
        "train.stop_teacher_grad",
        cfg.train.stop_teacher_grad.to_string(),
    );
    map.insert("train.mode", mode_name(cfg.train.mode).to_string());
    let mut out = String::new();
    for (k, v) in map {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

/// Rendered key table for `--help`.
pub fn schema_help() -> String {
    let mut out = String::from("Config keys (flat `key = value` file; all optional):\n");
    for (key, default, doc) in SCHEMA {
        let _ = writeln!(out, "  {key:<24} default {default:<28} {doc}");
    }
    out
}
