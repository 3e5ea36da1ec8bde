//! Plain-text `key=value` run configuration.
//!
//! Every key has a default; a file only lists overrides. Blank lines and
//! `#` comments are ignored. The resolved configuration is written back in
//! the same format, so an echoed file reproduces its run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use skelfuse::resnet::{RgbNetConfig, StagePlan};
use skelfuse::stgcn::{LayerPlan, StGcnConfig};
use skelfuse::stroi::{StRoiGeometry, SubjectLayout};
use skelfuse::synth::SyntheticSpec;
use skelfuse::train::{AttentionMode, LossKind, TrainConfig};
use skelfuse::{Error, Result};

/// `(key, default, description)`, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("template", "", "skeleton template file; empty = built-in 15-joint stick figure"),
    ("dataset", "", "dataset directory; empty = <out>/data"),
    ("num_classes", "4", "synthetic classes"),
    ("samples_per_class", "100", "synthetic samples per class"),
    ("frames", "24", "synthetic frames per sample"),
    ("frame_width", "96", "synthetic frame width"),
    ("frame_height", "96", "synthetic frame height"),
    ("coord_noise", "0.01", "synthetic joint jitter std"),
    ("pixel_noise", "12", "synthetic background noise amplitude"),
    ("distractor_level", "0.6", "probability a distractor copies a class marker color"),
    ("two_subject_fraction", "0", "fraction of synthetic samples with a second performer"),
    ("track_dropout", "0", "probability a tracked joint is reported missing"),
    ("test_fraction", "0.2", "held-out fraction per class"),
    ("K_roi", "5", "body-part rows of the ST-ROI"),
    ("L", "5", "sampled time points (columns) of the ST-ROI"),
    ("P", "16", "ST-ROI block side in pixels"),
    ("two_subject_layout", "false", "reserve a half-width slot per subject"),
    ("random_frames", "false", "draw training ST-ROI frames at random inside each time bin"),
    ("S", "64", "RGB network input side"),
    ("gamma", "9", "temporal kernel length of the skeleton network"),
    ("alpha", "0.001", "degree regularizer of the adjacency normalization"),
    ("center_input", "true", "subtract the gravity center from skeleton input"),
    ("gcn_layers", "16:1,16:1,32:2,32:1", "skeleton layers as channels:stride"),
    ("rgb_stem", "16:3:1", "RGB stem as channels:kernel:stride"),
    ("rgb_stages", "16x2,32x2,64x2", "RGB stages as channels x blocks"),
    ("epochs", "20", "training epochs per stage"),
    ("batch", "16", "minibatch size"),
    ("lr0", "0.1", "initial learning rate"),
    ("decay_epochs", "12,16", "1-based epochs at which the rate is divided"),
    ("decay_factor", "10", "learning-rate divisor"),
    ("momentum", "0.9", "SGD momentum"),
    ("loss", "squared-error", "squared-error | cross-entropy"),
    ("flip_prob", "0", "probability of mirroring an RGB training input"),
    ("attention_mode", "fixed", "default RGB mode: none | fixed | soft"),
    ("seed", "42", "seed for data generation, initialization and shuffling"),
    ("out", "runs/default", "output directory"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub template: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub k_roi: usize,
    pub l: usize,
    pub p: usize,
    pub two_subject_layout: bool,
    pub random_frames: bool,
    pub s: usize,
    pub gamma: usize,
    pub alpha: f32,
    pub center_input: bool,
    pub gcn_layers: Vec<LayerPlan>,
    pub rgb_stem: (usize, usize, usize),
    pub rgb_stages: Vec<StagePlan>,
    pub train: TrainConfig,
    pub attention_mode: AttentionMode,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config::from_pairs(&[]).expect("defaults parse")
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::usage(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::usage(format!("invalid value '{value}' for {key} (expected true or false)"))),
    }
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| item(s.trim()).ok_or_else(|| Error::usage(format!("invalid item '{s}' in {key}"))))
        .collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.trim().is_empty()).then(|| PathBuf::from(value.trim()))
}

impl Config {
    /// Defaults overridden by `pairs` in order (later pairs win), then
    /// validated as a whole.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let config = Config::build(pairs)?;
        config.validate()?;
        Ok(config)
    }

    /// Field-level parsing only.
    fn build(pairs: &[(String, String)]) -> Result<Self> {
        let mut values: Vec<(&str, String)> = KEYS.iter().map(|&(k, d, _)| (k, d.to_string())).collect();
        for (key, value) in pairs {
            let slot = values
                .iter_mut()
                .find(|(k, _)| k == key)
                .ok_or_else(|| Error::usage(format!("unknown key '{key}'")))?;
            slot.1 = value.clone();
        }
        let get = |key: &str| values.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str()).expect("known key");
        let seed: u64 = parse_num("seed", get("seed"))?;
        let synthetic = SyntheticSpec {
            num_classes: parse_num("num_classes", get("num_classes"))?,
            samples_per_class: parse_num("samples_per_class", get("samples_per_class"))?,
            frames: parse_num("frames", get("frames"))?,
            frame_width: parse_num("frame_width", get("frame_width"))?,
            frame_height: parse_num("frame_height", get("frame_height"))?,
            coord_noise: parse_num("coord_noise", get("coord_noise"))?,
            pixel_noise: parse_num("pixel_noise", get("pixel_noise"))?,
            distractor_level: parse_num("distractor_level", get("distractor_level"))?,
            two_subject_fraction: parse_num("two_subject_fraction", get("two_subject_fraction"))?,
            track_dropout: parse_num("track_dropout", get("track_dropout"))?,
            test_fraction: parse_num("test_fraction", get("test_fraction"))?,
            seed,
        };
        let gcn_layers = parse_list("gcn_layers", get("gcn_layers"), |s| {
            let (c, st) = s.split_once(':')?;
            Some(LayerPlan {
                channels: c.trim().parse().ok()?,
                stride: st.trim().parse().ok()?,
            })
        })?;
        let stem: Vec<usize> = parse_list("rgb_stem", &get("rgb_stem").replace(':', ","), |s| s.parse().ok())?;
        let [sc, sk, ss] = stem[..] else {
            return Err(Error::usage("rgb_stem must be channels:kernel:stride"));
        };
        let rgb_stages = parse_list("rgb_stages", get("rgb_stages"), |s| {
            let (c, b) = s.split_once('x')?;
            Some(StagePlan {
                channels: c.trim().parse().ok()?,
                blocks: b.trim().parse().ok()?,
            })
        })?;
        let loss = match get("loss").trim() {
            "squared-error" => LossKind::SquaredError,
            "cross-entropy" => LossKind::CrossEntropy,
            other => return Err(Error::usage(format!("invalid value '{other}' for loss"))),
        };
        let train = TrainConfig {
            epochs: parse_num("epochs", get("epochs"))?,
            batch_size: parse_num("batch", get("batch"))?,
            lr0: parse_num("lr0", get("lr0"))?,
            decay_epochs: parse_list("decay_epochs", get("decay_epochs"), |s| s.parse().ok())?,
            decay_factor: parse_num("decay_factor", get("decay_factor"))?,
            momentum: parse_num("momentum", get("momentum"))?,
            seed,
            loss,
            flip_prob: parse_num("flip_prob", get("flip_prob"))?,
        };
        Ok(Config {
            template: optional_path(get("template")),
            dataset: optional_path(get("dataset")),
            synthetic,
            k_roi: parse_num("K_roi", get("K_roi"))?,
            l: parse_num("L", get("L"))?,
            p: parse_num("P", get("P"))?,
            two_subject_layout: parse_bool("two_subject_layout", get("two_subject_layout"))?,
            random_frames: parse_bool("random_frames", get("random_frames"))?,
            s: parse_num("S", get("S"))?,
            gamma: parse_num("gamma", get("gamma"))?,
            alpha: parse_num("alpha", get("alpha"))?,
            center_input: parse_bool("center_input", get("center_input"))?,
            gcn_layers,
            rgb_stem: (sc, sk, ss),
            rgb_stages,
            train,
            attention_mode: AttentionMode::parse(get("attention_mode").trim())?,
            seed,
            out: PathBuf::from(get("out").trim()),
        })
    }

    /// Parse a configuration file's text; errors name the offending line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let no = i + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("expected key=value (line {no})")))?;
            let key = key.trim();
            if !KEYS.iter().any(|&(k, _, _)| k == key) {
                return Err(Error::usage(format!("unknown key '{key}' (line {no})")));
            }
            // Validate each value where it appears so the line can be named.
            let one = [(key.to_string(), value.trim().to_string())];
            if let Err(Error::Usage(msg)) = Config::build(&one) {
                return Err(Error::usage(format!("{msg} (line {no})")));
            }
            pairs.push((key.to_string(), value.trim().to_string()));
        }
        Config::from_pairs(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.train.validate()?;
        self.gcn_config().validate()?;
        self.rgb_config().validate()?;
        self.geometry()?;
        if self.k_roi == 0 || self.l == 0 {
            return Err(Error::usage("K_roi and L must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> SubjectLayout {
        if self.two_subject_layout {
            SubjectLayout::Pair
        } else {
            SubjectLayout::Single
        }
    }

    pub fn geometry(&self) -> Result<StRoiGeometry> {
        StRoiGeometry::new(self.k_roi, self.l, self.p, self.layout())
    }

    pub fn gcn_config_for(&self, num_classes: usize) -> StGcnConfig {
        StGcnConfig {
            in_channels: 3,
            layers: self.gcn_layers.clone(),
            temporal_kernel: self.gamma,
            num_classes,
            alpha: self.alpha,
            center_input: self.center_input,
        }
    }

    pub fn gcn_config(&self) -> StGcnConfig {
        self.gcn_config_for(self.synthetic.num_classes)
    }

    pub fn rgb_config_for(&self, num_classes: usize) -> RgbNetConfig {
        RgbNetConfig {
            stem_channels: self.rgb_stem.0,
            stem_kernel: self.rgb_stem.1,
            stem_stride: self.rgb_stem.2,
            stages: self.rgb_stages.clone(),
            input_side: self.s,
            num_classes,
        }
    }

    pub fn rgb_config(&self) -> RgbNetConfig {
        self.rgb_config_for(self.synthetic.num_classes)
    }

    /// Every key with its resolved value, in `KEYS` order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let join = |v: Vec<String>| v.join(",");
        let s = &self.synthetic;
        let t = &self.train;
        KEYS.iter()
            .map(|&(key, _, _)| {
                let value = match key {
                    "template" => path(&self.template),
                    "dataset" => path(&self.dataset),
                    "num_classes" => s.num_classes.to_string(),
                    "samples_per_class" => s.samples_per_class.to_string(),
                    "frames" => s.frames.to_string(),
                    "frame_width" => s.frame_width.to_string(),
                    "frame_height" => s.frame_height.to_string(),
                    "coord_noise" => s.coord_noise.to_string(),
                    "pixel_noise" => s.pixel_noise.to_string(),
                    "distractor_level" => s.distractor_level.to_string(),
                    "two_subject_fraction" => s.two_subject_fraction.to_string(),
                    "track_dropout" => s.track_dropout.to_string(),
                    "test_fraction" => s.test_fraction.to_string(),
                    "K_roi" => self.k_roi.to_string(),
                    "L" => self.l.to_string(),
                    "P" => self.p.to_string(),
                    "two_subject_layout" => self.two_subject_layout.to_string(),
                    "random_frames" => self.random_frames.to_string(),
                    "S" => self.s.to_string(),
                    "gamma" => self.gamma.to_string(),
                    "alpha" => self.alpha.to_string(),
                    "center_input" => self.center_input.to_string(),
                    "gcn_layers" => join(self.gcn_layers.iter().map(|l| format!("{}:{}", l.channels, l.stride)).collect()),
                    "rgb_stem" => format!("{}:{}:{}", self.rgb_stem.0, self.rgb_stem.1, self.rgb_stem.2),
                    "rgb_stages" => join(self.rgb_stages.iter().map(|s| format!("{}x{}", s.channels, s.blocks)).collect()),
                    "epochs" => t.epochs.to_string(),
                    "batch" => t.batch_size.to_string(),
                    "lr0" => t.lr0.to_string(),
                    "decay_epochs" => join(t.decay_epochs.iter().map(|d| d.to_string()).collect()),
                    "decay_factor" => t.decay_factor.to_string(),
                    "momentum" => t.momentum.to_string(),
                    "loss" => match t.loss {
                        LossKind::SquaredError => "squared-error".into(),
                        LossKind::CrossEntropy => "cross-entropy".into(),
                    },
                    "flip_prob" => t.flip_prob.to_string(),
                    "attention_mode" => self.attention_mode.name().into(),
                    "seed" => self.seed.to_string(),
                    "out" => self.out.display().to_string(),
                    _ => unreachable!("key table and echo out of sync"),
                };
                (key, value)
            })
            .collect()
    }

    /// Loadable text form, headed by `header` comment lines.
    pub fn to_text(&self, header: &[String]) -> String {
        let mut out = String::new();
        for h in header {
            let _ = writeln!(out, "# {h}");
        }
        for (key, value) in self.pairs() {
            let _ = writeln!(out, "{key}={value}");
        }
        out
    }

    /// Apply `--seed`/`--out` style overrides.
    pub fn with_overrides(&self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = self.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for (key, value) in [("seed", seed.map(|s| s.to_string())), ("out", out.map(|p| p.display().to_string()))] {
            if let Some(v) = value {
                pairs.iter_mut().find(|(k, _)| k == key).expect("known key").1 = v;
            }
        }
        Config::from_pairs(&pairs)
    }
}
