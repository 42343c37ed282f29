//! Run configuration: flat `section.key = value` lines.
//!
//! Every key has a default except `data.root`, which is only needed when the
//! dataset is read from disk. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use puzzlecam::data::{AugmentationConfig, SyntheticConfig};
use puzzlecam::infer::{InferenceConfig, PseudoLabelConfig};
use puzzlecam::losses::{AlphaSchedule, LossToggles};
use puzzlecam::model::BackboneSpec;
use puzzlecam::train::{EvalSettings, TrainConfig};

/// `(key, default, description)`; an empty default means "unset".
pub const KEYS: &[(&str, &str, &str)] = &[
    ("run.out", "runs/default", "output directory"),
    ("run.seed", "0", "seed for initialization, shuffling and augmentation"),
    (
        "run.deterministic",
        "false",
        "single worker, fixed order, no wall-clock in logs",
    ),
    ("data.root", "", "dataset root (classes.txt, <split>.csv)"),
    ("data.split", "train", "split name"),
    (
        "data.synthetic",
        "false",
        "generate the shapes dataset instead of reading data.root",
    ),
    ("data.synthetic.num_images", "500", "number of generated images"),
    ("data.synthetic.width", "128", "canvas width"),
    ("data.synthetic.height", "128", "canvas height"),
    (
        "data.synthetic.classes",
        "circle,triangle,rectangle",
        "shape classes, in class order",
    ),
    ("data.synthetic.min_shapes", "1", "fewest shapes per image"),
    ("data.synthetic.max_shapes", "3", "most shapes per image"),
    ("data.synthetic.min_radius", "14", "smallest shape radius in pixels"),
    ("data.synthetic.max_radius", "28", "largest shape radius in pixels"),
    ("data.synthetic.noise", "0.05", "pixel noise standard deviation"),
    ("data.synthetic.seed", "0", "generator seed"),
    ("model.backbone", "tiny_cnn", "tiny_cnn or pointwise_only"),
    ("model.widths", "16,32,64,128", "channel widths of the backbone layers"),
    ("model.stride", "16", "output stride of tiny_cnn (4, 8 or 16)"),
    ("train.epochs", "15", "passes over the dataset"),
    ("train.batch_size", "8", "images per optimizer step"),
    ("train.learning_rate", "0.01", "initial learning rate"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "0.0001", "L2 weight decay"),
    ("train.poly_power", "0.9", "polynomial learning-rate decay exponent"),
    ("train.alpha_max", "4", "final weight of the reconstruction term"),
    (
        "train.alpha_ramp_fraction",
        "0.5",
        "fraction of steps over which alpha ramps up",
    ),
    (
        "train.enable_p_cls",
        "true",
        "classification loss on the merged tile CAMs",
    ),
    (
        "train.enable_re",
        "true",
        "reconstruction loss between full and merged CAMs",
    ),
    ("train.rescale_min", "80", "smallest longer side after random rescale"),
    ("train.rescale_max", "160", "largest longer side after random rescale"),
    ("train.crop_size", "128", "square training crop"),
    ("train.hflip_prob", "0.5", "horizontal flip probability"),
    ("train.log_interval", "10", "steps between log records"),
    (
        "infer.checkpoint",
        "",
        "checkpoint to load (default: <run.out>/model.ckpt)",
    ),
    ("infer.scales", "0.5,1,1.5,2", "test-time scales"),
    ("infer.hflip", "true", "add horizontally flipped variants"),
    (
        "infer.restrict_to_labels",
        "true",
        "zero classes absent from the image labels",
    ),
    ("pseudo.cams", "", "directory of CAM files (default: <run.out>/cams)"),
    ("pseudo.threshold", "0.25", "background threshold"),
    (
        "pseudo.ignore_low",
        "",
        "lower edge of the ignore band (unset: no band)",
    ),
    ("pseudo.ignore_high", "", "upper edge of the ignore band"),
    (
        "eval.predictions",
        "",
        "directory of label maps (default: <run.out>/pseudo)",
    ),
    (
        "ablate.rows",
        "all",
        "all, or ends for just the cls and cls+p_cls+re rows",
    ),
];

/// Configuration failures; the CLI reports these with exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<puzzlecam::Error> for ConfigError {
    fn from(e: puzzlecam::Error) -> Self {
        ConfigError(e.to_string())
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Sets one key, rejecting names not in [`KEYS`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match KEYS.iter().find(|(k, _, _)| *k == key) {
            Some((k, _, _)) => {
                self.values.insert(k, value.trim().to_string());
                Ok(())
            }
            None => err(format!("unknown config key `{key}`")),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| ConfigError(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `key=value` from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override `{kv}` is not of the form key=value")))?;
        self.set(k.trim(), v)
    }

    /// The full resolved configuration, loadable with [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in KEYS {
            writeln!(s, "{k} = {}", self.values[k]).unwrap();
        }
        s
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    fn optional(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| ConfigError(format!("config key `{key}`: cannot parse `{v}`: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| ConfigError(format!("config key `{key}`: cannot parse `{s}`: {e}")))
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("run.out"))
    }

    pub fn path_or(&self, key: &str, default: PathBuf) -> PathBuf {
        self.optional(key).map(PathBuf::from).unwrap_or(default)
    }

    pub fn data_root(&self) -> Result<PathBuf> {
        match self.optional("data.root") {
            Some(r) => Ok(PathBuf::from(r)),
            None => err("config key `data.root` is required (or set data.synthetic = true)"),
        }
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig> {
        Ok(SyntheticConfig {
            num_images: self.get("data.synthetic.num_images")?,
            canvas: (self.get("data.synthetic.width")?, self.get("data.synthetic.height")?),
            classes: self.list("data.synthetic.classes")?,
            shapes_per_image: (
                self.get("data.synthetic.min_shapes")?,
                self.get("data.synthetic.max_shapes")?,
            ),
            radius_range: (
                self.get("data.synthetic.min_radius")?,
                self.get("data.synthetic.max_radius")?,
            ),
            noise_level: self.get("data.synthetic.noise")?,
            seed: self.get("data.synthetic.seed")?,
        })
    }

    pub fn backbone(&self) -> Result<BackboneSpec> {
        let widths = self.list("model.widths")?;
        let spec = match self.raw("model.backbone") {
            "tiny_cnn" => BackboneSpec::TinyCnn {
                widths,
                stride: self.get("model.stride")?,
            },
            "pointwise_only" => BackboneSpec::PointwiseOnly { widths },
            other => return err(format!("config key `model.backbone`: unknown backbone `{other}`")),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            backbone: self.backbone()?,
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            learning_rate: self.get("train.learning_rate")?,
            momentum: self.get("train.momentum")?,
            weight_decay: self.get("train.weight_decay")?,
            poly_power: self.get("train.poly_power")?,
            alpha: AlphaSchedule {
                alpha_max: self.get("train.alpha_max")?,
                ramp_end_fraction: self.get("train.alpha_ramp_fraction")?,
            },
            augmentation: AugmentationConfig {
                rescale_range: (self.get("train.rescale_min")?, self.get("train.rescale_max")?),
                crop_size: self.get("train.crop_size")?,
                hflip_prob: self.get("train.hflip_prob")?,
            },
            toggles: LossToggles {
                enable_p_cls: self.get("train.enable_p_cls")?,
                enable_re: self.get("train.enable_re")?,
            },
            seed: self.get("run.seed")?,
            out_dir: self.out_dir(),
            log_interval: self.get("train.log_interval")?,
            deterministic: self.get("run.deterministic")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn inference(&self) -> Result<InferenceConfig> {
        let cfg = InferenceConfig {
            scales: self.list("infer.scales")?,
            use_hflip: self.get("infer.hflip")?,
            restrict_to_image_labels: self.get("infer.restrict_to_labels")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pseudo(&self) -> Result<PseudoLabelConfig> {
        let band = match (self.optional("pseudo.ignore_low"), self.optional("pseudo.ignore_high")) {
            (None, None) => None,
            (Some(_), Some(_)) => Some((self.get("pseudo.ignore_low")?, self.get("pseudo.ignore_high")?)),
            _ => return err("pseudo.ignore_low and pseudo.ignore_high must be set together"),
        };
        let cfg = PseudoLabelConfig {
            threshold: self.get("pseudo.threshold")?,
            ignore_band: band,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        Ok(EvalSettings {
            inference: self.inference()?,
            pseudo: self.pseudo()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_valid_configs() {
        let cfg = RunConfig::default();
        assert_eq!(
            cfg.train().unwrap(),
            TrainConfig {
                out_dir: "runs/default".into(),
                ..Default::default()
            }
        );
        assert_eq!(cfg.inference().unwrap(), InferenceConfig::default());
        assert_eq!(cfg.pseudo().unwrap(), PseudoLabelConfig::default());
        assert_eq!(cfg.synthetic().unwrap(), SyntheticConfig::default());
        assert!(cfg.data_root().is_err());
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut cfg = RunConfig::default();
        let e = cfg.apply_override("train.epoch=3").unwrap_err();
        assert!(e.0.contains("train.epoch"));
        let e = cfg
            .apply_text("# comment\n\ntrain.epochs = 2\nbogus.key = 1\n", "x.cfg")
            .unwrap_err();
        assert!(e.0.contains("x.cfg:4") && e.0.contains("bogus.key"), "{e}");
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("train.epochs=3").unwrap();
        cfg.apply_override("pseudo.ignore_low=0.2").unwrap();
        cfg.apply_override("pseudo.ignore_high=0.3").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), "snapshot").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.pseudo().unwrap().ignore_band, Some((0.2, 0.3)));
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        cfg.set("train.batch_size", "eight").unwrap();
        assert!(cfg.train().unwrap_err().0.contains("train.batch_size"));
        let mut cfg = RunConfig::default();
        cfg.set("model.backbone", "resnet").unwrap();
        assert!(cfg.backbone().is_err());
    }

    #[test]
    fn every_key_is_documented_once() {
        let mut names: Vec<_> = KEYS.iter().map(|(k, _, _)| *k).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());
        assert!(KEYS.iter().all(|(_, _, d)| !d.is_empty()));
    }
}
