//! `key = value` run configuration with a fixed, documented key set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::detector::{DetectConfig, FinetuneSetConfig, MiningConfig};
use crate::error::{arg_err, Error, Result};
use crate::imaging::PyramidConfig;
use crate::neural::Hyper;
use crate::svm_bbox::SvmConfig;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("batch", "256", "replication minibatch size"),
    ("base_lr", "0.001", "replication base learning rate (HOG)"),
    ("cov_lr_factor", "0.01", "multiplier on base_lr for COV replication"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "0.0005", "L2 weight decay"),
    ("lr_gamma", "0.0001", "inverse schedule gamma"),
    ("lr_power", "0.75", "inverse schedule power"),
    ("epochs", "20", "replication epochs (HOG)"),
    ("cov_epochs", "10", "replication epochs (COV)"),
    ("train_patches", "50000", "patches sampled for training"),
    ("test_patches", "10000", "patches sampled for testing"),
    ("hog_widths", "40,144,36", "HOGNet3 conv widths"),
    ("cov_widths", "40,144,288,36", "COVNet4 conv widths"),
    ("finetune_batch", "100", "finetuning minibatch size"),
    ("finetune_lr", "0.01", "finetuning base learning rate"),
    ("finetune_epochs", "10", "finetuning epochs per round"),
    ("dropout", "0.5", "dropout rate before the head"),
    ("scale_factors", "1.05,0.95", "positive rescale augmentations"),
    ("shifts_per_positive", "2", "random shifts per positive"),
    ("shift_frac", "0.02", "shift range as a fraction of box height"),
    ("neg_count", "1000", "random negatives"),
    ("neg_max_iou", "0.2", "random negatives stay below this IoU"),
    ("pyramid_step", "1.07", "ratio between pyramid levels"),
    ("pyramid_octaves", "3", "octaves covered by the pyramid"),
    ("threshold", "0.5", "detection score threshold (exclusive)"),
    ("nms_iou", "0.4", "first NMS pass IoU limit"),
    ("nms_io2", "0.6", "second NMS pass Io2 limit"),
    ("top_k", "20000", "hard negatives added per mining run"),
    ("fp_stop", "2000", "mining stops below this many false positives"),
    ("max_runs", "8", "mining runs"),
    ("fp_iou", "0.5", "false positive when IoU with every annotation is below this"),
    ("svm_c", "1", "SVM loss weight"),
    ("svm_neg_weight", "20", "SVM cost multiplier for negatives"),
    ("svm_max_epochs", "1000", "SVM solver epoch cap"),
    ("svm_tol", "0.000001", "SVM relative objective change stop"),
    ("svm_threshold", "0", "SVM margin threshold at detection time"),
    ("bbox_lambda", "1000", "ridge penalty for box regression"),
    ("bbox_min_score", "0.5", "box-regression pairs need this SVM score"),
    ("bbox_min_iou", "0.6", "box-regression pairs need this IoU"),
    ("toy_train_images", "200", "toy corpus training scenes"),
    ("toy_test_images", "50", "toy corpus test scenes"),
    ("eval_threshold", "0.05", "detection threshold when building curves"),
];

/// Effective configuration: defaults, then file values, then overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Defaults scaled for the procedural toy corpus on one CPU core.
    pub fn toy() -> Self {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("hog_widths", "8,16,36"),
            ("train_patches", "20000"),
            ("test_patches", "2000"),
            ("epochs", "4"),
            ("batch", "64"),
            ("base_lr", "0.01"),
            ("finetune_batch", "32"),
            ("finetune_epochs", "3"),
            ("neg_count", "1500"),
            ("pyramid_step", "1.1"),
            ("pyramid_octaves", "1"),
            ("top_k", "1000"),
            ("fp_stop", "0"),
            ("max_runs", "2"),
        ] {
            c.values.insert(k.into(), v.into());
        }
        c
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => arg_err(format!("unknown config key {key:?}")),
        }
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| Error::Argument(format!("unknown config key {key:?}")))
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| Error::Argument(format!("config key {key}: cannot parse {raw:?}")))
    }

    pub fn get_list<V: FromStr>(&self, key: &str) -> Result<Vec<V>> {
        let raw = self.raw(key)?;
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Argument(format!("config key {key}: cannot parse {raw:?}"))))
            .collect()
    }

    /// Checks every value parses as its documented type.
    pub fn validate(&self) -> Result<()> {
        self.replication_hyper(0, false)?;
        self.finetune_hyper(0)?;
        self.finetune_set(0)?;
        self.mining()?;
        self.svm(0)?;
        self.hog_widths()?;
        self.cov_widths()?;
        for k in ["bbox_lambda", "bbox_min_score", "bbox_min_iou", "svm_threshold", "eval_threshold", "cov_lr_factor"] {
            self.get::<f64>(k)?;
        }
        for k in ["train_patches", "test_patches", "toy_train_images", "toy_test_images", "cov_epochs"] {
            self.get::<usize>(k)?;
        }
        Ok(())
    }

    /// Canonical text: every key, sorted, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn replication_hyper(&self, seed: u64, cov: bool) -> Result<Hyper> {
        let mut lr: f64 = self.get("base_lr")?;
        let mut epochs: usize = self.get("epochs")?;
        if cov {
            lr *= self.get::<f64>("cov_lr_factor")?;
            epochs = self.get("cov_epochs")?;
        }
        let h = Hyper {
            batch: self.get("batch")?,
            base_lr: lr,
            momentum: self.get("momentum")?,
            weight_decay: self.get("weight_decay")?,
            lr_gamma: self.get("lr_gamma")?,
            lr_power: self.get("lr_power")?,
            epochs,
            seed,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn finetune_hyper(&self, seed: u64) -> Result<Hyper> {
        let h = Hyper {
            batch: self.get("finetune_batch")?,
            base_lr: self.get("finetune_lr")?,
            epochs: self.get("finetune_epochs")?,
            ..self.replication_hyper(seed, false)?
        };
        h.validate()?;
        Ok(h)
    }

    pub fn hog_widths(&self) -> Result<[usize; 3]> {
        self.get_list::<usize>("hog_widths")?
            .try_into()
            .map_err(|_| Error::Argument("hog_widths needs 3 values".into()))
    }

    pub fn cov_widths(&self) -> Result<[usize; 4]> {
        self.get_list::<usize>("cov_widths")?
            .try_into()
            .map_err(|_| Error::Argument("cov_widths needs 4 values".into()))
    }

    pub fn finetune_set(&self, seed: u64) -> Result<FinetuneSetConfig> {
        Ok(FinetuneSetConfig {
            scale_factors: self.get_list("scale_factors")?,
            shifts_per_positive: self.get("shifts_per_positive")?,
            shift_frac: self.get("shift_frac")?,
            neg_count: self.get("neg_count")?,
            neg_max_iou: self.get("neg_max_iou")?,
            seed,
        })
    }

    pub fn detect(&self) -> Result<DetectConfig> {
        Ok(DetectConfig {
            pyramid: PyramidConfig {
                step: self.get("pyramid_step")?,
                octaves: self.get("pyramid_octaves")?,
                ..PyramidConfig::default()
            },
            threshold: self.get("threshold")?,
            nms_iou: self.get("nms_iou")?,
            nms_io2: self.get("nms_io2")?,
        })
    }

    pub fn mining(&self) -> Result<MiningConfig> {
        Ok(MiningConfig {
            top_k: self.get("top_k")?,
            fp_stop: self.get("fp_stop")?,
            max_runs: self.get("max_runs")?,
            fp_iou: self.get("fp_iou")?,
            detect: self.detect()?,
        })
    }

    pub fn svm(&self, seed: u64) -> Result<SvmConfig> {
        Ok(SvmConfig {
            c: self.get("svm_c")?,
            neg_weight: self.get("svm_neg_weight")?,
            max_epochs: self.get("svm_max_epochs")?,
            tol: self.get("svm_tol")?,
            seed,
        })
    }
}
