//! Replication pretraining, finetuning, hard mining and evaluation on the
//! procedural toy corpus.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::detector::{
    attach_head, build_finetune_set, detect_multiscale, detections_csv, finetune, mine_hard, mining_report_csv,
    DetectConfig, DetectorNet, FinetuneEpoch, MiningOutcome,
};
use crate::error::Result;
use crate::eval::{curve_csv, log_avg_miss_rate, miss_rate_at, miss_rate_curve, EvalCurve};
use crate::features::FeatureKind;
use crate::geometry::BBox;
use crate::imaging::GrayImage;
use crate::neural::{save_network, Network, NetworkSpec};
use crate::pretrain::{build_replication_dataset, epoch_reports_csv, train_replication, EpochReport};
use crate::synth::{toy_corpus, write_toy_corpus, ToyConfig, ToyImage};

/// Everything a toy run measured.
#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub pretrain: Vec<EpochReport>,
    pub finetune: Vec<FinetuneEpoch>,
    pub mining: MiningOutcome,
    pub curve: EvalCurve,
    pub miss_rate_at_1fppi: f64,
    pub log_avg_miss_rate: f64,
    pub detector: DetectorNet<f32>,
}

impl ToyOutcome {
    /// False-positive counts before each mining run's retraining, then after the last.
    pub fn fp_counts(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.mining.runs.iter().map(|r| r.fp_count).collect();
        v.push(self.mining.final_fp_count);
        v
    }

    pub fn summary(&self) -> String {
        let fps: Vec<String> = self.fp_counts().iter().map(usize::to_string).collect();
        format!(
            "miss_rate_at_1fppi={:.6}\nlog_avg_miss_rate={:.6}\nfp_counts={}\n",
            self.miss_rate_at_1fppi,
            self.log_avg_miss_rate,
            fps.join(",")
        )
    }
}

fn split(images: Vec<ToyImage>, n_train: usize) -> (Vec<GrayImage<f32>>, Vec<Vec<BBox>>, Vec<GrayImage<f32>>, Vec<Vec<BBox>>) {
    let (mut tr_i, mut tr_b, mut te_i, mut te_b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, t) in images.into_iter().enumerate() {
        if k < n_train {
            tr_i.push(t.image);
            tr_b.push(t.figures);
        } else {
            te_i.push(t.image);
            te_b.push(t.figures);
        }
    }
    (tr_i, tr_b, te_i, te_b)
}

/// Runs every stage from `seed`. When `out` is given, checkpoints and CSVs
/// are written there.
pub fn run_toy_pipeline(cfg: &RunConfig, seed: u64, out: Option<&Path>) -> Result<ToyOutcome> {
    cfg.validate()?;
    let n_train: usize = cfg.get("toy_train_images")?;
    let n_test: usize = cfg.get("toy_test_images")?;
    let corpus = toy_corpus(&ToyConfig::default(), n_train + n_test, seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
        write_toy_corpus(&dir.join("test_images"), &corpus[n_train..])?;
    }
    let (train_imgs, train_boxes, test_imgs, test_boxes) = split(corpus, n_train);

    let train_set = build_replication_dataset(&train_imgs, cfg.get("train_patches")?, FeatureKind::Hog, seed ^ 0x11)?;
    let test_set = build_replication_dataset(&test_imgs, cfg.get("test_patches")?, FeatureKind::Hog, seed ^ 0x12)?;
    let mut backbone = Network::<f32>::init(NetworkSpec::hognet3_with(cfg.hog_widths()?), seed ^ 0x13)?;
    let pretrain = train_replication(&mut backbone, &train_set, &test_set, &cfg.replication_hyper(seed ^ 0x14, false)?, &mut |_, _| Ok(()))?;
    drop((train_set, test_set));

    let mut det = attach_head(&backbone, cfg.get("dropout")?, seed ^ 0x15)?;
    let mut samples = build_finetune_set(&train_imgs, &train_boxes, &cfg.finetune_set(seed ^ 0x16)?)?;
    let ft_hyper = cfg.finetune_hyper(seed ^ 0x17)?;
    let ft = finetune(&mut det, &samples, &ft_hyper)?;
    if let Some(dir) = out {
        save_network(&backbone, dir.join("backbone.frnc"))?;
        fs::write(dir.join("pretrain.csv"), epoch_reports_csv(&pretrain))?;
        save_network(det.network(), dir.join("finetuned.frnc"))?;
    }

    let mining = mine_hard(&mut det, &train_imgs, &train_boxes, &mut samples, &cfg.mining()?, &ft_hyper)?;

    let eval_cfg = DetectConfig { threshold: cfg.get("eval_threshold")?, ..cfg.detect()? };
    let dets: Vec<Vec<BBox>> = test_imgs.par_iter().map(|img| detect_multiscale(&det, img, &eval_cfg)).collect::<Result<_>>()?;
    let curve = miss_rate_curve(&dets, &test_boxes)?;
    let outcome = ToyOutcome {
        pretrain,
        finetune: ft,
        miss_rate_at_1fppi: miss_rate_at(&curve, 1.0),
        log_avg_miss_rate: log_avg_miss_rate(&curve),
        curve,
        mining,
        detector: det,
    };
    if let Some(dir) = out {
        save_network(outcome.detector.network(), dir.join("detector.frnc"))?;
        fs::write(dir.join("mining.csv"), mining_report_csv(&outcome.mining.runs))?;
        let named: Vec<(String, Vec<BBox>)> =
            dets.into_iter().enumerate().map(|(i, d)| (format!("img_{i:04}.pgm"), d)).collect();
        fs::write(dir.join("detections.csv"), detections_csv(&named))?;
        fs::write(dir.join("curve.csv"), curve_csv(&outcome.curve))?;
        fs::write(dir.join("summary.txt"), outcome.summary())?;
    }
    Ok(outcome)
}
