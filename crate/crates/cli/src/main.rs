//! `featrep` command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use featrep::config::RunConfig;
use featrep::detector::{
    attach_head, build_finetune_set, detect_candidates, detect_multiscale, detections_csv, false_positives, finetune,
    mine_hard, mining_report_csv, parse_detections_csv, DetectorNet, Label, WindowSample,
};
use featrep::eval::{curve_csv, log_avg_miss_rate, miss_rate_at, miss_rate_curve};
use featrep::features::FeatureKind;
use featrep::geometry::BBox;
use featrep::imaging::{crop_normalize_window, group_annotations, list_images, load_image, read_annotations, sample_patches, save_pgm, GrayImage};
use featrep::neural::{grad_check, load_network, save_network, LossTarget, Network, NetworkSpec, Tensor};
use featrep::pipeline::run_toy_pipeline;
use featrep::pretrain::{
    build_replication_dataset, descriptor_targets, epoch_reports_csv, read_p16g, train_autoencoder, train_replication, write_p16g,
};
use featrep::scalar::Scalar;
use featrep::svm_bbox::{
    extract_features, load_bbox, load_svm, rescore_and_refine, save_bbox, save_svm, select_box_pairs,
    train_bbox_regressors, train_svm, FeatureRow,
};
use featrep::synth::{toy_corpus, write_toy_corpus, ToyConfig};
use featrep::Error;

#[derive(Parser, Debug)]
#[command(name = "featrep", version, about = "Descriptor-replication pretraining and pedestrian detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override `key=value`; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads. 1 is the reference for reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Run seed; required by every training subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Kind {
    Hog,
    Cov,
}

impl Kind {
    fn feature(self) -> FeatureKind {
        match self {
            Kind::Hog => FeatureKind::Hog,
            Kind::Cov => FeatureKind::Cov,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Arch {
    Hognet3,
    Covnet4,
    Autonet3,
    Detector,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw 16x16 patches from a directory of images into a P16G file.
    SamplePatches {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute HOG or covariance descriptors of a P16G file into an FV36 file.
    ExtractFeatures {
        #[arg(long)]
        patches: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train HOGNet3 or COVNet4 to replicate descriptors.
    Pretrain {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        images: PathBuf,
        /// Source of test patches; defaults to --images.
        #[arg(long)]
        test_images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the AutoNet3 reconstruction baseline.
    PretrainAuto {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        test_images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach a softmax head and finetune on annotated windows.
    Finetune {
        /// Pretrained backbone checkpoint; a random one is used when absent.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Backbone architecture when no checkpoint is given.
        #[arg(long, value_enum, default_value = "hog")]
        kind: Kind,
        #[arg(long)]
        annotations: PathBuf,
        /// Extra images without pedestrians, used as negative sources.
        #[arg(long)]
        negatives: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hard-negative mining rounds on a finetuned detector.
    MineHard {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        negatives: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the linear SVM on detector features.
    TrainSvm {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        negatives: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train bounding-box regressors from SVM-scored detections.
    TrainBbox {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        svm: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the detector over a directory of images.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        svm: Option<PathBuf>,
        #[arg(long)]
        bbox: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Miss rate against false positives per image.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Evaluate every image of this directory (unannotated ones hold no pedestrians).
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check of a small network.
    Gradcheck {
        #[arg(long, value_enum)]
        arch: Arch,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        /// Conv widths (the last must be 36).
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
    },
    /// First-layer filters as a PGM grid.
    DumpFilters {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a procedural toy corpus with annotations.
    MakeToy {
        #[arg(long, default_value_t = 250)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain, finetune, mine and evaluate on a generated toy corpus.
    ToyPipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::Io(e))
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let c = &cli.common;
    if c.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(c.threads)
        .build_global()
        .map_err(|e| Failure::Runtime(Error::Argument(e.to_string())))?;
    let base = if matches!(cli.cmd, Command::ToyPipeline { .. }) { RunConfig::toy() } else { RunConfig::default() };
    let cfg = load_config(base, c)?;
    match &cli.cmd {
        Command::SamplePatches { images, count, out } => {
            let seed = need_seed(c, "sample-patches")?;
            let imgs = load_dir(images)?;
            let n = match count {
                Some(n) => *n,
                None => cfg.get("train_patches")?,
            };
            write_p16g(out, &sample_patches(&imgs, n, seed)?)?;
            write_manifest(out, "sample-patches", &[images], &cfg, Some(seed), c.threads)
        }
        Command::ExtractFeatures { patches, kind, out } => {
            let p = read_p16g(patches)?;
            featrep::features::write_fv36(out, &descriptor_targets(&p, kind.feature())?)?;
            write_manifest(out, "extract-features", &[patches], &cfg, c.seed, c.threads)
        }
        Command::Pretrain { kind, images, test_images, out } => {
            let seed = need_seed(c, "pretrain")?;
            let cov = matches!(kind, Kind::Cov);
            let (train, test) = patch_sources(images, test_images.as_deref())?;
            let tr = build_replication_dataset(&train, cfg.get("train_patches")?, kind.feature(), seed)?;
            let te = build_replication_dataset(&test, cfg.get("test_patches")?, kind.feature(), seed ^ 0x5eed)?;
            let spec = if cov { NetworkSpec::covnet4_with(cfg.cov_widths()?) } else { NetworkSpec::hognet3_with(cfg.hog_widths()?) };
            let mut net = Network::<f32>::init(spec, seed)?;
            fs::create_dir_all(out)?;
            let hyper = cfg.replication_hyper(seed, cov)?;
            let reports = train_replication(&mut net, &tr, &te, &hyper, &mut |r, n| {
                eprintln!("epoch {} train_err={:.6} test_err={:.6}", r.epoch, r.train_err, r.test_err);
                save_network(n, out.join(format!("epoch_{:03}.frnc", r.epoch)))
            })?;
            save_network(&net, out.join("final.frnc"))?;
            fs::write(out.join("epochs.csv"), epoch_reports_csv(&reports))?;
            write_manifest(out, "pretrain", &inputs(&[Some(images), test_images.as_ref()]), &cfg, Some(seed), c.threads)
        }
        Command::PretrainAuto { images, test_images, out } => {
            let seed = need_seed(c, "pretrain-auto")?;
            let (train, test) = patch_sources(images, test_images.as_deref())?;
            let tr = sample_patches(&train, cfg.get("train_patches")?, seed)?;
            let te = sample_patches(&test, cfg.get("test_patches")?, seed ^ 0x5eed)?;
            let mut net = Network::<f32>::init(NetworkSpec::autonet3_with(cfg.hog_widths()?), seed)?;
            fs::create_dir_all(out)?;
            let reports = train_autoencoder(&mut net, &tr, &te, &cfg.replication_hyper(seed, false)?, &mut |r, n| {
                eprintln!("epoch {} train_err={:.6} test_err={:.6}", r.epoch, r.train_err, r.test_err);
                save_network(n, out.join(format!("epoch_{:03}.frnc", r.epoch)))
            })?;
            save_network(&net, out.join("final.frnc"))?;
            fs::write(out.join("epochs.csv"), epoch_reports_csv(&reports))?;
            write_manifest(out, "pretrain-auto", &inputs(&[Some(images), test_images.as_ref()]), &cfg, Some(seed), c.threads)
        }
        Command::Finetune { backbone, kind, annotations, negatives, out } => {
            let seed = need_seed(c, "finetune")?;
            let (imgs, boxes) = load_annotated(annotations, negatives.as_deref())?;
            let dropout: f64 = cfg.get("dropout")?;
            let bb = match backbone {
                Some(p) => load_network::<f32>(p, dropout)?,
                None => {
                    let spec = match kind {
                        Kind::Hog => NetworkSpec::hognet3_with(cfg.hog_widths()?),
                        Kind::Cov => NetworkSpec::covnet4_with(cfg.cov_widths()?),
                    };
                    Network::init(spec, seed ^ 0xb0)?
                }
            };
            let mut det = attach_head(&bb, dropout, seed)?;
            let samples = build_finetune_set(&imgs, &boxes, &cfg.finetune_set(seed)?)?;
            let reports = finetune(&mut det, &samples, &cfg.finetune_hyper(seed)?)?;
            fs::create_dir_all(out)?;
            save_network(det.network(), out.join("detector.frnc"))?;
            let mut csv = String::from("epoch,loss,accuracy\n");
            for r in &reports {
                let _ = writeln!(csv, "{},{},{}", r.epoch, r.loss, r.accuracy);
            }
            fs::write(out.join("finetune.csv"), csv)?;
            let ins = inputs(&[backbone.as_ref(), Some(annotations), negatives.as_ref()]);
            write_manifest(out, "finetune", &ins, &cfg, Some(seed), c.threads)
        }
        Command::MineHard { model, annotations, negatives, out } => {
            let seed = need_seed(c, "mine-hard")?;
            let (imgs, boxes) = load_annotated(annotations, negatives.as_deref())?;
            let mut det = load_detector(model, &cfg)?;
            let mut samples = build_finetune_set(&imgs, &boxes, &cfg.finetune_set(seed)?)?;
            let outcome = mine_hard(&mut det, &imgs, &boxes, &mut samples, &cfg.mining()?, &cfg.finetune_hyper(seed)?)?;
            fs::create_dir_all(out)?;
            save_network(det.network(), out.join("detector.frnc"))?;
            let mut csv = mining_report_csv(&outcome.runs);
            let _ = writeln!(csv, "final,{},{}", outcome.final_fp_count, samples.iter().filter(|s| s.label == Label::Background).count());
            fs::write(out.join("mining.csv"), csv)?;
            write_manifest(out, "mine-hard", &inputs(&[Some(model), Some(annotations), negatives.as_ref()]), &cfg, Some(seed), c.threads)
        }
        Command::TrainSvm { model, annotations, negatives, out } => {
            let seed = need_seed(c, "train-svm")?;
            let (imgs, boxes) = load_annotated(annotations, negatives.as_deref())?;
            let det = load_detector(model, &cfg)?;
            let mut samples = build_finetune_set(&imgs, &boxes, &cfg.finetune_set(seed)?)?;
            let mining = cfg.mining()?;
            let mut fps = false_positives(&det, &imgs, &boxes, &mining)?;
            fps.sort_by(|a, b| b.1.score_or_min().total_cmp(&a.1.score_or_min()));
            for (i, b) in fps.iter().take(mining.top_k) {
                samples.push(WindowSample::new(
                    crop_normalize_window(&imgs[*i], b)?,
                    Label::Background,
                    featrep::detector::Provenance::HardNegative,
                )?);
            }
            let wins: Vec<&GrayImage<f32>> = samples.iter().map(|s| &s.pixels).collect();
            let feats = extract_features(&det, &wins)?;
            let rows: Vec<FeatureRow> = feats
                .into_iter()
                .zip(&samples)
                .map(|(x, s)| FeatureRow::new(x, if s.label == Label::Pedestrian { 1 } else { -1 }, 1.0))
                .collect::<featrep::Result<_>>()?;
            let (svm, report) = train_svm(&rows, &cfg.svm(seed)?)?;
            fs::create_dir_all(out)?;
            save_svm(&out.join("svm.frnc"), &svm)?;
            let mut csv = String::from("epoch,objective\n");
            for (k, o) in report.objectives.iter().enumerate() {
                let _ = writeln!(csv, "{k},{o}");
            }
            fs::write(out.join("svm_objective.csv"), csv)?;
            println!("final_objective={}", report.final_objective());
            write_manifest(out, "train-svm", &inputs(&[Some(model), Some(annotations), negatives.as_ref()]), &cfg, Some(seed), c.threads)
        }
        Command::TrainBbox { model, svm, annotations, out } => {
            let (imgs, boxes) = load_annotated(annotations, None)?;
            let det = load_detector(model, &cfg)?;
            let svm_model = load_svm(svm, cfg.get("svm_c")?)?;
            let dcfg = cfg.detect()?;
            let min_score: f64 = cfg.get("bbox_min_score")?;
            let min_iou: f64 = cfg.get("bbox_min_iou")?;
            let mut pairs = Vec::new();
            for (img, truths) in imgs.iter().zip(&boxes) {
                let cands = detect_candidates(&det, img, &dcfg)?;
                let wins: Vec<GrayImage<f32>> = cands.iter().map(|b| crop_normalize_window(img, b)).collect::<featrep::Result<_>>()?;
                let refs: Vec<&GrayImage<f32>> = wins.iter().collect();
                let feats = extract_features(&det, &refs)?;
                let scored: Vec<(Vec<f32>, BBox)> = feats
                    .into_iter()
                    .zip(&cands)
                    .map(|(f, b)| featrep::svm_bbox::svm_score(&svm_model, &f).map(|s| (f, b.with_score(s))))
                    .collect::<featrep::Result<_>>()?;
                pairs.extend(select_box_pairs(&scored, truths, min_score, min_iou));
            }
            let reg = train_bbox_regressors(&pairs, cfg.get("bbox_lambda")?)?;
            fs::create_dir_all(out)?;
            save_bbox(&out.join("bbox.frnc"), &reg)?;
            println!("pairs={}", pairs.len());
            write_manifest(out, "train-bbox", &[model, svm, annotations], &cfg, c.seed, c.threads)
        }
        Command::Detect { model, images, svm, bbox, out } => {
            if bbox.is_some() && svm.is_none() {
                return Err(Failure::Usage("--bbox requires --svm".into()));
            }
            let det = load_detector(model, &cfg)?;
            let dcfg = cfg.detect()?;
            let svm_model = svm.as_ref().map(|p| load_svm(p, cfg.get("svm_c")?)).transpose()?;
            let reg = bbox.as_ref().map(|p| load_bbox(p, cfg.get("bbox_lambda")?)).transpose()?;
            let svm_thr: f64 = cfg.get("svm_threshold")?;
            let paths = list_images(images)?;
            let per_image: Vec<(String, Vec<BBox>)> = paths
                .par_iter()
                .map(|p| {
                    let img = load_image(p)?;
                    let dets = match &svm_model {
                        None => detect_multiscale(&det, &img, &dcfg)?,
                        Some(s) => {
                            let cands = detect_candidates(&det, &img, &dcfg)?;
                            rescore_and_refine(&det, s, reg.as_ref(), &img, &cands, svm_thr, dcfg.nms_iou, dcfg.nms_io2)?
                        }
                    };
                    Ok((p.display().to_string(), dets))
                })
                .collect::<featrep::Result<_>>()?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(out, detections_csv(&per_image))?;
            write_manifest(out, "detect", &inputs(&[Some(model), Some(images), svm.as_ref(), bbox.as_ref()]), &cfg, c.seed, c.threads)
        }
        Command::Eval { detections, annotations, images, out } => {
            let anns = group_annotations(&read_annotations(annotations)?);
            let dets = parse_detections_csv(&fs::read_to_string(detections)?)?;
            let mut keys: Vec<PathBuf> = anns.iter().map(|(p, _)| canonical(p)).collect();
            if let Some(dir) = images {
                for p in list_images(dir)? {
                    let k = canonical(&p);
                    if !keys.contains(&k) {
                        keys.push(k);
                    }
                }
            }
            for (p, _) in &dets {
                let k = canonical(Path::new(p));
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
            let mut gts = vec![Vec::new(); keys.len()];
            for (p, b) in &anns {
                let i = keys.iter().position(|k| *k == canonical(p)).expect("key inserted above");
                gts[i] = b.clone();
            }
            let mut per = vec![Vec::new(); keys.len()];
            for (p, b) in dets {
                let i = keys.iter().position(|k| *k == canonical(Path::new(&p))).expect("key inserted above");
                per[i].push(b);
            }
            let curve = miss_rate_curve(&per, &gts)?;
            fs::write(out, curve_csv(&curve))?;
            println!("miss_rate_at_1fppi={}", miss_rate_at(&curve, 1.0));
            println!("log_avg_miss_rate={}", log_avg_miss_rate(&curve));
            Ok(())
        }
        Command::Gradcheck { arch, precision, widths } => {
            let seed = need_seed(c, "gradcheck")?;
            let report = match precision {
                Precision::F32 => gradcheck::<f32>(*arch, widths.as_deref(), seed, 1e-4)?,
                Precision::F64 => gradcheck::<f64>(*arch, widths.as_deref(), seed, 1e-7)?,
            };
            println!("{report}");
            Ok(())
        }
        Command::DumpFilters { model, out } => {
            let net = load_network::<f32>(model, cfg.get("dropout")?)?;
            let w = net.param("conv1.w").ok_or_else(|| Error::Format("checkpoint has no conv1.w".into()))?;
            save_pgm(out, &filter_grid(w)?)?;
            Ok(())
        }
        Command::MakeToy { count, out } => {
            let seed = need_seed(c, "make-toy")?;
            write_toy_corpus(out, &toy_corpus(&ToyConfig::default(), *count, seed)?)?;
            write_manifest(out, "make-toy", &[], &cfg, Some(seed), c.threads)
        }
        Command::ToyPipeline { out } => {
            let seed = need_seed(c, "toy-pipeline")?;
            let o = run_toy_pipeline(&cfg, seed, Some(out))?;
            print!("{}", o.summary());
            write_manifest(out, "toy-pipeline", &[], &cfg, Some(seed), c.threads)
        }
    }
}

fn need_seed(c: &Common, cmd: &str) -> std::result::Result<u64, Failure> {
    c.seed.ok_or_else(|| Failure::Usage(format!("{cmd} requires --seed")))
}

fn load_config(mut cfg: RunConfig, c: &Common) -> std::result::Result<RunConfig, Failure> {
    if let Some(p) = &c.config {
        cfg.apply_file(p).map_err(|e| match e {
            Error::Io(_) => Failure::Runtime(e),
            other => Failure::Usage(other.to_string()),
        })?;
    }
    for o in &c.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn inputs<'a>(opts: &[Option<&'a PathBuf>]) -> Vec<&'a PathBuf> {
    opts.iter().flatten().copied().collect()
}

fn canonical(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn load_dir(dir: &Path) -> featrep::Result<Vec<GrayImage<f32>>> {
    list_images(dir)?.iter().map(|p| load_image(p)).collect()
}

fn patch_sources(train: &Path, test: Option<&Path>) -> featrep::Result<(Vec<GrayImage<f32>>, Vec<GrayImage<f32>>)> {
    let tr = load_dir(train)?;
    let te = match test {
        Some(d) => load_dir(d)?,
        None => tr.clone(),
    };
    Ok((tr, te))
}

/// Annotated images with their boxes, followed by pedestrian-free images.
fn load_annotated(annotations: &Path, negatives: Option<&Path>) -> featrep::Result<(Vec<GrayImage<f32>>, Vec<Vec<BBox>>)> {
    let groups = group_annotations(&read_annotations(annotations)?);
    let mut imgs = Vec::with_capacity(groups.len());
    let mut boxes = Vec::with_capacity(groups.len());
    for (p, b) in groups {
        imgs.push(load_image(&p)?);
        boxes.push(b);
    }
    if let Some(dir) = negatives {
        for img in load_dir(dir)? {
            imgs.push(img);
            boxes.push(Vec::new());
        }
    }
    Ok((imgs, boxes))
}

fn load_detector(path: &Path, cfg: &RunConfig) -> featrep::Result<DetectorNet<f32>> {
    DetectorNet::from_network(load_network(path, cfg.get("dropout")?)?)
}

fn gradcheck<T: Scalar>(arch: Arch, widths: Option<&[usize]>, seed: u64, tol: f64) -> featrep::Result<featrep::neural::GradCheckReport> {
    use rand::{Rng, SeedableRng};
    let w3 = |d: [usize; 3]| -> featrep::Result<[usize; 3]> {
        match widths {
            None => Ok(d),
            Some(w) => w.try_into().map_err(|_| Error::Argument("this architecture takes 3 widths".into())),
        }
    };
    let spec = match arch {
        Arch::Hognet3 => NetworkSpec::hognet3_with(w3([3, 4, 36])?),
        Arch::Autonet3 => NetworkSpec::autonet3_with(w3([3, 4, 36])?),
        Arch::Covnet4 => {
            let w = match widths {
                None => [3, 4, 5, 36],
                Some(w) => w.try_into().map_err(|_| Error::Argument("covnet4 takes 4 widths".into()))?,
            };
            NetworkSpec::covnet4_with(w)
        }
        // a 24×16 input keeps the head small; the layers are the same
        Arch::Detector => NetworkSpec::detector(&NetworkSpec::hognet3_with(w3([2, 2, 36])?), 0.5).with_input((1, 24, 16)),
    };
    let net = Network::<T>::init(spec, seed)?;
    let (c, h, w) = net.spec().input;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let batch = 1;
    let x = Tensor::from_vec(&[batch, c, h, w], (0..batch * c * h * w).map(|_| T::lit(rng.gen_range(0.0..1.0))).collect())?;
    let (oc, oh, ow) = net.spec().output_shape()?;
    if matches!(arch, Arch::Detector) {
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..2)).collect();
        grad_check(&net, &x, LossTarget::Softmax(&labels), 1e-3, tol)
    } else {
        let n = batch * oc * oh * ow;
        let t = Tensor::from_vec(&[batch, oc, oh, ow], (0..n).map(|_| T::lit(rng.gen_range(0.0..0.3))).collect())?;
        grad_check(&net, &x, LossTarget::Euclidean(&t), 1e-2, tol)
    }
}

/// Tiles `(n, 1, k, k)` filters into a grid, each rescaled to the full gray range.
fn filter_grid(w: &Tensor<f32>) -> featrep::Result<GrayImage<f32>> {
    let d = w.dims();
    if d.len() != 4 || d[1] != 1 {
        return Err(Error::Format(format!("expected single-channel filters, got dims {d:?}")));
    }
    let (n, kh, kw) = (d[0], d[2], d[3]);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (cw, ch) = (kw + 1, kh + 1);
    let mut img = vec![0.0f32; (cols * cw + 1) * (rows * ch + 1)];
    let stride = cols * cw + 1;
    for f in 0..n {
        let k = &w.data()[f * kh * kw..(f + 1) * kh * kw];
        let (lo, hi) = k.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (ox, oy) = (1 + (f % cols) * cw, 1 + (f / cols) * ch);
        for y in 0..kh {
            for x in 0..kw {
                img[(oy + y) * stride + ox + x] = (k[y * kw + x] - lo) / span;
            }
        }
    }
    GrayImage::new(stride, rows * ch + 1, img)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Digest of a file, or of a directory's files in name order.
fn input_digest(p: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
        entries.sort();
        for e in entries {
            h.update(e.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
            h.update(fs::read(&e)?);
        }
    } else {
        h.update(fs::read(p)?);
    }
    Ok(hex(&h.finalize()))
}

/// Writes `manifest.txt` and `config.txt` into a directory output, or
/// `<file>.manifest.txt` next to a file output.
fn write_manifest(out: &Path, cmd: &str, inputs: &[&PathBuf], cfg: &RunConfig, seed: Option<u64>, threads: usize) -> Outcome {
    let text = cfg.to_text();
    let mut m = String::new();
    let _ = writeln!(m, "command = {cmd}");
    let _ = writeln!(m, "version = featrep {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "seed = {}", seed.map_or("none".to_string(), |s| s.to_string()));
    let _ = writeln!(m, "threads = {threads}");
    let _ = writeln!(m, "config_sha256 = {}", hex(&Sha256::digest(text.as_bytes())));
    for p in inputs {
        let _ = writeln!(m, "input = {} sha256:{}", p.display(), input_digest(p)?);
    }
    if out.is_dir() {
        fs::write(out.join("config.txt"), &text)?;
        fs::write(out.join("manifest.txt"), m)?;
    } else {
        let _ = write!(m, "\n[config]\n{text}");
        let mut name = out.as_os_str().to_os_string();
        name.push(".manifest.txt");
        fs::write(PathBuf::from(name), m)?;
    }
    Ok(())
}
