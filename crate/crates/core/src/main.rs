use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use istseg::fields::{warp_scalar, Interpolation};
use istseg::io::csv::{dice_csv, round_report_csv, trace_csv, write_text};
use istseg::io::manifest::write_json;
use istseg::io::png::mid_slice;
use istseg::io::{
    emit_slice_png, read_labels, read_model, read_probs, read_scalar, write_displacement, write_features,
    write_labels, write_model, write_probs, write_scalar, LabeledCase, PairsManifest, PipelineManifest, RunConfig,
    SliceSource,
};
use istseg::metrics::dice;
use istseg::pipeline::{run_pipeline, synth_dataset};
use istseg::registration::{register, WeakSupervision};
use istseg::segmenter::{seg_forward, seg_train};
use istseg::spectral::{ist, sample_beta};
use istseg::{Error, Image, LabelMap, Model, Probs, Result};

#[derive(Parser, Debug)]
#[command(name = "istseg", version, about = "One-shot atlas segmentation toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Overrides the run seed (`pipeline.seed`, `seg.seed`, synthesis seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Results never depend on the thread count; `false` is accepted for
    /// compatibility and changes nothing.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    deterministic: bool,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset and its manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Register an atlas image to a target image.
    Register {
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, requires = "pseudo")]
        atlas_labels: Option<PathBuf>,
        #[arg(long, requires = "atlas_labels")]
        pseudo: Option<PathBuf>,
        #[arg(long)]
        out_disp: PathBuf,
        #[arg(long)]
        out_trace: Option<PathBuf>,
        /// Also write the warped atlas image.
        #[arg(long)]
        out_warped: Option<PathBuf>,
    },
    /// Transplant the target's amplitude spectrum into a warped atlas.
    Ist {
        #[arg(long)]
        warped: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Mixing coefficient; drawn from the seed when absent.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the multi-scale feature stack of an image.
    Features {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmenter from a pairs manifest.
    SegTrain {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_trace: Option<PathBuf>,
    },
    /// Apply a segmenter to an image.
    SegPredict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the argmax label map instead of class probabilities.
        #[arg(long)]
        argmax: bool,
    },
    /// Dice between a predicted label map (or probability mask) and the truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full alternating registration / segmentation loop.
    Pipeline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.pipeline.seed = seed;
        cfg.pipeline.seg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Reads a label map, or the argmax of a probability mask.
fn read_any_labels(path: &Path, k: Option<usize>) -> Result<LabelMap> {
    let vol = istseg::io::read_volume(path)?;
    if vol.channels == 1 {
        istseg::io::fvol::labels_from_volume(&vol, k)
    } else {
        Ok(istseg::io::fvol::probs_from_volume::<f64>(&vol, k)?.argmax())
    }
}

fn synth(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    create_dir(out)?;
    let s = &cfg.synth;
    let ds = synth_dataset::<f64>(&s.phantom, s.num_unlabeled, s.num_test, seed)?;
    let save = |img: &Image, labels: &LabelMap, stem: &str| -> Result<LabeledCase> {
        let case = LabeledCase {
            image: format!("{stem}_image.fvol").into(),
            labels: format!("{stem}_labels.fvol").into(),
        };
        write_scalar(&img.cast::<f32>(), out.join(&case.image))?;
        write_labels(labels, out.join(&case.labels))?;
        Ok(case)
    };
    let atlas = save(&ds.atlas.0, &ds.atlas.1, "atlas")?;
    let unlabeled: Vec<LabeledCase> = ds
        .unlabeled
        .iter()
        .enumerate()
        .map(|(i, (img, l))| save(img, l, &format!("unlabeled_{i:03}")))
        .collect::<Result<_>>()?;
    let test: Vec<LabeledCase> = ds
        .test
        .iter()
        .enumerate()
        .map(|(i, (img, l))| save(img, l, &format!("test_{i:03}")))
        .collect::<Result<_>>()?;
    let manifest = PipelineManifest {
        num_classes: s.phantom.num_classes,
        atlas_image: atlas.image,
        atlas_labels: atlas.labels,
        unlabeled: unlabeled.iter().map(|c| c.image.clone()).collect(),
        unlabeled_truth: Some(unlabeled.iter().map(|c| c.labels.clone()).collect()),
        test,
    };
    write_json(&manifest, out.join("manifest.json"))?;
    let pairs = PairsManifest {
        num_classes: s.phantom.num_classes,
        pairs: vec![LabeledCase {
            image: manifest.atlas_image.clone(),
            labels: manifest.atlas_labels.clone(),
        }],
    };
    write_json(&pairs, out.join("atlas_pairs.json"))
}

fn snapshot(out: &Path, stem: &str, img: &Image, masks: &[(&str, &LabelMap)]) -> Result<()> {
    let (axis, index) = mid_slice(img.dims());
    emit_slice_png(SliceSource::Intensity(img), axis, index, out.join(format!("{stem}_input.png")))?;
    for (name, m) in masks {
        emit_slice_png::<f64>(SliceSource::Labels(m), axis, index, out.join(format!("{stem}_{name}.png")))?;
    }
    Ok(())
}

fn pipeline(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let (m, base) = PipelineManifest::load(manifest)?;
    let data = m.read_data::<f64>(&base)?;
    create_dir(out)?;
    let outcome = run_pipeline(
        &data.atlas,
        &data.atlas_labels,
        &data.unlabeled,
        &cfg.pipeline,
        Some(&data.eval),
    )?;
    for r in &outcome.reports {
        write_text(&round_report_csv(r), out.join(format!("round_{}_report.csv", r.round)))?;
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        eprintln!(
            "round {}: registration dice {}, segmentation dice {}",
            r.round,
            fmt(r.mean_reg_dice()),
            fmt(r.mean_seg_dice())
        );
    }
    write_model(&outcome.model, out.join("model.segm"))?;
    for (i, img) in data.unlabeled.iter().enumerate() {
        let pred = outcome.predictions[i].argmax();
        let mut masks = vec![("pseudo", &outcome.warped_labels[i]), ("prediction", &pred)];
        if let Some(truth) = &data.eval.unlabeled_truth {
            masks.push(("truth", &truth[i]));
        }
        snapshot(out, &format!("unlabeled_{i:03}"), img, &masks)?;
    }
    for (i, (img, truth)) in data.eval.test.iter().enumerate() {
        let pred = seg_forward(&outcome.model, img).argmax();
        snapshot(out, &format!("test_{i:03}"), img, &[("prediction", &pred), ("truth", truth)])?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.global.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
            .map_err(|e| Error::param("threads", e.to_string()))?;
    }
    let cfg = load_config(&cli.global)?;
    if cli.global.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let seed = cli.global.seed.unwrap_or(cfg.pipeline.seed);
    match cli.command {
        Command::Synth { out_dir } => synth(&cfg, seed, &out_dir),
        Command::Register {
            atlas,
            target,
            atlas_labels,
            pseudo,
            out_disp,
            out_trace,
            out_warped,
        } => {
            let atlas: Image = read_scalar(atlas)?;
            let target: Image = read_scalar(target)?;
            let weak = match (atlas_labels, pseudo) {
                (Some(l), Some(p)) => {
                    let pseudo: Probs = read_probs(p, None)?;
                    Some((read_labels(l, Some(pseudo.num_classes()))?, pseudo))
                }
                _ => None,
            };
            let weak_ref = weak.as_ref().map(|(l, p)| WeakSupervision {
                atlas_labels: l,
                pseudo: p,
            });
            let res = register(&atlas, &target, &cfg.pipeline.reg, weak_ref.as_ref())?;
            write_displacement(&res.disp, out_disp)?;
            if let Some(p) = out_trace {
                write_text(&trace_csv(&res.loss_trace, &res.trace_levels), p)?;
            }
            if let Some(p) = out_warped {
                write_scalar(&warp_scalar(&atlas, &res.disp, Interpolation::Linear)?, p)?;
            }
            Ok(())
        }
        Command::Ist {
            warped,
            target,
            beta,
            out,
        } => {
            let warped: Image = read_scalar(warped)?;
            let target: Image = read_scalar(target)?;
            let beta = beta.unwrap_or_else(|| sample_beta(&mut ChaCha8Rng::seed_from_u64(seed)));
            write_scalar(&ist(&warped, &target, beta)?, out)
        }
        Command::Features { input, out } => {
            let img: Image = read_scalar(input)?;
            write_features(&istseg::features::extract_features(&img), out)
        }
        Command::SegTrain { pairs, out, out_trace } => {
            let (m, base) = PairsManifest::load(pairs)?;
            let pairs = m.read_pairs::<f64>(&base)?;
            let outcome = seg_train(&pairs, &cfg.pipeline.seg)?;
            write_model(&outcome.model, out)?;
            if let Some(p) = out_trace {
                let levels = vec![0; outcome.loss_trace.len()];
                write_text(&trace_csv(&outcome.loss_trace, &levels), p)?;
            }
            Ok(())
        }
        Command::SegPredict {
            model,
            input,
            out,
            argmax,
        } => {
            let model: Model = read_model(model)?;
            let img: Image = read_scalar(input)?;
            let probs = seg_forward(&model, &img);
            if argmax {
                write_labels(&probs.argmax(), out)
            } else {
                write_probs(&probs, out)
            }
        }
        Command::Eval {
            pred,
            truth,
            num_classes,
            out,
        } => {
            let truth = read_any_labels(&truth, num_classes)?;
            let pred = read_any_labels(&pred, Some(num_classes.unwrap_or(truth.num_classes())))?;
            let report = dice(&pred, &truth)?;
            let text = dice_csv(&report);
            match out {
                Some(p) => write_text(&text, p),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Pipeline { manifest, out_dir } => pipeline(&cfg, &manifest, &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
