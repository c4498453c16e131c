//! The alternating registration / segmentation loop.
//!
//! Round 0 registers the atlas to every unlabeled image without label
//! supervision, turns each warped atlas into style-transferred training pairs
//! and trains a segmenter. Every later round re-registers with the
//! segmenter's predictions as a weak target and retrains from scratch.

mod phantom;

pub use phantom::{
    random_smooth_displacement, render_phantom, synth_dataset, synth_phantom, synth_phantom_seeded, Anatomy,
    PhantomConfig, PhantomDataset, PhantomSeeds,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{warp_labels, warp_scalar, DisplacementField, Interpolation, LabelMap, ProbMask, ScalarField};
use crate::metrics::{dice, ncc};
use crate::registration::{register, RegConfig, WeakSupervision};
use crate::segmenter::{seg_forward, seg_train, SegModel, TrainConfig};
use crate::spectral::{ist, sample_beta};
use crate::real::Real;

/// When the IST mixing coefficients are redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IstRefresh {
    /// Fresh coefficients every round.
    PerRound,
    /// One coefficient per (image, copy) for the whole run.
    Fixed,
}

impl IstRefresh {
    pub fn as_str(self) -> &'static str {
        match self {
            IstRefresh::PerRound => "per_round",
            IstRefresh::Fixed => "fixed",
        }
    }
}

impl std::str::FromStr for IstRefresh {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_round" => Ok(IstRefresh::PerRound),
            "fixed" => Ok(IstRefresh::Fixed),
            other => Err(format!("expected `per_round` or `fixed`, found `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub iterations: usize,
    pub reg: RegConfig,
    pub seg: TrainConfig,
    pub ist_refresh: IstRefresh,
    /// Without IST the segmenter is trained on the warped atlas images as they are.
    pub use_ist: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            reg: RegConfig::default(),
            seg: TrainConfig::default(),
            ist_refresh: IstRefresh::PerRound,
            use_ist: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::param("pipeline.iterations", "must be >= 1"));
        }
        self.reg.validate()?;
        self.seg.validate()
    }
}

/// Held-out labels. Never handed to any training stage.
#[derive(Debug, Clone, Default)]
pub struct EvalSet<T> {
    /// Truth for each unlabeled image, in order.
    pub unlabeled_truth: Option<Vec<LabelMap>>,
    pub test: Vec<(ScalarField<T>, LabelMap)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Label Dice of each warped atlas against the unlabeled image's truth.
    pub reg_dice: Vec<f64>,
    /// Dice of the segmenter on each test case.
    pub seg_test_dice: Vec<f64>,
    /// Final registration loss for each unlabeled image.
    pub reg_loss: Vec<f64>,
    /// Training-set loss of the returned segmenter.
    pub seg_train_loss: f64,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl RoundReport {
    pub fn mean_reg_dice(&self) -> Option<f64> {
        mean(&self.reg_dice)
    }

    pub fn mean_seg_dice(&self) -> Option<f64> {
        mean(&self.seg_test_dice)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome<T> {
    pub model: SegModel<T>,
    pub reports: Vec<RoundReport>,
    /// Last round's registration of the atlas to each unlabeled image.
    pub displacements: Vec<DisplacementField<T>>,
    pub warped_labels: Vec<LabelMap>,
    /// Final segmenter predictions for each unlabeled image.
    pub predictions: Vec<ProbMask<T>>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a path of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Index of the candidate with the highest mean global NCC against the test
/// images; ties go to the lowest index.
pub fn select_atlas<T: Real>(candidates: &[ScalarField<T>], test_images: &[ScalarField<T>]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("atlas candidates"));
    }
    if test_images.is_empty() {
        return Err(Error::Empty("test images"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let mut total = 0.0;
        for t in test_images {
            total += ncc(c, t)?.as_f64();
        }
        let score = total / test_images.len() as f64;
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(best.0)
}

/// Training pairs from warped atlases: `copies` IST variants per unlabeled
/// image when `use_ist`, otherwise the warped atlas image itself. Every label
/// is the warped atlas label, unchanged.
pub fn training_pairs<T: Real>(
    warped: &[(ScalarField<T>, LabelMap)],
    unlabeled: &[ScalarField<T>],
    use_ist: bool,
    copies: usize,
    beta_seed: u64,
) -> Result<Vec<(ScalarField<T>, LabelMap)>> {
    if warped.len() != unlabeled.len() {
        return Err(Error::param(
            "training_pairs",
            format!("{} warped atlases for {} unlabeled images", warped.len(), unlabeled.len()),
        ));
    }
    let mut pairs = Vec::new();
    for (u, ((img, labels), target)) in warped.iter().zip(unlabeled).enumerate() {
        if !use_ist {
            pairs.push((img.clone(), labels.clone()));
            continue;
        }
        for c in 0..copies {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(beta_seed, &[u as u64, c as u64]));
            let beta: T = sample_beta(&mut rng);
            pairs.push((ist(img, target, beta)?, labels.clone()));
        }
    }
    Ok(pairs)
}

fn stage<V>(round: usize, stage: &'static str, r: Result<V>) -> Result<V> {
    r.map_err(|e| Error::Pipeline {
        round,
        stage,
        source: Box::new(e),
    })
}

/// Runs `cfg.iterations` rounds of registration followed by segmenter training.
pub fn run_pipeline<T: Real>(
    atlas: &ScalarField<T>,
    atlas_labels: &LabelMap,
    unlabeled: &[ScalarField<T>],
    cfg: &PipelineConfig,
    eval: Option<&EvalSet<T>>,
) -> Result<PipelineOutcome<T>> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled images"));
    }
    atlas.dims().ensure_same(&atlas_labels.dims())?;
    for u in unlabeled {
        atlas.dims().ensure_same(&u.dims())?;
    }
    if let Some(ev) = eval {
        if let Some(truth) = &ev.unlabeled_truth {
            if truth.len() != unlabeled.len() {
                return Err(Error::param("eval.unlabeled_truth", "one label map per unlabeled image required"));
            }
            for t in truth {
                atlas.dims().ensure_same(&t.dims())?;
            }
        }
        for (img, labels) in &ev.test {
            atlas.dims().ensure_same(&img.dims())?;
            atlas.dims().ensure_same(&labels.dims())?;
        }
    }

    let mut reports = Vec::with_capacity(cfg.iterations);
    let mut predictions: Option<Vec<ProbMask<T>>> = None;
    let mut last = None;
    for round in 0..cfg.iterations {
        let regs = stage(
            round,
            "register",
            unlabeled
                .par_iter()
                .enumerate()
                .map(|(u, img)| {
                    let weak = predictions.as_ref().map(|p| WeakSupervision {
                        atlas_labels,
                        pseudo: &p[u],
                    });
                    register(atlas, img, &cfg.reg, weak.as_ref())
                })
                .collect::<Result<Vec<_>>>(),
        )?;
        let warped = stage(
            round,
            "warp",
            regs.iter()
                .map(|r| Ok((warp_scalar(atlas, &r.disp, Interpolation::Linear)?, warp_labels(atlas_labels, &r.disp)?)))
                .collect::<Result<Vec<_>>>(),
        )?;

        let beta_round = match cfg.ist_refresh {
            IstRefresh::PerRound => round as u64,
            IstRefresh::Fixed => 0,
        };
        let beta_seed = derive_seed(cfg.seed, &[1, beta_round]);
        let pairs = stage(
            round,
            "ist",
            training_pairs(&warped, unlabeled, cfg.use_ist, cfg.seg.copies_per_unlabeled, beta_seed),
        )?;
        let seg_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, &[2, round as u64]),
            ..cfg.seg.clone()
        };
        let trained = stage(round, "seg_train", seg_train(&pairs, &seg_cfg))?;
        let preds: Vec<ProbMask<T>> = unlabeled.par_iter().map(|img| seg_forward(&trained.model, img)).collect();

        let mut report = RoundReport {
            round,
            reg_dice: Vec::new(),
            seg_test_dice: Vec::new(),
            reg_loss: regs.iter().map(|r| r.final_terms.total.as_f64()).collect(),
            seg_train_loss: trained.final_loss.as_f64(),
        };
        if let Some(ev) = eval {
            if let Some(truth) = &ev.unlabeled_truth {
                report.reg_dice = stage(
                    round,
                    "eval",
                    warped.iter().zip(truth).map(|((_, l), t)| Ok(dice(l, t)?.mean)).collect(),
                )?;
            }
            report.seg_test_dice = stage(
                round,
                "eval",
                ev.test
                    .par_iter()
                    .map(|(img, labels)| Ok(dice(&seg_forward(&trained.model, img).argmax(), labels)?.mean))
                    .collect(),
            )?;
        }
        reports.push(report);
        predictions = Some(preds);
        last = Some((trained.model, regs, warped));
    }

    let (model, regs, warped) = last.expect("iterations >= 1");
    Ok(PipelineOutcome {
        model,
        reports,
        displacements: regs.into_iter().map(|r| r.disp).collect(),
        warped_labels: warped.into_iter().map(|(_, l)| l).collect(),
        predictions: predictions.expect("iterations >= 1"),
    })
}
