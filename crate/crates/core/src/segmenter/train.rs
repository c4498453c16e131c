use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::augment::{augment, AugmentConfig};
use super::{SegGrads, SegModel};
use crate::error::{Error, Result};
use crate::fields::{LabelMap, ProbMask, ScalarField};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Step size; with `normalize_grad` it is the parameter-space length of each step.
    pub lr: f64,
    /// Divide each mini-batch gradient by its norm before stepping.
    pub normalize_grad: bool,
    pub batch: usize,
    pub augment: bool,
    pub augment_strength: AugmentConfig,
    /// IST copies generated per unlabeled image by the pipeline.
    pub copies_per_unlabeled: usize,
    pub seed: u64,
    pub hidden: usize,
    /// Training-set loss is evaluated every this many steps for keep-best.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 0.1,
            normalize_grad: true,
            batch: 2,
            augment: true,
            augment_strength: AugmentConfig::default(),
            copies_per_unlabeled: 3,
            seed: 0,
            hidden: 16,
            eval_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("seg.steps", "must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::param("seg.lr", "must be > 0"));
        }
        if self.batch == 0 {
            return Err(Error::param("seg.batch", "must be >= 1"));
        }
        if self.copies_per_unlabeled == 0 {
            return Err(Error::param("seg.copies_per_unlabeled", "must be >= 1"));
        }
        if self.hidden == 0 {
            return Err(Error::param("seg.hidden", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::param("seg.eval_every", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: SegModel<T>,
    /// Mean mini-batch loss of every step.
    pub loss_trace: Vec<T>,
    /// Training-set loss of the initial model.
    pub initial_loss: T,
    /// Training-set loss of the returned model.
    pub final_loss: T,
}

/// Label frequencies with add-one smoothing, so absent classes stay finite.
fn class_frequencies(pairs: &[(impl Sized, LabelMap)], classes: usize) -> Vec<f64> {
    let mut counts = vec![1.0; classes];
    for (_, l) in pairs {
        for &c in l.labels() {
            counts[c as usize] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

fn dataset_loss<T: Real>(model: &SegModel<T>, pairs: &[(ScalarField<T>, ProbMask<T>)]) -> Result<T> {
    let losses: Vec<T> = pairs
        .par_iter()
        .map(|(img, t)| model.loss(img, t))
        .collect::<Result<_>>()?;
    Ok(losses.into_iter().sum::<T>() / T::from_usize(pairs.len()).unwrap())
}

/// Mini-batch SGD on the soft-Dice loss with keep-best checkpoints.
pub fn seg_train<T: Real>(pairs: &[(ScalarField<T>, LabelMap)], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let Some((first_img, first_labels)) = pairs.first() else {
        return Err(Error::Empty("training pairs"));
    };
    let classes = first_labels.num_classes();
    for (img, labels) in pairs {
        img.dims().ensure_same(&labels.dims())?;
        if labels.num_classes() != classes {
            return Err(Error::ClassMismatch {
                left: classes,
                right: labels.num_classes(),
            });
        }
    }
    let three_d = !first_img.dims().is_2d();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SegModel::init(cfg.hidden, classes, three_d, &mut rng)?;
    let targets: Vec<(ScalarField<T>, ProbMask<T>)> =
        pairs.iter().map(|(i, l)| (i.clone(), l.one_hot())).collect();
    model.set_prior_bias(&class_frequencies(pairs, classes));
    let initial_loss = dataset_loss(&model, &targets)?;
    let mut best = (initial_loss, model.clone());
    let lr = T::lit(cfg.lr);
    let inv_batch = T::one() / T::from_usize(cfg.batch).unwrap();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // per-sample seeds are drawn sequentially so results do not depend on thread count
        let draws: Vec<(usize, u64)> = (0..cfg.batch)
            .map(|_| (rng.gen_range(0..pairs.len()), rng.gen()))
            .collect();
        let results: Vec<(T, SegGrads<T>)> = draws
            .par_iter()
            .map(|&(idx, seed)| {
                if cfg.augment {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    let (img, labels) = augment(&pairs[idx].0, &pairs[idx].1, &mut r, &cfg.augment_strength)?;
                    model.loss_and_grad(&img, &labels.one_hot())
                } else {
                    model.loss_and_grad(&targets[idx].0, &targets[idx].1)
                }
            })
            .collect::<Result<_>>()?;
        let mut iter = results.into_iter();
        let (mut loss, mut grads) = iter.next().unwrap();
        for (l, g) in iter {
            loss = loss + l;
            grads.add_assign(&g);
        }
        loss = loss * inv_batch;
        grads.scale(inv_batch);
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: "seg_train",
                level: 0,
                step,
                trace: trace.iter().map(|v| v.as_f64()).collect(),
            });
        }
        let step_lr = if cfg.normalize_grad {
            let norm = grads.flatten().iter().map(|&g| g * g).sum::<T>().sqrt();
            lr / norm.max(T::lit(1e-12))
        } else {
            lr
        };
        model.sgd_step(&grads, step_lr);
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let l = dataset_loss(&model, &targets)?;
            if l < best.0 {
                best = (l, model.clone());
            }
        }
    }
    Ok(TrainOutcome {
        model: best.1,
        loss_trace: trace,
        initial_loss,
        final_loss: best.0,
    })
}
