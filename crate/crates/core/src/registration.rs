//! Dense deformable registration by direct minimization of
//!
//! ```text
//! L = -NLCC(A∘φ, U) - mean_c NLCC(F_c(A∘φ), F_c(U)) + λ·Smooth(φ) + w·SoftDiceLoss(S_A∘φ, Ŝ_U)
//! ```
//!
//! over a displacement field, coarse to fine. The feature term and the weak
//! label term are optional. Gradients are analytic throughout.

use crate::error::{Error, Result};
use crate::features::{fcc_loss, fcc_loss_with_grad, FeatureConfig, FeatureExtractor, FeatureStack};
use crate::fields::{
    downsample2, upsample_displacement, warp_onehot, warp_onehot_with_grad, warp_scalar, warp_scalar_with_grad,
    DisplacementField, Dims, Interpolation, LabelMap, ProbMask, ScalarField,
};
use crate::metrics::{
    nlcc_grad_slices, nlcc_slices, smoothness, smoothness_with_grad, soft_dice_grad_slices, NlccConfig,
};
use crate::real::Real;

/// Smallest extent a pyramid level may have along a non-singleton axis.
const MIN_LEVEL_EXTENT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct RegConfig {
    pub lambda_smooth: f64,
    pub levels: usize,
    pub steps_per_level: usize,
    /// Step length, in voxels of the current level, for a gradient as large
    /// as the first gradient seen at that level.
    pub step_size: f64,
    pub nlcc: NlccConfig,
    pub use_fcc: bool,
    pub weak_weight: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            lambda_smooth: 1.0,
            levels: 3,
            steps_per_level: 200,
            step_size: 0.5,
            nlcc: NlccConfig::default(),
            use_fcc: true,
            weak_weight: 1.0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_smooth >= 0.0) {
            return Err(Error::param("reg.lambda_smooth", "must be >= 0"));
        }
        if self.levels == 0 {
            return Err(Error::param("reg.levels", "must be >= 1"));
        }
        if self.steps_per_level == 0 {
            return Err(Error::param("reg.steps_per_level", "must be >= 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::param("reg.step_size", "must be > 0"));
        }
        if !(self.weak_weight >= 0.0) {
            return Err(Error::param("reg.weak_weight", "must be >= 0"));
        }
        self.nlcc.validate()
    }
}

/// Atlas labels and a fixed soft target for the warped labels.
#[derive(Debug, Clone, Copy)]
pub struct WeakSupervision<'a, T> {
    pub atlas_labels: &'a LabelMap,
    pub pseudo: &'a ProbMask<T>,
}

/// Individual loss terms (already signed, unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub l_ic: T,
    pub l_fc: T,
    pub l_smo: T,
    pub l_weak: T,
    pub total: T,
}

#[derive(Debug, Clone)]
pub struct RegResult<T> {
    pub disp: DisplacementField<T>,
    /// First entry: full-resolution loss of the zero field. Last entry:
    /// full-resolution loss of the returned field. In between: the loss at
    /// every optimizer step, level by level (coarse first).
    pub loss_trace: Vec<T>,
    /// Pyramid level of every trace entry (0 = full resolution).
    pub trace_levels: Vec<usize>,
    pub final_terms: LossTerms<T>,
}

/// One pyramid level of a registration problem with everything that does not
/// depend on the displacement precomputed.
struct LevelProblem<T: Real> {
    dims: Dims,
    atlas: ScalarField<T>,
    target: ScalarField<T>,
    nlcc: NlccConfig,
    features: Option<(FeatureExtractor<T>, FeatureStack<T>)>,
    weak: Option<(ProbMask<T>, ProbMask<T>)>,
    lambda: T,
    weak_weight: T,
}

impl<T: Real> LevelProblem<T> {
    fn new(
        atlas: ScalarField<T>,
        target: ScalarField<T>,
        cfg: &RegConfig,
        level: usize,
        weak: Option<(ProbMask<T>, ProbMask<T>)>,
    ) -> Self {
        let window = (cfg.nlcc.window_n >> level).max(2);
        let nlcc = cfg.nlcc.with_window(window);
        let features = cfg.use_fcc.then(|| {
            let fx = FeatureExtractor::new(FeatureConfig::default()).with_zscore_window(window);
            let ft = fx.extract(&target);
            (fx, ft)
        });
        Self {
            dims: atlas.dims(),
            atlas,
            target,
            nlcc,
            features,
            weak,
            lambda: T::lit(cfg.lambda_smooth),
            weak_weight: T::lit(cfg.weak_weight),
        }
    }

    fn loss(&self, disp: &DisplacementField<T>) -> Result<LossTerms<T>> {
        let warped = warp_scalar(&self.atlas, disp, Interpolation::Linear)?;
        let l_ic = -nlcc_slices(warped.data(), self.target.data(), self.dims, &self.nlcc).value;
        let l_fc = match &self.features {
            Some((fx, ft)) => fcc_loss(&fx.extract(&warped), ft, &self.nlcc)?,
            None => T::zero(),
        };
        let l_smo = smoothness(disp);
        let l_weak = match &self.weak {
            Some((atlas_soft, pseudo)) => {
                let soft = warp_onehot(atlas_soft, disp)?;
                soft_dice_grad_slices(soft.probs(), pseudo.probs(), pseudo.num_classes()).0
            }
            None => T::zero(),
        };
        Ok(self.combine(l_ic, l_fc, l_smo, l_weak))
    }

    fn combine(&self, l_ic: T, l_fc: T, l_smo: T, l_weak: T) -> LossTerms<T> {
        LossTerms {
            l_ic,
            l_fc,
            l_smo,
            l_weak,
            total: l_ic + l_fc + self.lambda * l_smo + self.weak_weight * l_weak,
        }
    }

    fn loss_and_grad(&self, disp: &DisplacementField<T>) -> Result<(LossTerms<T>, DisplacementField<T>)> {
        let (warped, d_warp) = warp_scalar_with_grad(&self.atlas, disp)?;
        let (score, g_ic) = nlcc_grad_slices(warped.data(), self.target.data(), self.dims, &self.nlcc);
        // d L / d warped
        let mut d_img: Vec<T> = g_ic.into_iter().map(|g| -g).collect();
        let mut l_fc = T::zero();
        if let Some((fx, ft)) = &self.features {
            let (fa, tape) = fx.extract_with_tape(&warped);
            let (l, g_channels) = fcc_loss_with_grad(&fa, ft, &self.nlcc)?;
            l_fc = l;
            for (d, g) in d_img.iter_mut().zip(tape.backward(&g_channels)) {
                *d = *d + g;
            }
        }
        let (l_smo, g_smo) = smoothness_with_grad(disp);
        let mut grad: Vec<[T; 3]> = (0..self.dims.len())
            .map(|i| std::array::from_fn(|a| d_img[i] * d_warp[i][a] + self.lambda * g_smo[i][a]))
            .collect();
        let mut l_weak = T::zero();
        if let Some((atlas_soft, pseudo)) = &self.weak {
            let k = pseudo.num_classes();
            let (soft, d_soft) = warp_onehot_with_grad(atlas_soft, disp)?;
            let (l, g_p) = soft_dice_grad_slices(soft.probs(), pseudo.probs(), k);
            l_weak = l;
            for (v, gv) in grad.iter_mut().enumerate() {
                for c in 0..k {
                    let coeff = self.weak_weight * g_p[v * k + c];
                    for a in 0..3 {
                        gv[a] = gv[a] + coeff * d_soft[v * k + c][a];
                    }
                }
            }
        }
        let terms = self.combine(-score.value, l_fc, l_smo, l_weak);
        Ok((terms, DisplacementField::from_raw(self.dims, grad)))
    }
}

fn check_inputs<T: Real>(
    atlas: &ScalarField<T>,
    target: &ScalarField<T>,
    weak: Option<&WeakSupervision<'_, T>>,
) -> Result<()> {
    atlas.dims().ensure_same(&target.dims())?;
    if let Some(w) = weak {
        atlas.dims().ensure_same(&w.atlas_labels.dims())?;
        atlas.dims().ensure_same(&w.pseudo.dims())?;
        if w.atlas_labels.num_classes() != w.pseudo.num_classes() {
            return Err(Error::ClassMismatch {
                left: w.atlas_labels.num_classes(),
                right: w.pseudo.num_classes(),
            });
        }
    }
    Ok(())
}

/// Registration loss and its gradient with respect to every displacement component.
pub fn reg_loss<T: Real>(
    disp: &DisplacementField<T>,
    atlas: &ScalarField<T>,
    target: &ScalarField<T>,
    cfg: &RegConfig,
    weak: Option<&WeakSupervision<'_, T>>,
) -> Result<(LossTerms<T>, DisplacementField<T>)> {
    cfg.validate()?;
    check_inputs(atlas, target, weak)?;
    disp.dims().ensure_same(&atlas.dims())?;
    let weak = weak.map(|w| (w.atlas_labels.one_hot(), w.pseudo.clone()));
    let problem = LevelProblem::new(atlas.clone(), target.clone(), cfg, 0, weak);
    let (terms, grad) = problem.loss_and_grad(disp)?;
    if !terms.total.is_finite() {
        return Err(Error::Diverged {
            stage: "reg_loss",
            level: 0,
            step: 0,
            trace: vec![terms.total.as_f64()],
        });
    }
    Ok((terms, grad))
}

fn downsample_field<T: Real>(f: &ScalarField<T>) -> ScalarField<T> {
    let (data, dims) = downsample2(f.data(), f.dims());
    ScalarField::from_raw(dims, data)
}

fn downsample_mask<T: Real>(m: &ProbMask<T>) -> ProbMask<T> {
    let k = m.num_classes();
    let channels: Vec<(Vec<T>, Dims)> = (0..k).map(|c| downsample2(m.channel(c).data(), m.dims())).collect();
    let dims = channels[0].1;
    let mut probs = vec![T::zero(); dims.len() * k];
    for (c, (data, _)) in channels.iter().enumerate() {
        for (v, &p) in data.iter().enumerate() {
            probs[v * k + c] = p;
        }
    }
    ProbMask::from_raw(dims, k, probs)
}

fn can_halve(dims: Dims) -> bool {
    (0..3).all(|a| {
        let n = dims.extent(a);
        n == 1 || n.div_ceil(2) >= MIN_LEVEL_EXTENT
    })
}

/// Coarse-to-fine gradient descent with keep-best snapshots at every level.
pub fn register<T: Real>(
    atlas: &ScalarField<T>,
    target: &ScalarField<T>,
    cfg: &RegConfig,
    weak: Option<&WeakSupervision<'_, T>>,
) -> Result<RegResult<T>> {
    cfg.validate()?;
    check_inputs(atlas, target, weak)?;

    let weak_full = weak.map(|w| (w.atlas_labels.one_hot::<T>(), w.pseudo.clone()));
    let mut pyramid = vec![(atlas.clone(), target.clone(), weak_full)];
    while pyramid.len() < cfg.levels && can_halve(pyramid.last().unwrap().0.dims()) {
        let (a, t, w) = pyramid.last().unwrap();
        let w = w.as_ref().map(|(s, p)| (downsample_mask(s), downsample_mask(p)));
        pyramid.push((downsample_field(a), downsample_field(t), w));
    }
    let problems: Vec<LevelProblem<T>> = pyramid
        .into_iter()
        .enumerate()
        .map(|(level, (a, t, w))| LevelProblem::new(a, t, cfg, level, w))
        .collect();

    let full = &problems[0];
    let zero = DisplacementField::zeros(full.dims);
    let initial = full.loss(&zero)?;
    let mut trace = vec![initial.total];
    let mut levels = vec![0];
    if !initial.total.is_finite() {
        return Err(Error::Diverged {
            stage: "register",
            level: 0,
            step: 0,
            trace: trace.iter().map(|v| v.as_f64()).collect(),
        });
    }

    let step_size = T::lit(cfg.step_size);
    let mut best_disp: Option<DisplacementField<T>> = None;
    for (level, problem) in problems.iter().enumerate().rev() {
        let mut disp = match &best_disp {
            Some(prev) => upsample_displacement(prev, problem.dims),
            None => DisplacementField::zeros(problem.dims),
        };
        let mut best_loss = T::infinity();
        let mut best = disp.clone();
        let mut grad_scale: Option<T> = None;
        for step in 0..=cfg.steps_per_level {
            let last = step == cfg.steps_per_level;
            let (terms, grad) = if last {
                (problem.loss(&disp)?, None)
            } else {
                let (t, g) = problem.loss_and_grad(&disp)?;
                (t, Some(g))
            };
            trace.push(terms.total);
            levels.push(level);
            if !terms.total.is_finite() {
                return Err(Error::Diverged {
                    stage: "register",
                    level,
                    step,
                    trace: trace.iter().map(|v| v.as_f64()).collect(),
                });
            }
            if terms.total < best_loss {
                best_loss = terms.total;
                best = disp.clone();
            }
            let Some(grad) = grad else { break };
            let scale = *grad_scale.get_or_insert_with(|| grad.max_norm());
            // the loss is a mean over voxels, so a gradient this small is rounding noise
            let stationary = T::epsilon().sqrt() * terms.total.abs().max(T::one()) / T::lit(problem.dims.len() as f64);
            if scale <= stationary {
                break;
            }
            let factor = step_size / scale;
            for (u, g) in disp.vectors_mut().iter_mut().zip(grad.vectors()) {
                for a in 0..3 {
                    u[a] = u[a] - factor * g[a];
                }
            }
        }
        best_disp = Some(best);
    }

    let mut disp = best_disp.unwrap_or(zero.clone());
    let mut final_terms = full.loss(&disp)?;
    if final_terms.total > initial.total {
        disp = zero;
        final_terms = initial;
    }
    trace.push(final_terms.total);
    levels.push(0);
    Ok(RegResult {
        disp,
        loss_trace: trace,
        trace_levels: levels,
        final_terms,
    })
}
