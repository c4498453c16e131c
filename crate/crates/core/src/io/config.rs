//! Flat `key = value` configuration covering every tunable of a run.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. [`RunConfig::to_text`] emits every key in a fixed order, and parsing
//! that text reproduces the configuration exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::Dims;
use crate::pipeline::{IstRefresh, PhantomConfig, PipelineConfig};

/// Phantom dataset generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub phantom: PhantomConfig,
    pub num_unlabeled: usize,
    pub num_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            num_unlabeled: 10,
            num_test: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;

fn parse<V: std::str::FromStr>(s: &str) -> std::result::Result<V, String>
where
    V::Err: std::fmt::Display,
{
    s.parse::<V>().map_err(|e| format!("cannot parse `{s}`: {e}"))
}

macro_rules! entry {
    ($key:literal, $($path:ident).+) => {
        (
            $key,
            (|c: &RunConfig| c.$($path).+.to_string()) as Getter,
            (|c: &mut RunConfig, v: &str| {
                c.$($path).+ = parse(v)?;
                Ok(())
            }) as Setter,
        )
    };
}

fn table() -> Vec<(&'static str, Getter, Setter)> {
    vec![
        entry!("pipeline.iterations", pipeline.iterations),
        (
            "pipeline.ist_refresh",
            |c| c.pipeline.ist_refresh.as_str().to_string(),
            |c, v| {
                c.pipeline.ist_refresh = v.parse::<IstRefresh>()?;
                Ok(())
            },
        ),
        entry!("pipeline.use_ist", pipeline.use_ist),
        entry!("pipeline.seed", pipeline.seed),
        entry!("reg.lambda_smooth", pipeline.reg.lambda_smooth),
        entry!("reg.levels", pipeline.reg.levels),
        entry!("reg.steps_per_level", pipeline.reg.steps_per_level),
        entry!("reg.step_size", pipeline.reg.step_size),
        entry!("reg.nlcc_window", pipeline.reg.nlcc.window_n),
        entry!("reg.nlcc_epsilon", pipeline.reg.nlcc.epsilon),
        entry!("reg.use_fcc", pipeline.reg.use_fcc),
        entry!("reg.weak_weight", pipeline.reg.weak_weight),
        entry!("seg.steps", pipeline.seg.steps),
        entry!("seg.lr", pipeline.seg.lr),
        entry!("seg.normalize_grad", pipeline.seg.normalize_grad),
        entry!("seg.batch", pipeline.seg.batch),
        entry!("seg.hidden", pipeline.seg.hidden),
        entry!("seg.eval_every", pipeline.seg.eval_every),
        entry!("seg.copies_per_unlabeled", pipeline.seg.copies_per_unlabeled),
        entry!("seg.seed", pipeline.seg.seed),
        entry!("seg.augment", pipeline.seg.augment),
        entry!("seg.aug_rotation_deg", pipeline.seg.augment_strength.max_rotation_deg),
        entry!("seg.aug_scale_range", pipeline.seg.augment_strength.scale_range),
        entry!("seg.aug_translation", pipeline.seg.augment_strength.max_translation),
        entry!("seg.aug_bspline_spacing", pipeline.seg.augment_strength.bspline_spacing),
        entry!("seg.aug_bspline_magnitude", pipeline.seg.augment_strength.bspline_magnitude),
        entry!("synth.width", synth.phantom.dims.w),
        entry!("synth.height", synth.phantom.dims.h),
        entry!("synth.depth", synth.phantom.dims.d),
        entry!("synth.num_classes", synth.phantom.num_classes),
        entry!("synth.deformation", synth.phantom.deformation),
        entry!("synth.boundary_perturbation", synth.phantom.boundary_perturbation),
        entry!("synth.blur_sigma", synth.phantom.blur_sigma),
        entry!("synth.gamma_log_range", synth.phantom.gamma_log_range),
        entry!("synth.gain_range", synth.phantom.gain_range),
        entry!("synth.offset_range", synth.phantom.offset_range),
        entry!("synth.noise_sigma", synth.phantom.noise_sigma),
        entry!("synth.num_unlabeled", synth.num_unlabeled),
        entry!("synth.num_test", synth.num_test),
    ]
}

impl RunConfig {
    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let table = table();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| Error::Config { line: i + 1, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let (_, _, set) = table
                .iter()
                .find(|(k, _, _)| *k == key)
                .ok_or_else(|| err(format!("unknown key `{key}`")))?;
            set(self, value).map_err(|r| err(format!("{key}: {r}")))?;
        }
        self.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.synth.phantom.validate()?;
        Dims::validate(&self.synth.phantom.dims)
    }

    /// Every key with its current value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        table()
            .iter()
            .map(|(k, get, _)| format!("{k} = {}\n", get(self)))
            .collect()
    }
}
