//! Finite-difference checks of the pipeline's trainable parameter groups on a
//! small configuration covering every missing pattern.

use std::fmt;
use std::str::FromStr;

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{grad_check, GradCheckReport, Tape, Var};

use super::config::ExperimentConfig;
use super::train::{prepare_all, prepare_data};

pub const GRAD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradModule {
    Generator,
    Prompter,
    Head,
    Pipeline,
}

impl GradModule {
    pub const ALL: [GradModule; 4] = [Self::Generator, Self::Prompter, Self::Head, Self::Pipeline];

    fn tracks(self, name: &str) -> bool {
        match self {
            Self::Generator => name.starts_with("generator."),
            Self::Prompter => name.starts_with("prompter."),
            Self::Head => name.ends_with("label_matrix"),
            Self::Pipeline => true,
        }
    }

    /// Parses a module name; `all` expands to every module.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        if s == "all" {
            Ok(Self::ALL.to_vec())
        } else {
            Ok(vec![s.parse()?])
        }
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generator" => Ok(Self::Generator),
            "prompter" => Ok(Self::Prompter),
            "head" => Ok(Self::Head),
            "pipeline" => Ok(Self::Pipeline),
            _ => Err(Error::Config(format!(
                "gradcheck module must be all, generator, prompter, head or pipeline, got '{s}'"
            ))),
        }
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Generator => "generator",
            Self::Prompter => "prompter",
            Self::Head => "head",
            Self::Pipeline => "pipeline",
        })
    }
}

/// A configuration small enough for coordinate-wise finite differences.
pub fn gradcheck_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "classes=3",
        "n_train=12",
        "n_val=4",
        "n_test=4",
        "topic_size=4",
        "vocab=40",
        "patch_dim=3",
        "d=4",
        "n=4",
        "m=4",
        "layers=2",
        "heads=2",
        "b=2",
        "ffn_mult=2",
        "k=2",
        "l=2",
        "missing_type=both",
        "missing_rate=0",
        "seed=11",
    ])
    .expect("valid gradcheck overrides");
    cfg
}

/// Runs the finite-difference comparison for each module, tracking only
/// that module's parameters. The loss is summed over one complete, one
/// text-missing and one image-missing instance, with dropout off.
pub fn run_gradcheck(cfg: &ExperimentConfig, modules: &[GradModule]) -> Result<Vec<(GradModule, GradCheckReport)>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(modules.len());
    for &module in modules {
        let (model, mut store) = Model::new(cfg.model_config())?;
        let data = prepare_data(cfg, &model)?;
        if data.train.len() < 3 {
            return Err(Error::Config(
                "gradcheck needs at least three training instances".into(),
            ));
        }
        let mut picked = data.train[..3].to_vec();
        picked[1].drop_modality(Modality::Text)?;
        picked[2].drop_modality(Modality::Image)?;
        let prepared = prepare_all(&model, &data.bank, &picked)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let on = store.get(id).requires_grad && module.tracks(store.name(id));
            store.set_requires_grad(id, on);
        }
        let report = grad_check(&mut store, GRAD_STEP, |tape: &mut Tape, s| -> Result<Var> {
            let mut total = model.loss(tape, s, &prepared[0], None)?.0;
            for p in &prepared[1..] {
                let l = model.loss(tape, s, p, None)?.0;
                total = tape.add(total, l)?;
            }
            Ok(total)
        })?;
        out.push((module, report));
    }
    Ok(out)
}
