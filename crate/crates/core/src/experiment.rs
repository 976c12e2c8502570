//! Multi-run experiments: the loss-term ablation and the patch-scale sweep.
//!
//! Every variant trains its own patch from the same seed, samples and frozen
//! model, then is evaluated with identity placement.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackObserver, SceneSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_run, EvalConfig, EvalTransforms};
use crate::model::DepthModel;

/// Fields a variant may change relative to the base configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub use_d1: Option<bool>,
    pub use_d2: Option<bool>,
    pub square_d1: Option<bool>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub patch_scale_factor: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, base: &AttackConfig) -> AttackConfig {
        let mut c = base.clone();
        let w = &mut c.loss_weights;
        w.use_d1 = self.use_d1.unwrap_or(w.use_d1);
        w.use_d2 = self.use_d2.unwrap_or(w.use_d2);
        w.square_d1 = self.square_d1.unwrap_or(w.square_d1);
        w.alpha = self.alpha.unwrap_or(w.alpha);
        w.gamma = self.gamma.unwrap_or(w.gamma);
        c.patch_scale_factor = self.patch_scale_factor.unwrap_or(c.patch_scale_factor);
        c.learning_rate = self.learning_rate.unwrap_or(c.learning_rate);
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Ablation,
    ScaleSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub base: AttackConfig,
    pub variants: Vec<Variant>,
}

impl ExperimentSpec {
    /// The three loss rows: ring only, overlap only (unsquared), and the
    /// full penalized loss. TV stays on in all of them.
    pub fn ablation(base: AttackConfig) -> Self {
        let row = |name: &str, use_d1, use_d2, square_d1| Variant {
            name: name.into(),
            overrides: Overrides {
                use_d1: Some(use_d1),
                use_d2: Some(use_d2),
                square_d1: Some(square_d1),
                ..Default::default()
            },
        };
        Self {
            kind: ExperimentKind::Ablation,
            base,
            variants: alloc::vec![
                row("ring+tv", false, true, true),
                row("overlap+tv", true, false, false),
                row("full", true, true, true),
            ],
        }
    }

    pub fn scale_sweep(base: AttackConfig, scales: &[f64]) -> Self {
        Self {
            kind: ExperimentKind::ScaleSweep,
            base,
            variants: scales
                .iter()
                .map(|&s| Variant {
                    name: format!("scale {s}"),
                    overrides: Overrides {
                        patch_scale_factor: Some(s),
                        ..Default::default()
                    },
                })
                .collect(),
        }
    }

    /// Check names and every resolved configuration.
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("experiment has no variants".into()));
        }
        let mut seen = BTreeSet::new();
        for v in &self.variants {
            if !seen.insert(v.name.as_str()) {
                return Err(Error::Config(format!("duplicate variant name {:?}", v.name)));
            }
            v.overrides
                .apply(&self.base)
                .validate()
                .map_err(|e| Error::Config(format!("variant {:?}: {e}", v.name)))?;
        }
        if self.kind == ExperimentKind::ScaleSweep {
            let scales: Vec<f64> = self
                .resolved()
                .iter()
                .map(|(_, c)| c.patch_scale_factor)
                .collect();
            if scales.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "sweep scales must be strictly ascending, got {scales:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn resolved(&self) -> Vec<(String, AttackConfig)> {
        self.variants
            .iter()
            .map(|v| (v.name.clone(), v.overrides.apply(&self.base)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub patch_scale_factor: f64,
    pub e_d: f64,
    pub r_a: f64,
    pub mse: f64,
    /// Total loss of the last optimizer step.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantFailure {
    pub name: String,
    pub message: String,
}

/// What every variant shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableHeader {
    pub dataset_hash: String,
    pub seed: u64,
    pub model_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub kind: ExperimentKind,
    pub header: TableHeader,
    pub rows: Vec<TableRow>,
    /// Sweeps only: whether E_d strictly increases with the scale.
    pub e_d_monotone: Option<bool>,
    /// Set when a variant failed; `rows` then holds the ones before it.
    pub failure: Option<VariantFailure>,
}

impl ExperimentTable {
    /// Rows in variant order up to the first failure.
    pub fn assemble(
        kind: ExperimentKind,
        header: TableHeader,
        results: Vec<(String, Result<TableRow>)>,
    ) -> Self {
        let mut rows = Vec::new();
        let mut failure = None;
        for (name, r) in results {
            match r {
                Ok(row) => rows.push(row),
                Err(e) => {
                    failure = Some(VariantFailure {
                        name,
                        message: e.to_string(),
                    });
                    break;
                }
            }
        }
        let e_d_monotone = (kind == ExperimentKind::ScaleSweep && failure.is_none())
            .then(|| rows.windows(2).all(|w| w[1].e_d > w[0].e_d));
        Self {
            kind,
            header,
            rows,
            e_d_monotone,
            failure,
        }
    }

    pub fn row(&self, name: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let title = match self.kind {
            ExperimentKind::Ablation => "Loss ablation",
            ExperimentKind::ScaleSweep => "Patch scale sweep",
        };
        let _ = writeln!(s, "## {title}\n");
        let _ = writeln!(
            s,
            "dataset `{}`, seed {}, model `{}`\n",
            self.header.dataset_hash, self.header.seed, self.header.model_checksum
        );
        let _ = writeln!(s, "| variant | scale | E_d | R_a | MSE | final loss |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {:.5} | {:.5} |",
                r.name, r.patch_scale_factor, r.e_d, r.r_a, r.mse, r.final_loss
            );
        }
        if let Some(m) = self.e_d_monotone {
            let _ = writeln!(s, "\nE_d increasing with scale: {}", if m { "yes" } else { "no" });
        }
        if let Some(f) = &self.failure {
            let _ = writeln!(s, "\n**aborted** at `{}`: {}", f.name, f.message);
        }
        s
    }
}

/// Train and evaluate one variant.
pub fn run_variant(
    name: &str,
    cfg: &AttackConfig,
    samples: &[SceneSample],
    model: &dyn DepthModel,
    observer: &mut dyn AttackObserver,
) -> Result<TableRow> {
    let state = run_attack(samples, model, cfg, None, observer)?;
    let eval = EvalConfig {
        patch_scale_factor: cfg.patch_scale_factor,
        transforms: EvalTransforms::Identity,
        resize: cfg.resize,
        ..Default::default()
    };
    let report = evaluate_run(&state.patch.patch, samples, model, &eval)?;
    Ok(TableRow {
        name: name.into(),
        patch_scale_factor: cfg.patch_scale_factor,
        e_d: report.aggregate.e_d,
        r_a: report.aggregate.r_a,
        mse: report.aggregate.mse,
        final_loss: state.history.last().map_or(f64::NAN, |h| h.losses.l_total),
    })
}

/// Run every variant in order, stopping at the first failure.
pub fn run_experiment(
    spec: &ExperimentSpec,
    samples: &[SceneSample],
    model: &dyn DepthModel,
    dataset_hash: &str,
    on_row: &mut dyn FnMut(&str, &Result<TableRow>),
) -> Result<ExperimentTable> {
    spec.validate()?;
    let mut results = Vec::new();
    for (name, cfg) in spec.resolved() {
        let r = run_variant(&name, &cfg, samples, model, &mut ());
        on_row(&name, &r);
        let failed = r.is_err();
        results.push((name, r));
        if failed {
            break;
        }
    }
    Ok(ExperimentTable::assemble(
        spec.kind,
        TableHeader {
            dataset_hash: dataset_hash.into(),
            seed: spec.base.seed,
            model_checksum: model.parameter_checksum(),
        },
        results,
    ))
}
