//! Ablation studies: module variants, edge-branch input taps and edge-loss
//! weights, each trained under identical seeds and data.

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, TrainConfig, Variant};
use crate::datamodel::Sample;
use crate::error::{BgError, Result};
use crate::trainer::{evaluate_samples, train_loop, TrainOutputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AblationKind {
    Variants,
    Taps,
    Lambdas,
}

impl AblationKind {
    pub fn title(self) -> &'static str {
        match self {
            AblationKind::Variants => "module ablation",
            AblationKind::Taps => "edge-branch input features",
            AblationKind::Lambdas => "edge loss weight",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            AblationKind::Variants => "variants",
            AblationKind::Taps => "taps",
            AblationKind::Lambdas => "lambdas",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationCase {
    pub label: String,
    pub description: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub description: String,
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_beta_w: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

/// Every study requested by the configuration, in the order variants, taps,
/// lambdas.
pub fn planned_studies(run: &RunConfig) -> Result<Vec<(AblationKind, Vec<AblationCase>)>> {
    let base = run.train();
    let mut out = Vec::new();
    if !run.ablate_variants.is_empty() {
        let cases = run
            .ablate_variants
            .iter()
            .map(|&v| {
                let mut config = base.clone();
                config.model.variant = v;
                if v == Variant::Full {
                    config.model.lca_enabled = true;
                }
                AblationCase { label: format!("({})", v.label()), description: v.description().to_string(), config }
            })
            .collect();
        out.push((AblationKind::Variants, cases));
    }
    if !run.ablate_taps.is_empty() {
        let cases = run
            .ablate_taps
            .iter()
            .map(|&t| {
                let mut config = base.clone();
                config.model.eam_low_tap = t;
                AblationCase { label: format!("f{t}+f5"), description: format!("edge branch fuses f{t} with f5"), config }
            })
            .collect();
        out.push((AblationKind::Taps, cases));
    }
    if !run.ablate_lambdas.is_empty() {
        let cases = run
            .ablate_lambdas
            .iter()
            .map(|&l| {
                let mut config = base.clone();
                config.model.lambda_edge = l;
                AblationCase { label: format!("lambda={l}"), description: format!("edge dice weight {l}"), config }
            })
            .collect();
        out.push((AblationKind::Lambdas, cases));
    }
    if out.is_empty() {
        return Err(BgError::config("ablate_variants", "set at least one of ablate_variants, ablate_taps, ablate_lambdas"));
    }
    Ok(out)
}

/// Trains every case on `train` and scores it on `test`. Cases run one after
/// another unless `parallel` is set.
pub fn run_study(
    kind: AblationKind,
    cases: &[AblationCase],
    train: &[Sample],
    test: &[Sample],
    parallel: bool,
) -> Result<AblationTable> {
    let run_case = |case: &AblationCase| -> Result<AblationRow> {
        log::info!("ablation {}: training {}", kind.slug(), case.label);
        let trainer = train_loop(&case.config, train, &TrainOutputs::default(), &mut std::io::sink())?;
        let r = evaluate_samples(&trainer.model, &trainer.store, test)?;
        Ok(AblationRow {
            label: case.label.clone(),
            description: case.description.clone(),
            s_alpha: r.s_alpha,
            e_phi: r.e_phi,
            f_beta_w: r.f_beta_w,
            mae: r.mae,
        })
    };
    let rows = if parallel {
        cases.par_iter().map(run_case).collect::<Result<Vec<_>>>()?
    } else {
        cases.iter().map(run_case).collect::<Result<Vec<_>>>()?
    };
    Ok(AblationTable { kind, rows })
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut s = format!("{}\n", self.kind.title());
        s.push_str(&format!("{:<12}{:<36}{:>9}{:>9}{:>9}{:>9}\n", "setting", "", "S_alpha", "E_phi", "F_beta_w", "M"));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12}{:<36}{:>9.4}{:>9.4}{:>9.4}{:>9.4}\n",
                r.label, r.description, r.s_alpha, r.e_phi, r.f_beta_w, r.mae
            ));
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("setting\tdescription\tS_alpha\tE_phi\tF_beta_w\tMAE\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.label, r.description, r.s_alpha, r.e_phi, r.f_beta_w, r.mae
            ));
        }
        s
    }
}
