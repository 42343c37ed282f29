use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{train, TrainConfig};
use crate::data::DatasetDescriptor;
use crate::error::Result;
use crate::infer::{evaluate_dataset, InferenceConfig, PseudoLabelConfig};
use crate::losses::LossToggles;

/// The four loss combinations compared by the ablation, classification
/// always on.
pub const ABLATION_ROWS: [LossToggles; 4] = [
    LossToggles {
        enable_p_cls: false,
        enable_re: false,
    },
    LossToggles {
        enable_p_cls: true,
        enable_re: false,
    },
    LossToggles {
        enable_p_cls: false,
        enable_re: true,
    },
    LossToggles {
        enable_p_cls: true,
        enable_re: true,
    },
];

/// How trained models are scored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub inference: InferenceConfig,
    pub pseudo: PseudoLabelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: LossToggles,
    pub seed: u64,
    /// Hash of the full training config (output directory excluded).
    pub config_hash: String,
    pub miou: f64,
    pub threshold: f64,
}

impl AblationRow {
    pub fn name(&self) -> String {
        row_name(self.toggles)
    }
}

/// `cls`, `cls+p_cls`, `cls+re` or `cls+p_cls+re`.
pub fn row_name(t: LossToggles) -> String {
    let mut s = String::from("cls");
    if t.enable_p_cls {
        s.push_str("+p_cls");
    }
    if t.enable_re {
        s.push_str("+re");
    }
    s
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// One line per row with check marks for each loss term.
    pub fn to_text(&self) -> String {
        let mark = |on: bool| if on { "✓" } else { " " };
        let mut s = String::from("L_cls  L_p-cls  L_re   mIoU (%)  seed  config\n");
        for r in &self.rows {
            writeln!(
                s,
                "  {}      {}       {}    {:7.2}  {:>4}  {}",
                mark(true),
                mark(r.toggles.enable_p_cls),
                mark(r.toggles.enable_re),
                r.miou * 100.0,
                r.seed,
                r.config_hash
            )
            .unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("cls,p_cls,re,miou,threshold,seed,config_hash\n");
        for r in &self.rows {
            writeln!(
                s,
                "1,{},{},{},{},{},{}",
                r.toggles.enable_p_cls as u8, r.toggles.enable_re as u8, r.miou, r.threshold, r.seed, r.config_hash
            )
            .unwrap();
        }
        s
    }
}

pub(crate) fn config_hash(cfg: &TrainConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = Default::default();
    let json = serde_json::to_vec(&c).expect("config serializes");
    Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains one model per entry of `rows` from the same seed and scores each
/// with pseudo-label mIoU on `dataset`. Row `k` writes into
/// `base.out_dir/<row name>`.
pub fn run_ablation(
    base: &TrainConfig,
    dataset: &DatasetDescriptor,
    eval: &EvalSettings,
    rows: &[LossToggles],
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &toggles in rows {
        let cfg = TrainConfig {
            toggles,
            out_dir: base.out_dir.join(row_name(toggles)),
            ..base.clone()
        };
        let outcome = train(&cfg, dataset)?;
        let report = evaluate_dataset(
            &outcome.model,
            dataset,
            &eval.inference,
            &eval.pseudo,
            !cfg.deterministic,
        )?;
        table.rows.push(AblationRow {
            toggles,
            seed: cfg.seed,
            config_hash: config_hash(&cfg),
            miou: report.mean_iou,
            threshold: eval.pseudo.threshold,
        });
    }
    Ok(table)
}
