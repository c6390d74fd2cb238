//! Ablation matrix: CSAA variants crossed with supervision head counts,
//! trained over shared folds and seeds, reported as CSV.

use std::fmt::Write as _;

use crate::checkpoint::load_checkpoint_bytes;
use crate::config::{CsaaVariant, ModelConfig};
use crate::dataio::{FoldSplit, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::train::{evaluate_fold, train};

/// One ablation cell: which lateral-path variant and how many heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub csaa: CsaaVariant,
    pub mps_heads: usize,
}

impl VariantSpec {
    pub fn tag(&self) -> String {
        format!("{}+mps-{}", self.csaa.as_str(), self.mps_heads)
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.csaa.variant = self.csaa;
        cfg.mps_heads = self.mps_heads;
        cfg
    }
}

/// Parses tags like `aa-all`, `mps-2`, or `aa-one+mps-3`; unspecified parts
/// fall back to the base config.
pub fn parse_variant(tag: &str, base: &ModelConfig) -> Result<VariantSpec> {
    let mut spec = VariantSpec {
        csaa: base.csaa.variant,
        mps_heads: base.mps_heads,
    };
    for part in tag.split('+') {
        let part = part.trim().to_ascii_lowercase();
        if let Some(count) = part.strip_prefix("mps-") {
            spec.mps_heads = count
                .parse()
                .map_err(|_| Error::Config(format!("bad head count in variant `{tag}`")))?;
        } else {
            spec.csaa = part.parse()?;
        }
    }
    Ok(spec)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub fold: usize,
    pub mean_dsc: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Per-variant means over every (seed, fold) cell.
    pub fn summary(&self) -> Vec<(String, f64, f64)> {
        let mut order: Vec<String> = Vec::new();
        for row in &self.rows {
            if !order.contains(&row.variant) {
                order.push(row.variant.clone());
            }
        }
        order
            .into_iter()
            .map(|variant| {
                let cells: Vec<&AblationRow> =
                    self.rows.iter().filter(|r| r.variant == variant).collect();
                let n = cells.len() as f64;
                let dsc = cells.iter().map(|r| r.mean_dsc).sum::<f64>() / n;
                let iou = cells.iter().map(|r| r.mean_iou).sum::<f64>() / n;
                (variant, dsc, iou)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,fold,mean_dsc,mean_iou\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.variant, r.seed, r.fold, r.mean_dsc, r.mean_iou
            );
        }
        s.push_str("variant,summary_mean_dsc,summary_mean_iou\n");
        for (variant, dsc, iou) in self.summary() {
            let _ = writeln!(s, "{variant},{dsc},{iou}");
        }
        s
    }

    pub fn mean_dsc_of(&self, variant: &str) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|(v, _, _)| v == variant)
            .map(|(_, dsc, _)| dsc)
    }
}

/// Trains and evaluates every variant x seed x fold cell on the shared
/// dataset; each cell evaluates its best-validation checkpoint on the fold's
/// test ids.
pub fn run_ablation<S: Scalar>(
    base: &ModelConfig,
    variants: &[VariantSpec],
    seeds: &[u64],
    folds: &[FoldSplit],
    samples: &[Sample<S>],
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() || folds.is_empty() {
        return Err(Error::Config("empty ablation matrix".into()));
    }
    let mut table = AblationTable::default();
    for variant in variants {
        for &seed in seeds {
            for fold in folds {
                let mut cfg = variant.apply(base);
                cfg.seed = seed;
                let outcome = train(&cfg, samples, Some(fold))?;
                load_checkpoint_bytes(&outcome.best_checkpoint, &outcome.model)?;
                let report = evaluate_fold(&outcome.model, samples, fold, &variant.tag())?;
                table.rows.push(AblationRow {
                    variant: variant.tag(),
                    seed,
                    fold: fold.fold,
                    mean_dsc: report.mean_dsc,
                    mean_iou: report.mean_iou,
                });
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_tags_parse_with_defaults() {
        let base = ModelConfig::desk();
        let v = parse_variant("aa-one", &base).unwrap();
        assert_eq!(v.csaa, CsaaVariant::AaOne);
        assert_eq!(v.mps_heads, base.mps_heads);
        let v = parse_variant("mps-2", &base).unwrap();
        assert_eq!(v.csaa, base.csaa.variant);
        assert_eq!(v.mps_heads, 2);
        let v = parse_variant("concat-one+mps-1", &base).unwrap();
        assert_eq!(v.csaa, CsaaVariant::ConcatOne);
        assert_eq!(v.mps_heads, 1);
        assert_eq!(v.tag(), "concat-one+mps-1");
    }

    #[test]
    fn unknown_variant_tag_is_rejected() {
        let base = ModelConfig::desk();
        assert!(parse_variant("aa-some", &base).is_err());
        assert!(parse_variant("mps-x", &base).is_err());
    }

    #[test]
    fn summary_groups_rows_by_variant() {
        let table = AblationTable {
            rows: vec![
                AblationRow {
                    variant: "a".into(),
                    seed: 1,
                    fold: 0,
                    mean_dsc: 0.5,
                    mean_iou: 0.4,
                },
                AblationRow {
                    variant: "a".into(),
                    seed: 2,
                    fold: 0,
                    mean_dsc: 0.7,
                    mean_iou: 0.6,
                },
                AblationRow {
                    variant: "b".into(),
                    seed: 1,
                    fold: 0,
                    mean_dsc: 0.9,
                    mean_iou: 0.8,
                },
            ],
        };
        let summary = table.summary();
        assert_eq!(summary.len(), 2);
        assert!((summary[0].1 - 0.6).abs() < 1e-15);
        assert_eq!(table.mean_dsc_of("b"), Some(0.9));
        let csv = table.to_csv();
        assert!(csv.contains("a,1,0,0.5,0.4"));
        assert!(csv.contains("summary_mean_dsc"));
    }
}
