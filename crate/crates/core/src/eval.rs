//! Human-evaluation harness: majority vote, agreement and error distribution.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::dataset::Rejected;
use crate::model::{AnnotationRecord, ErrorLabel, LabelSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("majority vote needs at least 2 annotators, got {0}")]
    TooFewAnnotators(usize),
    #[error("agreement rate of an empty set is undefined")]
    Empty,
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: missing required column {column:?}")]
    Schema { path: PathBuf, column: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Agreed(LabelSet),
    NoMajority,
}

/// Labels assigned by at least two annotators. NO_ERRORS is dropped when
/// error labels are also agreed.
pub fn majority_vote(sets: &[LabelSet]) -> Result<Verdict, EvalError> {
    if sets.len() < 2 {
        return Err(EvalError::TooFewAnnotators(sets.len()));
    }
    let mut votes: BTreeMap<ErrorLabel, usize> = BTreeMap::new();
    for set in sets {
        for label in set.iter() {
            *votes.entry(label).or_insert(0) += 1;
        }
    }
    let mut agreed: Vec<ErrorLabel> = votes
        .into_iter()
        .filter(|&(_, n)| n >= 2)
        .map(|(l, _)| l)
        .collect();
    if agreed.len() > 1 {
        agreed.retain(|&l| l != ErrorLabel::NoErrors);
    }
    Ok(match LabelSet::new(agreed) {
        Ok(set) => Verdict::Agreed(set),
        Err(_) => Verdict::NoMajority,
    })
}

/// Share of items whose majority vote is not NO_MAJORITY.
pub fn agreement_rate(items: &[Vec<LabelSet>]) -> Result<f64, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut agreed = 0;
    for item in items {
        if matches!(majority_vote(item)?, Verdict::Agreed(_)) {
            agreed += 1;
        }
    }
    Ok(agreed as f64 / items.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Tier {
    NoError,
    Minor,
    Major,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::NoError => "NO_ERROR",
            Tier::Minor => "MINOR",
            Tier::Major => "MAJOR",
        }
    }
}

/// Most severe tier among the labels.
pub fn tier(labels: &LabelSet) -> Tier {
    if labels.iter().any(ErrorLabel::is_major) {
        Tier::Major
    } else if labels.iter().any(ErrorLabel::is_minor) {
        Tier::Minor
    } else {
        Tier::NoError
    }
}

/// Groups records by product: a single annotator's labels stand, several
/// are majority-voted. Products come out sorted by id.
pub fn final_verdicts(records: &[AnnotationRecord]) -> Vec<(String, Verdict)> {
    let mut by_product: BTreeMap<&str, Vec<LabelSet>> = BTreeMap::new();
    for r in records {
        by_product.entry(&r.product_id).or_default().push(r.labels.clone());
    }
    by_product
        .into_iter()
        .map(|(p, sets)| {
            let verdict = if sets.len() == 1 {
                Verdict::Agreed(sets.into_iter().next().unwrap())
            } else {
                majority_vote(&sets).expect("at least two sets")
            };
            (p.to_string(), verdict)
        })
        .collect()
}

/// Item-level annotation sets for agreement, grouped by product.
pub fn annotation_items(records: &[AnnotationRecord]) -> Vec<Vec<LabelSet>> {
    let mut by_product: BTreeMap<&str, Vec<LabelSet>> = BTreeMap::new();
    for r in records {
        by_product.entry(&r.product_id).or_default().push(r.labels.clone());
    }
    by_product.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TierRow {
    pub tier: Tier,
    pub products: u32,
    /// Share of all products, rounded to a whole percent.
    pub percent: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorDistribution {
    pub total: u32,
    pub tiers: Vec<TierRow>,
    /// Products carrying each agreed label.
    pub per_label: BTreeMap<ErrorLabel, u32>,
    /// Products without a majority; they belong to no tier.
    pub no_majority: u32,
}

impl ErrorDistribution {
    pub fn tier(&self, tier: Tier) -> &TierRow {
        self.tiers.iter().find(|r| r.tier == tier).expect("all tiers present")
    }

    pub fn label(&self, label: ErrorLabel) -> u32 {
        self.per_label.get(&label).copied().unwrap_or(0)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("Tier\tProducts\tPercent\n");
        for row in &self.tiers {
            let _ = writeln!(out, "{}\t{}\t{}", row.tier.as_str(), row.products, row.percent);
        }
        let _ = writeln!(out, "NO_MAJORITY\t{}\t", self.no_majority);
        let _ = writeln!(out, "TOTAL\t{}\t", self.total);
        out.push_str("\nLabel\tProducts\n");
        for label in ErrorLabel::ALL {
            let _ = writeln!(out, "{}\t{}", label.as_str(), self.label(label));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn whole_percent(part: u32, total: u32) -> u32 {
    if total == 0 {
        return 0;
    }
    ((f64::from(part) * 100.0 / f64::from(total)).round()) as u32
}

/// Tier and label counts over one verdict per product.
pub fn error_distribution<'a, I>(verdicts: I) -> ErrorDistribution
where
    I: IntoIterator<Item = &'a Verdict>,
{
    let mut total = 0;
    let mut no_majority = 0;
    let mut tiers: BTreeMap<Tier, u32> = BTreeMap::new();
    let mut per_label: BTreeMap<ErrorLabel, u32> = ErrorLabel::ALL.iter().map(|&l| (l, 0)).collect();
    for verdict in verdicts {
        total += 1;
        match verdict {
            Verdict::NoMajority => no_majority += 1,
            Verdict::Agreed(labels) => {
                *tiers.entry(tier(labels)).or_insert(0) += 1;
                for label in labels.iter() {
                    *per_label.entry(label).or_insert(0) += 1;
                }
            }
        }
    }
    ErrorDistribution {
        total,
        tiers: [Tier::NoError, Tier::Minor, Tier::Major]
            .into_iter()
            .map(|t| {
                let products = tiers.get(&t).copied().unwrap_or(0);
                TierRow {
                    tier: t,
                    products,
                    percent: whole_percent(products, total),
                }
            })
            .collect(),
        per_label,
        no_majority,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedAnnotations {
    pub records: Vec<AnnotationRecord>,
    pub rejects: Vec<Rejected>,
}

/// Reads `product_id, annotator_id, labels, reason` CSV; labels are
/// `;`-separated. Rows with unknown or inconsistent labels are rejected.
pub fn import_annotations(path: &Path) -> Result<LoadedAnnotations, EvalError> {
    let csv_err = |source| EvalError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EvalError::Schema {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let (pi, ai, li) = (col("product_id")?, col("annotator_id")?, col("labels")?);
    let ri = headers.iter().position(|h| h == "reason");
    let mut loaded = LoadedAnnotations {
        records: Vec::new(),
        rejects: Vec::new(),
    };
    for (i, rec) in reader.records().enumerate() {
        let parsed = rec.map_err(|e| e.to_string()).and_then(|rec| {
            let field = |idx: usize| rec.get(idx).map(str::trim).unwrap_or("");
            let product_id = field(pi);
            let annotator_id = field(ai);
            if product_id.is_empty() || annotator_id.is_empty() {
                return Err("missing product_id or annotator_id".to_string());
            }
            let labels: LabelSet = field(li).parse().map_err(|e: crate::model::ModelError| e.to_string())?;
            Ok(AnnotationRecord {
                product_id: product_id.to_string(),
                annotator_id: annotator_id.to_string(),
                labels,
                reason: ri.map(|r| field(r).to_string()).unwrap_or_default(),
            })
        });
        match parsed {
            Ok(r) => loaded.records.push(r),
            Err(reason) => loaded.rejects.push(Rejected { row: i + 1, reason }),
        }
    }
    Ok(loaded)
}

pub fn export_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), EvalError> {
    let csv_err = |source| EvalError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["product_id", "annotator_id", "labels", "reason"])
        .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.product_id.as_str(),
            r.annotator_id.as_str(),
            r.labels.to_field().as_str(),
            r.reason.as_str(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| csv_err(e.into()))
}
