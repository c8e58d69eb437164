//! The four-case generalization protocol.
//!
//! Case 1 trains and tests inside dataset A (disjoint splits). Case 2 tests
//! the A-trained model on dataset B unseen. Case 3 fine-tunes the A-trained
//! model on B's training split first. Case 4 trains on A plus a fraction of
//! B's training split. Test sets are always validation splits, disjoint from
//! everything any phase trained on; the runner audits that before reporting.

use serde::{Deserialize, Serialize};

use crate::channel::{CsiSample, Dataset, DatasetMeta};
use crate::codec::{batch_from_samples, count_complexity, Family, Model, ModelSpec, Ratio};
use crate::train::{finetune, train, TrainConfig, TrainHistory, TrainMode};
use crate::{Error, Result};

use super::matrix::DatasetStore;
use super::metrics::{nmse_db, sample_metrics, NmseAccumulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationCase {
    pub id: u8,
    pub dataset_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_fraction: Option<f64>,
}

impl GeneralizationCase {
    pub fn case1(a: impl Into<String>) -> Self {
        GeneralizationCase {
            id: 1,
            dataset_a: a.into(),
            dataset_b: None,
            mix_fraction: None,
        }
    }

    pub fn case2(a: impl Into<String>, b: impl Into<String>) -> Self {
        GeneralizationCase {
            id: 2,
            dataset_a: a.into(),
            dataset_b: Some(b.into()),
            mix_fraction: None,
        }
    }

    pub fn case3(a: impl Into<String>, b: impl Into<String>) -> Self {
        GeneralizationCase {
            id: 3,
            dataset_a: a.into(),
            dataset_b: Some(b.into()),
            mix_fraction: None,
        }
    }

    /// Default mix fraction is 0.2 when `None` is given.
    pub fn case4(a: impl Into<String>, b: impl Into<String>, mix_fraction: Option<f64>) -> Self {
        GeneralizationCase {
            id: 4,
            dataset_a: a.into(),
            dataset_b: Some(b.into()),
            mix_fraction: Some(mix_fraction.unwrap_or(0.2)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.id {
            1 => {
                if self.dataset_b.is_some() {
                    return Err(Error::InvalidArg("case 1 forbids dataset_b".into()));
                }
            }
            2 | 3 => {
                if self.dataset_b.is_none() {
                    return Err(Error::InvalidArg(format!("case {} requires dataset_b", self.id)));
                }
            }
            4 => {
                if self.dataset_b.is_none() {
                    return Err(Error::InvalidArg("case 4 requires dataset_b".into()));
                }
                match self.mix_fraction {
                    Some(f) if f > 0.0 && f <= 1.0 => {}
                    other => {
                        return Err(Error::InvalidArg(format!(
                            "case 4 requires mix_fraction in (0,1], got {other:?}"
                        )))
                    }
                }
            }
            other => return Err(Error::InvalidArg(format!("unknown case id {other}"))),
        }
        Ok(())
    }
}

/// Scratch and fine-tune configurations for one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseConfig {
    pub train: TrainConfig,
    pub finetune: TrainConfig,
}

impl CaseConfig {
    pub fn desk(seed: u64) -> Self {
        CaseConfig {
            train: TrainConfig::desk_scratch(seed),
            finetune: TrainConfig::desk_finetune(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.finetune.validate()?;
        if self.train.mode != TrainMode::Scratch || self.finetune.mode != TrainMode::Finetune {
            return Err(Error::InvalidArg(
                "case config needs a scratch train config and a finetune config".into(),
            ));
        }
        Ok(())
    }
}

/// One benchmark cell: KPIs, complexity, and training cost for a
/// (model, compression ratio, case) triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub family: Family,
    pub cr: Ratio,
    pub case_id: u8,
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub sgcs: f64,
    pub flops: u64,
    pub parameters: u64,
    /// Total gradient epochs applied (scratch plus fine-tune).
    pub epochs: usize,
    pub seed: u64,
    pub dataset_a: String,
    pub dataset_b: Option<String>,
    pub mix_fraction: Option<f64>,
    /// Test samples excluded because the reference had zero norm.
    pub skipped_samples: usize,
    pub histories: Vec<TrainHistory>,
    /// Gradient exposure per dataset, for the protocol audit.
    #[serde(skip)]
    pub exposure: Vec<(String, Vec<u32>)>,
    /// Test index set (dataset name, validation indices).
    #[serde(skip)]
    pub test_indices: (String, Vec<u32>),
}

/// Evaluate a model on a dataset's validation split: dataset-level NMSE
/// (mean of per-sample ratios), mean SGCS, skipped count.
pub(crate) fn evaluate_on(
    model: &Model,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64, f64, usize)> {
    let mut nmse = NmseAccumulator::new();
    let mut sgcs_sum = 0.0;
    let mut sgcs_n = 0usize;
    for chunk in data.val_idx.chunks(batch_size.max(1)) {
        let batch = batch_from_samples(chunk.iter().map(|&i| &data.samples[i as usize]))?;
        let out = model.reconstruct_batch(&batch)?;
        let plane = data.n_delay * data.n_angle;
        let od = out.data();
        for (k, &idx) in chunk.iter().enumerate() {
            let s = &data.samples[idx as usize];
            let base = k * 2 * plane;
            let rec = CsiSample {
                real_plane: od[base..base + plane].to_vec(),
                imag_plane: od[base + plane..base + 2 * plane].to_vec(),
                ..s.clone()
            };
            let (ratio, sg) = sample_metrics(s, &rec)?;
            nmse.push(ratio);
            if ratio.is_some() {
                sgcs_sum += sg;
                sgcs_n += 1;
            }
        }
    }
    Ok((
        nmse.linear(),
        nmse.db(),
        sgcs_sum / sgcs_n.max(1) as f64,
        nmse.skipped,
    ))
}

/// Fail unless every test index is disjoint from every same-dataset exposure.
pub(crate) fn audit_hygiene(
    exposure: &[(String, Vec<u32>)],
    test: &(String, Vec<u32>),
) -> Result<()> {
    use std::collections::HashSet;
    let test_set: HashSet<u32> = test.1.iter().cloned().collect();
    for (name, indices) in exposure {
        if *name != test.0 {
            continue;
        }
        if let Some(i) = indices.iter().find(|i| test_set.contains(i)) {
            return Err(Error::Protocol(format!(
                "test index {i} of dataset `{name}` was seen in training"
            )));
        }
    }
    Ok(())
}

/// A-train plus the leading `fraction` of B-train, with B's validation split
/// carried over for model selection.
pub(crate) fn mixed_dataset(a: &Dataset, b: &Dataset, fraction: f64) -> Result<(Dataset, Vec<u32>)> {
    if a.n_delay != b.n_delay || a.n_angle != b.n_angle {
        return Err(Error::Dataset(format!(
            "cannot mix datasets with geometries {}x{} and {}x{}",
            a.n_delay, a.n_angle, b.n_delay, b.n_angle
        )));
    }
    let take = ((b.train_idx.len() as f64) * fraction).ceil().max(1.0) as usize;
    let b_subset: Vec<u32> = b.train_idx.iter().take(take).cloned().collect();
    let offset = a.samples.len() as u32;
    let mut samples = a.samples.clone();
    samples.extend(b.samples.iter().cloned());
    let mut train_idx = a.train_idx.clone();
    train_idx.extend(b_subset.iter().map(|i| i + offset));
    let val_idx: Vec<u32> = b.val_idx.iter().map(|i| i + offset).collect();
    let mut meta: DatasetMeta = a.meta.clone();
    meta.profile.name = format!("{}+{}", a.name(), b.name());
    Ok((
        Dataset {
            samples,
            meta,
            n_delay: a.n_delay,
            n_angle: a.n_angle,
            train_idx,
            val_idx,
        },
        b_subset,
    ))
}

/// Run one generalization case end to end.
pub fn run_case(
    case: &GeneralizationCase,
    spec: &ModelSpec,
    cfg: &CaseConfig,
    datasets: &DatasetStore,
) -> Result<EvalReport> {
    case.validate()?;
    cfg.validate()?;
    let a = datasets.get(&case.dataset_a)?;
    let complexity = count_complexity(spec)?;
    let model = Model::build(spec)?;

    let mut histories = Vec::new();
    let mut exposure: Vec<(String, Vec<u32>)> = Vec::new();
    let mut epochs = 0usize;

    let (final_model, test_ds) = match case.id {
        1 => {
            let (m, h) = train(&model, a, &cfg.train)?;
            epochs += cfg.train.epochs;
            histories.push(h);
            exposure.push((case.dataset_a.clone(), a.train_idx.clone()));
            (m, a)
        }
        2 => {
            let b = datasets.get(case.dataset_b.as_ref().unwrap())?;
            let (m, h) = train(&model, a, &cfg.train)?;
            epochs += cfg.train.epochs;
            histories.push(h);
            exposure.push((case.dataset_a.clone(), a.train_idx.clone()));
            (m, b)
        }
        3 => {
            let b_name = case.dataset_b.as_ref().unwrap();
            let b = datasets.get(b_name)?;
            let (m, h) = train(&model, a, &cfg.train)?;
            epochs += cfg.train.epochs;
            histories.push(h);
            exposure.push((case.dataset_a.clone(), a.train_idx.clone()));
            let (m, h) = finetune(&m, b, &cfg.finetune)?;
            epochs += cfg.finetune.epochs;
            let used = ((b.train_idx.len() as f64) * cfg.finetune.finetune_fraction).ceil() as usize;
            exposure.push((b_name.clone(), b.train_idx.iter().take(used.max(1)).cloned().collect()));
            histories.push(h);
            (m, b)
        }
        4 => {
            let b_name = case.dataset_b.as_ref().unwrap();
            let b = datasets.get(b_name)?;
            let (mixed, b_used) = mixed_dataset(a, b, case.mix_fraction.unwrap())?;
            let (m, h) = train(&model, &mixed, &cfg.train)?;
            epochs += cfg.train.epochs;
            histories.push(h);
            exposure.push((case.dataset_a.clone(), a.train_idx.clone()));
            exposure.push((b_name.clone(), b_used));
            (m, b)
        }
        _ => unreachable!("validated above"),
    };

    let test_name = match case.id {
        1 => case.dataset_a.clone(),
        _ => case.dataset_b.clone().unwrap(),
    };
    let test_indices = (test_name, test_ds.val_idx.clone());
    audit_hygiene(&exposure, &test_indices)?;

    let (nmse_linear, nmse_db_v, sgcs, skipped) = evaluate_on(&final_model, test_ds, cfg.train.batch_size)?;
    Ok(EvalReport {
        family: spec.family,
        cr: spec.cr,
        case_id: case.id,
        nmse_linear,
        nmse_db: nmse_db_v,
        sgcs,
        flops: complexity.flops,
        parameters: complexity.parameters,
        epochs,
        seed: cfg.train.seed,
        dataset_a: case.dataset_a.clone(),
        dataset_b: case.dataset_b.clone(),
        mix_fraction: case.mix_fraction,
        skipped_samples: skipped,
        histories,
        exposure,
        test_indices,
    })
}

/// Consistency invariant: `nmse_db` and `nmse_linear` satisfy the log
/// relation (used by report validation and tests).
pub(crate) fn report_is_consistent(r: &EvalReport) -> bool {
    if r.nmse_linear > 0.0 {
        (r.nmse_db - nmse_db(r.nmse_linear)).abs() < 1e-9
    } else {
        r.nmse_db == f64::NEG_INFINITY
    }
}
