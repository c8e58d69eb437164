//! Benchmark matrix execution with per-cell isolation and shared trainings.
//!
//! Cases 1 and 2 of one (family, ratio, seed) cell share their trained model
//! (they differ only in the test set), and Case 3 fine-tunes that same model,
//! so the runner trains each base at most once. Cell failures are recorded
//! and the matrix continues.

use std::collections::HashMap;
use std::sync::Arc;

use crate::channel::Dataset;
use crate::codec::{Family, Model, ModelSpec, Ratio};
use crate::train::{finetune, train, TrainConfig};
use crate::util::{fnv1a64, mix64};
use crate::{Error, Result};

use super::cases::{
    audit_hygiene, evaluate_on, mixed_dataset, report_is_consistent, CaseConfig, EvalReport,
    GeneralizationCase,
};

/// Named datasets shared across cells.
#[derive(Debug, Clone, Default)]
pub struct DatasetStore {
    map: HashMap<String, Arc<Dataset>>,
}

impl DatasetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, ds: Dataset) {
        self.map.insert(name.into(), Arc::new(ds));
    }

    pub fn get(&self, name: &str) -> Result<&Dataset> {
        self.map
            .get(name)
            .map(|a| a.as_ref())
            .ok_or_else(|| Error::Dataset(format!("unknown dataset `{name}`")))
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.map.keys().map(|s| s.as_str()).collect();
        v.sort_unstable();
        v
    }
}

/// One matrix request: the cross product of families, ratios, cases, seeds.
#[derive(Debug, Clone)]
pub struct MatrixRequest {
    pub families: Vec<Family>,
    pub crs: Vec<Ratio>,
    pub cases: Vec<GeneralizationCase>,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub geometry: (usize, usize),
    pub train: TrainConfig,
    pub finetune: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutput {
    pub reports: Vec<EvalReport>,
    /// (cell label, error) for cells that failed; the matrix still completes.
    pub failures: Vec<(String, String)>,
}

impl BenchmarkOutput {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Spec plus derived per-cell seeds for one (family, cr, seed) group.
fn cell_spec(req: &MatrixRequest, family: Family, cr: Ratio, seed: u64) -> (ModelSpec, CaseConfig) {
    let tag = fnv1a64(format!("{}/{}/{}", family.name(), cr, seed).as_bytes());
    let mut spec = ModelSpec::new(family, cr, mix64(req.master_seed ^ tag));
    spec.n_delay = req.geometry.0;
    spec.n_angle = req.geometry.1;
    let mut cfg = CaseConfig {
        train: req.train.clone(),
        finetune: req.finetune.clone(),
    };
    cfg.train.seed = mix64(spec.init_seed ^ 0x7472);
    cfg.finetune.seed = mix64(spec.init_seed ^ 0x6674);
    (spec, cfg)
}

/// Execute the matrix. Reports arrive in deterministic order (families, then
/// ratios, then seeds, then cases as requested).
pub fn benchmark_matrix(req: &MatrixRequest, datasets: &DatasetStore) -> Result<BenchmarkOutput> {
    if req.families.is_empty() || req.crs.is_empty() || req.cases.is_empty() || req.seeds.is_empty() {
        return Err(Error::InvalidArg("empty benchmark matrix".into()));
    }
    for case in &req.cases {
        case.validate()?;
    }
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for &family in &req.families {
        for &cr in &req.crs {
            for &seed in &req.seeds {
                let (spec, cfg) = cell_spec(req, family, cr, seed);
                run_group(&spec, &cfg, seed, &req.cases, datasets, &mut reports, &mut failures);
            }
        }
    }
    for r in &reports {
        if !report_is_consistent(r) {
            return Err(Error::Protocol(format!(
                "inconsistent report for {}/{} case {}",
                r.family.name(),
                r.cr,
                r.case_id
            )));
        }
    }
    Ok(BenchmarkOutput { reports, failures })
}

/// All requested cases for one (family, cr, seed), training the shared base
/// model at most once.
fn run_group(
    spec: &ModelSpec,
    cfg: &CaseConfig,
    seed_label: u64,
    cases: &[GeneralizationCase],
    datasets: &DatasetStore,
    reports: &mut Vec<EvalReport>,
    failures: &mut Vec<(String, String)>,
) {
    // base model per dataset_a (cases 1-3 share it)
    let mut bases: HashMap<String, (Model, crate::train::TrainHistory)> = HashMap::new();
    for case in cases {
        let label = format!("{}/{}/case{}/seed{}", spec.family.name(), spec.cr, case.id, seed_label);
        let result = run_case_shared(case, spec, cfg, seed_label, datasets, &mut bases);
        match result {
            Ok(r) => reports.push(r),
            Err(e) => failures.push((label, e.to_string())),
        }
    }
}

fn base_for<'m>(
    name: &str,
    spec: &ModelSpec,
    cfg: &CaseConfig,
    datasets: &DatasetStore,
    bases: &'m mut HashMap<String, (Model, crate::train::TrainHistory)>,
) -> Result<&'m (Model, crate::train::TrainHistory)> {
    if !bases.contains_key(name) {
        let data = datasets.get(name)?;
        let model = Model::build(spec)?;
        let trained = train(&model, data, &cfg.train)?;
        bases.insert(name.to_string(), trained);
    }
    Ok(&bases[name])
}

fn run_case_shared(
    case: &GeneralizationCase,
    spec: &ModelSpec,
    cfg: &CaseConfig,
    seed_label: u64,
    datasets: &DatasetStore,
    bases: &mut HashMap<String, (Model, crate::train::TrainHistory)>,
) -> Result<EvalReport> {
    case.validate()?;
    let complexity = crate::codec::count_complexity(spec)?;
    let a = datasets.get(&case.dataset_a)?;
    let mut histories = Vec::new();
    let mut exposure = vec![(case.dataset_a.clone(), a.train_idx.clone())];
    let mut epochs = cfg.train.epochs;

    let (model, test_name): (Model, String) = match case.id {
        1 => {
            let (m, h) = base_for(&case.dataset_a, spec, cfg, datasets, bases)?.clone();
            histories.push(h);
            (m, case.dataset_a.clone())
        }
        2 => {
            let b_name = case.dataset_b.clone().unwrap();
            let (m, h) = base_for(&case.dataset_a, spec, cfg, datasets, bases)?.clone();
            histories.push(h);
            (m, b_name)
        }
        3 => {
            let b_name = case.dataset_b.clone().unwrap();
            let b = datasets.get(&b_name)?;
            let (base, h) = base_for(&case.dataset_a, spec, cfg, datasets, bases)?.clone();
            histories.push(h);
            let (tuned, h2) = finetune(&base, b, &cfg.finetune)?;
            epochs += cfg.finetune.epochs;
            let used = ((b.train_idx.len() as f64) * cfg.finetune.finetune_fraction).ceil() as usize;
            exposure.push((b_name.clone(), b.train_idx.iter().take(used.max(1)).cloned().collect()));
            histories.push(h2);
            (tuned, b_name)
        }
        4 => {
            let b_name = case.dataset_b.clone().unwrap();
            let b = datasets.get(&b_name)?;
            let (mixed, b_used) = mixed_dataset(a, b, case.mix_fraction.unwrap())?;
            let model = Model::build(spec)?;
            let (m, h) = train(&model, &mixed, &cfg.train)?;
            histories.push(h);
            exposure.push((b_name.clone(), b_used));
            (m, b_name)
        }
        _ => unreachable!("validated"),
    };

    let test_ds = datasets.get(&test_name)?;
    let test_indices = (test_name, test_ds.val_idx.clone());
    audit_hygiene(&exposure, &test_indices)?;
    let (nmse_linear, nmse_db, sgcs, skipped) = evaluate_on(&model, test_ds, cfg.train.batch_size)?;
    Ok(EvalReport {
        family: spec.family,
        cr: spec.cr,
        case_id: case.id,
        nmse_linear,
        nmse_db,
        sgcs,
        flops: complexity.flops,
        parameters: complexity.parameters,
        epochs,
        seed: seed_label,
        dataset_a: case.dataset_a.clone(),
        dataset_b: case.dataset_b.clone(),
        mix_fraction: case.mix_fraction,
        skipped_samples: skipped,
        histories,
        exposure,
        test_indices,
    })
}

// ── rendering ────────────────────────────────────────────────────────

pub const CSV_HEADER: &str =
    "family,cr,case,nmse_db,nmse_linear,sgcs,flops,params,epochs,seed,dataset_a,dataset_b,mix_fraction";

fn fmt_f64(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

/// Deterministic results CSV (fixed column order, shortest-roundtrip floats).
pub fn render_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.family.name(),
            r.cr,
            r.case_id,
            fmt_f64(r.nmse_db),
            fmt_f64(r.nmse_linear),
            fmt_f64(r.sgcs),
            r.flops,
            r.parameters,
            r.epochs,
            r.seed,
            r.dataset_a,
            r.dataset_b.as_deref().unwrap_or(""),
            r.mix_fraction.map(fmt_f64).unwrap_or_default(),
        ));
    }
    out
}

/// Plot-ready series rendered as small CSV files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotSeries {
    pub filename: String,
    pub csv: String,
}

pub fn plot_series(reports: &[EvalReport]) -> Vec<PlotSeries> {
    let mut out = Vec::new();
    let mut case_ids: Vec<u8> = reports.iter().map(|r| r.case_id).collect();
    case_ids.sort_unstable();
    case_ids.dedup();
    // NMSE vs compression ratio, one panel per case
    for case in case_ids {
        let mut csv = String::from("family,cr_denominator,nmse_db\n");
        for r in reports.iter().filter(|r| r.case_id == case) {
            csv.push_str(&format!("{},{},{}\n", r.family.name(), r.cr.den, fmt_f64(r.nmse_db)));
        }
        out.push(PlotSeries {
            filename: format!("plot_nmse_vs_cr_case{case}.csv"),
            csv,
        });
    }
    // NMSE vs FLOPs scatter across every cell
    let mut csv = String::from("family,cr_denominator,case,flops,nmse_db\n");
    for r in reports {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.family.name(),
            r.cr.den,
            r.case_id,
            r.flops,
            fmt_f64(r.nmse_db)
        ));
    }
    out.push(PlotSeries {
        filename: "plot_nmse_vs_flops.csv".to_string(),
        csv,
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_dataset, ScenarioProfile};

    fn store() -> DatasetStore {
        let mut outdoor = ScenarioProfile::outdoor_like(41);
        outdoor.n_subcarriers = 64;
        outdoor.n_tx_antennas = 8;
        let mut indoor = ScenarioProfile::indoor_like(42);
        indoor.n_subcarriers = 64;
        indoor.n_tx_antennas = 8;
        let mut s = DatasetStore::new();
        s.insert("A", build_dataset(&outdoor, 30, 8).unwrap());
        s.insert("B", build_dataset(&indoor, 20, 8).unwrap());
        s
    }

    fn tiny_request() -> MatrixRequest {
        let mut train = TrainConfig::desk_scratch(0);
        train.epochs = 2;
        train.batch_size = 8;
        let mut ft = TrainConfig::desk_finetune(0);
        ft.epochs = 1;
        ft.batch_size = 8;
        MatrixRequest {
            families: vec![Family::Mlp, Family::Cnn],
            crs: vec![Ratio::one_over(4)],
            cases: vec![
                GeneralizationCase::case1("A"),
                GeneralizationCase::case2("A", "B"),
                GeneralizationCase::case3("A", "B"),
                GeneralizationCase::case4("A", "B", Some(0.2)),
            ],
            seeds: vec![1],
            master_seed: 99,
            geometry: (8, 8),
            train,
            finetune: ft,
        }
    }

    #[test]
    fn matrix_cardinality_and_determinism() {
        let store = store();
        let req = tiny_request();
        let out = benchmark_matrix(&req, &store).unwrap();
        assert_eq!(out.reports.len(), 2 * 1 * 4);
        assert!(out.failures.is_empty());
        let out2 = benchmark_matrix(&req, &store).unwrap();
        assert_eq!(render_csv(&out.reports), render_csv(&out2.reports));
    }

    #[test]
    fn case1_and_case2_share_the_base_training() {
        let store = store();
        let out = benchmark_matrix(&tiny_request(), &store).unwrap();
        let c1 = out.reports.iter().find(|r| r.case_id == 1).unwrap();
        let c2 = out.reports.iter().find(|r| r.case_id == 2).unwrap();
        assert_eq!(c1.histories[0].loss_trace(), c2.histories[0].loss_trace());
    }

    #[test]
    fn failed_cells_are_flagged_not_fatal() {
        let store = store();
        let mut req = tiny_request();
        req.cases.push(GeneralizationCase::case2("A", "missing"));
        let out = benchmark_matrix(&req, &store).unwrap();
        assert!(out.is_partial());
        assert_eq!(out.failures.len(), 2); // one per family
        assert_eq!(out.reports.len(), 8);
    }

    #[test]
    fn csv_schema_is_stable() {
        let store = store();
        let out = benchmark_matrix(&tiny_request(), &store).unwrap();
        let csv = render_csv(&out.reports);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        for line in lines {
            assert_eq!(line.split(',').count(), 13, "{line}");
        }
        let plots = plot_series(&out.reports);
        assert!(plots.iter().any(|p| p.filename == "plot_nmse_vs_flops.csv"));
        assert_eq!(plots.len(), 5); // 4 case panels + scatter
    }
}
