//! Evaluation harness and the end-to-end pipeline.
//!
//! Evaluation scores every instance under every instruction template with a
//! method-specific decision rule (plain argmax, calibrated argmax, or plain
//! argmax on a pruned model), reports per-instruction accuracy, their mean,
//! and the mean gold-label probability split by context type. The pipeline
//! chains sampling, detection, ranking, mask selection, pruning, and
//! evaluation for a configured number of trials and writes every artifact to
//! an output directory deterministically.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    calibrate, content_free_distribution, softmax, CalibrationMode, CalibrationVector,
};
use crate::checkpoint;
use crate::detector::{
    detect_averaged, rank_neurons, render_prompt, ContextType, Dataset, InstructionSet,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pruner::{apply_mask, save_mask, select_top_n, MaskProvenance, PruneMask};
use crate::runtime::{encode_once, score_labels_cached};

// ── report types ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Original,
    Cc,
    Dc,
    Crispr,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Original => "original",
            Method::Cc => "cc",
            Method::Dc => "dc",
            Method::Crispr => "crispr",
        })
    }
}

/// Detection-protocol echo carried by every report.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportConfig {
    /// Mask size (top-n).
    pub n: usize,
    pub trials: usize,
    pub samples_per_trial: usize,
    pub seeds: Vec<u64>,
    /// Sampled instance ids, one list per trial.
    pub sample_ids: Vec<Vec<String>>,
}

/// Accuracy and gold-score report for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub dataset: String,
    /// Percent correct per instruction template, template order.
    pub per_instruction_accuracy: Vec<f64>,
    /// Arithmetic mean of the per-instruction accuracies.
    pub mean_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_ambig: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_disambig: Option<f64>,
    /// Mean gold-label probability x100 over ambiguous-context instances.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_score_ambig: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_score_disambig: Option<f64>,
    pub config: ReportConfig,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json("serializing report", e))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing {}", path.display()), e))
    }
}

// ── evaluation ────────────────────────────────────────────────────────────

/// Per-(template, choice-set) memo of calibration vectors: instances sharing
/// a choice list reuse one estimated prior.
struct CalibrationCache<'a> {
    mode: CalibrationMode,
    dataset: &'a Dataset,
    seed: u64,
    cache: BTreeMap<(usize, String), CalibrationVector>,
}

impl<'a> CalibrationCache<'a> {
    fn get(
        &mut self,
        model: &Model,
        template_index: usize,
        template: &str,
        choices: &[String],
    ) -> Result<&CalibrationVector> {
        let key = (template_index, choices.join("\u{1f}"));
        if !self.cache.contains_key(&key) {
            let v = content_free_distribution(
                model,
                template,
                choices,
                self.mode,
                Some(self.dataset),
                self.seed,
            )?;
            self.cache.insert(key.clone(), v);
        }
        Ok(&self.cache[&key])
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Scores a dataset under every instruction template with the method's
/// decision rule. `seed` feeds the domain-context calibration sampling and
/// is otherwise unused.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    instructions: &InstructionSet,
    method: Method,
    seed: u64,
) -> Result<EvalReport> {
    let mut cal_cache = match method {
        Method::Cc => Some(CalibrationCache {
            mode: CalibrationMode::Cc,
            dataset,
            seed,
            cache: BTreeMap::new(),
        }),
        Method::Dc => Some(CalibrationCache {
            mode: CalibrationMode::Dc,
            dataset,
            seed,
            cache: BTreeMap::new(),
        }),
        Method::Original | Method::Crispr => None,
    };

    let n_templates = instructions.len();
    let mut per_instruction_accuracy = Vec::with_capacity(n_templates);
    let mut per_instruction_ambig_acc = Vec::with_capacity(n_templates);
    let mut per_instruction_disambig_acc = Vec::with_capacity(n_templates);
    let mut gold_sum = BTreeMap::from([(ContextType::Ambig, 0.0), (ContextType::Disambig, 0.0)]);
    let mut gold_count = BTreeMap::from([(ContextType::Ambig, 0usize), (ContextType::Disambig, 0)]);

    for (template_index, template) in instructions.templates.iter().enumerate() {
        let mut correct = 0usize;
        let mut by_type: BTreeMap<ContextType, (usize, usize)> = BTreeMap::from([
            (ContextType::Ambig, (0, 0)),
            (ContextType::Disambig, (0, 0)),
        ]);
        for instance in &dataset.instances {
            let distribution = (|| -> Result<Vec<f64>> {
                let prompt = render_prompt(template, instance);
                let enc = encode_once(model, &prompt, "")?;
                let scores = score_labels_cached(model, &enc, &instance.choices)?;
                match &mut cal_cache {
                    None => Ok(softmax(&scores)),
                    Some(cache) => {
                        let cal = cache.get(model, template_index, template, &instance.choices)?;
                        calibrate(&scores, cal)
                    }
                }
            })()
            .map_err(|e| Error::UnscorableInstance {
                id: instance.id.clone(),
                source: Box::new(e),
            })?;

            let predicted = argmax(&distribution);
            let hit = predicted == instance.gold_index;
            correct += usize::from(hit);
            let entry = by_type.get_mut(&instance.context_type).expect("both present");
            entry.0 += usize::from(hit);
            entry.1 += 1;

            *gold_sum.get_mut(&instance.context_type).unwrap() +=
                distribution[instance.gold_index] * 100.0;
            *gold_count.get_mut(&instance.context_type).unwrap() += 1;
        }
        per_instruction_accuracy.push(100.0 * correct as f64 / dataset.instances.len() as f64);
        let (ambig_hit, ambig_n) = by_type[&ContextType::Ambig];
        let (dis_hit, dis_n) = by_type[&ContextType::Disambig];
        if ambig_n > 0 {
            per_instruction_ambig_acc.push(100.0 * ambig_hit as f64 / ambig_n as f64);
        }
        if dis_n > 0 {
            per_instruction_disambig_acc.push(100.0 * dis_hit as f64 / dis_n as f64);
        }
    }

    let mean = |v: &[f64]| -> Option<f64> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let gold_mean = |ty: ContextType| -> Option<f64> {
        let count = gold_count[&ty];
        if count == 0 {
            None
        } else {
            Some(gold_sum[&ty] / count as f64)
        }
    };

    Ok(EvalReport {
        method,
        dataset: dataset.name.clone(),
        mean_accuracy: mean(&per_instruction_accuracy).expect("instructions non-empty"),
        per_instruction_accuracy,
        accuracy_ambig: mean(&per_instruction_ambig_acc),
        accuracy_disambig: mean(&per_instruction_disambig_acc),
        gold_score_ambig: gold_mean(ContextType::Ambig),
        gold_score_disambig: gold_mean(ContextType::Disambig),
        config: ReportConfig::default(),
    })
}

/// Uniform sample of `k` instances without replacement (partial
/// Fisher-Yates), deterministic for a given seed.
pub fn sample_detection_set(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 || k > dataset.instances.len() {
        return Err(Error::SampleTooLarge {
            k,
            len: dataset.instances.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..dataset.instances.len()).collect();
    for i in 0..k {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let instances = indices[..k]
        .iter()
        .map(|&i| dataset.instances[i].clone())
        .collect();
    Ok(Dataset {
        name: dataset.name.clone(),
        instances,
    })
}

// ── pipeline ──────────────────────────────────────────────────────────────

fn default_samples_per_trial() -> usize {
    10
}
fn default_trials() -> usize {
    3
}
fn default_n() -> usize {
    crate::pruner::DEFAULT_TOP_N
}

/// File-driven pipeline configuration. Omitted protocol fields default to
/// 3 trials of 10 samples with a 50-channel mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub instructions: PathBuf,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_samples_per_trial")]
    pub samples_per_trial: usize,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing {}", path.display()), e))
    }

    /// Per-trial sampling seeds: consecutive offsets from the base seed.
    pub fn trial_seeds(&self) -> Vec<u64> {
        (0..self.trials as u64).map(|t| self.seed + t).collect()
    }
}

/// Everything a pipeline run produces.
pub struct PipelineOutput {
    pub masks: Vec<PruneMask>,
    pub original: EvalReport,
    pub cc: EvalReport,
    pub dc: EvalReport,
    pub crispr_trials: Vec<EvalReport>,
    /// Trial-mean crispr report.
    pub crispr: EvalReport,
}

/// Elementwise mean of per-trial reports (method and shape must agree).
fn mean_report(reports: &[EvalReport], config: ReportConfig) -> EvalReport {
    let k = reports.len() as f64;
    let first = &reports[0];
    let n_templates = first.per_instruction_accuracy.len();
    let mut per_instruction_accuracy = vec![0.0; n_templates];
    for r in reports {
        for (acc, v) in per_instruction_accuracy.iter_mut().zip(&r.per_instruction_accuracy) {
            *acc += v / k;
        }
    }
    let mean_opt = |get: fn(&EvalReport) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = reports.iter().filter_map(get).collect();
        if vals.len() == reports.len() {
            Some(vals.iter().sum::<f64>() / k)
        } else {
            None
        }
    };
    EvalReport {
        method: first.method,
        dataset: first.dataset.clone(),
        mean_accuracy: reports.iter().map(|r| r.mean_accuracy).sum::<f64>() / k,
        per_instruction_accuracy,
        accuracy_ambig: mean_opt(|r| r.accuracy_ambig),
        accuracy_disambig: mean_opt(|r| r.accuracy_disambig),
        gold_score_ambig: mean_opt(|r| r.gold_score_ambig),
        gold_score_disambig: mean_opt(|r| r.gold_score_disambig),
        config,
    }
}

/// Runs detection trials, writes one mask per trial, evaluates all four
/// methods, and renders the report tables. Rerunning with the same config
/// reproduces every artifact byte for byte.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    let model = checkpoint::load_model(&config.checkpoint)?;
    let dataset = Dataset::load(&config.dataset)?;
    let instructions = InstructionSet::load(&config.instructions)?;
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(format!("creating {}", config.out_dir.display()), e))?;

    let seeds = config.trial_seeds();
    let mut masks = Vec::with_capacity(config.trials);
    let mut sample_ids = Vec::with_capacity(config.trials);
    for (trial, &seed) in seeds.iter().enumerate() {
        let sample = sample_detection_set(&dataset, config.samples_per_trial, seed)?;
        let ids: Vec<String> = sample.instances.iter().map(|i| i.id.clone()).collect();
        let mut map = detect_averaged(&model, &sample, &instructions)?;
        map.provenance.seed = Some(seed);
        let ranking = rank_neurons(&map)?;
        let mask = select_top_n(
            &ranking,
            config.n,
            model.base_fingerprint(),
            MaskProvenance {
                dataset: dataset.name.clone(),
                instruction_ids: (0..instructions.len()).collect(),
                sample_ids: ids.clone(),
                seed,
                trials: config.trials,
            },
        )?;
        save_mask(&mask, &config.out_dir.join(format!("mask_trial{}.json", trial + 1)))?;
        masks.push(mask);
        sample_ids.push(ids);
    }

    let echo = ReportConfig {
        n: config.n,
        trials: config.trials,
        samples_per_trial: config.samples_per_trial,
        seeds: seeds.clone(),
        sample_ids: sample_ids.clone(),
    };

    let with_echo = |mut r: EvalReport| -> EvalReport {
        r.config = echo.clone();
        r
    };
    let original = with_echo(evaluate(&model, &dataset, &instructions, Method::Original, config.seed)?);
    let cc = with_echo(evaluate(&model, &dataset, &instructions, Method::Cc, config.seed)?);
    let dc = with_echo(evaluate(&model, &dataset, &instructions, Method::Dc, config.seed)?);

    let mut crispr_trials = Vec::with_capacity(config.trials);
    for (trial, mask) in masks.iter().enumerate() {
        let pruned = apply_mask(&model, mask)?;
        let mut report = evaluate(&pruned, &dataset, &instructions, Method::Crispr, config.seed)?;
        report.config = ReportConfig {
            n: config.n,
            trials: config.trials,
            samples_per_trial: config.samples_per_trial,
            seeds: vec![seeds[trial]],
            sample_ids: vec![sample_ids[trial].clone()],
        };
        crispr_trials.push(report);
    }
    let crispr = mean_report(&crispr_trials, echo);

    original.save(&config.out_dir.join("original.json"))?;
    cc.save(&config.out_dir.join("cc.json"))?;
    dc.save(&config.out_dir.join("dc.json"))?;
    for (trial, report) in crispr_trials.iter().enumerate() {
        report.save(&config.out_dir.join(format!("crispr_trial{}.json", trial + 1)))?;
    }
    crispr.save(&config.out_dir.join("crispr.json"))?;

    let tables = render_tables(&[&original, &cc, &dc, &crispr]);
    std::fs::write(config.out_dir.join("tables.txt"), tables)
        .map_err(|e| Error::io("writing tables.txt".to_string(), e))?;

    Ok(PipelineOutput {
        masks,
        original,
        cc,
        dc,
        crispr_trials,
        crispr,
    })
}

// ── table rendering ───────────────────────────────────────────────────────

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "-".to_string(),
    }
}

/// Renders the accuracy table (method rows) and the gold-score shift table
/// (ambig/disambig columns), with the published reference numbers shown as
/// citations for scale — they come from a 250M-parameter model on real bias
/// benchmarks and are not reproduced by this desk-scale setup.
pub fn render_tables(reports: &[&EvalReport]) -> String {
    let mut out = String::new();
    let dataset = reports.first().map(|r| r.dataset.as_str()).unwrap_or("-");

    out.push_str("mean accuracy by method (percent)\n");
    out.push_str(&format!("{:<10} {:>10}\n", "method", dataset));
    for r in reports {
        out.push_str(&format!("{:<10} {:>10.2}\n", r.method.to_string(), r.mean_accuracy));
    }
    out.push_str(
        "\nreference (flan-t5-base on bbq, published): original/cc/dc/crispr accuracy\n\
         \x20 ses 65.78/45.87/49.12/72.25  age 43.81/40.80/40.71/58.49  \
         disability 44.02/44.38/44.15/57.94\n",
    );

    out.push_str("\nmean gold-label score x100 by context type\n");
    out.push_str(&format!(
        "{:<10} {:>10} {:>10}\n",
        "method", "ambig", "disambig"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<10} {:>10} {:>10}\n",
            r.method.to_string(),
            fmt_opt(r.gold_score_ambig),
            fmt_opt(r.gold_score_disambig)
        ));
    }
    out.push_str(
        "\nreference (flan-t5-base on bbq, published): original -> crispr gold score, \
         (ambig, disambig)\n\
         \x20 ses (44.36, 71.77) -> (63.14, 67.01)  age (24.19, 57.47) -> (58.57, 43.37)  \
         disability (21.32, 59.41) -> (44.93, 55.30)\n",
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{instance, template, zero_model};

    fn dataset() -> Dataset {
        let mut instances = vec![
            instance("a1", &["korv", "zelt", "marn"], 0),
            instance("a2", &["plim", "drax", "fenn"], 1),
            instance("a3", &["korv", "marn"], 1),
        ];
        let mut d1 = instance("d1", &["zelt", "drax"], 0);
        d1.context_type = ContextType::Disambig;
        let mut d2 = instance("d2", &["marn", "fenn", "korv"], 2);
        d2.context_type = ContextType::Disambig;
        instances.push(d1);
        instances.push(d2);
        Dataset::new("toy", instances).unwrap()
    }

    fn instructions() -> InstructionSet {
        InstructionSet::new(vec![
            template(),
            "given {context}, answer {question} from {choices}:".to_string(),
        ])
        .unwrap()
    }

    #[test]
    fn uniform_model_reports_chance_level_accuracy() {
        let model = zero_model();
        let report =
            evaluate(&model, &dataset(), &instructions(), Method::Original, 0).unwrap();
        // Uniform distribution -> argmax picks index 0 every time; exactly
        // the instances whose gold is 0 are "correct".
        let expected = 100.0 * 2.0 / 5.0;
        for acc in &report.per_instruction_accuracy {
            assert!((acc - expected).abs() < 1e-9);
        }
        assert!((report.mean_accuracy - expected).abs() < 1e-12);
        // Gold score = 100/|choices| averaged per context type.
        let ambig_expected = (100.0 / 3.0 + 100.0 / 3.0 + 100.0 / 2.0) / 3.0;
        assert!((report.gold_score_ambig.unwrap() - ambig_expected).abs() < 1e-9);
        let disambig_expected = (100.0 / 2.0 + 100.0 / 3.0) / 2.0;
        assert!((report.gold_score_disambig.unwrap() - disambig_expected).abs() < 1e-9);
    }

    #[test]
    fn mean_accuracy_is_the_mean_of_per_instruction_accuracies() {
        let model = zero_model();
        for method in [Method::Original, Method::Cc] {
            let report = evaluate(&model, &dataset(), &instructions(), method, 3).unwrap();
            let mean: f64 = report.per_instruction_accuracy.iter().sum::<f64>()
                / report.per_instruction_accuracy.len() as f64;
            assert_eq!(mean.to_bits(), report.mean_accuracy.to_bits());
            assert_eq!(
                report.per_instruction_accuracy.len(),
                instructions().len()
            );
        }
    }

    #[test]
    fn report_is_deterministic() {
        let model = zero_model();
        let r1 = evaluate(&model, &dataset(), &instructions(), Method::Dc, 11).unwrap();
        let r2 = evaluate(&model, &dataset(), &instructions(), Method::Dc, 11).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }

    #[test]
    fn ambig_only_dataset_leaves_disambig_fields_empty() {
        let model = zero_model();
        let ambig_only = dataset().filter_context(ContextType::Ambig).unwrap();
        let report =
            evaluate(&model, &ambig_only, &instructions(), Method::Original, 0).unwrap();
        assert!(report.accuracy_disambig.is_none());
        assert!(report.gold_score_disambig.is_none());
        assert!(report.accuracy_ambig.is_some());
    }

    #[test]
    fn sampling_is_seeded_and_without_replacement() {
        let d = dataset();
        let s1 = sample_detection_set(&d, 3, 7).unwrap();
        let s2 = sample_detection_set(&d, 3, 7).unwrap();
        let ids1: Vec<&str> = s1.instances.iter().map(|i| i.id.as_str()).collect();
        let ids2: Vec<&str> = s2.instances.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids1, ids2);
        let mut dedup = ids1.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 3);

        // k = |dataset| is a permutation of the whole dataset.
        let all = sample_detection_set(&d, d.instances.len(), 9).unwrap();
        let mut ids: Vec<&str> = all.instances.iter().map(|i| i.id.as_str()).collect();
        ids.sort();
        let mut want: Vec<&str> = d.instances.iter().map(|i| i.id.as_str()).collect();
        want.sort();
        assert_eq!(ids, want);

        assert!(matches!(
            sample_detection_set(&d, 99, 0),
            Err(Error::SampleTooLarge { .. })
        ));
        assert!(matches!(
            sample_detection_set(&d, 0, 0),
            Err(Error::SampleTooLarge { .. })
        ));
    }

    #[test]
    fn pipeline_config_defaults_match_the_detection_protocol() {
        let json = r#"{
            "checkpoint": "model.crsp",
            "dataset": "data.jsonl",
            "instructions": "instr.json",
            "out_dir": "out"
        }"#;
        let config: PipelineConfig = serde_json::from_str(json).unwrap();
        assert_eq!(config.n, 50);
        assert_eq!(config.trials, 3);
        assert_eq!(config.samples_per_trial, 10);
        assert_eq!(config.seed, 0);
        assert_eq!(config.trial_seeds(), vec![0, 1, 2]);
    }

    #[test]
    fn tables_render_method_rows_and_context_columns() {
        let model = zero_model();
        let report = evaluate(&model, &dataset(), &instructions(), Method::Original, 0).unwrap();
        let text = render_tables(&[&report]);
        assert!(text.contains("method"));
        assert!(text.contains("original"));
        assert!(text.contains("ambig"));
        assert!(text.contains("disambig"));
        assert!(text.contains("72.25")); // published reference row
        assert!(text.contains("63.14"));
    }
}
