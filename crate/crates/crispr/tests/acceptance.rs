//! Acceptance gates for the pipeline, one test per guarantee, each ending in
//! a single machine-greppable [PASS] line. Tolerances are pinned here and
//! nowhere else; loosening one is a contract change, not a bug fix.

use std::collections::BTreeSet;
use std::fs;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crispr::attribution::{neuron_attribution, LabelKind};
use crispr::baselines::{calibrate, softmax, CalibrationMode, CalibrationProvenance, CalibrationVector};
use crispr::checkpoint::save_model;
use crispr::detector::{
    bias_attribution, detect_averaged, identify_biased_label, rank_neurons, render_prompt,
    ContextType, Instance,
};
use crispr::eval::{evaluate, run_pipeline, sample_detection_set, Method, PipelineConfig};
use crispr::model::{NeuronId, Stack, Sublayer};
use crispr::oracles::{
    build_gradcheck_model, build_planted_fixture, exhaustive_prune_search, fd_sweep,
    planted_instruction_set,
};
use crispr::pruner::{
    apply_mask, compact, select_top_n, MaskEntry, MaskProvenance, PruneMask, MASK_VERSION,
};
use crispr::runtime::{
    backward_to_activations, forward_with_activations, forward_with_min_positions, score_labels,
};
use crispr::tokenizer;

// Pinned gates.
const GRAD_EPSILON: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_ABS_FLOOR: f64 = 1e-9;
const GRAD_TIME_BUDGET_SECS: f64 = 60.0;
const COMPACT_TOL: f64 = 1e-12;
const AMBIG_GAIN_MIN_POINTS: f64 = 40.0;
const DISAMBIG_DROP_MAX_POINTS: f64 = 5.0;
const CALIBRATION_TOL: f64 = 1e-4;

const FIXTURE_SEED: u64 = 11;
const GRADCHECK_SEED: u64 = 7;

/// Words with known tokenizations, mixing merge hits and byte fallback.
const WORD_POOL: [&str; 16] = [
    "korv", "zelt", "marn", "plim", "drax", "fenn", "worker", "depot", "tools", "people",
    "poor", "rich", "stood", "near", "answer", "question",
];

fn random_words(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let count = rng.gen_range(min..=max);
    (0..count)
        .map(|_| WORD_POOL[rng.gen_range(0..WORD_POOL.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_instance(rng: &mut ChaCha8Rng, id: usize) -> Instance {
    let mut pool: Vec<String> = vec![
        "korv".into(),
        "zelt worker".into(),
        "poor people".into(),
        "rich people".into(),
        "marn".into(),
        "unknown".into(),
        "the depot crew".into(),
    ];
    pool.shuffle(rng);
    let n_choices = rng.gen_range(2..=4);
    let choices: Vec<String> = pool.into_iter().take(n_choices).collect();
    let gold_index = rng.gen_range(0..choices.len());
    Instance {
        id: format!("rand-{id:03}"),
        context: random_words(rng, 4, 8),
        question: random_words(rng, 2, 4),
        choices,
        gold_index,
        context_type: ContextType::Ambig,
    }
}

/// Reverse-mode gradients agree with central finite differences at every
/// hook entry of a 2+2-layer f64 model, across all ten sublayer kinds,
/// within the time budget.
#[test]
fn gradients_match_central_finite_differences() {
    let model = build_gradcheck_model(GRADCHECK_SEED);
    let sweep = fd_sweep(
        &model,
        "answer the question",
        "the korv worker stood near the depot",
        "korv zelt",
        GRAD_EPSILON,
    )
    .expect("sweep runs");
    assert_eq!(
        sweep.failures, 0,
        "disagreement beyond max({GRAD_REL_TOL} relative, {GRAD_ABS_FLOOR} absolute): {}",
        sweep.worst_entry
    );
    assert_eq!(sweep.sublayer_kinds, 10, "sweep must cover every sublayer kind");
    assert!(
        sweep.elapsed_secs < GRAD_TIME_BUDGET_SECS,
        "sweep took {:.1}s",
        sweep.elapsed_secs
    );
    println!(
        "[PASS] gradients match finite differences: {} entries, 10 sublayer kinds, {:.1}s",
        sweep.entries, sweep.elapsed_secs
    );
}

/// The disentangled bias attribution equals the biased-label attribution
/// minus the clamped golden-label attribution, recomputed independently,
/// bit for bit, over 100 random instances.
#[test]
fn bias_attribution_identity_is_bitwise() {
    let model = build_gradcheck_model(GRADCHECK_SEED);
    let template = "context: {context}\nquestion: {question}\noptions: {choices}\nanswer:";
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut entries_checked = 0usize;
    for id in 0..100 {
        let instance = random_instance(&mut rng, id);
        let prompt = render_prompt(template, &instance);
        let scores = score_labels(&model, &prompt, "", &instance.choices).expect("scorable");
        let biased_index = identify_biased_label(&scores, instance.gold_index).expect("biased");
        let golden_label = &instance.choices[instance.gold_index];
        let biased_label = &instance.choices[biased_index];
        let min_positions = tokenizer::tokenize(golden_label)
            .unwrap()
            .len()
            .max(tokenizer::tokenize(biased_label).unwrap().len());

        let tape_g =
            forward_with_min_positions(&model, &prompt, "", golden_label, min_positions).unwrap();
        let grads_g = backward_to_activations(&tape_g).unwrap();
        let attr_g = neuron_attribution(&tape_g, &grads_g, &instance.id, LabelKind::Golden).unwrap();
        let tape_b =
            forward_with_min_positions(&model, &prompt, "", biased_label, min_positions).unwrap();
        let grads_b = backward_to_activations(&tape_b).unwrap();
        let attr_b = neuron_attribution(&tape_b, &grads_b, &instance.id, LabelKind::Biased).unwrap();

        let bias = bias_attribution(&attr_b, &attr_g).unwrap();
        for key in bias.hook_keys() {
            let b = attr_b.map(key).unwrap();
            let g = attr_g.map(key).unwrap();
            let out = bias.map(key).unwrap();
            for r in 0..b.rows {
                for c in 0..b.cols {
                    let g_clamped = if g.get(r, c) < 0.0 { 0.0 } else { g.get(r, c) };
                    let expected = b.get(r, c) - g_clamped;
                    assert_eq!(
                        expected.to_bits(),
                        out.get(r, c).to_bits(),
                        "instance {id}, {key} ({r}, {c}): {expected} vs {}",
                        out.get(r, c)
                    );
                    entries_checked += 1;
                }
            }
        }
    }
    println!(
        "[PASS] bias attribution identity holds bitwise over 100 instances \
         ({entries_checked} entries)"
    );
}

/// Zero-masking FFN channels and physically compacting them produce the same
/// logits to within 1e-12 for 20 random masks over a 100-prompt battery.
#[test]
fn masked_and_compacted_models_agree() {
    let model = build_gradcheck_model(GRADCHECK_SEED);
    let d_ff = model.config().d_ff;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let prompts: Vec<String> = (0..100).map(|_| random_words(&mut rng, 3, 10)).collect();

    let mut worst = 0.0f64;
    for mask_index in 0..20 {
        let mut picked = BTreeSet::new();
        let count = rng.gen_range(1..=6);
        while picked.len() < count {
            picked.insert(NeuronId {
                stack: if rng.gen_bool(0.5) { Stack::Encoder } else { Stack::Decoder },
                layer: rng.gen_range(0..2),
                sublayer: Sublayer::FfnIn,
                channel: rng.gen_range(0..d_ff),
            });
        }
        let neurons: Vec<NeuronId> = picked.into_iter().collect();
        let mask = PruneMask {
            version: MASK_VERSION,
            model_fingerprint: model.base_fingerprint().to_string(),
            n: neurons.len(),
            provenance: MaskProvenance::default(),
            neurons: neurons
                .iter()
                .enumerate()
                .map(|(i, &neuron)| MaskEntry { neuron, score: -(i as f64) })
                .collect(),
        };
        let masked = apply_mask(&model, &mask).expect("maskable");
        let compacted = compact(&model, &mask).expect("compactable");
        for prompt in &prompts {
            let a = forward_with_activations(&masked, prompt, "", "korv zelt").unwrap();
            let b = forward_with_activations(&compacted, prompt, "", "korv zelt").unwrap();
            let la = a.logits();
            let lb = b.logits();
            assert_eq!(la.rows, lb.rows);
            assert_eq!(la.cols, lb.cols);
            for (x, y) in la.data.iter().zip(&lb.data) {
                let diff = (x - y).abs();
                assert!(
                    diff <= COMPACT_TOL,
                    "mask {mask_index}: logit diff {diff:.3e} exceeds {COMPACT_TOL:.0e}"
                );
                worst = worst.max(diff);
            }
        }
    }
    println!(
        "[PASS] masked and compacted forwards agree within {COMPACT_TOL:.0e} \
         (worst {worst:.3e} over 20 masks x 100 prompts)"
    );
}

/// Detection recovers the planted neuron: rank 1 in at least 2 of 3 sampled
/// trials, rank <= 5 in all, and pruning each trial's top pick repairs
/// ambiguous accuracy by >= 40 points while disambiguated accuracy drops
/// <= 5 points.
#[test]
fn detection_recovers_the_planted_neuron() {
    let fixture = build_planted_fixture(FIXTURE_SEED).unwrap();
    let instructions = planted_instruction_set();
    let original = evaluate(
        &fixture.model,
        &fixture.dataset,
        &instructions,
        Method::Original,
        0,
    )
    .unwrap();

    let mut rank_one = 0;
    for trial in 0..3u64 {
        let sample = sample_detection_set(&fixture.dataset, 10, trial).unwrap();
        let map = detect_averaged(&fixture.model, &sample, &instructions).unwrap();
        let ranking = rank_neurons(&map).unwrap();
        let rank = ranking
            .iter()
            .position(|&(id, _)| id == fixture.planted)
            .map(|p| p + 1)
            .expect("planted neuron is scored");
        assert!(rank <= 5, "trial {trial}: planted neuron at rank {rank}");
        if rank == 1 {
            rank_one += 1;
        }

        let mask = select_top_n(
            &ranking,
            1,
            fixture.model.base_fingerprint(),
            MaskProvenance::default(),
        )
        .unwrap();
        let pruned = apply_mask(&fixture.model, &mask).unwrap();
        let report = evaluate(&pruned, &fixture.dataset, &instructions, Method::Original, 0).unwrap();
        let gain = report.accuracy_ambig.unwrap() - original.accuracy_ambig.unwrap();
        let drop = original.accuracy_disambig.unwrap() - report.accuracy_disambig.unwrap();
        assert!(
            gain >= AMBIG_GAIN_MIN_POINTS,
            "trial {trial}: ambiguous accuracy gained only {gain:.1} points"
        );
        assert!(
            drop <= DISAMBIG_DROP_MAX_POINTS,
            "trial {trial}: disambiguated accuracy dropped {drop:.1} points"
        );
    }
    assert!(rank_one >= 2, "planted neuron ranked first in {rank_one}/3 trials");
    println!(
        "[PASS] planted neuron recovered: rank 1 in {rank_one}/3 trials, ambiguous accuracy \
         repaired in all trials"
    );
}

/// The detector's top choice appears in the top five of a brute-force search
/// that actually prunes and scores every candidate, in every trial.
#[test]
fn detection_agrees_with_exhaustive_search() {
    let fixture = build_planted_fixture(FIXTURE_SEED).unwrap();
    let instructions = planted_instruction_set();
    for trial in 0..3u64 {
        let sample = sample_detection_set(&fixture.dataset, 10, trial).unwrap();
        let map = detect_averaged(&fixture.model, &sample, &instructions).unwrap();
        let ranking = rank_neurons(&map).unwrap();
        let top1 = ranking[0].0;
        let candidates: Vec<NeuronId> = ranking.iter().take(16).map(|&(id, _)| id).collect();
        let results = exhaustive_prune_search(
            &fixture.model,
            &fixture.dataset,
            &instructions.templates[0],
            &candidates,
            1,
        )
        .unwrap();
        let position = results
            .iter()
            .position(|r| r.neurons == vec![top1])
            .map(|p| p + 1)
            .expect("top-1 was a candidate");
        assert!(
            position <= 5,
            "trial {trial}: detected top-1 {top1} is search rank {position}"
        );
    }
    println!("[PASS] detected top-1 lands in the exhaustive search top 5 in all 3 trials");
}

/// Calibration reproduces the worked example (0.4, 0.3, 0.3) / (0.8, 0.1,
/// 0.1) -> (0.0769, 0.4615, 0.4615) within 1e-4, and a uniform content-free
/// prior changes nothing.
#[test]
fn calibration_identities_hold() {
    let scores = vec![0.4f64.ln(), 0.3f64.ln(), 0.3f64.ln()];
    let cal = CalibrationVector {
        mode: CalibrationMode::Cc,
        p_cf: vec![0.8, 0.1, 0.1],
        provenance: CalibrationProvenance {
            content_free_inputs: vec!["N/A".into()],
            seed: None,
        },
    };
    let got = calibrate(&scores, &cal).unwrap();
    let expected = [0.0769, 0.4615, 0.4615];
    for (g, e) in got.iter().zip(expected) {
        assert!(
            (g - e).abs() <= CALIBRATION_TOL,
            "calibrated {g:.6} vs expected {e:.4}"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let scores: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let uniform = CalibrationVector {
            mode: CalibrationMode::Dc,
            p_cf: vec![0.2; 5],
            provenance: CalibrationProvenance {
                content_free_inputs: Vec::new(),
                seed: Some(5),
            },
        };
        let calibrated = calibrate(&scores, &uniform).unwrap();
        let plain = softmax(&scores);
        for (c, p) in calibrated.iter().zip(&plain) {
            assert!((c - p).abs() <= 1e-12, "uniform prior moved {p} to {c}");
        }
    }
    println!("[PASS] calibration worked example within {CALIBRATION_TOL} and uniform prior is identity");
}

fn write_fixture_files(dir: &std::path::Path) -> PipelineConfig {
    let fixture = build_planted_fixture(FIXTURE_SEED).unwrap();
    let instructions = planted_instruction_set();
    save_model(&fixture.model, &dir.join("model.crsp")).unwrap();
    fixture.dataset.save(&dir.join("dataset.jsonl")).unwrap();
    instructions.save(&dir.join("instructions.json")).unwrap();
    // Only the required fields: everything else must come from defaults.
    let config_json = serde_json::json!({
        "checkpoint": dir.join("model.crsp"),
        "dataset": dir.join("dataset.jsonl"),
        "instructions": dir.join("instructions.json"),
        "out_dir": dir.join("out"),
    });
    let config_path = dir.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config_json).unwrap()).unwrap();
    PipelineConfig::load(&config_path).unwrap()
}

const PIPELINE_ARTIFACTS: [&str; 11] = [
    "mask_trial1.json",
    "mask_trial2.json",
    "mask_trial3.json",
    "original.json",
    "cc.json",
    "dc.json",
    "crispr_trial1.json",
    "crispr_trial2.json",
    "crispr_trial3.json",
    "crispr.json",
    "tables.txt",
];

/// Re-running the pipeline with the same config writes byte-identical masks
/// and reports.
#[test]
fn pipeline_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_fixture_files(dir.path());

    config.out_dir = dir.path().join("run_a");
    run_pipeline(&config).unwrap();
    config.out_dir = dir.path().join("run_b");
    run_pipeline(&config).unwrap();

    for name in PIPELINE_ARTIFACTS {
        let a = fs::read(dir.path().join("run_a").join(name)).unwrap();
        let b = fs::read(dir.path().join("run_b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
        assert!(!a.is_empty(), "{name} is empty");
    }
    println!(
        "[PASS] pipeline reruns byte-identical across {} artifacts",
        PIPELINE_ARTIFACTS.len()
    );
}

/// After pruning the detected neuron, the mean gold-label score on ambiguous
/// contexts strictly increases, and the report renders an ambig/disambig
/// two-column shift table.
#[test]
fn pruning_raises_ambiguous_gold_score() {
    let fixture = build_planted_fixture(FIXTURE_SEED).unwrap();
    let instructions = planted_instruction_set();
    let original = evaluate(
        &fixture.model,
        &fixture.dataset,
        &instructions,
        Method::Original,
        0,
    )
    .unwrap();

    let sample = sample_detection_set(&fixture.dataset, 10, 0).unwrap();
    let map = detect_averaged(&fixture.model, &sample, &instructions).unwrap();
    let ranking = rank_neurons(&map).unwrap();
    let mask = select_top_n(
        &ranking,
        1,
        fixture.model.base_fingerprint(),
        MaskProvenance::default(),
    )
    .unwrap();
    let pruned_model = apply_mask(&fixture.model, &mask).unwrap();
    let pruned = evaluate(
        &pruned_model,
        &fixture.dataset,
        &instructions,
        Method::Crispr,
        0,
    )
    .unwrap();

    let before = original.gold_score_ambig.unwrap();
    let after = pruned.gold_score_ambig.unwrap();
    assert!(
        after > before,
        "ambiguous gold score did not rise: {before:.2} -> {after:.2}"
    );

    let tables = crispr::eval::render_tables(&[&original, &pruned]);
    assert!(tables.contains("ambig"), "missing ambig column:\n{tables}");
    assert!(tables.contains("disambig"), "missing disambig column:\n{tables}");
    assert!(
        tables.contains(&format!("{before:.2}")) && tables.contains(&format!("{after:.2}")),
        "gold scores not rendered:\n{tables}"
    );
    println!("[PASS] ambiguous gold score rises after pruning ({before:.2} -> {after:.2}) and the shift table renders");
}

/// A config carrying only the required paths runs the documented default
/// protocol: ten instruction templates, three trials of ten sampled
/// instances, and 50-neuron masks, all echoed in report and mask provenance.
#[test]
fn default_config_echoes_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_fixture_files(dir.path());
    config.out_dir = dir.path().join("out");
    assert_eq!(config.n, 50);
    assert_eq!(config.trials, 3);
    assert_eq!(config.samples_per_trial, 10);
    assert_eq!(config.seed, 0);

    let output = run_pipeline(&config).unwrap();
    for report in [&output.original, &output.cc, &output.dc, &output.crispr] {
        assert_eq!(report.per_instruction_accuracy.len(), 10);
        assert_eq!(report.config.n, 50);
        assert_eq!(report.config.trials, 3);
        assert_eq!(report.config.samples_per_trial, 10);
        assert_eq!(report.config.seeds, vec![0, 1, 2]);
        assert_eq!(report.config.sample_ids.len(), 3);
        for ids in &report.config.sample_ids {
            assert_eq!(ids.len(), 10);
        }
    }
    for (trial, report) in output.crispr_trials.iter().enumerate() {
        assert_eq!(report.config.seeds, vec![trial as u64]);
        assert_eq!(report.config.sample_ids.len(), 1);
    }
    assert_eq!(output.masks.len(), 3);
    for mask in &output.masks {
        assert_eq!(mask.n, 50);
        assert_eq!(mask.neurons.len(), 50);
        assert_eq!(mask.provenance.trials, 3);
        assert_eq!(mask.provenance.instruction_ids, (0..10).collect::<Vec<_>>());
        assert_eq!(mask.provenance.sample_ids.len(), 10);
    }
    println!(
        "[PASS] default config runs 10 templates x 3 trials x 10 samples with n = 50, echoed in provenance"
    );
}
