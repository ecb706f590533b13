//! Bias-neuron detection over a multiple-choice dataset.
//!
//! For each instance the detector scores every choice, picks the strongest
//! wrong answer as the biased label, computes gradient x activation
//! attribution toward both the gold and the biased label, subtracts the
//! clamped gold attribution (so skill-carrying channels cancel out), maxes
//! over sequence positions, and averages over instances. The result is one
//! scalar bias score per channel of the whole model, ready for ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{
    clamp_nonnegative, neuron_attribution, LabelKind, TokenAttribution,
};
use crate::error::{Error, Result};
use crate::model::{Model, NeuronId};
use crate::runtime::{
    backward_to_activations, forward_with_min_positions, score_labels,
};
use crate::tokenizer;

// ── dataset types ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextType {
    Ambig,
    Disambig,
}

impl fmt::Display for ContextType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextType::Ambig => "ambig",
            ContextType::Disambig => "disambig",
        })
    }
}

/// One multiple-choice instance. `choices` is the instance's own label set;
/// different instances may carry entirely different choice texts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub context: String,
    pub question: String,
    pub choices: Vec<String>,
    pub gold_index: usize,
    pub context_type: ContextType,
}

impl Instance {
    fn validate(&self) -> Result<()> {
        let problem = if self.choices.len() < 2 {
            Some(format!("{} choices; need at least 2", self.choices.len()))
        } else if self.gold_index >= self.choices.len() {
            Some(format!(
                "gold_index {} out of range for {} choices",
                self.gold_index,
                self.choices.len()
            ))
        } else {
            let distinct: BTreeSet<&str> = self.choices.iter().map(String::as_str).collect();
            if distinct.len() != self.choices.len() {
                Some("choices are not pairwise distinct".to_string())
            } else {
                None
            }
        };
        match problem {
            Some(problem) => Err(Error::BadInstance {
                id: self.id.clone(),
                problem,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, instances: Vec<Instance>) -> Result<Dataset> {
        let d = Dataset {
            name: name.into(),
            instances,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut seen = BTreeSet::new();
        for inst in &self.instances {
            inst.validate()?;
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::DuplicateInstanceId {
                    id: inst.id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Loads a JSON-lines file, one instance per line; the dataset name is
    /// the file stem.
    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut instances = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let inst: Instance = serde_json::from_str(line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), lineno + 1), e))?;
            instances.push(inst);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string());
        Dataset::new(name, instances)
    }

    /// Writes the JSON-lines form loadable by [`Dataset::load`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for inst in &self.instances {
            let line = serde_json::to_string(inst)
                .map_err(|e| Error::json(format!("serializing instance {}", inst.id), e))?;
            out.push_str(&line);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Sub-dataset of one context type, keeping instance order.
    pub fn filter_context(&self, context_type: ContextType) -> Result<Dataset> {
        let instances: Vec<Instance> = self
            .instances
            .iter()
            .filter(|i| i.context_type == context_type)
            .cloned()
            .collect();
        if instances.is_empty() {
            return Err(Error::NoInstancesOfType {
                context_type: context_type.to_string(),
            });
        }
        Ok(Dataset {
            name: format!("{}:{}", self.name, context_type),
            instances,
        })
    }
}

// ── instruction templates ─────────────────────────────────────────────────

pub const PLACEHOLDERS: [&str; 3] = ["{context}", "{question}", "{choices}"];

/// Ordered prompt templates; each must contain `{context}`, `{question}`,
/// and `{choices}` exactly once.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstructionSet {
    pub templates: Vec<String>,
}

impl InstructionSet {
    pub fn new(templates: Vec<String>) -> Result<InstructionSet> {
        if templates.is_empty() {
            return Err(Error::EmptyInstructionSet);
        }
        for (index, t) in templates.iter().enumerate() {
            for placeholder in PLACEHOLDERS {
                let count = t.matches(placeholder).count();
                if count != 1 {
                    return Err(Error::BadTemplate {
                        index,
                        placeholder: placeholder.to_string(),
                        count,
                    });
                }
            }
        }
        Ok(InstructionSet { templates })
    }

    /// Loads a JSON array of template strings.
    pub fn load(path: &Path) -> Result<InstructionSet> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let templates: Vec<String> = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        InstructionSet::new(templates)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.templates)
            .map_err(|e| Error::json("serializing instruction set", e))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Fills a template's placeholders from an instance; choices are joined
/// with ", " in instance order.
pub fn render_prompt(template: &str, instance: &Instance) -> String {
    render_prompt_parts(
        template,
        &instance.context,
        &instance.question,
        &instance.choices,
    )
}

/// Placeholder substitution with explicit parts (calibration baselines
/// substitute content-free text for context and question).
pub fn render_prompt_parts(
    template: &str,
    context: &str,
    question: &str,
    choices: &[String],
) -> String {
    template
        .replace("{context}", context)
        .replace("{question}", question)
        .replace("{choices}", &choices.join(", "))
}

// ── score maps ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Instance,
    Dataset,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Instance => "instance",
            Granularity::Dataset => "dataset",
        })
    }
}

/// Where a score map came from: which dataset, which instruction templates,
/// which sampled instances, and the sampling seed if any.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapProvenance {
    pub dataset: String,
    pub instruction_ids: Vec<usize>,
    pub sample_ids: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// One scalar bias score per channel of the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasScoreMap {
    pub granularity: Granularity,
    pub provenance: MapProvenance,
    // JSON maps need string keys, so scores are stored as flat entries on
    // disk, in the same shape mask files use.
    #[serde(with = "score_entries")]
    scores: BTreeMap<NeuronId, f64>,
}

mod score_entries {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        #[serde(flatten)]
        neuron: NeuronId,
        score: f64,
    }

    pub fn serialize<S: Serializer>(
        scores: &BTreeMap<NeuronId, f64>,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = scores
            .iter()
            .map(|(&neuron, &score)| Entry { neuron, score })
            .collect();
        entries.serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<BTreeMap<NeuronId, f64>, D::Error> {
        let entries = Vec::<Entry>::deserialize(deserializer)?;
        Ok(entries.into_iter().map(|e| (e.neuron, e.score)).collect())
    }
}

impl BiasScoreMap {
    pub fn score(&self, neuron: NeuronId) -> Option<f64> {
        self.scores.get(&neuron).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Scores in canonical neuron order.
    pub fn iter(&self) -> impl Iterator<Item = (&NeuronId, &f64)> {
        self.scores.iter()
    }

    fn check_same_coverage(&self, other: &BiasScoreMap) -> Result<()> {
        if self.scores.len() != other.scores.len() {
            return Err(Error::CoverageMismatch {
                layer_path: "(neuron set)".to_string(),
                detail: format!("{} neurons vs {}", self.scores.len(), other.scores.len()),
            });
        }
        for id in self.scores.keys() {
            if !other.scores.contains_key(id) {
                return Err(Error::CoverageMismatch {
                    layer_path: id.to_string(),
                    detail: "neuron missing from second map".to_string(),
                });
            }
        }
        Ok(())
    }

    /// Writes the map as JSON with its provenance block.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json("serializing score map", e))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<BiasScoreMap> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
    }
}

// ── the detection pipeline ────────────────────────────────────────────────

/// Strongest wrong answer: argmax of the class scores over every index
/// except `gold_index`, ties broken by the lowest index.
pub fn identify_biased_label(scores: &[f64], gold_index: usize) -> Result<usize> {
    if scores.len() < 2 {
        return Err(Error::TooFewClasses { got: scores.len() });
    }
    if gold_index >= scores.len() {
        return Err(Error::GoldOutOfRange {
            gold: gold_index,
            len: scores.len(),
        });
    }
    for (index, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFiniteScore { index });
        }
    }
    let mut best: Option<usize> = None;
    for (index, &s) in scores.iter().enumerate() {
        if index == gold_index {
            continue;
        }
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(index),
        }
    }
    Ok(best.expect("at least one non-gold class exists"))
}

/// Disentangled bias attribution: biased-label attribution minus the
/// golden-label attribution clamped at zero. Skill-carrying channels (large
/// positive attribution toward the gold answer) cancel; channels that only
/// push the wrong answer survive.
pub fn bias_attribution(
    attr_biased: &TokenAttribution,
    attr_golden: &TokenAttribution,
) -> Result<TokenAttribution> {
    if attr_biased.label_kind != LabelKind::Biased {
        return Err(Error::LabelKindMismatch {
            expected: LabelKind::Biased.to_string(),
            got: attr_biased.label_kind.to_string(),
        });
    }
    if attr_golden.label_kind != LabelKind::Golden {
        return Err(Error::LabelKindMismatch {
            expected: LabelKind::Golden.to_string(),
            got: attr_golden.label_kind.to_string(),
        });
    }
    if attr_biased.instance_id != attr_golden.instance_id {
        return Err(Error::InstanceMismatch {
            a: attr_biased.instance_id.clone(),
            b: attr_golden.instance_id.clone(),
        });
    }
    attr_biased.check_congruent(attr_golden)?;

    let clamped = clamp_nonnegative(attr_golden);
    let mut maps = BTreeMap::new();
    for (&key, biased) in attr_biased.iter() {
        let golden = clamped.map(key)?;
        let mut out = biased.clone();
        for (o, g) in out.data.iter_mut().zip(&golden.data) {
            *o -= g;
        }
        maps.insert(key, out);
    }
    Ok(TokenAttribution::from_maps(
        attr_biased.instance_id.clone(),
        LabelKind::Biased,
        maps,
    ))
}

/// Instance-level score: for each channel, the maximum over its sequence
/// positions. No clamping here — all-negative channels keep their max.
pub fn aggregate_tokens(per_token: &TokenAttribution) -> Result<BiasScoreMap> {
    let mut scores = BTreeMap::new();
    for (key, m) in per_token.iter() {
        for channel in 0..m.cols {
            let mut best = f64::NEG_INFINITY;
            for position in 0..m.rows {
                best = best.max(m.get(position, channel));
            }
            if !best.is_finite() {
                return Err(Error::NonFinite {
                    name: format!("{key}.{channel}"),
                });
            }
            scores.insert(
                NeuronId {
                    stack: key.stack,
                    layer: key.layer,
                    sublayer: key.sublayer,
                    channel,
                },
                best,
            );
        }
    }
    Ok(BiasScoreMap {
        granularity: Granularity::Instance,
        provenance: MapProvenance {
            dataset: String::new(),
            instruction_ids: Vec::new(),
            sample_ids: vec![per_token.instance_id.clone()],
            seed: None,
        },
        scores,
    })
}

/// Dataset-level score: the arithmetic mean over instance maps, channel by
/// channel, in a fixed summation order.
pub fn aggregate_instances(maps: &[BiasScoreMap]) -> Result<BiasScoreMap> {
    let first = maps.first().ok_or(Error::EmptyAggregation)?;
    for m in &maps[1..] {
        first.check_same_coverage(m)?;
    }
    let n = maps.len() as f64;
    let mut scores = BTreeMap::new();
    for id in first.scores.keys() {
        let sum: f64 = maps.iter().map(|m| m.scores[id]).sum();
        scores.insert(*id, sum / n);
    }
    let sample_ids = maps
        .iter()
        .flat_map(|m| m.provenance.sample_ids.iter().cloned())
        .collect();
    Ok(BiasScoreMap {
        granularity: Granularity::Dataset,
        provenance: MapProvenance {
            dataset: String::new(),
            instruction_ids: Vec::new(),
            sample_ids,
            seed: None,
        },
        scores,
    })
}

/// Ranking over all layers and sublayers jointly: descending score, ties by
/// canonical neuron order. Total and deterministic.
pub fn rank_neurons(map: &BiasScoreMap) -> Result<Vec<(NeuronId, f64)>> {
    if map.granularity != Granularity::Dataset {
        return Err(Error::GranularityMismatch {
            expected: Granularity::Dataset.to_string(),
            got: map.granularity.to_string(),
        });
    }
    let mut ranked: Vec<(NeuronId, f64)> = map.scores.iter().map(|(&id, &s)| (id, s)).collect();
    ranked.sort_by(|(id_a, a), (id_b, b)| {
        b.partial_cmp(a)
            .expect("scores validated finite")
            .then_with(|| id_a.cmp(id_b))
    });
    Ok(ranked)
}

/// Per-instance bias attribution for one rendered prompt: score all choices,
/// pick the biased label, run golden and biased passes over shape-congruent
/// tapes, attribute, subtract, and max over positions.
fn detect_instance(model: &Model, template: &str, instance: &Instance) -> Result<BiasScoreMap> {
    let prompt = render_prompt(template, instance);
    let scores = score_labels(model, &prompt, "", &instance.choices)?;
    let biased_index = identify_biased_label(&scores, instance.gold_index)?;

    let golden_label = &instance.choices[instance.gold_index];
    let biased_label = &instance.choices[biased_index];
    // Pad both decoders to a common position count so the attribution maps
    // are entrywise comparable; padded positions carry zero gradient.
    let min_positions = tokenizer::tokenize(golden_label)?
        .len()
        .max(tokenizer::tokenize(biased_label)?.len());

    let tape_golden = forward_with_min_positions(model, &prompt, "", golden_label, min_positions)?;
    let grads_golden = backward_to_activations(&tape_golden)?;
    let attr_golden =
        neuron_attribution(&tape_golden, &grads_golden, &instance.id, LabelKind::Golden)?;

    let tape_biased = forward_with_min_positions(model, &prompt, "", biased_label, min_positions)?;
    let grads_biased = backward_to_activations(&tape_biased)?;
    let attr_biased =
        neuron_attribution(&tape_biased, &grads_biased, &instance.id, LabelKind::Biased)?;

    let bias = bias_attribution(&attr_biased, &attr_golden)?;
    aggregate_tokens(&bias)
}

/// Dataset-level detection under one instruction template.
pub fn detect(model: &Model, sample: &Dataset, instructions: &InstructionSet, template_index: usize)
    -> Result<BiasScoreMap>
{
    let template = &instructions.templates[template_index];
    let mut instance_maps = Vec::with_capacity(sample.instances.len());
    for instance in &sample.instances {
        let map = detect_instance(model, template, instance).map_err(|e| {
            Error::UnscorableInstance {
                id: instance.id.clone(),
                source: Box::new(e),
            }
        })?;
        instance_maps.push(map);
    }
    let mut map = aggregate_instances(&instance_maps)?;
    map.provenance.dataset = sample.name.clone();
    map.provenance.instruction_ids = vec![template_index];
    Ok(map)
}

/// Dataset-level detection averaged over every template with equal weight.
pub fn detect_averaged(
    model: &Model,
    sample: &Dataset,
    instructions: &InstructionSet,
) -> Result<BiasScoreMap> {
    let mut per_template = Vec::with_capacity(instructions.len());
    for template_index in 0..instructions.len() {
        per_template.push(detect(model, sample, instructions, template_index)?);
    }
    let sample_ids: Vec<String> = sample.instances.iter().map(|i| i.id.clone()).collect();
    let mut map = aggregate_instances(&per_template)?;
    map.granularity = Granularity::Dataset;
    map.provenance = MapProvenance {
        dataset: sample.name.clone(),
        instruction_ids: (0..instructions.len()).collect(),
        sample_ids,
        seed: None,
    };
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{instance, template, zero_model};

    #[test]
    fn biased_label_skips_gold_and_breaks_ties_low() {
        assert_eq!(identify_biased_label(&[0.5, 0.3, 0.2], 0).unwrap(), 1);
        assert_eq!(identify_biased_label(&[0.5, 0.3], 0).unwrap(), 1);
        assert_eq!(identify_biased_label(&[0.4, 0.3, 0.3], 0).unwrap(), 1);
        assert_eq!(identify_biased_label(&[0.9, 0.1, 0.9], 1).unwrap(), 0);
        // Gold is never returned even when it is the global argmax.
        for gold in 0..3 {
            let got = identify_biased_label(&[0.1, 0.2, 0.3], gold).unwrap();
            assert_ne!(got, gold);
        }
    }

    #[test]
    fn biased_label_rejects_degenerate_inputs() {
        assert!(matches!(
            identify_biased_label(&[0.5], 0),
            Err(Error::TooFewClasses { got: 1 })
        ));
        assert!(matches!(
            identify_biased_label(&[0.5, 0.4], 7),
            Err(Error::GoldOutOfRange { .. })
        ));
        assert!(matches!(
            identify_biased_label(&[f64::NAN, 0.4], 0),
            Err(Error::NonFiniteScore { index: 0 })
        ));
    }

    #[test]
    fn dataset_validation_catches_duplicates_and_bad_instances() {
        let dup = Dataset::new(
            "d",
            vec![instance("a", &["x", "y"], 0), instance("a", &["x", "y"], 1)],
        );
        assert!(matches!(dup, Err(Error::DuplicateInstanceId { .. })));

        let bad_gold = Dataset::new("d", vec![instance("a", &["x", "y"], 5)]);
        assert!(matches!(bad_gold, Err(Error::BadInstance { .. })));

        let dup_choice = Dataset::new("d", vec![instance("a", &["x", "x"], 0)]);
        assert!(matches!(dup_choice, Err(Error::BadInstance { .. })));

        assert!(matches!(Dataset::new("d", vec![]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn instruction_set_requires_each_placeholder_exactly_once() {
        assert!(InstructionSet::new(vec![template()]).is_ok());
        let missing = InstructionSet::new(vec!["question: {question} {choices}".to_string()]);
        match missing {
            Err(Error::BadTemplate {
                placeholder, count, ..
            }) => {
                assert_eq!(placeholder, "{context}");
                assert_eq!(count, 0);
            }
            other => panic!("unexpected: {other:?}"),
        }
        let doubled = InstructionSet::new(vec![
            "{context} {context} {question} {choices}".to_string()
        ]);
        assert!(matches!(doubled, Err(Error::BadTemplate { count: 2, .. })));
        assert!(matches!(
            InstructionSet::new(vec![]),
            Err(Error::EmptyInstructionSet)
        ));
    }

    #[test]
    fn render_substitutes_all_placeholders() {
        let inst = instance("a", &["korv", "zelt", "plim"], 0);
        let rendered = render_prompt(&template(), &inst);
        assert!(rendered.contains("the korv worker was seen"));
        assert!(rendered.contains("who was seen"));
        assert!(rendered.contains("korv, zelt, plim"));
        assert!(!rendered.contains('{'));
    }

    #[test]
    fn aggregation_max_then_mean() {
        use crate::attribution::LabelKind;
        use crate::model::{HookKey, Stack, Sublayer};
        use crate::tensor::Mat;

        let key = HookKey {
            stack: Stack::Decoder,
            layer: 0,
            sublayer: Sublayer::FfnIn,
        };
        let mk = |vals: Vec<f64>, id: &str| {
            let mut maps = BTreeMap::new();
            maps.insert(key, Mat::from_vec(3, 1, vals));
            TokenAttribution::from_maps(id.to_string(), LabelKind::Biased, maps)
        };
        let m1 = aggregate_tokens(&mk(vec![0.2, 0.5, 0.1], "i1")).unwrap();
        let neuron = NeuronId {
            stack: Stack::Decoder,
            layer: 0,
            sublayer: Sublayer::FfnIn,
            channel: 0,
        };
        assert_eq!(m1.score(neuron).unwrap(), 0.5);

        // All-negative scores keep their (negative) max — no clamping.
        let m2 = aggregate_tokens(&mk(vec![-0.4, -0.1, -0.2], "i2")).unwrap();
        assert_eq!(m2.score(neuron).unwrap(), -0.1);

        let mean = aggregate_instances(&[m1.clone(), m2]).unwrap();
        assert_eq!(mean.score(neuron).unwrap(), (0.5 + -0.1) / 2.0);
        assert_eq!(mean.granularity, Granularity::Dataset);

        // Mean of a single map is the identity.
        let single = aggregate_instances(&[m1.clone()]).unwrap();
        assert_eq!(single.score(neuron).unwrap(), m1.score(neuron).unwrap());

        assert!(matches!(
            aggregate_instances(&[]),
            Err(Error::EmptyAggregation)
        ));
    }

    #[test]
    fn ranking_is_descending_with_lexicographic_ties() {
        let model = zero_model();
        let sample = Dataset::new("d", vec![instance("a", &["korv", "zelt"], 0)]).unwrap();
        let instructions = InstructionSet::new(vec![template()]).unwrap();
        let map = detect(&model, &sample, &instructions, 0).unwrap();
        let ranked = rank_neurons(&map).unwrap();
        assert_eq!(ranked.len(), map.len());
        for pair in ranked.windows(2) {
            let (id_a, a) = &pair[0];
            let (id_b, b) = &pair[1];
            assert!(a > b || (a == b && id_a < id_b));
        }
    }

    #[test]
    fn ranking_requires_dataset_granularity() {
        use crate::attribution::LabelKind;
        use crate::model::{HookKey, Stack, Sublayer};
        use crate::tensor::Mat;
        let key = HookKey {
            stack: Stack::Encoder,
            layer: 0,
            sublayer: Sublayer::FfnIn,
        };
        let mut maps = BTreeMap::new();
        maps.insert(key, Mat::from_vec(1, 2, vec![0.1, 0.2]));
        let attr = TokenAttribution::from_maps("i".to_string(), LabelKind::Biased, maps);
        let inst_map = aggregate_tokens(&attr).unwrap();
        assert!(matches!(
            rank_neurons(&inst_map),
            Err(Error::GranularityMismatch { .. })
        ));
    }

    #[test]
    fn detect_is_deterministic_and_covers_all_neurons() {
        let model = zero_model();
        let sample = Dataset::new(
            "d",
            vec![
                instance("a", &["korv", "zelt", "marn"], 0),
                instance("b", &["plim", "drax"], 1),
            ],
        )
        .unwrap();
        let instructions = InstructionSet::new(vec![template()]).unwrap();
        let m1 = detect(&model, &sample, &instructions, 0).unwrap();
        let m2 = detect(&model, &sample, &instructions, 0).unwrap();
        assert_eq!(m1.len(), model.all_neurons().len());
        for ((id_a, a), (id_b, b)) in m1.iter().zip(m2.iter()) {
            assert_eq!(id_a, id_b);
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(m1.provenance.dataset, "d");
        assert_eq!(m1.provenance.instruction_ids, vec![0]);
        assert_eq!(m1.provenance.sample_ids, vec!["a", "b"]);
    }

    #[test]
    fn score_map_round_trips_through_json() {
        let model = zero_model();
        let sample = Dataset::new("d", vec![instance("a", &["korv", "zelt"], 0)]).unwrap();
        let instructions = InstructionSet::new(vec![template()]).unwrap();
        let map = detect(&model, &sample, &instructions, 0).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.json");
        map.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"layer_index\""), "flat entries expected: {text}");

        let loaded = BiasScoreMap::load(&path).unwrap();
        assert_eq!(loaded.len(), map.len());
        for ((id_a, a), (id_b, b)) in map.iter().zip(loaded.iter()) {
            assert_eq!(id_a, id_b);
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded.provenance.sample_ids, map.provenance.sample_ids);
    }

    #[test]
    fn detect_wraps_instance_failures_with_the_id() {
        let model = zero_model();
        let mut inst = instance("long-one", &["korv", "zelt"], 0);
        inst.context = "word ".repeat(300);
        let sample = Dataset::new("d", vec![inst]).unwrap();
        let instructions = InstructionSet::new(vec![template()]).unwrap();
        let err = detect(&model, &sample, &instructions, 0).unwrap_err();
        match err {
            Error::UnscorableInstance { id, source } => {
                assert_eq!(id, "long-one");
                assert!(matches!(*source, Error::SequenceTooLong { .. }));
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn sample_order_does_not_change_detection_scores() {
        let model = zero_model();
        let a = instance("a", &["korv", "zelt", "marn"], 0);
        let b = instance("b", &["plim", "drax"], 1);
        let instructions = InstructionSet::new(vec![template()]).unwrap();
        let fwd = detect(
            &model,
            &Dataset::new("d", vec![a.clone(), b.clone()]).unwrap(),
            &instructions,
            0,
        )
        .unwrap();
        let rev = detect(
            &model,
            &Dataset::new("d", vec![b, a]).unwrap(),
            &instructions,
            0,
        )
        .unwrap();
        for ((id_a, x), (id_b, y)) in fwd.iter().zip(rev.iter()) {
            assert_eq!(id_a, id_b);
            assert!((x - y).abs() < 1e-15);
        }
    }
}
