//! Fine-tuning on annotated data, prediction, micro-F1 evaluation, and the
//! synthetic label-noise benchmark.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use ndarray::ArrayView1;
use rand::seq::{index::sample, IndexedRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{BenchSection, PipelineConfig};
use crate::data_model::{Dataset, Instance, RelationLabel, Span};
use crate::encoder::{build_vocabulary, EncoderParameters, Vocabulary};
use crate::error::{Error, Result};
use crate::reliability::{fit_classifier, labeled_sequences, score_dataset, train_classifier, ClassifierModel};
use crate::{par, pretrain, seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// NA predictions never count as true or false positives, NA gold never
    /// as a false negative.
    ExcludeNa,
    /// Every class counts; precision and recall both equal accuracy.
    AllClasses,
}

impl std::str::FromStr for F1Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude_na" => Ok(F1Mode::ExcludeNa),
            "all_classes" => Ok(F1Mode::AllClasses),
            other => Err(Error::Config(format!("unknown f1 mode '{other}'"))),
        }
    }
}

/// Uniform sample without replacement of `round(fraction * N)` instances,
/// kept in input order. The label set is inherited from `ds`.
pub fn low_resource_split(ds: &Dataset, fraction: f64, seed_value: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} not in (0, 1]")));
    }
    let n = (fraction * ds.len() as f64).round() as usize;
    if n == 0 {
        return Err(Error::Data(format!("fraction {fraction} of {} instances is empty", ds.len())));
    }
    let mut rng = seed::rng(seed_value, &[seed::stream::SPLIT]);
    let mut idx = sample(&mut rng, ds.len(), n).into_vec();
    idx.sort_unstable();
    Ok(Dataset {
        instances: idx.into_iter().map(|i| ds.instances[i].clone()).collect(),
        label_set: ds.label_set.clone(),
    })
}

/// Trains a classifier over `labels` on `train`. With `init`, the encoder
/// body is copied and a fresh head is attached; its shape must agree with
/// the configured encoder.
pub fn finetune(
    init: Option<&EncoderParameters>,
    vocab: &Vocabulary,
    train: &Dataset,
    labels: &[RelationLabel],
    cfg: &PipelineConfig,
) -> Result<(ClassifierModel, Vec<f64>)> {
    if labels.is_empty() {
        return Err(Error::Data("empty label set".into()));
    }
    let expected = cfg.encoder.encoder_config(vocab.len(), labels.len());
    let head_seed = seed::derive(cfg.seed, &[seed::stream::FINETUNE]);
    let mut params = match init {
        Some(p) => {
            if !p.config.body_matches(&expected) {
                return Err(Error::Config(format!(
                    "encoder shape mismatch: checkpoint has d_model={} layers={} heads={} ffn={} max_len={} vocab={}, \
                     configured d_model={} layers={} heads={} ffn={} max_len={} vocab={}",
                    p.config.d_model,
                    p.config.layers,
                    p.config.heads,
                    p.config.ffn,
                    p.config.max_len,
                    p.config.vocab_size,
                    expected.d_model,
                    expected.layers,
                    expected.heads,
                    expected.ffn,
                    expected.max_len,
                    expected.vocab_size
                )));
            }
            p.with_new_head(labels.len(), head_seed)
        }
        None => EncoderParameters::init(expected, head_seed)?,
    };
    let items = labeled_sequences(&train.instances, vocab, labels, expected.max_len)?;
    let history = fit_classifier(&mut params, &items, &cfg.finetune, seed::derive(head_seed, &[1]))?;
    Ok((
        ClassifierModel {
            params,
            vocab: vocab.clone(),
            labels: labels.to_vec(),
        },
        history,
    ))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &ClassifierModel, inst: &Instance) -> Result<RelationLabel> {
    let logits = model.logits(inst)?;
    Ok(model.labels[argmax(logits.view())].clone())
}

pub fn predict_all(model: &ClassifierModel, ds: &Dataset) -> Result<Vec<RelationLabel>> {
    par::map_range(ds.len(), |i| predict(model, &ds.instances[i]).map_err(|e| e.at_record(i)))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// (gold, predicted) -> count.
    pub confusion: BTreeMap<(String, String), usize>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn micro_f1(gold: &[RelationLabel], pred: &[RelationLabel], na: &RelationLabel, mode: F1Mode) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Data(format!("{} predictions for {} gold labels", pred.len(), gold.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut confusion = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        *confusion.entry((g.to_string(), p.to_string())).or_insert(0) += 1;
        let counts = |l: &RelationLabel| mode == F1Mode::AllClasses || l != na;
        if g == p {
            if counts(p) {
                tp += 1;
            }
        } else {
            if counts(p) {
                fp += 1;
            }
            if counts(g) {
                fn_ += 1;
            }
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    Ok(EvalReport {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        confusion,
    })
}

pub fn evaluate(model: &ClassifierModel, test: &Dataset, na: &RelationLabel, mode: F1Mode) -> Result<EvalReport> {
    let pred = predict_all(model, test)?;
    let gold: Vec<RelationLabel> = test.instances.iter().map(|i| i.relation.clone()).collect();
    micro_f1(&gold, &pred, na, mode)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "P\tR\tF1")?;
        writeln!(f, "{:.6}\t{:.6}\t{:.6}", self.precision, self.recall, self.f1)?;
        writeln!(f)?;
        writeln!(f, "gold\tpredicted\tcount")?;
        for ((g, p), n) in &self.confusion {
            writeln!(f, "{g}\t{p}\t{n}")?;
        }
        Ok(())
    }
}

/// Synthetic annotated, distant and test data with known label noise.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub ha_train: Dataset,
    pub test: Dataset,
    pub ds: Dataset,
    /// Per distant instance: whether its label disagrees with its text.
    pub flipped: Vec<bool>,
    pub labels: Vec<RelationLabel>,
}

fn relation_name(r: usize) -> String {
    format!("rel{r}")
}

fn trigger(r: usize, t: usize) -> String {
    format!("trig{r}x{t}")
}

/// One sentence `filler* head filler* [trigger] filler* tail filler*`.
fn synthetic_sentence(
    rng: &mut seed::Rng,
    b: &BenchSection,
    head: usize,
    tail: usize,
    trig: Option<String>,
    relation: &RelationLabel,
) -> Instance {
    let mut tokens = Vec::new();
    let filler = |tokens: &mut Vec<String>, rng: &mut seed::Rng| {
        for _ in 0..rng.random_range(0..=2) {
            tokens.push(format!("w{}", rng.random_range(0..b.filler_tokens.max(1))));
        }
    };
    filler(&mut tokens, rng);
    let h = tokens.len();
    tokens.push(format!("ent{head}"));
    filler(&mut tokens, rng);
    match trig {
        Some(t) => tokens.push(t),
        None => tokens.push(format!("w{}", rng.random_range(0..b.filler_tokens.max(1)))),
    }
    filler(&mut tokens, rng);
    let t = tokens.len();
    tokens.push(format!("ent{tail}"));
    filler(&mut tokens, rng);
    Instance {
        tokens,
        head: Span::new(h, h + 1),
        tail: Span::new(t, t + 1),
        relation: relation.clone(),
        confidence: None,
    }
}

fn entity_pair(rng: &mut seed::Rng, n: usize) -> (usize, usize) {
    let v = sample(rng, n, 2);
    (v.index(0), v.index(1))
}

pub fn generate_synthetic(b: &BenchSection, noise_rate: f64, seed_value: u64) -> Result<SyntheticCorpus> {
    if b.num_relations < 2 || b.triggers_per_relation == 0 || b.ha_triggers == 0 || b.entities < 2 {
        return Err(Error::Config("benchmark needs at least 2 relations, 1 trigger and 2 entities".into()));
    }
    if b.ha_triggers > b.triggers_per_relation {
        return Err(Error::Config("ha_triggers exceeds triggers_per_relation".into()));
    }
    if b.ds_bags_per_relation > b.entities * (b.entities - 1) {
        return Err(Error::Config("too few entities for the requested distant bags".into()));
    }
    let mut rng = seed::rng(seed_value, &[seed::stream::SYNTHETIC]);
    let na = RelationLabel::na();
    let rels: Vec<RelationLabel> = (0..b.num_relations)
        .map(|r| RelationLabel::new(relation_name(r)))
        .collect::<Result<_>>()?;

    let annotated = |rng: &mut seed::Rng, n: usize, triggers: usize| -> Vec<Instance> {
        (0..n)
            .map(|_| {
                let (h, t) = entity_pair(rng, b.entities);
                if rng.random::<f64>() < b.na_fraction {
                    synthetic_sentence(rng, b, h, t, None, &na)
                } else {
                    let r = rng.random_range(0..b.num_relations);
                    let trig = trigger(r, rng.random_range(0..triggers));
                    synthetic_sentence(rng, b, h, t, Some(trig), &rels[r])
                }
            })
            .collect()
    };
    let ha = annotated(&mut rng, b.ha_size, b.ha_triggers);
    let test = annotated(&mut rng, b.test_size, b.triggers_per_relation);

    let mut ds = Vec::new();
    let mut flipped = Vec::new();
    for (r, rel) in rels.iter().enumerate() {
        let mut pairs = Vec::new();
        while pairs.len() < b.ds_bags_per_relation {
            let p = entity_pair(&mut rng, b.entities);
            if !pairs.contains(&p) {
                pairs.push(p);
            }
        }
        for (h, t) in pairs {
            for _ in 0..b.bag_instances {
                let noisy = rng.random::<f64>() < noise_rate;
                let text_rel = if noisy {
                    let others: Vec<usize> = (0..b.num_relations).filter(|&o| o != r).collect();
                    *others.choose(&mut rng).expect("at least two relations")
                } else {
                    r
                };
                let trig = trigger(text_rel, rng.random_range(0..b.triggers_per_relation));
                ds.push(synthetic_sentence(&mut rng, b, h, t, Some(trig), rel));
                flipped.push(noisy);
            }
        }
    }
    for _ in 0..b.ds_na_bags {
        let (h, t) = entity_pair(&mut rng, b.entities);
        for _ in 0..b.bag_instances {
            ds.push(synthetic_sentence(&mut rng, b, h, t, None, &na));
            flipped.push(false);
        }
    }
    let mut labels = vec![na];
    labels.extend(rels);
    labels.sort();
    Ok(SyntheticCorpus {
        ha_train: Dataset { label_set: labels.clone(), instances: ha },
        test: Dataset { label_set: labels.clone(), instances: test },
        ds: Dataset { label_set: labels.clone(), instances: ds },
        flipped,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    FineTuneOnly,
    Unweighted,
    Weighted,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::FineTuneOnly, Arm::Unweighted, Arm::Weighted];

    pub fn name(self) -> &'static str {
        match self {
            Arm::FineTuneOnly => "ft_only",
            Arm::Unweighted => "wcl_unweighted",
            Arm::Weighted => "wcl_weighted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub arm: Arm,
    pub seed: u64,
    pub noise_rate: f64,
    pub f1: f64,
}

/// Mean reliability confidence of clean and of flipped distant instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceSplit {
    pub seed: u64,
    pub clean: f64,
    pub flipped: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub confidence: Vec<ConfidenceSplit>,
}

impl BenchReport {
    pub fn mean_f1(&self, arm: Arm) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.arm == arm).map(|r| r.f1).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("arm\tseed\tnoise_rate\tf1\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.6}", r.arm.name(), r.seed, r.noise_rate, r.f1);
        }
        let noise = self.rows.first().map_or(0.0, |r| r.noise_rate);
        for arm in Arm::ALL {
            let _ = writeln!(s, "{}\tmean\t{}\t{:.6}", arm.name(), noise, self.mean_f1(arm));
        }
        s
    }

    pub fn confidence_tsv(&self) -> String {
        let mut s = String::from("seed\tclean_mean\tflipped_mean\n");
        for c in &self.confidence {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", c.seed, c.clean, c.flipped);
        }
        s
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Runs the three arms on one synthetic corpus.
pub fn run_bench_seed(cfg: &PipelineConfig, noise_rate: f64, seed_value: u64) -> Result<(Vec<BenchRow>, ConfidenceSplit)> {
    let corpus = generate_synthetic(&cfg.bench, noise_rate, seed_value)?;
    let mut run_cfg = cfg.clone();
    run_cfg.seed = seed_value;
    let vocab = build_vocabulary(
        corpus
            .ha_train
            .instances
            .iter()
            .chain(&corpus.ds.instances)
            .flat_map(|i| i.tokens.iter().map(String::as_str)),
        cfg.encoder.min_freq,
    );
    let na = RelationLabel::new(cfg.eval.na_label.clone())?;

    let (reliability, _) = train_classifier(&corpus.ha_train, &vocab, &run_cfg)?;
    let scored = score_dataset(&reliability, &corpus.ds)?;
    let conf = |want: bool| {
        mean(
            scored
                .instances
                .iter()
                .zip(&corpus.flipped)
                .filter(|(i, &f)| !i.relation.is_na() && f == want)
                .map(|(i, _)| i.confidence.unwrap_or(0.0)),
        )
    };
    let split = ConfidenceSplit {
        seed: seed_value,
        clean: conf(false),
        flipped: conf(true),
    };

    let mut rows = Vec::new();
    for arm in Arm::ALL {
        let init = match arm {
            Arm::FineTuneOnly => None,
            Arm::Unweighted | Arm::Weighted => {
                let mut c = run_cfg.clone();
                c.wcl.weighted = arm == Arm::Weighted;
                Some(pretrain::pretrain(&scored, &vocab, &c)?.0)
            }
        };
        let (model, _) = finetune(init.as_ref(), &vocab, &corpus.ha_train, &corpus.labels, &run_cfg)?;
        let report = evaluate(&model, &corpus.test, &na, cfg.eval.f1_mode)?;
        log::info!("seed {seed_value} {}: F1 {:.4}", arm.name(), report.f1);
        rows.push(BenchRow {
            arm,
            seed: seed_value,
            noise_rate,
            f1: report.f1,
        });
    }
    Ok((rows, split))
}

/// Every arm over every configured seed.
pub fn noise_benchmark(cfg: &PipelineConfig, noise_rate: f64) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for &s in &cfg.bench.seeds {
        let (rows, split) = run_bench_seed(cfg, noise_rate, s)?;
        report.rows.extend(rows);
        report.confidence.push(split);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::tests::inst;
    use ndarray::array;

    fn labels(v: &[&str]) -> Vec<RelationLabel> {
        v.iter().map(|l| RelationLabel::new(*l).unwrap()).collect()
    }

    #[test]
    fn f1_hand_computed() {
        let gold = labels(&["a", "a", "b", "NA", "NA", "b"]);
        let pred = labels(&["a", "b", "b", "a", "NA", "NA"]);
        let na = RelationLabel::na();
        let r = micro_f1(&gold, &pred, &na, F1Mode::ExcludeNa).unwrap();
        // tp: 2 (a, b); fp: b-for-a, a-for-NA = 2; fn: a->b, b->NA = 2.
        assert_eq!((r.tp, r.fp, r.fn_), (2, 2, 2));
        assert!((r.f1 - 0.5).abs() < 1e-12);
        let all = micro_f1(&gold, &pred, &na, F1Mode::AllClasses).unwrap();
        assert!((all.precision - 0.5).abs() < 1e-12);
        assert_eq!(all.precision, all.recall);
        assert_eq!(r.confusion[&("b".into(), "NA".into())], 1);
    }

    #[test]
    fn f1_edge_cases() {
        let na = RelationLabel::na();
        let all_na = labels(&["NA", "NA"]);
        let r = micro_f1(&all_na, &all_na, &na, F1Mode::ExcludeNa).unwrap();
        assert_eq!(r.f1, 0.0);
        let g = labels(&["a", "b"]);
        assert_eq!(micro_f1(&g, &g, &na, F1Mode::ExcludeNa).unwrap().f1, 1.0);
        assert!(micro_f1(&g, &all_na[..1], &na, F1Mode::ExcludeNa).is_err());
    }

    #[test]
    fn argmax_first_wins_ties() {
        assert_eq!(argmax(array![1.0, 3.0, 3.0].view()), 1);
        assert_eq!(argmax(array![2.0, 2.0].view()), 0);
    }

    #[test]
    fn split_sizes_and_subset() {
        let v: Vec<Instance> = (0..50).map(|i| inst(&format!("x{i} y r{}", i % 3), (0, 1), (2, 3), "r")).collect();
        let ds = Dataset::from_instances(v);
        for (f, n) in [(0.01, 1), (0.1, 5), (0.5, 25), (1.0, 50), (0.03, 2)] {
            let s = low_resource_split(&ds, f, 7).unwrap();
            assert_eq!(s.len(), n, "fraction {f}");
            assert!(s.instances.iter().all(|i| ds.instances.contains(i)));
        }
        assert_eq!(low_resource_split(&ds, 0.3, 1).unwrap(), low_resource_split(&ds, 0.3, 1).unwrap());
        assert!(low_resource_split(&ds, 0.0, 1).is_err());
        assert!(low_resource_split(&ds, 0.001, 1).is_err());
    }

    #[test]
    fn synthetic_noise_rate_and_structure() {
        let b = BenchSection::default();
        let c = generate_synthetic(&b, 0.3, 4).unwrap();
        let rel_flags: Vec<bool> = c
            .ds
            .instances
            .iter()
            .zip(&c.flipped)
            .filter(|(i, _)| !i.relation.is_na())
            .map(|(_, &f)| f)
            .collect();
        let rate = rel_flags.iter().filter(|&&f| f).count() as f64 / rel_flags.len() as f64;
        assert!((rate - 0.3).abs() < 0.1, "{rate}");
        for i in c.ha_train.instances.iter().chain(&c.test.instances).chain(&c.ds.instances) {
            i.check_structure().unwrap();
        }
        // Annotated training text only uses the first `ha_triggers` triggers.
        for i in &c.ha_train.instances {
            assert!(!i.tokens.iter().any(|t| t.starts_with("trig") && t.ends_with(&format!("x{}", b.ha_triggers))));
        }
        assert_eq!(c.labels.len(), b.num_relations + 1);
    }

    #[test]
    fn finetune_rejects_shape_mismatch() {
        let ds = Dataset::from_instances(vec![inst("a b c", (0, 1), (2, 3), "r"), inst("c b a", (0, 1), (2, 3), "NA")]);
        let vocab = build_vocabulary(["a", "b", "c"], 1);
        let mut cfg = PipelineConfig::default();
        cfg.encoder.d_model = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.ffn = 8;
        cfg.encoder.layers = 1;
        let other = cfg.encoder.encoder_config(vocab.len(), 1);
        let p = EncoderParameters::init(crate::encoder::EncoderConfig { d_model: 12, ..other }, 1).unwrap();
        let err = finetune(Some(&p), &vocab, &ds, &ds.label_set, &cfg).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
        let ok = EncoderParameters::init(other, 1).unwrap();
        let (m, _) = finetune(Some(&ok), &vocab, &ds, &ds.label_set, &cfg).unwrap();
        assert_eq!(m.params.config.num_labels, 2);
        assert_eq!(m.params.tok_emb.shape(), ok.tok_emb.shape());
    }
}
