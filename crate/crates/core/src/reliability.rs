//! Reliability classifier trained on annotated data; its softmax probability
//! at an instance's distant label is that instance's confidence.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;

use crate::config::{PipelineConfig, SupervisedSection};
use crate::data_model::{Dataset, Instance, RelationLabel};
use crate::encoder::{
    checkpoint, classifier_batch, classifier_logits, mark_instance, EncoderParameters, MarkedSequence, Vocabulary,
};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, Adam};
use crate::{par, seed};

pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LABELS_FILE: &str = "labels.txt";

/// Encoder with a classification head over a fixed label set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub params: EncoderParameters,
    pub vocab: Vocabulary,
    pub labels: Vec<RelationLabel>,
}

impl ClassifierModel {
    pub fn label_index(&self, label: &RelationLabel) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn mark(&self, inst: &Instance) -> Result<MarkedSequence> {
        mark_instance(inst, &self.vocab, self.params.config.max_len)
    }

    pub fn logits(&self, inst: &Instance) -> Result<Array1<f64>> {
        classifier_logits(&self.params, &self.mark(inst)?)
    }

    /// Probability the classifier assigns to the instance's own relation.
    pub fn confidence(&self, inst: &Instance) -> Result<f64> {
        let idx = self
            .label_index(&inst.relation)
            .ok_or_else(|| Error::Data(format!("unknown label '{}'", inst.relation)))?;
        Ok(confidence_from_logits(self.logits(inst)?.view(), idx))
    }

    /// Writes `params.bin` (+ sidecar), `vocab.txt` and `labels.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save_params(&self.params, &dir.join(PARAMS_FILE))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let labels: String = self.labels.iter().map(|l| format!("{l}\n")).collect();
        let path = dir.join(LABELS_FILE);
        fs::write(&path, labels).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = checkpoint::load_params(&dir.join(PARAMS_FILE))?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let path = dir.join(LABELS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let labels = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(RelationLabel::new)
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != params.config.num_labels {
            return Err(Error::Checkpoint(format!(
                "{} lists {} labels but the head has {}",
                path.display(),
                labels.len(),
                params.config.num_labels
            )));
        }
        if vocab.len() != params.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries but the embedding has {}",
                vocab.len(),
                params.config.vocab_size
            )));
        }
        Ok(ClassifierModel { params, vocab, labels })
    }
}

pub fn confidence_from_logits(logits: ndarray::ArrayView1<f64>, label: usize) -> f64 {
    crate::encoder::model::softmax(logits)[label]
}

/// Marks every instance and maps its relation into `labels`. Instances too
/// long for the encoder are skipped with a warning; unknown labels are errors.
pub fn labeled_sequences(
    instances: &[Instance],
    vocab: &Vocabulary,
    labels: &[RelationLabel],
    max_len: usize,
) -> Result<Vec<(MarkedSequence, usize)>> {
    let mut out = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let label = labels
            .iter()
            .position(|l| *l == inst.relation)
            .ok_or_else(|| Error::Data(format!("unknown label '{}'", inst.relation)).at_record(i))?;
        match mark_instance(inst, vocab, max_len) {
            Ok(seq) => out.push((seq, label)),
            Err(e) => log::warn!("record {}: skipped ({e})", i + 1),
        }
    }
    Ok(out)
}

/// Minibatch cross-entropy training with Adam. Returns the mean loss over
/// the whole training set after each epoch.
pub fn fit_classifier(
    params: &mut EncoderParameters,
    items: &[(MarkedSequence, usize)],
    opts: &SupervisedSection,
    seed_value: u64,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Data("no trainable instances".into()));
    }
    let mut adam = Adam::new(params);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut rng = seed::rng(seed_value, &[epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch: Vec<(MarkedSequence, usize)> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, mut grads) = classifier_batch(params, &batch)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Numerical(format!("non-finite classifier loss at epoch {}: {loss}", epoch + 1)));
            }
            clip_global_norm(&mut grads, opts.clip);
            adam.step(params, &grads, opts.lr);
        }
        let loss = dataset_loss(params, items)?;
        log::info!("epoch {}\tloss {loss:.6}", epoch + 1);
        history.push(loss);
    }
    Ok(history)
}

/// Mean cross-entropy over `items` without updating anything.
pub fn dataset_loss(params: &EncoderParameters, items: &[(MarkedSequence, usize)]) -> Result<f64> {
    let losses = par::try_map(items, |(seq, label)| {
        let logits = classifier_logits(params, seq)?;
        Ok::<_, Error>(-crate::encoder::model::log_softmax(logits.view())[*label])
    })?;
    Ok(losses.iter().sum::<f64>() / items.len().max(1) as f64)
}

/// Trains the reliability classifier on `ha` over its own label set.
pub fn train_classifier(ha: &Dataset, vocab: &Vocabulary, cfg: &PipelineConfig) -> Result<(ClassifierModel, Vec<f64>)> {
    if ha.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if ha.label_set.len() < 2 {
        return Err(Error::Data(format!(
            "degenerate label set: {} label(s) in training data",
            ha.label_set.len()
        )));
    }
    let labels = ha.label_set.clone();
    let config = cfg.encoder.encoder_config(vocab.len(), labels.len());
    let init_seed = seed::derive(cfg.seed, &[seed::stream::RELIABILITY]);
    let mut params = EncoderParameters::init(config, init_seed)?;
    let items = labeled_sequences(&ha.instances, vocab, &labels, config.max_len)?;
    let history = fit_classifier(&mut params, &items, &cfg.reliability, init_seed)?;
    Ok((
        ClassifierModel {
            params,
            vocab: vocab.clone(),
            labels,
        },
        history,
    ))
}

/// Returns `ds` with each instance's confidence set by `model`, in input order.
pub fn score_dataset(model: &ClassifierModel, ds: &Dataset) -> Result<Dataset> {
    let scores = par::map_range(ds.len(), |i| model.confidence(&ds.instances[i]).map_err(|e| e.at_record(i)));
    let mut out = ds.clone();
    for (inst, c) in out.instances.iter_mut().zip(scores) {
        inst.confidence = Some(c?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::tests::inst;
    use crate::encoder::build_vocabulary;

    fn toy_ha() -> Dataset {
        let mut v = Vec::new();
        for (i, (rel, trig)) in [("born_in", "born"), ("works_for", "works"), ("NA", "near")]
            .iter()
            .cycle()
            .take(20)
            .enumerate()
        {
            let s = format!("e{} was {trig} at e{} today", i % 5, (i + 2) % 5);
            v.push(inst(&s, (0, 1), (4, 5), rel));
        }
        Dataset::from_instances(v)
    }

    fn small_cfg() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.encoder.d_model = 16;
        c.encoder.ffn = 24;
        c.encoder.heads = 2;
        c.encoder.layers = 1;
        c.encoder.max_len = 24;
        c.reliability.epochs = 15;
        c.reliability.lr = 3e-3;
        c
    }

    fn vocab_for(ds: &Dataset) -> Vocabulary {
        build_vocabulary(ds.instances.iter().flat_map(|i| i.tokens.iter().map(String::as_str)), 1)
    }

    #[test]
    fn loss_decreases_and_model_round_trips() {
        let ha = toy_ha();
        let vocab = vocab_for(&ha);
        let mut cfg = PipelineConfig::default();
        cfg.reliability.epochs = 50;
        let (model, history) = train_classifier(&ha, &vocab, &cfg).unwrap();
        assert!(history.last().unwrap() < &(history[0] * 0.9), "{history:?}");
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{history:?}");
        }
        for i in &ha.instances {
            let best = crate::finetune_eval::argmax(model.logits(i).unwrap().view());
            assert_eq!(model.labels[best], i.relation);
        }
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = ClassifierModel::load(dir.path()).unwrap();
        assert_eq!(back, model);
        let scored = score_dataset(&back, &ha).unwrap();
        for (a, b) in scored.instances.iter().zip(&ha.instances) {
            let c = a.confidence.unwrap();
            assert!((0.0..=1.0).contains(&c));
            assert_eq!(a.tokens, b.tokens);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let vocab = Vocabulary::specials_only();
        let err = train_classifier(&Dataset::default(), &vocab, &small_cfg()).unwrap_err();
        assert!(err.to_string().contains("empty"));
        let one = Dataset::from_instances(vec![inst("a b", (0, 1), (1, 2), "r")]);
        let err = train_classifier(&one, &vocab, &small_cfg()).unwrap_err();
        assert!(err.to_string().contains("degenerate label set"));
    }

    #[test]
    fn untrained_confidences_near_uniform() {
        let ha = toy_ha();
        let vocab = vocab_for(&ha);
        let cfg = small_cfg();
        let config = cfg.encoder.encoder_config(vocab.len(), 4);
        let model = ClassifierModel {
            params: EncoderParameters::init(config, 3).unwrap(),
            vocab,
            labels: ["a", "b", "c", "d"].iter().map(|l| RelationLabel::new(*l).unwrap()).collect(),
        };
        let mut total = 0.0;
        for i in &ha.instances {
            let l = model.logits(i).unwrap();
            total += crate::encoder::model::softmax(l.view()).fold(0.0f64, |a, &b| a.max(b));
        }
        let mean = total / ha.len() as f64;
        assert!((mean - 0.25).abs() < 0.1, "{mean}");
    }

    #[test]
    fn unknown_label_scoring_fails() {
        let ha = toy_ha();
        let vocab = vocab_for(&ha);
        let (model, _) = train_classifier(&ha, &vocab, &PipelineConfig {
            reliability: SupervisedSection { epochs: 1, ..small_cfg().reliability },
            ..small_cfg()
        })
        .unwrap();
        let ds = Dataset::from_instances(vec![inst("e1 was born at e2 today", (0, 1), (4, 5), "spouse")]);
        let err = score_dataset(&model, &ds).unwrap_err();
        assert!(err.to_string().contains("unknown label"), "{err}");
    }
}
