//! Joint contrastive and masked-LM pre-training of the encoder.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::Rng as _;

use crate::config::PipelineConfig;
use crate::data_model::{Bag, Dataset};
use crate::ds_builder::assemble_bags;
use crate::encoder::model::{representation_from_hidden, representation_grad_to_hidden};
use crate::encoder::{
    backward, batch, checkpoint, forward, mark_instance, mlm_batch, vocab, EncoderParameters, MarkedSequence,
    MaskedExample, Vocabulary,
};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, warmup_lr, Adam};
use crate::wcl::{sample_batch_with, wcl_loss_batch, ContrastiveBatch, WclOptions};
use crate::{par, seed};

pub const LOG_FILE: &str = "pretrain.log";
pub const LOG_HEADER: &str = "step\tL_wcl\tL_mlm\tL";
pub const FINAL_PARAMS: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingPolicy {
    pub mask_rate: f64,
    pub replace_mask: f64,
    pub replace_random: f64,
    pub keep: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            mask_rate: 0.15,
            replace_mask: 0.8,
            replace_random: 0.1,
            keep: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.replace_mask, self.replace_random, self.keep];
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) || parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("masking rates must lie in [0, 1] with a positive mask_rate".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("replace_mask + replace_random + keep must equal 1".into()));
        }
        Ok(())
    }
}

/// Selects positions of non-special tokens at `mask_rate` (at least one) and
/// corrupts them per `policy`. Targets are the original ids.
pub fn mask_tokens(ids: &[u32], policy: &MaskingPolicy, vocab_size: usize, rng: &mut seed::Rng) -> Result<MaskedExample> {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| !vocab::is_special(ids[i]) || ids[i] == vocab::UNK).collect();
    if candidates.is_empty() {
        return Err(Error::Data("no maskable tokens in sequence".into()));
    }
    let mut positions: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < policy.mask_rate)
        .collect();
    if positions.is_empty() {
        positions.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let first_regular = vocab::SPECIAL_TOKENS.len() as u32;
    let mut out = ids.to_vec();
    let targets = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        let u: f64 = rng.random();
        if u < policy.replace_mask {
            out[p] = vocab::MASK;
        } else if u < policy.replace_mask + policy.replace_random {
            out[p] = if (vocab_size as u32) > first_regular {
                rng.random_range(first_regular..vocab_size as u32)
            } else {
                vocab::MASK
            };
        }
    }
    Ok(MaskedExample {
        ids: out,
        positions,
        targets,
    })
}

/// Bags for the contrastive objective plus the masked-LM stream.
#[derive(Debug, Clone)]
pub struct PretrainData {
    pub bags: Vec<Bag>,
    /// Every encodable instance, in input order, including NA.
    pub mlm_stream: Vec<MarkedSequence>,
}

impl PretrainData {
    /// Drops instances the encoder cannot hold. With `weighted` each
    /// instance must carry a confidence; otherwise confidences are 1.
    pub fn prepare(ds: &Dataset, vocab: &Vocabulary, max_len: usize, weighted: bool) -> Result<Self> {
        let mut kept = Vec::new();
        let mut conf = Vec::new();
        let mut mlm_stream = Vec::new();
        for (i, inst) in ds.instances.iter().enumerate() {
            let c = match (weighted, inst.confidence) {
                (false, _) => 1.0,
                (true, Some(c)) => c,
                (true, None) => {
                    return Err(Error::Data("missing confidence in weighted pre-training".into()).at_record(i))
                }
            };
            match mark_instance(inst, vocab, max_len) {
                Ok(seq) => {
                    mlm_stream.push(seq);
                    kept.push(inst.clone());
                    conf.push(c);
                }
                Err(e) => log::warn!("record {}: skipped ({e})", i + 1),
            }
        }
        if mlm_stream.is_empty() {
            return Err(Error::Data("no encodable instances for pre-training".into()));
        }
        Ok(PretrainData {
            bags: assemble_bags(&kept, &conf)?,
            mlm_stream,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    /// One-based index of the completed step.
    pub step: u64,
    pub wcl: f64,
    pub mlm: f64,
    pub total: f64,
}

impl StepLosses {
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.step, self.wcl, self.mlm, self.total)
    }

    pub fn parse_log_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Checkpoint(format!("malformed log line '{line}'"));
        if f.len() != 4 {
            return Err(bad());
        }
        Ok(StepLosses {
            step: f[0].parse().map_err(|_| bad())?,
            wcl: f[1].parse().map_err(|_| bad())?,
            mlm: f[2].parse().map_err(|_| bad())?,
            total: f[3].parse().map_err(|_| bad())?,
        })
    }
}

/// Contrastive loss of `batch` under `params` and its gradient.
pub fn wcl_objective(
    params: &EncoderParameters,
    batch: &ContrastiveBatch,
    vocab: &Vocabulary,
    opts: &WclOptions,
) -> Result<(f64, EncoderParameters)> {
    let max_len = params.config.max_len;
    let seqs = batch
        .instances()
        .map(|i| mark_instance(i, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let caches = par::try_map(&seqs, |s| forward(params, &s.ids))?;
    let reps: Vec<Array1<f64>> = caches
        .iter()
        .zip(&seqs)
        .map(|(c, s)| representation_from_hidden(c.hidden(), s))
        .collect();
    let (loss, d_reps) = wcl_loss_batch(batch, &reps, opts)?;
    let d = params.config.d_model;
    let idx: Vec<usize> = (0..seqs.len()).collect();
    let (_, grads) = batch::accumulate(params, &idx, |&i, g| {
        let dh = representation_grad_to_hidden(d_reps[i].view(), &seqs[i], seqs[i].len(), d);
        backward(params, &caches[i], &dh, g);
        Ok(0.0)
    })?;
    Ok((loss, grads))
}

/// Both objectives of one step, with their summed gradient.
pub fn step_objective(
    params: &EncoderParameters,
    batch: &ContrastiveBatch,
    mlm_examples: &[MaskedExample],
    vocab: &Vocabulary,
    opts: &WclOptions,
) -> Result<(f64, f64, EncoderParameters)> {
    let (l_wcl, mut grads) = wcl_objective(params, batch, vocab, opts)?;
    let (l_mlm, g_mlm) = mlm_batch(params, mlm_examples)?;
    grads.add_assign(&g_mlm);
    Ok((l_wcl, l_mlm, grads))
}

/// Everything needed to continue pre-training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainState {
    pub params: EncoderParameters,
    pub adam: Adam,
    /// Completed steps.
    pub step: u64,
    pub mlm_cursor: usize,
    pub seed: u64,
}

impl PretrainState {
    pub fn new(vocab: &Vocabulary, cfg: &PipelineConfig) -> Result<Self> {
        let config = cfg.encoder.encoder_config(vocab.len(), 1);
        let seed_value = seed::derive(cfg.seed, &[seed::stream::PRETRAIN]);
        let params = EncoderParameters::init(config, seed_value)?;
        Ok(PretrainState {
            adam: Adam::new(&params),
            params,
            step: 0,
            mlm_cursor: 0,
            seed: seed_value,
        })
    }

    fn next_inputs(&self, data: &PretrainData, cfg: &PipelineConfig) -> Result<(ContrastiveBatch, Vec<MaskedExample>)> {
        let mut rng = seed::rng(self.seed, &[seed::stream::SAMPLE, self.step]);
        let batch = sample_batch_with(&data.bags, cfg.wcl.batch_bags, cfg.wcl.bag_size, &mut rng)?;
        let policy = cfg.mlm.policy()?;
        let n = data.mlm_stream.len();
        let vocab_size = self.params.config.vocab_size;
        let examples = (0..cfg.mlm.batch_size)
            .map(|i| {
                let seq = &data.mlm_stream[(self.mlm_cursor + i) % n];
                let mut rng = seed::rng(self.seed, &[seed::stream::MASK, self.step, i as u64]);
                mask_tokens(&seq.ids, &policy, vocab_size, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((batch, examples))
    }

    /// Runs one optimization step.
    pub fn step(&mut self, data: &PretrainData, vocab: &Vocabulary, cfg: &PipelineConfig) -> Result<StepLosses> {
        let (batch, examples) = self.next_inputs(data, cfg)?;
        let opts = cfg.wcl.options()?;
        let (l_wcl, l_mlm, mut grads) = step_objective(&self.params, &batch, &examples, vocab, &opts)?;
        let step = self.step + 1;
        if !l_wcl.is_finite() || !l_mlm.is_finite() || !grads.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {step}: L_wcl={l_wcl} L_mlm={l_mlm} grad_norm={}",
                grads.global_norm()
            )));
        }
        clip_global_norm(&mut grads, cfg.pretrain.clip);
        let lr = warmup_lr(cfg.pretrain.lr, self.step, cfg.pretrain.steps, cfg.pretrain.warmup_fraction);
        self.adam.step(&mut self.params, &grads, lr);
        self.step = step;
        self.mlm_cursor = (self.mlm_cursor + cfg.mlm.batch_size) % data.mlm_stream.len();
        Ok(StepLosses {
            step,
            wcl: l_wcl,
            mlm: l_mlm,
            total: l_wcl + l_mlm,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save_params(&self.params, &dir.join("params.bin"))?;
        checkpoint::save_moments(&self.adam.m, &self.adam.v, &dir.join("optimizer.bin"))?;
        let text = format!(
            "step\t{}\nmlm_cursor\t{}\nseed\t{}\nadam_t\t{}\n",
            self.step, self.mlm_cursor, self.seed, self.adam.t
        );
        let path = dir.join("state.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = checkpoint::load_params(&dir.join("params.bin"))?;
        let (m, v) = checkpoint::load_moments(&dir.join("optimizer.bin"))?;
        if m.config != params.config {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        let path = dir.join("state.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let field = |name: &str| -> Result<u64> {
            text.lines()
                .filter_map(|l| l.split_once('\t'))
                .find(|(k, _)| *k == name)
                .and_then(|(_, v)| v.trim().parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing or bad '{name}'", path.display())))
        };
        Ok(PretrainState {
            params,
            adam: Adam { m, v, t: field("adam_t")? },
            step: field("step")?,
            mlm_cursor: field("mlm_cursor")? as usize,
            seed: field("seed")?,
        })
    }
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(format!("step_{step:06}"))
}

/// Most recent `step_NNNNNN` directory under `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = match fs::read_dir(out) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(out, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(out, e))?;
        let name = entry.file_name();
        let Some(n) = name.to_str().and_then(|s| s.strip_prefix("step_")).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if entry.path().join("state.txt").is_file() && best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn read_log(path: &Path) -> Result<Vec<StepLosses>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(StepLosses::parse_log_line)
        .collect()
}

fn write_log(path: &Path, entries: &[StepLosses]) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in entries {
        let _ = writeln!(s, "{}", e.log_line());
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Runs steps until `cfg.pretrain.steps` (or `stop_at`, if earlier) have
/// completed. With `out`, writes periodic checkpoints, the loss log, and on
/// completion the final parameters, vocabulary and effective config.
pub fn run(
    state: &mut PretrainState,
    data: &PretrainData,
    vocab: &Vocabulary,
    cfg: &PipelineConfig,
    out: Option<&Path>,
    stop_at: Option<u64>,
) -> Result<Vec<StepLosses>> {
    let target = stop_at.map_or(cfg.pretrain.steps, |s| s.min(cfg.pretrain.steps));
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let mut prior = if path.is_file() { read_log(&path)? } else { Vec::new() };
            prior.retain(|e| e.step <= state.step);
            prior
        }
        None => Vec::new(),
    };
    let mut fresh = Vec::new();
    while state.step < target {
        let losses = state.step(data, vocab, cfg)?;
        log::info!("step {}\tL_wcl {:.6}\tL_mlm {:.6}", losses.step, losses.wcl, losses.mlm);
        fresh.push(losses);
        log.push(losses);
        if let Some(dir) = out {
            let every = cfg.pretrain.checkpoint_every;
            if every > 0 && state.step.is_multiple_of(every) {
                state.save(&checkpoint_dir(dir, state.step))?;
                write_log(&dir.join(LOG_FILE), &log)?;
            }
        }
    }
    if let Some(dir) = out {
        write_log(&dir.join(LOG_FILE), &log)?;
        if state.step == cfg.pretrain.steps {
            checkpoint::save_params(&state.params, &dir.join(FINAL_PARAMS))?;
            vocab.save(&dir.join(VOCAB_FILE))?;
            cfg.write_sidecar(&dir.join(CONFIG_FILE))?;
        }
    }
    Ok(fresh)
}

/// In-memory pre-training from scratch.
pub fn pretrain(ds: &Dataset, vocab: &Vocabulary, cfg: &PipelineConfig) -> Result<(EncoderParameters, Vec<StepLosses>)> {
    let data = PretrainData::prepare(ds, vocab, cfg.encoder.max_len, cfg.wcl.weighted)?;
    let mut state = PretrainState::new(vocab, cfg)?;
    let log = run(&mut state, &data, vocab, cfg, None, None)?;
    Ok((state.params, log))
}
