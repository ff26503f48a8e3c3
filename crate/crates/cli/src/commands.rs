use std::fs;
use std::path::{Path, PathBuf};

use wclre::config::PipelineConfig;
use wclre::data_model::{Dataset, RelationLabel};
use wclre::ds_builder::{build_ds, read_corpus, BuildOptions};
use wclre::encoder::{build_vocabulary, checkpoint, Vocabulary};
use wclre::error::{Error, Result};
use wclre::finetune_eval::{evaluate, finetune, low_resource_split, noise_benchmark};
use wclre::pretrain::{self, latest_checkpoint, PretrainData, PretrainState};
use wclre::reliability::{score_dataset, train_classifier, ClassifierModel};

use crate::{Command, Common};

pub const CONFIG_SIDECAR: &str = "config.toml";

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// `<file>.config.toml` next to a file output.
fn sidecar_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

fn vocab_of(ds: &Dataset, min_freq: usize) -> Vocabulary {
    build_vocabulary(ds.instances.iter().flat_map(|i| i.tokens.iter().map(String::as_str)), min_freq)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildDs {
            ha,
            corpus,
            out,
            cap,
            drop_pronouns,
            corpus_mode,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = cap {
                cfg.ds.cap = c;
            }
            if drop_pronouns {
                cfg.ds.drop_pronouns = true;
            }
            if let Some(m) = corpus_mode {
                cfg.ds.corpus_mode = m;
            }
            cfg.validate()?;
            let ha = Dataset::load(&ha)?;
            let sentences = read_corpus(&corpus, cfg.ds.mode()?)?;
            let opts = BuildOptions {
                cap: cfg.ds.cap,
                drop_pronouns: cfg.ds.drop_pronouns,
                ..BuildOptions::default()
            };
            let (instances, stats) = build_ds(&ha, &sentences, &opts)?;
            wclre::data_model::write_instances(&out, &instances)?;
            let mut stats_path = out.as_os_str().to_owned();
            stats_path.push(".stats.txt");
            write(Path::new(&stats_path), &stats.to_text())?;
            cfg.write_sidecar(&sidecar_for(&out))?;
            log::info!("{} instances written to {}", instances.len(), out.display());
        }
        Command::TrainReliability { ha, out, common } => {
            let cfg = load_config(&common)?;
            let ha = Dataset::load(&ha)?;
            let vocab = vocab_of(&ha, cfg.encoder.min_freq);
            let (model, _) = train_classifier(&ha, &vocab, &cfg)?;
            model.save(&out)?;
            cfg.write_sidecar(&out.join(CONFIG_SIDECAR))?;
        }
        Command::Score { model, ds, out, common } => {
            let cfg = load_config(&common)?;
            let model = ClassifierModel::load(&model)?;
            let scored = score_dataset(&model, &Dataset::load(&ds)?)?;
            scored.save(&out)?;
            cfg.write_sidecar(&sidecar_for(&out))?;
        }
        Command::Pretrain {
            ds_scored,
            out,
            resume,
            common,
        } => {
            let cfg = load_config(&common)?;
            let ds = Dataset::load(&ds_scored)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let vocab_path = out.join(pretrain::VOCAB_FILE);
            let (vocab, mut state) = match resume.then(|| latest_checkpoint(&out)).transpose()?.flatten() {
                Some(ck) => {
                    log::info!("resuming from {}", ck.display());
                    (Vocabulary::load(&vocab_path)?, PretrainState::load(&ck)?)
                }
                None => {
                    if resume {
                        log::warn!("no checkpoint in {}; starting from scratch", out.display());
                    }
                    let vocab = vocab_of(&ds, cfg.encoder.min_freq);
                    let state = PretrainState::new(&vocab, &cfg)?;
                    (vocab, state)
                }
            };
            vocab.save(&vocab_path)?;
            cfg.write_sidecar(&out.join(pretrain::CONFIG_FILE))?;
            let data = PretrainData::prepare(&ds, &vocab, cfg.encoder.max_len, cfg.wcl.weighted)?;
            pretrain::run(&mut state, &data, &vocab, &cfg, Some(&out), None)?;
        }
        Command::Finetune { init, ha, out, common } => {
            let cfg = load_config(&common)?;
            let ha = Dataset::load(&ha)?;
            let (vocab, params) = if init == "fresh" {
                (vocab_of(&ha, cfg.encoder.min_freq), None)
            } else {
                let dir = Path::new(&init);
                let vocab = Vocabulary::load(&dir.join(pretrain::VOCAB_FILE))?;
                let params = checkpoint::load_params(&dir.join(pretrain::FINAL_PARAMS))?;
                (vocab, Some(params))
            };
            let (model, _) = finetune(params.as_ref(), &vocab, &ha, &ha.label_set, &cfg)?;
            model.save(&out)?;
            cfg.write_sidecar(&out.join(CONFIG_SIDECAR))?;
        }
        Command::Evaluate {
            model,
            test,
            na_label,
            f1_mode,
            out,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(na) = na_label {
                cfg.eval.na_label = na;
            }
            if let Some(m) = f1_mode {
                cfg.eval.f1_mode = m.parse()?;
            }
            let model = ClassifierModel::load(&model)?;
            let test = Dataset::load(&test)?;
            let na = RelationLabel::new(cfg.eval.na_label.clone())?;
            let report = evaluate(&model, &test, &na, cfg.eval.f1_mode)?;
            write(&out, &report.to_string())?;
            cfg.write_sidecar(&sidecar_for(&out))?;
        }
        Command::Split {
            ha,
            fraction,
            out,
            common,
        } => {
            let cfg = load_config(&common)?;
            let subset = low_resource_split(&Dataset::load(&ha)?, fraction, cfg.seed)?;
            subset.save(&out)?;
            cfg.write_sidecar(&sidecar_for(&out))?;
        }
        Command::BenchNoise { out, noise_rate, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.bench.seeds = vec![s];
            }
            if let Some(r) = noise_rate {
                cfg.bench.noise_rate = r;
            }
            cfg.validate()?;
            let report = noise_benchmark(&cfg, cfg.bench.noise_rate)?;
            write(&out, &report.to_tsv())?;
            let mut conf = out.as_os_str().to_owned();
            conf.push(".confidence.tsv");
            write(Path::new(&conf), &report.confidence_tsv())?;
            cfg.write_sidecar(&sidecar_for(&out))?;
        }
    }
    Ok(())
}
