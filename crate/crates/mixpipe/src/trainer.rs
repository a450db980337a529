//! Two-stage training: joint image-caption + text-only pretraining with
//! the encoder-freeze policy, then mixed-task fine-tuning sampled at
//! natural frequencies. An optional weight mix between two pretrained
//! domains sits between the stages.

use crate::checkpoint::{self, Checkpoint, StageTag, ENCODER_KEY_PREFIX};
use crate::data::convo::{tokenize_caption, tokenize_conversation, ConversationSample};
use crate::data::sampler::{DatasetSpec, NaturalFrequencySampler};
use crate::data::synth::TextCorpus;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{EncodedSample, Model};
use crate::numerics::{adamw_step, lr_at_step, AdamwHyper, Graph, OptimState, ScheduleConfig, TensorId};
use rand::Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSpec {
    /// Per step: this many image-caption items and this many text-corpus
    /// tokens. Either side may be zeroed for ablations, not both.
    Pretrain { caption_items: usize, text_tokens: usize },
    Finetune { samples: usize },
}

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: Stage,
    /// Key prefixes that receive updates; encoder keys may never appear.
    pub trainable: Vec<String>,
    pub schedule: ScheduleConfig,
    pub batch: BatchSpec,
    pub hyper: AdamwHyper,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        for prefix in &self.trainable {
            if ENCODER_KEY_PREFIX.starts_with(prefix.as_str()) || prefix.starts_with(ENCODER_KEY_PREFIX) {
                return Err(Error::InvalidConfig(format!(
                    "encoder prefix {prefix} may not be trainable"
                )));
            }
        }
        match (self.stage, self.batch) {
            (Stage::Pretrain, BatchSpec::Pretrain { caption_items, text_tokens }) => {
                if caption_items == 0 && text_tokens == 0 {
                    return Err(Error::InvalidConfig("pretrain batch is empty".into()));
                }
            }
            (Stage::Finetune, BatchSpec::Finetune { samples }) => {
                if samples == 0 {
                    return Err(Error::InvalidConfig("finetune batch is empty".into()));
                }
            }
            _ => return Err(Error::InvalidConfig("batch spec does not match stage".into())),
        }
        Ok(())
    }

    /// Defaults from the published recipe, recorded for provenance; the
    /// desk-scale overrides replace steps/lr in practice.
    ///   pretrain: 180k steps, warmup 2k, lr 5e-5 -> 5e-6, 640 caption
    ///   items + 65,536 text tokens per batch
    ///   finetune: batch 128, lr 2e-5 -> 0, warmup 0.03 epoch
    pub fn toy_pretrain(seed: u64, steps: usize) -> Self {
        Self {
            stage: Stage::Pretrain,
            trainable: vec!["lm.".into(), "mix.".into()],
            schedule: ScheduleConfig {
                peak_lr: 3e-4,
                final_lr: 3e-5,
                // 50 at the default 2,000-step scale, shrinking with steps
                warmup_steps: (steps / 40).clamp(1, 50),
                total_steps: steps,
                shape: crate::numerics::ScheduleShape::LinearWarmupCosine,
            },
            batch: BatchSpec::Pretrain { caption_items: 4, text_tokens: 128 },
            hyper: AdamwHyper::default(),
            seed,
        }
    }

    pub fn toy_finetune(seed: u64, steps: usize) -> Self {
        Self {
            stage: Stage::Finetune,
            trainable: vec!["lm.".into(), "mix.".into()],
            schedule: ScheduleConfig {
                peak_lr: 3e-4,
                final_lr: 0.0,
                warmup_steps: warmup_for_fraction(0.03, steps),
                total_steps: steps,
                shape: crate::numerics::ScheduleShape::LinearWarmupCosine,
            },
            batch: BatchSpec::Finetune { samples: 8 },
            hyper: AdamwHyper::default(),
            seed,
        }
    }
}

/// Warmup steps for a fraction-of-run warmup spec (at least 1 step so the
/// ramp exists, below total so the schedule stays valid).
pub fn warmup_for_fraction(fraction: f64, total_steps: usize) -> usize {
    ((fraction * total_steps as f64).ceil() as usize).clamp(1, total_steps.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub caption_loss: Option<f64>,
    pub text_loss: Option<f64>,
    pub total_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,caption_loss,text_loss,total_loss\n");
        for row in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.9e},{},{},{:.6}\n",
                row.step,
                row.lr,
                opt(row.caption_loss),
                opt(row.text_loss),
                row.total_loss
            ));
        }
        out
    }
}

/// Pretraining pool: caption pairs plus the text corpus.
#[derive(Debug, Clone)]
pub struct PretrainData {
    pub captions: Vec<(ImageTensor, String)>,
    pub corpus: TextCorpus,
}

/// Fine-tuning pool: one conversation list per dataset spec.
#[derive(Debug, Clone)]
pub struct FinetuneData {
    pub datasets: Vec<(DatasetSpec, Vec<ConversationSample>)>,
}

impl FinetuneData {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::InvalidConfig("no finetune datasets".into()));
        }
        for (spec, samples) in &self.datasets {
            spec.validate()?;
            if spec.size != samples.len() {
                return Err(Error::InvalidConfig(format!(
                    "dataset {} declares {} samples but holds {}",
                    spec.name,
                    spec.size,
                    samples.len()
                )));
            }
        }
        Ok(())
    }
}

pub enum StageData {
    Pretrain(PretrainData),
    Finetune(FinetuneData),
}

/// Converts a conversation into a training sample under the model's
/// tiling plan.
pub fn encode_conversation(model: &Model, convo: &ConversationSample) -> Result<EncodedSample> {
    let (text_ids, loss_mask) = tokenize_conversation(convo, &model.cfg.lm)?;
    let views = match &convo.image {
        Some(img) => model.prepare_views(img)?,
        None => Vec::new(),
    };
    Ok(EncodedSample { views, text_ids, loss_mask })
}

fn mean_of(g: &mut Graph, mut losses: Vec<TensorId>) -> Result<TensorId> {
    let n = losses.len();
    let mut total = losses.remove(0);
    for l in losses {
        total = g.add(total, l)?;
    }
    g.scale(total, 1.0 / n as f64)
}

struct PretrainStepLoss {
    caption: Option<TensorId>,
    text: Option<TensorId>,
}

fn pretrain_step_losses(
    model: &Model,
    g: &mut Graph,
    bp: &crate::params::BoundParams,
    data: &PretrainData,
    caption_items: usize,
    text_tokens: usize,
    seed: u64,
    step: usize,
) -> Result<PretrainStepLoss> {
    let caption = if caption_items > 0 {
        if data.captions.is_empty() {
            return Err(Error::InvalidConfig("caption batch requested but no captions".into()));
        }
        let mut rng = crate::rng::step_stream(seed, "pretrain_captions", step);
        let mut losses = Vec::with_capacity(caption_items);
        for _ in 0..caption_items {
            let (img, text) = &data.captions[rng.gen_range(0..data.captions.len())];
            let (ids, mask) = tokenize_caption(text, &model.cfg.lm);
            let sample = EncodedSample { views: model.global_view(img)?, text_ids: ids, loss_mask: mask };
            losses.push(model.sample_loss(g, bp, &sample)?);
        }
        Some(mean_of(g, losses)?)
    } else {
        None
    };

    let text = if text_tokens > 0 {
        let chunk = data.corpus.train_chunk(step, text_tokens);
        let mut ids = vec![model.cfg.lm.bos_token];
        ids.extend(chunk);
        let mut mask = vec![true; ids.len()];
        mask[0] = false;
        let sample = EncodedSample::text_only(ids, mask);
        Some(model.sample_loss(g, bp, &sample)?)
    } else {
        None
    };

    Ok(PretrainStepLoss { caption, text })
}

/// Runs one stage for `steps` steps, mutating the model in place. Frozen
/// keys are bit-identical afterwards; the trace records the exact
/// schedule lr and per-modality losses.
pub fn train_stage(
    model: &mut Model,
    cfg: &StageConfig,
    data: &StageData,
    steps: usize,
    tag: StageTag,
) -> Result<(Checkpoint, LossTrace)> {
    cfg.validate()?;
    if steps > cfg.schedule.total_steps {
        return Err(Error::InvalidConfig(format!(
            "steps {steps} exceed schedule total {}",
            cfg.schedule.total_steps
        )));
    }
    let mut optim: BTreeMap<String, OptimState> = BTreeMap::new();
    let mut trace = LossTrace::default();

    let mut finetune_sampler = match (&cfg.batch, data) {
        (BatchSpec::Finetune { .. }, StageData::Finetune(fd)) => {
            fd.validate()?;
            let specs: Vec<DatasetSpec> = fd.datasets.iter().map(|(s, _)| s.clone()).collect();
            Some(NaturalFrequencySampler::new(&specs, cfg.seed)?)
        }
        _ => None,
    };

    for step in 0..steps {
        let lr = lr_at_step(step, &cfg.schedule)?;
        let batch_id = format!("{}:{}", cfg.seed, step);
        let abort = |source: Error| Error::TrainAborted {
            step,
            batch: batch_id.clone(),
            source: Box::new(source),
        };

        let mut g = Graph::new();
        let bp = model.bind(&mut g, &cfg.trainable).map_err(abort)?;

        let (total, caption_loss, text_loss) = match (&cfg.batch, data) {
            (&BatchSpec::Pretrain { caption_items, text_tokens }, StageData::Pretrain(pd)) => {
                let losses = pretrain_step_losses(
                    model,
                    &mut g,
                    &bp,
                    pd,
                    caption_items,
                    text_tokens,
                    cfg.seed,
                    step,
                )
                .map_err(|e| Error::TrainAborted {
                    step,
                    batch: batch_id.clone(),
                    source: Box::new(e),
                })?;
                let caption_val = losses.caption.map(|id| g.scalar(id));
                let text_val = losses.text.map(|id| g.scalar(id));
                // unweighted sum of the two modality losses
                let total = match (losses.caption, losses.text) {
                    (Some(c), Some(t)) => g.add(c, t).map_err(|e| Error::TrainAborted {
                        step,
                        batch: batch_id.clone(),
                        source: Box::new(e),
                    })?,
                    (Some(c), None) => c,
                    (None, Some(t)) => t,
                    (None, None) => unreachable!("validated batch"),
                };
                (total, caption_val, text_val)
            }
            (&BatchSpec::Finetune { samples }, StageData::Finetune(fd)) => {
                let sampler = finetune_sampler.as_mut().expect("sampler built above");
                let mut losses = Vec::with_capacity(samples);
                for _ in 0..samples {
                    let (d, idx) = sampler.draw();
                    let convo = &fd.datasets[d].1[idx];
                    let sample = encode_conversation(model, convo).map_err(|e| {
                        Error::TrainAborted { step, batch: batch_id.clone(), source: Box::new(e) }
                    })?;
                    losses.push(model.sample_loss(&mut g, &bp, &sample).map_err(|e| {
                        Error::TrainAborted { step, batch: batch_id.clone(), source: Box::new(e) }
                    })?);
                }
                let total = mean_of(&mut g, losses).map_err(|e| Error::TrainAborted {
                    step,
                    batch: batch_id.clone(),
                    source: Box::new(e),
                })?;
                (total, None, None)
            }
            _ => unreachable!("validated batch/stage pairing"),
        };

        let total_val = g.scalar(total);
        g.backward(total).map_err(abort)?;

        let grads = bp.collect_grads(&g);
        let hyper = AdamwHyper { lr, ..cfg.hyper };
        for (key, grad) in &grads {
            let param = model.params.get_mut(key).expect("bound key exists");
            let state = optim
                .entry(key.clone())
                .or_insert_with(|| OptimState::new(param.data.len()));
            adamw_step(&mut param.data, grad, state, &hyper).map_err(abort)?;
        }

        trace.rows.push(TraceRow { step, lr, caption_loss, text_loss, total_loss: total_val });
    }

    Ok((model.to_checkpoint(tag, steps)?, trace))
}

/// Spec of the full pipeline run: pretrain on domain A, optionally continue
/// on domain B, optionally interpolate the two checkpoints, then fine-tune.
pub struct TwoStageSpec {
    pub pretrain: (StageConfig, PretrainData, usize),
    pub syn_pretrain: Option<(StageConfig, PretrainData, usize)>,
    /// Interpolation weight on the domain-A checkpoint.
    pub mix_beta: Option<f64>,
    pub finetune: (StageConfig, FinetuneData, usize),
}

pub struct TwoStageOutput {
    pub final_checkpoint: Checkpoint,
    pub saved: Vec<PathBuf>,
    pub pretrain_trace: LossTrace,
    pub finetune_trace: LossTrace,
}

/// Executes the full recipe, persisting every intermediate checkpoint with
/// its stage tag under `out_dir`.
pub fn run_two_stage(model: &mut Model, spec: &TwoStageSpec, out_dir: &Path) -> Result<TwoStageOutput> {
    if spec.mix_beta.is_some() && spec.syn_pretrain.is_none() {
        return Err(Error::InvalidConfig(
            "weight mixing needs a synthetic-domain pretrain stage".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut saved = Vec::new();
    let save = |name: &str, ckpt: &Checkpoint| -> Result<PathBuf> {
        let path = out_dir.join(name);
        checkpoint::save(ckpt, &path)?;
        Ok(path)
    };

    let (cfg_a, data_a, steps_a) = &spec.pretrain;
    let (ckpt_real, pretrain_trace) = train_stage(
        model,
        cfg_a,
        &StageData::Pretrain(data_a.clone()),
        *steps_a,
        StageTag::PretrainReal,
    )?;
    saved.push(save("pretrain_real.mxck", &ckpt_real)?);

    let ckpt_for_finetune = if let Some((cfg_b, data_b, steps_b)) = &spec.syn_pretrain {
        let (ckpt_syn, _) = train_stage(
            model,
            cfg_b,
            &StageData::Pretrain(data_b.clone()),
            *steps_b,
            StageTag::PretrainSyn,
        )?;
        saved.push(save("pretrain_syn.mxck", &ckpt_syn)?);
        match spec.mix_beta {
            Some(beta) => {
                let mixed = checkpoint::mix_weights(&ckpt_real, &ckpt_syn, beta)?;
                saved.push(save("mixed.mxck", &mixed)?);
                mixed
            }
            None => ckpt_syn,
        }
    } else {
        ckpt_real
    };
    model.params = ckpt_for_finetune.entries.clone();

    let (cfg_f, data_f, steps_f) = &spec.finetune;
    let (final_checkpoint, finetune_trace) = train_stage(
        model,
        cfg_f,
        &StageData::Finetune(data_f.clone()),
        *steps_f,
        StageTag::Finetuned,
    )?;
    saved.push(save("finetuned.mxck", &final_checkpoint)?);

    Ok(TwoStageOutput { final_checkpoint, saved, pretrain_trace, finetune_trace })
}
