//! Command-line front end binding the pipeline together.

use crate::checkpoint::{self, StageTag};
use crate::config::{self, KvConfig};
use crate::data::convo::ConversationSample;
use crate::data::coords::parse_bbox;
use crate::data::manifest;
use crate::data::sampler::DatasetSpec;
use crate::data::synth::{self, CaptionStyle, TextCorpus};
use crate::data::templates::TaskTag;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::image::{read_p6, write_p6};
use crate::model::Model;
use crate::tiler;
use crate::trainer::{self, FinetuneData, PretrainData, Stage, StageData};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mixpipe", version, about = "multimodal mixing pipeline")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage-1 joint image-caption + text pretraining.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint instead of fresh init.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage-2 mixed-task fine-tuning from a checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convex interpolation of two checkpoints.
    MixWeights {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose an image into global + crop views.
    Tile {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 224)]
        base_res: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a response for an image + prompt.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 128)]
        max_new: usize,
    },
    /// Score a checkpoint on a dataset manifest or text file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// rec | vqa | probe | ppl
        #[arg(long)]
        metric: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
    },
    /// Generate synthetic datasets.
    GenData {
        /// caption | vqa | detection | rec | reg | pose | grounded_caption |
        /// classify | probe | text
        #[arg(long)]
        task: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses argv and runs; the process exit code. Usage errors exit 2 via
/// clap's default behavior.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { config, out, ckpt, seed } => cmd_pretrain(&config, &out, ckpt.as_deref(), seed),
        Command::Finetune { config, ckpt, out, seed } => cmd_finetune(&config, &ckpt, &out, seed),
        Command::MixWeights { a, b, beta, out } => cmd_mix(&a, &b, beta, &out),
        Command::Tile { input, base_res, out } => cmd_tile(&input, base_res, &out),
        Command::Infer { config, ckpt, image, prompt, max_new } => {
            cmd_infer(&config, &ckpt, image.as_deref(), &prompt, max_new)
        }
        Command::Eval { config, ckpt, data, metric, out, max_new } => {
            cmd_eval(&config, &ckpt, &data, &metric, out.as_deref(), max_new)
        }
        Command::GenData { task, count, seed, res, grid, out } => {
            cmd_gen_data(&task, count, config::resolve_seed(seed), res, grid, &out)
        }
    }
}

fn load_model(config_path: &Path, ckpt_path: Option<&Path>, seed: Option<u64>) -> Result<(Model, KvConfig)> {
    let kv = KvConfig::load(config_path)?;
    let pipeline = config::pipeline_from(&kv, config::resolve_seed(seed))?;
    let model = match ckpt_path {
        Some(path) => Model::from_checkpoint(pipeline, &checkpoint::load(path)?)?,
        None => Model::init(pipeline)?,
    };
    Ok((model, kv))
}

fn pretrain_data_from(kv: &KvConfig, seed: u64) -> Result<PretrainData> {
    let captions = match kv.get("caption_manifest") {
        Some(path) => manifest::read_dataset(Path::new(path))?
            .into_iter()
            .map(|convo| {
                let caption = convo
                    .reference_answer()
                    .ok_or_else(|| Error::InvalidInput("caption sample without answer".into()))?
                    .to_string();
                let image = convo
                    .image
                    .ok_or_else(|| Error::InvalidInput("caption sample without image".into()))?;
                Ok((image, caption))
            })
            .collect::<Result<Vec<_>>>()?,
        None => {
            let style = match kv.get("caption_style").unwrap_or("plain") {
                "plain" => CaptionStyle::Plain,
                "synthetic" => CaptionStyle::Synthetic,
                other => return Err(Error::InvalidConfig(format!("unknown caption style {other}"))),
            };
            synth::gen_caption_pairs(
                kv.get_or("caption_seed", seed)?,
                kv.get_or("captions", 256)?,
                kv.get_or("caption_res", 32)?,
                style,
            )?
        }
    };
    let corpus = TextCorpus::generate(
        kv.get_or("text_seed", seed.wrapping_add(1))?,
        kv.get_or("text_sentences", 400)?,
        kv.get_or("held_out_fraction", 0.1)?,
    )?;
    Ok(PretrainData { captions, corpus })
}

fn cmd_pretrain(config: &Path, out: &Path, ckpt: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let (mut model, kv) = load_model(config, ckpt, seed)?;
    let stage = config::stage_from(&kv, Stage::Pretrain, config::resolve_seed(seed))?;
    let steps = stage.schedule.total_steps;
    let data = pretrain_data_from(&kv, stage.seed)?;
    let tag = match kv.get("stage_tag") {
        Some("pretrain_syn") => StageTag::PretrainSyn,
        _ => StageTag::PretrainReal,
    };
    let (ckpt_out, trace) =
        trainer::train_stage(&mut model, &stage, &StageData::Pretrain(data), steps, tag)?;
    std::fs::create_dir_all(out)?;
    checkpoint::save(&ckpt_out, &out.join("checkpoint.mxck"))?;
    std::fs::write(out.join("trace.csv"), trace.to_csv())?;
    println!(
        "pretrained {steps} steps; final loss {:.4}; wrote {}",
        trace.rows.last().map(|r| r.total_loss).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn finetune_data_from(kv: &KvConfig) -> Result<FinetuneData> {
    let paths = kv
        .list("data")
        .ok_or_else(|| Error::InvalidConfig("missing config key data".into()))?;
    let mut datasets = Vec::new();
    for path in paths {
        let samples = manifest::read_dataset(Path::new(&path))?;
        let name = Path::new(&path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.clone());
        let task_tag = samples.first().map(|s| s.task_tag).unwrap_or(TaskTag::Vqa);
        datasets.push((
            DatasetSpec { name, size: samples.len(), seed: 0, task_tag },
            samples,
        ));
    }
    Ok(FinetuneData { datasets })
}

fn cmd_finetune(config: &Path, ckpt: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let (mut model, kv) = load_model(config, Some(ckpt), seed)?;
    let stage = config::stage_from(&kv, Stage::Finetune, config::resolve_seed(seed))?;
    let steps = stage.schedule.total_steps;
    let data = finetune_data_from(&kv)?;
    let (ckpt_out, trace) = trainer::train_stage(
        &mut model,
        &stage,
        &StageData::Finetune(data),
        steps,
        StageTag::Finetuned,
    )?;
    std::fs::create_dir_all(out)?;
    checkpoint::save(&ckpt_out, &out.join("checkpoint.mxck"))?;
    std::fs::write(out.join("trace.csv"), trace.to_csv())?;
    println!(
        "finetuned {steps} steps; final loss {:.4}; wrote {}",
        trace.rows.last().map(|r| r.total_loss).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_mix(a: &Path, b: &Path, beta: f64, out: &Path) -> Result<()> {
    let mixed = checkpoint::mix_weights(&checkpoint::load(a)?, &checkpoint::load(b)?, beta)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    checkpoint::save(&mixed, out)?;
    println!("mixed {} and {} at beta {beta} -> {}", a.display(), b.display(), out.display());
    Ok(())
}

fn cmd_tile(input: &Path, base_res: usize, out: &Path) -> Result<()> {
    let img = read_p6(input)?;
    if !img.is_square() {
        return Err(Error::InvalidInput(format!(
            "tile expects a square image, got {}x{}; pad first",
            img.width, img.height
        )));
    }
    let plan = tiler::make_plan(img.height, base_res)?;
    let views = tiler::apply_plan(&img, &plan)?;
    std::fs::create_dir_all(out)?;
    let mut lines = Vec::new();
    for (i, (view, spec)) in views.iter().zip(&plan.views).enumerate() {
        let file = format!("view_{i:02}.ppm");
        write_p6(view, &out.join(&file))?;
        let r = spec.source_rect;
        lines.push(format!("{} {} {} {} {} {i} {file}", spec.kind.as_str(), r.x, r.y, r.w, r.h));
    }
    std::fs::write(out.join("plan.txt"), lines.join("\n") + "\n")?;
    println!("wrote {} views + plan.txt to {}", views.len(), out.display());
    Ok(())
}

fn cmd_infer(
    config: &Path,
    ckpt: &Path,
    image: Option<&Path>,
    prompt: &str,
    max_new: usize,
) -> Result<()> {
    let (model, _) = load_model(config, Some(ckpt), None)?;
    let img = image.map(read_p6).transpose()?;
    let convo = ConversationSample::exchange(prompt, "-", img, TaskTag::Vqa)?;
    let answer = eval::answer_for(&model, &convo, max_new)?;
    println!("{answer}");
    Ok(())
}

fn cmd_eval(
    config: &Path,
    ckpt: &Path,
    data: &Path,
    metric: &str,
    out: Option<&Path>,
    max_new: usize,
) -> Result<()> {
    let (model, _) = load_model(config, Some(ckpt), None)?;
    let digest = model.cfg.digest();
    let mut report = EvalReport::default();

    match metric {
        "rec" => {
            let samples = manifest::read_dataset(data)?;
            let gt = samples
                .iter()
                .map(|s| {
                    parse_bbox(s.reference_answer().unwrap_or_default())
                        .map_err(|_| Error::InvalidInput("rec sample answer is not a bbox".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let answers = collect_answers(&model, &samples, max_new)?;
            let score = eval::rec_accuracy(&answers, &gt)?;
            report.insert("rec_acc_0.5", score.accuracy, score.n, &digest);
            report.insert("rec_parse_failure_rate", score.parse_failure_rate, score.n, &digest);
        }
        "vqa" | "probe" => {
            let samples = manifest::read_dataset(data)?;
            let gt: Vec<String> = samples
                .iter()
                .map(|s| s.reference_answer().unwrap_or_default().to_string())
                .collect();
            let answers = collect_answers(&model, &samples, max_new)?;
            let acc = eval::vqa_exact_match(&answers, &gt)?;
            let name = if metric == "probe" { "probe_cell_acc" } else { "vqa_exact_match" };
            report.insert(name, acc, gt.len(), &digest);
        }
        "ppl" => {
            let text = std::fs::read_to_string(data)?;
            let bytes: Vec<usize> = text.bytes().map(|b| b as usize).collect();
            let ppl = eval::text_perplexity(&model, &bytes, 128)?;
            report.insert("text_perplexity", ppl, bytes.len(), &digest);
        }
        other => return Err(Error::InvalidConfig(format!("unknown metric {other}"))),
    }

    let csv = report.to_csv();
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, csv)?;
    }
    Ok(())
}

fn collect_answers(model: &Model, samples: &[ConversationSample], max_new: usize) -> Result<Vec<String>> {
    samples.iter().map(|s| eval::answer_for(model, s, max_new)).collect()
}

fn cmd_gen_data(task: &str, count: usize, seed: u64, res: usize, grid: usize, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    match task {
        "text" => {
            let corpus = TextCorpus::generate(seed, count, 0.1)?;
            std::fs::write(out.join("train.txt"), corpus.train.join("\n") + "\n")?;
            std::fs::write(out.join("held_out.txt"), corpus.held_out.join("\n") + "\n")?;
            println!(
                "wrote {} train + {} held-out sentences to {}",
                corpus.train.len(),
                corpus.held_out.len(),
                out.display()
            );
        }
        "probe" => {
            let samples: Vec<ConversationSample> = (0..count)
                .map(|i| synth::gen_probe(seed, i, res, grid).map(|s| s.convo))
                .collect::<Result<_>>()?;
            let path = manifest::write_dataset(out, "probe", &samples)?;
            println!("wrote {count} probe samples to {}", path.display());
        }
        name => {
            let tag = TaskTag::parse(name)?;
            if tag == TaskTag::TextOnly {
                return Err(Error::InvalidConfig("use --task text for the corpus".into()));
            }
            let samples: Vec<ConversationSample> = synth::gen_synthetic(tag, seed, count, res)?
                .into_iter()
                .map(|s| s.convo)
                .collect();
            let path = manifest::write_dataset(out, name, &samples)?;
            println!("wrote {count} {name} samples to {}", path.display());
        }
    }
    Ok(())
}
