//! Scratch harness for sizing the three training experiments.

use mixpipe::checkpoint::StageTag;
use mixpipe::data::synth::{gen_caption_pairs, CaptionStyle, TextCorpus};
use mixpipe::data::templates::TaskTag;
use mixpipe::data::{gen_probe, gen_synthetic, DatasetSpec};
use mixpipe::eval::{answer_for, text_loss, vqa_exact_match};
use mixpipe::model::{Model, PipelineConfig};
use mixpipe::numerics::{AdamwHyper, ScheduleConfig, ScheduleShape};
use mixpipe::trainer::*;
use std::time::Instant;

fn finetune_cfg(seed: u64, steps: usize, peak: f64, samples: usize) -> StageConfig {
    StageConfig {
        stage: Stage::Finetune,
        trainable: vec!["lm.".into(), "mix.".into()],
        schedule: ScheduleConfig {
            peak_lr: peak,
            final_lr: 0.0,
            warmup_steps: warmup_for_fraction(0.03, steps),
            total_steps: steps,
            shape: ScheduleShape::LinearWarmupCosine,
        },
        batch: BatchSpec::Finetune { samples },
        hyper: AdamwHyper { weight_decay: 0.01, ..AdamwHyper::default() },
        seed,
    }
}

fn overfit() {
    println!("== overfit ==");
    let t0 = Instant::now();
    let mut model = Model::init(PipelineConfig::toy(100)).unwrap();
    // 32 mixed-task samples
    let mut samples = Vec::new();
    for (tag, n) in [(TaskTag::Vqa, 11), (TaskTag::Rec, 11), (TaskTag::Classify, 10)] {
        samples.extend(gen_synthetic(tag, 100, n, 32).unwrap());
    }
    let convos: Vec<_> = samples.iter().map(|s| s.convo.clone()).collect();
    let fd = FinetuneData {
        datasets: vec![(
            DatasetSpec { name: "mix".into(), size: 32, seed: 1, task_tag: TaskTag::Vqa },
            convos.clone(),
        )],
    };
    let steps = 500;
    let cfg = finetune_cfg(100, steps, 1e-3, 8);
    let (_, trace) = train_stage(&mut model, &cfg, &StageData::Finetune(fd), steps, StageTag::Finetuned).unwrap();
    let final_loss = trace.rows.last().unwrap().total_loss;
    let min_loss = trace.rows.iter().map(|r| r.total_loss).fold(f64::INFINITY, f64::min);
    println!("final loss {final_loss:.4}, min {min_loss:.4} ({:.0?})", t0.elapsed());

    let mut exact = 0;
    for s in &samples {
        let answer = answer_for(&model, &s.convo, 128).unwrap();
        if answer == s.convo.reference_answer().unwrap() {
            exact += 1;
        }
    }
    println!("exact {exact}/32 ({:.0?})", t0.elapsed());
}

fn forgetting() {
    println!("== forgetting ==");
    let t0 = Instant::now();
    let corpus = TextCorpus::generate(200, 400, 0.1).unwrap();
    let captions = gen_caption_pairs(200, 256, 32, CaptionStyle::Plain).unwrap();
    let held = corpus.held_out_bytes();
    let steps = 1200;

    let run = |text_tokens: usize| {
        let mut model = Model::init(PipelineConfig::toy(200)).unwrap();
        let init_loss = text_loss(&model, &held, 128).unwrap();
        let mut cfg = StageConfig::toy_pretrain(200, steps);
        cfg.batch = BatchSpec::Pretrain { caption_items: 4, text_tokens };
        let data = StageData::Pretrain(PretrainData { captions: captions.clone(), corpus: corpus.clone() });
        let (_, trace) = train_stage(&mut model, &cfg, &data, steps, StageTag::PretrainReal).unwrap();
        let final_text = text_loss(&model, &held, 128).unwrap();
        let cap0 = trace.rows.first().unwrap().caption_loss.unwrap();
        let capn = trace.rows.last().unwrap().caption_loss.unwrap();
        (init_loss, final_text, cap0, capn)
    };

    let (init_j, text_j, cap0_j, capn_j) = run(128);
    println!(
        "joint: held-out {init_j:.3} -> {text_j:.3}; caption {cap0_j:.3} -> {capn_j:.3} ({:.0?})",
        t0.elapsed()
    );
    let (init_c, text_c, cap0_c, capn_c) = run(0);
    println!(
        "caption-only: held-out {init_c:.3} -> {text_c:.3}; caption {cap0_c:.3} -> {capn_c:.3} ({:.0?})",
        t0.elapsed()
    );
    println!(
        "checks: joint<captonly {} | captonly grows {} | caption halved {} {}",
        text_j < text_c,
        text_c > init_c,
        capn_j < 0.5 * cap0_j,
        capn_c < 0.5 * cap0_c
    );
}

fn hires() {
    println!("== hires probe ==");
    let t0 = Instant::now();
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let tiled_only = args.get(4).map(|s| s == "tiled").unwrap_or(false);
    let train_n = 512;
    let eval_n = 500;
    println!("steps {steps}, lr {lr}");

    let train_probes: Vec<_> = (0..train_n).map(|i| gen_probe(300, i, 64, 8).unwrap().convo).collect();
    let eval_probes: Vec<_> = (0..eval_n).map(|i| gen_probe(301, i, 64, 8).unwrap()).collect();

    // one shared caption pretrain (global view only) bootstraps the
    // visual-readout circuits for both arms
    let pretrain_steps = 800;
    let mut base = Model::init(PipelineConfig::toy_hires(300)).unwrap();
    let pcfg = StageConfig::toy_pretrain(300, pretrain_steps);
    let pdata = StageData::Pretrain(PretrainData {
        captions: gen_caption_pairs(300, 256, 32, CaptionStyle::Plain).unwrap(),
        corpus: TextCorpus::generate(300, 400, 0.1).unwrap(),
    });
    let (pretrained, _) =
        train_stage(&mut base, &pcfg, &pdata, pretrain_steps, StageTag::PretrainReal).unwrap();
    println!("pretrained {pretrain_steps} steps ({:.0?})", t0.elapsed());

    let run = |global_only: bool| {
        let mut cfg = PipelineConfig::toy_hires(300);
        cfg.global_only = global_only;
        let mut model = Model::init(cfg).unwrap();
        model.params = pretrained.entries.clone();
        let fd = FinetuneData {
            datasets: vec![(
                DatasetSpec { name: "probe".into(), size: train_n, seed: 2, task_tag: TaskTag::Vqa },
                train_probes.clone(),
            )],
        };
        let cfg = finetune_cfg(300, steps, lr, 8);
        let (_, trace) =
            train_stage(&mut model, &cfg, &StageData::Finetune(fd), steps, StageTag::Finetuned).unwrap();
        for row in trace.rows.iter().step_by(100) {
            eprint!("[{} {:.3}] ", row.step, row.total_loss);
        }
        eprintln!();
        let answers: Vec<String> = eval_probes
            .iter()
            .map(|s| answer_for(&model, &s.convo, 8).unwrap())
            .collect();
        let gt: Vec<String> = eval_probes
            .iter()
            .map(|s| s.convo.reference_answer().unwrap().to_string())
            .collect();
        let acc = vqa_exact_match(&answers, &gt).unwrap();
        (acc, trace.rows.last().unwrap().total_loss)
    };

    let (acc_tiled, loss_tiled) = run(false);
    println!("tiled: acc {acc_tiled:.3}, final loss {loss_tiled:.3} ({:.0?})", t0.elapsed());
    if !tiled_only {
        let (acc_global, loss_global) = run(true);
        println!("global-only: acc {acc_global:.3}, final loss {loss_global:.3} ({:.0?})", t0.elapsed());
        println!("gap: {:.1} points", (acc_tiled - acc_global) * 100.0);
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    if which == "overfit" || which == "all" {
        overfit();
    }
    if which == "forgetting" || which == "all" {
        forgetting();
    }
    if which == "hires" || which == "all" {
        hires();
    }
}
