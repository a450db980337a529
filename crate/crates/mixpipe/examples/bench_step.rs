//! Rough step-time measurement for sizing experiment budgets.

use mixpipe::checkpoint::StageTag;
use mixpipe::data::synth::{gen_caption_pairs, CaptionStyle, TextCorpus};
use mixpipe::data::templates::TaskTag;
use mixpipe::data::DatasetSpec;
use mixpipe::model::{Model, PipelineConfig};
use mixpipe::trainer::{train_stage, FinetuneData, StageConfig, StageData, PretrainData};
use std::time::Instant;

fn main() {
    let mut model = Model::init(PipelineConfig::toy(1)).unwrap();
    let data = StageData::Pretrain(PretrainData {
        captions: gen_caption_pairs(1, 64, 32, CaptionStyle::Plain).unwrap(),
        corpus: TextCorpus::generate(1, 200, 0.1).unwrap(),
    });
    let steps = 20;
    let cfg = StageConfig::toy_pretrain(1, 2000);
    let t0 = Instant::now();
    train_stage(&mut model, &cfg, &data, steps, StageTag::PretrainReal).unwrap();
    let dt = t0.elapsed();
    println!("pretrain: {:.1} ms/step", dt.as_secs_f64() * 1000.0 / steps as f64);

    let mut hires = Model::init(PipelineConfig::toy_hires(2)).unwrap();
    let probes: Vec<_> = (0..64)
        .map(|i| mixpipe::data::gen_probe(3, i, 64, 8).unwrap().convo)
        .collect();
    let fd = FinetuneData {
        datasets: vec![(
            DatasetSpec { name: "probe".into(), size: 64, seed: 3, task_tag: TaskTag::Vqa },
            probes,
        )],
    };
    let cfg = StageConfig::toy_finetune(2, 600);
    let t0 = Instant::now();
    train_stage(&mut hires, &cfg, &StageData::Finetune(fd), steps, StageTag::Finetuned).unwrap();
    let dt = t0.elapsed();
    println!("hires finetune (batch 8, 5 views): {:.1} ms/step", dt.as_secs_f64() * 1000.0 / steps as f64);
}
