//! Metrics: IoU, referring-expression accuracy at IoU >= 0.5, exact-match
//! VQA scoring, and text perplexity. Metrics are pure functions of model
//! outputs and ground truth; generation happens separately.

use crate::data::convo::{detokenize, tokenize_prompt, ConversationSample};
use crate::data::coords::{find_bbox, BBox};
use crate::error::{Error, Result};
use crate::model::Model;
use std::collections::BTreeMap;

/// Intersection over union of two normalized boxes; 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let x1 = a.x1.max(b.x1);
    let y1 = a.y1.max(b.y1);
    let x2 = a.x2.min(b.x2);
    let y2 = a.y2.min(b.y2);
    if x2 <= x1 || y2 <= y1 {
        return 0.0;
    }
    let inter = (x2 - x1) * (y2 - y1);
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecScore {
    pub accuracy: f64,
    /// Outputs with no parseable box; scored 0 but reported separately so
    /// grounding failures and format failures stay distinguishable.
    pub parse_failure_rate: f64,
    pub n: usize,
}

/// Scores free-form answers against ground-truth boxes: the first
/// serialized box in each answer wins if its IoU reaches 0.5.
pub fn rec_accuracy(answers: &[String], gt: &[BBox]) -> Result<RecScore> {
    if answers.len() != gt.len() || answers.is_empty() {
        return Err(Error::InvalidInput(format!(
            "rec_accuracy needs matched non-empty lists, got {} vs {}",
            answers.len(),
            gt.len()
        )));
    }
    let mut hits = 0usize;
    let mut parse_failures = 0usize;
    for (answer, truth) in answers.iter().zip(gt) {
        match find_bbox(answer) {
            Some(parsed) => {
                if iou(&parsed, truth) >= 0.5 {
                    hits += 1;
                }
            }
            None => parse_failures += 1,
        }
    }
    Ok(RecScore {
        accuracy: hits as f64 / answers.len() as f64,
        parse_failure_rate: parse_failures as f64 / answers.len() as f64,
        n: answers.len(),
    })
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Case-normalized exact string match rate.
pub fn vqa_exact_match(answers: &[String], gt: &[String]) -> Result<f64> {
    if answers.len() != gt.len() || answers.is_empty() {
        return Err(Error::InvalidInput(format!(
            "vqa_exact_match needs matched non-empty lists, got {} vs {}",
            answers.len(),
            gt.len()
        )));
    }
    let hits = answers
        .iter()
        .zip(gt)
        .filter(|(a, b)| normalize(a) == normalize(b))
        .count();
    Ok(hits as f64 / answers.len() as f64)
}

/// Mean next-token cross entropy of a byte stream under the model,
/// evaluated in chunks of `chunk_len` predicted tokens.
pub fn text_loss(model: &Model, bytes: &[usize], chunk_len: usize) -> Result<f64> {
    if bytes.is_empty() || chunk_len == 0 {
        return Err(Error::InvalidInput("text_loss needs tokens and a chunk size".into()));
    }
    let mut weighted = 0.0;
    let mut count = 0usize;
    for chunk in bytes.chunks(chunk_len) {
        let mut ids = vec![model.cfg.lm.bos_token];
        ids.extend_from_slice(chunk);
        let mut mask = vec![true; ids.len()];
        mask[0] = false;
        let sample = crate::model::EncodedSample::text_only(ids, mask);
        let loss = model.eval_loss(&sample)?;
        weighted += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(weighted / count as f64)
}

/// exp(mean next-token cross entropy); >= 1 by construction.
pub fn text_perplexity(model: &Model, bytes: &[usize], chunk_len: usize) -> Result<f64> {
    Ok(text_loss(model, bytes, chunk_len)?.exp())
}

/// Greedy model answer for a conversation's last user turn.
pub fn answer_for(model: &Model, convo: &ConversationSample, max_new: usize) -> Result<String> {
    let prompt = tokenize_prompt(convo, &model.cfg.lm)?;
    let views = match &convo.image {
        Some(img) => model.prepare_views(img)?,
        None => Vec::new(),
    };
    let ids = model.generate(&views, &prompt, max_new)?;
    Ok(detokenize(&ids))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub value: f64,
    pub n: usize,
    pub config_digest: String,
}

/// Named metric values for one evaluation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub entries: BTreeMap<String, MetricEntry>,
}

impl EvalReport {
    pub fn insert(&mut self, name: &str, value: f64, n: usize, config_digest: &str) {
        self.entries.insert(
            name.to_string(),
            MetricEntry { value, n, config_digest: config_digest.to_string() },
        );
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,n,config_digest\n");
        for (name, e) in &self.entries {
            out.push_str(&format!("{name},{:.6},{},{}\n", e.value, e.n, e.config_digest));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::coords::serialize_bbox;
    use crate::data::synth::{gen_synthetic, Annotation, TextCorpus};
    use crate::data::templates::TaskTag;
    use crate::model::PipelineConfig;
    use rand::Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(0.2, 0.2, 0.6, 0.6);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bx(0.7, 0.7, 0.9, 0.9);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_direct_area_arithmetic() {
        // overlap 0.1x0.2 = 0.02, union 0.04 + 0.04 - 0.02 = 0.06
        let a = bx(0.0, 0.0, 0.2, 0.2);
        let b = bx(0.1, 0.0, 0.3, 0.2);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric() {
        let mut rng = crate::rng::stream(3, "iou-sym");
        for _ in 0..200 {
            let rand_box = |rng: &mut rand_chacha::ChaCha8Rng| {
                let x1: f64 = rng.gen_range(0.0..0.8);
                let y1: f64 = rng.gen_range(0.0..0.8);
                bx(x1, y1, x1 + rng.gen_range(0.05..0.2), y1 + rng.gen_range(0.05..0.2))
            };
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            assert_eq!(iou(&a, &b).to_bits(), iou(&b, &a).to_bits());
        }
    }

    #[test]
    fn rec_scoring_perfect_and_disjoint_and_unparseable() {
        let gt = vec![bx(0.1, 0.1, 0.4, 0.4), bx(0.5, 0.5, 0.9, 0.9)];
        let perfect: Vec<String> = gt.iter().map(serialize_bbox).collect();
        let s = rec_accuracy(&perfect, &gt).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.parse_failure_rate, 0.0);

        let disjoint = vec![
            serialize_bbox(&bx(0.6, 0.6, 0.8, 0.8)),
            serialize_bbox(&bx(0.0, 0.0, 0.2, 0.2)),
        ];
        assert_eq!(rec_accuracy(&disjoint, &gt).unwrap().accuracy, 0.0);

        let garbled = vec!["no box at all".to_string(), serialize_bbox(&gt[1])];
        let s = rec_accuracy(&garbled, &gt).unwrap();
        assert_eq!(s.accuracy, 0.5);
        assert_eq!(s.parse_failure_rate, 0.5);
    }

    #[test]
    fn random_box_baseline_matches_monte_carlo_oracle() {
        // ground truth from the synthetic referring set
        let gt: Vec<BBox> = gen_synthetic(TaskTag::Rec, 17, 400, 32)
            .unwrap()
            .iter()
            .map(|s| match &s.annotation {
                Annotation::Rec { scene, target } => scene.shapes[*target].bbox,
                _ => unreachable!(),
            })
            .collect();
        let rand_box = |rng: &mut rand_chacha::ChaCha8Rng| {
            let side: f64 = rng.gen_range(0.1..0.3);
            let x1: f64 = rng.gen_range(0.0..1.0 - side);
            let y1: f64 = rng.gen_range(0.0..1.0 - side);
            bx(x1, y1, x1 + side, y1 + side)
        };

        // baseline: one random box per sample, scored through the metric
        let mut rng = crate::rng::stream(5, "baseline");
        let answers: Vec<String> = gt.iter().map(|_| serialize_bbox(&rand_box(&mut rng))).collect();
        let score = rec_accuracy(&answers, &gt).unwrap();

        // oracle: brute-force estimate of P(IoU >= 0.5) under the same box
        // distribution, independent seed
        let mut mc_rng = crate::rng::stream(6, "oracle");
        let per_gt = 400usize;
        let mut hits = 0usize;
        for truth in &gt {
            for _ in 0..per_gt {
                if iou(&rand_box(&mut mc_rng), truth) >= 0.5 {
                    hits += 1;
                }
            }
        }
        let n_mc = gt.len() * per_gt;
        let p = hits as f64 / n_mc as f64;
        let sigma = (p * (1.0 - p) * (1.0 / gt.len() as f64 + 1.0 / n_mc as f64)).sqrt();
        assert!(
            (score.accuracy - p).abs() <= 3.0 * sigma + 1e-9,
            "baseline {} vs oracle {} (3 sigma = {})",
            score.accuracy,
            p,
            3.0 * sigma
        );
    }

    #[test]
    fn vqa_match_is_case_normalized() {
        let answers = vec!["Red".to_string(), " blue ".to_string(), "circle".to_string()];
        let gt = vec!["red".to_string(), "blue".to_string(), "square".to_string()];
        assert!((vqa_exact_match(&answers, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        // constant wrong answer scores zero
        let wrong = vec!["x".to_string(); 3];
        assert_eq!(vqa_exact_match(&wrong, &gt).unwrap(), 0.0);
    }

    #[test]
    fn majority_class_baseline_equals_class_prior() {
        let gt = vec!["red", "red", "red", "blue", "green"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        let majority = vec!["red".to_string(); 5];
        assert_eq!(vqa_exact_match(&majority, &gt).unwrap(), 0.6);
    }

    #[test]
    fn random_init_perplexity_is_near_vocab_size() {
        let model = Model::init(PipelineConfig::toy(41)).unwrap();
        let corpus = TextCorpus::generate(11, 30, 0.2).unwrap();
        let ppl = text_perplexity(&model, &corpus.held_out_bytes(), 64).unwrap();
        let vocab = model.cfg.lm.vocab_size as f64;
        assert!(
            (ppl - vocab).abs() / vocab < 0.10,
            "perplexity {ppl} should approximate vocab {vocab}"
        );
        assert!(ppl >= 1.0);
    }

    #[test]
    fn report_csv_shape() {
        let mut report = EvalReport::default();
        report.insert("rec_acc_0.5", 0.75, 200, "abc123");
        report.insert("parse_failure_rate", 0.01, 200, "abc123");
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "metric,value,n,config_digest");
        assert!(csv.contains("rec_acc_0.5,0.750000,200,abc123"));
    }
}
