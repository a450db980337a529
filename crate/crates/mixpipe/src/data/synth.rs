//! Closed-world synthetic datasets: colored geometric shapes on a cell
//! grid, stick figures with exact keypoints, planted-marker probes, and a
//! small templated text corpus. Every assistant answer is re-renderable
//! from the stored annotation, so ground truth is exact by construction.
//!
//! Generators are pure functions of (seed, index).

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::coords::{serialize_bbox, serialize_keypoints, BBox, Keypoints};
use super::convo::ConversationSample;
use super::templates::{self, instruction_for, Slots, TaskTag};

pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
];

pub const SHAPE_KINDS: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedShape {
    pub kind: &'static str,
    pub color: &'static str,
    pub rgb: [f64; 3],
    /// Pixel rect (x, y, w, h) the shape was drawn into.
    pub rect: (usize, usize, usize, usize),
    pub bbox: BBox,
}

impl PlacedShape {
    pub fn name(&self) -> String {
        format!("{} {}", self.color, self.kind)
    }
}

/// Shapes placed on distinct cells of a square grid; colors and kinds are
/// all distinct within one scene, so every shape is uniquely referable.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub res: usize,
    pub grid: usize,
    pub shapes: Vec<PlacedShape>,
}

impl Scene {
    pub fn generate(rng: &mut ChaCha8Rng, res: usize, grid: usize, n_shapes: usize) -> Result<Self> {
        if n_shapes == 0 || n_shapes > SHAPE_KINDS.len() || n_shapes > COLORS.len() {
            return Err(Error::InvalidConfig(format!("cannot place {n_shapes} distinct shapes")));
        }
        if grid == 0 || res % grid != 0 || res / grid < 4 {
            return Err(Error::InvalidConfig(format!("grid {grid} unusable at {res} px")));
        }
        let cell = res / grid;
        let mut cells: Vec<(usize, usize)> = (0..grid)
            .flat_map(|r| (0..grid).map(move |c| (r, c)))
            .collect();
        cells.shuffle(rng);
        let mut chosen: Vec<(usize, usize)> = cells[..n_shapes].to_vec();
        chosen.sort(); // deterministic row-major listing order

        let mut kinds = SHAPE_KINDS.to_vec();
        kinds.shuffle(rng);
        let mut colors = COLORS.to_vec();
        colors.shuffle(rng);

        let shapes = chosen
            .iter()
            .enumerate()
            .map(|(i, &(row, col))| {
                let (x, y) = (col * cell + 1, row * cell + 1);
                let side = cell - 2;
                let bbox = BBox::new(
                    x as f64 / res as f64,
                    y as f64 / res as f64,
                    (x + side) as f64 / res as f64,
                    (y + side) as f64 / res as f64,
                )?;
                Ok(PlacedShape {
                    kind: kinds[i],
                    color: colors[i].0,
                    rgb: colors[i].1,
                    rect: (x, y, side, side),
                    bbox,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { res, grid, shapes })
    }

    pub fn render(&self) -> Result<ImageTensor> {
        let mut img = ImageTensor::filled(self.res, self.res, 0.0)?;
        for shape in &self.shapes {
            draw_shape(&mut img, shape);
        }
        Ok(img)
    }

    fn unique_kind(&self, kind: &str) -> bool {
        self.shapes.iter().filter(|s| s.kind == kind).count() == 1
    }
}

fn draw_shape(img: &mut ImageTensor, shape: &PlacedShape) {
    let (x0, y0, w, h) = shape.rect;
    match shape.kind {
        "square" => {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    img.set_pixel(y, x, shape.rgb);
                }
            }
        }
        "circle" => {
            let cx = x0 as f64 + w as f64 / 2.0;
            let cy = y0 as f64 + h as f64 / 2.0;
            let r = w as f64 / 2.0;
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= r * r {
                        img.set_pixel(y, x, shape.rgb);
                    }
                }
            }
        }
        "triangle" => {
            // apex-up isoceles filling the rect
            for row in 0..h {
                let half = (row as f64 + 1.0) / h as f64 * (w as f64 / 2.0);
                let cx = x0 as f64 + w as f64 / 2.0;
                let (lo, hi) = ((cx - half).floor() as usize, (cx + half).ceil() as usize);
                for x in lo.max(x0)..hi.min(x0 + w) {
                    img.set_pixel(y0 + row, x, shape.rgb);
                }
            }
        }
        other => unreachable!("unknown shape kind {other}"),
    }
}

fn and_join(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        _ => format!("{} and {}", items[..items.len() - 1].join(", "), items.last().unwrap()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionStyle {
    /// Lowercase noun phrases, the "web caption" register.
    Plain,
    /// Marked synthetic register with a fixed prefix.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VqaQuestion {
    ShapeCount,
    ColorOfKind(&'static str),
    KindOfColor(&'static str),
}

impl VqaQuestion {
    pub fn text(&self) -> String {
        match self {
            VqaQuestion::ShapeCount => "how many shapes are in the image?".into(),
            VqaQuestion::ColorOfKind(kind) => format!("what color is the {kind}?"),
            VqaQuestion::KindOfColor(color) => format!("what shape is the {color} object?"),
        }
    }
}

/// Exact ground truth stored beside each conversation.
#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    Caption { scene: Scene, style: CaptionStyle },
    Vqa { scene: Scene, question: VqaQuestion },
    Detection { scene: Scene },
    Rec { scene: Scene, target: usize },
    Reg { scene: Scene, target: usize },
    Pose { keypoints: Keypoints, bbox: BBox },
    GroundedCaption { scene: Scene },
    Classify { scene: Scene },
    Probe { cell: usize, grid: usize },
}

/// Renders the assistant answer from an annotation; generators and the
/// soundness tests share this single definition.
pub fn render_answer(annotation: &Annotation) -> String {
    match annotation {
        Annotation::Caption { scene, style } => {
            let items: Vec<String> = scene.shapes.iter().map(|s| format!("a {}", s.name())).collect();
            match style {
                CaptionStyle::Plain => and_join(&items),
                CaptionStyle::Synthetic => format!("a synthetic rendering of {}", items.join(", ")),
            }
        }
        Annotation::Vqa { scene, question } => match question {
            VqaQuestion::ShapeCount => scene.shapes.len().to_string(),
            VqaQuestion::ColorOfKind(kind) => scene
                .shapes
                .iter()
                .find(|s| s.kind == *kind)
                .map(|s| s.color.to_string())
                .unwrap_or_default(),
            VqaQuestion::KindOfColor(color) => scene
                .shapes
                .iter()
                .find(|s| s.color == *color)
                .map(|s| s.kind.to_string())
                .unwrap_or_default(),
        },
        Annotation::Detection { scene } => scene
            .shapes
            .iter()
            .map(|s| format!("{}: {}", s.name(), serialize_bbox(&s.bbox)))
            .collect::<Vec<_>>()
            .join("\n"),
        Annotation::Rec { scene, target } => serialize_bbox(&scene.shapes[*target].bbox),
        Annotation::Reg { scene, target } => format!("a {}", scene.shapes[*target].name()),
        Annotation::Pose { keypoints, .. } => serialize_keypoints(keypoints),
        Annotation::GroundedCaption { scene } => {
            let items: Vec<String> = scene
                .shapes
                .iter()
                .map(|s| format!("a {} {}", s.name(), serialize_bbox(&s.bbox)))
                .collect();
            and_join(&items)
        }
        Annotation::Classify { scene } => templates::classify_response(&scene.shapes[0].name()),
        Annotation::Probe { cell, .. } => cell.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub convo: ConversationSample,
    pub annotation: Annotation,
}

fn sample_rng(seed: u64, task: TaskTag, index: usize) -> ChaCha8Rng {
    crate::rng::step_stream(seed, task.as_str(), index)
}

fn scene_convo(
    user_text: String,
    annotation: Annotation,
    image: ImageTensor,
    tag: TaskTag,
) -> Result<SyntheticSample> {
    let answer = render_answer(&annotation);
    let convo = ConversationSample::exchange(&user_text, &answer, Some(image), tag)?;
    Ok(SyntheticSample { convo, annotation })
}

/// One synthetic sample for an image task. `res` is the rendered image
/// side; shapes sit on a 4x4 cell grid.
pub fn gen_sample(task: TaskTag, seed: u64, index: usize, res: usize) -> Result<SyntheticSample> {
    let mut rng = sample_rng(seed, task, index);
    let grid = 4;
    match task {
        TaskTag::Caption => {
            let n = rng.gen_range(1..=3);
            let scene = Scene::generate(&mut rng, res, grid, n)?;
            let annotation = Annotation::Caption { scene: scene.clone(), style: CaptionStyle::Plain };
            scene_convo(
                instruction_for(task, &Slots::default())?,
                annotation,
                scene.render()?,
                task,
            )
        }
        TaskTag::Vqa => {
            let n = rng.gen_range(1..=3);
            let scene = Scene::generate(&mut rng, res, grid, n)?;
            let pick = rng.gen_range(0..scene.shapes.len());
            let question = match rng.gen_range(0..3) {
                0 => VqaQuestion::ShapeCount,
                1 => VqaQuestion::ColorOfKind(scene.shapes[pick].kind),
                _ => VqaQuestion::KindOfColor(scene.shapes[pick].color),
            };
            debug_assert!(scene.unique_kind(scene.shapes[pick].kind));
            let user = format!("{}\n{}", question.text(), instruction_for(task, &Slots::default())?);
            let annotation = Annotation::Vqa { scene: scene.clone(), question };
            scene_convo(user, annotation, scene.render()?, task)
        }
        TaskTag::Detection => {
            let n = rng.gen_range(1..=3);
            let scene = Scene::generate(&mut rng, res, grid, n)?;
            scene_convo(
                instruction_for(task, &Slots::default())?,
                Annotation::Detection { scene: scene.clone() },
                scene.render()?,
                task,
            )
        }
        TaskTag::Rec => {
            let n = rng.gen_range(1..=3);
            let scene = Scene::generate(&mut rng, res, grid, n)?;
            let target = rng.gen_range(0..scene.shapes.len());
            let slots = Slots {
                description: Some(format!("the {}", scene.shapes[target].name())),
                ..Default::default()
            };
            scene_convo(
                instruction_for(task, &slots)?,
                Annotation::Rec { scene: scene.clone(), target },
                scene.render()?,
                task,
            )
        }
        TaskTag::Reg => {
            let n = rng.gen_range(1..=3);
            let scene = Scene::generate(&mut rng, res, grid, n)?;
            let target = rng.gen_range(0..scene.shapes.len());
            let slots = Slots {
                coordinate: Some(serialize_bbox(&scene.shapes[target].bbox)),
                ..Default::default()
            };
            scene_convo(
                instruction_for(task, &slots)?,
                Annotation::Reg { scene: scene.clone(), target },
                scene.render()?,
                task,
            )
        }
        TaskTag::Pose => {
            let (img, keypoints, bbox) = stick_figure(&mut rng, res)?;
            let slots = Slots { coordinate: Some(serialize_bbox(&bbox)), ..Default::default() };
            scene_convo(
                instruction_for(task, &slots)?,
                Annotation::Pose { keypoints, bbox },
                img,
                task,
            )
        }
        TaskTag::GroundedCaption => {
            let n = rng.gen_range(2..=3);
            let scene = Scene::generate(&mut rng, res, grid, n)?;
            scene_convo(
                instruction_for(task, &Slots::default())?,
                Annotation::GroundedCaption { scene: scene.clone() },
                scene.render()?,
                task,
            )
        }
        TaskTag::Classify => {
            let scene = Scene::generate(&mut rng, res, grid, 1)?;
            scene_convo(
                instruction_for(task, &Slots::default())?,
                Annotation::Classify { scene: scene.clone() },
                scene.render()?,
                task,
            )
        }
        TaskTag::TextOnly => Err(Error::InvalidInput("text corpus has its own generator".into())),
    }
}

/// Batch helper over `gen_sample`.
pub fn gen_synthetic(task: TaskTag, seed: u64, count: usize, res: usize) -> Result<Vec<SyntheticSample>> {
    (0..count).map(|i| gen_sample(task, seed, i, res)).collect()
}

/// Caption pairs for pretraining: (image, caption text) without templates.
pub fn gen_caption_pairs(
    seed: u64,
    count: usize,
    res: usize,
    style: CaptionStyle,
) -> Result<Vec<(ImageTensor, String)>> {
    (0..count)
        .map(|i| {
            let mut rng = crate::rng::step_stream(seed, "caption_pair", i);
            let n = rng.gen_range(1..=3);
            let scene = Scene::generate(&mut rng, res, 4, n)?;
            let annotation = Annotation::Caption { scene: scene.clone(), style };
            Ok((scene.render()?, render_answer(&annotation)))
        })
        .collect()
}

fn stick_figure(rng: &mut ChaCha8Rng, res: usize) -> Result<(ImageTensor, Keypoints, BBox)> {
    let fw = res / 2;
    let fh = res * 2 / 3;
    let x0 = rng.gen_range(1..res - fw - 1);
    let y0 = rng.gen_range(1..res - fh - 1);
    let n = |v: usize| v as f64 / res as f64;
    let cx = x0 + fw / 2;
    let keypoints = Keypoints {
        head: (n(cx), n(y0 + fh / 8)),
        l_hand: (n(x0), n(y0 + fh * 2 / 5)),
        r_hand: (n(x0 + fw), n(y0 + fh * 2 / 5)),
        l_foot: (n(x0 + fw / 4), n(y0 + fh)),
        r_foot: (n(x0 + 3 * fw / 4), n(y0 + fh)),
    };
    keypoints.validate()?;
    let bbox = BBox::new(n(x0), n(y0), n(x0 + fw), n(y0 + fh))?;

    let mut img = ImageTensor::filled(res, res, 0.0)?;
    let white = [1.0, 1.0, 1.0];
    let px = |frac: (f64, f64)| ((frac.0 * res as f64) as isize, (frac.1 * res as f64) as isize);
    let head = px(keypoints.head);
    let pelvis = (head.0, (y0 + fh * 7 / 10) as isize);
    let shoulder = (head.0, (y0 + fh / 4) as isize);
    draw_disc(&mut img, head, (fh / 8) as isize, white);
    draw_line(&mut img, shoulder, pelvis, white);
    draw_line(&mut img, shoulder, px(keypoints.l_hand), white);
    draw_line(&mut img, shoulder, px(keypoints.r_hand), white);
    draw_line(&mut img, pelvis, px(keypoints.l_foot), white);
    draw_line(&mut img, pelvis, px(keypoints.r_foot), white);
    Ok((img, keypoints, bbox))
}

fn draw_disc(img: &mut ImageTensor, center: (isize, isize), r: isize, rgb: [f64; 3]) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                let (x, y) = (center.0 + dx, center.1 + dy);
                if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
                    img.set_pixel(y as usize, x as usize, rgb);
                }
            }
        }
    }
}

fn draw_line(img: &mut ImageTensor, a: (isize, isize), b: (isize, isize), rgb: [f64; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for t in 0..=steps {
        let x = a.0 + (b.0 - a.0) * t / steps;
        let y = a.1 + (b.1 - a.1) * t / steps;
        if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
            img.set_pixel(y as usize, x as usize, rgb);
        }
    }
}

pub const PROBE_TEXTURE_LOW: f64 = 0.2;
pub const PROBE_TEXTURE_HIGH: f64 = 0.5;

fn probe_texel(y: usize, x: usize, flipped: bool) -> f64 {
    let high = ((x + y) % 2 == 0) != flipped;
    if high { PROBE_TEXTURE_HIGH } else { PROBE_TEXTURE_LOW }
}

/// Planted-marker probe on a one-pixel checkerboard. The marker swaps the
/// two bright and two dark texels of one even-aligned 2x2 block inside a
/// cell: a two-pixel phase defect. At full resolution the defect is crisp;
/// a 2x block-average downsample maps the whole image (defect included) to
/// one flat value, so the low-resolution global view carries no cell
/// information at all. The answer is the flat cell index.
pub fn gen_probe(seed: u64, index: usize, res: usize, grid: usize) -> Result<SyntheticSample> {
    if res % grid != 0 || res / grid < 6 || res / grid % 2 != 0 {
        return Err(Error::InvalidConfig(format!("probe grid {grid} unusable at {res} px")));
    }
    let mut rng = crate::rng::step_stream(seed, "probe", index);
    let cell_px = res / grid;
    let cell = rng.gen_range(0..grid * grid);
    let (row, col) = (cell / grid, cell % grid);
    let (mx, my) = (col * cell_px + 2, row * cell_px + 2);

    let mut img = ImageTensor::filled(res, res, 0.0)?;
    for y in 0..res {
        for x in 0..res {
            let inside = (my..my + 2).contains(&y) && (mx..mx + 2).contains(&x);
            let v = probe_texel(y, x, inside);
            img.set_pixel(y, x, [v, v, v]);
        }
    }
    let annotation = Annotation::Probe { cell, grid };
    let convo = ConversationSample::exchange(
        "which cell?",
        &render_answer(&annotation),
        Some(img),
        TaskTag::Vqa,
    )?;
    Ok(SyntheticSample { convo, annotation })
}

// ── text corpus ─────────────────────────────────────────────────────────

const NOUNS: [&str; 6] = ["wolves", "traders", "students", "pilots", "farmers", "singers"];
const VERBS: [&str; 6] = ["crossed", "visited", "measured", "painted", "repaired", "described"];
const ADJS: [&str; 6] = ["old", "narrow", "bright", "quiet", "stony", "distant"];
const PLACES: [&str; 6] = ["bridge", "harbor", "tower", "garden", "market", "valley"];

/// Templated sentences with capitals, digits, and punctuation; the byte
/// distribution deliberately differs from the caption register.
pub fn gen_sentence(rng: &mut ChaCha8Rng) -> String {
    format!(
        "The {} {} {} the {} {}.",
        rng.gen_range(2..9),
        NOUNS[rng.gen_range(0..NOUNS.len())],
        VERBS[rng.gen_range(0..VERBS.len())],
        ADJS[rng.gen_range(0..ADJS.len())],
        PLACES[rng.gen_range(0..PLACES.len())]
    )
}

/// Seeded text corpus with a fixed held-out split that is never trained on.
#[derive(Debug, Clone)]
pub struct TextCorpus {
    pub train: Vec<String>,
    pub held_out: Vec<String>,
    train_bytes: Vec<u8>,
}

impl TextCorpus {
    pub fn generate(seed: u64, sentences: usize, held_out_fraction: f64) -> Result<Self> {
        if sentences < 2 || !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::InvalidConfig("corpus needs >= 2 sentences and fraction in [0,1)".into()));
        }
        let mut rng = crate::rng::stream(seed, "text_corpus");
        let all: Vec<String> = (0..sentences).map(|_| gen_sentence(&mut rng)).collect();
        let mut indices: Vec<usize> = (0..sentences).collect();
        indices.shuffle(&mut rng);
        let held = ((sentences as f64 * held_out_fraction) as usize).max(1);
        let held_set: std::collections::BTreeSet<usize> = indices[..held].iter().copied().collect();

        let (mut train, mut held_out) = (Vec::new(), Vec::new());
        for (i, s) in all.into_iter().enumerate() {
            if held_set.contains(&i) {
                held_out.push(s);
            } else {
                train.push(s);
            }
        }
        let train_bytes = train.join(" ").into_bytes();
        Ok(Self { train, held_out, train_bytes })
    }

    /// Deterministic cyclic chunk of the training byte stream for one step.
    pub fn train_chunk(&self, step: usize, len: usize) -> Vec<usize> {
        let total = self.train_bytes.len();
        (0..len)
            .map(|i| self.train_bytes[(step * len + i) % total] as usize)
            .collect()
    }

    pub fn held_out_bytes(&self) -> Vec<usize> {
        self.held_out.join(" ").bytes().map(|b| b as usize).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_sample_lists_one_line_per_shape() {
        for i in 0..10 {
            let s = gen_sample(TaskTag::Detection, 7, i, 32).unwrap();
            let Annotation::Detection { scene } = &s.annotation else { panic!() };
            let answer = s.convo.reference_answer().unwrap();
            assert_eq!(answer.lines().count(), scene.shapes.len());
            for (line, shape) in answer.lines().zip(&scene.shapes) {
                assert!(line.starts_with(&shape.name()));
                assert!(line.contains('['));
            }
        }
    }

    #[test]
    fn rec_answer_equals_generator_placement() {
        let s = gen_sample(TaskTag::Rec, 9, 3, 32).unwrap();
        let Annotation::Rec { scene, target } = &s.annotation else { panic!() };
        assert_eq!(
            s.convo.reference_answer().unwrap(),
            serialize_bbox(&scene.shapes[*target].bbox)
        );
        // the referent is unique by construction
        let name = scene.shapes[*target].name();
        assert_eq!(scene.shapes.iter().filter(|sh| sh.name() == name).count(), 1);
    }

    #[test]
    fn probe_defect_sits_in_the_planted_cell_and_vanishes_at_low_res() {
        for i in 0..20 {
            let s = gen_probe(11, i, 64, 8).unwrap();
            let Annotation::Probe { cell, grid } = s.annotation else { panic!() };
            assert_eq!(grid, 8);
            assert_eq!(s.convo.reference_answer().unwrap(), cell.to_string());

            // exactly four texels deviate from the clean texture, all
            // inside the planted cell
            let img = s.convo.image.as_ref().unwrap();
            let (row, col) = (cell / 8, cell % 8);
            let deviating: Vec<(usize, usize)> = (0..64)
                .flat_map(|y| (0..64).map(move |x| (y, x)))
                .filter(|&(y, x)| img.pixel(y, x)[0] != probe_texel(y, x, false))
                .collect();
            assert_eq!(deviating.len(), 4);
            for (y, x) in &deviating {
                assert_eq!(y / 8, row);
                assert_eq!(x / 8, col);
            }

            // the downsampled global view is one flat field: no cell signal
            let global = crate::tiler::resample(img, 32).unwrap();
            let flat = (PROBE_TEXTURE_LOW + PROBE_TEXTURE_HIGH) / 2.0;
            for v in &global.data {
                assert!((v - flat).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn annotation_rerendering_reproduces_answers_exactly() {
        for task in [
            TaskTag::Caption,
            TaskTag::Vqa,
            TaskTag::Detection,
            TaskTag::Rec,
            TaskTag::Reg,
            TaskTag::Pose,
            TaskTag::GroundedCaption,
            TaskTag::Classify,
        ] {
            for i in 0..12 {
                let s = gen_sample(task, 13, i, 32).unwrap();
                assert_eq!(
                    s.convo.reference_answer().unwrap(),
                    render_answer(&s.annotation),
                    "answer drift for {task:?} sample {i}"
                );
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_index() {
        let a = gen_sample(TaskTag::Vqa, 21, 5, 32).unwrap();
        let b = gen_sample(TaskTag::Vqa, 21, 5, 32).unwrap();
        assert_eq!(a.convo, b.convo);
        let c = gen_sample(TaskTag::Vqa, 22, 5, 32).unwrap();
        assert!(c.convo != a.convo || c.annotation != a.annotation);
    }

    #[test]
    fn corpus_split_is_disjoint_and_seeded() {
        let c = TextCorpus::generate(3, 100, 0.1).unwrap();
        assert_eq!(c.train.len() + c.held_out.len(), 100);
        assert!(!c.held_out.is_empty());
        let c2 = TextCorpus::generate(3, 100, 0.1).unwrap();
        assert_eq!(c.train, c2.train);
        assert_eq!(c.held_out, c2.held_out);
    }

    #[test]
    fn train_chunks_cycle_deterministically() {
        let c = TextCorpus::generate(5, 20, 0.2).unwrap();
        assert_eq!(c.train_chunk(3, 64), c.train_chunk(3, 64));
        assert_ne!(c.train_chunk(3, 64), c.train_chunk(4, 64));
    }

    #[test]
    fn caption_styles_have_distinct_registers() {
        let plain = gen_caption_pairs(1, 4, 32, CaptionStyle::Plain).unwrap();
        let synth = gen_caption_pairs(1, 4, 32, CaptionStyle::Synthetic).unwrap();
        assert!(!plain[0].1.starts_with("a synthetic rendering"));
        assert!(synth[0].1.starts_with("a synthetic rendering of "));
    }

    #[test]
    fn scenes_keep_values_in_range_and_cells_distinct() {
        for i in 0..20 {
            let mut rng = crate::rng::step_stream(2, "scene_test", i);
            let scene = Scene::generate(&mut rng, 32, 4, 3).unwrap();
            let img = scene.render().unwrap();
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let mut rects: Vec<_> = scene.shapes.iter().map(|s| s.rect).collect();
            rects.dedup();
            assert_eq!(rects.len(), 3);
        }
    }
}
