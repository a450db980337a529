//! Mixed tuning tasks: instruction templates, coordinate text encoding,
//! conversation records, natural-frequency sampling, square padding, and
//! synthetic closed-world datasets with exact ground truth.

pub mod convo;
pub mod coords;
pub mod manifest;
pub mod pad;
pub mod sampler;
pub mod synth;
pub mod templates;

pub use convo::{tokenize_caption, tokenize_conversation, tokenize_prompt, ConversationSample, Role, Turn};
pub use coords::{find_bbox, parse_bbox, serialize_bbox, serialize_keypoints, BBox, Keypoints};
pub use pad::pad_to_square;
pub use sampler::{DatasetSpec, NaturalFrequencySampler};
pub use synth::{
    gen_caption_pairs, gen_probe, gen_sample, gen_synthetic, render_answer, Annotation,
    CaptionStyle, Scene, SyntheticSample, TextCorpus,
};
pub use templates::{classify_response, instruction_for, Slots, TaskTag};
