//! Task-specific instruction templates. These strings are load-bearing:
//! evaluation harnesses and the synthetic generators both rely on them
//! byte-for-byte, so they are never rebuilt from parts at runtime.

use crate::error::{Error, Result};

pub const VQA_SHORT_ANSWER: &str = "Answer the question using a single word or phrase.";
pub const MULTIPLE_CHOICE: &str =
    "Answer with the option's letter from the given choices directly.";
pub const REC: &str =
    "Please provide the bounding box coordinate of the region this sentence describes: {description}.";
pub const TEXT_VQA: &str =
    "Reference OCR token: {OCR}\nAnswer the question using a single word or phrase.";
pub const VIZWIZ: &str = "When the provided information is insufficient, respond with \
'Unanswerable'. Answer the question using a single word or phrase.";
pub const OPTIONS: &str = "There are several options: {options}";
pub const DETECT_ALL: &str = "Detect all objects shown in the image.";
pub const DETECT_CATEGORY: &str = "detect all {category name} shown in the image.";
pub const DETECT_PEOPLE: &str = "Detect all people shown in the image.";
pub const POSE_IN_REGION: &str =
    "Detect the key points of the person in the region {coordinate}.";
pub const DOCUMENT_LAYOUT: &str = "Detect all texts and provide their bounding box coordinated.";
pub const GROUNDED_CAPTION: &str =
    "Describe the image concisely. Include the bounding box for each mentioned object.";
pub const RELATION: &str =
    "What is the relationship between the object in {coordinate} and the object in {coordinate}?";
pub const REFERRING_RELATIONSHIP: &str =
    "Please provide the bounding box coordinate of the region this sentence describes: {description}";
pub const CLASSIFY: &str = "Classify the image.";
pub const CLASSIFY_RESPONSE: &str = "This is a [CLASS]";
pub const REGION_DESCRIPTION: &str =
    "Please provide a short description for this region : {coordinate}";
pub const CAPTION_SHORT: &str = "Provide a one-sentence caption for the provided image.";
pub const CAPTION_DETAILED: &str = "Generate a detailed description about the image.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskTag {
    Caption,
    Vqa,
    Detection,
    Rec,
    Reg,
    Pose,
    GroundedCaption,
    Classify,
    TextOnly,
}

impl TaskTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskTag::Caption => "caption",
            TaskTag::Vqa => "vqa",
            TaskTag::Detection => "detection",
            TaskTag::Rec => "rec",
            TaskTag::Reg => "reg",
            TaskTag::Pose => "pose",
            TaskTag::GroundedCaption => "grounded_caption",
            TaskTag::Classify => "classify",
            TaskTag::TextOnly => "text_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "caption" => TaskTag::Caption,
            "vqa" => TaskTag::Vqa,
            "detection" => TaskTag::Detection,
            "rec" => TaskTag::Rec,
            "reg" => TaskTag::Reg,
            "pose" => TaskTag::Pose,
            "grounded_caption" => TaskTag::GroundedCaption,
            "classify" => TaskTag::Classify,
            "text_only" => TaskTag::TextOnly,
            other => return Err(Error::Parse(format!("unknown task tag {other}"))),
        })
    }
}

/// Slot values for templated instructions.
#[derive(Debug, Clone, Default)]
pub struct Slots {
    pub description: Option<String>,
    pub coordinate: Option<String>,
    pub category: Option<String>,
    pub ocr: Option<String>,
    pub options: Option<String>,
}

fn require<'a>(slot: &'a Option<String>, name: &str, tag: TaskTag) -> Result<&'a str> {
    slot.as_deref().ok_or_else(|| {
        Error::InvalidInput(format!("task {} needs slot {name}", tag.as_str()))
    })
}

/// Instruction text for a task, with slots substituted into the template.
pub fn instruction_for(tag: TaskTag, slots: &Slots) -> Result<String> {
    Ok(match tag {
        TaskTag::Caption => CAPTION_SHORT.to_string(),
        TaskTag::Vqa => VQA_SHORT_ANSWER.to_string(),
        TaskTag::Detection => match &slots.category {
            Some(cat) => DETECT_CATEGORY.replace("{category name}", cat),
            None => DETECT_ALL.to_string(),
        },
        TaskTag::Rec => {
            REC.replace("{description}", require(&slots.description, "description", tag)?)
        }
        TaskTag::Reg => REGION_DESCRIPTION
            .replace("{coordinate}", require(&slots.coordinate, "coordinate", tag)?),
        TaskTag::Pose => match &slots.coordinate {
            Some(coord) => POSE_IN_REGION.replace("{coordinate}", coord),
            None => DETECT_PEOPLE.to_string(),
        },
        TaskTag::GroundedCaption => GROUNDED_CAPTION.to_string(),
        TaskTag::Classify => CLASSIFY.to_string(),
        TaskTag::TextOnly => {
            return Err(Error::InvalidInput("text-only samples carry no instruction".into()))
        }
    })
}

/// Response side of the classification template.
pub fn classify_response(class: &str) -> String {
    CLASSIFY_RESPONSE.replace("[CLASS]", class)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_substitution() {
        let got = instruction_for(
            TaskTag::Rec,
            &Slots { description: Some("the red circle".into()), ..Default::default() },
        )
        .unwrap();
        assert_eq!(
            got,
            "Please provide the bounding box coordinate of the region this sentence \
             describes: the red circle."
        );
        assert!(instruction_for(TaskTag::Rec, &Slots::default()).is_err());
    }

    #[test]
    fn detection_variants() {
        assert_eq!(
            instruction_for(TaskTag::Detection, &Slots::default()).unwrap(),
            "Detect all objects shown in the image."
        );
        assert_eq!(
            instruction_for(
                TaskTag::Detection,
                &Slots { category: Some("circles".into()), ..Default::default() }
            )
            .unwrap(),
            "detect all circles shown in the image."
        );
    }

    #[test]
    fn pose_variants() {
        assert_eq!(
            instruction_for(TaskTag::Pose, &Slots::default()).unwrap(),
            "Detect all people shown in the image."
        );
        assert_eq!(
            instruction_for(
                TaskTag::Pose,
                &Slots { coordinate: Some("[0.1, 0.1, 0.9, 0.9]".into()), ..Default::default() }
            )
            .unwrap(),
            "Detect the key points of the person in the region [0.1, 0.1, 0.9, 0.9]."
        );
    }

    #[test]
    fn classification_conversation_shape() {
        assert_eq!(instruction_for(TaskTag::Classify, &Slots::default()).unwrap(), "Classify the image.");
        assert_eq!(classify_response("red circle"), "This is a red circle");
    }

    #[test]
    fn task_tags_roundtrip() {
        for tag in [
            TaskTag::Caption,
            TaskTag::Vqa,
            TaskTag::Detection,
            TaskTag::Rec,
            TaskTag::Reg,
            TaskTag::Pose,
            TaskTag::GroundedCaption,
            TaskTag::Classify,
            TaskTag::TextOnly,
        ] {
            assert_eq!(TaskTag::parse(tag.as_str()).unwrap(), tag);
        }
    }
}
