//! Multi-turn conversation records and their byte-level token encoding.
//!
//! Wire shape of one sample, as token ids:
//!
//! ```text
//! [bos] "user: {text}\n" "assistant: {text}" [eos] "\n" ...
//! ```
//!
//! The loss mask is true exactly on assistant content bytes and the eos
//! that terminates each assistant turn.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lm::LMConfig;

use super::templates::TaskTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            other => Err(Error::Parse(format!("unknown role {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversationSample {
    pub turns: Vec<Turn>,
    pub image: Option<ImageTensor>,
    pub task_tag: TaskTag,
}

impl ConversationSample {
    pub fn new(turns: Vec<Turn>, image: Option<ImageTensor>, task_tag: TaskTag) -> Result<Self> {
        let sample = Self { turns, image, task_tag };
        sample.validate()?;
        Ok(sample)
    }

    /// Roles strictly alternate starting with user; assistant turns are
    /// non-empty.
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::InvalidInput("conversation has no turns".into()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(Error::InvalidInput(format!(
                    "turn {i} must be {}, got {}",
                    expected.as_str(),
                    turn.role.as_str()
                )));
            }
            if turn.role == Role::Assistant && turn.text.is_empty() {
                return Err(Error::InvalidInput(format!("assistant turn {i} is empty")));
            }
        }
        Ok(())
    }

    /// Single-turn convenience constructor.
    pub fn exchange(user: &str, assistant: &str, image: Option<ImageTensor>, tag: TaskTag) -> Result<Self> {
        Self::new(
            vec![
                Turn { role: Role::User, text: user.to_string() },
                Turn { role: Role::Assistant, text: assistant.to_string() },
            ],
            image,
            tag,
        )
    }

    /// Text of the last assistant turn, the evaluation target.
    pub fn reference_answer(&self) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::Assistant)
            .map(|t| t.text.as_str())
    }
}

fn push_text(ids: &mut Vec<usize>, mask: &mut Vec<bool>, text: &str, scored: bool) {
    for b in text.bytes() {
        ids.push(b as usize);
        mask.push(scored);
    }
}

/// Token ids plus loss mask for a full conversation (training form).
pub fn tokenize_conversation(sample: &ConversationSample, cfg: &LMConfig) -> Result<(Vec<usize>, Vec<bool>)> {
    sample.validate()?;
    let mut ids = vec![cfg.bos_token];
    let mut mask = vec![false];
    for turn in &sample.turns {
        match turn.role {
            Role::User => {
                push_text(&mut ids, &mut mask, "user: ", false);
                push_text(&mut ids, &mut mask, &turn.text, false);
                push_text(&mut ids, &mut mask, "\n", false);
            }
            Role::Assistant => {
                push_text(&mut ids, &mut mask, "assistant: ", false);
                push_text(&mut ids, &mut mask, &turn.text, true);
                ids.push(cfg.eos_token);
                mask.push(true);
                push_text(&mut ids, &mut mask, "\n", false);
            }
        }
    }
    Ok((ids, mask))
}

/// Token ids of the decoding prompt: every turn up to and including the
/// last user turn, then the assistant tag awaiting completion.
pub fn tokenize_prompt(sample: &ConversationSample, cfg: &LMConfig) -> Result<Vec<usize>> {
    sample.validate()?;
    let last_user = sample
        .turns
        .iter()
        .rposition(|t| t.role == Role::User)
        .ok_or_else(|| Error::InvalidInput("no user turn to prompt from".into()))?;
    let mut ids = vec![cfg.bos_token];
    let mut mask = Vec::new();
    for turn in &sample.turns[..=last_user] {
        match turn.role {
            Role::User => {
                push_text(&mut ids, &mut mask, "user: ", false);
                push_text(&mut ids, &mut mask, &turn.text, false);
                push_text(&mut ids, &mut mask, "\n", false);
            }
            Role::Assistant => {
                push_text(&mut ids, &mut mask, "assistant: ", false);
                push_text(&mut ids, &mut mask, &turn.text, false);
                ids.push(cfg.eos_token);
                push_text(&mut ids, &mut mask, "\n", false);
            }
        }
    }
    push_text(&mut ids, &mut mask, "assistant: ", false);
    Ok(ids)
}

/// Caption pretraining form: bare caption bytes after bos, every content
/// byte scored, no templates.
pub fn tokenize_caption(caption: &str, cfg: &LMConfig) -> (Vec<usize>, Vec<bool>) {
    let mut ids = vec![cfg.bos_token];
    let mut mask = vec![false];
    push_text(&mut ids, &mut mask, caption, true);
    ids.push(cfg.eos_token);
    mask.push(true);
    (ids, mask)
}

/// Byte ids back to text; non-ASCII ids render as replacement chars.
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().map(|&i| i.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LMConfig {
        LMConfig::toy()
    }

    #[test]
    fn alternation_is_enforced() {
        let bad = ConversationSample::new(
            vec![Turn { role: Role::Assistant, text: "hi".into() }],
            None,
            TaskTag::Vqa,
        );
        assert!(bad.is_err());
        let bad2 = ConversationSample::new(
            vec![
                Turn { role: Role::User, text: "q".into() },
                Turn { role: Role::User, text: "q2".into() },
            ],
            None,
            TaskTag::Vqa,
        );
        assert!(bad2.is_err());
    }

    #[test]
    fn mask_covers_exactly_assistant_content_and_eos() {
        let sample = ConversationSample::exchange("what?", "red", None, TaskTag::Vqa).unwrap();
        let (ids, mask) = tokenize_conversation(&sample, &cfg()).unwrap();
        assert_eq!(ids.len(), mask.len());
        // scored ids: 'r' 'e' 'd' eos
        let scored: Vec<usize> = ids
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&i, _)| i)
            .collect();
        assert_eq!(scored, vec![b'r' as usize, b'e' as usize, b'd' as usize, 2]);
        assert!(!mask[0], "bos is never scored");
    }

    #[test]
    fn prompt_stops_at_assistant_tag() {
        let sample = ConversationSample::exchange("what?", "red", None, TaskTag::Vqa).unwrap();
        let prompt = tokenize_prompt(&sample, &cfg()).unwrap();
        let text = detokenize(&prompt[1..]);
        assert_eq!(text, "user: what?\nassistant: ");
    }

    #[test]
    fn multi_turn_prompt_includes_earlier_exchanges() {
        let sample = ConversationSample::new(
            vec![
                Turn { role: Role::User, text: "a?".into() },
                Turn { role: Role::Assistant, text: "1".into() },
                Turn { role: Role::User, text: "b?".into() },
            ],
            None,
            TaskTag::Vqa,
        )
        .unwrap();
        let prompt = tokenize_prompt(&sample, &cfg()).unwrap();
        let text = detokenize(&prompt[1..]);
        assert!(text.starts_with("user: a?\nassistant: 1"));
        assert!(text.ends_with("user: b?\nassistant: "));
    }

    #[test]
    fn caption_form_scores_all_content() {
        let (ids, mask) = tokenize_caption("a red dot", &cfg());
        assert_eq!(ids.len(), 1 + 9 + 1);
        assert!(!mask[0]);
        assert!(mask[1..].iter().all(|&m| m));
    }
}
