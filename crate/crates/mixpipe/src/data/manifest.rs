//! Line-delimited dataset manifests. One sample per line:
//!
//! ```text
//! #mixpipe-dataset v1
//! {task_tag}\t{image_file or -}\t{role}={text}\t{role}={text}...
//! ```
//!
//! Text fields escape backslash, tab, and newline as `\\`, `\t`, `\n`.
//! Images are numbered binary P6 pixmaps beside the manifest.

use crate::error::{Error, Result};
use crate::image;
use std::path::Path;

use super::convo::{ConversationSample, Role, Turn};
use super::templates::TaskTag;

const HEADER: &str = "#mixpipe-dataset v1";

fn escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            other => return Err(Error::Parse(format!("bad escape \\{other:?}"))),
        }
    }
    Ok(out)
}

/// Writes conversations plus their images into `dir`, returning the
/// manifest path.
pub fn write_dataset(dir: &Path, name: &str, samples: &[ConversationSample]) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut lines = vec![HEADER.to_string()];
    for (i, sample) in samples.iter().enumerate() {
        sample.validate()?;
        let image_field = match &sample.image {
            Some(img) => {
                let file = format!("{name}_{i:05}.ppm");
                image::write_p6(img, &dir.join(&file))?;
                file
            }
            None => "-".to_string(),
        };
        let mut fields = vec![sample.task_tag.as_str().to_string(), image_field];
        for turn in &sample.turns {
            fields.push(format!("{}={}", turn.role.as_str(), escape(&turn.text)));
        }
        lines.push(fields.join("\t"));
    }
    let path = dir.join(format!("{name}.manifest"));
    std::fs::write(&path, lines.join("\n") + "\n")?;
    Ok(path)
}

/// Reads a manifest and its referenced images.
pub fn read_dataset(manifest: &Path) -> Result<Vec<ConversationSample>> {
    let text = std::fs::read_to_string(manifest)?;
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => return Err(Error::Parse(format!("bad manifest header {other:?}"))),
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Parse(format!("manifest line {} too short", lineno + 2)));
        }
        let task_tag = TaskTag::parse(fields[0])?;
        let image = match fields[1] {
            "-" => None,
            file => Some(image::read_p6(&dir.join(file))?),
        };
        let turns = fields[2..]
            .iter()
            .map(|field| {
                let (role, text) = field
                    .split_once('=')
                    .ok_or_else(|| Error::Parse(format!("turn field {field:?} missing '='")))?;
                Ok(Turn { role: Role::parse(role)?, text: unescape(text)? })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(ConversationSample::new(turns, image, task_tag)?);
    }
    Ok(samples)
}
