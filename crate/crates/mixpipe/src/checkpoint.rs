//! Checkpoint serialization and convex weight interpolation between two
//! trained models.
//!
//! File format (`.mxck`): magic bytes `MXCK`, a little-endian `u32` version,
//! then a UTF-8 text header terminated by an empty line, then raw
//! little-endian f64 payloads in header order. The header carries one
//! `meta` line and one `<key> f64 <d0>x<d1>...` line per entry with keys
//! sorted, so identical checkpoints serialize to identical bytes.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Reserved key prefix for frozen encoder weights inside checkpoints.
pub const ENCODER_KEY_PREFIX: &str = "enc.";

const MAGIC: &[u8; 4] = b"MXCK";
const VERSION: u32 = 1;

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

/// Ordered map of parameter tensors; the in-memory form of a model's weights.
pub type ParamStore = BTreeMap<String, Param>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    PretrainReal,
    PretrainSyn,
    Mixed,
    Finetuned,
}

impl StageTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageTag::PretrainReal => "pretrain_real",
            StageTag::PretrainSyn => "pretrain_syn",
            StageTag::Mixed => "mixed",
            StageTag::Finetuned => "finetuned",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain_real" => Ok(StageTag::PretrainReal),
            "pretrain_syn" => Ok(StageTag::PretrainSyn),
            "mixed" => Ok(StageTag::Mixed),
            "finetuned" => Ok(StageTag::Finetuned),
            other => Err(Error::Parse(format!("unknown stage tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub stage_tag: StageTag,
    pub config_digest: String,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: ParamStore,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(entries: ParamStore, meta: CheckpointMeta) -> Result<Self> {
        for (key, param) in &entries {
            if key.chars().any(|c| c.is_whitespace()) || key.is_empty() {
                return Err(Error::InvalidInput(format!("bad checkpoint key {key:?}")));
            }
            if param.shape.iter().product::<usize>() != param.data.len() {
                return Err(Error::EntryShapeMismatch {
                    key: key.clone(),
                    a: param.shape.clone(),
                    b: vec![param.data.len()],
                });
            }
            if !param.data.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "checkpoint" });
            }
        }
        if meta.config_digest.is_empty() || meta.config_digest.chars().any(|c| c.is_whitespace()) {
            return Err(Error::InvalidInput("config digest must be non-empty, no whitespace".into()));
        }
        Ok(Self { entries, meta })
    }
}

/// Convex interpolation `beta * a + (1 - beta) * b` over matching entries.
///
/// Frozen encoder entries must be bit-identical between the two inputs and
/// are copied verbatim, so the interpolation never perturbs them.
pub fn mix_weights(a: &Checkpoint, b: &Checkpoint, beta: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!("beta {beta} outside [0, 1]")));
    }
    validate_pair(a, b)?;
    // endpoints reproduce the input checkpoint verbatim, meta included, so
    // saving the result is byte-identical to the input file
    if beta == 1.0 {
        return Ok(a.clone());
    }
    if beta == 0.0 {
        return Ok(b.clone());
    }

    let mut entries = ParamStore::new();
    for (key, pa) in &a.entries {
        let pb = &b.entries[key];
        let data = if key.starts_with(ENCODER_KEY_PREFIX) {
            pa.data.clone()
        } else {
            pa.data
                .iter()
                .zip(&pb.data)
                .map(|(x, y)| beta * x + (1.0 - beta) * y)
                .collect()
        };
        entries.insert(key.clone(), Param { shape: pa.shape.clone(), data });
    }

    Checkpoint::new(
        entries,
        CheckpointMeta {
            stage_tag: StageTag::Mixed,
            config_digest: a.meta.config_digest.clone(),
            step: a.meta.step,
        },
    )
}

fn validate_pair(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    let keys_a: Vec<&String> = a.entries.keys().collect();
    let keys_b: Vec<&String> = b.entries.keys().collect();
    if keys_a != keys_b {
        let only_a: Vec<String> = a
            .entries
            .keys()
            .filter(|k| !b.entries.contains_key(*k))
            .cloned()
            .collect();
        let only_b: Vec<String> = b
            .entries
            .keys()
            .filter(|k| !a.entries.contains_key(*k))
            .cloned()
            .collect();
        return Err(Error::KeySetMismatch { only_a, only_b });
    }

    for (key, pa) in &a.entries {
        let pb = &b.entries[key];
        if pa.shape != pb.shape {
            return Err(Error::EntryShapeMismatch {
                key: key.clone(),
                a: pa.shape.clone(),
                b: pb.shape.clone(),
            });
        }
        if key.starts_with(ENCODER_KEY_PREFIX)
            && pa.data.iter().zip(&pb.data).any(|(x, y)| x.to_bits() != y.to_bits())
        {
            return Err(Error::FrozenKeyDivergence(key.clone()));
        }
    }
    Ok(())
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(&format!(
        "meta {} {} {}\n",
        ckpt.meta.stage_tag.as_str(),
        ckpt.meta.step,
        ckpt.meta.config_digest
    ));
    for (key, param) in &ckpt.entries {
        let dims: Vec<String> = param.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{key} f64 {}\n", dims.join("x")));
    }
    header.push('\n');

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(header.as_bytes())?;
    for param in ckpt.entries.values() {
        let mut bytes = Vec::with_capacity(param.data.len() * 8);
        for v in &param.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes)?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;

    let corrupt = |offset: usize, reason: &str| Error::CorruptCheckpoint {
        offset: offset as u64,
        reason: reason.to_string(),
    };

    if raw.len() < 8 || &raw[0..4] != MAGIC {
        return Err(corrupt(0, "missing MXCK magic"));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(4, &format!("unsupported version {version}")));
    }

    // header: text lines up to the first empty line
    let mut pos = 8usize;
    let mut lines: Vec<(usize, String)> = Vec::new();
    loop {
        let line_start = pos;
        let Some(nl) = raw[pos..].iter().position(|&b| b == b'\n') else {
            return Err(corrupt(pos, "unterminated header"));
        };
        let line = std::str::from_utf8(&raw[pos..pos + nl])
            .map_err(|_| corrupt(pos, "header is not UTF-8"))?
            .to_string();
        pos += nl + 1;
        if line.is_empty() {
            break;
        }
        lines.push((line_start, line));
    }
    if lines.is_empty() {
        return Err(corrupt(8, "empty header"));
    }

    let (meta_off, meta_line) = &lines[0];
    let parts: Vec<&str> = meta_line.split(' ').collect();
    if parts.len() != 4 || parts[0] != "meta" {
        return Err(corrupt(*meta_off, "malformed meta line"));
    }
    let stage_tag = StageTag::parse(parts[1])?;
    let step: usize = parts[2]
        .parse()
        .map_err(|_| corrupt(*meta_off, "bad step in meta line"))?;
    let config_digest = parts[3].to_string();

    let mut entries = ParamStore::new();
    let mut order = Vec::new();
    for (off, line) in &lines[1..] {
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 || parts[1] != "f64" {
            return Err(corrupt(*off, "malformed entry line"));
        }
        let key = parts[0].to_string();
        let shape: Vec<usize> = parts[2]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| corrupt(*off, "bad shape"))?;
        if entries.contains_key(&key) {
            return Err(corrupt(*off, &format!("duplicate key {key}")));
        }
        let numel: usize = shape.iter().product();
        entries.insert(key.clone(), Param { shape, data: Vec::new() });
        order.push((key, numel));
    }

    for (key, numel) in order {
        let bytes = numel * 8;
        if raw.len() < pos + bytes {
            return Err(corrupt(
                raw.len(),
                &format!("payload truncated: need {} more bytes for {key}", pos + bytes - raw.len()),
            ));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let start = pos + i * 8;
            data.push(f64::from_le_bytes(raw[start..start + 8].try_into().unwrap()));
        }
        pos += bytes;
        entries.get_mut(&key).unwrap().data = data;
    }
    if pos != raw.len() {
        return Err(corrupt(pos, "trailing bytes after declared payload"));
    }

    Checkpoint::new(entries, CheckpointMeta { stage_tag, config_digest, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ckpt(pairs: &[(&str, Vec<usize>, Vec<f64>)], tag: StageTag) -> Checkpoint {
        let entries: ParamStore = pairs
            .iter()
            .map(|(k, s, d)| (k.to_string(), Param::new(s.clone(), d.clone())))
            .collect();
        Checkpoint::new(
            entries,
            CheckpointMeta { stage_tag: tag, config_digest: "cafebabe".into(), step: 7 },
        )
        .unwrap()
    }

    fn bit_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
        a.entries.len() == b.entries.len()
            && a.entries.iter().zip(&b.entries).all(|((ka, pa), (kb, pb))| {
                ka == kb
                    && pa.shape == pb.shape
                    && pa.data.iter().zip(&pb.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    #[test]
    fn beta_endpoints_are_bit_exact() {
        let a = ckpt(&[("w", vec![2], vec![0.1, 0.7])], StageTag::PretrainReal);
        let b = ckpt(&[("w", vec![2], vec![0.4, -0.3])], StageTag::PretrainSyn);
        assert!(bit_equal(&mix_weights(&a, &b, 1.0).unwrap(), &a));
        assert!(bit_equal(&mix_weights(&a, &b, 0.0).unwrap(), &b));
    }

    #[test]
    fn midpoint_arithmetic() {
        let a = ckpt(&[("w", vec![1], vec![2.0])], StageTag::PretrainReal);
        let b = ckpt(&[("w", vec![1], vec![4.0])], StageTag::PretrainSyn);
        let m = mix_weights(&a, &b, 0.5).unwrap();
        assert_eq!(m.entries["w"].data, vec![3.0]);
        assert_eq!(m.meta.stage_tag, StageTag::Mixed);
    }

    #[test]
    fn key_set_difference_is_reported() {
        let a = ckpt(&[("w", vec![1], vec![1.0]), ("x", vec![1], vec![1.0])], StageTag::PretrainReal);
        let b = ckpt(&[("w", vec![1], vec![1.0]), ("y", vec![1], vec![1.0])], StageTag::PretrainSyn);
        match mix_weights(&a, &b, 0.5) {
            Err(Error::KeySetMismatch { only_a, only_b }) => {
                assert_eq!(only_a, vec!["x"]);
                assert_eq!(only_b, vec!["y"]);
            }
            other => panic!("expected key mismatch, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_the_key() {
        let a = ckpt(&[("w", vec![2], vec![1.0, 2.0])], StageTag::PretrainReal);
        let b = ckpt(&[("w", vec![1, 2], vec![1.0, 2.0])], StageTag::PretrainSyn);
        assert!(matches!(
            mix_weights(&a, &b, 0.5),
            Err(Error::EntryShapeMismatch { key, .. }) if key == "w"
        ));
    }

    #[test]
    fn divergent_frozen_keys_are_rejected() {
        let a = ckpt(&[("enc.vit.w", vec![1], vec![1.0])], StageTag::PretrainReal);
        let b = ckpt(&[("enc.vit.w", vec![1], vec![1.5])], StageTag::PretrainSyn);
        assert!(matches!(mix_weights(&a, &b, 0.5), Err(Error::FrozenKeyDivergence(_))));
    }

    #[test]
    fn frozen_keys_copied_verbatim_for_any_beta() {
        let a = ckpt(
            &[("enc.vit.w", vec![1], vec![0.123456789]), ("lm.w", vec![1], vec![1.0])],
            StageTag::PretrainReal,
        );
        let b = ckpt(
            &[("enc.vit.w", vec![1], vec![0.123456789]), ("lm.w", vec![1], vec![3.0])],
            StageTag::PretrainSyn,
        );
        let m = mix_weights(&a, &b, 0.3).unwrap();
        assert_eq!(m.entries["enc.vit.w"].data[0].to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn beta_outside_unit_interval_rejected() {
        let a = ckpt(&[("w", vec![1], vec![1.0])], StageTag::PretrainReal);
        let b = ckpt(&[("w", vec![1], vec![2.0])], StageTag::PretrainSyn);
        assert!(mix_weights(&a, &b, 1.5).is_err());
        assert!(mix_weights(&a, &b, -0.1).is_err());
    }

    #[test]
    fn roundtrip_is_bit_identical_including_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mxck");
        let c = ckpt(
            &[
                ("enc.vit.w", vec![2, 2], vec![0.1, -0.2, 1e-300, 3.5]),
                ("lm.blk0.wq", vec![3], vec![f64::MIN_POSITIVE, 0.0, -0.0]),
            ],
            StageTag::Finetuned,
        );
        save(&c, &path).unwrap();
        let back = load(&path).unwrap();
        assert!(bit_equal(&back, &c));
        assert_eq!(back.meta, c.meta);
    }

    #[test]
    fn repeated_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.mxck"), dir.path().join("b.mxck"));
        let c = ckpt(
            &[("b", vec![2], vec![1.0, 2.0]), ("a", vec![1], vec![-1.0])],
            StageTag::Mixed,
        );
        save(&c, &p1).unwrap();
        save(&c, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mxck");
        let c = ckpt(&[("w", vec![4], vec![1.0, 2.0, 3.0, 4.0])], StageTag::Mixed);
        save(&c, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        match load(&path) {
            Err(Error::CorruptCheckpoint { offset, reason }) => {
                assert_eq!(offset, bytes.len() as u64);
                assert!(reason.contains("truncated"));
            }
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mxck");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            load(&path),
            Err(Error::CorruptCheckpoint { offset: 0, .. })
        ));
    }

    proptest! {
        /// 1 - beta is exact for dyadic beta, so the symmetry identity
        /// holds bitwise.
        #[test]
        fn mix_symmetry_for_dyadic_beta(
            num in 0u32..=256,
            va in proptest::collection::vec(-10.0f64..10.0, 4),
            vb in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let beta = num as f64 / 256.0;
            let a = ckpt(&[("w", vec![4], va)], StageTag::PretrainReal);
            let b = ckpt(&[("w", vec![4], vb)], StageTag::PretrainSyn);
            let m1 = mix_weights(&a, &b, beta).unwrap();
            let m2 = mix_weights(&b, &a, 1.0 - beta).unwrap();
            for (x, y) in m1.entries["w"].data.iter().zip(&m2.entries["w"].data) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        /// mix(a, a, beta) == a for all beta.
        #[test]
        fn self_mix_is_identity(
            beta in 0.0f64..=1.0,
            v in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let a = ckpt(&[("w", vec![4], v)], StageTag::PretrainReal);
            let m = mix_weights(&a, &a, beta).unwrap();
            for (x, y) in m.entries["w"].data.iter().zip(&a.entries["w"].data) {
                let rel = (x - y).abs() / y.abs().max(1e-12);
                prop_assert!(rel < 1e-15);
            }
        }

        /// Per-entry linearity: mix(s*a, s*b, beta) == s * mix(a, b, beta).
        #[test]
        fn mix_respects_scalar_linearity(
            beta in 0.0f64..=1.0,
            s in -4.0f64..4.0,
            va in proptest::collection::vec(-10.0f64..10.0, 4),
            vb in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let sa: Vec<f64> = va.iter().map(|v| s * v).collect();
            let sb: Vec<f64> = vb.iter().map(|v| s * v).collect();
            let m = mix_weights(
                &ckpt(&[("w", vec![4], va)], StageTag::PretrainReal),
                &ckpt(&[("w", vec![4], vb)], StageTag::PretrainSyn),
                beta,
            ).unwrap();
            let ms = mix_weights(
                &ckpt(&[("w", vec![4], sa)], StageTag::PretrainReal),
                &ckpt(&[("w", vec![4], sb)], StageTag::PretrainSyn),
                beta,
            ).unwrap();
            for (x, y) in ms.entries["w"].data.iter().zip(&m.entries["w"].data) {
                prop_assert!((x - s * y).abs() < 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
