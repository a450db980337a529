//! Full pipeline assembly: frozen encoder bank, visual mixer, and language
//! model over one parameter store, with the tiling plan defining how many
//! token groups a sample contributes.

use crate::checkpoint::{Checkpoint, CheckpointMeta, ParamStore, StageTag};
use crate::encoders::{self, EncoderConfig, EncoderKind, GroupRef};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lm::{self, LMConfig, MixedSequence};
use crate::mixer::{self, MixLayout};
use crate::numerics::{Graph, TensorId};
use crate::params::BoundParams;
use crate::tiler::{self, TilingPlan, ViewKind};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub name: String,
    pub cfg: EncoderConfig,
}

/// Static description of one model variant: the encoder bank, mixing
/// layout, LM geometry, and the input/base resolution pair that fixes the
/// tiling plan and therefore the visual token budget.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub encoders: Vec<EncoderSpec>,
    pub patch_sources: Vec<String>,
    pub query_source: String,
    pub lm: LMConfig,
    pub base_res: usize,
    pub input_res: usize,
    /// Restrict the plan to the single global view (ablation).
    pub global_only: bool,
    pub init_seed: u64,
}

impl PipelineConfig {
    /// Desk-scale default: two independent patch branches, one conv branch,
    /// one query branch, 32 px single-view input.
    pub fn toy(seed: u64) -> Self {
        let patch = |cls| EncoderConfig {
            kind: EncoderKind::Patch { patch_size: 8, cls_token: cls },
            input_size: 32,
            dim: 16,
            depth: 1,
            frozen: true,
        };
        Self {
            encoders: vec![
                EncoderSpec { name: "vit_a".into(), cfg: patch(false) },
                EncoderSpec { name: "vit_b".into(), cfg: patch(false) },
                EncoderSpec {
                    name: "conv".into(),
                    cfg: EncoderConfig {
                        kind: EncoderKind::Conv { strides: vec![2, 2, 2] },
                        input_size: 32,
                        dim: 16,
                        depth: 0,
                        frozen: true,
                    },
                },
                EncoderSpec {
                    name: "qf".into(),
                    cfg: EncoderConfig {
                        kind: EncoderKind::Query { num_queries: 4 },
                        input_size: 32,
                        dim: 16,
                        depth: 0,
                        frozen: true,
                    },
                },
            ],
            patch_sources: vec!["vit_a".into(), "vit_b".into(), "conv".into()],
            query_source: "qf".into(),
            lm: LMConfig::toy(),
            base_res: 32,
            input_res: 32,
            global_only: false,
            init_seed: seed,
        }
    }

    /// Toy variant consuming 64 px inputs through the 5-view tiling.
    pub fn toy_hires(seed: u64) -> Self {
        let mut cfg = Self::toy(seed);
        cfg.input_res = 64;
        cfg
    }

    /// Reduced geometry for exhaustive finite-difference sweeps.
    pub fn grad_check_scale(seed: u64) -> Self {
        let patch = EncoderConfig {
            kind: EncoderKind::Patch { patch_size: 8, cls_token: false },
            input_size: 16,
            dim: 6,
            depth: 1,
            frozen: true,
        };
        Self {
            encoders: vec![
                EncoderSpec { name: "vit_a".into(), cfg: patch.clone() },
                EncoderSpec { name: "vit_b".into(), cfg: patch },
                EncoderSpec {
                    name: "conv".into(),
                    cfg: EncoderConfig {
                        kind: EncoderKind::Conv { strides: vec![4, 2] },
                        input_size: 16,
                        dim: 6,
                        depth: 0,
                        frozen: true,
                    },
                },
                EncoderSpec {
                    name: "qf".into(),
                    cfg: EncoderConfig {
                        kind: EncoderKind::Query { num_queries: 2 },
                        input_size: 16,
                        dim: 6,
                        depth: 0,
                        frozen: true,
                    },
                },
            ],
            patch_sources: vec!["vit_a".into(), "vit_b".into(), "conv".into()],
            query_source: "qf".into(),
            lm: LMConfig {
                vocab_size: 13,
                dim: 16,
                depth: 1,
                heads: 2,
                max_seq_len: 32,
                pad_token: 0,
                bos_token: 1,
                eos_token: 2,
            },
            base_res: 16,
            input_res: 16,
            global_only: false,
            init_seed: seed,
        }
    }

    /// Published-scale variant geometry: two 224/14 ViT branches with a cls
    /// token plus a 32-query branch, at the given input resolution. Used
    /// for token arithmetic; never instantiated as weights here.
    pub fn paper_scale(input_res: usize) -> Self {
        let vit = EncoderConfig {
            kind: EncoderKind::Patch { patch_size: 14, cls_token: true },
            input_size: 224,
            dim: 1024,
            depth: 24,
            frozen: true,
        };
        Self {
            encoders: vec![
                EncoderSpec { name: "clip_vit".into(), cfg: vit.clone() },
                EncoderSpec { name: "dino_vit".into(), cfg: vit },
                EncoderSpec {
                    name: "qformer".into(),
                    cfg: EncoderConfig {
                        kind: EncoderKind::Query { num_queries: 32 },
                        input_size: 224,
                        dim: 768,
                        depth: 0,
                        frozen: true,
                    },
                },
            ],
            patch_sources: vec!["clip_vit".into(), "dino_vit".into()],
            query_source: "qformer".into(),
            lm: LMConfig {
                vocab_size: 32_000,
                dim: 4096,
                depth: 32,
                heads: 32,
                max_seq_len: 3072,
                pad_token: 0,
                bos_token: 1,
                eos_token: 2,
            },
            base_res: 224,
            input_res,
            global_only: false,
            init_seed: 0,
        }
    }

    pub fn encoder(&self, name: &str) -> Result<&EncoderSpec> {
        self.encoders
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown encoder {name}")))
    }

    /// Channel concatenation requires every patch-level source to emit the
    /// same token count; checked here, at config time.
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        let mut names = std::collections::BTreeSet::new();
        for spec in &self.encoders {
            spec.cfg.validate()?;
            if !names.insert(&spec.name) {
                return Err(Error::InvalidConfig(format!("duplicate encoder name {}", spec.name)));
            }
        }
        if self.patch_sources.is_empty() {
            return Err(Error::InvalidConfig("no patch sources configured".into()));
        }
        let mut counts = Vec::new();
        for name in &self.patch_sources {
            let spec = self.encoder(name)?;
            match spec.cfg.kind {
                EncoderKind::Patch { .. } | EncoderKind::Conv { .. } => {}
                EncoderKind::Query { .. } => {
                    return Err(Error::InvalidConfig(format!(
                        "patch source {name} must be a patch-level encoder"
                    )))
                }
            }
            if spec.cfg.input_size != self.base_res {
                return Err(Error::InvalidConfig(format!(
                    "encoder {name} input {} != base resolution {}",
                    spec.cfg.input_size, self.base_res
                )));
            }
            counts.push((name, spec.cfg.token_count()));
        }
        if counts.windows(2).any(|w| w[0].1 != w[1].1) {
            return Err(Error::InvalidConfig(format!(
                "patch sources disagree on token count: {counts:?}"
            )));
        }
        let query = self.encoder(&self.query_source)?;
        if !matches!(query.cfg.kind, EncoderKind::Query { .. }) {
            return Err(Error::InvalidConfig(format!(
                "query source {} is not a query encoder",
                self.query_source
            )));
        }
        if self.input_res < self.base_res {
            return Err(Error::InvalidConfig(format!(
                "input resolution {} below base {}",
                self.input_res, self.base_res
            )));
        }
        Ok(())
    }

    pub fn mix_layout(&self) -> Result<MixLayout> {
        self.validate()?;
        let patch_in_dim = self
            .patch_sources
            .iter()
            .map(|n| self.encoder(n).map(|s| s.cfg.dim))
            .sum::<Result<usize>>()?;
        Ok(MixLayout {
            patch_sources: self.patch_sources.clone(),
            query_source: self.query_source.clone(),
            patch_in_dim,
            query_in_dim: self.encoder(&self.query_source)?.cfg.dim,
            lm_dim: self.lm.dim,
        })
    }

    /// Tokens contributed by one encoded view: query tokens first, then the
    /// channel-concatenated patch tokens.
    pub fn tokens_per_group(&self) -> Result<usize> {
        self.validate()?;
        let patch = self.encoder(&self.patch_sources[0])?.cfg.token_count();
        let query = self.encoder(&self.query_source)?.cfg.token_count();
        Ok(patch + query)
    }

    pub fn plan(&self) -> Result<TilingPlan> {
        let mut plan = tiler::make_plan(self.input_res, self.base_res)?;
        if self.global_only {
            plan.views.truncate(1);
        }
        Ok(plan)
    }

    /// Total visual tokens a sample occupies under this variant.
    pub fn visual_budget(&self) -> Result<usize> {
        Ok(tiler::total_visual_tokens(&self.plan()?, self.tokens_per_group()?))
    }

    /// Canonical one-line rendering; the digest is the first 16 hex chars
    /// of its SHA-256.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        for spec in &self.encoders {
            s.push_str(&format!("enc {} {:?};", spec.name, spec.cfg));
        }
        s.push_str(&format!(
            "patch_sources {:?}; query {}; lm {:?}; base {}; input {}; global_only {}; seed {}",
            self.patch_sources,
            self.query_source,
            self.lm,
            self.base_res,
            self.input_res,
            self.global_only,
            self.init_seed
        ));
        s
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_string().as_bytes());
        let bytes = hasher.finalize();
        bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One ready-to-train item: view images (with their plan roles) plus the
/// tokenized text and its loss mask.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub views: Vec<(ImageTensor, ViewKind)>,
    pub text_ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl EncodedSample {
    pub fn text_only(text_ids: Vec<usize>, loss_mask: Vec<bool>) -> Self {
        Self { views: Vec::new(), text_ids, loss_mask }
    }
}

/// Pipeline weights plus their config.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: PipelineConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for spec in &cfg.encoders {
            encoders::init_params(&mut params, &spec.name, &spec.cfg, cfg.init_seed)?;
        }
        // the query branch reads the first patch source's tokens
        let src_dim = cfg.encoder(&cfg.patch_sources[0])?.cfg.dim;
        let query = cfg.encoder(&cfg.query_source)?;
        encoders::init_query_io(&mut params, &query.name, src_dim, query.cfg.dim, cfg.init_seed);
        mixer::init_params(&mut params, &cfg.mix_layout()?, cfg.init_seed)?;
        lm::init_params(&mut params, &cfg.lm, cfg.init_seed)?;
        Ok(Self { cfg, params })
    }

    pub fn bind<'a>(&self, g: &mut Graph, trainable_prefixes: &'a [String]) -> Result<BoundParams> {
        BoundParams::bind(g, &self.params, |key| {
            trainable_prefixes.iter().any(|p| key.starts_with(p.as_str()))
        })
    }

    /// Tiled view images for one input image under this variant's plan.
    pub fn prepare_views(&self, img: &ImageTensor) -> Result<Vec<(ImageTensor, ViewKind)>> {
        let plan = self.cfg.plan()?;
        let imgs = tiler::apply_plan(img, &plan)?;
        Ok(imgs.into_iter().zip(plan.views.iter().map(|v| v.kind)).collect())
    }

    /// Single global low-resolution view, regardless of the variant's
    /// tiling (the pretraining image path).
    pub fn global_view(&self, img: &ImageTensor) -> Result<Vec<(ImageTensor, ViewKind)>> {
        Ok(vec![(tiler::resample(img, self.cfg.base_res)?, ViewKind::Global)])
    }

    /// Encodes one base-resolution view: all patch sources channel-concat
    /// then project, query branch over the first patch source's tokens,
    /// query tokens first in the assembled group.
    fn encode_view(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        img: &ImageTensor,
        kind: ViewKind,
        crop_index: usize,
    ) -> Result<GroupRef> {
        let scale_tag = kind.as_str();
        let mut groups = Vec::new();
        for name in &self.cfg.patch_sources {
            let spec = self.cfg.encoder(name)?;
            let group = match spec.cfg.kind {
                EncoderKind::Patch { .. } => {
                    encoders::encode_patch(g, bp, name, &spec.cfg, img, scale_tag, crop_index)?
                }
                EncoderKind::Conv { .. } => {
                    encoders::encode_conv(g, bp, name, &spec.cfg, img, scale_tag, crop_index)?
                }
                EncoderKind::Query { .. } => unreachable!("validated patch-level"),
            };
            groups.push(group);
        }
        let layout = self.cfg.mix_layout()?;
        let concat = mixer::channel_concat(g, &groups)?;
        let patch_proj = mixer::project(
            g,
            bp,
            &concat,
            mixer::PATCH_PROJ_W,
            mixer::PATCH_PROJ_B,
            layout.lm_dim,
        )?;
        let query_spec = self.cfg.encoder(&self.cfg.query_source)?;
        let pooled = encoders::encode_query(g, bp, &query_spec.name, &query_spec.cfg, &groups[0])?;
        let query_proj = mixer::project(
            g,
            bp,
            &pooled,
            mixer::QUERY_PROJ_W,
            mixer::QUERY_PROJ_B,
            layout.lm_dim,
        )?;
        mixer::assemble_group(g, &patch_proj, &query_proj)
    }

    /// Visual prefix for an ordered list of views: every view encoded
    /// independently, groups concatenated in list order. Returns the tensor,
    /// its token count, and the rendered per-group provenance sequence.
    pub fn encode_views(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        views: &[(ImageTensor, ViewKind)],
    ) -> Result<(TensorId, usize, String)> {
        if views.is_empty() {
            return Err(Error::InvalidInput("no views to encode".into()));
        }
        let mut groups = Vec::new();
        for (i, (img, kind)) in views.iter().enumerate() {
            groups.push(self.encode_view(g, bp, img, *kind, i)?);
        }
        let ids: Vec<TensorId> = groups.iter().map(|gr| gr.id).collect();
        let joined = g.concat_rows(&ids)?;
        let count: usize = groups.iter().map(|gr| gr.count).sum();
        let provenance = groups
            .iter()
            .map(|gr| gr.provenance.render())
            .collect::<Vec<_>>()
            .join(";");
        Ok((joined, count, provenance))
    }

    /// Loss for one sample on an existing graph.
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        sample: &EncodedSample,
    ) -> Result<TensorId> {
        let visual = if sample.views.is_empty() {
            None
        } else {
            Some(self.encode_views(g, bp, &sample.views)?.0)
        };
        let seq = MixedSequence {
            visual: None, // ids live on the tape, carried separately
            text_ids: sample.text_ids.clone(),
            loss_mask: sample.loss_mask.clone(),
        };
        lm::loss(g, bp, &self.cfg.lm, visual, &seq)
    }

    /// Loss value with all parameters frozen (evaluation).
    pub fn eval_loss(&self, sample: &EncodedSample) -> Result<f64> {
        let mut g = Graph::new();
        let bp = self.bind(&mut g, &[])?;
        let loss = self.sample_loss(&mut g, &bp, sample)?;
        Ok(g.scalar(loss))
    }

    /// Precomputed plain visual prefix for decoding.
    pub fn visual_prefix_plain(&self, views: &[(ImageTensor, ViewKind)]) -> Result<(usize, Vec<f64>)> {
        let mut g = Graph::new();
        let bp = self.bind(&mut g, &[])?;
        let (id, count, _) = self.encode_views(&mut g, &bp, views)?;
        Ok((count, g.value(id).to_vec()))
    }

    /// Greedy decode conditioned on tiled views (empty slice for text-only).
    pub fn generate(
        &self,
        views: &[(ImageTensor, ViewKind)],
        prompt_ids: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let visual = if views.is_empty() {
            None
        } else {
            Some(self.visual_prefix_plain(views)?)
        };
        lm::generate(&self.params, &self.cfg.lm, visual.as_ref(), prompt_ids, max_new)
    }

    pub fn to_checkpoint(&self, stage_tag: StageTag, step: usize) -> Result<Checkpoint> {
        Checkpoint::new(
            self.params.clone(),
            CheckpointMeta { stage_tag, config_digest: self.cfg.digest(), step },
        )
    }

    /// Rebuilds a model from a checkpoint, refusing configs whose digest
    /// does not match the checkpoint's.
    pub fn from_checkpoint(cfg: PipelineConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.meta.config_digest != cfg.digest() {
            return Err(Error::InvalidInput(format!(
                "checkpoint digest {} does not match config digest {}",
                ckpt.meta.config_digest,
                cfg.digest()
            )));
        }
        Ok(Self { cfg, params: ckpt.entries.clone() })
    }
}
