//! End-to-end pipeline: retrieval, missing-modality reconstruction, prompt
//! construction, frozen backbone and label-augmented head, with the ablation
//! switches selecting which of those stages are active.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PoolPosition};
use crate::data::{Instance, MissingPattern, Modality};
use crate::encoders::{EncoderConfig, FrozenEncoders};
use crate::error::{Error, Result};
use crate::generator::{average_context, padding_fill, refine, FilterBank, GeneratorConfig};
use crate::head::{self, HeadKind};
use crate::memory::MemoryBank;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::prompter::{build_prompts, LabelSource, PromptInputs, PromptKind, PrompterParams};
use crate::retriever::{retrieve_context, RetrievalMode, RetrievedContext};

/// How a missing modality's embedding is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Average of retrieved embeddings, frequency filter, stabilization.
    Filter,
    /// Average of retrieved embeddings, stabilization only.
    NoFilter,
    /// Seeded standard-normal noise.
    Padding,
    /// A learned instance-independent embedding.
    LearnedMean,
}

/// One pipeline configuration; the named ablations are presets of this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub retrieval: Option<RetrievalMode>,
    pub generator: GeneratorKind,
    pub prompts: PromptKind,
}

impl Variant {
    pub const FULL: Variant = Variant {
        retrieval: Some(RetrievalMode::Within),
        generator: GeneratorKind::Filter,
        prompts: PromptKind::Context,
    };

    pub const NAMES: [&'static str; 8] = [
        "full",
        "padding",
        "no_filter",
        "static_prompt",
        "no_label",
        "no_prompter",
        "cm_retriever",
        "no_retriever",
    ];

    fn apply(mut self, name: &str) -> Result<Self> {
        match name {
            "full" => {}
            "padding" => self.generator = GeneratorKind::Padding,
            "no_filter" => self.generator = GeneratorKind::NoFilter,
            "static_prompt" => self.prompts = PromptKind::Static,
            "no_label" => self.prompts = PromptKind::NoLabel,
            "no_prompter" => self.prompts = PromptKind::None,
            "cm_retriever" => self.retrieval = Some(RetrievalMode::Cross),
            "no_retriever" => {
                self.retrieval = None;
                self.generator = GeneratorKind::LearnedMean;
                self.prompts = PromptKind::Static;
            }
            other => return Err(Error::Config(format!("unknown variant '{other}'"))),
        }
        Ok(self)
    }

    /// Whether any stage reads retrieved context.
    pub fn uses_retrieval(&self) -> bool {
        matches!(self.generator, GeneratorKind::Filter | GeneratorKind::NoFilter)
            || matches!(self.prompts, PromptKind::Context | PromptKind::NoLabel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrieval.is_none() && self.uses_retrieval() {
            return Err(Error::Config(
                "variant needs retrieved context but retrieval is disabled".into(),
            ));
        }
        Ok(())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Parses a preset name or a `+`-joined combination such as
    /// `padding+static_prompt`.
    fn from_str(s: &str) -> Result<Self> {
        let mut v = Variant::FULL;
        for part in s.split('+').map(str::trim) {
            v = v.apply(part)?;
        }
        v.validate()?;
        Ok(v)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.retrieval.is_none() {
            let mut parts = vec!["no_retriever"];
            if self.generator == GeneratorKind::Padding {
                parts.push("padding");
            }
            if self.prompts == PromptKind::None {
                parts.push("no_prompter");
            }
            return f.write_str(&parts.join("+"));
        }
        let mut parts = Vec::new();
        match self.generator {
            GeneratorKind::Filter => {}
            GeneratorKind::NoFilter => parts.push("no_filter"),
            GeneratorKind::Padding => parts.push("padding"),
            GeneratorKind::LearnedMean => parts.push("learned_mean"),
        }
        match self.prompts {
            PromptKind::Context => {}
            PromptKind::Static => parts.push("static_prompt"),
            PromptKind::NoLabel => parts.push("no_label"),
            PromptKind::None => parts.push("no_prompter"),
        }
        if self.retrieval == Some(RetrievalMode::Cross) {
            parts.push("cm_retriever");
        }
        if parts.is_empty() {
            f.write_str("full")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub vocab: usize,
    pub patch_dim: usize,
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub layers: usize,
    pub heads: usize,
    pub insert_layer: usize,
    pub ffn_mult: usize,
    pub k: usize,
    pub prompt_len: usize,
    pub label_source: LabelSource,
    pub head: HeadKind,
    pub pool_position: PoolPosition,
    /// Classifier reuses the prompter's label matrix.
    pub share_label_matrix: bool,
    pub generator: GeneratorConfig,
    pub variant: Variant,
    /// Seeds the frozen encoders and backbone.
    pub backbone_seed: u64,
    /// Seeds trainable initialization and padding fills.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            vocab: 256,
            patch_dim: 16,
            d: 32,
            n: 16,
            m: 16,
            layers: 4,
            heads: 4,
            insert_layer: 2,
            ffn_mult: 4,
            k: 5,
            prompt_len: 2,
            label_source: LabelSource::Union,
            head: HeadKind::Softmax,
            pool_position: PoolPosition::First,
            share_label_matrix: true,
            generator: GeneratorConfig::default(),
            variant: Variant::FULL,
            backbone_seed: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            d: self.d,
            heads: self.heads,
            n: self.n,
            m: self.m,
            insert_layer: self.insert_layer,
            ffn_mult: self.ffn_mult,
            seed: self.backbone_seed,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab: self.vocab,
            patch_dim: self.patch_dim,
            d: self.d,
            seed: self.backbone_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        self.variant.validate()?;
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.d < 2 {
            return Err(Error::Config("d must be at least 2".into()));
        }
        if self.prompt_len == 0 || self.prompt_len > self.n.min(self.m) {
            return Err(Error::Config(format!(
                "prompt length {} must lie in 1..={}",
                self.prompt_len,
                self.n.min(self.m)
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.generator.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Rows of the backbone output for any instance under this config.
    pub fn extended_len(&self) -> usize {
        let prompts = if self.variant.prompts == PromptKind::None {
            0
        } else {
            2 * self.prompt_len + 1
        };
        prompts + self.n + self.m
    }
}

/// Handles of every trainable parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub filters: Option<FilterBank>,
    pub prompter: PrompterParams,
    pub head_label_matrix: ParamId,
    /// Learned text and image stand-ins for the no-retrieval generator.
    pub learned_mean: Option<(ParamId, ParamId)>,
}

/// The frozen components plus handles into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoders: FrozenEncoders,
    pub backbone: Backbone,
    pub params: ModelParams,
}

/// Everything about one instance that does not depend on trainable
/// parameters, computed once per run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: u64,
    pub label: usize,
    pub pattern: MissingPattern,
    pub text: Option<Tensor>,
    pub image: Option<Tensor>,
    pub contexts: Option<(RetrievedContext, RetrievedContext)>,
    /// Stacked text tokens of the text context and image tokens of the
    /// vision context, for context prompts.
    pub retrieved: Option<(Tensor, Tensor)>,
    /// Input to the generator (or the padding noise) for the missing modality.
    pub fill: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `1×C` class probabilities.
    pub probs: Var,
    /// Rows in the final backbone sequence.
    pub seq_len: usize,
}

impl Model {
    /// Builds the frozen components and registers trainable parameters.
    pub fn new(config: ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let encoders = FrozenEncoders::new(config.encoder_config());
        let backbone = Backbone::new(config.backbone_config())?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7061_7261_6d73);
        let v = config.variant;
        let filters = matches!(v.generator, GeneratorKind::Filter | GeneratorKind::NoFilter)
            .then(|| FilterBank::register(&mut store, config.n, config.m, config.d, config.generator, &mut rng));
        if let (Some(f), GeneratorKind::NoFilter) = (&filters, v.generator) {
            for modality in [Modality::Text, Modality::Image] {
                let (re, im) = f.filter_ids(modality);
                store.set_requires_grad(re, false);
                store.set_requires_grad(im, false);
            }
        }
        let prompter = PrompterParams::register(
            &mut store,
            config.d,
            config.classes,
            config.prompt_len,
            v.prompts == PromptKind::Static,
            &mut rng,
        );
        let head_label_matrix = if config.share_label_matrix {
            prompter.label_matrix
        } else {
            let init = store.value(prompter.label_matrix).clone();
            store.register("head.label_matrix", init)
        };
        let learned_mean = (v.generator == GeneratorKind::LearnedMean).then(|| {
            (
                store.register("generator.text.learned_mean", Tensor::zeros(&[config.n, config.d])),
                store.register("generator.image.learned_mean", Tensor::zeros(&[config.m, config.d])),
            )
        });
        Ok((
            Self {
                config,
                encoders,
                backbone,
                params: ModelParams {
                    filters,
                    prompter,
                    head_label_matrix,
                    learned_mean,
                },
            },
            store,
        ))
    }

    /// Embeds an instance, retrieves its contexts (excluding its own id) and
    /// precomputes the missing modality's generator input.
    pub fn prepare(&self, bank: Option<&MemoryBank>, instance: &Instance) -> Result<Prepared> {
        let cfg = &self.config;
        let pattern = instance.mask();
        let embed = |m: Modality| -> Result<Option<Tensor>> {
            if instance.has(m) {
                Ok(Some(self.encoders.embed_modality(instance, m)?))
            } else {
                Ok(None)
            }
        };
        let text = embed(Modality::Text)?;
        let image = embed(Modality::Image)?;
        let contexts = match (cfg.variant.retrieval, cfg.variant.uses_retrieval()) {
            (Some(mode), true) => {
                let bank = bank.ok_or_else(|| Error::Config("variant needs a memory bank".into()))?;
                Some(retrieve_context(
                    &self.encoders,
                    bank,
                    instance,
                    cfg.k,
                    mode,
                    Some(instance.id),
                )?)
            }
            _ => None,
        };
        let missing = match pattern {
            MissingPattern::Full => None,
            MissingPattern::TextMissing => Some(Modality::Text),
            MissingPattern::ImageMissing => Some(Modality::Image),
        };
        let fill = match (missing, cfg.variant.generator) {
            (None, _) | (_, GeneratorKind::LearnedMean) => None,
            (Some(m), GeneratorKind::Padding) => {
                let rows = if m == Modality::Text { cfg.n } else { cfg.m };
                let tag = if m == Modality::Text { 0x7465_7874 } else { 0x696d_6167 };
                Some(padding_fill(rows, cfg.d, cfg.seed ^ instance.id.rotate_left(17) ^ tag))
            }
            (Some(m), GeneratorKind::Filter | GeneratorKind::NoFilter) => {
                let (ctx, _) = contexts.as_ref().expect("retrieval ran for generator variants");
                Some(average_context(ctx, bank.expect("bank present"), m)?)
            }
        };
        let retrieved = match (&contexts, cfg.variant.prompts) {
            (Some((tc, vc)), PromptKind::Context | PromptKind::NoLabel) => {
                let bank = bank.expect("bank present");
                Some((
                    tc.stacked_tokens(bank, Modality::Text),
                    vc.stacked_tokens(bank, Modality::Image),
                ))
            }
            _ => None,
        };
        Ok(Prepared {
            id: instance.id,
            label: instance.label,
            pattern,
            text,
            image,
            contexts,
            retrieved,
            fill,
        })
    }

    fn modality_input(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p: &Prepared,
        modality: Modality,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let real = match modality {
            Modality::Text => &p.text,
            Modality::Image => &p.image,
        };
        if let Some(t) = real {
            return Ok(tape.constant(t.clone()));
        }
        match self.config.variant.generator {
            GeneratorKind::Padding => Ok(tape.constant(p.fill.clone().expect("padding fill prepared"))),
            GeneratorKind::LearnedMean => {
                let (t, i) = self.params.learned_mean.expect("learned mean registered");
                Ok(tape.param(store, if modality == Modality::Text { t } else { i }))
            }
            kind @ (GeneratorKind::Filter | GeneratorKind::NoFilter) => {
                let filters = self.params.filters.as_ref().expect("filters registered");
                let xbar = tape.constant(p.fill.clone().expect("generator input prepared"));
                refine(
                    tape,
                    store,
                    filters,
                    modality,
                    xbar,
                    kind == GeneratorKind::Filter,
                    dropout,
                )
            }
        }
    }

    /// Forward pass for one prepared instance. `dropout` is `Some` in
    /// training mode only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p: &Prepared,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let text = self.modality_input(tape, store, p, Modality::Text, dropout.as_deref_mut())?;
        let image = self.modality_input(tape, store, p, Modality::Image, dropout)?;
        let (text_ctx, vision_ctx) = match &p.contexts {
            Some((t, v)) => (Some(t), Some(v)),
            None => (None, None),
        };
        let inputs = PromptInputs {
            target_text: text,
            target_vision: image,
            text_ctx,
            vision_ctx,
            text_retrieved: p.retrieved.as_ref().map(|r| &r.0),
            vision_retrieved: p.retrieved.as_ref().map(|r| &r.1),
        };
        let prompts = build_prompts(
            tape,
            store,
            &self.params.prompter,
            &inputs,
            cfg.variant.prompts,
            cfg.prompt_len,
            cfg.label_source,
        )?;
        let h1 = self.backbone.assemble_input(tape, text, image)?;
        let hn = self.backbone.forward_with_prompts(tape, h1, prompts.as_ref())?;
        let row = match (cfg.pool_position, prompts.is_some()) {
            (PoolPosition::FirstAfterPrompts, true) => 2 * cfg.prompt_len + 1,
            _ => 0,
        };
        let z = self.backbone.pool(tape, hn, row)?;
        let probs = head::predict(tape, store, z, self.params.head_label_matrix, cfg.head)?;
        Ok(ForwardOutput {
            probs,
            seq_len: tape.value(hn).rows(),
        })
    }

    /// Forward pass followed by the head's loss against the instance label.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p: &Prepared,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(tape, store, p, dropout)?;
        let loss = head::loss(tape, out.probs, p.label, self.config.head)?;
        Ok((loss, out))
    }

    /// Class probabilities in evaluation mode.
    pub fn predict_probs(&self, store: &ParamStore, p: &Prepared) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, p, None)?;
        Ok(tape.value(out.probs).data().to_vec())
    }
}

pub const PARAMS_MAGIC: &[u8; 8] = b"RGPTPRM1";
pub const PARAMS_VERSION: u32 = 1;

/// Serializes every parameter as: `u32` name length, UTF-8 name, `u32` rank,
/// `u32` dims, little-endian `f64` values; after a magic, version and count
/// header.
pub fn params_to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &dim in p.value.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_params(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&params_to_bytes(store))?;
    f.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                reason: "truncated parameter file".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Overwrites the values of `store` from a parameter file. Names, order and
/// shapes must match exactly.
pub fn params_from_bytes(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != PARAMS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "parameter file",
            found: version,
            expected: PARAMS_VERSION,
        });
    }
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(Error::Format {
            offset: 12,
            reason: format!("file holds {count} parameters, model has {}", store.len()),
        });
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let at = r.pos as u64;
        let len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(len)?).into_owned();
        if name != store.name(id) {
            return Err(Error::Format {
                offset: at,
                reason: format!("expected parameter '{}', found '{name}'", store.name(id)),
            });
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != store.value(id).shape() {
            return Err(Error::Format {
                offset: at,
                reason: format!("shape mismatch for '{name}': {shape:?}"),
            });
        }
        let numel = store.value(id).numel();
        let raw = r.take(numel * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.get_mut(id).value.data_mut().copy_from_slice(&values);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            reason: "trailing bytes".into(),
        });
    }
    Ok(())
}

pub fn load_params(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    params_from_bytes(store, &std::fs::read(path)?)
}
