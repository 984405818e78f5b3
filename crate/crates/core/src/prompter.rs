//! Context-aware prompts: cross-attention from the target's token embeddings
//! to the retrieved ones, adaptive pooling down to `l` rows, and a label
//! prompt averaged from the retrieved labels' embeddings.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::encoders::gaussian_f32;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::retriever::RetrievedContext;

/// Query/key/value projections for one modality, each `d×d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projections {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Free learnable prompts used when prompts are not context-derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StaticPrompts {
    pub text: ParamId,
    pub vision: ParamId,
    pub label: ParamId,
}

/// Which retrieved labels feed the label prompt of a full-modality instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    /// Deduplicated union of both channels.
    Union,
    Text,
    Vision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrompterParams {
    pub text: Projections,
    pub vision: Projections,
    /// `C×d` label embedding matrix, shared with the classifier by default.
    pub label_matrix: ParamId,
    pub static_prompts: Option<StaticPrompts>,
}

impl PrompterParams {
    pub fn register(
        store: &mut ParamStore,
        d: usize,
        classes: usize,
        prompt_len: usize,
        with_static: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut proj = |prefix: &str, rng: &mut ChaCha8Rng| Projections {
            query: store.register(format!("prompter.{prefix}.query"), gaussian_f32(rng, d, d, std)),
            key: store.register(format!("prompter.{prefix}.key"), gaussian_f32(rng, d, d, std)),
            value: store.register(format!("prompter.{prefix}.value"), gaussian_f32(rng, d, d, std)),
        };
        let text = proj("text", rng);
        let vision = proj("vision", rng);
        let label_matrix = store.register("label_matrix", gaussian_f32(rng, classes, d, 1.0));
        let static_prompts = with_static.then(|| StaticPrompts {
            text: store.register("static.text", gaussian_f32(rng, prompt_len, d, 1.0)),
            vision: store.register("static.vision", gaussian_f32(rng, prompt_len, d, 1.0)),
            label: store.register("static.label", gaussian_f32(rng, 1, d, 1.0)),
        });
        Self {
            text,
            vision,
            label_matrix,
            static_prompts,
        }
    }

    pub fn projections(&self, modality: Modality) -> Projections {
        match modality {
            Modality::Text => self.text,
            Modality::Image => self.vision,
        }
    }
}

/// Output of [`cross_attention`]: the attended values and the attention weights.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

/// Single-head `softmax(QKᵀ/√d)V` with `Q = target·f^Q`, `K = retrieved·f^K`,
/// `V = retrieved·f^V`. `retrieved` is the `(K·len)×d` stack of all retrieved
/// token matrices.
pub fn cross_attention(
    tape: &mut Tape,
    store: &ParamStore,
    target: Var,
    retrieved: Var,
    proj: Projections,
) -> Result<Attended> {
    if tape.value(retrieved).rows() == 0 {
        return Err(Error::Precondition("cross-attention over an empty context".into()));
    }
    let d = tape.value(target).cols();
    let wq = tape.param(store, proj.query);
    let wk = tape.param(store, proj.key);
    let wv = tape.param(store, proj.value);
    let q = tape.matmul(target, wq)?;
    let k = tape.matmul(retrieved, wk)?;
    let v = tape.matmul(retrieved, wv)?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(scores)?;
    let output = tape.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

/// Row ranges of the `l` contiguous pooling bins over `n` rows: bin `i`
/// covers `⌊i·n/l⌋ .. ⌊(i+1)·n/l⌋`.
pub fn pool_bins(n: usize, l: usize) -> Vec<std::ops::Range<usize>> {
    (0..l).map(|i| (i * n / l)..((i + 1) * n / l)).collect()
}

/// Averages contiguous row bins, `n×d → l×d`.
pub fn adaptive_pool(tape: &mut Tape, x: Var, l: usize) -> Result<Var> {
    let n = tape.value(x).rows();
    if l == 0 || l > n {
        return Err(Error::Numerics(crate::numerics::NumericsError::Shape {
            op: "adaptive_pool",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![l],
        }));
    }
    let mut pool = Tensor::zeros(&[l, n]);
    for (i, bin) in pool_bins(n, l).into_iter().enumerate() {
        let w = 1.0 / bin.len() as f64;
        for r in bin {
            pool.data_mut()[i * n + r] = w;
        }
    }
    let pool = tape.constant(pool);
    Ok(tape.matmul(pool, x)?)
}

/// Labels contributing to the label prompt, deduplicated by source id.
pub fn label_set(text_ctx: &RetrievedContext, vision_ctx: &RetrievedContext, source: LabelSource) -> Vec<usize> {
    let mut by_id: BTreeMap<u64, usize> = BTreeMap::new();
    let contexts: Vec<&RetrievedContext> = match source {
        LabelSource::Union => vec![text_ctx, vision_ctx],
        LabelSource::Text => vec![text_ctx],
        LabelSource::Vision => vec![vision_ctx],
    };
    for ctx in contexts {
        for e in &ctx.entries {
            by_id.insert(e.source_id, e.label);
        }
    }
    by_id.into_values().collect()
}

/// Mean of the label-matrix rows of the retrieved labels, as a `1×d` row.
pub fn label_prompt(
    tape: &mut Tape,
    store: &ParamStore,
    label_matrix: ParamId,
    text_ctx: &RetrievedContext,
    vision_ctx: &RetrievedContext,
    source: LabelSource,
) -> Result<Var> {
    let labels = label_set(text_ctx, vision_ctx, source);
    if labels.is_empty() {
        return Err(Error::Precondition(
            "label prompt needs at least one retrieved entry".into(),
        ));
    }
    let classes = store.value(label_matrix).rows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let lm = tape.param(store, label_matrix);
    let rows = tape.gather_rows(lm, &labels)?;
    Ok(tape.mean_rows(rows))
}

/// The three prompt blocks inserted in front of the backbone sequence.
#[derive(Debug, Clone, Copy)]
pub struct PromptSet {
    /// `l×d`.
    pub text: Var,
    /// `l×d`.
    pub vision: Var,
    /// `1×d`.
    pub label: Var,
}

/// How prompts are produced for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    Context,
    Static,
    /// Context prompts with the label prompt replaced by a zero row.
    NoLabel,
    None,
}

pub struct PromptInputs<'a> {
    /// `n×d`, real or generated.
    pub target_text: Var,
    /// `m×d`, real or generated.
    pub target_vision: Var,
    pub text_ctx: Option<&'a RetrievedContext>,
    pub vision_ctx: Option<&'a RetrievedContext>,
    /// Stacked retrieved text tokens of the text context, `(K·n)×d`.
    pub text_retrieved: Option<&'a Tensor>,
    /// Stacked retrieved image tokens of the vision context, `(K·m)×d`.
    pub vision_retrieved: Option<&'a Tensor>,
}

pub fn build_prompts(
    tape: &mut Tape,
    store: &ParamStore,
    params: &PrompterParams,
    inputs: &PromptInputs<'_>,
    kind: PromptKind,
    prompt_len: usize,
    label_source: LabelSource,
) -> Result<Option<PromptSet>> {
    match kind {
        PromptKind::None => Ok(None),
        PromptKind::Static => {
            let s = params
                .static_prompts
                .ok_or_else(|| Error::Config("static prompts were not registered".into()))?;
            Ok(Some(PromptSet {
                text: tape.param(store, s.text),
                vision: tape.param(store, s.vision),
                label: tape.param(store, s.label),
            }))
        }
        PromptKind::Context | PromptKind::NoLabel => {
            let (Some(tc), Some(vc), Some(tr), Some(vr)) = (
                inputs.text_ctx,
                inputs.vision_ctx,
                inputs.text_retrieved,
                inputs.vision_retrieved,
            ) else {
                return Err(Error::Config("context prompts require retrieval".into()));
            };
            let channel = |target: Var, retrieved: &Tensor, modality: Modality, tape: &mut Tape| -> Result<Var> {
                let retrieved = tape.constant(retrieved.clone());
                let att = cross_attention(tape, store, target, retrieved, params.projections(modality))?;
                adaptive_pool(tape, att.output, prompt_len)
            };
            let text = channel(inputs.target_text, tr, Modality::Text, tape)?;
            let vision = channel(inputs.target_vision, vr, Modality::Image, tape)?;
            let label = if kind == PromptKind::NoLabel {
                let d = tape.value(text).cols();
                tape.constant(Tensor::zeros(&[1, d]))
            } else {
                label_prompt(tape, store, params.label_matrix, tc, vc, label_source)?
            };
            Ok(Some(PromptSet { text, vision, label }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retriever::{Channel, RetrievedEntry};
    use rand::SeedableRng;

    fn ctx(items: &[(u64, usize)]) -> RetrievedContext {
        RetrievedContext {
            channel: Channel::Text,
            entries: items
                .iter()
                .map(|&(id, label)| RetrievedEntry {
                    index: id as usize,
                    source_id: id,
                    label,
                    score: 0.5,
                })
                .collect(),
            degraded: false,
        }
    }

    fn params(d: usize, classes: usize) -> (ParamStore, PrompterParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PrompterParams::register(&mut store, d, classes, 2, true, &mut rng);
        (store, p)
    }

    #[test]
    fn constant_values_pass_through_identity_value_projection() {
        let (mut store, p) = params(3, 2);
        store.get_mut(p.text.value).value = Tensor::identity(3);
        let mut tape = Tape::new();
        let target = tape.constant(Tensor::matrix(4, 3, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
        let retrieved = tape.constant(Tensor::matrix(4, 3, [0.5, -1.0, 2.0].repeat(4)).unwrap());
        let att = cross_attention(&mut tape, &store, target, retrieved, p.text).unwrap();
        for r in 0..4 {
            let row = tape.value(att.output).row(r);
            assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] + 1.0).abs() < 1e-12 && (row[2] - 2.0).abs() < 1e-12);
        }
        let w = tape.value(att.weights);
        for r in 0..w.rows() {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_context_is_rejected() {
        let (store, p) = params(3, 2);
        let mut tape = Tape::new();
        let target = tape.constant(Tensor::zeros(&[2, 3]));
        let retrieved = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(cross_attention(&mut tape, &store, target, retrieved, p.text).is_err());
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = Tensor::matrix(5, 2, (0..10).map(|i| i as f64).collect()).unwrap();
        let xv = tape.constant(x.clone());
        let same = adaptive_pool(&mut tape, xv, 5).unwrap();
        assert_eq!(tape.value(same), &x);
        let two = adaptive_pool(&mut tape, xv, 2).unwrap();
        // bins {0,1} and {2,3,4}
        assert_eq!(tape.value(two).row(0), &[1.0, 2.0]);
        assert_eq!(tape.value(two).row(1), &[6.0, 7.0]);
        let c = tape.constant(Tensor::full(&[7, 3], 2.5));
        let pooled = adaptive_pool(&mut tape, c, 3).unwrap();
        assert!(tape.value(pooled).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        assert!(adaptive_pool(&mut tape, xv, 6).is_err());
        assert_eq!(pool_bins(5, 2), vec![0..2, 2..5]);
    }

    #[test]
    fn label_prompt_examples() {
        let (store, p) = params(4, 3);
        let lm = store.value(p.label_matrix).clone();
        let mut tape = Tape::new();
        let same = ctx(&[(1, 2), (5, 2), (9, 2)]);
        let v = label_prompt(&mut tape, &store, p.label_matrix, &same, &same, LabelSource::Union).unwrap();
        assert!(tape
            .value(v)
            .data()
            .iter()
            .zip(lm.row(2))
            .all(|(a, b)| (a - b).abs() < 1e-15));

        let two = ctx(&[(1, 0), (2, 1)]);
        let v = label_prompt(&mut tape, &store, p.label_matrix, &two, &two, LabelSource::Union).unwrap();
        for j in 0..4 {
            assert!((tape.value(v).data()[j] - (lm.get(0, j) + lm.get(1, j)) / 2.0).abs() < 1e-15);
        }

        let bad = ctx(&[(1, 7)]);
        assert!(matches!(
            label_prompt(&mut tape, &store, p.label_matrix, &bad, &bad, LabelSource::Union),
            Err(Error::LabelOutOfRange { label: 7, classes: 3 })
        ));
    }

    #[test]
    fn label_union_deduplicates_and_ignores_order() {
        let t = ctx(&[(3, 0), (4, 1), (8, 2)]);
        let v = ctx(&[(4, 1), (11, 1)]);
        assert_eq!(label_set(&t, &v, LabelSource::Union), vec![0, 1, 2, 1]);
        let t_rev = ctx(&[(8, 2), (3, 0), (4, 1)]);
        assert_eq!(
            label_set(&t_rev, &v, LabelSource::Union),
            label_set(&t, &v, LabelSource::Union)
        );
        assert_eq!(label_set(&t, &v, LabelSource::Vision), vec![1, 1]);
    }
}
