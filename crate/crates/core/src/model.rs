//! The full synthesizer: mask embedder, style encoder, identity projection,
//! generator and discriminator sharing one parameter store.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Float, Graph, Tensor, Var};
use crate::checkpoint;
use crate::data::SemanticMask;
use crate::encoders::{
    assemble_tokens, stack_tokens, tokens_on_graph, ConditioningTokens, IdProjection, MaskDescriptor, MaskEmbedder,
    StyleCodeSet, StyleEncoder, StyleInputs, DESCRIPTOR_GRID, MASK_INPUT,
};
use crate::error::{Error, Result};
use crate::generator::{DiscScale, Discriminator, GenVars, Generator, GeneratorConfig, GeneratorOutput};
use crate::identity::{IdentityEmbedding, DEFAULT_ID_DIM};
use crate::nn::{rng_for, ParamStore};

/// Parameter prefixes updated by the generator step.
pub const GENERATOR_SCOPES: [&str; 4] = ["em.", "es.", "proj.", "gen."];
pub const DISCRIMINATOR_SCOPE: &str = "disc.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub classes: usize,
    pub d_s: usize,
    pub d_id: usize,
    pub gen_channels: Vec<usize>,
    pub head_count: usize,
    pub self_attention: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(resolution: usize, classes: usize, seed: u64) -> Self {
        ModelConfig {
            resolution,
            classes,
            d_s: 64,
            d_id: DEFAULT_ID_DIM,
            gen_channels: GeneratorConfig::default_channels(resolution),
            head_count: 1,
            self_attention: false,
            seed,
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            resolution: self.resolution,
            classes: self.classes,
            d_s: self.d_s,
            channels: self.gen_channels.clone(),
            head_count: self.head_count,
            self_attention: self.self_attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < MASK_INPUT {
            return Err(Error::Config(format!("resolution must be at least {MASK_INPUT}")));
        }
        if self.classes < 1 || self.d_s == 0 || self.d_id == 0 {
            return Err(Error::Config("classes, d_s and d_id must be positive".into()));
        }
        self.generator().validate()
    }
}

/// Constant inputs of one conditioning batch.
pub struct CondBatch {
    /// `[B, C, 32, 32]`
    pub mask_in: Tensor<f32>,
    pub style: StyleInputs,
    /// `[B, d_id]` unit-norm identity embeddings.
    pub ids: Tensor<f32>,
    /// `[B, C, H, W]` one-hot masks for the discriminator.
    pub masks: Tensor<f32>,
}

impl CondBatch {
    pub fn len(&self) -> usize {
        self.ids.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One conditioning item: mask and style source (usually the same record)
/// plus an identity embedding.
pub struct CondItem<'a> {
    pub mask: &'a SemanticMask,
    pub style_image: &'a Tensor<f32>,
    pub style_mask: &'a SemanticMask,
    pub identity: &'a IdentityEmbedding,
}

#[derive(Clone, Debug)]
pub struct Synthesizer {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub em: MaskEmbedder,
    pub es: StyleEncoder,
    pub proj: IdProjection,
    pub gen: Generator,
    pub disc: Discriminator,
}

/// Discriminator outputs on plain tensors.
pub struct DiscOutput {
    pub logits: Vec<Tensor<f32>>,
    pub features: Vec<Vec<Tensor<f32>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: String,
    pub config: ModelConfig,
    pub iteration: u64,
    /// Digest of the conditioning face recognizer the model was trained with.
    pub train_fr_digest: String,
    /// Training-loop state (optimizer settings, loss weights, guard history).
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

impl Synthesizer {
    fn modules(config: &ModelConfig) -> Result<(MaskEmbedder, StyleEncoder, IdProjection, Generator, Discriminator)> {
        config.validate()?;
        Ok((
            MaskEmbedder::new(config.classes),
            StyleEncoder::new(config.classes, config.d_s),
            IdProjection::new(config.d_id, config.d_s),
            Generator::new(config.generator())?,
            Discriminator::new(config.classes),
        ))
    }

    pub fn new(config: ModelConfig) -> Result<Self> {
        let (em, es, proj, gen, disc) = Self::modules(&config)?;
        let mut params = ParamStore::new();
        let mut rng = rng_for(config.seed, "model-init");
        em.init(&mut params, &mut rng);
        es.init(&mut params, &mut rng);
        proj.init(&mut params, &mut rng);
        gen.init(&mut params, &mut rng);
        disc.init(&mut params, &mut rng);
        Ok(Synthesizer { config, params, em, es, proj, gen, disc })
    }

    /// Rebuild from stored parameters; every expected tensor must be present
    /// with the expected shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        let reference = Synthesizer::new(config)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::State(format!(
                        "weight `{name}` has shape {:?}, model expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::State(format!("model weights are missing `{name}`"))),
            }
        }
        let Synthesizer { config, em, es, proj, gen, disc, .. } = reference;
        let mut params = params;
        params.retain(|n| !n.starts_with("opt_"));
        Ok(Synthesizer { config, params, em, es, proj, gen, disc })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn check_mask(&self, mask: &SemanticMask) -> Result<()> {
        let r = self.config.resolution;
        if mask.classes() != self.config.classes || mask.height() != r || mask.width() != r {
            return Err(Error::Shape(format!(
                "mask is {}×{}×{}, model expects {}×{r}×{r}",
                mask.classes(),
                mask.height(),
                mask.width(),
                self.config.classes
            )));
        }
        Ok(())
    }

    pub fn prepare(&self, items: &[CondItem<'_>]) -> Result<CondBatch> {
        if items.is_empty() {
            return Err(Error::Validation("empty conditioning batch".into()));
        }
        let (c, r, d_id) = (self.config.classes, self.config.resolution, self.config.d_id);
        let mut mask_in = Vec::with_capacity(items.len() * c * MASK_INPUT * MASK_INPUT);
        let mut masks = Vec::with_capacity(items.len() * c * r * r);
        let mut ids = Vec::with_capacity(items.len() * d_id);
        for it in items {
            self.check_mask(it.mask)?;
            self.check_mask(it.style_mask)?;
            if it.identity.vector.len() != d_id {
                return Err(Error::Shape(format!(
                    "identity embedding has {} dims, model expects {d_id}",
                    it.identity.vector.len()
                )));
            }
            mask_in.extend_from_slice(MaskEmbedder::prepare(it.mask)?.data());
            masks.extend_from_slice(it.mask.channels.data());
            ids.extend_from_slice(&it.identity.vector);
        }
        let pairs: Vec<_> = items.iter().map(|it| (it.style_image, it.style_mask)).collect();
        let b = items.len();
        Ok(CondBatch {
            mask_in: Tensor::new(&[b, c, MASK_INPUT, MASK_INPUT], mask_in)?,
            style: self.es.prepare(&pairs)?,
            ids: Tensor::new(&[b, d_id], ids)?,
            masks: Tensor::new(&[b, c, r, r], masks)?,
        })
    }

    /// Tokens `[B, C+1, d_s]` and descriptor `[B, C, 16, 16]` on the tape.
    pub fn condition<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, batch: &CondBatch) -> (Var, Var) {
        let mi = g.input(batch.mask_in.cast());
        let desc = self.em.forward(g, ps, mi);
        let styles = self.es.forward(g, ps, &batch.style);
        let ids = g.input(batch.ids.cast());
        let id_tok = self.proj.forward(g, ps, ids);
        (desc, tokens_on_graph(g, styles, id_tok))
    }

    /// Full generator pass from constant inputs.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, batch: &CondBatch) -> GenVars {
        let (desc, tokens) = self.condition(g, ps, batch);
        self.gen.forward(g, ps, desc, tokens)
    }

    pub fn discriminate_graph<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, image: Var, masks: Var) -> Vec<DiscScale> {
        self.disc.forward(g, ps, image, masks)
    }

    // ---- plain-tensor inference ----

    pub fn embed_mask(&self, mask: &SemanticMask) -> Result<MaskDescriptor> {
        self.check_mask(mask)?;
        self.em.embed(&self.params, mask)
    }

    pub fn extract_styles(&self, image: &Tensor<f32>, mask: &SemanticMask) -> Result<StyleCodeSet> {
        self.check_mask(mask)?;
        self.es.extract(&self.params, image, mask)
    }

    pub fn project_identity(&self, emb: &IdentityEmbedding) -> Result<Vec<f32>> {
        self.proj.project(&self.params, emb)
    }

    pub fn tokens(&self, styles: &StyleCodeSet, emb: &IdentityEmbedding) -> Result<ConditioningTokens> {
        assemble_tokens(styles, &self.project_identity(emb)?)
    }

    pub fn generate(&self, m: &MaskDescriptor, tokens: &ConditioningTokens) -> Result<GeneratorOutput> {
        Ok(self.generate_batch(&[(m, tokens)])?.remove(0))
    }

    pub fn generate_batch(&self, items: &[(&MaskDescriptor, &ConditioningTokens)]) -> Result<Vec<GeneratorOutput>> {
        let (c, d_s) = (self.config.classes, self.config.d_s);
        for (m, t) in items {
            if m.grid.shape() != [c, DESCRIPTOR_GRID, DESCRIPTOR_GRID] {
                return Err(Error::Shape(format!("descriptor {:?} does not match {c} classes", m.grid.shape())));
            }
            if t.tokens.shape() != [c + 1, d_s] {
                return Err(Error::Shape(format!("tokens {:?}, expected [{}, {d_s}]", t.tokens.shape(), c + 1)));
            }
        }
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(16) {
            let b = chunk.len();
            let grids: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|(m, _)| m.grid.clone().reshape(&[1, c, DESCRIPTOR_GRID, DESCRIPTOR_GRID]))
                .collect::<Result<_>>()?;
            let toks: Vec<&ConditioningTokens> = chunk.iter().map(|(_, t)| *t).collect();
            let mut g = Graph::<f32>::new();
            let d = g.input(Tensor::cat0(&grids.iter().collect::<Vec<_>>())?);
            let t = g.input(stack_tokens(&toks)?);
            let vars = self.gen.forward(&mut g, &self.params, d, t);
            out.extend(unbatch(&g, &vars, b)?);
        }
        Ok(out)
    }

    /// Generate directly from a prepared batch.
    pub fn generate_prepared(&self, batch: &CondBatch) -> Result<Vec<GeneratorOutput>> {
        let mut g = Graph::<f32>::new();
        let vars = self.forward(&mut g, &self.params, batch);
        unbatch(&g, &vars, batch.len())
    }

    pub fn discriminate(&self, image: &Tensor<f32>, mask: &SemanticMask) -> Result<DiscOutput> {
        self.check_mask(mask)?;
        let r = self.config.resolution;
        if image.shape() != [3, r, r] {
            return Err(Error::Shape(format!("image {:?}, expected [3, {r}, {r}]", image.shape())));
        }
        let mut g = Graph::<f32>::new();
        let x = g.input(image.clone().reshape(&[1, 3, r, r])?);
        let m = g.input(mask.channels.clone().reshape(&[1, self.config.classes, r, r])?);
        let scales = self.disc.forward(&mut g, &self.params, x, m);
        Ok(DiscOutput {
            logits: scales.iter().map(|s| g.value(s.logits).clone()).collect(),
            features: scales.iter().map(|s| s.features.iter().map(|f| g.value(*f).clone()).collect()).collect(),
        })
    }

    /// Parameters of the generator side (everything except the discriminator).
    pub fn generator_params(&self) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for s in GENERATOR_SCOPES {
            out.extend(self.params.scope(s));
        }
        out
    }

    pub fn manifest(&self, iteration: u64, train_fr_digest: &str, training: Option<serde_json::Value>) -> ModelManifest {
        ModelManifest {
            kind: "synthesizer".into(),
            config: self.config.clone(),
            iteration,
            train_fr_digest: train_fr_digest.into(),
            training,
        }
    }

    /// Save weights plus any extra tensors (e.g. optimizer moments).
    pub fn save(&self, path: &Path, manifest: &ModelManifest, extra: Option<&ParamStore<f32>>) -> Result<String> {
        let mut all = self.params.clone();
        if let Some(e) = extra {
            all.extend(e.clone());
        }
        checkpoint::save(path, manifest, &all)
    }

    /// Load weights; returns the manifest and any extra tensors stored alongside.
    pub fn load(path: &Path) -> Result<(Self, ModelManifest, ParamStore<f32>)> {
        let (m, all): (ModelManifest, ParamStore<f32>) = checkpoint::load(path)?;
        if m.kind != "synthesizer" {
            return Err(Error::Checkpoint(format!("{} is a `{}` checkpoint, not a synthesizer", path.display(), m.kind)));
        }
        let extra = all.scope("opt_");
        let model = Synthesizer::from_params(m.config.clone(), all)?;
        Ok((model, m, extra))
    }
}

fn unbatch(g: &Graph<f32>, vars: &GenVars, b: usize) -> Result<Vec<GeneratorOutput>> {
    let img = g.value(vars.image);
    let per = img.numel() / b;
    let r = img.dim(2);
    (0..b)
        .map(|i| {
            let image = Tensor::new(&[3, r, r], img.data()[i * per..(i + 1) * per].to_vec())?;
            let attention = vars
                .attention
                .iter()
                .map(|a| {
                    let t = g.value(*a);
                    let (n, k) = (t.dim(1), t.dim(2));
                    Tensor::new(&[n, k], t.data()[i * n * k..(i + 1) * n * k].to_vec())
                })
                .collect::<Result<_>>()?;
            Ok(GeneratorOutput { image, attention })
        })
        .collect()
}
