//! The optimization loop: mixed batches, clean and perturbed branches, the
//! combined objective, momentum SGD, curriculum refresh and checkpoints.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use candle_core::{DType, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::{self, PriorScoreTable, TrainSchedule};
use crate::data_domains::{
    Domain, DomainManifest, ImageLoader, MixedBatch, MixedBatchSampler, SamplerState,
    WeatherCondition,
};
use crate::error::{Error, Result};
use crate::losses::{self, Components};
use crate::model::{ModelConfig, UdaModel};
use crate::perturbation::{self, PerturbationConfig};
use crate::rng::{self, RngState};
use crate::vlm_bridge::{
    self, EmbeddingCache, EmbeddingProvider, HashStubProvider, ProjectionEncoder,
    TextEmbeddingTable,
};

/// Rows of the component ablation, each adding one part to the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    AdversarialOnly,
    InputOffset,
    TokenOffset,
    Skd,
    Full,
}

/// Where the offset perturbation is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    None,
    Input,
    Token,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::AdversarialOnly,
        Ablation::InputOffset,
        Ablation::TokenOffset,
        Ablation::Skd,
        Ablation::Full,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::AdversarialOnly => "adversarial-only",
            Ablation::InputOffset => "input-offset",
            Ablation::TokenOffset => "token-offset",
            Ablation::Skd => "skd",
            Ablation::Full => "full",
        }
    }

    pub fn perturbation(self) -> PerturbMode {
        match self {
            Ablation::AdversarialOnly => PerturbMode::None,
            Ablation::InputOffset => PerturbMode::Input,
            _ => PerturbMode::Token,
        }
    }

    pub fn skd(self) -> bool {
        matches!(self, Ablation::Skd | Ablation::Full)
    }

    /// Difficulty-scored subset selection. The `tau` and `mu` schedules run
    /// in every row.
    pub fn curriculum(self) -> bool {
        self == Ablation::Full
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

/// Flat training configuration; field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Manifest holding both domains.
    pub manifest: Option<String>,
    /// Backbone preset: `toy` or `vit-b16`.
    pub model: String,
    pub embed_dim: usize,
    /// Teacher: `projection` or `hash`.
    pub provider: String,
    pub provider_seed: u64,
    pub prompt_template: String,
    pub embedding_cache: Option<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub lambda0: f64,
    pub growth: f64,
    pub period: usize,
    pub seed: u64,
    /// Checkpoint every this many epochs; the last epoch always checkpoints.
    pub checkpoint_every: usize,
    pub ablation: Ablation,
    /// `false` keeps the perturbed branch but applies no offset.
    pub perturbation_enabled: bool,
    /// Defaults to `[0, 4, 8]` for `vit-b16` and `[0, 1, 2]` for `toy`.
    pub alternate_blocks: Option<Vec<usize>>,
    pub classifier_dropout: f64,
    /// Gradient-reversal scale `rho` between `D` and `F`.
    pub reversal_scale: f64,
    /// Iterations over which `rho` ramps up from 0 (`0` = constant).
    pub reversal_warmup: u64,
    pub score_dump: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            model: "toy".into(),
            embed_dim: 64,
            provider: "projection".into(),
            provider_seed: 0,
            prompt_template: vlm_bridge::FULL_TEMPLATE.into(),
            embedding_cache: None,
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.002,
            momentum: 0.9,
            alpha: 0.3,
            beta: 1.0,
            gamma: 0.2,
            kappa: 0.4,
            lambda0: 0.5,
            growth: 2.0,
            period: 1000,
            seed: 0,
            checkpoint_every: 1,
            ablation: Ablation::Full,
            perturbation_enabled: true,
            alternate_blocks: None,
            classifier_dropout: 0.1,
            reversal_scale: 1.0,
            reversal_warmup: 0,
            score_dump: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies one `key=value` override; `value` is read as a TOML value,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let mut m = match self.model.as_str() {
            "toy" => ModelConfig::toy(num_classes, self.embed_dim),
            "vit-b16" => ModelConfig::vit_b16(num_classes, self.embed_dim),
            other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
        };
        m.classifier_dropout = self.classifier_dropout;
        Ok(m)
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            period: self.period,
            growth: self.growth,
            lambda0: self.lambda0,
            gamma_base: self.gamma,
            beta_base: self.beta,
        }
    }

    pub fn perturbation(&self) -> PerturbationConfig {
        let blocks = self
            .alternate_blocks
            .clone()
            .unwrap_or_else(|| match self.model.as_str() {
                "vit-b16" => vec![0, 4, 8],
                _ => vec![0, 1, 2],
            });
        PerturbationConfig {
            alternate_blocks: blocks,
            gamma: self.gamma,
            enabled: self.perturbation_enabled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be positive and momentum in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.kappa) || !(0.0..=1.0).contains(&self.lambda0) {
            return bad("kappa and lambda0 must lie in [0, 1]".into());
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.reversal_scale < 0.0 {
            return bad("alpha, beta and reversal_scale must be nonnegative".into());
        }
        self.model_config(1)?.validate()?;
        self.perturbation().validate(self.model_config(1)?.depth)
    }

    /// Component switches implied by the ablation, for the invocation record.
    pub fn resolved_flags(&self) -> serde_json::Value {
        let a = self.ablation;
        serde_json::json!({
            "adversarial": true,
            "perturbation": a.perturbation(),
            "offset_loss": a.perturbation() != PerturbMode::None,
            "skd": a.skd(),
            "curriculum": a.curriculum(),
        })
    }
}

pub fn build_provider(cfg: &TrainConfig) -> Result<Box<dyn EmbeddingProvider>> {
    match cfg.provider.as_str() {
        "projection" => Ok(Box::new(ProjectionEncoder::new(
            cfg.embed_dim,
            cfg.provider_seed,
        ))),
        "hash" => Ok(Box::new(HashStubProvider::new(
            cfg.embed_dim,
            cfg.provider_seed,
        ))),
        other => Err(Error::Config(format!(
            "unknown embedding provider `{other}`"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub iteration: u64,
    pub focal: f64,
    pub dom: f64,
    pub skd: Option<f64>,
    pub offset: Option<f64>,
    pub loss_fc: f64,
    pub mu: f64,
    pub tau: f64,
    pub lambda: f64,
    pub active: usize,
    pub block: Option<usize>,
    pub omega: Option<u8>,
    pub disc_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub active: usize,
    pub lambda: f64,
    pub tau: f64,
    pub phi: f64,
    pub mean_focal: f64,
    pub mean_dom: f64,
    pub mean_skd: Option<f64>,
    pub mean_offset: Option<f64>,
    pub disc_acc: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step(StepMetrics),
    Epoch(EpochMetrics),
}

const STATE_FORMAT: &str = "uda-train-state";

/// Everything beyond parameters needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format: String,
    pub epochs_completed: usize,
    pub iteration: u64,
    /// Active source ids of the last completed epoch.
    pub active: Vec<String>,
    pub sampler: SamplerState,
    pub perturbation_rng: RngState,
    pub omega_rng: RngState,
    pub dropout_rng: RngState,
    /// Length of the metrics log when the checkpoint was taken.
    pub metrics_bytes: u64,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub sha256: BTreeMap<String, String>,
}

fn restore_rng(state: &RngState, what: &str) -> Result<ChaCha8Rng> {
    state
        .restore()
        .ok_or_else(|| Error::invalid(format!("malformed {what} rng state")))
}

/// Running sums for an epoch record.
#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    focal: f64,
    dom: f64,
    skd: Option<f64>,
    offset: Option<f64>,
    disc_acc: f64,
}

impl EpochAccumulator {
    fn add(&mut self, m: &StepMetrics) {
        self.steps += 1;
        self.focal += m.focal;
        self.dom += m.dom;
        if let Some(v) = m.skd {
            *self.skd.get_or_insert(0.0) += v;
        }
        if let Some(v) = m.offset {
            *self.offset.get_or_insert(0.0) += v;
        }
        self.disc_acc += m.disc_acc;
    }
}

/// A run in progress.
pub struct Trainer<'m> {
    pub config: TrainConfig,
    pub model: UdaModel,
    manifest: &'m DomainManifest,
    schedule: TrainSchedule,
    perturb: PerturbationConfig,
    images: Vec<Arc<[f32]>>,
    source: Vec<usize>,
    priors: Vec<f64>,
    text: Option<TextEmbeddingTable>,
    image_emb: HashMap<usize, Vec<f32>>,
    momentum: BTreeMap<String, Tensor>,
    sampler: MixedBatchSampler,
    perturbation_rng: ChaCha8Rng,
    omega_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    epoch: usize,
    iteration: u64,
    active: Vec<usize>,
    score_dump: Option<PathBuf>,
}

impl<'m> Trainer<'m> {
    pub fn new(config: TrainConfig, manifest: &'m DomainManifest) -> Result<Self> {
        config.validate()?;
        if manifest.n_source() == 0 || manifest.n_target() == 0 {
            return Err(Error::Manifest(
                "training needs source and target records".into(),
            ));
        }
        let model_cfg = config.model_config(manifest.num_classes())?;
        let spec = model_cfg.image_spec();
        let model = UdaModel::new(model_cfg, DType::F32, &mut rng::stream(config.seed, "init"))?;
        let loader = ImageLoader::new(spec, manifest.base_dir());
        let images = manifest
            .records()
            .iter()
            .map(|r| loader.load(r.image()))
            .collect::<Result<Vec<_>>>()?;
        let source = manifest.indices(Domain::Source);

        let priors = if config.ablation.curriculum() {
            let table = PriorScoreTable::default();
            source
                .iter()
                .map(|&i| {
                    let r = manifest.record(i);
                    match (r.prior_score(), r.prior_quality(), r.weather()) {
                        (Some(s), _, _) => Ok(s),
                        (None, Some(q), Some(w)) => table.prior_score(q, w),
                        _ => Err(Error::Manifest(format!(
                            "source record {} has neither prior_score nor prior_quality",
                            r.id()
                        ))),
                    }
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let (text, image_emb) = if config.ablation.skd() {
            let provider = build_provider(&config)?;
            let cache = match &config.embedding_cache {
                Some(p) => Some(EmbeddingCache::open(
                    Path::new(p),
                    &provider.id(),
                    provider.dim(),
                )?),
                None => None,
            };
            let text = vlm_bridge::text_embedding_table(
                provider.as_ref(),
                manifest.label_space(),
                &WeatherCondition::ALL,
                &config.prompt_template,
                cache.as_ref(),
            )?;
            let mut image_emb = HashMap::new();
            for &i in &source {
                let key = format!("image:{}", manifest.record(i).id());
                let v = match cache.as_ref().and_then(|c| c.get(&key)) {
                    Some(v) => v,
                    None => {
                        let v = vlm_bridge::image_embedding(provider.as_ref(), &images[i], spec)?;
                        if let Some(c) = &cache {
                            c.insert(key, &v);
                        }
                        v
                    }
                };
                image_emb.insert(i, v.values);
            }
            if let (Some(c), Some(p)) = (&cache, &config.embedding_cache) {
                c.save(Path::new(p))?;
            }
            (Some(text), image_emb)
        } else {
            (None, HashMap::new())
        };

        let sampler = MixedBatchSampler::new(
            manifest,
            config.batch_size,
            rng::stream(config.seed, "data"),
        )?;
        Ok(Self {
            schedule: config.schedule(),
            perturb: config.perturbation(),
            perturbation_rng: rng::stream(config.seed, "perturbation"),
            omega_rng: rng::stream(config.seed, "omega"),
            dropout_rng: rng::stream(config.seed, "dropout"),
            active: source.clone(),
            config,
            model,
            manifest,
            images,
            source,
            priors,
            text,
            image_emb,
            momentum: BTreeMap::new(),
            sampler,
            epoch: 0,
            iteration: 0,
            score_dump: None,
        })
    }

    /// Continues from a checkpoint directory written by [`Trainer::save_checkpoint`].
    pub fn resume(
        config: TrainConfig,
        manifest: &'m DomainManifest,
        dir: &Path,
    ) -> Result<(Self, TrainState)> {
        let state = read_state(dir)?;
        if state.config != config {
            return Err(checkpoint_error(
                dir,
                "checkpoint was written under a different config",
            ));
        }
        let mut t = Self::new(config, manifest)?;
        let params = load_verified(dir, "model.safetensors", &state)?;
        load_exact(&t.model, &params, dir)?;
        let momentum = load_verified(dir, "optimizer.safetensors", &state)?;
        t.momentum = momentum.into_iter().collect();
        t.sampler = MixedBatchSampler::restore(manifest, t.config.batch_size, &state.sampler)?;
        t.perturbation_rng = restore_rng(&state.perturbation_rng, "perturbation")?;
        t.omega_rng = restore_rng(&state.omega_rng, "omega")?;
        t.dropout_rng = restore_rng(&state.dropout_rng, "dropout")?;
        t.epoch = state.epochs_completed;
        t.iteration = state.iteration;
        Ok((t, state))
    }

    pub fn set_score_dump(&mut self, path: Option<PathBuf>) {
        self.score_dump = path;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Record indices of the current active source subset.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    fn time(&self) -> f64 {
        self.schedule.epoch_time(self.epoch)
    }

    fn lambda_now(&self) -> f64 {
        if self.config.ablation.curriculum() {
            self.schedule.lambda(self.time())
        } else {
            1.0
        }
    }

    fn tau_now(&self) -> f64 {
        self.schedule.tau(self.time())
    }

    /// `rho * (2 / (1 + exp(-10 n / warmup)) - 1)` during warmup, then `rho`.
    fn reversal_now(&self) -> f64 {
        let rho = self.config.reversal_scale;
        let w = self.config.reversal_warmup;
        if w == 0 || self.iteration >= w {
            return rho;
        }
        let p = self.iteration as f64 / w as f64;
        rho * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
    }

    fn images_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let refs: Vec<&[f32]> = indices.iter().map(|&i| &*self.images[i]).collect();
        self.model.images_tensor(&refs)
    }

    fn rows_tensor(&self, rows: Vec<f32>, n: usize) -> Result<Tensor> {
        let d = rows.len() / n.max(1);
        Ok(Tensor::from_vec(rows, (n, d), self.model.params.device())?
            .to_dtype(self.model.dtype())?)
    }

    /// Per-sample cross-entropy over the whole source pool, without dropout.
    fn source_cross_entropy(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.source.len());
        for chunk in self.source.chunks(128) {
            let probs = self.model.predict_probs(&self.images_tensor(chunk)?)?;
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| {
                    self.manifest
                        .record(i)
                        .source_label()
                        .expect("source record")
                })
                .collect();
            let ce = losses::cross_entropy_per_sample(&probs, &labels)?;
            out.extend(ce.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    /// Recomputes the active subset for the current epoch.
    pub fn refresh_active(&mut self) -> Result<()> {
        if !self.config.ablation.curriculum() {
            self.active = self.source.clone();
            return Ok(());
        }
        let t = self.time();
        let phi = self.schedule.phi(t).clamp(0.0, 1.0);
        let ce = if phi > 0.0 {
            self.source_cross_entropy()?
        } else {
            vec![0.0; self.source.len()]
        };
        let ids: Vec<String> = self
            .source
            .iter()
            .map(|&i| self.manifest.record(i).id().to_string())
            .collect();
        let scores = curriculum::score_pool(&ids, &self.priors, &ce, phi)?;
        let selected = curriculum::select_subset(&scores, t, &self.schedule)?;
        if let Some(path) = &self.score_dump {
            curriculum::append_score_dump(path, self.epoch, &scores, &selected)?;
        }
        self.active = self
            .source
            .iter()
            .zip(&ids)
            .filter(|(_, id)| selected.contains(*id))
            .map(|(&i, _)| i)
            .collect();
        Ok(())
    }

    /// One forward/backward pass and parameter update on `batch`.
    pub fn train_step(&mut self, batch: &MixedBatch) -> Result<StepMetrics> {
        let ablation = self.config.ablation;
        let mu = self.schedule.mu(self.iteration);
        let tau = self.tau_now();
        let gamma_mu = if self.perturb.enabled {
            mu * self.perturb.gamma
        } else {
            0.0
        };
        let ns = batch.source.len();
        let nt = batch.target.len();
        if ns == 0 || nt == 0 {
            return Err(Error::invalid("mixed batch lacks a domain"));
        }
        let indices: Vec<usize> = batch.indices().collect();
        let ids = batch.ids(self.manifest);
        let labels: Vec<usize> = batch
            .source
            .iter()
            .map(|&i| {
                self.manifest
                    .record(i)
                    .source_label()
                    .expect("source record")
            })
            .collect();
        let x = self.images_tensor(&indices)?;
        let backbone = &self.model.backbone;
        let depth = backbone.depth();

        let mode = ablation.perturbation();
        let pairing = if mode != PerturbMode::None && self.perturb.enabled {
            Some(perturbation::pair_within_batch(
                indices.len(),
                &mut self.perturbation_rng,
            )?)
        } else {
            None
        };
        let mut block = None;
        let (feature, perturbed_feature) = match mode {
            PerturbMode::None => (
                backbone.forward_with_hook(&x, &mut crate::model::IdentityHook)?,
                None,
            ),
            PerturbMode::Input => {
                let clean = backbone.forward_with_hook(&x, &mut crate::model::IdentityHook)?;
                let x_tilde = match &pairing {
                    Some(p) => {
                        let idx: Vec<u32> = p.iter().map(|&j| j as u32).collect();
                        let idx = Tensor::from_vec(idx, p.len(), x.device())?;
                        perturbation::offset_tensor(&x, &x.index_select(&idx, 0)?, gamma_mu)?
                    }
                    None => x.clone(),
                };
                let pert = backbone.forward_with_hook(&x_tilde, &mut crate::model::IdentityHook)?;
                (clean, Some(pert))
            }
            PerturbMode::Token => {
                let l = if pairing.is_some() {
                    let l = perturbation::select_block(&self.perturb, &mut self.perturbation_rng)?;
                    block = Some(l);
                    l
                } else {
                    0
                };
                let s_l = backbone.run_blocks(backbone.embed(&x)?, l)?;
                let clean = backbone.readout(&backbone.run_blocks(s_l.clone(), depth)?)?;
                let s_tilde = match &pairing {
                    Some(p) => perturbation::token_offset(
                        &s_l,
                        &perturbation::partner_sequence(&s_l, p)?,
                        gamma_mu,
                    )?,
                    None => s_l,
                };
                let pert = backbone.readout(&backbone.run_blocks(s_tilde, depth)?)?;
                (clean, Some(pert))
            }
        };

        let enhanced = self.model.enhance.forward(&feature)?;
        let out = self
            .model
            .classifier
            .forward(&enhanced, Some(&mut self.dropout_rng))?;
        let focal = losses::focal_loss(&out.probs.narrow(0, 0, ns)?, &labels, tau)?;
        let dom_logits = self
            .model
            .discriminator
            .forward(&feature, Some(self.reversal_now()))?;
        let dom = losses::domain_loss_from_logits(
            &dom_logits.narrow(0, 0, ns)?,
            &dom_logits.narrow(0, ns, nt)?,
        )?;

        let skd = match &self.text {
            Some(table) => {
                let mut t_rows = Vec::with_capacity(ns * table.dim());
                let mut i_rows = Vec::with_capacity(ns * table.dim());
                for (&i, &y) in batch.source.iter().zip(&labels) {
                    let w = self.manifest.record(i).weather().expect("source weather");
                    let t = table.get(y, w).ok_or_else(|| {
                        Error::invalid(format!("no text embedding for class {y} in {w}"))
                    })?;
                    t_rows.extend_from_slice(&t.values);
                    i_rows.extend_from_slice(&self.image_emb[&i]);
                }
                let t = self.rows_tensor(t_rows, ns)?;
                let im = self.rows_tensor(i_rows, ns)?;
                Some(losses::skd_loss(&enhanced.narrow(0, 0, ns)?, &t, &im)?)
            }
            None => None,
        };

        let mut omega = None;
        let offset = match perturbed_feature {
            Some(pf) => {
                let pe = self.model.enhance.forward(&pf)?;
                let p_tilde = self
                    .model
                    .classifier
                    .forward(&pe, Some(&mut self.dropout_rng))?
                    .probs;
                let (loss, w) = losses::offset_refinement_loss(
                    &out.probs,
                    &p_tilde,
                    self.config.kappa,
                    &mut self.omega_rng,
                )?;
                omega = Some(w.as_f64() as u8);
                Some(loss)
            }
            None => None,
        };

        let objective = losses::total_objective(
            Components {
                focal: &focal,
                dom: &dom,
                skd: skd.as_ref(),
                offset: offset.as_ref(),
            },
            self.config.alpha,
            self.config.beta,
            mu,
            &ids,
        )?;
        let grads = objective.backward.backward()?;
        self.sgd_update(&grads)?;

        let pred: Vec<u32> = dom_logits.argmax(D::Minus1)?.to_vec1()?;
        let correct = pred
            .iter()
            .enumerate()
            .filter(|(i, &p)| (p == 0) == (*i < ns))
            .count();
        let metrics = StepMetrics {
            epoch: self.epoch,
            iteration: self.iteration,
            focal: objective.components.focal,
            dom: objective.components.dom,
            skd: objective.components.skd,
            offset: objective.components.offset,
            loss_fc: objective.loss_for_fc,
            mu,
            tau,
            lambda: self.lambda_now(),
            active: self.active.len(),
            block,
            omega,
            disc_acc: correct as f64 / pred.len() as f64,
        };
        self.iteration += 1;
        Ok(metrics)
    }

    fn sgd_update(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        let lr = self.config.learning_rate;
        let m = self.config.momentum;
        for (name, var) in self.model.params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let v = match self.momentum.get(name) {
                Some(prev) if m > 0.0 => (prev.affine(m, 0.0)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor() - v.affine(lr, 0.0)?)?)?;
            self.momentum.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Refreshes the active subset, runs one pass over it and advances the
    /// epoch counter. Every step record is handed to `log`.
    pub fn train_epoch(
        &mut self,
        log: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<EpochMetrics> {
        self.refresh_active()?;
        self.sampler.begin_epoch(&self.active)?;
        let mut acc = EpochAccumulator::default();
        while let Some(batch) = self.sampler.next_batch() {
            let m = self.train_step(&batch)?;
            acc.add(&m);
            log(&MetricsRecord::Step(m))?;
        }
        let n = acc.steps.max(1) as f64;
        let t = self.time();
        let em = EpochMetrics {
            epoch: self.epoch,
            steps: acc.steps,
            active: self.active.len(),
            lambda: self.lambda_now(),
            tau: self.tau_now(),
            phi: if self.config.ablation.curriculum() {
                self.schedule.phi(t)
            } else {
                0.0
            },
            mean_focal: acc.focal / n,
            mean_dom: acc.dom / n,
            mean_skd: acc.skd.map(|v| v / n),
            mean_offset: acc.offset.map(|v| v / n),
            disc_acc: acc.disc_acc / n,
        };
        log(&MetricsRecord::Epoch(em.clone()))?;
        self.epoch += 1;
        Ok(em)
    }

    /// Writes parameters, optimizer buffers and loop state under `dir`.
    pub fn save_checkpoint(&self, dir: &Path, metrics_bytes: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        let params: HashMap<String, Tensor> = self
            .model
            .params
            .vars()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&params, dir.join("model.safetensors"))?;
        let momentum: HashMap<String, Tensor> = self.momentum.clone().into_iter().collect();
        candle_core::safetensors::save(&momentum, dir.join("optimizer.safetensors"))?;
        let mut sha256 = BTreeMap::new();
        for f in ["model.safetensors", "optimizer.safetensors"] {
            sha256.insert(f.to_string(), file_digest(&dir.join(f))?);
        }
        let state = TrainState {
            format: STATE_FORMAT.into(),
            epochs_completed: self.epoch,
            iteration: self.iteration,
            active: self
                .active
                .iter()
                .map(|&i| self.manifest.record(i).id().to_string())
                .collect(),
            sampler: self.sampler.state(),
            perturbation_rng: RngState::capture(&self.perturbation_rng),
            omega_rng: RngState::capture(&self.omega_rng),
            dropout_rng: RngState::capture(&self.dropout_rng),
            metrics_bytes,
            config: self.config.clone(),
            model: self.model.config.clone(),
            sha256,
        };
        fs::write(
            dir.join("state.json"),
            serde_json::to_string_pretty(&state)?,
        )?;
        Ok(())
    }
}

fn checkpoint_error(dir: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: dir.to_path_buf(),
        message: message.into(),
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn read_state(dir: &Path) -> Result<TrainState> {
    let text = fs::read_to_string(dir.join("state.json"))
        .map_err(|e| checkpoint_error(dir, format!("cannot read state.json: {e}")))?;
    let state: TrainState = serde_json::from_str(&text)
        .map_err(|e| checkpoint_error(dir, format!("state.json is malformed: {e}")))?;
    if state.format != STATE_FORMAT {
        return Err(checkpoint_error(
            dir,
            format!("unexpected state format `{}`", state.format),
        ));
    }
    Ok(state)
}

fn load_verified(dir: &Path, file: &str, state: &TrainState) -> Result<BTreeMap<String, Tensor>> {
    let path = dir.join(file);
    let expected = state
        .sha256
        .get(file)
        .ok_or_else(|| checkpoint_error(dir, format!("no digest recorded for {file}")))?;
    let actual = file_digest(&path)
        .map_err(|e| checkpoint_error(dir, format!("cannot read {file}: {e}")))?;
    if &actual != expected {
        return Err(checkpoint_error(
            dir,
            format!("{file} does not match its recorded digest"),
        ));
    }
    let tensors = candle_core::safetensors::load(&path, &candle_core::Device::Cpu)
        .map_err(|e| checkpoint_error(dir, format!("{file} does not load: {e}")))?;
    Ok(tensors.into_iter().collect())
}

fn load_exact(model: &UdaModel, params: &BTreeMap<String, Tensor>, dir: &Path) -> Result<()> {
    let want: BTreeSet<&String> = model.params.vars().keys().collect();
    let have: BTreeSet<&String> = params.keys().collect();
    if want != have {
        return Err(checkpoint_error(
            dir,
            "checkpoint parameters do not match the architecture",
        ));
    }
    model
        .load_named(params)
        .map_err(|e| checkpoint_error(dir, format!("architecture mismatch: {e}")))?;
    Ok(())
}

/// Rebuilds the model stored in a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(UdaModel, TrainState)> {
    let state = read_state(dir)?;
    let params = load_verified(dir, "model.safetensors", &state)?;
    let model = UdaModel::new(
        state.model.clone(),
        DType::F32,
        &mut rng::stream(state.config.seed, "init"),
    )?;
    load_exact(&model, &params, dir)?;
    Ok((model, state))
}

pub struct FitOutcome {
    pub model: UdaModel,
    pub final_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub epochs: Vec<EpochMetrics>,
}

pub fn checkpoint_dir(out_dir: &Path, epochs_completed: usize) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("epoch-{epochs_completed:03}"))
}

/// Runs all epochs, writing `metrics.jsonl` and checkpoints under `out_dir`.
/// `resume` continues from a checkpoint of the same config.
pub fn fit(
    config: &TrainConfig,
    manifest: &DomainManifest,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    fs::create_dir_all(out_dir)?;
    let metrics_log = out_dir.join("metrics.jsonl");
    let (mut trainer, mut written) = match resume {
        Some(dir) => {
            let (t, state) = Trainer::resume(config.clone(), manifest, dir)?;
            let f = fs::OpenOptions::new()
                .write(true)
                .open(&metrics_log)
                .map_err(|e| {
                    checkpoint_error(dir, format!("metrics log unavailable for resume: {e}"))
                })?;
            if f.metadata()?.len() < state.metrics_bytes {
                return Err(checkpoint_error(
                    dir,
                    "metrics log is shorter than the checkpoint records",
                ));
            }
            f.set_len(state.metrics_bytes)?;
            (t, state.metrics_bytes)
        }
        None => {
            fs::File::create(&metrics_log)?;
            (Trainer::new(config.clone(), manifest)?, 0)
        }
    };
    if config.score_dump {
        let path = out_dir.join("scores.jsonl");
        if resume.is_none() {
            fs::File::create(&path)?;
        }
        trainer.set_score_dump(Some(path));
    }
    let mut log = BufWriter::new(fs::OpenOptions::new().append(true).open(&metrics_log)?);
    let mut epochs = Vec::new();
    let mut final_checkpoint = resume
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_dir(out_dir, 0));
    while trainer.epoch() < config.epochs {
        let em = trainer.train_epoch(&mut |rec| {
            let mut line = serde_json::to_string(rec)?;
            line.push('\n');
            log.write_all(line.as_bytes())?;
            written += line.len() as u64;
            Ok(())
        })?;
        epochs.push(em);
        log.flush()?;
        let done = trainer.epoch();
        let every = config.checkpoint_every;
        if done == config.epochs || (every > 0 && done % every == 0) {
            final_checkpoint = checkpoint_dir(out_dir, done);
            trainer.save_checkpoint(&final_checkpoint, written)?;
        }
    }
    Ok(FitOutcome {
        model: trainer.model,
        final_checkpoint,
        metrics_log,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 0.002);
        assert_eq!(c.batch_size, 16);
        assert_eq!((c.lambda0, c.growth, c.period), (0.5, 2.0, 1000));
        assert_eq!((c.alpha, c.beta, c.gamma, c.kappa), (0.3, 1.0, 0.2, 0.4));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let mut c =
            TrainConfig::from_toml("epochs = 3\nablation = \"skd\"\nmanifest = \"m.jsonl\"\n")
                .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.ablation, Ablation::Skd);
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        c.apply_override("learning_rate=0.01").unwrap();
        c.apply_override("ablation = adversarial-only").unwrap();
        c.apply_override("alternate_blocks=[1,2]").unwrap();
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.ablation, Ablation::AdversarialOnly);
        assert_eq!(c.alternate_blocks, Some(vec![1, 2]));
        assert!(c.apply_override("no_such_key=1").is_err());
        assert!(c.apply_override("epochs").is_err());
        assert!(TrainConfig::from_toml("epochs = \"ten\"").is_err());
    }

    #[test]
    fn ablation_switches() {
        let a = Ablation::AdversarialOnly;
        assert_eq!(
            (a.perturbation(), a.skd(), a.curriculum()),
            (PerturbMode::None, false, false)
        );
        assert_eq!(Ablation::InputOffset.perturbation(), PerturbMode::Input);
        assert!(Ablation::Skd.skd() && !Ablation::Skd.curriculum());
        assert!(Ablation::Full.skd() && Ablation::Full.curriculum());
        for a in Ablation::ALL {
            assert_eq!(a.tag().parse::<Ablation>().unwrap(), a);
        }
        let c = TrainConfig {
            ablation: Ablation::AdversarialOnly,
            ..Default::default()
        };
        let f = c.resolved_flags();
        assert_eq!(f["skd"], false);
        assert_eq!(f["offset_loss"], false);
        assert_eq!(f["curriculum"], false);
    }

    #[test]
    fn alternate_blocks_follow_preset() {
        let toy = TrainConfig::default();
        assert_eq!(toy.perturbation().alternate_blocks, vec![0, 1, 2]);
        let vit = TrainConfig {
            model: "vit-b16".into(),
            ..Default::default()
        };
        assert_eq!(vit.perturbation().alternate_blocks, vec![0, 4, 8]);
        let bad = TrainConfig {
            alternate_blocks: Some(vec![7]),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
