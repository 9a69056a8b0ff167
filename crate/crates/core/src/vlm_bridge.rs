//! Frozen vision-language teacher: prompt construction, embedding providers
//! and an on-disk embedding cache.
//!
//! Providers are frozen by contract: the same input yields a bitwise-equal
//! vector for the lifetime of the process. The trainer only ever reads
//! their outputs, so no gradient can reach them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_domains::{ImageSpec, WeatherCondition};
use crate::error::{Error, Result};

pub const FULL_TEMPLATE: &str = "A photo of a {class} in {domain}";
pub const CLASS_TEMPLATE: &str = "A photo of a {class}";

const NORM_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f32 {
        self.values.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    /// Scales to unit length. A zero vector stays zero and unnormalized.
    pub fn normalize(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= n);
            self.normalized = true;
        }
        self
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f32 {
        let dot: f32 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        dot / (self.norm() * other.norm()).max(1e-8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub template: String,
    pub class_name: String,
    pub domain_name: String,
}

impl PromptSpec {
    pub fn new(template: &str, class_name: &str, weather: WeatherCondition) -> Self {
        Self {
            template: template.to_string(),
            class_name: class_name.to_string(),
            domain_name: weather.phrase().to_string(),
        }
    }
}

/// Substitutes `{class}` and `{domain}` in the template.
pub fn render_prompt(spec: &PromptSpec) -> Result<String> {
    let t = &spec.template;
    let mut out = String::with_capacity(t.len() + 16);
    let mut rest = t.as_str();
    let mut slots = 0;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::invalid(format!("unclosed slot in template {t:?}")))?;
        let value = match &after[..close] {
            "class" => &spec.class_name,
            "domain" => &spec.domain_name,
            other => {
                return Err(Error::invalid(format!(
                    "unknown slot {{{other}}} in template {t:?}"
                )))
            }
        };
        if value.is_empty() {
            return Err(Error::invalid(format!(
                "slot {{{}}} of {t:?} has an empty value",
                &after[..close]
            )));
        }
        out.push_str(value);
        slots += 1;
        rest = &after[close + 1..];
    }
    if rest.contains('}') {
        return Err(Error::invalid(format!("stray '}}' in template {t:?}")));
    }
    if slots == 0 {
        return Err(Error::invalid(format!("template {t:?} declares no slot")));
    }
    out.push_str(rest);
    Ok(out)
}

/// Frozen text and image encoders sharing one embedding space.
pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the provider and its weights; a change invalidates caches.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVector>;
    fn embed_image(&self, pixels: &[f32], spec: ImageSpec) -> Result<EmbeddingVector>;
}

fn hash_seed(domain: &str, bytes: &[u8], seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update(bytes);
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("32-byte digest"))
}

fn gaussian_unit(seed: u64, dim: usize) -> EmbeddingVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    EmbeddingVector {
        values,
        normalized: false,
    }
    .normalize()
}

/// Deterministic stand-in teacher: every distinct input maps to a seeded
/// random unit vector derived from its hash.
#[derive(Debug, Clone)]
pub struct HashStubProvider {
    dim: usize,
    seed: u64,
}

impl HashStubProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl EmbeddingProvider for HashStubProvider {
    fn id(&self) -> String {
        format!("hash-stub/d{}/s{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        Ok(gaussian_unit(
            hash_seed("text", prompt.as_bytes(), self.seed),
            self.dim,
        ))
    }

    fn embed_image(&self, pixels: &[f32], _spec: ImageSpec) -> Result<EmbeddingVector> {
        let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
        Ok(gaussian_unit(
            hash_seed("image", &bytes, self.seed),
            self.dim,
        ))
    }
}

/// Small frozen encoder pair.
///
/// Text: bag of hashed word vectors, so prompts sharing a class word or a
/// weather phrase land near each other. Image: a pooled, standardized
/// silhouette (colour distance from the border) through a fixed Gaussian
/// projection, which makes the embedding insensitive to palette, brightness
/// and contrast shifts.
#[derive(Debug, Clone)]
pub struct ProjectionEncoder {
    dim: usize,
    seed: u64,
    pool: usize,
    stopwords: Vec<String>,
}

impl ProjectionEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            pool: 2,
            stopwords: ["a", "an", "the", "photo", "of", "in", "and"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }

    /// Distance of each pixel's colour from the mean border colour, average
    /// pooled and standardized: a background-relative silhouette.
    fn pooled(&self, pixels: &[f32], spec: ImageSpec) -> Vec<f32> {
        let (c, h, w) = (spec.channels, spec.height, spec.width);
        let at = |ch: usize, y: usize, x: usize| pixels[ch * h * w + y * w + x];
        let mut border = vec![0f32; c];
        let mut n_border = 0.0;
        for y in 0..h {
            for x in 0..w {
                if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                    border
                        .iter_mut()
                        .enumerate()
                        .for_each(|(ch, b)| *b += at(ch, y, x));
                    n_border += 1.0;
                }
            }
        }
        border.iter_mut().for_each(|b| *b /= n_border);
        let p = self.pool;
        let (ph, pw) = (h / p, w / p);
        let mut out = Vec::with_capacity(ph * pw);
        for y in 0..ph {
            for x in 0..pw {
                let mut s = 0.0;
                for dy in 0..p {
                    for dx in 0..p {
                        let d2: f32 = (0..c)
                            .map(|ch| (at(ch, y * p + dy, x * p + dx) - border[ch]).powi(2))
                            .sum();
                        s += d2.sqrt();
                    }
                }
                out.push(s / (p * p) as f32);
            }
        }
        let mean = out.iter().sum::<f32>() / out.len() as f32;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / out.len() as f32;
        let std = var.sqrt().max(1e-6);
        out.iter_mut().for_each(|v| *v = (*v - mean) / std);
        out
    }
}

impl EmbeddingProvider for ProjectionEncoder {
    fn id(&self) -> String {
        format!(
            "silhouette-encoder/d{}/s{}/p{}",
            self.dim, self.seed, self.pool
        )
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        let mut acc = vec![0f32; self.dim];
        let mut words = 0;
        for word in prompt.split_whitespace().map(str::to_lowercase) {
            if self.stopwords.contains(&word) {
                continue;
            }
            let v = gaussian_unit(hash_seed("word", word.as_bytes(), self.seed), self.dim);
            acc.iter_mut().zip(&v.values).for_each(|(a, b)| *a += b);
            words += 1;
        }
        if words == 0 {
            return Err(Error::Provider {
                input: prompt.to_string(),
                message: "prompt has no content words".into(),
            });
        }
        Ok(EmbeddingVector {
            values: acc,
            normalized: false,
        }
        .normalize())
    }

    fn embed_image(&self, pixels: &[f32], spec: ImageSpec) -> Result<EmbeddingVector> {
        if pixels.len() != spec.numel() {
            return Err(Error::DimensionMismatch {
                what: "encoder input",
                expected: spec.numel(),
                got: pixels.len(),
            });
        }
        let feats = self.pooled(pixels, spec);
        // Projection rows are regenerated from the seed; they never change.
        let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(
            "projection",
            &(feats.len() as u64).to_le_bytes(),
            self.seed,
        ));
        let mut out = vec![0f32; self.dim];
        for o in out.iter_mut() {
            let mut s = 0.0f32;
            for f in &feats {
                let w: f32 = StandardNormal.sample(&mut rng);
                s += w * f;
            }
            *o = s;
        }
        Ok(EmbeddingVector {
            values: out,
            normalized: false,
        }
        .normalize())
    }
}

/// Image embedding with the dimension and normalization contract enforced.
pub fn image_embedding(
    provider: &dyn EmbeddingProvider,
    pixels: &[f32],
    spec: ImageSpec,
) -> Result<EmbeddingVector> {
    let v = provider.embed_image(pixels, spec)?;
    if v.dim() != provider.dim() {
        return Err(Error::DimensionMismatch {
            what: "image embedding",
            expected: provider.dim(),
            got: v.dim(),
        });
    }
    let v = if v.normalized { v } else { v.normalize() };
    debug_assert!(!v.normalized || (v.norm() - 1.0).abs() <= NORM_TOLERANCE);
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    provider: String,
    dim: usize,
    normalized: bool,
}

const CACHE_FORMAT: &str = "uda-embedding-cache";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    vector: Vec<f32>,
}

/// Key to vector cache tied to one provider identity.
///
/// Concurrent readers share the map; inserts take the write lock.
pub struct EmbeddingCache {
    header: CacheHeader,
    entries: RwLock<BTreeMap<String, Vec<f32>>>,
}

impl EmbeddingCache {
    pub fn new(provider_id: &str, dim: usize) -> Self {
        Self {
            header: CacheHeader {
                format: CACHE_FORMAT.into(),
                version: CACHE_VERSION,
                provider: provider_id.into(),
                dim,
                normalized: true,
            },
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    /// Loads `path` if it exists and was written for the same provider,
    /// otherwise starts empty.
    pub fn open(path: &Path, provider_id: &str, dim: usize) -> Result<Self> {
        let cache = Self::new(provider_id, dim);
        if !path.exists() {
            return Ok(cache);
        }
        let mut lines = BufReader::new(fs::File::open(path)?).lines();
        let header: Option<CacheHeader> = match lines.next() {
            Some(line) => serde_json::from_str(&line?).ok(),
            None => None,
        };
        if header.as_ref() != Some(&cache.header) {
            return Ok(cache);
        }
        {
            let mut entries = cache.entries.write().expect("cache lock poisoned");
            for line in lines {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line)?;
                if rec.vector.len() != dim {
                    return Err(Error::DimensionMismatch {
                        what: "cached embedding",
                        expected: dim,
                        got: rec.vector.len(),
                    });
                }
                entries.insert(rec.key, rec.vector);
            }
        }
        Ok(cache)
    }

    pub fn get(&self, key: &str) -> Option<EmbeddingVector> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(key)
            .map(|v| EmbeddingVector {
                values: v.clone(),
                normalized: true,
            })
    }

    pub fn insert(&self, key: String, v: &EmbeddingVector) {
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert(key, v.values.clone());
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for (key, vector) in self.entries.read().expect("cache lock poisoned").iter() {
            serde_json::to_writer(
                &mut w,
                &CacheRecord {
                    key: key.clone(),
                    vector: vector.clone(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Text embedding `T_(class, weather)` for every declared pair.
#[derive(Debug, Clone)]
pub struct TextEmbeddingTable {
    entries: BTreeMap<(usize, WeatherCondition), EmbeddingVector>,
    dim: usize,
}

impl TextEmbeddingTable {
    pub fn get(&self, class: usize, weather: WeatherCondition) -> Option<&EmbeddingVector> {
        self.entries.get(&(class, weather))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, WeatherCondition), &EmbeddingVector)> {
        self.entries.iter()
    }
}

/// Embeds the rendered prompt for every `(class, weather)` pair, consulting
/// the cache first and recording fresh vectors into it.
pub fn text_embedding_table(
    provider: &dyn EmbeddingProvider,
    label_space: &[String],
    weather_tags: &[WeatherCondition],
    template: &str,
    cache: Option<&EmbeddingCache>,
) -> Result<TextEmbeddingTable> {
    let mut entries = BTreeMap::new();
    for (c, name) in label_space.iter().enumerate() {
        for &w in weather_tags {
            let prompt = render_prompt(&PromptSpec::new(template, name, w))?;
            let key = format!("text:{prompt}");
            let v = match cache.and_then(|c| c.get(&key)) {
                Some(v) => v,
                None => {
                    let v = provider.embed_text(&prompt).map_err(|e| match e {
                        Error::Provider { .. } => e,
                        other => Error::Provider {
                            input: prompt.clone(),
                            message: other.to_string(),
                        },
                    })?;
                    if v.dim() != provider.dim() {
                        return Err(Error::DimensionMismatch {
                            what: "text embedding",
                            expected: provider.dim(),
                            got: v.dim(),
                        });
                    }
                    let v = if v.normalized { v } else { v.normalize() };
                    if let Some(cache) = cache {
                        cache.insert(key, &v);
                    }
                    v
                }
            };
            entries.insert((c, w), v);
        }
    }
    Ok(TextEmbeddingTable {
        entries,
        dim: provider.dim(),
    })
}
