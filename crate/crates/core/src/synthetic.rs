//! Rendered-shape benchmark with a source/target split.
//!
//! Source images are cleanly rendered shapes on flat backgrounds, balanced
//! over classes, each degraded by one of the five weather corruptions. Target
//! images draw the shapes with a cool colour cast over striped backgrounds,
//! with milder weather plus sensor noise and a long-tailed class profile.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_domains::{write_pack, DomainManifest, ImageRef, SampleRecord, WeatherCondition};
use crate::error::{Error, Result};
use crate::rng;

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "cross", "ring"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub image_size: usize,
    /// Relative target class frequencies, head first.
    pub target_profile: Vec<f64>,
    pub target_noise: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_source: 1000,
            n_target: 1000,
            image_size: 16,
            target_profile: vec![0.40, 0.25, 0.17, 0.11, 0.07],
            target_noise: 0.06,
            seed: 0,
        }
    }
}

type Rgb = [f32; 3];

struct Canvas {
    size: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn filled(size: usize, c: Rgb) -> Self {
        Self {
            size,
            px: vec![c; size * size],
        }
    }

    fn at(&mut self, x: usize, y: usize) -> &mut Rgb {
        &mut self.px[y * self.size + x]
    }

    fn map(&mut self, mut f: impl FnMut(usize, usize, Rgb) -> Rgb) {
        let s = self.size;
        for y in 0..s {
            for x in 0..s {
                let v = self.px[y * s + x];
                self.px[y * s + x] = f(x, y, v);
            }
        }
    }

    /// Channel-major `[0, 1]` pixels.
    fn into_tensor(self) -> Vec<f32> {
        let n = self.size * self.size;
        let mut out = vec![0.0; 3 * n];
        for (i, p) in self.px.iter().enumerate() {
            for c in 0..3 {
                out[c * n + i] = p[c].clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Whether pixel `(x, y)` lies on `shape` centred at `(cx, cy)` with radius `r`.
fn covers(shape: usize, x: f32, y: f32, cx: f32, cy: f32, r: f32) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        2 => {
            // apex up, base at cy + r
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        3 => {
            let arm = r * 0.35;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        _ => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= r * 0.55
        }
    }
}

fn draw_shape(canvas: &mut Canvas, shape: usize, color: Rgb, rng: &mut ChaCha8Rng) {
    let s = canvas.size as f32;
    let r = rng.random_range(0.25 * s..0.38 * s);
    let slack = (s / 2.0 - r).max(0.0);
    let cx = s / 2.0 + rng.random_range(-slack..=slack) * 0.6;
    let cy = s / 2.0 + rng.random_range(-slack..=slack) * 0.6;
    for y in 0..canvas.size {
        for x in 0..canvas.size {
            if covers(shape, x as f32 + 0.5, y as f32 + 0.5, cx, cy, r) {
                *canvas.at(x, y) = color;
            }
        }
    }
}

fn jitter(c: Rgb, amount: f32, rng: &mut ChaCha8Rng) -> Rgb {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn add_noise(canvas: &mut Canvas, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    canvas.map(|_, _, p| p.map(|v| v + n.sample(rng) as f32));
}

/// Applies `w` at severity `s` in `[0, 1]`.
fn apply_weather(canvas: &mut Canvas, w: WeatherCondition, s: f32, rng: &mut ChaCha8Rng) {
    match w {
        WeatherCondition::Sunny => add_noise(canvas, 0.02, rng),
        WeatherCondition::Cloudy => {
            let k = 0.35 + 0.35 * s;
            canvas.map(|_, _, p| {
                let g = (p[0] + p[1] + p[2]) / 3.0;
                p.map(|v| (1.0 - k) * (0.6 * v + 0.4 * g) + k * 0.55)
            });
            add_noise(canvas, 0.03, rng);
        }
        WeatherCondition::Foggy => {
            let k = 0.4 + 0.35 * s;
            canvas.map(|_, y, p| {
                let depth = k * (0.8 + 0.2 * y as f32 / 16.0);
                p.map(|v| (1.0 - depth) * v + depth * 0.9)
            });
            add_noise(canvas, 0.03, rng);
        }
        WeatherCondition::Rainstorm => {
            let phase = rng.random_range(0..4usize);
            let dark = 0.65 - 0.2 * s;
            canvas.map(|x, y, p| {
                let streak = (x + y + phase) % 4 == 0;
                let v = p.map(|v| v * dark);
                if streak {
                    v.map(|c| c * 0.5 + 0.4)
                } else {
                    v
                }
            });
            add_noise(canvas, 0.06 + 0.06 * s as f64, rng);
        }
        WeatherCondition::SunsetNight => {
            let k = 0.55 - 0.3 * s;
            canvas.map(|_, _, p| [p[0] * k + 0.12, p[1] * k * 0.75 + 0.04, p[2] * k * 0.5]);
            add_noise(canvas, 0.04, rng);
        }
    }
}

fn weather_harshness(w: WeatherCondition) -> f32 {
    match w {
        WeatherCondition::Sunny => 0.0,
        WeatherCondition::SunsetNight => 0.3,
        WeatherCondition::Cloudy => 0.4,
        WeatherCondition::Foggy => 0.55,
        WeatherCondition::Rainstorm => 0.7,
    }
}

const FOREGROUND: [Rgb; 8] = [
    [0.9, 0.2, 0.2],
    [0.95, 0.75, 0.1],
    [0.9, 0.45, 0.1],
    [0.95, 0.95, 0.9],
    [0.3, 0.9, 0.4],
    [0.2, 0.85, 0.9],
    [0.6, 0.4, 0.95],
    [0.2, 0.5, 0.95],
];
const SOURCE_BG: [Rgb; 3] = [[0.15, 0.15, 0.2], [0.25, 0.3, 0.25], [0.2, 0.2, 0.35]];
/// Colour cast mixed into target foregrounds.
const TARGET_CAST: Rgb = [0.55, 0.7, 1.0];

/// One source image: class `shape`, weather `w`; returns pixels and an IQA proxy.
pub fn render_source(
    shape: usize,
    w: WeatherCondition,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, f64) {
    let bg = jitter(SOURCE_BG[rng.random_range(0..SOURCE_BG.len())], 0.05, rng);
    let fg = jitter(FOREGROUND[rng.random_range(0..FOREGROUND.len())], 0.05, rng);
    let mut c = Canvas::filled(size, bg);
    draw_shape(&mut c, shape, fg, rng);
    let s: f32 = rng.random();
    apply_weather(&mut c, w, s, rng);
    let quality = 1.0 - weather_harshness(w) * (0.5 + 0.5 * s) + rng.random_range(-0.05..0.05);
    (c.into_tensor(), (quality as f64).clamp(0.0, 1.0))
}

/// One target image: shifted palette, striped background and noise.
pub fn render_target(
    shape: usize,
    w: WeatherCondition,
    size: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let base: Rgb = [
        rng.random_range(0.2..0.4),
        rng.random_range(0.18..0.36),
        rng.random_range(0.15..0.32),
    ];
    let period = rng.random_range(3..6usize);
    let vertical = rng.random_bool(0.5);
    let mut c = Canvas::filled(size, base);
    c.map(|x, y, p| {
        let k = if vertical { x } else { y };
        if (k / period) % 2 == 0 {
            p.map(|v| v * 0.85)
        } else {
            p
        }
    });
    let base_fg = FOREGROUND[rng.random_range(0..FOREGROUND.len())];
    let fg = jitter(
        [0, 1, 2].map(|i| 0.7 * base_fg[i] + 0.3 * TARGET_CAST[i]),
        0.08,
        rng,
    );
    draw_shape(&mut c, shape, fg, rng);
    let s: f32 = rng.random_range(0.2..0.7);
    apply_weather(&mut c, w, s, rng);
    add_noise(&mut c, noise, rng);
    c.into_tensor()
}

fn long_tail_counts(n: usize, profile: &[f64]) -> Vec<usize> {
    let total: f64 = profile.iter().sum();
    let mut counts: Vec<usize> = profile
        .iter()
        .map(|p| (p / total * n as f64).floor() as usize)
        .collect();
    let k = counts.len();
    let mut i = 0;
    while counts.iter().sum::<usize>() < n {
        counts[i % k] += 1;
        i += 1;
    }
    counts
}

/// Builds the benchmark in `dir`: `toy.pack` and `manifest.jsonl` (both
/// domains). Returns the manifest path.
pub fn write_toy_benchmark(dir: &Path, cfg: &ToyConfig) -> Result<PathBuf> {
    if cfg.target_profile.len() != SHAPES.len() {
        return Err(Error::Config(format!(
            "target_profile needs {} entries",
            SHAPES.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut rng = rng::stream(cfg.seed, "data");
    let mut images = Vec::with_capacity(cfg.n_source + cfg.n_target);
    let mut records = Vec::with_capacity(cfg.n_source + cfg.n_target);
    let pack = PathBuf::from("toy.pack");

    for i in 0..cfg.n_source {
        let shape = i % SHAPES.len();
        let w = WeatherCondition::ALL[(i / SHAPES.len()) % WeatherCondition::ALL.len()];
        let (px, q) = render_source(shape, w, cfg.image_size, &mut rng);
        let image = ImageRef::Packed {
            pack: pack.clone(),
            index: images.len(),
        };
        images.push(px);
        records.push(SampleRecord::source(
            format!("s{i:05}"),
            image,
            shape,
            w,
            Some(q),
        ));
    }
    let counts = long_tail_counts(cfg.n_target, &cfg.target_profile);
    let mut j = 0;
    for (shape, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let w = WeatherCondition::ALL[rng.random_range(0..WeatherCondition::ALL.len())];
            let px = render_target(shape, w, cfg.image_size, cfg.target_noise, &mut rng);
            let image = ImageRef::Packed {
                pack: pack.clone(),
                index: images.len(),
            };
            images.push(px);
            records.push(SampleRecord::target(
                format!("t{j:05}"),
                image,
                Some(shape),
                Some(w),
            ));
            j += 1;
        }
    }
    write_pack(
        &dir.join(&pack),
        [3, cfg.image_size, cfg.image_size],
        &images,
    )?;
    let manifest =
        DomainManifest::from_records(SHAPES.iter().map(|s| s.to_string()).collect(), records)?;
    let path = dir.join("manifest.jsonl");
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_domains::{class_histogram, load_manifest, Domain, ImageLoader, ImageSpec};
    use rand::SeedableRng;

    #[test]
    fn shapes_are_distinct_masks() {
        let mut masks = Vec::new();
        for shape in 0..5 {
            let m: Vec<bool> = (0..256)
                .map(|i| {
                    covers(
                        shape,
                        (i % 16) as f32 + 0.5,
                        (i / 16) as f32 + 0.5,
                        8.0,
                        8.0,
                        5.5,
                    )
                })
                .collect();
            assert!(m.iter().any(|&b| b));
            masks.push(m);
        }
        for a in 0..5 {
            for b in a + 1..5 {
                assert_ne!(masks[a], masks[b], "shapes {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn renders_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for w in WeatherCondition::ALL {
            let (px, q) = render_source(2, w, 16, &mut rng);
            assert_eq!(px.len(), 3 * 16 * 16);
            assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((0.0..=1.0).contains(&q));
            let t = render_target(2, w, 16, 0.1, &mut rng);
            assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn long_tail_counts_sum() {
        let c = long_tail_counts(1000, &[0.40, 0.25, 0.17, 0.11, 0.07]);
        assert_eq!(c.iter().sum::<usize>(), 1000);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn benchmark_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            n_source: 50,
            n_target: 40,
            ..Default::default()
        };
        let path = write_toy_benchmark(dir.path(), &cfg).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!((m.n_source(), m.n_target()), (50, 40));
        let h = class_histogram(&m, Domain::Source);
        assert!(h.counts.iter().all(|&c| c == 10));
        let loader = ImageLoader::new(ImageSpec::square(3, 16), m.base_dir());
        let a = loader.load(m.record(0).image()).unwrap();
        assert_eq!(a.len(), 768);
        let again = write_toy_benchmark(dir.path(), &cfg).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(again).unwrap());
    }
}
