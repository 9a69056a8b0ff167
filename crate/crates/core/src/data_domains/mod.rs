//! Source/target manifests, image references and mixed-domain batch sampling.

mod images;
mod manifest;
mod sampler;

pub use images::{read_pack, write_pack, ImageLoader, ImageRef, ImageSpec};
pub use manifest::{class_histogram, load_manifest, ClassHistogram, DomainManifest};
pub use sampler::{sample_mixed_batch, MixedBatch, MixedBatchSampler, SamplerState};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Weather and illumination condition of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherCondition {
    Sunny,
    Cloudy,
    Foggy,
    Rainstorm,
    SunsetNight,
}

impl WeatherCondition {
    pub const ALL: [WeatherCondition; 5] = [
        WeatherCondition::Sunny,
        WeatherCondition::Cloudy,
        WeatherCondition::Foggy,
        WeatherCondition::Rainstorm,
        WeatherCondition::SunsetNight,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            WeatherCondition::Sunny => "sunny",
            WeatherCondition::Cloudy => "cloudy",
            WeatherCondition::Foggy => "foggy",
            WeatherCondition::Rainstorm => "rainstorm",
            WeatherCondition::SunsetNight => "sunset_night",
        }
    }

    /// Human-readable phrase used inside text prompts.
    pub fn phrase(self) -> &'static str {
        match self {
            WeatherCondition::SunsetNight => "sunset and night",
            other => other.tag(),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for WeatherCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for WeatherCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WeatherCondition::ALL
            .into_iter()
            .find(|w| w.tag() == s)
            .ok_or_else(|| Error::UnknownWeather(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Manifest(format!("unknown domain {other:?}"))),
        }
    }
}

/// Capability token for reading target-domain labels.
///
/// Only evaluation code can obtain one, so training code has no path to
/// target labels.
#[derive(Debug)]
pub struct EvaluationAccess(());

impl EvaluationAccess {
    pub(crate) fn grant() -> Self {
        EvaluationAccess(())
    }
}

/// One image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    id: String,
    image: ImageRef,
    class_label: Option<usize>,
    weather: Option<WeatherCondition>,
    prior_quality: Option<f64>,
    prior_score: Option<f64>,
    domain: Domain,
}

impl SampleRecord {
    pub fn source(
        id: impl Into<String>,
        image: ImageRef,
        class_label: usize,
        weather: WeatherCondition,
        prior_quality: Option<f64>,
    ) -> Self {
        Self {
            id: id.into(),
            image,
            class_label: Some(class_label),
            weather: Some(weather),
            prior_quality,
            prior_score: None,
            domain: Domain::Source,
        }
    }

    /// A target record; `evaluation_label` is only readable by evaluation code.
    pub fn target(
        id: impl Into<String>,
        image: ImageRef,
        evaluation_label: Option<usize>,
        weather: Option<WeatherCondition>,
    ) -> Self {
        Self {
            id: id.into(),
            image,
            class_label: evaluation_label,
            weather,
            prior_quality: None,
            prior_score: None,
            domain: Domain::Target,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image(&self) -> &ImageRef {
        &self.image
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn weather(&self) -> Option<WeatherCondition> {
        self.weather
    }

    pub fn prior_quality(&self) -> Option<f64> {
        self.prior_quality
    }

    /// Weather-weighted prior score, when populated by `score-prior`.
    pub fn prior_score(&self) -> Option<f64> {
        self.prior_score
    }

    /// Class label usable for training: `None` for target records.
    pub fn source_label(&self) -> Option<usize> {
        match self.domain {
            Domain::Source => self.class_label,
            Domain::Target => None,
        }
    }

    pub fn evaluation_label(&self, _access: &EvaluationAccess) -> Option<usize> {
        self.class_label
    }

    pub fn with_prior_quality(mut self, quality: Option<f64>) -> Self {
        self.prior_quality = quality;
        self
    }

    pub fn with_prior_score(mut self, score: Option<f64>) -> Self {
        self.prior_score = score;
        self
    }

    pub(crate) fn with_image(mut self, image: ImageRef) -> Self {
        self.image = image;
        self
    }

    pub(crate) fn raw_label(&self) -> Option<usize> {
        self.class_label
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weather_parses_closed_set() {
        for w in WeatherCondition::ALL {
            assert_eq!(w.tag().parse::<WeatherCondition>().unwrap(), w);
        }
        assert!(matches!(
            "snowy".parse::<WeatherCondition>(),
            Err(Error::UnknownWeather(s)) if s == "snowy"
        ));
        assert!("Sunny".parse::<WeatherCondition>().is_err());
    }

    #[test]
    fn sunset_night_reads_as_phrase() {
        assert_eq!(WeatherCondition::SunsetNight.phrase(), "sunset and night");
        assert_eq!(WeatherCondition::Foggy.phrase(), "foggy");
    }

    #[test]
    fn target_labels_hidden_from_training_accessor() {
        let r = SampleRecord::target("t0", ImageRef::File("a.png".into()), Some(3), None);
        assert_eq!(r.source_label(), None);
        assert_eq!(r.evaluation_label(&EvaluationAccess::grant()), Some(3));
    }
}
