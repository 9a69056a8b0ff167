//! Target-domain accuracy: overall, per class, per weather, plus side-by-side
//! comparison of several runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_domains::{
    Domain, DomainManifest, EvaluationAccess, ImageLoader, WeatherCondition,
};
use crate::error::{Error, Result};
use crate::model::UdaModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAccuracy {
    pub name: String,
    pub correct: usize,
    pub total: usize,
    /// `None` for an empty bucket.
    pub accuracy: Option<f64>,
}

impl BucketAccuracy {
    fn new(name: &str, correct: usize, total: usize) -> Self {
        Self {
            name: name.to_string(),
            correct,
            total,
            accuracy: (total > 0).then(|| correct as f64 / total as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub label_space: Vec<String>,
    /// Micro accuracy: correct / total.
    pub overall_acc: f64,
    /// Mean of per-class accuracies over classes present in the evaluation set.
    pub macro_acc: f64,
    pub per_class: Vec<BucketAccuracy>,
    pub per_weather: Vec<BucketAccuracy>,
    /// Records without a weather tag (not in any weather bucket).
    pub untagged: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_eval: usize,
}

/// One evaluated record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub label: usize,
    pub predicted: usize,
    pub weather: Option<WeatherCondition>,
}

impl EvalResult {
    pub fn from_predictions(label_space: &[String], preds: &[Prediction]) -> Result<Self> {
        let k = label_space.len();
        if preds.is_empty() {
            return Err(Error::invalid("nothing to evaluate"));
        }
        let mut confusion = vec![vec![0usize; k]; k];
        let mut weather = [(0usize, 0usize); 5];
        let mut untagged = 0;
        for p in preds {
            if p.label >= k || p.predicted >= k {
                return Err(Error::invalid(format!("class index outside [0, {k})")));
            }
            confusion[p.label][p.predicted] += 1;
            match p.weather {
                Some(w) => {
                    let b = &mut weather[w.index()];
                    b.1 += 1;
                    b.0 += usize::from(p.label == p.predicted);
                }
                None => untagged += 1,
            }
        }
        let n = preds.len();
        let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
        let per_class: Vec<BucketAccuracy> = (0..k)
            .map(|c| {
                BucketAccuracy::new(&label_space[c], confusion[c][c], confusion[c].iter().sum())
            })
            .collect();
        let present: Vec<f64> = per_class.iter().filter_map(|b| b.accuracy).collect();
        let per_weather = WeatherCondition::ALL
            .iter()
            .map(|w| {
                let (c, t) = weather[w.index()];
                BucketAccuracy::new(w.tag(), c, t)
            })
            .collect();
        Ok(Self {
            label_space: label_space.to_vec(),
            overall_acc: trace as f64 / n as f64,
            macro_acc: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
            per_weather,
            untagged,
            confusion,
            n_eval: n,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Evaluates `model` on the target records of `manifest` through the
/// deterministic inference path.
pub fn evaluate(model: &UdaModel, manifest: &DomainManifest) -> Result<EvalResult> {
    let access = EvaluationAccess::grant();
    let targets = manifest.indices(Domain::Target);
    if targets.is_empty() {
        return Err(Error::Manifest("no target records to evaluate".into()));
    }
    if manifest.num_classes() != model.config.num_classes {
        return Err(Error::DimensionMismatch {
            what: "label space",
            expected: model.config.num_classes,
            got: manifest.num_classes(),
        });
    }
    let loader = ImageLoader::new(model.config.image_spec(), manifest.base_dir());
    let mut preds = Vec::with_capacity(targets.len());
    for chunk in targets.chunks(128) {
        let mut images = Vec::with_capacity(chunk.len());
        let mut meta = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let r = manifest.record(i);
            let label = r.evaluation_label(&access).ok_or_else(|| {
                Error::Manifest(format!("target record {} has no evaluation label", r.id()))
            })?;
            images.push(loader.load(r.image())?);
            meta.push((label, r.weather()));
        }
        let refs: Vec<&[f32]> = images.iter().map(|a| &**a).collect();
        for (predicted, (label, weather)) in model.predict(&refs)?.into_iter().zip(meta) {
            preds.push(Prediction {
                label,
                predicted,
                weather,
            });
        }
    }
    EvalResult::from_predictions(manifest.label_space(), &preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// `overall`, `macro`, `class` or `weather`.
    pub block: String,
    pub key: String,
    pub values: Vec<Option<f64>>,
    /// `value - first run's value`, starting with the second run.
    pub deltas: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

pub fn compare_runs(results: &[(String, EvalResult)]) -> Result<Comparison> {
    let Some((_, first)) = results.first() else {
        return Err(Error::invalid("no results to compare"));
    };
    if let Some((name, _)) = results
        .iter()
        .find(|(_, r)| r.label_space != first.label_space)
    {
        return Err(Error::invalid(format!(
            "run `{name}` has a different label space"
        )));
    }
    let mut rows = Vec::new();
    let mut push = |block: &str, key: &str, values: Vec<Option<f64>>| {
        let deltas = values[1..]
            .iter()
            .map(|v| match (v, values[0]) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            })
            .collect();
        rows.push(ComparisonRow {
            block: block.into(),
            key: key.into(),
            values,
            deltas,
        });
    };
    push(
        "overall",
        "micro",
        results.iter().map(|(_, r)| Some(r.overall_acc)).collect(),
    );
    push(
        "macro",
        "macro",
        results.iter().map(|(_, r)| Some(r.macro_acc)).collect(),
    );
    for (c, name) in first.label_space.iter().enumerate() {
        push(
            "class",
            name,
            results
                .iter()
                .map(|(_, r)| r.per_class[c].accuracy)
                .collect(),
        );
    }
    for (w, weather) in WeatherCondition::ALL.iter().enumerate() {
        push(
            "weather",
            weather.tag(),
            results
                .iter()
                .map(|(_, r)| r.per_weather[w].accuracy)
                .collect(),
        );
    }
    Ok(Comparison {
        runs: results.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl Comparison {
    /// Plot-ready columns: `block,key,<runs...>,delta_<runs[1..]>...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,key");
        for r in &self.runs {
            write!(out, ",{r}").unwrap();
        }
        for r in self.runs.iter().skip(1) {
            write!(out, ",delta_{r}").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{},{}", row.block, row.key).unwrap();
            for v in row.values.iter().chain(&row.deltas) {
                write!(out, ",{}", cell(*v)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}
