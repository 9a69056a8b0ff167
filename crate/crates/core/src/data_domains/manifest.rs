use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Map, Value};

use super::{Domain, ImageRef, SampleRecord, WeatherCondition};
use crate::error::{Error, Result};

/// Validated set of source and target records over a shared label space.
///
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct DomainManifest {
    records: Vec<SampleRecord>,
    label_space: Vec<String>,
    base_dir: PathBuf,
    n_source: usize,
    n_target: usize,
    by_id: HashMap<String, usize>,
}

impl DomainManifest {
    pub fn from_records(label_space: Vec<String>, records: Vec<SampleRecord>) -> Result<Self> {
        if label_space.is_empty() {
            return Err(Error::Manifest("label_space is empty".into()));
        }
        let k = label_space.len();
        let mut by_id = HashMap::with_capacity(records.len());
        let (mut n_source, mut n_target) = (0, 0);
        for (row, r) in records.iter().enumerate() {
            let bad = |field, message: &str| Error::ManifestRow {
                row,
                field,
                message: message.to_string(),
            };
            if by_id.insert(r.id.clone(), row).is_some() {
                return Err(bad("id", "duplicate id"));
            }
            if let Some(c) = r.class_label {
                if c >= k {
                    return Err(bad("class", "class index outside label_space"));
                }
            }
            if let Some(q) = r.prior_quality {
                if !(0.0..=1.0).contains(&q) {
                    return Err(bad("prior_quality", "must lie in [0, 1]"));
                }
            }
            if let Some(s) = r.prior_score {
                if !(0.0..=1.0).contains(&s) {
                    return Err(bad("prior_score", "must lie in [0, 1]"));
                }
            }
            match r.domain {
                Domain::Source => {
                    if r.class_label.is_none() {
                        return Err(bad("class", "source record requires class"));
                    }
                    if r.weather.is_none() {
                        return Err(bad("weather", "source record requires weather"));
                    }
                    n_source += 1;
                }
                Domain::Target => n_target += 1,
            }
        }
        Ok(Self {
            records,
            label_space,
            base_dir: PathBuf::from("."),
            n_source,
            n_target,
            by_id,
        })
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    /// Directory that relative image references resolve against.
    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &SampleRecord {
        &self.records[index]
    }

    pub fn label_space(&self) -> &[String] {
        &self.label_space
    }

    pub fn num_classes(&self) -> usize {
        self.label_space.len()
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn indices(&self, domain: Domain) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }

    /// Manifest restricted to one domain, same label space.
    pub fn subset(&self, domain: Domain) -> DomainManifest {
        let records = self
            .records
            .iter()
            .filter(|r| r.domain == domain)
            .cloned()
            .collect();
        DomainManifest::from_records(self.label_space.clone(), records)
            .expect("subset of a valid manifest is valid")
            .with_base_dir(self.base_dir.clone())
    }

    /// Combines two manifests over the same label space.
    pub fn merge(&self, other: &DomainManifest) -> Result<DomainManifest> {
        if self.label_space != other.label_space {
            return Err(Error::Manifest(
                "cannot merge manifests with different label spaces".into(),
            ));
        }
        let records = self.records.iter().chain(&other.records).cloned().collect();
        Ok(
            DomainManifest::from_records(self.label_space.clone(), records)?
                .with_base_dir(self.base_dir.clone()),
        )
    }

    /// Same records with relative image paths resolved against the base
    /// directory, so the manifest can be written anywhere.
    pub fn absolutized(&self) -> Result<DomainManifest> {
        let base = std::path::absolute(&self.base_dir)?;
        let fix = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            }
        };
        self.map_records(|r| {
            let image = match r.image() {
                ImageRef::File(p) => ImageRef::File(fix(p)),
                ImageRef::Packed { pack, index } => ImageRef::Packed {
                    pack: fix(pack),
                    index: *index,
                },
                other => other.clone(),
            };
            r.with_image(image)
        })
    }

    pub fn map_records(
        &self,
        f: impl FnMut(SampleRecord) -> SampleRecord,
    ) -> Result<DomainManifest> {
        let records = self.records.iter().cloned().map(f).collect();
        Ok(
            DomainManifest::from_records(self.label_space.clone(), records)?
                .with_base_dir(self.base_dir.clone()),
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::Manifest("missing header line".into()))?;
        let header: Value = serde_json::from_str(header)
            .map_err(|e| Error::Manifest(format!("header does not parse: {e}")))?;
        let label_space: Vec<String> = header
            .get("label_space")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Manifest("header lacks `label_space`".into()))?
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::Manifest("label_space entries must be strings".into()))
            })
            .collect::<Result<_>>()?;
        let mut tags: Vec<WeatherCondition> = header
            .get("weather_tags")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Manifest("header lacks `weather_tags`".into()))?
            .iter()
            .map(|v| v.as_str().unwrap_or_default().parse())
            .collect::<Result<_>>()?;
        tags.sort();
        tags.dedup();
        if tags != WeatherCondition::ALL {
            return Err(Error::Manifest(
                "header must declare exactly the five weather tags".into(),
            ));
        }
        let class_index: HashMap<&str, usize> = label_space
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();

        let mut records = Vec::new();
        for (row, line) in lines.enumerate() {
            records.push(parse_row(row, line, &class_index)?);
        }
        Self::from_records(label_space, records)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&json!({
            "label_space": self.label_space,
            "weather_tags": WeatherCondition::ALL.iter().map(|w| w.tag()).collect::<Vec<_>>(),
        }))
        .expect("header serializes");
        out.push('\n');
        for r in &self.records {
            let mut row = Map::new();
            row.insert("id".into(), Value::String(r.id.clone()));
            row.insert("image".into(), r.image.to_json());
            row.insert(
                "class".into(),
                r.class_label
                    .map(|c| Value::String(self.label_space[c].clone()))
                    .unwrap_or(Value::Null),
            );
            row.insert(
                "weather".into(),
                r.weather
                    .map(|w| Value::String(w.tag().into()))
                    .unwrap_or(Value::Null),
            );
            row.insert("prior_quality".into(), json!(r.prior_quality));
            if let Some(s) = r.prior_score {
                row.insert("prior_score".into(), json!(s));
            }
            row.insert("domain".into(), Value::String(r.domain.tag().into()));
            out.push_str(&Value::Object(row).to_string());
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

fn parse_row(row: usize, line: &str, classes: &HashMap<&str, usize>) -> Result<SampleRecord> {
    let bad = |field, message: String| Error::ManifestRow {
        row,
        field,
        message,
    };
    let v: Value = serde_json::from_str(line).map_err(|e| bad("<row>", e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| bad("<row>", "row must be an object".into()))?;
    let opt_str = |field: &'static str| -> Result<Option<&str>> {
        match obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(bad(field, "expected a string".into())),
        }
    };
    let opt_num = |field: &'static str| -> Result<Option<f64>> {
        match obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Number(n)) => Ok(n.as_f64()),
            Some(_) => Err(bad(field, "expected a number".into())),
        }
    };

    let id = opt_str("id")?.ok_or_else(|| bad("id", "missing".into()))?;
    let image = match obj.get("image") {
        Some(Value::String(s)) => {
            ImageRef::parse_str(s).ok_or_else(|| bad("image", format!("bad reference {s:?}")))?
        }
        Some(Value::Object(t)) => {
            let shape: Vec<usize> = t
                .get("shape")
                .and_then(|s| serde_json::from_value(s.clone()).ok())
                .ok_or_else(|| bad("image", "inline tensor needs `shape`".into()))?;
            let data: Vec<f32> = t
                .get("data")
                .and_then(|s| serde_json::from_value(s.clone()).ok())
                .ok_or_else(|| bad("image", "inline tensor needs `data`".into()))?;
            let shape: [usize; 3] = shape
                .try_into()
                .map_err(|_| bad("image", "inline shape must be [c, h, w]".into()))?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(bad(
                    "image",
                    "inline data length does not match shape".into(),
                ));
            }
            ImageRef::Inline {
                shape,
                data: Arc::from(data),
            }
        }
        _ => return Err(bad("image", "missing".into())),
    };
    let class_label = opt_str("class")?
        .map(|c| {
            classes
                .get(c)
                .copied()
                .ok_or_else(|| bad("class", format!("{c:?} is not in label_space")))
        })
        .transpose()?;
    let weather = opt_str("weather")?
        .map(|w| {
            w.parse::<WeatherCondition>()
                .map_err(|_| bad("weather", format!("unknown weather condition {w:?}")))
        })
        .transpose()?;
    let domain: Domain = opt_str("domain")?
        .ok_or_else(|| bad("domain", "missing".into()))?
        .parse()
        .map_err(|e: Error| bad("domain", e.to_string()))?;
    let prior_quality = opt_num("prior_quality")?;
    let prior_score = opt_num("prior_score")?;

    if domain == Domain::Source {
        if class_label.is_none() {
            return Err(bad("class", "source record requires class".into()));
        }
        if weather.is_none() {
            return Err(bad("weather", "source record requires weather".into()));
        }
    }
    Ok(SampleRecord {
        id: id.to_string(),
        image,
        class_label,
        weather,
        prior_quality,
        prior_score,
        domain,
    })
}

/// Reads and validates a line-delimited manifest. Relative image paths
/// resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DomainManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(DomainManifest::parse(&text)?.with_base_dir(base))
}

/// Per-class record counts for one domain.
///
/// Target counts come from evaluation labels; target records without one are
/// tallied in `unlabeled`, so `counts.sum() + unlabeled` is the domain size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassHistogram {
    pub counts: Vec<usize>,
    pub unlabeled: usize,
}

impl ClassHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.unlabeled
    }
}

pub fn class_histogram(m: &DomainManifest, domain: Domain) -> ClassHistogram {
    let mut counts = vec![0; m.num_classes()];
    let mut unlabeled = 0;
    for r in m.records.iter().filter(|r| r.domain == domain) {
        match r.raw_label() {
            Some(c) => counts[c] += 1,
            None => unlabeled += 1,
        }
    }
    ClassHistogram { counts, unlabeled }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = r#"{"label_space":["tug","sailboat","barge"],"weather_tags":["sunny","cloudy","foggy","rainstorm","sunset_night"]}"#;

    fn manifest(rows: &[&str]) -> Result<DomainManifest> {
        let mut text = String::from(HEADER);
        for r in rows {
            text.push('\n');
            text.push_str(r);
        }
        DomainManifest::parse(&text)
    }

    #[test]
    fn counts_domains() {
        let m = manifest(&[
            r#"{"id":"a","image":"a.png","class":"tug","weather":"sunny","prior_quality":0.8,"domain":"source"}"#,
            r#"{"id":"b","image":"b.png","class":"tug","weather":"sunny","prior_quality":null,"domain":"source"}"#,
            r#"{"id":"c","image":"c.png","class":null,"weather":null,"prior_quality":null,"domain":"target"}"#,
        ])
        .unwrap();
        assert_eq!((m.n_source(), m.n_target()), (2, 1));
        assert_eq!(m.n_source() + m.n_target(), m.records().len());
    }

    #[test]
    fn source_requires_weather() {
        let err = manifest(&[
            r#"{"id":"a","image":"a.png","class":"tug","weather":null,"domain":"source"}"#,
        ])
        .unwrap_err();
        assert!(
            err.to_string().contains("source record requires weather"),
            "{err}"
        );
        assert!(matches!(
            err,
            Error::ManifestRow {
                row: 0,
                field: "weather",
                ..
            }
        ));
    }

    #[test]
    fn unknown_weather_names_row_and_field() {
        let err = manifest(&[
            r#"{"id":"a","image":"a.png","class":"tug","weather":"sunny","domain":"source"}"#,
            r#"{"id":"b","image":"b.png","class":"tug","weather":"snowy","domain":"source"}"#,
        ])
        .unwrap_err();
        assert!(
            matches!(
                err,
                Error::ManifestRow {
                    row: 1,
                    field: "weather",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn unknown_class_is_rejected() {
        let err = manifest(&[
            r#"{"id":"a","image":"a.png","class":"frigate","weather":"sunny","domain":"source"}"#,
        ])
        .unwrap_err();
        assert!(matches!(err, Error::ManifestRow { field: "class", .. }));
    }

    #[test]
    fn prior_quality_range_and_duplicates() {
        assert!(manifest(&[
            r#"{"id":"a","image":"a.png","class":"tug","weather":"sunny","prior_quality":1.5,"domain":"source"}"#,
        ])
        .is_err());
        assert!(manifest(&[
            r#"{"id":"a","image":"a.png","class":"tug","weather":"sunny","domain":"source"}"#,
            r#"{"id":"a","image":"b.png","class":"tug","weather":"sunny","domain":"source"}"#,
        ])
        .is_err());
    }

    #[test]
    fn header_needs_five_weather_tags() {
        let text = r#"{"label_space":["tug"],"weather_tags":["sunny"]}"#;
        assert!(DomainManifest::parse(text).is_err());
    }

    #[test]
    fn histogram_keeps_empty_classes() {
        let m = manifest(&[
            r#"{"id":"a","image":"a","class":"tug","weather":"sunny","domain":"source"}"#,
            r#"{"id":"b","image":"b","class":"tug","weather":"foggy","domain":"source"}"#,
            r#"{"id":"c","image":"c","class":"tug","weather":"sunny","domain":"source"}"#,
            r#"{"id":"d","image":"d","class":"barge","weather":"sunny","domain":"source"}"#,
        ])
        .unwrap();
        let h = class_histogram(&m, Domain::Source);
        assert_eq!(h.counts, vec![3, 0, 1]);
        assert_eq!(h.total(), m.n_source());
        let t = class_histogram(&m, Domain::Target);
        assert_eq!(t.counts, vec![0, 0, 0]);
        assert_eq!(t.total(), 0);
    }

    #[test]
    fn jsonl_roundtrip() {
        let m = manifest(&[
            r#"{"id":"a","image":"pack:p.bin#3","class":"sailboat","weather":"sunset_night","prior_quality":0.25,"domain":"source"}"#,
            r#"{"id":"b","image":{"shape":[1,1,2],"data":[0.5,-1.0]},"class":"barge","weather":"rainstorm","domain":"target"}"#,
        ])
        .unwrap();
        let again = DomainManifest::parse(&m.to_jsonl()).unwrap();
        assert_eq!(again.records(), m.records());
        assert_eq!(again.label_space(), m.label_space());
    }
}
