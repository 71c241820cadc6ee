//! Scoring restorations against clean references and structured reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::Config;
use crate::data::{DegradationKind, ManifestEntry};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::pipeline::ImageRestorer;

/// PSNR in dB whose infinite value serializes as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Db(v)),
            Raw::Text(t) if t == "inf" => Ok(Db(f64::INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid dB value {t:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub psnr: Db,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub lq: String,
    pub hq: String,
    pub kind: DegradationKind,
    pub intensity: f64,
    /// Second-pass restoration.
    pub restored: Scores,
    /// First-pass restoration, when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub first_pass: Option<Scores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub restored: Scores,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub first_pass: Option<Scores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aggregate: Aggregate,
    pub per_kind: BTreeMap<String, Aggregate>,
    pub samples: Vec<SampleReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<Config>,
}

fn mean_scores<'a>(it: impl Iterator<Item = &'a Scores>) -> Option<Scores> {
    let (mut n, mut p, mut s) = (0usize, 0.0, 0.0);
    for sc in it {
        n += 1;
        p += sc.psnr.0;
        s += sc.ssim;
    }
    (n > 0).then(|| Scores { psnr: Db(p / n as f64), ssim: s / n as f64 })
}

fn aggregate(samples: &[&SampleReport]) -> Aggregate {
    let restored = mean_scores(samples.iter().map(|s| &s.restored)).unwrap_or(Scores { psnr: Db(f64::NAN), ssim: f64::NAN });
    let first_pass = if samples.iter().all(|s| s.first_pass.is_some()) {
        mean_scores(samples.iter().filter_map(|s| s.first_pass.as_ref()))
    } else {
        None
    };
    Aggregate { count: samples.len(), restored, first_pass }
}

impl MetricReport {
    /// Builds aggregates as arithmetic means of the per-sample scores.
    pub fn from_samples(samples: Vec<SampleReport>, config: Option<Config>) -> Self {
        let all: Vec<&SampleReport> = samples.iter().collect();
        let mut by_kind: BTreeMap<String, Vec<&SampleReport>> = BTreeMap::new();
        for s in &samples {
            by_kind.entry(s.kind.to_string()).or_default().push(s);
        }
        let per_kind = by_kind.into_iter().map(|(k, v)| (k, aggregate(&v))).collect();
        MetricReport { aggregate: aggregate(&all), per_kind, samples, config }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn score(a: &crate::image::Image, b: &crate::image::Image) -> Result<Scores> {
    Ok(Scores { psnr: Db(psnr(a, b)?), ssim: ssim(a, b)? })
}

fn score_entry(restorer: &dyn ImageRestorer, e: &ManifestEntry, both_iterations: bool) -> Result<SampleReport> {
    let pair = e.load()?;
    let out = restorer.restore(&pair.lq, Some(&pair.meta))?;
    Ok(SampleReport {
        lq: e.lq.display().to_string(),
        hq: e.hq.display().to_string(),
        kind: e.kind,
        intensity: e.intensity,
        restored: score(&out.second, &pair.hq)?,
        first_pass: if both_iterations { Some(score(&out.first, &pair.hq)?) } else { None },
    })
}

/// Restores every manifest entry and scores the second pass (and, with
/// `both_iterations`, the first) against the clean image. Samples are split
/// across the available cores; the report keeps manifest order.
pub fn evaluate(
    restorer: &dyn ImageRestorer,
    entries: &[ManifestEntry],
    both_iterations: bool,
    config: Option<Config>,
) -> Result<MetricReport> {
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(entries.len());
    let chunk = entries.len().div_ceil(workers);
    let parts: Vec<Result<Vec<SampleReport>>> = std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|e| score_entry(restorer, e, both_iterations)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut samples = Vec::with_capacity(entries.len());
    for part in parts {
        samples.extend(part?);
    }
    Ok(MetricReport::from_samples(samples, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_psnr_serializes_as_inf() {
        let s = Scores { psnr: Db(f64::INFINITY), ssim: 1.0 };
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"psnr":"inf","ssim":1.0}"#);
        assert_eq!(serde_json::from_str::<Scores>(&j).unwrap(), s);
        let f = Scores { psnr: Db(20.5), ssim: 0.5 };
        assert_eq!(serde_json::from_str::<Scores>(&serde_json::to_string(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn aggregates_are_means() {
        let mk = |kind, p, s| SampleReport {
            lq: String::new(),
            hq: String::new(),
            kind,
            intensity: 0.5,
            restored: Scores { psnr: Db(p), ssim: s },
            first_pass: None,
        };
        let r = MetricReport::from_samples(
            vec![mk(DegradationKind::Fog, 20.0, 0.5), mk(DegradationKind::Fog, 30.0, 0.7), mk(DegradationKind::Snow, 40.0, 0.9)],
            None,
        );
        assert_eq!(r.aggregate.restored.psnr, Db(30.0));
        assert!((r.aggregate.restored.ssim - 0.7).abs() < 1e-12);
        assert_eq!(r.per_kind["fog"].restored.psnr, Db(25.0));
        assert_eq!(r.per_kind["snow"].count, 1);
        assert!(r.aggregate.first_pass.is_none());
    }
}
