//! Multi-dataset manifests, capped-size weighted sampling and the validation
//! holdout.
//!
//! Each dataset contributes `min(|D_i|, N_t)` to an epoch, so every dataset at
//! or above the cap is drawn equally often and smaller ones in proportion to
//! their size. Draws are with replacement: a dataset is chosen by weight, then
//! a record uniformly inside it.
//!
//! Manifest file format (UTF-8, tab separated):
//!
//! ```text
//! #usjepa-manifest n_t=50000 seed=7
//! <dataset_id>\t<source>\t<label or ->\t<mask path or ->
//! ```
//!
//! `source` is a path relative to the manifest's directory, or
//! `synth:<seed>:<class>` for a generated frame.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::rng_for;

pub const DEFAULT_THRESHOLD: usize = 50_000;
const HEADER: &str = "#usjepa-manifest";

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("every dataset is empty")]
    AllEmpty,
    #[error("holdout fraction {0} outside (0, 1)")]
    Fraction(f64),
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum FrameSource {
    Path(PathBuf),
    Synthetic { seed: u64, class: usize },
}

impl fmt::Display for FrameSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameSource::Path(p) => write!(f, "{}", p.display()),
            FrameSource::Synthetic { seed, class } => write!(f, "synth:{seed}:{class}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FrameRecord {
    pub dataset_id: String,
    pub source: FrameSource,
    pub label: Option<usize>,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub records: Vec<FrameRecord>,
}

impl DatasetEntry {
    pub fn size(&self) -> usize {
        self.records.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub datasets: Vec<DatasetEntry>,
    pub threshold: usize,
    pub seed: u64,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Groups records by dataset in order of first appearance.
    pub fn from_records(records: Vec<FrameRecord>, threshold: usize, seed: u64) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<FrameRecord>> = HashMap::new();
        for r in records {
            if !groups.contains_key(&r.dataset_id) {
                order.push(r.dataset_id.clone());
            }
            groups.entry(r.dataset_id.clone()).or_default().push(r);
        }
        let datasets = order
            .into_iter()
            .map(|id| DatasetEntry {
                records: groups.remove(&id).unwrap_or_default(),
                id,
            })
            .collect();
        Self {
            datasets,
            threshold,
            seed,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.datasets.iter().map(DatasetEntry::size).collect()
    }

    pub fn len(&self) -> usize {
        self.datasets.iter().map(DatasetEntry::size).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &FrameRecord> {
        self.datasets.iter().flat_map(|d| d.records.iter())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// `Σ min(|D_j|, N_t)` draws.
    pub fn epoch_len(&self) -> usize {
        self.sizes().iter().map(|&s| effective_count(s, self.threshold)).sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER} n_t={} seed={}\n", self.threshold, self.seed);
        for r in self.records() {
            let label = r.label.map_or("-".to_string(), |l| l.to_string());
            let mask = r.mask.as_ref().map_or("-".to_string(), |m| m.display().to_string());
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.dataset_id, r.source, label, mask));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SamplingError> {
        let err = |line: usize, msg: &str| SamplingError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty manifest"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER) {
            return Err(err(1, "missing manifest header"));
        }
        let (mut threshold, mut seed) = (DEFAULT_THRESHOLD, 0u64);
        for kv in fields {
            match kv.split_once('=') {
                Some(("n_t", v)) => threshold = v.parse().map_err(|_| err(1, "bad n_t"))?,
                Some(("seed", v)) => seed = v.parse().map_err(|_| err(1, "bad seed"))?,
                _ => return Err(err(1, &format!("unknown header field {kv}"))),
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(err(n, "expected 4 tab-separated columns"));
            }
            let source = match cols[1].strip_prefix("synth:") {
                Some(rest) => {
                    let (s, c) = rest.split_once(':').ok_or_else(|| err(n, "bad synth source"))?;
                    FrameSource::Synthetic {
                        seed: s.parse().map_err(|_| err(n, "bad synth seed"))?,
                        class: c.parse().map_err(|_| err(n, "bad synth class"))?,
                    }
                }
                None => FrameSource::Path(PathBuf::from(cols[1])),
            };
            let label = match cols[2] {
                "-" => None,
                l => Some(l.parse().map_err(|_| err(n, "bad label"))?),
            };
            let mask = match cols[3] {
                "-" => None,
                m => Some(PathBuf::from(m)),
            };
            records.push(FrameRecord {
                dataset_id: cols[0].to_string(),
                source,
                label,
                mask,
            });
        }
        Ok(Self::from_records(records, threshold, seed))
    }

    pub fn read(path: &Path) -> Result<Self, SamplingError> {
        let mut m = Self::parse(&std::fs::read_to_string(path)?)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), SamplingError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn effective_count(size: usize, threshold: usize) -> usize {
    size.min(threshold)
}

/// `P(D_i) = min(|D_i|, N_t) / Σ_j min(|D_j|, N_t)`.
pub fn dataset_probs(sizes: &[usize], threshold: usize) -> Result<Vec<f64>, SamplingError> {
    let counts: Vec<usize> = sizes.iter().map(|&s| effective_count(s, threshold)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(SamplingError::AllEmpty);
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Two-stage sampler: dataset by capped weight, then a uniform record.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    sizes: Vec<usize>,
    rng: ChaCha8Rng,
    epoch_len: usize,
}

impl WeightedSampler {
    pub fn new(manifest: &DatasetManifest, seed: u64) -> Result<Self, SamplingError> {
        let sizes = manifest.sizes();
        let probs = dataset_probs(&sizes, manifest.threshold)?;
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            probs,
            cumulative,
            sizes,
            rng: rng_for(seed, &[0x5A3E]),
            epoch_len: manifest.epoch_len(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn epoch_len(&self) -> usize {
        self.epoch_len
    }

    /// Returns `(dataset index, record index)`.
    pub fn next_index(&mut self) -> (usize, usize) {
        let u: f64 = self.rng.random();
        let last = self.probs.iter().rposition(|&p| p > 0.0).expect("some dataset has weight");
        let d = self.cumulative.partition_point(|&c| c <= u).min(last);
        // zero-weight datasets are never selected
        let d = if self.probs[d] > 0.0 { d } else { last };
        let r = self.rng.random_range(0..self.sizes[d]);
        (d, r)
    }

    pub fn next_record<'m>(&mut self, manifest: &'m DatasetManifest) -> &'m FrameRecord {
        let (d, r) = self.next_index();
        &manifest.datasets[d].records[r]
    }

    pub fn draw_epoch(&mut self) -> Vec<(usize, usize)> {
        (0..self.epoch_len).map(|_| self.next_index()).collect()
    }
}

/// Per-dataset proportional split into (train, validation).
///
/// Each dataset with at least two records sends `round(fraction · n)` of them,
/// chosen by a seeded shuffle and capped at `n - 1`, to validation. Record
/// order inside each split follows the input order.
pub fn holdout_split(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), SamplingError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SamplingError::Fraction(fraction));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (d, ds) in manifest.datasets.iter().enumerate() {
        let n = ds.size();
        if n < 2 {
            warn!("dataset {} has {n} record(s); kept entirely for training", ds.id);
            train.extend(ds.records.iter().cloned());
            continue;
        }
        let n_val = ((fraction * n as f64).round() as usize).min(n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(seed, &[0x401D, d as u64]));
        let mut is_val = vec![false; n];
        for &i in &order[..n_val] {
            is_val[i] = true;
        }
        for (i, r) in ds.records.iter().enumerate() {
            if is_val[i] {
                val.push(r.clone());
            } else {
                train.push(r.clone());
            }
        }
    }
    let mut t = DatasetManifest::from_records(train, manifest.threshold, manifest.seed);
    let mut v = DatasetManifest::from_records(val, manifest.threshold, manifest.seed);
    t.base_dir = manifest.base_dir.clone();
    v.base_dir = manifest.base_dir.clone();
    Ok((t, v))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn synthetic_manifest(sizes: &[usize], threshold: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for (d, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                records.push(FrameRecord {
                    dataset_id: format!("ds{d}"),
                    source: FrameSource::Synthetic {
                        seed: i as u64,
                        class: 0,
                    },
                    label: None,
                    mask: None,
                });
            }
        }
        DatasetManifest::from_records(records, threshold, 1)
    }

    #[test]
    fn effective_count_caps_at_threshold() {
        assert_eq!(effective_count(100_000, 50_000), 50_000);
        assert_eq!(effective_count(10, 50_000), 10);
        assert_eq!(effective_count(50_000, 50_000), 50_000);
    }

    #[test]
    fn probabilities_follow_capped_sizes() {
        let p = dataset_probs(&[100_000, 50_000, 10_000], 50_000).unwrap();
        let expect = [5.0 / 11.0, 5.0 / 11.0, 1.0 / 11.0];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(dataset_probs(&[7, 7, 7], 50_000).unwrap(), vec![1.0 / 3.0; 3]);
        assert_eq!(dataset_probs(&[12], 50_000).unwrap(), vec![1.0]);
        assert!(matches!(dataset_probs(&[0, 0], 5), Err(SamplingError::AllEmpty)));
    }

    #[test]
    fn draws_match_capped_weights() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let m = synthetic_manifest(&[100_000, 50_000, 10_000], 50_000);
        let mut s = WeightedSampler::new(&m, 11).unwrap();
        let n = 200_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[s.next_index().0] += 1;
        }
        let expect = [5.0 / 11.0, 5.0 / 11.0, 1.0 / 11.0];
        let mut chi2 = 0.0;
        for (c, p) in counts.iter().zip(expect) {
            let freq = *c as f64 / n as f64;
            assert!((freq - p).abs() < 0.005, "{freq} vs {p}");
            let e = p * n as f64;
            chi2 += (*c as f64 - e).powi(2) / e;
        }
        let critical = ChiSquared::new(2.0).unwrap().inverse_cdf(0.999);
        assert!((critical - 13.8155).abs() < 1e-3);
        assert!(chi2 < critical, "chi2 {chi2}");
    }

    #[test]
    fn single_dataset_records_are_uniform() {
        let m = synthetic_manifest(&[10], 50_000);
        let mut s = WeightedSampler::new(&m, 3).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[s.next_index().1] += 1;
        }
        let (p, nf) = (0.1, n as f64);
        let sigma = (nf * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - nf * p).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let m = synthetic_manifest(&[30, 5, 80], 50);
        let a: Vec<_> = WeightedSampler::new(&m, 9).unwrap().draw_epoch();
        let b: Vec<_> = WeightedSampler::new(&m, 9).unwrap().draw_epoch();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30 + 5 + 50);
    }

    #[test]
    fn holdout_of_thousand_is_950_50() {
        let m = synthetic_manifest(&[1000], 50_000);
        let (t, v) = holdout_split(&m, 0.05, 4).unwrap();
        assert_eq!((t.len(), v.len()), (950, 50));
        let ts: HashSet<_> = t.records().cloned().collect();
        let vs: HashSet<_> = v.records().cloned().collect();
        assert!(ts.is_disjoint(&vs));
        let all: HashSet<_> = m.records().cloned().collect();
        assert_eq!(&ts | &vs, all);
        assert_eq!(holdout_split(&m, 0.05, 4).unwrap(), (t, v));
    }

    #[test]
    fn holdout_keeps_tiny_datasets_in_train() {
        let m = synthetic_manifest(&[1, 40], 50_000);
        let (t, v) = holdout_split(&m, 0.05, 0).unwrap();
        assert_eq!(t.datasets[0].size(), 1);
        assert_eq!(v.datasets.len(), 1);
        assert_eq!(v.datasets[0].id, "ds1");
        assert_eq!(v.len(), 2);
        assert!(holdout_split(&m, 1.0, 0).is_err());
    }

    #[test]
    fn manifest_text_roundtrip() {
        let mut records = synthetic_manifest(&[2, 1], 7).records().cloned().collect::<Vec<_>>();
        records.push(FrameRecord {
            dataset_id: "real".into(),
            source: FrameSource::Path("frames/a b.png".into()),
            label: Some(2),
            mask: Some("masks/a.pbm".into()),
        });
        let m = DatasetManifest::from_records(records, 7, 99);
        let back = DatasetManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(DatasetManifest::parse("nonsense\n").is_err());
        assert!(DatasetManifest::parse("#usjepa-manifest n_t=5\nds\tx\n").is_err());
    }

    proptest! {
        #[test]
        fn probabilities_ignore_record_order(sizes in prop::collection::vec(1usize..200, 1..6), cap in 1usize..150, seed in 0u64..100) {
            let m = synthetic_manifest(&sizes, cap);
            let mut shuffled = m.clone();
            for d in &mut shuffled.datasets {
                d.records.shuffle(&mut rng_for(seed, &[]));
            }
            let a = WeightedSampler::new(&m, 0).unwrap();
            let b = WeightedSampler::new(&shuffled, 0).unwrap();
            prop_assert_eq!(a.probs(), b.probs());
            prop_assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (&p, &s) in a.probs().iter().zip(&sizes) {
                prop_assert!(p > 0.0);
                if s >= cap {
                    let top = a.probs().iter().cloned().fold(0.0, f64::max);
                    prop_assert!((p - top).abs() < 1e-12);
                }
            }
        }
    }
}
