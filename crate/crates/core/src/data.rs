//! Long-tailed datasets: synthetic generation, exponential subsampling,
//! Many/Medium/Few splits and the `ELFD` file format.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{self, OffsetReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ELFD";
const VERSION: u32 = 1;

/// Labelled examples of shape `C x H x W`. Feature values are held at `f32`
/// precision so that the on-disk format round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailedDataset {
    classes: usize,
    dims: [usize; 3],
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LongTailedDataset {
    pub fn new(
        classes: usize,
        dims: [usize; 3],
        mut features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if classes == 0 || dims.contains(&0) {
            return Err(Error::config(format!(
                "dataset needs positive classes and dims, got {classes} and {dims:?}"
            )));
        }
        let d: usize = dims.iter().product();
        if features.len() != labels.len() * d {
            return Err(Error::Dimension {
                op: "dataset",
                left: vec![labels.len(), d],
                right: vec![features.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        for v in features.iter_mut() {
            *v = *v as f32 as f64;
        }
        Ok(Self {
            classes,
            dims,
            features,
            labels,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn example_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn features(&self, i: usize) -> &[f64] {
        let d = self.example_len();
        &self.features[i * d..(i + 1) * d]
    }

    /// Example `i` as a `1 x C x H x W` tensor.
    pub fn example(&self, i: usize) -> Tensor {
        let [c, h, w] = self.dims;
        Tensor::from_parts(vec![1, c, h, w], self.features(i).to_vec())
    }

    /// Stacks the given examples into a `batch x C x H x W` tensor.
    pub fn batch(&self, items: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.dims;
        let mut data = Vec::with_capacity(items.len() * self.example_len());
        let mut labels = Vec::with_capacity(items.len());
        for &i in items {
            data.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        (Tensor::from_parts(vec![items.len(), c, h, w], data), labels)
    }

    /// `n_j` for every class `j`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Class indices ordered by descending count (ties by index).
    pub fn class_order(&self) -> Vec<usize> {
        let counts = self.class_counts();
        let mut order: Vec<usize> = (0..self.classes).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        order
    }

    /// `n_max / n_min`; infinite when some class is empty.
    pub fn imbalance_ratio(&self) -> f64 {
        let counts = self.class_counts();
        let max = *counts.iter().max().unwrap_or(&0);
        let min = *counts.iter().min().unwrap_or(&0);
        max as f64 / min as f64
    }

    /// Keeps the listed examples, in the given order.
    pub fn subset(&self, items: &[usize]) -> Self {
        let mut features = Vec::with_capacity(items.len() * self.example_len());
        let mut labels = Vec::with_capacity(items.len());
        for &i in items {
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Self {
            classes: self.classes,
            dims: self.dims,
            features,
            labels,
        }
    }
}

/// Per-class sizes `floor(n * mu^j)` with `mu = ratio^(-1/(c-1))`, `j = 0..c-1`.
pub fn longtail_counts(n: usize, classes: usize, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::config(format!("imbalance ratio must be >= 1, got {ratio}")));
    }
    if classes == 0 {
        return Err(Error::config("need at least one class"));
    }
    if classes == 1 {
        return Ok(vec![n]);
    }
    let last = (classes - 1) as f64;
    (0..classes)
        .map(|j| {
            let exact = n as f64 * ratio.powf(-(j as f64) / last);
            // guard against 49.999999 style representation error
            let count = (exact + 1e-9).floor() as usize;
            if count == 0 {
                Err(Error::Data(format!(
                    "class {j} would keep {exact:.3} examples, which rounds to 0; \
                     use a larger per-class n or a smaller imbalance ratio"
                )))
            } else {
                Ok(count)
            }
        })
        .collect()
}

/// Subsamples a balanced dataset so class `j` keeps `floor(n * mu^j)` examples,
/// uniformly without replacement. Source order is preserved.
pub fn make_longtail(source: &LongTailedDataset, ratio: f64, seed: u64) -> Result<LongTailedDataset> {
    let counts = source.class_counts();
    let n = counts[0];
    if n == 0 || counts.iter().any(|&k| k != n) {
        return Err(Error::Data(format!(
            "make_longtail needs a balanced source, got class counts {counts:?}"
        )));
    }
    let targets = longtail_counts(n, source.classes(), ratio)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::with_capacity(n); source.classes()];
    for (i, &y) in source.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(targets.iter().sum());
    for (members, &want) in by_class.iter().zip(&targets) {
        let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), want)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picked.sort_unstable();
        keep.extend(picked);
    }
    keep.sort_unstable();
    Ok(source.subset(&keep))
}

/// Class-conditional Gaussian generator: class `j` draws `mean_j + N(0, sigma^2)`
/// per element. Means are drawn once per seed and kept at least `4 sigma`
/// apart.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSource {
    classes: usize,
    dims: [usize; 3],
    sigma: f64,
    seed: u64,
    means: Vec<Vec<f64>>,
}

const MEAN_ATTEMPTS: usize = 1000;

impl GaussianSource {
    pub fn new(classes: usize, dims: [usize; 3], sigma: f64, seed: u64) -> Result<Self> {
        if classes == 0 || dims.contains(&0) {
            return Err(Error::config("gaussian source needs positive classes and dims"));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("noise sigma must be >= 0, got {sigma}")));
        }
        let d: usize = dims.iter().product();
        let min_sep = 4.0 * sigma;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
        for j in 0..classes {
            let mut accepted = None;
            for _ in 0..MEAN_ATTEMPTS {
                let cand: Vec<f64> = (0..d)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .map(|v: f64| v as f32 as f64)
                    .collect();
                let far = means.iter().all(|m| {
                    let dist2: f64 = m.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                    dist2.sqrt() >= min_sep
                });
                if far {
                    accepted = Some(cand);
                    break;
                }
            }
            match accepted {
                Some(m) => means.push(m),
                None => {
                    return Err(Error::Data(format!(
                        "could not place class {j} mean at distance >= {min_sep} from the others \
                         after {MEAN_ATTEMPTS} draws; lower sigma or use fewer classes"
                    )))
                }
            }
        }
        Ok(Self {
            classes,
            dims,
            sigma,
            seed,
            means,
        })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Draws `counts[j]` examples of class `j` from an independent noise
    /// stream. Different streams give independent samples around the same
    /// means (train vs eval).
    pub fn sample(&self, counts: &[usize], stream: u64) -> Result<LongTailedDataset> {
        if counts.len() != self.classes {
            return Err(Error::Dimension {
                op: "synth_gaussian counts",
                left: vec![counts.len()],
                right: vec![self.classes],
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let total: usize = counts.iter().sum();
        let d: usize = self.dims.iter().product();
        let mut features = Vec::with_capacity(total * d);
        let mut labels = Vec::with_capacity(total);
        for (j, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                for &mu in &self.means[j] {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    features.push(mu + self.sigma * noise);
                }
                labels.push(j);
            }
        }
        LongTailedDataset::new(self.classes, self.dims, features, labels)
    }
}

/// One-shot generation on noise stream 0.
pub fn synth_gaussian(
    classes: usize,
    dims: [usize; 3],
    sigma: f64,
    counts: &[usize],
    seed: u64,
) -> Result<LongTailedDataset> {
    GaussianSource::new(classes, dims, sigma, seed)?.sample(counts, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Many,
    Medium,
    Few,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Many, Split::Medium, Split::Few];

    pub fn name(self) -> &'static str {
        match self {
            Split::Many => "many",
            Split::Medium => "medium",
            Split::Few => "few",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const MANY_MIN: usize = 100;
pub const FEW_MAX: usize = 20;

/// Many: `n_j > many_min`; Few: `n_j < few_max`; Medium otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub tags: Vec<Split>,
    pub many_min: usize,
    pub few_max: usize,
}

impl SplitAssignment {
    pub fn from_counts(counts: &[usize]) -> Self {
        Self::with_thresholds(counts, MANY_MIN, FEW_MAX)
    }

    pub fn with_thresholds(counts: &[usize], many_min: usize, few_max: usize) -> Self {
        let tags = counts
            .iter()
            .map(|&n| {
                if n > many_min {
                    Split::Many
                } else if n < few_max {
                    Split::Few
                } else {
                    Split::Medium
                }
            })
            .collect();
        Self {
            tags,
            many_min,
            few_max,
        }
    }

    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t == split)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn tag(&self, class: usize) -> Split {
        self.tags[class]
    }
}

pub fn split_classes(ds: &LongTailedDataset) -> SplitAssignment {
    SplitAssignment::from_counts(&ds.class_counts())
}

pub fn save_dataset(ds: &LongTailedDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LongTailedDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// `ELFD` v1: magic, version, c, C, H, W, n (u32 each), then n records of
/// `label: u32` followed by `C*H*W` little-endian f32.
pub fn write_dataset<W: Write>(ds: &LongTailedDataset, out: &mut W) -> Result<()> {
    let mut header = Vec::with_capacity(28);
    header.extend_from_slice(MAGIC);
    codec::put_u32(&mut header, VERSION);
    codec::put_u32(&mut header, codec::to_u32(ds.classes, "classes")?);
    for &d in &ds.dims {
        codec::put_u32(&mut header, codec::to_u32(d, "dimension")?);
    }
    codec::put_u32(&mut header, codec::to_u32(ds.len(), "example count")?);
    out.write_all(&header)?;
    let mut record = Vec::with_capacity(4 + 4 * ds.example_len());
    for i in 0..ds.len() {
        record.clear();
        codec::put_u32(&mut record, ds.labels[i] as u32);
        for &v in ds.features(i) {
            record.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&record)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<LongTailedDataset> {
    let mut r = OffsetReader::new(input);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let at = r.offset();
    let classes = r.u32("class count")? as usize;
    if classes == 0 {
        return Err(Error::format(at, "class count must be positive"));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let at = r.offset();
        *d = r.u32("dimension")? as usize;
        if *d == 0 {
            return Err(Error::format(at, "zero dimension"));
        }
    }
    let n = r.u32("example count")? as usize;
    let d: usize = dims.iter().product();
    let mut features = Vec::with_capacity(n.min(1 << 20) * d);
    let mut labels = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let at = r.offset();
        let y = r.u32("label")? as usize;
        if y >= classes {
            return Err(Error::format(at, format!("label {y} out of range for {classes} classes")));
        }
        labels.push(y);
        features.extend(r.f32s(d, "example payload")?.into_iter().map(f64::from));
    }
    r.expect_eof()?;
    LongTailedDataset::new(classes, dims, features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize, classes: usize, seed: u64) -> LongTailedDataset {
        GaussianSource::new(classes, [1, 2, 2], 0.1, seed)
            .unwrap()
            .sample(&vec![n; classes], 0)
            .unwrap()
    }

    #[test]
    fn longtail_count_examples() {
        // oracle: floor(5000 * 100^(-j/9)) evaluated independently
        assert_eq!(
            longtail_counts(5000, 10, 100.0).unwrap(),
            vec![5000, 2997, 1796, 1077, 645, 387, 232, 139, 83, 50]
        );
        assert_eq!(longtail_counts(7, 4, 1.0).unwrap(), vec![7; 4]);
        assert_eq!(longtail_counts(100, 2, 10.0).unwrap(), vec![100, 10]);
        assert!(matches!(longtail_counts(10, 5, 100.0), Err(Error::Data(_))));
        assert!(longtail_counts(10, 5, 0.5).is_err());
    }

    #[test]
    fn make_longtail_subsamples_per_class() {
        let src = balanced(100, 2, 3);
        let lt = make_longtail(&src, 10.0, 9).unwrap();
        assert_eq!(lt.class_counts(), vec![100, 10]);
        assert_eq!(lt.imbalance_ratio(), 10.0);
        assert_eq!(make_longtail(&src, 10.0, 9).unwrap(), lt);
        assert_ne!(make_longtail(&src, 10.0, 10).unwrap(), lt);

        let same = make_longtail(&src, 1.0, 0).unwrap();
        assert_eq!(same, src);
    }

    #[test]
    fn make_longtail_rejects_unbalanced_source() {
        let lt = make_longtail(&balanced(20, 3, 1), 4.0, 0).unwrap();
        assert!(matches!(make_longtail(&lt, 2.0, 0), Err(Error::Data(_))));
    }

    #[test]
    fn noiseless_examples_equal_means() {
        let src = GaussianSource::new(3, [1, 2, 2], 0.0, 5).unwrap();
        let ds = src.sample(&[4, 2, 1], 0).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.features(i), &src.means()[ds.label(i)][..]);
        }
    }

    #[test]
    fn synth_is_deterministic_and_streams_differ() {
        let a = synth_gaussian(4, [1, 3, 3], 0.5, &[5, 4, 3, 2], 11).unwrap();
        let b = synth_gaussian(4, [1, 3, 3], 0.5, &[5, 4, 3, 2], 11).unwrap();
        assert_eq!(a, b);
        let src = GaussianSource::new(4, [1, 3, 3], 0.5, 11).unwrap();
        assert_ne!(src.sample(&[5, 4, 3, 2], 1).unwrap(), a);
    }

    #[test]
    fn means_are_separated() {
        let src = GaussianSource::new(10, [1, 4, 4], 1.0, 0).unwrap();
        let m = src.means();
        for a in 0..10 {
            for b in a + 1..10 {
                let d: f64 = m[a].iter().zip(&m[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(d.sqrt() >= 4.0);
            }
        }
        assert!(matches!(
            GaussianSource::new(50, [1, 1, 1], 1.0, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn split_examples() {
        let s = SplitAssignment::from_counts(&[150, 50, 5]);
        assert_eq!(s.tags, vec![Split::Many, Split::Medium, Split::Few]);
        assert_eq!(SplitAssignment::from_counts(&[100]).tags, vec![Split::Medium]);
        assert_eq!(SplitAssignment::from_counts(&[20]).tags, vec![Split::Medium]);
        assert_eq!(SplitAssignment::from_counts(&[101, 19]).tags, vec![Split::Many, Split::Few]);
    }

    #[test]
    fn class_order_sorts_descending() {
        let ds = synth_gaussian(3, [1, 1, 1], 0.0, &[2, 5, 3], 0).unwrap();
        assert_eq!(ds.class_order(), vec![1, 2, 0]);
        assert_eq!(ds.imbalance_ratio(), 2.5);
    }

    #[test]
    fn elfd_round_trip_and_errors() {
        let ds = synth_gaussian(3, [2, 2, 1], 0.7, &[3, 2, 1], 4).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"ELFD");
        assert_eq!(buf.len(), 28 + 6 * (4 + 4 * 4));
        assert_eq!(read_dataset(&buf[..]).unwrap(), ds);

        let cut = buf.len() - 5;
        match read_dataset(&buf[..cut]).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, cut as u64),
            e => panic!("{e:?}"),
        }
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_dataset(&bad[..]), Err(Error::Format { offset: 4, .. })));

        let empty = LongTailedDataset::new(3, [1, 1, 1], vec![], vec![]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&empty, &mut buf).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, empty);
    }
}
