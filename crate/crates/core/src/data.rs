//! Dataset manifests, preprocessing, and the synthetic dataset generator.
//!
//! A manifest is a CSV file with header `path,label,patient_id,split`. Labels
//! are either all integers (`0..K`) or all class names (sorted to indices).
//! Every patient must appear in exactly one split so that no patient's scans
//! leak from training into evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{Filter, Image, Rect};
use crate::rng::{domain, stream};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Per-channel `(x − mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl Normalization {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!(
                "normalization std must be positive, got {std:?}"
            )));
        }
        Ok(Normalization { mean, std })
    }

    pub fn normalize(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for c in 0..img.channels() {
            let (m, s) = (self.mean[c % 3], self.std[c % 3]);
            out.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        out
    }

    pub fn denormalize(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for c in 0..img.channels() {
            let (m, s) = (self.mean[c % 3], self.std[c % 3]);
            out.plane_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
        }
        out
    }
}

/// Image geometry for the training and test paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    /// Side of the square network input (256 at full scale).
    pub size: usize,
    /// Side the test path resizes to before center-cropping (293 at full scale).
    pub test_resize: usize,
    pub norm: Normalization,
}

impl Preprocess {
    pub fn new(size: usize) -> Self {
        Preprocess {
            size,
            test_resize: (size as f64 * 293.0 / 256.0).round() as usize,
            norm: Normalization::default(),
        }
    }

    /// Three-channel bicubic resize to the input size, still in `[0, 1]`.
    pub fn resize_train(&self, img: &Image) -> Image {
        img.clone()
            .to_three_channels()
            .resize(self.size, self.size, Filter::Bicubic)
    }

    /// Training-path preprocessing without augmentation.
    pub fn train(&self, img: &Image) -> Image {
        self.norm.normalize(&self.resize_train(img))
    }

    pub fn crop_offset(&self) -> usize {
        (self.test_resize - self.size) / 2
    }

    /// Resize to `test_resize`, center-crop `size`, normalize.
    pub fn test(&self, img: &Image) -> Image {
        let big = img
            .clone()
            .to_three_channels()
            .resize(self.test_resize, self.test_resize, Filter::Bicubic);
        let o = self.crop_offset();
        let crop = big.crop(Rect {
            x: o,
            y: o,
            width: self.size,
            height: self.size,
        });
        self.norm.normalize(&crop)
    }
}

pub fn preprocess_train(img: &Image) -> Image {
    Preprocess::new(256).train(img)
}

pub fn preprocess_test(img: &Image) -> Image {
    Preprocess::new(256).test(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub patient_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    pub class_names: Vec<String>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub warnings: Vec<String>,
}

const HEADER: [&str; 4] = ["path", "label", "patient_id", "split"];

impl DatasetManifest {
    /// Parses and validates manifest text. File existence is not checked.
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Data(format!("manifest header: {e}")))?
            .clone();
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::Data(format!(
                "manifest header must be {}, got {}",
                HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut raw = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Data(format!("manifest line {line}: {e}")))?;
            if rec.len() != 4 {
                return Err(Error::Data(format!(
                    "manifest line {line}: expected 4 fields, got {}",
                    rec.len()
                )));
            }
            let split = rec[3]
                .parse::<Split>()
                .map_err(|e| Error::Data(format!("manifest line {line}: {e}")))?;
            if rec[0].is_empty() || rec[2].is_empty() {
                return Err(Error::Data(format!("manifest line {line}: empty path or patient id")));
            }
            raw.push((line, rec[0].to_string(), rec[1].to_string(), rec[2].to_string(), split));
        }

        let numeric = raw.iter().all(|r| r.2.parse::<usize>().is_ok());
        let class_names: Vec<String> = if numeric {
            let k = raw.iter().map(|r| r.2.parse::<usize>().unwrap() + 1).max().unwrap_or(0);
            if k > 1 << 16 {
                return Err(Error::Data(format!("label index {} is implausibly large", k - 1)));
            }
            (0..k).map(|i| format!("class{i}")).collect()
        } else {
            if let Some(r) = raw.iter().find(|r| r.2.is_empty()) {
                return Err(Error::Data(format!("manifest line {}: empty label", r.0)));
            }
            raw.iter()
                .map(|r| r.2.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        };
        let index: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

        let mut seen_path: HashMap<&str, usize> = HashMap::new();
        for r in &raw {
            if let Some(first) = seen_path.insert(&r.1, r.0) {
                return Err(Error::Data(format!(
                    "duplicate path {:?} on manifest lines {first} and {}",
                    r.1, r.0
                )));
            }
        }

        let mut patient_splits: BTreeMap<&str, BTreeMap<Split, Vec<usize>>> = BTreeMap::new();
        for r in &raw {
            patient_splits
                .entry(&r.3)
                .or_default()
                .entry(r.4)
                .or_default()
                .push(r.0);
        }
        for (patient, splits) in &patient_splits {
            if splits.len() > 1 {
                let detail: Vec<String> = splits
                    .iter()
                    .map(|(s, lines)| format!("{s} (lines {lines:?})"))
                    .collect();
                return Err(Error::Data(format!(
                    "patient {patient:?} appears in more than one split: {}",
                    detail.join(", ")
                )));
            }
        }

        let rows: Vec<ManifestRow> = raw
            .into_iter()
            .map(|(_, path, label, patient_id, split)| ManifestRow {
                label: if numeric {
                    label.parse().unwrap()
                } else {
                    index[label.as_str()]
                },
                path,
                patient_id,
                split,
            })
            .collect();
        let mut manifest = DatasetManifest {
            rows,
            class_names,
            root: PathBuf::new(),
            warnings: Vec::new(),
        };
        for s in Split::ALL {
            if manifest.split_len(s) == 0 {
                manifest.warnings.push(format!("{s} split is empty"));
            }
        }
        Ok(manifest)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for r in &self.rows {
            let label = if self
                .class_names
                .iter()
                .enumerate()
                .all(|(i, n)| *n == format!("class{i}"))
            {
                r.label.to_string()
            } else {
                self.class_names[r.label].clone()
            };
            w.write_record([
                r.path.as_str(),
                label.as_str(),
                r.patient_id.as_str(),
                &r.split.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Reads, validates, and checks that every referenced image exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = DatasetManifest::parse(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let missing: Vec<&str> = m
        .rows
        .iter()
        .filter(|r| !m.resolve(r).is_file())
        .map(|r| r.path.as_str())
        .take(5)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{}: missing image files {missing:?}",
            path.display()
        )));
    }
    for w in &m.warnings {
        log::warn!("{}: {w}", path.display());
    }
    log::info!(
        "{}: train {} / val {} / test {}",
        path.display(),
        m.split_len(Split::Train),
        m.split_len(Split::Val),
        m.split_len(Split::Test)
    );
    Ok(m)
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Image,
    pub label: usize,
    pub patient_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let samples = manifest
            .rows
            .iter()
            .map(|r| {
                Ok(ImageSample {
                    image: Image::load(&manifest.resolve(r))?,
                    label: r.label,
                    patient_id: r.patient_id.clone(),
                    split: r.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            samples,
            class_names: manifest.class_names.clone(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> Vec<&ImageSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Synthetic data: class-conditional striped blobs over a class-tinted
/// background, one simulated patient per ten images.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub classes: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Per-pixel additive noise standard deviation.
    pub noise_std: f64,
}

impl SynthSpec {
    pub fn new(n_per_class: usize, classes: usize, image_size: usize, seed: u64) -> Self {
        SynthSpec {
            n_per_class,
            classes,
            image_size,
            seed,
            noise_std: 0.05,
        }
    }
}

pub const IMAGES_PER_PATIENT: usize = 10;

/// Background level of channel `ch` for class `c`.
pub fn synth_tint(c: usize, ch: usize) -> f64 {
    0.3 + if ch == c % 3 { 0.3 } else { 0.0 }
}

fn synth_image(spec: &SynthSpec, class: usize, patient_shift: f64, rng: &mut crate::rng::Rng) -> Image {
    let n = spec.image_size as f64;
    let theta = class as f64 * std::f64::consts::PI / spec.classes as f64;
    let freq = 4.0 + (class / 3) as f64;
    let (cy, cx) = (
        n / 2.0 + rng.random_range(-n / 8.0..=n / 8.0),
        n / 2.0 + rng.random_range(-n / 8.0..=n / 8.0),
    );
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let sigma = n / 4.0;
    let noise = Normal::new(0.0, spec.noise_std).expect("finite noise std");
    let mut img = Image::filled(3, spec.image_size, spec.image_size, 0.0);
    for ch in 0..3 {
        for y in 0..spec.image_size {
            for x in 0..spec.image_size {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let blob = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / n;
                let stripes = 0.2 * (std::f64::consts::TAU * freq * u + phase).sin();
                let v = synth_tint(class, ch) + patient_shift + blob * stripes + noise.sample(rng);
                img.set(ch, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Generates a patient-disjoint 70/15/15 split dataset, in memory.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(DatasetManifest, Dataset)> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic dataset needs at least two classes".into()));
    }
    if spec.image_size < 4 || spec.n_per_class == 0 {
        return Err(Error::Config(
            "synthetic dataset needs image_size >= 4 and n_per_class >= 1".into(),
        ));
    }
    let mut split_rng = stream(spec.seed, domain::SYNTH, u64::MAX, 0);
    // Per-class shuffled patient lists, interleaved so every split is near class-balanced.
    let per_class_patients = spec.n_per_class.div_ceil(IMAGES_PER_PATIENT);
    let mut order: Vec<Vec<(usize, usize)>> = (0..spec.classes)
        .map(|c| {
            let mut ps: Vec<(usize, usize)> = (0..per_class_patients).map(|p| (c, p)).collect();
            ps.shuffle(&mut split_rng);
            ps
        })
        .collect();
    let mut interleaved = Vec::new();
    for j in 0..per_class_patients {
        for list in order.iter_mut() {
            interleaved.push(list[j]);
        }
    }
    let total = interleaved.len();
    let n_train = (0.70 * total as f64).round() as usize;
    let n_val = (0.15 * total as f64).round() as usize;
    let split_of: HashMap<(usize, usize), Split> = interleaved
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (p, s)
        })
        .collect();

    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for c in 0..spec.classes {
        for p in 0..per_class_patients {
            let mut prng = stream(spec.seed, domain::SYNTH, c as u64, p as u64);
            let shift = prng.random_range(-0.03..=0.03);
            let lo = p * IMAGES_PER_PATIENT;
            let hi = ((p + 1) * IMAGES_PER_PATIENT).min(spec.n_per_class);
            for i in lo..hi {
                let image = synth_image(spec, c, shift, &mut prng);
                let patient_id = format!("P{c}-{p:03}");
                let split = split_of[&(c, p)];
                rows.push(ManifestRow {
                    path: format!("images/c{c}/{i:04}.png"),
                    label: c,
                    patient_id: patient_id.clone(),
                    split,
                });
                samples.push(ImageSample {
                    image,
                    label: c,
                    patient_id,
                    split,
                });
            }
        }
    }
    let class_names: Vec<String> = (0..spec.classes).map(|i| format!("class{i}")).collect();
    let manifest = DatasetManifest {
        rows,
        class_names: class_names.clone(),
        root: PathBuf::new(),
        warnings: Vec::new(),
    };
    Ok((manifest, Dataset { samples, class_names }))
}

/// Writes the synthetic dataset as PNG files plus `manifest.csv` under `dir`.
pub fn write_synth(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    let (mut manifest, data) = synth_dataset(spec)?;
    for (row, sample) in manifest.rows.iter().zip(&data.samples) {
        let path = dir.join(&row.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        sample.image.save_png(&path)?;
    }
    manifest.root = dir.to_path_buf();
    let mpath = dir.join("manifest.csv");
    manifest.save(&mpath)?;
    Ok(mpath)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str =
        "path,label,patient_id,split\na.png,0,P1,train\nb.png,1,P1,train\nc.png,2,P2,test\nd.png,1,P3,val\n";

    #[test]
    fn parses_numeric_manifest() {
        let m = DatasetManifest::parse(GOOD).unwrap();
        assert_eq!(m.num_classes(), 3);
        assert_eq!(m.split_len(Split::Train), 2);
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn patient_in_two_splits_is_rejected() {
        let bad = "path,label,patient_id,split\na.png,0,P,train\nb.png,0,P,test\n";
        let err = DatasetManifest::parse(bad).unwrap_err().to_string();
        assert!(
            err.contains("\"P\"") && err.contains("lines [2]") && err.contains("lines [3]"),
            "{err}"
        );
    }

    #[test]
    fn duplicate_path_and_bad_split_are_rejected() {
        let dup = "path,label,patient_id,split\na.png,0,P,train\na.png,1,Q,train\n";
        assert!(DatasetManifest::parse(dup)
            .unwrap_err()
            .to_string()
            .contains("lines 2 and 3"));
        let tag = "path,label,patient_id,split\na.png,0,P,holdout\n";
        assert!(DatasetManifest::parse(tag).unwrap_err().to_string().contains("line 2"));
        assert!(DatasetManifest::parse("file,label\n").is_err());
    }

    #[test]
    fn empty_test_split_warns() {
        let m = DatasetManifest::parse("path,label,patient_id,split\na.png,0,P,train\nb.png,1,Q,val\n").unwrap();
        assert_eq!(m.warnings, vec!["test split is empty".to_string()]);
    }

    #[test]
    fn named_labels_are_sorted() {
        let m =
            DatasetManifest::parse("path,label,patient_id,split\na.png,normal,P,train\nb.png,covid,Q,val\n").unwrap();
        assert_eq!(m.class_names, vec!["covid", "normal"]);
        assert_eq!(m.rows[0].label, 1);
        assert_eq!(DatasetManifest::parse(&m.to_csv()).unwrap().rows, m.rows);
    }

    #[test]
    fn preprocess_identity_resize_and_normalization() {
        let p = Preprocess::new(16);
        let img = Image::from_fn(3, 16, 16, |c, y, x| ((c + y * x) % 7) as f64 / 6.0);
        let out = p.train(&img);
        for c in 0..3 {
            for (o, i) in out.plane(c).iter().zip(img.plane(c)) {
                assert!((o - (i - IMAGENET_MEAN[c]) / IMAGENET_STD[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_scale_geometry() {
        let p = Preprocess::new(256);
        assert_eq!(p.test_resize, 293);
        assert_eq!(p.crop_offset(), 18);
        let big = Image::filled(1, 512, 512, 0.5);
        assert_eq!(p.train(&big).shape(), [3, 256, 256]);
        assert_eq!(p.test(&big).shape(), [3, 256, 256]);
    }

    #[test]
    fn constant_mean_image_normalizes_to_zero() {
        let n = Normalization::default();
        let img = Image::from_fn(3, 8, 8, |c, _, _| IMAGENET_MEAN[c]);
        assert!(n.normalize(&img).data().iter().all(|v| v.abs() < 1e-15));
        let p = Preprocess::new(8);
        assert!(p.train(&img).data().iter().all(|v| v.abs() < 1e-12));
    }
}
