//! Dataset assembly from clean images, and the TSV manifest format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::{degrade, DegradationKind, DegradationSpec};
use crate::embedder::CaptionMetadata;
use crate::error::{Error, Result};
use crate::image::Image;

/// A degraded / clean pair with the degradation that links them.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub lq: Image,
    pub hq: Image,
    pub spec: DegradationSpec,
    pub meta: CaptionMetadata,
}

impl SamplePair {
    pub fn new(hq: Image, spec: DegradationSpec, scene: &str) -> Result<Self> {
        let lq = degrade(&hq, &spec)?;
        let meta = CaptionMetadata { scene: scene.to_string(), weather: spec.weather_phrase().to_string() };
        Ok(SamplePair { lq, hq, spec, meta })
    }
}

/// Scene label of a file: its stem without trailing digits and separators.
pub fn scene_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let label = stem.trim_end_matches(|c: char| c.is_ascii_digit() || c == '_' || c == '-');
    if label.is_empty() {
        "scene".to_string()
    } else {
        label.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tsv",
            Split::Val => "val.tsv",
            Split::Test => "test.tsv",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KindShare {
    pub kind: DegradationKind,
    pub weight: f64,
    /// Copies of each training entry of this kind in the train manifest.
    pub resample: usize,
}

/// How clean images are turned into a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub mix: Vec<KindShare>,
    /// Fractions for train / val / test; normalized before use.
    pub split: [f64; 3],
    pub intensity: (f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            mix: DegradationKind::ALL.iter().map(|&kind| KindShare { kind, weight: 1.0, resample: 1 }).collect(),
            split: [0.8, 0.1, 0.1],
            intensity: (0.3, 1.0),
        }
    }
}

impl DatasetSpec {
    /// Parses `kind:weight[:resample]` items separated by commas, e.g.
    /// `rain:1,fog:1,rain+fog:1,snow:0.5:10`.
    pub fn parse_mix(text: &str) -> Result<Vec<KindShare>> {
        let mut out: Vec<KindShare> = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let mut parts = item.split(':');
            let kind: DegradationKind = parts.next().unwrap_or("").trim().parse()?;
            let num = |s: Option<&str>, what: &str| -> Result<Option<f64>> {
                s.map(|v| v.trim().parse::<f64>().map_err(|_| Error::InvalidSpec(format!("bad {what} in mix item {item:?}"))))
                    .transpose()
            };
            let weight = num(parts.next(), "weight")?.unwrap_or(1.0);
            let resample = num(parts.next(), "resample factor")?.unwrap_or(1.0);
            if parts.next().is_some() || !(weight >= 0.0) || resample < 1.0 || resample.fract() != 0.0 {
                return Err(Error::InvalidSpec(format!("bad mix item {item:?}")));
            }
            if out.iter().any(|s| s.kind == kind) {
                return Err(Error::InvalidSpec(format!("{kind} appears twice in the mix")));
            }
            out.push(KindShare { kind, weight, resample: resample as usize });
        }
        if out.is_empty() || out.iter().all(|s| s.weight == 0.0) {
            return Err(Error::InvalidSpec("the mix needs a kind with positive weight".into()));
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.intensity;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidSpec(format!("intensity range {lo}..{hi} outside [0, 1]")));
        }
        if self.split.iter().any(|&f| !(f >= 0.0)) || self.split.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidSpec("split fractions must be non-negative with a positive sum".into()));
        }
        if self.mix.is_empty() || self.mix.iter().any(|s| !(s.weight >= 0.0) || s.resample == 0) || self.mix.iter().all(|s| s.weight == 0.0) {
            return Err(Error::InvalidSpec("the mix needs a kind with positive weight".into()));
        }
        Ok(())
    }
}

/// Splits `n` items into parts proportional to `weights` (largest remainder,
/// ties to the earlier part).
pub fn proportional_counts(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle().take(weights.len() * 2) {
        if left == 0 {
            break;
        }
        if weights[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub lq: PathBuf,
    pub hq: PathBuf,
    pub kind: DegradationKind,
    pub intensity: f64,
    pub seed: u64,
    pub scene: String,
}

impl ManifestEntry {
    pub fn spec(&self) -> Result<DegradationSpec> {
        DegradationSpec::new(self.kind, self.intensity, self.seed)
    }

    /// Loads both images; `lq` and `hq` are resolved paths.
    pub fn load(&self) -> Result<SamplePair> {
        let spec = self.spec()?;
        let meta = CaptionMetadata { scene: self.scene.clone(), weather: spec.weather_phrase().to_string() };
        let lq = Image::load_png(&self.lq)?;
        let hq = Image::load_png(&self.hq)?;
        if (lq.height(), lq.width()) != (hq.height(), hq.width()) {
            return Err(Error::ShapeMismatch(vec![lq.height(), lq.width()], vec![hq.height(), hq.width()]));
        }
        Ok(SamplePair { lq, hq, spec, meta })
    }

    /// Whether re-degrading the stored clean image reproduces the stored
    /// degraded image after 8-bit quantization.
    pub fn verify(&self) -> Result<bool> {
        let pair = self.load()?;
        Ok(degrade(&pair.hq, &pair.spec)?.quantized() == pair.lq)
    }
}

pub const MANIFEST_HEADER: &str = "# lq\thq\tkind\tintensity\tseed\tscene";

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}",
            relative_to(&e.lq, base),
            relative_to(&e.hq, base),
            e.kind,
            e.intensity,
            e.seed,
            e.scene
        );
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a manifest, resolving image paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let err = |line: usize, reason: String| Error::Manifest { path: path.to_path_buf(), line, reason };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(err(line_no, format!("expected 6 tab-separated fields, got {}", f.len())));
        }
        let kind = f[2].parse().map_err(|e: Error| err(line_no, e.to_string()))?;
        let intensity: f64 = f[3].parse().map_err(|_| err(line_no, format!("bad intensity {:?}", f[3])))?;
        if !(0.0..=1.0).contains(&intensity) {
            return Err(err(line_no, format!("intensity {intensity} outside [0, 1]")));
        }
        let seed = f[4].parse().map_err(|_| err(line_no, format!("bad seed {:?}", f[4])))?;
        out.push(ManifestEntry {
            lq: base.join(f[0]),
            hq: base.join(f[1]),
            kind,
            intensity,
            seed,
            scene: f[5].to_string(),
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<SamplePair>> {
    let entries = read_manifest(path)?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    entries.iter().map(ManifestEntry::load).collect()
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDirectory(dir.to_path_buf()));
    }
    Ok(files)
}

/// Entries of one generated dataset, per split. Train entries include the
/// resampled copies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[ManifestEntry] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<ManifestEntry> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Degrades every clean PNG in `clean_dir` and writes `hq/`, `lq/` and one
/// manifest per split into `out_dir`. Kinds are assigned to a seeded shuffle
/// of the images in proportion to the mix weights, then each kind is split
/// into train / val / test.
pub fn make_dataset(clean_dir: &Path, spec: &DatasetSpec, seed: u64, out_dir: &Path) -> Result<Dataset> {
    spec.validate()?;
    let files = list_images(clean_dir)?;
    let images = files.iter().map(|f| Image::load_png(f)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir.join("hq"))?;
    std::fs::create_dir_all(out_dir.join("lq"))?;

    let mut order: Vec<usize> = (0..files.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let weights: Vec<f64> = spec.mix.iter().map(|s| s.weight).collect();
    let kind_counts = proportional_counts(order.len(), &weights);

    let mut dataset = Dataset::default();
    let mut start = 0;
    for (share, &count) in spec.mix.iter().zip(&kind_counts) {
        let members = &order[start..start + count];
        start += count;
        let split_counts = proportional_counts(members.len(), &spec.split);
        let mut offset = 0;
        for (split, &n) in Split::ALL.iter().zip(&split_counts) {
            for &idx in &members[offset..offset + n] {
                let s = sample_seed(seed, idx);
                let (lo, hi) = spec.intensity;
                let u: f64 = ChaCha8Rng::seed_from_u64(s).random();
                let intensity = lo + (hi - lo) * u;
                let spec = DegradationSpec::new(share.kind, intensity, s)?;
                let stem = files[idx].file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
                let hq_path = out_dir.join("hq").join(format!("{stem}.png"));
                let lq_path = out_dir.join("lq").join(format!("{stem}_{}.png", share.kind.as_str().replace('+', "_")));
                let hq = images[idx].quantized();
                hq.save_png(&hq_path)?;
                degrade(&hq, &spec)?.save_png(&lq_path)?;
                let entry = ManifestEntry {
                    lq: lq_path,
                    hq: hq_path,
                    kind: share.kind,
                    intensity,
                    seed: s,
                    scene: scene_label(&files[idx]),
                };
                let copies = if *split == Split::Train { share.resample } else { 1 };
                for _ in 0..copies {
                    dataset.split_mut(*split).push(entry.clone());
                }
            }
            offset += n;
        }
    }
    for split in Split::ALL {
        write_manifest(&out_dir.join(split.file_name()), dataset.split(split))?;
    }
    Ok(dataset)
}

/// `n` in-memory pairs of `size x size` procedural scenes, cycling through
/// the scene labels and degradation kinds with seeded intensities in
/// `[0.3, 0.9]`.
pub fn synthetic_pairs(n: usize, size: usize, seed: u64) -> Result<Vec<SamplePair>> {
    (0..n)
        .map(|i| {
            let s = sample_seed(seed, i);
            let label = super::scenes::SCENE_LABELS[i % super::scenes::SCENE_LABELS.len()];
            let kind = DegradationKind::ALL[i % DegradationKind::ALL.len()];
            let u: f64 = ChaCha8Rng::seed_from_u64(s).random();
            let hq = super::scenes::procedural_scene(label, size, size, s).quantized();
            SamplePair::new(hq, DegradationSpec::new(kind, 0.3 + 0.6 * u, s)?, label)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_labels_drop_numbering() {
        assert_eq!(scene_label(Path::new("/x/street_003.png")), "street");
        assert_eq!(scene_label(Path::new("mountain-12.png")), "mountain");
        assert_eq!(scene_label(Path::new("0001.png")), "scene");
    }

    #[test]
    fn proportional_counts_sum_to_n() {
        assert_eq!(proportional_counts(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(proportional_counts(5, &[0.0, 1.0]), vec![0, 5]);
        assert_eq!(proportional_counts(7, &[0.8, 0.1, 0.1]), vec![5, 1, 1]);
    }

    #[test]
    fn mix_parsing() {
        let m = DatasetSpec::parse_mix("rain:1,snow:0.5:10").unwrap();
        assert_eq!(m[1], KindShare { kind: DegradationKind::Snow, weight: 0.5, resample: 10 });
        assert!(DatasetSpec::parse_mix("rain:1,rain:2").is_err());
        assert!(DatasetSpec::parse_mix("hail:1").is_err());
        assert!(DatasetSpec::parse_mix("rain:1:0").is_err());
    }

    #[test]
    fn malformed_manifest_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, format!("{MANIFEST_HEADER}\na.png\tb.png\tfog\tnope\t1\tstreet\n")).unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Manifest { line: 2, .. })));
    }
}
