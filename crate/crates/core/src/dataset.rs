//! WAV ingestion, DCASE-style manifests and a synthetic stand-in dataset.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::{log_mel, FrontendConfig, Spectrogram, Waveform};

/// The ten TAU Urban Acoustic Scenes classes, in label order.
pub const TAU_SCENES: [&str; 10] = [
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
];

pub const SAMPLE_RATE: u32 = 44_100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(TAU_SCENES.iter().map(|s| s.to_string()).collect()).unwrap()
    }
}

impl Vocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let unique: HashSet<&String> = names.iter().collect();
        if names.is_empty() || unique.len() != names.len() {
            return Err(Error::Config("vocabulary must be non-empty and unique".into()));
        }
        Ok(Self { names })
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> Vec<&str> {
        self.names.iter().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub waveform: Waveform,
    pub label: usize,
    pub clip_id: String,
    pub device_id: Option<String>,
}

/// A network-ready labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub spectrogram: Spectrogram,
    pub label: usize,
}

fn wav_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads a mono 16- or 24-bit PCM file at 44100 Hz, scaling by the type's
/// full-scale value (`2^(bits−1)`).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(wav_error(path, "only integer PCM is supported"));
    }
    if spec.channels != 1 {
        return Err(wav_error(path, format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.bits_per_sample != 16 && spec.bits_per_sample != 24 {
        return Err(wav_error(
            path,
            format!("expected 16- or 24-bit samples, found {}", spec.bits_per_sample),
        ));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(wav_error(
            path,
            format!("expected {SAMPLE_RATE} Hz, found {} Hz (no resampling)", spec.sample_rate),
        ));
    }
    let full_scale = f64::from(1u32 << (spec.bits_per_sample - 1));
    let samples = reader
        .into_samples::<i32>()
        .map(|s| s.map(|v| (f64::from(v) / full_scale) as f32))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e.to_string()))?;
    if samples.is_empty() {
        return Err(wav_error(path, "zero-length waveform"));
    }
    Waveform::new(samples, spec.sample_rate).map_err(|e| wav_error(path, e.to_string()))
}

/// Writes mono PCM at the waveform's rate, rounding to the nearest code and
/// saturating at full scale.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, bits: u16) -> Result<()> {
    let path = path.as_ref();
    if bits != 16 && bits != 24 {
        return Err(wav_error(path, format!("cannot write {bits}-bit PCM")));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: bits,
        sample_format: hound::SampleFormat::Int,
    };
    let full_scale = f64::from(1u32 << (bits - 1));
    let (lo, hi) = (-full_scale, full_scale - 1.0);
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e.to_string()))?;
    for &s in &w.samples {
        let code = (f64::from(s) * full_scale).round().clamp(lo, hi) as i32;
        writer.write_sample(code).map_err(|e| wav_error(path, e.to_string()))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub device: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    pub vocabulary: Vocabulary,
}

/// Parses a tab-separated manifest. The header names the columns; the
/// `filename` and `scene_label` columns are required and a `source_label`
/// or `device` column is picked up when present. Without recognisable
/// names the first two columns are taken as filename and label.
pub fn parse_manifest_str(text: &str, split: Split, vocabulary: &Vocabulary) -> Result<DatasetManifest> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Manifest {
        row: 1,
        detail: "missing header line".into(),
    })?;
    let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |names: &[&str]| columns.iter().position(|c| names.contains(c));
    let file_col = find(&["filename", "file", "path"]).unwrap_or(0);
    let label_col = find(&["scene_label", "label", "scene"]).unwrap_or(1);
    let device_col = find(&["source_label", "device", "device_id"]);
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let row = i + 1;
        if !line.contains('\t') {
            return Err(Error::Manifest {
                row,
                detail: "missing tab separator".into(),
            });
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let field = |col: usize, what: &str| {
            fields.get(col).copied().ok_or_else(|| Error::Manifest {
                row,
                detail: format!("missing {what} column"),
            })
        };
        let path = field(file_col, "filename")?;
        let label_name = field(label_col, "scene_label")?;
        let label = vocabulary.index(label_name).ok_or_else(|| Error::Manifest {
            row,
            detail: format!("unknown scene label {label_name:?}"),
        })?;
        let device = device_col
            .and_then(|c| fields.get(c))
            .filter(|d| !d.is_empty())
            .map(|d| d.to_string());
        if !seen.insert(path.to_string()) {
            return Err(Error::Manifest {
                row,
                detail: format!("duplicate path {path:?}"),
            });
        }
        entries.push(ManifestEntry {
            path: path.to_string(),
            label,
            device,
        });
    }
    Ok(DatasetManifest {
        entries,
        split,
        vocabulary: vocabulary.clone(),
    })
}

pub fn parse_manifest(path: impl AsRef<Path>, split: Split, vocabulary: &Vocabulary) -> Result<DatasetManifest> {
    parse_manifest_str(&std::fs::read_to_string(path)?, split, vocabulary)
}

impl DatasetManifest {
    pub fn serialize(&self) -> String {
        let with_device = self.entries.iter().any(|e| e.device.is_some());
        let mut out = String::from("filename\tscene_label");
        if with_device {
            out.push_str("\tsource_label");
        }
        out.push('\n');
        for e in &self.entries {
            out.push_str(&e.path);
            out.push('\t');
            out.push_str(self.vocabulary.name(e.label).unwrap_or("?"));
            if with_device {
                out.push('\t');
                out.push_str(e.device.as_deref().unwrap_or(""));
            }
            out.push('\n');
        }
        out
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

pub fn load_clip(entry: &ManifestEntry, audio_root: &Path) -> Result<AudioClip> {
    let path: PathBuf = audio_root.join(&entry.path);
    Ok(AudioClip {
        waveform: read_wav(&path)?,
        label: entry.label,
        clip_id: entry.path.clone(),
        device_id: entry.device.clone(),
    })
}

/// Reads every clip of a manifest and converts it to a spectrogram, in
/// manifest order.
pub fn load_examples(manifest: &DatasetManifest, audio_root: &Path, cfg: &FrontendConfig) -> Result<Vec<Example>> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let clip = load_clip(e, audio_root)?;
            Ok(Example {
                spectrogram: log_mel(&clip.waveform, cfg)?,
                label: clip.label,
            })
        })
        .collect()
}

pub const SYNTH_MELS: usize = 64;
pub const SYNTH_FRAMES: usize = 51;
const SYNTH_BASE: f64 = -4.0;
const SYNTH_NOISE: f64 = 0.5;

/// Deterministic class pattern: every `(class + 2)`-th mel row is raised by
/// 3 (a comb whose spacing encodes the class) and the whole spectrogram is
/// shifted by `0.5 · class`. A lone band position would be invisible after
/// global average pooling; comb spacing and level survive it.
fn synth_pattern(class: usize, mel: usize) -> f64 {
    let comb = if mel % (class + 2) == 0 { 3.0 } else { 0.0 };
    comb + 0.5 * class as f64
}

fn synth_example(label: usize, rng: &mut ChaCha8Rng) -> Example {
    let noise = Normal::new(0.0, SYNTH_NOISE).unwrap();
    let mut data = Vec::with_capacity(SYNTH_MELS * SYNTH_FRAMES);
    for mel in 0..SYNTH_MELS {
        let offset = SYNTH_BASE + synth_pattern(label, mel);
        for _ in 0..SYNTH_FRAMES {
            data.push((offset + noise.sample(rng)) as f32);
        }
    }
    Example {
        spectrogram: Spectrogram::new(SYNTH_MELS, SYNTH_FRAMES, data).unwrap(),
        label,
    }
}

/// `n_per_class` examples of each of the ten classes, grouped by class.
pub fn synth_dataset(n_per_class: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..10)
        .flat_map(|c| std::iter::repeat_n(c, n_per_class))
        .map(|c| synth_example(c, &mut rng))
        .collect()
}

/// `total` examples with labels assigned round-robin, so class counts differ
/// by at most one.
pub fn synth_dataset_total(total: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..total).map(|i| synth_example(i % 10, &mut rng)).collect()
}

/// Per-class mean spectrogram; classes without examples get `None`.
pub fn class_means(data: &[Example], n_classes: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; n_classes];
    for e in data {
        let slot = sums[e.label].get_or_insert_with(|| (vec![0.0; e.spectrogram.data.len()], 0));
        for (s, &v) in slot.0.iter_mut().zip(&e.spectrogram.data) {
            *s += f64::from(v);
        }
        slot.1 += 1;
    }
    sums.into_iter()
        .map(|s| s.map(|(v, n)| v.into_iter().map(|x| x / n as f64).collect()))
        .collect()
}

/// Accuracy of a nearest-class-mean classifier fitted on `train`.
pub fn nearest_class_mean_accuracy(train: &[Example], test: &[Example], n_classes: usize) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let means = class_means(train, n_classes);
    let correct = test
        .iter()
        .filter(|e| {
            let best = means
                .iter()
                .enumerate()
                .filter_map(|(c, m)| m.as_ref().map(|m| (c, m)))
                .map(|(c, m)| {
                    let d: f64 = m.iter().zip(&e.spectrogram.data).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c);
            best == Some(e.label)
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Seeded shuffle followed by a split into `(first, rest)` where `first`
/// holds `round(n · fraction)` examples.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * fraction).round() as usize).min(n);
    let rest = idx.split_off(k);
    (idx, rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<f32> = (0..2000).map(|i| ((i as f32) * 0.01).sin() * 0.9).collect();
        let w = Waveform::new(samples.clone(), SAMPLE_RATE).unwrap();
        for bits in [16u16, 24] {
            let path = dir.path().join(format!("x{bits}.wav"));
            write_wav(&path, &w, bits).unwrap();
            let back = read_wav(&path).unwrap();
            let step = 1.0 / f64::from(1u32 << (bits - 1));
            for (a, b) in samples.iter().zip(&back.samples) {
                assert!((f64::from(*a) - f64::from(*b)).abs() <= step);
            }
        }
    }

    #[test]
    fn full_scale_codes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fs24.wav");
        let w = Waveform::new(vec![1.0; 10], SAMPLE_RATE).unwrap();
        write_wav(&path, &w, 24).unwrap();
        let back = read_wav(&path).unwrap();
        assert!(back.samples.iter().all(|&s| (f64::from(s) - 1.0).abs() <= 1.0 / f64::from(1u32 << 23)));

        let path = dir.path().join("min16.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        writer.write_sample(-32768i16).unwrap();
        writer.finalize().unwrap();
        assert_eq!(read_wav(&path).unwrap().samples, vec![-1.0]);
    }

    #[test]
    fn unsupported_wavs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, channels: u16, rate: u32, n: usize| {
            let path = dir.path().join(name);
            let spec = hound::WavSpec {
                channels,
                sample_rate: rate,
                bits_per_sample: 16,
                sample_format: hound::SampleFormat::Int,
            };
            let mut writer = hound::WavWriter::create(&path, spec).unwrap();
            for _ in 0..n * usize::from(channels) {
                writer.write_sample(0i16).unwrap();
            }
            writer.finalize().unwrap();
            path
        };
        let stereo = write("stereo.wav", 2, SAMPLE_RATE, 10);
        assert!(matches!(read_wav(&stereo), Err(Error::Wav { detail, .. }) if detail.contains("mono")));
        let rate = write("rate.wav", 1, 48_000, 10);
        assert!(matches!(read_wav(&rate), Err(Error::Wav { detail, .. }) if detail.contains("48000")));
        let empty = write("empty.wav", 1, SAMPLE_RATE, 0);
        assert!(matches!(read_wav(&empty), Err(Error::Wav { detail, .. }) if detail.contains("zero-length")));
    }

    #[test]
    fn manifest_parsing() {
        let v = Vocabulary::default();
        let m = parse_manifest_str("filename\tscene_label\na.wav\tpark\nb.wav\tairport\n", Split::Train, &v).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.labels(), vec![4, 0]);
        let err = parse_manifest_str("filename\tscene_label\na.wav\tpark\nb.wav\tspaceport\n", Split::Train, &v);
        assert!(matches!(err, Err(Error::Manifest { row: 3, .. })));
        let err = parse_manifest_str("filename\tscene_label\na.wav park\n", Split::Train, &v);
        assert!(matches!(err, Err(Error::Manifest { row: 2, detail }) if detail.contains("tab")));
        let err = parse_manifest_str("filename\tscene_label\na.wav\tpark\na.wav\tbus\n", Split::Train, &v);
        assert!(matches!(err, Err(Error::Manifest { row: 3, .. })));
    }

    #[test]
    fn dcase_columns_are_recognised() {
        let text = "filename\tscene_label\tidentifier\tsource_label\naudio/x.wav\ttram\tlisbon-1\ta\n";
        let m = parse_manifest_str(text, Split::Test, &Vocabulary::default()).unwrap();
        assert_eq!(m.entries[0].label, 9);
        assert_eq!(m.entries[0].device.as_deref(), Some("a"));
    }

    #[test]
    fn manifest_round_trip() {
        let v = Vocabulary::default();
        for text in [
            "filename\tscene_label\na.wav\tpark\nb.wav\tmetro\n",
            "filename\tscene_label\tsource_label\na.wav\tpark\ts1\nb.wav\tbus\t\n",
        ] {
            let m = parse_manifest_str(text, Split::Train, &v).unwrap();
            assert_eq!(m.serialize(), text);
            assert_eq!(parse_manifest_str(&m.serialize(), Split::Train, &v).unwrap(), m);
        }
    }

    #[test]
    fn synth_is_seeded_and_balanced() {
        let a = synth_dataset(10, 3);
        assert_eq!(a.len(), 100);
        assert_eq!(a, synth_dataset(10, 3));
        assert_ne!(a, synth_dataset(10, 4));
        for c in 0..10 {
            assert_eq!(a.iter().filter(|e| e.label == c).count(), 10);
        }
        let b = synth_dataset_total(64, 7);
        let counts: Vec<usize> = (0..10).map(|c| b.iter().filter(|e| e.label == c).count()).collect();
        assert_eq!(counts.iter().sum::<usize>(), 64);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn synth_is_separable_by_class_means() {
        let train = synth_dataset(10, 1);
        let test = synth_dataset(10, 2);
        assert!(nearest_class_mean_accuracy(&train, &test, 10).unwrap() > 0.9);
    }

    #[test]
    fn split_partitions_indices() {
        let (a, b) = split_indices(64, 0.1, 5);
        assert_eq!(a.len(), 6);
        assert_eq!(b.len(), 58);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert_eq!(split_indices(64, 0.1, 5), (a, b));
    }
}
