//! Synthetic multi-label images with planted pseudo-AU blobs.
//!
//! Labels come from a pairwise binary model sampled by exact enumeration;
//! every active AU adds a Gaussian blob of its own radius at its own
//! location, shifted per subject. Samples are stored one per file in the
//! AUTD format with a JSON-lines manifest.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{expect_magic, read_exact, read_f32_payload, read_shape, read_u16, read_u32, read_u64, write_f32_payload, write_shape};
use crate::losses::RATE_MIN;
use crate::tensor::{Rng, Tensor};

pub const SAMPLE_MAGIC: &[u8; 4] = b"AUTD";
pub const SAMPLE_VERSION: u16 = 1;
pub const MAX_ENUM_AUS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_aus: usize,
    pub image_size: usize,
    pub channels: usize,
    pub samples: usize,
    pub subjects: usize,
    /// Blob radius σ_i in pixels per AU.
    pub pattern_scales: Vec<f64>,
    pub base_rates: Vec<f64>,
    /// Symmetric logit couplings with zero diagonal.
    pub couplings: Vec<Vec<f64>>,
    pub amplitude: f64,
    pub noise_std: f64,
    /// Per-subject position jitter bound in pixels.
    pub subject_jitter: f64,
    /// Std of the per-subject intensity offset.
    pub subject_intensity: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_aus: 4,
            image_size: 32,
            channels: 1,
            samples: 320,
            subjects: 8,
            pattern_scales: vec![1.0, 2.0, 3.0, 4.5],
            base_rates: vec![0.2, 0.3, 0.4, 0.5],
            couplings: vec![vec![0.0; 4]; 4],
            amplitude: 1.0,
            noise_std: 0.1,
            subject_jitter: 1.0,
            subject_intensity: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_aus;
        if n == 0 || n > MAX_ENUM_AUS {
            return Err(Error::config(format!("num_aus must be in 1..={MAX_ENUM_AUS}, got {n}")));
        }
        if self.image_size == 0 || self.channels == 0 || self.samples == 0 || self.subjects == 0 {
            return Err(Error::config("image_size, channels, samples and subjects must be >= 1"));
        }
        if self.pattern_scales.len() != n || self.base_rates.len() != n || self.couplings.len() != n {
            return Err(Error::config("per-AU spec lists must have num_aus entries"));
        }
        if self.pattern_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("pattern scales must be positive"));
        }
        if self.base_rates.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
            return Err(Error::config("base rates must lie in (0, 1)"));
        }
        for (i, row) in self.couplings.iter().enumerate() {
            if row.len() != n {
                return Err(Error::config("coupling matrix must be num_aus × num_aus"));
            }
            if row[i] != 0.0 {
                return Err(Error::config("coupling diagonal must be zero"));
            }
            for (j, &c) in row.iter().enumerate() {
                if c != self.couplings[j][i] || !c.is_finite() {
                    return Err(Error::config("coupling matrix must be finite and symmetric"));
                }
            }
        }
        if !(self.noise_std >= 0.0 && self.subject_jitter >= 0.0 && self.subject_intensity >= 0.0) {
            return Err(Error::config("noise and subject offsets must be non-negative"));
        }
        Ok(())
    }

    /// AU blob centers: evenly spaced on a ring around the image center.
    pub fn centers(&self) -> Vec<(f64, f64)> {
        let s = self.image_size as f64;
        let c = (s - 1.0) / 2.0;
        let r = 0.28 * s;
        (0..self.num_aus)
            .map(|i| {
                let a = std::f64::consts::TAU * (i as f64 + 0.5) / self.num_aus as f64;
                (c + r * a.sin(), c + r * a.cos())
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Label model
// ---------------------------------------------------------------------------

/// Exact distribution of `P(y) ∝ exp(Σ h_i y_i + Σ_{i<j} J_ij y_i y_j)` with
/// `h_i = logit(rate_i)`, over all `2^N` states indexed by bit pattern.
pub fn label_distribution(rates: &[f64], couplings: &[Vec<f64>]) -> Vec<f64> {
    let n = rates.len();
    let h: Vec<f64> = rates.iter().map(|r| (r / (1.0 - r)).ln()).collect();
    let energies: Vec<f64> = (0..1usize << n)
        .map(|state| {
            let mut e = 0.0;
            for i in 0..n {
                if state >> i & 1 == 1 {
                    e += h[i];
                    for j in i + 1..n {
                        if state >> j & 1 == 1 {
                            e += couplings[i][j];
                        }
                    }
                }
            }
            e
        })
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

fn sample_state(cdf: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Records and the sample file
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub subject: u32,
    /// `[C, H, W]`.
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// `"AUTD" | u16 version | u8 rank | u32 dims | f32 payload`, followed by a
/// trailer `u64 id | u32 subject | u16 n_labels | u8 labels`.
pub fn write_sample<W: Write>(mut w: W, rec: &SampleRecord) -> Result<()> {
    if rec.labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    let n = u16::try_from(rec.labels.len()).map_err(|_| Error::format("too many labels"))?;
    w.write_all(SAMPLE_MAGIC)?;
    w.write_all(&SAMPLE_VERSION.to_le_bytes())?;
    write_shape(&mut w, rec.image.shape())?;
    write_f32_payload(&mut w, &rec.image)?;
    w.write_all(&rec.id.to_le_bytes())?;
    w.write_all(&rec.subject.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&rec.labels)?;
    Ok(())
}

pub fn read_sample<R: Read>(mut r: R) -> Result<SampleRecord> {
    expect_magic(&mut r, SAMPLE_MAGIC)?;
    let version = read_u16(&mut r)?;
    if version != SAMPLE_VERSION {
        return Err(Error::format(format!("unsupported sample file version {version}")));
    }
    let shape = read_shape(&mut r)?;
    let image = read_f32_payload(&mut r, &shape)?;
    let id = read_u64(&mut r)?;
    let subject = read_u32(&mut r)?;
    let n = read_u16(&mut r)? as usize;
    let mut labels = vec![0u8; n];
    read_exact(&mut r, &mut labels)?;
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::format("label byte is not 0 or 1"));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format("trailing bytes after sample"));
    }
    Ok(SampleRecord { id, subject, image, labels })
}

pub fn save_sample(path: &Path, rec: &SampleRecord) -> Result<()> {
    let mut buf = Vec::new();
    write_sample(&mut buf, rec)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_sample(path: &Path) -> Result<SampleRecord> {
    read_sample(fs::read(path)?.as_slice())
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: u64,
    pub subject_id: u32,
    pub labels: Vec<u8>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_samples: usize,
    pub num_aus: usize,
    pub occurrence_rates: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct SubjectLook {
    dy: f64,
    dx: f64,
    shift: f64,
}

fn subject_look(spec: &SyntheticSpec, subject: u32) -> SubjectLook {
    let mut rng = Rng::derive(spec.seed ^ 0x5eb1_ec75, subject as u64);
    let j = spec.subject_jitter;
    SubjectLook {
        dy: rng.uniform_range(-j, j),
        dx: rng.uniform_range(-j, j),
        shift: rng.normal() * spec.subject_intensity,
    }
}

/// Noise-free rendering of the blobs for `labels` (plus subject offsets).
fn render(spec: &SyntheticSpec, labels: &[u8], look: SubjectLook) -> Vec<f64> {
    let s = spec.image_size;
    let mut plane = vec![look.shift; s * s];
    for ((&on, &sigma), &(cy, cx)) in labels.iter().zip(&spec.pattern_scales).zip(&spec.centers()) {
        if on == 0 {
            continue;
        }
        let (cy, cx) = (cy + look.dy, cx + look.dx);
        for y in 0..s {
            for x in 0..s {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                plane[y * s + x] += spec.amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    plane
}

pub fn generate_sample(spec: &SyntheticSpec, cdf: &[f64], id: u64) -> SampleRecord {
    let mut rng = Rng::derive(spec.seed, id);
    let state = sample_state(cdf, &mut rng);
    let labels: Vec<u8> = (0..spec.num_aus).map(|i| (state >> i & 1) as u8).collect();
    let subject = (id % spec.subjects as u64) as u32;
    let plane = render(spec, &labels, subject_look(spec, subject));
    let (c, s) = (spec.channels, spec.image_size);
    let image = Tensor::from_fn(&[c, s, s], |i| (plane[i % (s * s)] + rng.normal() * spec.noise_std) as f32);
    SampleRecord { id, subject, image, labels }
}

/// All samples in id order, generated in parallel with per-id seeds.
pub fn generate_records(spec: &SyntheticSpec) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let cdf = cumulative(&label_distribution(&spec.base_rates, &spec.couplings));
    Ok((0..spec.samples as u64)
        .into_par_iter()
        .map(|id| generate_sample(spec, &cdf, id))
        .collect())
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const SPEC_FILE: &str = "spec.json";

/// Writes `samples/{id}.autd`, `manifest.jsonl`, `stats.json` and a copy of
/// the spec under `out_dir`; returns the manifest path.
pub fn generate_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    let records = generate_records(spec)?;
    let sample_dir = out_dir.join("samples");
    fs::create_dir_all(&sample_dir)?;
    records
        .par_iter()
        .map(|r| save_sample(&sample_dir.join(sample_file(r.id)), r))
        .collect::<Result<Vec<()>>>()?;
    let rows: Vec<ManifestRow> = records
        .iter()
        .map(|r| ManifestRow {
            id: r.id,
            subject_id: r.subject,
            labels: r.labels.clone(),
            file: format!("samples/{}", sample_file(r.id)),
        })
        .collect();
    let mut manifest = String::new();
    for row in &rows {
        manifest.push_str(&serde_json::to_string(row)?);
        manifest.push('\n');
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest)?;
    let labels: Vec<&[u8]> = rows.iter().map(|r| r.labels.as_slice()).collect();
    let stats = DatasetStats {
        num_samples: rows.len(),
        num_aus: spec.num_aus,
        occurrence_rates: label_means(&labels)?,
    };
    fs::write(out_dir.join(STATS_FILE), serde_json::to_string_pretty(&stats)? + "\n")?;
    fs::write(out_dir.join(SPEC_FILE), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(manifest_path)
}

fn sample_file(id: u64) -> String {
    format!("{id:06}.autd")
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Unclamped per-AU label means.
fn label_means(labels: &[&[u8]]) -> Result<Vec<f64>> {
    let first = labels.first().ok_or_else(|| Error::Data("no labelled rows".into()))?;
    let n = first.len();
    let mut sums = vec![0u64; n];
    for row in labels {
        if row.len() != n {
            return Err(Error::Data("rows disagree on label count".into()));
        }
        for (s, &l) in sums.iter_mut().zip(row.iter()) {
            *s += l as u64;
        }
    }
    Ok(sums.iter().map(|&s| s as f64 / labels.len() as f64).collect())
}

/// Per-AU label mean over `labels`, clamped to `[1e-3, 1]`.
pub fn occurrence_rates(labels: &[&[u8]]) -> Result<Vec<f64>> {
    Ok(label_means(labels)?.into_iter().map(|r| r.clamp(RATE_MIN, 1.0)).collect())
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let rows = read_manifest(&dir.join(MANIFEST_FILE))?;
        if rows.is_empty() {
            return Err(Error::Data("manifest has no rows".into()));
        }
        let samples = rows
            .par_iter()
            .map(|row| {
                let rec = load_sample(&dir.join(&row.file))?;
                if rec.id != row.id || rec.subject != row.subject_id || rec.labels != row.labels {
                    return Err(Error::Data(format!("sample {} disagrees with manifest", row.id)));
                }
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn num_aus(&self) -> usize {
        self.samples.first().map_or(0, |s| s.labels.len())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn rates(&self) -> Result<Vec<f64>> {
        let labels: Vec<&[u8]> = self.samples.iter().map(|s| s.labels.as_slice()).collect();
        occurrence_rates(&labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            image_size: 16,
            samples: 40,
            pattern_scales: vec![0.8, 1.5, 2.2, 3.0],
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(spec().validate().is_ok());
        let mut s = spec();
        s.couplings[0][1] = 0.5;
        assert!(s.validate().is_err());
        s.couplings[1][0] = 0.5;
        assert!(s.validate().is_ok());
        s.couplings[2][2] = 1.0;
        assert!(s.validate().is_err());
        assert!(SyntheticSpec { base_rates: vec![0.0, 0.3, 0.3, 0.3], ..spec() }.validate().is_err());
        assert!(SyntheticSpec { num_aus: 13, ..spec() }.validate().is_err());
    }

    #[test]
    fn sample_round_trip_is_bit_exact() {
        let rec = generate_records(&spec()).unwrap().remove(3);
        let mut buf = Vec::new();
        write_sample(&mut buf, &rec).unwrap();
        assert_eq!(&buf[..4], b"AUTD");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(buf[6], 3);
        let back = read_sample(buf.as_slice()).unwrap();
        assert_eq!(back, rec);
        let mut again = Vec::new();
        write_sample(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn corrupt_sample_files_are_format_errors() {
        let rec = generate_records(&spec()).unwrap().remove(0);
        let mut buf = Vec::new();
        write_sample(&mut buf, &rec).unwrap();
        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(matches!(read_sample(bad.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_sample(bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_sample(&buf[..buf.len() - 2]), Err(Error::Format(_))));
        // first dim set to 2^31
        let mut bad = buf.clone();
        bad[7..11].copy_from_slice(&(1u32 << 31).to_le_bytes());
        assert!(matches!(read_sample(bad.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn exact_sampler_matches_table() {
        let rates = [0.3, 0.6, 0.2];
        let j = vec![vec![0.0, 1.2, -0.8], vec![1.2, 0.0, 0.4], vec![-0.8, 0.4, 0.0]];
        let probs = label_distribution(&rates, &j);
        // brute-force table from unnormalized weights
        let h: Vec<f64> = rates.iter().map(|r: &f64| (r / (1.0 - r)).ln()).collect();
        let raw: Vec<f64> = (0..8usize)
            .map(|s| {
                let y: Vec<f64> = (0..3).map(|i| (s >> i & 1) as f64).collect();
                let mut e = 0.0;
                for i in 0..3 {
                    e += h[i] * y[i];
                    for k in i + 1..3 {
                        e += j[i][k] * y[i] * y[k];
                    }
                }
                e.exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        for (a, b) in probs.iter().zip(&raw) {
            assert!((a - b / z).abs() < 1e-12);
        }
        let cdf = cumulative(&probs);
        let mut rng = Rng::new(7);
        let mut counts = [0usize; 8];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_state(&cdf, &mut rng)] += 1;
        }
        let tv: f64 = counts.iter().zip(&probs).map(|(&c, p)| (c as f64 / draws as f64 - p).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn independent_labels_have_base_rate_and_no_correlation() {
        let s = SyntheticSpec { samples: 2000, base_rates: vec![0.3; 4], image_size: 8, ..spec() };
        let recs = generate_records(&s).unwrap();
        let labels: Vec<&[u8]> = recs.iter().map(|r| r.labels.as_slice()).collect();
        let rates = occurrence_rates(&labels).unwrap();
        for r in &rates {
            assert!((r - 0.3).abs() < 0.03, "rate {r}");
        }
        for i in 0..4 {
            for j in i + 1..4 {
                let (mi, mj) = (rates[i], rates[j]);
                let cov: f64 = labels.iter().map(|l| (l[i] as f64 - mi) * (l[j] as f64 - mj)).sum::<f64>() / 2000.0;
                let rho = cov / (mi * (1.0 - mi) * mj * (1.0 - mj)).sqrt();
                assert!(rho.abs() < 0.1, "rho {rho}");
            }
        }
    }

    #[test]
    fn larger_scale_gives_larger_footprint() {
        let s = SyntheticSpec { image_size: 32, ..SyntheticSpec::default() };
        let look = SubjectLook { dy: 0.0, dx: 0.0, shift: 0.0 };
        let footprints: Vec<usize> = (0..4)
            .map(|i| {
                let mut labels = vec![0u8; 4];
                labels[i] = 1;
                render(&s, &labels, look).iter().filter(|&&v| v > 0.5 * s.amplitude).count()
            })
            .collect();
        for w in footprints.windows(2) {
            assert!(w[0] < w[1], "{footprints:?}");
        }
    }

    #[test]
    fn rates_and_clamp() {
        let rows: Vec<&[u8]> = vec![&[1, 1, 0], &[0, 1, 0], &[1, 1, 0], &[0, 1, 0]];
        assert_eq!(occurrence_rates(&rows).unwrap(), vec![0.5, 1.0, RATE_MIN]);
        assert!(occurrence_rates(&[]).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_consistent() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate_dataset(&spec(), a.path()).unwrap();
        generate_dataset(&spec(), b.path()).unwrap();
        for f in [MANIFEST_FILE, STATS_FILE, "samples/000017.autd"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let rows = read_manifest(&m).unwrap();
        assert!(rows.windows(2).all(|w| w[0].id < w[1].id));
        let stats: DatasetStats = serde_json::from_str(&fs::read_to_string(a.path().join(STATS_FILE)).unwrap()).unwrap();
        let ds = Dataset::load(a.path()).unwrap();
        let labels: Vec<&[u8]> = ds.samples.iter().map(|s| s.labels.as_slice()).collect();
        assert_eq!(stats.occurrence_rates, label_means(&labels).unwrap());
        assert_eq!(ds.samples.len(), 40);
    }
}
