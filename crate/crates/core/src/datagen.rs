//! Scenario sampling, dataset generation and the `.abads` file format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simkit::{add_noise, simulate, TrackModelConfig, TrackProfile};

pub const DATASET_MAGIC: &[u8; 8] = b"ABADS001";
pub const RNG_ID: &str = "chacha8-stream/rand_chacha-0.9";

/// Closed interval of stiffness values, N/m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.lo + (self.hi - self.lo) * rng.random::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessRange {
    pub kp: Interval,
    pub kb: Interval,
}

/// Healthy (`r1`) and degraded (`r2`) support stiffness ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessRanges {
    pub r1: StiffnessRange,
    pub r2: StiffnessRange,
}

impl Default for StiffnessRanges {
    fn default() -> Self {
        StiffnessRanges {
            r1: StiffnessRange {
                kp: Interval::new(1.5e8, 3.0e8),
                kb: Interval::new(1.6e7, 2.2e7),
            },
            r2: StiffnessRange {
                kp: Interval::new(0.1e8, 1.5e8),
                kb: Interval::new(0.4e7, 1.6e7),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Constant,
    ReduceOne,
    ReduceThree,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::Constant, ScenarioKind::ReduceOne, ScenarioKind::ReduceThree];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn defect_len(self) -> usize {
        match self {
            ScenarioKind::Constant => 0,
            ScenarioKind::ReduceOne => 1,
            ScenarioKind::ReduceThree => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub defect_start: Option<usize>,
}

/// Draws a profile of `n` sleepers: a healthy base from R1, with one or
/// three contiguous sleepers redrawn from R2 for the reduction kinds.
pub fn sample_profile<R: Rng + ?Sized>(
    kind: ScenarioKind,
    n: usize,
    ranges: &StiffnessRanges,
    rng: &mut R,
) -> Result<(TrackProfile, Scenario)> {
    let len = kind.defect_len();
    if n < len.max(1) {
        return Err(Error::Config(format!("{n} sleepers cannot hold a {kind:?} defect")));
    }
    let kp = ranges.r1.kp.sample(rng);
    let kb = ranges.r1.kb.sample(rng);
    let mut profile = TrackProfile::uniform(n, kp, kb);
    let defect_start = if len == 0 {
        None
    } else {
        let start = rng.random_range(0..=n - len);
        for i in start..start + len {
            profile.kp[i] = ranges.r2.kp.sample(rng);
            profile.kb[i] = ranges.r2.kb.sample(rng);
        }
        Some(start)
    };
    Ok((profile, Scenario { kind, defect_start }))
}

/// Fractions of constant / reduce-one / reduce-three records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMix(pub [f64; 3]);

impl Default for ScenarioMix {
    fn default() -> Self {
        ScenarioMix([1.0 / 3.0; 3])
    }
}

impl ScenarioMix {
    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.0.iter().sum();
        if self.0.iter().any(|&f| !(f >= 0.0) || !f.is_finite()) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("scenario mix {:?} must be non-negative and sum to 1", self.0)));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` records; equal remainders go
    /// to the later scenario.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let exact: Vec<f64> = self.0.iter().map(|f| f * n as f64).collect();
        let mut counts = [0usize; 3];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..3).collect();
        let rem = |i: usize| exact[i] - exact[i].floor();
        order.sort_by(|&a, &b| rem(b).partial_cmp(&rem(a)).unwrap().then(b.cmp(&a)));
        for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub n_records: usize,
    pub mix: ScenarioMix,
    pub noise_ratio: f64,
    pub seed: u64,
    pub config: TrackModelConfig,
}

impl GenerateSpec {
    pub fn new(n_records: usize, seed: u64) -> Self {
        GenerateSpec {
            n_records,
            mix: ScenarioMix::default(),
            noise_ratio: 0.0,
            seed,
            config: TrackModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_records == 0 {
            return Err(Error::EmptyInput("dataset generation"));
        }
        if !(self.noise_ratio >= 0.0) || !self.noise_ratio.is_finite() {
            return Err(Error::Config(format!("noise ratio must be >= 0, got {}", self.noise_ratio)));
        }
        self.mix.validate()?;
        self.config.validate()
    }

    /// Scenario kind of every record: the mix counts, shuffled by a stream
    /// reserved for this purpose.
    pub fn kinds(&self) -> Vec<ScenarioKind> {
        let counts = self.mix.counts(self.n_records);
        let mut kinds: Vec<ScenarioKind> = ScenarioKind::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&k, c)| std::iter::repeat_n(k, c))
            .collect();
        let mut rng = record_rng(self.seed, u64::MAX);
        for i in (1..kinds.len()).rev() {
            kinds.swap(i, rng.random_range(0..=i));
        }
        kinds
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            n_records: self.n_records,
            n_sleepers: self.config.n_core_sleepers,
            samples_per_span: self.config.samples_per_span,
            sample_rate: self.config.sample_rate(),
            noise_ratio: self.noise_ratio,
            mix: self.mix,
            seed: self.seed,
            rng: RNG_ID.to_string(),
            config: self.config.clone(),
        }
    }
}

/// Independent generator for `stream` under `seed`. Stream `2i` draws the
/// profile of record `i`, stream `2i + 1` its noise.
pub fn record_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n_records: usize,
    pub n_sleepers: usize,
    pub samples_per_span: usize,
    pub sample_rate: f64,
    pub noise_ratio: f64,
    pub mix: ScenarioMix,
    pub seed: u64,
    pub rng: String,
    pub config: TrackModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub kind: ScenarioKind,
    pub defect_start: Option<usize>,
    pub profile: TrackProfile,
    pub signal: Vec<f32>,
}

impl DatasetRecord {
    pub fn scenario(&self) -> Scenario {
        Scenario {
            kind: self.kind,
            defect_start: self.defect_start,
        }
    }

    /// Labels as `S × 2` rows of `[kp, kb]`.
    pub fn label_rows(&self) -> Vec<[f64; 2]> {
        self.profile.kp.iter().zip(&self.profile.kb).map(|(&p, &b)| [p, b]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.header.samples_per_span
    }

    pub fn kind_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.kind.code() as usize] += 1;
        }
        c
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self.records.get(i).ok_or(Error::IndexOutOfRange { index: i, count: self.len() })?;
            records.push(r.clone());
        }
        let mut header = self.header.clone();
        header.n_records = records.len();
        Ok(Dataset { header, records })
    }

    /// The same records with noise added as `generate` would have added it
    /// for `ratio`. Only valid on a noise-free dataset.
    pub fn with_noise(&self, ratio: f64) -> Result<Dataset> {
        if self.header.noise_ratio != 0.0 {
            return Err(Error::Config("noise can only be derived from a noise-free dataset".into()));
        }
        let records = self
            .records
            .par_iter()
            .enumerate()
            .map(|(i, r)| DatasetRecord {
                signal: noisy_signal(&r.signal, ratio, self.header.seed, i),
                ..r.clone()
            })
            .collect();
        let mut header = self.header.clone();
        header.noise_ratio = ratio;
        Ok(Dataset { header, records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(std::io::Error::other)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for r in &self.records {
            w.write_all(&[r.kind.code(), r.defect_start.map_or(-1i8, |s| s as i8) as u8])?;
            for v in r.profile.kp.iter().chain(&r.profile.kb) {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in &r.signal {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let hlen = u32::from_le_bytes(cur.take(4, "header length")?.try_into().unwrap()) as usize;
        let hpos = cur.pos;
        let header: DatasetHeader = serde_json::from_slice(cur.take(hlen, "header")?).map_err(|e| Error::Format {
            offset: hpos as u64,
            reason: format!("invalid header: {e}"),
        })?;
        let n = header.n_sleepers;
        let len = n * header.samples_per_span;
        let mut records = Vec::with_capacity(header.n_records);
        for _ in 0..header.n_records {
            let kpos = cur.pos;
            let tag = cur.take(2, "record tag")?;
            let kind = ScenarioKind::from_code(tag[0]).ok_or_else(|| Error::Format {
                offset: kpos as u64,
                reason: format!("unknown scenario kind {}", tag[0]),
            })?;
            let start = tag[1] as i8;
            let defect_start = if start < 0 { None } else { Some(start as usize) };
            let labels: Vec<f64> = cur
                .take(16 * n, "labels")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let signal: Vec<f32> = cur
                .take(4 * len, "signal")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(DatasetRecord {
                kind,
                defect_start,
                profile: TrackProfile {
                    kp: labels[..n].to_vec(),
                    kb: labels[n..].to_vec(),
                },
                signal,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format {
                offset: cur.pos as u64,
                reason: format!("{} trailing bytes", bytes.len() - cur.pos),
            });
        }
        Ok(Dataset { header, records })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Noise is added to the stored single-precision signal so that deriving a
/// noisy dataset from a clean file matches direct generation bit for bit.
fn noisy_signal(clean: &[f32], ratio: f64, seed: u64, index: usize) -> Vec<f32> {
    if ratio == 0.0 {
        return clean.to_vec();
    }
    let wide: Vec<f64> = clean.iter().map(|&v| v as f64).collect();
    let mut rng = record_rng(seed, 2 * index as u64 + 1);
    add_noise(&wide, ratio, &mut rng).into_iter().map(|v| v as f32).collect()
}

/// Record `index` of the dataset described by `spec`, computed on its own.
pub fn generate_record(spec: &GenerateSpec, kinds: &[ScenarioKind], index: usize) -> Result<DatasetRecord> {
    let mut rng = record_rng(spec.seed, 2 * index as u64);
    let ranges = StiffnessRanges::default();
    let (profile, scenario) = sample_profile(kinds[index], spec.config.n_core_sleepers, &ranges, &mut rng)?;
    let record = simulate(&spec.config, &profile)?;
    let clean: Vec<f32> = record.signal.iter().map(|&v| v as f32).collect();
    Ok(DatasetRecord {
        kind: scenario.kind,
        defect_start: scenario.defect_start,
        profile,
        signal: noisy_signal(&clean, spec.noise_ratio, spec.seed, index),
    })
}

/// Generates every record, in parallel on the current rayon pool; results
/// are collected in index order.
pub fn generate(spec: &GenerateSpec) -> Result<Dataset> {
    spec.validate()?;
    let kinds = spec.kinds();
    let records = (0..spec.n_records)
        .into_par_iter()
        .map(|i| generate_record(spec, &kinds, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: spec.header(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TrackModelConfig {
        TrackModelConfig {
            n_core_sleepers: 4,
            n_buffer_sleepers: 4,
            lead_in_spans: 2,
            samples_per_span: 40,
            elements_per_span: 4,
            ..TrackModelConfig::default()
        }
    }

    #[test]
    fn mix_counts_largest_remainder() {
        assert_eq!(ScenarioMix::default().counts(1000), [333, 333, 334]);
        assert_eq!(ScenarioMix::default().counts(3), [1, 1, 1]);
        assert_eq!(ScenarioMix::default().counts(2), [0, 1, 1]);
        assert_eq!(ScenarioMix([1.0, 0.0, 0.0]).counts(7), [7, 0, 0]);
        assert_eq!(ScenarioMix([0.5, 0.25, 0.25]).counts(10), [5, 2, 3]);
        assert!(ScenarioMix([0.5, 0.6, -0.1]).validate().is_err());
    }

    #[test]
    fn constant_profile_in_r1() {
        let r = StiffnessRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (p, s) = sample_profile(ScenarioKind::Constant, 10, &r, &mut rng).unwrap();
            assert_eq!(s.defect_start, None);
            assert!(p.kp.iter().all(|&v| v == p.kp[0] && r.r1.kp.contains(v)));
            assert!(p.kb.iter().all(|&v| v == p.kb[0] && r.r1.kb.contains(v)));
        }
    }

    #[test]
    fn reductions_hit_exactly_the_defect() {
        let r = StiffnessRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [ScenarioKind::ReduceOne, ScenarioKind::ReduceThree] {
            for _ in 0..200 {
                let (p, s) = sample_profile(kind, 10, &r, &mut rng).unwrap();
                let start = s.defect_start.unwrap();
                assert!(start + kind.defect_len() <= 10);
                for i in 0..10 {
                    let reduced = (start..start + kind.defect_len()).contains(&i);
                    if reduced {
                        assert!(r.r2.kp.contains(p.kp[i]) && r.r2.kb.contains(p.kb[i]));
                    } else {
                        assert!(r.r1.kp.contains(p.kp[i]) && r.r1.kb.contains(p.kb[i]));
                        assert_eq!((p.kp[i], p.kb[i]), (p.kp[0].max(p.kp[9]), p.kb[0].max(p.kb[9])));
                    }
                }
            }
        }
    }

    #[test]
    fn defect_location_uniform() {
        let r = StiffnessRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut hist = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            let (_, s) = sample_profile(ScenarioKind::ReduceOne, 10, &r, &mut rng).unwrap();
            hist[s.defect_start.unwrap()] += 1;
        }
        let e = n as f64 / 10.0;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // 99th percentile of chi-squared with 9 degrees of freedom
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn single_record_regenerates_identically() {
        let mut spec = GenerateSpec::new(3, 11);
        spec.config = small_config();
        spec.noise_ratio = 0.15;
        let full = generate(&spec).unwrap();
        let kinds = spec.kinds();
        let alone = generate_record(&spec, &kinds, 2).unwrap();
        assert_eq!(full.records[2], alone);
        assert_eq!(full.header.noise_ratio, 0.15);
        assert_eq!(full.kind_counts(), [1, 1, 1]);
    }

    #[test]
    fn derived_noise_matches_direct_generation() {
        let mut spec = GenerateSpec::new(4, 5);
        spec.config = small_config();
        let clean = generate(&spec).unwrap();
        spec.noise_ratio = 0.15;
        let noisy = generate(&spec).unwrap();
        assert_eq!(clean.with_noise(0.15).unwrap(), noisy);
        assert_ne!(clean.records[0].signal, noisy.records[0].signal);
    }

    #[test]
    fn file_round_trip_and_format_errors() {
        let mut spec = GenerateSpec::new(3, 9);
        spec.config = small_config();
        let ds = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.abads");
        ds.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        assert_eq!(back, ds);
        let bytes = ds.to_bytes();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 5];
        match Dataset::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 12 && (offset as usize) < cut.len()),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Dataset::from_bytes(&extra), Err(Error::Format { .. })));
        let missing = dir.path().join("nope.abads");
        assert!(matches!(Dataset::read(&missing), Err(Error::Io { .. })));
    }

    #[test]
    fn labels_within_ranges() {
        let mut spec = GenerateSpec::new(6, 21);
        spec.config = small_config();
        let ds = generate(&spec).unwrap();
        let r = StiffnessRanges::default();
        for rec in &ds.records {
            for (&p, &b) in rec.profile.kp.iter().zip(&rec.profile.kb) {
                assert!(r.r1.kp.contains(p) || r.r2.kp.contains(p));
                assert!(r.r1.kb.contains(b) || r.r2.kb.contains(b));
            }
        }
    }
}
