//! Named data sources, the per-draw mixing sampler and batch assembly.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::Field;
use crate::scenegen::{read_sample, DenseSample, Provenance};
use crate::task::Task;
use crate::tensor::Tensor;

/// Allowed deviation of the summed rates from 1.
pub const RATE_TOLERANCE: f64 = 1e-9;
/// Depth targets are divided by this so they fit the student's (0, 1) output.
pub const DEPTH_SCALE: f64 = 32.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    Synthetic,
    Pseudo,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::Synthetic => "synthetic",
            SourceKind::Pseudo => "pseudo",
        })
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "pseudo" => Ok(Self::Pseudo),
            other => Err(Error::Config(format!("unknown source kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSpec {
    pub name: String,
    pub rate: f64,
    pub kind: SourceKind,
    /// Sample indices belonging to this source.
    pub indices: Vec<usize>,
}

/// One sampler output: the source position in the source list and a sample index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub source: usize,
    pub sample: usize,
}

pub fn validate_sources(sources: &[SourceSpec]) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::Config("at least one data source is required".into()));
    }
    for s in sources {
        if s.indices.is_empty() {
            return Err(Error::Config(format!("data source {:?} is empty", s.name)));
        }
        if !(s.rate > 0.0 && s.rate <= 1.0) {
            return Err(Error::Config(format!(
                "rate of source {:?} must lie in (0, 1], got {}",
                s.name, s.rate
            )));
        }
    }
    let sum: f64 = sources.iter().map(|s| s.rate).sum();
    if (sum - 1.0).abs() > RATE_TOLERANCE {
        return Err(Error::Config(format!("source rates sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Endless stream of draws: a source is picked by rate, then a sample
/// uniformly within it, with replacement.
#[derive(Clone, Debug)]
pub struct MixSampler<R> {
    sources: Vec<SourceSpec>,
    cumulative: Vec<f64>,
    rng: R,
}

pub fn mix_sampler<R: Rng>(sources: Vec<SourceSpec>, rng: R) -> Result<MixSampler<R>> {
    validate_sources(&sources)?;
    let mut acc = 0.0;
    let cumulative = sources
        .iter()
        .map(|s| {
            acc += s.rate;
            acc
        })
        .collect();
    Ok(MixSampler {
        sources,
        cumulative,
        rng,
    })
}

impl<R> MixSampler<R> {
    pub fn sources(&self) -> &[SourceSpec] {
        &self.sources
    }
}

impl<R: Rng> Iterator for MixSampler<R> {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        let u: f64 = self.rng.gen();
        let total = *self.cumulative.last().expect("validated nonempty");
        // Rates may sum to 1 - 1e-9, so anything past the end goes to the last source.
        let source = self
            .cumulative
            .iter()
            .position(|&c| u * total < c)
            .unwrap_or(self.sources.len() - 1);
        let idx = &self.sources[source].indices;
        let sample = idx[self.rng.gen_range(0..idx.len())];
        Some(Draw { source, sample })
    }
}

/// Groups a draw stream into fixed-size batches.
#[derive(Clone, Debug)]
pub struct Batcher<I> {
    stream: I,
    batch_size: usize,
}

pub fn batcher<I: Iterator<Item = Draw>>(stream: I, batch_size: usize) -> Result<Batcher<I>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(Batcher { stream, batch_size })
}

impl<I: Iterator<Item = Draw>> Iterator for Batcher<I> {
    type Item = Vec<Draw>;

    fn next(&mut self) -> Option<Vec<Draw>> {
        let batch: Vec<Draw> = self.stream.by_ref().take(self.batch_size).collect();
        (batch.len() == self.batch_size).then_some(batch)
    }
}

/// Network input in `[-1, 1]`, NCHW.
pub fn image_tensor(samples: &[&DenseSample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Input("cannot stack an empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let hw = h * w;
    let mut data = vec![0.0f32; samples.len() * 3 * hw];
    for (n, s) in samples.iter().enumerate() {
        check_size(s, h, w)?;
        let item = &mut data[n * 3 * hw..(n + 1) * 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                item[c * hw + i] = 2.0 * s.rgb[3 * i + c] - 1.0;
            }
        }
    }
    Tensor::from_vec([samples.len(), 3, h, w], data)
}

fn check_size(s: &DenseSample, h: usize, w: usize) -> Result<()> {
    if (s.height, s.width) != (h, w) {
        return Err(Error::Shape(format!(
            "sample is {}x{}, batch is {h}x{w}",
            s.height, s.width
        )));
    }
    Ok(())
}

/// Task target in NCHW plus the validity mask. Depth is divided by
/// [`DEPTH_SCALE`]; mattes are valid everywhere.
pub fn target_field(samples: &[&DenseSample], task: Task) -> Result<(Field, Vec<bool>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Input("cannot stack an empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let hw = h * w;
    let c = task.output_channels();
    let mut data = Vec::with_capacity(samples.len() * c * hw);
    let mut mask = Vec::with_capacity(samples.len() * hw);
    for s in samples {
        check_size(s, h, w)?;
        match task {
            Task::Depth => {
                data.extend(s.depth.iter().map(|&d| f64::from(d) / DEPTH_SCALE));
                mask.extend_from_slice(&s.mask);
            }
            Task::Normal => {
                for k in 0..3 {
                    data.extend((0..hw).map(|i| f64::from(s.normal[3 * i + k])));
                }
                mask.extend_from_slice(&s.mask);
            }
            Task::Matting => {
                data.extend(s.matte.iter().map(|&m| f64::from(m)));
                mask.extend(std::iter::repeat_n(true, hw));
            }
        }
    }
    Ok((Field::new([samples.len(), c, h, w], data)?, mask))
}

/// A stacked training batch with per-item provenance.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub target: Field,
    pub mask: Vec<bool>,
    pub draws: Vec<Draw>,
    pub provenance: Vec<Provenance>,
}

pub fn assemble(samples: &[DenseSample], draws: &[Draw], task: Task) -> Result<Batch> {
    let picked = draws
        .iter()
        .map(|d| {
            samples.get(d.sample).ok_or_else(|| {
                Error::Input(format!("sample index {} beyond {} samples", d.sample, samples.len()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (target, mask) = target_field(&picked, task)?;
    Ok(Batch {
        images: image_tensor(&picked)?,
        target,
        mask,
        draws: draws.to_vec(),
        provenance: picked.iter().map(|s| s.provenance).collect(),
    })
}

/// One manifest line: `name<TAB>rate<TAB>kind<TAB>directory`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub rate: f64,
    pub kind: SourceKind,
    pub directory: PathBuf,
}

pub const MANIFEST_HEADER: &str = "name\trate\tkind\tdirectory";

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.name,
            e.rate,
            e.kind,
            e.directory.display()
        ));
    }
    out
}

/// Parse a manifest; the header line and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') || line == MANIFEST_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, rate, kind, dir] = fields[..] else {
            return Err(Error::Config(format!(
                "manifest line {}: expected 4 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        };
        let rate = rate.parse::<f64>().map_err(|_| {
            Error::Config(format!("manifest line {}: bad rate {rate:?}", lineno + 1))
        })?;
        out.push(ManifestEntry {
            name: name.to_string(),
            rate,
            kind: kind.parse()?,
            directory: PathBuf::from(dir),
        });
    }
    if out.is_empty() {
        return Err(Error::Config("manifest lists no sources".into()));
    }
    Ok(out)
}

/// DPR1 sample files in `dir`, sorted by name.
pub fn sample_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "dpr"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Every source of a manifest loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<DenseSample>,
    pub sources: Vec<SourceSpec>,
}

impl Dataset {
    /// Load a manifest; relative directories resolve against the manifest's folder.
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::new();
        let mut sources = Vec::new();
        for entry in parse_manifest(&text)? {
            let dir = base.join(&entry.directory);
            let start = samples.len();
            for p in sample_paths(&dir)? {
                samples.push(read_sample(&p)?);
            }
            sources.push(SourceSpec {
                name: entry.name,
                rate: entry.rate,
                kind: entry.kind,
                indices: (start..samples.len()).collect(),
            });
        }
        validate_sources(&sources)?;
        Ok(Self { samples, sources })
    }

    /// A single-source dataset over `samples`.
    pub fn single(name: &str, samples: Vec<DenseSample>) -> Self {
        let sources = vec![SourceSpec {
            name: name.to_string(),
            rate: 1.0,
            kind: SourceKind::Synthetic,
            indices: (0..samples.len()).collect(),
        }];
        Self { samples, sources }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
