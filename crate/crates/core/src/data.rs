//! Synthetic conditional waveforms and the `NFDS` dataset container.
//!
//! Each example is a few harmonics of a slowly varying fundamental with a
//! slowly varying amplitude. The conditioning carries, per frame of `hop`
//! samples, the natural log of the fundamental (cycles/sample) and the
//! amplitude.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"NFDS";
pub const DATASET_VERSION: u32 = 1;
/// Upper bound on the JSON header, so corrupt files cannot request huge buffers.
const MAX_HEADER: u64 = 1 << 20;
const MAX_LENGTH: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub length: usize,
    pub hop: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub amp_min: f64,
    pub amp_max: f64,
    /// Harmonics `p = 1..=partials`, weighted `2^-(p-1)`.
    pub partials: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Control knots across the example; controls are cosine-interpolated between them.
    pub knots: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            length: 4096,
            hop: 64,
            f0_min: 0.004,
            f0_max: 0.05,
            amp_min: 0.1,
            amp_max: 0.5,
            partials: 3,
            noise: 0.003,
            knots: 4,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.length > MAX_LENGTH {
            return bad(format!("length {} exceeds {MAX_LENGTH}", self.length));
        }
        if self.hop == 0 || self.length == 0 || self.length % self.hop != 0 {
            return bad(format!(
                "length {} must be a positive multiple of hop {}",
                self.length, self.hop
            ));
        }
        if !(self.f0_min > 0.0 && self.f0_min < self.f0_max && self.f0_max < 0.5) {
            return bad(format!(
                "need 0 < f0_min < f0_max < 0.5, got [{}, {}]",
                self.f0_min, self.f0_max
            ));
        }
        if !(self.amp_min >= 0.0 && self.amp_min <= self.amp_max && self.amp_max.is_finite()) {
            return bad(format!(
                "need 0 <= amp_min <= amp_max, got [{}, {}]",
                self.amp_min, self.amp_max
            ));
        }
        if self.partials == 0 || self.partials as f64 * self.f0_max >= 0.5 {
            return bad(format!(
                "{} partials of f0 up to {} alias or vanish",
                self.partials, self.f0_max
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise floor must be >= 0, got {}", self.noise));
        }
        if self.knots == 0 {
            return bad("at least one control knot is required".into());
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.length / self.hop
    }

    pub fn partial_weights(&self) -> Vec<f64> {
        (0..self.partials).map(|p| 0.5f64.powi(p as i32)).collect()
    }

    pub fn record_bytes(&self) -> usize {
        self.length
            .saturating_mul(4)
            .saturating_add(self.frames().saturating_mul(8))
            .saturating_add(8)
    }
}

/// One waveform with its conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub seed: u64,
    /// `[length]`, within `[-1, 1]`.
    pub x: Tensor<f32>,
    /// `[2, frames]`: log f0, amplitude.
    pub c: Tensor<f32>,
}

fn smooth_controls(
    rng: &mut ChaCha8Rng,
    frames: usize,
    knots: usize,
    lo: f64,
    hi: f64,
) -> Vec<f64> {
    let values: Vec<f64> = (0..=knots).map(|_| rng.gen_range(lo..=hi)).collect();
    (0..frames)
        .map(|f| {
            let pos = (f as f64 + 0.5) / frames as f64 * knots as f64;
            let i = (pos.floor() as usize).min(knots - 1);
            let u = pos - i as f64;
            let w = 0.5 - 0.5 * (PI * u).cos();
            values[i] * (1.0 - w) + values[i + 1] * w
        })
        .collect()
}

/// Deterministic example for `seed`. Each example owns its generator, so
/// examples can be produced in any order.
pub fn gen_example(seed: u64, p: &SynthParams) -> Result<Example> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = p.frames();
    let log_f0 = smooth_controls(&mut rng, frames, p.knots, p.f0_min.ln(), p.f0_max.ln());
    let amp = smooth_controls(&mut rng, frames, p.knots, p.amp_min, p.amp_max);
    let weights = p.partial_weights();
    let mut phase: f64 = rng.gen_range(0.0..1.0);
    let mut x = Vec::with_capacity(p.length);
    for t in 0..p.length {
        let f = t / p.hop;
        let f0 = log_f0[f].exp();
        let tone: f64 = weights
            .iter()
            .enumerate()
            .map(|(k, w)| w * (2.0 * PI * (k + 1) as f64 * phase).sin())
            .sum();
        let n: f64 = rng.sample(StandardNormal);
        x.push((amp[f] * tone + p.noise * n).clamp(-1.0, 1.0) as f32);
        phase = (phase + f0).fract();
    }
    let mut c = Vec::with_capacity(2 * frames);
    c.extend(log_f0.iter().map(|&v| v as f32));
    c.extend(amp.iter().map(|&v| v as f32));
    Ok(Example {
        seed,
        x: Tensor::from_parts(vec![p.length], x),
        c: Tensor::from_parts(vec![2, frames], c),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    HeldOut,
}

const SPLIT_STRIDE: u64 = 1 << 40;

impl Split {
    /// Seed of the `i`-th example of the split; splits never share seeds.
    pub fn seed(self, i: u64) -> u64 {
        assert!(i < SPLIT_STRIDE, "example index {i} overflows its split");
        let base = match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::HeldOut => 2,
        };
        base * SPLIT_STRIDE + i
    }

    pub fn of_seed(seed: u64) -> Option<Split> {
        match seed / SPLIT_STRIDE {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            2 => Some(Split::HeldOut),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: SynthParams,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn generate(p: &SynthParams, split: Split, count: usize) -> Result<Self> {
        p.validate()?;
        let examples = (0..count as u64)
            .map(|i| gen_example(split.seed(i), p))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            params: p.clone(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Error if any seed of `self` also appears in `other`.
    pub fn check_disjoint(&self, other: &Dataset) -> Result<()> {
        let seeds: std::collections::HashSet<u64> = self.examples.iter().map(|e| e.seed).collect();
        match other.examples.iter().find(|e| seeds.contains(&e.seed)) {
            Some(e) => Err(Error::invalid(format!(
                "data splits overlap: seed {} appears in both",
                e.seed
            ))),
            None => Ok(()),
        }
    }

    /// Batch `[B, segment]` waveforms and `[B, 2, segment/hop]` conditioning
    /// from `(example index, start frame)` pairs.
    pub fn batch(
        &self,
        picks: &[(usize, usize)],
        segment: usize,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let hop = self.params.hop;
        if segment == 0 || segment % hop != 0 || segment > self.params.length {
            return Err(Error::invalid(format!(
                "segment {segment} must be a positive multiple of hop {hop} within the example length"
            )));
        }
        let sf = segment / hop;
        let frames = self.params.frames();
        let mut x = Vec::with_capacity(picks.len() * segment);
        let mut c = Vec::with_capacity(picks.len() * 2 * sf);
        for &(i, start) in picks {
            let e = self
                .examples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("no example {i}")))?;
            if start + sf > frames {
                return Err(Error::invalid(format!(
                    "crop at frame {start} runs past the end"
                )));
            }
            x.extend_from_slice(&e.x.data()[start * hop..start * hop + segment]);
            for ch in 0..2 {
                c.extend_from_slice(&e.c.data()[ch * frames + start..ch * frames + start + sf]);
            }
        }
        Ok((
            Tensor::from_parts(vec![picks.len(), segment], x),
            Tensor::from_parts(vec![picks.len(), 2, sf], c),
        ))
    }

    /// Random hop-aligned crops drawn from `rng`.
    pub fn random_batch<R: Rng>(
        &self,
        rng: &mut R,
        batch: usize,
        segment: usize,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if self.is_empty() {
            return Err(Error::invalid("cannot batch an empty dataset"));
        }
        let sf = segment / self.params.hop.max(1);
        let starts = (self.params.frames() + 1).saturating_sub(sf).max(1);
        let picks: Vec<(usize, usize)> = (0..batch)
            .map(|_| (rng.gen_range(0..self.len()), rng.gen_range(0..starts)))
            .collect();
        self.batch(&picks, segment)
    }

    /// Header plus one record per example.
    pub fn encoded_len(&self) -> usize {
        header_len(&self.params) + self.len() * self.params.record_bytes()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.params)?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        let frames = self.params.frames();
        for e in &self.examples {
            if e.x.shape() != [self.params.length] || e.c.shape() != [2, frames] {
                return Err(Error::shape(
                    "dataset record",
                    &[self.params.length],
                    e.x.shape(),
                ));
            }
            out.extend_from_slice(&e.seed.to_le_bytes());
            for v in e.x.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for f in 0..frames {
                for ch in 0..2 {
                    out.extend_from_slice(&e.c.data()[ch * frames + f].to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "NFDS");
        if r.take(4)? != DATASET_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let json_len = r.u64()?;
        if json_len > MAX_HEADER {
            return Err(r.fail("header too large"));
        }
        let params: SynthParams = serde_json::from_slice(r.take(json_len as usize)?)
            .map_err(|e| r.fail(&format!("header: {e}")))?;
        params
            .validate()
            .map_err(|e| r.fail(&format!("header: {e}")))?;
        let count = r.u64()?;
        let rec = params.record_bytes() as u64;
        if count.checked_mul(rec) != Some(r.remaining() as u64) {
            return Err(r.fail(&format!(
                "{count} records of {rec} bytes do not match the {} remaining bytes",
                r.remaining()
            )));
        }
        let frames = params.frames();
        let mut examples = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let seed = r.u64()?;
            let x = r.f32s(params.length)?;
            let cf = r.f32s(2 * frames)?;
            let mut c = vec![0f32; 2 * frames];
            for f in 0..frames {
                c[f] = cf[2 * f];
                c[frames + f] = cf[2 * f + 1];
            }
            examples.push(Example {
                seed,
                x: Tensor::from_parts(vec![params.length], x),
                c: Tensor::from_parts(vec![2, frames], c),
            });
        }
        Ok(Dataset { params, examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn header_len(p: &SynthParams) -> usize {
    let json = serde_json::to_vec(p).map(|j| j.len()).unwrap_or(0);
    4 + 4 + 8 + json + 8
}

/// Little-endian cursor shared by the binary decoders.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        Reader {
            bytes,
            pos: 0,
            kind,
        }
    }

    pub fn fail(&self, reason: &str) -> Error {
        Error::Format {
            kind: self.kind,
            reason: format!("{reason} (at byte {})", self.pos),
        }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.fail(&format!("truncated: wanted {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.fail("length overflow"))?,
        )?;
        let out: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(self.fail(&format!("non-finite value at element {i}")));
        }
        Ok(out)
    }
}

/// Write through a sibling temporary file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}
