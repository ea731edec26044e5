//! Synthetic corpora, paired-WAV loading, mixing and batching.
//!
//! A corpus on disk is a directory with `clean/NAME.wav`, `noisy/NAME.wav`
//! and a `manifest.csv` listing the pairs. Audio is 16-bit PCM mono at
//! 16 kHz; nothing is resampled on load.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::csv_err;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const MANIFEST: &str = "manifest.csv";

/// Mixing and cropping parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub snr_low: f64,
    pub snr_high: f64,
    pub sample_rate: u32,
    /// Length of training crops.
    pub segment_seconds: f64,
    /// Largest circular shift applied to a crop.
    pub max_shift_seconds: f64,
    /// Largest gain change, in dB either way.
    pub max_gain_db: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            snr_low: 0.0,
            snr_high: 15.0,
            sample_rate: SAMPLE_RATE,
            segment_seconds: 4.0,
            max_shift_seconds: 0.5,
            max_gain_db: 6.0,
            seed: 0,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_low.is_finite() && self.snr_high.is_finite() && self.snr_low <= self.snr_high) {
            return Err(Error::Config("SNR range must be finite with low ≤ high".into()));
        }
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!("only {SAMPLE_RATE} Hz audio is supported")));
        }
        if !(self.segment_seconds > 0.0 && self.max_shift_seconds >= 0.0 && self.max_gain_db >= 0.0) {
            return Err(Error::Config("segment length must be positive, shift and gain non-negative".into()));
        }
        Ok(())
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * self.sample_rate as f64).round() as usize
    }

    fn max_shift(&self) -> usize {
        (self.max_shift_seconds * self.sample_rate as f64).round() as usize
    }
}

/// Coloured noise families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Brown,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Brown];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Brown => "brown",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown noise kind `{s}`")))
    }
}

fn peak_normalize(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

/// A harmonic "voice" surrogate of `samples` samples: 2 to 5 harmonics of a
/// slowly gliding fundamental, amplitude-modulated at a syllable-like rate,
/// interrupted by pauses and peak-normalized to 0.5.
pub fn synth_clean<R: Rng + ?Sized>(rng: &mut R, samples: usize) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let f0 = rng.gen_range(110.0..260.0);
    let glide = rng.gen_range(-0.15..0.15);
    let harmonics = rng.gen_range(2..=5);
    let amps: Vec<f64> = (1..=harmonics)
        .map(|k| if k == 1 { 1.0 } else { rng.gen_range(0.3..0.8) / k as f64 })
        .collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let am_rate = rng.gen_range(2.0..6.0);
    let am_depth = rng.gen_range(0.3..0.8);
    let am_phase = rng.gen_range(0.0..2.0 * PI);

    // Alternating voiced stretches and pauses, with 10 ms ramps.
    let mut gate = vec![0.0; samples];
    let mut t = (rng.gen_range(0.0..0.2) * sr) as usize;
    while t < samples {
        let on = (rng.gen_range(0.3..0.9) * sr) as usize;
        let end = (t + on).min(samples);
        let ramp = (0.01 * sr) as usize;
        for (i, g) in gate[t..end].iter_mut().enumerate() {
            let edge = i.min(end - t - 1 - i);
            *g = if edge < ramp { 0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos() } else { 1.0 };
        }
        t = end + (rng.gen_range(0.1..0.35) * sr) as usize;
    }

    let mut phase = 0.0;
    let mut out = Vec::with_capacity(samples);
    for (n, g) in gate.iter().enumerate() {
        let time = n as f64 / sr;
        let f = f0 * (1.0 + glide * (time / 2.0).min(1.0));
        phase += 2.0 * PI * f / sr;
        let env = 1.0 - am_depth * 0.5 * (1.0 + (2.0 * PI * am_rate * time + am_phase).cos());
        let v: f64 = amps
            .iter()
            .zip(&phases)
            .enumerate()
            .map(|(k, (a, p))| a * ((k + 1) as f64 * phase + p).sin())
            .sum();
        out.push(v * env * g);
    }
    peak_normalize(&mut out, 0.5);
    out
}

/// Unit-peak noise of the given colour.
pub fn synth_noise<R: Rng + ?Sized>(kind: NoiseKind, samples: usize, rng: &mut R) -> Vec<f64> {
    let white: Vec<f64> = (0..samples).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => spectral_tilt(&white, 0.5),
        NoiseKind::Brown => {
            let mut acc = 0.0;
            let mut y: Vec<f64> = white
                .iter()
                .map(|w| {
                    acc = 0.995 * acc + w;
                    acc
                })
                .collect();
            let mean = y.iter().sum::<f64>() / samples.max(1) as f64;
            y.iter_mut().for_each(|v| *v -= mean);
            y
        }
    };
    peak_normalize(&mut out, 1.0);
    out
}

/// Scales bin `k` of the spectrum by `k^{-exponent}` and zeroes DC.
fn spectral_tilt(x: &[f64], exponent: f64) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k);
        *c = if f == 0 { Complex64::new(0.0, 0.0) } else { *c * (f as f64).powf(-exponent) };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `10·log10(‖s‖² / ‖n‖²)`.
pub fn snr_db(s: &[f64], n: &[f64]) -> f64 {
    10.0 * (energy(s) / energy(n)).log10()
}

/// `s + g·noise` with `g` chosen so the mixture has the requested SNR.
/// Returns the mixture and `g`.
pub fn mix_at_snr(s: &[f64], noise: &[f64], snr: f64) -> Result<(Vec<f64>, f64)> {
    if s.len() != noise.len() {
        return Err(Error::Data(format!("signal has {} samples, noise {}", s.len(), noise.len())));
    }
    let (es, en) = (energy(s), energy(noise));
    if es == 0.0 || en == 0.0 {
        return Err(Error::Data("cannot mix a zero-energy signal".into()));
    }
    if !snr.is_finite() {
        return Err(Error::Data(format!("SNR {snr} is not finite")));
    }
    let g = (es / (en * 10f64.powf(snr / 10.0))).sqrt();
    Ok((s.iter().zip(noise).map(|(a, b)| a + g * b).collect(), g))
}

/// Reads a 16-bit PCM mono 16 kHz WAV file as samples in `[-1, 1)`.
pub fn load_wav(path: &Path) -> Result<Vec<f64>> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Data(format!("{}: {} channels, expected mono", path.display(), spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Data(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Data(format!("{}: only 16-bit PCM is supported", path.display())));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    Ok(samples)
}

/// Writes samples as 16-bit PCM, clipping to the representable range.
pub fn save_wav(path: &Path, x: &[f64]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &v in x {
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// One clean/noisy pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub name: String,
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    /// Mixing SNR, when known.
    pub snr_db: Option<f64>,
    pub noise: Option<NoiseKind>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub items: Vec<Utterance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    name: String,
    clean: String,
    noisy: String,
    snr_db: Option<f64>,
    noise: Option<NoiseKind>,
}

/// Generation settings for a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub seconds: f64,
    pub mixture: MixtureSpec,
    /// Prefix of generated utterance names.
    pub prefix: String,
}

/// Generates utterance `index`; items depend only on `(seed, index)`.
pub fn synth_utterance(spec: &SynthSpec, index: usize) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.mixture.seed);
    rng.set_stream(index as u64);
    let samples = (spec.seconds * spec.mixture.sample_rate as f64).round() as usize;
    let clean = synth_clean(&mut rng, samples);
    let kind = NoiseKind::ALL[rng.gen_range(0..3)];
    let noise = synth_noise(kind, samples, &mut rng);
    let snr = if spec.mixture.snr_low == spec.mixture.snr_high {
        spec.mixture.snr_low
    } else {
        rng.gen_range(spec.mixture.snr_low..spec.mixture.snr_high)
    };
    let (noisy, _) = mix_at_snr(&clean, &noise, snr)?;
    Ok(Utterance {
        name: format!("{}{index:05}", spec.prefix),
        clean,
        noisy,
        snr_db: Some(snr),
        noise: Some(kind),
    })
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.mixture.validate()?;
    if spec.count == 0 || !(spec.seconds > 0.0) {
        return Err(Error::Config("corpus needs a positive count and duration".into()));
    }
    let items = (0..spec.count).map(|i| synth_utterance(spec, i)).collect::<Result<_>>()?;
    Ok(Corpus { items })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Writes the WAV pairs and the manifest. Samples are quantized to
    /// 16 bits on the way out.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir_file(dir, MANIFEST)?).map_err(csv_err)?;
        for u in &self.items {
            let clean = format!("clean/{}.wav", u.name);
            let noisy = format!("noisy/{}.wav", u.name);
            save_wav(&dir.join(&clean), &u.clean)?;
            save_wav(&dir.join(&noisy), &u.noisy)?;
            w.serialize(ManifestRow {
                name: u.name.clone(),
                clean,
                noisy,
                snr_db: u.snr_db,
                noise: u.noise,
            })
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a corpus directory. Without a manifest, every
    /// `clean/NAME.wav` with a matching `noisy/NAME.wav` is a pair.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Data(format!("{} is not a directory", dir.display())));
        }
        let rows = if dir.join(MANIFEST).exists() {
            let mut r = csv::Reader::from_path(dir.join(MANIFEST)).map_err(csv_err)?;
            r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>().map_err(csv_err)?
        } else {
            scan_pairs(dir)?
        };
        if rows.is_empty() {
            return Err(Error::Data(format!("{} holds no utterance pairs", dir.display())));
        }
        let items = rows
            .into_iter()
            .map(|row| {
                let clean = load_wav(&dir.join(&row.clean))?;
                let noisy = load_wav(&dir.join(&row.noisy))?;
                if clean.len() != noisy.len() {
                    return Err(Error::Data(format!(
                        "{}: clean has {} samples, noisy {}",
                        row.name,
                        clean.len(),
                        noisy.len()
                    )));
                }
                Ok(Utterance {
                    name: row.name,
                    clean,
                    noisy,
                    snr_db: row.snr_db,
                    noise: row.noise,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { items })
    }

    /// Splits off the last `n` items.
    pub fn split_tail(mut self, n: usize) -> (Corpus, Corpus) {
        let at = self.items.len().saturating_sub(n);
        let tail = self.items.split_off(at);
        (self, Corpus { items: tail })
    }
}

fn dir_file(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

fn scan_pairs(dir: &Path) -> Result<Vec<ManifestRow>> {
    let clean_dir = dir.join("clean");
    let entries = fs::read_dir(&clean_dir).map_err(|e| Error::Data(format!("{}: {e}", clean_dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".wav")).map(str::to_string))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let noisy = format!("noisy/{name}.wav");
            if !dir.join(&noisy).exists() {
                return Err(Error::Data(format!("{name}: no matching {noisy}")));
            }
            Ok(ManifestRow {
                clean: format!("clean/{name}.wav"),
                noisy,
                name,
                snr_db: None,
                noise: None,
            })
        })
        .collect()
}

/// A training batch of equally long crops, `[B, T_pad]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub noisy: Tensor,
    pub clean: Tensor,
    /// Samples of each row before zero padding.
    pub samples: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.noisy.dim(0)
    }

    pub fn row(t: &Tensor, b: usize) -> &[f64] {
        let n = t.dim(1);
        &t.data()[b * n..(b + 1) * n]
    }
}

/// One epoch of shuffled batches. Every utterance contributes one random
/// crop of `spec.segment_samples()` samples (zero-padded if shorter),
/// circularly shifted and scaled by a gain shared by its clean and noisy
/// versions, then padded to `valid_length(crop)`.
pub fn batch_segments<R: Rng + ?Sized>(
    corpus: &Corpus,
    spec: &MixtureSpec,
    batch_size: usize,
    valid_length: impl Fn(usize) -> usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    spec.validate()?;
    if batch_size == 0 || corpus.is_empty() {
        return Err(Error::Data("batching needs a non-empty corpus and batch size".into()));
    }
    let seg = spec.segment_samples();
    let t_pad = valid_length(seg);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut noisy = Vec::with_capacity(chunk.len() * t_pad);
        let mut clean = Vec::with_capacity(chunk.len() * t_pad);
        for &i in chunk {
            let u = &corpus.items[i];
            let start = if u.clean.len() > seg { rng.gen_range(0..=u.clean.len() - seg) } else { 0 };
            let shift = rng.gen_range(0..=spec.max_shift());
            let gain = 10f64.powf(rng.gen_range(-spec.max_gain_db..=spec.max_gain_db) / 20.0);
            for (src, dst) in [(&u.noisy, &mut noisy), (&u.clean, &mut clean)] {
                let mut crop: Vec<f64> = src.iter().skip(start).take(seg).map(|v| v * gain).collect();
                crop.resize(seg, 0.0);
                crop.rotate_right(shift % seg);
                crop.resize(t_pad, 0.0);
                dst.extend(crop);
            }
        }
        let b = chunk.len();
        batches.push(Batch {
            noisy: Tensor::new(&[b, t_pad], noisy)?,
            clean: Tensor::new(&[b, t_pad], clean)?,
            samples: seg,
        });
    }
    Ok(batches)
}
