//! Feature extraction: STFT, mel filterbank, log-mel spectrograms, MFCCs.
//!
//! Pipeline for a duration-normalized clip (96000 samples at 16 kHz):
//!
//! 1. Centered STFT, periodic Hann window 2048, FFT 2048, hop 512, reflect
//!    padding of 1024 samples on each side. 96000 samples give 188 frames
//!    and 1025 frequency bins.
//! 2. Power spectrogram through a 128-band Slaney-style mel filterbank
//!    (area-normalized triangles, 0 Hz to Nyquist), then decibels
//!    `10*log10(x + 1e-10)` floored 80 dB below the matrix peak.
//! 3. Spectrogram input: min-max scaling of the dB matrix to `[0, 1]`.
//!    MFCC input: orthonormal DCT-II along the mel axis of the dB matrix
//!    (before scaling), first 40 coefficients, then the same scaling.
//!
//! Extracted features are cached on disk in the SERF format (see
//! [`write_serf`]) and served to training through [`FeatureStore`].

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError, CorpusManifest, TARGET_SAMPLES};

pub const WINDOW_LENGTH: usize = 2048;
pub const FFT_SIZE: usize = 2048;
pub const HOP_LENGTH: usize = 512;
pub const N_MELS: usize = 128;
pub const N_MFCC: usize = 40;
/// Frame count for a duration-normalized clip: `1 + 96000/512`.
pub const FRAMES_PER_CLIP: usize = 1 + TARGET_SAMPLES / HOP_LENGTH;

const DB_EPS: f64 = 1e-10;
const DB_RANGE: f64 = 80.0;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid length: {0}")]
    InvalidLength(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("feature cache: {0}")]
    SerfFormat(String),
    #[error("missing cached features for {0}")]
    MissingFeature(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Dense row-major matrix used for spectral grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Grid {
        Grid {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// Periodic Hann window: `w[k] = 0.5 * (1 - cos(2*pi*k/n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>, DspError> {
    if n < 2 {
        return Err(DspError::InvalidLength(format!(
            "window length {n} (must be >= 2)"
        )));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()))
        .collect())
}

/// STFT framing parameters. Only centered framing with `window_length ==
/// fft_size` is supported; the defaults match the feature pipeline.
#[derive(Debug, Clone)]
pub struct StftConfig {
    pub window_length: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub centered: bool,
}

impl Default for StftConfig {
    fn default() -> StftConfig {
        StftConfig {
            window_length: WINDOW_LENGTH,
            fft_size: FFT_SIZE,
            hop: HOP_LENGTH,
            centered: true,
        }
    }
}

impl StftConfig {
    fn validate(&self) -> Result<(), DspError> {
        if self.window_length != self.fft_size {
            return Err(DspError::InvalidConfig(
                "window_length must equal fft_size".into(),
            ));
        }
        if self.window_length < 2 {
            return Err(DspError::InvalidConfig("fft_size must be >= 2".into()));
        }
        if self.hop == 0 || self.window_length % self.hop != 0 {
            return Err(DspError::InvalidConfig(
                "hop must be a positive divisor of window_length".into(),
            ));
        }
        if !self.centered {
            return Err(DspError::InvalidConfig(
                "only centered framing is supported".into(),
            ));
        }
        Ok(())
    }
}

// Reflect (mirror without edge duplication) index into [0, len).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Magnitude STFT. Output grid is `fft_size/2 + 1` bins by
/// `1 + floor(len/hop)` frames; frame `t` covers padded samples
/// `[t*hop, t*hop + fft_size)` with reflect padding of `fft_size/2` on
/// each side.
pub fn stft_magnitude(clip: &AudioClip, cfg: &StftConfig) -> Result<Grid, DspError> {
    cfg.validate()?;
    let len = clip.samples.len();
    if len == 0 {
        return Err(DspError::EmptyInput);
    }
    let n = cfg.fft_size;
    let pad = n / 2;
    let window = hann_window(n)?;
    let frames = 1 + len / cfg.hop;
    let bins = n / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut grid = Grid::zeros(bins, frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = t as isize * cfg.hop as isize - pad as isize;
        for k in 0..n {
            let src = reflect_index(start + k as isize, len);
            buf[k] = Complex::new(clip.samples[src] * window[k], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            grid.values[b * frames + t] = buf[b].norm();
        }
    }
    Ok(grid)
}

const MEL_F_SP: f64 = 200.0 / 3.0;
const MEL_MIN_LOG_HZ: f64 = 1000.0;
const MEL_MIN_LOG_MEL: f64 = 15.0;

fn mel_logstep() -> f64 {
    (6.4f64).ln() / 27.0
}

fn hz_to_mel(hz: f64) -> f64 {
    if hz < MEL_MIN_LOG_HZ {
        hz / MEL_F_SP
    } else {
        MEL_MIN_LOG_MEL + (hz / MEL_MIN_LOG_HZ).ln() / mel_logstep()
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    if mel < MEL_MIN_LOG_MEL {
        mel * MEL_F_SP
    } else {
        MEL_MIN_LOG_HZ * (mel_logstep() * (mel - MEL_MIN_LOG_MEL)).exp()
    }
}

/// Slaney-style mel filterbank: `n_mels` area-normalized triangles spanning
/// 0 Hz to `sample_rate/2`, evaluated at the `fft_size/2 + 1` bin centers.
/// Each triangle is scaled by `2 / (f_hi - f_lo)`.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> Result<Grid, DspError> {
    if n_mels == 0 || fft_size < 2 {
        return Err(DspError::InvalidConfig(
            "n_mels must be >= 1 and fft_size >= 2".into(),
        ));
    }
    let bins = fft_size / 2 + 1;
    let nyquist = f64::from(sample_rate) / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Grid::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        let enorm = 2.0 / (hi - lo);
        for b in 0..bins {
            let f = nyquist * b as f64 / (bins - 1) as f64;
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            let w = rising.min(falling).max(0.0);
            fb.values[m * bins + b] = w * enorm;
        }
    }
    Ok(fb)
}

fn power_to_db(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = 10.0 * (*v + DB_EPS).log10();
    }
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = top - DB_RANGE;
    for v in values.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
}

/// Min-max scaling to `[0, 1]`; a constant input maps to all zeros.
pub fn scale01(values: &[f64]) -> Result<Vec<f64>, DspError> {
    if values.is_empty() {
        return Err(DspError::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DspError::NonFiniteInput);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; values.len()]);
    }
    let span = max - min;
    Ok(values.iter().map(|v| (v - min) / span).collect())
}

// dB-scale mel spectrogram before [0, 1] scaling; shared by both inputs.
fn db_mel(clip: &AudioClip) -> Result<Grid, DspError> {
    if clip.samples.len() != TARGET_SAMPLES {
        return Err(DspError::InvalidInput(format!(
            "clip must be duration-normalized to {TARGET_SAMPLES} samples, got {}",
            clip.samples.len()
        )));
    }
    let stft = stft_magnitude(clip, &StftConfig::default())?;
    let fb = mel_filterbank(N_MELS, FFT_SIZE, clip.sample_rate)?;
    let bins = stft.rows;
    let frames = stft.cols;
    let power: Vec<f64> = stft.values.iter().map(|m| m * m).collect();
    // Triangles have compact support; skip the zero weights outside it.
    let mut mel = Grid::zeros(N_MELS, frames);
    for m in 0..N_MELS {
        let fb_row = fb.row(m);
        let out = &mut mel.values[m * frames..(m + 1) * frames];
        for b in 0..bins {
            let w = fb_row[b];
            if w == 0.0 {
                continue;
            }
            let p = &power[b * frames..(b + 1) * frames];
            for (o, &pv) in out.iter_mut().zip(p) {
                *o += w * pv;
            }
        }
    }
    power_to_db(&mut mel.values);
    Ok(mel)
}

/// Log-mel spectrogram input: 128 x 188, scaled to `[0, 1]`.
pub fn mel_spectrogram(clip: &AudioClip) -> Result<FeatureMatrix, DspError> {
    let mel = db_mel(clip)?;
    let values = scale01(&mel.values)?;
    FeatureMatrix::new(FeatureKind::MelSpectrogram, mel.rows, mel.cols, values)
}

/// Orthonormal DCT-II, first `n_out` coefficients.
///
/// Computed through a length-N FFT (even-odd permutation plus a complex
/// twiddle); the direct cosine-sum definition is kept to the test suites as
/// an independent oracle.
pub fn dct2_ortho(x: &[f64], n_out: usize) -> Result<Vec<f64>, DspError> {
    let mut planner = FftPlanner::new();
    let n = x.len();
    if n == 0 {
        return Err(DspError::EmptyInput);
    }
    let fft = planner.plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    dct2_ortho_with(&mut buf, x, n_out, &*fft)
}

fn dct2_ortho_with(
    buf: &mut [Complex<f64>],
    x: &[f64],
    n_out: usize,
    fft: &dyn rustfft::Fft<f64>,
) -> Result<Vec<f64>, DspError> {
    let n = x.len();
    if n_out == 0 || n_out > n {
        return Err(DspError::InvalidLength(format!(
            "n_out {n_out} out of range 1..={n}"
        )));
    }
    for i in 0..(n + 1) / 2 {
        buf[i] = Complex::new(x[2 * i], 0.0);
    }
    for i in 0..n / 2 {
        buf[n - 1 - i] = Complex::new(x[2 * i + 1], 0.0);
    }
    fft.process(buf);
    let scale0 = (1.0 / (4.0 * n as f64)).sqrt();
    let scale = (1.0 / (2.0 * n as f64)).sqrt();
    let mut out = Vec::with_capacity(n_out);
    for k in 0..n_out {
        let angle = -std::f64::consts::PI * k as f64 / (2.0 * n as f64);
        let tw = Complex::new(angle.cos(), angle.sin());
        let y = 2.0 * (buf[k] * tw).re;
        out.push(y * if k == 0 { scale0 } else { scale });
    }
    Ok(out)
}

/// MFCC input: orthonormal DCT-II along the mel axis of the dB mel
/// spectrogram (before scaling), first 40 coefficients, then scaled to
/// `[0, 1]`. Output is 40 x 188.
pub fn mfcc(clip: &AudioClip) -> Result<FeatureMatrix, DspError> {
    let mel = db_mel(clip)?;
    let frames = mel.cols;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(N_MELS);
    let mut buf = vec![Complex::new(0.0, 0.0); N_MELS];
    let mut col = vec![0.0f64; N_MELS];
    let mut out = vec![0.0f64; N_MFCC * frames];
    for t in 0..frames {
        for m in 0..N_MELS {
            col[m] = mel.values[m * frames + t];
        }
        let coeffs = dct2_ortho_with(&mut buf, &col, N_MFCC, &*fft)?;
        for (k, &c) in coeffs.iter().enumerate() {
            out[k * frames + t] = c;
        }
    }
    let values = scale01(&out)?;
    FeatureMatrix::new(FeatureKind::Mfcc, N_MFCC, frames, values)
}

/// Which of the two network inputs a feature matrix is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FeatureKind {
    #[serde(rename = "spectrogram")]
    MelSpectrogram,
    #[serde(rename = "mfcc")]
    Mfcc,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::MelSpectrogram => "spectrogram",
            FeatureKind::Mfcc => "mfcc",
        }
    }

    /// Canonical (rows, cols) produced by the extraction pipeline.
    pub fn canonical_dims(self) -> (usize, usize) {
        match self {
            FeatureKind::MelSpectrogram => (N_MELS, FRAMES_PER_CLIP),
            FeatureKind::Mfcc => (N_MFCC, FRAMES_PER_CLIP),
        }
    }

    fn code(self) -> u8 {
        match self {
            FeatureKind::MelSpectrogram => 0,
            FeatureKind::Mfcc => 1,
        }
    }

    fn from_code(code: u8) -> Option<FeatureKind> {
        match code {
            0 => Some(FeatureKind::MelSpectrogram),
            1 => Some(FeatureKind::Mfcc),
            _ => None,
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = DspError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spectrogram" | "mel" => Ok(FeatureKind::MelSpectrogram),
            "mfcc" => Ok(FeatureKind::Mfcc),
            other => Err(DspError::InvalidInput(format!(
                "unknown input kind {other:?} (expected spectrogram or mfcc)"
            ))),
        }
    }
}

/// A single extracted feature matrix, row-major, values in `[0, 1]`.
///
/// The extraction pipeline always produces the canonical 128x188 / 40x188
/// shapes; other dimensions are permitted so desk-scale tests can run tiny
/// inputs through the same types.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    kind: FeatureKind,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(
        kind: FeatureKind,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<FeatureMatrix, DspError> {
        if rows == 0 || cols == 0 {
            return Err(DspError::InvalidLength("empty feature matrix".into()));
        }
        if values.len() != rows * cols {
            return Err(DspError::InvalidLength(format!(
                "{} values for {rows}x{cols} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DspError::NonFiniteInput);
        }
        if values.iter().any(|v| *v < 0.0 || *v > 1.0) {
            return Err(DspError::InvalidInput(
                "feature values must lie in [0, 1]".into(),
            ));
        }
        Ok(FeatureMatrix {
            kind,
            rows,
            cols,
            values,
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

const SERF_MAGIC: &[u8; 4] = b"SERF";
const SERF_VERSION: u8 = 1;
const SERF_HEADER_LEN: usize = 16;

/// Writes a feature matrix in SERF v1: a 16-byte header (magic `SERF`,
/// version u8, kind u8 with 0 = mel / 1 = mfcc, rows u16 LE, cols u32 LE,
/// 4 reserved zero bytes) followed by `rows*cols` f32 little-endian values,
/// row-major.
pub fn write_serf(path: &Path, fm: &FeatureMatrix) -> Result<(), DspError> {
    if fm.rows > u16::MAX as usize || fm.cols > u32::MAX as usize {
        return Err(DspError::InvalidLength("matrix too large for SERF".into()));
    }
    let mut bytes = Vec::with_capacity(SERF_HEADER_LEN + 4 * fm.values.len());
    bytes.extend_from_slice(SERF_MAGIC);
    bytes.push(SERF_VERSION);
    bytes.push(fm.kind.code());
    bytes.extend_from_slice(&(fm.rows as u16).to_le_bytes());
    bytes.extend_from_slice(&(fm.cols as u32).to_le_bytes());
    bytes.extend_from_slice(&[0u8; 4]);
    for &v in &fm.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a SERF v1 file.
pub fn read_serf(path: &Path) -> Result<FeatureMatrix, DspError> {
    let bytes = fs::read(path)?;
    if bytes.len() < SERF_HEADER_LEN {
        return Err(DspError::SerfFormat("truncated header".into()));
    }
    if &bytes[0..4] != SERF_MAGIC {
        return Err(DspError::SerfFormat("bad magic".into()));
    }
    if bytes[4] != SERF_VERSION {
        return Err(DspError::SerfFormat(format!("unsupported version {}", bytes[4])));
    }
    let kind = FeatureKind::from_code(bytes[5])
        .ok_or_else(|| DspError::SerfFormat(format!("unknown kind {}", bytes[5])))?;
    let rows = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let cols = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let payload = &bytes[SERF_HEADER_LEN..];
    if payload.len() != 4 * rows * cols {
        return Err(DspError::SerfFormat(format!(
            "payload {} bytes, expected {}",
            payload.len(),
            4 * rows * cols
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    FeatureMatrix::new(kind, rows, cols, values)
}

/// In-memory feature cache keyed by manifest clip path.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    kind: FeatureKind,
    map: BTreeMap<String, FeatureMatrix>,
}

impl FeatureStore {
    pub fn new(kind: FeatureKind) -> FeatureStore {
        FeatureStore {
            kind,
            map: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn insert(&mut self, clip_path: &str, fm: FeatureMatrix) -> Result<(), DspError> {
        if fm.kind() != self.kind {
            return Err(DspError::InvalidInput(format!(
                "feature kind {} does not match store kind {}",
                fm.kind(),
                self.kind
            )));
        }
        self.map.insert(clip_path.to_string(), fm);
        Ok(())
    }

    pub fn get(&self, clip_path: &str) -> Option<&FeatureMatrix> {
        self.map.get(clip_path)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Loads the cached features of every manifest entry from `cache_dir`.
    pub fn load_for_manifest(
        cache_dir: &Path,
        manifest: &CorpusManifest,
        kind: FeatureKind,
    ) -> Result<FeatureStore, DspError> {
        let mut store = FeatureStore::new(kind);
        for e in &manifest.entries {
            let file = cache_dir.join(cache_file_name(&e.clip_path, kind));
            if !file.is_file() {
                return Err(DspError::MissingFeature(e.clip_path.clone()));
            }
            let fm = read_serf(&file)?;
            if fm.kind() != kind {
                return Err(DspError::SerfFormat(format!(
                    "{} holds {} features, expected {}",
                    file.display(),
                    fm.kind(),
                    kind
                )));
            }
            store.insert(&e.clip_path, fm)?;
        }
        Ok(store)
    }
}

/// Cache file name for a clip: `<stem>.<kind>.serf`.
pub fn cache_file_name(clip_path: &str, kind: FeatureKind) -> String {
    let stem = Path::new(clip_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| clip_path.to_string());
    format!("{stem}.{}.serf", kind.as_str())
}

/// Extracts and caches features for every manifest entry into `out_dir`.
/// Returns the number of matrices written.
pub fn featurize(
    manifest: &CorpusManifest,
    kind: FeatureKind,
    out_dir: &Path,
) -> Result<usize, DspError> {
    fs::create_dir_all(out_dir)?;
    let mut seen = BTreeMap::new();
    for e in &manifest.entries {
        let name = cache_file_name(&e.clip_path, kind);
        if let Some(prev) = seen.insert(name.clone(), e.clip_path.clone()) {
            return Err(DspError::InvalidInput(format!(
                "cache name collision: {prev} and {} both map to {name}",
                e.clip_path
            )));
        }
        let clip = audio::load_wav(&manifest.base_dir.join(&e.clip_path))?;
        let fitted = audio::fit_duration(&clip)?;
        let fm = match kind {
            FeatureKind::MelSpectrogram => mel_spectrogram(&fitted)?,
            FeatureKind::Mfcc => mfcc(&fitted)?,
        };
        write_serf(&out_dir.join(name), &fm)?;
    }
    Ok(manifest.entries.len())
}
