//! Log-Mel frontend: centered Hann framing, FFT power spectrum, Slaney Mel
//! filterbank and a floored natural logarithm.
//!
//! With the default configuration one second of 44.1 kHz audio becomes a
//! 64×51 grid (64 Mel bands, 51 frames of 40 ms at a 20 ms hop).

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Which Mel warping the filterbank uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MelScale {
    /// Linear below 1 kHz, logarithmic above.
    Slaney,
    /// `2595 log10(1 + f/700)`.
    Htk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    /// Fraction of the window that consecutive frames overlap.
    pub hop_fraction: f64,
    pub n_mels: usize,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub mel_scale: MelScale,
    /// Scale each triangle to unit area (`2 / bandwidth`).
    pub area_normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            window_ms: 40.0,
            hop_fraction: 0.5,
            n_mels: 64,
            fft_size: 2048,
            fmin: 0.0,
            fmax: f64::from(DEFAULT_SAMPLE_RATE) / 2.0,
            log_floor: 1e-10,
            mel_scale: MelScale::Slaney,
            area_normalize: true,
        }
    }
}

impl FrontendConfig {
    pub fn window_len(&self) -> usize {
        (self.window_ms / 1000.0 * f64::from(self.sample_rate)).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        ((1.0 - self.hop_fraction) * self.window_len() as f64).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for `n_samples` under centered framing.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.sample_rate == 0 {
            return fail("sample rate must be positive");
        }
        if !(self.hop_fraction > 0.0 && self.hop_fraction < 1.0) {
            return fail("hop fraction must lie in (0, 1)");
        }
        if self.n_mels == 0 {
            return fail("n_mels must be at least 1");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return fail("need 0 <= fmin < fmax");
        }
        if self.fmax > f64::from(self.sample_rate) / 2.0 {
            return fail("fmax exceeds the Nyquist frequency");
        }
        if !(self.log_floor > 0.0) {
            return fail("log floor must be positive");
        }
        let win = self.window_len();
        if win < 2 || self.hop_len() == 0 {
            return fail("window too short for the sample rate");
        }
        if !self.fft_size.is_power_of_two() {
            return Err(Error::FftSize(self.fft_size));
        }
        if self.fft_size < win {
            return fail("fft size smaller than the analysis window");
        }
        Ok(())
    }
}

/// Frequency-major log-Mel grid: `n_mels` rows of `n_frames` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub data: Vec<f32>,
}

impl Spectrogram {
    pub fn new(n_mels: usize, n_frames: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_mels * n_frames {
            return Err(Error::Config(format!(
                "spectrogram {n_mels}x{n_frames} needs {} values, got {}",
                n_mels * n_frames,
                data.len()
            )));
        }
        Ok(Self {
            n_mels,
            n_frames,
            data,
        })
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.data[mel * self.n_frames + frame]
    }

    pub fn row(&self, mel: usize) -> &[f32] {
        &self.data[mel * self.n_frames..(mel + 1) * self.n_frames]
    }

    /// CSV with one row per Mel band, 9 significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 16);
        for m in 0..self.n_mels {
            let row: Vec<String> = self.row(m).iter().map(|v| format!("{v:.8e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Index into a signal of length `len` with whole-sample symmetric
/// reflection (`[a b c d]` extends as `c b | a b c d | c b`).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Cuts the waveform into Hann-windowed frames of `window_len` samples.
/// The signal is reflect-padded by half a window at both ends, so frame `t`
/// is centred on sample `t * hop`.
pub fn frame_signal(w: &Waveform, cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    if w.is_empty() {
        return Err(Error::EmptyInput);
    }
    cfg.validate()?;
    let win = cfg.window_len();
    let hop = cfg.hop_len();
    let pad = (win / 2) as isize;
    let window = hann_window(win);
    let n_frames = cfg.n_frames(w.len());
    let frames = (0..n_frames)
        .map(|t| {
            let start = (t * hop) as isize - pad;
            window
                .iter()
                .enumerate()
                .map(|(k, &wk)| {
                    let idx = reflect_index(start + k as isize, w.len());
                    f64::from(w.samples[idx]) * wk
                })
                .collect()
        })
        .collect();
    Ok(frames)
}

/// One-sided power spectrum `|FFT|²` of each frame, zero-padded to
/// `fft_size`. Returns `n_frames` columns of `fft_size/2 + 1` bins.
pub fn power_spectrum(frames: &[Vec<f64>], fft_size: usize) -> Result<Vec<Vec<f64>>> {
    if !fft_size.is_power_of_two() {
        return Err(Error::FftSize(fft_size));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let n_bins = fft_size / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    frames
        .iter()
        .map(|frame| {
            if frame.len() > fft_size {
                return Err(Error::Config(format!(
                    "frame of {} samples exceeds fft size {fft_size}",
                    frame.len()
                )));
            }
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (c, &x) in buf.iter_mut().zip(frame) {
                c.re = x;
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            Ok(buf[..n_bins].iter().map(|c| c.norm_sqr()).collect())
        })
        .collect()
}

pub fn hz_to_mel(hz: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 2595.0 * (1.0 + hz / 700.0).log10(),
        MelScale::Slaney => {
            let f_sp = 200.0 / 3.0;
            let min_log_hz = 1000.0;
            let min_log_mel = min_log_hz / f_sp;
            let logstep = 6.4f64.ln() / 27.0;
            if hz >= min_log_hz {
                min_log_mel + (hz / min_log_hz).ln() / logstep
            } else {
                hz / f_sp
            }
        }
    }
}

pub fn mel_to_hz(mel: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 700.0 * (10f64.powf(mel / 2595.0) - 1.0),
        MelScale::Slaney => {
            let f_sp = 200.0 / 3.0;
            let min_log_hz = 1000.0;
            let min_log_mel = min_log_hz / f_sp;
            let logstep = 6.4f64.ln() / 27.0;
            if mel >= min_log_mel {
                min_log_hz * (logstep * (mel - min_log_mel)).exp()
            } else {
                f_sp * mel
            }
        }
    }
}

/// Band edge frequencies: `n_mels + 2` points equally spaced on the Mel axis
/// between `fmin` and `fmax`. Band `i` rises from point `i` to `i+1` and
/// falls back to zero at `i+2`.
pub fn mel_band_edges(cfg: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin, cfg.mel_scale);
    let hi = hz_to_mel(cfg.fmax, cfg.mel_scale);
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64, cfg.mel_scale))
        .collect()
}

/// Triangular Mel filterbank, `n_mels` rows by `fft_size/2 + 1` columns.
pub fn mel_filterbank(cfg: &FrontendConfig, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let nyquist = f64::from(sample_rate) / 2.0;
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| nyquist * k as f64 / (n_bins - 1) as f64)
        .collect();
    let edges = mel_band_edges(cfg);
    let mut bank = Vec::with_capacity(cfg.n_mels);
    for band in 0..cfg.n_mels {
        let (left, center, right) = (edges[band], edges[band + 1], edges[band + 2]);
        let norm = if cfg.area_normalize {
            2.0 / (right - left)
        } else {
            1.0
        };
        let row: Vec<f64> = bin_hz
            .iter()
            .map(|&f| {
                let rising = (f - left) / (center - left);
                let falling = (right - f) / (right - center);
                rising.min(falling).max(0.0) * norm
            })
            .collect();
        if !row.iter().any(|&v| v > 0.0) {
            return Err(Error::EmptyMelBand { band });
        }
        bank.push(row);
    }
    Ok(bank)
}

/// Full pipeline: frames → power spectrum → Mel projection → `ln(x + floor)`.
pub fn log_mel(w: &Waveform, cfg: &FrontendConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "waveform is {} Hz but the frontend expects {} Hz (no resampling)",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let frames = frame_signal(w, cfg)?;
    let power = power_spectrum(&frames, cfg.fft_size)?;
    let bank = mel_filterbank(cfg, w.sample_rate)?;
    let n_frames = power.len();
    let mut data = vec![0f32; cfg.n_mels * n_frames];
    for (m, filt) in bank.iter().enumerate() {
        for (t, col) in power.iter().enumerate() {
            let energy: f64 = filt.iter().zip(col).map(|(a, b)| a * b).sum();
            data[m * n_frames + t] = (energy + cfg.log_floor).ln() as f32;
        }
    }
    Spectrogram::new(cfg.n_mels, n_frames, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize, amp: f32) -> Waveform {
        let samples = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / 44_100.0).sin() as f32)
            .collect();
        Waveform::new(samples, 44_100).unwrap()
    }

    #[test]
    fn paper_geometry() {
        let cfg = FrontendConfig::default();
        assert_eq!(cfg.window_len(), 1764);
        assert_eq!(cfg.hop_len(), 882);
        let frames = frame_signal(&tone(440.0, 44_100, 0.5), &cfg).unwrap();
        assert_eq!(frames.len(), 51);
        assert!(frames.iter().all(|f| f.len() == 1764));
    }

    #[test]
    fn half_window_gives_two_frames() {
        let cfg = FrontendConfig::default();
        let frames = frame_signal(&tone(440.0, 882, 0.5), &cfg).unwrap();
        assert_eq!(frames.len(), 2);
    }

    #[test]
    fn empty_waveform_is_rejected() {
        let w = Waveform::new(vec![], 44_100).unwrap();
        assert!(matches!(
            frame_signal(&w, &FrontendConfig::default()),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn zero_signal_gives_zero_frames() {
        let w = Waveform::new(vec![0.0; 4410], 44_100).unwrap();
        let frames = frame_signal(&w, &FrontendConfig::default()).unwrap();
        assert!(frames.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_the_edge() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(-3, 4), 3);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(-5, 4), 1);
        assert_eq!(reflect_index(7, 1), 0);
    }

    #[test]
    fn non_power_of_two_fft_is_rejected() {
        assert!(matches!(
            power_spectrum(&[vec![0.0; 8]], 1000),
            Err(Error::FftSize(1000))
        ));
        let cfg = FrontendConfig {
            fft_size: 3000,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::FftSize(3000))));
    }

    #[test]
    fn zero_frame_has_zero_power() {
        let p = power_spectrum(&[vec![0.0; 64]], 64).unwrap();
        assert_eq!(p[0].len(), 33);
        assert!(p[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_peaks_at_its_bin() {
        let n = 256;
        for k in [1usize, 17, 60, 127] {
            let frame: Vec<f64> = (0..n)
                .map(|i| (2.0 * PI * k as f64 * i as f64 / n as f64).cos())
                .collect();
            let p = power_spectrum(&[frame], n).unwrap();
            let argmax = p[0]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn filterbank_shape_and_positivity() {
        let cfg = FrontendConfig::default();
        let bank = mel_filterbank(&cfg, 44_100).unwrap();
        assert_eq!(bank.len(), 64);
        assert!(bank.iter().all(|r| r.len() == 1025));
        assert!(bank.iter().flatten().all(|&v| v >= 0.0));
        assert!(bank.iter().all(|r| r.iter().any(|&v| v > 0.0)));
    }

    #[test]
    fn too_many_bands_for_the_resolution() {
        let cfg = FrontendConfig {
            n_mels: 900,
            ..Default::default()
        };
        assert!(matches!(
            mel_filterbank(&cfg, 44_100),
            Err(Error::EmptyMelBand { .. })
        ));
    }

    #[test]
    fn mel_scales_round_trip() {
        for scale in [MelScale::Slaney, MelScale::Htk] {
            for hz in [0.0, 250.0, 999.0, 1000.0, 4000.0, 22_050.0] {
                let back = mel_to_hz(hz_to_mel(hz, scale), scale);
                assert!((back - hz).abs() < 1e-6 * hz.max(1.0));
            }
        }
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let cfg = FrontendConfig::default();
        let w = Waveform::new(vec![0.0; 44_100], 44_100).unwrap();
        let s = log_mel(&w, &cfg).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert_eq!((s.n_mels, s.n_frames), (64, 51));
        assert!(s.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        assert!(log_mel(&w, &FrontendConfig::default()).is_err());
    }

    #[test]
    fn invalid_waveforms() {
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f32::NAN], 44_100).is_err());
    }

    #[test]
    fn csv_dump_has_one_row_per_band() {
        let s = Spectrogram::new(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-3, -1e4]).unwrap();
        let csv = s.to_csv();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], "1.00000000e0,-2.50000000e0,3.25000000e0");
        let parsed: Vec<f32> = rows[1].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(parsed, vec![0.0, 1e-3, -1e4]);
    }
}
