use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Seconds.
    pub window: f64,
    /// Seconds.
    pub hop: f64,
    pub num_mel: usize,
    pub num_ceps: usize,
    pub log_floor: f64,
    pub fft_size: usize,
    pub preemphasis: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16000,
            window: 0.025,
            hop: 0.010,
            num_mel: 64,
            num_ceps: 40,
            log_floor: 1e-10,
            fft_size: 512,
            preemphasis: 0.97,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.window * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (win, hop) = (self.window_samples(), self.hop_samples());
        if hop == 0 || win == 0 || hop > win {
            return Err(Error::Config(format!("need 0 < hop <= window, got hop {hop}, window {win} samples")));
        }
        if win > self.fft_size {
            return Err(Error::Config(format!("window of {win} samples exceeds fft size {}", self.fft_size)));
        }
        if self.num_ceps == 0 || self.num_ceps > self.num_mel {
            return Err(Error::Config(format!(
                "num_ceps {} must be in 1..={}",
                self.num_ceps, self.num_mel
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// `1 + floor((samples - window) / hop)`.
    pub fn num_frames(&self, samples: usize) -> Option<usize> {
        let win = self.window_samples();
        (samples >= win).then(|| 1 + (samples - win) / self.hop_samples())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `num_mel x (fft_size/2 + 1)` weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(num_mel: usize, fft_size: usize, sample_rate: u32) -> Self {
        let bins = fft_size / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..num_mel + 2)
            .map(|i| mel_to_hz(top * i as f64 / (num_mel + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let weights = (0..num_mel)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|b| {
                        let f = b as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect();
        MelFilterbank {
            weights,
            centers_hz: edges[1..=num_mel].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(magnitude).map(|(a, b)| a * b).sum())
            .collect()
    }
}

struct Analyzer {
    cfg: FrontendConfig,
    window: Vec<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    bank: MelFilterbank,
}

impl Analyzer {
    fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_samples();
        let window = (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Analyzer {
            cfg: cfg.clone(),
            window,
            fft,
            bank: MelFilterbank::new(cfg.num_mel, cfg.fft_size, cfg.sample_rate),
        })
    }

    /// Mel energies per frame (before the log).
    fn mel_frames(&self, waveform: &[f64]) -> Result<Vec<Vec<f64>>> {
        let frames = self.cfg.num_frames(waveform.len()).ok_or_else(|| {
            Error::Input(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                waveform.len(),
                self.cfg.window_samples()
            ))
        })?;
        let mut emphasized = Vec::with_capacity(waveform.len());
        emphasized.push(waveform[0]);
        for i in 1..waveform.len() {
            emphasized.push(waveform[i] - self.cfg.preemphasis * waveform[i - 1]);
        }
        let (win, hop) = (self.cfg.window_samples(), self.cfg.hop_samples());
        let bins = self.cfg.fft_size / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut out = Vec::with_capacity(frames);
        for f in 0..frames {
            let seg = &emphasized[f * hop..f * hop + win];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = Complex::new(if i < win { seg[i] * self.window[i] } else { 0.0 }, 0.0);
            }
            self.fft.process(&mut buf);
            let mag: Vec<f64> = buf[..bins].iter().map(|c| c.norm()).collect();
            out.push(self.bank.apply(&mag));
        }
        Ok(out)
    }
}

/// Per-frame mel filterbank energies (magnitude spectrum, no log).
pub fn mel_energies(waveform: &[f64], cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    Analyzer::new(cfg)?.mel_frames(waveform)
}

/// Pre-emphasis, Hamming window, magnitude spectrum, mel filterbank,
/// floored log, then an orthonormal DCT-II truncated to `num_ceps`.
pub fn compute_mfcc(waveform: &[f64], cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let analyzer = Analyzer::new(cfg)?;
    let mel = analyzer.mel_frames(waveform)?;
    let (m, c) = (cfg.num_mel, cfg.num_ceps);
    let basis: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            (0..m)
                .map(|n| scale * (PI * k as f64 * (2 * n + 1) as f64 / (2 * m) as f64).cos())
                .collect()
        })
        .collect();
    let mut values = Vec::with_capacity(mel.len() * c);
    for energies in &mel {
        let logs: Vec<f64> = energies.iter().map(|e| e.max(cfg.log_floor).ln()).collect();
        for row in &basis {
            values.push(row.iter().zip(&logs).map(|(a, b)| a * b).sum::<f64>() as f32);
        }
    }
    FeatureMatrix::new(mel.len(), c, values)
}
