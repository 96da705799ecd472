//! Fixed invertible waveform/latent transform.
//!
//! The waveform is cut into non-overlapping frames of `frame_size` samples;
//! each frame is analysed with an orthonormal cosine basis, giving one latent
//! channel per basis function. Keeping all `frame_size` coefficients makes
//! the transform exactly invertible; the model works on a fixed orthonormal
//! projection to the first `model_channels` coefficients, scaled so latent
//! entries are O(1).

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

/// Codec geometry. Defaults: 4 kHz mono, 160-sample frames (25 latent
/// frames per second, so 10 s spans 250 frames), 16 model channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub frame_size: usize,
    pub model_channels: usize,
    pub latent_scale: f64,
    pub transform: String,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            sample_rate: 4000,
            frame_size: 160,
            model_channels: 16,
            latent_scale: 0.125,
            transform: "dct2-ortho".to_string(),
        }
    }
}

impl CodecConfig {
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.frame_size as f64
    }
}

/// A channels-by-frames latent with frame-rate metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    channels: usize,
    frames: usize,
    frame_rate: f64,
    data: Vec<f64>,
}

impl Latent {
    pub fn zeros(channels: usize, frames: usize, frame_rate: f64) -> Self {
        Latent {
            channels,
            frames,
            frame_rate,
            data: vec![0.0; channels * frames],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, frame: usize) -> f64 {
        self.data[channel * self.frames + frame]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, frame: usize, v: f64) {
        self.data[channel * self.frames + frame] = v;
    }

    /// Frames-by-channels view used by the model.
    pub fn to_tokens(&self) -> Tensor2D<f64> {
        Tensor2D::from_fn(self.frames, self.channels, |f, c| self.get(c, f))
    }

    pub fn from_tokens(tokens: &Tensor2D<f64>, frame_rate: f64) -> Self {
        let mut latent = Latent::zeros(tokens.cols(), tokens.rows(), frame_rate);
        for f in 0..tokens.rows() {
            for c in 0..tokens.cols() {
                latent.set(c, f, tokens.get(f, c));
            }
        }
        latent
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// The fixed codec: orthonormal per-frame analysis/synthesis.
#[derive(Debug, Clone)]
pub struct Codec {
    config: CodecConfig,
    /// basis[k * R + n]: value of basis function k at sample n.
    basis: Vec<f64>,
}

impl Codec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        if config.frame_size == 0 || config.model_channels > config.frame_size {
            return Err(Error::config(format!(
                "bad codec geometry: frame_size {}, model_channels {}",
                config.frame_size, config.model_channels
            )));
        }
        if config.transform != "dct2-ortho" {
            return Err(Error::config(format!(
                "unknown transform {:?}",
                config.transform
            )));
        }
        let r = config.frame_size;
        let mut basis = vec![0.0; r * r];
        for k in 0..r {
            let norm = if k == 0 {
                (1.0 / r as f64).sqrt()
            } else {
                (2.0 / r as f64).sqrt()
            };
            for n in 0..r {
                basis[k * r + n] =
                    norm * (std::f64::consts::PI * (n as f64 + 0.5) * k as f64 / r as f64).cos();
            }
        }
        Ok(Codec { config, basis })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn frame_rate(&self) -> f64 {
        self.config.frame_rate()
    }

    /// Max abs deviation of `B B^T` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.config.frame_size;
        let mut worst: f64 = 0.0;
        for i in 0..r {
            for j in 0..r {
                let mut acc = 0.0;
                for n in 0..r {
                    acc += self.basis[i * r + n] * self.basis[j * r + n];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - want).abs());
            }
        }
        worst
    }

    /// Full analysis: all `frame_size` coefficients per frame. The input is
    /// zero-padded to a frame multiple.
    pub fn encode(&self, waveform: &[f64]) -> Result<Latent> {
        if waveform.is_empty() {
            return Err(Error::range("cannot encode an empty waveform"));
        }
        let r = self.config.frame_size;
        let frames = waveform.len().div_ceil(r);
        let mut latent = Latent::zeros(r, frames, self.frame_rate());
        let mut frame_buf = vec![0.0; r];
        for f in 0..frames {
            let lo = f * r;
            let hi = (lo + r).min(waveform.len());
            frame_buf[..hi - lo].copy_from_slice(&waveform[lo..hi]);
            for v in frame_buf[hi - lo..].iter_mut() {
                *v = 0.0;
            }
            for k in 0..r {
                let row = &self.basis[k * r..(k + 1) * r];
                let mut acc = 0.0;
                for (x, b) in frame_buf.iter().zip(row) {
                    acc += x * b;
                }
                latent.set(k, f, acc);
            }
        }
        Ok(latent)
    }

    /// Full synthesis: inverse of [`Codec::encode`]. Output length is
    /// `frames * frame_size`.
    pub fn decode(&self, latent: &Latent) -> Result<Vec<f64>> {
        let r = self.config.frame_size;
        if latent.channels != r {
            return Err(Error::shape(format!(
                "decode expects {} channels, got {}",
                r, latent.channels
            )));
        }
        let mut out = vec![0.0; latent.frames * r];
        for f in 0..latent.frames {
            let chunk = &mut out[f * r..(f + 1) * r];
            for k in 0..r {
                let c = latent.get(k, f);
                if c == 0.0 {
                    continue;
                }
                let row = &self.basis[k * r..(k + 1) * r];
                for (o, b) in chunk.iter_mut().zip(row) {
                    *o += c * b;
                }
            }
        }
        Ok(out)
    }

    /// Orthonormal projection of a full latent onto the model's channels,
    /// scaled by `latent_scale`.
    pub fn project(&self, latent: &Latent) -> Result<Latent> {
        if latent.channels != self.config.frame_size {
            return Err(Error::shape(format!(
                "project expects {} channels, got {}",
                self.config.frame_size, latent.channels
            )));
        }
        let c_model = self.config.model_channels;
        let mut out = Latent::zeros(c_model, latent.frames, latent.frame_rate);
        for c in 0..c_model {
            for f in 0..latent.frames {
                out.set(c, f, latent.get(c, f) * self.config.latent_scale);
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Codec::project`]: zero-fills the discarded channels.
    pub fn lift(&self, latent: &Latent) -> Result<Latent> {
        if latent.channels != self.config.model_channels {
            return Err(Error::shape(format!(
                "lift expects {} channels, got {}",
                self.config.model_channels, latent.channels
            )));
        }
        let mut out = Latent::zeros(self.config.frame_size, latent.frames, latent.frame_rate);
        for c in 0..latent.channels {
            for f in 0..latent.frames {
                out.set(c, f, latent.get(c, f) / self.config.latent_scale);
            }
        }
        Ok(out)
    }

    /// Waveform to model-space latent.
    pub fn encode_model(&self, waveform: &[f64]) -> Result<Latent> {
        self.project(&self.encode(waveform)?)
    }

    /// Model-space latent to waveform.
    pub fn decode_model(&self, latent: &Latent) -> Result<Vec<f64>> {
        self.decode(&self.lift(latent)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn codec() -> Codec {
        Codec::new(CodecConfig::default()).unwrap()
    }

    #[test]
    fn basis_is_orthonormal() {
        assert!(codec().orthonormality_error() < 1e-9);
    }

    #[test]
    fn zero_waveform_gives_zero_latent() {
        let c = codec();
        let latent = c.encode(&vec![0.0; 800]).unwrap();
        assert!(latent.data().iter().all(|&v| v == 0.0));
        let back = c.decode(&latent).unwrap();
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_is_exact_on_frame_multiple() {
        let c = codec();
        let mut rng = SeededRng::new(17);
        let x: Vec<f64> = (0..4000).map(|_| rng.normal() * 0.3).collect();
        let latent = c.encode(&x).unwrap();
        assert_eq!(latent.frames(), 25);
        assert_eq!(latent.frame_rate(), 25.0);
        let y = c.decode(&latent).unwrap();
        let worst = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "round trip error {worst}");
    }

    #[test]
    fn round_trip_pads_and_reconstructs_prefix() {
        let c = codec();
        let mut rng = SeededRng::new(18);
        let x: Vec<f64> = (0..999).map(|_| rng.normal() * 0.3).collect();
        let latent = c.encode(&x).unwrap();
        let y = c.decode(&latent).unwrap();
        assert_eq!(y.len(), 160 * 7);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
        for &v in &y[999..] {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn basis_frequency_concentrates_energy() {
        let c = codec();
        let r = 160;
        let k = 5;
        // Globally continuous cosine whose per-frame restriction is +-basis k.
        let x: Vec<f64> = (0..4000)
            .map(|n| (std::f64::consts::PI * (n as f64 + 0.5) * k as f64 / r as f64).cos())
            .collect();
        let latent = c.encode(&x).unwrap();
        let total = latent.energy();
        let channel_k: f64 = (0..latent.frames())
            .map(|f| latent.get(k, f).powi(2))
            .sum();
        assert!(channel_k / total > 0.99, "ratio {}", channel_k / total);
    }

    #[test]
    fn energy_is_preserved() {
        let c = codec();
        let mut rng = SeededRng::new(19);
        let x: Vec<f64> = (0..3200).map(|_| rng.normal() * 0.5).collect();
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let latent = c.encode(&x).unwrap();
        assert!((latent.energy() - ex).abs() / ex < 1e-6);
    }

    #[test]
    fn model_projection_round_trips_in_subspace() {
        let c = codec();
        // A waveform living entirely in the first 16 basis functions.
        let mut latent = Latent::zeros(160, 10, 25.0);
        let mut rng = SeededRng::new(20);
        for ch in 0..16 {
            for f in 0..10 {
                latent.set(ch, f, rng.normal());
            }
        }
        let x = c.decode(&latent).unwrap();
        let model = c.encode_model(&x).unwrap();
        assert_eq!(model.channels(), 16);
        let y = c.decode_model(&model).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tokens_round_trip() {
        let mut rng = SeededRng::new(21);
        let mut latent = Latent::zeros(16, 25, 25.0);
        for ch in 0..16 {
            for f in 0..25 {
                latent.set(ch, f, rng.normal());
            }
        }
        let tokens = latent.to_tokens();
        assert_eq!((tokens.rows(), tokens.cols()), (25, 16));
        let back = Latent::from_tokens(&tokens, 25.0);
        assert_eq!(latent, back);
    }

    #[test]
    fn empty_waveform_rejected() {
        assert!(codec().encode(&[]).is_err());
    }
}
