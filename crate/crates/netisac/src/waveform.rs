//! Symbol streams and synthesis of every received signal in the system model.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::rng::{complex_gaussian, substream};
use crate::scene::Scene;

/// Sensing beam `w` and data beam `f`, both length M.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerPair {
    pub w: DVector<Complex64>,
    pub f: DVector<Complex64>,
}

impl BeamformerPair {
    pub fn power(&self) -> f64 {
        self.w.norm_squared() + self.f.norm_squared()
    }
}

/// Unit-modulus sensing and data symbol streams over a horizon of T slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolStreams {
    pub s_e: DVector<Complex64>,
    pub s_d: DVector<Complex64>,
}

impl SymbolStreams {
    pub fn horizon(&self) -> usize {
        self.s_e.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Receiver (output) noise variance.
    pub sigma_o2: f64,
    /// Input-perturbation variance consumed by the closed-form error theory.
    pub sigma_in2: f64,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            sigma_o2: 0.0,
            sigma_in2: 0.0,
        }
    }
}

/// Independent QPSK draws for both streams; deterministic per seed.
pub fn gen_symbols(t: usize, seed: u64) -> Result<SymbolStreams> {
    if t == 0 {
        return Err(Error::Parameter("symbol horizon must be at least 1".into()));
    }
    let mut rng = substream(seed, "waveform/symbols", &[t as u64]);
    let draw = |rng: &mut rand_chacha::ChaCha12Rng| {
        let q = rng.random_range(0u8..4);
        let (re, im) = match q {
            0 => (1.0, 1.0),
            1 => (-1.0, 1.0),
            2 => (-1.0, -1.0),
            _ => (1.0, -1.0),
        };
        Complex64::new(re, im) / 2f64.sqrt()
    };
    let s_e = DVector::from_fn(t, |_, _| draw(&mut rng));
    let s_d = DVector::from_fn(t, |_, _| draw(&mut rng));
    Ok(SymbolStreams { s_e, s_d })
}

/// Sensing-path signature `a_n = diag(h_n)ᴴ Gᴴ beam` of user `n`: the
/// noiseless unit-symbol receive direction through the scene.
pub fn user_signature(scene: &Scene, beam: &DVector<Complex64>, n: usize) -> DVector<Complex64> {
    let ghw = scene.channels.g_bs_roi.adjoint() * beam;
    DVector::from_fn(scene.k(), |k, _| scene.channels.h[n][k].conj() * ghw[k])
}

/// Noise-free input row `u_{n,i} = (s_e,i wᴴ G diag(h_n))ᴴ`.
pub fn clean_input_row(
    w: &DVector<Complex64>,
    g: &DMatrix<Complex64>,
    h_n: &DVector<Complex64>,
    s_e_i: Complex64,
) -> DVector<Complex64> {
    let ghw = g.adjoint() * w;
    DVector::from_fn(h_n.len(), |k, _| s_e_i.conj() * h_n[k].conj() * ghw[k])
}

/// One echo sample at user `n`, slot `i`:
/// `y = (s_e,i wᴴ + s_d,i fᴴ) G diag(h_n) x + v`, `v ~ CN(0, σ_o²)`.
pub fn sensing_rx<R: Rng + ?Sized>(
    scene: &Scene,
    beams: &BeamformerPair,
    streams: &SymbolStreams,
    noise: &NoiseConfig,
    n: usize,
    i: usize,
    rng: &mut R,
) -> Complex64 {
    let a_w = user_signature(scene, &beams.w, n);
    let a_f = user_signature(scene, &beams.f, n);
    let sens = streams.s_e[i] * a_w.dotc(&scene.roi.x);
    let data = streams.s_d[i] * a_f.dotc(&scene.roi.x);
    sens + data + complex_gaussian(rng, noise.sigma_o2)
}

/// Downlink sample at the communication user:
/// `y = gᴴw s_e,i + gᴴf s_d,i + z̄`, `z̄ ~ CN(0, σ_o²)`.
pub fn comm_rx<R: Rng + ?Sized>(
    beams: &BeamformerPair,
    g: &DVector<Complex64>,
    streams: &SymbolStreams,
    noise: &NoiseConfig,
    i: usize,
    rng: &mut R,
) -> Complex64 {
    g.dotc(&beams.w) * streams.s_e[i] + g.dotc(&beams.f) * streams.s_d[i]
        + complex_gaussian(rng, noise.sigma_o2)
}

/// Full measurement record: one length-T echo vector per user.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub y: Vec<DVector<Complex64>>,
}

impl Measurements {
    pub fn n_users(&self) -> usize {
        self.y.len()
    }

    pub fn horizon(&self) -> usize {
        self.y.first().map(|v| v.len()).unwrap_or(0)
    }

    /// CSV rows `user,time,re_y,im_y`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "user,time,re_y,im_y")?;
        for (n, yn) in self.y.iter().enumerate() {
            for (i, v) in yn.iter().enumerate() {
                writeln!(out, "{n},{i},{:.17e},{:.17e}", v.re, v.im)?;
            }
        }
        Ok(())
    }
}

/// Synthesizes all users' echoes over the full horizon with independent
/// noise per (user, slot); reproducible per seed.
pub fn batch_rx(
    scene: &Scene,
    beams: &BeamformerPair,
    streams: &SymbolStreams,
    noise: &NoiseConfig,
    seed: u64,
) -> Measurements {
    let t = streams.horizon();
    let y = (0..scene.n_users())
        .map(|n| {
            // Hoist the per-user signatures out of the time loop.
            let a_w = user_signature(scene, &beams.w, n);
            let a_f = user_signature(scene, &beams.f, n);
            let sens = a_w.dotc(&scene.roi.x);
            let data = a_f.dotc(&scene.roi.x);
            let mut rng = substream(seed, "waveform/rx-noise", &[n as u64]);
            DVector::from_fn(t, |i, _| {
                streams.s_e[i] * sens
                    + streams.s_d[i] * data
                    + complex_gaussian(&mut rng, noise.sigma_o2)
            })
        })
        .collect();
    Measurements { y }
}
