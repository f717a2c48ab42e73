//! Region-of-interest grid, sparse scattering vector, and channel generation.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{complex_gaussian, substream};

/// Discretized imaging volume: `dims = (K1, K2, K3)` pixels per axis. The
/// scattering vector is partitioned into `K2·K3` blocks of length `K1`
/// (runs along the first axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiGrid {
    pub dims: (usize, usize, usize),
    /// Physical volume in meters per axis; metadata only.
    #[serde(default)]
    pub room_size: Option<[f64; 3]>,
}

impl RoiGrid {
    pub fn new(dims: (usize, usize, usize)) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::Parameter("grid axes must be at least 1".into()));
        }
        Ok(Self {
            dims,
            room_size: None,
        })
    }

    /// Total pixel count `K = K1·K2·K3`.
    pub fn k(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn block_len(&self) -> usize {
        self.dims.0
    }

    pub fn n_blocks(&self) -> usize {
        self.dims.1 * self.dims.2
    }
}

/// Sparse nonnegative scattering amplitudes over a grid, held in complex
/// arithmetic so estimator algebra is uniformly complex.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiVector {
    pub grid: RoiGrid,
    pub x: DVector<Complex64>,
}

impl RoiVector {
    pub fn support_size(&self) -> usize {
        self.x.iter().filter(|v| v.norm() > 0.0).count()
    }
}

pub fn build_roi(grid: RoiGrid, support: &[usize], amplitudes: &[f64]) -> Result<RoiVector> {
    let k = grid.k();
    if support.len() != amplitudes.len() {
        return Err(Error::Parameter(
            "support and amplitude lists must have equal length".into(),
        ));
    }
    let mut x = DVector::from_element(k, Complex64::ZERO);
    for (&idx, &amp) in support.iter().zip(amplitudes) {
        if idx >= k {
            return Err(Error::Parameter(format!(
                "support index {idx} out of range for {k} pixels"
            )));
        }
        if amp < 0.0 {
            return Err(Error::Parameter(format!(
                "amplitude {amp} at index {idx} is negative"
            )));
        }
        x[idx] = Complex64::new(amp, 0.0);
    }
    Ok(RoiVector { grid, x })
}

/// Views of the `K2·K3` contiguous length-`K1` blocks; concatenation in
/// order reproduces the vector.
pub fn block_partition<'a>(
    x: &'a DVector<Complex64>,
    grid: &RoiGrid,
) -> Result<Vec<&'a [Complex64]>> {
    if x.len() != grid.k() {
        return Err(Error::Dimension(format!(
            "vector length {} does not match grid size {}",
            x.len(),
            grid.k()
        )));
    }
    let b = grid.block_len();
    Ok(x.as_slice().chunks(b).collect())
}

/// Sum of per-block Euclidean norms (the mixed group norm the block-sparsity
/// penalty acts on).
pub fn l21_norm(x: &DVector<Complex64>, grid: &RoiGrid) -> Result<f64> {
    Ok(block_partition(x, grid)?
        .into_iter()
        .map(|b| b.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt())
        .sum())
}

/// Channel generation model. The default is i.i.d. unit-variance complex
/// Gaussian entries; `path_loss` scales each sensing user's channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ChannelModel {
    #[serde(default)]
    pub path_loss: Option<Vec<f64>>,
}

/// All propagation channels: `g_bs_roi` is M×K from transmitter to pixels,
/// `h[n]` is the length-K pixel-to-user channel, `g_comm` is the length-M
/// direct link to the communication user.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub g_bs_roi: DMatrix<Complex64>,
    pub h: Vec<DVector<Complex64>>,
    pub g_comm: DVector<Complex64>,
}

impl ChannelSet {
    pub fn n_users(&self) -> usize {
        self.h.len()
    }

    pub fn m(&self) -> usize {
        self.g_bs_roi.nrows()
    }

    pub fn k(&self) -> usize {
        self.g_bs_roi.ncols()
    }
}

pub fn generate_channels(
    m: usize,
    grid: &RoiGrid,
    n_users: usize,
    model: &ChannelModel,
    seed: u64,
) -> Result<ChannelSet> {
    if m == 0 || n_users == 0 {
        return Err(Error::Parameter("need at least one antenna and one user".into()));
    }
    if let Some(pl) = &model.path_loss {
        if pl.len() != n_users {
            return Err(Error::Parameter(format!(
                "path-loss list has {} entries for {} users",
                pl.len(),
                n_users
            )));
        }
    }
    let k = grid.k();
    let mut rng = substream(seed, "scene/channels", &[m as u64, k as u64, n_users as u64]);
    let g_bs_roi = DMatrix::from_fn(m, k, |_, _| complex_gaussian(&mut rng, 1.0));
    let h = (0..n_users)
        .map(|n| {
            let scale = model
                .path_loss
                .as_ref()
                .map(|pl| pl[n])
                .unwrap_or(1.0);
            DVector::from_fn(k, |_, _| complex_gaussian(&mut rng, 1.0) * scale)
        })
        .collect();
    let g_comm = DVector::from_fn(m, |_, _| complex_gaussian(&mut rng, 1.0));
    Ok(ChannelSet {
        g_bs_roi,
        h,
        g_comm,
    })
}

/// Compact scene description for JSON export; channels are regenerated from
/// the recorded seed rather than stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneJson {
    pub dims: (usize, usize, usize),
    pub support: Vec<usize>,
    pub amplitudes: Vec<f64>,
    pub channel_seed: u64,
    pub channel_model: ChannelModel,
}

/// A full problem instance: ground-truth scattering vector plus channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub roi: RoiVector,
    pub channels: ChannelSet,
}

impl Scene {
    pub fn k(&self) -> usize {
        self.roi.grid.k()
    }

    pub fn n_users(&self) -> usize {
        self.channels.n_users()
    }
}

/// Draws a random scene: `l` support pixels chosen uniformly without
/// replacement, unit amplitudes, Rayleigh channels.
pub fn random_scene(
    grid: RoiGrid,
    l: usize,
    m: usize,
    n_users: usize,
    seed: u64,
) -> Result<Scene> {
    let k = grid.k();
    if l > k {
        return Err(Error::Parameter(format!(
            "support size {l} exceeds pixel count {k}"
        )));
    }
    let mut rng = substream(seed, "scene/support", &[k as u64, l as u64]);
    let mut indices: Vec<usize> = (0..k).collect();
    // Partial Fisher-Yates: the first l entries are a uniform sample.
    for i in 0..l {
        let j = i + rng.random_range(0..k - i);
        indices.swap(i, j);
    }
    let mut support = indices[..l].to_vec();
    support.sort_unstable();
    let roi = build_roi(grid, &support, &vec![1.0; l])?;
    let channels = generate_channels(m, &grid, n_users, &ChannelModel::default(), seed)?;
    Ok(Scene { roi, channels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn empty_scene_is_zero() {
        let grid = RoiGrid::new((2, 2, 2)).unwrap();
        let roi = build_roi(grid, &[], &[]).unwrap();
        assert_eq!(roi.support_size(), 0);
        assert_eq!(roi.x.len(), 8);
    }

    #[test]
    fn contiguous_cube_support() {
        let grid = RoiGrid::new((4, 4, 4)).unwrap();
        let support: Vec<usize> = (0..8).collect();
        let roi = build_roi(grid, &support, &vec![1.0; 8]).unwrap();
        assert_eq!(grid.k(), 64);
        assert_eq!(roi.support_size(), 8);
    }

    #[test]
    fn singleton_amplitude() {
        let grid = RoiGrid::new((2, 2, 2)).unwrap();
        let roi = build_roi(grid, &[0], &[2.5]).unwrap();
        assert_eq!(roi.x[0], Complex64::new(2.5, 0.0));
        assert!(roi.x.iter().skip(1).all(|v| *v == Complex64::ZERO));
    }

    #[test]
    fn bad_inputs_rejected() {
        let grid = RoiGrid::new((2, 1, 1)).unwrap();
        assert!(build_roi(grid, &[5], &[1.0]).is_err());
        assert!(build_roi(grid, &[0], &[-1.0]).is_err());
        assert!(build_roi(grid, &[0, 1], &[1.0]).is_err());
    }

    #[test]
    fn single_block_partition() {
        let grid = RoiGrid::new((2, 1, 1)).unwrap();
        let roi = build_roi(grid, &[0, 1], &[3.0, 4.0]).unwrap();
        let blocks = block_partition(&roi.x, &grid).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].len(), 2);
    }

    #[test]
    fn two_block_l21() {
        let grid = RoiGrid::new((2, 2, 1)).unwrap();
        let roi = build_roi(grid, &[0, 1], &[3.0, 4.0]).unwrap();
        let blocks = block_partition(&roi.x, &grid).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_relative_eq!(l21_norm(&roi.x, &grid).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn l21_dominates_l2_and_reassembles() {
        let grid = RoiGrid::new((3, 2, 2)).unwrap();
        let mut rng = substream(11, "test/l21", &[]);
        let x = DVector::from_fn(grid.k(), |_, _| complex_gaussian(&mut rng, 1.0));
        let l21 = l21_norm(&x, &grid).unwrap();
        assert!(l21 >= x.norm() - 1e-12);
        // Direct definitional evaluation.
        let direct: f64 = (0..grid.n_blocks())
            .map(|b| {
                (0..grid.block_len())
                    .map(|j| x[b * grid.block_len() + j].norm_sqr())
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        assert_relative_eq!(l21, direct, epsilon = 1e-12);
        let flat: Vec<Complex64> = block_partition(&x, &grid)
            .unwrap()
            .into_iter()
            .flatten()
            .copied()
            .collect();
        assert_eq!(DVector::from_vec(flat), x);
    }

    #[test]
    fn channels_deterministic() {
        let grid = RoiGrid::new((1, 1, 1)).unwrap();
        let a = generate_channels(1, &grid, 1, &ChannelModel::default(), 5).unwrap();
        let b = generate_channels(1, &grid, 1, &ChannelModel::default(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_channels(1, &grid, 1, &ChannelModel::default(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn channel_entry_variance_near_unit() {
        let grid = RoiGrid::new((10, 10, 4)).unwrap();
        let ch = generate_channels(20, &grid, 1, &ChannelModel::default(), 3).unwrap();
        let n = (ch.g_bs_roi.nrows() * ch.g_bs_roi.ncols()) as f64;
        let var = ch.g_bs_roi.iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn zero_path_loss_silences_user() {
        let grid = RoiGrid::new((2, 2, 1)).unwrap();
        let model = ChannelModel {
            path_loss: Some(vec![1.0, 0.0]),
        };
        let ch = generate_channels(3, &grid, 2, &model, 9).unwrap();
        assert!(ch.h[1].iter().all(|v| *v == Complex64::ZERO));
        assert!(ch.h[0].iter().any(|v| *v != Complex64::ZERO));
    }

    #[test]
    fn random_scene_has_requested_sparsity() {
        let grid = RoiGrid::new((2, 2, 2)).unwrap();
        let s = random_scene(grid, 3, 4, 5, 42).unwrap();
        assert_eq!(s.roi.support_size(), 3);
        assert_eq!(s.channels.n_users(), 5);
        assert_eq!(s.channels.m(), 4);
        assert_eq!(random_scene(grid, 3, 4, 5, 42).unwrap(), s);
    }
}
