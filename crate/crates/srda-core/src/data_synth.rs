//! Synthetic cross-modality segmentation benchmark plus dataset I/O.
//!
//! Each phantom volume is a stack of 2D slices containing 3-7 bright
//! elliptical discs stacked vertically (a crude spine). Modality A renders
//! discs bright on a mid-gray background; modality B is produced by
//! [`modality_transform`]: contrast inversion, gamma warp, a smooth
//! multiplicative bias field and fresh noise. Both modalities share one
//! ground-truth mask.
//!
//! On disk a dataset is one directory per volume holding `image_modA.npy`
//! (float32), `image_modB.npy` (float32) and `mask.npy` (uint8), plus a
//! `manifest.json` at the root.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrdaError};
use crate::fsprobe;
use crate::npy;
use crate::ratio_prior::ImageTag;

pub const IMAGE_FILE_MOD_A: &str = "image_modA.npy";
pub const IMAGE_FILE_MOD_B: &str = "image_modB.npy";
pub const MASK_FILE: &str = "mask.npy";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-slice foreground-fraction band enforced for non-empty slices.
pub const FG_RATIO_MIN: f64 = 0.02;
pub const FG_RATIO_MAX: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn image_file(&self) -> &'static str {
        match self {
            Modality::A => IMAGE_FILE_MOD_A,
            Modality::B => IMAGE_FILE_MOD_B,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = SrdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "modA" => Ok(Modality::A),
            "B" | "b" | "modB" => Ok(Modality::B),
            other => Err(SrdaError::InvalidArgument(format!(
                "unknown modality '{other}' (expected A or B)"
            ))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::A => write!(f, "A"),
            Modality::B => write!(f, "B"),
        }
    }
}

/// One generated volume: a shared mask and two aligned intensity renderings.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomVolume {
    pub id: usize,
    pub mask: Array3<u8>,
    pub image_mod_a: Array3<f64>,
    pub image_mod_b: Array3<f64>,
}

/// A single 2D training/evaluation sample.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub image: Array2<f64>,
    pub mask: Array2<u8>,
    pub tag: ImageTag,
    pub volume_id: usize,
    pub slice_index: usize,
}

/// Appearance-shift parameters applied by [`modality_transform`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalityParams {
    pub invert: bool,
    pub gamma: f64,
    pub bias_amplitude: f64,
    pub bias_seed: u64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl ModalityParams {
    pub fn identity() -> Self {
        ModalityParams {
            invert: false,
            gamma: 1.0,
            bias_amplitude: 0.0,
            bias_seed: 0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }
}

/// Smooth random field in roughly [-1, 1]: a coarse grid of normal samples,
/// bilinearly interpolated up to `(h, w)`.
fn smooth_field(seed: u64, h: usize, w: usize, cells: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.55).unwrap();
    let grid = Array2::from_shape_fn((cells + 1, cells + 1), |_| normal.sample(&mut rng));
    Array2::from_shape_fn((h, w), |(y, x)| {
        let gy = y as f64 / (h - 1).max(1) as f64 * cells as f64;
        let gx = x as f64 / (w - 1).max(1) as f64 * cells as f64;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(cells), (x0 + 1).min(cells));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bot = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Intensity-only appearance shift: inversion, gamma warp, multiplicative
/// bias field, additive Gaussian noise; output clipped to [0, 1].
///
/// Identity parameters return the input unchanged bit-for-bit.
pub fn modality_transform(image: &Array2<f64>, params: &ModalityParams) -> Array2<f64> {
    let (h, w) = image.dim();
    let mut out = image.clone();
    if params.invert {
        out.mapv_inplace(|v| 1.0 - v);
    }
    if params.gamma != 1.0 {
        out.mapv_inplace(|v| v.max(0.0).powf(params.gamma));
    }
    if params.bias_amplitude != 0.0 {
        let field = smooth_field(params.bias_seed, h, w, 3);
        out.zip_mut_with(&field, |v, &f| {
            *v *= (1.0 + params.bias_amplitude * f).max(0.1);
        });
    }
    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
        let normal = Normal::new(0.0, params.noise_sigma).unwrap();
        out.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    if params.invert || params.gamma != 1.0 || params.bias_amplitude != 0.0 || params.noise_sigma > 0.0
    {
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    out
}

struct Disc {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    z0: usize,
    z1: usize, // inclusive
    gain: f64,
    /// Dark discs render below the background level, bright ones above.
    /// Mixing polarities keeps the cross-modality task partially
    /// transferable: inversion maps each polarity onto the other.
    dark: bool,
}

fn draw_discs(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> Vec<Disc> {
    let n_discs = rng.random_range(3..=7usize);
    let margin = (0.09 * h as f64).max(3.0);
    let slot = (h as f64 - 2.0 * margin) / n_discs as f64;
    let scale_y = h as f64 / 64.0;
    let scale_x = w as f64 / 64.0;

    // Interior z range [1, d-2]; first and last slices always stay empty.
    let z_lo = 1usize;
    let z_hi = d - 2;
    let z_mid = (z_lo + z_hi) / 2;

    (0..n_discs)
        .map(|j| {
            let cy = margin + (j as f64 + 0.5) * slot + rng.random_range(-0.15..0.15) * slot;
            let cx = w as f64 / 2.0 + rng.random_range(-0.09..0.09) * w as f64;
            let ry = rng.random_range(3.0..5.5) * scale_y;
            let rx = rng.random_range(9.5..11.5) * scale_x;
            // Discs adjacent along y live in disjoint z bands, so slices
            // only ever show non-neighbouring (non-overlapping) discs.
            let (band_lo, band_hi) = if j % 2 == 0 {
                (z_lo, z_mid)
            } else {
                (z_mid + 1, z_hi)
            };
            let band_len = band_hi - band_lo + 1;
            let z_len = rng.random_range(2..=4usize).min(band_len);
            let z0 = band_lo + rng.random_range(0..=(band_len - z_len));
            let gain = rng.random_range(-0.04..0.04);
            let dark = rng.random_bool(0.35);
            Disc {
                cy,
                cx,
                ry,
                rx,
                z0,
                z1: z0 + z_len - 1,
                gain,
                dark,
            }
        })
        .collect()
}

fn paint_mask(discs: &[Disc], d: usize, h: usize, w: usize) -> Array3<u8> {
    let mut mask = Array3::<u8>::zeros((d, h, w));
    for disc in discs {
        for z in disc.z0..=disc.z1 {
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 - disc.cy) / disc.ry;
                    let dx = (x as f64 - disc.cx) / disc.rx;
                    if dy * dy + dx * dx <= 1.0 {
                        mask[[z, y, x]] = 1;
                    }
                }
            }
        }
    }
    mask
}

fn slice_ratios_ok(mask: &Array3<u8>) -> bool {
    let (d, h, w) = mask.dim();
    let n = (h * w) as f64;
    for z in 0..d {
        let fg = mask
            .index_axis(ndarray::Axis(0), z)
            .iter()
            .filter(|&&v| v != 0)
            .count() as f64;
        if fg > 0.0 {
            let ratio = fg / n;
            if !(FG_RATIO_MIN..=FG_RATIO_MAX).contains(&ratio) {
                return false;
            }
        }
    }
    true
}

/// Generate `n_volumes` reproducible phantom volumes.
///
/// Spatial dims must be at least 16x16 and even; depth at least 4. Volumes
/// whose slice foreground fractions fall outside the configured band are
/// re-drawn with fresh jitter.
pub fn generate_phantoms(
    seed: u64,
    n_volumes: usize,
    d: usize,
    h: usize,
    w: usize,
) -> Result<Vec<PhantomVolume>> {
    if h < 16 || w < 16 || d < 4 {
        return Err(SrdaError::InvalidArgument(format!(
            "degenerate dims ({d},{h},{w}): need height/width >= 16 and depth >= 4"
        )));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(SrdaError::InvalidArgument(
            "height and width must be even".into(),
        ));
    }
    if n_volumes == 0 {
        return Err(SrdaError::InvalidArgument("need at least one volume".into()));
    }

    let mut volumes = Vec::with_capacity(n_volumes);
    for v in 0..n_volumes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(v as u64 + 1);

        let (discs, mask) = loop {
            let discs = draw_discs(&mut rng, d, h, w);
            let mask = paint_mask(&discs, d, h, w);
            if slice_ratios_ok(&mask) {
                break (discs, mask);
            }
        };

        let bg_level = rng.random_range(0.40..0.50);
        let bright_level = rng.random_range(0.80..0.90);
        let dark_level = rng.random_range(0.12..0.22);
        let sigma_a: f64 = rng.random_range(0.01..0.03);

        // Clean rendering shared by both modalities.
        let mut clean = Array3::<f64>::zeros((d, h, w));
        for z in 0..d {
            let field = smooth_field(rng.random(), h, w, 4);
            for y in 0..h {
                for x in 0..w {
                    clean[[z, y, x]] = (bg_level + 0.06 * field[[y, x]]).clamp(0.0, 1.0);
                }
            }
        }
        for disc in &discs {
            let core = if disc.dark { dark_level } else { bright_level };
            for z in disc.z0..=disc.z1 {
                for y in 0..h {
                    for x in 0..w {
                        let dy = (y as f64 - disc.cy) / disc.ry;
                        let dx = (x as f64 - disc.cx) / disc.rx;
                        if dy * dy + dx * dx <= 1.0 {
                            clean[[z, y, x]] = (core + disc.gain).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }

        let noise_seed_a: u64 = rng.random();
        let gamma = rng.random_range(0.7..1.4);
        let bias_amplitude = rng.random_range(0.04..0.10);
        let sigma_b = rng.random_range(0.01..0.05);
        let bias_seed_b: u64 = rng.random();
        let noise_seed_b: u64 = rng.random();

        let mut image_mod_a = Array3::<f64>::zeros((d, h, w));
        let mut image_mod_b = Array3::<f64>::zeros((d, h, w));
        for z in 0..d {
            let slice = clean.index_axis(ndarray::Axis(0), z).to_owned();
            let a = modality_transform(
                &slice,
                &ModalityParams {
                    invert: false,
                    gamma: 1.0,
                    bias_amplitude: 0.0,
                    bias_seed: 0,
                    noise_sigma: sigma_a,
                    noise_seed: noise_seed_a.wrapping_add(z as u64),
                },
            );
            let b = modality_transform(
                &slice,
                &ModalityParams {
                    invert: true,
                    gamma,
                    bias_amplitude,
                    bias_seed: bias_seed_b.wrapping_add(z as u64),
                    noise_sigma: sigma_b,
                    noise_seed: noise_seed_b.wrapping_add(z as u64),
                },
            );
            image_mod_a.index_axis_mut(ndarray::Axis(0), z).assign(&a);
            image_mod_b.index_axis_mut(ndarray::Axis(0), z).assign(&b);
        }

        volumes.push(PhantomVolume {
            id: v,
            mask,
            image_mod_a,
            image_mod_b,
        });
    }
    Ok(volumes)
}

impl PhantomVolume {
    pub fn depth(&self) -> usize {
        self.mask.dim().0
    }

    /// Extract 2D samples along the leading (axial) dimension.
    pub fn slices(&self, modality: Modality) -> Vec<SliceSample> {
        let image = match modality {
            Modality::A => &self.image_mod_a,
            Modality::B => &self.image_mod_b,
        };
        (0..self.depth())
            .map(|z| {
                let mask = self.mask.index_axis(ndarray::Axis(0), z).to_owned();
                let has_foreground = mask.iter().any(|&v| v != 0);
                SliceSample {
                    image: image.index_axis(ndarray::Axis(0), z).to_owned(),
                    mask,
                    tag: ImageTag { has_foreground },
                    volume_id: self.id,
                    slice_index: z,
                }
            })
            .collect()
    }
}

/// Volume-level split: the first `train` volumes train, the next `val`
/// validate; slices never cross the boundary.
pub fn split<T>(items: &[T], train: usize, val: usize) -> Result<(&[T], &[T])> {
    if train + val > items.len() {
        return Err(SrdaError::InvalidArgument(format!(
            "split {}+{} exceeds {} available volumes",
            train,
            val,
            items.len()
        )));
    }
    Ok((&items[..train], &items[train..train + val]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub id: usize,
    pub dir: String,
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub volumes: Vec<VolumeEntry>,
}

/// Persist volumes as one sub-directory each plus a root manifest.
pub fn save_phantom_dataset(root: &Path, volumes: &[PhantomVolume], seed: u64) -> Result<()> {
    if volumes.is_empty() {
        return Err(SrdaError::InvalidArgument("no volumes to save".into()));
    }
    std::fs::create_dir_all(root)?;
    let (d, h, w) = volumes[0].mask.dim();
    let mut entries = Vec::with_capacity(volumes.len());
    for vol in volumes {
        let dir_name = format!("vol_{:03}", vol.id);
        let dir = root.join(&dir_name);
        std::fs::create_dir_all(&dir)?;
        npy::write_f32_3d(&dir.join(IMAGE_FILE_MOD_A), &vol.image_mod_a)?;
        npy::write_f32_3d(&dir.join(IMAGE_FILE_MOD_B), &vol.image_mod_b)?;
        npy::write_u8_3d(&dir.join(MASK_FILE), &vol.mask)?;
        let (vd, vh, vw) = vol.mask.dim();
        entries.push(VolumeEntry {
            id: vol.id,
            dir: dir_name,
            shape: [vd, vh, vw],
        });
    }
    let manifest = DatasetManifest {
        format_version: 1,
        seed,
        depth: d,
        height: h,
        width: w,
        volumes: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(root.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let bytes = fsprobe::read_bytes(&root.join(MANIFEST_FILE))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// File names to look for inside each volume directory.
#[derive(Debug, Clone)]
pub struct SliceLayout {
    pub image_file: String,
    pub mask_file: String,
}

impl SliceLayout {
    pub fn for_modality(modality: Modality) -> Self {
        SliceLayout {
            image_file: modality.image_file().to_string(),
            mask_file: MASK_FILE.to_string(),
        }
    }
}

/// A volume read back from disk, intensity-normalized.
#[derive(Debug, Clone)]
pub struct LoadedVolume {
    /// Ordinal in directory-sorted order.
    pub id: usize,
    pub name: String,
    pub image: Array3<f64>,
    pub mask: Array3<u8>,
}

impl LoadedVolume {
    pub fn slices(&self) -> Vec<SliceSample> {
        (0..self.image.dim().0)
            .map(|z| {
                let mask = self.mask.index_axis(ndarray::Axis(0), z).to_owned();
                let has_foreground = mask.iter().any(|&v| v != 0);
                SliceSample {
                    image: self.image.index_axis(ndarray::Axis(0), z).to_owned(),
                    mask,
                    tag: ImageTag { has_foreground },
                    volume_id: self.id,
                    slice_index: z,
                }
            })
            .collect()
    }
}

/// Load every volume directory under `root` (sorted by name), min-max
/// normalizing each volume's intensities to [0, 1].
pub fn load_volumes(root: &Path, layout: &SliceLayout) -> Result<Vec<LoadedVolume>> {
    let entries = fsprobe::read_dir_sorted(root)?;
    let mut volumes = Vec::new();
    for path in entries {
        if !path.is_dir() {
            continue;
        }
        let image_path = path.join(&layout.image_file);
        let mask_path = path.join(&layout.mask_file);
        if !image_path.is_file() {
            continue; // not a volume directory
        }
        if !mask_path.is_file() {
            return Err(SrdaError::MissingInput(format!(
                "no mask file '{}' next to {}",
                layout.mask_file,
                image_path.display()
            )));
        }
        let mut image = npy::read_f32_3d(&image_path)?;
        let mask = npy::read_u8_3d(&mask_path)?;
        if image.dim() != mask.dim() {
            return Err(SrdaError::shape_mismatch(
                format!("{:?}", image.dim()),
                format!("{:?} (mask of {})", mask.dim(), image_path.display()),
            ));
        }
        // Per-volume min-max normalization.
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in image.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            image.mapv_inplace(|v| (v - lo) / (hi - lo));
        } else {
            image.fill(0.0);
        }
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        volumes.push(LoadedVolume {
            id: volumes.len(),
            name,
            image,
            mask,
        });
    }
    if volumes.is_empty() {
        log::warn!("no volumes found under {}", root.display());
    }
    Ok(volumes)
}

/// All 2D slices of a dataset directory, axial order within sorted volumes.
pub fn load_real_slices(root: &Path, layout: &SliceLayout) -> Result<Vec<SliceSample>> {
    Ok(load_volumes(root, layout)?
        .iter()
        .flat_map(|v| v.slices())
        .collect())
}
