//! Multi-crop view sampling: two global and eight local crops per volume,
//! each independently augmented, plus the per-global-view token masks used
//! by the masked-patch objective.
//!
//! Augmentations apply in a fixed order: crop, resize to the view target,
//! axis flips, axial slice permutation, intensity-window perturbation, and a
//! final clamp back to the volume's normalised intensity window. Everything
//! is a pure function of (volume, config, seed).

use ndarray::{Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{resize_trilinear, CanonicalVolume, HU_CLIP_MAX, HU_CLIP_MIN};

pub const N_GLOBAL: usize = 2;
pub const N_LOCAL: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Crop volume fraction range for global views.
    pub global_scale: [f64; 2],
    /// Crop volume fraction range for local views.
    pub local_scale: [f64; 2],
    /// Cubic edge length of resized global views, voxels.
    pub global_target: usize,
    /// Cubic edge length of resized local views, voxels.
    pub local_target: usize,
    /// Per-axis aspect stretch range.
    pub aspect: [f64; 2],
    /// Per-axis flip probability.
    pub flip_prob: f64,
    /// Intensity slope range of the window perturbation.
    pub hu_slope: [f64; 2],
    /// Maximum intensity shift as a fraction of the crop IQR.
    pub hu_shift_iqr: f64,
    /// Probability of permuting axial slice order.
    pub slice_perm_prob: f64,
    /// Fraction of global-view patch tokens masked for the student.
    pub mask_ratio: f64,
    /// Patch edge length, used to size the global-view token masks.
    pub patch_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            global_scale: [0.30, 1.00],
            local_scale: [0.05, 0.30],
            global_target: 112,
            local_target: 56,
            aspect: [0.75, 1.33],
            flip_prob: 0.5,
            hu_slope: [0.9, 1.1],
            hu_shift_iqr: 0.5,
            slice_perm_prob: 0.2,
            mask_ratio: 0.5,
            patch_size: 14,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0) {
                return Err(Error::config(format!("{name} range {r:?} invalid")));
            }
        }
        if !(self.aspect[0] > 0.0 && self.aspect[0] <= self.aspect[1]) {
            return Err(Error::config(format!("aspect range {:?} invalid", self.aspect)));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("mask_ratio {} outside [0,1]", self.mask_ratio)));
        }
        for (name, t) in [("global_target", self.global_target), ("local_target", self.local_target)] {
            if t == 0 || t % self.patch_size != 0 {
                return Err(Error::config(format!(
                    "{name} = {t} must be a positive multiple of patch_size {}",
                    self.patch_size
                )));
            }
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("slice_perm_prob", self.slice_perm_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0,1]")));
            }
        }
        if !(self.hu_slope[0] > 0.0 && self.hu_slope[0] <= self.hu_slope[1]) {
            return Err(Error::config(format!("hu_slope range {:?} invalid", self.hu_slope)));
        }
        if self.hu_shift_iqr < 0.0 {
            return Err(Error::config("hu_shift_iqr must be non-negative"));
        }
        Ok(())
    }

    pub fn tokens_per_global(&self) -> usize {
        let g = self.global_target / self.patch_size;
        g * g * g
    }
}

/// Geometry of one sampled crop.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSpec {
    /// Realised volume fraction of the source.
    pub scale: f64,
    /// Per-axis stretch factors actually applied.
    pub aspect: [f64; 3],
    pub offset: [usize; 3],
    /// Crop box side lengths in source voxels.
    pub size: [usize; 3],
    pub target_shape: [usize; 3],
    pub is_global: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPattern {
    pub masked: Vec<bool>,
    pub ratio: f64,
}

impl MaskPattern {
    pub fn n_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub global_views: Vec<Array3<f64>>,
    pub local_views: Vec<Array3<f64>>,
    pub specs: Vec<CropSpec>,
    /// One mask per global view.
    pub masks: Vec<MaskPattern>,
    pub rng_seed: u64,
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Sample one crop geometry. The box volume realises the drawn scale
/// fraction as closely as integer sides allow and is nudged back into the
/// scale band when rounding pushes it out.
pub fn sample_crop_spec(
    source: [usize; 3],
    scale_range: [f64; 2],
    aspect_range: [f64; 2],
    target: usize,
    is_global: bool,
    rng: &mut ChaCha8Rng,
) -> CropSpec {
    let n: f64 = source.iter().map(|&v| v as f64).product();
    let scale = uniform_in(rng, scale_range[0], scale_range[1]);
    let side_frac = scale.cbrt();

    // rejection-sample an aspect triple that fits inside the source
    let mut chosen: Option<([f64; 3], [usize; 2])> = None;
    for _ in 0..20 {
        let a = [
            uniform_in(rng, aspect_range[0], aspect_range[1]),
            uniform_in(rng, aspect_range[0], aspect_range[1]),
            uniform_in(rng, aspect_range[0], aspect_range[1]),
        ];
        let gm = (a[0] * a[1] * a[2]).cbrt();
        let stretch = [a[0] / gm, a[1] / gm, a[2] / gm];
        let d0 = (source[0] as f64 * side_frac * stretch[0]).round().max(1.0) as usize;
        let d1 = (source[1] as f64 * side_frac * stretch[1]).round().max(1.0) as usize;
        if d0 <= source[0] && d1 <= source[1] {
            let d2_real = scale * n / (d0 * d1) as f64;
            if d2_real.round().max(1.0) as usize <= source[2] {
                chosen = Some((stretch, [d0, d1]));
                break;
            }
        }
    }
    let (stretch, [d0, d1]) = chosen.unwrap_or_else(|| {
        // fallback: no stretch always fits (side_frac <= 1)
        let d0 = (source[0] as f64 * side_frac).round().max(1.0) as usize;
        let d1 = (source[1] as f64 * side_frac).round().max(1.0) as usize;
        ([1.0; 3], [d0.min(source[0]), d1.min(source[1])])
    });
    // the last side compensates the rounding of the first two
    let mut d2 = ((scale * n / (d0 * d1) as f64).round().max(1.0) as usize).min(source[2]);
    let mut size = [d0, d1, d2];
    // nudge the box back into the scale band if rounding overshot
    for _ in 0..64 {
        let frac: f64 = size.iter().map(|&v| v as f64).product::<f64>() / n;
        if frac < scale_range[0] {
            let Some(axis) = (0..3).filter(|&a| size[a] < source[a]).min_by_key(|&a| size[a]) else {
                break;
            };
            size[axis] += 1;
        } else if frac > scale_range[1] {
            let Some(axis) = (0..3).filter(|&a| size[a] > 1).max_by_key(|&a| size[a]) else {
                break;
            };
            size[axis] -= 1;
        } else {
            break;
        }
    }
    d2 = size[2];
    let _ = d2;
    let offset = [
        rng.random_range(0..=source[0] - size[0]),
        rng.random_range(0..=source[1] - size[1]),
        rng.random_range(0..=source[2] - size[2]),
    ];
    let realised: f64 = size.iter().map(|&v| v as f64).product::<f64>() / n;
    CropSpec {
        scale: realised,
        aspect: stretch,
        offset,
        size,
        target_shape: [target; 3],
        is_global,
    }
}

/// Quartiles of a view's intensity distribution (linear interpolation
/// between order statistics).
#[derive(Clone, Copy, Debug)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &Array3<f64>) -> Quartiles {
        let mut v: Vec<f64> = values.iter().cloned().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let at = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let i = pos.floor() as usize;
            let t = pos - i as f64;
            if i + 1 < v.len() {
                v[i] * (1.0 - t) + v[i + 1] * t
            } else {
                v[i]
            }
        };
        Quartiles {
            q1: at(0.25),
            median: at(0.5),
            q3: at(0.75),
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Random affine intensity remap anchored at the median: `out = median +
/// slope * (x - median) + shift * IQR`. Strictly monotone, hence
/// invertible; a zero IQR (constant crop) gives the identity.
pub fn perturb_hu_window(
    view: &Array3<f64>,
    quartiles: &Quartiles,
    slope_range: [f64; 2],
    shift_iqr: f64,
    seed: u64,
) -> Array3<f64> {
    let iqr = quartiles.iqr();
    if iqr <= 0.0 {
        return view.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope = uniform_in(&mut rng, slope_range[0], slope_range[1]);
    let shift = uniform_in(&mut rng, -shift_iqr, shift_iqr) * iqr;
    if slope == 1.0 && shift == 0.0 {
        return view.clone();
    }
    let m = quartiles.median;
    view.mapv(|x| m + slope * (x - m) + shift)
}

/// Permute slices along `axis` by an explicit permutation.
pub fn permute_slices_with(view: &Array3<f64>, axis: usize, perm: &[usize]) -> Array3<f64> {
    assert_eq!(perm.len(), view.shape()[axis]);
    let mut out = view.clone();
    for (dst, &src) in perm.iter().enumerate() {
        out.index_axis_mut(Axis(axis), dst)
            .assign(&view.index_axis(Axis(axis), src));
    }
    out
}

/// Permute slices along `axis` by a seed-drawn random permutation.
pub fn permute_slices(view: &Array3<f64>, axis: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..view.shape()[axis]).collect();
    perm.shuffle(&mut rng);
    permute_slices_with(view, axis, &perm)
}

/// Mask exactly `round(ratio * n_tokens)` positions, uniformly without
/// replacement.
pub fn sample_mask(n_tokens: usize, ratio: f64, seed: u64) -> MaskPattern {
    let k = (ratio * n_tokens as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n_tokens).collect();
    // partial Fisher-Yates: the first k entries are the masked positions
    for i in 0..k.min(n_tokens.saturating_sub(1)) {
        let j = rng.random_range(i..n_tokens);
        idx.swap(i, j);
    }
    let mut masked = vec![false; n_tokens];
    for &i in &idx[..k] {
        masked[i] = true;
    }
    MaskPattern { masked, ratio }
}

fn augment_one(
    vol: &CanonicalVolume,
    spec: &CropSpec,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let crop = vol
        .voxels
        .slice(ndarray::s![
            spec.offset[0]..spec.offset[0] + spec.size[0],
            spec.offset[1]..spec.offset[1] + spec.size[1],
            spec.offset[2]..spec.offset[2] + spec.size[2]
        ])
        .to_owned();
    let mut view = resize_trilinear(&crop, spec.target_shape);
    let quartiles = Quartiles::of(&view);
    for axis in 0..3 {
        if rng.random_bool(cfg.flip_prob) {
            view.invert_axis(Axis(axis));
        }
    }
    view = view.as_standard_layout().to_owned();
    if cfg.slice_perm_prob > 0.0 && rng.random_bool(cfg.slice_perm_prob) {
        let perm_seed = rng.random::<u64>();
        view = permute_slices(&view, 0, perm_seed);
    }
    let perturb_seed = rng.random::<u64>();
    view = perturb_hu_window(&view, &quartiles, cfg.hu_slope, cfg.hu_shift_iqr, perturb_seed);
    // clamp back into the volume's normalised intensity window
    let lo = (HU_CLIP_MIN - vol.norm_stats.mu_hu) / vol.norm_stats.sigma_hu;
    let hi = (HU_CLIP_MAX - vol.norm_stats.mu_hu) / vol.norm_stats.sigma_hu;
    view.mapv_inplace(|v| v.clamp(lo, hi));
    view
}

/// Produce the full augmented view set for one volume: 2 global + 8 local
/// views with per-global-view masks. Deterministic in (volume, cfg, seed).
pub fn sample_views(vol: &CanonicalVolume, cfg: &AugmentConfig, seed: u64) -> Result<ViewBatch> {
    cfg.validate()?;
    let dims = vol.voxels.dim();
    let source = [dims.0, dims.1, dims.2];
    let min_frac = cfg.local_scale[0].cbrt();
    for (axis, &n) in source.iter().enumerate() {
        if (n as f64 * min_frac).round() < 2.0 {
            return Err(Error::data(format!(
                "volume '{}' axis {axis} has {n} voxels, too small for the minimum local crop",
                vol.source_id
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(N_GLOBAL + N_LOCAL);
    let mut global_views = Vec::with_capacity(N_GLOBAL);
    let mut local_views = Vec::with_capacity(N_LOCAL);
    for _ in 0..N_GLOBAL {
        let spec = sample_crop_spec(source, cfg.global_scale, cfg.aspect, cfg.global_target, true, &mut rng);
        global_views.push(augment_one(vol, &spec, cfg, &mut rng));
        specs.push(spec);
    }
    for _ in 0..N_LOCAL {
        let spec = sample_crop_spec(source, cfg.local_scale, cfg.aspect, cfg.local_target, false, &mut rng);
        local_views.push(augment_one(vol, &spec, cfg, &mut rng));
        specs.push(spec);
    }
    let n_tokens = cfg.tokens_per_global();
    let masks = (0..N_GLOBAL)
        .map(|_| sample_mask(n_tokens, cfg.mask_ratio, rng.random::<u64>()))
        .collect();
    Ok(ViewBatch {
        global_views,
        local_views,
        specs,
        masks,
        rng_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::NormSummary;
    use ndarray::Array3;

    fn test_volume(side: usize, seed: u64) -> CanonicalVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CanonicalVolume {
            voxels: Array3::from_shape_fn((side, side, side), |_| rng.random_range(-1.0..1.5)),
            iso_spacing: 1.0,
            origin: [0.0; 3],
            crop_offset: [0, 0, 0],
            norm_stats: NormSummary {
                mu_hu: 0.0,
                sigma_hu: 1000.0,
            },
            source_id: format!("t{seed}"),
        }
    }

    fn identity_cfg() -> AugmentConfig {
        AugmentConfig {
            global_scale: [1.0, 1.0],
            local_scale: [0.2, 0.2],
            global_target: 28,
            local_target: 14,
            aspect: [1.0, 1.0],
            flip_prob: 0.0,
            hu_slope: [1.0, 1.0],
            hu_shift_iqr: 0.0,
            slice_perm_prob: 0.0,
            mask_ratio: 0.5,
            patch_size: 14,
        }
    }

    #[test]
    fn identity_config_reproduces_resized_source() {
        let vol = test_volume(32, 1);
        let cfg = identity_cfg();
        let batch = sample_views(&vol, &cfg, 7).unwrap();
        let expect = resize_trilinear(&vol.voxels, [28, 28, 28]);
        for view in &batch.global_views {
            assert!(view
                .iter()
                .zip(expect.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(batch.global_views.len(), N_GLOBAL);
        assert_eq!(batch.local_views.len(), N_LOCAL);
        assert_eq!(batch.masks.len(), N_GLOBAL);
    }

    #[test]
    fn fixed_seed_is_bitwise_deterministic() {
        let vol = test_volume(24, 2);
        let cfg = AugmentConfig {
            global_target: 14,
            local_target: 14,
            patch_size: 14,
            ..AugmentConfig::default()
        };
        let a = sample_views(&vol, &cfg, 99).unwrap();
        let b = sample_views(&vol, &cfg, 99).unwrap();
        for (va, vb) in a.global_views.iter().chain(&a.local_views)
            .zip(b.global_views.iter().chain(&b.local_views))
        {
            assert!(va.iter().zip(vb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(a.specs, b.specs);
        assert_eq!(a.masks, b.masks);
        let c = sample_views(&vol, &cfg, 100).unwrap();
        assert_ne!(a.specs, c.specs);
    }

    #[test]
    fn global_scale_is_uniform_over_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (lo, hi) = (0.30, 1.00);
        let n_draws = 10_000;
        let mut fracs: Vec<f64> = (0..n_draws)
            .map(|_| {
                sample_crop_spec([64, 64, 64], [lo, hi], [0.75, 1.33], 56, true, &mut rng).scale
            })
            .collect();
        fracs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(fracs.iter().all(|&f| (lo..=hi).contains(&f)), "scale left the band");
        // Kolmogorov-Smirnov distance against U(lo, hi)
        let mut ks = 0.0f64;
        for (i, &f) in fracs.iter().enumerate() {
            let cdf = (f - lo) / (hi - lo);
            let emp_hi = (i + 1) as f64 / n_draws as f64;
            let emp_lo = i as f64 / n_draws as f64;
            ks = ks.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
        }
        assert!(ks < 0.02, "KS vs uniform = {ks}");
    }

    #[test]
    fn perturb_identity_cases() {
        let ramp = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| (z * 16 + y * 4 + x) as f64);
        let q = Quartiles::of(&ramp);
        let out = perturb_hu_window(&ramp, &q, [1.0, 1.0], 0.0, 3);
        assert_eq!(out, ramp);
        let flat = Array3::from_elem((4, 4, 4), 2.5);
        let qf = Quartiles::of(&flat);
        assert_eq!(qf.iqr(), 0.0);
        let out = perturb_hu_window(&flat, &qf, [0.9, 1.1], 0.5, 3);
        assert_eq!(out, flat);
    }

    #[test]
    fn perturb_shift_at_half_iqr() {
        // values 0..=63 scaled so IQR is exactly 2.0
        let scale = 2.0 / (47.25 - 15.75);
        let ramp = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| (z * 16 + y * 4 + x) as f64 * scale);
        let q = Quartiles::of(&ramp);
        assert!((q.iqr() - 2.0).abs() < 1e-12);
        // slope pinned to 1, shift pinned to +0.5 IQR
        let out = perturb_hu_window(&ramp, &q, [1.0, 1.0], 0.5, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _slope = 1.0;
        let shift = rng.random_range(-0.5..0.5);
        let expected_shift = shift * 2.0;
        for (o, r) in out.iter().zip(ramp.iter()) {
            assert!((o - r - expected_shift).abs() < 1e-12);
        }
        assert!(expected_shift.abs() <= 1.0 + 1e-12);
        // forcing the maximal positive shift moves everything by +1.0
        let q2 = Quartiles { q1: 0.0, median: 1.0, q3: 2.0 };
        let shifted = ramp.mapv(|x| 1.0 + (x - 1.0) + 0.5 * q2.iqr());
        for (s, r) in shifted.iter().zip(ramp.iter()) {
            assert!((s - r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_permutation_preserves_multiset() {
        let view = Array3::from_shape_fn((4, 3, 3), |(z, y, x)| (z * 100 + y * 10 + x) as f64);
        let rev = permute_slices_with(&view, 0, &[3, 2, 1, 0]);
        for z in 0..4 {
            assert_eq!(rev.index_axis(Axis(0), z), view.index_axis(Axis(0), 3 - z));
        }
        let id = permute_slices_with(&view, 0, &[0, 1, 2, 3]);
        assert_eq!(id, view);
        for seed in 0..5 {
            let out = permute_slices(&view, 0, seed);
            let mut a: Vec<u64> = view.iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u64> = out.iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn flips_preserve_histogram() {
        let vol = test_volume(24, 8);
        let cfg = AugmentConfig {
            global_scale: [1.0, 1.0],
            aspect: [1.0, 1.0],
            flip_prob: 1.0,
            hu_slope: [1.0, 1.0],
            hu_shift_iqr: 0.0,
            slice_perm_prob: 1.0,
            global_target: 28,
            local_target: 14,
            patch_size: 14,
            ..AugmentConfig::default()
        };
        let batch = sample_views(&vol, &cfg, 3).unwrap();
        let base = resize_trilinear(&vol.voxels, [28, 28, 28]);
        let mut want: Vec<u64> = base.iter().map(|v| v.to_bits()).collect();
        want.sort_unstable();
        for view in &batch.global_views {
            let mut got: Vec<u64> = view.iter().map(|v| v.to_bits()).collect();
            got.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn mask_counts_exact_and_uniform() {
        let m = sample_mask(512, 0.5, 4);
        assert_eq!(m.n_masked(), 256);
        assert_eq!(m.masked.len(), 512);
        let m0 = sample_mask(512, 0.0, 4);
        assert_eq!(m0.n_masked(), 0);
        let m1 = sample_mask(7, 0.5, 4);
        assert_eq!(m1.n_masked(), 4); // round(3.5)
        assert_eq!(sample_mask(16, 0.5, 9), sample_mask(16, 0.5, 9));

        let mut counts = [0usize; 8];
        let n_draws = 10_000;
        for seed in 0..n_draws {
            let m = sample_mask(8, 0.5, seed as u64);
            assert_eq!(m.n_masked(), 4);
            for (c, &b) in counts.iter_mut().zip(&m.masked) {
                *c += b as usize;
            }
        }
        for &c in &counts {
            let freq = c as f64 / n_draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn too_small_volume_rejected() {
        let vol = test_volume(4, 1);
        let cfg = AugmentConfig {
            global_target: 14,
            local_target: 14,
            patch_size: 14,
            ..AugmentConfig::default()
        };
        assert!(sample_views(&vol, &cfg, 0).is_err());
    }

    #[test]
    fn crop_boxes_stay_inside_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..2000 {
            let spec = sample_crop_spec([40, 27, 33], [0.05, 0.30], [0.75, 1.33], 28, false, &mut rng);
            for a in 0..3 {
                assert!(spec.size[a] >= 1);
                assert!(spec.offset[a] + spec.size[a] <= [40, 27, 33][a]);
            }
            assert!((0.05..=0.30).contains(&spec.scale), "scale {}", spec.scale);
        }
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let mut cfg = AugmentConfig::default();
        cfg.global_scale = [0.0, 1.0];
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.global_target = 100; // not a multiple of 14
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.mask_ratio = 1.5;
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
