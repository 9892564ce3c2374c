//! Synthetic phantom volumes with exact analytic ground truth.
//!
//! Every label (class flag, object volume, centroid, mask, survival time
//! ordering) is derivable from the generating parameters, so downstream
//! probes and metrics can be checked against known answers. The survival
//! risk model is invented: hazard proportional to exp(0.1 * radius), so
//! larger objects fail earlier in expectation.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use std::io::Write as IoWrite;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::RawVolume;

pub const HAZARD_BETA_PER_VOXEL: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomFamily {
    Sphere,
    Rod,
    Shell,
    TwoComponent,
}

/// Geometry in voxel coordinates; membership is evaluated at integer
/// lattice points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PhantomShape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Cylinder along one axis.
    Rod {
        center: [f64; 3],
        radius: f64,
        half_length: f64,
        axis: usize,
    },
    /// Hollow sphere, material where inner < d <= outer.
    Shell {
        center: [f64; 3],
        outer: f64,
        inner: f64,
    },
    TwoComponent {
        centers: [[f64; 3]; 2],
        radii: [f64; 2],
    },
}

impl PhantomShape {
    pub fn family(&self) -> PhantomFamily {
        match self {
            PhantomShape::Sphere { .. } => PhantomFamily::Sphere,
            PhantomShape::Rod { .. } => PhantomFamily::Rod,
            PhantomShape::Shell { .. } => PhantomFamily::Shell,
            PhantomShape::TwoComponent { .. } => PhantomFamily::TwoComponent,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
            (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
        }
        match *self {
            PhantomShape::Sphere { center, radius } => d2(p, center) <= radius * radius,
            PhantomShape::Rod {
                center,
                radius,
                half_length,
                axis,
            } => {
                if (p[axis] - center[axis]).abs() > half_length {
                    return false;
                }
                let mut r2 = 0.0;
                for a in 0..3 {
                    if a != axis {
                        r2 += (p[a] - center[a]).powi(2);
                    }
                }
                r2 <= radius * radius
            }
            PhantomShape::Shell {
                center,
                outer,
                inner,
            } => {
                let d = d2(p, center);
                d <= outer * outer && d > inner * inner
            }
            PhantomShape::TwoComponent { centers, radii } => {
                d2(p, centers[0]) <= radii[0] * radii[0]
                    || d2(p, centers[1]) <= radii[1] * radii[1]
            }
        }
    }

    /// Continuous object volume in voxel units.
    pub fn analytic_volume(&self) -> f64 {
        const FT: f64 = 4.0 / 3.0 * std::f64::consts::PI;
        match *self {
            PhantomShape::Sphere { radius, .. } => FT * radius.powi(3),
            PhantomShape::Rod {
                radius,
                half_length,
                ..
            } => std::f64::consts::PI * radius * radius * 2.0 * half_length,
            PhantomShape::Shell { outer, inner, .. } => FT * (outer.powi(3) - inner.powi(3)),
            PhantomShape::TwoComponent { radii, .. } => {
                FT * (radii[0].powi(3) + radii[1].powi(3))
            }
        }
    }

    /// Radius of the volume-equivalent sphere; the survival hazard input.
    pub fn equivalent_radius(&self) -> f64 {
        (self.analytic_volume() * 3.0 / (4.0 * std::f64::consts::PI)).cbrt()
    }

    /// Volume-weighted object centroid in voxel coordinates.
    pub fn centroid(&self) -> [f64; 3] {
        match *self {
            PhantomShape::Sphere { center, .. }
            | PhantomShape::Rod { center, .. }
            | PhantomShape::Shell { center, .. } => center,
            PhantomShape::TwoComponent { centers, radii } => {
                let v0 = radii[0].powi(3);
                let v1 = radii[1].powi(3);
                let mut c = [0.0; 3];
                for a in 0..3 {
                    c[a] = (centers[0][a] * v0 + centers[1][a] * v1) / (v0 + v1);
                }
                c
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomCorpusSpec {
    pub side: usize,
    pub families: Vec<PhantomFamily>,
    /// Object volume range in voxels; families are volume-matched so class
    /// cannot be read off object size.
    pub volume_range: (f64, f64),
    pub background_hu: f64,
    pub object_hu: f64,
    pub noise_sd: f64,
    /// Emit a second scan per subject with identical geometry and fresh
    /// noise (retrieval ground truth).
    pub twins: bool,
    pub seed: u64,
}

impl Default for PhantomCorpusSpec {
    fn default() -> Self {
        PhantomCorpusSpec {
            side: 64,
            families: vec![PhantomFamily::Sphere, PhantomFamily::Rod],
            volume_range: (2000.0, 8000.0),
            background_hu: -1000.0,
            object_hu: 0.0,
            noise_sd: 20.0,
            twins: false,
            seed: 0,
        }
    }
}

impl PhantomCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 16 {
            return Err(Error::config(format!(
                "phantom side must be >= 16, got {}",
                self.side
            )));
        }
        if self.families.is_empty() {
            return Err(Error::config("no phantom families".to_string()));
        }
        let (lo, hi) = self.volume_range;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::config(format!(
                "bad volume range ({lo}, {hi})"
            )));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::config("noise sd must be >= 0".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub family: PhantomFamily,
    pub shape: PhantomShape,
    pub analytic_volume: f64,
    pub equivalent_radius: f64,
    /// Centroid normalised by the cube side, axis order (z, y, x).
    pub centroid: [f64; 3],
    /// 1 iff sphere family.
    pub class_label: u8,
    pub time_days: f64,
    pub event: bool,
    /// Base sample this one is a noise-twin of.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub twin_of: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: PhantomCorpusSpec,
    pub samples: Vec<SampleEntry>,
}

impl CorpusManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("corpus manifest encode: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&json).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

fn draw_center(
    rng: &mut ChaCha8Rng,
    side: usize,
    extent: [f64; 3],
) -> Result<[f64; 3]> {
    let mut c = [0.0; 3];
    for a in 0..3 {
        let lo = extent[a] + 2.0;
        let hi = side as f64 - 2.0 - extent[a];
        if lo >= hi {
            return Err(Error::config(format!(
                "object extent {} does not fit a side-{side} cube",
                extent[a]
            )));
        }
        c[a] = rng.random_range(lo..hi);
    }
    Ok(c)
}

/// Draw one volume-matched shape of the given family.
pub fn draw_shape(
    family: PhantomFamily,
    spec: &PhantomCorpusSpec,
    rng: &mut ChaCha8Rng,
) -> Result<PhantomShape> {
    let v = rng.random_range(spec.volume_range.0..spec.volume_range.1);
    let side = spec.side;
    match family {
        PhantomFamily::Sphere => {
            let r = (v * 3.0 / (4.0 * std::f64::consts::PI)).cbrt();
            let center = draw_center(rng, side, [r; 3])?;
            Ok(PhantomShape::Sphere { center, radius: r })
        }
        PhantomFamily::Rod => {
            // aspect 4: length = 4 * radius, so v = 4 * pi * r^3
            let r = (v / (4.0 * std::f64::consts::PI)).cbrt();
            let half_length = 2.0 * r;
            let axis = rng.random_range(0..3usize);
            let mut extent = [r; 3];
            extent[axis] = half_length;
            let center = draw_center(rng, side, extent)?;
            Ok(PhantomShape::Rod {
                center,
                radius: r,
                half_length,
                axis,
            })
        }
        PhantomFamily::Shell => {
            // inner = 3/4 outer: v = 4/3 pi outer^3 (1 - (3/4)^3)
            let shell_frac = 1.0 - 0.75f64.powi(3);
            let outer = (v * 3.0 / (4.0 * std::f64::consts::PI * shell_frac)).cbrt();
            let center = draw_center(rng, side, [outer; 3])?;
            Ok(PhantomShape::Shell {
                center,
                outer,
                inner: 0.75 * outer,
            })
        }
        PhantomFamily::TwoComponent => {
            // two equal spheres, volume v/2 each, separated along one axis
            let r = (v * 0.5 * 3.0 / (4.0 * std::f64::consts::PI)).cbrt();
            let gap = rng.random_range(1.0..4.0);
            let d = 2.0 * r + gap;
            let axis = rng.random_range(0..3usize);
            let mut extent = [r; 3];
            extent[axis] = r + d / 2.0;
            let mid = draw_center(rng, side, extent)?;
            let mut c0 = mid;
            let mut c1 = mid;
            c0[axis] -= d / 2.0;
            c1[axis] += d / 2.0;
            Ok(PhantomShape::TwoComponent {
                centers: [c0, c1],
                radii: [r, r],
            })
        }
    }
}

/// Render one phantom: object at `object_hu` over background, additive
/// gaussian noise, plus the exact binary mask.
pub fn render_phantom(
    shape: &PhantomShape,
    spec: &PhantomCorpusSpec,
    sample_id: &str,
    noise_rng: &mut ChaCha8Rng,
) -> Result<(RawVolume, Array3<u8>)> {
    let side = spec.side;
    let noise = Normal::new(0.0, spec.noise_sd)
        .map_err(|e| Error::config(format!("noise sd: {e}")))?;
    let mut voxels = Array3::zeros((side, side, side));
    let mut mask = Array3::zeros((side, side, side));
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let inside = shape.contains([z as f64, y as f64, x as f64]);
                let base = if inside { spec.object_hu } else { spec.background_hu };
                let n = if spec.noise_sd > 0.0 {
                    noise.sample(noise_rng)
                } else {
                    0.0
                };
                voxels[[z, y, x]] = base + n;
                mask[[z, y, x]] = u8::from(inside);
            }
        }
    }
    Ok((
        RawVolume {
            voxels,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            source_id: sample_id.to_string(),
        },
        mask,
    ))
}

/// Observed survival time and event flag under exponential hazard
/// proportional to exp(beta * equivalent_radius) with uniform
/// administrative censoring.
fn draw_survival(eq_radius: f64, rng: &mut ChaCha8Rng) -> (f64, bool) {
    // calibrated so a radius-10 object has ~3-year median survival
    let base_rate = std::f64::consts::LN_2 / 1095.0;
    let rate = base_rate * (HAZARD_BETA_PER_VOXEL * (eq_radius - 10.0)).exp();
    let t = Exp::new(rate).unwrap().sample(rng);
    let censor = rng.random_range(200.0..2000.0);
    if t <= censor {
        (t.max(1.0), true)
    } else {
        (censor, false)
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

/// Generate `n` subjects (plus optional noise-twins) with volumes, masks,
/// label tables, and the manifest. Deterministic under `spec.seed`.
pub fn generate_corpus(spec: &PhantomCorpusSpec, n: usize, out: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("need n >= 1 phantoms".to_string()));
    }
    let vol_dir = out.join("volumes");
    let mask_dir = out.join("masks");
    std::fs::create_dir_all(&vol_dir)?;
    std::fs::create_dir_all(&mask_dir)?;

    let mut geom_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::new();
    let (mut cls, mut reg, mut loc, mut surv, mut pairs) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());

    for i in 0..n {
        let family = spec.families[i % spec.families.len()];
        let shape = draw_shape(family, spec, &mut geom_rng)?;
        let eq_radius = shape.equivalent_radius();
        let (time_days, event) = draw_survival(eq_radius, &mut geom_rng);
        let c = shape.centroid();
        let centroid = [
            c[0] / spec.side as f64,
            c[1] / spec.side as f64,
            c[2] / spec.side as f64,
        ];
        let class_label = u8::from(family == PhantomFamily::Sphere);
        let scans = if spec.twins { 2 } else { 1 };
        let base_id = format!("p{i:04}_0");
        for scan in 0..scans {
            let sample_id = format!("p{i:04}_{scan}");
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            noise_rng.set_stream((i * 2 + scan + 1) as u64);
            let (vol, mask) = render_phantom(&shape, spec, &sample_id, &mut noise_rng)?;
            vol.save(&vol_dir.join(format!("{sample_id}.vvol")))?;
            crate::volume::write_array_u8(
                &mask_dir.join(format!("{sample_id}.vvol")),
                &mask.into_dyn(),
            )?;
            cls.push(format!("{sample_id},{class_label}"));
            reg.push(format!("{sample_id},{}", shape.analytic_volume()));
            loc.push(format!(
                "{sample_id},{},{},{}",
                centroid[0], centroid[1], centroid[2]
            ));
            surv.push(format!("{sample_id},{time_days},{}", u8::from(event)));
            if scan == 1 {
                pairs.push(format!("{base_id},{sample_id}"));
            }
            samples.push(SampleEntry {
                sample_id,
                family,
                shape,
                analytic_volume: shape.analytic_volume(),
                equivalent_radius: eq_radius,
                centroid,
                class_label,
                time_days,
                event,
                twin_of: (scan == 1).then(|| base_id.clone()),
            });
        }
    }

    write_csv(&out.join("labels_cls.csv"), "sample_id,flag", &cls)?;
    write_csv(&out.join("labels_reg.csv"), "sample_id,volume_voxels", &reg)?;
    write_csv(&out.join("labels_loc.csv"), "sample_id,z,y,x", &loc)?;
    write_csv(&out.join("labels_surv.csv"), "sample_id,time_days,event", &surv)?;
    if spec.twins {
        write_csv(&out.join("pairs.csv"), "sample_id,positive_id", &pairs)?;
    }
    let manifest = CorpusManifest {
        spec: spec.clone(),
        samples,
    };
    manifest.save(&out.join("corpus.json"))?;
    Ok(manifest)
}
