//! Parametric shape families with a mirror plane at `x = 0`.
//!
//! Each shape is a union of simple solids. Surfaces are sampled uniformly
//! by area over the solids' boundaries, rejecting samples that fall inside
//! another solid, so only the outer surface of the union is kept. Half of
//! the samples are drawn and the other half are their mirror images, which
//! makes the declared symmetry exact for every sampled cloud.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Ellipsoid,
    BoxAssembly,
    WingedBody,
    LampLike,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Ellipsoid, Family::BoxAssembly, Family::WingedBody, Family::LampLike];

    pub fn name(self) -> &'static str {
        match self {
            Family::Ellipsoid => "ellipsoid",
            Family::BoxAssembly => "box-assembly",
            Family::WingedBody => "winged-body",
            Family::LampLike => "lamp-like",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape family {s:?}")))
    }
}

/// A solid whose boundary contributes to the shape surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Solid {
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
    Cuboid { center: [f64; 3], half: [f64; 3] },
    /// Axis along `z`.
    Cylinder { center: [f64; 3], radius: f64, half_height: f64 },
    /// Open lateral surface of a cone frustum around the `z` axis; it has no
    /// interior and never hides other samples.
    Frustum { z0: f64, z1: f64, r0: f64, r1: f64 },
}

fn v(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl Solid {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Solid::Ellipsoid { radii, .. } => radii.iter().all(|r| *r > 0.0),
            Solid::Cuboid { half, .. } => half.iter().all(|h| *h > 0.0),
            Solid::Cylinder { radius, half_height, .. } => radius > 0.0 && half_height > 0.0,
            Solid::Frustum { z0, z1, r0, r1 } => z1 > z0 && r0 >= 0.0 && r1 >= 0.0 && r0 + r1 > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solid parameters: {self:?}")))
        }
    }

    fn area(&self) -> f64 {
        match *self {
            Solid::Ellipsoid { radii: [a, b, c], .. } => {
                // Knud Thomsen's approximation; only used as a sampling weight.
                let p = 1.6075;
                4.0 * PI * (((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0).powf(1.0 / p)
            }
            Solid::Cuboid { half: [x, y, z], .. } => 8.0 * (x * y + x * z + y * z),
            Solid::Cylinder { radius, half_height, .. } => 2.0 * PI * radius * (2.0 * half_height + radius),
            Solid::Frustum { z0, z1, r0, r1 } => PI * (r0 + r1) * ((r1 - r0).powi(2) + (z1 - z0).powi(2)).sqrt(),
        }
    }

    /// Strict interior test with a small margin so boundary samples of one
    /// solid are not rejected by a touching neighbor.
    fn contains(&self, p: &Vec3) -> bool {
        const MARGIN: f64 = 1e-9;
        match *self {
            Solid::Ellipsoid { center, radii } => {
                let d = p - v(center);
                (d.x / radii[0]).powi(2) + (d.y / radii[1]).powi(2) + (d.z / radii[2]).powi(2) < 1.0 - MARGIN
            }
            Solid::Cuboid { center, half } => {
                let d = p - v(center);
                (0..3).all(|i| d[i].abs() < half[i] - MARGIN)
            }
            Solid::Cylinder { center, radius, half_height } => {
                let d = p - v(center);
                d.x.hypot(d.y) < radius - MARGIN && d.z.abs() < half_height - MARGIN
            }
            Solid::Frustum { .. } => false,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        match *self {
            Solid::Ellipsoid { center, radii: [a, b, c] } => {
                // Map the unit sphere and accept by the local area stretch.
                let bound = (b * c).max(a * c).max(a * b);
                loop {
                    let u = unit_vector(rng);
                    let stretch = ((b * c * u.x).powi(2) + (a * c * u.y).powi(2) + (a * b * u.z).powi(2)).sqrt();
                    if rng.gen::<f64>() * bound <= stretch {
                        return v(center) + Vec3::new(a * u.x, b * u.y, c * u.z);
                    }
                }
            }
            Solid::Cuboid { center, half: [x, y, z] } => {
                let faces = [y * z, y * z, x * z, x * z, x * y, x * y];
                let f = pick_weighted(&faces, rng);
                let (s, t): (f64, f64) = (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
                let sign = if f % 2 == 0 { 1.0 } else { -1.0 };
                let local = match f / 2 {
                    0 => Vec3::new(sign * x, s * y, t * z),
                    1 => Vec3::new(s * x, sign * y, t * z),
                    _ => Vec3::new(s * x, t * y, sign * z),
                };
                v(center) + local
            }
            Solid::Cylinder { center, radius, half_height } => {
                let side = 2.0 * PI * radius * 2.0 * half_height;
                let cap = PI * radius * radius;
                let theta = rng.gen_range(0.0..2.0 * PI);
                let local = match pick_weighted(&[side, cap, cap], rng) {
                    0 => Vec3::new(radius * theta.cos(), radius * theta.sin(), rng.gen_range(-half_height..=half_height)),
                    k => {
                        let r = radius * rng.gen::<f64>().sqrt();
                        let z = if k == 1 { half_height } else { -half_height };
                        Vec3::new(r * theta.cos(), r * theta.sin(), z)
                    }
                };
                v(center) + local
            }
            Solid::Frustum { z0, z1, r0, r1 } => {
                // Radius is linear in height; area density is proportional to it.
                let theta = rng.gen_range(0.0..2.0 * PI);
                let s = if (r1 - r0).abs() < 1e-12 {
                    rng.gen::<f64>()
                } else {
                    let u: f64 = rng.gen();
                    ((r0 * r0 + u * (r1 * r1 - r0 * r0)).sqrt() - r0) / (r1 - r0)
                };
                let r = r0 + s * (r1 - r0);
                Vec3::new(r * theta.cos(), r * theta.sin(), z0 + s * (z1 - z0))
            }
        }
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let t = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * t.cos(), r * t.sin(), z)
}

fn pick_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// A concrete shape: its family, the solids making it up, and the seed used
/// to sample its surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: Family,
    pub solids: Vec<Solid>,
    pub seed: u64,
}

impl ShapeSpec {
    /// Draws family-specific parameters from `seed`. The result is symmetric
    /// under `x -> -x`.
    pub fn random(family: Family, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F5A4E);
        let mut r = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let solids = match family {
            Family::Ellipsoid => vec![Solid::Ellipsoid { center: [0.0; 3], radii: [r(0.5, 1.0), r(0.5, 1.2), r(0.3, 0.9)] }],
            Family::BoxAssembly => {
                let (bx, by, bz) = (r(0.25, 0.45), r(0.3, 0.6), r(0.2, 0.4));
                let (sx, sy, sz) = (r(0.1, 0.25), r(0.1, 0.3), r(0.1, 0.3));
                let off = bx + sx * 0.6;
                let (sy0, sz0) = (r(-by * 0.5, by * 0.5), r(0.0, bz));
                let top = [r(0.1, bx), r(0.1, by * 0.6), r(0.05, 0.15)];
                vec![
                    Solid::Cuboid { center: [0.0; 3], half: [bx, by, bz] },
                    Solid::Cuboid { center: [off, sy0, sz0], half: [sx, sy, sz] },
                    Solid::Cuboid { center: [-off, sy0, sz0], half: [sx, sy, sz] },
                    Solid::Cuboid { center: [0.0, r(-0.2, 0.2), bz + top[2] * 0.8], half: top },
                ]
            }
            Family::WingedBody => {
                let (len, rad) = (r(0.8, 1.1), r(0.1, 0.18));
                let span = r(0.7, 1.1);
                let chord = r(0.15, 0.3);
                let wing_y = r(-0.15, 0.15);
                let thick = r(0.02, 0.04);
                let eng_x = r(0.3, span * 0.6);
                let eng = [r(0.05, 0.08), r(0.14, 0.22), r(0.05, 0.08)];
                let tail_span = r(0.2, 0.35);
                vec![
                    Solid::Ellipsoid { center: [0.0; 3], radii: [rad, len, rad] },
                    Solid::Cuboid { center: [0.0, wing_y, 0.0], half: [span, chord, thick] },
                    Solid::Ellipsoid { center: [eng_x, wing_y, -rad * 0.9], radii: eng },
                    Solid::Ellipsoid { center: [-eng_x, wing_y, -rad * 0.9], radii: eng },
                    Solid::Cuboid { center: [0.0, -len * 0.85, 0.0], half: [tail_span, chord * 0.5, thick] },
                    Solid::Cuboid { center: [0.0, -len * 0.85, rad * 1.5], half: [thick, chord * 0.5, rad * 1.2] },
                ]
            }
            Family::LampLike => {
                let base_r = r(0.3, 0.5);
                let base_h = r(0.03, 0.07);
                let pole_h = r(0.5, 0.9);
                let pole_r = r(0.03, 0.06);
                let (s0, s1) = (r(0.35, 0.6), r(0.1, 0.3));
                let shade_h = r(0.25, 0.45);
                let z_base = -pole_h * 0.5;
                let z_top = z_base + pole_h;
                vec![
                    Solid::Cylinder { center: [0.0, 0.0, z_base], radius: base_r, half_height: base_h },
                    Solid::Cylinder { center: [0.0, 0.0, (z_base + z_top) * 0.5], radius: pole_r, half_height: pole_h * 0.5 },
                    Solid::Frustum { z0: z_top - shade_h * 0.5, z1: z_top + shade_h * 0.5, r0: s0, r1: s1 },
                ]
            }
        };
        Self { family, solids, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.solids.is_empty() {
            return Err(Error::Config("shape has no solids".into()));
        }
        self.solids.iter().try_for_each(Solid::validate)
    }

    /// Mirror plane normal; every family is symmetric under `x -> -x`.
    pub fn mirror_normal(&self) -> Vec3 {
        Vec3::x()
    }
}

pub fn mirror_x(p: &Vec3) -> Vec3 {
    Vec3::new(-p.x, p.y, p.z)
}

/// Unnormalized surface samples: `n / 2` area-uniform draws followed by
/// their mirror images (plus one extra draw when `n` is odd).
pub fn sample_surface(spec: &ShapeSpec, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    spec.validate()?;
    let areas: Vec<f64> = spec.solids.iter().map(Solid::area).collect();
    let draw = |rng: &mut dyn FnMut() -> (usize, Vec3)| -> Vec3 {
        loop {
            let (i, p) = rng();
            if !spec.solids.iter().enumerate().any(|(j, s)| j != i && s.contains(&p)) {
                return p;
            }
        }
    };
    let mut source = || {
        let i = pick_weighted(&areas, rng);
        (i, spec.solids[i].sample(rng))
    };
    let half: Vec<Vec3> = (0..n / 2).map(|_| draw(&mut source)).collect();
    let mut out = half.clone();
    out.extend(half.iter().map(mirror_x));
    if n % 2 == 1 {
        out.push(draw(&mut source));
    }
    Ok(out)
}

/// Translation and scale that move a cloud's centroid to the origin and its
/// farthest point onto the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: Vec3,
    pub scale: f64,
}

impl Normalization {
    pub fn fit(points: &[Vec3]) -> Result<Self> {
        let center = crate::geometry::centroid(points);
        let radius = points.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
        if !(radius > 0.0) {
            return Err(Error::Degenerate("cannot normalize a cloud of coincident points".into()));
        }
        Ok(Self { center, scale: 1.0 / radius })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.center) * self.scale
    }
}

/// `n` surface samples normalized into the unit sphere; deterministic per
/// `spec.seed`.
pub fn generate_shape(spec: &ShapeSpec, n: usize) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::Size("cannot generate an empty shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let raw = sample_surface(spec, n, &mut rng)?;
    let norm = Normalization::fit(&raw)?;
    PointCloud::new(raw.iter().map(|p| norm.apply(p)).collect())
}
