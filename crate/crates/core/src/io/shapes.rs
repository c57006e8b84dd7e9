use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
    PlaneWithBump,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] =
        [Self::Sphere, Self::Cube, Self::Torus, Self::Cylinder, Self::Cone, Self::PlaneWithBump];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Cube => "cube",
            Self::Torus => "torus",
            Self::Cylinder => "cylinder",
            Self::Cone => "cone",
            Self::PlaneWithBump => "plane-with-bump",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown shape kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub n_points: usize,
    pub jitter: f64,
    pub seed: u64,
    pub class_id: usize,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 64 {
            return Err(Error::Argument(format!("shapes need at least 64 points, got {}", self.n_points)));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Argument(format!("jitter must be finite and non-negative, got {}", self.jitter)));
        }
        Ok(())
    }
}

const TORUS_R: f64 = 1.0;
const TORUS_TUBE: f64 = 0.35;
const CYL_RADIUS: f64 = 0.6;
const CONE_RADIUS: f64 = 0.8;

fn unit_sphere(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

fn disk(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    (r * a.cos(), r * a.sin())
}

fn sample(kind: ShapeKind, rng: &mut ChaCha8Rng) -> Point {
    match kind {
        ShapeKind::Sphere => unit_sphere(rng),
        ShapeKind::Cube => {
            let face = rng.random_range(0..6usize);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            p[axis] = sign;
            p
        }
        ShapeKind::Torus => {
            // rejection on the tube angle makes the density area-uniform
            let v = loop {
                let v = rng.random_range(0.0..2.0 * PI);
                let w = (TORUS_R + TORUS_TUBE * v.cos()) / (TORUS_R + TORUS_TUBE);
                if rng.random::<f64>() <= w {
                    break v;
                }
            };
            let u = rng.random_range(0.0..2.0 * PI);
            let ring = TORUS_R + TORUS_TUBE * v.cos();
            [ring * u.cos(), TORUS_TUBE * v.sin(), ring * u.sin()]
        }
        ShapeKind::Cylinder => {
            let side = 2.0 * PI * CYL_RADIUS * 2.0;
            let cap = PI * CYL_RADIUS * CYL_RADIUS;
            let pick = rng.random::<f64>() * (side + 2.0 * cap);
            if pick < side {
                let a = rng.random_range(0.0..2.0 * PI);
                [CYL_RADIUS * a.cos(), rng.random_range(-1.0..=1.0), CYL_RADIUS * a.sin()]
            } else {
                let y = if pick < side + cap { 1.0 } else { -1.0 };
                let (x, z) = disk(rng, CYL_RADIUS);
                [x, y, z]
            }
        }
        ShapeKind::Cone => {
            // apex at y = 1, base disk at y = -1
            let slant = (CONE_RADIUS * CONE_RADIUS + 4.0).sqrt();
            let side = PI * CONE_RADIUS * slant;
            let base = PI * CONE_RADIUS * CONE_RADIUS;
            if rng.random::<f64>() * (side + base) < side {
                let t = rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..2.0 * PI);
                let r = CONE_RADIUS * t;
                [r * a.cos(), 1.0 - 2.0 * t, r * a.sin()]
            } else {
                let (x, z) = disk(rng, CONE_RADIUS);
                [x, -1.0, z]
            }
        }
        ShapeKind::PlaneWithBump => {
            let x: f64 = rng.random_range(-1.0..=1.0);
            let z: f64 = rng.random_range(-1.0..=1.0);
            [x, 0.6 * (-(x * x + z * z) / 0.15).exp(), z]
        }
    }
}

/// Samples one labeled cloud per spec.
pub fn gen_shapes(specs: &[ShapeSpec]) -> Result<Vec<PointCloud>> {
    specs
        .iter()
        .map(|s| {
            s.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let noise = Normal::new(0.0, s.jitter).map_err(|e| Error::Argument(e.to_string()))?;
            let points = (0..s.n_points)
                .map(|_| {
                    let p = sample(s.kind, &mut rng);
                    if s.jitter > 0.0 {
                        p.map(|v| v + noise.sample(&mut rng))
                    } else {
                        p
                    }
                })
                .collect();
            PointCloud::new(points, Some(s.class_id))
        })
        .collect()
}

/// `per_class` clouds of every kind; the class id is the kind's position in `kinds`.
pub fn synthetic_dataset(
    kinds: &[ShapeKind],
    per_class: usize,
    n_points: usize,
    jitter: f64,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    let mut specs = Vec::with_capacity(kinds.len() * per_class);
    for i in 0..per_class {
        for (class_id, &kind) in kinds.iter().enumerate() {
            let s = crate::training::derive_seed(seed, &[class_id as u64, i as u64]);
            specs.push(ShapeSpec { kind, n_points, jitter, seed: s, class_id });
        }
    }
    gen_shapes(&specs)
}
