//! Random ellipses and rectangles on a periodic square grid.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use eqimaging::{rng, Error, Result, Scalar, Tensor};
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipses,
    Rectangles,
    Mixed,
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipses" => Ok(Self::Ellipses),
            "rectangles" => Ok(Self::Rectangles),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::Spec {
                spec: s.to_string(),
                reason: "unknown shape family".into(),
                grammar: "ellipses | rectangles | mixed",
            }),
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ellipses => "ellipses",
            Self::Rectangles => "rectangles",
            Self::Mixed => "mixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub size: usize,
    pub family: ShapeFamily,
    /// Draw centers uniformly on the torus and orientations uniformly in
    /// `[0, 2pi)`, which makes the distribution invariant to grid rotations,
    /// reflections and cyclic shifts.
    pub invariant: bool,
    pub seed: u64,
    /// Shapes per image are drawn from `1..=max_shapes`.
    pub max_shapes: usize,
}

impl SynthSpec {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        Self {
            count,
            size,
            family: ShapeFamily::Mixed,
            invariant: true,
            seed,
            max_shapes: 3,
        }
    }
}

struct Shape {
    rect: bool,
    center: (f64, f64),
    axes: (f64, f64),
    angle: f64,
    intensity: f64,
}

fn wrap(d: f64, n: f64) -> f64 {
    d - n * (d / n).round()
}

impl Shape {
    fn draw(spec: &SynthSpec, r: &mut rng::Rng) -> Self {
        let n = spec.size as f64;
        let rect = match spec.family {
            ShapeFamily::Ellipses => false,
            ShapeFamily::Rectangles => true,
            ShapeFamily::Mixed => r.gen_bool(0.5),
        };
        let (center, angle) = if spec.invariant {
            ((r.gen_range(0.0..n), r.gen_range(0.0..n)), r.gen_range(0.0..2.0 * PI))
        } else {
            (
                (r.gen_range(0.3 * n..0.7 * n), r.gen_range(0.3 * n..0.7 * n)),
                r.gen_range(-PI / 12.0..PI / 12.0),
            )
        };
        // Half-extents stay below n / (2 sqrt 2) so wrapped copies never meet.
        let axes = (r.gen_range(0.1 * n..0.25 * n), r.gen_range(0.1 * n..0.25 * n));
        Self {
            rect,
            center,
            axes,
            angle,
            intensity: r.gen_range(0.3..1.0),
        }
    }

    fn covers(&self, row: f64, col: f64, n: f64) -> bool {
        let x = wrap(col - self.center.1, n);
        let y = -wrap(row - self.center.0, n);
        let (s, c) = self.angle.sin_cos();
        let xr = (x * c + y * s) / self.axes.0;
        let yr = (-x * s + y * c) / self.axes.1;
        if self.rect {
            xr.abs() <= 1.0 && yr.abs() <= 1.0
        } else {
            xr * xr + yr * yr <= 1.0
        }
    }
}

/// One `[1, size, size]` image per index; image `i` depends only on
/// `(seed, i)`, so prefixes of larger datasets agree.
pub fn synth_images<T: Scalar>(spec: &SynthSpec) -> Result<Vec<Tensor<T>>> {
    if spec.size < 8 {
        return Err(Error::InvalidArgument(format!("image size must be at least 8, got {}", spec.size)));
    }
    if spec.max_shapes == 0 {
        return Err(Error::InvalidArgument("max_shapes must be positive".into()));
    }
    let n = spec.size;
    Ok((0..spec.count)
        .map(|i| {
            let mut r = rng::stream(spec.seed, rng::substream(0x5a17, i as u64));
            let k = r.gen_range(1..=spec.max_shapes);
            let shapes: Vec<Shape> = (0..k).map(|_| Shape::draw(spec, &mut r)).collect();
            let mut data = vec![T::zero(); n * n];
            for (p, v) in data.iter_mut().enumerate() {
                let (row, col) = ((p / n) as f64, (p % n) as f64);
                let top = shapes
                    .iter()
                    .filter(|s| s.covers(row, col, n as f64))
                    .map(|s| s.intensity)
                    .fold(0.0, f64::max);
                *v = T::lit(top);
            }
            Tensor::new(vec![1, n, n], data).expect("shape matches")
        })
        .collect())
}
