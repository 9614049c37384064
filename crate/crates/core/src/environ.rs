//! Far-field equirectangular environment maps: sampling, adjoints and
//! fitting from background pixels.

use std::f64::consts::PI;
use std::path::Path;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imageio::{self, Image};
use crate::math::{Rgb, Vec3};

/// Passes of neighbor diffusion used to fill unobserved texels.
pub const FILL_PASSES: usize = 64;

/// Lat-long map: `u = atan2(d_y, d_x)/2π + 0.5` across, `v = acos(d_z)/π`
/// down (row 0 is the +z pole).
#[derive(Clone, Debug, PartialEq)]
pub struct EnvMap {
    width: usize,
    height: usize,
    texels: Vec<Rgb>,
}

/// Bilinear footprint of one lookup.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    idx: [usize; 4],
    w: [f64; 4],
    fx: f64,
    fy: f64,
    y_interior: bool,
}

impl EnvMap {
    pub fn new(width: usize, height: usize, texels: Vec<Rgb>) -> Result<Self> {
        if width == 0 || height == 0 || texels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "environment map {width}x{height} needs {} texels, got {}",
                width * height,
                texels.len()
            )));
        }
        if let Some(i) = texels.iter().position(|t| !t.iter().all(|c| c.is_finite() && *c >= 0.0)) {
            return Err(Error::Invalid(format!("environment texel {i} is negative or not finite")));
        }
        Ok(EnvMap {
            width,
            height,
            texels,
        })
    }

    pub fn constant(width: usize, height: usize, c: Rgb) -> Self {
        EnvMap {
            width,
            height,
            texels: vec![c; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(&Vec3) -> Rgb) -> Result<Self> {
        let mut texels = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                texels.push(f(&texel_direction(i, j, width, height)));
            }
        }
        Self::new(width, height, texels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn texels(&self) -> &[Rgb] {
        &self.texels
    }

    pub fn texel(&self, i: usize, j: usize) -> Rgb {
        self.texels[j * self.width + i]
    }

    pub fn set_texels(&mut self, texels: Vec<Rgb>) -> Result<()> {
        *self = Self::new(self.width, self.height, texels)?;
        Ok(())
    }

    pub fn peak(&self) -> f64 {
        self.texels.iter().map(|t| t.max()).fold(0.0, f64::max)
    }

    fn footprint(&self, dir: &Vec3) -> Footprint {
        let (u, v) = direction_to_uv(dir);
        let x = u * self.width as f64 - 0.5;
        let y = v * self.height as f64 - 0.5;
        let x0 = x.floor();
        let fx = x - x0;
        let w = self.width as i64;
        let i0 = (x0 as i64).rem_euclid(w) as usize;
        let i1 = (i0 + 1) % self.width;
        let ymax = (self.height - 1) as f64;
        let (j0, j1, fy, y_interior) = if y <= 0.0 {
            (0, 0, 0.0, false)
        } else if y >= ymax {
            (self.height - 1, self.height - 1, 0.0, false)
        } else {
            let y0 = y.floor();
            (y0 as usize, y0 as usize + 1, y - y0, true)
        };
        let r0 = j0 * self.width;
        let r1 = j1 * self.width;
        Footprint {
            idx: [r0 + i0, r0 + i1, r1 + i0, r1 + i1],
            w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            fx,
            fy,
            y_interior,
        }
    }

    /// Bilinear lookup with longitudinal wrap and clamped pole rows.
    pub fn sample(&self, dir: &Vec3) -> Rgb {
        let f = self.footprint(dir);
        (0..4).fold(Rgb::zeros(), |acc, k| acc + self.texels[f.idx[k]] * f.w[k])
    }

    /// Adjoint of [`sample`](Self::sample) with respect to the direction.
    /// Texel gradients are reported through `on_texel` when given.
    pub fn sample_backward(
        &self,
        dir: &Vec3,
        grad: &Rgb,
        mut on_texel: Option<&mut dyn FnMut(usize, Rgb)>,
    ) -> Vec3 {
        let f = self.footprint(dir);
        if let Some(cb) = on_texel.as_mut() {
            for k in 0..4 {
                if f.w[k] != 0.0 {
                    cb(f.idx[k], grad * f.w[k]);
                }
            }
        }
        let t = f.idx.map(|i| self.texels[i]);
        let d_dx = (t[1] - t[0]) * (1.0 - f.fy) + (t[3] - t[2]) * f.fy;
        let d_dy = (t[2] - t[0]) * (1.0 - f.fx) + (t[3] - t[1]) * f.fx;
        let g_x = grad.dot(&d_dx) * self.width as f64;
        let g_y = if f.y_interior {
            grad.dot(&d_dy) * self.height as f64
        } else {
            0.0
        };
        let mut g = Vec3::zeros();
        let rho2 = dir.x * dir.x + dir.y * dir.y;
        if rho2 > 0.0 {
            let s = g_x / (2.0 * PI * rho2);
            g.x += -dir.y * s;
            g.y += dir.x * s;
        }
        let z = dir.z;
        if z.abs() < 1.0 && g_y != 0.0 {
            g.z += -g_y / (PI * (1.0 - z * z).sqrt());
        }
        g
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.texels.clone(),
        }
    }

    pub fn from_image(img: Image) -> Result<Self> {
        Self::new(img.width, img.height, img.data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        imageio::write_pfm(path, &self.to_image())
    }

    /// Loads PFM, or PNG linearized with γ = 2.2.
    pub fn read(path: &Path) -> Result<Self> {
        Self::from_image(imageio::read_image(path)?)
    }
}

pub fn direction_to_uv(dir: &Vec3) -> (f64, f64) {
    let u = dir.y.atan2(dir.x) / (2.0 * PI) + 0.5;
    let v = dir.z.clamp(-1.0, 1.0).acos() / PI;
    (u, v)
}

pub fn uv_to_direction(u: f64, v: f64) -> Vec3 {
    let phi = (u - 0.5) * 2.0 * PI;
    let theta = v * PI;
    Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

/// Direction through the center of texel `(i, j)`.
pub fn texel_direction(i: usize, j: usize, width: usize, height: usize) -> Vec3 {
    uv_to_direction((i as f64 + 0.5) / width as f64, (j as f64 + 0.5) / height as f64)
}

/// Result of [`fit_env_from_views`].
#[derive(Clone, Debug)]
pub struct EnvFit {
    pub env: EnvMap,
    /// Contributions per texel.
    pub coverage: Vec<u32>,
}

/// Fits an environment map from out-of-mask pixels: every background pixel
/// adds its color to the texel nearest its ray direction; covered texels
/// average their contributions and the rest are filled by diffusion.
pub fn fit_env_from_views(
    images: &[Image],
    masks: &[Vec<f64>],
    cameras: &[Camera],
    width: usize,
    height: usize,
) -> Result<EnvFit> {
    if images.is_empty() || images.len() != masks.len() || images.len() != cameras.len() {
        return Err(Error::ShapeMismatch(
            "need matching, non-empty lists of images, masks and cameras".into(),
        ));
    }
    // Means are accumulated as offsets from each texel's first sample, which
    // keeps constant inputs exact.
    let mut first: Vec<Option<Rgb>> = vec![None; width * height];
    let mut sums = vec![Rgb::zeros(); width * height];
    let mut counts = vec![0u32; width * height];
    for ((img, mask), cam) in images.iter().zip(masks).zip(cameras) {
        if img.width != cam.width || img.height != cam.height || mask.len() != cam.pixel_count() {
            return Err(Error::ShapeMismatch("image, mask and camera sizes differ".into()));
        }
        for (p, m) in mask.iter().enumerate() {
            if *m >= 0.5 {
                continue;
            }
            let (u, v) = direction_to_uv(&cam.pixel_ray(p).dir);
            let i = ((u * width as f64).floor() as usize).min(width - 1);
            let j = ((v * height as f64).floor() as usize).min(height - 1);
            let k = j * width + i;
            let c = img.data[p];
            let f = *first[k].get_or_insert(c);
            sums[k] += c - f;
            counts[k] += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::NoCoverage);
    }
    let mut texels: Vec<Option<Rgb>> = (0..width * height)
        .map(|k| first[k].map(|f| f + sums[k] / counts[k] as f64))
        .collect();
    diffuse_fill(&mut texels, width, height, FILL_PASSES);
    let covered: Vec<Rgb> = texels.iter().flatten().copied().collect();
    let fallback = covered.iter().sum::<Rgb>() / covered.len() as f64;
    let texels = texels.into_iter().map(|t| t.unwrap_or(fallback)).collect();
    Ok(EnvFit {
        env: EnvMap::new(width, height, texels)?,
        coverage: counts,
    })
}

/// Fills `None` texels with the mean of their known 8-neighbors, one ring
/// per pass (wrapping in longitude, clamped at the poles).
fn diffuse_fill(texels: &mut [Option<Rgb>], width: usize, height: usize, passes: usize) {
    for _ in 0..passes {
        let prev = texels.to_vec();
        let mut changed = false;
        for j in 0..height {
            for i in 0..width {
                if prev[j * width + i].is_some() {
                    continue;
                }
                let mut sum = Rgb::zeros();
                let mut n = 0;
                for dj in -1i64..=1 {
                    let jj = j as i64 + dj;
                    if jj < 0 || jj >= height as i64 {
                        continue;
                    }
                    for di in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let ii = (i as i64 + di).rem_euclid(width as i64) as usize;
                        if let Some(v) = prev[jj as usize * width + ii] {
                            sum += v;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    texels[j * width + i] = Some(sum / n as f64);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}
