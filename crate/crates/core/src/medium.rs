//! Volumetric absorption field on a dense corner grid and Beer–Lambert
//! transmittance along straight segments.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{softplus, softplus_grad, softplus_inv, Aabb, Rgb, Vec3};

const MAGIC: &[u8; 8] = b"RFXGRID\0";
const VERSION: u32 = 1;

pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_SAMPLES: usize = 64;
/// Inflation applied to the object bounds when sizing the default grid.
pub const DEFAULT_INFLATE: f64 = 0.05;

/// Per-channel absorption rate `μ = softplus(raw)` stored at the
/// `(nx+1)(ny+1)(nz+1)` cell corners and interpolated trilinearly.
#[derive(Clone, Debug, PartialEq)]
pub struct AbsorptionGrid {
    resolution: [usize; 3],
    aabb: Aabb,
    raw: Vec<f64>,
    mu: Vec<f64>,
}

/// Corner indices and trilinear weights of one sample.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub corners: [usize; 8],
    pub weights: [f64; 8],
    /// Weight derivatives with respect to the sample position.
    pub dweights: [Vec3; 8],
}

impl AbsorptionGrid {
    /// Grid with every raw value set to `raw_value`.
    pub fn constant(resolution: [usize; 3], aabb: Aabb, raw_value: f64) -> Result<Self> {
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::Invalid("grid resolution must be positive".into()));
        }
        if aabb.is_empty() || (0..3).any(|k| aabb.max[k] <= aabb.min[k]) {
            return Err(Error::Invalid("grid bounds must have positive extent".into()));
        }
        let n = (resolution[0] + 1) * (resolution[1] + 1) * (resolution[2] + 1) * 3;
        let mut grid = AbsorptionGrid {
            resolution,
            aabb,
            raw: vec![raw_value; n],
            mu: Vec::new(),
        };
        grid.refresh();
        Ok(grid)
    }

    /// Grid whose corner values reproduce `mu(x)` (clamped to ≥ 1e-12).
    pub fn from_fn(resolution: [usize; 3], aabb: Aabb, mu: impl Fn(&Vec3) -> Rgb) -> Result<Self> {
        let mut grid = Self::constant(resolution, aabb, 0.0)?;
        let [nx, ny, nz] = resolution;
        for i in 0..=nx {
            for j in 0..=ny {
                for k in 0..=nz {
                    let c = grid.corner_index(i, j, k);
                    let m = mu(&grid.corner_position(i, j, k));
                    for ch in 0..3 {
                        grid.raw[c * 3 + ch] = softplus_inv(m[ch].max(1e-12));
                    }
                }
            }
        }
        grid.refresh();
        Ok(grid)
    }

    /// Default grid over `object_bounds` inflated by 5%.
    pub fn for_object(object_bounds: &Aabb, resolution: usize, raw_value: f64) -> Result<Self> {
        Self::constant([resolution; 3], object_bounds.inflated(DEFAULT_INFLATE), raw_value)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn aabb(&self) -> Aabb {
        self.aabb
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// Activated values, laid out like [`raw`](Self::raw).
    pub fn mu_values(&self) -> &[f64] {
        &self.mu
    }

    pub fn corner_count(&self) -> usize {
        self.raw.len() / 3
    }

    /// Mutates raw values in place and refreshes the activation cache.
    pub fn update_raw(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.raw);
        self.refresh();
    }

    pub fn set_raw(&mut self, raw: Vec<f64>) -> Result<()> {
        if raw.len() != self.raw.len() {
            return Err(Error::ShapeMismatch(format!(
                "grid expects {} raw values, got {}",
                self.raw.len(),
                raw.len()
            )));
        }
        self.raw = raw;
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        self.mu = self.raw.iter().map(|&r| softplus(r)).collect();
    }

    /// `softplus'(raw)` per raw entry.
    pub fn activation_grad(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| softplus_grad(r)).collect()
    }

    pub fn corner_index(&self, i: usize, j: usize, k: usize) -> usize {
        let [_, ny, nz] = self.resolution;
        (i * (ny + 1) + j) * (nz + 1) + k
    }

    pub fn corner_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let e = self.aabb.extent();
        let [nx, ny, nz] = self.resolution;
        self.aabb.min
            + Vec3::new(
                e.x * i as f64 / nx as f64,
                e.y * j as f64 / ny as f64,
                e.z * k as f64 / nz as f64,
            )
    }

    pub fn cell_size(&self) -> Vec3 {
        let e = self.aabb.extent();
        let [nx, ny, nz] = self.resolution;
        Vec3::new(e.x / nx as f64, e.y / ny as f64, e.z / nz as f64)
    }

    /// Trilinear stencil at `x`, or `None` outside the grid bounds.
    pub fn stencil(&self, x: &Vec3) -> Option<Stencil> {
        if !self.aabb.contains(x) {
            return None;
        }
        let e = self.aabb.extent();
        let mut idx = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut scale = [0.0; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let g = (x[a] - self.aabb.min[a]) / e[a] * n as f64;
            let i = (g.floor().max(0.0) as usize).min(n - 1);
            idx[a] = i;
            frac[a] = (g - i as f64).clamp(0.0, 1.0);
            scale[a] = n as f64 / e[a];
        }
        let mut corners = [0usize; 8];
        let mut weights = [0.0; 8];
        let mut dweights = [Vec3::zeros(); 8];
        for c in 0..8 {
            let o = [c >> 2 & 1, c >> 1 & 1, c & 1];
            corners[c] = self.corner_index(idx[0] + o[0], idx[1] + o[1], idx[2] + o[2]);
            let w = |a: usize| if o[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            let dw = |a: usize| if o[a] == 1 { scale[a] } else { -scale[a] };
            weights[c] = w(0) * w(1) * w(2);
            dweights[c] = Vec3::new(dw(0) * w(1) * w(2), w(0) * dw(1) * w(2), w(0) * w(1) * dw(2));
        }
        Some(Stencil {
            corners,
            weights,
            dweights,
        })
    }

    /// Absorption rate at `x`; zero outside the grid bounds.
    pub fn sample_mu(&self, x: &Vec3) -> Rgb {
        match self.stencil(x) {
            Some(s) => self.blend(&s),
            None => Rgb::zeros(),
        }
    }

    fn blend(&self, s: &Stencil) -> Rgb {
        let mut m = Rgb::zeros();
        for c in 0..8 {
            let base = s.corners[c] * 3;
            for ch in 0..3 {
                m[ch] += s.weights[c] * self.mu[base + ch];
            }
        }
        m
    }

    /// Spatial Jacobian of `μ`: row `ch` is `∇μ_ch`.
    fn blend_grad(&self, s: &Stencil) -> [Vec3; 3] {
        let mut g = [Vec3::zeros(); 3];
        for c in 0..8 {
            let base = s.corners[c] * 3;
            for (ch, gc) in g.iter_mut().enumerate() {
                *gc += s.dweights[c] * self.mu[base + ch];
            }
        }
        g
    }

    /// Midpoint-rule optical depth `Σ μ(x_k) Δ` with `n_samples` uniform steps.
    pub fn optical_depth(&self, x0: &Vec3, x1: &Vec3, n_samples: usize) -> Rgb {
        let n = n_samples.max(1);
        let d = x1 - x0;
        let delta = d.norm() / n as f64;
        let mut sum = Rgb::zeros();
        for k in 0..n {
            let f = (k as f64 + 0.5) / n as f64;
            sum += self.sample_mu(&(x0 + d * f));
        }
        sum * delta
    }

    pub fn transmittance(&self, x0: &Vec3, x1: &Vec3, n_samples: usize) -> Rgb {
        self.optical_depth(x0, x1, n_samples).map(|t| (-t).exp())
    }

    /// Adjoint of [`transmittance`](Self::transmittance). Gradients on the
    /// activated corner values are reported through `on_mu` as
    /// `(raw index, dL/dμ)`; the return value holds `(dL/dx0, dL/dx1)`.
    pub fn transmittance_backward(
        &self,
        x0: &Vec3,
        x1: &Vec3,
        n_samples: usize,
        grad_tr: &Rgb,
        mut on_mu: impl FnMut(usize, f64),
    ) -> (Vec3, Vec3) {
        let n = n_samples.max(1);
        let d = x1 - x0;
        let len = d.norm();
        let delta = len / n as f64;
        let tr = self.transmittance(x0, x1, n);
        // dL/dτ_c for optical depth τ_c = Δ S_c.
        let g_tau = grad_tr.component_mul(&tr).map(|v| -v);
        if g_tau.iter().all(|v| *v == 0.0) {
            return (Vec3::zeros(), Vec3::zeros());
        }
        let mut g_x0 = Vec3::zeros();
        let mut g_x1 = Vec3::zeros();
        let mut sum = Rgb::zeros();
        for k in 0..n {
            let f = (k as f64 + 0.5) / n as f64;
            let Some(s) = self.stencil(&(x0 + d * f)) else {
                continue;
            };
            sum += self.blend(&s);
            for c in 0..8 {
                let base = s.corners[c] * 3;
                for ch in 0..3 {
                    let g = g_tau[ch] * delta * s.weights[c];
                    if g != 0.0 {
                        on_mu(base + ch, g);
                    }
                }
            }
            let jac = self.blend_grad(&s);
            let g_x = (0..3).fold(Vec3::zeros(), |acc, ch| acc + jac[ch] * (g_tau[ch] * delta));
            g_x0 += g_x * (1.0 - f);
            g_x1 += g_x * f;
        }
        if len > 0.0 {
            let g_delta = g_tau.dot(&sum);
            let g_d = d / len * (g_delta / n as f64);
            g_x1 += g_d;
            g_x0 -= g_d;
        }
        (g_x0, g_x1)
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.raw.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for n in self.resolution {
            buf.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in self.aabb.min.iter().chain(self.aabb.max.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.raw {
            buf.extend_from_slice(&(*r as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::format(path, m.to_string());
        if bytes.len() < 8 + 4 + 12 + 48 || &bytes[..8] != MAGIC {
            return Err(bad("not an absorption grid checkpoint"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(8) != VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let resolution = [u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize];
        let aabb = Aabb::new(
            Vec3::new(f64_at(24), f64_at(32), f64_at(40)),
            Vec3::new(f64_at(48), f64_at(56), f64_at(64)),
        );
        let mut grid = Self::constant(resolution, aabb, 0.0).map_err(|e| bad(&e.to_string()))?;
        let body = &bytes[72..];
        if body.len() != grid.raw.len() * 4 {
            return Err(bad("payload size does not match the header"));
        }
        let raw = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        grid.set_raw(raw)?;
        Ok(grid)
    }
}
