//! The canonical appearance field: a trainable dense voxel grid mapping
//! canonical points to color and density via trilinear interpolation.
//!
//! Voxels store pre-activations; queries push color through a sigmoid and
//! density through a softplus, so post-activation color is always in [0,1]
//! and density is non-negative. Points outside the bounding box read as
//! fully transparent black.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{sigmoid, softplus, trilinear_sample, GridGeom, Tensor};
use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};

/// Pre-activation value that a sigmoid maps to mid-gray.
pub const INIT_COLOR_PRE: f64 = 0.0;
/// Small negative density pre-activation: the initial body is near
/// transparent (softplus(-2.5) < 0.1).
pub const INIT_DENSITY_PRE: f64 = -2.5;

#[derive(Debug, Clone, Copy)]
pub struct FieldConfig {
    pub resolution: [usize; 3],
    pub bbox: Aabb,
}

impl FieldConfig {
    pub fn with_default_resolution(bbox: Aabb) -> Self {
        FieldConfig { resolution: [64, 64, 64], bbox }
    }
}

#[derive(Debug, Clone)]
pub struct CanonicalField {
    resolution: [usize; 3],
    bbox: Aabb,
    /// [voxel_count, 3] color pre-activations.
    color: Tensor,
    /// [voxel_count, 1] density pre-activations.
    density: Tensor,
}

impl CanonicalField {
    /// Initialize a mid-gray, near-transparent field. The box must contain
    /// the body bounds with at least a 10% margin per axis (5% each side).
    pub fn init(config: &FieldConfig, body_bounds: Aabb) -> Result<Self> {
        if config.resolution.iter().any(|&r| r < 8) {
            return Err(Error::config(format!(
                "field resolution must be >= 8 per axis, got {:?}",
                config.resolution
            )));
        }
        let ext = body_bounds.extent();
        for axis in 0..3 {
            let margin = 0.05 * ext.to_array()[axis];
            let lo_ok = config.bbox.min.to_array()[axis] <= body_bounds.min.to_array()[axis] - margin;
            let hi_ok = config.bbox.max.to_array()[axis] >= body_bounds.max.to_array()[axis] + margin;
            if !lo_ok || !hi_ok {
                return Err(Error::config(format!(
                    "field box {:?}..{:?} does not contain the body {:?}..{:?} with 10% margin",
                    config.bbox.min, config.bbox.max, body_bounds.min, body_bounds.max
                )));
            }
        }
        let n = config.resolution.iter().product::<usize>();
        Ok(CanonicalField {
            resolution: config.resolution,
            bbox: config.bbox,
            color: Tensor::full(n, 3, INIT_COLOR_PRE),
            density: Tensor::full(n, 1, INIT_DENSITY_PRE),
        })
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn color_geom(&self) -> GridGeom {
        self.geom(3)
    }

    pub fn density_geom(&self) -> GridGeom {
        self.geom(1)
    }

    fn geom(&self, channels: usize) -> GridGeom {
        GridGeom {
            nx: self.resolution[0],
            ny: self.resolution[1],
            nz: self.resolution[2],
            channels,
            box_min: self.bbox.min.to_array(),
            box_max: self.bbox.max.to_array(),
        }
    }

    pub fn color(&self) -> &Tensor {
        &self.color
    }

    pub fn density(&self) -> &Tensor {
        &self.density
    }

    pub fn color_mut(&mut self) -> &mut [f64] {
        self.color.make_mut()
    }

    pub fn density_mut(&mut self) -> &mut [f64] {
        self.density.make_mut()
    }

    /// Center of voxel (i,j,k).
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let cell = self.color_geom().cell();
        self.bbox.min
            + Vec3::new(
                (i as f64 + 0.5) * cell[0],
                (j as f64 + 0.5) * cell[1],
                (k as f64 + 0.5) * cell[2],
            )
    }

    /// Activated color and density at a canonical point. Outside the box:
    /// black and zero density.
    pub fn query(&self, p: Vec3) -> ([f64; 3], f64) {
        let (pre_c, pre_d, inside) = self.query_pre(p);
        if !inside {
            return ([0.0, 0.0, 0.0], 0.0);
        }
        (
            [sigmoid(pre_c[0]), sigmoid(pre_c[1]), sigmoid(pre_c[2])],
            softplus(pre_d),
        )
    }

    /// Raw interpolated pre-activations plus the inside-box flag.
    pub fn query_pre(&self, p: Vec3) -> ([f64; 3], f64, bool) {
        let pa = p.to_array();
        if !self.bbox.contains(p) {
            return ([0.0; 3], 0.0, false);
        }
        let mut c = [0.0; 3];
        trilinear_sample(&self.color_geom(), self.color.data(), pa, &mut c);
        let mut d = [0.0];
        trilinear_sample(&self.density_geom(), self.density.data(), pa, &mut d);
        (c, d[0], true)
    }

    /// Overwrite every voxel from a painter of pre-activation values at the
    /// voxel center. Used to build ground-truth appearance.
    pub fn paint(&mut self, f: impl Fn(Vec3) -> ([f64; 3], f64)) {
        let [nx, ny, nz] = self.resolution;
        let mut color = vec![0.0; self.voxel_count() * 3];
        let mut density = vec![0.0; self.voxel_count()];
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let (c, d) = f(self.voxel_center(i, j, k));
                    let flat = (i * ny + j) * nz + k;
                    color[flat * 3..flat * 3 + 3].copy_from_slice(&c);
                    density[flat] = d;
                }
            }
        }
        self.color = Tensor::from_vec(self.voxel_count(), 3, color);
        self.density = Tensor::from_vec(self.voxel_count(), 1, density);
    }

    /// Checkpoint: one ASCII header line (kind, version, resolution, box),
    /// then color and density pre-activations as little-endian f32,
    /// row-major in (x, y, z, channel) order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let b = self.bbox;
        out.extend_from_slice(
            format!(
                "blurman-field 1 {} {} {} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\n",
                self.resolution[0],
                self.resolution[1],
                self.resolution[2],
                b.min.x,
                b.min.y,
                b.min.z,
                b.max.x,
                b.max.y,
                b.max.z
            )
            .as_bytes(),
        );
        for &v in self.color.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in self.density.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let header_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::data("field checkpoint: missing header"))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::data("field checkpoint: bad header encoding"))?;
        let tok: Vec<&str> = header.split_whitespace().collect();
        if tok.len() != 11 || tok[0] != "blurman-field" || tok[1] != "1" {
            return Err(Error::data(format!("field checkpoint: bad header `{header}`")));
        }
        let parse_u = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::data("field checkpoint: bad integer"))
        };
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::data("field checkpoint: bad float"))
        };
        let resolution = [parse_u(tok[2])?, parse_u(tok[3])?, parse_u(tok[4])?];
        let bbox = Aabb::new(
            Vec3::new(parse_f(tok[5])?, parse_f(tok[6])?, parse_f(tok[7])?),
            Vec3::new(parse_f(tok[8])?, parse_f(tok[9])?, parse_f(tok[10])?),
        );
        let n: usize = resolution.iter().product();
        let payload = &bytes[header_end + 1..];
        let expected = (n * 3 + n) * 4;
        if payload.len() != expected {
            return Err(Error::data(format!(
                "field checkpoint: expected {expected} payload bytes, got {}",
                payload.len()
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let color: Vec<f64> = floats.by_ref().take(n * 3).collect();
        let density: Vec<f64> = floats.collect();
        Ok(CanonicalField {
            resolution,
            bbox,
            color: Tensor::from_vec(n, 3, color),
            density: Tensor::from_vec(n, 1, density),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Var};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn unit_box() -> Aabb {
        Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0))
    }

    fn small_field() -> CanonicalField {
        let cfg = FieldConfig { resolution: [8, 8, 8], bbox: unit_box() };
        let body = Aabb::new(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5));
        CanonicalField::init(&cfg, body).unwrap()
    }

    #[test]
    fn default_init_is_mid_gray_and_near_transparent() {
        let f = small_field();
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..100 {
            let p = Vec3::new(
                rng.gen_range(-0.99..0.99),
                rng.gen_range(-0.99..0.99),
                rng.gen_range(-0.99..0.99),
            );
            let (c, d) = f.query(p);
            assert_eq!(c, [0.5, 0.5, 0.5]);
            assert!(d < 0.1, "initial density {d} too high");
        }
    }

    #[test]
    fn low_resolution_is_config_error() {
        let cfg = FieldConfig { resolution: [4, 8, 8], bbox: unit_box() };
        let body = Aabb::new(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5));
        assert!(matches!(
            CanonicalField::init(&cfg, body),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn box_without_margin_is_config_error() {
        let cfg = FieldConfig { resolution: [8, 8, 8], bbox: unit_box() };
        let body = unit_box(); // no margin at all
        assert!(CanonicalField::init(&cfg, body).is_err());
    }

    #[test]
    fn query_at_voxel_center_returns_that_voxel() {
        let mut f = small_field();
        let target = f.voxel_center(3, 4, 5);
        f.paint(|p| {
            if (p - target).norm() < 1e-9 {
                ([0.7, -0.2, 1.1], 0.4)
            } else {
                ([0.0, 0.0, 0.0], -1.0)
            }
        });
        let (c, d) = f.query(target);
        assert!((c[0] - sigmoid(0.7)).abs() < 1e-12);
        assert!((c[1] - sigmoid(-0.2)).abs() < 1e-12);
        assert!((c[2] - sigmoid(1.1)).abs() < 1e-12);
        assert!((d - softplus(0.4)).abs() < 1e-12);
    }

    #[test]
    fn query_outside_box_is_transparent_black() {
        let f = small_field();
        let (c, d) = f.query(Vec3::new(1.5, 0.0, 0.0));
        assert_eq!(c, [0.0, 0.0, 0.0]);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn cell_midpoint_matches_eight_corner_oracle() {
        let mut f = small_field();
        let mut rng = StdRng::seed_from_u64(2);
        let vals: Vec<f64> = (0..f.voxel_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Paint density from a deterministic pseudo-random pattern.
        let geom = f.density_geom();
        let cell = geom.cell();
        let vals2 = vals.clone();
        f.paint(move |p| {
            let i = ((p.x - geom.box_min[0]) / cell[0]) as usize;
            let j = ((p.y - geom.box_min[1]) / cell[1]) as usize;
            let k = ((p.z - geom.box_min[2]) / cell[2]) as usize;
            let flat = (i * geom.ny + j) * geom.nz + k;
            ([0.0; 3], vals2[flat])
        });
        // Midpoint of the cell spanned by voxel centers (2..3, 2..3, 2..3).
        let mid = (f.voxel_center(2, 2, 2) + f.voxel_center(3, 3, 3)) * 0.5;
        let (_, pre_d, inside) = f.query_pre(mid);
        assert!(inside);
        let mut oracle = 0.0;
        for di in 0..2 {
            for dj in 0..2 {
                for dk in 0..2 {
                    let flat = ((2 + di) * 8 + (2 + dj)) * 8 + (2 + dk);
                    oracle += vals[flat] / 8.0;
                }
            }
        }
        assert!((pre_d - oracle).abs() < 1e-9, "{pre_d} vs oracle {oracle}");
        let (_, d) = f.query(mid);
        assert!((d - softplus(oracle)).abs() < 1e-12);
    }

    #[test]
    fn query_is_continuous_under_tiny_perturbations() {
        let mut f = small_field();
        let mut rng = StdRng::seed_from_u64(3);
        f.paint(|p| ([p.x, p.y * 2.0, p.z], p.x + p.y - p.z));
        for _ in 0..200 {
            let p = Vec3::new(
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
            );
            let q = p + Vec3::new(1e-6, -1e-6, 1e-6);
            let (c0, d0) = f.query(p);
            let (c1, d1) = f.query(q);
            assert!((d0 - d1).abs() < 1e-3);
            for ch in 0..3 {
                assert!((c0[ch] - c1[ch]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn gather_gradient_hits_exactly_the_eight_enclosing_voxels() {
        let f = small_field();
        let geom = f.density_geom();
        // Interior point well away from any voxel-center plane.
        let p = (f.voxel_center(2, 3, 4) + f.voxel_center(3, 4, 5) * 2.0) / 3.0;
        let mut tape = Tape::new();
        let vox = tape.leaf(f.density().clone());
        let coords = tape.constant(Tensor::from_vec(1, 3, p.to_array().to_vec()));
        let g = tape.trilinear_gather(vox, coords, geom);
        let out = tape.sum(g);
        let grads = tape.backward(out).unwrap();
        let gv = grads.tensor(vox);
        let mut nonzero = Vec::new();
        for i in 0..gv.len() {
            if gv.data()[i] != 0.0 {
                nonzero.push(i);
            }
        }
        assert_eq!(nonzero.len(), 8, "exactly the 8 corners get gradient");
        let expected: Vec<usize> = (0..8)
            .map(|k| ((2 + (k >> 2)) * 8 + (3 + (k >> 1 & 1))) * 8 + (4 + (k & 1)))
            .collect();
        let mut sorted = nonzero.clone();
        sorted.sort_unstable();
        let mut exp_sorted = expected;
        exp_sorted.sort_unstable();
        assert_eq!(sorted, exp_sorted);

        // And the weights against finite differences of the plain query.
        let h = 1e-6;
        for &flat in &sorted {
            let mut up = f.clone();
            up.density_mut()[flat] += h;
            let mut dn = f.clone();
            dn.density_mut()[flat] -= h;
            let fd = (up.query_pre(p).1 - dn.query_pre(p).1) / (2.0 * h);
            let a = gv.data()[flat];
            assert!(
                (a - fd).abs() / (a.abs() + 1e-8) < 1e-5,
                "voxel {flat}: analytic {a} fd {fd}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_f32_values() {
        let mut f = small_field();
        f.paint(|p| ([p.x * 0.3, -p.y, 0.7 * p.z], p.x - 0.2));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ckpt");
        f.save(&path).unwrap();
        let g = CanonicalField::load(&path).unwrap();
        assert_eq!(g.resolution(), f.resolution());
        assert!((g.bbox().min - f.bbox().min).norm() < 1e-15);
        for (a, b) in f.color.data().iter().zip(g.color.data().iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        // Saving the loaded field again is byte-identical.
        let path2 = dir.path().join("field2.ckpt");
        g.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    /// Var is exported through this module's tests to keep the import used.
    #[allow(dead_code)]
    fn _touch(_: Var) {}
}
