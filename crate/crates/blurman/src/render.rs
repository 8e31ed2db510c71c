//! Forward volume rendering: stratified sampling, alpha compositing, and
//! whole-image rendering of color / alpha / velocity planes.
//!
//! This is the plain (gradient-free) path used for data synthesis,
//! evaluation, and the detached velocity maps consumed by the losses. The
//! taped twin lives in `render_tape`; a unit test pins the two together.

use rayon::prelude::*;

use crate::body::{BoneTransforms, CapsuleBody};
use crate::camera::{Camera, Ray};
use crate::error::{Error, Result};
use crate::field::CanonicalField;
use crate::math::{splitmix64, Aabb, Vec3};
use crate::velocity::{point_blur_score, VelocityConfig};

/// Minimum ray parameter so samples never start exactly at the camera.
const NEAR_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub alpha: f64,
    pub velocity: f64,
    /// Transmittance ahead of each sample, for diagnostics.
    pub transmittances: Vec<f64>,
}

/// Stratified sample positions and segment lengths along [near, far].
pub struct SampledRay {
    pub ts: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Tiny deterministic stream for per-ray depth jitter.
#[derive(Clone, Copy)]
pub struct JitterStream(pub u64);

impl JitterStream {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = splitmix64(self.0);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Stratified sampling: one sample per equal bin, at the bin midpoint when no
/// jitter stream is given. The last delta closes the interval at `far`.
pub fn sample_depths(near: f64, far: f64, count: usize, jitter: Option<&mut JitterStream>) -> SampledRay {
    assert!(count >= 2, "need at least two samples per ray");
    assert!(near < far, "empty sample interval");
    let bin = (far - near) / count as f64;
    let mut ts = Vec::with_capacity(count);
    match jitter {
        None => {
            for i in 0..count {
                ts.push(near + (i as f64 + 0.5) * bin);
            }
        }
        Some(stream) => {
            for i in 0..count {
                ts.push(near + (i as f64 + stream.next_f64()) * bin);
            }
        }
    }
    let mut deltas = Vec::with_capacity(count);
    for i in 0..count - 1 {
        deltas.push(ts[i + 1] - ts[i]);
    }
    deltas.push(far - ts[count - 1]);
    SampledRay { ts, deltas }
}

pub struct CompositeOut {
    pub color: [f64; 3],
    pub alpha: f64,
    /// Composite of the optional extra channel (velocity scores).
    pub extra: f64,
    pub transmittances: Vec<f64>,
}

/// Alpha compositing with the numerically stable product transmittance:
/// alpha_i = 1 - exp(-sigma_i delta_i), T_i = prod_{j<i} (1 - alpha_j).
pub fn composite(
    colors: &[[f64; 3]],
    sigmas: &[f64],
    deltas: &[f64],
    extra: Option<&[f64]>,
) -> Result<CompositeOut> {
    if colors.len() != sigmas.len() || sigmas.len() != deltas.len() {
        return Err(Error::usage("composite inputs must have equal lengths"));
    }
    if sigmas.iter().any(|&s| s < 0.0) {
        return Err(Error::usage("composite requires non-negative densities"));
    }
    let mut t = 1.0f64;
    let mut color = [0.0; 3];
    let mut alpha_acc = 0.0;
    let mut extra_acc = 0.0;
    let mut transmittances = Vec::with_capacity(sigmas.len());
    for i in 0..sigmas.len() {
        transmittances.push(t);
        let keep = (-sigmas[i] * deltas[i]).exp();
        let a = 1.0 - keep;
        let w = t * a;
        for c in 0..3 {
            color[c] += w * colors[i][c];
        }
        alpha_acc += w;
        if let Some(e) = extra {
            extra_acc += w * e[i];
        }
        t *= keep;
    }
    Ok(CompositeOut { color, alpha: alpha_acc, extra: extra_acc, transmittances })
}

/// Flat image planes produced by a full-frame render.
pub struct ImagePlanes {
    pub width: usize,
    pub height: usize,
    /// RGB interleaved, row-major.
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl ImagePlanes {
    pub fn pixel_color(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }

    pub fn pixel_alpha(&self, u: usize, v: usize) -> f64 {
        self.alpha[v * self.width + u]
    }

    pub fn pixel_velocity(&self, u: usize, v: usize) -> f64 {
        self.velocity[v * self.width + u]
    }
}

/// Immutable per-frame state: everything needed to shade one timestamp.
pub struct FrameState<'a> {
    pub transforms: &'a BoneTransforms,
    /// Bone transforms at t + dt; enables the velocity channel.
    pub transforms_next: Option<&'a BoneTransforms>,
}

pub struct Renderer<'a> {
    pub field: &'a CanonicalField,
    pub body: &'a CapsuleBody,
    pub camera: &'a Camera,
    /// World-space bound on the posed body over the whole sequence; rays
    /// missing it are skipped.
    pub world_box: Aabb,
    pub samples_per_ray: usize,
    pub velocity: VelocityConfig,
}

impl Renderer<'_> {
    /// Clip a camera ray against the world box; None if it misses.
    pub fn clip_ray(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (t0, t1) = self.world_box.ray_intersect(ray.origin, ray.dir)?;
        let near = t0.max(ray.near).max(NEAR_EPS);
        let far = t1.min(ray.far);
        if near >= far {
            return None;
        }
        Some((near, far))
    }

    /// Render one pixel. A missing ray produces the empty output (black,
    /// zero alpha, zero velocity).
    pub fn render_pixel(
        &self,
        state: &FrameState,
        pixel: (usize, usize),
        depth_jitter: Option<u64>,
    ) -> Result<RenderOutput> {
        let ray = self.camera.generate_ray(pixel, (0.5, 0.5))?;
        let Some((near, far)) = self.clip_ray(&ray) else {
            return Ok(RenderOutput::default());
        };
        let mut stream = depth_jitter.map(JitterStream);
        let sampled = sample_depths(near, far, self.samples_per_ray, stream.as_mut());
        let xs: Vec<Vec3> = sampled.ts.iter().map(|&t| ray.origin + ray.dir * t).collect();
        let canonical = self.body.deform_points(&xs, state.transforms);

        let mut colors = Vec::with_capacity(xs.len());
        let mut sigmas = Vec::with_capacity(xs.len());
        for p in &canonical {
            let (c, d) = self.field.query(*p);
            colors.push(c);
            sigmas.push(d);
        }
        let scores: Option<Vec<f64>> = state.transforms_next.map(|next| {
            xs.iter()
                .zip(canonical.iter())
                .map(|(&x, &xh)| point_blur_score(self.body, x, xh, next, &self.velocity))
                .collect()
        });
        let out = composite(&colors, &sigmas, &sampled.deltas, scores.as_deref())?;
        Ok(RenderOutput {
            color: out.color,
            alpha: out.alpha,
            velocity: out.extra,
            transmittances: out.transmittances,
        })
    }

    /// Render the full frame in parallel. Deterministic: each pixel derives
    /// its jitter stream from (seed, pixel index) alone.
    pub fn render_image(&self, state: &FrameState, depth_seed: Option<u64>) -> Result<ImagePlanes> {
        let (w, h) = (self.camera.width, self.camera.height);
        let rows: Vec<Vec<RenderOutput>> = (0..h)
            .into_par_iter()
            .map(|v| {
                (0..w)
                    .map(|u| {
                        let jitter = depth_seed
                            .map(|s| splitmix64(s ^ ((v * w + u) as u64).wrapping_mul(0x9e37)));
                        self.render_pixel(state, (u, v), jitter)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut planes = ImagePlanes {
            width: w,
            height: h,
            color: vec![0.0; w * h * 3],
            alpha: vec![0.0; w * h],
            velocity: vec![0.0; w * h],
        };
        for (v, row) in rows.into_iter().enumerate() {
            for (u, out) in row.into_iter().enumerate() {
                let i = v * w + u;
                planes.color[i * 3..i * 3 + 3].copy_from_slice(&out.color);
                planes.alpha[i] = out.alpha;
                planes.velocity[i] = out.velocity;
            }
        }
        Ok(planes)
    }

    /// Dominant bone per pixel (weighted by compositing weights), or None
    /// where the surface coverage is below the alpha threshold. Used to build
    /// body-part masks for diagnostics and tests.
    pub fn render_bone_map(
        &self,
        state: &FrameState,
        alpha_threshold: f64,
    ) -> Result<Vec<Option<usize>>> {
        let (w, h) = (self.camera.width, self.camera.height);
        let bones = self.body.skeleton().bone_count();
        (0..h * w)
            .into_par_iter()
            .map(|i| {
                let (u, v) = (i % w, i / w);
                let ray = self.camera.generate_ray((u, v), (0.5, 0.5))?;
                let Some((near, far)) = self.clip_ray(&ray) else {
                    return Ok(None);
                };
                let sampled = sample_depths(near, far, self.samples_per_ray, None);
                let xs: Vec<Vec3> =
                    sampled.ts.iter().map(|&t| ray.origin + ray.dir * t).collect();
                let mut acc = vec![0.0f64; bones];
                let mut t = 1.0f64;
                let mut alpha_acc = 0.0;
                for (k, &x) in xs.iter().enumerate() {
                    let xh = self.body.deform_to_canonical(x, state.transforms);
                    let (_, sigma) = self.field.query(xh);
                    let keep = (-sigma * sampled.deltas[k]).exp();
                    let wgt = t * (1.0 - keep);
                    if wgt > 0.0 {
                        let weights = self.body.skinning_weights(x, state.transforms);
                        for b in 0..bones {
                            acc[b] += wgt * weights[b];
                        }
                        alpha_acc += wgt;
                    }
                    t *= keep;
                }
                if alpha_acc < alpha_threshold {
                    return Ok(None);
                }
                let best = acc
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(b, _)| b);
                Ok(best)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{Joint, Pose, Skeleton};
    use crate::field::{CanonicalField, FieldConfig};

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn stratified_midpoints_without_jitter() {
        let s = sample_depths(0.0, 1.0, 2, None);
        assert_eq!(s.ts, vec![0.25, 0.75]);
        assert_eq!(s.deltas, vec![0.5, 0.25]);
    }

    #[test]
    fn stratified_depths_increase_and_deltas_partition() {
        let mut stream = JitterStream(99);
        let s = sample_depths(1.0, 3.0, 16, Some(&mut stream));
        for w in s.ts.windows(2) {
            assert!(w[1] > w[0], "depths strictly increasing");
        }
        let total: f64 = s.deltas.iter().sum();
        assert!(total <= 2.0 + 1e-12, "deltas bounded by the interval");
        assert!(s.ts.iter().all(|&t| (1.0..=3.0).contains(&t)));
    }

    #[test]
    fn opaque_sample_dominates_composite() {
        let out = composite(&[[1.0, 0.25, 0.5]], &[500.0], &[0.1], None).unwrap();
        assert!(approx(out.color[0], 1.0, 1e-9));
        assert!(approx(out.color[1], 0.25, 1e-9));
        assert!(approx(out.color[2], 0.5, 1e-9));
        assert!(approx(out.alpha, 1.0, 1e-9));
    }

    #[test]
    fn empty_space_composites_to_black() {
        let colors = [[0.3, 0.4, 0.5]; 8];
        let sigmas = [0.0; 8];
        let deltas = [0.1; 8];
        let out = composite(&colors, &sigmas, &deltas, None).unwrap();
        assert_eq!(out.color, [0.0, 0.0, 0.0]);
        assert_eq!(out.alpha, 0.0);
        assert!(out.transmittances.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn two_sample_composite_matches_closed_form() {
        let colors = [[0.8, 0.1, 0.3], [0.2, 0.9, 0.5]];
        let sigmas = [1.3, 2.7];
        let deltas = [0.35, 0.6];
        let out = composite(&colors, &sigmas, &deltas, None).unwrap();
        let a1 = 1.0 - (-sigmas[0] * deltas[0]).exp();
        let a2 = 1.0 - (-sigmas[1] * deltas[1]).exp();
        for c in 0..3 {
            let expect = a1 * colors[0][c] + (1.0 - a1) * a2 * colors[1][c];
            assert!(approx(out.color[c], expect, 1e-12));
        }
        assert!(approx(out.alpha, a1 + (1.0 - a1) * a2, 1e-12));
    }

    #[test]
    fn negative_density_is_usage_error() {
        assert!(composite(&[[0.0; 3]], &[-1.0], &[0.1], None).is_err());
        assert!(composite(&[[0.0; 3]], &[1.0], &[0.1, 0.2], None).is_err());
    }

    #[test]
    fn transmittance_is_non_increasing() {
        let colors = [[0.5; 3]; 32];
        let sigmas: Vec<f64> = (0..32).map(|i| (i % 5) as f64 * 0.7).collect();
        let deltas = [0.05; 32];
        let out = composite(&colors, &sigmas, &deltas, None).unwrap();
        for w in out.transmittances.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
        assert!(out.alpha >= 0.0 && out.alpha <= 1.0);
    }

    fn opaque_capsule_scene() -> (CapsuleBody, CanonicalField, Camera, Aabb) {
        // Vertical capsule at the origin, solid interior.
        let joints = vec![
            Joint { parent: None, offset: Vec3::new(0.0, -0.4, 0.0) },
            Joint { parent: Some(0), offset: Vec3::new(0.0, 0.8, 0.0) },
        ];
        let body = CapsuleBody::new(Skeleton::new(joints, vec![0.15]).unwrap());
        let bounds = body.canonical_bounds();
        let cfg = FieldConfig {
            resolution: [32, 32, 32],
            bbox: bounds.inflated(0.3),
        };
        let mut field = CanonicalField::init(&cfg, bounds).unwrap();
        let b2 = body.clone();
        field.paint(move |p| {
            if b2.capsule_distance(p) < 0.0 {
                ([0.8, -0.3, 0.1], 50.0)
            } else {
                ([0.0; 3], -12.0)
            }
        });
        let camera = Camera::frontal(48, 48, 70.0, 3.0);
        let world_box = bounds.inflated(0.4);
        (body, field, camera, world_box)
    }

    #[test]
    fn static_pose_velocity_is_floor_plus_log2() {
        let (body, field, camera, world_box) = opaque_capsule_scene();
        let vel = VelocityConfig::new(1.0 / 240.0, 0.1).unwrap();
        let renderer = Renderer {
            field: &field,
            body: &body,
            camera: &camera,
            world_box,
            samples_per_ray: 64,
            velocity: vel,
        };
        let pose = Pose::identity(2);
        let bt = body.bone_transforms_for_pose(&pose).unwrap();
        let state = FrameState { transforms: &bt, transforms_next: Some(&bt) };
        // Center pixel looks straight through the capsule.
        let out = renderer.render_pixel(&state, (24, 24), None).unwrap();
        assert!(out.alpha > 0.999, "alpha {} not opaque", out.alpha);
        let expect = vel.static_score();
        assert!(
            (out.velocity - expect).abs() < 1e-3,
            "velocity {} vs {expect}",
            out.velocity
        );
    }

    #[test]
    fn ray_missing_the_body_box_is_empty() {
        let (body, field, camera, world_box) = opaque_capsule_scene();
        let renderer = Renderer {
            field: &field,
            body: &body,
            camera: &camera,
            world_box,
            samples_per_ray: 32,
            velocity: VelocityConfig::new(0.01, 0.1).unwrap(),
        };
        let pose = Pose::identity(2);
        let bt = body.bone_transforms_for_pose(&pose).unwrap();
        let state = FrameState { transforms: &bt, transforms_next: None };
        let out = renderer.render_pixel(&state, (0, 0), None).unwrap();
        assert_eq!(out.color, [0.0, 0.0, 0.0]);
        assert_eq!(out.alpha, 0.0);
        assert_eq!(out.velocity, 0.0);
        assert!(out.transmittances.is_empty());
    }

    #[test]
    fn color_is_bounded_by_alpha_times_max_sample() {
        let (body, field, camera, world_box) = opaque_capsule_scene();
        let renderer = Renderer {
            field: &field,
            body: &body,
            camera: &camera,
            world_box,
            samples_per_ray: 48,
            velocity: VelocityConfig::new(0.01, 0.1).unwrap(),
        };
        let pose = Pose::identity(2);
        let bt = body.bone_transforms_for_pose(&pose).unwrap();
        let state = FrameState { transforms: &bt, transforms_next: None };
        let planes = renderer.render_image(&state, Some(7)).unwrap();
        for v in 0..48 {
            for u in 0..48 {
                let a = planes.pixel_alpha(u, v);
                assert!((0.0..=1.0 + 1e-12).contains(&a));
                for c in planes.pixel_color(u, v) {
                    // Sample colors are sigmoided, so bounded by 1.
                    assert!(c <= a + 1e-9);
                }
            }
        }
    }

    #[test]
    fn bone_map_marks_capsule_interior() {
        let (body, field, camera, world_box) = opaque_capsule_scene();
        let renderer = Renderer {
            field: &field,
            body: &body,
            camera: &camera,
            world_box,
            samples_per_ray: 48,
            velocity: VelocityConfig::new(0.01, 0.1).unwrap(),
        };
        let pose = Pose::identity(2);
        let bt = body.bone_transforms_for_pose(&pose).unwrap();
        let state = FrameState { transforms: &bt, transforms_next: None };
        let map = renderer.render_bone_map(&state, 0.5).unwrap();
        assert_eq!(map[24 * 48 + 24], Some(0), "center pixel covers bone 0");
        assert_eq!(map[0], None, "corner pixel sees nothing");
    }
}
