//! Taped twin of the forward renderer: the same sampling and compositing
//! math recorded on a tape so losses can differentiate through field voxels
//! and pose parameters.
//!
//! The plain path in `render` stays the source of truth for values; a test
//! here pins both paths together to 1e-9.

use crate::autodiff::{Tape, Tensor, Var};
use crate::body::{deform_points_tape, softmax_shifts, CapsuleBody, Pose, TapeBones};
use crate::camera::Camera;
use crate::error::Result;
use crate::field::CanonicalField;
use crate::math::{Aabb, Vec3};
use crate::render::{sample_depths, JitterStream};

/// Field parameter leaves on a tape.
pub struct FieldVars {
    pub color: Var,
    pub density: Var,
}

pub fn field_leaves(tape: &mut Tape, field: &CanonicalField) -> FieldVars {
    FieldVars {
        color: tape.leaf(field.color().clone()),
        density: tape.leaf(field.density().clone()),
    }
}

/// One pixel's ray prepared for a taped render.
struct HitRay {
    pixel_index: usize,
    origin: Vec3,
    dir: Vec3,
    ts: Vec<f64>,
    deltas: Vec<f64>,
}

/// Composited color and alpha for the subset of requested pixels whose rays
/// hit the world box.
pub struct TapeRender {
    /// [m,3] rgb per hit ray.
    pub color: Var,
    /// [m,1] alpha per hit ray.
    pub alpha: Var,
    /// Indices into the requested pixel list, in order.
    pub hits: Vec<usize>,
    /// Observation-space sample points, sample-major ([P*m, 3] order).
    pub points: Vec<Vec3>,
    pub samples_per_ray: usize,
}

/// Build the taped render for a set of pixels at one timestamp.
///
/// `pose_plain` must hold the same values as the pose feeding `bones`; it is
/// used for the detached softmax shifts and the inside-box activation masks.
/// `depth_seeds` gives each pixel its deterministic jitter stream (None for
/// midpoint sampling).
#[allow(clippy::too_many_arguments)]
pub fn render_rays_tape(
    tape: &mut Tape,
    field: &CanonicalField,
    fvars: &FieldVars,
    body: &CapsuleBody,
    bones: &TapeBones,
    pose_plain: &Pose,
    camera: &Camera,
    world_box: Aabb,
    samples_per_ray: usize,
    pixels: &[(usize, usize)],
    depth_seeds: Option<&[u64]>,
) -> Result<Option<TapeRender>> {
    let mut rays: Vec<HitRay> = Vec::new();
    for (i, &pixel) in pixels.iter().enumerate() {
        let ray = camera.generate_ray(pixel, (0.5, 0.5))?;
        let Some((t0, t1)) = world_box.ray_intersect(ray.origin, ray.dir) else {
            continue;
        };
        let near = t0.max(ray.near).max(1e-4);
        let far = t1.min(ray.far);
        if near >= far {
            continue;
        }
        let mut stream = depth_seeds.map(|s| JitterStream(s[i]));
        let sampled = sample_depths(near, far, samples_per_ray, stream.as_mut());
        rays.push(HitRay {
            pixel_index: i,
            origin: ray.origin,
            dir: ray.dir,
            ts: sampled.ts,
            deltas: sampled.deltas,
        });
    }
    let m = rays.len();
    if m == 0 {
        return Ok(None);
    }
    let p = samples_per_ray;

    // Sample-major point layout: rows [i*m + r] for step i, ray r.
    let mut points = Vec::with_capacity(p * m);
    let mut deltas = vec![0.0; p * m];
    for i in 0..p {
        for (r, ray) in rays.iter().enumerate() {
            points.push(ray.origin + ray.dir * ray.ts[i]);
            deltas[i * m + r] = ray.deltas[i];
        }
    }

    // Detached helpers from the plain path: softmax shifts and box masks.
    let transforms = body.bone_transforms_for_pose(pose_plain)?;
    let shifts = softmax_shifts(body, &points, &transforms);
    let canonical_plain = body.deform_points(&points, &transforms);
    let bbox = field.bbox();
    let mask: Vec<f64> = canonical_plain
        .iter()
        .map(|&q| if bbox.contains(q) { 1.0 } else { 0.0 })
        .collect();

    let flat: Vec<f64> = points.iter().flat_map(|q| q.to_array()).collect();
    let points_var = tape.constant(Tensor::from_vec(p * m, 3, flat));
    let coords = deform_points_tape(tape, bones, points_var, &shifts);

    let color_pre = tape.trilinear_gather(fvars.color, coords, field.color_geom());
    let density_pre = tape.trilinear_gather(fvars.density, coords, field.density_geom());

    // Activations gated by the inside-box mask so outside points are black
    // and transparent rather than sigmoid(0)/softplus(0).
    let mask1 = tape.constant(Tensor::col(&mask));
    let mask3 = {
        let mut m3 = Vec::with_capacity(mask.len() * 3);
        for &v in &mask {
            m3.extend_from_slice(&[v, v, v]);
        }
        tape.constant(Tensor::from_vec(mask.len(), 3, m3))
    };
    let color_act = tape.sigmoid(color_pre);
    let color_all = tape.mul(color_act, mask3);
    let sigma_act = tape.softplus(density_pre);
    let sigma_all = tape.mul(sigma_act, mask1);

    let (color, alpha) = composite_tape(tape, color_all, sigma_all, &deltas, m, p);
    Ok(Some(TapeRender {
        color,
        alpha,
        hits: rays.iter().map(|r| r.pixel_index).collect(),
        points,
        samples_per_ray: p,
    }))
}

/// Alpha-composite sample-major color [P*m,3] and density [P*m,1] tensors
/// into per-ray color [m,3] and alpha [m,1].
pub fn composite_tape(
    tape: &mut Tape,
    colors: Var,
    sigmas: Var,
    deltas: &[f64],
    rays: usize,
    steps: usize,
) -> (Var, Var) {
    assert_eq!(colors.rows(), rays * steps);
    assert_eq!(sigmas.rows(), rays * steps);
    assert_eq!(deltas.len(), rays * steps);
    let mut trans = tape.constant(Tensor::full(rays, 1, 1.0));
    let mut color_acc = tape.constant(Tensor::zeros(rays, 3));
    let mut alpha_acc = tape.constant(Tensor::zeros(rays, 1));
    for i in 0..steps {
        let sigma_i = tape.slice_rows(sigmas, i * rays, rays);
        let color_i = tape.slice_rows(colors, i * rays, rays);
        let neg_delta = tape.constant(Tensor::col(
            &deltas[i * rays..(i + 1) * rays]
                .iter()
                .map(|d| -d)
                .collect::<Vec<_>>(),
        ));
        let exponent = tape.mul(sigma_i, neg_delta);
        let keep = tape.exp(exponent); // 1 - alpha_i
        let alpha_i = tape.one_minus(keep);
        let w = tape.mul(trans, alpha_i);
        let w3 = tape.repeat_cols(w, 3);
        let contrib = tape.mul(w3, color_i);
        color_acc = tape.add(color_acc, contrib);
        alpha_acc = tape.add(alpha_acc, w);
        trans = tape.mul(trans, keep);
    }
    (color_acc, alpha_acc)
}

/// Taped velocity scores for observation points: finite-difference canonical
/// velocity between two posed bone sets, tangentially projected against
/// detached normals, then the floor-plus-softplus transform. Rows where
/// `normals` is flagged degenerate keep the unprojected magnitude.
#[allow(clippy::too_many_arguments)]
pub fn velocity_scores_tape(
    tape: &mut Tape,
    bones_t: &TapeBones,
    bones_next: &TapeBones,
    points_var: Var,
    shifts_t: &[f64],
    shifts_next: &[f64],
    normals: &[(Vec3, bool)],
    dt: f64,
    v0: f64,
) -> Var {
    let n = points_var.rows();
    assert_eq!(normals.len(), n);
    let a = deform_points_tape(tape, bones_t, points_var, shifts_t);
    let b = deform_points_tape(tape, bones_next, points_var, shifts_next);
    let diff = tape.sub(b, a);
    let vel = tape.scale(diff, 1.0 / dt);
    // Zero out the normal for degenerate rows: projection becomes identity.
    let nflat: Vec<f64> = normals
        .iter()
        .flat_map(|(nv, degenerate)| {
            if *degenerate {
                [0.0, 0.0, 0.0]
            } else {
                nv.to_array()
            }
        })
        .collect();
    let n_const = tape.constant(Tensor::from_vec(n, 3, nflat));
    let dots_elem = tape.mul(vel, n_const);
    let dots = tape.row_sum(dots_elem);
    let dots3 = tape.repeat_cols(dots, 3);
    let normal_part = tape.mul(dots3, n_const);
    let tangential = tape.sub(vel, normal_part);
    let speed = tape.row_norm(tangential);
    let sp = tape.softplus(speed);
    tape.add_scalar(sp, v0)
}
