//! Pinhole camera and ray generation.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::math::{Mat3, Rigid, Vec3};

#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rigid transform; camera looks along +z.
    pub world_to_cam: Rigid,
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("camera focal lengths must be positive"));
        }
        if self.world_to_cam.rot.orthonormality_defect() > 1e-6 {
            return Err(Error::config("camera rotation is not orthonormal"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("camera image size must be positive"));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        self.world_to_cam.inverse().trans
    }

    /// World-space ray through pixel (u,v) offset by an in-pixel jitter.
    /// Out-of-bounds pixels are a usage error.
    pub fn generate_ray(&self, pixel: (usize, usize), jitter: (f64, f64)) -> Result<Ray> {
        let (u, v) = pixel;
        if u >= self.width || v >= self.height {
            return Err(Error::usage(format!(
                "pixel ({u},{v}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let dir_cam = Vec3::new(
            (u as f64 + jitter.0 - self.cx) / self.fx,
            (v as f64 + jitter.1 - self.cy) / self.fy,
            1.0,
        );
        let cam_to_world = self.world_to_cam.inverse();
        let dir = cam_to_world.rot.mul_vec(dir_cam).normalized();
        Ok(Ray { origin: cam_to_world.trans, dir, near: 1e-4, far: 1e6 })
    }

    /// Project a world point to pixel coordinates; None behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let c = self.world_to_cam.apply(p);
        if c.z <= 0.0 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }

    /// Default frontal view: camera on +z looking back at the origin, image
    /// y running down.
    pub fn frontal(width: usize, height: usize, fx: f64, distance: f64) -> Camera {
        // 180 degree rotation about x: world +y maps to image up, +z to depth.
        let rot = Mat3::from_rows([1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]);
        let pos = Vec3::new(0.0, 0.0, distance);
        let trans = -rot.mul_vec(pos);
        Camera {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_cam: Rigid::new(rot, trans),
        }
    }

    /// Rotate the viewpoint about the world y axis through the origin,
    /// keeping the distance; used for novel-view rendering.
    pub fn orbited(&self, azimuth_rad: f64) -> Camera {
        let spin = crate::math::rotation_from_axis_angle(Vec3::new(0.0, azimuth_rad, 0.0));
        // world_to_cam' = world_to_cam o spin^-1
        let spin_inv = Rigid::new(spin.transpose(), Vec3::ZERO);
        let mut out = self.clone();
        out.world_to_cam = self.world_to_cam.compose(spin_inv);
        out
    }

    pub fn to_config_lines(&self) -> String {
        let r = self.world_to_cam.rot.m;
        let t = self.world_to_cam.trans;
        format!(
            "fx = {:.17e}\nfy = {:.17e}\ncx = {:.17e}\ncy = {:.17e}\nwidth = {}\nheight = {}\nrot = {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\ntrans = {:.17e} {:.17e} {:.17e}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height,
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            t.x, t.y, t.z,
        )
    }

    pub fn from_config(cfg: &Config) -> Result<Camera> {
        let r = cfg.f64s("rot")?;
        if r.len() != 9 {
            return Err(Error::config("camera rot needs 9 values"));
        }
        let t = cfg.vec3("trans")?;
        let cam = Camera {
            fx: cfg.f64("fx")?,
            fy: cfg.f64("fy")?,
            cx: cfg.f64("cx")?,
            cy: cfg.f64("cy")?,
            width: cfg.u64("width")? as usize,
            height: cfg.u64("height")? as usize,
            world_to_cam: Rigid::new(
                Mat3::from_rows([r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]),
                Vec3::from_array(t),
            ),
        };
        cam.validate()?;
        Ok(cam)
    }
}
