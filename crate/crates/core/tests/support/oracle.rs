//! Brute-force per-pixel splatting: every Gaussian, every pixel, no tiles,
//! no early termination.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use scene4d_core::scene::{Camera, Gaussian3D};

pub struct OracleImage {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub rgb: Vec<f64>,
    pub feature: Vec<f64>,
    pub alpha: Vec<f64>,
    pub weight_sum: Vec<f64>,
}

struct Footprint {
    index: usize,
    depth: f64,
    mean: Vector2<f64>,
    cov: Matrix2<f64>,
}

fn rot(q: [f64; 4]) -> Matrix3<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

fn footprint(index: usize, g: &Gaussian3D, cam: &Camera) -> Option<Footprint> {
    let r = rot(cam.world_to_camera.q);
    let t = Vector3::from(cam.world_to_camera.t);
    let p = r * Vector3::from(g.mean) + t;
    if p.z <= 0.01 {
        return None;
    }
    let k = &cam.intrinsics;
    let rg = rot(g.rotation);
    let s = Matrix3::from_diagonal(&Vector3::from(g.scale).component_mul(&Vector3::from(g.scale)));
    let sigma = r * rg * s * rg.transpose() * r.transpose();
    let j = Matrix2x3::new(
        k.fx / p.z,
        0.0,
        -k.fx * p.x / (p.z * p.z),
        0.0,
        k.fy / p.z,
        -k.fy * p.y / (p.z * p.z),
    );
    let cov = j * sigma * j.transpose() + Matrix2::identity() * 0.1;
    Some(Footprint {
        index,
        depth: p.z,
        mean: Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy),
        cov,
    })
}

pub fn render(gaussians: &[Gaussian3D], background: [f64; 3], dim: usize, cam: &Camera) -> OracleImage {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let mut fps: Vec<Footprint> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| footprint(i, g, cam))
        .collect();
    fps.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    let mut img = OracleImage {
        width: w,
        height: h,
        dim,
        rgb: vec![0.0; w * h * 3],
        feature: vec![0.0; w * h * dim],
        alpha: vec![0.0; w * h],
        weight_sum: vec![0.0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let pix = y * w + x;
            let mut trans = 1.0;
            for fp in &fps {
                let d = px - fp.mean;
                let (sx, sy) = (3.0 * fp.cov[(0, 0)].sqrt(), 3.0 * fp.cov[(1, 1)].sqrt());
                if d.x.abs() > sx || d.y.abs() > sy {
                    continue;
                }
                let inv = fp.cov.try_inverse().unwrap();
                let a = gaussians[fp.index].opacity * (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp();
                let wgt = a * trans;
                let g = &gaussians[fp.index];
                for c in 0..3 {
                    img.rgb[3 * pix + c] += wgt * g.color[c];
                }
                for c in 0..dim {
                    img.feature[dim * pix + c] += wgt * g.feature[c];
                }
                img.weight_sum[pix] += wgt;
                trans *= 1.0 - a;
            }
            for (c, b) in background.iter().enumerate() {
                img.rgb[3 * pix + c] += trans * b;
            }
            img.alpha[pix] = 1.0 - trans;
        }
    }
    img
}
