//! Joint-angle sampling and forward kinematics.

use rand::Rng;

use crate::skeleton::KinematicLayout;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

pub fn rot_x(rad: f64) -> Mat3 {
    let (s, c) = rad.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(rad: f64) -> Mat3 {
    let (s, c) = rad.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(rad: f64) -> Mat3 {
    let (s, c) = rad.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// `Rz(z) * Ry(y) * Rx(x)` for angles in degrees.
pub fn euler_deg(angles: &Vec3) -> Mat3 {
    let [x, y, z] = angles.map(f64::to_radians);
    mat_mul(&rot_z(z), &mat_mul(&rot_y(y), &rot_x(x)))
}

/// Joint positions, root at the origin. `angles[j]` rotates the segment
/// ending at joint `j` relative to its parent segment.
pub fn forward_kinematics(skeleton: &KinematicLayout, angles: &[Vec3]) -> Vec<Vec3> {
    let n = skeleton.num_joints();
    assert_eq!(angles.len(), n, "one angle triple per joint");
    let mut global = vec![IDENTITY; n];
    let mut pos = vec![[0.0; 3]; n];
    global[0] = euler_deg(&angles[0]);
    for j in 1..n {
        let p = skeleton.parents[j].expect("non-root joint has a parent");
        global[j] = mat_mul(&global[p], &euler_deg(&angles[j]));
        let d = mat_vec(&global[j], &skeleton.offsets[j]);
        pos[j] = [pos[p][0] + d[0], pos[p][1] + d[1], pos[p][2] + d[2]];
    }
    pos
}

/// Uniform draw of every angle within its limits.
pub fn sample_angles<R: Rng + ?Sized>(rng: &mut R, skeleton: &KinematicLayout) -> Vec<Vec3> {
    skeleton
        .angle_limits_deg
        .iter()
        .map(|lim| {
            lim.map(|[lo, hi]| if hi > lo { rng.random_range(lo..=hi) } else { lo })
        })
        .collect()
}

/// A root-centered pose with joint angles inside the layout's limits.
pub fn sample_pose3d<R: Rng + ?Sized>(rng: &mut R, skeleton: &KinematicLayout) -> Vec<Vec3> {
    let angles = sample_angles(rng, skeleton);
    forward_kinematics(skeleton, &angles)
}

pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Angle in degrees between segments `a->b` and `b->c`; 0 when straight.
pub fn bend_deg(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - b[0], c[1] - b[1], c[2] - b[2]];
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (dot / (nu * nv)).clamp(-1.0, 1.0).acos().to_degrees()
}
