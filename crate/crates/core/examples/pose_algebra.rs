//! Relative-pose labels and corrections on a pair of end-effector poses.

use siamese_servo::geometry::*;

fn main() {
    let a = Pose::new(euler_to_quat(EulerAngles::new(2.0, -1.0, 8.0)), Vec3::new(0.002, -0.001, -0.004));
    let b = Pose::new(euler_to_quat(EulerAngles::new(-3.0, 0.5, -4.0)), Vec3::new(-0.003, 0.002, -0.007));

    let label = relative_label(a, b);
    println!("T_delta = A * B^-1 = {}", serde_json::to_string(&label).unwrap());
    let e = quat_to_euler(label.rotation);
    println!("  as Euler (deg): roll {:.3} pitch {:.3} yaw {:.3}", e.roll, e.pitch, e.yaw);

    let corrected = apply_estimate(label, b);
    println!("T_delta * B recovers A: max parameter difference {:.2e}", corrected.max_param_diff(a));

    let err = pose_error(a, b);
    println!("per-axis error of B against A: {:?}", err);
}
