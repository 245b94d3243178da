use proptest::prelude::*;
use siamese_servo::geometry::*;

fn quat() -> impl Strategy<Value = Quat> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
        .prop_map(|(w, x, y, z)| Quat::new(w, x, y, z).normalize())
}

fn pose() -> impl Strategy<Value = Pose> {
    (quat(), -0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64).prop_map(|(q, x, y, z)| Pose::new(q, Vec3::new(x, y, z)))
}

fn close(a: Pose, b: Pose) -> bool {
    a.max_param_diff(b) <= 1e-9
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn composition_is_associative(a in pose(), b in pose(), c in pose()) {
        prop_assert!(close(compose(compose(a, b), c), compose(a, compose(b, c))));
    }

    #[test]
    fn inverse_round_trips(a in pose()) {
        prop_assert!(close(compose(a, inverse(a)), Pose::IDENTITY));
        prop_assert!(close(compose(inverse(a), a), Pose::IDENTITY));
        prop_assert!(close(inverse(inverse(a)), a));
    }

    #[test]
    fn correction_undoes_label(a in pose(), b in pose()) {
        prop_assert!(close(apply_estimate(relative_label(a, b), b), a));
    }

    #[test]
    fn labels_are_antisymmetric(a in pose(), b in pose()) {
        prop_assert!(close(relative_label(a, b), inverse(relative_label(b, a))));
    }

    #[test]
    fn double_cover_is_resolved(q in quat()) {
        let n = Quat::new(-q.w, -q.x, -q.y, -q.z).normalize();
        let d = n.to_array().iter().zip(q.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(d <= 1e-12);
        prop_assert!(q.w >= 0.0);
        let v = Vec3::new(0.3, -0.2, 0.7);
        let (r1, r2) = (q.rotate(v), (-q).rotate(v));
        prop_assert!((r1 - r2).norm() <= 1e-12);
    }

    #[test]
    fn euler_round_trips(roll in -179.0..179.0f64, pitch in -89.0..89.0f64, yaw in -179.0..179.0f64) {
        let e = quat_to_euler(euler_to_quat(EulerAngles::new(roll, pitch, yaw)));
        prop_assert!((e.roll - roll).abs() <= 1e-9, "{e:?}");
        prop_assert!((e.pitch - pitch).abs() <= 1e-9, "{e:?}");
        prop_assert!((e.yaw - yaw).abs() <= 1e-9, "{e:?}");
    }

    #[test]
    fn pose_error_is_zero_on_self(a in pose()) {
        prop_assert!(pose_error(a, a).to_array().iter().all(|v| *v <= 1e-9));
    }

    #[test]
    fn json_layout_round_trips(a in pose()) {
        let s = serde_json::to_string(&a).unwrap();
        let back: Pose = serde_json::from_str(&s).unwrap();
        prop_assert_eq!(back, a);
        let v: Vec<f64> = serde_json::from_str(&s).unwrap();
        prop_assert_eq!(v.len(), 7);
    }
}
