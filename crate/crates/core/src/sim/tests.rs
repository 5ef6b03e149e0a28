use super::*;
use crate::ekf::{NavState, NoiseParams, GRAVITY};
use crate::ekf::propagate;
use proptest::prelude::*;
use std::collections::HashSet;

fn quiet(segments: Vec<Segment>) -> RideSpec {
    let mut spec = RideSpec::new(segments);
    spec.roughness = 0.0;
    spec.profile.sway = 0.0;
    spec.sensor = SensorModel::ideal();
    spec
}

fn ride(spec: &RideSpec) -> (GroundTruth, Vec<ImuSample>) {
    let truth = gen_trajectory(spec).unwrap();
    let imu = synthesize_imu(&truth, spec).unwrap();
    (truth, imu)
}

#[test]
fn straight_ride_covers_expected_distance() {
    let (truth, imu) = ride(&quiet(vec![Segment::Straight { duration: 10.0, speed: 5.0 }]));
    assert_eq!(truth.len(), 1001);
    assert!((truth.p_n[1000] - Vector3::new(50.0, 0.0, 0.0)).amax() < 1e-9);
    for k in 0..truth.len() {
        assert!((truth.v_b[k] - Vector3::new(5.0, 0.0, 0.0)).amax() < 1e-12);
        assert!((imu[k].accel - Vector3::new(0.0, 0.0, -GRAVITY)).amax() < 1e-9);
    }
}

#[test]
fn full_circle_closes_with_centripetal_acceleration() {
    let (r, s) = (5.0, std::f64::consts::PI);
    let (truth, imu) = ride(&quiet(vec![Segment::Turn { radius: r, angle: std::f64::consts::TAU, speed: s }]));
    assert_eq!(truth.len(), 1001);
    let end = truth.len() - 1;
    assert!(truth.p_n[end].norm() < 1e-3, "closure error {}", truth.p_n[end].norm());
    let expected = s * s / r;
    for k in (0..end).step_by(97) {
        let a = (truth.v_n[k + 1] - truth.v_n[k]) / 0.01;
        assert!((a.norm() - expected).abs() < 1e-3 * expected);
        assert!((imu[k].gyro.norm() - s / r).abs() < 1e-6);
    }
}

#[test]
fn zero_duration_gives_empty_ride() {
    let (truth, imu) = ride(&quiet(vec![Segment::Stop { duration: 0.0 }]));
    assert!(truth.is_empty());
    assert!(imu.is_empty());
    assert!(gen_trajectory(&quiet(vec![])).unwrap().is_empty());
}

#[test]
fn stationary_ride_reads_gravity_only() {
    let mut spec = RideSpec::new(vec![Segment::Stop { duration: 5.0 }]);
    spec.sensor = SensorModel::ideal();
    let (truth, imu) = ride(&spec);
    for s in &imu {
        assert!((s.accel - Vector3::new(0.0, 0.0, -GRAVITY)).amax() < 1e-12);
        assert!(s.gyro.amax() < 1e-12);
    }
    assert!(truth.p_n.iter().all(|p| p.amax() < 1e-12));
}

#[test]
fn infeasible_turn_is_rejected() {
    let spec = quiet(vec![Segment::Turn { radius: 3.0, angle: 1.0, speed: 8.0 }]);
    assert!(matches!(gen_trajectory(&spec), Err(crate::error::Error::Infeasible(_))));
    let spec = quiet(vec![Segment::Straight { duration: 1.0, speed: 12.0 }]);
    assert!(gen_trajectory(&spec).is_err());
}

#[test]
fn mechanizing_ideal_imu_reproduces_truth() {
    let mut spec = random_ride(
        &PlanConfig { duration: 60.0, ..PlanConfig::default() },
        Profile::participant(3),
        SensorModel::ideal(),
        11,
    );
    spec.roughness = 2.0;
    let (truth, imu) = ride(&spec);
    let noise = NoiseParams::default();
    let mut st = NavState::at_rest(truth.r[0]);
    st.v = truth.v_n[0];
    let mut p = noise.initial_cov();
    let mut worst: f64 = 0.0;
    for k in 0..truth.len() - 1 {
        (st, p) = propagate(&st, &p, &imu[k], truth.t[k + 1] - truth.t[k], &noise).unwrap();
        worst = worst.max((st.p - truth.p_n[k + 1]).norm());
    }
    assert!(worst < 1e-4, "position drift {worst} m");
}

#[test]
fn seeded_rides_are_reproducible() {
    let spec = random_ride(&PlanConfig { duration: 20.0, ..PlanConfig::default() }, Profile::default(), SensorModel::default(), 5);
    let (t1, i1) = ride(&spec);
    let (t2, i2) = ride(&spec);
    assert_eq!(t1, t2);
    assert_eq!(i1, i2);
    let mut other = spec.clone();
    other.seed = 6;
    let (_, i3) = ride(&other);
    assert_ne!(i1, i3);
}

#[test]
fn roughness_raises_vibration() {
    let rms = |roughness: f64| {
        let mut spec = quiet(vec![Segment::Straight { duration: 20.0, speed: 6.0 }]);
        spec.roughness = roughness;
        let (_, imu) = ride(&spec);
        let n = imu.len() as f64;
        (imu.iter().map(|s| s.gyro.norm_squared()).sum::<f64>() / n).sqrt()
    };
    let (a, b, c) = (rms(0.0), rms(1.0), rms(3.0));
    assert!(a < 1e-12);
    assert!(a < b && b < c, "{a} {b} {c}");
}

#[test]
fn random_rides_are_feasible_and_timed() {
    for seed in 0..20 {
        let cfg = PlanConfig { duration: 90.0, ..PlanConfig::default() };
        let spec = random_ride(&cfg, Profile::participant(seed), SensorModel::default(), seed);
        assert!(matches!(spec.segments[0], Segment::Stop { .. }));
        let truth = gen_trajectory(&spec).unwrap();
        let end = *truth.t.last().unwrap();
        assert!((end - 90.0).abs() < 0.011, "seed {seed}: {end}");
    }
}

#[test]
fn window_count_and_alignment() {
    let (truth, imu) = ride(&quiet(vec![Segment::Straight { duration: 9.99, speed: 4.0 }]));
    assert_eq!(imu.len(), 1000);
    let cfg = WindowConfig { orientation_sigma: 0.0, ..WindowConfig::default() };
    let w = make_windows(&imu, &truth, &cfg).unwrap();
    assert_eq!(w.len(), 81);
    for (i, s) in w.iter().enumerate() {
        let end = 199 + 10 * i;
        assert_eq!(s.t, truth.t[end]);
        assert_eq!(s.target, truth.v_b[end]);
        let last = s.window.len() - 1;
        for row in 0..3 {
            assert_eq!(s.window.at(row, last), imu[end].gyro[row]);
            assert_eq!(s.window.at(3 + row, last), imu[end].accel[row]);
        }
        assert_eq!(s.window.at(8, 0), 1.0);
    }
    assert!(make_windows(&imu[..150], &truth, &cfg).is_err());
    let short = GroundTruth {
        t: truth.t[..150].to_vec(),
        r: truth.r[..150].to_vec(),
        v_n: truth.v_n[..150].to_vec(),
        p_n: truth.p_n[..150].to_vec(),
        v_b: truth.v_b[..150].to_vec(),
    };
    assert!(make_windows(&imu[..150], &short, &cfg).unwrap().is_empty());
}

#[test]
fn ride_files_round_trip() {
    let spec = random_ride(&PlanConfig { duration: 10.0, ..PlanConfig::default() }, Profile::default(), SensorModel::default(), 2);
    let (truth, imu) = ride(&spec);
    let dir = tempfile::tempdir().unwrap();
    write_ride(dir.path(), &spec, &truth, &imu).unwrap();
    let (meta, imu2, truth2) = read_ride(dir.path()).unwrap();
    assert_eq!(meta.samples, imu.len());
    assert_eq!(meta.seed, 2);
    assert_eq!(imu, imu2);
    assert_eq!(truth.t, truth2.t);
    assert_eq!(truth.p_n, truth2.p_n);
    for k in 0..truth.len() {
        assert!((truth.r[k].matrix() - truth2.r[k].matrix()).amax() < 1e-14);
        assert!((truth.v_b[k] - truth2.v_b[k]).amax() < 1e-12);
    }
}

#[test]
fn truncated_imu_file_is_reported() {
    let spec = quiet(vec![Segment::Stop { duration: 1.0 }]);
    let (truth, imu) = ride(&spec);
    let dir = tempfile::tempdir().unwrap();
    write_ride(dir.path(), &spec, &truth, &imu).unwrap();
    let path = dir.path().join("imu.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let cut: Vec<&str> = text.lines().take(50).collect();
    std::fs::write(&path, cut.join("\n") + "\n").unwrap();
    assert!(matches!(read_ride(dir.path()), Err(crate::error::Error::Data(_))));
    std::fs::write(&path, "t,gx,gy,gz,ax,ay,az\n0,1,2,3,4,5,x\n").unwrap();
    let err = read_imu_csv(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}

proptest! {
    #[test]
    fn splits_partition_rides(n in 0usize..300) {
        let s = split_rides(n);
        let all: HashSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        prop_assert!(all.iter().all(|&i| i < n));
        if n >= 2 {
            prop_assert!(!s.val.is_empty());
        }
        if n >= 1 {
            prop_assert!(!s.train.is_empty());
        }
        if n >= 10 {
            prop_assert!(!s.test.is_empty());
        }
    }
}
