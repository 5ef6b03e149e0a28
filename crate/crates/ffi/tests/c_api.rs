use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use moelio::config::RunConfig;
use moelio::ekf::ImuSample;
use moelio::moenet::{checkpoint, Capacity, ImuWindow, MoeModel, INPUT_ROWS};
use moelio::pipeline::{fuse, simulate_ride, VelocitySource};
use moelio_ffi::*;

const CONFIG: &str = "run.seed = 3\nsim.duration = 30\nmoe.N = 4\nmoe.K = 1\nmoe.depth = 1\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(moelio_last_error()) }.to_string_lossy().into_owned()
}

fn parse(text: &str) -> (MoelioStatus, *mut MoelioConfig) {
    let c = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    let status = unsafe { moelio_config_parse(c.as_ptr(), &mut cfg) };
    (status, cfg)
}

fn ride() -> (RunConfig, Vec<ImuSample>) {
    let cfg = RunConfig::parse(CONFIG).unwrap();
    let (_, _, imu) = simulate_ride(&cfg, 0).unwrap();
    (cfg, imu)
}

fn c_samples(imu: &[ImuSample]) -> Vec<MoelioImuSample> {
    imu.iter()
        .map(|s| MoelioImuSample {
            t: s.t,
            gyro: s.gyro.into(),
            accel: s.accel.into(),
        })
        .collect()
}

#[test]
fn config_errors_map_to_status_codes() {
    let (status, cfg) = parse("moe.N = 4\nmoe.Q = 1\n");
    assert_eq!(status, MoelioStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("line 2"), "{}", last_error());

    let (status, cfg) = parse(CONFIG);
    assert_eq!(status, MoelioStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe { moelio_config_free(cfg) };

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { moelio_model_load(missing.as_ptr(), &mut model) }, MoelioStatus::Data);
    assert!(model.is_null());

    let junk = [1u8, 2, 3];
    assert_eq!(
        unsafe { moelio_model_from_bytes(junk.as_ptr(), junk.len(), &mut model) },
        MoelioStatus::Data
    );
}

#[test]
fn null_arguments_are_rejected() {
    unsafe {
        assert_eq!(moelio_config_default(ptr::null_mut()), MoelioStatus::NullPointer);
        let mut cfg = ptr::null_mut();
        assert_eq!(moelio_config_parse(ptr::null(), &mut cfg), MoelioStatus::NullPointer);
        let mut run = ptr::null_mut();
        assert_eq!(moelio_fuse(ptr::null(), ptr::null(), ptr::null(), 0, &mut run), MoelioStatus::NullPointer);
        assert!(last_error().contains("cfg"));
        assert_eq!(moelio_run_len(ptr::null()), 0);
        moelio_config_free(ptr::null_mut());
        moelio_model_free(ptr::null_mut());
        moelio_run_free(ptr::null_mut());
        assert!(!CStr::from_ptr(moelio_version()).to_bytes().is_empty());
    }
}

#[test]
fn fuse_matches_the_library() {
    let (cfg, imu) = ride();
    let model = MoeModel::new(cfg.moe.clone(), 9).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    let expected = fuse(&cfg, &imu, VelocitySource::Network(&model)).unwrap();

    let samples = c_samples(&imu);
    unsafe {
        let (status, c_cfg) = parse(CONFIG);
        assert_eq!(status, MoelioStatus::Ok);
        let mut c_model = ptr::null_mut();
        assert_eq!(moelio_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut c_model), MoelioStatus::Ok);
        assert_eq!(moelio_model_window_len(c_model), cfg.moe.window_len);

        let mut run = ptr::null_mut();
        assert_eq!(moelio_fuse(c_cfg, c_model, samples.as_ptr(), samples.len(), &mut run), MoelioStatus::Ok);
        assert_eq!(moelio_run_len(run), expected.records.len());
        assert_eq!(moelio_run_updates(run), expected.updates());
        assert!(moelio_run_updates(run) > 0);
        for i in [0, 1000, expected.records.len() - 1] {
            let mut rec = MoelioNavRecord::default();
            assert_eq!(moelio_run_record(run, i, &mut rec), MoelioStatus::Ok);
            let want = &expected.records[i];
            assert_eq!(rec.t, want.t);
            assert_eq!(rec.q, want.state.r.to_quaternion());
            assert_eq!(rec.p, <[f64; 3]>::from(want.state.p));
            assert_eq!(rec.p_diag, want.p_diag);
        }
        let mut rec = MoelioNavRecord::default();
        assert_eq!(moelio_run_record(run, usize::MAX, &mut rec), MoelioStatus::InvalidArgument);
        moelio_run_free(run);

        let mut dead = ptr::null_mut();
        assert_eq!(moelio_fuse(c_cfg, ptr::null(), samples.as_ptr(), samples.len(), &mut dead), MoelioStatus::Ok);
        assert_eq!(moelio_run_updates(dead), 0);
        moelio_run_free(dead);

        let mut bad = ptr::null_mut();
        assert_eq!(moelio_fuse(c_cfg, c_model, samples.as_ptr(), 0, &mut bad), MoelioStatus::Data);
        assert!(bad.is_null());

        moelio_model_free(c_model);
        moelio_config_free(c_cfg);
    }
}

#[test]
fn model_mismatch_is_a_config_error() {
    let (_, imu) = ride();
    let other = RunConfig::parse("moe.N = 6\nmoe.K = 2\n").unwrap();
    let bytes = checkpoint::to_bytes(&MoeModel::new(other.moe, 1).unwrap());
    let samples = c_samples(&imu);
    unsafe {
        let (_, c_cfg) = parse(CONFIG);
        let mut m = ptr::null_mut();
        assert_eq!(moelio_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut m), MoelioStatus::Ok);
        let mut run = ptr::null_mut();
        assert_eq!(moelio_fuse(c_cfg, m, samples.as_ptr(), samples.len(), &mut run), MoelioStatus::Config);
        moelio_model_free(m);
        moelio_config_free(c_cfg);
    }
}

#[test]
fn predict_matches_the_library() {
    let cfg = RunConfig::parse(CONFIG).unwrap();
    let model = MoeModel::new(cfg.moe.clone(), 4).unwrap();
    let len = cfg.moe.window_len;
    let data: Vec<f64> = (0..INPUT_ROWS * len).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
    let window = ImuWindow::new(data.clone(), len).unwrap();
    let (want, _) = model.predict(&[window], Capacity::Batch).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(moelio_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut m), MoelioStatus::Ok);
        let mut out = MoelioVelocity::default();
        assert_eq!(moelio_model_predict(m, data.as_ptr(), len, &mut out), MoelioStatus::Ok);
        assert_eq!(out.v, <[f64; 3]>::from(want[0].v_b));
        assert_eq!(out.var, <[f64; 3]>::from(want[0].sigma_diag));
        assert_eq!(moelio_model_predict(m, data.as_ptr(), len / 2, &mut out), MoelioStatus::InvalidArgument);
        moelio_model_free(m);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/moelio.h");
    let src = std::env::temp_dir().join(format!("moelio_header_{}.c", std::process::id()));
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ MoelioNavRecord r; MoelioStatus s = MOELIO_STATUS_OK; (void)r; return (int)s; }}\n"
        ),
    )
    .unwrap();
    let out = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).output();
    let _ = std::fs::remove_file(&src);
    let out = out.expect("a C compiler is available");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
