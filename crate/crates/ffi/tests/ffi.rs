use std::ffi::CString;
use std::ptr;

use partfield::bench::{build_episode_scene, BenchConfig, EnvState, PlanarPose, ToyObject};
use partfield::policy::{save_checkpoint, Policy};
use partfield_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { pf_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn field_round_trip_and_propagation() {
    let xyz = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0];
    let feats = [1.0, 0.5, -1.0, 0.25, 3.0, 0.0];
    let mut f = ptr::null_mut();
    unsafe {
        assert_eq!(pf_field_new(xyz.as_ptr(), feats.as_ptr(), 3, 2, &mut f), PfStatus::Ok);
        assert_eq!(pf_field_len(f), 3);
        assert_eq!(pf_field_feature_dim(f), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = cstr(&dir.path().join("f.txt"));
        assert_eq!(pf_field_write(f, path.as_ptr()), PfStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(pf_field_read(path.as_ptr(), &mut g), PfStatus::Ok);

        // Quarter turn about z plus a shift.
        let rot = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let t = [1.0, 0.0, 0.5];
        let mut h = ptr::null_mut();
        assert_eq!(pf_field_propagate(g, rot.as_ptr(), t.as_ptr(), &mut h), PfStatus::Ok);
        let mut p = [0.0; 9];
        let mut q = [0.0; 6];
        assert_eq!(pf_field_copy(h, p.as_mut_ptr(), 9, q.as_mut_ptr(), 6), PfStatus::Ok);
        assert_eq!(q, feats);
        let want = [1.0, 0.0, 0.5, 1.0, 1.0, 0.5, -1.0, 0.0, 0.5];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(pf_field_copy(h, p.as_mut_ptr(), 8, ptr::null_mut(), 0), PfStatus::BufferTooSmall);
        pf_field_free(f);
        pf_field_free(g);
        pf_field_free(h);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    let mut f = ptr::null_mut();
    unsafe {
        let missing = CString::new("/nonexistent/field.txt").unwrap();
        assert_eq!(pf_field_read(missing.as_ptr(), &mut f), PfStatus::Io);
        assert!(last_error().contains("nonexistent"));
        assert_eq!(pf_field_read(ptr::null(), &mut f), PfStatus::NullPointer);

        let xyz = [0.0; 3];
        let feats = [0.0];
        assert_eq!(pf_field_new(xyz.as_ptr(), feats.as_ptr(), 1, 1, &mut f), PfStatus::Ok);
        let skew = [1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut g = ptr::null_mut();
        assert_eq!(pf_field_propagate(f, skew.as_ptr(), xyz.as_ptr(), &mut g), PfStatus::InvalidArgument);
        assert!(g.is_null());
        pf_field_free(f);
        pf_field_free(ptr::null_mut());
    }
}

#[test]
fn fps_through_the_c_interface() {
    let xyz = [0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 5.0, 0.0, 0.0, 2.0, 0.0, 0.0];
    let mut idx = [0usize; 3];
    unsafe {
        assert_eq!(pf_farthest_point_sample(xyz.as_ptr(), 4, 3, 0, idx.as_mut_ptr()), PfStatus::Ok);
        assert_eq!(idx, [0, 2, 3]);
        assert_eq!(pf_farthest_point_sample(xyz.as_ptr(), 4, 5, 0, idx.as_mut_ptr()), PfStatus::InvalidArgument);
    }
}

#[test]
fn policy_act_matches_the_library() {
    let cfg = BenchConfig::default();
    let policy = Policy::new(cfg.policy.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("p.pfck");
    save_checkpoint(&policy, &ck).unwrap();

    let pose = PlanarPose::new(0.05, -0.02, 1.0);
    let scene = build_episode_scene(&ToyObject::shoe(), &pose, &cfg.observation).unwrap();
    let state = EnvState { pose, grip: 0.0, step: 0 };
    let obs = scene.observe(&state).unwrap();
    let want = policy.act(&obs, 7).unwrap();

    let n = obs.scene.len();
    let xyz: Vec<f64> = obs.scene.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let mut part_of = vec![0usize; n];
    for (k, idx) in obs.part_indices.iter().enumerate() {
        for &i in idx {
            part_of[i] = k;
        }
    }
    let r = obs.part_pose.rotation();
    let rot: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect();
    let t = obs.part_pose.translation();
    let c_obs = PfObservation {
        num_points: n,
        feature_dim: obs.scene.feature_dim(),
        xyz: xyz.as_ptr(),
        source_a: obs.scene.source_a.data().as_ptr(),
        source_b: obs.scene.source_b.data().as_ptr(),
        num_parts: obs.num_parts(),
        part_of: part_of.as_ptr(),
        pose_rotation: rot.as_ptr(),
        pose_translation: t.as_ptr(),
        robot_dim: obs.robot.len(),
        robot: obs.robot.as_ptr(),
    };

    let path = cstr(&ck);
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(pf_policy_load(path.as_ptr(), &mut h), PfStatus::Ok);
        let (mut horizon, mut adim) = (0, 0);
        assert_eq!(
            pf_policy_dims(h, &mut horizon, &mut adim, ptr::null_mut(), ptr::null_mut()),
            PfStatus::Ok
        );
        assert_eq!((horizon, adim), want.shape());
        let mut out = vec![0.0; horizon * adim];
        assert_eq!(pf_policy_act(h, &c_obs, 7, out.as_mut_ptr(), out.len()), PfStatus::Ok);
        assert_eq!(out, want.data());
        assert_eq!(pf_policy_act(h, &c_obs, 7, out.as_mut_ptr(), 3), PfStatus::BufferTooSmall);
        pf_policy_free(h);
    }
}

#[test]
fn generated_header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/partfield.h")).unwrap();
    for name in [
        "pf_field_read",
        "pf_field_propagate",
        "pf_policy_load",
        "pf_policy_act",
        "pf_last_error_message",
        "typedef struct PfPolicy PfPolicy",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
