use std::ffi::{CStr, CString};
use std::ptr;

use svlv_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

const NN3: &str = r#"{"d":3,"variant":"nearest_neighbor"}"#;

#[test]
fn voter_lifecycle() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(svlv_model_new(c(NN3).as_ptr(), ptr::null(), 100, &mut model), SvlvStatus::Ok);
        let mut sim = ptr::null_mut();
        let init = c(r#"{"kind":"box","half_width":1}"#);
        assert_eq!(svlv_sim_new(model, init.as_ptr(), 7, SvlvEngine::Dense, &mut sim), SvlvStatus::Ok);
        assert_eq!(svlv_sim_occupied(sim), 27);
        assert!((svlv_sim_mass(sim) - 0.27).abs() < 1e-15);
        let mut events = 0;
        assert_eq!(svlv_sim_run(sim, 0.1, u64::MAX, &mut events), SvlvStatus::Ok);
        assert!(events > 0);
        assert_eq!(svlv_sim_time(sim), 0.1);

        let k = svlv_sim_occupied(sim) as usize;
        let mut len = 0usize;
        assert_eq!(svlv_sim_sites(sim, ptr::null_mut(), 0, &mut len), if k == 0 { SvlvStatus::Ok } else { SvlvStatus::BufferTooSmall });
        assert_eq!(len, k);
        let mut buf = vec![0i32; 3 * k];
        assert_eq!(svlv_sim_sites(sim, buf.as_mut_ptr(), buf.len(), &mut len), SvlvStatus::Ok);

        let mut x = 0.0;
        assert_eq!(svlv_sim_integrate(sim, c(r#"{"kind":"constant","c":1.0}"#).as_ptr(), &mut x), SvlvStatus::Ok);
        assert!((x - svlv_sim_mass(sim)).abs() < 1e-12);
        svlv_sim_free(sim);
        svlv_model_free(model);
    }
}

#[test]
fn same_seed_same_path() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(svlv_model_new_lv(c(NN3).as_ptr(), 2.0, 1.0, 50, &mut model), SvlvStatus::Ok);
        let init = c("[[0,0,0],[1,0,0],[0,1,0]]");
        let mut sites = Vec::new();
        for _ in 0..2 {
            let mut sim = ptr::null_mut();
            assert_eq!(svlv_sim_new(model, init.as_ptr(), 3, SvlvEngine::Auto, &mut sim), SvlvStatus::Ok);
            assert_eq!(svlv_sim_run(sim, 0.5, u64::MAX, ptr::null_mut()), SvlvStatus::Ok);
            let mut len = 0;
            let mut buf = vec![0i32; 30_000];
            assert_eq!(svlv_sim_sites(sim, buf.as_mut_ptr(), buf.len(), &mut len), SvlvStatus::Ok);
            buf.truncate(3 * len);
            sites.push(buf);
            svlv_sim_free(sim);
        }
        assert_eq!(sites[0], sites[1]);
        svlv_model_free(model);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(svlv_model_new(ptr::null(), ptr::null(), 10, &mut model), SvlvStatus::NullPointer);
        assert_eq!(svlv_model_new(c(r#"{"d":3}"#).as_ptr(), ptr::null(), 10, &mut model), SvlvStatus::InvalidArgument);
        let msg = CStr::from_ptr(svlv_last_error()).to_str().unwrap();
        assert!(!msg.is_empty());
        assert_eq!(svlv_model_new(c(NN3).as_ptr(), ptr::null(), 10, ptr::null_mut()), SvlvStatus::NullPointer);

        assert_eq!(svlv_model_new(c(NN3).as_ptr(), ptr::null(), 100, &mut model), SvlvStatus::Ok);
        let mut sim = ptr::null_mut();
        assert_eq!(svlv_sim_new(model, c(r#"{"kind":"box","half_width":2}"#).as_ptr(), 1, SvlvEngine::Dense, &mut sim), SvlvStatus::Ok);
        assert_eq!(svlv_sim_run(sim, 1.0, 5, ptr::null_mut()), SvlvStatus::BudgetExceeded);
        let mut x = 0.0;
        let bad_phi = c(r#"{"kind":"gaussian_bump","center":[0.0],"width":1.0}"#);
        assert_eq!(svlv_sim_integrate(sim, bad_phi.as_ptr(), &mut x), SvlvStatus::InvalidArgument);
        svlv_sim_free(sim);
        svlv_model_free(model);
        svlv_model_free(ptr::null_mut());
        svlv_sim_free(ptr::null_mut());
    }
}

#[test]
fn numeric_entry_points() {
    unsafe {
        let (mut m, mut v) = (0.0, 0.0);
        assert_eq!(svlv_feller_moments(1.5, 2.0, 0.7, 0.0, &mut m, &mut v), SvlvStatus::Ok);
        assert_eq!((m, v), (1.5, 0.7 * 1.5 * 2.0));
        assert_eq!(svlv_feller_moments(-1.0, 1.0, 1.0, 0.0, &mut m, &mut v), SvlvStatus::InvalidArgument);
        let (mut g, mut se) = (0.0, 0.0);
        assert_eq!(svlv_estimate_gamma_e(c(NN3).as_ptr(), 5.0, 2000, 1, &mut g, &mut se), SvlvStatus::Ok);
        assert!(g > 0.5 && g < 0.8 && se > 0.0);
        let v = CStr::from_ptr(svlv_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/svlv.h")).unwrap();
    for name in [
        "svlv_last_error",
        "svlv_version",
        "svlv_model_new",
        "svlv_model_new_lv",
        "svlv_model_free",
        "svlv_sim_new",
        "svlv_sim_free",
        "svlv_sim_run",
        "svlv_sim_time",
        "svlv_sim_occupied",
        "svlv_sim_mass",
        "svlv_sim_sites",
        "svlv_sim_integrate",
        "svlv_feller_moments",
        "svlv_estimate_gamma_e",
        "SVLV_STATUS_BUDGET_EXCEEDED",
    ] {
        assert!(header.contains(name), "{name} missing from svlv.h");
    }
}
