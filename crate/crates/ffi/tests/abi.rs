use std::ffi::{c_char, CStr, CString};
use std::ptr;

use misa_ffi::*;

fn last_error() -> String {
    let mut needed = 0;
    unsafe { misa_last_error(ptr::null_mut(), 0, &mut needed) };
    let mut buf = vec![0 as c_char; needed + 1];
    assert_eq!(unsafe { misa_last_error(buf.as_mut_ptr(), buf.len(), ptr::null_mut()) }, MisaStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string()
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(misa_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn toy_abstraction_round_trip() {
    let mut fam = ptr::null_mut();
    assert_eq!(unsafe { misa_toy_family_new(ptr::null(), &mut fam) }, MisaStatus::Ok);
    assert_eq!(unsafe { misa_family_k(fam) }, 3);
    let envs: Vec<usize> = (0..misa_toy_train_env_count()).collect();
    let mut buf = ptr::null_mut();
    assert_eq!(unsafe { misa_family_collect(fam, envs.as_ptr(), envs.len(), 1000, 7, &mut buf) }, MisaStatus::Ok);
    assert_eq!(unsafe { misa_buffer_len(buf) }, 3000);

    let mut vars = [usize::MAX; 3];
    let mut n = 0;
    assert_eq!(unsafe { misa_linear_abstraction(buf, 0.05, vars.as_mut_ptr(), vars.len(), &mut n) }, MisaStatus::Ok);
    assert_eq!(&vars[..n], &[0, 1]);

    // too small an output array reports the needed count
    let mut one = [0usize; 1];
    let status = unsafe { misa_linear_abstraction(buf, 0.05, one.as_mut_ptr(), 1, &mut n) };
    assert_eq!(status, MisaStatus::BufferTooSmall);
    assert_eq!(n, 2);

    unsafe {
        misa_buffer_free(buf);
        misa_family_free(fam);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut fam = ptr::null_mut();
    let bad = CString::new(r#"{"noise_std": 0.1, "bogus": 1}"#).unwrap();
    assert_eq!(unsafe { misa_toy_family_new(bad.as_ptr(), &mut fam) }, MisaStatus::Config);
    assert!(fam.is_null());
    assert!(last_error().contains("bogus"));

    assert_eq!(unsafe { misa_toy_family_new(ptr::null(), ptr::null_mut()) }, MisaStatus::NullPointer);
    assert!(last_error().contains("out"));

    let mut fam = ptr::null_mut();
    assert_eq!(unsafe { misa_toy_family_new(ptr::null(), &mut fam) }, MisaStatus::Ok);
    let envs = [0usize, 99];
    let mut buf = ptr::null_mut();
    let status = unsafe { misa_family_collect(fam, envs.as_ptr(), envs.len(), 10, 1, &mut buf) };
    assert_eq!(status, MisaStatus::InvalidInput);
    assert!(last_error().contains("99"));
    assert!(buf.is_null());
    unsafe { misa_family_free(fam) };

    // null handles are tolerated by the free and count functions
    unsafe {
        misa_family_free(ptr::null_mut());
        misa_buffer_free(ptr::null_mut());
        misa_run_free(ptr::null_mut());
    }
    assert_eq!(unsafe { misa_family_k(ptr::null()) }, 0);
}

#[test]
fn wasserstein_on_a_line() {
    let dist = [0.0, 1.0, 3.0, 1.0, 0.0, 2.0, 3.0, 2.0, 0.0];
    let (p, q) = ([1.0, 0.0, 0.0], [0.0, 0.5, 0.5]);
    let mut w = 0.0;
    assert_eq!(unsafe { misa_wasserstein1(p.as_ptr(), q.as_ptr(), dist.as_ptr(), 3, &mut w) }, MisaStatus::Ok);
    assert!((w - 2.0).abs() < 1e-12);
    let skew = [0.0, 1.0, 3.0, 2.0, 0.0, 2.0, 3.0, 2.0, 0.0];
    let status = unsafe { misa_wasserstein1(p.as_ptr(), q.as_ptr(), skew.as_ptr(), 3, &mut w) };
    assert_eq!(status, MisaStatus::InvalidInput);
}

#[test]
fn experiment_csv_matches_the_library() {
    let cfg = r#"{"kind": "fano", "master_seed": 3, "seeds": [0]}"#;
    let c = CString::new(cfg).unwrap();
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { misa_run_experiment(c.as_ptr(), &mut run) }, MisaStatus::Ok);
    assert_eq!(unsafe { misa_run_violation_count(run) }, 0);
    let rows = unsafe { misa_run_row_count(run) };
    assert!(rows > 0);

    let mut needed = 0;
    assert_eq!(unsafe { misa_run_csv(run, ptr::null_mut(), 0, &mut needed) }, MisaStatus::BufferTooSmall);
    let mut buf = vec![0 as c_char; needed + 1];
    assert_eq!(unsafe { misa_run_csv(run, buf.as_mut_ptr(), buf.len(), &mut needed) }, MisaStatus::Ok);
    let csv = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_bytes().to_vec();
    unsafe { misa_run_free(run) };

    let direct = misa::experiments::run(&misa::experiments::ExperimentConfig::from_json(cfg).unwrap(), None).unwrap();
    assert_eq!(csv, direct.to_csv().unwrap());
    assert_eq!(rows, direct.rows.len());
}

#[test]
fn header_is_current_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/misa.h")).unwrap();
    for name in ["misa_version", "misa_last_error", "misa_run_experiment", "MISA_STATUS_BUFFER_TOO_SMALL", "typedef struct MisaRun MisaRun"] {
        assert!(header.contains(name), "{name} missing from header");
    }
    // a C compiler is optional; check the header parses when one is around
    let tmp = std::env::temp_dir().join(format!("misa_header_{}.c", std::process::id()));
    std::fs::write(&tmp, "#include \"misa.h\"\nint main(void) { return misa_version() == 0; }\n").unwrap();
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&tmp)
        .status();
    let _ = std::fs::remove_file(&tmp);
    if let Ok(s) = status {
        assert!(s.success(), "header does not compile as C99");
    }
}
