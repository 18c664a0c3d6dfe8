use std::ffi::{CStr, CString};
use std::ptr;

use fedtime_core::model::{checkpoint, predict};
use fedtime_core::numerics::Tensor;
use fedtime_ffi::*;

fn demo_config(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        r#"
seed = 3
verbosity = 0
[dataset]
kind = "demo"
[model]
lookback = 24
horizon = 12
patch_len = 8
patch_stride = 4
d_model = 8
heads = 2
layers = 1
ffn_dim = 16
lora_rank = 2
quant_block = 16
[federation]
clients = 2
clusters = 1
rounds = 2
local_steps = 1
batch_size = 32
"#,
    )
    .unwrap();
    path
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = ft_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn train_load_forecast_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = c(demo_config(dir.path()).to_str().unwrap());
    let out = c(dir.path().join("out").to_str().unwrap());
    let (mut mse, mut mae) = (f64::NAN, f64::NAN);
    let st = unsafe { ft_train(cfg.as_ptr(), out.as_ptr(), &mut mse, &mut mae) };
    assert_eq!(st, FtStatus::Ok);
    assert!(mse.is_finite() && mae.is_finite());

    let ckpt_path = dir.path().join("out/checkpoints/cluster-0.ckpt");
    let ckpt = c(ckpt_path.to_str().unwrap());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { ft_model_load(ckpt.as_ptr(), &mut handle) }, FtStatus::Ok);
    let (l, t, m) = unsafe { (ft_model_lookback(handle), ft_model_horizon(handle), ft_model_channels(handle)) };
    assert_eq!((l, t, m), (24, 12, 2));

    let inputs: Vec<f64> = (0..2 * l).map(|i| (i as f64 * 0.3).sin()).collect();
    let channels = [0usize, 1];
    let mut y = vec![0.0; 2 * t];
    let st = unsafe { ft_model_forecast(handle, inputs.as_ptr(), channels.as_ptr(), 2, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, FtStatus::Ok);
    let model = checkpoint::load(&ckpt_path).unwrap();
    let want = predict(&model, &Tensor::new(vec![2, l], inputs.clone()).unwrap(), &channels).unwrap();
    assert_eq!(want.data(), y.as_slice());

    let mut small = vec![0.0; t];
    let st = unsafe { ft_model_forecast(handle, inputs.as_ptr(), channels.as_ptr(), 2, small.as_mut_ptr(), small.len()) };
    assert_eq!(st, FtStatus::InvalidArgument);
    let bad = [5usize, 0];
    let st = unsafe { ft_model_forecast(handle, inputs.as_ptr(), bad.as_ptr(), 2, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, FtStatus::InvalidArgument);
    assert!(last_error().contains("channel 5"));
    unsafe { ft_model_free(handle) };
}

#[test]
fn errors_map_to_status_codes() {
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { ft_model_load(ptr::null(), &mut handle) }, FtStatus::InvalidArgument);
    let missing = c("/definitely/not/here.ckpt");
    assert_eq!(unsafe { ft_model_load(missing.as_ptr(), &mut handle) }, FtStatus::Checkpoint);
    assert!(handle.is_null());

    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("g.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let g = c(garbage.to_str().unwrap());
    assert_eq!(unsafe { ft_model_load(g.as_ptr(), &mut handle) }, FtStatus::Checkpoint);

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[federation]\nrouns = 3\n").unwrap();
    let p = c(cfg.to_str().unwrap());
    let st = unsafe { ft_train(p.as_ptr(), ptr::null(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, FtStatus::Config);
    assert!(last_error().contains("federation.rouns"));

    unsafe { ft_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { ft_model_lookback(ptr::null()) }, 0);
    let v = unsafe { CStr::from_ptr(ft_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}
