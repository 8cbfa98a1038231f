#![allow(dead_code)]

use std::ffi::OsStr;
use std::path::Path;
use std::process::{Command, Output};

use multidif::volume::linear_index;
use multidif::LabelVolume;
use serde_json::Value;

pub fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_multidif"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn run_ok<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let out = run(args);
    assert!(out.status.success(), "command failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub const C_DIMS: [usize; 3] = [15, 15, 7];

/// 11x11 kidney square on five slices with a slot cut from the center to
/// the +x edge along y = 7. With 3 mm radii the cavity is the slot voxels
/// x = 7, 8, 9 on every kidney slice.
pub fn c_phantom() -> LabelVolume {
    let mut m = LabelVolume::empty(C_DIMS, [1.0; 3]).unwrap();
    for z in 1..=5 {
        for y in 2..=12 {
            for x in 2..=12 {
                if !(y == 7 && x >= 7) {
                    m.set(x, y, z, 1);
                }
            }
        }
    }
    m
}

pub fn c_phantom_cavity() -> Vec<usize> {
    let mut v: Vec<usize> = (1..=5)
        .flat_map(|z| (7..=9).map(move |x| linear_index(C_DIMS, x, 7, z)))
        .collect();
    v.sort_unstable();
    v
}

pub fn digest(path: &Path) -> String {
    multidif::io::sha256_file(path).unwrap()
}
