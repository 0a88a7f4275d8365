#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the command line in-process.
pub fn adnet(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("adnet").chain(args.iter().copied());
    let code = adnet_cli::main_with(argv, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Frame with a bright rectangle in the left half (billboard) or a plain
/// gradient (no billboard).
pub fn frame(billboard: bool, variant: u32) -> RgbImage {
    RgbImage::from_fn(40, 40, |x, y| {
        if billboard && (8..32).contains(&y) && x < 20 {
            Rgb([230, 220, 40])
        } else {
            let v = ((x + y + variant * 7) % 64) as u8;
            Rgb([v, v / 2, 90])
        }
    })
}

/// Writes `n` labelled frames plus `annotations.txt` into `dir`; returns the
/// annotation path.
pub fn write_corpus(dir: &Path, n: u32) -> PathBuf {
    let mut text = String::from("# id\twidth\theight\tsource\tpolygons\n");
    for i in 0..n {
        let billboard = i % 2 == 0;
        let id = format!("frame{i:03}.png");
        frame(billboard, i).save(dir.join(&id)).unwrap();
        let source = if i % 3 == 0 { "street" } else { "highway" };
        text.push_str(&format!("{id}\t40\t40\t{source}"));
        if billboard {
            text.push_str("\t0,8 20,8 20,32 0,32");
        }
        text.push('\n');
    }
    let path = dir.join("annotations.txt");
    std::fs::write(&path, text).unwrap();
    path
}

/// Corpus plus manifest in `dir`; returns the manifest path.
pub fn write_manifest(dir: &Path, n: u32, split_fraction: &str) -> PathBuf {
    let ann = write_corpus(dir, n);
    let manifest = dir.join("manifest.tsv");
    let run = adnet(&[
        "build-dataset",
        "--annotations",
        path_str(&ann),
        "--out",
        path_str(&manifest),
        "--split-fraction",
        split_fraction,
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    manifest
}
