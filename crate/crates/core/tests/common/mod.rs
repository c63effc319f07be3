//! Golden-file helpers. Run with `QPRIOR_BLESS=1` to (re)write the goldens.

#![allow(dead_code)]

use std::path::PathBuf;

use quadprior::image::{read_qpt, write_qpt, Image};

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

pub fn blessing() -> bool {
    std::env::var("QPRIOR_BLESS").is_ok_and(|v| v == "1")
}

/// Compares `img` with the stored golden within `tol` max-abs.
pub fn check_image(name: &str, img: &Image<f32>, tol: f32) {
    let path = golden_path(name);
    if blessing() {
        write_qpt(img, &path).unwrap();
        return;
    }
    let gold: Image<f32> = read_qpt(&path).unwrap_or_else(|e| panic!("{e}; run with QPRIOR_BLESS=1"));
    assert!(gold.same_shape(img), "{name}: shape differs from golden");
    let worst = gold
        .data()
        .iter()
        .zip(img.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    assert!(worst <= tol, "{name}: max abs diff {worst} > {tol}");
}

/// Compares CSV text with the stored golden cell by cell; numeric cells
/// within relative tolerance `rel`.
pub fn check_csv(name: &str, text: &str, rel: f64) {
    let path = golden_path(name);
    if blessing() {
        std::fs::write(&path, text).unwrap();
        return;
    }
    let gold = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{name}: {e}; run with QPRIOR_BLESS=1"));
    let (g, t): (Vec<_>, Vec<_>) = (gold.lines().collect(), text.lines().collect());
    assert_eq!(g.len(), t.len(), "{name}: row count");
    for (row, (a, b)) in g.iter().zip(&t).enumerate() {
        for (x, y) in a.split(',').zip(b.split(',')) {
            match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(x), Ok(y)) => assert!(
                    (x - y).abs() <= rel * x.abs().max(y.abs()).max(1e-12),
                    "{name} row {row}: {x} vs {y}"
                ),
                _ => assert_eq!(x, y, "{name} row {row}"),
            }
        }
    }
}
