//! Binary 16-bit PGM dumps of probability maps.
//!
//! Samples are scaled so the largest weight maps to 65535. Per the PGM
//! format, 16-bit samples are stored most significant byte first.

use std::io::{self, Write};
use std::path::Path;

use super::ProbMap;

pub fn write_pgm<W: Write>(map: &ProbMap, mut w: W) -> io::Result<()> {
    let (h, width) = map.shape();
    write!(w, "P5\n{width} {h}\n65535\n")?;
    let top = map.weights().iter().copied().fold(0.0, f64::max);
    for v in map.weights() {
        let level = if top > 0.0 { (v / top * 65535.0).round() as u16 } else { 0 };
        w.write_all(&level.to_be_bytes())?;
    }
    Ok(())
}

pub fn save_pgm(map: &ProbMap, path: &Path) -> io::Result<()> {
    let mut buf = Vec::new();
    write_pgm(map, &mut buf)?;
    std::fs::write(path, buf)
}
