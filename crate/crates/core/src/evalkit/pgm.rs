use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Plain (P2) graymap, values scaled so the maximum maps to 255.
pub fn pgm_bytes(values: &[f64], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if values.len() != rows * cols || values.is_empty() {
        return Err(Error::Shape(format!(
            "{} values for a {rows}x{cols} graymap",
            values.len()
        )));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|&v| {
                let level = if max > 0.0 {
                    (v.max(0.0) / max * 255.0).round()
                } else {
                    0.0
                };
                (level as u8).to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out.into_bytes())
}

pub fn write_pgm(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    fs::write(path, pgm_bytes(values, rows, cols)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_graymap_layout() {
        let b = pgm_bytes(&[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        assert_eq!(
            String::from_utf8(b).unwrap(),
            "P2\n2 2\n255\n0 128\n255 64\n"
        );
        assert!(pgm_bytes(&[1.0], 2, 2).is_err());
    }
}
