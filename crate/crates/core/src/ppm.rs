//! Binary PPM (P6) / PGM (P5) export for inspection.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Maps a normalized `[-1, 1]` value to display `[0, 1]`, clamped.
pub fn to_display(v: f32) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Encodes an HWC image of display values in `[0, 1]`.
pub fn encode(height: usize, width: usize, channels: usize, raw: &[f32]) -> Result<Vec<u8>> {
    if raw.len() != height * width * channels {
        return Err(Error::Shape(format!(
            "ppm payload {} != {height}x{width}x{channels}",
            raw.len()
        )));
    }
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Shape(format!("ppm needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend(
        raw.iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write(path: &Path, height: usize, width: usize, channels: usize, raw: &[f32]) -> Result<()> {
    let bytes = encode(height, width, channels, raw)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload() {
        let bytes = encode(1, 2, 3, &[0.0, 0.5, 1.0, 2.0, -1.0, 0.25]).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 0, 64]);
        assert!(encode(1, 1, 2, &[0.0, 0.0]).is_err());
        assert!(encode(2, 2, 3, &[0.0]).is_err());
    }
}
