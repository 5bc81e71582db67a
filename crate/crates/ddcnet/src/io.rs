//! Small file-format helpers shared by the analysis and CLI layers:
//! atomic writes, binary PGM/PPM images and CSV tables.

use std::io::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Writes `bytes` to `path` via a temporary file in the same directory
/// plus a rename, so readers never observe a partially written file and
/// failed runs leave nothing behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = dir.unwrap_or_else(|| Path::new("."));
    if !dir.is_dir() {
        return Err(Error::usage(format!(
            "output directory {} does not exist",
            dir.display()
        )));
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::usage(format!("{} has no file name", path.display())))?;
    let mut tmp = dir.join(file_name);
    tmp.set_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// 16-bit binary PGM (P5, maxval 65535, big-endian samples as the format
/// requires). `values` are row-major in `[0, 1]` and are scaled to the
/// full range.
pub fn write_pgm16(path: &Path, values: &[f64], w: usize, h: usize) -> Result<()> {
    if values.len() != w * h {
        return Err(Error::shape(format!(
            "pgm buffer holds {} values for {w}x{h}",
            values.len()
        )));
    }
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    atomic_write(path, &bytes)
}

/// 8-bit binary PPM (P6). `rgb` is row-major, 3 bytes per pixel.
pub fn write_ppm(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::shape(format!(
            "ppm buffer holds {} bytes for {w}x{h}",
            rgb.len()
        )));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    atomic_write(path, &bytes)
}

/// Writes a CSV with a header row; every row must have `header.len()`
/// cells. Cells are written verbatim (values here are numbers and plain
/// identifiers, never text needing quoting).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        text.push_str(&row.join(","));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_creates_file_and_no_temp_left() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        atomic_write(&path, b"hello").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"hello");
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1, "no temp files may remain: {names:?}");
    }

    #[test]
    fn atomic_write_missing_dir_is_a_usage_error() {
        let err = atomic_write(Path::new("/no/such/dir/out.txt"), b"x").unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "got {err:?}");
    }

    #[test]
    fn pgm_header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_pgm16(&path, &[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n65535\n"));
        let data = &bytes[bytes.len() - 8..];
        assert_eq!(u16::from_be_bytes([data[0], data[1]]), 0);
        assert_eq!(u16::from_be_bytes([data[4], data[5]]), 65535);
    }
}
