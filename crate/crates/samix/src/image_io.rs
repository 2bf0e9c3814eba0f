//! Binary PGM (P5) and PPM (P6) output for masks and mixed samples, plus
//! readers so tests can verify emitted files without an image library.
//! All writes are atomic: a temp file in the target directory is renamed
//! into place.

use std::io;
use std::path::Path;

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Grayscale plane in [0, 1] as binary PGM, maxval 255.
pub fn write_pgm(path: &Path, h: usize, w: usize, data: &[f64]) -> io::Result<()> {
    assert_eq!(data.len(), h * w, "write_pgm: {} values for {h}x{w}", data.len());
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(data.iter().map(|v| quantize(*v)));
    write_atomic(path, &bytes)
}

/// RGB planes (`[3, h, w]` layout, values in [0, 1]) as binary PPM.
pub fn write_ppm(path: &Path, h: usize, w: usize, planes: &[f64]) -> io::Result<()> {
    assert_eq!(
        planes.len(),
        3 * h * w,
        "write_ppm: {} values for 3x{h}x{w}",
        planes.len()
    );
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        bytes.push(quantize(planes[i]));
        bytes.push(quantize(planes[h * w + i]));
        bytes.push(quantize(planes[2 * h * w + i]));
    }
    write_atomic(path, &bytes)
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> io::Result<(usize, usize, &'a [u8])> {
    let err = |msg: String| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {msg}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad header".into()))?);
    }
    if fields.len() < 4 {
        return Err(err("truncated header".into()));
    }
    if fields[0] != magic {
        return Err(err(format!("expected {magic}, found {}", fields[0])));
    }
    let w: usize = fields[1].parse().map_err(|_| err("bad width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| err("bad height".into()))?;
    if fields[3] != "255" {
        return Err(err(format!("unsupported maxval {}", fields[3])));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((h, w, &bytes[pos + 1..]))
}

/// Read a binary PGM back as a plane of values in [0, 1].
pub fn read_pgm(path: &Path) -> io::Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let (h, w, raster) = parse_header(&bytes, "P5", path)?;
    if raster.len() < h * w {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: raster holds {} bytes, needs {}", path.display(), raster.len(), h * w),
        ));
    }
    let data = raster[..h * w].iter().map(|b| *b as f64 / 255.0).collect();
    Ok((h, w, data))
}

/// Read a binary PPM back as `[3, h, w]` planes of values in [0, 1].
pub fn read_ppm(path: &Path) -> io::Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let (h, w, raster) = parse_header(&bytes, "P6", path)?;
    if raster.len() < 3 * h * w {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: raster holds {} bytes, needs {}", path.display(), raster.len(), 3 * h * w),
        ));
    }
    let mut planes = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        planes[i] = raster[3 * i] as f64 / 255.0;
        planes[h * w + i] = raster[3 * i + 1] as f64 / 255.0;
        planes[2 * h * w + i] = raster[3 * i + 2] as f64 / 255.0;
    }
    Ok((h, w, planes))
}
