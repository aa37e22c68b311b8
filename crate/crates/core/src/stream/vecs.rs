//! The `.fvecs`, `.ivecs` and `.bvecs` formats: every vector is a
//! little-endian `i32` dimension followed by that many components, stored as
//! little-endian `f32`, little-endian `i32`, or bytes respectively.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// Row-major vectors of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Vectors<T> {
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T> Vectors<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Data(format!("{} values do not split into rows of {dim}", data.len())));
        }
        Ok(Vectors { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn read_all<T, R: Read>(mut r: R, limit: Option<usize>, mut component: impl FnMut(&mut R) -> io::Result<T>) -> Result<Vectors<T>> {
    let mut dim = None;
    let mut data = Vec::new();
    let mut rows = 0;
    while limit.is_none_or(|l| rows < l) {
        let d = match r.read_i32::<LittleEndian>() {
            Ok(d) => d,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        if d <= 0 {
            return Err(Error::Data(format!("vector {rows} has dimension {d}")));
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(first) if first != d => {
                return Err(Error::Data(format!("vector {rows} has dimension {d}, expected {first}")));
            }
            _ => {}
        }
        for _ in 0..d {
            data.push(component(&mut r).map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => Error::Data(format!("vector {rows} is truncated")),
                _ => e.into(),
            })?);
        }
        rows += 1;
    }
    match dim {
        Some(dim) => Ok(Vectors { dim, data }),
        None => Err(Error::Data("file holds no vectors".into())),
    }
}

fn write_all<T: Copy, W: Write>(mut w: W, v: &Vectors<T>, mut component: impl FnMut(&mut W, T) -> io::Result<()>) -> Result<()> {
    let dim = i32::try_from(v.dim).map_err(|_| Error::Data(format!("dimension {} is too large", v.dim)))?;
    for row in v.data.chunks_exact(v.dim) {
        w.write_i32::<LittleEndian>(dim)?;
        for &x in row {
            component(&mut w, x)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Reads at most `limit` vectors, or all of them.
pub fn read_fvecs(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Vectors<f32>> {
    read_all(open(path.as_ref())?, limit, |r| r.read_f32::<LittleEndian>())
}

pub fn read_ivecs(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Vectors<i32>> {
    read_all(open(path.as_ref())?, limit, |r| r.read_i32::<LittleEndian>())
}

pub fn read_bvecs(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Vectors<u8>> {
    read_all(open(path.as_ref())?, limit, |r| r.read_u8())
}

pub fn write_fvecs(path: impl AsRef<Path>, v: &Vectors<f32>) -> Result<()> {
    write_all(BufWriter::new(File::create(path)?), v, |w, x| w.write_f32::<LittleEndian>(x))
}

pub fn write_ivecs(path: impl AsRef<Path>, v: &Vectors<i32>) -> Result<()> {
    write_all(BufWriter::new(File::create(path)?), v, |w, x| w.write_i32::<LittleEndian>(x))
}

pub fn write_bvecs(path: impl AsRef<Path>, v: &Vectors<u8>) -> Result<()> {
    write_all(BufWriter::new(File::create(path)?), v, |w, x| w.write_u8(x))
}

/// Loads any of the three formats by extension, widening to `f32`.
pub fn read_vectors(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Vectors<f32>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("fvecs") => read_fvecs(path, limit),
        Some("bvecs") => {
            let v = read_bvecs(path, limit)?;
            Ok(Vectors { dim: v.dim, data: v.data.into_iter().map(f32::from).collect() })
        }
        Some("ivecs") => {
            let v = read_ivecs(path, limit)?;
            Ok(Vectors { dim: v.dim, data: v.data.into_iter().map(|x| x as f32).collect() })
        }
        _ => Err(Error::Data(format!("{}: expected a .fvecs, .bvecs or .ivecs file", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fvecs_layout_is_header_then_components() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fvecs");
        write_fvecs(&path, &Vectors::new(2, vec![1.0, -2.5, 0.0, 3.0]).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = Vec::new();
        for row in [[1.0f32, -2.5], [0.0, 3.0]] {
            expect.extend_from_slice(&2i32.to_le_bytes());
            for x in row {
                expect.extend_from_slice(&x.to_le_bytes());
            }
        }
        assert_eq!(bytes, expect);
    }

    #[test]
    fn limit_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ivecs");
        write_ivecs(&path, &Vectors::new(3, (0..12).collect()).unwrap()).unwrap();
        assert_eq!(read_ivecs(&path, Some(2)).unwrap().data, (0..6).collect::<Vec<_>>());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_ivecs(&path, None), Err(Error::Data(_))));

        let mixed = dir.path().join("m.bvecs");
        let mut raw = vec![];
        raw.extend_from_slice(&1i32.to_le_bytes());
        raw.push(7);
        raw.extend_from_slice(&2i32.to_le_bytes());
        raw.extend_from_slice(&[1, 2]);
        std::fs::write(&mixed, raw).unwrap();
        assert!(matches!(read_bvecs(&mixed, None), Err(Error::Data(_))));
        assert!(read_vectors(dir.path().join("x.txt"), None).is_err());
        std::fs::write(dir.path().join("e.fvecs"), b"").unwrap();
        assert!(read_fvecs(dir.path().join("e.fvecs"), None).is_err());
    }

    #[test]
    fn bvecs_widen_to_floats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bvecs");
        write_bvecs(&path, &Vectors::new(2, vec![0, 255, 9, 1]).unwrap()).unwrap();
        assert_eq!(read_vectors(&path, None).unwrap().data, vec![0.0, 255.0, 9.0, 1.0]);
    }
}
