//! File formats: binary field dumps and CSV writers.
//!
//! Binary dump layout: header of three little-endian u64 words `(d, n, nt)`
//! followed by little-endian f64 values, row-major per slice, slices in time
//! order. Scalar fields write `nt = 0` and one slice; space-time fields write
//! the grid's `nt` and `nt + 1` slices. Masks are dumped as 0/1 values in the
//! same layout.
//!
//! Every float printed to CSV or JSON carries 17 significant digits so
//! regression diffs are exact round-trips.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ScalarField, SpaceTimeField, TorusGrid};

/// 17 significant digits; reparses to the identical f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_header(w: &mut impl Write, d: u64, n: u64, nt: u64) -> Result<()> {
    w.write_all(&d.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&nt.to_le_bytes())?;
    Ok(())
}

pub fn write_scalar_field(path: &Path, f: &ScalarField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, f.grid.d as u64, f.grid.n as u64, 0)?;
    for v in &f.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_space_time_field(path: &Path, f: &SpaceTimeField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, f.grid.d as u64, f.grid.n as u64, f.grid.nt as u64)?;
    for slice in &f.slices {
        for v in &slice.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Read a scalar-field dump and check it matches the grid's spatial shape.
pub fn read_scalar_field(path: &Path, grid: TorusGrid) -> Result<ScalarField> {
    let mut r = BufReader::new(File::open(path)?);
    let d = read_u64(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let nt = read_u64(&mut r)? as usize;
    if d != grid.d || n != grid.n {
        return Err(Error::Config(format!(
            "field file {} has shape d={d}, n={n}; grid is d={}, n={}",
            path.display(),
            grid.d,
            grid.n
        )));
    }
    if nt != 0 {
        return Err(Error::Config(format!(
            "{} is a space-time dump (nt={nt}), expected a scalar field",
            path.display()
        )));
    }
    let mut values = Vec::with_capacity(grid.points());
    for _ in 0..grid.points() {
        values.push(read_f64(&mut r)?);
    }
    ScalarField::new(grid, values)
}

pub fn read_space_time_field(path: &Path, grid: TorusGrid) -> Result<SpaceTimeField> {
    let mut r = BufReader::new(File::open(path)?);
    let d = read_u64(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let nt = read_u64(&mut r)? as usize;
    if d != grid.d || n != grid.n || nt != grid.nt {
        return Err(Error::Config(format!(
            "field file {} has shape d={d}, n={n}, nt={nt}; grid is d={}, n={}, nt={}",
            path.display(),
            grid.d,
            grid.n,
            grid.nt
        )));
    }
    let mut slices = Vec::with_capacity(grid.nt + 1);
    for _ in 0..=grid.nt {
        let mut values = Vec::with_capacity(grid.points());
        for _ in 0..grid.points() {
            values.push(read_f64(&mut r)?);
        }
        slices.push(ScalarField::new(grid, values)?);
    }
    SpaceTimeField::new(grid, slices)
}

/// Fields as CSV, one row per grid point: index coordinates then the value.
pub fn write_scalar_csv(path: &Path, f: &ScalarField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match f.grid.d {
        1 => {
            writeln!(w, "i,value")?;
            for (i, v) in f.values.iter().enumerate() {
                writeln!(w, "{i},{}", fmt_f64(*v))?;
            }
        }
        _ => {
            writeln!(w, "i,j,value")?;
            for (idx, v) in f.values.iter().enumerate() {
                let c = f.grid.coords(idx);
                writeln!(w, "{},{},{}", c[0], c[1], fmt_f64(*v))?;
            }
        }
    }
    Ok(())
}

/// Generic CSV writer: header plus rows of preformatted cells.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = TorusGrid::new(2, 8, 4, 1.0, 0.05).unwrap();
        let f = ScalarField::from_fn(grid, |x| x[0] * 3.0 - x[1] + 0.1234567890123456);
        let path = dir.path().join("f.bin");
        write_scalar_field(&path, &f).unwrap();
        let g = read_scalar_field(&path, grid).unwrap();
        assert_eq!(f.values, g.values);
    }

    #[test]
    fn space_time_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = TorusGrid::new(1, 8, 4, 1.0, 0.05).unwrap();
        let f = SpaceTimeField::from_fn(grid, |t, x| t + x[0] * 0.77);
        let path = dir.path().join("f.bin");
        write_space_time_field(&path, &f).unwrap();
        let g = read_space_time_field(&path, grid).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let grid = TorusGrid::new(1, 8, 4, 1.0, 0.05).unwrap();
        let other = TorusGrid::new(1, 16, 4, 1.0, 0.05).unwrap();
        let f = ScalarField::constant(grid, 1.0);
        let path = dir.path().join("f.bin");
        write_scalar_field(&path, &f).unwrap();
        assert!(read_scalar_field(&path, other).is_err());
    }

    #[test]
    fn seventeen_digit_roundtrip() {
        for &x in &[std::f64::consts::PI, 1.0 / 3.0, 1e-300, -7.25e17] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(x.to_bits(), back.to_bits(), "{s}");
        }
    }
}
