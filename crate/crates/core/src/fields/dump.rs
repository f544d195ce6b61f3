use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Field, Grid};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Scalar,
    Vector,
    Symtensor,
}

impl FieldKind {
    fn components(self, dim: usize) -> usize {
        match self {
            FieldKind::Scalar => 1,
            FieldKind::Vector => dim,
            FieldKind::Symtensor => dim * (dim + 1) / 2,
        }
    }

    fn of<F: Field>(f: &F) -> Self {
        let d = f.grid().dim();
        match f.components() {
            1 => FieldKind::Scalar,
            k if k == d => FieldKind::Vector,
            _ => FieldKind::Symtensor,
        }
    }
}

/// First line of a field dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nz: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lz: Option<f64>,
    pub kind: FieldKind,
    pub components: usize,
}

impl DumpHeader {
    pub fn grid(&self) -> Result<Grid> {
        match (self.nz, self.lz) {
            (Some(nz), Some(lz)) => Grid::new_3d(self.nx, self.ny, nz, self.lx, self.ly, lz),
            _ => Grid::new_2d(self.nx, self.ny, self.lx, self.ly),
        }
    }
}

/// Writes one JSON header line followed by little-endian f64 values.
pub fn write_dump<F: Field, W: Write>(w: &mut W, f: &F) -> Result<()> {
    let g = f.grid();
    let three = g.dim() == 3;
    let header = DumpHeader {
        nx: g.n(0),
        ny: g.n(1),
        lx: g.extent(0),
        ly: g.extent(1),
        nz: three.then(|| g.n(2)),
        lz: three.then(|| g.extent(2)),
        kind: FieldKind::of(f),
        components: f.components(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(f.data().len() * 8);
    for v in f.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a dump back into a field of type `F`.
pub fn read_dump<F: Field, R: BufRead>(r: &mut R) -> Result<F> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: DumpHeader = serde_json::from_str(line.trim_end())?;
    let grid = header.grid()?;
    let k = header.kind.components(grid.dim());
    if k != header.components {
        return Err(Error::InvalidParameter(format!(
            "header lists {} components for a {:?} field",
            header.components, header.kind
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != grid.cell_count() * k * 8 {
        return Err(Error::InvalidParameter(format!(
            "expected {} payload bytes, found {}",
            grid.cell_count() * k * 8,
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    if F::components_on(&grid) != k {
        return Err(Error::InvalidParameter(format!(
            "dump holds a {:?} field",
            header.kind
        )));
    }
    Ok(F::from_parts(grid, data))
}
