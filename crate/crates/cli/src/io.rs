//! Serialization: newline-delimited diagnostics, legacy-VTK ASCII field
//! dumps for external tools, and a raw little-endian binary dump whose
//! round trip is bit-exact.

use std::fs::File;
use std::io::{BufWriter, Read as _, Write as _};
use std::path::Path;

use dmk_core::{Grid64, IndexKind, Signature, TensorField64};

use crate::report::DiagnosticsRecord;
use crate::CliError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Writes one JSON object per line, keys in the diagnostics contract order.
pub fn write_ndjson(path: &Path, records: &[DiagnosticsRecord]) -> Result<(), CliError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn component_name(base: &str, signature: Signature, comp: usize) -> String {
    let rank = signature.rank();
    let mut digits = String::with_capacity(rank);
    let mut rest = comp;
    let mut divisor = 3usize.pow(rank.saturating_sub(1) as u32);
    for _ in 0..rank {
        digits.push(char::from(b'0' + (rest / divisor) as u8));
        rest %= divisor;
        divisor = (divisor / 3).max(1);
    }
    format!("{base}_{digits}")
}

/// Writes a field as legacy-VTK STRUCTURED_POINTS ASCII. Components become
/// named FIELD arrays; values run with the first grid axis fastest, as the
/// format expects.
pub fn write_vtk(path: &Path, name: &str, field: &TensorField64) -> Result<(), CliError> {
    let grid = field.grid();
    let dims = grid.dims();
    let spacing = grid.spacing();
    let nn = grid.node_count();
    let signature = field.signature();
    let ncomp = signature.component_count();

    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut emit = |text: String| out.write_all(text.as_bytes());
    emit(format!(
        "# vtk DataFile Version 3.0\n{name}\nASCII\nDATASET STRUCTURED_POINTS\n\
         DIMENSIONS {} {} {}\nORIGIN 0 0 0\nSPACING {:.17e} {:.17e} {:.17e}\n\
         POINT_DATA {nn}\nFIELD {name} {ncomp}\n",
        dims[0], dims[1], dims[2], spacing[0], spacing[1], spacing[2]
    ))
    .map_err(io_err(path))?;

    for comp in 0..ncomp {
        let values = field.component(comp);
        emit(format!("{} 1 {nn} double\n", component_name(name, signature, comp)))
            .map_err(io_err(path))?;
        for i3 in 0..dims[2] {
            for i2 in 0..dims[1] {
                for i1 in 0..dims[0] {
                    emit(format!("{:.17e}\n", values[grid.linear([i1, i2, i3])]))
                        .map_err(io_err(path))?;
                }
            }
        }
    }
    out.flush().map_err(io_err(path))
}

const RAW_MAGIC: &[u8; 4] = b"TDGF";

/// Writes the raw little-endian dump: magic, 3 x u32 dims, u32 rank, one
/// signature byte per index, then the component-major f64 payload.
pub fn write_raw(path: &Path, field: &TensorField64) -> Result<(), CliError> {
    let grid = field.grid();
    let dims = grid.dims();
    let signature = field.signature();

    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    out.write_all(RAW_MAGIC).map_err(io_err(path))?;
    for d in dims {
        out.write_all(&(d as u32).to_le_bytes()).map_err(io_err(path))?;
    }
    out.write_all(&(signature.rank() as u32).to_le_bytes()).map_err(io_err(path))?;
    for &kind in signature.kinds() {
        out.write_all(&[kind as u8]).map_err(io_err(path))?;
    }
    for &v in field.data() {
        out.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads a raw dump back. The header carries no box lengths, so the caller
/// supplies them (they come from the same scenario configuration that
/// produced the dump).
pub fn read_raw(path: &Path, lengths: [f64; 3]) -> Result<TensorField64, CliError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;

    let bad = |what: &str| CliError::Config(format!("{}: {what}", path.display()));
    if bytes.len() < 20 || &bytes[0..4] != RAW_MAGIC {
        return Err(bad("not a TDGF dump (bad magic or truncated header)"));
    }
    let mut dims = [0usize; 3];
    for (axis, d) in dims.iter_mut().enumerate() {
        let at = 4 + 4 * axis;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    }
    let rank = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if rank > 8 || bytes.len() < 20 + rank {
        return Err(bad("implausible rank in header"));
    }
    let mut kinds = Vec::with_capacity(rank);
    for &code in &bytes[20..20 + rank] {
        kinds.push(match code {
            0 => IndexKind::RealUpper,
            1 => IndexKind::RealLower,
            2 => IndexKind::BurgersUpper,
            3 => IndexKind::BurgersLower,
            other => return Err(bad(&format!("unknown index-kind byte {other}"))),
        });
    }
    let signature = Signature::new(&kinds).map_err(CliError::Numeric)?;
    let grid = Grid64::new(dims, lengths).map_err(CliError::Numeric)?;

    let payload = &bytes[20 + rank..];
    let expected = signature.component_count() * grid.node_count();
    if payload.len() != expected * 8 {
        return Err(bad(&format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            expected * 8
        )));
    }
    let mut field = TensorField64::zeros(grid, signature);
    for (slot, chunk) in field.data_mut().iter_mut().zip(payload.chunks_exact(8)) {
        *slot = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(field)
}
