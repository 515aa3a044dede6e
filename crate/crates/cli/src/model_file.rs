//! Binary factor-matrix files built for exact round-tripping.
//!
//! Layout: magic `LFTM`, format version u8 (currently 1), then the four
//! dimensions (users, services, times, rank) as u32 little-endian, then the
//! user, service, and time matrices as contiguous row-major 64-bit
//! little-endian reals. No padding, no trailing bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use fedlft_core::{LatentFactors, Matrix};

const MAGIC: &[u8; 4] = b"LFTM";
const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    BadVersion(u8),
    #[error("model file truncated")]
    Truncated,
    #[error("model file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("dimension {0} exceeds the file format's u32 range")]
    DimOverflow(&'static str),
}

pub fn save(f: &LatentFactors, path: &Path) -> Result<(), ModelFileError> {
    let mut buf = Vec::with_capacity(
        21 + 8 * (f.users.data().len() + f.services.data().len() + f.times.data().len()),
    );
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    for (dim, name) in [
        (f.users.rows(), "users"),
        (f.services.rows(), "services"),
        (f.times.rows(), "times"),
        (f.rank(), "rank"),
    ] {
        let v = u32::try_from(dim).map_err(|_| ModelFileError::DimOverflow(name))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for m in [&f.users, &f.services, &f.times] {
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = fs::File::create(path)?;
    out.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LatentFactors, ModelFileError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(ModelFileError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    if bytes.len() < 21 {
        return Err(ModelFileError::Truncated);
    }
    if bytes[4] != VERSION {
        return Err(ModelFileError::BadVersion(bytes[4]));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 5 + 4 * i;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("sized")) as usize;
    }
    let [users, services, times, rank] = dims;
    // Checked arithmetic: forged dimensions must fail the length test, not
    // wrap around it.
    let expected = (users as u128 + services as u128 + times as u128) * rank as u128 * 8 + 21;
    if (bytes.len() as u128) < expected {
        return Err(ModelFileError::Truncated);
    }
    let expected = expected as usize;
    if bytes.len() > expected {
        return Err(ModelFileError::TrailingBytes(bytes.len() - expected));
    }
    let mut at = 21;
    let mut read_matrix = |rows: usize| -> Matrix {
        let mut data = Vec::with_capacity(rows * rank);
        for _ in 0..rows * rank {
            data.push(f64::from_le_bytes(bytes[at..at + 8].try_into().expect("sized")));
            at += 8;
        }
        Matrix::from_vec(rows, rank, data).expect("sized above")
    };
    Ok(LatentFactors {
        users: read_matrix(users),
        services: read_matrix(services),
        times: read_matrix(times),
    })
}

/// Human-readable export: one `# <name> rows x cols` header per matrix,
/// then one row per line.
pub fn export_text(f: &LatentFactors, path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for (name, m) in [("users", &f.users), ("services", &f.services), ("times", &f.times)] {
        writeln!(out, "# {} {} x {}", name, m.rows(), m.cols())?;
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
    }
    out.flush()
}
