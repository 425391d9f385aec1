//! On-disk artifacts: binary field snapshots, run manifests, and CSV norm
//! tables. Everything written here is deterministic for a given run, so two
//! identical runs produce byte-identical output trees.
//!
//! Snapshot layout (all little-endian):
//!   bytes 0..4   magic "PHI4"
//!   u32          format version (currently 1)
//!   u32          spatial dimension d
//!   u32          modes per axis N
//!   u8           payload kind: 0 = real samples, 1 = spectral coefficients
//!   f64          time stamp t
//!   payload      N^d f64 (real) or N^d (re, im) f64 pairs (spectral),
//!                lexicographic with axis 0 slowest.

use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::field::{RealField, SpectralField};
use crate::grid::TorusGrid;
use crate::solver::NormRow;
use crate::trees::RenormConstants;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"PHI4";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("truncated snapshot: expected at least {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("bad magic bytes (not a field snapshot)")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    BadVersion(u32),
    #[error("unsupported payload kind {0}")]
    BadKind(u8),
    #[error("invalid grid in snapshot header: {0}")]
    BadGrid(#[from] crate::grid::GridError),
    #[error("non-finite value at payload index {0}")]
    NonFinite(usize),
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("manifest parse failure: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// A decoded snapshot: a time stamp plus either a physical or spectral field.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub payload: SnapshotPayload,
}

#[derive(Debug, Clone)]
pub enum SnapshotPayload {
    Real(RealField),
    Spectral(SpectralField),
}

impl SnapshotPayload {
    pub fn grid(&self) -> TorusGrid {
        match self {
            SnapshotPayload::Real(f) => f.grid(),
            SnapshotPayload::Spectral(f) => f.grid(),
        }
    }
}

/// Serialize a snapshot to bytes.
pub fn encode_snapshot(t: f64, payload: &SnapshotPayload) -> Vec<u8> {
    let grid = payload.grid();
    let scalar_count = match payload {
        SnapshotPayload::Real(_) => grid.len(),
        SnapshotPayload::Spectral(_) => 2 * grid.len(),
    };
    let mut out = Vec::with_capacity(25 + 8 * scalar_count);
    out.extend_from_slice(&SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.points_per_axis() as u32).to_le_bytes());
    match payload {
        SnapshotPayload::Real(f) => {
            out.push(0);
            out.extend_from_slice(&t.to_le_bytes());
            for &v in f.samples() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        SnapshotPayload::Spectral(f) => {
            out.push(1);
            out.extend_from_slice(&t.to_le_bytes());
            for c in f.coefficients() {
                out.extend_from_slice(&c.re.to_le_bytes());
                out.extend_from_slice(&c.im.to_le_bytes());
            }
        }
    }
    out
}

/// Parse a snapshot from bytes. Rejects bad magic, unknown versions or
/// payload kinds, invalid grids, truncation, trailing bytes, and non-finite
/// payload values.
pub fn decode_snapshot(bytes: &[u8]) -> Result<Snapshot, IoError> {
    const HEADER: usize = 4 + 4 + 4 + 4 + 1 + 8;
    if bytes.len() < HEADER {
        return Err(IoError::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    if bytes[0..4] != SNAPSHOT_MAGIC {
        return Err(IoError::BadMagic);
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != SNAPSHOT_VERSION {
        return Err(IoError::BadVersion(version));
    }
    let dim = u32_at(8) as usize;
    let n = u32_at(12) as usize;
    let kind = bytes[16];
    let t = f64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let grid = TorusGrid::new(dim, n)?;
    if !t.is_finite() {
        return Err(IoError::NonFinite(usize::MAX));
    }
    let scalar_count = match kind {
        0 => grid.len(),
        1 => 2 * grid.len(),
        other => return Err(IoError::BadKind(other)),
    };
    let expected = HEADER + 8 * scalar_count;
    if bytes.len() < expected {
        return Err(IoError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(IoError::TrailingBytes);
    }
    let mut scalars = Vec::with_capacity(scalar_count);
    for i in 0..scalar_count {
        let off = HEADER + 8 * i;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(IoError::NonFinite(i));
        }
        scalars.push(v);
    }
    let payload = match kind {
        0 => SnapshotPayload::Real(RealField::from_samples(grid, scalars)),
        _ => SnapshotPayload::Spectral(SpectralField::from_coefficients(
            grid,
            scalars
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect(),
        )),
    };
    Ok(Snapshot { t, payload })
}

pub fn write_snapshot(path: &Path, t: f64, payload: &SnapshotPayload) -> Result<(), IoError> {
    Ok(std::fs::write(path, encode_snapshot(t, payload))?)
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, IoError> {
    decode_snapshot(&std::fs::read(path)?)
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// One produced file, as recorded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Description of a completed run: the full configuration, a hash of its
/// canonical serialization, the renormalization constants in effect, and a
/// checksummed inventory of every output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub config_sha256: String,
    pub constants: RenormConstants,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(config: RunConfig, constants: RenormConstants) -> Self {
        let config_sha256 = sha256_hex(config.to_toml_string().as_bytes());
        Self {
            format_version: SNAPSHOT_VERSION,
            config,
            config_sha256,
            constants,
            files: Vec::new(),
        }
    }

    /// Record a file that already exists on disk, hashing its contents.
    /// `root` is the directory paths are stored relative to.
    pub fn record_file(&mut self, root: &Path, path: &Path) -> Result<(), IoError> {
        let bytes = std::fs::read(path)?;
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.files.push(ManifestEntry {
            path: rel.to_string_lossy().into_owned(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let m: Manifest = serde_json::from_str(text)?;
        m.config.validate().map_err(|e| {
            IoError::Manifest(serde_json::Error::io(std::io::Error::other(e.to_string())))
        })?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        Ok(std::fs::write(path, self.to_json())?)
    }
}

/// Write the per-step norm table as CSV.
pub fn write_norms_csv(path: &Path, rows: &[NormRow]) -> Result<(), IoError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "t,linf_u,besov_u,linf_phi")?;
    for r in rows {
        writeln!(f, "{:.12e},{:.12e},{:.12e},{:.12e}", r.t, r.linf_u, r.besov_u, r.linf_phi)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::forward_transform;
    use crate::trees::{Mollifier, MollifierFamily};

    fn sample_field() -> RealField {
        let grid = TorusGrid::new(2, 8).unwrap();
        RealField::from_fn(grid, |x| {
            (2.0 * std::f64::consts::PI * x[0]).cos() + 0.25 * (4.0 * std::f64::consts::PI * x[1]).sin()
        })
    }

    #[test]
    fn real_snapshot_roundtrip_is_exact() {
        let f = sample_field();
        let bytes = encode_snapshot(0.75, &SnapshotPayload::Real(f.clone()));
        let snap = decode_snapshot(&bytes).unwrap();
        assert_eq!(snap.t, 0.75);
        match snap.payload {
            SnapshotPayload::Real(g) => assert_eq!(g.samples(), f.samples()),
            _ => panic!("wrong payload kind"),
        }
    }

    #[test]
    fn spectral_snapshot_roundtrip_is_exact() {
        let f = forward_transform(&sample_field());
        let bytes = encode_snapshot(0.0, &SnapshotPayload::Spectral(f.clone()));
        let snap = decode_snapshot(&bytes).unwrap();
        match snap.payload {
            SnapshotPayload::Spectral(g) => assert_eq!(g.coefficients(), f.coefficients()),
            _ => panic!("wrong payload kind"),
        }
    }

    #[test]
    fn malformed_snapshots_are_rejected() {
        let good = encode_snapshot(0.0, &SnapshotPayload::Real(sample_field()));
        assert!(matches!(decode_snapshot(&[]), Err(IoError::Truncated { .. })));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_snapshot(&bad), Err(IoError::BadMagic)));
        let mut bad = good.clone();
        bad[4] = 99;
        assert!(matches!(decode_snapshot(&bad), Err(IoError::BadVersion(_))));
        let mut bad = good.clone();
        bad[16] = 2;
        assert!(matches!(decode_snapshot(&bad), Err(IoError::BadKind(2))));
        let mut bad = good.clone();
        bad[8] = 9; // dimension 9
        assert!(matches!(decode_snapshot(&bad), Err(IoError::BadGrid(_))));
        let mut bad = good.clone();
        bad.truncate(good.len() - 1);
        assert!(matches!(decode_snapshot(&bad), Err(IoError::Truncated { .. })));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_snapshot(&bad), Err(IoError::TrailingBytes)));
        let mut bad = good;
        bad[25..33].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_snapshot(&bad), Err(IoError::NonFinite(0))));
    }

    #[test]
    fn manifest_roundtrips_and_hash_is_stable() {
        let cfg = RunConfig::default();
        let grid = cfg.grid();
        let moll = Mollifier::new(MollifierFamily::Sharp, 0.25);
        let constants = crate::trees::RenormConstants {
            a: crate::trees::compute_a(grid, &moll),
            b: 0.1,
            delta: 0.25,
            family: MollifierFamily::Sharp,
        };
        let m1 = Manifest::new(cfg.clone(), constants);
        let m2 = Manifest::from_json(&m1.to_json()).unwrap();
        assert_eq!(m1.config_sha256, m2.config_sha256);
        assert_eq!(
            m1.config_sha256,
            sha256_hex(cfg.to_toml_string().as_bytes())
        );
        assert_eq!(m1.config_sha256.len(), 64);
    }
}
