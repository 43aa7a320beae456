//! Fixed-rate `.hqa` blobs and rate accounting.
//!
//! Layout (all integers big-endian):
//!
//! | offset | size | field              |
//! |--------|------|--------------------|
//! | 0      | 4    | magic `b"HQA1"`    |
//! | 4      | 1    | version (1)        |
//! | 5      | 1    | layer index        |
//! | 6      | 2    | grid height        |
//! | 8      | 2    | grid width         |
//! | 10     | 2    | codebook size N    |
//! | 12     | 4    | payload bit length |
//! | 16     | …    | payload            |
//!
//! The payload packs each index in `log2 N` bits, most significant bit
//! first, row-major over the grid, zero-padded to a whole byte. Decoding is
//! strict: the bit length must match the grid, the byte count must match the
//! bit length, and padding bits must be zero.

use crate::error::{HqaError, Result};

pub const MAGIC: [u8; 4] = *b"HQA1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlobHeader {
    pub version: u8,
    pub layer: u8,
    pub grid_h: u16,
    pub grid_w: u16,
    pub codebook_size: u16,
    pub payload_bits: u32,
}

/// Decoded blob: indices in row-major grid order plus the header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedBlob {
    pub header: BlobHeader,
    pub indices: Vec<usize>,
}

/// Bits per index for a power-of-two codebook.
pub fn bits_per_index(codebook_size: usize) -> Result<u32> {
    if codebook_size < 2 || !codebook_size.is_power_of_two() {
        return Err(HqaError::Unsupported(format!(
            "codebook size {codebook_size} is not a power of two ≥ 2"
        )));
    }
    Ok(codebook_size.trailing_zeros())
}

pub fn serialize(
    indices: &[usize],
    layer: u8,
    grid: (usize, usize),
    codebook_size: usize,
) -> Result<Vec<u8>> {
    let b = bits_per_index(codebook_size)?;
    let n_code = u16::try_from(codebook_size).map_err(|_| {
        HqaError::Unsupported(format!(
            "codebook size {codebook_size} exceeds 16-bit header field"
        ))
    })?;
    let (gh, gw) = (
        u16::try_from(grid.0)
            .map_err(|_| HqaError::Unsupported("grid height exceeds 65535".into()))?,
        u16::try_from(grid.1)
            .map_err(|_| HqaError::Unsupported("grid width exceeds 65535".into()))?,
    );
    if indices.len() != grid.0 * grid.1 {
        return Err(HqaError::Argument {
            op: "serialize",
            detail: format!("{} indices for a {}×{} grid", indices.len(), grid.0, grid.1),
        });
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= codebook_size) {
        return Err(HqaError::Range {
            index: bad,
            size: codebook_size,
        });
    }
    let bits = u32::try_from(indices.len() as u64 * b as u64)
        .map_err(|_| HqaError::Unsupported("payload exceeds 2^32 bits".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + (bits as usize).div_ceil(8));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(layer);
    out.extend_from_slice(&gh.to_be_bytes());
    out.extend_from_slice(&gw.to_be_bytes());
    out.extend_from_slice(&n_code.to_be_bytes());
    out.extend_from_slice(&bits.to_be_bytes());

    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &i in indices {
        acc = (acc << b) | i as u64;
        filled += b;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1u64 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BlobError {
    #[error("blob shorter than the {HEADER_LEN}-byte header")]
    TruncatedHeader,
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("codebook size {0} is not a power of two ≥ 2")]
    CodebookSize(u16),
    #[error("payload bit length {found} does not match grid ({expected})")]
    BitLength { expected: u64, found: u32 },
    #[error("payload has {found} bytes, expected {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error("non-zero padding bits")]
    Padding,
}

impl From<BlobError> for HqaError {
    fn from(e: BlobError) -> Self {
        HqaError::Parse(e.to_string())
    }
}

/// Exact inverse of [`serialize`]; every structural defect has its own
/// [`BlobError`].
pub fn deserialize(bytes: &[u8]) -> std::result::Result<CompressedBlob, BlobError> {
    if bytes.len() < HEADER_LEN {
        return Err(BlobError::TruncatedHeader);
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(BlobError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(BlobError::Version(bytes[4]));
    }
    let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
    let header = BlobHeader {
        version: bytes[4],
        layer: bytes[5],
        grid_h: u16_at(6),
        grid_w: u16_at(8),
        codebook_size: u16_at(10),
        payload_bits: u32::from_be_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]),
    };
    let n = header.codebook_size;
    if n < 2 || !n.is_power_of_two() {
        return Err(BlobError::CodebookSize(n));
    }
    let b = n.trailing_zeros();
    let count = header.grid_h as usize * header.grid_w as usize;
    let expected_bits = count as u64 * b as u64;
    if expected_bits != header.payload_bits as u64 {
        return Err(BlobError::BitLength {
            expected: expected_bits,
            found: header.payload_bits,
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let expected_bytes = (header.payload_bits as usize).div_ceil(8);
    if payload.len() != expected_bytes {
        return Err(BlobError::PayloadLength {
            expected: expected_bytes,
            found: payload.len(),
        });
    }
    let mut indices = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut avail = 0u32;
    let mut bytes_iter = payload.iter();
    for _ in 0..count {
        while avail < b {
            acc = (acc << 8) | *bytes_iter.next().expect("length checked") as u64;
            avail += 8;
        }
        avail -= b;
        indices.push(((acc >> avail) & ((1u64 << b) - 1)) as usize);
        acc &= (1u64 << avail) - 1;
    }
    if acc != 0 {
        return Err(BlobError::Padding);
    }
    Ok(CompressedBlob { header, indices })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateReport {
    pub rate_bits: u64,
    pub original_bits: u64,
    pub ratio: f64,
}

/// Transmitted bits for a `grid` of indices into an `N`-code book, against
/// an uncompressed `(H, W, C)` image at `bits_per_value` bits.
pub fn rate_report(
    grid: (usize, usize),
    codebook_size: usize,
    original_shape: (usize, usize, usize),
    bits_per_value: u32,
) -> Result<RateReport> {
    let b = bits_per_index(codebook_size)? as u64;
    let rate_bits = (grid.0 * grid.1) as u64 * b;
    let (h, w, c) = original_shape;
    let original_bits = (h * w * c) as u64 * bits_per_value as u64;
    Ok(RateReport {
        rate_bits,
        original_bits,
        ratio: original_bits as f64 / rate_bits as f64,
    })
}
