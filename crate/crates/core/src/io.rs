//! Flat binary tensor container.
//!
//! Layout, all little-endian:
//!
//! | bytes  | content                          |
//! |--------|----------------------------------|
//! | 0..4   | magic `ISA4`                     |
//! | 4..20  | dims `B, H, S, D` as `u32` each  |
//! | 20..   | `B*H*S*D` elements in row-major order |
//!
//! The element width is not stored; readers are told which type to expect.
//! Several containers may follow each other in one stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use crate::element::{Element, Precision};
use crate::error::{IsaError, Result};
use crate::layout::IclLayout;
use crate::tensor::{Dims, Tensor4};

pub const MAGIC: &[u8; 4] = b"ISA4";
pub const HEADER_LEN: usize = 20;

pub fn encode<T: Element>(t: &Tensor4<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.as_slice().len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    for d in t.dims().as_array() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.as_slice() {
        x.write_le(&mut out);
    }
    out
}

pub fn write_tensor<T: Element, W: Write>(w: &mut W, t: &Tensor4<T>) -> Result<()> {
    for d in t.dims().as_array() {
        if d > u32::MAX as usize {
            return Err(IsaError::layout(format!("dimension {d} does not fit the container header")));
        }
    }
    w.write_all(&encode(t))?;
    Ok(())
}

/// Reader that remembers how many bytes it has consumed, for error offsets.
pub struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub fn new(inner: R) -> Self {
        OffsetReader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(IsaError::Format {
                        offset: self.offset + got as u64,
                        message: format!("truncated {what}: expected {} bytes, found {got}", buf.len()),
                    })
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    /// True when no bytes remain.
    pub fn at_end(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(true),
                Ok(_) => {
                    return Err(IsaError::Format {
                        offset: self.offset,
                        message: "trailing bytes after last tensor".into(),
                    })
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub fn read_tensor<T: Element, R: Read>(r: &mut OffsetReader<R>) -> Result<Tensor4<T>> {
    let start = r.offset();
    let mut header = [0u8; HEADER_LEN];
    r.fill(&mut header, "header")?;
    if &header[..4] != MAGIC {
        return Err(IsaError::Format { offset: start, message: format!("bad magic {:?}", &header[..4]) });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    }
    let dims = Dims::new(dims[0], dims[1], dims[2], dims[3]);
    if dims.batch == 0 || dims.heads == 0 || dims.dim == 0 {
        return Err(IsaError::Format { offset: start + 4, message: format!("invalid dims {dims}") });
    }
    let n = dims.len();
    let mut payload = vec![0u8; n * T::BYTES];
    r.fill(&mut payload, "payload")?;
    let data: Vec<T> = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
        return Err(IsaError::Format {
            offset: start + (HEADER_LEN + pos * T::BYTES) as u64,
            message: "non-finite element".into(),
        });
    }
    Tensor4::new(dims, data)
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor4<T>> {
    let mut r = OffsetReader::new(bytes);
    let t = read_tensor(&mut r)?;
    r.at_end()?;
    Ok(t)
}

pub fn save_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor4<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Element>(path: impl AsRef<Path>) -> Result<Tensor4<T>> {
    let mut r = OffsetReader::new(BufReader::new(File::open(path)?));
    let t = read_tensor(&mut r)?;
    r.at_end()?;
    Ok(t)
}

/// Sidecar text header: three lines holding `L_src`, `L_ctx` and the precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sidecar {
    pub icl: IclLayout,
    pub precision: Precision,
}

impl Sidecar {
    pub fn render(&self) -> String {
        format!("{}\n{}\n{}\n", self.icl.src_len, self.icl.ctx_len, self.precision)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.len() != 3 {
            return Err(IsaError::Validation(format!("sidecar needs 3 lines, found {}", lines.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| IsaError::Validation(format!("sidecar {what} '{s}' is not a count")))
        };
        let src = num(lines[0], "L_src")?;
        let ctx = num(lines[1], "L_ctx")?;
        let precision = lines[2].parse().map_err(|_| IsaError::Validation(format!("bad precision '{}'", lines[2])))?;
        let icl = IclLayout::new(src, ctx).map_err(|e| IsaError::Validation(e.to_string()))?;
        Ok(Sidecar { icl, precision })
    }
}

/// Path of the sidecar header belonging to a tensor file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}
