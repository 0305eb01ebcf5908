//! 8-bit weight quantization, bit packing and the `.vqrf` container.
//!
//! The byte layout is specified in `FORMAT.md` at the repository root. Two
//! auxiliary formats live here as well: `VQRG`, an uncompressed dense grid,
//! and `VQCK`, an uncompressed 32-bit checkpoint of a [`VQModel`] used to
//! measure intermediate stage sizes.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use half::f16;

use crate::error::{Error, Result};
use crate::field::{
    feature_dim, Codebook, DenseGrid, GridDims, VQModel, VoxelClass, VoxelClassMask,
};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"VQRF";
pub const VERSION: u16 = 1;
const LITTLE_ENDIAN: u8 = 1;
/// DEFLATE level used for every section.
pub const DEFLATE_LEVEL: u32 = 9;

/// Uniformly quantized values: `v ~ offset + q * scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedArray {
    pub data: Vec<u8>,
    pub scale: f32,
    pub offset: f32,
}

impl QuantizedArray {
    pub fn count(&self) -> usize {
        self.data.len()
    }
}

/// Maps `values` to `0..=255` over their own range with round half away from
/// zero. A constant array gets scale 1. An empty array gets scale 1 and
/// offset 0.
pub fn quantize_u8<T: Real>(values: &[T]) -> Result<QuantizedArray> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    if values.is_empty() {
        return Ok(QuantizedArray {
            data: Vec::new(),
            scale: 1.0,
            offset: 0.0,
        });
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v.f64()), b.max(v.f64()))
    });
    if hi == lo {
        return Ok(QuantizedArray {
            data: vec![0; values.len()],
            scale: 1.0,
            offset: lo as f32,
        });
    }
    let range = hi - lo;
    let data = values
        .iter()
        .map(|v| ((v.f64() - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(QuantizedArray {
        data,
        scale: (range / 255.0) as f32,
        offset: lo as f32,
    })
}

pub fn dequantize_u8<T: Real>(q: &QuantizedArray) -> Vec<T> {
    let (s, o) = (q.scale as f64, q.offset as f64);
    q.data.iter().map(|&b| T::of(o + b as f64 * s)).collect()
}

/// Packs symbols of `bits` bits each, LSB first within a byte and
/// little-endian across bytes. The last byte is zero-padded.
pub fn pack_bits(symbols: &[u32], bits: u32) -> Result<Vec<u8>> {
    if !(1..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bit width {bits} outside 1..=16")));
    }
    let mut out = vec![0u8; (symbols.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &s in symbols {
        if s >> bits != 0 {
            return Err(Error::SymbolOverflow { symbol: s, bits });
        }
        for b in 0..bits {
            if (s >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_bits`] for `count` symbols.
pub fn unpack_bits(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<u32>> {
    if !(1..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bit width {bits} outside 1..=16")));
    }
    if bytes.len() < (count * bits as usize).div_ceil(8) {
        return Err(Error::Truncated("packed symbols"));
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut s = 0u32;
        for b in 0..bits {
            s |= (((bytes[pos / 8] >> (pos % 8)) & 1) as u32) << b;
            pos += 1;
        }
        out.push(s);
    }
    Ok(out)
}

/// Bits per index for a codebook of `k` codes: `ceil(log2 k)`, at least 1.
pub fn index_bits(k: usize) -> u32 {
    if k <= 2 {
        1
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// Rounds every code to the nearest binary16 value, the precision the
/// container stores.
pub fn snap_codebook_f16<T: Real>(codebook: &mut Codebook<T>) {
    for c in codebook.codes.iter_mut() {
        *c = T::of(f16::from_f64(c.f64()).to_f64());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SectionId {
    Mask = 1,
    Codebook = 2,
    Indices = 3,
    Density = 4,
    Kept = 5,
    Meta = 6,
}

impl SectionId {
    pub const ORDER: [SectionId; 6] = [
        SectionId::Mask,
        SectionId::Codebook,
        SectionId::Indices,
        SectionId::Density,
        SectionId::Kept,
        SectionId::Meta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SectionId::Mask => "mask",
            SectionId::Codebook => "codebook",
            SectionId::Indices => "indices",
            SectionId::Density => "density",
            SectionId::Kept => "kept",
            SectionId::Meta => "meta",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SectionEntry {
    pub id: u8,
    pub raw_len: u64,
    pub compressed_len: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContainerHeader {
    pub version: u16,
    pub sh_degree: u8,
    pub shape: [u32; 3],
    pub channels: u16,
    pub codebook_size: u32,
    /// PRUNED, VQ, KEPT.
    pub counts: [u64; 3],
    pub beta_p: f32,
    pub beta_k: f32,
    pub density_q: (f32, f32),
    pub kept_q: (f32, f32),
    pub sections: Vec<SectionEntry>,
}

/// Fixed header length in bytes.
pub const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 12 + 2 + 4 + 24 + 8 + 16 + 1 + 6 * 17;

fn deflate(data: &[u8]) -> Vec<u8> {
    let mut e = DeflateEncoder::new(Vec::new(), Compression::new(DEFLATE_LEVEL));
    e.write_all(data).expect("writing to memory");
    e.finish().expect("writing to memory")
}

fn inflate(data: &[u8], expected: usize, section: &'static str) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(expected);
    DeflateDecoder::new(data)
        .take(expected as u64 + 1)
        .read_to_end(&mut out)
        .map_err(|e| Error::Inflate {
            section,
            reason: e.to_string(),
        })?;
    if out.len() != expected {
        return Err(Error::Inflate {
            section,
            reason: format!("expected {expected} bytes, got {}", out.len()),
        });
    }
    Ok(out)
}

/// Compressed size of `data` at the container's DEFLATE settings.
pub fn deflated_len(data: &[u8]) -> usize {
    deflate(data).len()
}

/// Serializes a model. Mask, index and codebook sections are lossless (the
/// codebook at binary16); density and kept features are quantized to 8 bits.
pub fn encode_container<T: Real>(model: &VQModel<T>, betas: [f32; 2]) -> Result<Vec<u8>> {
    model.validate()?;
    let c = model.feature_dim();
    let k = model.codebook.len();
    let counts = model.mask.counts();
    let labels: Vec<u32> = model.mask.labels.iter().map(|l| *l as u32).collect();
    let mask = pack_bits(&labels, 2)?;
    let mut codebook = Vec::with_capacity(k * c * 2);
    for v in &model.codebook.codes {
        codebook.extend_from_slice(&f16::from_f64(v.f64()).to_le_bytes());
    }
    let bits = index_bits(k);
    let indices = if model.indices.is_empty() {
        Vec::new()
    } else {
        pack_bits(&model.indices, bits)?
    };
    let dq = quantize_u8(&model.density)?;
    let kq = quantize_u8(&model.kept_features)?;
    let mut meta = Vec::with_capacity(49);
    for x in model.dims.aabb_min.iter().chain(&model.dims.aabb_max) {
        meta.extend_from_slice(&x.to_le_bytes());
    }
    meta.push(bits as u8);

    let raw = [mask, codebook, indices, dq.data.clone(), kq.data.clone(), meta];
    let packed: Vec<Vec<u8>> = raw.iter().map(|s| deflate(s)).collect();

    let mut out = Vec::with_capacity(HEADER_LEN + packed.iter().map(Vec::len).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(LITTLE_ENDIAN);
    out.push(model.sh_degree);
    for n in model.dims.shape() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(&(c as u16).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    for n in [counts.pruned, counts.vq, counts.kept] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for x in [betas[0], betas[1], dq.scale, dq.offset, kq.scale, kq.offset] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.push(SectionId::ORDER.len() as u8);
    for ((id, r), p) in SectionId::ORDER.iter().zip(&raw).zip(&packed) {
        out.push(*id as u8);
        out.extend_from_slice(&(r.len() as u64).to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    }
    debug_assert_eq!(out.len(), HEADER_LEN);
    for p in &packed {
        out.extend_from_slice(p);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "header")?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, "header")?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "header")?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, "header")?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, "header")?.try_into().unwrap()))
    }
}

/// Parses and checks the fixed header.
pub fn read_header(bytes: &[u8]) -> Result<ContainerHeader> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { expected: "VQRF" });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if cur.u8()? != LITTLE_ENDIAN {
        return Err(Error::Malformed("unsupported byte order".into()));
    }
    let sh_degree = cur.u8()?;
    let shape = [cur.u32()?, cur.u32()?, cur.u32()?];
    let channels = cur.u16()?;
    let codebook_size = cur.u32()?;
    let counts = [cur.u64()?, cur.u64()?, cur.u64()?];
    let beta_p = cur.f32()?;
    let beta_k = cur.f32()?;
    let density_q = (cur.f32()?, cur.f32()?);
    let kept_q = (cur.f32()?, cur.f32()?);
    let n = cur.u8()? as usize;
    if n != SectionId::ORDER.len() {
        return Err(Error::Malformed(format!("expected 6 sections, found {n}")));
    }
    let mut sections = Vec::with_capacity(n);
    for want in SectionId::ORDER {
        let e = SectionEntry {
            id: cur.u8()?,
            raw_len: cur.u64()?,
            compressed_len: cur.u64()?,
        };
        if e.id != want as u8 {
            return Err(Error::Malformed(format!("section {} out of order", e.id)));
        }
        sections.push(e);
    }
    Ok(ContainerHeader {
        version,
        sh_degree,
        shape,
        channels,
        codebook_size,
        counts,
        beta_p,
        beta_k,
        density_q,
        kept_q,
        sections,
    })
}

/// Decoded container contents.
#[derive(Clone, Debug)]
pub struct Decoded<T> {
    pub header: ContainerHeader,
    pub model: VQModel<T>,
}

pub fn decode_container<T: Real>(bytes: &[u8]) -> Result<VQModel<T>> {
    Ok(decode_container_full(bytes)?.model)
}

pub fn decode_container_full<T: Real>(bytes: &[u8]) -> Result<Decoded<T>> {
    let h = read_header(bytes)?;
    let mut cur = Cursor {
        bytes,
        pos: HEADER_LEN,
    };
    let mut raw: Vec<Vec<u8>> = Vec::with_capacity(6);
    for (e, id) in h.sections.iter().zip(SectionId::ORDER) {
        let name = id.name();
        let len = usize::try_from(e.compressed_len).map_err(|_| Error::Truncated(name))?;
        let data = cur.take(len, name)?;
        let raw_len = usize::try_from(e.raw_len).map_err(|_| Error::Malformed(name.into()))?;
        raw.push(inflate(data, raw_len, name)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Malformed("trailing bytes after last section".into()));
    }
    let [mask_b, book_b, idx_b, dens_b, kept_b, meta_b]: [Vec<u8>; 6] = raw.try_into().unwrap();

    if meta_b.len() != 49 {
        return Err(Error::Malformed("meta section length".into()));
    }
    let f = |i: usize| f64::from_le_bytes(meta_b[i * 8..i * 8 + 8].try_into().unwrap());
    let dims = GridDims::new(
        h.shape.map(|n| n as usize),
        [f(0), f(1), f(2)],
        [f(3), f(4), f(5)],
    )?;
    let bits = meta_b[48] as u32;
    let n = dims.len();
    let c = h.channels as usize;
    if c != feature_dim(h.sh_degree) {
        return Err(Error::Malformed("feature width does not match SH degree".into()));
    }
    let labels = unpack_bits(&mask_b, 2, n)?
        .into_iter()
        .map(|b| VoxelClass::from_bits(b).ok_or_else(|| Error::Malformed("mask value 3".into())))
        .collect::<Result<Vec<_>>>()?;
    let mask = VoxelClassMask { labels };
    let counts = mask.counts();
    if [counts.pruned, counts.vq, counts.kept].map(|x| x as u64) != h.counts {
        return Err(Error::Malformed("class counts disagree with mask".into()));
    }
    let k = h.codebook_size as usize;
    if book_b.len() != k * c * 2 {
        return Err(Error::Malformed("codebook section length".into()));
    }
    let codes = book_b
        .chunks_exact(2)
        .map(|b| T::of(f16::from_le_bytes([b[0], b[1]]).to_f64()))
        .collect();
    let codebook = if k == 0 {
        Codebook::empty(c)
    } else {
        Codebook::new(c, codes)?
    };
    let indices = if counts.vq == 0 {
        Vec::new()
    } else {
        if bits != index_bits(k) {
            return Err(Error::Malformed("index width does not match codebook".into()));
        }
        unpack_bits(&idx_b, bits, counts.vq)?
    };
    if indices.iter().any(|&i| i as usize >= k) {
        return Err(Error::CorruptIndexStream);
    }
    if dens_b.len() != counts.vq + counts.kept || kept_b.len() != counts.kept * c {
        return Err(Error::Malformed("quantized section length".into()));
    }
    let density = dequantize_u8(&QuantizedArray {
        data: dens_b,
        scale: h.density_q.0,
        offset: h.density_q.1,
    });
    let kept_features = dequantize_u8(&QuantizedArray {
        data: kept_b,
        scale: h.kept_q.0,
        offset: h.kept_q.1,
    });
    let model = VQModel {
        dims,
        sh_degree: h.sh_degree,
        mask,
        codebook,
        indices,
        kept_features,
        density,
    };
    model.validate()?;
    Ok(Decoded { header: h, model })
}

/// Compressed bytes per section, in file order.
pub fn reported_size_breakdown(bytes: &[u8]) -> Result<Vec<(&'static str, u64)>> {
    let h = read_header(bytes)?;
    Ok(SectionId::ORDER
        .iter()
        .zip(&h.sections)
        .map(|(id, e)| (id.name(), e.compressed_len))
        .collect())
}

pub fn size_breakdown_csv(bytes: &[u8]) -> Result<String> {
    let mut out = String::from("section,bytes\n");
    out.push_str(&format!("header,{HEADER_LEN}\n"));
    for (name, n) in reported_size_breakdown(bytes)? {
        out.push_str(&format!("{name},{n}\n"));
    }
    out.push_str(&format!("total,{}\n", bytes.len()));
    Ok(out)
}

/// Uncompressed dense grid: `"VQRG"`, sh degree `u8`, shape `3 x u32`,
/// bounds `6 x f64`, then density and features as `f32`, little-endian.
pub fn grid_to_bytes<T: Real>(grid: &DenseGrid<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(65 + 4 * (grid.density.len() + grid.features.len()));
    out.extend_from_slice(b"VQRG");
    out.push(grid.sh_degree);
    for n in grid.dims.shape() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for x in grid.dims.aabb_min.iter().chain(&grid.dims.aabb_max) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for v in grid.density.iter().chain(&grid.features) {
        out.extend_from_slice(&v.f32().to_le_bytes());
    }
    out
}

fn read_dims(cur: &mut Cursor) -> Result<GridDims> {
    let shape = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let mut b = [0f64; 6];
    for x in b.iter_mut() {
        *x = f64::from_le_bytes(cur.take(8, "bounds")?.try_into().unwrap());
    }
    GridDims::new(shape, [b[0], b[1], b[2]], [b[3], b[4], b[5]])
}

fn read_f32s<T: Real>(cur: &mut Cursor, n: usize, what: &'static str) -> Result<Vec<T>> {
    let bytes = cur.take(n.checked_mul(4).ok_or(Error::Truncated(what))?, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect())
}

pub fn grid_from_bytes<T: Real>(bytes: &[u8]) -> Result<DenseGrid<T>> {
    if bytes.len() < 4 || &bytes[..4] != b"VQRG" {
        return Err(Error::BadMagic { expected: "VQRG" });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let deg = cur.u8()?;
    let dims = read_dims(&mut cur)?;
    let n = dims.len();
    let density = read_f32s(&mut cur, n, "density")?;
    let features = read_f32s(&mut cur, n * feature_dim(deg), "features")?;
    if cur.pos != bytes.len() {
        return Err(Error::Malformed("trailing bytes in grid".into()));
    }
    DenseGrid::from_parts(dims, deg, density, features)
}

pub fn write_grid<T: Real>(grid: &DenseGrid<T>, path: &Path) -> Result<()> {
    std::fs::write(path, grid_to_bytes(grid))?;
    Ok(())
}

pub fn read_grid<T: Real>(path: &Path) -> Result<DenseGrid<T>> {
    grid_from_bytes(&std::fs::read(path)?)
}

/// Uncompressed 32-bit model checkpoint: `"VQCK"`, sh degree `u8`, shape,
/// bounds, `K` as `u32`, one label byte per voxel, codes, indices as `u32`,
/// kept features and densities as `f32`, little-endian.
pub fn checkpoint_to_bytes<T: Real>(model: &VQModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"VQCK");
    out.push(model.sh_degree);
    for n in model.dims.shape() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for x in model.dims.aabb_min.iter().chain(&model.dims.aabb_max) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&(model.codebook.len() as u32).to_le_bytes());
    out.extend(model.mask.labels.iter().map(|l| *l as u8));
    for v in &model.codebook.codes {
        out.extend_from_slice(&v.f32().to_le_bytes());
    }
    for i in &model.indices {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for v in model.kept_features.iter().chain(&model.density) {
        out.extend_from_slice(&v.f32().to_le_bytes());
    }
    out
}

pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8]) -> Result<VQModel<T>> {
    if bytes.len() < 4 || &bytes[..4] != b"VQCK" {
        return Err(Error::BadMagic { expected: "VQCK" });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let deg = cur.u8()?;
    let dims = read_dims(&mut cur)?;
    let k = cur.u32()? as usize;
    let c = feature_dim(deg);
    let labels = cur
        .take(dims.len(), "mask")?
        .iter()
        .map(|&b| VoxelClass::from_bits(b as u32).ok_or_else(|| Error::Malformed("label".into())))
        .collect::<Result<Vec<_>>>()?;
    let mask = VoxelClassMask { labels };
    let counts = mask.counts();
    let codes = read_f32s(&mut cur, k * c, "codebook")?;
    let indices = cur
        .take(counts.vq * 4, "indices")?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let kept_features = read_f32s(&mut cur, counts.kept * c, "kept")?;
    let density = read_f32s(&mut cur, counts.vq + counts.kept, "density")?;
    if cur.pos != bytes.len() {
        return Err(Error::Malformed("trailing bytes in checkpoint".into()));
    }
    let model = VQModel {
        dims,
        sh_degree: deg,
        mask,
        codebook: if k == 0 { Codebook::empty(c) } else { Codebook::new(c, codes)? },
        indices,
        kept_features,
        density,
    };
    model.validate()?;
    Ok(model)
}
