//! Binary file formats: models (JSSM1), wavefields (JSWF1), eikonal
//! sensitivity records (JSER1), observed data (JSDT1) and PGM snapshots.
//!
//! Each format starts with one ASCII header line; the payload is
//! little-endian. Readers report the byte offset of the first problem.

use std::fs;
use std::path::Path;

use half::f16;

use crate::block::Block;
use crate::eikonal::SensitivityRecord;
use crate::error::{invalid, Error, Result};
use crate::helmholtz::{Precision, WavefieldBatch};
use crate::mesh::RegularGrid;
use crate::scalar::Complex64;

const MAX_HEADER: usize = 512;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

/// Header tokens with their byte offsets, and the payload start.
struct Header<'a> {
    tokens: Vec<(usize, &'a str)>,
    end: usize,
}

fn header<'a>(bytes: &'a [u8], magic: &str) -> Result<Header<'a>> {
    let limit = bytes.len().min(MAX_HEADER);
    let nl = bytes[..limit].iter().position(|&b| b == b'\n').ok_or_else(|| parse_err(limit, "missing header line"))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|e| parse_err(e.valid_up_to(), "header is not ASCII"))?;
    let mut tokens = Vec::new();
    let mut pos = 0;
    for tok in line.split(' ') {
        if tok.is_empty() {
            return Err(parse_err(pos, "empty header field"));
        }
        tokens.push((pos, tok));
        pos += tok.len() + 1;
    }
    if tokens.first().map(|t| t.1) != Some(magic) {
        return Err(parse_err(0, format!("expected magic {magic}")));
    }
    Ok(Header { tokens, end: nl + 1 })
}

impl Header<'_> {
    fn get(&self, i: usize) -> Result<(usize, &str)> {
        self.tokens.get(i).copied().ok_or_else(|| parse_err(self.end - 1, format!("header needs field {i}")))
    }

    fn usize(&self, i: usize) -> Result<usize> {
        let (off, t) = self.get(i)?;
        t.parse().map_err(|_| parse_err(off, format!("expected an unsigned integer, found {t:?}")))
    }

    fn f64(&self, i: usize) -> Result<f64> {
        let (off, t) = self.get(i)?;
        t.parse().map_err(|_| parse_err(off, format!("expected a number, found {t:?}")))
    }

    fn expect_len(&self, n: usize) -> Result<()> {
        if self.tokens.len() != n {
            let off = self.tokens.get(n).map_or(self.end - 1, |t| t.0);
            return Err(parse_err(off, format!("header has {} fields, expected {n}", self.tokens.len())));
        }
        Ok(())
    }
}

fn payload(bytes: &[u8], start: usize, expected: usize) -> Result<&[u8]> {
    let have = bytes.len() - start;
    if have < expected {
        return Err(parse_err(bytes.len(), format!("payload truncated: {have} of {expected} bytes")));
    }
    if have > expected {
        return Err(parse_err(start + expected, format!("{} trailing bytes after payload", have - expected)));
    }
    Ok(&bytes[start..])
}

fn f32s(p: &[u8]) -> impl Iterator<Item = f32> + '_ {
    p.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

/// Serialized model: header with dims and spacings, then `f32` values.
pub fn encode_model(grid: &RegularGrid, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != grid.len() {
        return Err(invalid("model length differs from grid size"));
    }
    let mut head = format!("JSSM1 {}", grid.ndim());
    for n in grid.dims() {
        head += &format!(" {n}");
    }
    for h in grid.spacing() {
        head += &format!(" {h}");
    }
    head.push('\n');
    let mut out = head.into_bytes();
    out.reserve(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<(RegularGrid, Vec<f64>)> {
    let h = header(bytes, "JSSM1")?;
    let nd = h.usize(1)?;
    if nd != 2 && nd != 3 {
        return Err(parse_err(h.get(1)?.0, format!("dimension must be 2 or 3, found {nd}")));
    }
    h.expect_len(2 + 2 * nd)?;
    let n: Vec<usize> = (0..nd).map(|k| h.usize(2 + k)).collect::<Result<_>>()?;
    let sp: Vec<f64> = (0..nd).map(|k| h.f64(2 + nd + k)).collect::<Result<_>>()?;
    let at = h.get(2)?.0;
    let grid = RegularGrid::with_spacing(&n, &sp).map_err(|e| parse_err(at, e.to_string()))?;
    let p = payload(bytes, h.end, grid.len() * 4)?;
    Ok((grid, f32s(p).map(|v| v as f64).collect()))
}

pub fn write_model(path: &Path, grid: &RegularGrid, values: &[f64]) -> Result<()> {
    Ok(fs::write(path, encode_model(grid, values)?)?)
}

pub fn read_model(path: &Path) -> Result<(RegularGrid, Vec<f64>)> {
    decode_model(&fs::read(path)?)
}

/// Wavefields, one source after another. Full precision stores `f32`
/// pairs; compact precision stores an `f32` scale per source followed by
/// scaled `f16` pairs.
pub fn encode_wavefields(batch: &WavefieldBatch) -> Vec<u8> {
    let (k, n) = (batch.num_sources(), batch.nnodes());
    let tag = match batch.precision() {
        Precision::Full => "f32",
        Precision::Compact => "f16",
    };
    let mut out = format!("JSWF1 {k} {n} {tag}\n").into_bytes();
    match batch.compact_parts() {
        None => {
            let f = batch.fields();
            for s in 0..k {
                for i in 0..n {
                    let v = f.row(i)[s];
                    out.extend_from_slice(&(v.re as f32).to_le_bytes());
                    out.extend_from_slice(&(v.im as f32).to_le_bytes());
                }
            }
        }
        Some((scales, values)) => {
            for s in 0..k {
                out.extend_from_slice(&scales[s].to_le_bytes());
                for i in 0..n {
                    let v = values[i * k + s];
                    out.extend_from_slice(&v[0].to_le_bytes());
                    out.extend_from_slice(&v[1].to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn decode_wavefields(bytes: &[u8]) -> Result<WavefieldBatch> {
    let h = header(bytes, "JSWF1")?;
    h.expect_len(4)?;
    let (k, n) = (h.usize(1)?, h.usize(2)?);
    let (off, tag) = h.get(3)?;
    let ids: Vec<usize> = (0..k).collect();
    match tag {
        "f32" => {
            let p = payload(bytes, h.end, k * n * 8)?;
            let vals: Vec<f32> = f32s(p).collect();
            let mut b = Block::zeros(n, k);
            for s in 0..k {
                for i in 0..n {
                    let j = 2 * (s * n + i);
                    b.row_mut(i)[s] = Complex64::new(vals[j] as f64, vals[j + 1] as f64);
                }
            }
            WavefieldBatch::new(ids, b)
        }
        "f16" => {
            let p = payload(bytes, h.end, k * (4 + n * 4))?;
            let mut scales = vec![0.0f32; k];
            let mut values = vec![[f16::ZERO; 2]; n * k];
            for (s, chunk) in p.chunks_exact(4 + n * 4).enumerate() {
                scales[s] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                for (i, c) in chunk[4..].chunks_exact(4).enumerate() {
                    values[i * k + s] = [f16::from_le_bytes([c[0], c[1]]), f16::from_le_bytes([c[2], c[3]])];
                }
            }
            Ok(WavefieldBatch::from_compact(ids, n, scales, values))
        }
        _ => Err(parse_err(off, format!("unknown precision {tag:?}"))),
    }
}

/// Sensitivity record: order (`u32`), codes (`u8`), `τ₁` (`f32`).
pub fn encode_record(rec: &SensitivityRecord) -> Vec<u8> {
    let n = rec.fm_order().len();
    let mut out = format!("JSER1 {n}\n").into_bytes();
    out.reserve(rec.storage_bytes());
    for &o in rec.fm_order() {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(rec.codes());
    for &t in rec.tau1() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// Record for `grid`; the source node is the first node in the order.
pub fn decode_record(bytes: &[u8], grid: &RegularGrid) -> Result<SensitivityRecord> {
    let h = header(bytes, "JSER1")?;
    h.expect_len(2)?;
    let n = h.usize(1)?;
    if n != grid.len() {
        return Err(parse_err(h.get(1)?.0, format!("record has {n} nodes, grid has {}", grid.len())));
    }
    let p = payload(bytes, h.end, n * 9)?;
    let order: Vec<u32> = p[..4 * n].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let codes = p[4 * n..5 * n].to_vec();
    let tau1: Vec<f32> = f32s(&p[5 * n..]).collect();
    let source = *order.first().ok_or_else(|| parse_err(h.end, "empty record"))? as usize;
    SensitivityRecord::new(grid.clone(), source, order, codes, tau1).map_err(|e| parse_err(h.end, e.to_string()))
}

/// Observed data file contents, `fwi[frequency][source][receiver]` and
/// `travel_times[source][receiver]`, NaN at inactive receivers.
#[derive(Clone, Debug, PartialEq)]
pub struct DataFile {
    pub fwi: Vec<Vec<Vec<Complex64>>>,
    pub travel_times: Option<Vec<Vec<f64>>>,
}

/// Per (source, frequency) complex `f32` pairs, then per-source travel
/// times; a missing travel-time set is written as NaN rows.
pub fn encode_data(d: &DataFile) -> Result<Vec<u8>> {
    let nf = d.fwi.len();
    let ns = d.fwi.first().map_or(0, |x| x.len());
    let nr = d.fwi.first().and_then(|x| x.first()).map_or(0, |x| x.len());
    if nf == 0 || ns == 0 || nr == 0 {
        return Err(invalid("data set is empty"));
    }
    if d.fwi.iter().any(|x| x.len() != ns || x.iter().any(|t| t.len() != nr)) {
        return Err(invalid("ragged waveform data"));
    }
    if let Some(tt) = &d.travel_times {
        if tt.len() != ns || tt.iter().any(|t| t.len() != nr) {
            return Err(invalid("travel times do not match the waveform data"));
        }
    }
    let mut out = format!("JSDT1 {ns} {nf} {nr}\n").into_bytes();
    for s in 0..ns {
        for per_freq in &d.fwi {
            for v in &per_freq[s] {
                out.extend_from_slice(&(v.re as f32).to_le_bytes());
                out.extend_from_slice(&(v.im as f32).to_le_bytes());
            }
        }
    }
    for s in 0..ns {
        for r in 0..nr {
            let t = d.travel_times.as_ref().map_or(f64::NAN, |tt| tt[s][r]);
            out.extend_from_slice(&(t as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_data(bytes: &[u8]) -> Result<DataFile> {
    let h = header(bytes, "JSDT1")?;
    h.expect_len(4)?;
    let (ns, nf, nr) = (h.usize(1)?, h.usize(2)?, h.usize(3)?);
    let p = payload(bytes, h.end, ns * nf * nr * 8 + ns * nr * 4)?;
    let vals: Vec<f32> = f32s(p).collect();
    let mut fwi = vec![vec![Vec::with_capacity(nr); ns]; nf];
    let mut i = 0;
    for s in 0..ns {
        for per_freq in fwi.iter_mut() {
            for _ in 0..nr {
                per_freq[s].push(Complex64::new(vals[i] as f64, vals[i + 1] as f64));
                i += 2;
            }
        }
    }
    let tt: Vec<Vec<f64>> = (0..ns).map(|s| (0..nr).map(|r| vals[i + s * nr + r] as f64).collect()).collect();
    let travel_times = if tt.iter().flatten().all(|t| t.is_nan()) { None } else { Some(tt) };
    Ok(DataFile { fwi, travel_times })
}

/// Grayscale P5 image of a 2D field (`dims = [width, height]`, first axis
/// fastest), mapped linearly from `[min, max]` to `[0, 255]`; a constant
/// field renders as 128.
pub fn render_pgm(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if values.len() != width * height || width == 0 {
        return Err(invalid("image size does not match the field"));
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if hi > lo { (255.0 * (v - lo) / (hi - lo)).round() as u8 } else { 128 }));
    Ok(out)
}

/// 2D section of a model: the whole field in 2D, or the plane at `index`
/// along the middle axis in 3D (the middle of that axis if `None`).
pub fn model_section(grid: &RegularGrid, values: &[f64], index: Option<usize>) -> Result<(Vec<f64>, usize, usize)> {
    let n = grid.dims3();
    if grid.ndim() == 2 {
        return Ok((values.to_vec(), n[0], n[1]));
    }
    let j = index.unwrap_or(n[1] / 2);
    if j >= n[1] {
        return Err(invalid(format!("slice index {j} outside 0..{}", n[1])));
    }
    let mut out = Vec::with_capacity(n[0] * n[2]);
    for k in 0..n[2] {
        for i in 0..n[0] {
            out.push(values[grid.index(i, j, k)]);
        }
    }
    Ok((out, n[0], n[2]))
}

/// Width, height and pixels of a P5 image.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(pos, "truncated PGM header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(parse_err(0, "expected P5"));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i].1.parse().map_err(|_| parse_err(fields[i].0, "expected an integer"))
    };
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max != 255 {
        return Err(parse_err(fields[3].0, "only 8-bit images are supported"));
    }
    let p = payload(bytes, pos + 1, w * h)?;
    Ok((w, h, p.to_vec()))
}
