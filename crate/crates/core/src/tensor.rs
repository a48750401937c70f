//! Precision-tagged NCHW tensors and the EMBT on-disk format.
//!
//! F16 tensors store widened f32 values that satisfy the re-rounding
//! identity (narrowing and widening again is a no-op); I8 tensors store
//! raw quantized bytes together with their `QuantParams`. All compute
//! kernels consume f32 slices, so `data_f32` is the bridge from any
//! storage to the arithmetic path.

use std::borrow::Cow;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EmberError, Result};
use crate::half::{f16_bits_to_f32, f32_to_f16_bits, round_to_f16};
use crate::quant::{dequantize, quantize, Granularity, QuantParams, SaturationCounter};

pub const TENSOR_MAGIC: &[u8; 4] = b"EMBT";
pub const TENSOR_FORMAT_VERSION: u8 = 1;

/// N,C,H,W extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat row-major NCHW offset.
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    I8,
}

impl DType {
    /// Storage bytes per element in the serialized form.
    pub fn element_bytes(&self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }

    fn code(&self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::I8 => 2,
        }
    }

    fn from_code(code: u8) -> Result<DType> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F16),
            2 => Ok(DType::I8),
            other => Err(EmberError::MalformedFile(format!(
                "unknown dtype code {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    /// Widened values, each exactly representable in binary16.
    F16(Vec<f32>),
    I8(Vec<i8>, QuantParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    storage: Storage,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Tensor {
        Tensor {
            storage: Storage::F32(vec![0.0; shape.len()]),
            shape,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        if data.len() != shape.len() {
            return Err(EmberError::ShapeMismatch(format!(
                "buffer of {} elements for shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            storage: Storage::F32(data),
        })
    }

    /// Builds an F16 tensor by projecting every element onto the
    /// binary16 grid.
    pub fn f16_from_f32(shape: Shape, data: &[f32]) -> Result<Tensor> {
        if data.len() != shape.len() {
            return Err(EmberError::ShapeMismatch(format!(
                "buffer of {} elements for shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            storage: Storage::F16(data.iter().map(|&x| round_to_f16(x)).collect()),
        })
    }

    /// Builds an I8 tensor from raw quantized values.
    pub fn i8_from_raw(shape: Shape, data: Vec<i8>, params: QuantParams) -> Result<Tensor> {
        if data.len() != shape.len() {
            return Err(EmberError::ShapeMismatch(format!(
                "buffer of {} elements for shape {shape}",
                data.len()
            )));
        }
        params.validate()?;
        if params.granularity == Granularity::PerChannel && params.scales.len() != shape.n {
            return Err(EmberError::InvalidQuantParams(format!(
                "{} per-channel scales for {} channels",
                params.scales.len(),
                shape.n
            )));
        }
        Ok(Tensor {
            shape,
            storage: Storage::I8(data, params),
        })
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        match &self.storage {
            Storage::F32(_) => DType::F32,
            Storage::F16(_) => DType::F16,
            Storage::I8(..) => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn quant_params(&self) -> Option<&QuantParams> {
        match &self.storage {
            Storage::I8(_, p) => Some(p),
            _ => None,
        }
    }

    pub fn i8_data(&self) -> Option<&[i8]> {
        match &self.storage {
            Storage::I8(d, _) => Some(d),
            _ => None,
        }
    }

    /// Element values as f32: borrowed for float storage, dequantized
    /// into a fresh buffer for I8.
    pub fn data_f32(&self) -> Cow<'_, [f32]> {
        match &self.storage {
            Storage::F32(d) | Storage::F16(d) => Cow::Borrowed(d),
            Storage::I8(d, p) => {
                // per-channel axis is dimension 0 of the owning tensor
                let per_chan = self.shape.len() / self.shape.n.max(1);
                Cow::Owned(
                    d.iter()
                        .enumerate()
                        .map(|(i, &q)| dequantize(q, p, i / per_chan.max(1)))
                        .collect(),
                )
            }
        }
    }

    /// Mutable access to float storage; quantized tensors have no
    /// mutable float view.
    pub fn data_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.storage {
            Storage::F32(d) => Some(d),
            Storage::F16(d) => Some(d),
            Storage::I8(..) => None,
        }
    }

    /// Serialized parameter bytes of the element payload (excludes the
    /// header and any QuantParams block).
    pub fn payload_bytes(&self) -> usize {
        self.len() * self.dtype().element_bytes()
    }

    /// Casts to `target`, reporting saturation events of the quantizing
    /// path. Shape and element count always survive the cast.
    pub fn cast_with_report(
        &self,
        target: DType,
        params: Option<&QuantParams>,
    ) -> Result<(Tensor, SaturationCounter)> {
        let mut counter = SaturationCounter::default();
        let src = self.data_f32();
        let out = match target {
            DType::F32 => Tensor {
                shape: self.shape,
                storage: Storage::F32(src.into_owned()),
            },
            DType::F16 => Tensor {
                shape: self.shape,
                storage: Storage::F16(src.iter().map(|&x| round_to_f16(x)).collect()),
            },
            DType::I8 => {
                let p = params.ok_or(EmberError::MissingQuantParams)?;
                p.validate()?;
                if p.granularity == Granularity::PerChannel && p.scales.len() != self.shape.n {
                    return Err(EmberError::InvalidQuantParams(format!(
                        "{} per-channel scales for {} channels",
                        p.scales.len(),
                        self.shape.n
                    )));
                }
                let per_chan = self.shape.len() / self.shape.n.max(1);
                let data = src
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| quantize(x, p, i / per_chan.max(1), &mut counter))
                    .collect();
                Tensor {
                    shape: self.shape,
                    storage: Storage::I8(data, p.clone()),
                }
            }
        };
        Ok((out, counter))
    }

    /// Casts to `target`; `params` is required for I8.
    pub fn cast(&self, target: DType, params: Option<&QuantParams>) -> Result<Tensor> {
        self.cast_with_report(target, params).map(|(t, _)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut f = std::fs::File::open(path)?;
        Tensor::read_from(&mut f)
    }

    /// Binary layout: magic "EMBT", version u8, dtype code u8, 2 reserved
    /// bytes, 4 u32 LE dims, raw little-endian elements (f32 = 4 bytes,
    /// f16 = bit pattern as 2 bytes, i8 = 1 byte); I8 appends a
    /// length-prefixed QuantParams block.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&[TENSOR_FORMAT_VERSION, self.dtype().code(), 0, 0])?;
        for dim in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        match &self.storage {
            Storage::F32(d) => {
                for &x in d {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Storage::F16(d) => {
                for &x in d {
                    w.write_all(&f32_to_f16_bits(x).to_le_bytes())?;
                }
            }
            Storage::I8(d, p) => {
                let bytes: Vec<u8> = d.iter().map(|&v| v as u8).collect();
                w.write_all(&bytes)?;
                write_quant_params(w, p)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut head = [0u8; 8];
        r.read_exact(&mut head)?;
        if &head[0..4] != TENSOR_MAGIC {
            return Err(EmberError::MalformedFile("bad tensor magic".into()));
        }
        if head[4] != TENSOR_FORMAT_VERSION {
            return Err(EmberError::VersionMismatch {
                expected: TENSOR_FORMAT_VERSION as u32,
                found: head[4] as u32,
            });
        }
        let dtype = DType::from_code(head[5])?;
        let mut dims = [0u32; 4];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b);
        }
        let shape = Shape::new(
            dims[0] as usize,
            dims[1] as usize,
            dims[2] as usize,
            dims[3] as usize,
        );
        let count = shape.len();
        let storage = match dtype {
            DType::F32 => {
                let mut buf = vec![0u8; count * 4];
                r.read_exact(&mut buf)?;
                Storage::F32(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            DType::F16 => {
                let mut buf = vec![0u8; count * 2];
                r.read_exact(&mut buf)?;
                Storage::F16(
                    buf.chunks_exact(2)
                        .map(|c| f16_bits_to_f32(u16::from_le_bytes([c[0], c[1]])))
                        .collect(),
                )
            }
            DType::I8 => {
                let mut buf = vec![0u8; count];
                r.read_exact(&mut buf)?;
                let data = buf.into_iter().map(|b| b as i8).collect();
                let params = read_quant_params(r)?;
                Storage::I8(data, params)
            }
        };
        Ok(Tensor { shape, storage })
    }
}

fn write_quant_params<W: Write>(w: &mut W, p: &QuantParams) -> Result<()> {
    let mut block = Vec::new();
    block.push(match p.granularity {
        Granularity::PerTensor => 0u8,
        Granularity::PerChannel => 1u8,
    });
    block.push(p.symmetric as u8);
    block.extend_from_slice(&p.zero_point.to_le_bytes());
    block.extend_from_slice(&p.qmin.to_le_bytes());
    block.extend_from_slice(&p.qmax.to_le_bytes());
    block.extend_from_slice(&(p.scales.len() as u32).to_le_bytes());
    for &s in &p.scales {
        block.extend_from_slice(&s.to_le_bytes());
    }
    w.write_all(&(block.len() as u32).to_le_bytes())?;
    w.write_all(&block)?;
    Ok(())
}

fn read_quant_params<R: Read>(r: &mut R) -> Result<QuantParams> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    let mut block = vec![0u8; len];
    r.read_exact(&mut block)?;
    if block.len() < 18 {
        return Err(EmberError::MalformedFile("quant params block too short".into()));
    }
    let granularity = match block[0] {
        0 => Granularity::PerTensor,
        1 => Granularity::PerChannel,
        other => {
            return Err(EmberError::MalformedFile(format!(
                "unknown granularity code {other}"
            )))
        }
    };
    let symmetric = block[1] != 0;
    let zero_point = i32::from_le_bytes([block[2], block[3], block[4], block[5]]);
    let qmin = i32::from_le_bytes([block[6], block[7], block[8], block[9]]);
    let qmax = i32::from_le_bytes([block[10], block[11], block[12], block[13]]);
    let n_scales = u32::from_le_bytes([block[14], block[15], block[16], block[17]]) as usize;
    if block.len() != 18 + 4 * n_scales {
        return Err(EmberError::MalformedFile("quant params length mismatch".into()));
    }
    let scales = block[18..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let p = QuantParams {
        scales,
        zero_point,
        qmin,
        qmax,
        granularity,
        symmetric,
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cast_f16_round_trip_exact_values() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let h = t.cast(DType::F16, None).unwrap();
        assert_eq!(h.data_f32().as_ref(), &[1.0, 2.0]);
        let back = h.cast(DType::F32, None).unwrap();
        assert_eq!(back.data_f32().as_ref(), &[1.0, 2.0]);
    }

    #[test]
    fn cast_f16_inexact_value() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.1]).unwrap();
        let h = t.cast(DType::F16, None).unwrap();
        assert_eq!(h.data_f32()[0] as f64, 0.0999755859375);
    }

    #[test]
    fn cast_i8_round_trip() {
        let p = QuantParams::symmetric_per_tensor(1.0);
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![3.4]).unwrap();
        let q = t.cast(DType::I8, Some(&p)).unwrap();
        assert_eq!(q.i8_data().unwrap(), &[3]);
        let back = q.cast(DType::F32, None).unwrap();
        assert_eq!(back.data_f32()[0], 3.0);
    }

    #[test]
    fn cast_i8_without_params_fails() {
        let t = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(matches!(
            t.cast(DType::I8, None),
            Err(EmberError::MissingQuantParams)
        ));
    }

    #[test]
    fn cast_preserves_shape() {
        let shape = Shape::new(2, 3, 4, 5);
        let t = Tensor::zeros(shape);
        for (target, params) in [
            (DType::F32, None),
            (DType::F16, None),
            (DType::I8, Some(QuantParams::symmetric_per_tensor(0.5))),
        ] {
            let out = t.cast(target, params.as_ref()).unwrap();
            assert_eq!(out.shape(), shape);
            assert_eq!(out.len(), shape.len());
        }
    }

    #[test]
    fn file_round_trip_all_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let shape = Shape::new(2, 2, 2, 2);
        let data: Vec<f32> = (0..16).map(|i| i as f32 * 0.37 - 2.0).collect();

        let f32_t = Tensor::from_vec(shape, data.clone()).unwrap();
        let f16_t = f32_t.cast(DType::F16, None).unwrap();
        let i8_t = f32_t
            .cast(
                DType::I8,
                Some(&QuantParams::symmetric_per_channel(vec![0.05, 0.1])),
            )
            .unwrap();

        for (name, t) in [("a", &f32_t), ("b", &f16_t), ("c", &i8_t)] {
            let path = dir.path().join(name);
            t.save(&path).unwrap();
            let loaded = Tensor::load(&path).unwrap();
            assert_eq!(&loaded, t);
        }
    }

    #[test]
    fn payload_bytes_follow_dtype() {
        let shape = Shape::new(1, 4, 2, 2);
        let t = Tensor::zeros(shape);
        assert_eq!(t.payload_bytes(), 64);
        assert_eq!(t.cast(DType::F16, None).unwrap().payload_bytes(), 32);
        let p = QuantParams::symmetric_per_tensor(1.0);
        assert_eq!(t.cast(DType::I8, Some(&p)).unwrap().payload_bytes(), 16);
    }

    #[test]
    fn rejects_truncated_file() {
        let t = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Tensor::read_from(&mut buf.as_slice()).is_err());
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(Tensor::read_from(&mut bad_magic.as_slice()).is_err());
    }
}
