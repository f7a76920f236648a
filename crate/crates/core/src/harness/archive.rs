//! `BMTA` tensor archives for image datasets and fMRI batches.
//!
//! Layout, little-endian: magic `BMTA`, version u32, record count u64, then
//! per record: label u32, rank u8, dims u32×rank, f32 payload. An optional
//! ROI table follows, introduced by the tag `ROIS` and an entry count u32;
//! each entry is a name (u16 length + bytes), start u32 and end u32. A CRC32
//! of all preceding bytes closes the file.

use std::path::Path;

use super::bytes::{unseal, Reader, Writer};
use crate::brain_encoder::{FmriRecord, RoiMap};
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"BMTA";
pub const VERSION: u32 = 1;
const ROI_TAG: &[u8; 4] = b"ROIS";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub labels: Vec<u32>,
    pub tensors: Vec<Tensor>,
    pub roi_map: Option<RoiMap>,
}

impl TensorArchive {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn from_images(data: &LabeledImages) -> Self {
        Self {
            labels: data.labels.iter().map(|&y| y as u32).collect(),
            tensors: data.images.clone(),
            roi_map: None,
        }
    }

    pub fn into_images(self, num_classes: usize) -> Result<LabeledImages> {
        if let Some(&y) = self.labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::Input(format!("label {y} outside {num_classes} classes")));
        }
        if let Some(t) = self.tensors.iter().find(|t| t.rank() != 3) {
            return Err(Error::Input(format!("image record has shape {:?}", t.shape())));
        }
        Ok(LabeledImages {
            images: self.tensors,
            labels: self.labels.iter().map(|&y| y as usize).collect(),
            num_classes,
        })
    }

    /// Response vectors sharing one ROI map, with their image labels.
    pub fn from_fmri(records: &[FmriRecord], labels: &[usize]) -> Result<Self> {
        if records.len() != labels.len() {
            return Err(Error::dim("fmri archive", &[records.len()], &[labels.len()]));
        }
        let map = records.first().map(|r| r.roi_map.clone());
        if let Some(m) = &map {
            if records.iter().any(|r| &r.roi_map != m) {
                return Err(Error::Input("fmri records use different roi maps".into()));
            }
        }
        Ok(Self {
            labels: labels.iter().map(|&y| y as u32).collect(),
            tensors: records.iter().map(|r| Tensor::vector(r.voxels.clone())).collect(),
            roi_map: map,
        })
    }

    pub fn into_fmri(self) -> Result<(Vec<FmriRecord>, Vec<usize>)> {
        let map = self
            .roi_map
            .ok_or_else(|| Error::Input("archive has no roi table".into()))?;
        let records = self
            .tensors
            .into_iter()
            .map(|t| FmriRecord::new(t.into_data(), map.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok((records, self.labels.iter().map(|&y| y as usize).collect()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.labels.len() != self.tensors.len() {
            return Err(Error::dim("tensor archive", &[self.labels.len()], &[self.tensors.len()]));
        }
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.tensors.len() as u64);
        for (&y, t) in self.labels.iter().zip(&self.tensors) {
            w.u32(y);
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Format("rank too large".into()))?;
            w.u8(rank);
            for &d in t.shape() {
                w.len_u32(d, "dimension")?;
            }
            w.f32s(t.data());
        }
        if let Some(map) = &self.roi_map {
            w.bytes(ROI_TAG);
            w.len_u32(map.len(), "roi count")?;
            for e in &map.entries {
                w.name(&e.name())?;
                w.len_u32(e.start, "roi start")?;
                w.len_u32(e.end, "roi end")?;
            }
        }
        Ok(w.seal())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 8 || &data[..4] != MAGIC {
            return Err(Error::Format("not a BMTA archive".into()));
        }
        let version = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let body = unseal(data, "archive")?;
        let mut r = Reader::new(&body[8..], "archive");
        let count = r.u64()?;
        // Every record takes at least five bytes.
        if count.saturating_mul(5) > r.remaining() as u64 {
            return Err(r.err(&format!("record count {count} exceeds file size")));
        }
        let mut labels = Vec::with_capacity(count as usize);
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            labels.push(r.u32()?);
            let shape = r.shape()?;
            let len = shape.iter().product();
            tensors.push(Tensor::new(shape, r.f32s(len)?)?);
        }
        let roi_map = if r.remaining() > 0 {
            if r.take(4)? != ROI_TAG {
                return Err(r.err("unknown trailing section"));
            }
            let n = r.u32()?;
            let entries = (0..n)
                .map(|_| Ok((r.name()?, r.u32()? as usize, r.u32()? as usize)))
                .collect::<Result<Vec<_>>>()?;
            Some(RoiMap::from_named(&entries).map_err(|e| r.err(&e.to_string()))?)
        } else {
            None
        };
        r.expect_end()?;
        Ok(Self {
            labels,
            tensors,
            roi_map,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&data)
    }
}
