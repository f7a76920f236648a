use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hemisphere {
    Left,
    Right,
}

/// Stream-level visual ROIs, in map order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Early,
    MidVentral,
    MidLateral,
    MidParietal,
    Ventral,
    Lateral,
    Parietal,
    Unknown,
}

impl Stream {
    pub const ALL: [Stream; 8] = [
        Stream::Early,
        Stream::MidVentral,
        Stream::MidLateral,
        Stream::MidParietal,
        Stream::Ventral,
        Stream::Lateral,
        Stream::Parietal,
        Stream::Unknown,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stream::Early => "early",
            Stream::MidVentral => "midventral",
            Stream::MidLateral => "midlateral",
            Stream::MidParietal => "midparietal",
            Stream::Ventral => "ventral",
            Stream::Lateral => "lateral",
            Stream::Parietal => "parietal",
            Stream::Unknown => "unknown",
        }
    }
}

impl Hemisphere {
    pub fn as_str(&self) -> &'static str {
        match self {
            Hemisphere::Left => "lh",
            Hemisphere::Right => "rh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiEntry {
    pub hemisphere: Hemisphere,
    pub stream: Stream,
    pub start: usize,
    pub end: usize,
}

impl RoiEntry {
    /// `lh.early`, `rh.ventral`, ...
    pub fn name(&self) -> String {
        format!("{}.{}", self.hemisphere.as_str(), self.stream.as_str())
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Ordered partition of a voxel vector into named ROIs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiMap {
    pub entries: Vec<RoiEntry>,
}

impl RoiMap {
    /// Left hemisphere streams then right, `voxels_per_roi` voxels each.
    pub fn uniform(voxels_per_roi: usize) -> Self {
        let mut entries = Vec::with_capacity(16);
        let mut start = 0;
        for hemisphere in [Hemisphere::Left, Hemisphere::Right] {
            for stream in Stream::ALL {
                entries.push(RoiEntry {
                    hemisphere,
                    stream,
                    start,
                    end: start + voxels_per_roi,
                });
                start += voxels_per_roi;
            }
        }
        Self { entries }
    }

    pub fn num_voxels(&self) -> usize {
        self.entries.last().map_or(0, |e| e.end)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ranges must be non-empty, contiguous, ascending and start at 0.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for e in &self.entries {
            if e.start != next || e.end <= e.start {
                return Err(Error::Input(format!(
                    "roi {} spans {}..{}, expected to start at {next}",
                    e.name(),
                    e.start,
                    e.end
                )));
            }
            next = e.end;
        }
        if self.entries.is_empty() {
            return Err(Error::Input("empty roi map".into()));
        }
        Ok(())
    }

    /// Parses `lh.early`-style names as written by [`RoiEntry::name`].
    pub fn from_named(entries: &[(String, usize, usize)]) -> Result<Self> {
        let mut out = Vec::with_capacity(entries.len());
        for (name, start, end) in entries {
            let (h, s) = name
                .split_once('.')
                .ok_or_else(|| Error::Format(format!("bad roi name {name}")))?;
            let hemisphere = match h {
                "lh" => Hemisphere::Left,
                "rh" => Hemisphere::Right,
                _ => return Err(Error::Format(format!("bad hemisphere in {name}"))),
            };
            let stream = Stream::ALL
                .into_iter()
                .find(|st| st.as_str() == s)
                .ok_or_else(|| Error::Format(format!("bad stream in {name}")))?;
            out.push(RoiEntry {
                hemisphere,
                stream,
                start: *start,
                end: *end,
            });
        }
        let map = Self { entries: out };
        map.validate()?;
        Ok(map)
    }

    /// Voxel ranges of the subset in map order, and the re-based map.
    pub fn select(&self, subset: RoiSubset) -> Result<(Vec<Range<usize>>, RoiMap)> {
        let mut ranges = Vec::new();
        let mut entries = Vec::new();
        let mut start = 0;
        for e in self.entries.iter().filter(|e| subset.contains(e.stream)) {
            ranges.push(e.range());
            entries.push(RoiEntry {
                start,
                end: start + e.len(),
                ..e.clone()
            });
            start += e.len();
        }
        if entries.is_empty() {
            return Err(Error::Input(format!("roi subset {subset:?} selects nothing")));
        }
        Ok((ranges, RoiMap { entries }))
    }
}

/// Voxel groupings used for the region ablation. `Other` holds everything
/// that is in neither visual-cortex group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiSubset {
    Lvc,
    Hvc,
    Other,
    All,
}

impl RoiSubset {
    pub fn contains(&self, stream: Stream) -> bool {
        match self {
            RoiSubset::All => true,
            RoiSubset::Lvc => stream == Stream::Early,
            RoiSubset::Hvc => matches!(stream, Stream::Ventral | Stream::Lateral | Stream::Parietal),
            RoiSubset::Other => matches!(
                stream,
                Stream::MidVentral | Stream::MidLateral | Stream::MidParietal | Stream::Unknown
            ),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RoiSubset::Lvc => "lvc",
            RoiSubset::Hvc => "hvc",
            RoiSubset::Other => "other",
            RoiSubset::All => "all",
        }
    }
}

impl std::str::FromStr for RoiSubset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lvc" => Ok(Self::Lvc),
            "hvc" => Ok(Self::Hvc),
            "other" => Ok(Self::Other),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown roi subset {s}"))),
        }
    }
}

/// A voxel response vector with its ROI partition.
#[derive(Debug, Clone, PartialEq)]
pub struct FmriRecord {
    pub voxels: Vec<f32>,
    pub roi_map: RoiMap,
}

impl FmriRecord {
    pub fn new(voxels: Vec<f32>, roi_map: RoiMap) -> Result<Self> {
        roi_map.validate()?;
        if voxels.len() != roi_map.num_voxels() {
            return Err(Error::dim("fmri record", &[voxels.len()], &[roi_map.num_voxels()]));
        }
        Ok(Self { voxels, roi_map })
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn roi(&self, index: usize) -> &[f32] {
        &self.voxels[self.roi_map.entries[index].range()]
    }
}

/// Restricts a record to the voxels of `subset`.
pub fn select_rois(rec: &FmriRecord, subset: RoiSubset) -> Result<FmriRecord> {
    let (ranges, roi_map) = rec.roi_map.select(subset)?;
    Ok(FmriRecord {
        voxels: gather(&rec.voxels, &ranges),
        roi_map,
    })
}

pub(crate) fn gather(voxels: &[f32], ranges: &[Range<usize>]) -> Vec<f32> {
    ranges.iter().flat_map(|r| voxels[r.clone()].iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> FmriRecord {
        let map = RoiMap::uniform(192);
        FmriRecord::new((0..3072).map(|i| i as f32).collect(), map).unwrap()
    }

    #[test]
    fn default_map_layout() {
        let map = RoiMap::uniform(192);
        assert_eq!(map.len(), 16);
        assert_eq!(map.num_voxels(), 3072);
        map.validate().unwrap();
        assert_eq!(map.entries[8].name(), "rh.early");
        assert_eq!(map.entries[8].range(), 1536..1728);
    }

    #[test]
    fn subsets() {
        let rec = record();
        assert_eq!(select_rois(&rec, RoiSubset::All).unwrap(), rec);
        let lvc = select_rois(&rec, RoiSubset::Lvc).unwrap();
        assert_eq!(lvc.len(), 2 * 192);
        assert_eq!(lvc.voxels[192], 1536.0);
        assert_eq!(lvc.roi_map.entries[1].range(), 192..384);
        assert_eq!(select_rois(&rec, RoiSubset::Hvc).unwrap().len(), 6 * 192);
        assert_eq!(select_rois(&rec, RoiSubset::Other).unwrap().len(), 8 * 192);
    }

    #[test]
    fn subsets_partition_the_vector() {
        let rec = record();
        let mut rebuilt = vec![f32::NAN; rec.len()];
        for subset in [RoiSubset::Lvc, RoiSubset::Hvc, RoiSubset::Other] {
            let part = select_rois(&rec, subset).unwrap();
            for e in &part.roi_map.entries {
                let src = rec
                    .roi_map
                    .entries
                    .iter()
                    .find(|o| o.hemisphere == e.hemisphere && o.stream == e.stream)
                    .unwrap();
                for (k, v) in part.voxels[e.range()].iter().enumerate() {
                    assert!(rebuilt[src.start + k].is_nan(), "voxel covered twice");
                    rebuilt[src.start + k] = *v;
                }
            }
        }
        assert_eq!(rebuilt, rec.voxels);
    }

    #[test]
    fn empty_selection_is_an_error() {
        let map = RoiMap {
            entries: vec![RoiEntry {
                hemisphere: Hemisphere::Left,
                stream: Stream::Early,
                start: 0,
                end: 4,
            }],
        };
        let rec = FmriRecord::new(vec![0.0; 4], map).unwrap();
        assert!(matches!(select_rois(&rec, RoiSubset::Hvc), Err(Error::Input(_))));
    }

    #[test]
    fn named_round_trip() {
        let map = RoiMap::uniform(4);
        let named: Vec<_> = map.entries.iter().map(|e| (e.name(), e.start, e.end)).collect();
        assert_eq!(RoiMap::from_named(&named).unwrap(), map);
        assert!(RoiMap::from_named(&[("xx.early".into(), 0, 4)]).is_err());
    }
}
