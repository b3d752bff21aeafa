//! Volume representation, preprocessing, multi-phase stacking, and synthetic
//! phantom generation.
//!
//! Geometry conventions: voxel grids are indexed (z, y, x) with z the slice
//! axis; spacing is mm per voxel along (z, y, x). Finding regions name
//! in-plane quadrants (left = low x, lower = high y, matching image row
//! order); each finding type occupies its own z band so presence is visible
//! in the slice sequence.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, subseed};

/// 16-byte magic prefix of the volume container format.
pub const VOLUME_MAGIC: &[u8; 16] = b"SLICEVLM.VOL.A1\0";

/// Default resample spacing in mm (z, y, x).
pub const DEFAULT_SPACING: [f64; 3] = [1.5, 0.75, 0.75];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Axial,
    Sagittal,
    Coronal,
    ObliqueAxial,
    ObliqueCoronal,
}

impl View {
    /// Tiebreak rank used by phase prioritization (axial first).
    pub fn priority_rank(self) -> usize {
        match self {
            View::Axial => 0,
            View::Sagittal => 1,
            View::Coronal => 2,
            View::ObliqueAxial => 3,
            View::ObliqueCoronal => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    CT,
    T1,
    T2,
    DWI,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseModifier {
    FS,
    SPIR,
    CE,
}

/// 3D voxel grid with acquisition metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    voxels: Vec<f32>,
    dims: [usize; 3],
    spacing: [f64; 3],
    pub view: View,
    pub phase: Phase,
    pub modifiers: BTreeSet<PhaseModifier>,
    pub patient_id: String,
}

impl Volume {
    pub fn new(voxels: Vec<f32>, dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("all dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "spacing components must be positive, got {spacing:?}"
            )));
        }
        if voxels.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::shape(format!(
                "dims {:?} want {} voxels, got {}",
                dims,
                dims[0] * dims[1] * dims[2],
                voxels.len()
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("voxels must be finite"));
        }
        Ok(Volume {
            voxels,
            dims,
            spacing,
            view: View::Axial,
            phase: Phase::CT,
            modifiers: BTreeSet::new(),
            patient_id: String::new(),
        })
    }

    pub fn with_tags(mut self, view: View, phase: Phase, modifiers: &[PhaseModifier]) -> Self {
        self.view = view;
        self.phase = phase;
        self.modifiers = modifiers.iter().copied().collect();
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Slice count along z.
    pub fn len_z(&self) -> usize {
        self.dims[0]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    #[inline]
    fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        self.voxels[(z * self.dims[1] + y) * self.dims[2] + x] = v;
    }

    /// Min-max normalize intensities to [0, 1]; constant volumes become zero.
    pub fn normalized(&self) -> Volume {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.voxels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        let mut out = self.clone();
        if range > 0.0 {
            for v in out.voxels.iter_mut() {
                *v = (*v - lo) / range;
            }
        } else {
            out.voxels.fill(0.0);
        }
        out
    }
}

// ---- preprocessing ----

/// Trilinear resample onto a new voxel spacing (mm per voxel along z, y, x).
///
/// Output dims are round(dim · spacing / target) per axis (at least 1). When
/// the target equals the current spacing the voxels are copied unchanged.
pub fn resample_to_spacing(volume: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let dims = volume.dims;
    let spacing = volume.spacing;
    let out_dims: [usize; 3] = std::array::from_fn(|a| {
        ((dims[a] as f64 * spacing[a] / target_spacing[a]).round() as usize).max(1)
    });
    if out_dims == dims && spacing == target_spacing {
        let mut out = volume.clone();
        out.spacing = target_spacing;
        return Ok(out);
    }
    let scale: [f64; 3] = std::array::from_fn(|a| target_spacing[a] / spacing[a]);
    let mut out = Volume {
        voxels: vec![0.0; out_dims[0] * out_dims[1] * out_dims[2]],
        dims: out_dims,
        spacing: target_spacing,
        view: volume.view,
        phase: volume.phase,
        modifiers: volume.modifiers.clone(),
        patient_id: volume.patient_id.clone(),
    };
    // Precompute per-axis source anchors and interpolation weights.
    let axis_weights: [Vec<(usize, usize, f64)>; 3] = std::array::from_fn(|a| {
        (0..out_dims[a])
            .map(|i| {
                let pos = (i as f64 * scale[a]).min((dims[a] - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(dims[a] - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    });
    for z in 0..out_dims[0] {
        let (z0, z1, fz) = axis_weights[0][z];
        for y in 0..out_dims[1] {
            let (y0, y1, fy) = axis_weights[1][y];
            for x in 0..out_dims[2] {
                let (x0, x1, fx) = axis_weights[2][x];
                let c000 = volume.get(z0, y0, x0) as f64;
                let c001 = volume.get(z0, y0, x1) as f64;
                let c010 = volume.get(z0, y1, x0) as f64;
                let c011 = volume.get(z0, y1, x1) as f64;
                let c100 = volume.get(z1, y0, x0) as f64;
                let c101 = volume.get(z1, y0, x1) as f64;
                let c110 = volume.get(z1, y1, x0) as f64;
                let c111 = volume.get(z1, y1, x1) as f64;
                let c00 = c000 * (1.0 - fx) + c001 * fx;
                let c01 = c010 * (1.0 - fx) + c011 * fx;
                let c10 = c100 * (1.0 - fx) + c101 * fx;
                let c11 = c110 * (1.0 - fx) + c111 * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                out.set(z, y, x, (c0 * (1.0 - fz) + c1 * fz) as f32);
            }
        }
    }
    Ok(out)
}

/// Symmetric center crop / zero pad to an exact target shape (z, y, x).
/// Odd remainders fall on the high-index side.
pub fn pad_or_center_crop(volume: &Volume, target_shape: [usize; 3]) -> Result<Volume> {
    if target_shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!(
            "target dims must be >= 1, got {target_shape:?}"
        )));
    }
    if volume.dims == target_shape {
        return Ok(volume.clone());
    }
    let dims = volume.dims;
    // Per axis: offset of the copied window in source (crop) or dest (pad).
    let src_start: [usize; 3] =
        std::array::from_fn(|a| if dims[a] > target_shape[a] { (dims[a] - target_shape[a]) / 2 } else { 0 });
    let dst_start: [usize; 3] =
        std::array::from_fn(|a| if dims[a] < target_shape[a] { (target_shape[a] - dims[a]) / 2 } else { 0 });
    let copy_len: [usize; 3] = std::array::from_fn(|a| dims[a].min(target_shape[a]));
    let mut out = Volume {
        voxels: vec![0.0; target_shape[0] * target_shape[1] * target_shape[2]],
        dims: target_shape,
        spacing: volume.spacing,
        view: volume.view,
        phase: volume.phase,
        modifiers: volume.modifiers.clone(),
        patient_id: volume.patient_id.clone(),
    };
    for z in 0..copy_len[0] {
        for y in 0..copy_len[1] {
            for x in 0..copy_len[2] {
                let v = volume.get(src_start[0] + z, src_start[1] + y, src_start[2] + x);
                out.set(dst_start[0] + z, dst_start[1] + y, dst_start[2] + x, v);
            }
        }
    }
    Ok(out)
}

// ---- slices ----

/// How the single intensity channel becomes 3 slice channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Replicate grayscale into 3 identical channels.
    #[default]
    Replicate,
    /// Three overlapping intensity windows rescaled to [0, 1].
    Windows,
}

const WINDOWS: [(f64, f64); 3] = [(0.0, 0.4), (0.3, 0.7), (0.6, 1.0)];

/// One 2D slice expanded to 3 channels (channel-major: 3 × h × w).
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl SliceImage {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * h * w);
        SliceImage { h, w, data }
    }

    pub fn from_gray(h: usize, w: usize, gray: &[f64], mode: ChannelMode) -> Self {
        assert_eq!(gray.len(), h * w);
        let mut data = Vec::with_capacity(3 * h * w);
        match mode {
            ChannelMode::Replicate => {
                for _ in 0..3 {
                    data.extend_from_slice(gray);
                }
            }
            ChannelMode::Windows => {
                for (lo, hi) in WINDOWS {
                    data.extend(gray.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)));
                }
            }
        }
        SliceImage { h, w, data }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Yield the volume's z slices, each as a 3-channel image.
pub fn slice_iter(volume: &Volume, mode: ChannelMode) -> impl Iterator<Item = SliceImage> + '_ {
    let [_, h, w] = volume.dims;
    (0..volume.len_z()).map(move |z| {
        let gray: Vec<f64> = (0..h * w)
            .map(|i| volume.get(z, i / w, i % w) as f64)
            .collect();
        SliceImage::from_gray(h, w, &gray, mode)
    })
}

// ---- phase selection and stacking ----

/// Where a stacked slice came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceProvenance {
    /// Index of the source volume in the input list.
    pub source: usize,
    /// Original slice index within that volume.
    pub slice: usize,
    /// True when the source volume was repeated to fill missing phases.
    pub padded: bool,
}

/// Ordered sequence of 3-channel slices from one or more volumes.
#[derive(Debug, Clone)]
pub struct VolumeStack {
    pub slices: Vec<SliceImage>,
    pub provenance: Vec<SliceProvenance>,
}

impl VolumeStack {
    pub fn from_volume(volume: &Volume, mode: ChannelMode) -> Self {
        let slices: Vec<SliceImage> = slice_iter(volume, mode).collect();
        let provenance = (0..slices.len())
            .map(|slice| SliceProvenance { source: 0, slice, padded: false })
            .collect();
        VolumeStack { slices, provenance }
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// One phase-priority rule: phase kind plus an optional modifier requirement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseRule {
    pub phase: Phase,
    /// Some(true): must carry at least one modifier; Some(false): must carry
    /// none; None: either.
    pub with_modifier: Option<bool>,
}

/// Default ranking: T2 (any), then T1 with modifiers, then plain T1.
pub fn default_phase_priority() -> Vec<PhaseRule> {
    vec![
        PhaseRule { phase: Phase::T2, with_modifier: None },
        PhaseRule { phase: Phase::T1, with_modifier: Some(true) },
        PhaseRule { phase: Phase::T1, with_modifier: Some(false) },
    ]
}

fn phase_rank(volume: &Volume, priority: &[PhaseRule]) -> usize {
    priority
        .iter()
        .position(|rule| {
            rule.phase == volume.phase
                && rule
                    .with_modifier
                    .map_or(true, |wants| wants == !volume.modifiers.is_empty())
        })
        .unwrap_or(priority.len())
}

/// Uniform-stride sample of `n` indices from `0..len`, centered on the
/// midpoint; indices repeat when `len < n`.
pub fn sample_indices(len: usize, n: usize) -> Vec<usize> {
    assert!(len >= 1);
    let stride = len as f64 / n as f64;
    (0..n)
        .map(|k| {
            let pos = (k as f64 + 0.5) * stride - 0.5;
            (pos.round().max(0.0) as usize).min(len - 1)
        })
        .collect()
}

/// Rank volumes by phase priority, pick the first `phases_needed`, sample
/// `slices_per_phase` slices from each, and concatenate in priority order.
pub fn select_and_sample_phases(
    volumes: &[Volume],
    priority: &[PhaseRule],
    phases_needed: usize,
    slices_per_phase: usize,
    mode: ChannelMode,
) -> Result<VolumeStack> {
    if volumes.is_empty() {
        return Err(Error::invalid("select_and_sample_phases needs at least one volume"));
    }
    if phases_needed == 0 || slices_per_phase == 0 {
        return Err(Error::invalid("phases_needed and slices_per_phase must be >= 1"));
    }
    let (h, w) = (volumes[0].dims[1], volumes[0].dims[2]);
    if volumes.iter().any(|v| v.dims[1] != h || v.dims[2] != w) {
        return Err(Error::invalid("all volumes must share in-plane dims before stacking"));
    }
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    order.sort_by_key(|&i| {
        (
            phase_rank(&volumes[i], priority),
            volumes[i].view.priority_rank(),
            i,
        )
    });

    let mut slices = Vec::with_capacity(phases_needed * slices_per_phase);
    let mut provenance = Vec::with_capacity(phases_needed * slices_per_phase);
    for p in 0..phases_needed {
        // Missing phases repeat the highest-priority volume, flagged as padded.
        let (src, padded) = if p < order.len() { (order[p], false) } else { (order[0], true) };
        let vol = &volumes[src];
        let all: Vec<SliceImage> = slice_iter(vol, mode).collect();
        for idx in sample_indices(vol.len_z(), slices_per_phase) {
            slices.push(all[idx].clone());
            provenance.push(SliceProvenance { source: src, slice: idx, padded });
        }
    }
    Ok(VolumeStack { slices, provenance })
}

// ---- synthetic phantoms ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingType {
    Nodule,
    Effusion,
    Consolidation,
    Cardiomegaly,
}

/// Fixed synthetic lexicon, in report order.
pub const FINDING_TYPES: [FindingType; 4] = [
    FindingType::Nodule,
    FindingType::Effusion,
    FindingType::Consolidation,
    FindingType::Cardiomegaly,
];

impl FindingType {
    pub fn name(self) -> &'static str {
        match self {
            FindingType::Nodule => "nodule",
            FindingType::Effusion => "effusion",
            FindingType::Consolidation => "consolidation",
            FindingType::Cardiomegaly => "cardiomegaly",
        }
    }

    fn index(self) -> usize {
        FINDING_TYPES.iter().position(|&t| t == self).unwrap()
    }

    /// Peak intensity of the blob (background stays below 0.4).
    fn peak(self) -> f64 {
        match self {
            FindingType::Nodule => 1.0,
            FindingType::Consolidation => 0.85,
            FindingType::Effusion => 0.75,
            FindingType::Cardiomegaly => 0.65,
        }
    }

    /// Gaussian radius multipliers (z, y, x) relative to size radius.
    fn sigma_shape(self) -> [f64; 3] {
        match self {
            FindingType::Nodule => [0.7, 0.7, 0.7],
            FindingType::Effusion => [1.2, 0.5, 2.5],
            FindingType::Consolidation => [1.5, 1.5, 1.5],
            FindingType::Cardiomegaly => [1.8, 2.2, 2.2],
        }
    }
}

impl fmt::Display for FindingType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    LeftUpper,
    LeftLower,
    RightUpper,
    RightLower,
    Central,
}

pub const REGIONS: [Region; 5] = [
    Region::LeftUpper,
    Region::LeftLower,
    Region::RightUpper,
    Region::RightLower,
    Region::Central,
];

impl Region {
    pub fn phrase(self) -> &'static str {
        match self {
            Region::LeftUpper => "left upper",
            Region::LeftLower => "left lower",
            Region::RightUpper => "right upper",
            Region::RightLower => "right lower",
            Region::Central => "central",
        }
    }

    /// In-plane center as (y, x) fractions of the grid.
    fn center_frac(self) -> (f64, f64) {
        match self {
            Region::LeftUpper => (0.25, 0.25),
            Region::LeftLower => (0.75, 0.25),
            Region::RightUpper => (0.25, 0.75),
            Region::RightLower => (0.75, 0.75),
            Region::Central => (0.5, 0.5),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}

/// Ground-truth description of one synthetic finding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingSpec {
    pub finding_type: FindingType,
    pub location: Region,
    pub size_mm: f64,
    pub present: bool,
}

impl FindingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.present && !(self.size_mm > 0.0) {
            return Err(Error::invalid(format!(
                "present finding {} needs size_mm > 0",
                self.finding_type
            )));
        }
        Ok(())
    }
}

/// Blob centroid in voxel coordinates (z, y, x) for a finding.
pub fn finding_centroid(spec: &FindingSpec, dims: [usize; 3]) -> [f64; 3] {
    let (fy, fx) = spec.location.center_frac();
    // Each finding type owns a z band: bands at 1/8, 3/8, 5/8, 7/8 of depth.
    let fz = (2.0 * spec.finding_type.index() as f64 + 1.0) / 8.0;
    [
        fz * (dims[0] - 1) as f64,
        fy * (dims[1] - 1) as f64,
        fx * (dims[2] - 1) as f64,
    ]
}

fn render_finding(volume: &mut Volume, spec: &FindingSpec) {
    let dims = volume.dims;
    let spacing = volume.spacing;
    let center = finding_centroid(spec, dims);
    let peak = spec.finding_type.peak();
    let shape = spec.finding_type.sigma_shape();
    let sigma: [f64; 3] =
        std::array::from_fn(|a| (shape[a] * spec.size_mm * 0.5 / spacing[a]).max(0.5));
    let lo: [usize; 3] =
        std::array::from_fn(|a| ((center[a] - 4.0 * sigma[a]).floor().max(0.0)) as usize);
    let hi: [usize; 3] = std::array::from_fn(|a| {
        ((center[a] + 4.0 * sigma[a]).ceil() as usize).min(dims[a] - 1)
    });
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let dz = (z as f64 - center[0]) / sigma[0];
                let dy = (y as f64 - center[1]) / sigma[1];
                let dx = (x as f64 - center[2]) / sigma[2];
                let value = peak * (-0.5 * (dz * dz + dy * dy + dx * dx)).exp();
                let cur = volume.get(z, y, x) as f64;
                if value > cur {
                    volume.set(z, y, x, value as f32);
                }
            }
        }
    }
}

fn positive_sentence(spec: &FindingSpec) -> String {
    match spec.finding_type {
        FindingType::Nodule => format!(
            "there is a nodule in the {} region measuring {} mm .",
            spec.location,
            spec.size_mm.round() as i64
        ),
        FindingType::Effusion => format!(
            "there is an effusion layering in the {} region measuring {} mm .",
            spec.location,
            spec.size_mm.round() as i64
        ),
        FindingType::Consolidation => format!(
            "patchy consolidation is seen in the {} region measuring {} mm .",
            spec.location,
            spec.size_mm.round() as i64
        ),
        FindingType::Cardiomegaly => format!(
            "cardiomegaly is present with the cardiac contour centered in the {} region measuring {} mm .",
            spec.location,
            spec.size_mm.round() as i64
        ),
    }
}

fn negative_sentence(t: FindingType) -> String {
    match t {
        FindingType::Nodule => "no nodule is identified .".to_string(),
        FindingType::Effusion => "no effusion is present .".to_string(),
        FindingType::Consolidation => "no consolidation is seen .".to_string(),
        FindingType::Cardiomegaly => "no cardiomegaly .".to_string(),
    }
}

/// Render the fixed-template report for a finding set: one sentence per
/// present finding plus a negation sentence for every absent lexicon entry,
/// in lexicon order.
pub fn render_report(findings: &[FindingSpec]) -> String {
    let mut sentences = Vec::new();
    for t in FINDING_TYPES {
        let present: Vec<&FindingSpec> = findings
            .iter()
            .filter(|f| f.present && f.finding_type == t)
            .collect();
        if present.is_empty() {
            sentences.push(negative_sentence(t));
        } else {
            for f in present {
                sentences.push(positive_sentence(f));
            }
        }
    }
    sentences.join(" ")
}

/// Deterministic smooth background texture in roughly [0.05, 0.35].
fn background(seed: u64, dims: [usize; 3]) -> Vec<f32> {
    let mut rng = rng_from(subseed(seed, "background", 0));
    let phases: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let freqs: [f64; 6] = std::array::from_fn(|_| rng.gen_range(1.0..3.0));
    let mut voxels = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in 0..dims[0] {
        let tz = z as f64 / dims[0] as f64;
        for y in 0..dims[1] {
            let ty = y as f64 / dims[1] as f64;
            for x in 0..dims[2] {
                let tx = x as f64 / dims[2] as f64;
                let a = (std::f64::consts::TAU * (freqs[0] * tx + phases[0])).sin()
                    * (std::f64::consts::TAU * (freqs[1] * ty + phases[1])).sin();
                let b = (std::f64::consts::TAU * (freqs[2] * ty + phases[2])).sin()
                    * (std::f64::consts::TAU * (freqs[3] * tz + phases[3])).sin();
                let c = (std::f64::consts::TAU * (freqs[4] * tz + phases[4])).sin()
                    * (std::f64::consts::TAU * (freqs[5] * tx + phases[5])).sin();
                let v = 0.2 + 0.05 * a + 0.05 * b + 0.05 * c;
                voxels.push(v as f32);
            }
        }
    }
    voxels
}

/// Synthetic example: phantom volume plus its template report and QA pairs.
#[derive(Debug, Clone)]
pub struct SyntheticExample {
    pub volume: Volume,
    pub report: String,
    pub qa: Vec<QaPair>,
    pub findings: Vec<FindingSpec>,
}

/// Deterministic phantom generator: smooth background plus one geometric blob
/// per present finding, rendered with max blending so each blob keeps its
/// characteristic peak intensity.
pub fn synth_volume(seed: u64, findings: &[FindingSpec], shape: [usize; 3]) -> Result<SyntheticExample> {
    if shape.iter().any(|&d| d < 8) {
        return Err(Error::invalid(format!("synth shape dims must be >= 8, got {shape:?}")));
    }
    for f in findings {
        f.validate()?;
    }
    let voxels = background(seed, shape);
    let mut volume = Volume::new(voxels, shape, DEFAULT_SPACING)?;
    volume.patient_id = format!("synth-{seed:016x}");
    for f in findings.iter().filter(|f| f.present) {
        render_finding(&mut volume, f);
    }
    let report = render_report(findings);
    let qa = crate::eval::vqa::synth_vqa_from_findings(findings);
    Ok(SyntheticExample { volume, report, qa, findings: findings.to_vec() })
}

/// Draw a random finding set: each lexicon entry present with probability 1/2,
/// uniform region, integer size 5..=12 mm.
pub fn draw_findings(seed: u64) -> Vec<FindingSpec> {
    let mut rng = rng_from(seed);
    FINDING_TYPES
        .iter()
        .map(|&t| {
            let present = rng.gen_bool(0.5);
            let location = REGIONS[rng.gen_range(0..REGIONS.len())];
            let size_mm = rng.gen_range(5..=12) as f64;
            FindingSpec { finding_type: t, location, size_mm, present }
        })
        .collect()
}

// ---- container format ----

/// Write the binary volume container: 16-byte magic, LE u32 dims (z, y, x),
/// 3×f32 spacing, then z·y·x LE f32 voxels.
pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VOLUME_MAGIC)?;
    for d in volume.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in volume.spacing {
        w.write_all(&(s as f32).to_le_bytes())?;
    }
    for v in &volume.voxels {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a volume container written by [`write_volume`]; tags default to
/// axial CT since the container stores geometry only.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic)?;
    if &magic != VOLUME_MAGIC {
        return Err(Error::Parse(format!("{}: bad volume magic", path.display())));
    }
    let mut buf4 = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        r.read_exact(&mut buf4)?;
        *d = u32::from_le_bytes(buf4) as usize;
    }
    let mut spacing = [0f64; 3];
    for s in spacing.iter_mut() {
        r.read_exact(&mut buf4)?;
        *s = f32::from_le_bytes(buf4) as f64;
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::Parse("volume dims overflow".into()))?;
    let mut voxels = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf4)?;
        voxels.push(f32::from_le_bytes(buf4));
    }
    Volume::new(voxels, dims, spacing)
}

// ---- dataset manifest ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub q: String,
    pub a: String,
}

/// One dataset example, serialized as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub volume_paths: Vec<String>,
    pub report: String,
    pub qa: Vec<QaPair>,
    pub labels: std::collections::BTreeMap<String, u8>,
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Generate `count` synthetic examples under `out_dir`, writing one volume
/// file per example and a JSON-lines manifest. Generation runs in parallel
/// but results are merged in example order, so output depends only on `seed`.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    shape: [usize; 3],
    out_dir: &Path,
) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(out_dir)?;
    let examples: Vec<(SyntheticExample, String)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let ex_seed = subseed(seed, "example", i as u64);
            let findings = draw_findings(subseed(ex_seed, "findings", 0));
            let ex = synth_volume(ex_seed, &findings, shape)?;
            Ok((ex, format!("vol_{i:05}.vol")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(count);
    for (ex, file_name) in &examples {
        write_volume(&ex.volume, &out_dir.join(file_name))?;
        let labels = FINDING_TYPES
            .iter()
            .map(|&t| {
                let present = ex.findings.iter().any(|f| f.present && f.finding_type == t);
                (t.name().to_string(), u8::from(present))
            })
            .collect();
        records.push(ManifestRecord {
            volume_paths: vec![file_name.clone()],
            report: ex.report.clone(),
            qa: ex.qa.clone(),
            labels,
        });
    }
    write_manifest(&records, &out_dir.join("manifest.jsonl"))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(dims: [usize; 3], spacing: [f64; 3]) -> Volume {
        let n = dims[0] * dims[1] * dims[2];
        let voxels = (0..n).map(|i| i as f32 / n as f32).collect();
        Volume::new(voxels, dims, spacing).unwrap()
    }

    #[test]
    fn volume_rejects_bad_inputs() {
        assert!(Volume::new(vec![0.0], [1, 1, 1], [0.0, 1.0, 1.0]).is_err());
        assert!(Volume::new(vec![f32::NAN], [1, 1, 1], [1.0, 1.0, 1.0]).is_err());
        assert!(Volume::new(vec![0.0; 3], [1, 2, 2], [1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let v = ramp_volume([4, 5, 6], [1.5, 0.75, 0.75]);
        let out = resample_to_spacing(&v, [1.5, 0.75, 0.75]).unwrap();
        assert_eq!(out.voxels(), v.voxels());
    }

    #[test]
    fn resample_doubles_z() {
        // 32 slices at 3.0 mm resampled to 1.5 mm gives 64 slices
        let v = ramp_volume([32, 4, 4], [3.0, 1.0, 1.0]);
        let out = resample_to_spacing(&v, [1.5, 1.0, 1.0]).unwrap();
        assert_eq!(out.dims(), [64, 4, 4]);
        assert_eq!(out.spacing(), [1.5, 1.0, 1.0]);
    }

    #[test]
    fn resample_rejects_nonpositive_spacing() {
        let v = ramp_volume([4, 4, 4], [1.0, 1.0, 1.0]);
        assert!(resample_to_spacing(&v, [0.0, 1.0, 1.0]).is_err());
        assert!(resample_to_spacing(&v, [-1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn crop_window_is_centered() {
        // 500 -> 480 crops [10, 490)
        let n = 500;
        let voxels: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let v = Volume::new(voxels, [1, 1, n], [1.0, 1.0, 1.0]).unwrap();
        let out = pad_or_center_crop(&v, [1, 1, 480]).unwrap();
        assert_eq!(out.get(0, 0, 0), 10.0);
        assert_eq!(out.get(0, 0, 479), 489.0);
    }

    #[test]
    fn odd_pad_goes_high() {
        let v = ramp_volume([1, 1, 2], [1.0, 1.0, 1.0]);
        let out = pad_or_center_crop(&v, [1, 1, 5]).unwrap();
        // low side gets 1 zero, high side gets 2
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(0, 0, 1), v.get(0, 0, 0));
        assert_eq!(out.get(0, 0, 2), v.get(0, 0, 1));
        assert_eq!(out.get(0, 0, 3), 0.0);
        assert_eq!(out.get(0, 0, 4), 0.0);
    }

    #[test]
    fn pad_or_crop_identity() {
        let v = ramp_volume([3, 4, 5], [1.0, 1.0, 1.0]);
        let out = pad_or_center_crop(&v, [3, 4, 5]).unwrap();
        assert_eq!(out.voxels(), v.voxels());
    }

    #[test]
    fn slice_iter_counts_and_replicates() {
        let v = ramp_volume([1, 4, 4], [1.0, 1.0, 1.0]);
        let slices: Vec<SliceImage> = slice_iter(&v, ChannelMode::Replicate).collect();
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].channel(0), slices[0].channel(1));
        assert_eq!(slices[0].channel(1), slices[0].channel(2));

        let v240 = ramp_volume([240, 2, 2], [1.0, 1.0, 1.0]);
        assert_eq!(slice_iter(&v240, ChannelMode::Replicate).count(), 240);
    }

    #[test]
    fn phase_priority_orders_t2_first() {
        let mk = |phase, mods: &[PhaseModifier]| {
            ramp_volume([4, 4, 4], [1.0, 1.0, 1.0]).with_tags(View::Axial, phase, mods)
        };
        let volumes = vec![
            mk(Phase::T1, &[]),
            mk(Phase::T2, &[]),
            mk(Phase::T1, &[PhaseModifier::CE]),
        ];
        let stack = select_and_sample_phases(&volumes, &default_phase_priority(), 3, 2, ChannelMode::Replicate)
            .unwrap();
        let order: Vec<usize> = stack.provenance.iter().map(|p| p.source).collect();
        // selection order [T2, T1+CE, T1-plain] = inputs [1, 2, 0]
        assert_eq!(order, vec![1, 1, 2, 2, 0, 0]);
    }

    #[test]
    fn six_phases_twenty_slices_gives_120() {
        let volumes: Vec<Volume> = (0..6)
            .map(|_| ramp_volume([40, 4, 4], [1.0, 1.0, 1.0]).with_tags(View::Axial, Phase::T2, &[]))
            .collect();
        let stack =
            select_and_sample_phases(&volumes, &default_phase_priority(), 6, 20, ChannelMode::Replicate)
                .unwrap();
        assert_eq!(stack.len(), 120);
        assert!(stack.provenance.iter().all(|p| !p.padded));
    }

    #[test]
    fn missing_phases_pad_with_top_volume() {
        let volumes = vec![ramp_volume([8, 4, 4], [1.0, 1.0, 1.0])];
        let stack =
            select_and_sample_phases(&volumes, &default_phase_priority(), 3, 4, ChannelMode::Replicate)
                .unwrap();
        assert_eq!(stack.len(), 12);
        assert!(stack.provenance[..4].iter().all(|p| !p.padded));
        assert!(stack.provenance[4..].iter().all(|p| p.padded));
    }

    #[test]
    fn identity_sampling_when_full_length() {
        let v = ramp_volume([10, 2, 2], [1.0, 1.0, 1.0]);
        let stack =
            select_and_sample_phases(&[v], &default_phase_priority(), 1, 10, ChannelMode::Replicate)
                .unwrap();
        let idx: Vec<usize> = stack.provenance.iter().map(|p| p.slice).collect();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn short_volume_samples_with_repetition() {
        assert_eq!(sample_indices(2, 6), vec![0, 0, 1, 1, 1, 1]);
        assert_eq!(sample_indices(2, 6).len(), 6);
    }

    #[test]
    fn synth_is_deterministic() {
        let findings = vec![FindingSpec {
            finding_type: FindingType::Nodule,
            location: Region::LeftLower,
            size_mm: 8.0,
            present: true,
        }];
        let a = synth_volume(42, &findings, [16, 32, 32]).unwrap();
        let b = synth_volume(42, &findings, [16, 32, 32]).unwrap();
        assert_eq!(a.volume.voxels(), b.volume.voxels());
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn empty_findings_report_is_all_negations() {
        let ex = synth_volume(7, &[], [8, 8, 8]).unwrap();
        assert!(ex.report.contains("no nodule"));
        assert!(ex.report.contains("no effusion"));
        assert!(ex.report.contains("no consolidation"));
        assert!(ex.report.contains("no cardiomegaly"));
        assert!(!ex.report.contains("there is"));
    }

    #[test]
    fn nodule_centroid_lands_in_left_lower_quadrant() {
        let findings = vec![FindingSpec {
            finding_type: FindingType::Nodule,
            location: Region::LeftLower,
            size_mm: 8.0,
            present: true,
        }];
        let ex = synth_volume(3, &findings, [16, 32, 32]).unwrap();
        let v = &ex.volume;
        let [dz, dy, dx] = v.dims();
        let mut best = (0usize, 0usize, 0usize);
        let mut best_val = f32::NEG_INFINITY;
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    if v.get(z, y, x) > best_val {
                        best_val = v.get(z, y, x);
                        best = (z, y, x);
                    }
                }
            }
        }
        // left = low x half, lower = high y half
        assert!(best.2 < dx / 2, "x {} not in left half", best.2);
        assert!(best.1 >= dy / 2, "y {} not in lower half", best.1);
    }

    #[test]
    fn synth_rejects_tiny_shapes() {
        assert!(synth_volume(0, &[], [4, 8, 8]).is_err());
    }

    #[test]
    fn volume_io_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let v = ramp_volume([3, 4, 5], [1.5, 0.75, 0.75]);
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.voxels(), v.voxels());
        assert_eq!(back.spacing(), [1.5, 0.75, 0.75]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let records = vec![ManifestRecord {
            volume_paths: vec!["vol_00000.vol".into()],
            report: "no nodule is identified .".into(),
            qa: vec![QaPair { q: "are there any abnormalities ?".into(), a: "no".into() }],
            labels: [("nodule".to_string(), 0u8)].into_iter().collect(),
        }];
        write_manifest(&records, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].report, records[0].report);
        assert_eq!(back[0].labels, records[0].labels);
    }
}
