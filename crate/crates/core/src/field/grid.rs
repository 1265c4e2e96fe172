use crate::error::{Error, Result};

use super::kernels::Geom;

/// Voxel grid: per-axis sizes and spacings (world units per voxel).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    dims: Vec<usize>,
    spacing: Vec<f64>,
}

impl Grid {
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_spacing(dims, &vec![1.0; dims.len()])
    }

    pub fn with_spacing(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::contract(format!(
                "grid must be 2D or 3D, got {} axes",
                dims.len()
            )));
        }
        if spacing.len() != dims.len() {
            return Err(Error::contract("spacing length differs from grid rank"));
        }
        if let Some(d) = dims.iter().find(|&&d| d < 4) {
            return Err(Error::contract(format!("grid axis of size {d} < 4")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::contract("grid spacing must be positive"));
        }
        Ok(Grid {
            dims: dims.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn geom(&self) -> Geom {
        Geom::new(&self.dims)
    }

    /// Same dims, ignoring spacing.
    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "{what}: grid mismatch {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("{what}: entry {i} is {}", data[i]))),
    }
}

/// Dense multi-channel scalar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    channels: usize,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::contract("volume needs at least one channel"));
        }
        if data.len() != channels * grid.len() {
            return Err(Error::contract(format!(
                "volume data length {} != {} channels x {} voxels",
                data.len(),
                channels,
                grid.len()
            )));
        }
        check_finite(&data, "volume")?;
        Ok(Volume { grid, channels, data })
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        Self::constant(grid, channels, 0.0)
    }

    pub fn constant(grid: Grid, channels: usize, value: f64) -> Self {
        let data = vec![value; channels * grid.len()];
        Volume { grid, channels, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-voxel argmax over channels; ties resolve to the lowest index.
    pub fn argmax(&self) -> LabelMap {
        let n = self.grid.len();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0usize;
                let mut best_v = self.data[i];
                for c in 1..self.channels {
                    let v = self.data[c * n + i];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            grid: self.grid.clone(),
            num_labels: self.channels,
            labels,
        }
    }
}

/// Integer label map; label 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    grid: Grid,
    num_labels: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: Grid, num_labels: usize, labels: Vec<u8>) -> Result<Self> {
        if num_labels == 0 || num_labels > 256 {
            return Err(Error::contract(format!("unsupported label count {num_labels}")));
        }
        if labels.len() != grid.len() {
            return Err(Error::contract("label map length differs from grid"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_labels) {
            return Err(Error::contract(format!("label {l} outside vocabulary of {num_labels}")));
        }
        Ok(LabelMap {
            grid,
            num_labels,
            labels,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Voxel count per label.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_labels];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn one_hot(&self) -> Volume {
        let n = self.grid.len();
        let mut data = vec![0.0; self.num_labels * n];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * n + i] = 1.0;
        }
        Volume {
            grid: self.grid.clone(),
            channels: self.num_labels,
            data,
        }
    }

    /// Mask of voxels carrying `label`.
    pub fn mask(&self, label: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == label).collect()
    }
}

/// Interpretation of a vector field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Velocity,
    Displacement,
}

impl FieldKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            FieldKind::Velocity => 0,
            FieldKind::Displacement => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FieldKind::Velocity),
            1 => Some(FieldKind::Displacement),
            _ => None,
        }
    }
}

/// Dense D-component field on a grid, component-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    kind: FieldKind,
    data: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: Grid, kind: FieldKind, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.ndim() * grid.len() {
            return Err(Error::contract(format!(
                "vector field data length {} != {} x {}",
                data.len(),
                grid.ndim(),
                grid.len()
            )));
        }
        check_finite(&data, "vector field")?;
        Ok(VectorField { grid, kind, data })
    }

    pub fn zeros(grid: Grid, kind: FieldKind) -> Self {
        let data = vec![0.0; grid.ndim() * grid.len()];
        VectorField { grid, kind, data }
    }

    /// Spatially constant field.
    pub fn uniform(grid: Grid, kind: FieldKind, value: &[f64]) -> Result<Self> {
        if value.len() != grid.ndim() {
            return Err(Error::contract("uniform field value has wrong rank"));
        }
        let n = grid.len();
        let data = value.iter().flat_map(|&c| std::iter::repeat_n(c, n)).collect();
        Self::new(grid, kind, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, j: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[j * n..(j + 1) * n]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        VectorField {
            grid: self.grid.clone(),
            kind: self.kind,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    /// Largest component magnitude.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// The components viewed as a D-channel volume.
    pub fn as_volume(&self) -> Volume {
        Volume {
            grid: self.grid.clone(),
            channels: self.grid.ndim(),
            data: self.data.clone(),
        }
    }

    pub(crate) fn geom(&self) -> Geom {
        self.grid.geom()
    }
}
