//! Non-overlapping square window partition of `L×L×C` feature maps.
//!
//! Windows are ordered row-major over the window grid, and cells are ordered
//! row-major inside each window. That order is the within-scale token order
//! used everywhere downstream.

use crate::error::{shape_err, CosError, Result};
use crate::numerics::Tensor;

/// An `L×L×C` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        match *tensor.shape() {
            [a, b, _] if a == b => Ok(Self(tensor)),
            _ => shape_err("feature_map", format!("expected L×L×C, got {:?}", tensor.shape())),
        }
    }

    pub fn zeros(size: usize, channels: usize) -> Self {
        Self(Tensor::zeros([size, size, channels]))
    }

    pub fn size(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let (l, c) = (self.size(), self.channels());
        &self.0.data()[(i * l + j) * c..(i * l + j + 1) * c]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let (l, c) = (self.size(), self.channels());
        &mut self.0.data_mut()[(i * l + j) * c..(i * l + j + 1) * c]
    }

    /// The grid flattened to `L²×C`, rows in row-major cell order.
    pub fn flattened(&self) -> Tensor {
        let (l, c) = (self.size(), self.channels());
        self.0.reshape([l * l, c]).expect("same element count")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedFeatures {
    /// `(L/W)²` windows, each `W²×C`.
    pub windows: Vec<Tensor>,
    /// (rows, cols) of the window grid.
    pub window_grid: (usize, usize),
    /// (L, L, C) of the partitioned map.
    pub source_shape: (usize, usize, usize),
    pub window_size: usize,
}

impl WindowedFeatures {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

pub fn check_divisible(size: usize, window: usize) -> Result<()> {
    if window == 0 || !size.is_multiple_of(window) {
        return Err(CosError::Divisibility { size, window });
    }
    Ok(())
}

/// Flat cell indices (`i·L + j`) covered by window `(row, col)`.
pub fn window_cells(size: usize, window: usize, row: usize, col: usize) -> Vec<usize> {
    let mut cells = Vec::with_capacity(window * window);
    for i in row * window..(row + 1) * window {
        for j in col * window..(col + 1) * window {
            cells.push(i * size + j);
        }
    }
    cells
}

/// Cell index lists for every window, in row-major window order.
pub fn all_window_cells(size: usize, window: usize) -> Result<Vec<Vec<usize>>> {
    check_divisible(size, window)?;
    let g = size / window;
    Ok((0..g * g)
        .map(|k| window_cells(size, window, k / g, k % g))
        .collect())
}

/// Row-major index of the window containing cell `(i, j)`.
pub fn window_of(size: usize, window: usize, i: usize, j: usize) -> usize {
    (i / window) * (size / window) + j / window
}

pub fn partition(x: &FeatureMap, w: usize) -> Result<WindowedFeatures> {
    let (l, c) = (x.size(), x.channels());
    let cells = all_window_cells(l, w)?;
    let data = x.tensor().data();
    let windows = cells
        .iter()
        .map(|idx| {
            let mut buf = Vec::with_capacity(idx.len() * c);
            for &cell in idx {
                buf.extend_from_slice(&data[cell * c..(cell + 1) * c]);
            }
            Tensor::new([w * w, c], buf)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowedFeatures {
        windows,
        window_grid: (l / w, l / w),
        source_shape: (l, l, c),
        window_size: w,
    })
}

pub fn unpartition(wf: &WindowedFeatures) -> Result<FeatureMap> {
    let (l, l2, c) = wf.source_shape;
    let w = wf.window_size;
    if l != l2 {
        return shape_err("unpartition", "source shape is not square");
    }
    check_divisible(l, w)?;
    let g = l / w;
    if wf.window_grid != (g, g) || wf.windows.len() != g * g {
        return shape_err(
            "unpartition",
            format!(
                "grid {:?} with {} windows does not match L={l}, W={w}",
                wf.window_grid,
                wf.windows.len()
            ),
        );
    }
    let mut out = vec![0.0; l * l * c];
    for (k, win) in wf.windows.iter().enumerate() {
        if win.shape() != [w * w, c] {
            return shape_err(
                "unpartition",
                format!(
                    "window {k} has shape {:?}, expected [{}, {c}]",
                    win.shape(),
                    w * w
                ),
            );
        }
        for (r, cell) in window_cells(l, w, k / g, k % g).into_iter().enumerate() {
            out[cell * c..(cell + 1) * c].copy_from_slice(win.row(r));
        }
    }
    FeatureMap::new(Tensor::new([l, l, c], out)?)
}
