//! Half and quarter decomposition of gallery feature maps.
//!
//! Region ids are a wire format: 0 is the full image, then 1..8 are left,
//! right, top, bottom halves and top-left, top-right, bottom-left,
//! bottom-right quarters. Odd extents share the middle row/column.

use crate::encoder::FeatureMap;
use crate::error::{shape_err, Result};
use crate::tensor::Window;
use crate::vlad::{aggregate, Descriptor, VladParams};

pub const FULL_IMAGE: u8 = 0;
pub const REGION_COUNT: usize = 8;
pub const REGION_NAMES: [&str; 9] = [
    "full",
    "left",
    "right",
    "top",
    "bottom",
    "top-left",
    "top-right",
    "bottom-left",
    "bottom-right",
];

/// Which sub-regions take part in supervision and negative mining.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionMode {
    /// Full image plus all 8 regions.
    All,
    /// Full image plus the 4 halves.
    HalvesOnly,
    /// Full image only.
    None,
}

impl RegionMode {
    /// Candidate ids in wire order, starting with the full image.
    pub fn ids(self) -> &'static [u8] {
        match self {
            RegionMode::All => &[0, 1, 2, 3, 4, 5, 6, 7, 8],
            RegionMode::HalvesOnly => &[0, 1, 2, 3, 4],
            RegionMode::None => &[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSet {
    /// `windows[j - 1]` is region id `j`.
    pub windows: [Window; REGION_COUNT],
    pub height: usize,
    pub width: usize,
}

impl RegionSet {
    /// Window for id 0..=8 (0 is the full map).
    pub fn window(&self, id: u8) -> Window {
        if id == FULL_IMAGE {
            Window::full(self.height, self.width)
        } else {
            self.windows[id as usize - 1]
        }
    }
}

/// Upper half `[0, ceil(n/2))`, lower half `[floor(n/2), n)`.
fn halves(n: usize) -> ((usize, usize), (usize, usize)) {
    ((0, n.div_ceil(2)), (n / 2, n))
}

pub fn decompose_dims(height: usize, width: usize) -> Result<RegionSet> {
    if height < 2 || width < 2 {
        return shape_err(format!("cannot split a {height}x{width} map into regions"));
    }
    let (top, bottom) = halves(height);
    let (left, right) = halves(width);
    let win = |(t, b): (usize, usize), (l, r): (usize, usize)| Window {
        top: t,
        bottom: b,
        left: l,
        right: r,
    };
    let rows = (0, height);
    let cols = (0, width);
    Ok(RegionSet {
        windows: [
            win(rows, left),
            win(rows, right),
            win(top, cols),
            win(bottom, cols),
            win(top, left),
            win(top, right),
            win(bottom, left),
            win(bottom, right),
        ],
        height,
        width,
    })
}

pub fn decompose(fm: &FeatureMap) -> Result<RegionSet> {
    decompose_dims(fm.height, fm.width)
}

/// The 8 region descriptors of a gallery map, index `j - 1` for id `j`.
pub fn region_descriptors(fm: &FeatureMap, params: &VladParams) -> Result<Vec<Descriptor>> {
    let set = decompose(fm)?;
    set.windows
        .iter()
        .map(|w| aggregate(fm.window(*w), params))
        .collect()
}

/// Descriptors for the candidates of `mode`, in wire order (full first).
pub fn candidate_descriptors(
    fm: &FeatureMap,
    params: &VladParams,
    mode: RegionMode,
) -> Result<Vec<Descriptor>> {
    let set = decompose(fm)?;
    mode.ids()
        .iter()
        .map(|&id| aggregate(fm.window(set.window(id)), params))
        .collect()
}

/// Horizontal extent of each candidate as a fraction of the map width,
/// `(start, end)` in `[0, 1]`. Used to derive per-region ground truth.
pub fn horizontal_fractions(set: &RegionSet) -> [(f64, f64); 9] {
    let w = set.width as f64;
    std::array::from_fn(|id| {
        let win = set.window(id as u8);
        (win.left as f64 / w, win.right as f64 / w)
    })
}
