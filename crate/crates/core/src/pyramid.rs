//! Planes and the multi-level subband layout.
//!
//! Bands are stored coarse to fine: `[LL_K, HL_K, LH_K, HH_K, ..., HL_1,
//! LH_1, HH_1]`, where level 1 is the finest. A level-`k` band has shape
//! `(h >> k) x (w >> k)`.

use crate::Error;

/// A row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Plane<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![T::default(); width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, Error> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} plane needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// Horizontal detail: high-pass across columns, low-pass across rows.
    HL,
    /// Vertical detail.
    LH,
    HH,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::HL, Orientation::LH, Orientation::HH];

    pub fn index(self) -> usize {
        match self {
            Orientation::HL => 0,
            Orientation::LH => 1,
            Orientation::HH => 2,
        }
    }
}

/// What a band index refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BandKind {
    Approx,
    Detail { level: usize, orientation: Orientation },
}

pub fn band_count(levels: usize) -> usize {
    3 * levels + 1
}

pub fn band_index(levels: usize, level: usize, orientation: Orientation) -> usize {
    debug_assert!(level >= 1 && level <= levels);
    1 + 3 * (levels - level) + orientation.index()
}

pub fn band_kind(levels: usize, index: usize) -> BandKind {
    if index == 0 {
        return BandKind::Approx;
    }
    let i = index - 1;
    let orientation = Orientation::ALL[i % 3];
    BandKind::Detail { level: levels - i / 3, orientation }
}

/// Level of a band; the approximation band sits at the coarsest level.
pub fn band_level(levels: usize, index: usize) -> usize {
    match band_kind(levels, index) {
        BandKind::Approx => levels,
        BandKind::Detail { level, .. } => level,
    }
}

/// Checks that `width x height` splits cleanly `levels` times.
pub fn check_dyadic(width: usize, height: usize, levels: usize) -> Result<(), Error> {
    let m = 1usize << levels;
    if width == 0 || height == 0 || width % m != 0 || height % m != 0 {
        return Err(Error::Shape(format!(
            "{width}x{height} is not divisible by 2^{levels}"
        )));
    }
    Ok(())
}

/// Subband pyramid of an image of `width x height`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T> {
    pub width: usize,
    pub height: usize,
    pub levels: usize,
    pub bands: Vec<Plane<T>>,
}

pub type SubbandPyramid = Pyramid<f64>;
pub type QuantizedPyramid = Pyramid<i32>;

impl<T: Copy + Default> Pyramid<T> {
    pub fn zeros(width: usize, height: usize, levels: usize) -> Result<Self, Error> {
        check_dyadic(width, height, levels)?;
        let bands = (0..band_count(levels))
            .map(|i| {
                let k = band_level(levels, i);
                Plane::new(width >> k, height >> k)
            })
            .collect();
        Ok(Self { width, height, levels, bands })
    }

    /// Verifies band count and dyadic shapes.
    pub fn validate(&self) -> Result<(), Error> {
        check_dyadic(self.width, self.height, self.levels)?;
        if self.bands.len() != band_count(self.levels) {
            return Err(Error::Shape(format!(
                "{} levels need {} bands, got {}",
                self.levels,
                band_count(self.levels),
                self.bands.len()
            )));
        }
        for (i, b) in self.bands.iter().enumerate() {
            let k = band_level(self.levels, i);
            let (w, h) = (self.width >> k, self.height >> k);
            if b.width != w || b.height != h || b.data.len() != w * h {
                return Err(Error::Shape(format!(
                    "band {i} is {}x{}, expected {w}x{h}",
                    b.width, b.height
                )));
            }
        }
        Ok(())
    }

    pub fn band(&self, level: usize, orientation: Orientation) -> &Plane<T> {
        &self.bands[band_index(self.levels, level, orientation)]
    }

    pub fn coefficient_count(&self) -> usize {
        self.bands.iter().map(|b| b.len()).sum()
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U + Copy) -> Pyramid<U> {
        Pyramid {
            width: self.width,
            height: self.height,
            levels: self.levels,
            bands: self.bands.iter().map(|b| b.map(f)).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.bands.iter().flat_map(|b| b.data.iter().copied())
    }
}

impl QuantizedPyramid {
    pub fn to_real(&self) -> SubbandPyramid {
        self.map(|v| v as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_layout_for_four_levels() {
        let p = SubbandPyramid::zeros(128, 128, 4).unwrap();
        assert_eq!(p.bands.len(), 13);
        assert_eq!((p.bands[0].width, p.bands[0].height), (8, 8));
        assert_eq!(band_kind(4, 1), BandKind::Detail { level: 4, orientation: Orientation::HL });
        assert_eq!(band_kind(4, 12), BandKind::Detail { level: 1, orientation: Orientation::HH });
        let hh1 = p.band(1, Orientation::HH);
        assert_eq!((hh1.width, hh1.height), (64, 64));
        for i in 1..13 {
            if let BandKind::Detail { level, orientation } = band_kind(4, i) {
                assert_eq!(band_index(4, level, orientation), i);
            }
        }
        p.validate().unwrap();
    }

    #[test]
    fn non_dyadic_sizes_are_rejected() {
        assert!(SubbandPyramid::zeros(12, 16, 3).is_err());
        let mut p = SubbandPyramid::zeros(16, 16, 2).unwrap();
        p.bands.pop();
        assert!(p.validate().is_err());
    }
}
