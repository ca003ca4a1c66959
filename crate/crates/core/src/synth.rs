//! Synthetic phantoms standing in for metabolic maps, with the k-space
//! degradation and lattice-exact augmentation.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::kspace::{degrade, zero_fill_upsample};
use crate::real::Real;
use crate::rng::{derive_seed, domain, Rng};
use crate::tensor::Tensor;

pub const SUPPORTED_SIZES: [usize; 2] = [32, 64];
/// High- to low-resolution side ratio.
pub const DEFAULT_RATIO: usize = 4;
/// Largest circular shift applied by augmentation, per axis.
pub const MAX_SHIFT: i32 = 4;
/// Seed distance between consecutive splits.
pub const SPLIT_STRIDE: u64 = 1 << 32;

pub fn check_size(size: usize) -> Result<()> {
    if SUPPORTED_SIZES.contains(&size) {
        Ok(())
    } else {
        Err(Error::arg(
            "phantom",
            format!("unsupported size {size}; supported sizes are 32 and 64"),
        ))
    }
}

/// Gaussian bump in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub cy: f64,
    pub cx: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

impl Bump {
    fn at(&self, y: f64, x: f64) -> f64 {
        let d2 = (y - self.cy) * (y - self.cy) + (x - self.cx) * (x - self.cx);
        self.amplitude * Float::exp(-d2 / (2.0 * self.sigma * self.sigma))
    }
}

/// Geometry of one phantom, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomLayout {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
    pub blobs: Vec<Bump>,
    pub hotspot: Bump,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom<T> {
    pub image: Tensor<T>,
    pub t1: Tensor<T>,
    pub flair: Tensor<T>,
    pub layout: PhantomLayout,
}

/// Pixel centre in `[-1, 1]` coordinates.
fn coord(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 + 1.0) / n as f64 - 1.0
}

impl PhantomLayout {
    fn draw(rng: &mut Rng) -> Self {
        let center = (
            rng.uniform_range(-0.05, 0.05),
            rng.uniform_range(-0.05, 0.05),
        );
        let semi_axes = (rng.uniform_range(0.7, 0.85), rng.uniform_range(0.55, 0.75));
        let angle = rng.uniform_range(-0.3, 0.3);
        let mut layout = PhantomLayout {
            center,
            semi_axes,
            angle,
            blobs: Vec::new(),
            hotspot: Bump {
                cy: 0.0,
                cx: 0.0,
                sigma: 0.0,
                amplitude: 0.0,
            },
        };
        let count = rng.int_range(2, 5) as usize;
        for _ in 0..count {
            let (cy, cx) = layout.interior_point(rng, 0.8);
            layout.blobs.push(Bump {
                cy,
                cx,
                sigma: rng.uniform_range(0.1, 0.25),
                amplitude: rng.uniform_range(0.15, 0.35),
            });
        }
        let (cy, cx) = layout.interior_point(rng, 0.6);
        layout.hotspot = Bump {
            cy,
            cx,
            sigma: rng.uniform_range(0.06, 0.12),
            amplitude: rng.uniform_range(0.35, 0.5),
        };
        layout
    }

    /// Elliptic radius: below 1 inside the brain mask.
    pub fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (s, c) = (Float::sin(self.angle), Float::cos(self.angle));
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        Float::sqrt(
            (u / self.semi_axes.1) * (u / self.semi_axes.1)
                + (v / self.semi_axes.0) * (v / self.semi_axes.0),
        )
    }

    fn interior_point(&self, rng: &mut Rng, max_radius: f64) -> (f64, f64) {
        loop {
            let y = rng.uniform_range(-1.0, 1.0);
            let x = rng.uniform_range(-1.0, 1.0);
            if self.radius(y, x) < max_radius {
                return (y, x);
            }
        }
    }
}

/// Deterministic phantom triplet for `seed` on an `size x size` grid.
pub fn generate_phantom<T: Real>(seed: u64, size: usize) -> Result<Phantom<T>> {
    check_size(size)?;
    let mut rng = Rng::stream(seed, domain::PHANTOM, 0);
    let layout = PhantomLayout::draw(&mut rng);
    let n = size * size;
    let (mut image, mut t1, mut flair) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (coord(i, size), coord(j, size));
            if layout.radius(y, x) > 1.0 {
                image.push(T::zero());
                t1.push(T::zero());
                flair.push(T::zero());
                continue;
            }
            let blobs: f64 = layout.blobs.iter().map(|b| b.at(y, x)).sum();
            let hot = layout.hotspot.at(y, x);
            let hot_unit = hot / layout.hotspot.amplitude;
            image.push(T::c((0.3 + blobs + hot).clamp(0.0, 1.0)));
            t1.push(T::c((0.75 - 0.5 * blobs - 0.2 * hot_unit).clamp(0.0, 1.0)));
            flair.push(T::c((0.35 + 0.2 * blobs + 0.6 * hot_unit).clamp(0.0, 1.0)));
        }
    }
    let shape = [1, size, size];
    Ok(Phantom {
        image: Tensor::new(&shape, image)?,
        t1: Tensor::new(&shape, t1)?,
        flair: Tensor::new(&shape, flair)?,
        layout,
    })
}

/// One stored training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord<T> {
    /// Ground truth `[1,N,N]`.
    pub image: Tensor<T>,
    pub t1: Tensor<T>,
    pub flair: Tensor<T>,
    /// Low-resolution measurement `[1,n,n]`.
    pub low: Tensor<T>,
    /// Blurry super-resolved stand-in `[1,N,N]`.
    pub sr: Tensor<T>,
    pub seed: u64,
}

impl<T: Real> SampleRecord<T> {
    /// Build a record from its high-resolution channels, deriving the
    /// measurement and the zero-filled SR stand-in.
    pub fn from_channels(
        image: Tensor<T>,
        t1: Tensor<T>,
        flair: Tensor<T>,
        low_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let size = image.shape().last().copied().unwrap_or(0);
        let low = degrade(&image, low_size)?;
        let sr = zero_fill_upsample(&low, size)?;
        Ok(SampleRecord {
            image,
            t1,
            flair,
            low,
            sr,
            seed,
        })
    }

    pub fn synthesize(seed: u64, size: usize, low_size: usize) -> Result<Self> {
        let p = generate_phantom::<T>(seed, size)?;
        Self::from_channels(p.image, p.t1, p.flair, low_size, seed)
    }

    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn low_size(&self) -> usize {
        self.low.shape()[2]
    }

    pub fn condition(&self) -> Condition<T> {
        Condition {
            sr: self.sr.clone(),
            t1: self.t1.clone(),
            flair: self.flair.clone(),
        }
    }

    /// True when `low` and `sr` are exactly what the pipeline derives from
    /// `image`.
    pub fn is_consistent(&self) -> Result<bool> {
        let low = degrade(&self.image, self.low_size())?;
        let sr = zero_fill_upsample(&low, self.size())?;
        Ok(low == self.low && sr == self.sr)
    }
}

/// Rotation by `quarter_turns * 90` degrees counter-clockwise followed by a
/// circular shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub quarter_turns: u8,
    pub shift: (i32, i32),
}

impl Augmentation {
    pub fn draw(rng: &mut Rng) -> Self {
        Augmentation {
            quarter_turns: rng.below(4) as u8,
            shift: (
                rng.int_range(-(MAX_SHIFT as i64), MAX_SHIFT as i64) as i32,
                rng.int_range(-(MAX_SHIFT as i64), MAX_SHIFT as i64) as i32,
            ),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.quarter_turns.is_multiple_of(4) && self.shift == (0, 0)
    }

    pub fn apply_map<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let r = rotate90(x, self.quarter_turns)?;
        circular_shift(&r, self.shift.0, self.shift.1)
    }

    pub fn invert_map<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = circular_shift(x, -self.shift.0, -self.shift.1)?;
        rotate90(&s, (4 - self.quarter_turns % 4) % 4)
    }

    /// Transform the high-resolution channels identically and re-derive the
    /// measurement and SR stand-in.
    pub fn apply<T: Real>(&self, record: &SampleRecord<T>) -> Result<SampleRecord<T>> {
        SampleRecord::from_channels(
            self.apply_map(&record.image)?,
            self.apply_map(&record.t1)?,
            self.apply_map(&record.flair)?,
            record.low_size(),
            record.seed,
        )
    }
}

fn plane_dims<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.chw()?;
    if h != w {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected square maps",
        });
    }
    Ok((c, h, w))
}

/// Counter-clockwise rotation of each channel by `k * 90` degrees.
pub fn rotate90<T: Real>(x: &Tensor<T>, k: u8) -> Result<Tensor<T>> {
    let (_, n, _) = plane_dims("rotate90", x)?;
    let d = x.data();
    Ok(Tensor::from_fn(x.shape(), |idx| {
        let (ch, rem) = (idx / (n * n), idx % (n * n));
        let (i, j) = (rem / n, rem % n);
        let (si, sj) = match k % 4 {
            0 => (i, j),
            1 => (j, n - 1 - i),
            2 => (n - 1 - i, n - 1 - j),
            _ => (n - 1 - j, i),
        };
        d[ch * n * n + si * n + sj]
    }))
}

/// `out[i, j] = x[(i - dy) mod n, (j - dx) mod n]` per channel.
pub fn circular_shift<T: Real>(x: &Tensor<T>, dy: i32, dx: i32) -> Result<Tensor<T>> {
    let (_, h, w) = x.chw()?;
    let d = x.data();
    let wrap = |v: usize, s: i32, n: usize| ((v as i64 - s as i64).rem_euclid(n as i64)) as usize;
    Ok(Tensor::from_fn(x.shape(), |idx| {
        let (ch, rem) = (idx / (h * w), idx % (h * w));
        let (i, j) = (rem / w, rem % w);
        d[ch * h * w + wrap(i, dy, h) * w + wrap(j, dx, w)]
    }))
}

/// Bilinear resampling of `[C,h,w]` maps to `[C,size,size]` with pixel-centre
/// alignment and edge clamping.
pub fn resample_bilinear<T: Real>(x: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if size == 0 {
        return Err(Error::arg("resample", "target size must be positive"));
    }
    if h == size && w == size {
        return Ok(x.clone());
    }
    let d = x.data();
    let src = |o: usize, n_in: usize| -> (usize, usize, f64) {
        let p = ((o as f64 + 0.5) * n_in as f64 / size as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = Float::floor(p) as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, p - lo as f64)
    };
    Ok(Tensor::from_fn(&[c, size, size], |idx| {
        let (ch, rem) = (idx / (size * size), idx % (size * size));
        let (i, j) = (rem / size, rem % size);
        let (y0, y1, fy) = src(i, h);
        let (x0, x1, fx) = src(j, w);
        let at = |y: usize, xx: usize| d[ch * h * w + y * w + xx].f64();
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        T::c(top * (1.0 - fy) + bottom * fy)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 200,
            val: 40,
            test: 40,
        }
    }
}

/// Phantom seeds of every split. Each split draws from its own contiguous
/// range, so no seed appears twice.
pub fn split_seeds(master: u64, counts: SplitCounts) -> Result<Vec<(Split, u64)>> {
    let base = derive_seed(master, domain::PHANTOM, 0);
    let mut out = Vec::with_capacity(counts.total());
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let n = counts.get(split);
        if n == 0 {
            return Err(Error::arg(
                "dataset",
                format!("{} split needs at least one sample", split.name()),
            ));
        }
        if n as u64 >= SPLIT_STRIDE {
            return Err(Error::arg("dataset", "split too large"));
        }
        let start = base.wrapping_add(k as u64 * SPLIT_STRIDE);
        out.extend((0..n as u64).map(|i| (split, start.wrapping_add(i))));
    }
    Ok(out)
}
