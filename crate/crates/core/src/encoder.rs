//! Stand-in for the frozen visual encoder: a seeded linear patch embedder,
//! synthetic feature generation and the `VCFT` feature file.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, DType, Real, Tensor};

/// Patch side in pixels.
pub const PATCH_PX: usize = 16;
/// Default patch grid side; 16×16 = 256 patches per frame.
pub const GRID_SIDE: usize = 16;

/// Encoded video features, shape (T, N, d).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeature<T> {
    data: Tensor<T>,
}

impl<T: Real> VideoFeature<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let &[t, n, d] = data.shape() else {
            return Err(Error::Input(format!(
                "video features must be (T, N, d), got {:?}",
                data.shape()
            )));
        };
        if t == 0 || d == 0 {
            return Err(Error::Input(format!("empty video features {:?}", data.shape())));
        }
        if grid_side(n).is_none() {
            return Err(Error::Input(format!(
                "patch count {n} is not a power of 4 (needs a square grid that halves to 1)"
            )));
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn patches(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    /// Frames `start..start + len` as a (len, N, d) tensor.
    pub fn frames_slice(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        ops::slice_rows(&self.data, start, len)
    }
}

/// Side of the square grid for `n` patches when `n` is a power of 4.
pub fn grid_side(n: usize) -> Option<usize> {
    if n == 0 || !n.is_power_of_two() || n.trailing_zeros() % 2 != 0 {
        return None;
    }
    Some(1 << (n.trailing_zeros() / 2))
}

/// Seeded linear patch projection. Never trained.
#[derive(Clone, Debug)]
pub struct PatchEmbedder<T> {
    proj: Tensor<T>,
    grid: usize,
}

impl<T: Real> PatchEmbedder<T> {
    pub fn new(dim: usize, grid: usize, seed: u64) -> Self {
        let fan_in = PATCH_PX * PATCH_PX * 3;
        let bound = (6.0 / (fan_in + dim) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            proj: Tensor::rand_uniform(&[fan_in, dim], -bound, bound, &mut rng),
            grid,
        }
    }

    pub fn with_projection(proj: Tensor<T>, grid: usize) -> Result<Self> {
        if proj.rank() != 2 || proj.shape()[0] != PATCH_PX * PATCH_PX * 3 {
            return Err(Error::shape(
                "patchify_embed",
                format!("projection {:?} must be (768, d)", proj.shape()),
            ));
        }
        Ok(Self { proj, grid })
    }

    pub fn projection(&self) -> &Tensor<T> {
        &self.proj
    }

    /// Splits an (H_px, W_px, 3) frame into 16-pixel patches in raster order
    /// and projects each flattened patch to `d`. No bias.
    pub fn embed(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let &[h, w, 3] = frame.shape() else {
            return Err(Error::Input(format!(
                "frame must be (H, W, 3), got {:?}",
                frame.shape()
            )));
        };
        if h % PATCH_PX != 0 || w % PATCH_PX != 0 {
            return Err(Error::Input(format!(
                "frame {h}x{w} is not divisible into {PATCH_PX}-pixel patches"
            )));
        }
        let (gh, gw) = (h / PATCH_PX, w / PATCH_PX);
        if gh != self.grid || gw != self.grid {
            return Err(Error::Input(format!(
                "frame {h}x{w} gives {} patches; the embedder expects a {}x{} grid ({} patches, {}x{} pixels)",
                gh * gw,
                self.grid,
                self.grid,
                self.grid * self.grid,
                self.grid * PATCH_PX,
                self.grid * PATCH_PX
            )));
        }
        let patch_len = PATCH_PX * PATCH_PX * 3;
        let mut patches = Vec::with_capacity(gh * gw * patch_len);
        let px = frame.data();
        for py in 0..gh {
            for pxi in 0..gw {
                for y in 0..PATCH_PX {
                    let row = (py * PATCH_PX + y) * w + pxi * PATCH_PX;
                    patches.extend_from_slice(&px[row * 3..(row + PATCH_PX) * 3]);
                }
            }
        }
        let patches = Tensor::new(&[gh * gw, patch_len], patches)?;
        ops::matmul(&patches, &self.proj)
    }
}

/// One signal placed at a (frame, patch) position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub frame: usize,
    pub patch: usize,
    pub signal: usize,
}

/// Recipe for a synthetic feature video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideoSpec {
    pub frames: usize,
    pub grid: usize,
    pub dim: usize,
    pub events: Vec<Event>,
    pub noise_scale: f64,
    /// Norm of each event's signal vector.
    pub signal_scale: f64,
    pub seed: u64,
}

impl SyntheticVideoSpec {
    pub fn new(frames: usize, dim: usize, seed: u64) -> Self {
        Self {
            frames,
            grid: GRID_SIDE,
            dim,
            events: Vec::new(),
            noise_scale: 1.0,
            signal_scale: 1.0,
            seed,
        }
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.dim == 0 {
            return Err(Error::Input("synthetic video needs T ≥ 1 and d ≥ 1".into()));
        }
        grid_side(self.patches())
            .ok_or_else(|| Error::Input(format!("grid {} does not halve to 1", self.grid)))?;
        for e in &self.events {
            if e.frame >= self.frames || e.patch >= self.patches() {
                return Err(Error::Input(format!(
                    "event {e:?} outside a {}-frame, {}-patch video",
                    self.frames,
                    self.patches()
                )));
            }
            if e.signal >= self.dim {
                return Err(Error::Input(format!(
                    "signal id {} needs d > {} for orthogonal directions",
                    e.signal, e.signal
                )));
            }
        }
        Ok(())
    }

    /// Generates frames `start..start + len` without materialising the rest of
    /// the video; concatenating consecutive ranges reproduces [`generate`](Self::generate) bit for bit.
    pub fn frames_range<T: Real>(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        self.validate()?;
        if start + len > self.frames {
            return Err(Error::Input(format!(
                "frames {start}..{} outside a {}-frame video",
                start + len,
                self.frames
            )));
        }
        let (n, d) = (self.patches(), self.dim);
        let mut data = vec![0.0f64; len * n * d];
        if self.noise_scale != 0.0 {
            for f in 0..len {
                let mut rng = frame_rng(self.seed, start + f);
                for v in &mut data[f * n * d..(f + 1) * n * d] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * self.noise_scale;
                }
            }
        }
        if !self.events.is_empty() {
            let basis = signal_basis(d);
            for e in self.events.iter().filter(|e| (start..start + len).contains(&e.frame)) {
                let row = ((e.frame - start) * n + e.patch) * d;
                for (v, b) in data[row..row + d].iter_mut().zip(&basis[e.signal * d..]) {
                    *v += self.signal_scale * b;
                }
            }
        }
        Tensor::new(&[len, n, d], data.into_iter().map(T::lit).collect())
    }

    pub fn generate<T: Real>(&self) -> Result<VideoFeature<T>> {
        VideoFeature::new(self.frames_range(0, self.frames)?)
    }
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64 + 1);
    rng
}

const SIGNAL_BASIS_SEED: u64 = 0x5EED_516A;

/// Fixed orthonormal basis of R^d (row-major, one direction per signal id),
/// from Gram-Schmidt on seeded Gaussian vectors.
pub fn signal_basis(d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(SIGNAL_BASIS_SEED ^ d as u64);
    let mut basis: Vec<f64> = Vec::with_capacity(d * d);
    while basis.len() < d * d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for prev in basis.chunks(d) {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        basis.extend(v.iter().map(|a| a / norm));
    }
    basis
}

/// Random video features for tests: i.i.d. uniform entries in [-1, 1].
pub fn random_video<T: Real>(frames: usize, patches: usize, dim: usize, rng: &mut impl Rng) -> Result<VideoFeature<T>> {
    VideoFeature::new(Tensor::rand_uniform(&[frames, patches, dim], -1.0, 1.0, rng))
}

pub const FEATURE_MAGIC: &[u8; 4] = b"VCFT";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 36;

/// Serialises features: magic, version u32, dtype u8, 3 reserved bytes,
/// T/N/d as u64, then row-major scalars; all little-endian.
pub fn encode_feature<T: Real>(video: &VideoFeature<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + video.tensor().numel() * T::DTYPE.size());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&[0; 3]);
    for extent in [video.frames(), video.patches(), video.dim()] {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    for &v in video.tensor().data() {
        v.write_le(&mut out);
    }
    out
}

/// Parses a feature file, converting the stored scalars to `T`.
pub fn decode_feature<T: Real>(bytes: &[u8]) -> Result<VideoFeature<T>> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected \"VCFT\"".into(),
        });
    }
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::Truncated {
            expected: FEATURE_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let dtype = DType::from_tag(bytes[8]).ok_or_else(|| Error::Format {
        offset: 8,
        detail: format!("unknown dtype tag {}", bytes[8]),
    })?;
    let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let (t, n, d) = (read_u64(12), read_u64(20), read_u64(28));
    let body = t
        .checked_mul(n)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(dtype.size() as u64))
        .ok_or_else(|| Error::Format {
            offset: 12,
            detail: format!("extents ({t}, {n}, {d}) overflow"),
        })?;
    let expected = FEATURE_HEADER_LEN as u64 + body;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format {
            offset: expected,
            detail: format!("{} trailing bytes", actual - expected),
        });
    }
    let data = decode_scalars::<T>(&bytes[FEATURE_HEADER_LEN..], dtype);
    let tensor = Tensor::new(&[t as usize, n as usize, d as usize], data)?;
    VideoFeature::new(tensor).map_err(|e| Error::Format {
        offset: 12,
        detail: e.to_string(),
    })
}

pub(crate) fn decode_scalars<T: Real>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 if T::DTYPE == DType::F32 => bytes.chunks_exact(4).map(T::read_le).collect(),
        DType::F64 if T::DTYPE == DType::F64 => bytes.chunks_exact(8).map(T::read_le).collect(),
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|b| T::from_f64(f64::from_le_bytes(b.try_into().unwrap())).unwrap_or(T::nan()))
            .collect(),
    }
}

pub fn write_feature<T: Real>(path: impl AsRef<Path>, video: &VideoFeature<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature(video)).map_err(|e| Error::io(path, e))
}

pub fn read_feature<T: Real>(path: impl AsRef<Path>) -> Result<VideoFeature<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize) -> Tensor<f64> {
        Tensor::zeros(&[h, w, 3])
    }

    #[test]
    fn grid_side_requires_power_of_four() {
        assert_eq!(grid_side(256), Some(16));
        assert_eq!(grid_side(1), Some(1));
        assert_eq!(grid_side(196), None);
        assert_eq!(grid_side(128), None);
    }

    #[test]
    fn zero_frame_embeds_to_zero() {
        let emb = PatchEmbedder::<f64>::new(8, GRID_SIDE, 1);
        let tokens = emb.embed(&frame(256, 256)).unwrap();
        assert_eq!(tokens.shape(), &[256, 8]);
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_touches_single_token() {
        let emb = PatchEmbedder::<f64>::new(8, GRID_SIDE, 2);
        let mut px = vec![0.0; 256 * 256 * 3];
        // pixel (y=40, x=70) lives in patch row 2, column 4 → index 36
        px[(40 * 256 + 70) * 3 + 1] = 1.0;
        let tokens = emb.embed(&Tensor::new(&[256, 256, 3], px).unwrap()).unwrap();
        let nonzero: Vec<usize> = (0..256)
            .filter(|&r| tokens.row(r).iter().any(|&v| v != 0.0))
            .collect();
        assert_eq!(nonzero, vec![2 * 16 + 4]);
    }

    #[test]
    fn resolution_224_is_rejected() {
        let emb = PatchEmbedder::<f32>::new(8, GRID_SIDE, 3);
        let err = emb.embed(&Tensor::zeros(&[224, 224, 3])).unwrap_err();
        assert!(err.to_string().contains("196 patches"), "{err}");
        assert!(emb.embed(&Tensor::zeros(&[250, 256, 3])).is_err());
    }

    #[test]
    fn synthetic_without_noise_or_events_is_zero() {
        let mut spec = SyntheticVideoSpec::new(4, 8, 0);
        spec.noise_scale = 0.0;
        let v = spec.generate::<f32>().unwrap();
        assert!(v.tensor().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_event_is_single_row() {
        let mut spec = SyntheticVideoSpec::new(8, 8, 0);
        spec.noise_scale = 0.0;
        spec.events.push(Event {
            frame: 5,
            patch: 0,
            signal: 1,
        });
        let v = spec.generate::<f64>().unwrap();
        let (n, d) = (256, 8);
        let mut nonzero = Vec::new();
        for f in 0..8 {
            for p in 0..n {
                let row = &v.tensor().data()[(f * n + p) * d..(f * n + p + 1) * d];
                if row.iter().any(|&x| x != 0.0) {
                    nonzero.push((f, p));
                }
            }
        }
        assert_eq!(nonzero, vec![(5, 0)]);
    }

    #[test]
    fn synthetic_is_deterministic_and_range_consistent() {
        let mut spec = SyntheticVideoSpec::new(12, 4, 99);
        spec.events.push(Event {
            frame: 9,
            patch: 3,
            signal: 2,
        });
        let a = spec.generate::<f32>().unwrap();
        let b = spec.generate::<f32>().unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
        let parts = [
            spec.frames_range::<f32>(0, 5).unwrap(),
            spec.frames_range::<f32>(5, 7).unwrap(),
        ];
        let joined = ops::concat_rows(&[&parts[0], &parts[1]]).unwrap();
        assert!(joined.bit_eq(a.tensor()));
    }

    #[test]
    fn signal_basis_is_orthonormal() {
        let d = 6;
        let b = signal_basis(d);
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_magic_fails_at_offset_zero() {
        let v = SyntheticVideoSpec::new(1, 2, 0).generate::<f32>().unwrap();
        let mut bytes = encode_feature(&v);
        bytes[0] = b'X';
        assert!(matches!(
            decode_feature::<f32>(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn short_body_reports_byte_counts() {
        let v = SyntheticVideoSpec::new(2, 3, 0).generate::<f64>().unwrap();
        let mut bytes = encode_feature(&v);
        let full = bytes.len() as u64;
        bytes.truncate(bytes.len() - 5);
        match decode_feature::<f64>(&bytes) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, full);
                assert_eq!(actual, full - 5);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn bad_version_and_dtype_are_located() {
        let v = SyntheticVideoSpec::new(1, 2, 0).generate::<f32>().unwrap();
        let mut bytes = encode_feature(&v);
        bytes[4] = 9;
        assert!(matches!(decode_feature::<f32>(&bytes), Err(Error::Format { offset: 4, .. })));
        let mut bytes = encode_feature(&v);
        bytes[8] = 7;
        assert!(matches!(decode_feature::<f32>(&bytes), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn f32_file_reads_losslessly_as_f64() {
        let v = SyntheticVideoSpec::new(2, 4, 5).generate::<f32>().unwrap();
        let wide = decode_feature::<f64>(&encode_feature(&v)).unwrap();
        assert!(wide.tensor().cast::<f32>().bit_eq(v.tensor()));
    }
}
