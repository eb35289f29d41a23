//! Coordinate network: a multi-resolution hash-grid encoding followed by a
//! small ReLU MLP with a softplus output, mapping normalised `(x, z)` to a
//! non-negative echogenicity.

use std::rc::Rc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::tensorgraph::{CornerLookup, Shape, Tape, Tensor, Var};

/// Spatial hash multipliers for the `x` and `z` vertex coordinates.
pub const HASH_PRIMES: [u64; 2] = [1, 2_654_435_761];

pub const DESK_TABLE_SIZE: usize = 1 << 18;
pub const FULL_TABLE_SIZE: usize = 1 << 22;
const TABLE_INIT_RANGE: f64 = 1e-4;
/// Coordinates per tape evaluation when sampling a frozen model.
const SAMPLE_CHUNK: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features: usize,
    pub table_size: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
}

impl HashGridConfig {
    /// 15 levels, one feature, 2^18 entries, resolutions 16 to `max_resolution`.
    pub fn desk(max_resolution: usize) -> Self {
        HashGridConfig {
            levels: 15,
            features: 1,
            table_size: DESK_TABLE_SIZE,
            base_resolution: 16,
            max_resolution: max_resolution.max(16),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.features < 1 {
            return Err(Error::invalid("hash grid needs at least one level and one feature"));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::invalid(format!("table size {} is not a power of two", self.table_size)));
        }
        if self.base_resolution < 2 || self.max_resolution < self.base_resolution {
            return Err(Error::invalid(format!(
                "resolutions must satisfy 2 <= N_min <= N_max, got {} and {}",
                self.base_resolution, self.max_resolution
            )));
        }
        if self.max_resolution > u32::MAX as usize / 2 {
            return Err(Error::invalid("max resolution too large"));
        }
        Ok(())
    }

    /// Per-level growth factor `b`.
    pub fn growth(&self) -> f64 {
        if self.levels == 1 {
            return 1.0;
        }
        ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (self.levels - 1) as f64
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        let r = self.base_resolution as f64 * (self.growth() * level as f64).exp();
        (r + 1e-9).floor() as usize
    }

    pub fn encoding_width(&self) -> usize {
        self.levels * self.features
    }
}

/// Table slot of a grid vertex: `(vx * p1 XOR vz * p2) mod T`.
#[inline]
pub fn hash_index(vx: u32, vz: u32, table_size: usize) -> usize {
    let h = (vx as u64).wrapping_mul(HASH_PRIMES[0]) ^ (vz as u64).wrapping_mul(HASH_PRIMES[1]);
    (h & (table_size as u64 - 1)) as usize
}

/// Cell corner slots and bilinear weights of one coordinate.
///
/// Corner order is `(x0, z0), (x1, z0), (x0, z1), (x1, z1)`.
#[inline]
pub fn corner_slots(c: [f64; 2], resolution: usize, table_size: usize) -> ([usize; 4], [f64; 4]) {
    let n = resolution as f64;
    let (px, pz) = (c[0] * n, c[1] * n);
    // coordinates are non-negative, so truncation is floor
    let cx = (px as usize).min(resolution - 1);
    let cz = (pz as usize).min(resolution - 1);
    let (fx, fz) = (px - cx as f64, pz - cz as f64);
    let (x0, z0) = (cx as u32, cz as u32);
    (
        [
            hash_index(x0, z0, table_size),
            hash_index(x0 + 1, z0, table_size),
            hash_index(x0, z0 + 1, table_size),
            hash_index(x0 + 1, z0 + 1, table_size),
        ],
        [(1.0 - fx) * (1.0 - fz), fx * (1.0 - fz), (1.0 - fx) * fz, fx * fz],
    )
}

/// Vertex slots (four per coordinate) and bilinear weights at one level.
pub fn level_lookup(coords: &[[f64; 2]], resolution: usize, table_size: usize) -> (Vec<usize>, Vec<[f64; 4]>) {
    let mut idx = Vec::with_capacity(4 * coords.len());
    let mut weights = Vec::with_capacity(coords.len());
    for &c in coords {
        let (i, w) = corner_slots(c, resolution, table_size);
        idx.extend_from_slice(&i);
        weights.push(w);
    }
    (idx, weights)
}

/// All levels of the hash grid over a fixed coordinate batch.
#[derive(Debug)]
struct GridLookup {
    coords: Vec<[f64; 2]>,
    resolutions: Vec<usize>,
    table_size: usize,
}

impl CornerLookup for GridLookup {
    fn groups(&self) -> usize {
        self.resolutions.len()
    }

    fn samples(&self) -> usize {
        self.coords.len()
    }

    fn corners(&self, group: usize, sample: usize) -> ([usize; 4], [f64; 4]) {
        corner_slots(self.coords[sample], self.resolutions[group], self.table_size)
    }
}

fn check_coords(coords: &[[f64; 2]]) -> Result<()> {
    match coords.iter().find(|c| !(0.0..=1.0).contains(&c[0]) || !(0.0..=1.0).contains(&c[1])) {
        Some(c) => Err(Error::Domain {
            op: "encode",
            detail: format!("coordinate ({}, {}) outside the unit square", c[0], c[1]),
        }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_width: 64,
            hidden_layers: 2,
        }
    }
}

/// Hash tables and MLP weights.
///
/// Parameters are stored in a fixed order: one `[T x F]` table per level,
/// then `(W, b)` for every layer with `W` as `[out x in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InrModel {
    pub grid: HashGridConfig,
    pub mlp: MlpConfig,
    params: Vec<Tensor>,
}

/// Model parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vars: Vec<Var>,
}

impl InrModel {
    /// Tables uniform in `[-1e-4, 1e-4]`, hidden layers He-normal, zero
    /// output layer so the initial field is `ln 2` everywhere.
    pub fn new(grid: HashGridConfig, mlp: MlpConfig, rng: &mut impl Rng) -> Result<InrModel> {
        grid.validate()?;
        if mlp.hidden_width < 1 {
            return Err(Error::invalid("hidden width must be at least 1"));
        }
        let mut params = Vec::new();
        for _ in 0..grid.levels {
            let n = grid.table_size * grid.features;
            let data = (0..n).map(|_| rng.random_range(-TABLE_INIT_RANGE..=TABLE_INIT_RANGE)).collect();
            params.push(Tensor::matrix(grid.table_size, grid.features, data)?);
        }
        let mut fan_in = grid.encoding_width();
        for _ in 0..mlp.hidden_layers {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let w = (0..mlp.hidden_width * fan_in).map(|_| normal.sample(rng)).collect();
            params.push(Tensor::matrix(mlp.hidden_width, fan_in, w)?);
            params.push(Tensor::vector(vec![0.0; mlp.hidden_width]));
            fan_in = mlp.hidden_width;
        }
        params.push(Tensor::matrix(1, fan_in, vec![0.0; fan_in])?);
        params.push(Tensor::vector(vec![0.0]));
        Ok(InrModel { grid, mlp, params })
    }

    /// Expected parameter shapes for a configuration.
    fn shapes(grid: &HashGridConfig, mlp: &MlpConfig) -> Vec<Shape> {
        let mut s = vec![Shape::Matrix(grid.table_size, grid.features); grid.levels];
        let mut fan_in = grid.encoding_width();
        for _ in 0..mlp.hidden_layers {
            s.push(Shape::Matrix(mlp.hidden_width, fan_in));
            s.push(Shape::Vector(mlp.hidden_width));
            fan_in = mlp.hidden_width;
        }
        s.push(Shape::Matrix(1, fan_in));
        s.push(Shape::Vector(1));
        s
    }

    pub fn from_params(grid: HashGridConfig, mlp: MlpConfig, params: Vec<Tensor>) -> Result<InrModel> {
        grid.validate()?;
        let shapes = Self::shapes(&grid, &mlp);
        if shapes.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter arrays, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (k, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if *s != p.shape() {
                return Err(Error::shape("InrModel::from_params", format!("param {k} {s}"), p.shape()));
            }
        }
        Ok(InrModel { grid, mlp, params })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn tables(&self) -> &[Tensor] {
        &self.params[..self.grid.levels]
    }

    pub fn tables_mut(&mut self) -> &mut [Tensor] {
        &mut self.params[..self.grid.levels]
    }

    /// Output layer `(W, b)`.
    pub fn output_layer_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        let n = self.params.len();
        let (head, tail) = self.params.split_at_mut(n - 1);
        (&mut head[n - 2], &mut tail[0])
    }

    /// Places every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        BoundModel { vars }
    }

    /// Hash-grid features, `[n x L*F]`, for coordinates in `[0, 1]^2`.
    pub fn encode_tape(&self, tape: &mut Tape, bound: &BoundModel, coords: &[[f64; 2]]) -> Result<Var> {
        check_coords(coords)?;
        let lookup = GridLookup {
            coords: coords.to_vec(),
            resolutions: (0..self.grid.levels).map(|l| self.grid.level_resolution(l)).collect(),
            table_size: self.grid.table_size,
        };
        tape.gather_blend(&bound.vars[..self.grid.levels], Rc::new(lookup))
    }

    /// The same encoding assembled from `gather_rows`, `blend4` and
    /// `concat_cols`; kept as a reference for the fused path.
    pub fn encode_tape_unfused(&self, tape: &mut Tape, bound: &BoundModel, coords: &[[f64; 2]]) -> Result<Var> {
        check_coords(coords)?;
        let mut parts = Vec::with_capacity(self.grid.levels);
        for level in 0..self.grid.levels {
            let res = self.grid.level_resolution(level);
            let (idx, weights) = level_lookup(coords, res, self.grid.table_size);
            let corners = tape.gather_rows(bound.vars[level], idx)?;
            parts.push(tape.blend4(corners, weights)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_cols(&parts)
        }
    }

    /// Field values `[n x 1]`.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &BoundModel, coords: &[[f64; 2]]) -> Result<Var> {
        let h = self.encode_tape(tape, bound, coords)?;
        let layers: Vec<(Var, Var)> = bound.vars[self.grid.levels..].chunks(2).map(|p| (p[0], p[1])).collect();
        let o = tape.mlp(h, &layers)?;
        Ok(tape.softplus(o))
    }

    /// [`InrModel::forward_tape`] built from single-layer primitives.
    pub fn forward_tape_unfused(&self, tape: &mut Tape, bound: &BoundModel, coords: &[[f64; 2]]) -> Result<Var> {
        let mut h = self.encode_tape_unfused(tape, bound, coords)?;
        let layers = &bound.vars[self.grid.levels..];
        let (hidden, out) = layers.split_at(layers.len() - 2);
        for pair in hidden.chunks(2) {
            let a = tape.affine(h, pair[0], pair[1])?;
            h = tape.relu(a);
        }
        let o = tape.affine(h, out[0], out[1])?;
        Ok(tape.softplus(o))
    }

    /// Encoding of a single coordinate.
    pub fn encode(&self, coord: [f64; 2]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let v = self.encode_tape(&mut tape, &bound, &[coord])?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Echogenicity at each coordinate.
    pub fn field_eval_batch(&self, coords: &[[f64; 2]]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut out = Vec::with_capacity(coords.len());
        for chunk in coords.chunks(SAMPLE_CHUNK) {
            let mark = tape.len();
            let v = self.forward_tape(&mut tape, &bound, chunk)?;
            out.extend_from_slice(tape.value(v).data());
            tape.truncate(mark);
        }
        Ok(out)
    }

    pub fn field_eval(&self, coord: [f64; 2]) -> Result<f64> {
        Ok(self.field_eval_batch(&[coord])?[0])
    }
}

/// Output grid of a field evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSpec {
    pub rows: usize,
    pub cols: usize,
    pub dx: f64,
    pub dz: f64,
    pub origin_x: f64,
    pub origin_z: f64,
    pub oversample: usize,
    pub jitter: bool,
}

impl SamplingSpec {
    /// Pixel grid of `img` with the given oversampling.
    pub fn for_image(img: &Image2D, oversample: usize, jitter: bool) -> SamplingSpec {
        SamplingSpec {
            rows: img.rows(),
            cols: img.cols(),
            dx: img.dx,
            dz: img.dz,
            origin_x: img.origin_x,
            origin_z: img.origin_z,
            oversample,
            jitter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.oversample == 0 {
            return Err(Error::invalid("sampling grid must be non-empty with oversample >= 1"));
        }
        if !(self.dx > 0.0 && self.dz > 0.0) {
            return Err(Error::invalid("sampling spacing must be positive"));
        }
        Ok(())
    }

    pub fn fine_rows(&self) -> usize {
        self.rows * self.oversample
    }

    pub fn fine_cols(&self) -> usize {
        self.cols * self.oversample
    }

    pub fn fine_dx(&self) -> f64 {
        self.dx / self.oversample as f64
    }

    pub fn fine_dz(&self) -> f64 {
        self.dz / self.oversample as f64
    }

    /// Physical length mapped onto the unit interval (the larger extent, so
    /// both axes share one scale).
    pub fn extent(&self) -> f64 {
        (self.cols as f64 * self.dx).max(self.rows as f64 * self.dz)
    }

    /// Normalised fine-grid sample positions in raster order. With jitter,
    /// each sample moves uniformly within its subcell, drawing `x` then `z`.
    pub fn coords(&self, rng: &mut dyn RngCore) -> Vec<[f64; 2]> {
        let (fr, fc) = (self.fine_rows(), self.fine_cols());
        let (sx, sz) = (self.fine_dx() / self.extent(), self.fine_dz() / self.extent());
        let mut out = Vec::with_capacity(fr * fc);
        for i in 0..fr {
            for j in 0..fc {
                let (mut ox, mut oz) = (0.5, 0.5);
                if self.jitter {
                    ox = rng.random::<f64>();
                    oz = rng.random::<f64>();
                }
                out.push([
                    ((j as f64 + ox) * sx).clamp(0.0, 1.0),
                    ((i as f64 + oz) * sz).clamp(0.0, 1.0),
                ]);
            }
        }
        out
    }

    /// Blank image with the fine-grid geometry.
    pub fn fine_image(&self, data: Vec<f64>) -> Result<Image2D> {
        Ok(Image2D::from_vec(self.fine_rows(), self.fine_cols(), self.fine_dx(), self.fine_dz(), data)?
            .with_origin(self.origin_x, self.origin_z))
    }
}

/// Evaluates the field on the oversampled grid at spacing `(dx/o, dz/o)`.
pub fn sample_grid(model: &InrModel, spec: &SamplingSpec, rng: &mut dyn RngCore) -> Result<Image2D> {
    spec.validate()?;
    let coords = spec.coords(rng);
    spec.fine_image(model.field_eval_batch(&coords)?)
}

pub mod checkpoint {
    //! Binary model container, little-endian throughout:
    //!
    //! ```text
    //! magic     8 bytes  "USDINR\0\0"
    //! version   u32      1
    //! levels, features              u32 x 2
    //! table_size                    u64
    //! base_res, max_res             u32 x 2
    //! hidden_width, hidden_layers   u32 x 2
    //! n_arrays                      u32
    //! per array: rows u64, cols u64 (0 for vectors), then rows*max(cols,1) f64
    //! ```

    use super::{HashGridConfig, InrModel, MlpConfig};
    use crate::error::{Error, Result};
    use crate::tensorgraph::{Shape, Tensor};

    pub const MAGIC: &[u8; 8] = b"USDINR\0\0";
    pub const VERSION: u32 = 1;

    pub fn encode(model: &InrModel) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + model.parameter_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let g = &model.grid;
        for v in [g.levels, g.features] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(g.table_size as u64).to_le_bytes());
        for v in [g.base_resolution, g.max_resolution, model.mlp.hidden_width, model.mlp.hidden_layers] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
        for p in model.params() {
            let (r, c) = match p.shape() {
                Shape::Vector(n) => (n, 0),
                Shape::Matrix(r, c) => (r, c),
            };
            out.extend_from_slice(&(r as u64).to_le_bytes());
            out.extend_from_slice(&(c as u64).to_le_bytes());
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.bytes.len() - self.pos < n {
                return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u32(&mut self) -> Result<usize> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
        }

        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<InrModel> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let levels = r.u32()?;
        let features = r.u32()?;
        let table_size = usize::try_from(r.u64()?).map_err(|_| Error::Format("table size overflow".into()))?;
        let grid = HashGridConfig {
            levels,
            features,
            table_size,
            base_resolution: r.u32()?,
            max_resolution: r.u32()?,
        };
        let mlp = MlpConfig {
            hidden_width: r.u32()?,
            hidden_layers: r.u32()?,
        };
        grid.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let n = r.u32()?;
        let mut params = Vec::new();
        for _ in 0..n {
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows
                .checked_mul(cols.max(1))
                .and_then(|l| l.checked_mul(8).map(|b| (l, b)))
                .ok_or_else(|| Error::Format("array size overflow".into()))?;
            let raw = r.take(len.1)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let shape = if cols == 0 { Shape::Vector(rows) } else { Shape::Matrix(rows, cols) };
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        InrModel::from_params(grid, mlp, params).map_err(|e| Error::Format(format!("checkpoint: {e}")))
    }

    pub fn save(path: impl AsRef<std::path::Path>, model: &InrModel) -> Result<()> {
        std::fs::write(path, encode(model))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<InrModel> {
        decode(&std::fs::read(path)?)
    }
}
