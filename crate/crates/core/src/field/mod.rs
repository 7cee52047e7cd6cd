//! Trainable radiance field: multi-resolution grid encoding of position, SH
//! encoding of direction and a small MLP with density, color and semantic
//! heads. Forward and backward passes are hand written and batched.

pub mod adam;
pub mod checkpoint;
pub mod encoding;
pub mod mlp;
pub mod sh;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{Adam, AdamConfig};
pub use encoding::EncodingConfig;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::volume::DensityQuery;
use encoding::{corners, gather, normalize_into_bounds, Corners, LevelGrid};
use mlp::Linear;
use sh::{sh_basis_into, sh_len};

pub const MAX_DENSITY: f64 = 1e4;
pub const SEMANTIC_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub hidden: usize,
    pub color_hidden: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            hidden: 64,
            color_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: [f64; 3],
    pub semantic: [f64; SEMANTIC_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layers {
    l0: Linear,
    l1: Linear,
    /// density raw value followed by the semantic logits
    head: Linear,
    c0: Linear,
    c1: Linear,
}

impl Layers {
    fn new(cfg: &FieldConfig) -> Self {
        let mut off = 0;
        let mut lin = |inputs, outputs| {
            let l = Linear {
                inputs,
                outputs,
                weight: off,
                bias: off + inputs * outputs,
            };
            off += l.param_len();
            l
        };
        let h = cfg.hidden;
        let l0 = lin(cfg.encoding.output_len(), h);
        let l1 = lin(h, h);
        let head = lin(h, 1 + SEMANTIC_DIM);
        let c0 = lin(h + sh_len(cfg.encoding.sh_degree), cfg.color_hidden);
        let c1 = lin(cfg.color_hidden, 3);
        Self { l0, l1, head, c0, c1 }
    }

    fn all(&self) -> [Linear; 5] {
        [self.l0, self.l1, self.head, self.c0, self.c1]
    }

    fn param_len(&self) -> usize {
        self.all().iter().map(Linear::param_len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub config: FieldConfig,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub grids: Vec<LevelGrid>,
    pub mlp: Vec<f64>,
    layers: Layers,
}

/// Activations saved by a batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct FieldCache {
    pub len: usize,
    corners: Vec<Corners>,
    enc: Vec<f64>,
    h0: Vec<f64>,
    /// `[h1, sh]` per row; h1 is the density-branch latent
    x2: Vec<f64>,
    h2: Vec<f64>,
    head: Vec<f64>,
    pub sigma: Vec<f64>,
    /// sigmoid outputs, 3 per row (empty when color was skipped)
    pub color: Vec<f64>,
}

impl FieldCache {
    pub fn output(&self, i: usize) -> FieldOutput {
        let hw = 1 + SEMANTIC_DIM;
        let s = &self.head[i * hw + 1..i * hw + hw];
        let c = &self.color[i * 3..i * 3 + 3];
        FieldOutput {
            sigma: self.sigma[i],
            color: [c[0], c[1], c[2]],
            semantic: [s[0], s[1], s[2], s[3]],
        }
    }

    pub fn semantic(&self, i: usize) -> [f64; SEMANTIC_DIM] {
        let hw = 1 + SEMANTIC_DIM;
        let s = &self.head[i * hw + 1..i * hw + hw];
        [s[0], s[1], s[2], s[3]]
    }
}

/// Gradient accumulators; grid entries are tracked sparsely.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub mlp: Vec<f64>,
    pub grids: Vec<Vec<f64>>,
    pub touched: Vec<Vec<u32>>,
    marked: Vec<Vec<bool>>,
    features: usize,
}

impl FieldGrads {
    #[inline]
    pub fn add_grid(&mut self, level: usize, vertex: u32, feature: usize, g: f64) {
        let v = vertex as usize;
        if !self.marked[level][v] {
            self.marked[level][v] = true;
            self.touched[level].push(vertex);
        }
        self.grids[level][v * self.features + feature] += g;
    }

    pub fn clear(&mut self) {
        self.mlp.fill(0.0);
        for l in 0..self.grids.len() {
            for &v in &self.touched[l] {
                let b = v as usize * self.features;
                self.grids[l][b..b + self.features].fill(0.0);
                self.marked[l][v as usize] = false;
            }
            self.touched[l].clear();
        }
    }

    pub fn is_zero(&self) -> bool {
        self.mlp.iter().all(|&g| g == 0.0) && self.grids.iter().all(|g| g.iter().all(|&x| x == 0.0))
    }
}

impl RadianceField {
    /// Xavier-uniform MLP weights, zero biases, grid features in ±1e-4.
    pub fn new(config: FieldConfig, bounds_min: Vec3, bounds_max: Vec3, seed: u64) -> Result<Self> {
        config.encoding.validate()?;
        if config.hidden == 0 || config.color_hidden == 0 {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        if (0..3).any(|a| !(bounds_max[a] > bounds_min[a])) {
            return Err(Error::InvalidConfig("field bounds are empty".into()));
        }
        let layers = Layers::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = vec![0.0; layers.param_len()];
        for l in layers.all() {
            let a = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for w in &mut mlp[l.weight..l.weight + l.inputs * l.outputs] {
                *w = rng.gen_range(-a..a);
            }
        }
        let f = config.encoding.features_per_level;
        let grids = (0..config.encoding.levels)
            .map(|l| {
                let r = config.encoding.resolution(l);
                let n = (r + 1).pow(3) * f;
                LevelGrid {
                    resolution: r,
                    data: (0..n).map(|_| rng.gen_range(-1e-4..1e-4)).collect(),
                }
            })
            .collect();
        Ok(Self {
            config,
            bounds_min,
            bounds_max,
            grids,
            mlp,
            layers,
        })
    }

    pub(crate) fn from_parts(
        config: FieldConfig,
        bounds_min: Vec3,
        bounds_max: Vec3,
        grids: Vec<LevelGrid>,
        mlp: Vec<f64>,
    ) -> Result<Self> {
        let mut field = Self::new(config, bounds_min, bounds_max, 0)?;
        if mlp.len() != field.mlp.len() {
            return Err(Error::ShapeMismatch(format!("mlp has {} params, expected {}", mlp.len(), field.mlp.len())));
        }
        for (a, b) in grids.iter().zip(&field.grids) {
            if a.resolution != b.resolution || a.data.len() != b.data.len() {
                return Err(Error::ShapeMismatch("grid level shape differs".into()));
            }
        }
        if grids.len() != field.grids.len() {
            return Err(Error::ShapeMismatch("grid level count differs".into()));
        }
        field.grids = grids;
        field.mlp = mlp;
        Ok(field)
    }

    pub fn zero_grads(&self) -> FieldGrads {
        FieldGrads {
            mlp: vec![0.0; self.mlp.len()],
            grids: self.grids.iter().map(|g| vec![0.0; g.data.len()]).collect(),
            touched: vec![Vec::new(); self.grids.len()],
            marked: self.grids.iter().map(|g| vec![false; g.vertices()]).collect(),
            features: self.config.encoding.features_per_level,
        }
    }

    /// Parameters addressed as MLP entries followed by each grid level.
    pub fn param_count(&self) -> usize {
        self.mlp.len() + self.grids.iter().map(|g| g.data.len()).sum::<usize>()
    }

    fn locate(&self, mut i: usize) -> (Option<usize>, usize) {
        if i < self.mlp.len() {
            return (None, i);
        }
        i -= self.mlp.len();
        for (l, g) in self.grids.iter().enumerate() {
            if i < g.data.len() {
                return (Some(l), i);
            }
            i -= g.data.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param(&self, i: usize) -> f64 {
        match self.locate(i) {
            (None, j) => self.mlp[j],
            (Some(l), j) => self.grids[l].data[j],
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        match self.locate(i) {
            (None, j) => self.mlp[j] = v,
            (Some(l), j) => self.grids[l].data[j] = v,
        }
    }

    pub fn grad(&self, grads: &FieldGrads, i: usize) -> f64 {
        match self.locate(i) {
            (None, j) => grads.mlp[j],
            (Some(l), j) => grads.grids[l][j],
        }
    }

    /// Flat indices of grid parameters that currently hold a gradient entry.
    pub fn touched_params(&self, grads: &FieldGrads) -> Vec<usize> {
        let f = self.config.encoding.features_per_level;
        let mut out = Vec::new();
        let mut base = self.mlp.len();
        for (l, g) in self.grids.iter().enumerate() {
            for &v in &grads.touched[l] {
                out.extend((0..f).map(|k| base + v as usize * f + k));
            }
            base += g.data.len();
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.mlp.iter().all(|v| v.is_finite()) && self.grids.iter().all(|g| g.data.iter().all(|v| v.is_finite()))
    }

    /// γ(x): concatenated per-level features.
    pub fn encode_position(&self, x: &Vec3) -> Vec<f64> {
        let f = self.config.encoding.features_per_level;
        let p = normalize_into_bounds(x, &self.bounds_min, &self.bounds_max);
        let mut out = vec![0.0; self.config.encoding.output_len()];
        for (l, g) in self.grids.iter().enumerate() {
            gather(g, f, &corners(g.resolution, &p), &mut out[l * f..]);
        }
        out
    }

    pub fn query(&self, x: &Vec3, d: &Vec3) -> Result<FieldOutput> {
        let n = d.norm();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::NonUnitDirection(n));
        }
        Ok(self.forward(std::slice::from_ref(x), std::slice::from_ref(d)).output(0))
    }

    /// Batched forward pass; pass an empty `dirs` to evaluate density and
    /// semantics only.
    pub fn forward(&self, xs: &[Vec3], dirs: &[Vec3]) -> FieldCache {
        let n = xs.len();
        let with_color = !dirs.is_empty();
        assert!(!with_color || dirs.len() == n, "one direction per point");
        let enc_cfg = &self.config.encoding;
        let (f, levels) = (enc_cfg.features_per_level, enc_cfg.levels);
        let e = enc_cfg.output_len();
        let h = self.config.hidden;
        let s = sh_len(enc_cfg.sh_degree);
        let w2 = h + s;
        let hw = 1 + SEMANTIC_DIM;
        let Layers { l0, l1, head, c0, c1 } = self.layers;
        let p = &self.mlp;

        let mut cache = FieldCache {
            len: n,
            corners: vec![Corners::default(); n * levels],
            enc: vec![0.0; n * e],
            h0: vec![0.0; n * h],
            x2: vec![0.0; n * w2],
            h2: Vec::new(),
            head: vec![0.0; n * hw],
            sigma: vec![0.0; n],
            color: Vec::new(),
        };
        for (i, x) in xs.iter().enumerate() {
            let q = normalize_into_bounds(x, &self.bounds_min, &self.bounds_max);
            for (l, g) in self.grids.iter().enumerate() {
                let c = corners(g.resolution, &q);
                gather(g, f, &c, &mut cache.enc[i * e + l * f..]);
                cache.corners[i * levels + l] = c;
            }
        }
        l0.forward(p, &cache.enc, e, n, &mut cache.h0, h);
        relu(&mut cache.h0);
        l1.forward(p, &cache.h0, h, n, &mut cache.x2, w2);
        for r in 0..n {
            relu(&mut cache.x2[r * w2..r * w2 + h]);
        }
        head.forward(p, &cache.x2, w2, n, &mut cache.head, hw);
        for r in 0..n {
            cache.sigma[r] = density_activation(cache.head[r * hw]);
        }
        if with_color {
            for (r, d) in dirs.iter().enumerate() {
                sh_basis_into(enc_cfg.sh_degree, d, &mut cache.x2[r * w2 + h..r * w2 + w2]);
            }
            let ch = self.config.color_hidden;
            cache.h2 = vec![0.0; n * ch];
            c0.forward(p, &cache.x2, w2, n, &mut cache.h2, ch);
            relu(&mut cache.h2);
            cache.color = vec![0.0; n * 3];
            c1.forward(p, &cache.h2, ch, n, &mut cache.color, 3);
            for v in &mut cache.color {
                *v = sigmoid(*v);
            }
        }
        cache
    }

    /// Accumulates parameter gradients for output gradients `dsigma` (n),
    /// `dcolor` (3n) and `dsemantic` (4n).
    pub fn backward(
        &self,
        cache: &FieldCache,
        dsigma: &[f64],
        dcolor: &[f64],
        dsemantic: &[f64],
        grads: &mut FieldGrads,
    ) -> Result<()> {
        let n = cache.len;
        if dsigma.len() != n || dcolor.len() != 3 * n || dsemantic.len() != SEMANTIC_DIM * n {
            return Err(Error::ShapeMismatch(format!(
                "output gradients ({}, {}, {}) for {n} samples",
                dsigma.len(),
                dcolor.len(),
                dsemantic.len()
            )));
        }
        if cache.color.len() != 3 * n {
            return Err(Error::ShapeMismatch("forward pass skipped the color branch".into()));
        }
        if grads.mlp.len() != self.mlp.len() || grads.grids.len() != self.grids.len() {
            return Err(Error::ShapeMismatch("gradient buffers do not match the field".into()));
        }
        let enc_cfg = &self.config.encoding;
        let (f, levels) = (enc_cfg.features_per_level, enc_cfg.levels);
        let e = enc_cfg.output_len();
        let h = self.config.hidden;
        let ch = self.config.color_hidden;
        let w2 = h + sh_len(enc_cfg.sh_degree);
        let hw = 1 + SEMANTIC_DIM;
        let Layers { l0, l1, head, c0, c1 } = self.layers;
        let p = &self.mlp;
        let g = &mut grads.mlp;

        // color branch
        let mut dz = vec![0.0; n * 3];
        for i in 0..3 * n {
            let c = cache.color[i];
            dz[i] = dcolor[i] * c * (1.0 - c);
        }
        let mut dh2 = vec![0.0; n * ch];
        c1.backward(p, g, &cache.h2, ch, &dz, 3, n, Some((&mut dh2, ch)));
        relu_backward(&mut dh2, &cache.h2);
        let mut dx2 = vec![0.0; n * w2];
        c0.backward(p, g, &cache.x2, w2, &dh2, ch, n, Some((&mut dx2, w2)));

        // density and semantic heads
        let mut dhead = vec![0.0; n * hw];
        for r in 0..n {
            let raw = cache.head[r * hw];
            dhead[r * hw] = if raw < MAX_DENSITY.ln() { dsigma[r] * cache.sigma[r] } else { 0.0 };
            dhead[r * hw + 1..r * hw + hw].copy_from_slice(&dsemantic[r * SEMANTIC_DIM..(r + 1) * SEMANTIC_DIM]);
        }
        let mut dh1 = vec![0.0; n * h];
        head.backward(p, g, &cache.x2, w2, &dhead, hw, n, Some((&mut dh1, h)));
        for r in 0..n {
            for k in 0..h {
                let a = cache.x2[r * w2 + k];
                dh1[r * h + k] = if a > 0.0 { dh1[r * h + k] + dx2[r * w2 + k] } else { 0.0 };
            }
        }
        let mut dh0 = vec![0.0; n * h];
        l1.backward(p, g, &cache.h0, h, &dh1, h, n, Some((&mut dh0, h)));
        relu_backward(&mut dh0, &cache.h0);
        let mut denc = vec![0.0; n * e];
        l0.backward(p, g, &cache.enc, e, &dh0, h, n, Some((&mut denc, e)));

        for r in 0..n {
            for l in 0..levels {
                let c = &cache.corners[r * levels + l];
                for k in 0..8 {
                    let w = c.weight[k];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..f {
                        let gj = denc[r * e + l * f + j];
                        if gj != 0.0 {
                            grads.add_grid(l, c.index[k], j, w * gj);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl DensityQuery for RadianceField {
    fn densities(&self, points: &[Vec3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(8192) {
            out.extend(self.forward(chunk, &[]).sigma);
        }
        out
    }
}

#[inline]
pub fn density_activation(raw: f64) -> f64 {
    raw.min(MAX_DENSITY.ln()).exp().clamp(0.0, MAX_DENSITY)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn relu(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

fn relu_backward(d: &mut [f64], activated: &[f64]) {
    for (g, a) in d.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}
