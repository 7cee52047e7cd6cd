//! Losses, the optimization loop, pruning and the incremental
//! fuse-then-train driver.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::edit::EditState;
use crate::error::{Error, Result};
use crate::field::adam::{Adam, AdamConfig};
use crate::field::{FieldConfig, FieldGrads, RadianceField, SEMANTIC_DIM};
use crate::geometry::{Frame, Intrinsics, Pose, Ray};
use crate::metrics::{psnr, psnr_from_mse};
use crate::pipeline::Mapper;
use crate::registry::Registry;
use crate::render::{
    composite, composite_backward, march_ray, render_image, semantic_rows, RayGrad, RenderConfig, RenderResult,
    Sample, SampleBatch, SampleKind,
};
use crate::volume::SemanticVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Batch,
    Incremental,
}

/// How training rays are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// Marching through the semantic volume.
    Hybrid,
    /// Ablation: only points on and behind the observed depth, over the wide band.
    DepthGuided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lambda_depth: f64,
    pub lambda_semantic: f64,
    pub lambda_reg: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub rays_per_batch: usize,
    pub iters_per_epoch: usize,
    pub epochs: usize,
    pub prune_every: usize,
    pub prune_threshold: f64,
    pub mode: TrainMode,
    /// Simulated frame arrivals per second.
    pub incremental_rate: f64,
    /// Simulated cost of one training step in seconds.
    pub sim_step_seconds: f64,
    pub eval_every: usize,
    pub sampler: Sampler,
    /// Use the two-sided binary entropy for the opacity regularizer.
    pub full_entropy: bool,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_depth: 1.0,
            lambda_semantic: 0.04,
            lambda_reg: 0.001,
            lr_start: 1e-2,
            lr_end: 3e-4,
            rays_per_batch: 8192,
            iters_per_epoch: 1000,
            epochs: 5,
            prune_every: 500,
            prune_threshold: 0.01,
            mode: TrainMode::Batch,
            incremental_rate: 10.0,
            sim_step_seconds: 0.01,
            eval_every: 100,
            sampler: Sampler::Hybrid,
            full_entropy: false,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_iters(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_depth", self.lambda_depth),
            ("lambda_semantic", self.lambda_semantic),
            ("lambda_reg", self.lambda_reg),
            ("lr_start", self.lr_start),
            ("lr_end", self.lr_end),
            ("incremental_rate", self.incremental_rate),
            ("sim_step_seconds", self.sim_step_seconds),
        ];
        for (name, v) in positive {
            if !(v >= 0.0) || (v == 0.0 && !name.starts_with("lambda")) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.rays_per_batch == 0 || self.iters_per_epoch == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch size, iterations and epochs must be positive".into()));
        }
        Ok(())
    }

    /// Cosine annealing from `lr_start` at step 0 to `lr_end` at the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_iters().max(1) as f64;
        let s = (step as f64).min(total);
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * s / total).cos())
    }
}

/// Ground truth for one training ray.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayTarget {
    pub color: [f64; 3],
    /// Depth along the ray (ray-parameter units), if valid.
    pub depth: Option<f64>,
    pub semantic: Option<[f64; SEMANTIC_DIM]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub color: f64,
    pub depth: f64,
    pub semantic: f64,
    pub reg: f64,
    pub total: f64,
}

const OPACITY_FLOOR: f64 = 1e-7;

/// Mean-reduced losses and the per-ray gradients of the weighted total.
pub fn compute_losses(
    results: &[RenderResult],
    targets: &[RayTarget],
    cfg: &TrainConfig,
) -> Result<(LossReport, Vec<RayGrad>)> {
    if results.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if results.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!("{} results, {} targets", results.len(), targets.len())));
    }
    let n = results.len() as f64;
    let nd = targets.iter().filter(|t| t.depth.is_some()).count();
    let ns = targets.iter().filter(|t| t.semantic.is_some()).count();
    let mut rep = LossReport::default();
    let mut grads = vec![RayGrad::default(); results.len()];
    for (i, (r, t)) in results.iter().zip(targets).enumerate() {
        let g = &mut grads[i];
        for k in 0..3 {
            let e = r.color[k] - t.color[k];
            rep.color += e * e / n;
            g.color[k] = 2.0 * e / n;
        }
        if let Some(d) = t.depth {
            let e = r.depth - d;
            rep.depth += e * e / nd as f64;
            g.depth = cfg.lambda_depth * 2.0 * e / nd as f64;
        }
        if let Some(s) = t.semantic {
            for k in 0..SEMANTIC_DIM {
                let e = r.semantic[k] - s[k];
                rep.semantic += e * e / ns as f64;
                g.semantic[k] = cfg.lambda_semantic * 2.0 * e / ns as f64;
            }
        }
        let o = r.opacity.clamp(OPACITY_FLOOR, 1.0);
        let free = r.opacity > OPACITY_FLOOR && r.opacity < 1.0;
        if cfg.full_entropy {
            let q = (1.0 - o).max(OPACITY_FLOOR);
            rep.reg += (-o * o.ln() - q * q.ln()) / n;
            if free && 1.0 - r.opacity > OPACITY_FLOOR {
                g.opacity = cfg.lambda_reg * (q.ln() - o.ln()) / n;
            }
        } else {
            rep.reg += -o * o.ln() / n;
            if free {
                g.opacity = cfg.lambda_reg * -(o.ln() + 1.0) / n;
            }
        }
        let finite = r.color.iter().chain(&r.semantic).all(|v| v.is_finite()) && r.depth.is_finite() && r.opacity.is_finite();
        if !finite {
            return Err(Error::NonFiniteLoss {
                ray: i,
                detail: format!("rendered color {:?}, depth {}, opacity {}", r.color, r.depth, r.opacity),
            });
        }
    }
    rep.total = rep.color + cfg.lambda_depth * rep.depth + cfg.lambda_semantic * rep.semantic + cfg.lambda_reg * rep.reg;
    if !rep.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            ray: 0,
            detail: format!("{rep:?}"),
        });
    }
    Ok((rep, grads))
}

/// Everything a training step reads besides the field.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub volume: &'a SemanticVolume,
    pub registry: &'a Registry,
    pub edit: &'a EditState,
    /// Training frames with global plane ids in their semantic images.
    pub frames: &'a [Frame],
    /// Normalizes plane offsets in the semantic target.
    pub scene_radius: f64,
}

/// Held-out views for PSNR tracking.
#[derive(Debug, Clone, Default)]
pub struct Holdout {
    pub poses: Vec<Pose>,
    pub intrinsics: Option<Intrinsics>,
    pub colors: Vec<Vec<[f64; 3]>>,
}

impl Holdout {
    pub fn from_frames(frames: &[Frame]) -> Self {
        Self {
            poses: frames.iter().map(|f| f.pose).collect(),
            intrinsics: frames.first().map(|f| f.intrinsics),
            colors: frames.iter().map(|f| f.color.clone()).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub wall_time_s: f64,
    pub loss: LossReport,
    pub lr: f64,
    pub psnr_train: f64,
    pub psnr_holdout: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut s = String::from("step,wall_time_s,L_c,L_d,L_s,L_reg,lr,psnr_train,psnr_holdout\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.3},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.4},{:.4}\n",
            r.step, r.wall_time_s, r.loss.color, r.loss.depth, r.loss.semantic, r.loss.reg, r.lr, r.psnr_train, r.psnr_holdout
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Ray sampling on and behind the observed depth `t_depth`.
pub fn depth_guided_samples(ray: &Ray, t_depth: f64, step: f64, band: f64) -> Vec<Sample> {
    let n = (band / step).ceil() as usize;
    (0..n)
        .map(|k| {
            let t = t_depth + k as f64 * step;
            Sample {
                position: ray.at(t),
                t,
                delta: step,
                kind: SampleKind::Dense,
            }
        })
        .collect()
}

/// Renders a frame with depth-guided sampling from its own depth image;
/// pixels without depth render black.
pub fn render_depth_guided(field: &RadianceField, frame: &Frame, step: f64, band: f64) -> Vec<RenderResult> {
    let mut rays = Vec::with_capacity(frame.depth.len());
    let mut samples = Vec::with_capacity(frame.depth.len());
    for p in 0..frame.depth.len() {
        let (ray, z_per_t) = frame.pixel_ray(p % frame.width(), p / frame.width());
        let d = frame.depth[p];
        samples.push(if d > 0.0 { depth_guided_samples(&ray, d / z_per_t, step, band) } else { Vec::new() });
        rays.push(ray);
    }
    let mut batch = SampleBatch {
        offsets: vec![0],
        ..Default::default()
    };
    for (ray, list) in rays.iter().zip(&samples) {
        for s in list {
            batch.t.push(s.t);
            batch.delta.push(s.delta);
            batch.query_points.push(s.position);
            batch.query_dirs.push(ray.dir());
        }
        batch.offsets.push(batch.t.len());
    }
    let cache = field.forward(&batch.query_points, &batch.query_dirs);
    let sem = semantic_rows(&cache);
    (0..batch.rays())
        .map(|r| {
            let s = batch.range(r);
            composite(
                &batch.t[s.clone()],
                &batch.delta[s.clone()],
                &cache.sigma[s.clone()],
                &cache.color[3 * s.start..3 * s.end],
                &sem[SEMANTIC_DIM * s.start..SEMANTIC_DIM * s.end],
            )
        })
        .collect()
}

/// Mean held-out PSNR of `field` rendered through `vol`.
pub fn holdout_psnr(
    field: &RadianceField,
    vol: &SemanticVolume,
    registry: &Registry,
    edit: &EditState,
    render: &RenderConfig,
    holdout: &Holdout,
) -> Result<f64> {
    let intr = holdout
        .intrinsics
        .ok_or_else(|| Error::InvalidConfig("holdout set is empty".into()))?;
    let mut total = 0.0;
    for (pose, gt) in holdout.poses.iter().zip(&holdout.colors) {
        let img = render_image(pose, &intr, vol, registry, field, edit, render);
        total += psnr(&img.color, gt)?;
    }
    Ok(total / holdout.poses.len() as f64)
}

/// Forward pass, losses and backward pass for one sample batch. Parameter
/// gradients are accumulated into `grads`.
pub fn loss_and_grads(
    field: &RadianceField,
    batch: &SampleBatch,
    targets: &[RayTarget],
    cfg: &TrainConfig,
    grads: &mut FieldGrads,
) -> Result<LossReport> {
    let cache = field.forward(&batch.query_points, &batch.query_dirs);
    let sem = semantic_rows(&cache);
    let results: Vec<RenderResult> = (0..batch.rays())
        .map(|r| {
            let s = batch.range(r);
            composite(
                &batch.t[s.clone()],
                &batch.delta[s.clone()],
                &cache.sigma[s.clone()],
                &cache.color[3 * s.start..3 * s.end],
                &sem[SEMANTIC_DIM * s.start..SEMANTIC_DIM * s.end],
            )
        })
        .collect();
    let (report, ray_grads) = compute_losses(&results, &targets, cfg)?;
    let n = batch.len();
    let mut dsigma = vec![0.0; n];
    let mut dcolor = vec![0.0; 3 * n];
    let mut dsem = vec![0.0; SEMANTIC_DIM * n];
    for (r, (res, g)) in results.iter().zip(&ray_grads).enumerate() {
        let s = batch.range(r);
        composite_backward(
            res,
            g,
            &batch.t[s.clone()],
            &batch.delta[s.clone()],
            &cache.sigma[s.clone()],
            &cache.color[3 * s.start..3 * s.end],
            &sem[SEMANTIC_DIM * s.start..SEMANTIC_DIM * s.end],
            &mut dsigma[s.clone()],
            &mut dcolor[3 * s.start..3 * s.end],
            &mut dsem[SEMANTIC_DIM * s.start..SEMANTIC_DIM * s.end],
        );
    }
    field.backward(&cache, &dsigma, &dcolor, &dsem, grads)?;
    Ok(report)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub render: RenderConfig,
    pub field: RadianceField,
    adam: Adam,
    grads: FieldGrads,
    rng: ChaCha8Rng,
    pool: Vec<(u32, u32)>,
    pool_frames: usize,
    cursor: usize,
    pub step: usize,
    pub log: Vec<LogRow>,
    pub last_loss: LossReport,
    pub samples_seen: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, field_config: FieldConfig, render: RenderConfig, vol: &SemanticVolume) -> Result<Self> {
        config.validate()?;
        let g = vol.grid;
        let field = RadianceField::new(field_config, g.min(), g.max(), config.seed)?;
        Ok(Self::with_field(config, render, field))
    }

    pub fn with_field(config: TrainConfig, render: RenderConfig, field: RadianceField) -> Self {
        Self {
            adam: Adam::new(config.adam, &field),
            grads: field.zero_grads(),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            pool: Vec::new(),
            pool_frames: 0,
            cursor: 0,
            step: 0,
            log: Vec::new(),
            last_loss: LossReport::default(),
            samples_seen: 0,
            started: Instant::now(),
            config,
            render,
            field,
        }
    }

    fn refill_pool(&mut self, frames: &[Frame]) {
        if self.pool_frames != frames.len() {
            self.pool = frames
                .iter()
                .enumerate()
                .flat_map(|(f, fr)| (0..fr.depth.len() as u32).map(move |p| (f as u32, p)))
                .collect();
            self.pool_frames = frames.len();
            self.cursor = self.pool.len();
        }
        if self.cursor >= self.pool.len() {
            self.pool.shuffle(&mut self.rng);
            self.cursor = 0;
        }
    }

    fn draw(&mut self, frames: &[Frame]) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.config.rays_per_batch);
        while out.len() < self.config.rays_per_batch {
            self.refill_pool(frames);
            let take = (self.config.rays_per_batch - out.len()).min(self.pool.len() - self.cursor);
            out.extend_from_slice(&self.pool[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }

    /// One optimizer step on a fresh ray batch.
    pub fn train_step(&mut self, inp: &TrainInputs) -> Result<LossReport> {
        if inp.frames.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.config.sampler == Sampler::Hybrid && inp.volume.occupied_count() == 0 {
            return Err(Error::EmptyVolume);
        }
        let picks = self.draw(inp.frames);
        let mut rays = Vec::with_capacity(picks.len());
        let mut targets = Vec::with_capacity(picks.len());
        for &(f, p) in &picks {
            let fr = &inp.frames[f as usize];
            let p = p as usize;
            let (ray, z_per_t) = fr.pixel_ray(p % fr.width(), p / fr.width());
            let depth = (fr.depth[p] > 0.0).then(|| fr.depth[p] / z_per_t);
            let id = fr.semantic[p];
            let semantic = (id > 0)
                .then(|| inp.registry.get(id))
                .flatten()
                .filter(|pl| pl.alive)
                .map(|pl| [pl.normal.x, pl.normal.y, pl.normal.z, pl.offset / inp.scene_radius]);
            rays.push(ray);
            targets.push(RayTarget {
                color: fr.color[p],
                depth,
                semantic,
            });
        }
        let step_len = inp.volume.grid.voxel_size * self.render.step_fraction;
        let band = inp.volume.psi() * 6.0;
        let samples: Vec<Vec<Sample>> = rays
            .par_iter()
            .zip(&targets)
            .map(|(ray, t)| match (self.config.sampler, t.depth) {
                (Sampler::DepthGuided, Some(d)) => depth_guided_samples(ray, d, step_len, band),
                _ => march_ray(ray, inp.volume, inp.registry, inp.edit, &self.render),
            })
            .collect();
        let batch = SampleBatch::from_samples(&rays, &samples, inp.edit);
        self.samples_seen += batch.len();
        let report = loss_and_grads(&self.field, &batch, &targets, &self.config, &mut self.grads)?;
        let lr = self.config.lr_at(self.step);
        self.adam.step(&mut self.field, &mut self.grads, lr)?;
        self.step += 1;
        self.last_loss = report;
        Ok(report)
    }

    /// Demotes low-density dense voxels if this step is a pruning step.
    pub fn maybe_prune(&self, vol: &mut SemanticVolume) -> usize {
        let every = self.config.prune_every;
        if every > 0 && self.step > 0 && self.step % every == 0 {
            let n = vol.prune_voxels(&self.field, self.config.prune_threshold);
            log::debug!("step {}: pruned {n} voxels", self.step);
            n
        } else {
            0
        }
    }

    /// Appends a log row; holdout PSNR is NaN when no holdout views are given.
    pub fn record(&mut self, inp: &TrainInputs, holdout: &Holdout) -> Result<LogRow> {
        let psnr_holdout = if holdout.is_empty() {
            f64::NAN
        } else {
            holdout_psnr(&self.field, inp.volume, inp.registry, inp.edit, &self.render, holdout)?
        };
        let row = LogRow {
            step: self.step,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            loss: self.last_loss,
            lr: self.config.lr_at(self.step),
            psnr_train: psnr_from_mse(self.last_loss.color / 3.0),
            psnr_holdout,
        };
        log::info!(
            "step {:>5}  L_c {:.5}  L_d {:.5}  psnr train {:.2} holdout {:.2}",
            row.step,
            row.loss.color,
            row.loss.depth,
            row.psnr_train,
            row.psnr_holdout
        );
        self.log.push(row);
        Ok(row)
    }

    fn is_eval_step(&self) -> bool {
        let every = self.config.eval_every;
        (every > 0 && self.step % every == 0) || self.step == self.config.total_iters()
    }

    /// Trains for the configured number of steps on pre-fused data.
    pub fn run_batch(
        &mut self,
        vol: &mut SemanticVolume,
        registry: &Registry,
        edit: &EditState,
        frames: &[Frame],
        scene_radius: f64,
        holdout: &Holdout,
    ) -> Result<()> {
        while self.step < self.config.total_iters() {
            let inp = TrainInputs {
                volume: vol,
                registry,
                edit,
                frames,
                scene_radius,
            };
            self.train_step(&inp)?;
            if self.is_eval_step() {
                self.record(&inp, holdout)?;
            }
            self.maybe_prune(vol);
        }
        Ok(())
    }

    /// Interleaves mapping of arriving frames with training. Frame `k`
    /// arrives at `k / incremental_rate` simulated seconds and each step
    /// costs `sim_step_seconds`; a frame is fused before the first step that
    /// starts at or after its arrival.
    pub fn run_incremental(
        &mut self,
        mapper: &mut Mapper,
        stream: Vec<Frame>,
        scene_radius: f64,
        holdout: &Holdout,
    ) -> Result<()> {
        let edit = EditState::new(mapper.volume.grid);
        let mut pending = stream.into_iter().enumerate().peekable();
        while self.step < self.config.total_iters() {
            let now = self.step as f64 * self.config.sim_step_seconds;
            while let Some((k, _)) = pending.peek() {
                if *k as f64 / self.config.incremental_rate > now + 1e-12 {
                    break;
                }
                let (_, f) = pending.next().expect("peeked");
                mapper.ingest(f)?;
            }
            if mapper.frames.is_empty() {
                return Err(Error::EmptyBatch);
            }
            let inp = TrainInputs {
                volume: &mapper.volume,
                registry: &mapper.registry,
                edit: &edit,
                frames: &mapper.frames,
                scene_radius,
            };
            self.train_step(&inp)?;
            if self.is_eval_step() {
                self.record(&inp, holdout)?;
            }
            self.maybe_prune(&mut mapper.volume);
        }
        for (_, f) in pending {
            mapper.ingest(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::encoding::EncodingConfig;
    use crate::geometry::{Plane, Vec3};
    use crate::registry::RegistryConfig;
    use crate::volume::Grid;
    use rand::Rng;

    fn random_results(n: usize, seed: u64) -> (Vec<RenderResult>, Vec<RayTarget>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut res = Vec::new();
        let mut tgt = Vec::new();
        for i in 0..n {
            res.push(RenderResult {
                color: [rng.gen(), rng.gen(), rng.gen()],
                depth: rng.gen_range(0.5..3.0),
                semantic: [rng.gen(), rng.gen(), rng.gen(), rng.gen()],
                opacity: rng.gen_range(0.01..0.99),
                ..Default::default()
            });
            tgt.push(RayTarget {
                color: [rng.gen(), rng.gen(), rng.gen()],
                depth: (i % 3 != 0).then(|| rng.gen_range(0.5..3.0)),
                semantic: (i % 2 == 0).then(|| [rng.gen(), rng.gen(), rng.gen(), rng.gen()]),
            });
        }
        (res, tgt)
    }

    /// Straightforward per-term sums divided by contributor counts.
    fn loss_oracle(res: &[RenderResult], tgt: &[RayTarget]) -> [f64; 4] {
        let mut c = 0.0;
        let (mut d, mut nd) = (0.0, 0);
        let (mut s, mut ns) = (0.0, 0);
        let mut reg = 0.0;
        for (r, t) in res.iter().zip(tgt) {
            c += (r.color[0] - t.color[0]).powi(2) + (r.color[1] - t.color[1]).powi(2) + (r.color[2] - t.color[2]).powi(2);
            if let Some(x) = t.depth {
                d += (r.depth - x).powi(2);
                nd += 1;
            }
            if let Some(x) = t.semantic {
                s += (0..4).map(|k| (r.semantic[k] - x[k]).powi(2)).sum::<f64>();
                ns += 1;
            }
            let o = r.opacity.max(1e-7).min(1.0);
            reg -= o * o.ln();
        }
        let n = res.len() as f64;
        [c / n, d / nd as f64, s / ns as f64, reg / n]
    }

    #[test]
    fn losses_match_oracle_and_decompose() {
        let (res, tgt) = random_results(64, 9);
        let cfg = TrainConfig::default();
        let (rep, _) = compute_losses(&res, &tgt, &cfg).unwrap();
        let o = loss_oracle(&res, &tgt);
        assert!((rep.color - o[0]).abs() < 1e-10);
        assert!((rep.depth - o[1]).abs() < 1e-10);
        assert!((rep.semantic - o[2]).abs() < 1e-10);
        assert!((rep.reg - o[3]).abs() < 1e-10);
        let sum = rep.color + 1.0 * rep.depth + 0.04 * rep.semantic + 0.001 * rep.reg;
        assert!((rep.total - sum).abs() < 1e-9);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let r = RenderResult {
            color: [0.2, 0.4, 0.6],
            depth: 2.0,
            semantic: [0.0, 0.0, 1.0, 0.5],
            opacity: 1.0,
            ..Default::default()
        };
        let t = RayTarget {
            color: r.color,
            depth: Some(2.0),
            semantic: Some(r.semantic),
        };
        let (rep, g) = compute_losses(&[r], &[t], &TrainConfig::default()).unwrap();
        assert_eq!(rep.total, 0.0);
        assert!(g[0].is_zero());
    }

    #[test]
    fn half_opacity_regularizer_value() {
        let r = RenderResult {
            opacity: 0.5,
            ..Default::default()
        };
        let (rep, _) = compute_losses(&[r], &[RayTarget::default()], &TrainConfig::default()).unwrap();
        assert!((rep.reg - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((rep.reg - 0.346574).abs() < 1e-6);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(matches!(compute_losses(&[], &[], &TrainConfig::default()), Err(Error::EmptyBatch)));
    }

    #[test]
    fn masked_targets_do_not_matter() {
        let (res, mut tgt) = random_results(16, 4);
        let cfg = TrainConfig::default();
        let (a, ga) = compute_losses(&res, &tgt, &cfg).unwrap();
        // masked rays get no depth or semantic gradient
        for (t, g) in tgt.iter().zip(&ga) {
            if t.depth.is_none() {
                assert_eq!(g.depth, 0.0);
            }
            if t.semantic.is_none() {
                assert_eq!(g.semantic, [0.0; 4]);
            }
        }
        // dropping a depth target changes only the depth term
        tgt[1].depth = None;
        let (c, _) = compute_losses(&res, &tgt, &cfg).unwrap();
        assert_eq!(a.color, c.color);
        assert_eq!(a.semantic, c.semantic);
        assert_ne!(a.depth, c.depth);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (res, tgt) = random_results(8, 5);
        let cfg = TrainConfig::default();
        let (_, g) = compute_losses(&res, &tgt, &cfg).unwrap();
        let h = 1e-6;
        let total = |res: &[RenderResult]| compute_losses(res, &tgt, &cfg).unwrap().0.total;
        for i in 0..res.len() {
            let probe = |f: &dyn Fn(&mut RenderResult, f64), analytic: f64| {
                let mut p = res.clone();
                f(&mut p[i], h);
                let mut m = res.clone();
                f(&mut m[i], -h);
                let fd = (total(&p) - total(&m)) / (2.0 * h);
                assert!((fd - analytic).abs() < 1e-7, "ray {i}: fd {fd} vs {analytic}");
            };
            probe(&|r, h| r.color[1] += h, g[i].color[1]);
            probe(&|r, h| r.depth += h, g[i].depth);
            probe(&|r, h| r.semantic[2] += h, g[i].semantic[2]);
            probe(&|r, h| r.opacity += h, g[i].opacity);
        }
    }

    #[test]
    fn full_entropy_variant_is_symmetric() {
        let cfg = TrainConfig {
            full_entropy: true,
            ..Default::default()
        };
        let at = |o: f64| {
            let r = RenderResult {
                opacity: o,
                ..Default::default()
            };
            compute_losses(&[r], &[RayTarget::default()], &cfg).unwrap().0.reg
        };
        assert!((at(0.3) - at(0.7)).abs() < 1e-12);
        assert!((at(0.5) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at(0) - 1e-2).abs() < 1e-15);
        assert!((cfg.lr_at(cfg.total_iters()) - 3e-4).abs() < 1e-15);
        let mid = cfg.lr_at(cfg.total_iters() / 2);
        assert!((mid - 0.5 * (1e-2 + 3e-4)).abs() < 1e-12);
    }

    fn small_field_config() -> FieldConfig {
        FieldConfig {
            encoding: EncodingConfig {
                levels: 2,
                base_resolution: 4,
                ..Default::default()
            },
            hidden: 16,
            color_hidden: 16,
        }
    }

    /// A single back wall at z = -1 seen by one camera at the origin.
    fn wall_setup() -> (SemanticVolume, Registry, Vec<Frame>) {
        let spec = crate::synth::SceneSpec::single_wall();
        let intr = Intrinsics::from_fov(16, 16, 60f64.to_radians()).unwrap();
        let pose = Pose::look_at(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0), Vec3::y()).unwrap();
        let frame = crate::synth::raytrace_frame(&spec, &pose, &intr, 0);
        let grid = Grid::new([16, 16, 16], spec.bounds_min, (spec.bounds_max - spec.bounds_min).max() / 16.0).unwrap();
        let wall = spec.ground_truth_planes()[0];
        let reg = Registry::from_planes(RegistryConfig::default(), vec![Plane::new(wall.normal, wall.offset).unwrap().with_id(1)])
            .unwrap();
        let mut vol = SemanticVolume::new(grid);
        vol.fuse_frame(&frame, &reg, &Default::default());
        (vol, reg, vec![frame])
    }

    fn toy_trainer(seed: u64, vol: &SemanticVolume) -> Trainer {
        let cfg = TrainConfig {
            rays_per_batch: 64,
            iters_per_epoch: 20,
            epochs: 1,
            seed,
            ..Default::default()
        };
        Trainer::new(cfg, small_field_config(), RenderConfig::default(), vol).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (vol, reg, frames) = wall_setup();
        let edit = EditState::new(vol.grid);
        let run = |seed| {
            let mut t = toy_trainer(seed, &vol);
            let inp = TrainInputs {
                volume: &vol,
                registry: &reg,
                edit: &edit,
                frames: &frames,
                scene_radius: 3.0,
            };
            let first = t.train_step(&inp).unwrap();
            let mut last = first;
            for _ in 0..19 {
                last = t.train_step(&inp).unwrap();
            }
            assert!(t.field.all_finite());
            (first.total, last.total, t.field.mlp.clone())
        };
        let (first, last, p1) = run(3);
        assert!(last < first, "{first} -> {last}");
        let (_, _, p2) = run(3);
        assert_eq!(p1, p2);
    }

    #[test]
    fn empty_volume_is_rejected() {
        let (vol, reg, frames) = wall_setup();
        let empty = SemanticVolume::new(vol.grid);
        let edit = EditState::new(vol.grid);
        let mut t = toy_trainer(1, &vol);
        let inp = TrainInputs {
            volume: &empty,
            registry: &reg,
            edit: &edit,
            frames: &frames,
            scene_radius: 3.0,
        };
        assert!(matches!(t.train_step(&inp), Err(Error::EmptyVolume)));
    }

    #[test]
    fn pool_covers_every_pixel_once_per_pass() {
        let (vol, _, frames) = wall_setup();
        let mut t = toy_trainer(2, &vol);
        let n = frames[0].depth.len();
        let mut seen = Vec::new();
        for _ in 0..n / 64 {
            seen.extend(t.draw(&frames));
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), n);
    }

    #[test]
    fn depth_guided_samples_start_on_the_depth() {
        let ray = Ray::new(Vec3::zeros(), Vec3::new(0.0, 0.0, -1.0)).unwrap();
        let s = depth_guided_samples(&ray, 2.0, 0.1, 0.35);
        assert_eq!(s.len(), 4);
        assert!((s[0].t - 2.0).abs() < 1e-12);
        assert!(s.iter().all(|x| x.t >= 2.0 && x.t < 2.35));
    }

    #[test]
    fn log_csv_has_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_log_csv(&p, &[LogRow { step: 1, wall_time_s: 0.5, loss: LossReport::default(), lr: 0.01, psnr_train: 20.0, psnr_holdout: f64::NAN }]).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert!(s.starts_with("step,wall_time_s,L_c,L_d,L_s,L_reg,lr,psnr_train,psnr_holdout\n1,"));
    }
}
