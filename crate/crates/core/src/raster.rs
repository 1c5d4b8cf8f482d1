//! Tile-based front-to-back compositing of splats over an optimizable sky,
//! and its exact reverse pass.
//!
//! Per pixel, splats are visited in global (depth, index) order. A splat
//! contributes only where its Mahalanobis distance² is at most 9; the
//! contribution is `min(opacity · exp(-q/2), 0.999)`. Compositing stops
//! once transmittance drops below 1e-4.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::project::{Splat2D, Splat2DGrad, SIGMA_EXTENT};
use crate::sky::SkyTaps;
use crate::types::{Camera, SkyTexture};

pub const TILE: usize = 16;
pub const ALPHA_MAX: f64 = 0.999;
pub const T_MIN: f64 = 1e-4;
pub const CUTOFF_Q: f64 = SIGMA_EXTENT * SIGMA_EXTENT;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Final color including the sky blend, `H×W×3`.
    pub color: Vec<f64>,
    /// Alpha-weighted depth, `H×W`.
    pub depth: Vec<f64>,
    /// Composited class probabilities, `H×W×K`.
    pub semantic: Vec<f64>,
    /// Accumulated opacity, `H×W`.
    pub alpha: Vec<f64>,
}

impl RenderBuffers {
    pub fn zeros(width: usize, height: usize, num_classes: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            num_classes,
            color: vec![0.0; n * 3],
            depth: vec![0.0; n],
            semantic: vec![0.0; n * num_classes],
            alpha: vec![0.0; n],
        }
    }

    pub fn image(&self) -> crate::types::Image {
        crate::types::Image {
            width: self.width,
            height: self.height,
            data: self.color.clone(),
        }
    }
}

/// One splat's participation at one pixel.
#[derive(Debug, Clone, Copy)]
struct Hit {
    /// Position in the tile's splat list.
    local: u32,
    gauss: f64,
    alpha: f64,
    clamped: bool,
    transmittance: f64,
}

#[derive(Debug, Clone)]
struct TileCache {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    /// Indices into the caller's splat slice, in compositing order.
    splats: Vec<usize>,
    hits: Vec<Hit>,
    /// `hits[pixel_start[p]..pixel_start[p + 1]]` belong to local pixel `p`.
    pixel_start: Vec<usize>,
}

/// Forward state consumed by `rasterize_backward`.
#[derive(Debug, Clone)]
pub struct RasterCache {
    tiles: Vec<TileCache>,
    sky_taps: Vec<SkyTaps>,
    width: usize,
    height: usize,
    num_classes: usize,
    fingerprint: u64,
}

fn fingerprint(splats: &[Splat2D]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in splats {
        for v in [s.mean2d.x, s.mean2d.y, s.cov2d[0], s.cov2d[1], s.cov2d[2], s.depth, s.opacity] {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h ^= s.source_idx as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Splat indices sorted front to back, ties broken by source index.
pub fn depth_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].source_idx.cmp(&splats[b].source_idx))
    });
    order
}

/// Per-pixel sky lookups for a camera.
pub fn sky_taps(cam: &Camera, sky: &SkyTexture) -> Vec<SkyTaps> {
    let mut taps = Vec::with_capacity(cam.width * cam.height);
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = cam.pixel_ray_world(u as f64, v as f64);
            taps.push(SkyTaps::new(sky.width, sky.height, &dir));
        }
    }
    taps
}

pub fn rasterize(
    splats: &[Splat2D],
    cam: &Camera,
    sky: &SkyTexture,
) -> Result<(RenderBuffers, RasterCache)> {
    let (width, height) = (cam.width, cam.height);
    let num_classes = splats.first().map_or(0, |s| s.sem_prob.len());
    if let Some(s) = splats.iter().find(|s| s.sem_prob.len() != num_classes) {
        return Err(Error::Dimension {
            context: "splat class probabilities",
            expected: num_classes,
            got: s.sem_prob.len(),
        });
    }
    let order = depth_order(splats);
    let bounds: Vec<[f64; 4]> = splats.iter().map(Splat2D::bounds).collect();
    let conics: Vec<[f64; 3]> = splats.iter().map(Splat2D::conic).collect();
    let taps = sky_taps(cam, sky);

    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let tile_ids: Vec<(usize, usize)> = (0..tiles_y)
        .flat_map(|ty| (0..tiles_x).map(move |tx| (tx, ty)))
        .collect();

    let results: Vec<(TileCache, Vec<PixelOut>)> = tile_ids
        .par_iter()
        .map(|&(tx, ty)| {
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let w = TILE.min(width - x0);
            let h = TILE.min(height - y0);
            let (fx0, fx1) = (x0 as f64, (x0 + w - 1) as f64);
            let (fy0, fy1) = (y0 as f64, (y0 + h - 1) as f64);
            let list: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&i| {
                    let b = bounds[i];
                    b[1] >= fx0 && b[0] <= fx1 && b[3] >= fy0 && b[2] <= fy1
                })
                .collect();
            let mut tile = TileCache {
                x0,
                y0,
                w,
                h,
                splats: list,
                hits: Vec::new(),
                pixel_start: Vec::with_capacity(w * h + 1),
            };
            let mut outs = Vec::with_capacity(w * h);
            for ly in 0..h {
                for lx in 0..w {
                    let (u, v) = (x0 + lx, y0 + ly);
                    tile.pixel_start.push(tile.hits.len());
                    let sky_rgb = taps[v * width + u].sample(sky);
                    outs.push(composite_pixel(
                        u as f64,
                        v as f64,
                        &tile.splats,
                        splats,
                        &conics,
                        sky_rgb,
                        num_classes,
                        &mut tile.hits,
                    ));
                }
            }
            tile.pixel_start.push(tile.hits.len());
            (tile, outs)
        })
        .collect();

    let mut buf = RenderBuffers::zeros(width, height, num_classes);
    let mut tiles = Vec::with_capacity(results.len());
    for (tile, outs) in results {
        for ly in 0..tile.h {
            for lx in 0..tile.w {
                let o = &outs[ly * tile.w + lx];
                let p = (tile.y0 + ly) * width + tile.x0 + lx;
                for (ch, c) in o.color.iter().enumerate() {
                    if !c.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "color at pixel ({}, {}), last splat {:?}",
                            tile.x0 + lx,
                            tile.y0 + ly,
                            o.last_splat
                        )));
                    }
                    buf.color[p * 3 + ch] = *c;
                }
                if !o.depth.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "depth at pixel ({}, {}), last splat {:?}",
                        tile.x0 + lx,
                        tile.y0 + ly,
                        o.last_splat
                    )));
                }
                buf.depth[p] = o.depth;
                buf.alpha[p] = o.alpha;
                buf.semantic[p * num_classes..(p + 1) * num_classes].copy_from_slice(&o.semantic);
            }
        }
        tiles.push(tile);
    }
    Ok((
        buf,
        RasterCache {
            tiles,
            sky_taps: taps,
            width,
            height,
            num_classes,
            fingerprint: fingerprint(splats),
        },
    ))
}

impl RasterCache {
    /// Transmittance in front of each contributing splat at pixel `(u, v)`,
    /// in compositing order.
    pub fn pixel_transmittances(&self, u: usize, v: usize) -> Vec<f64> {
        let tiles_x = self.width.div_ceil(TILE);
        let tile = &self.tiles[(v / TILE) * tiles_x + u / TILE];
        let p = (v - tile.y0) * tile.w + (u - tile.x0);
        tile.hits[tile.pixel_start[p]..tile.pixel_start[p + 1]]
            .iter()
            .map(|h| h.transmittance)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Hash of which splats were binned, hit and clamped at every pixel.
    /// Equal digests mean two renders took the same discrete branches.
    pub fn branch_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100_0000_01b3);
        };
        for t in &self.tiles {
            mix(t.splats.len() as u64);
            for &s in &t.splats {
                mix(s as u64);
            }
            for w in t.pixel_start.windows(2) {
                mix((w[1] - w[0]) as u64);
            }
            for hit in &t.hits {
                mix(u64::from(hit.local) << 1 | u64::from(hit.clamped));
            }
        }
        h
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

struct PixelOut {
    color: [f64; 3],
    depth: f64,
    semantic: Vec<f64>,
    alpha: f64,
    last_splat: Option<usize>,
}

#[allow(clippy::too_many_arguments)]
fn composite_pixel(
    px: f64,
    py: f64,
    list: &[usize],
    splats: &[Splat2D],
    conics: &[[f64; 3]],
    sky_rgb: [f64; 3],
    num_classes: usize,
    hits: &mut Vec<Hit>,
) -> PixelOut {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut semantic = vec![0.0; num_classes];
    let mut acc = 0.0;
    let mut last = None;
    for (local, &i) in list.iter().enumerate() {
        let s = &splats[i];
        let con = conics[i];
        let dx = px - s.mean2d.x;
        let dy = py - s.mean2d.y;
        let q = con[0] * dx * dx + 2.0 * con[1] * dx * dy + con[2] * dy * dy;
        if !(q <= CUTOFF_Q) {
            continue;
        }
        let g = (-0.5 * q).exp();
        let raw = s.opacity * g;
        let clamped = raw > ALPHA_MAX;
        let alpha = if clamped { ALPHA_MAX } else { raw };
        let w = alpha * t;
        for ch in 0..3 {
            color[ch] += w * s.color[ch];
        }
        depth += w * s.depth;
        for (k, p) in s.sem_prob.iter().enumerate() {
            semantic[k] += w * p;
        }
        acc += w;
        hits.push(Hit {
            local: local as u32,
            gauss: g,
            alpha,
            clamped,
            transmittance: t,
        });
        last = Some(s.source_idx);
        t *= 1.0 - alpha;
        if t < T_MIN {
            break;
        }
    }
    for ch in 0..3 {
        color[ch] += (1.0 - acc) * sky_rgb[ch];
    }
    PixelOut {
        color,
        depth,
        semantic,
        alpha: acc,
        last_splat: last,
    }
}

/// Upstream gradients on the render buffers. `alpha` may be left empty.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferGrads {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub semantic: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl BufferGrads {
    pub fn zeros(width: usize, height: usize, num_classes: usize) -> Self {
        let n = width * height;
        Self {
            color: vec![0.0; n * 3],
            depth: vec![0.0; n],
            semantic: vec![0.0; n * num_classes],
            alpha: vec![0.0; n],
        }
    }
}

/// Reverse of `rasterize`: gradients per splat (same order as the input
/// slice) and per sky texel.
pub fn rasterize_backward(
    cache: &RasterCache,
    splats: &[Splat2D],
    sky: &SkyTexture,
    grads: &BufferGrads,
) -> Result<(Vec<Splat2DGrad>, Vec<f64>)> {
    if fingerprint(splats) != cache.fingerprint {
        return Err(Error::StaleCache("rasterize_backward"));
    }
    let (width, height, k) = (cache.width, cache.height, cache.num_classes);
    let n = width * height;
    if grads.color.len() != n * 3 || grads.depth.len() != n || grads.semantic.len() != n * k {
        return Err(Error::Dimension {
            context: "render buffer gradients",
            expected: n,
            got: grads.depth.len(),
        });
    }
    let conics: Vec<[f64; 3]> = splats.iter().map(Splat2D::conic).collect();

    // Per tile: gradients for the tile's splat list (with the conic gradient
    // in place of cov2d) plus a sparse sky gradient.
    let per_tile: Vec<(Vec<Splat2DGrad>, Vec<(usize, [f64; 3])>)> = cache
        .tiles
        .par_iter()
        .map(|tile| {
            let mut local = vec![Splat2DGrad::zeros(k); tile.splats.len()];
            let mut sky_grads = Vec::with_capacity(tile.w * tile.h);
            for ly in 0..tile.h {
                for lx in 0..tile.w {
                    let (u, v) = (tile.x0 + lx, tile.y0 + ly);
                    let p = v * width + u;
                    let lp = ly * tile.w + lx;
                    let hits = &tile.hits[tile.pixel_start[lp]..tile.pixel_start[lp + 1]];
                    let taps = &cache.sky_taps[p];
                    let sky_rgb = taps.sample(sky);
                    let g_col = [grads.color[3 * p], grads.color[3 * p + 1], grads.color[3 * p + 2]];
                    let g_depth = grads.depth[p];
                    let g_sem = &grads.semantic[p * k..(p + 1) * k];
                    let g_alpha = grads.alpha.get(p).copied().unwrap_or(0.0);
                    let g_acc = g_alpha
                        - (g_col[0] * sky_rgb[0] + g_col[1] * sky_rgb[1] + g_col[2] * sky_rgb[2]);

                    let (px, py) = (u as f64, v as f64);
                    let acc: f64 = hits.iter().map(|h| h.alpha * h.transmittance).sum();
                    let one_minus = 1.0 - acc;
                    sky_grads.push((p, [one_minus * g_col[0], one_minus * g_col[1], one_minus * g_col[2]]));

                    let mut after = 0.0;
                    for hit in hits.iter().rev() {
                        let (gauss, alpha) = (hit.gauss, hit.alpha);
                        let li = hit.local as usize;
                        let s = &splats[tile.splats[li]];
                        let con = conics[tile.splats[li]];
                        let w = alpha * hit.transmittance;
                        let mut value = g_acc + g_depth * s.depth;
                        for ch in 0..3 {
                            value += g_col[ch] * s.color[ch];
                        }
                        for (gk, pk) in g_sem.iter().zip(&s.sem_prob) {
                            value += gk * pk;
                        }
                        let gs = &mut local[li];
                        for ch in 0..3 {
                            gs.color[ch] += w * g_col[ch];
                        }
                        gs.depth += w * g_depth;
                        for (a, gk) in gs.sem_prob.iter_mut().zip(g_sem) {
                            *a += w * gk;
                        }
                        let g_a = hit.transmittance * value - after / (1.0 - alpha);
                        after += w * value;
                        if hit.clamped {
                            continue;
                        }
                        gs.opacity += g_a * gauss;
                        let g_q = -0.5 * gauss * g_a * s.opacity;
                        let dx = px - s.mean2d.x;
                        let dy = py - s.mean2d.y;
                        gs.mean2d.x += g_q * -2.0 * (con[0] * dx + con[1] * dy);
                        gs.mean2d.y += g_q * -2.0 * (con[1] * dx + con[2] * dy);
                        // Conic gradient (full symmetric matrix entries 00, 01, 11).
                        gs.cov2d[0] += g_q * dx * dx;
                        gs.cov2d[1] += g_q * dx * dy;
                        gs.cov2d[2] += g_q * dy * dy;
                    }
                }
            }
            (local, sky_grads)
        })
        .collect();

    let mut out = vec![Splat2DGrad::zeros(k); splats.len()];
    let mut sky_grad = vec![0.0; sky.texels.len()];
    for (tile, (local, sky_grads)) in cache.tiles.iter().zip(per_tile) {
        for (li, g) in local.iter().enumerate() {
            out[tile.splats[li]].add_assign(g);
        }
        for (p, g) in sky_grads {
            cache.sky_taps[p].accumulate(&g, &mut sky_grad);
        }
    }

    // Conic -> covariance: dL/dΣ = -C G C with C the conic.
    for (g, con) in out.iter_mut().zip(&conics) {
        let [ga, gb, gc] = g.cov2d;
        let c = nalgebra::Matrix2::new(con[0], con[1], con[1], con[2]);
        let gm = nalgebra::Matrix2::new(ga, gb, gb, gc);
        let gcov = -(c * gm * c);
        g.cov2d = [gcov[(0, 0)], gcov[(0, 1)] + gcov[(1, 0)], gcov[(1, 1)]];
    }
    Ok((out, sky_grad))
}
