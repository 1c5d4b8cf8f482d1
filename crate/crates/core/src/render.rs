//! Full differentiable frame render: deform at `t`, project, composite.

use rayon::prelude::*;

use crate::deform::{deform, deform_backward, network_backward, DeformCache, DeformedGaussian, DeformedGrad, GaussianGrad};
use crate::error::Result;
use crate::mlp::{DeformationNet, NetGrads};
use crate::project::{project, project_backward, Splat2D};
use crate::raster::{rasterize, rasterize_backward, BufferGrads, RasterCache, RenderBuffers};
use crate::types::{Camera, Scene};

/// Everything the backward pass needs from one render.
pub struct RenderState {
    pub deformed: Vec<DeformedGaussian>,
    pub deform_cache: DeformCache,
    pub splats: Vec<Splat2D>,
    pub raster_cache: RasterCache,
}

pub fn render(
    scene: &Scene,
    net: Option<&DeformationNet>,
    cam: &Camera,
    t: f64,
) -> Result<(RenderBuffers, RenderState)> {
    let (deformed, deform_cache) = deform(scene, net, t)?;
    let splats: Vec<Splat2D> = deformed
        .par_iter()
        .filter_map(|d| project(d, &scene.gaussians[d.source_idx], cam, scene.sh_degree))
        .collect();
    let (buffers, raster_cache) = rasterize(&splats, cam, &scene.sky)?;
    Ok((
        buffers,
        RenderState {
            deformed,
            deform_cache,
            splats,
            raster_cache,
        },
    ))
}

/// Gradients of one render with respect to every learnable.
pub struct SceneGrads {
    pub gaussians: Vec<GaussianGrad>,
    pub sky: Vec<f64>,
    pub net: Option<NetGrads>,
}

impl SceneGrads {
    pub fn zeros(scene: &Scene, net: Option<&DeformationNet>) -> Self {
        let k = scene.class_table.len();
        Self {
            gaussians: scene
                .gaussians
                .iter()
                .map(|g| GaussianGrad::zeros(g.color.len(), k, scene.time_embed_dim))
                .collect(),
            sky: vec![0.0; scene.sky.texels.len()],
            net: net.map(NetGrads::zeros_like),
        }
    }
}

pub fn render_backward(
    scene: &Scene,
    net: Option<&DeformationNet>,
    cam: &Camera,
    state: &RenderState,
    grads: &BufferGrads,
) -> Result<SceneGrads> {
    let (splat_grads, sky) = rasterize_backward(&state.raster_cache, &state.splats, &scene.sky, grads)?;
    let mut out = SceneGrads::zeros(scene, None);
    out.sky = sky;

    let projected: Vec<_> = state
        .splats
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(s, g)| {
            let i = s.source_idx;
            project_backward(&state.deformed[i], &scene.gaussians[i], cam, scene.sh_degree, g)
        })
        .collect();
    let mut deformed_grads = vec![DeformedGrad::default(); scene.len()];
    for (s, p) in state.splats.iter().zip(projected) {
        let i = s.source_idx;
        deformed_grads[i] = p.deformed;
        let gg = &mut out.gaussians[i];
        for (a, b) in gg.color.iter_mut().zip(&p.color) {
            *a += b;
        }
        for (a, b) in gg.sem_logits.iter_mut().zip(&p.sem_logits) {
            *a += b;
        }
    }

    let residual_grads = deform_backward(scene, &state.deformed, &state.deform_cache, &deformed_grads, &mut out.gaussians)?;
    if let Some(net) = net {
        out.net = Some(network_backward(scene, net, &state.deform_cache, &residual_grads, &mut out.gaussians)?);
    }
    Ok(out)
}
