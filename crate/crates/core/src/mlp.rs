//! Deformation MLP: a three-layer ReLU backbone of width 64 feeding four
//! parallel linear heads (Δμ, Δα, Δr, Δs), with an exact backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::NamedArray;
use crate::encoding::InputLayout;
use crate::error::{Error, Result};

pub const HIDDEN: usize = 64;
/// Output widths of the Δμ, Δα, Δr and Δs heads.
pub const HEAD_DIMS: [usize; 4] = [3, 1, 4, 3];
pub const RESIDUAL_DIM: usize = 11;

/// Gaussians per chunk in batched evaluation. Fixed so gradient sums do not
/// depend on the thread count.
const CHUNK: usize = 64;

/// Fully connected layer, `weight` stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn uniform_fan_in(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = (0..outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Dense) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[o] += g;
            let row = o * self.inputs;
            for i in 0..self.inputs {
                grads.weight[row + i] += g * x[i];
                grad_in[i] += g * self.weight[row + i];
            }
        }
        grad_in
    }

    fn add_assign(&mut self, other: &Dense) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }
}

/// The four residuals predicted for one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals {
    pub dmu: [f64; 3],
    pub dalpha: f64,
    pub drot: [f64; 4],
    pub dscale: [f64; 3],
}

impl Residuals {
    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            dmu: [v[0], v[1], v[2]],
            dalpha: v[3],
            drot: [v[4], v[5], v[6], v[7]],
            dscale: [v[8], v[9], v[10]],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(RESIDUAL_DIM);
        v.extend_from_slice(&self.dmu);
        v.push(self.dalpha);
        v.extend_from_slice(&self.drot);
        v.extend_from_slice(&self.dscale);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Vec<f64>,
    hidden: [Vec<f64>; 3],
    version: u64,
}

impl MlpCache {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    /// Which hidden units were active (nonzero after ReLU).
    pub fn active_units(&self) -> Vec<bool> {
        self.hidden.iter().flatten().map(|a| *a > 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationNet {
    pub layout: InputLayout,
    pub backbone: [Dense; 3],
    pub heads: [Dense; 4],
    /// Bumped whenever parameters change; caches from older versions are rejected.
    pub version: u64,
}

/// Gradient buffers shaped like a `DeformationNet`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub backbone: [Dense; 3],
    pub heads: [Dense; 4],
}

impl NetGrads {
    pub fn zeros_like(net: &DeformationNet) -> Self {
        let z = |d: &Dense| Dense::zeros(d.inputs, d.outputs);
        Self {
            backbone: [z(&net.backbone[0]), z(&net.backbone[1]), z(&net.backbone[2])],
            heads: [z(&net.heads[0]), z(&net.heads[1]), z(&net.heads[2]), z(&net.heads[3])],
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.backbone.iter_mut().zip(&other.backbone) {
            a.add_assign(b);
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.add_assign(b);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.backbone
            .iter()
            .chain(self.heads.iter())
            .flat_map(|d| d.params().copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn scale(&mut self, k: f64) {
        for d in self.backbone.iter_mut().chain(self.heads.iter_mut()) {
            for p in d.params_mut() {
                *p *= k;
            }
        }
    }
}

/// Initialization schemes for `init_net`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Backbone `U(±1/√fan_in)` for weights and biases; heads exactly zero.
    #[default]
    FanInZeroHeads,
}

pub fn init_net(seed: u64, layout: InputLayout, scheme: InitScheme) -> DeformationNet {
    let InitScheme::FanInZeroHeads = scheme;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = layout.input_dim();
    let backbone = [
        Dense::uniform_fan_in(input, HIDDEN, &mut rng),
        Dense::uniform_fan_in(HIDDEN, HIDDEN, &mut rng),
        Dense::uniform_fan_in(HIDDEN, HIDDEN, &mut rng),
    ];
    let heads = HEAD_DIMS.map(|d| Dense::zeros(HIDDEN, d));
    DeformationNet {
        layout,
        backbone,
        heads,
        version: 0,
    }
}

impl DeformationNet {
    pub fn input_dim(&self) -> usize {
        self.backbone[0].inputs
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.input_dim() != self.layout.input_dim() {
            return Err(Error::Dimension {
                context: "deformation net input",
                expected: self.layout.input_dim(),
                got: self.input_dim(),
            });
        }
        let mut prev = self.input_dim();
        for d in &self.backbone {
            if d.inputs != prev
                || d.outputs != HIDDEN
                || d.weight.len() != d.inputs * d.outputs
                || d.bias.len() != d.outputs
            {
                return Err(Error::config("deformation net backbone shapes are inconsistent"));
            }
            prev = d.outputs;
        }
        for (d, want) in self.heads.iter().zip(HEAD_DIMS) {
            if d.inputs != HIDDEN
                || d.outputs != want
                || d.weight.len() != d.inputs * d.outputs
                || d.bias.len() != d.outputs
            {
                return Err(Error::config("deformation net head shapes are inconsistent"));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone.iter().chain(self.heads.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.backbone.iter_mut().chain(self.heads.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|d| d.weight.len() + d.bias.len()).sum()
    }

    /// All parameters in a fixed order: backbone layers then heads, each
    /// weight-then-bias.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers().flat_map(|d| d.params().copied().collect::<Vec<_>>()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for d in self.layers_mut() {
            for p in d.params_mut() {
                *p = *it.next().expect("flat parameter vector too short");
            }
        }
        self.version += 1;
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.backbone
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|d| d.weight.iter_mut().chain(d.bias.iter_mut()))
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        let l = &self.layout;
        out.push(NamedArray::new(
            "net.layout",
            vec![4],
            vec![
                l.bands as f64,
                l.embed_dim as f64,
                f64::from(u8::from(l.encode_mu)),
                f64::from(u8::from(l.raw_t)),
            ],
        ));
        let names = ["backbone.0", "backbone.1", "backbone.2", "head.dmu", "head.dalpha", "head.drot", "head.dscale"];
        for (name, d) in names.iter().zip(self.layers()) {
            out.push(NamedArray::new(
                format!("net.{name}.weight"),
                vec![d.outputs, d.inputs],
                d.weight.clone(),
            ));
            out.push(NamedArray::new(format!("net.{name}.bias"), vec![d.outputs], d.bias.clone()));
        }
        out
    }

    pub fn from_arrays(arrays: &[NamedArray]) -> Result<Self> {
        let find = |name: &str| -> Result<&NamedArray> {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::config(format!("missing array {name}")))
        };
        let l = &find("net.layout")?.data;
        if l.len() != 4 {
            return Err(Error::config("net.layout must have 4 entries"));
        }
        let layout = InputLayout {
            bands: l[0] as usize,
            embed_dim: l[1] as usize,
            encode_mu: l[2] != 0.0,
            raw_t: l[3] != 0.0,
        };
        let dense = |name: &str| -> Result<Dense> {
            let w = find(&format!("net.{name}.weight"))?;
            let b = find(&format!("net.{name}.bias"))?;
            if w.shape.len() != 2 || b.shape.len() != 1 || w.shape[0] != b.shape[0] {
                return Err(Error::config(format!("bad shape for layer {name}")));
            }
            Ok(Dense {
                inputs: w.shape[1],
                outputs: w.shape[0],
                weight: w.data.clone(),
                bias: b.data.clone(),
            })
        };
        let net = DeformationNet {
            layout,
            backbone: [dense("backbone.0")?, dense("backbone.1")?, dense("backbone.2")?],
            heads: [
                dense("head.dmu")?,
                dense("head.dalpha")?,
                dense("head.drot")?,
                dense("head.dscale")?,
            ],
            version: 0,
        };
        net.validate()?;
        Ok(net)
    }
}

pub fn mlp_forward(net: &DeformationNet, h: &[f64]) -> Result<(Residuals, MlpCache)> {
    if h.len() != net.input_dim() {
        return Err(Error::Dimension {
            context: "mlp input",
            expected: net.input_dim(),
            got: h.len(),
        });
    }
    let mut hidden: [Vec<f64>; 3] = Default::default();
    let mut x: &[f64] = h;
    for (layer, out) in net.backbone.iter().zip(hidden.iter_mut()) {
        layer.forward_into(x, out);
        for v in out.iter_mut() {
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        x = out;
    }
    let mut res = Vec::with_capacity(RESIDUAL_DIM);
    let mut buf = Vec::new();
    for head in &net.heads {
        head.forward_into(&hidden[2], &mut buf);
        res.extend_from_slice(&buf);
    }
    Ok((
        Residuals::from_slice(&res),
        MlpCache {
            input: h.to_vec(),
            hidden,
            version: net.version,
        },
    ))
}

/// Accumulates parameter gradients into `grads` and returns dL/dh.
pub fn mlp_backward(
    net: &DeformationNet,
    cache: &MlpCache,
    grad_residuals: &Residuals,
    grads: &mut NetGrads,
) -> Result<Vec<f64>> {
    if cache.version != net.version {
        return Err(Error::StaleCache("mlp_backward"));
    }
    let g = grad_residuals.to_vec();
    let feat = &cache.hidden[2];
    let mut grad_feat = vec![0.0; HIDDEN];
    let mut off = 0;
    for (head, hg) in net.heads.iter().zip(grads.heads.iter_mut()) {
        let gi = head.backward(feat, &g[off..off + head.outputs], hg);
        for (a, b) in grad_feat.iter_mut().zip(gi) {
            *a += b;
        }
        off += head.outputs;
    }
    let mut grad = grad_feat;
    for layer in (0..3).rev() {
        // ReLU: derivative 1 where the activation is positive, 0 otherwise (including at 0).
        for (gv, a) in grad.iter_mut().zip(&cache.hidden[layer]) {
            if *a <= 0.0 {
                *gv = 0.0;
            }
        }
        let input: &[f64] = if layer == 0 {
            &cache.input
        } else {
            &cache.hidden[layer - 1]
        };
        grad = net.backbone[layer].backward(input, &grad, &mut grads.backbone[layer]);
    }
    Ok(grad)
}

/// Forward over many inputs.
pub fn mlp_forward_batch(
    net: &DeformationNet,
    inputs: &[Vec<f64>],
) -> Result<Vec<(Residuals, MlpCache)>> {
    inputs.par_iter().map(|h| mlp_forward(net, h)).collect()
}

/// Backward over many (cache, grad) pairs. Parameter gradients are summed
/// per fixed-size chunk, then chunks are summed in order.
pub fn mlp_backward_batch(
    net: &DeformationNet,
    caches: &[MlpCache],
    grad_residuals: &[Residuals],
) -> Result<(NetGrads, Vec<Vec<f64>>)> {
    let chunks: Vec<Result<(NetGrads, Vec<Vec<f64>>)>> = caches
        .par_chunks(CHUNK)
        .zip(grad_residuals.par_chunks(CHUNK))
        .map(|(cs, gs)| {
            let mut grads = NetGrads::zeros_like(net);
            let mut gh = Vec::with_capacity(cs.len());
            for (c, g) in cs.iter().zip(gs) {
                gh.push(mlp_backward(net, c, g, &mut grads)?);
            }
            Ok((grads, gh))
        })
        .collect();
    let mut total = NetGrads::zeros_like(net);
    let mut grad_h = Vec::with_capacity(caches.len());
    for chunk in chunks {
        let (g, gh) = chunk?;
        total.add_assign(&g);
        grad_h.extend(gh);
    }
    Ok((total, grad_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn layout() -> InputLayout {
        InputLayout::default()
    }

    #[test]
    fn zero_net_gives_zero_residuals() {
        let mut net = init_net(0, layout(), InitScheme::FanInZeroHeads);
        for d in net.layers_mut() {
            d.weight.iter_mut().for_each(|w| *w = 0.0);
            d.bias.iter_mut().for_each(|w| *w = 0.0);
        }
        let h: Vec<f64> = (0..28).map(|i| i as f64).collect();
        let (r, _) = mlp_forward(&net, &h).unwrap();
        assert_eq!(r, Residuals::default());
    }

    #[test]
    fn hand_traced_first_weight() {
        let mut net = init_net(0, layout(), InitScheme::FanInZeroHeads);
        for d in net.layers_mut() {
            d.weight.iter_mut().for_each(|w| *w = 0.0);
            d.bias.iter_mut().for_each(|w| *w = 0.0);
        }
        net.backbone[0].weight[0] = 1.0;
        let mut h = vec![0.0; 28];
        h[0] = 1.0;
        let (r, cache) = mlp_forward(&net, &h).unwrap();
        let mut want = vec![0.0; HIDDEN];
        want[0] = 1.0;
        assert_eq!(cache.hidden[0], want);
        assert_eq!(r, Residuals::default());
    }

    #[test]
    fn fresh_net_has_zero_residuals_and_is_deterministic() {
        let a = init_net(0, layout(), InitScheme::FanInZeroHeads);
        let b = init_net(0, layout(), InitScheme::FanInZeroHeads);
        let c = init_net(1, layout(), InitScheme::FanInZeroHeads);
        assert_eq!(a, b);
        assert_ne!(a.backbone[0].weight, c.backbone[0].weight);
        let h: Vec<f64> = (0..28).map(|i| (i as f64).sin() * 5.0).collect();
        let (r, _) = mlp_forward(&a, &h).unwrap();
        assert_eq!(r, Residuals::default());
        for head in &a.heads {
            assert!(head.weight.iter().chain(&head.bias).all(|w| *w == 0.0));
        }
    }

    #[test]
    fn wrong_input_dim_is_rejected() {
        let net = init_net(0, layout(), InitScheme::FanInZeroHeads);
        assert!(matches!(mlp_forward(&net, &[0.0; 5]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = init_net(3, layout(), InitScheme::FanInZeroHeads);
        let h = vec![0.3; 28];
        let (_, cache) = mlp_forward(&net, &h).unwrap();
        let mut g = NetGrads::zeros_like(&net);
        let gh = mlp_backward(&net, &cache, &Residuals::default(), &mut g).unwrap();
        assert!(gh.iter().all(|x| *x == 0.0));
        assert!(g.flat().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn affine_head_input_gradient_is_transpose_product() {
        // With a single live path the input gradient is Wᵀ·grad_out.
        let mut net = init_net(0, layout(), InitScheme::FanInZeroHeads);
        for d in net.layers_mut() {
            d.weight.iter_mut().for_each(|w| *w = 0.0);
            d.bias.iter_mut().for_each(|w| *w = 0.0);
        }
        net.backbone[0].weight[0] = 2.0; // h0 -> unit 0
        net.backbone[1].weight[0] = 1.0; // unit 0 -> unit 0
        net.backbone[2].weight[0] = 1.0;
        net.heads[0].weight[0] = 3.0; // unit 0 -> dmu.x
        let mut h = vec![0.0; 28];
        h[0] = 1.0;
        let (r, cache) = mlp_forward(&net, &h).unwrap();
        assert_eq!(r.dmu[0], 6.0);
        let mut g = NetGrads::zeros_like(&net);
        let grad = Residuals {
            dmu: [1.0, 0.0, 0.0],
            ..Default::default()
        };
        let gh = mlp_backward(&net, &cache, &grad, &mut g).unwrap();
        assert_eq!(gh[0], 6.0);
        assert!(gh[1..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn stale_cache_is_detected() {
        let mut net = init_net(0, layout(), InitScheme::FanInZeroHeads);
        let (_, cache) = mlp_forward(&net, &[0.1; 28]).unwrap();
        let p = net.flat_params();
        net.set_flat_params(&p);
        let mut g = NetGrads::zeros_like(&net);
        assert!(matches!(
            mlp_backward(&net, &cache, &Residuals::default(), &mut g),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn batch_backward_equals_sequential_sum() {
        let mut net = init_net(5, layout(), InitScheme::FanInZeroHeads);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for head in net.heads.iter_mut() {
            head.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.2..0.2));
        }
        let inputs: Vec<Vec<f64>> = (0..150)
            .map(|_| (0..28).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let grads: Vec<Residuals> = (0..150)
            .map(|_| Residuals::from_slice(&(0..11).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let fwd = mlp_forward_batch(&net, &inputs).unwrap();
        let caches: Vec<MlpCache> = fwd.into_iter().map(|(_, c)| c).collect();
        let (batched, gh) = mlp_backward_batch(&net, &caches, &grads).unwrap();
        let mut seq = NetGrads::zeros_like(&net);
        for (i, c) in caches.iter().enumerate() {
            let mut local = NetGrads::zeros_like(&net);
            let g = mlp_backward(&net, c, &grads[i], &mut local).unwrap();
            assert_eq!(g, gh[i]);
            seq.add_assign(&local);
        }
        for (a, b) in batched.flat().iter().zip(seq.flat()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn arrays_round_trip() {
        let net = init_net(2, layout(), InitScheme::FanInZeroHeads);
        let back = DeformationNet::from_arrays(&net.to_arrays()).unwrap();
        assert_eq!(back, net);
    }
}
