//! The trajectory network: a shared per-vehicle MLP encoder followed by
//! message-passing aggregation layers.
//!
//! Encoder layer `l` maps `x -> relu(W x + b)`. Aggregation layer `l` maps
//! vehicle `k` to `W_s x_k + W_o * sum_{p != k} x_p`, with ReLU on every
//! aggregation layer except the last. The last layer emits `2T` values,
//! read row-major as `T` normalised `(x, y)` points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{assemble_input, Scene, Trajectory, Vec2};

pub const INPUT_DIM: usize = 6;

/// How the neighbour term of an aggregation layer is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Unnormalised sum over the other vehicles.
    #[default]
    Sum,
    /// Sum divided by `N - 1`.
    Mean,
    /// Neighbour term forced to zero (no information aggregation).
    Disabled,
}

/// Frame of the last layer's `2T` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    /// Normalised positions in the intersection frame.
    Absolute,
    /// Normalised displacements from the vehicle's current position; the
    /// decoded points are still absolute.
    #[default]
    Offset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Widths of the `L` encoder layers.
    pub encoder_widths: Vec<usize>,
    /// Widths of the hidden aggregation layers; the output layer (`2T`) is
    /// appended automatically.
    pub aggregator_widths: Vec<usize>,
    pub horizon: usize,
    /// Seconds between predicted points.
    pub dt: f64,
    /// Position normalisation, metres.
    pub scale: f64,
    pub aggregation: AggregationMode,
    /// Scale of the initial `W_o` relative to `W_s`. Zero starts from a
    /// network that ignores the other vehicles; `W_o` still receives
    /// gradients and is learned.
    pub neighbour_init_gain: f64,
    pub output: OutputMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![64, 64],
            aggregator_widths: vec![64, 64],
            horizon: 30,
            dt: 0.2,
            scale: crate::scene::DEFAULT_SCALE,
            aggregation: AggregationMode::Sum,
            neighbour_init_gain: 0.0,
            output: OutputMode::Offset,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        if self.encoder_widths.iter().chain(&self.aggregator_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(self.neighbour_init_gain >= 0.0) {
            return Err(Error::Config("neighbour_init_gain must be >= 0".into()));
        }
        if !(self.scale > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Config("scale and dt must be positive".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.horizon
    }

    fn encoder_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = INPUT_DIM;
        for &w in &self.encoder_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }

    fn aggregator_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = *self.encoder_widths.last().unwrap_or(&INPUT_DIM);
        for &w in self.aggregator_widths.iter().chain(std::iter::once(&self.output_dim())) {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`, applied to the vehicle itself.
    pub w_self: Vec<f64>,
    /// Row-major `out_dim x in_dim`, applied to the neighbour sum.
    pub w_other: Vec<f64>,
}

impl AggLayer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w_self: vec![0.0; in_dim * out_dim],
            w_other: vec![0.0; in_dim * out_dim],
        }
    }
}

/// Every trainable array of the network. Also used for gradients and
/// optimiser moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub encoder: Vec<DenseLayer>,
    pub aggregator: Vec<AggLayer>,
}

impl ParamSet {
    pub fn zeros(cfg: &NetConfig) -> Self {
        Self {
            encoder: cfg.encoder_dims().into_iter().map(|(i, o)| DenseLayer::zeros(i, o)).collect(),
            aggregator: cfg.aggregator_dims().into_iter().map(|(i, o)| AggLayer::zeros(i, o)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.iter().map(|l| DenseLayer::zeros(l.in_dim, l.out_dim)).collect(),
            aggregator: self.aggregator.iter().map(|l| AggLayer::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    /// Arrays in canonical order: encoder `(W, b)` per layer, then
    /// aggregator `(W_s, W_o)` per layer.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for l in &self.encoder {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        for l in &self.aggregator {
            v.push(&l.w_self);
            v.push(&l.w_other);
        }
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.encoder {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        for l in &mut self.aggregator {
            v.push(&mut l.w_self);
            v.push(&mut l.w_other);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn add_scaled(&mut self, other: &ParamSet, s: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    fn same_shape(&self, other: &ParamSet) -> bool {
        self.encoder.len() == other.encoder.len()
            && self.aggregator.len() == other.aggregator.len()
            && self
                .encoder
                .iter()
                .zip(&other.encoder)
                .all(|(a, b)| (a.in_dim, a.out_dim) == (b.in_dim, b.out_dim))
            && self
                .aggregator
                .iter()
                .zip(&other.aggregator)
                .all(|(a, b)| (a.in_dim, a.out_dim) == (b.in_dim, b.out_dim))
    }
}

/// Per-layer activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct SceneActivations {
    n: usize,
    /// Vehicle indices sorted by id: the summation order of neighbour terms.
    order: Vec<usize>,
    /// `layers[0]` holds the inputs; `layers[i]` the output of layer `i`
    /// (post-activation), each row-major `n x width`.
    layers: Vec<Vec<f64>>,
    widths: Vec<usize>,
}

impl SceneActivations {
    pub fn num_vehicles(&self) -> usize {
        self.n
    }

    /// Normalised input position of vehicle `k`.
    pub fn input(&self, k: usize) -> [f64; 2] {
        let w = self.widths[0];
        [self.layers[0][k * w], self.layers[0][k * w + 1]]
    }

    /// Normalised network output for vehicle `k`.
    pub fn output(&self, k: usize) -> &[f64] {
        let w = *self.widths.last().expect("non-empty");
        &self.layers.last().expect("non-empty")[k * w..(k + 1) * w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtpNetwork {
    config: NetConfig,
    params: ParamSet,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += W^T g` for a row-major `rows x cols` matrix.
#[inline]
fn matvec_t_acc(w: &[f64], cols: usize, g: &[f64], out: &mut [f64]) {
    for (r, &gr) in g.iter().enumerate() {
        if gr != 0.0 {
            axpy(gr, &w[r * cols..(r + 1) * cols], out);
        }
    }
}

/// `dW += g x^T`.
#[inline]
fn outer_acc(dw: &mut [f64], cols: usize, g: &[f64], x: &[f64]) {
    for (r, &gr) in g.iter().enumerate() {
        if gr != 0.0 {
            axpy(gr, x, &mut dw[r * cols..(r + 1) * cols]);
        }
    }
}

impl MtpNetwork {
    /// Fan-in scaled uniform weights, zero biases. Deterministic in `seed`.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::zeros(&config);
        let n_agg = params.aggregator.len();
        for l in &mut params.encoder {
            let b = (6.0 / l.in_dim as f64).sqrt();
            l.weight.iter_mut().for_each(|w| *w = rng.random_range(-b..b));
        }
        for (i, l) in params.aggregator.iter_mut().enumerate() {
            let gain = if i + 1 == n_agg { 3.0 } else { 6.0 };
            let b = (gain / l.in_dim as f64).sqrt();
            l.w_self.iter_mut().for_each(|w| *w = rng.random_range(-b..b));
            let g = config.neighbour_init_gain;
            l.w_other.iter_mut().for_each(|w| *w = g * rng.random_range(-b..b));
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: NetConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        if !ParamSet::zeros(&config).same_shape(&params) {
            return Err(Error::Shape("parameters do not match the architecture".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn set_aggregation(&mut self, mode: AggregationMode) {
        self.config.aggregation = mode;
    }

    fn check_shapes(&self) -> Result<()> {
        if self.params.encoder.first().map(|l| l.in_dim) != Some(INPUT_DIM) {
            return Err(Error::Shape(format!("network input dimension is not {INPUT_DIM}")));
        }
        if self.params.aggregator.last().map(|l| l.out_dim) != Some(self.config.output_dim()) {
            return Err(Error::Shape("network output dimension is not 2T".into()));
        }
        Ok(())
    }

    /// Runs the network on raw inputs. `ids` fixes the neighbour summation order.
    pub fn forward_inputs(&self, inputs: &[[f64; INPUT_DIM]], ids: &[u64]) -> Result<SceneActivations> {
        self.check_shapes()?;
        let n = inputs.len();
        if n == 0 || ids.len() != n {
            return Err(Error::Shape(format!("{n} inputs for {} ids", ids.len())));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| ids[i]);

        let mut layers = Vec::with_capacity(1 + self.params.encoder.len() + self.params.aggregator.len());
        let mut widths = vec![INPUT_DIM];
        layers.push(inputs.iter().flatten().copied().collect::<Vec<f64>>());

        for l in &self.params.encoder {
            let x = layers.last().expect("inputs pushed");
            let mut y = vec![0.0; n * l.out_dim];
            for k in 0..n {
                let xk = &x[k * l.in_dim..(k + 1) * l.in_dim];
                let yk = &mut y[k * l.out_dim..(k + 1) * l.out_dim];
                for (r, out) in yk.iter_mut().enumerate() {
                    let v = dot(&l.weight[r * l.in_dim..(r + 1) * l.in_dim], xk) + l.bias[r];
                    *out = v.max(0.0);
                }
            }
            widths.push(l.out_dim);
            layers.push(y);
        }

        let n_agg = self.params.aggregator.len();
        let mut nsum = vec![0.0; 0];
        for (li, l) in self.params.aggregator.iter().enumerate() {
            let last = li + 1 == n_agg;
            let x = layers.last().expect("encoder output");
            let mut y = vec![0.0; n * l.out_dim];
            for k in 0..n {
                let xk = &x[k * l.in_dim..(k + 1) * l.in_dim];
                let has_neighbours = self.neighbour_sum(x, l.in_dim, &order, k, &mut nsum);
                let yk = &mut y[k * l.out_dim..(k + 1) * l.out_dim];
                for (r, out) in yk.iter_mut().enumerate() {
                    let row = r * l.in_dim..(r + 1) * l.in_dim;
                    let mut v = dot(&l.w_self[row.clone()], xk);
                    if has_neighbours {
                        v += dot(&l.w_other[row], &nsum);
                    }
                    *out = if last { v } else { v.max(0.0) };
                }
            }
            widths.push(l.out_dim);
            layers.push(y);
        }
        Ok(SceneActivations {
            n,
            order,
            layers,
            widths,
        })
    }

    /// Fills `out` with the neighbour term for vehicle `k`, summed in id
    /// order. Returns false when the term is identically zero.
    fn neighbour_sum(&self, x: &[f64], dim: usize, order: &[usize], k: usize, out: &mut Vec<f64>) -> bool {
        let n = order.len();
        if n < 2 || self.config.aggregation == AggregationMode::Disabled {
            return false;
        }
        out.clear();
        out.resize(dim, 0.0);
        for &p in order {
            if p != k {
                for (o, v) in out.iter_mut().zip(&x[p * dim..(p + 1) * dim]) {
                    *o += v;
                }
            }
        }
        if self.config.aggregation == AggregationMode::Mean {
            let s = 1.0 / (n - 1) as f64;
            out.iter_mut().for_each(|o| *o *= s);
        }
        true
    }

    fn scene_inputs(&self, scene: &Scene) -> (Vec<[f64; INPUT_DIM]>, Vec<u64>) {
        let inputs = scene
            .vehicles()
            .iter()
            .map(|v| assemble_input(v, self.config.scale))
            .collect();
        let ids = scene.vehicles().iter().map(|v| v.id).collect();
        (inputs, ids)
    }

    fn decode(&self, acts: &SceneActivations) -> Result<Vec<Trajectory>> {
        let t = self.config.horizon;
        let s = self.config.scale;
        (0..acts.n)
            .map(|k| {
                let o = acts.output(k);
                let base = match self.config.output {
                    OutputMode::Absolute => [0.0, 0.0],
                    OutputMode::Offset => acts.input(k),
                };
                let pts = (0..t)
                    .map(|i| [(o[2 * i] + base[0]) * s, (o[2 * i + 1] + base[1]) * s])
                    .collect();
                Trajectory::new(pts, self.config.dt)
            })
            .collect()
    }

    /// Predicted trajectories (metres) for every vehicle of the scene, in
    /// scene order, plus the activations needed by [`MtpNetwork::backward`].
    pub fn forward(&self, scene: &Scene) -> Result<(Vec<Trajectory>, SceneActivations)> {
        let (inputs, ids) = self.scene_inputs(scene);
        let acts = self.forward_inputs(&inputs, &ids)?;
        Ok((self.decode(&acts)?, acts))
    }

    pub fn predict(&self, scene: &Scene) -> Result<Vec<Trajectory>> {
        Ok(self.forward(scene)?.0)
    }

    /// Exact gradient of a scalar loss with respect to every parameter, given
    /// the loss gradient with respect to the predicted points (metres).
    pub fn backward(&self, acts: &SceneActivations, grad_points: &[Vec<Vec2>]) -> Result<ParamSet> {
        self.check_shapes()?;
        let n = acts.n;
        let n_enc = self.params.encoder.len();
        let n_layers = n_enc + self.params.aggregator.len();
        if acts.layers.len() != n_layers + 1 || grad_points.len() != n {
            return Err(Error::Shape("activations do not match this network".into()));
        }
        for (i, l) in self.params.encoder.iter().enumerate() {
            if acts.widths[i + 1] != l.out_dim {
                return Err(Error::Shape("encoder activation width mismatch".into()));
            }
        }
        for (i, l) in self.params.aggregator.iter().enumerate() {
            if acts.widths[n_enc + i + 1] != l.out_dim {
                return Err(Error::Shape("aggregator activation width mismatch".into()));
            }
        }
        let t = self.config.horizon;
        let scale = self.config.scale;
        let mut g = vec![0.0; n * 2 * t];
        for (k, gp) in grad_points.iter().enumerate() {
            if gp.len() != t {
                return Err(Error::Shape(format!("gradient has {} points, horizon is {t}", gp.len())));
            }
            for (i, p) in gp.iter().enumerate() {
                g[k * 2 * t + 2 * i] = p[0] * scale;
                g[k * 2 * t + 2 * i + 1] = p[1] * scale;
            }
        }

        let mut grads = self.params.zeros_like();
        let n_agg = self.params.aggregator.len();
        let mut nsum = Vec::new();
        for li in (0..n_agg).rev() {
            let l = &self.params.aggregator[li];
            let gl = &mut grads.aggregator[li];
            let y = &acts.layers[n_enc + li + 1];
            let x = &acts.layers[n_enc + li];
            if li + 1 != n_agg {
                for (gi, yi) in g.iter_mut().zip(y) {
                    if *yi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            let mut gx = vec![0.0; n * l.in_dim];
            let mut gsum = vec![0.0; l.in_dim];
            for k in 0..n {
                let gk = &g[k * l.out_dim..(k + 1) * l.out_dim];
                let xk = &x[k * l.in_dim..(k + 1) * l.in_dim];
                outer_acc(&mut gl.w_self, l.in_dim, gk, xk);
                matvec_t_acc(&l.w_self, l.in_dim, gk, &mut gx[k * l.in_dim..(k + 1) * l.in_dim]);
                if self.neighbour_sum(x, l.in_dim, &acts.order, k, &mut nsum) {
                    outer_acc(&mut gl.w_other, l.in_dim, gk, &nsum);
                    gsum.iter_mut().for_each(|v| *v = 0.0);
                    matvec_t_acc(&l.w_other, l.in_dim, gk, &mut gsum);
                    if self.config.aggregation == AggregationMode::Mean {
                        let s = 1.0 / (n - 1) as f64;
                        gsum.iter_mut().for_each(|v| *v *= s);
                    }
                    for &p in &acts.order {
                        if p != k {
                            axpy(1.0, &gsum, &mut gx[p * l.in_dim..(p + 1) * l.in_dim]);
                        }
                    }
                }
            }
            g = gx;
        }
        for li in (0..n_enc).rev() {
            let l = &self.params.encoder[li];
            let gl = &mut grads.encoder[li];
            let y = &acts.layers[li + 1];
            let x = &acts.layers[li];
            for (gi, yi) in g.iter_mut().zip(y) {
                if *yi <= 0.0 {
                    *gi = 0.0;
                }
            }
            let mut gx = vec![0.0; if li > 0 { n * l.in_dim } else { 0 }];
            for k in 0..n {
                let gk = &g[k * l.out_dim..(k + 1) * l.out_dim];
                let xk = &x[k * l.in_dim..(k + 1) * l.in_dim];
                outer_acc(&mut gl.weight, l.in_dim, gk, xk);
                axpy(1.0, gk, &mut gl.bias);
                if li > 0 {
                    matvec_t_acc(&l.weight, l.in_dim, gk, &mut gx[k * l.in_dim..(k + 1) * l.in_dim]);
                }
            }
            g = gx;
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Intention, VehicleSnapshot};

    fn scene(n: usize) -> Scene {
        let v: Vec<VehicleSnapshot> = (0..n)
            .map(|i| {
                VehicleSnapshot::new(
                    10 + i as u64,
                    [5.0 * i as f64 - 7.0, 3.0 - 4.0 * i as f64],
                    0.4 * i as f64 - 1.0,
                    Intention::ORDER[i % 3],
                )
            })
            .collect();
        Scene::new(v, None).unwrap()
    }

    #[test]
    fn shapes_follow_config() {
        let net = MtpNetwork::init(NetConfig::default(), 1).unwrap();
        let p = net.params();
        assert_eq!((p.encoder[0].out_dim, p.encoder[0].in_dim), (64, 6));
        assert_eq!((p.encoder[1].out_dim, p.encoder[1].in_dim), (64, 64));
        assert_eq!(p.aggregator.len(), 3);
        let last = p.aggregator.last().unwrap();
        assert_eq!((last.out_dim, last.in_dim), (60, 64));
        assert_eq!(last.w_self.len(), last.w_other.len());
        assert!(p.encoder.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_is_deterministic() {
        let a = MtpNetwork::init(NetConfig::default(), 7).unwrap();
        let b = MtpNetwork::init(NetConfig::default(), 7).unwrap();
        let c = MtpNetwork::init(NetConfig::default(), 8).unwrap();
        assert_eq!(a.params().flatten(), b.params().flatten());
        assert_ne!(a.params().flatten(), c.params().flatten());
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = NetConfig {
            encoder_widths: vec![8, 0],
            ..NetConfig::default()
        };
        assert!(MtpNetwork::init(cfg, 0).is_err());
        let cfg = NetConfig {
            encoder_widths: vec![],
            ..NetConfig::default()
        };
        assert!(MtpNetwork::init(cfg, 0).is_err());
    }

    #[test]
    fn zero_weights_predict_the_centre() {
        let cfg = NetConfig {
            output: OutputMode::Absolute,
            ..NetConfig::default()
        };
        let mut net = MtpNetwork::init(cfg, 3).unwrap();
        for s in net.params_mut().slices_mut() {
            s.iter_mut().for_each(|x| *x = 0.0);
        }
        let pred = net.predict(&scene(3)).unwrap();
        assert!(pred.iter().all(|t| t.points().iter().all(|p| *p == [0.0, 0.0])));
    }

    #[test]
    fn zero_weights_in_offset_mode_predict_standing_still() {
        let mut net = MtpNetwork::init(NetConfig::default(), 3).unwrap();
        for s in net.params_mut().slices_mut() {
            s.iter_mut().for_each(|x| *x = 0.0);
        }
        let sc = scene(3);
        let pred = net.predict(&sc).unwrap();
        for (t, v) in pred.iter().zip(sc.vehicles()) {
            for p in t.points() {
                assert!((p[0] - v.position[0]).abs() < 1e-12 && (p[1] - v.position[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_vehicle_ignores_w_other() {
        let mut net = MtpNetwork::init(NetConfig::default(), 3).unwrap();
        let before = net.predict(&scene(1)).unwrap();
        for l in &mut net.params_mut().aggregator {
            l.w_other.iter_mut().for_each(|w| *w = 123.0);
        }
        assert_eq!(before, net.predict(&scene(1)).unwrap());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let net = MtpNetwork::init(NetConfig::default(), 3).unwrap();
        let (_, acts) = net.forward(&scene(3)).unwrap();
        let g = net.backward(&acts, &vec![vec![[0.0, 0.0]; 30]; 3]).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn mismatched_activations_are_rejected() {
        let net = MtpNetwork::init(NetConfig::default(), 3).unwrap();
        let small = MtpNetwork::init(
            NetConfig {
                encoder_widths: vec![4],
                ..NetConfig::default()
            },
            3,
        )
        .unwrap();
        let (_, acts) = small.forward(&scene(2)).unwrap();
        assert!(net.backward(&acts, &vec![vec![[0.0, 0.0]; 30]; 2]).is_err());
        let (_, acts) = net.forward(&scene(2)).unwrap();
        assert!(net.backward(&acts, &vec![vec![[0.0, 0.0]; 30]; 3]).is_err());
    }

    #[test]
    fn disabled_aggregation_isolates_vehicles() {
        let mut net = MtpNetwork::init(NetConfig::default(), 5).unwrap();
        net.set_aggregation(AggregationMode::Disabled);
        let s = scene(3);
        let a = net.predict(&s).unwrap();
        let mut v = s.vehicles().to_vec();
        v[1].position = [20.0, 20.0];
        let b = net.predict(&Scene::new(v, None).unwrap()).unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[2], b[2]);
        assert_ne!(a[1], b[1]);
    }
}
