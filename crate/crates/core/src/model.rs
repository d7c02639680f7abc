//! Client embedding networks, the server head and every gradient kernel the
//! protocol needs, written out by hand.
//!
//! A client embedding is a stack of dense layers `u_l = act_l(w_l u_{l-1} + b_l + z_l)`
//! where `z_l` is optional perturbation noise: uniform on `[-sqrt(3) c_l, sqrt(3) c_l]`
//! for hidden layers and Gaussian with std `c` at the output layer. The forward
//! pass records pre-activations and realized noise on a [`ForwardTape`] so the
//! backward pass differentiates through exactly the sample that was uploaded.
//!
//! The server head is linear over the concatenated embeddings plus a bias and
//! feeds either a binary logistic loss (labels in {-1, +1}) or a squared loss.

use crate::error::{data_err, model_err, protocol_err, Result};
use crate::numerics::{axpy, dot, sample, DistSpec, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at a pre-activation value. The relu kink at 0 gets 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// Global Lipschitz constant.
    pub fn lipschitz(self) -> f64 {
        1.0
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" | "linear" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out x in`.
    pub w: Matrix,
    pub b: Vec<f64>,
    /// Whether `b` is a trainable parameter. A bias-free layer keeps `b` at zero.
    pub bias: bool,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize, bias: bool, activation: Activation) -> Self {
        DenseLayer {
            w: Matrix::zeros(output, input),
            b: vec![0.0; output],
            bias,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn num_params(&self) -> usize {
        self.w.rows() * self.w.cols() + if self.bias { self.b.len() } else { 0 }
    }
}

/// Parameters `theta_m` of one client's embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub layers: Vec<DenseLayer>,
}

impl EmbeddingParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(model_err!("an embedding needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(model_err!(
                    "layer shapes do not chain: {} outputs feed a layer expecting {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                ));
            }
        }
        if layers.iter().any(|l| l.b.len() != l.output_dim()) {
            return Err(model_err!("bias length must equal layer width"));
        }
        Ok(EmbeddingParams { layers })
    }

    /// Linear embedding `x -> W x (+ b)` with identity activation.
    pub fn linear(input: usize, output: usize, bias: bool) -> Self {
        EmbeddingParams {
            layers: vec![DenseLayer::zeros(input, output, bias, Activation::Identity)],
        }
    }

    /// Multi-layer perceptron with `hidden` widths.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: Activation,
        output_activation: Activation,
        bias: bool,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden {
            layers.push(DenseLayer::zeros(prev, h, bias, hidden_activation));
            prev = h;
        }
        layers.push(DenseLayer::zeros(prev, output, bias, output_activation));
        EmbeddingParams { layers }
    }

    /// Gaussian weights with std `1/sqrt(fan_in)`, zero biases.
    pub fn init_random(&mut self, rng: &mut Rng) {
        for layer in &mut self.layers {
            let scale = 1.0 / (layer.input_dim() as f64).sqrt();
            for v in layer.w.as_mut_slice() {
                *v = scale * rng.standard_normal();
            }
            layer.b.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Width `d_l` of every layer, first hidden layer to output.
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(DenseLayer::output_dim).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    /// Trainable parameters laid out layer by layer, weights row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.w.as_slice());
            if layer.bias {
                out.extend_from_slice(&layer.b);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(model_err!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            ));
        }
        let mut at = 0;
        for layer in &mut self.layers {
            let nw = layer.w.rows() * layer.w.cols();
            layer.w.as_mut_slice().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            if layer.bias {
                let nb = layer.b.len();
                layer.b.copy_from_slice(&flat[at..at + nb]);
                at += nb;
            }
        }
        Ok(())
    }

    /// Noise-free forward pass.
    pub fn forward_clean(&self, x: &[f64]) -> Vec<f64> {
        let mut u = x.to_vec();
        for layer in &self.layers {
            let mut pre = layer.w.matvec(&u);
            for (p, b) in pre.iter_mut().zip(&layer.b) {
                *p += b;
            }
            u = pre.into_iter().map(|v| layer.activation.apply(v)).collect();
        }
        u
    }
}

/// Noise levels for one embedding: `hidden_stds[l]` for hidden layer `l`
/// (uniform law with that std) and `output_std` for the Gaussian output noise.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub hidden_stds: Vec<f64>,
    pub output_std: f64,
}

impl PerturbationSpec {
    pub fn none(depth: usize) -> Self {
        PerturbationSpec {
            hidden_stds: vec![0.0; depth.saturating_sub(1)],
            output_std: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.output_std == 0.0 && self.hidden_stds.iter().all(|&c| c == 0.0)
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.hidden_stds.len() + 1 != depth {
            return Err(model_err!(
                "perturbation lists {} hidden levels for an embedding of depth {}",
                self.hidden_stds.len(),
                depth
            ));
        }
        if self
            .hidden_stds
            .iter()
            .chain(std::iter::once(&self.output_std))
            .any(|c| !c.is_finite() || *c < 0.0)
        {
            return Err(model_err!("noise levels must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Noise law at layer `l` (0-based) of a depth-`depth` embedding, `None` when silent.
    fn law(&self, l: usize, depth: usize, width: usize) -> Option<DistSpec> {
        if l + 1 == depth {
            (self.output_std > 0.0).then(|| DistSpec::gaussian(0.0, self.output_std, width))
        } else {
            let c = self.hidden_stds[l];
            (c > 0.0).then(|| DistSpec::uniform_symmetric(3f64.sqrt() * c, width))
        }
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTape {
    pub input: Vec<f64>,
    /// Pre-activations including the realized noise.
    pub pre: Vec<Vec<f64>>,
    /// Layer outputs `u_1..u_L`.
    pub post: Vec<Vec<f64>>,
    /// Realized noise per layer (zeros where the layer is silent).
    pub noise: Vec<Vec<f64>>,
}

impl ForwardTape {
    pub fn output(&self) -> &[f64] {
        &self.post[self.post.len() - 1]
    }
}

/// Perturbed forward pass. Silent layers draw nothing from `rng`.
pub fn embed_forward(
    params: &EmbeddingParams,
    x: &[f64],
    pert: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<(Vec<f64>, ForwardTape)> {
    if x.len() != params.input_dim() {
        return Err(model_err!(
            "input has {} features, embedding expects {}",
            x.len(),
            params.input_dim()
        ));
    }
    pert.validate(params.depth())?;
    let depth = params.depth();
    let mut pre_all = Vec::with_capacity(depth);
    let mut post_all: Vec<Vec<f64>> = Vec::with_capacity(depth);
    let mut noise_all = Vec::with_capacity(depth);
    for (l, layer) in params.layers.iter().enumerate() {
        let u_prev: &[f64] = if l == 0 { x } else { &post_all[l - 1] };
        let mut pre = layer.w.matvec(u_prev);
        for (p, b) in pre.iter_mut().zip(&layer.b) {
            *p += b;
        }
        let noise = match pert.law(l, depth, layer.output_dim()) {
            Some(spec) => {
                let z = sample(&spec, rng)?;
                for (p, zi) in pre.iter_mut().zip(&z) {
                    *p += zi;
                }
                z
            }
            None => vec![0.0; layer.output_dim()],
        };
        let post: Vec<f64> = pre.iter().map(|&v| layer.activation.apply(v)).collect();
        pre_all.push(pre);
        post_all.push(post);
        noise_all.push(noise);
    }
    let h = post_all[depth - 1].clone();
    Ok((
        h,
        ForwardTape {
            input: x.to_vec(),
            pre: pre_all,
            post: post_all,
            noise: noise_all,
        },
    ))
}

/// Per-layer gradient with the same shapes as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrad {
    pub w: Vec<Matrix>,
    pub b: Vec<Vec<f64>>,
}

impl EmbeddingGrad {
    /// Flattened in [`EmbeddingParams::flatten`] order (bias entries only for
    /// layers that train a bias).
    pub fn to_flat(&self, params: &EmbeddingParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(params.num_params());
        for (l, layer) in params.layers.iter().enumerate() {
            out.extend_from_slice(self.w[l].as_slice());
            if layer.bias {
                out.extend_from_slice(&self.b[l]);
            }
        }
        out
    }
}

fn check_tape(params: &EmbeddingParams, tape: &ForwardTape) -> Result<()> {
    let ok = tape.pre.len() == params.depth()
        && tape.input.len() == params.input_dim()
        && params
            .layers
            .iter()
            .zip(&tape.pre)
            .all(|(l, p)| p.len() == l.output_dim());
    if ok {
        Ok(())
    } else {
        Err(model_err!("forward tape does not match the embedding parameters"))
    }
}

/// Accumulates `scale * d(g_h . h)/d theta` into `out` (flat layout).
pub(crate) fn backprop_accumulate(
    params: &EmbeddingParams,
    tape: &ForwardTape,
    g_h: &[f64],
    scale: f64,
    out: &mut [f64],
) {
    let depth = params.depth();
    // Offsets of each layer's block in the flat layout.
    let mut offsets = Vec::with_capacity(depth);
    let mut at = 0;
    for layer in &params.layers {
        offsets.push(at);
        at += layer.num_params();
    }
    let mut delta: Vec<f64> = g_h
        .iter()
        .zip(&tape.pre[depth - 1])
        .map(|(g, &p)| g * params.layers[depth - 1].activation.derivative(p))
        .collect();
    for l in (0..depth).rev() {
        let layer = &params.layers[l];
        let u_prev: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
        let cols = layer.input_dim();
        let base = offsets[l];
        for (r, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                axpy(scale * d, u_prev, &mut out[base + r * cols..base + (r + 1) * cols]);
            }
        }
        if layer.bias {
            let bb = base + layer.output_dim() * cols;
            axpy(scale, &delta, &mut out[bb..bb + layer.output_dim()]);
        }
        if l > 0 {
            let g_prev = layer.w.matvec_t(&delta);
            let act = params.layers[l - 1].activation;
            delta = g_prev
                .iter()
                .zip(&tape.pre[l - 1])
                .map(|(g, &p)| g * act.derivative(p))
                .collect();
        }
    }
}

/// Chain rule through a recorded forward pass: gradient of `g_h . h` with the
/// recorded noise held fixed.
pub fn client_backprop(params: &EmbeddingParams, tape: &ForwardTape, g_h: &[f64]) -> Result<EmbeddingGrad> {
    check_tape(params, tape)?;
    if g_h.len() != params.output_dim() {
        return Err(model_err!(
            "upstream gradient has {} entries, embedding width is {}",
            g_h.len(),
            params.output_dim()
        ));
    }
    // Run the accumulation on a layout that includes every bias.
    let mut full = params.clone();
    full.layers.iter_mut().for_each(|l| l.bias = true);
    let mut flat = vec![0.0; full.num_params()];
    backprop_accumulate(&full, tape, g_h, 1.0, &mut flat);
    let mut w = Vec::with_capacity(params.depth());
    let mut b = Vec::with_capacity(params.depth());
    let mut at = 0;
    for layer in &full.layers {
        let nw = layer.w.rows() * layer.w.cols();
        w.push(Matrix::from_vec(layer.w.rows(), layer.w.cols(), flat[at..at + nw].to_vec())?);
        at += nw;
        b.push(flat[at..at + layer.output_dim()].to_vec());
        at += layer.output_dim();
    }
    // Frozen biases carry no gradient.
    for (bl, layer) in b.iter_mut().zip(&params.layers) {
        if !layer.bias {
            bl.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(EmbeddingGrad { w, b })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `log(1 + exp(-y z))` with `y` in {-1, +1}.
    BinaryLogistic,
    /// `(z - y)^2 / 2`.
    Squared,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "logistic" | "binary_logistic" => Some(LossKind::BinaryLogistic),
            "squared" | "regression" => Some(LossKind::Squared),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::BinaryLogistic => "logistic",
            LossKind::Squared => "squared",
        }
    }

    pub(crate) fn check_label(self, y: f64) -> Result<()> {
        match self {
            LossKind::BinaryLogistic if y != 1.0 && y != -1.0 => {
                Err(data_err!("logistic loss needs labels in {{-1, +1}}, got {y}"))
            }
            _ if !y.is_finite() => Err(data_err!("label {y} is not finite")),
            _ => Ok(()),
        }
    }

    /// Loss value at logit `z`.
    pub fn value(self, z: f64, y: f64) -> f64 {
        match self {
            LossKind::BinaryLogistic => softplus(-y * z),
            LossKind::Squared => 0.5 * (z - y) * (z - y),
        }
    }

    /// `d loss / d z`.
    pub fn dz(self, z: f64, y: f64) -> f64 {
        match self {
            LossKind::BinaryLogistic => -y * sigmoid(-y * z),
            LossKind::Squared => z - y,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Linear head over the concatenated client embeddings; the last weight is the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerHead {
    pub weights: Vec<f64>,
    pub trainable: bool,
    pub loss: LossKind,
    widths: Vec<usize>,
}

impl ServerHead {
    pub fn zeros(widths: &[usize], loss: LossKind, trainable: bool) -> Self {
        let total: usize = widths.iter().sum();
        ServerHead {
            weights: vec![0.0; total + 1],
            trainable,
            loss,
            widths: widths.to_vec(),
        }
    }

    pub fn with_weights(widths: &[usize], weights: Vec<f64>, loss: LossKind, trainable: bool) -> Result<Self> {
        let total: usize = widths.iter().sum();
        if weights.len() != total + 1 {
            return Err(model_err!(
                "head has {} weights, embeddings need {} + 1",
                weights.len(),
                total
            ));
        }
        Ok(ServerHead {
            weights,
            trainable,
            loss,
            widths: widths.to_vec(),
        })
    }

    pub fn client_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_clients(&self) -> usize {
        self.widths.len()
    }

    /// Offset of client `m`'s block inside the weight vector.
    pub fn block_offset(&self, m: usize) -> usize {
        self.widths[..m].iter().sum()
    }

    /// Head weights facing client `m`.
    pub fn block(&self, m: usize) -> &[f64] {
        let at = self.block_offset(m);
        &self.weights[at..at + self.widths[m]]
    }

    fn check(&self, embeddings: &[&[f64]]) -> Result<()> {
        if embeddings.len() != self.widths.len()
            || embeddings.iter().zip(&self.widths).any(|(h, &w)| h.len() != w)
        {
            return Err(model_err!("embedding widths do not match the server head"));
        }
        Ok(())
    }

    /// `z = theta_0 . [h_1; ...; h_M; 1]`.
    pub fn logit(&self, embeddings: &[&[f64]]) -> f64 {
        let mut z = self.weights[self.weights.len() - 1];
        let mut at = 0;
        for h in embeddings {
            z += dot(&self.weights[at..at + h.len()], h);
            at += h.len();
        }
        z
    }
}

pub fn loss_forward(head: &ServerHead, embeddings: &[&[f64]], y: f64) -> Result<f64> {
    head.check(embeddings)?;
    head.loss.check_label(y)?;
    Ok(head.loss.value(head.logit(embeddings), y))
}

/// Gradient of the loss in `theta_0`; zero for a frozen head.
pub fn grad_server(head: &ServerHead, embeddings: &[&[f64]], y: f64) -> Result<Vec<f64>> {
    head.check(embeddings)?;
    head.loss.check_label(y)?;
    let mut g = vec![0.0; head.weights.len()];
    if !head.trainable {
        return Ok(g);
    }
    let gz = head.loss.dz(head.logit(embeddings), y);
    let mut at = 0;
    for h in embeddings {
        for (gi, hi) in g[at..at + h.len()].iter_mut().zip(h.iter()) {
            *gi = gz * hi;
        }
        at += h.len();
    }
    g[at] = gz;
    Ok(g)
}

/// Gradient of the loss in client `m`'s embedding, others held fixed.
pub fn grad_embedding(head: &ServerHead, embeddings: &[&[f64]], y: f64, m: usize) -> Result<Vec<f64>> {
    if m >= head.num_clients() {
        return Err(protocol_err!("client index {m} out of range (M = {})", head.num_clients()));
    }
    head.check(embeddings)?;
    head.loss.check_label(y)?;
    let gz = head.loss.dz(head.logit(embeddings), y);
    Ok(head.block(m).iter().map(|w| gz * w).collect())
}

/// `r(theta) = coefficient / 2 * |theta|^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerSpec {
    pub coefficient: f64,
}

impl RegularizerSpec {
    pub fn l2(coefficient: f64) -> Self {
        RegularizerSpec { coefficient }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        0.5 * self.coefficient * crate::numerics::norm_sq(theta)
    }

    /// Smoothness constant of the regularizer.
    pub fn lipschitz_grad(&self) -> f64 {
        self.coefficient
    }
}

pub fn regularizer_grad(spec: &RegularizerSpec, theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|t| spec.coefficient * t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mean, variance};

    fn linear_12() -> EmbeddingParams {
        let mut p = EmbeddingParams::linear(2, 1, true);
        p.layers[0].w = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        p
    }

    #[test]
    fn linear_forward_is_a_dot_product() {
        let (h, _) = embed_forward(&linear_12(), &[3.0, 4.0], &PerturbationSpec::none(1), &mut Rng::from_seed(0)).unwrap();
        assert_eq!(h, vec![11.0]);
    }

    #[test]
    fn relu_of_zero_input_is_zero() {
        let mut p = EmbeddingParams::mlp(3, &[4], 2, Activation::Relu, Activation::Relu, true);
        p.init_random(&mut Rng::from_seed(3));
        let (h, _) = embed_forward(&p, &[0.0; 3], &PerturbationSpec::none(2), &mut Rng::from_seed(0)).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_a_model_error() {
        let err = embed_forward(&linear_12(), &[1.0], &PerturbationSpec::none(1), &mut Rng::from_seed(0));
        assert!(matches!(err, Err(crate::Error::Model(_))));
    }

    #[test]
    fn output_noise_matches_gaussian_law() {
        let mut p = EmbeddingParams::linear(1, 1, false);
        p.layers[0].w = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let pert = PerturbationSpec {
            hidden_stds: vec![],
            output_std: 1.0,
        };
        let hs: Vec<f64> = (0..100_000u64)
            .map(|s| embed_forward(&p, &[0.0], &pert, &mut Rng::new(s, 0)).unwrap().0[0])
            .collect();
        assert!(mean(&hs).abs() < 0.02);
        assert!((variance(&hs) - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_perturbation_is_bit_identical_to_clean_forward() {
        let mut p = EmbeddingParams::mlp(4, &[5, 3], 2, Activation::Tanh, Activation::Identity, true);
        p.init_random(&mut Rng::from_seed(8));
        let x = [0.3, -1.2, 2.0, 0.1];
        let (h, _) = embed_forward(&p, &x, &PerturbationSpec::none(3), &mut Rng::from_seed(1)).unwrap();
        assert_eq!(h, p.forward_clean(&x));
    }

    #[test]
    fn scalar_losses() {
        let head = ServerHead::zeros(&[1], LossKind::BinaryLogistic, true);
        let l = loss_forward(&head, &[&[5.0]], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((LossKind::BinaryLogistic.value(2.0, 1.0) - 0.126_928_011_042_972_6).abs() < 1e-12);
        assert_eq!(LossKind::Squared.value(1.5, 1.5), 0.0);
        assert!(loss_forward(&head, &[&[5.0]], 0.0).is_err());
    }

    #[test]
    fn server_gradient_at_zero_head() {
        let head = ServerHead::zeros(&[2, 1], LossKind::BinaryLogistic, true);
        let g = grad_server(&head, &[&[1.0, -2.0], &[4.0]], 1.0).unwrap();
        assert_eq!(g, vec![-0.5, 1.0, -2.0, -0.5]);
        let frozen = ServerHead::zeros(&[2, 1], LossKind::BinaryLogistic, false);
        assert_eq!(grad_server(&frozen, &[&[1.0, -2.0], &[4.0]], 1.0).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn embedding_gradient_is_residual_times_block() {
        let head = ServerHead::with_weights(&[1, 2], vec![0.5, -1.0, 2.0, 0.1], LossKind::BinaryLogistic, true).unwrap();
        let hs: [&[f64]; 2] = [&[1.0], &[0.2, 0.3]];
        let z = 0.5 - 0.2 + 0.6 + 0.1;
        let gz = -sigmoid(-z);
        let g = grad_embedding(&head, &hs, 1.0, 1).unwrap();
        assert!((g[0] - gz * -1.0).abs() < 1e-15 && (g[1] - gz * 2.0).abs() < 1e-15);
        assert!(matches!(grad_embedding(&head, &hs, 1.0, 2), Err(crate::Error::Protocol(_))));

        let sq = ServerHead::with_weights(&[1], vec![2.0, 0.0], LossKind::Squared, true).unwrap();
        assert_eq!(grad_embedding(&sq, &[&[1.5]], 3.0, 0).unwrap(), vec![0.0]);
    }

    #[test]
    fn linear_backprop_returns_input_scaled() {
        let p = linear_12();
        let (_, tape) = embed_forward(&p, &[1.0, 2.0], &PerturbationSpec::none(1), &mut Rng::from_seed(0)).unwrap();
        let g = client_backprop(&p, &tape, &[0.5]).unwrap();
        assert_eq!(g.w[0].as_slice(), &[0.5, 1.0]);
        assert_eq!(g.b[0], vec![0.5]);
        let z = client_backprop(&p, &tape, &[0.0]).unwrap();
        assert!(z.to_flat(&p).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regularizer() {
        assert_eq!(regularizer_grad(&RegularizerSpec::l2(0.0), &[1.0, 2.0]), vec![0.0, 0.0]);
        let g = regularizer_grad(&RegularizerSpec::l2(0.001), &[1.0, -2.0]);
        assert!((g[0] - 0.001).abs() < 1e-18 && (g[1] + 0.002).abs() < 1e-18);
    }

    #[test]
    fn flatten_roundtrip_skips_frozen_bias() {
        let mut p = EmbeddingParams::mlp(3, &[2], 1, Activation::Relu, Activation::Identity, false);
        p.init_random(&mut Rng::from_seed(4));
        let flat = p.flatten();
        assert_eq!(flat.len(), 3 * 2 + 2);
        let mut q = p.clone();
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&flat[1..]).is_err());
    }
}
