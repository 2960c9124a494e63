//! Conditional GAN that turns a neutral face into expression images.
//!
//! The generator encodes the neutral image through three stride-2
//! convolutions, injects the target expression label (one-hot) and a
//! noise vector as constant channels at the bottleneck, and decodes
//! through three transposed convolutions to an image of the input size,
//! squashed to `[0, 1]` by a final sigmoid. The discriminator sees the
//! conditioning image and a candidate stacked as two channels and
//! produces a probability that the pair is real. Both train with
//! RMSProp, alternating one discriminator ascent step and one generator
//! descent step per batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::facegeom::FaceImage;
use crate::numcore::{checkpoint, glorot_uniform, ParamSet, RmsProp, Tape, Tensor, Value};

const K: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;
/// Encoder channel widths after each downsampling stage.
const ENC_CHANNELS: [usize; 4] = [1, 8, 16, 32];
/// Discriminator widths; its input is (conditioning, candidate).
const DISC_CHANNELS: [usize; 4] = [2, 8, 16, 32];
/// Discriminator outputs are clamped to this interior before any log.
pub const D_CLAMP: f64 = 1e-7;

fn down(s: usize) -> usize {
    (s + 2 * PAD - K) / STRIDE + 1
}

/// Training weights and loop parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CganConfig {
    /// Weight of the adversarial term in the generator's objective.
    pub lambda: f64,
    /// Weight of the pixel MSE term.
    pub alpha: f64,
    /// Weight of the perceptual term.
    pub beta: f64,
    /// Noise vector length; may be zero.
    pub noise_dim: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CganConfig {
    fn default() -> Self {
        CganConfig {
            lambda: 1.0,
            alpha: 10.0,
            beta: 1.0,
            noise_dim: 8,
            lr_g: 1e-3,
            lr_d: 1e-3,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl CganConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".to_string()));
        }
        Ok(())
    }
}

/// Tape handles for the generator's parameters.
pub struct GenParams {
    pub enc: [(Value, Value); 3],
    pub dec: [(Value, Value); 3],
}

/// Tape handles for the discriminator's parameters.
pub struct DiscParams {
    pub convs: [(Value, Value); 3],
    pub dense: (Value, Value),
}

fn validate_against(template: &ParamSet, got: &ParamSet) -> Result<()> {
    let mut problems = Vec::new();
    for expected in template.iter() {
        match got.get(&expected.name) {
            None => problems.push(format!("missing parameter {:?}", expected.name)),
            Some(p) if p.value.shape() != expected.value.shape() => problems.push(format!(
                "parameter {:?} has shape {:?}, expected {:?}",
                expected.name,
                p.value.shape(),
                expected.value.shape()
            )),
            Some(_) => {}
        }
    }
    for p in got.iter() {
        if template.get(&p.name).is_none() {
            problems.push(format!("unexpected parameter {:?}", p.name));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems))
    }
}

/// The expression generator.
pub struct Generator {
    classes: usize,
    noise_dim: usize,
    params: ParamSet,
}

impl Generator {
    pub fn new(classes: usize, noise_dim: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("generator needs at least one class".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for stage in 0..3 {
            let (c_in, c_out) = (ENC_CHANNELS[stage], ENC_CHANNELS[stage + 1]);
            params.add(
                &format!("enc{}.kernels", stage + 1),
                glorot_uniform(&mut rng, c_in * K * K, c_out * K * K, &[c_out, c_in, K, K]),
            )?;
            params.add(&format!("enc{}.bias", stage + 1), Tensor::zeros(&[c_out]))?;
        }
        let bottleneck = ENC_CHANNELS[3] + classes + noise_dim;
        let dec_channels = [bottleneck, 16, 8, 1];
        for stage in 0..3 {
            let (c_in, c_out) = (dec_channels[stage], dec_channels[stage + 1]);
            params.add(
                &format!("dec{}.kernels", stage + 1),
                glorot_uniform(&mut rng, c_in * K * K, c_out * K * K, &[c_in, c_out, K, K]),
            )?;
            params.add(&format!("dec{}.bias", stage + 1), Tensor::zeros(&[c_out]))?;
        }
        Ok(Generator { classes, noise_dim, params })
    }

    pub fn from_params(classes: usize, noise_dim: usize, params: ParamSet) -> Result<Self> {
        let template = Generator::new(classes, noise_dim, 0)?;
        validate_against(&template.params, &params)?;
        Ok(Generator { classes, noise_dim, params })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    pub fn load(classes: usize, noise_dim: usize, path: &std::path::Path) -> Result<Self> {
        Generator::from_params(classes, noise_dim, checkpoint::load(path)?)
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<GenParams> {
        let mut fetch = |name: &str| fetch_param(tape, &self.params, name, trainable);
        Ok(GenParams {
            enc: [
                (fetch("enc1.kernels")?, fetch("enc1.bias")?),
                (fetch("enc2.kernels")?, fetch("enc2.bias")?),
                (fetch("enc3.kernels")?, fetch("enc3.bias")?),
            ],
            dec: [
                (fetch("dec1.kernels")?, fetch("dec1.bias")?),
                (fetch("dec2.kernels")?, fetch("dec2.bias")?),
                (fetch("dec3.kernels")?, fetch("dec3.bias")?),
            ],
        })
    }

    /// Generates one expression image outside any training loop.
    pub fn generate(&self, neutral: &FaceImage, label: usize, z: &[f64]) -> Result<FaceImage> {
        let mut tape = Tape::new();
        let gp = self.register(&mut tape, false)?;
        let out =
            generator_forward(&mut tape, &gp, self.classes, self.noise_dim, neutral, label, z)?;
        let t = tape.value(out);
        let side = t.shape()[1];
        FaceImage::from_pixels(side, side, t.data().to_vec())
    }
}

fn fetch_param(tape: &mut Tape, set: &ParamSet, name: &str, trainable: bool) -> Result<Value> {
    if trainable {
        tape.param(set, name)
    } else {
        let p = set
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        Ok(tape.leaf(p.value.clone()))
    }
}

fn square_side(img: &FaceImage) -> Result<usize> {
    if img.width() != img.height() {
        return Err(Error::Shape(format!(
            "expected a square image, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(img.width())
}

/// Runs the generator on `tape`. The output is a `[1, side, side]`
/// value matching the input size, in `(0, 1)`.
pub fn generator_forward(
    tape: &mut Tape,
    gp: &GenParams,
    classes: usize,
    noise_dim: usize,
    neutral: &FaceImage,
    label: usize,
    z: &[f64],
) -> Result<Value> {
    let s0 = square_side(neutral)?;
    if label >= classes {
        return Err(Error::Config(format!("label {label} out of range for {classes} classes")));
    }
    if z.len() != noise_dim {
        return Err(Error::Shape(format!(
            "noise vector has {} values, generator expects {noise_dim}",
            z.len()
        )));
    }
    let mut x = tape.leaf(Tensor::from_vec(&[1, s0, s0], neutral.pixels().to_vec())?);
    let mut sizes = [s0; 4];
    for (stage, &(k, b)) in gp.enc.iter().enumerate() {
        x = tape.conv2d(x, k, b, STRIDE, PAD)?;
        x = tape.relu(x);
        sizes[stage + 1] = down(sizes[stage]);
    }
    let sb = sizes[3];
    let mut extra = vec![0.0; (classes + noise_dim) * sb * sb];
    extra[label * sb * sb..(label + 1) * sb * sb].fill(1.0);
    for (i, &zv) in z.iter().enumerate() {
        let base = (classes + i) * sb * sb;
        extra[base..base + sb * sb].fill(zv);
    }
    let extra = tape.leaf(Tensor::from_vec(&[classes + noise_dim, sb, sb], extra)?);
    let mut h = tape.concat_channels(&[x, extra])?;
    for (stage, &(k, b)) in gp.dec.iter().enumerate() {
        let target = sizes[2 - stage];
        h = tape.conv_transpose2d(h, k, b, STRIDE, PAD, target, target)?;
        h = if stage < 2 { tape.relu(h) } else { tape.sigmoid(h) };
    }
    Ok(h)
}

/// The real/fake critic.
pub struct Discriminator {
    params: ParamSet,
}

impl Discriminator {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for stage in 0..3 {
            let (c_in, c_out) = (DISC_CHANNELS[stage], DISC_CHANNELS[stage + 1]);
            params.add(
                &format!("conv{}.kernels", stage + 1),
                glorot_uniform(&mut rng, c_in * K * K, c_out * K * K, &[c_out, c_in, K, K]),
            )?;
            params.add(&format!("conv{}.bias", stage + 1), Tensor::zeros(&[c_out]))?;
        }
        let w = DISC_CHANNELS[3];
        params.add("dense.weights", glorot_uniform(&mut rng, w, 1, &[1, w]))?;
        params.add("dense.bias", Tensor::zeros(&[1]))?;
        Ok(Discriminator { params })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let template = Discriminator::new(0)?;
        validate_against(&template.params, &params)?;
        Ok(Discriminator { params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Discriminator::from_params(checkpoint::load(path)?)
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<DiscParams> {
        let mut fetch = |name: &str| fetch_param(tape, &self.params, name, trainable);
        Ok(DiscParams {
            convs: [
                (fetch("conv1.kernels")?, fetch("conv1.bias")?),
                (fetch("conv2.kernels")?, fetch("conv2.bias")?),
                (fetch("conv3.kernels")?, fetch("conv3.bias")?),
            ],
            dense: (fetch("dense.weights")?, fetch("dense.bias")?),
        })
    }

    /// Probability that `candidate` is the real partner of `cond`.
    pub fn probability(&self, cond: &FaceImage, candidate: &FaceImage) -> Result<f64> {
        let mut tape = Tape::new();
        let dp = self.register(&mut tape, false)?;
        let a = image_value(&mut tape, cond)?;
        let b = image_value(&mut tape, candidate)?;
        let out = discriminator_forward(&mut tape, &dp, a, b)?;
        tape.value(out).item()
    }
}

fn image_value(tape: &mut Tape, img: &FaceImage) -> Result<Value> {
    let s = square_side(img)?;
    Ok(tape.leaf(Tensor::from_vec(&[1, s, s], img.pixels().to_vec())?))
}

/// Runs the discriminator on a (conditioning, candidate) channel pair;
/// both must be `[1, s, s]` values. Output is a single probability.
pub fn discriminator_forward(
    tape: &mut Tape,
    dp: &DiscParams,
    cond: Value,
    candidate: Value,
) -> Result<Value> {
    let mut h = tape.concat_channels(&[cond, candidate])?;
    for &(k, b) in &dp.convs {
        h = tape.conv2d(h, k, b, STRIDE, PAD)?;
        h = tape.relu(h);
    }
    let pooled = tape.global_avg_pool(h)?;
    let logit = tape.dense(dp.dense.0, dp.dense.1, pooled)?;
    Ok(tape.sigmoid(logit))
}

/// One training batch: neutral sources, expression targets, noise, labels.
pub struct GanBatch {
    x: Vec<FaceImage>,
    y: Vec<FaceImage>,
    z: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl GanBatch {
    pub fn new(
        x: Vec<FaceImage>,
        y: Vec<FaceImage>,
        z: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let n = x.len();
        if n == 0 {
            return Err(Error::Config("batch must not be empty".to_string()));
        }
        if y.len() != n || z.len() != n || labels.len() != n {
            return Err(Error::Shape(format!(
                "batch arrays disagree on length: x {n}, y {}, z {}, labels {}",
                y.len(),
                z.len(),
                labels.len()
            )));
        }
        let side = square_side(&x[0])?;
        for img in x.iter().chain(&y) {
            if square_side(img)? != side {
                return Err(Error::Shape(format!(
                    "batch images must all be {side}x{side}, got {}x{}",
                    img.width(),
                    img.height()
                )));
            }
        }
        let zdim = z[0].len();
        if z.iter().any(|v| v.len() != zdim) {
            return Err(Error::Shape("noise vectors disagree on length".to_string()));
        }
        Ok(GanBatch { x, y, z, labels })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn side(&self) -> usize {
        self.x[0].width()
    }
}

/// Loss components of one generator evaluation. `total` weighs the
/// pixel and perceptual terms by alpha and beta; the adversarial term
/// enters with coefficient one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    pub l_ad: f64,
    pub l_mse: f64,
    pub l_pep: f64,
    pub total: f64,
}

/// A differentiable perceptual distance between a generated image (on
/// tape) and a target.
pub trait Perceptual {
    fn loss(&self, tape: &mut Tape, generated: Value, target: &FaceImage) -> Result<Value>;
}

/// Default perceptual distance: mean squared difference between feature
/// maps of a frozen, randomly initialized two-stage convolutional
/// encoder (5x5 conv, 2x2 pool, 5x5 conv). Needs images of at least
/// [`FeaturePerceptual::MIN_SIDE`] pixels.
pub struct FeaturePerceptual {
    c1k: Tensor,
    c1b: Tensor,
    c2k: Tensor,
    c2b: Tensor,
}

impl FeaturePerceptual {
    pub const MIN_SIDE: usize = 14;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeaturePerceptual {
            c1k: glorot_uniform(&mut rng, 25, 150, &[6, 1, 5, 5]),
            c1b: Tensor::zeros(&[6]),
            c2k: glorot_uniform(&mut rng, 150, 400, &[16, 6, 5, 5]),
            c2b: Tensor::zeros(&[16]),
        }
    }

    fn features(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let c1k = tape.leaf(self.c1k.clone());
        let c1b = tape.leaf(self.c1b.clone());
        let c2k = tape.leaf(self.c2k.clone());
        let c2b = tape.leaf(self.c2b.clone());
        let h = tape.conv2d(x, c1k, c1b, 1, 0)?;
        let h = tape.maxpool2x2(h)?;
        tape.conv2d(h, c2k, c2b, 1, 0)
    }
}

impl Perceptual for FeaturePerceptual {
    fn loss(&self, tape: &mut Tape, generated: Value, target: &FaceImage) -> Result<Value> {
        let side = square_side(target)?;
        if side < Self::MIN_SIDE {
            return Err(Error::Config(format!(
                "perceptual loss needs images of at least {} pixels per side, got {side}",
                Self::MIN_SIDE
            )));
        }
        let t = image_value(tape, target)?;
        let fg = self.features(tape, generated)?;
        let ft = self.features(tape, t)?;
        let diff = tape.sub(fg, ft)?;
        let sq = tape.mul(diff, diff)?;
        tape.mean(sq)
    }
}

/// Generator loss terms as tape values, for training and testing.
pub struct GenLossTerms {
    /// `lambda*l_ad + alpha*l_mse + beta*l_pep`: what the generator descends.
    pub objective: Value,
    pub l_ad: Value,
    pub l_mse: Value,
    pub l_pep: Option<Value>,
}

/// Builds the generator's loss on `tape` from registered parameters.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss_on_tape(
    tape: &mut Tape,
    gp: &GenParams,
    dp: &DiscParams,
    classes: usize,
    noise_dim: usize,
    batch: &GanBatch,
    config: &CganConfig,
    perceptual: Option<&dyn Perceptual>,
) -> Result<GenLossTerms> {
    config.validate()?;
    if config.beta > 0.0 && perceptual.is_none() {
        return Err(Error::Config(
            "beta > 0 requires a perceptual loss implementation".to_string(),
        ));
    }
    let n = batch.len();
    let mut log_ds = Vec::with_capacity(n);
    let mut mses = Vec::with_capacity(n);
    let mut peps = Vec::with_capacity(n);
    for i in 0..n {
        let fake =
            generator_forward(tape, gp, classes, noise_dim, &batch.x[i], batch.labels[i], &batch.z[i])?;
        let cond = image_value(tape, &batch.x[i])?;
        let d = discriminator_forward(tape, dp, cond, fake)?;
        let d = tape.clamp(d, D_CLAMP, 1.0 - D_CLAMP)?;
        let log_d = tape.log(d)?;
        // The discriminator emits a [1] tensor; the loss terms below
        // are scalars, so align shapes here.
        log_ds.push(tape.reshape(log_d, &[])?);
        let target = image_value(tape, &batch.y[i])?;
        let diff = tape.sub(fake, target)?;
        let sq = tape.mul(diff, diff)?;
        mses.push(tape.mean(sq)?);
        if config.beta > 0.0 {
            let p = perceptual.expect("checked above").loss(tape, fake, &batch.y[i])?;
            peps.push(p);
        }
    }
    let ad_sum = tape.add_n(&log_ds)?;
    let l_ad = tape.scale(ad_sum, -1.0 / n as f64);
    let mse_sum = tape.add_n(&mses)?;
    let l_mse = tape.scale(mse_sum, 1.0 / n as f64);
    let l_pep = if config.beta > 0.0 {
        let s = tape.add_n(&peps)?;
        Some(tape.scale(s, 1.0 / n as f64))
    } else {
        None
    };
    let mut objective = tape.scale(l_ad, config.lambda);
    let weighted_mse = tape.scale(l_mse, config.alpha);
    objective = tape.add(objective, weighted_mse)?;
    if let Some(p) = l_pep {
        let weighted = tape.scale(p, config.beta);
        objective = tape.add(objective, weighted)?;
    }
    Ok(GenLossTerms { objective, l_ad, l_mse, l_pep })
}

/// Evaluates the generator's loss components without training.
pub fn generator_loss(
    batch: &GanBatch,
    g: &Generator,
    d: &Discriminator,
    config: &CganConfig,
    perceptual: Option<&dyn Perceptual>,
) -> Result<GanLosses> {
    let mut tape = Tape::new();
    let gp = g.register(&mut tape, false)?;
    let dp = d.register(&mut tape, false)?;
    let terms = generator_loss_on_tape(
        &mut tape,
        &gp,
        &dp,
        g.classes,
        g.noise_dim,
        batch,
        config,
        perceptual,
    )?;
    Ok(read_losses(&tape, &terms, config))
}

fn read_losses(tape: &Tape, terms: &GenLossTerms, config: &CganConfig) -> GanLosses {
    let l_ad = tape.value(terms.l_ad).item().expect("scalar");
    let l_mse = tape.value(terms.l_mse).item().expect("scalar");
    let l_pep = terms.l_pep.map_or(0.0, |p| tape.value(p).item().expect("scalar"));
    GanLosses { l_ad, l_mse, l_pep, total: l_ad + config.alpha * l_mse + config.beta * l_pep }
}

/// Builds `mean[log D(x, y) + log(1 - D(x, G(x, z)))]` on `tape`.
/// The discriminator update ascends this value.
pub fn discriminator_loss_on_tape(
    tape: &mut Tape,
    gp: &GenParams,
    dp: &DiscParams,
    classes: usize,
    noise_dim: usize,
    batch: &GanBatch,
) -> Result<Value> {
    let n = batch.len();
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let cond = image_value(tape, &batch.x[i])?;
        let real = image_value(tape, &batch.y[i])?;
        let d_real = discriminator_forward(tape, dp, cond, real)?;
        let d_real = tape.clamp(d_real, D_CLAMP, 1.0 - D_CLAMP)?;
        let log_real = tape.log(d_real)?;
        let fake =
            generator_forward(tape, gp, classes, noise_dim, &batch.x[i], batch.labels[i], &batch.z[i])?;
        let d_fake = discriminator_forward(tape, dp, cond, fake)?;
        let d_fake = tape.clamp(d_fake, D_CLAMP, 1.0 - D_CLAMP)?;
        let neg = tape.neg(d_fake);
        let one_minus = tape.add_scalar(neg, 1.0);
        let log_fake = tape.log(one_minus)?;
        terms.push(tape.add(log_real, log_fake)?);
    }
    let sum = tape.add_n(&terms)?;
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// Evaluates the discriminator's objective without training.
pub fn discriminator_loss(batch: &GanBatch, g: &Generator, d: &Discriminator) -> Result<f64> {
    let mut tape = Tape::new();
    let gp = g.register(&mut tape, false)?;
    let dp = d.register(&mut tape, false)?;
    let v = discriminator_loss_on_tape(&mut tape, &gp, &dp, g.classes, g.noise_dim, batch)?;
    tape.value(v).item()
}

/// Losses recorded after each training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    /// Discriminator objective value before its update.
    pub d_value: f64,
    /// Generator components before its update.
    pub g: GanLosses,
}

pub struct TrainedCgan {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub history: Vec<StepLosses>,
}

/// Trains generator and discriminator on (neutral, expression, label)
/// triples. Each step samples a batch with replacement, ascends the
/// discriminator once, then descends the generator once. The class
/// count is one past the largest label in the dataset. Deterministic
/// under `config.seed`.
pub fn train_cgan(
    dataset: &[(FaceImage, FaceImage, usize)],
    config: &CganConfig,
    steps: usize,
) -> Result<TrainedCgan> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset must not be empty".to_string()));
    }
    let side = square_side(&dataset[0].0)?;
    for (x, y, _) in dataset {
        if square_side(x)? != side || square_side(y)? != side {
            return Err(Error::Shape(format!(
                "dataset images must all be {side}x{side}, got {}x{} and {}x{}",
                x.width(),
                x.height(),
                y.width(),
                y.height()
            )));
        }
    }
    let classes = dataset.iter().map(|(_, _, l)| l + 1).max().expect("non-empty");

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let g_seed = rng.gen::<u64>();
    let d_seed = rng.gen::<u64>();
    let pep_seed = rng.gen::<u64>();
    let mut g = Generator::new(classes, config.noise_dim, g_seed)?;
    let d = Discriminator::new(d_seed)?;
    let perceptual = (config.beta > 0.0).then(|| FeaturePerceptual::new(pep_seed));
    let mut opt_g = RmsProp::new(config.lr_g)?;
    let mut opt_d = RmsProp::new(config.lr_d)?;
    let mut d = d;
    let mut history = Vec::with_capacity(steps);

    for _ in 0..steps {
        let mut x = Vec::with_capacity(config.batch_size);
        let mut y = Vec::with_capacity(config.batch_size);
        let mut z = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let idx = rng.gen_range(0..dataset.len());
            let (xi, yi, li) = &dataset[idx];
            x.push(xi.clone());
            y.push(yi.clone());
            z.push((0..config.noise_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            labels.push(*li);
        }
        let batch = GanBatch::new(x, y, z, labels)?;

        // Discriminator ascends its objective: descend the negation.
        let mut tape = Tape::new();
        let gp = g.register(&mut tape, false)?;
        let dp = d.register(&mut tape, true)?;
        let obj = discriminator_loss_on_tape(&mut tape, &gp, &dp, classes, config.noise_dim, &batch)?;
        let d_value = tape.value(obj).item()?;
        let descent = tape.neg(obj);
        tape.backward(descent, &mut d.params)?;
        opt_d.step(&mut d.params)?;

        // Generator descends against the just-updated discriminator.
        let mut tape = Tape::new();
        let gp = g.register(&mut tape, true)?;
        let dp = d.register(&mut tape, false)?;
        let terms = generator_loss_on_tape(
            &mut tape,
            &gp,
            &dp,
            classes,
            config.noise_dim,
            &batch,
            config,
            perceptual.as_ref().map(|p| p as &dyn Perceptual),
        )?;
        let g_losses = read_losses(&tape, &terms, config);
        tape.backward(terms.objective, &mut g.params)?;
        opt_g.step(&mut g.params)?;

        history.push(StepLosses { d_value, g: g_losses });
    }
    Ok(TrainedCgan { generator: g, discriminator: d, history })
}

/// Generates one image per requested label from a single neutral face,
/// drawing a fresh noise vector per label from `z_seed`.
pub fn synthesize_expressions(
    g: &Generator,
    neutral: &FaceImage,
    labels: &[usize],
    z_seed: u64,
) -> Result<Vec<(FaceImage, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(z_seed);
    labels
        .iter()
        .map(|&label| {
            let z: Vec<f64> = (0..g.noise_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Ok((g.generate(neutral, label, &z)?, label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::kernels::{self, ConvShape, ConvTransposeShape};

    fn gray(side: usize, seed: u64) -> FaceImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = FaceImage::new(side, side);
        for v in img.pixels_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    fn constant(side: usize, v: f64) -> FaceImage {
        let mut img = FaceImage::new(side, side);
        img.pixels_mut().fill(v);
        img
    }

    fn zeroed_discriminator() -> Discriminator {
        let mut d = Discriminator::new(0).unwrap();
        for i in 0..d.params.len() {
            d.params.by_index_mut(i).value.data_mut().fill(0.0);
        }
        d
    }

    fn tiny_batch(side: usize, n: usize, noise_dim: usize, classes: usize) -> GanBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = (0..n).map(|i| gray(side, 200 + i as u64)).collect();
        let y = (0..n).map(|i| gray(side, 300 + i as u64)).collect();
        let z = (0..n)
            .map(|_| (0..noise_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels = (0..n).map(|i| i % classes).collect();
        GanBatch::new(x, y, z, labels).unwrap()
    }

    #[test]
    fn zeroed_discriminator_outputs_exactly_half() {
        let d = zeroed_discriminator();
        let p = d.probability(&gray(8, 1), &gray(8, 2)).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        for side in [8, 16, 20, 24, 32] {
            let g = Generator::new(7, 4, 3).unwrap();
            let z = vec![0.3; 4];
            let out = g.generate(&gray(side, 5), 2, &z).unwrap();
            assert_eq!((out.width(), out.height()), (side, side), "side {side}");
            assert!(out.pixels().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn generator_validates_label_and_noise() {
        let g = Generator::new(3, 2, 0).unwrap();
        let img = gray(8, 0);
        assert!(g.generate(&img, 3, &[0.0, 0.0]).is_err());
        assert!(g.generate(&img, 0, &[0.0]).is_err());
        assert!(g.generate(&FaceImage::new(8, 9), 0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn generator_loss_with_half_discriminator_is_ln_two() {
        // With D identically 0.5 and alpha = beta = 0 the total is
        // -ln(0.5) regardless of the generator.
        let g = Generator::new(2, 2, 7).unwrap();
        let d = zeroed_discriminator();
        let config = CganConfig { alpha: 0.0, beta: 0.0, ..CganConfig::default() };
        let batch = tiny_batch(4, 3, 2, 2);
        let losses = generator_loss(&batch, &g, &d, &config, None).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((losses.l_ad - ln2).abs() < 1e-12, "{}", losses.l_ad);
        assert!((losses.total - ln2).abs() < 1e-12);
        assert!(losses.l_mse >= 0.0);
        assert_eq!(losses.l_pep, 0.0);
    }

    #[test]
    fn mse_is_exactly_zero_against_own_output() {
        let g = Generator::new(2, 3, 11).unwrap();
        let d = Discriminator::new(12).unwrap();
        let x = gray(8, 40);
        let z = vec![0.1, -0.2, 0.4];
        let fake = g.generate(&x, 1, &z).unwrap();
        let batch = GanBatch::new(vec![x], vec![fake], vec![z], vec![1]).unwrap();
        let config = CganConfig { alpha: 1.0, beta: 0.0, ..CganConfig::default() };
        let losses = generator_loss(&batch, &g, &d, &config, None).unwrap();
        assert_eq!(losses.l_mse, 0.0);
    }

    #[test]
    fn discriminator_loss_with_half_outputs_is_two_ln_half() {
        let g = Generator::new(2, 2, 7).unwrap();
        let d = zeroed_discriminator();
        let batch = tiny_batch(8, 4, 2, 2);
        let v = discriminator_loss(&batch, &g, &d).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn beta_without_perceptual_is_rejected() {
        let g = Generator::new(2, 2, 7).unwrap();
        let d = Discriminator::new(8).unwrap();
        let batch = tiny_batch(8, 2, 2, 2);
        let config = CganConfig { beta: 1.0, ..CganConfig::default() };
        assert!(generator_loss(&batch, &g, &d, &config, None).is_err());
    }

    #[test]
    fn perceptual_needs_a_minimum_image_size() {
        let g = Generator::new(2, 2, 7).unwrap();
        let d = Discriminator::new(8).unwrap();
        let pep = FeaturePerceptual::new(1);
        let config = CganConfig { beta: 1.0, ..CganConfig::default() };
        let small = tiny_batch(8, 2, 2, 2);
        assert!(generator_loss(&small, &g, &d, &config, Some(&pep)).is_err());
        let big = tiny_batch(16, 2, 2, 2);
        let losses = generator_loss(&big, &g, &d, &config, Some(&pep)).unwrap();
        assert!(losses.l_pep > 0.0);
        assert!(
            (losses.total - (losses.l_ad + 10.0 * losses.l_mse + losses.l_pep)).abs() < 1e-12
        );
    }

    #[test]
    fn perceptual_distance_to_itself_is_zero() {
        let pep = FeaturePerceptual::new(5);
        let img = gray(16, 9);
        let mut tape = Tape::new();
        let v = image_value(&mut tape, &img).unwrap();
        let loss = pep.loss(&mut tape, v, &img).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    /// Straight-line reimplementation of the discriminator objective
    /// with direct kernel calls, no tape.
    fn oracle_discriminator_loss(g: &Generator, d: &Discriminator, batch: &GanBatch) -> f64 {
        let relu = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = x.max(0.0));
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let cd = |name: &str| d.params().get(name).unwrap().value.data().to_vec();
        let cg = |name: &str| g.params().get(name).unwrap().value.data().to_vec();

        let gen = |x: &FaceImage, label: usize, z: &[f64]| -> Vec<f64> {
            let s0 = x.width();
            let (s1, s2, s3) = (down(s0), down(down(s0)), down(down(down(s0))));
            let mut h = x.pixels().to_vec();
            let sizes = [s0, s1, s2, s3];
            for stage in 0..3 {
                let sh = ConvShape {
                    c_in: ENC_CHANNELS[stage],
                    h: sizes[stage],
                    w: sizes[stage],
                    c_out: ENC_CHANNELS[stage + 1],
                    k: K,
                    stride: STRIDE,
                    pad: PAD,
                };
                h = kernels::conv2d_forward(
                    &sh,
                    &h,
                    &cg(&format!("enc{}.kernels", stage + 1)),
                    &cg(&format!("enc{}.bias", stage + 1)),
                    false,
                );
                relu(&mut h);
            }
            let classes = g.classes();
            let zdim = z.len();
            let mut full = h;
            full.resize((ENC_CHANNELS[3] + classes + zdim) * s3 * s3, 0.0);
            let extra = &mut full[ENC_CHANNELS[3] * s3 * s3..];
            extra[label * s3 * s3..(label + 1) * s3 * s3].fill(1.0);
            for (i, &zv) in z.iter().enumerate() {
                let base = (classes + i) * s3 * s3;
                extra[base..base + s3 * s3].fill(zv);
            }
            let dec_channels = [ENC_CHANNELS[3] + classes + zdim, 16, 8, 1];
            let mut h = full;
            for stage in 0..3 {
                let (input_side, target) = (sizes[3 - stage], sizes[2 - stage]);
                let sh = ConvTransposeShape {
                    c_in: dec_channels[stage],
                    h: input_side,
                    w: input_side,
                    c_out: dec_channels[stage + 1],
                    k: K,
                    stride: STRIDE,
                    pad: PAD,
                    out_h: target,
                    out_w: target,
                };
                h = kernels::conv_transpose2d_forward(
                    &sh,
                    &h,
                    &cg(&format!("dec{}.kernels", stage + 1)),
                    &cg(&format!("dec{}.bias", stage + 1)),
                    false,
                );
                if stage < 2 {
                    relu(&mut h);
                } else {
                    for v in h.iter_mut() {
                        *v = sigmoid(*v);
                    }
                }
            }
            h
        };

        let mut total = 0.0;
        for i in 0..batch.len() {
            let side = batch.side();
            let fake = gen(&batch.x[i], batch.labels[i], &batch.z[i]);
            let d_of = |cand: &[f64]| -> f64 {
                let mut h: Vec<f64> =
                    batch.x[i].pixels().iter().chain(cand.iter()).copied().collect();
                let mut s = side;
                for stage in 0..3 {
                    let sh = ConvShape {
                        c_in: DISC_CHANNELS[stage],
                        h: s,
                        w: s,
                        c_out: DISC_CHANNELS[stage + 1],
                        k: K,
                        stride: STRIDE,
                        pad: PAD,
                    };
                    h = kernels::conv2d_forward(
                        &sh,
                        &h,
                        &cd(&format!("conv{}.kernels", stage + 1)),
                        &cd(&format!("conv{}.bias", stage + 1)),
                        false,
                    );
                    relu(&mut h);
                    s = down(s);
                }
                let plane = s * s;
                let pooled: Vec<f64> = h
                    .chunks(plane)
                    .map(|c| c.iter().sum::<f64>() / plane as f64)
                    .collect();
                let w = cd("dense.weights");
                let logit = pooled.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                    + cd("dense.bias")[0];
                sigmoid(logit)
            };
            let d_real = d_of(batch.y[i].pixels()).clamp(D_CLAMP, 1.0 - D_CLAMP);
            let d_fake = d_of(&fake).clamp(D_CLAMP, 1.0 - D_CLAMP);
            total += d_real.ln() + (1.0 - d_fake).ln();
        }
        total / batch.len() as f64
    }

    #[test]
    fn discriminator_loss_matches_straight_line_oracle() {
        let g = Generator::new(3, 2, 21).unwrap();
        let d = Discriminator::new(22).unwrap();
        let batch = tiny_batch(8, 3, 2, 3);
        let tape_value = discriminator_loss(&batch, &g, &d).unwrap();
        let oracle = oracle_discriminator_loss(&g, &d, &batch);
        assert!((tape_value - oracle).abs() < 1e-10, "{tape_value} vs {oracle}");
    }

    #[test]
    fn training_is_deterministic_and_zero_lr_freezes() {
        let dataset: Vec<(FaceImage, FaceImage, usize)> =
            (0..4).map(|i| (gray(8, i), gray(8, 100 + i), (i % 2) as usize)).collect();
        let config = CganConfig { beta: 0.0, batch_size: 2, seed: 5, ..CganConfig::default() };
        let a = train_cgan(&dataset, &config, 3).unwrap();
        let b = train_cgan(&dataset, &config, 3).unwrap();
        assert_eq!(a.history.len(), 3);
        for (ha, hb) in a.history.iter().zip(&b.history) {
            assert_eq!(ha.d_value.to_bits(), hb.d_value.to_bits());
            assert_eq!(ha.g.total.to_bits(), hb.g.total.to_bits());
        }
        for (pa, pb) in a.generator.params().iter().zip(b.generator.params().iter()) {
            assert_eq!(pa.value, pb.value);
        }

        let frozen_cfg = CganConfig { lr_g: 0.0, lr_d: 0.0, beta: 0.0, seed: 5, ..config };
        let frozen = train_cgan(&dataset, &frozen_cfg, 3).unwrap();
        let fresh_g = Generator::new(2, frozen_cfg.noise_dim, {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            rng.gen::<u64>()
        })
        .unwrap();
        for (pa, pb) in frozen.generator.params().iter().zip(fresh_g.params().iter()) {
            assert_eq!(pa.value, pb.value, "{}", pa.name);
        }
    }

    #[test]
    fn zero_weights_freeze_the_generator_but_not_the_discriminator() {
        let dataset: Vec<(FaceImage, FaceImage, usize)> =
            (0..4).map(|i| (gray(8, i), gray(8, 50 + i), (i % 2) as usize)).collect();
        let config = CganConfig {
            lambda: 0.0,
            alpha: 0.0,
            beta: 0.0,
            batch_size: 2,
            seed: 9,
            ..CganConfig::default()
        };
        let out = train_cgan(&dataset, &config, 3).unwrap();
        let g_seed = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            rng.gen::<u64>()
        };
        let fresh = Generator::new(2, config.noise_dim, g_seed).unwrap();
        for (pa, pb) in out.generator.params().iter().zip(fresh.params().iter()) {
            assert_eq!(pa.value, pb.value, "generator moved at {}", pa.name);
        }
        let d_seed = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            rng.gen::<u64>();
            rng.gen::<u64>()
        };
        let fresh_d = Discriminator::new(d_seed).unwrap();
        let moved = out
            .discriminator
            .params()
            .iter()
            .zip(fresh_d.params().iter())
            .any(|(pa, pb)| pa.value != pb.value);
        assert!(moved, "discriminator should have trained");
    }

    #[test]
    fn frozen_generator_lets_the_discriminator_separate_real_from_fake() {
        // Real targets are bright, fakes from the frozen random
        // generator hover around mid-gray: linearly separable.
        let dataset: Vec<(FaceImage, FaceImage, usize)> =
            (0..6).map(|i| (gray(8, i), constant(8, 0.95), 0)).collect();
        let config = CganConfig {
            lambda: 0.0,
            alpha: 0.0,
            beta: 0.0,
            noise_dim: 2,
            batch_size: 4,
            lr_d: 2e-3,
            seed: 13,
            ..CganConfig::default()
        };
        let out = train_cgan(&dataset, &config, 200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut correct = 0;
        let mut total = 0;
        for (x, y, label) in &dataset {
            let p_real = out.discriminator.probability(x, y).unwrap();
            let z: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fake = out.generator.generate(x, *label, &z).unwrap();
            let p_fake = out.discriminator.probability(x, &fake).unwrap();
            correct += usize::from(p_real > 0.5) + usize::from(p_fake < 0.5);
            total += 2;
        }
        let accuracy = correct as f64 / total as f64;
        assert!(accuracy > 0.9, "accuracy {accuracy}");
    }

    #[test]
    fn synthesis_is_deterministic_and_counts_match() {
        let g = Generator::new(7, 3, 77).unwrap();
        let neutral = gray(16, 1);
        let labels: Vec<usize> = (0..7).collect();
        let a = synthesize_expressions(&g, &neutral, &labels, 4).unwrap();
        let b = synthesize_expressions(&g, &neutral, &labels, 4).unwrap();
        let c = synthesize_expressions(&g, &neutral, &labels, 5).unwrap();
        assert_eq!(a.len(), 7);
        for ((img_a, l_a), (img_b, l_b)) in a.iter().zip(&b) {
            assert_eq!(l_a, l_b);
            assert_eq!(img_a, img_b);
            assert_eq!((img_a.width(), img_a.height()), (16, 16));
            assert!(img_a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let differs = a.iter().zip(&c).any(|((ia, _), (ic, _))| ia != ic);
        assert!(differs);
    }

    #[test]
    fn batch_validation_rejects_mismatches() {
        let x = vec![gray(8, 1)];
        let y = vec![gray(8, 2)];
        assert!(GanBatch::new(vec![], vec![], vec![], vec![]).is_err());
        assert!(GanBatch::new(x.clone(), vec![], vec![vec![]], vec![0]).is_err());
        assert!(GanBatch::new(x.clone(), vec![gray(9, 2)], vec![vec![]], vec![0]).is_err());
        assert!(GanBatch::new(x, y, vec![vec![0.0]], vec![0]).is_ok());
    }

    #[test]
    fn checkpoints_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Generator::new(3, 2, 50).unwrap();
        let d = Discriminator::new(51).unwrap();
        let gp = dir.path().join("g.ckpt");
        let dp = dir.path().join("d.ckpt");
        g.save(&gp).unwrap();
        d.save(&dp).unwrap();
        let g2 = Generator::load(3, 2, &gp).unwrap();
        let d2 = Discriminator::load(&dp).unwrap();
        let x = gray(8, 3);
        let z = vec![0.4, -0.6];
        assert_eq!(g.generate(&x, 1, &z).unwrap(), g2.generate(&x, 1, &z).unwrap());
        let cand = gray(8, 4);
        assert_eq!(
            d.probability(&x, &cand).unwrap().to_bits(),
            d2.probability(&x, &cand).unwrap().to_bits()
        );
        // A generator checkpoint for different class counts is rejected.
        assert!(Generator::load(4, 2, &gp).is_err());
        assert!(Generator::load(3, 3, &gp).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CganConfig::default().validate().is_ok());
        assert!(CganConfig { lambda: -1.0, ..CganConfig::default() }.validate().is_err());
        assert!(CganConfig { alpha: f64::NAN, ..CganConfig::default() }.validate().is_err());
        assert!(CganConfig { batch_size: 0, ..CganConfig::default() }.validate().is_err());
    }
}
