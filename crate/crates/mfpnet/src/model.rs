//! The patch-aggregation expression classifier.
//!
//! Seven convolutional sub-networks, one per facial patch, each three
//! rounds of 5x5 valid convolution followed by 2x2 max pooling, with
//! channels 1 -> 6 -> 16 -> 120. Their flattened outputs concatenate in
//! fixed patch order into a dense ReLU layer, dropout, and a dense
//! softmax classifier. All parameters train jointly with RMSProp on
//! cross-entropy loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::facegeom::{FaceImage, PatchSet, PATCH_REGIONS};
use crate::numcore::{checkpoint, glorot_uniform, ParamSet, RmsProp, Tape, Tensor, Value};
use crate::par;

/// Channel widths entering and leaving each convolution stage.
pub const STAGE_CHANNELS: [usize; 4] = [1, 6, 16, 120];
const KERNEL: usize = 5;
const STAGES: usize = 3;

/// Network hyper-parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Side length of each square input patch.
    pub patch_size: usize,
    /// Number of expression classes.
    pub classes: usize,
    /// Width of the aggregation dense layer.
    pub dense1_width: usize,
    /// Dropout rate between the two dense layers (training only).
    pub dropout: f64,
    /// Dropout rate after each pooling stage (training only).
    pub subnet_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 36,
            classes: 8,
            dense1_width: 256,
            dropout: 0.5,
            subnet_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        shape_plan(self.patch_size)?;
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dense1_width == 0 {
            return Err(Error::Config("dense layer width must be positive".to_string()));
        }
        for (what, rate) in [("dropout", self.dropout), ("subnet dropout", self.subnet_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{what} rate must be in [0, 1), got {rate}")));
            }
        }
        Ok(())
    }
}

/// One stage's output geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub size: usize,
    pub channels: usize,
}

impl StageShape {
    pub fn elements(&self) -> usize {
        self.size * self.size * self.channels
    }
}

/// The full shape walk of one sub-network for a given patch size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub patch_size: usize,
    pub stages: Vec<StageShape>,
    pub per_patch_features: usize,
    pub total_features: usize,
}

/// Walks a patch of side `p` through the sub-network, recording each
/// stage's output size. Fails naming the first stage that cannot run:
/// a 5x5 valid convolution needs at least 5 pixels, a 2x2 pool at
/// least 2.
pub fn shape_plan(p: usize) -> Result<ShapePlan> {
    let mut stages = Vec::with_capacity(1 + 2 * STAGES);
    stages.push(StageShape { stage: "input".to_string(), size: p, channels: STAGE_CHANNELS[0] });
    let mut size = p;
    for stage in 1..=STAGES {
        if size < KERNEL {
            return Err(Error::Geometry(format!(
                "conv{stage} needs at least {KERNEL} pixels, has {size} \
                 (patch size {p} is too small)"
            )));
        }
        size -= KERNEL - 1;
        stages.push(StageShape {
            stage: format!("conv{stage}"),
            size,
            channels: STAGE_CHANNELS[stage],
        });
        if size < 2 {
            return Err(Error::Geometry(format!(
                "pool{stage} needs at least 2 pixels, has {size} \
                 (patch size {p} is too small)"
            )));
        }
        size /= 2;
        stages.push(StageShape {
            stage: format!("pool{stage}"),
            size,
            channels: STAGE_CHANNELS[stage],
        });
    }
    let per_patch_features = stages.last().expect("stages never empty").elements();
    Ok(ShapePlan {
        patch_size: p,
        stages,
        per_patch_features,
        total_features: per_patch_features * PATCH_REGIONS.len(),
    })
}

impl ShapePlan {
    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            let label = if s.stage == "input" {
                "patch input".to_string()
            } else if s.stage.starts_with("conv") {
                format!("{} ({KERNEL}x{KERNEL})", s.stage)
            } else {
                format!("{} (2x2)", s.stage)
            };
            out.push_str(&format!("{label}: {}x{}x{}\n", s.size, s.size, s.channels));
        }
        out.push_str(&format!("per-patch features: {}\n", self.per_patch_features));
        out.push_str(&format!(
            "aggregated features ({} patches): {}\n",
            PATCH_REGIONS.len(),
            self.total_features
        ));
        out
    }

    /// Machine-readable CSV with the same contents.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,size,channels,elements\n");
        for s in &self.stages {
            out.push_str(&format!("{},{},{},{}\n", s.stage, s.size, s.channels, s.elements()));
        }
        out.push_str(&format!("per_patch_features,,,{}\n", self.per_patch_features));
        out.push_str(&format!("total_features,,,{}\n", self.total_features));
        out
    }
}

/// Converts one patch into the `[1, p, p]` tensor the network consumes.
pub fn patch_tensor(patch: &FaceImage) -> Tensor {
    Tensor::from_vec(&[1, patch.height(), patch.width()], patch.pixels().to_vec())
        .expect("pixel count matches dimensions")
}

/// Tape handles for every parameter, registered once per tape.
struct TapeParams {
    stages: Vec<[(Value, Value); STAGES]>,
    dense1: (Value, Value),
    dense2: (Value, Value),
}

/// The aggregated patch classifier.
pub struct MfpModel {
    config: ModelConfig,
    params: ParamSet,
    per_patch_features: usize,
}

impl MfpModel {
    /// Fresh model with Glorot-uniform kernels and zero biases, fully
    /// determined by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let plan = shape_plan(config.patch_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for patch in 0..PATCH_REGIONS.len() {
            for stage in 1..=STAGES {
                let (c_in, c_out) = (STAGE_CHANNELS[stage - 1], STAGE_CHANNELS[stage]);
                let fan_in = c_in * KERNEL * KERNEL;
                let fan_out = c_out * KERNEL * KERNEL;
                params.add(
                    &format!("patch{patch}.conv{stage}.kernels"),
                    glorot_uniform(&mut rng, fan_in, fan_out, &[c_out, c_in, KERNEL, KERNEL]),
                )?;
                params.add(&format!("patch{patch}.conv{stage}.bias"), Tensor::zeros(&[c_out]))?;
            }
        }
        let total = plan.total_features;
        let w1 = config.dense1_width;
        params.add(
            "head.dense1.weights",
            glorot_uniform(&mut rng, total, w1, &[w1, total]),
        )?;
        params.add("head.dense1.bias", Tensor::zeros(&[w1]))?;
        params.add(
            "head.dense2.weights",
            glorot_uniform(&mut rng, w1, config.classes, &[config.classes, w1]),
        )?;
        params.add("head.dense2.bias", Tensor::zeros(&[config.classes]))?;
        Ok(MfpModel { config, params, per_patch_features: plan.per_patch_features })
    }

    /// Rebuilds a model around loaded parameters, verifying that every
    /// expected parameter is present with the right shape and nothing
    /// extra is.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = MfpModel::new(config.clone(), 0)?;
        let mut problems = Vec::new();
        for expected in reference.params.iter() {
            match params.get(&expected.name) {
                None => problems.push(format!("missing parameter {:?}", expected.name)),
                Some(got) if got.value.shape() != expected.value.shape() => {
                    problems.push(format!(
                        "parameter {:?} has shape {:?}, expected {:?}",
                        expected.name,
                        got.value.shape(),
                        expected.value.shape()
                    ));
                }
                Some(_) => {}
            }
        }
        for got in params.iter() {
            if reference.params.get(&got.name).is_none() {
                problems.push(format!("unexpected parameter {:?}", got.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(MfpModel { params, ..reference })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameter access for perturbation-style testing and
    /// warm starts. Shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn per_patch_features(&self) -> usize {
        self.per_patch_features
    }

    /// Saves the parameters in checkpoint format.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    /// Loads parameters saved by [`MfpModel::save`] for this config.
    pub fn load(config: ModelConfig, path: &std::path::Path) -> Result<Self> {
        let params = checkpoint::load(path)?;
        MfpModel::from_params(config, params)
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> Result<TapeParams> {
        let mut fetch = |name: &str| -> Result<Value> {
            if trainable {
                tape.param(&self.params, name)
            } else {
                let p = self
                    .params
                    .get(name)
                    .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
                Ok(tape.leaf(p.value.clone()))
            }
        };
        let mut stages = Vec::with_capacity(PATCH_REGIONS.len());
        for patch in 0..PATCH_REGIONS.len() {
            let mut pair = Vec::with_capacity(STAGES);
            for stage in 1..=STAGES {
                let k = fetch(&format!("patch{patch}.conv{stage}.kernels"))?;
                let b = fetch(&format!("patch{patch}.conv{stage}.bias"))?;
                pair.push((k, b));
            }
            stages.push([pair[0], pair[1], pair[2]]);
        }
        Ok(TapeParams {
            stages,
            dense1: (fetch("head.dense1.weights")?, fetch("head.dense1.bias")?),
            dense2: (fetch("head.dense2.weights")?, fetch("head.dense2.bias")?),
        })
    }

    fn check_patches(&self, patches: &PatchSet) -> Result<()> {
        if patches.patch_size() != self.config.patch_size {
            return Err(Error::Shape(format!(
                "model expects {0}x{0} patches, got {1}x{1}",
                self.config.patch_size,
                patches.patch_size()
            )));
        }
        Ok(())
    }

    /// Runs one face's patches to class probabilities on `tape`.
    fn forward_with<R: Rng>(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        patches: &PatchSet,
        train: bool,
        rng: &mut R,
    ) -> Result<Value> {
        self.check_patches(patches)?;
        let mut features = Vec::with_capacity(PATCH_REGIONS.len());
        for (patch, stages) in patches.patches().iter().zip(&tp.stages) {
            let mut x = tape.leaf(patch_tensor(patch));
            for &(k, b) in stages {
                x = tape.conv2d(x, k, b, 1, 0)?;
                x = tape.maxpool2x2(x)?;
                if train && self.config.subnet_dropout > 0.0 {
                    x = tape.dropout(x, self.config.subnet_dropout, rng)?;
                }
            }
            features.push(x);
        }
        let concat = tape.concat_flat(&features)?;
        let h = tape.dense(tp.dense1.0, tp.dense1.1, concat)?;
        let h = tape.relu(h);
        let h = if train { tape.dropout(h, self.config.dropout, rng)? } else { h };
        let logits = tape.dense(tp.dense2.0, tp.dense2.1, h)?;
        tape.softmax(logits)
    }

    /// Class probabilities for one face.
    pub fn probabilities(&self, patches: &PatchSet) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let tp = self.register(&mut tape, false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = self.forward_with(&mut tape, &tp, patches, false, &mut rng)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Predicted class for one face; ties pick the lowest class index.
    pub fn predict(&self, patches: &PatchSet) -> Result<usize> {
        Ok(argmax(&self.probabilities(patches)?))
    }

    /// Predictions for many faces, in input order, parallel over faces.
    pub fn predict_batch(&self, faces: &[PatchSet]) -> Result<Vec<usize>> {
        let results = par::map_indexed(faces.len(), par::parallel_enabled(), |i| {
            self.predict(&faces[i])
        });
        results.into_iter().collect()
    }

    fn check_batch(&self, batch: &[(&PatchSet, usize)]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".to_string()));
        }
        for (_, label) in batch {
            if *label >= self.config.classes {
                return Err(Error::Config(format!(
                    "label {label} out of range for {} classes",
                    self.config.classes
                )));
            }
        }
        Ok(())
    }

    fn batch_objective<R: Rng>(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        batch: &[(&PatchSet, usize)],
        train: bool,
        rng: &mut R,
    ) -> Result<Value> {
        let mut losses = Vec::with_capacity(batch.len());
        for (patches, label) in batch {
            let probs = self.forward_with(tape, tp, patches, train, rng)?;
            losses.push(tape.cross_entropy(probs, *label)?);
        }
        let sum = tape.add_n(&losses)?;
        Ok(tape.scale(sum, 1.0 / batch.len() as f64))
    }

    /// Mean cross-entropy of a labeled batch, evaluation mode, no update.
    pub fn batch_loss(&self, batch: &[(&PatchSet, usize)]) -> Result<f64> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let tp = self.register(&mut tape, false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = self.batch_objective(&mut tape, &tp, batch, false, &mut rng)?;
        tape.value(loss).item()
    }

    /// Computes gradients of the training-mode batch loss into the
    /// parameter set without stepping. Returns the loss.
    pub fn accumulate_gradients<R: Rng>(
        &mut self,
        batch: &[(&PatchSet, usize)],
        rng: &mut R,
    ) -> Result<f64> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let tp = self.register(&mut tape, true)?;
        let loss = self.batch_objective(&mut tape, &tp, batch, true, rng)?;
        let loss_value = tape.value(loss).item()?;
        tape.backward(loss, &mut self.params)?;
        Ok(loss_value)
    }

    /// One RMSProp step on the mean cross-entropy of a labeled batch.
    /// Returns the batch loss before the update.
    pub fn train_step<R: Rng>(
        &mut self,
        batch: &[(&PatchSet, usize)],
        opt: &mut RmsProp,
        rng: &mut R,
    ) -> Result<f64> {
        let loss = self.accumulate_gradients(batch, rng)?;
        opt.step(&mut self.params)?;
        Ok(loss)
    }
}

/// Index of the largest element; ties pick the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
