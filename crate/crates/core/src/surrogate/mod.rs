//! Learned retargeting: oracle-labeled datasets, MLP training and batched
//! prediction.

mod mlp;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use mlp::{Adam, Gradients, Mlp, Real, WEIGHTS_MAGIC};

use crate::error::{Error, Result};
use crate::pose_model::{HandPose, HandSkeleton, POSE_DIM};
use crate::retarget::{resolve_scale, retarget_pose, RetargetConfig};
use crate::robot_hand::{JointConfig, RobotHandModel};

/// Paired poses and joint labels for one hand.
#[derive(Debug, Clone, PartialEq)]
pub struct RetargetDataset {
    /// `len x 45`, row-major.
    pub inputs: Vec<f64>,
    /// `len x m`, row-major.
    pub labels: Vec<f64>,
    pub m: usize,
    pub hand_tag: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl RetargetDataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<f64>, hand_tag: impl Into<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let m = lower.len();
        if upper.len() != m || m == 0 {
            return Err(Error::InvalidArgument("joint limits must be nonempty and paired".into()));
        }
        if inputs.is_empty() {
            return Err(Error::Empty("retargeting dataset"));
        }
        if !inputs.len().is_multiple_of(POSE_DIM) || labels.len() != inputs.len() / POSE_DIM * m {
            return Err(Error::Dimension {
                what: "dataset labels",
                expected: inputs.len() / POSE_DIM * m,
                got: labels.len(),
            });
        }
        crate::error::ensure_finite(&inputs, "dataset inputs")?;
        crate::error::ensure_finite(&labels, "dataset labels")?;
        for (i, v) in labels.iter().enumerate() {
            if *v < lower[i % m] || *v > upper[i % m] {
                return Err(Error::InvalidArgument(format!(
                    "label {} joint {} = {v} outside [{}, {}]",
                    i / m,
                    i % m,
                    lower[i % m],
                    upper[i % m]
                )));
            }
        }
        Ok(Self {
            inputs,
            labels,
            m,
            hand_tag: hand_tag.into(),
            lower,
            upper,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / POSE_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * POSE_DIM..(i + 1) * POSE_DIM]
    }

    pub fn label(&self, i: usize) -> &[f64] {
        &self.labels[i * self.m..(i + 1) * self.m]
    }
}

/// Labels every pose with the optimization oracle, each solve starting
/// from the mid-range configuration with the smoothness term disabled.
/// `jobs > 1` labels poses in parallel; row order is unchanged.
pub fn generate_training_set(
    model: &RobotHandModel,
    skeleton: &HandSkeleton,
    poses: &[HandPose],
    config: &RetargetConfig,
    jobs: usize,
) -> Result<RetargetDataset> {
    if poses.is_empty() {
        return Err(Error::Empty("pose dataset"));
    }
    let config = config.clone().with_smoothness(0.0);
    config.validate()?;
    let scale = resolve_scale(model, skeleton, &config)?;
    let label = |pose: &HandPose| retarget_pose(model, skeleton, pose, scale, &config).map(|r| r.q.0);
    let labels: Vec<Vec<f64>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| poses.par_iter().map(label).collect::<Result<_>>())?
    } else {
        poses.iter().map(label).collect::<Result<_>>()?
    };
    RetargetDataset::new(
        poses.iter().flat_map(|p| p.as_slice().iter().copied()).collect(),
        labels.concat(),
        model.name(),
        model.lower().to_vec(),
        model.upper().to_vec(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecipe {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            hidden: vec![512, 512, 512],
            epochs: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            validation_fraction: 0.1,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation fraction must lie strictly between 0 and 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must be nonempty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the minibatch losses seen during the epoch, weighted by rows.
    pub train_mse: f64,
    /// Held-out MSE after the epoch; `None` when the split left no rows.
    pub validation_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub network: Mlp<T>,
    pub history: Vec<EpochStats>,
    /// Held-out MSE of the freshly initialized network.
    pub initial_validation_mse: Option<f64>,
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
}

/// Splits rows into (train, validation) after one seeded shuffle.
fn split_rows(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(rng);
    let n_val = if n < 2 { 0 } else { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) };
    let train = rows.split_off(n_val);
    (train, rows)
}

fn gather<T: Real>(src: &[f64], width: usize, rows: &[usize], out: &mut Vec<T>) {
    out.clear();
    for &r in rows {
        out.extend(src[r * width..(r + 1) * width].iter().map(|v| T::lit(*v)));
    }
}

/// Mean squared error of the clamped network over `rows`.
pub fn dataset_mse<T: Real>(net: &Mlp<T>, data: &RetargetDataset, rows: &[usize]) -> Result<f64> {
    let (mut x, mut y): (Vec<T>, Vec<T>) = (Vec::new(), Vec::new());
    let mut total = 0.0;
    for chunk in rows.chunks(1024) {
        gather(&data.inputs, POSE_DIM, chunk, &mut x);
        gather(&data.labels, data.m, chunk, &mut y);
        let out = net.forward(&x)?;
        total += out
            .iter()
            .zip(&y)
            .map(|(a, b)| {
                let d = a.to_f64_lossless() - b.to_f64_lossless();
                d * d
            })
            .sum::<f64>();
    }
    Ok(total / (rows.len() * data.m).max(1) as f64)
}

/// Adam over shuffled minibatches. Deterministic for a fixed seed.
pub fn train<T: Real>(data: &RetargetDataset, recipe: &TrainRecipe, seed: u64) -> Result<TrainOutcome<T>> {
    recipe.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("retargeting dataset"));
    }
    let _flush = mlp::FlushSubnormals::enable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![POSE_DIM];
    dims.extend(&recipe.hidden);
    dims.push(data.m);
    let mut net = Mlp::<T>::init(&dims, data.lower.clone(), data.upper.clone(), data.hand_tag.clone(), &mut rng)?;
    let mut adam = Adam::new(&net, recipe.learning_rate, recipe.beta1, recipe.beta2, recipe.epsilon);
    let (mut train_rows, validation_rows) = split_rows(data.len(), recipe.validation_fraction, &mut rng);
    let (kept_train, kept_val) = (train_rows.clone(), validation_rows.clone());

    let initial_validation_mse = if validation_rows.is_empty() {
        None
    } else {
        Some(dataset_mse(&net, data, &validation_rows)?)
    };
    let mut history = Vec::with_capacity(recipe.epochs);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for epoch in 1..=recipe.epochs {
        train_rows.shuffle(&mut rng);
        let mut weighted = 0.0;
        for batch in train_rows.chunks(recipe.batch_size) {
            gather(&data.inputs, POSE_DIM, batch, &mut x);
            gather(&data.labels, data.m, batch, &mut y);
            let (loss, grads) = net.backward(&x, &y)?;
            let loss = loss.to_f64_lossless();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            weighted += loss * batch.len() as f64;
            adam.step(&mut net, &grads);
        }
        if !net.all_finite() {
            return Err(Error::Diverged { epoch });
        }
        let validation_mse = if validation_rows.is_empty() {
            None
        } else {
            Some(dataset_mse(&net, data, &validation_rows)?)
        };
        history.push(EpochStats {
            epoch,
            train_mse: weighted / train_rows.len() as f64,
            validation_mse,
        });
    }
    Ok(TrainOutcome {
        network: net,
        history,
        initial_validation_mse,
        train_rows: kept_train,
        validation_rows: kept_val,
    })
}

/// Joint targets for a batch of poses. Outputs are clamped in double
/// precision, so they satisfy the hand's limits exactly.
pub fn predict<T: Real>(net: &Mlp<T>, poses: &[HandPose]) -> Result<Vec<JointConfig>> {
    let x: Vec<T> = poses.iter().flat_map(|p| p.as_slice().iter().map(|v| T::lit(*v))).collect();
    predict_rows(net, &x)
}

/// As [`predict`], on raw `rows x 45` inputs already in the network's type.
pub fn predict_rows<T: Real>(net: &Mlp<T>, x: &[T]) -> Result<Vec<JointConfig>> {
    if net.input_dim() != POSE_DIM {
        return Err(Error::Dimension {
            what: "network input",
            expected: POSE_DIM,
            got: net.input_dim(),
        });
    }
    let raw = net.forward_raw(x)?;
    let (lo, hi) = (net.lower(), net.upper());
    Ok(raw
        .chunks(net.output_dim())
        .map(|row| {
            JointConfig(
                row.iter()
                    .enumerate()
                    .map(|(j, v)| v.to_f64_lossless().clamp(lo[j], hi[j]))
                    .collect(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_validation() {
        assert!(TrainRecipe::default().validate().is_ok());
        for bad in [
            TrainRecipe { epochs: 0, ..Default::default() },
            TrainRecipe { validation_fraction: 0.0, ..Default::default() },
            TrainRecipe { validation_fraction: 1.0, ..Default::default() },
            TrainRecipe { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn split_is_a_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, v) = split_rows(50, 0.1, &mut rng);
        assert_eq!(v.len(), 5);
        let mut all: Vec<usize> = t.into_iter().chain(v).collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_rows(1, 0.1, &mut rng).1.len(), 0);
    }

    #[test]
    fn dataset_rejects_out_of_limit_labels() {
        let err = RetargetDataset::new(vec![0.0; 45], vec![2.0], "h", vec![0.0], vec![1.0]);
        assert!(err.is_err());
        assert!(matches!(
            RetargetDataset::new(vec![], vec![], "h", vec![0.0], vec![1.0]),
            Err(Error::Empty(_))
        ));
    }
}
