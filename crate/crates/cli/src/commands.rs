use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use xdex::eigengrasp::{explained_ratio, EigengraspBasis, EigengraspWeights};
use xdex::formats::{parse_pose_dataset, parse_weight_stream, pose_dataset_binary, pose_dataset_csv};
use xdex::pipeline::{parse_rollout, score_rollout, Backend, EigengraspAction, Mode, Session, ARM_DOF};
use xdex::pose_model::{HandPose, HandSkeleton, POSE_DIM};
use xdex::retarget::{map_targets, resolve_scale, retarget_pose, retarget_step, RetargetConfig};
use xdex::robot_hand::{load_urdf, HandConfig, JointConfig, RobotHandModel};
use xdex::surrogate::{generate_training_set, predict, train, Mlp, TrainRecipe, WEIGHTS_MAGIC};

use crate::manifest::{Inputs, Outputs};
use crate::synth::PoseGenerator;
use crate::{BackendKind, Command, DatasetFormat, SolveArgs, UsageError};

/// Rows per forward pass when predicting whole datasets.
const PREDICT_CHUNK: usize = 4096;

pub fn run(command: Command, seed: u64, jobs: usize) -> Result<()> {
    match command {
        Command::Eigengrasp {
            dataset,
            k,
            uncentered,
            out,
        } => eigengrasp(&dataset, k, !uncentered, &out, seed),
        Command::Retarget {
            basis,
            hand,
            weights,
            out,
            skeleton,
            backend,
            surrogate,
            solve,
            timing,
        } => retarget(RetargetArgs {
            basis,
            hand,
            weights,
            out,
            skeleton,
            backend,
            surrogate,
            solve,
            timing,
            seed,
        }),
        Command::TrainSurrogate {
            hand,
            dataset,
            out,
            skeleton,
            epochs,
            lr,
            batch_size,
            val_fraction,
            hidden,
            loss_csv,
            solve,
        } => {
            let recipe = TrainRecipe {
                hidden,
                epochs,
                learning_rate: lr,
                batch_size,
                validation_fraction: val_fraction,
                ..TrainRecipe::default()
            };
            train_surrogate(&hand, &dataset, &out, skeleton.as_deref(), recipe, loss_csv, &solve, seed, jobs)
        }
        Command::EvalSurrogate {
            hand,
            weights,
            dataset,
            skeleton,
            out,
            bench,
            bench_batch,
            bench_repeats,
            bench_oracle_poses,
            solve,
        } => {
            let bench = bench.then_some(BenchArgs {
                batch: bench_batch,
                repeats: bench_repeats,
                oracle_poses: bench_oracle_poses,
            });
            eval_surrogate(&hand, &weights, &dataset, skeleton.as_deref(), out.as_deref(), bench, &solve, seed, jobs)
        }
        Command::Score { rollout, mode, out } => score(&rollout, mode, out.as_deref(), seed),
        Command::SynthDataset {
            n,
            rank,
            spread,
            noise,
            mean_flexion,
            format,
            out,
        } => {
            let generator = PoseGenerator {
                rank,
                spread,
                noise,
                mean_flexion,
            };
            synth_dataset(&generator, n, format, &out, seed)
        }
        Command::Fk {
            hand,
            q,
            randomize_mount,
            jacobian,
            out,
        } => fk(&hand, q, randomize_mount, jacobian, out.as_deref(), seed),
    }
}

fn load_hand(path: &Path, inputs: &mut Inputs) -> Result<RobotHandModel> {
    let config = HandConfig::from_json(&inputs.read_string(path)?)
        .with_context(|| format!("hand config {}", path.display()))?;
    let urdf_path = if config.urdf_path.is_absolute() {
        config.urdf_path.clone()
    } else {
        path.parent().unwrap_or_else(|| Path::new(".")).join(&config.urdf_path)
    };
    let document = inputs.read_string(&urdf_path)?;
    load_urdf(&document, &config).with_context(|| format!("loading {}", urdf_path.display()))
}

fn load_skeleton(path: Option<&Path>, inputs: &mut Inputs) -> Result<HandSkeleton> {
    match path {
        Some(p) => HandSkeleton::from_json(&inputs.read_string(p)?).with_context(|| format!("skeleton {}", p.display())),
        None => Ok(HandSkeleton::default_hand()),
    }
}

fn load_poses(path: &Path, inputs: &mut Inputs) -> Result<Vec<HandPose>> {
    parse_pose_dataset(&inputs.read(path)?).with_context(|| format!("pose dataset {}", path.display()))
}

fn load_surrogate(path: &Path, inputs: &mut Inputs) -> Result<Mlp<f32>> {
    let bytes = inputs.read(path)?;
    let net = if bytes.starts_with(b"XDEX") || bytes.starts_with(WEIGHTS_MAGIC) {
        Mlp::from_binary(&bytes)
    } else {
        std::str::from_utf8(&bytes)
            .map_err(|_| xdex::Error::Format("weights file is neither binary nor UTF-8 JSON".into()))
            .and_then(Mlp::from_json)
    };
    net.with_context(|| format!("surrogate weights {}", path.display()))
}

fn solve_config(args: &SolveArgs) -> Result<RetargetConfig> {
    let config = RetargetConfig {
        scale: args.scale,
        smoothness_weight: args.smoothness,
        max_iterations: args.max_iters,
        gradient_tolerance: args.gtol,
        ..RetargetConfig::named(&args.objective, &args.solver)?
    };
    config.validate()?;
    Ok(config)
}

fn solve_snapshot(args: &SolveArgs) -> serde_json::Value {
    json!({
        "objective": args.objective,
        "solver": args.solver,
        "scale": args.scale,
        "smoothness": args.smoothness,
        "max_iters": args.max_iters,
        "gtol": args.gtol,
    })
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn eigengrasp(dataset: &Path, k: usize, centered: bool, out: &Path, seed: u64) -> Result<()> {
    let mut inputs = Inputs::default();
    let poses = load_poses(dataset, &mut inputs)?;
    let full_k = POSE_DIM.min(poses.len());
    if k == 0 || k > full_k {
        return Err(xdex::Error::InvalidArgument(format!(
            "k = {k} out of range 1..={full_k} for {} poses",
            poses.len()
        ))
        .into());
    }
    let full = EigengraspBasis::compute(&poses, full_k, centered)?;
    let basis = full.truncated(k)?;
    let mut outputs = Outputs::new(out);
    outputs.write(out, (basis.to_json() + "\n").as_bytes())?;
    outputs.finish("eigengrasp", seed, inputs, json!({ "k": k, "centered": centered }))?;
    print!(
        "{}",
        pretty(&json!({
            "poses": poses.len(),
            "k": k,
            "centered": centered,
            "spectrum": full.eigenvalues(),
            "explained_ratio": explained_ratio(full.eigenvalues(), k),
        }))?
    );
    Ok(())
}

struct RetargetArgs {
    basis: PathBuf,
    hand: PathBuf,
    weights: PathBuf,
    out: PathBuf,
    skeleton: Option<PathBuf>,
    backend: BackendKind,
    surrogate: Option<PathBuf>,
    solve: SolveArgs,
    timing: bool,
    seed: u64,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    t: usize,
    weights: &'a [f64],
    q: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    objective: Option<f64>,
    /// Distance from the previous output (from mid-range at `t = 0`).
    delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_us: Option<f64>,
}

fn retarget(args: RetargetArgs) -> Result<()> {
    let mut inputs = Inputs::default();
    let basis = EigengraspBasis::from_json(&inputs.read_string(&args.basis)?)
        .with_context(|| format!("basis {}", args.basis.display()))?;
    let model = load_hand(&args.hand, &mut inputs)?;
    let skeleton = load_skeleton(args.skeleton.as_deref(), &mut inputs)?;
    let (width, rows) = parse_weight_stream(&inputs.read(&args.weights)?)
        .with_context(|| format!("weight stream {}", args.weights.display()))?;
    if rows.is_empty() {
        return Err(xdex::Error::Empty("weight stream").into());
    }
    if width != basis.k() {
        return Err(xdex::Error::Dimension {
            what: "weight stream width (basis k)",
            expected: basis.k(),
            got: width,
        }
        .into());
    }
    let backend = match (args.backend, &args.surrogate) {
        (BackendKind::Oracle, None) => Backend::Oracle,
        (BackendKind::Oracle, Some(_)) => {
            return Err(UsageError("--surrogate is only used with --backend surrogate".into()).into())
        }
        (BackendKind::Surrogate, Some(path)) => Backend::Surrogate(Arc::new(load_surrogate(path, &mut inputs)?)),
        (BackendKind::Surrogate, None) => {
            return Err(UsageError("--backend surrogate requires --surrogate <weights>".into()).into())
        }
    };
    let config = solve_config(&args.solve)?;
    let mut prev = model.mid_range();
    let mut session = Session::new(Arc::new(basis), Arc::new(skeleton), Arc::new(model), config, backend)?;

    let mut text = String::new();
    let mut last_delta = f64::NAN;
    for (t, w) in rows.iter().enumerate() {
        let action = EigengraspAction {
            arm_targets: [0.0; ARM_DOF],
            weights: EigengraspWeights(w.clone()),
        };
        let start = Instant::now();
        let out = session.act(&action).with_context(|| format!("step {t}"))?;
        let elapsed = start.elapsed();
        let q = out.hand_targets.as_slice();
        last_delta = q.iter().zip(prev.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let record = StepRecord {
            t,
            weights: w,
            q,
            objective: out.objective,
            delta: last_delta,
            elapsed_us: args.timing.then(|| elapsed.as_secs_f64() * 1e6),
        };
        text.push_str(&serde_json::to_string(&record)?);
        text.push('\n');
        prev = out.hand_targets;
    }

    let mut outputs = Outputs::new(&args.out);
    outputs.write(&args.out, text.as_bytes())?;
    let backend_name = match args.backend {
        BackendKind::Oracle => "oracle",
        BackendKind::Surrogate => "surrogate",
    };
    let config = json!({
        "backend": backend_name,
        "solve": solve_snapshot(&args.solve),
        "timing": args.timing,
    });
    outputs.finish("retarget", args.seed, inputs, config)?;
    print!(
        "{}",
        pretty(&json!({ "steps": rows.len(), "backend": backend_name, "final_delta": last_delta }))?
    );
    Ok(())
}

/// Mean fingertip distance between two configurations, through fk.
fn fingertip_error(model: &RobotHandModel, a: &[f64], b: &[f64]) -> Result<f64> {
    let fa = model.fk_slice(a)?;
    let fb = model.fk_slice(b)?;
    let n = fa.tips.len().max(1) as f64;
    Ok(fa.tips.iter().zip(&fb.tips).map(|(x, y)| (x - y).norm()).sum::<f64>() / n)
}

/// Chunked prediction over a whole pose list.
fn predict_all(net: &Mlp<f32>, poses: &[HandPose]) -> Result<Vec<JointConfig>> {
    let mut out = Vec::with_capacity(poses.len());
    for chunk in poses.chunks(PREDICT_CHUNK) {
        out.extend(predict(net, chunk)?);
    }
    Ok(out)
}

#[derive(Debug, Default, Serialize)]
struct ErrorSummary {
    rows: usize,
    mean_tip_error: f64,
    max_tip_error: f64,
}

fn summarize_errors(
    model: &RobotHandModel,
    predictions: &[JointConfig],
    labels: impl Fn(usize) -> Vec<f64>,
    rows: &[usize],
) -> Result<ErrorSummary> {
    let mut summary = ErrorSummary {
        rows: rows.len(),
        ..ErrorSummary::default()
    };
    for &r in rows {
        let e = fingertip_error(model, predictions[r].as_slice(), &labels(r))?;
        summary.mean_tip_error += e;
        summary.max_tip_error = summary.max_tip_error.max(e);
    }
    summary.mean_tip_error /= rows.len().max(1) as f64;
    Ok(summary)
}

#[derive(Serialize)]
struct TrainReport {
    hand: String,
    samples: usize,
    epochs: usize,
    first_epoch_train_mse: f64,
    final_train_mse: f64,
    initial_validation_mse: Option<f64>,
    final_validation_mse: Option<f64>,
    train: ErrorSummary,
    validation: ErrorSummary,
    predictions_feasible: bool,
}

#[allow(clippy::too_many_arguments)]
fn train_surrogate(
    hand: &Path,
    dataset: &Path,
    out: &Path,
    skeleton: Option<&Path>,
    recipe: TrainRecipe,
    loss_csv: Option<PathBuf>,
    solve: &SolveArgs,
    seed: u64,
    jobs: usize,
) -> Result<()> {
    let mut inputs = Inputs::default();
    let model = load_hand(hand, &mut inputs)?;
    let skeleton = load_skeleton(skeleton, &mut inputs)?;
    let poses = load_poses(dataset, &mut inputs)?;
    recipe.validate()?;
    let config = solve_config(solve)?;
    let data = generate_training_set(&model, &skeleton, &poses, &config, jobs).context("labeling poses")?;
    let outcome = train::<f32>(&data, &recipe, seed).context("training surrogate")?;
    let net = &outcome.network;

    let predictions = predict_all(net, &poses)?;
    let label = |r: usize| data.label(r).to_vec();
    let report = TrainReport {
        hand: model.name().to_string(),
        samples: data.len(),
        epochs: recipe.epochs,
        first_epoch_train_mse: outcome.history[0].train_mse,
        final_train_mse: outcome.history.last().unwrap().train_mse,
        initial_validation_mse: outcome.initial_validation_mse,
        final_validation_mse: outcome.history.last().unwrap().validation_mse,
        train: summarize_errors(&model, &predictions, label, &outcome.train_rows)?,
        validation: summarize_errors(&model, &predictions, label, &outcome.validation_rows)?,
        predictions_feasible: predictions.iter().all(|q| model.within_limits(q.as_slice())),
    };

    let mut loss = String::from("epoch,train_mse,validation_mse\n");
    for e in &outcome.history {
        let val = e.validation_mse.map(xdex::formats::format_float).unwrap_or_default();
        loss.push_str(&format!("{},{},{}\n", e.epoch, xdex::formats::format_float(e.train_mse), val));
    }
    let weights = if out.extension().is_some_and(|e| e == "bin") {
        net.to_binary()
    } else {
        (net.to_json() + "\n").into_bytes()
    };
    let loss_path = loss_csv.unwrap_or_else(|| with_suffix(out, ".loss.csv"));
    let report_text = pretty(&report)?;

    let mut outputs = Outputs::new(out);
    outputs.write(out, &weights)?;
    outputs.write(&loss_path, loss.as_bytes())?;
    outputs.write(&with_suffix(out, ".report.json"), report_text.as_bytes())?;
    let config = json!({
        "hidden": recipe.hidden,
        "epochs": recipe.epochs,
        "learning_rate": recipe.learning_rate,
        "beta1": recipe.beta1,
        "beta2": recipe.beta2,
        "epsilon": recipe.epsilon,
        "batch_size": recipe.batch_size,
        "validation_fraction": recipe.validation_fraction,
        "precision": "f32",
        "solve": solve_snapshot(solve),
    });
    outputs.finish("train-surrogate", seed, inputs, config)?;
    print!("{report_text}");
    Ok(())
}

struct BenchArgs {
    batch: usize,
    repeats: usize,
    oracle_poses: usize,
}

#[derive(Serialize)]
struct BenchReport {
    batch: usize,
    repeats: usize,
    predict_seconds: f64,
    predict_per_sec: f64,
    oracle_poses: usize,
    /// Mid-range start, smoothness off: the map the surrogate is trained on.
    oracle_per_sec: f64,
    /// Warm-started from the previous output with the configured smoothness.
    streaming_oracle_per_sec: f64,
    speedup_vs_oracle: f64,
    speedup_vs_streaming_oracle: f64,
}

/// Fastest of `repeats` timed runs, in seconds.
fn best_of(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

fn bench(
    net: &Mlp<f32>,
    model: &RobotHandModel,
    skeleton: &HandSkeleton,
    poses: &[HandPose],
    config: &RetargetConfig,
    args: &BenchArgs,
) -> Result<BenchReport> {
    if args.batch == 0 || args.oracle_poses == 0 {
        return Err(UsageError("bench sizes must be at least 1".into()).into());
    }
    let batch: Vec<HandPose> = (0..args.batch).map(|i| poses[i % poses.len()].clone()).collect();
    predict(net, &batch)?;
    let predict_seconds = best_of(args.repeats, || predict(net, &batch).map(|_| ()).map_err(Into::into))?;

    let sequence: Vec<&HandPose> = (0..args.oracle_poses).map(|i| &poses[i % poses.len()]).collect();
    let labeling = config.clone().with_smoothness(0.0);
    let scale = resolve_scale(model, skeleton, config)?;
    let oracle_seconds = best_of(args.repeats, || {
        for pose in &sequence {
            retarget_pose(model, skeleton, pose, scale, &labeling)?;
        }
        Ok(())
    })?;
    let streaming_seconds = best_of(args.repeats, || {
        let mut q = model.mid_range();
        for pose in &sequence {
            let targets = map_targets(&skeleton.keypoints(pose), model, scale)?;
            q = retarget_step(model, &targets, &q, config)?;
        }
        Ok(())
    })?;

    let predict_per_sec = args.batch as f64 / predict_seconds;
    let oracle_per_sec = args.oracle_poses as f64 / oracle_seconds;
    let streaming_oracle_per_sec = args.oracle_poses as f64 / streaming_seconds;
    Ok(BenchReport {
        batch: args.batch,
        repeats: args.repeats,
        predict_seconds,
        predict_per_sec,
        oracle_poses: args.oracle_poses,
        oracle_per_sec,
        streaming_oracle_per_sec,
        speedup_vs_oracle: predict_per_sec / oracle_per_sec,
        speedup_vs_streaming_oracle: predict_per_sec / streaming_oracle_per_sec,
    })
}

#[derive(Serialize)]
struct EvalReport {
    hand: String,
    errors: ErrorSummary,
    predictions_feasible: bool,
}

#[allow(clippy::too_many_arguments)]
fn eval_surrogate(
    hand: &Path,
    weights: &Path,
    dataset: &Path,
    skeleton: Option<&Path>,
    out: Option<&Path>,
    bench_args: Option<BenchArgs>,
    solve: &SolveArgs,
    seed: u64,
    jobs: usize,
) -> Result<()> {
    let mut inputs = Inputs::default();
    let model = load_hand(hand, &mut inputs)?;
    let skeleton = load_skeleton(skeleton, &mut inputs)?;
    let net = load_surrogate(weights, &mut inputs)?;
    let poses = load_poses(dataset, &mut inputs)?;
    if net.hand_tag() != model.name() || net.output_dim() != model.dof() || net.input_dim() != POSE_DIM {
        return Err(xdex::Error::TagMismatch(format!(
            "weights for `{}` ({} -> {}) do not fit `{}` with {} joints",
            net.hand_tag(),
            net.input_dim(),
            net.output_dim(),
            model.name(),
            model.dof()
        ))
        .into());
    }
    let config = solve_config(solve)?;
    let data = generate_training_set(&model, &skeleton, &poses, &config, jobs).context("labeling poses")?;
    let predictions = predict_all(&net, &poses)?;
    let rows: Vec<usize> = (0..poses.len()).collect();
    let report = EvalReport {
        hand: model.name().to_string(),
        errors: summarize_errors(&model, &predictions, |r| data.label(r).to_vec(), &rows)?,
        predictions_feasible: predictions.iter().all(|q| model.within_limits(q.as_slice())),
    };
    let report_text = pretty(&report)?;
    if let Some(out) = out {
        let mut outputs = Outputs::new(out);
        outputs.write(out, report_text.as_bytes())?;
        outputs.finish("eval-surrogate", seed, inputs, json!({ "solve": solve_snapshot(solve) }))?;
    }
    print!("{report_text}");
    // Timings go to stdout only, so written artifacts stay reproducible.
    if let Some(args) = bench_args {
        let timing = bench(&net, &model, &skeleton, &poses, &config, &args)?;
        print!("{}", pretty(&json!({ "bench": timing }))?);
    }
    Ok(())
}

fn score(rollout: &Path, mode: Mode, out: Option<&Path>, seed: u64) -> Result<()> {
    let mut inputs = Inputs::default();
    let text = inputs.read_string(rollout)?;
    let scenes = parse_rollout(&text).with_context(|| format!("rollout {}", rollout.display()))?;
    let summary = score_rollout(&scenes, mode)?;
    let text = pretty(&summary)?;
    if let Some(out) = out {
        let mut outputs = Outputs::new(out);
        outputs.write(out, text.as_bytes())?;
        outputs.finish("score", seed, inputs, json!({ "mode": mode }))?;
    }
    print!("{text}");
    Ok(())
}

fn synth_dataset(generator: &PoseGenerator, n: usize, format: Option<DatasetFormat>, out: &Path, seed: u64) -> Result<()> {
    if n == 0 {
        return Err(xdex::Error::InvalidArgument("--n must be at least 1".into()).into());
    }
    let poses = generator.sample(n, seed)?;
    let format = format.unwrap_or(if out.extension().is_some_and(|e| e == "csv") {
        DatasetFormat::Csv
    } else {
        DatasetFormat::Bin
    });
    let bytes = match format {
        DatasetFormat::Bin => pose_dataset_binary(&poses),
        DatasetFormat::Csv => pose_dataset_csv(&poses).into_bytes(),
    };
    let mut outputs = Outputs::new(out);
    outputs.write(out, &bytes)?;
    let config = json!({
        "n": n,
        "generator": generator,
        "format": match format { DatasetFormat::Bin => "bin", DatasetFormat::Csv => "csv" },
    });
    outputs.finish("synth-dataset", seed, Inputs::default(), config)?;
    Ok(())
}

#[derive(Serialize)]
struct TipRecord<'a> {
    finger: xdex::Finger,
    link: &'a str,
    position: [f64; 3],
}

#[derive(Serialize)]
struct FkReport<'a> {
    hand: &'a str,
    joints: Vec<&'a str>,
    q: &'a [f64],
    palm: [f64; 3],
    tips: Vec<TipRecord<'a>>,
    /// Rows are (palm xyz, tip xyz...), columns actuated joints.
    #[serde(skip_serializing_if = "Option::is_none")]
    jacobian: Option<Vec<Vec<f64>>>,
}

fn fk(hand: &Path, q: Option<Vec<f64>>, mount_sigma: Option<f64>, with_jacobian: bool, out: Option<&Path>, seed: u64) -> Result<()> {
    let mut inputs = Inputs::default();
    let mut model = load_hand(hand, &mut inputs)?;
    if let Some(sigma) = mount_sigma {
        model = model.randomize_mount(sigma, seed)?;
    }
    let q = q.unwrap_or_else(|| model.mid_range().0);
    model.check_config(&q)?;
    let (frames, jac) = model.fk_with_jacobian(&q)?;
    let tips = model
        .fingertips()
        .iter()
        .enumerate()
        .zip(&frames.tips)
        .map(|((i, tip), p)| TipRecord {
            finger: tip.finger,
            link: model.tip_link_name(i),
            position: (*p).into(),
        })
        .collect();
    let report = FkReport {
        hand: model.name(),
        joints: model.actuated_names(),
        q: &q,
        palm: frames.palm.into(),
        tips,
        jacobian: with_jacobian.then(|| jac.row_iter().map(|r| r.iter().copied().collect()).collect()),
    };
    let text = pretty(&report)?;
    if let Some(out) = out {
        let mut outputs = Outputs::new(out);
        outputs.write(out, text.as_bytes())?;
        outputs.finish(
            "fk",
            seed,
            inputs,
            json!({ "q": q, "randomize_mount": mount_sigma, "jacobian": with_jacobian }),
        )?;
    }
    print!("{text}");
    Ok(())
}
