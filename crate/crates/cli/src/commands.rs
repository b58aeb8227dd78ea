use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use advns::aux_tree::{self, AuxiliaryTree};
use advns::data_io::{self, LabelPolicy, LoadOptions, PcaProjection, SparseDataset};
use advns::diagnostics::{self, NonparametricProblem};
use advns::inference::{self, PredictionConfig};
use advns::linear_model::LinearClassifier;
use advns::noise::{self, NoiseModel};
use advns::training::{self, Method, TrainConfig};
use anyhow::{Context, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{Config, UsageError};

pub const TRAIN_DS: &str = "train.ds";
pub const VAL_DS: &str = "val.ds";
pub const TEST_DS: &str = "test.ds";
pub const PCA_FILE: &str = "pca.bin";
pub const FEATURE_PCA_FILE: &str = "feature_pca.bin";
pub const TREE_FILE: &str = "aux_tree.bin";
pub const AUX_FIT_FILE: &str = "aux_fit.json";
pub const MODEL_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

pub struct Run<'a> {
    pub command: &'static str,
    pub config: &'a Config,
    pub out: &'a Path,
    pub threads: usize,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    pub fn new(command: &'static str, config: &'a Config, out: &'a Path, threads: usize) -> Self {
        Run {
            command,
            config,
            out,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.inputs.push(p.clone());
        p
    }

    fn external_input(&mut self, p: PathBuf) -> PathBuf {
        self.inputs.push(p.clone());
        p
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.output(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn write_json(&mut self, name: &str, v: &Value) -> Result<()> {
        self.write_text(name, &(serde_json::to_string_pretty(v)? + "\n"))
    }

    /// Writes the effective config and records this command in the manifest.
    pub fn finish(mut self) -> Result<()> {
        let cfg_name = format!("effective_{}.cfg", self.command);
        self.write_text(&cfg_name, &self.config.render())?;
        let path = self.out.join(MANIFEST_FILE);
        let mut manifest: Value = match fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).unwrap_or_else(|_| json!({})),
            Err(_) => json!({}),
        };
        let show = |ps: &[PathBuf]| ps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>();
        manifest[self.command] = json!({
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.config.seed().ok(),
            "threads": self.threads,
            "config": cfg_name,
            "inputs": show(&self.inputs),
            "outputs": show(&self.outputs),
        });
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_with<T: std::str::FromStr<Err = advns::Error>>(cfg: &Config, key: &str, default: &str) -> Result<T> {
    let raw = cfg.raw(key).unwrap_or(default);
    raw.parse::<T>().map_err(|e| usage(format!("config key {key}: {e}")))
}

pub fn preprocess(run: &mut Run<'_>) -> Result<()> {
    let cfg = run.config;
    let seed = cfg.seed()?;
    let opts = LoadOptions {
        one_based_features: cfg.get_or("data.one_based_features", false)?,
        one_based_labels: cfg.get_or("data.one_based_labels", false)?,
        num_features: cfg.get("data.num_features")?,
    };
    let policy: LabelPolicy = parse_with(cfg, "preprocess.policy", "smallest_id")?;
    let pca_k: usize = cfg.get_or("preprocess.pca_k", 16)?;
    let val_fraction: f64 = cfg.get_or("preprocess.validation_fraction", 0.1)?;
    let feature_dim: Option<usize> = cfg.get("preprocess.feature_dim")?;

    let train_path = run.external_input(cfg.require::<PathBuf>("data.train")?);
    let raw = data_io::load_svmlight(&train_path, opts)?;
    let full = data_io::reduce_multilabel(&raw, policy)?;
    info!(
        "{}: {} examples, {} features, {} labels",
        train_path.display(),
        full.len(),
        full.num_features(),
        full.num_labels()
    );
    let (mut train, mut val) = full.split(val_fraction, seed)?;
    let mut test = match cfg.get::<PathBuf>("data.test")? {
        Some(p) => {
            let p = run.external_input(p);
            let raw = data_io::load_svmlight(&p, opts)?;
            let (ds, dropped) = data_io::reduce_multilabel_onto(&raw, policy, full.label_ids(), full.num_features())?;
            if dropped > 0 {
                warn!("test set: dropped {dropped} examples whose label does not occur in training data");
            }
            Some(ds)
        }
        None => None,
    };
    if let Some(k) = feature_dim {
        let fp = data_io::fit_pca(&train, k)?;
        train = train.project(&fp)?;
        val = val.project(&fp)?;
        test = test.map(|t| t.project(&fp)).transpose()?;
        fp.save(&run.output(FEATURE_PCA_FILE))?;
    }
    let pca = data_io::fit_pca(&train, pca_k)?;
    pca.save(&run.output(PCA_FILE))?;
    train.save(&run.output(TRAIN_DS))?;
    val.save(&run.output(VAL_DS))?;
    if let Some(t) = &test {
        t.save(&run.output(TEST_DS))?;
    }
    let summary = json!({
        "train": train.len(),
        "validation": val.len(),
        "test": test.as_ref().map(|t| t.len()),
        "num_features": train.num_features(),
        "num_labels": train.num_labels(),
        "pca_k": pca.k(),
        "pca_rank_deficient": pca.rank_deficient(),
    });
    run.write_json("preprocess.json", &summary)?;
    println!("{summary}");
    Ok(())
}

pub fn fit_aux(run: &mut Run<'_>) -> Result<()> {
    let cfg = run.config;
    cfg.seed()?;
    let lambda_n: f64 = cfg.get_or("aux.lambda_n", aux_tree::DEFAULT_NODE_REGULARIZER)?;
    let train = SparseDataset::load(&run.input(TRAIN_DS))?;
    let pca = PcaProjection::load(&run.input(PCA_FILE))?;
    let start = Instant::now();
    let projected = train.project(&pca)?;
    let (mut tree, report) = aux_tree::fit_tree_with_report(&projected, lambda_n)?;
    let secs = start.elapsed().as_secs_f64();
    tree.set_pca_reference(PCA_FILE);
    tree.save(&run.output(TREE_FILE))?;
    let summary = json!({
        "wall_clock_s": secs,
        "lambda_n": lambda_n,
        "depth": tree.depth(),
        "num_labels": tree.num_labels(),
        "padded_size": tree.padded_size(),
        "nodes_fitted": report.nodes_fitted,
        "padding_routers": report.padding_routers,
        "alternations": report.total_alternations,
        "cycle_guards": report.cycle_guards,
        "newton_unconverged": report.newton_unconverged,
        "degenerate_inits": report.degenerate_inits,
    });
    run.write_json(AUX_FIT_FILE, &summary)?;
    println!("{summary}");
    Ok(())
}

/// Noise kind named by `train.noise`; `none` for the full softmax.
fn noise_kind(cfg: &Config) -> Result<(Method, String)> {
    let method: Method = parse_with(cfg, "train.method", "neg_sampling")?;
    let default = match method {
        Method::SoftmaxFull => "none",
        Method::NegSampling => "uniform",
    };
    let kind = cfg.raw("train.noise").unwrap_or(default).to_string();
    match (method, kind.as_str()) {
        (Method::SoftmaxFull, "none") => {}
        (Method::SoftmaxFull, _) => return Err(usage("train.method = softmax_full permits no noise model")),
        (Method::NegSampling, "uniform" | "frequency" | "adversarial") => {}
        (Method::NegSampling, other) => return Err(usage(format!("unknown noise model '{other}'"))),
    }
    Ok((method, kind))
}

fn build_noise(run: &mut Run<'_>, kind: &str, train: &SparseDataset) -> Result<Option<NoiseModel>> {
    Ok(match kind {
        "none" => None,
        "uniform" => Some(NoiseModel::uniform(train.num_labels())?),
        "frequency" => {
            let s: f64 = run.config.get_or("train.frequency_smoothing", noise::DEFAULT_SMOOTHING)?;
            Some(NoiseModel::frequency(train, s)?)
        }
        "adversarial" => {
            let tree = AuxiliaryTree::load(&run.input(TREE_FILE))?;
            let pca_name = if tree.pca_reference().is_empty() { PCA_FILE } else { tree.pca_reference() }.to_string();
            let pca = PcaProjection::load(&run.input(&pca_name))?;
            Some(NoiseModel::adversarial(tree, pca)?)
        }
        _ => unreachable!("checked by noise_kind"),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

pub fn train(run: &mut Run<'_>) -> Result<()> {
    let cfg = run.config;
    let seed = cfg.seed()?;
    let (method, kind) = noise_kind(cfg)?;
    let tc = TrainConfig {
        method,
        rho: cfg.get_or("train.rho", 0.01)?,
        lambda: cfg.get_or("train.lambda", 0.0)?,
        epochs: cfg.get_or("train.epochs", 1)?,
        seed,
        negatives_per_positive: cfg.get_or("train.negatives", 1)?,
        adagrad_epsilon: 1e-8,
        bias_removal_at_eval: cfg.get_or("eval.bias_removal", true)?,
        log_every_steps: cfg.get_or("train.log_every_steps", training::DEFAULT_LOG_EVERY_STEPS)?,
        threads: run.threads,
    };
    let train = SparseDataset::load(&run.input(TRAIN_DS))?;
    let val_path = run.out.join(VAL_DS);
    let val = if val_path.exists() { Some(SparseDataset::load(&run.input(VAL_DS))?) } else { None };
    let noise = build_noise(run, &kind, &train)?;
    tc.validate(noise.as_ref())?;
    let aux_fit_s = if kind == "adversarial" {
        let p = run.input(AUX_FIT_FILE);
        let v: Value = serde_json::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?;
        v["wall_clock_s"].as_f64().unwrap_or(0.0)
    } else {
        0.0
    };
    let mut model = LinearClassifier::zeros(train.num_labels(), train.num_features());
    let report = training::train(&train, &tc, &mut model, noise.as_ref(), val.as_ref())?;
    model.save(&run.output(MODEL_FILE), cfg.get_or("train.save_accumulators", false)?)?;

    let mut metrics = String::from("epoch,steps,wall_clock_s,train_loss,val_log_lik,val_acc\n");
    for e in &report.epochs {
        metrics += &format!(
            "{},{},{},{},{},{}\n",
            e.epoch,
            e.steps,
            e.wall_clock_s,
            e.train_loss,
            opt(e.val_log_lik),
            opt(e.val_acc)
        );
    }
    run.write_text("metrics.csv", &metrics)?;
    let mut curve = String::from("steps,wall_clock_s,aux_fit_s,val_log_lik,val_acc\n");
    for p in &report.curve {
        curve += &format!("{},{},{},{},{}\n", p.steps, p.wall_clock_s, aux_fit_s, p.val_log_lik, p.val_acc);
    }
    run.write_text("curve.csv", &curve)?;
    if let Some(last) = report.epochs.last() {
        println!(
            "{}",
            json!({"method": method.to_string(), "noise": kind, "epochs": last.epoch, "steps": last.steps,
                   "train_loss": last.train_loss, "val_acc": last.val_acc, "val_log_lik": last.val_log_lik})
        );
    }
    Ok(())
}

pub fn eval(run: &mut Run<'_>) -> Result<()> {
    let cfg = run.config;
    cfg.seed()?;
    let (_, kind) = noise_kind(cfg)?;
    let split: String = cfg.get_or("eval.split", if run.out.join(TEST_DS).exists() { "test".into() } else { "val".into() })?;
    let file = match split.as_str() {
        "train" => TRAIN_DS,
        "val" => VAL_DS,
        "test" => TEST_DS,
        other => return Err(usage(format!("eval.split must be train, val or test, not '{other}'"))),
    };
    let pc = PredictionConfig {
        bias_removal: cfg.get_or("eval.bias_removal", true)?,
        top_k: cfg.get_or("eval.top_k", 1)?,
    };
    let model = LinearClassifier::load(&run.input(MODEL_FILE))?;
    let data = SparseDataset::load(&run.input(file))?;
    // frequency noise is rebuilt from the training counts
    let noise_source = if kind == "frequency" { SparseDataset::load(&run.input(TRAIN_DS))? } else { data.clone() };
    let noise = build_noise(run, &kind, &noise_source)?;
    let r = inference::evaluate(&model, noise.as_ref(), &data, &pc)?;
    let summary = json!({
        "split": split,
        "accuracy": r.accuracy,
        "log_lik": r.log_likelihood,
        "n_points": r.n_points,
        "wall_clock_s": r.wall_clock_s,
        "bias_removal": pc.bias_removal,
        "noise": kind,
    });
    run.write_json("eval.json", &summary)?;
    run.write_text(
        "eval.csv",
        &format!(
            "split,accuracy,log_lik,n_points,wall_clock_s\n{},{},{},{},{}\n",
            split, r.accuracy, r.log_likelihood, r.n_points, r.wall_clock_s
        ),
    )?;
    println!("{summary}");
    Ok(())
}

pub fn diagnose(run: &mut Run<'_>) -> Result<()> {
    let cfg = run.config;
    let seed = cfg.seed()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_scale: f64 = cfg.get_or("diagnose.n_scale", 1.0)?;
    let problem = match cfg.get::<PathBuf>("diagnose.problem")? {
        Some(p) => {
            let p = run.external_input(p);
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let raw: NonparametricProblem = serde_json::from_str(&text).map_err(|e| advns::Error::Format(format!("{}: {e}", p.display())))?;
            NonparametricProblem::new(raw.p_data, raw.p_noise, raw.n_scale)?
        }
        None => {
            let nx: usize = cfg.get_or("diagnose.contexts", 3)?;
            let ny: usize = cfg.get_or("diagnose.labels", 4)?;
            let p_data = diagnostics::random_table(nx, ny, &mut rng);
            let p_noise = match cfg.raw("diagnose.noise").unwrap_or("uniform") {
                "uniform" => vec![vec![1.0 / ny as f64; ny]; nx],
                "data" => p_data.clone(),
                "random" => diagnostics::random_table(nx, ny, &mut rng),
                other => return Err(usage(format!("diagnose.noise must be uniform, data or random, not '{other}'"))),
            };
            NonparametricProblem::new(p_data, p_noise, n_scale)?
        }
    };
    let report = problem.snr()?;

    let samples: usize = cfg.get_or("diagnose.mc_samples", diagnostics::DEFAULT_MC_SAMPLES)?;
    let mc = if samples > 0 {
        let opt = problem.at_optimum()?;
        let blocks = opt.noise_covariance()?;
        let mut worst = 0.0f64;
        let mut pass = true;
        for (x, block) in blocks.iter().enumerate() {
            let est = diagnostics::monte_carlo_block(&opt, x, samples, &mut rng)?;
            for a in 0..block.nrows() {
                for b in 0..block.ncols() {
                    let (e, t) = (est.second_moment[(a, b)], block[(a, b)]);
                    pass &= diagnostics::mc_entry_agrees(e, t);
                    worst = worst.max((e - t).abs());
                }
            }
        }
        Some(json!({"samples": samples, "max_abs_deviation": worst, "pass": pass}))
    } else {
        None
    };
    run.write_json("snr_report.json", &json!({"problem": problem, "report": report, "monte_carlo": mc}))?;

    let count: usize = cfg.get_or("diagnose.candidates", 500)?;
    let mut candidates = vec![problem.p_data.clone(), problem.p_noise.clone()];
    for _ in 0..count {
        candidates.push(diagnostics::random_table(problem.num_contexts(), problem.num_labels(), &mut rng));
    }
    let sweep = diagnostics::snr_sweep(&problem.p_data, &candidates, problem.n_scale)?;
    let mut csv = String::from("candidate,kind,eta_bar,min_sum_alpha_gap\n");
    for e in &sweep {
        let kind = match e.candidate {
            0 => "p_data",
            1 => "given",
            _ => "random",
        };
        csv += &format!("{},{},{},{}\n", e.candidate, kind, e.eta_bar, e.min_sum_alpha_gap);
    }
    run.write_text("sweep.csv", &csv)?;
    let best = sweep.iter().max_by(|a, b| a.eta_bar.total_cmp(&b.eta_bar)).map(|e| e.candidate);
    let summary = json!({"eta_bar": report.eta_bar, "best_candidate": best, "monte_carlo": mc});
    println!("{summary}");
    std::io::stdout().flush().ok();
    Ok(())
}
