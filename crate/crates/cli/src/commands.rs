use std::io::Write;
use std::path::Path;

use cavstat::cav::{class_moments, CavMethod, Estimator};
use cavstat::classify::{
    predict_accuracy, AccuracyOptions, CavTreatment, ClassWeights, GaussianSpec,
};
use cavstat::ingest::{self, Dtype};
use cavstat::rmt::{fixed_point_for, ridge_cav_variance, ridge_deterministic_mean, FixedPointOptions};
use cavstat::simulate::{
    classification_points, default_config, run_experiment, AlphaChoice, ClassificationConfig, ClassificationPoint,
    ExperimentConfig, ExperimentKind, SimulationReport,
};
use cavstat::statfun::{logit_normal, Sharpness};
use cavstat::tcav::{
    alpha_dagger, alpha_star, alpha_tcav, calibrate, multi_tcav, predict_tcav_distribution, sensitivity_scores,
    tcav_indicator, CalibrationOptions, CalibrationResult, TcavMethod, TcavPrediction,
};
use cavstat::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::args::*;
use crate::run::{with_suffix, Metadata, Outputs};

fn estimator(method: MethodArg, lambda: Option<f64>) -> Result<Estimator> {
    match method {
        MethodArg::Pattern => Ok(Estimator::Pattern),
        MethodArg::Fast => Ok(Estimator::Fast),
        MethodArg::Ridge => lambda
            .map(|lambda| Estimator::Ridge { lambda })
            .ok_or_else(|| Error::Parameter("ridge needs --lambda".into())),
    }
}

fn load(path: &Path) -> Result<DMatrix<f64>> {
    ingest::read_any(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn csv_line(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct TheorySummary {
    mean: Vec<f64>,
    cov_trace: f64,
    /// Set when the ridge plug-in variance was clamped at zero.
    #[serde(skip_serializing_if = "Option::is_none")]
    variance_clamped: Option<bool>,
}

#[derive(Serialize)]
struct CavSidecar {
    metadata: Metadata,
    method: CavMethod,
    n1: usize,
    n2: usize,
    lambda: Option<f64>,
    dim: usize,
    theory: Option<TheorySummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theory_note: Option<String>,
}

fn cav_theory(est: &Estimator, concept: &DMatrix<f64>, random: &DMatrix<f64>) -> Result<TheorySummary> {
    let m1 = class_moments(random)?;
    let m2 = class_moments(concept)?;
    match *est {
        Estimator::Ridge { lambda } => {
            let st = fixed_point_for(&m1, &m2, lambda, &FixedPointOptions::default())?;
            let wbar = ridge_deterministic_mean(&st, &m1.mean, &m2.mean)?;
            let var = ridge_cav_variance(&st, &m1, &m2)?;
            Ok(TheorySummary { mean: wbar.iter().copied().collect(), cov_trace: var.value, variance_clamped: Some(var.clamped) })
        }
        _ => {
            let mut fit = est.fit(concept, random)?;
            fit.attach_theory(&m1, &m2)?;
            let th = fit.theory.expect("theory attached");
            Ok(TheorySummary { mean: th.mean.iter().copied().collect(), cov_trace: th.cov.trace(), variance_clamped: None })
        }
    }
}

pub fn cmd_cav(a: &CavArgs, meta: Metadata) -> Result<Outputs> {
    let concept = load(&a.concept)?;
    let random = load(&a.random)?;
    let est = estimator(a.method, a.lambda)?;
    let fit = est.fit(&concept, &random)?;
    let (theory, theory_note) = match cav_theory(&est, &concept, &random) {
        Ok(t) => (Some(t), None),
        Err(e @ (Error::InsufficientSamples(_) | Error::OutOfRegime(_) | Error::Convergence { .. })) => {
            log::warn!("no theoretical law for this CAV: {e}");
            (None, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    let w = DMatrix::from_row_slice(1, fit.w.len(), fit.w.as_slice());
    let mut bytes = Vec::new();
    let dtype = match a.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    ingest::write_matrix_to(&w, &mut bytes, dtype, false)?;
    let sidecar = CavSidecar {
        metadata: meta,
        method: fit.method,
        n1: fit.n1,
        n2: fit.n2,
        lambda: fit.lambda,
        dim: fit.w.len(),
        theory,
        theory_note,
    };
    let mut out = Outputs::default();
    out.add(&a.out, &bytes)?;
    out.add_json(with_suffix(&a.out, ".json"), &sidecar)?;
    Ok(out)
}

fn read_cav(path: &Path) -> Result<DVector<f64>> {
    let m = load(path)?;
    if m.nrows() == 1 || m.ncols() == 1 {
        Ok(DVector::from_iterator(m.len(), m.transpose().iter().copied()))
    } else {
        Err(Error::Data(format!("CAV file is {}x{}, expected a single row or column", m.nrows(), m.ncols())))
    }
}

fn sidecar_counts(cav: &Path) -> Option<(usize, usize)> {
    let text = std::fs::read_to_string(with_suffix(cav, ".json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    Some((v.get("n1")?.as_u64()? as usize, v.get("n2")?.as_u64()? as usize))
}

#[derive(Serialize)]
struct ScoreParams {
    mode: ScoreMode,
    alpha: Option<Sharpness>,
    calibrate: Option<CalibrateArg>,
    normalize: bool,
    s: usize,
    n_train: Option<usize>,
    n_samples: usize,
}

/// Joint law of the α-TCAV score under the fitted Gaussian model.
#[derive(Serialize)]
struct JointPrediction {
    mean: f64,
    variance: f64,
}

#[derive(Serialize)]
struct ScoreReport {
    metadata: Metadata,
    method: ScoreMode,
    score: f64,
    params: ScoreParams,
    gamma: Option<f64>,
    sigma_eff: Option<f64>,
    alpha_star: Option<f64>,
    alpha_dagger: Option<f64>,
    per_subset: Option<Vec<f64>>,
    joint: Option<JointPrediction>,
}

pub fn cmd_score(a: &ScoreArgs, meta: Metadata) -> Result<Outputs> {
    let grads = load(&a.grads)?;
    let n_samples = grads.nrows();
    let mut out = Outputs::default();

    if a.mode == ScoreMode::Multi {
        let (Some(c), Some(r)) = (&a.concept, &a.random) else {
            return Err(Error::Parameter("multi mode needs --concept and --random".into()));
        };
        let (concept, random) = (load(c)?, load(r)?);
        let m = multi_tcav(&concept, &random, &grads, a.s, estimator(a.method, a.lambda)?, meta.seed)?;
        let report = ScoreReport {
            method: a.mode,
            score: m.score,
            params: ScoreParams {
                mode: a.mode,
                alpha: None,
                calibrate: None,
                normalize: a.normalize,
                s: a.s,
                n_train: Some(concept.nrows() + random.nrows()),
                n_samples,
            },
            gamma: None,
            sigma_eff: None,
            alpha_star: None,
            alpha_dagger: None,
            per_subset: Some(m.per_subset),
            joint: None,
            metadata: meta,
        };
        if let Some(p) = &a.out {
            out.add_json(p, &report)?;
        } else {
            print_json(&report)?;
        }
        return Ok(out);
    }

    let cav_path = a.cav.as_ref().ok_or_else(|| Error::Parameter("--cav is required outside multi mode".into()))?;
    let w = read_cav(cav_path)?;
    let n_train = match (a.n_train, sidecar_counts(cav_path)) {
        (Some(n), _) => n,
        (None, Some((n1, n2))) => match a.effective_n {
            EffectiveN::Both => n1 + n2,
            EffectiveN::Concept => n2,
        },
        (None, None) => {
            return Err(Error::Parameter("training sample count unknown: pass --n-train or keep the CAV sidecar".into()))
        }
    };
    let batch = sensitivity_scores(&grads, &w, n_train)?;

    if a.mode == ScoreMode::Indicator {
        let report = ScoreReport {
            method: a.mode,
            score: tcav_indicator(&batch)?,
            params: ScoreParams {
                mode: a.mode,
                alpha: Some(Sharpness::Infinite),
                calibrate: None,
                normalize: a.normalize,
                s: a.s,
                n_train: Some(n_train),
                n_samples,
            },
            gamma: None,
            sigma_eff: None,
            alpha_star: None,
            alpha_dagger: None,
            per_subset: None,
            joint: None,
            metadata: meta,
        };
        if let Some(p) = &a.out {
            out.add_json(p, &report)?;
        } else {
            print_json(&report)?;
        }
        return Ok(out);
    }

    let mut opts = CalibrationOptions::new(a.s);
    opts.sigma_override = a.sigma;
    if !a.normalize {
        opts.gamma_override = Some(1.0);
    }
    let cal: CalibrationResult = calibrate(&batch, &opts)?;
    let calib = if a.mode == ScoreMode::Dagger { CalibrateArg::Dagger } else { a.calibrate };
    let alpha = match (a.mode, a.alpha) {
        (ScoreMode::Alpha, Some(al)) => al,
        _ => match calib {
            CalibrateArg::Star => Sharpness::finite(cal.alpha_star.ok_or_else(|| {
                Error::Parameter("--calibrate star needs --s >= 2; use --calibrate dagger for a single CAV".into())
            })?)?,
            CalibrateArg::Dagger => Sharpness::finite(cal.alpha_dagger)?,
        },
    };
    let scored = if a.normalize { batch.normalized(cal.gamma)? } else { batch.clone() };
    let score = alpha_tcav(&scored, alpha)?;
    // The normalised score with α equals the raw score with α/γ.
    let raw_alpha = match alpha {
        Sharpness::Finite(x) => Sharpness::finite(x / cal.gamma)?,
        Sharpness::Infinite => Sharpness::Infinite,
    };
    let mu_hat = batch.scores.iter().sum::<f64>() / batch.len() as f64;
    let ln = logit_normal(mu_hat, cal.sigma_eff * cal.sigma_eff / n_train as f64, raw_alpha)?;

    if let Some(csv) = &a.csv {
        let mut grid: Vec<(String, Sharpness)> = [0.5, 1.0, 2.0, 3.0, 5.0]
            .iter()
            .map(|&x| (format!("alpha={x}"), Sharpness::Finite(x)))
            .collect();
        if let Some(st) = cal.alpha_star {
            grid.push(("alpha_star".into(), Sharpness::finite(st)?));
        }
        grid.push(("alpha_dagger".into(), Sharpness::finite(cal.alpha_dagger)?));
        grid.push(("indicator".into(), Sharpness::Infinite));
        let mut text = String::from("label,alpha,score\n");
        for (label, al) in grid {
            text.push_str(&csv_line(&[label, al.to_string(), alpha_tcav(&scored, al)?.to_string()]));
        }
        out.add(csv, text.as_bytes())?;
    }

    let report = ScoreReport {
        method: a.mode,
        score,
        params: ScoreParams {
            mode: a.mode,
            alpha: Some(alpha),
            calibrate: a.alpha.filter(|_| a.mode == ScoreMode::Alpha).map_or(Some(calib), |_| None),
            normalize: a.normalize,
            s: a.s,
            n_train: Some(n_train),
            n_samples,
        },
        gamma: Some(cal.gamma),
        sigma_eff: Some(cal.sigma_eff),
        alpha_star: cal.alpha_star,
        alpha_dagger: Some(cal.alpha_dagger),
        per_subset: None,
        joint: Some(JointPrediction { mean: ln.m, variance: ln.v }),
        metadata: meta,
    };
    if let Some(p) = &a.out {
        out.add_json(p, &report)?;
    } else {
        print_json(&report)?;
    }
    Ok(out)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{text}")?;
    Ok(())
}

#[derive(Serialize)]
struct PredictReport {
    metadata: Metadata,
    #[serde(flatten)]
    prediction: TcavPrediction,
}

pub fn cmd_predict(a: &PredictArgs, meta: Metadata) -> Result<Outputs> {
    let (method, alpha) = match a.method {
        PredictMethod::Indicator => (TcavMethod::Indicator, None),
        PredictMethod::Multi => (TcavMethod::Multi, None),
        PredictMethod::Alpha => {
            let al = match a.alpha {
                AlphaChoice::Fixed(x) => x,
                AlphaChoice::Star => {
                    if a.s == 0 || a.n_total % a.s != 0 {
                        return Err(Error::Parameter(format!("alpha* needs s dividing N (N = {}, s = {})", a.n_total, a.s)));
                    }
                    Sharpness::finite(alpha_star(a.sigma, a.n_total / a.s, a.s)?)?
                }
                AlphaChoice::Dagger => Sharpness::finite(alpha_dagger(a.sigma, a.n_total)?)?,
            };
            (TcavMethod::Alpha, Some(al))
        }
    };
    let p = predict_tcav_distribution(a.mu, a.sigma, a.n_total, a.s, alpha, method)?;
    let report = PredictReport { metadata: meta, prediction: p };
    let mut out = Outputs::default();
    match &a.out {
        None => print_json(&report)?,
        Some(prefix) => {
            let opt = |x: Option<String>| x.unwrap_or_default();
            let mut text = String::from("method,mean,variance,mu,sigma,n_total,s,alpha\n");
            text.push_str(&csv_line(&[
                format!("{:?}", p.method).to_lowercase(),
                p.mean.to_string(),
                p.variance.to_string(),
                p.params.mu.to_string(),
                p.params.sigma.to_string(),
                p.params.n_total.to_string(),
                opt(p.params.s.map(|s| s.to_string())),
                opt(p.params.alpha.map(|s| s.to_string())),
            ]));
            out.add_json(with_suffix(prefix, ".json"), &report)?;
            out.add(with_suffix(prefix, ".csv"), text.as_bytes())?;
        }
    }
    Ok(out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    metadata: Metadata,
    kind: ExperimentKind,
    config: &'a ExperimentConfig,
    report: &'a SimulationReport,
}

pub fn cmd_simulate(a: &SimulateArgs, meta: Metadata) -> Result<Outputs> {
    let mut cfg = match &a.config {
        Some(p) => {
            // Fields absent from the file keep the defaults of the chosen sweep.
            let base = serde_json::to_value(default_config(a.kind)).map_err(|e| Error::Config(e.to_string()))?;
            let over: serde_json::Value = read_json(p)?;
            let mut merged = base;
            if let (Some(m), serde_json::Value::Object(o)) = (merged.as_object_mut(), over) {
                m.extend(o);
            }
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => default_config(a.kind),
    };
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(v) = &a.mu {
        cfg.mu = v.clone();
    }
    if let Some(v) = &a.n_total {
        cfg.n_total = v.clone();
    }
    if let Some(v) = &a.s {
        cfg.s = v.clone();
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = &a.alphas {
        cfg.alphas = v.clone();
    }
    if let Some(v) = a.sigma_source {
        cfg.sigma_source = v.into();
    }
    if a.batch_size.is_some() {
        cfg.batch_size = a.batch_size;
    }
    cfg.seed = meta.seed;
    let report = run_experiment(a.kind, &cfg)?;
    let mut out = Outputs::default();
    out.add(with_suffix(&a.out, ".csv"), report.to_csv().as_bytes())?;
    out.add_json(with_suffix(&a.out, ".json"), &SimulateOutput { metadata: meta, kind: a.kind, config: &cfg, report: &report })?;
    Ok(out)
}

#[derive(Serialize)]
struct AccuracyReport {
    metadata: Metadata,
    method: Estimator,
    eta_star: f64,
    error: f64,
    accuracy: f64,
    spec1: GaussianSpec,
    spec2: GaussianSpec,
    weights: (f64, f64),
    treatment: CavTreatment,
}

#[derive(Serialize)]
struct SyntheticReport<'a> {
    metadata: Metadata,
    config: &'a ClassificationConfig,
    points: &'a [ClassificationPoint],
}

fn weights(w: WeightsArg) -> ClassWeights {
    match w {
        WeightsArg::Empirical => ClassWeights::Empirical,
        WeightsArg::Balanced => ClassWeights::Balanced,
    }
}

pub fn cmd_classify(a: &ClassifyArgs, meta: Metadata) -> Result<Outputs> {
    let mut out = Outputs::default();
    if a.synthetic {
        let mut cfg: ClassificationConfig = match &a.config {
            Some(p) => read_json(p)?,
            None => ClassificationConfig::default(),
        };
        if let Some(v) = a.d {
            cfg.d = v;
        }
        if let Some(v) = a.n1 {
            cfg.n1 = v;
        }
        if let Some(v) = a.n2 {
            cfg.n2 = v;
        }
        if let Some(v) = a.test_points {
            cfg.test_points = v;
        }
        if let Some(v) = &a.lambdas {
            cfg.lambdas = v.clone();
        }
        if let Some(w) = a.weights {
            cfg.weights = weights(w);
        }
        let points = classification_points(&cfg, meta.seed)?;
        let mut text = String::from("estimator,lambda,predicted_error,empirical_error,stderr,agreement\n");
        for p in &points {
            let lambda = match p.estimator {
                Estimator::Ridge { lambda } => lambda.to_string(),
                _ => String::new(),
            };
            text.push_str(&csv_line(&[
                p.estimator.method().to_string(),
                lambda,
                p.predicted_error.to_string(),
                p.empirical_error.to_string(),
                p.stderr.to_string(),
                p.agrees().to_string(),
            ]));
        }
        out.add(with_suffix(&a.out, ".csv"), text.as_bytes())?;
        out.add_json(with_suffix(&a.out, ".json"), &SyntheticReport { metadata: meta, config: &cfg, points: &points })?;
        return Ok(out);
    }

    let (Some(c), Some(r)) = (&a.concept, &a.random) else {
        return Err(Error::Parameter("classify needs --concept and --random, or --synthetic".into()));
    };
    let (concept, random) = (load(c)?, load(r)?);
    let mut opts = AccuracyOptions::new(estimator(a.method, a.lambda)?);
    opts.treatment = match a.treatment {
        TreatmentArg::Fixed => CavTreatment::Fixed,
        TreatmentArg::Random => CavTreatment::Random,
    };
    if let Some(w) = a.weights {
        opts.weights = weights(w);
    }
    let p = predict_accuracy(&concept, &random, &opts)?;
    let mut text = String::from("class,label,mean,var,sd,eta_star\n");
    for (class, label, g) in [(1, "random", &p.spec1), (2, "concept", &p.spec2)] {
        text.push_str(&csv_line(&[
            class.to_string(),
            label.into(),
            g.mean.to_string(),
            g.var.to_string(),
            g.sd().to_string(),
            p.eta_star.to_string(),
        ]));
    }
    let report = AccuracyReport {
        metadata: meta,
        method: p.method,
        eta_star: p.eta_star,
        error: p.error,
        accuracy: p.accuracy,
        spec1: p.spec1,
        spec2: p.spec2,
        weights: p.weights,
        treatment: p.treatment,
    };
    out.add_json(with_suffix(&a.out, ".json"), &report)?;
    out.add(with_suffix(&a.out, ".csv"), text.as_bytes())?;
    Ok(out)
}
