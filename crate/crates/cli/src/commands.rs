use std::path::Path;

use qattn::checkpoint;
use qattn::diagnostics::{analyze_with, attention_trace, dump_attention_patterns};
use qattn::experiment::ExperimentConfig;
use qattn::model::{eval_loss, perplexity, Batch, ModelConfig, ModelParams};
use qattn::quant::{bitwidth_sweep, calibrate_and_quantize, sweep_csv, QuantConfig, QuantizedModel, RangeEstimator};
use qattn::report::{RunRecord, RunReport, Stat, RUN_REPORT_SCHEMA_VERSION};
use qattn::sites::NoHook;
use qattn::training::{self, eval_set, fixed_batches, metrics_csv, variant_preset, CorpusDataset, TrainConfig};
use qattn::{Error, Tensor};

use crate::run::*;
use crate::{CompareArgs, DiagnoseArgs, InitConfigArgs, QuantizeArgs, SweepArgs, TrainArgs};

/// Offsets calibration seeds away from the batch and eval streams.
const CALIB_SALT: u64 = 0xca11_b0a7;

pub fn init_config(a: InitConfigArgs) -> CliResult {
    check_clobber(&a.out, a.overwrite)?;
    let mut cfg = ExperimentConfig::from_preset(a.preset, variant_preset(a.variant.into()));
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
        cfg.train.warmup_steps = cfg.train.warmup_steps.min(steps / 10);
        cfg.train.eval_every = cfg.train.eval_every.min(steps.max(1));
    }
    cfg.validate()?;
    write_file(&a.out, cfg.to_json() + "\n")
}

pub fn train(a: TrainArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let seed = a.seed.unwrap_or(cfg.seeds[0]);
    let (model, train_cfg) = cfg.for_seed(seed);
    let (train_data, eval_data) = load_corpus(&cfg)?;
    if a.out.exists() && !a.overwrite && a.out.read_dir().map_or(true, |mut d| d.next().is_some()) {
        return Err(CliError::new(1, format!("{} exists; pass --overwrite to replace it", a.out.display())));
    }

    let outcome = training::train(&model, &train_cfg, &train_data, &eval_data, None)?;
    let ppls = outcome.eval_ppls();
    let report = outcome.final_report().ok_or_else(|| CliError::new(1, "training produced no evaluation"))?;
    let summary = TrainSummary {
        schema_version: RUN_SCHEMA_VERSION,
        tag: cfg.tag.clone(),
        method: model.attention.label(),
        seed,
        steps: train_cfg.steps,
        initial_ppl: ppls[0].1,
        fp_ppl: ppls[ppls.len() - 1].1,
        max_inf_norm: report.max_inf_norm,
        avg_kurtosis: report.avg_kurtosis,
    };

    let run_cfg = ExperimentConfig { seeds: vec![seed], train: train_cfg, ..cfg };
    write_file(&a.out.join(CONFIG_FILE), run_cfg.to_json() + "\n")?;
    write_file(&a.out.join(METRICS_FILE), metrics_csv(&outcome.history))?;
    checkpoint::save(&a.out.join(CHECKPOINT_FILE), &model, &outcome.params)?;
    write_json(&a.out.join(SUMMARY_FILE), &summary)?;
    println!(
        "{} seed {seed}: eval ppl {:.3} -> {:.3}, max inf norm {:.3}, avg kurtosis {:.3}",
        summary.method, summary.initial_ppl, summary.fp_ppl, summary.max_inf_norm, summary.avg_kurtosis
    );
    Ok(())
}

/// Everything needed to evaluate a trained run.
struct LoadedRun {
    cfg: ExperimentConfig,
    model: ModelConfig,
    params: ModelParams<Tensor>,
    train_data: CorpusDataset,
    eval_data: CorpusDataset,
}

impl LoadedRun {
    fn open(run: &Path) -> CliResult<Self> {
        let cfg = run_config(run)?;
        let ckpt = run.join(CHECKPOINT_FILE);
        let (model, params) = checkpoint::load(&ckpt).map_err(|e| match e {
            Error::Io { .. } => CliError::new(4, e),
            other => other.into(),
        })?;
        let (train_data, eval_data) = load_corpus(&ExperimentConfig { model: model.clone(), ..cfg.clone() })?;
        Ok(LoadedRun { cfg, model, params, train_data, eval_data })
    }

    fn train_cfg(&self) -> &TrainConfig {
        &self.cfg.train
    }

    fn eval(&self) -> CliResult<Vec<Batch>> {
        Ok(eval_set(&self.model, self.train_cfg(), &self.eval_data)?)
    }

    fn calibration(&self, n: usize, rep: u64) -> CliResult<Vec<Batch>> {
        let seed = (self.train_cfg().seed ^ CALIB_SALT).wrapping_add(rep);
        Ok(fixed_batches(&self.train_data, self.model.objective, n, self.train_cfg().batch_size, seed)?)
    }

    fn fp_ppl(&self, eval: &[Batch]) -> CliResult<f64> {
        Ok(perplexity(eval_loss(&self.params, &self.model, eval, &mut NoHook)?))
    }
}

fn check_calib(qcfg: &QuantConfig, n: usize) -> CliResult {
    qcfg.validate()?;
    if n == 0 {
        return Err(Error::config("calib_batches", "must be >= 1").into());
    }
    if let (Some(limit), Some(_)) = (qcfg.act_est.batch_limit(), qcfg.a_bits) {
        if n < limit {
            return Err(Error::config("calib_batches", format!("the activation estimator needs {limit} batches")).into());
        }
    }
    Ok(())
}

pub fn quantize(a: QuantizeArgs) -> CliResult {
    let qcfg = QuantConfig { w_bits: a.w_bits.0, a_bits: a.a_bits.0, weight_est: a.weight_est, act_est: a.act_est };
    check_calib(&qcfg, a.calib_batches)?;
    if a.repeat == 0 {
        return Err(Error::config("repeat", "must be >= 1").into());
    }
    if a.jobs == 0 {
        return Err(Error::config("jobs", "must be >= 1").into());
    }
    let out = a.out.clone().unwrap_or_else(|| a.run.join(QUANTIZE_FILE));
    check_clobber(&out, a.overwrite)?;

    let run = LoadedRun::open(&a.run)?;
    let eval = run.eval()?;
    let fp_ppl = run.fp_ppl(&eval)?;
    let reps: Vec<u64> = (0..a.repeat as u64).collect();
    let calib_seeds: Vec<u64> = reps.iter().map(|r| (run.train_cfg().seed ^ CALIB_SALT).wrapping_add(*r)).collect();

    let one = |rep: u64| -> CliResult<(f64, QuantizedModel)> {
        let calib = run.calibration(a.calib_batches, rep)?;
        let qm = calibrate_and_quantize(&run.params, &run.model, &calib, &qcfg)?;
        Ok((perplexity(qm.eval_loss(&run.model, &eval)?), qm))
    };
    // Repetitions are independent; results are collected in seed order.
    let chunk = reps.len().div_ceil(a.jobs);
    let results: Vec<CliResult<(f64, QuantizedModel)>> = std::thread::scope(|s| {
        let handles: Vec<_> = reps
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|&r| one(r)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    let results = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let q_ppls: Vec<f64> = results.iter().map(|(p, _)| *p).collect();

    let report = QuantizeReport {
        schema_version: RUN_SCHEMA_VERSION,
        label: qcfg.label(),
        config: qcfg,
        calib_batches: a.calib_batches,
        calib_seeds,
        fp_ppl,
        q_ppl: Stat::of(&q_ppls)?,
        q_ppls,
        specs: results[0].1.spec_table(),
    };
    write_json(&out, &report)?;
    let std = report.q_ppl.std.map(|s| format!(" ± {s:.3}")).unwrap_or_default();
    println!("{}: fp ppl {fp_ppl:.3}, quantized ppl {:.3}{std}", report.label, report.q_ppl.mean);
    Ok(())
}

fn parse_head_layer(s: &str, model: &ModelConfig) -> CliResult<(usize, usize)> {
    let bad = || CliError::usage(format!("--dump-attention expects `head,layer` (1-based), got {s:?}"));
    let (h, l) = s.split_once(',').ok_or_else(bad)?;
    let (h, l): (usize, usize) = (h.trim().parse().map_err(|_| bad())?, l.trim().parse().map_err(|_| bad())?);
    if h == 0 || h > model.n_heads {
        return Err(CliError::usage(format!("head {h} out of range 1..={}", model.n_heads)));
    }
    if l == 0 || l > model.n_layers {
        return Err(CliError::usage(format!("layer {l} out of range 1..={}", model.n_layers)));
    }
    Ok((h, l))
}

pub fn diagnose(a: DiagnoseArgs) -> CliResult {
    let run = LoadedRun::open(&a.run)?;
    let dump = a.dump_attention.as_deref().map(|s| parse_head_layer(s, &run.model)).transpose()?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("diagnostics"));
    check_clobber(&out, a.overwrite)?;

    let n = a.eval_batches.unwrap_or(run.train_cfg().eval_batches);
    let eval = eval_set(&run.model, &TrainConfig { eval_batches: n, ..run.train_cfg().clone() }, &run.eval_data)?;
    let diag = &run.cfg.diagnostics;
    let report = analyze_with(&run.params, &run.model, &eval, diag.kurtosis_convention, diag.sigma_mult)?;
    write_json(&out.join("outliers.json"), &report)?;
    write_file(&out.join("outlier_dims.csv"), report.dim_histogram_csv())?;
    write_file(&out.join("outlier_tokens.csv"), report.token_histogram_csv())?;
    println!(
        "avg kurtosis {:.3}, max inf norm {:.3}, {} outliers",
        report.avg_kurtosis,
        report.max_inf_norm,
        report.total_outliers()
    );
    if let Some((h, l)) = dump {
        let trace = attention_trace(&run.params, &run.model, &eval[0].inputs[0], l - 1)?;
        let dir = out.join(format!("attention_head{h}_layer{l}"));
        let files = dump_attention_patterns(&trace, h - 1, &dir)?;
        println!("wrote {} attention files to {}", files.len(), dir.display());
    }
    Ok(())
}

/// `W,A[,weight_est[,act_est]]`, with `fp` for a floating-point side.
fn parse_sweep_entry(s: &str) -> CliResult<QuantConfig> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if !(2..=4).contains(&parts.len()) {
        return Err(CliError::usage(format!("sweep entry {s:?} is not `W,A[,weight_est[,act_est]]`")));
    }
    let bits = |p: &str| p.parse::<crate::Bits>().map(|b| b.0).map_err(CliError::usage);
    let mut q = QuantConfig { w_bits: bits(parts[0])?, a_bits: bits(parts[1])?, ..QuantConfig::default() };
    if let Some(w) = parts.get(2) {
        q.weight_est = w.parse::<RangeEstimator>()?;
    }
    if let Some(act) = parts.get(3) {
        q.act_est = act.parse::<RangeEstimator>()?;
    }
    Ok(q)
}

pub fn sweep(a: SweepArgs) -> CliResult {
    let configs = if a.configs.is_empty() {
        vec![
            QuantConfig::wa(8, 8),
            QuantConfig::wa(6, 8),
            QuantConfig { weight_est: RangeEstimator::MSE_DEFAULT, ..QuantConfig::wa(4, 8) },
            QuantConfig::wa(6, 6),
        ]
    } else {
        a.configs.iter().map(|s| parse_sweep_entry(s)).collect::<CliResult<Vec<_>>>()?
    };
    for q in &configs {
        check_calib(q, a.calib_batches)?;
    }
    let out = a.out.clone().unwrap_or_else(|| a.run.join("sweep.csv"));
    check_clobber(&out, a.overwrite)?;
    let run = LoadedRun::open(&a.run)?;
    let eval = run.eval()?;
    let calib = run.calibration(a.calib_batches, 0)?;
    let rows = bitwidth_sweep(&run.params, &run.model, &calib, &eval, &configs)?;
    let csv = sweep_csv(&rows);
    write_file(&out, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn compare(a: CompareArgs) -> CliResult {
    let mut records = Vec::new();
    for dir in &a.runs {
        let summary: TrainSummary = read_versioned(&dir.join(SUMMARY_FILE))?;
        let quant: QuantizeReport = read_versioned(&dir.join(QUANTIZE_FILE))?;
        records.push(RunRecord {
            schema_version: RUN_REPORT_SCHEMA_VERSION,
            model_tag: summary.tag,
            method: summary.method,
            seed: summary.seed,
            fp_ppl: summary.fp_ppl,
            max_inf_norm: summary.max_inf_norm,
            avg_kurtosis: summary.avg_kurtosis,
            quant_label: quant.label,
            q_ppl: quant.q_ppl.mean,
        });
    }
    let report = RunReport::from_records(&records)?;
    if let Some(out) = &a.out {
        for name in ["report.csv", "report.json"] {
            check_clobber(&out.join(name), a.overwrite)?;
        }
        write_file(&out.join("report.csv"), report.to_csv())?;
        write_json(&out.join("report.json"), &report)?;
    }
    print!("{}", report.to_table());
    Ok(())
}
