use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use spx::calibration::{calibrate, estimate_profile, whiten};
use spx::diagnostics::{isometry_constants, random_subspace, spectrum_with_limit};
use spx::patterns::{gen_hadamard, gen_speckle, select, PatternKind, PatternLibrary, SelectionPolicy, SensingOperator};
use spx::recognisability::{safe_interval, sweep_with, AccuracyCurve, SweepConfig, Task, TrainConfig};
use spx::reconstruction::{reconstruct, ReconConfig, Regularizer};
use spx::rng::derive_seed;
use spx::sensing::{apply_chain_batch, measure_batch, AcquisitionChain, FrameBatch, MeasurementBatch, NoiseModel};
use spx::spmx::{self, meta_path, KeyValues};
use spx::synthdata::{frames_per_instance, instance_plan, render_plan, SynthSpec};

use crate::manifest::Run;
use crate::{
    CalibrateArgs, Cli, CliError, Command, DiagnoseArgs, GenPatternsArgs, KindArg, MeasureArgs, MethodArg,
    NoiseArgs, NoiseKindArg, ReconstructArgs, RegularizerArg, SafeIntervalArgs, SpecArgs, SweepArgs, SynthArgs,
    TaskArg,
};

const FRAME_PERIOD: f64 = 0.04;

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenPatterns(a) => gen_patterns(a, cli.check),
        Command::Synth(a) => synth(a, cli.check),
        Command::Measure(a) => measure(a, cli.check),
        Command::Calibrate(a) => calibrate_cmd(a, cli.check),
        Command::Reconstruct(a) => reconstruct_cmd(a, cli.check),
        Command::Diagnose(a) => diagnose(a, cli.check),
        Command::Sweep(a) => sweep(a, cli.check),
        Command::SafeInterval(a) => safe_interval_cmd(a, cli.check),
    }
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Privacy => Task::Privacy,
            TaskArg::Behavior => Task::Behavior,
        }
    }
}

impl NoiseArgs {
    fn model(&self) -> NoiseModel {
        match self.noise {
            NoiseKindArg::None => NoiseModel::None,
            NoiseKindArg::Iid => NoiseModel::IidGaussian { sigma: self.sigma },
            NoiseKindArg::Ar1 => NoiseModel::Ar1 {
                sigma: self.sigma,
                phi: self.phi,
            },
        }
    }
}

impl SpecArgs {
    fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            height: self.h,
            width: self.w,
            num_identities: self.identities,
            num_behaviors: self.behaviors,
            samples_per_class: self.samples_per_class,
            t_frames: self.frames,
            noise: NoiseModel::IidGaussian { sigma: self.noise_sigma },
            master_seed: seed,
        }
    }
}

/// `dir/<stem>.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn read_matrix(run: &mut Run, path: &Path) -> Result<DMatrix<f64>, CliError> {
    let bytes = run.read(path)?;
    Ok(spmx::decode(&bytes)?)
}

fn read_meta(run: &mut Run, path: &Path) -> Result<KeyValues, CliError> {
    let text = run.read_text(&meta_path(path))?;
    Ok(KeyValues::decode(&text)?)
}

fn write_matrix(run: &mut Run, path: &Path, m: &DMatrix<f64>, meta: &KeyValues) {
    run.write(path, spmx::encode(m));
    run.write(meta_path(path), meta.encode());
}

fn load_library(run: &mut Run, path: &Path) -> Result<PatternLibrary, CliError> {
    let raw = read_matrix(run, path)?;
    let meta = read_meta(run, path)?;
    Ok(PatternLibrary::from_raw(
        meta.parse_value::<PatternKind>("kind")?,
        meta.parse_value("height")?,
        meta.parse_value("width")?,
        meta.parse_value("seed")?,
        &raw,
    )?)
}

fn load_batch(run: &mut Run, path: &Path) -> Result<MeasurementBatch, CliError> {
    let values = read_matrix(run, path)?;
    let meta = read_meta(run, path)?;
    Ok(MeasurementBatch::from_parts(values, &meta)?)
}

fn write_batch(run: &mut Run, path: &Path, batch: &MeasurementBatch) {
    write_matrix(run, path, &batch.values, &batch.metadata());
}

fn check_operator(batch: &MeasurementBatch, op: &SensingOperator, what: &str) -> Result<(), CliError> {
    if batch.operator_id != op.id() {
        return Err(CliError::Usage(format!(
            "{what} was measured with `{}`, not `{}`",
            batch.operator_id,
            op.id()
        )));
    }
    Ok(())
}

fn gen_patterns(a: &GenPatternsArgs, check: bool) -> Result<(), CliError> {
    let mut run = Run::new("gen-patterns", a, check)?;
    let lib = match a.kind {
        KindArg::Speckle => gen_speckle(a.n, a.h, a.w, a.seed)?,
        KindArg::Hadamard => gen_hadamard(a.n, a.h, a.w)?,
    };
    let mut meta = KeyValues::new();
    meta.set("kind", lib.kind())
        .set("height", lib.height())
        .set("width", lib.width())
        .set("count", lib.count())
        .set("seed", lib.seed())
        .set("id", lib.id());
    write_matrix(&mut run, &a.out, &lib.raw_dense(), &meta);
    run.finish(&a.out)?;
    Ok(())
}

fn synth(a: &SynthArgs, check: bool) -> Result<(), CliError> {
    let mut run = Run::new("synth", a, check)?;
    let spec = a.spec.spec(a.seed);
    let task = Task::from(a.task);
    let plan = instance_plan(&spec, task)?;
    let frames = render_plan(&spec, task, &plan);
    let scenes = a.out.join("scenes.spmx");
    let mut meta = KeyValues::new();
    meta.set("height", spec.height)
        .set("width", spec.width)
        .set("task", task)
        .set("frames_per_instance", frames_per_instance(&spec, task))
        .set("instances", plan.len())
        .set("identities", spec.num_identities)
        .set("behaviors", spec.num_behaviors)
        .set("samples_per_class", spec.samples_per_class)
        .set("master_seed", spec.master_seed)
        .set("frame_period", FRAME_PERIOD)
        .set("layout", "pixels x frames");
    write_matrix(&mut run, &scenes, &frames, &meta);
    let mut labels = String::from("instance,identity,behavior,split,seed\n");
    for r in &plan {
        labels.push_str(&format!(
            "{},{},{},{},{}\n",
            r.instance, r.identity, r.behavior, r.split, r.seed
        ));
    }
    run.write(a.out.join("labels.csv"), labels);
    run.finish(&scenes)?;
    Ok(())
}

fn measure(a: &MeasureArgs, check: bool) -> Result<(), CliError> {
    let mut run = Run::new("measure", a, check)?;
    let lib = load_library(&mut run, &a.patterns)?;
    let op = select(&lib, a.m, SelectionPolicy::Prefix)?;
    let frames = read_matrix(&mut run, &a.scenes)?;
    let meta = read_meta(&mut run, &a.scenes)?;
    let period = meta.parse_value("frame_period").unwrap_or(FRAME_PERIOD);
    let batch = FrameBatch::new(meta.parse_value("height")?, meta.parse_value("width")?, frames, period)?;
    let noise = a.noise.model();
    let clean = measure_batch(&op, &batch, &noise, a.seed)?;
    match a.chain_seed {
        None => write_batch(&mut run, &a.out, &clean),
        Some(chain_seed) => {
            let chain = AcquisitionChain::random(a.m, a.gain_lo, a.gain_hi, a.offset_sd, chain_seed)?;
            write_batch(&mut run, &a.out, &apply_chain_batch(&clean, &chain)?);
            let n = op.n_pixels();
            let (h, w) = (op.height(), op.width());
            for (suffix, value, count, stream) in [
                ("dark.spmx", 0.0, a.dark_frames, 1u64),
                ("ref.spmx", 1.0, a.ref_frames, 2u64),
            ] {
                let frames = FrameBatch::new(h, w, DMatrix::from_element(n, count, value), period)?;
                let m = measure_batch(&op, &frames, &noise, derive_seed(a.seed, stream))?;
                write_batch(&mut run, &sibling(&a.out, suffix), &apply_chain_batch(&m, &chain)?);
            }
            let mut truth = DMatrix::zeros(a.m, 2);
            truth.set_column(0, &chain.gains);
            truth.set_column(1, &chain.offsets);
            let mut tmeta = KeyValues::new();
            tmeta.set("columns", "gain,offset").set("chain_seed", chain_seed);
            write_matrix(&mut run, &sibling(&a.out, "chain.spmx"), &truth, &tmeta);
        }
    }
    run.finish(&a.out)?;
    Ok(())
}

fn calibrate_cmd(a: &CalibrateArgs, check: bool) -> Result<(), CliError> {
    let mut run = Run::new("calibrate", a, check)?;
    let lib = load_library(&mut run, &a.patterns)?;
    let op = select(&lib, a.m, SelectionPolicy::Prefix)?;
    let raw = load_batch(&mut run, &a.raw)?;
    let dark = load_batch(&mut run, &a.dark)?;
    let reference = load_batch(&mut run, &a.reference)?;
    for (b, what) in [(&raw, "raw"), (&dark, "dark"), (&reference, "reference")] {
        check_operator(b, &op, what)?;
    }
    let ref_ideal = op.apply(&DVector::from_element(op.n_pixels(), 1.0));
    // rows with a zero reference response are reported by the estimator
    let (profile, _excluded) = estimate_profile(&dark, &reference, &ref_ideal)?;
    let calibrated = calibrate(&raw, &profile)?;
    for (path, bytes) in profile.encode_files(&sibling(&a.out, "profile"))? {
        run.write(path, bytes);
    }
    if a.whiten {
        let (white, wop) = whiten(&calibrated, &op, &calibrated.noise)?;
        write_batch(&mut run, &a.out, &white);
        let mut ometa = KeyValues::new();
        ometa
            .set("height", wop.height())
            .set("width", wop.width())
            .set("id", wop.id());
        write_matrix(&mut run, &sibling(&a.out, "operator.spmx"), &wop.to_dense(), &ometa);
    } else {
        write_batch(&mut run, &a.out, &calibrated);
    }
    run.finish(&a.out)?;
    Ok(())
}

fn reconstruct_cmd(a: &ReconstructArgs, check: bool) -> Result<(), CliError> {
    let mut run = Run::new("reconstruct", a, check)?;
    let meas = load_batch(&mut run, &a.meas)?;
    let op = match (&a.patterns, a.m, &a.operator) {
        (Some(p), Some(m), None) => {
            let lib = load_library(&mut run, p)?;
            let op = select(&lib, m, SelectionPolicy::Prefix)?;
            check_operator(&meas, &op, "measurement")?;
            op
        }
        (None, _, Some(path)) => {
            let dense = read_matrix(&mut run, path)?;
            let meta = read_meta(&mut run, path)?;
            if meas.operator_id != meta.require("id")? {
                return Err(CliError::Usage(format!(
                    "measurements use `{}`, operator file holds `{}`",
                    meas.operator_id,
                    meta.require("id")?
                )));
            }
            SensingOperator::from_dense(dense, meta.parse_value("height")?, meta.parse_value("width")?)?
        }
        _ => return Err(CliError::Usage("give either --patterns with --m, or --operator".into())),
    };
    if !meas.calibrated {
        return Err(CliError::Usage("measurements are raw; run `spx calibrate` first".into()));
    }
    if a.frame >= meas.t() {
        return Err(CliError::Usage(format!("frame {} of {}", a.frame, meas.t())));
    }
    let mut cfg = match a.method {
        MethodArg::Ridge => ReconConfig::ridge(a.lambda),
        MethodArg::Tv => ReconConfig::tv(a.lambda),
    };
    cfg.regularizer = match a.regularizer {
        RegularizerArg::Laplacian => Regularizer::Laplacian,
        RegularizerArg::Identity => Regularizer::Identity,
    };
    if let Some(tol) = a.tol {
        cfg.tol = tol;
    }
    if let Some(n) = a.max_iters {
        cfg.max_iters = n;
    }
    let y = meas.values.column(a.frame).into_owned();
    let res = reconstruct(&op, &y, &cfg)?;
    let (h, w) = (op.height(), op.width());
    let image = DMatrix::from_fn(h, w, |r, c| res.x_hat.at(r, c));
    let mut meta = KeyValues::new();
    meta.set("height", h)
        .set("width", w)
        .set("method", format!("{:?}", cfg.method).to_lowercase())
        .set("lambda", cfg.lambda)
        .set("iterations", res.iterations)
        .set("converged", res.converged)
        .set("final_objective", res.final_objective)
        .set("operator_id", op.id());
    write_matrix(&mut run, &a.out, &image, &meta);
    let mut trace = String::from("iter,objective,residual\n");
    for (i, (o, r)) in res.objective_trace.iter().zip(&res.residual_trace).enumerate() {
        trace.push_str(&format!("{},{o},{r}\n", i + 1));
    }
    run.write(sibling(&a.out, "trace.csv"), trace);
    run.finish(&a.out)?;
    if !res.converged {
        let msg = format!("solver stopped after {} iterations without converging", res.iterations);
        if a.strict {
            return Err(CliError::NotConverged(msg));
        }
        log::warn!("{msg}");
    }
    Ok(())
}

fn diagnose(a: &DiagnoseArgs, check: bool) -> Result<(), CliError> {
    let mut run = Run::new("diagnose", a, check)?;
    let lib = load_library(&mut run, &a.patterns)?;
    let basis = random_subspace(lib.n_pixels(), a.subspace_dim, a.seed);
    let mut csv = String::from("M,rho,sigma_max,sigma_min,threshold_rank,entropy_rank,spectral_mass,c1,c2\n");
    for &m in &a.rates {
        let op = select(&lib, m, SelectionPolicy::Prefix)?;
        let s = spectrum_with_limit(&op, a.eps_rank, Some(a.gram_limit))?;
        let iso = isometry_constants(&op, &basis, a.probes, a.seed)?;
        log::info!("M={m}: sigma_max={} mass={}", s.sigma_max(), s.spectral_mass);
        csv.push_str(&format!(
            "{m},{},{},{},{},{},{},{},{}\n",
            op.rho(),
            s.sigma_max(),
            s.sigma_min(),
            s.threshold_rank,
            s.entropy_rank,
            s.spectral_mass,
            iso.c1_hat,
            iso.c2_hat
        ));
    }
    run.write(&a.out, csv);
    run.finish(&a.out)?;
    Ok(())
}

fn sweep(a: &SweepArgs, check: bool) -> Result<(), CliError> {
    let mut run = Run::new("sweep", a, check)?;
    let task = Task::from(a.task);
    let mut cfg = SweepConfig::new(task, a.rates.clone(), a.spec.spec(a.seed), a.trials, a.seed);
    cfg.train = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        l2: a.l2,
    };
    cfg.permute_labels = a.permute_labels;
    cfg.jobs = a.jobs;
    if let Some(p) = &a.patterns {
        cfg.library = Some(load_library(&mut run, p)?);
    }
    let curve = sweep_with(&cfg)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("curve_{task}.csv")));
    run.write(&out, curve.to_csv());
    run.write(meta_path(&out), curve.sidecar().encode());
    run.finish(&out)?;
    Ok(())
}

fn read_curve(run: &mut Run, path: &Path, hint: Task) -> Result<AccuracyCurve, CliError> {
    let text = run.read_text(path)?;
    let meta = meta_path(path);
    let sidecar = if meta.exists() {
        Some(KeyValues::decode(&run.read_text(&meta)?)?)
    } else {
        None
    };
    Ok(AccuracyCurve::parse_csv(&text, sidecar.as_ref(), hint)?)
}

fn safe_interval_cmd(a: &SafeIntervalArgs, check: bool) -> Result<(), CliError> {
    let mut run = Run::new("safe-interval", a, check)?;
    let beh = read_curve(&mut run, &a.beh, Task::Behavior)?;
    let privacy = read_curve(&mut run, &a.privacy, Task::Privacy)?;
    let report = safe_interval(&beh, &privacy, a.alpha, a.beta)?;
    run.write(&a.out, report.to_key_values().encode());
    run.finish(&a.out)?;
    Ok(())
}
