use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use log::info;
use mexflow::audit::{audit as run_audit, AuditTolerances};
use mexflow::bench::{expm_bench_csv, BenchConfig};
use mexflow::config::ConfigMap;
use mexflow::data::{load, train_test_split, Dataset, DatasetSpec};
use mexflow::model::ModelConfig;
use mexflow::rng::FlowRng;
use mexflow::train::{evaluate, train as run_train, CheckpointPlan, EvalStats, MetricsWriter, RunConfig, Session};
use mexflow::DenseArray;

use crate::image::encode_grid;
use crate::{AuditArgs, BenchArgs, CliError, EvalArgs, SampleArgs, TrainArgs};

type CliResult = Result<(), CliError>;

const SEED_ENV: &str = "MEXFLOW_SEED";

fn read_config(path: Option<&Path>) -> Result<ConfigMap, CliError> {
    match path {
        None => Ok(ConfigMap::new()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            Ok(ConfigMap::parse(&text)?)
        }
    }
}

/// `--seed`, then the config file, then `MEXFLOW_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, map: &ConfigMap) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if map.contains("seed") {
        return Ok(map.parse_or("seed", 0u64)?);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn load_data(arg: &str, seed: u64, count: usize) -> Result<Dataset, CliError> {
    let spec = DatasetSpec::from_arg(arg, seed, count);
    if let Some(p) = &spec.path {
        if !p.exists() {
            return Err(CliError::Usage(format!("--data: `{}` does not exist", p.display())));
        }
    }
    Ok(load(&spec)?)
}

fn echo(map: &ConfigMap) -> String {
    map.render().lines().map(|l| format!("# {l}\n")).collect()
}

fn stats_line(label: &str, s: &EvalStats) -> String {
    let mut line = format!("{label} n={} nll_nats={} ± {}", s.count, s.nll_mean, s.nll_std);
    if let Some(b) = s.bpd {
        line.push_str(&format!(" bpd={b}"));
    }
    line
}

pub fn train(a: TrainArgs) -> CliResult {
    let data_arg = a.data.clone().ok_or_else(|| {
        CliError::Usage("missing --data <DATASET> (moons, rings, checkerboard or a file path)".into())
    })?;
    let mut map = read_config(a.config.as_deref())?;
    if let Some(v) = a.lr {
        map.set("lr", v);
    }
    if let Some(v) = a.epochs {
        map.set("epochs", v);
    }
    if let Some(v) = a.batch_size {
        map.set("batch_size", v);
    }
    if let Some(v) = &a.coupling {
        map.set("coupling", v);
    }
    if let Some(v) = &a.conv {
        map.set("conv", v);
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        map.set(k.trim(), v.trim());
    }
    let seed = resolve_seed(a.seed, &map)?;
    map.set("seed", seed);

    let data = load_data(&data_arg, seed, a.count)?;
    if !map.contains("input") {
        let [h, w, c] = data.item_shape();
        map.set("input", format!("{h},{w},{c}"));
    }
    if !data.is_image() && !map.contains("flat") {
        map.set("flat", true);
    }
    let (train_set, test_set) = train_test_split(&data, seed);

    if a.compare.is_empty() {
        RunConfig::from_map(&map)?;
        let (stats, _) = train_one(&map, &a.out, &train_set, &test_set)?;
        println!("{}", stats_line("final test", &stats));
        return Ok(());
    }
    let mut table = String::from("coupling,nll_nats,bpd,wall_ms\n");
    for coupling in &a.compare {
        let mut m = map.clone();
        m.set("coupling", coupling);
        RunConfig::from_map(&m)?;
        let (stats, wall_ms) = train_one(&m, &a.out.join(coupling), &train_set, &test_set)?;
        let bpd = stats.bpd.map(|b| b.to_string()).unwrap_or_default();
        table.push_str(&format!("{coupling},{},{bpd},{wall_ms}\n", stats.nll_mean));
    }
    let mut echoed = map.clone();
    echoed.set("coupling", a.compare.join("|"));
    print!("{}{table}", echo(&echoed));
    fs::write(a.out.join("comparison.csv"), format!("{}{table}", echo(&echoed)))?;
    Ok(())
}

fn train_one(
    map: &ConfigMap,
    out: &Path,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(EvalStats, u128), CliError> {
    let run = RunConfig::from_map(map)?;
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let rendered = run.to_map();
    print!("{}", echo(&rendered));
    fs::write(out.join("config.txt"), rendered.render())?;
    let file = fs::File::create(out.join("metrics.csv"))?;
    let mut metrics = MetricsWriter::new(BufWriter::new(file), &rendered)?;
    let mut session = Session::new(run)?;
    let ckpt = out.join("checkpoint.mef");
    let started = std::time::Instant::now();
    info!(
        "training on {} items, evaluating on {}",
        train_set.len(),
        test_set.len()
    );
    let report = run_train(
        &mut session,
        train_set,
        test_set,
        &mut metrics,
        Some(CheckpointPlan { path: &ckpt }),
    )?;
    info!("wrote {} and {}", out.join("metrics.csv").display(), ckpt.display());
    Ok((report.last, started.elapsed().as_millis()))
}

pub fn eval(a: EvalArgs) -> CliResult {
    let session = Session::load(&a.ckpt)?;
    let seed = session.run.seed;
    let data = load_data(&a.data, seed, a.count)?;
    let (train_set, test_set) = train_test_split(&data, seed);
    for (label, set) in [("train", &train_set), ("test", &test_set)] {
        if set.is_empty() {
            continue;
        }
        println!("{}", stats_line(label, &evaluate(&session, set, seed)?));
    }
    Ok(())
}

pub fn sample(a: SampleArgs) -> CliResult {
    let session = Session::load(&a.ckpt)?;
    let seed = match a.seed {
        Some(s) => s,
        None => resolve_seed(None, &session.run.to_map())?,
    };
    let mut rng = FlowRng::derive(seed, "sample");
    let x = session
        .model
        .sample(&session.params, a.count, a.temperature, &mut rng)?;
    let ext = a.out.extension().and_then(|e| e.to_str()).unwrap_or("");
    let bytes = if session.run.model.flat {
        if ext != "csv" {
            return Err(CliError::Usage(format!(
                "point models write .csv, not `{}`",
                a.out.display()
            )));
        }
        let x = match &session.standardizer {
            Some(s) => s.invert(&x),
            None => x,
        };
        points_csv(&session.run.to_map(), &x).into_bytes()
    } else {
        let c = session.run.model.input[2];
        let want = if c == 3 { "ppm" } else { "pgm" };
        if ext != want {
            return Err(CliError::Usage(format!(
                "{c}-channel samples write .{want}, not `{}`",
                a.out.display()
            )));
        }
        encode_grid(&x)?
    };
    fs::write(&a.out, bytes).map_err(|e| CliError::Io(format!("{}: {e}", a.out.display())))?;
    info!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn points_csv(map: &ConfigMap, x: &DenseArray) -> String {
    let mut s = echo(map);
    s.push_str("x,y\n");
    for p in x.data().chunks(2) {
        s.push_str(&format!("{},{}\n", p[0], p[1]));
    }
    s
}

pub fn audit(a: AuditArgs) -> CliResult {
    let (session, image) = match &a.ckpt {
        Some(p) => {
            let s = Session::load(p)?;
            let image = !s.run.model.flat;
            (s, image)
        }
        None => {
            let mut map = ConfigMap::new();
            for (k, v) in [
                ("input", "2,2,2"),
                ("levels", "1"),
                ("depth", "2"),
                ("hidden", "8"),
                ("blocks", "1"),
                ("conv_init_scale", "0"),
            ] {
                map.set(k, v);
            }
            map.merge(&read_config(a.config.as_deref())?);
            let seed = resolve_seed(a.seed, &map)?;
            let run = RunConfig {
                model: ModelConfig::from_map(&map)?,
                seed,
                ..RunConfig::default()
            };
            (Session::new(run)?, false)
        }
    };
    let seed = a.seed.unwrap_or(session.run.seed);
    let mut rng = FlowRng::derive(seed, "audit");
    let [h, w, c] = session.run.model.input;
    let n = a.samples.max(1) * h * w * c;
    let values = if image {
        (0..n).map(|_| rng.uniform()).collect()
    } else {
        rng.normals(n)
    };
    let x = DenseArray::new(&[a.samples.max(1), h, w, c], values)?;
    let mut params = session.params.clone();
    if a.ckpt.is_none() {
        session.model.initialize(&mut params, &x)?;
    }
    let report = run_audit(&session.model, &params, &x, AuditTolerances::default())?;
    println!("{report}");
    let failures = report.failures();
    if !failures.is_empty() {
        let names: Vec<&str> = failures.iter().map(|l| l.name.as_str()).collect();
        return Err(CliError::Audit(format!("layer {}", names.join(", "))));
    }
    if !report.passed() {
        return Err(CliError::Audit(format!(
            "model round trip error {:.3e}",
            report.model_roundtrip
        )));
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> CliResult {
    let seed = resolve_seed(a.seed, &ConfigMap::new())?;
    let cfg = BenchConfig {
        norms: a.norms,
        trials: a.trials,
        eps: a.eps,
        dim: a.dim,
        seed,
    };
    let mut map = ConfigMap::new();
    map.set(
        "norms",
        cfg.norms.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
    );
    map.set("trials", cfg.trials);
    map.set("eps", cfg.eps);
    map.set("dim", cfg.dim);
    map.set("seed", cfg.seed);
    let stats = match &a.out {
        Some(p) => {
            let f = fs::File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let mut w = BufWriter::new(f);
            w.write_all(echo(&map).as_bytes())?;
            let s = expm_bench_csv(&cfg, &mut w)?;
            w.flush()?;
            s
        }
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            w.write_all(echo(&map).as_bytes())?;
            let s = expm_bench_csv(&cfg, &mut w)?;
            w.flush()?;
            s
        }
    };
    eprintln!(
        "m over {} runs: mean {:.4} std {:.4} min {} max {}",
        stats.count, stats.mean, stats.std, stats.min, stats.max
    );
    Ok(())
}
