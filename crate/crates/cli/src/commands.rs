use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use kmts::data::{
    chronological_split, load_dataset, save_csv, save_kmtsbin, synth_generate, DatasetFormat, MtsDataset, Normalizer,
    SplitRange, SynthConfig,
};
use kmts::datastore::{build_datastore, build_ivf, load_ivf, load_store, save_ivf, save_store};
use kmts::encoder::{load_checkpoint, save_checkpoint, Checkpoint, Encoder};
use kmts::forecaster::{inspect_neighbors, EvalReport, Forecaster, IndexKind, SplitForecast};
use kmts::graph::DependencyGraph;
use kmts::trainer::{fit, FitOutputs, TrainData};
use kmts::{Error, Result};

use crate::config::{RunConfig, RESOLVED};
use crate::{EvalArgs, InspectArgs, RunLocation, SplitArg, StoreArgs, SynthArgs, TrainArgs};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn format_of(path: &Path) -> Result<DatasetFormat> {
    DatasetFormat::from_path(path)
        .ok_or_else(|| Error::Config(format!("{}: expected a .csv or .kmtsbin path", path.display())))
}

fn save_dataset(dataset: &MtsDataset, path: &Path) -> Result<()> {
    match format_of(path)? {
        DatasetFormat::Csv => save_csv(dataset, path),
        DatasetFormat::Kmtsbin => save_kmtsbin(dataset, path),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{}.{}", stem, suffix))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        nodes: a.nodes.unwrap_or(d.nodes),
        steps: a.steps.unwrap_or(d.steps),
        period: a.period.unwrap_or(d.period),
        motif_len: a.motif_len.unwrap_or(d.motif_len),
        motifs: a.motifs.unwrap_or(d.motifs),
        motif_count: a.motif_count.unwrap_or(d.motif_count),
        noise_std: a.noise.unwrap_or(d.noise_std),
        ring_graph: a.ring_graph,
        ..d
    };
    format_of(&a.out)?;
    let sd = synth_generate(&cfg, a.seed)?;
    save_dataset(&sd.dataset, &a.out)?;

    let motifs = with_suffix(&a.out, "motifs.csv");
    let mut text = String::from("motif,node,start,len\n");
    for m in &sd.instances {
        let _ = writeln!(text, "{},{},{},{}", m.motif, m.node, m.start, m.len);
    }
    fs::write(&motifs, text).map_err(io(&motifs))?;
    if let Some(adj) = &sd.adjacency {
        let path = with_suffix(&a.out, "adj.csv");
        let n = cfg.nodes;
        let mut text = String::new();
        for row in adj.data().chunks(n) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(text, "{}", cells.join(","));
        }
        fs::write(&path, text).map_err(io(&path))?;
    }
    println!(
        "wrote {} ({} nodes x {} steps, {} motif instances) sha256 {}",
        a.out.display(),
        cfg.nodes,
        cfg.steps,
        sd.instances.len(),
        sha256_file(&a.out)?
    );
    Ok(())
}

pub fn convert(input: &Path, output: &Path) -> Result<()> {
    let out_format = format_of(output)?;
    let dataset = load_dataset(input, format_of(input)?)?;
    match out_format {
        DatasetFormat::Csv => save_csv(&dataset, output)?,
        DatasetFormat::Kmtsbin => save_kmtsbin(&dataset, output)?,
    }
    println!(
        "wrote {} ({} nodes x {} steps x {} channels)",
        output.display(),
        dataset.n_nodes(),
        dataset.t_steps(),
        dataset.channels()
    );
    Ok(())
}

/// Loaded data shared by the commands after training.
struct Workspace {
    cfg: RunConfig,
    dir: PathBuf,
    raw: MtsDataset,
    splits: [SplitRange; 3],
    graph: Option<DependencyGraph>,
}

impl Workspace {
    fn open(cfg: RunConfig, dir: PathBuf) -> Result<Self> {
        let raw = load_dataset(&cfg.data.path, format_of(&cfg.data.path)?)?;
        let splits = chronological_split(raw.t_steps(), &cfg.data.split)?;
        let graph = match &cfg.data.graph {
            Some(p) => Some(DependencyGraph::load(p, raw.n_nodes())?),
            None => None,
        };
        Ok(Workspace {
            cfg,
            dir,
            raw,
            splits,
            graph,
        })
    }

    /// Reads `<run>/config.resolved` of an existing run.
    fn existing(loc: &RunLocation) -> Result<Self> {
        let dir = match (&loc.run, &loc.config) {
            (Some(d), _) => d.clone(),
            (None, Some(c)) => RunConfig::load(c)?.run_dir(),
            (None, None) => RunConfig::default().run_dir(),
        };
        let cfg = RunConfig::load(&dir.join(RESOLVED))?;
        Self::open(cfg, dir)
    }

    fn write_resolved(&self) -> Result<()> {
        let path = self.dir.join(RESOLVED);
        fs::write(&path, self.cfg.to_toml()).map_err(io(&path))
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let ckpt = load_checkpoint(&self.dir.join("checkpoint.kmtw"))?;
        if ckpt.encoder.config != self.cfg.model {
            log::warn!("checkpoint model shape differs from {}; using the checkpoint's", RESOLVED);
        }
        Ok(ckpt)
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.loc.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = a.name {
        cfg.name = n;
    }
    if let Some(p) = a.data {
        cfg.data.path = p;
    }
    if let Some(m) = a.mode {
        cfg.model.mode = m.into();
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
        cfg.train.patience = cfg.train.patience.min(e.max(1));
    }
    if let Some(p) = a.patience {
        cfg.train.patience = p;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    let dir = a.loc.run.clone().unwrap_or_else(|| cfg.run_dir());
    let mut ws = Workspace::open(cfg, dir)?;
    // node and channel counts come from the data
    ws.cfg.model.nodes = ws.raw.n_nodes();
    ws.cfg.model.channels = ws.raw.channels();
    ws.cfg.validate()?;
    fs::create_dir_all(&ws.dir).map_err(io(&ws.dir))?;
    ws.write_resolved()?;

    let normalizer = Normalizer::fit(&ws.raw, ws.splits[0])?;
    let mut encoder = Encoder::new(ws.cfg.model.clone(), ws.cfg.train.seed)?;
    let data = TrainData {
        raw: &ws.raw,
        normalizer: &normalizer,
        train: ws.splits[0],
        val: ws.splits[1],
        graph: ws.graph.as_ref(),
    };
    let trace = ws.dir.join("trace.csv");
    let ckpt_path = ws.dir.join("checkpoint.kmtw");
    let report = fit(
        &mut encoder,
        &data,
        &ws.cfg.train,
        FitOutputs {
            trace: Some(&trace),
            checkpoint: Some(&ckpt_path),
        },
    )?;
    let params = encoder.params.numel();
    save_checkpoint(&Checkpoint { encoder, normalizer }, &ckpt_path)?;
    println!(
        "trained {} epochs ({} parameters); best epoch {} val MAE {:.4}; {:.2} s per epoch",
        report.trace.len(),
        params,
        report.best_epoch,
        report.best_val_mae,
        report.mean_train_seconds
    );
    println!("checkpoint {} sha256 {}", ckpt_path.display(), sha256_file(&ckpt_path)?);
    Ok(())
}

/// Mean `seconds` column of a training trace, if any epochs ran.
fn mean_epoch_seconds(trace: &Path) -> Option<f64> {
    let text = fs::read_to_string(trace).ok()?;
    let secs: Vec<f64> = text
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next()?.parse().ok())
        .collect();
    (!secs.is_empty()).then(|| secs.iter().sum::<f64>() / secs.len() as f64)
}

pub fn build_store(a: StoreArgs) -> Result<()> {
    let mut ws = Workspace::existing(&a.loc)?;
    if let Some(f) = a.fraction {
        ws.cfg.store.fraction = f;
    }
    if let Some(s) = a.seed {
        ws.cfg.store.seed = s;
    }
    if let Some(t) = a.tap {
        ws.cfg.forecast.key_tap = t.into();
    }
    if let Some(n) = a.ivf_lists {
        ws.cfg.store.ivf_lists = n;
    }
    ws.cfg.validate()?;
    let ckpt = ws.checkpoint()?;
    let out = a.out.unwrap_or_else(|| ws.dir.join("store.kmtds"));
    if out.exists() && !a.force {
        return Err(Error::Request(format!(
            "{} already exists; pass --force to overwrite",
            out.display()
        )));
    }
    let sc = &ws.cfg.store;
    let start = Instant::now();
    let mut store = build_datastore(
        &ckpt,
        &ws.raw,
        ws.splits[0],
        ws.graph.as_ref(),
        ws.cfg.forecast.key_tap,
        sc.batch_slices,
    )?;
    if sc.fraction < 1.0 {
        store = store.subsample(sc.fraction, sc.seed)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    save_store(&store, &out, a.force)?;
    println!(
        "store {}: {} entries, d={}, {} bytes, sha256 {}",
        out.display(),
        store.len(),
        store.dim(),
        store.byte_len(),
        sha256_file(&out)?
    );
    match mean_epoch_seconds(&ws.dir.join("trace.csv")) {
        Some(epoch) => println!(
            "build time {:.2} s ({:.2}x the mean training epoch of {:.2} s)",
            seconds,
            seconds / epoch,
            epoch
        ),
        None => println!("build time {:.2} s", seconds),
    }
    if sc.ivf_lists > 0 {
        let start = Instant::now();
        let index = build_ivf(&store, sc.ivf_lists.min(store.len()), sc.seed)?;
        let side = out.with_extension("kmtdx");
        save_ivf(&index, &side)?;
        println!(
            "ivf index {}: {} lists, {} k-means iterations, {:.2} s",
            side.display(),
            index.n_list(),
            index.iterations,
            start.elapsed().as_secs_f64()
        );
    }
    ws.write_resolved()
}

fn split_steps(ws: &Workspace, which: SplitArg, ckpt: &Checkpoint) -> Result<Vec<usize>> {
    let split = match which {
        SplitArg::Train => ws.splits[0],
        SplitArg::Val => ws.splits[1],
        SplitArg::Test => ws.splits[2],
    };
    let steps: Vec<usize> = ckpt.encoder.config.window().end_steps(split).collect();
    if steps.is_empty() {
        return Err(Error::Config(format!("the {:?} split holds no complete window", which)));
    }
    Ok(steps)
}

/// Parses `1,5,10`, `1..100` or `0.05..0.5:0.05`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse grid `{}`", text));
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item.split_once("..") {
            None => out.push(item.parse().map_err(|_| bad())?),
            Some((lo, rest)) => {
                let (hi, step) = match rest.split_once(':') {
                    Some((hi, step)) => (hi, step.parse::<f64>().map_err(|_| bad())?),
                    None => (rest, 1.0),
                };
                let (lo, hi): (f64, f64) = (lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?);
                if !(step > 0.0) || hi < lo {
                    return Err(bad());
                }
                let n = ((hi - lo) / step + 1e-9).floor() as usize;
                out.extend((0..=n).map(|i| lo + i as f64 * step));
            }
        }
    }
    if out.is_empty() || out.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(out)
}

fn print_report(title: &str, r: &EvalReport) {
    println!("{}", title);
    println!("  {:<10} {:>10} {:>10} {:>9}", "horizon", "MAE", "RMSE", "MAPE%");
    let line = |label: String, m: Option<kmts::metrics::Metrics>| match m {
        Some(m) => println!("  {:<10} {:>10.4} {:>10.4} {:>9.3}", label, m.mae, m.rmse, 100.0 * m.mape),
        None => println!("  {:<10} {:>10} {:>10} {:>9}", label, "-", "-", "-"),
    };
    for &(h, m) in &r.horizons {
        line(h.to_string(), m);
    }
    line("average".into(), r.average);
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, text + "\n").map_err(io(path))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut ws = Workspace::existing(&a.loc)?;
    let f = &mut ws.cfg.forecast;
    if let Some(k) = a.k {
        f.k = k;
    }
    if let Some(v) = a.alpha {
        f.alpha = v;
    }
    if let Some(t) = a.temperature {
        f.temperature = t;
    }
    if let Some(i) = a.index {
        f.index = i.into();
    }
    if let Some(p) = a.n_probe {
        f.n_probe = Some(p);
    }
    f.exclude_self |= a.exclude_self;
    ws.cfg.validate()?;
    let k_grid: Vec<usize> = match &a.k_grid {
        Some(g) => parse_grid(g)?
            .into_iter()
            .map(|v| if v >= 1.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(Error::Config(format!("K={} is not a positive integer", v))) })
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let alpha_grid = match &a.alpha_grid {
        Some(g) => parse_grid(g)?,
        None => Vec::new(),
    };
    if alpha_grid.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Config("alpha grid values must be positive".into()));
    }
    let ckpt = ws.checkpoint()?;
    let steps = split_steps(&ws, a.split, &ckpt)?;
    let batch = ws.cfg.store.batch_slices;
    let null = ws.cfg.train.mask_null_value;
    let horizon = ckpt.encoder.config.horizon;
    let n = ws.raw.n_nodes();

    if a.no_store {
        let start = Instant::now();
        let enc = ckpt.encoder.encode_slices(
            &ws.raw,
            &ckpt.normalizer,
            &steps,
            ws.graph.as_ref(),
            ws.cfg.forecast.key_tap,
            batch,
        )?;
        let fc = SplitForecast::model_only(&enc, &ckpt.normalizer, horizon);
        let secs = start.elapsed().as_secs_f64();
        let report = fc.report(null)?;
        fc.write_csv(&ws.dir.join("eval.no_store.csv"))?;
        write_json(&ws.dir.join("report.no_store.json"), &report)?;
        print_report(&format!("encoder only, {:?} split, {} windows", a.split, fc.rows()), &report);
        throughput(fc.rows(), n, horizon, secs);
        return Ok(());
    }

    let store_path = a.store.unwrap_or_else(|| ws.dir.join("store.kmtds"));
    let store = load_store(&store_path)?;
    let cfg = ws.cfg.forecast.clone();
    let mut forecaster = Forecaster::new(&ckpt, &store, ws.graph.as_ref(), cfg.clone());
    if cfg.index == IndexKind::Ivf {
        let side = store_path.with_extension("kmtdx");
        if side.exists() {
            let index = load_ivf(&side)?;
            forecaster = forecaster.map(|f| f.with_index(index));
        }
    }
    let forecaster = forecaster?;
    let k_max = k_grid.iter().copied().chain([cfg.k]).max().unwrap_or(cfg.k);
    let start = Instant::now();
    let retrieved = forecaster.retrieve_steps(&ws.raw, &steps, k_max, batch)?;
    let fc = forecaster.blend(&retrieved, cfg.k, cfg.temperature, cfg.alpha)?;
    let secs = start.elapsed().as_secs_f64();
    let report = fc.report(null)?;
    let base = fc.model_report(null)?;
    fc.write_csv(&ws.dir.join("eval.csv"))?;
    #[derive(serde::Serialize)]
    struct Paired<'a> {
        k: usize,
        alpha: f64,
        temperature: f64,
        encoder: &'a EvalReport,
        knn: &'a EvalReport,
        mean_lambda: f64,
        widened: usize,
    }
    let mean_lambda = fc.lambdas.iter().sum::<f64>() / fc.lambdas.len().max(1) as f64;
    write_json(
        &ws.dir.join("report.json"),
        &Paired {
            k: cfg.k,
            alpha: cfg.alpha,
            temperature: cfg.temperature,
            encoder: &base,
            knn: &report,
            mean_lambda,
            widened: fc.widened,
        },
    )?;
    print_report(&format!("encoder only, {:?} split, {} windows", a.split, fc.rows()), &base);
    print_report(&format!("with retrieval, K={} alpha={} tau={}", cfg.k, cfg.alpha, cfg.temperature), &report);
    println!("mean lambda {:.4}; widened searches {}", mean_lambda, fc.widened);
    throughput(fc.rows(), n, horizon, secs);

    if !k_grid.is_empty() || !alpha_grid.is_empty() {
        let mut text = String::from("sweep,k,alpha,mae,rmse,mape\n");
        let mut row = |sweep: &str, k: usize, alpha: f64| -> Result<()> {
            let r = forecaster.blend(&retrieved, k, cfg.temperature, alpha)?.report(null)?;
            let m = r.average.ok_or_else(|| Error::Degenerate("every label is masked".into()))?;
            let _ = writeln!(text, "{},{},{},{},{},{}", sweep, k, alpha, m.mae, m.rmse, m.mape);
            println!("  {} K={:<4} alpha={:<6} MAE {:.4}", sweep, k, alpha, m.mae);
            Ok(())
        };
        for &k in &k_grid {
            row("k", k, cfg.alpha)?;
        }
        for &alpha in &alpha_grid {
            row("alpha", cfg.k, alpha)?;
        }
        let path = ws.dir.join("sweep.csv");
        fs::write(&path, text).map_err(io(&path))?;
    }
    ws.write_resolved()
}

fn throughput(rows: usize, nodes: usize, horizon: usize, secs: f64) {
    let secs = secs.max(1e-9);
    println!(
        "throughput: {:.1} windows/s, {:.1} forecast points/s, {:.2} points/s/node ({:.2} s)",
        rows as f64 / secs,
        (rows * horizon) as f64 / secs,
        (rows * horizon) as f64 / secs / nodes as f64,
        secs
    );
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let mut ws = Workspace::existing(&a.loc)?;
    if let Some(k) = a.k {
        ws.cfg.forecast.k = k;
    }
    ws.cfg.validate()?;
    let ckpt = ws.checkpoint()?;
    let store = load_store(&a.store.unwrap_or_else(|| ws.dir.join("store.kmtds")))?;
    let forecaster = Forecaster::new(&ckpt, &store, ws.graph.as_ref(), ws.cfg.forecast.clone())?;
    let window = ckpt.encoder.config.window();
    if a.end_step + 1 < window.history || a.end_step + window.horizon >= ws.raw.t_steps() {
        return Err(Error::Request(format!(
            "no complete window ends at step {} (history {}, horizon {}, {} steps)",
            a.end_step,
            window.history,
            window.horizon,
            ws.raw.t_steps()
        )));
    }
    let out = a.out.unwrap_or_else(|| ws.dir.join("neighbors.csv"));
    let (fc, dump) = inspect_neighbors(&forecaster, &ws.raw, a.node, a.end_step, &out)?;
    println!(
        "node {} step {}: lambda {:.4}, mean distance {:.4}, nearest distance {:.4}",
        a.node, a.end_step, fc.retrieval.lambda, fc.retrieval.mean_distance, fc.retrieval.distances[0]
    );
    println!(
        "wrote {}, {}, {}",
        dump.neighbors.display(),
        dump.query.display(),
        dump.keys.display()
    );
    Ok(())
}
