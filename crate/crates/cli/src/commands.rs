use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use flowrec::catalog::{
    assign_popularity_groups, build_catalog, ingest_interactions, preprocess, Catalog, Dataset,
    InputFormat, TimeWindow, Tokenizer,
};
use flowrec::decode::{generate_topk, sample_list, DecodeSettings, Recommendation, Strategy};
use flowrec::eval::MetricsReport;
use flowrec::flownet::{FlowOptions, FlowTree};
use flowrec::policy::PolicyParams;
use flowrec::prefs::{OverrideScores, PrefModel, PreferenceScorer};
use flowrec::training::{self, EpochLog};
use serde::Serialize;

use crate::config::{normalize_key, RunConfig, Settings};
use crate::{DecodeFlags, EvalArgs, Failure, GenerateArgs, IngestArgs, SweepArgs, TrainArgs, TrainFlags, ZipfArgs};

type CmdResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    flowrec::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} {} does not exist", path.display())))
    }
}

const DATASET_FILE: &str = "dataset.jsonl";
const CATALOG_FILE: &str = "catalog.jsonl";
const INGEST_FILE: &str = "ingest.txt";

pub fn ingest(args: &IngestArgs) -> CmdResult {
    require_file(&args.input, "input file")?;
    let format: InputFormat = args.format.parse()?;
    let tokenizer: Tokenizer = args.tokenizer.parse()?;
    let window = match &args.time_window {
        None => None,
        Some(w) => {
            let (a, b) = w
                .split_once(',')
                .ok_or_else(|| Failure::usage("--time-window expects start,end"))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<i64>()
                    .map_err(|e| Failure::usage(format!("bad timestamp {s:?}: {e}")))
            };
            Some(TimeWindow {
                start: parse(a)?,
                end: parse(b)?,
            })
        }
    };
    let ingested = ingest_interactions(&args.input, format)?;
    let n_records = ingested.records.len();
    let dataset = preprocess(ingested.records, args.k_core, args.max_len, window)?;
    let catalog = build_catalog(&dataset, tokenizer)?;

    create_dir(&args.out)?;
    dataset.write_manifest(&args.out.join(DATASET_FILE))?;
    catalog.write_manifest(&args.out.join(CATALOG_FILE), None)?;
    let meta = format!(
        "tokenizer = {tokenizer}\nk_core = {}\nmax_len = {}\nrecords = {n_records}\nmalformed = {}\ntrain = {}\nvalid = {}\ntest = {}\nitems = {}\n",
        args.k_core,
        args.max_len,
        ingested.malformed,
        dataset.train.len(),
        dataset.valid.len(),
        dataset.test.len(),
        catalog.len()
    );
    write_file(&args.out.join(INGEST_FILE), &meta)?;
    if ingested.malformed > 0 {
        eprintln!("dropped {} malformed rows", ingested.malformed);
    }
    println!(
        "{} interactions -> train {} / valid {} / test {}, {} items",
        n_records,
        dataset.train.len(),
        dataset.valid.len(),
        dataset.test.len(),
        catalog.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct LogLine<'a> {
    user: &'a str,
    item: &'a str,
    title: &'a str,
    ts: i64,
}

pub fn make_zipf(args: &ZipfArgs) -> CmdResult {
    let records = flowrec::synth::zipf_log(args.items, args.exponent, args.interactions, args.users, args.seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let file = File::create(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        let line = LogLine {
            user: &r.user_id,
            item: &r.item_id,
            title: &r.title,
            ts: r.timestamp,
        };
        serde_json::to_writer(&mut w, &line).map_err(Failure::runtime)?;
        w.write_all(b"\n").map_err(|e| io_err(&args.out, e))?;
    }
    w.flush().map_err(|e| io_err(&args.out, e))?;
    println!("wrote {} interactions to {}", records.len(), args.out.display());
    Ok(())
}

struct Data {
    tokenizer: Tokenizer,
    catalog: Catalog,
    dataset: Dataset,
}

fn read_tokenizer(dir: &Path) -> CmdResult<Tokenizer> {
    let path = dir.join(INGEST_FILE);
    require_file(&path, "ingest metadata")?;
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "tokenizer")
        .ok_or_else(|| Failure::usage(format!("{} names no tokenizer", path.display())))?
        .1
        .trim()
        .parse()
        .map_err(Failure::from)
}

fn load_data(dir: &Path) -> CmdResult<Data> {
    let tokenizer = read_tokenizer(dir)?;
    let catalog_path = dir.join(CATALOG_FILE);
    let dataset_path = dir.join(DATASET_FILE);
    require_file(&catalog_path, "catalog manifest")?;
    require_file(&dataset_path, "dataset manifest")?;
    let catalog = Catalog::read_manifest(&catalog_path, tokenizer)?;
    let dataset = Dataset::read_manifest(&dataset_path, &catalog)?;
    Ok(Data {
        tokenizer,
        catalog,
        dataset,
    })
}

fn build_tree(catalog: &Catalog, config: &RunConfig) -> CmdResult<FlowTree> {
    let options = FlowOptions {
        frequency_floor: config.frequency_floor,
    };
    Ok(FlowTree::build(catalog, &catalog.frequencies(), options)?)
}

fn apply_decode_flags(s: &mut Settings, d: &DecodeFlags) -> CmdResult {
    let pairs = [
        ("k", &d.k),
        ("fair_k", &d.fair_k),
        ("groups", &d.groups),
        ("temperature", &d.temperature),
        ("strategy", &d.strategy),
        ("decode_seed", &d.decode_seed),
        ("split", &d.split),
    ];
    for (key, value) in pairs {
        if let Some(v) = value {
            s.set(key, v.clone())?;
        }
    }
    Ok(())
}

fn train_settings(flags: &TrainFlags) -> CmdResult<Settings> {
    let mut s = Settings::defaults();
    if let Some(path) = &flags.config {
        s.load_file(path)?;
    }
    let pairs = [
        ("data", &flags.data),
        ("lambda", &flags.lambda),
        ("reward_variant", &flags.reward_variant),
        ("granularity", &flags.granularity),
        ("lr", &flags.lr),
        ("momentum", &flags.momentum),
        ("batch_size", &flags.batch_size),
        ("max_epochs", &flags.max_epochs),
        ("patience", &flags.patience),
        ("max_steps", &flags.max_steps),
        ("samples", &flags.samples),
        ("seed", &flags.seed),
        ("sft_weight", &flags.sft_weight),
        ("mode", &flags.mode),
        ("dim", &flags.dim),
        ("pref_alpha", &flags.pref_alpha),
        ("pref_scores", &flags.pref_scores),
        ("frequency_floor", &flags.frequency_floor),
        ("eval_k", &flags.eval_k),
    ];
    for (key, value) in pairs {
        if let Some(v) = value {
            s.set(key, v.clone())?;
        }
    }
    let switches = [
        ("sft_only", flags.sft_only),
        ("subtb_only", flags.subtb_only),
        ("history_free", flags.history_free),
        ("subtb_mean", flags.subtb_mean),
    ];
    for (key, on) in switches {
        if on {
            s.set(key, "true")?;
        }
    }
    apply_decode_flags(&mut s, &flags.decode)?;
    Ok(s)
}

fn scorer(config: &RunConfig, data: &Data) -> CmdResult<Box<dyn PreferenceScorer>> {
    let items: Vec<String> = data.catalog.items.keys().cloned().collect();
    let sequences = data.dataset.train_sequences();
    let model = PrefModel::fit(&items, sequences.values().map(Vec::as_slice), config.pref_alpha)?;
    Ok(match &config.pref_scores {
        Some(path) => {
            require_file(path, "preference score file")?;
            Box::new(OverrideScores::read(path, model)?)
        }
        None => Box::new(model),
    })
}

fn checkpoint_dir(run: &Path) -> PathBuf {
    run.join("checkpoints")
}

fn best_checkpoint(run: &Path) -> PathBuf {
    checkpoint_dir(run).join("best.json")
}

/// Trains per `config` into `config.out`; returns the best epoch.
fn run_training(config: &mut RunConfig) -> CmdResult<usize> {
    if config.data.as_os_str().is_empty() {
        return Err(Failure::usage("no data directory given (--data or `data` in the config)"));
    }
    if config.out.as_os_str().is_empty() {
        return Err(Failure::usage("no run directory given (--out or `out` in the config)"));
    }
    if !config.data.is_dir() {
        return Err(Failure::usage(format!("data directory {} does not exist", config.data.display())));
    }
    let data = load_data(&config.data)?;
    match config.tokenizer {
        Some(t) if t != data.tokenizer => {
            return Err(Failure::usage(format!(
                "config names tokenizer {t} but the data was built with {}",
                data.tokenizer
            )))
        }
        _ => config.tokenizer = Some(data.tokenizer),
    }
    let run = config.out.clone();
    let data_copy = run.join("data");
    create_dir(&checkpoint_dir(&run))?;
    create_dir(&data_copy)?;
    for name in [DATASET_FILE, CATALOG_FILE, INGEST_FILE] {
        let (from, to) = (config.data.join(name), data_copy.join(name));
        if from != to {
            fs::copy(&from, &to).map_err(|e| io_err(&from, e))?;
        }
    }
    write_file(&run.join("config.txt"), &config.to_text())?;

    let tree = build_tree(&data.catalog, config)?;
    let items: Vec<String> = data.catalog.items.keys().cloned().collect();
    let init = PolicyParams::init(&tree, &items, config.mode, config.dim, config.train.seed)?;
    let prefs = scorer(config, &data)?;

    let mut log_csv = format!("{}\n", EpochLog::CSV_HEADER);
    let outcome = training::train(&data.dataset, &tree, init, Some(prefs.as_ref()), &config.train, |row, params| {
        eprintln!(
            "epoch {} step {} sft {:.5} subtb {:.5} valid NDCG@{} {}",
            row.epoch,
            row.step,
            row.sft_loss,
            row.subtb_loss,
            config.train.eval_k,
            row.valid_ndcg.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        log_csv.push_str(&row.csv_row());
        log_csv.push('\n');
        params.write_checkpoint(&tree, &checkpoint_dir(&run).join(format!("epoch_{}.json", row.epoch)))
    })?;
    write_file(&run.join("train_log.csv"), &log_csv)?;
    outcome.params.write_checkpoint(&tree, &best_checkpoint(&run))?;
    Ok(outcome.best_epoch)
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let mut s = train_settings(&args.flags)?;
    if let Some(out) = &args.out {
        s.set("out", out.clone())?;
    }
    let mut config = RunConfig::from_settings(&s)?;
    let best = run_training(&mut config)?;
    println!("best epoch {best}; run written to {}", config.out.display());
    Ok(())
}

fn run_config(run: &Path, decode: &DecodeFlags) -> CmdResult<RunConfig> {
    let path = run.join("config.txt");
    require_file(&path, "run config")?;
    let mut s = Settings::defaults();
    s.load_file(&path)?;
    apply_decode_flags(&mut s, decode)?;
    RunConfig::from_settings(&s)
}

fn generate_run(run: &Path, config: &RunConfig, checkpoint: Option<&Path>) -> CmdResult<usize> {
    let data = load_data(&run.join("data"))?;
    let tree = build_tree(&data.catalog, config)?;
    let ckpt = checkpoint.map_or_else(|| best_checkpoint(run), Path::to_path_buf);
    require_file(&ckpt, "checkpoint")?;
    let params = PolicyParams::read_checkpoint(&tree, &ckpt)?;

    let list_len = config.k.max(config.fair_k);
    let settings = DecodeSettings {
        strategy: config.strategy,
        k: list_len,
        temperature: config.temperature,
        seed: (config.strategy == Strategy::Sample).then_some(config.decode_seed),
    };
    let mut rng = flowrec::seeded_rng(config.decode_seed);
    let path = run.join("recommendations.jsonl");
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    let mut w = BufWriter::new(file);
    let examples = data.dataset.split(config.split);
    for ex in examples {
        let ctx = if config.train.history_free {
            params.zero_context()
        } else {
            params.encode_context(&ex.history)
        };
        let list = match config.strategy {
            Strategy::Topk => generate_topk(&tree, &ctx, &params, list_len, config.temperature)?,
            Strategy::Sample => sample_list(&tree, &ctx, &params, list_len, config.temperature, &mut rng)?,
        };
        let rec = Recommendation::from_list(&ex.user, &ex.target, &list, settings.clone());
        serde_json::to_writer(&mut w, &rec).map_err(Failure::runtime)?;
        w.write_all(b"\n").map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(examples.len())
}

pub fn generate(args: &GenerateArgs) -> CmdResult {
    let config = run_config(&args.run, &args.decode)?;
    let n = generate_run(&args.run, &config, args.checkpoint.as_deref())?;
    println!("wrote {n} recommendation lists to {}", args.run.join("recommendations.jsonl").display());
    Ok(())
}

fn read_recommendations(path: &Path) -> CmdResult<Vec<Recommendation>> {
    require_file(path, "recommendations file")?;
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Recommendation = serde_json::from_str(&line).map_err(|e| {
            Failure::usage(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn eval_run(run: &Path, config: &RunConfig) -> CmdResult<MetricsReport> {
    let data = load_data(&run.join("data"))?;
    let recs = read_recommendations(&run.join("recommendations.jsonl"))?;
    let groups = assign_popularity_groups(&data.catalog, config.groups)?;
    let lists: Vec<_> = recs.iter().map(Recommendation::to_list).collect();
    let targets: Vec<&str> = recs.iter().map(|r| r.target.as_str()).collect();
    let report = MetricsReport::compute(&lists, &targets, &data.catalog, &groups, config.k, config.fair_k)?;
    write_file(
        &run.join("metrics.csv"),
        &format!("{}\n{}\n", report.csv_header(), report.csv_row()),
    )?;
    write_file(&run.join("metrics.txt"), &report.table())?;
    write_file(&run.join("group_hist.csv"), &report.group_hist.to_csv())?;
    Ok(report)
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let config = run_config(&args.run, &args.decode)?;
    let report = eval_run(&args.run, &config)?;
    print!("{}", report.table());
    Ok(())
}

/// Directory-safe rendering of a sweep value.
fn slug(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

pub fn sweep(args: &SweepArgs) -> CmdResult {
    let base = train_settings(&args.flags)?;
    let param = normalize_key(&args.param);
    if matches!(param.as_str(), "data" | "out") {
        return Err(Failure::usage(format!("cannot sweep over {param:?}")));
    }
    if args.values.is_empty() {
        return Err(Failure::usage("--values needs at least one value"));
    }
    let root = PathBuf::from(&args.out);
    // Validate every setting before the first (slow) run.
    let mut configs = Vec::with_capacity(args.values.len());
    for value in &args.values {
        let mut s = base.clone();
        s.set(&param, value.trim())?;
        s.set("out", root.join(format!("{param}={}", slug(value.trim()))).display().to_string())?;
        configs.push((value.trim().to_string(), RunConfig::from_settings(&s)?));
    }
    create_dir(&root)?;
    let mut csv = String::new();
    for (value, mut config) in configs {
        eprintln!("== {param} = {value}");
        let best = run_training(&mut config)?;
        let run = config.out.clone();
        generate_run(&run, &config, None)?;
        let report = eval_run(&run, &config)?;
        if csv.is_empty() {
            csv = format!("param,value,best_epoch,{}\n", report.csv_header());
        }
        csv.push_str(&format!("{param},{value},{best},{}\n", report.csv_row()));
    }
    write_file(&root.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
