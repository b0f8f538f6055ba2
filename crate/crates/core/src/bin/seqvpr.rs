use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use seqvpr::aggregation::{read_descriptors, PcaModel};
use seqvpr::config::RunConfig;
use seqvpr::dataset::{load_directory, load_split, write_split, Condition};
use seqvpr::eval::{
    ablation_csv, count_flops, extract_descriptors, read_tags, recall_at_k, render_scenario, retrieve_topk,
    run_ablation, tags_path, AblationAxis, SequenceSet, SplitSequences, Threshold,
};
use seqvpr::model::SequenceModel;
use seqvpr::training::train;
use seqvpr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "seqvpr",
    version,
    about = "Sequence descriptors for visual place recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scenario into DIR/{train,val,test}/{db,query}.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        places: usize,
        #[arg(long)]
        out: PathBuf,
        /// Query condition: clean, day, dusk, night or custom:b,h,n,o.
        #[arg(long)]
        condition: Option<Condition>,
        /// Optional config file for the remaining scenario settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Split directory with db/ and query/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Describe every sequence of a dataset directory.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pca: Option<PathBuf>,
    },
    /// Fit a PCA projection on a descriptor file.
    PcaFit {
        #[arg(long)]
        desc: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        whiten: bool,
    },
    /// Recall@K of query descriptors against a database.
    Eval(EvalArgs),
    /// Multiply-accumulate and FLOP counts as CSV.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
    },
    /// Train and evaluate the variants of one ablation axis.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
    radius: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn gen(seed: u64, places: usize, out: &Path, condition: Option<Condition>, config: Option<&Path>) -> Result<()> {
    let mut sc = match config {
        Some(p) => RunConfig::load(p)?.scenario,
        None => RunConfig::default().scenario,
    };
    sc.places = places;
    if let Some(c) = condition {
        sc.query_condition = c;
    }
    let data = render_scenario(&sc, seed)?;
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        write_split(&out.join(name), split)?;
    }
    info!("wrote {places}-place scenario to {}", out.display());
    Ok(())
}

fn train_cmd(data: &Path, val: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    let stride = run.train.seq_stride;
    let train_seqs = SplitSequences::new(&load_split(data)?, &run.model, stride);
    let val_seqs = SplitSequences::new(&load_split(val)?, &run.model, stride);
    let mut model = SequenceModel::new(&run.model, run.train.seed)?;
    let history = train(&mut model, &train_seqs, Some(&val_seqs), &run.train)?;
    model.save_checkpoint(out, &run, history.iterations)?;
    info!(
        "trained {} epochs, {} steps; checkpoint {}",
        history.epochs.len(),
        history.iterations,
        out.display()
    );
    Ok(())
}

fn extract(ckpt: &Path, data: &Path, out: &Path, pca: Option<&Path>) -> Result<()> {
    let (model, run, _) = SequenceModel::load_checkpoint(ckpt)?;
    let set = SequenceSet::new(&load_directory(data)?, &model.config, run.train.seq_stride);
    let pca = pca.map(PcaModel::load).transpose()?;
    let rows = extract_descriptors(&model, &set, pca.as_ref(), out)?;
    info!("wrote {} descriptors to {}", rows.len(), out.display());
    Ok(())
}

fn pca_fit(desc: &Path, dim: usize, out: &Path, whiten: bool) -> Result<()> {
    let rows = read_descriptors(desc)?;
    PcaModel::fit(&rows, dim, whiten)?.save(out)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let q = read_descriptors(&a.query)?;
    let db = read_descriptors(&a.db)?;
    let qt = read_tags(&tags_path(&a.query))?;
    let dt = read_tags(&tags_path(&a.db))?;
    if dt.len() != db.len() {
        return Err(Error::Usage(format!(
            "{} database tags for {} descriptors",
            dt.len(),
            db.len()
        )));
    }
    let thr = match (a.radius, a.frames) {
        (Some(r), None) => Threshold::Radius(r),
        (None, Some(n)) => Threshold::Frames(n),
        _ => return Err(Error::Usage("give exactly one of --radius or --frames".into())),
    };
    let kmax = a.k.iter().copied().max().unwrap_or(1);
    let r = retrieve_topk(&q, &db, kmax)?;
    let variant = a
        .query
        .file_stem()
        .map_or_else(|| "eval".into(), |s| s.to_string_lossy().into_owned());
    let mut header = String::from("variant");
    let mut line = variant;
    for &k in &a.k {
        header.push_str(&format!(",recall@{k}"));
        line.push_str(&format!(",{:.6}", recall_at_k(&r, &qt, &dt, k, thr)?));
    }
    header.push_str(",queries,db_size\n");
    line.push_str(&format!(",{},{}\n", q.len(), db.len()));
    print!("{header}{line}");
    fs::write(&a.out, header + &line)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            seed,
            places,
            out,
            condition,
            config,
        } => gen(seed, places, &out, condition, config.as_deref()),
        Command::Train {
            data,
            val,
            config,
            out,
            seed,
        } => train_cmd(&data, &val, &config, &out, seed),
        Command::Extract { ckpt, data, out, pca } => extract(&ckpt, &data, &out, pca.as_deref()),
        Command::PcaFit { desc, dim, out, whiten } => pca_fit(&desc, dim, &out, whiten),
        Command::Eval(a) => eval(&a),
        Command::Bench { config, height, width } => {
            let run = RunConfig::load(&config)?;
            print!("{}", count_flops(&run.model, height, width)?.to_csv());
            Ok(())
        }
        Command::Ablate { axis, config, out } => {
            let run = RunConfig::load(&config)?;
            let csv = ablation_csv(&run_ablation(axis, &run)?);
            print!("{csv}");
            fs::write(out, csv)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
