use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fss::emit::{emit_report, Format};
use fss::io::{export_dataset, read_mask, write_mask, Convention, DiskDataset};
use fss::runner::{load_records, results_root, run_experiment, RunContext, RunOptions};
use fss::spec::ExperimentSpec;
use fss_core::adaptation::Method;
use fss_core::datasets::{synth_blobs, Dataset, Split, SyntheticBlobConfig};
use fss_core::metrics::ConfusionMatrix;
use fss_core::sampler::{SamplerConfig, TaskSampler};

#[derive(Parser)]
#[command(name = "fss", version, about = "Few-shot semantic segmentation benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic blob dataset in the on-disk layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Draw a k-shot task and print its manifest.
    Sample {
        #[arg(long)]
        spec: PathBuf,
        /// Index into the spec's dataset list.
        #[arg(long, default_value_t = 0)]
        dataset: usize,
        #[arg(long)]
        shots: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train and evaluate one run and print its record.
    Train {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        dataset: usize,
        #[arg(long)]
        method: String,
        #[arg(long)]
        shots: usize,
        #[arg(long)]
        seed: u64,
        /// Head learning rate; defaults to the spec's lr policy.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        stage2_lr: Option<f64>,
        /// Write predicted query masks here as index PNGs.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
    },
    /// Score predicted index masks against a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_convention, default_value = "generic")]
        convention: Convention,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Run every cell of an experiment spec, reusing completed runs.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        /// Results root; defaults to $FSS_RESULTS_ROOT or ./results.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Report directory; defaults to the spec's `output` or `<results>/<spec-hash>/report`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Aggregate stored records into report files.
    Report {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated: csv, json, jsonl, sizes, plot, lr-transfer.
        #[arg(long, value_delimiter = ',', default_value = "csv,json,jsonl,sizes,plot,lr-transfer")]
        formats: Vec<String>,
    },
}

fn parse_convention(s: &str) -> std::result::Result<Convention, String> {
    match s {
        "generic" => Ok(Convention::Generic),
        "cityscapes" => Ok(Convention::Cityscapes),
        "ppd" => Ok(Convention::Ppd),
        other => Err(format!("unknown convention {other:?}")),
    }
}

fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    ExperimentSpec::load(path).with_context(|| format!("reading spec {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth { out, classes, images, size, seed } => {
            let cfg = SyntheticBlobConfig { n_classes: classes, images, image_size: (size, size), seed, ..Default::default() };
            let ds = synth_blobs(&cfg)?;
            export_dataset(&ds, &out)?;
            println!("wrote {} images to {}", images, out.display());
        }
        Cmd::Sample { spec, dataset, shots, seed } => {
            let spec = load_spec(&spec)?;
            let dref = spec.datasets.get(dataset).context("dataset index out of range")?;
            let ds = dref.open()?;
            let sampler = TaskSampler::new(ds.as_ref(), spec.min_pixels)?;
            let manifest = sampler.manifest(&SamplerConfig::new(sampler.index(), shots, seed))?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Cmd::Train { spec, dataset, method, shots, seed, lr, stage2_lr, pred_dir } => {
            let spec = load_spec(&spec)?;
            let method = Method::parse(&method)?;
            let dref = spec.datasets.get(dataset).context("dataset index out of range")?;
            let mut choice = spec.lr_choices(dref, method)[0];
            if let Some(v) = lr {
                choice.stage1 = v;
            }
            if stage2_lr.is_some() && method.has_stage2() {
                choice.stage2 = stage2_lr;
            }
            let ds = dref.open()?;
            let sampler = TaskSampler::new(ds.as_ref(), spec.min_pixels)?;
            let (task, manifest) = sampler.make_task(shots, seed)?;
            let (hash, snapshot) = (spec.spec_hash(), spec.to_toml()?);
            let ctx = RunContext { spec: &spec, spec_hash: &hash, spec_snapshot: &snapshot, dataset: ds.name(), method, lr: choice, seed, shots };
            let (record, outcome) = ctx.execute_with_outcome(&task, &manifest);
            if let (Some(dir), Some(outcome)) = (pred_dir, outcome) {
                std::fs::create_dir_all(&dir)?;
                for (q, p) in task.query.iter().zip(&outcome.predictions) {
                    write_mask(&dir.join(format!("{}.png", q.image_id)), p)?;
                }
            }
            println!("{}", serde_json::to_string_pretty(&record)?);
            if let Some(e) = record.error {
                bail!("run failed: {e}");
            }
        }
        Cmd::Eval { data, convention, pred } => {
            let ds = DiskDataset::open(&data, convention, 0)?;
            let mut cm = ConfusionMatrix::new(ds.catalog());
            let ids = ds.ids(Split::Val);
            for id in &ids {
                let p = read_mask(&pred.join(format!("{id}.png")))?;
                cm.update(&p, &ds.load_mask(id)?)?;
            }
            let report = cm.miou()?;
            for (c, iou) in ds.catalog().classes.iter().zip(&report.per_class) {
                match iou {
                    Some(v) => println!("{:>20}  {:.4}", c.name, v),
                    None => println!("{:>20}  -", c.name),
                }
            }
            println!("{:>20}  {:.4}  ({} images)", "mIoU", report.miou, ids.len());
        }
        Cmd::Sweep { spec: spec_path, results, force, report } => {
            let spec = load_spec(&spec_path)?;
            let root = results_root(results.as_deref());
            let records = run_experiment(&spec, &root, RunOptions { force }, &mut |r| {
                let status = match (&r.error, r.status) {
                    (Some(e), _) => format!("FAILED: {e}"),
                    (None, s) => format!("{s:?} mIoU {:.4}", r.miou.unwrap_or(f64::NAN)),
                };
                eprintln!("{} {} shots={} seed={} lr={} {:?}: {}", r.dataset, r.method.name(), r.shots, r.seed, r.lr, r.stage2_lr, status);
            })?;
            let out = report.or(spec.output.clone()).unwrap_or_else(|| root.join(spec.spec_hash()).join("report"));
            emit_report(&records, &Format::ALL, &out)?;
            eprintln!("report written to {}", out.display());
        }
        Cmd::Report { results, out, formats } => {
            let formats: Vec<Format> = formats.iter().map(|f| f.parse()).collect::<std::result::Result<_, _>>()?;
            let records = load_records(&results_root(results.as_deref()))?;
            if records.is_empty() {
                bail!("no records found");
            }
            for p in emit_report(&records, &formats, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
