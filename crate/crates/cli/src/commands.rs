use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Parser;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use fsspip::dataset::{channelize_bags, channelize_record, load_dataset, write_dataset};
use fsspip::embed::{EmbeddingProvider, FileEmbeddings, HashingEmbedder};
use fsspip::eval::{
    channel_importance, derive_seeds, evaluate, few_shot_protocol, group_by_attr, group_leaning, group_leaning_csv,
    time_inference, two_sample_t_test, Metrics, TTest,
};
use fsspip::ingest::{extract_channels, parse_archive, parse_timestamp, strip_profile, RawUserRecord, TimeWindow};
use fsspip::model::predict_proba;
use fsspip::pretrain::{build_silver_labels, load_anchors, pretrain, HeadsConfig};
use fsspip::schema::{build_vocabulary, ChannelBags, Provenance};
use fsspip::simgen::{bayes_oracle_accuracy, sample_population, GenerativeSpec};
use fsspip::train::config::parse_entries;
use fsspip::train::{train, TrainConfig};
use fsspip::{AttentionVariant, ChannelSchema, Checkpoint, Error, LabeledDataset, Vocabulary};

use crate::manifest::{write_atomic, RunManifest};
use crate::{Cli, Command, EmbeddingArgs, WindowArgs};

/// Manifest under construction for one command.
struct Run {
    manifest: RunManifest,
}

impl Run {
    fn new(command: &str, argv: &[String]) -> Result<Self> {
        Ok(Run {
            manifest: RunManifest::new(command, argv.to_vec())?,
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.push(crate::manifest::digest_input(path)?);
        Ok(())
    }

    fn inputs<'a>(&mut self, paths: impl IntoIterator<Item = &'a Option<PathBuf>>) -> Result<()> {
        for p in paths.into_iter().flatten() {
            self.input(p)?;
        }
        Ok(())
    }

    fn config(&mut self, config: &TrainConfig) {
        self.manifest.seed = Some(config.seed);
        self.manifest.config = Some(config.to_entries());
    }

    /// Record the outputs and write the manifest beside the first one.
    fn begin(&mut self, outputs: &[&Path]) -> Result<()> {
        self.manifest.outputs = outputs.iter().map(|p| p.to_path_buf()).collect();
        match outputs.first() {
            Some(primary) => self.manifest.write(primary),
            None => Ok(()),
        }
    }
}

fn schema() -> ChannelSchema {
    ChannelSchema::default_schema()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e }.into())
}

fn load_config(path: Option<&Path>, base: TrainConfig) -> Result<(TrainConfig, HeadsConfig)> {
    let Some(path) = path else {
        return Ok((base, HeadsConfig::default()));
    };
    let mut entries = parse_entries(&read_text(path)?)?;
    let heads = HeadsConfig::default().apply_entries(&mut entries)?;
    let cfg = base.apply_entries(&mut entries)?;
    if let Some(k) = entries.keys().next() {
        bail!(Error::Config(format!("unknown config key {k:?} in {}", path.display())));
    }
    Ok((cfg, heads))
}

fn load_data(path: &Path) -> Result<LabeledDataset> {
    load_dataset(&schema(), path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(&schema(), path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn time_window(range: &WindowArgs) -> Result<TimeWindow> {
    let parse = |s: &Option<String>| s.as_deref().map(parse_timestamp).transpose();
    Ok(TimeWindow::new(parse(&range.after)?, parse(&range.before)?)?)
}

fn provider(args: &EmbeddingArgs, d_em: usize) -> Result<Box<dyn EmbeddingProvider>> {
    match &args.embeddings {
        Some(p) => {
            let f = FileEmbeddings::load(p)?;
            if f.dim() != d_em {
                bail!(Error::Dimension(format!(
                    "embedding file has dimension {}, expected {d_em}",
                    f.dim()
                )));
            }
            Ok(Box::new(f))
        }
        None => Ok(Box::new(HashingEmbedder::new(d_em, args.hash_seed.unwrap_or(0)))),
    }
}

fn read_records(path: &Path, skip_invalid: bool) -> Result<Vec<RawUserRecord>> {
    let mut out = Vec::new();
    for rec in parse_archive(path)? {
        match rec {
            Ok(r) => out.push(r),
            Err(e) if skip_invalid => log::warn!("skipping record: {e}"),
            Err(e) => return Err(e).with_context(|| format!("reading archive {}", path.display())),
        }
    }
    Ok(out)
}

fn read_bags(path: &Path) -> Result<Vec<ChannelBags>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::Io { path: path.into(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

fn dataset_bytes(data: &LabeledDataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_dataset(data, &mut buf)?;
    Ok(buf)
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn checkpoint_for(params: fsspip::ModelParams, variant: AttentionVariant, data: &LabeledDataset) -> Checkpoint {
    let mut ck = Checkpoint::new(params, variant);
    ck.class_names = data.class_names.clone();
    ck.vocabulary = data.vocabulary.clone();
    ck
}

fn init_params(path: &Option<PathBuf>) -> Result<Option<fsspip::ModelParams>> {
    Ok(match path {
        Some(p) => Some(load_ckpt(p)?.params),
        None => None,
    })
}

#[derive(Serialize)]
struct EvalReport<'a> {
    variant: AttentionVariant,
    class_names: &'a [String],
    metrics: &'a Metrics,
}

#[derive(Serialize)]
struct OracleReport {
    n: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct TTestReport {
    column: String,
    n_a: usize,
    n_b: usize,
    mean_a: f64,
    mean_b: f64,
    #[serde(flatten)]
    test: TTest,
}

/// Values of `column` from a CSV, optionally keeping rows whose `shots` matches.
fn csv_column(path: &Path, column: &str, shots: Option<usize>) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Error::Validation(e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let col = find(column)
        .ok_or_else(|| Error::Validation(format!("{} has no column {column:?}", path.display())))?;
    let shots_col = match shots {
        Some(_) => Some(find("shots").ok_or_else(|| Error::Validation(format!("{} has no shots column", path.display())))?),
        None => None,
    };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        if let (Some(s), Some(c)) = (shots, shots_col) {
            if rec.get(c).and_then(|v| v.parse::<usize>().ok()) != Some(s) {
                continue;
            }
        }
        let v = rec.get(col).unwrap_or("");
        out.push(v.parse().map_err(|_| Error::Parse {
            line: i + 2,
            message: format!("{column} = {v:?} is not a number"),
        })?);
    }
    Ok(out)
}

pub fn run(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::Ingest {
            archive,
            window,
            range,
            skip_invalid,
            out,
        } => {
            let mut run = Run::new("ingest", &argv)?;
            run.input(&archive)?;
            let tw = time_window(&range)?;
            run.begin(&[&out])?;
            let s = schema();
            let bags: Vec<ChannelBags> = read_records(&archive, skip_invalid)?
                .iter()
                .map(|r| {
                    let mut b = extract_channels(&s, r, &tw);
                    if window {
                        strip_profile(&s, &mut b);
                    }
                    b
                })
                .collect();
            write_atomic(&out, jsonl(&bags)?.as_bytes())
        }
        Command::Vocab { bags, min_count, out } => {
            let mut run = Run::new("vocab", &argv)?;
            run.input(&bags)?;
            run.begin(&[&out])?;
            let vocab = build_vocabulary(&schema(), &read_bags(&bags)?, min_count);
            let mut buf = Vec::new();
            vocab.write_tsv(&mut buf)?;
            write_atomic(&out, &buf)
        }
        Command::Dataset {
            bags,
            vocab,
            embed,
            d_em,
            num_classes,
            class_names,
            provenance,
            out,
        } => {
            let mut run = Run::new("dataset", &argv)?;
            run.input(&bags)?;
            run.input(&vocab)?;
            run.inputs([&embed.embeddings])?;
            let provenance: Provenance = serde_json::from_value(serde_json::Value::String(provenance.clone()))
                .map_err(|_| Error::Config(format!("unknown provenance {provenance:?}")))?;
            if !class_names.is_empty() && class_names.len() != num_classes {
                bail!(Error::Config(format!("{} class names for {num_classes} classes", class_names.len())));
            }
            run.begin(&[&out])?;
            let s = schema();
            let vocabulary = Vocabulary::load(&s, &vocab)?;
            let provider = provider(&embed, d_em)?;
            let bags = read_bags(&bags)?;
            let users = fsspip::par::map(&bags, |b| channelize_bags(&s, b, &vocabulary, provider.as_ref()));
            let mut data = LabeledDataset::new(s.clone(), vocabulary.sizes(), provider.dim(), num_classes, provenance);
            data.class_names = if class_names.is_empty() {
                (0..num_classes).map(|c| c.to_string()).collect()
            } else {
                class_names
            };
            data.users = users.into_iter().collect::<fsspip::Result<_>>()?;
            data.vocabulary = Some(vocabulary);
            data.validate()?;
            write_atomic(&out, &dataset_bytes(&data)?)
        }
        Command::Silver {
            anchors,
            pool,
            sample,
            seed,
            data,
            out,
        } => {
            let mut run = Run::new("silver", &argv)?;
            run.input(&anchors)?;
            run.inputs([&data])?;
            run.manifest.seed = Some(seed);
            run.begin(&[&out])?;
            let anchors = load_anchors(&anchors)?;
            let labels = build_silver_labels(&anchors, pool, sample, &mut ChaCha8Rng::seed_from_u64(seed))?;
            for c in &labels.counts {
                log::info!("{}: {} followers, {} retweeters", c.party, c.followers, c.retweeters);
            }
            match data {
                Some(p) => write_atomic(&out, &dataset_bytes(&labels.apply(&load_data(&p)?)?)?),
                None => write_atomic(&out, labels.to_jsonl()?.as_bytes()),
            }
        }
        Command::Pretrain {
            data,
            config,
            init,
            variant,
            out,
        } => {
            let mut run = Run::new("pretrain", &argv)?;
            run.input(&data)?;
            run.inputs([&config, &init])?;
            let (mut cfg, heads) = load_config(config.as_deref(), TrainConfig::pretraining())?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            run.config(&cfg);
            let log_path = sibling(&out, ".log.csv");
            run.begin(&[&out, &log_path])?;
            let ds = load_data(&data)?;
            let outcome = pretrain(&ds, &cfg, &heads, init_params(&init)?)?;
            let mut log = String::from("epoch,loss,mixup_loss,selfsup_loss\n");
            for e in &outcome.log {
                let _ = writeln!(log, "{},{},{},{}", e.epoch, e.loss, e.mixup_loss, e.selfsup_loss);
            }
            let ck = checkpoint_for(outcome.params, cfg.variant, &ds);
            write_atomic(&out, ck.to_json()?.as_bytes())?;
            write_atomic(&log_path, log.as_bytes())
        }
        Command::Train {
            data,
            config,
            init,
            variant,
            out,
        } => {
            let mut run = Run::new("train", &argv)?;
            run.input(&data)?;
            run.inputs([&config, &init])?;
            let (mut cfg, _) = load_config(config.as_deref(), TrainConfig::default())?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            run.config(&cfg);
            let log_path = sibling(&out, ".log.csv");
            run.begin(&[&out, &log_path])?;
            let ds = load_data(&data)?;
            let (outcome, split) = train(&ds, &cfg, init_params(&init)?)?;
            log::info!(
                "kept epoch {} of {} ({} train / {} val / {} test users)",
                outcome.best_epoch,
                cfg.epochs,
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
            let ck = checkpoint_for(outcome.params, cfg.variant, &ds);
            write_atomic(&out, ck.to_json()?.as_bytes())?;
            write_atomic(&log_path, outcome.log.to_csv().as_bytes())
        }
        Command::Eval {
            ckpt,
            data,
            report,
            confusion,
            csv,
        } => {
            let mut run = Run::new("eval", &argv)?;
            run.input(&ckpt)?;
            run.input(&data)?;
            let mut outputs = vec![report.as_path()];
            outputs.extend(confusion.as_deref());
            outputs.extend(csv.as_deref());
            run.begin(&outputs)?;
            let ck = load_ckpt(&ckpt)?;
            let ds = load_data(&data)?;
            let metrics = evaluate(&ck.params, &ds, ck.variant)?;
            let rep = EvalReport {
                variant: ck.variant,
                class_names: &ds.class_names,
                metrics: &metrics,
            };
            write_atomic(&report, pretty(&rep)?.as_bytes())?;
            if let Some(p) = &confusion {
                write_atomic(p, metrics.confusion_csv().as_bytes())?;
            }
            if let Some(p) = &csv {
                write_atomic(p, metrics.to_csv().as_bytes())?;
            }
            Ok(())
        }
        Command::Fewshot {
            data,
            shots,
            runs,
            config,
            init,
            report,
        } => {
            let mut run = Run::new("fewshot", &argv)?;
            run.input(&data)?;
            run.inputs([&config, &init])?;
            let (cfg, _) = load_config(config.as_deref(), TrainConfig::default())?;
            run.config(&cfg);
            let summary_path = sibling(&report, ".summary.csv");
            run.begin(&[&report, &summary_path])?;
            let ds = load_data(&data)?;
            let init = init_params(&init)?;
            let seeds = derive_seeds(cfg.seed, runs);
            let mut rows = String::from("shots,run,seed,accuracy,f1,macro_f1,weighted_f1\n");
            let mut summary = String::from("shots,runs,mean_accuracy,std_accuracy,mean_f1,std_f1\n");
            for &n in &shots {
                let s = few_shot_protocol(&ds, n, runs, &cfg, init.as_ref())?;
                for (i, (m, seed)) in s.runs.iter().zip(&seeds).enumerate() {
                    let _ = writeln!(rows, "{n},{i},{seed},{},{},{},{}", m.accuracy, m.f1, m.macro_f1, m.weighted_f1);
                }
                let _ = writeln!(
                    summary,
                    "{n},{runs},{},{},{},{}",
                    s.mean_accuracy, s.std_accuracy, s.mean_f1, s.std_f1
                );
            }
            write_atomic(&report, rows.as_bytes())?;
            write_atomic(&summary_path, summary.as_bytes())
        }
        Command::Importance { data, config, report } => {
            let mut run = Run::new("importance", &argv)?;
            run.input(&data)?;
            run.inputs([&config])?;
            let (cfg, _) = load_config(config.as_deref(), TrainConfig::default())?;
            run.config(&cfg);
            run.begin(&[&report])?;
            let imp = channel_importance(&load_data(&data)?, &cfg)?;
            write_atomic(&report, imp.to_csv().as_bytes())
        }
        Command::Predict {
            ckpt,
            archive,
            range,
            window,
            embed,
            out,
        } => {
            let mut run = Run::new("predict", &argv)?;
            run.input(&ckpt)?;
            run.input(&archive)?;
            run.inputs([&embed.embeddings])?;
            let tw = time_window(&range)?;
            run.begin(&[&out])?;
            let s = schema();
            let ck = load_ckpt(&ckpt)?;
            let vocab = ck
                .vocabulary
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("checkpoint {} carries no vocabulary", ckpt.display())))?;
            let provider = provider(&embed, ck.params.d_em)?;
            let records = read_records(&archive, false)?;
            let probs = fsspip::par::map(&records, |r| -> fsspip::Result<Vec<f64>> {
                let u = if window {
                    let mut bags = extract_channels(&s, r, &tw);
                    strip_profile(&s, &mut bags);
                    channelize_bags(&s, &bags, vocab, provider.as_ref())?
                } else {
                    channelize_record(&s, r, &tw, vocab, provider.as_ref())?
                };
                predict_proba(&u, &ck.params, ck.variant)
            });
            let k = ck.params.num_classes;
            let mut csv = String::from("user_id,predicted");
            for c in 0..k {
                let _ = write!(csv, ",p_{c}");
            }
            csv.push('\n');
            for (r, p) in records.iter().zip(probs) {
                let p = p?;
                let _ = write!(csv, "{},{}", r.user_id, fsspip::model::argmax(&p));
                for x in &p {
                    let _ = write!(csv, ",{x}");
                }
                csv.push('\n');
            }
            write_atomic(&out, csv.as_bytes())
        }
        Command::Simulate {
            spec,
            n,
            seed,
            out,
            anchors,
        } => {
            let mut run = Run::new("simulate", &argv)?;
            run.input(&spec)?;
            run.manifest.seed = Some(seed);
            let mut outputs = vec![out.as_path()];
            outputs.extend(anchors.as_deref());
            run.begin(&outputs)?;
            let spec = GenerativeSpec::load(&spec)?;
            let (data, party_anchors) = sample_population(&spec, n, seed)?;
            write_atomic(&out, &dataset_bytes(&data)?)?;
            if let Some(p) = &anchors {
                write_atomic(p, jsonl(&party_anchors)?.as_bytes())?;
            }
            Ok(())
        }
        Command::Oracle { spec, data, report } => {
            let mut run = Run::new("oracle", &argv)?;
            run.input(&spec)?;
            run.input(&data)?;
            run.begin(&report.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
            let spec = GenerativeSpec::load(&spec)?;
            let ds = load_data(&data)?;
            let rep = OracleReport {
                n: ds.len(),
                accuracy: bayes_oracle_accuracy(&spec, &ds)?,
            };
            let text = pretty(&rep)?;
            print!("{text}");
            if let Some(p) = &report {
                write_atomic(p, text.as_bytes())?;
            }
            Ok(())
        }
        Command::Groups {
            ckpt,
            data,
            group_by,
            class,
            report,
        } => {
            let mut run = Run::new("groups", &argv)?;
            run.input(&ckpt)?;
            run.input(&data)?;
            run.begin(&[&report])?;
            let ck = load_ckpt(&ckpt)?;
            let ds = load_data(&data)?;
            let groups = group_by_attr(&ds.users, &group_by);
            if groups.is_empty() {
                bail!(Error::Validation(format!("no user has attribute {group_by:?}")));
            }
            let leaning = group_leaning(&ck.params, &groups, ck.variant, class)?;
            write_atomic(&report, group_leaning_csv(&leaning).as_bytes())
        }
        Command::Ttest {
            a,
            b,
            column,
            shots,
            report,
        } => {
            let mut run = Run::new("ttest", &argv)?;
            run.input(&a)?;
            run.input(&b)?;
            run.begin(&report.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
            let xa = csv_column(&a, &column, shots)?;
            let xb = csv_column(&b, &column, shots)?;
            let test = two_sample_t_test(&xa, &xb)?;
            let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
            let rep = TTestReport {
                column,
                n_a: xa.len(),
                n_b: xb.len(),
                mean_a: mean(&xa),
                mean_b: mean(&xb),
                test,
            };
            let text = pretty(&rep)?;
            print!("{text}");
            if let Some(p) = &report {
                write_atomic(p, text.as_bytes())?;
            }
            Ok(())
        }
        Command::Timing {
            ckpt,
            archive,
            embed,
            repeats,
            report,
        } => {
            let mut run = Run::new("timing", &argv)?;
            run.input(&ckpt)?;
            run.input(&archive)?;
            run.inputs([&embed.embeddings])?;
            run.begin(&[&report])?;
            let s = schema();
            let ck = load_ckpt(&ckpt)?;
            let vocab = ck
                .vocabulary
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("checkpoint {} carries no vocabulary", ckpt.display())))?;
            let provider = provider(&embed, ck.params.d_em)?;
            let records = read_records(&archive, false)?;
            let t = time_inference(
                &s,
                &ck.params,
                ck.variant,
                &records,
                &TimeWindow::unbounded(),
                vocab,
                provider.as_ref(),
                repeats,
            )?;
            write_atomic(&report, pretty(&t)?.as_bytes())
        }
        Command::Replay { manifest } => {
            let m = RunManifest::load(&manifest)?;
            m.verify_inputs()?;
            let cli = Cli::try_parse_from(std::iter::once("fsspip".to_string()).chain(m.argv.iter().cloned()))
                .map_err(|e| Error::Validation(format!("manifest argv does not parse: {e}")))?;
            if matches!(cli.command, Command::Replay { .. }) {
                bail!(Error::Validation("a manifest cannot replay another replay".into()));
            }
            std::env::set_current_dir(&m.cwd).map_err(|e| Error::Io {
                path: m.cwd.clone(),
                source: e,
            })?;
            run(cli.command, m.argv)
        }
    }
}
