use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use halluface_core::data::{ingest_manifest, load_samples, read_manifest, split_dataset, write_manifest, Split};
use halluface_core::features::VggFeatures;
use halluface_core::metrics::{bilinear_baseline, evaluate, AttributeSource};
use halluface_core::trainer::{load_checkpoint, run_training, RunOptions, TrainConfig};
use halluface_core::{synthetic, AttributeVector, Image};
use halluface_service::{load_service, HallucinationRequest, ImagePayload};

#[derive(Parser)]
#[command(name = "halluface", version, about = "Attribute-guided progressive face hallucination")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttrSource {
    Classifier,
    Gt,
}

#[derive(Subcommand)]
enum Command {
    /// Build a JSON-lines manifest from a CelebA-style attribute file.
    PrepareData {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        attrs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only the first N rows of the attribute file.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of training records; the rest become the test split.
        /// Defaults to all records.
        #[arg(long)]
        train_count: Option<usize>,
    },
    /// Write a procedurally rendered, attribute-labeled face corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the training split of a manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint and stop after this many global steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score a stage-3 checkpoint (or bilinear upsampling) on the test split.
    Evaluate {
        /// Omit to score the bilinear baseline.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "classifier")]
        attr_source: AttrSource,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also compute feature cosines with the checkpoint's extractor settings.
        #[arg(long)]
        features: bool,
        /// Score the training split instead of the test split.
        #[arg(long)]
        train_split: bool,
    },
    /// Hallucinate one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Twelve attribute values as a JSON array, or an object of edits
        /// by name applied to the classifier's prediction.
        #[arg(long)]
        attrs: Option<String>,
        /// Also write the 32 and 64 outputs.
        #[arg(long)]
        stages: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::PrepareData { images, attrs, out, limit, seed, train_count } => {
            let records = ingest_manifest(&attrs, &images, limit)?;
            let records = match train_count {
                Some(k) => {
                    let (train, test) = split_dataset(&records, k, seed)?;
                    train.into_iter().chain(test).collect()
                }
                None => records,
            };
            write_manifest(&out, &records)?;
            let n_test = records.iter().filter(|r| r.split == Split::Test).count();
            log::info!("wrote {} records ({} test) to {}", records.len(), n_test, out.display());
        }
        Command::SynthCorpus { out, count, seed } => {
            let attrs = synthetic::write_corpus(&out, count, seed)?;
            log::info!("wrote {count} images; attributes in {}", attrs.display());
        }
        Command::Train { config, manifest, resume, stop_after } => {
            let config = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            let samples = samples_of(&manifest, Split::Train)?;
            let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
            let options = RunOptions { resume, stop_after_step: stop_after, extractor: None };
            let outcome = run_training(config, &samples, options)?;
            for path in &outcome.checkpoints {
                log::info!("checkpoint {}", path.display());
            }
        }
        Command::Evaluate { ckpt, manifest, attr_source, out, csv, features, train_split } => {
            let split = if train_split { Split::Train } else { Split::Test };
            let samples = samples_of(&manifest, split)?;
            let report = match ckpt {
                Some(path) => {
                    let state = load_checkpoint(&path)?;
                    let extractor =
                        if features { Some(VggFeatures::from_config(&state.config.extractor)?) } else { None };
                    let source = match attr_source {
                        AttrSource::Classifier => AttributeSource::Classifier,
                        AttrSource::Gt => AttributeSource::GroundTruth,
                    };
                    evaluate(
                        &state.generator,
                        &state.classifier,
                        state.active_stage,
                        &samples,
                        source,
                        extractor.as_ref().map(|e| e as _),
                    )?
                }
                None => {
                    let extractor = if features {
                        Some(VggFeatures::from_config(&Default::default())?)
                    } else {
                        None
                    };
                    bilinear_baseline(&samples, extractor.as_ref().map(|e| e as _))?
                }
            };
            fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            if let Some(csv) = csv {
                fs::write(csv, report.to_csv())?;
            }
            println!("{}: PSNR {:.3} dB, SSIM {:.4} over {} images", report.method, report.mean_psnr_db, report.mean_ssim, report.rows.len());
        }
        Command::Infer { ckpt, input, attrs, stages, out } => {
            let svc = load_service(&ckpt)?;
            let lr = Image::load(&input)?;
            let resp = match attrs.as_deref().map(serde_json::from_str::<serde_json::Value>).transpose()? {
                Some(serde_json::Value::Object(edits)) => {
                    let edits: BTreeMap<String, f64> = edits
                        .into_iter()
                        .map(|(k, v)| v.as_f64().map(|x| (k.clone(), x)).with_context(|| format!("edit `{k}` is not a number")))
                        .collect::<Result<_>>()?;
                    svc.manipulate(&lr, None, &edits, stages)?
                }
                Some(value) => {
                    let values: Vec<f64> = serde_json::from_value(value).context("--attrs must be an array or an object")?;
                    AttributeVector::from_slice(&values)?;
                    svc.hallucinate(&request(&lr, Some(values), stages)?)?
                }
                None => svc.hallucinate(&request(&lr, None, stages)?)?,
            };
            fs::create_dir_all(&out)?;
            for (size, payload) in &resp.outputs {
                payload.decode()?.save_png(&out.join(format!("sr_{size}.png")))?;
            }
            fs::write(out.join("response.json"), serde_json::to_string_pretty(&summary(&resp))?)?;
            println!("{}", serde_json::to_string(&resp.used_attributes)?);
        }
        Command::Serve { ckpt, port, host } => {
            let svc = Arc::new(load_service(&ckpt)?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(halluface_service::serve(svc, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn samples_of(manifest: &Path, split: Split) -> Result<Vec<halluface_core::data::TrainingSample>> {
    let records: Vec<_> = read_manifest(manifest)?.into_iter().filter(|r| r.split == split).collect();
    if records.is_empty() {
        bail!("{} has no {:?} records", manifest.display(), split);
    }
    Ok(load_samples(&records)?)
}

fn request(lr: &Image, attributes: Option<Vec<f64>>, stages: bool) -> Result<HallucinationRequest> {
    Ok(HallucinationRequest {
        lr_image: ImagePayload::encode(lr)?,
        attributes,
        return_stages: stages,
        return_attribute_predictions: true,
    })
}

/// The response without image payloads, which are written as files.
fn summary(resp: &halluface_service::HallucinationResponse) -> serde_json::Value {
    serde_json::json!({
        "used_attributes": resp.used_attributes,
        "classifier_attributes": resp.classifier_attributes,
        "critic_attribute_predictions": resp.critic_attribute_predictions,
        "edits": resp.edits,
    })
}
