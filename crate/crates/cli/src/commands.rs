use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mrad_core::eval::{evaluate, EvalItem, EvalReport};
use mrad_core::finetune::{train, TrainConfig};
use mrad_core::membank::{build_bank, subsample_bank};
use mrad_core::pack::{read_feature_pack, write_feature_pack, FeaturePack};
use mrad_core::persist::{load_bank, load_map, load_weights, save_bank, save_map, save_weights};
use mrad_core::retrieval::{dataset_statistics, Retriever};
use mrad_core::scoring::{score_image, ScoreOptions};
use mrad_core::synth::{generate, SynthConfig};
use mrad_core::{write_atomic, Bitmap, DatasetStats, Error, RetrievalParams};

use crate::render::write_heatmap;
use crate::{BuildMemoryArgs, EvalArgs, ScoreArgs, StatsArgs, SubsampleArgs, SynthArgs, TrainArgs};

pub const SCHEMA_VERSION: u32 = 1;
const SCORES_FILE: &str = "scores.jsonl";
const MAPS_DIR: &str = "maps";

fn read_pack(path: &Path) -> anyhow::Result<FeaturePack> {
    let pack = read_feature_pack(path)?;
    if pack.records.is_empty() {
        return Err(Error::Empty(format!("empty pack {}", path.display())).into());
    }
    Ok(pack)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> anyhow::Result<()> {
    let mut bytes = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut bytes, row)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)?;
    Ok(())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn read_to_string(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
        .map_err(Into::into)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BankSummary {
    pub schema_version: u32,
    pub d: usize,
    pub n_cls: usize,
    pub n_patch: usize,
    pub warnings: Vec<String>,
}

impl fmt::Display for BankSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N_c={} N_p={}", self.n_cls, self.n_patch)
    }
}

pub fn cmd_build_memory(args: &BuildMemoryArgs) -> anyhow::Result<BankSummary> {
    let pack = read_pack(&args.features)?;
    let built = build_bank(&pack.records, &pack.grid)?;
    for w in &built.warnings {
        warn!("{w}");
    }
    let tag = args
        .features
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let bank = built.bank.with_source_tag(tag);
    save_bank(&bank, &args.out)?;
    let summary = BankSummary {
        schema_version: SCHEMA_VERSION,
        d: bank.d(),
        n_cls: bank.n_cls(),
        n_patch: bank.n_patch(),
        warnings: built.warnings.iter().map(ToString::to_string).collect(),
    };
    if let Some(log) = &args.log {
        write_json(&summary, log)?;
    }
    Ok(summary)
}

/// One line of `scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub schema_version: u32,
    pub id: String,
    pub score: f64,
    pub y_cls: [f64; 2],
    /// Path of the `.amap` file, relative to the score directory.
    pub map_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    pub images: usize,
    pub fine_tuned: bool,
    pub rows: Vec<ScoreRow>,
}

impl fmt::Display for ScoreSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = if self.fine_tuned { "FT" } else { "TF" };
        write!(f, "scored {} images ({mode})", self.images)
    }
}

/// File-name-safe form of an id, prefixed by its pack index so distinct ids
/// never collide.
fn map_stem(index: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:06}_{safe}")
}

pub fn cmd_score(args: &ScoreArgs) -> anyhow::Result<ScoreSummary> {
    let bank = load_bank(&args.bank)?;
    let pack = read_pack(&args.features)?;
    if pack.d != bank.d() {
        return Err(Error::DimensionMismatch {
            context: "pack feature dimension vs bank".into(),
            expected: bank.d(),
            got: pack.d,
        }
        .into());
    }
    let params = RetrievalParams {
        tau: args.tau,
        topk_fraction: args.topk,
        ..RetrievalParams::default()
    };
    let retriever = match &args.weights {
        Some(path) => Retriever::fine_tuned(&bank, &load_weights(path)?, params)?,
        None => Retriever::train_free(&bank, params)?,
    };
    let options = ScoreOptions {
        smooth_sigma: args.smooth_sigma,
        pixel_only: args.pixel_only,
    };
    let maps_dir = args.out.join(MAPS_DIR);
    create_dir(&maps_dir)?;

    let rows = pack
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| -> anyhow::Result<ScoreRow> {
            let scored = score_image(&retriever, rec, &pack.grid, &options)
                .with_context(|| format!("scoring {:?}", rec.id))?;
            let stem = map_stem(i, &rec.id);
            let map_file = format!("{MAPS_DIR}/{stem}.amap");
            save_map(&scored.map, args.out.join(&map_file))?;
            if args.render_png {
                write_heatmap(&scored.map, &maps_dir.join(format!("{stem}.png")))?;
            }
            Ok(ScoreRow {
                schema_version: SCHEMA_VERSION,
                id: rec.id.clone(),
                score: scored.score,
                y_cls: scored.y_cls,
                map_file,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_jsonl(&rows, &args.out.join(SCORES_FILE))?;
    Ok(ScoreSummary {
        images: rows.len(),
        fine_tuned: args.weights.is_some(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct LogLine<'a> {
    schema_version: u32,
    #[serde(flatten)]
    step: &'a mrad_core::finetune::StepRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub log: PathBuf,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} steps", self.steps)?;
        if let Some(l) = self.final_loss {
            write!(f, ", final loss {l:.6}")?;
        }
        write!(f, ", log {}", self.log.display())
    }
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<TrainSummary> {
    let bank = load_bank(&args.bank)?;
    let pack = read_pack(&args.features)?;
    let params = RetrievalParams {
        tau: args.tau,
        rho_cls: args.rho_cls,
        rho_seg: args.rho_seg,
        ..RetrievalParams::default()
    };
    let config = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let run = train(&pack.records, &pack.grid, &bank, &config, &params)?;
    for s in &run.steps {
        info!("epoch {} step {} loss {:.6}", s.epoch, s.step, s.loss.total);
    }
    save_weights(&run.weights, &args.out)?;
    let log = args.log.clone().unwrap_or_else(|| {
        let mut name = args.out.clone().into_os_string();
        name.push(".log.jsonl");
        PathBuf::from(name)
    });
    let lines: Vec<LogLine> = run
        .steps
        .iter()
        .map(|step| LogLine {
            schema_version: SCHEMA_VERSION,
            step,
        })
        .collect();
    write_jsonl(&lines, &log)?;
    Ok(TrainSummary {
        steps: run.steps.len(),
        final_loss: run.steps.last().map(|s| s.loss.total),
        log,
    })
}

fn list_ids(ids: &[&str]) -> String {
    const SHOWN: usize = 20;
    let mut s = ids
        .iter()
        .take(SHOWN)
        .map(|id| format!("{id:?}"))
        .collect::<Vec<_>>()
        .join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(" and {} more", ids.len() - SHOWN));
    }
    s
}

fn read_scores(dir: &Path) -> anyhow::Result<Vec<ScoreRow>> {
    let path = dir.join(SCORES_FILE);
    let text = read_to_string(&path)?;
    let mut rows = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let row: ScoreRow = serde_json::from_str(line)
            .with_context(|| format!("{} line {}", path.display(), n + 1))?;
        if row.schema_version != SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                expected: SCHEMA_VERSION,
                found: row.schema_version,
            })
            .with_context(|| format!("{} line {}", path.display(), n + 1));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<EvalReport> {
    let pack = read_pack(&args.features)?;
    let rows = read_scores(&args.scores)?;

    let mut by_id: HashMap<&str, &ScoreRow> = HashMap::with_capacity(rows.len());
    let mut duplicates = Vec::new();
    for row in &rows {
        if by_id.insert(&row.id, row).is_some() {
            duplicates.push(row.id.as_str());
        }
    }
    if !duplicates.is_empty() {
        bail!(Error::InvalidConfig(format!(
            "duplicate ids in scores: {}",
            list_ids(&duplicates)
        )));
    }
    let pack_ids: HashSet<&str> = pack.records.iter().map(|r| r.id.as_str()).collect();
    let unscored: Vec<&str> = pack
        .records
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let unknown: Vec<&str> = rows
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !pack_ids.contains(id))
        .collect();
    if !unscored.is_empty() || !unknown.is_empty() {
        let mut msg = String::from("score/pack id mismatch");
        if !unscored.is_empty() {
            msg.push_str(&format!("; missing from scores: {}", list_ids(&unscored)));
        }
        if !unknown.is_empty() {
            msg.push_str(&format!("; not in pack: {}", list_ids(&unknown)));
        }
        bail!(Error::InvalidConfig(msg));
    }

    let categories: Option<BTreeMap<String, String>> = match &args.categories {
        Some(path) => Some(
            serde_json::from_str(&read_to_string(path)?)
                .with_context(|| format!("parsing category manifest {}", path.display()))?,
        ),
        None => None,
    };
    if let Some(cats) = &categories {
        let missing: Vec<&str> = pack
            .records
            .iter()
            .map(|r| r.id.as_str())
            .filter(|id| !cats.contains_key(*id))
            .collect();
        if !missing.is_empty() {
            bail!(Error::InvalidConfig(format!(
                "ids missing from category manifest: {}",
                list_ids(&missing)
            )));
        }
    }

    // pack order, so the report does not depend on the order of scores.jsonl
    let items = pack
        .records
        .par_iter()
        .map(|rec| -> anyhow::Result<EvalItem> {
            let row = by_id[rec.id.as_str()];
            let map = load_map(args.scores.join(&row.map_file))?;
            if (map.height(), map.width()) != (pack.grid.image_h, pack.grid.image_w) {
                bail!(Error::DimensionMismatch {
                    context: format!("map of {:?} (height·width)", rec.id),
                    expected: pack.grid.pixels(),
                    got: map.len(),
                });
            }
            let mask = match (&rec.mask, rec.label.is_anomalous()) {
                (Some(m), _) => Some(m.clone()),
                (None, false) => Some(Bitmap::zeros(pack.grid.image_h, pack.grid.image_w)),
                (None, true) => {
                    warn!(
                        "{:?} is anomalous but has no mask; excluded from pixel metrics",
                        rec.id
                    );
                    None
                }
            };
            Ok(EvalItem {
                id: rec.id.clone(),
                category: categories
                    .as_ref()
                    .map_or_else(|| "all".to_string(), |c| c[&rec.id].clone()),
                anomalous: rec.label.is_anomalous(),
                score: row.score,
                map,
                mask,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = evaluate(&items)?;
    write_json(&report, &args.out)?;
    if let Some(csv) = &args.csv {
        write_atomic(csv, report.to_csv().as_bytes())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsFile {
    pub schema_version: u32,
    pub weights: &'static str,
    pub tau: f64,
    #[serde(flatten)]
    pub stats: DatasetStats,
}

pub fn cmd_stats(args: &StatsArgs) -> anyhow::Result<StatsFile> {
    let bank = load_bank(&args.bank)?;
    let pack = read_pack(&args.features)?;
    let weights = args.weights.as_ref().map(load_weights).transpose()?;
    let params = RetrievalParams {
        tau: args.tau,
        ..RetrievalParams::default()
    };
    let stats = dataset_statistics(&pack.records, &pack.grid, &bank, &params, weights.as_ref())?;
    let file = StatsFile {
        schema_version: SCHEMA_VERSION,
        weights: if weights.is_some() {
            "learned"
        } else {
            "identity"
        },
        tau: args.tau,
        stats,
    };
    write_json(&file, &args.out)?;
    Ok(file)
}

pub fn cmd_subsample(args: &SubsampleArgs) -> anyhow::Result<BankSummary> {
    let bank = load_bank(&args.bank)?;
    let sub = subsample_bank(&bank, args.n, args.seed)?;
    save_bank(&sub, &args.out)?;
    Ok(BankSummary {
        schema_version: SCHEMA_VERSION,
        d: sub.d(),
        n_cls: sub.n_cls(),
        n_patch: sub.n_patch(),
        warnings: Vec::new(),
    })
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        images_per_category: args
            .images_per_category
            .unwrap_or(defaults.images_per_category),
        d: args.dim.unwrap_or(defaults.d),
        ..defaults
    };
    if cfg.images_per_category == 0 || cfg.d < 2 {
        bail!(Error::InvalidConfig(
            "need at least one image per category and d >= 2".into()
        ));
    }
    let splits = generate(&cfg, args.seed)?;
    create_dir(&args.out)?;
    for (name, pack) in [("aux.fpk", &splits.aux), ("target.fpk", &splits.target)] {
        write_feature_pack(&pack.records, &pack.grid, pack.d, args.out.join(name))?;
    }
    let manifest: BTreeMap<&str, &str> = splits
        .target
        .records
        .iter()
        .zip(&splits.target_categories)
        .map(|(r, c)| (r.id.as_str(), c.as_str()))
        .collect();
    write_json(&manifest, &args.out.join("categories.json"))?;
    println!(
        "aux {} images, target {} images in {}",
        splits.aux.records.len(),
        splits.target.records.len(),
        args.out.display()
    );
    Ok(())
}
