//! Implementations of the single-stage subcommands.
//!
//! Every command resolves its configuration, validates all inputs, then
//! writes outputs. Nothing touches the output paths until validation has
//! passed, so a failed invocation leaves no partial artifacts behind.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use did_core::datagen::{self, CorpusSpec, Manifest, ManifestRow, Split};
use did_core::didmodel::{self, sidecar_path, DidNetwork, ScoresTable};
use did_core::featext::{self, didf, wav};
use did_core::fusion::{
    self, AttentiveFusionModel, FusionExample, FusionLayerModel, FusionVariant, LrFusionModel,
    ScoreFusionModel,
};
use did_core::metrics::{self, EvalReport};
use did_core::{derive_seed, DidError, Result};

use crate::{EvalArgs, ExtractArgs, FuseArgs, ScoreArgs, SynthArgs, TrainArgs};

/// Splits a comma-separated flag value, rejecting empty entries.
pub fn parse_list(flag: &str, value: &str) -> Result<Vec<String>> {
    let items: Vec<String> = value.split(',').map(|s| s.trim().to_string()).collect();
    if items.iter().any(String::is_empty) {
        return Err(DidError::Config(format!(
            "--{flag} has an empty entry in '{value}'"
        )));
    }
    Ok(items)
}

/// Reads `manifest.csv` from a corpus directory.
pub fn open_corpus(corpus: &Path) -> Result<Manifest> {
    let manifest_path = corpus.join("manifest.csv");
    if !manifest_path.is_file() {
        return Err(DidError::Config(format!(
            "no manifest.csv under {}",
            corpus.display()
        )));
    }
    Manifest::read(&manifest_path)
}

/// Checks that every requested domain exists in the corpus.
pub fn check_domains_subset(requested: &[String], available: &[String]) -> Result<()> {
    for d in requested {
        if !available.contains(d) {
            return Err(DidError::Config(format!(
                "domain '{}' is not in the corpus (available: {})",
                d,
                available.join(", ")
            )));
        }
    }
    Ok(())
}

/// Creates the parent directory of an output path.
pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| DidError::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let mut spec = match &args.spec {
        Some(path) => {
            if !path.is_file() {
                return Err(DidError::Config(format!(
                    "corpus spec {} does not exist",
                    path.display()
                )));
            }
            CorpusSpec::load(path)?
        }
        None => CorpusSpec::default_corpus(args.domains, cfg.seed),
    };
    // An explicit --seed overrides the seed stored inside a spec file.
    if args.spec.is_some() {
        if let Some(seed) = args.common.seed {
            spec.seed = seed;
        }
    }
    let manifest = datagen::generate(&spec, &args.out)?;
    println!(
        "wrote {} utterances across {} domains and {} dialects to {}",
        manifest.len(),
        manifest.domains().len(),
        manifest.dialects().len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_extract(args: &ExtractArgs) -> Result<()> {
    args.common.resolve()?;
    if !args.wavs.is_file() {
        return Err(DidError::Config(format!(
            "wav manifest {} does not exist",
            args.wavs.display()
        )));
    }
    let manifest = Manifest::read(&args.wavs)?;
    let wav_dir = args.wavs.parent().unwrap_or_else(|| Path::new("."));
    let missing: Vec<String> = manifest
        .rows()
        .iter()
        .filter(|r| !wav_dir.join(&r.path).is_file())
        .map(|r| r.path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(DidError::Config(format!(
            "missing wav files: {}",
            missing.join(", ")
        )));
    }
    // Decode and extract everything first so a bad clip cannot leave a
    // half-written corpus behind.
    let mut extracted = Vec::with_capacity(manifest.len());
    for row in manifest.rows() {
        let clip = wav::read_wav(&wav_dir.join(&row.path))?;
        extracted.push(featext::extract(&clip, &row.utt_id)?);
    }
    let mut new_rows = Vec::with_capacity(extracted.len());
    for (row, feats) in manifest.rows().iter().zip(&extracted) {
        let rel = format!("features/{}/{}.didf", row.domain, row.utt_id);
        let path = args.out.join(&rel);
        ensure_parent(&path)?;
        didf::write_features(&path, feats.frames())?;
        new_rows.push(ManifestRow {
            path: rel,
            ..row.clone()
        });
    }
    Manifest::new(new_rows)?.write(&args.out.join("manifest.csv"))?;
    println!(
        "extracted features for {} utterances to {}",
        extracted.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    if !(args.width.is_finite() && args.width > 0.0) {
        return Err(DidError::Config(format!(
            "--width must be positive, got {}",
            args.width
        )));
    }
    let manifest = open_corpus(&args.corpus)?;
    let labels = manifest.dialects();
    if labels.len() < 2 {
        return Err(DidError::Config(
            "the corpus needs at least 2 dialects to train a classifier".into(),
        ));
    }
    let all_domains = manifest.domains();
    let domains = match &args.domains {
        Some(list) => {
            let d = parse_list("domains", list)?;
            check_domains_subset(&d, &all_domains)?;
            d
        }
        None => all_domains,
    };
    let rows = manifest.select(Split::Train, Some(&domains));
    if rows.is_empty() {
        return Err(DidError::Config(format!(
            "no training utterances for domains {}",
            domains.join(", ")
        )));
    }
    let examples = didmodel::load_examples(&args.corpus, &rows, &labels)?;
    let arch = cfg.profile.arch(labels.len()).with_width(args.width);
    let mut net = DidNetwork::build(arch, labels, derive_seed(cfg.seed, "init"))?;
    net.set_domains(domains);
    let opts = cfg.train_options(derive_seed(cfg.seed, "train"))?;
    let log = didmodel::train(&mut net, &examples, &opts)?;
    ensure_parent(&args.out)?;
    net.save(&args.out)?;
    let last = log.epochs.last().expect("training runs at least one epoch");
    println!(
        "trained {} on {} utterances ({} epochs, {} updates), train accuracy {:.2}%, holdout accuracy {:.2}%",
        args.out.display(),
        examples.len(),
        log.epochs.len(),
        log.steps,
        last.train_accuracy * 100.0,
        last.holdout_accuracy * 100.0
    );
    Ok(())
}

/// Domain identifiers for a list of base models, from their training
/// metadata, falling back to the model file stem.
pub fn base_domain_ids(nets: &[DidNetwork], paths: &[PathBuf]) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(nets.len());
    for (net, path) in nets.iter().zip(paths) {
        let domains = &net.train_meta().domains;
        let id = if domains.is_empty() {
            path.file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("base")
                .to_string()
        } else {
            domains.join("_")
        };
        ids.push(id);
    }
    for (i, id) in ids.iter().enumerate() {
        if ids[..i].contains(id) {
            return Err(DidError::Config(format!(
                "two base models cover the same domains ('{id}'); fusion needs distinct domain systems"
            )));
        }
    }
    Ok(ids)
}

fn load_bases(base_paths: &[PathBuf]) -> Result<Vec<DidNetwork>> {
    let missing: Vec<String> = base_paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DidError::Config(format!(
            "missing base models: {}",
            missing.join(", ")
        )));
    }
    base_paths.iter().map(|p| DidNetwork::load(p)).collect()
}

pub fn cmd_fuse(args: &FuseArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    match args.kind.as_str() {
        "attentive" | "layer" | "lr" => {}
        other => {
            return Err(DidError::Config(format!(
                "unknown fusion kind '{other}', expected attentive, layer or lr"
            )))
        }
    }
    if args.calibration_domain.is_some() && args.kind != "lr" {
        return Err(DidError::Config(
            "--calibration-domain only applies to lr fusion".into(),
        ));
    }
    if args.variant.is_some() && args.kind != "attentive" {
        return Err(DidError::Config(
            "--variant only applies to attentive fusion".into(),
        ));
    }
    let manifest = open_corpus(&args.corpus)?;
    let labels = manifest.dialects();
    let base_paths: Vec<PathBuf> = parse_list("bases", &args.bases)?
        .into_iter()
        .map(PathBuf::from)
        .collect();
    if base_paths.len() < 2 {
        return Err(DidError::Config(
            "fusion needs at least 2 base models".into(),
        ));
    }
    let nets = load_bases(&base_paths)?;
    for (net, path) in nets.iter().zip(&base_paths) {
        if net.label_names() != labels.as_slice() {
            return Err(DidError::Config(format!(
                "base model {} was trained on different dialect labels than the corpus",
                path.display()
            )));
        }
    }
    let domain_order = base_domain_ids(&nets, &base_paths)?;

    let rows = match args.kind.as_str() {
        "lr" => {
            let domain = args.calibration_domain.clone().ok_or_else(|| {
                DidError::Config("--calibration-domain is required for lr fusion".into())
            })?;
            check_domains_subset(std::slice::from_ref(&domain), &manifest.domains())?;
            manifest.select(Split::Train, Some(std::slice::from_ref(&domain)))
        }
        _ => manifest.select(Split::Train, None),
    };
    if rows.is_empty() {
        return Err(DidError::Config(
            "no training utterances for fusion".into(),
        ));
    }

    let tables: Vec<ScoresTable> = nets
        .iter()
        .map(|net| didmodel::score_manifest(net, &args.corpus, &rows, true))
        .collect::<Result<_>>()?;
    let examples = fusion::align_scores(&tables, &rows)?;
    let hashes = fusion::hash_files(&base_paths)?;
    ensure_parent(&args.out)?;

    match args.kind.as_str() {
        "attentive" => {
            let variant = match &args.variant {
                Some(v) => FusionVariant::parse(v).ok_or_else(|| {
                    DidError::Config(format!(
                        "unknown variant '{v}', expected 'output' or 'hidden'"
                    ))
                })?,
                None => cfg.fusion_variant,
            };
            let hidden_dim = nets[0].hidden_dim();
            if variant == FusionVariant::Hidden {
                for (net, path) in nets.iter().zip(&base_paths) {
                    if net.hidden_dim() != hidden_dim {
                        return Err(DidError::Config(format!(
                            "base model {} has hidden width {}, expected {}; the hidden variant needs matching widths",
                            path.display(),
                            net.hidden_dim(),
                            hidden_dim
                        )));
                    }
                }
            }
            let mut model = AttentiveFusionModel::new(
                variant,
                cfg.m,
                domain_order,
                labels,
                hidden_dim,
                derive_seed(cfg.seed, "fusion-init"),
            )?;
            let epochs = fusion::train_score_fusion(
                &mut model,
                &examples,
                &cfg.fusion_options(derive_seed(cfg.seed, "fusion-train"))?,
            )?;
            model.base_hashes = hashes;
            model.save(&args.out)?;
            let last = epochs.last().expect("at least one epoch");
            println!(
                "trained attentive ({}) fusion {} on {} examples, final train accuracy {:.2}%",
                variant.as_str(),
                args.out.display(),
                examples.len(),
                last.accuracy * 100.0
            );
        }
        "layer" => {
            let mut model = FusionLayerModel::new(
                domain_order,
                labels,
                derive_seed(cfg.seed, "fusion-init"),
            )?;
            let epochs = fusion::train_score_fusion(
                &mut model,
                &examples,
                &cfg.fusion_options(derive_seed(cfg.seed, "fusion-train"))?,
            )?;
            model.base_hashes = hashes;
            model.save(&args.out)?;
            let last = epochs.last().expect("at least one epoch");
            println!(
                "trained fusion layer {} on {} examples, final train accuracy {:.2}%",
                args.out.display(),
                examples.len(),
                last.accuracy * 100.0
            );
        }
        _ => {
            let mut model = LrFusionModel::new(domain_order, labels)?;
            fusion::lr_fusion_train(&mut model, &examples)?;
            model.base_hashes = hashes;
            model.save(&args.out)?;
            println!(
                "calibrated lr fusion {} on {} examples",
                args.out.display(),
                examples.len()
            );
        }
    }
    Ok(())
}

/// A loaded fusion model of any kind, with a uniform scoring interface.
pub enum FusionModelFile {
    Attentive(AttentiveFusionModel),
    Layer(FusionLayerModel),
    Lr(LrFusionModel),
}

impl FusionModelFile {
    /// Loads the model at `path` given the sidecar's kind string.
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        match kind {
            "attentive" => Ok(FusionModelFile::Attentive(AttentiveFusionModel::load(path)?)),
            "fusion_layer" => Ok(FusionModelFile::Layer(FusionLayerModel::load(path)?)),
            "lr" => Ok(FusionModelFile::Lr(LrFusionModel::load(path)?)),
            other => Err(DidError::ModelFile {
                path: sidecar_path(path),
                reason: format!("unknown fusion kind '{other}'"),
            }),
        }
    }

    pub fn label_names(&self) -> &[String] {
        match self {
            FusionModelFile::Attentive(m) => m.label_names(),
            FusionModelFile::Layer(m) => m.label_names(),
            FusionModelFile::Lr(m) => m.label_names(),
        }
    }

    pub fn domain_order(&self) -> &[String] {
        match self {
            FusionModelFile::Attentive(m) => m.domain_order(),
            FusionModelFile::Layer(m) => m.domain_order(),
            FusionModelFile::Lr(m) => m.domain_order(),
        }
    }

    pub fn base_hashes(&self) -> &[String] {
        match self {
            FusionModelFile::Attentive(m) => &m.base_hashes,
            FusionModelFile::Layer(m) => &m.base_hashes,
            FusionModelFile::Lr(m) => &m.base_hashes,
        }
    }

    /// Fused posterior for one aligned example.
    pub fn posterior(&self, ex: &FusionExample) -> Result<Vec<f64>> {
        match self {
            FusionModelFile::Attentive(m) => m.forward_probs(ex),
            FusionModelFile::Layer(m) => m.forward_probs(ex),
            FusionModelFile::Lr(m) => m.apply(&ex.per_system_o),
        }
    }
}

/// Reads the `format` and optional `kind` fields of a model sidecar.
pub fn probe_model(path: &Path) -> Result<(String, Option<String>)> {
    if !path.is_file() {
        return Err(DidError::Config(format!(
            "model file {} does not exist",
            path.display()
        )));
    }
    let side = sidecar_path(path);
    if !side.is_file() {
        return Err(DidError::Config(format!(
            "model sidecar {} does not exist",
            side.display()
        )));
    }
    let text = std::fs::read_to_string(&side).map_err(|e| DidError::io(&side, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DidError::ModelFile {
            path: side.clone(),
            reason: format!("sidecar is not valid JSON: {e}"),
        })?;
    let format = value
        .get("format")
        .and_then(|f| f.as_str())
        .ok_or_else(|| DidError::ModelFile {
            path: side.clone(),
            reason: "sidecar has no format field".into(),
        })?
        .to_string();
    let kind = value.get("kind").and_then(|k| k.as_str()).map(str::to_string);
    Ok((format, kind))
}

pub fn cmd_score(args: &ScoreArgs) -> Result<()> {
    args.common.resolve()?;
    let manifest = open_corpus(&args.corpus)?;
    let split = Split::parse(&args.split).ok_or_else(|| {
        DidError::Config(format!(
            "unknown split '{}', expected train, dev or test",
            args.split
        ))
    })?;
    let domains = match &args.domains {
        Some(list) => {
            let d = parse_list("domains", list)?;
            check_domains_subset(&d, &manifest.domains())?;
            Some(d)
        }
        None => None,
    };
    let rows = manifest.select(split, domains.as_deref());
    if rows.is_empty() {
        return Err(DidError::Config(format!(
            "no utterances in split '{}' for the requested domains",
            args.split
        )));
    }
    let (format, kind) = probe_model(&args.model)?;
    let table = match format.as_str() {
        didmodel::MODEL_FORMAT => {
            if args.bases.is_some() {
                return Err(DidError::Config(
                    "--bases only applies to fusion models".into(),
                ));
            }
            let net = DidNetwork::load(&args.model)?;
            didmodel::score_manifest(&net, &args.corpus, &rows, args.hidden)?
        }
        fusion::FUSION_FORMAT => {
            if args.hidden {
                return Err(DidError::Config(
                    "--hidden only applies to classifier models; fusion scores have no hidden columns".into(),
                ));
            }
            let kind = kind.ok_or_else(|| DidError::ModelFile {
                path: sidecar_path(&args.model),
                reason: "fusion sidecar has no kind field".into(),
            })?;
            let model = FusionModelFile::load(&args.model, &kind)?;
            let bases = args.bases.as_ref().ok_or_else(|| {
                DidError::Config("--bases is required to score with a fusion model".into())
            })?;
            let base_paths: Vec<PathBuf> = parse_list("bases", bases)?
                .into_iter()
                .map(PathBuf::from)
                .collect();
            let nets = load_bases(&base_paths)?;
            fusion::verify_base_hashes(model.base_hashes(), &base_paths)?;
            for (net, path) in nets.iter().zip(&base_paths) {
                if net.label_names() != model.label_names() {
                    return Err(DidError::Config(format!(
                        "base model {} has different dialect labels than the fusion model",
                        path.display()
                    )));
                }
            }
            let tables: Vec<ScoresTable> = nets
                .iter()
                .map(|net| didmodel::score_manifest(net, &args.corpus, &rows, true))
                .collect::<Result<_>>()?;
            let examples = fusion::align_scores(&tables, &rows)?;
            fusion::apply_to_table(model.label_names(), &examples, |ex| model.posterior(ex))?
        }
        other => {
            return Err(DidError::ModelFile {
                path: sidecar_path(&args.model),
                reason: format!("unknown model format '{other}'"),
            })
        }
    };
    ensure_parent(&args.out)?;
    table.write(&args.out)?;
    println!(
        "scored {} utterances with {} into {}",
        table.rows.len(),
        args.model.display(),
        args.out.display()
    );
    Ok(())
}

/// Evaluates a scores table against manifest reference labels.
pub fn eval_scores_table(table: &ScoresTable, manifest: &Manifest) -> Result<EvalReport> {
    let by_id: HashMap<&str, &ManifestRow> = manifest
        .rows()
        .iter()
        .map(|r| (r.utt_id.as_str(), r))
        .collect();
    let mut ids = Vec::with_capacity(table.rows.len());
    let mut scores = Vec::with_capacity(table.rows.len());
    let mut labels = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let reference = by_id.get(row.utt_id.as_str()).ok_or_else(|| {
            DidError::Eval(format!(
                "scored utterance '{}' is not in the manifest",
                row.utt_id
            ))
        })?;
        let label = table
            .label_names
            .iter()
            .position(|l| l == &reference.dialect)
            .ok_or_else(|| {
                DidError::Eval(format!(
                    "dialect '{}' of utterance '{}' is not a score column",
                    reference.dialect, row.utt_id
                ))
            })?;
        ids.push(row.utt_id.clone());
        scores.push(row.o.clone());
        labels.push(label);
    }
    metrics::evaluate(&table.label_names, &ids, &scores, &labels)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    args.common.resolve()?;
    let manifest = open_corpus(&args.corpus)?;
    if !args.scores.is_file() {
        return Err(DidError::Config(format!(
            "scores file {} does not exist",
            args.scores.display()
        )));
    }
    let table = ScoresTable::read(&args.scores)?;
    let report = eval_scores_table(&table, &manifest)?;
    if let Some(out) = &args.out {
        ensure_parent(out)?;
        let mut json = serde_json::to_string_pretty(&report).expect("report serialises");
        json.push('\n');
        std::fs::write(out, &json).map_err(|e| DidError::io(out, e))?;
    }
    print!("{}", report.render_text());
    Ok(())
}
