//! The end-to-end multi-domain comparison.
//!
//! One invocation synthesises a corpus, trains every system in the
//! protocol, scores all test domains, evaluates each system and writes a
//! Markdown and a CSV report. All randomness derives from the master seed,
//! so repeated runs with the same seed produce byte-identical artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use did_core::datagen::{self, Condition, CorpusSpec, Manifest, Split, SystemKind};
use did_core::didmodel::{self, DidNetwork, ScoreRow, ScoresTable};
use did_core::fusion::{self, AttentiveFusionModel, FusionLayerModel, FusionVariant, LrFusionModel};
use did_core::metrics::EvalReport;
use did_core::{derive_seed, DidError, Result};

use crate::commands::{ensure_parent, eval_scores_table, FusionModelFile};
use crate::ExperimentArgs;

/// Copies a scores table without its hidden columns.
fn strip_hidden(table: &ScoresTable) -> ScoresTable {
    ScoresTable {
        label_names: table.label_names.clone(),
        hidden_dim: 0,
        rows: table
            .rows
            .iter()
            .map(|r| ScoreRow {
                utt_id: r.utt_id.clone(),
                o: r.o.clone(),
                h: Vec::new(),
            })
            .collect(),
    }
}

/// Scores one trained network on one test domain, caching the result.
/// Hidden activations are kept because fusion systems reuse these tables.
fn cached_test_table<'a>(
    cache: &'a mut BTreeMap<(String, String), ScoresTable>,
    nets: &BTreeMap<String, DidNetwork>,
    corpus_dir: &Path,
    manifest: &Manifest,
    base: &str,
    domain: &str,
) -> Result<&'a ScoresTable> {
    let key = (base.to_string(), domain.to_string());
    if !cache.contains_key(&key) {
        let net = nets
            .get(base)
            .ok_or_else(|| DidError::Config(format!("system '{base}' was not trained")))?;
        let dlist = [domain.to_string()];
        let rows = manifest.select(Split::Test, Some(&dlist));
        let table = didmodel::score_manifest(net, corpus_dir, &rows, true)?;
        cache.insert(key.clone(), table);
    }
    Ok(&cache[&key])
}

/// Gathers training tables, domain identifiers and file paths for the
/// bases of one fusion system.
fn fusion_inputs(
    bases: &[String],
    train_tables: &BTreeMap<String, ScoresTable>,
    nets: &BTreeMap<String, DidNetwork>,
    net_paths: &BTreeMap<String, PathBuf>,
) -> Result<(Vec<ScoresTable>, Vec<String>, Vec<PathBuf>)> {
    let mut tables = Vec::with_capacity(bases.len());
    let mut order = Vec::with_capacity(bases.len());
    let mut paths = Vec::with_capacity(bases.len());
    for b in bases {
        let table = train_tables
            .get(b)
            .ok_or_else(|| DidError::Config(format!("fusion base '{b}' has no training scores")))?;
        let net = nets
            .get(b)
            .ok_or_else(|| DidError::Config(format!("fusion base '{b}' was not trained")))?;
        tables.push(table.clone());
        order.push(net.train_meta().domains.join("_"));
        paths.push(net_paths[b].clone());
    }
    Ok((tables, order, paths))
}

fn write_json_report(path: &Path, report: &EvalReport) -> Result<()> {
    ensure_parent(path)?;
    let mut json = serde_json::to_string_pretty(report).expect("report serialises");
    json.push('\n');
    std::fs::write(path, json).map_err(|e| DidError::io(path, e))
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let condition = match args.condition.as_str() {
        "seen" => Condition::Seen,
        "unseen" => Condition::Unseen,
        other => {
            return Err(DidError::Config(format!(
                "unknown condition '{other}', expected 'seen' or 'unseen'"
            )))
        }
    };
    // Validate the corpus and the protocol before touching the output
    // directory; domain names are fixed by the corpus spec, so the plan can
    // be built ahead of generation.
    let spec = CorpusSpec::default_corpus(args.domains, derive_seed(cfg.seed, "corpus"));
    spec.validate()?;
    let domain_names: Vec<String> = spec.domains.iter().map(|d| d.name.clone()).collect();
    let plan = datagen::protocol(condition, &domain_names, args.unseen_domain.as_deref())?;

    let corpus_dir = args.out.join("corpus");
    let manifest = datagen::generate(&spec, &corpus_dir)?;
    plan.save(&args.out.join("plan.json"))?;
    let labels = manifest.dialects();
    let models_dir = args.out.join("models");
    let scores_dir = args.out.join("scores");
    let eval_dir = args.out.join("eval");
    println!(
        "corpus: {} utterances, domains {}, dialects {}",
        manifest.len(),
        domain_names.join(", "),
        labels.join(", ")
    );

    // Phase 1: train the base classifiers.
    let mut nets: BTreeMap<String, DidNetwork> = BTreeMap::new();
    let mut net_paths: BTreeMap<String, PathBuf> = BTreeMap::new();
    for sys in &plan.systems {
        let (train_domains, width) = match &sys.kind {
            SystemKind::Single { domain } => (vec![domain.clone()], 1.0),
            SystemKind::Multi {
                domains,
                width_multiplier,
            } => (domains.clone(), *width_multiplier),
            _ => continue,
        };
        let rows = manifest.select(Split::Train, Some(&train_domains));
        let examples = didmodel::load_examples(&corpus_dir, &rows, &labels)?;
        let arch = cfg.profile.arch(labels.len()).with_width(width);
        let mut net = DidNetwork::build(
            arch,
            labels.clone(),
            derive_seed(cfg.seed, &format!("init:{}", sys.id)),
        )?;
        net.set_domains(train_domains);
        let opts = cfg.train_options(derive_seed(cfg.seed, &format!("train:{}", sys.id)))?;
        let log = didmodel::train(&mut net, &examples, &opts)?;
        let path = models_dir.join(format!("{}.didm", sys.id));
        ensure_parent(&path)?;
        net.save(&path)?;
        let last = log.epochs.last().expect("training runs at least one epoch");
        println!(
            "trained {}: {} utterances, {} epochs, train accuracy {:.2}%",
            sys.id,
            examples.len(),
            log.epochs.len(),
            last.train_accuracy * 100.0
        );
        nets.insert(sys.id.clone(), net);
        net_paths.insert(sys.id.clone(), path);
    }

    // Phase 2: score the training split once per fusion base. These tables
    // include hidden activations; the attentive hidden variant reads them.
    let mut fusion_base_ids: Vec<String> = Vec::new();
    for sys in &plan.systems {
        if let SystemKind::LrFusion { bases, .. }
        | SystemKind::FusionLayer { bases }
        | SystemKind::Attentive { bases, .. } = &sys.kind
        {
            for b in bases {
                if !fusion_base_ids.contains(b) {
                    fusion_base_ids.push(b.clone());
                }
            }
        }
    }
    let train_rows = manifest.select(Split::Train, Some(&plan.train_domains));
    let mut train_tables: BTreeMap<String, ScoresTable> = BTreeMap::new();
    for id in &fusion_base_ids {
        let net = nets
            .get(id)
            .ok_or_else(|| DidError::Config(format!("fusion base '{id}' was not trained")))?;
        let table = didmodel::score_manifest(net, &corpus_dir, &train_rows, true)?;
        let path = scores_dir.join("train").join(format!("{id}.tsv"));
        ensure_parent(&path)?;
        table.write(&path)?;
        train_tables.insert(id.clone(), table);
    }

    // Phase 3: train the fusion systems on the frozen base scores.
    let mut fused: BTreeMap<String, FusionModelFile> = BTreeMap::new();
    for sys in &plan.systems {
        let model_path = models_dir.join(format!("{}.didm", sys.id));
        match &sys.kind {
            SystemKind::Single { .. } | SystemKind::Multi { .. } => {}
            SystemKind::LrFusion {
                calibration_domain,
                bases,
            } => {
                let (base_tables, domain_order, base_paths) =
                    fusion_inputs(bases, &train_tables, &nets, &net_paths)?;
                let cal = [calibration_domain.clone()];
                let cal_rows = manifest.select(Split::Train, Some(&cal));
                let examples = fusion::align_scores(&base_tables, &cal_rows)?;
                let mut model = LrFusionModel::new(domain_order, labels.clone())?;
                fusion::lr_fusion_train(&mut model, &examples)?;
                model.base_hashes = fusion::hash_files(&base_paths)?;
                ensure_parent(&model_path)?;
                model.save(&model_path)?;
                println!(
                    "calibrated {} on domain {} ({} examples)",
                    sys.id,
                    calibration_domain,
                    examples.len()
                );
                fused.insert(sys.id.clone(), FusionModelFile::Lr(model));
            }
            SystemKind::FusionLayer { bases } => {
                let (base_tables, domain_order, base_paths) =
                    fusion_inputs(bases, &train_tables, &nets, &net_paths)?;
                let examples = fusion::align_scores(&base_tables, &train_rows)?;
                let mut model = FusionLayerModel::new(
                    domain_order,
                    labels.clone(),
                    derive_seed(cfg.seed, &format!("init:{}", sys.id)),
                )?;
                let epochs = fusion::train_score_fusion(
                    &mut model,
                    &examples,
                    &cfg.fusion_options(derive_seed(cfg.seed, &format!("train:{}", sys.id)))?,
                )?;
                model.base_hashes = fusion::hash_files(&base_paths)?;
                ensure_parent(&model_path)?;
                model.save(&model_path)?;
                let last = epochs.last().expect("at least one epoch");
                println!(
                    "trained {}: {} examples, train accuracy {:.2}%",
                    sys.id,
                    examples.len(),
                    last.accuracy * 100.0
                );
                fused.insert(sys.id.clone(), FusionModelFile::Layer(model));
            }
            SystemKind::Attentive { variant, bases } => {
                let variant = FusionVariant::parse(variant).ok_or_else(|| {
                    DidError::Config(format!(
                        "unknown attentive variant '{variant}' in the experiment plan"
                    ))
                })?;
                let (base_tables, domain_order, base_paths) =
                    fusion_inputs(bases, &train_tables, &nets, &net_paths)?;
                let examples = fusion::align_scores(&base_tables, &train_rows)?;
                let hidden_dim = base_tables[0].hidden_dim;
                let mut model = AttentiveFusionModel::new(
                    variant,
                    cfg.m,
                    domain_order,
                    labels.clone(),
                    hidden_dim,
                    derive_seed(cfg.seed, &format!("init:{}", sys.id)),
                )?;
                let epochs = fusion::train_score_fusion(
                    &mut model,
                    &examples,
                    &cfg.fusion_options(derive_seed(cfg.seed, &format!("train:{}", sys.id)))?,
                )?;
                model.base_hashes = fusion::hash_files(&base_paths)?;
                ensure_parent(&model_path)?;
                model.save(&model_path)?;
                let last = epochs.last().expect("at least one epoch");
                println!(
                    "trained {} ({} variant): {} examples, train accuracy {:.2}%",
                    sys.id,
                    variant.as_str(),
                    examples.len(),
                    last.accuracy * 100.0
                );
                fused.insert(sys.id.clone(), FusionModelFile::Attentive(model));
            }
        }
    }

    // Phase 4: score and evaluate every system on every test domain.
    let mut base_test: BTreeMap<(String, String), ScoresTable> = BTreeMap::new();
    let mut results: Vec<(String, String, EvalReport)> = Vec::new();
    for sys in &plan.systems {
        for domain in &plan.test_domains {
            let dlist = [domain.clone()];
            let rows = manifest.select(Split::Test, Some(&dlist));
            let table = match &sys.kind {
                SystemKind::Single { .. } | SystemKind::Multi { .. } => {
                    let full = cached_test_table(
                        &mut base_test,
                        &nets,
                        &corpus_dir,
                        &manifest,
                        &sys.id,
                        domain,
                    )?;
                    strip_hidden(full)
                }
                SystemKind::LrFusion { bases, .. }
                | SystemKind::FusionLayer { bases }
                | SystemKind::Attentive { bases, .. } => {
                    let mut base_tables = Vec::with_capacity(bases.len());
                    for b in bases {
                        let table = cached_test_table(
                            &mut base_test,
                            &nets,
                            &corpus_dir,
                            &manifest,
                            b,
                            domain,
                        )?
                        .clone();
                        base_tables.push(table);
                    }
                    let examples = fusion::align_scores(&base_tables, &rows)?;
                    let model = fused.get(&sys.id).ok_or_else(|| {
                        DidError::Config(format!("system '{}' was not trained", sys.id))
                    })?;
                    fusion::apply_to_table(model.label_names(), &examples, |ex| {
                        model.posterior(ex)
                    })?
                }
            };
            let score_path = scores_dir.join(format!("{}__{}.tsv", sys.id, domain));
            ensure_parent(&score_path)?;
            table.write(&score_path)?;
            let report = eval_scores_table(&table, &manifest)?;
            write_json_report(&eval_dir.join(format!("{}__{}.json", sys.id, domain)), &report)?;
            results.push((sys.id.clone(), domain.clone(), report));
        }
    }

    // Phase 5: the report tables.
    let condition_name = match condition {
        Condition::Seen => "seen",
        Condition::Unseen => "unseen",
    };
    let mut md = String::new();
    md.push_str(&format!(
        "# Multi-domain dialect identification ({condition_name} condition)\n\n"
    ));
    md.push_str(&format!(
        "Corpus: domains {}; dialects {}; {} train / {} test utterances.\n",
        domain_names.join(", "),
        labels.join(", "),
        manifest.select(Split::Train, None).len(),
        manifest.select(Split::Test, None).len()
    ));
    if let Some(u) = &plan.unseen_domain {
        md.push_str(&format!(
            "Domain '{u}' is excluded from every training set.\n"
        ));
    }
    md.push('\n');
    let mut header = String::from("| System |");
    let mut sep = String::from("| --- |");
    for d in &plan.test_domains {
        header.push_str(&format!(" {d} Acc | {d} EER | {d} Cavg |"));
        sep.push_str(" ---: | ---: | ---: |");
    }
    header.push_str(" Avg Acc | Avg EER | Avg Cavg |");
    sep.push_str(" ---: | ---: | ---: |");
    md.push_str(&header);
    md.push('\n');
    md.push_str(&sep);
    md.push('\n');

    let mut csv = String::from("system,test_domain,accuracy,eer,min_cavg_x100\n");
    for sys in &plan.systems {
        let mut row = format!("| {} |", sys.id);
        let mut sums = (0.0, 0.0, 0.0);
        let mut count = 0.0;
        for (id, domain, report) in &results {
            if id != &sys.id {
                continue;
            }
            let acc = report.accuracy * 100.0;
            let eer = report.eer * 100.0;
            let cavg = report.min_cavg_x100;
            row.push_str(&format!(" {acc:.2} | {eer:.2} | {cavg:.2} |"));
            csv.push_str(&format!("{id},{domain},{acc:.2},{eer:.2},{cavg:.2}\n"));
            sums = (sums.0 + acc, sums.1 + eer, sums.2 + cavg);
            count += 1.0;
        }
        let (acc, eer, cavg) = (sums.0 / count, sums.1 / count, sums.2 / count);
        row.push_str(&format!(" {acc:.2} | {eer:.2} | {cavg:.2} |"));
        csv.push_str(&format!("{},averaged,{acc:.2},{eer:.2},{cavg:.2}\n", sys.id));
        md.push_str(&row);
        md.push('\n');
    }
    md.push('\n');
    md.push_str(
        "Columns: accuracy and pooled EER in percent, minimum average detection \
         cost times 100. The averaged columns are means over the per-domain test \
         sets.\n",
    );

    let md_path = args.out.join("report.md");
    std::fs::write(&md_path, &md).map_err(|e| DidError::io(&md_path, e))?;
    let csv_path = args.out.join("report.csv");
    std::fs::write(&csv_path, &csv).map_err(|e| DidError::io(&csv_path, e))?;

    println!();
    print!("{md}");
    println!("artifacts in {}", args.out.display());
    Ok(())
}
