//! Deterministic synthetic multi-domain corpus generation, manifest I/O and
//! the seen/unseen experiment protocols.
//!
//! Features are drawn directly in 40-dimensional feature space: class `c`
//! frames come from an isotropic Gaussian around a class mean, a first-order
//! recursion adds temporal correlation, and each domain applies a seeded
//! affine channel transform. Everything derives from one seed, so a corpus
//! can be regenerated byte for byte.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{DidError, Result};
use crate::featext::didf;
use crate::nnet::tensor::Tensor2;

/// Feature dimensionality of generated corpora.
pub const FEATURE_DIM: usize = 40;

/// Scale of the random mixing component of a domain channel, relative to
/// the channel strength.
const CHANNEL_MIX_SCALE: f64 = 0.15;

/// Scale of the random offset component of a domain channel, relative to
/// the channel strength.
const CHANNEL_BIAS_SCALE: f64 = 0.4;

/// One standard normal draw via the Box-Muller transform, deterministic for
/// a deterministic generator.
pub fn sample_standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-domain corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Short identifier; becomes part of utterance ids and paths.
    pub name: String,
    /// Training utterances per class; may be unbalanced.
    pub train_per_class: Vec<usize>,
    /// Development utterances per class; zeros allowed.
    pub dev_per_class: Vec<usize>,
    /// Test utterances per class.
    pub test_per_class: Vec<usize>,
    /// Inclusive range of frames per utterance.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Distance of each class mean from the origin.
    pub class_separation: f64,
    /// Strength of the domain's affine channel transform; 0 disables it.
    pub channel_strength: f64,
    /// Per-dimension frame noise standard deviation.
    pub noise_sigma: f64,
}

impl DomainSpec {
    /// Balanced counts with the crate's default signal parameters.
    pub fn balanced(name: &str, n_classes: usize, train: usize, test: usize) -> Self {
        DomainSpec {
            name: name.to_string(),
            train_per_class: vec![train; n_classes],
            dev_per_class: vec![0; n_classes],
            test_per_class: vec![test; n_classes],
            min_frames: 30,
            max_frames: 50,
            class_separation: 3.0,
            channel_strength: 1.0,
            noise_sigma: 1.0,
        }
    }
}

/// Full corpus description; serialised as JSON next to the generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_classes: usize,
    pub feature_dim: usize,
    /// First-order smoothing coefficient in [0, 1).
    pub smoothing: f64,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
}

impl CorpusSpec {
    /// The default corpus: `n_domains` domains named "a", "b", ... with five
    /// classes and a distinct channel per domain.
    pub fn default_corpus(n_domains: usize, seed: u64) -> Self {
        let names = ["a", "b", "c", "d", "e", "f", "g", "h"];
        let domains = (0..n_domains)
            .map(|i| DomainSpec::balanced(names[i % names.len()], 5, 40, 20))
            .collect();
        CorpusSpec {
            n_classes: 5,
            feature_dim: FEATURE_DIM,
            smoothing: 0.6,
            seed,
            domains,
        }
    }

    /// Class label names: "c0" .. "c{L-1}".
    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("c{c}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(DidError::Config(format!(
                "corpus needs at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(DidError::Config("feature dimension must be positive".into()));
        }
        if self.n_classes > self.feature_dim {
            return Err(DidError::Config(format!(
                "corpus needs n_classes <= feature_dim so class means can be orthogonal, got {} > {}",
                self.n_classes, self.feature_dim
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(DidError::Config(format!(
                "smoothing must lie in [0, 1), got {}",
                self.smoothing
            )));
        }
        if self.domains.len() < 2 {
            return Err(DidError::Config(format!(
                "corpus needs at least 2 domains, got {}",
                self.domains.len()
            )));
        }
        let mut seen = HashSet::new();
        for d in &self.domains {
            if d.name.is_empty()
                || !d
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(DidError::Config(format!(
                    "domain name '{}' must be nonempty and use only [A-Za-z0-9_-]",
                    d.name
                )));
            }
            if !seen.insert(d.name.clone()) {
                return Err(DidError::Config(format!("duplicate domain name '{}'", d.name)));
            }
            for (label, counts) in [("train", &d.train_per_class), ("test", &d.test_per_class)] {
                if counts.len() != self.n_classes {
                    return Err(DidError::Config(format!(
                        "domain '{}': {label} counts for {} classes, expected {}",
                        d.name,
                        counts.len(),
                        self.n_classes
                    )));
                }
                if counts.iter().any(|&c| c == 0) {
                    return Err(DidError::Config(format!(
                        "domain '{}': every class needs at least one {label} utterance",
                        d.name
                    )));
                }
            }
            if d.dev_per_class.len() != self.n_classes {
                return Err(DidError::Config(format!(
                    "domain '{}': dev counts for {} classes, expected {}",
                    d.name,
                    d.dev_per_class.len(),
                    self.n_classes
                )));
            }
            if d.min_frames == 0 || d.min_frames > d.max_frames {
                return Err(DidError::Config(format!(
                    "domain '{}': invalid frame range {}..{}",
                    d.name, d.min_frames, d.max_frames
                )));
            }
            if !(d.class_separation.is_finite() && d.class_separation > 0.0) {
                return Err(DidError::Config(format!(
                    "domain '{}': class separation must be positive",
                    d.name
                )));
            }
            if !(d.channel_strength.is_finite() && d.channel_strength >= 0.0) {
                return Err(DidError::Config(format!(
                    "domain '{}': channel strength must be nonnegative",
                    d.name
                )));
            }
            if !(d.noise_sigma.is_finite() && d.noise_sigma > 0.0) {
                return Err(DidError::Config(format!(
                    "domain '{}': noise sigma must be positive",
                    d.name
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("spec serialises");
        json.push('\n');
        std::fs::write(path, json).map_err(|e| DidError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DidError::io(path, e))?;
        let spec: CorpusSpec = serde_json::from_str(&text).map_err(|e| DidError::Config(format!(
            "{}: not a valid corpus spec: {e}",
            path.display()
        )))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Which portion of the corpus a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One manifest row. `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub utt_id: String,
    pub path: String,
    pub dialect: String,
    pub domain: String,
    pub split: Split,
}

/// An ordered utterance list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
}

const MANIFEST_HEADER: &str = "utt_id,path,dialect,domain,split";

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            for (field, value) in [
                ("utt_id", &r.utt_id),
                ("path", &r.path),
                ("dialect", &r.dialect),
                ("domain", &r.domain),
            ] {
                if value.is_empty() {
                    return Err(DidError::Config(format!(
                        "manifest row '{}': empty {field}",
                        r.utt_id
                    )));
                }
                if value.contains([',', '\n', '\r', '\t']) {
                    return Err(DidError::Config(format!(
                        "manifest row '{}': {field} contains a separator character",
                        r.utt_id
                    )));
                }
            }
            if !seen.insert(r.utt_id.clone()) {
                return Err(DidError::Config(format!("duplicate utt_id '{}'", r.utt_id)));
            }
        }
        Ok(Manifest { rows })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sorted unique dialect names; their order defines class indices.
    pub fn dialects(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .rows
            .iter()
            .map(|r| r.dialect.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        names.sort();
        names
    }

    /// Domain names in first-appearance order.
    pub fn domains(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.domain) {
                out.push(r.domain.clone());
            }
        }
        out
    }

    /// Rows matching a split and, optionally, a set of domains.
    pub fn select(&self, split: Split, domains: Option<&[String]>) -> Vec<&ManifestRow> {
        self.rows
            .iter()
            .filter(|r| r.split == split)
            .filter(|r| domains.map_or(true, |ds| ds.iter().any(|d| d == &r.domain)))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.rows.len() * 48 + 32);
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.utt_id,
                r.path,
                r.dialect,
                r.domain,
                r.split.as_str()
            ));
        }
        std::fs::write(path, out).map_err(|e| DidError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DidError::io(path, e))?;
        let fail = |line: usize, reason: String| DidError::Manifest {
            path: path.into(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == MANIFEST_HEADER => {}
            Some((_, header)) => {
                return Err(fail(1, format!(
                    "bad header '{header}', expected '{MANIFEST_HEADER}'"
                )))
            }
            None => return Err(fail(1, "empty file".into())),
        }

        let mut rows = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.is_empty() {
                return Err(fail(line_no, "blank line".into()));
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(fail(line_no, format!("{} fields, expected 5", fields.len())));
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(fail(line_no, "empty field".into()));
            }
            let split = Split::parse(fields[4]).ok_or_else(|| {
                fail(line_no, format!(
                    "unknown split '{}', expected train|dev|test",
                    fields[4]
                ))
            })?;
            if !seen.insert(fields[0].to_string()) {
                return Err(fail(line_no, format!("duplicate utt_id '{}'", fields[0])));
            }
            rows.push(ManifestRow {
                utt_id: fields[0].to_string(),
                path: fields[1].to_string(),
                dialect: fields[2].to_string(),
                domain: fields[3].to_string(),
                split,
            });
        }
        Ok(Manifest { rows })
    }

    /// Resolves a row's feature path against the manifest's directory.
    pub fn resolve(manifest_dir: &Path, row: &ManifestRow) -> PathBuf {
        manifest_dir.join(&row.path)
    }
}

/// Generates the corpus under `out_dir`: feature files, `manifest.csv` and
/// `corpus_spec.json`. Returns the manifest.
pub fn generate(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| DidError::io(out_dir, e))?;

    // Class mean directions are shared across domains; each domain scales
    // them by its own separation. Gram-Schmidt makes them exactly
    // orthonormal, which keeps the separation knob meaningful as a distance
    // and lets the channel rotations below map one class region precisely
    // onto another.
    let mut class_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "class-means"));
    let mut class_dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    for _ in 0..spec.n_classes {
        let mut v: Vec<f64> = (0..spec.feature_dim)
            .map(|_| sample_standard_normal(&mut class_rng))
            .collect();
        for prev in &class_dirs {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        class_dirs.push(v);
    }

    let class_names = spec.class_names();
    let mut rows = Vec::new();
    for (dom_idx, domain) in spec.domains.iter().enumerate() {
        let dir = out_dir.join("features").join(&domain.name);
        std::fs::create_dir_all(&dir).map_err(|e| DidError::io(&dir, e))?;

        // Domain channel: y = x + g*(A x) + g*delta with A = R + 0.15*M.
        // R rotates one pair of class-mean directions into each other
        // (domain k >= 1 swaps classes k-1 and k), so relative to any other
        // domain a full-strength channel relabels that pair's regions and a
        // classifier trained elsewhere is confidently wrong on them, not
        // merely uncertain. M ~ N(0, 1/dim) entries and the offset delta
        // are mild domain fingerprints that stay small next to the class
        // separation, so matched-domain structure survives.
        let mut dom_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("domain:{}", domain.name)));
        let g = domain.channel_strength;
        let scale = CHANNEL_MIX_SCALE / (spec.feature_dim as f64).sqrt();
        let mut mixing: Vec<Vec<f64>> = (0..spec.feature_dim)
            .map(|_| {
                (0..spec.feature_dim)
                    .map(|_| sample_standard_normal(&mut dom_rng) * scale)
                    .collect()
            })
            .collect();
        let bias: Vec<f64> = (0..spec.feature_dim)
            .map(|_| sample_standard_normal(&mut dom_rng) * CHANNEL_BIAS_SCALE * g)
            .collect();
        if dom_idx > 0 {
            let p = (dom_idx - 1) % spec.n_classes;
            let q = dom_idx % spec.n_classes;
            let (up, uq) = (&class_dirs[p], &class_dirs[q]);
            for j in 0..spec.feature_dim {
                for k in 0..spec.feature_dim {
                    mixing[j][k] += (uq[j] - up[j]) * up[k] + (up[j] - uq[j]) * uq[k];
                }
            }
        }

        for (split, counts) in [
            (Split::Train, &domain.train_per_class),
            (Split::Dev, &domain.dev_per_class),
            (Split::Test, &domain.test_per_class),
        ] {
            for (class, &count) in counts.iter().enumerate() {
                for idx in 0..count {
                    let utt_id = format!(
                        "{}-{}-{}-{:04}",
                        domain.name,
                        class_names[class],
                        split.as_str(),
                        idx
                    );
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("utt:{utt_id}")));
                    let frames = generate_utterance(
                        &mut rng,
                        spec,
                        domain,
                        &class_dirs[class],
                        &mixing,
                        &bias,
                        g,
                    );
                    let rel = format!("features/{}/{}.didf", domain.name, utt_id);
                    didf::write_features(&out_dir.join(&rel), &frames)?;
                    rows.push(ManifestRow {
                        utt_id,
                        path: rel,
                        dialect: class_names[class].clone(),
                        domain: domain.name.clone(),
                        split,
                    });
                }
            }
        }
    }

    let manifest = Manifest::new(rows)?;
    manifest.write(&out_dir.join("manifest.csv"))?;
    spec.save(&out_dir.join("corpus_spec.json"))?;
    Ok(manifest)
}

fn generate_utterance(
    rng: &mut ChaCha8Rng,
    spec: &CorpusSpec,
    domain: &DomainSpec,
    class_dir: &[f64],
    mixing: &[Vec<f64>],
    bias: &[f64],
    g: f64,
) -> Tensor2 {
    let dim = spec.feature_dim;
    let t = rng.gen_range(domain.min_frames..=domain.max_frames);
    let rho = spec.smoothing;
    let mean: Vec<f64> = class_dir.iter().map(|u| u * domain.class_separation).collect();

    let mut out = Tensor2::zeros(t, dim);
    let mut prev = vec![0.0; dim];
    for i in 0..t {
        // Fresh Gaussian frame around the class mean, then first-order
        // smoothing against the previous frame.
        let z: Vec<f64> = mean
            .iter()
            .map(|m| m + sample_standard_normal(rng) * domain.noise_sigma)
            .collect();
        let x: Vec<f64> = if i == 0 {
            z
        } else {
            prev.iter().zip(&z).map(|(p, zv)| rho * p + (1.0 - rho) * zv).collect()
        };
        // Channel: y = x + g*(A x) + bias, with A and bias built per domain.
        for (j, slot) in out.row_mut(i).iter_mut().enumerate() {
            let mixed: f64 = mixing[j].iter().zip(&x).map(|(m, xv)| m * xv).sum();
            *slot = x[j] + g * mixed + bias[j];
        }
        prev = x;
    }
    out
}

/// Seen/unseen experimental condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Seen,
    Unseen,
}

/// What a planned system is and which domains feed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemKind {
    /// One network trained on a single domain.
    Single { domain: String },
    /// One wider network trained on the union of domains.
    Multi {
        domains: Vec<String>,
        width_multiplier: f64,
    },
    /// Logistic-regression score fusion of the single systems, calibrated
    /// on one domain's training data.
    LrFusion {
        calibration_domain: String,
        bases: Vec<String>,
    },
    /// Fully connected fusion layer over concatenated posteriors.
    FusionLayer { bases: Vec<String> },
    /// Domain-attentive fusion; `variant` is "output" or "hidden".
    Attentive { variant: String, bases: Vec<String> },
}

/// One row of the experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemPlan {
    pub id: String,
    #[serde(flatten)]
    pub kind: SystemKind,
}

/// A full experiment: which systems to train and where to test them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub condition: Condition,
    pub unseen_domain: Option<String>,
    pub train_domains: Vec<String>,
    pub test_domains: Vec<String>,
    pub systems: Vec<SystemPlan>,
}

impl ExperimentPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("plan serialises");
        json.push('\n');
        std::fs::write(path, json).map_err(|e| DidError::io(path, e))
    }
}

/// Builds the experiment plan for a list of corpus domains.
///
/// Under the seen condition every domain trains systems and every domain is
/// a test column. Under the unseen condition the named domain is excluded
/// from all training sets but still scored, which is exactly what makes it
/// unseen.
pub fn protocol(
    condition: Condition,
    domains: &[String],
    unseen_domain: Option<&str>,
) -> Result<ExperimentPlan> {
    if domains.len() < 2 {
        return Err(DidError::Config(format!(
            "experiment protocols need at least 2 domains, got {}",
            domains.len()
        )));
    }
    let train_domains: Vec<String> = match (condition, unseen_domain) {
        (Condition::Seen, None) => domains.to_vec(),
        (Condition::Seen, Some(d)) => {
            return Err(DidError::Config(format!(
                "seen condition does not take an unseen domain ('{d}' given)"
            )))
        }
        (Condition::Unseen, Some(d)) => {
            if !domains.iter().any(|x| x == d) {
                return Err(DidError::Config(format!(
                    "unseen domain '{d}' is not in the corpus ({})",
                    domains.join(", ")
                )));
            }
            domains.iter().filter(|x| *x != d).cloned().collect()
        }
        (Condition::Unseen, None) => {
            return Err(DidError::Config(
                "unseen condition needs --unseen-domain".into(),
            ))
        }
    };

    let mut systems = Vec::new();
    let single_ids: Vec<String> = train_domains.iter().map(|d| format!("single_{d}")).collect();
    for (d, id) in train_domains.iter().zip(&single_ids) {
        systems.push(SystemPlan {
            id: id.clone(),
            kind: SystemKind::Single { domain: d.clone() },
        });
    }
    systems.push(SystemPlan {
        id: "multi".into(),
        kind: SystemKind::Multi {
            domains: train_domains.clone(),
            width_multiplier: 2.0,
        },
    });
    if single_ids.len() >= 2 {
        for d in &train_domains {
            systems.push(SystemPlan {
                id: format!("lr_cal_{d}"),
                kind: SystemKind::LrFusion {
                    calibration_domain: d.clone(),
                    bases: single_ids.clone(),
                },
            });
        }
        systems.push(SystemPlan {
            id: "fusion_layer".into(),
            kind: SystemKind::FusionLayer {
                bases: single_ids.clone(),
            },
        });
        systems.push(SystemPlan {
            id: "attentive_a".into(),
            kind: SystemKind::Attentive {
                variant: "output".into(),
                bases: single_ids.clone(),
            },
        });
        systems.push(SystemPlan {
            id: "attentive_b".into(),
            kind: SystemKind::Attentive {
                variant: "hidden".into(),
                bases: single_ids,
            },
        });
    }

    Ok(ExperimentPlan {
        condition,
        unseen_domain: unseen_domain.map(str::to_string),
        train_domains,
        test_domains: domains.to_vec(),
        systems,
    })
}
