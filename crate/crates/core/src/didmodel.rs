//! The end-to-end dialect identification network: architecture profiles,
//! training with SGD and a decaying schedule, scoring to TSV, and model
//! persistence.
//!
//! A network maps a T x 40 feature matrix through four one-dimensional conv
//! layers, a global pooling layer and two feed-forward layers into a softmax
//! over dialect labels. Alongside the posterior it exposes the post-ReLU
//! activation of the last feed-forward layer, which downstream fusion uses
//! as the utterance embedding.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ManifestRow;
use crate::derive_seed;
use crate::error::{DidError, Result};
use crate::featext::{didf, FeatureMatrix};
use crate::nnet::{
    read_container, write_container, Differentiable, ForwardOut, LayerSpec, LrSchedule, ParamSet,
    StackNet, Tensor2,
};

/// One conv layer of the architecture description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

/// Architecture of a dialect-ID network before width scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DidArchConfig {
    pub input_dim: usize,
    pub conv_specs: Vec<ConvSpec>,
    pub ff_sizes: Vec<usize>,
    pub n_classes: usize,
    /// Scales every channel and feed-forward width; 2 for the multi-domain
    /// system.
    pub width_multiplier: f64,
    /// Append per-channel standard deviations to the pooled mean.
    #[serde(default)]
    pub pool_with_std: bool,
}

impl DidArchConfig {
    /// The full-size architecture: conv channels 500-500-500-3000 with
    /// kernels 5-7-1-1 and strides 1-2-1-1, feed-forward 1500-600, five
    /// classes.
    pub fn paper() -> Self {
        DidArchConfig {
            input_dim: 40,
            conv_specs: vec![
                ConvSpec { kernel: 5, stride: 1, out_channels: 500 },
                ConvSpec { kernel: 7, stride: 2, out_channels: 500 },
                ConvSpec { kernel: 1, stride: 1, out_channels: 500 },
                ConvSpec { kernel: 1, stride: 1, out_channels: 3000 },
            ],
            ff_sizes: vec![1500, 600],
            n_classes: 5,
            width_multiplier: 1.0,
            pool_with_std: false,
        }
    }

    /// Desk-scale profile with the same depth and strides but small widths.
    pub fn toy() -> Self {
        DidArchConfig {
            conv_specs: vec![
                ConvSpec { kernel: 5, stride: 1, out_channels: 32 },
                ConvSpec { kernel: 7, stride: 2, out_channels: 32 },
                ConvSpec { kernel: 1, stride: 1, out_channels: 32 },
                ConvSpec { kernel: 1, stride: 1, out_channels: 128 },
            ],
            ff_sizes: vec![64, 32],
            ..DidArchConfig::paper()
        }
    }

    pub fn with_classes(mut self, n_classes: usize) -> Self {
        self.n_classes = n_classes;
        self
    }

    pub fn with_width(mut self, width_multiplier: f64) -> Self {
        self.width_multiplier = width_multiplier;
        self
    }

    fn scaled(&self, n: usize) -> usize {
        ((n as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Width of the exposed hidden embedding (last FF layer, after scaling).
    pub fn hidden_dim(&self) -> usize {
        self.scaled(*self.ff_sizes.last().expect("validated arch has ff layers"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(DidError::Config("input dimension must be positive".into()));
        }
        if self.conv_specs.is_empty() {
            return Err(DidError::Config("architecture needs at least one conv layer".into()));
        }
        for (i, c) in self.conv_specs.iter().enumerate() {
            if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 {
                return Err(DidError::Config(format!(
                    "conv layer {i}: kernel, stride and channels must be positive"
                )));
            }
        }
        if self.ff_sizes.is_empty() || self.ff_sizes.contains(&0) {
            return Err(DidError::Config("feed-forward sizes must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(DidError::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(DidError::Config(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        Ok(())
    }

    /// Expands the config into layer specs with the multiplier applied.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for c in &self.conv_specs {
            specs.push(LayerSpec::Conv1d {
                in_channels: 0, // filled by chaining below
                out_channels: self.scaled(c.out_channels),
                kernel: c.kernel,
                stride: c.stride,
                relu: true,
            });
        }
        // Chain input channels through the conv stack.
        let mut prev = self.input_dim;
        for spec in &mut specs {
            if let LayerSpec::Conv1d { in_channels, out_channels, .. } = spec {
                *in_channels = prev;
                prev = *out_channels;
            }
        }
        specs.push(LayerSpec::GlobalPool { with_std: self.pool_with_std });
        let mut width = if self.pool_with_std { prev * 2 } else { prev };
        for &ff in &self.ff_sizes {
            let out = self.scaled(ff);
            specs.push(LayerSpec::Dense { inputs: width, outputs: out, relu: true });
            width = out;
        }
        specs.push(LayerSpec::Dense { inputs: width, outputs: self.n_classes, relu: false });
        specs
    }
}

/// Posterior and embedding for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub utt_id: String,
    /// Softmax posterior over the label set; sums to 1.
    pub o: Vec<f64>,
    /// Post-ReLU activation of the last feed-forward layer.
    pub h: Vec<f64>,
}

/// Provenance recorded next to saved models.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub steps: u64,
    pub domains: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DidModelSidecar {
    format: String,
    arch: DidArchConfig,
    label_names: Vec<String>,
    train_meta: TrainMeta,
}

/// Container format tag for saved classifier networks.
pub const MODEL_FORMAT: &str = "did-network";

/// Returns the JSON sidecar path for a model file.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.json", model_path.display()))
}

/// A built (possibly trained) dialect-ID network.
#[derive(Debug)]
pub struct DidNetwork {
    arch: DidArchConfig,
    label_names: Vec<String>,
    net: StackNet,
    train_meta: TrainMeta,
}

pub(crate) fn check_labels(label_names: &[String], n_classes: usize) -> Result<()> {
    if label_names.len() != n_classes {
        return Err(DidError::Config(format!(
            "{} label names for {} classes",
            label_names.len(),
            n_classes
        )));
    }
    for (i, a) in label_names.iter().enumerate() {
        if a.is_empty() {
            return Err(DidError::Config("empty label name".into()));
        }
        if label_names[..i].contains(a) {
            return Err(DidError::Config(format!("duplicate label name '{a}'")));
        }
    }
    Ok(())
}

impl DidNetwork {
    /// Builds a freshly initialised network. Initialisation is a pure
    /// function of the seed.
    pub fn build(arch: DidArchConfig, label_names: Vec<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        check_labels(&label_names, arch.n_classes)?;
        let net = StackNet::build(arch.input_dim, arch.layer_specs(), seed)?;
        Ok(DidNetwork {
            arch,
            label_names,
            net,
            train_meta: TrainMeta { seed, steps: 0, domains: Vec::new() },
        })
    }

    pub fn arch(&self) -> &DidArchConfig {
        &self.arch
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn train_meta(&self) -> &TrainMeta {
        &self.train_meta
    }

    pub fn set_domains(&mut self, domains: Vec<String>) {
        self.train_meta.domains = domains;
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.net.params_mut()
    }

    /// Fewest frames the conv stack can consume.
    pub fn min_input_frames(&self) -> usize {
        self.net.min_input_rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.net.hidden_dim()
    }

    /// Scores a raw frame matrix.
    pub fn forward_frames(&self, utt_id: &str, frames: &Tensor2) -> Result<UtteranceScore> {
        let min = self.min_input_frames();
        if frames.rows() < min {
            return Err(DidError::UtteranceTooShort {
                utt_id: utt_id.to_string(),
                got: frames.rows(),
                min,
            });
        }
        let ForwardOut { output, hidden } = self.net.forward(frames)?;
        Ok(UtteranceScore {
            utt_id: utt_id.to_string(),
            o: crate::nnet::kernels::softmax(&output),
            h: hidden,
        })
    }

    /// Scores an extracted feature matrix.
    pub fn forward(&self, feats: &FeatureMatrix) -> Result<UtteranceScore> {
        self.forward_frames(&feats.utt_id, feats.frames())
    }

    /// Writes the parameter container plus a JSON sidecar describing the
    /// architecture and label set.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.net.params().to_named_tensors())?;
        let sidecar = DidModelSidecar {
            format: MODEL_FORMAT.into(),
            arch: self.arch.clone(),
            label_names: self.label_names.clone(),
            train_meta: self.train_meta.clone(),
        };
        let side = sidecar_path(path);
        let mut json = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
        json.push('\n');
        std::fs::write(&side, json).map_err(|e| DidError::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| DidError::io(&side, e))?;
        let sidecar: DidModelSidecar =
            serde_json::from_str(&text).map_err(|e| DidError::ModelFile {
                path: side.clone(),
                reason: format!("bad sidecar: {e}"),
            })?;
        if sidecar.format != MODEL_FORMAT {
            return Err(DidError::ModelFile {
                path: side,
                reason: format!("format '{}' is not '{MODEL_FORMAT}'", sidecar.format),
            });
        }
        sidecar.arch.validate()?;
        check_labels(&sidecar.label_names, sidecar.arch.n_classes)?;
        let params = ParamSet::from_named_tensors(read_container(path)?)?;
        let net = StackNet::from_parts(sidecar.arch.input_dim, sidecar.arch.layer_specs(), params)
            .map_err(|e| DidError::ModelFile {
                path: path.into(),
                reason: format!("parameters do not match the sidecar architecture: {e}"),
            })?;
        Ok(DidNetwork {
            arch: sidecar.arch,
            label_names: sidecar.label_names,
            net,
            train_meta: sidecar.train_meta,
        })
    }
}

/// One training example: frames plus a label index into the label set.
#[derive(Clone, Debug)]
pub struct LabeledUtterance {
    pub utt_id: String,
    pub frames: Tensor2,
    pub label: usize,
}

/// Loads features for manifest rows, mapping dialect names to indices in
/// `label_names`. Missing files are all listed before the run aborts.
pub fn load_examples(
    manifest_dir: &Path,
    rows: &[&ManifestRow],
    label_names: &[String],
) -> Result<Vec<LabeledUtterance>> {
    let missing: Vec<String> = rows
        .iter()
        .filter(|r| !manifest_dir.join(&r.path).is_file())
        .map(|r| r.path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(DidError::Config(format!(
            "missing feature files: {}",
            missing.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let label = label_names
            .iter()
            .position(|l| *l == row.dialect)
            .ok_or_else(|| {
                DidError::Config(format!(
                    "utterance '{}' has dialect '{}' outside the label set ({})",
                    row.utt_id,
                    row.dialect,
                    label_names.join(", ")
                ))
            })?;
        out.push(LabeledUtterance {
            utt_id: row.utt_id.clone(),
            frames: didf::read_features(&manifest_dir.join(&row.path))?,
            label,
        });
    }
    Ok(out)
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub schedule: LrSchedule,
    pub epochs: usize,
    /// Examples per parameter update; gradients are averaged over the batch.
    pub batch_size: usize,
    /// Fraction of the shuffled training list held out for monitoring.
    pub holdout_frac: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            schedule: LrSchedule::speech_default(),
            epochs: 2,
            batch_size: 1,
            holdout_frac: 0.05,
            seed: 0,
        }
    }
}

/// Per-epoch snapshot of the training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub holdout_loss: f64,
    pub holdout_accuracy: f64,
}

/// Loss curve of a run, including the pre-training holdout loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_holdout_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
}

/// Size of the monitoring holdout: the last `floor(n*frac)` of the shuffled
/// list, at least 1 once there are two examples.
pub fn holdout_count(n: usize, frac: f64) -> usize {
    if n < 2 {
        return 0;
    }
    (((n as f64) * frac).floor() as usize).clamp(1, n - 1)
}

fn mean_xent(net: &StackNet, examples: &[&LabeledUtterance]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ex in examples {
        let out = net.forward(&ex.frames)?;
        let (l, p) = crate::nnet::kernels::softmax_xent(&out.output, ex.label)?;
        loss += l;
        if crate::metrics::argmax(&p) == ex.label {
            correct += 1;
        }
    }
    Ok((loss / examples.len() as f64, correct as f64 / examples.len() as f64))
}

/// Trains the network in place with plain SGD and the decaying schedule.
///
/// The example list is shuffled once from the run seed; the tail fraction
/// becomes a fixed holdout that is only evaluated, never stepped on. The
/// remaining examples are reshuffled every epoch. The learning rate advances
/// once per parameter update.
pub fn train(
    net: &mut DidNetwork,
    examples: &[LabeledUtterance],
    opts: &TrainOptions,
) -> Result<TrainLog> {
    if examples.is_empty() {
        return Err(DidError::Config("empty training set".into()));
    }
    if opts.epochs == 0 {
        return Err(DidError::Config("epochs must be at least 1".into()));
    }
    if opts.batch_size == 0 {
        return Err(DidError::Config("batch size must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&opts.holdout_frac) {
        return Err(DidError::Config(format!(
            "holdout fraction must lie in [0, 1), got {}",
            opts.holdout_frac
        )));
    }
    let n_classes = net.arch.n_classes;
    let min_frames = net.min_input_frames();
    for ex in examples {
        if ex.label >= n_classes {
            return Err(DidError::Config(format!(
                "utterance '{}' has label index {} outside 0..{}",
                ex.utt_id, ex.label, n_classes
            )));
        }
        if ex.frames.rows() < min_frames {
            return Err(DidError::UtteranceTooShort {
                utt_id: ex.utt_id.clone(),
                got: ex.frames.rows(),
                min: min_frames,
            });
        }
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "shuffle"));
    order.shuffle(&mut rng);
    let n_holdout = holdout_count(examples.len(), opts.holdout_frac);
    let split = examples.len() - n_holdout;
    let holdout: Vec<&LabeledUtterance> = order[split..].iter().map(|&i| &examples[i]).collect();
    let mut train_idx: Vec<usize> = order[..split].to_vec();

    let (initial_holdout_loss, _) = mean_xent(&net.net, &holdout)?;
    let mut step: u64 = net.train_meta.steps;
    let mut log = TrainLog {
        initial_holdout_loss,
        epochs: Vec::with_capacity(opts.epochs),
        steps: 0,
    };

    for epoch in 0..opts.epochs {
        let mut erng =
            ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &format!("epoch:{epoch}")));
        train_idx.shuffle(&mut erng);

        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut in_batch = 0usize;
        net.net.params_mut().zero_grads();
        for (seen, &i) in train_idx.iter().enumerate() {
            let ex = &examples[i];
            let logits = net.net.forward_train(&ex.frames)?;
            let (loss, probs) = crate::nnet::kernels::softmax_xent(&logits, ex.label)?;
            epoch_loss += loss;
            if crate::metrics::argmax(&probs) == ex.label {
                correct += 1;
            }
            let mut gout = probs;
            gout[ex.label] -= 1.0;
            net.net.backward(&gout)?;
            in_batch += 1;
            if in_batch == opts.batch_size || seen + 1 == train_idx.len() {
                let params = net.net.params_mut();
                params.scale_grads(1.0 / in_batch as f64);
                params.sgd_step(opts.schedule.lr_at(step));
                params.zero_grads();
                step += 1;
                log.steps += 1;
                in_batch = 0;
            }
        }

        let (holdout_loss, holdout_accuracy) = mean_xent(&net.net, &holdout)?;
        log.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train_idx.len() as f64,
            train_accuracy: correct as f64 / train_idx.len() as f64,
            holdout_loss,
            holdout_accuracy,
        });
    }
    net.train_meta.steps = step;
    net.train_meta.seed = opts.seed;
    Ok(log)
}

/// One scored row of a TSV scores file. `h` is empty when hidden
/// activations were not written.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub utt_id: String,
    pub o: Vec<f64>,
    pub h: Vec<f64>,
}

/// In-memory form of a scores file.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoresTable {
    pub label_names: Vec<String>,
    pub hidden_dim: usize,
    pub rows: Vec<ScoreRow>,
}

impl ScoresTable {
    /// Looks up a row by utterance id.
    pub fn row(&self, utt_id: &str) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.utt_id == utt_id)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("utt_id");
        for l in &self.label_names {
            out.push('\t');
            out.push_str(l);
        }
        for i in 0..self.hidden_dim {
            out.push_str(&format!("\th_{}", i + 1));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.utt_id);
            for v in r.o.iter().chain(&r.h) {
                out.push_str(&format!("\t{v:.8e}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| DidError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DidError::io(path, e))?;
        let fail = |reason: String| DidError::FeatureFile { path: path.into(), reason };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| fail("empty scores file".into()))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.first() != Some(&"utt_id") || cols.len() < 3 {
            return Err(fail("bad scores header".into()));
        }
        let first_h = cols.iter().position(|c| *c == "h_1").unwrap_or(cols.len());
        let label_names: Vec<String> = cols[1..first_h].iter().map(|c| c.to_string()).collect();
        if label_names.len() < 2 {
            return Err(fail("scores header needs at least 2 label columns".into()));
        }
        let hidden_dim = cols.len() - first_h;
        for (i, c) in cols[first_h..].iter().enumerate() {
            if *c != format!("h_{}", i + 1) {
                return Err(fail(format!("bad hidden column '{c}'")));
            }
        }
        let mut rows = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (idx, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != cols.len() {
                return Err(fail(format!(
                    "row {}: {} fields, expected {}",
                    idx + 2,
                    fields.len(),
                    cols.len()
                )));
            }
            if !seen.insert(fields[0].to_string()) {
                return Err(fail(format!("duplicate utt_id '{}'", fields[0])));
            }
            let mut values = Vec::with_capacity(fields.len() - 1);
            for f in &fields[1..] {
                let v: f64 = f.parse().map_err(|_| {
                    fail(format!("row {}: bad float '{f}'", idx + 2))
                })?;
                if !v.is_finite() {
                    return Err(fail(format!("row {}: non-finite score", idx + 2)));
                }
                values.push(v);
            }
            let h = values.split_off(label_names.len());
            rows.push(ScoreRow { utt_id: fields[0].to_string(), o: values, h });
        }
        Ok(ScoresTable { label_names, hidden_dim, rows })
    }
}

/// Scores manifest rows in order; `include_hidden` adds the embedding
/// columns fusion needs.
pub fn score_manifest(
    net: &DidNetwork,
    manifest_dir: &Path,
    rows: &[&ManifestRow],
    include_hidden: bool,
) -> Result<ScoresTable> {
    let missing: Vec<String> = rows
        .iter()
        .filter(|r| !manifest_dir.join(&r.path).is_file())
        .map(|r| r.path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(DidError::Config(format!(
            "missing feature files: {}",
            missing.join(", ")
        )));
    }
    let mut out_rows = Vec::with_capacity(rows.len());
    for row in rows {
        let frames = didf::read_features(&manifest_dir.join(&row.path))?;
        let score = net.forward_frames(&row.utt_id, &frames)?;
        out_rows.push(ScoreRow {
            utt_id: score.utt_id,
            o: score.o,
            h: if include_hidden { score.h } else { Vec::new() },
        });
    }
    Ok(ScoresTable {
        label_names: net.label_names.clone(),
        hidden_dim: if include_hidden { net.hidden_dim() } else { 0 },
        rows: out_rows,
    })
}

/// Mean cross-entropy objective over a batch, for gradient checking.
pub struct XentObjective<'a> {
    net: &'a mut DidNetwork,
    examples: &'a [LabeledUtterance],
}

impl<'a> XentObjective<'a> {
    pub fn new(net: &'a mut DidNetwork, examples: &'a [LabeledUtterance]) -> Self {
        XentObjective { net, examples }
    }
}

impl Differentiable for XentObjective<'_> {
    fn params(&self) -> &ParamSet {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.net.params_mut()
    }

    fn loss(&self) -> Result<f64> {
        let refs: Vec<&LabeledUtterance> = self.examples.iter().collect();
        Ok(mean_xent(&self.net.net, &refs)?.0)
    }

    fn accumulate_grads(&mut self) -> Result<f64> {
        let mut total = 0.0;
        for ex in self.examples {
            let logits = self.net.net.forward_train(&ex.frames)?;
            let (loss, probs) = crate::nnet::kernels::softmax_xent(&logits, ex.label)?;
            total += loss;
            let mut gout = probs;
            gout[ex.label] -= 1.0;
            self.net.net.backward(&gout)?;
        }
        let n = self.examples.len() as f64;
        self.net.net.params_mut().scale_grads(1.0 / n);
        Ok(total / n)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use tempfile::tempdir;

    use crate::datagen::{self, CorpusSpec, Split};
    use crate::nnet::grad_check;

    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|c| format!("c{c}")).collect()
    }

    fn random_frames(rng: &mut impl Rng, t: usize, d: usize) -> Tensor2 {
        let mut x = Tensor2::zeros(t, d);
        for v in x.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        x
    }

    #[test]
    fn default_arch_matches_published_shapes() {
        let arch = DidArchConfig::paper();
        assert_eq!(arch.hidden_dim(), 600);
        let net = DidNetwork::build(arch.clone(), labels(5), 1).unwrap();
        assert_eq!(net.hidden_dim(), 600);
        assert_eq!(net.min_input_frames(), 11);

        let wide = arch.with_width(2.0);
        assert_eq!(wide.hidden_dim(), 1200);
        let specs = wide.layer_specs();
        match specs[3] {
            LayerSpec::Conv1d { out_channels, .. } => assert_eq!(out_channels, 6000),
            _ => panic!("expected conv"),
        }
        match specs[5] {
            LayerSpec::Dense { inputs, outputs, .. } => {
                assert_eq!((inputs, outputs), (6000, 3000));
            }
            _ => panic!("expected dense"),
        }
        match *specs.last().unwrap() {
            LayerSpec::Dense { inputs, outputs, relu } => {
                assert_eq!((inputs, outputs, relu), (1200, 5, false));
            }
            _ => panic!("expected dense"),
        }
    }

    #[test]
    fn arch_validation() {
        assert!(DidArchConfig::paper().validate().is_ok());
        assert!(DidArchConfig::toy().with_classes(1).validate().is_err());
        assert!(DidArchConfig::toy().with_width(0.0).validate().is_err());
        let mut a = DidArchConfig::toy();
        a.conv_specs[0].stride = 0;
        assert!(a.validate().is_err());
        let mut a = DidArchConfig::toy();
        a.ff_sizes.clear();
        assert!(a.validate().is_err());
        assert!(DidNetwork::build(DidArchConfig::toy(), labels(4), 0).is_err());
        let mut dup = labels(5);
        dup[4] = "c0".into();
        assert!(DidNetwork::build(DidArchConfig::toy(), dup, 0).is_err());
    }

    #[test]
    fn forward_posterior_sums_to_one_and_short_input_is_rejected() {
        let net = DidNetwork::build(DidArchConfig::toy(), labels(5), 3).unwrap();
        assert_eq!(net.min_input_frames(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let score = net.forward_frames("u1", &random_frames(&mut rng, 11, 40)).unwrap();
        assert_eq!(score.o.len(), 5);
        assert_eq!(score.h.len(), 32);
        assert!((score.o.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(score.o.iter().chain(&score.h).all(|v| v.is_finite()));

        let err = net
            .forward_frames("shorty", &random_frames(&mut rng, 10, 40))
            .unwrap_err()
            .to_string();
        assert!(err.contains("shorty") && err.contains("10") && err.contains("11"), "{err}");
    }

    #[test]
    fn zero_features_give_exactly_uniform_posterior() {
        // Zero input nulls every pre-activation, so the logits equal the
        // zero biases and the softmax is uniform.
        let net = DidNetwork::build(DidArchConfig::toy(), labels(5), 11).unwrap();
        let score = net.forward_frames("z", &Tensor2::zeros(12, 40)).unwrap();
        for p in &score.o {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = DidNetwork::build(DidArchConfig::toy(), labels(5), 77).unwrap();
        let b = DidNetwork::build(DidArchConfig::toy(), labels(5), 77).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.value().data(), pb.value().data());
        }
        let c = DidNetwork::build(DidArchConfig::toy(), labels(5), 78).unwrap();
        assert_ne!(
            a.params().iter().next().unwrap().value().data(),
            c.params().iter().next().unwrap().value().data()
        );
    }

    #[test]
    fn holdout_count_rules() {
        assert_eq!(holdout_count(0, 0.05), 0);
        assert_eq!(holdout_count(1, 0.05), 0);
        assert_eq!(holdout_count(2, 0.05), 1);
        assert_eq!(holdout_count(40, 0.05), 2);
        assert_eq!(holdout_count(100, 0.05), 5);
        assert_eq!(holdout_count(19, 0.05), 1);
    }

    fn two_class_examples(per_class: usize, seed: u64) -> Vec<LabeledUtterance> {
        // Well separated Gaussian blobs in feature space, directly in the
        // shape the network consumes.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for c in 0..2usize {
            for i in 0..per_class {
                let t = rng.gen_range(12..=16);
                let mut x = Tensor2::zeros(t, 40);
                for r in 0..t {
                    for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                        let mean = if (j < 20) == (c == 0) { 1.2 } else { -1.2 };
                        *v = mean + datagen::sample_standard_normal(&mut rng) * 0.8;
                    }
                }
                out.push(LabeledUtterance {
                    utt_id: format!("c{c}-{i:03}"),
                    frames: x,
                    label: c,
                });
            }
        }
        out
    }

    #[test]
    fn training_separable_classes_reaches_high_holdout_accuracy() {
        let examples = two_class_examples(40, 6);
        let arch = DidArchConfig::toy().with_classes(2);
        let mut net = DidNetwork::build(arch, labels(2), 9).unwrap();
        let opts = TrainOptions {
            epochs: 2,
            holdout_frac: 0.2,
            seed: 42,
            ..TrainOptions::default()
        };
        let log = train(&mut net, &examples, &opts).unwrap();
        let last = log.epochs.last().unwrap();
        assert!(
            last.holdout_accuracy >= 0.95,
            "holdout accuracy {}",
            last.holdout_accuracy
        );
        assert!(last.holdout_loss < log.initial_holdout_loss);
        assert_eq!(log.epochs.len(), 2);
        assert_eq!(net.train_meta().steps, log.steps);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let examples = two_class_examples(10, 3);
        let arch = DidArchConfig::toy().with_classes(2);
        let mut net = DidNetwork::build(arch, labels(2), 1).unwrap();
        let before: Vec<Vec<f64>> =
            net.params().iter().map(|p| p.value().data().to_vec()).collect();
        let opts = TrainOptions {
            schedule: LrSchedule::new(0.0, 1.0, 1000).unwrap(),
            epochs: 2,
            holdout_frac: 0.1,
            seed: 5,
            ..TrainOptions::default()
        };
        let log = train(&mut net, &examples, &opts).unwrap();
        let after: Vec<Vec<f64>> =
            net.params().iter().map(|p| p.value().data().to_vec()).collect();
        assert_eq!(before, after);
        for e in &log.epochs {
            assert_eq!(e.holdout_loss, log.initial_holdout_loss);
        }
    }

    #[test]
    fn identical_runs_have_identical_loss_curves() {
        let examples = two_class_examples(12, 8);
        let arch = DidArchConfig::toy().with_classes(2);
        let opts = TrainOptions { epochs: 2, seed: 77, ..TrainOptions::default() };
        let mut n1 = DidNetwork::build(arch.clone(), labels(2), 4).unwrap();
        let mut n2 = DidNetwork::build(arch, labels(2), 4).unwrap();
        let l1 = train(&mut n1, &examples, &opts).unwrap();
        let l2 = train(&mut n2, &examples, &opts).unwrap();
        assert_eq!(l1, l2);
        for (pa, pb) in n1.params().iter().zip(n2.params().iter()) {
            assert_eq!(pa.value().data(), pb.value().data());
        }
    }

    #[test]
    fn training_input_validation() {
        let arch = DidArchConfig::toy().with_classes(2);
        let mut net = DidNetwork::build(arch, labels(2), 1).unwrap();
        let opts = TrainOptions::default();
        assert!(train(&mut net, &[], &opts).is_err());

        let bad_label = vec![LabeledUtterance {
            utt_id: "u".into(),
            frames: Tensor2::zeros(12, 40),
            label: 7,
        }];
        assert!(train(&mut net, &bad_label, &opts).unwrap_err().to_string().contains("label"));

        let short = vec![LabeledUtterance {
            utt_id: "u".into(),
            frames: Tensor2::zeros(5, 40),
            label: 0,
        }];
        assert!(train(&mut net, &short, &opts).is_err());
    }

    #[test]
    fn gradients_match_numerical_differences() {
        // Small stack, full coordinate coverage.
        let arch = DidArchConfig {
            input_dim: 6,
            conv_specs: vec![
                ConvSpec { kernel: 3, stride: 1, out_channels: 4 },
                ConvSpec { kernel: 2, stride: 2, out_channels: 5 },
            ],
            ff_sizes: vec![6, 4],
            n_classes: 3,
            width_multiplier: 1.0,
            pool_with_std: false,
        };
        let mut net = DidNetwork::build(arch, labels(3), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let examples: Vec<LabeledUtterance> = (0..3)
            .map(|i| LabeledUtterance {
                utt_id: format!("u{i}"),
                frames: random_frames(&mut rng, 9, 6),
                label: i,
            })
            .collect();
        let mut obj = XentObjective::new(&mut net, &examples);
        let report = grad_check(&mut obj, 200, 1e-5, 31).unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.didm");
        let examples = two_class_examples(10, 2);
        let arch = DidArchConfig::toy().with_classes(2);
        let mut net = DidNetwork::build(arch, labels(2), 5).unwrap();
        train(&mut net, &examples, &TrainOptions { epochs: 1, ..TrainOptions::default() })
            .unwrap();
        net.set_domains(vec!["a".into()]);
        net.save(&path).unwrap();

        let loaded = DidNetwork::load(&path).unwrap();
        assert_eq!(loaded.label_names(), net.label_names());
        assert_eq!(loaded.train_meta(), net.train_meta());
        // Saving the loaded model reproduces the container byte for byte.
        let path2 = dir.path().join("model2.didm");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        // And the loaded model scores deterministically.
        let s1 = loaded.forward_frames("u", &examples[0].frames).unwrap();
        let s2 = loaded.forward_frames("u", &examples[0].frames).unwrap();
        assert_eq!(s1, s2);

        // Sidecar tampering is caught.
        let side = sidecar_path(&path);
        let text = std::fs::read_to_string(&side).unwrap().replace("\"c1\"", "\"c0\"");
        std::fs::write(&side, text).unwrap();
        assert!(DidNetwork::load(&path).is_err());
    }

    #[test]
    fn scores_table_round_trip_and_format() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scores.tsv");
        let table = ScoresTable {
            label_names: vec!["c0".into(), "c1".into()],
            hidden_dim: 3,
            rows: vec![
                ScoreRow {
                    utt_id: "u1".into(),
                    o: vec![0.75, 0.25],
                    h: vec![0.0, 1.5, 0.125],
                },
                ScoreRow {
                    utt_id: "u2".into(),
                    o: vec![0.5, 0.5],
                    h: vec![2.0, 0.0, 0.25],
                },
            ],
        };
        table.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("utt_id\tc0\tc1\th_1\th_2\th_3\n"));
        // Nine significant digits in scientific notation.
        assert!(text.contains("7.50000000e-1"), "{text}");
        assert_eq!(ScoresTable::read(&path).unwrap(), table);

        // Without hidden columns.
        let bare = ScoresTable { hidden_dim: 0, rows: vec![], ..table.clone() };
        bare.write(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "utt_id\tc0\tc1\n");
        assert_eq!(ScoresTable::read(&path).unwrap(), bare);

        // Malformed rows are rejected.
        std::fs::write(&path, "utt_id\tc0\tc1\nu1\t0.5\n").unwrap();
        assert!(ScoresTable::read(&path).is_err());
        std::fs::write(&path, "utt_id\tc0\tc1\nu1\t0.5\tx\n").unwrap();
        assert!(ScoresTable::read(&path).is_err());
        std::fs::write(&path, "utt_id\tc0\tc1\nu1\t0.5\t0.5\nu1\t0.5\t0.5\n").unwrap();
        assert!(ScoresTable::read(&path).is_err());
    }

    #[test]
    fn score_manifest_preserves_order_and_bytes() {
        let mut spec = CorpusSpec::default_corpus(2, 31);
        for d in &mut spec.domains {
            d.train_per_class = vec![2; 5];
            d.test_per_class = vec![1; 5];
            d.min_frames = 12;
            d.max_frames = 14;
        }
        let dir = tempdir().unwrap();
        let manifest = datagen::generate(&spec, dir.path()).unwrap();
        let net = DidNetwork::build(DidArchConfig::toy(), labels(5), 2).unwrap();

        let rows = manifest.select(Split::Test, None);
        let table = score_manifest(&net, dir.path(), &rows, true).unwrap();
        assert_eq!(table.rows.len(), rows.len());
        for (r, row) in table.rows.iter().zip(&rows) {
            assert_eq!(r.utt_id, row.utt_id);
            assert_eq!(r.h.len(), 32);
        }

        let p1 = dir.path().join("s1.tsv");
        let p2 = dir.path().join("s2.tsv");
        table.write(&p1).unwrap();
        score_manifest(&net, dir.path(), &rows, true).unwrap().write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // Empty selection still writes a header.
        let empty = score_manifest(&net, dir.path(), &[], false).unwrap();
        empty.write(&p1).unwrap();
        assert_eq!(std::fs::read_to_string(&p1).unwrap(), "utt_id\tc0\tc1\tc2\tc3\tc4\n");

        // A missing feature file is reported by name before any scoring.
        std::fs::remove_file(dir.path().join(&rows[3].path)).unwrap();
        let err = score_manifest(&net, dir.path(), &rows, false).unwrap_err().to_string();
        assert!(err.contains(&rows[3].path), "{err}");
    }
}
