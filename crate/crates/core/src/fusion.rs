//! Combination strategies over frozen single-domain systems: logistic
//! regression score fusion, a fully connected fusion layer, and domain
//! attentive fusion in its output-based and hidden-based forms.
//!
//! Every fusion model consumes per-system utterance scores, never the base
//! networks themselves, so the freezing contract holds by construction: the
//! base model files cannot change during fusion training. Saved fusion
//! models carry the content hashes of their base models and refuse to run
//! against different ones.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ManifestRow;
use crate::derive_seed;
use crate::didmodel::{check_labels, ScoreRow, ScoresTable};
use crate::error::{DidError, Result};
use crate::metrics::argmax;
use crate::nnet::kernels::softmax;
use crate::nnet::{
    glorot_uniform, read_container, sha256_hex_of_file, write_container, Differentiable,
    LrSchedule, NamedTensor, ParamSet, Tensor2,
};

/// Default dimensionality of the attention projection.
pub const DEFAULT_ATTENTION_DIM: usize = 10;

/// Hidden width of the fully connected fusion layer.
pub const FUSION_LAYER_HIDDEN: usize = 600;

/// Posteriors are floored before logs in logistic-regression fusion.
pub const LOG_FLOOR: f64 = 1e-12;

/// Container format tag for all saved fusion models.
pub const FUSION_FORMAT: &str = "did-fusion";

/// Which per-system vector feeds the attention scoring function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Energies from the softmax posterior o_d.
    Output,
    /// Energies from the hidden embedding h_d.
    Hidden,
}

impl FusionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionVariant::Output => "output",
            FusionVariant::Hidden => "hidden",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "output" => Some(FusionVariant::Output),
            "hidden" => Some(FusionVariant::Hidden),
            _ => None,
        }
    }
}

/// One domain's attention scoring function: e = v . tanh(W x + b).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    /// m x K projection.
    pub w: Tensor2,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
    pub input_kind: FusionVariant,
}

impl AttentionHead {
    pub fn new(w: Tensor2, b: Vec<f64>, v: Vec<f64>, input_kind: FusionVariant) -> Result<Self> {
        if w.rows() == 0 || w.cols() == 0 {
            return Err(DidError::Shape("attention head needs a nonempty projection".into()));
        }
        if b.len() != w.rows() || v.len() != w.rows() {
            return Err(DidError::Shape(format!(
                "attention head with m={} has b of {} and v of {}",
                w.rows(),
                b.len(),
                v.len()
            )));
        }
        Ok(AttentionHead { w, b, v, input_kind })
    }

    pub fn m(&self) -> usize {
        self.w.rows()
    }

    pub fn input_width(&self) -> usize {
        self.w.cols()
    }
}

fn energy_parts(w: &Tensor2, b: &[f64], v: &[f64], x: &[f64]) -> (Vec<f64>, f64) {
    let m = w.rows();
    let mut t = Vec::with_capacity(m);
    let mut e = 0.0;
    for i in 0..m {
        let z: f64 = w.row(i).iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>() + b[i];
        let ti = z.tanh();
        e += v[i] * ti;
        t.push(ti);
    }
    (t, e)
}

/// The scoring function of one head: e = v . tanh(W x + b).
pub fn attention_energy(head: &AttentionHead, x: &[f64]) -> Result<f64> {
    if x.len() != head.input_width() {
        return Err(DidError::Shape(format!(
            "attention input of {} values, head expects {}",
            x.len(),
            head.input_width()
        )));
    }
    Ok(energy_parts(&head.w, &head.b, &head.v, x).1)
}

/// Softmax over domain energies, computed with max subtraction. Energies of
/// negative infinity contribute a weight of exactly zero.
pub fn attention_weights(energies: &[f64]) -> Result<Vec<f64>> {
    if energies.is_empty() {
        return Err(DidError::Shape("no energies to normalise".into()));
    }
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(DidError::Shape("all attention energies are non-finite".into()));
    }
    let exps: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Weighted concatenation: block d of the result is alpha_d * o_d.
pub fn attentive_fuse(scores: &[Vec<f64>], alphas: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != alphas.len() || scores.is_empty() {
        return Err(DidError::Shape(format!(
            "{} score blocks for {} weights",
            scores.len(),
            alphas.len()
        )));
    }
    let l = scores[0].len();
    let mut out = Vec::with_capacity(scores.len() * l);
    for (o, &a) in scores.iter().zip(alphas) {
        if o.len() != l {
            return Err(DidError::Shape(format!(
                "score blocks of mixed lengths {} and {}",
                l,
                o.len()
            )));
        }
        out.extend(o.iter().map(|s| a * s));
    }
    Ok(out)
}

/// One utterance's aligned inputs for fusion: the per-system posteriors,
/// the per-system embeddings (possibly empty), and the label index.
#[derive(Clone, Debug)]
pub struct FusionExample {
    pub utt_id: String,
    pub per_system_o: Vec<Vec<f64>>,
    pub per_system_h: Vec<Vec<f64>>,
    pub label: usize,
}

/// Joins N score tables over a manifest row list, preserving row order.
/// Every system must have scored every utterance with the same label set.
pub fn align_scores(tables: &[ScoresTable], rows: &[&ManifestRow]) -> Result<Vec<FusionExample>> {
    if tables.len() < 2 {
        return Err(DidError::Config(format!(
            "fusion needs at least 2 systems, got {}",
            tables.len()
        )));
    }
    let label_names = &tables[0].label_names;
    for (i, t) in tables.iter().enumerate().skip(1) {
        if &t.label_names != label_names {
            return Err(DidError::Config(format!(
                "system {} scores use labels ({}) but system 1 uses ({})",
                i + 1,
                t.label_names.join(", "),
                label_names.join(", ")
            )));
        }
    }
    let maps: Vec<HashMap<&str, usize>> = tables
        .iter()
        .map(|t| {
            t.rows
                .iter()
                .enumerate()
                .map(|(i, r)| (r.utt_id.as_str(), i))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let label = label_names
            .iter()
            .position(|l| *l == row.dialect)
            .ok_or_else(|| {
                DidError::Config(format!(
                    "utterance '{}' has dialect '{}' outside the scored label set",
                    row.utt_id, row.dialect
                ))
            })?;
        let mut per_system_o = Vec::with_capacity(tables.len());
        let mut per_system_h = Vec::with_capacity(tables.len());
        for (i, (t, map)) in tables.iter().zip(&maps).enumerate() {
            let idx = *map.get(row.utt_id.as_str()).ok_or_else(|| {
                DidError::Config(format!(
                    "utterance '{}' missing from system {} scores",
                    row.utt_id,
                    i + 1
                ))
            })?;
            per_system_o.push(t.rows[idx].o.clone());
            per_system_h.push(t.rows[idx].h.clone());
        }
        out.push(FusionExample {
            utt_id: row.utt_id.clone(),
            per_system_o,
            per_system_h,
            label,
        });
    }
    Ok(out)
}

/// Everything a forward pass produces, for inspection and tests.
#[derive(Clone, Debug)]
pub struct FusionOutcome {
    pub probs: Vec<f64>,
    pub alphas: Vec<f64>,
    pub fused: Vec<f64>,
    pub energies: Vec<f64>,
}

/// A gradient-trained fusion model over per-system scores.
pub trait ScoreFusionModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward_probs(&self, ex: &FusionExample) -> Result<Vec<f64>>;
    /// Accumulates gradients of this example's cross-entropy; returns the
    /// loss and the posterior.
    fn backward_example(&mut self, ex: &FusionExample) -> Result<(f64, Vec<f64>)>;
}

/// Domain attentive fusion: per-domain attention heads, softmax weights,
/// weighted concatenation, then a dense classifier.
#[derive(Debug)]
pub struct AttentiveFusionModel {
    variant: FusionVariant,
    m: usize,
    domain_order: Vec<String>,
    label_names: Vec<String>,
    input_width: usize,
    params: ParamSet,
    /// Diagnostic hook: fixes a head's energy instead of computing it.
    energy_overrides: Vec<Option<f64>>,
    pub base_hashes: Vec<String>,
}

fn check_domains(domain_order: &[String]) -> Result<()> {
    if domain_order.len() < 2 {
        return Err(DidError::Config(format!(
            "fusion needs at least 2 domain systems, got {}",
            domain_order.len()
        )));
    }
    for (i, d) in domain_order.iter().enumerate() {
        if d.is_empty() {
            return Err(DidError::Config("empty domain id".into()));
        }
        if domain_order[..i].contains(d) {
            return Err(DidError::Config(format!("duplicate domain id '{d}'")));
        }
    }
    Ok(())
}

impl AttentiveFusionModel {
    /// Builds an untrained model. For the output variant the head input
    /// width is the label count; for the hidden variant it is `hidden_dim`.
    pub fn new(
        variant: FusionVariant,
        m: usize,
        domain_order: Vec<String>,
        label_names: Vec<String>,
        hidden_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        check_domains(&domain_order)?;
        check_labels(&label_names, label_names.len())?;
        let l = label_names.len();
        if l < 2 {
            return Err(DidError::Config("need at least 2 labels".into()));
        }
        if m == 0 {
            return Err(DidError::Config("attention dimension m must be at least 1".into()));
        }
        let input_width = match variant {
            FusionVariant::Output => l,
            FusionVariant::Hidden => {
                if hidden_dim == 0 {
                    return Err(DidError::Config(
                        "hidden variant needs a positive embedding width".into(),
                    ));
                }
                hidden_dim
            }
        };
        let n = domain_order.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for d in 0..n {
            params.add(
                &format!("head{d}.w"),
                &[m, input_width],
                Tensor2::from_vec(m, input_width, glorot_uniform(&mut rng, input_width, m, m * input_width))?,
            )?;
            params.add(&format!("head{d}.b"), &[m], Tensor2::zeros(1, m))?;
            // v starts at zero so every head's energy is zero and attention
            // opens exactly uniform. A random v can saturate the softmax
            // toward one domain before training starts, and the shrinking
            // alpha gradient then locks that head in.
            params.add(&format!("head{d}.v"), &[m], Tensor2::zeros(1, m))?;
        }
        params.add(
            "cls.w",
            &[l, n * l],
            Tensor2::from_vec(l, n * l, glorot_uniform(&mut rng, n * l, l, l * n * l))?,
        )?;
        params.add("cls.b", &[l], Tensor2::zeros(1, l))?;
        Ok(AttentiveFusionModel {
            variant,
            m,
            domain_order,
            label_names,
            input_width,
            params,
            energy_overrides: vec![None; n],
            base_hashes: Vec::new(),
        })
    }

    pub fn variant(&self) -> FusionVariant {
        self.variant
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn domain_order(&self) -> &[String] {
        &self.domain_order
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn n_systems(&self) -> usize {
        self.domain_order.len()
    }

    /// Copies one head out of the parameter set.
    pub fn head(&self, d: usize) -> AttentionHead {
        AttentionHead {
            w: self.params.value(&format!("head{d}.w")).clone(),
            b: self.params.value(&format!("head{d}.b")).data().to_vec(),
            v: self.params.value(&format!("head{d}.v")).data().to_vec(),
            input_kind: self.variant,
        }
    }

    /// Fixes head `d`'s energy to a constant (or restores normal scoring
    /// with `None`). `f64::NEG_INFINITY` silences the domain entirely.
    pub fn set_energy_override(&mut self, d: usize, energy: Option<f64>) {
        self.energy_overrides[d] = energy;
    }

    fn attention_inputs<'e>(&self, ex: &'e FusionExample) -> Result<&'e [Vec<f64>]> {
        match self.variant {
            FusionVariant::Output => Ok(&ex.per_system_o),
            FusionVariant::Hidden => {
                if ex.per_system_h.iter().any(|h| h.is_empty()) {
                    return Err(DidError::Config(format!(
                        "utterance '{}': hidden-variant fusion needs hidden activations in every score file",
                        ex.utt_id
                    )));
                }
                Ok(&ex.per_system_h)
            }
        }
    }

    fn check_example(&self, ex: &FusionExample) -> Result<()> {
        let n = self.n_systems();
        let l = self.label_names.len();
        if ex.per_system_o.len() != n {
            return Err(DidError::Shape(format!(
                "utterance '{}': {} systems, model fuses {}",
                ex.utt_id,
                ex.per_system_o.len(),
                n
            )));
        }
        for o in &ex.per_system_o {
            if o.len() != l {
                return Err(DidError::Shape(format!(
                    "utterance '{}': posterior of {} values, expected {}",
                    ex.utt_id,
                    o.len(),
                    l
                )));
            }
        }
        let xs = self.attention_inputs(ex)?;
        for x in xs {
            if x.len() != self.input_width {
                return Err(DidError::Shape(format!(
                    "utterance '{}': attention input of {} values, expected {}",
                    ex.utt_id,
                    x.len(),
                    self.input_width
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass with intermediates exposed.
    pub fn forward_detail(&self, ex: &FusionExample) -> Result<FusionOutcome> {
        self.check_example(ex)?;
        let xs = self.attention_inputs(ex)?;
        let energies: Vec<f64> = (0..self.n_systems())
            .map(|d| match self.energy_overrides[d] {
                Some(e) => e,
                None => {
                    energy_parts(
                        self.params.value(&format!("head{d}.w")),
                        self.params.value(&format!("head{d}.b")).data(),
                        self.params.value(&format!("head{d}.v")).data(),
                        &xs[d],
                    )
                    .1
                }
            })
            .collect();
        let alphas = attention_weights(&energies)?;
        let fused = attentive_fuse(&ex.per_system_o, &alphas)?;
        let w = self.params.value("cls.w");
        let b = self.params.value("cls.b").data();
        let logits: Vec<f64> = (0..self.label_names.len())
            .map(|c| w.row(c).iter().zip(&fused).map(|(wv, f)| wv * f).sum::<f64>() + b[c])
            .collect();
        Ok(FusionOutcome {
            probs: softmax(&logits),
            alphas,
            fused,
            energies,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.params.to_named_tensors())?;
        write_sidecar(path, &FusionSidecar {
            format: FUSION_FORMAT.into(),
            kind: "attentive".into(),
            variant: Some(self.variant),
            m: Some(self.m),
            domain_order: self.domain_order.clone(),
            label_names: self.label_names.clone(),
            input_width: Some(self.input_width),
            base_hashes: self.base_hashes.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sc = read_sidecar(path, "attentive")?;
        let variant = sc.variant.ok_or_else(|| bad_sidecar(path, "missing variant"))?;
        let m = sc.m.ok_or_else(|| bad_sidecar(path, "missing m"))?;
        let input_width = sc.input_width.ok_or_else(|| bad_sidecar(path, "missing input width"))?;
        let hidden_dim = match variant {
            FusionVariant::Output => 0,
            FusionVariant::Hidden => input_width,
        };
        let mut model = AttentiveFusionModel::new(
            variant,
            m,
            sc.domain_order,
            sc.label_names,
            hidden_dim,
            0,
        )?;
        if model.input_width != input_width {
            return Err(bad_sidecar(path, "input width inconsistent with variant"));
        }
        let loaded = ParamSet::from_named_tensors(read_container(path)?)?;
        replace_params(&mut model.params, loaded, path)?;
        model.base_hashes = sc.base_hashes;
        Ok(model)
    }
}

impl ScoreFusionModel for AttentiveFusionModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_probs(&self, ex: &FusionExample) -> Result<Vec<f64>> {
        Ok(self.forward_detail(ex)?.probs)
    }

    fn backward_example(&mut self, ex: &FusionExample) -> Result<(f64, Vec<f64>)> {
        self.check_example(ex)?;
        let n = self.n_systems();
        let l = self.label_names.len();
        let xs = self.attention_inputs(ex)?.to_vec();

        // Forward, keeping the tanh activations for the chain rule.
        let mut tanhs: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        let mut energies = Vec::with_capacity(n);
        for d in 0..n {
            match self.energy_overrides[d] {
                Some(e) => {
                    tanhs.push(None);
                    energies.push(e);
                }
                None => {
                    let (t, e) = energy_parts(
                        self.params.value(&format!("head{d}.w")),
                        self.params.value(&format!("head{d}.b")).data(),
                        self.params.value(&format!("head{d}.v")).data(),
                        &xs[d],
                    );
                    tanhs.push(Some(t));
                    energies.push(e);
                }
            }
        }
        let alphas = attention_weights(&energies)?;
        let fused = attentive_fuse(&ex.per_system_o, &alphas)?;
        let w = self.params.value("cls.w");
        let b = self.params.value("cls.b").data();
        let logits: Vec<f64> = (0..l)
            .map(|c| w.row(c).iter().zip(&fused).map(|(wv, f)| wv * f).sum::<f64>() + b[c])
            .collect();
        let (loss, probs) = crate::nnet::kernels::softmax_xent(&logits, ex.label)?;

        // Backward. du is the gradient at the logits.
        let mut du = probs.clone();
        du[ex.label] -= 1.0;
        let mut g_cls_w = vec![0.0; l * n * l];
        let mut g_fused = vec![0.0; n * l];
        for c in 0..l {
            let wrow = w.row(c);
            for j in 0..n * l {
                g_cls_w[c * n * l + j] += du[c] * fused[j];
                g_fused[j] += wrow[j] * du[c];
            }
        }
        // Through the weighted concatenation into the weights only; the
        // base posteriors are frozen inputs.
        let d_alpha: Vec<f64> = (0..n)
            .map(|d| {
                g_fused[d * l..(d + 1) * l]
                    .iter()
                    .zip(&ex.per_system_o[d])
                    .map(|(g, o)| g * o)
                    .sum()
            })
            .collect();
        // Softmax Jacobian from alpha back to the energies.
        let dot: f64 = alphas.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
        let d_energy: Vec<f64> = (0..n)
            .map(|d| match self.energy_overrides[d] {
                // An overridden energy is a constant, not a function of the
                // head, so no gradient flows into that head.
                Some(_) => 0.0,
                None => alphas[d] * (d_alpha[d] - dot),
            })
            .collect();

        self.params.accumulate("cls.w", &g_cls_w);
        self.params.accumulate("cls.b", &du);
        for d in 0..n {
            let Some(t) = &tanhs[d] else { continue };
            let de = d_energy[d];
            let v = self.params.value(&format!("head{d}.v")).data().to_vec();
            let m = self.m;
            let k = self.input_width;
            let mut g_v = vec![0.0; m];
            let mut g_b = vec![0.0; m];
            let mut g_w = vec![0.0; m * k];
            for i in 0..m {
                g_v[i] = de * t[i];
                let dz = de * v[i] * (1.0 - t[i] * t[i]);
                g_b[i] = dz;
                for (j, xv) in xs[d].iter().enumerate() {
                    g_w[i * k + j] = dz * xv;
                }
            }
            self.params.accumulate(&format!("head{d}.v"), &g_v);
            self.params.accumulate(&format!("head{d}.b"), &g_b);
            self.params.accumulate(&format!("head{d}.w"), &g_w);
        }
        Ok((loss, probs))
    }
}

/// Fully connected fusion layer: dense(N*L -> 600) + ReLU + dense(600 -> L)
/// + softmax over the concatenated posteriors.
#[derive(Debug)]
pub struct FusionLayerModel {
    domain_order: Vec<String>,
    label_names: Vec<String>,
    hidden: usize,
    params: ParamSet,
    pub base_hashes: Vec<String>,
}

impl FusionLayerModel {
    pub fn new(domain_order: Vec<String>, label_names: Vec<String>, seed: u64) -> Result<Self> {
        check_domains(&domain_order)?;
        check_labels(&label_names, label_names.len())?;
        let l = label_names.len();
        if l < 2 {
            return Err(DidError::Config("need at least 2 labels".into()));
        }
        let n = domain_order.len();
        let input = n * l;
        let hidden = FUSION_LAYER_HIDDEN;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.add(
            "fc1.w",
            &[hidden, input],
            Tensor2::from_vec(hidden, input, glorot_uniform(&mut rng, input, hidden, hidden * input))?,
        )?;
        params.add("fc1.b", &[hidden], Tensor2::zeros(1, hidden))?;
        params.add(
            "fc2.w",
            &[l, hidden],
            Tensor2::from_vec(l, hidden, glorot_uniform(&mut rng, hidden, l, l * hidden))?,
        )?;
        params.add("fc2.b", &[l], Tensor2::zeros(1, l))?;
        Ok(FusionLayerModel {
            domain_order,
            label_names,
            hidden,
            params,
            base_hashes: Vec::new(),
        })
    }

    pub fn domain_order(&self) -> &[String] {
        &self.domain_order
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    fn concat_input(&self, ex: &FusionExample) -> Result<Vec<f64>> {
        let n = self.domain_order.len();
        let l = self.label_names.len();
        if ex.per_system_o.len() != n || ex.per_system_o.iter().any(|o| o.len() != l) {
            return Err(DidError::Shape(format!(
                "utterance '{}': fusion layer expects {n} posteriors of {l} values",
                ex.utt_id
            )));
        }
        Ok(ex.per_system_o.concat())
    }

    fn forward_parts(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let r = {
            let mut a = crate::nnet::kernels::dense(
                x,
                self.params.value("fc1.w"),
                self.params.value("fc1.b").data(),
            )
            .expect("widths checked");
            crate::nnet::kernels::relu_inplace(&mut a);
            a
        };
        let logits = crate::nnet::kernels::dense(
            &r,
            self.params.value("fc2.w"),
            self.params.value("fc2.b").data(),
        )
        .expect("widths checked");
        let probs = softmax(&logits);
        (r, logits, probs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.params.to_named_tensors())?;
        write_sidecar(path, &FusionSidecar {
            format: FUSION_FORMAT.into(),
            kind: "fusion_layer".into(),
            variant: None,
            m: None,
            domain_order: self.domain_order.clone(),
            label_names: self.label_names.clone(),
            input_width: None,
            base_hashes: self.base_hashes.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sc = read_sidecar(path, "fusion_layer")?;
        let mut model = FusionLayerModel::new(sc.domain_order, sc.label_names, 0)?;
        let loaded = ParamSet::from_named_tensors(read_container(path)?)?;
        replace_params(&mut model.params, loaded, path)?;
        model.base_hashes = sc.base_hashes;
        Ok(model)
    }
}

impl ScoreFusionModel for FusionLayerModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_probs(&self, ex: &FusionExample) -> Result<Vec<f64>> {
        let x = self.concat_input(ex)?;
        Ok(self.forward_parts(&x).2)
    }

    fn backward_example(&mut self, ex: &FusionExample) -> Result<(f64, Vec<f64>)> {
        let x = self.concat_input(ex)?;
        let (r, logits, _) = self.forward_parts(&x);
        let (loss, probs) = crate::nnet::kernels::softmax_xent(&logits, ex.label)?;
        let mut du = probs.clone();
        du[ex.label] -= 1.0;

        let l = self.label_names.len();
        let h = self.hidden;
        let mut g_fc2_w = Tensor2::zeros(l, h);
        let mut g_fc2_b = vec![0.0; l];
        let mut g_r = vec![0.0; h];
        crate::nnet::kernels::dense_backward(
            &r,
            self.params.value("fc2.w"),
            &du,
            &mut g_r,
            &mut g_fc2_w,
            &mut g_fc2_b,
        )?;
        crate::nnet::kernels::relu_backward_inplace(&r, &mut g_r);
        let mut g_fc1_w = Tensor2::zeros(h, x.len());
        let mut g_fc1_b = vec![0.0; h];
        let mut g_x = vec![0.0; x.len()];
        crate::nnet::kernels::dense_backward(
            &x,
            self.params.value("fc1.w"),
            &g_r,
            &mut g_x,
            &mut g_fc1_w,
            &mut g_fc1_b,
        )?;
        self.params.accumulate("fc2.w", g_fc2_w.data());
        self.params.accumulate("fc2.b", &g_fc2_b);
        self.params.accumulate("fc1.w", g_fc1_w.data());
        self.params.accumulate("fc1.b", &g_fc1_b);
        Ok((loss, probs))
    }
}

/// Hyperparameters for gradient-trained fusion models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionTrainOptions {
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FusionTrainOptions {
    fn default() -> Self {
        FusionTrainOptions {
            schedule: LrSchedule::speech_default(),
            epochs: 10,
            batch_size: 1,
            seed: 0,
        }
    }
}

/// One epoch of a fusion training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains any gradient-based fusion model with SGD over its examples.
/// The base systems are untouched; only score vectors are read.
pub fn train_score_fusion<M: ScoreFusionModel>(
    model: &mut M,
    examples: &[FusionExample],
    opts: &FusionTrainOptions,
) -> Result<Vec<FusionEpoch>> {
    if examples.is_empty() {
        return Err(DidError::Config("empty fusion training set".into()));
    }
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(DidError::Config("epochs and batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step: u64 = 0;
    let mut log = Vec::with_capacity(opts.epochs);
    model.params_mut().zero_grads();
    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &format!("epoch:{epoch}")));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut in_batch = 0usize;
        for (seen, &i) in order.iter().enumerate() {
            let ex = &examples[i];
            let (loss, probs) = model.backward_example(ex)?;
            loss_sum += loss;
            if argmax(&probs) == ex.label {
                correct += 1;
            }
            in_batch += 1;
            if in_batch == opts.batch_size || seen + 1 == order.len() {
                let params = model.params_mut();
                params.scale_grads(1.0 / in_batch as f64);
                params.sgd_step(opts.schedule.lr_at(step));
                params.zero_grads();
                step += 1;
                in_batch = 0;
            }
        }
        log.push(FusionEpoch {
            epoch,
            loss: loss_sum / examples.len() as f64,
            accuracy: correct as f64 / examples.len() as f64,
        });
    }
    Ok(log)
}

/// Mean cross-entropy objective over fusion examples, for gradient checks.
pub struct FusionObjective<'a, M: ScoreFusionModel> {
    model: &'a mut M,
    examples: &'a [FusionExample],
}

impl<'a, M: ScoreFusionModel> FusionObjective<'a, M> {
    pub fn new(model: &'a mut M, examples: &'a [FusionExample]) -> Self {
        FusionObjective { model, examples }
    }
}

impl<M: ScoreFusionModel> Differentiable for FusionObjective<'_, M> {
    fn params(&self) -> &ParamSet {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.model.params_mut()
    }

    fn loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for ex in self.examples {
            let probs = self.model.forward_probs(ex)?;
            total += -probs[ex.label].max(LOG_FLOOR).ln();
        }
        Ok(total / self.examples.len() as f64)
    }

    fn accumulate_grads(&mut self) -> Result<f64> {
        let mut total = 0.0;
        for ex in self.examples {
            total += self.model.backward_example(ex)?.0;
        }
        let n = self.examples.len() as f64;
        self.model.params_mut().scale_grads(1.0 / n);
        Ok(total / n)
    }
}

/// Logistic-regression score fusion: softmax over a weighted sum of
/// per-system log posteriors plus a per-class offset.
#[derive(Clone, Debug, PartialEq)]
pub struct LrFusionModel {
    domain_order: Vec<String>,
    label_names: Vec<String>,
    /// One scalar weight per system.
    pub weights: Vec<f64>,
    /// One offset per class.
    pub offsets: Vec<f64>,
    pub base_hashes: Vec<String>,
}

impl LrFusionModel {
    pub fn new(domain_order: Vec<String>, label_names: Vec<String>) -> Result<Self> {
        check_domains(&domain_order)?;
        check_labels(&label_names, label_names.len())?;
        if label_names.len() < 2 {
            return Err(DidError::Config("need at least 2 labels".into()));
        }
        let n = domain_order.len();
        let l = label_names.len();
        Ok(LrFusionModel {
            domain_order,
            label_names,
            weights: vec![1.0; n],
            offsets: vec![0.0; l],
            base_hashes: Vec::new(),
        })
    }

    pub fn domain_order(&self) -> &[String] {
        &self.domain_order
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    fn logits(&self, per_system_o: &[Vec<f64>]) -> Result<Vec<f64>> {
        let l = self.label_names.len();
        if per_system_o.len() != self.weights.len()
            || per_system_o.iter().any(|o| o.len() != l)
        {
            return Err(DidError::Shape(format!(
                "logistic fusion expects {} posteriors of {} values",
                self.weights.len(),
                l
            )));
        }
        let mut logits = self.offsets.clone();
        for (o, &w) in per_system_o.iter().zip(&self.weights) {
            for (slot, &p) in logits.iter_mut().zip(o) {
                *slot += w * p.max(LOG_FLOOR).ln();
            }
        }
        Ok(logits)
    }

    /// Fused posterior for one utterance's aligned scores.
    pub fn apply(&self, per_system_o: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(per_system_o)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &[
            NamedTensor {
                name: "weights".into(),
                dims: vec![self.weights.len()],
                data: self.weights.clone(),
            },
            NamedTensor {
                name: "offsets".into(),
                dims: vec![self.offsets.len()],
                data: self.offsets.clone(),
            },
        ])?;
        write_sidecar(path, &FusionSidecar {
            format: FUSION_FORMAT.into(),
            kind: "lr".into(),
            variant: None,
            m: None,
            domain_order: self.domain_order.clone(),
            label_names: self.label_names.clone(),
            input_width: None,
            base_hashes: self.base_hashes.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sc = read_sidecar(path, "lr")?;
        let mut model = LrFusionModel::new(sc.domain_order, sc.label_names)?;
        let tensors = read_container(path)?;
        for t in tensors {
            match t.name.as_str() {
                "weights" if t.data.len() == model.weights.len() => model.weights = t.data,
                "offsets" if t.data.len() == model.offsets.len() => model.offsets = t.data,
                _ => {
                    return Err(DidError::ModelFile {
                        path: path.into(),
                        reason: format!("unexpected tensor '{}'", t.name),
                    })
                }
            }
        }
        model.base_hashes = sc.base_hashes;
        Ok(model)
    }
}

/// Mean log-likelihood of the fused posteriors and its gradient with
/// respect to (weights, offsets).
pub fn lr_objective(
    model: &LrFusionModel,
    examples: &[FusionExample],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = model.weights.len();
    let l = model.offsets.len();
    let mut ll = 0.0;
    let mut g_w = vec![0.0; n];
    let mut g_c = vec![0.0; l];
    for ex in examples {
        let probs = model.apply(&ex.per_system_o)?;
        ll += probs[ex.label].max(LOG_FLOOR).ln();
        for c in 0..l {
            let resid = if c == ex.label { 1.0 - probs[c] } else { -probs[c] };
            g_c[c] += resid;
            for d in 0..n {
                g_w[d] += resid * ex.per_system_o[d][c].max(LOG_FLOOR).ln();
            }
        }
    }
    let scale = 1.0 / examples.len() as f64;
    ll *= scale;
    g_w.iter_mut().for_each(|g| *g *= scale);
    g_c.iter_mut().for_each(|g| *g *= scale);
    Ok((ll, g_w, g_c))
}

/// Gradient-norm tolerance at which LR fusion training stops.
pub const LR_FUSION_TOLERANCE: f64 = 1e-7;

/// Fits the logistic-regression fusion by gradient ascent on the mean
/// log-likelihood until the gradient norm falls below
/// [`LR_FUSION_TOLERANCE`].
///
/// Each coordinate carries its own step size, grown geometrically while its
/// gradient keeps one sign and halved when the sign flips. The curvature of
/// this objective is wildly anisotropic: floored log-posteriors span
/// [ln 1e-12, 0], and a separable calibration set puts the maximum at
/// infinite weights along a ray the likelihood approaches flatly. A single
/// shared step crawls in both situations; per-coordinate adaptation walks
/// the flat ray geometrically and still settles interior optima.
pub fn lr_fusion_train(model: &mut LrFusionModel, examples: &[FusionExample]) -> Result<()> {
    if examples.is_empty() {
        return Err(DidError::Config("empty calibration set".into()));
    }
    let first = examples[0].label;
    if examples.iter().all(|e| e.label == first) {
        return Err(DidError::Config(
            "calibration set contains a single class; logistic regression is degenerate".into(),
        ));
    }
    let n = model.weights.len();
    let mut steps = vec![0.1f64; n + model.offsets.len()];
    let mut prev = vec![0.0f64; steps.len()];
    for _ in 0..200_000 {
        let (_, g_w, g_c) = lr_objective(model, examples)?;
        let norm = (g_w.iter().chain(&g_c).map(|g| g * g).sum::<f64>()).sqrt();
        if norm <= LR_FUSION_TOLERANCE {
            return Ok(());
        }
        for (i, &g) in g_w.iter().chain(&g_c).enumerate() {
            // A sign flip means the last move overshot this coordinate:
            // halve its step and sit out one update so the adaptation
            // restarts from fresh gradient information.
            let mut g = g;
            if g * prev[i] > 0.0 {
                steps[i] = (steps[i] * 1.2).min(1e4);
            } else if g * prev[i] < 0.0 {
                steps[i] = (steps[i] * 0.5).max(1e-12);
                g = 0.0;
            }
            let delta = if g > 0.0 {
                steps[i]
            } else if g < 0.0 {
                -steps[i]
            } else {
                0.0
            };
            if i < n {
                model.weights[i] += delta;
            } else {
                model.offsets[i - n] += delta;
            }
            prev[i] = g;
        }
    }
    Err(DidError::Training(
        "logistic-regression fusion did not converge".into(),
    ))
}

/// Applies a fusion posterior function over aligned examples, producing a
/// scores table in manifest order (no hidden columns).
pub fn apply_to_table<F>(
    label_names: &[String],
    examples: &[FusionExample],
    mut posterior: F,
) -> Result<ScoresTable>
where
    F: FnMut(&FusionExample) -> Result<Vec<f64>>,
{
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        rows.push(ScoreRow {
            utt_id: ex.utt_id.clone(),
            o: posterior(ex)?,
            h: Vec::new(),
        });
    }
    Ok(ScoresTable {
        label_names: label_names.to_vec(),
        hidden_dim: 0,
        rows,
    })
}

/// Compares recorded base-model hashes against the model files on disk.
pub fn verify_base_hashes(expected: &[String], paths: &[PathBuf]) -> Result<()> {
    if expected.len() != paths.len() {
        return Err(DidError::Config(format!(
            "fusion model records {} base models, {} provided",
            expected.len(),
            paths.len()
        )));
    }
    for (hash, path) in expected.iter().zip(paths) {
        let got = sha256_hex_of_file(path)?;
        if &got != hash {
            return Err(DidError::Config(format!(
                "base model '{}' does not match the one this fusion model was trained on",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Content hashes for a list of base model files.
pub fn hash_files(paths: &[PathBuf]) -> Result<Vec<String>> {
    paths.iter().map(|p| sha256_hex_of_file(p)).collect()
}

#[derive(Serialize, Deserialize)]
struct FusionSidecar {
    format: String,
    kind: String,
    variant: Option<FusionVariant>,
    m: Option<usize>,
    domain_order: Vec<String>,
    label_names: Vec<String>,
    input_width: Option<usize>,
    base_hashes: Vec<String>,
}

fn bad_sidecar(path: &Path, reason: &str) -> DidError {
    DidError::ModelFile {
        path: crate::didmodel::sidecar_path(path),
        reason: reason.to_string(),
    }
}

fn write_sidecar(path: &Path, sc: &FusionSidecar) -> Result<()> {
    let side = crate::didmodel::sidecar_path(path);
    let mut json = serde_json::to_string_pretty(sc).expect("sidecar serialises");
    json.push('\n');
    std::fs::write(&side, json).map_err(|e| DidError::io(&side, e))
}

fn read_sidecar(path: &Path, want_kind: &str) -> Result<FusionSidecar> {
    let side = crate::didmodel::sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| DidError::io(&side, e))?;
    let sc: FusionSidecar = serde_json::from_str(&text).map_err(|e| DidError::ModelFile {
        path: side.clone(),
        reason: format!("bad sidecar: {e}"),
    })?;
    if sc.format != FUSION_FORMAT {
        return Err(bad_sidecar(path, &format!("format '{}' is not '{FUSION_FORMAT}'", sc.format)));
    }
    if sc.kind != want_kind {
        return Err(bad_sidecar(
            path,
            &format!("fusion kind '{}' is not '{want_kind}'", sc.kind),
        ));
    }
    Ok(sc)
}

/// Swaps freshly loaded tensors into a template parameter set, insisting on
/// identical names and shapes.
fn replace_params(template: &mut ParamSet, loaded: ParamSet, path: &Path) -> Result<()> {
    if template.len() != loaded.len() {
        return Err(DidError::ModelFile {
            path: path.into(),
            reason: format!("{} tensors, expected {}", loaded.len(), template.len()),
        });
    }
    for p in loaded.iter() {
        if !template.contains(p.name()) {
            return Err(DidError::ModelFile {
                path: path.into(),
                reason: format!("unexpected tensor '{}'", p.name()),
            });
        }
        let slot = template.value(p.name());
        if slot.shape() != p.value().shape() {
            return Err(DidError::ModelFile {
                path: path.into(),
                reason: format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    p.name(),
                    p.value().shape(),
                    slot.shape()
                ),
            });
        }
        *template.value_mut(p.name()) = p.value().clone();
    }
    Ok(())
}
