//! The full encoder: input lifting, HTC embedding, attention layers with
//! positional encoding, an optional parallel GNN branch fused by a learned
//! Lorentzian midpoint, and a Euclidean classifier on the space-like
//! coordinates.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{ablate, train, Adam, EpochRecord, TrainResult};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, AttentionKind, AttentionParams, MultiHeadParams};
use crate::autodiff::{SparseMatrix, Tensor};
use crate::blocks::{
    compose, htc_forward, hyp_positional_encoding, hyp_residual, Activation, HrcSpec, HtcParams,
    Mode, PositionalParams, SpaceFn,
};
use crate::data::GraphDataset;
use crate::error::{Error, Result};
use crate::geometry::{
    lift_euclidean, normalize_rows_to_manifold, CurvatureParam, LorentzBatch,
};

/// Metric used for model selection and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    Accuracy,
    BinaryF1,
}

impl EvalMetric {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMetric::Accuracy => "accuracy",
            EvalMetric::BinaryF1 => "binary_f1",
        }
    }
}

/// All architecture and training hyperparameters. Serializes to/from JSON
/// losslessly; missing fields take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypformerConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub layers: usize,
    pub attention: AttentionKind,
    pub heads: usize,
    /// Focus-map power, searched in {1, 2, 3}.
    pub p: f64,
    pub dropout: f64,
    pub use_gnn: bool,
    pub gnn_layers: usize,
    /// Curvature magnitudes (kappa = -magnitude), searched in {1, 2, 3}.
    pub kappa_in: f64,
    pub kappa_hidden: f64,
    pub kappa_out: f64,
    pub curvature_trainable: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub eval_metric: EvalMetric,
}

impl Default for HypformerConfig {
    fn default() -> Self {
        HypformerConfig {
            d_in: 16,
            d_hidden: 32,
            d_out: 3,
            layers: 2,
            attention: AttentionKind::Linear,
            heads: 1,
            p: 2.0,
            dropout: 0.1,
            use_gnn: true,
            gnn_layers: 2,
            kappa_in: 1.0,
            kappa_hidden: 1.0,
            kappa_out: 1.0,
            curvature_trainable: true,
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 200,
            patience: 50,
            seed: 0,
            eval_metric: EvalMetric::Accuracy,
        }
    }
}

impl HypformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_dims = self.d_in >= 1 && self.d_hidden >= 2 && self.d_out >= 1;
        if !positive_dims {
            return Err(Error::Config(format!(
                "dimensions must satisfy d_in >= 1, d_hidden >= 2, d_out >= 1; got {}, {}, {}",
                self.d_in, self.d_hidden, self.d_out
            )));
        }
        if self.heads < 1 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        if self.p <= 0.0 || self.p.is_nan() {
            return Err(Error::Config(format!("focus power must be > 0, got {}", self.p)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        for (name, k) in [
            ("kappa_in", self.kappa_in),
            ("kappa_hidden", self.kappa_hidden),
            ("kappa_out", self.kappa_out),
        ] {
            if k <= 0.0 || !k.is_finite() {
                return Err(Error::Config(format!(
                    "{name} is a curvature magnitude and must be positive, got {k}"
                )));
            }
        }
        if self.use_gnn && self.gnn_layers < 1 {
            return Err(Error::Config("use_gnn requires gnn_layers >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Which branches are enabled; `Full` is the normal model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoGraph,
    NoTransformer,
}

struct EncoderLayer {
    positional: PositionalParams,
    attention: MultiHeadParams,
    ln1: HrcSpec,
    ffn1: HtcParams,
    ffn_refine: HrcSpec,
    ffn2: HtcParams,
    ln2: HrcSpec,
}

struct GnnBranch {
    layers: Vec<(HtcParams, HrcSpec)>,
}

/// The trainable model. Construction is fully determined by the config
/// seed; dropout draws from the internal generator during training.
pub struct Hypformer {
    config: HypformerConfig,
    variant: AblationVariant,
    kappa_in: CurvatureParam,
    kappa_hidden: CurvatureParam,
    kappa_out: CurvatureParam,
    input_htc: HtcParams,
    layers: Vec<EncoderLayer>,
    gnn: Option<GnnBranch>,
    fusion_logits: Tensor,
    output_hrc: HrcSpec,
    decoder_w: Tensor,
    decoder_b: Tensor,
    rng: std::sync::Mutex<ChaCha20Rng>,
    debug_constraints: bool,
}

impl Hypformer {
    pub fn new(config: HypformerConfig) -> Result<Hypformer> {
        Hypformer::with_variant(config, AblationVariant::Full)
    }

    pub fn with_variant(config: HypformerConfig, variant: AblationVariant) -> Result<Hypformer> {
        config.validate()?;
        if variant == AblationVariant::NoTransformer && !config.use_gnn {
            return Err(Error::Config(
                "no_transformer variant needs the GNN branch (use_gnn = true)".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let trainable = config.curvature_trainable;
        let kappa_in = CurvatureParam::from_magnitude(config.kappa_in, trainable)?;
        let kappa_hidden = CurvatureParam::from_magnitude(config.kappa_hidden, trainable)?;
        let kappa_out = CurvatureParam::from_magnitude(config.kappa_out, trainable)?;

        let d = config.d_hidden;
        let input_htc = HtcParams::init(
            config.d_in,
            d,
            kappa_in.clone(),
            kappa_hidden.clone(),
            &mut rng,
        );

        let build_encoder = variant != AblationVariant::NoTransformer;
        let mut layers = Vec::new();
        if build_encoder {
            for _ in 0..config.layers {
                let positional = PositionalParams::init(d, kappa_hidden.clone(), &mut rng);
                let attention = MultiHeadParams::init(
                    config.heads,
                    d,
                    d,
                    kappa_hidden.clone(),
                    kappa_hidden.clone(),
                    kappa_hidden.clone(),
                    config.p,
                    config.attention,
                    &mut rng,
                );
                let ln1 = HrcSpec::layernorm(d, kappa_hidden.clone(), kappa_hidden.clone())?;
                let ffn1 = HtcParams::init(d, d, kappa_hidden.clone(), kappa_hidden.clone(), &mut rng);
                let ffn_refine = HrcSpec::new(
                    compose(
                        SpaceFn::Activation(Activation::Relu),
                        SpaceFn::Dropout(config.dropout),
                    ),
                    d,
                    kappa_hidden.clone(),
                    kappa_hidden.clone(),
                )?;
                let ffn2 = HtcParams::init(d, d, kappa_hidden.clone(), kappa_hidden.clone(), &mut rng);
                let ln2 = HrcSpec::layernorm(d, kappa_hidden.clone(), kappa_hidden.clone())?;
                layers.push(EncoderLayer {
                    positional,
                    attention,
                    ln1,
                    ffn1,
                    ffn_refine,
                    ffn2,
                    ln2,
                });
            }
        }

        let build_gnn = config.use_gnn && variant != AblationVariant::NoGraph;
        let gnn = if build_gnn {
            let mut gl = Vec::new();
            for i in 0..config.gnn_layers {
                let (din, kin) = if i == 0 {
                    (config.d_in, kappa_in.clone())
                } else {
                    (d, kappa_hidden.clone())
                };
                let htc = HtcParams::init(din, d, kin, kappa_hidden.clone(), &mut rng);
                let act = HrcSpec::activation(Activation::Relu, d, kappa_hidden.clone());
                gl.push((htc, act));
            }
            Some(GnnBranch { layers: gl })
        } else {
            None
        };

        let bound = 1.0 / (d as f64).sqrt();
        let decoder_w = Tensor::param(Array2::from_shape_fn((d, config.d_out), |_| {
            rng.gen_range(-bound..bound)
        }));
        let decoder_b = Tensor::param(Array2::zeros((1, config.d_out)));
        let output_hrc = HrcSpec::new(SpaceFn::Identity, d, kappa_hidden.clone(), kappa_out.clone())?;

        Ok(Hypformer {
            config,
            variant,
            kappa_in,
            kappa_hidden,
            kappa_out,
            input_htc,
            layers,
            gnn,
            fusion_logits: Tensor::param(Array2::zeros((1, 2))),
            output_hrc,
            decoder_w,
            decoder_b,
            rng: std::sync::Mutex::new(rng),
            debug_constraints: std::env::var("HYPF_DEBUG_CONSTRAINTS").is_ok_and(|v| v == "1"),
        })
    }

    pub fn config(&self) -> &HypformerConfig {
        &self.config
    }

    pub fn variant(&self) -> AblationVariant {
        self.variant
    }

    pub fn kappa_hidden_value(&self) -> f64 {
        self.kappa_hidden.value()
    }

    pub fn curvature_values(&self) -> [f64; 3] {
        [
            self.kappa_in.value(),
            self.kappa_hidden.value(),
            self.kappa_out.value(),
        ]
    }

    /// Per-layer manifold checks during forward (also enabled by the
    /// HYPF_DEBUG_CONSTRAINTS=1 environment variable).
    pub fn set_debug_constraints(&mut self, on: bool) {
        self.debug_constraints = on;
    }

    pub fn needs_adjacency(&self) -> bool {
        self.gnn.is_some()
    }

    fn check_stage(&self, stage: &str, batch: &LorentzBatch) -> Result<()> {
        if self.debug_constraints {
            // 1e-8 is the double-precision bound; a single-precision port
            // would relax this to 1e-6.
            batch.check_on_manifold(1e-8).map_err(|e| Error::Domain {
                op: "forward",
                detail: format!("stage `{stage}`: {e}"),
            })?;
        }
        Ok(())
    }

    /// Lift plus the input HTC; exposed so curvature-scaling behaviour can
    /// be observed on real activations.
    pub fn first_htc_output(&self, features: &Tensor) -> Result<LorentzBatch> {
        let lifted = lift_euclidean(features, &self.kappa_in)?;
        htc_forward(&lifted, &self.input_htc)
    }

    fn encoder_forward(&self, lifted: &LorentzBatch, mode: Mode) -> Result<LorentzBatch> {
        let mut rng = self.rng.lock().unwrap();
        let mut enc = htc_forward(lifted, &self.input_htc)?;
        self.check_stage("input_htc", &enc)?;
        for li in 0..self.layers.len() {
            let layer = &self.layers[li];
            let pe = hyp_positional_encoding(&enc, &layer.positional)?;
            let att = multi_head(&pe, &layer.attention)?;
            let res1 = hyp_residual(&enc, &att)?;
            let ln1 = layer.ln1.forward(&res1, mode, &mut *rng)?;
            let ffn = htc_forward(&ln1, &layer.ffn1)?;
            let ffn = layer.ffn_refine.forward(&ffn, mode, &mut *rng)?;
            let ffn = htc_forward(&ffn, &layer.ffn2)?;
            let res2 = hyp_residual(&ln1, &ffn)?;
            enc = self.layers[li].ln2.forward(&res2, mode, &mut *rng)?;
            self.check_stage(&format!("layer{li}"), &enc)?;
        }
        Ok(enc)
    }

    fn gnn_forward(
        &self,
        lifted: &LorentzBatch,
        adjacency: &SparseMatrix,
    ) -> Result<LorentzBatch> {
        let branch = self.gnn.as_ref().expect("gnn branch present");
        let mut h = lifted.clone();
        let mut scratch_rng = ChaCha20Rng::seed_from_u64(0); // relu HRC draws nothing
        for (i, (htc, act)) in branch.layers.iter().enumerate() {
            let aggregated = LorentzBatch::from_parts(
                normalize_rows_to_manifold(&adjacency.spmm(h.data()), h.curvature()),
                h.curvature().clone(),
            );
            let transformed = htc_forward(&aggregated, htc)?;
            h = act.forward(&transformed, Mode::Eval, &mut scratch_rng)?;
            self.check_stage(&format!("gnn{i}"), &h)?;
        }
        Ok(h)
    }

    /// Full forward pass to class logits. Training mode draws dropout
    /// masks from the internal generator (lock-guarded, so shared eval
    /// access stays safe); eval mode never mutates anything.
    pub fn forward(
        &self,
        features: &Tensor,
        adjacency: Option<&SparseMatrix>,
        mode: Mode,
    ) -> Result<Tensor> {
        if features.cols() != self.config.d_in {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "features have {} columns, model expects {}",
                    features.cols(),
                    self.config.d_in
                ),
            });
        }
        let lifted = lift_euclidean(features, &self.kappa_in)?;
        self.check_stage("lift", &lifted)?;

        let use_encoder = self.variant != AblationVariant::NoTransformer;
        let enc = if use_encoder {
            Some(self.encoder_forward(&lifted, mode)?)
        } else {
            None
        };

        let gnn_out = if self.gnn.is_some() {
            let adj = adjacency.ok_or_else(|| Error::Config(
                "model has a GNN branch but no adjacency was provided".into(),
            ))?;
            if adj.rows() != features.rows() || adj.cols() != features.rows() {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    detail: format!(
                        "adjacency is {}x{} for {} nodes",
                        adj.rows(),
                        adj.cols(),
                        features.rows()
                    ),
                });
            }
            Some(self.gnn_forward(&lifted, adj)?)
        } else {
            None
        };

        let fused = match (enc, gnn_out) {
            (Some(e), Some(g)) => {
                // Rowwise Lorentzian midpoint with softmax-normalized
                // learnable branch weights.
                let w = self.fusion_logits.row_softmax();
                let we = w.slice_cols(0, 1);
                let wg = w.slice_cols(1, 2);
                let u = e.data().mul(&we).add(&g.data().mul(&wg));
                let fused = LorentzBatch::from_parts(
                    normalize_rows_to_manifold(&u, e.curvature()),
                    e.curvature().clone(),
                );
                self.check_stage("fusion", &fused)?;
                fused
            }
            (Some(e), None) => e,
            (None, Some(g)) => g,
            (None, None) => unreachable!("at least one branch is always built"),
        };

        let out = {
            // identity HRC draws nothing
            let mut scratch_rng = ChaCha20Rng::seed_from_u64(0);
            self.output_hrc.forward(&fused, mode, &mut scratch_rng)?
        };
        self.check_stage("output", &out)?;

        Ok(out.space().matmul(&self.decoder_w).add(&self.decoder_b))
    }

    /// Stage name of the first non-finite activation, if any (used for the
    /// NaN diagnostic when training aborts).
    pub fn find_nan_stage(
        &self,
        features: &Tensor,
        adjacency: Option<&SparseMatrix>,
    ) -> Option<String> {
        crate::autodiff::no_grad(|| {
            let finite = |t: &Tensor| t.with_values(|v| v.iter().all(|x| x.is_finite()));
            let result = (|| -> Result<Option<String>> {
                let lifted = lift_euclidean(features, &self.kappa_in)?;
                if !finite(lifted.data()) {
                    return Ok(Some("lift".into()));
                }
                if self.variant != AblationVariant::NoTransformer {
                    let mut enc = htc_forward(&lifted, &self.input_htc)?;
                    if !finite(enc.data()) {
                        return Ok(Some("input_htc".into()));
                    }
                    for li in 0..self.layers.len() {
                        let layer = &self.layers[li];
                        let pe = hyp_positional_encoding(&enc, &layer.positional)?;
                        let att = multi_head(&pe, &layer.attention)?;
                        let res1 = hyp_residual(&enc, &att)?;
                        let mut r = ChaCha20Rng::seed_from_u64(0);
                        let ln1 = layer.ln1.forward(&res1, Mode::Eval, &mut r)?;
                        let ffn = htc_forward(&ln1, &layer.ffn1)?;
                        let ffn = layer.ffn_refine.forward(&ffn, Mode::Eval, &mut r)?;
                        let ffn = htc_forward(&ffn, &layer.ffn2)?;
                        let res2 = hyp_residual(&ln1, &ffn)?;
                        enc = self.layers[li].ln2.forward(&res2, Mode::Eval, &mut r)?;
                        if !finite(enc.data()) {
                            return Ok(Some(format!("layer{li}")));
                        }
                    }
                }
                if let (Some(_), Some(adj)) = (self.gnn.as_ref(), adjacency) {
                    match self.gnn_forward(&lifted, adj) {
                        Ok(g) if finite(g.data()) => {}
                        _ => return Ok(Some("gnn".into())),
                    }
                }
                Ok(None)
            })();
            result.unwrap_or(Some("forward-error".into()))
        })
    }

    /// Named parameters in a stable order. Names starting with `kappa`
    /// are curvature scalars (smaller learning rate); names ending in `.w`
    /// or `.psi` are weight matrices (weight decay applies).
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        if self.config.curvature_trainable {
            out.push(("kappa_in.raw".into(), self.kappa_in.raw().clone()));
            out.push(("kappa_hidden.raw".into(), self.kappa_hidden.raw().clone()));
            out.push(("kappa_out.raw".into(), self.kappa_out.raw().clone()));
        }
        out.push(("input_htc.w".into(), self.input_htc.weight().clone()));
        out.push(("input_htc.b".into(), self.input_htc.bias().clone()));
        for (li, layer) in self.layers.iter().enumerate() {
            let p = format!("layer{li}");
            out.push((format!("{p}.pe.w"), layer.positional.htc().weight().clone()));
            out.push((format!("{p}.pe.b"), layer.positional.htc().bias().clone()));
            for (hi, head) in layer.attention.heads().iter().enumerate() {
                let hp = format!("{p}.attn{hi}");
                push_attention_params(&mut out, &hp, head);
            }
            if let Some(combine) = layer.attention.combine() {
                out.push((format!("{p}.attn_combine.w"), combine.weight().clone()));
                out.push((format!("{p}.attn_combine.b"), combine.bias().clone()));
            }
            push_norm_params(&mut out, &format!("{p}.ln1"), &layer.ln1);
            out.push((format!("{p}.ffn1.w"), layer.ffn1.weight().clone()));
            out.push((format!("{p}.ffn1.b"), layer.ffn1.bias().clone()));
            out.push((format!("{p}.ffn2.w"), layer.ffn2.weight().clone()));
            out.push((format!("{p}.ffn2.b"), layer.ffn2.bias().clone()));
            push_norm_params(&mut out, &format!("{p}.ln2"), &layer.ln2);
        }
        if let Some(gnn) = &self.gnn {
            for (gi, (htc, _)) in gnn.layers.iter().enumerate() {
                out.push((format!("gnn{gi}.w"), htc.weight().clone()));
                out.push((format!("gnn{gi}.b"), htc.bias().clone()));
            }
        }
        out.push(("fusion.logits".into(), self.fusion_logits.clone()));
        out.push(("decoder.w".into(), self.decoder_w.clone()));
        out.push(("decoder.b".into(), self.decoder_b.clone()));
        out
    }
}

fn push_attention_params(out: &mut Vec<(String, Tensor)>, prefix: &str, head: &AttentionParams) {
    out.push((format!("{prefix}.wq.w"), head.wq().weight().clone()));
    out.push((format!("{prefix}.wq.b"), head.wq().bias().clone()));
    out.push((format!("{prefix}.wk.w"), head.wk().weight().clone()));
    out.push((format!("{prefix}.wk.b"), head.wk().bias().clone()));
    out.push((format!("{prefix}.wv.w"), head.wv().weight().clone()));
    out.push((format!("{prefix}.wv.b"), head.wv().bias().clone()));
    out.push((format!("{prefix}.psi"), head.psi().clone()));
    out.push((format!("{prefix}.focus_t"), head.focus().t_raw().clone()));
}

fn push_norm_params(out: &mut Vec<(String, Tensor)>, prefix: &str, spec: &HrcSpec) {
    if let Some(np) = spec.learnables() {
        out.push((format!("{prefix}.gain"), np.gain.clone()));
        out.push((format!("{prefix}.bias"), np.bias.clone()));
    }
}

/// Symmetric-normalized adjacency with self-loops:
/// A_hat = D^(-1/2) (A_sym + I) D^(-1/2), edges treated as undirected.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Result<SparseMatrix> {
    for &(s, d) in edges {
        if s >= n || d >= n {
            return Err(Error::DatasetInvalid {
                code: "edge-endpoint",
                detail: format!("edge ({s}, {d}) out of range for {n} nodes"),
            });
        }
    }
    let mut undirected = std::collections::BTreeSet::new();
    for i in 0..n {
        undirected.insert((i, i));
    }
    for &(s, d) in edges {
        undirected.insert((s, d));
        undirected.insert((d, s));
    }
    let mut degree = vec![0.0f64; n];
    for &(s, _) in &undirected {
        degree[s] += 1.0;
    }
    let triplets = undirected
        .into_iter()
        .map(|(s, d)| (s, d, 1.0 / (degree[s] * degree[d]).sqrt()))
        .collect();
    Ok(SparseMatrix::from_triplets(n, n, triplets))
}

/// Masked softmax cross-entropy: mean negative log-likelihood over the
/// selected rows, computed with the log-sum-exp trick.
pub fn loss(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<Tensor> {
    if mask.is_empty() {
        return Err(Error::EmptyInput {
            op: "loss",
            detail: "empty mask".into(),
        });
    }
    let classes = logits.cols();
    let mut masked_labels = Vec::with_capacity(mask.len());
    for &i in mask {
        if i >= logits.rows() {
            return Err(Error::ShapeMismatch {
                op: "loss",
                detail: format!("mask index {i} out of range"),
            });
        }
        if labels[i] >= classes {
            return Err(Error::Domain {
                op: "loss",
                detail: format!("label {} outside [0, {classes})", labels[i]),
            });
        }
        masked_labels.push(labels[i]);
    }
    let z = logits.select_rows(mask);
    let m = z.rowwise_max_detached();
    let lse = z.sub(&m).exp().sum_axis1().ln().add(&m);
    let zy = z.select_per_row(&masked_labels);
    Ok(lse.sub(&zy).mean())
}

/// Fraction of argmax predictions equal to the labels over `idx`.
pub fn accuracy(preds: &[usize], labels: &[usize], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let hits = idx.iter().filter(|&&i| preds[i] == labels[i]).count();
    hits as f64 / idx.len() as f64
}

/// Binary F1 with class 1 as the positive class.
pub fn binary_f1(preds: &[usize], labels: &[usize], idx: &[usize]) -> Result<f64> {
    let (mut tp, mut fp, mut fne) = (0.0f64, 0.0f64, 0.0f64);
    for &i in idx {
        if preds[i] > 1 || labels[i] > 1 {
            return Err(Error::Domain {
                op: "binary_f1",
                detail: format!("non-binary class {} at node {i}", preds[i].max(labels[i])),
            });
        }
        match (preds[i], labels[i]) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fne += 1.0,
            _ => {}
        }
    }
    let denom = 2.0 * tp + fp + fne;
    Ok(if denom == 0.0 { 0.0 } else { 2.0 * tp / denom })
}

/// Argmax class predictions for every node (eval mode, no recording).
pub fn predict(
    model: &Hypformer,
    dataset: &GraphDataset,
    adjacency: Option<&SparseMatrix>,
) -> Result<Vec<usize>> {
    let logits = crate::autodiff::no_grad(|| {
        model.forward(
            &Tensor::from_array(dataset.features.clone()),
            adjacency,
            Mode::Eval,
        )
    })?;
    Ok(logits.with_values(|v| {
        v.rows()
            .into_iter()
            .map(|row| {
                let mut best = 0usize;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }))
}

/// Metric on one split ("train" | "val" | "test") in eval mode.
pub fn evaluate(model: &Hypformer, dataset: &GraphDataset, split: &str) -> Result<f64> {
    let idx = dataset
        .splits
        .get(split)
        .ok_or_else(|| Error::Config(format!("unknown split `{split}`")))?
        .to_vec();
    let metric = model.config.eval_metric;
    if metric == EvalMetric::BinaryF1 && dataset.num_classes > 2 {
        return Err(Error::Domain {
            op: "evaluate",
            detail: format!(
                "binary F1 needs 2 classes, dataset has {}",
                dataset.num_classes
            ),
        });
    }
    let adj = if model.needs_adjacency() {
        Some(normalized_adjacency(dataset.num_nodes(), &dataset.edges)?)
    } else {
        None
    };
    let preds = predict(model, dataset, adj.as_ref())?;
    match metric {
        EvalMetric::Accuracy => Ok(accuracy(&preds, &dataset.labels, &idx)),
        EvalMetric::BinaryF1 => binary_f1(&preds, &dataset.labels, &idx),
    }
}
