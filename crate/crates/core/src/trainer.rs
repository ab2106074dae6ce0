//! Alternating optimization: one SGD epoch for each of the three feature
//! networks, followed by exact closed-form solves of the four encoders.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{expand_semantics, SemanticTable, TriModalDataset};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, Matrix};
use crate::net::{two_layer, NetworkParams};
use crate::objective::{
    objective_parts, representation_gradient, GradientMode, Hyperparams, Modality, ObjectiveParts,
    Representations, Similarities,
};
use crate::sae::{update_all, SaeWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Ablation {
    /// Representation learning and autoencoder fusion.
    #[default]
    #[serde(rename = "full", alias = "DIVAFN")]
    Full,
    /// Representation learning only (`β = λ = 0`, no encoder solves).
    #[serde(rename = "DIVA")]
    Diva,
    /// Encoders over the untrained networks.
    #[serde(rename = "DIVF")]
    Divf,
    /// No training; raw keyframe and video features are concatenated.
    #[serde(rename = "KVC")]
    Kvc,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::Diva,
        Ablation::Divf,
        Ablation::Kvc,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Diva => "DIVA",
            Ablation::Divf => "DIVF",
            Ablation::Kvc => "KVC",
        }
    }

    fn trains_networks(self) -> bool {
        matches!(self, Ablation::Full | Ablation::Diva)
    }

    fn solves_encoders(self) -> bool {
        matches!(self, Ablation::Full | Ablation::Divf)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "divafn" => Ok(Ablation::Full),
            "diva" => Ok(Ablation::Diva),
            "divf" => Ok(Ablation::Divf),
            "kvc" => Ok(Ablation::Kvc),
            _ => Err(Error::contract(format!(
                "unknown ablation {s:?} (full, DIVA, DIVF, KVC)"
            ))),
        }
    }
}

fn default_hidden() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub hp: Hyperparams,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub seed: u64,
    /// Hidden width of every two-layer modality network.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Write a checkpoint every this many iterations (0 disables).
    #[serde(default)]
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub strict_paper_gradients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hp: Hyperparams::default(),
            ablation: Ablation::Full,
            seed: 0,
            hidden: default_hidden(),
            checkpoint_interval: 0,
            strict_paper_gradients: false,
        }
    }
}

impl TrainConfig {
    pub fn gradient_mode(&self) -> GradientMode {
        if self.strict_paper_gradients {
            GradientMode::StrictPaper
        } else {
            GradientMode::Full
        }
    }

    /// Hyperparameters as the model actually uses them.
    pub fn effective_hp(&self) -> Hyperparams {
        let mut hp = self.hp;
        if self.ablation == Ablation::Diva {
            hp.beta = 0.0;
            hp.lambda = 0.0;
        }
        hp
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_hp()
            .validate(self.ablation.solves_encoders())?;
        if self.hidden == 0 {
            return Err(Error::contract("`hidden` must be positive"));
        }
        Ok(())
    }
}

/// Trained (or initial) state of all seven variable groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub theta_x: NetworkParams,
    pub theta_y: NetworkParams,
    pub theta_z: NetworkParams,
    pub sae: SaeWeights,
    pub config: TrainConfig,
    /// Objective after each completed iteration.
    pub trace: Vec<f64>,
    /// Objective at initialization (encoders all zero).
    pub initial_objective: f64,
    /// Count of encoder solves that needed the ridge fallback.
    pub ridge_activations: usize,
}

impl Model {
    /// Hyperparameters in force (after ablation overrides).
    pub fn hp(&self) -> Hyperparams {
        self.config.effective_hp()
    }

    pub fn ablation(&self) -> Ablation {
        self.config.ablation
    }

    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn repr_dim(&self) -> usize {
        self.theta_x.output_dim()
    }

    pub fn semantic_dim(&self) -> usize {
        self.sae.semantic_dim()
    }

    pub fn representations(&self, ds: &TriModalDataset) -> Result<Representations> {
        Ok(Representations {
            f: self.theta_x.forward(ds.images())?,
            h: self.theta_y.forward(ds.keyframes())?,
            g: self.theta_z.forward(ds.videos())?,
        })
    }

    fn network(&self, m: Modality) -> &NetworkParams {
        match m {
            Modality::Image => &self.theta_x,
            Modality::Keyframe => &self.theta_y,
            Modality::Video => &self.theta_z,
        }
    }

    fn network_mut(&mut self, m: Modality) -> &mut NetworkParams {
        match m {
            Modality::Image => &mut self.theta_x,
            Modality::Keyframe => &mut self.theta_y,
            Modality::Video => &mut self.theta_z,
        }
    }
}

/// One of the seven alternating updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    ImageNetwork,
    KeyframeNetwork,
    VideoNetwork,
    ImageEncoder,
    KeyframeEncoder,
    VideoEncoder,
    JointEncoder,
}

impl Step {
    pub fn is_closed_form(self) -> bool {
        matches!(
            self,
            Step::ImageEncoder | Step::KeyframeEncoder | Step::VideoEncoder | Step::JointEncoder
        )
    }

    fn network(m: Modality) -> Self {
        match m {
            Modality::Image => Step::ImageNetwork,
            Modality::Keyframe => Step::KeyframeNetwork,
            Modality::Video => Step::VideoNetwork,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Step::ImageNetwork => "image network update",
            Step::KeyframeNetwork => "keyframe network update",
            Step::VideoNetwork => "video network update",
            Step::ImageEncoder => "image encoder solve",
            Step::KeyframeEncoder => "keyframe encoder solve",
            Step::VideoEncoder => "video encoder solve",
            Step::JointEncoder => "joint encoder solve",
        }
    }
}

/// Objective immediately before and after one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Zero-based outer iteration.
    pub iteration: usize,
    pub step: Step,
    pub before: f64,
    pub after: f64,
}

/// Fixed per-run quantities derived from the training set.
struct Problem<'a> {
    ds: &'a TriModalDataset,
    s: Matrix,
    sims: Similarities,
}

impl<'a> Problem<'a> {
    fn new(ds: &'a TriModalDataset, semantics: &SemanticTable) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        if semantics.num_classes() < ds.num_classes() {
            return Err(Error::contract(format!(
                "semantic table covers {} classes but dataset has {}",
                semantics.num_classes(),
                ds.num_classes()
            )));
        }
        Ok(Self {
            ds,
            s: expand_semantics(semantics, ds.labels())?,
            sims: Similarities::from_labels(ds.labels()),
        })
    }

    fn inputs(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Image => self.ds.images(),
            Modality::Keyframe => self.ds.keyframes(),
            Modality::Video => self.ds.videos(),
        }
    }

    fn parts(
        &self,
        reps: &Representations,
        w: &SaeWeights,
        hp: &Hyperparams,
    ) -> Result<ObjectiveParts> {
        objective_parts(reps, &self.sims, &self.s, w, hp)
    }
}

fn derived_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Minibatch order for one network epoch; depends only on `(seed, iteration, modality)`.
fn epoch_order(seed: u64, iteration: usize, modality: Modality, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, 1000));
    rng.set_stream(iteration as u64 * 3 + modality as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn modality_slot(reps: &mut Representations, m: Modality) -> &mut Matrix {
    match m {
        Modality::Image => &mut reps.f,
        Modality::Keyframe => &mut reps.h,
        Modality::Video => &mut reps.g,
    }
}

/// Freshly initialized model: seeded networks, zero encoders, empty trace.
pub fn init_model(
    ds: &TriModalDataset,
    semantics: &SemanticTable,
    cfg: &TrainConfig,
) -> Result<Model> {
    cfg.validate()?;
    let problem = Problem::new(ds, semantics)?;
    let hp = cfg.effective_hp();
    let net =
        |input: usize, salt: u64| two_layer(input, cfg.hidden, hp.d, derived_seed(cfg.seed, salt));
    let mut model = Model {
        theta_x: net(ds.images().nrows(), 1)?,
        theta_y: net(ds.keyframes().nrows(), 2)?,
        theta_z: net(ds.videos().nrows(), 3)?,
        sae: SaeWeights::zeros(semantics.dim(), hp.d),
        config: cfg.clone(),
        trace: Vec::new(),
        initial_objective: 0.0,
        ridge_activations: 0,
    };
    let reps = model.representations(ds)?;
    model.initial_objective = problem.parts(&reps, &model.sae, &hp)?.total();
    Ok(model)
}

/// Run `cfg.hp.iters` outer iterations from a fresh initialization.
pub fn train(ds: &TriModalDataset, semantics: &SemanticTable, cfg: &TrainConfig) -> Result<Model> {
    let model = init_model(ds, semantics, cfg)?;
    resume(model, ds, semantics, cfg.hp.iters, None)
}

/// Like [`train`], reporting the objective around every step to `probe`.
pub fn train_with_probe(
    ds: &TriModalDataset,
    semantics: &SemanticTable,
    cfg: &TrainConfig,
    probe: &mut dyn FnMut(StepRecord),
) -> Result<Model> {
    let model = init_model(ds, semantics, cfg)?;
    resume(model, ds, semantics, cfg.hp.iters, Some(probe))
}

/// Continue training until `model.iterations() == until`.
///
/// Minibatch orders are a pure function of the seed and iteration index, so
/// a restored checkpoint continues exactly as the uninterrupted run would.
pub fn resume(
    mut model: Model,
    ds: &TriModalDataset,
    semantics: &SemanticTable,
    until: usize,
    mut probe: Option<&mut dyn FnMut(StepRecord)>,
) -> Result<Model> {
    let problem = Problem::new(ds, semantics)?;
    let hp = model.hp();
    if model.ablation() == Ablation::Kvc {
        return Ok(model);
    }
    for (name, m) in Modality::ALL.iter().map(|&m| (m.name(), m)) {
        let expect = problem.inputs(m).nrows();
        if model.network(m).input_dim() != expect {
            return Err(Error::contract(format!(
                "{name} network expects {} input dims but data has {expect}",
                model.network(m).input_dim()
            )));
        }
    }
    if model.semantic_dim() != semantics.dim() {
        return Err(Error::contract(format!(
            "model semantic dim {} but table has {}",
            model.semantic_dim(),
            semantics.dim()
        )));
    }

    let mode = model.config.gradient_mode();
    let mut reps = model.representations(ds)?;
    let n = ds.len();
    let want_probe = probe.is_some();
    let objective = |reps: &Representations, w: &SaeWeights| -> Result<f64> {
        Ok(problem.parts(reps, w, &hp)?.total())
    };

    while model.iterations() < until {
        let iteration = model.iterations();

        if model.ablation().trains_networks() {
            for m in Modality::ALL {
                let step = Step::network(m);
                let before = if want_probe {
                    objective(&reps, &model.sae)?
                } else {
                    f64::NAN
                };
                let inputs = problem.inputs(m);
                let order = epoch_order(model.config.seed, iteration, m, n);
                for cols in order.chunks(hp.batch) {
                    let x_b = inputs.select_columns(cols);
                    let fresh = model.network(m).forward(&x_b)?;
                    let slot = modality_slot(&mut reps, m);
                    for (b, &c) in cols.iter().enumerate() {
                        slot.set_column(c, &fresh.column(b));
                    }
                    let grad = representation_gradient(
                        m,
                        cols,
                        &reps,
                        &problem.sims,
                        &problem.s,
                        &model.sae,
                        &hp,
                        mode,
                    )?;
                    // step on the minibatch mean; the summed gradient scales with
                    // batch size and diverges at the default learning rate
                    let grad = grad / cols.len() as f64;
                    model.network_mut(m).sgd_step(&x_b, &grad, hp.lr)?;
                }
                if !model.network(m).is_finite() {
                    return Err(Error::Divergence {
                        iteration,
                        step: step.label(),
                        detail: format!("{} network parameters became non-finite", m.name()),
                    });
                }
                *modality_slot(&mut reps, m) = model.network(m).forward(inputs)?;
                if !all_finite(modality_slot(&mut reps, m)) {
                    return Err(Error::Divergence {
                        iteration,
                        step: step.label(),
                        detail: format!("{} representations became non-finite", m.name()),
                    });
                }
                if let Some(p) = probe.as_deref_mut() {
                    let after = objective(&reps, &model.sae)?;
                    p(StepRecord {
                        iteration,
                        step,
                        before,
                        after,
                    });
                }
            }
        }

        if model.ablation().solves_encoders() {
            let update = update_all(&reps.f, &reps.h, &reps.g, &problem.s, hp.beta, hp.lambda)
                .map_err(|e| Error::Solver {
                    iteration,
                    source: Box::new(e),
                })?;
            model.ridge_activations += update.ridge_activations;
            let solved = update.weights;
            if !solved.is_finite() {
                return Err(Error::Divergence {
                    iteration,
                    step: "encoder solve",
                    detail: "encoder weights became non-finite".into(),
                });
            }
            if let Some(p) = probe.as_deref_mut() {
                let steps = [
                    (Step::ImageEncoder, solved.w_f),
                    (Step::KeyframeEncoder, solved.w_h),
                    (Step::VideoEncoder, solved.w_g),
                    (Step::JointEncoder, solved.w_e),
                ];
                for (step, w) in steps {
                    let before = objective(&reps, &model.sae)?;
                    match step {
                        Step::ImageEncoder => model.sae.w_f = w,
                        Step::KeyframeEncoder => model.sae.w_h = w,
                        Step::VideoEncoder => model.sae.w_g = w,
                        _ => model.sae.w_e = w,
                    }
                    let after = objective(&reps, &model.sae)?;
                    p(StepRecord {
                        iteration,
                        step,
                        before,
                        after,
                    });
                }
            } else {
                model.sae = solved;
            }
        }

        let value = objective(&reps, &model.sae)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration,
                step: "objective evaluation",
                detail: format!("objective is {value}"),
            });
        }
        model.trace.push(value);
    }
    Ok(model)
}

/// Objective decomposition of `model` on a dataset.
pub fn evaluate_objective(
    model: &Model,
    ds: &TriModalDataset,
    semantics: &SemanticTable,
) -> Result<ObjectiveParts> {
    let problem = Problem::new(ds, semantics)?;
    let reps = model.representations(ds)?;
    problem.parts(&reps, &model.sae, &model.hp())
}
