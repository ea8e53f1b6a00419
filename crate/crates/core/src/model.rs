//! Model configuration and learnable parameters.
//!
//! All parameters are entity-independent: a relation table, per-layer
//! temporal-edge encoders, the temporal (time) encoder, and the scoring
//! head. Nothing is indexed by entity id, which is what makes checkpoints
//! transfer across graphs with disjoint entity sets.

use crate::error::ModelError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use tkgr_grad::{Tape, Tensor, Var};

/// How a partial path state is merged with a temporal edge representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeOp {
    /// Element-wise product (scaling).
    Mult,
    /// Element-wise sum (translation).
    Add,
    /// Pairwise complex rotation by the unit-normalized edge vector.
    Rotate,
}

/// Message aggregation per candidate entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// mean ‖ max ‖ min ‖ std followed by a learned 4d -> d projection.
    Pna,
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// Whether the time encoder's frequencies and phases are shared across
/// relation types or learned per relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSharing {
    Shared,
    PerRelation,
}

/// Propagation-layer options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    /// Number of aggregation layers (maximum path length).
    pub omega: usize,
    pub merge: MergeOp,
    pub aggregator: Aggregator,
    pub use_layer_norm: bool,
    pub use_shortcut: bool,
    /// Re-inject the layer-0 state into every aggregation so paths of all
    /// lengths <= omega contribute, not only length-omega walks.
    pub include_boundary: bool,
    pub activation: Activation,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            omega: 4,
            merge: MergeOp::Mult,
            aggregator: Aggregator::Pna,
            use_layer_norm: true,
            use_shortcut: true,
            include_boundary: true,
            activation: Activation::Relu,
        }
    }
}

/// Full model configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Relation vocabulary size after inverse augmentation.
    pub num_relations: usize,
    /// Embedding dimension d.
    pub dim: usize,
    pub prop: PropagationConfig,
    pub time_sharing: TimeSharing,
    /// When false the time component is replaced by zeros (temporal-encoder
    /// ablation).
    pub use_time_encoder: bool,
    /// Oracle mode: the edge representation is the static component alone,
    /// skipping the time encoder and the feed-forward combiner.
    pub bypass_edge_transform: bool,
    /// Use one shared parameter set for all layers instead of independent
    /// per-layer parameters.
    pub tied_layers: bool,
    /// Hidden width of the scoring head.
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn new(num_relations: usize, dim: usize) -> Self {
        ModelConfig {
            num_relations,
            dim,
            prop: PropagationConfig::default(),
            time_sharing: TimeSharing::Shared,
            use_time_encoder: true,
            bypass_edge_transform: false,
            tied_layers: false,
            head_hidden: dim,
        }
    }

    /// Oracle configuration used by the walk-equivalence checks: sum
    /// aggregation, multiplicative merge, boundary on, everything else off,
    /// tied layers, edge transform bypassed.
    pub fn oracle(num_relations: usize, dim: usize, omega: usize) -> Self {
        ModelConfig {
            num_relations,
            dim,
            prop: PropagationConfig {
                omega,
                merge: MergeOp::Mult,
                aggregator: Aggregator::Sum,
                use_layer_norm: false,
                use_shortcut: false,
                include_boundary: true,
                activation: Activation::None,
            },
            time_sharing: TimeSharing::Shared,
            use_time_encoder: false,
            bypass_edge_transform: true,
            tied_layers: true,
            head_hidden: dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_relations == 0 || self.dim == 0 {
            return Err(ModelError::Config(
                "num_relations and dim must be positive".into(),
            ));
        }
        if self.prop.omega == 0 {
            return Err(ModelError::Config("omega must be at least 1".into()));
        }
        if self.prop.merge == MergeOp::Rotate && !self.dim.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "rotate merge requires an even dimension, got {}",
                self.dim
            )));
        }
        if self.head_hidden == 0 {
            return Err(ModelError::Config("head_hidden must be at least 1".into()));
        }
        Ok(())
    }

    fn num_layer_param_sets(&self) -> usize {
        if self.tied_layers {
            1
        } else {
            self.prop.omega
        }
    }
}

/// Per-layer temporal-edge encoder parameters.
#[derive(Clone, Debug)]
pub struct LayerParams {
    /// Per-relation d x d transform of the query relation vector (math
    /// orientation: the static component is `W_p · r + b_p`).
    pub rel_weight: Vec<Tensor>,
    /// Per-relation bias, d each.
    pub rel_bias: Vec<Tensor>,
    /// Feed-forward combiner 2d -> d applied to [static ‖ temporal].
    pub ff_weight: Tensor,
    pub ff_bias: Tensor,
    /// PNA output projection 4d -> d (present iff aggregator is PNA).
    pub pna_weight: Option<Tensor>,
    pub pna_bias: Option<Tensor>,
    /// Layer-norm gain/bias (present iff layer norm is on).
    pub norm_gain: Option<Tensor>,
    pub norm_bias: Option<Tensor>,
}

/// Time-encoder parameters: one frequency/phase row in shared mode, one
/// row per relation otherwise.
#[derive(Clone, Debug)]
pub struct TemporalParams {
    pub freq: Tensor,
    pub phase: Tensor,
}

/// Scoring head: 2d -> hidden -> 1 feed-forward network.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// The complete learnable state.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// Relation table R, one row per (augmented) relation.
    pub relations: Tensor,
    pub temporal: TemporalParams,
    pub layers: Vec<LayerParams>,
    pub head: HeadParams,
}

fn glorot(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

impl Model {
    /// Initializes all parameters: weights uniform Glorot, biases zero,
    /// layer-norm gain one, time frequencies uniform in (0, 1), phases
    /// zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = config.dim;
        let nr = config.num_relations;
        let relations = glorot(&mut rng, nr, d);
        let time_rows = match config.time_sharing {
            TimeSharing::Shared => 1,
            TimeSharing::PerRelation => nr,
        };
        let temporal = TemporalParams {
            freq: Tensor::from_fn(time_rows, d, |_, _| rng.gen_range(0.0..1.0)),
            phase: Tensor::zeros(vec![time_rows, d]),
        };
        let mut layers = Vec::new();
        for _ in 0..config.num_layer_param_sets() {
            let rel_weight = (0..nr).map(|_| glorot(&mut rng, d, d)).collect();
            let rel_bias = (0..nr).map(|_| Tensor::zeros(vec![d])).collect();
            let ff_weight = glorot(&mut rng, 2 * d, d);
            let (pna_weight, pna_bias) = if config.prop.aggregator == Aggregator::Pna {
                (Some(glorot(&mut rng, 4 * d, d)), Some(Tensor::zeros(vec![d])))
            } else {
                (None, None)
            };
            let (norm_gain, norm_bias) = if config.prop.use_layer_norm {
                (Some(Tensor::ones(vec![d])), Some(Tensor::zeros(vec![d])))
            } else {
                (None, None)
            };
            layers.push(LayerParams {
                rel_weight,
                rel_bias,
                ff_weight,
                ff_bias: Tensor::zeros(vec![d]),
                pna_weight,
                pna_bias,
                norm_gain,
                norm_bias,
            });
        }
        let head = HeadParams {
            w1: glorot(&mut rng, 2 * d, config.head_hidden),
            b1: Tensor::zeros(vec![config.head_hidden]),
            w2: glorot(&mut rng, config.head_hidden, 1),
            b2: Tensor::zeros(vec![1]),
        };
        Ok(Model {
            config,
            relations,
            temporal,
            layers,
            head,
        })
    }

    /// Parameter set used at propagation layer `l` (layer 0's set when
    /// layers are tied).
    pub fn layer(&self, l: usize) -> &LayerParams {
        if self.config.tied_layers {
            &self.layers[0]
        } else {
            &self.layers[l]
        }
    }

    /// Named parameters in a stable order. The names double as the
    /// checkpoint layout and must stay in sync with [`ModelVars::named`].
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("relations".into(), &self.relations),
            ("time.freq".into(), &self.temporal.freq),
            ("time.phase".into(), &self.temporal.phase),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (p, w) in layer.rel_weight.iter().enumerate() {
                out.push((format!("layer{l}.rel{p}.weight"), w));
            }
            for (p, b) in layer.rel_bias.iter().enumerate() {
                out.push((format!("layer{l}.rel{p}.bias"), b));
            }
            out.push((format!("layer{l}.ff.weight"), &layer.ff_weight));
            out.push((format!("layer{l}.ff.bias"), &layer.ff_bias));
            if let Some(w) = &layer.pna_weight {
                out.push((format!("layer{l}.pna.weight"), w));
            }
            if let Some(b) = &layer.pna_bias {
                out.push((format!("layer{l}.pna.bias"), b));
            }
            if let Some(g) = &layer.norm_gain {
                out.push((format!("layer{l}.norm.gain"), g));
            }
            if let Some(b) = &layer.norm_bias {
                out.push((format!("layer{l}.norm.bias"), b));
            }
        }
        out.push(("head.w1".into(), &self.head.w1));
        out.push(("head.b1".into(), &self.head.b1));
        out.push(("head.w2".into(), &self.head.w2));
        out.push(("head.b2".into(), &self.head.b2));
        out
    }

    /// Mutable variant of [`Model::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("relations".into(), &mut self.relations),
            ("time.freq".into(), &mut self.temporal.freq),
            ("time.phase".into(), &mut self.temporal.phase),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (p, w) in layer.rel_weight.iter_mut().enumerate() {
                out.push((format!("layer{l}.rel{p}.weight"), w));
            }
            for (p, b) in layer.rel_bias.iter_mut().enumerate() {
                out.push((format!("layer{l}.rel{p}.bias"), b));
            }
            out.push((format!("layer{l}.ff.weight"), &mut layer.ff_weight));
            out.push((format!("layer{l}.ff.bias"), &mut layer.ff_bias));
            if let Some(w) = &mut layer.pna_weight {
                out.push((format!("layer{l}.pna.weight"), w));
            }
            if let Some(b) = &mut layer.pna_bias {
                out.push((format!("layer{l}.pna.bias"), b));
            }
            if let Some(g) = &mut layer.norm_gain {
                out.push((format!("layer{l}.norm.gain"), g));
            }
            if let Some(b) = &mut layer.norm_bias {
                out.push((format!("layer{l}.norm.bias"), b));
            }
        }
        out.push(("head.w1".into(), &mut self.head.w1));
        out.push(("head.b1".into(), &mut self.head.b1));
        out.push(("head.w2".into(), &mut self.head.w2));
        out.push(("head.b2".into(), &mut self.head.b2));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Lifts all parameters onto a tape as leaf variables.
    pub fn vars<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        ModelVars {
            relations: tape.var(self.relations.clone()),
            time_freq: tape.var(self.temporal.freq.clone()),
            time_phase: tape.var(self.temporal.phase.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    rel_weight: l.rel_weight.iter().map(|t| tape.var(t.clone())).collect(),
                    rel_bias: l.rel_bias.iter().map(|t| tape.var(t.clone())).collect(),
                    ff_weight: tape.var(l.ff_weight.clone()),
                    ff_bias: tape.var(l.ff_bias.clone()),
                    pna_weight: l.pna_weight.as_ref().map(|t| tape.var(t.clone())),
                    pna_bias: l.pna_bias.as_ref().map(|t| tape.var(t.clone())),
                    norm_gain: l.norm_gain.as_ref().map(|t| tape.var(t.clone())),
                    norm_bias: l.norm_bias.as_ref().map(|t| tape.var(t.clone())),
                })
                .collect(),
            head_w1: tape.var(self.head.w1.clone()),
            head_b1: tape.var(self.head.b1.clone()),
            head_w2: tape.var(self.head.w2.clone()),
            head_b2: tape.var(self.head.b2.clone()),
            tied: self.config.tied_layers,
        }
    }
}

/// Per-layer parameter variables on a tape.
pub struct LayerVars<'t> {
    pub rel_weight: Vec<Var<'t>>,
    pub rel_bias: Vec<Var<'t>>,
    pub ff_weight: Var<'t>,
    pub ff_bias: Var<'t>,
    pub pna_weight: Option<Var<'t>>,
    pub pna_bias: Option<Var<'t>>,
    pub norm_gain: Option<Var<'t>>,
    pub norm_bias: Option<Var<'t>>,
}

/// All parameters of a model lifted onto one tape.
pub struct ModelVars<'t> {
    pub relations: Var<'t>,
    pub time_freq: Var<'t>,
    pub time_phase: Var<'t>,
    pub layers: Vec<LayerVars<'t>>,
    pub head_w1: Var<'t>,
    pub head_b1: Var<'t>,
    pub head_w2: Var<'t>,
    pub head_b2: Var<'t>,
    tied: bool,
}

impl<'t> ModelVars<'t> {
    pub fn layer(&self, l: usize) -> &LayerVars<'t> {
        if self.tied {
            &self.layers[0]
        } else {
            &self.layers[l]
        }
    }

    /// Same names and order as [`Model::named_params`].
    pub fn named(&self) -> Vec<(String, Var<'t>)> {
        let mut out: Vec<(String, Var<'t>)> = vec![
            ("relations".into(), self.relations),
            ("time.freq".into(), self.time_freq),
            ("time.phase".into(), self.time_phase),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (p, w) in layer.rel_weight.iter().enumerate() {
                out.push((format!("layer{l}.rel{p}.weight"), *w));
            }
            for (p, b) in layer.rel_bias.iter().enumerate() {
                out.push((format!("layer{l}.rel{p}.bias"), *b));
            }
            out.push((format!("layer{l}.ff.weight"), layer.ff_weight));
            out.push((format!("layer{l}.ff.bias"), layer.ff_bias));
            if let Some(w) = layer.pna_weight {
                out.push((format!("layer{l}.pna.weight"), w));
            }
            if let Some(b) = layer.pna_bias {
                out.push((format!("layer{l}.pna.bias"), b));
            }
            if let Some(g) = layer.norm_gain {
                out.push((format!("layer{l}.norm.gain"), g));
            }
            if let Some(b) = layer.norm_bias {
                out.push((format!("layer{l}.norm.bias"), b));
            }
        }
        out.push(("head.w1".into(), self.head_w1));
        out.push(("head.b1".into(), self.head_b1));
        out.push(("head.w2".into(), self.head_w2));
        out.push(("head.b2".into(), self.head_b2));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_params_match_vars_order() {
        let model = Model::init(ModelConfig::new(4, 8), 7).unwrap();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let names_a: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let names_b: Vec<String> = vars.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names_a, names_b);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(ModelConfig::new(4, 8), 7).unwrap();
        let b = Model::init(ModelConfig::new(4, 8), 7).unwrap();
        for ((_, ta), (_, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn rotate_with_odd_dim_is_a_config_error() {
        let mut cfg = ModelConfig::new(4, 7);
        cfg.prop.merge = MergeOp::Rotate;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tied_layers_store_one_param_set() {
        let mut cfg = ModelConfig::new(4, 8);
        cfg.tied_layers = true;
        cfg.prop.omega = 5;
        let model = Model::init(cfg, 1).unwrap();
        assert_eq!(model.layers.len(), 1);
        assert!(std::ptr::eq(model.layer(0), model.layer(4)));
    }

    #[test]
    fn per_relation_time_params_have_one_row_per_relation() {
        let mut cfg = ModelConfig::new(6, 8);
        cfg.time_sharing = TimeSharing::PerRelation;
        let model = Model::init(cfg, 1).unwrap();
        assert_eq!(model.temporal.freq.shape(), &[6, 8]);
        let shared = Model::init(ModelConfig::new(6, 8), 1).unwrap();
        assert_eq!(shared.temporal.freq.shape(), &[1, 8]);
    }
}
