use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::model::config::{Architecture, ModelConfig};
use crate::numerics::{lit, ParamId, ParamSet, Scalar, Tensor};

const INIT_STD: f64 = 0.02;

/// Parameters of one pre-norm transformer block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ffn_in: ParamId,
    pub ffn_gate: ParamId,
    pub ffn_out: ParamId,
    pub norm_attn: ParamId,
    pub norm_ffn: ParamId,
}

/// One encoder layer: the set-wise block, plus a cross-set block for NEST.
/// For the dense baseline `main` is the only block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerParams {
    pub main: BlockParams,
    pub cross: Option<BlockParams>,
}

/// Every trainable tensor of a model, addressed through typed handles.
///
/// The token embedding doubles as the MLM output projection; no separate
/// decoder matrix exists. No tensor is an additive bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamSet<T>,
    pub embedding: ParamId,
    pub t2v_omega: ParamId,
    pub t2v_phi: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_norm: ParamId,
    pub msm_w1: ParamId,
    pub msm_w2: ParamId,
    pub probe_p1: ParamId,
    pub probe_p2: ParamId,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| lit(self.normal.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("shape matches")
    }
}

fn ones<T: Scalar>(d: usize) -> Tensor<T> {
    Tensor::new(&[d], vec![T::one(); d]).expect("shape matches")
}

fn add_block<T: Scalar>(params: &mut ParamSet<T>, init: &mut Init, prefix: &str, cfg: &ModelConfig) -> BlockParams {
    let (d, inner, ff) = (cfg.d_model, cfg.n_heads * cfg.d_k, cfg.d_ff);
    BlockParams {
        w_q: params.add(format!("{prefix}.w_q"), init.normal(&[d, inner])),
        w_k: params.add(format!("{prefix}.w_k"), init.normal(&[d, inner])),
        w_v: params.add(format!("{prefix}.w_v"), init.normal(&[d, inner])),
        w_o: params.add(format!("{prefix}.w_o"), init.normal(&[inner, d])),
        ffn_in: params.add(format!("{prefix}.ffn_in"), init.normal(&[d, ff])),
        ffn_gate: params.add(format!("{prefix}.ffn_gate"), init.normal(&[d, ff])),
        ffn_out: params.add(format!("{prefix}.ffn_out"), init.normal(&[ff, d])),
        norm_attn: params.add(format!("{prefix}.norm_attn"), ones(d)),
        norm_ffn: params.add(format!("{prefix}.norm_ffn"), ones(d)),
    }
}

impl<T: Scalar> ModelWeights<T> {
    /// Fresh weights: projections and embeddings from `N(0, 0.02²)`, norm
    /// gains at one, Time2Vec frequencies from `N(0, 1)` and phases from
    /// `U(0, 2π)`.
    pub fn init(config: &ModelConfig, arch: Architecture) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let d = config.d_model;
        let mut params = ParamSet::new();
        let embedding = params.add("embedding", init.normal(&[config.vocab_size, d]));
        let std_normal = Normal::new(0.0, 1.0).expect("valid std");
        let omega: Vec<T> = (0..d).map(|_| lit(std_normal.sample(&mut init.rng))).collect();
        let phase = Uniform::new(0.0, std::f64::consts::TAU);
        let phi: Vec<T> = (0..d).map(|_| lit(phase.sample(&mut init.rng))).collect();
        let t2v_omega = params.add("t2v.omega", Tensor::new(&[d], omega)?);
        let t2v_phi = params.add("t2v.phi", Tensor::new(&[d], phi)?);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let layer = match arch {
                Architecture::Nest => LayerParams {
                    main: add_block(&mut params, &mut init, &format!("layers.{l}.swe"), config),
                    cross: Some(add_block(&mut params, &mut init, &format!("layers.{l}.cse"), config)),
                },
                Architecture::Dense => LayerParams {
                    main: add_block(&mut params, &mut init, &format!("layers.{l}.block"), config),
                    cross: None,
                },
            };
            layers.push(layer);
        }
        let final_norm = params.add("final_norm", ones(d));
        let msm_w1 = params.add("msm_head.w1", init.normal(&[d, d]));
        let msm_w2 = params.add("msm_head.w2", init.normal(&[d, config.vocab_size]));
        let probe_p1 = params.add("probe.p1", init.normal(&[d, d]));
        let probe_p2 = params.add("probe.p2", init.normal(&[d, config.probe_classes]));
        Ok(ModelWeights {
            config: config.clone(),
            arch,
            params,
            embedding,
            t2v_omega,
            t2v_phi,
            layers,
            final_norm,
            msm_w1,
            msm_w2,
            probe_p1,
            probe_p2,
        })
    }

    pub fn head_params(&self) -> [ParamId; 4] {
        [self.msm_w1, self.msm_w2, self.probe_p1, self.probe_p2]
    }

    pub fn probe_params(&self) -> [ParamId; 2] {
        [self.probe_p1, self.probe_p2]
    }

    /// Total parameter count of the manifest.
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Parameter count without the MSM head and the probe.
    pub fn backbone_params(&self) -> usize {
        self.num_params() - self.head_params().iter().map(|&id| self.params.get(id).numel()).sum::<usize>()
    }

    /// Rebuilds handles for a manifest loaded from disk; tensor names and
    /// shapes must match a fresh model of the same configuration.
    pub fn from_params(config: &ModelConfig, arch: Architecture, params: ParamSet<T>) -> Result<Self> {
        let template = ModelWeights::<T>::init(config, arch)?;
        if template.params.len() != params.len() {
            return Err(crate::NestError::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (id, (name, t)) in template.params.ids().zip(template.params.iter()) {
            let got = params.get(id);
            if params.name(id) != name || got.shape() != t.shape() {
                return Err(crate::NestError::Checkpoint(format!(
                    "tensor {} has name {:?} shape {:?}, expected {name:?} {:?}",
                    id.0,
                    params.name(id),
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(ModelWeights { params, ..template })
    }
}
