use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numkern::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Real = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

/// All base-model parameters. The unembedding is tied to `embed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T: Real = f32> {
    pub embed: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor<T>,
}

const LAYER_FIELDS: [&str; 8] = ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"];

impl<T: Real> LayerWeights<T> {
    fn fields(&self) -> [&Tensor<T>; 8] {
        [&self.attn_norm, &self.wq, &self.wk, &self.wv, &self.wo, &self.mlp_norm, &self.w_up, &self.w_down]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

impl<T: Real> ModelWeights<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, std) = (config.d_model, config.init_std);
        // residual-branch outputs scaled down with depth
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let embed = Tensor::randn(&[config.vocab_size, d], std, rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::filled(&[d], T::one()),
                wq: Tensor::randn(&[d, config.q_width()], std, rng),
                wk: Tensor::randn(&[d, config.kv_width()], std, rng),
                wv: Tensor::randn(&[d, config.kv_width()], std, rng),
                wo: Tensor::randn(&[config.q_width(), d], out_std, rng),
                mlp_norm: Tensor::filled(&[d], T::one()),
                w_up: Tensor::randn(&[d, config.d_ff], std, rng),
                w_down: Tensor::randn(&[config.d_ff, d], out_std, rng),
            })
            .collect();
        Ok(ModelWeights {
            embed,
            layers,
            final_norm: Tensor::filled(&[d], T::one()),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        ModelWeights {
            embed: z(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: z(&l.attn_norm),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    mlp_norm: z(&l.mlp_norm),
                    w_up: z(&l.w_up),
                    w_down: z(&l.w_down),
                })
                .collect(),
            final_norm: z(&self.final_norm),
        }
    }

    /// Tensors with stable checkpoint names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields_mut()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out
    }

    /// Whether a named tensor takes weight decay (matrices only).
    pub fn decays(name: &str) -> bool {
        !(name.ends_with("norm"))
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelWeights::<T>::shapes_for(config)?;
        let actual = self.named();
        if actual.len() != reference.len() {
            return Err(Error::Config(format!(
                "weights have {} tensors, config expects {}",
                actual.len(),
                reference.len()
            )));
        }
        for ((name, t), (_, shape)) in actual.iter().zip(&reference) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    fn shapes_for(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        config.validate()?;
        let d = config.d_model;
        let mut out = vec![("embed".to_string(), vec![config.vocab_size, d])];
        for l in 0..config.n_layers {
            let shapes = [
                vec![d],
                vec![d, config.q_width()],
                vec![d, config.kv_width()],
                vec![d, config.kv_width()],
                vec![config.q_width(), d],
                vec![d],
                vec![d, config.d_ff],
                vec![config.d_ff, d],
            ];
            for (name, s) in LAYER_FIELDS.iter().zip(shapes) {
                out.push((format!("layers.{l}.{name}"), s));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
        }
    }
}
