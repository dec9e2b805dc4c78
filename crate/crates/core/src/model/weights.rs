use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{contract, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    /// Pretrained weights, frozen during adapter training.
    Base,
    /// Low-rank deltas, gate, and marker embeddings.
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterWeights {
    pub q_down: Tensor,
    pub q_up: Tensor,
    pub k_down: Tensor,
    pub k_up: Tensor,
    pub v_down: Tensor,
    pub v_up: Tensor,
    pub g_down: Tensor,
    pub g_up: Tensor,
    pub g_bias: Tensor,
}

/// All parameters in `f64`. The base model reads marker embeddings from
/// `embed`; the reasoning model reads them from `marker_embed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub marker_embed: Tensor,
    pub final_norm: Tensor,
    pub head: Tensor,
    pub layers: Vec<LayerWeights>,
    pub adapters: Vec<AdapterWeights>,
}

impl Model {
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.d_ff;
        let v = config.vocab();
        let inv = |n: usize| 1.0 / libm::sqrt(n as f64);
        let resid = inv(d) / libm::sqrt(2.0 * config.n_layers as f64);
        let mut layers = Vec::new();
        let mut adapters = Vec::new();
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: Tensor::ones(&[d]),
                wq: Tensor::randn(&[d, d], inv(d), &mut rng),
                wk: Tensor::randn(&[d, d], inv(d), &mut rng),
                wv: Tensor::randn(&[d, d], inv(d), &mut rng),
                wo: Tensor::randn(&[d, d], resid, &mut rng),
                ffn_norm: Tensor::ones(&[d]),
                w_gate: Tensor::randn(&[d, f], inv(d), &mut rng),
                w_up: Tensor::randn(&[d, f], inv(d), &mut rng),
                w_down: Tensor::randn(&[f, d], inv(f) / libm::sqrt(2.0 * config.n_layers as f64), &mut rng),
            });
        }
        for _ in 0..config.n_layers {
            let r = config.lora_rank;
            let g = config.gate_rank;
            adapters.push(AdapterWeights {
                q_down: Tensor::randn(&[d, r], inv(d), &mut rng),
                q_up: Tensor::zeros(&[r, d]),
                k_down: Tensor::randn(&[d, r], inv(d), &mut rng),
                k_up: Tensor::zeros(&[r, d]),
                v_down: Tensor::randn(&[d, r], inv(d), &mut rng),
                v_up: Tensor::zeros(&[r, d]),
                g_down: Tensor::randn(&[d, g], inv(d), &mut rng),
                g_up: Tensor::zeros(&[g, d]),
                g_bias: Tensor::filled(&[d], config.gate_bias_init),
            });
        }
        let embed = Tensor::randn(&[v, d], 1.0, &mut rng);
        let mut model = Self {
            embed,
            marker_embed: Tensor::zeros(&[2 * config.n_patterns, d]),
            final_norm: Tensor::ones(&[d]),
            head: Tensor::randn(&[d, v], inv(d), &mut rng),
            layers,
            adapters,
            config,
        };
        model.sync_marker_embeddings();
        Ok(model)
    }

    /// Copies the marker rows of the base embedding into the trainable table.
    pub fn sync_marker_embeddings(&mut self) {
        let b = self.config.base_vocab;
        let d = self.config.d_model;
        let rows = self.embed.data()[b * d..].to_vec();
        self.marker_embed.data_mut().copy_from_slice(&rows);
    }

    /// Every parameter with a stable name and its group, in a fixed order.
    pub fn params(&self) -> Vec<(String, Group, &Tensor)> {
        let mut out = Vec::new();
        out.push((String::from("embed"), Group::Base, &self.embed));
        out.push((String::from("final_norm"), Group::Base, &self.final_norm));
        out.push((String::from("head"), Group::Base, &self.head));
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ffn_norm", &l.ffn_norm),
                ("w_gate", &l.w_gate),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{n}"), Group::Base, t));
            }
        }
        out.push((String::from("marker_embed"), Group::Adapter, &self.marker_embed));
        for (i, a) in self.adapters.iter().enumerate() {
            for (n, t) in adapter_fields(a) {
                out.push((format!("adapters.{i}.{n}"), Group::Adapter, t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, Group, &mut Tensor)> {
        let mut out = Vec::new();
        out.push((String::from("embed"), Group::Base, &mut self.embed));
        out.push((String::from("final_norm"), Group::Base, &mut self.final_norm));
        out.push((String::from("head"), Group::Base, &mut self.head));
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (n, t) in [
                ("attn_norm", &mut l.attn_norm),
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("ffn_norm", &mut l.ffn_norm),
                ("w_gate", &mut l.w_gate),
                ("w_up", &mut l.w_up),
                ("w_down", &mut l.w_down),
            ] {
                out.push((format!("layers.{i}.{n}"), Group::Base, t));
            }
        }
        out.push((String::from("marker_embed"), Group::Adapter, &mut self.marker_embed));
        for (i, a) in self.adapters.iter_mut().enumerate() {
            for (n, t) in [
                ("q_down", &mut a.q_down),
                ("q_up", &mut a.q_up),
                ("k_down", &mut a.k_down),
                ("k_up", &mut a.k_up),
                ("v_down", &mut a.v_down),
                ("v_up", &mut a.v_up),
                ("g_down", &mut a.g_down),
                ("g_up", &mut a.g_up),
                ("g_bias", &mut a.g_bias),
            ] {
                out.push((format!("adapters.{i}.{n}"), Group::Adapter, t));
            }
        }
        out
    }

    /// Order-sensitive hash over every parameter of `group`.
    pub fn checksum(&self, group: Group) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (_, g, t) in self.params() {
            if g == group {
                h ^= t.checksum();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn count(&self, group: Group) -> usize {
        self.params().iter().filter(|p| p.1 == group).map(|p| p.2.len()).sum()
    }

    /// Adds seeded Gaussian noise to every adapter tensor, so the low-rank
    /// deltas and the gate are no longer at their neutral initialisation.
    pub fn perturb_adapters(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, g, t) in self.params_mut() {
            if g == Group::Adapter {
                let noise = Tensor::randn(t.shape(), std, &mut rng);
                t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
            }
        }
    }

    /// Replaces one group with the tensors of `other`, checking shapes.
    pub fn load_group(&mut self, other: &Model, group: Group) -> Result<()> {
        let src = other.params();
        let dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(contract!("parameter layouts differ"));
        }
        for ((sn, sg, st), (dn, _, dt)) in src.into_iter().zip(dst) {
            if sg != group {
                continue;
            }
            if sn != dn || st.shape() != dt.shape() {
                return Err(contract!("parameter {sn} {:?} does not fit {dn} {:?}", st.shape(), dt.shape()));
            }
            *dt = st.clone();
        }
        Ok(())
    }
}

fn adapter_fields(a: &AdapterWeights) -> [(&'static str, &Tensor); 9] {
    [
        ("q_down", &a.q_down),
        ("q_up", &a.q_up),
        ("k_down", &a.k_down),
        ("k_up", &a.k_up),
        ("v_down", &a.v_down),
        ("v_up", &a.v_up),
        ("g_down", &a.g_down),
        ("g_up", &a.g_up),
        ("g_bias", &a.g_bias),
    ]
}
