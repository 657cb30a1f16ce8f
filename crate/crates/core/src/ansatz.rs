//! The LCN wave-function ansatz and the wave-function traits shared with the
//! sampler, trainer and exact oracle.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conv::{ConvPlan, KernelMode, PaddingMode};
use crate::error::{Error, Result};
use crate::lattice::{GridEmbedding, Lattice};
use crate::tensor::{ParamGrads, ParamId, Parameters, Tensor};

/// Configurations evaluated per graph.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct WaveAmplitude {
    /// `ln |psi|`.
    pub log_amp: f64,
    /// `arg psi` in radians, unwrapped.
    pub phase: f64,
}

impl WaveAmplitude {
    pub fn log_psi(&self) -> Complex64 {
        Complex64::new(self.log_amp, self.phase)
    }

    pub fn is_finite(&self) -> bool {
        self.log_amp.is_finite() && self.phase.is_finite()
    }
}

/// Anything that assigns `log psi` to spin configurations (entries +-1).
pub trait WaveFunction: Sync {
    fn n_sites(&self) -> usize;

    fn log_psi_batch(&self, configs: &[&[i8]]) -> Result<Vec<WaveAmplitude>>;

    fn log_psi(&self, config: &[i8]) -> Result<WaveAmplitude> {
        Ok(self.log_psi_batch(&[config])?[0])
    }

    /// `ln(psi(c2) / psi(c1))`.
    fn log_psi_ratio(&self, c1: &[i8], c2: &[i8]) -> Result<Complex64> {
        let a = self.log_psi_batch(&[c1, c2])?;
        Ok(a[1].log_psi() - a[0].log_psi())
    }
}

/// A wave function with real parameters and a reverse-mode gradient.
pub trait Trainable: WaveFunction {
    fn parameters(&self) -> &Parameters;

    /// Mutable access; invalidates cached amplitudes.
    fn parameters_mut(&mut self) -> &mut Parameters;

    /// Changes whenever the parameters may have changed.
    fn version(&self) -> u64;

    /// Amplitudes and the gradient of
    /// `sum_b w_amp[b] * log_amp_b + w_phase[b] * phase_b`.
    fn backprop(
        &self,
        configs: &[&[i8]],
        w_amp: &[f64],
        w_phase: &[f64],
    ) -> Result<(Vec<WaveAmplitude>, ParamGrads)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnsatzConfig {
    pub channels: usize,
    pub n_layers: usize,
    pub se_reduction: usize,
    pub mlp_hidden: usize,
    pub pre_activation: bool,
    pub padding_mode: PaddingMode,
    pub kernel_mode: KernelMode,
    pub pad_virtual: bool,
    pub mask_enabled: bool,
    pub seed: u64,
}

impl Default for AnsatzConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            n_layers: 2,
            se_reduction: 4,
            mlp_hidden: 128,
            pre_activation: true,
            padding_mode: PaddingMode::Periodic,
            kernel_mode: KernelMode::Regular,
            pad_virtual: false,
            mask_enabled: true,
            seed: 0,
        }
    }
}

impl AnsatzConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.se_reduction == 0 || self.channels % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of se_reduction ({})",
                self.channels, self.se_reduction
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    fn attention_dim(&self) -> usize {
        (self.channels / 2).max(1)
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln_gamma: Option<ParamId>,
    ln_beta: Option<ParamId>,
    conv: ParamId,
    se_w1: ParamId,
    se_w2: ParamId,
    nl_theta: ParamId,
    nl_phi: ParamId,
    nl_g: ParamId,
    nl_wz: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: ParamId,
    layers: Vec<LayerIds>,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct LcnAnsatz {
    pub config: AnsatzConfig,
    plan: ConvPlan,
    params: Parameters,
    ids: Ids,
    version: u64,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
}

/// Squeeze-and-excitation on `[B, P, d]`.
pub fn se_block<'g>(x: &Var<'g>, w1: &Var<'g>, w2: &Var<'g>) -> Result<Var<'g>> {
    let z = x.mean_axis(1)?;
    let s = z.matmul(w1)?.relu().matmul(w2)?.sigmoid();
    x.mul_channels(&s)
}

/// Embedded-Gaussian non-local block on `[B, P, d]`; `keep` excludes key
/// positions from attention.
pub fn nonlocal_block<'g>(
    x: &Var<'g>,
    theta: &Var<'g>,
    phi: &Var<'g>,
    g: &Var<'g>,
    wz: &Var<'g>,
    keep: Option<Arc<Vec<bool>>>,
) -> Result<Var<'g>> {
    let q = x.matmul(theta)?;
    let k = x.matmul(phi)?;
    let v = x.matmul(g)?;
    let att = q.bmm_nt(&k)?.softmax(keep)?;
    att.bmm(&v)?.matmul(wz)?.add(x)
}

impl LcnAnsatz {
    pub fn new(lattice: &Lattice, config: AnsatzConfig) -> Result<Self> {
        config.validate()?;
        let emb = GridEmbedding::for_lattice(lattice, config.pad_virtual, config.mask_enabled)?;
        let plan = ConvPlan::new(Arc::new(emb), lattice.lattice_type, config.padding_mode, config.kernel_mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Parameters::new();
        let d = config.channels;
        let dr = d / config.se_reduction;
        let da = config.attention_dim();
        let taps = plan.fan_in_taps();
        let conv_init = |rng: &mut ChaCha8Rng, cin: usize, cout: usize| {
            xavier(rng, &plan.kernel_shape(cin, cout), taps * cin, taps * cout)
        };

        let embed = params.insert("embed.w", conv_init(&mut rng, 1, d))?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let name = |s: &str| format!("layer{l}.{s}");
            let (ln_gamma, ln_beta) = if config.pre_activation {
                (
                    Some(params.insert(&name("ln.gamma"), Tensor::full(&[d], 1.0))?),
                    Some(params.insert(&name("ln.beta"), Tensor::zeros(&[d]))?),
                )
            } else {
                (None, None)
            };
            let conv = params.insert(&name("conv.w"), conv_init(&mut rng, d, d))?;
            let se_w1 = params.insert(&name("se.w1"), xavier(&mut rng, &[d, dr], d, dr))?;
            let se_w2 = params.insert(&name("se.w2"), xavier(&mut rng, &[dr, d], dr, d))?;
            let nl_theta = params.insert(&name("nl.theta"), xavier(&mut rng, &[d, da], d, da))?;
            let nl_phi = params.insert(&name("nl.phi"), xavier(&mut rng, &[d, da], d, da))?;
            let nl_g = params.insert(&name("nl.g"), xavier(&mut rng, &[d, da], d, da))?;
            let nl_wz = params.insert(&name("nl.wz"), xavier(&mut rng, &[da, d], da, d))?;
            layers.push(LayerIds {
                ln_gamma,
                ln_beta,
                conv,
                se_w1,
                se_w2,
                nl_theta,
                nl_phi,
                nl_g,
                nl_wz,
            });
        }
        let flat = plan.n_cells() * d;
        let h = config.mlp_hidden;
        let mlp_w1 = params.insert("mlp.w1", xavier(&mut rng, &[flat, h], flat, h))?;
        let mlp_b1 = params.insert("mlp.b1", Tensor::zeros(&[h]))?;
        let mlp_w2 = params.insert("mlp.w2", xavier(&mut rng, &[h, 2], h, 2))?;
        let mlp_b2 = params.insert("mlp.b2", Tensor::zeros(&[2]))?;
        Ok(Self {
            config,
            plan,
            params,
            ids: Ids {
                embed,
                layers,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            },
            version: 0,
        })
    }

    pub fn plan(&self) -> &ConvPlan {
        &self.plan
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    /// Network on a prepared one-channel input grid `[B, P, 1]`; returns
    /// `[B, 2]` = (log_amp, phase). When `trace` is given, every
    /// intermediate grid is pushed onto it.
    pub fn forward_grid<'g>(
        &self,
        g: &'g Graph,
        params: &Parameters,
        grid: Tensor,
        mut trace: Option<&mut Vec<Var<'g>>>,
    ) -> Result<Var<'g>> {
        let b = grid.shape()[0];
        let plan = &self.plan;
        let mut record = |v: Var<'g>| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(v);
            }
            v
        };
        let p = |id: ParamId| g.param(params, id);
        let x0 = g.input(grid);
        let mut x = record(plan.lattice_conv(&x0, &p(self.ids.embed))?);
        let keep = plan
            .mask_enabled()
            .then(|| plan.keep_positions())
            .filter(|k| k.iter().any(|&v| !v));
        for layer in &self.ids.layers {
            let mut u = x;
            if let (Some(gm), Some(bt)) = (layer.ln_gamma, layer.ln_beta) {
                u = record(u.layer_norm(&p(gm), &p(bt))?);
                u = record(plan.mask(&u.relu())?);
            }
            let v = record(plan.lattice_conv(&u, &p(layer.conv))?);
            let v = record(se_block(&v, &p(layer.se_w1), &p(layer.se_w2))?);
            let a = record(v.add(&x)?);
            let z = nonlocal_block(
                &a,
                &p(layer.nl_theta),
                &p(layer.nl_phi),
                &p(layer.nl_g),
                &p(layer.nl_wz),
                keep.clone(),
            )?;
            x = record(plan.mask(&z)?);
        }
        let flat = x.reshape(&[b, plan.n_cells() * self.config.channels])?;
        let h = flat
            .matmul(&p(self.ids.mlp_w1))?
            .add_bias(&p(self.ids.mlp_b1))?
            .relu();
        h.matmul(&p(self.ids.mlp_w2))?.add_bias(&p(self.ids.mlp_b2))
    }

    fn check_configs(&self, configs: &[&[i8]]) -> Result<()> {
        let n = self.plan.n_sites();
        for c in configs {
            if c.len() != n {
                return Err(Error::Shape {
                    op: "forward",
                    lhs: vec![c.len()],
                    rhs: vec![n],
                });
            }
        }
        Ok(())
    }

    fn eval_chunk(&self, configs: &[&[i8]]) -> Result<Vec<WaveAmplitude>> {
        let g = Graph::no_grad();
        let grid = self.plan.scatter_spins(configs)?;
        let out = self.forward_grid(&g, &self.params, grid, None)?.value();
        Ok(out
            .data()
            .chunks(2)
            .map(|r| WaveAmplitude {
                log_amp: r[0],
                phase: r[1],
            })
            .collect())
    }

    fn grad_chunk(
        &self,
        configs: &[&[i8]],
        w_amp: &[f64],
        w_phase: &[f64],
    ) -> Result<(Vec<WaveAmplitude>, ParamGrads)> {
        let g = Graph::new();
        let grid = self.plan.scatter_spins(configs)?;
        let out = self.forward_grid(&g, &self.params, grid, None)?;
        let weights: Vec<f64> = w_amp.iter().zip(w_phase).flat_map(|(a, p)| [*a, *p]).collect();
        let wv = g.input(Tensor::new(vec![configs.len(), 2], weights)?);
        let loss = out.mul(&wv)?.sum();
        let grads = g.backward(loss)?.param_grads(&self.params);
        let amps = out
            .value()
            .data()
            .chunks(2)
            .map(|r| WaveAmplitude {
                log_amp: r[0],
                phase: r[1],
            })
            .collect();
        Ok((amps, grads))
    }
}

impl WaveFunction for LcnAnsatz {
    fn n_sites(&self) -> usize {
        self.plan.n_sites()
    }

    fn log_psi_batch(&self, configs: &[&[i8]]) -> Result<Vec<WaveAmplitude>> {
        self.check_configs(configs)?;
        let parts: Vec<Result<Vec<WaveAmplitude>>> = configs
            .par_chunks(EVAL_CHUNK)
            .map(|c| self.eval_chunk(c))
            .collect();
        let mut out = Vec::with_capacity(configs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

impl Trainable for LcnAnsatz {
    fn parameters(&self) -> &Parameters {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut Parameters {
        self.version += 1;
        &mut self.params
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn backprop(
        &self,
        configs: &[&[i8]],
        w_amp: &[f64],
        w_phase: &[f64],
    ) -> Result<(Vec<WaveAmplitude>, ParamGrads)> {
        self.check_configs(configs)?;
        if w_amp.len() != configs.len() || w_phase.len() != configs.len() {
            return Err(Error::Shape {
                op: "backprop",
                lhs: vec![configs.len()],
                rhs: vec![w_amp.len(), w_phase.len()],
            });
        }
        let parts: Vec<Result<(Vec<WaveAmplitude>, ParamGrads)>> = configs
            .par_chunks(EVAL_CHUNK)
            .zip(w_amp.par_chunks(EVAL_CHUNK))
            .zip(w_phase.par_chunks(EVAL_CHUNK))
            .map(|((c, a), p)| self.grad_chunk(c, a, p))
            .collect();
        let mut amps = Vec::with_capacity(configs.len());
        let mut total = self.params.zeros_like();
        for part in parts {
            let (a, g) = part?;
            amps.extend(a);
            total.add_assign(&g);
        }
        Ok((amps, total))
    }
}
