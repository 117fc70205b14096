use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::embedding::time_embedding;
use crate::denoiser::masks::{CausalMasks, Conditioning};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::numcore::mlp::silu;
use crate::numcore::tensor::gemm;
use crate::numcore::{Linear, Parameterized, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            hidden: 128,
            embedding_dim: 128,
        }
    }
}

/// Two SiLU layers with an additive skip; the projected step embedding is
/// added to the first layer's pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub first: Linear,
    pub time_proj: Linear,
    pub second: Linear,
}

/// Conditional noise predictor `f(y_t, t | x, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    covariate_dim: usize,
    steps: usize,
    /// Row 0 multiplies `y_t`; the remaining rows take the conditioning features.
    input: Linear,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<ResidualBlock>,
    head: Linear,
    embeddings: Vec<Vec<f64>>,
}

/// Conditioning already pushed through the input projection.
#[derive(Clone, Debug)]
pub struct PreparedConditioning {
    base: Tensor,
}

impl PreparedConditioning {
    pub fn rows(&self) -> usize {
        self.base.shape()[0]
    }
}

fn embedding_table(steps: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    (0..=steps).map(|t| time_embedding(t, dim)).collect()
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, covariate_dim: usize, steps: usize, rng: &mut impl Rng) -> Result<Self> {
        if config.hidden == 0 || steps == 0 {
            return Err(Error::Parameter("hidden width and steps must be positive".into()));
        }
        let embeddings = embedding_table(steps, config.embedding_dim)?;
        let h = config.hidden;
        let input = Linear::init(2 * covariate_dim + 2, h, rng);
        let time_in = Linear::init(config.embedding_dim, h, rng);
        let time_out = Linear::init(h, h, rng);
        let blocks = (0..config.n_blocks)
            .map(|_| ResidualBlock {
                first: Linear::init(h, h, rng),
                time_proj: Linear::init(h, h, rng),
                second: Linear::init(h, h, rng),
            })
            .collect();
        let head = Linear::init(h, 1, rng);
        Ok(Self {
            config,
            covariate_dim,
            steps,
            input,
            time_in,
            time_out,
            blocks,
            head,
            embeddings,
        })
    }

    /// Rebuilds a model from tensors in `parameters()` order.
    pub fn from_parameters(
        config: DenoiserConfig,
        covariate_dim: usize,
        steps: usize,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        let mut rng = crate::numcore::seeded_rng(0);
        let mut model = Self::new(config, covariate_dim, steps, &mut rng)?;
        let expected = model.parameters().len();
        if tensors.len() != expected {
            return Err(Error::Dimension(format!(
                "denoiser needs {expected} tensors, got {}",
                tensors.len()
            )));
        }
        for (slot, t) in model.parameters_mut().into_iter().zip(tensors) {
            if !slot.same_shape(&t) {
                return Err(Error::Dimension(format!(
                    "parameter shape {:?} vs stored {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check_cond(&self, cond: &Conditioning) -> Result<()> {
        if cond.covariate_dim() != self.covariate_dim && cond.rows() > 0 {
            return Err(Error::Dimension(format!(
                "model expects {} covariates, got {}",
                self.covariate_dim,
                cond.covariate_dim()
            )));
        }
        Ok(())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Parameter(format!("step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// Time-MLP output for one step, `[hidden]`.
    fn time_features(&self, t: usize) -> Result<Tensor> {
        let e = Tensor::from_parts(vec![1, self.config.embedding_dim], self.embeddings[t].clone());
        let h = self.time_in.forward(&e)?.map(silu);
        Ok(self.time_out.forward(&h)?.map(silu))
    }

    /// Single-unit convenience wrapper around the batched path.
    pub fn predict_noise(&self, y_t: f64, t: usize, x: &[f64], a: f64, masks: &CausalMasks) -> Result<f64> {
        masks.validate()?;
        let cond = Conditioning::new(x, &[a], std::slice::from_ref(masks))?;
        let prepared = self.prepare(&cond)?;
        Ok(self.predict_prepared(&prepared, &[y_t], t)?[0])
    }

    pub fn prepare(&self, cond: &Conditioning) -> Result<PreparedConditioning> {
        self.check_cond(cond)?;
        let n = cond.rows();
        let h = self.config.hidden;
        let k = cond.feature_dim();
        let mut base = Vec::with_capacity(n * h);
        for _ in 0..n {
            base.extend_from_slice(self.input.bias.data());
        }
        let w_cond = &self.input.weight.data()[h..];
        gemm(n, k, h, cond.features(), false, w_cond, false, &mut base, 1.0);
        Ok(PreparedConditioning {
            base: Tensor::from_parts(vec![n, h], base),
        })
    }

    /// Noise predictions for every prepared row at a shared step `t`.
    pub fn predict_prepared(&self, prepared: &PreparedConditioning, y_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_step(t)?;
        let n = prepared.rows();
        if y_t.len() != n {
            return Err(Error::Dimension(format!("{} noisy values for {n} rows", y_t.len())));
        }
        let hd = self.config.hidden;
        let w_y = &self.input.weight.data()[..hd];
        let mut h = prepared.base.clone();
        for (row, &y) in h.data_mut().chunks_mut(hd).zip(y_t) {
            for (v, w) in row.iter_mut().zip(w_y) {
                *v += y * w;
            }
        }
        let te = self.time_features(t)?;
        for block in &self.blocks {
            let tp = block.time_proj.forward(&te)?;
            let mut u = block.first.forward(&h)?;
            for row in u.data_mut().chunks_mut(hd) {
                for (v, b) in row.iter_mut().zip(tp.data()) {
                    *v = silu(*v + b);
                }
            }
            let delta = block.second.forward(&u)?;
            h.add_assign(&delta);
        }
        let out = self.head.forward(&h.map(silu))?;
        if !out.is_finite() {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok(out.into_data())
    }

    /// Differentiable forward for rows with individual steps. Returns `[n × 1]`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        y_t: &[f64],
        steps: &[usize],
        cond: &Conditioning,
    ) -> Result<Var> {
        self.check_cond(cond)?;
        let n = cond.rows();
        if y_t.len() != n || steps.len() != n {
            return Err(Error::Dimension(format!(
                "{} noisy values and {} steps for {n} rows",
                y_t.len(),
                steps.len()
            )));
        }
        for &t in steps {
            self.check_step(t)?;
        }
        let k = cond.feature_dim() + 1;
        let mut input = Vec::with_capacity(n * k);
        for (i, &y) in y_t.iter().enumerate() {
            input.push(y);
            input.extend_from_slice(cond.row(i));
        }
        let input = tape.constant(Tensor::from_parts(vec![n, k], input));

        // Time features are computed once per distinct step, then gathered.
        let mut unique: Vec<usize> = steps.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let lookup: Vec<usize> = steps
            .iter()
            .map(|t| unique.binary_search(t).expect("step present"))
            .collect();
        let e = self.config.embedding_dim;
        let mut emb = Vec::with_capacity(unique.len() * e);
        for &t in &unique {
            emb.extend_from_slice(&self.embeddings[t]);
        }
        let emb = tape.constant(Tensor::from_parts(vec![unique.len(), e], emb));

        let mut v = vars.iter().copied();
        let mut next2 = || -> [Var; 2] { [v.next().unwrap(), v.next().unwrap()] };
        let p_input = next2();
        let p_time_in = next2();
        let p_time_out = next2();

        let mut h = self.input.forward_tape(tape, input, &p_input)?;
        let te = self.time_in.forward_tape(tape, emb, &p_time_in)?;
        let te = tape.silu(te)?;
        let te = self.time_out.forward_tape(tape, te, &p_time_out)?;
        let te = tape.silu(te)?;

        for block in &self.blocks {
            let p_first = next2();
            let p_time = next2();
            let p_second = next2();
            let tp = block.time_proj.forward_tape(tape, te, &p_time)?;
            let tp = tape.gather_rows(tp, lookup.clone())?;
            let u = block.first.forward_tape(tape, h, &p_first)?;
            let u = tape.add(u, tp)?;
            let u = tape.silu(u)?;
            let delta = block.second.forward_tape(tape, u, &p_second)?;
            h = tape.add(h, delta)?;
        }
        let p_head = next2();
        let h = tape.silu(h)?;
        self.head.forward_tape(tape, h, &p_head)
    }
}

impl Parameterized for DenoiserModel {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in [&self.input, &self.time_in, &self.time_out] {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for b in &self.blocks {
            for l in [&b.first, &b.time_proj, &b.second] {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in [&mut self.input, &mut self.time_in, &mut self.time_out] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for b in &mut self.blocks {
            for l in [&mut b.first, &mut b.time_proj, &mut b.second] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

impl NoisePredictor for DenoiserModel {
    type Prepared = PreparedConditioning;

    fn num_steps(&self) -> usize {
        self.steps
    }

    fn prepare(&self, cond: &Conditioning) -> Result<Self::Prepared> {
        DenoiserModel::prepare(self, cond)
    }

    fn predict(&self, prepared: &Self::Prepared, y_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self.predict_prepared(prepared, y_t, t)
    }
}
