//! Unmasked transformer over `[Z_aug ; queries]`, mean-pooled and projected
//! into the text embedding space.

use ndcore::nn::{self, Mask};
use ndcore::{Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal, BlockParams, Binder, ParamGroup, ParamId, ParamStore, Registrar};

/// Which predictor outputs enter the mean pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    AllTokens,
    QueryOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub layers: usize,
    pub heads: usize,
    pub n_query: usize,
    pub pool: PoolMode,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { layers: 4, heads: 4, n_query: 4, pool: PoolMode::AllTokens }
    }
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub queries: Option<ParamId>,
    pub blocks: Vec<BlockParams>,
    pub w_out: ParamId,
    pub config: PredictorConfig,
    pub d_v: usize,
    pub d_t: usize,
}

impl Predictor {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_v: usize,
        d_t: usize,
        config: PredictorConfig,
    ) -> Result<Self> {
        if d_v % config.heads != 0 {
            return Err(Error::Divisibility(format!("predictor width {d_v}"), config.heads));
        }
        if config.pool == PoolMode::QueryOnly && config.n_query == 0 {
            return Err(Error::Config("query-only pooling needs at least one query token".into()));
        }
        let mut reg = Registrar { store, group: ParamGroup::Predictor, locked: false };
        let queries = (config.n_query > 0)
            .then(|| reg.add("pred.queries".into(), normal(rng, &[config.n_query, d_v], 1.0)));
        let blocks = (0..config.layers)
            .map(|l| BlockParams::new(&mut reg, rng, &format!("pred.block{l}"), d_v))
            .collect();
        let w_out = reg.add("pred.w_out".into(), normal(rng, &[d_v, d_t], 1.0 / (d_v as f64).sqrt()));
        Ok(Self { queries, blocks, w_out, config, d_v, d_t })
    }

    /// Runs the blocks over `[z_aug ; queries]` and returns all `N + n_query`
    /// output states.
    pub fn predict_tokens(&self, tape: &mut Tape, binder: &mut Binder, z_aug: Var) -> Result<Var> {
        let (n, _) = tape.value(z_aug).dims2()?;
        if n == 0 {
            return Err(Error::EmptySequence("predictor input"));
        }
        let mut x = match self.queries {
            Some(q) => {
                let q = binder.bind(tape, q);
                tape.concat_rows(&[z_aug, q])?
            }
            None => z_aug,
        };
        for block in &self.blocks {
            let p = block.bind(binder, tape);
            x = nn::self_attention_block(tape, x, &p, self.config.heads, Mask::None)?;
        }
        Ok(x)
    }

    /// `h = mean(outputs) · W_out` over the rows selected by the pool mode.
    pub fn pool_project(&self, tape: &mut Tape, binder: &mut Binder, outputs: Var) -> Result<Var> {
        let (rows, _) = tape.value(outputs).dims2()?;
        let pooled_in = match self.config.pool {
            PoolMode::AllTokens => outputs,
            PoolMode::QueryOnly => {
                let nq = self.config.n_query;
                tape.slice_rows(outputs, rows - nq, nq)?
            }
        };
        let mean = tape.mean_rows(pooled_in)?;
        self.project(tape, binder, mean)
    }

    /// Per-token embedding `outputs[i] · W_out`.
    pub fn token_embed(&self, tape: &mut Tape, binder: &mut Binder, outputs: Var, i: usize) -> Result<Var> {
        let (rows, _) = tape.value(outputs).dims2()?;
        if i >= rows {
            return Err(Error::Range { what: "token", index: i, limit: rows });
        }
        let row = tape.slice_rows(outputs, i, 1)?;
        self.project(tape, binder, row)
    }

    /// Projects every output row at once: `[N', D_t]`.
    pub fn embed_all(&self, tape: &mut Tape, binder: &mut Binder, outputs: Var) -> Result<Var> {
        let w = binder.bind(tape, self.w_out);
        Ok(tape.matmul(outputs, w)?)
    }

    fn project(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = binder.bind(tape, self.w_out);
        let row = tape.reshape(x, &[1, self.d_v])?;
        let out = tape.matmul(row, w)?;
        Ok(tape.reshape(out, &[self.d_t])?)
    }
}
