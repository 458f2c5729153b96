use super::{ActOptions, FactorizedPolicy};
use crate::bench::{Agent, Plan, RolloutContext};
use crate::composition::EvalCounter;
use crate::error::Result;
use crate::numerics::{Matrix, Rng};

/// Receding-horizon driver: each plan is the first `exec_horizon` steps of a
/// freshly sampled window.
pub struct PolicyAgent<'a> {
    pub policy: &'a FactorizedPolicy,
    pub options: ActOptions,
    pub counter: Option<&'a EvalCounter>,
}

impl<'a> PolicyAgent<'a> {
    pub fn new(policy: &'a FactorizedPolicy) -> Self {
        Self {
            policy,
            options: ActOptions::default(),
            counter: None,
        }
    }

    pub fn with_top_k(mut self, top_k: Option<usize>) -> Self {
        self.options.top_k = top_k;
        self
    }

    pub fn solo(mut self, component: usize) -> Self {
        self.options.solo = Some(component);
        self
    }

    pub fn with_counter(mut self, counter: &'a EvalCounter) -> Self {
        self.counter = Some(counter);
        self
    }
}

impl Agent for PolicyAgent<'_> {
    fn plan_batch(&self, contexts: &mut [&mut RolloutContext]) -> Result<Vec<Plan>> {
        let p = self.policy;
        let mut obs = Matrix::zeros(0, p.obs_dim());
        for ctx in contexts.iter() {
            let t = ctx.history.len() - 1;
            obs.push_row(&p.observation(&ctx.history, t, ctx.env.spec().task_id)?)?;
        }
        let mut rngs: Vec<Rng> = contexts.iter().map(|c| c.rng.clone()).collect();
        let out = p.act_batch(&obs, &mut rngs, self.options, self.counter)?;
        for (ctx, rng) in contexts.iter_mut().zip(rngs) {
            ctx.rng = rng;
        }
        Ok(out
            .windows
            .into_iter()
            .enumerate()
            .map(|(r, w)| Plan {
                actions: w.into_iter().take(p.config.exec_horizon).collect(),
                weights: Some(out.weights.row(r).to_vec()),
            })
            .collect())
    }
}
