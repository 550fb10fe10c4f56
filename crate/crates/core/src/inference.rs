//! Noise-free state rolling, future-environment prediction, top-K ranking
//! and interventions on the per-environment features.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::autodiff::{Graph, Tensor, Var};
use crate::dataio::divide_environments;
use crate::model::{self, CdrModel, GateMatrices, ModelVars};
use crate::par::*;

/// Users per inference graph. Fixed so results never depend on the pool.
pub const INFER_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error("unknown strategy '{0}' (expected latest-z, avg-predictions or avg-e)")]
    UnknownStrategy(String),
    #[error("replacement feature has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("environment {index} out of range for {envs} environments")]
    EnvOutOfRange { index: usize, envs: usize },
}

/// How the held-out environment is predicted from the rolled state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Decode the latest preference state.
    LatestZ,
    /// Average the softmax predictions of every environment.
    AvgPredictions,
    /// Average the features, take one more transition, decode.
    AvgE,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Self::LatestZ, Self::AvgPredictions, Self::AvgE];

    pub fn name(self) -> &'static str {
        match self {
            Self::LatestZ => "latest-z",
            Self::AvgPredictions => "avg-predictions",
            Self::AvgE => "avg-e",
        }
    }
}

impl FromStr for Strategy {
    type Err = InferenceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "latest-z" | "1" => Ok(Self::LatestZ),
            "avg-predictions" | "2" => Ok(Self::AvgPredictions),
            "avg-e" | "3" => Ok(Self::AvgE),
            other => Err(InferenceError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Posterior-mean path of one user: `e[t]` has length K, `z[t]` length H.
#[derive(Clone, Debug, PartialEq)]
pub struct RolledState {
    pub e: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

impl RolledState {
    pub fn num_envs(&self) -> usize {
        self.e.len()
    }
}

/// Which environments an intervention replaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvTarget {
    Latest,
    All,
    Index(usize),
}

/// `do(E_t = e)` at the targeted environments.
#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    pub target: EnvTarget,
    pub e: Vec<f64>,
}

impl Intervention {
    fn applies(&self, t: usize, envs: usize) -> bool {
        match self.target {
            EnvTarget::Latest => t + 1 == envs,
            EnvTarget::All => true,
            EnvTarget::Index(i) => i == t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    pub user: usize,
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
}

impl Recommendation {
    /// One `user=… items=… scores=…` record.
    pub fn to_record(&self, user_key: &str, item_key: impl Fn(u32) -> String) -> String {
        let items: Vec<String> = self.items.iter().map(|&i| item_key(i)).collect();
        let scores: Vec<String> = self.scores.iter().map(|s| format!("{s:.6}")).collect();
        format!(
            "user={user_key} items={} scores={}",
            items.join(","),
            scores.join(",")
        )
    }
}

/// A model with its noise-free gates, ready to score users.
pub struct Engine<'a> {
    model: &'a CdrModel,
    gates: GateMatrices,
}

struct Bound {
    g: Graph,
    mv: ModelVars,
    norm_z: Var,
    norm_x: Var,
}

impl<'a> Engine<'a> {
    pub fn new(model: &'a CdrModel) -> Self {
        // Noise-free gates do not depend on the noise scale.
        let gates = model.gate_matrices(1.0, None);
        Self { model, gates }
    }

    pub fn model(&self) -> &CdrModel {
        self.model
    }

    pub fn gates(&self) -> &GateMatrices {
        &self.gates
    }

    fn bind(&self) -> Bound {
        let mut g = Graph::new();
        let mv = self.model.bind(&mut g);
        let norm_z = g.constant(self.gates.norm_z.clone());
        let norm_x = g.constant(self.gates.norm_x.clone());
        Bound { g, mv, norm_z, norm_x }
    }

    /// Rolls one user's history through `t_i` environments.
    pub fn roll_state(
        &self,
        history: &[u32],
        t_i: usize,
        intervention: Option<&Intervention>,
    ) -> Result<RolledState, InferenceError> {
        Ok(self
            .roll_states(&[history], t_i, &[intervention.cloned()])?
            .pop()
            .expect("one state per history"))
    }

    /// Rolls many users. Histories shorter than `t_i` use one environment
    /// per interaction; an empty history becomes one empty environment.
    pub fn roll_states(
        &self,
        histories: &[&[u32]],
        t_i: usize,
        interventions: &[Option<Intervention>],
    ) -> Result<Vec<RolledState>, InferenceError> {
        let k = self.model.dims.k;
        for iv in interventions.iter().flatten() {
            if iv.e.len() != k {
                return Err(InferenceError::LengthMismatch {
                    expected: k,
                    got: iv.e.len(),
                });
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (u, h) in histories.iter().enumerate() {
            let t = t_i.min(h.len()).max(1);
            if t < t_i {
                log::debug!("history of length {} rolled with {t} environments", h.len());
            }
            groups.entry(t).or_default().push(u);
        }
        for (&t, members) in &groups {
            for &u in members {
                if let Some(Intervention {
                    target: EnvTarget::Index(i),
                    ..
                }) = interventions.get(u).and_then(Option::as_ref)
                {
                    if *i >= t {
                        return Err(InferenceError::EnvOutOfRange { index: *i, envs: t });
                    }
                }
            }
        }

        let mut out: Vec<Option<RolledState>> = vec![None; histories.len()];
        for (&t, members) in &groups {
            let chunks: Vec<&[usize]> = members.chunks(INFER_CHUNK).collect();
            let rolled: Vec<Vec<RolledState>> = chunks
                .par_iter()
                .map(|chunk| self.roll_chunk(histories, chunk, t, interventions))
                .collect();
            for (chunk, states) in chunks.iter().zip(rolled) {
                for (&u, s) in chunk.iter().zip(states) {
                    out[u] = Some(s);
                }
            }
        }
        Ok(out.into_iter().map(|s| s.expect("every user rolled")).collect())
    }

    fn roll_chunk(
        &self,
        histories: &[&[u32]],
        users: &[usize],
        t_envs: usize,
        interventions: &[Option<Intervention>],
    ) -> Vec<RolledState> {
        let items = self.model.dims.items;
        let (k, h) = (self.model.dims.k, self.model.dims.h);
        let slices: Vec<Vec<Vec<u32>>> = users
            .iter()
            .map(|&u| {
                if histories[u].is_empty() {
                    vec![Vec::new()]
                } else {
                    divide_environments(histories[u], t_envs)
                        .expect("environment count clamped to history length")
                        .envs
                }
            })
            .collect();
        let mut b = self.bind();
        let g = &mut b.g;
        let rows = users.len();
        let mut z_prev = g.constant(Tensor::zeros(rows, h));
        let mut states: Vec<RolledState> = vec![
            RolledState {
                e: Vec::with_capacity(t_envs),
                z: Vec::with_capacity(t_envs),
            };
            rows
        ];
        for t in 0..t_envs {
            let lists: Vec<&[u32]> = slices.iter().map(|s| s[t].as_slice()).collect();
            let x = model::multihot_batch(&lists, items);
            let (mean, _) = model::encode(g, &b.mv, &x, None);
            let mut e_val = g.value(mean).clone();
            let mut replaced = false;
            for (r, &u) in users.iter().enumerate() {
                if let Some(iv) = interventions.get(u).and_then(Option::as_ref) {
                    if iv.applies(t, t_envs) {
                        e_val.data_mut()[r * k..(r + 1) * k].copy_from_slice(&iv.e);
                        replaced = true;
                    }
                }
            }
            let e = if replaced { g.constant(e_val.clone()) } else { mean };
            let (zm, _) = model::transition(g, &b.mv, e, z_prev);
            for (r, st) in states.iter_mut().enumerate() {
                st.e.push(e_val.row_slice(r).to_vec());
                st.z.push(g.value(zm).row_slice(r).to_vec());
            }
            z_prev = zm;
        }
        states
    }

    /// Item scores for each state under `strategy`.
    pub fn predict(&self, states: &[RolledState], strategy: Strategy) -> Vec<Vec<f64>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (u, s) in states.iter().enumerate() {
            groups.entry(s.num_envs()).or_default().push(u);
        }
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); states.len()];
        for members in groups.values() {
            let chunks: Vec<&[usize]> = members.chunks(INFER_CHUNK).collect();
            let scored: Vec<Vec<Vec<f64>>> = chunks
                .par_iter()
                .map(|chunk| self.predict_chunk(states, chunk, strategy))
                .collect();
            for (chunk, rows) in chunks.iter().zip(scored) {
                for (&u, s) in chunk.iter().zip(rows) {
                    out[u] = s;
                }
            }
        }
        out
    }

    fn predict_chunk(&self, states: &[RolledState], users: &[usize], strategy: Strategy) -> Vec<Vec<f64>> {
        let mut b = self.bind();
        let g = &mut b.g;
        let rows = users.len();
        let t_envs = states[users[0]].num_envs();
        let stack = |g: &mut Graph, pick: &dyn Fn(&RolledState) -> &[f64]| {
            let data: Vec<Vec<f64>> = users.iter().map(|&u| pick(&states[u]).to_vec()).collect();
            g.constant(Tensor::from_rows(&data))
        };
        let decode = |g: &mut Graph, z: Var| {
            model::sparse_decode(g, z, b.norm_z, b.norm_x, b.mv.gamma_w, b.mv.gamma_b)
        };
        let out = match strategy {
            Strategy::LatestZ => {
                let z = stack(g, &|s| &s.z[t_envs - 1]);
                decode(g, z)
            }
            Strategy::AvgPredictions => {
                let mut acc: Option<Var> = None;
                for t in 0..t_envs {
                    let z = stack(g, &|s| &s.z[t]);
                    let logits = decode(g, z);
                    let p = g.softmax(logits);
                    acc = Some(match acc {
                        Some(a) => g.add(a, p),
                        None => p,
                    });
                }
                let sum = acc.expect("at least one environment");
                g.scale(sum, 1.0 / t_envs as f64)
            }
            Strategy::AvgE => {
                let k = self.model.dims.k;
                let avg: Vec<Vec<f64>> = users
                    .iter()
                    .map(|&u| {
                        let s = &states[u];
                        (0..k)
                            .map(|j| s.e.iter().map(|e| e[j]).sum::<f64>() / t_envs as f64)
                            .collect()
                    })
                    .collect();
                let e = g.constant(Tensor::from_rows(&avg));
                let z_last = stack(g, &|s| &s.z[t_envs - 1]);
                let (zm, _) = model::transition(g, &b.mv, e, z_last);
                decode(g, zm)
            }
        };
        (0..rows).map(|r| g.value(out).row_slice(r).to_vec()).collect()
    }

    /// Rolls and scores in one call.
    pub fn score(&self, histories: &[&[u32]], t_i: usize, strategy: Strategy) -> Vec<Vec<f64>> {
        let none = vec![None; histories.len()];
        let states = self
            .roll_states(histories, t_i, &none)
            .expect("no interventions to validate");
        self.predict(&states, strategy)
    }

    /// Scores after `do(E_t = e)`, then ranks excluding `mask`.
    #[allow(clippy::too_many_arguments)]
    pub fn intervene(
        &self,
        user: usize,
        history: &[u32],
        t_i: usize,
        intervention: &Intervention,
        strategy: Strategy,
        mask: &[u32],
        k: usize,
    ) -> Result<Recommendation, InferenceError> {
        let state = self.roll_state(history, t_i, Some(intervention))?;
        let scores = self.predict(std::slice::from_ref(&state), strategy).pop().expect("one row");
        Ok(rank_topk(user, &scores, mask, k))
    }
}

/// Top-`k` unmasked items by descending score, ties by ascending index.
pub fn rank_topk(user: usize, scores: &[f64], mask: &[u32], k: usize) -> Recommendation {
    let mut masked = vec![false; scores.len()];
    for &i in mask {
        if let Some(m) = masked.get_mut(i as usize) {
            *m = true;
        }
    }
    let mut cand: Vec<u32> = (0..scores.len() as u32).filter(|&i| !masked[i as usize]).collect();
    if k > cand.len() {
        log::warn!("requested top-{k} but only {} items are unmasked", cand.len());
    }
    let by_score = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    let k = k.min(cand.len());
    if k < cand.len() && k > 0 {
        cand.select_nth_unstable_by(k - 1, by_score);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_score);
    cand.truncate(k);
    Recommendation {
        user,
        scores: cand.iter().map(|&i| scores[i as usize]).collect(),
        items: cand,
    }
}
