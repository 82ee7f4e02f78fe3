//! Exact best-return oracles.
//!
//! Both oracles average over the same mixture the sampler produces:
//! N uniform on {1..M−1}, controlled slot subsets uniform given N, and
//! teammate families uniform (noise-free canonical instances). Policies
//! are centralized and deterministic, observing the pooled observations
//! of the controlled slots plus the composition — exactly the information
//! the model receives.
//!
//! `oracle_optimal_return` maximizes over history-dependent policies via
//! expectimax on the pooled-history tree. Branches (one per family) that
//! have diverged in pooled history can never be distinguished-or-confused
//! again, so their subtrees decompose additively, and a branch that is
//! alone in its information set switches to memoized backward induction
//! over global states.
//!
//! `oracle_memoryless_return` maximizes over policies that map the current
//! pooled observation to a joint action. The same observation string must
//! get the same action everywhere, which couples subtrees; the enumerator
//! carries a policy dictionary to enforce that. Both tasks embed the
//! timestep in every observation, so constraints never cross timesteps.
//! This search is exponential and only feasible for micro instances; the
//! signal task has a proven closed form (below) which the enumerator
//! cross-checks in tests.

use std::collections::{BTreeMap, HashMap};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{Env, EnvError, EpisodeContext, Observation, SignalGame, TaskEnv};
use crate::teammates::{TaskLayout, TeammateError, TeammateInstance};

/// Enforced cap on evaluated policy branches.
pub const BRANCH_CAP: u64 = 10_000_000;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error(
        "oracle branch cap of {cap} exceeded; shrink the instance \
         (fewer agents, families, or steps)"
    )]
    BranchCap { cap: u64 },

    #[error("environment error during oracle search: {0}")]
    Env(#[from] EnvError),

    #[error("teammate error during oracle search: {0}")]
    Teammate(#[from] TeammateError),
}

#[derive(Clone)]
struct Branch {
    env: TaskEnv,
    obs: Vec<Observation>,
    family: usize,
    weight: f64,
    ret: f64,
}

struct EngineCtx {
    layout: TaskLayout,
    controlled: Vec<usize>,
    num_actions: usize,
    cap: u64,
    budget: u64,
}

impl EngineCtx {
    fn charge(&mut self) -> Result<(), OracleError> {
        self.budget += 1;
        if self.budget > self.cap {
            return Err(OracleError::BranchCap { cap: self.cap });
        }
        Ok(())
    }
}

/// All (controlled subset, probability) pairs of the sampling mixture.
fn compositions(num_agents: usize) -> Vec<(Vec<usize>, f64)> {
    fn subsets(m: usize, n: usize) -> Vec<Vec<usize>> {
        fn rec(start: usize, m: usize, n: usize, acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if acc.len() == n {
                out.push(acc.clone());
                return;
            }
            for s in start..m {
                acc.push(s);
                rec(s + 1, m, n, acc, out);
                acc.pop();
            }
        }
        let mut out = Vec::new();
        rec(0, m, n, &mut Vec::new(), &mut out);
        out
    }

    let mut out = Vec::new();
    let p_n = 1.0 / (num_agents - 1) as f64;
    for n in 1..num_agents {
        let subs = subsets(num_agents, n);
        let p = p_n / subs.len() as f64;
        for s in subs {
            out.push((s, p));
        }
    }
    out
}

fn pooled_key(branch: &Branch, controlled: &[usize]) -> Vec<u64> {
    let mut key = Vec::new();
    for &slot in controlled {
        key.extend(branch.obs[slot].bits());
    }
    key
}

fn init_branches(
    proto: &TaskEnv,
    num_families: usize,
    seed: u64,
    controlled: &[usize],
    weight: f64,
) -> Vec<Branch> {
    (0..num_families)
        .map(|family| {
            let mut env = proto.clone();
            let obs = env.reset(&EpisodeContext {
                seed,
                controlled_slots: controlled.to_vec(),
                teammate_family: family,
            });
            Branch {
                env,
                obs,
                family,
                weight: weight / num_families as f64,
                ret: 0.0,
            }
        })
        .collect()
}

/// Step one branch: assigned actions on controlled slots, canonical
/// scripted behavior on the rest.
fn step_branch(
    branch: &mut Branch,
    ctx: &EngineCtx,
    actions: &[usize],
) -> Result<(), OracleError> {
    let m = branch.env.spec().num_agents;
    let t = branch.env.time();
    let mate = TeammateInstance::canonical(branch.family);
    // Canonical instances are noise-free and never consume randomness.
    let mut dummy_rng = ChaCha8Rng::seed_from_u64(0);
    let mut joint = vec![0usize; m];
    let mut ci = 0;
    for slot in 0..m {
        if ci < ctx.controlled.len() && ctx.controlled[ci] == slot {
            joint[slot] = actions[ci];
            ci += 1;
        } else {
            joint[slot] = mate.act(&ctx.layout, &branch.obs[slot], t, &mut dummy_rng)?;
        }
    }
    let result = branch.env.step(&joint)?;
    branch.obs = result.observations;
    branch.ret += result.reward;
    Ok(())
}

fn action_tuples(num_actions: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(num_actions.pow(n as u32));
    let mut current = vec![0usize; n];
    loop {
        out.push(current.clone());
        let mut i = 0;
        loop {
            if i == n {
                return out;
            }
            current[i] += 1;
            if current[i] < num_actions {
                break;
            }
            current[i] = 0;
            i += 1;
        }
    }
}

// ---------------------------------------------------------------------
// Optimal (history-dependent) oracle
// ---------------------------------------------------------------------

/// Best expected return over deterministic policies of the pooled
/// controlled history, for the sampler's composition/family mixture.
pub fn oracle_optimal_return(
    proto: &TaskEnv,
    num_families: usize,
    reset_seed: u64,
) -> Result<f64, OracleError> {
    oracle_optimal_return_with_cap(proto, num_families, reset_seed, BRANCH_CAP)
}

pub fn oracle_optimal_return_with_cap(
    proto: &TaskEnv,
    num_families: usize,
    reset_seed: u64,
    cap: u64,
) -> Result<f64, OracleError> {
    let mut total = 0.0;
    for (controlled, weight) in compositions(proto.spec().num_agents) {
        let mut ctx = EngineCtx {
            layout: proto.layout(),
            num_actions: proto.spec().num_actions,
            controlled: controlled.clone(),
            cap,
            budget: 0,
        };
        let branches = init_branches(proto, num_families, reset_seed, &controlled, weight);
        let mut memo: HashMap<(usize, Vec<u64>), f64> = HashMap::new();
        total += solve_optimal(branches, &mut ctx, &mut memo)?;
    }
    Ok(total)
}

fn solve_optimal(
    branches: Vec<Branch>,
    ctx: &mut EngineCtx,
    memo: &mut HashMap<(usize, Vec<u64>), f64>,
) -> Result<f64, OracleError> {
    let mut total = 0.0;
    let mut live: Vec<Branch> = Vec::with_capacity(branches.len());
    for b in branches {
        if b.env.is_done() {
            total += b.weight * b.ret;
        } else {
            live.push(b);
        }
    }
    if live.is_empty() {
        return Ok(total);
    }

    // Branches whose pooled observations differ have diverged histories;
    // the policy may treat them independently from here on.
    let mut groups: BTreeMap<Vec<u64>, Vec<Branch>> = BTreeMap::new();
    for b in live {
        groups.entry(pooled_key(&b, &ctx.controlled)).or_default().push(b);
    }
    if groups.len() > 1 {
        for (_, group) in groups {
            total += solve_optimal(group, ctx, memo)?;
        }
        return Ok(total);
    }
    let group = groups.into_values().next().unwrap();

    if group.len() == 1 {
        let b = group.into_iter().next().unwrap();
        let future = best_single(&b, ctx, memo)?;
        return Ok(total + b.weight * (b.ret + future));
    }

    let mut best = f64::NEG_INFINITY;
    for actions in action_tuples(ctx.num_actions, ctx.controlled.len()) {
        ctx.charge()?;
        let mut stepped = group.clone();
        for b in stepped.iter_mut() {
            step_branch(b, ctx, &actions)?;
        }
        let v = solve_optimal(stepped, ctx, memo)?;
        if v > best {
            best = v;
        }
    }
    Ok(total + best)
}

/// Backward induction over global states for a branch that is alone in
/// its information set: the policy knows the family, so the optimum
/// depends only on the environment state. Returns the best future return.
fn best_single(
    branch: &Branch,
    ctx: &mut EngineCtx,
    memo: &mut HashMap<(usize, Vec<u64>), f64>,
) -> Result<f64, OracleError> {
    if branch.env.is_done() {
        return Ok(0.0);
    }
    let key = (branch.family, branch.env.state_key());
    if let Some(&v) = memo.get(&key) {
        return Ok(v);
    }
    let mut best = f64::NEG_INFINITY;
    for actions in action_tuples(ctx.num_actions, ctx.controlled.len()) {
        ctx.charge()?;
        let mut next = branch.clone();
        let before = next.ret;
        step_branch(&mut next, ctx, &actions)?;
        let reward = next.ret - before;
        let v = reward + best_single(&next, ctx, memo)?;
        if v > best {
            best = v;
        }
    }
    memo.insert(key, best);
    Ok(best)
}

// ---------------------------------------------------------------------
// Memoryless (reactive) oracle
// ---------------------------------------------------------------------

/// Best expected return over deterministic policies of the *current*
/// pooled observation only.
///
/// The signal task uses a closed form (see `signal_memoryless_value`);
/// everything else runs the exact enumerator, which is only feasible for
/// micro instances and errors out at the branch cap.
pub fn oracle_memoryless_return(
    proto: &TaskEnv,
    num_families: usize,
    reset_seed: u64,
) -> Result<f64, OracleError> {
    match proto {
        TaskEnv::Signal(env) => Ok(signal_memoryless_value(env, num_families)),
        TaskEnv::Grid(_) => {
            memoryless_return_enumerated(proto, num_families, reset_seed, BRANCH_CAP)
        }
    }
}

/// Closed-form memoryless value of the signal task, for noise-free
/// canonical teammates and any composition mixture.
///
/// Reasoning, valid for every composition separately:
/// - T = 1: the only observation carries no action history, so one fixed
///   guess wins with probability 1/F.
/// - T = 2: the quiet step is t = 0, so an optimal policy noops at t = 0;
///   at t = 1 the observation shows the teammate's signal and each family
///   produces a distinct observation string, so the policy reads off the
///   code: value 1.
/// - T ≥ 3: any branch where a controlled agent leaves noop at t = T−2 is
///   spoiled and worthless, so on every surviving branch all agents noop
///   at T−2 while teammates noop from t = 1 onward. Observations carry
///   one step of action history, hence the final observation is the same
///   string on every surviving branch, forcing one shared guess: value
///   1/F, achieved by "noop until the end, then guess code c".
fn signal_memoryless_value(env: &SignalGame, num_families: usize) -> f64 {
    let cfg = env.config();
    assert!(
        num_families <= cfg.num_types,
        "families beyond the code alphabet collapse; use num_families <= num_types"
    );
    if cfg.horizon == 2 {
        1.0
    } else {
        1.0 / num_families as f64
    }
}

/// Exact enumeration over memoryless deterministic policies. Exposed so
/// tests can cross-check the closed form on micro instances.
pub fn memoryless_return_enumerated(
    proto: &TaskEnv,
    num_families: usize,
    reset_seed: u64,
    cap: u64,
) -> Result<f64, OracleError> {
    let mut total = 0.0;
    for (controlled, weight) in compositions(proto.spec().num_agents) {
        let mut ctx = EngineCtx {
            layout: proto.layout(),
            num_actions: proto.spec().num_actions,
            controlled: controlled.clone(),
            cap,
            budget: 0,
        };
        let branches = init_branches(proto, num_families, reset_seed, &controlled, weight);
        let mut policy: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
        total += solve_memoryless(branches, &mut ctx, &mut policy)?;
    }
    Ok(total)
}

fn solve_memoryless(
    branches: Vec<Branch>,
    ctx: &mut EngineCtx,
    policy: &mut BTreeMap<Vec<u64>, Vec<usize>>,
) -> Result<f64, OracleError> {
    let mut total = 0.0;
    let mut live: Vec<Branch> = Vec::with_capacity(branches.len());
    for b in branches {
        if b.env.is_done() {
            total += b.weight * b.ret;
        } else {
            live.push(b);
        }
    }
    if live.is_empty() {
        return Ok(total);
    }

    let keys: Vec<Vec<u64>> = live
        .iter()
        .map(|b| pooled_key(b, &ctx.controlled))
        .collect();
    let mut undecided: Vec<Vec<u64>> = Vec::new();
    for k in &keys {
        if !policy.contains_key(k) && !undecided.contains(k) {
            undecided.push(k.clone());
        }
    }
    undecided.sort();

    Ok(total + assign_and_step(&live, &keys, &undecided, 0, ctx, policy)?)
}

fn assign_and_step(
    live: &[Branch],
    keys: &[Vec<u64>],
    undecided: &[Vec<u64>],
    idx: usize,
    ctx: &mut EngineCtx,
    policy: &mut BTreeMap<Vec<u64>, Vec<usize>>,
) -> Result<f64, OracleError> {
    if idx == undecided.len() {
        let mut stepped = live.to_vec();
        for (b, k) in stepped.iter_mut().zip(keys) {
            let actions = policy.get(k).expect("assigned").clone();
            step_branch(b, ctx, &actions)?;
        }
        return solve_memoryless(stepped, ctx, policy);
    }
    let mut best = f64::NEG_INFINITY;
    for actions in action_tuples(ctx.num_actions, ctx.controlled.len()) {
        ctx.charge()?;
        policy.insert(undecided[idx].clone(), actions);
        let v = assign_and_step(live, keys, undecided, idx + 1, ctx, policy)?;
        policy.remove(&undecided[idx]);
        if v > best {
            best = v;
        }
    }
    Ok(best)
}
