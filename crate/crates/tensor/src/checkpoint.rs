//! Unrolled computations with optional segment recomputation.
//!
//! An [`Unrolled`] computation is a prologue that maps parameters to an
//! initial state, followed by `n` steps that each map a state to the next
//! state and may emit a scalar loss term. [`run_full`] records everything on
//! one tape. [`run_checkpointed`] keeps only the states at segment
//! boundaries, then replays each segment on a fresh tape during the reverse
//! sweep, seeding the replayed tape with the adjoints accumulated so far.
//! Because the replay records the same ops in the same order and the seeds
//! start each gradient buffer at the value the single tape would hold at that
//! point, the two routes produce bit-identical gradients.

use std::ops::Range;

use crate::{Tape, Tensor, TensorError, Var};

/// What one step records: the next state and an optional loss term.
pub struct StepOutput {
    pub state: Vec<Var>,
    pub loss: Option<Var>,
}

pub trait Unrolled {
    fn n_steps(&self) -> usize;

    /// Builds the initial state from the parameters.
    fn prologue(&self, tape: &mut Tape, params: &[Var]) -> Vec<Var>;

    /// Advances `state` by one step. `t` is the 1-based index of the state
    /// being produced.
    fn step(&self, tape: &mut Tape, params: &[Var], state: &[Var], t: usize) -> StepOutput;
}

/// A parameter handed to an unrolled computation.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn trainable(value: Tensor) -> Self {
        Self { value, trainable: true }
    }

    pub fn frozen(value: Tensor) -> Self {
        Self { value, trainable: false }
    }
}

/// Memory and work counters of one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActivationStats {
    /// Largest number of floats alive at once: tape values plus stored
    /// boundary states.
    pub peak_live_floats: usize,
    /// Ops recorded across all forward passes, replays included.
    pub forward_ops: usize,
}

#[derive(Clone, Debug)]
pub struct UnrolledGradient {
    pub loss: f64,
    /// One entry per parameter; `None` for frozen parameters.
    pub grads: Vec<Option<Tensor>>,
    pub stats: ActivationStats,
}

/// Segments of steps recomputed as a unit during the reverse sweep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecomputePlan {
    segments: Vec<Range<usize>>,
}

impl RecomputePlan {
    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    /// One segment per step.
    pub fn per_step(n_steps: usize) -> Self {
        Self {
            segments: (0..n_steps).map(|s| s..s + 1).collect(),
        }
    }
}

/// Builds a plan from segment start indices over steps `0..n_steps`.
/// `boundaries` must begin at 0 and increase strictly; each segment runs to
/// the next boundary or to the end.
pub fn checkpoint_segment(n_steps: usize, boundaries: &[usize]) -> Result<RecomputePlan, TensorError> {
    if n_steps == 0 {
        if boundaries.is_empty() {
            return Ok(RecomputePlan { segments: Vec::new() });
        }
        return Err(TensorError::Plan("no steps to segment".into()));
    }
    if boundaries.first() != Some(&0) {
        return Err(TensorError::Plan("first boundary must be step 0".into()));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TensorError::Plan("boundaries must increase strictly".into()));
    }
    if *boundaries.last().unwrap() >= n_steps {
        return Err(TensorError::Plan(format!(
            "boundary {} outside 0..{n_steps}",
            boundaries.last().unwrap()
        )));
    }
    let mut segments = Vec::with_capacity(boundaries.len());
    for (k, &start) in boundaries.iter().enumerate() {
        let end = boundaries.get(k + 1).copied().unwrap_or(n_steps);
        segments.push(start..end);
    }
    Ok(RecomputePlan { segments })
}

fn load_params(tape: &mut Tape, params: &[Param]) -> Vec<Var> {
    params
        .iter()
        .map(|p| tape.leaf(p.value.clone(), p.trainable))
        .collect()
}

/// Records prologue and all steps on a single tape, then runs one backward
/// sweep.
pub fn run_full<U: Unrolled + ?Sized>(
    unrolled: &U,
    params: &[Param],
) -> Result<UnrolledGradient, TensorError> {
    let mut tape = Tape::new();
    let pvars = load_params(&mut tape, params);
    let mut state = unrolled.prologue(&mut tape, &pvars);
    let mut loss: Option<Var> = None;
    for t in 1..=unrolled.n_steps() {
        let out = unrolled.step(&mut tape, &pvars, &state, t);
        state = out.state;
        if let Some(term) = out.loss {
            loss = Some(match loss {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
    }
    let stats = ActivationStats {
        peak_live_floats: tape.stored_floats(),
        forward_ops: tape.len(),
    };
    let Some(loss) = loss else {
        return Err(TensorError::Plan("unrolled computation produced no loss".into()));
    };
    let loss_value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let grads = params
        .iter()
        .zip(&pvars)
        .map(|(p, v)| if p.trainable { grads.take(*v) } else { None })
        .collect();
    Ok(UnrolledGradient {
        loss: loss_value,
        grads,
        stats,
    })
}

/// Same result as [`run_full`], holding at most one segment's tape plus the
/// boundary states in memory at a time.
pub fn run_checkpointed<U: Unrolled + ?Sized>(
    unrolled: &U,
    params: &[Param],
    plan: &RecomputePlan,
) -> Result<UnrolledGradient, TensorError> {
    let n = unrolled.n_steps();
    let covered: Vec<usize> = plan.segments.iter().flat_map(|s| s.clone()).collect();
    if covered != (0..n).collect::<Vec<_>>() {
        return Err(TensorError::Plan(format!(
            "plan does not partition 0..{n} into consecutive segments"
        )));
    }

    let mut stats = ActivationStats::default();
    let mut boundary_floats = 0usize;

    // Forward sweep: keep the state entering every segment.
    let mut tape = Tape::new();
    let pvars = load_params(&mut tape, params);
    let state_vars = unrolled.prologue(&mut tape, &pvars);
    tape.check_finite()?;
    let mut state: Vec<Tensor> = state_vars.iter().map(|v| tape.value(*v).clone()).collect();
    stats.forward_ops += tape.len();
    stats.peak_live_floats = tape.stored_floats();
    drop(tape);

    let mut boundaries: Vec<Vec<Tensor>> = Vec::with_capacity(plan.segments.len());
    let mut loss_value: Option<f64> = None;
    for (seg_index, seg) in plan.segments.iter().enumerate() {
        boundary_floats += state.iter().map(Tensor::len).sum::<usize>();
        boundaries.push(state.clone());
        let mut tape = Tape::new();
        let pvars = load_params(&mut tape, params);
        let mut svars: Vec<Var> = state.iter().map(|s| tape.constant(s.clone())).collect();
        for t in seg.clone() {
            let out = unrolled.step(&mut tape, &pvars, &svars, t + 1);
            svars = out.state;
            if let Some(term) = out.loss {
                let v = tape.value(term).item();
                loss_value = Some(match loss_value {
                    None => v,
                    Some(acc) => acc + v,
                });
            }
        }
        if let Some(index) = tape.first_nondeterministic() {
            return Err(TensorError::NonDeterministic {
                segment: seg_index,
                op: tape.op_name(index),
            });
        }
        tape.check_finite()?;
        stats.forward_ops += tape.len();
        stats.peak_live_floats = stats.peak_live_floats.max(tape.stored_floats() + boundary_floats);
        state = svars.iter().map(|v| tape.value(*v).clone()).collect();
    }
    let Some(loss_value) = loss_value else {
        return Err(TensorError::Plan("unrolled computation produced no loss".into()));
    };

    // Reverse sweep.
    let mut param_acc: Vec<Option<Tensor>> = vec![None; params.len()];
    let mut state_adj: Vec<Option<Tensor>> = vec![None; state.len()];
    for seg in plan.segments.iter().rev() {
        let entry = boundaries.pop().expect("one boundary per segment");
        let mut tape = Tape::new();
        let pvars = load_params(&mut tape, params);
        let inputs: Vec<Var> = entry.iter().map(|s| tape.param(s.clone())).collect();
        let mut svars = inputs.clone();
        let mut loss_terms = Vec::new();
        for t in seg.clone() {
            let out = unrolled.step(&mut tape, &pvars, &svars, t + 1);
            svars = out.state;
            loss_terms.extend(out.loss);
        }
        stats.forward_ops += tape.len();
        let live = tape.stored_floats() + boundaries.iter().flatten().map(Tensor::len).sum::<usize>();
        stats.peak_live_floats = stats.peak_live_floats.max(live);

        let mut seeds = Vec::new();
        for (v, adj) in svars.iter().zip(state_adj.iter_mut()) {
            if let Some(a) = adj.take() {
                seeds.push((*v, a));
            }
        }
        for term in loss_terms {
            seeds.push((term, Tensor::scalar(1.0)));
        }
        for (v, acc) in pvars.iter().zip(param_acc.iter_mut()) {
            if let Some(a) = acc.take() {
                seeds.push((*v, a));
            }
        }
        let mut grads = tape.backward_seeded(seeds)?;
        for (k, v) in inputs.iter().enumerate() {
            state_adj[k] = grads.take(*v);
        }
        for (k, (p, v)) in params.iter().zip(&pvars).enumerate() {
            if p.trainable {
                param_acc[k] = grads.take(*v);
            }
        }
    }

    // Prologue.
    let mut tape = Tape::new();
    let pvars = load_params(&mut tape, params);
    let out = unrolled.prologue(&mut tape, &pvars);
    stats.forward_ops += tape.len();
    let mut seeds = Vec::new();
    for (v, adj) in out.iter().zip(state_adj.iter_mut()) {
        if let Some(a) = adj.take() {
            if tape.requires_grad(*v) {
                seeds.push((*v, a));
            }
        }
    }
    for (v, acc) in pvars.iter().zip(param_acc.iter_mut()) {
        if let Some(a) = acc.take() {
            seeds.push((*v, a));
        }
    }
    let mut grads = tape.backward_seeded(seeds)?;
    let grads = params
        .iter()
        .zip(&pvars)
        .map(|(p, v)| if p.trainable { grads.take(*v) } else { None })
        .collect();
    Ok(UnrolledGradient {
        loss: loss_value,
        grads,
        stats,
    })
}
