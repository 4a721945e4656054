"""Synthetic two-modality tabular MDPs with exact dynamic-programming oracles.

The generated process is a severity chain with a static per-episode context
factor. A state is (severity u, context v) plus two absorbing resolution
states (recovery / decease). Each step either resolves the episode -- with a
survival probability that peaks at the action appropriate for (u, v) -- or
drifts the severity, independently of the action and of v. The structured
modality emits a severity-keyed feature vector, the note modality emits a
context-keyed embedding, so the best action is identifiable only from both
modalities together.

Because v is static and every within-episode mechanism (drift, termination)
is independent of v and of actions, the value of the best structured-only
policy is exactly the DP solution of the severity-aggregated MDP, and the
value of the best note-only policy is exactly computable by a forward
occupancy recursion. ``generate_mdp`` certifies both gaps at generation time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import (
    ActionIndex,
    Episode,
    JointObservation,
    N_ACTIONS,
    N_DOSE_LEVELS,
    DoseBins,
    OfflineDataset,
    Transition,
    assign_rewards,
)

Array = np.ndarray

# canonical per-level doses so that discretize(dose) round-trips exactly
LEVEL_BIN_EDGES = (0.5, 1.5, 2.5, 3.5)


class GeneratorError(ValueError):
    """Invalid generator configuration or failed gap certification."""


# ---------------------------------------------------------------------------
# Pseudo note embeddings
# ---------------------------------------------------------------------------

_BASIS_CACHE: dict[tuple[str, int, int], Array] = {}


def _orthonormal_basis(kind: str, d_n: int, seed: int) -> Array:
    key = (kind, d_n, seed)
    if key not in _BASIS_CACHE:
        digest = hashlib.sha256(f"{seed}|{kind}|{d_n}".encode()).digest()
        words = np.frombuffer(digest[:32], dtype=np.uint64)
        rng = np.random.default_rng(words)
        q, r = np.linalg.qr(rng.standard_normal((d_n, d_n)))
        q = q * np.where(np.diag(r) >= 0.0, 1.0, -1.0)
        _BASIS_CACHE[key] = q
    return _BASIS_CACHE[key]


def pseudo_embed(state_id: int, kind: str, d_n: int, seed: int) -> Array:
    """Deterministic unit-norm embedding for (state_id, kind).

    The first d_n ids per kind map to columns of a seeded orthonormal basis
    (pairwise cosine exactly 0); ids beyond that fall back to independent
    normalized Gaussian draws. Canonical kinds are "context" and "event".
    """
    if d_n < 1:
        raise GeneratorError(f"d_n must be >= 1, got {d_n}")
    if state_id < 0:
        raise GeneratorError(f"state_id must be nonnegative, got {state_id}")
    if state_id < d_n:
        return _orthonormal_basis(kind, d_n, seed)[:, state_id].copy()
    digest = hashlib.sha256(f"{seed}|{kind}|{d_n}|{state_id}".encode()).digest()
    rng = np.random.default_rng(np.frombuffer(digest[:32], dtype=np.uint64))
    v = rng.standard_normal(d_n)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularMDP:
    """Finite MDP over (severity, context) states plus two absorbing outcomes.

    Entering an absorbing state ends the episode; the reward of the terminal
    transition is reward_terminal[next_state]. Truncated episodes are scored
    with reward_terminal of the state reached at the cut.
    """

    transition: Array          # (S, A, S) row-stochastic
    reward_terminal: Array     # (S,) in {+1, -1}
    terminal_prob: Array       # (S, A) probability the transition resolves
    absorbing: Array           # (S,) bool
    gamma: float
    initial_dist: Array        # (S,)
    emission_l_mean: Array     # (S, F)
    emission_l_noise: float
    emission_n_proto: Array    # (S, d_n)
    emission_n_noise: float
    note_present_prob: Array   # (S,)
    context_prototype: Array   # (S, d_n), keyed by the initial state's context
    first_frame_note_prob: float
    n_severity: int
    n_context: int
    severity_of: Array         # (S,) int, -1 for absorbing states
    context_of: Array          # (S,) int, -1 for absorbing states
    optimal_action: Array      # (S,) int
    oracle: dict = field(default_factory=dict)

    def __post_init__(self):
        t = self.transition
        if t.ndim != 3 or t.shape[0] != t.shape[2] or t.shape[1] != N_ACTIONS:
            raise GeneratorError(f"transition tensor has bad shape {t.shape}")
        rows = t.sum(axis=2)
        if np.abs(rows - 1.0).max() > 1e-9:
            raise GeneratorError("transition rows must sum to 1 within 1e-9")
        if (t < 0).any():
            raise GeneratorError("transition tensor has negative entries")
        if not np.isin(self.reward_terminal, (-1.0, 1.0)).all():
            raise GeneratorError("reward_terminal entries must be +1 or -1")
        if ((self.terminal_prob < 0) | (self.terminal_prob > 1)).any():
            raise GeneratorError("terminal_prob entries must lie in [0, 1]")
        if not (0.0 <= self.gamma < 1.0):
            raise GeneratorError(f"gamma must be in [0, 1), got {self.gamma}")
        for name in ("emission_l_mean", "emission_n_proto", "context_prototype"):
            if not np.isfinite(getattr(self, name)).all():
                raise GeneratorError(f"{name} must be finite")
        if abs(self.initial_dist.sum() - 1.0) > 1e-9 or (self.initial_dist < 0).any():
            raise GeneratorError("initial_dist must be a distribution")
        if self.initial_dist[self.absorbing].sum() > 0:
            raise GeneratorError("initial_dist must not start in absorbing states")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_features(self) -> int:
        return self.emission_l_mean.shape[1]

    @property
    def d_n(self) -> int:
        return self.emission_n_proto.shape[1]


@dataclass(frozen=True)
class BehaviorPolicy:
    """Logging policy over latent states.

    Importance-sampling estimators require full support (floor > 0);
    degenerate rows are admitted at construction for deterministic rollout
    sanity cases and rejected where a ratio would divide by zero.
    """

    probs: Array  # (S, A)

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.probs.ndim != 2:
            raise GeneratorError(f"behavior probs must be 2-d, got {self.probs.shape}")
        if np.abs(self.probs.sum(axis=1) - 1.0).max() > 1e-9:
            raise GeneratorError("behavior rows must sum to 1 within 1e-9")
        if self.probs.min() < 0.0:
            raise GeneratorError("behavior probabilities must be nonnegative")

    @property
    def floor(self) -> float:
        return float(self.probs.min())

    @property
    def has_full_support(self) -> bool:
        return self.probs.min() > 0.0


@dataclass(frozen=True)
class GeneratorConfig:
    n_severity: int = 5
    n_context: int = 3
    n_features: int = 42
    d_n: int = 64
    gamma: float = 0.95
    term_prob_mid: float = 0.25
    term_prob_edge: float = 0.55
    survive_best_healthy: float = 0.95   # q at (u=0, optimal action)
    survive_best_sick: float = 0.60      # q at (u=max, optimal action)
    survive_worst_healthy: float = 0.45
    survive_worst_sick: float = 0.10
    q_jitter: float = 0.01
    drift_stay: float = 0.5
    drift_jitter: float = 0.05
    struct_scale: float = 2.0
    noise_structured: float = 0.3
    noise_note: float = 0.1
    note_prob: float = 0.7
    first_frame_note_prob: float = 1.0
    min_gap: float = 0.08
    max_generation_attempts: int = 5

    def __post_init__(self):
        if self.n_severity < 1 or self.n_context < 1 or self.n_severity * self.n_context < 2:
            raise GeneratorError("need at least 2 latent states (n_severity * n_context >= 2)")
        if not (0.0 <= self.gamma < 1.0):
            raise GeneratorError(f"gamma must be in [0, 1), got {self.gamma}")
        for name in ("term_prob_mid", "term_prob_edge", "note_prob",
                     "first_frame_note_prob", "drift_stay"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise GeneratorError(f"{name} must lie in [0, 1], got {value}")
        if min(self.term_prob_mid, self.term_prob_edge) <= 0.0:
            raise GeneratorError("termination probabilities must be positive")
        for hi, lo in ((self.survive_best_healthy, self.survive_worst_healthy),
                       (self.survive_best_sick, self.survive_worst_sick)):
            if not (0.0 < lo < hi < 1.0):
                raise GeneratorError("survival probabilities must satisfy 0 < worst < best < 1")
        if self.noise_structured < 0 or self.noise_note < 0:
            raise GeneratorError("noise scales must be nonnegative")
        if self.q_jitter < 0 or self.q_jitter >= 0.03:
            raise GeneratorError("q_jitter must be in [0, 0.03) to keep the optimal action stable")
        if self.n_features < 1 or self.d_n < 1:
            raise GeneratorError("n_features and d_n must be >= 1")


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _level_gap(a: int, target: int) -> float:
    ai, at = ActionIndex.from_flat(a), ActionIndex.from_flat(target)
    return 0.5 * (abs(ai.iv_level - at.iv_level) + abs(ai.vaso_level - at.vaso_level))


def generate_mdp(config: GeneratorConfig, seed: int) -> TabularMDP:
    """Deterministically build an MDP and certify its modality gaps.

    The optimal action at (u, v) depends jointly on both factors, so any
    policy reading a single modality is provably short of optimal; the
    achieved gaps are recomputed by exact DP and must clear config.min_gap
    (structured gap requires n_context >= 2, note gap requires n_severity
    >= 2). Retries with a derived seed if a jittered draw misses the margin.
    """
    last_gaps = None
    for attempt in range(config.max_generation_attempts):
        mdp = _build_mdp(config, seed, attempt)
        gaps = (mdp.oracle["gap_structured_only"], mdp.oracle["gap_note_only"])
        ok = True
        if config.n_context >= 2 and gaps[0] < config.min_gap:
            ok = False
        if config.n_severity >= 2 and gaps[1] < config.min_gap:
            ok = False
        if ok:
            return mdp
        last_gaps = gaps
    raise GeneratorError(
        f"could not certify modality gaps >= {config.min_gap} after "
        f"{config.max_generation_attempts} attempts (last gaps: {last_gaps})"
    )


def _build_mdp(config: GeneratorConfig, seed: int, attempt: int) -> TabularMDP:
    rng = np.random.default_rng([seed, attempt, 913])
    n_u, n_v = config.n_severity, config.n_context
    n_ord = n_u * n_v
    S = n_ord + 2
    surv_state, dead_state = n_ord, n_ord + 1

    severity_of = np.full(S, -1, dtype=np.int64)
    context_of = np.full(S, -1, dtype=np.int64)
    for u in range(n_u):
        for v in range(n_v):
            s = u * n_v + v
            severity_of[s] = u
            context_of[s] = v

    # optimal action couples both factors
    optimal = np.zeros(S, dtype=np.int64)
    for s in range(n_ord):
        u, v = severity_of[s], context_of[s]
        optimal[s] = ActionIndex((u + v) % N_DOSE_LEVELS,
                                 (u + 2 * v) % N_DOSE_LEVELS).flat

    # survival probability at resolution, best for the optimal action
    frac = (np.arange(n_u) / max(n_u - 1, 1))
    q_best = config.survive_best_healthy - frac * (config.survive_best_healthy - config.survive_best_sick)
    q_worst = config.survive_worst_healthy - frac * (config.survive_worst_healthy - config.survive_worst_sick)
    q = np.zeros((n_ord, N_ACTIONS))
    for s in range(n_ord):
        u = severity_of[s]
        for a in range(N_ACTIONS):
            closeness = 1.0 - _level_gap(a, int(optimal[s])) / 4.0
            q[s, a] = q_worst[u] + (q_best[u] - q_worst[u]) * closeness
    q += config.q_jitter * rng.uniform(-1.0, 1.0, size=q.shape)
    q = np.clip(q, 0.02, 0.98)

    # severity-keyed termination, action-independent
    t_u = np.full(n_u, config.term_prob_mid)
    t_u[0] = config.term_prob_edge
    t_u[-1] = config.term_prob_edge

    # action-independent severity drift (reflecting random walk + jitter)
    drift = np.zeros((n_u, n_u))
    for u in range(n_u):
        stay = config.drift_stay
        down, up = (1.0 - stay) / 2.0, (1.0 - stay) / 2.0
        drift[u, u] += stay
        drift[u, max(u - 1, 0)] += down
        drift[u, min(u + 1, n_u - 1)] += up
    drift += config.drift_jitter * rng.uniform(0.0, 1.0, size=drift.shape)
    drift /= drift.sum(axis=1, keepdims=True)

    transition = np.zeros((S, N_ACTIONS, S))
    terminal_prob = np.zeros((S, N_ACTIONS))
    for s in range(n_ord):
        u, v = severity_of[s], context_of[s]
        t = t_u[u]
        terminal_prob[s, :] = t
        for a in range(N_ACTIONS):
            transition[s, a, surv_state] = t * q[s, a]
            transition[s, a, dead_state] = t * (1.0 - q[s, a])
            for u2 in range(n_u):
                transition[s, a, u2 * n_v + v] = (1.0 - t) * drift[u, u2]
    for s_abs in (surv_state, dead_state):
        transition[s_abs, :, s_abs] = 1.0
        terminal_prob[s_abs, :] = 1.0

    reward_terminal = np.where(severity_of <= (n_u - 1) // 2, 1.0, -1.0)
    reward_terminal[surv_state] = 1.0
    reward_terminal[dead_state] = -1.0

    absorbing = np.zeros(S, dtype=bool)
    absorbing[[surv_state, dead_state]] = True

    # start in the middle of the severity range, context uniform
    initial_dist = np.zeros(S)
    band = np.arange(1, n_u - 1) if n_u >= 4 else np.arange(n_u)
    for u in band:
        for v in range(n_v):
            initial_dist[u * n_v + v] = 1.0
    initial_dist /= initial_dist.sum()

    emission_l = np.zeros((S, config.n_features))
    emission_n = np.zeros((S, config.d_n))
    context_proto = np.zeros((S, config.d_n))
    for s in range(S):
        u = severity_of[s] if s < n_ord else n_u + (s - n_ord)
        v = context_of[s] if s < n_ord else n_v + (s - n_ord)
        emission_l[s] = config.struct_scale * pseudo_embed(int(u), "severity", config.n_features, seed)
        emission_n[s] = pseudo_embed(int(v), "event", config.d_n, seed)
        if s < n_ord:
            context_proto[s] = pseudo_embed(int(v), "context", config.d_n, seed)

    note_prob = np.full(S, config.note_prob)
    note_prob[absorbing] = 0.0

    mdp = TabularMDP(
        transition=transition, reward_terminal=reward_terminal,
        terminal_prob=terminal_prob, absorbing=absorbing, gamma=config.gamma,
        initial_dist=initial_dist, emission_l_mean=emission_l,
        emission_l_noise=config.noise_structured, emission_n_proto=emission_n,
        emission_n_noise=config.noise_note, note_present_prob=note_prob,
        context_prototype=context_proto,
        first_frame_note_prob=config.first_frame_note_prob,
        n_severity=n_u, n_context=n_v, severity_of=severity_of,
        context_of=context_of, optimal_action=optimal,
    )

    v_opt = exact_policy_value(mdp, optimal)
    v_struct, _ = best_structured_only(mdp)
    v_note = best_note_only(mdp)
    oracle = {
        "value_optimal": v_opt,
        "value_best_structured_only": v_struct,
        "value_best_note_only": v_note,
        "gap_structured_only": v_opt - v_struct,
        "gap_note_only": v_opt - v_note,
    }
    return replace(mdp, oracle=oracle)


def near_clinician_behavior(mdp: TabularMDP, epsilon: float = 0.3) -> BehaviorPolicy:
    """Optimal action with probability 1 - eps, the rest uniform (full support)."""
    if not (0.0 < epsilon < 1.0):
        raise GeneratorError(f"epsilon must be in (0, 1), got {epsilon}")
    S, A = mdp.n_states, mdp.n_actions
    probs = np.full((S, A), epsilon / (A - 1))
    probs[np.arange(S), mdp.optimal_action] = 1.0 - epsilon
    probs[mdp.absorbing] = 1.0 / A
    return BehaviorPolicy(probs)


# ---------------------------------------------------------------------------
# Exact policy values
# ---------------------------------------------------------------------------


def _policy_matrix(policy, n_states: int, n_actions: int) -> Array:
    pi = np.asarray(policy)
    if pi.ndim == 1:
        mat = np.zeros((n_states, n_actions))
        mat[np.arange(n_states), pi.astype(np.int64)] = 1.0
        return mat
    if pi.shape != (n_states, n_actions):
        raise GeneratorError(f"policy matrix has bad shape {pi.shape}")
    if np.abs(pi.sum(axis=1) - 1.0).max() > 1e-8 or (pi < 0).any():
        raise GeneratorError("policy rows must be distributions")
    return pi.astype(np.float64)


def _step_operator(mdp: TabularMDP, pi: Array, gamma: float) -> tuple[Array, Array]:
    """Return (M, b) with V = b + M V on non-absorbing states."""
    # policy-weighted transition kernel
    kernel = np.einsum("sa,sat->st", pi, mdp.transition)
    term = mdp.absorbing.astype(np.float64)
    b = kernel @ (term * mdp.reward_terminal)
    M = gamma * kernel * (1.0 - term)[None, :]
    return M, b


def exact_policy_value(mdp: TabularMDP, policy, gamma: float | None = None,
                       horizon: int | None = None, method: str = "solve",
                       initial_dist: Array | None = None) -> float:
    """Initial-distribution-weighted value of a state-indexed policy.

    ``policy`` is an (S,) action array or an (S, A) stochastic matrix.
    With ``horizon`` set, uses backward induction matching rollout
    truncation (the final permitted transition is scored with the outcome
    label of the state it reaches); otherwise solves the infinite-horizon
    Bellman equations by linear solve (or value iteration to 1e-10 with
    method="vi").
    """
    gamma = mdp.gamma if gamma is None else float(gamma)
    if gamma >= 1.0 or gamma < 0.0:
        raise GeneratorError(f"gamma must be in [0, 1), got {gamma}")
    pi = _policy_matrix(policy, mdp.n_states, mdp.n_actions)
    p0 = mdp.initial_dist if initial_dist is None else np.asarray(initial_dist, dtype=np.float64)
    values = state_values(mdp, pi, gamma=gamma, horizon=horizon, method=method)
    return float(p0 @ values)


def state_values(mdp: TabularMDP, policy, gamma: float | None = None,
                 horizon: int | None = None, method: str = "solve") -> Array:
    """Per-state values V(s); absorbing states are 0 by convention."""
    gamma = mdp.gamma if gamma is None else float(gamma)
    pi = _policy_matrix(policy, mdp.n_states, mdp.n_actions)
    M, b = _step_operator(mdp, pi, gamma)
    free = ~mdp.absorbing
    if horizon is not None:
        if horizon < 1:
            raise GeneratorError(f"horizon must be >= 1, got {horizon}")
        # one transition left: natural or forced, the outcome label of the
        # reached state is paid either way
        kernel = np.einsum("sa,sat->st", pi, mdp.transition)
        values = kernel @ mdp.reward_terminal
        for _ in range(horizon - 1):
            values = b + M @ values
        values = values.copy()
        values[~free] = 0.0
        return values
    if method == "solve":
        A = np.eye(int(free.sum())) - M[np.ix_(free, free)]
        v_free = np.linalg.solve(A, b[free])
    elif method == "vi":
        v_free = np.zeros(int(free.sum()))
        Mff, bf = M[np.ix_(free, free)], b[free]
        while True:
            nxt = bf + Mff @ v_free
            if np.abs(nxt - v_free).max() < 1e-10:
                v_free = nxt
                break
            v_free = nxt
    else:
        raise GeneratorError(f"unknown method {method!r}")
    values = np.zeros(mdp.n_states)
    values[free] = v_free
    return values


def optimal_values(mdp: TabularMDP, gamma: float | None = None,
                   tol: float = 1e-12) -> tuple[Array, Array]:
    """Value iteration over all actions; returns (V*, greedy policy)."""
    gamma = mdp.gamma if gamma is None else float(gamma)
    term = mdp.absorbing.astype(np.float64)
    payoff = mdp.transition @ (term * mdp.reward_terminal)          # (S, A)
    cont = gamma * mdp.transition * (1.0 - term)[None, None, :]     # (S, A, S)
    v = np.zeros(mdp.n_states)
    while True:
        q = payoff + cont @ v
        nxt = q.max(axis=1)
        nxt[mdp.absorbing] = 0.0
        if np.abs(nxt - v).max() < tol:
            break
        v = nxt
    greedy = (payoff + cont @ v).argmax(axis=1)
    return v, greedy


def _factor_structure(mdp: TabularMDP):
    """Severity-chain quantities, asserting the generator's factorization."""
    n_u, n_v = mdp.n_severity, mdp.n_context
    n_ord = n_u * n_v
    surv_state = n_ord
    t_u = np.zeros(n_u)
    q = np.zeros((n_u, n_v, N_ACTIONS))
    drift = np.zeros((n_u, n_u))
    for u in range(n_u):
        rows = [u * n_v + v for v in range(n_v)]
        t_vals = mdp.terminal_prob[rows, :]
        if np.ptp(t_vals) > 1e-12:
            raise GeneratorError("termination must be severity-keyed and action-independent")
        t_u[u] = t_vals[0, 0]
        for v in range(n_v):
            s = rows[v]
            q[u, v, :] = mdp.transition[s, :, surv_state] / max(t_u[u], 1e-300)
        # drift of severity, must be shared across contexts and actions
        drift_rows = mdp.transition[rows][:, :, :n_ord].reshape(n_v, N_ACTIONS, n_u, n_v)
        per = drift_rows[np.arange(n_v), :, :, np.arange(n_v)] / max(1.0 - t_u[u], 1e-300)
        if np.ptp(per, axis=(0, 1)).max() > 1e-12:
            raise GeneratorError("severity drift must be context- and action-independent")
        drift[u] = per[0, 0]
    p_u = np.zeros(n_u)
    p_v = np.zeros(n_v)
    for u in range(n_u):
        for v in range(n_v):
            p_u[u] += mdp.initial_dist[u * n_v + v]
            p_v[v] += mdp.initial_dist[u * n_v + v]
    if n_u > 1 and n_v > 1:
        joint = mdp.initial_dist[:n_ord].reshape(n_u, n_v)
        if np.abs(joint - np.outer(p_u, p_v)).max() > 1e-9:
            raise GeneratorError("initial distribution must factorize over (severity, context)")
    return t_u, q, drift, p_u, p_v


def best_structured_only(mdp: TabularMDP, gamma: float | None = None) -> tuple[float, Array]:
    """Exact value of the best severity-conditioned policy.

    A structured-only observer learns nothing about the context factor
    within an episode, so its best value is the DP optimum of the
    severity-aggregated chain with survival averaged over the context prior.
    """
    gamma = mdp.gamma if gamma is None else float(gamma)
    t_u, q, drift, p_u, p_v = _factor_structure(mdp)
    q_bar = np.einsum("v,uva->ua", p_v, q)  # (n_u, A)
    n_u = mdp.n_severity
    v = np.zeros(n_u)
    while True:
        q_values = (t_u[:, None] * (2.0 * q_bar - 1.0)
                    + ((1.0 - t_u) * gamma)[:, None] * (drift @ v)[:, None])
        nxt = q_values.max(axis=1)
        if np.abs(nxt - v).max() < 1e-13:
            break
        v = nxt
    policy_u = q_values.argmax(axis=1)
    return float(p_u @ v), policy_u


def best_note_only(mdp: TabularMDP, gamma: float | None = None,
                   tol: float = 1e-13) -> float:
    """Exact value of the best context-conditioned (note-only) policy.

    Actions never move the severity chain, so the optimal note-only agent
    picks, at each step, the action maximizing the survival odds averaged
    over the current severity occupancy; the occupancy itself evolves
    autonomously. Upper-bounds every policy that reads only the note
    modality, including history-dependent ones.
    """
    gamma = mdp.gamma if gamma is None else float(gamma)
    t_u, q, drift, p_u, p_v = _factor_structure(mdp)
    value = 0.0
    beta = p_u.copy()          # P(severity = u, alive at t)
    discount = 1.0
    while beta.sum() * discount > tol:
        resolve = beta * t_u   # (n_u,) mass resolving now
        # per context: best action against the current severity occupancy
        gain = np.einsum("u,uva->va", resolve, 2.0 * q - 1.0)  # (n_v, A)
        value += discount * float(p_v @ gain.max(axis=1))
        beta = (beta * (1.0 - t_u)) @ drift
        discount *= gamma
    return value


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


def _emit(mdp: TabularMDP, state: int, first_frame: bool, context_state: int,
          rng: np.random.Generator) -> JointObservation:
    structured = mdp.emission_l_mean[state].copy()
    if mdp.emission_l_noise > 0:
        structured += mdp.emission_l_noise * rng.standard_normal(mdp.n_features)
    if first_frame:
        present = rng.random() < mdp.first_frame_note_prob
        proto = mdp.context_prototype[context_state]
    else:
        present = rng.random() < mdp.note_present_prob[state]
        proto = mdp.emission_n_proto[state]
    if present:
        embedding = proto.copy()
        if mdp.emission_n_noise > 0:
            embedding += mdp.emission_n_noise * rng.standard_normal(mdp.d_n)
    else:
        embedding = np.zeros(mdp.d_n)
    return JointObservation(structured, embedding, bool(present))


def rollout(mdp: TabularMDP, policy: BehaviorPolicy, n_episodes: int,
            max_len: int = 18, seed: int = 0,
            split_fractions: tuple[float, float, float] = (1.0, 0.0, 0.0),
            id_prefix: str = "ep") -> OfflineDataset:
    """Roll out episodes under a behavior policy into an OfflineDataset.

    Transitions record the behavior probability of the logged action and the
    latent state ids (enabling tabular oracles). Episodes hitting max_len
    are force-terminated and scored with the outcome label of the state
    reached.
    """
    if n_episodes < 1:
        raise GeneratorError(f"n_episodes must be >= 1, got {n_episodes}")
    if max_len < 1:
        raise GeneratorError(f"max_len must be >= 1, got {max_len}")
    if abs(sum(split_fractions) - 1.0) > 1e-9 or min(split_fractions) < 0:
        raise GeneratorError(f"split fractions must be a distribution, got {split_fractions}")
    rng = np.random.default_rng([seed, 5077])
    n_train = int(round(split_fractions[0] * n_episodes))
    n_val = int(round(split_fractions[1] * n_episodes))

    # inverse-CDF sampling; much faster than per-draw choice(p=...)
    cdf_initial = np.cumsum(mdp.initial_dist)
    cdf_policy = np.cumsum(policy.probs, axis=1)
    cdf_transition = np.cumsum(mdp.transition, axis=2)

    def draw(cdf: Array) -> int:
        idx = int(np.searchsorted(cdf, rng.random(), side="right"))
        return min(idx, len(cdf) - 1)

    episodes = []
    for i in range(n_episodes):
        s = draw(cdf_initial)
        obs = _emit(mdp, s, True, s, rng)
        raw_steps = []
        for step in range(max_len):
            a = draw(cdf_policy[s])
            s_next = draw(cdf_transition[s, a])
            next_obs = _emit(mdp, s_next, False, s, rng)
            done = bool(mdp.absorbing[s_next]) or step == max_len - 1
            raw_steps.append((s, a, s_next, obs, next_obs))
            s, obs = s_next, next_obs
            if done:
                break
        final_state = raw_steps[-1][2]
        survived = mdp.reward_terminal[final_state] > 0
        rewards = assign_rewards(raw_steps, survived)
        transitions = []
        for t, (s_t, a, s_n, o_t, o_n) in enumerate(raw_steps):
            action = ActionIndex.from_flat(a)
            transitions.append(Transition(
                obs=o_t, action=action, reward=rewards[t], next_obs=o_n,
                done=(t == len(raw_steps) - 1),
                behavior_prob=float(policy.probs[s_t, a]),
                iv_dose=float(action.iv_level), vaso_dose=float(action.vaso_level),
                state_id=s_t, next_state_id=s_n,
            ))
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        episodes.append(Episode(tuple(transitions), bool(survived),
                                f"{id_prefix}{i:06d}", split=split))
    return OfflineDataset(tuple(episodes), n_features=mdp.n_features, d_n=mdp.d_n,
                          bin_edges=DoseBins(LEVEL_BIN_EDGES, LEVEL_BIN_EDGES))


# ---------------------------------------------------------------------------
# Canonical observations and policy tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CanonicalInputs:
    """Noise-free per-state observation prototypes, for policy extraction."""

    structured: Array     # (S, F)
    event_note: Array     # (S, d_n)
    context_note: Array   # (S, d_n)
    note_present: Array   # (S,) bool


def canonical_inputs(mdp: TabularMDP, feature_stats=None) -> CanonicalInputs:
    """Per-state prototypes; pass the dataset's feature_stats when the
    policy was trained on normalized features."""
    structured = mdp.emission_l_mean.copy()
    if feature_stats is not None:
        safe = np.where(feature_stats.std > 0.0, feature_stats.std, 1.0)
        structured = (structured - feature_stats.mean) / safe
        structured[:, feature_stats.std == 0.0] = 0.0
    return CanonicalInputs(
        structured=structured,
        event_note=mdp.emission_n_proto.copy(),
        context_note=mdp.context_prototype.copy(),
        note_present=np.ones(mdp.n_states, dtype=bool),
    )


def eps_soft_matrix(actions: Array, n_actions: int, eps: float) -> Array:
    """Deterministic actions softened to eps-uniform over the alternatives."""
    actions = np.asarray(actions, dtype=np.int64)
    probs = np.full((actions.shape[0], n_actions), eps / (n_actions - 1))
    probs[np.arange(actions.shape[0]), actions] = 1.0 - eps
    return probs


# ---------------------------------------------------------------------------
# Ground truth round-trip
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    mdp: TabularMDP
    behavior: BehaviorPolicy
    oracle_values: dict
    episode_states: dict[str, list[int]]


def oracle_values(mdp: TabularMDP, behavior: BehaviorPolicy) -> dict:
    out = dict(mdp.oracle)
    out["value_behavior"] = exact_policy_value(mdp, behavior.probs)
    return out


def write_ground_truth(path: str | Path, mdp: TabularMDP, behavior: BehaviorPolicy,
                       dataset: OfflineDataset) -> None:
    episode_states = {}
    for ep in dataset.episodes:
        seq = [tr.state_id for tr in ep.transitions]
        seq.append(ep.transitions[-1].next_state_id)
        if any(s is None for s in seq):
            raise GeneratorError(f"episode {ep.episode_id!r} lacks state ids")
        episode_states[ep.episode_id] = [int(s) for s in seq]
    payload = {
        "mdp": {
            "transition": mdp.transition.tolist(),
            "reward_terminal": mdp.reward_terminal.tolist(),
            "terminal_prob": mdp.terminal_prob.tolist(),
            "absorbing": mdp.absorbing.astype(int).tolist(),
            "gamma": mdp.gamma,
            "initial_dist": mdp.initial_dist.tolist(),
            "emission_l_mean": mdp.emission_l_mean.tolist(),
            "emission_l_noise": mdp.emission_l_noise,
            "emission_n_proto": mdp.emission_n_proto.tolist(),
            "emission_n_noise": mdp.emission_n_noise,
            "note_present_prob": mdp.note_present_prob.tolist(),
            "context_prototype": mdp.context_prototype.tolist(),
            "first_frame_note_prob": mdp.first_frame_note_prob,
            "n_severity": mdp.n_severity,
            "n_context": mdp.n_context,
            "severity_of": mdp.severity_of.tolist(),
            "context_of": mdp.context_of.tolist(),
            "optimal_action": mdp.optimal_action.tolist(),
            "oracle": mdp.oracle,
        },
        "behavior_probs": behavior.probs.tolist(),
        "oracle_values": oracle_values(mdp, behavior),
        "episode_states": episode_states,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_ground_truth(path: str | Path) -> GroundTruth:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    m = payload["mdp"]
    mdp = TabularMDP(
        transition=np.array(m["transition"]),
        reward_terminal=np.array(m["reward_terminal"]),
        terminal_prob=np.array(m["terminal_prob"]),
        absorbing=np.array(m["absorbing"], dtype=bool),
        gamma=float(m["gamma"]),
        initial_dist=np.array(m["initial_dist"]),
        emission_l_mean=np.array(m["emission_l_mean"]),
        emission_l_noise=float(m["emission_l_noise"]),
        emission_n_proto=np.array(m["emission_n_proto"]),
        emission_n_noise=float(m["emission_n_noise"]),
        note_present_prob=np.array(m["note_present_prob"]),
        context_prototype=np.array(m["context_prototype"]),
        first_frame_note_prob=float(m["first_frame_note_prob"]),
        n_severity=int(m["n_severity"]), n_context=int(m["n_context"]),
        severity_of=np.array(m["severity_of"]), context_of=np.array(m["context_of"]),
        optimal_action=np.array(m["optimal_action"]), oracle=dict(m["oracle"]),
    )
    behavior = BehaviorPolicy(np.array(payload["behavior_probs"]))
    return GroundTruth(mdp=mdp, behavior=behavior,
                       oracle_values=dict(payload["oracle_values"]),
                       episode_states={k: list(map(int, v))
                                       for k, v in payload["episode_states"].items()})


def attach_ground_truth(dataset: OfflineDataset, gt: GroundTruth) -> OfflineDataset:
    """Re-attach latent state ids and behavior probabilities after ingest."""
    episodes = []
    for ep in dataset.episodes:
        seq = gt.episode_states.get(ep.episode_id)
        if seq is None:
            raise GeneratorError(f"no ground-truth states for episode {ep.episode_id!r}")
        if len(seq) != len(ep.transitions) + 1:
            raise GeneratorError(
                f"episode {ep.episode_id!r}: ground truth lists {len(seq)} states "
                f"for {len(ep.transitions)} transitions"
            )
        transitions = []
        for t, tr in enumerate(ep.transitions):
            transitions.append(replace(
                tr, state_id=seq[t], next_state_id=seq[t + 1],
                behavior_prob=float(gt.behavior.probs[seq[t], tr.action.flat]),
            ))
        episodes.append(replace(ep, transitions=tuple(transitions)))
    return replace(dataset, episodes=tuple(episodes))
