"""Offline policy optimization over the fused state.

Supports three batch algorithms on a dueling Q-network: plain DQN regression
against a frozen target, CQL (the DQN objective plus alpha * (logsumexp of
Q over all actions minus Q at the logged action), which pushes down
out-of-distribution action values), and discrete BCQ (the argmax restricted
to actions whose estimated behavior probability is within a threshold ratio
of the modal action). Models come in three modalities: the full fused
encoder, structured-features-only, and note-inputs-only; the unimodal
variants are plain dueling networks on the raw inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Episode, N_ACTIONS, OfflineDataset
from .encoder import EncoderConfig, NoteStrategy, StateEncoder, episode_note_inputs
from .netcore import (
    Adam,
    Dense,
    DuelingQNetwork,
    Tensor,
    clone_param_values,
    load_checkpoint,
    load_param_values,
    save_checkpoint,
    zero_grads,
)

Array = np.ndarray

MODALITIES = ("multimodal", "structured", "notes")
ALGORITHMS = ("dqn", "cql", "bcq")


class TrainerError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the last parameter snapshot and the log."""

    def __init__(self, message: str, checkpoint: dict[str, Array], log: list[dict]):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int = 256
    learning_rate: float = 1e-4
    gamma: float = 0.99
    cql_alpha: float = 2.0
    bcq_threshold: float = 0.3
    target_update: int = 1000
    seed: int = 0
    algorithm: str = "cql"
    hidden_width: int = 512
    trunk_depth: int = 3
    eval_interval: int = 500
    grad_clip: float | None = None
    freeze_encoders: bool = False
    select_best_by_val_fqe: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise TrainerError(f"unknown algorithm {self.algorithm!r}")
        for name in ("total_steps", "batch_size", "target_update",
                     "hidden_width", "trunk_depth", "eval_interval"):
            if getattr(self, name) < 1:
                raise TrainerError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise TrainerError("learning_rate must be positive")
        if not (0.0 <= self.gamma < 1.0):
            raise TrainerError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.cql_alpha < 0:
            raise TrainerError("cql_alpha must be >= 0")
        if not (0.0 <= self.bcq_threshold <= 1.0):
            raise TrainerError("bcq_threshold must be in [0, 1]")


# ---------------------------------------------------------------------------
# Flattened transition table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionTable:
    """Per-transition training arrays with note strategies pre-applied."""

    structured: Array      # (N, F)
    f_c: Array             # (N, d_n)
    f_e: Array             # (N, d_n)
    next_structured: Array
    next_f_c: Array
    next_f_e: Array
    action: Array          # (N,) int
    reward: Array          # (N,)
    done: Array            # (N,) bool
    behavior_prob: Array   # (N,), nan when unknown
    episode_index: Array   # (N,) int
    state_id: Array        # (N,) int, -1 when unknown
    next_state_id: Array
    initial_mask: Array    # (N,) bool, first transition of its episode

    @property
    def size(self) -> int:
        return self.action.shape[0]


def build_transition_table(dataset: OfflineDataset, strategy: NoteStrategy,
                           episodes: Sequence[Episode] | None = None) -> TransitionTable:
    eps = list(dataset.episodes) if episodes is None else list(episodes)
    if not eps:
        raise TrainerError("no episodes to build a transition table from")
    cols = {name: [] for name in ("structured", "f_c", "f_e", "next_structured",
                                  "next_f_c", "next_f_e")}
    action, reward, done, bprob, ep_idx = [], [], [], [], []
    state_id, next_state_id, initial = [], [], []
    for e_i, ep in enumerate(eps):
        f_c, f_e = episode_note_inputs(ep, strategy)
        frames = ep.frames()
        for t, tr in enumerate(ep.transitions):
            cols["structured"].append(frames[t].structured)
            cols["f_c"].append(f_c[t])
            cols["f_e"].append(f_e[t])
            cols["next_structured"].append(frames[t + 1].structured)
            cols["next_f_c"].append(f_c[t + 1])
            cols["next_f_e"].append(f_e[t + 1])
            action.append(tr.action.flat)
            reward.append(tr.reward)
            done.append(tr.done)
            bprob.append(np.nan if tr.behavior_prob is None else tr.behavior_prob)
            ep_idx.append(e_i)
            state_id.append(-1 if tr.state_id is None else tr.state_id)
            next_state_id.append(-1 if tr.next_state_id is None else tr.next_state_id)
            initial.append(t == 0)
    return TransitionTable(
        structured=np.stack(cols["structured"]),
        f_c=np.stack(cols["f_c"]), f_e=np.stack(cols["f_e"]),
        next_structured=np.stack(cols["next_structured"]),
        next_f_c=np.stack(cols["next_f_c"]), next_f_e=np.stack(cols["next_f_e"]),
        action=np.array(action, dtype=np.int64),
        reward=np.array(reward, dtype=np.float64),
        done=np.array(done, dtype=bool),
        behavior_prob=np.array(bprob, dtype=np.float64),
        episode_index=np.array(ep_idx, dtype=np.int64),
        state_id=np.array(state_id, dtype=np.int64),
        next_state_id=np.array(next_state_id, dtype=np.int64),
        initial_mask=np.array(initial, dtype=bool),
    )


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class ActionClassifier:
    """Behavior model for discrete BCQ: dense trunk + 25-way logits."""

    def __init__(self, input_dim: int, rng: np.random.Generator,
                 width: int, depth: int = 3, name: str = "behavior"):
        self.input_dim = input_dim
        self.trunk = []
        d_in = input_dim
        for i in range(depth):
            self.trunk.append(Dense(d_in, width, rng, f"{name}.trunk{i}"))
            d_in = width
        self.head = Dense(d_in, N_ACTIONS, rng, f"{name}.head")

    def logits(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.trunk:
            h = layer(h).relu()
        return self.head(h)

    def probs(self, x: Array) -> Array:
        logits = self.logits(Tensor(x)).data
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def params(self) -> dict[str, Tensor]:
        merged = {}
        for layer in self.trunk:
            merged.update(layer.params())
        merged.update(self.head.params())
        return merged


class QModel:
    """Dueling Q-network over one of the three input modalities."""

    def __init__(self, modality: str, enc_cfg: EncoderConfig, cfg: TrainConfig,
                 rng: np.random.Generator):
        if modality not in MODALITIES:
            raise TrainerError(f"unknown modality {modality!r}")
        self.modality = modality
        self.enc_cfg = enc_cfg
        self.encoder = None
        if modality == "multimodal":
            self.encoder = StateEncoder(enc_cfg, rng)
            input_dim = enc_cfg.state_dim
        elif modality == "structured":
            input_dim = enc_cfg.n_features
        else:
            input_dim = 2 * enc_cfg.d_n
        self.qnet = DuelingQNetwork(input_dim, rng, width=cfg.hidden_width,
                                    depth=cfg.trunk_depth, n_actions=N_ACTIONS)

    def state_tensor(self, structured: Array, f_c: Array, f_e: Array) -> Tensor:
        if self.modality == "multimodal":
            return self.encoder.forward(structured, f_c, f_e)
        if self.modality == "structured":
            return Tensor(structured)
        return Tensor(np.concatenate([f_c, f_e], axis=1))

    def q_values(self, structured: Array, f_c: Array, f_e: Array) -> Tensor:
        return self.qnet(self.state_tensor(structured, f_c, f_e))

    def params(self) -> dict[str, Tensor]:
        merged = dict(self.qnet.params())
        if self.encoder is not None:
            merged.update(self.encoder.params())
        return merged


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def dqn_target(reward: Array, done: Array, next_q: Array, gamma: float) -> Array:
    """y = r + gamma * max_a' Q(s', a'); the bootstrap drops when done."""
    return reward + gamma * (1.0 - done.astype(np.float64)) * next_q.max(axis=1)


def bcq_allowed_mask(behavior_probs: Array, tau: float) -> Array:
    """Actions whose probability ratio to the modal action reaches tau.

    The modal action always qualifies, so the mask is never empty.
    """
    probs = np.atleast_2d(behavior_probs)
    ratio = probs / probs.max(axis=1, keepdims=True)
    return ratio >= tau


def bcq_constrained_argmax(q_values: Array, behavior_probs: Array, tau: float) -> int:
    """Greedy action over the behavior-supported subset."""
    q = np.asarray(q_values, dtype=np.float64)
    mask = bcq_allowed_mask(behavior_probs, tau)[0]
    masked = np.where(mask, q, -np.inf)
    return int(masked.argmax())


def bcq_target(reward: Array, done: Array, next_q: Array,
               next_behavior_probs: Array, gamma: float, tau: float) -> Array:
    mask = bcq_allowed_mask(next_behavior_probs, tau)
    masked = np.where(mask, next_q, -np.inf)
    return reward + gamma * (1.0 - done.astype(np.float64)) * masked.max(axis=1)


def cql_loss(q: Tensor, actions: Array, targets: Array,
             alpha: float) -> tuple[Tensor, dict]:
    """Half mean-squared Bellman error plus the conservative regularizer.

    With alpha = 0 this is exactly the DQN objective; the regularizer is
    mean(logsumexp_a Q(s, a)) - mean(Q(s, a_data)).
    """
    q_taken = q.pick(actions)
    bellman = (q_taken - Tensor(targets)).square().mean() * 0.5
    diag = {"bellman": float(bellman.data), "mean_q": float(q.data.mean())}
    if alpha == 0.0:
        diag["reg"] = 0.0
        return bellman, diag
    reg = q.logsumexp(axis=1).mean() - q_taken.mean()
    diag["reg"] = float(reg.data)
    return bellman + alpha * reg, diag


def dqn_loss(q: Tensor, actions: Array, targets: Array) -> tuple[Tensor, dict]:
    return cql_loss(q, actions, targets, alpha=0.0)


def cross_entropy_loss(logits: Tensor, actions: Array) -> Tensor:
    return (logits.logsumexp(axis=1) - logits.pick(actions)).mean()


# ---------------------------------------------------------------------------
# Learned policy
# ---------------------------------------------------------------------------


@dataclass
class LearnedPolicy:
    """Frozen trained model plus its action rule (BCQ-constrained or greedy)."""

    model: QModel
    algorithm: str
    bcq_threshold: float
    strategy: NoteStrategy
    behavior_classifier: ActionClassifier | None = None

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    def q_matrix(self, structured: Array, f_c: Array, f_e: Array) -> Array:
        return self.model.q_values(structured, f_c, f_e).data

    def greedy_actions(self, structured: Array, f_c: Array, f_e: Array) -> Array:
        q = self.q_matrix(structured, f_c, f_e)
        if self.algorithm == "bcq":
            state = self.model.state_tensor(structured, f_c, f_e).data
            probs = self.behavior_classifier.probs(state)
            masked = np.where(bcq_allowed_mask(probs, self.bcq_threshold), q, -np.inf)
            return masked.argmax(axis=1)
        return q.argmax(axis=1)

    def episode_inputs(self, episode: Episode) -> tuple[Array, Array, Array]:
        """Per-frame (structured, f_c, f_e) arrays, length T+1."""
        f_c, f_e = episode_note_inputs(episode, self.strategy)
        structured = np.stack([f.structured for f in episode.frames()])
        return structured, f_c, f_e

    def episode_greedy_actions(self, episode: Episode) -> Array:
        structured, f_c, f_e = self.episode_inputs(episode)
        T = len(episode.transitions)
        return self.greedy_actions(structured[:T], f_c[:T], f_e[:T])

    def episode_action_probs(self, episode: Episode, eps: float = 0.0) -> Array:
        """(T, 25) action distribution; eps-soft around the greedy rule."""
        greedy = self.episode_greedy_actions(episode)
        probs = np.full((greedy.shape[0], N_ACTIONS), eps / (N_ACTIONS - 1))
        probs[np.arange(greedy.shape[0]), greedy] = 1.0 - eps
        return probs

    def episode_state_features(self, episode: Episode) -> Array:
        """Model-input state features per frame (T+1 rows), for value fitting."""
        structured, f_c, f_e = self.episode_inputs(episode)
        return self.model.state_tensor(structured, f_c, f_e).data

    def action_table(self, canon) -> Array:
        """Greedy actions at canonical per-state observations.

        `canon` provides structured / event_note / context_note arrays (one
        row per latent state); used to turn a learned policy into a tabular
        one for exact DP evaluation on synthetic tasks.
        """
        f_c = canon.context_note if self.strategy.kind == "context" \
            else np.zeros_like(canon.context_note)
        return self.greedy_actions(canon.structured, f_c, canon.event_note)

    # -- persistence --------------------------------------------------------

    def all_params(self) -> dict[str, Tensor]:
        merged = dict(self.model.params())
        if self.behavior_classifier is not None:
            merged.update(self.behavior_classifier.params())
        return merged

    def save(self, path: str | Path) -> None:
        enc = self.model.enc_cfg
        meta = {
            "modality": self.model.modality,
            "algorithm": self.algorithm,
            "bcq_threshold": self.bcq_threshold,
            "strategy": {"kind": self.strategy.kind, "window": self.strategy.window},
            "encoder": {"n_features": enc.n_features, "d_n": enc.d_n, "d": enc.d,
                        "d_k": enc.d_k, "depth": enc.depth,
                        "use_attention": enc.use_attention},
            "qnet": {"width": self.model.qnet.trunk[0].n_out,
                     "depth": len(self.model.qnet.trunk)},
        }
        save_checkpoint(path, self.all_params(), metadata=meta)

    @classmethod
    def load(cls, path: str | Path) -> "LearnedPolicy":
        values, meta = load_checkpoint(path)
        strategy = NoteStrategy(meta["strategy"]["kind"], meta["strategy"]["window"])
        enc_cfg = EncoderConfig(strategy=strategy, **meta["encoder"])
        cfg = TrainConfig(total_steps=1, hidden_width=meta["qnet"]["width"],
                          trunk_depth=meta["qnet"]["depth"],
                          algorithm=meta["algorithm"],
                          bcq_threshold=meta["bcq_threshold"])
        rng = np.random.default_rng(0)
        model = QModel(meta["modality"], enc_cfg, cfg, rng)
        classifier = None
        if meta["algorithm"] == "bcq":
            classifier = ActionClassifier(
                enc_cfg.state_dim if meta["modality"] == "multimodal"
                else model.qnet.input_dim,
                rng, width=meta["qnet"]["width"], depth=meta["qnet"]["depth"])
        policy = cls(model=model, algorithm=meta["algorithm"],
                     bcq_threshold=meta["bcq_threshold"], strategy=strategy,
                     behavior_classifier=classifier)
        load_param_values(policy.all_params(), values)
        return policy


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    policy: LearnedPolicy
    log: list[dict] = field(default_factory=list)
    snapshots: list[tuple[int, dict[str, Array]]] = field(default_factory=list)


def train(dataset: OfflineDataset, cfg: TrainConfig, enc_cfg: EncoderConfig,
          modality: str = "multimodal",
          snapshot_interval: int | None = None) -> TrainResult:
    """Optimize a Q-model on the dataset's training split.

    Deterministic given cfg.seed. The log records loss, mean Q and the
    regularizer magnitude at every eval interval. A non-finite loss aborts
    with the last logged parameter snapshot attached to the exception.
    ``snapshot_interval`` additionally collects (step, parameter values)
    pairs for evaluation-across-iterations curves.
    """
    if len(dataset) == 0:
        raise TrainerError("dataset is empty")
    train_eps = dataset.split_episodes("train") or list(dataset.episodes)
    table = build_transition_table(dataset, enc_cfg.strategy, train_eps)

    init_rng = np.random.default_rng([cfg.seed, 11])
    model = QModel(modality, enc_cfg, cfg, init_rng)
    target = QModel(modality, enc_cfg, cfg, np.random.default_rng([cfg.seed, 11]))
    load_param_values(target.params(), clone_param_values(model.params()))

    trainable = dict(model.qnet.params()) if cfg.freeze_encoders else model.params()
    opt = Adam(trainable, lr=cfg.learning_rate, grad_clip=cfg.grad_clip)

    classifier = None
    clf_opt = None
    if cfg.algorithm == "bcq":
        clf_input = enc_cfg.state_dim if modality == "multimodal" else model.qnet.input_dim
        classifier = ActionClassifier(clf_input, np.random.default_rng([cfg.seed, 23]),
                                      width=cfg.hidden_width, depth=cfg.trunk_depth)
        clf_opt = Adam(classifier.params(), lr=cfg.learning_rate,
                       grad_clip=cfg.grad_clip)

    batch_rng = np.random.default_rng([cfg.seed, 77])
    log: list[dict] = []
    snapshots: list[tuple[int, dict[str, Array]]] = []
    last_snapshot = clone_param_values(model.params())
    val_eps = dataset.split_episodes("val") if cfg.select_best_by_val_fqe else []
    best_val = -np.inf
    best_params: dict[str, Array] | None = None
    probe_policy = LearnedPolicy(model=model, algorithm=cfg.algorithm,
                                 bcq_threshold=cfg.bcq_threshold,
                                 strategy=enc_cfg.strategy,
                                 behavior_classifier=classifier)

    for step in range(1, cfg.total_steps + 1):
        idx = batch_rng.integers(0, table.size, size=cfg.batch_size)
        next_q = target.q_values(table.next_structured[idx], table.next_f_c[idx],
                                 table.next_f_e[idx]).data
        if cfg.algorithm == "bcq":
            next_state = model.state_tensor(table.next_structured[idx],
                                            table.next_f_c[idx],
                                            table.next_f_e[idx]).data
            next_probs = classifier.probs(next_state)
            y = bcq_target(table.reward[idx], table.done[idx], next_q,
                           next_probs, cfg.gamma, cfg.bcq_threshold)
        else:
            y = dqn_target(table.reward[idx], table.done[idx], next_q, cfg.gamma)

        q = model.q_values(table.structured[idx], table.f_c[idx], table.f_e[idx])
        alpha = cfg.cql_alpha if cfg.algorithm == "cql" else 0.0
        loss, diag = cql_loss(q, table.action[idx], y, alpha)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite loss at step {step}", last_snapshot, log)
        loss.backward()
        opt.step()
        zero_grads(model.params())

        if cfg.algorithm == "bcq":
            state = model.state_tensor(table.structured[idx], table.f_c[idx],
                                       table.f_e[idx]).data
            clf_loss = cross_entropy_loss(classifier.logits(Tensor(state)),
                                          table.action[idx])
            clf_loss.backward()
            clf_opt.step()

        if step % cfg.target_update == 0:
            load_param_values(target.params(), clone_param_values(model.params()))

        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            record = {"step": step, "loss": float(loss.data),
                      "mean_q": diag["mean_q"], "reg_term": diag["reg"],
                      "fqe_val": None}
            if val_eps:
                record["fqe_val"] = _validation_fqe(probe_policy, dataset,
                                                    val_eps, cfg)
                if record["fqe_val"] > best_val:
                    best_val = record["fqe_val"]
                    best_params = clone_param_values(model.params())
            log.append(record)
            last_snapshot = clone_param_values(model.params())
        if snapshot_interval is not None and \
                (step % snapshot_interval == 0 or step == cfg.total_steps):
            snapshots.append((step, clone_param_values(model.params())))

    if best_params is not None:
        load_param_values(model.params(), best_params)
    return TrainResult(policy=probe_policy, log=log, snapshots=snapshots)


def _validation_fqe(policy: LearnedPolicy, dataset: OfflineDataset,
                    val_eps: list[Episode], cfg: TrainConfig) -> float:
    """Cheap network FQE of the current greedy policy on the val split."""
    from .ope import FqeNetConfig, fqe_network

    fqe_cfg = FqeNetConfig(iterations=4, steps_per_iteration=40,
                           width=min(cfg.hidden_width, 32), depth=2,
                           seed=cfg.seed)
    return fqe_network(dataset, policy, cfg.gamma, fqe_cfg,
                       episodes=val_eps).estimate


# ---------------------------------------------------------------------------
# Bellman residuals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BellmanResiduals:
    samples: Array
    mean: float
    std: float
    hist_counts: Array
    hist_edges: Array


def bellman_residuals(policy: LearnedPolicy, dataset: OfflineDataset,
                      gamma: float, bins: int = 40) -> BellmanResiduals:
    """(r + gamma max_a' Q(s',a')) - Q(s,a) per transition (r - Q when done).

    The one-step bootstrapped target minus the fitted value: positive mass
    means the bootstrap keeps running above the fitted Q, the signature of
    value overestimation; a well-calibrated Q concentrates the distribution
    around zero.
    """
    table = build_transition_table(dataset, policy.strategy)
    q = policy.q_matrix(table.structured, table.f_c, table.f_e)
    q_taken = q[np.arange(table.size), table.action]
    next_q = policy.q_matrix(table.next_structured, table.next_f_c, table.next_f_e)
    bootstrap = dqn_target(table.reward, table.done, next_q, gamma)
    residuals = bootstrap - q_taken
    counts, edges = np.histogram(residuals, bins=bins)
    return BellmanResiduals(samples=residuals, mean=float(residuals.mean()),
                            std=float(residuals.std()),
                            hist_counts=counts, hist_edges=edges)
