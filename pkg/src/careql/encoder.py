"""Fused state construction from structured features and note embeddings.

Pipeline per decision step: the structured vector runs through a residual
feature-mixing encoder to give l; the note side resolves a context vector
f_c and an event vector f_e from the episode's note history (four
strategies: raw, impute, stack, context), projects them from d_n to d, and
-- under the context strategy -- blends them with a sigmoid gate
psi * f_c + (1 - psi) * f_e. Bidirectional cross-modal attention (one token
per modality, so each softmax is over a single score) then produces the
2d-dimensional fused state fed to the Q-network. Everything downstream of
the raw inputs is differentiable through the netcore tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Episode, JointObservation
from .netcore import Dense, Tensor, concat, init_param

Array = np.ndarray

STRATEGY_KINDS = ("raw", "impute", "stack", "context")


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class NoteStrategy:
    """How per-frame note embeddings become (context, event) inputs."""

    kind: str = "context"
    window: int = 3

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise EncoderError(f"unknown note strategy {self.kind!r}; "
                               f"expected one of {STRATEGY_KINDS}")
        if self.window < 1:
            raise EncoderError(f"stack window must be >= 1, got {self.window}")


@dataclass(frozen=True)
class EncoderConfig:
    n_features: int
    d_n: int
    d: int = 64
    d_k: int = 32
    depth: int = 2
    strategy: NoteStrategy = NoteStrategy()
    use_attention: bool = True

    def __post_init__(self):
        for name in ("n_features", "d_n", "d", "d_k"):
            if getattr(self, name) < 1:
                raise EncoderError(f"{name} must be >= 1")
        if self.depth < 0:
            raise EncoderError("depth must be >= 0")

    @property
    def state_dim(self) -> int:
        return 2 * self.d


# ---------------------------------------------------------------------------
# Note strategies
# ---------------------------------------------------------------------------


def frame_note_inputs(embeddings: Array, present: Array,
                      strategy: NoteStrategy) -> tuple[Array, Array]:
    """Per-frame (context, event) note inputs for one episode.

    embeddings: (K, d_n) with all-zeros rows where no note exists;
    present: (K,) bool. Returns (f_c, f_e), each (K, d_n); f_c is all-zeros
    everywhere except under the context strategy, where it is zero until
    the first present note and frozen to that note afterwards.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    pres = np.asarray(present, dtype=bool)
    K, d_n = emb.shape
    f_c = np.zeros((K, d_n))
    f_e = np.zeros((K, d_n))

    if strategy.kind == "raw":
        f_e[pres] = emb[pres]
        return f_c, f_e

    # forward-fill, shared by impute and context
    filled = np.zeros((K, d_n))
    last = np.zeros(d_n)
    for k in range(K):
        if pres[k]:
            last = emb[k]
        filled[k] = last

    if strategy.kind == "impute":
        return f_c, filled

    if strategy.kind == "stack":
        for k in range(K):
            lo = max(0, k - strategy.window + 1)
            mask = pres[lo:k + 1]
            if mask.any():
                f_e[k] = emb[lo:k + 1][mask].mean(axis=0)
        return f_c, f_e

    # context: event side forward-fills, context side freezes the first note
    present_idx = np.flatnonzero(pres)
    if present_idx.size:
        first = present_idx[0]
        f_c[first:] = emb[first]
    return f_c, filled


def resolve_note(embeddings: Array, present: Array,
                 strategy: NoteStrategy) -> tuple[Array | None, Array]:
    """(f_c, f_e) for the latest frame of a note history.

    f_c is None for every strategy except context.
    """
    if len(embeddings) == 0:
        raise EncoderError("note history must be nonempty")
    f_c, f_e = frame_note_inputs(embeddings, present, strategy)
    if strategy.kind == "context":
        return f_c[-1], f_e[-1]
    return None, f_e[-1]


def episode_note_inputs(episode: Episode,
                        strategy: NoteStrategy) -> tuple[Array, Array]:
    """(f_c, f_e) over all frames (length T+1) of an episode."""
    frames = episode.frames()
    emb = np.stack([f.note_embedding for f in frames])
    pres = np.array([f.note_present for f in frames])
    return frame_note_inputs(emb, pres, strategy)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class StructuredEncoder:
    """Residual feature-mixing encoder: F -> d.

    An input projection followed by `depth` residual blocks
    h <- h + W2 relu(W1 h); with zero block weights the encoder reduces to
    the input affine map.
    """

    def __init__(self, n_features: int, d: int, depth: int,
                 rng: np.random.Generator, name: str = "enc"):
        self.n_features = n_features
        self.d = d
        self.in_proj = Dense(n_features, d, rng, f"{name}.in_proj")
        self.blocks = [
            (Dense(d, d, rng, f"{name}.block{i}.mix"),
             Dense(d, d, rng, f"{name}.block{i}.out"))
            for i in range(depth)
        ]

    def __call__(self, features: Tensor) -> Tensor:
        h = self.in_proj(features)
        for mix, out in self.blocks:
            h = h + out(mix(h).relu())
        return h

    def params(self) -> dict[str, Tensor]:
        merged = dict(self.in_proj.params())
        for mix, out in self.blocks:
            merged.update(mix.params())
            merged.update(out.params())
        return merged


def encode_structured(enc: StructuredEncoder, features: Array | Tensor) -> Tensor:
    x = features if isinstance(features, Tensor) else Tensor(np.atleast_2d(features))
    if x.data.shape[1] != enc.n_features:
        raise EncoderError(f"expected {enc.n_features} features, got {x.data.shape}")
    return enc(x)


class GatedFusion:
    """Sigmoid gate blending the context and event vectors coordinatewise.

    psi = sigmoid(W [f_c; f_e] + b), output psi * f_c + (1 - psi) * f_e,
    so every output coordinate lies between the two inputs.
    """

    def __init__(self, d: int, rng: np.random.Generator, name: str = "gate"):
        self.d = d
        self.W = init_param((d, 2 * d), 2 * d, rng, f"{name}.W")
        self.b = init_param((d,), 2 * d, rng, f"{name}.b")

    def __call__(self, f_c: Tensor, f_e: Tensor) -> Tensor:
        if f_c.data.shape != f_e.data.shape or f_c.data.shape[1] != self.d:
            raise EncoderError(
                f"gate expects matching (B, {self.d}) inputs, got "
                f"{f_c.data.shape} and {f_e.data.shape}"
            )
        psi = (concat([f_c, f_e], axis=1) @ self.W.T + self.b).sigmoid()
        return psi * f_c + (1.0 - psi) * f_e

    def params(self) -> dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}


def gated_fusion(f_c, f_e, gate: GatedFusion) -> Tensor:
    lift = lambda x: x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
    return gate(lift(f_c), lift(f_e))


class CrossModalAttention:
    """Bidirectional single-token cross-modal attention.

    Each modality is projected to query/key (d_k) and value (d) spaces in
    both directions. With one vector per modality the softmax runs over a
    single score, so the attended feature equals the value projection of
    the source modality exactly; each original vector is then concatenated
    with its attended feature and linearly mapped back to d. Output is the
    fused state [l~; n~] of width 2d.
    """

    def __init__(self, d: int, d_k: int, rng: np.random.Generator,
                 name: str = "attn"):
        self.d = d
        self.d_k = d_k
        self.Wq_l = init_param((d_k, d), d, rng, f"{name}.Wq_l")
        self.Wk_l = init_param((d_k, d), d, rng, f"{name}.Wk_l")
        self.Wv_l = init_param((d, d), d, rng, f"{name}.Wv_l")
        self.Wq_n = init_param((d_k, d), d, rng, f"{name}.Wq_n")
        self.Wk_n = init_param((d_k, d), d, rng, f"{name}.Wk_n")
        self.Wv_n = init_param((d, d), d, rng, f"{name}.Wv_n")
        self.out_l = init_param((d, 2 * d), 2 * d, rng, f"{name}.out_l")
        self.out_n = init_param((d, 2 * d), 2 * d, rng, f"{name}.out_n")

    def _attend(self, query_src: Tensor, kv_src: Tensor,
                Wq: Tensor, Wk: Tensor, Wv: Tensor) -> Tensor:
        q = query_src @ Wq.T
        k = kv_src @ Wk.T
        v = kv_src @ Wv.T
        score = (q * k).sum(axis=1, keepdims=True) * (1.0 / np.sqrt(self.d_k))
        alpha = score.softmax(axis=1)  # single token: exactly 1
        return alpha * v

    def __call__(self, n: Tensor, l: Tensor) -> Tensor:
        if n.data.shape[1] != self.d or l.data.shape[1] != self.d:
            raise EncoderError(
                f"attention expects (B, {self.d}) inputs, got "
                f"{n.data.shape} and {l.data.shape}"
            )
        a_struct_to_note = self._attend(l, n, self.Wq_l, self.Wk_n, self.Wv_n)
        a_note_to_struct = self._attend(n, l, self.Wq_n, self.Wk_l, self.Wv_l)
        l_tilde = concat([l, a_note_to_struct], axis=1) @ self.out_l.T
        n_tilde = concat([n, a_struct_to_note], axis=1) @ self.out_n.T
        return concat([l_tilde, n_tilde], axis=1)

    def params(self) -> dict[str, Tensor]:
        return {p.name: p for p in (self.Wq_l, self.Wk_l, self.Wv_l,
                                    self.Wq_n, self.Wk_n, self.Wv_n,
                                    self.out_l, self.out_n)}


def cross_modal_attend(n, l, attn: CrossModalAttention) -> Tensor:
    lift = lambda x: x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
    return attn(lift(n), lift(l))


class StateEncoder:
    """Composition: structured encoder + note path + fusion into a 2d state."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator,
                 name: str = "state"):
        self.config = config
        self.structured = StructuredEncoder(config.n_features, config.d,
                                            config.depth, rng, f"{name}.enc")
        self.note_proj = Dense(config.d_n, config.d, rng, f"{name}.note_proj")
        self.gate = GatedFusion(config.d, rng, f"{name}.gate") \
            if config.strategy.kind == "context" else None
        self.attention = CrossModalAttention(config.d, config.d_k, rng,
                                             f"{name}.attn") \
            if config.use_attention else None

    @property
    def state_dim(self) -> int:
        return self.config.state_dim

    def forward(self, structured: Array | Tensor, f_c: Array | Tensor,
                f_e: Array | Tensor) -> Tensor:
        lift = lambda x: x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        l = self.structured(lift(structured))
        n = self.note_proj(lift(f_e))
        if self.gate is not None:
            n = self.gate(self.note_proj(lift(f_c)), n)
        if self.attention is not None:
            return self.attention(n, l)
        return concat([l, n], axis=1)

    def params(self) -> dict[str, Tensor]:
        merged = dict(self.structured.params())
        merged.update(self.note_proj.params())
        if self.gate is not None:
            merged.update(self.gate.params())
        if self.attention is not None:
            merged.update(self.attention.params())
        return merged


def build_state(obs_history: Sequence[JointObservation],
                encoder: StateEncoder) -> Tensor:
    """Fused state for the last frame of an observation history."""
    if not obs_history:
        raise EncoderError("observation history must be nonempty")
    emb = np.stack([o.note_embedding for o in obs_history])
    pres = np.array([o.note_present for o in obs_history])
    f_c, f_e = frame_note_inputs(emb, pres, encoder.config.strategy)
    return encoder.forward(obs_history[-1].structured[None, :],
                           f_c[-1][None, :], f_e[-1][None, :])
