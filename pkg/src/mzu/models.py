"""Model assemblies: the character LM and the aspect classifier.

A model owns no state of its own; it registers parameters into a
ParamStore and exposes pure forward passes over them. The training
loop owns tapes, gradients, and optimizer slots.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cells import CellConfig, CellParams, deep_transition_step
from .errors import ConfigError, DataError
from .numerics import ParamStore, Tensor, embedding_init, glorot_uniform
from .numerics import ops
from .objective import aspect_logits
from .zones import MFunctionParams


@dataclass(frozen=True)
class CharLMConfig:
    vocab_size: int
    embed_width: int
    cell: CellConfig

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.cell.input_width != self.embed_width:
            raise ConfigError(
                f"cell input width {self.cell.input_width} != embedding width "
                f"{self.embed_width}")


class CharLM:
    """Embedding -> (deep-transition) cell -> affine over the vocabulary."""

    def __init__(self, store: ParamStore, config: CharLMConfig,
                 rng: np.random.Generator):
        self.store = store
        self.config = config
        self.embedding = store.add(
            "embed", embedding_init(rng, (config.vocab_size, config.embed_width)))
        self.cell = CellParams.create(store, "cell", config.cell, rng)
        self.out_weight = store.add(
            "out/weight",
            glorot_uniform(rng, (config.cell.state_width, config.vocab_size)))
        self.out_bias = store.add("out/bias", np.zeros(config.vocab_size))

    @property
    def state_width(self) -> int:
        return self.config.cell.state_width

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.state_width), dtype=self.store.dtype))

    def forward_chunk(self, input_ids: np.ndarray, state: Tensor,
                      rng: Optional[np.random.Generator] = None,
                      training: bool = False,
                      collect_dzone: bool = False
                      ) -> tuple[Tensor, Tensor, list]:
        """Run one TBPTT chunk.

        input_ids is (batch, steps); returns logits (batch, steps, vocab),
        the final state, and the per-invocation disagreement terms.
        """
        input_ids = np.asarray(input_ids)
        if input_ids.ndim != 2:
            raise DataError(f"forward_chunk: expected (batch, steps) ids, got "
                            f"shape {input_ids.shape}")
        batch, steps = input_ids.shape
        dzone_terms: list = [] if collect_dzone else None
        pieces = []
        for t in range(steps):
            x = ops.embedding_lookup(self.embedding, input_ids[:, t])
            state, _ = deep_transition_step(x, state, self.cell, rng=rng,
                                            training=training, dzone_out=dzone_terms)
            logits_t = ops.add(ops.matmul(state, self.out_weight), self.out_bias)
            pieces.append(ops.reshape(logits_t, (batch, 1, self.config.vocab_size)))
        logits = pieces[0] if steps == 1 else ops.concat(pieces, axis=1)
        return logits, state, (dzone_terms or [])

    def encode_ids(self, ids: np.ndarray, capture: bool = False
                   ) -> tuple[list[Tensor], list]:
        """Single-sequence forward from a zero state; optionally keep traces."""
        ids = np.asarray(ids).reshape(-1)
        state = self.initial_state(1)
        states, traces = [], []
        for token in ids:
            x = ops.embedding_lookup(self.embedding, np.array([token]))
            state, step_traces = deep_transition_step(
                x, state, self.cell, training=False, capture=capture)
            states.append(state)
            traces.append(step_traces)
        return states, traces

    def candidate_m_params(self, depth: int = -1) -> MFunctionParams:
        """The candidate-path M-function at a transition depth (default last)."""
        transform = self.cell.depths[depth].cand
        if not isinstance(transform, MFunctionParams):
            raise ConfigError("model's candidate path is not a multi-zone transform")
        return transform


@dataclass(frozen=True)
class AspectModelConfig:
    vocab_size: int
    embed_width: int
    cell: CellConfig
    n_labels: int = 4

    def __post_init__(self):
        if self.cell.input_width != self.embed_width:
            raise ConfigError("cell input width must equal embedding width")


class AspectClassifier:
    """Bi-directional encoder, mean pooling, and a 4-way softmax head."""

    def __init__(self, store: ParamStore, config: AspectModelConfig,
                 rng: np.random.Generator):
        self.store = store
        self.config = config
        self.embedding = store.add(
            "embed", embedding_init(rng, (config.vocab_size, config.embed_width)))
        self.fwd = CellParams.create(store, "fwd", config.cell, rng)
        self.bwd = CellParams.create(store, "bwd", config.cell, rng)
        joined = 2 * config.cell.state_width + config.embed_width
        self.head_weight = store.add("head/weight",
                                     glorot_uniform(rng, (joined, config.n_labels)))
        self.head_bias = store.add("head/bias", np.zeros(config.n_labels))

    def aspect_vector(self, aspect_tokens) -> Tensor:
        ids = np.asarray(aspect_tokens, dtype=int)
        if ids.size == 0:
            raise DataError("aspect_vector: aspect has no tokens")
        looked_up = ops.embedding_lookup(self.embedding, ids)
        return ops.reduce_mean(looked_up, axis=0, keepdims=True)

    def example_logits(self, tokens, aspect_tokens,
                       rng: Optional[np.random.Generator] = None,
                       training: bool = False) -> Tensor:
        from .cells import bidirectional_encode
        if len(tokens) == 0:
            raise DataError("example_logits: empty sentence")
        states = bidirectional_encode(np.asarray(tokens, dtype=int), self.embedding,
                                      self.fwd, self.bwd, rng=rng, training=training)
        return aspect_logits(states, self.aspect_vector(aspect_tokens),
                             self.head_weight, self.head_bias)
