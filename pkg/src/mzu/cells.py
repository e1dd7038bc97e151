"""Recurrent cells built from multi-zone transformations.

A step computes a gate and a candidate from two independently
parameterized M-functions, then mixes the previous state with the
candidate per coordinate. Transition cells are the input-free special
case stacked after the main cell within one time step. A conventional
GRU with the same normalization and dropout placement serves as the
baseline, and the `regular_*` ablations swap one M-function for a
plain affine map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import ParamStore, Tensor, glorot_uniform
from .numerics import ops
from .zones import MFunctionConfig, MFunctionParams, m_function, zone_disagreement

ABLATIONS = ("none", "regular_gate", "regular_trans")


@dataclass(frozen=True)
class CellConfig:
    kind: str                      # "mzu" | "gru"
    input_width: int
    state_width: int
    composition: str = "cap"
    zone_count: int = 4
    out_count: Optional[int] = None
    routing_iters: int = 3
    filter_width: int = 64
    transition_depth: int = 0      # transition cells appended per time step
    share_depth_params: bool = False
    ablation: str = "none"
    dropout: float = 0.0
    layer_norm: bool = True
    gcn_activation: str = "sigmoid"

    def __post_init__(self):
        if self.kind not in ("mzu", "gru"):
            raise ConfigError(f"cell kind must be 'mzu' or 'gru', got {self.kind!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.ablation != "none" and self.kind != "mzu":
            raise ConfigError("ablations only apply to mzu cells")
        if self.transition_depth < 0:
            raise ConfigError("transition_depth must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.kind == "mzu":
            # constructing the config validates divisibility constraints
            self.m_config(self.input_width)

    def m_config(self, input_width: int) -> MFunctionConfig:
        return MFunctionConfig(
            input_width=input_width,
            state_width=self.state_width,
            zone_count=self.zone_count,
            composition=self.composition,
            out_count=self.out_count,
            routing_iters=self.routing_iters,
            filter_width=self.filter_width,
            gcn_activation=self.gcn_activation,
        )


@dataclass
class AffineParams:
    """Plain [input, state] -> state map used by the regular ablations."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, store, prefix, in_width, out_width, rng):
        return cls(
            weight=store.add(f"{prefix}/weight", glorot_uniform(rng, (in_width, out_width))),
            bias=store.add(f"{prefix}/bias", np.zeros(out_width)),
        )


TransformParams = Union[MFunctionParams, AffineParams]


@dataclass
class MzuDepthParams:
    """Gate and candidate transforms plus their layer-norm affines."""

    gate: TransformParams
    cand: TransformParams
    gate_ln: Optional[tuple[Tensor, Tensor]]
    cand_ln: Optional[tuple[Tensor, Tensor]]


@dataclass
class GruDepthParams:
    reset: AffineParams
    update: AffineParams
    cand: AffineParams
    reset_ln: Optional[tuple[Tensor, Tensor]]
    update_ln: Optional[tuple[Tensor, Tensor]]
    cand_ln: Optional[tuple[Tensor, Tensor]]


@dataclass
class CellParams:
    """Per-depth parameter groups; index 0 is the input-consuming cell.

    With `share_depth_params`, every transition depth reuses the single
    depth-1 group; the input cell keeps its own parameters because its
    projections have a different input width.
    """

    config: CellConfig
    depths: list

    @classmethod
    def create(cls, store: ParamStore, prefix: str, cfg: CellConfig,
               rng: np.random.Generator) -> "CellParams":
        depths = [cls._make_depth(store, f"{prefix}/d0", cfg, cfg.input_width, rng)]
        if cfg.transition_depth > 0:
            if cfg.share_depth_params:
                shared = cls._make_depth(store, f"{prefix}/dt", cfg, 0, rng)
                depths.extend([shared] * cfg.transition_depth)
            else:
                for level in range(1, cfg.transition_depth + 1):
                    depths.append(
                        cls._make_depth(store, f"{prefix}/d{level}", cfg, 0, rng))
        return cls(config=cfg, depths=depths)

    @staticmethod
    def _ln_pair(store, prefix, width):
        return (store.add(f"{prefix}_gain", np.ones(width)),
                store.add(f"{prefix}_bias", np.zeros(width)))

    @classmethod
    def _make_depth(cls, store, prefix, cfg, input_width, rng):
        width = cfg.state_width
        if cfg.kind == "gru":
            joint = input_width + width
            return GruDepthParams(
                reset=AffineParams.create(store, f"{prefix}/reset", joint, width, rng),
                update=AffineParams.create(store, f"{prefix}/update", joint, width, rng),
                cand=AffineParams.create(store, f"{prefix}/cand", joint, width, rng),
                reset_ln=cls._ln_pair(store, f"{prefix}/reset_ln", width) if cfg.layer_norm else None,
                update_ln=cls._ln_pair(store, f"{prefix}/update_ln", width) if cfg.layer_norm else None,
                cand_ln=cls._ln_pair(store, f"{prefix}/cand_ln", width) if cfg.layer_norm else None,
            )
        m_cfg = cfg.m_config(input_width)
        joint = input_width + width
        if cfg.ablation == "regular_gate":
            gate = AffineParams.create(store, f"{prefix}/gate", joint, width, rng)
        else:
            gate = MFunctionParams.create(store, f"{prefix}/gate", m_cfg, rng)
        if cfg.ablation == "regular_trans":
            cand = AffineParams.create(store, f"{prefix}/cand", joint, width, rng)
        else:
            cand = MFunctionParams.create(store, f"{prefix}/cand", m_cfg, rng)
        return MzuDepthParams(
            gate=gate,
            cand=cand,
            gate_ln=cls._ln_pair(store, f"{prefix}/gate_ln", width) if cfg.layer_norm else None,
            cand_ln=cls._ln_pair(store, f"{prefix}/cand_ln", width) if cfg.layer_norm else None,
        )


@dataclass
class StepTrace:
    """Analysis capture of one step: candidate path internals of M_h."""

    candidate: np.ndarray              # post-tanh, pre-dropout (B, d_h)
    gate: np.ndarray                   # (B, d_h)
    zones: Optional[np.ndarray]        # generated zones of the candidate M
    abstracted: Optional[np.ndarray]   # FFN outputs feeding the aggregation
    raw: Optional[np.ndarray]          # M_h output before layer norm


def _transform(transform: TransformParams, x: Optional[Tensor], h_prev: Tensor):
    """Run an M-function or its affine replacement; returns (out, result)."""
    if isinstance(transform, AffineParams):
        joint = h_prev if x is None else ops.concat([x, h_prev], axis=-1)
        out = ops.add(ops.matmul(joint, transform.weight), transform.bias)
        return out, None
    result = m_function(x, h_prev, transform)
    return result.output, result


def _maybe_layer_norm(value: Tensor, ln: Optional[tuple[Tensor, Tensor]]) -> Tensor:
    if ln is None:
        return value
    return ops.layer_norm(value, ln[0], ln[1])


def mzu_step(x: Optional[Tensor], h_prev: Tensor, depth: MzuDepthParams,
             cfg: CellConfig, rng: Optional[np.random.Generator] = None,
             training: bool = False,
             dzone_out: Optional[list] = None,
             capture: bool = False,
             gate_override: Optional[Tensor] = None,
             cand_override: Optional[Tensor] = None) -> tuple[Tensor, Optional[StepTrace]]:
    """One gated multi-zone update.

    Layer norm applies to each M output before its nonlinearity;
    dropout applies to the candidate after tanh, before the mix. The
    overrides substitute the computed gate/candidate for diagnostics.
    """
    if h_prev.shape[-1] != cfg.state_width:
        raise ShapeError(
            f"mzu_step: state width {h_prev.shape[-1]} != {cfg.state_width}")
    cand_result = None
    if gate_override is not None:
        gate = gate_override
    else:
        gate_raw, gate_result = _transform(depth.gate, x, h_prev)
        gate = ops.sigmoid(_maybe_layer_norm(gate_raw, depth.gate_ln))
        if dzone_out is not None and gate_result is not None:
            dzone_out.append(zone_disagreement(gate_result.zones))
    if cand_override is not None:
        cand = cand_override
        cand_raw = cand_override
    else:
        cand_raw, cand_result = _transform(depth.cand, x, h_prev)
        cand = ops.tanh(_maybe_layer_norm(cand_raw, depth.cand_ln))
        if dzone_out is not None and cand_result is not None:
            dzone_out.append(zone_disagreement(cand_result.zones))
    trace = None
    if capture:
        trace = StepTrace(
            candidate=cand.data,
            gate=gate.data,
            zones=cand_result.zones.data if cand_result is not None else None,
            abstracted=cand_result.abstracted.data if cand_result is not None else None,
            raw=cand_raw.data,
        )
    if training and cfg.dropout > 0.0:
        if rng is None:
            raise ConfigError("mzu_step: training with dropout needs an rng")
        mask = ops.dropout_mask(cand.shape, cfg.dropout, rng, training=True,
                                dtype=cand.dtype)
        cand = ops.dropout_apply(cand, mask)
    # (1 - g) * h + g * c, written with one multiply fewer
    new_state = ops.add(h_prev, ops.mul(gate, ops.sub(cand, h_prev)))
    return new_state, trace


def tmzu_step(h_in: Tensor, depth: MzuDepthParams, cfg: CellConfig,
              rng: Optional[np.random.Generator] = None, training: bool = False,
              dzone_out: Optional[list] = None,
              capture: bool = False) -> tuple[Tensor, Optional[StepTrace]]:
    """Transition step: an mzu_step whose input is the width-0 vector."""
    return mzu_step(None, h_in, depth, cfg, rng=rng, training=training,
                    dzone_out=dzone_out, capture=capture)


def gru_step(x: Optional[Tensor], h_prev: Tensor, depth: GruDepthParams,
             cfg: CellConfig, rng: Optional[np.random.Generator] = None,
             training: bool = False,
             capture: bool = False,
             update_override: Optional[Tensor] = None) -> tuple[Tensor, Optional[StepTrace]]:
    """Standard GRU with layer norm and dropout placed as in mzu_step."""
    joint = h_prev if x is None else ops.concat([x, h_prev], axis=-1)
    reset = ops.sigmoid(_maybe_layer_norm(
        ops.add(ops.matmul(joint, depth.reset.weight), depth.reset.bias), depth.reset_ln))
    if update_override is not None:
        update = update_override
    else:
        update = ops.sigmoid(_maybe_layer_norm(
            ops.add(ops.matmul(joint, depth.update.weight), depth.update.bias),
            depth.update_ln))
    gated_state = ops.mul(reset, h_prev)
    cand_in = gated_state if x is None else ops.concat([x, gated_state], axis=-1)
    cand_raw = ops.add(ops.matmul(cand_in, depth.cand.weight), depth.cand.bias)
    cand = ops.tanh(_maybe_layer_norm(cand_raw, depth.cand_ln))
    trace = None
    if capture:
        trace = StepTrace(candidate=cand.data, gate=update.data,
                          zones=None, abstracted=None, raw=cand_raw.data)
    if training and cfg.dropout > 0.0:
        if rng is None:
            raise ConfigError("gru_step: training with dropout needs an rng")
        mask = ops.dropout_mask(cand.shape, cfg.dropout, rng, training=True,
                                dtype=cand.dtype)
        cand = ops.dropout_apply(cand, mask)
    return ops.add(h_prev, ops.mul(update, ops.sub(cand, h_prev))), trace


def deep_transition_step(x: Optional[Tensor], h_prev: Tensor, params: CellParams,
                         rng: Optional[np.random.Generator] = None,
                         training: bool = False,
                         dzone_out: Optional[list] = None,
                         capture: bool = False) -> tuple[Tensor, list]:
    """One full time step: the input cell, then every transition cell."""
    cfg = params.config
    traces = []
    if cfg.kind == "gru":
        state, trace = gru_step(x, h_prev, params.depths[0], cfg, rng=rng,
                                training=training, capture=capture)
        if capture:
            traces.append(trace)
        for depth in params.depths[1:]:
            state, trace = gru_step(None, state, depth, cfg, rng=rng,
                                    training=training, capture=capture)
            if capture:
                traces.append(trace)
        return state, traces
    state, trace = mzu_step(x, h_prev, params.depths[0], cfg, rng=rng,
                            training=training, dzone_out=dzone_out, capture=capture)
    if capture:
        traces.append(trace)
    for depth in params.depths[1:]:
        state, trace = tmzu_step(state, depth, cfg, rng=rng, training=training,
                                 dzone_out=dzone_out, capture=capture)
        if capture:
            traces.append(trace)
    return state, traces


def functions_per_step(cfg: CellConfig) -> int:
    """How many zone-generating transforms run in one time step."""
    if cfg.kind != "mzu":
        return 0
    per_cell = 2 - (cfg.ablation != "none")
    return per_cell * (1 + cfg.transition_depth)


def encode_sequence(token_ids: np.ndarray, embedding: Tensor, params: CellParams,
                    rng: Optional[np.random.Generator] = None, training: bool = False,
                    direction: str = "fwd",
                    capture: bool = False,
                    dzone_out: Optional[list] = None) -> tuple[list[Tensor], list]:
    """Run the cell over a token sequence from a zero initial state.

    Returns one state per position (batch of one). The backward
    direction reverses the input and re-reverses the output so states
    align with the original positions.
    """
    if direction not in ("fwd", "bwd"):
        raise ConfigError(f"direction must be 'fwd' or 'bwd', got {direction!r}")
    ids = np.asarray(token_ids)
    if direction == "bwd":
        ids = ids[::-1]
    cfg = params.config
    state = Tensor(np.zeros((1, cfg.state_width), dtype=embedding.dtype))
    states, traces = [], []
    for token in ids:
        x = ops.embedding_lookup(embedding, np.array([token]))
        state, step_traces = deep_transition_step(
            x, state, params, rng=rng, training=training,
            dzone_out=dzone_out, capture=capture)
        states.append(state)
        traces.append(step_traces)
    if direction == "bwd":
        states.reverse()
        traces.reverse()
    return states, traces


def bidirectional_encode(token_ids: np.ndarray, embedding: Tensor,
                         fwd_params: CellParams, bwd_params: CellParams,
                         rng: Optional[np.random.Generator] = None,
                         training: bool = False) -> list[Tensor]:
    """Concatenate forward and backward states per position (width 2*d_h)."""
    fwd_states, _ = encode_sequence(token_ids, embedding, fwd_params, rng=rng,
                                    training=training, direction="fwd")
    bwd_states, _ = encode_sequence(token_ids, embedding, bwd_params, rng=rng,
                                    training=training, direction="bwd")
    return [ops.concat([f, b], axis=-1) for f, b in zip(fwd_states, bwd_states)]
