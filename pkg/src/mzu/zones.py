"""The multi-zone transformation: generate, compose, aggregate.

Inputs are projected into several zone vectors, the zones interact
through one of three backends (dot-product self-attention, graph
convolution over a cosine-similarity graph, or capsule dynamic
routing), each composed zone passes through a shared two-layer FFN,
and the results are concatenated and mapped back to the state width.

All entry points are batch-first: states are (B, width) and zone sets
are (B, zones, zone_width). Everything is a pure function over
immutable tensors plus read-only parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import ParamStore, Tensor, constant, glorot_uniform
from .numerics import ops

COMPOSITIONS = ("sat", "gcn", "cap")
DEGREE_FLOOR = 1e-3   # keeps the inverse-sqrt degree finite under negative edges


@dataclass(frozen=True)
class MFunctionConfig:
    """Shapes and backend choice for one multi-zone transformation.

    `input_width` may be 0 for transition cells that see only the
    state. `out_count` defaults to `zone_count`; only the capsule
    backend supports a different value.
    """

    input_width: int
    state_width: int
    zone_count: int = 4
    composition: str = "cap"
    out_count: Optional[int] = None
    routing_iters: int = 3
    filter_width: int = 64
    gcn_activation: str = "sigmoid"

    def __post_init__(self):
        if self.composition not in COMPOSITIONS:
            raise ConfigError(f"composition must be one of {COMPOSITIONS}, got {self.composition!r}")
        if self.zone_count < 1:
            raise ConfigError("zone_count must be >= 1")
        if self.state_width % self.zone_count != 0:
            raise ConfigError(
                f"zone_count {self.zone_count} must divide state_width {self.state_width}")
        out = self.out_count if self.out_count is not None else self.zone_count
        object.__setattr__(self, "out_count", out)
        if self.composition == "cap":
            if self.state_width % out != 0:
                raise ConfigError(
                    f"out_count {out} must divide state_width {self.state_width}")
            if self.routing_iters < 1:
                raise ConfigError("routing_iters must be >= 1")
        elif out != self.zone_count:
            raise ConfigError(
                f"{self.composition} composition keeps out_count == zone_count")
        if self.gcn_activation not in ("sigmoid", "relu"):
            raise ConfigError("gcn_activation must be 'sigmoid' or 'relu'")

    @property
    def zone_width(self) -> int:
        return self.state_width // self.zone_count

    @property
    def out_width(self) -> int:
        """Width of one composed zone (capsule outputs may differ)."""
        if self.composition == "cap":
            return self.state_width // self.out_count
        return self.zone_width


@dataclass
class MFunctionParams:
    """Tensors for one M-function; all registered under one prefix.

    `zone_proj` packs the per-zone projection matrices side by side:
    column block i is the projection producing zone i, so one matmul
    generates every zone.
    """

    config: MFunctionConfig
    zone_proj: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    agg_weight: Tensor
    agg_bias: Tensor
    attn_query: Optional[Tensor] = None
    attn_key: Optional[Tensor] = None
    attn_value: Optional[Tensor] = None
    gcn_mix: Optional[Tensor] = None
    cap_route: Optional[Tensor] = None

    @classmethod
    def create(cls, store: ParamStore, prefix: str, cfg: MFunctionConfig,
               rng: np.random.Generator) -> "MFunctionParams":
        in_w = cfg.input_width + cfg.state_width
        d_z, d_o = cfg.zone_width, cfg.out_width
        kwargs = {}
        zone_proj = store.add(
            f"{prefix}/zone_proj",
            glorot_uniform(rng, (in_w, cfg.state_width), fan_in=in_w, fan_out=d_z))
        if cfg.composition == "sat":
            for name in ("attn_query", "attn_key", "attn_value"):
                kwargs[name] = store.add(f"{prefix}/{name}", glorot_uniform(rng, (d_z, d_z)))
        elif cfg.composition == "gcn":
            kwargs["gcn_mix"] = store.add(f"{prefix}/gcn_mix", glorot_uniform(rng, (d_z, d_o)))
        else:
            # one routing matrix per output capsule, shared over inputs
            kwargs["cap_route"] = store.add(
                f"{prefix}/cap_route",
                glorot_uniform(rng, (cfg.out_count, d_z, d_o), fan_in=d_z, fan_out=d_o))
        return cls(
            config=cfg,
            zone_proj=zone_proj,
            ffn_w1=store.add(f"{prefix}/ffn_w1", glorot_uniform(rng, (d_o, cfg.filter_width))),
            ffn_b1=store.add(f"{prefix}/ffn_b1", np.zeros(cfg.filter_width)),
            ffn_w2=store.add(f"{prefix}/ffn_w2", glorot_uniform(rng, (cfg.filter_width, d_o))),
            ffn_b2=store.add(f"{prefix}/ffn_b2", np.zeros(d_o)),
            agg_weight=store.add(
                f"{prefix}/agg_weight",
                glorot_uniform(rng, (cfg.out_count * d_o, cfg.state_width))),
            agg_bias=store.add(f"{prefix}/agg_bias", np.zeros(cfg.state_width)),
            **kwargs,
        )


@dataclass
class RoutingState:
    """Intermediate routing quantities, captured on request for diagnostics."""

    logits: np.ndarray                 # final (B, N, J)
    couplings: list = field(default_factory=list)   # (B, N, J) per iteration
    predictions: Optional[np.ndarray] = None        # (B, J, N, d_o)


@dataclass
class MFunctionResult:
    output: Tensor                     # (B, state_width)
    zones: Tensor                      # (B, N, zone_width); feeds the disagreement term
    composed: Tensor                   # (B, J, out_width)
    abstracted: Tensor                 # (B, J, out_width) after the shared FFN
    routing: Optional[RoutingState] = None


def generate_zones(x: Optional[Tensor], h_prev: Tensor,
                   params: MFunctionParams) -> Tensor:
    """Project [input, state] into the zone set (B, N, zone_width)."""
    cfg = params.config
    if x is None or cfg.input_width == 0:
        if cfg.input_width != 0:
            raise ShapeError("generate_zones: config expects an input vector")
        joint = h_prev
    else:
        if x.shape[-1] != cfg.input_width:
            raise ShapeError(
                f"generate_zones: input width {x.shape[-1]} != {cfg.input_width}")
        joint = ops.concat([x, h_prev], axis=-1)
    if h_prev.shape[-1] != cfg.state_width:
        raise ShapeError(
            f"generate_zones: state width {h_prev.shape[-1]} != {cfg.state_width}")
    flat = ops.matmul(joint, params.zone_proj)
    batch = flat.shape[0]
    return ops.reshape(flat, (batch, cfg.zone_count, cfg.zone_width))


def compose_sat(zones: Tensor, params: MFunctionParams) -> Tensor:
    """Scaled dot-product self-attention among zones."""
    d_z = params.config.zone_width
    queries = ops.matmul(zones, params.attn_query)
    keys = ops.matmul(zones, params.attn_key)
    values = ops.matmul(zones, params.attn_value)
    scores = ops.scale(ops.matmul(queries, ops.swap_last_axes(keys)), 1.0 / np.sqrt(d_z))
    weights = ops.softmax_rows(scores)
    return ops.matmul(weights, values)


def build_adjacency(zones: Tensor) -> Tensor:
    """Pairwise cosine similarity with the diagonal forced to exactly 1.

    Self-connections are overwritten after the similarity computation,
    so zero zones still carry unit self-weight.
    """
    batch, n, d_z = zones.shape
    left = ops.reshape(zones, (batch, n, 1, d_z))
    right = ops.reshape(zones, (batch, 1, n, d_z))
    similarity = ops.cosine(left, right)             # (B, N, N)
    eye = np.eye(n, dtype=zones.dtype)
    off_diag = ops.mul(similarity, constant(1.0 - eye))
    return ops.add(off_diag, constant(eye))


def compose_gcn(zones: Tensor, params: MFunctionParams) -> Tensor:
    """One graph-convolution layer over the cosine-similarity graph.

    Row degrees are clamped at DEGREE_FLOOR before the inverse square
    root; negative cosine edges can otherwise drive them to zero or
    below.
    """
    cfg = params.config
    batch, n, _ = zones.shape
    adjacency = build_adjacency(zones)
    degrees = ops.reduce_sum(adjacency, axis=-1)              # (B, N)
    inv_sqrt = ops.div(constant(np.ones((), dtype=zones.dtype)),
                       ops.sqrt(ops.clamp_min(degrees, DEGREE_FLOOR)))
    normalized = ops.mul(ops.mul(adjacency, ops.reshape(inv_sqrt, (batch, n, 1))),
                         ops.reshape(inv_sqrt, (batch, 1, n)))
    mixed = ops.matmul(ops.matmul(normalized, zones), params.gcn_mix)
    if cfg.gcn_activation == "relu":
        return ops.relu(mixed)
    return ops.sigmoid(mixed)


def squash(vectors: Tensor) -> Tensor:
    """Shrink each last-axis vector to norm n^2/(1+n^2) < 1, keeping direction."""
    norm = ops.l2_norm(vectors, keepdims=True)
    one = constant(np.ones((), dtype=vectors.dtype))
    factor = ops.div(norm, ops.add(one, ops.mul(norm, norm)))
    return ops.mul(vectors, factor)


def compose_cap(zones: Tensor, params: MFunctionParams,
                capture: bool = False) -> tuple[Tensor, Optional[RoutingState]]:
    """Dynamic routing from the zone set to `out_count` capsules.

    Logits start at zero each invocation; couplings are a softmax over
    output capsules; gradients flow through the whole unrolled loop.
    """
    cfg = params.config
    batch, n, d_z = zones.shape
    j, d_o = cfg.out_count, cfg.out_width
    # predictions[b, j, i, :] = zone_i @ route_j; one GEMM per output capsule
    flat = ops.reshape(zones, (batch * n, d_z))
    routes = ops.split(params.cap_route, [1] * j, axis=0)
    per_capsule = [
        ops.reshape(ops.matmul(flat, ops.reshape(route, (d_z, d_o))),
                    (batch, 1, n, d_o))
        for route in routes
    ]
    predictions = per_capsule[0] if j == 1 else ops.concat(per_capsule, axis=1)
    logits = constant(np.zeros((batch, n, j), dtype=zones.dtype))
    state = RoutingState(logits=None, predictions=predictions.data if capture else None) \
        if capture else None
    outputs = None
    for _ in range(cfg.routing_iters):
        couplings = ops.softmax_rows(logits)                  # (B, N, J), rows sum to 1
        if capture:
            state.couplings.append(couplings.data)
        weights = ops.reshape(ops.swap_last_axes(couplings), (batch, j, 1, n))
        summed = ops.reshape(ops.matmul(weights, predictions), (batch, j, d_o))
        outputs = squash(summed)
        agreement = ops.matmul(predictions,
                               ops.reshape(outputs, (batch, j, d_o, 1)))
        logits = ops.add(logits, ops.swap_last_axes(
            ops.reshape(agreement, (batch, j, n))))
    if capture:
        state.logits = logits.data
    return outputs, state


def abstract_zones(composed: Tensor, params: MFunctionParams) -> Tensor:
    """Shared position-wise FFN over composed zones: relu(xW1+b1)W2+b2."""
    hidden = ops.relu(ops.add(ops.matmul(composed, params.ffn_w1), params.ffn_b1))
    return ops.add(ops.matmul(hidden, params.ffn_w2), params.ffn_b2)


def project_concat(abstracted: Tensor, params: MFunctionParams) -> Tensor:
    """Concatenate abstracted zones and map to the state width."""
    cfg = params.config
    batch = abstracted.shape[0]
    flat = ops.reshape(abstracted, (batch, cfg.out_count * cfg.out_width))
    return ops.add(ops.matmul(flat, params.agg_weight), params.agg_bias)


def aggregate_zones(composed: Tensor, params: MFunctionParams) -> Tensor:
    """FFN each composed zone, concatenate, and project to (B, state_width)."""
    return project_concat(abstract_zones(composed, params), params)


def m_function(x: Optional[Tensor], h_prev: Tensor, params: MFunctionParams,
               capture: bool = False) -> MFunctionResult:
    """Full pipeline: generate -> compose -> aggregate.

    The generated zone set is exposed for the disagreement term, the
    abstracted zones for per-zone analysis.
    """
    cfg = params.config
    zones = generate_zones(x, h_prev, params)
    routing = None
    if cfg.composition == "sat":
        composed = compose_sat(zones, params)
    elif cfg.composition == "gcn":
        composed = compose_gcn(zones, params)
    else:
        composed, routing = compose_cap(zones, params, capture=capture)
    abstracted = abstract_zones(composed, params)
    output = project_concat(abstracted, params)
    return MFunctionResult(output=output, zones=zones, composed=composed,
                           abstracted=abstracted, routing=routing)


def zone_disagreement(zones: Tensor) -> Tensor:
    """Negative mean pairwise cosine over the zone set, per batch row.

    Includes the i == j terms, so the value lies in [-1, 0] and equals
    -1 only when all zones are positively collinear.
    """
    return ops.scale(ops.mean_pairwise_cosine(zones), -1.0)
