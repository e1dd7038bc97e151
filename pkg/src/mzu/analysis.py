"""Qualitative analyses: relevance grayscale maps and per-zone diagnostics.

The relevance of an earlier position to the current step is the cosine
between the current candidate activation and the earlier hidden state.
The per-zone variant decomposes the candidate's pre-activation into
per-zone contributions through the aggregation linear map, which is
exact because that map is linear in the abstracted zones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .models import CharLM
from .zones import MFunctionParams


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b / (na * nb))


@dataclass
class RelevanceMap:
    """Rows of cosine relevance, one per query position.

    Row k corresponds to query position `query_positions[k]` and holds
    one value per strictly earlier position, so rows are ragged.
    """

    query_positions: list[int]
    rows: list[np.ndarray]
    context_length: int
    chars: Optional[str] = None
    zone: Optional[int] = None

    def __post_init__(self):
        for position, row in zip(self.query_positions, self.rows):
            if len(row) != position:
                raise ConfigError(
                    f"relevance row for position {position} has {len(row)} values")


def zone_contributions(abstracted: np.ndarray, params: MFunctionParams) -> np.ndarray:
    """Per-zone candidate contributions through the aggregation map.

    Zeroing all abstracted zones except one before the aggregation
    linear yields a state-width vector per zone; the contributions plus
    the aggregation bias sum exactly to the full pre-activation.
    """
    cfg = params.config
    flat = abstracted.reshape(cfg.out_count, cfg.out_width)
    weight = params.agg_weight.data.reshape(cfg.out_count, cfg.out_width,
                                            cfg.state_width)
    return np.einsum("jo,joh->jh", flat, weight)


def _encode_with_traces(ids: np.ndarray, model: CharLM):
    states, traces = model.encode_ids(ids, capture=True)
    hidden = np.concatenate([s.data for s in states], axis=0)
    final_traces = [step[-1] for step in traces]     # last transition depth
    return hidden, final_traces


def relevance_map(ids: np.ndarray, model: CharLM, last_q: int,
                  chars: Optional[str] = None) -> RelevanceMap:
    """Cosine between each late candidate activation and every earlier state."""
    ids = np.asarray(ids).reshape(-1)
    if last_q < 1:
        raise ConfigError("last_q must be >= 1")
    if len(ids) <= last_q:
        raise DataError(
            f"text of {len(ids)} symbols is too short for {last_q} query positions")
    hidden, traces = _encode_with_traces(ids, model)
    positions = list(range(len(ids) - last_q, len(ids)))
    rows = []
    for t in positions:
        candidate = traces[t].candidate[0]
        rows.append(np.array([_cosine(candidate, hidden[p]) for p in range(t)]))
    return RelevanceMap(query_positions=positions, rows=rows,
                        context_length=len(ids), chars=chars)


def zone_relevance_map(ids: np.ndarray, model: CharLM, last_q: int,
                       chars: Optional[str] = None) -> list[RelevanceMap]:
    """One relevance map per zone of the candidate transform.

    The zone-k candidate vector is the aggregation-map image of the
    abstracted zone set with every zone but k zeroed.
    """
    ids = np.asarray(ids).reshape(-1)
    if len(ids) <= last_q:
        raise DataError(
            f"text of {len(ids)} symbols is too short for {last_q} query positions")
    params = model.candidate_m_params(depth=-1)
    hidden, traces = _encode_with_traces(ids, model)
    positions = list(range(len(ids) - last_q, len(ids)))
    maps = []
    for zone in range(params.config.out_count):
        rows = []
        for t in positions:
            if traces[t].abstracted is None:
                raise ConfigError("zone relevance needs a multi-zone candidate path")
            contribution = zone_contributions(traces[t].abstracted, params)[zone]
            rows.append(np.array([_cosine(contribution, hidden[p]) for p in range(t)]))
        maps.append(RelevanceMap(query_positions=positions, rows=rows,
                                 context_length=len(ids), chars=chars, zone=zone))
    return maps


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _pixel(value: float) -> int:
    return int(round(255 * (min(max(value, -1.0), 1.0) + 1.0) / 2.0))


def export_map(relevance: RelevanceMap, path, format: str = "pgm") -> None:
    """Write a map as binary PGM (8-bit grayscale) or CSV.

    PGM maps relevance r to round(255*(r+1)/2); cells beyond a row's
    valid range render black. CSV keeps raw floats to six decimals with
    a header row of context characters.
    """
    path = Path(path)
    width = max(relevance.query_positions)
    if format == "pgm":
        height = len(relevance.rows)
        pixels = bytearray()
        for row in relevance.rows:
            padded = [_pixel(v) for v in row] + [0] * (width - len(row))
            pixels.extend(padded)
        header = f"P5\n{width} {height}\n255\n".encode("ascii")
        path.write_bytes(header + bytes(pixels))
    elif format == "csv":
        chars = relevance.chars
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            header = ["query"] + [
                (chars[p] if chars else str(p)) for p in range(width)]
            writer.writerow(header)
            for position, row in zip(relevance.query_positions, relevance.rows):
                label = chars[position] if chars else str(position)
                cells = [f"{v:.6f}" for v in row] + [""] * (width - len(row))
                writer.writerow([label] + cells)
    else:
        raise ConfigError(f"unknown export format {format!r} (pgm or csv)")
