"""Relevance maps, per-zone decomposition, and export formats."""

import csv
import math

import numpy as np
import pytest

from mzu.analysis import RelevanceMap, export_map, relevance_map, zone_contributions, \
    zone_relevance_map
from mzu.cells import CellConfig
from mzu.errors import ConfigError, DataError
from mzu.models import CharLM, CharLMConfig
from mzu.numerics import ParamStore


def build_model(composition="sat", state=16, vocab=6, depth=0, seed=0,
                kind="mzu", ablation="none"):
    cell = CellConfig(kind=kind, input_width=4, state_width=state,
                      composition=composition, zone_count=4,
                      out_count=2 if composition == "cap" else None,
                      routing_iters=2, filter_width=8, transition_depth=depth,
                      ablation=ablation)
    store = ParamStore()
    return CharLM(store, CharLMConfig(vocab_size=vocab, embed_width=4, cell=cell),
                  np.random.default_rng(seed))


def cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b / (na * nb))


class TestRelevanceMap:
    def test_rows_cover_strictly_earlier_positions(self):
        model = build_model()
        ids = np.array([0, 1, 2, 3, 4, 5, 1, 2])
        result = relevance_map(ids, model, last_q=3)
        assert result.query_positions == [5, 6, 7]
        assert [len(r) for r in result.rows] == [5, 6, 7]

    def test_values_in_cosine_range(self):
        model = build_model(seed=4)
        rng = np.random.default_rng(0)
        ids = rng.integers(0, 6, size=20)
        result = relevance_map(ids, model, last_q=5)
        for row in result.rows:
            assert (np.abs(row) <= 1 + 1e-7).all()

    def test_matches_scripted_cosine_oracle(self):
        model = build_model(seed=2)
        ids = np.array([1, 3, 0])
        result = relevance_map(ids, model, last_q=1)
        states, traces = model.encode_ids(ids, capture=True)
        hidden = [s.data[0] for s in states]
        candidate = traces[2][-1].candidate[0]
        expected = [cosine(candidate, hidden[p]) for p in range(2)]
        np.testing.assert_allclose(result.rows[0], expected, rtol=1e-6)

    def test_too_short_text_rejected(self):
        model = build_model()
        with pytest.raises(DataError, match="short"):
            relevance_map(np.array([0, 1]), model, last_q=3)

    def test_deterministic(self):
        model = build_model(seed=8)
        ids = np.array([0, 1, 2, 3, 4, 0, 1])
        a = relevance_map(ids, model, last_q=2)
        b = relevance_map(ids, model, last_q=2)
        for ra, rb in zip(a.rows, b.rows):
            np.testing.assert_array_equal(ra, rb)


class TestZoneRelevance:
    def test_one_map_per_zone(self):
        model = build_model(composition="sat")
        ids = np.arange(6) % 6
        maps = zone_relevance_map(ids, model, last_q=2)
        assert len(maps) == 4          # sat keeps out zones == zones
        assert [m.zone for m in maps] == [0, 1, 2, 3]

    def test_contributions_sum_to_full_preactivation(self):
        model = build_model(composition="cap", seed=5)
        ids = np.array([0, 1, 2, 3, 4])
        _, traces = model.encode_ids(ids, capture=True)
        params = model.candidate_m_params()
        for step in traces:
            trace = step[-1]
            contributions = zone_contributions(trace.abstracted, params)
            reconstructed = contributions.sum(axis=0) + params.agg_bias.data
            np.testing.assert_allclose(reconstructed, trace.raw[0],
                                       rtol=1e-4, atol=1e-5)

    def test_matches_zero_masked_forward_oracle(self):
        model = build_model(composition="sat", seed=7)
        ids = np.array([2, 4, 1, 0])
        maps = zone_relevance_map(ids, model, last_q=1)
        states, traces = model.encode_ids(ids, capture=True)
        params = model.candidate_m_params()
        abstracted = traces[3][-1].abstracted.copy()
        hidden = [s.data[0] for s in states]
        for zone, zmap in enumerate(maps):
            masked = np.zeros_like(abstracted)
            masked[0, zone] = abstracted[0, zone]
            vector = masked.reshape(-1) @ params.agg_weight.data
            expected = [cosine(vector, hidden[p]) for p in range(3)]
            np.testing.assert_allclose(zmap.rows[0], expected, rtol=1e-5, atol=1e-7)

    def test_non_mzu_model_rejected(self):
        model = build_model(kind="gru", composition="cap")
        with pytest.raises(ConfigError):
            zone_relevance_map(np.arange(5), model, last_q=1)

    def test_regular_trans_rejected(self):
        model = build_model(ablation="regular_trans")
        with pytest.raises(ConfigError):
            zone_relevance_map(np.arange(5), model, last_q=1)


class TestExport:
    def sample_map(self):
        return RelevanceMap(query_positions=[2, 3],
                            rows=[np.array([1.0, -1.0]),
                                  np.array([0.0, 0.5, -0.5])],
                            context_length=4, chars="abcd")

    def test_pgm_extremes_and_header(self, tmp_path):
        path = tmp_path / "m.pgm"
        export_map(self.sample_map(), path, format="pgm")
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n3 2\n255\n")
        pixels = raw[len(b"P5\n3 2\n255\n"):]
        assert pixels[0] == 255        # r = 1
        assert pixels[1] == 0          # r = -1
        assert pixels[2] == 0          # padding
        assert pixels[3] == 128        # r = 0

    def test_csv_round_trip_six_decimals(self, tmp_path):
        path = tmp_path / "m.csv"
        source = self.sample_map()
        export_map(source, path, format="csv")
        with path.open() as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["query", "a", "b", "c"]
        parsed = [float(v) for v in rows[1][1:] if v != ""]
        np.testing.assert_allclose(parsed, source.rows[0], atol=5e-7)
        parsed = [float(v) for v in rows[2][1:] if v != ""]
        np.testing.assert_allclose(parsed, source.rows[1], atol=5e-7)

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="format"):
            export_map(self.sample_map(), tmp_path / "m.bin", format="bin")
