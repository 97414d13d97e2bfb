import json
import math

import numpy as np
import pytest

from routelens.trace import (CHUNK_AGGREGATE, TOKEN_TOPK_ONLY,
                             ChunkAggregate, TokenRouting, TraceFormatError,
                             TraceMeta, TraceValidationError, aggregate_tokens,
                             convert_to_aggregate_file, quantize_probs,
                             read_trace, topk_of_probs, write_chunk_trace,
                             write_token_trace)
from routelens.aggregate import build_profiles

from conftest import make_chunk, make_meta, make_token


class TestTraceMeta:
    def test_valid_meta(self):
        meta = make_meta(num_experts=128, top_k=8, layers=range(48))
        assert meta.num_experts == 128

    def test_top_k_exceeds_experts(self):
        with pytest.raises(TraceValidationError, match="top_k"):
            make_meta(num_experts=4, top_k=5)

    def test_layers_must_increase(self):
        with pytest.raises(TraceValidationError, match="strictly increasing"):
            make_meta(layers=(3, 1))

    def test_languages_unique(self):
        with pytest.raises(TraceValidationError, match="unique"):
            make_meta(languages=("en", "en"))

    def test_empty_layers(self):
        with pytest.raises(TraceValidationError, match="non-empty"):
            make_meta(layers=())

    def test_unknown_capture_mode(self):
        with pytest.raises(TraceValidationError, match="capture_mode"):
            make_meta(capture_mode="bogus")


class TestTopK:
    def test_plain_ordering(self):
        ids = topk_of_probs(np.array([0.1, 0.4, 0.2, 0.3]), 2)
        assert list(ids) == [1, 3]

    def test_tie_breaks_to_lower_id(self):
        ids = topk_of_probs(np.array([0.25, 0.25, 0.25, 0.25]), 2)
        assert list(ids) == [0, 1]

    def test_zero_ties_below_support(self):
        # m < K: remaining slots fall to the lowest-indexed zero entries
        ids = topk_of_probs(np.array([0.0, 0.0, 1.0, 0.0]), 3)
        assert list(ids) == [2, 0, 1]

    def test_rows_match_single(self, rng):
        p = rng.dirichlet(np.ones(16), size=50)
        rows = topk_of_probs(p, 4)
        for i in range(50):
            assert list(rows[i]) == list(topk_of_probs(p[i], 4))

    def test_rows_with_massive_ties(self):
        p = np.zeros((4, 8))
        p[:, 5] = 1.0
        rows = topk_of_probs(p, 3)
        for row in rows:
            assert list(row) == [5, 0, 1]


class TestTokenValidation:
    def test_minimal_well_formed_file(self, tmp_path):
        meta = make_meta(num_experts=128, top_k=8, layers=(0,), languages=("en",))
        probs = np.full(128, 1.0 / 128)
        rec = make_token(meta, probs)
        assert len(set(rec.topk_experts)) == 8
        path = tmp_path / "t.jsonl"
        write_token_trace(path, meta, [rec])
        got_meta, records = read_trace(path)
        records = list(records)
        assert len(records) == 1
        assert got_meta == meta
        assert records[0] == rec

    def test_duplicate_expert_id(self):
        meta = make_meta()
        rec = TokenRouting(0, 0, 0, "en", True, (3, 3), (0.5, 0.5),
                           full_probs=tuple(np.full(8, 0.125)))
        with pytest.raises(TraceValidationError, match="duplicate expert id 3"):
            rec.validate(meta)

    def test_prob_mass_out_of_tolerance(self, tmp_path):
        # Scale a valid distribution by 0.9; direct summation gives 0.90.
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",))
        probs = np.full(4, 0.25) * 0.9
        assert abs(math.fsum(probs) - 0.9) < 1e-12
        rec = TokenRouting(0, 0, 0, "en", True, (0, 1), (0.225, 0.225),
                           full_probs=tuple(probs))
        with pytest.raises(TraceValidationError, match="probability mass out of tolerance"):
            rec.validate(meta)
        # And through the file reader, with the record number reported.
        path = tmp_path / "bad.jsonl"
        with open(path, "w") as fh:
            fh.write(json.dumps({"meta": meta.to_dict()}) + "\n")
            fh.write(json.dumps(rec.to_dict()) + "\n")
        _, records = read_trace(path)
        with pytest.raises(TraceValidationError, match="record 1"):
            list(records)

    def test_expert_id_out_of_range(self):
        meta = make_meta(num_experts=4, top_k=2)
        rec = TokenRouting(0, 0, 0, "en", True, (0, 7), (0.5, 0.5))
        with pytest.raises(TraceValidationError, match="out of range"):
            rec.validate(make_meta(num_experts=4, top_k=2, capture_mode=TOKEN_TOPK_ONLY,
                                   prob_basis="topk_only"))

    def test_layer_not_declared(self):
        meta = make_meta(layers=(0, 2))
        rec = make_token(meta, np.full(8, 0.125), layer=1)
        with pytest.raises(TraceValidationError, match="layer 1 not in moe_layers"):
            rec.validate(meta)

    def test_language_not_declared(self):
        meta = make_meta(languages=("en",))
        rec = make_token(meta, np.full(8, 0.125))
        rec = TokenRouting(**{**rec.__dict__, "language": "xx"})
        with pytest.raises(TraceValidationError, match="language 'xx'"):
            rec.validate(meta)

    def test_topk_must_match_full_probs(self):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",))
        probs = (0.4, 0.3, 0.2, 0.1)
        rec = TokenRouting(0, 0, 0, "en", True, (0, 2), (0.4, 0.2), full_probs=probs)
        with pytest.raises(TraceValidationError, match="do not match"):
            rec.validate(meta)

    def test_capture_mode_mismatch_missing_full(self):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",))
        rec = TokenRouting(0, 0, 0, "en", True, (0, 1), (0.5, 0.5), full_probs=None)
        with pytest.raises(TraceValidationError, match="capture_mode mismatch"):
            rec.validate(meta)

    def test_capture_mode_mismatch_unexpected_full(self):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",),
                         capture_mode=TOKEN_TOPK_ONLY, prob_basis="topk_only")
        rec = TokenRouting(0, 0, 0, "en", True, (0, 1), (0.5, 0.5),
                           full_probs=(0.5, 0.5, 0.0, 0.0))
        with pytest.raises(TraceValidationError, match="capture_mode mismatch"):
            rec.validate(meta)


class TestFileFormat:
    def test_round_trip_token(self, tmp_path, rng):
        meta = make_meta(num_experts=8, top_k=3, layers=(0, 5), languages=("en", "he"))
        records = []
        for i in range(20):
            probs = rng.dirichlet(np.ones(8))
            records.append(make_token(meta, probs, chunk_id=i % 3, token_index=i,
                                      layer=(0 if i % 2 else 5),
                                      language=("en" if i % 3 else "he")))
        path = tmp_path / "t.jsonl"
        write_token_trace(path, meta, records)
        got_meta, got = read_trace(path)
        got = list(got)
        assert got_meta == meta
        assert got == records  # floats round-trip exactly via repr

    def test_round_trip_chunk(self, tmp_path):
        meta = make_meta(num_experts=4, top_k=2, layers=(0, 1), languages=("en", "he"),
                         capture_mode=CHUNK_AGGREGATE)
        chunks = [
            make_chunk(meta, [2, 2, 1, 1], chunk_id=0, layer=0, language="en",
                       char_count=17, segment_count=3),
            make_chunk(meta, [0, 3, 3, 0], chunk_id=1, layer=1, language="he"),
        ]
        path = tmp_path / "c.json"
        write_chunk_trace(path, meta, chunks)
        got_meta, got = read_trace(path)
        assert got_meta == meta
        assert list(got) == chunks

    def test_chunk_file_ordered_by_language_chunk_layer(self, tmp_path):
        meta = make_meta(num_experts=4, top_k=2, layers=(0, 1), languages=("en", "he"),
                         capture_mode=CHUNK_AGGREGATE)
        chunks = [
            make_chunk(meta, [2, 2, 0, 0], chunk_id=1, layer=1, language="he"),
            make_chunk(meta, [2, 2, 0, 0], chunk_id=0, layer=0, language="he"),
            make_chunk(meta, [2, 2, 0, 0], chunk_id=0, layer=1, language="en"),
        ]
        path = tmp_path / "c.json"
        write_chunk_trace(path, meta, chunks)
        _, got = read_trace(path)
        keys = [(c.language, c.chunk_id, c.layer) for c in got]
        assert keys == sorted(keys)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"not_meta": 1}\n{"x": 2}\n')
        with pytest.raises(TraceFormatError, match="malformed header"):
            read_trace(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(TraceFormatError, match="empty file"):
            read_trace(path)

    def test_truncated_token_file_reports_byte_offset(self, tmp_path):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",))
        rec = make_token(meta, np.array([0.4, 0.3, 0.2, 0.1]))
        path = tmp_path / "t.jsonl"
        write_token_trace(path, meta, [rec, rec])
        data = path.read_bytes()
        cut = len(data) - 25
        path.write_bytes(data[:cut])
        _, records = read_trace(path)
        with pytest.raises(TraceFormatError, match=rf"unexpected end of stream at byte {cut}"):
            list(records)

    def test_truncated_chunk_document(self, tmp_path):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",),
                         capture_mode=CHUNK_AGGREGATE)
        path = tmp_path / "c.json"
        write_chunk_trace(path, meta, [make_chunk(meta, [2, 2, 0, 0])])
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 10])
        with pytest.raises(TraceFormatError, match="unexpected end of stream at byte"):
            read_trace(path)

    def test_duplicate_chunk_rows_rejected(self, tmp_path):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",),
                         capture_mode=CHUNK_AGGREGATE)
        row = make_chunk(meta, [2, 2, 0, 0]).to_dict()
        doc = {"meta": meta.to_dict(), "chunks": [row, row]}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        _, rows = read_trace(path)
        with pytest.raises(TraceValidationError, match="duplicate chunk row"):
            list(rows)

    def test_quantized_write_stays_valid(self, tmp_path, rng):
        meta = make_meta(num_experts=128, top_k=8, layers=(0,), languages=("en",))
        records = [make_token(meta, rng.dirichlet(np.ones(128)), token_index=i)
                   for i in range(50)]
        path = tmp_path / "q.jsonl"
        write_token_trace(path, meta, records, sig_digits=4)
        _, got = read_trace(path)
        got = list(got)
        assert len(got) == 50
        for rec in got:
            for p in rec.full_probs:
                assert p == float(f"{p:.4g}")

    def test_quantize_probs_monotone(self, rng):
        p = np.sort(rng.random(1000))
        q = quantize_probs(p, 4)
        assert np.all(np.diff(q) >= 0)


class TestChunkValidation:
    def test_selection_conservation(self):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",),
                         capture_mode=CHUNK_AGGREGATE)
        with pytest.raises(TraceValidationError, match="sum\\(selection_counts\\)"):
            ChunkAggregate(0, "en", 0, 2, (1, 1, 1, 0), (0.5, 0.5, 0.5, 0.5)).validate(meta)

    def test_count_exceeds_tokens(self):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",),
                         capture_mode=CHUNK_AGGREGATE)
        with pytest.raises(TraceValidationError, match="exceeds content_token_count"):
            ChunkAggregate(0, "en", 0, 2, (3, 1, 0, 0), (1.0, 1.0, 0.0, 0.0)).validate(meta)

    def test_prob_mass_relative_tolerance(self):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",),
                         capture_mode=CHUNK_AGGREGATE)
        ChunkAggregate(0, "en", 0, 100, (50, 50, 50, 50),
                       (25.0, 25.0, 25.0, 25.05)).validate(meta)  # 100.05/100 within 1e-3
        with pytest.raises(TraceValidationError, match="probability mass out of tolerance"):
            ChunkAggregate(0, "en", 0, 100, (50, 50, 50, 50),
                           (25.0, 25.0, 25.0, 26.0)).validate(meta)

    def test_topk_basis_allows_partial_mass(self):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",),
                         capture_mode=CHUNK_AGGREGATE, prob_basis="topk_only")
        ChunkAggregate(0, "en", 0, 100, (50, 50, 50, 50),
                       (15.0, 15.0, 15.0, 15.0)).validate(meta)

    def test_empty_chunk_needs_zero_mass(self):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",),
                         capture_mode=CHUNK_AGGREGATE)
        ChunkAggregate(0, "en", 0, 0, (0, 0, 0, 0), (0.0, 0.0, 0.0, 0.0)).validate(meta)


class TestAggregateTokens:
    def test_hand_counted_selection(self):
        # 2 content tokens, K=2: token A selects {0,1}, token B selects {1,2}
        meta = make_meta(num_experts=6, top_k=2, layers=(0,), languages=("en",))
        rec_a = make_token(meta, [0.4, 0.35, 0.1, 0.05, 0.05, 0.05], token_index=0)
        rec_b = make_token(meta, [0.1, 0.4, 0.35, 0.05, 0.05, 0.05], token_index=1)
        assert rec_a.topk_experts == (0, 1) and rec_b.topk_experts == (1, 2)
        chunks = aggregate_tokens([rec_a, rec_b], meta)
        assert len(chunks) == 1
        assert chunks[0].selection_counts == (1, 2, 1, 0, 0, 0)
        assert chunks[0].content_token_count == 2

    def test_non_content_excluded(self):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",))
        content = make_token(meta, [0.4, 0.3, 0.2, 0.1], token_index=0)
        special = make_token(meta, [0.4, 0.3, 0.2, 0.1], token_index=1, is_content=False)
        chunks = aggregate_tokens([content, special], meta)
        assert chunks[0].content_token_count == 1

    def test_uniform_full_probs_sum(self):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",))
        rec = make_token(meta, np.full(4, 0.25))
        chunks = aggregate_tokens([rec], meta)
        assert chunks[0].prob_sums == (0.25, 0.25, 0.25, 0.25)

    def test_topk_only_prob_sums_are_lossy(self):
        meta = make_meta(num_experts=4, top_k=2, layers=(0,), languages=("en",),
                         capture_mode=TOKEN_TOPK_ONLY, prob_basis="topk_only")
        rec = TokenRouting(0, 0, 0, "en", True, (0, 1), (0.4, 0.3))
        chunks = aggregate_tokens([rec], meta)
        assert chunks[0].prob_sums == (0.4, 0.3, 0.0, 0.0)


class TestConversion:
    def _synthetic_token_trace(self, tmp_path, rng, chunks=10):
        meta = make_meta(num_experts=8, top_k=3, layers=(0, 4), languages=("en", "he"))
        records = []
        for language in meta.languages:
            for chunk in range(chunks):
                n_tokens = int(rng.integers(3, 9))
                for layer in meta.moe_layers:
                    for tok in range(n_tokens):
                        records.append(make_token(
                            meta, rng.dirichlet(np.ones(8)), chunk_id=chunk,
                            token_index=tok, layer=layer, language=language))
        path = tmp_path / "tok.jsonl"
        write_token_trace(path, meta, records)
        return meta, records, path

    def test_empty_trace_converts_to_empty_aggregate(self, tmp_path):
        meta = make_meta()
        src = tmp_path / "empty.jsonl"
        write_token_trace(src, meta, [])
        out = tmp_path / "agg.json"
        summary = convert_to_aggregate_file(src, out)
        assert summary["chunks"] == 0 and summary["tokens"] == 0
        got_meta, rows = read_trace(out)
        assert got_meta.capture_mode == CHUNK_AGGREGATE
        assert list(rows) == []

    def test_counts_match_independent_recount(self, tmp_path, rng):
        meta, records, path = self._synthetic_token_trace(tmp_path, rng)
        out = tmp_path / "agg.json"
        convert_to_aggregate_file(path, out)
        # Independent recount: plain dict tallies straight off the records.
        recount = {}
        for rec in records:
            if not rec.is_content:
                continue
            key = (rec.language, rec.chunk_id, rec.layer)
            cell = recount.setdefault(key, [0] * meta.num_experts)
            for e in rec.topk_experts:
                cell[e] += 1
        _, rows = read_trace(out)
        for row in rows:
            key = (row.language, row.chunk_id, row.layer)
            assert list(row.selection_counts) == recount.pop(key)
        assert not recount

    def test_languages_never_merged(self, tmp_path, rng):
        meta, records, path = self._synthetic_token_trace(tmp_path, rng, chunks=3)
        out = tmp_path / "agg.json"
        convert_to_aggregate_file(path, out)
        _, rows = read_trace(out)
        for row in rows:
            assert row.language in ("en", "he")
        # same chunk_id appears separately per language
        _, rows = read_trace(out)
        keys = {(r.language, r.chunk_id, r.layer) for r in rows}
        assert ("en", 0, 0) in keys and ("he", 0, 0) in keys

    def test_profiles_identical_token_vs_converted(self, tmp_path, rng):
        meta, records, path = self._synthetic_token_trace(tmp_path, rng)
        out = tmp_path / "agg.json"
        convert_to_aggregate_file(path, out)
        direct = build_profiles(aggregate_tokens(iter(records), meta),
                                meta.num_experts, meta.top_k)
        _, rows = read_trace(out)
        converted = build_profiles(list(rows), meta.num_experts, meta.top_k)
        assert direct.keys() == converted.keys()
        for key in direct:
            a, b = direct[key], converted[key]
            assert np.array_equal(a.counts, b.counts)
            assert a.token_count == b.token_count
            np.testing.assert_allclose(a.mean_prob, b.mean_prob, rtol=1e-9)
            np.testing.assert_allclose(a.activation_rate, b.activation_rate, rtol=1e-9)

    def test_conservation_per_layer_language(self, tmp_path, rng):
        meta, records, path = self._synthetic_token_trace(tmp_path, rng)
        chunks = aggregate_tokens(iter(records), meta)
        totals = {}
        for c in chunks:
            key = (c.layer, c.language)
            sums = totals.setdefault(key, [0, 0])
            sums[0] += sum(c.selection_counts)
            sums[1] += c.content_token_count
        for (layer, language), (selected, tokens) in totals.items():
            assert selected == meta.top_k * tokens
