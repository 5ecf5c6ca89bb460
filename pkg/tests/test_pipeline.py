"""Closed-form parameter counts against brute-force enumeration, stats
and size conventions, spec validation, pipeline runs, and bit-exact
container round-trips."""

import json
import math

import numpy as np
import pytest

from rnnpack import cells, langmodel, lowrank, pipeline, sparse, tensortrain
from rnnpack.errors import (
    FormatError,
    IntegrityError,
    ParameterError,
)


@pytest.fixture(scope="module")
def small_corpus():
    full = langmodel.load_fixture()
    splits = {
        "train": full.lines("train")[:80],
        "valid": full.lines("valid")[:25],
        "test": full.lines("test")[:25],
    }
    return langmodel.Corpus(full.vocab, splits)


def tiny_train_config(**overrides):
    base = dict(
        stage1_lr=2e-3,
        stage1_epochs=1,
        stage2_lr=0.1,
        stage2_epochs=1,
        batch_size=2,
        unroll=16,
        patience=1,
        seed=5,
    )
    base.update(overrides)
    return langmodel.TrainConfig(**base)


def step(op, params=None, finetune=None):
    return pipeline.CompressionStep(op, dict(params or {}), finetune)


def spec_of(*steps):
    return pipeline.CompressionSpec(list(steps))


def assert_same_arrays(model_a, model_b):
    arrays_a, arrays_b = model_a.param_arrays(), model_b.param_arrays()
    assert sorted(arrays_a) == sorted(arrays_b)
    for name in arrays_a:
        np.testing.assert_array_equal(arrays_a[name], arrays_b[name])


def probs_of(model, ids):
    probs, _, _ = cells.forward_sequence(model, ids, want_cache=False)
    return probs


class TestParamCounts:
    def test_reference_scale_examples(self):
        assert pipeline.param_count_dense("lstm", 2, 650, 10_000) == 19_760_000
        assert pipeline.param_count_dense("lstm", 2, 1500, 10_000) == 66_000_000
        assert pipeline.param_count_dense("gru", 2, 650, 10_000) == 18_070_000
        assert abs(19_760_000 - 19.7e6) / 19.7e6 <= 0.005

    def test_parts_breakdown(self):
        parts = pipeline.param_count_parts("lstm", 2, 650, 10_000)
        assert parts["cells"] == 6_760_000
        assert parts["embedding"] == 6_500_000
        assert parts["output"] == 6_500_000
        assert sum(parts.values()) == pipeline.param_count_dense(
            "lstm", 2, 650, 10_000
        )

    def test_rnn_reports_the_formula_value(self):
        # 2Lk^2 + 2|V|k; the artifact reports this figure for every RNN
        assert pipeline.param_count_dense("rnn", 2, 650, 10_000) == 14_690_000

    @pytest.mark.parametrize("kind", ["rnn", "lstm", "gru"])
    @pytest.mark.parametrize("dims", [(1, 3, 7), (2, 4, 11), (3, 5, 9)])
    def test_formula_matches_enumerated_matrices(self, kind, dims):
        num_layers, k, vocab = dims
        model = cells.new_model(kind, vocab, k, num_layers, seed=1)
        counted = sum(
            arr.size for arr in model.param_arrays().values() if arr.ndim == 2
        )
        assert counted == pipeline.param_count_dense(kind, num_layers, k, vocab)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ParameterError):
            pipeline.param_count_dense("cnn", 2, 8, 10)
        with pytest.raises(ParameterError):
            pipeline.param_count_dense("lstm", 0, 8, 10)
        with pytest.raises(ParameterError):
            pipeline.param_count_dense("lstm", 2, 8.5, 10)
        with pytest.raises(ParameterError):
            pipeline.param_count_dense("lstm", 2, 8, True)


class TestModelStats:
    def test_dense_lstm_accounting(self):
        model = cells.new_model("lstm", 50, 8, 2, seed=0)
        stats = pipeline.model_stats(model)
        total = pipeline.param_count_dense("lstm", 2, 8, 50)
        assert stats.total_params == total
        assert stats.components == {
            "embedding": 400,
            "layers.0": 512,
            "layers.1": 512,
            "output": 400,
        }
        assert stats.total_params == sum(stats.components.values())
        assert stats.bias_params == 2 * 4 * 8 + 50
        assert stats.size_bytes == (total + stats.bias_params) * 4
        assert stats.macs_per_step == 2 * 512 + 400
        assert stats.size_mb == stats.size_bytes / 1e6

    def test_dense_650_table_arithmetic(self):
        model = cells.new_model("lstm", 10_000, 650, 2, seed=0)
        stats = pipeline.model_stats(model)
        assert stats.total_params == 19_760_000
        assert stats.bias_params == 15_200
        assert stats.size_bytes == 79_100_800
        assert round(stats.size_mb, 1) == 79.1

    def test_low_rank_650_table_arithmetic(self):
        dense = cells.new_model("lstm", 10_000, 650, 2, seed=0)
        lr = lowrank.compress_model_lr(dense, 128, r_io=128, init="random")
        stats = pipeline.model_stats(lr)
        assert stats.total_params == 4_057_600
        assert stats.size_bytes == (4_057_600 + 15_200) * 4
        assert abs(stats.size_bytes - 16.8e6) / 16.8e6 < 0.05

    def test_pruned_size_counts_kept_floats_and_bitmaps(self):
        model = cells.new_model("rnn", 12, 5, 1, seed=3)
        mask = sparse.prune(model, 0.4)
        stats = pipeline.model_stats(model, mask=mask)
        expect = 0
        for name, arr in model.param_arrays().items():
            if name in mask.masks:
                kept = int(mask.masks[name].sum())
                expect += kept * 4 + (arr.size + 7) // 8
            else:
                expect += arr.size * 4
        assert stats.size_bytes == expect
        plain = pipeline.model_stats(model)
        assert stats.total_params == plain.total_params
        assert stats.size_bytes < plain.size_bytes

    def test_quantized_entries_price_one_byte(self):
        model = cells.new_model("rnn", 12, 5, 1, seed=3)
        quantized = sparse.quantize_arrays(model)
        stats = pipeline.model_stats(model, quantized=quantized)
        matrices = [a for a in model.param_arrays().values() if a.ndim == 2]
        biases = [a for a in model.param_arrays().values() if a.ndim == 1]
        assert stats.size_bytes == (
            sum(a.size + 8 for a in matrices) + sum(a.size * 4 for a in biases)
        )

    def test_quantized_wins_over_mask_in_sizing(self):
        model = cells.new_model("rnn", 12, 5, 1, seed=3)
        mask = sparse.prune(model, {"out": 0.5})
        quantized = sparse.quantize_arrays(model, components=["out.w"])
        stats = pipeline.model_stats(model, mask=mask, quantized=quantized)
        out_w = model.output.w
        others = sum(
            a.size * 4
            for n, a in model.param_arrays().items()
            if n != "out.w"
        )
        assert stats.size_bytes == out_w.size + 8 + others

    @pytest.mark.parametrize("kind", ["rnn", "lstm", "gru"])
    def test_dense_stats_matches_a_built_model(self, kind):
        model = cells.new_model(kind, 23, 6, 3, seed=31)
        assert pipeline.dense_stats(kind, 3, 6, 23) == pipeline.model_stats(model)

    def test_dense_stats_reference_scale(self):
        stats = pipeline.dense_stats("lstm", 2, 650, 10000)
        assert stats.total_params == 19_760_000
        assert stats.bias_params == 15_200
        assert stats.size_bytes == 79_100_800
        assert stats.macs_per_step == 13_260_000

    def test_dense_stats_rejects_unknown_kind(self):
        with pytest.raises(ParameterError):
            pipeline.dense_stats("mlp", 2, 8, 50)


class TestSpecValidation:
    def test_unknown_step_and_unknown_key(self):
        with pytest.raises(ParameterError):
            spec_of(step("shrink", {"r": 2}))
        with pytest.raises(ParameterError):
            spec_of(step("lr_cells", {"r": 2, "rank": 3}))

    def test_rank_required_and_integral(self):
        with pytest.raises(ParameterError):
            spec_of(step("lr_cells"))
        with pytest.raises(ParameterError):
            spec_of(step("lr_cells", {"r": 0}))
        with pytest.raises(ParameterError):
            spec_of(step("lr_cells", {"r": 2.5}))
        with pytest.raises(ParameterError):
            spec_of(step("lr_cells", {"r": 2, "init": "xavier"}))

    def test_lr_io_needs_adjacent_lr_cells(self):
        with pytest.raises(ParameterError):
            spec_of(step("lr_io", {"r": 2}))
        with pytest.raises(ParameterError):
            spec_of(
                step("lr_io", {"r": 2}),
                step("lr_cells", {"r": 2}),
            )
        spec_of(step("lr_cells", {"r": 2}), step("lr_io", {"r": 2}))

    def test_merged_pair_finetunes_through_lr_io(self):
        config = tiny_train_config()
        with pytest.raises(ParameterError):
            spec_of(
                step("lr_cells", {"r": 2}, finetune=config),
                step("lr_io", {"r": 2}),
            )
        spec_of(
            step("lr_cells", {"r": 2}),
            step("lr_io", {"r": 2}, finetune=config),
        )

    def test_one_factorization_family_per_component(self):
        with pytest.raises(ParameterError):
            spec_of(step("lr_cells", {"r": 2}), step("tt_cells"))
        with pytest.raises(ParameterError):
            spec_of(
                step("lr_cells", {"r": 2}),
                step("lr_io", {"r": 2}),
                step("tt_output"),
            )

    def test_factorizations_precede_prune_and_quantize(self):
        with pytest.raises(ParameterError):
            spec_of(step("prune", {"sparsity": 0.5}), step("tt_cells"))
        with pytest.raises(ParameterError):
            spec_of(step("quantize"), step("lr_cells", {"r": 2}))

    def test_quantize_is_final_and_untuned(self):
        with pytest.raises(ParameterError):
            spec_of(step("quantize"), step("prune", {"sparsity": 0.5}))
        with pytest.raises(ParameterError):
            spec_of(step("quantize", finetune=tiny_train_config()))

    def test_output_factorized_after_cells(self):
        with pytest.raises(ParameterError):
            spec_of(step("tt_output"), step("lr_cells", {"r": 2}))
        spec_of(step("lr_cells", {"r": 2}), step("tt_output"))

    def test_prune_targets_validated(self):
        with pytest.raises(ParameterError):
            spec_of(step("prune"))
        with pytest.raises(ParameterError):
            spec_of(step("prune", {"sparsity": 1.0}))
        with pytest.raises(ParameterError):
            spec_of(step("prune", {"sparsity": {}}))
        with pytest.raises(ParameterError):
            spec_of(step("prune", {"sparsity": {"out": -0.1}}))

    def test_quantize_components_validated(self):
        with pytest.raises(ParameterError):
            spec_of(step("quantize", {"components": []}))
        with pytest.raises(ParameterError):
            spec_of(step("quantize", {"components": [1, 2]}))
        one = spec_of(step("quantize", {"components": "out"}))
        assert one.steps[0].params["components"] == ["out"]
        every = spec_of(step("quantize", {"components": "all"}))
        assert every.steps[0].params["components"] is None

    def test_step_and_finetune_types_enforced(self):
        with pytest.raises(ParameterError):
            pipeline.CompressionSpec([{"op": "prune"}])
        with pytest.raises(ParameterError):
            spec_of(step("prune", {"sparsity": 0.5}, finetune={"seed": 1}))


class TestSpecParsing:
    def test_parse_list_and_wrapper_forms(self):
        data = [
            {"op": "lr_cells", "r": 3, "init": "random", "seed": 7},
            {"op": "lr_io", "r": 2},
            {"op": "prune", "sparsity": 0.5,
             "finetune": {"stage1_epochs": 1, "stage2_epochs": 1}},
            {"op": "quantize", "components": "all"},
        ]
        for payload in (data, {"steps": data}):
            spec = pipeline.parse_spec(json.loads(json.dumps(payload)))
            assert [s.op for s in spec.steps] == [
                "lr_cells", "lr_io", "prune", "quantize",
            ]
            assert spec.steps[0].params["seed"] == 7
            assert isinstance(spec.steps[2].finetune, langmodel.TrainConfig)
            assert spec.steps[2].finetune.stage1_epochs == 1

    def test_parse_rejects_malformed_documents(self):
        with pytest.raises(FormatError):
            pipeline.parse_spec({"nope": []})
        with pytest.raises(FormatError):
            pipeline.parse_spec([["prune"]])
        with pytest.raises(FormatError):
            pipeline.parse_spec([{"sparsity": 0.5}])
        with pytest.raises(FormatError):
            pipeline.parse_spec([{"op": "prune", "sparsity": 0.5,
                                  "finetune": "fast"}])
        with pytest.raises(ParameterError):
            pipeline.parse_spec([{"op": "prune", "sparsity": 0.5,
                                  "finetune": {"warmup": 3}}])

    def test_load_spec_file(self, tmp_path):
        path = tmp_path / "plan.json"
        path.write_text(json.dumps([{"op": "prune", "sparsity": 0.25}]))
        spec = pipeline.load_spec(path)
        assert spec.steps[0].params["sparsity"] == 0.25
        bad = tmp_path / "broken.json"
        bad.write_text("{not json")
        with pytest.raises(FormatError):
            pipeline.load_spec(bad)


class TestRunPipeline:
    def test_empty_spec_is_identity(self):
        model = cells.new_model("lstm", 20, 6, 2, seed=4)
        result = pipeline.run_pipeline(model, spec_of())
        assert result.steps == []
        assert result.before == result.after
        assert result.stored.mask is None and result.stored.quantized is None
        assert result.stored.model is not model
        assert_same_arrays(result.stored.model, model)

    def test_input_model_never_mutated(self):
        model = cells.new_model("lstm", 20, 6, 1, seed=4)
        saved = {n: a.copy() for n, a in model.param_arrays().items()}
        pipeline.run_pipeline(model, spec_of(step("prune", {"sparsity": 0.7})))
        for name, arr in model.param_arrays().items():
            np.testing.assert_array_equal(arr, saved[name])

    def test_lr_pair_merges_into_one_step(self):
        model = cells.new_model("lstm", 30, 10, 2, seed=6)
        result = pipeline.run_pipeline(
            model,
            spec_of(step("lr_cells", {"r": 4}), step("lr_io", {"r": 3})),
        )
        assert [s.name for s in result.steps] == ["lr_cells+lr_io"]
        compressed = result.stored.model
        assert compressed.embedding.shape == (30, 3)
        assert compressed.layers[0].proj.w.shape == (4, 10)
        assert compressed.layers[1].proj.w.shape == (3, 10)
        assert compressed.output.w.shape == (30, 3)
        assert result.after.size_bytes < result.before.size_bytes

    def test_tt_steps_replace_operators(self):
        model = cells.new_model("lstm", 16, 6, 1, seed=2)
        result = pipeline.run_pipeline(
            model,
            spec_of(
                step("tt_cells", {"d": 2, "max_ranks": 2}),
                step("tt_output", {"d": 2, "max_ranks": 2}),
            ),
        )
        compressed = result.stored.model
        for op in compressed.layers[0].ops.values():
            assert isinstance(op, tensortrain.TtLinear)
        assert isinstance(compressed.output.op, tensortrain.TtLinear)
        assert [s.name for s in result.steps] == ["tt_cells", "tt_output"]
        probs = probs_of(compressed, np.arange(5) % 16)
        assert np.isfinite(probs).all()
        assert result.after.size_bytes < result.before.size_bytes

    def test_prune_steps_merge_masks(self):
        model = cells.new_model("lstm", 20, 6, 1, seed=8)
        result = pipeline.run_pipeline(
            model,
            spec_of(
                step("prune", {"sparsity": 0.5}),
                step("prune", {"sparsity": {"out": 0.9}}),
            ),
        )
        mask = result.stored.mask
        out_w = result.stored.model.output.w
        assert np.count_nonzero(out_w == 0.0) == round(0.9 * out_w.size)
        emb = result.stored.model.embedding
        assert np.count_nonzero(emb == 0.0) == round(0.5 * emb.size)
        np.testing.assert_array_equal(out_w == 0.0, ~mask.masks["out.w"])

    def test_quantize_freezes_codes_and_keeps_mask_zeros(self):
        model = cells.new_model("lstm", 20, 6, 1, seed=9)
        result = pipeline.run_pipeline(
            model,
            spec_of(step("prune", {"sparsity": 0.5}), step("quantize")),
        )
        stored = result.stored
        arrays = stored.model.param_arrays()
        assert set(stored.quantized) == {
            n for n, a in arrays.items() if a.ndim == 2
        }
        for name, q in stored.quantized.items():
            keep = stored.mask.masks[name]
            expect = sparse.dequantize(q)
            expect[~keep] = 0.0
            np.testing.assert_array_equal(arrays[name], expect)
            # dequantized codes alone sit mid-interval, away from zero
            assert np.count_nonzero(sparse.dequantize(q)[~keep]) > 0

    def test_finetune_runs_and_respects_mask(self, small_corpus):
        model = cells.new_model(
            "lstm", len(small_corpus.vocab), 8, 1, seed=3
        )
        result = pipeline.run_pipeline(
            model,
            spec_of(
                step("prune", {"sparsity": 0.6},
                     finetune=tiny_train_config()),
            ),
            corpus=small_corpus,
        )
        report = result.steps[0]
        assert isinstance(report.finetune, langmodel.TrainResult)
        assert len(report.finetune.history) >= 2
        mask = result.stored.mask
        for name, keep in mask.masks.items():
            arr = result.stored.model.param_arrays()[name]
            assert not arr[~keep].any()

    def test_finetune_without_corpus_rejected(self):
        model = cells.new_model("rnn", 10, 4, 1, seed=0)
        spec = spec_of(
            step("prune", {"sparsity": 0.5}, finetune=tiny_train_config())
        )
        with pytest.raises(ParameterError):
            pipeline.run_pipeline(model, spec)

    def test_deterministic_given_seeds(self, small_corpus):
        model = cells.new_model(
            "lstm", len(small_corpus.vocab), 8, 1, seed=12
        )
        spec = lambda: spec_of(
            step("lr_cells", {"r": 3, "init": "random", "seed": 21}),
            step("lr_io", {"r": 3, }, finetune=tiny_train_config()),
            step("prune", {"sparsity": 0.4}),
        )
        first = pipeline.run_pipeline(model, spec(), corpus=small_corpus)
        second = pipeline.run_pipeline(model, spec(), corpus=small_corpus)
        assert_same_arrays(first.stored.model, second.stored.model)
        assert first.after == second.after

    def test_each_step_shrinks_reported_size(self):
        model = cells.new_model("lstm", 24, 8, 2, seed=2)
        result = pipeline.run_pipeline(
            model,
            spec_of(
                step("lr_cells", {"r": 3, "init": "random"}),
                step("lr_io", {"r": 3}),
                step("prune", {"sparsity": 0.4}),
                step("quantize"),
            ),
        )
        sizes = [result.before.size_bytes]
        sizes += [s.stats.size_bytes for s in result.steps]
        assert all(late < early for early, late in zip(sizes, sizes[1:]))

    def test_quantize_all_size_example(self):
        model = cells.new_model("lstm", 10_000, 200, 2, seed=1)
        result = pipeline.run_pipeline(model, spec_of(step("quantize")))
        stats = result.after
        assert stats.size_bytes == 4_640_000 + 18 * 8 + 11_600 * 4
        assert abs(stats.size_bytes - 4.7e6) / 4.7e6 < 0.03
        assert stats.total_params == result.before.total_params

    def test_step_error_carries_partial_report(self):
        model = cells.new_model("lstm", 20, 6, 1, seed=7)
        spec = spec_of(
            step("prune", {"sparsity": 0.3}),
            step("prune", {"sparsity": {"decoder": 0.5}}),
        )
        with pytest.raises(ParameterError) as excinfo:
            pipeline.run_pipeline(model, spec)
        partial = excinfo.value.partial_report
        assert [s.name for s in partial.steps] == ["prune"]
        assert partial.before.total_params == partial.after.total_params
        assert partial.stored.mask is not None

    def test_quantized_input_rejected_for_more_steps(self):
        model = cells.new_model("rnn", 10, 4, 1, seed=1)
        done = pipeline.run_pipeline(model, spec_of(step("quantize")))
        with pytest.raises(ParameterError):
            pipeline.run_pipeline(
                done.stored, spec_of(step("prune", {"sparsity": 0.5}))
            )
        again = pipeline.run_pipeline(done.stored, spec_of())
        assert again.before == done.after

    def test_format_report_lines(self):
        model = cells.new_model("lstm", 20, 6, 1, seed=7)
        result = pipeline.run_pipeline(
            model, spec_of(step("prune", {"sparsity": 0.5}))
        )
        text = pipeline.format_report(result)
        assert "before" in text
        assert "1. prune" in text
        assert "compression ratio" in text


class TestContainer:
    def roundtrip(self, tmp_path, stored):
        first = tmp_path / "first.model"
        second = tmp_path / "second.model"
        pipeline.save_model(stored, first)
        loaded = pipeline.load_model(first)
        pipeline.save_model(loaded, second)
        assert first.read_bytes() == second.read_bytes()
        return loaded

    @pytest.mark.parametrize("kind", ["rnn", "lstm", "gru"])
    def test_dense_round_trip(self, tmp_path, kind):
        model = cells.new_model(kind, 17, 5, 2, seed=3)
        loaded = self.roundtrip(tmp_path, model)
        assert loaded.mask is None and loaded.quantized is None
        assert loaded.model.kind == kind
        assert_same_arrays(loaded.model, model)
        ids = np.arange(6) % 17
        np.testing.assert_array_equal(
            probs_of(loaded.model, ids), probs_of(model, ids)
        )

    def test_gru_blend_flag_round_trips(self, tmp_path):
        model = cells.new_model("gru", 11, 4, 1, seed=5, gru_blend_input=True)
        loaded = self.roundtrip(tmp_path, model)
        assert loaded.model.layers[0].blend_input is True

    def test_low_rank_round_trip_keeps_shared_projection(self, tmp_path):
        dense = cells.new_model("lstm", 19, 8, 2, seed=8)
        lr = lowrank.compress_model_lr(dense, 3, r_io=2, init="random")
        loaded = self.roundtrip(tmp_path, lr)
        assert_same_arrays(loaded.model, lr)
        for original, rebuilt in zip(lr.layers, loaded.model.layers):
            assert rebuilt.proj is not None
            assert rebuilt.proj.w.shape == original.proj.w.shape
            # one stored projection per layer, shared by every gate
            names = list(rebuilt.param_arrays())
            assert names.count("proj") == 1
            for name, op in rebuilt.ops.items():
                if name.startswith("u"):
                    assert op.in_dim == rebuilt.proj.out_dim
        ids = np.arange(7) % 19
        np.testing.assert_array_equal(
            probs_of(loaded.model, ids), probs_of(lr, ids)
        )

    def test_lr_gru_round_trip(self, tmp_path):
        dense = cells.new_model("gru", 15, 8, 2, seed=2)
        lr = lowrank.compress_model_lr(dense, 3, init="random")
        loaded = self.roundtrip(tmp_path, lr)
        assert all(
            isinstance(layer, lowrank.LrGruLayer)
            for layer in loaded.model.layers
        )
        assert_same_arrays(loaded.model, lr)

    def test_tt_round_trip(self, tmp_path):
        model = cells.new_model("lstm", 16, 6, 1, seed=4)
        result = pipeline.run_pipeline(
            model,
            spec_of(
                step("tt_cells", {"d": 2, "max_ranks": 2}),
                step("tt_output", {"d": 2, "max_ranks": 2}),
            ),
        )
        loaded = self.roundtrip(tmp_path, result.stored)
        rebuilt = loaded.model
        assert isinstance(rebuilt.output.op, tensortrain.TtLinear)
        source = result.stored.model
        assert rebuilt.output.op.tt.row_modes == source.output.op.tt.row_modes
        assert_same_arrays(rebuilt, source)

    def test_mask_and_codes_round_trip(self, tmp_path):
        model = cells.new_model("lstm", 20, 6, 1, seed=9)
        result = pipeline.run_pipeline(
            model,
            spec_of(step("prune", {"sparsity": 0.5}), step("quantize")),
        )
        loaded = self.roundtrip(tmp_path, result.stored)
        stored = result.stored
        assert sorted(loaded.mask.masks) == sorted(stored.mask.masks)
        for name in stored.mask.masks:
            np.testing.assert_array_equal(
                loaded.mask.masks[name], stored.mask.masks[name]
            )
        assert sorted(loaded.quantized) == sorted(stored.quantized)
        for name in stored.quantized:
            np.testing.assert_array_equal(
                loaded.quantized[name].codes, stored.quantized[name].codes
            )
            assert loaded.quantized[name].min_val == stored.quantized[name].min_val
            assert loaded.quantized[name].max_val == stored.quantized[name].max_val
        assert_same_arrays(loaded.model, stored.model)

    def test_stats_survive_round_trip(self, tmp_path):
        model = cells.new_model("lstm", 20, 6, 1, seed=9)
        result = pipeline.run_pipeline(
            model,
            spec_of(step("prune", {"sparsity": 0.5}), step("quantize")),
        )
        loaded = self.roundtrip(tmp_path, result.stored)
        assert loaded.stats() == result.after

    def test_corrupted_blob_rejected(self, tmp_path):
        model = cells.new_model("lstm", 14, 5, 1, seed=6)
        path = tmp_path / "model.bin"
        pipeline.save_model(model, path)
        data = bytearray(path.read_bytes())
        data[-5] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(IntegrityError):
            pipeline.load_model(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = cells.new_model("lstm", 14, 5, 1, seed=6)
        path = tmp_path / "model.bin"
        pipeline.save_model(model, path)
        data = path.read_bytes()
        for cut in (len(data) - 7, 25, 15):
            clipped = tmp_path / "clipped.bin"
            clipped.write_bytes(data[:cut])
            with pytest.raises(IntegrityError):
                pipeline.load_model(clipped)

    def test_bad_magic_version_and_trailing_data(self, tmp_path):
        model = cells.new_model("lstm", 14, 5, 1, seed=6)
        path = tmp_path / "model.bin"
        pipeline.save_model(model, path)
        data = path.read_bytes()

        wrong_magic = tmp_path / "magic.bin"
        wrong_magic.write_bytes(b"X" + data[1:])
        with pytest.raises(FormatError):
            pipeline.load_model(wrong_magic)

        wrong_version = tmp_path / "version.bin"
        patched = bytearray(data)
        patched[8] = 99
        wrong_version.write_bytes(bytes(patched))
        with pytest.raises(FormatError):
            pipeline.load_model(wrong_version)

        trailing = tmp_path / "trailing.bin"
        trailing.write_bytes(data + b"xx")
        with pytest.raises(FormatError):
            pipeline.load_model(trailing)

    def test_corrupted_header_rejected(self, tmp_path):
        model = cells.new_model("lstm", 14, 5, 1, seed=6)
        path = tmp_path / "model.bin"
        pipeline.save_model(model, path)
        data = bytearray(path.read_bytes())
        assert data[20:21] == b"{"
        data[20] = ord("[")
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            pipeline.load_model(path)

    def test_no_partial_model_on_corruption(self, tmp_path):
        model = cells.new_model("lstm", 14, 5, 1, seed=6)
        path = tmp_path / "model.bin"
        pipeline.save_model(model, path)
        data = bytearray(path.read_bytes())
        data[-1] ^= 0x01
        path.write_bytes(bytes(data))
        try:
            pipeline.load_model(path)
        except IntegrityError as err:
            assert not hasattr(err, "partial_report")
        else:  # pragma: no cover
            pytest.fail("corrupted container was accepted")
