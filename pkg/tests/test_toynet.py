import json

import numpy as np
import pytest

from obmerge.errors import ShapeMismatch, ValidationError
from obmerge.mergers import MergePolicy, merge_obm, trim_magnitude, trim_saliency
from obmerge.saliency import ActivationStats, accumulate_stats, score
from obmerge.task_vectors import apply, compute_delta
from obmerge.tensor_store import Checkpoint, Tensor
from obmerge.toynet import (
    CalibrationSet,
    Embedding,
    Linear,
    PlantPlan,
    PlantedColumn,
    Relu,
    ToyModel,
    fit_last_layer,
    layer_loss_change,
    load_calibration,
    load_model,
    plant_experts,
    planted_stats,
    random_token_set,
    random_vector_set,
    save_calibration,
    save_model,
    task_loss,
    whitened_inputs,
)

from helpers import make_delta


def small_model(seed=0):
    return ToyModel.build(
        [Linear(4, 6, frozen=True), Relu(), Linear(6, 3)], seed=seed
    )


class TestForward:
    def test_identity_linear_is_identity(self):
        params = Checkpoint(
            [
                Tensor("layers.0.weight", np.eye(4, dtype=np.float32)),
                Tensor("layers.0.bias", np.zeros(4, np.float32)),
            ]
        )
        model = ToyModel([Linear(4, 4)], params)
        x = np.arange(8, dtype=np.float32).reshape(2, 4)
        assert np.array_equal(model.forward(x), x)

    def test_relu_clamps_negatives(self):
        params = Checkpoint(
            [
                Tensor("layers.0.weight", np.eye(2, dtype=np.float32)),
                Tensor("layers.0.bias", np.zeros(2, np.float32)),
            ]
        )
        model = ToyModel([Linear(2, 2), Relu()], params)
        out = model.forward(np.array([[-1.0, 2.0]], np.float32))
        assert np.array_equal(out, np.array([[0.0, 2.0]], np.float32))

    def test_two_layer_against_scalar_matmul(self, rng):
        model = small_model()
        x = rng.standard_normal((5, 4)).astype(np.float32)
        out = model.forward(x)
        w0 = model.params["layers.0.weight"].data
        b0 = model.params["layers.0.bias"].data
        w2 = model.params["layers.2.weight"].data
        b2 = model.params["layers.2.bias"].data
        for t in range(5):
            hidden = np.zeros(6)
            for o in range(6):
                acc = 0.0
                for i in range(4):
                    acc += float(x[t, i]) * float(w0[o, i])
                hidden[o] = max(acc + float(b0[o]), 0.0)
            for o in range(3):
                acc = 0.0
                for i in range(6):
                    acc += hidden[i] * float(w2[o, i])
                assert out[t, o] == pytest.approx(acc + float(b2[o]), rel=1e-5)

    def test_embedding_path_and_token_bounds(self):
        model = ToyModel.build([Embedding(10, 4, frozen=True), Linear(4, 2)], seed=1)
        cal = CalibrationSet("tokens", (np.array([1, 2]), np.array([3])))
        out = model.forward(cal)
        assert out.shape == (3, 2)
        with pytest.raises(ValidationError, match="out of range"):
            model.forward(CalibrationSet("tokens", (np.array([10]),)))

    def test_width_mismatch(self):
        model = small_model()
        with pytest.raises(ShapeMismatch, match="width"):
            model.forward(np.ones((2, 5), np.float32))

    def test_collect_equals_offline_accumulation(self, rng):
        model = small_model()
        x = rng.standard_normal((9, 4)).astype(np.float32)
        collected = ActivationStats()
        trace: dict[str, np.ndarray] = {}
        model.forward(x, collect=collected, trace=trace)
        offline = ActivationStats()
        for layer, batch in trace.items():
            accumulate_stats(offline, layer, batch)
        assert collected.layers() == offline.layers() == ("layers.0", "layers.2")
        for layer in collected.layers():
            assert np.array_equal(collected.sq_sum(layer), offline.sq_sum(layer))
            assert collected.token_count(layer) == offline.token_count(layer)

    def test_forward_counter_increments(self):
        from obmerge import toynet

        model = small_model()
        before = toynet.FORWARD_PASSES
        model.forward(np.ones((1, 4), np.float32))
        assert toynet.FORWARD_PASSES == before + 1


class TestLayerLossChange:
    def test_zero_delta(self):
        assert layer_loss_change(np.zeros((2, 3)), np.ones((3, 5))) == 0.0

    def test_single_row_example(self):
        # delta_W = [[1, 0]], X holds feature rows [3; 4] for one token
        assert layer_loss_change(np.array([[1.0, 0.0]]), np.array([[3.0], [4.0]])) == 9.0

    def test_matches_quadratic_form(self, rng):
        delta = rng.standard_normal((4, 6)).astype(np.float32)
        x = rng.standard_normal((6, 20)).astype(np.float32)
        gram = x.astype(np.float64) @ x.astype(np.float64).T
        expected = sum(
            float(row @ gram @ row) for row in delta.astype(np.float64)
        )
        assert layer_loss_change(delta, x) == pytest.approx(expected, rel=1e-5)

    def test_inner_dimension_check(self):
        with pytest.raises(ShapeMismatch, match="inner dimensions"):
            layer_loss_change(np.ones((2, 3)), np.ones((4, 5)))

    def test_whitened_diagonal_exactness_through_model_api(self, rng):
        scales = np.array([0.5, 2.0, 1.0, 3.0])
        x = whitened_inputs(4, 16, scales, seed=3)
        stats = ActivationStats()
        accumulate_stats(stats, "l", x)
        delta_w = rng.standard_normal((5, 4)).astype(np.float32)
        sal = score(make_delta({"l.weight": delta_w}), stats, {"l.weight": "l"})
        total = float(np.sum(sal["l.weight"], dtype=np.float64))
        assert layer_loss_change(delta_w, x.T) == pytest.approx(total, rel=1e-5)


class TestLeastSquaresExperts:
    def test_realizable_targets_are_fit_exactly(self, rng):
        model = small_model(seed=2)
        x = rng.standard_normal((32, 4)).astype(np.float32)
        true_w = rng.standard_normal((3, 6)).astype(np.float32)
        trace: dict[str, np.ndarray] = {}
        model.forward(x, trace=trace)
        phi = trace["layers.2"]
        targets = phi @ true_w.T
        expert = fit_last_layer(model, x, targets)
        tuned = model.with_params(expert)
        assert task_loss(tuned, x, targets) == pytest.approx(0.0, abs=1e-6)

    def test_task_loss_of_base_is_positive_for_nontrivial_targets(self, rng):
        model = small_model(seed=2)
        x = rng.standard_normal((16, 4)).astype(np.float32)
        targets = rng.standard_normal((16, 3)).astype(np.float32)
        assert task_loss(model, x, targets) > 0.0


class TestPlanting:
    def test_empty_plan_returns_base(self):
        model = small_model()
        expert_a, expert_b, truth = plant_experts(model, PlantPlan(), seed=1)
        assert expert_a == model.params
        assert expert_b == model.params
        assert truth == {"a": set(), "b": set()}

    def test_planted_saliency_dominates_background(self):
        # planted column: |delta| = 0.1 on a feature with 1e4x the second
        # moment -> saliency 100 vs background 1
        model = small_model()
        plan = PlantPlan(
            expert_a=(PlantedColumn("layers.2.weight", 1, 0.1, 2e4 / 2.0),),
            background_magnitude=1.0,
            background_sq_mean=1.0,
            token_count=16,
        )
        expert_a, _, truth = plant_experts(model, plan, seed=5)
        delta = compute_delta(expert_a, model.params)
        stats = planted_stats(model, plan, "a")
        sal = score(
            delta.restricted(["layers.2.weight"]),
            stats,
            {"layers.2.weight": "layers.2"},
            normalize=True,
        )
        scores = sal["layers.2.weight"]
        planted = scores[:, 1]
        background = np.delete(scores, 1, axis=1)
        assert planted.min() > background.max()
        assert np.allclose(planted, 100.0, rtol=1e-4)
        assert np.allclose(background, 1.0, rtol=1e-4)
        rows = model.params["layers.2.weight"].shape[0]
        assert truth["a"] == {("layers.2.weight", r * 6 + 1) for r in range(rows)}

    def test_recovery_saliency_finds_planted_magnitude_misses(self):
        model = small_model()
        plan = PlantPlan(
            expert_a=(PlantedColumn("layers.2.weight", 2, 0.1, 1e4),),
            token_count=8,
        )
        expert_a, _, truth = plant_experts(model, plan, seed=6)
        delta = compute_delta(expert_a, model.params).restricted(["layers.2.weight"])
        stats = planted_stats(model, plan, "a")
        sal = score(delta, stats, {"layers.2.weight": "layers.2"})
        p = 1.0 / 6.0  # one column of six
        by_saliency = trim_saliency(delta, sal, p)["layers.2.weight"]
        by_magnitude = trim_magnitude(delta, p)["layers.2.weight"]
        planted_idx = {(r, 2) for r in range(3)}
        sal_kept = {tuple(ix) for ix in np.argwhere(by_saliency != 0)}
        mag_kept = {tuple(ix) for ix in np.argwhere(by_magnitude != 0)}
        assert sal_kept == planted_idx
        assert not (mag_kept & planted_idx)

    def test_out_of_range_site_rejected(self):
        model = small_model()
        plan = PlantPlan(expert_a=(PlantedColumn("layers.2.weight", 99, 0.1, 10.0),))
        with pytest.raises(ValidationError, match="out of range"):
            plant_experts(model, plan)


class TestModelFiles:
    def test_architecture_round_trip(self, tmp_path):
        model = ToyModel.build(
            [Embedding(12, 4, frozen=True), Linear(4, 5, frozen=True), Relu(), Linear(5, 2)],
            seed=4,
        )
        arch = tmp_path / "model.json"
        save_model(model, arch, init_seed=4)
        again = load_model(arch)
        assert again.layers == model.layers
        # same init seed -> same parameters
        assert again.params == model.params

    def test_params_reference_loading(self, tmp_path):
        from obmerge.tensor_store import write_checkpoint

        model = small_model(seed=9)
        write_checkpoint(model.params, tmp_path / "weights.safetensors")
        save_model(model, tmp_path / "model.json", params_ref="weights.safetensors")
        again = load_model(tmp_path / "model.json")
        assert again.params == model.params

    def test_frozen_names_and_routing(self):
        model = ToyModel.build(
            [Embedding(8, 4, frozen=True), Linear(4, 4, frozen=True), Relu(), Linear(4, 2)],
            seed=0,
        )
        assert model.frozen_param_names() == (
            "embed.weight",
            "layers.1.weight",
            "layers.1.bias",
        )
        rules = model.frozen_routing("vlm")
        assert all(rule.action == "copy_from" for rule in rules)

    def test_frozen_layers_survive_merging_via_copy_routing(self, rng):
        model = ToyModel.build([Linear(4, 4, frozen=True), Relu(), Linear(4, 2)], seed=1)
        donor_params = Checkpoint(
            [Tensor(name, t.data + 1.0) for name, t in model.params.items()]
        )
        delta = compute_delta(donor_params, model.params)
        merged = apply(
            model.params,
            delta,
            routing=model.frozen_routing("donor"),
            donors={"donor": donor_params},
        )
        for name in model.frozen_param_names():
            assert merged[name].data.tobytes() == donor_params[name].data.tobytes()
        assert np.array_equal(
            merged["layers.2.weight"].data, donor_params["layers.2.weight"].data
        )

    def test_unknown_layer_type_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"layers": [{"type": "attention"}]}))
        with pytest.raises(ValidationError, match="unknown type"):
            load_model(bad)


class TestCalibrationSets:
    def test_jsonl_round_trip_tokens(self, tmp_path):
        cal = random_token_set(rows=20, count=5, length=3, seed=2)
        path = tmp_path / "cal.jsonl"
        save_calibration(cal, path)
        again = load_calibration(path)
        assert again.kind == "tokens"
        assert again.count == 5
        assert all(np.array_equal(a, b) for a, b in zip(cal.records, again.records))

    def test_jsonl_round_trip_vectors(self, tmp_path):
        cal = random_vector_set(dim=4, count=3, seed=2)
        path = tmp_path / "cal.jsonl"
        save_calibration(cal, path)
        again = load_calibration(path)
        assert again.kind == "vec"
        assert np.allclose(again.matrix(), cal.matrix())

    def test_default_budget_is_128(self):
        assert random_token_set(rows=10).count == 128
        assert random_vector_set(dim=3).count == 128

    def test_mixed_kinds_rejected(self, tmp_path):
        path = tmp_path / "cal.jsonl"
        path.write_text('{"tokens": [1]}\n{"vec": [0.5]}\n')
        with pytest.raises(ValidationError, match="mixed record kinds"):
            load_calibration(path)

    def test_empty_forward_is_no_coverage(self):
        model = small_model()
        with pytest.raises(ValidationError, match="no calibration coverage"):
            model.forward(CalibrationSet("vec", ()))


class TestEndToEndComposition:
    def test_obm_merge_through_toy_model(self, rng):
        model = ToyModel.build([Linear(6, 8, frozen=True), Relu(), Linear(8, 4)], seed=7)
        plan = PlantPlan(
            expert_a=(PlantedColumn("layers.2.weight", 1, 0.2, 500.0),),
            expert_b=(PlantedColumn("layers.2.weight", 5, 0.2, 500.0),),
            background_magnitude=0.5,
            token_count=32,
        )
        expert_a, expert_b, truth = plant_experts(model, plan, seed=8)
        deltas = {
            "a": compute_delta(expert_a, model.params),
            "b": compute_delta(expert_b, model.params),
        }
        stats = {"a": planted_stats(model, plan, "a"), "b": planted_stats(model, plan, "b")}
        merged_delta = merge_obm(deltas, stats, MergePolicy(density=0.125))
        kept = {
            ("layers.2.weight", int(i))
            for i in np.flatnonzero(merged_delta["layers.2.weight"])
        }
        assert truth["a"] <= kept
        assert truth["b"] <= kept
        merged = apply(model.params, merged_delta)
        assert merged.names() == model.params.names()
