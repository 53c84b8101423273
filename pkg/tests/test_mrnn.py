"""Interpolation/imputation blocks, joint training, and anti-leakage."""

import math
from dataclasses import replace

import numpy as np
import pytest

from gapfill.data import Cohort, RoadSegment, SegmentSeries, normalize, synthesize_cohort
from gapfill.data import apply_normalization, fit_norm_params
from gapfill.errors import PreconditionError, ShapeError, UntrainableError
from gapfill.masking import MaskSpec, MaskedTriplet, apply_mask, build_triplet, normalize_ledger
from gapfill.mrnn import (
    MrnnModel,
    TrainConfig,
    batch_loss,
    cohort_arrays,
    impute,
    impute_block,
    interpolate_block,
    load_model,
    loss_and_gradients,
    new_model,
    predict,
    save_model,
    train,
)
from gapfill.nncore import ParamStore, grad_check, sigmoid


def _zero_model(n_streams=2, delta_scale=1.0):
    model = new_model(n_streams, seed=0, delta_scale=delta_scale)
    zeros = ParamStore({name: np.zeros_like(v) for name, v in model.params.items()})
    return replace(model, params=zeros)


def _random_triplet(rng, n_streams=2, length=5):
    m = (rng.random((n_streams, length)) < 0.7).astype(float)
    z = rng.random((n_streams, length)) * m
    ts = np.arange(length, dtype=float)
    delta = np.zeros((n_streams, length))
    for t in range(1, length):
        delta[:, t] = 1.0 + np.where(m[:, t - 1] == 0.0, delta[:, t - 1], 0.0)
    return MaskedTriplet(z=z, m=m, delta=delta)


def _oracle_gru_step(p, x, h):
    z = sigmoid(p["W_z"] @ x + p["U_z"] @ h + p["b_z"])
    r = sigmoid(p["W_r"] @ x + p["U_r"] @ h + p["b_r"])
    c = np.tanh(p["W_h"] @ x + p["U_h"] @ (r * h) + p["b_h"])
    return (1.0 - z) * h + z * c


def _oracle_interpolate(model, triplet):
    """Per-stream, per-step re-evaluation of the lagged recurrences."""
    n_streams, length = triplet.z.shape
    hidden = model.hidden
    out = np.zeros((n_streams, length))
    for d in range(n_streams):
        seq = np.stack(
            [triplet.z[d], triplet.m[d], triplet.delta[d] * model.delta_scale], axis=1
        )

        def run_stack(direction, inputs):
            current = inputs
            for layer in range(model.layers):
                p = model.params.view(f"gru.{direction}{layer}")
                h = np.zeros(hidden)
                states = []
                for step in range(current.shape[0]):
                    h = _oracle_gru_step(p, current[step], h)
                    states.append(h)
                current = np.array(states)
            return current

        forward = run_stack("fw", seq)
        backward = run_stack("bw", seq[::-1])[::-1]
        for t in range(length):
            f = forward[t - 1] if t >= 1 else np.zeros(hidden)
            b = backward[t + 1] if t <= length - 2 else np.zeros(hidden)
            logit = model.params["out.W"][d] @ np.concatenate([f, b]) + model.params["out.b"][d]
            out[d, t] = 1.0 / (1.0 + math.exp(-logit))
    return out


class TestInterpolateBlock:
    def test_zero_parameters_give_half_everywhere(self):
        model = _zero_model()
        triplet = _random_triplet(np.random.default_rng(0))
        np.testing.assert_allclose(interpolate_block(model, triplet), 0.5)

    def test_output_shape_matches_input(self):
        model = new_model(2, seed=1, delta_scale=0.1)
        triplet = _random_triplet(np.random.default_rng(1), length=9)
        assert interpolate_block(model, triplet).shape == (2, 9)

    def test_matches_scripted_lagged_recurrence_oracle(self):
        model = new_model(2, seed=42, delta_scale=0.2)
        triplet = _random_triplet(np.random.default_rng(42), length=5)
        got = interpolate_block(model, triplet)
        expected = _oracle_interpolate(model, triplet)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_stream_count_mismatch_raises(self):
        model = new_model(3, seed=0, delta_scale=1.0)
        triplet = _random_triplet(np.random.default_rng(2), n_streams=2)
        with pytest.raises(ShapeError):
            interpolate_block(model, triplet)


class TestImputeBlock:
    def test_zero_parameters_give_half(self):
        model = _zero_model()
        out = impute_block(model, np.zeros(2), np.zeros(2), np.zeros(2))
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_perturbing_own_observed_value_is_inert(self):
        model = new_model(2, seed=5, delta_scale=1.0)
        m = np.array([1.0, 1.0])
        xt = np.array([0.6, 0.4])
        base = impute_block(model, np.array([0.2, 0.9]), m, xt)
        moved = impute_block(model, np.array([0.7, 0.9]), m, xt)
        assert moved[0] == base[0]
        assert moved[1] != base[1]  # cross-stream path is live

    def test_hand_evaluated_affine_map(self):
        weights = np.array(
            [
                [0.0, 0.5, 0.0, -0.3, 0.8, 0.1],
                [0.4, 0.0, 0.2, 0.0, -0.5, 0.7],
            ]
        )
        bias = np.array([0.1, -0.2])
        model = _zero_model()
        blocks = dict(model.params.items())
        blocks["imp.W"] = weights
        blocks["imp.b"] = bias
        model = replace(model, params=ParamStore(blocks))
        # u = [z*m ; m ; x_tilde] = [0.2, 0, 1, 0, 0.6, 0.4]
        out = impute_block(model, np.array([0.2, 0.0]), np.array([1.0, 0.0]), np.array([0.6, 0.4]))
        # row 0: 0.8*0.6 + 0.1*0.4 + 0.1 = 0.62 ; row 1: 0.4*0.2 + 0.2*1 - 0.5*0.6 + 0.7*0.4 - 0.2 = 0.06
        assert out[0] == pytest.approx(1.0 / (1.0 + math.exp(-0.62)), abs=1e-12)
        assert out[1] == pytest.approx(1.0 / (1.0 + math.exp(-0.06)), abs=1e-12)


class TestAntiLeakage:
    def test_perturbing_z_never_moves_its_own_estimate(self):
        rng = np.random.default_rng(99)
        for trial in range(30):
            model = new_model(2, seed=trial, delta_scale=0.25)
            triplet = _random_triplet(rng, length=7)
            base = predict(model, triplet)
            d = int(rng.integers(0, 2))
            t = int(rng.integers(0, 7))
            z2 = triplet.z.copy()
            z2[d, t] += rng.normal() * 10.0
            moved = predict(model, MaskedTriplet(z=z2, m=triplet.m, delta=triplet.delta))
            assert moved[d, t] == base[d, t]

    def test_perturbation_does_influence_other_coordinates(self):
        model = new_model(2, seed=3, delta_scale=0.25)
        triplet = _random_triplet(np.random.default_rng(3), length=7)
        base = predict(model, triplet)
        z2 = triplet.z.copy()
        z2[0, 3] += 5.0
        moved = predict(model, MaskedTriplet(z=z2, m=triplet.m, delta=triplet.delta))
        assert moved[1, 3] != base[1, 3]      # cross-stream, same time
        assert moved[0, 4] != base[0, 4]      # same stream, later time


class TestLossAndGradients:
    def _normalized_cohort(self, n=2, length=6, seed=1, tau=0.3):
        cohort = synthesize_cohort(n_segments=n, length=length, noise_sd=0.05, seed=seed)
        masked, _ = apply_mask(cohort, MaskSpec(tau=tau, seed=seed + 1))
        return normalize(masked)

    def test_full_loss_passes_gradient_check(self):
        cohort = self._normalized_cohort()
        z, m, dn, delta_scale = cohort_arrays(cohort)
        model = new_model(2, seed=42, delta_scale=delta_scale)

        def fn(params):
            return loss_and_gradients(params, z, m, dn)

        assert grad_check(fn, model.params) < 1e-4

    def test_loss_is_invariant_under_segment_permutation(self):
        cohort = self._normalized_cohort(n=5, length=8)
        z, m, dn, delta_scale = cohort_arrays(cohort)
        model = new_model(2, seed=7, delta_scale=delta_scale)
        loss = batch_loss(model.params, z, m, dn)
        perm = np.random.default_rng(0).permutation(5)
        loss_perm = batch_loss(model.params, z[perm], m[perm], dn[perm])
        assert loss_perm == pytest.approx(loss, rel=1e-12)

    def test_zero_diagonals_survive_training(self):
        cohort = self._normalized_cohort(n=6, length=10)
        model, _ = train(cohort, TrainConfig(epochs=5, seed=0))
        w = model.params["imp.W"]
        rows = np.arange(2)
        np.testing.assert_array_equal(w[rows, rows], 0.0)
        np.testing.assert_array_equal(w[rows, 2 + rows], 0.0)


class TestTrain:
    def test_loss_decreases_on_fully_observed_cohort(self):
        cohort = normalize(synthesize_cohort(n_segments=8, length=30, noise_sd=0.05, seed=3))
        model, trace = train(cohort, TrainConfig(epochs=200, seed=1))
        z, m, dn, _ = cohort_arrays(cohort)
        final = batch_loss(model.params, z, m, dn)
        assert final < trace[0].train_loss

    def test_same_seed_identical_checkpoint_files(self, tmp_path):
        cohort = normalize(synthesize_cohort(n_segments=6, length=12, noise_sd=0.05, seed=4))
        config = TrainConfig(epochs=8, seed=11)
        a, _ = train(cohort, config)
        b, _ = train(cohort, config)
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        save_model(a, pa)
        save_model(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_all_missing_cohort_is_untrainable(self):
        cohort = synthesize_cohort(n_segments=3, length=6, noise_sd=0.0, seed=5)
        masked, _ = apply_mask(cohort, MaskSpec(tau=1.0, seed=6))
        hollow = Cohort(
            segments=masked.segments,
            stream_names=masked.stream_names,
            norm_params=((0.0, 1.0), (0.0, 1.0)),
        )
        with pytest.raises(UntrainableError):
            train(hollow, TrainConfig(epochs=2, seed=0))

    def test_requires_normalized_cohort(self):
        cohort = synthesize_cohort(n_segments=3, length=6, noise_sd=0.0, seed=5)
        with pytest.raises(PreconditionError):
            train(cohort, TrainConfig(epochs=1, seed=0))

    def test_early_stopping_respects_patience(self):
        cohort = normalize(synthesize_cohort(n_segments=6, length=10, noise_sd=0.05, seed=8))
        _, trace = train(cohort, TrainConfig(epochs=400, patience=3, seed=2))
        assert len(trace) - 1 < 400


class TestImpute:
    def test_fully_observed_cohort_passes_through(self):
        cohort = normalize(synthesize_cohort(n_segments=4, length=10, noise_sd=0.05, seed=9))
        model = new_model(2, seed=1, delta_scale=0.1)
        out = impute(model, cohort)
        for a, b in zip(out.segments, cohort.segments):
            np.testing.assert_array_equal(a.values, b.values)

    def test_fills_lie_in_open_unit_interval(self):
        cohort = synthesize_cohort(n_segments=4, length=12, noise_sd=0.05, seed=10)
        masked, _ = apply_mask(cohort, MaskSpec(tau=0.5, seed=11))
        scaled = normalize(masked)
        model = new_model(2, seed=2, delta_scale=0.1)
        out = impute(model, scaled)
        for i, s in enumerate(out.segments):
            assert np.all(s.observed)
            fills = s.values[~scaled.segments[i].observed]
            assert np.all((fills > 0.0) & (fills < 1.0))

    def test_trained_model_beats_constant_half_on_sine_waves(self):
        rng = np.random.default_rng(30)
        length = 85
        t = np.arange(length, dtype=float)
        members = []
        for n in range(20):
            phase = 2.0 * np.pi * n / 20.0
            speed = 70.0 + 25.0 * np.sin(2.0 * np.pi * t / 24.0 + phase)
            tt = 120.0 - 40.0 * np.sin(2.0 * np.pi * t / 24.0 + phase) + rng.normal(0, 1.0, length)
            seg = RoadSegment(id=f"sine{n:02d}", start=(43.7, -79.4), end=(43.71, -79.41), length=1.0)
            members.append(
                SegmentSeries(
                    segment=seg,
                    timestamps=np.arange(length),
                    values=np.stack([speed, tt]),
                    observed=np.ones((2, length), dtype=bool),
                )
            )
        cohort = Cohort(segments=tuple(members), stream_names=("speed_kmh", "travel_time_s"))
        masked, ledger = apply_mask(cohort, MaskSpec(tau=0.2, seed=31))
        norm = fit_norm_params(masked)
        scaled = apply_normalization(masked, norm)
        ledger_norm = normalize_ledger(ledger, norm)

        model, _ = train(scaled, TrainConfig(epochs=200, seed=5))
        filled = impute(model, scaled)
        from gapfill.evaluation import rmse

        model_rmse = rmse(filled, ledger_norm)
        constant_rmse = float(
            np.sqrt(np.mean([(0.5 - truth) ** 2 for *_, truth in ledger_norm.entries]))
        )
        assert model_rmse < constant_rmse


class TestCheckpoint:
    def test_round_trip_preserves_everything(self, tmp_path):
        scale = 1.0 / 85.0
        model = new_model(2, seed=13, delta_scale=scale, norm_params=((40.0, 100.0), (30.0, 70.0)))
        path = tmp_path / "model.json"
        save_model(model, path)
        back = load_model(path)
        assert back.n_streams == 2 and back.hidden == model.hidden and back.layers == model.layers
        assert back.delta_scale == scale
        assert back.norm_params == model.norm_params
        for name in model.params.names():
            np.testing.assert_array_equal(back.params[name], model.params[name])

    def test_save_is_byte_stable(self, tmp_path):
        model = new_model(2, seed=14, delta_scale=0.25)
        p1, p2 = tmp_path / "1.json", tmp_path / "2.json"
        save_model(model, p1)
        save_model(model, p2)
        assert p1.read_bytes() == p2.read_bytes()
