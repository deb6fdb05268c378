"""
Tests for the round-protocol algebra: aggregation, affinity, auxiliary strategies and learnable aggregation
"""

import os
import sys
from dataclasses import replace

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "..", "src"))

from autodiff import no_grad
from config import ExperimentConfig
from errors import ProtocolError, ShapeError
from fed_protocol import (
    AffinityMatrix,
    ClientState,
    ClientUpload,
    Strategy,
    aggregate_sample_weighted,
    augment_batch,
    aux_params_for_client,
    blend,
    centralized_baseline,
    client_local_round,
    compute_affinity,
    fedavg_baseline,
    learnable_aggregation,
    learnable_aggregation_pairs,
    local_baseline,
    model_config_for,
    random_derangement,
    round_rng,
    run_federation,
)
from formats import UNLABELED
from segmodel import build_model, partition
from synth_data import SiteSplit, default_4site_config, generate_sample
from wss_loss import LossConfig, wss_objective


@pytest.mark.unit
class TestAggregation:
    def test_sample_weighted(self):
        out = aggregate_sample_weighted([(np.zeros(3, dtype=np.float32), 1), (np.full(3, 4.0, dtype=np.float32), 3)])
        np.testing.assert_allclose(out, [3.0, 3.0, 3.0])
        assert out.dtype == np.float32

    def test_equal_sizes_give_mean(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, 6.0])
        np.testing.assert_allclose(aggregate_sample_weighted([(a, 5), (b, 5)]), [2.0, 4.0])

    def test_single_client_identity(self):
        v = np.random.default_rng(0).standard_normal(7).astype(np.float32)
        np.testing.assert_array_equal(aggregate_sample_weighted([(v, 9)]), v)

    def test_empty_rejected(self):
        with pytest.raises(ProtocolError):
            aggregate_sample_weighted([])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            aggregate_sample_weighted([(np.zeros(2), 1), (np.zeros(3), 1)])


@pytest.mark.unit
class TestAffinity:
    def test_reference_value(self):
        p_u = np.array([1.0, 0.0])
        a = compute_affinity([(p_u, np.array([1.0, 0.0])), (p_u, np.array([0.0, 1.0]))])
        assert a.a[0, 1] == pytest.approx(0.5)

    def test_identical_prompts_score_one(self):
        p = (np.array([0.3, -1.0]), np.array([2.0, 0.5]))
        assert compute_affinity([p, p]).a[0, 1] == pytest.approx(1.0)

    def test_antiparallel_rectified_to_zero(self):
        a = compute_affinity([(np.zeros(0), np.array([1.0, 2.0])), (np.zeros(0), np.array([-1.0, -2.0]))])
        assert a.a[0, 1] == 0.0

    def test_properties_on_random_prompts(self):
        rng = np.random.default_rng(1)
        p_u = rng.standard_normal(16)
        a = compute_affinity([(p_u, rng.standard_normal(16)) for _ in range(5)]).a
        np.testing.assert_array_equal(a, a.T)
        np.testing.assert_array_equal(np.diag(a), 1.0)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_zero_norm_rejected(self):
        with pytest.raises(ProtocolError):
            compute_affinity([(np.zeros(0), np.zeros(3)), (np.zeros(0), np.ones(3))])

    def test_csv_round_trip(self, tmp_path):
        a = AffinityMatrix(np.array([[1.0, 0.25], [0.25, 1.0]]))
        a.to_csv(tmp_path / "a.csv")
        np.testing.assert_allclose(AffinityMatrix.from_csv(tmp_path / "a.csv").a, a.a)


@pytest.mark.unit
class TestAuxStrategies:
    @pytest.fixture
    def phis(self):
        return [np.full(4, float(k), dtype=np.float32) for k in range(3)]

    def test_psa_row_normalisation(self, phis):
        v = [np.array([3.0, 0.0]), np.array([0.0, 3.0]), np.array([9.0, 9.0])]
        affinity = AffinityMatrix(np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        out = aux_params_for_client(0, v, affinity, Strategy.PSA)
        np.testing.assert_allclose(out, [2.0, 1.0])

    def test_psa_identity_affinity_returns_own(self, phis):
        out = aux_params_for_client(1, phis, AffinityMatrix(np.eye(3)), Strategy.PSA)
        np.testing.assert_array_equal(out, phis[1])

    def test_psa_weights_rows_sum_to_one(self):
        a = compute_affinity([(np.zeros(0), np.random.default_rng(k).standard_normal(6)) for k in range(4)])
        np.testing.assert_allclose(a.psa_weights().sum(axis=1), 1.0)

    def test_fixed_order_cycle(self, phis):
        got = [aux_params_for_client(i, phis, None, Strategy.FIXED_ORDER)[0] for i in range(3)]
        assert got == [1.0, 2.0, 0.0]

    def test_hps_picks_most_similar_other(self, phis):
        affinity = AffinityMatrix(np.array([[1.0, 0.2, 0.9], [0.2, 1.0, 0.1], [0.9, 0.1, 1.0]]))
        assert aux_params_for_client(0, phis, affinity, Strategy.HPS)[0] == 2.0
        assert aux_params_for_client(1, phis, affinity, Strategy.HPS)[0] == 0.0

    def test_hps_falls_back_to_own(self, phis):
        out = aux_params_for_client(1, phis, AffinityMatrix(np.eye(3)), Strategy.HPS)
        assert out[0] == 1.0

    def test_random_is_a_derangement_shared_by_all_clients(self, phis):
        got = [aux_params_for_client(i, phis, None, Strategy.RANDOM, round_rng(0, 4), 4)[0] for i in range(3)]
        assert sorted(got) == [0.0, 1.0, 2.0]
        assert all(g != i for i, g in enumerate(got))

    def test_derangement_has_no_fixed_points(self):
        rng = np.random.default_rng(2)
        for n in range(2, 8):
            for _ in range(20):
                perm = random_derangement(n, rng)
                assert sorted(perm.tolist()) == list(range(n))
                assert not (perm == np.arange(n)).any()

    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_single_client_gets_own(self, strategy):
        v = [np.array([5.0])]
        assert aux_params_for_client(0, v, AffinityMatrix(np.ones((1, 1))), strategy, round_rng(0, 1))[0] == 5.0

    def test_psa_without_affinity_rejected(self, phis):
        with pytest.raises(ProtocolError):
            aux_params_for_client(0, phis, None, Strategy.PSA)


@pytest.mark.unit
class TestLearnableAggregation:
    def test_blend_endpoints_are_bitwise(self):
        rng = np.random.default_rng(3)
        prev = rng.standard_normal(50).astype(np.float32)
        glob = rng.standard_normal(50).astype(np.float32)
        assert blend(prev, glob, np.ones(50)).tobytes() == glob.tobytes()
        assert blend(prev, glob, np.zeros(50)).tobytes() == prev.tobytes()
        np.testing.assert_allclose(blend(prev, glob, np.full(50, 0.5)), (prev + glob) / 2, rtol=1e-6)

    def test_weights_stay_clamped_under_fuzzed_gradients(self):
        rng = np.random.default_rng(4)
        prev, glob = rng.standard_normal(30), rng.standard_normal(30)

        def loss_grad(blended):
            return float(rng.uniform()), rng.standard_normal(30) * 100.0

        _, w = learnable_aggregation(prev, glob, np.ones(30), loss_grad, max_iters=25, lr=1.0, fixed_iters=25)
        assert w.min() >= 0.0 and w.max() <= 1.0

    def test_descends_a_quadratic(self):
        prev, glob = np.zeros(4), np.ones(4)
        target = np.array([0.0, 0.25, 0.75, 1.0])

        def loss_grad(blended):
            return float(((blended - target) ** 2).sum()), 2.0 * (blended - target)

        phi_hat, w = learnable_aggregation(prev, glob, np.ones(4), loss_grad, max_iters=200, lr=0.2, fixed_iters=200)
        np.testing.assert_allclose(phi_hat, target, atol=1e-3)
        np.testing.assert_allclose(w, target, atol=1e-3)

    def test_fixed_iteration_count(self):
        calls = []

        def loss_grad(blended):
            calls.append(1)
            return 1.0, [np.zeros(3), np.zeros(2)]

        result = learnable_aggregation_pairs(
            [np.zeros(3), np.zeros(2)], [np.ones(3), np.ones(2)], [np.ones(3), np.ones(2)], loss_grad, 10, 0.1, 2
        )
        assert result.iterations == 2 and len(calls) == 2
        assert len(result.phi_hat) == 2

    def test_convergence_rule_stops_early(self):
        def loss_grad(blended):
            return 1.0, [np.zeros(3)]

        result = learnable_aggregation_pairs([np.zeros(3)], [np.ones(3)], [np.ones(3)], loss_grad, 10, 0.1)
        assert result.iterations == 2


def _tiny_split(n_train=4, seed=0):
    spec = default_4site_config(n_train=n_train, n_test=1, image_size=(16, 16))[0]
    samples = [generate_sample(spec, seed, k) for k in range(n_train)]
    return SiteSplit(
        spec=spec,
        images=np.stack([s.image for s in samples])[:, None].astype(np.float32),
        masks=np.stack([s.mask for s in samples]),
        weak=np.stack([s.label.label_map for s in samples]),
    )


def _tiny_client(local_iters=0, la_on=True, n_train=4):
    split = _tiny_split(n_train)
    cfg = ExperimentConfig(rounds=3, local_iters=local_iters, batch=2, channels_base=4, depth=2, la_on=la_on).validate()
    model = build_model(model_config_for(cfg, 1, (16, 16)))
    client = ClientState(0, split, model, partition(model), np.random.default_rng(0))
    return client, cfg


@pytest.mark.unit
class TestClientRound:
    def test_zero_iterations_upload_global_parameters(self):
        client, cfg = _tiny_client(local_iters=0, la_on=False)
        glob = partition(build_model(replace(client.model.config, seed=99)))
        up = client_local_round(client, glob.theta, glob.phi, glob.phi_bar, cfg, 1, 0.01)
        assert up.theta.tobytes() == glob.theta.tobytes()
        assert up.phi.tobytes() == glob.phi.tobytes()

    def test_upload_carries_only_theta_and_phi(self):
        client, cfg = _tiny_client(local_iters=1)
        p = client.params
        up = client_local_round(client, p.theta, p.phi, p.phi_bar, cfg, 1, 0.01)
        assert isinstance(up, ClientUpload)
        assert set(up.payload_bytes()) == {"theta", "phi"}
        assert up.num_samples == 4
        assert np.isfinite(up.loss)

    def test_learnable_aggregation_runs_from_round_two(self):
        client, cfg = _tiny_client(local_iters=1)
        p = client.params.copy()
        first = client_local_round(client, p.theta, p.phi, p.phi_bar, cfg, 1, 0.01)
        assert first.la_iterations == 0
        late = client_local_round(client, p.theta, p.phi, p.phi_bar, cfg, 3, 0.01)
        assert late.la_iterations == 2
        assert client.w_main.min() >= 0.0 and client.w_main.max() <= 1.0

    def test_empty_dataset_rejected(self):
        split = _tiny_split()
        empty = replace(split, images=split.images[:0], masks=split.masks[:0], weak=split.weak[:0])
        cfg = ExperimentConfig(rounds=1, local_iters=1, batch=2, channels_base=4, depth=2)
        with pytest.raises(ProtocolError):
            run_federation(cfg, [empty], [split])

    def test_local_round_descends_on_a_fixed_batch(self):
        def fixed_batch_loss(client):
            with no_grad():
                p_main, p_aux = client.model.forward(client.train.images, 0, client.sparsity)
                return wss_objective(p_main, p_aux, client.train.weak, LossConfig(), lambda_m=0.85).item()

        decreases = 0
        for seed in range(10):
            split = _tiny_split(n_train=2, seed=seed)
            cfg = ExperimentConfig(
                rounds=1, local_iters=10, batch=2, channels_base=4, depth=2, augment=False, seed=seed
            ).validate()
            model = build_model(model_config_for(cfg, 1, (16, 16)))
            client = ClientState(0, split, model, partition(model), np.random.default_rng(seed))
            p = client.params.copy()
            before = fixed_batch_loss(client)
            client_local_round(client, p.theta, p.phi, p.phi_bar, cfg, 1, 0.01)
            decreases += fixed_batch_loss(client) < before
        assert decreases >= 8


@pytest.mark.unit
class TestRunFederation:
    @pytest.fixture
    def sites(self):
        return [_tiny_split(3), _tiny_split(3)]

    def _cfg(self, **changes):
        base = dict(rounds=2, local_iters=1, batch=2, channels_base=4, depth=2, eval_every=1, augment=False)
        base.update(changes)
        return ExperimentConfig(**base)

    def test_identical_seeds_give_identical_metrics(self, sites):
        a = run_federation(self._cfg(), sites, sites)
        b = run_federation(self._cfg(), sites, sites)
        assert a.rows == b.rows
        assert a.clients[0].theta.tobytes() == b.clients[0].theta.tobytes()

    def test_writes_run_records(self, sites, tmp_path):
        result = run_federation(self._cfg(), sites, sites, tmp_path)
        assert (tmp_path / "metrics.csv").read_text().count("\n") == 1 + 2 * 2
        assert (tmp_path / "affinity_round_2.csv").exists()
        assert (tmp_path / "checkpoints" / "site_1" / "model.json").exists()
        assert result.communication["upload_bytes"] > 0
        assert result.affinity.a.shape == (2, 2)

    def test_local_method_exchanges_nothing(self, sites, tmp_path):
        result = run_federation(self._cfg(method="local"), sites, sites, tmp_path)
        assert result.communication == {"upload_bytes": 0, "download_bytes": 0}
        assert not list(tmp_path.glob("affinity_round_*.csv"))

    def test_zero_rounds_write_header_only(self, sites, tmp_path):
        result = run_federation(self._cfg(rounds=0), sites, sites, tmp_path)
        assert result.rows == []
        assert (tmp_path / "metrics.csv").read_text().count("\n") == 1


@pytest.mark.unit
class TestBaselines:
    @pytest.fixture
    def sites(self):
        return [_tiny_split(3), _tiny_split(3)]

    def _cfg(self, **changes):
        base = dict(rounds=2, local_iters=1, batch=2, channels_base=4, depth=2, eval_every=1, augment=False)
        base.update(changes)
        return ExperimentConfig(**base)

    def test_fedavg_shares_one_model_and_sends_no_aux(self, sites, tmp_path):
        result = fedavg_baseline(self._cfg(), sites, sites, tmp_path)
        assert result.global_params is not None
        assert result.affinity is None
        assert (tmp_path / "checkpoints" / "global" / "model.json").exists()
        assert not list(tmp_path.glob("affinity_round_*.csv"))
        messages = (tmp_path / "messages.jsonl").read_text().splitlines()
        assert len(messages) == 2 * 2 * 2
        assert all('"phi_bar"' not in line for line in messages)

    def test_local_matches_run_federation(self, sites):
        a = local_baseline(self._cfg(), sites, sites)
        b = run_federation(self._cfg(method="local"), sites, sites)
        assert a.rows == b.rows
        assert a.communication == {"upload_bytes": 0, "download_bytes": 0}

    @pytest.mark.parametrize("method", ["centralized_weak", "centralized_full"])
    def test_centralized_scores_every_site(self, sites, tmp_path, method):
        result = centralized_baseline(self._cfg(method=method), sites, sites, tmp_path)
        assert [(r["round"], r["site"]) for r in result.rows] == [(1, 0), (1, 1), (2, 0), (2, 1)]
        assert result.clients[0] is result.clients[1] is result.global_params
        assert result.affinity is None
        assert (tmp_path / "checkpoints" / "global" / "model.json").exists()


@pytest.mark.unit
class TestAugmentation:
    def test_shapes_and_label_values_preserved(self):
        rng = np.random.default_rng(5)
        images = rng.uniform(size=(3, 1, 16, 16)).astype(np.float32)
        labels = np.full((3, 16, 16), UNLABELED, dtype=np.uint8)
        labels[:, 4:8, 4:8] = 1
        labels[:, 0, :] = 0
        out_i, out_l = augment_batch(images, labels, rng)
        assert out_i.shape == images.shape and out_l.shape == labels.shape
        assert set(np.unique(out_l)) <= {0, 1, UNLABELED}
