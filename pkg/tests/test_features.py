"""Scaler fitting and raw feature extraction, verified by hand against the
training data, plus shape/selectivity checks on the embedding tables."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from tripenergy.config import ModelConfig
from tripenergy.core import DriverHistory, SplitAssignment
from tripenergy.features import (
    EmbeddingTables,
    Scalers,
    behavior_labels_raw,
    destandardize_label,
    fit_scalers,
    road_raw,
    route_length_m,
    standardize_label,
    state_raw,
    trip_stat_raw,
)

from conftest import build_point, build_trip


def history_of(trips, train_ids):
    ids = tuple(t.trip_id for t in trips)
    other = tuple(i for i in ids if i not in train_ids)
    splits = SplitAssignment(
        train=tuple(sorted(train_ids)),
        val=(),
        test=tuple(sorted(other)),
        support=tuple(sorted(train_ids))[:1],
        query=tuple(sorted(train_ids))[1:],
    )
    return DriverHistory(trips[0].driver_id, tuple(trips), splits)


def labeled_trip(tid, route, speeds, energy=1.0, depart=1_609_718_400):
    pts = tuple(
        build_point(
            float(i * 5),
            float(i * 50),
            speed=s,
            accel=0.1 * i,
            eph=2.0 * i,
            epk=0.5 * i,
            cum_energy=energy * i / max(1, len(speeds) - 1),
            segment_id=route[min(i, len(route) - 1)],
        )
        for i, s in enumerate(speeds)
    )
    return build_trip(
        trip_id=tid, route=route, trajectory=pts, total_energy=energy, departure_time=depart
    )


@pytest.fixture()
def fitted(tiny_network):
    t1 = labeled_trip("t1", ("a", "b"), (5.0, 10.0, 15.0), energy=2.0)
    t2 = labeled_trip("t2", ("b", "c"), (8.0, 12.0), energy=3.0, depart=1_609_718_400 + 7200)
    t3 = labeled_trip("t3", ("a",), (6.0, 6.0), energy=9.9)  # test split: must not leak
    hist = history_of([t1, t2, t3], ("t1", "t2"))
    return hist, fit_scalers([hist], tiny_network)


class TestFitScalers:
    def test_state_moments_from_train_points_only(self, fitted, tiny_network):
        hist, sc = fitted
        pts = [p.state for t in hist.trips if t.trip_id in ("t1", "t2") for p in t.trajectory]
        arr = np.array(pts)
        assert sc.state_mean == pytest.approx(tuple(arr.mean(axis=0)))
        assert sc.state_std == pytest.approx(tuple(arr.std(axis=0)))

    def test_label_moments(self, fitted):
        _, sc = fitted
        assert sc.label_mean == pytest.approx(2.5)
        assert sc.label_std == pytest.approx(np.array([2.0, 3.0]).std())

    def test_road_moments_over_network(self, fitted, tiny_network):
        _, sc = fitted
        arr = np.array([[s.length_m, s.max_speed_kmh] for s in tiny_network.segments()])
        assert sc.road_mean == pytest.approx(tuple(arr.mean(axis=0)))

    def test_road_type_vocab_sorted(self, fitted):
        _, sc = fitted
        assert sc.road_type_vocab == ("arterial", "highway", "residential")

    def test_constant_feature_guard(self, tiny_network):
        # identical labels would give std 0; the guard substitutes 1.0
        t1 = labeled_trip("t1", ("a",), (5.0, 5.0), energy=2.0)
        t2 = labeled_trip("t2", ("a",), (5.0, 5.0), energy=2.0)
        sc = fit_scalers([history_of([t1, t2], ("t1", "t2"))], tiny_network)
        assert sc.label_std == 1.0
        assert standardize_label(2.0, sc) == 0.0

    def test_requires_splits(self, tiny_network):
        t1 = labeled_trip("t1", ("a",), (5.0, 5.0))
        with pytest.raises(ValueError, match="splits required"):
            fit_scalers([DriverHistory("drv", (t1,))], tiny_network)

    def test_requires_some_labeled_trip(self, tiny_network):
        t1 = labeled_trip("t1", ("a",), (5.0, 5.0))
        t1 = build_trip(trip_id="t1", route=("a",), trajectory=t1.trajectory, total_energy=None)
        with pytest.raises(ValueError, match="no energy labels"):
            fit_scalers([history_of([t1], ("t1",))], tiny_network)

    def test_label_round_trip(self, fitted):
        _, sc = fitted
        assert destandardize_label(standardize_label(7.3, sc), sc) == pytest.approx(7.3)


class TestRawFeatures:
    def test_route_length(self, tiny_network):
        assert route_length_m(("a", "b"), tiny_network) == 1100.0
        assert route_length_m((), tiny_network) == 0.0

    def test_state_raw_standardizes(self, fitted):
        hist, sc = fitted
        t1 = hist.trip("t1")
        got = state_raw(t1, sc)
        want = (np.array([list(p.state) for p in t1.trajectory]) - np.array(sc.state_mean)) / np.array(
            sc.state_std
        )
        assert np.allclose(got, want)

    def test_trip_stat_pool_excludes_target(self, fitted, tiny_network):
        hist, sc = fitted
        t1, t2 = hist.trip("t1"), hist.trip("t2")
        cont, month, hour, fallback = trip_stat_raw(t1, [t1, t2], sc, tiny_network)
        assert not fallback
        from tripenergy.ingestion import trip_point_stats

        raw = np.concatenate(([route_length_m(t1.route, tiny_network)], trip_point_stats(t2)))
        want = (raw - np.array(sc.stat_mean)) / np.array(sc.stat_std)
        assert np.allclose(cont, want)
        assert (month, hour) == (0, 0)  # 2021-01-04 00:00 UTC

    def test_trip_stat_fallback_flag(self, fitted, tiny_network):
        hist, sc = fitted
        t1 = hist.trip("t1")
        cont, _, _, fallback = trip_stat_raw(t1, [], sc, tiny_network)
        assert fallback
        raw = np.concatenate(([route_length_m(t1.route, tiny_network)], sc.global_behavior))
        want = (raw - np.array(sc.stat_mean)) / np.array(sc.stat_std)
        assert np.allclose(cont, want)

    def test_road_raw_values(self, fitted, tiny_network):
        _, sc = fitted
        cfg = ModelConfig(dim=8)
        cat, cont = road_raw(("a", "c"), tiny_network, sc, cfg)
        vocab = {c: i for i, c in enumerate(sc.road_type_vocab)}
        assert cat[0].tolist() == [vocab["residential"], 1, 0]
        assert cat[1].tolist() == [vocab["highway"], 3, 0]
        want = (np.array([[400.0, 30.0], [1200.0, 100.0]]) - np.array(sc.road_mean)) / np.array(
            sc.road_std
        )
        assert np.allclose(cont, want)

    def test_lanes_capped(self, fitted, tiny_network):
        from tripenergy.core import RoadNetwork, RoadSegment

        _, sc = fitted
        wide = RoadSegment(
            segment_id="w", length_m=100.0, lanes=9, max_speed_kmh=50.0,
            road_type="arterial", oneway=False, polyline=((0.0, 0.0), (1.0, 1.0)),
        )
        net = RoadNetwork(list(tiny_network.segments()) + [wide])
        cfg = ModelConfig(dim=8, lanes_cap=6)
        cat, _ = road_raw(("w",), net, sc, cfg)
        assert cat[0][1] == 6

    def test_unknown_road_type_rejected(self, fitted, tiny_network):
        from tripenergy.core import RoadNetwork, RoadSegment

        _, sc = fitted
        odd = RoadSegment(
            segment_id="o", length_m=100.0, lanes=1, max_speed_kmh=10.0,
            road_type="footpath", oneway=False, polyline=((0.0, 0.0), (1.0, 1.0)),
        )
        net = RoadNetwork(list(tiny_network.segments()) + [odd])
        with pytest.raises(ValueError, match="not in training vocabulary"):
            road_raw(("o",), net, sc, ModelConfig(dim=8))

    def test_behavior_labels_use_state_scalers(self, fitted):
        hist, sc = fitted
        t1 = hist.trip("t1")
        got = behavior_labels_raw(t1, sc)
        from tripenergy.ingestion import extract_road_labels

        raw = np.array([list(b.values) for b in extract_road_labels(t1)])
        want = (raw - np.array(sc.state_mean[1:])) / np.array(sc.state_std[1:])
        assert got.shape == (2, 4)
        assert np.allclose(got, want)


class TestEmbeddingTables:
    @pytest.fixture()
    def tables(self):
        torch.manual_seed(0)
        return EmbeddingTables(ModelConfig(dim=8), n_road_types=3)

    def test_shapes(self, tables):
        stat = torch.randn(5, dtype=torch.float64)
        out = tables.embed_trip(stat, torch.tensor(3), torch.tensor(12))
        assert out.shape == (8,)
        cat = torch.tensor([[0, 1, 0], [2, 3, 1]])
        cont = torch.randn(2, 2, dtype=torch.float64)
        assert tables.embed_roads(cat, cont).shape == (2, 8)
        states = torch.randn(7, 5, dtype=torch.float64)
        assert tables.embed_states(states).shape == (7, 8)

    def test_batched_matches_single(self, tables):
        states = torch.randn(3, 7, 5, dtype=torch.float64)
        batched = tables.embed_states(states)
        for i in range(3):
            assert torch.allclose(batched[i], tables.embed_states(states[i]))

    def test_categorical_identity_matters(self, tables):
        stat = torch.zeros(5, dtype=torch.float64)
        a = tables.embed_trip(stat, torch.tensor(0), torch.tensor(0))
        b = tables.embed_trip(stat, torch.tensor(1), torch.tensor(0))
        assert not torch.allclose(a, b)

    def test_affine_is_per_field(self, tables):
        # changing one input field must not touch other fields' affine block
        x = torch.zeros(5, dtype=torch.float64)
        y = x.clone()
        y[2] = 1.0
        ax = EmbeddingTables._affine(x, tables.state_w, tables.state_b)
        ay = EmbeddingTables._affine(y, tables.state_w, tables.state_b)
        d = tables.dim
        diff = (ax != ay).reshape(5, d)
        assert diff[2].any()
        assert not diff[[0, 1, 3, 4]].any()

    def test_double_precision(self, tables):
        out = tables.embed_states(torch.randn(2, 5, dtype=torch.float64))
        assert out.dtype == torch.float64

    def test_scalers_dict_round_trip(self, fitted):
        _, sc = fitted
        assert Scalers.from_dict(sc.to_dict()) == sc
