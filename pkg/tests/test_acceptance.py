"""Acceptance gate.

Ten checks: selection against a brute-force oracle (P1), full-model and
second-order gradient checks against finite differences (P2, P3), loss
composition and metric oracles (P4), end-to-end synthetic performance against
the Average baseline (P5), long-tail adaptation (P6), ablation ordering (P7),
bit-level determinism (P8), ingestion golden cases (P9), and the HTTP service
contract (P10). Each check prints a single PASS/FAIL line with the measured
numbers; P5 through P7 share cached training runs so the suite stays within a
CPU budget.
"""

from __future__ import annotations

import math
import shutil
import threading
import time

import numpy as np
import pytest
import torch

import tripenergy.checkpoint
import tripenergy.service as service
from tripenergy.cli import main as cli_main
from tripenergy.config import Config, MetaConfig, ModelConfig, VARIANTS
from tripenergy.core import (
    DriverHistory,
    RoadNetwork,
    RoadSegment,
    SplitAssignment,
    Trip,
    TrajectoryPoint,
)
from tripenergy.evaluation import (
    baseline_average_predictions,
    metrics,
    run_variant,
)
from tripenergy.features import fit_scalers
from tripenergy.ingestion import (
    RawLogRecord,
    VehicleParams,
    build_trip as assemble_trip,
    ingest_records,
    label_energy,
    load_network_json,
    read_records_csv,
    split_trips,
)
from tripenergy.model import ModelOutput
from tripenergy.pipeline import build_model
from tripenergy.prep import prep_driver
from tripenergy.selection import select_top_k
from tripenergy.service import DRIVER_DIR, GLOBAL_CKPT
from tripenergy.synthetic import SyntheticConfig, write_dataset
from tripenergy.training import batch_loss, clone_params, functional_loss, inner_adapt

from conftest import build_trip


def announce(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n{name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


# --- P1: top-K selection vs brute force ---------------------------------------


def oracle_top_k(target: Trip, cands: list[Trip], k: int, mode: str) -> list[str]:
    tset = set(target.route)
    overlaps = [float(len(tset & set(c.route))) for c in cands]
    if mode == "absolute":
        tdists = [abs(float(target.departure_time) - float(c.departure_time)) for c in cands]
    else:
        tod = lambda t: float(t.departure_time % 86_400)
        deltas = [abs(tod(target) - tod(c)) for c in cands]
        tdists = [min(d, 86_400 - d) for d in deltas]

    def norm(vs: list[float]) -> list[float]:
        lo, hi = min(vs), max(vs)
        if hi == lo:
            return [0.0] * len(vs)
        return [(v - lo) / (hi - lo) for v in vs]

    on, tn = norm(overlaps), norm(tdists)
    combined = [o - t for o, t in zip(on, tn)]
    order = sorted(
        range(len(cands)),
        key=lambda i: (-combined[i], cands[i].departure_time, cands[i].trip_id),
    )
    return [cands[i].trip_id for i in order[:k]]


class TestP1:
    def test_selector_matches_brute_force(self, capsys):
        rng = np.random.default_rng(11)
        alphabet = [f"s{i}" for i in range(12)]
        t0 = time.perf_counter()
        n_checked = 0
        for case in range(1000):
            m = int(rng.integers(1, 21))
            k = int(rng.integers(1, 6))
            mode = "time_of_day" if case % 2 == 0 else "absolute"

            def make(tid: str) -> Trip:
                n = int(rng.integers(1, 11))
                route = tuple(str(s) for s in rng.choice(alphabet, size=n, replace=False))
                return build_trip(
                    trip_id=tid, route=route, departure_time=int(rng.integers(0, 14 * 86_400))
                )

            target = make("target")
            cands = [make(f"c{i:02d}") for i in range(m)]
            train_ids = tuple(sorted(c.trip_id for c in cands))
            hist = DriverHistory(
                "drv",
                tuple(cands) + (target,),
                SplitAssignment(train=train_ids, val=(), test=("target",), support=train_ids, query=()),
            )
            got = [t.trip_id for t in select_top_k(target, hist, k, mode)]
            assert got == oracle_top_k(target, cands, k, mode), f"case {case} ({mode}, M={m}, K={k})"
            n_checked += 1
        elapsed = time.perf_counter() - t0
        announce(
            capsys,
            "P1",
            n_checked == 1000 and elapsed < 10.0,
            f"selector matched brute-force oracle on {n_checked}/1000 instances in {elapsed:.1f}s (limit 10s)",
        )


# --- P2: full-model gradients vs central finite differences --------------------


def _grad_check_network() -> RoadNetwork:
    def seg(sid, length, lanes, speed, rt):
        return RoadSegment(sid, length, lanes, speed, rt, False, ((0.0, 0.0), (0.0, length / 111_111.0)))

    return RoadNetwork(
        [
            seg("a", 400.0, 1, 30.0, "residential"),
            seg("b", 700.0, 2, 60.0, "arterial"),
            seg("c", 1200.0, 3, 100.0, "highway"),
            seg("d", 500.0, 2, 50.0, "arterial"),
        ]
    )


def _grad_check_trip(i: int, route: tuple[str, ...], driver: str, vehicle: str, rng) -> Trip:
    pts = []
    pos, energy = 0.0, 0.0
    depart = 1_609_718_400 + i * 3600
    for j in range(6):
        t = 5.0 * j
        speed = float(5 + 10 * rng.random())
        pos += speed * 5.0 if j else 0.0
        energy += float(0.05 + 0.1 * rng.random()) if j else 0.0
        state = (
            float((depart + t) % 86_400),
            speed,
            float(rng.normal(0, 0.5)),
            float(20 + 30 * rng.random()),
            float(0.2 + 0.6 * rng.random()),
        )
        pts.append(
            TrajectoryPoint(position_m=pos, elapsed_s=t, state=state, cum_energy=energy, segment_id=route[min(j // 2, 2)])
        )
    return Trip(f"{driver}-t{i}", driver, vehicle, depart, route, tuple(pts), total_energy=energy)


def _grad_check_batches():
    """Two drivers at the tiny config scale: one with reference histories and
    one single-trip driver that exercises the no-history null path, so every
    parameter group participates in the summed loss."""
    network = _grad_check_network()
    rng = np.random.default_rng(7)
    routes = [("a", "b", "c"), ("b", "c", "d"), ("a", "b", "d"), ("c", "b", "a"), ("d", "b", "a"), ("a", "c", "d")]
    trips = tuple(_grad_check_trip(i, r, "drv", "ICEV", rng) for i, r in enumerate(routes))
    hist = DriverHistory(
        "drv",
        trips,
        SplitAssignment(train=("drv-t0", "drv-t1", "drv-t2", "drv-t3"), val=("drv-t4",), test=("drv-t5",),
                        support=("drv-t0",), query=("drv-t1", "drv-t2", "drv-t3")),
    )
    solo_trips = tuple(_grad_check_trip(i, ("d", "c", "b"), "solo", "EV", rng) for i in range(2))
    solo = DriverHistory(
        "solo",
        solo_trips,
        SplitAssignment(train=("solo-t0",), val=(), test=("solo-t1",), support=("solo-t0",), query=()),
    )
    cfg = Config(model=ModelConfig(dim=4, heads=2, window=2, top_k=2, n_behaviors=4, mlp_hidden=8))
    sc = fit_scalers([hist, solo], network)
    prep = prep_driver(hist, network, sc, cfg.model, seed=0)
    prep_solo = prep_driver(solo, network, sc, cfg.model, seed=0)
    model = build_model(cfg, sc, seed=0)
    return model, (prep.train, prep_solo.train)


class TestP2:
    def test_gradients_match_finite_differences(self, capsys):
        t0 = time.perf_counter()
        model, batches = _grad_check_batches()
        assert not batches[1].has_refs.any(), "second batch must take the null-history path"
        params = clone_params(dict(model.named_parameters()), requires_grad=True)

        loss = sum(functional_loss(model, params, b).total for b in batches)
        grads = dict(zip(params, torch.autograd.grad(loss, list(params.values()), allow_unused=True)))
        missing = sorted(n for n, g in grads.items() if g is None)
        assert not missing, f"parameter groups without gradients: {missing}"

        frozen = {n: p.detach().clone() for n, p in params.items()}

        def loss_value() -> float:
            return sum(float(functional_loss(model, frozen, b).total) for b in batches)

        eps = 1e-6
        # central differences cannot resolve gradients below roughly
        # |loss| * machine epsilon / eps (~2e-9 here); a real gradient bug at a
        # coordinate produces errors on the order of the gradient itself, far
        # above this floor, so absolute agreement within it counts as a match
        floor = 4.0 * float(loss.detach()) * np.finfo(np.float64).eps / eps
        worst_abs = 0.0
        n_coords = n_small = 0
        with torch.no_grad():
            for name in sorted(frozen):
                flat = frozen[name].reshape(-1)
                ga = grads[name].reshape(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + eps
                    lp = loss_value()
                    flat[i] = orig - eps
                    lm = loss_value()
                    flat[i] = orig
                    fd = (lp - lm) / (2 * eps)
                    a = float(ga[i])
                    diff = abs(a - fd)
                    scale = max(abs(a), abs(fd))
                    n_coords += 1
                    worst_abs = max(worst_abs, diff)
                    if diff <= floor:
                        n_small += 1
                        continue
                    rel = diff / scale
                    assert rel <= 1e-4, f"{name}[{i}]: analytic {a:.6e} vs FD {fd:.6e} (rel {rel:.2e})"
        elapsed = time.perf_counter() - t0
        announce(
            capsys,
            "P2",
            elapsed < 60.0,
            f"all {n_coords} coordinates in {len(frozen)} parameter groups within 1e-4 relative of "
            f"central differences ({n_small} within the {floor:.0e} FD noise floor, worst absolute "
            f"gap {worst_abs:.1e}) in {elapsed:.1f}s (limit 60s)",
        )


# --- P3: second-order meta-gradient vs finite differences ----------------------


class TestP3:
    def test_meta_gradient_matches_finite_differences(self, capsys):
        torch.manual_seed(3)
        xs = torch.randn(8, 2, dtype=torch.float64)
        ys = torch.sin(xs.sum(dim=1, keepdim=True))
        xq = torch.randn(6, 2, dtype=torch.float64)
        yq = torch.sin(xq.sum(dim=1, keepdim=True))

        def make_params() -> dict[str, torch.Tensor]:
            g = torch.Generator().manual_seed(5)
            return {
                "w1": torch.randn(2, 2, generator=g, dtype=torch.float64, requires_grad=True),
                "b1": torch.randn(2, generator=g, dtype=torch.float64, requires_grad=True),
                "w2": torch.randn(2, 1, generator=g, dtype=torch.float64, requires_grad=True),
            }

        def support_loss(p):
            return ((torch.tanh(xs @ p["w1"] + p["b1"]) @ p["w2"] - ys) ** 2).mean()

        def query_loss(p):
            return ((torch.tanh(xq @ p["w1"] + p["b1"]) @ p["w2"] - yq) ** 2).mean()

        lr, steps = 0.1, 2
        params = make_params()
        n_params = sum(v.numel() for v in params.values())
        assert n_params <= 10

        adapted = inner_adapt(params, support_loss, lr, steps=steps, create_graph=True)
        outer = query_loss(adapted)
        grads = dict(zip(params, torch.autograd.grad(outer, list(params.values()))))

        def outer_value(p: dict[str, torch.Tensor]) -> float:
            pp = {n: v.detach().clone().requires_grad_(True) for n, v in p.items()}
            return float(query_loss(inner_adapt(pp, support_loss, lr, steps=steps)).detach())

        eps = 1e-6
        worst = 0.0
        for name, v in params.items():
            for i in range(v.numel()):
                base = float(v.detach().reshape(-1)[i])
                pp = {k: t.detach().clone() for k, t in params.items()}
                pp[name].reshape(-1)[i] = base + eps
                lp = outer_value(pp)
                pp[name].reshape(-1)[i] = base - eps
                lm = outer_value(pp)
                fd = (lp - lm) / (2 * eps)
                a = float(grads[name].reshape(-1)[i])
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-10))
        assert worst < 1e-3

        # the check has teeth: the first-order shortcut fails it
        params_fo = make_params()
        adapted_fo = inner_adapt(params_fo, support_loss, lr, steps=steps, create_graph=False)
        grads_fo = dict(zip(params_fo, torch.autograd.grad(query_loss(adapted_fo), list(params_fo.values()))))
        fo_gap = max(
            float((grads_fo[n] - grads[n]).abs().max() / grads[n].abs().max().clamp_min(1e-12))
            for n in grads
        )
        announce(
            capsys,
            "P3",
            worst < 1e-3 and fo_gap > 1e-2,
            f"second-order meta-gradient on a {n_params}-parameter toy within {worst:.1e} of FD "
            f"(limit 1e-3); first-order shortcut deviates by {fo_gap:.1e}",
        )


# --- P4: loss composition and metric oracles ------------------------------------


class TestP4:
    def test_loss_is_behavior_plus_energy_and_metrics_match_oracle(self, capsys):
        model, batches = _grad_check_batches()
        batch = batches[0]
        params = {n: p.detach() for n, p in model.named_parameters()}
        with torch.no_grad():
            parts = functional_loss(model, params, batch)
        residual = abs(float(parts.total) - (float(parts.behavior) + float(parts.energy)))
        assert residual <= 4 * np.finfo(np.float64).eps * max(1.0, float(parts.total))

        # structural form: with one term zeroed the total IS the other term,
        # bit for bit, so nothing else and no hidden weighting enters the sum
        assert batch.ye is not None and batch.y is not None
        rng = np.random.default_rng(4)
        y_off = batch.y + torch.from_numpy(rng.normal(0.0, 1.0, size=batch.y.shape))
        perfect_beh = ModelOutput(y_std=y_off, behaviors=batch.ye.clone(), pref_weights=None, attention=None)
        got = batch_loss(perfect_beh, batch)
        assert float(got.total) == float(got.energy) and float(got.behavior) == 0.0

        ye_off = batch.ye + torch.from_numpy(rng.normal(0.0, 1.0, size=batch.ye.shape))
        perfect_energy = ModelOutput(y_std=batch.y.clone(), behaviors=ye_off, pref_weights=None, attention=None)
        got = batch_loss(perfect_energy, batch)
        assert float(got.total) == float(got.behavior) and float(got.energy) == 0.0

        both = ModelOutput(y_std=batch.y.clone(), behaviors=batch.ye.clone(), pref_weights=None, attention=None)
        got = batch_loss(both, batch)
        assert float(got.total) == 0.0

        # metrics against an independent numpy oracle
        preds = rng.normal(10.0, 4.0, size=500)
        labels = rng.normal(10.0, 4.0, size=500)
        m = metrics(list(preds), list(labels))
        err = preds - labels
        eps_guard = 1e-2
        oracle = {
            "MAE": float(np.mean(np.abs(err))),
            "MSE": float(np.mean(err**2)),
            "MAPE": float(np.mean(np.abs(err) / np.maximum(np.abs(labels), eps_guard)) * 100.0),
        }
        worst = max(abs(m.as_dict()[k] - oracle[k]) / max(abs(oracle[k]), 1e-12) for k in oracle)
        assert worst <= 1e-9

        perfect = metrics(list(labels), list(labels))
        assert perfect.as_dict() == {"MAE": 0.0, "MSE": 0.0, "MAPE": 0.0}
        announce(
            capsys,
            "P4",
            True,
            f"loss total equals behavior+energy (residual {residual:.1e}, structural checks exact); "
            f"metrics within {worst:.1e} of oracle; perfect predictions give (0, 0, 0%)",
        )


# --- P5/P6/P7: synthetic end-to-end, shared cached runs -------------------------

TRAIN_CFG = Config(
    meta=MetaConfig(
        outer_lr=3e-3,
        epochs=90,
        patience=20,
        meta_batch_size=8,
        finetune_max_steps=100,
        finetune_check_every=5,
    )
)
SEEDS = (0, 1, 2)

_runs: dict[tuple[str, int], object] = {}
_cpu_times: dict[tuple[str, int], float] = {}


@pytest.fixture(scope="session")
def fleet(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_fleet")
    records_path, network_path = write_dataset(root, SyntheticConfig(seed=0))
    network = load_network_json(network_path)
    histories = ingest_records(read_records_csv(records_path), mode="obd", seed=0, network=network)
    return histories, network


def get_run(fleet, variant: str, seed: int):
    key = (variant, seed)
    if key not in _runs:
        histories, network = fleet
        t0 = time.process_time()
        _runs[key] = run_variant(variant, histories, network, TRAIN_CFG, seed)
        _cpu_times[key] = time.process_time() - t0
    return _runs[key]


def baseline_mape_on(fleet, run) -> float:
    histories, network = fleet
    base = baseline_average_predictions(histories, network, "test")
    covered = {(p.driver_id, p.trip_id) for p in run.predictions}
    base = [p for p in base if (p.driver_id, p.trip_id) in covered]
    return metrics([p.y_pred for p in base], [p.y_true for p in base]).mape


class TestP5:
    def test_full_model_beats_average_baseline(self, fleet, capsys):
        histories, _ = fleet
        assert len(histories) >= 30, f"generator produced only {len(histories)} drivers"
        margins, cpu_total = [], 0.0
        for seed in SEEDS:
            run = get_run(fleet, "full", seed)
            cpu_total += _cpu_times[("full", seed)]
            margins.append(1.0 - run.report.raw.mape / baseline_mape_on(fleet, run))
        ok = all(m >= 0.20 for m in margins) and cpu_total < 600.0
        announce(
            capsys,
            "P5",
            ok,
            f"{len(histories)} drivers; test MAPE below Average baseline by "
            f"{', '.join(f'{m:.1%}' for m in margins)} across seeds {SEEDS} "
            f"(need >= 20% each); {cpu_total:.0f}s CPU for 3 runs (limit 600s)",
        )


class TestP6:
    def test_finetuned_meta_beats_pooled_on_long_tail(self, fleet, capsys):
        pairs = []
        for seed in SEEDS:
            full = get_run(fleet, "full", seed)
            pec = get_run(fleet, "pec", seed)
            assert full.report.long_tail["n_trips"] > 0
            pairs.append(
                (full.report.long_tail["metrics_raw"]["MAE"], pec.report.long_tail["metrics_raw"]["MAE"])
            )
        wins = sum(f < p for f, p in pairs)
        announce(
            capsys,
            "P6",
            wins >= 2,
            "long-tail (drivers with <10 train trips) MAE fine-tuned-from-meta vs no-meta: "
            + ", ".join(f"{f:.3f} vs {p:.3f}" for f, p in pairs)
            + f"; {wins}/3 seeds better (need >= 2)",
        )


class TestP7:
    def test_all_ablations_run_and_full_wins_directionally(self, fleet, capsys):
        for variant in VARIANTS:
            if variant == "full":
                continue
            run = get_run(fleet, variant, 0)
            assert run.report.n_trips > 0 and math.isfinite(run.report.raw.mape), variant

        wins_rand = wins_mec = 0
        rows = []
        for seed in SEEDS:
            full = get_run(fleet, "full", seed).report.raw.mape
            rand = get_run(fleet, "rand_hist", seed).report.raw.mape
            mec = get_run(fleet, "meta_ec", seed).report.raw.mape
            wins_rand += full < rand
            wins_mec += full < mec
            rows.append(f"seed {seed}: full {full:.2f} vs rand_hist {rand:.2f} vs meta_ec {mec:.2f}")
        ok = wins_rand >= 2 and wins_mec >= 2
        announce(
            capsys,
            "P7",
            ok,
            f"all {len(VARIANTS) - 1} ablations trained and evaluated; MAPE {'; '.join(rows)}; "
            f"full beats rand_hist {wins_rand}/3 and meta_ec {wins_mec}/3 seeds (need >= 2 each)",
        )


# --- P8: bit-level determinism ---------------------------------------------------

P8_TOML = """\
[model]
dim = 8
heads = 2
window = 2
top_k = 3

[meta]
epochs = 2
finetune_max_steps = 10
finetune_check_every = 5
"""


class TestP8:
    def test_repeated_training_is_bit_identical(self, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv("PEC_STORE", raising=False)
        records, network = write_dataset(tmp_path / "raw", SyntheticConfig(n_drivers=6, grid=5, seed=3))
        cfg = tmp_path / "tiny.toml"
        cfg.write_text(P8_TOML, encoding="utf-8")
        blobs = {}
        for tag in ("one", "two"):
            store = tmp_path / tag
            base = ["--config", str(cfg), "--seed", "0", "--store", str(store)]
            assert cli_main(base + ["ingest", "--records", str(records), "--network", str(network)]) == 0
            assert cli_main(base + ["train"]) == 0
            report = tmp_path / f"report_{tag}.json"
            assert cli_main(base + ["evaluate", "--split", "test", "--out", str(report)]) == 0
            blobs[tag] = ((store / GLOBAL_CKPT).read_bytes(), report.read_bytes())
        same_ckpt = blobs["one"][0] == blobs["two"][0]
        same_report = blobs["one"][1] == blobs["two"][1]
        announce(
            capsys,
            "P8",
            same_ckpt and same_report,
            f"two same-seed train+evaluate runs: checkpoints identical={same_ckpt} "
            f"({len(blobs['one'][0])} bytes), EvalReports identical={same_report}",
        )


# --- P9: ingestion golden cases --------------------------------------------------


def _raw(t: float, speed: float = 10.0, rate: float | None = 0.01) -> RawLogRecord:
    return RawLogRecord(
        driver_id="d1", timestamp=t, lat=42.0, lon=-83.0, speed=speed,
        energy_rate=rate, segment_id="a", vehicle_type="ICEV",
    )


class TestP9:
    def test_ingestion_golden_cases(self, tmp_path, capsys):
        # trip segmentation boundary: gaps strictly over 300s split
        split_at_301 = split_trips([_raw(0.0), _raw(10.0), _raw(311.0), _raw(321.0)])
        no_split_at_300 = split_trips([_raw(0.0), _raw(300.0), _raw(600.0)])
        assert len(split_at_301) == 2 and len(no_split_at_300) == 1

        # mechanical labeling against an independent trapezoidal oracle
        rng = np.random.default_rng(9)
        times = np.cumsum(rng.uniform(1.0, 8.0, size=30))
        speeds = rng.uniform(0.0, 25.0, size=30)
        params = VehicleParams()
        trip = assemble_trip("m1", [_raw(float(t), float(v), rate=None) for t, v in zip(times, speeds)])
        labeled = label_energy(trip, "mechanical", params)
        dt = np.diff(times)
        v_mean = 0.5 * (speeds[1:] + speeds[:-1])
        accel = np.diff(speeds) / dt
        force = (
            params.mass_kg * accel
            + 0.5 * params.air_density * params.drag_coefficient * params.frontal_area_m2 * v_mean**2
            + params.mass_kg * params.gravity * params.rolling_resistance
        )
        oracle = float(np.sum(np.maximum(0.0, force * v_mean) * dt))
        rel = abs(labeled.total_energy - oracle) / abs(oracle)
        assert rel <= 1e-9

        # field-shaped CSVs parse and ingest
        ved = tmp_path / "ved.csv"
        ved.write_text(
            "driver_id,timestamp,lat,lon,speed,energy_rate,segment_id,vehicle_type\n"
            "veh10,1574910000.1,42.276,-83.738,12.5,0.021,seg1,HEV\n"
            "veh10,1574910001.1,42.277,-83.738,12.9,0.022,seg1,HEV\n"
            "veh10,1574910002.1,42.278,-83.739,13.0,0.020,seg2,HEV\n",
            encoding="utf-8",
        )
        ettd = tmp_path / "ettd.csv"
        ettd.write_text(
            "driver_id,timestamp,lat,lon,speed,segment_id,vehicle_type\n"
            "taxi7,2018-06-01T08:00:00,39.915,116.404,8.0,road4,ICEV\n"
            "taxi7,2018-06-01T08:00:10,39.916,116.405,9.5,road4,ICEV\n"
            "taxi7,2018-06-01T08:00:20,39.917,116.406,11.0,road5,ICEV\n",
            encoding="utf-8",
        )
        ved_hist = ingest_records(read_records_csv(ved), mode="obd")
        ettd_hist = ingest_records(read_records_csv(ettd), mode="mechanical")
        assert len(ved_hist) == 1 and ved_hist[0].trips[0].total_energy > 0
        assert len(ettd_hist) == 1 and ettd_hist[0].trips[0].total_energy > 0
        announce(
            capsys,
            "P9",
            True,
            f"301s gap splits and 300s does not; mechanical label within {rel:.1e} of trapezoidal "
            f"oracle (limit 1e-9); OBD-shaped and taxi-shaped CSVs ingest",
        )


# --- P10: service contract --------------------------------------------------------


class TestP10:
    def test_service_contract(self, tmp_path, mini_store, monkeypatch, capsys):
        from fastapi.testclient import TestClient

        store_dir = tmp_path / "store"
        shutil.copytree(mini_store["store"], store_dir)
        app = service.build_app(store_dir)
        notes = []
        with TestClient(app) as client:
            tuned = mini_store["tuned_driver"]
            route = [seg.segment_id for seg in mini_store["network"].segments()[:3]]
            others = sorted(
                h.driver_id for h in mini_store["histories"] if h.driver_id != tuned
            )

            # estimate response shape
            r = client.post(
                "/estimate",
                json={"driver_id": tuned, "segment_ids": route, "departure_time": 1_610_000_000},
            )
            assert r.status_code == 200
            body = r.json()
            assert set(body) == {
                "total_energy", "segments", "model_version", "model",
                "fallback", "used_fallback_stats", "reference_trip_ids",
            }
            assert [s["id"] for s in body["segments"]] == route
            assert all(set(s) == {"id", "predicted_energy", "predicted_speed"} for s in body["segments"])
            notes.append("estimate shape ok")

            # 404 / 422 paths
            assert client.post(
                "/estimate", json={"driver_id": "nobody", "segment_ids": route, "departure_time": 0}
            ).status_code == 404
            assert client.post(
                "/estimate", json={"driver_id": tuned, "segment_ids": ["ghost"], "departure_time": 0}
            ).status_code == 422
            assert client.post(
                "/estimate", json={"driver_id": tuned, "segment_ids": route, "departure_time": "whenever"}
            ).status_code == 422
            assert client.get("/drivers/nobody/model").status_code == 404
            notes.append("404/422 ok")

            # 409 while a fine-tune is running, plus snapshot isolation
            release = threading.Event()
            in_save = threading.Event()
            real_save = service.save_model

            def slow_save(path, params, meta):
                in_save.set()
                release.wait(timeout=60)
                return real_save(path, params, meta)

            monkeypatch.setattr(service, "save_model", slow_save)
            target = others[0]
            before = client.post(
                "/estimate",
                json={"driver_id": target, "segment_ids": route, "departure_time": 1_610_000_000},
            ).json()
            assert before["model"] == "global"
            r1 = client.post(f"/drivers/{target}/finetune")
            assert r1.status_code == 202
            assert in_save.wait(timeout=60)
            assert client.post(f"/drivers/{target}/finetune").status_code == 409
            during = client.post(
                "/estimate",
                json={"driver_id": target, "segment_ids": route, "departure_time": 1_610_000_000},
            ).json()
            assert during == before, "estimates changed while the fine-tune was uncommitted"
            release.set()
            job = r1.json()["job_id"]
            deadline = time.monotonic() + 60
            while time.monotonic() < deadline:
                status = client.get(f"/jobs/{job}").json()["status"]
                if status in ("done", "failed"):
                    break
                time.sleep(0.02)
            assert status == "done"
            after = client.post(
                "/estimate",
                json={"driver_id": target, "segment_ids": route, "departure_time": 1_610_000_000},
            ).json()
            assert after["model"] == "personal"
            monkeypatch.setattr(service, "save_model", real_save)
            notes.append("409 and snapshot isolation ok")

            # atomic checkpoint write under kill injection
            def crash(src, dst):
                raise OSError("injected crash during checkpoint rename")

            victim = others[1]
            monkeypatch.setattr(tripenergy.checkpoint, "_replace", crash)
            r2 = client.post(f"/drivers/{victim}/finetune")
            job2 = r2.json()["job_id"]
            deadline = time.monotonic() + 60
            while time.monotonic() < deadline:
                status2 = client.get(f"/jobs/{job2}").json()["status"]
                if status2 in ("done", "failed"):
                    break
                time.sleep(0.02)
            assert status2 == "failed"
            monkeypatch.undo()
            assert not (store_dir / DRIVER_DIR / f"{victim}.ckpt").exists()
            est = client.post(
                "/estimate",
                json={"driver_id": victim, "segment_ids": route, "departure_time": 1_610_000_000},
            )
            assert est.status_code == 200 and est.json()["model"] == "global"
            r3 = client.post(f"/drivers/{victim}/finetune")
            job3 = r3.json()["job_id"]
            deadline = time.monotonic() + 60
            while time.monotonic() < deadline:
                status3 = client.get(f"/jobs/{job3}").json()["status"]
                if status3 in ("done", "failed"):
                    break
                time.sleep(0.02)
            assert status3 == "done"
            assert (store_dir / DRIVER_DIR / f"{victim}.ckpt").is_file()
            notes.append("kill-injected write left store intact; retry committed")
        app.state.runner.shutdown()
        announce(capsys, "P10", True, "; ".join(notes))
