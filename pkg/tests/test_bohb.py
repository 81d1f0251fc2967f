"""Bracket arithmetic, density models, worker protocol, full runs."""

import io
import json
import math

import numpy as np
import pytest

from stereonas.bohb import (
    BANDWIDTH_FLOOR,
    Dim,
    HyperparamSpace,
    encode_message,
    fit_kdes,
    hyperband_brackets,
    incumbent_trajectory,
    make_synthetic_objective,
    min_points,
    read_message,
    read_trials,
    run_bohb,
    sample_config,
    sh_round,
    space_from_json,
    space_to_json,
    worker_serve,
    write_message,
    write_trials,
)
from stereonas.errors import ConfigError, DataError, ParseError

from oracles import incumbent_trajectory_loop


def unit_space(d=1):
    return HyperparamSpace([Dim(f"x{i}", "uniform", 0.0, 1.0) for i in range(d)])


def mixed_space():
    return HyperparamSpace([
        Dim("lr", "log_uniform", 1e-4, 1e-1),
        Dim("width", "integer", 2, 16),
        Dim("act", "categorical", categories=("relu", "tanh", "gelu")),
        Dim("mom", "uniform", 0.0, 0.99),
    ])


class FakeRecord:
    """Only the fields fit_kdes reads."""

    def __init__(self, config, loss, config_id=0):
        self.config = tuple(config)
        self.loss = loss
        self.config_id = config_id


# ---------------------------------------------------------------------------
# Brackets


def test_brackets_full_ladder():
    got = hyperband_brackets(1.0, 27.0, 3.0)
    assert [(b.s, b.n_configs) for b in got] == [(3, 27), (2, 12), (1, 6), (0, 4)]
    assert [b.budget for b in got] == pytest.approx([1.0, 3.0, 9.0, 27.0])


def test_brackets_degenerate_single():
    got = hyperband_brackets(1.0, 1.0, 3.0)
    assert len(got) == 1
    assert (got[0].s, got[0].n_configs, got[0].budget) == (0, 1, 1.0)


def test_brackets_snap_rounded_ladder():
    # 150000 / 16670 is a whisker under eta^2; the ladder still has 3 rungs
    got = hyperband_brackets(16670.0, 150000.0, 3.0)
    assert [b.n_configs for b in got] == [9, 5, 3]
    assert [b.budget for b in got] == pytest.approx([150000 / 9, 50000.0, 150000.0])


def test_brackets_no_snap_when_clearly_between():
    got = hyperband_brackets(1.0, 20.0, 3.0)  # log3(20) = 2.73 -> floor
    assert got[0].s == 2


@pytest.mark.parametrize("args", [(0.0, 1.0, 3.0), (2.0, 1.0, 3.0), (1.0, 9.0, 1.0)])
def test_brackets_bad_args(args):
    with pytest.raises(ConfigError):
        hyperband_brackets(*args)


# ---------------------------------------------------------------------------
# SuccessiveHalving rounds


def brute_promote(pairs, eta):
    k = len(pairs) // int(eta) if float(eta).is_integer() else int(len(pairs) / eta)
    best = sorted(pairs, key=lambda p: (p[1], p[0]))
    return [cid for cid, _ in best[:k]]


@pytest.mark.parametrize("n", [27, 5, 2])
def test_sh_round_matches_brute_force(n):
    rng = np.random.default_rng(7 + n)
    pairs = [(i, float(rng.uniform())) for i in range(n)]
    assert sh_round(pairs, 3.0) == brute_promote(pairs, 3.0)
    assert len(sh_round(pairs, 3.0)) == n // 3


def test_sh_round_tie_breaks_on_id():
    pairs = [(5, 0.5), (1, 0.5), (3, 0.5), (2, 0.9)]
    assert sh_round(pairs, 4.0) == [1]


def test_sh_round_failed_sort_last():
    pairs = [(0, float("inf")), (1, 2.0), (2, float("inf")), (3, 1.0)]
    assert sh_round(pairs, 2.0) == [3, 1]


def test_sh_round_empty_rejected():
    with pytest.raises(ConfigError):
        sh_round([], 3.0)


# ---------------------------------------------------------------------------
# Search space


def test_unit_roundtrip_mixed():
    space = mixed_space()
    cfg = (1e-3, 7, "tanh", 0.5)
    u = space.to_unit(cfg)
    assert np.all((0 <= u) & (u <= 1))
    back = space.from_unit(u)
    assert back[0] == pytest.approx(1e-3)
    assert back[1] == 7
    assert back[2] == "tanh"
    assert back[3] == pytest.approx(0.5)


def test_log_dim_midpoint():
    space = HyperparamSpace([Dim("lr", "log_uniform", 1e-4, 1e-1)])
    assert space.from_unit([0.5])[0] == pytest.approx(10 ** -2.5)
    assert space.to_unit((10 ** -2.5,))[0] == pytest.approx(0.5)


def test_integer_dim_rounds_and_clips():
    space = HyperparamSpace([Dim("w", "integer", 2, 16)])
    assert space.from_unit([0.0])[0] == 2
    assert space.from_unit([1.0])[0] == 16
    assert space.from_unit([1.7])[0] == 16  # clipped into the cube first
    assert isinstance(space.from_unit([0.3])[0], int)


def test_space_validation():
    with pytest.raises(ConfigError):
        Dim("x", "uniform", 1.0, 0.5)
    with pytest.raises(ConfigError):
        Dim("x", "log_uniform", 0.0, 1.0)
    with pytest.raises(ConfigError):
        Dim("x", "gaussian", 0.0, 1.0)
    with pytest.raises(ConfigError):
        Dim("x", "categorical", categories=())
    with pytest.raises(ConfigError):
        Dim("x", "uniform", 0.0, math.inf)
    with pytest.raises(ConfigError):
        HyperparamSpace([])
    with pytest.raises(ConfigError):
        HyperparamSpace([Dim("a", "uniform", 0, 1), Dim("a", "uniform", 0, 1)])
    with pytest.raises(ConfigError):
        unit_space().to_unit((1.5,))
    with pytest.raises(ConfigError):
        mixed_space().to_unit((1e-3, 7, "selu", 0.5))


def test_space_json_roundtrip():
    space = mixed_space()
    again = space_from_json(space_to_json(space))
    assert [d.name for d in again.dims] == [d.name for d in space.dims]
    assert [d.kind for d in again.dims] == [d.kind for d in space.dims]
    assert again.dims[2].categories == ("relu", "tanh", "gelu")


def test_space_json_errors_name_location():
    with pytest.raises(ParseError):
        space_from_json("not json {")
    with pytest.raises(ParseError):
        space_from_json(json.dumps({"spaces": []}))
    with pytest.raises(ParseError, match=r"dims\[0\]"):
        space_from_json(json.dumps({"dims": [{"name": "x", "kind": "uniform",
                                              "low": 0, "high": 1, "scale": 2}]}))
    with pytest.raises(ParseError, match=r"dims\[1\]"):
        space_from_json(json.dumps({"dims": [
            {"name": "x", "kind": "uniform", "low": 0, "high": 1},
            {"name": "y", "kind": "uniform", "low": 3, "high": 1},
        ]}))


# ---------------------------------------------------------------------------
# Density model


def two_cluster_records(n=50, seed=3):
    """Losses grow with distance from 0.2, so the good KDE sits there."""
    rng = np.random.default_rng(seed)
    xs = np.concatenate([
        np.clip(rng.normal(0.2, 0.03, size=12), 0.01, 0.99),
        rng.uniform(0.4, 0.99, size=n - 12),
    ])
    return [FakeRecord((float(x),), float((x - 0.2) ** 2), i)
            for i, x in enumerate(xs)]


def test_fit_kdes_needs_min_points():
    space = unit_space()
    recs = two_cluster_records()[: min_points(space) - 1]
    assert fit_kdes(recs, space) is None
    assert fit_kdes(two_cluster_records()[: min_points(space)], space) is not None


def test_kde_good_cluster_wins_ratio():
    space = unit_space()
    recs = two_cluster_records()
    model = fit_kdes(recs, space)
    pts = np.array([[r.config[0]] for r in recs])
    order = np.argsort(-model.ratio(pts))
    # the model must rank the observed configs near 0.2 above the rest
    assert np.all(np.abs(pts[order[:5], 0] - 0.2) < 0.1)
    r_good = model.ratio(np.array([[0.2]]))[0]
    r_bad = model.ratio(np.array([[0.7]]))[0]
    assert r_good > 10 * r_bad


def test_kde_density_integrates_to_one():
    space = unit_space()
    model = fit_kdes(two_cluster_records(), space)
    grid = np.linspace(0.0, 1.0, 10001)[:, None]
    for kde in (model.good, model.bad):
        total = np.trapezoid(kde.density(grid), grid[:, 0])
        assert total == pytest.approx(1.0, abs=1e-6)


def test_kde_categorical_mass_sums_to_one():
    space = HyperparamSpace([Dim("act", "categorical",
                                 categories=("a", "b", "c"))])
    recs = [FakeRecord((c,), l, i) for i, (c, l) in enumerate(
        [("a", 0.1), ("a", 0.2), ("b", 0.5), ("c", 0.9), ("b", 0.4),
         ("a", 0.15), ("c", 0.8), ("b", 0.6)])]
    model = fit_kdes(recs, space)
    mids = np.array([[1 / 6], [3 / 6], [5 / 6]])
    for kde in (model.good, model.bad):
        assert float(kde.density(mids).sum() / 3) == pytest.approx(1.0, abs=1e-9)


def test_kde_degenerate_spread_stays_finite():
    space = unit_space()
    recs = [FakeRecord((0.5,), 1.0, i) for i in range(10)]
    model = fit_kdes(recs, space)
    assert model.good.bandwidths[0] == pytest.approx(BANDWIDTH_FLOOR)
    vals = model.good.density(np.array([[0.5], [0.51]]))
    assert np.all(np.isfinite(vals))
    assert vals[0] > 0


def test_kde_failed_trials_land_in_bad():
    space = unit_space()
    recs = two_cluster_records()
    recs += [FakeRecord((0.95,), float("inf"), 1000 + i) for i in range(3)]
    model = fit_kdes(recs, space)
    assert model.good.points.shape[0] == math.ceil(0.15 * len(recs))
    # the +inf losses sort last; none of them can sit in the good set
    assert not np.any(np.isclose(model.good.points[:, 0], 0.95, atol=1e-9))


# ---------------------------------------------------------------------------
# Sampling


def test_sample_uniform_fallback_without_history():
    space = mixed_space()
    rng = np.random.default_rng(0)
    cfg = sample_config({}, space, rng, rho=0.0)
    space.to_unit(cfg)  # in bounds by construction


def test_sample_rho_one_is_uniform():
    space = unit_space()
    rng = np.random.default_rng(12)
    history = {0: two_cluster_records()}  # present but must be ignored
    xs = np.array([sample_config(history, space, rng, rho=1.0)[0]
                   for _ in range(2000)])
    counts, _ = np.histogram(xs, bins=10, range=(0.0, 1.0))
    chi2 = float(((counts - 200.0) ** 2 / 200.0).sum())
    assert chi2 < 27.88  # chi-square 9 dof, p = 0.001


def test_sample_model_focuses_on_good_region():
    space = unit_space()
    rng = np.random.default_rng(5)
    data = np.random.default_rng(3).normal(0.2, 0.05, size=50)
    history = {0: [FakeRecord((float(np.clip(x, 0.0, 1.0)),),
                              float((x - 0.2) ** 2), i)
                   for i, x in enumerate(data)]}
    xs = np.array([sample_config(history, space, rng, rho=0.0)[0]
                   for _ in range(100)])
    assert np.mean(np.abs(xs - 0.2) < 0.15) >= 0.70


def _clustered_history(center, seed, id_base):
    """Tight cluster of winners at `center` over a domain-wide background."""
    rng = np.random.default_rng(seed)
    xs = np.concatenate([
        np.clip(rng.normal(center, 0.03, size=12), 0.01, 0.99),
        rng.uniform(0.01, 0.99, size=38),
    ])
    return [FakeRecord((float(x),), float((x - center) ** 2), id_base + i)
            for i, x in enumerate(xs)]


def test_sample_prefers_largest_budget_history():
    space = unit_space()
    # rung 0 (largest budget) favors 0.8, rung 2 favors 0.2
    lo = _clustered_history(0.8, seed=3, id_base=0)
    hi = _clustered_history(0.2, seed=4, id_base=100)
    rng = np.random.default_rng(9)
    xs = np.array([sample_config({2: hi, 0: lo}, space, rng, rho=0.0)[0]
                   for _ in range(50)])
    assert np.mean(np.abs(xs - 0.8) < 0.2) > 0.6
    assert np.mean(np.abs(xs - 0.2) < 0.2) < 0.2


# ---------------------------------------------------------------------------
# Worker protocol


def test_message_roundtrip():
    doc = {"eval": {"config": [0.1, 3], "budget": 9.0, "seed": 42,
                    "config_id": 7}}
    buf = io.BytesIO(encode_message(doc))
    assert read_message(buf) == doc
    assert read_message(buf) is None  # stream end


def test_message_truncation_detected():
    raw = encode_message({"a": 1})
    with pytest.raises(DataError):
        read_message(io.BytesIO(raw[:2]))
    with pytest.raises(DataError):
        read_message(io.BytesIO(raw[:-1]))


def test_worker_serve_evaluates_and_stops():
    inbox = io.BytesIO()
    write_message(inbox, {"eval": {"config": [0.5], "budget": 2.0,
                                   "seed": 1, "config_id": 3}})
    write_message(inbox, {"eval": {"config": [-1.0], "budget": 2.0,
                                   "seed": 1, "config_id": 4}})
    write_message(inbox, {"shutdown": True})
    inbox.seek(0)
    outbox = io.BytesIO()

    def objective(config, budget, seed):
        if config[0] < 0:
            raise ValueError("bad region")
        return config[0] * budget

    worker_serve(inbox, outbox, objective)
    outbox.seek(0)
    first = read_message(outbox)["result"]
    second = read_message(outbox)["result"]
    assert first == {"config_id": 3, "loss": 1.0, "status": "finished"}
    assert second == {"config_id": 4, "loss": None, "status": "failed"}


# ---------------------------------------------------------------------------
# Full runs


def bowl(config, budget, seed):
    x = np.asarray(config, dtype=float)
    return float(np.sum((x - 0.3) ** 2))


def test_run_consumes_exactly_26_bmax_over_three_cycles(tmp_path):
    res = run_bohb(bowl, unit_space(2), b_min=3.0, b_max=27.0, eta=3.0,
                   n_iterations=9, seed=0,
                   log_path=str(tmp_path / "trials.jsonl"))
    assert res.total_budget == pytest.approx(26.0 * 27.0, abs=1e-9)
    assert sum(r.budget for r in res.records) == pytest.approx(res.total_budget)
    assert len({r.sh_run for r in res.records}) == 9


def test_run_log_is_bit_identical_across_reruns(tmp_path):
    paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
    for p in paths:
        run_bohb(bowl, unit_space(2), 1.0, 9.0, 3.0, n_iterations=4,
                 seed=123, log_path=str(p))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert len(paths[0].read_bytes()) > 0


def test_run_log_roundtrips_through_reader(tmp_path):
    path = tmp_path / "trials.jsonl"
    res = run_bohb(bowl, unit_space(1), 1.0, 9.0, 3.0, n_iterations=3,
                   seed=2, log_path=str(path))
    again = read_trials(str(path))
    assert again == res.records


def test_run_promotions_were_evaluated_at_lower_budget():
    res = run_bohb(bowl, unit_space(1), 1.0, 27.0, 3.0, n_iterations=4, seed=5)
    by_run = {}
    for rec in res.records:
        by_run.setdefault(rec.sh_run, []).append(rec)
    for recs in by_run.values():
        budgets = sorted({r.budget for r in recs})
        for lo, hi in zip(budgets, budgets[1:]):
            assert hi == pytest.approx(lo * 3.0)
            lo_ids = {r.config_id for r in recs if r.budget == lo}
            hi_ids = {r.config_id for r in recs if r.budget == hi}
            assert hi_ids <= lo_ids
            assert len(hi_ids) == len(lo_ids) // 3


def test_run_incumbent_is_best_full_budget_loss():
    res = run_bohb(bowl, unit_space(2), 1.0, 9.0, 3.0, n_iterations=6, seed=11)
    full = [r for r in res.records
            if r.budget == 9.0 and r.status == "finished"]
    assert res.incumbent_loss == min(r.loss for r in full)
    assert res.incumbent_config in [r.config for r in full]
    assert bowl(res.incumbent_config, 9.0, 0) == pytest.approx(res.incumbent_loss)


def test_run_survives_failing_objective():
    def flaky(config, budget, seed):
        if config[0] > 0.5:
            raise RuntimeError("diverged")
        return bowl(config, budget, seed)

    res = run_bohb(flaky, unit_space(1), 1.0, 9.0, 3.0, n_iterations=4, seed=3)
    failed = [r for r in res.records if r.status == "failed"]
    finished = [r for r in res.records if r.status == "finished"]
    assert failed and finished
    assert all(math.isinf(r.loss) for r in failed)
    assert math.isfinite(res.incumbent_loss)
    assert res.incumbent_config[0] <= 0.5


def test_run_two_workers_match_single_worker_losses():
    kwargs = dict(space=unit_space(2), b_min=1.0, b_max=9.0, eta=3.0,
                  n_iterations=4, seed=21)
    solo = run_bohb(bowl, workers=1, **kwargs)
    duo = run_bohb(bowl, workers=2, **kwargs)
    key = lambda r: (r.config_id, r.budget)
    assert {key(r): (r.config, r.loss, r.status) for r in solo.records} \
        == {key(r): (r.config, r.loss, r.status) for r in duo.records}


def test_run_mixed_space_smoke(tmp_path):
    def objective(config, budget, seed):
        lr, width, act, mom = config
        bonus = {"relu": 0.0, "tanh": 0.1, "gelu": 0.2}[act]
        return abs(math.log10(lr) + 2.5) + abs(width - 8) / 14 + bonus + mom

    path = tmp_path / "trials.jsonl"
    res = run_bohb(objective, mixed_space(), 1.0, 9.0, 3.0, n_iterations=4,
                   seed=7, log_path=str(path))
    assert res.incumbent_config is not None
    again = read_trials(str(path))
    assert again == res.records  # str/int/float fields all survive JSON


def test_run_bad_args():
    with pytest.raises(ConfigError):
        run_bohb(bowl, unit_space(1), 1.0, 9.0, 3.0, n_iterations=0)
    with pytest.raises(ConfigError):
        run_bohb(bowl, unit_space(1), 1.0, 9.0, 3.0, n_iterations=1, workers=0)


def test_model_beats_random_on_seeded_bowl():
    # 15 iterations of the (3, 9, eta 3) ladder consume exactly 30 * b_max
    obj = make_synthetic_objective(b_max=9.0, noise=0.05)
    kwargs = dict(space=unit_space(2), b_min=3.0, b_max=9.0, eta=3.0,
                  n_iterations=15)
    tuned_losses, random_losses, wins = [], [], 0
    for seed in range(5):
        tuned = run_bohb(obj, seed=seed, **kwargs)
        random = run_bohb(obj, seed=seed, rho=1.0, **kwargs)
        assert tuned.total_budget == pytest.approx(30 * 9.0)
        assert random.total_budget == pytest.approx(30 * 9.0)
        tuned_losses.append(tuned.incumbent_loss)
        random_losses.append(random.incumbent_loss)
        wins += tuned.incumbent_loss < random.incumbent_loss
    assert wins >= 3
    assert np.median(tuned_losses) <= np.median(random_losses)


# ---------------------------------------------------------------------------
# Trajectories


def test_trajectory_monotone_and_matches_oracle():
    res = run_bohb(make_synthetic_objective(9.0), unit_space(2),
                   1.0, 9.0, 3.0, n_iterations=5, seed=17)
    trajs = incumbent_trajectory(res.records)
    assert set(trajs) == {1.0, 3.0, 9.0}
    rng = np.random.default_rng(0)
    for budget, traj in trajs.items():
        bests = [b for _, b in traj]
        assert bests == sorted(bests, reverse=True)
        pairs = [(r.wall_time, r.loss) for r in res.records
                 if r.budget == budget and r.status == "finished"]
        rng.shuffle(pairs)
        assert incumbent_trajectory_loop(pairs) == traj
    assert incumbent_trajectory(res.records, budget=9.0) == trajs[9.0]
    assert incumbent_trajectory(res.records, budget=123.0) == []


def test_trajectory_skips_failed_trials():
    def flaky(config, budget, seed):
        if config[0] > 0.5:
            raise RuntimeError("diverged")
        return bowl(config, budget, seed)

    res = run_bohb(flaky, unit_space(1), 1.0, 9.0, 3.0, n_iterations=3, seed=3)
    for traj in incumbent_trajectory(res.records).values():
        assert all(math.isfinite(b) for _, b in traj)


# ---------------------------------------------------------------------------
# Trial log IO errors


def test_read_trials_missing_file(tmp_path):
    with pytest.raises(DataError):
        read_trials(str(tmp_path / "nope.jsonl"))


def test_read_trials_schema_mismatch(tmp_path):
    path = tmp_path / "trials.jsonl"
    path.write_text(json.dumps({"schema": 99, "config_id": 0}) + "\n")
    with pytest.raises(DataError, match="schema"):
        read_trials(str(path))


def test_read_trials_bad_json_names_line(tmp_path):
    path = tmp_path / "trials.jsonl"
    path.write_text("{broken\n")
    with pytest.raises(ParseError, match=":1"):
        read_trials(str(path))


def test_write_trials_append_mode(tmp_path):
    path = tmp_path / "trials.jsonl"
    res = run_bohb(bowl, unit_space(1), 1.0, 3.0, 3.0, n_iterations=2, seed=1)
    half = len(res.records) // 2
    write_trials(str(path), res.records[:half])
    write_trials(str(path), res.records[half:], append=True)
    assert read_trials(str(path)) == res.records


# ---------------------------------------------------------------------------
# Synthetic objective


def test_synthetic_exact_at_full_budget():
    obj = make_synthetic_objective(b_max=27.0, optimum=(0.3, 0.6))
    assert obj((0.3, 0.6), 27.0, seed=5) == pytest.approx(0.0, abs=1e-12)
    assert obj((0.5, 0.6), 27.0, seed=5) == pytest.approx(0.04)


def test_synthetic_noisy_below_full_budget():
    obj = make_synthetic_objective(b_max=27.0)
    a = obj((0.3, 0.6), 3.0, seed=1)
    b = obj((0.3, 0.6), 3.0, seed=2)
    assert a != b
    assert obj((0.3, 0.6), 3.0, seed=1) == a  # deterministic per seed
