"""Budget-aware hyperparameter optimization.

The outer loop is Hyperband: brackets indexed s = s_max..0, each running
SuccessiveHalving from budget b_max*eta^-s with N = ceil((s_max+1)/(s+1)
* eta^s) configurations, promoting the best floor(n/eta) to an eta times
larger budget per round.  Sampling replaces Hyperband's uniform draws
with a model: per budget, kernel density estimates over the best
(gamma fraction) and remaining configurations; candidates are drawn from
the good density (bandwidths widened) and ranked by the density ratio
l/g.  A fraction rho of samples stays uniformly random, and so does
everything until any budget has enough observations to fit a model,
which makes rho=1 exactly model-free Hyperband.

Budgets are tracked by integer rung k (budget = b_max * eta^-k), so
float drift cannot split histories of the same fidelity.
"""

from __future__ import annotations

import json
import math
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, ParseError

__all__ = [
    "Dim",
    "HyperparamSpace",
    "Bracket",
    "TrialRecord",
    "KdePair",
    "BohbResult",
    "hyperband_brackets",
    "sh_round",
    "fit_kdes",
    "sample_config",
    "run_bohb",
    "incumbent_trajectory",
    "make_synthetic_objective",
    "space_to_json",
    "space_from_json",
    "write_trials",
    "read_trials",
    "encode_message",
    "read_message",
    "write_message",
    "worker_serve",
]

TRIAL_SCHEMA = 1

# published defaults of the sampling method, fixed for reproducibility
GAMMA = 0.15        # good fraction
RHO = 1.0 / 3.0     # random-sample fraction
N_SAMPLES = 64      # acquisition candidates per model sample
BANDWIDTH_WIDEN = 3.0
BANDWIDTH_FLOOR = 1e-3


# ---------------------------------------------------------------------------
# Search space


_KINDS = ("uniform", "log_uniform", "integer", "categorical")


@dataclass(frozen=True)
class Dim:
    name: str
    kind: str
    low: float | None = None
    high: float | None = None
    categories: tuple | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"dim {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.categories:
                raise ConfigError(f"dim {self.name!r}: needs categories")
            object.__setattr__(self, "categories", tuple(self.categories))
            return
        if self.low is None or self.high is None:
            raise ConfigError(f"dim {self.name!r}: needs low and high")
        if not (math.isfinite(self.low) and math.isfinite(self.high)):
            raise ConfigError(f"dim {self.name!r}: bounds must be finite")
        if not self.low < self.high:
            raise ConfigError(f"dim {self.name!r}: low {self.low} >= high {self.high}")
        if self.kind == "log_uniform" and self.low <= 0:
            raise ConfigError(f"dim {self.name!r}: log scale needs low > 0")

    @property
    def n_categories(self) -> int:
        return len(self.categories) if self.categories else 0


class HyperparamSpace:
    """Ordered dims plus the unit-cube transform used by the density model."""

    def __init__(self, dims):
        if not dims:
            raise ConfigError("space needs at least one dim")
        names = [d.name for d in dims]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate dim names in {names}")
        self.dims = tuple(dims)

    @property
    def d(self) -> int:
        return len(self.dims)

    def to_unit(self, values) -> np.ndarray:
        if len(values) != self.d:
            raise ConfigError(f"{len(values)} values for {self.d} dims")
        out = np.empty(self.d)
        for i, (dim, v) in enumerate(zip(self.dims, values)):
            if dim.kind == "categorical":
                if v not in dim.categories:
                    raise ConfigError(f"dim {dim.name!r}: {v!r} not a category")
                out[i] = (dim.categories.index(v) + 0.5) / dim.n_categories
            elif dim.kind == "log_uniform":
                if not dim.low <= v <= dim.high:
                    raise ConfigError(f"dim {dim.name!r}: {v} out of bounds")
                out[i] = math.log(v / dim.low) / math.log(dim.high / dim.low)
            else:
                if not dim.low <= v <= dim.high:
                    raise ConfigError(f"dim {dim.name!r}: {v} out of bounds")
                out[i] = (v - dim.low) / (dim.high - dim.low)
        return out

    def from_unit(self, u) -> tuple:
        out = []
        for dim, x in zip(self.dims, u):
            x = min(max(float(x), 0.0), 1.0)
            if dim.kind == "categorical":
                idx = min(int(x * dim.n_categories), dim.n_categories - 1)
                out.append(dim.categories[idx])
            elif dim.kind == "log_uniform":
                out.append(dim.low * (dim.high / dim.low) ** x)
            elif dim.kind == "integer":
                v = dim.low + x * (dim.high - dim.low)
                out.append(int(min(max(round(v), dim.low), dim.high)))
            else:
                out.append(dim.low + x * (dim.high - dim.low))
        return tuple(out)

    def sample_uniform(self, rng) -> tuple:
        return self.from_unit(rng.uniform(size=self.d))

    def is_categorical(self) -> np.ndarray:
        return np.array([d.kind == "categorical" for d in self.dims])


def space_to_json(space: HyperparamSpace) -> str:
    dims = []
    for d in space.dims:
        if d.kind == "categorical":
            dims.append({"name": d.name, "kind": d.kind,
                         "categories": list(d.categories)})
        else:
            dims.append({"name": d.name, "kind": d.kind,
                         "low": d.low, "high": d.high})
    return json.dumps({"dims": dims}, indent=2)


def space_from_json(text: str) -> HyperparamSpace:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"space file is not valid JSON: {e}")
    if not isinstance(doc, dict) or "dims" not in doc:
        raise ParseError("space file must be an object with a 'dims' list")
    dims = []
    for i, entry in enumerate(doc["dims"]):
        loc = f"dims[{i}]"
        if not isinstance(entry, dict):
            raise ParseError(f"{loc}: expected an object")
        unknown = set(entry) - {"name", "kind", "low", "high", "categories"}
        if unknown:
            raise ParseError(f"{loc}: unknown keys {sorted(unknown)}")
        try:
            dims.append(Dim(
                name=entry["name"], kind=entry["kind"],
                low=entry.get("low"), high=entry.get("high"),
                categories=(tuple(entry["categories"])
                            if "categories" in entry else None),
            ))
        except KeyError as e:
            raise ParseError(f"{loc}: missing key {e}")
        except ConfigError as e:
            raise ParseError(f"{loc}: {e}")
    return HyperparamSpace(dims)


# ---------------------------------------------------------------------------
# Hyperband arithmetic


@dataclass(frozen=True)
class Bracket:
    s: int
    n_configs: int
    budget: float


_SMAX_SNAP = 1e-3


def hyperband_brackets(b_min: float, b_max: float, eta: float):
    """Brackets for s = s_max..0; sizes and budgets from the closed forms."""
    if not (b_max >= b_min > 0):
        raise ConfigError(f"need b_max >= b_min > 0, got {b_min}, {b_max}")
    if not eta > 1:
        raise ConfigError(f"need eta > 1, got {eta}")
    x = math.log(b_max / b_min) / math.log(eta)
    # budget ladders specified as rounded reals (say 16.67k..150k) miss the
    # exact power by a hair; snap before flooring
    r = round(x)
    s_max = int(r) if abs(x - r) < _SMAX_SNAP else int(math.floor(x))
    out = []
    for s in range(s_max, -1, -1):
        n = math.ceil((s_max + 1) / (s + 1) * eta ** s)
        out.append(Bracket(s, int(n), b_max * eta ** (-s)))
    return out


def sh_round(configs_with_losses, eta: float):
    """Promote the floor(|C|/eta) smallest losses; ties break on config_id."""
    pairs = list(configs_with_losses)
    if not pairs:
        raise ConfigError("sh_round needs at least one configuration")
    k = int(len(pairs) // eta)
    ranked = sorted(pairs, key=lambda p: (p[1], p[0]))
    return [cid for cid, _ in ranked[:k]]


# ---------------------------------------------------------------------------
# Trial records


@dataclass(frozen=True)
class TrialRecord:
    config_id: int
    config: tuple
    budget: float
    loss: float
    wall_time: float
    status: str  # "finished" | "failed"
    sh_run: int = 0

    def to_json(self) -> dict:
        return {
            "schema": TRIAL_SCHEMA,
            "config_id": self.config_id,
            "config": list(self.config),
            "budget": self.budget,
            "loss": self.loss if math.isfinite(self.loss) else None,
            "wall_time": self.wall_time,
            "status": self.status,
            "sh_run": self.sh_run,
        }


def write_trials(path, records, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode) as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_trials(path):
    if not os.path.exists(path):
        raise DataError(f"no trial log at {path}")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: bad JSON: {e}")
            if doc.get("schema") != TRIAL_SCHEMA:
                raise DataError(
                    f"{path}:{lineno}: trial schema {doc.get('schema')!r}, "
                    f"reader supports {TRIAL_SCHEMA}"
                )
            loss = doc["loss"]
            out.append(TrialRecord(
                config_id=doc["config_id"], config=tuple(doc["config"]),
                budget=doc["budget"],
                loss=float("inf") if loss is None else float(loss),
                wall_time=doc["wall_time"], status=doc["status"],
                sh_run=doc.get("sh_run", 0),
            ))
    return out


# ---------------------------------------------------------------------------
# Density model


class _GroupKde:
    """Product kernel over unit-cube points: truncated Gaussians per
    continuous dim, category-smoothing per categorical dim.

    Bandwidths follow Scott's formula sigma * n^(-1/(d+4)) with sigma
    the per-dim spread of the whole budget's observations rather than of
    this group alone.  The good group is only a handful of points; its
    own spread collapses once the sampler proposes near-duplicates, and
    spike-width kernels would then freeze the search on the first decent
    configuration.  The population spread keeps proposal widths tied to
    the scale the search actually covers.
    """

    def __init__(self, points: np.ndarray, space: HyperparamSpace,
                 sigma: np.ndarray):
        self.points = points
        self.space = space
        n, d = points.shape
        scott = n ** (-1.0 / (d + 4))
        self.bandwidths = np.empty(d)
        for j, dim in enumerate(space.dims):
            if dim.kind == "categorical":
                self.bandwidths[j] = min(max(scott, BANDWIDTH_FLOOR), 0.9)
            else:
                self.bandwidths[j] = max(sigma[j] * scott, BANDWIDTH_FLOOR)

    def density(self, u: np.ndarray) -> np.ndarray:
        """Density at unit-cube rows u (m, d)."""
        u = np.atleast_2d(u)
        m = u.shape[0]
        n = self.points.shape[0]
        prod = np.ones((m, n))
        for j, dim in enumerate(self.space.dims):
            h = self.bandwidths[j]
            if dim.kind == "categorical":
                k = dim.n_categories
                lam = h
                cu = np.floor(u[:, j] * k).clip(0, k - 1)
                cp = np.floor(self.points[:, j] * k).clip(0, k - 1)
                same = cu[:, None] == cp[None, :]
                # piecewise-constant density on [0,1]: probability times k
                prod *= np.where(same, (1.0 - lam), lam / max(k - 1, 1)) * k
            else:
                z = (u[:, j][:, None] - self.points[:, j][None, :]) / h
                pdf = np.exp(-0.5 * z * z) / (h * math.sqrt(2.0 * math.pi))
                mass = 0.5 * (erf((1.0 - self.points[:, j]) / (h * math.sqrt(2)))
                              - erf((-self.points[:, j]) / (h * math.sqrt(2))))
                prod *= pdf / np.maximum(mass[None, :], 1e-12)
        return prod.mean(axis=1)

    def sample(self, rng, widen: float = 1.0) -> np.ndarray:
        """Draw one point: pick a kernel, perturb dim-wise within [0,1]."""
        i = int(rng.integers(self.points.shape[0]))
        center = self.points[i]
        out = np.empty(self.space.d)
        for j, dim in enumerate(self.space.dims):
            h = self.bandwidths[j] * widen
            if dim.kind == "categorical":
                k = dim.n_categories
                lam = self.bandwidths[j]
                idx = int(center[j] * k)
                if k > 1 and rng.uniform() < lam:
                    others = [c for c in range(k) if c != idx]
                    idx = others[int(rng.integers(len(others)))]
                out[j] = (idx + 0.5) / k
            else:
                v = center[j] + h * rng.normal()
                for _ in range(50):
                    if 0.0 <= v <= 1.0:
                        break
                    v = center[j] + h * rng.normal()
                out[j] = min(max(v, 0.0), 1.0)
        return out


@dataclass(frozen=True)
class KdePair:
    good: _GroupKde
    bad: _GroupKde

    def ratio(self, u: np.ndarray) -> np.ndarray:
        return self.good.density(u) / np.maximum(self.bad.density(u), 1e-32)


def min_points(space: HyperparamSpace) -> int:
    return space.d + 2


def fit_kdes(records, space: HyperparamSpace, gamma: float = GAMMA):
    """Good/bad densities from one budget's records, or None if too few.

    The good set is the best ceil(gamma * n) trials, floored at d + 1
    points so the density never collapses to a single spike (the d + 2
    minimum leaves at least one trial for the bad side).  Failed trials
    carry loss = +inf, sort last, and land in the bad density, which
    steers sampling away from crashing regions.  Both densities share
    per-dim spread estimates taken over all of the budget's records; see
    _GroupKde for why.
    """
    records = list(records)
    n = len(records)
    if sum(1 for r in records if math.isfinite(r.loss)) < min_points(space):
        return None
    ranked = sorted(records, key=lambda r: (r.loss, r.config_id))
    n_good = min(max(space.d + 1, math.ceil(gamma * n)), n - 1)
    pts = np.stack([space.to_unit(r.config) for r in ranked])
    sigma = pts.std(axis=0)
    good = pts[:n_good]
    bad = pts[n_good:]
    return KdePair(_GroupKde(good, space, sigma), _GroupKde(bad, space, sigma))


def sample_config(history_by_rung: dict, space: HyperparamSpace, rng,
                  rho: float = RHO, n_samples: int = N_SAMPLES,
                  widen: float = BANDWIDTH_WIDEN, gamma: float = GAMMA) -> tuple:
    """One configuration: uniform with probability rho, else model-based.

    The model is the KDE pair of the largest budget (smallest rung) with
    enough observations; candidates drawn from the widened good density
    are ranked by the density ratio.  No model means uniform.
    """
    model = None
    if rng.uniform() >= rho:
        for rung in sorted(history_by_rung):
            model = fit_kdes(history_by_rung[rung], space, gamma)
            if model is not None:
                break
    if model is None:
        return space.sample_uniform(rng)
    cands = np.stack([model.good.sample(rng, widen) for _ in range(n_samples)])
    scores = model.ratio(cands)
    return space.from_unit(cands[int(np.argmax(scores))])


# ---------------------------------------------------------------------------
# Worker protocol: length-prefixed JSON over a byte stream


def encode_message(doc: dict) -> bytes:
    body = json.dumps(doc, sort_keys=True).encode("utf-8")
    return struct.pack(">I", len(body)) + body


def write_message(stream, doc: dict) -> None:
    stream.write(encode_message(doc))
    stream.flush()


def read_message(stream):
    header = stream.read(4)
    if not header:
        return None
    if len(header) < 4:
        raise DataError("worker stream truncated inside a message header")
    (length,) = struct.unpack(">I", header)
    body = stream.read(length)
    if len(body) < length:
        raise DataError("worker stream truncated inside a message body")
    return json.loads(body.decode("utf-8"))


def worker_serve(reader, writer, objective) -> None:
    """Evaluate {"eval": ...} messages until shutdown or stream end."""
    while True:
        msg = read_message(reader)
        if msg is None or "shutdown" in msg:
            return
        ev = msg["eval"]
        try:
            loss = float(objective(tuple(ev["config"]), ev["budget"], ev["seed"]))
            status = "finished" if math.isfinite(loss) else "failed"
        except Exception:
            loss, status = float("inf"), "failed"
        write_message(writer, {"result": {
            "config_id": ev["config_id"],
            "loss": loss if math.isfinite(loss) else None,
            "status": status,
        }})


class _WorkerPool:
    """Threaded evaluators behind real byte streams (socketpair per worker)."""

    def __init__(self, objective, workers: int):
        self.workers = []
        for _ in range(workers):
            ours, theirs = socket.socketpair()
            reader, writer = theirs.makefile("rb"), theirs.makefile("wb")
            t = threading.Thread(target=worker_serve,
                                 args=(reader, writer, objective), daemon=True)
            t.start()
            self.workers.append({
                "read": ours.makefile("rb"), "write": ours.makefile("wb"),
                "thread": t, "sockets": (ours, theirs),
            })

    def evaluate(self, evals):
        """Round-robin dispatch; merge results in arrival order per worker."""
        buckets = [evals[i::len(self.workers)] for i in range(len(self.workers))]
        for w, bucket in zip(self.workers, buckets):
            for ev in bucket:
                write_message(w["write"], {"eval": ev})
        results = {}
        for w, bucket in zip(self.workers, buckets):
            for _ in bucket:
                msg = read_message(w["read"])
                res = msg["result"]
                loss = res["loss"]
                results[res["config_id"]] = (
                    float("inf") if loss is None else float(loss), res["status"])
        return results

    def shutdown(self):
        for w in self.workers:
            try:
                write_message(w["write"], {"shutdown": True})
            except (OSError, ValueError):
                pass
        for w in self.workers:
            w["thread"].join(timeout=5)
            for s in w["sockets"]:
                s.close()


# ---------------------------------------------------------------------------
# Scheduler


@dataclass
class BohbResult:
    incumbent_config: tuple | None
    incumbent_loss: float
    records: list
    total_budget: float
    b_max: float


def _evaluate_direct(objective, evals):
    results = {}
    for ev in evals:
        try:
            loss = float(objective(tuple(ev["config"]), ev["budget"], ev["seed"]))
            status = "finished" if math.isfinite(loss) else "failed"
        except Exception:
            loss, status = float("inf"), "failed"
        results[ev["config_id"]] = (
            loss if math.isfinite(loss) else float("inf"), status)
    return results


def run_bohb(objective, space: HyperparamSpace, b_min: float, b_max: float,
             eta: float, n_iterations: int, workers: int = 1, seed: int = 0,
             log_path=None, rho: float = RHO, gamma: float = GAMMA,
             n_samples: int = N_SAMPLES, widen: float = BANDWIDTH_WIDEN) -> BohbResult:
    """Cycle Hyperband brackets with model-based sampling.

    ``objective(config, budget, seed) -> loss``; failures score +inf and
    the run continues.  With one worker everything is synchronous and the
    trial log is deterministic (wall_time is then the cumulative consumed
    budget; with a pool it is elapsed seconds).
    """
    if n_iterations < 1:
        raise ConfigError(f"need at least one iteration, got {n_iterations}")
    if workers < 1:
        raise ConfigError(f"need at least one worker, got {workers}")
    brackets = hyperband_brackets(b_min, b_max, eta)
    rng = np.random.default_rng([seed, 0xB0B])
    pool = _WorkerPool(objective, workers) if workers > 1 else None
    t0 = time.monotonic()

    history: dict[int, list] = {}
    records: list[TrialRecord] = []
    consumed = 0.0
    next_id = 0
    if log_path:
        open(log_path, "w").close()  # truncate; records appended per round
    try:
        for it in range(n_iterations):
            bracket = brackets[it % len(brackets)]
            current = []
            for _ in range(bracket.n_configs):
                cfg = sample_config(history, space, rng, rho, n_samples,
                                    widen, gamma)
                current.append((next_id, cfg))
                next_id += 1
            for r in range(bracket.s + 1):
                rung = bracket.s - r  # budget = b_max * eta^-rung
                budget = b_max * eta ** (-rung)
                evals = [{"config_id": cid, "config": list(cfg),
                          "budget": budget,
                          "seed": int(rng.integers(2 ** 31))}
                         for cid, cfg in current]
                if pool is None:
                    results = _evaluate_direct(objective, evals)
                else:
                    results = pool.evaluate(evals)
                round_records = []
                for cid, cfg in current:
                    loss, status = results[cid]
                    consumed += budget
                    wall = (consumed if pool is None
                            else time.monotonic() - t0)
                    rec = TrialRecord(cid, tuple(cfg), budget, loss, wall,
                                      status, sh_run=it)
                    round_records.append(rec)
                    history.setdefault(rung, []).append(rec)
                records.extend(round_records)
                if log_path:
                    write_trials(log_path, round_records, append=True)
                if r == bracket.s:
                    break
                promoted = set(sh_round([(cid, results[cid][0])
                                         for cid, _ in current], eta))
                current = [(cid, cfg) for cid, cfg in current if cid in promoted]
                if not current:
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    best_cfg, best_loss = None, float("inf")
    for rec in records:
        if (rec.status == "finished" and rec.budget == b_max
                and rec.loss < best_loss):
            best_cfg, best_loss = rec.config, rec.loss
    return BohbResult(best_cfg, best_loss, records, consumed, b_max)


def incumbent_trajectory(records, budget: float | None = None):
    """Running minimum of finished losses ordered by wall time.

    Returns {budget: [(wall_time, best_so_far), ...]}; pass ``budget`` to
    get that single trajectory as a list.
    """
    out: dict[float, list] = {}
    by_budget: dict[float, list] = {}
    for rec in records:
        if rec.status != "finished":
            continue
        by_budget.setdefault(rec.budget, []).append(rec)
    for b, recs in by_budget.items():
        best = float("inf")
        traj = []
        for rec in sorted(recs, key=lambda r: r.wall_time):
            best = min(best, rec.loss)
            traj.append((rec.wall_time, best))
        out[b] = traj
    if budget is not None:
        return out.get(budget, [])
    return out


# ---------------------------------------------------------------------------
# Synthetic objective for tests and the CLI's --synthetic mode


def make_synthetic_objective(b_max: float, optimum=(0.3, 0.6), noise: float = 0.05):
    """Quadratic bowl with budget-scaled noise; exact at full budget."""

    def objective(config, budget, seed) -> float:
        x = np.asarray(config, dtype=float)
        base = float(np.sum((x - np.asarray(optimum[:len(x)])) ** 2))
        frac = max(b_max / budget - 1.0, 0.0)
        if frac == 0.0:
            return base
        rng = np.random.default_rng([int(seed) & 0x7FFFFFFF])
        return base + noise * math.sqrt(frac) * float(rng.normal())

    return objective
