"""Hyperparameter importance from trial records via a forest surrogate.

A small regression forest is fit to (config, loss) pairs from one
budget.  Each hyperparameter's importance is the fraction of the
forest's variance explained by its marginal: for every tree, the
configuration space is a box partition, so marginalizing all other
dimensions is an exact volume-weighted average over leaves rather than
a sampling estimate.  Pairwise interaction fractions and the remaining
higher-order mass are computed the same way, and per tree the pieces
sum to the tree's total variance exactly, which keeps the reported
fractions honest.

Continuous and integer dimensions live in unit coordinates (the same
mapping the hyperparameter search samples in), categorical dimensions
are handled natively with category-subset splits.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .bohb import HyperparamSpace
from .errors import ConfigError, DataError

N_TREES = 16
GRID_POINTS = 32
MIN_TRIALS = 8
REPORT_SCHEMA = 1


# ---------------------------------------------------------------------------
# Trees


@dataclass(frozen=True)
class Leaf:
    """One cell of a tree's box partition.

    `lows`/`highs` bound the non-categorical dims (half open, [low, high)
    except at the domain top), `cats` holds the allowed index set per
    categorical dim and None elsewhere.  `value` is the mean loss of the
    training points in the cell and `count` how many there were.
    """

    lows: tuple
    highs: tuple
    cats: tuple
    value: float
    count: int

    def contains(self, u) -> bool:
        for j, c in enumerate(self.cats):
            if c is not None:
                if int(round(u[j])) not in c:
                    return False
            elif not (self.lows[j] <= u[j] < self.highs[j]
                      or (self.highs[j] == 1.0 and u[j] == 1.0)):
                return False
        return True


class RegressionTree:
    """A box partition with a constant value per cell."""

    def __init__(self, leaves: list):
        if not leaves:
            raise ConfigError("a tree needs at least one leaf")
        self.leaves = list(leaves)

    def predict(self, u) -> float:
        hits = [lf.value for lf in self.leaves if lf.contains(u)]
        if len(hits) != 1:
            raise ConfigError(f"point hit {len(hits)} leaves, partition broken")
        return hits[0]


class RegressionForest:
    """Bootstrap-fit trees over one budget's trials; predicts their mean."""

    def __init__(self, trees: list, space: HyperparamSpace):
        self.trees = list(trees)
        self.space = space

    def predict(self, config) -> float:
        u = self.space.to_unit(config)
        v = _to_tree_coords(u, self.space)
        return float(np.mean([t.predict(v) for t in self.trees]))


def _to_tree_coords(u, space: HyperparamSpace) -> np.ndarray:
    """Unit coords, except categoricals become their category index."""
    v = np.asarray(u, dtype=float).copy()
    for j, dim in enumerate(space.dims):
        if dim.kind == "categorical":
            v[j] = math.floor(min(u[j], 1.0 - 1e-12) * dim.n_categories)
    return v


def _best_split(xs, ys, is_cat, n_cats):
    """Best (threshold or subset, sse_after) for one dim, or None.

    Continuous dims try midpoints between adjacent distinct values,
    categorical dims try prefix subsets of categories ordered by mean
    loss (optimal for a variance criterion).  Targets are centered first
    so split choices do not drift under affine loss rescaling.
    """
    ys = ys - ys.mean()
    if is_cat:
        cats = np.unique(xs.astype(int))
        if len(cats) < 2:
            return None
        means = [(ys[xs.astype(int) == c].mean(), c) for c in cats]
        order = [c for _, c in sorted(means)]
        best = None
        for k in range(1, len(order)):
            left = np.isin(xs.astype(int), order[:k])
            sse = _sse(ys[left]) + _sse(ys[~left])
            if best is None or sse < best[1]:
                best = (frozenset(order[:k]), sse)
        return best
    order = np.argsort(xs, kind="stable")
    xs, ys = xs[order], ys[order]
    distinct = np.nonzero(np.diff(xs) > 0)[0]
    if len(distinct) == 0:
        return None
    n = len(ys)
    csum = np.cumsum(ys)
    csq = np.cumsum(ys * ys)
    best = None
    for i in distinct:
        nl = i + 1
        sse_l = csq[i] - csum[i] ** 2 / nl
        sse_r = (csq[-1] - csq[i]) - (csum[-1] - csum[i]) ** 2 / (n - nl)
        sse = sse_l + sse_r
        if best is None or sse < best[1]:
            best = (0.5 * (xs[i] + xs[i + 1]), sse)
    return best


def _sse(ys) -> float:
    return float(((ys - ys.mean()) ** 2).sum()) if len(ys) else 0.0


def _grow(pts, ys, space, rng, lows, highs, cats, leaves):
    d = space.d
    sse_here = _sse(ys)
    # targets arrive standardized, so anything below n * 1e-24 is
    # cancellation residue; treating it as spread would consume rng draws
    # in a data-scale-dependent way and break rescaling invariance
    if sse_here > len(ys) * 1e-24:
        m = max(1, math.ceil(d / 3))
        split = None
        for j in rng.permutation(d)[:m]:
            dim = space.dims[j]
            is_cat = dim.kind == "categorical"
            cand = _best_split(pts[:, j], ys, is_cat,
                               dim.n_categories if is_cat else 0)
            if cand is not None and cand[1] < sse_here:
                if split is None or cand[1] < split[2]:
                    split = (j, cand[0], cand[1])
        if split is not None:
            j, rule, _ = split
            if isinstance(rule, frozenset):
                mask = np.isin(pts[:, j].astype(int), sorted(rule))
                lc = cats[:j] + (frozenset(rule),) + cats[j + 1:]
                rc = cats[:j] + (cats[j] - rule,) + cats[j + 1:]
                _grow(pts[mask], ys[mask], space, rng, lows, highs, lc, leaves)
                _grow(pts[~mask], ys[~mask], space, rng, lows, highs, rc,
                      leaves)
            else:
                mask = pts[:, j] < rule
                lh = highs[:j] + (rule,) + highs[j + 1:]
                rl = lows[:j] + (rule,) + lows[j + 1:]
                _grow(pts[mask], ys[mask], space, rng, lows, lh, cats, leaves)
                _grow(pts[~mask], ys[~mask], space, rng, rl, highs, cats,
                      leaves)
            return
    leaves.append(Leaf(lows, highs, cats, float(ys.mean()), len(ys)))


def fit_forest(records, space: HyperparamSpace, n_trees: int = N_TREES,
               seed: int = 0) -> RegressionForest:
    """Bootstrap forest over finished trials; see module docstring.

    Each split considers a random ceil(d/3) subset of dims and the
    variance-minimizing cut among them; nodes split until no cut reduces
    the squared error, so leaves can hold a single point.
    """
    finished = [r for r in records if math.isfinite(r.loss)]
    if len(finished) < MIN_TRIALS:
        raise DataError(
            f"forest needs >= {MIN_TRIALS} finished trials, got {len(finished)}")
    pts = np.stack([_to_tree_coords(space.to_unit(r.config), space)
                    for r in finished])
    ys = np.array([r.loss for r in finished], dtype=float)
    # fit on standardized targets so split decisions cannot drift under
    # affine loss rescaling, then map leaf values back
    mu, sd = float(ys.mean()), float(ys.std())
    ys_n = (ys - mu) / sd if sd > 0.0 else np.zeros_like(ys)
    root_cats = tuple(
        frozenset(range(dim.n_categories)) if dim.kind == "categorical"
        else None for dim in space.dims)
    root_lows = tuple(0.0 for _ in space.dims)
    root_highs = tuple(1.0 for _ in space.dims)
    trees = []
    for child in np.random.SeedSequence([seed, 0xFA7]).spawn(n_trees):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, len(ys), size=len(ys))
        leaves: list = []
        _grow(pts[boot], ys_n[boot], space, rng, root_lows, root_highs,
              root_cats, leaves)
        trees.append(RegressionTree(
            [Leaf(lf.lows, lf.highs, lf.cats, lf.value * sd + mu, lf.count)
             for lf in leaves]))
    return RegressionForest(trees, space)


# ---------------------------------------------------------------------------
# Exact marginals


def _dim_unit(dim, value) -> float:
    """Map one raw value into the tree coordinate of its dim."""
    if dim.kind == "categorical":
        if value not in dim.categories:
            raise ConfigError(f"dim {dim.name!r}: {value!r} not a category")
        return float(dim.categories.index(value))
    if not dim.low <= value <= dim.high:
        raise ConfigError(f"dim {dim.name!r}: {value} out of bounds")
    if dim.kind == "log_uniform":
        return math.log(value / dim.low) / math.log(dim.high / dim.low)
    return (value - dim.low) / (dim.high - dim.low)


def _tree_marginal(tree: RegressionTree, space, j: int, coord: float) -> float:
    total = 0.0
    for leaf in tree.leaves:
        if leaf.cats[j] is not None:
            if int(round(coord)) not in leaf.cats[j]:
                continue
        elif not (leaf.lows[j] <= coord < leaf.highs[j]
                  or (leaf.highs[j] == 1.0 and coord == 1.0)):
            continue
        w = 1.0
        for k, c in enumerate(leaf.cats):
            if k == j:
                continue
            if c is not None:
                w *= len(c) / space.dims[k].n_categories
            else:
                w *= leaf.highs[k] - leaf.lows[k]
        total += w * leaf.value
    return total


def marginal(forest: RegressionForest, dim, value):
    """Forest-average loss at `dim = value`, all other dims integrated out.

    Exact per tree: leaves consistent with the value are averaged with
    their cell volumes over the remaining dims as weights.  Returns
    (mean over trees, variance over trees).
    """
    space = forest.space
    if isinstance(dim, str):
        names = [d.name for d in space.dims]
        if dim not in names:
            raise ConfigError(f"unknown dim {dim!r}")
        j = names.index(dim)
    else:
        j = int(dim)
        if not 0 <= j < space.d:
            raise ConfigError(f"dim index {j} out of range")
    coord = _dim_unit(space.dims[j], value)
    vals = np.array([_tree_marginal(t, space, j, coord)
                     for t in forest.trees])
    return float(vals.mean()), float(vals.var())


# ---------------------------------------------------------------------------
# Variance decomposition


def _dim_grid(dim):
    """Evaluation coords per dim: 32 points, or every category/integer."""
    if dim.kind == "categorical":
        return np.arange(dim.n_categories, dtype=float)
    if dim.kind == "integer":
        count = int(dim.high - dim.low) + 1
        if count <= GRID_POINTS:
            vals = np.arange(count, dtype=float)
            return vals / max(count - 1, 1)
    return np.linspace(0.0, 1.0, GRID_POINTS)


def _leaf_grid_probs(tree, space, grids):
    """Per dim: indicator (grid x leaf) and per-leaf grid mass."""
    ind, probs = [], []
    for j, dim in enumerate(space.dims):
        g = grids[j]
        a = np.empty((len(g), len(tree.leaves)), dtype=float)
        for l, leaf in enumerate(tree.leaves):
            if leaf.cats[j] is not None:
                allowed = np.array(sorted(leaf.cats[j]), dtype=float)
                a[:, l] = np.isin(g, allowed)
            else:
                inside = (leaf.lows[j] <= g) & (g < leaf.highs[j])
                if leaf.highs[j] == 1.0:
                    inside |= g == 1.0
                a[:, l] = inside
        ind.append(a)
        probs.append(a.mean(axis=0))
    return ind, probs


def _tree_fractions(tree, space, grids):
    """(total variance, {key: variance share}) under the grid measure.

    Keys are dim indices for individual terms, (i, j) tuples for pairs,
    and "higher" for everything beyond; the values sum to the total
    exactly, which is the fANOVA identity on a finite product grid.
    """
    ind, probs = _leaf_grid_probs(tree, space, grids)
    vals = np.array([lf.value for lf in tree.leaves])
    d = space.d
    w = np.ones(len(vals))
    for p in probs:
        w = w * p
    mu = float(w @ vals)
    total = float(w @ (vals - mu) ** 2)
    parts = {}
    singles = np.zeros(d)
    for i in range(d):
        rest = w / np.where(probs[i] == 0.0, 1.0, probs[i])
        rest[probs[i] == 0.0] = 0.0
        m = ind[i] @ (rest * vals)
        singles[i] = float(((m - mu) ** 2).mean())
        parts[i] = singles[i]
    for i in range(d):
        for j in range(i + 1, d):
            pij = probs[i] * probs[j]
            rest = w / np.where(pij == 0.0, 1.0, pij)
            rest[pij == 0.0] = 0.0
            m = np.einsum("ul,vl,l->uv", ind[i], ind[j], rest * vals)
            raw = float(((m - mu) ** 2).mean())
            parts[(i, j)] = raw - singles[i] - singles[j]
    parts["higher"] = total - sum(parts.values())
    return total, parts


@dataclass(frozen=True)
class ImportanceReport:
    """Variance shares per dim plus marginal curves.

    `individual` maps dim name to its average share of per-tree
    variance; `pairwise` and `higher_order` hold the interaction detail.
    `per_tree` keeps each contributing tree's full share table (summing
    to 1) and `curves` the forest marginal (values, mean, std) per dim.
    `zero_variance` flags a constant forest, where every share is 0.
    """

    individual: dict
    pairwise: dict
    higher_order: float
    per_tree: list
    curves: dict
    total_variance: float
    zero_variance: bool


def importance(forest: RegressionForest, space: HyperparamSpace
               ) -> ImportanceReport:
    """Share of loss variance explained by each hyperparameter alone.

    Per tree, the share of dim i is the variance of its exact marginal
    over a per-dim grid divided by the tree's total variance; shares are
    averaged over trees with nonzero variance.
    """
    if [d.name for d in space.dims] != [d.name for d in forest.space.dims]:
        raise ConfigError("space does not match the fitted forest")
    grids = [_dim_grid(dim) for dim in space.dims]
    per_tree, totals = [], []
    for tree in forest.trees:
        total, parts = _tree_fractions(tree, space, grids)
        totals.append(total)
        if total > 0.0:
            per_tree.append({k: v / total for k, v in parts.items()})
    d = space.d
    names = [dim.name for dim in space.dims]
    if not per_tree:
        individual = {n: 0.0 for n in names}
        pairwise = {(names[i], names[j]): 0.0
                    for i in range(d) for j in range(i + 1, d)}
        return ImportanceReport(individual, pairwise, 0.0, [],
                                _curves(forest, grids), 0.0, True)
    individual = {names[i]: float(np.mean([t[i] for t in per_tree]))
                  for i in range(d)}
    pairwise = {(names[i], names[j]):
                float(np.mean([t[(i, j)] for t in per_tree]))
                for i in range(d) for j in range(i + 1, d)}
    higher = float(np.mean([t["higher"] for t in per_tree]))
    return ImportanceReport(individual, pairwise, higher, per_tree,
                            _curves(forest, grids), float(np.mean(totals)),
                            False)


def _curves(forest: RegressionForest, grids) -> dict:
    out = {}
    for j, dim in enumerate(forest.space.dims):
        coords = grids[j]
        if dim.kind == "categorical":
            values = list(dim.categories)
        elif dim.kind == "log_uniform":
            values = [dim.low * (dim.high / dim.low) ** u for u in coords]
        elif dim.kind == "integer":
            values = [int(round(dim.low + u * (dim.high - dim.low)))
                      for u in coords]
        else:
            values = [dim.low + u * (dim.high - dim.low) for u in coords]
        per_tree = np.array(
            [[_tree_marginal(t, forest.space, j, u) for u in coords]
             for t in forest.trees])
        out[dim.name] = {
            "values": values,
            "mean": per_tree.mean(axis=0).tolist(),
            "std": per_tree.std(axis=0).tolist(),
        }
    return out


# ---------------------------------------------------------------------------
# Report output


def report_to_json(report: ImportanceReport) -> str:
    doc = {
        "schema": REPORT_SCHEMA,
        "zero_variance": report.zero_variance,
        "total_variance": report.total_variance,
        "individual": report.individual,
        "pairwise": [{"dims": list(k), "fraction": v}
                     for k, v in sorted(report.pairwise.items())],
        "higher_order": report.higher_order,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def curves_to_csv(report: ImportanceReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dim", "value", "mean", "std"])
        for name, curve in sorted(report.curves.items()):
            for v, m, s in zip(curve["values"], curve["mean"], curve["std"]):
                writer.writerow([name, v, m, s])
