"""Cell DAGs, their continuous relaxation, and discretization to genotypes.

A cell is a small DAG: input nodes (2 for normal/reduction cells, 4 for
upsampling cells), ``num_intermediate`` intermediate nodes, and an output
that concatenates the intermediates along channels.  During search every
edge carries a mixed operation, a softmax-weighted sum of all 8
candidates; the weights come from a per-cell-kind ``AlphaSet`` shared
across all cells of that kind.  Discretization keeps the k strongest
incoming edges per node and the argmax non-Zero op on each.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError, ShapeError
from .ops import (
    OP_BY_NAME,
    OP_NAMES,
    CandidateOpKind,
    OpInstance,
    apply_candidate,
    make_op,
)
from .tensor import (
    ConvSpec,
    Tensor,
    add,
    bilinear_resize,
    concat_channels,
    conv2d,
    record,
    softmax_vec,
    tensor,
    transposed_conv2d,
)

__all__ = [
    "CellKind",
    "CellTemplate",
    "AlphaSet",
    "Genotype",
    "mixed_op_forward",
    "cell_forward",
    "edge_strength",
    "discretize",
    "sample_random_genotype",
    "genotype_to_json",
    "genotype_from_json",
    "make_cell_bank",
    "make_discrete_cell_bank",
    "CellBank",
    "DiscreteCellBank",
]

NUM_OPS = 8


class CellKind(Enum):
    NORMAL = "normal"
    REDUCTION = "reduction"
    UPSAMPLING = "upsampling"

    @property
    def arity(self) -> int:
        return 4 if self is CellKind.UPSAMPLING else 2


@dataclass(frozen=True)
class CellTemplate:
    """Topology of one cell kind.

    Nodes are indexed absolutely: 0..arity-1 are inputs, the next
    ``num_intermediate`` are intermediates.  Every intermediate node j has
    a candidate edge from each node i < j.  Upsampling inputs are, in
    order: previous cell, cell before that, previous disparity
    prediction, and the encoder skip connection.
    """

    kind: CellKind
    num_intermediate: int = 3

    def __post_init__(self):
        if self.num_intermediate < 1:
            raise ConfigError("cell needs at least one intermediate node")

    @property
    def arity(self) -> int:
        return self.kind.arity

    @property
    def num_nodes(self) -> int:
        return self.arity + self.num_intermediate

    def node_edges(self, j: int) -> list[tuple[int, int]]:
        """Candidate incoming edges of intermediate node j (absolute index)."""
        if not self.arity <= j < self.num_nodes:
            raise ConfigError(f"node {j} is not an intermediate node")
        return [(i, j) for i in range(j)]

    @property
    def edges(self) -> list[tuple[int, int]]:
        out = []
        for j in range(self.arity, self.num_nodes):
            out.extend(self.node_edges(j))
        return out


class AlphaSet:
    """Architecture parameters: one alpha vector (length 8) per edge per kind.

    Shared across all cells of the same kind.  Each vector is stored as a
    (1,1,1,8) tensor so mixed operations can push gradients into it
    through the tape.  ``temperature`` scales the softmax.
    """

    def __init__(self, templates: dict[CellKind, CellTemplate], temperature: float = 1.0):
        if temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {temperature}")
        self.templates = dict(templates)
        self.temperature = float(temperature)
        self.alphas: dict[CellKind, dict[tuple[int, int], Tensor]] = {}
        for kind, tpl in self.templates.items():
            if tpl.kind is not kind:
                raise ConfigError(f"template kind {tpl.kind} filed under {kind}")
            self.alphas[kind] = {
                e: Tensor(np.zeros((1, 1, 1, NUM_OPS)), requires_grad=True)
                for e in tpl.edges
            }

    def get(self, kind: CellKind, edge: tuple[int, int]) -> Tensor:
        try:
            return self.alphas[kind][edge]
        except KeyError:
            raise ConfigError(f"no alpha for kind={kind.value}, edge={edge}") from None

    def params(self) -> list[Tensor]:
        return [a for per_kind in self.alphas.values() for a in per_kind.values()]

    def snapshot(self) -> dict:
        return {
            kind.value: {f"{i},{j}": a.data.ravel().tolist() for (i, j), a in per.items()}
            for kind, per in self.alphas.items()
        }


# ---------------------------------------------------------------------------
# Mixed operation (continuous relaxation)


def mixed_op_forward(edge: tuple[int, int], x: Tensor, alphas: AlphaSet,
                     kind: CellKind, ops: Sequence[OpInstance]) -> Tensor:
    """Softmax-weighted sum of all candidate op outputs on one edge.

    Gradients flow both into each op's path and into the edge's alpha
    vector (through the softmax Jacobian, scaled by 1/temperature).
    """
    if len(ops) != NUM_OPS:
        raise ConfigError(f"edge {edge} op bank has {len(ops)} entries, need {NUM_OPS}")
    alpha = alphas.get(kind, edge)
    tau = alphas.temperature
    w = softmax_vec(alpha.data.ravel(), tau)
    ys = [apply_candidate(op, x) for op in ops]
    ref = ys[0].shape
    for op, y in zip(ops, ys):
        if y.shape != ref:
            raise ShapeError(f"candidate {op.kind.name} produced {y.shape}, expected {ref}")
    out = Tensor(sum(wo * y.data for wo, y in zip(w, ys)))

    def bwd(g):
        dldw = np.array([(g * y.data).sum() for y in ys])
        galpha = (w * (dldw - float(w @ dldw)) / tau).reshape(1, 1, 1, NUM_OPS)
        return (galpha,) + tuple(wo * g for wo in w)

    return record(out, (alpha,) + tuple(ys), bwd)


# ---------------------------------------------------------------------------
# Cell parameter banks


def _proj_1x1(c_in: int, c_out: int, rng: np.random.Generator,
              stride: int = 1) -> tuple[ConvSpec, Tensor]:
    spec = ConvSpec((c_out, c_in, 1, 1), stride=stride)
    std = np.sqrt(2.0 / c_in)
    return spec, Tensor(rng.normal(0.0, std, size=spec.kernel), requires_grad=True)


def _lift_tconv(c_in: int, c_out: int, rng: np.random.Generator) -> tuple[ConvSpec, Tensor]:
    spec = ConvSpec((c_in, c_out, 4, 4), stride=2, padding=1)
    std = np.sqrt(2.0 / (c_in * 4))
    return spec, Tensor(rng.normal(0.0, std, size=spec.kernel), requires_grad=True)


@dataclass
class CellBank:
    """Weights for one relaxed cell: input preprocessing + 8 ops per edge."""

    template: CellTemplate
    channels: int
    pre: list[tuple]  # per input: ("identity",) | ("proj",spec,w) | ("tconv",spec,w) | ("pred",spec,w)
    edge_ops: dict[tuple[int, int], tuple[OpInstance, ...]]

    def params(self) -> list[Tensor]:
        out = []
        for entry in self.pre:
            if entry[0] != "identity":
                out.append(entry[2])
        for ops in self.edge_ops.values():
            for op in ops:
                out.extend(op.params())
        return out


def _edge_stride(template: CellTemplate, edge: tuple[int, int]) -> int:
    # reduction halves resolution via stride 2 on edges sourced at inputs
    if template.kind is CellKind.REDUCTION and edge[0] < template.arity:
        return 2
    return 1


def _make_pre(template: CellTemplate, channels: int, in_channels: Sequence[int],
              rng: np.random.Generator) -> list[tuple]:
    if len(in_channels) != template.arity:
        raise ConfigError(
            f"{template.kind.value} cell takes {template.arity} inputs, "
            f"got {len(in_channels)} channel counts"
        )
    pre: list[tuple] = []
    if template.kind is CellKind.UPSAMPLING:
        # inputs 0,1 lifted x2 by transposed conv; input 2 (prediction) by
        # bilinear then 1x1 projection; input 3 (skip) arrives at target
        # resolution and only needs channel alignment
        for idx in (0, 1):
            spec, w = _lift_tconv(in_channels[idx], channels, rng)
            pre.append(("tconv", spec, w))
        spec, w = _proj_1x1(in_channels[2], channels, rng)
        pre.append(("pred", spec, w))
        if in_channels[3] == channels:
            pre.append(("identity",))
        else:
            spec, w = _proj_1x1(in_channels[3], channels, rng)
            pre.append(("proj", spec, w))
    else:
        for c_in in in_channels:
            if c_in == channels:
                pre.append(("identity",))
            else:
                spec, w = _proj_1x1(c_in, channels, rng)
                pre.append(("proj", spec, w))
    return pre


def make_cell_bank(template: CellTemplate, channels: int, in_channels: Sequence[int],
                   rng: np.random.Generator, affine: bool = False) -> CellBank:
    pre = _make_pre(template, channels, in_channels, rng)
    edge_ops = {}
    for e in template.edges:
        stride = _edge_stride(template, e)
        edge_ops[e] = tuple(
            make_op(kind, channels, stride=stride, rng=rng, affine=affine)
            for kind in CandidateOpKind
        )
    return CellBank(template, channels, pre, edge_ops)


def _apply_pre(pre: tuple, x: Tensor) -> Tensor:
    tag = pre[0]
    if tag == "identity":
        return x
    if tag == "proj":
        return conv2d(x, pre[1], pre[2])
    if tag == "tconv":
        return transposed_conv2d(x, pre[1], pre[2])
    if tag == "pred":
        return conv2d(bilinear_resize(x, 2), pre[1], pre[2])
    raise ConfigError(f"unknown preprocessing tag {tag!r}")


def cell_forward(bank: CellBank, inputs: Sequence[Tensor], alphas: AlphaSet) -> Tensor:
    """Relaxed cell: every node sums mixed ops over all predecessors.

    Returns the channel concatenation of the intermediate nodes
    (num_intermediate x channels).
    """
    tpl = bank.template
    if len(inputs) != tpl.arity:
        raise ShapeError(f"{tpl.kind.value} cell takes {tpl.arity} inputs, got {len(inputs)}")
    states = [_apply_pre(p, x) for p, x in zip(bank.pre, inputs)]
    ref = states[0].shape
    for s in states[1:]:
        if s.shape[2:] != ref[2:]:
            raise ShapeError(
                f"cell inputs disagree on resolution after preprocessing: "
                f"{[t.shape for t in states]}"
            )
    for j in range(tpl.arity, tpl.num_nodes):
        acc = None
        for e in tpl.node_edges(j):
            y = mixed_op_forward(e, states[e[0]], alphas, tpl.kind, bank.edge_ops[e])
            acc = y if acc is None else add(acc, y)
        states.append(acc)
    return concat_channels(states[tpl.arity:])


# ---------------------------------------------------------------------------
# Edge strength and discretization


def edge_strength(alphas: AlphaSet, kind: CellKind, edge: tuple[int, int]) -> float:
    """Max softmax weight over the non-Zero candidates of one edge."""
    w = softmax_vec(alphas.get(kind, edge).data.ravel(), alphas.temperature)
    return float(w[1:].max())  # ordinal 0 is Zero


@dataclass(frozen=True)
class Genotype:
    """A discretized architecture: per kind, k retained edges per node."""

    cells: dict  # CellKind -> list (per intermediate node) of list of (src, CandidateOpKind)
    meta: dict = field(default_factory=dict)

    @property
    def num_intermediate(self) -> int:
        return len(next(iter(self.cells.values())))

    def validate(self, k: int = 2) -> None:
        if not self.cells:
            raise ConfigError("genotype has no cells")
        for kind, nodes in self.cells.items():
            arity = kind.arity
            for pos, chosen in enumerate(nodes):
                if len(chosen) != k:
                    raise ConfigError(
                        f"{kind.value} node {pos} keeps {len(chosen)} edges, want {k}"
                    )
                node_abs = arity + pos
                for src, op in chosen:
                    if not 0 <= src < node_abs:
                        raise ConfigError(
                            f"{kind.value} node {pos}: source {src} does not precede it"
                        )
                    if op == CandidateOpKind.ZERO:
                        raise ConfigError(f"{kind.value} node {pos} retains Zero")


def discretize(alphas: AlphaSet, k: int = 2, meta: dict | None = None) -> Genotype:
    """Keep the k strongest incoming edges per node, argmax non-Zero op each.

    Ties break deterministically: lower source index for edges, lower op
    ordinal for operations.
    """
    cells = {}
    for kind, tpl in alphas.templates.items():
        nodes = []
        for j in range(tpl.arity, tpl.num_nodes):
            cand = tpl.node_edges(j)
            if len(cand) < k:
                raise ConfigError(
                    f"{kind.value} node {j} has {len(cand)} candidate edges, need >= {k}"
                )
            ranked = sorted(cand, key=lambda e: (-edge_strength(alphas, kind, e), e[0]))
            chosen = []
            for e in sorted(ranked[:k], key=lambda e: e[0]):
                w = softmax_vec(alphas.get(kind, e).data.ravel(), alphas.temperature)
                best = int(np.argmax(w[1:])) + 1  # excludes Zero; argmax takes first on ties
                chosen.append((e[0], CandidateOpKind(best)))
            nodes.append(chosen)
        cells[kind] = nodes
    g = Genotype(cells, dict(meta or {}))
    g.validate(k)
    return g


def sample_random_genotype(templates: dict[CellKind, CellTemplate], seed: int,
                           k: int = 2, meta: dict | None = None) -> Genotype:
    """Uniform random genotype: k distinct predecessors and a non-Zero op each."""
    rng = np.random.default_rng(seed)
    non_zero = [kind for kind in CandidateOpKind if kind != CandidateOpKind.ZERO]
    cells = {}
    for kind, tpl in templates.items():
        nodes = []
        for j in range(tpl.arity, tpl.num_nodes):
            srcs = sorted(rng.choice(j, size=k, replace=False).tolist())
            nodes.append([
                (int(s), non_zero[int(rng.integers(len(non_zero)))]) for s in srcs
            ])
        cells[kind] = nodes
    g = Genotype(cells, dict(meta or {"seed": seed}))
    g.validate(k)
    return g


# ---------------------------------------------------------------------------
# Genotype JSON (schema version 1)


def genotype_to_json(g: Genotype) -> str:
    doc = {
        "version": 1,
        "cells": {
            kind.value: {
                "nodes": [
                    [{"src": int(src), "op": OP_NAMES[op]} for src, op in node]
                    for node in nodes
                ]
            }
            for kind, nodes in g.cells.items()
        },
        "meta": g.meta,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def genotype_from_json(text: str) -> Genotype:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", location=f"line {e.lineno}") from None
    if not isinstance(doc, dict):
        raise ParseError("genotype document must be an object", location="$")
    version = doc.get("version")
    if version != 1:
        raise ParseError(f"unsupported genotype version {version!r}", location="version")
    cells_doc = doc.get("cells")
    if not isinstance(cells_doc, dict) or not cells_doc:
        raise ParseError("missing or empty 'cells' object", location="cells")
    cells = {}
    for kind_name, cell_doc in cells_doc.items():
        try:
            kind = CellKind(kind_name)
        except ValueError:
            raise ParseError(f"unknown cell kind {kind_name!r}",
                             location=f"cells.{kind_name}") from None
        nodes_doc = cell_doc.get("nodes") if isinstance(cell_doc, dict) else None
        if not isinstance(nodes_doc, list) or not nodes_doc:
            raise ParseError("cell must contain a non-empty 'nodes' list",
                             location=f"cells.{kind_name}.nodes")
        nodes = []
        for ni, node in enumerate(nodes_doc):
            loc = f"cells.{kind_name}.nodes[{ni}]"
            if not isinstance(node, list):
                raise ParseError("node must be a list of edges", location=loc)
            chosen = []
            for ei, edge in enumerate(node):
                eloc = f"{loc}[{ei}]"
                if not isinstance(edge, dict) or "src" not in edge or "op" not in edge:
                    raise ParseError("edge needs 'src' and 'op'", location=eloc)
                src = edge["src"]
                if not isinstance(src, int) or isinstance(src, bool) or src < 0:
                    raise ParseError(f"bad source index {src!r}", location=f"{eloc}.src")
                op_name = edge["op"]
                if op_name not in OP_BY_NAME:
                    raise ParseError(f"unknown op name {op_name!r}", location=f"{eloc}.op")
                chosen.append((src, OP_BY_NAME[op_name]))
            nodes.append(chosen)
        cells[kind] = nodes
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise ParseError("'meta' must be an object", location="meta")
    return Genotype(cells, meta)


# ---------------------------------------------------------------------------
# Discrete cells (for derived networks)


@dataclass
class DiscreteCellBank:
    """Weights for one discretized cell: preprocessing + one op per kept edge."""

    kind: CellKind
    channels: int
    num_intermediate: int
    pre: list[tuple]
    node_ops: list[list[tuple[int, OpInstance]]]  # per node: [(src, op instance)]

    def params(self) -> list[Tensor]:
        out = []
        for entry in self.pre:
            if entry[0] != "identity":
                out.append(entry[2])
        for node in self.node_ops:
            for _, op in node:
                out.extend(op.params())
        return out


def make_discrete_cell_bank(genotype: Genotype, kind: CellKind, channels: int,
                            in_channels: Sequence[int], rng: np.random.Generator,
                            affine: bool = False) -> DiscreteCellBank:
    if kind not in genotype.cells:
        raise ConfigError(f"genotype has no {kind.value} cell")
    nodes = genotype.cells[kind]
    tpl = CellTemplate(kind, num_intermediate=len(nodes))
    pre = _make_pre(tpl, channels, in_channels, rng)
    node_ops = []
    for node in nodes:
        ops = []
        for src, op_kind in node:
            stride = 2 if (kind is CellKind.REDUCTION and src < tpl.arity) else 1
            ops.append((src, make_op(op_kind, channels, stride=stride, rng=rng,
                                     affine=affine)))
        node_ops.append(ops)
    return DiscreteCellBank(kind, channels, len(nodes), pre, node_ops)


def discrete_cell_forward(bank: DiscreteCellBank, inputs: Sequence[Tensor]) -> Tensor:
    arity = bank.kind.arity
    if len(inputs) != arity:
        raise ShapeError(f"{bank.kind.value} cell takes {arity} inputs, got {len(inputs)}")
    states = [_apply_pre(p, x) for p, x in zip(bank.pre, inputs)]
    for node in bank.node_ops:
        acc = None
        for src, op in node:
            y = apply_candidate(op, states[src])
            acc = y if acc is None else add(acc, y)
        states.append(acc)
    return concat_channels(states[arity:])
