"""Assembly of search networks, derived networks, and refinement stacks.

The skeleton is shared: a two-conv stem (7x7 then 5x5, both stride 2),
an encoder of alternating Reduction/Normal cells, and a decoder of
Upsampling cells.  The correlation variant (search net, derived "C" net)
runs stem + first reduction cell as a Siamese pair over both views and
joins them with 1-D correlation; the "S" variant is a single stream fed
with (left, right, warped right, previous disparity).

Disparity is predicted at the bottleneck and after every upsampling
cell by a plain 3x3 convolution; predictions are expressed in units of
their own resolution (full-resolution pixels divided by the scale).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .cellspace import (
    AlphaSet,
    CellKind,
    CellTemplate,
    Genotype,
    cell_forward,
    discrete_cell_forward,
    genotype_from_json,
    genotype_to_json,
    make_cell_bank,
    make_discrete_cell_bank,
)
from .errors import ConfigError, DataError, ShapeError
from .ops import correlation1d, warp_horizontal
from .tensor import (
    ConvSpec,
    Tensor,
    add,
    bilinear_resize,
    concat_channels,
    conv2d,
    relu,
    scalar_mul,
    tensor_from_bytes,
    tensor_to_bytes,
)

__all__ = [
    "SearchNetConfig",
    "DerivedNetConfig",
    "StackConfig",
    "SearchNet",
    "DerivedNet",
    "NetStack",
    "build_search_net",
    "build_derived_net",
    "build_stack",
    "save_checkpoint",
    "load_checkpoint",
]


def encoder_kinds(n: int) -> list[CellKind]:
    """Alternating cell kinds starting with a reduction."""
    return [CellKind.REDUCTION if i % 2 == 0 else CellKind.NORMAL for i in range(n)]


@dataclass(frozen=True)
class SearchNetConfig:
    c_init: int = 8
    num_encoder_cells: int = 4
    num_decoder_cells: int = 2
    num_intermediate: int = 3
    in_channels: int = 1
    max_disp: int = 8
    affine: bool = False

    def __post_init__(self):
        if self.c_init < 1 or self.num_encoder_cells < 1 or self.num_decoder_cells < 0:
            raise ConfigError(f"invalid search net config: {self}")

    @property
    def stem_factor(self) -> int:
        return 4  # two stride-2 convs

    @property
    def num_reductions(self) -> int:
        return sum(1 for k in encoder_kinds(self.num_encoder_cells)
                   if k is CellKind.REDUCTION)

    @property
    def encoder_factor(self) -> int:
        return self.stem_factor * (2 ** self.num_reductions)

    def validate_resolution(self, h: int, w: int) -> None:
        f = self.encoder_factor
        if h % f or w % f:
            raise ConfigError(
                f"input {h}x{w} not divisible by encoder factor {f}"
            )
        if h < f or w < f:
            raise ConfigError(f"input {h}x{w} smaller than encoder factor {f}")


@dataclass(frozen=True)
class DerivedNetConfig:
    c_init: int = 8
    num_encoder_cells: int = 4
    num_decoder_cells: int = 2
    siamese: bool = True  # True: correlation "C" variant; False: single-stream "S"
    in_channels: int = 1
    max_disp: int = 8
    affine: bool = False

    @property
    def stem_factor(self) -> int:
        return 4

    @property
    def num_reductions(self) -> int:
        return sum(1 for k in encoder_kinds(self.num_encoder_cells)
                   if k is CellKind.REDUCTION)

    @property
    def encoder_factor(self) -> int:
        return self.stem_factor * (2 ** self.num_reductions)

    @property
    def single_stream_channels(self) -> int:
        # left + right + warped right + previous disparity
        return 3 * self.in_channels + 1

    def validate_resolution(self, h: int, w: int) -> None:
        f = self.encoder_factor
        if h % f or w % f or h < f or w < f:
            raise ConfigError(f"input {h}x{w} incompatible with encoder factor {f}")


# ---------------------------------------------------------------------------
# Shared assembly helpers


def _conv_init(rng, spec: ConvSpec) -> Tensor:
    co, cg, kh, kw = spec.kernel
    std = np.sqrt(2.0 / (cg * kh * kw))
    return Tensor(rng.normal(0.0, std, size=spec.kernel), requires_grad=True)


class _ConvLayer:
    def __init__(self, rng, c_in, c_out, k, stride=1, pad=None):
        self.spec = ConvSpec((c_out, c_in, k, k), stride=stride,
                             padding=k // 2 if pad is None else pad)
        self.w = _conv_init(rng, self.spec)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.spec, self.w)


def _align(x: Tensor, factor_from: int, factor_to: int) -> Tensor:
    """Bring a feature map at downsampling `factor_from` to `factor_to`."""
    if factor_from == factor_to:
        return x
    return bilinear_resize(x, factor_from / factor_to)


class _Stem:
    """Two strided convolutions, 7x7 then 5x5, ReLU after each."""

    def __init__(self, rng, c_in, c_out):
        self.conv1 = _ConvLayer(rng, c_in, c_out, 7, stride=2)
        self.conv2 = _ConvLayer(rng, c_out, c_out, 5, stride=2)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.conv2(relu(self.conv1(x))))

    def params(self):
        return [self.conv1.w, self.conv2.w]


class _MixedCells:
    """Cell factory/applier for the relaxed search network."""

    def __init__(self, alphas: AlphaSet, num_intermediate: int, affine: bool):
        self.alphas = alphas
        self.num_intermediate = num_intermediate
        self.affine = affine

    def make(self, kind: CellKind, channels, in_channels, rng):
        tpl = self.alphas.templates[kind]
        return make_cell_bank(tpl, channels, in_channels, rng, affine=self.affine)

    def apply(self, bank, inputs):
        return cell_forward(bank, inputs, self.alphas)


class _DiscreteCells:
    """Cell factory/applier for derived networks."""

    def __init__(self, genotype: Genotype, affine: bool):
        self.genotype = genotype
        self.affine = affine

    def make(self, kind: CellKind, channels, in_channels, rng):
        return make_discrete_cell_bank(self.genotype, kind, channels, in_channels,
                                       rng, affine=self.affine)

    def apply(self, bank, inputs):
        return discrete_cell_forward(bank, inputs)


class _CellStage:
    """One cell plus its 1x1 compression back to `channels`."""

    def __init__(self, cells, kind, channels, in_channels, num_intermediate, rng):
        self.kind = kind
        self.channels = channels
        self.bank = cells.make(kind, channels, in_channels, rng)
        self.comp = _ConvLayer(rng, num_intermediate * channels, channels, 1)
        self._cells = cells

    def __call__(self, inputs) -> Tensor:
        return self.comp(self._cells.apply(self.bank, inputs))

    def params(self):
        return self.bank.params() + [self.comp.w]


class _Trunk:
    """Encoder trunk + multi-stage decoder shared by all network variants.

    Consumes a starting feature pair and the list of encoder-side
    features available for skip connections; produces one disparity
    prediction per decoder stage (bottleneck first).
    """

    def __init__(self, cells, rng, kinds, channels0, start_channels, num_intermediate,
                 num_decoder, start_factor, skip_specs):
        # skip_specs: list of (channels, factor) for encoder-side features,
        # in order; used to pick the skip source per decoder stage
        self.enc_stages = []
        c_prev, c_prev2 = start_channels
        f_prev = start_factor
        chans, factors = [c_prev], [f_prev]
        c = channels0
        for kind in kinds:
            if kind is CellKind.REDUCTION:
                c = c * 2
            stage = _CellStage(cells, kind, c, (c_prev, c_prev2), num_intermediate, rng)
            self.enc_stages.append(stage)
            c_prev2, c_prev = c_prev, c
            f_prev = f_prev * 2 if kind is CellKind.REDUCTION else f_prev
            chans.append(c)
            factors.append(f_prev)
        self.bottleneck_channels = c_prev
        self.bottleneck_factor = f_prev
        self._enc_chans = chans
        self._enc_factors = factors

        all_skips = list(skip_specs) + list(zip(chans[1:], factors[1:]))
        self.pred_heads = [_ConvLayer(rng, c_prev, 1, 3)]
        self.dec_stages = []
        c_prev2_ch = c_prev2
        cd = c_prev
        fd = f_prev
        for i in range(num_decoder):
            target = fd // 2
            skip = None
            for ch, fac in all_skips:
                if fac == target:
                    skip = (ch, fac)  # keep the last matching feature
            if skip is None:
                raise ConfigError(
                    f"no encoder feature at downsampling factor {target} "
                    f"for decoder stage {i}"
                )
            cd_new = max(1, cd // 2)
            stage = _CellStage(cells, CellKind.UPSAMPLING, cd_new,
                               (cd, c_prev2_ch, 1, skip[0]), num_intermediate, rng)
            stage.skip_factor = target
            self.dec_stages.append(stage)
            self.pred_heads.append(_ConvLayer(rng, cd_new, 1, 3))
            c_prev2_ch = cd
            cd = cd_new
            fd = target

    def params(self):
        out = []
        for s in self.enc_stages + self.dec_stages:
            out.extend(s.params())
        for h in self.pred_heads:
            out.append(h.w)
        return out

    def forward(self, feat: Tensor, feat_prev: Tensor, start_factor: int,
                skip_feats: list[tuple[Tensor, int]]):
        """Run encoder trunk + decoder.  Returns list of (pred, scale)."""
        prev, prev2 = feat, feat_prev
        f_prev = f_prev2 = start_factor
        enc_outs = []
        for stage in self.enc_stages:
            aligned2 = _align(prev2, f_prev2, f_prev)
            out = stage([prev, aligned2])
            f_out = f_prev * 2 if stage.kind is CellKind.REDUCTION else f_prev
            enc_outs.append((out, f_out))
            prev2, f_prev2 = prev, f_prev
            prev, f_prev = out, f_out

        skips = list(skip_feats) + enc_outs
        preds = [(self.pred_heads[0](prev), f_prev)]
        for i, stage in enumerate(self.dec_stages):
            target = f_prev // 2
            skip_t = None
            for t, fac in skips:
                if fac == target:
                    skip_t = t
            aligned2 = _align(prev2, f_prev2, f_prev)
            pred_in = preds[-1][0]
            out = stage([prev, aligned2, pred_in, skip_t])
            preds.append((self.pred_heads[i + 1](out), target))
            prev2, f_prev2 = prev, f_prev
            prev, f_prev = out, target
        return preds


# ---------------------------------------------------------------------------
# Search network


class SearchNet:
    """Relaxed encoder-decoder over mixed cells, with Siamese correlation entry."""

    def __init__(self, cfg: SearchNetConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0x5EA2C])
        kinds = encoder_kinds(cfg.num_encoder_cells)
        templates = {
            CellKind.NORMAL: CellTemplate(CellKind.NORMAL, cfg.num_intermediate),
            CellKind.REDUCTION: CellTemplate(CellKind.REDUCTION, cfg.num_intermediate),
            CellKind.UPSAMPLING: CellTemplate(CellKind.UPSAMPLING, cfg.num_intermediate),
        }
        self.alphas = AlphaSet(templates)
        cells = _MixedCells(self.alphas, cfg.num_intermediate, cfg.affine)

        c0 = cfg.c_init
        self.stem = _Stem(rng, cfg.in_channels, c0)
        # first (Siamese) cell is the leading reduction
        c_siam = c0 * 2
        self.siam_stage = _CellStage(cells, kinds[0], c_siam, (c0, c0),
                                     cfg.num_intermediate, rng)
        self.corr_factor = cfg.stem_factor * 2
        corr_width_margin = 2
        self.corr_disp = int(np.ceil(cfg.max_disp / self.corr_factor)) + corr_width_margin
        self.merge = _ConvLayer(rng, self.corr_disp + 1 + c_siam, c_siam, 1)
        self.trunk = _Trunk(
            cells, rng, kinds[1:], c_siam, (c_siam, c_siam), cfg.num_intermediate,
            cfg.num_decoder_cells, self.corr_factor,
            [(c0, cfg.stem_factor), (c_siam, self.corr_factor), (c_siam, self.corr_factor)],
        )

    def params(self) -> list[Tensor]:
        return (self.stem.params() + self.siam_stage.params() + [self.merge.w]
                + self.trunk.params())

    def alpha_params(self) -> list[Tensor]:
        return self.alphas.params()

    @property
    def prediction_scales(self) -> list[int]:
        f = self.trunk.bottleneck_factor
        return [f // (2 ** i) for i in range(len(self.trunk.pred_heads))]

    def forward(self, left: Tensor, right: Tensor) -> list[tuple[Tensor, int]]:
        if left.shape != right.shape:
            raise ShapeError(f"stereo pair shapes differ: {left.shape} vs {right.shape}")
        self.cfg.validate_resolution(left.shape[2], left.shape[3])
        l0 = self.stem(left)
        r0 = self.stem(right)
        l1 = self.siam_stage([l0, l0])
        r1 = self.siam_stage([r0, r0])
        if self.corr_disp >= l1.shape[3]:
            raise ConfigError(
                f"correlation displacement {self.corr_disp} too large for "
                f"feature width {l1.shape[3]}"
            )
        corr = correlation1d(l1, r1, self.corr_disp)
        merged = self.merge(concat_channels([corr, l1]))
        skip_feats = [(l0, self.cfg.stem_factor), (l1, self.corr_factor),
                      (merged, self.corr_factor)]
        return self.trunk.forward(merged, l1, self.corr_factor, skip_feats)


# ---------------------------------------------------------------------------
# Derived networks


class DerivedNet:
    """Discrete-genotype network; Siamese "C" variant or single-stream "S"."""

    def __init__(self, genotype: Genotype, cfg: DerivedNetConfig, seed: int = 0):
        self.genotype = genotype
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xDE21])
        kinds = encoder_kinds(cfg.num_encoder_cells)
        cells = _DiscreteCells(genotype, cfg.affine)
        c0 = cfg.c_init
        if cfg.siamese:
            self.stem = _Stem(rng, cfg.in_channels, c0)
            c_siam = c0 * 2
            self.siam_stage = _CellStage(cells, kinds[0], c_siam, (c0, c0),
                                         genotype.num_intermediate, rng)
            self.corr_factor = cfg.stem_factor * 2
            self.corr_disp = int(np.ceil(cfg.max_disp / self.corr_factor)) + 2
            self.merge = _ConvLayer(rng, self.corr_disp + 1 + c_siam, c_siam, 1)
            self.trunk = _Trunk(
                cells, rng, kinds[1:], c_siam, (c_siam, c_siam),
                genotype.num_intermediate, cfg.num_decoder_cells, self.corr_factor,
                [(c0, cfg.stem_factor), (c_siam, self.corr_factor),
                 (c_siam, self.corr_factor)],
            )
        else:
            self.stem = _Stem(rng, cfg.single_stream_channels, c0)
            self.trunk = _Trunk(
                cells, rng, kinds, c0, (c0, c0), genotype.num_intermediate,
                cfg.num_decoder_cells, cfg.stem_factor,
                [(c0, cfg.stem_factor)],
            )

    def params(self) -> list[Tensor]:
        out = self.stem.params()
        if self.cfg.siamese:
            out = out + self.siam_stage.params() + [self.merge.w]
        return out + self.trunk.params()

    @property
    def output_scale(self) -> int:
        return self.trunk.bottleneck_factor // (2 ** self.cfg.num_decoder_cells)

    def forward(self, left: Tensor, right: Tensor) -> list[tuple[Tensor, int]]:
        if not self.cfg.siamese:
            raise ConfigError("single-stream net takes one concatenated input; "
                              "use forward_single")
        if left.shape != right.shape:
            raise ShapeError(f"stereo pair shapes differ: {left.shape} vs {right.shape}")
        self.cfg.validate_resolution(left.shape[2], left.shape[3])
        l0 = self.stem(left)
        r0 = self.stem(right)
        l1 = self.siam_stage([l0, l0])
        r1 = self.siam_stage([r0, r0])
        if self.corr_disp >= l1.shape[3]:
            raise ConfigError(
                f"correlation displacement {self.corr_disp} too large for "
                f"feature width {l1.shape[3]}"
            )
        corr = correlation1d(l1, r1, self.corr_disp)
        merged = self.merge(concat_channels([corr, l1]))
        skip_feats = [(l0, self.cfg.stem_factor), (l1, self.corr_factor),
                      (merged, self.corr_factor)]
        return self.trunk.forward(merged, l1, self.corr_factor, skip_feats)

    def forward_single(self, x: Tensor) -> list[tuple[Tensor, int]]:
        if self.cfg.siamese:
            raise ConfigError("correlation net takes a stereo pair; use forward")
        if x.shape[1] != self.cfg.single_stream_channels:
            raise ShapeError(
                f"single-stream input must have {self.cfg.single_stream_channels} "
                f"channels, got {x.shape[1]}"
            )
        self.cfg.validate_resolution(x.shape[2], x.shape[3])
        f0 = self.stem(x)
        skip_feats = [(f0, self.cfg.stem_factor)]
        return self.trunk.forward(f0, f0, self.cfg.stem_factor, skip_feats)


# ---------------------------------------------------------------------------
# Residual refinement stack


@dataclass(frozen=True)
class StackConfig:
    roles: tuple = ("c",)
    freeze_previous: bool = True

    def __post_init__(self):
        if not self.roles or self.roles[0] != "c":
            raise ConfigError("stack must start with the correlation net 'c'")
        if any(r not in ("c", "s") for r in self.roles):
            raise ConfigError(f"stack roles must be 'c' or 's', got {self.roles}")
        if "c" in self.roles[1:]:
            raise ConfigError("only the first stack entry may be the 'c' variant")


class NetStack:
    """First net predicts disparity; each refinement net adds a residual.

    Refinement inputs: left, right, right warped by the previous
    disparity, and the previous disparity itself, all at full input
    resolution.  Outputs stay at the nets' common output scale.
    """

    def __init__(self, genotype: Genotype, stack_cfg: StackConfig,
                 c_inits: list[int] | None = None,
                 base_cfg: DerivedNetConfig | None = None, seed: int = 0):
        base = base_cfg or DerivedNetConfig()
        if c_inits is None:
            c_inits = [base.c_init] * len(stack_cfg.roles)
        if len(c_inits) != len(stack_cfg.roles):
            raise ConfigError(f"{len(c_inits)} c_inits for {len(stack_cfg.roles)} nets")
        self.cfg = stack_cfg
        self.nets: list[DerivedNet] = []
        for i, (role, ci) in enumerate(zip(stack_cfg.roles, c_inits)):
            cfg_i = DerivedNetConfig(
                c_init=ci,
                num_encoder_cells=base.num_encoder_cells,
                num_decoder_cells=base.num_decoder_cells,
                siamese=(role == "c"),
                in_channels=base.in_channels,
                max_disp=base.max_disp,
                affine=base.affine,
            )
            self.nets.append(DerivedNet(genotype, cfg_i, seed=seed + i))
        self.genotype = genotype

    @property
    def output_scale(self) -> int:
        return self.nets[0].output_scale

    def params(self) -> list[Tensor]:
        """Trainable parameters: only the last net's when freezing previous."""
        if self.cfg.freeze_previous and len(self.nets) > 1:
            return self.nets[-1].params()
        out = []
        for net in self.nets:
            out.extend(net.params())
        return out

    def all_params(self) -> list[Tensor]:
        out = []
        for net in self.nets:
            out.extend(net.params())
        return out

    def set_freeze_flags(self) -> None:
        """Mark frozen nets' tensors as not requiring grad (skips their tape work)."""
        trainable = set(map(id, self.params()))
        for p in self.all_params():
            p.requires_grad = id(p) in trainable

    def forward(self, left: Tensor, right: Tensor) -> list[tuple[Tensor, int]]:
        """Per-net final predictions, all at the common output scale."""
        preds0 = self.nets[0].forward(left, right)
        out, scale = preds0[-1]
        results = [(out, scale)]
        for net in self.nets[1:]:
            disp_full = scalar_mul(bilinear_resize(out, scale), float(scale))
            warped = warp_horizontal(right, disp_full)
            x = concat_channels([left, right, warped, disp_full])
            residual = net.forward_single(x)[-1][0]
            out = add(out, residual)
            results.append((out, scale))
        return results


# ---------------------------------------------------------------------------
# Convenience constructors matching the module-level operation names


def build_search_net(cfg: SearchNetConfig, seed: int = 0) -> SearchNet:
    return SearchNet(cfg, seed=seed)


def build_derived_net(genotype: Genotype, cfg: DerivedNetConfig,
                      seed: int = 0) -> DerivedNet:
    return DerivedNet(genotype, cfg, seed=seed)


def build_stack(genotype: Genotype, stack_cfg: StackConfig,
                c_inits: list[int] | None = None,
                base_cfg: DerivedNetConfig | None = None, seed: int = 0) -> NetStack:
    return NetStack(genotype, stack_cfg, c_inits, base_cfg, seed=seed)


# ---------------------------------------------------------------------------
# Checkpoints: manifest JSON + concatenated tensor blobs


def _params_blob(params: list[Tensor]) -> bytes:
    return b"".join(tensor_to_bytes(p) for p in params)


def _read_blobs(buf: bytes, count: int) -> list[np.ndarray]:
    out = []
    off = 0
    for i in range(count):
        if off + 16 > len(buf):
            raise DataError(f"checkpoint truncated at parameter {i}")
        dims = np.frombuffer(buf, dtype="<u4", count=4, offset=off)
        size = 16 + int(np.prod(dims)) * 8
        if off + size > len(buf):
            raise DataError(f"checkpoint truncated inside parameter {i}")
        out.append(tensor_from_bytes(buf[off : off + size]).data)
        off += size
    if off != len(buf):
        raise DataError(f"checkpoint has {len(buf) - off} trailing bytes")
    return out


def _net_manifest(net) -> dict:
    if isinstance(net, SearchNet):
        kind = "search"
        cfg = asdict(net.cfg)
        genotype = None
    elif isinstance(net, DerivedNet):
        kind = "derived"
        cfg = asdict(net.cfg)
        genotype = json.loads(genotype_to_json(net.genotype))
    else:
        raise ConfigError(f"cannot checkpoint object of type {type(net).__name__}")
    return {"version": 1, "kind": kind, "config": cfg, "genotype": genotype}


def save_checkpoint(dirpath: str, net, extra_tensors: list[Tensor] | None = None) -> None:
    """Persist a net's parameters (and optionally its alphas) to a directory."""
    os.makedirs(dirpath, exist_ok=True)
    params = list(net.params())
    if isinstance(net, SearchNet):
        params = params + net.alpha_params()
    if extra_tensors:
        params = params + list(extra_tensors)
    blob = _params_blob(params)
    manifest = _net_manifest(net)
    manifest["num_params"] = len(params)
    manifest["sha256"] = hashlib.sha256(blob).hexdigest()
    with open(os.path.join(dirpath, "params.bin"), "wb") as fh:
        fh.write(blob)
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def restore_checkpoint(dirpath: str, net) -> None:
    """Load parameters saved by save_checkpoint into an already-built net."""
    manifest_path = os.path.join(dirpath, "manifest.json")
    blob_path = os.path.join(dirpath, "params.bin")
    if not os.path.exists(manifest_path) or not os.path.exists(blob_path):
        raise DataError(f"no checkpoint at {dirpath}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != 1:
        raise DataError(f"unsupported checkpoint version {manifest.get('version')!r}")
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise DataError("checkpoint corrupt: sha256 mismatch")
    params = list(net.params())
    if isinstance(net, SearchNet):
        params = params + net.alpha_params()
    arrays = _read_blobs(blob, manifest["num_params"])
    if len(arrays) != len(params):
        raise DataError(
            f"checkpoint holds {len(arrays)} tensors, net expects {len(params)}"
        )
    for p, a in zip(params, arrays):
        if p.data.shape != a.shape:
            raise DataError(f"parameter shape mismatch: {p.data.shape} vs {a.shape}")
        p.data = np.ascontiguousarray(a)


def load_checkpoint(dirpath: str, seed: int = 0):
    """Rebuild a net from its manifest and restore its parameters."""
    manifest_path = os.path.join(dirpath, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no checkpoint manifest at {dirpath}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    kind = manifest.get("kind")
    if kind == "search":
        net = SearchNet(SearchNetConfig(**manifest["config"]), seed=seed)
    elif kind == "derived":
        genotype = genotype_from_json(json.dumps(manifest["genotype"]))
        cfg_doc = dict(manifest["config"])
        net = DerivedNet(genotype, DerivedNetConfig(**cfg_doc), seed=seed)
    else:
        raise DataError(f"unknown checkpoint kind {kind!r}")
    restore_checkpoint(dirpath, net)
    return net
