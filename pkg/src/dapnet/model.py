"""The double self-attention segmentation network.

Hierarchical set abstraction feeds a point attention module (PAM) and a group
attention module (GAM) that run in parallel on the deepest grouped features;
their residual contributions are summed, max-pooled per group and carried
back to every input point through inverse-distance feature propagation.
A final pointwise map produces per-point class scores.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from . import geom
from .engine import (
    BatchNorm,
    DimensionError,
    Parameter,
    Tensor,
    add,
    batch_norm,
    concat,
    gather,
    matmul,
    max_reduce,
    pointwise_affine,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
    weighted_gather,
)
from .engine import checkpoint

VARIANTS = ("BASE", "P", "G", "M", "PG", "PM", "GM", "PGM")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and ablation switches.

    Per-level tuples run from the first (finest) abstraction level to the
    deepest; ``fp_kernels`` runs from the deepest propagation level back to
    the input points. ``single_radii`` is used when multiscale grouping is
    off and defaults to the largest radius of each level.
    """

    group_counts: tuple = (256, 128, 64, 32)
    radii: tuple = ((0.05, 0.1), (0.1, 0.2), (0.2, 0.4), (0.4, 0.8))
    single_radii: Optional[tuple] = None
    group_size: int = 32
    sa_kernels: tuple = ((32, 32, 64), (64, 64, 128), (128, 128, 256), (256, 256, 512))
    fp_kernels: tuple = ((256, 256), (256, 256), (256, 128), (128, 128, 128))
    attention_reduction: int = 64
    softmax_mode: str = "row"
    enable_pam: bool = True
    enable_gam: bool = True
    enable_msg: bool = True
    num_classes: int = 9
    input_channels: int = 9
    max_attention_size: int = 4096

    def __post_init__(self):
        norm = lambda v: tuple(tuple(x) if isinstance(x, (list, tuple)) else x for x in v)
        object.__setattr__(self, "group_counts", tuple(int(g) for g in self.group_counts))
        object.__setattr__(self, "radii", tuple(tuple(float(r) for r in rs) for rs in self.radii))
        if self.single_radii is None:
            object.__setattr__(self, "single_radii", tuple(max(rs) for rs in self.radii))
        object.__setattr__(self, "single_radii", tuple(float(r) for r in self.single_radii))
        object.__setattr__(self, "sa_kernels", norm(self.sa_kernels))
        object.__setattr__(self, "fp_kernels", norm(self.fp_kernels))
        levels = len(self.group_counts)
        if levels < 1:
            raise ValueError("need at least one abstraction level")
        for name in ("radii", "single_radii", "sa_kernels", "fp_kernels"):
            if len(getattr(self, name)) != levels:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries for {levels} levels")
        if any(len(k) == 0 for k in self.sa_kernels + self.fp_kernels):
            raise ValueError("every level needs at least one kernel stage")
        if any(g < 1 for g in self.group_counts) or self.group_size < 1:
            raise ValueError("group counts and group size must be positive")
        if list(self.group_counts) != sorted(self.group_counts, reverse=True):
            raise ValueError("group counts must not increase with depth")
        if self.softmax_mode not in ("row", "global"):
            raise ValueError(f"softmax_mode must be 'row' or 'global', got {self.softmax_mode!r}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.input_channels != 9:
            raise ValueError("inputs are 3 spatial + 6 feature channels")

    @property
    def levels(self) -> int:
        return len(self.group_counts)

    @property
    def variant(self) -> str:
        tag = "P" * self.enable_pam + "G" * self.enable_gam + "M" * self.enable_msg
        return tag or "BASE"

    def scales(self, level: int) -> tuple:
        return self.radii[level] if self.enable_msg else (self.single_radii[level],)

    def level_width(self, level: int) -> int:
        return len(self.scales(level)) * self.sa_kernels[level][-1]

    def with_variant(self, variant: str) -> "ModelConfig":
        """Switch ablation flags, e.g. ``"BASE"``, ``"PM"`` or ``"PGM"``."""
        v = variant.upper()
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        return replace(self, enable_pam="P" in v, enable_gam="G" in v, enable_msg="M" in v)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(
            group_counts=(64, 16),
            radii=((0.1, 0.2), (0.2, 0.4)),
            group_size=16,
            sa_kernels=((16, 16, 32), (32, 32, 64)),
            fp_kernels=((64, 64), (64, 64, 64)),
            attention_reduction=8,
            num_classes=4,
        )
        return cls(**{**base, **overrides})

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        base = dict(
            group_counts=(6, 2),
            radii=((0.3, 0.6), (0.6, 1.2)),
            group_size=4,
            sa_kernels=((4, 4, 5), (5, 5, 6)),
            fp_kernels=((6, 5), (5, 5, 4)),
            attention_reduction=2,
            num_classes=3,
        )
        return cls(**{**base, **overrides})


# --------------------------------------------------------------------------
# geometry plan


@dataclass
class LevelGeometry:
    centroid_ids: np.ndarray  # (B, G) indices into the previous level's points
    coords: np.ndarray  # (B, G, 3)
    members: list  # per scale: (B, G, S) indices into the previous level's points
    offsets: list  # per scale: (B, G, S, 3) member minus centroid coordinates


@dataclass
class Geometry:
    """Everything coordinate-dependent for one forward pass.

    ``interp[k]`` carries level-``k`` features to level ``k - 1`` positions
    (``k = 0`` targets the input points).
    """

    levels: list
    interp: list


def build_geometry(coords: np.ndarray, cfg: ModelConfig) -> Geometry:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 2:
        coords = coords[None]
    batch, n, _ = coords.shape
    levels, interp = [], []
    cur = coords
    for lvl, g in enumerate(cfg.group_counts):
        if cur.shape[1] < g:
            raise ValueError(
                f"abstraction level {lvl}: {cur.shape[1]} input points but {g} groups requested"
            )
        cids = np.stack([geom.fps(cur[b], g) for b in range(batch)])
        ccoords = np.take_along_axis(cur, cids[..., None], axis=1)
        members, offsets = [], []
        for r in cfg.scales(lvl):
            m = np.stack(
                [geom.ball_query(cur[b], cids[b], r, cfg.group_size).member_ids for b in range(batch)]
            )
            pos = np.stack([cur[b][m[b]] for b in range(batch)])
            members.append(m)
            offsets.append(pos - ccoords[:, :, None, :])
        levels.append(LevelGeometry(cids, ccoords, members, offsets))
        k = min(geom.IDW_NEIGHBORS, g)
        pairs = [geom.idw_weights(ccoords[b], cur[b], k) for b in range(batch)]
        interp.append((np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])))
        cur = ccoords
    return Geometry(levels, interp)


# --------------------------------------------------------------------------
# attention modules


def pam_branch(p: Tensor, params: dict, mode: str = "row", cap: int = 4096):
    """Point attention without the residual: returns ``(lifted, U)``.

    ``params`` holds ``a``, ``b``, ``c`` (``T -> T_r``) weight/bias pairs and
    the ``out`` (``T_r -> T``) weight, keyed as ``"a.weight"`` etc.; an
    ``"out.bias"`` is used if present.
    ``U[j, i]`` is the weight of flattened position ``i`` for position ``j``.
    """
    batch, g, s, _ = p.shape
    tr = params["a.weight"].shape[1]
    j = s * tr
    if j > cap:
        raise DimensionError(
            f"point attention over {j} positions exceeds the cap of {cap}; "
            f"reduce attention_reduction (now {tr}) or the group size"
        )
    flat = {}
    for key in ("a", "b", "c"):
        proj = pointwise_affine(p, params[f"{key}.weight"], params[f"{key}.bias"])
        flat[key] = reshape(proj, (batch, g, j))
    # scores[j, i] = sum_g B[g, j] A[g, i], i.e. (A^T B)[i, j]
    scores = matmul(transpose(flat["b"]), flat["a"])
    u = softmax(scores, mode)
    attended = matmul(flat["c"], transpose(u))
    lifted = pointwise_affine(reshape(attended, (batch, g, s, tr)), params["out.weight"],
                              params.get("out.bias"))
    return lifted, u


def pam_forward(p: Tensor, params: dict, alpha: Tensor, mode: str = "row", cap: int = 4096) -> Tensor:
    lifted, _ = pam_branch(p, params, mode, cap)
    return add(p, scale(lifted, alpha))


def gam_branch(p: Tensor, mode: str = "row"):
    """Group attention without the residual: returns ``(V D, V)`` reshaped like ``p``."""
    batch, g, s, t = p.shape
    d = reshape(p, (batch, g, s * t))
    v = softmax(matmul(d, transpose(d)), mode)
    return reshape(matmul(v, d), p.shape), v


def gam_forward(p: Tensor, beta: Tensor, mode: str = "row") -> Tensor:
    out, _ = gam_branch(p, mode)
    return add(p, scale(out, beta))


# --------------------------------------------------------------------------
# network


@dataclass
class LayerState:
    coords: np.ndarray  # (B, G, 3)
    features: Tensor  # (B, G, S, T)
    pooled: Tensor  # (B, G, T)


def _seeded_normal(seed: int, name: str, shape: tuple, std: float) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.standard_normal(shape) * std


class DAPNet:
    """Parameters plus forward pass for one :class:`ModelConfig`.

    Weights are initialized from ``seed`` and the parameter's name alone, so
    two variants of the same config share every parameter they have in
    common.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params: dict = {}
        self.bns: dict = {}
        width = cfg.input_channels - 3
        for lvl in range(cfg.levels):
            for si in range(len(cfg.scales(lvl))):
                self._mlp(f"sa{lvl}.s{si}", 3 + width, cfg.sa_kernels[lvl])
            width = cfg.level_width(lvl)
        deep = width
        if cfg.enable_pam:
            tr = cfg.attention_reduction
            for key in ("a", "b", "c"):
                self._affine(f"pam.{key}", deep, tr)
            # a constant shift here is cancelled by the batch norms downstream
            self._affine("pam.out", tr, deep, bias=False)
            self._add(Parameter(np.zeros(1), "pam.alpha"))
        if cfg.enable_gam:
            self._add(Parameter(np.zeros(1), "gam.beta"))
        for step, kernels in enumerate(cfg.fp_kernels):
            lvl = cfg.levels - 1 - step
            skip = cfg.level_width(lvl - 1) if lvl > 0 else 0
            self._mlp(f"fp{lvl}", width + skip, kernels)
            width = kernels[-1]
        self._affine("cls", width, cfg.num_classes)

    # -- construction helpers

    def _add(self, p: Parameter):
        if p.name in self.params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self.params[p.name] = p

    def _affine(self, name: str, cin: int, cout: int, bias: bool = True):
        self._add(Parameter(_seeded_normal(self.seed, name, (cin, cout), np.sqrt(2.0 / cin)),
                            f"{name}.weight"))
        if bias:
            self._add(Parameter(np.zeros(cout), f"{name}.bias"))

    def _mlp(self, prefix: str, cin: int, widths):
        for k, cout in enumerate(widths):
            # batch norm's shift subsumes the conv bias
            self._affine(f"{prefix}.conv{k}", cin, cout, bias=False)
            bn = BatchNorm(cout, f"{prefix}.bn{k}")
            self.bns[bn.name] = bn
            for p in bn.parameters():
                self._add(p)
            cin = cout

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward

    def _run_mlp(self, prefix: str, x: Tensor, stages: int, training: bool) -> Tensor:
        for k in range(stages):
            x = pointwise_affine(x, self.params[f"{prefix}.conv{k}.weight"])
            x = relu(batch_norm(x, self.bns[f"{prefix}.bn{k}"], training))
        return x

    def set_abstraction(self, lvl: int, points: Tensor, lg: LevelGeometry, training: bool) -> LayerState:
        per_scale = []
        for si, (members, offsets) in enumerate(zip(lg.members, lg.offsets)):
            x = concat([Tensor(offsets), gather(points, members)], axis=-1)
            per_scale.append(self._run_mlp(f"sa{lvl}.s{si}", x, len(self.cfg.sa_kernels[lvl]), training))
        feats = per_scale[0] if len(per_scale) == 1 else concat(per_scale, axis=-1)
        return LayerState(lg.coords, feats, max_reduce(feats, axis=2))

    def attend(self, p: Tensor) -> Tensor:
        """Fuse PAM and GAM: ``p + alpha * PAM branch + beta * GAM branch``.

        This equals the sum of the two residual module outputs with the
        shared input counted once.
        """
        cfg = self.cfg
        out = p
        if cfg.enable_pam:
            proj = {k[4:]: v for k, v in self.params.items() if k.startswith("pam.")}
            lifted, _ = pam_branch(p, proj, cfg.softmax_mode, cfg.max_attention_size)
            out = add(out, scale(lifted, self.params["pam.alpha"]))
        if cfg.enable_gam:
            grouped, _ = gam_branch(p, cfg.softmax_mode)
            out = add(out, scale(grouped, self.params["gam.beta"]))
        return out

    def feature_propagation(self, lvl: int, coarse: Tensor, interp, skip: Optional[Tensor],
                            training: bool) -> Tensor:
        idx, w = interp
        x = weighted_gather(coarse, idx, w)
        if lvl > 0:
            if skip is None:
                raise ValueError(f"propagation level {lvl} needs skip features")
            x = concat([x, skip], axis=-1)
        stages = len(self.cfg.fp_kernels[self.cfg.levels - 1 - lvl])
        return self._run_mlp(f"fp{lvl}", x, stages, training)

    def forward(self, features: np.ndarray, training: bool = True,
                geometry: Optional[Geometry] = None) -> Tensor:
        """Per-point class scores (``B x n x C``) for a batch of samples.

        ``features`` is ``B x n x 9`` (or a single ``n x 9`` sample): three
        spatial coordinates followed by six feature channels.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 2:
            features = features[None]
        if features.shape[-1] != self.cfg.input_channels:
            raise DimensionError(
                f"expected {self.cfg.input_channels} input channels, got {features.shape[-1]}"
            )
        if geometry is None:
            geometry = build_geometry(features[..., :3], self.cfg)
        points = Tensor(features[..., 3:])
        states = []
        for lvl, lg in enumerate(geometry.levels):
            state = self.set_abstraction(lvl, points, lg, training)
            states.append(state)
            points = state.pooled
        deep = states[-1]
        if self.cfg.enable_pam or self.cfg.enable_gam:
            coarse = max_reduce(self.attend(deep.features), axis=2)
        else:
            coarse = deep.pooled
        for lvl in reversed(range(self.cfg.levels)):
            skip = states[lvl - 1].pooled if lvl > 0 else None
            coarse = self.feature_propagation(lvl, coarse, geometry.interp[lvl], skip, training)
        return pointwise_affine(coarse, self.params["cls.weight"], self.params["cls.bias"])

    __call__ = forward

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(features, training=False).data, axis=-1)

    # -- persistence

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.params.items()}
        for name, bn in self.bns.items():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict):
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))[:3]
            extra = sorted(set(state) - expected)[:3]
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, bn in self.bns.items():
            bn.running_mean = np.array(state[f"{name}.running_mean"])
            bn.running_var = np.array(state[f"{name}.running_var"])

    def save(self, path, extra: Optional[dict] = None):
        header = {"model": self.cfg.to_dict(), "variant": self.cfg.variant, "seed": self.seed}
        header.update(extra or {})
        checkpoint.save(path, self.state_dict(), header)

    @classmethod
    def load(cls, path) -> tuple["DAPNet", dict]:
        header, tensors = checkpoint.load(path)
        if "model" not in header:
            raise checkpoint.CheckpointError(f"{path}: no model config in checkpoint header")
        model = cls(ModelConfig.from_dict(header["model"]), seed=header.get("seed", 0))
        model.load_state_dict(tensors)
        return model, header


def forward(model: DAPNet, sample_features: np.ndarray, training: bool = False) -> Tensor:
    """Class scores ``n x C`` for one ``n x 9`` sample."""
    out = model.forward(sample_features, training=training)
    return reshape(out, out.shape[1:]) if out.shape[0] == 1 else out
