"""The trainable model: a small per-node backbone feeding either a linear
point-prediction layer or a mixture output head.

The mixture head projects backbone features, then runs three linear
branches for mixing logits, mean offsets and log-variances. Component
means are reparameterized as offset * anchor_scale + anchor, with fixed
anchors spaced so the components tile the standardized 3-sigma band with
half-overlap ((K+1) * scale = 6). At initialization the branch weights
are zero with biases chosen so every output is the same weakly
informative mixture: uniform weights, means at the anchors, unit
variances.

All gradients are hand-derived reverse mode; `backward` matches central
finite differences (see tests). Forward/backward are pure functions of
(params, batch), so concurrent evaluation on parameter snapshots is safe.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .gmm import LOG_VAR_MAX, LOG_VAR_MIN, GaussianMixture, MixtureBatch

VARIANTS = ("det", "norm", "gmm")


def default_anchors(components: int):
    """(scale, anchors) with (K+1) * scale = 6 and anchors symmetric
    about 0; K=5 gives scale 1 and anchors [-2, -1, 0, 1, 2]."""
    scale = 6.0 / (components + 1)
    anchors = scale * (np.arange(1, components + 1) - (components + 1) / 2.0)
    return scale, anchors


@dataclass(frozen=True)
class HeadConfig:
    components: int
    horizon: int
    proj_width: int = 64
    anchor_scale: float = None
    anchors: np.ndarray = None

    def __post_init__(self):
        if self.components < 1:
            raise ValueError(f"components must be >= 1, got {self.components}")
        if self.anchor_scale is None or self.anchors is None:
            scale, anchors = default_anchors(self.components)
            object.__setattr__(self, "anchor_scale", float(scale))
            object.__setattr__(self, "anchors", anchors)
        anchors = np.asarray(self.anchors, dtype=float)
        if anchors.shape != (self.components,):
            raise ValueError(f"anchors shape {anchors.shape} != ({self.components},)")
        if self.components > 1 and not np.all(np.diff(anchors) > 0):
            raise ValueError("anchors must be strictly increasing")
        anchors.setflags(write=False)
        object.__setattr__(self, "anchors", anchors)


@dataclass(frozen=True)
class BackboneConfig:
    input_steps: int
    channels: int = 1
    hidden: int = 64
    features: int = 64
    activation: str = "tanh"  # "tanh" | "identity"
    graph_alpha: float = 0.3

    def __post_init__(self):
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.channels not in (1, 2):
            raise ValueError(f"channels must be 1 or 2, got {self.channels}")

    @property
    def input_dim(self) -> int:
        return self.input_steps * self.channels


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    backbone: BackboneConfig
    horizon: int
    head: HeadConfig | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "det":
            if self.head is not None:
                raise ValueError("det variant takes no head config")
        else:
            if self.head is None:
                raise ValueError(f"{self.variant} variant needs a head config")
            if self.head.horizon != self.horizon:
                raise ValueError("head horizon differs from model horizon")
            if self.variant == "norm" and self.head.components != 1:
                raise ValueError("norm variant is the single-component head")


@dataclass
class ModelParams:
    """Named parameter tensors, ordered; shared by optimizer and checkpoints."""

    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def names(self):
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


@dataclass
class ForecastBatch:
    """Aligned inputs/targets for a set of windows, plus predictions once
    a forward pass has filled them."""

    inputs: np.ndarray  # (B, N, input_dim), normalized
    targets: np.ndarray  # (B, N, horizon), normalized
    graph: np.ndarray | None = None
    mixtures: MixtureBatch | None = None
    point_preds: np.ndarray | None = None

    def __post_init__(self):
        if self.inputs.ndim != 3 or self.targets.ndim != 3:
            raise ValueError(
                f"inputs/targets must be 3-D, got {self.inputs.shape} / {self.targets.shape}"
            )
        if self.inputs.shape[:2] != self.targets.shape[:2]:
            raise ValueError(
                f"batch/location mismatch: inputs {self.inputs.shape} vs "
                f"targets {self.targets.shape}"
            )


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Random backbone/projection, weakly-informative output head."""
    bb = cfg.backbone
    t = {}
    t["backbone.w1"] = _uniform_init(rng, (bb.hidden, bb.input_dim), bb.input_dim)
    t["backbone.b1"] = np.zeros(bb.hidden)
    t["backbone.w2"] = _uniform_init(rng, (bb.features, bb.hidden), bb.hidden)
    t["backbone.b2"] = np.zeros(bb.features)
    if cfg.variant == "det":
        t["out.w"] = np.zeros((cfg.horizon, bb.features))
        t["out.b"] = np.zeros(cfg.horizon)
    else:
        hc = cfg.head
        wide = hc.horizon * hc.components
        t["proj.w"] = _uniform_init(rng, (hc.proj_width, bb.features), bb.features)
        t["proj.b"] = np.zeros(hc.proj_width)
        t["mix.w"] = np.zeros((wide, hc.proj_width))
        t["mix.b"] = np.full(wide, 1.0 / hc.components)
        t["mean.w"] = np.zeros((wide, hc.proj_width))
        t["mean.b"] = np.zeros(wide)
        t["logvar.w"] = np.zeros((wide, hc.proj_width))
        t["logvar.b"] = np.zeros(wide)
    return ModelParams(t)


def reference_mixture(hc: HeadConfig) -> GaussianMixture:
    """The mixture every freshly initialized head emits: uniform weights,
    means at the anchors, unit variances."""
    k = hc.components
    return GaussianMixture(np.full(k, 1.0 / k), hc.anchors.copy(), np.ones(k))


def _normalize_adjacency(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    rows = a.sum(axis=1, keepdims=True)
    safe = np.where(rows > 0, rows, 1.0)
    return a / safe


def _backbone_pass(x, params, cfg: BackboneConfig, graph):
    if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
        raise ValueError(f"expected inputs (B, N, {cfg.input_dim}), got {x.shape}")
    a1 = x @ params["backbone.w1"].T + params["backbone.b1"]
    h1 = np.tanh(a1) if cfg.activation == "tanh" else a1
    z_pre = h1 @ params["backbone.w2"].T + params["backbone.b2"]
    if graph is not None and cfg.graph_alpha > 0.0:
        a_hat = _normalize_adjacency(graph)
        z = (1.0 - cfg.graph_alpha) * z_pre + cfg.graph_alpha * np.einsum(
            "ij,bjd->bid", a_hat, z_pre
        )
    else:
        a_hat = None
        z = z_pre
    return {"x": x, "h1": h1, "z_pre": z_pre, "z": z, "a_hat": a_hat}


def backbone_forward(x, params, cfg: BackboneConfig, graph=None) -> np.ndarray:
    """Per-node MLP (input window -> hidden -> features) with an optional
    single neighborhood-averaging step over a row-normalized adjacency."""
    return _backbone_pass(x, params, cfg, graph)["z"]


def _softmax_last(logits):
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _head_pass(z, hc: HeadConfig, params):
    lead = z.shape[:-1]
    zp = z @ params["proj.w"].T + params["proj.b"]
    shape = lead + (hc.horizon, hc.components)
    logits = (zp @ params["mix.w"].T + params["mix.b"]).reshape(shape)
    offsets = (zp @ params["mean.w"].T + params["mean.b"]).reshape(shape)
    logvar_raw = (zp @ params["logvar.w"].T + params["logvar.b"]).reshape(shape)
    logvar = np.clip(logvar_raw, LOG_VAR_MIN, LOG_VAR_MAX)
    weights = _softmax_last(logits)
    means = offsets * hc.anchor_scale + hc.anchors
    variances = np.exp(logvar)
    mb = MixtureBatch(weights, means, variances)
    return {"zp": zp, "logvar_raw": logvar_raw, "mixtures": mb}


def head_forward(z, hc: HeadConfig, params) -> MixtureBatch:
    """Mixture parameters for every (leading index, horizon step).

    z has shape (..., features); the result's element shape is
    (..., horizon) with K components each. Means are in normalized space.
    """
    return _head_pass(z, hc, params)["mixtures"]


def _check_finite_loss(loss, per_elem, what):
    if np.isfinite(loss):
        return
    bad = np.argwhere(~np.isfinite(per_elem))
    first = tuple(int(i) for i in bad[0]) if bad.size else "?"
    raise ValueError(f"non-finite {what} at element {first}")


def forward_loss(batch: ForecastBatch, params: ModelParams, cfg: ModelConfig):
    """(training loss, predictions). The loss is the plain mean over all
    (window, location, step) elements: NLL for mixture variants, absolute
    error for the det variant."""
    ctx = _backbone_pass(batch.inputs, params, cfg.backbone, batch.graph)
    y = batch.targets
    if cfg.variant == "det":
        out = ctx["z"] @ params["out.w"].T + params["out.b"]
        per = np.abs(out - y)
        loss = float(per.mean())
        _check_finite_loss(loss, per, "absolute error")
        return loss, out
    head = _head_pass(ctx["z"], cfg.head, params)
    mb = head["mixtures"]
    per = -mb.log_density(y)
    loss = float(per.mean())
    _check_finite_loss(loss, per, "negative log-likelihood")
    return loss, mb


def predict(params: ModelParams, cfg: ModelConfig, inputs, graph=None):
    """Inference: mixtures for norm/gmm, point values for det."""
    z = backbone_forward(inputs, params, cfg.backbone, graph)
    if cfg.variant == "det":
        return z @ params["out.w"].T + params["out.b"]
    return head_forward(z, cfg.head, params)


def backward(batch: ForecastBatch, params: ModelParams, cfg: ModelConfig):
    """(loss, gradients) with gradients shaped exactly like the params."""
    bb = cfg.backbone
    ctx = _backbone_pass(batch.inputs, params, bb, batch.graph)
    y = batch.targets
    b, n = y.shape[:2]
    m_count = y.size
    grads = {}

    if cfg.variant == "det":
        out = ctx["z"] @ params["out.w"].T + params["out.b"]
        per = np.abs(out - y)
        loss = float(per.mean())
        _check_finite_loss(loss, per, "absolute error")
        d_out = np.sign(out - y) / m_count
        flat = d_out.reshape(b * n, -1)
        z_flat = ctx["z"].reshape(b * n, -1)
        grads["out.w"] = flat.T @ z_flat
        grads["out.b"] = flat.sum(axis=0)
        g_z = (flat @ params["out.w"]).reshape(b, n, -1)
    else:
        hc = cfg.head
        head = _head_pass(ctx["z"], hc, params)
        mb = head["mixtures"]
        # Non-finite intermediates surface through the loss guard below,
        # so numpy's own warnings are redundant here.
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            log_terms = (
                np.log(mb.weights)
                - 0.5 * (y[..., None] - mb.means) ** 2 / mb.variances
                - 0.5 * np.log(2.0 * np.pi * mb.variances)
            )
            lse_max = log_terms.max(axis=-1, keepdims=True)
            lse = lse_max[..., 0] + np.log(np.exp(log_terms - lse_max).sum(axis=-1))
        per = -lse
        loss = float(per.mean())
        _check_finite_loss(loss, per, "negative log-likelihood")
        gamma = np.exp(log_terms - lse[..., None])

        diff = y[..., None] - mb.means
        d_logits = (mb.weights - gamma) / m_count
        d_offsets = (-gamma * diff / mb.variances) * hc.anchor_scale / m_count
        d_logvar = -gamma * (diff * diff / (2.0 * mb.variances) - 0.5) / m_count
        # Hard-clamped log-variances contribute no gradient.
        inside = (head["logvar_raw"] > LOG_VAR_MIN) & (head["logvar_raw"] < LOG_VAR_MAX)
        d_logvar = d_logvar * inside

        wide = hc.horizon * hc.components
        zp_flat = head["zp"].reshape(b * n, -1)
        g_zp = np.zeros_like(zp_flat)
        for name, d in (("mix", d_logits), ("mean", d_offsets), ("logvar", d_logvar)):
            flat = d.reshape(b * n, wide)
            grads[f"{name}.w"] = flat.T @ zp_flat
            grads[f"{name}.b"] = flat.sum(axis=0)
            g_zp += flat @ params[f"{name}.w"]
        z_flat = ctx["z"].reshape(b * n, -1)
        grads["proj.w"] = g_zp.T @ z_flat
        grads["proj.b"] = g_zp.sum(axis=0)
        g_z = (g_zp @ params["proj.w"]).reshape(b, n, -1)

    if ctx["a_hat"] is not None:
        g_z = (1.0 - bb.graph_alpha) * g_z + bb.graph_alpha * np.einsum(
            "ji,bjd->bid", ctx["a_hat"], g_z
        )
    g_z_flat = g_z.reshape(b * n, -1)
    h1_flat = ctx["h1"].reshape(b * n, -1)
    grads["backbone.w2"] = g_z_flat.T @ h1_flat
    grads["backbone.b2"] = g_z_flat.sum(axis=0)
    g_h1 = g_z_flat @ params["backbone.w2"]
    if bb.activation == "tanh":
        g_a1 = g_h1 * (1.0 - h1_flat**2)
    else:
        g_a1 = g_h1
    x_flat = ctx["x"].reshape(b * n, -1)
    grads["backbone.w1"] = g_a1.T @ x_flat
    grads["backbone.b1"] = g_a1.sum(axis=0)
    return loss, grads


# ----------------------------------------------------------------------
# Checkpoints: versioned binary dump, bit-exact round trip.
# ----------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _cfg_to_meta(cfg: ModelConfig) -> dict:
    meta = {
        "variant": cfg.variant,
        "horizon": cfg.horizon,
        "backbone": {
            "input_steps": cfg.backbone.input_steps,
            "channels": cfg.backbone.channels,
            "hidden": cfg.backbone.hidden,
            "features": cfg.backbone.features,
            "activation": cfg.backbone.activation,
            "graph_alpha": cfg.backbone.graph_alpha,
        },
    }
    if cfg.head is not None:
        meta["head"] = {
            "components": cfg.head.components,
            "horizon": cfg.head.horizon,
            "proj_width": cfg.head.proj_width,
            "anchor_scale": cfg.head.anchor_scale,
            "anchors": list(cfg.head.anchors),
        }
    return meta


def _cfg_from_meta(meta: dict) -> ModelConfig:
    head = None
    if "head" in meta:
        h = meta["head"]
        head = HeadConfig(
            components=h["components"],
            horizon=h["horizon"],
            proj_width=h["proj_width"],
            anchor_scale=h["anchor_scale"],
            anchors=np.asarray(h["anchors"], dtype=float),
        )
    return ModelConfig(
        variant=meta["variant"],
        backbone=BackboneConfig(**meta["backbone"]),
        horizon=meta["horizon"],
        head=head,
    )


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, normalizer=None, extra=None):
    """Write all tensors plus the model config and normalizer statistics.

    `normalizer` is anything with mean/std attributes (or None)."""
    meta = {
        "format": "mixcast-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model": _cfg_to_meta(cfg),
        "normalizer": (
            None
            if normalizer is None
            else {"mean": float(normalizer.mean), "std": float(normalizer.std)}
        ),
        "extra": dict(extra or {}),
        "tensor_names": params.names(),
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **params.tensors)


def load_checkpoint(path):
    """(params, cfg, normalizer_stats_or_None, extra) from save_checkpoint."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != "mixcast-checkpoint":
            raise ValueError(f"{path}: not a mixcast checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
        tensors = {name: data[name] for name in meta["tensor_names"]}
    params = ModelParams(tensors)
    cfg = _cfg_from_meta(meta["model"])
    return params, cfg, meta["normalizer"], meta["extra"]
