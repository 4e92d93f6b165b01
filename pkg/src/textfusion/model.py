"""Visual/text fusion classifier with three supervision heads.

Pipeline per sample: project the visual vector to ``fused_v_dim``, attend over
the word vectors to get ``f_a``, batch-normalize both and concatenate into
``f_c``. Heads: fused (on ``f_c``), visual (on raw ``f_v``) and text (on raw
``f_a``, with one extra "no text" class).
"""

from __future__ import annotations

import copy
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .attention import AttentionParams, attend, attend_backward, average_pool_arrays, glorot_uniform

VARIANTS = ("fused", "average_pool", "visual_only", "text_only")
DEFAULT_BETA = (1.0, 0.5, 0.5)


@dataclass
class ModelConfig:
    num_classes: int
    v_dim: int = 1024
    t_dim: int = 300
    fused_v_dim: int = 512
    beta: tuple[float, float, float] = DEFAULT_BETA
    seed: int = 0
    variant: str = "fused"
    n_max: int | None = None

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        if min(self.v_dim, self.t_dim, self.fused_v_dim) < 1:
            raise ValueError("dimensions must be at least 1")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.beta) != 3 or min(self.beta) < 0:
            raise ValueError(f"beta must be three non-negative weights, got {self.beta}")
        if self.beta[0] <= 0:
            raise ValueError("beta[0] (fused head weight) must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.n_max is not None and self.n_max < 1:
            raise ValueError("n_max must be at least 1")

    @property
    def fused_dim(self) -> int:
        return self.fused_v_dim + self.t_dim

    @property
    def pooling(self) -> str:
        return "average" if self.variant in ("average_pool", "text_only") else "attention"

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        # baseline arms train one head only
        if self.variant == "visual_only":
            return (0.0, 1.0, 0.0)
        if self.variant == "text_only":
            return (0.0, 0.0, 1.0)
        return self.beta


@dataclass
class Batch:
    visual: np.ndarray  # B x v_dim
    text: np.ndarray  # B x t_dim x n_max
    mask: np.ndarray  # B x n_max
    labels: np.ndarray  # B
    words: list[list[str]] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.visual.shape[0]

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.intp)
        return Batch(self.visual[idx], self.text[idx], self.mask[idx], self.labels[idx],
                     [self.words[i] for i in idx] if self.words else [],
                     [self.ids[i] for i in idx] if self.ids else [])

    @property
    def has_text(self) -> np.ndarray:
        return self.mask.any(axis=1)


@dataclass
class ModelParams:
    config: ModelConfig
    attention: AttentionParams
    proj_W: np.ndarray  # no bias: batch norm follows and would cancel it
    bn_visual: nn.BatchNormState
    bn_text: nn.BatchNormState
    fused_W: np.ndarray
    fused_b: np.ndarray
    visual_W: np.ndarray
    visual_b: np.ndarray
    text_W: np.ndarray
    text_b: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig) -> "ModelParams":
        rng = np.random.default_rng(config.seed)
        k = config.num_classes
        return cls(
            config=config,
            attention=AttentionParams.init(config.v_dim, config.t_dim, rng),
            proj_W=glorot_uniform(rng, config.fused_v_dim, config.v_dim),
            bn_visual=nn.BatchNormState.create(config.fused_v_dim),
            bn_text=nn.BatchNormState.create(config.t_dim),
            fused_W=glorot_uniform(rng, k, config.fused_dim),
            fused_b=np.zeros(k),
            visual_W=glorot_uniform(rng, k, config.v_dim),
            visual_b=np.zeros(k),
            text_W=glorot_uniform(rng, k + 1, config.t_dim),
            text_b=np.zeros(k + 1),
        )

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        """Trainable tensors by name (live references, update in place)."""
        return OrderedDict([
            ("attention.U", self.attention.U),
            ("proj.W", self.proj_W),
            ("bn_visual.gamma", self.bn_visual.gamma),
            ("bn_visual.beta", self.bn_visual.beta),
            ("bn_text.gamma", self.bn_text.gamma),
            ("bn_text.beta", self.bn_text.beta),
            ("head_fused.W", self.fused_W),
            ("head_fused.b", self.fused_b),
            ("head_visual.W", self.visual_W),
            ("head_visual.b", self.visual_b),
            ("head_text.W", self.text_W),
            ("head_text.b", self.text_b),
        ])

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict([
            ("bn_visual.running_mean", self.bn_visual.running_mean),
            ("bn_visual.running_var", self.bn_visual.running_var),
            ("bn_text.running_mean", self.bn_text.running_mean),
            ("bn_text.running_var", self.bn_text.running_var),
        ])

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors().values()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for t in self.tensors().values():
            t[...] = vec[offset:offset + t.size].reshape(t.shape)
            offset += t.size
        if offset != vec.size:
            raise nn.ShapeError(f"flat vector has {vec.size} entries, model has {offset}")


def is_decay_exempt(name: str) -> bool:
    """Biases and batch-norm scale/shift are not weight-decayed."""
    return name.endswith(".b") or name.startswith("bn_")


@dataclass
class ForwardResult:
    logits_fused: np.ndarray
    logits_visual: np.ndarray
    logits_text: np.ndarray
    fused: np.ndarray  # f_c
    attended: np.ndarray  # f_a, before batch norm
    projected: np.ndarray  # f_v', before batch norm
    weights: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def _check_batch(config: ModelConfig, batch: Batch) -> None:
    b = len(batch)
    if b == 0:
        raise ValueError("empty batch")
    if batch.visual.shape != (b, config.v_dim):
        raise nn.ShapeError(f"visual batch {batch.visual.shape}, expected ({b}, {config.v_dim})")
    if batch.text.ndim != 3 or batch.text.shape[:2] != (b, config.t_dim):
        raise nn.ShapeError(f"text batch {batch.text.shape}, expected ({b}, {config.t_dim}, n_max)")
    if batch.mask.shape != (b, batch.text.shape[2]):
        raise nn.ShapeError(f"mask {batch.mask.shape} does not match text {batch.text.shape}")


def forward(params: ModelParams, batch: Batch, mode: str = "train", update_stats: bool = True) -> ForwardResult:
    cfg = params.config
    _check_batch(cfg, batch)
    if mode == "train" and len(batch) < 2:
        raise ValueError("train mode needs a batch of at least 2 samples (batch norm)")
    fv = batch.visual
    projected = nn.affine_forward(fv, params.proj_W, np.zeros(cfg.fused_v_dim))
    if cfg.pooling == "attention":
        att = attend(fv, params.attention.U, batch.text, batch.mask)
        attended, weights, att_cache = att.attended, att.weights, att.cache
    else:
        attended, weights = average_pool_arrays(batch.text, batch.mask)
        att_cache = None
    bn_v, cache_v = nn.batchnorm_forward(projected, params.bn_visual, mode, update_stats)
    bn_t, cache_t = nn.batchnorm_forward(attended, params.bn_text, mode, update_stats)
    fused = np.concatenate([bn_v, bn_t], axis=1)
    return ForwardResult(
        logits_fused=nn.affine_forward(fused, params.fused_W, params.fused_b),
        logits_visual=nn.affine_forward(fv, params.visual_W, params.visual_b),
        logits_text=nn.affine_forward(attended, params.text_W, params.text_b),
        fused=fused,
        attended=attended,
        projected=projected,
        weights=weights,
        cache={"attention": att_cache, "bn_visual": cache_v, "bn_text": cache_t},
    )


def text_targets(batch: Batch, num_classes: int) -> np.ndarray:
    """Head-3 targets: the label, or the extra class K for samples without words."""
    return np.where(batch.has_text, batch.labels, num_classes).astype(np.intp)


def per_head_loss(logits, target) -> float:
    return nn.softmax_xent(logits, target)[0]


@dataclass
class LossResult:
    total: float
    head_losses: tuple[float, float, float]
    grads: "OrderedDict[str, np.ndarray]"
    forward: ForwardResult


def combined_loss(params: ModelParams, batch: Batch, beta=None, update_stats: bool = True) -> LossResult:
    """Weighted sum of the three per-head mean losses, with gradients for every tensor."""
    cfg = params.config
    b1, b2, b3 = cfg.loss_weights if beta is None else tuple(float(x) for x in beta)
    out = forward(params, batch, "train", update_stats)
    labels = batch.labels.astype(np.intp)
    if np.any(labels < 0) or np.any(labels >= cfg.num_classes):
        raise IndexError("label out of range")
    l1, d1 = nn.softmax_xent(out.logits_fused, labels)
    l2, d2 = nn.softmax_xent(out.logits_visual, labels)
    l3, d3 = nn.softmax_xent(out.logits_text, text_targets(batch, cfg.num_classes))
    m1, m2, m3 = float(np.mean(l1)), float(np.mean(l2)), float(np.mean(l3))
    total = b1 * m1 + b2 * m2 + b3 * m3

    n = len(batch)
    dW1, db1, dfused = nn.affine_backward(d1 * (b1 / n), out.fused, params.fused_W)
    dW2, db2, _ = nn.affine_backward(d2 * (b2 / n), batch.visual, params.visual_W)
    dW3, db3, dfa = nn.affine_backward(d3 * (b3 / n), out.attended, params.text_W)
    fv_dim = cfg.fused_v_dim
    dproj, dgv, dbv = nn.batchnorm_backward(dfused[:, :fv_dim], out.cache["bn_visual"])
    dfa_bn, dgt, dbt = nn.batchnorm_backward(dfused[:, fv_dim:], out.cache["bn_text"])
    dfa = dfa + dfa_bn
    dWp, _, _ = nn.affine_backward(dproj, batch.visual, params.proj_W)
    if cfg.pooling == "attention":
        dU = attend_backward(dfa, out.cache["attention"])[0]
    else:
        dU = np.zeros_like(params.attention.U)
    grads = OrderedDict([
        ("attention.U", dU),
        ("proj.W", dWp),
        ("bn_visual.gamma", dgv),
        ("bn_visual.beta", dbv),
        ("bn_text.gamma", dgt),
        ("bn_text.beta", dbt),
        ("head_fused.W", dW1),
        ("head_fused.b", db1),
        ("head_visual.W", dW2),
        ("head_visual.b", db2),
        ("head_text.W", dW3),
        ("head_text.b", db3),
    ])
    return LossResult(total, (m1, m2, m3), grads, out)


def _head_output(cfg: ModelConfig, out: ForwardResult):
    """(logits used for prediction, feature feeding that head)."""
    if cfg.variant == "visual_only":
        return out.logits_visual, None
    if cfg.variant == "text_only":
        return out.logits_text[:, :cfg.num_classes], out.attended
    return out.logits_fused, out.fused


def predict(params: ModelParams, batch: Batch):
    """Return (classes, scores); scores are softmax rows over the K classes."""
    out = forward(params, batch, "infer")
    logits, _ = _head_output(params.config, out)
    scores = nn.softmax(logits)
    return np.argmax(scores, axis=1), scores


def extract_retrieval_feature(params: ModelParams, batch: Batch) -> np.ndarray:
    """Input vectors of the prediction classifier, one row per sample (``f_c`` for fused models)."""
    out = forward(params, batch, "infer")
    _, feats = _head_output(params.config, out)
    return batch.visual.copy() if feats is None else feats


def loss_and_flat_grad(params: ModelParams, batch: Batch, beta=None):
    """Pure loss closure over the flat trainable vector, for gradient checking."""
    def fn(vec):
        p = params.copy()
        p.set_flat(vec)
        res = combined_loss(p, batch, beta, update_stats=False)
        return res.total, np.concatenate([g.ravel() for g in res.grads.values()])
    return fn


def gradient_report(params: ModelParams, batch: Batch, step: float = 1e-5, corrupt: bool = False):
    """Compare analytic gradients to central differences over every trainable tensor.

    Returns (max_error, worst_tensor_name, worst_index_within_tensor).
    ``corrupt`` perturbs the analytic gradient (negative control).
    """
    fn = loss_and_flat_grad(params, batch)
    base = params.flat()
    _, analytic = fn(base)
    if corrupt:
        analytic = analytic.copy()
        analytic[0] += 1.0
    numeric = nn.numeric_gradient(lambda v: fn(v)[0], base, step)
    errs = nn.relative_errors(analytic, numeric)
    worst = int(np.argmax(errs))
    offset = 0
    for name, t in params.tensors().items():
        if worst < offset + t.size:
            return float(errs[worst]), name, np.unravel_index(worst - offset, t.shape)
        offset += t.size
    raise AssertionError("unreachable")


_MAGIC = b"TFCKPT1\n"


def save_checkpoint(path, params: ModelParams) -> None:
    """Header JSON (config + tensor table) followed by raw little-endian float64 data."""
    arrays = list(params.tensors().items()) + list(params.buffers().items())
    table = []
    offset = 0
    for name, arr in arrays:
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    cfg = asdict(params.config)
    cfg["beta"] = list(cfg["beta"])
    header = json.dumps({
        "config": cfg,
        "batchnorm": {"epsilon": params.bn_visual.epsilon, "momentum": params.bn_visual.momentum},
        "tensors": table,
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a textfusion checkpoint")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    cfg = header["config"]
    cfg["beta"] = tuple(cfg["beta"])
    params = ModelParams.init(ModelConfig(**cfg))
    eps = header["batchnorm"]["epsilon"]
    mom = header["batchnorm"]["momentum"]
    for bn in (params.bn_visual, params.bn_text):
        bn.epsilon, bn.momentum = eps, mom
    targets = dict(params.tensors())
    targets.update(params.buffers())
    seen = set()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in targets or targets[name].shape != shape:
            raise ValueError(f"{path}: tensor {name} {shape} does not fit the configured model")
        n = int(np.prod(shape))
        start = pos + entry["offset"]
        targets[name][...] = np.frombuffer(data, dtype="<f8", count=n, offset=start).reshape(shape)
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return params
