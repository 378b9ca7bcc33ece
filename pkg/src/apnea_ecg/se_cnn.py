"""Small 1D CNN with grouped-convolution residual blocks and squeeze-and-excitation gates.

Everything is plain numpy: each layer has a forward that returns a cache and
a backward that consumes it. Layout of the network::

    stem   conv k=8 s=4 -> BN -> ReLU                       (C, 900) -> (W, 225)
    block  grouped conv k=3 -> BN -> ReLU -> conv 1x1 -> BN
           -> SE gate -> + identity -> ReLU -> avg-pool 2   (repeated n_blocks times)
    head   global average pool -> linear -> softmax
"""

from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .metrics_eval import compute_metrics, confusion

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
STEM_KERNEL, STEM_STRIDE, STEM_PAD = 8, 4, 2
CKPT_MAGIC = b"SECK"
CKPT_VERSION = 1


class ShapeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    n_blocks: int = 3
    width: int = 32
    cardinality: int = 4
    se_reduction: int = 8
    n_classes: int = 2

    def __post_init__(self):
        if self.in_channels not in (2, 4):
            raise ValueError("in_channels must be 2 (R only) or 4 (R and S)")
        if self.n_blocks < 1 or self.width < 1 or self.cardinality < 1:
            raise ValueError("n_blocks, width and cardinality must be positive")
        if self.width % self.cardinality:
            raise ValueError("width must be divisible by cardinality")
        if not 1 <= self.se_reduction <= self.width:
            raise ValueError("se_reduction must lie in [1, width]")
        if self.n_classes != 2:
            raise ValueError("only binary classification is supported")

    @property
    def se_hidden(self) -> int:
        return max(1, self.width // self.se_reduction)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.params.items()},
                           {k: v.astype(dtype) for k, v in self.buffers.items()})


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    W, G, H = config.width, config.cardinality, config.se_hidden
    p: dict[str, np.ndarray] = {}
    b: dict[str, np.ndarray] = {}

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    def bn(prefix, c):
        p[f"{prefix}.gamma"] = np.ones(c)
        p[f"{prefix}.beta"] = np.zeros(c)
        b[f"{prefix}.mean"] = np.zeros(c)
        b[f"{prefix}.var"] = np.ones(c)

    p["stem.w"] = he((W, config.in_channels, STEM_KERNEL), config.in_channels * STEM_KERNEL)
    bn("stem.bn", W)
    for i in range(config.n_blocks):
        k = f"block{i}"
        p[f"{k}.conv1.w"] = he((W, W // G, 3), 3 * W // G)
        bn(f"{k}.bn1", W)
        p[f"{k}.conv2.w"] = he((W, W, 1), W)
        bn(f"{k}.bn2", W)
        p[f"{k}.se.w1"] = he((W, H), W)
        p[f"{k}.se.b1"] = np.zeros(H)
        p[f"{k}.se.w2"] = rng.normal(0.0, np.sqrt(1.0 / H), (H, W))
        p[f"{k}.se.b2"] = np.zeros(W)
    p["head.w"] = rng.normal(0.0, 0.01, (W, config.n_classes))
    p["head.b"] = np.zeros(config.n_classes)
    return ModelParams(config, {k: v.astype(dtype) for k, v in p.items()},
                       {k: v.astype(dtype) for k, v in b.items()})


# ---------------------------------------------------------------------------
# layers


def conv1d_forward(x, w, stride=1, pad=0, groups=1):
    B, C, L = x.shape
    Cout, Cg, K = w.shape
    if C != Cg * groups:
        raise ShapeError(f"conv expects {Cg * groups} input channels, got {C}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    Lout = (L + 2 * pad - K) // stride + 1
    win = sliding_window_view(xp, K, axis=2)[:, :, : stride * (Lout - 1) + 1 : stride]
    cols = win.reshape(B, groups, Cg, Lout, K).transpose(0, 1, 3, 2, 4).reshape(B, groups, Lout, Cg * K)
    wg = w.reshape(groups, Cout // groups, Cg * K).transpose(0, 2, 1)
    out = (cols @ wg).transpose(0, 1, 3, 2).reshape(B, Cout, Lout)
    return out, (cols, wg, x.shape, stride, pad, groups, K)


def conv1d_backward(dout, cache):
    cols, wg, (B, C, L), stride, pad, groups, K = cache
    Cout, Lout = dout.shape[1], dout.shape[2]
    Cg = C // groups
    d = dout.reshape(B, groups, Cout // groups, Lout).transpose(0, 1, 3, 2)
    dwg = np.einsum("bglk,bglo->gko", cols, d, optimize=True)
    dw = dwg.transpose(0, 2, 1).reshape(Cout, Cg, K)
    dcols = (d @ wg.transpose(0, 2, 1)).reshape(B, groups, Lout, Cg, K)
    dcols = dcols.transpose(0, 1, 3, 2, 4).reshape(B, C, Lout, K)
    dxp = np.zeros((B, C, L + 2 * pad), dtype=dout.dtype)
    for k in range(K):
        dxp[:, :, k : k + stride * (Lout - 1) + 1 : stride] += dcols[..., k]
    return dxp[:, :, pad : pad + L], dw


def bn_forward(x, gamma, beta, mean, var, train):
    if train:
        mu = x.mean(axis=(0, 2))
        sig = x.var(axis=(0, 2))
    else:
        mu, sig = mean, var
    inv = 1.0 / np.sqrt(sig + BN_EPS)
    xhat = (x - mu[None, :, None]) * inv[None, :, None]
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    return out, (xhat, inv, gamma, train), (mu, sig)


def bn_backward(dout, cache):
    xhat, inv, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 2))
    dbeta = dout.sum(axis=(0, 2))
    dxhat = dout * gamma[None, :, None]
    if not train:
        return dxhat * inv[None, :, None], dgamma, dbeta
    n = dout.shape[0] * dout.shape[2]
    dx = (inv[None, :, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2))[None, :, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return dx, dgamma, dbeta


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def se_forward(h, w1, b1, w2, b2, bypass=False):
    s = h.mean(axis=2)
    z = s @ w1 + b1
    a = np.maximum(z, 0)
    e = _sigmoid(a @ w2 + b2)
    if bypass:
        e = np.ones_like(e)
    return h * e[:, :, None], (h, s, z, a, e, w1, w2, bypass)


def se_backward(dout, cache):
    h, s, z, a, e, w1, w2, bypass = cache
    dh = dout * e[:, :, None]
    if bypass:
        zeros = np.zeros_like
        return dh, zeros(w1), zeros(w1[0]), zeros(w2), zeros(w2[0])
    de = (dout * h).sum(axis=2)
    du = de * e * (1.0 - e)
    dw2 = a.T @ du
    db2 = du.sum(axis=0)
    dz = (du @ w2.T) * (z > 0)
    dw1 = s.T @ dz
    db1 = dz.sum(axis=0)
    dh += (dz @ w1.T)[:, :, None] / h.shape[2]
    return dh, dw1, db1, dw2, db2


def _pool2(x):
    L2 = x.shape[2] // 2
    return x[:, :, : 2 * L2].reshape(x.shape[0], x.shape[1], L2, 2).mean(axis=3)


def _pool2_backward(dout, L):
    dx = np.zeros(dout.shape[:2] + (L,), dtype=dout.dtype)
    dx[:, :, : 2 * dout.shape[2]] = np.repeat(dout * 0.5, 2, axis=2)
    return dx


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# network


def forward(model: ModelParams, x, train: bool = False, se_bypass: bool = False,
            return_cache: bool = False, update_stats: bool = False):
    """Class probabilities for a batch of shape (batch, in_channels, length).

    ``train`` uses batch statistics in normalisation layers; with
    ``update_stats`` the running averages are updated as well.
    """
    cfg, p, buf = model.config, model.params, model.buffers
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 3 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input (batch, {cfg.in_channels}, length), got {x.shape}")
    if x.shape[2] < 4 * STEM_STRIDE * 2 ** cfg.n_blocks:
        raise ShapeError(f"input length {x.shape[2]} too short for {cfg.n_blocks} blocks")
    caches = {}
    stats = {}

    def bn(name, h):
        out, c, st = bn_forward(h, p[f"{name}.gamma"], p[f"{name}.beta"],
                                buf[f"{name}.mean"], buf[f"{name}.var"], train)
        caches[name] = c
        stats[name] = st
        return out

    h, caches["stem.conv"] = conv1d_forward(x, p["stem.w"], STEM_STRIDE, STEM_PAD)
    h = bn("stem.bn", h)
    caches["stem.relu"] = h > 0
    h = np.maximum(h, 0)
    for i in range(cfg.n_blocks):
        k = f"block{i}"
        identity = h
        u, caches[f"{k}.conv1"] = conv1d_forward(h, p[f"{k}.conv1.w"], 1, 1, cfg.cardinality)
        u = bn(f"{k}.bn1", u)
        caches[f"{k}.relu1"] = u > 0
        u = np.maximum(u, 0)
        u, caches[f"{k}.conv2"] = conv1d_forward(u, p[f"{k}.conv2.w"])
        u = bn(f"{k}.bn2", u)
        u, caches[f"{k}.se"] = se_forward(u, p[f"{k}.se.w1"], p[f"{k}.se.b1"],
                                          p[f"{k}.se.w2"], p[f"{k}.se.b2"], se_bypass)
        u = u + identity
        caches[f"{k}.relu2"] = u > 0
        u = np.maximum(u, 0)
        caches[f"{k}.pool"] = u.shape[2]
        h = _pool2(u)
    g = h.mean(axis=2)
    caches["gap"] = (h.shape[2], g)
    probs = softmax(g @ p["head.w"] + p["head.b"])

    if train and update_stats:
        for name, (mu, var) in stats.items():
            buf[f"{name}.mean"] *= 1 - BN_MOMENTUM
            buf[f"{name}.mean"] += BN_MOMENTUM * mu
            buf[f"{name}.var"] *= 1 - BN_MOMENTUM
            buf[f"{name}.var"] += BN_MOMENTUM * var
    return (probs, caches) if return_cache else probs


def loss_and_grads(model: ModelParams, x, labels, se_bypass: bool = False, update_stats: bool = False):
    """Mean cross-entropy and its gradient for every parameter (batch statistics mode)."""
    cfg, p = model.config, model.params
    y = np.asarray(labels, dtype=np.int64)
    probs, caches = forward(model, x, train=True, se_bypass=se_bypass, return_cache=True,
                            update_stats=update_stats)
    B = probs.shape[0]
    if y.shape != (B,):
        raise ShapeError(f"expected {B} labels, got shape {y.shape}")
    tiny = np.finfo(probs.dtype).tiny
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(B), y], tiny))))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")
    grads: dict[str, np.ndarray] = {}

    dlogits = probs.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    L, g = caches["gap"]
    grads["head.w"] = g.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dg = dlogits @ p["head.w"].T
    dh = np.repeat(dg[:, :, None] / L, L, axis=2)

    def bn_back(name, d):
        d, grads[f"{name}.gamma"], grads[f"{name}.beta"] = bn_backward(d, caches[name])
        return d

    for i in reversed(range(cfg.n_blocks)):
        k = f"block{i}"
        du = _pool2_backward(dh, caches[f"{k}.pool"])
        du = du * caches[f"{k}.relu2"]
        d_identity = du
        du, grads[f"{k}.se.w1"], grads[f"{k}.se.b1"], grads[f"{k}.se.w2"], grads[f"{k}.se.b2"] = \
            se_backward(du, caches[f"{k}.se"])
        du = bn_back(f"{k}.bn2", du)
        du, grads[f"{k}.conv2.w"] = conv1d_backward(du, caches[f"{k}.conv2"])
        du = du * caches[f"{k}.relu1"]
        du = bn_back(f"{k}.bn1", du)
        du, grads[f"{k}.conv1.w"] = conv1d_backward(du, caches[f"{k}.conv1"])
        dh = du + d_identity
    dh = dh * caches["stem.relu"]
    dh = bn_back("stem.bn", dh)
    _, grads["stem.w"] = conv1d_backward(dh, caches["stem.conv"])
    return loss, {k: grads[k].astype(p[k].dtype, copy=False) for k in p}


def backward(model: ModelParams, x, labels) -> dict[str, np.ndarray]:
    return loss_and_grads(model, x, labels)[1]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: ModelParams
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def to_bytes(self) -> bytes:
        m = self.model.astype(np.float32)
        tensors = [("param", k, v) for k, v in sorted(m.params.items())]
        tensors += [("buffer", k, v) for k, v in sorted(m.buffers.items())]
        head = {
            "config": asdict(m.config),
            "meta": self.meta,
            "tensors": [[kind, k, list(v.shape)] for kind, k, v in tensors],
        }
        hj = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = io.BytesIO()
        out.write(CKPT_MAGIC)
        out.write(struct.pack("<HI", CKPT_VERSION, len(hj)))
        out.write(hj)
        for _, _, v in tensors:
            out.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
        body = out.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise ValueError("checkpoint checksum mismatch")
        version, hlen = struct.unpack_from("<HI", body, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        head = json.loads(body[10 : 10 + hlen])
        pos = 10 + hlen
        params, buffers = {}, {}
        for kind, name, shape in head["tensors"]:
            n = int(np.prod(shape))
            arr = np.frombuffer(body, "<f4", n, pos).reshape(shape).astype(np.float32)
            pos += 4 * n
            (params if kind == "param" else buffers)[name] = arr
        model = ModelParams(ModelConfig(**head["config"]), params, buffers)
        return cls(model, head["meta"])

    def save(self, path) -> None:
        from .wfdb_io import atomic_write

        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# training and inference


def segments_to_arrays(segments: Sequence, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    if not segments:
        return np.zeros((0, 0, 0), dtype=dtype), np.zeros(0, dtype=np.int64)
    x = np.stack([s.channels for s in segments]).astype(dtype)
    y = np.array([s.label for s in segments], dtype=np.int64)
    return x, y


def canonical_order(segments: Sequence) -> list:
    """Sort segments so the sampler, not the caller's ordering, decides batch composition."""
    return sorted(segments, key=lambda s: (s.record_id, s.minute_index, s.label,
                                           s.channels.tobytes()))


def predict_proba(model: ModelParams, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x)
    out = [forward(model, x[i : i + batch_size])[:, 1] for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def labels_from_proba(p_sa, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(p_sa) >= threshold).astype(np.int64)


def predict(checkpoint: Checkpoint | ModelParams, segments: Sequence, threshold: float = 0.5,
            batch_size: int = 256) -> np.ndarray:
    model = checkpoint.model if isinstance(checkpoint, Checkpoint) else checkpoint
    x, _ = segments_to_arrays(segments)
    if len(segments) == 0:
        return np.zeros(0, dtype=np.int64)
    if x.shape[1] != model.config.in_channels:
        raise ShapeError(
            f"channel mismatch: checkpoint expects {model.config.in_channels}, segments have {x.shape[1]}"
        )
    return labels_from_proba(predict_proba(model, x, batch_size), threshold)


def select_best_epoch(f1_history: Sequence[float], val_losses: Sequence[float] | None = None) -> int:
    """1-based epoch with the highest F1.

    Ties go to the lower validation loss when losses are given, then to the
    earliest epoch.
    """
    if not f1_history:
        raise ValueError("empty history")
    f1 = np.asarray(f1_history, dtype=np.float64)
    loss = np.zeros_like(f1) if val_losses is None else np.asarray(val_losses, dtype=np.float64)
    if loss.shape != f1.shape:
        raise ValueError("f1_history and val_losses differ in length")
    order = np.lexsort((np.arange(f1.size), loss, -f1))
    return int(order[0]) + 1


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    best_epoch: int
    diverged: bool = False


def train(config: TrainConfig, train_segments: Sequence, val_segments: Sequence,
          model_config: ModelConfig | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """SGD with momentum; keeps the epoch with the best validation F1 for the SA class (lower val loss breaks ties)."""
    if not train_segments or not val_segments:
        raise ValueError("training and validation sets must be non-empty")
    train_segments = canonical_order(train_segments)
    x, y = segments_to_arrays(train_segments)
    xv, yv = segments_to_arrays(val_segments)
    if xv.shape[1] != x.shape[1]:
        raise ShapeError("training and validation segments differ in channel count")
    if model_config is None:
        model_config = ModelConfig(in_channels=x.shape[1])
    elif model_config.in_channels != x.shape[1]:
        raise ShapeError(f"model expects {model_config.in_channels} channels, data has {x.shape[1]}")

    init_seed, sampler_seed = np.random.SeedSequence(config.seed).spawn(2)
    model = init_params(model_config, int(init_seed.generate_state(1)[0]))
    sampler = np.random.default_rng(sampler_seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}

    history: list[dict] = []
    best: tuple[float, int, ModelParams] | None = None
    diverged = False
    last_good = model.copy()
    for epoch in range(1, config.epochs + 1):
        order = sampler.permutation(len(y))
        losses = []
        try:
            for i in range(0, len(order), config.batch_size):
                idx = order[i : i + config.batch_size]
                loss, grads = loss_and_grads(model, x[idx], y[idx], update_stats=True)
                losses.append(loss)
                for k, g in grads.items():
                    v = velocity[k]
                    v *= config.momentum
                    v += g
                    model.params[k] -= config.learning_rate * v
                if not all(np.all(np.isfinite(v)) for v in model.params.values()):
                    raise DivergenceError("non-finite parameters")
        except DivergenceError as exc:
            log.error("epoch %d: %s; stopping with last good checkpoint", epoch, exc)
            diverged = True
            break
        last_good = model.copy()
        pv = predict_proba(model, xv)
        pred = labels_from_proba(pv)
        rep = compute_metrics(confusion(pred, yv))
        p_true = np.where(yv == 1, pv, 1.0 - pv)
        val_loss = float(-np.mean(np.log(np.maximum(p_true, 1e-12))))
        train_acc = float(np.mean(labels_from_proba(predict_proba(model, x)) == y))
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "train_accuracy": train_acc,
               "val_f1_sa": rep.f1_sa, "val_accuracy": rep.accuracy, "val_loss": val_loss}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        if best is None or (rep.f1_sa, -val_loss) > (best[0], best[3]):
            best = (rep.f1_sa, epoch, model.copy(), -val_loss)

    if best is None:
        best = (None, 0, last_good, None)
    meta = {"best_epoch": best[1], "val_f1_sa": best[0], "train_config": asdict(config),
            "history": history, "diverged": diverged}
    return TrainResult(Checkpoint(best[2].astype(np.float32), meta), history, best[1], diverged)
