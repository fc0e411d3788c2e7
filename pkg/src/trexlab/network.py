"""Encoder, projector and predictor with hand-written backward passes.

Parameters live in flat ``{name: ndarray}`` dicts so that the optimiser, the
EMA shadow and the checkpoint writer can treat them uniformly. A head is a
list of layer descriptors interpreted by :func:`run_layers` and
:func:`backprop_layers`.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import erf

from . import numkit

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
L2_EPS = 1e-12

Params = Dict[str, np.ndarray]


class NumericFault(FloatingPointError):
    def __init__(self, layer: int, name: str, where: str = ""):
        self.layer = layer
        self.name = name
        super().__init__(f"non-finite activation {where}at layer {layer} ({name})")


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pool_grid: int = 8
    hidden_widths: List[int] = Field(default_factory=lambda: [512])
    output_dim: int = 128
    use_batchnorm: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.pool_grid < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValueError("encoder sizes must be positive")
        return self


class ProjectorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_layers: int = 1
    hidden_dim: int = 2048
    bottleneck_dim: int = 256
    input_l2: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.n_layers < 0 or self.hidden_dim < 1 or self.bottleneck_dim < 1:
            raise ValueError("projector sizes must be non-negative / positive")
        return self


class PredictorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = False
    hidden_dim: int = 128


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    projector: ProjectorConfig = Field(default_factory=ProjectorConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)
    # How the EMA shadow tracks batch-norm running statistics.
    ema_bn_stats: Literal["average", "copy"] = "average"


# --- layer primitives ------------------------------------------------------


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


@lru_cache(maxsize=64)
def _pool_matrix(size: int, grid: int, dtype: str) -> np.ndarray:
    m = np.zeros((grid, size))
    for i in range(grid):
        start = (i * size) // grid
        end = -((-(i + 1) * size) // grid)
        m[i, start:end] = 1.0 / (end - start)
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def pool_matrix(size: int, grid: int, dtype="float64") -> np.ndarray:
    """Rows average the input bins of an adaptive average pool."""
    return _pool_matrix(size, grid, np.dtype(dtype).name)


def adaptive_pool(images: np.ndarray, grid: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, grid * grid * 3), row-major over (row, col, channel)."""
    b, h, w, c = images.shape
    ph = pool_matrix(h, grid, images.dtype)
    pw = pool_matrix(w, grid, images.dtype)
    rows = np.matmul(ph, images.reshape(b, h, w * c))  # (b, grid, w*c)
    out = np.matmul(pw, rows.reshape(b * grid, w, c))  # (b*grid, grid, c)
    return out.reshape(b, grid * grid * c)


def adaptive_pool_backward(grad: np.ndarray, image_shape: Tuple[int, ...], grid: int) -> np.ndarray:
    b, h, w, c = image_shape
    ph = pool_matrix(h, grid, grad.dtype)
    pw = pool_matrix(w, grid, grad.dtype)
    cols = np.matmul(pw.T, grad.reshape(b * grid, grid, c))  # (b*grid, w, c)
    out = np.matmul(ph.T, cols.reshape(b, grid, w * c))  # (b, h, w*c)
    return out.reshape(b, h, w, c)


def l2_backward(grad: np.ndarray, y: np.ndarray, norm: np.ndarray) -> np.ndarray:
    """Gradient of v / ||v|| given the normalised output and input norm."""
    dot = np.sum(grad * y, axis=-1, keepdims=True)
    scale = np.where(norm > L2_EPS, 1.0 / np.maximum(norm, L2_EPS), 1.0 / L2_EPS)
    return (grad - y * dot) * scale


Layer = Tuple[str, str]


def _linear(name):
    return ("linear", name)


def _bn(name):
    return ("bn", name)


GELU: Layer = ("gelu", "")
L2: Layer = ("l2", "")


def run_layers(layers: Sequence[Layer], params: Params, buffers: Params, x: np.ndarray, train: bool,
               update_stats: bool = True, offset: int = 0):
    """Forward through ``layers``; returns output and per-layer caches."""
    caches = []
    for i, (kind, name) in enumerate(layers):
        if kind == "linear":
            caches.append(x)
            x = x @ params[name + ".weight"] + params[name + ".bias"]
        elif kind == "bn":
            gamma, beta = params[name + ".gamma"], params[name + ".beta"]
            if train:
                n = x.shape[0]
                mu = x.mean(axis=0)
                var = ((x - mu) ** 2).mean(axis=0)
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (x - mu) * inv_std
                if update_stats:
                    unbiased = var * n / (n - 1) if n > 1 else var
                    rm, rv = buffers[name + ".running_mean"], buffers[name + ".running_var"]
                    rm *= 1.0 - BN_MOMENTUM
                    rm += BN_MOMENTUM * mu
                    rv *= 1.0 - BN_MOMENTUM
                    rv += BN_MOMENTUM * unbiased
            else:
                inv_std = 1.0 / np.sqrt(buffers[name + ".running_var"] + BN_EPS)
                xhat = (x - buffers[name + ".running_mean"]) * inv_std
            caches.append((xhat, inv_std, train))
            x = gamma * xhat + beta
        elif kind == "gelu":
            caches.append(x)
            x = gelu(x)
        elif kind == "l2":
            norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
            x = x / np.maximum(norm, L2_EPS)
            caches.append((x, norm))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        if not np.all(np.isfinite(x)):
            raise NumericFault(offset + i, f"{kind}:{name}" if name else kind)
    return x, caches


def backprop_layers(layers: Sequence[Layer], params: Params, caches: list, grad: np.ndarray,
                    grads: Params) -> np.ndarray:
    """Reverse pass; accumulates parameter gradients into ``grads``."""
    for (kind, name), cache in zip(reversed(layers), reversed(caches)):
        if kind == "linear":
            x = cache
            _acc(grads, name + ".weight", x.T @ grad)
            _acc(grads, name + ".bias", grad.sum(axis=0))
            grad = grad @ params[name + ".weight"].T
        elif kind == "bn":
            xhat, inv_std, train = cache
            gamma = params[name + ".gamma"]
            _acc(grads, name + ".gamma", np.sum(grad * xhat, axis=0))
            _acc(grads, name + ".beta", grad.sum(axis=0))
            dxhat = grad * gamma
            if train:
                n = grad.shape[0]
                grad = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
            else:
                grad = dxhat * inv_std
        elif kind == "gelu":
            grad = grad * gelu_grad(cache)
        elif kind == "l2":
            y, norm = cache
            grad = l2_backward(grad, y, norm)
    return grad


def _acc(grads: Params, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


# --- the network -----------------------------------------------------------


@dataclass
class ForwardCache:
    group_shapes: List[Tuple[int, ...]]
    encoder: list
    projector: list
    predictor: list
    train: bool


@dataclass
class ForwardResult:
    x: np.ndarray  # encoder output, B x d
    z: np.ndarray  # projector output, B x d_b (unit-norm unless vanilla)
    embedding: np.ndarray  # what the loss consumes: predictor(z) or z
    cache: Optional[ForwardCache] = None


class Network:
    """Encoder + projector (+ predictor) with optional class weights.

    ``classifier`` is one of ``"learned"``, ``"frozen_orthogonal"`` or
    ``"absent"``. ``normalize_output=False`` gives the vanilla-softmax variant
    with no l2 normalisation anywhere in the stack.
    """

    def __init__(self, config: ModelConfig, n_classes: int, classifier: str = "learned",
                 normalize_output: bool = True, seed: int = 0):
        if classifier not in ("learned", "frozen_orthogonal", "absent"):
            raise ValueError(f"unknown classifier mode {classifier!r}")
        self.config = config
        self.n_classes = n_classes
        self.classifier = classifier
        self.normalize_output = normalize_output
        self.encoder_layers, self.projector_layers, self.predictor_layers = self._layout()
        self.params, self.buffers = self._init_params(np.random.default_rng(seed))
        self.frozen = {"classifier.weight"} if classifier == "frozen_orthogonal" else set()

    # layout ---------------------------------------------------------------

    @property
    def embed_dim(self) -> int:
        if self.config.projector.n_layers == 0:
            return self.config.encoder.output_dim
        return self.config.projector.bottleneck_dim

    def _layout(self):
        enc_cfg, proj_cfg, pred_cfg = self.config.encoder, self.config.projector, self.config.predictor
        enc: List[Layer] = []
        for i, _ in enumerate(list(enc_cfg.hidden_widths) + [enc_cfg.output_dim]):
            enc.append(_linear(f"encoder.{i}"))
            if enc_cfg.use_batchnorm:
                enc.append(_bn(f"encoder.{i}.bn"))
            enc.append(GELU)
        proj: List[Layer] = []
        if proj_cfg.input_l2 and self.normalize_output:
            proj.append(L2)
        if proj_cfg.n_layers > 0:
            for i in range(proj_cfg.n_layers):
                proj += [_linear(f"projector.{i}"), _bn(f"projector.{i}.bn"), GELU]
            proj.append(_linear("projector.out"))
        if self.normalize_output and not (proj_cfg.n_layers == 0 and proj_cfg.input_l2):
            proj.append(L2)
        pred: List[Layer] = []
        if pred_cfg.enabled:
            pred = [_linear("predictor.0"), _bn("predictor.0.bn"), GELU, _linear("predictor.out")]
            if self.normalize_output:
                pred.append(L2)
        return enc, proj, pred

    def _shapes(self):
        enc_cfg, proj_cfg, pred_cfg = self.config.encoder, self.config.projector, self.config.predictor
        dims = {}
        fan_in = enc_cfg.pool_grid ** 2 * 3
        for i, width in enumerate(list(enc_cfg.hidden_widths) + [enc_cfg.output_dim]):
            dims[f"encoder.{i}"] = (fan_in, width)
            fan_in = width
        if proj_cfg.n_layers > 0:
            for i in range(proj_cfg.n_layers):
                dims[f"projector.{i}"] = (fan_in, proj_cfg.hidden_dim)
                fan_in = proj_cfg.hidden_dim
            dims["projector.out"] = (fan_in, proj_cfg.bottleneck_dim)
        if pred_cfg.enabled:
            db = self.embed_dim
            dims["predictor.0"] = (db, pred_cfg.hidden_dim)
            dims["predictor.out"] = (pred_cfg.hidden_dim, db)
        return dims

    def _init_params(self, rng: np.random.Generator):
        dtype = numkit.get_dtype()
        params: Params = {}
        buffers: Params = {}
        dims = self._shapes()
        for layers in (self.encoder_layers, self.projector_layers, self.predictor_layers):
            for kind, name in layers:
                if kind == "linear":
                    fan_in, fan_out = dims[name]
                    bound = 1.0 / math.sqrt(fan_in)
                    params[name + ".weight"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
                    params[name + ".bias"] = rng.uniform(-bound, bound, fan_out).astype(dtype)
                    width = fan_out
                elif kind == "bn":
                    params[name + ".gamma"] = np.ones(width, dtype)
                    params[name + ".beta"] = np.zeros(width, dtype)
                    buffers[name + ".running_mean"] = np.zeros(width, dtype)
                    buffers[name + ".running_var"] = np.ones(width, dtype)
        c, db = self.n_classes, self.embed_dim
        if self.classifier == "learned":
            bound = 1.0 / math.sqrt(db)
            params["classifier.weight"] = rng.uniform(-bound, bound, (c, db)).astype(dtype)
        elif self.classifier == "frozen_orthogonal":
            params["classifier.weight"] = orthogonal_rows(c, db, rng).astype(dtype)
        return params, buffers

    # passes ---------------------------------------------------------------

    def backbone_keys(self) -> List[str]:
        """Names of encoder and projector parameters (the EMA-tracked set)."""
        return [k for k in self.params if k.startswith(("encoder.", "projector."))]

    def encode(self, crops, train: bool, params: Optional[Params] = None, buffers: Optional[Params] = None,
               update_stats: bool = True):
        params = self.params if params is None else params
        buffers = self.buffers if buffers is None else buffers
        groups = [crops] if isinstance(crops, np.ndarray) else list(crops)
        groups = [g for g in groups if len(g)]
        dtype = numkit.get_dtype()
        grid = self.config.encoder.pool_grid
        pooled = np.concatenate([adaptive_pool(np.asarray(g, dtype=dtype), grid) for g in groups], axis=0)
        x, cache = run_layers(self.encoder_layers, params, buffers, pooled, train, update_stats)
        return x, cache, [g.shape for g in groups]

    def forward(self, crops, train: bool = True, params: Optional[Params] = None,
                buffers: Optional[Params] = None, update_stats: bool = True,
                use_predictor: bool = True) -> ForwardResult:
        """Run all crop groups (one array per resolution) as one batch."""
        params = self.params if params is None else params
        buffers = self.buffers if buffers is None else buffers
        x, enc_cache, shapes = self.encode(crops, train, params, buffers, update_stats)
        off = len(self.encoder_layers)
        z, proj_cache = run_layers(self.projector_layers, params, buffers, x, train, update_stats, off)
        off += len(self.projector_layers)
        if self.predictor_layers and use_predictor:
            emb, pred_cache = run_layers(self.predictor_layers, params, buffers, z, train, update_stats, off)
        else:
            emb, pred_cache = z, []
        cache = ForwardCache(shapes, enc_cache, proj_cache, pred_cache, train)
        return ForwardResult(x, z, emb, cache)

    def backward(self, cache: ForwardCache, grad_embedding: np.ndarray) -> Params:
        if cache is None or not cache.train:
            raise ValueError("backward needs the cache of a train-mode forward pass")
        grads: Params = {}
        g = grad_embedding
        if self.predictor_layers:
            g = backprop_layers(self.predictor_layers, self.params, cache.predictor, g, grads)
        g = backprop_layers(self.projector_layers, self.params, cache.projector, g, grads)
        backprop_layers(self.encoder_layers, self.params, cache.encoder, g, grads)
        for k in self.params:
            if k not in grads and k != "classifier.weight":
                grads[k] = np.zeros_like(self.params[k])
        return grads

    def features(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode encoder outputs for already-transformed images."""
        outs = []
        for start in range(0, len(images), batch_size):
            x, _, _ = self.encode(images[start:start + batch_size], train=False)
            outs.append(x)
        if not outs:
            return np.zeros((0, self.config.encoder.output_dim), numkit.get_dtype())
        return np.concatenate(outs, axis=0)

    def embed_eval(self, images: np.ndarray) -> np.ndarray:
        return self.forward(images, train=False).embedding


def orthogonal_rows(n_rows: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``n_rows`` orthonormal vectors in R^dim via QR of a Gaussian matrix."""
    if n_rows > dim:
        raise ValueError(f"cannot build {n_rows} orthogonal rows in dimension {dim}")
    q, r = np.linalg.qr(rng.standard_normal((dim, n_rows)))
    q = q * np.sign(np.diag(r))
    return q.T.copy()


@dataclass
class EmaShadow:
    """Momentum copies of encoder/projector parameters and their BN statistics."""

    params: Params
    buffers: Params
    momentum: float
    bn_stats: str = "average"

    @classmethod
    def from_network(cls, net: Network, momentum: float) -> "EmaShadow":
        keys = net.backbone_keys()
        params = {k: net.params[k].copy() for k in keys}
        buffers = {k: v.copy() for k, v in net.buffers.items() if k.startswith(("encoder.", "projector."))}
        return cls(params, buffers, float(momentum), net.config.ema_bn_stats)

    def update(self, net: Network) -> None:
        """shadow <- m * shadow + (1 - m) * online, in place."""
        m = self.momentum
        for k, v in self.params.items():
            online = net.params[k]
            if v.shape != online.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {online.shape}")
            v *= m
            v += (1.0 - m) * online
        for k, v in self.buffers.items():
            if self.bn_stats == "copy":
                v[...] = net.buffers[k]
            else:
                v *= m
                v += (1.0 - m) * net.buffers[k]

    def embed(self, net: Network, crops) -> np.ndarray:
        """Projector outputs of the shadow network (batch statistics, no stat updates)."""
        return net.forward(crops, train=True, params=self.params, buffers=self.buffers, update_stats=False,
                           use_predictor=False).z
