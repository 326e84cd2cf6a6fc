"""Small VGG-style classifier in numpy with manual backpropagation.

Network: [conv3x3(pad 1) -> ReLU]* -> maxpool2x2 per block, then global
average pooling -> FC(fc_units) -> ReLU -> dropout -> FC(3) -> softmax.
Arrays are NCHW. Parameters live in an ordered dict keyed ``conv{i}.weight``,
``conv{i}.bias``, ``fc1.*``, ``fc2.*``; the first ``freeze_depth`` conv
layers are excluded from optimizer updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .augment import DEFAULT_POLICY, AugmentationPolicy

N_CLASSES = 3
LOG_FLOOR = 1e-12
RMS_RHO = 0.9
RMS_EPS = 1e-7


@dataclass(frozen=True)
class ArchSpec:
    """Conv backbone as blocks of (out_channels, conv layers in block)."""
    blocks: tuple[tuple[int, int], ...] = ((8, 1), (16, 1), (32, 1), (64, 1))
    in_channels: int = 1

    def __post_init__(self):
        if not self.blocks or any(c <= 0 or n <= 0 for c, n in self.blocks):
            raise ValueError(f"invalid blocks {self.blocks}")
        if self.in_channels <= 0:
            raise ValueError("in_channels must be positive")

    @property
    def n_conv(self) -> int:
        return sum(n for _, n in self.blocks)

    def conv_layers(self) -> list[tuple[int, int, bool]]:
        """(in_channels, out_channels, pool_after) for each conv layer."""
        layers, cin = [], self.in_channels
        for cout, n in self.blocks:
            for k in range(n):
                layers.append((cin, cout, k == n - 1))
                cin = cout
        return layers

    def to_config(self) -> dict[str, str]:
        return {"blocks": ",".join(f"{c}x{n}" for c, n in self.blocks), "in_channels": str(self.in_channels)}

    @classmethod
    def from_config(cls, section) -> "ArchSpec":
        raw = str(section.get("blocks", "8x1,16x1,32x1,64x1"))
        blocks = []
        for item in raw.split(","):
            c, _, n = item.strip().partition("x")
            blocks.append((int(c), int(n or 1)))
        return cls(tuple(blocks), int(section.get("in_channels", 1)))


DEFAULT_ARCH = ArchSpec()
VGG16_ARCH = ArchSpec(((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)), in_channels=3)


@dataclass(frozen=True)
class HyperParams:
    input_size: int = 220
    dropout_p: float = 0.1
    fc_units: int = 416
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 7
    freeze_depth: int = 10
    policy: AugmentationPolicy = field(default_factory=lambda: DEFAULT_POLICY)

    def problems(self) -> list[str]:
        errs = []
        for name in ("input_size", "fc_units", "batch_size", "max_epochs"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be a positive integer (got {getattr(self, name)})")
        if not self.learning_rate > 0:
            errs.append(f"learning_rate must be positive (got {self.learning_rate})")
        if not 0 <= self.dropout_p < 1:
            errs.append(f"dropout_p must lie in [0, 1) (got {self.dropout_p})")
        for name in ("patience", "freeze_depth"):
            if getattr(self, name) < 0:
                errs.append(f"{name} must be non-negative (got {getattr(self, name)})")
        return errs

    def validate(self, arch: Optional[ArchSpec] = None) -> None:
        errs = self.problems()
        if arch is not None and self.freeze_depth > arch.n_conv:
            errs.append(f"freeze_depth {self.freeze_depth} exceeds the {arch.n_conv} conv layers")
        if errs:
            raise ValueError("; ".join(errs))

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "policy"}
        d["policy"] = self.policy.as_dict()
        return d


@dataclass
class ModelState:
    arch: ArchSpec
    fc_units: int
    dropout_p: float
    params: dict[str, np.ndarray]
    frozen: dict[str, bool]
    accum: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ModelState":
        return replace(self, params={k: v.copy() for k, v in self.params.items()},
                       frozen=dict(self.frozen), accum={k: v.copy() for k, v in self.accum.items()})

    def trainable(self) -> list[str]:
        return [k for k in self.params if not self.frozen[k]]


def param_shapes(arch: ArchSpec, fc_units: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = arch.in_channels
    for i, (cin, cout, _) in enumerate(arch.conv_layers(), start=1):
        shapes[f"conv{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"conv{i}.bias"] = (cout,)
    last = arch.conv_layers()[-1][1]
    shapes["fc1.weight"] = (fc_units, last)
    shapes["fc1.bias"] = (fc_units,)
    shapes["fc2.weight"] = (N_CLASSES, fc_units)
    shapes["fc2.bias"] = (N_CLASSES,)
    return shapes


def frozen_mask(arch: ArchSpec, fc_units: int, freeze_depth: int) -> dict[str, bool]:
    if freeze_depth > arch.n_conv:
        raise ValueError(f"freeze_depth {freeze_depth} exceeds the {arch.n_conv} conv layers")
    mask = {}
    for name in param_shapes(arch, fc_units):
        layer = name.split(".")[0]
        mask[name] = layer.startswith("conv") and int(layer[4:]) <= freeze_depth
    return mask


def state_from_params(arch: ArchSpec, hp: HyperParams, params: dict[str, np.ndarray]) -> ModelState:
    return ModelState(arch, hp.fc_units, hp.dropout_p, params,
                      frozen_mask(arch, hp.fc_units, hp.freeze_depth),
                      {k: np.zeros_like(v) for k, v in params.items()})


def build_model(hp: HyperParams, arch: ArchSpec = DEFAULT_ARCH, seed: int = 0,
                dtype=np.float32) -> ModelState:
    """Fresh model: He-uniform weights (bound sqrt(6/fan_in)), zero biases."""
    hp.validate(arch)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch, hp.fc_units).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return state_from_params(arch, hp, params)


# --- layers -----------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C, H, W, 3, 3)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, _, h, w = x.shape
    cout = weight.shape[0]
    cols = _im2col(x)
    out = cols @ weight.reshape(cout, -1).T + bias
    return out.reshape(b, h, w, cout).transpose(0, 3, 1, 2), cols


def conv_backward(dout: np.ndarray, cols: np.ndarray, weight: np.ndarray, x_shape, need_dx: bool = True):
    b, c, h, w = x_shape
    cout = weight.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (d2.T @ cols).reshape(weight.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ weight.reshape(cout, -1)).reshape(b, h, w, c, 3, 3)
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=dout.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + h, kj:kj + w] += dcols[..., ki, kj].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def maxpool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ValueError(f"feature map {h}x{w} too small for 2x2 pooling")
    xr = x[:, :, :h2 * 2, :w2 * 2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    idx = xr.argmax(axis=-1)
    return np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0], idx


def maxpool_backward(dout: np.ndarray, idx: np.ndarray, x_shape) -> np.ndarray:
    b, c, h, w = x_shape
    h2, w2 = dout.shape[2:]
    onehot = np.zeros((b, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(onehot, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, :h2 * 2, :w2 * 2] = onehot.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2 * 2, w2 * 2)
    return dx


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- model ------------------------------------------------------------------

def forward(state: ModelState, x: np.ndarray, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, dict]:
    """Class probabilities (B, 3) and the activation cache for ``backward``.

    Dropout is inverted (kept units scaled by 1/(1-p)) and only active in
    ``"train"`` mode, which then requires ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4 or x.shape[1] != state.arch.in_channels:
        raise ValueError(f"expected (B, {state.arch.in_channels}, H, W) input, got {x.shape}")
    p = state.params
    x = x.astype(state.dtype, copy=False)
    cache: dict = {"mode": mode, "layers": [], "n_conv": state.arch.n_conv}
    h = x
    for i, (_, _, pool) in enumerate(state.arch.conv_layers(), start=1):
        in_shape = h.shape
        z, cols = conv_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
        relu_mask = z > 0
        h = z * relu_mask
        layer = {"in_shape": in_shape, "cols": cols, "relu": relu_mask}
        if pool:
            layer["pool_in_shape"] = h.shape
            h, layer["pool_idx"] = maxpool_forward(h)
        cache["layers"].append(layer)
    cache["gap_shape"] = h.shape
    g = h.mean(axis=(2, 3))
    z1 = g @ p["fc1.weight"].T + p["fc1.bias"]
    relu1 = z1 > 0
    a1 = z1 * relu1
    if mode == "train" and state.dropout_p > 0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng")
        keep = 1.0 - state.dropout_p
        drop = (rng.random(a1.shape) < keep).astype(a1.dtype) / a1.dtype.type(keep)
        a1 = a1 * drop
    else:
        drop = None
    logits = a1 @ p["fc2.weight"].T + p["fc2.bias"]
    probs = softmax(logits)
    cache.update(g=g, relu1=relu1, drop=drop, a1=a1, logits=logits, probs=probs)
    return probs, cache


def loss_softmax_ce(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean over the batch of ``-sum_k y_k log(max(p_k, 1e-12))``."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise ValueError(f"probs {probs.shape} and targets {targets.shape} differ in shape")
    return float(-(targets * np.log(np.maximum(probs, LOG_FLOOR))).sum(axis=1).mean())


def backward(state: ModelState, cache: dict, targets: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the mean soft-label cross-entropy for every parameter.

    Frozen parameters get gradients too; ``state.frozen`` says which ones the
    optimizer will skip.
    """
    if cache["n_conv"] != state.arch.n_conv or len(cache["layers"]) != state.arch.n_conv:
        raise ValueError("activation cache does not match the model architecture")
    p = state.params
    probs = cache["probs"]
    targets = np.asarray(targets, dtype=probs.dtype)
    if targets.shape != probs.shape:
        raise ValueError(f"targets {targets.shape} do not match predictions {probs.shape}")
    b = probs.shape[0]
    grads: dict[str, np.ndarray] = {}
    dlogits = (probs * targets.sum(axis=1, keepdims=True) - targets) / probs.dtype.type(b)
    grads["fc2.weight"] = dlogits.T @ cache["a1"]
    grads["fc2.bias"] = dlogits.sum(axis=0)
    da1 = dlogits @ p["fc2.weight"]
    if cache["drop"] is not None:
        da1 = da1 * cache["drop"]
    dz1 = da1 * cache["relu1"]
    grads["fc1.weight"] = dz1.T @ cache["g"]
    grads["fc1.bias"] = dz1.sum(axis=0)
    dg = dz1 @ p["fc1.weight"]
    _, _, gh, gw = cache["gap_shape"]
    dh = np.broadcast_to((dg / dg.dtype.type(gh * gw))[:, :, None, None], cache["gap_shape"])
    for i in range(len(cache["layers"]), 0, -1):
        layer = cache["layers"][i - 1]
        if "pool_idx" in layer:
            dh = maxpool_backward(dh, layer["pool_idx"], layer["pool_in_shape"])
        dz = dh * layer["relu"]
        dh, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = conv_backward(
            dz, layer["cols"], p[f"conv{i}.weight"], layer["in_shape"], need_dx=i > 1)
    return {k: grads[k] for k in p}


def rmsprop_update(param: np.ndarray, grad: np.ndarray, accum: np.ndarray, lr: float,
                   rho: float = RMS_RHO, eps: float = RMS_EPS) -> None:
    """In place: ``s = rho*s + (1-rho)*g^2``; ``theta -= lr*g/(sqrt(s)+eps)``."""
    if grad.shape != param.shape or accum.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, accum {accum.shape}")
    accum *= rho
    accum += (1 - rho) * np.square(grad)
    param -= lr * grad / (np.sqrt(accum) + eps)


def rmsprop_step(state: ModelState, grads: dict[str, np.ndarray], lr: float,
                 rho: float = RMS_RHO, eps: float = RMS_EPS) -> ModelState:
    """Apply one RMSprop update to every unfrozen parameter; returns ``state``."""
    for name in state.params:
        if state.frozen[name]:
            continue
        g = grads[name]
        rmsprop_update(state.params[name], g.astype(state.params[name].dtype, copy=False),
                       state.accum[name], lr, rho, eps)
    return state


def predict_proba(state: ModelState, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode probabilities, batched to bound memory."""
    out = [forward(state, x[i:i + batch_size], "eval")[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES), dtype=state.dtype)
