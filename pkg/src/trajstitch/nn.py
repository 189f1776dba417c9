"""Dense MLPs in float64 with hand-written reverse-mode gradients and Adam."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

PARAM_FORMAT_VERSION = 1
_MAGIC = b"TSNN"
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


class ParamFileError(ValueError):
    """Parameter file has the wrong version or is truncated/corrupt."""


@dataclass(frozen=True)
class MLPSpec:
    layer_dims: tuple  # (d_in, hidden..., d_out)
    activation: str = "gelu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 3:
            raise ValueError("MLP needs at least one hidden layer")
        if min(dims) < 1:
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_dims[:-1], self.layer_dims[1:]))

    @property
    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in self.shapes)

    def to_json(self) -> dict:
        return {"layer_dims": list(self.layer_dims), "activation": self.activation}


def _gelu(x):
    # tanh approximation
    t = np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    dt = (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * dt


def unpack(spec: MLPSpec, params: np.ndarray):
    """Views ``[(W, b), ...]`` into the flat parameter vector; W is (d_in, d_out)."""
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} params, got {params.shape}")
    out, off = [], 0
    for i, o in spec.shapes:
        W = params[off : off + i * o].reshape(i, o)
        off += i * o
        b = params[off : off + o]
        off += o
        out.append((W, b))
    return out


def init_params(spec: MLPSpec, seed: int = 0) -> np.ndarray:
    """Kaiming-uniform weights with an independent stream per layer, zero biases."""
    params = np.zeros(spec.n_params)
    layers = unpack(spec, params)
    for li, (W, _) in enumerate(layers):
        fan_in = W.shape[0]
        gain = 2.0 if li < len(layers) - 1 else 1.0
        bound = np.sqrt(3.0 * gain / fan_in)
        W[...] = np.random.default_rng([int(seed), li]).uniform(-bound, bound, W.shape)
    return params


def forward_cache(spec: MLPSpec, params: np.ndarray, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.layer_dims[0]:
        raise ValueError(f"batch must be (B, {spec.layer_dims[0]}), got {x.shape}")
    layers = unpack(spec, params)
    cache = []
    h = x
    for li, (W, b) in enumerate(layers):
        z = h @ W + b
        if li == len(layers) - 1:
            cache.append((h, z, None))
            h = z
        elif spec.activation == "relu":
            cache.append((h, z, None))
            h = np.maximum(z, 0.0)
        else:
            a, t = _gelu(z)
            cache.append((h, z, t))
            h = a
    return h, cache


def forward(spec: MLPSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    return forward_cache(spec, params, x)[0]


def backward_cache(spec: MLPSpec, params: np.ndarray, cache, upstream: np.ndarray):
    layers = unpack(spec, params)
    grads = np.zeros_like(params)
    glayers = unpack(spec, grads)
    g = upstream
    for li in range(len(layers) - 1, -1, -1):
        h, z, t = cache[li]
        if li != len(layers) - 1:
            if spec.activation == "relu":
                g = g * (z > 0)
            else:
                g = g * _gelu_grad(z, t)
        W, _ = layers[li]
        gW, gb = glayers[li]
        gW[...] = h.T @ g
        gb[...] = g.sum(axis=0)
        g = g @ W.T
    return grads, g


def backward(spec: MLPSpec, params: np.ndarray, x: np.ndarray, upstream: np.ndarray):
    """Returns ``(param_grads, input_grads)`` of ``sum(upstream * forward(x))``."""
    out, cache = forward_cache(spec, params, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {out.shape}")
    return backward_cache(spec, params, cache, upstream)


@dataclass
class AdamState:
    lr: float
    n_params: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam (decoupled weight decay); updates ``params`` in place."""
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and moments must share a shape")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    if state.weight_decay:
        params -= state.lr * state.weight_decay * params
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# -- parameter files ----------------------------------------------------------


def params_bytes(spec: MLPSpec, params: np.ndarray) -> bytes:
    header = json.dumps(
        {"format_version": PARAM_FORMAT_VERSION, "spec": spec.to_json(), "count": spec.n_params},
        sort_keys=True,
    ).encode()
    body = np.asarray(params, dtype="<f8").tobytes()
    return _MAGIC + struct.pack("<I", len(header)) + header + body


def params_from_bytes(blob: bytes) -> tuple[MLPSpec, np.ndarray]:
    if len(blob) < 8 or blob[:4] != _MAGIC:
        raise ParamFileError("not a parameter file")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise ParamFileError("truncated header")
    try:
        header = json.loads(blob[8 : 8 + hlen])
    except json.JSONDecodeError as exc:
        raise ParamFileError("corrupt header") from exc
    if header.get("format_version") != PARAM_FORMAT_VERSION:
        raise ParamFileError(f"unsupported format_version {header.get('format_version')}")
    spec = MLPSpec(tuple(header["spec"]["layer_dims"]), header["spec"]["activation"])
    body = blob[8 + hlen :]
    if len(body) != 8 * spec.n_params or header.get("count") != spec.n_params:
        raise ParamFileError("parameter payload truncated or oversized")
    return spec, np.frombuffer(body, dtype="<f8").astype(np.float64)


def save_params(path, spec: MLPSpec, params: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(params_bytes(spec, params))


def load_params(path) -> tuple[MLPSpec, np.ndarray]:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


# -- finite-difference oracle ---------------------------------------------------


def gradcheck(spec, params, x, upstream, h=1e-5, rtol=1e-4, atol=1e-7):
    """Compare analytic gradients with central differences of ``sum(upstream * f)``.

    Returns the worst ``|analytic - numeric| / max(rtol * max(|a|, |n|), atol)``;
    a value <= 1 means every partial derivative is within tolerance.
    """
    params = np.array(params, dtype=np.float64)
    x = np.array(x, dtype=np.float64)
    g_params, g_x = backward(spec, params, x, upstream)

    def objective(p, xx):
        return float(np.sum(upstream * forward(spec, p, xx)))

    worst = 0.0
    for vec, analytic, which in ((params, g_params, "p"), (x.reshape(-1), g_x.reshape(-1), "x")):
        for i in range(vec.size):
            old = vec[i]
            vec[i] = old + h
            fp = objective(params, x) if which == "p" else objective(params, vec.reshape(x.shape))
            vec[i] = old - h
            fm = objective(params, x) if which == "p" else objective(params, vec.reshape(x.shape))
            vec[i] = old
            num = (fp - fm) / (2 * h)
            a = analytic[i]
            worst = max(worst, abs(a - num) / max(rtol * max(abs(a), abs(num)), atol))
    return worst
