"""Small numpy MLP toolkit with hand-written reverse-mode gradients.

Every parametric map in the agent is an MLP stored as named segments of one
flat :class:`ParamVector`. Forward passes accept a single vector ``(d,)`` or
a batch ``(B, d)``; backward passes accumulate parameter gradients (summed
over the batch) into a gradient vector that shares the parameter layout, so
gradient scoping can be checked segment by segment.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Activation",
    "AdamState",
    "FiniteDiffReport",
    "MlpSpec",
    "NonFiniteError",
    "ParamVector",
    "ShapeError",
    "adam_step",
    "ema_update",
    "finite_diff_check",
    "init_mlp",
    "load_params",
    "mlp_backward",
    "mlp_forward",
    "mlp_layout",
    "save_params",
]

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when an input or parameter segment has the wrong shape."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss, target or gradient is NaN or infinite."""


class Activation(str, enum.Enum):
    ELU = "elu"
    TANH = "tanh"
    IDENTITY = "identity"


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network.

    Hidden layers use ``activation``; the last affine layer uses
    ``output_activation`` and is optionally followed by a layer norm without
    affine parameters.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: Activation = Activation.ELU
    output_layernorm: bool = False
    output_activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "output_activation", Activation(self.output_activation))
        dims = self.dims
        if any(d < 1 for d in dims):
            raise ValueError(f"all MLP dims must be >= 1, got {dims}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1


class ParamVector:
    """Flat float array partitioned into named, shaped segments.

    ``pv[name]`` returns a writable reshaped view into ``pv.values``.
    """

    def __init__(self, layout: Iterable[tuple[str, Sequence[int]]], values=None, dtype=np.float64):
        self.layout: list[tuple[str, tuple[int, ...]]] = []
        self._slices: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in layout:
            shape = tuple(int(s) for s in shape)
            if name in self._slices:
                raise ValueError(f"duplicate segment name {name!r}")
            size = math.prod(shape)
            self.layout.append((name, shape))
            self._slices[name] = (offset, offset + size, shape)
            offset += size
        self.size = offset
        self._views: dict[str, np.ndarray] = {}
        self._checked: set = set()
        if values is None:
            self.values = np.zeros(offset, dtype=dtype)
        else:
            values = np.asarray(values, dtype=dtype)
            if values.shape != (offset,):
                raise ShapeError(f"values have shape {values.shape}, layout needs ({offset},)")
            self.values = values

    @property
    def values(self) -> np.ndarray:
        return self._values

    @values.setter
    def values(self, new: np.ndarray) -> None:
        self._values = new
        self._views = {}

    def __getitem__(self, name: str) -> np.ndarray:
        view = self._views.get(name)
        if view is None:
            try:
                start, stop, shape = self._slices[name]
            except KeyError:
                raise ShapeError(f"missing parameter segment {name!r}") from None
            view = self._views[name] = self._values[start:stop].reshape(shape)
        return view

    def __setitem__(self, name: str, value) -> None:
        self[name][...] = value

    def __contains__(self, name: str) -> bool:
        return name in self._slices

    def __len__(self) -> int:
        return self.size

    def __repr__(self) -> str:
        return f"ParamVector({len(self.layout)} segments, size={self.size}, dtype={self.values.dtype})"

    @property
    def dtype(self):
        return self.values.dtype

    def names(self, prefix: str | None = None) -> list[str]:
        """Segment names, optionally restricted to ``prefix`` (``"q"`` matches ``"q.0.weight"``)."""
        if prefix is None:
            return [n for n, _ in self.layout]
        return [n for n, _ in self.layout if n == prefix or n.startswith(prefix + ".")]

    def segment_slice(self, name: str) -> slice:
        start, stop, _ = self._slices[name]
        return slice(start, stop)

    def mask(self, prefixes: Iterable[str]) -> np.ndarray:
        """Boolean mask over ``values`` selecting every segment under ``prefixes``."""
        out = np.zeros(self.size, dtype=bool)
        for prefix in prefixes:
            for name in self.names(prefix):
                out[self.segment_slice(name)] = True
        return out

    def indices(self, prefixes: Iterable[str]) -> np.ndarray:
        return np.flatnonzero(self.mask(prefixes))

    def zeros_like(self) -> ParamVector:
        return ParamVector(self.layout, dtype=self.values.dtype)

    def copy(self) -> ParamVector:
        return ParamVector(self.layout, self.values.copy(), dtype=self.values.dtype)

    def with_values(self, values) -> ParamVector:
        return ParamVector(self.layout, values, dtype=self.values.dtype)


def mlp_layout(spec: MlpSpec, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
    dims = spec.dims
    layout = []
    for i in range(spec.n_layers):
        layout.append((f"{prefix}.{i}.weight", (dims[i + 1], dims[i])))
        layout.append((f"{prefix}.{i}.bias", (dims[i + 1],)))
    return layout


def init_mlp(spec: MlpSpec, params: ParamVector, prefix: str, rng: np.random.Generator) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases, in place."""
    for i in range(spec.n_layers):
        fan_in = spec.dims[i]
        bound = 1.0 / math.sqrt(fan_in)
        for part in ("weight", "bias"):
            seg = params[f"{prefix}.{i}.{part}"]
            seg[...] = rng.uniform(-bound, bound, size=seg.shape)


def _act(kind: Activation, x: np.ndarray) -> np.ndarray:
    if kind is Activation.ELU:
        out = np.minimum(x, 0.0)
        np.expm1(out, out=out)
        out += np.maximum(x, 0.0)
        return out
    if kind is Activation.TANH:
        return np.tanh(x)
    return x


def _act_grad(kind: Activation, pre: np.ndarray, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind is Activation.ELU:
        # out > 0 exactly where pre > 0, and out + 1 = exp(pre) elsewhere
        return g * (np.minimum(out, 0.0) + 1.0)
    if kind is Activation.TANH:
        return g * (1.0 - out * out)
    return g


def _check_input(spec: MlpSpec, x: np.ndarray, prefix: str) -> None:
    if x.ndim not in (1, 2) or x.shape[-1] != spec.input_dim:
        raise ShapeError(f"{prefix}: input has shape {x.shape}, expected (..., {spec.input_dim})")


def _check_params(spec: MlpSpec, params: ParamVector, prefix: str) -> None:
    # the layout of a ParamVector never changes, so one successful check suffices
    if (spec, prefix) in params._checked:
        return
    for name, shape in mlp_layout(spec, prefix):
        got = params[name].shape
        if got != shape:
            raise ShapeError(f"segment {name!r} has shape {got}, expected {shape}")
    params._checked.add((spec, prefix))


@dataclass
class _MlpCache:
    inputs: list = field(default_factory=list)  # input to each affine layer
    pres: list = field(default_factory=list)  # pre-activations
    outs: list = field(default_factory=list)  # post-activations
    ln_y: np.ndarray | None = None
    ln_inv_std: np.ndarray | None = None
    squeeze: bool = False


def _forward(spec: MlpSpec, params: ParamVector, x, prefix: str, cache: bool):
    x = np.asarray(x, dtype=params.dtype)
    _check_input(spec, x, prefix)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    c = _MlpCache(squeeze=squeeze) if cache else None
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        w = params[f"{prefix}.{i}.weight"]
        b = params[f"{prefix}.{i}.bias"]
        pre = h @ w.T
        pre += b
        kind = spec.output_activation if i == last else spec.activation
        out = _act(kind, pre)
        if c is not None:
            c.inputs.append(h)
            c.pres.append(pre)
            c.outs.append(out)
        h = out
    if spec.output_layernorm:
        mu = h.mean(axis=-1, keepdims=True)
        var = h.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
        h = (h - mu) * inv_std
        if c is not None:
            c.ln_y = h
            c.ln_inv_std = inv_std
    y = h[0] if squeeze else h
    return (y, c) if cache else y


def mlp_forward(spec: MlpSpec, params: ParamVector, x, prefix: str = "mlp") -> np.ndarray:
    """Evaluate the network on ``x`` of shape ``(input_dim,)`` or ``(B, input_dim)``."""
    _check_params(spec, params, prefix)
    return _forward(spec, params, x, prefix, cache=False)


def mlp_forward_cached(spec: MlpSpec, params: ParamVector, x, prefix: str = "mlp"):
    """Like :func:`mlp_forward` but also returns the activations needed for backward."""
    return _forward(spec, params, x, prefix, cache=True)


def mlp_backward_cached(
    spec: MlpSpec,
    params: ParamVector,
    cache: _MlpCache,
    output_grad,
    prefix: str = "mlp",
    grad: ParamVector | None = None,
) -> np.ndarray:
    """Backpropagate ``output_grad`` through a cached forward pass.

    Parameter gradients are added into ``grad`` when given (pass ``None`` to
    only propagate to the input). Returns the input gradient.
    """
    g = np.asarray(output_grad, dtype=params.dtype)
    if g.shape[-1] != spec.output_dim:
        raise ShapeError(f"{prefix}: output_grad has shape {g.shape}, expected (..., {spec.output_dim})")
    if cache.squeeze:
        g = g[None, :]
    if spec.output_layernorm:
        y, inv_std = cache.ln_y, cache.ln_inv_std
        g = inv_std * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True))
    last = spec.n_layers - 1
    for i in range(last, -1, -1):
        kind = spec.output_activation if i == last else spec.activation
        g = _act_grad(kind, cache.pres[i], cache.outs[i], g)
        w = params[f"{prefix}.{i}.weight"]
        if grad is not None:
            grad[f"{prefix}.{i}.weight"] += g.T @ cache.inputs[i]
            grad[f"{prefix}.{i}.bias"] += g.sum(axis=0)
        g = g @ w
    return g[0] if cache.squeeze else g


def mlp_backward(
    spec: MlpSpec,
    params: ParamVector,
    x,
    output_grad,
    prefix: str = "mlp",
    grad: ParamVector | None = None,
) -> tuple[ParamVector, np.ndarray]:
    """Exact gradients of ``<mlp(x), output_grad>`` w.r.t. parameters and input.

    Returns ``(param_grad, input_grad)``. ``param_grad`` has the layout of
    ``params`` with zeros outside this network's segments; if ``grad`` is
    given it is accumulated into and returned.
    """
    _check_params(spec, params, prefix)
    _, cache = mlp_forward_cached(spec, params, x, prefix)
    if grad is None:
        grad = params.zeros_like()
    input_grad = mlp_backward_cached(spec, params, cache, output_grad, prefix, grad)
    return grad, input_grad


@dataclass
class AdamState:
    """Adam moments for the entries ``index`` of a flat parameter vector.

    ``index=None`` means the optimizer owns every entry.
    """

    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    index: np.ndarray | None = None

    @classmethod
    def create(cls, n_or_index, lr: float, dtype=np.float64, **kwargs) -> AdamState:
        if np.isscalar(n_or_index):
            index, n = None, int(n_or_index)
        else:
            index = np.asarray(n_or_index, dtype=np.int64)
            n = index.size
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        return cls(m=np.zeros(n, dtype), v=np.zeros(n, dtype), lr=lr, index=index, **kwargs)


def adam_step(state: AdamState, params, grad) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update, applied in place.

    ``params`` and ``grad`` may be :class:`ParamVector` or flat arrays. Only
    the entries in ``state.index`` are read and written.
    """
    p = params.values if isinstance(params, ParamVector) else params
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad)
    if p.shape != g.shape:
        raise ShapeError(f"params shape {p.shape} != grad shape {g.shape}")
    if state.index is not None:
        g = g[state.index]
    if g.shape != state.m.shape:
        raise ShapeError(f"grad has {g.size} owned entries, optimizer state has {state.m.size}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient passed to adam_step")
    state.step_count += 1
    t = state.step_count
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    delta = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.index is None:
        p -= delta
    else:
        p[state.index] -= delta
    return p, state


def ema_update(target, online, zeta: float):
    """Return ``(1 - zeta) * target + zeta * online``."""
    if not 0.0 <= zeta <= 1.0:
        raise ValueError(f"EMA coefficient must lie in [0, 1], got {zeta}")
    if isinstance(target, ParamVector):
        if target.layout != online.layout:
            raise ShapeError("EMA target and online layouts differ")
        return target.with_values(ema_update(target.values, online.values, zeta))
    target = np.asarray(target)
    online = np.asarray(online)
    if target.shape != online.shape:
        raise ShapeError(f"EMA shape mismatch: {target.shape} vs {online.shape}")
    return (1.0 - zeta) * target + zeta * online


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    n_checked: int
    worst_index: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    indices=None,
    denom_floor: float = 1e-6,
) -> FiniteDiffReport:
    """Compare the analytic gradient of ``loss_fn`` with central differences.

    ``loss_fn(values) -> (loss, grad)``. The relative error of entry ``i`` is
    ``|g_i - n_i| / max(|g_i|, |n_i|, denom_floor)``; the floor keeps entries
    whose true gradient is (near) zero from dominating through round-off.
    ``indices`` restricts which coordinates are perturbed.
    """
    x0 = np.array(params.values if isinstance(params, ParamVector) else params, dtype=np.float64)
    _, analytic = loss_fn(x0.copy())
    analytic = np.asarray(analytic.values if isinstance(analytic, ParamVector) else analytic)
    idx = np.arange(x0.size) if indices is None else np.asarray(indices)
    worst, worst_i, worst_abs = 0.0, -1, 0.0
    for i in idx:
        xp = x0.copy()
        xp[i] += step
        xm = x0.copy()
        xm[i] -= step
        numeric = (loss_fn(xp)[0] - loss_fn(xm)[0]) / (2.0 * step)
        err = abs(analytic[i] - numeric)
        rel = err / max(abs(analytic[i]), abs(numeric), denom_floor)
        worst_abs = max(worst_abs, err)
        if rel > worst or worst_i < 0:
            worst, worst_i = rel, int(i)
    return FiniteDiffReport(float(worst), float(worst_abs), tolerance, int(idx.size), worst_i)


def save_params(params: ParamVector, path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.manifest``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bin_path = path.with_name(path.name + ".bin")
    man_path = path.with_name(path.name + ".manifest")
    params.values.astype("<f8").tofile(bin_path)
    lines = []
    for name, shape in params.layout:
        sl = params.segment_slice(name)
        lines.append(f"{name}\t{','.join(map(str, shape))}\t{sl.start}")
    man_path.write_text("\n".join(lines) + "\n")
    return bin_path, man_path


def load_params(path, dtype=np.float64) -> ParamVector:
    path = Path(path)
    man_path = path.with_name(path.name + ".manifest")
    bin_path = path.with_name(path.name + ".bin")
    layout = []
    expected = 0
    for lineno, line in enumerate(man_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        name, shape, offset = line.split("\t")
        shape = tuple(int(s) for s in shape.split(",")) if shape else ()
        if int(offset) != expected:
            raise ShapeError(f"{man_path}:{lineno}: offset {offset} for {name!r}, expected {expected}")
        expected += math.prod(shape)
        layout.append((name, shape))
    values = np.fromfile(bin_path, dtype="<f8").astype(dtype)
    return ParamVector(layout, values, dtype=dtype)
