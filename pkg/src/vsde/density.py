"""Autoregressive density model built from monotone scalar CDF networks.

One feature at a time: a small network squashes its scalar input through
sigmoid layers whose weights pass through a positivity transform, and the
output layer forms a softmax-weighted convex combination of the last
hidden layer.  The map is therefore strictly increasing with values in
(0, 1); normalizing it on the compact support turns it into a CDF whose
input derivative is the conditional density.  A per-dimension conditioner
MLP maps the (permuted) feature prefix to the raw network parameters,
chaining the one-dimensional conditionals into a joint log-density.

Gradients are computed by reverse accumulation over an extended graph
that carries (activation, input-derivative) pairs per layer, so the
parameter gradient of log dF/dt — a mixed second derivative of F — comes
out exactly, not by numerical differencing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import PermutationSpec
from .numerics import DomainError, RngStream, _sigmoid, softmax, stable_softplus

__all__ = [
    "ARModelParams",
    "DegenerateNetworkError",
    "MonotoneNetParams",
    "PNNConfig",
    "batch_log_density",
    "conditional_log_density",
    "conditioner_forward",
    "flatten_monotone_params",
    "grad_log_density",
    "init_ar_model",
    "load_model",
    "model_log_density",
    "monotone_forward",
    "monotone_param_size",
    "normalized_cdf",
    "positive_transform",
    "random_monotone_params",
    "save_model",
    "unflatten_monotone_params",
]

MODEL_FORMAT = "vsde-model-v1"

#: Floor on F(B) - F(A); below this the network cannot be normalized.
_DEGENERATE_FLOOR = 1e-300

_TINY = np.finfo(float).tiny


class DegenerateNetworkError(RuntimeError):
    """The CDF network is numerically flat over its whole support."""


def positive_transform(raw):
    """Stable softplus, the default map from raw to strictly positive
    effective weights.  Never returns exactly zero."""
    return stable_softplus(raw)


def _softplus_d(raw):
    return _sigmoid(np.asarray(raw, dtype=float))


# transform name -> (forward, derivative, inverse)
_POSITIVITY = {
    "softplus": (stable_softplus, _softplus_d, lambda y: np.log(np.expm1(y))),
    "exp": (np.exp, np.exp, np.log),
}


@dataclass(frozen=True)
class PNNConfig:
    """Shape and support of one monotone CDF network."""

    hidden_widths: tuple[int, ...] = (16, 16)
    support: tuple[float, float] = (-10.0, 10.0)
    positivity: str = "softplus"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.hidden_widths)
        if len(widths) < 1 or any(w < 1 for w in widths):
            raise DomainError("need at least one hidden layer with width >= 1")
        lo, hi = float(self.support[0]), float(self.support[1])
        if not lo < hi:
            raise DomainError("support lower bound must be below upper bound")
        if self.positivity not in _POSITIVITY:
            raise DomainError(f"unknown positivity transform {self.positivity!r}")
        object.__setattr__(self, "hidden_widths", widths)
        object.__setattr__(self, "support", (lo, hi))


@dataclass
class MonotoneNetParams:
    """Raw (pre-positivity) parameters of one monotone CDF network."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    out_weights: np.ndarray
    support: tuple[float, float] = (-10.0, 10.0)

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights)


class _Layout:
    """Slice map for the flattened raw parameter vector of one net."""

    def __init__(self, config: PNNConfig):
        widths = (1,) + config.hidden_widths
        self.widths = widths
        self.weight_slices: list[tuple[slice, tuple[int, int]]] = []
        self.bias_slices: list[slice] = []
        off = 0
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            self.weight_slices.append((slice(off, off + w_in * w_out), (w_in, w_out)))
            off += w_in * w_out
            self.bias_slices.append(slice(off, off + w_out))
            off += w_out
        self.out_slice = slice(off, off + widths[-1])
        self.size = off + widths[-1]


def monotone_param_size(config: PNNConfig) -> int:
    """Length of the flattened raw parameter vector for one network."""
    return _Layout(config).size


def flatten_monotone_params(p: MonotoneNetParams) -> np.ndarray:
    parts = []
    for w, b in zip(p.weights, p.biases):
        parts.append(np.asarray(w, dtype=float).ravel())
        parts.append(np.asarray(b, dtype=float))
    parts.append(np.asarray(p.out_weights, dtype=float))
    return np.concatenate(parts)


def unflatten_monotone_params(vec: np.ndarray, config: PNNConfig) -> MonotoneNetParams:
    vec = np.asarray(vec, dtype=float)
    layout = _Layout(config)
    if vec.shape != (layout.size,):
        raise DomainError(f"expected a parameter vector of length {layout.size}")
    weights = [vec[sl].reshape(shape) for sl, shape in layout.weight_slices]
    biases = [vec[sl] for sl in layout.bias_slices]
    return MonotoneNetParams(weights, biases, vec[layout.out_slice], config.support)


def _config_for(p: MonotoneNetParams, positivity: str = "softplus") -> PNNConfig:
    return PNNConfig(p.hidden_widths, p.support, positivity)


# ---------------------------------------------------------------------------
# batched monotone-net kernels
# ---------------------------------------------------------------------------


def _monotone_batch(theta: np.ndarray, inputs: np.ndarray, config: PNNConfig):
    """Evaluate B networks (one raw parameter row each) at E inputs apiece.

    Returns (F, dF, cache) with F and dF of shape (B, E).  dF is the
    analytic input derivative, propagated alongside the activations.
    """
    transform, transform_d, _ = _POSITIVITY[config.positivity]
    layout = _Layout(config)
    b = theta.shape[0]
    a = inputs[:, :, None]  # (B, E, 1)
    d = np.ones_like(a)
    layers = []
    for (wsl, shape), bsl in zip(layout.weight_slices, layout.bias_slices):
        raw = theta[:, wsl].reshape(b, *shape)
        w = transform(raw)
        wd = transform_d(raw)
        z = np.einsum("bew,bwv->bev", a, w) + theta[:, bsl][:, None, :]
        a_next = _sigmoid(z)
        m = np.einsum("bew,bwv->bev", d, w)
        d_next = a_next * (1.0 - a_next) * m
        layers.append((a, d, w, wd, a_next, m))
        a, d = a_next, d_next
    p = softmax(theta[:, layout.out_slice])
    f = np.einsum("bev,bv->be", a, p)
    df = np.einsum("bev,bv->be", d, p)
    cache = (layout, layers, p, a, d, f, df)
    return f, df, cache


def _monotone_batch_backward(cache, f_bar: np.ndarray, df_bar: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_monotone_batch` with respect to the raw
    parameters; upstream adjoints are per (sample, input point)."""
    layout, layers, p, a_last, d_last, f, df = cache
    b = p.shape[0]
    theta_bar = np.zeros((b, layout.size))

    # output layer: F = p . a, dF = p . delta with p = softmax(logits)
    term = f_bar[:, :, None] * (a_last - f[:, :, None])
    term += df_bar[:, :, None] * (d_last - df[:, :, None])
    theta_bar[:, layout.out_slice] = p * term.sum(axis=1)
    a_bar = f_bar[:, :, None] * p[:, None, :]
    d_bar = df_bar[:, :, None] * p[:, None, :]

    for (wsl, shape), bsl, layer in zip(
        reversed(layout.weight_slices), reversed(layout.bias_slices), reversed(layers)
    ):
        a_prev, d_prev, w, wd, a_l, m = layer
        g = a_l * (1.0 - a_l)
        z_bar = a_bar * g + d_bar * m * g * (1.0 - 2.0 * a_l)
        m_bar = d_bar * g
        theta_bar[:, bsl] = z_bar.sum(axis=1)
        w_bar = np.einsum("bew,bev->bwv", a_prev, z_bar)
        w_bar += np.einsum("bew,bev->bwv", d_prev, m_bar)
        theta_bar[:, wsl] = (w_bar * wd).reshape(b, -1)
        a_bar = np.einsum("bwv,bev->bew", w, z_bar)
        d_bar = np.einsum("bwv,bev->bew", w, m_bar)
    return theta_bar


def _conditional_batch(theta: np.ndarray, t: np.ndarray, config: PNNConfig):
    """Log conditional density at t (one scalar per sample) for per-sample
    raw parameters theta.  Evaluates the net at (t, A, B) in one pass."""
    lo, hi = config.support
    b = theta.shape[0]
    inputs = np.empty((b, 3))
    inputs[:, 0] = t
    inputs[:, 1] = lo
    inputs[:, 2] = hi
    f, df, cache = _monotone_batch(theta, inputs, config)
    z = f[:, 2] - f[:, 1]
    if np.any(z < _DEGENERATE_FLOOR):
        raise DegenerateNetworkError(
            f"F(B) - F(A) fell below {_DEGENERATE_FLOOR:g} "
            f"(min {z.min():g}); the network is flat over its support"
        )
    dft = np.maximum(df[:, 0], _TINY)  # guards float underflow; dF/dt > 0 exactly
    s = np.log(dft) - np.log(z)
    return s, (cache, z, dft)


def _conditional_batch_backward(cond_cache, s_bar: np.ndarray) -> np.ndarray:
    cache, z, dft = cond_cache
    b = z.shape[0]
    f_bar = np.zeros((b, 3))
    df_bar = np.zeros((b, 3))
    df_bar[:, 0] = s_bar / dft
    f_bar[:, 1] = s_bar / z
    f_bar[:, 2] = -s_bar / z
    return _monotone_batch_backward(cache, f_bar, df_bar)


# ---------------------------------------------------------------------------
# conditioner MLP
# ---------------------------------------------------------------------------


def _conditioner_batch(cond: dict, prefix: np.ndarray, masks):
    """Forward one dimension's conditioner for a batch of prefixes.

    ``masks`` is None in eval mode, otherwise one (B, width) array per
    hidden layer, already scaled by 1/keep so that the expectation over
    masks matches the eval-mode activation.
    """
    if "theta" in cond:  # first dimension: parameters held directly
        b = prefix.shape[0]
        return np.broadcast_to(cond["theta"], (b, cond["theta"].size)), None
    h = prefix
    hidden = []
    n_hidden = sum(1 for k in cond if k.startswith("W") and k != "Wout")
    for k in range(n_hidden):
        u = h @ cond[f"W{k}"] + cond[f"b{k}"]
        tau = np.tanh(u)
        hidden.append((h, tau))
        h = tau if masks is None else tau * masks[k]
    theta = h @ cond["Wout"] + cond["bout"]
    return theta, (hidden, h)


def _conditioner_batch_backward(cond: dict, cache, theta_bar: np.ndarray, masks) -> dict:
    if "theta" in cond:
        return {"theta": theta_bar.sum(axis=0)}
    hidden, h_last = cache
    grads = {
        "Wout": h_last.T @ theta_bar,
        "bout": theta_bar.sum(axis=0),
    }
    h_bar = theta_bar @ cond["Wout"].T
    for k in range(len(hidden) - 1, -1, -1):
        h_prev, tau = hidden[k]
        tau_bar = h_bar if masks is None else h_bar * masks[k]
        u_bar = tau_bar * (1.0 - tau * tau)
        grads[f"W{k}"] = h_prev.T @ u_bar
        grads[f"b{k}"] = u_bar.sum(axis=0)
        h_bar = u_bar @ cond[f"W{k}"].T
    return grads


# ---------------------------------------------------------------------------
# the autoregressive model
# ---------------------------------------------------------------------------


@dataclass
class ARModelParams:
    """Per-dimension conditioners plus the permutation they were trained
    under.  ``conditioners[0]`` holds a raw parameter vector directly;
    every later entry is an MLP taking the length-i prefix."""

    conditioners: list[dict]
    pnn: PNNConfig
    permutation: PermutationSpec
    conditioner_widths: tuple[int, ...] = (64, 64)
    dropout: float = 0.1

    @property
    def dim(self) -> int:
        return len(self.conditioners)


def _draw_masks(model: ARModelParams, batch: int, rng: RngStream):
    """One dropout mask per (dimension, hidden layer), inverted scaling."""
    keep = 1.0 - model.dropout
    per_dim = []
    for i in range(model.dim):
        if i == 0 or model.dropout == 0.0:
            per_dim.append(None)
            continue
        layer_masks = [
            (rng.generator.random((batch, width)) < keep) / keep
            for width in model.conditioner_widths
        ]
        per_dim.append(layer_masks)
    return per_dim


def _require_in_support(x: np.ndarray, config: PNNConfig):
    lo, hi = config.support
    if np.any(x < lo) or np.any(x > hi):
        raise DomainError(f"input outside the model support [{lo}, {hi}]")


def _model_batch(model: ARModelParams, x_permuted: np.ndarray, mode: str, rng):
    """Joint log-density of already-permuted rows; returns (s, caches)."""
    if mode not in ("train", "eval"):
        raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise DomainError("train mode needs an RngStream for dropout")
    _require_in_support(x_permuted, model.pnn)
    b = x_permuted.shape[0]
    masks = _draw_masks(model, b, rng) if mode == "train" else [None] * model.dim
    s = np.zeros(b)
    caches = []
    for i in range(model.dim):
        theta, ccache = _conditioner_batch(model.conditioners[i], x_permuted[:, :i], masks[i])
        s_i, dcache = _conditional_batch(theta, x_permuted[:, i], model.pnn)
        s += s_i
        caches.append((ccache, dcache, masks[i]))
    return s, caches


def _model_batch_backward(model: ARModelParams, caches, s_bar: np.ndarray) -> list[dict]:
    """Gradient of sum_b s_bar[b] * log p(x_b) for every parameter."""
    grads = []
    for cond, (ccache, dcache, masks) in zip(model.conditioners, caches):
        theta_bar = _conditional_batch_backward(dcache, s_bar)
        grads.append(_conditioner_batch_backward(cond, ccache, theta_bar, masks))
    return grads


# ---------------------------------------------------------------------------
# public single-sample operations
# ---------------------------------------------------------------------------


def monotone_forward(p: MonotoneNetParams, t: float) -> tuple[float, float]:
    """Value and input derivative of the unnormalized CDF network at t.

    t must lie inside the support; the derivative is strictly positive.
    """
    lo, hi = p.support
    if not lo <= t <= hi:
        raise DomainError(f"t={t} outside the support [{lo}, {hi}]")
    theta = flatten_monotone_params(p)[None, :]
    f, df, _ = _monotone_batch(theta, np.array([[float(t)]]), _config_for(p))
    return float(f[0, 0]), float(df[0, 0])


def normalized_cdf(p: MonotoneNetParams, t: float) -> float:
    """CDF rescaled so the support endpoints map to exactly 0 and 1."""
    lo, hi = p.support
    if not lo <= t <= hi:
        raise DomainError(f"t={t} outside the support [{lo}, {hi}]")
    theta = flatten_monotone_params(p)[None, :]
    inputs = np.array([[float(t), lo, hi]])
    f, _, _ = _monotone_batch(theta, inputs, _config_for(p))
    z = f[0, 2] - f[0, 1]
    if z < _DEGENERATE_FLOOR:
        raise DegenerateNetworkError("F(B) - F(A) is numerically zero")
    return float((f[0, 0] - f[0, 1]) / z)


def conditional_log_density(p: MonotoneNetParams, t: float) -> float:
    """Log density of the normalized CDF at t: log dF/dt - log(F(B)-F(A))."""
    lo, hi = p.support
    if not lo <= t <= hi:
        raise DomainError(f"t={t} outside the support [{lo}, {hi}]")
    theta = flatten_monotone_params(p)[None, :]
    s, _ = _conditional_batch(theta, np.array([float(t)]), _config_for(p))
    return float(s[0])


def conditioner_forward(
    model: ARModelParams,
    x_prefix,
    i: int,
    mode: str = "eval",
    rng: RngStream | None = None,
) -> MonotoneNetParams:
    """Raw monotone-net parameters for dimension i (1-based) given the
    feature prefix in the model's own (permuted) ordering."""
    if not 1 <= i <= model.dim:
        raise DomainError(f"dimension index {i} outside 1..{model.dim}")
    prefix = np.asarray(x_prefix, dtype=float).reshape(1, -1)
    if prefix.shape[1] != i - 1:
        raise DomainError(f"prefix for dimension {i} must have length {i - 1}")
    if mode == "train":
        if rng is None:
            raise DomainError("train mode needs an RngStream for dropout")
        masks = _draw_masks(model, 1, rng)[i - 1] if i > 1 else None
    elif mode == "eval":
        masks = None
    else:
        raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
    theta, _ = _conditioner_batch(model.conditioners[i - 1], prefix, masks)
    return unflatten_monotone_params(theta[0], model.pnn)


def model_log_density(
    model: ARModelParams, x, mode: str = "eval", rng: RngStream | None = None
) -> float:
    """Joint log-density of one sample given in the original feature order."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise DomainError(f"expected a length-{model.dim} vector")
    xp = model.permutation.apply_to_vector(x)[None, :]
    s, _ = _model_batch(model, xp, mode, rng)
    return float(s[0])


def batch_log_density(
    model: ARModelParams, x: np.ndarray, mode: str = "eval", rng: RngStream | None = None
) -> np.ndarray:
    """Joint log-density of each row of x (original feature order)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise DomainError(f"expected an N x {model.dim} matrix")
    s, _ = _model_batch(model, model.permutation.apply_to_matrix(x), mode, rng)
    return s


def grad_log_density(
    model: ARModelParams, x, mode: str = "eval", rng: RngStream | None = None
) -> list[dict]:
    """Exact gradient of :func:`model_log_density` with respect to every
    conditioner parameter, including the path through the analytic input
    derivative dF/dt."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise DomainError(f"expected a length-{model.dim} vector")
    xp = model.permutation.apply_to_vector(x)[None, :]
    _, caches = _model_batch(model, xp, mode, rng)
    return _model_batch_backward(model, caches, np.ones(1))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _monotone_template(config: PNNConfig, rng: RngStream) -> np.ndarray:
    """Raw parameters giving a gentle, near-linear initial CDF.

    First-layer sigmoid centers tile the support and effective weights
    are small, so no unit starts saturated and the initial density is
    close to uniform.
    """
    _, _, inverse = _POSITIVITY[config.positivity]
    layout = _Layout(config)
    gen = rng.generator
    lo, hi = config.support
    half = max(abs(lo), abs(hi))
    vec = np.empty(layout.size)
    widths = layout.widths
    for idx, ((wsl, shape), bsl) in enumerate(zip(layout.weight_slices, layout.bias_slices)):
        fan_in = widths[idx]
        eff = 2.0 / half if idx == 0 else 1.0 / fan_in
        vec[wsl] = inverse(eff) + 0.1 * gen.uniform(-1.0, 1.0, shape[0] * shape[1])
        if idx == 0:
            vec[bsl] = gen.uniform(-2.0, 2.0, widths[idx + 1])
        else:
            # center the pre-activation: positive weights times mean 0.5 inputs
            vec[bsl] = -0.5 * eff * fan_in + 0.5 * gen.uniform(-1.0, 1.0, widths[idx + 1])
    vec[layout.out_slice] = 0.1 * gen.uniform(-1.0, 1.0, widths[-1])
    return vec


def random_monotone_params(
    config: PNNConfig, rng: RngStream, jitter: float = 1.0
) -> MonotoneNetParams:
    """A random well-conditioned network: the init template plus Gaussian
    jitter.  Used for property tests and randomized checks."""
    vec = _monotone_template(config, rng)
    vec += jitter * rng.generator.standard_normal(vec.size)
    return unflatten_monotone_params(vec, config)


def init_ar_model(
    dim: int,
    permutation: PermutationSpec,
    pnn: PNNConfig = PNNConfig(),
    conditioner_widths: tuple[int, ...] = (64, 64),
    dropout: float = 0.1,
    rng: RngStream | None = None,
) -> ARModelParams:
    """Fresh model: uniform(+-1/sqrt(fan_in)) conditioner weights, zero
    hidden biases, and output biases set to the monotone-net template so
    every conditional starts near-uniform on the support."""
    if dim < 1:
        raise DomainError("need at least one dimension")
    if permutation.d != dim:
        raise DomainError("permutation length does not match the dimension")
    if not 0.0 <= dropout < 1.0:
        raise DomainError("dropout must be in [0, 1)")
    if rng is None:
        rng = RngStream(0)
    gen = rng.generator
    p_size = monotone_param_size(pnn)
    conditioners: list[dict] = []
    for i in range(dim):
        template = _monotone_template(pnn, rng)
        if i == 0:
            conditioners.append({"theta": template})
            continue
        chain = (i,) + tuple(conditioner_widths) + (p_size,)
        cond: dict[str, np.ndarray] = {}
        for k in range(len(conditioner_widths)):
            bound = 1.0 / np.sqrt(chain[k])
            cond[f"W{k}"] = gen.uniform(-bound, bound, (chain[k], chain[k + 1]))
            cond[f"b{k}"] = np.zeros(chain[k + 1])
        bound = 1.0 / np.sqrt(chain[-2])
        cond["Wout"] = gen.uniform(-bound, bound, (chain[-2], chain[-1]))
        cond["bout"] = template
        conditioners.append(cond)
    return ARModelParams(conditioners, pnn, permutation, tuple(conditioner_widths), dropout)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_model(path, model: ARModelParams) -> None:
    """Serialize every raw parameter array; floats round-trip bit-exactly."""
    arrays = {
        "format": np.array(MODEL_FORMAT),
        "dim": np.array(model.dim),
        "permutation": np.array(model.permutation.order, dtype=np.int64),
        "hidden_widths": np.array(model.pnn.hidden_widths, dtype=np.int64),
        "support": np.array(model.pnn.support),
        "positivity": np.array(model.pnn.positivity),
        "conditioner_widths": np.array(model.conditioner_widths, dtype=np.int64),
        "dropout": np.array(model.dropout),
    }
    for i, cond in enumerate(model.conditioners):
        for key, value in cond.items():
            arrays[f"param.{i}.{key}"] = value
    np.savez(path, **arrays)


def load_model(path) -> ARModelParams:
    with np.load(path) as blob:
        fmt = str(blob["format"])
        if fmt != MODEL_FORMAT:
            raise DomainError(f"unsupported model format {fmt!r}")
        dim = int(blob["dim"])
        pnn = PNNConfig(
            tuple(int(w) for w in blob["hidden_widths"]),
            tuple(float(v) for v in blob["support"]),
            str(blob["positivity"]),
        )
        perm = PermutationSpec(tuple(int(i) for i in blob["permutation"]))
        widths = tuple(int(w) for w in blob["conditioner_widths"])
        dropout = float(blob["dropout"])
        conditioners: list[dict] = [{} for _ in range(dim)]
        for key in blob.files:
            if not key.startswith("param."):
                continue
            _, index, name = key.split(".", 2)
            conditioners[int(index)][name] = blob[key]
    return ARModelParams(conditioners, pnn, perm, widths, dropout)
