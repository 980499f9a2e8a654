"""Named parameter storage, initialisation, and the dense building blocks."""
from __future__ import annotations

import numpy as np
from scipy import stats

from safeplan.errors import MissingParameterError, ShapeError
from safeplan.nn import autodiff as ad
from safeplan.nn.autodiff import Tensor


class ParamSet:
    """Named trainable tensors plus adaptive-moment optimizer state.

    Names are full paths such as ``"wm.gru.w_gates"``. The ``m1``/``m2`` moment
    arrays mirror the parameter shapes; ``step`` counts optimizer updates.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m1: dict[str, np.ndarray] = {}
        self.m2: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=ad.DTYPE)
        t = Tensor(arr, requires_grad=True)
        self.params[name] = t
        self.m1[name] = np.zeros_like(arr)
        self.m2[name] = np.zeros_like(arr)
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise MissingParameterError(name) from None

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def frozen(self, dtype=None) -> dict[str, Tensor]:
        """Constant (non-differentiable) copies; gradients never reach this set through them."""
        if dtype is None:
            return {k: Tensor(v.data) for k, v in self.params.items()}
        return {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()}

    def as_dtype(self, dtype) -> dict[str, Tensor]:
        """Differentiable float copies in ``dtype`` (used by the float64 gradient oracle)."""
        return {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for k, v in values.items():
            if k not in self.params:
                raise MissingParameterError(k)
            if self.params[k].data.shape != np.shape(v):
                raise ShapeError(f"{k}: expected {self.params[k].data.shape}, got {np.shape(v)}")
            self.params[k].data = np.array(v, dtype=ad.DTYPE)

    def copy_from(self, other: "ParamSet", mapping=None):
        """Copy parameter values (not optimizer state) from ``other``; used for target critics."""
        for name, t in self.params.items():
            src = mapping(name) if mapping else name
            t.data = other.params[src].data.copy()

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.params.items():
            out[k] = v.data
            out[k + ".m1"] = self.m1[k]
            out[k + ".m2"] = self.m2[k]
        return out

    def load_state(self, entries: dict[str, np.ndarray], step: int):
        for k in self.params:
            for key in (k, k + ".m1", k + ".m2"):
                if np.shape(entries[key]) != self.params[k].data.shape:
                    raise ShapeError(f"{key}: expected {self.params[k].data.shape}, got {np.shape(entries[key])}")
        for k in self.params:
            self.params[k].data = np.array(entries[k], dtype=ad.DTYPE)
            self.m1[k] = np.array(entries[k + ".m1"], dtype=ad.DTYPE)
            self.m2[k] = np.array(entries[k + ".m2"], dtype=ad.DTYPE)
        self.step = int(step)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()


def truncated_normal_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """std = 1/sqrt(fan_in), truncated at two standard deviations."""
    std = 1.0 / np.sqrt(fan_in)
    return (stats.truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng) * std).astype(ad.DTYPE)


def init_dense(ps: ParamSet, prefix: str, n_in: int, n_out: int, rng, zero=False):
    w = np.zeros((n_in, n_out), ad.DTYPE) if zero else truncated_normal_init(rng, n_in, (n_in, n_out))
    ps.add(f"{prefix}.w", w)
    ps.add(f"{prefix}.b", np.zeros(n_out, ad.DTYPE))


def init_mlp(ps: ParamSet, prefix: str, layer_sizes, rng, zero_last=False):
    """Create weights for an MLP with ``layer_sizes = [in, hidden..., out]``."""
    n = len(layer_sizes) - 1
    for i in range(n):
        init_dense(ps, f"{prefix}.l{i}", layer_sizes[i], layer_sizes[i + 1], rng,
                   zero=zero_last and i == n - 1)


def _lookup(params, name):
    try:
        return params[name]
    except KeyError:
        raise MissingParameterError(name) from None


def dense(params, prefix: str, x: Tensor) -> Tensor:
    w = _lookup(params, f"{prefix}.w")
    b = _lookup(params, f"{prefix}.b")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} != {w.shape[0]}")
    return ad.matmul(x, w) + b


def mlp_forward(params, prefix: str, x: Tensor, layer_sizes) -> Tensor:
    """Affine + ELU on every layer except the last, which stays affine."""
    n = len(layer_sizes) - 1
    if x.shape[-1] != layer_sizes[0]:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} != {layer_sizes[0]}")
    for i in range(n):
        x = dense(params, f"{prefix}.l{i}", x)
        if _lookup(params, f"{prefix}.l{i}.w").shape[1] != layer_sizes[i + 1]:
            raise ShapeError(f"{prefix}.l{i}: output width mismatch")
        if i < n - 1:
            x = ad.elu(x)
    return x


def init_gru(ps: ParamSet, prefix: str, n_in: int, n_hidden: int, rng):
    fan = n_in + n_hidden
    ps.add(f"{prefix}.w_gates", truncated_normal_init(rng, fan, (fan, 2 * n_hidden)))
    ps.add(f"{prefix}.b_gates", np.zeros(2 * n_hidden, ad.DTYPE))
    ps.add(f"{prefix}.w_in", truncated_normal_init(rng, n_in, (n_in, n_hidden)))
    ps.add(f"{prefix}.w_hid", truncated_normal_init(rng, n_hidden, (n_hidden, n_hidden)))
    ps.add(f"{prefix}.b_cand", np.zeros(n_hidden, ad.DTYPE))


def gru_cell(params, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    """Gated recurrent cell.

    r, u = sigmoid([x, h] W_g + b_g)
    n = tanh(x W_in + r * (h W_hid) + b_c)
    h' = (1 - u) * n + u * h
    """
    gates = ad.sigmoid(ad.matmul(ad.concat([x, h], -1), _lookup(params, f"{prefix}.w_gates"))
                       + _lookup(params, f"{prefix}.b_gates"))
    r, u = ad.split(gates, 2, -1)
    cand = ad.tanh(ad.matmul(x, _lookup(params, f"{prefix}.w_in"))
                   + r * ad.matmul(h, _lookup(params, f"{prefix}.w_hid"))
                   + _lookup(params, f"{prefix}.b_cand"))
    return cand + u * (h - cand)
