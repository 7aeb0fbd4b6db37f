"""Named parameter storage and initialisation rules."""
from __future__ import annotations

import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autograd import DEFAULT_DTYPE, Tensor


def named_rng(seed: int, name: str, stream: int = 0) -> np.random.Generator:
    """Generator keyed on (seed, name) so unrelated entries never shift each other."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), stream])


def _kaiming_uniform(rng, shape, fan_in):
    # a = sqrt(5) leaky-ReLU gain, the common default for linear layers
    bound = math.sqrt(6.0 / ((1.0 + 5.0) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


def _a_log(rng, shape, fan_in):
    d_inner, d_state = shape
    return np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))


def _dt_bias(rng, shape, fan_in, dt_min=1e-3, dt_max=0.1):
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=shape))
    # inverse of softplus, so softplus(bias) == dt
    return dt + np.log(-np.expm1(-dt))


def _dt_weight(rng, shape, fan_in):
    bound = shape[0] ** -0.5
    return rng.uniform(-bound, bound, size=shape)


INIT_RULES = {
    "kaiming_uniform": _kaiming_uniform,
    "zeros": lambda rng, shape, fan_in: np.zeros(shape),
    "ones": lambda rng, shape, fan_in: np.ones(shape),
    "a_log": _a_log,
    "dt_bias": _dt_bias,
    "dt_weight": _dt_weight,
}


@dataclass
class Param:
    tensor: Tensor
    init: str

    @property
    def count(self) -> int:
        return self.tensor.size


class ParamStore:
    """Ordered map ``dotted.name -> Param`` with deterministic initialisation.

    Each entry draws from its own generator keyed on the store seed and the
    entry name, so the value of a parameter never depends on which other
    parameters were created before it.
    """

    def __init__(self, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.entries: OrderedDict[str, Param] = OrderedDict()

    def create(self, name: str, shape, init: str = "kaiming_uniform", fan_in: int | None = None) -> Tensor:
        if name in self.entries:
            raise KeyError(f"parameter {name!r} already exists")
        if init not in INIT_RULES:
            raise ValueError(f"unknown init rule {init!r}")
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"parameter {name!r} has non-positive shape {shape}")
        fan_in = fan_in if fan_in is not None else shape[0]
        values = INIT_RULES[init](named_rng(self.seed, name), shape, fan_in)
        t = Tensor(np.asarray(values, dtype=self.dtype), requires_grad=True)
        self.entries[name] = Param(t, init)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def items(self):
        return ((k, p.tensor) for k, p in self.entries.items())

    def names(self, prefix: str = "") -> list[str]:
        if not prefix:
            return list(self.entries)
        return [k for k in self.entries if k == prefix or k.startswith(prefix + ".")]

    def count(self, prefix: str = "") -> int:
        return sum(self.entries[k].count for k in self.names(prefix))

    @property
    def total_count(self) -> int:
        return self.count()

    def table(self, prefix: str = "") -> list[tuple[str, tuple[int, ...], int]]:
        return [(k, self.entries[k].tensor.shape, self.entries[k].count) for k in self.names(prefix)]

    def zero_grad(self) -> None:
        for p in self.entries.values():
            p.tensor.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.tensor.data.copy() for k, p in self.entries.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.entries) - set(state)
        extra = set(state) - set(self.entries)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.entries.items():
            arr = np.asarray(state[k])
            if arr.shape != p.tensor.shape:
                raise ValueError(f"{k}: shape {arr.shape} != expected {p.tensor.shape}")
            p.tensor.data = np.ascontiguousarray(arr.astype(self.dtype))


def format_table(rows, total_label: str = "total") -> str:
    """Aligned ``name  shape  count`` text with a total line."""
    rows = list(rows)
    w = max([len(r[0]) for r in rows] + [len(total_label)])
    sw = max([len(str(tuple(r[1]))) for r in rows] + [5])
    lines = [f"{'name':<{w}}  {'shape':<{sw}}  {'count':>10}"]
    lines += [f"{n:<{w}}  {str(tuple(s)):<{sw}}  {c:>10,}" for n, s, c in rows]
    lines.append(f"{total_label:<{w}}  {'':<{sw}}  {sum(r[2] for r in rows):>10,}")
    return "\n".join(lines)
