"""Parameter store, initialization, optimizer, and checkpoint container.

Parameters are named with dotted group paths (``decoder.layer0.self.wq``,
``depthnet.head.w`` ...) so that gradient checks and ablations can address
whole groups. All state is float64 and all randomness flows through one
seeded generator, which makes parameter initialization and full training
trajectories bit-reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

CHECKPOINT_MAGIC = b"ALFT0001"


class ParameterHealthError(RuntimeError):
    """Raised when a parameter or its gradient stops being finite."""


def save_array_container(path, arrays: dict) -> None:
    """Write named float64 arrays in the checkpoint container layout:
    8-byte magic, u64-LE manifest length, JSON manifest (name/shape/offset
    in elements), then raw little-endian float64 payload."""
    manifest = []
    offset = 0
    items = list(arrays.items())
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float64)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in items:
            fh.write(np.asarray(arr, dtype=np.float64).astype("<f8").tobytes())


def load_array_container(path) -> dict:
    """Read a container written by `save_array_container`; bit-exact."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad container magic: {magic!r}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()
    out = {}
    for entry in manifest:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"] * 8
        arr = np.frombuffer(payload[start : start + size * 8], dtype="<f8")
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return out


@dataclass
class OptimizerConfig:
    """Adaptive-moment optimizer settings with decoupled weight decay.

    `decay` multiplies the learning rate at every epoch boundary; the
    decoupled weight-decay coefficient is a separate knob and defaults off.
    """

    learning_rate: float = 4e-4
    decay: float = 0.98
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 30

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must be in (0, 1]")


class ParameterStore:
    """Named, shape-immutable float64 parameters plus optimizer state."""

    def __init__(self, seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self._moment1: dict[str, np.ndarray] = {}
        self._moment2: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xA11C,)))

    # -- construction -------------------------------------------------------

    def add(self, name: str, shape: tuple, init: str = "fan_in") -> Tensor:
        """Register a parameter; `init` is one of fan_in | zeros | ones.

        fan_in draws uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) where fan_in
        is the product of all but the last dimension (weights treated as
        input-major maps); zeros is used for biases and for heads that must
        start neutral (deformable offsets); ones for normalization gains.
        """
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape, dtype=np.float64)
        elif init == "ones":
            data = np.ones(shape, dtype=np.float64)
        elif init == "fan_in":
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            data = self.rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init scheme: {init}")
        tensor = Tensor(data, requires_grad=True)
        self._params[name] = tensor
        self._moment1[name] = np.zeros(shape, dtype=np.float64)
        self._moment2[name] = np.zeros(shape, dtype=np.float64)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if n.startswith(prefix)}

    # -- gradient bookkeeping ----------------------------------------------

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def check_health(self) -> None:
        for name, t in self._params.items():
            if not np.all(np.isfinite(t.data)):
                raise ParameterHealthError(f"non-finite parameter: {name}")

    # -- serialization -------------------------------------------------------

    def save(self, path) -> None:
        """Write all parameters as a checkpoint container (bit-exact)."""
        save_array_container(path, {n: t.data for n, t in self._params.items()})

    def load(self, path) -> None:
        """Restore parameter values; names and shapes must match exactly."""
        arrays = load_array_container(path)
        expected = {n: a.shape for n, a in arrays.items()}
        have = {n: t.data.shape for n, t in self._params.items()}
        if expected != have:
            missing = set(expected) ^ set(have)
            raise ValueError(
                f"checkpoint/model parameter mismatch: {sorted(missing) or 'shapes differ'}"
            )
        for name, arr in arrays.items():
            self._params[name].data = arr


@dataclass
class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer.

    `end_epoch()` applies the per-epoch learning-rate decay factor; gradients
    are zeroed after every step. Single-writer: no other thread may touch
    the store during `step`.
    """

    store: ParameterStore
    config: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        self.lr = self.config.learning_rate

    def step(self) -> None:
        cfg = self.config
        self.store.step_count += 1
        t = self.store.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise ParameterHealthError(f"non-finite gradient: {name}")
            m = self.store._moment1[name]
            v = self.store._moment2[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
            if cfg.weight_decay > 0.0:
                update = update + cfg.weight_decay * p.data
            p.data -= self.lr * update
        self.store.zero_grads()

    def end_epoch(self) -> None:
        self.lr *= self.config.decay


def optimizer_step(store: ParameterStore, optimizer: AdamW) -> ParameterStore:
    """Functional wrapper: apply one update to `store` and return it."""
    optimizer.step()
    return store
