"""
Network architectures: the quadratic-head energy MLP and the geodesic interpolant MLP,
plus the binary checkpoint format shared by both.

Checkpoint layout (little-endian):
    8 bytes   magic b"EBMGEOCK"
    uint32    format version
    uint32    header length n
    n bytes   UTF-8 JSON header (CheckpointHeader)
    ...       float64 arrays in header order
    32 bytes  sha256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Iterator

import numpy as np
from pydantic import ValidationError

from app import diffcore as dc
from app.diffcore import GradientTape, Tensor
from app.errors import CheckpointError, ShapeError
from app.schemas import ArraySpec, CheckpointHeader

logger = logging.getLogger(__name__)

MAGIC = b"EBMGEOCK"
FORMAT_VERSION = 1
_DIGEST = 32


class Module:
    """Anything holding named parameter tensors, possibly through child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise CheckpointError(f"parameter names differ: {sorted(set(params) ^ set(state))}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: model {p.data.shape}, checkpoint {state[name].shape}"
                )
            p.data = np.array(state[name], dtype=np.float64)

    def descriptor(self) -> dict[str, Any]:
        raise NotImplementedError


class Linear(Module):
    """y = x @ W + b with fan-in uniform initialisation U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / np.sqrt(fan_in)
        if zero:
            w, b = np.zeros((fan_in, fan_out)), np.zeros(fan_out)
        else:
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class EnergyModel(Module):
    def __init__(self, dim: int = 2, width: int = 32, depth: int = 4, seed: int = 0, zero_heads: bool = False):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.width = width
        self.depth = depth
        self.trunk = [Linear(dim, width, rng)] + [Linear(width, width, rng) for _ in range(depth)]
        self.proj = Linear(width, width, rng)
        self.f1 = Linear(width, 1, rng, zero=zero_heads)
        self.f2 = Linear(width, 1, rng, zero=zero_heads)
        self.f3 = Linear(width, 1, rng, zero=zero_heads)

    def descriptor(self) -> dict[str, Any]:
        return {"arch": "energy_mlp_quadratic", "dim": self.dim, "width": self.width, "depth": self.depth}

    def energy(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"energy model expects [batch, {self.dim}] input, got {x.shape}")
        h = x
        for layer in self.trunk:
            h = dc.silu(layer(h))
        z = self.proj(h)
        out = self.f1(z) * self.f2(z) + self.f3(dc.square(z))
        return dc.reshape(out, (x.shape[0],))

    __call__ = energy

    def energy_and_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Energies [B] and input gradients [B, D] as plain arrays."""
        with GradientTape() as tape:
            xt = Tensor(x, requires_grad=True)
            e = self.energy(xt)
            (g,) = tape.gradient(dc.sum(e), [xt])
        return e.data.copy(), g


class InterpolantNet(Module):
    """phi(x0, x1, t); the last layer starts at zero so training begins on straight lines."""

    HIDDEN = (32, 64, 64, 32)

    def __init__(self, dim: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        sizes = (2 * dim + 1,) + self.HIDDEN
        self.hidden = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.out = Linear(sizes[-1], dim, rng, zero=True)

    def descriptor(self) -> dict[str, Any]:
        return {"arch": "interpolant_mlp", "dim": self.dim, "hidden": list(self.HIDDEN)}

    def __call__(self, x0, x1, t) -> Tensor:
        x0 = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
        x1 = np.asarray(x1.data if isinstance(x1, Tensor) else x1, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if x0.shape != x1.shape or x0.ndim != 2 or x0.shape[1] != self.dim:
            raise ShapeError(f"interpolant endpoints {x0.shape} and {x1.shape} must both be [batch, {self.dim}]")
        n_t, n_b = t.shape[0], x0.shape[0]
        inputs = np.concatenate(
            [np.tile(x0, (n_t, 1)), np.tile(x1, (n_t, 1)), np.repeat(t, n_b)[:, None]], axis=1
        )
        h = Tensor(inputs)
        for layer in self.hidden:
            h = dc.silu(layer(h))
        return dc.reshape(self.out(h), (n_t, n_b, self.dim))


def energy_forward(model, x) -> Tensor:
    """E(x) for a [B, D] batch; any object with an `energy` method works."""
    return model.energy(dc.as_tensor(x))


def interpolant_forward(net: InterpolantNet, x0, x1, t) -> Tensor:
    """phi on the (t, pair) grid, shape [T, B, D]."""
    return net(x0, x1, t)


def save_checkpoint(model: Module, path: str | Path, seed: int | None = None, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    header = CheckpointHeader(
        kind="energy" if isinstance(model, EnergyModel) else "interpolant",
        descriptor=model.descriptor(),
        arrays=[ArraySpec(name=k, shape=list(v.shape)) for k, v in state.items()],
        seed=seed,
        metadata=metadata or {},
    )
    head = json.dumps(header.model_dump(), sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in state.values())
    payload = MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + body
    path.write_bytes(payload + hashlib.sha256(payload).digest())
    logger.info(f"💾 Saved {header.kind} checkpoint to {path}")
    return path


def read_checkpoint(path: str | Path) -> tuple[CheckpointHeader, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 + _DIGEST or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: corrupt checkpoint (bad magic or truncated)")
    payload, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: corrupt checkpoint (content hash mismatch, file truncated or edited)")
    version, head_len = struct.unpack_from("<II", payload, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 8
    try:
        header = CheckpointHeader.model_validate(json.loads(payload[start : start + head_len]))
    except (ValueError, ValidationError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint header: {e}")
    offset = start + head_len
    arrays: dict[str, np.ndarray] = {}
    for spec in header.arrays:
        count = int(np.prod(spec.shape)) if spec.shape else 1
        end = offset + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: corrupt checkpoint (array {spec.name} truncated)")
        arrays[spec.name] = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(spec.shape)
        offset = end
    if offset != len(payload):
        raise CheckpointError(f"{path}: corrupt checkpoint ({len(payload) - offset} trailing bytes)")
    return header, arrays


def load_checkpoint(path: str | Path, expect: dict[str, Any] | None = None) -> Module:
    """Rebuild a model from its checkpoint; `expect` pins the architecture descriptor."""
    header, arrays = read_checkpoint(path)
    if expect is not None and header.descriptor != expect:
        raise CheckpointError(f"{path}: architecture descriptor mismatch: {header.descriptor} != {expect}")
    desc = header.descriptor
    if desc.get("arch") == "energy_mlp_quadratic":
        model: Module = EnergyModel(dim=desc["dim"], width=desc["width"], depth=desc["depth"])
    elif desc.get("arch") == "interpolant_mlp":
        model = InterpolantNet(dim=desc["dim"])
        if list(desc.get("hidden", [])) != list(InterpolantNet.HIDDEN):
            raise CheckpointError(f"{path}: unsupported interpolant layout {desc.get('hidden')}")
    else:
        raise CheckpointError(f"{path}: unknown architecture {desc.get('arch')!r}")
    model.load_state_dict(arrays)
    model.checkpoint_header = header
    return model
