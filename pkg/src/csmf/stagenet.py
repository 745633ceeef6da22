"""Stage-aware masked layers.

Every scalar parameter carries one lifecycle state byte:

    0            structural zero (connection forbidden by the block rule)
    1            zero-locked (pruned, fixed at 0 forever)
    2 + stage    trainable, owned by ``stage``
    5 + stage    frozen, committed at ``stage``

Units of every layer are split into contiguous exposure/click/conversion
blocks.  A weight from a source unit in block ``a`` to a target unit in
block ``b`` exists only when ``a <= b``; a parameter's stage label never
exceeds the stage of its target block.  Together these make the prefix
passes (exposure only, exposure+click, all) consistent: the first blocks'
outputs never depend on anything committed later.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import RngStream, gaussian_init


class Stage(IntEnum):
    D = 0  # exposure
    O = 1  # click
    R = 2  # conversion

    @classmethod
    def parse(cls, value) -> "Stage":
        if isinstance(value, Stage):
            return value
        if isinstance(value, str):
            key = value.strip().upper()
            aliases = {"EXPOSURE": "D", "CLICK": "O", "CONVERSION": "R"}
            key = aliases.get(key, key)
            try:
                return cls[key]
            except KeyError:
                raise ConfigError(f"unknown stage {value!r}") from None
        return cls(int(value))


STRUCTURAL_ZERO = 0
ZERO_LOCKED = 1
_TRAINABLE = 2
_FROZEN = 5


def trainable(stage: int) -> int:
    return _TRAINABLE + int(stage)


def frozen(stage: int) -> int:
    return _FROZEN + int(stage)


def describe_state(code: int) -> str:
    code = int(code)
    if code == STRUCTURAL_ZERO:
        return "StructuralZero"
    if code == ZERO_LOCKED:
        return "ZeroLocked"
    if _TRAINABLE <= code < _FROZEN:
        return f"Trainable({Stage(code - _TRAINABLE).name})"
    if _FROZEN <= code < _FROZEN + 3:
        return f"Frozen({Stage(code - _FROZEN).name})"
    raise ValueError(f"invalid state byte {code}")


ALL_STATES = (STRUCTURAL_ZERO, ZERO_LOCKED) + tuple(
    trainable(s) for s in Stage
) + tuple(frozen(s) for s in Stage)


def active_mask(state: np.ndarray, prefix: int) -> np.ndarray:
    """Parameters that contribute to a pass restricted to stages <= prefix."""
    t = (state >= _TRAINABLE) & (state <= _TRAINABLE + prefix)
    f = (state >= _FROZEN) & (state <= _FROZEN + prefix)
    return t | f


def trainable_mask(state: np.ndarray, prefix: int) -> np.ndarray:
    return (state >= _TRAINABLE) & (state <= _TRAINABLE + prefix)


@dataclass(frozen=True)
class BlockLayout:
    n_d: int
    n_o: int = 0
    n_r: int = 0

    def __post_init__(self):
        if min(self.n_d, self.n_o, self.n_r) < 0:
            raise ConfigError(f"negative block size in {self}")

    @property
    def width(self) -> int:
        return self.n_d + self.n_o + self.n_r

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (self.n_d, self.n_o, self.n_r)

    def prefix_width(self, stage: int) -> int:
        return sum(self.sizes[: int(stage) + 1])

    def block_slice(self, stage: int) -> slice:
        start = sum(self.sizes[: int(stage)])
        return slice(start, start + self.sizes[int(stage)])

    def unit_stages(self) -> np.ndarray:
        return np.repeat(np.arange(3, dtype=np.uint8), self.sizes)

    def validate(self) -> None:
        if self.n_d < 1:
            raise ConfigError("the exposure block must have at least one unit")

    @classmethod
    def from_fractions(cls, width: int, fractions=(0.5, 0.25, 0.25)) -> "BlockLayout":
        if len(fractions) != 3 or any(f < 0 for f in fractions):
            raise ConfigError(f"bad block fractions {fractions}")
        total = float(sum(fractions))
        n_o = int(round(width * fractions[1] / total))
        n_r = int(round(width * fractions[2] / total))
        return cls(width - n_o - n_r, n_o, n_r)

    @classmethod
    def concat(cls, layouts: Iterable["BlockLayout"]) -> "BlockLayout":
        layouts = list(layouts)
        return cls(
            sum(l.n_d for l in layouts),
            sum(l.n_o for l in layouts),
            sum(l.n_r for l in layouts),
        )


@dataclass(eq=False)
class Param:
    """One parameter tensor with a state byte and target-block stage per entry."""

    name: str
    value: np.ndarray
    state: np.ndarray
    target: np.ndarray
    group: str

    @property
    def size(self) -> int:
        return self.value.size

    def active(self, prefix: int) -> np.ndarray:
        return active_mask(self.state, prefix)

    def trainable(self, prefix: int = Stage.R) -> np.ndarray:
        return trainable_mask(self.state, prefix)


class MaskedLayer:
    """Dense layer ``act(W x + b)`` whose parameters are gated by state.

    ``weight`` has shape (out, in).
    """

    def __init__(self, name, weight: Param, bias: Param, in_layout, out_layout, activation):
        if activation not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.name = name
        self.weight = weight
        self.bias = bias
        self.in_layout = in_layout
        self.out_layout = out_layout
        self.activation = activation
        self._unit_stage = out_layout.unit_stages()

    @property
    def params(self) -> tuple[Param, Param]:
        return (self.weight, self.bias)

    def unit_mask(self, prefix: int) -> np.ndarray:
        return (self._unit_stage <= int(prefix)).astype(np.float64)

    def effective(self, prefix: int) -> tuple[np.ndarray, np.ndarray]:
        w = np.where(self.weight.active(prefix), self.weight.value, 0.0)
        b = np.where(self.bias.active(prefix), self.bias.value, 0.0)
        return w, b


def build_layer(
    name: str,
    in_layout: BlockLayout,
    out_layout: BlockLayout,
    rng: RngStream,
    init_scale: float,
    activation: str = "relu",
    structure: bool = True,
) -> MaskedLayer:
    """New layer with every allowed parameter ``Trainable(D)``.

    With ``structure`` on, weights from a later block into an earlier block
    are structural zeros.
    """
    in_layout.validate()
    out_layout.validate()
    n_out, n_in = out_layout.width, in_layout.width
    w = gaussian_init(rng, n_out, n_in, init_scale)
    b = np.zeros(n_out)
    tgt = out_layout.unit_stages()
    src = in_layout.unit_stages()
    w_target = np.repeat(tgt[:, None], n_in, axis=1)
    w_state = np.full((n_out, n_in), trainable(Stage.D), dtype=np.uint8)
    if structure:
        forbidden = src[None, :] > tgt[:, None]
        w_state[forbidden] = STRUCTURAL_ZERO
        w[forbidden] = 0.0
    b_state = np.full(n_out, trainable(Stage.D), dtype=np.uint8)
    weight = Param(f"{name}.weight", w, w_state, w_target, group=name)
    bias = Param(f"{name}.bias", b, b_state, tgt.copy(), group=name)
    return MaskedLayer(name, weight, bias, in_layout, out_layout, activation)


def forward(layer: MaskedLayer, x: np.ndarray, prefix: int = Stage.R, return_pre: bool = False):
    """Masked forward pass over a single vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_layout.width:
        raise ShapeError(
            f"{layer.name}: input width {x.shape[-1]} != {layer.in_layout.width}"
        )
    w, b = layer.effective(prefix)
    z = (x @ w.T + b) * layer.unit_mask(prefix)
    out = np.maximum(z, 0.0) if layer.activation == "relu" else z
    if return_pre:
        return out, z
    return out


def backward(
    layer: MaskedLayer,
    x: np.ndarray,
    grad_out: np.ndarray,
    prefix: int = Stage.R,
    pre: np.ndarray | None = None,
    train_prefix: int | None = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of a scalar loss through one layer.

    Returns ``(grad_in, {param name: grad})``.  Parameter gradients are zero
    except on ``Trainable(s)`` entries with ``s <= train_prefix`` (defaults
    to ``prefix``).
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if x.shape[-1] != layer.in_layout.width:
        raise ShapeError(f"{layer.name}: input width mismatch")
    if grad_out.shape[-1] != layer.out_layout.width or grad_out.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"{layer.name}: grad_out shape {grad_out.shape} mismatch")
    if train_prefix is None:
        train_prefix = prefix
    w, _ = layer.effective(prefix)
    if pre is None:
        _, pre = forward(layer, x, prefix, return_pre=True)
    gz = grad_out * layer.unit_mask(prefix)
    if layer.activation == "relu":
        gz = gz * (pre > 0)
    x2 = x.reshape(-1, x.shape[-1])
    gz2 = gz.reshape(-1, gz.shape[-1])
    gw = gz2.T @ x2
    gb = gz2.sum(axis=0)
    gw = np.where(layer.weight.trainable(train_prefix), gw, 0.0)
    gb = np.where(layer.bias.trainable(train_prefix), gb, 0.0)
    grad_in = gz @ w
    return grad_in, {layer.weight.name: gw, layer.bias.name: gb}


@dataclass
class ParameterStore:
    """Ordered registry of all parameter tensors of a model."""

    params: dict[str, Param] = field(default_factory=dict)
    committed: set = field(default_factory=set)

    def add(self, p: Param) -> Param:
        if p.name in self.params:
            raise ConfigError(f"duplicate parameter {p.name}")
        self.params[p.name] = p
        return p

    def __iter__(self) -> Iterator[Param]:
        return iter(self.params.values())

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __len__(self) -> int:
        return len(self.params)

    def groups(self) -> dict[str, list[Param]]:
        out: dict[str, list[Param]] = {}
        for p in self:
            out.setdefault(p.group, []).append(p)
        return out

    def census(self) -> dict[str, int]:
        counts = {describe_state(s): 0 for s in ALL_STATES}
        for p in self:
            vals, cnt = np.unique(p.state, return_counts=True)
            for v, c in zip(vals, cnt):
                counts[describe_state(v)] += int(c)
        return counts

    def count(self, code: int) -> int:
        return sum(int(np.count_nonzero(p.state == code)) for p in self)

    def zero_states_hold(self) -> bool:
        for p in self:
            z = (p.state == STRUCTURAL_ZERO) | (p.state == ZERO_LOCKED)
            if np.any(p.value[z] != 0.0):
                return False
        return True

    def digest(self, code: int | None = None) -> str:
        """sha256 over values (optionally only entries in state ``code``)."""
        h = hashlib.sha256()
        for p in self:
            h.update(p.name.encode())
            vals = p.value if code is None else p.value[p.state == code]
            h.update(np.ascontiguousarray(vals, dtype="<f8").tobytes())
        return h.hexdigest()

    def snap_float32(self) -> None:
        """Round every value to the nearest float32 (the checkpoint precision)."""
        for p in self:
            p.value[...] = p.value.astype(np.float32).astype(np.float64)


class Adam:
    """Adam restricted to trainable entries.

    Moments live only on entries trainable at the time of the update; call
    :meth:`reset` at every stage transition.
    """

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.reset()

    def reset(self) -> None:
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, store: ParameterStore, grads: dict[str, np.ndarray], prefix: int = Stage.R) -> None:
        self.t += 1
        adam_step(store, grads, self.lr, self.beta1, self.beta2, self.eps, self.t,
                  self.m, self.v, prefix)


def adam_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    step_index: int = 1,
    m: dict | None = None,
    v: dict | None = None,
    prefix: int = Stage.R,
) -> ParameterStore:
    """One in-place Adam update; only ``Trainable(s <= prefix)`` entries move."""
    if lr < 0:
        raise ConfigError(f"learning rate must be nonnegative, got {lr}")
    if step_index < 1:
        raise ConfigError("step_index starts at 1")
    m = {} if m is None else m
    v = {} if v is None else v
    bc1 = 1.0 - beta1 ** step_index
    bc2 = 1.0 - beta2 ** step_index
    for name, g in grads.items():
        p = store[name]
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, want {p.value.shape}")
        mask = p.trainable(prefix)
        if not mask.any():
            continue
        g = np.where(mask, g, 0.0)
        mi = m.setdefault(name, np.zeros_like(p.value))
        vi = v.setdefault(name, np.zeros_like(p.value))
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * (g * g)
        mi[~mask] = 0.0
        vi[~mask] = 0.0
        if lr == 0:
            continue
        upd = (mi / bc1) / (np.sqrt(vi / bc2) + eps)
        p.value -= lr * np.where(mask, upd, 0.0)
    return store
