"""Input convex network families and their forward passes.

Two layer types are provided:

* fully input convex networks (FICNN), convex in every input, and
* partially input convex networks (PICNN), convex only in ``y`` and
  arbitrary in the conditioning input ``ytilde``.

Each comes in two modes. ``Mode.AMOS`` is the classic one-step construction
(non-negative hidden-to-hidden weights only). ``Mode.MPC`` additionally
requires non-negative input weights and non-negative gates, which keeps the
output convex *and* non-decreasing so that the network can be composed with
itself over a prediction horizon without losing convexity.

All parameter arrays of a network live as views inside one contiguous
``flat`` vector. Optimisers and the feasibility projection operate on that
vector directly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class InvariantError(ValueError):
    """Raised when network parameters violate their mode's invariants."""


class DimensionError(ValueError):
    """Raised when array shapes do not chain through the network."""


class Mode(str, enum.Enum):
    AMOS = "amos"
    MPC = "mpc"


@dataclass(frozen=True)
class Activation:
    """Elementwise activation: ``relu``, ``shifted_relu`` or ``identity``.

    ``shifted_relu`` computes ``max(x, 0) - beta`` and lets a non-negative
    hidden representation produce negative outputs.
    """

    kind: str = "relu"
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("relu", "shifted_relu", "identity"):
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.kind != "shifted_relu" and self.beta != 0:
            raise ValueError(f"beta only applies to shifted_relu, got {self}")

    @classmethod
    def relu(cls) -> Activation:
        return cls("relu")

    @classmethod
    def shifted_relu(cls, beta: float) -> Activation:
        return cls("shifted_relu", float(beta))

    @classmethod
    def identity(cls) -> Activation:
        return cls("identity")

    @property
    def nonnegative(self) -> bool:
        return self.kind == "relu"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return x
        out = np.maximum(x, 0.0)
        if self.kind == "shifted_relu":
            out -= self.beta
        return out

    def derivative(self, x: np.ndarray) -> np.ndarray:
        # subgradient 0 at the kink
        if self.kind == "identity":
            return np.ones_like(x)
        return (x > 0).astype(x.dtype)

    def to_token(self) -> str:
        if self.kind == "shifted_relu":
            return f"shifted_relu:{self.beta!r}"
        return self.kind

    @classmethod
    def from_token(cls, token: str) -> Activation:
        kind, _, beta = token.partition(":")
        return cls(kind, float(beta) if beta else 0.0)


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {a.shape}")
    return a


def _as_vector(a, name: str) -> np.ndarray:
    a = np.array(a, dtype=float).reshape(-1)
    return a


class _FlatParams:
    """Mixin packing every parameter array into one contiguous vector."""

    # (attribute, is_matrix) in serialisation order; filled in subclasses
    _fields: tuple[tuple[str, bool], ...] = ()

    def _layout(self):
        for attr, _ in self._fields:
            for i, arr in enumerate(getattr(self, attr)):
                if arr is not None:
                    yield f"{attr}{i}", attr, i, arr

    def _pack(self):
        entries = list(self._layout())
        total = sum(a.size for *_, a in entries)
        flat = np.empty(total)
        offset = 0
        for _, attr, i, arr in entries:
            view = flat[offset : offset + arr.size].reshape(arr.shape)
            view[...] = arr
            getattr(self, attr)[i] = view
            offset += arr.size
        self.flat = flat

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Parameter arrays keyed by ``<field><layer>``, as views into ``flat``."""
        return {name: arr for name, _, _, arr in self._layout()}

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        """View ``vec`` (same length as ``flat``) with this network's layout."""
        out = {}
        offset = 0
        for name, _, _, arr in self._layout():
            out[name] = vec[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size
        return out

    def constrained_names(self) -> list[str]:
        raise NotImplementedError

    def constrained_mask(self) -> np.ndarray:
        """Boolean mask over ``flat`` marking entries that must be >= 0."""
        mask = np.zeros(self.flat.size, dtype=bool)
        views = self.unflatten(mask)
        for name in self.constrained_names():
            views[name][...] = True
        return mask

    @property
    def n_parameters(self) -> int:
        return self.flat.size


@dataclass(eq=False)
class FicnnParams(_FlatParams):
    """Fully input convex network.

    Layer ``i`` computes ``z[i+1] = g[i](Wz[i] @ z[i] + Wy[i] @ y + b[i])``
    with ``Wz[0] = None`` (there is no ``z[0]``). The last layer has width 1.
    """

    Wz: list
    Wy: list
    b: list
    activations: list
    mode: Mode = Mode.MPC
    flat: np.ndarray = field(init=False, repr=False)

    _fields = (("Wz", True), ("Wy", True), ("b", False))

    def __post_init__(self):
        self.mode = Mode(self.mode)
        L = len(self.Wy)
        if not (len(self.Wz) == len(self.b) == len(self.activations) == L):
            raise DimensionError("Wz, Wy, b and activations need one entry per layer")
        if L == 0:
            raise DimensionError("network needs at least one layer")
        self.Wy = [_as_matrix(w, f"Wy{i}") for i, w in enumerate(self.Wy)]
        self.b = [_as_vector(v, f"b{i}") for i, v in enumerate(self.b)]
        self.Wz = [None] + [_as_matrix(w, f"Wz{i}") for i, w in enumerate(self.Wz) if i > 0]
        self.activations = list(self.activations)
        self._check_dimensions()
        self._pack()

    def _check_dimensions(self):
        d = self.Wy[0].shape[1]
        prev = None
        for i, (Wy, b) in enumerate(zip(self.Wy, self.b)):
            h = Wy.shape[0]
            if Wy.shape[1] != d:
                raise DimensionError(f"layer {i}: Wy has {Wy.shape[1]} inputs, expected {d}")
            if b.shape != (h,):
                raise DimensionError(f"layer {i}: b has shape {b.shape}, expected ({h},)")
            if i > 0 and self.Wz[i].shape != (h, prev):
                raise DimensionError(
                    f"layer {i}: Wz has shape {self.Wz[i].shape}, expected ({h}, {prev})"
                )
            prev = h
        if prev != 1:
            raise DimensionError(f"output layer has width {prev}, expected 1")

    @property
    def n_layers(self) -> int:
        return len(self.Wy)

    @property
    def input_dim(self) -> int:
        return self.Wy[0].shape[1]

    def constrained_names(self) -> list[str]:
        names = [f"Wz{i}" for i in range(1, self.n_layers)]
        if self.mode is Mode.MPC:
            names += [f"Wy{i}" for i in range(self.n_layers)]
        return names

    def copy(self) -> FicnnParams:
        return FicnnParams(
            [None if w is None else w.copy() for w in self.Wz],
            [w.copy() for w in self.Wy],
            [v.copy() for v in self.b],
            list(self.activations),
            self.mode,
        )


@dataclass(eq=False)
class PicnnParams(_FlatParams):
    """Partially input convex network.

    Non-convex path ``v[i+1] = gt[i](Wt[i] @ v[i] + bt[i])`` with ``v[0] = ytilde``.
    Convex path::

        z[i+1] = g[i]( Wz[i] @ (z[i] * gzv[i](Wzv[i] @ v[i] + bz[i]))
                     + Wy[i] @ (y * gyv[i](Wyv[i] @ v[i] + by[i]))
                     + Wv[i] @ v[i] + b[i] )

    ``Wz``, ``Wzv`` and ``bz`` are ``None`` for layer 0; ``Wt``/``bt`` have
    ``n_layers - 1`` entries since the last layer does not feed ``v`` forward.
    The gate activations ``gzv``/``gyv`` default to what the mode requires:
    identity for ``Mode.AMOS`` and ReLU for ``Mode.MPC``.
    """

    Wt: list
    bt: list
    Wz: list
    Wzv: list
    bz: list
    Wy: list
    Wyv: list
    by: list
    Wv: list
    b: list
    activations: list
    tilde_activations: list
    mode: Mode = Mode.MPC
    zv_activations: list | None = None
    yv_activations: list | None = None
    flat: np.ndarray = field(init=False, repr=False)

    _fields = (
        ("Wt", True), ("bt", False), ("Wz", True), ("Wzv", True), ("bz", False),
        ("Wy", True), ("Wyv", True), ("by", False), ("Wv", True), ("b", False),
    )  # fmt: skip

    def __post_init__(self):
        self.mode = Mode(self.mode)
        L = len(self.Wy)
        if L == 0:
            raise DimensionError("network needs at least one layer")
        for name in ("Wz", "Wzv", "bz", "Wyv", "by", "Wv", "b", "activations"):
            if len(getattr(self, name)) != L:
                raise DimensionError(f"{name} needs one entry per layer ({L})")
        for name in ("Wt", "bt", "tilde_activations"):
            if len(getattr(self, name)) != L - 1:
                raise DimensionError(f"{name} needs {L - 1} entries")
        for name, is_matrix in self._fields:
            conv = _as_matrix if is_matrix else _as_vector
            vals = getattr(self, name)
            if name in ("Wz", "Wzv", "bz"):
                setattr(self, name, [None] + [conv(v, f"{name}{i}") for i, v in enumerate(vals) if i > 0])
            else:
                setattr(self, name, [conv(v, f"{name}{i}") for i, v in enumerate(vals)])
        self.activations = list(self.activations)
        self.tilde_activations = list(self.tilde_activations)
        required = Activation.relu() if self.mode is Mode.MPC else Activation.identity()
        self.zv_activations = list(self.zv_activations or [required] * L)
        self.yv_activations = list(self.yv_activations or [required] * L)
        self._check_dimensions()
        self._pack()

    def _check_dimensions(self):
        d = self.Wy[0].shape[1]
        m = self.Wyv[0].shape[1]
        prev = None
        for i in range(self.n_layers):
            h = self.Wy[i].shape[0]

            def expect(name, shape, i=i):
                arr = getattr(self, name)[i]
                if arr.shape != shape:
                    raise DimensionError(f"layer {i}: {name} has shape {arr.shape}, expected {shape}")

            expect("Wy", (h, d))
            expect("Wyv", (d, m))
            expect("by", (d,))
            expect("Wv", (h, m))
            expect("b", (h,))
            if i > 0:
                expect("Wz", (h, prev))
                expect("Wzv", (prev, m))
                expect("bz", (prev,))
            if i < self.n_layers - 1:
                m_next = self.Wt[i].shape[0]
                expect("Wt", (m_next, m))
                expect("bt", (m_next,))
                m = m_next
            prev = h
        if prev != 1:
            raise DimensionError(f"output layer has width {prev}, expected 1")

    @property
    def n_layers(self) -> int:
        return len(self.Wy)

    @property
    def input_dim(self) -> int:
        return self.Wy[0].shape[1]

    @property
    def tilde_dim(self) -> int:
        return self.Wyv[0].shape[1]

    def constrained_names(self) -> list[str]:
        names = [f"Wz{i}" for i in range(1, self.n_layers)]
        if self.mode is Mode.MPC:
            names += [f"Wy{i}" for i in range(self.n_layers)]
        return names

    def copy(self) -> PicnnParams:
        def dup(xs):
            return [None if x is None else x.copy() for x in xs]

        return PicnnParams(
            *(dup(getattr(self, name)) for name, _ in self._fields),
            list(self.activations),
            list(self.tilde_activations),
            self.mode,
            list(self.zv_activations),
            list(self.yv_activations),
        )


def check_invariants(params: FicnnParams | PicnnParams) -> None:
    """Raise :class:`InvariantError` unless ``params`` is valid for its mode.

    Checks the sign constraints on weights and, for PICNN, that the gate
    activations match the mode. Every supported activation kind is convex
    and non-decreasing, so those need no check.
    """
    if isinstance(params, PicnnParams):
        _check_gates(params)
    for name in params.constrained_names():
        arr = params.named_arrays()[name]
        if np.any(arr < 0):
            raise InvariantError(
                f"{name} has {int(np.sum(arr < 0))} negative entries "
                f"(min {arr.min():.6g}) but must be non-negative in {params.mode.value} mode"
            )
    if not np.all(np.isfinite(params.flat)):
        raise InvariantError("non-finite parameter values")


def project_feasible(params: FicnnParams | PicnnParams) -> FicnnParams | PicnnParams:
    """Return a copy with every sign-constrained weight clamped to ``max(w, 0)``."""
    out = params.copy()
    clamp_in_place(out)
    return out


def clamp_in_place(params: FicnnParams | PicnnParams, mask: np.ndarray | None = None) -> None:
    if mask is None:
        mask = params.constrained_mask()
    flat = params.flat
    flat[mask] = np.maximum(flat[mask], 0.0)


def _prepare_input(x, dim: int, what: str, layer: int = 0) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] != dim:
        raise DimensionError(
            f"layer {layer}: {what} has {x2.shape[-1] if x2.ndim else 0} features, expected {dim}"
        )
    return x2, single


def ficnn_forward(params: FicnnParams, y) -> float | np.ndarray:
    """Evaluate a FICNN on one input vector or a batch of row vectors."""
    Y, single = _prepare_input(y, params.input_dim, "y")
    z = None
    for i in range(params.n_layers):
        pre = Y @ params.Wy[i].T + params.b[i]
        if i > 0:
            pre += z @ params.Wz[i].T
        z = params.activations[i](pre)
    out = z[:, 0]
    return float(out[0]) if single else out


def _check_gates(params: PicnnParams) -> None:
    required = Activation.relu() if params.mode is Mode.MPC else Activation.identity()
    for name in ("zv_activations", "yv_activations"):
        for i, act in enumerate(getattr(params, name)):
            if i == 0 and name == "zv_activations":
                continue
            if act != required:
                raise InvariantError(
                    f"layer {i}: {name[:2]} gate is {act.kind} but "
                    f"{params.mode.value} mode requires {required.kind}"
                )


def picnn_forward(params: PicnnParams, y, ytilde) -> float | np.ndarray:
    """Evaluate a PICNN; ``y`` and ``ytilde`` are vectors or row-aligned batches."""
    _check_gates(params)
    Y, single = _prepare_input(y, params.input_dim, "y")
    V, single_t = _prepare_input(ytilde, params.tilde_dim, "ytilde")
    if Y.shape[0] != V.shape[0]:
        if Y.shape[0] == 1:
            Y = np.broadcast_to(Y, (V.shape[0], Y.shape[1]))
        elif V.shape[0] == 1:
            V = np.broadcast_to(V, (Y.shape[0], V.shape[1]))
        else:
            raise DimensionError(f"batch sizes differ: y {Y.shape[0]}, ytilde {V.shape[0]}")
    z = None
    for i in range(params.n_layers):
        gate_y = params.yv_activations[i](V @ params.Wyv[i].T + params.by[i])
        pre = (Y * gate_y) @ params.Wy[i].T + V @ params.Wv[i].T + params.b[i]
        if i > 0:
            gate_z = params.zv_activations[i](V @ params.Wzv[i].T + params.bz[i])
            pre += (z * gate_z) @ params.Wz[i].T
        z = params.activations[i](pre)
        if i < params.n_layers - 1:
            V = params.tilde_activations[i](V @ params.Wt[i].T + params.bt[i])
    out = z[:, 0]
    return float(out[0]) if (single and single_t) else out


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def hidden_activations(n_layers: int, beta: float) -> list[Activation]:
    return [Activation.relu()] * (n_layers - 1) + [Activation.shifted_relu(beta)]


def init_ficnn(
    input_dim: int,
    hidden: int,
    n_layers: int,
    mode: Mode | str = Mode.MPC,
    beta: float = 0.0,
    rng: np.random.Generator | None = None,
    output: Activation | None = None,
) -> FicnnParams:
    """Glorot-uniform FICNN, projected onto the feasible set of ``mode``.

    The output bias starts at ``beta`` so that the shifted ReLU output begins
    in its linear region with a prediction near zero.
    """
    rng = np.random.default_rng() if rng is None else rng
    widths = [hidden] * (n_layers - 1) + [1]
    Wz, Wy, b = [None], [], []
    for i, h in enumerate(widths):
        Wy.append(_glorot(rng, h, input_dim))
        b.append(np.zeros(h))
        if i > 0:
            Wz.append(_glorot(rng, h, widths[i - 1]))
    b[-1][:] = beta
    acts = hidden_activations(n_layers, beta)
    if output is not None:
        acts[-1] = output
    params = FicnnParams(Wz, Wy, b, acts, Mode(mode))
    clamp_in_place(params)
    return params


def init_picnn(
    input_dim: int,
    tilde_dim: int,
    hidden: int,
    n_layers: int,
    mode: Mode | str = Mode.MPC,
    beta: float = 0.0,
    rng: np.random.Generator | None = None,
    output: Activation | None = None,
) -> PicnnParams:
    """Glorot-uniform PICNN projected onto the feasible set of ``mode``.

    Gate biases start at 1 so the multiplicative gates are open at
    initialisation; the non-convex path uses the same hidden width.
    """
    rng = np.random.default_rng() if rng is None else rng
    widths = [hidden] * (n_layers - 1) + [1]
    tilde_widths = [tilde_dim] + [hidden] * (n_layers - 1)
    d = input_dim
    Wt, bt, Wz, Wzv, bz = [], [], [None], [None], [None]
    Wy, Wyv, by, Wv, b = [], [], [], [], []
    for i, h in enumerate(widths):
        m = tilde_widths[i]
        Wy.append(_glorot(rng, h, d))
        Wyv.append(_glorot(rng, d, m))
        by.append(np.ones(d))
        Wv.append(_glorot(rng, h, m))
        b.append(np.zeros(h))
        if i > 0:
            Wz.append(_glorot(rng, h, widths[i - 1]))
            Wzv.append(_glorot(rng, widths[i - 1], m))
            bz.append(np.ones(widths[i - 1]))
        if i < n_layers - 1:
            Wt.append(_glorot(rng, tilde_widths[i + 1], m))
            bt.append(np.zeros(tilde_widths[i + 1]))
    b[-1][:] = beta
    acts = hidden_activations(n_layers, beta)
    if output is not None:
        acts[-1] = output
    params = PicnnParams(
        Wt, bt, Wz, Wzv, bz, Wy, Wyv, by, Wv, b, acts,
        [Activation.relu()] * (n_layers - 1), Mode(mode),
    )  # fmt: skip
    clamp_in_place(params)
    return params
