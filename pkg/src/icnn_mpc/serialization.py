"""Plain-text model files.

Layout::

    icnn-model 1
    network: ficnn
    mode: mpc
    layers: 4
    ...
    array Wy0 9 11
    0.123 -0.5 ...
    ...
    end

Header lines are ``key: value``. Each ``array`` block names the array, its
row and column count, and holds one row per line of ``repr`` floats, which
round-trip exactly. Vectors are stored as a single row.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .networks import Activation, FicnnParams, Mode, PicnnParams, check_invariants

MAGIC = "icnn-model 1"


class FormatError(ValueError):
    pass


def _tokens(acts) -> str:
    return " ".join(a.to_token() for a in acts)


def _acts(text: str) -> list[Activation]:
    return [Activation.from_token(t) for t in text.split()]


def dumps(params: FicnnParams | PicnnParams, header: dict | None = None,
          extra_arrays: dict[str, np.ndarray] | None = None) -> str:
    """Serialise ``params`` (plus optional header fields and arrays) to text."""
    lines = [MAGIC]
    if isinstance(params, FicnnParams):
        lines.append("network: ficnn")
    else:
        lines.append("network: picnn")
    lines.append(f"mode: {params.mode.value}")
    lines.append(f"layers: {params.n_layers}")
    lines.append(f"widths: {' '.join(str(w.shape[0]) for w in params.Wy)}")
    lines.append(f"activations: {_tokens(params.activations)}")
    if isinstance(params, PicnnParams):
        lines.append(f"tilde_activations: {_tokens(params.tilde_activations)}")
        lines.append(f"zv_activations: {_tokens(params.zv_activations)}")
        lines.append(f"yv_activations: {_tokens(params.yv_activations)}")
    for key, value in (header or {}).items():
        lines.append(f"{key}: {value}")
    arrays = dict(params.named_arrays())
    for name, arr in (extra_arrays or {}).items():
        arrays[f"extra.{name}"] = arr
    for name, arr in arrays.items():
        mat = np.atleast_2d(arr)
        lines.append(f"array {name} {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            lines.append(" ".join(repr(float(x)) for x in row))
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads(text: str, validate: bool = True):
    """Parse text produced by :func:`dumps`.

    Returns ``(params, header, extra_arrays)``. With ``validate`` the sign
    invariants of the declared mode are enforced at load time.
    """
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise FormatError("missing icnn-model header")
    header: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line == "end":
            break
        if line.startswith("array "):
            try:
                _, name, rows, cols = line.split()
                rows, cols = int(rows), int(cols)
                block = np.array(
                    [[float(x) for x in lines[i + r].split()] for r in range(rows)]
                )
            except (ValueError, IndexError) as exc:
                raise FormatError(f"bad array block at line {i}: {exc}") from exc
            if block.shape != (rows, cols):
                raise FormatError(f"array {name}: expected {rows}x{cols}, got {block.shape}")
            arrays[name] = block
            i += rows
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"line {i}: expected 'key: value', got {line!r}")
        header[key.strip()] = value.strip()

    try:
        kind = header.pop("network")
        mode = Mode(header.pop("mode"))
        n_layers = int(header.pop("layers"))
        header.pop("widths")
        acts = _acts(header.pop("activations"))
    except KeyError as exc:
        raise FormatError(f"missing header field {exc}") from exc

    def series(prefix):
        return [arrays.get(f"{prefix}{li}") for li in range(n_layers)]

    def vec(xs):
        return [None if x is None else x.reshape(-1) for x in xs]

    if kind == "ficnn":
        params = FicnnParams(series("Wz"), series("Wy"), vec(series("b")), acts, mode)
    elif kind == "picnn":
        params = PicnnParams(
            series("Wt")[: n_layers - 1], vec(series("bt"))[: n_layers - 1],
            series("Wz"), series("Wzv"), vec(series("bz")),
            series("Wy"), series("Wyv"), vec(series("by")),
            series("Wv"), vec(series("b")),
            acts, _acts(header.pop("tilde_activations", "")), mode,
            _acts(header.pop("zv_activations")), _acts(header.pop("yv_activations")),
        )  # fmt: skip
    else:
        raise FormatError(f"unknown network kind {kind!r}")
    if validate:
        check_invariants(params)
    extras = {k[len("extra."):]: v for k, v in arrays.items() if k.startswith("extra.")}
    return params, header, extras


def save(path, params, header=None, extra_arrays=None) -> None:
    Path(path).write_text(dumps(params, header, extra_arrays))


def load(path, validate: bool = True):
    return loads(Path(path).read_text(), validate=validate)
