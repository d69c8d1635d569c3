"""EPIRK-W coefficient sets and their file format.

A tableau file is a JSON object::

    {
      "name": "epirkw3", "order": 3, "s": 3,
      "a": [[a11], [a21, a22], ...],          # s-1 ragged rows, row i has i entries
      "b": [b1, ..., bs],
      "g": [[g11, ...], ..., [gs1, ..., gss]], # s rows of s entries, row s = final stage
      "p": [[[p_ij1, ..., p_ijs], ...], ...]   # s x s x s
    }

Entries are numbers or rational strings such as ``"2/3"``. Only the
lower-triangular part of ``g`` and ``p`` is read (``j <= i``; every ``j`` for
the final row); other entries must still be present and are ignored.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np


class TableauError(ValueError):
    """Malformed tableau file or inconsistent coefficients."""


@dataclass(frozen=True)
class Tableau:
    """Coefficients of an ``s``-stage EPIRK-W method.

    Index conventions are zero-based: ``a[i, j]`` is the one-based
    ``a_{i+1, j+1}`` for internal stage ``i + 1``; ``g[s-1]`` and ``p[s-1]``
    belong to the final stage whose weights are ``b``.
    """

    name: str
    order: int
    s: int
    a: np.ndarray  # (s-1, s-1), lower triangular
    b: np.ndarray  # (s,)
    g: np.ndarray  # (s, s)
    p: np.ndarray  # (s, s, s)
    source: str = ""

    def __post_init__(self):
        s = self.s
        if s < 2:
            raise TableauError(f"s must be >= 2, got {s}")
        shapes = {"a": (s - 1, s - 1), "b": (s,), "g": (s, s), "p": (s, s, s)}
        for field, shape in shapes.items():
            arr = getattr(self, field)
            if arr.shape != shape:
                raise TableauError(f"{field}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise TableauError(f"{field}: non-finite coefficient")
        if np.any(np.triu(self.a, 1)):
            raise TableauError("a: entries above the diagonal")

    def weight(self, i: int, j: int) -> float:
        """Coefficient multiplying ``psi_{i,j}`` in stage ``i`` (1-based, ``i = s`` final)."""
        return float(self.b[j - 1] if i == self.s else self.a[i - 1, j - 1])

    def psi(self, i: int, j: int) -> tuple[np.ndarray, float]:
        """``(p_{i,j,:}, g_{i,j})`` for 1-based stage ``i`` and column ``j``."""
        return self.p[i - 1, j - 1], float(self.g[i - 1, j - 1])

    def checksum(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self) -> dict:
        s = self.s
        return {
            "name": self.name, "order": self.order, "s": s,
            "a": [[repr(float(self.a[i, j])) for j in range(i + 1)] for i in range(s - 1)],
            "b": [repr(float(x)) for x in self.b],
            "g": [[repr(float(x)) for x in row] for row in self.g],
            "p": [[[repr(float(x)) for x in r] for r in plane] for plane in self.p],
        }


def _number(value, where: str) -> float:
    if isinstance(value, bool):
        raise TableauError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        x = float(value)
    elif isinstance(value, str):
        try:
            x = float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            raise TableauError(f"{where}: cannot parse {value!r}") from None
    else:
        raise TableauError(f"{where}: expected a number, got {type(value).__name__}")
    if not math.isfinite(x):
        raise TableauError(f"{where}: non-finite value")
    return x


def _list(value, length: int, where: str) -> list:
    if not isinstance(value, list):
        raise TableauError(f"{where}: expected a list")
    if len(value) != length:
        raise TableauError(f"{where}: expected {length} entries, got {len(value)}")
    return value


def tableau_from_dict(doc: dict, source: str = "") -> Tableau:
    if not isinstance(doc, dict):
        raise TableauError("tableau document must be an object")
    for key in ("s", "order", "a", "b", "g", "p", "name"):
        if key not in doc:
            raise TableauError(f"{key}: missing field")
    s = doc["s"]
    if not isinstance(s, int) or isinstance(s, bool) or s < 2:
        raise TableauError(f"s: expected an integer >= 2, got {s!r}")
    order = doc["order"]
    if not isinstance(order, int) or isinstance(order, bool) or order < 1:
        raise TableauError(f"order: expected a positive integer, got {order!r}")

    a = np.zeros((s - 1, s - 1))
    rows = _list(doc["a"], s - 1, "a")
    for i, row in enumerate(rows):
        row = _list(row, i + 1, f"a[{i}]")
        for j, x in enumerate(row):
            a[i, j] = _number(x, f"a[{i}][{j}]")
    b = np.array([_number(x, f"b[{j}]") for j, x in enumerate(_list(doc["b"], s, "b"))])
    g = np.zeros((s, s))
    for i, row in enumerate(_list(doc["g"], s, "g")):
        for j, x in enumerate(_list(row, s, f"g[{i}]")):
            g[i, j] = _number(x, f"g[{i}][{j}]")
    p = np.zeros((s, s, s))
    for i, plane in enumerate(_list(doc["p"], s, "p")):
        for j, row in enumerate(_list(plane, s, f"p[{i}]")):
            for k, x in enumerate(_list(row, s, f"p[{i}][{j}]")):
                p[i, j, k] = _number(x, f"p[{i}][{j}][{k}]")
    # entries outside the used pattern carry no meaning
    for i in range(s - 1):
        g[i, i + 1:] = 0.0
        p[i, i + 1:, :] = 0.0
    return Tableau(name=str(doc["name"]), order=order, s=s, a=a, b=b, g=g, p=p,
                   source=source)


def load_tableau(path) -> Tableau:
    """Read a tableau file; ``path`` may also name a bundled tableau (``"epirkw3"``)."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        bundled = resources.files("epirkw") / "data" / f"{path}.json"
        if bundled.is_file():
            return tableau_from_dict(json.loads(bundled.read_text()), source=f"bundled:{path}")
        raise TableauError(f"no tableau file or bundled tableau named {path!r}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise TableauError(f"{p}: invalid JSON ({exc})") from None
    return tableau_from_dict(doc, source=str(p))


def fd_coefficient(l: int, j: int) -> int:
    """Forward-difference weight ``(-1)^l binom(j - 1, l)`` for ``0 <= l <= j - 1``."""
    if j < 1 or not 0 <= l <= j - 1:
        raise ValueError(f"fd_coefficient: need 0 <= l <= j-1, got l={l}, j={j}")
    return (-1) ** l * math.comb(j - 1, l)
