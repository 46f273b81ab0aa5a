"""Prefix-keyed options database and solver-tree construction.

Keys are stored without the leading dash.  A solver node with prefix
``mg_coarse_`` reads ``mg_coarse_ksp_type``, ``mg_coarse_pc_type`` and so on;
nested nodes extend the prefix (``mg_coarse_telescope_``, ``mg_levels_sub_``).
"""
from __future__ import annotations

import shlex
import warnings
from typing import Iterable

from .errors import ConfigurationError


class OptionsParseError(ValueError):
    pass


_TRUE = ("true", "1", "yes", "on")
_FALSE = ("false", "0", "no", "off")


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def is_key(tok: str) -> bool:
    return tok.startswith("-") and len(tok) > 1 and not _is_number(tok)


class OptionsDatabase:
    """Ordered ``key -> value`` map with usage tracking.

    Flags map to ``"true"``.  Inserting an existing key replaces its value
    (last insertion wins).
    """

    def __init__(self, items: Iterable | dict | None = None, source: str = "programmatic"):
        self._values: dict[str, str] = {}
        self._sources: dict[str, str] = {}
        self._used: set[str] = set()
        if items:
            pairs = items.items() if isinstance(items, dict) else items
            for k, v in pairs:
                self.set(k, v, source)

    # ------------------------------------------------------------ mutation
    def set(self, key: str, value="true", source: str = "programmatic") -> None:
        key = key[1:] if key.startswith("-") else key
        if not key:
            raise OptionsParseError("empty option key")
        self._values.pop(key, None)
        self._values[key] = str(value)
        self._sources[key] = source

    def update(self, other: "OptionsDatabase") -> "OptionsDatabase":
        for k, v in other.items():
            self.set(k, v, other.source(k))
        return self

    def copy(self) -> "OptionsDatabase":
        out = OptionsDatabase()
        out.update(self)
        return out

    # -------------------------------------------------------------- lookup
    def has(self, key: str) -> bool:
        return key in self._values

    __contains__ = has

    def get(self, key: str, default=None):
        if key in self._values:
            self._used.add(key)
            return self._values[key]
        return default

    def get_str(self, key: str, default: str | None = None) -> str | None:
        v = self.get(key)
        return default if v is None else v.lower()

    def get_int(self, key: str, default: int | None = None) -> int | None:
        v = self.get(key)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError:
            raise ConfigurationError(f"option -{key} expects an integer, got {v!r}") from None

    def get_float(self, key: str, default: float | None = None) -> float | None:
        v = self.get(key)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError:
            raise ConfigurationError(f"option -{key} expects a number, got {v!r}") from None

    def get_bool(self, key: str, default: bool = False) -> bool:
        v = self.get(key)
        if v is None:
            return default
        if v.lower() in _TRUE:
            return True
        if v.lower() in _FALSE:
            return False
        raise ConfigurationError(f"option -{key} expects a boolean, got {v!r}")

    def get_float_list(self, key: str) -> list[float] | None:
        v = self.get(key)
        if v is None:
            return None
        try:
            return [float(t) for t in v.split(",") if t.strip()]
        except ValueError:
            raise ConfigurationError(f"option -{key} expects comma-separated numbers, got {v!r}") from None

    def source(self, key: str) -> str | None:
        return self._sources.get(key)

    def keys(self):
        return self._values.keys()

    def items(self):
        return self._values.items()

    def __len__(self):
        return len(self._values)

    def __eq__(self, other):
        return isinstance(other, OptionsDatabase) and dict(self._values) == dict(other._values)

    def __repr__(self):
        return f"OptionsDatabase({dict(self._values)!r})"

    # ------------------------------------------------------------- usage
    def unused(self) -> list[str]:
        return [k for k in self._values if k not in self._used]

    def warn_unused(self) -> list[str]:
        left = self.unused()
        for k in left:
            warnings.warn(f"option -{k} was never used")
        return left

    # ------------------------------------------------------ serialisation
    def serialize(self) -> list[str]:
        out = []
        for k, v in self._values.items():
            out.append("-" + k)
            if v != "true":
                out.append(v)
        return out

    def to_lines(self) -> list[str]:
        return [f"-{k} {shlex.quote(v)}" if v != "true" else f"-{k}" for k, v in self._values.items()]


def parse(tokens: Iterable[str], source: str = "cli", db: OptionsDatabase | None = None) -> OptionsDatabase:
    """Parse ``-key [value]`` tokens; a key followed by another key (or nothing) is a flag."""
    toks = list(tokens)
    db = db if db is not None else OptionsDatabase()
    i = 0
    while i < len(toks):
        tok = toks[i]
        if not is_key(tok):
            raise OptionsParseError(f"expected an option key at position {i}, got {tok!r}")
        if i + 1 < len(toks) and not is_key(toks[i + 1]):
            db.set(tok, toks[i + 1], source)
            i += 2
        else:
            db.set(tok, "true", source)
            i += 1
    return db


def parse_lines(lines: Iterable[str], source: str = "file") -> OptionsDatabase:
    """Options-file format: ``-key value`` per line, ``#`` starts a comment."""
    tokens: list[str] = []
    for line in lines:
        tokens.extend(shlex.split(line, comments=True))
    return parse(tokens, source)


def parse_file(path) -> OptionsDatabase:
    with open(path) as fh:
        return parse_lines(fh, source=f"file:{path}")


def build_solver_tree(db: OptionsDatabase, prefix: str, A, grid=None, callback=None):
    """Instantiate and set up the solver node rooted at ``prefix``."""
    from .ksp import SolverNode

    node = SolverNode(db, prefix, role="outer")
    node.setup(A, grid=grid, callback=callback)
    return node


def fused_levels(desc: dict) -> int:
    """Total multigrid depth of a described tree, fusing MG-through-telescope chains.

    An outer hierarchy of ``N1`` levels whose coarse solver is a telescope
    wrapping an ``N2``-level hierarchy contributes ``N1 + N2 - 1`` levels.
    Only meaningful on ranks that belong to every nested sub-communicator
    (e.g. rank 0).
    """
    pc = desc.get("pc", {})
    while pc.get("type") == "telescope":
        pc = (pc.get("inner") or {}).get("pc") or {}
    if pc.get("type") != "mg":
        return 0
    inner = fused_levels(pc["coarse"])
    return pc["levels"] + (inner - 1 if inner else 0)
