"""Toy datasets, the 8-bit scaling convention, and CSV persistence.

Discrete data are 8-bit integers X in {0..255} mapped to the 256 scaled
levels ``x = (X + 1/2 - 128) / 128`` in (-1, 1). :data:`LEVELS` is the
single source of that table; quantization bins are the floor of
``(x + 1) * 128`` with clamped edges, so every level round-trips exactly.

Datasets carry their analytic density parameters (an
:class:`~dode.gaussian.IsoGaussianMixture`) whenever they have one, so
tests can compare estimates against ground truth.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ParseError, UnsupportedVersionError
from .gaussian import IsoGaussianMixture

DATASET_MAGIC = "dode-dataset"
DATASET_VERSION = 1

# the 256 scaled level centers; everything discrete references this table
LEVELS = (np.arange(256, dtype=np.float64) + 0.5 - 128.0) / 128.0


def quantize(x) -> np.ndarray:
    """Map continuous values in [-1, 1] to 8-bit levels (clamped floor bins)."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.floor((x + 1.0) * 128.0), 0, 255).astype(np.int64)


def level_center(levels) -> np.ndarray:
    """Inverse of :func:`quantize` onto bin centers."""
    idx = np.asarray(levels, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx > 255):
        raise InvalidInputError("levels must lie in 0..255")
    return LEVELS[idx]


@dataclass
class Dataset:
    """Sample matrix plus (optionally) its discretization and oracle params."""

    kind: str
    samples: np.ndarray  # (n, d) float64
    discrete: np.ndarray | None = None  # (n, d) int64 in 0..255
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("samples must be finite")
        if self.discrete is not None:
            self.discrete = np.asarray(self.discrete, dtype=np.int64)
            if self.discrete.shape != self.samples.shape:
                raise InvalidInputError("discrete matrix must match samples shape")
            if not np.array_equal(level_center(self.discrete), self.samples):
                raise InvalidInputError("discrete samples must sit exactly on level centers")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    @property
    def mixture(self) -> IsoGaussianMixture | None:
        return self.params.get("mixture")


def default_mixture_2d() -> IsoGaussianMixture:
    """The standard two-component 2-D toy target, supported inside [-1,1]^2."""
    return IsoGaussianMixture(
        means=np.array([[-0.5, -0.2], [0.5, 0.35]]),
        weights=np.array([0.5, 0.5]),
        scales=np.array([0.12, 0.12]),
    )


def generate(kind: str, n: int, seed: int = 0, **params) -> Dataset:
    """Deterministically generate a toy dataset.

    Kinds: ``gauss`` (s0, d), ``gauss-mixture`` (means, weights, scales; a
    2-D default when omitted), ``checkerboard2d``, and ``discrete256``
    (quantized view of a ``source`` kind, default gauss with s0=0.4, d=1).
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "gauss":
        s0 = float(params.get("s0", 1.0))
        d = int(params.get("d", 2))
        mix = IsoGaussianMixture.single(s0, d)
        return Dataset("gauss", mix.sample(n, rng), params={"mixture": mix, "s0": s0})
    if kind == "gauss-mixture":
        if "means" in params:
            mix = IsoGaussianMixture(
                np.asarray(params["means"], dtype=np.float64),
                np.asarray(params["weights"], dtype=np.float64),
                np.asarray(params["scales"], dtype=np.float64),
            )
        else:
            mix = default_mixture_2d()
        return Dataset("gauss-mixture", mix.sample(n, rng), params={"mixture": mix})
    if kind == "checkerboard2d":
        # uniform over the dark cells of a 4x4 board covering [-1, 1]^2
        cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
        pick = rng.integers(0, len(cells), size=n)
        u = rng.uniform(0.0, 0.5, size=(n, 2))
        xy = np.array([[-1.0 + 0.5 * i, -1.0 + 0.5 * j] for i, j in cells])[pick]
        return Dataset("checkerboard2d", xy + u)
    if kind == "discrete256":
        source = params.get("source")
        if source is None:
            source = generate(params.get("source_kind", "gauss"), n, seed, s0=params.get("s0", 0.4), d=params.get("d", 1))
        disc = quantize(source.samples)
        return Dataset("discrete256", level_center(disc), discrete=disc, params=dict(source.params))
    raise InvalidInputError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# CSV persistence; byte-identical round trips
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(v, ".17g")


def save_dataset(ds: Dataset, path) -> None:
    buf = io.StringIO()
    buf.write(f"# {DATASET_MAGIC} v{DATASET_VERSION} kind={ds.kind} d={ds.d}\n")
    if ds.discrete is not None:
        for row in ds.discrete:
            buf.write(",".join(str(int(v)) for v in row))
            buf.write("\n")
    else:
        for row in ds.samples:
            buf.write(",".join(_fmt(v) for v in row))
            buf.write("\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError("missing header line", offset=len(raw))
    header = raw[:nl].decode("utf-8", errors="replace").strip()
    parts = header.split()
    if len(parts) != 5 or parts[0] != "#" or parts[1] != DATASET_MAGIC:
        raise ParseError(f"not a dataset file: {header!r}", offset=0)
    if parts[2] != f"v{DATASET_VERSION}":
        raise UnsupportedVersionError(f"dataset version {parts[2]} not supported", offset=2)
    try:
        kind = parts[3].split("=", 1)[1]
        d = int(parts[4].split("=", 1)[1])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed header: {header!r}", offset=0) from exc

    rows = []
    offset = nl + 1
    body = raw[nl + 1 :].decode("utf-8", errors="replace")
    for line in body.splitlines(keepends=True):
        text = line.rstrip("\n")
        if text:
            vals = text.split(",")
            if len(vals) != d:
                raise ParseError(f"expected {d} columns, got {len(vals)}", offset=offset)
            try:
                rows.append([float(v) for v in vals])
            except ValueError as exc:
                raise ParseError(f"bad number in row: {text!r}", offset=offset) from exc
        if not line.endswith("\n"):
            raise ParseError("file truncated mid-row", offset=offset + len(line))
        offset += len(line)
    if not rows:
        raise ParseError("dataset has no rows", offset=offset)
    arr = np.asarray(rows, dtype=np.float64)
    if kind == "discrete256" or np.all(arr == np.round(arr)):
        disc = arr.astype(np.int64)
        if np.all((disc >= 0) & (disc <= 255)) and kind == "discrete256":
            return Dataset(kind, level_center(disc), discrete=disc)
    return Dataset(kind, arr)
