"""Dense tensors, CP forms and the multilinear operations built on them.

Dense tensors are plain :class:`numpy.ndarray` objects (C order, so the flat
layout is row-major).  A CP form stores unit-norm factor vectors per mode
plus one scalar weight per component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ._validation import check_same_shape, check_tensor

#: Marker for a free (uncontracted) mode in :func:`contract`.
IDENTITY = None

UNIT_NORM_TOL = 1e-9

ModeArgument = Optional[np.ndarray]


@dataclass(eq=False)
class CPForm:
    """Weighted sum of rank-one tensors.

    Parameters
    ----------
    weights : ndarray of shape (rank,)
        Component weights, possibly negative.
    factors : list of ndarray
        One array per mode; ``factors[j][k]`` is the unit vector of component
        ``k`` in mode ``j`` so ``factors[j]`` has shape ``(rank, d_j)``.
    objective_history : list of float
        Objective after each accepted sweep, filled in by the fitting routines.
    """

    weights: np.ndarray
    factors: list = field(default_factory=list)
    objective_history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.factors = [np.atleast_2d(np.asarray(f, dtype=float)) for f in self.factors]
        if not self.factors:
            raise ValueError("a CP form needs at least one mode")
        for j, f in enumerate(self.factors):
            if f.ndim != 2 or f.shape[0] != self.rank:
                raise ValueError(
                    f"factor for mode {j} has shape {f.shape}, expected ({self.rank}, d)"
                )
        if self.rank:
            norms = np.stack([np.linalg.norm(f, axis=1) for f in self.factors])
            if not np.allclose(norms, 1.0, rtol=0.0, atol=UNIT_NORM_TOL):
                raise ValueError("CP factor vectors must have unit Euclidean norm")

    @property
    def rank(self) -> int:
        return self.weights.shape[0]

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple:
        return tuple(f.shape[1] for f in self.factors)

    @property
    def n_parameters(self) -> int:
        """Number of factor entries, ``rank * sum(shape)``."""
        return self.rank * sum(self.shape)

    def component(self, k: int) -> np.ndarray:
        """Dense tensor of the weighted ``k``-th rank-one term."""
        return self.weights[k] * outer([f[k] for f in self.factors])

    def copy(self) -> "CPForm":
        return CPForm(self.weights.copy(), [f.copy() for f in self.factors])

    @classmethod
    def empty(cls, shape: Sequence[int]) -> "CPForm":
        return cls(np.zeros(0), [np.zeros((0, d)) for d in shape])

    @classmethod
    def from_unnormalized(cls, weights, vectors) -> "CPForm":
        """Build a CP form from arbitrary nonzero vectors, moving norms into weights.

        ``vectors[j]`` has shape ``(rank, d_j)`` like :attr:`factors`.
        """
        weights = np.array(weights, dtype=float)
        factors = []
        for v in vectors:
            v = np.array(v, dtype=float)
            norms = np.linalg.norm(v, axis=1)
            if np.any(norms == 0):
                raise ValueError("zero factor vector cannot be normalized")
            weights = weights * norms
            factors.append(v / norms[:, None])
        return cls(weights, factors)


def outer(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Outer product ``v_1 (x) v_2 (x) ... (x) v_n``."""
    out = np.asarray(vectors[0], dtype=float)
    for v in vectors[1:]:
        out = np.multiply.outer(out, np.asarray(v, dtype=float))
    return out


def contract(t, args: Sequence[ModeArgument]) -> np.ndarray:
    """Contract a tensor with one vector per mode, leaving ``IDENTITY`` modes free.

    Parameters
    ----------
    t : array_like of shape (d_1, ..., d_n)
    args : sequence of length n
        Each entry is a vector of length ``d_j`` or :data:`IDENTITY`.

    Returns
    -------
    ndarray
        Tensor over the free modes in their original order.  When every mode
        is bound, a 0-d array holding the scalar ``T(u^1, ..., u^n)``.
    """
    t = check_tensor(t)
    if len(args) != t.ndim:
        raise ValueError(f"expected {t.ndim} mode arguments, got {len(args)}")
    out = t
    # bind from the last mode down so earlier axis indices stay valid
    for j in reversed(range(t.ndim)):
        u = args[j]
        if u is IDENTITY:
            continue
        u = np.asarray(u, dtype=float)
        if u.shape != (t.shape[j],):
            raise ValueError(
                f"mode {j}: vector of shape {u.shape} does not match dimension {t.shape[j]}"
            )
        out = np.tensordot(out, u, axes=([j], [0]))
    return np.asarray(out)


def reconstruct(cp: CPForm, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Dense tensor ``sum_k w_k u_k^1 (x) ... (x) u_k^n``."""
    if shape is not None and tuple(shape) != cp.shape:
        raise ValueError(f"CP form has shape {cp.shape}, requested {tuple(shape)}")
    if cp.rank == 0:
        return np.zeros(cp.shape)
    # row-wise Khatri-Rao product of modes 2..n, then one matrix product
    r = cp.rank
    kr = np.ones((r, 1))
    for f in cp.factors[1:]:
        kr = (kr[:, :, None] * f[:, None, :]).reshape(r, -1)
    first = cp.factors[0] * cp.weights[:, None]
    return (first.T @ kr).reshape(cp.shape)


def frobenius_distance(a, b) -> float:
    a, b = check_same_shape(a, b)
    return float(np.sqrt(np.sum((a - b) ** 2)))


def entrywise_multiply(a, b) -> np.ndarray:
    a, b = check_same_shape(a, b)
    return a * b


def truncate(cp: CPForm, r: int) -> CPForm:
    """Keep the ``r`` components of largest ``|w_k|``, in their original order."""
    if r > cp.rank:
        raise ValueError(f"cannot truncate rank {cp.rank} CP form to rank {r}")
    if r < 0:
        raise ValueError("rank must be non-negative")
    keep = np.sort(np.argsort(-np.abs(cp.weights), kind="stable")[:r])
    return CPForm(cp.weights[keep], [f[keep] for f in cp.factors])


# -- text formats -------------------------------------------------------------

PathLike = Union[str, Path]


def save_tensor(path: PathLike, t) -> None:
    """Write ``shape: d1 ... dn`` then the values, one last-mode row per line."""
    t = check_tensor(t)
    lines = ["shape: " + " ".join(str(d) for d in t.shape)]
    rows = t.reshape(-1, t.shape[-1]) if t.ndim else t.reshape(1, 1)
    lines.extend(" ".join(repr(float(x)) for x in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def load_tensor(path: PathLike) -> np.ndarray:
    text = Path(path).read_text().split("\n", 1)
    header, body = text[0], text[1] if len(text) > 1 else ""
    if not header.startswith("shape:"):
        raise ValueError(f"{path}: missing 'shape:' header")
    shape = tuple(int(d) for d in header[len("shape:"):].split())
    values = np.array(body.split(), dtype=float)
    expected = int(np.prod(shape))
    if values.size != expected:
        raise ValueError(f"{path}: expected {expected} values for shape {shape}, got {values.size}")
    return check_tensor(values.reshape(shape))


def save_cp(path: PathLike, cp: CPForm) -> None:
    lines = [
        f"rank: {cp.rank}",
        f"order: {cp.order}",
        "dims: " + " ".join(str(d) for d in cp.shape),
    ]
    for k in range(cp.rank):
        lines.append(repr(float(cp.weights[k])))
        for f in cp.factors:
            lines.append(" ".join(repr(float(x)) for x in f[k]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_cp(path: PathLike) -> CPForm:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        rank = int(lines[0].split(":", 1)[1])
        order = int(lines[1].split(":", 1)[1])
        dims = [int(d) for d in lines[2].split(":", 1)[1].split()]
    except (IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed CP header") from exc
    if len(dims) != order:
        raise ValueError(f"{path}: order {order} but {len(dims)} dims")
    body = lines[3:]
    if len(body) != rank * (order + 1):
        raise ValueError(f"{path}: expected {rank * (order + 1)} component lines, got {len(body)}")
    weights = np.empty(rank)
    factors = [np.empty((rank, d)) for d in dims]
    for k in range(rank):
        block = body[k * (order + 1):(k + 1) * (order + 1)]
        weights[k] = float(block[0])
        for j in range(order):
            factors[j][k] = np.array(block[j + 1].split(), dtype=float)
    return CPForm(weights, factors)
