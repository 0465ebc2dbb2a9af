"""Closed-form smoothness penalties for B-spline displacement fields.

Every supported penalty is an integral of products of field derivatives, and
within one tile such an integral collapses to a quadratic form p_i' V p_j on
the 64 supporting coefficients. The 64x64 operators V factor per axis:
V = Psi_1 (x) Psi_2 (x) Psi_3, where each Psi is a 4x4 matrix of exact
monomial integrals of basis-derivative products over the tile width. The
operators depend only on tile spacing and derivative orders, so a bank of 23
matrices built once serves the whole optimization.

Five penalties are assembled from the bank:

  S1 diffusion           sum of squared first derivatives (9 terms)
  S2 curvature           sum of squared second derivatives, mixed ones twice
  S3 linear elastic      S1's squares plus the three cross products of
                         distinct diagonal first derivatives, each once
                         (twelve products in total)
  S4 third order         squared third derivatives with ordered-sum
                         multiplicities 1 / 3 / 6
  S5 total displacement  squared field magnitude

The weighted total is S = mu1 S1 + ... + mu5 S5.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import bspline_core as core
from ._threads import single_threaded_blas

FIRST_DERIVS = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
SECOND_DERIVS = (
    ((2, 0, 0), 1),
    ((0, 2, 0), 1),
    ((0, 0, 2), 1),
    ((1, 1, 0), 2),
    ((1, 0, 1), 2),
    ((0, 1, 1), 2),
)
THIRD_DERIVS = (
    ((3, 0, 0), 1),
    ((0, 3, 0), 1),
    ((0, 0, 3), 1),
    ((2, 1, 0), 3),
    ((2, 0, 1), 3),
    ((1, 2, 0), 3),
    ((0, 2, 1), 3),
    ((1, 0, 2), 3),
    ((0, 1, 2), 3),
    ((1, 1, 1), 6),
)
# (delta_a, delta_b, component_a, component_b): the divergence-style cross
# products of the elastic penalty, one per unordered component pair.
ELASTIC_CROSS = (
    ((1, 0, 0), (0, 1, 0), 0, 1),
    ((1, 0, 0), (0, 0, 1), 0, 2),
    ((0, 1, 0), (0, 0, 1), 1, 2),
)

REGULARIZER_NAMES = ("diffusion", "curvature", "linear_elastic", "third_order", "total_displacement")


def _validate_delta(delta) -> tuple:
    d = tuple(int(v) for v in delta)
    if len(d) != 3 or any(v < 0 or v > 3 for v in d) or sum(d) > 3:
        raise ValueError(f"derivative multi-index must be 3 entries in 0..3, total <= 3: {delta}")
    return d


@dataclass(frozen=True)
class DerivPair:
    """Canonically ordered pair of derivative multi-indices keying one V matrix."""

    delta_i: tuple
    delta_j: tuple

    def __post_init__(self):
        di = _validate_delta(self.delta_i)
        dj = _validate_delta(self.delta_j)
        if di > dj:
            raise ValueError(f"pair must be in canonical order (delta_i <= delta_j): {di}, {dj}")
        object.__setattr__(self, "delta_i", di)
        object.__setattr__(self, "delta_j", dj)

    @classmethod
    def canonical(cls, delta_i, delta_j) -> tuple:
        """Canonical pair plus whether the inputs were swapped to get there.

        Swapping is harmless because p' V q forms transpose cleanly:
        V(a, b) = V(b, a)' entry for entry.
        """
        di, dj = _validate_delta(delta_i), _validate_delta(delta_j)
        if di <= dj:
            return cls(di, dj), False
        return cls(dj, di), True


@lru_cache(maxsize=1)
def canonical_pairs() -> tuple:
    """The 23 pairs the penalty assembly needs, in bank/file order:
    1 zeroth, 3 first squares, 3 first cross pairs, 6 second squares,
    10 third squares."""
    pairs = [DerivPair((0, 0, 0), (0, 0, 0))]
    pairs += [DerivPair.canonical(d, d)[0] for d in FIRST_DERIVS]
    pairs += [DerivPair.canonical(da, db)[0] for da, db, _, _ in ELASTIC_CROSS]
    pairs += [DerivPair.canonical(d, d)[0] for d, _ in SECOND_DERIVS]
    pairs += [DerivPair.canonical(d, d)[0] for d, _ in THIRD_DERIVS]
    assert len(set(pairs)) == len(pairs) == 23
    return tuple(pairs)


def _moment_matrix(spacing: float) -> np.ndarray:
    """H[m, n] = integral_0^spacing x^(m+n) dx = spacing^(m+n+1) / (m+n+1)."""
    h = np.empty((4, 4))
    for m in range(4):
        for n in range(4):
            h[m, n] = spacing ** (m + n + 1) / (m + n + 1)
    return h


def build_psi(spacing: float, order_a: int, order_b: int) -> np.ndarray:
    """4x4 matrix of exact integrals of basis-derivative products over one axis.

    Psi[a, b] = integral_0^spacing q_a^(order_a)(x) q_b^(order_b)(x) dx, with q
    the rows of the Q operator. The integrand is a polynomial, so the entries
    are monomial moments contracted with the Q coefficients.
    """
    qa = core.build_q(spacing, order_a).entries
    qb = core.build_q(spacing, order_b).entries
    return qa @ _moment_matrix(spacing) @ qb.T


def build_v(tile_spacing, pair: DerivPair) -> np.ndarray:
    """64x64 integrated tile operator for one derivative pair.

    Kronecker order matches the 64-vector flattening of `tile_coefficients`
    (axis 3 fastest), so p_i' V p_j integrates the corresponding derivative
    product over the tile.
    """
    r = core._triple(tile_spacing, "tile_spacing")
    psis = [build_psi(r[d], pair.delta_i[d], pair.delta_j[d]) for d in range(3)]
    return np.kron(np.kron(psis[0], psis[1]), psis[2])


class VMatrixBank:
    """Immutable map from derivative pairs to their integrated tile operators."""

    __slots__ = ("tile_spacing", "_entries")

    def __init__(self, tile_spacing, entries: dict):
        self.tile_spacing = core._triple(tile_spacing, "tile_spacing")
        self._entries = dict(entries)
        for v in self._entries.values():
            v.setflags(write=False)

    def get(self, pair: DerivPair) -> np.ndarray:
        return self._entries[pair]

    def __contains__(self, pair: DerivPair) -> bool:
        return pair in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def pairs(self) -> tuple:
        return tuple(self._entries.keys())

    def payload_bytes(self) -> int:
        """Total bytes held by the matrices themselves."""
        return sum(v.nbytes for v in self._entries.values())


def build_vbank(tile_spacing) -> VMatrixBank:
    """Build the canonical 23-operator bank for one tile spacing.

    Construction is deterministic: rebuilding with the same spacing yields
    bitwise identical matrices.
    """
    spacing = core._triple(tile_spacing, "tile_spacing")
    return VMatrixBank(spacing, {p: build_v(spacing, p) for p in canonical_pairs()})


def tile_term(p_i, v: np.ndarray, p_j) -> float:
    """One quadratic form p_i' V p_j: the tile integral of a derivative product."""
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    if p_i.shape != (64,) or p_j.shape != (64,) or v.shape != (64, 64):
        raise ValueError("tile_term expects 64-vectors and a 64x64 operator")
    return float(p_i @ v @ p_j)


@dataclass(frozen=True)
class RegularizerWeights:
    """Non-negative weights mu1..mu5 for the five penalties."""

    diffusion: float = 0.0
    curvature: float = 0.0
    linear_elastic: float = 0.0
    third_order: float = 0.0
    total_displacement: float = 0.0

    def __post_init__(self):
        for name in REGULARIZER_NAMES:
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in REGULARIZER_NAMES])

    @classmethod
    def from_array(cls, values) -> "RegularizerWeights":
        vals = list(np.asarray(values, dtype=float))
        if len(vals) != 5:
            raise ValueError(f"expected 5 weights, got {len(vals)}")
        return cls(*vals)


@dataclass
class PenaltyResult:
    """Weighted penalty value, its coefficient gradient, and the S1..S5 breakdown."""

    value: float
    terms: np.ndarray  # (5,) unweighted S1..S5
    gradient: np.ndarray | None  # (3, P1, P2, P3) gradient of the weighted value

    def breakdown(self) -> dict:
        return dict(zip(REGULARIZER_NAMES, (float(t) for t in self.terms)))


@dataclass(frozen=True)
class _Term:
    """One distinct quadratic form and its multiplicity in each penalty."""

    pair: DerivPair
    comp_i: int
    comp_j: int
    mults: tuple  # length 5, contribution multiplicity to S1..S5
    symmetric: bool  # same pair halves and same component on both sides


@lru_cache(maxsize=1)
def _term_table() -> tuple:
    acc: dict = {}

    def add(which: int, delta_a, delta_b, comp_a: int, comp_b: int, mult: float):
        pair, swapped = DerivPair.canonical(delta_a, delta_b)
        ci, cj = (comp_b, comp_a) if swapped else (comp_a, comp_b)
        key = (pair, ci, cj)
        mults = acc.setdefault(key, [0.0] * 5)
        mults[which] += mult

    for c in range(3):
        add(4, (0, 0, 0), (0, 0, 0), c, c, 1.0)
        for d in FIRST_DERIVS:
            add(0, d, d, c, c, 1.0)  # diffusion
            add(2, d, d, c, c, 1.0)  # elastic reuses the same squares
        for d, m in SECOND_DERIVS:
            add(1, d, d, c, c, float(m))
        for d, m in THIRD_DERIVS:
            add(3, d, d, c, c, float(m))
    for da, db, ca, cb in ELASTIC_CROSS:
        add(2, da, db, ca, cb, 1.0)

    order = {p: i for i, p in enumerate(canonical_pairs())}
    terms = [
        _Term(
            pair=pair,
            comp_i=ci,
            comp_j=cj,
            mults=tuple(m),
            symmetric=(ci == cj and pair.delta_i == pair.delta_j),
        )
        for (pair, ci, cj), m in acc.items()
    ]
    terms.sort(key=lambda t: (order[t.pair], t.comp_i, t.comp_j))
    return tuple(terms)


def _evaluate_tiles(
    flat_coeffs: list,
    gmap: np.ndarray,
    bank: VMatrixBank,
    weights_arr: np.ndarray,
    with_gradient: bool,
    active_only: bool,
) -> tuple:
    """Penalty contributions of one contiguous block of tiles.

    Returns (terms5, grad_flat or None) where grad_flat is (3, lattice_size).
    Gradient contributions are accumulated densely per tile block and scattered
    with a single bincount per component, keeping the hot path inside numpy.
    """
    gathered = [flat[gmap] for flat in flat_coeffs]  # three (T, 64)
    lattice_size = flat_coeffs[0].shape[0]
    terms5 = np.zeros(5)
    grad_acc = [None, None, None] if with_gradient else None

    for term in _term_table():
        weight = float(weights_arr @ np.asarray(term.mults))
        if active_only and weight == 0.0:
            continue
        v = bank.get(term.pair)
        gi, gj = gathered[term.comp_i], gathered[term.comp_j]
        m = gi @ v
        s = float(np.sum(m * gj))
        terms5 += np.asarray(term.mults) * s
        if with_gradient and weight != 0.0:
            if grad_acc[term.comp_j] is None:
                grad_acc[term.comp_j] = np.zeros_like(m)
            if term.symmetric:
                grad_acc[term.comp_j] += (2.0 * weight) * m
            else:
                grad_acc[term.comp_j] += weight * m
                if grad_acc[term.comp_i] is None:
                    grad_acc[term.comp_i] = np.zeros_like(m)
                grad_acc[term.comp_i] += weight * (gj @ v.T)

    grad = None
    if with_gradient:
        grad = np.zeros((3, lattice_size))
        flat_idx = gmap.ravel()
        for c in range(3):
            if grad_acc[c] is not None:
                grad[c] = np.bincount(flat_idx, weights=grad_acc[c].ravel(), minlength=lattice_size)
    return terms5, grad


def _check_bank(grid: core.ControlPointGrid, bank: VMatrixBank):
    if bank.tile_spacing != grid.geometry.tile_spacing:
        raise ValueError(
            f"V bank spacing {bank.tile_spacing} does not match grid spacing "
            f"{grid.geometry.tile_spacing}; rebuild the bank for this grid"
        )


def _assemble(
    grid: core.ControlPointGrid,
    weights: RegularizerWeights,
    bank: VMatrixBank,
    chunks: list,
    with_gradient: bool,
    thread_count: int,
) -> PenaltyResult:
    gmap = core.support_index_map(grid.geometry)
    flat = [np.ascontiguousarray(grid.coefficients[c].ravel()) for c in range(3)]
    warr = weights.as_array()

    with single_threaded_blas():
        if thread_count <= 1:
            parts = [
                _evaluate_tiles(flat, gmap[lo:hi], bank, warr, with_gradient, False)
                for lo, hi in chunks
            ]
        else:
            with ThreadPoolExecutor(max_workers=thread_count) as pool:
                futures = [
                    pool.submit(_evaluate_tiles, flat, gmap[lo:hi], bank, warr, with_gradient, False)
                    for lo, hi in chunks
                ]
                parts = [f.result() for f in futures]

    terms5 = np.zeros(5)
    for t5, _ in parts:
        terms5 += t5
    value = float(warr @ terms5)
    gradient = None
    if with_gradient:
        gradient = np.zeros((3,) + grid.geometry.lattice_shape)
        gflat = gradient.reshape(3, -1)
        for _, g in parts:
            gflat += g
    return PenaltyResult(value=value, terms=terms5, gradient=gradient)


def penalty(
    grid: core.ControlPointGrid,
    weights: RegularizerWeights,
    bank: VMatrixBank,
    with_gradient: bool = True,
) -> PenaltyResult:
    """Weighted smoothness penalty and its gradient over the whole grid.

    All five S values are always computed (the bank already holds every
    operator); the gradient covers only terms with nonzero weight.
    """
    _check_bank(grid, bank)
    total = grid.geometry.tile_total
    return _assemble(grid, weights, bank, [(0, total)], with_gradient, thread_count=1)


def penalty_parallel(
    grid: core.ControlPointGrid,
    weights: RegularizerWeights,
    bank: VMatrixBank,
    thread_count: int,
    with_gradient: bool = True,
) -> PenaltyResult:
    """Same contract as `penalty`, with tiles partitioned across worker threads.

    Partial results merge in fixed chunk order, so the output is deterministic
    for a given thread count, and thread_count=1 is bitwise identical to
    `penalty`.
    """
    if thread_count < 1:
        raise ValueError(f"thread_count must be >= 1, got {thread_count}")
    _check_bank(grid, bank)
    total = grid.geometry.tile_total
    nchunks = min(thread_count, total)
    bounds = np.linspace(0, total, nchunks + 1).astype(int)
    chunks = [(int(bounds[i]), int(bounds[i + 1])) for i in range(nchunks)]
    return _assemble(grid, weights, bank, chunks, with_gradient, thread_count=thread_count)


def weighted_value_and_gradient(
    grid: core.ControlPointGrid,
    weights: RegularizerWeights,
    bank: VMatrixBank,
) -> tuple:
    """Fast path for optimizers: weighted value and gradient from active terms only."""
    _check_bank(grid, bank)
    gmap = core.support_index_map(grid.geometry)
    flat = [np.ascontiguousarray(grid.coefficients[c].ravel()) for c in range(3)]
    warr = weights.as_array()
    with single_threaded_blas():
        terms5, grad = _evaluate_tiles(flat, gmap, bank, warr, True, True)
    gradient = (np.zeros((3, flat[0].size)) if grad is None else grad).reshape(
        (3,) + grid.geometry.lattice_shape
    )
    return float(warr @ terms5), gradient


# ---------------------------------------------------------------------------
# Bank export (VBANK1): text header, then raw little-endian float64 matrices
# row-major in header order.
# ---------------------------------------------------------------------------

def _delta_code(delta) -> str:
    return "".join(str(v) for v in delta)


def _parse_delta(code: str) -> tuple:
    if len(code) != 3 or not code.isdigit():
        raise ValueError(f"malformed derivative code {code!r}")
    return tuple(int(ch) for ch in code)


def write_vbank(bank: VMatrixBank, path):
    header = io.StringIO()
    header.write("VBANK1\n")
    header.write("spacing %s %s %s\n" % tuple(repr(float(r)) for r in bank.tile_spacing))
    header.write(f"pairs {len(bank)}\n")
    for pair in bank.pairs:
        header.write(f"pair {_delta_code(pair.delta_i)} {_delta_code(pair.delta_j)}\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        for pair in bank.pairs:
            fh.write(np.ascontiguousarray(bank.get(pair), dtype="<f8").tobytes())


def read_vbank(path) -> VMatrixBank:
    from .volume_io import FormatError, _read_header_line  # shared header plumbing

    with open(path, "rb") as fh:
        magic = _read_header_line(fh)
        if magic != "VBANK1":
            raise FormatError(f"not a VBANK1 file (magic {magic!r})")
        spacing_line = _read_header_line(fh).split()
        if len(spacing_line) != 4 or spacing_line[0] != "spacing":
            raise FormatError("malformed VBANK1 spacing line")
        spacing = tuple(float(v) for v in spacing_line[1:])
        count_line = _read_header_line(fh).split()
        if len(count_line) != 2 or count_line[0] != "pairs":
            raise FormatError("malformed VBANK1 pairs line")
        count = int(count_line[1])
        pairs = []
        for _ in range(count):
            fields = _read_header_line(fh).split()
            if len(fields) != 3 or fields[0] != "pair":
                raise FormatError("malformed VBANK1 pair line")
            pairs.append(DerivPair(_parse_delta(fields[1]), _parse_delta(fields[2])))
        payload = fh.read()
    expected = count * 64 * 64 * 8
    if len(payload) != expected:
        raise FormatError(f"VBANK1 payload truncated: expected {expected} bytes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype="<f8").reshape(count, 64, 64)
    return VMatrixBank(spacing, {p: raw[i].astype(np.float64) for i, p in enumerate(pairs)})
