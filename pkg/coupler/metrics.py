"""
Alignment and information metrics.

Everything here is a pure function of its inputs (plus an explicit random
generator where sampling is involved). Distances are Euclidean and ties are
broken towards the smallest index or label id.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist
from scipy.special import entr

from .data import TabularDataset
from .diffusion import SampleConfig, evaluation_loss, estimate_nll, sample
from .errors import DataError, NumericalError, ShapeError, UsageError


logger = logging.getLogger(__name__)

# Embeddings with optional labels are plain datasets.
LabeledEmbedding = TabularDataset

CHUNK_ROWS = 1024
ENTROPY_CAVEAT = "absolute entropies share an unknown additive constant; differences are calibrated"


@dataclass
class MetricResult:
    """One metric row as written by the CLI."""
    name: str
    value: float
    stderr: float = 0.0
    n: int = 0

    def to_row(self) -> dict:
        return asdict(self)


# =============================================================================
# NEAREST NEIGHBOURS
# =============================================================================

def _blocks(query: np.ndarray, reference: np.ndarray) -> Iterator[tuple[int, np.ndarray]]:
    """Distance matrix rows in chunks: (first row index, block)."""
    for start in range(0, query.shape[0], CHUNK_ROWS):
        yield start, cdist(query[start:start + CHUNK_ROWS], reference)


def nearest_indices(query: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """(n_query, k) indices of the k nearest reference rows, nearest first, ties to the lower index."""
    if reference.shape[0] == 0:
        raise DataError("nearest-neighbour search needs a non-empty reference set")
    if query.shape[1] != reference.shape[1]:
        raise ShapeError(f"query has {query.shape[1]} columns, reference has {reference.shape[1]}")
    out = np.empty((query.shape[0], k), dtype=np.int64)
    for start, block in _blocks(query, reference):
        out[start:start + block.shape[0]] = np.argsort(block, axis=1, kind="stable")[:, :k]
    return out


def nn_project(generated: np.ndarray, dataset: np.ndarray) -> np.ndarray:
    """Replace every generated row by its nearest dataset row (ties to the lower index)."""
    generated = np.asarray(generated, dtype=np.float64)
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.shape[0] == 0:
        raise DataError("cannot project onto an empty dataset")
    if generated.shape[1] != dataset.shape[1]:
        raise ShapeError(f"generated has {generated.shape[1]} columns, dataset has {dataset.shape[1]}")
    index = np.empty(generated.shape[0], dtype=np.int64)
    for start, block in _blocks(generated, dataset):
        index[start:start + block.shape[0]] = np.argmin(block, axis=1)
    return dataset[index]


def majority_vote(votes: np.ndarray) -> np.ndarray:
    """Row-wise most frequent value; ties go to the smallest value."""
    values, codes = np.unique(votes, return_inverse=True)
    codes = codes.reshape(votes.shape)
    counts = np.zeros((votes.shape[0], values.size), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(votes.shape[0]), votes.shape[1]), codes.reshape(-1)), 1)
    return values[np.argmax(counts, axis=1)]


# =============================================================================
# ALIGNMENT METRICS
# =============================================================================

@dataclass
class PairedEval:
    """Two point sets with the true match of every source row."""
    source: np.ndarray
    target: np.ndarray
    correspondence: np.ndarray

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.correspondence = np.asarray(self.correspondence, dtype=np.int64)
        n = self.source.shape[0]
        if self.target.shape[0] != n or self.correspondence.shape != (n,):
            raise ShapeError("source, target and correspondence must have the same length")
        if self.source.shape[1] != self.target.shape[1]:
            raise ShapeError("source and target must have the same number of columns")
        if not np.array_equal(np.sort(self.correspondence), np.arange(n)):
            raise UsageError("correspondence must be a permutation of 0..n-1")

    @property
    def n(self) -> int:
        return self.source.shape[0]

    def inverse(self) -> PairedEval:
        inverse = np.empty_like(self.correspondence)
        inverse[self.correspondence] = np.arange(self.n)
        return PairedEval(self.target, self.source, inverse)


def _closer_fractions(query: np.ndarray, reference: np.ndarray, match: np.ndarray) -> np.ndarray:
    """For each query row, fraction of reference rows strictly closer than its match."""
    n = query.shape[0]
    out = np.empty(n)
    for start, block in _blocks(query, reference):
        rows = np.arange(block.shape[0])
        true = block[rows, match[start:start + block.shape[0]]]
        out[start:start + block.shape[0]] = np.sum(block < true[:, None], axis=1) / (reference.shape[0] - 1)
    return out


def foscttm(evaluation: PairedEval) -> MetricResult:
    """
    Fraction of samples closer than the true match, symmetrized.

    0 is a perfect alignment, 0.5 is chance.

    Raises:
        DataError: With fewer than two points.
    """
    n = evaluation.n
    if n < 2:
        raise DataError(f"FOSCTTM needs at least two points, got {n}")
    forward = _closer_fractions(evaluation.source, evaluation.target, evaluation.correspondence)
    reverse_eval = evaluation.inverse()
    backward = _closer_fractions(reverse_eval.source, reverse_eval.target, reverse_eval.correspondence)
    per_pair = 0.5 * (forward + backward[evaluation.correspondence])
    value = 0.5 * (float(np.mean(forward)) + float(np.mean(backward)))
    return MetricResult("foscttm", value, float(np.std(per_pair, ddof=1) / np.sqrt(n)), n)


def _require_labels(dataset: TabularDataset, role: str) -> np.ndarray:
    if dataset.labels is None:
        raise DataError(f"{role} dataset has no labels")
    return dataset.labels


def label_transfer_accuracy(source: LabeledEmbedding, target: LabeledEmbedding, k: int = 5) -> MetricResult:
    """
    Accuracy of a k-NN classifier fitted on source labels and applied to target points.

    Raises:
        UsageError: If k is not smaller than the number of source points.
    """
    source_labels = _require_labels(source, "source")
    target_labels = _require_labels(target, "target")
    if not 1 <= k < source.n:
        raise UsageError(f"k must lie in 1..{source.n - 1}, got {k}")
    predicted = majority_vote(source_labels[nearest_indices(target.points, source.points, k)])
    hits = predicted == target_labels
    return MetricResult("label_transfer", float(np.mean(hits)), _binomial_stderr(hits), target.n)


def neighborhood_type_accuracy(
    generated: np.ndarray,
    reference: LabeledEmbedding,
    true_labels: np.ndarray,
    k: int = 5,
    use_sublabels: bool = False,
) -> MetricResult:
    """
    Fraction of generated points whose k nearest reference points vote for the point's true label.
    """
    labels = reference.sublabels if use_sublabels else reference.labels
    if labels is None:
        raise DataError(f"reference dataset has no {'sublabels' if use_sublabels else 'labels'}")
    generated = np.asarray(generated, dtype=np.float64)
    true_labels = np.asarray(true_labels)
    if true_labels.shape != (generated.shape[0],):
        raise ShapeError("one true label per generated point is required")
    if not 1 <= k < reference.n:
        raise UsageError(f"k must lie in 1..{reference.n - 1}, got {k}")
    predicted = majority_vote(labels[nearest_indices(generated, reference.points, k)])
    hits = predicted == true_labels
    name = "subtype_accuracy" if use_sublabels else "type_accuracy"
    return MetricResult(name, float(np.mean(hits)), _binomial_stderr(hits), generated.shape[0])


def mapping_purity(source_labels: np.ndarray, mapped_labels: np.ndarray) -> MetricResult:
    """
    Fraction of points whose mapped cluster is the one assigned to their source cluster.

    Source clusters are matched one-to-one to mapped clusters by maximizing the
    number of agreeing points, so a translation that collapses every cluster
    onto one target cluster only scores that cluster's share. Source clusters
    left without a partner count as misses.
    """
    source_labels = np.asarray(source_labels)
    mapped_labels = np.asarray(mapped_labels)
    if source_labels.shape != mapped_labels.shape or source_labels.ndim != 1:
        raise ShapeError("label arrays must be one-dimensional and of equal length")
    if source_labels.size == 0:
        raise DataError("mapping purity of an empty set is undefined")
    sources, source_idx = np.unique(source_labels, return_inverse=True)
    targets, target_idx = np.unique(mapped_labels, return_inverse=True)
    confusion = np.zeros((sources.size, targets.size), dtype=np.int64)
    np.add.at(confusion, (source_idx, target_idx), 1)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    assigned = np.full(sources.size, -1)
    assigned[rows] = cols
    hits = assigned[source_idx] == target_idx
    return MetricResult("mapping_purity", float(np.mean(hits)), _binomial_stderr(hits), source_labels.size)


def _binomial_stderr(hits: np.ndarray) -> float:
    p = float(np.mean(hits))
    return float(np.sqrt(p * (1.0 - p) / hits.size)) if hits.size else 0.0


# =============================================================================
# ENTROPY ESTIMATES FROM THE MODELS
# =============================================================================

@dataclass
class EntropyEstimate:
    """Model-based entropies in nats; absolute values carry ENTROPY_CAVEAT."""
    conditional: float
    conditional_stderr: float
    cond_marginal: float
    target_marginal: float
    joint: float
    mutual_information: float
    mi_stderr: float
    n: int
    caveat: str = ENTROPY_CAVEAT


def estimate_coupling_entropy(
    pair,
    cond_data: np.ndarray,
    k_mc: int,
    rng: np.random.Generator,
    sample_config: SampleConfig | None = None,
    direction: str = "theta",
) -> EntropyEstimate:
    """
    Conditional, joint and mutual-information estimates for generated pairs.

    In the theta direction, x is sampled from theta given each y in
    cond_data. H(X|Y) is the mean likelihood estimate under theta, H(Y) and
    H(X) come from the unconditional anchors, and MI = H(X) - H(X|Y). The
    conditional and marginal estimates of X share their noise draws, so a
    model that ignores its condition yields MI = 0 exactly.
    """
    if direction not in ("theta", "phi"):
        raise UsageError(f"direction must be 'theta' or 'phi', got {direction!r}")
    if direction == "theta":
        model, target_anchor, cond_anchor = pair.theta, pair.theta_anchor, pair.phi_anchor
    else:
        model, target_anchor, cond_anchor = pair.phi, pair.phi_anchor, pair.theta_anchor
    cond_data = np.asarray(cond_data, dtype=np.float64)
    n = cond_data.shape[0]
    if n < 2:
        raise DataError("entropy estimates need at least two conditioning points")

    config = sample_config or SampleConfig()
    generated = sample(model, cond_data, config, rng).samples

    shared = int(rng.integers(0, 2**63 - 1))
    conditional = estimate_nll(model, generated, cond_data, k_mc, np.random.default_rng(shared))
    marginal = estimate_nll(target_anchor, generated, None, k_mc, np.random.default_rng(shared))
    cond_marginal = estimate_nll(cond_anchor, cond_data, None, k_mc, rng)
    if not (np.all(np.isfinite(conditional)) and np.all(np.isfinite(marginal))):
        raise NumericalError("non-finite likelihood estimate")

    h_cond = float(np.mean(conditional))
    h_y = float(np.mean(cond_marginal))
    h_x = float(np.mean(marginal))
    difference = marginal - conditional
    return EntropyEstimate(
        conditional=h_cond,
        conditional_stderr=float(np.std(conditional, ddof=1) / np.sqrt(n)),
        cond_marginal=h_y,
        target_marginal=h_x,
        joint=h_cond + h_y,
        mutual_information=float(np.mean(difference)),
        mi_stderr=float(np.std(difference, ddof=1) / np.sqrt(n)),
        n=n,
    )


def marginal_drift(model, anchor, data: np.ndarray, seed: int = 0, repeats: int = 4) -> float:
    """
    Ratio of the conditional model's unconditional (null-condition) denoising
    loss to its anchor's, on the same data and noise draws.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] == 0:
        raise DataError("marginal drift needs data")
    base = evaluation_loss(anchor, data, seed=seed, repeats=repeats)
    if base <= 0:
        raise NumericalError("anchor loss is zero; drift ratio undefined")
    return evaluation_loss(model, data, seed=seed, repeats=repeats) / base


# =============================================================================
# DISCRETE MINIMUM-ENTROPY COUPLING
# =============================================================================

@dataclass
class DiscreteMarginals:
    p_x: np.ndarray
    p_y: np.ndarray

    def __post_init__(self):
        self.p_x = np.asarray(self.p_x, dtype=np.float64)
        self.p_y = np.asarray(self.p_y, dtype=np.float64)
        for name, p in (("p_x", self.p_x), ("p_y", self.p_y)):
            if p.ndim != 1 or p.size == 0:
                raise UsageError(f"{name} must be a non-empty vector")
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise UsageError(f"{name} must be non-negative and sum to 1")


@dataclass
class MecSolution:
    coupling: np.ndarray
    entropy: float
    method: str


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats of any array of probabilities (zeros contribute 0)."""
    return float(np.sum(entr(np.clip(np.asarray(p, dtype=np.float64), 0.0, None))))


def greedy_coupling(p_x: np.ndarray, p_y: np.ndarray) -> np.ndarray:
    """
    Greedy low-entropy coupling: repeatedly pair the largest remaining masses.
    """
    a = np.array(p_x, dtype=np.float64)
    b = np.array(p_y, dtype=np.float64)
    coupling = np.zeros((a.size, b.size))
    while True:
        i, j = int(np.argmax(a)), int(np.argmax(b))
        mass = min(a[i], b[j])
        if mass <= 1e-15:
            break
        a[i] -= mass
        b[j] -= mass
        coupling[i, j] += mass
    return coupling


def northwest_corner(p_x: np.ndarray, p_y: np.ndarray) -> np.ndarray:
    a = np.array(p_x, dtype=np.float64)
    b = np.array(p_y, dtype=np.float64)
    coupling = np.zeros((a.size, b.size))
    i = j = 0
    while i < a.size and j < b.size:
        mass = min(a[i], b[j])
        coupling[i, j] = mass
        a[i] -= mass
        b[j] -= mass
        if a[i] <= 1e-15:
            i += 1
        else:
            j += 1
    return coupling


def diagonal_greedy(p_x: np.ndarray, p_y: np.ndarray) -> np.ndarray:
    """Northwest corner after sorting both marginals in decreasing order."""
    order_x = np.argsort(-np.asarray(p_x), kind="stable")
    order_y = np.argsort(-np.asarray(p_y), kind="stable")
    sorted_coupling = northwest_corner(np.asarray(p_x)[order_x], np.asarray(p_y)[order_y])
    coupling = np.zeros_like(sorted_coupling)
    coupling[np.ix_(order_x, order_y)] = sorted_coupling
    return coupling


def _random_vertex(p_x: np.ndarray, p_y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vertex reached by saturating randomly chosen cells."""
    a = np.array(p_x, dtype=np.float64)
    b = np.array(p_y, dtype=np.float64)
    coupling = np.zeros((a.size, b.size))
    for i, j in rng.permutation([(i, j) for i in range(a.size) for j in range(b.size)]):
        mass = min(a[i], b[j])
        coupling[i, j] += mass
        a[i] -= mass
        b[j] -= mass
    return coupling


def _linearized_descent(start: np.ndarray, p_x: np.ndarray, p_y: np.ndarray, max_iter: int = 50) -> np.ndarray:
    """
    Successive linearization: minimize the tangent of the entropy over the
    transport polytope until the entropy stops decreasing. Entropy is
    concave, so every step lands on a vertex no worse than the current point.
    """
    m, n = start.shape
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    b_eq = np.concatenate([p_x, p_y])

    current, value = start, entropy(start)
    for _ in range(max_iter):
        gradient = -(np.log(np.maximum(current, 1e-300)) + 1.0)
        result = linprog(gradient.reshape(-1), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds")
        if not result.success:
            break
        candidate = np.clip(result.x.reshape(m, n), 0.0, None)
        candidate_value = entropy(candidate)
        if candidate_value >= value - 1e-12:
            break
        current, value = candidate, candidate_value
    return current


def _vertex_search(p_x: np.ndarray, p_y: np.ndarray, tol: float) -> np.ndarray:
    """
    Exact minimum over all vertices of the transport polytope.

    Every vertex is reached by repeatedly saturating one cell with the
    smaller of its row and column residuals and dropping the exhausted line.
    The best achievable entropy depends only on the residual multisets, so
    it is memoized on their sorted, rounded values.
    """
    digits = max(int(-np.log10(tol)), 1)

    def key(masses: list[float]) -> tuple[float, ...]:
        return tuple(sorted(round(v, digits) for v in masses if v > tol))

    @lru_cache(maxsize=None)
    def best(rows: tuple[float, ...], cols: tuple[float, ...]) -> float:
        if not rows or not cols:
            return 0.0
        value = np.inf
        for i in range(len(rows)):
            if i and rows[i] == rows[i - 1]:
                continue
            for j in range(len(cols)):
                if j and cols[j] == cols[j - 1]:
                    continue
                mass = min(rows[i], cols[j])
                r = list(rows)
                c = list(cols)
                r[i] -= mass
                c[j] -= mass
                value = min(value, float(entr(mass)) + best(key(r), key(c)))
        return value

    # Walk the memo again with real indices to recover a minimizing coupling.
    a = {i: v for i, v in enumerate(p_x) if v > tol}
    b = {j: v for j, v in enumerate(p_y) if v > tol}
    coupling = np.zeros((len(p_x), len(p_y)))
    while a and b:
        choice = None
        for i in a:
            for j in b:
                mass = min(a[i], b[j])
                rest_a = [v - mass if k == i else v for k, v in a.items()]
                rest_b = [v - mass if k == j else v for k, v in b.items()]
                cost = float(entr(mass)) + best(key(rest_a), key(rest_b))
                if choice is None or cost < choice[0] - 1e-15:
                    choice = (cost, i, j, mass)
        _, i, j, mass = choice
        coupling[i, j] += mass
        a[i] -= mass
        b[j] -= mass
        a = {k: v for k, v in a.items() if v > tol}
        b = {k: v for k, v in b.items() if v > tol}
    return coupling


def discrete_mec_oracle(
    marginals: DiscreteMarginals,
    tol: float = 1e-12,
    n_starts: int = 64,
    seed: int = 0,
) -> MecSolution:
    """
    Minimum-entropy coupling of two small discrete marginals.

    Combines exact vertex search with multi-start successive linearization
    from the greedy, northwest-corner, diagonal-greedy and random vertex
    starts, and returns the lowest-entropy coupling found.

    Raises:
        UsageError: If the problem has more than 25 cells.
        NumericalError: If the best coupling misses the marginals by more than tol.
    """
    p_x, p_y = marginals.p_x, marginals.p_y
    if p_x.size * p_y.size > 25:
        raise UsageError(f"oracle supports at most 25 cells, got {p_x.size} x {p_y.size}")
    rng = np.random.default_rng(seed)

    candidates = [("vertex-search", _vertex_search(p_x, p_y, tol))]
    starts = [
        ("greedy", greedy_coupling(p_x, p_y)),
        ("northwest", northwest_corner(p_x, p_y)),
        ("diagonal", diagonal_greedy(p_x, p_y)),
    ]
    starts += [("random", _random_vertex(p_x, p_y, rng)) for _ in range(n_starts)]
    for name, start in starts:
        candidates.append((name, _linearized_descent(start, p_x, p_y)))

    method, coupling = min(candidates, key=lambda c: entropy(c[1]))
    drift = max(np.max(np.abs(coupling.sum(axis=1) - p_x)), np.max(np.abs(coupling.sum(axis=0) - p_y)))
    if drift > max(tol, 1e-9):
        raise NumericalError(f"oracle coupling misses the marginals by {drift:.3g}")
    value = entropy(coupling)
    logger.debug("oracle entropy %.6f from %s over %d candidates", value, method, len(candidates))
    return MecSolution(coupling, value, method)


# =============================================================================
# QUANTIZED COUPLINGS
# =============================================================================

@dataclass
class OracleGap:
    learned: float
    oracle: float
    greedy: float

    @property
    def gap(self) -> float:
        return self.learned - self.oracle


def _quantile_bins(values: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(values, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    return np.searchsorted(edges, values, side="right")


def quantize_pairs(x: np.ndarray, y: np.ndarray, bins: int, axis: int = 0) -> np.ndarray:
    """
    Empirical joint distribution of paired samples on a bins x bins grid.

    Each side is binned by the quantiles of one coordinate, column `axis`;
    the other coordinates are ignored, so multi-dimensional data is compared
    through that single projection only.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ShapeError("quantization needs the same non-zero number of x and y rows")
    if bins < 1:
        raise UsageError(f"bins must be >= 1, got {bins}")
    if not 0 <= axis < min(x.shape[1], y.shape[1]):
        raise UsageError(f"axis {axis} is out of range for {x.shape[1]} and {y.shape[1]} columns")
    joint = np.zeros((bins, bins))
    np.add.at(joint, (_quantile_bins(x[:, axis], bins), _quantile_bins(y[:, axis], bins)), 1.0)
    return joint / x.shape[0]


def oracle_gap(x: np.ndarray, y: np.ndarray, bins: int = 5, axis: int = 0) -> OracleGap:
    """Plug-in joint entropy of the quantized pairs against the oracle over the same marginals."""
    joint = quantize_pairs(x, y, bins, axis)
    p_x, p_y = joint.sum(axis=1), joint.sum(axis=0)
    # Renormalize against summation drift before validating.
    marginals = DiscreteMarginals(p_x / p_x.sum(), p_y / p_y.sum())
    solution = discrete_mec_oracle(marginals, tol=1e-9)
    return OracleGap(
        learned=entropy(joint),
        oracle=solution.entropy,
        greedy=entropy(greedy_coupling(marginals.p_x, marginals.p_y)),
    )
