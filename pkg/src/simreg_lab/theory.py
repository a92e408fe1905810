"""Executable checks of the margin, kernel and dynamics results.

Everything here works on plain arrays.  Linear heads ``z = W e`` (``W`` of
shape ``[C, d]``) are used wherever a smoothness constant is needed, since
the spectral norm of ``W`` is then an exact Lipschitz constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import gammaln

SQRT2 = math.sqrt(2.0)


def _logsumexp(x: np.ndarray) -> float:
    m = np.max(x)
    return float(m + np.log(np.sum(np.exp(x - m))))


# ---------------------------------------------------------------------------
# margins
# ---------------------------------------------------------------------------

def margin(z, y: int) -> float:
    """Correct-class logit minus the largest competing logit."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ValueError("margin needs at least two classes")
    others = np.delete(z, y)
    return float(z[y] - others.max())


def ce_margin_bound_check(z, y: int) -> tuple[float, float, bool]:
    """Cross-entropy ``l`` against ``(C - 1) * exp(-m)``."""
    z = np.asarray(z, dtype=np.float64)
    loss = max(_logsumexp(z) - float(z[y]), 0.0)
    bound = (z.size - 1) * math.exp(-margin(z, y))
    return loss, bound, loss <= bound + 1e-12


def logit_gaps(W: np.ndarray, e: np.ndarray, y: int) -> np.ndarray:
    """``g_{y,c}(e) = z_y - z_c`` for every ``c != y`` under ``z = W e``."""
    z = W @ e
    return np.delete(z[y] - z, y)


def spectral_norm(W: np.ndarray) -> float:
    return float(np.linalg.norm(W, 2))


def smoothness_transfer_check(W, y: int, c: int, e_p, e_q) -> tuple[float, float, bool]:
    """``|g_{y,c}(e_p) - g_{y,c}(e_q)|`` against ``sqrt(2) * L * ||e_p - e_q||``."""
    W = np.asarray(W, dtype=np.float64)
    diff = W[y] - W[c]
    lhs = abs(float(diff @ (np.asarray(e_p) - np.asarray(e_q))))
    rhs = SQRT2 * spectral_norm(W) * float(np.linalg.norm(np.asarray(e_p) - np.asarray(e_q)))
    return lhs, rhs, lhs <= rhs + 1e-12


def weighted_centers(E, labels, k: int) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Similarity-weighted centers of ``k``'s positive and negative groups.

    Weights are ``alpha_ki ~ exp(e_k . e_i)``, normalized within each group
    (computed with a max shift).  The negative center is ``None`` when the
    group is empty.
    """
    E = np.asarray(E, dtype=np.float64)
    labels = np.asarray(labels)
    logits = E @ E[k]
    pos = labels == labels[k]
    alpha = np.zeros(len(labels))
    centers = []
    for group in (pos, ~pos):
        if not group.any():
            centers.append(None)
            continue
        w = np.exp(logits[group] - logits[group].max())
        w /= w.sum()
        alpha[group] = w
        centers.append(w @ E[group])
    return centers[0], centers[1], alpha


@dataclass
class MarginEntry:
    token: int
    margin: float
    alpha: np.ndarray
    center_pos: np.ndarray
    center_neg: np.ndarray | None
    group_margin_pos: float
    group_margin_neg: float | None
    dist_pos: float
    dist_neg: float | None
    lower: float
    upper: float | None
    smoothness: float

    @property
    def lower_slack(self) -> float:
        return self.margin - self.lower

    @property
    def upper_slack(self) -> float | None:
        return None if self.upper is None else self.upper - self.margin

    def holds(self, tol: float = 1e-9) -> bool:
        ok = self.lower_slack >= -tol
        if self.upper is not None:
            ok = ok and self.upper_slack >= -tol
        return ok


def group_margin_bounds(E, labels, W, k: int) -> MarginEntry:
    """Token margin sandwiched between the two center-based bounds.

    ``m+ - sqrt(2) L ||e_k - c+|| <= m_k <= m- + sqrt(2) L ||e_k - c-||``
    where ``m+-`` are the smallest logit gaps at the weighted centers and
    ``L`` is the spectral norm of the linear head ``W``.
    """
    E = np.asarray(E, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    labels = np.asarray(labels)
    y = int(labels[k])
    L = spectral_norm(W)
    cp, cn, alpha = weighted_centers(E, labels, k)
    m_k = float(logit_gaps(W, E[k], y).min())
    mp = float(logit_gaps(W, cp, y).min())
    dp = float(np.linalg.norm(E[k] - cp))
    if cn is None:
        mn = dn = upper = None
    else:
        mn = float(logit_gaps(W, cn, y).min())
        dn = float(np.linalg.norm(E[k] - cn))
        upper = mn + SQRT2 * L * dn
    return MarginEntry(k, m_k, alpha, cp, cn, mp, mn, dp, dn, mp - SQRT2 * L * dp, upper, L)


def margin_report(E, labels, W) -> list[MarginEntry]:
    return [group_margin_bounds(E, labels, W, k) for k in range(len(labels))]


# ---------------------------------------------------------------------------
# tangent-space dynamics on the unit sphere
# ---------------------------------------------------------------------------

@dataclass
class DynamicsEntry:
    token: int
    mode: str
    a_before: np.ndarray
    a_after: np.ndarray
    v_pos: np.ndarray
    v_neg: np.ndarray | None
    mass_pos: float
    mass_neg: float
    update: np.ndarray
    delta_pos: float
    delta_neg: float | None


def weighted_directions(A: np.ndarray, labels: np.ndarray, k: int):
    """``v+- = (1/|group|) sum exp(a_k . a_i) a_i`` and the exp-similarity masses."""
    sims = np.exp(A @ A[k])
    pos = labels == labels[k]
    v_pos = (sims[pos] @ A[pos]) / pos.sum()
    neg = ~pos
    v_neg = (sims[neg] @ A[neg]) / neg.sum() if neg.any() else None
    return v_pos, v_neg, float(sims[pos].sum()), float(sims[neg].sum())


def tangent_dynamics_step(A, labels, k: int, eta: float = 1e-3, mode: str = "positive") -> DynamicsEntry:
    """Move ``a_k`` one projected step and measure distances to the fixed directions.

    ``mode`` selects the update: ``"positive"`` uses only the pull term
    ``+(I - a a^T) v+``, ``"negative"`` only the push term ``-(I - a a^T) v-``,
    ``"full"`` both.  The step is scaled by ``N / (P + N)`` (group masses) and
    followed by re-normalization.
    """
    A = np.asarray(A, dtype=np.float64)
    labels = np.asarray(labels)
    if not eta > 0:
        raise ValueError("eta must be positive")
    if mode not in ("positive", "negative", "full"):
        raise ValueError(f"unknown mode {mode!r}")
    norms = np.linalg.norm(A, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-8):
        raise ValueError("rows of A must have unit norm")
    a = A[k]
    v_pos, v_neg, P, N = weighted_directions(A, labels, k)
    proj = np.eye(len(a)) - np.outer(a, a)
    scale = N / (P + N)
    direction = np.zeros_like(a)
    if mode in ("positive", "full"):
        direction += proj @ v_pos
    if mode in ("negative", "full") and v_neg is not None:
        direction -= proj @ v_neg
    step = eta * scale * direction
    moved = a + step
    a_new = moved / np.linalg.norm(moved)

    def dist(u, v):
        return float(np.sum((u - v) ** 2))

    d_pos = dist(a_new, v_pos) - dist(a, v_pos)
    d_neg = None if v_neg is None else dist(a_new, v_neg) - dist(a, v_neg)
    return DynamicsEntry(k, mode, a.copy(), a_new, v_pos, v_neg, P, N, step, d_pos, d_neg)


# ---------------------------------------------------------------------------
# cosine distribution of random directions
# ---------------------------------------------------------------------------

@dataclass
class CosineMoments:
    mean: float
    second_moment: float
    mean_se: float
    second_se: float
    minimum: float
    maximum: float

    def __iter__(self):
        # unpacks as (mean, second_moment)
        return iter((self.mean, self.second_moment))


def cosine_moments_mc(d: int, n_samples: int, seed: int, chunk: int = 8192) -> CosineMoments:
    """Monte-Carlo moments of the cosine between two independent N(0, I_d) vectors.

    Draws are float32 to halve the cost at large ``d``; the cosines are
    accumulated in float64.
    """
    if d < 2 or n_samples < 1:
        raise ValueError("need d >= 2 and n_samples >= 1")
    rng = np.random.default_rng(seed)
    s1 = s2 = s3 = s4 = 0.0
    lo, hi = 1.0, -1.0
    for start in range(0, n_samples, chunk):
        m = min(chunk, n_samples - start)
        x = rng.standard_normal((m, d), dtype=np.float32)
        y = rng.standard_normal((m, d), dtype=np.float32)
        num = np.einsum("ij,ij->i", x, y).astype(np.float64)
        den = np.sqrt(np.einsum("ij,ij->i", x, x).astype(np.float64) * np.einsum("ij,ij->i", y, y))
        z = np.clip(num / den, -1.0, 1.0)
        z2 = z * z
        s1 += z.sum()
        s2 += z2.sum()
        s4 += (z2 * z2).sum()
        lo, hi = min(lo, float(z.min())), max(hi, float(z.max()))
    n = n_samples
    mean, second = s1 / n, s2 / n
    var1 = max(second - mean * mean, 0.0)
    var2 = max(s4 / n - second * second, 0.0)
    return CosineMoments(mean, second, math.sqrt(var1 / n), math.sqrt(var2 / n), lo, hi)


def cosine_density(z, d: int):
    """Density of the cosine between independent isotropic directions in R^d."""
    if d < 2:
        raise ValueError("d must be >= 2")
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.abs(z) > 1):
        raise ValueError("|z| must be <= 1")
    log_c = gammaln(d / 2) - 0.5 * math.log(math.pi) - gammaln((d - 1) / 2)
    with np.errstate(divide="ignore"):
        out = np.exp(log_c) * np.power(1.0 - z * z, (d - 3) / 2)
    return float(out) if out.ndim == 0 else out


def cosine_density_integral(d: int) -> float:
    """Integral of :func:`cosine_density` over [-1, 1] via ``z = sin(t)``.

    The substitution removes the endpoint singularities present for ``d = 2``.
    """
    def integrand(t):
        return cosine_density(math.sin(t), d) * math.cos(t)

    val, _ = integrate.quad(integrand, -math.pi / 2, math.pi / 2, epsabs=1e-13, epsrel=1e-12, limit=200)
    return float(val)


def average_angle_from_similarity(mean_cosine: float) -> float:
    if abs(mean_cosine) > 1:
        raise ValueError("cosine must lie in [-1, 1]")
    return math.degrees(math.acos(mean_cosine))


# ---------------------------------------------------------------------------
# exponential kernel feature map
# ---------------------------------------------------------------------------

MAX_FEATURES = 5_000_000


def feature_dim(d: int, order: int) -> int:
    return sum(d ** m for m in range(order + 1))


def kernel_feature_map(u, order: int) -> np.ndarray:
    """Truncated map ``[1, u, vec(u^{x2})/sqrt(2!), ..., vec(u^{xM})/sqrt(M!)]``.

    Its inner products reproduce ``exp(u . v)`` up to the Maclaurin remainder.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    if order < 0:
        raise ValueError("order must be >= 0")
    if feature_dim(u.size, order) > MAX_FEATURES:
        raise ValueError(f"feature map of order {order} in d={u.size} is too large")
    blocks = [np.ones(1)]
    power = np.ones(1)
    for m in range(1, order + 1):
        power = np.multiply.outer(power, u).ravel()
        blocks.append(power / math.sqrt(math.factorial(m)))
    return np.concatenate(blocks)


def kernel_check(u, v, order: int) -> float:
    """``|<h_M(u), h_M(v)> - exp(u . v)|``."""
    hu, hv = kernel_feature_map(u, order), kernel_feature_map(v, order)
    # compensated sum keeps the error floor near one ulp at large orders
    inner = math.fsum((hu * hv).tolist())
    return abs(inner - math.exp(math.fsum((np.ravel(u) * np.ravel(v)).tolist())))


def kernel_tail_bound(order: int) -> float:
    """``e / (M + 1)!``, bounding the remainder for unit vectors."""
    return math.e / math.factorial(order + 1)


# ---------------------------------------------------------------------------
# seeded property runs
# ---------------------------------------------------------------------------

@dataclass
class SuiteResult:
    name: str
    cases: int
    violations: int
    worst: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _random_unit(rng, n, d):
    A = rng.standard_normal((n, d))
    return A / np.linalg.norm(A, axis=1, keepdims=True)


def run_centers(cases: int = 500, seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    rng = np.random.default_rng(seed)
    bad, worst, checked = 0, math.inf, 0
    for _ in range(cases):
        n, d, C = rng.integers(2, 11), rng.integers(1, 9), rng.integers(2, 9)
        E = rng.standard_normal((n, d)) * rng.uniform(0.1, 2.0)
        W = rng.standard_normal((C, d))
        labels = rng.integers(0, C, size=n)
        k = int(rng.integers(0, n))
        entry = group_margin_bounds(E, labels, W, k)
        slacks = [entry.lower_slack] + ([entry.upper_slack] if entry.upper is not None else [])
        worst = min(worst, *slacks)
        checked += len(slacks)
        bad += int(not entry.holds(tol))
    return SuiteResult("centers", cases, bad, worst, {"inequalities_checked": checked})


def run_smoothness(cases: int = 500, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    bad, worst = 0, math.inf
    for _ in range(cases):
        d, C = rng.integers(1, 9), rng.integers(2, 9)
        W = rng.standard_normal((C, d))
        y, c = rng.choice(C, size=2, replace=False)
        lhs, rhs, ok = smoothness_transfer_check(W, y, c, rng.standard_normal(d), rng.standard_normal(d))
        worst = min(worst, rhs - lhs)
        bad += int(not ok)
    return SuiteResult("smoothness", cases, bad, worst)


def run_margin_bound(cases: int = 1000, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    bad, worst = 0, math.inf
    for _ in range(cases):
        C = int(rng.integers(2, 50))
        z = rng.normal(0.0, rng.uniform(0.1, 10.0), size=C)
        y = int(rng.integers(0, C))
        loss, bound, ok = ce_margin_bound_check(z, y)
        worst = min(worst, bound - loss)
        bad += int(not ok)
    return SuiteResult("margin", cases, bad, worst)


def run_dynamics(cases: int = 200, seed: int = 0, eta: float = 1e-3, tol: float = 1e-12) -> SuiteResult:
    """Pull-only steps must not increase ``||a - v+||^2``; push-only must not decrease ``||a - v-||^2``."""
    rng = np.random.default_rng(seed)
    bad, worst_pos, worst_neg = 0, -math.inf, math.inf
    for _ in range(cases):
        n, d = int(rng.integers(3, 12)), int(rng.integers(2, 9))
        A = _random_unit(rng, n, d)
        labels = rng.integers(0, 3, size=n)
        k = int(rng.integers(0, n))
        if (labels != labels[k]).sum() == 0:
            labels[(k + 1) % n] = labels[k] + 1
        pos = tangent_dynamics_step(A, labels, k, eta, "positive")
        neg = tangent_dynamics_step(A, labels, k, eta, "negative")
        worst_pos = max(worst_pos, pos.delta_pos)
        worst_neg = min(worst_neg, neg.delta_neg)
        bad += int(pos.delta_pos > tol) + int(neg.delta_neg < -tol)
    return SuiteResult("dynamics", cases, bad, max(worst_pos, -worst_neg),
                       {"max_delta_pos": worst_pos, "min_delta_neg": worst_neg})


def run_moments(dims=(2, 8, 64, 1024), n_samples: int = 1_000_000, seed: int = 0,
                z_limit: float = 5.0) -> SuiteResult:
    bad, worst, details = 0, 0.0, {}
    for i, d in enumerate(dims):
        mom = cosine_moments_mc(d, n_samples, seed + i)
        z1 = abs(mom.mean) / mom.mean_se
        z2 = abs(mom.second_moment - 1.0 / d) / mom.second_se
        details[d] = {"mean": mom.mean, "second": mom.second_moment, "z_mean": z1, "z_second": z2}
        worst = max(worst, z1, z2)
        bad += int(z1 > z_limit) + int(z2 > z_limit)
    return SuiteResult("moments", len(dims), bad, worst, details)


def run_density(dims=(2, 3, 5, 50), tol: float = 1e-6) -> SuiteResult:
    bad, worst, details = 0, 0.0, {}
    for d in dims:
        err = abs(cosine_density_integral(d) - 1.0)
        details[d] = err
        worst = max(worst, err)
        bad += int(err > tol)
    return SuiteResult("density", len(dims), bad, worst, details)


def run_kernel(cases: int = 100, seed: int = 0, d: int = 3, order: int = 12, tol: float = 1e-6,
               rounding: float = 1e-14) -> SuiteResult:
    """Error below ``tol`` at ``order`` and non-increasing in the order, on unit vectors.

    Once the truncation error reaches double-precision resolution it is pure
    rounding noise, so monotonicity is checked up to ``rounding``.
    """
    rng = np.random.default_rng(seed)
    bad, worst = 0, 0.0
    for _ in range(cases):
        u, v = _random_unit(rng, 2, d)
        errs = [kernel_check(u, v, m) for m in range(order + 1)]
        monotone = all(b <= a + rounding for a, b in zip(errs, errs[1:]))
        worst = max(worst, errs[-1])
        bad += int(errs[-1] >= tol or not monotone)
    return SuiteResult("kernel", cases, bad, worst)


SUITES = {
    "centers": run_centers,
    "smoothness": run_smoothness,
    "margin": run_margin_bound,
    "dynamics": run_dynamics,
    "moments": run_moments,
    "density": run_density,
    "kernel": run_kernel,
}
