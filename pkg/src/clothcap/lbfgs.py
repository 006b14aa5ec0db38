"""Limited-memory BFGS with a strong Wolfe line search.

The solver works on named parameter blocks and a list of weighted energy
terms; every term returns its raw value and per-block gradients, and the
solver records one trace row per accepted iterate (total energy, weighted
per-term values, gradient norm, step length). Zero-weight terms are skipped
entirely, so disabling a term cannot perturb the iterates.

The default line search is the classic strong Wolfe bracket/zoom scheme with
quadratic interpolation (sufficient-decrease constant 1e-4, curvature
constant 0.9). Rendered terms are only piecewise smooth: pixel-ownership
flips put small value jumps in the energy, and near convergence those jumps
make the curvature condition unsatisfiable even though local gradients stay
exact. When the Wolfe search comes up empty the solver falls back to plain
Armijo backtracking (then steepest descent) and drops its curvature memory,
so it keeps descending instead of quitting at the first jump. For energies
where jumps dominate from the start, ``line_search="armijo"`` skips the
bracketing and accepts on sufficient decrease alone, storing curvature pairs
only when they are safely positive; that costs one or two evaluations per
iteration instead of the half dozen the failing Wolfe search burns. Accepted
energy is non-increasing by construction in both modes; only when no
decreasing step exists at all, or progress stalls below noise level, does
the solve stop with the line_search_failed flag and the best iterate so far.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


@dataclass
class SolverConfig:
    max_iters: int = 200
    memory: int = 10
    grad_tol: float = 1e-8
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_step_halvings: int = 30  # zoom iterations before giving up
    # "wolfe" brackets for the curvature condition; "armijo" backtracks on
    # sufficient decrease alone. Armijo spends far fewer evaluations per
    # iteration on energies with pixel-ownership jumps, where the curvature
    # condition buys nothing.
    line_search: str = "wolfe"

    def __post_init__(self):
        if not (0 < self.wolfe_c1 < self.wolfe_c2 < 1):
            raise InvalidInputError("need 0 < c1 < c2 < 1")
        if self.memory < 1 or self.max_iters < 0:
            raise InvalidInputError("memory >= 1 and max_iters >= 0 required")
        if self.line_search not in ("wolfe", "armijo"):
            raise InvalidInputError("line_search must be 'wolfe' or 'armijo'")


@dataclass
class ParamBlock:
    """A named slice of the optimization vector with optional box bounds."""

    name: str
    values: np.ndarray
    lower: np.ndarray | float | None = None
    upper: np.ndarray | float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel().copy()
        if self.lower is not None and np.any(self.values < self.lower):
            raise InvalidInputError(f"block {self.name!r} starts below its lower bound")
        if self.upper is not None and np.any(self.values > self.upper):
            raise InvalidInputError(f"block {self.name!r} starts above its upper bound")


class EnergyTerm:
    """Base class: subclasses implement evaluate(blocks) -> (value, grads).

    ``grads`` maps block names to arrays matching the block shapes; blocks a
    term does not touch may be omitted. ``weight`` scales both outputs when
    the solver assembles the total.
    """

    name = "term"
    weight = 1.0

    def evaluate(self, blocks: dict) -> tuple:
        raise NotImplementedError


@dataclass
class SolveResult:
    blocks: dict
    energy: float
    status: str            # converged | max_iters | line_search_failed
    n_iters: int
    trace: list            # rows: dicts with iteration/total/terms/grad_norm/step
    term_names: list

    def trace_energies(self) -> np.ndarray:
        return np.array([row["total"] for row in self.trace])


class _Packed:
    """Flat-vector view over the blocks plus bound projection."""

    def __init__(self, blocks: list):
        self.names = [b.name for b in blocks]
        self.sizes = [len(b.values) for b in blocks]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.blocks = blocks
        self.bounded = any(b.lower is not None or b.upper is not None for b in blocks)

    def pack(self) -> np.ndarray:
        return np.concatenate([b.values for b in self.blocks]) if self.blocks else np.zeros(0)

    def unpack(self, x: np.ndarray) -> dict:
        return {name: x[self.offsets[i]:self.offsets[i + 1]]
                for i, name in enumerate(self.names)}

    def project(self, x: np.ndarray) -> np.ndarray:
        if not self.bounded:
            return x
        x = x.copy()
        for i, b in enumerate(self.blocks):
            seg = slice(self.offsets[i], self.offsets[i + 1])
            if b.lower is not None:
                x[seg] = np.maximum(x[seg], b.lower)
            if b.upper is not None:
                x[seg] = np.minimum(x[seg], b.upper)
        return x

    def pack_grads(self, grads: dict) -> np.ndarray:
        out = np.zeros(self.offsets[-1])
        for i, name in enumerate(self.names):
            if name in grads:
                out[self.offsets[i]:self.offsets[i + 1]] += np.asarray(grads[name]).ravel()
        return out


def _evaluate(terms, packed: _Packed, x: np.ndarray):
    """Total energy, gradient and weighted per-term values at x."""
    blocks = packed.unpack(x)
    total = 0.0
    grad = np.zeros_like(x)
    per_term = {}
    for term in terms:
        if term.weight == 0.0:
            continue
        value, grads = term.evaluate(blocks)
        wv = term.weight * value
        per_term[term.name] = wv
        total += wv
        grad += term.weight * packed.pack_grads(grads)
    return total, grad, per_term


def _quad_min(a, fa, ga, b, fb):
    """Minimizer of the quadratic fitting (f, f') at a and f at b; None when sick."""
    if not (np.isfinite(fa) and np.isfinite(fb) and np.isfinite(ga)):
        return None
    d = b - a
    if d == 0:
        return None
    denom = fb - fa - ga * d
    if denom == 0:
        return None
    out = a - ga * d * d / (2.0 * denom)
    if not np.isfinite(out):
        return None
    return out


def lbfgs_minimize(terms, blocks, config: SolverConfig | None = None) -> SolveResult:
    """Minimize the weighted sum of ``terms`` over ``blocks``.

    ``blocks`` is a list of ParamBlock; the result carries optimized copies
    keyed by name. Raises InvalidInputError when the initial energy or
    gradient is not finite.
    """
    config = config or SolverConfig()
    packed = _Packed(list(blocks))
    x = packed.project(packed.pack())
    active = [t for t in terms if t.weight != 0.0]
    term_names = [t.name for t in active]

    f, g, per = _evaluate(active, packed, x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise InvalidInputError("initial energy or gradient is not finite")

    trace = [{"iteration": 0, "total": f, "terms": dict(per),
              "grad_norm": float(np.linalg.norm(g)), "step": 0.0}]
    s_hist, y_hist, rho_hist = [], [], []
    status = "max_iters"
    it = 0
    stalled = 0
    last_drop = None  # decrease achieved by the previous accepted step
    c1, c2 = config.wolfe_c1, config.wolfe_c2

    while it < config.max_iters:
        gnorm = float(np.linalg.norm(g))
        if gnorm <= config.grad_tol:
            status = "converged"
            break

        # Two-loop recursion.
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += s * (a - b)
        d = -q

        if g @ d >= 0:  # numerical breakdown: restart from steepest descent
            s_hist, y_hist, rho_hist = [], [], []
            d = -g

        dphi0 = float(g @ d)
        if s_hist:
            alpha = 1.0
        elif last_drop is not None and dphi0 < 0:
            # After a memory restart, seed from the previous decrease so the
            # search starts near the step scale that actually worked.
            alpha = min(1.0, max(2.02 * last_drop / -dphi0, 1e-12))
        else:
            alpha = min(1.0, 1.0 / max(gnorm, 1e-12))

        accepted = None
        hint = alpha  # scale below which the fallback search should start
        if config.line_search == "wolfe":
            # --- strong Wolfe bracketing ---
            alpha_prev, f_prev, dphi_prev, prev_state = 0.0, f, dphi0, None
            f0 = f
            for ls_iter in range(config.max_step_halvings):
                x_try = packed.project(x + alpha * d)
                f_try, g_try, per_try = _evaluate(active, packed, x_try)
                bad = not np.isfinite(f_try)
                if bad or f_try > f0 + c1 * alpha * dphi0 or (ls_iter > 0 and f_try >= f_prev):
                    accepted, hint = _zoom(active, packed, x, d, f0, dphi0,
                                           alpha_prev, f_prev, dphi_prev, prev_state,
                                           alpha, f_try, c1, c2, config)
                    break
                dphi = float(g_try @ d)
                if abs(dphi) <= -c2 * dphi0:
                    accepted = (alpha, x_try, f_try, g_try, per_try)
                    break
                if dphi >= 0:
                    accepted, hint = _zoom(active, packed, x, d, f0, dphi0,
                                           alpha, f_try, dphi, (x_try, g_try, per_try),
                                           alpha_prev, f_prev, c1, c2, config)
                    break
                alpha_prev, f_prev, dphi_prev = alpha, f_try, dphi
                prev_state = (x_try, g_try, per_try)
                alpha *= 2.0

            if accepted is not None and (not np.isfinite(accepted[2]) or accepted[2] >= f):
                accepted = None
            start = min(1.0, 0.5 * hint)
        else:
            start = alpha

        fallback = False
        if accepted is None:
            accepted = _backtrack(active, packed, x, f, g, d, start, config)
            if accepted is None and s_hist:
                if config.line_search == "armijo":
                    # The quasi-Newton direction itself failed; distrust it.
                    s_hist, y_hist, rho_hist = [], [], []
                accepted = _backtrack(active, packed, x, f, g, -g,
                                      min(1.0, 1.0 / max(gnorm, 1e-12)), config)
            fallback = accepted is not None
        if accepted is None:
            status = "line_search_failed"
            break

        alpha, x_new, f_new, g_new, per_new = accepted

        if fallback and config.line_search == "wolfe":
            # The pair straddles a jump and its curvature is junk; restart.
            s_hist, y_hist, rho_hist = [], [], []
            stalled = stalled + 1 if f - f_new <= 1e-8 * (1.0 + abs(f)) else 0
        else:
            if config.line_search == "armijo":
                stalled = stalled + 1 if f - f_new <= 1e-8 * (1.0 + abs(f)) else 0
            else:
                stalled = 0
            # Cautious update: keep only pairs with solid positive curvature,
            # which Armijo acceptance alone does not guarantee.
            s = x_new - x
            y = g_new - g
            sy = float(s @ y)
            if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)) and sy > 0:
                s_hist.append(s)
                y_hist.append(y)
                rho_hist.append(1.0 / sy)
                if len(s_hist) > config.memory:
                    s_hist.pop(0)
                    y_hist.pop(0)
                    rho_hist.pop(0)

        last_drop = f - f_new
        x, f, g, per = x_new, f_new, g_new, per_new
        it += 1
        trace.append({"iteration": it, "total": f, "terms": dict(per),
                      "grad_norm": float(np.linalg.norm(g)), "step": float(alpha)})
        if stalled >= 3:  # repeated sub-noise decreases: jump-limited floor
            status = "line_search_failed"
            break

    if status == "max_iters" and float(np.linalg.norm(g)) <= config.grad_tol:
        status = "converged"
    out_blocks = {}
    vals = packed.unpack(x)
    for b in blocks:
        out_blocks[b.name] = vals[b.name].copy()
    return SolveResult(out_blocks, f, status, it, trace, term_names)


def _backtrack(terms, packed, x, f0, g, d, alpha0, config):
    """Armijo-only backtracking along d; accepted tuple or None.

    Last resort when the strong Wolfe search finds nothing: value jumps from
    pixel-ownership flips leave sufficient decrease reachable (gradients are
    exact on each smooth piece) while the curvature condition is not.
    """
    dphi0 = float(g @ d)
    if not np.isfinite(dphi0) or dphi0 >= 0:
        return None
    alpha = alpha0
    for _ in range(config.max_step_halvings):
        x_try = packed.project(x + alpha * d)
        f_try, g_try, per_try = _evaluate(terms, packed, x_try)
        if np.isfinite(f_try) and f_try < f0 + config.wolfe_c1 * alpha * dphi0:
            return (alpha, x_try, f_try, g_try, per_try)
        alpha *= 0.5
    return None


def _zoom(terms, packed, x, d, f0, dphi0, lo, f_lo, dphi_lo, lo_state,
          hi, f_hi, c1, c2, config):
    """Shrink [lo, hi] to a strong Wolfe step (f_lo the best Armijo point).

    ``lo_state`` caches (x, grad, per_term) at lo when already evaluated, so
    the sufficient-decrease fallback never re-evaluates the energy. Returns
    (accepted, hint): hint is the smallest step scale explored without any
    decrease, so the caller's fallback does not re-tread the same range.
    """
    span0 = abs(hi - lo)
    for _ in range(config.max_step_halvings):
        mid = _quad_min(lo, f_lo, dphi_lo, hi, f_hi)
        span = abs(hi - lo)
        if (mid is None or not (min(lo, hi) < mid < max(lo, hi))
                or min(abs(mid - lo), abs(mid - hi)) < 0.05 * span):
            mid = 0.5 * (lo + hi)
        x_try = packed.project(x + mid * d)
        f_try, g_try, per_try = _evaluate(terms, packed, x_try)
        if not np.isfinite(f_try) or f_try > f0 + c1 * mid * dphi0 or f_try >= f_lo:
            hi, f_hi = mid, f_try
        else:
            dphi = float(g_try @ d)
            if abs(dphi) <= -c2 * dphi0:
                return (mid, x_try, f_try, g_try, per_try), mid
            if dphi * (hi - lo) >= 0:
                hi, f_hi = lo, f_lo
            lo, f_lo, dphi_lo = mid, f_try, dphi
            lo_state = (x_try, g_try, per_try)
        # Once the bracket has collapsed well below its initial span the
        # curvature condition will not suddenly hold; hand over to the
        # sufficient-decrease fallback instead of burning evaluations.
        if abs(hi - lo) < max(3e-2 * span0, 1e-18):
            break
    # Fall back to the best sufficient-decrease point when curvature is elusive.
    if lo > 0 and lo_state is not None and np.isfinite(f_lo) and f_lo < f0:
        x_lo, g_lo, per_lo = lo_state
        return (lo, x_lo, f_lo, g_lo, per_lo), lo
    return None, max(min(lo, hi) if min(lo, hi) > 0 else max(lo, hi), 1e-18)


def write_trace_csv(path, result: SolveResult) -> None:
    """One row per accepted iterate: iteration, total, terms, |grad|, step."""
    names = result.term_names
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total", *names, "grad_norm", "step"])
        for row in result.trace:
            writer.writerow([row["iteration"], repr(row["total"]),
                             *[repr(row["terms"].get(n, 0.0)) for n in names],
                             repr(row["grad_norm"]), repr(row["step"])])
