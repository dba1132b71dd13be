"""L1 sparse coding and online dictionary learning.

The coder solves ``min_a 0.5*||x - D a||^2 + lam*||a||_1`` by cyclic
coordinate descent, iterated until the lasso duality gap drops below a
tolerance, so every returned code carries an optimality certificate. The
learner consumes one sample per step, accumulates the sufficient
statistics ``A += a a^T`` and ``B += x a^T``, and refreshes each atom by
one pass of block coordinate descent, projecting it back onto the L2 unit
ball.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BUNDLE_FORMAT_VERSION = 1

NORM_TOL = 1e-9


class SolverFailure(RuntimeError):
    """Lasso solver exceeded its sweep cap; carries the final duality gap."""

    def __init__(self, gap: float, sweeps: int):
        super().__init__(
            f"lasso did not converge in {sweeps} sweeps (duality gap {gap:.3e})"
        )
        self.gap = gap
        self.sweeps = sweeps


@dataclass
class Dictionary:
    """Learned atom matrix with columns constrained to the L2 unit ball."""

    atoms: np.ndarray  # (d, k), column j = atom j
    lam: float
    colorspace: str = ""
    seed: int = 0
    iterations: int = 0

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2:
            raise ValueError(f"atoms must be 2-D, got shape {self.atoms.shape}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        norms = np.linalg.norm(self.atoms, axis=0)
        if norms.size and norms.max() > 1.0 + NORM_TOL:
            raise ValueError(f"atom norm {norms.max():.12f} exceeds unit ball")

    @property
    def d(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[1]


@dataclass
class SparseCode:
    coefficients: np.ndarray  # (k,)
    objective: float


def _soft(u: np.ndarray, t: float) -> np.ndarray:
    return np.sign(u) * np.maximum(np.abs(u) - t, 0.0)


def _dual_gaps(
    Xt: np.ndarray, R: np.ndarray, A: np.ndarray, atoms: np.ndarray, lam: float
) -> np.ndarray:
    """Per-problem lasso duality gap for codes A with residuals R = Xt - D A."""
    r_sq = np.einsum("ij,ij->j", R, R)
    primal = 0.5 * r_sq + lam * np.abs(A).sum(axis=0)
    corr_max = np.abs(atoms.T @ R).max(axis=0) if atoms.shape[1] else np.zeros(R.shape[1])
    scale = np.where(corr_max > lam, lam / np.where(corr_max > 0, corr_max, 1.0), 1.0)
    rx = np.einsum("ij,ij->j", R, Xt)
    dual = scale * rx - 0.5 * scale**2 * r_sq
    return primal - dual


def lasso_solve_batch(
    X: np.ndarray,
    D: Dictionary,
    *,
    gap_tol: float = 1e-10,
    max_sweeps: int = 10_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the lasso for every row of X against D.

    Returns (codes, objectives) with codes of shape (n, k). The problems
    are independent: each row's solution depends only on that row, so the
    output is exactly equivariant under row permutations.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected (n, d) sample matrix, got shape {X.shape}")
    if X.shape[1] != D.d:
        raise ValueError(f"sample dim {X.shape[1]} != dictionary dim {D.d}")
    atoms = D.atoms
    lam = D.lam
    n = X.shape[0]
    k = D.k

    Xt = X.T.copy()  # (d, n)
    A = np.zeros((k, n))
    R = Xt.copy()
    col_sq = np.einsum("ij,ij->j", atoms, atoms)
    coords = np.flatnonzero(col_sq > 0.0)  # zero atoms keep zero coefficients

    gaps = _dual_gaps(Xt, R, A, atoms, lam)
    sweeps = 0
    while gaps.max(initial=0.0) > gap_tol:
        if sweeps >= max_sweeps:
            raise SolverFailure(float(gaps.max()), sweeps)
        changed = False
        for j in coords:
            aj = atoms[:, j]
            u = aj @ R + col_sq[j] * A[j]
            new = _soft(u, lam) / col_sq[j]
            delta = new - A[j]
            if np.any(delta):
                R -= np.outer(aj, delta)
                A[j] = new
                changed = True
        sweeps += 1
        if sweeps % 50 == 0:
            R = Xt - atoms @ A  # shed accumulated round-off
        gaps = _dual_gaps(Xt, R, A, atoms, lam)
        if not changed:
            # Coordinate-wise fixed point: the float-exact minimizer. The
            # measured gap can sit a hair above gap_tol from round-off.
            if gaps.max(initial=0.0) <= 1e-8:
                break
            raise SolverFailure(float(gaps.max()), sweeps)

    r_sq = np.einsum("ij,ij->j", R, R)
    objectives = 0.5 * r_sq + lam * np.abs(A).sum(axis=0)
    return A.T.copy(), objectives


def lasso_solve(x: np.ndarray, D: Dictionary, **kwargs) -> SparseCode:
    """Exact minimizer of ``0.5*||x - D a||^2 + lam*||a||_1``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected 1-D sample, got shape {x.shape}")
    codes, objectives = lasso_solve_batch(x[None, :], D, **kwargs)
    return SparseCode(coefficients=codes[0], objective=float(objectives[0]))


def lasso_objective(x: np.ndarray, D: Dictionary, alpha: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if x.shape != (D.d,):
        raise ValueError(f"sample shape {x.shape} != ({D.d},)")
    if alpha.shape != (D.k,):
        raise ValueError(f"code shape {alpha.shape} != ({D.k},)")
    resid = x - D.atoms @ alpha
    return float(0.5 * resid @ resid + D.lam * np.abs(alpha).sum())


def kkt_violation(x: np.ndarray, D: Dictionary, alpha: np.ndarray) -> float:
    """Largest violation of the lasso stationarity conditions.

    For nonzero coefficients the atom correlation with the residual must
    equal lam * sign(alpha_j); for zero coefficients it must not exceed
    lam in magnitude.
    """
    x = np.asarray(x, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    corr = D.atoms.T @ (x - D.atoms @ alpha)
    active = alpha != 0.0
    worst = 0.0
    if np.any(active):
        worst = float(np.abs(corr[active] - D.lam * np.sign(alpha[active])).max())
    if np.any(~active):
        worst = max(worst, float(np.abs(corr[~active]).max() - D.lam))
    return worst


def kkt_check(x: np.ndarray, D: Dictionary, alpha: np.ndarray, tol: float = 1e-6) -> bool:
    return kkt_violation(x, D, alpha) <= tol


def dict_init(
    samples: np.ndarray,
    k: int,
    lam: float,
    seed: int | np.random.SeedSequence = 0,
    colorspace: str = "",
) -> Dictionary:
    """Initial dictionary drawn from the training vectors themselves.

    Samples k rows without replacement when possible; with fewer than k
    training vectors, draws with replacement and adds a small seeded
    perturbation so the columns are distinct. Columns are projected onto
    the unit ball.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError("need at least one training vector")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n, d = samples.shape
    rng = np.random.default_rng(seed)
    if n >= k:
        idx = rng.choice(n, size=k, replace=False)
        atoms = samples[idx].T.copy()
    else:
        idx = rng.choice(n, size=k, replace=True)
        atoms = samples[idx].T + 1e-3 * rng.standard_normal((d, k))
    norms = np.linalg.norm(atoms, axis=0)
    over = norms > 1.0
    atoms[:, over] /= norms[over]
    return Dictionary(atoms=atoms, lam=lam, colorspace=colorspace)


@dataclass
class LearnerState:
    """Streaming statistics of the online dictionary learner."""

    dictionary: Dictionary
    A: np.ndarray  # (k, k) sum of code outer products
    B: np.ndarray  # (d, k) sum of sample-code outer products
    t: int = 0
    iterations: int = 0
    seed: int = 0

    @classmethod
    def fresh(cls, dictionary: Dictionary, iterations: int = 0, seed: int = 0):
        k, d = dictionary.k, dictionary.d
        return cls(
            dictionary=dictionary,
            A=np.zeros((k, k)),
            B=np.zeros((d, k)),
            iterations=iterations,
            seed=seed,
        )


def learner_step(state: LearnerState, x: np.ndarray, **solver_kwargs) -> LearnerState:
    """One online update: code x, fold it into A and B, refresh the atoms.

    Mutates ``state`` in place and returns it; steps must be applied
    sequentially (single writer).
    """
    x = np.asarray(x, dtype=np.float64)
    D = state.dictionary
    if x.shape != (D.d,):
        raise ValueError(f"sample shape {x.shape} != ({D.d},)")
    alpha = lasso_solve(x, D, **solver_kwargs).coefficients

    state.A += np.outer(alpha, alpha)
    state.B += np.outer(x, alpha)

    atoms = D.atoms
    diag = np.diagonal(state.A)
    for j in np.flatnonzero(diag > 0.0):
        v = (state.B[:, j] - atoms @ state.A[:, j]) / diag[j] + atoms[:, j]
        atoms[:, j] = v / max(np.linalg.norm(v), 1.0)
    state.t += 1
    return state


def holdout_objective(D: Dictionary, holdout: np.ndarray, **solver_kwargs) -> float:
    """Average lasso objective of D over a fixed evaluation set."""
    _, objectives = lasso_solve_batch(holdout, D, **solver_kwargs)
    return float(objectives.mean())


def learn_dictionary(
    samples: np.ndarray,
    *,
    k: int = 500,
    lam: float = 0.1,
    iterations: int = 100_000,
    seed: int = 0,
    colorspace: str = "",
    checkpoints: int = 200,
    holdout_size: int = 256,
) -> tuple[Dictionary, list[tuple[int, float]]]:
    """Run the online learner for ``iterations`` seeded-random draws.

    A fixed subset of the pool is held out from the training draws and
    used only to estimate the average reconstruction objective at evenly
    spaced checkpoints. Returns the final dictionary and the checkpoint
    log as (iteration, objective) pairs, including t=0 and the final
    iteration.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError("training sample pool is empty")
    n = samples.shape[0]

    root = np.random.SeedSequence(seed)
    ss_holdout, ss_init, ss_draws = root.spawn(3)

    n_hold = min(holdout_size, max(1, n // 5))
    hold_idx = np.random.default_rng(ss_holdout).choice(n, size=n_hold, replace=False)
    hold_mask = np.zeros(n, dtype=bool)
    hold_mask[hold_idx] = True
    holdout = samples[hold_mask]
    pool = samples[~hold_mask]
    if pool.shape[0] == 0:
        pool = samples

    D = dict_init(pool, k, lam, seed=ss_init, colorspace=colorspace)
    D.seed = seed
    state = LearnerState.fresh(D, iterations=iterations, seed=seed)

    interval = max(1, iterations // max(1, checkpoints))
    log: list[tuple[int, float]] = [(0, holdout_objective(D, holdout))]
    draw_rng = np.random.default_rng(ss_draws)
    for t in range(1, iterations + 1):
        x = pool[draw_rng.integers(pool.shape[0])]
        learner_step(state, x)
        if t % interval == 0 or t == iterations:
            log.append((t, holdout_objective(D, holdout)))
    D.iterations = state.t
    return D, log


def save_dictionary(D: Dictionary, path_prefix: str | Path) -> tuple[Path, Path]:
    """Write a dictionary bundle: JSON header + float32 column-major matrix."""
    prefix = Path(path_prefix)
    header_path = prefix.with_suffix(".json")
    matrix_path = prefix.with_suffix(".bin")
    header = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "colorspace": D.colorspace,
        "d": D.d,
        "k": D.k,
        "lambda": D.lam,
        "seed": D.seed,
        "iterations": D.iterations,
    }
    header_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    matrix_path.write_bytes(D.atoms.astype("<f4").tobytes(order="F"))
    return header_path, matrix_path


def load_dictionary(path_prefix: str | Path) -> Dictionary:
    prefix = Path(path_prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    if header.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise ValueError(f"unsupported bundle version {header.get('format_version')}")
    d, k = header["d"], header["k"]
    raw = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f4")
    if raw.size != d * k:
        raise ValueError(f"matrix file holds {raw.size} floats, expected {d * k}")
    atoms = raw.reshape((d, k), order="F").astype(np.float64)
    # float32 quantization can push a unit-norm column just past the ball.
    norms = np.linalg.norm(atoms, axis=0)
    over = norms > 1.0
    atoms[:, over] /= norms[over]
    return Dictionary(
        atoms=atoms,
        lam=header["lambda"],
        colorspace=header["colorspace"],
        seed=header["seed"],
        iterations=header["iterations"],
    )
