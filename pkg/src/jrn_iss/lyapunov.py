"""ISS certification of the estimation-error dynamics of a Jordan network.

With the true state ``x`` as input, the noise-free error ``e = x - x_hat``
evolves as

    e' = g(e, x) = f(x) - W_xa sigma(W_ay h(f(x)) + W_ax x - W_ax e).

For a linear plant and identity activation this is ``e' = Ac e + Bc x`` with
``Ac = W_xa W_ax`` and ``Bc = A - W_xa W_ay H A - W_xa W_ax``. A quadratic
ISS-Lyapunov function then comes from the discrete Lyapunov equation. For
nonlinear systems a neural candidate ``V(e) = (W2 (W1 e)**2)**2`` is trained
on a hinge loss and checked by the interval falsifier, counterexample by
counterexample.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import SystemModel, finite_difference_jacobian, make_rng
from .errors import ConfigurationError, InputError, InstabilityError, NumericalError
from .jrn import JrnParameters
from .verifier import bnb
from .verifier.expr import Expr, const, esum, lincomb, norm, square, sumsq, tanh, var

KRONECKER_MAX_N = 4
CONDITIONS = ("decrease", "upper", "lower")


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(M)))))


def _matvec_sym(W, vec):
    return [lincomb(row, vec) for row in np.atleast_2d(W)]


# ---------------------------------------------------------------------------
# Error system
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ErrorSystem:
    """Error map ``g(e, x)`` in numeric and symbolic form.

    ``g`` maps ``(N, n)`` arrays ``E`` and ``X`` to ``(N, n)``. ``g_sym``
    maps lists of expressions to a list of expressions. ``linear`` holds
    ``(Ac, Bc)`` when ``g(e, x) = Ac e + Bc x`` exactly. ``jacobians`` gives
    ``(dg/de, dg/dx)`` at the origin when known in closed form.
    """

    n: int
    g: Callable
    g_sym: Callable
    linear: Optional[tuple] = None
    jacobians: Optional[tuple] = None
    model: Optional[SystemModel] = None
    params: Optional[JrnParameters] = None

    @classmethod
    def from_linear(cls, Ac, Bc) -> "ErrorSystem":
        Ac = np.atleast_2d(np.asarray(Ac, dtype=float))
        Bc = np.atleast_2d(np.asarray(Bc, dtype=float))
        n = Ac.shape[0]
        if Ac.shape != (n, n) or Bc.shape != (n, n):
            raise InputError(f"Ac and Bc must be {n}x{n}, got {Ac.shape} and {Bc.shape}")

        def g(E, X):
            return np.asarray(E) @ Ac.T + np.asarray(X) @ Bc.T

        def g_sym(e, x):
            return [lincomb(np.concatenate([Ac[i], Bc[i]]), list(e) + list(x)) for i in range(n)]

        return cls(n=n, g=g, g_sym=g_sym, linear=(Ac, Bc), jacobians=(Ac, Bc))

    def __call__(self, E, X):
        E = np.atleast_2d(np.asarray(E, dtype=float))
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.g(E, X)

    def linearize(self):
        """``(dg/de, dg/dx)`` at ``(0, 0)``."""
        if self.jacobians is not None:
            return self.jacobians
        zero = np.zeros(self.n)
        Je = finite_difference_jacobian(lambda e: self.g(e[None], zero[None])[0], zero)
        Jx = finite_difference_jacobian(lambda x: self.g(zero[None], x[None])[0], zero)
        return Je, Jx

    def symbolic(self, e=None, x=None):
        """Error map over variables ``e1..en, x1..xn`` (indices 0..2n-1)."""
        e = e if e is not None else error_vars(self.n)
        x = x if x is not None else state_vars(self.n)
        return self.g_sym(e, x)


def error_vars(n):
    return [var(i, f"e{i + 1}") for i in range(n)]


def state_vars(n):
    return [var(n + i, f"x{i + 1}") for i in range(n)]


def build_error_system(model: SystemModel, params: JrnParameters,
                       require_linear: bool = False) -> ErrorSystem:
    """Error dynamics of the noise-free plant under the trained estimator.

    Parameters
    ----------
    require_linear : bool
        Demand the closed-form ``(Ac, Bc)`` specialization. It exists only for
        a linear plant with identity activation.
    """
    if params.n != model.n or params.m != model.m:
        raise ConfigurationError(
            f"network (n={params.n}, m={params.m}) does not match model "
            f"(n={model.n}, m={model.m})")
    linear_case = model.linear is not None and params.activation == "identity"
    if require_linear and not linear_case:
        raise ConfigurationError(
            f"linear error system needs a linear plant and identity activation; "
            f"got {model.name} with {params.activation}")
    W_ay, W_ax, W_xa = params.W_ay, params.W_ax, params.W_xa
    act = np.tanh if params.activation == "tanh" else (lambda z: z)

    def g(E, X):
        fx = np.asarray(model.f(X.T), dtype=float)
        hx = np.asarray(model.h(fx), dtype=float)
        Z = W_ay @ hx + W_ax @ X.T - W_ax @ E.T
        return (fx - W_xa @ act(Z)).T

    def g_sym(e, x):
        xs = np.array(list(x), dtype=object)
        fx = list(model.f(xs))
        hx = list(model.h(np.array(fx, dtype=object)))
        terms = hx + list(x) + list(e)
        hidden = []
        for k in range(params.hidden):
            coeffs = np.concatenate([W_ay[k], W_ax[k], -W_ax[k]])
            z = lincomb(coeffs, terms)
            hidden.append(tanh(z) if params.activation == "tanh" else z)
        return [fx[i] - lincomb(W_xa[i], hidden) for i in range(model.n)]

    # sigma'(0) = 1 for both activations.
    Jf = model.jacobian_f(np.zeros(model.n)) if model.jacobian_f else None
    jacobians = None
    if Jf is not None and model.jacobian_h is not None:
        Jh = model.jacobian_h(np.asarray(model.f(np.zeros(model.n)), dtype=float))
        jacobians = (W_xa @ W_ax, Jf - W_xa @ (W_ay @ Jh @ Jf + W_ax))

    linear = None
    if linear_case:
        A, H = model.linear
        linear = (W_xa @ W_ax, A - W_xa @ W_ay @ H @ A - W_xa @ W_ax)
    return ErrorSystem(n=model.n, g=g, g_sym=g_sym, linear=linear, jacobians=jacobians,
                       model=model, params=params)


# ---------------------------------------------------------------------------
# Discrete Lyapunov equation
# ---------------------------------------------------------------------------


def solve_discrete_lyapunov(Ac, Q) -> np.ndarray:
    """Solve ``Ac^T P Ac - P + Q = 0`` for symmetric positive definite ``P``.

    Uses the Kronecker-vectorized linear system for ``n <= 4`` and the
    doubling iteration ``P += A_k^T P A_k, A_k <- A_k^2`` otherwise.

    Raises
    ------
    InstabilityError
        If the spectral radius of ``Ac`` is at least 1.
    """
    Ac = np.atleast_2d(np.asarray(Ac, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = Ac.shape[0]
    if Ac.shape != (n, n) or Q.shape != (n, n):
        raise InputError(f"Ac and Q must be square of equal size, got {Ac.shape}, {Q.shape}")
    if not np.allclose(Q, Q.T, rtol=0.0, atol=0.0) or np.linalg.eigvalsh(Q).min() <= 0:
        raise InputError("Q must be symmetric positive definite")
    rho = spectral_radius(Ac)
    if not rho < 1.0:
        raise InstabilityError(f"spectral radius {rho:.6g} >= 1; error dynamics not stable")
    if n <= KRONECKER_MAX_N:
        K = np.eye(n * n) - np.kron(Ac.T, Ac.T)
        P = np.linalg.solve(K, Q.reshape(-1)).reshape(n, n)
    else:
        P, Ak = Q.copy(), Ac.copy()
        for _ in range(64):
            step = Ak.T @ P @ Ak
            P = P + step
            Ak = Ak @ Ak
            if np.linalg.norm(step) <= 1e-17 * np.linalg.norm(P):
                break
    P = 0.5 * (P + P.T)
    if np.linalg.eigvalsh(P).min() <= 0:
        raise NumericalError("Lyapunov solution is not positive definite")
    return P


def lyapunov_residual(Ac, P, Q) -> float:
    Ac, P, Q = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (Ac, P, Q))
    return float(np.linalg.norm(Ac.T @ P @ Ac - P + Q, "fro"))


# ---------------------------------------------------------------------------
# K-functions
# ---------------------------------------------------------------------------

K_KINDS = ("linear", "quadratic")


@dataclass(frozen=True)
class KFunction:
    """``c * r`` (linear) or ``c * r**2`` (quadratic)."""

    kind: str
    coeff: float

    def __post_init__(self):
        if self.kind not in K_KINDS:
            raise ConfigurationError(f"unknown K-function kind {self.kind!r}")
        if not (np.isfinite(self.coeff) and self.coeff >= 0):
            raise ConfigurationError(f"K-function coefficient must be >= 0, got {self.coeff}")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return self.coeff * (r if self.kind == "linear" else r * r)

    def of_vector(self, V):
        """Value at the Euclidean norms of the rows of ``V``."""
        V = np.atleast_2d(V)
        sq = np.sum(V * V, axis=1)
        return self.coeff * (np.sqrt(sq) if self.kind == "linear" else sq)

    def symbolic(self, vec):
        if self.coeff == 0.0:
            return const(0.0)
        r = norm(vec) if self.kind == "linear" else sumsq(vec)
        return self.coeff * r

    def scaled(self, factor: float) -> "KFunction":
        return KFunction(self.kind, self.coeff * factor)

    def to_dict(self):
        return {"kind": self.kind, "coeff": self.coeff}


@dataclass(frozen=True)
class KFunctionEnvelope:
    """Comparison functions of an ISS-Lyapunov function.

    ``alpha1(|e|) <= V(e) <= alpha2(|e|)`` and
    ``V(g(e, x)) - V(e) <= -alpha3(|e|) + gamma(|x|)``.
    ``gamma`` may be identically zero for an autonomous error system.
    """

    alpha1: KFunction
    alpha2: KFunction
    alpha3: KFunction
    gamma: KFunction

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3"):
            if not getattr(self, name).coeff > 0:
                raise ConfigurationError(f"{name} must have a positive coefficient")

    @classmethod
    def linear(cls, lower: float = 0.01, upper: float = 100.0) -> "KFunctionEnvelope":
        """``alpha1 = alpha3 = lower * r`` and ``alpha2 = gamma = upper * r``."""
        lo, hi = KFunction("linear", lower), KFunction("linear", upper)
        return cls(lo, hi, lo, hi)

    def check_ordering(self, radius: float, points: int = 1001) -> bool:
        r = np.linspace(0.0, radius, points)
        return bool(np.all(self.alpha1(r) <= self.alpha2(r)))

    def tightened(self, margin: float) -> "KFunctionEnvelope":
        """Stricter envelope used as a training target."""
        return KFunctionEnvelope(self.alpha1.scaled(1 + margin), self.alpha2.scaled(1 - margin),
                                 self.alpha3.scaled(1 + margin), self.gamma.scaled(1 - margin))

    def to_dict(self):
        return {k: getattr(self, k).to_dict() for k in ("alpha1", "alpha2", "alpha3", "gamma")}


def linear_iss_envelope(P, Q, Ac, Bc) -> KFunctionEnvelope:
    """Quadratic envelope for ``V(e) = e^T P e`` on ``e' = Ac e + Bc x``.

    ``alpha1 = lmin(P) r^2``, ``alpha2 = lmax(P) r^2``,
    ``alpha3 = lmin(Q) r^2 / 2`` and
    ``gamma = (2 |Ac^T P Bc|^2 / lmin(Q) + |Bc^T P Bc|^2) r^2``,
    with spectral norms.
    """
    P, Q, Ac, Bc = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (P, Q, Ac, Bc))
    lp = np.linalg.eigvalsh(P)
    lq = float(np.linalg.eigvalsh(Q).min())
    cross = np.linalg.norm(Ac.T @ P @ Bc, 2)
    input_gain = np.linalg.norm(Bc.T @ P @ Bc, 2)
    gamma = 2.0 * cross ** 2 / lq + input_gain ** 2
    return KFunctionEnvelope(KFunction("quadratic", float(lp[0])),
                             KFunction("quadratic", float(lp[-1])),
                             KFunction("quadratic", 0.5 * lq),
                             KFunction("quadratic", float(gamma)))


# ---------------------------------------------------------------------------
# Candidates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Region:
    """``exclusion <= |e| <= r_e`` and ``|x| <= r_x``."""

    r_e: float = 2.0
    r_x: float = 2.0
    exclusion: float = 0.1

    def __post_init__(self):
        if not (self.r_e > self.exclusion >= 0 and self.r_x > 0):
            raise ConfigurationError(
                f"need r_e > exclusion >= 0 and r_x > 0, got {self.r_e}, {self.exclusion}, "
                f"{self.r_x}")

    def to_dict(self):
        return {"r_e": self.r_e, "r_x": self.r_x, "exclusion": self.exclusion}


@dataclass
class LyapunovCandidate:
    """Quadratic ``e^T P e`` or neural ``(W2 (W1 e)**2)**2`` with ``W2`` of shape (1, h)."""

    kind: str
    P: Optional[np.ndarray] = None
    W1: Optional[np.ndarray] = None
    W2: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "quadratic":
            self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
            if not np.allclose(self.P, self.P.T, rtol=0.0, atol=1e-12):
                raise InputError("P must be symmetric")
            if np.linalg.eigvalsh(self.P).min() <= 0:
                raise InputError("P must be positive definite")
        elif self.kind == "neural":
            self.W1 = np.atleast_2d(np.asarray(self.W1, dtype=float))
            self.W2 = np.asarray(self.W2, dtype=float).reshape(1, -1)
            if self.W2.shape[1] != self.W1.shape[0]:
                raise InputError(f"W2 has {self.W2.shape[1]} columns for {self.W1.shape[0]} "
                                 "hidden units")
        else:
            raise InputError(f"unknown candidate kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.P.shape[0] if self.kind == "quadratic" else self.W1.shape[1]

    def metric(self) -> np.ndarray:
        """``M`` with ``V = e^T M e`` (quadratic) or ``V = (e^T M e)**2`` (neural)."""
        if self.kind == "quadratic":
            return self.P
        return self.W1.T @ (self.W2[0][:, None] * self.W1)

    def symbolic(self, e) -> Expr:
        e = list(e)
        if self.kind == "quadratic":
            P = self.P
            terms = [P[i, i] * square(e[i]) for i in range(len(e))]
            terms += [(2.0 * P[i, j]) * (e[i] * e[j])
                      for i in range(len(e)) for j in range(i + 1, len(e)) if P[i, j] != 0.0]
            return esum(terms)
        inner = [square(u) for u in _matvec_sym(self.W1, e)]
        return square(lincomb(self.W2[0], inner))

    def to_dict(self):
        if self.kind == "quadratic":
            return {"kind": "quadratic", "P": self.P.tolist()}
        return {"kind": "neural", "activation": "square", "W1": self.W1.tolist(),
                "W2": self.W2.tolist()}

    @classmethod
    def from_dict(cls, d) -> "LyapunovCandidate":
        if d["kind"] == "quadratic":
            return cls("quadratic", P=np.array(d["P"]))
        return cls("neural", W1=np.array(d["W1"]), W2=np.array(d["W2"]))


def eval_candidate(candidate: LyapunovCandidate, e) -> np.ndarray:
    """``V`` at one point ``(n,)`` or at the rows of ``(N, n)``."""
    arr = np.asarray(e, dtype=float)
    E = np.atleast_2d(arr)
    if E.shape[1] != candidate.n:
        raise InputError(f"expected {candidate.n}-dimensional errors, got {E.shape[1]}")
    if candidate.kind == "quadratic":
        out = np.einsum("ni,ij,nj->n", E, candidate.P, E)
    else:
        out = (np.square(E @ candidate.W1.T) @ candidate.W2[0]) ** 2
    return out[0] if arr.ndim == 1 else out


# ---------------------------------------------------------------------------
# CEGIS loss and learner
# ---------------------------------------------------------------------------


def condition_values(candidate, envelope: KFunctionEnvelope, error_system: ErrorSystem, E, X):
    """Per-sample violation amounts; positive means the condition fails."""
    E = np.atleast_2d(np.asarray(E, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    G = error_system(E, X)
    vE = eval_candidate(candidate, E)
    vG = eval_candidate(candidate, G)
    return {
        "decrease": vG - vE + envelope.alpha3.of_vector(E) - envelope.gamma.of_vector(X),
        "upper": vE - envelope.alpha2.of_vector(E),
        "lower": envelope.alpha1.of_vector(E) - vE,
    }


def cegis_loss(candidate, E, X, envelope: KFunctionEnvelope, error_system: ErrorSystem) -> float:
    """Mean over samples of the three hinge penalties."""
    vals = condition_values(candidate, envelope, error_system, E, X)
    return float(np.mean(sum(np.maximum(vals[c], 0.0) for c in CONDITIONS)))


def _neural_loss_and_grad(W1, w2, E, G, a1, a2, a3_minus_gamma):
    """Hinge loss and its gradient in ``(W1, w2)`` for precomputed envelope terms."""
    N = E.shape[0]
    uE, uG = E @ W1.T, G @ W1.T
    sE, sG = np.square(uE) @ w2, np.square(uG) @ w2
    vE, vG = sE * sE, sG * sG
    d1 = vG - vE + a3_minus_gamma
    d2 = vE - a2
    d3 = a1 - vE
    loss = float(np.sum(np.maximum(d1, 0) + np.maximum(d2, 0) + np.maximum(d3, 0)) / N)
    i1, i2, i3 = (d1 > 0).astype(float), (d2 > 0).astype(float), (d3 > 0).astype(float)
    cG = i1 / N
    cE = (-i1 + i2 - i3) / N
    # dV/dw2 = 2 s u^2 and dV/dW1_k = 4 s w2_k u_k e^T.
    kE, kG = 2.0 * cE * sE, 2.0 * cG * sG
    gw2 = np.square(uE).T @ kE + np.square(uG).T @ kG
    gW1 = ((kE[:, None] * 2.0 * uE) * w2).T @ E + ((kG[:, None] * 2.0 * uG) * w2).T @ G
    return loss, gW1, gw2


@dataclass
class LearnConfig:
    hidden: int = 6
    learning_rate: float = 0.01
    steps_per_round: int = 2000
    max_rounds: int = 20
    grid_points: int = 50
    random_points: int = 500
    perturbations: int = 20
    perturbation_sigma: float = 0.05
    margin: float = 0.1
    seed: int = 0
    random_checks: int = 20000
    max_boxes: int = 1_000_000
    max_depth: int = 60
    delta: float = 1e-4
    batch: int = 2048

    def __post_init__(self):
        for name in ("hidden", "steps_per_round", "max_rounds", "grid_points", "max_boxes"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if not 0 <= self.margin < 1:
            raise ConfigurationError("margin must lie in [0, 1)")
        if not self.learning_rate > 0 or not self.delta > 0:
            raise ConfigurationError("learning_rate and delta must be positive")


@dataclass
class Certificate:
    candidate: LyapunovCandidate
    envelope: KFunctionEnvelope
    region: Region
    verdict: str
    counterexample: Optional[dict] = None
    verifier_stats: dict = field(default_factory=dict)
    rounds: int = 0
    method: str = "cegis"
    model_hash: Optional[str] = None
    linearization: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    seconds: float = 0.0

    VERDICTS = ("verified", "counterexample", "inconclusive")

    def __post_init__(self):
        if self.verdict not in self.VERDICTS:
            raise InputError(f"unknown verdict {self.verdict!r}")

    @property
    def verified(self) -> bool:
        return self.verdict == "verified"

    def to_dict(self) -> dict:
        """Reproducible content; wall-clock time is deliberately left out."""
        return {
            "format_version": 1,
            "method": self.method,
            "candidate": self.candidate.to_dict(),
            "envelope": self.envelope.to_dict(),
            "region": self.region.to_dict(),
            "verdict": self.verdict,
            "counterexample": self.counterexample,
            "verifier_stats": {k: v for k, v in self.verifier_stats.items()
                               if not k.endswith("seconds")},
            "rounds": self.rounds,
            "model_hash": self.model_hash,
            "linearization": self.linearization,
            "extra": self.extra,
        }


def iss_query(error_system: ErrorSystem, candidate: LyapunovCandidate,
              envelope: KFunctionEnvelope, region: Region, delta: float = 1e-4):
    """Falsification query for the three ISS-Lyapunov conditions.

    Variables are ``e1..en, x1..xn``. Feasible points satisfy
    ``exclusion**2 <= |e|**2 <= r_e**2`` and ``|x|**2 <= r_x**2``.
    """
    n = error_system.n
    e, x = error_vars(n), state_vars(n)
    g = error_system.symbolic(e, x)
    vE = candidate.symbolic(e)
    vG = candidate.symbolic(g)
    violations = {
        "decrease": esum([vG, -vE, envelope.alpha3.symbolic(e), -envelope.gamma.symbolic(x)]),
        "upper": vE - envelope.alpha2.symbolic(e),
        "lower": envelope.alpha1.symbolic(e) - vE,
    }
    constraints = [sumsq(e) - region.r_e ** 2, sumsq(x) - region.r_x ** 2]
    box = bnb.Box(np.concatenate([np.full(n, -region.r_e), np.full(n, -region.r_x)]),
                  np.concatenate([np.full(n, region.r_e), np.full(n, region.r_x)]))
    names = [v.value[1] for v in e + x]
    return bnb.FalsifyQuery(names, box, violations, constraints=constraints,
                            exclusion_radius=region.exclusion, exclusion_vars=tuple(range(n)),
                            delta=delta)


def _grid(n, radius, points):
    axis = np.linspace(-radius, radius, points)
    mesh = np.meshgrid(*([axis] * n), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _in_region(E, X, region: Region):
    ne = np.sum(E * E, axis=1)
    nx = np.sum(X * X, axis=1)
    return (ne >= region.exclusion ** 2) & (ne <= region.r_e ** 2) & (nx <= region.r_x ** 2)


def _uniform_region(rng, count, n, region: Region):
    """Uniform samples of the box, filtered to the feasible set."""
    E = rng.uniform(-region.r_e, region.r_e, size=(count, n))
    X = rng.uniform(-region.r_x, region.r_x, size=(count, n))
    keep = _in_region(E, X, region)
    return E[keep], X[keep]


def initial_samples(n, region: Region, cfg: LearnConfig, rng):
    """Grid in ``e`` randomly paired with a grid in ``x``, plus ``x = 0`` pairs and random points."""
    Eg = _grid(n, region.r_e, cfg.grid_points)
    Xg = _grid(n, region.r_x, cfg.grid_points)
    E = Eg[_in_region(Eg, np.zeros_like(Eg), region)]
    Xok = Xg[np.sum(Xg * Xg, axis=1) <= region.r_x ** 2]
    X = Xok[rng.integers(0, Xok.shape[0], size=E.shape[0])]
    Er, Xr = _uniform_region(rng, cfg.random_points, n, region)
    return (np.concatenate([E, E, Er]),
            np.concatenate([X, np.zeros_like(E), Xr]))


def warm_start(P, envelope: KFunctionEnvelope, region: Region, hidden: int, rng):
    """Neural candidate ``(c e^T P e)**2`` with ``c`` centred in the envelope band."""
    n = P.shape[0]
    if hidden < n:
        raise ConfigurationError(f"hidden size {hidden} below state dimension {n}")
    lam, U = np.linalg.eigh(P)
    r = np.linspace(max(region.exclusion, 1e-3 * region.r_e), region.r_e, 200)
    lower = np.max(envelope.alpha1(r) / (lam[0] * r * r) ** 2)
    upper = np.min(envelope.alpha2(r) / (lam[-1] * r * r) ** 2)
    c = np.sqrt(np.sqrt(lower * upper))
    W1 = np.zeros((hidden, n))
    W2 = np.zeros(hidden)
    W1[:n] = U.T
    W2[:n] = c * lam
    if hidden > n:
        W1[n:] = 0.1 * rng.standard_normal((hidden - n, n))
        W2[n:] = 1e-3 * c * lam[0]
    return LyapunovCandidate("neural", W1=W1, W2=W2[None, :])


def _random_falsifier(candidate, envelope, error_system, region, cfg, rng):
    E, X = _uniform_region(rng, cfg.random_checks, error_system.n, region)
    vals = condition_values(candidate, envelope, error_system, E, X)
    worst = np.max(np.stack([vals[c] for c in CONDITIONS]), axis=0)
    k = int(np.argmax(worst)) if worst.size else 0
    if worst.size and worst[k] > 0.5 * cfg.delta:
        return np.concatenate([E[k], X[k]])
    return None


def _linearization_record(error_system: ErrorSystem, region: Region, Q=None):
    Je, Jx = error_system.linearize()
    Q = np.eye(error_system.n) if Q is None else Q
    rho = spectral_radius(Je)
    record = {"A": np.asarray(Je).tolist(), "B": np.asarray(Jx).tolist(),
              "spectral_radius": rho, "handoff_radius": region.exclusion}
    try:
        P = solve_discrete_lyapunov(Je, Q)
    except InstabilityError:
        record.update(stable=False, P=None, envelope=None)
        return record, None
    env = linear_iss_envelope(P, Q, Je, Jx)
    record.update(stable=True, P=P.tolist(), Q=np.asarray(Q).tolist(),
                  residual=lyapunov_residual(Je, P, Q), envelope=env.to_dict())
    return record, P


def learn_iss_lyapunov(error_system: ErrorSystem, envelope: KFunctionEnvelope,
                       region: Region = Region(), cfg: LearnConfig = LearnConfig(),
                       log=None, model_hash: Optional[str] = None) -> Certificate:
    """Counterexample-guided synthesis of a neural ISS-Lyapunov function.

    Each round trains the candidate with Adam on the hinge loss under an
    envelope tightened by ``cfg.margin``. A cheap random search then looks
    for violations, and the interval falsifier runs when it finds none. A
    counterexample and ``cfg.perturbations`` Gaussian perturbations of it
    join the samples. The loop stops at the first UNSAT answer, or with an
    ``inconclusive`` verdict once the rounds run out or the falsifier's
    budget is exhausted.
    """
    start = time.perf_counter()
    n = error_system.n
    rng = make_rng(cfg.seed)
    lin_record, P_lin = _linearization_record(error_system, region)
    P0 = P_lin if P_lin is not None else np.eye(n)
    cand = warm_start(P0, envelope, region, cfg.hidden, rng)
    E, X = initial_samples(n, region, cfg, rng)
    train_env = envelope.tightened(cfg.margin)
    W1, w2 = cand.W1.copy(), cand.W2[0].copy()
    stats = {"boxes": 0, "max_depth": 0, "falsifier_calls": 0, "random_counterexamples": 0,
             "verifier_counterexamples": 0, "verifier_seconds": 0.0}
    verdict, last_cex, last_result = "inconclusive", None, None
    rounds = 0
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for rounds in range(1, cfg.max_rounds + 1):
        G = error_system(E, X)
        a1 = train_env.alpha1.of_vector(E)
        a2 = train_env.alpha2.of_vector(E)
        a3g = train_env.alpha3.of_vector(E) - train_env.gamma.of_vector(X)
        m1, v1 = np.zeros_like(W1), np.zeros_like(W1)
        m2, v2 = np.zeros_like(w2), np.zeros_like(w2)
        loss = None
        for step in range(1, cfg.steps_per_round + 1):
            loss, gW1, gw2 = _neural_loss_and_grad(W1, w2, E, G, a1, a2, a3g)
            if loss == 0.0:
                break
            m1 = beta1 * m1 + (1 - beta1) * gW1
            v1 = beta2 * v1 + (1 - beta2) * gW1 * gW1
            m2 = beta1 * m2 + (1 - beta1) * gw2
            v2 = beta2 * v2 + (1 - beta2) * gw2 * gw2
            corr1, corr2 = 1 - beta1 ** step, 1 - beta2 ** step
            W1 = W1 - cfg.learning_rate * (m1 / corr1) / (np.sqrt(v1 / corr2) + eps)
            w2 = w2 - cfg.learning_rate * (m2 / corr1) / (np.sqrt(v2 / corr2) + eps)
        cand = LyapunovCandidate("neural", W1=W1.copy(), W2=w2[None, :].copy())
        exact_loss = cegis_loss(cand, E, X, envelope, error_system)

        cex = _random_falsifier(cand, envelope, error_system, region, cfg, rng)
        source = "random"
        if cex is None:
            query = iss_query(error_system, cand, envelope, region, cfg.delta)
            result = bnb.falsify(query, max_boxes=cfg.max_boxes, max_depth=cfg.max_depth,
                                 batch=cfg.batch)
            last_result = result
            stats["falsifier_calls"] += 1
            stats["boxes"] += result.stats["boxes"]
            stats["verifier_seconds"] += result.stats["seconds"]
            stats["max_depth"] = max(stats["max_depth"], result.stats["max_depth"])
            if result.status == bnb.UNSAT:
                verdict = "verified"
            elif result.status == bnb.COUNTEREXAMPLE:
                cex, source = result.point, "verifier"
        if log is not None:
            log(f"round {rounds}: train loss {loss:.6g}, sample loss {exact_loss:.6g}, "
                f"{'counterexample from ' + source if cex is not None else verdict}")
        if verdict == "verified":
            last_cex = None
            break
        if cex is None:
            break  # falsifier budget exhausted without a counterexample
        stats[f"{source}_counterexamples"] += 1
        last_cex = cex
        batch = cex[None, :] + cfg.perturbation_sigma * rng.standard_normal((cfg.perturbations, 2 * n))
        new = np.concatenate([cex[None, :], batch])
        lo = np.concatenate([np.full(n, -region.r_e), np.full(n, -region.r_x)])
        new = np.clip(new, lo, -lo)
        keep = _in_region(new[:, :n], new[:, n:], region)
        E = np.concatenate([E, new[keep, :n]])
        X = np.concatenate([X, new[keep, n:]])

    counterexample = None
    if last_cex is not None:
        vals = condition_values(cand, envelope, error_system, last_cex[None, :n],
                                last_cex[None, n:])
        counterexample = {"e": last_cex[:n].tolist(), "x": last_cex[n:].tolist(),
                          "violations": {c: float(vals[c][0]) for c in CONDITIONS}}
    stats["samples"] = int(E.shape[0])
    if last_result is not None:
        stats["last_status"] = last_result.status
    return Certificate(candidate=cand, envelope=envelope, region=region, verdict=verdict,
                       counterexample=counterexample, verifier_stats=stats, rounds=rounds,
                       method="cegis", model_hash=model_hash, linearization=lin_record,
                       seconds=time.perf_counter() - start)


def certify_linear(error_system: ErrorSystem, Q=None, region: Region = Region(exclusion=0.0),
                   samples: int = 10_000, seed: int = 0,
                   model_hash: Optional[str] = None) -> Certificate:
    """Quadratic certificate for a linear error system.

    The verdict is analytic: ``verified`` when the Lyapunov equation has an
    SPD solution. A Monte-Carlo check of the decrease condition over the
    region is recorded in ``extra``.

    Raises
    ------
    InstabilityError
        If ``Ac`` is not Schur stable.
    """
    if error_system.linear is None:
        raise ConfigurationError("error system has no linear form")
    start = time.perf_counter()
    Ac, Bc = error_system.linear
    n = error_system.n
    Q = np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    P = solve_discrete_lyapunov(Ac, Q)
    env = linear_iss_envelope(P, Q, Ac, Bc)
    cand = LyapunovCandidate("quadratic", P=P)
    rng = make_rng(seed)
    E = rng.uniform(-region.r_e, region.r_e, size=(samples, n))
    X = rng.uniform(-region.r_x, region.r_x, size=(samples, n))
    vals = condition_values(cand, env, error_system, E, X)
    extra = {
        "spectral_radius": spectral_radius(Ac),
        "residual": lyapunov_residual(Ac, P, Q),
        "Q": Q.tolist(),
        "Ac": Ac.tolist(),
        "Bc": Bc.tolist(),
        "monte_carlo_samples": samples,
        "monte_carlo_max": {c: float(np.max(vals[c])) for c in CONDITIONS},
    }
    return Certificate(candidate=cand, envelope=env, region=region, verdict="verified",
                       method="lyapunov_equation", model_hash=model_hash, extra=extra,
                       seconds=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Cascade
# ---------------------------------------------------------------------------


def plant_stability_evidence(model: SystemModel, radius: float = 1.0, directions: int = 16,
                             steps: int = 2000, decay: float = 1e-3) -> dict:
    """Evidence that the noise-free plant's origin is asymptotically stable.

    Linear plants get an eigenvalue check. For nonlinear plants stability is
    an assumption, backed by simulating from ``directions`` points on the
    circle/sphere of ``radius`` and requiring the norm to shrink by ``decay``.
    """
    if model.linear is not None:
        rho = spectral_radius(model.linear[0])
        return {"kind": "eigenvalue", "spectral_radius": rho, "passed": bool(rho < 1.0)}
    rng = make_rng(0)
    D = rng.standard_normal((directions, model.n))
    X = radius * D / np.linalg.norm(D, axis=1, keepdims=True)
    x = X.T.copy()
    ok = True
    try:
        for _ in range(steps):
            x = np.asarray(model.f(x), dtype=float)
    except NumericalError:
        ok = False
    final = np.linalg.norm(x, axis=0) if ok else np.full(directions, np.inf)
    passed = bool(ok and np.all(final <= decay * radius))
    return {"kind": "assumption_with_decay_check", "radius": radius, "directions": directions,
            "steps": steps, "max_final_norm": float(np.max(final)), "decay": decay,
            "passed": passed}


def certify_cascade(evidence: Optional[dict], certificate: Optional[Certificate]) -> dict:
    """Combine plant stability and an ISS certificate of the error system.

    An asymptotically stable plant feeding an ISS error system gives an
    asymptotically stable cascade. The report says ``certified`` only when
    both legs are present and pass.
    """
    reasons = []
    if evidence is None:
        reasons.append("no plant stability evidence")
    elif not evidence.get("passed"):
        reasons.append(f"plant stability check failed ({evidence.get('kind')})")
    if certificate is None:
        reasons.append("no error-system certificate")
    elif not certificate.verified:
        reasons.append(f"error-system certificate verdict is {certificate.verdict}")
    status = "certified" if not reasons else "not certified"
    chain = []
    if evidence is not None:
        chain.append({"leg": "plant", **evidence})
    if certificate is not None:
        chain.append({"leg": "error_system", "method": certificate.method,
                      "verdict": certificate.verdict, "model_hash": certificate.model_hash})
    return {"status": status, "conclusion": (
        "origin of the plant and estimation-error cascade is asymptotically stable"
        if status == "certified" else None), "reasons": reasons, "evidence": chain}
