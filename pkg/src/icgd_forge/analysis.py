"""Closed-form radii, error coefficients, the epsilon budget, and trace checks.

Notation follows the target-network module: B_v bounds every row and
column of every V_j in l2, B_x and B_y bound the data, P = max(sqrt K, sqrt d_y).

Two gradient-error totals are reported. The "sqrt(P)" one multiplies the
s-vector error by sqrt(P) * B_r; the "sound" one multiplies it by G_p, a true
bound on ||p̄(j-1)||_2 (B_x for the input layer, sqrt(K)(B_r + eps_r)
afterwards). The budget uses the sound one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import relu_approx
from .activation import ActivationSpec
from .network import Dataset, DomainBox, NetworkParams, NetworkShape, exact_gradient, loss, sensitivities


class BudgetInfeasible(RuntimeError):
    """Raised when meeting a tolerance would need more segments or heads than allowed."""

    def __init__(self, message: str, binding: str):
        super().__init__(message)
        self.binding = binding


def _geom(q: float, terms: int) -> float:
    """sum_{l=0}^{terms-1} q^l (0 when terms <= 0)."""
    return float(sum(q**l for l in range(max(terms, 0))))


@dataclass(frozen=True)
class RadiiReport:
    N: int
    K: int
    d_y: int
    B_x: float
    B_y: float
    B_v: float
    P: float
    ladder: tuple  # B_r^0 .. B_r^N
    preact: tuple  # T_1 .. T_N, the preactivation radii of each layer
    B_r: float
    B_rp: float
    B_l: float
    B_s: float
    E_r_layers: tuple  # E_r for each j = 1..N
    E_r: float
    q: float
    E_s_r_layers: tuple
    E_s_rp_layers: tuple
    E_s_l_layers: tuple
    E_s_r: float
    E_s_rp: float
    E_s_l: float
    G_p: float
    C_l: float
    C_r: float
    C_rp: float
    C_l_sound: float
    C_r_sound: float
    C_rp_sound: float
    R1: float
    R2: float
    R3: float
    eps_r: float = 0.0
    eps_rp: float = 0.0
    eps_l: float = 0.0
    L_r: float = 0.25
    L_rp: float = field(default=1.0 / (6.0 * math.sqrt(3.0)))
    L_l: float = 2.0

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    # -- error bounds with given tolerances plugged in --------------------

    def pbar_bound(self, j: int) -> float:
        """l2 bound on p̄(j) - p(j)."""
        return self.E_r_layers[j - 1] * self.eps_r

    def rpbar_bound(self) -> float:
        return self.eps_rp + self.L_rp * self.B_v * self.E_r * self.eps_r

    def g_bound(self) -> float:
        return self.eps_l + self.L_l * self.E_r * self.eps_r

    def sbar_bound(self, j: int) -> float:
        return self.E_s_r_layers[j - 1] * self.eps_r + self.E_s_rp_layers[j - 1] * self.eps_rp + self.E_s_l_layers[j - 1] * self.eps_l

    def s_error_max(self) -> float:
        return self.E_s_r * self.eps_r + self.E_s_rp * self.eps_rp + self.E_s_l * self.eps_l

    def grad_bound_sqrtp(self) -> float:
        return 0.5 * self.N * self.P * (self.s_error_max() * math.sqrt(self.P) * self.B_r + self.B_s * self.E_r * self.eps_r)

    def grad_bound(self) -> float:
        return 0.5 * self.N * self.P * (self.s_error_max() * self.G_p + self.B_s * self.E_r * self.eps_r)


def sound_ladder(act: ActivationSpec, shape: NetworkShape, B_x: float, B_v: float, eps_r: float = 0.0):
    """B_r^j with preactivation radii that bound |v . p̄(j-1)| for every row v in the box.

    T_1 = B_v B_x and T_j = B_v sqrt(K) (B_r^{j-1} + eps_r) for j >= 2.
    """
    ladder = [B_x]
    pre = []
    for j in range(1, shape.N + 1):
        T = B_v * B_x if j == 1 else B_v * math.sqrt(shape.K) * (ladder[-1] + eps_r)
        pre.append(T)
        ladder.append(act.max_abs_r(T))
    return ladder, pre


def width_free_ladder(act: ActivationSpec, N: int, B_x: float, B_v: float) -> list[float]:
    """The ladder B_r^j = max_{|t| <= B_v B_r^{j-1}} |r(t)| without the width factor (reported only)."""
    ladder = [B_x]
    for _ in range(N):
        ladder.append(act.max_abs_r(B_v * ladder[-1]))
    return ladder


def compute_radii(
    shape: NetworkShape,
    act: ActivationSpec,
    B_x: float,
    B_y: float,
    B_v: float,
    eps_r: float = 0.0,
    eps_rp: float = 0.0,
    eps_l: float = 0.0,
) -> RadiiReport:
    N, K, d_y = shape.N, shape.K, shape.d_y
    P = max(math.sqrt(K), math.sqrt(d_y))
    ladder, pre = sound_ladder(act, shape, B_x, B_v, eps_r)
    B_r = max(ladder[1:])
    R1 = max(1.0, B_v * max(B_x, math.sqrt(K) * (B_r + eps_r)))
    R2 = R1
    R3 = max(B_v * B_r, B_y, 1.0)
    B_rp = act.max_abs_rp(R2) + eps_rp
    a = math.sqrt(K) * act.L_r * B_v
    E_r_layers = tuple(_geom(a, j) * (math.sqrt(K) if j < N else math.sqrt(d_y)) for j in range(1, N + 1))
    E_r = max(E_r_layers)
    L_l = 2.0
    B_l = 2.0 * (B_r + E_r * eps_r + B_y) + eps_l
    q = B_rp * B_v * P
    B_s = max(q ** (N - j) * B_rp * B_l for j in range(1, N + 1))
    Esr, Esrp, Esl = [], [], []
    for j in range(1, N + 1):
        S = _geom(q, N - j)
        Esr.append(act.L_rp * E_r * P * B_s * B_v**2 * S + q ** (N - j) * (B_l * act.L_rp * B_v * E_r + B_rp * L_l * E_r))
        Esrp.append(P * B_s * B_v * S + q ** (N - j) * B_l)
        Esl.append(q ** (N - j) * B_rp)
    E_s_r, E_s_rp, E_s_l = max(Esr), max(Esrp), max(Esl)
    G_p = max(B_x, math.sqrt(K) * (B_r + eps_r))
    P32 = P**1.5
    vals = dict(
        C_l=N * P32 * B_r * E_s_l,
        C_r=N * P32 * B_r * E_s_r + N * P * B_s * E_r,
        C_rp=N * P32 * B_r * E_s_rp,
        C_l_sound=N * P * G_p * E_s_l,
        C_r_sound=N * P * G_p * E_s_r + N * P * B_s * E_r,
        C_rp_sound=N * P * G_p * E_s_rp,
    )
    for name, v in vals.items():
        if not math.isfinite(v):
            raise OverflowError(f"{name} overflowed for N={N}")
    return RadiiReport(
        N=N, K=K, d_y=d_y, B_x=B_x, B_y=B_y, B_v=B_v, P=P,
        ladder=tuple(ladder), preact=tuple(pre), B_r=B_r, B_rp=B_rp, B_l=B_l, B_s=B_s,
        E_r_layers=E_r_layers, E_r=E_r, q=q,
        E_s_r_layers=tuple(Esr), E_s_rp_layers=tuple(Esrp), E_s_l_layers=tuple(Esl),
        E_s_r=E_s_r, E_s_rp=E_s_rp, E_s_l=E_s_l, G_p=G_p,
        R1=R1, R2=R2, R3=R3, eps_r=eps_r, eps_rp=eps_rp, eps_l=eps_l,
        L_r=act.L_r, L_rp=act.L_rp, L_l=L_l, **vals,
    )


@dataclass(frozen=True)
class Budget:
    eps_target: float
    eps_r: float
    eps_rp: float
    eps_l: float
    seg_r: int
    seg_rp: int
    f2_r: float
    f2_rp: float
    radii: RadiiReport
    split: str
    # the 2 eps / (3 C) split with the sqrt(P) constants, for the report
    two_thirds_eps_r: float
    two_thirds_eps_rp: float
    two_thirds_eps_l: float

    def total(self) -> float:
        """sum C_sound * eps over the three tolerances (the guaranteed gradient error is half of it)."""
        r = self.radii
        return r.C_r_sound * self.eps_r + r.C_rp_sound * self.eps_rp + r.C_l_sound * self.eps_l


def epsilon_budget(
    eps_target: float,
    shape: NetworkShape,
    act: ActivationSpec,
    B_x: float,
    B_y: float,
    B_v: float,
    seg_cap: int = 1000,
    split: str = "conservative",
    loss_exact: bool = True,
) -> Budget:
    """Per-function tolerances and segment counts for a target gradient error.

    ``split='conservative'`` sets eps_* = eps / (3 C_*); ``'two_thirds'`` uses
    2 eps / (3 C_*). Constants are the sound ones. Because they grow with
    the tolerances, they are evaluated at a first (larger) guess before the
    final tolerances are set.
    """
    if not eps_target > 0:
        raise ValueError("target error must be positive")
    factor = {"conservative": 1.0 / 3.0, "two_thirds": 2.0 / 3.0}[split]
    if math.isinf(eps_target):
        eps_r = eps_rp = math.inf
        radii = compute_radii(shape, act, B_x, B_y, B_v)
    else:
        # the constants grow with the tolerances: size them at eps = 0, then
        # re-size with the constants evaluated at that (larger) first guess
        first = compute_radii(shape, act, B_x, B_y, B_v)
        guess_r = factor * eps_target / first.C_r_sound
        guess_rp = factor * eps_target / first.C_rp_sound
        upper = compute_radii(shape, act, B_x, B_y, B_v, guess_r, guess_rp)
        eps_r = factor * eps_target / upper.C_r_sound
        eps_rp = factor * eps_target / upper.C_rp_sound
        radii = compute_radii(shape, act, B_x, B_y, B_v, eps_r, eps_rp)
    eps_l = 0.0 if loss_exact else (factor * eps_target / radii.C_l_sound)
    f2_r = relu_approx.estimate_max_second_derivative(act.r, radii.R1)
    f2_rp = relu_approx.estimate_max_second_derivative(act.rp, radii.R2)
    seg_r = relu_approx.segments_for_eps(radii.R1, f2_r, eps_r)
    seg_rp = relu_approx.segments_for_eps(radii.R2, f2_rp, eps_rp)
    for name, seg in (("eps_r", seg_r), ("eps_rp", seg_rp)):
        if seg > seg_cap:
            raise BudgetInfeasible(
                f"{name} needs {seg} segments, above the cap of {seg_cap}; raise the target error or the segment cap",
                name,
            )
    zero_tol = compute_radii(shape, act, B_x, B_y, B_v)
    return Budget(
        eps_target=eps_target, eps_r=eps_r, eps_rp=eps_rp, eps_l=eps_l, seg_r=seg_r, seg_rp=seg_rp,
        f2_r=f2_r, f2_rp=f2_rp, radii=radii, split=split,
        two_thirds_eps_r=2 * eps_target / (3 * zero_tol.C_r), two_thirds_eps_rp=2 * eps_target / (3 * zero_tol.C_rp),
        two_thirds_eps_l=2 * eps_target / (3 * zero_tol.C_l),
    )


# ---------------------------------------------------------------------------
# accumulation and convergence


def accumulation_envelope(eps: float, L_f: float, n: int, l: int) -> float:
    """L_f^{-1} (1 + n L_f)^l eps."""
    if not L_f > 0:
        raise ValueError("L_f must be positive")
    return (1.0 + n * L_f) ** l * eps / L_f


def estimate_gradient_lipschitz(
    shape: NetworkShape,
    data: Dataset,
    act: ActivationSpec,
    points,
    rng: np.random.Generator,
    n_dirs: int = 100,
    radius: float = 1e-3,
) -> float:
    """max over points w and random delta of ||grad(w + delta) - grad(w)|| / ||delta||."""
    best = 0.0
    for w in np.atleast_2d(points):
        g0 = exact_gradient(NetworkParams(shape, w), data, act)
        for _ in range(n_dirs):
            d = rng.normal(size=w.size)
            d *= radius / np.linalg.norm(d)
            g1 = exact_gradient(NetworkParams(shape, w + d), data, act)
            best = max(best, float(np.linalg.norm(g1 - g0) / radius))
    return best


def estimate_loss_lipschitz(shape: NetworkShape, data: Dataset, act: ActivationSpec, box: DomainBox, rng, samples: int = 200) -> float:
    """max gradient norm over random box points (the other reading of L_f, reported only)."""
    W = rng.uniform(-box.b, box.b, size=(samples, shape.n_params))
    return max(float(np.linalg.norm(exact_gradient(NetworkParams(shape, w), data, act))) for w in W)


def estimate_inf_loss(shape: NetworkShape, data: Dataset, act: ActivationSpec, box: DomainBox, rng, samples: int = 1000, extra=()) -> float:
    W = rng.uniform(-box.b, box.b, size=(samples, shape.n_params))
    vals = [loss(NetworkParams(shape, w), data, act) for w in W]
    vals += [loss(NetworkParams(shape, np.asarray(w)), data, act) for w in extra]
    return min(vals)


def gradient_mapping(shape: NetworkShape, data: Dataset, act: ActivationSpec, box: DomainBox, w: np.ndarray, eta: float) -> np.ndarray:
    g = exact_gradient(NetworkParams(shape, w), data, act)
    return (w - box.clip(w - eta * g)) / eta


@dataclass(frozen=True)
class ConvergenceResult:
    passed: bool
    lhs: float
    rhs: float
    margin: float
    f0: float
    f_inf: float
    L_f: float
    eta_le_Lf: bool
    eta_le_inv_Lf: bool


def convergence_check(
    shape: NetworkShape,
    data: Dataset,
    act: ActivationSpec,
    box: DomainBox,
    trajectory: np.ndarray,
    eta: float,
    eps: float,
    f_inf: float,
    L_f: float,
) -> ConvergenceResult:
    """min_l ||G(w̄^l)||^2 <= 8 (f(w̄^0) - inf f) / (eta L) + 10 eps^2 over a trajectory of L+1 points."""
    L = len(trajectory) - 1
    if L < 1:
        raise ValueError("need at least one step")
    Gs = [float(np.sum(gradient_mapping(shape, data, act, box, w, eta) ** 2)) for w in trajectory[:L]]
    f0 = loss(NetworkParams(shape, trajectory[0]), data, act)
    lhs = min(Gs)
    rhs = 8.0 * (f0 - f_inf) / (eta * L) + 10.0 * eps**2
    return ConvergenceResult(lhs <= rhs, lhs, rhs, rhs - lhs, f0, f_inf, L_f, eta <= L_f, eta * L_f <= 1.0)


# ---------------------------------------------------------------------------
# comparing a run against the oracle


@dataclass(frozen=True)
class BoundRow:
    quantity: str
    bound: float
    measured: float

    @property
    def ratio(self) -> float:
        if self.bound == 0.0:
            return 0.0 if self.measured == 0.0 else math.inf
        return self.measured / self.bound

    @property
    def ok(self) -> bool:
        return self.measured <= self.bound

    def to_dict(self) -> dict:
        return {"quantity": self.quantity, "bound": self.bound, "measured": self.measured, "ratio": self.ratio}


def oracle_intermediates(shape: NetworkShape, w: np.ndarray, data: Dataset, act: ActivationSpec):
    """Exact p(j), r'(j-1), u and s(j) at w for every token (test token last, with u = s = 0)."""
    params = NetworkParams(shape, w)
    full = Dataset(np.vstack([data.X, data.x_test]), np.vstack([data.Y, np.zeros(shape.d_y)]), data.x_test, data.B_x, max(data.B_y, 0.0))
    ps, rps, ss = sensitivities(params, full, act)
    u = 2.0 * (ps[-1] - full.Y)
    u[-1] = 0.0
    ss = [s.copy() for s in ss]
    for s in ss:
        s[-1] = 0.0
    return ps, rps, u, ss


def deviation_rows(layout, H_mid: np.ndarray, w: np.ndarray, w_after: np.ndarray, eta: float, data: Dataset,
                   act: ActivationSpec, radii: RadiiReport, label: str = "") -> list[BoundRow]:
    """Measured errors of one block's intermediates against the bounds in ``radii``.

    ``H_mid`` is the prompt after the s-layers (all scratch populated), ``w`` the
    carried parameters entering the block and ``w_after`` the w slot right after
    the update layer (before projection).
    """
    shape = layout.shape
    ps, rps, u, ss = oracle_intermediates(shape, w, data, act)
    rows: list[BoundRow] = []
    pre_max = 0.0
    for j in range(1, shape.N + 1):
        pb = H_mid[layout.pbar(j)].T
        rows.append(BoundRow(f"{label}pbar[{j}]", radii.pbar_bound(j), float(np.max(np.linalg.norm(pb - ps[j], axis=1)))))
        prev = H_mid[layout.pbar(j - 1)].T
        V = NetworkParams(shape, w).V(j)
        pre_max = max(pre_max, float(np.max(np.abs(prev @ V.T))))
    rows.append(BoundRow(f"{label}preact_radius", radii.R1, pre_max))
    rp_err = max(float(np.max(np.abs(H_mid[layout.rpbar(j)].T - rps[j - 1]))) for j in range(1, shape.N + 1))
    rows.append(BoundRow(f"{label}rpbar", radii.rpbar_bound(), rp_err))
    g = H_mid[layout.slot("g")].T
    rows.append(BoundRow(f"{label}g", radii.g_bound(), float(np.max(np.abs(g[:-1] - u[:-1])))))
    rows.append(BoundRow(f"{label}g_test_token", 0.0, float(np.max(np.abs(g[-1])))))
    s_abs = 0.0
    for j in range(1, shape.N + 1):
        sb = H_mid[layout.sbar(j)].T
        rows.append(BoundRow(f"{label}sbar[{j}]", radii.sbar_bound(j), float(np.max(np.abs(sb - ss[j - 1])))))
        s_abs = max(s_abs, float(np.max(np.abs(ss[j - 1]))))
    rows.append(BoundRow(f"{label}abs_s", radii.B_s, s_abs))
    grad_bar = (w - w_after) / eta if eta > 0 else np.zeros_like(w)
    grad = exact_gradient(NetworkParams(shape, w), data, act)
    err = float(np.linalg.norm(grad_bar - grad))
    rows.append(BoundRow(f"{label}grad", radii.grad_bound(), err))
    rows.append(BoundRow(f"{label}grad_sqrtp_bound", radii.grad_bound_sqrtp(), err))
    return rows
