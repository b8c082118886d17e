"""Model parameters, derived scalars and standing-hypothesis checks.

Everything downstream (annuity weights, feedback policy, simulation, oracles)
reads from a single immutable :class:`ModelConfig`. All rates are per year and
time is measured in years.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, HypothesisViolated, SingularSigma

# Reject volatility matrices with condition number above this as numerically
# singular: kappa would be garbage long before the solve actually fails.
_MAX_SIGMA_COND = 1e12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Delay kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DelayKernel:
    """Weight function on [-d, 0] feeding past income into current growth.

    Kinds:
      * ``zero``     -- identically 0 (no delay channel).
      * ``constant`` -- constant ``level`` on the whole window.
      * ``samples``  -- linear interpolation of (zeta, value) pairs.
      * ``bump``     -- a narrow triangular bump of total integral ``mass``
        centered at ``center``; stands in for a point mass at a single lag.
        If ``width`` is None it defaults to four grid cells at sampling time,
        and the sampled values are renormalized so the grid trapezoid integral
        equals ``mass`` exactly.
    """

    kind: str
    level: float = 0.0
    center: float = 0.0
    width: Optional[float] = None
    mass: float = 0.0
    zgrid: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "samples", "bump"):
            raise ConfigError(f"unknown delay kernel kind {self.kind!r}")
        if self.kind == "samples":
            z = np.asarray(self.zgrid, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if z.ndim != 1 or z.shape != v.shape or z.size < 2:
                raise ConfigError("samples kernel needs matching 1-d zeta/value arrays")
            if np.any(np.diff(z) <= 0):
                raise ConfigError("samples kernel zeta grid must be strictly increasing")
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(v))):
                raise ConfigError("samples kernel contains non-finite entries")
            object.__setattr__(self, "zgrid", _readonly(z))
            object.__setattr__(self, "values", _readonly(v))
        if self.kind == "bump" and self.width is not None and self.width <= 0:
            raise ConfigError("bump width must be positive")

    @classmethod
    def zero(cls) -> "DelayKernel":
        return cls(kind="zero")

    @classmethod
    def constant(cls, level: float) -> "DelayKernel":
        return cls(kind="constant", level=float(level))

    @classmethod
    def from_samples(cls, zgrid: Sequence[float], values: Sequence[float]) -> "DelayKernel":
        return cls(kind="samples", zgrid=np.asarray(zgrid, float), values=np.asarray(values, float))

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "DelayKernel":
        """Load a two-column (zeta, phi) CSV, header row optional."""
        zs, vs = [], []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    z, v = float(row[0]), float(row[1])
                except ValueError:
                    continue  # header row
                zs.append(z)
                vs.append(v)
        return cls.from_samples(zs, vs)

    @classmethod
    def bump(cls, center: float, mass: float, width: Optional[float] = None) -> "DelayKernel":
        return cls(kind="bump", center=float(center), mass=float(mass),
                   width=None if width is None else float(width))

    def __call__(self, zeta):
        """Evaluate at zeta in [-d, 0] (vectorized)."""
        z = np.asarray(zeta, dtype=float)
        if self.kind == "zero":
            out = np.zeros_like(z)
        elif self.kind == "constant":
            out = np.full_like(z, self.level)
        elif self.kind == "samples":
            out = np.interp(z, self.zgrid, self.values)
        else:  # bump; nominal triangular shape, renormalized on grids
            w = self.width if self.width is not None else 0.0
            if w <= 0:
                out = np.zeros_like(z)
            else:
                h = 2.0 * self.mass / w
                out = np.maximum(0.0, h * (1.0 - np.abs(z - self.center) / (0.5 * w)))
        return out if out.ndim else float(out)

    def on_grid(self, zeta_grid: np.ndarray, dz: float) -> np.ndarray:
        """Sample onto a uniform lag grid.

        For the bump kind the width defaults to 4 grid cells and the sampled
        values are renormalized so the trapezoid integral equals ``mass``.
        """
        z = np.asarray(zeta_grid, dtype=float)
        if self.kind == "bump":
            w = self.width if self.width is not None else 4.0 * dz
            nominal = DelayKernel(kind="bump", center=self.center, mass=self.mass, width=w)
            vals = np.asarray(nominal(z), dtype=float)
            total = np.trapezoid(vals, dx=dz)
            if self.mass != 0.0:
                if total <= 0:
                    raise ConfigError(
                        "bump kernel does not resolve on this grid; refine dz or widen the bump"
                    )
                vals *= self.mass / total
            return vals
        return np.asarray(self(z), dtype=float)

    def l2_norm(self, d: float, n: int = 4096) -> float:
        """L2 norm on [-d, 0] under trapezoid quadrature."""
        z = np.linspace(-d, 0.0, n + 1)
        dz = d / n
        v = self.on_grid(z, dz)
        return math.sqrt(float(np.trapezoid(v * v, dx=dz)))


# ---------------------------------------------------------------------------
# Primitive parameter blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarketParams:
    """Riskless rate, risky-asset drift/volatility, and mortality intensity."""

    r: float
    mu: np.ndarray          # (n,)
    sigma: np.ndarray       # (n, n), invertible
    delta: float

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim == 0:
            sigma = sigma.reshape(1, 1)
        n = mu.shape[0]
        if n < 1:
            raise ConfigError("need at least one risky asset")
        if sigma.shape != (n, n):
            raise ConfigError(f"sigma must be {n}x{n}, got {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ConfigError("mu/sigma contain non-finite entries")
        cond = np.linalg.cond(sigma)
        if not np.isfinite(cond) or cond > _MAX_SIGMA_COND:
            raise SingularSigma(f"sigma condition number {cond:.3e} exceeds {_MAX_SIGMA_COND:.0e}")
        if self.delta < 0:
            raise ConfigError("mortality intensity delta must be >= 0")
        object.__setattr__(self, "mu", _readonly(mu))
        object.__setattr__(self, "sigma", _readonly(sigma))

    @property
    def n(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class IncomeParams:
    """Labor income dynamics: drift, market exposure, delay window, retirement."""

    mu_y: float
    sigma_y: np.ndarray     # (n,)
    d: float
    tau_R: float
    phi: DelayKernel

    def __post_init__(self):
        sy = np.atleast_1d(np.asarray(self.sigma_y, dtype=float))
        if not np.all(np.isfinite(sy)):
            raise ConfigError("sigma_y contains non-finite entries")
        if self.d <= 0:
            raise ConfigError("delay window d must be > 0")
        if self.tau_R <= 0:
            raise ConfigError("retirement time tau_R must be > 0")
        if not math.isfinite(self.phi.l2_norm(self.d)):
            raise ConfigError("phi is not square-integrable on [-d, 0]")
        object.__setattr__(self, "sigma_y", _readonly(sy))


@dataclass(frozen=True)
class PreferenceParams:
    """CRRA preferences with bequest and a post-retirement consumption weight.

    K = 1 is accepted as the degenerate no-switch weight (it makes the
    consumption scale continuous across retirement); K < 1 is rejected.
    """

    gamma: float
    rho: float
    k: float
    K: float

    def __post_init__(self):
        if self.gamma <= 0 or self.gamma == 1.0:
            raise ConfigError("gamma must be positive and != 1")
        if self.rho <= 0:
            raise ConfigError("rho must be > 0")
        if self.k <= 0:
            raise ConfigError("bequest intensity k must be > 0")
        if self.K < 1:
            raise ConfigError("post-retirement consumption weight K must be >= 1")


# ---------------------------------------------------------------------------
# Derived scalars
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DerivedScalars:
    """Scalars every closed form reads.

    kappa    market price of risk, sigma^-1 (mu - r 1)
    beta     effective income discount rate, r + delta - mu_y + sigma_y' kappa
    b        1 - 1/gamma
    nu       Merton denominator scalar (finite-value condition is nu > 0)
    eta      pre-retirement annuity scalar, (1 + delta k^-b) nu
    eta_hat  post-retirement annuity scalar, (K^-b + delta k^-b) nu
    """

    kappa: np.ndarray
    beta: float
    b: float
    nu: float
    eta: float
    eta_hat: float

    def __post_init__(self):
        object.__setattr__(self, "kappa", _readonly(np.atleast_1d(self.kappa)))

    @property
    def kappa_sq(self) -> float:
        return float(self.kappa @ self.kappa)


def derive_scalars(market: MarketParams, income: IncomeParams,
                   prefs: PreferenceParams) -> DerivedScalars:
    """Compute the six derived scalars from the primitive blocks.

    Raises:
        SingularSigma: if the linear solve for kappa fails.
        ConfigError: if sigma_y length does not match the asset count.
    """
    excess = market.mu - market.r * np.ones(market.n)
    try:
        kappa = np.linalg.solve(market.sigma, excess)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - cond gate first
        raise SingularSigma(str(exc)) from exc
    resid = np.linalg.norm(market.sigma @ kappa - excess)
    scale = max(np.linalg.norm(excess), 1.0)
    if resid > 1e-12 * scale:
        raise SingularSigma(f"kappa solve residual {resid:.3e} too large")
    if income.sigma_y.shape[0] != market.n:
        raise ConfigError("sigma_y length must equal the number of risky assets")

    gamma = prefs.gamma
    b = 1.0 - 1.0 / gamma
    beta = market.r + market.delta - income.mu_y + float(income.sigma_y @ kappa)
    k2 = float(kappa @ kappa)
    denom = prefs.rho + market.delta - (1.0 - gamma) * (
        market.r + market.delta + k2 / (2.0 * gamma)
    )
    # nu is reported with the sign of its denominator; downstream evaluation
    # of value functions refuses to run unless nu > 0 (validate_hypotheses).
    nu = math.inf if denom == 0.0 else gamma / denom
    kb = prefs.k ** (-b)
    eta = (1.0 + market.delta * kb) * nu
    eta_hat = (prefs.K ** (-b) + market.delta * kb) * nu
    return DerivedScalars(kappa=kappa, beta=beta, b=b, nu=nu, eta=eta, eta_hat=eta_hat)


# ---------------------------------------------------------------------------
# Model configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Immutable bundle of all model parameters plus derived scalars."""

    market: MarketParams
    income: IncomeParams
    prefs: PreferenceParams
    derived: DerivedScalars = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "derived", derive_scalars(self.market, self.income, self.prefs))

    @property
    def n(self) -> int:
        return self.market.n

    @property
    def r_plus_delta(self) -> float:
        return self.market.r + self.market.delta

    @property
    def tau_R(self) -> float:
        return self.income.tau_R

    def to_dict(self) -> dict:
        phi = self.income.phi
        phi_d: dict = {"kind": phi.kind}
        if phi.kind == "constant":
            phi_d["level"] = phi.level
        elif phi.kind == "samples":
            phi_d["zeta"] = list(phi.zgrid)
            phi_d["values"] = list(phi.values)
        elif phi.kind == "bump":
            phi_d.update(center=phi.center, mass=phi.mass)
            if phi.width is not None:
                phi_d["width"] = phi.width
        return {
            "market": {
                "r": self.market.r,
                "mu": list(self.market.mu),
                "sigma": [list(row) for row in self.market.sigma],
                "delta": self.market.delta,
            },
            "income": {
                "mu_y": self.income.mu_y,
                "sigma_y": list(self.income.sigma_y),
                "d": self.income.d,
                "tau_R": self.income.tau_R,
                "phi": phi_d,
            },
            "preferences": {
                "gamma": self.prefs.gamma,
                "rho": self.prefs.rho,
                "k": self.prefs.k,
                "K": self.prefs.K,
            },
        }

    @classmethod
    def from_dict(cls, data: dict, base_dir: Optional[Path] = None) -> "ModelConfig":
        try:
            m = data["market"]
            i = data["income"]
            p = data["preferences"]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"config missing section: {exc}") from exc
        phi_spec = i.get("phi", {"kind": "zero"})
        phi = _kernel_from_spec(phi_spec, base_dir)
        try:
            market = MarketParams(r=float(m["r"]), mu=np.asarray(m["mu"], float),
                                  sigma=np.asarray(m["sigma"], float), delta=float(m["delta"]))
            income = IncomeParams(mu_y=float(i["mu_y"]), sigma_y=np.asarray(i["sigma_y"], float),
                                  d=float(i["d"]), tau_R=float(i["tau_R"]), phi=phi)
            prefs = PreferenceParams(gamma=float(p["gamma"]), rho=float(p["rho"]),
                                     k=float(p["k"]), K=float(p["K"]))
        except KeyError as exc:
            raise ConfigError(f"config missing key: {exc}") from exc
        return cls(market=market, income=income, prefs=prefs)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ModelConfig":
        """Load from JSON or TOML, chosen by suffix (.json / .toml)."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        if path.suffix.lower() == ".toml":
            try:
                import tomllib  # py311+
            except ModuleNotFoundError:
                import tomli as tomllib
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        elif path.suffix.lower() == ".json":
            with open(path) as fh:
                data = json.load(fh)
        else:
            raise ConfigError(f"unsupported config suffix {path.suffix!r} (use .json or .toml)")
        return cls.from_dict(data, base_dir=path.parent)


def _kernel_from_spec(spec, base_dir: Optional[Path]) -> DelayKernel:
    if isinstance(spec, DelayKernel):
        return spec
    if not isinstance(spec, dict):
        raise ConfigError("phi spec must be a table/object")
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return DelayKernel.zero()
    if kind == "constant":
        return DelayKernel.constant(spec["level"])
    if kind == "samples":
        if "csv" in spec:
            p = Path(spec["csv"])
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            return DelayKernel.from_csv(p)
        return DelayKernel.from_samples(spec["zeta"], spec["values"])
    if kind == "bump":
        return DelayKernel.bump(spec["center"], spec["mass"], spec.get("width"))
    raise ConfigError(f"unknown phi kind {kind!r}")


# ---------------------------------------------------------------------------
# Hypothesis validation and the time factors f, F
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of the standing-hypothesis check; callers decide whether to abort."""

    ok: bool
    nu: float
    denominator: float
    beta: float
    notes: tuple

    def __str__(self):
        status = "PASS" if self.ok else "FAIL"
        lines = [f"hypothesis check: {status} (nu = {self.nu:.6g}, denominator = {self.denominator:.6g})"]
        lines += [f"  note: {n}" for n in self.notes]
        return "\n".join(lines)


def validate_hypotheses(cfg: ModelConfig) -> ValidationReport:
    """Check the finiteness condition; report (never reject) the sign of beta."""
    gamma = cfg.prefs.gamma
    k2 = cfg.derived.kappa_sq
    denom = cfg.prefs.rho + cfg.market.delta - (1.0 - gamma) * (
        cfg.market.r + cfg.market.delta + k2 / (2.0 * gamma)
    )
    ok = denom > 0.0
    notes = []
    if not ok:
        notes.append("finiteness condition fails: value functions are not defined (nu <= 0)")
    if cfg.derived.beta <= 0:
        notes.append(f"beta = {cfg.derived.beta:.6g} <= 0: accepted, no sign assumption is needed")
    return ValidationReport(ok=ok, nu=cfg.derived.nu, denominator=denom,
                            beta=cfg.derived.beta, notes=tuple(notes))


def require_hypotheses(cfg: ModelConfig) -> None:
    rep = validate_hypotheses(cfg)
    if not rep.ok:
        raise HypothesisViolated(str(rep))


def f_factor(cfg: ModelConfig, t):
    """Blended annuity scalar f(t) = (eta_hat - eta) exp(-(tau_R - t)^+ / nu) + eta.

    Continuous on [0, inf), equal to eta_hat for t >= tau_R.
    """
    ds = cfg.derived
    if not (ds.nu > 0) or not math.isfinite(ds.nu):
        raise HypothesisViolated("f(t) requires nu > 0")
    tt = np.asarray(t, dtype=float)
    rem = np.maximum(cfg.tau_R - tt, 0.0)
    out = (ds.eta_hat - ds.eta) * np.exp(-rem / ds.nu) + ds.eta
    return out if out.ndim else float(out)


def F_factor(cfg: ModelConfig, t):
    """Discounted factor F(t) = exp(-(rho + delta) t / gamma) f(t)."""
    tt = np.asarray(t, dtype=float)
    disc = np.exp(-(cfg.prefs.rho + cfg.market.delta) * tt / cfg.prefs.gamma)
    out = disc * f_factor(cfg, tt)
    return out if out.ndim else float(out)
