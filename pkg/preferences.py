"""
Utility functions on the positive half-line and their conjugates.

Only the log and CRRA families are supported. Both satisfy the Inada
conditions and have asymptotic elasticity below one, and every map below is
closed-form, so duality identities can be checked to machine precision.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from errors import DomainError, InputError

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

LOG = "log"
CRRA = "crra"

DEFAULT_KAPPA = 0.5
DEFAULT_RATE = 0.5


def _positive(arg, name):
    arr = np.asarray(arg, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{name} needs a strictly positive argument")
    return arr


def _out(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


@dataclass(frozen=True)
class UtilitySpec:
    """
    Utility family tag and risk aversion.

    `offset` shifts U (and hence V) by a constant; it is zero except for CRRA
    members of a perturbation schedule that converges to log utility.
    """
    family: str = LOG
    gamma: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.family not in (LOG, CRRA):
            raise InputError(f"unknown utility family '{self.family}'")
        if self.family == CRRA and (not self.gamma > 0 or self.gamma == 1.0):
            raise InputError(f"crra risk aversion must be positive and differ from 1, got {self.gamma}")

    @classmethod
    def parse(cls, text):
        """'log' or 'crra:<gamma>'."""
        text = str(text).strip().lower()
        if text == LOG:
            return cls(LOG, 1.0)
        if text.startswith(CRRA + ":"):
            try:
                gamma = float(text.split(":", 1)[1])
            except ValueError as e:
                raise InputError(f"cannot parse risk aversion in '{text}'") from e
            return cls(CRRA, gamma)
        raise InputError(f"utility must be 'log' or 'crra:<gamma>', got '{text}'")

    @property
    def label(self):
        if self.family == LOG:
            return LOG
        return f"crra:{self.gamma:g}"

    def to_dict(self):
        return {"family": self.family, "gamma": self.gamma, "offset": self.offset}

    def U(self, x):
        x = _positive(x, "U")
        if self.family == LOG:
            return _out(np.log(x) + self.offset)
        g = self.gamma
        return _out(x ** (1.0 - g) / (1.0 - g) + self.offset)

    def dU(self, x):
        x = _positive(x, "U'")
        if self.family == LOG:
            return _out(1.0 / x)
        return _out(x ** (-self.gamma))

    def d2U(self, x):
        x = _positive(x, "U''")
        if self.family == LOG:
            return _out(-1.0 / x ** 2)
        return _out(-self.gamma * x ** (-self.gamma - 1.0))

    def I(self, y):
        """Inverse marginal utility (U')^-1."""
        y = _positive(y, "I")
        if self.family == LOG:
            return _out(1.0 / y)
        return _out(y ** (-1.0 / self.gamma))

    def V(self, y):
        y = _positive(y, "V")
        if self.family == LOG:
            return _out(-np.log(y) - 1.0 + self.offset)
        g = self.gamma
        return _out(g / (1.0 - g) * y ** ((g - 1.0) / g) + self.offset)

    def dV(self, y):
        return _out(-np.asarray(self.I(y)))

    def d2V(self, y):
        y = _positive(y, "V''")
        if self.family == LOG:
            return _out(1.0 / y ** 2)
        g = self.gamma
        return _out(y ** (-1.0 / g - 1.0) / g)


def evaluate(spec, which, arg):
    """Evaluate one of U, U', V, V', I at arg > 0."""
    table = {"U": spec.U, "U'": spec.dU, "V": spec.V, "V'": spec.dV, "I": spec.I}
    if which not in table:
        raise InputError(f"unknown map '{which}', expected one of {sorted(table)}")
    return table[which](arg)


def fenchel_check(spec, xs, ys):
    """max over the grid of U(x) - V(y) - xy; never positive for a conjugate pair."""
    xs = _positive(xs, "fenchel x-grid").ravel()
    ys = _positive(ys, "fenchel y-grid").ravel()
    gap = spec.U(xs)[:, None] - spec.V(ys)[None, :] - np.outer(xs, ys)
    return float(gap.max())


def asymptotic_elasticity(spec):
    """limsup x U'(x) / U(x) as x grows."""
    return 0.0 if spec.family == LOG else 1.0 - spec.gamma


def perturbed_family(spec, n, kappa=DEFAULT_KAPPA, rate=DEFAULT_RATE):
    """
    n-th member of the CRRA schedule gamma_n = gamma (1 + rate^n kappa).

    For a log base the members are normalized, (x^(1-g) - 1)/(1-g), so that
    they converge to ln x pointwise.
    """
    if n < 0:
        raise DomainError("schedule index must be non-negative")
    if kappa == 0:
        return spec
    gamma_n = spec.gamma * (1.0 + rate ** n * kappa)
    if gamma_n == 1.0:
        return UtilitySpec(LOG, 1.0, spec.offset)
    if spec.family == LOG:
        return UtilitySpec(CRRA, gamma_n, spec.offset - 1.0 / (1.0 - gamma_n))
    return replace(spec, gamma=gamma_n)
