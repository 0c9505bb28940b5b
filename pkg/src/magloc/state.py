from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .so3 import canonical_rotvec, exp_so3


def _vec3(x) -> np.ndarray:
    a = np.array(x, dtype=float).reshape(3)
    return a


@dataclass(frozen=True, eq=False)
class State:
    """Robot state: position (m), axis-angle orientation (rad), world-frame
    linear velocity (m/s) and angular velocity (rad/s) at time ``t``."""

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "p", _vec3(self.p))
        object.__setattr__(self, "phi", canonical_rotvec(_vec3(self.phi)))
        object.__setattr__(self, "v", _vec3(self.v))
        object.__setattr__(self, "omega", _vec3(self.omega))
        object.__setattr__(self, "t", float(self.t))
        if not all(np.all(np.isfinite(a)) for a in (self.p, self.phi, self.v, self.omega)) or not np.isfinite(self.t):
            raise InvalidInputError("state must be finite")

    @property
    def R(self) -> np.ndarray:
        return exp_so3(self.phi)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.phi, self.v, self.omega])

    @classmethod
    def from_vector(cls, x, t: float = 0.0) -> "State":
        x = np.asarray(x, dtype=float)
        return cls(x[0:3], x[3:6], x[6:9], x[9:12], t)

    def __eq__(self, other):
        if not isinstance(other, State):
            return NotImplemented
        return self.t == other.t and np.array_equal(self.as_vector(), other.as_vector())

    def __repr__(self):
        return "State(t=%.4f, p=%s, phi=%s, v=%s, omega=%s)" % (
            self.t, np.round(self.p, 4), np.round(self.phi, 4), np.round(self.v, 4), np.round(self.omega, 4))


@dataclass(frozen=True, eq=False)
class ControlSample:
    """Sampled motion increment: acceleration (m/s^2) and angular velocity (rad/s)."""

    a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "a", _vec3(self.a))
        object.__setattr__(self, "omega", _vec3(self.omega))
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.omega))):
            raise InvalidInputError("control sample must be finite")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.a, self.omega])

    @classmethod
    def from_vector(cls, tau) -> "ControlSample":
        tau = np.asarray(tau, dtype=float)
        return cls(tau[:3], tau[3:6])
