"""Observation operators ``H`` and their adjoints."""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np


class ObservationOperator(ABC):
    """Maps a state to observation space; ``adjoint_apply`` is ``(dH/dy)^T w``."""

    n_obs: int

    @abstractmethod
    def apply(self, y: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def adjoint_apply(self, y: np.ndarray, w: np.ndarray) -> np.ndarray: ...


class LinearObservation(ObservationOperator):
    """``H(y) = M y`` for a constant matrix ``M``."""

    def __init__(self, matrix):
        self.matrix = np.array(matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise ValueError("observation matrix must be 2-D")
        self.n_obs, self.dim = self.matrix.shape

    def apply(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim,):
            raise ValueError(f"state has shape {y.shape}, operator expects ({self.dim},)")
        return self.matrix @ y

    def adjoint_apply(self, y, w):
        return self.matrix.T @ np.asarray(w, dtype=float)


class RhsFunctional(ObservationOperator):
    """Scalar ``H(y) = c . f(y)``: a weighted sum of the model's time derivative."""

    n_obs = 1

    def __init__(self, model, weights):
        self.model = model
        self.weights = np.array(weights, dtype=float)
        if self.weights.shape != (model.dim,):
            raise ValueError(f"weights have shape {self.weights.shape}, model dim is {model.dim}")

    def apply(self, y):
        return np.array([self.weights @ self.model.f(y)])

    def adjoint_apply(self, y, w):
        return self.model.jac_T_vec(y, float(np.asarray(w).ravel()[0]) * self.weights)
