"""Input-validation helpers shared by the estimator classes."""

from __future__ import annotations

import numpy as np


def check_windows(X, name="X", channels=None, min_timesteps=1, dtype=np.float32):
    """Validate an (n, channels, timesteps) window stack and return it as a
    contiguous float array of the requested dtype."""
    X = np.asarray(X)
    if X.ndim != 3:
        raise ValueError(
            f"{name} must be a 3d array (n_windows, channels, timesteps), "
            f"got shape {X.shape}"
        )
    if X.shape[0] == 0:
        raise ValueError(f"{name} holds zero windows")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(
            f"{name} has {X.shape[1]} channels, expected {channels}"
        )
    if X.shape[2] < min_timesteps:
        raise ValueError(
            f"{name} windows have {X.shape[2]} timesteps, need >= {min_timesteps}"
        )
    X = np.ascontiguousarray(X, dtype=dtype)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_paired(X, P, x_name="X", p_name="P"):
    if X.shape[0] != P.shape[0]:
        raise ValueError(
            f"{x_name} and {p_name} must pair up: {X.shape[0]} vs {P.shape[0]} windows"
        )
    if X.shape[2] != P.shape[2]:
        raise ValueError(
            f"{x_name} and {p_name} must share the time axis: "
            f"{X.shape[2]} vs {P.shape[2]} timesteps"
        )


def check_labels(y, n, name="y"):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"{name} must be a 1d array of length {n}, got shape {y.shape}")
    return y


def check_embeddings(Z, dim=None, name="Z"):
    Z = np.asarray(Z, dtype=np.float32)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty (n, d) array, got shape {Z.shape}")
    if dim is not None and Z.shape[1] != dim:
        raise ValueError(f"{name} has dimension {Z.shape[1]}, expected {dim}")
    return Z


def check_fitted(estimator, attribute):
    if getattr(estimator, attribute, None) is None:
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
