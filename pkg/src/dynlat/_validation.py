"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .errors import DomainError
from .model import HardwareSpec, NetworkSpec, preset_hardware, preset_network


def check_rates(X, n_blocks: int) -> np.ndarray:
    """Coerce ``X`` to an ``(n_samples, n_blocks)`` array of rates in [0, 1].

    A single column is broadcast as one uniform rate per sample.
    """
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] == 1 and n_blocks != 1:
        X = np.repeat(X, n_blocks, axis=1)
    if X.shape[1] != n_blocks:
        raise DomainError(f"X has {X.shape[1]} columns; expected 1 or {n_blocks}")
    if (X < 0).any() or (X > 1).any():
        raise DomainError("activation rates must lie in [0, 1]")
    return X


def resolve_hardware(hw) -> HardwareSpec:
    if isinstance(hw, HardwareSpec):
        return hw
    if isinstance(hw, str):
        return preset_hardware(hw)
    raise TypeError(f"hardware must be a preset name or HardwareSpec, got {type(hw).__name__}")


def resolve_network(net, input_resolution: int, s_net) -> NetworkSpec:
    if isinstance(net, NetworkSpec):
        spec = net
    elif isinstance(net, str):
        spec = preset_network(net, input_resolution)
    else:
        raise TypeError(f"network must be a preset name or NetworkSpec, got {type(net).__name__}")
    if s_net is not None:
        spec = spec.with_s_net(s_net)
    return spec
