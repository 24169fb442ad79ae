"""Scikit-learn style wrapper: activation rates in, network latency out."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_rates, resolve_hardware, resolve_network
from .latcost import static_block_latency
from .sched import network_latency, stem_head_latency


class LatencyPredictor(BaseEstimator):
    """Predict end-to-end latency of a spatially dynamic network.

    ``fit`` resolves the hardware and network and caches the static
    baseline; it takes no training data. ``X`` holds activation rates, one
    column per block, or a single uniform-rate column.

    Parameters
    ----------
    hardware : str or HardwareSpec
    network : str or NetworkSpec
    input_resolution : int
    s_net : sequence of int, optional
        Per-stage granularity; the network's default when omitted.
    maskers : bool
        Price the masker ops. Fully active blocks without maskers run dense.
    """

    def __init__(self, hardware="v100", network="resnet101", input_resolution=224,
                 s_net=None, maskers=True):
        self.hardware = hardware
        self.network = network
        self.input_resolution = input_resolution
        self.s_net = s_net
        self.maskers = maskers

    def fit(self, X=None, y=None):
        self.hardware_ = resolve_hardware(self.hardware)
        self.network_ = resolve_network(self.network, self.input_resolution, self.s_net)
        self.block_ids_ = self.network_.block_ids()
        self.n_features_in_ = len(self.block_ids_)
        self.stem_head_ = stem_head_latency(self.network_, self.hardware_)
        self.static_block_latency_ = np.array(
            [static_block_latency(b, self.hardware_) for b in self.network_.blocks()])
        self.static_latency_ = self.stem_head_ + float(self.static_block_latency_.sum())
        return self

    def transform(self, X) -> np.ndarray:
        """Per-block latency in seconds, shape ``(n_samples, n_blocks)``."""
        check_is_fitted(self, "network_")
        X = check_rates(X, self.n_features_in_)
        return np.array([network_latency(self.network_, row, self.hardware_,
                                         maskers=self.maskers).per_block for row in X])

    def predict(self, X) -> np.ndarray:
        """Network latency in seconds, shape ``(n_samples,)``."""
        return self.transform(X).sum(axis=1) + self.stem_head_

    def speedup(self, X) -> np.ndarray:
        """Fractional latency saving over the static network."""
        return 1.0 - self.predict(X) / self.static_latency_
