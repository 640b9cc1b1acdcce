"""Feature predictor: maps one modality's prompt outputs to the other
modality's class-token embedding.

Three affine layers; the first two are followed by layer normalization
and GELU, the third is a plain affine map. Prompt outputs are mean-pooled
over the prompt axis by default (keeping every layer at encoder width);
concatenation is available as an alternative aggregation. A CLS-based
variant applies the same MLP to the class-token embedding instead, for
the prompt-free ablation path.
"""

from __future__ import annotations

import logging

import numpy as np

from .autodiff import Tensor, reduce_mean, reshape
from .errors import ConfigurationError, ShapeError, StatisticsError
from .nn import ParamStore, gelu, layer_norm, linear

logger = logging.getLogger(__name__)

POOLING_MODES = ("mean", "concat")


class FeaturePredictor:
    """MLP d_in -> d -> d -> d with layer norm + GELU after layers 1 and 2."""

    def __init__(self, in_dim: int, width: int, rng: np.random.Generator, prefix: str = ""):
        self.in_dim = in_dim
        self.width = width
        self.store = ParamStore(prefix)
        std1 = 1.0 / np.sqrt(in_dim)
        std = 1.0 / np.sqrt(width)
        self.store.add("l1.w", rng.normal(0.0, std1, (in_dim, width)), "predictor")
        self.store.add("l1.b", np.zeros(width), "predictor")
        self.store.add("ln1.gain", np.ones(width), "predictor")
        self.store.add("ln1.bias", np.zeros(width), "predictor")
        self.store.add("l2.w", rng.normal(0.0, std, (width, width)), "predictor")
        self.store.add("l2.b", np.zeros(width), "predictor")
        self.store.add("ln2.gain", np.ones(width), "predictor")
        self.store.add("ln2.bias", np.zeros(width), "predictor")
        self.store.add("l3.w", rng.normal(0.0, std, (width, width)), "predictor")
        self.store.add("l3.b", np.zeros(width), "predictor")

    def named_parameters(self):
        return list(self.store.items())

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"predictor expects last dim {self.in_dim}, got {x.shape}")
        h = linear(x, self.store["l1.w"], self.store["l1.b"])
        h = gelu(layer_norm(h, self.store["ln1.gain"], self.store["ln1.bias"]))
        h = linear(h, self.store["l2.w"], self.store["l2.b"])
        h = gelu(layer_norm(h, self.store["ln2.gain"], self.store["ln2.bias"]))
        return linear(h, self.store["l3.w"], self.store["l3.b"])


def pool_prompts(prompts_out: Tensor, pooling: str = "mean") -> Tensor:
    """Aggregate (batch, prompt_len, d) prompt outputs into predictor input."""
    if pooling not in POOLING_MODES:
        raise ConfigurationError(f"pooling must be one of {POOLING_MODES}")
    if prompts_out.ndim != 3 or prompts_out.shape[1] < 1:
        raise ConfigurationError(
            "prompt-based prediction needs prompt_len >= 1; "
            "use the CLS-based predictor variant when prompts are disabled"
        )
    b, p, d = prompts_out.shape
    if pooling == "mean":
        return reduce_mean(prompts_out, axis=1)
    return reshape(prompts_out, (b, p * d))


def predict_missing(prompts_out: Tensor, weights: FeaturePredictor, pooling: str = "mean") -> Tensor:
    """Predict the missing modality's class-token embedding from prompt outputs."""
    return weights.forward(pool_prompts(prompts_out, pooling))


def predict_from_cls(cls: Tensor, weights: FeaturePredictor) -> Tensor:
    """Ablation path: predict from the class-token embedding instead of prompts."""
    return weights.forward(cls)


def prediction_similarity(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Mean cosine similarity between predicted and true embedding rows.

    Rows where either side has zero norm are excluded (counted and
    logged); raises if nothing remains.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape or predicted.ndim != 2:
        raise ShapeError(f"expected matching (batch, d) arrays, got {predicted.shape} and {truth.shape}")
    np_norm = np.linalg.norm(predicted, axis=1)
    nt_norm = np.linalg.norm(truth, axis=1)
    valid = (np_norm > 0) & (nt_norm > 0)
    excluded = int((~valid).sum())
    if excluded:
        logger.warning("prediction_similarity: excluded %d zero-norm rows", excluded)
    if not valid.any():
        raise StatisticsError("prediction_similarity: no rows with nonzero norm")
    cos = (predicted[valid] * truth[valid]).sum(axis=1) / (np_norm[valid] * nt_norm[valid])
    return float(cos.mean())
