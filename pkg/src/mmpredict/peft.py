"""Parameter-efficient fine-tuning policies.

A policy decides which named parameters train; everything else stays
frozen (bitwise unchanged by the optimizer). Classifier heads, prompts,
and predictor parameters train under every policy. Freezing is applied
by masking gradients via the ``requires_grad`` flag, so a policy can be
swapped on a built model without rebuilding it.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import Tensor
from .errors import ConfigurationError

POLICY_KINDS = ("bitfit", "ln_tuning", "prefix", "adapter", "full", "frozen")

KNOWN_ROLES = frozenset(
    {"weight", "bias", "norm_gain", "norm_bias", "embedding", "head", "prompt", "predictor", "adapter", "prefix"}
)
ALWAYS_TRAINABLE_ROLES = frozenset({"head", "prompt", "predictor"})

_POLICY_EXTRA_ROLES = {
    "bitfit": frozenset({"bias"}),
    "ln_tuning": frozenset({"norm_gain", "norm_bias"}),
    "adapter": frozenset({"adapter"}),
    "prefix": frozenset({"prefix"}),
    "frozen": frozenset(),
}


@dataclass(frozen=True)
class PeftPolicy:
    kind: str = "bitfit"
    adapter_reduction: int = 4
    prefix_len: int = 36

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigurationError(f"unknown peft kind {self.kind!r}; choose from {POLICY_KINDS}")
        if self.adapter_reduction < 1 or self.prefix_len < 1:
            raise ConfigurationError("adapter_reduction and prefix_len must be >= 1")


def resolve_trainable(policy: PeftPolicy, inventory: dict[str, tuple[Tensor, str]]) -> frozenset[str]:
    """Return the names that train under ``policy``.

    ``inventory`` maps parameter name -> (tensor, role). Heads, prompts,
    and predictor parameters are trainable under every policy.
    """
    for name, (_, role) in inventory.items():
        if role not in KNOWN_ROLES:
            raise ConfigurationError(f"parameter {name!r} has unknown role {role!r}")
    if policy.kind == "full":
        return frozenset(inventory)
    extra = _POLICY_EXTRA_ROLES[policy.kind]
    trainable = frozenset(
        name for name, (_, role) in inventory.items() if role in ALWAYS_TRAINABLE_ROLES or role in extra
    )
    roles = {role for _, role in inventory.values()}
    if policy.kind == "adapter" and "adapter" not in roles:
        raise ConfigurationError("adapter policy selected but no adapters injected")
    if policy.kind == "prefix" and "prefix" not in roles:
        raise ConfigurationError("prefix policy selected but no prefix tokens injected")
    return trainable


def apply_gradient_mask(inventory: dict[str, tuple[Tensor, str]], trainable: frozenset[str]) -> None:
    """Mask frozen parameters out of the graph by clearing requires_grad."""
    for name, (tensor, _) in inventory.items():
        tensor.requires_grad = name in trainable
        tensor.grad = None


def inject_adapters(encoder, reduction: int, rng) -> None:
    """Insert bottleneck adapters into ``encoder`` (zero-initialised up-projection,
    so the augmented forward pass equals the original at injection time)."""
    encoder.add_adapters(reduction, rng)


def trainable_fraction(trainable: frozenset[str], inventory: dict[str, tuple[Tensor, str]]) -> float:
    """Trainable parameter count over total parameter count, in [0, 1]."""
    total = sum(t.size for t, _ in inventory.values())
    if total == 0:
        return 0.0
    count = sum(t.size for name, (t, _) in inventory.items() if name in trainable)
    return count / total


def adapter_parameter_count(width: int, reduction: int) -> int:
    """Parameters added by one adapter: two projections plus both biases."""
    hidden = width // reduction
    return 2 * width * hidden + hidden + width
