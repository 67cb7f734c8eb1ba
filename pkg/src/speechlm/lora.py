"""Low-rank adapters on the LM attention projections.

Each targeted weight W gains a trainable pair (W_a, W_b) so the projection
computes x W + scale * (x W_a) W_b with W frozen.  W_b starts at zero, so the
adapted model is bit-identical to the base model until training moves it.
Adapters live in a top-level bank and serialize under a "lora." name prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .nn import Linear, Module, MultiHeadAttention
from .tensor import Parameter, Tensor

DEFAULT_TARGETS = ("wq", "wk", "wv", "wo")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 2
    alpha: float = 4.0  # scale = alpha / rank; default keeps scale 2 = 2r/r
    targets: tuple[str, ...] = DEFAULT_TARGETS
    init_std: float = 0.02

    def validate(self) -> "LoraConfig":
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        bad = [t for t in self.targets if t not in DEFAULT_TARGETS]
        if bad:
            raise ConfigError(f"unknown LoRA targets {bad}; valid: {DEFAULT_TARGETS}")
        return self

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoraAdapter(Module):
    """One low-rank pair bound to a specific base matrix."""

    def __init__(self, d_in: int, d_out: int, config: LoraConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        if config.rank > min(d_in, d_out) / 4:
            raise ConfigError(
                f"rank {config.rank} too large for a {d_in}x{d_out} matrix "
                f"(require rank <= min(d, k)/4)"
            )
        self.scale = config.scale
        self.rank = config.rank
        self.w_a = Parameter(
            rng.normal(0.0, config.init_std, size=(d_in, config.rank)).astype(np.float32)
        )
        self.w_b = Parameter(np.zeros((config.rank, d_out), dtype=np.float32))

    def delta(self, x: Tensor) -> Tensor:
        return ((x @ self.w_a) @ self.w_b) * self.scale

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.w_a.data @ self.w_b.data)


class LoraBank(Module):
    """Registry container so adapter parameters serialize as lora.<target>.w_a."""

    def __init__(self):
        super().__init__()

    def add(self, target_name: str, adapter: LoraAdapter) -> None:
        self._modules[target_name] = adapter
        object.__setattr__(self, target_name.replace(".", "_"), adapter)

    def __len__(self) -> int:
        return len(self._modules)

    def items(self):
        return self._modules.items()


def inject(model: Module, config: LoraConfig, rng: np.random.Generator,
           scope_prefix: str = "lm.") -> LoraBank:
    """Attach adapters to every targeted attention projection under
    ``scope_prefix``; base weights are frozen.  Returns the bank, which is also
    registered on the model under the attribute/prefix "lora"."""
    config.validate()
    bank = LoraBank()
    for path, module in model.named_modules():
        if not isinstance(module, MultiHeadAttention):
            continue
        if scope_prefix and not path.startswith(scope_prefix):
            continue
        for target in config.targets:
            linear: Linear = getattr(module, target)
            if linear.adapter is not None:
                raise ContractError(f"{path}.{target} already has an adapter")
            adapter = LoraAdapter(linear.d_in, linear.d_out, config, rng)
            object.__setattr__(linear, "adapter", adapter)
            linear.w.freeze()
            bank.add(f"{path}.{target}", adapter)
    if len(bank) == 0:
        raise ContractError(f"no attention projections found under {scope_prefix!r}")
    model.lora = bank  # registers the bank: parameter names gain the lora. prefix
    return bank


def strip_adapters(model: Module) -> None:
    for _, module in model.named_modules():
        if isinstance(module, Linear) and module.adapter is not None:
            object.__setattr__(module, "adapter", None)
    if "lora" in model._modules:
        del model._modules["lora"]
        object.__setattr__(model, "lora", None)


def merge(model: Module) -> None:
    """Fold every adapter into its base weight (W' = W + scale W_a W_b) and
    detach the adapters; the merged forward matches the adapted forward."""
    for _, module in model.named_modules():
        if isinstance(module, Linear) and module.adapter is not None:
            module.w.data = module.w.data + module.adapter.delta_weight().astype(
                module.w.data.dtype
            )
            object.__setattr__(module, "adapter", None)
    if "lora" in getattr(model, "_modules", {}):
        del model._modules["lora"]
        object.__setattr__(model, "lora", None)


def param_count(config: LoraConfig, n_layers: int, d: int, k: int) -> int:
    """Total adapter parameters for ``n_layers`` attention blocks of shape d x k."""
    config.validate()
    per_target = d * config.rank + config.rank * k
    return n_layers * len(config.targets) * per_target
