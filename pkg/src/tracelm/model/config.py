"""Decoder architecture configuration and named presets."""

from __future__ import annotations

from dataclasses import dataclass, replace

ARCH_ABSOLUTE = "decoder-absolute"  # learned positions, pre-norm LayerNorm, GELU MLP
ARCH_ROTARY = "decoder-rotary"  # rotary positions, RMSNorm, gated SiLU MLP

DEFAULT_CONTEXT_LEN = 1024


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    context_len: int
    vocab_size: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.arch not in (ARCH_ABSOLUTE, ARCH_ROTARY):
            raise ValueError(f"unknown architecture {self.arch!r}")
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.context_len < 4:
            raise ValueError("context_len must be >= 4")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.arch == ARCH_ROTARY and (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("rotary attention needs an even head dimension")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def max_rows(self) -> int:
        """Complete rows that fit in the context window alongside BOS."""
        return (self.context_len - 1) // 3


# Layer/head counts follow the published variants; d_model and d_ff defaults
# reproduce their parameter budgets but are freely overridable for desk runs.
_PRESET_TABLE = {
    "gpt2-3layer": (ARCH_ABSOLUTE, 3, 6, 768, 3072),
    "gpt2-6layer": (ARCH_ABSOLUTE, 6, 6, 768, 3072),
    "gpt2-12layer": (ARCH_ABSOLUTE, 12, 6, 768, 3072),
    "gpt2-18layer": (ARCH_ABSOLUTE, 18, 6, 768, 3072),
    "llama-3layer": (ARCH_ROTARY, 3, 32, 512, 11008),
    "llama-6layer": (ARCH_ROTARY, 6, 32, 512, 11008),
    "llama-12layer": (ARCH_ROTARY, 12, 32, 512, 11008),
}


def preset_names() -> tuple[str, ...]:
    return tuple(_PRESET_TABLE)


def preset_config(
    name: str,
    *,
    vocab_size: int,
    context_len: int = DEFAULT_CONTEXT_LEN,
    d_model: int | None = None,
    n_heads: int | None = None,
    d_ff: int | None = None,
    seed: int = 0,
) -> ModelConfig:
    """Instantiate a preset, optionally overriding its width."""
    try:
        arch, layers, heads, width, ff = _PRESET_TABLE[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(_PRESET_TABLE)}") from None
    config = ModelConfig(
        arch=arch,
        n_layers=layers,
        n_heads=n_heads if n_heads is not None else heads,
        d_model=d_model if d_model is not None else width,
        d_ff=d_ff if d_ff is not None else (4 * d_model if d_model is not None else ff),
        context_len=context_len,
        vocab_size=vocab_size,
        seed=seed,
    )
    return config


def with_seed(config: ModelConfig, seed: int) -> ModelConfig:
    return replace(config, seed=seed)
