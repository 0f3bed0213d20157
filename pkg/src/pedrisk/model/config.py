"""Model architecture configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from ..errors import InvalidConfig


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 256
    lstm_hidden: int = 512
    lstm_layers: int = 2
    attn_dim: int = 128
    demo_embed_dim: int = 8
    demo_cardinalities: tuple[int, ...] = (3, 5, 3, 3, 8, 11)
    head_hidden: tuple[int, int] = (512, 256)
    leaky_relu_slope: float = 0.1
    dropout: float = 0.2
    horizons: int = 3
    loss_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        dims = (
            self.vocab_size, self.embed_dim, self.lstm_hidden, self.lstm_layers,
            self.attn_dim, self.demo_embed_dim, *self.head_hidden,
        )
        if any(int(d) <= 0 for d in dims):
            raise InvalidConfig(f"all dimensions must be positive: {dims}")
        if self.horizons != 3:
            raise InvalidConfig("model predicts exactly three horizons")
        if not 0.0 < self.leaky_relu_slope < 1.0:
            raise InvalidConfig(f"leaky_relu_slope {self.leaky_relu_slope} outside (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig(f"dropout {self.dropout} outside [0, 1)")
        if len(self.demo_cardinalities) != 6 or any(c < 1 for c in self.demo_cardinalities):
            raise InvalidConfig(f"need 6 positive demographic cardinalities, got "
                                f"{self.demo_cardinalities}")
        if self.loss_lambda < 0:
            raise InvalidConfig("loss_lambda must be non-negative")

    @property
    def demo_total_dim(self) -> int:
        return self.demo_embed_dim * len(self.demo_cardinalities)

    @property
    def context_dim(self) -> int:
        return self.lstm_hidden + self.demo_total_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["demo_cardinalities"] = list(self.demo_cardinalities)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["demo_cardinalities"] = tuple(d["demo_cardinalities"])
        d["head_hidden"] = tuple(d["head_hidden"])
        return cls(**d)
