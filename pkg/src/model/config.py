from dataclasses import asdict, dataclass, field

from src.data_transformation.dataset import N_CLASSES


SOS = N_CLASSES
EOS = N_CLASSES + 1
VOCAB_SIZE = N_CLASSES + 2
CELL_TYPES = ("gru", "rnn")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 77
    hidden_dim: int = 64  # 3072 at full scale
    embed_dim: int = 16
    cell: str = "gru"
    attention: bool = False
    max_tokens: int = 16

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1 or self.embed_dim < 1:
            raise ValueError("input_dim, hidden_dim and embed_dim must be at least 1")
        if self.cell not in CELL_TYPES:
            raise ValueError(f"cell must be one of {CELL_TYPES}, got '{self.cell}'")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be at least 1")

    @property
    def vocab_size(self) -> int:
        return VOCAB_SIZE

    @property
    def max_decode_len(self) -> int:
        return self.max_tokens + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    betas: tuple = field(default=(0.9, 0.999))
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be at least 1")

    def to_dict(self) -> dict:
        raw = asdict(self)
        raw["betas"] = list(self.betas)
        return raw
