"""Model architecture configuration and named presets."""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields, replace

from .autodiff import ConfigurationError

EOS_RULES = ("margin", "threshold")
CONDITION_MODES = ("none", "encoded", "contextualized")
POSITION_MODES = ("sinusoidal", "learned")
SCORE_FUSION_MODES = ("broadcast", "projected")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64            # embedding width shared by data and all layers
    num_heads: int = 4
    ff_dim: int = 128
    trailerness_layers: int = 1  # self-attention depth of the score encoder
    context_layers: int = 4
    decoder_layers: int = 5
    max_len: int = 512           # longest unframed sequence the position table covers
    pre_norm: bool = False       # False = post-norm residual blocks
    position_mode: str = "sinusoidal"
    score_fusion: str = "broadcast"   # "projected": scores enter through a learned d-vector
    stop_score_gradient: bool = False  # detach scores before fusing them into the context input
    use_trailerness_encoder: bool = True   # ablation switch, no other code path change
    use_context_encoder: bool = True       # ablation switch
    eos_rule: str = "margin"     # "margin": EOS beats every movie shot; "threshold": fixed cutoff
    eos_threshold: float = 0.9   # only used by the threshold rule
    feedback: str = "predicted"  # "retrieved": feed back the matched movie shot instead
    no_repeat: bool = False      # forbid selecting the same movie shot twice
    condition_mode: str = "none"
    condition_dim: int = 0       # 0 means same as d_model (no projection needed)
    layer_norm_eps: float = 1e-5

    def validate(self) -> "ModelConfig":
        if self.d_model <= 0 or self.d_model % 2 != 0:
            raise ConfigurationError(f"d_model must be positive and even, got {self.d_model}")
        if self.d_model % self.num_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if min(self.trailerness_layers, self.context_layers, self.decoder_layers) < 1:
            raise ConfigurationError("all layer counts must be >= 1")
        if self.eos_rule not in EOS_RULES:
            raise ConfigurationError(f"eos_rule must be one of {EOS_RULES}")
        if self.condition_mode not in CONDITION_MODES:
            raise ConfigurationError(f"condition_mode must be one of {CONDITION_MODES}")
        if self.position_mode not in POSITION_MODES:
            raise ConfigurationError(f"position_mode must be one of {POSITION_MODES}")
        if self.score_fusion not in SCORE_FUSION_MODES:
            raise ConfigurationError(f"score_fusion must be one of {SCORE_FUSION_MODES}")
        if self.feedback not in ("predicted", "retrieved"):
            raise ConfigurationError("feedback must be 'predicted' or 'retrieved'")
        if self.max_len < 1:
            raise ConfigurationError("max_len must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values).validate()


# "desk" keeps training minutes-fast; "paper" mirrors the published scale.
PRESETS = {
    "desk": ModelConfig(),
    "paper": ModelConfig(d_model=1024, num_heads=8, ff_dim=2048),
}


def preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def with_overrides(cfg: ModelConfig, **overrides) -> ModelConfig:
    return replace(cfg, **overrides).validate()
