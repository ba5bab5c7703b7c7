"""Experiment configuration: model widths, ablation flags, stage schedule."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

COORDINATE_MODES = ("none", "pos", "time", "full")
FLOW_SOURCES = ("oracle", "block")


@dataclass(frozen=True)
class StageSpec:
    """One training stage: step budget, task mix, trainable groups."""

    steps: int
    tasks: tuple
    unfreeze: tuple
    zero_prompt: bool = False


def default_stages() -> tuple:
    """Three-stage schedule: content alignment with the prompt zeroed and
    only fusion/projector/probe heads training, then coordinate alignment
    of the 4D encoding plus fusion on grounding, then joint fine-tuning of
    everything except the patch encoder."""
    return (
        StageSpec(steps=60, tasks=("caption", "qa"),
                  unfreeze=("fuse.", "gate.", "proj.", "probe."),
                  zero_prompt=True),
        StageSpec(steps=80, tasks=("grounding",),
                  unfreeze=("pos_enc.", "time_enc.", "prompt.", "fuse.", "gate.")),
        StageSpec(steps=260, tasks=("caption", "qa", "grounding"),
                  unfreeze=("pos_enc.", "time_enc.", "prompt.", "fuse.", "gate.",
                            "proj.", "probe.", "text.")),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run; hashed into every report."""

    # model widths
    d: int = 16                 # Fourier encoding width (even)
    d_p: int = 32               # visual feature width
    d_l: int = 32               # language width
    heads: int = 4
    prompt_hidden: int = 32
    probe_hidden: int = 32
    vocab_size: int = 128
    init_sigma: float = 1.0     # Fourier frequency init scale
    patch_embed_scale: float = 1.0

    # scenes
    n_views: int = 3
    n_frames: int = 4
    image_size: int = 32
    patch_size: int = 8
    n_objects: int = 2
    n_train_scenes: int = 2
    n_eval_scenes: int = 1

    # mechanism flags (each maps to exactly one code path)
    flow_source: str = "oracle"          # oracle | block
    fusion_strategy: str = "attention"   # concat | weighting | attention
    fusion_scope: str = "frame"          # frame | global
    coordinate_mode: str = "full"        # none | pos | time | full
    disentangle: bool = True
    text_coord_mode: str = "encoded"     # none | raw | encoded

    # training
    stages: tuple = field(default_factory=default_stages)
    lr: float = 3e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 8
    block_search: int = 6
    seed: int = 0

    def validate(self) -> None:
        from .language import TEXT_COORD_MODES
        from .vision import FUSION_STRATEGIES
        if self.d % 2:
            raise ValueError("encoding width d must be even")
        if self.d_p % self.heads:
            raise ValueError(f"heads {self.heads} must divide d_p {self.d_p}")
        if self.coordinate_mode not in COORDINATE_MODES:
            raise ValueError(f"unknown coordinate mode {self.coordinate_mode!r}")
        if self.fusion_strategy not in FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.fusion_strategy!r}")
        if self.text_coord_mode not in TEXT_COORD_MODES:
            raise ValueError(f"unknown text coordinate mode {self.text_coord_mode!r}")
        if self.flow_source not in FLOW_SOURCES:
            raise ValueError(f"unknown flow source {self.flow_source!r}")
        if self.fusion_scope not in ("frame", "global"):
            raise ValueError(f"unknown fusion scope {self.fusion_scope!r}")
        if self.image_size % self.patch_size:
            raise ValueError("image size must be divisible by patch size")
        known = {"caption", "qa", "grounding"}
        groups = ("pos_enc.", "time_enc.", "prompt.", "patch.", "fuse.", "gate.",
                  "proj.", "probe.", "text.")
        for st in self.stages:
            if set(st.tasks) - known:
                raise ValueError(f"unknown task in stage: {st.tasks}")
            for prefix in st.unfreeze:
                if prefix not in groups:
                    raise ValueError(f"unknown parameter group {prefix!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(
                StageSpec(steps=s["steps"], tasks=tuple(s["tasks"]),
                          unfreeze=tuple(s["unfreeze"]),
                          zero_prompt=s.get("zero_prompt", False))
                for s in d["stages"]
            )
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def config_hash(config: ExperimentConfig) -> str:
    """Stable digest of the canonical JSON form."""
    canon = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
