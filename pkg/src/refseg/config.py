"""Run configuration: a flat ``section.key = value`` text format with validation.

Every recognised key, its default and meaning::

    model.dim            32     feature width C shared by all blocks
    model.enc_layers     1      self-attention layers over encoded tokens
    model.dec_layers     2      cross-attention layers for instance queries
    model.num_queries    5      instance queries N per expression
    model.seed           0      parameter initialisation seed
    scf.bandwidth        0.25   Gaussian low-pass width K (fraction of Nyquist radius)
    scf.enabled          true   use spectrum augmentation around the fusion attention
    cpk.patch            4      patch size p (each stride-16 token predicts p x p labels)
    cpk.hidden           16     hidden width of the dynamic two-layer kernel
    mso.enabled          true   refine patch masks with stride-8/4 features
    mso.low_dim          16     hidden width inside each refinement stage
    loss.dice            5      dice weight (both mask terms)
    loss.focal           2      focal weight (both mask terms)
    loss.l1              5      box L1 weight
    loss.giou            2      box GIoU weight
    loss.score           2      confidence focal weight
    loss.dice_eps        1      dice smoothing
    loss.focal_alpha     0.25   focal alpha
    loss.focal_gamma     2      focal gamma
    train.iters          2000   optimisation steps
    train.lr             0.05   step size
    train.momentum       0.9    heavy-ball momentum (sgd only)
    train.optimizer      sgd    sgd or adamw
    train.weight_decay   0.0    decoupled decay (adamw only)
    train.clip           1.0    global gradient-norm clip, 0 disables
    train.checkpoint_every 500  checkpoint period in steps (step 0 is always written)
    train.log_every      50     progress line period
    data.videos          8      synthetic training videos
    data.frames          3      frames per video
    data.size            64     frame height and width
    data.objects         2      objects per video
    data.expressions     2      referring expressions per video
    data.seed            0      scene generation seed
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigKeyError(KeyError):
    pass


@dataclass
class ModelConfig:
    dim: int = 32
    enc_layers: int = 1
    dec_layers: int = 2
    num_queries: int = 5
    seed: int = 0


@dataclass
class SCFConfig:
    bandwidth: float = 0.25
    enabled: bool = True


@dataclass
class CPKConfig:
    patch: int = 4
    hidden: int = 16


@dataclass
class MSOConfig:
    enabled: bool = True
    low_dim: int = 16


@dataclass
class LossConfig:
    dice: float = 5.0
    focal: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    score: float = 2.0
    dice_eps: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class TrainConfig:
    iters: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    clip: float = 1.0
    checkpoint_every: int = 500
    log_every: int = 50


@dataclass
class DataConfig:
    videos: int = 8
    frames: int = 3
    size: int = 64
    objects: int = 2
    expressions: int = 2
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    scf: SCFConfig = field(default_factory=SCFConfig)
    cpk: CPKConfig = field(default_factory=CPKConfig)
    mso: MSOConfig = field(default_factory=MSOConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        m, d = self.model, self.data
        if m.dim < 4 or m.dim % 4:
            raise ValueError("model.dim must be a positive multiple of 4")
        if min(m.enc_layers, m.dec_layers) < 0 or m.num_queries < 1:
            raise ValueError("layer counts must be >= 0 and num_queries >= 1")
        if self.scf.bandwidth <= 0:
            raise ValueError("scf.bandwidth must be positive")
        if self.cpk.patch != 4:
            raise ValueError("cpk.patch must be 4 (stride-16 tokens refined down to stride 4)")
        if self.cpk.hidden < 1 or self.mso.low_dim < 1:
            raise ValueError("hidden widths must be positive")
        if any(v < 0 for v in dataclasses.asdict(self.loss).values()):
            raise ValueError("loss weights must be non-negative")
        t = self.train
        if t.iters < 0 or t.lr <= 0 or not 0 <= t.momentum < 1 or t.clip < 0 or t.weight_decay < 0:
            raise ValueError("invalid train.* value")
        if t.optimizer not in ("sgd", "adamw"):
            raise ValueError("train.optimizer must be sgd or adamw")
        if t.checkpoint_every < 1 or t.log_every < 1:
            raise ValueError("train periods must be >= 1")
        if d.size % 32 or d.size <= 0:
            raise ValueError("data.size must be a positive multiple of 32")
        if d.frames < 1 or d.videos < 1 or d.objects < 1:
            raise ValueError("data counts must be >= 1")
        if not 1 <= d.expressions <= d.objects:
            raise ValueError("data.expressions must be between 1 and data.objects")
        return self

    def to_text(self) -> str:
        lines = []
        for section in dataclasses.fields(self):
            for k, v in dataclasses.asdict(getattr(self, section.name)).items():
                if isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{section.name}.{k} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(raw: str, default, key: str):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    for key, raw in items.items():
        section, _, name = key.partition(".")
        sub = getattr(cfg, section, None) if section in {f.name for f in dataclasses.fields(cfg)} else None
        if sub is None or name not in {f.name for f in dataclasses.fields(sub)}:
            raise ConfigKeyError(f"unknown config key {key!r}")
        setattr(sub, name, _coerce(raw.strip(), getattr(sub, name), key))
    return cfg.validate()


def parse_config(text: str) -> RunConfig:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in items:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        items[key] = value
    return apply_overrides(RunConfig(), items)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
