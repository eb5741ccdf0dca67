"""Run configuration: flat JSON schema with documented defaults.

Every rate/ratio is validated; defaults follow the reference training setup
(direction weights 0.75/0.25, loss weights 1.0/1.0/0.1 and 1.0/0.1, top-20%
salient selection, masking rate 0.75, probability increment 0.35).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # synthetic corpus
    n_samples: int = 512
    normal_ratio: float = 0.7
    image_size: int = 64
    patch_size: int = 8
    noise_sigma: float = 0.02
    lesion_contrast: float = 1.0     # global multiplier on rendered lesion intensity
    corpus_seed: int = 0

    # encoder/decoder dims (toy defaults; large preset: depth 3, heads 8, width 512)
    depth: int = 2
    heads: int = 4
    width: int = 64                  # d_v = d_t
    common_width: int = 64           # d_c of the shared semantic space
    dec_depth: int = 2
    dec_heads: int = 4
    dec_width: int = 64

    # alignment stage
    tau: float = 0.07
    k_percent: float = 0.20
    lambda_vt: float = 0.75
    lambda_tv: float = 0.25
    lambda_v: float = 1.0
    lambda_t: float = 1.0
    lambda_bi: float = 0.1
    image_mask_ratio: float = 0.5    # aux image-reconstruction arm
    text_mask_ratio: float = 0.15    # aux text-completion arm

    # report-generation stage
    phi: float = 0.35
    mask_rate: float = 0.75
    lambda_i: float = 1.0
    lambda_r: float = 0.1
    mim_loss: str = "mse"            # "mse" (per-pixel) or "l2norm" (unsquared per-patch norm)
    beam_width: int = 1
    max_report_len: int = 40

    # optimization
    lr: float = 1e-3
    batch_size: int = 8
    align_epochs: int = 30
    rrg_epochs: int = 10
    seed: int = 0

    def validate(self):
        ratios = {
            "normal_ratio": self.normal_ratio,
            "k_percent": self.k_percent,
            "mask_rate": self.mask_rate,
            "image_mask_ratio": self.image_mask_ratio,
            "text_mask_ratio": self.text_mask_ratio,
        }
        for name, value in ratios.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not 0.0 < self.k_percent <= 1.0:
            raise ConfigError(f"k_percent must lie in (0, 1], got {self.k_percent}")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.phi < 0:
            raise ConfigError(f"phi must be non-negative, got {self.phi}")
        for name in ("lambda_vt", "lambda_tv", "lambda_v", "lambda_t",
                     "lambda_bi", "lambda_i", "lambda_r"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.mim_loss not in ("mse", "l2norm"):
            raise ConfigError(f"mim_loss must be 'mse' or 'l2norm', got {self.mim_loss!r}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def with_overrides(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs).validate()


def large_preset(**overrides) -> RunConfig:
    """Full-size decoder setting (3 layers, 8 heads, 512-d hidden states)."""
    cfg = RunConfig(dec_depth=3, dec_heads=8, dec_width=512)
    return cfg.with_overrides(**overrides)
