"""Deterministic synthetic paired image/report corpus with planted lesions.

Images are smooth grayscale "anatomy" backgrounds with localized intensity
structures; each structure has a kind, a zone and a severity, and the report
is the exact grammar rendering of those structures.  Ground-truth lesion
patches make saliency quality directly measurable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .backbones import patchify
from .config import ConfigError, RunConfig
from . import serialization

KINDS = ("opacity", "effusion", "nodule", "consolidation",
         "cardiomegaly", "edema", "fracture", "device")

SEVERITIES = ("mild", "moderate", "severe")
# severity -> (area scale, contrast scale); strictly increasing in both
SEVERITY_SCALE = {"mild": (1.0, 1.0), "moderate": (1.35, 1.45), "severe": (1.8, 2.0)}

ZONE_ROWS = ("upper", "mid", "lower")
ZONE_COLS = ("left", "right")

NORMAL_REPORT = "the lungs are clear . the heart size is normal . no acute findings ."
ABNORMAL_TAIL = "the remaining structures are unremarkable ."

OVERLAP_THRESHOLD = 0.10  # fraction of patch area a lesion must cover


@dataclass
class LesionSpec:
    kind: str
    zone: tuple          # (row index 0..2, col index 0..1)
    severity: str
    center: tuple        # pixel (y, x)

    def sentence(self) -> str:
        row, col = self.zone
        return (f"there is a {self.severity} {self.kind} in the "
                f"{ZONE_COLS[col]} {ZONE_ROWS[row]} zone .")


@dataclass
class PairedSample:
    image: np.ndarray            # H x W x 1, values in [0, 1]
    report: str
    lesions: list
    lesion_patches: list         # sorted ground-truth patch indices
    labels: frozenset = field(default_factory=frozenset)


def labels_of(lesions) -> frozenset:
    return frozenset(l.kind for l in lesions)


def label_bitmask(labels) -> int:
    return sum(1 << i for i, kind in enumerate(KINDS) if kind in labels)


def labels_from_bitmask(mask: int) -> frozenset:
    return frozenset(kind for i, kind in enumerate(KINDS) if mask >> i & 1)


# ---------------------------------------------------------------------------
# rendering


def _background(size: int) -> np.ndarray:
    """Fixed low-frequency anatomy-like pattern, identical for every sample."""
    y, x = np.mgrid[0:size, 0:size] / size
    base = 0.45 + 0.08 * np.sin(2.3 * np.pi * y) + 0.06 * np.cos(1.7 * np.pi * x)
    base += 0.10 * np.exp(-(((y - 0.55) ** 2 + (x - 0.5) ** 2) / 0.18))
    return base


def _render_lesion(size: int, lesion: LesionSpec, contrast: float):
    """Additive intensity field plus a boolean footprint mask for one lesion."""
    area_s, contrast_s = SEVERITY_SCALE[lesion.severity]
    amp = 0.12 * contrast_s * contrast
    cy, cx = lesion.center
    y, x = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = y - cy, x - cx
    kind = lesion.kind
    if kind == "opacity":
        r = 6.0 * area_s
        bump = np.exp(-(dy ** 2 + dx ** 2) / (2 * (r / 1.8) ** 2))
    elif kind == "effusion":
        h, w = 4.0 * area_s, 10.0 * area_s
        bump = ((np.abs(dy) <= h) & (np.abs(dx) <= w)).astype(float)
        bump *= np.clip((dy + h) / (2 * h), 0.0, 1.0)     # denser toward the bottom edge
    elif kind == "nodule":
        r = 3.2 * area_s
        bump = (dy ** 2 + dx ** 2 <= r ** 2).astype(float)
        amp *= 1.6
    elif kind == "consolidation":
        h = 6.0 * area_s
        bump = ((np.abs(dy) <= h) & (np.abs(dx) <= h)).astype(float)
    elif kind == "cardiomegaly":
        ry, rx = 5.0 * area_s, 8.0 * area_s
        bump = ((dy / ry) ** 2 + (dx / rx) ** 2 <= 1.0).astype(float) * 0.8
    elif kind == "edema":
        r = 9.0 * area_s
        bump = np.exp(-(dy ** 2 + dx ** 2) / (2 * (r / 1.6) ** 2)) * 0.6
    elif kind == "fracture":
        bump = ((np.abs(dy - dx) <= 1.2) & (np.abs(dy) <= 7.0 * area_s)
                & (np.abs(dx) <= 7.0 * area_s)).astype(float)
        amp *= 1.5
    elif kind == "device":
        bump = ((np.abs(dx) <= 1.5) & (np.abs(dy) <= 8.0 * area_s)).astype(float)
        amp *= 1.4
    else:
        raise ValueError(f"unknown lesion kind {kind!r}")
    footprint = bump > 0.05
    return amp * bump, footprint


def render_sample(lesions, size: int, rng: np.random.Generator,
                  noise_sigma: float, patch_size: int,
                  contrast: float = 1.0) -> PairedSample:
    img = _background(size).copy()
    footprint = np.zeros((size, size), dtype=bool)
    for lesion in lesions:
        bump, fp = _render_lesion(size, lesion, contrast)
        img += bump
        footprint |= fp
    img += rng.normal(0.0, noise_sigma, (size, size))
    img = np.clip(img, 0.0, 1.0)[:, :, None]

    lesion_patches = _overlap_patches(footprint, patch_size)
    if lesions:
        report = " ".join(l.sentence() for l in lesions) + " " + ABNORMAL_TAIL
    else:
        report = NORMAL_REPORT
    return PairedSample(image=img, report=report, lesions=list(lesions),
                        lesion_patches=lesion_patches, labels=labels_of(lesions))


def _overlap_patches(footprint: np.ndarray, patch_size: int):
    fractions = patchify(footprint.astype(float), patch_size).mean(axis=1)
    return sorted(np.flatnonzero(fractions > OVERLAP_THRESHOLD).tolist())


def ground_truth_saliency(sample: PairedSample) -> set:
    """Patches whose area overlaps a rendered lesion above the 10% threshold."""
    return set(sample.lesion_patches)


# ---------------------------------------------------------------------------
# generation


def _sample_lesions(rng: np.random.Generator, size: int):
    n = int(rng.integers(1, 4))
    kinds = list(rng.choice(len(KINDS), size=n, replace=False))
    zones = [(int(z) // 2, int(z) % 2)
             for z in rng.choice(6, size=n, replace=False)]
    lesions = []
    row_h, col_w = size / 3.0, size / 2.0
    for kind_idx, zone in zip(kinds, zones):
        severity = SEVERITIES[int(rng.integers(0, 3))]
        row, col = zone
        cy = row * row_h + rng.uniform(0.35, 0.65) * row_h
        cx = col * col_w + rng.uniform(0.35, 0.65) * col_w
        lesions.append(LesionSpec(kind=KINDS[int(kind_idx)], zone=zone,
                                  severity=severity, center=(cy, cx)))
    return lesions


def generate_corpus(cfg: RunConfig):
    """Deterministic list of PairedSample for (cfg, cfg.corpus_seed)."""
    if not 0.0 <= cfg.normal_ratio <= 1.0:
        raise ConfigError(f"normal_ratio must lie in [0, 1], got {cfg.normal_ratio}")
    rng = np.random.default_rng(cfg.corpus_seed)
    samples = []
    for _ in range(cfg.n_samples):
        lesions = [] if rng.random() < cfg.normal_ratio else _sample_lesions(rng, cfg.image_size)
        samples.append(render_sample(lesions, cfg.image_size, rng, cfg.noise_sigma,
                                     cfg.patch_size, cfg.lesion_contrast))
    return samples


# ---------------------------------------------------------------------------
# label extraction (rule-based stand-in for a learned labeler)


def extract_labels(report: str) -> frozenset:
    """A kind is present iff its keyword occurs in a non-negated sentence."""
    present = set()
    for sentence in report.lower().split(" . "):
        words = sentence.replace(" .", "").split()
        if not words or words[0] == "no":
            continue
        for kind in KINDS:
            if kind in words:
                present.add(kind)
    return frozenset(present)


# ---------------------------------------------------------------------------
# disk layout: manifest + image containers + report text files


def write_corpus(samples, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img_name, rep_name = f"img_{i:05d}.sisr", f"report_{i:05d}.txt"
        serialization.save_image(os.path.join(out_dir, img_name), s.image)
        with open(os.path.join(out_dir, rep_name), "w", encoding="utf-8") as fh:
            fh.write(s.report + "\n")
        patches = ",".join(str(p) for p in s.lesion_patches)
        lines.append(f"{img_name}\t{rep_name}\t{label_bitmask(s.labels)}\t{patches}")
    with open(os.path.join(out_dir, "manifest.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_corpus(corpus_dir):
    samples = []
    with open(os.path.join(corpus_dir, "manifest.tsv"), encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            img_name, rep_name, bitmask, patches = line.split("\t")
            image = serialization.load_image(os.path.join(corpus_dir, img_name))
            with open(os.path.join(corpus_dir, rep_name), encoding="utf-8") as rf:
                report = rf.read().strip()
            lesion_patches = [int(p) for p in patches.split(",") if p]
            samples.append(PairedSample(image=image, report=report, lesions=[],
                                        lesion_patches=lesion_patches,
                                        labels=labels_from_bitmask(int(bitmask))))
    return samples
