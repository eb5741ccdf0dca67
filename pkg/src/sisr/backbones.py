"""Toy-scale vision/text transformer encoders, patchification and tokenization.

Desk-scale stand-ins for large pretrained backbones: a patch-embedding
transformer over image patches and a word-level transformer over report
tokens.  Both are pure functions of (input, params).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, EOS, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["<pad>", "<bos>", "<eos>", "<mask>", "<unk>"]

NEG_INF = -1e9


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# patchification


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an H x W x C image into rows of flattened non-overlapping patches.

    Returns an (N_v, patch_size**2 * C) array in row-major patch order.
    """
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise GeometryError(
            f"image {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    patches = image.reshape(gh, patch_size, gw, patch_size, c)
    patches = patches.transpose(0, 2, 1, 3, 4)
    return patches.reshape(gh * gw, patch_size * patch_size * c)


def unpatchify(patches: np.ndarray, height: int, width: int, patch_size: int,
               channels: int = 1) -> np.ndarray:
    gh, gw = height // patch_size, width // patch_size
    x = patches.reshape(gh, gw, patch_size, patch_size, channels)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(height, width, channels)


def grid_size(height: int, width: int, patch_size: int) -> int:
    if height % patch_size or width % patch_size:
        raise GeometryError(f"image {height}x{width} not divisible by patch size {patch_size}")
    return (height // patch_size) * (width // patch_size)


# ---------------------------------------------------------------------------
# vocabulary and tokenization


class Vocabulary:
    """Word-level vocabulary: specials first, then words in first-appearance order."""

    def __init__(self, words):
        self.tokens = list(SPECIAL_TOKENS) + list(words)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_corpus(cls, reports) -> "Vocabulary":
        reports = list(reports)
        if not reports:
            raise ValueError("cannot build a vocabulary from an empty corpus")
        words, seen = [], set()
        for report in reports:
            for w in report.lower().split():
                if w not in seen:
                    seen.add(w)
                    words.append(w)
        return cls(words)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens[len(SPECIAL_TOKENS):])


def tokenize(report: str, vocab: Vocabulary):
    """Lowercase, whitespace-split, map OOV to UNK; wrap in BOS/EOS."""
    ids = [vocab.index.get(w, UNK) for w in report.lower().split()]
    return [BOS] + ids + [EOS]


def detokenize(ids, vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        if i in (PAD, BOS, EOS):
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)


# ---------------------------------------------------------------------------
# transformer encoder


@dataclass
class EncoderConfig:
    input_width: int          # flattened patch width, or 0 for a token-id embedding
    vocab_size: int           # 0 for the vision encoder
    max_positions: int
    depth: int = 2
    heads: int = 4
    width: int = 64

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"head count {self.heads} must divide width {self.width}")


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, prefix: str):
    """Fresh parameter dict (name -> Tensor with requires_grad)."""
    p = {}

    def par(name, arr):
        p[f"{prefix}.{name}"] = Tensor(arr, requires_grad=True)

    scale = 0.02
    if cfg.vocab_size:
        par("embed", rng.normal(0.0, scale, (cfg.vocab_size, cfg.width)))
    else:
        par("embed", rng.normal(0.0, scale, (cfg.input_width, cfg.width)))
        par("embed_bias", np.zeros(cfg.width))
    par("pos", rng.normal(0.0, scale, (cfg.max_positions, cfg.width)))
    dh = cfg.width // cfg.heads
    for layer in range(cfg.depth):
        base = f"layer{layer}"
        for h in range(cfg.heads):
            par(f"{base}.wq{h}", rng.normal(0.0, scale, (cfg.width, dh)))
            par(f"{base}.wk{h}", rng.normal(0.0, scale, (cfg.width, dh)))
            par(f"{base}.wv{h}", rng.normal(0.0, scale, (cfg.width, dh)))
        par(f"{base}.wo", rng.normal(0.0, scale, (cfg.width, cfg.width)))
        par(f"{base}.ln1_g", np.ones(cfg.width))
        par(f"{base}.ln1_b", np.zeros(cfg.width))
        par(f"{base}.ln2_g", np.ones(cfg.width))
        par(f"{base}.ln2_b", np.zeros(cfg.width))
        par(f"{base}.ff1", rng.normal(0.0, scale, (cfg.width, 2 * cfg.width)))
        par(f"{base}.ff1_b", np.zeros(2 * cfg.width))
        par(f"{base}.ff2", rng.normal(0.0, scale, (2 * cfg.width, cfg.width)))
        par(f"{base}.ff2_b", np.zeros(cfg.width))
    par("ln_f_g", np.ones(cfg.width))
    par("ln_f_b", np.zeros(cfg.width))
    return p


def _attention(x, params, prefix, heads, attn_bias=None):
    """Multi-head self-attention over an N x d sequence (2-D matmuls per head)."""
    n, d = x.shape
    dh = d // heads
    outs = []
    for h in range(heads):
        q = ad.matmul(x, params[f"{prefix}.wq{h}"])
        k = ad.matmul(x, params[f"{prefix}.wk{h}"])
        v = ad.matmul(x, params[f"{prefix}.wv{h}"])
        scores = ad.matmul(q, k.T) * (1.0 / np.sqrt(dh))
        if attn_bias is not None:
            scores = scores + attn_bias
        outs.append(ad.matmul(ad.softmax(scores, axis=-1), v))
    return ad.matmul(ad.concat(outs, axis=1), params[f"{prefix}.wo"])


def _ffn(x, params, prefix):
    h = ad.relu(ad.matmul(x, params[f"{prefix}.ff1"]) + params[f"{prefix}.ff1_b"])
    return ad.matmul(h, params[f"{prefix}.ff2"]) + params[f"{prefix}.ff2_b"]


def encode(x: Tensor, params, cfg: EncoderConfig, prefix: str, attn_bias=None) -> Tensor:
    """Run the pre-norm transformer stack over already-embedded inputs."""
    for layer in range(cfg.depth):
        base = f"{prefix}.layer{layer}"
        xn = ad.layer_norm(x, params[f"{base}.ln1_g"], params[f"{base}.ln1_b"])
        x = x + _attention(xn, params, base, cfg.heads, attn_bias)
        xn = ad.layer_norm(x, params[f"{base}.ln2_g"], params[f"{base}.ln2_b"])
        x = x + _ffn(xn, params, base)
    return ad.layer_norm(x, params[f"{prefix}.ln_f_g"], params[f"{prefix}.ln_f_b"])


def vision_encode(patches: Tensor, params, cfg: EncoderConfig, prefix: str = "vision",
                  mask_token=None, masked_indices=None) -> Tensor:
    """Contextual patch features, N_v x width.

    When `mask_token` is given, rows listed in `masked_indices` are replaced by
    the learned mask embedding before positional embeddings are added.
    """
    n = patches.shape[0]
    if patches.shape[1] != params[f"{prefix}.embed"].shape[0]:
        raise ad.ShapeError(
            f"patch width {patches.shape[1]} does not match embedding input "
            f"width {params[f'{prefix}.embed'].shape[0]}"
        )
    x = ad.matmul(patches, params[f"{prefix}.embed"]) + params[f"{prefix}.embed_bias"]
    if mask_token is not None and len(masked_indices):
        keep = np.ones((n, 1))
        keep[list(masked_indices)] = 0.0
        x = x * Tensor(keep) + Tensor(1.0 - keep) * mask_token
    x = x + gather_positions(params[f"{prefix}.pos"], n)
    return encode(x, params, cfg, prefix)


def gather_positions(pos: Tensor, n: int) -> Tensor:
    return ad.gather_rows(pos, np.arange(n))


def text_encode(token_ids, params, cfg: EncoderConfig, prefix: str = "text") -> Tensor:
    """Contextual token features, N_t x width; PAD columns are masked out of attention."""
    ids = np.asarray(token_ids, dtype=np.intp)
    x = ad.gather_rows(params[f"{prefix}.embed"], ids)
    x = x + gather_positions(params[f"{prefix}.pos"], len(ids))
    bias = None
    if (ids == PAD).any():
        bias = Tensor(np.where(ids == PAD, NEG_INF, 0.0)[None, :])
    return encode(x, params, cfg, prefix, attn_bias=bias)
