"""Frozen surrogate encoders: attention-pooled image tokens and bag-of-words text tokens.

Image encoder: 64 patches of 8x8x3 pixels. Each patch's value is a seeded
random linear embedding plus a random-Fourier positional code. Pooling is a
single softmax attention head whose query is fixed at construction to the
contrast direction between the saturated object palette and the dark floor
palette, so pooled tokens concentrate on objects and keep their position.

Text encoder: lowercase word tokens, a seeded embedding table over the
template vocabulary plus 4096 hashed out-of-vocabulary buckets, mean pooling
and a frozen projection.

Every parameter is derived from ``seed`` at construction and never updated.
"""

from __future__ import annotations

import hashlib
import json
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from dualproc.errors import IncompatibilityError, InvalidArgumentError
from dualproc.render import CLASSES, COLORS, FLOORS, PALETTE, Image

PATCH = 8
IMG = 64
N_PATCH = (IMG // PATCH) ** 2
PATCH_DIM = PATCH * PATCH * 3
OOV_BUCKETS = 4096
DEFAULT_D_MODEL = 64
POOL_TEMPERATURE = 30.0

_WORD = re.compile(r"[a-z]+")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def default_vocabulary() -> list[str]:
    from dualproc.datagen import TEMPLATES

    words = set(COLORS) | set(CLASSES) | {"you", "your", "behind", "left", "right", "front"}
    for bank in TEMPLATES.values():
        for t in bank:
            words |= set(tokenize(re.sub(r"\{\w+\}", " ", t)))
    words |= {"clockwise", "counterclockwise", "on", "in", "the"}
    return sorted(words)


@dataclass(frozen=True)
class ObsTokens:
    l: np.ndarray
    i_ego: np.ndarray
    i_exo: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.l, self.i_ego, self.i_exo])


class Perception:
    """Immutable frozen encoders; construct from a seed or load from a param file."""

    def __init__(self, seed: int = 0, d_model: int = DEFAULT_D_MODEL, vocabulary: Optional[list[str]] = None):
        self.seed = int(seed)
        self.d_model = int(d_model)
        self.vocabulary = list(vocabulary) if vocabulary is not None else default_vocabulary()
        self._index = {w: i for i, w in enumerate(self.vocabulary)}
        rng = np.random.default_rng([self.seed, 0xC0DE])
        d = self.d_model

        self.w_value = rng.normal(0.0, 1.0 / np.sqrt(PATCH_DIM), size=(PATCH_DIM, d)) * 4.0
        rows, cols = np.divmod(np.arange(N_PATCH), IMG // PATCH)
        grid = np.stack([(rows + 0.5) / (IMG // PATCH), (cols + 0.5) / (IMG // PATCH)], axis=1) * 2 - 1
        freqs = rng.normal(0.0, 2.0, size=(2, d // 2))
        phase = grid @ freqs
        self.pos_embed = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
        self.query = self._init_query()

        self.word_table = rng.normal(0.0, 1.0, size=(len(self.vocabulary) + OOV_BUCKETS, d))
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        self.text_proj = q * np.sqrt(d) / 2.0
        for a in self.params().values():
            a.setflags(write=False)
        self.checksum = self._checksum()

    def _init_query(self) -> np.ndarray:
        """Per-pixel-channel weights: salient palette mean minus floor mean, scaled."""
        salient = np.mean([PALETTE[c] for c in COLORS], axis=0)
        floor = np.mean([np.mean([a, b], axis=0) for a, b, _ in FLOORS.values()], axis=0)
        c = salient - floor
        c = c / np.linalg.norm(c)
        return np.tile(c, PATCH * PATCH) / (PATCH * PATCH) * POOL_TEMPERATURE

    def params(self) -> dict[str, np.ndarray]:
        return {
            "w_value": self.w_value,
            "pos_embed": self.pos_embed,
            "query": self.query,
            "word_table": self.word_table,
            "text_proj": self.text_proj,
        }

    def _checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"seed": self.seed, "d_model": self.d_model, "vocab": self.vocabulary}).encode())
        for k, a in sorted(self.params().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()

    # --- images -----------------------------------------------------------

    @staticmethod
    def patches(pixels: np.ndarray) -> np.ndarray:
        """(..., 64, 64, 3) -> (..., 64 patches, 192)."""
        lead = pixels.shape[:-3]
        p = pixels.reshape(*lead, IMG // PATCH, PATCH, IMG // PATCH, PATCH, 3)
        p = np.moveaxis(p, -4, -3)
        return p.reshape(*lead, N_PATCH, PATCH_DIM)

    def attention_weights(self, pixels: np.ndarray) -> np.ndarray:
        x = self.patches(np.asarray(pixels, dtype=float))
        s = x @ self.query
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=-1, keepdims=True)

    def encode_images(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float)
        if pixels.shape[-3:] != (IMG, IMG, 3):
            raise InvalidArgumentError(f"expected (..., 64, 64, 3) images, got {pixels.shape}")
        x = self.patches(pixels)
        a = self.attention_weights(pixels)
        v = x @ self.w_value + self.pos_embed
        return np.einsum("...p,...pd->...d", a, v)

    def encode_image(self, img) -> np.ndarray:
        px = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=float)
        if px.shape != (IMG, IMG, 3):
            raise InvalidArgumentError(f"expected a 64x64x3 image, got {px.shape}")
        return self.encode_images(px)

    # --- text -------------------------------------------------------------

    def word_index(self, w: str) -> int:
        i = self._index.get(w)
        if i is None:
            i = len(self.vocabulary) + zlib.crc32(w.encode()) % OOV_BUCKETS
        return i

    def encode_text(self, text: str) -> np.ndarray:
        words = tokenize(text or "")
        if not words:
            raise InvalidArgumentError("instruction text is empty")
        e = self.word_table[[self.word_index(w) for w in words]].mean(axis=0)
        return e @ self.text_proj / np.sqrt(self.d_model)

    # --- persistence ------------------------------------------------------

    def save(self, path) -> None:
        meta = {"seed": self.seed, "d_model": self.d_model, "vocabulary": self.vocabulary, "checksum": self.checksum}
        Path(path).write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "Perception":
        meta = json.loads(Path(path).read_text())
        p = cls(meta["seed"], meta["d_model"], meta["vocabulary"])
        if p.checksum != meta["checksum"]:
            raise IncompatibilityError(f"perception checksum mismatch for {path}")
        return p


def assemble_obs(l: np.ndarray, i_ego: np.ndarray, i_exo: np.ndarray) -> ObsTokens:
    l, i_ego, i_exo = (np.asarray(a, dtype=float) for a in (l, i_ego, i_exo))
    if not (l.ndim == 1 and l.shape == i_ego.shape == i_exo.shape):
        raise InvalidArgumentError("tokens must be 1-D with equal dimension")
    return ObsTokens(l, i_ego, i_exo)


def record_tokens(perc: Perception, record) -> np.ndarray:
    """(ticks, 3, d) tokens for a DemoRecord; blind records use seeded white noise."""
    k = record.n_ticks
    text = perc.encode_text(record.instruction)
    if record.blind:
        pairs = [record.image_pair(t) for t in range(k)]
        px = np.stack([[a.pixels, b.pixels] for a, b in pairs]) if k else np.zeros((0, 2, IMG, IMG, 3))
    elif record.images is not None:
        px = record.images.astype(np.float64) / 255.0
    else:
        px = record.render_images().astype(np.float64) / 255.0
    img_tok = perc.encode_images(px) if k else np.zeros((0, 2, perc.d_model))
    out = np.empty((k, 3, perc.d_model))
    out[:, 0] = text
    out[:, 1:] = img_tok
    return out
