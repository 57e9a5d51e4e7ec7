"""Deterministic synthetic video-text corpus: one colored shape per clip
moving in one of four directions, captions and QA pairs from a closed
template grammar.

Direction is decodable only from frame order: a left-moving clip visits
exactly the positions of the matching right-moving clip in reverse (and
likewise up/down), so any single frame is consistent with at least two
direction labels, and reversing the frames flips the label.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass

import numpy as np

from . import pipeline
from . import tokens
from .diffcore import load_tensor, save_tensor
from .errors import ConfigError, DataError
from .textenc import TokenSeq

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
DIRECTIONS = ("left", "right", "up", "down")
SPEEDS = ("slow", "fast")

FRAME_SIZE = 16
RAW_FRAMES = 8

_COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}

WORDS = (
    "a", "red", "green", "blue", "yellow",
    "square", "circle", "triangle",
    "moving", "left", "right", "up", "down", "slow", "fast",
    "what", "color", "is", "the", "shape", "in", "video",
    "which", "direction",
)

QA_TEMPLATES = (
    ("what color is the shape", lambda c: c["color"]),
    ("what shape is in the video", lambda c: c["shape"]),
    ("which direction is the shape moving", lambda c: c["direction"]),
)


@dataclass
class Vocab:
    """Closed vocabulary: specials at ids 0-5, template words above."""

    size: int = 64

    def __post_init__(self):
        if len(WORDS) + tokens.N_SPECIALS > self.size:
            raise ConfigError("vocabulary does not fit the template grammar")
        self.id_of = {w: tokens.N_SPECIALS + i for i, w in enumerate(WORDS)}
        self.word_of = {i: w for w, i in self.id_of.items()}
        for i, name in enumerate(tokens.SPECIALS):
            self.word_of[i] = name


VOCAB = Vocab()


def tokenize(text: str) -> TokenSeq:
    """Whitespace split, vocabulary lookup, [UNK] for misses, append [EOS]."""
    ids = [VOCAB.id_of.get(w, tokens.UNK) for w in text.lower().split()]
    return TokenSeq(np.array(ids + [tokens.EOS], dtype=np.int64))


def detokenize(ids) -> str:
    """Inverse of tokenize on in-vocabulary text; stops at [EOS]."""
    words = []
    for i in np.asarray(ids, dtype=np.int64):
        if i == tokens.EOS:
            break
        words.append(VOCAB.word_of.get(int(i), "[UNK]"))
    return " ".join(words)


# -- rendering -----------------------------------------------------------


def _shape_stencil(shape: str) -> np.ndarray:
    """5x5 boolean footprint of the shape around its center."""
    s = np.zeros((5, 5), dtype=bool)
    if shape == "square":
        s[:] = True
    elif shape == "circle":
        yy, xx = np.mgrid[-2:3, -2:3]
        s = (yy**2 + xx**2) <= 6.25
    elif shape == "triangle":
        for r in range(5):
            half = r // 2
            s[r, 2 - half : 3 + half] = True
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return s


def _trajectory(direction: str, speed: str) -> list:
    """Per-frame (row, col) centers; opposite directions share the same
    position set in reverse order."""
    if speed == "slow":
        track = list(range(4, 4 + RAW_FRAMES))
    else:
        track = [int(round(v)) for v in np.linspace(2, 13, RAW_FRAMES)]
    mid = FRAME_SIZE // 2
    if direction == "right":
        return [(mid, c) for c in track]
    if direction == "left":
        return [(mid, c) for c in reversed(track)]
    if direction == "down":
        return [(r, mid) for r in track]
    if direction == "up":
        return [(r, mid) for r in reversed(track)]
    raise ConfigError(f"unknown direction {direction!r}")


def render_video(shape: str, color: str, direction: str, speed: str) -> np.ndarray:
    """(RAW_FRAMES, 3, 16, 16) float32 pixels in [0, 1]."""
    stencil = _shape_stencil(shape)
    rgb = _COLOR_RGB[color]
    out = np.zeros((RAW_FRAMES, 3, FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
    for t, (r, c) in enumerate(_trajectory(direction, speed)):
        rows = slice(r - 2, r + 3)
        cols = slice(c - 2, c + 3)
        for ch in range(3):
            out[t, ch, rows, cols][stencil] = rgb[ch]
    return out


def caption_for(combo: dict) -> str:
    return "a {color} {shape} moving {direction} {speed}".format(**combo)


def all_combos() -> list:
    return [
        {"shape": s, "color": c, "direction": d, "speed": v}
        for s, c, d, v in itertools.product(SHAPES, COLORS, DIRECTIONS, SPEEDS)
    ]


# -- corpus --------------------------------------------------------------


def generate_corpus(n: int, seed: int, ratios=(0.8, 0.1, 0.1), out_dir: str = "corpus") -> str:
    """Render ``n`` samples and write manifest + frame tensors.

    Combos cycle through a seeded permutation of all 96 (shape, color,
    direction, speed) tuples, so any window of up to 96 consecutive
    samples (in particular the val and test splits at desk scale) has
    one-to-one captions. Splits are contiguous: train, then val, then
    test. Returns the manifest path.
    """
    if n < 10:
        raise ConfigError(f"need at least 10 samples, got {n}")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ConfigError(f"split ratios must be 3 positives summing to 1, got {ratios}")
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train = n - n_val - n_test

    rng = np.random.default_rng(seed)
    combos = all_combos()
    order = rng.permutation(len(combos))

    frame_dir = os.path.join(out_dir, "frames")
    os.makedirs(frame_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as mf:
        for i in range(n):
            combo = combos[order[i % len(combos)]]
            sample_id = f"s{i:05d}"
            rel = os.path.join("frames", f"{sample_id}.bin")
            save_tensor(os.path.join(out_dir, rel), render_video(**combo))
            question, answer_fn = QA_TEMPLATES[i % len(QA_TEMPLATES)]
            split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            record = {
                "id": sample_id,
                "frames": rel,
                "caption": caption_for(combo),
                "question": question,
                "answer": answer_fn(combo),
                "split": split,
            }
            mf.write(json.dumps(record) + "\n")
    return manifest_path


class Corpus:
    """Manifest-backed sample access."""

    def __init__(self, manifest_path: str):
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        self.records = {}
        self.by_split = {"train": [], "val": [], "test": []}
        try:
            with open(manifest_path) as f:
                for line in f:
                    rec = json.loads(line)
                    self.records[rec["id"]] = rec
                    self.by_split[rec["split"]].append(rec["id"])
        except FileNotFoundError:
            raise DataError(f"manifest not found: {manifest_path}")

    def split_ids(self, split: str) -> list:
        return list(self.by_split[split])

    def record(self, sample_id: str) -> dict:
        if sample_id not in self.records:
            raise DataError(f"unknown sample id {sample_id!r}")
        return self.records[sample_id]

    def raw_frames(self, sample_id: str) -> np.ndarray:
        rec = self.record(sample_id)
        path = os.path.join(self.root, rec["frames"])
        try:
            return load_tensor(path)
        except DataError:
            raise DataError(f"frames file missing for sample {sample_id!r}")


def load_batch(corpus: Corpus, ids: list, n_frames: int, training: bool = False,
               rng=None) -> dict:
    """Model-ready batch: frames sampled to ``n_frames`` and scaled to
    [-1, 1], captions and QA tokenized."""
    frames, captions, questions, answers, answer_text = [], [], [], [], []
    for sample_id in ids:
        rec = corpus.record(sample_id)
        raw = corpus.raw_frames(sample_id)
        picks = pipeline.sample_frames(raw.shape[0], n_frames, training=training, rng=rng)
        frames.append(raw[picks].astype(np.float64) * 2.0 - 1.0)
        captions.append(tokenize(rec["caption"]))
        questions.append(tokenize(rec["question"]))
        answers.append(tokenize(rec["answer"]))
        answer_text.append(rec["answer"])
    return {
        "ids": list(ids),
        "frames": np.stack(frames),
        "captions": captions,
        "questions": questions,
        "answers": answers,
        "answer_text": answer_text,
    }
