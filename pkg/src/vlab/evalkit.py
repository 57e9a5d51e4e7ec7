"""Downstream evaluation: text-video retrieval with dual softmax,
autoregressive caption generation with BLEU@4 and exact match, and
generative QA accuracy.

Retrieval touches only the pooled encoder embeddings (extracted offline,
no multimodal encoder in the loop); generation drives the causal fusion
path token by token.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import math

import numpy as np

from . import data as data_mod
from . import diffcore as dc
from . import tokens
from .diffcore import Tensor
from .errors import ConfigError, ContractError

DUAL_SOFTMAX_T = 100.0


@dataclass
class SimMatrix:
    """Queries x gallery scores with the matching gallery index per query."""

    scores: np.ndarray
    truths: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.truths = np.asarray(self.truths, dtype=np.int64)
        if self.scores.ndim != 2 or self.truths.shape != (self.scores.shape[0],):
            raise ContractError(
                f"sim matrix {self.scores.shape} with truths {self.truths.shape}"
            )
        if self.truths.size and self.truths.max() >= self.scores.shape[1]:
            raise ContractError("ground-truth index outside the gallery")


def recall_at_k(m: SimMatrix, ks=(1, 5, 10)) -> dict:
    """R@k in percentage points plus their SUM.

    Ranking is by descending score; ties break toward the lower gallery
    index, so an equal-scoring distractor before the truth outranks it.
    """
    if np.isnan(m.scores).any():
        raise ContractError("similarity scores contain NaN")
    if m.scores.shape[1] < max(ks):
        raise ConfigError(
            f"gallery of {m.scores.shape[1]} cannot support recall@{max(ks)}"
        )
    ranks = np.empty(m.scores.shape[0], dtype=np.int64)
    for q, row in enumerate(m.scores):
        t = m.truths[q]
        ahead = np.sum(row > row[t]) + np.sum(row[:t] == row[t])
        ranks[q] = 1 + ahead
    out = {f"R@{k}": float(100.0 * np.mean(ranks <= k)) for k in ks}
    out["SUM"] = float(sum(out[f"R@{k}"] for k in ks))
    return out


def dual_softmax(m: SimMatrix, t: float = DUAL_SOFTMAX_T) -> SimMatrix:
    """Rescore with the elementwise product of row- and column-softmax
    of t * scores; ground truth indices are unchanged."""
    z = t * m.scores
    rows = np.exp(z - z.max(axis=1, keepdims=True))
    rows /= rows.sum(axis=1, keepdims=True)
    cols = np.exp(z - z.max(axis=0, keepdims=True))
    cols /= cols.sum(axis=0, keepdims=True)
    return SimMatrix(rows * cols, m.truths.copy())


# -- generation ------------------------------------------------------------


def generate(step_fn, prompt_ids, max_len: int, beam: int = 1,
             eos_id: int = tokens.EOS) -> list:
    """Decode a continuation of ``prompt_ids`` under a causal model.

    ``step_fn(ids) -> (V,) logits`` scores the next token after the
    prefix. Greedy when ``beam`` is 1; otherwise keeps the top ``beam``
    prefixes by summed log-probability and picks the finished beam with
    the best length-normalized score. The returned continuation excludes
    the prompt and the terminating [EOS]; the total sequence never
    exceeds ``max_len`` tokens.
    """
    prompt = list(prompt_ids)
    if beam < 1:
        raise ConfigError(f"beam width must be >= 1, got {beam}")
    if len(prompt) >= max_len:
        return []
    if beam == 1:
        seq = list(prompt)
        while len(seq) < max_len:
            nxt = int(np.argmax(step_fn(seq)))
            if nxt == eos_id:
                break
            seq.append(nxt)
        return seq[len(prompt):]

    live = [(list(prompt), 0.0)]
    finished = []
    while live:
        grown = []
        for seq, score in live:
            logits = step_fn(seq)
            logp = logits - _logsumexp(logits)
            for tok in np.argsort(logp)[::-1][:beam]:
                cand = (seq + [int(tok)], score + float(logp[tok]))
                if int(tok) == eos_id or len(cand[0]) >= max_len:
                    finished.append(cand)
                else:
                    grown.append(cand)
        grown.sort(key=lambda c: c[1], reverse=True)
        live = grown[:beam]
    best = max(finished, key=lambda c: c[1] / max(1, len(c[0]) - len(prompt)))
    out = best[0][len(prompt):]
    return out[:-1] if out and out[-1] == eos_id else out


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


# -- caption metrics ---------------------------------------------------------


def _ngrams(words, n):
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def caption_metrics(hypotheses: list, references: list) -> dict:
    """Corpus BLEU@4 (uniform weights, brevity penalty, no smoothing)
    and exact-match fraction. Empty hypotheses count zero toward both."""
    if len(hypotheses) != len(references):
        raise ContractError("hypotheses and references are not aligned")
    clipped = np.zeros(4)
    totals = np.zeros(4)
    hyp_len = ref_len = 0
    exact = 0
    for hyp, ref in zip(hypotheses, references):
        h_words = hyp.split()
        r_words = ref.split()
        exact += int(hyp == ref and len(h_words) > 0)
        hyp_len += len(h_words)
        ref_len += len(r_words)
        for n in range(1, 5):
            h_counts = _ngrams(h_words, n)
            r_counts = _ngrams(r_words, n)
            totals[n - 1] += sum(h_counts.values())
            clipped[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    em = exact / len(hypotheses) if hypotheses else 0.0
    if np.any(totals == 0) or np.any(clipped == 0):
        return {"bleu4": 0.0, "exact_match": em}
    log_p = np.log(clipped / totals).mean()
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(1, hyp_len))
    return {"bleu4": float(100.0 * bp * math.exp(log_p)), "exact_match": em}


# -- task drivers -------------------------------------------------------------


def extract_embeddings(model, corpus, split: str, batch_size: int = 16):
    """Offline pooled embeddings for one split: (video (N, d), text (N, d))."""
    ids = corpus.split_ids(split)
    video, text = [], []
    model.eval()
    with dc.no_grad():
        for lo in range(0, len(ids), batch_size):
            batch = data_mod.load_batch(corpus, ids[lo : lo + batch_size],
                                        model.cfg.frames)
            video.append(model.video_embedding(Tensor(batch["frames"])).data)
            text.append(model.text_embedding(batch["captions"]).data)
    return np.concatenate(video), np.concatenate(text)


def retrieval_eval(model, corpus, split: str = "test", use_dual_softmax: bool = True,
                   t: float = DUAL_SOFTMAX_T) -> dict:
    """Text-to-video retrieval over the split; queries are captions."""
    video, text = extract_embeddings(model, corpus, split)
    sim = SimMatrix(text @ video.T, np.arange(len(text)))
    if use_dual_softmax:
        sim = dual_softmax(sim, t)
    return recall_at_k(sim)


def caption_eval(model, corpus, split: str = "test", max_len: int = 16,
                 beam: int = 1) -> dict:
    """Autoregressive captions against the split references."""
    hyps, refs = [], []
    model.eval()
    for sample_id in corpus.split_ids(split):
        batch = data_mod.load_batch(corpus, [sample_id], model.cfg.frames)
        step = model.step_logits_fn(Tensor(batch["frames"]))
        out = generate(step, [tokens.CLS], max_len, beam)
        hyps.append(data_mod.detokenize(out))
        refs.append(corpus.record(sample_id)["caption"])
    return caption_metrics(hyps, refs)


def qa_eval(model, corpus, split: str = "test", max_len: int = 16,
            beam: int = 1, question_filter=None) -> dict:
    """Generate answers after the [SEP]-joined question; exact match."""
    total = correct = 0
    model.eval()
    for sample_id in corpus.split_ids(split):
        rec = corpus.record(sample_id)
        if question_filter is not None and not question_filter(rec):
            continue
        batch = data_mod.load_batch(corpus, [sample_id], model.cfg.frames)
        step = model.step_logits_fn(Tensor(batch["frames"]))
        question = data_mod.tokenize(rec["question"])
        prompt = [tokens.CLS] + list(question.ids[:-1]) + [tokens.SEP]
        out = generate(step, prompt, max_len, beam)
        total += 1
        correct += int(data_mod.detokenize(out) == rec["answer"])
    return {"accuracy": correct / total if total else 0.0, "n": total}
