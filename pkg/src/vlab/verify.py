"""Self-check suites behind the ``verify`` command: gradient integrity
against central differences, and structural invariants."""

from __future__ import annotations

import os
import tempfile

import numpy as np

from . import data as data_mod
from . import diffcore as dc
from . import nn
from . import pipeline as P
from .diffcore import Tensor
from .model import ModelConfig, VLABModel


def tiny_model_config(mode: str = "single") -> ModelConfig:
    """Smallest configuration that still exercises every pathway."""
    return ModelConfig(
        image_size=8, patch_size=4, frames=2, max_frames=4,
        vision_width=8, vision_heads=2, vision_depth=2,
        adapter_layers="all", adapter_width=4,
        text_width=8, text_heads=2, text_depth=1,
        fusion_width=8, fusion_heads=2, fusion_depth=2,
        joint_dim=8, l_max=8, blend_mode=mode,
    )


def tiny_batch(seed: int = 0, n: int = 2):
    rng = np.random.default_rng(seed)
    frames = Tensor(rng.uniform(-1, 1, (n, 2, 3, 8, 8)))
    texts = ["a red square moving left slow", "a blue circle moving up fast",
             "a green triangle moving down slow"][:n]
    captions = [data_mod.tokenize(t) for t in texts]
    return frames, captions


def end_to_end_grad_check(mode: str, tol: float = 1e-4, h: float = 1e-5,
                          sample_per_tensor: int = 2, seed: int = 0) -> dict:
    """Check every model parameter of a small model against central
    differences, through the summed objective. Returns failing reports."""
    model = VLABModel(tiny_model_config(mode), seed=seed)
    model.eval()
    frames, captions = tiny_batch(seed + 1)

    def loss_fn():
        return model.compute_losses(frames, captions, np.random.default_rng(99))["total"]

    reports = dc.grad_check_params(loss_fn, model.named_parameters(), h=h, tol=tol,
                                   sample_per_tensor=sample_per_tensor,
                                   rng=np.random.default_rng(seed + 2))
    return {name: rep for name, rep in reports.items() if not rep.passed}


def _check(condition, message):
    if not condition:
        raise AssertionError(message)


# -- individual invariant checks -------------------------------------------


def check_softmax_stability():
    out = dc.softmax(Tensor([5000.0, 5000.0, -5000.0]), axis=-1)
    _check(np.all(np.isfinite(out.data)), "overflow in softmax")
    _check(abs(out.data.sum() - 1.0) < 1e-12, "softmax does not normalize")


def check_masked_weights_zero():
    rng = np.random.default_rng(0)
    q, k = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    v = Tensor(rng.normal(size=(3, 4)))
    spiked = v.data.copy()
    spiked[2] = 1e15
    allowed = np.array([[1, 1, 0]] * 3, dtype=float)
    a = nn.attention(q, k, v, allowed).data
    b = nn.attention(q, k, Tensor(spiked), allowed).data
    _check(np.array_equal(a, b), "masked positions leak into the output")


def check_causal_no_leakage():
    model = VLABModel(tiny_model_config("single"), seed=3)
    model.eval()
    frames, _ = tiny_batch(4, n=1)
    mem = model.vision_adapted(frames)[0].flat_tokens()
    ids = np.array([[1, 7, 8, 9, 10, 11, 12, 4]])
    base = model.fusion(ids, "causal", mem).data
    for t in range(1, 8):
        bumped = ids.copy()
        bumped[0, t] = 13
        out = model.fusion(bumped, "causal", mem).data
        _check(np.array_equal(out[0, :t], base[0, :t]),
               f"future token {t} leaked into earlier logits")


def check_identity_at_init():
    plain = VisionEncoderPair(seed=5, adapters=False)
    adapted = VisionEncoderPair(seed=5, adapters=True)
    frames, _ = tiny_batch(6, n=1)
    fa, pa = adapted.enc(frames)
    fp, pp = plain.enc(frames)
    _check(np.array_equal(fa.values.data, fp.values.data),
           "fresh adapters change the features")
    _check(np.array_equal(pa.data, pp.data), "fresh adapters change the pooling")


class VisionEncoderPair:
    """Same-seed vision encoder with or without adapters (identity check)."""

    def __init__(self, seed: int, adapters: bool):
        from .vision import VisionEncoder

        self.enc = VisionEncoder(
            8, 4, 3, 8, 2, 2, 8, np.random.default_rng(seed),
            adapter_layers=(0, 1) if adapters else (), adapter_width=4, max_frames=4,
        )


def check_parallel_degeneracy():
    from .fusion import BlendConfig, MultimodalEncoder

    rng = np.random.default_rng(7)
    par = MultimodalEncoder(64, 8, 2, 2, 8, 8, BlendConfig("parallel", True), rng)
    par.alpha.data[()] = 1.0
    par.beta.data[()] = 0.0
    single = MultimodalEncoder(64, 8, 2, 2, 8, 8, BlendConfig("single", True),
                               np.random.default_rng(8))
    src = par.named_parameters()
    for name, p in single.named_parameters().items():
        p.data = src[name].data.copy()
    mem_v = Tensor(np.random.default_rng(9).normal(size=(1, 4, 8)))
    mem_i = Tensor(np.random.default_rng(10).normal(size=(1, 4, 8)))
    ids = np.array([[1, 7, 8, 4]])
    _check(
        np.array_equal(par(ids, "causal", mem_v, mem_i).data,
                       single(ids, "causal", mem_v).data),
        "parallel blend with weights (1, 0) differs from the single branch",
    )


def check_freeze_masks():
    model = VLABModel(tiny_model_config("parallel"), seed=11)
    for stage in ("adapt", "tune", "blend"):
        mask = P.build_freeze_mask(model, stage)
        mask.validate_against(model)
    adapt = P.build_freeze_mask(model, "adapt")
    _check(not adapt.trainable["vision_adapted.blocks.0.attn.wq.weight"],
           "stage 1 leaves the backbone trainable")
    _check(adapt.trainable["vision_adapted.adapters.0.fc1.weight"],
           "stage 1 froze the adapters")
    blend = P.build_freeze_mask(model, "blend")
    _check(not blend.trainable["vision_adapted.adapters.0.fc1.weight"],
           "stage 3 leaves the adapted encoder trainable")


def check_checkpoint_round_trip():
    arrays = {"x.w": np.arange(6, dtype=np.float32).reshape(2, 3),
              "y": np.float32(np.random.default_rng(12).normal(size=(4,)))}
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = os.path.join(tmp, "a"), os.path.join(tmp, "b")
        P.save_checkpoint(p1, arrays)
        P.save_checkpoint(p2, P.load_checkpoint(p1))
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            _check(f1.read() == f2.read(), "checkpoint bytes unstable")


def check_corpus_determinism():
    import hashlib

    def digest(root):
        h = hashlib.sha256()
        for dirpath, _, files in sorted(os.walk(root)):
            for name in sorted(files):
                with open(os.path.join(dirpath, name), "rb") as f:
                    h.update(f.read())
        return h.hexdigest()

    with tempfile.TemporaryDirectory() as tmp:
        a, b = os.path.join(tmp, "a"), os.path.join(tmp, "b")
        data_mod.generate_corpus(10, seed=5, out_dir=a)
        data_mod.generate_corpus(10, seed=5, out_dir=b)
        _check(digest(a) == digest(b), "corpus generation not deterministic")


def op_grad_checks() -> dict:
    """Quick randomized finite-difference pass over every core op."""
    rng = np.random.default_rng(20)
    failures = {}

    def run(name, f, x):
        t = Tensor(x, requires_grad=True)
        report = dc.grad_check(f, t, tol=1e-4, sample=6, rng=rng)
        if not report.passed:
            failures[name] = report

    w = Tensor(rng.normal(size=(4, 3)))
    c3 = Tensor(rng.normal(size=(3,)))
    c23 = Tensor(rng.normal(size=(2, 3)))
    c25 = Tensor(rng.normal(size=(2, 5)))
    c26 = Tensor(rng.normal(size=(2, 6)))
    c2 = Tensor(rng.normal(size=(2,)))
    run("matmul", lambda t: (t @ w).sum(), rng.normal(size=(2, 4)))
    run("add", lambda t: ((t + c3) * c23).sum(), rng.normal(size=(2, 3)))
    run("mul", lambda t: (t * c23).mean(), rng.normal(size=(2, 3)))
    run("softmax", lambda t: (dc.softmax(t, -1) * c25).sum(), rng.normal(size=(2, 5)))
    run("layer_norm", lambda t: (dc.layer_norm(t) * c26).sum(), rng.normal(size=(2, 6)))
    run("gelu", lambda t: dc.gelu(t).sum(), rng.normal(size=(3, 3)))
    run("cross_entropy", lambda t: dc.cross_entropy(t, np.array([1, 0])).mean(),
        rng.normal(size=(2, 5)))
    run("take_rows", lambda t: dc.take_rows(t, np.array([0, 2, 0])).sum(),
        rng.normal(size=(3, 4)))
    run("concat", lambda t: dc.concat([t, t], axis=0).sum(), rng.normal(size=(2, 3)))
    run("getitem", lambda t: (t[1:, :2] * 2.0).sum(), rng.normal(size=(3, 3)))
    run("transpose", lambda t: (t.transpose((1, 0)) @ w).sum(), rng.normal(size=(4, 2)))
    run("pow", lambda t: dc.pow_scalar(t, -0.5).sum(), rng.uniform(0.5, 2.0, (4,)))
    run("mean", lambda t: (t.mean(axis=1) * c2).sum(), rng.normal(size=(2, 4)))
    return failures


def grads_suite() -> list:
    checks = [("op_gradients", lambda: _raise_if(op_grad_checks()))]
    for mode in ("single", "parallel", "stack"):
        checks.append(
            (f"end_to_end_{mode}", lambda m=mode: _raise_if(end_to_end_grad_check(m)))
        )
    return checks


def _raise_if(failures: dict):
    if failures:
        detail = "; ".join(f"{k}: {v}" for k, v in list(failures.items())[:4])
        raise AssertionError(f"{len(failures)} gradient failures: {detail}")


def invariants_suite() -> list:
    return [
        ("softmax_stability", check_softmax_stability),
        ("masked_weights_zero", check_masked_weights_zero),
        ("causal_no_leakage", check_causal_no_leakage),
        ("identity_at_init", check_identity_at_init),
        ("parallel_degeneracy", check_parallel_degeneracy),
        ("freeze_masks", check_freeze_masks),
        ("checkpoint_round_trip", check_checkpoint_round_trip),
        ("corpus_determinism", check_corpus_determinism),
    ]


def run_suite(which: str) -> list:
    """Run the named suite; returns (name, passed, detail) rows."""
    checks = []
    if which in ("grads", "all"):
        checks += grads_suite()
    if which in ("invariants", "all"):
        checks += invariants_suite()
    rows = []
    for name, fn in checks:
        try:
            fn()
            rows.append((name, True, ""))
        except AssertionError as exc:
            rows.append((name, False, str(exc)))
    return rows
