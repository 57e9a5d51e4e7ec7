import hashlib
import logging
import os

import numpy as np
import numpy.testing as npt
import pytest

import vlab.diffcore as dc
from vlab import data as D
from vlab import pipeline as P
from vlab.errors import ConfigError, DataError, NumericError
from vlab.model import ModelConfig, VLABModel


def rng(seed=0):
    return np.random.default_rng(seed)


def small_config(**kw):
    base = dict(vision_width=16, vision_depth=2, fusion_width=16, fusion_depth=2,
                text_width=16, joint_dim=16, adapter_width=4, adapter_layers="all",
                frames=2)
    base.update(kw)
    return ModelConfig(**base)


def params_digest(model, names=None):
    h = hashlib.sha256()
    table = model.named_parameters()
    for name in sorted(names or table):
        h.update(name.encode())
        h.update(table[name].data.tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return D.Corpus(D.generate_corpus(12, seed=11, out_dir=str(root)))


class TestFreezeMask:
    def test_adapt_freezes_backbones(self):
        model = VLABModel(small_config(), seed=0)
        mask = P.build_freeze_mask(model, "adaptive_transferring")
        assert not mask.trainable["vision_adapted.blocks.0.attn.wq.weight"]
        assert not mask.trainable["text.token_emb"]
        assert not mask.trainable["vision_image.blocks.0.attn.wq.weight"]
        assert mask.trainable["vision_adapted.adapters.0.fc1.weight"]
        assert mask.trainable["vision_adapted.proj.weight"]
        assert mask.trainable["fusion.token_emb"]
        assert mask.trainable["temperature"]

    def test_tune_trains_everything(self):
        model = VLABModel(small_config(), seed=0)
        mask = P.build_freeze_mask(model, "integrated_tuning")
        assert all(mask.trainable.values())

    def test_blend_freezes_all_encoders(self):
        model = VLABModel(small_config(blend_mode="parallel"), seed=0)
        mask = P.build_freeze_mask(model, "blend")
        assert not mask.trainable["vision_adapted.adapters.0.fc1.weight"]
        assert not mask.trainable["vision_adapted.blocks.0.attn.wq.weight"]
        assert not mask.trainable["vision_image.blocks.0.attn.wq.weight"]
        assert not mask.trainable["text.token_emb"]
        assert mask.trainable["fusion.blocks.0.ca_v.wq.weight"]
        assert mask.trainable["fusion.alpha"]
        assert mask.trainable["vision_adapted.proj.weight"]

    def test_blend_unfreeze_flags(self):
        model = VLABModel(small_config(), seed=0)
        mask = P.build_freeze_mask(model, "blend", unfreeze_text=True)
        assert mask.trainable["text.token_emb"]
        mask = P.build_freeze_mask(model, "blend", unfreeze_image=True)
        assert mask.trainable["vision_image.blocks.0.attn.wq.weight"]

    def test_covers_every_parameter_exactly_once(self):
        model = VLABModel(small_config(), seed=0)
        mask = P.build_freeze_mask(model, "adapt")
        assert set(mask.trainable) == set(model.named_parameters())
        mask.validate_against(model)

    def test_unknown_stage_rejected(self):
        with pytest.raises(ConfigError):
            P.resolve_stage("warmup")


class TestAdam:
    def test_zero_grads_leave_params_and_decay_moments(self):
        p = dc.Tensor(np.ones(3), requires_grad=True)
        p.is_param = True
        params = {"w": p}
        state = P.AdamState()
        p.grad = np.ones(3)
        P.adam_step(params, {"w": True}, {"new": 0.1, "backbone": 0.1}, state)
        m_before = state.m["w"].copy()
        before = p.data.copy()
        p.grad = np.zeros(3)
        P.adam_step(params, {"w": True}, {"new": 0.0, "backbone": 0.0}, state)
        npt.assert_array_equal(p.data, before)
        assert np.all(np.abs(state.m["w"]) < np.abs(m_before))

    def test_quadratic_descent(self):
        x = dc.Tensor(np.asarray(3.0), requires_grad=True)
        x.is_param = True
        params = {"fusion.x": x}
        state = P.AdamState()
        traj = []
        for _ in range(100):
            x.zero_grad()
            (x * x).backward()
            P.adam_step(params, {"fusion.x": True}, {"new": 0.1, "backbone": 0.1}, state)
            traj.append(abs(float(x.data)))
        # monotone descent until convergence, bounded oscillation after
        settle = next(i for i, v in enumerate(traj) if v < 0.05)
        assert all(b < a for a, b in zip(traj[:settle], traj[1 : settle + 1]))
        assert max(traj[settle:]) < 0.2

    def test_frozen_param_not_updated(self):
        p = dc.Tensor(np.ones(3), requires_grad=True)
        p.grad = np.ones(3) * 5
        P.adam_step({"w": p}, {"w": False}, {"new": 0.1, "backbone": 0.1}, P.AdamState())
        npt.assert_array_equal(p.data, np.ones(3))

    def test_nan_grad_aborts_with_name(self):
        p = dc.Tensor(np.ones(3), requires_grad=True)
        p.grad = np.array([1.0, np.nan, 0.0])
        with pytest.raises(NumericError, match="fusion.bad"):
            P.adam_step({"fusion.bad": p}, {"fusion.bad": True},
                        {"new": 0.1, "backbone": 0.1}, P.AdamState())

    def test_clip_bounds_update_norm(self):
        p = dc.Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 100.0)
        state = P.AdamState()
        P.adam_step({"w": p}, {"w": True}, {"new": 1.0, "backbone": 1.0}, state,
                    grad_clip=1.0)
        npt.assert_allclose(np.linalg.norm(state.m["w"] / 0.1), 1.0, atol=1e-9)


class TestSampleFrames:
    def test_segment_centers_eval(self):
        assert P.sample_frames(16, 4) == [2, 6, 10, 14]

    def test_exact_length(self):
        assert P.sample_frames(4, 4) == [0, 1, 2, 3]

    def test_short_video_pads(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert P.sample_frames(2, 4) == [0, 1, 1, 1]
        assert "padding" in caplog.text

    def test_training_stays_in_segments(self):
        r = rng(1)
        for _ in range(50):
            picks = P.sample_frames(16, 4, training=True, rng=r)
            assert all(lo <= p < lo + 4 for p, lo in zip(picks, [0, 4, 8, 12]))
            assert picks == sorted(picks)

    def test_zero_length_rejected(self):
        with pytest.raises(DataError):
            P.sample_frames(0, 4)


class TestCheckpoint:
    def test_round_trip_byte_stable(self, tmp_path):
        arrays = {"a.w": rng(2).normal(size=(3, 4)).astype(np.float32),
                  "b": np.float32(rng(3).normal(size=(7,)))}
        p1 = tmp_path / "c1.ckpt"
        p2 = tmp_path / "c2.ckpt"
        P.save_checkpoint(p1, arrays)
        loaded = P.load_checkpoint(p1)
        P.save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        for name in arrays:
            npt.assert_array_equal(loaded[name], arrays[name])

    def test_magic_enforced(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTACKPT" + b"\0" * 8)
        with pytest.raises(DataError):
            P.load_checkpoint(bad)

    def test_meta_text_round_trip(self):
        text = "seed=3\nsteps_adapt=50\n"
        assert P.decode_meta_text(P.encode_meta_text(text)) == text


class TestRunStage:
    def test_freeze_invariance_and_logs(self, corpus, tmp_path):
        model = VLABModel(small_config(), seed=1)
        frozen = P.build_freeze_mask(model, "adapt").frozen_names()
        before = params_digest(model, frozen)
        cfg = P.StageConfig("adapt", steps=4, batch_size=2, seed=5)
        logs = P.run_stage(cfg, corpus, model, tmp_path / "a.ckpt",
                           tmp_path / "a.jsonl")
        assert params_digest(model, frozen) == before
        assert [e["step"] for e in logs] == [1, 2, 3, 4]
        assert set(logs[0]) == {"step", "l_vtc", "l_mlm", "l_unilm", "l_total"}
        assert os.path.exists(tmp_path / "a.ckpt")

    def test_blend_leaves_both_vision_encoders(self, corpus, tmp_path):
        # the pooled projection heads stay trainable; the encoders proper freeze
        model = VLABModel(small_config(blend_mode="parallel"), seed=2)
        vision_names = [n for n in model.named_parameters()
                        if n.startswith(("vision_adapted.", "vision_image."))
                        and ".proj." not in n]
        before = params_digest(model, vision_names)
        cfg = P.StageConfig("blend", steps=3, batch_size=2, seed=6)
        P.run_stage(cfg, corpus, model, tmp_path / "b.ckpt")
        assert params_digest(model, vision_names) == before

    def test_loss_decreases_on_overfit_batch(self, corpus, tmp_path):
        model = VLABModel(small_config(), seed=3)
        cfg = P.StageConfig("tune", steps=40, batch_size=4, seed=7, drop_path=0.0)
        logs = P.run_stage(cfg, corpus, model, tmp_path / "c.ckpt")
        first = np.mean([e["l_total"] for e in logs[:5]])
        last = np.mean([e["l_total"] for e in logs[-5:]])
        assert last < first * 0.8

    def test_deterministic_checkpoint_bytes(self, corpus, tmp_path):
        for tag in ("r1", "r2"):
            model = VLABModel(small_config(), seed=4)
            cfg = P.StageConfig("adapt", steps=3, batch_size=2, seed=8)
            P.run_stage(cfg, corpus, model, tmp_path / f"{tag}.ckpt",
                        config_text="probe=1\n")
        assert (tmp_path / "r1.ckpt").read_bytes() == (tmp_path / "r2.ckpt").read_bytes()

    def test_checkpoint_carries_stage_and_config(self, corpus, tmp_path):
        model = VLABModel(small_config(), seed=4)
        cfg = P.StageConfig("tune", steps=2, batch_size=2, seed=9)
        P.run_stage(cfg, corpus, model, tmp_path / "d.ckpt", config_text="k=v\n")
        arrays = P.load_checkpoint(tmp_path / "d.ckpt")
        assert P.checkpoint_stage(arrays) == "tune"
        assert P.decode_meta_text(arrays["_meta.config"]) == "k=v\n"
