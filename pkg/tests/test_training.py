import json
import math

import numpy as np
import pytest

from docmamba.datapipe import GrammarConfig, synth_corpus
from docmamba.doc_model import DocMamba, ModelConfig, load_checkpoint
from docmamba.doc_model.checkpoint import checkpoint_bytes
from docmamba.errors import ContractError, NumericError
from docmamba.training import (
    AdamState, TrainConfig, TrainingAborted, adam_step, decays, finetune_tagging, gradcheck,
    lr_multiplier, train_mlm,
)

SMALL = GrammarConfig(min_tokens=24, max_tokens=90)


class TestSchedule:
    def test_peak_exact(self):
        assert lr_multiplier(100, 1000, 0.1) == 1.0
        assert lr_multiplier(0, 1000, 0.1) == 0.0
        assert lr_multiplier(1000, 1000, 0.1) == 0.0

    def test_piecewise_linear(self):
        xs = [lr_multiplier(s, 1000) for s in range(1001)]
        up = np.diff(xs[:101])
        down = np.diff(xs[100:])
        assert np.allclose(up, 0.01) and np.allclose(down, -1 / 900)

    def test_constant(self):
        assert lr_multiplier(3, 10, schedule="constant") == 1.0


class TestAdam:
    def cfg(self, **kw):
        base = dict(lr=0.1, total_steps=10_000, warmup_fraction=0.0, weight_decay=0.0, grad_clip_norm=None)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_grads(self):
        p = {"w": np.array([1.5, -2.0])}
        st = AdamState()
        adam_step(p, {"w": np.array([0.4, 0.4])}, st, self.cfg(), 1)
        before = p["w"].copy()
        m0 = st.m["w"].copy()
        adam_step(p, {"w": np.zeros(2)}, st, self.cfg(lr=0.0), 2)
        assert (p["w"] == before).all()
        assert np.allclose(st.m["w"], 0.9 * m0)

    def test_unit_step(self):
        # bias-corrected moments of a constant gradient equal g and g^2
        p = {"w": np.array([0.0])}
        st = AdamState()
        cfg = self.cfg(lr=1e-3, schedule="constant")
        prev = 0.0
        for t in range(1, 200):
            adam_step(p, {"w": np.array([0.3])}, st, cfg, t)
            step = prev - p["w"][0]
            prev = p["w"][0]
        assert math.isclose(step, 1e-3, rel_tol=1e-6)

    def test_rejects_non_finite(self):
        p = {"w": np.ones(3)}
        st = AdamState()
        assert not adam_step(p, {"w": np.array([1.0, np.nan, 0.0])}, st, self.cfg(), 1)
        assert st.rejected == 1 and (p["w"] == 1).all() and st.steps == 0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adam_step({"w": np.ones(3)}, {"w": np.ones(2)}, AdamState(), self.cfg(), 1)

    def test_step_zero(self):
        with pytest.raises(ContractError):
            adam_step({"w": np.ones(1)}, {"w": np.ones(1)}, AdamState(), self.cfg(), 0)

    def test_decay_exclusions(self):
        assert decays("layers.0.in_proj") and decays("embed.tokens")
        for name in ("layers.0.norm_weight", "final_norm", "mlm_head.bias", "layers.1.scan_fwd.a_log",
                     "layers.1.scan_bwd.d_skip", "layers.0.scan_fwd.dt_bias", "tag_head.bias"):
            assert not decays(name)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = TrainConfig(lr=2e-5, total_steps=7, grad_clip_norm=None)
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.load(path) == cfg

    def test_unknown_key(self):
        with pytest.raises(ContractError):
            TrainConfig.from_dict({"lr": 1.0, "learning_rate": 2.0})


class TestMlm:
    def test_lr_zero_bitwise(self):
        docs = synth_corpus(0, 6, SMALL)
        init = DocMamba.init(ModelConfig.tiny(), 3)
        res = train_mlm(docs, model=init.copy(), config=TrainConfig(lr=0.0, total_steps=5, batch_tokens=256))
        assert checkpoint_bytes(res.model) == checkpoint_bytes(init)

    def test_deterministic_and_logged(self, tmp_path):
        docs = synth_corpus(1, 8, SMALL)
        cfg = TrainConfig(lr=3e-3, total_steps=6, batch_tokens=256, checkpoint_every=3)
        a = train_mlm(docs, ModelConfig.tiny(), cfg, out_dir=tmp_path / "a")
        b = train_mlm(docs, ModelConfig.tiny(), cfg, out_dir=tmp_path / "b")
        assert a.losses == b.losses
        assert [p.rsplit("/", 1)[1] for p in a.checkpoints] == ["mlm_step000003.ckpt", "mlm_step000006.ckpt",
                                                                "mlm_final.ckpt"]
        for pa, pb in zip(a.checkpoints, b.checkpoints):
            assert open(pa, "rb").read() == open(pb, "rb").read()
        recs = [json.loads(line) for line in (tmp_path / "a" / "mlm_metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in recs] == list(range(1, 7))
        assert {"step", "loss", "lr", "wall_time"} <= set(recs[0])
        model, meta = load_checkpoint(a.checkpoints[-1])
        assert meta["step"] == 6 and checkpoint_bytes(model, meta) == open(a.checkpoints[-1], "rb").read()

    def test_loss_falls(self):
        docs = synth_corpus(2, 30, SMALL)
        res = train_mlm(docs, ModelConfig.tiny(), TrainConfig(lr=3e-3, total_steps=150, batch_tokens=512))
        assert np.mean(res.losses[-20:]) < 0.8 * np.mean(res.losses[:5])

    @pytest.mark.slow
    def test_tiny_loss_halves(self):
        docs = synth_corpus(0, 200, GrammarConfig(min_tokens=32, max_tokens=128))
        res = train_mlm(docs, ModelConfig.tiny(), TrainConfig(lr=3e-3, total_steps=2000, batch_tokens=1024))
        assert np.mean(res.losses[-20:]) < 0.5 * np.mean(res.losses[:5])

    def test_empty_corpus(self):
        with pytest.raises(ContractError):
            train_mlm([], ModelConfig.tiny(), TrainConfig(total_steps=1))

    def test_abort_keeps_last_good(self, tmp_path, monkeypatch):
        docs = synth_corpus(3, 6, SMALL)
        model = DocMamba.init(ModelConfig.tiny(), 0)
        real = model.mlm_loss_and_grads
        calls = {"n": 0}

        def flaky(*a, **k):
            calls["n"] += 1
            if calls["n"] == 4:
                raise NumericError("non-finite state", step=5)
            return real(*a, **k)

        monkeypatch.setattr(model, "mlm_loss_and_grads", flaky)
        with pytest.raises(TrainingAborted) as exc:
            train_mlm(docs, model=model, config=TrainConfig(total_steps=10, batch_tokens=256, checkpoint_every=2),
                      out_dir=tmp_path)
        assert exc.value.step == 4
        assert exc.value.last_checkpoint.endswith("mlm_step000002.ckpt")
        load_checkpoint(exc.value.last_checkpoint)
        assert not list(tmp_path.glob("*.tmp"))


class TestFinetune:
    def test_zero_steps_zero_head_is_all_o(self):
        docs = synth_corpus(4, 6, SMALL)
        model = DocMamba.init(ModelConfig.tiny(), 0)
        res = finetune_tagging(docs, model, TrainConfig(total_steps=0, head_init="zero", freeze_backbone=True))
        assert res.f1_curve == [{"step": 0, "train_f1": 0.0}]
        assert not model.params["tag_head.weight"].any()

    def test_split_must_be_disjoint(self):
        docs = synth_corpus(4, 6, SMALL)
        with pytest.raises(ContractError):
            finetune_tagging(docs[:4], DocMamba.init(ModelConfig.tiny()), TrainConfig(total_steps=1),
                             eval_docs=docs[3:])

    def test_frozen_backbone_only_moves_head(self):
        docs = synth_corpus(5, 4, SMALL)
        model = DocMamba.init(ModelConfig.tiny(), 0)
        before = model.copy()
        finetune_tagging(docs, model, TrainConfig(total_steps=3, freeze_backbone=True, batch_tokens=256),
                         eval_docs=synth_corpus(6, 2, SMALL))
        for k, v in model.params.items():
            assert (v == before.params[k]).all() != k.startswith("tag_head"), k

    def test_requires_tags(self):
        docs = synth_corpus(5, 2, SMALL)
        for w in docs[0].words:
            w.entity_tag = None
        with pytest.raises(ContractError):
            finetune_tagging(docs, DocMamba.init(ModelConfig.tiny()), TrainConfig(total_steps=1))

    def test_learns(self):
        docs = synth_corpus(7, 8, SMALL)
        res = finetune_tagging(docs, DocMamba.init(ModelConfig.tiny(), 0),
                               TrainConfig(lr=3e-3, total_steps=300, batch_tokens=512, eval_every=100,
                                           target_f1=0.9))
        assert res.f1_curve[-1]["train_f1"] >= 0.9


@pytest.fixture(scope="module")
def overfit_losses():
    docs = synth_corpus(9, 32, GrammarConfig(min_tokens=32, max_tokens=128))
    res = finetune_tagging(docs, DocMamba.init(ModelConfig.tiny(), 0),
                           TrainConfig(lr=3e-3, total_steps=1100, batch_tokens=512, eval_every=1100))
    losses = np.array(res.losses)
    return np.convolve(losses, np.ones(100) / 100, "valid")[:1001]


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="loss reaches a ~1e-4 floor by step ~300; the average then tracks "
                                       "minibatch noise and rises at about a third of steps")
def test_overfit_moving_average_strictly_falls(overfit_losses):
    assert int((np.diff(overfit_losses) >= 0).sum()) <= 5


@pytest.mark.slow
def test_overfit_moving_average_trend(overfit_losses):
    # weaker companion to the strict property above, not a replacement for it
    ma = overfit_losses
    assert ma[200] < 0.01 * ma[0] and ma[1000] < ma[200]


class TestGradcheck:
    def test_default_covers_all_families(self):
        r = gradcheck(seed=11)
        assert r["num_parameters"] <= 10_000
        assert set(r["families"]) == {"tables", "heads", "norms", "conv", "a_log", "ssm_vectors", "projections"}
        assert r["n_checked"] >= 200 and r["n_informative"] >= 150
        assert r["max_rel_err"] < 1e-4 and r["max_rel_err_informative"] < 1e-4

    def test_head_only_toy(self):
        r = gradcheck(ModelConfig.tiny(layers=0, hidden=8), seed=0)
        assert r["max_rel_err"] < 1e-8
        assert set(r["families"]) == {"tables", "heads", "norms"}

    def test_detects_a_wrong_gradient(self, monkeypatch):
        real = DocMamba.mlm_loss_and_grads

        def broken(self, *a, **k):
            loss, n, g = real(self, *a, **k)
            g["layers.0.conv_fwd"] = g["layers.0.conv_fwd"] * 1.01
            return loss, n, g

        monkeypatch.setattr(DocMamba, "mlm_loss_and_grads", broken)
        r = gradcheck(seed=11)
        assert r["max_rel_err"] > 5e-3 and r["worst_param"] == "layers.0.conv_fwd"
