import json
import warnings

import numpy as np
import pytest

from nutrirec.autodiff import ParamStore
from nutrirec.errors import ConfigError, DivergenceError, ShapeError
from nutrirec.graphdata import SynthSpec, generate_synthetic, split_interactions
from nutrirec.structlearn import GraphContext
from nutrirec.trainer import (
    Checkpoint,
    TrainConfig,
    TrainHistory,
    load_checkpoint,
    save_checkpoint,
    train,
)

FAST = dict(dim=8, heads=2, epochs=4, lr=1e-2, eps_ft=0.3, eps_h=0.3, pool_size=10, set_size=4)


def run(toy, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return train(*toy, TrainConfig(**{**FAST, **kw}))


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(dim=0), dict(lr=0), dict(lr_decay=1.5), dict(pool_size=3, set_size=4),
                                     dict(grad_normalization="max"), dict(batch_size=0),
                                     dict(use_bpr=False, use_health=False, use_diversity=False)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_objectives(self):
        assert TrainConfig().objectives == ("bpr", "health", "diversity")
        assert TrainConfig(use_health=False).objectives == ("bpr", "diversity")
        assert TrainConfig(baseline=True, use_bpr=False).objectives == ("bpr",)

    def test_lr_schedule(self):
        c = TrainConfig(lr=1e-3, lr_period=200, lr_decay=0.5)
        assert c.lr_at(0) == 1e-3 and c.lr_at(199) == 1e-3
        assert c.lr_at(200) == 5e-4 and c.lr_at(450) == 2.5e-4

    def test_dict_roundtrip_and_hash(self):
        c = TrainConfig(dim=16, seed=4)
        assert TrainConfig.from_dict(c.to_dict()) == c
        assert c.hash() == TrainConfig(dim=16, seed=4).hash() != TrainConfig(dim=16, seed=5).hash()

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})


class TestTrain:
    def test_history_fields(self, toy):
        ckpt, hist = run(toy)
        assert len(hist) == 4
        e = hist.entries[-1]
        assert set(e) >= {"epoch", "lr", "losses", "alpha", "grad_norm", "mgda_gap", "channel_weights"}
        for entry in hist.entries:
            a = np.array(entry["alpha"])
            assert len(a) == 3 and (a >= 0).all() and a.sum() == pytest.approx(1.0, abs=1e-9)
        assert ckpt.manifest["step"] == 4 and ckpt.store.adam.step == 4
        assert ckpt.manifest["config_hash"] == ckpt.config.hash()

    def test_deterministic(self, toy):
        a, ha = run(toy, epochs=3)
        b, hb = run(toy, epochs=3)
        for n in a.store.names:
            assert np.array_equal(a.store[n], b.store[n])
        strip = lambda h: [{k: v for k, v in e.items() if k != "wall_time"} for e in h.entries]
        assert strip(ha) == strip(hb)

    def test_seed_changes_result(self, toy):
        a, _ = run(toy, epochs=2, seed=0)
        b, _ = run(toy, epochs=2, seed=1)
        assert not np.array_equal(a.store["embed.H0"], b.store["embed.H0"])

    def test_baseline_mode(self, toy):
        ckpt, hist = run(toy, baseline=True, epochs=3)
        assert hist.entries[0]["objectives"] == ["bpr"]
        assert hist.entries[0]["channel_weights"] == [1.0, 0.0, 0.0]
        assert hist.entries[0]["alpha"] == [1.0]

    def test_single_objective_alpha(self, toy):
        _, hist = run(toy, use_health=False, use_diversity=False, epochs=2)
        assert all(e["alpha"] == [1.0] for e in hist.entries)

    def test_l2_normalisation(self, toy):
        _, hist = run(toy, grad_normalization="l2", epochs=2)
        assert np.isfinite(hist.losses("bpr")).all()

    def test_minibatch(self, toy):
        _, hist = run(toy, minibatch=True, n_batches=2, epochs=2)
        assert len(hist.entries[0]["step_alphas"]) == 2

    def test_bpr_decreases(self, toy):
        _, hist = run(toy, use_health=False, use_diversity=False, epochs=40, lr=2e-2)
        bpr = hist.losses("bpr")
        assert bpr[-5:].mean() < bpr[:5].mean()

    def test_divergence_names_epoch(self, toy):
        ckpt, _ = run(toy, epochs=1)
        bad = ckpt.store.copy()
        bad["embed.H0"] = np.full_like(bad["embed.H0"], np.nan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(DivergenceError, match="epoch 0"):
                train(*toy, TrainConfig(**FAST), init=bad)

    def test_history_file(self, toy, tmp_path):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, hist = train(*toy, TrainConfig(**{**FAST, "epochs": 2}), history_path=tmp_path / "h.jsonl")
        again = TrainHistory.read(tmp_path / "h.jsonl")
        assert again.entries == json.loads(json.dumps(hist.entries))

    def test_empty_train_split(self, toy):
        bundle, split = toy
        empty = type(split)(np.zeros(0, dtype=np.int64), split.valid, split.test, 0)
        with pytest.raises(ValueError):
            train(bundle, empty, TrainConfig(**FAST))


class TestCheckpoint:
    def test_roundtrip(self, toy, tmp_path):
        ckpt, _ = run(toy, epochs=2)
        path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
        again = load_checkpoint(path)
        assert again.config == ckpt.config
        assert again.store.adam.step == 2
        for n in ckpt.store.names:
            assert np.array_equal(again.store[n], ckpt.store[n])

    def test_incompatible_bundle(self, toy):
        ckpt, _ = run(toy, epochs=1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            other = generate_synthetic(SynthSpec(n_users=25, n_foods=30, density=0.15), seed=0)
        ctx = GraphContext.from_bundle(other, split_interactions(other).train)
        with pytest.raises(ShapeError, match="embed.H0|signed"):
            ckpt.check_compatible(ctx)

    def test_missing_parameter(self, toy):
        ckpt, _ = run(toy, epochs=1)
        partial = Checkpoint(ParamStore({"embed.H0": ckpt.store["embed.H0"]}), ckpt.config, {})
        with pytest.raises(ShapeError, match="lacks"):
            partial.check_compatible(GraphContext.from_bundle(toy[0], toy[1].train))
