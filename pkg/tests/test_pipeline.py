"""End-to-end model drivers and the training loop."""
import numpy as np
import pytest

from refseg import losses as L
from refseg import mso as M
from refseg import patch as P
from refseg import tensor as T
from refseg import train as TR
from refseg.config import RunConfig, apply_overrides
from refseg.model import Model
from refseg.scene import generate_scene


def small_config(**over) -> RunConfig:
    base = {"data.videos": "2", "train.optimizer": "adamw", "train.lr": "0.002", "train.checkpoint_every": "5"}
    base.update(over)
    return apply_overrides(RunConfig(), base)


@pytest.fixture(scope="module")
def model():
    return Model(RunConfig())


@pytest.fixture(scope="module")
def scene():
    return generate_scene(11, objects=5, expressions=5)


class TestInference:
    def test_single_equals_multi_for_one_expression(self, model, scene):
        for e in range(3):
            (a,) = model.infer(scene.frames, scene.expressions[e:e + 1], "single")
            (b,) = model.infer(scene.frames, scene.expressions[e:e + 1], "multi")
            assert a.mask_logits.tobytes() == b.mask_logits.tobytes()
            assert a.boxes.tobytes() == b.boxes.tobytes()
            assert a.scores.tobytes() == b.scores.tobytes()
            assert a.query == b.query

    @pytest.mark.parametrize("mode", ["single", "multi"])
    def test_output_shapes(self, model, scene, mode):
        results = model.infer(scene.frames, scene.expressions, mode)
        assert len(results) == 5
        for r in results:
            assert r.mask_logits.shape == (3, 64, 64)
            assert r.boxes.shape == (3, 4) and r.scores.shape == (3,)
            assert ((r.boxes >= 0) & (r.boxes <= 1)).all()
            assert r.masks().dtype == bool

    @pytest.mark.parametrize("n", [1, 3, 5])
    def test_counters(self, model, scene, n):
        model.counters.reset()
        model.infer(scene.frames, scene.expressions[:n], "multi")
        assert (model.counters.encoder, model.counters.visual, model.counters.fusion) == (1, 1, 1)
        model.counters.reset()
        model.infer(scene.frames, scene.expressions[:n], "single")
        assert (model.counters.encoder, model.counters.visual, model.counters.fusion) == (n, n, n)

    def test_multi_expressions_interact_only_through_fusion(self, model, scene):
        # A different companion expression changes the shared fused features.
        a = model.infer(scene.frames, [scene.expressions[0], scene.expressions[1]], "multi")[0]
        b = model.infer(scene.frames, [scene.expressions[0], scene.expressions[2]], "multi")[0]
        assert not np.array_equal(a.mask_logits, b.mask_logits)

    def test_query_has_highest_mean_score(self, model, scene):
        with T.no_grad():
            words, sentence = model.text(np.asarray(scene.expressions[:1]))
            feats = model.visual(scene.frames)
            out = model.instances(model.encode(model.fuse(words[0], feats)), words, sentence, 64)
        (r,) = model.infer(scene.frames, scene.expressions[:1], "single")
        assert r.query == int(np.argmax(out.score_logits.data[0].mean(axis=0)))

    def test_rejects_bad_mode(self, model, scene):
        with pytest.raises(ValueError):
            model.infer(scene.frames, scene.expressions[:1], "batch")

    def test_disabled_optimizer_is_frozen_identity(self):
        cfg = apply_overrides(RunConfig(), {"mso.enabled": "false"})
        m = Model(cfg)
        rng = np.random.default_rng(0)
        mask16 = T.Tensor(rng.normal(size=(2, 16, 4, 4)))
        feats = {8: T.Tensor(rng.normal(size=(2, 32, 8, 8))), 4: T.Tensor(rng.normal(size=(2, 32, 16, 16)))}
        zero = M.init_mso_params(rng, 32, 4, 16, zero=True)
        ref = M.optimize_masks(T.reshape(mask16, (2, 1, 16, 4, 4)), feats[8], feats[4], zero).data[:, 0]
        assert m.refine(mask16, feats).data.tobytes() == ref.tobytes()

    def test_patch_to_full_values_matches_graph(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 16, 4, 4))
        np.testing.assert_allclose(Model.patch_to_full_values(x), Model.patch_to_full(T.Tensor(x)).data,
                                   rtol=0, atol=1e-12)


class TestTraining:
    def test_loss_zero_matches_checkpoint_zero(self, tmp_path):
        cfg = small_config()
        result = TR.train(cfg, tmp_path, iters=6)
        assert [p.name for p in result.checkpoints] == ["ckpt_000000.npz", "ckpt_000005.npz", "final.npz"]
        corpus = TR.corpus_from_config(cfg)
        for ckpt, step in (("ckpt_000000.npz", 0), ("ckpt_000005.npz", 5)):
            m = TR.load_model(tmp_path / ckpt)
            with T.no_grad():
                loss, _ = TR.batch_loss(m, corpus, TR.loss_weights(cfg))
            assert loss.item() == result.losses[step]

    def test_deterministic(self):
        cfg = small_config()
        a = TR.train(cfg, iters=4)
        b = TR.train(small_config(), iters=4)
        assert a.losses == b.losses
        sa, sb = a.model.store.state(), b.model.store.state()
        assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)

    @pytest.mark.parametrize("optimizer,lr", [("sgd", "0.05"), ("adamw", "0.002")])
    def test_loss_decreases(self, optimizer, lr):
        result = TR.train(small_config(**{"train.optimizer": optimizer, "train.lr": lr}), iters=15)
        assert result.losses[-1] < result.losses[0]

    def test_smoothed_loss_non_increasing(self):
        cfg = small_config(**{"data.videos": "1"})
        losses = np.array(TR.train(cfg, iters=200).losses)
        windows = losses.reshape(4, 50).mean(axis=1)
        assert (np.diff(windows) <= 0).all(), windows

    def test_matching_picks_min_cost(self):
        cfg = small_config()
        m, corpus = Model(cfg), TR.corpus_from_config(cfg)
        w = TR.loss_weights(cfg)
        with T.no_grad():
            _, matched = TR.batch_loss(m, corpus, w)
            out, _ = m.forward_pairs(corpus.frames, corpus.pair_video, corpus.tokens)
            full = T.Tensor(m.patch_to_full(out.patch_masks).data)
            cost = L.matching_cost(L.Prediction(full, full, out.boxes, out.score_logits), corpus.gt, w)
        np.testing.assert_array_equal(matched, np.argmin(cost, axis=-1))

    def test_non_finite_loss_aborts(self):
        cfg = small_config()
        corpus = TR.corpus_from_config(cfg)
        corpus.frames = corpus.frames.copy()
        corpus.frames[0, 0, 0, 0, 0] = np.nan
        with pytest.raises(TR.TrainingDivergedError, match="iteration 0"):
            TR.train(cfg, corpus=corpus, iters=2)

    def test_callback_stops(self):
        seen = []
        result = TR.train(small_config(), iters=10, callback=lambda i, m: seen.append(i) or i == 2)
        assert seen == [0, 1, 2] and len(result.losses) == 3

    def test_evaluate_keys(self):
        cfg = small_config()
        scenes = TR.corpus_from_config(cfg).scenes
        scores = TR.evaluate(Model(cfg), scenes)
        assert set(scores) >= {"J", "F", "JF"}
        assert all(0 <= v <= 1 for v in scores.values())

    def test_gradients_reach_every_block(self):
        cfg = small_config()
        m, corpus = Model(cfg), TR.corpus_from_config(cfg)
        loss, _ = TR.batch_loss(m, corpus, TR.loss_weights(cfg))
        loss.backward()
        grads = m.store.grads()
        prefixes = {k.split(".")[0] for k, g in grads.items() if np.abs(g).sum() > 0}
        assert prefixes >= {"visual", "text", "scf", "level", "encoder", "gate", "queries", "decoder", "cpk",
                            "score", "box", "mso"}
        assert all(np.isfinite(g).all() for g in grads.values())


def test_patch_masks_layout():
    m = Model(RunConfig())
    s = generate_scene(0)
    with T.no_grad():
        words, sentence = m.text(np.asarray(s.expressions))
        feats = m.visual(s.frames)
        enc = m.encode(m.fuse([words[e] for e in range(2)], feats, multi=True))
        out = m.instances(enc, words, sentence, 64)
    assert out.patch_masks.shape == (2, 3, 5, 16, 4, 4)
    assert P.flatten_patches(out.patch_masks.data).shape == (2, 3, 5, 16, 16)
