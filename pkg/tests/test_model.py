"""Detector model: gate mapping, aggregation, decode/NMS, checkpoints."""

import math

import numpy as np
import pytest

from oracles import cross_entropy_reference, nms_reference
from talgate.errors import ConfigError, FormatError
from talgate.model import (FrameOutputs, ModelConfig, ModelState, Proposal,
                           aggregate, backward_video, decode_proposals,
                           forward_video, frame_targets, head_forward,
                           lambda_from_advantage, load_checkpoint, nms,
                           predict_advantage, predict_corpus, predict_video,
                           save_checkpoint, template_loss, template_loss_grad,
                           tiou)
from talgate.nn import Rng, ShapeError, grad_check
from talgate.synthgen import (Corpus, LanguageBundle, Segment, generate_corpus,
                              GenConfig)


def tiny_model_config(**overrides):
    base = dict(dim=5, num_classes=3, head_layers=2, kernel=3)
    base.update(overrides)
    return ModelConfig(**base)


def random_bundle(rng, L, D):
    return LanguageBundle(rng.normal_matrix(L, D), rng.normal_matrix(L, D),
                          rng.normal_matrix(L, D))


class TestModelConfig:
    @pytest.mark.parametrize("overrides, field", [
        (dict(num_classes=1), "num_classes"),
        (dict(kernel=2), "kernel"),
        (dict(head_layers=0), "head_layers"),
        (dict(nms_tiou=0.0), "nms_tiou"),
        (dict(score_threshold=1.0), "score_threshold"),
        (dict(lambda_mode="magic"), "lambda_mode"),
        (dict(fixed_lambda=1.5), "fixed_lambda"),
        (dict(hidden=0), "hidden"),
    ])
    def test_bad_value_names_field(self, overrides, field):
        with pytest.raises(ConfigError, match=field):
            tiny_model_config(**overrides).validate()


class TestGate:
    def test_exact_values(self):
        assert lambda_from_advantage(np.array([[0.0]]))[0, 0] == 0.0
        assert lambda_from_advantage(np.array([[-5.0]]))[0, 0] == 0.0
        half = lambda_from_advantage(np.array([[math.log(3.0)]]))[0, 0]
        assert half == pytest.approx(0.5, abs=1e-15)

    def test_property_suite(self):
        rng = Rng(1)
        x = rng.normal_matrix(10_000, 1, sigma=8.0)
        lam = lambda_from_advantage(x)
        assert np.all(lam >= 0.0) and np.all(lam < 1.0)
        assert np.all(lam[x <= 0.0] == 0.0)
        order = np.argsort(x[:, 0])
        assert np.all(np.diff(lam[order, 0]) >= 0.0)

    def test_matches_doubled_sigmoid_form(self):
        x = Rng(2).normal_matrix(100, 1, sigma=3.0)
        lam = lambda_from_advantage(x)
        direct = 2.0 / (1.0 + np.exp(-np.maximum(x, 0.0))) - 1.0
        np.testing.assert_allclose(lam, np.minimum(direct, np.nextafter(1.0, 0.0)),
                                   atol=1e-15)

    def test_saturation_stays_below_one(self):
        assert lambda_from_advantage(np.array([[1e6]]))[0, 0] < 1.0


class TestAdvantageHead:
    def test_zero_parameters_zero_output(self):
        state = ModelState(tiny_model_config(), rng=None)
        state.adv_fc.b.value[...] = 0.0
        out = predict_advantage(np.ones((9, 5)), state)
        assert out.shape == (9, 1)
        assert np.array_equal(out, np.zeros((9, 1)))

    def test_matches_affine_oracle(self):
        rng = Rng(3)
        state = ModelState(tiny_model_config(), rng)
        x = rng.normal_matrix(6, 5)
        expected = x @ state.adv_fc.w.value + state.adv_fc.b.value
        np.testing.assert_allclose(predict_advantage(x, state), expected, atol=1e-12)

    def test_shape_mismatch(self):
        state = ModelState(tiny_model_config(), None)
        with pytest.raises(ShapeError):
            predict_advantage(np.ones((4, 7)), state)


class TestAggregate:
    def test_zero_gate_returns_vision_bitwise(self):
        rng = Rng(4)
        vis = rng.normal_matrix(8, 5)
        bundle = random_bundle(rng, 8, 5)
        f_cls, f_loc = aggregate(vis, bundle, np.zeros((8, 1)))
        assert f_cls.tobytes() == vis.tobytes()
        assert f_loc.tobytes() == vis.tobytes()

    def test_zero_streams_return_vision(self):
        rng = Rng(5)
        vis = rng.normal_matrix(8, 5)
        bundle = LanguageBundle(np.zeros((8, 5)), np.zeros((8, 5)), np.zeros((8, 5)))
        lam = rng.normal_matrix(8, 1) ** 2
        f_cls, f_loc = aggregate(vis, bundle, lam)
        assert np.array_equal(f_cls, vis) and np.array_equal(f_loc, vis)

    def test_matches_elementwise_oracle(self):
        rng = Rng(6)
        vis = rng.normal_matrix(4, 3)
        bundle = random_bundle(rng, 4, 3)
        lam = np.abs(rng.normal_matrix(4, 1))
        f_cls, f_loc = aggregate(vis, bundle, lam)
        for l in range(4):
            for d in range(3):
                assert f_cls[l, d] == vis[l, d] + lam[l, 0] * bundle.cls_stream[l, d]
                assert f_loc[l, d] == vis[l, d] + lam[l, 0] * bundle.loc_stream[l, d]

    def test_language_is_bounded_refinement(self):
        rng = Rng(7)
        vis = rng.normal_matrix(30, 5)
        bundle = random_bundle(rng, 30, 5)
        lam = lambda_from_advantage(rng.normal_matrix(30, 1, 2.0))
        f_cls, _ = aggregate(vis, bundle, lam)
        assert np.abs(f_cls - vis).max() <= lam.max() * np.abs(bundle.cls_stream).max() + 1e-12

    def test_shape_errors(self):
        vis = np.zeros((4, 3))
        bundle = LanguageBundle(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((4, 3)))
        with pytest.raises(ShapeError):
            aggregate(vis, bundle, np.zeros((3, 1)))
        bad = LanguageBundle(np.zeros((4, 4)), np.zeros((4, 3)), np.zeros((4, 3)))
        with pytest.raises(ShapeError):
            aggregate(vis, bad, np.zeros((4, 1)))


class TestHeadForward:
    def test_output_ranges(self):
        rng = Rng(8)
        state = ModelState(tiny_model_config(), rng)
        x = rng.normal_matrix(16, 5, 3.0)
        outputs, _ = head_forward(x, x, state)
        assert np.all(outputs.offsets >= 0.0)
        assert np.all((outputs.cls_scores > 0.0) & (outputs.cls_scores < 1.0))
        assert outputs.tmpl_logits.shape == (16, 4)

    def test_no_dead_parameterization(self):
        rng = Rng(9)
        state = ModelState(tiny_model_config(), rng)
        x = rng.normal_matrix(16, 5)
        before, _ = head_forward(x, x, state)
        for conv in state.cls_trunk + state.loc_trunk:
            conv.w.value *= 2.0
        after, _ = head_forward(x, x, state)
        assert np.abs(after.cls_scores - before.cls_scores).max() > 0.0
        assert np.abs(after.offsets - before.offsets).max() > 0.0


class TestForwardModes:
    def test_vision_view_invariant_to_language(self):
        rng = Rng(10)
        state = ModelState(tiny_model_config(lambda_mode="learned"), rng)
        vis = rng.normal_matrix(20, 5)
        aligned = random_bundle(rng, 20, 5)
        conflicted = random_bundle(rng, 20, 5)
        zeroed = LanguageBundle(np.zeros((20, 5)), np.zeros((20, 5)), np.zeros((20, 5)))
        outs = [forward_video(state, vis, b, lambda_override=0.0)[0]
                for b in (aligned, conflicted, zeroed)]
        pure, _ = forward_video(state, vis, None)
        for o in outs:
            assert o.cls_scores.tobytes() == pure.cls_scores.tobytes()
            assert o.offsets.tobytes() == pure.offsets.tobytes()
            assert o.tmpl_logits.tobytes() == pure.tmpl_logits.tobytes()

    def test_fixed_zero_mode_equals_vision_path(self):
        rng = Rng(11)
        state = ModelState(tiny_model_config(lambda_mode="fixed", fixed_lambda=0.0), rng)
        vis = rng.normal_matrix(12, 5)
        bundle = random_bundle(rng, 12, 5)
        gated, _ = forward_video(state, vis, bundle)
        pure, _ = forward_video(state, vis, None)
        assert gated.cls_scores.tobytes() == pure.cls_scores.tobytes()

    def test_learned_gate_matches_manual_composition(self):
        rng = Rng(12)
        state = ModelState(tiny_model_config(lambda_mode="learned"), rng)
        vis = rng.normal_matrix(12, 5)
        bundle = random_bundle(rng, 12, 5)
        outputs, _ = forward_video(state, vis, bundle)
        adv = predict_advantage(bundle.adv_stream, state)
        lam = lambda_from_advantage(adv)
        np.testing.assert_array_equal(outputs.adv_pred, adv)
        np.testing.assert_array_equal(outputs.lam, lam)
        manual, _ = head_forward(*aggregate(vis, bundle, lam), state)
        assert outputs.cls_scores.tobytes() == manual.cls_scores.tobytes()

    def test_language_only_reads_pure_streams(self):
        rng = Rng(13)
        state = ModelState(tiny_model_config(lambda_mode="language_only"), rng)
        vis = rng.normal_matrix(12, 5)
        bundle = random_bundle(rng, 12, 5)
        outputs, _ = forward_video(state, vis, bundle)
        assert np.all(outputs.lam == 1.0)
        manual, _ = head_forward(bundle.cls_stream, bundle.loc_stream, state)
        assert outputs.cls_scores.tobytes() == manual.cls_scores.tobytes()


class TestDecode:
    def setup_method(self):
        self.cfg = tiny_model_config(num_classes=2, score_threshold=0.01)

    def outputs(self, L, scores, offsets):
        return FrameOutputs(scores, offsets, np.zeros((L, 1)), np.zeros((L, 1)),
                            np.zeros((L, 3)))

    def test_below_threshold_empty(self):
        out = self.outputs(5, np.full((5, 2), 0.001), np.ones((5, 2)))
        assert decode_proposals(out, self.cfg) == []

    def test_direct_substitution(self):
        scores = np.zeros((20, 2))
        scores[10, 1] = 0.9
        offsets = np.zeros((20, 2))
        offsets[10] = (2.0, 3.0)
        props = decode_proposals(self.outputs(20, scores, offsets), self.cfg)
        assert props == [Proposal(8.0, 13.0, 1, 0.9)]

    def test_clamps_to_video_bounds(self):
        scores = np.zeros((20, 2))
        scores[1, 0] = 0.5
        offsets = np.zeros((20, 2))
        offsets[1] = (5.0, 30.0)
        props = decode_proposals(self.outputs(20, scores, offsets), self.cfg)
        assert props == [Proposal(0.0, 20.0, 0, 0.5)]

    def test_drops_empty_intervals(self):
        scores = np.zeros((20, 2))
        scores[4, 0] = 0.5
        props = decode_proposals(self.outputs(20, scores, np.zeros((20, 2))), self.cfg)
        assert props == []

    def test_sorted_and_truncated(self):
        rng = Rng(14)
        scores = np.abs(rng.normal_matrix(30, 2, 0.3))
        offsets = np.abs(rng.normal_matrix(30, 2, 4.0)) + 0.5
        cfg = tiny_model_config(num_classes=2, top_k_pre_nms=7)
        props = decode_proposals(self.outputs(30, scores, offsets), cfg)
        assert len(props) == 7
        assert all(a.score >= b.score for a, b in zip(props, props[1:]))
        everything = decode_proposals(self.outputs(30, scores, offsets), self.cfg)
        assert props == everything[:7]


class TestNms:
    def test_identical_duplicates_collapse(self):
        p = Proposal(2.0, 9.0, 0, 0.8)
        assert nms([p, Proposal(2.0, 9.0, 0, 0.8)], 0.5) == [p]

    def test_disjoint_survive(self):
        props = [Proposal(0.0, 4.0, 0, 0.9), Proposal(10.0, 14.0, 0, 0.8),
                 Proposal(0.0, 4.0, 1, 0.7)]
        assert nms(props, 0.5) == props

    def test_cross_class_never_suppresses(self):
        props = [Proposal(0.0, 10.0, 0, 0.9), Proposal(0.0, 10.0, 1, 0.5)]
        assert len(nms(props, 0.5)) == 2

    def test_matches_reference_on_random_sets(self):
        rng = Rng(15)
        for _ in range(50):
            props = []
            for _ in range(rng.randint(25) + 1):
                s = rng.uniform() * 40.0
                e = s + 0.5 + rng.uniform() * 20.0
                props.append(Proposal(s, e, rng.randint(3),
                                      round(rng.uniform(), 2)))  # ties likely
            got = nms(props, 0.4)
            want = nms_reference([(p.start, p.end, p.label, p.score) for p in props], 0.4)
            assert [(p.start, p.end, p.label, p.score) for p in got] == want


class TestTiou:
    def test_values(self):
        assert tiou((0.0, 10.0), (0.0, 10.0)) == 1.0
        assert tiou((0.0, 1.0), (5.0, 6.0)) == 0.0
        assert tiou((0.0, 10.0), (5.0, 15.0)) == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_accepts_objects_with_attributes(self):
        assert tiou(Proposal(0.0, 10.0, 0, 1.0), Segment(5, 15, 0)) == pytest.approx(1.0 / 3.0)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            tiou((3.0, 3.0), (0.0, 1.0))


class TestTemplateLoss:
    def test_uniform_logits(self):
        z = np.zeros((10, 4))
        assert template_loss(z, [Segment(0, 5, 1)]) == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated_correct_tokens(self):
        L, C = 12, 3
        labels = np.full(L, C)
        labels[2:7] = 1
        z = np.full((L, C + 1), -50.0)
        z[np.arange(L), labels] = 50.0
        assert template_loss(z, [Segment(2, 7, 1)]) <= 1e-12

    def test_matches_per_frame_oracle(self):
        rng = Rng(16)
        z = rng.normal_matrix(9, 4, 2.0)
        gt = [Segment(1, 4, 2), Segment(6, 8, 0)]
        labels = [3, 2, 2, 2, 3, 3, 0, 0, 3]
        expected = np.mean([cross_entropy_reference(z[l].tolist(), labels[l])
                            for l in range(9)])
        assert template_loss(z, gt) == pytest.approx(expected, rel=1e-12)

    def test_overlapping_segments_rejected(self):
        z = np.zeros((10, 4))
        with pytest.raises(ConfigError, match="overlap"):
            template_loss(z, [Segment(0, 5, 1), Segment(4, 8, 2)])

    def test_grad(self):
        rng = Rng(17)
        gt = [Segment(2, 6, 1)]

        def f(z):
            return template_loss(z, gt), template_loss_grad(z, gt)

        assert grad_check(f, rng.normal_matrix(8, 4)) < 1e-6


class TestFrameTargets:
    def test_background_and_bounds(self):
        labels, gs, ge = frame_targets([Segment(3, 6, 1)], 10, 4)
        assert labels.tolist() == [4, 4, 4, 1, 1, 1, 4, 4, 4, 4]
        assert gs[4] == 3.0 and ge[4] == 6.0
        assert gs[0] == 0.0 and ge[0] == 0.0

    def test_errors(self):
        with pytest.raises(ConfigError, match="out of bounds"):
            frame_targets([Segment(3, 60, 1)], 10, 4)
        with pytest.raises(ConfigError, match="label"):
            frame_targets([Segment(3, 6, 9)], 10, 4)
        with pytest.raises(ConfigError, match="overlap"):
            frame_targets([Segment(0, 5, 1), Segment(4, 7, 0)], 10, 4)


class TestForwardBackwardGradients:
    """Finite-difference checks through the whole forward pass, including
    the gate path in learned mode."""

    def composite_loss(self, state, vis, bundle, r1, r2, r3):
        state.zero_grads()
        outputs, cache = forward_video(state, vis, bundle)
        loss = float((outputs.cls_scores * r1).sum()
                     + (outputs.offsets * r2).sum()
                     + (outputs.tmpl_logits * r3).sum())
        backward_video(state, cache, r1.copy(), r2.copy(), r3.copy())
        return loss

    @pytest.mark.parametrize("mode", ["learned", "fixed", "language_only"])
    def test_every_parameter(self, mode):
        rng = Rng(18)
        cfg = tiny_model_config(lambda_mode=mode, fixed_lambda=0.6)
        state = ModelState(cfg, rng)
        L = 10
        vis = rng.normal_matrix(L, 5)
        bundle = random_bundle(rng, L, 5)
        r1 = rng.normal_matrix(L, 3)
        r2 = rng.normal_matrix(L, 2)
        r3 = rng.normal_matrix(L, 4)
        for name, p in state.named_params():
            def f(candidate, p=p):
                saved = p.value.copy()
                p.value[...] = candidate
                loss = self.composite_loss(state, vis, bundle, r1, r2, r3)
                grad = p.grad.copy()
                p.value[...] = saved
                return loss, grad

            err = grad_check(f, p.value.copy())
            assert err < 1e-4, f"{mode} gradient for {name} off by {err}"

    def test_vision_mode_skips_language_params(self):
        rng = Rng(19)
        state = ModelState(tiny_model_config(), rng)
        vis = rng.normal_matrix(8, 5)
        state.zero_grads()
        outputs, cache = forward_video(state, vis, None)
        backward_video(state, cache, np.ones_like(outputs.cls_scores),
                       np.ones_like(outputs.offsets), np.zeros_like(outputs.tmpl_logits))
        assert np.array_equal(state.adv_fc.w.grad, np.zeros((5, 1)))
        assert np.array_equal(state.adv_fc.b.grad, np.zeros((1, 1)))


class TestPrediction:
    def test_predict_video_deterministic(self):
        gen = GenConfig(num_classes=3, num_videos=2, frames=32, dim=8,
                        ambiguity=(0.2,) * 3, helpfulness=(0.5,) * 3, seed=1)
        corpus = generate_corpus(gen)
        state = ModelState(ModelConfig(dim=8, num_classes=3), Rng(2))
        a = predict_video(state, corpus.videos[0])
        b = predict_video(state, corpus.videos[0])
        assert a == b
        per_video = predict_corpus(state, corpus)
        assert set(per_video) == {v.id for v in corpus.videos}


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        state = ModelState(tiny_model_config(hidden=6, lambda_mode="fixed",
                                             fixed_lambda=0.4), Rng(20))
        p = tmp_path / "model.ckpt"
        save_checkpoint(state, p)
        back = load_checkpoint(p)
        assert back.cfg == state.cfg
        for (name_a, pa), (name_b, pb) in zip(state.named_params(), back.named_params()):
            assert name_a == name_b
            assert pa.value.tobytes() == pb.value.tobytes()

    def test_save_is_byte_stable(self, tmp_path):
        state = ModelState(tiny_model_config(), Rng(21))
        save_checkpoint(state, tmp_path / "a.ckpt")
        save_checkpoint(state, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert (tmp_path / "a.ckpt.json").read_text() == (tmp_path / "b.ckpt.json").read_text()

    def test_missing_sidecar(self, tmp_path):
        state = ModelState(tiny_model_config(), Rng(22))
        save_checkpoint(state, tmp_path / "m.ckpt")
        (tmp_path / "m.ckpt.json").unlink()
        with pytest.raises(FormatError, match="sidecar"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_bad_sidecar_json(self, tmp_path):
        state = ModelState(tiny_model_config(), Rng(23))
        save_checkpoint(state, tmp_path / "m.ckpt")
        (tmp_path / "m.ckpt.json").write_text("{broken")
        with pytest.raises(FormatError, match="sidecar"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_missing_parameter_detected(self, tmp_path):
        from talgate import blobio
        state = ModelState(tiny_model_config(), Rng(24))
        p = tmp_path / "m.ckpt"
        save_checkpoint(state, p)
        items = blobio.read_named_matrices(p)
        blobio.write_named_matrices(p, items[:-1])
        with pytest.raises(FormatError, match="lacks parameter"):
            load_checkpoint(p)

    def test_shape_mismatch_detected(self, tmp_path):
        from talgate import blobio
        state = ModelState(tiny_model_config(), Rng(25))
        p = tmp_path / "m.ckpt"
        save_checkpoint(state, p)
        items = blobio.read_named_matrices(p)
        items[0] = (items[0][0], np.zeros((9, 9)))
        blobio.write_named_matrices(p, items)
        with pytest.raises(FormatError, match="shape"):
            load_checkpoint(p)

    def test_unknown_parameter_detected(self, tmp_path):
        from talgate import blobio
        state = ModelState(tiny_model_config(), Rng(26))
        p = tmp_path / "m.ckpt"
        save_checkpoint(state, p)
        items = blobio.read_named_matrices(p)
        items.append(("mystery", np.zeros((1, 1))))
        blobio.write_named_matrices(p, items)
        with pytest.raises(FormatError, match="mystery"):
            load_checkpoint(p)
