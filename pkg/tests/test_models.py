import numpy as np
import pytest

from oracle_distill import tensor as T
from oracle_distill.errors import (
    CheckpointFormatError,
    ContractError,
    ShapeError,
    VocabularyError,
)
from oracle_distill.models import (
    MASK,
    AedModel,
    CtcModel,
    ModelConfig,
    build_model,
    count_params,
    is_student_param,
    load_checkpoint,
    save_checkpoint,
    tie_teacher_head,
    zero_cross_attention,
    zero_fusion,
)
from oracle_distill.tensor import Tensor, grad_check


def tiny_ctc(seed=0, **kw):
    defaults = dict(task="ctc", vocab_size=3, feature_dim=4, d_model=8,
                    enc_layers=1, heads=2, ffn_dim=16, fusion_layers=1)
    defaults.update(kw)
    return CtcModel(ModelConfig(**defaults), seed=seed)


def tiny_aed(seed=0, **kw):
    defaults = dict(task="aed", vocab_size=5, d_model=8, enc_layers=1,
                    dec_layers=1, heads=2, ffn_dim=16, fusion_layers=1)
    defaults.update(kw)
    return AedModel(ModelConfig(**defaults), seed=seed)


class TestEncoderForward:
    def test_output_shape_for_any_length(self):
        model = tiny_ctc()
        rng = np.random.default_rng(0)
        for t in (1, 3, 9):
            h = model.encode(rng.standard_normal((t, 4)))
            assert h.shape == (t, 8)

    def test_batch_items_are_independent(self):
        model = tiny_ctc()
        rng = np.random.default_rng(1)
        items = [rng.standard_normal((4, 4)) for _ in range(3)]
        outs = [model.encode(x).data for x in items]
        perm = [2, 0, 1]
        outs_perm = [model.encode(items[i]).data for i in perm]
        for j, i in enumerate(perm):
            np.testing.assert_array_equal(outs_perm[j], outs[i])

    def test_zero_layers_is_projection_plus_positions(self):
        model = tiny_ctc(enc_layers=0)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 4))
        h = model.encode(x)
        w = model.store.peek("seq.in_proj.w").data
        b = model.store.peek("seq.in_proj.b").data
        expected = x @ w + b + model._pos[:5]
        np.testing.assert_array_equal(h.data, expected)

    def test_empty_input_rejected(self):
        with pytest.raises(ContractError):
            tiny_ctc().encode(np.zeros((0, 4)))

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 4))
        a = tiny_ctc(seed=9).student_logits(x).data
        b = tiny_ctc(seed=9).student_logits(x).data
        np.testing.assert_array_equal(a, b)

    def test_head_shape_and_linearity(self):
        model = tiny_ctc()
        rng = np.random.default_rng(4)
        h = Tensor(rng.standard_normal((6, 8)))
        out = model._head("seq.out", h)
        assert out.shape == (6, 4)  # 3 labels + blank
        zero = model._head("seq.out", Tensor(np.zeros((6, 8)))).data
        doubled = model._head("seq.out", T.scale(h, 2.0)).data
        np.testing.assert_allclose(doubled - zero, 2.0 * (out.data - zero), atol=1e-12)


class TestOracleEncoder:
    def test_output_length_matches_input(self):
        model = tiny_ctc()
        for tokens in ((1,), (1, 2, 3), (2, 2, 2, 2, 2)):
            r = model.oracle_guidance(tokens)
            assert r.shape == (len(tokens), 8)

    def test_fully_masked_input_forgets_the_target(self):
        model = tiny_aed()
        a = model.oracle_guidance([MASK, MASK, MASK]).data
        b = model.oracle_guidance([MASK, MASK, MASK]).data
        np.testing.assert_array_equal(a, b)
        # different underlying targets of equal length produce the same ids
        assert np.array_equal(
            model.oracle_guidance([MASK] * 4).data, model.oracle_guidance([MASK] * 4).data
        )

    def test_unknown_token_rejected(self):
        with pytest.raises(VocabularyError):
            tiny_ctc().oracle_guidance((1, 9))

    def test_gradient_through_embedding_and_attention(self):
        model = tiny_ctc()
        table = model.store.peek("oracle.embed")

        def f(_):
            return T.sum_sq(model.oracle_guidance((1, 2, 1)))

        assert grad_check(f, table) <= 1e-5


class TestFusion:
    def test_output_keeps_source_length(self):
        model = tiny_ctc()
        rng = np.random.default_rng(5)
        for t in range(1, 17):
            for l in range(1, 17):
                h = Tensor(rng.standard_normal((t, 8)))
                r = Tensor(rng.standard_normal((l, 8)))
                assert model.fuse(h, r).shape == (t, 8)

    def test_zeroed_cross_attention_ignores_guidance(self):
        model = tiny_ctc()
        zero_cross_attention(model)
        rng = np.random.default_rng(6)
        h = Tensor(rng.standard_normal((4, 8)))
        r1 = Tensor(rng.standard_normal((3, 8)))
        r2 = Tensor(rng.standard_normal((7, 8)))
        np.testing.assert_array_equal(model.fuse(h, r1).data, model.fuse(h, r2).data)

    def test_fully_zeroed_fusion_is_identity(self):
        model = tiny_ctc()
        zero_fusion(model)
        rng = np.random.default_rng(7)
        h = Tensor(rng.standard_normal((5, 8)))
        r = Tensor(rng.standard_normal((2, 8)))
        np.testing.assert_array_equal(model.fuse(h, r).data, h.data)

    def test_width_mismatch_rejected(self):
        model = tiny_ctc()
        with pytest.raises(ShapeError):
            model.fuse(Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 4))))

    def test_gradient_through_both_attention_stages(self):
        model = tiny_ctc()
        rng = np.random.default_rng(8)
        h = Tensor(rng.standard_normal((3, 8)))
        r = Tensor(rng.standard_normal((2, 8)))
        for name in ("fusion.f0.self.wq", "fusion.f0.cross.wq", "fusion.f0.ffn.w1"):
            w = model.store.peek(name)
            assert grad_check(lambda _: T.sum_sq(model.fuse(h, r)), w) <= 1e-5

    def test_capture_rows_are_stochastic(self):
        model = tiny_ctc()
        rng = np.random.default_rng(9)
        capture = []
        model.fuse(Tensor(rng.standard_normal((4, 8))), Tensor(rng.standard_normal((3, 8))), capture=capture)
        assert len(capture) == 1 and capture[0].shape == (4, 3)
        np.testing.assert_allclose(capture[0].sum(axis=1), 1.0, atol=1e-9)


class TestTeacherHead:
    def test_same_output_space_as_student(self):
        model = tiny_ctc()
        rng = np.random.default_rng(10)
        x = rng.standard_normal((5, 4))
        h = model.encode(x)
        assert model.teacher_logits(h, (1, 2)).shape == model.student_logits(x).shape

    def test_zero_weight_head_gives_uniform_posteriors(self):
        model = tiny_ctc()
        model.store.peek("teacher_out.w").data[...] = 0.0
        model.store.peek("teacher_out.b").data[...] = 0.0
        h = model.encode(np.random.default_rng(11).standard_normal((3, 4)))
        logits = model.teacher_logits(h, (1,))
        post = T.softmax(logits, axis=-1).data
        np.testing.assert_allclose(post, 0.25, atol=1e-12)

    def test_gradient_check(self):
        model = tiny_ctc()
        rng = np.random.default_rng(12)
        x = rng.standard_normal((3, 4))
        w = model.store.peek("teacher_out.w")
        assert grad_check(lambda _: T.sum_sq(model.teacher_logits(model.encode(x), (1, 2))), w) <= 1e-5


class TestAedDecoder:
    def test_causality_exact(self):
        model = tiny_aed()
        rng = np.random.default_rng(13)
        src = (1, 2, 3)
        memory = model.encode(src)
        prefix = [model.bos, 1, 4, 2, 5]
        base = model.decode_logits(memory, prefix).data
        for j in range(1, len(prefix)):
            perturbed = list(prefix)
            perturbed[j] = (perturbed[j] % 5) + 1
            out = model.decode_logits(memory, perturbed).data
            np.testing.assert_array_equal(out[:j], base[:j])

    def test_single_token_prefix(self):
        model = tiny_aed()
        logits = model.decode_logits(model.encode((1, 2)), [model.bos])
        assert logits.shape == (1, 7)  # 5 tokens + bos + eos

    def test_prefix_must_start_with_bos(self):
        model = tiny_aed()
        with pytest.raises(ContractError):
            model.decode_logits(model.encode((1,)), [1, 2])

    def test_gradient_check(self):
        model = tiny_aed()
        w = model.store.peek("seq.dec0.cross.wq")

        def f(_):
            return T.sum_sq(model.student_logits((1, 2, 3), (3, 1)))

        assert grad_check(f, w) <= 1e-5

    def test_greedy_decode_stops_and_stays_in_vocab(self):
        model = tiny_aed()
        pred = model.predict((1, 2, 3, 4))
        assert len(pred) <= 2 * 4 + 4
        assert all(0 <= t <= model.eos for t in pred)


class TestParamAccounting:
    def test_groups_are_disjoint_and_cover_everything(self):
        model = tiny_ctc()
        names = model.store.names()
        student = {n for n in names if is_student_param(n)}
        aux = set(names) - student
        assert student and aux
        counts = count_params(model)
        assert counts["total"] == counts["student"] + counts["aux"]

    def test_zero_layer_count_is_proj_plus_heads_plus_aux(self):
        model = tiny_ctc(enc_layers=0)
        counts = count_params(model)
        assert counts["student"] == 4 * 8 + 8 + 8 * 4 + 4  # in_proj + head

    def test_configured_count_matches_shape_arithmetic(self):
        model = tiny_ctc()
        d, f, out, feat = 8, 16, 4, 4
        attn = 4 * d * d + 4 * d
        ffn = d * f + f + f * d + d
        block = attn + ffn
        expected_student = (feat * d + d) + block + (d * out + out)
        expected_aux = (4 * d) + block + (attn + attn + ffn) + (d * out + out)
        counts = count_params(model)
        assert counts["student"] == expected_student
        assert counts["aux"] == expected_aux

    def test_student_decode_reads_no_aux_parameter(self):
        model = tiny_ctc()
        rng = np.random.default_rng(14)
        model.store.reset_reads()
        model.predict(rng.standard_normal((4, 4)))
        assert model.store.reads_with_prefix("oracle.", "fusion.", "teacher_out.") == 0
        assert model.store.reads_with_prefix("seq.") > 0

    def test_aed_student_decode_reads_no_aux_parameter(self):
        model = tiny_aed()
        model.store.reset_reads()
        model.predict((1, 2, 3))
        assert model.store.reads_with_prefix("oracle.", "fusion.", "teacher_out.") == 0


class TestCheckpoint:
    def test_roundtrip_is_byte_identical(self, tmp_path):
        model = tiny_ctc(seed=21)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(model, p1, run_config={"alpha": "2.0", "steps": "10"})
        loaded, run_kv = load_checkpoint(p1)
        assert run_kv == {"alpha": "2.0", "steps": "10"}
        save_checkpoint(loaded, p2, run_config=run_kv)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_model_predicts_identically(self, tmp_path):
        model = tiny_aed(seed=22)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        src = (2, 4, 1)
        assert loaded.predict(src) == model.predict(src)
        np.testing.assert_array_equal(
            loaded.student_logits(src, (1, 2)).data, model.student_logits(src, (1, 2)).data
        )

    def test_corrupt_header_reports_version(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("something else\n[end]\n")
        with pytest.raises(CheckpointFormatError, match="oracle-distill-checkpoint v1"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = tiny_ctc()
        path = tmp_path / "t.ckpt"
        save_checkpoint(model, path)
        clipped = path.read_text().splitlines()[:-3]
        path.write_text("\n".join(clipped) + "\n")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)


def test_build_model_dispatches_on_task():
    assert isinstance(build_model(ModelConfig(task="ctc")), CtcModel)
    assert isinstance(build_model(ModelConfig(task="aed")), AedModel)


def test_heads_must_divide_width():
    with pytest.raises(ContractError):
        ModelConfig(d_model=9, heads=2)
