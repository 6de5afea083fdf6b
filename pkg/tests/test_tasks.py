import numpy as np
import pytest

from oracle_distill.ctc import collapse, min_frames
from oracle_distill.errors import ContractError
from oracle_distill.models import CtcModel, ModelConfig
from oracle_distill.objectives import TrainConfig, loss_org
from oracle_distill.tasks import (
    AedTaskSpec,
    Batch,
    CtcTaskSpec,
    Example,
    apply_rule,
    batch_iter,
    cipher_table,
    export_dataset,
    feature_class,
    gen_aed_dataset,
    gen_ctc_dataset,
    import_dataset,
    split_examples,
    token_embeddings,
)


class TestCtcGeneration:
    def test_fixed_seed_reproduces_bit_identical_data(self):
        spec = CtcTaskSpec(seed=3)
        a = gen_ctc_dataset(spec, 50)
        b = gen_ctc_dataset(spec, 50)
        for ea, eb in zip(a, b):
            np.testing.assert_array_equal(ea.x, eb.x)
            assert ea.y == eb.y and ea.split == eb.split

    def test_frames_leave_room_for_alignment(self):
        data = gen_ctc_dataset(CtcTaskSpec(seed=1), 300)
        for ex in data:
            assert ex.x.shape[0] >= 2 * len(ex.y) + 1
            assert ex.x.shape[0] >= min_frames(ex.y)

    def test_noiseless_unambiguous_task_is_linearly_separable(self):
        spec = CtcTaskSpec(noise=0.0, ambiguity=0.0, seed=5)
        emb = token_embeddings(spec)
        data = gen_ctc_dataset(spec, 40)
        for ex in data:
            frame_labels = []
            for row in ex.x:
                dists = np.linalg.norm(emb[1:] - row, axis=1)
                frame_labels.append(int(np.argmin(dists)) + 1)
            assert collapse(frame_labels) == ex.y

    def test_confusable_pairs_share_feature_centers(self):
        spec = CtcTaskSpec(seed=2)
        emb = token_embeddings(spec)
        np.testing.assert_array_equal(emb[1], emb[2])
        np.testing.assert_array_equal(emb[3], emb[4])
        assert not np.array_equal(emb[5], emb[6])
        assert feature_class(spec, 2) == feature_class(spec, 1) != feature_class(spec, 3)

    def test_coinflip_pair_is_balanced_but_target_determined(self):
        data = gen_ctc_dataset(CtcTaskSpec(seed=7, ambiguity=0.5), 400)
        counts = {3: 0, 4: 0}
        for ex in data:
            for t in ex.y:
                if t in counts:
                    counts[t] += 1
        total = counts[3] + counts[4]
        assert total > 100
        assert 0.4 <= counts[3] / total <= 0.6

    def test_infeasible_spec_rejected(self):
        with pytest.raises(ContractError):
            CtcTaskSpec(vocab_size=3, ambiguity=0.5)
        with pytest.raises(ContractError):
            CtcTaskSpec(len_min=4, len_max=2)


class TestAedGeneration:
    def test_reverse_rule(self):
        spec = AedTaskSpec(rule="reverse")
        assert apply_rule((1, 2, 3), spec) == (3, 2, 1)

    def test_cipher_is_a_bijection(self):
        spec = AedTaskSpec(rule="cipher", seed=11)
        table = cipher_table(spec)
        assert sorted(table.values()) == list(range(1, spec.vocab_size + 1))
        inverse = {v: k for k, v in table.items()}
        x = (4, 9, 1, 1, 12)
        assert tuple(inverse[t] for t in apply_rule(x, spec)) == x

    def test_sort_rule(self):
        assert apply_rule((3, 1, 2), AedTaskSpec(rule="sort")) == (1, 2, 3)

    def test_noise_free_targets_follow_the_rule(self):
        spec = AedTaskSpec(copy_noise=0.0, seed=13)
        for ex in gen_aed_dataset(spec, 100):
            assert ex.y == apply_rule(ex.x, spec)

    def test_split_disjointness_over_source_strings(self):
        data = gen_aed_dataset(AedTaskSpec(seed=17), 10 ** 4)
        train = {ex.x for ex in data if ex.split == "train"}
        test = {ex.x for ex in data if ex.split == "test"}
        assert train and test
        assert not train & test

    def test_every_split_appears(self):
        data = gen_ctc_dataset(CtcTaskSpec(seed=19), 500)
        splits = {ex.split for ex in data}
        assert splits == {"train", "dev", "test"}


class TestBatching:
    def test_padding_never_reaches_the_loss(self):
        spec = CtcTaskSpec(seed=23)
        data = split_examples(gen_ctc_dataset(spec, 60), "train")[:6]
        model = CtcModel(
            ModelConfig(task="ctc", vocab_size=spec.vocab_size, feature_dim=spec.feature_dim,
                        d_model=8, enc_layers=1, heads=2, ffn_dim=16),
            seed=0,
        )
        batch = Batch(data)
        assert batch.features.shape[0] == len(data)
        batched = loss_org(model, batch.items()).item()
        singles = [loss_org(model, [(ex.x, ex.y)]).item() for ex in data]
        assert abs(batched - float(np.mean(singles))) <= 1e-10

    def test_epoch_permutation_is_seeded(self):
        data = gen_aed_dataset(AedTaskSpec(seed=29), 30)
        ids_a = [id(b.examples[0]) for b in batch_iter(data, 4, np.random.default_rng(1))]
        ids_b = [id(b.examples[0]) for b in batch_iter(data, 4, np.random.default_rng(1))]
        ids_c = [id(b.examples[0]) for b in batch_iter(data, 4, np.random.default_rng(2))]
        assert ids_a == ids_b
        assert ids_a != ids_c

    def test_last_partial_batch_included(self):
        data = gen_aed_dataset(AedTaskSpec(seed=31), 10)
        batches = list(batch_iter(data, 4, np.random.default_rng(0)))
        assert [len(b) for b in batches] == [4, 4, 2]
        seen = sorted(id(ex) for b in batches for ex in b.examples)
        assert seen == sorted(id(ex) for ex in data)

    def test_bad_batch_size_rejected(self):
        data = gen_aed_dataset(AedTaskSpec(seed=1), 4)
        with pytest.raises(ContractError):
            next(batch_iter(data, 0, np.random.default_rng(0)))

    def test_aed_items_roundtrip_through_padding(self):
        data = gen_aed_dataset(AedTaskSpec(seed=37), 7)
        batch = Batch(data)
        for (x, y), ex in zip(batch.items(), data):
            assert x == ex.x and y == ex.y


class TestExport:
    def test_ctc_roundtrip_is_exact(self, tmp_path):
        data = gen_ctc_dataset(CtcTaskSpec(seed=41), 20)
        path = tmp_path / "data.txt"
        export_dataset(data, path, task="ctc")
        task, loaded = import_dataset(path)
        assert task == "ctc"
        for a, b in zip(data, loaded):
            np.testing.assert_array_equal(a.x, b.x)
            assert a.y == b.y and a.split == b.split

    def test_aed_roundtrip_is_exact(self, tmp_path):
        data = gen_aed_dataset(AedTaskSpec(seed=43), 25)
        path = tmp_path / "data.txt"
        export_dataset(data, path, task="aed")
        task, loaded = import_dataset(path)
        assert task == "aed"
        assert [(e.x, e.y, e.split) for e in loaded] == [(e.x, e.y, e.split) for e in data]

    def test_unrecognized_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("something\n")
        with pytest.raises(ContractError):
            import_dataset(path)
