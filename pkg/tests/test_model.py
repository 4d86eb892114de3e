import numpy as np
import pytest

from sparsecbm.data import DatasetSchema, Example
from sparsecbm.diffcore import sigmoid
from sparsecbm.errors import DataError
from sparsecbm.model import (
    MaskSet,
    ModelConfig,
    backward,
    encode,
    finite_difference_report,
    forward_pathway,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from conftest import random_masks


class TestEncode:
    def test_all_ones_mask_equals_dense(self, tiny_model, tiny_example):
        L = tiny_model.n_prunable
        dense = encode(tiny_example, tiny_model, None)
        masked = encode(tiny_example, tiny_model, np.ones(L, dtype=np.uint8))
        assert np.array_equal(dense, masked)

    def test_all_zeros_mask_uses_biases_only(self, tiny_model, tiny_example):
        L = tiny_model.n_prunable
        z = encode(tiny_example, tiny_model, np.zeros(L, dtype=np.uint8))
        # annihilated weights: the last layer passes only its bias through
        assert np.allclose(z, tiny_model.enc_biases[-1], atol=1e-12)

    def test_hand_rolled_tiny_forward(self):
        cfg = ModelConfig(emb_dim=2, hidden_dims=(2,), enc_out=2,
                          n_concepts=1, n_concept_classes=2, n_task_classes=2,
                          vocab_size=4, seed=0)
        params = init_params(cfg)
        params.embeddings[:] = [[0.0, 0.0], [0.5, -0.5], [1.0, 2.0], [3.0, -1.0]]
        params.theta.view("enc.w1")[:] = [[1.0, 0.5], [-1.0, 2.0]]
        params.theta.view("enc.w2")[:] = [[2.0, 0.0], [0.0, -1.0]]
        params.enc_biases[0][:] = [0.1, -0.2]
        params.enc_biases[1][:] = [0.0, 0.3]
        ex = Example(token_ids=np.array([2, 3]), concept_labels=np.array([0]), task_label=0)
        pooled = np.array([2.0, 0.5])  # mean of rows 2 and 3
        h = np.maximum(pooled @ np.array([[1.0, 0.5], [-1.0, 2.0]]).T + np.array([0.1, -0.2]), 0)
        expected = h @ np.array([[2.0, 0.0], [0.0, -1.0]]).T + np.array([0.0, 0.3])
        z = encode(ex, params, None)
        assert np.allclose(z, expected, atol=1e-12)

    def test_empty_sequence_pools_pad(self, tiny_model):
        ex = Example(token_ids=np.array([], dtype=np.int64),
                     concept_labels=np.array([0, 0]), task_label=0)
        ex_pad = Example(token_ids=np.array([0]), concept_labels=np.array([0, 0]), task_label=0)
        assert np.array_equal(encode(ex, tiny_model, None), encode(ex_pad, tiny_model, None))

    def test_mask_length_mismatch(self, tiny_model, tiny_example):
        with pytest.raises(ValueError):
            encode(tiny_example, tiny_model, np.ones(3, dtype=np.uint8))


class TestForwardPathway:
    def test_zero_classifier_gives_zero_logits(self, tiny_model, tiny_example):
        params = tiny_model.copy()
        params.phi[...] = 0.0
        logits, acts, contribs = forward_pathway(tiny_example, params, None)
        assert np.array_equal(logits, np.zeros_like(logits))

    def test_single_concept_is_plain_bottleneck(self, tiny_example):
        cfg = ModelConfig(emb_dim=4, hidden_dims=(6,), enc_out=5, n_concepts=1,
                          n_concept_classes=3, n_task_classes=3, vocab_size=12, seed=1)
        params = init_params(cfg)
        rng = np.random.default_rng(0)
        params.phi[...] = rng.normal(0, 1, params.phi.shape)
        ex = Example(token_ids=np.array([3, 4]), concept_labels=np.array([1]), task_label=0)
        logits, acts, contribs = forward_pathway(ex, params, None)
        z = encode(ex, params, None)
        manual = params.phi[0] @ sigmoid(params.psi_w[0] @ z + params.psi_b[0])
        assert np.allclose(logits, manual, atol=1e-12)
        assert np.allclose(contribs[0], logits, atol=1e-12)

    def test_sum_of_contributions_matches_monolithic_forward(self, tiny_model, tiny_example):
        masks = MaskSet.all_ones(2, tiny_model.n_prunable)
        logits, acts, contribs = forward_pathway(tiny_example, tiny_model, masks)
        # monolithic equivalent: concatenate activations, apply the block
        # classifier matrix in one multiply
        z = encode(tiny_example, tiny_model, masks.bits[0])
        act_cat = np.concatenate(
            [sigmoid(tiny_model.psi_w[k] @ z + tiny_model.psi_b[k]) for k in range(2)]
        )
        big_phi = np.concatenate([tiny_model.phi[k] for k in range(2)], axis=1)
        assert np.allclose(big_phi @ act_cat, logits, atol=1e-12)
        assert np.allclose(contribs.sum(axis=0), logits, atol=1e-10)

    def test_contribution_sum_with_distinct_masks(self, tiny_model, tiny_example):
        masks = random_masks(2, tiny_model.n_prunable, seed=4)
        logits, acts, contribs = forward_pathway(tiny_example, tiny_model, masks)
        assert np.allclose(contribs.sum(axis=0), logits, atol=1e-10)

    def test_activation_logit_consistency(self, tiny_model, tiny_example):
        _, acts, _ = forward_pathway(tiny_example, tiny_model, None)
        assert np.allclose(acts.activations, sigmoid(acts.logits), atol=1e-15)

    def test_masked_positions_are_inert(self, tiny_model, tiny_example):
        # outputs depend only on mask * theta: perturbing masked entries
        # changes nothing
        masks = random_masks(2, tiny_model.n_prunable, seed=8)
        logits, _, _ = forward_pathway(tiny_example, tiny_model, masks)
        perturbed = tiny_model.copy()
        union = masks.bits.max(axis=0)
        perturbed.theta.values[union == 0] += 123.0
        logits2, _, _ = forward_pathway(tiny_example, perturbed, masks)
        assert np.array_equal(logits, logits2)


class TestPredict:
    def test_tie_breaks_to_lowest_index(self, tiny_model, tiny_example):
        params = tiny_model.copy()
        params.phi[...] = 0.0
        task, concepts = predict(tiny_example, params, None)
        assert task == 0

    def test_dominant_logit_wins(self, tiny_model, tiny_example):
        params = tiny_model.copy()
        params.psi_w[...] = 0.0
        params.psi_b[...] = 0.0
        params.psi_b[0, 2] = 10.0
        params.psi_b[1, 1] = 10.0
        _, concepts = predict(tiny_example, params, None)
        assert list(concepts) == [2, 1]


class TestBackward:
    def test_full_graph_matches_finite_differences(self, tiny_model, tiny_example):
        masks = random_masks(2, tiny_model.n_prunable, seed=3)
        report = finite_difference_report(tiny_example, tiny_model, masks, gamma=5.0, eps=3e-6)
        assert report.max_rel_err <= 1e-5

    def test_randomized_fd_property(self, tiny_config):
        # analytic gradients match central differences across seeds
        worst = 0.0
        for seed in range(20):
            cfg = ModelConfig(**{**tiny_config.to_dict(), "seed": seed})
            params = init_params(cfg)
            rng = np.random.default_rng(1000 + seed)
            params.phi[...] = rng.normal(0, 0.5, params.phi.shape)
            ex = Example(token_ids=rng.integers(0, cfg.vocab_size, size=5),
                         concept_labels=rng.integers(0, 3, size=2),
                         task_label=int(rng.integers(0, 3)))
            masks = random_masks(2, params.n_prunable, seed=seed)
            report = finite_difference_report(ex, params, masks, gamma=5.0, eps=3e-6)
            worst = max(worst, report.max_rel_err)
        assert worst <= 1e-5

    def test_sigmoid_sum_gradient(self):
        # loss = sum(sigmoid(x)) at x=0 has gradient 0.25 per coordinate;
        # realized via a single-concept model with identity-ish heads is
        # overkill, so check the primitive directly through the graph's
        # sigmoid derivative convention.
        x = np.zeros(4)
        s = sigmoid(x)
        assert np.allclose(s * (1 - s), 0.25)

    def test_loss_independent_block_gets_zero_grads(self, tiny_model, tiny_example):
        # concept CE alone (gamma large, phi zero) leaves the classifier
        # blocks without gradient
        params = tiny_model.copy()
        params.phi[...] = 0.0
        _, record, grads = backward(tiny_example, params, None, gamma=1.0)
        assert np.array_equal(grads.phi[1], np.zeros_like(grads.phi[1]))
        # and the task path contributes nothing through psi when phi is zero;
        # psi gradients come only from the concept CE term
        _, _, grads0 = backward(tiny_example, params, None, gamma=0.0)
        assert np.array_equal(grads0.psi_w, np.zeros_like(grads0.psi_w))

    def test_backward_is_deterministic(self, tiny_model, tiny_example):
        masks = random_masks(2, tiny_model.n_prunable, seed=1)
        loss1, rec1, _ = backward(tiny_example, tiny_model, masks, gamma=5.0)
        loss2, rec2, _ = backward(tiny_example, tiny_model, masks, gamma=5.0)
        assert loss1 == loss2
        assert rec1.grads.tobytes() == rec2.grads.tobytes()
        assert rec1.input_grads.tobytes() == rec2.input_grads.tobytes()

    def test_masked_positions_get_masked_gradients(self, tiny_model, tiny_example):
        masks = random_masks(2, tiny_model.n_prunable, seed=2)
        _, record, _ = backward(tiny_example, tiny_model, masks, gamma=5.0)
        union = masks.bits.max(axis=0)
        assert np.array_equal(record.grads[union == 0], np.zeros(int((union == 0).sum())))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_model, tiny_config, tmp_path):
        masks = random_masks(2, tiny_model.n_prunable, seed=11)
        schema = DatasetSchema(
            concept_names=["Food", "Service"],
            concept_class_names=["Negative", "Positive", "unknown"],
            task_class_count=3,
            max_len=16,
        )
        path = tmp_path / "model.ckpt.json"
        save_checkpoint(tiny_model, masks, tiny_config, schema, path)
        params2, masks2, config2, schema2 = load_checkpoint(path)
        assert params2.embeddings.tobytes() == tiny_model.embeddings.tobytes()
        assert params2.theta.values.tobytes() == tiny_model.theta.values.tobytes()
        assert params2.psi_w.tobytes() == tiny_model.psi_w.tobytes()
        assert params2.psi_b.tobytes() == tiny_model.psi_b.tobytes()
        assert params2.phi.tobytes() == tiny_model.phi.tobytes()
        for b1, b2 in zip(tiny_model.enc_biases, params2.enc_biases):
            assert b1.tobytes() == b2.tobytes()
        assert np.array_equal(masks.bits, masks2.bits)
        assert config2.to_dict() == tiny_config.to_dict()
        assert schema2.to_dict() == schema.to_dict()

    def test_wrong_version_rejected(self, tiny_model, tiny_config, tmp_path):
        import json

        masks = MaskSet.all_ones(2, tiny_model.n_prunable)
        schema = DatasetSchema(
            concept_names=["Food", "Service"],
            concept_class_names=["Negative", "Positive", "unknown"],
            task_class_count=3,
            max_len=16,
        )
        path = tmp_path / "model.ckpt.json"
        save_checkpoint(tiny_model, masks, tiny_config, schema, path)
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_corrupted_container_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_predictions_survive_round_trip(self, tiny_model, tiny_config, tiny_example, tmp_path):
        masks = random_masks(2, tiny_model.n_prunable, seed=13)
        schema = DatasetSchema(
            concept_names=["Food", "Service"],
            concept_class_names=["Negative", "Positive", "unknown"],
            task_class_count=3,
            max_len=16,
        )
        path = tmp_path / "model.ckpt.json"
        save_checkpoint(tiny_model, masks, tiny_config, schema, path)
        params2, masks2, _, _ = load_checkpoint(path)
        before = forward_pathway(tiny_example, tiny_model, masks)[0]
        after = forward_pathway(tiny_example, params2, masks2)[0]
        assert np.array_equal(before, after)
