"""Layer math, loss values and gradients, Adam, checkpoints."""

import numpy as np
import pytest

from pita.errors import BatchTooSmall, DimensionMismatch, ParseError
from pita.nn import (
    AdamState,
    Layer,
    MlpModel,
    adam_step,
    amount_ce_loss,
    init_adam,
    init_mlp,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    positive_weight,
    positive_weights,
    save_checkpoint,
    triplet_retrieval_loss,
    weighted_bce_loss,
)


def finite_difference(f, x, h=1e-6):
    """Central differences of a scalar function of a flat array."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestForward:
    def test_zero_weights_sigmoid_gives_half(self):
        model = MlpModel([Layer(W=np.zeros((3, 2)), b=np.zeros(3), activation="sigmoid")])
        out, _ = mlp_forward(model, np.array([0.7, -0.3]))
        assert np.allclose(out, 0.5)

    def test_leaky_relu_slope(self):
        model = MlpModel([Layer(W=np.eye(1), b=np.zeros(1), activation="leaky_relu")])
        out, _ = mlp_forward(model, np.array([-1.0]))
        assert out[0] == pytest.approx(-0.2)

    def test_equal_logits_softmax_uniform(self):
        model = MlpModel([Layer(W=np.zeros((4, 2)), b=np.ones(4), activation="softmax")])
        out, _ = mlp_forward(model, np.array([1.0, 2.0]))
        assert np.allclose(out, 0.25)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        model = init_mlp([5, 8, 6], rng, output_activation="softmax")
        out, _ = mlp_forward(model, rng.normal(size=(11, 5)))
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_dim_mismatch(self):
        rng = np.random.default_rng(1)
        model = init_mlp([5, 3], rng)
        with pytest.raises(DimensionMismatch):
            mlp_forward(model, np.zeros(4))


class TestWeightedBce:
    def test_perfect_prediction_near_zero(self):
        y = np.array([1.0, 0.0, 1.0])
        loss, _ = weighted_bce_loss(y, y, np.full(3, 2.0))
        assert loss == pytest.approx(0.0, abs=1e-5)

    def test_hand_computed_value(self):
        # two entries at p=0.5: positive term weighted 4, negative term weight 1
        loss, _ = weighted_bce_loss(
            np.array([0.5, 0.5]), np.array([1.0, 0.0]), np.array([4.0, 4.0])
        )
        assert loss == pytest.approx(5.0 * np.log(2.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 10))
            p = rng.uniform(0.05, 0.95, size=n)
            y = (rng.uniform(size=n) < 0.5).astype(float)
            w = rng.uniform(0.5, 4.0, size=n)
            _, grad = weighted_bce_loss(p, y, w)
            fd = finite_difference(lambda q: weighted_bce_loss(q, y, w)[0], p)
            assert rel_err(grad, fd) < 1e-6

    def test_batch_mean_scaling(self):
        p = np.full((4, 2), 0.5)
        y = np.tile(np.array([1.0, 0.0]), (4, 1))
        w = np.array([4.0, 4.0])
        loss, grad = weighted_bce_loss(p, y, w)
        assert loss == pytest.approx(5.0 * np.log(2.0))
        single_loss, single_grad = weighted_bce_loss(p[0], y[0], w)
        assert np.allclose(grad[0] * 4, single_grad)


class TestPositiveWeight:
    def test_clamp_boundary(self):
        assert positive_weight(20, 100, 4.0) == pytest.approx(4.0)

    def test_balanced(self):
        assert positive_weight(50, 100, 4.0) == pytest.approx(1.0)

    def test_clamped(self):
        assert positive_weight(10, 100, 4.0) == pytest.approx(4.0)

    def test_never_seen_gets_t(self):
        assert positive_weight(0, 100, 4.0) == pytest.approx(4.0)

    def test_matrix_version(self):
        Y = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        w = positive_weights(Y, t=4.0)
        # col0: 2 of 4 -> 1; col1: 1 of 4 -> 3; col2: never seen -> t
        assert np.allclose(w, [1.0, 3.0, 4.0])


class TestAmountCe:
    def test_perfect_prediction_near_zero(self):
        v = np.array([1.0, 0.0])
        loss, _ = amount_ce_loss(v, v)
        assert loss == pytest.approx(-np.log(1.0 + 1e-6), abs=1e-9)
        assert abs(loss) < 1e-5

    def test_worst_case_value(self):
        loss, _ = amount_ce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        assert loss == pytest.approx(-np.log(1e-6))
        assert loss == pytest.approx(13.8155, abs=1e-3)

    def test_target_normalized_internally(self):
        v_hat = np.array([0.3, 0.7])
        a, _ = amount_ce_loss(v_hat, np.array([800.0, 200.0]))
        b, _ = amount_ce_loss(v_hat, np.array([0.8, 0.2]))
        assert a == pytest.approx(b)

    def test_gradient_matches_finite_differences(self):
        # keep v_hat components off the 1/(v+eps) singularity so central
        # differences are trustworthy at h=1e-6
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 12))
            v_hat = rng.dirichlet(np.ones(n)) * 0.9 + 0.1 / n
            v = rng.dirichlet(np.ones(n))
            _, grad = amount_ce_loss(v_hat, v)
            fd = finite_difference(lambda q: amount_ce_loss(q, v)[0], v_hat)
            assert rel_err(grad, fd) < 1e-6


class TestTriplet:
    def test_satisfied_margin_zero_loss(self):
        q_r = np.array([[1.0, 0.0], [0.0, 1.0]])
        q_i = np.array([[1.0, 0.0], [0.0, 1.0]])
        # positives cos=1, hardest negative cos=0: hinge 0.3-1+0 < 0
        loss, gr, gi = triplet_retrieval_loss(q_r, q_i, margin=0.3)
        assert loss == 0.0
        assert np.all(gr == 0) and np.all(gi == 0)

    def test_hand_computed_hinge(self):
        # both anchors: pos cos 0.6, hardest negative 0.5 -> hinge 0.2 each
        q_r = np.array([[1.0, 0.0, 0.0, 0.0], [0.5, 0.0, 0.866025403784, 0.0]])
        q_i = np.array(
            [[0.6, 0.8, 0.0, 0.0], [0.3, 0.0, 0.519615242271, 0.8]]
        )
        loss, _, _ = triplet_retrieval_loss(q_r, q_i, margin=0.3)
        assert loss == pytest.approx(0.2, abs=1e-9)

    def test_equal_pos_neg_gives_margin(self):
        q_r = np.array([[1.0, 0.0], [1.0, 0.0]])
        q_i = np.array([[1.0, 0.0], [1.0, 0.0]])
        # all cosines are 1: hinge = margin for both anchors
        loss, _, _ = triplet_retrieval_loss(q_r, q_i, margin=0.3)
        assert loss == pytest.approx(0.3)

    def test_too_small_batch(self):
        with pytest.raises(BatchTooSmall):
            triplet_retrieval_loss(np.ones((1, 3)), np.ones((1, 3)))

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        q_r = rng.normal(size=(6, 5))
        q_i = rng.normal(size=(6, 5))
        base, _, _ = triplet_retrieval_loss(q_r, q_i)
        scaled, _, _ = triplet_retrieval_loss(q_r * 3.7, q_i * 0.2)
        assert scaled == pytest.approx(base)

    @staticmethod
    def _hinges_and_tie_gaps(q_r, q_i, margin=0.3):
        ur = q_r / np.linalg.norm(q_r, axis=1, keepdims=True)
        ui = q_i / np.linalg.norm(q_i, axis=1, keepdims=True)
        n = q_r.shape[0]
        sim_txt = ur @ ur.T
        sim_img = ur @ ui.T
        pos = np.diag(sim_img).copy()
        np.fill_diagonal(sim_txt, -np.inf)
        cands = np.concatenate([sim_txt, sim_img], axis=1)
        for i in range(n):
            cands[i, n + i] = -np.inf
        top2 = np.sort(cands, axis=1)[:, -2:]
        hinges = margin - pos + top2[:, 1]
        return hinges, top2[:, 1] - top2[:, 0]

    def test_gradient_matches_finite_differences(self):
        # batches at the hinge kink or with tied negatives are excluded: the
        # loss is not differentiable there
        rng = np.random.default_rng(5)
        checked = 0
        attempts = 0
        while checked < 50 and attempts < 500:
            attempts += 1
            q_r = rng.normal(size=(4, 3))
            q_i = rng.normal(size=(4, 3))
            hinges, gaps = self._hinges_and_tie_gaps(q_r, q_i)
            if np.abs(hinges).min() < 1e-3 or gaps.min() < 1e-3:
                continue
            loss, gr, gi = triplet_retrieval_loss(q_r, q_i)
            flat = np.concatenate([q_r.ravel(), q_i.ravel()])

            def f(z):
                a = z[: q_r.size].reshape(q_r.shape)
                b = z[q_r.size :].reshape(q_i.shape)
                return triplet_retrieval_loss(a, b)[0]

            fd = finite_difference(f, flat, h=1e-7)
            an = np.concatenate([gr.ravel(), gi.ravel()])
            if loss > 0:
                assert rel_err(an, fd) < 1e-4
            else:
                assert np.allclose(an, 0) and np.allclose(fd, 0, atol=1e-8)
            checked += 1
        assert checked >= 50


class TestAdam:
    def test_zero_grads_no_motion(self):
        p = [np.array([1.0, 2.0])]
        state = init_adam(p, lr=0.1)
        adam_step(p, [np.zeros(2)], state)
        assert np.allclose(p[0], [1.0, 2.0])

    def test_first_step_magnitude_is_lr(self):
        p = [np.array([0.0])]
        state = init_adam(p, lr=1e-4)
        adam_step(p, [np.array([1.0])], state)
        assert p[0][0] == pytest.approx(-1e-4, rel=1e-6)

    def test_monotone_motion_under_constant_gradient(self):
        p = [np.array([0.0])]
        state = init_adam(p, lr=1e-3)
        prev = 0.0
        for _ in range(5):
            adam_step(p, [np.array([1.0])], state)
            assert p[0][0] < prev
            prev = p[0][0]

    def test_step_counter(self):
        p = [np.zeros(3)]
        state = init_adam(p)
        adam_step(p, [np.ones(3)], state)
        adam_step(p, [np.ones(3)], state)
        assert state.t == 2


class TestBackprop:
    def test_bce_through_sigmoid_mlp(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            model = init_mlp([4, 7, 5], rng, output_activation="sigmoid")
            x = rng.normal(size=(3, 4))
            y = (rng.uniform(size=(3, 5)) < 0.4).astype(float)
            w = rng.uniform(0.5, 4.0, size=5)
            out, cache = mlp_forward(model, x)
            _, grad_p = weighted_bce_loss(out, y, w)
            grads, _ = mlp_backward(model, cache, grad_p)
            flat_params = model.parameters()
            flat_grads = [g for pair in grads for g in pair]
            for p_arr, g_arr in zip(flat_params, flat_grads):
                fd = finite_difference(
                    _loss_as_function_of(model, p_arr, x, lambda o: weighted_bce_loss(o, y, w)[0]),
                    p_arr.copy(),
                    h=1e-6,
                )
                assert rel_err(g_arr, fd) < 1e-4

    def test_ce_through_softmax_mlp(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            model = init_mlp([3, 6, 4], rng, output_activation="softmax")
            x = rng.normal(size=(2, 3))
            v = rng.dirichlet(np.ones(4), size=2)
            out, cache = mlp_forward(model, x)
            _, grad_out = amount_ce_loss(out, v)
            grads, _ = mlp_backward(model, cache, grad_out)
            flat_grads = [g for pair in grads for g in pair]
            for p_arr, g_arr in zip(model.parameters(), flat_grads):
                fd = finite_difference(
                    _loss_as_function_of(model, p_arr, x, lambda o: amount_ce_loss(o, v)[0]),
                    p_arr.copy(),
                    h=1e-6,
                )
                assert rel_err(g_arr, fd) < 1e-4

    def test_triplet_through_shared_projection(self):
        rng = np.random.default_rng(8)
        for _ in range(15):
            model = init_mlp([4, 4], rng, output_activation="identity")
            z_r = rng.normal(size=(3, 4))
            z_i = rng.normal(size=(3, 4))
            q_r, cache_r = mlp_forward(model, z_r)
            q_i, cache_i = mlp_forward(model, z_i)
            loss, gr, gi = triplet_retrieval_loss(q_r, q_i)
            if loss == 0.0:
                continue
            grads_r, _ = mlp_backward(model, cache_r, gr)
            grads_i, _ = mlp_backward(model, cache_i, gi)
            combined = [
                g_r + g_i
                for pair_r, pair_i in zip(grads_r, grads_i)
                for g_r, g_i in zip(pair_r, pair_i)
            ]

            for p_arr, g_arr in zip(model.parameters(), combined):
                def f(flat, p=p_arr):
                    backup = p.copy()
                    p[...] = flat.reshape(p.shape)
                    a, _ = mlp_forward(model, z_r)
                    b, _ = mlp_forward(model, z_i)
                    val = triplet_retrieval_loss(a, b)[0]
                    p[...] = backup
                    return val

                fd = finite_difference(f, p_arr.copy(), h=1e-7)
                assert rel_err(g_arr, fd) < 1e-4


def _loss_as_function_of(model, param, x, loss_of_output):
    def f(flat):
        backup = param.copy()
        param[...] = flat.reshape(param.shape)
        out, _ = mlp_forward(model, x)
        val = loss_of_output(out)
        param[...] = backup
        return val

    return f


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        model = init_mlp([4, 6, 3], rng, output_activation="softmax")
        model.step = 1234
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.step == 1234
        assert len(back.layers) == 2
        for a, b in zip(model.layers, back.layers):
            assert a.activation == b.activation
            assert np.allclose(a.W, b.W, atol=1e-6)
            assert np.allclose(a.b, b.b, atol=1e-6)

    def test_save_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(10)
        model = init_mlp([3, 3], rng)
        save_checkpoint(model, tmp_path / "a.ckpt")
        save_checkpoint(model, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 32)
        with pytest.raises(ParseError):
            load_checkpoint(path)


class TestWeightSharing:
    def test_one_parameter_set_serves_both_modalities(self):
        rng = np.random.default_rng(11)
        model = init_mlp([3, 3], rng, output_activation="identity")
        z = rng.normal(size=(2, 3))
        before_r, _ = mlp_forward(model, z)
        model.layers[0].W += 0.5  # nudge via "text" update path
        after_r, _ = mlp_forward(model, z)
        after_i, _ = mlp_forward(model, z + 0.0)
        assert not np.allclose(before_r, after_r)
        assert np.allclose(after_r, after_i)
