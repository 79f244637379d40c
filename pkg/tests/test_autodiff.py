"""Tape autodiff against hand derivatives and a finite-difference oracle."""

import mpmath
import numpy as np
import pytest

from convsearch.autodiff import (
    AdamState,
    Tape,
    adam_step,
    backward,
    softmax_nll_value,
)
from gradcheck import max_rel_error, random_leaf_values, random_program, run_program


class TestBackwardBasics:
    def test_mse_hand_gradient(self):
        tape = Tape()
        x = tape.leaf([1.0])
        y = tape.leaf([0.0])
        loss = tape.mse(x, y)
        grads = backward(tape, loss)
        assert grads[x] == pytest.approx([2.0])
        assert grads[y] == pytest.approx([-2.0])

    def test_dot_hand_gradient(self):
        tape = Tape()
        u = tape.leaf([1.0, 2.0])
        v = tape.leaf([3.0, 4.0])
        loss = tape.dot(u, v)
        grads = backward(tape, loss)
        assert np.array_equal(grads[u], [3.0, 4.0])
        assert np.array_equal(grads[v], [1.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            backward(tape, x)

    def test_unknown_node_rejected(self):
        tape = Tape()
        tape.leaf([1.0])
        with pytest.raises(IndexError):
            backward(tape, 99)

    def test_constants_receive_no_gradient(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        c = tape.constant([5.0, -1.0])
        loss = tape.dot(x, c)
        grads = backward(tape, loss)
        assert c not in grads
        assert np.array_equal(grads[x], [5.0, -1.0])

    def test_unused_leaf_gets_zero_gradient(self):
        tape = Tape()
        x = tape.leaf([1.0])
        unused = tape.leaf([[1.0, 2.0]])
        loss = tape.mse(x, tape.constant([0.0]))
        grads = backward(tape, loss)
        assert np.array_equal(grads[unused], np.zeros((1, 2)))
        assert grads[x] == pytest.approx([2.0])

    def test_backward_deterministic(self):
        rng = np.random.default_rng(7)
        program = random_program(rng)
        values = random_leaf_values(rng, program)
        tape1, leaves1, loss1 = run_program(program, values)
        tape2, leaves2, loss2 = run_program(program, values)
        g1 = backward(tape1, loss1)
        g2 = backward(tape2, loss2)
        for a, b in zip(leaves1, leaves2):
            assert np.array_equal(g1[a], g2[b])

    def test_tape_unchanged_by_backward(self):
        tape = Tape()
        x = tape.leaf([0.5, -0.5])
        loss = tape.softmax_nll(x, 0)
        before = [tape.value(i).copy() for i in range(len(tape))]
        backward(tape, loss)
        for i, val in enumerate(before):
            assert np.array_equal(tape.value(i), val)

    def test_nonfinite_op_output_rejected(self):
        tape = Tape()
        with pytest.raises(FloatingPointError):
            tape.leaf([np.inf])

    def test_stack_rows_gradient_routing(self):
        tape = Tape()
        u = tape.leaf([1.0, 2.0])
        v = tape.leaf([3.0, 4.0])
        w = tape.leaf([0.5, -0.5])
        mat = tape.stack_rows([u, v])          # (2, 2)
        scores = tape.matmul(mat, w)           # [u.w, v.w]
        loss = tape.softmax_nll(scores, 0)
        grads = backward(tape, loss)
        probs = np.exp([0.5 * 1 - 0.5 * 2, 0.5 * 3 - 0.5 * 4])
        probs = probs / probs.sum()
        np.testing.assert_allclose(grads[u], (probs[0] - 1) * np.array([0.5, -0.5]),
                                   atol=1e-12)
        np.testing.assert_allclose(grads[v], probs[1] * np.array([0.5, -0.5]), atol=1e-12)
        with pytest.raises(ValueError):
            tape.stack_rows([])


class TestFiniteDifferenceOracle:
    def test_random_graphs_match_central_differences(self):
        rng = np.random.default_rng(20260809)
        for _ in range(30):
            program = random_program(rng)
            values = random_leaf_values(rng, program)
            assert max_rel_error(program, values) < 1e-4

    def test_three_layer_graph_20_params(self):
        # fixed mlp-shaped graph: gather -> mean -> two matmul/tanh layers -> nll
        rng = np.random.default_rng(3)
        table = rng.uniform(-1, 1, (4, 2))   # 8 params
        w1 = rng.uniform(-1, 1, (2, 3))      # 6
        w2 = rng.uniform(-1, 1, (3, 2))      # 6 -> 20 total
        tape = Tape()
        t_id, w1_id, w2_id = tape.leaf(table), tape.leaf(w1), tape.leaf(w2)
        g = tape.gather(t_id, [0, 2, 2, 3])
        x = tape.mean_rows(g)
        h = tape.tanh(tape.matmul(x, w1_id))
        out = tape.matmul(h, w2_id)
        loss = tape.softmax_nll(out, 1)
        grads = backward(tape, loss)

        h_step = 1e-5
        for leaf_id, arr in ((t_id, table), (w1_id, w1), (w2_id, w2)):
            fd = np.zeros_like(arr)
            for j in range(arr.size):
                def loss_at(delta, j=j, arr=arr, leaf=leaf_id):
                    mats = {t_id: table.copy(), w1_id: w1.copy(), w2_id: w2.copy()}
                    mats[leaf].ravel()[j] += delta
                    t2 = Tape()
                    ids = {t_id: t2.leaf(mats[t_id]), w1_id: t2.leaf(mats[w1_id]),
                           w2_id: t2.leaf(mats[w2_id])}
                    g2 = t2.gather(ids[t_id], [0, 2, 2, 3])
                    x2 = t2.mean_rows(g2)
                    h2 = t2.tanh(t2.matmul(x2, ids[w1_id]))
                    return float(t2.value(t2.softmax_nll(t2.matmul(h2, ids[w2_id]), 1)))
                fd.ravel()[j] = (loss_at(h_step) - loss_at(-h_step)) / (2 * h_step)
            denom = np.maximum(1.0, np.abs(fd))
            assert np.max(np.abs(grads[leaf_id] - fd) / denom) < 1e-4


class TestSoftmaxNll:
    def test_uniform_two_way(self):
        assert softmax_nll_value(np.array([0.0, 0.0]), 0) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_single_candidate(self):
        assert softmax_nll_value(np.array([10.0]), 0) == pytest.approx(0.0, abs=1e-15)

    def test_matches_extended_precision_summation(self):
        scores = [5.0, 1.0, 1.0]
        with mpmath.workdps(50):
            exps = [mpmath.exp(s) for s in scores]
            expected = float(-mpmath.log(exps[0] / mpmath.fsum(exps)))
        assert softmax_nll_value(np.array(scores), 0) == pytest.approx(expected, abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(1, 12))
            scores = rng.uniform(-30, 30, n)
            pos = int(rng.integers(0, n))
            c = float(rng.uniform(-100, 100))
            assert softmax_nll_value(scores + c, pos) == pytest.approx(
                softmax_nll_value(scores, pos), abs=1e-9)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_nll_value(np.array([1.0, 2.0]), 2)
        tape = Tape()
        s = tape.leaf([1.0, 2.0])
        with pytest.raises(IndexError):
            tape.softmax_nll(s, -1)

    def test_tape_value_matches_pure_function(self):
        rng = np.random.default_rng(5)
        scores = rng.uniform(-5, 5, 7)
        tape = Tape()
        node = tape.softmax_nll(tape.leaf(scores), 3)
        assert float(tape.value(node)) == pytest.approx(softmax_nll_value(scores, 3), abs=1e-15)


class TestAdam:
    def test_first_step_magnitude(self):
        params = {"p": np.array([0.0])}
        grads = {"p": np.array([1.0])}
        state = AdamState.for_params(params, learning_rate=0.1)
        new, state = adam_step(params, grads, state)
        delta = new["p"][0] - 0.0
        assert abs(delta + 0.1 * 1.0 / (np.sqrt(1.0) + state.eps)) < 1e-6
        assert state.step == 1

    def test_zero_gradient_no_move(self):
        params = {"p": np.array([1.5, -2.0])}
        state = AdamState.for_params(params, learning_rate=0.1)
        new, state = adam_step(params, {"p": np.zeros(2)}, state)
        assert np.array_equal(new["p"], params["p"])
        assert state.step == 1

    def test_two_steps_match_recurrence_oracle(self):
        g = 0.37
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        params = {"p": np.array([2.0])}
        state = AdamState.for_params(params, learning_rate=lr)
        p_oracle = 2.0
        m = v = 0.0
        for t in (1, 2):
            params, state = adam_step(params, {"p": np.array([g])}, state)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p_oracle -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            assert params["p"][0] == pytest.approx(p_oracle, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        params = {"p": np.zeros(3)}
        state = AdamState.for_params(params, learning_rate=0.1)
        with pytest.raises(ValueError):
            adam_step(params, {"p": np.zeros(2)}, state)
