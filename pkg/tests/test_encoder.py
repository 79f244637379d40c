"""Encoder formula, input assembly, copies, and checkpoints."""

import numpy as np
import pytest

from convsearch.autodiff import Tape, backward
from convsearch.corpus import SEP_ID, Conversation, ConversationTurn
from convsearch.encoder import (
    EncoderConfig,
    EncoderParams,
    assemble_conversational_input,
    assemble_from_turns,
    encode,
    encode_batch,
    encode_on_tape,
    init_encoder_params,
    init_student_from_teacher,
    load_checkpoint,
    params_on_tape,
    save_checkpoint,
)


def make_params(vocab_size=20, seed=0, **kw) -> EncoderParams:
    return init_encoder_params(EncoderConfig(d_emb=6, d_hid=5, d_out=4, seed=seed, **kw),
                               vocab_size)


def make_conversation(turn_lengths) -> Conversation:
    turns = []
    tok = 4
    for i, n in enumerate(turn_lengths, start=1):
        tokens = [4 + (tok + j) % 10 for j in range(n)]
        tok += n
        turns.append(ConversationTurn("T0", i, tokens, tokens, tokens))
    return Conversation("T0", turns)


class TestAssembly:
    def test_single_turn_verbatim(self):
        conv = make_conversation([5])
        assert assemble_conversational_input(conv, 1, 256) == conv.turns[0].raw_tokens

    def test_separators_between_turns(self):
        conv = make_conversation([2, 3])
        out = assemble_conversational_input(conv, 2, 256)
        expected = conv.turns[0].raw_tokens + [SEP_ID] + conv.turns[1].raw_tokens
        assert out == expected

    def test_drop_earliest_turn_over_budget(self):
        conv = make_conversation([100, 100, 100])
        out = assemble_conversational_input(conv, 3, 256)
        assert len(out) == 201  # turns 2 and 3 with one separator
        expected = conv.turns[1].raw_tokens + [SEP_ID] + conv.turns[2].raw_tokens
        assert out == expected

    def test_single_oversized_turn_keeps_tail(self):
        conv = make_conversation([300])
        out = assemble_conversational_input(conv, 1, 256)
        assert out == conv.turns[0].raw_tokens[-256:]

    def test_current_turn_never_dropped(self):
        conv = make_conversation([10, 400])
        out = assemble_conversational_input(conv, 2, 256)
        assert out == conv.turns[1].raw_tokens[-256:]

    def test_length_budget_always_respected(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            lengths = [int(rng.integers(1, 120)) for _ in range(int(rng.integers(1, 8)))]
            conv = make_conversation(lengths)
            k = int(rng.integers(1, len(lengths) + 1))
            out = assemble_conversational_input(conv, k, 64)
            assert len(out) <= 64
            current = conv.turns[k - 1].raw_tokens
            tail = out[-min(len(current), 64):]
            assert tail == current[-len(tail):]

    def test_turn_index_out_of_range(self):
        conv = make_conversation([3])
        with pytest.raises(IndexError):
            assemble_conversational_input(conv, 2, 256)
        with pytest.raises(IndexError):
            assemble_conversational_input(conv, 0, 256)

    def test_empty_turn_rejected(self):
        with pytest.raises(ValueError):
            assemble_from_turns([[4], []], 64)


class TestEncode:
    def test_permutation_invariance_exact(self):
        params = make_params()
        tokens = [4, 7, 7, 9, 12]
        base = encode(params, tokens)
        rng = np.random.default_rng(1)
        for _ in range(5):
            perm = list(rng.permutation(tokens))
            assert np.array_equal(encode(params, perm), base)

    def test_zero_params_give_output_bias(self):
        params = make_params()
        zeros = EncoderParams.from_tensors(
            {k: np.zeros_like(v) for k, v in params.tensors().items()})
        zeros.b2[:] = [1.0, -2.0, 0.5, 3.0]
        for tokens in ([4], [5, 6, 7], list(range(4, 19))):
            assert np.array_equal(encode(zeros, tokens), zeros.b2)

    def test_matches_straight_line_formula(self):
        rng = np.random.default_rng(42)
        params = make_params(seed=5)
        for _ in range(20):
            tokens = list(rng.integers(0, 20, size=int(rng.integers(1, 12))))
            got = encode(params, tokens)
            # independent straight-line reimplementation
            vecs = np.array([params.embeddings[t] for t in tokens])
            mean = vecs.sum(axis=0) / len(tokens)
            hid = np.tanh(params.w1.T @ mean + params.b1)
            want = params.w2.T @ hid + params.b2
            assert np.max(np.abs(got - want)) < 1e-12

    def test_errors(self):
        params = make_params()
        with pytest.raises(ValueError):
            encode(params, [])
        with pytest.raises(IndexError):
            encode(params, [20])

    def test_tape_encode_matches_inference(self):
        params = make_params(seed=3)
        tokens = [4, 5, 6, 6]
        tape = Tape()
        leaves = params_on_tape(tape, params)
        node = encode_on_tape(tape, leaves, tokens)
        assert np.array_equal(tape.value(node), encode(params, tokens))

    def test_tape_encode_gradients_match_fd(self):
        params = make_params(seed=8)
        tokens = [4, 9, 9, 11]
        tape = Tape()
        leaves = params_on_tape(tape, params)
        out = encode_on_tape(tape, leaves, tokens)
        target = tape.constant(np.zeros(4))
        loss = tape.mse(out, target)
        grads = backward(tape, loss)

        h = 1e-5
        tensors = params.tensors()
        for name, arr in tensors.items():
            fd = np.zeros_like(arr)
            for j in range(arr.size):
                def loss_at(delta):
                    mutated = {k: v.copy() for k, v in tensors.items()}
                    mutated[name].ravel()[j] += delta
                    p2 = EncoderParams.from_tensors(mutated)
                    out2 = encode(p2, tokens)
                    return float(np.mean(out2 * out2))
                fd.ravel()[j] = (loss_at(h) - loss_at(-h)) / (2 * h)
            got = grads[leaves[name]]
            assert np.max(np.abs(got - fd) / np.maximum(1.0, np.abs(fd))) < 1e-4


class TestEncodeBatch:
    def test_batch_of_one_equals_encode(self):
        params = make_params()
        assert np.array_equal(encode_batch(params, [[4, 5]]), encode(params, [4, 5])[None])

    def test_batch_equals_loop_bitwise(self):
        rng = np.random.default_rng(7)
        params = make_params(seed=2)
        lists = [list(rng.integers(0, 20, size=int(rng.integers(1, 9)))) for _ in range(32)]
        batch = encode_batch(params, lists)
        for i, tokens in enumerate(lists):
            assert np.array_equal(batch[i], encode(params, tokens))

    def test_large_batch_shape_and_finite(self):
        rng = np.random.default_rng(3)
        params = make_params()
        lists = [list(rng.integers(4, 20, size=5)) for _ in range(1000)]
        batch = encode_batch(params, lists)
        assert batch.shape == (1000, 4)
        assert np.all(np.isfinite(batch))

    def test_empty_batch(self):
        assert encode_batch(make_params(), []).shape == (0, 4)


class TestStudentCopy:
    def test_copy_matches_teacher_everywhere(self):
        teacher = make_params(seed=11)
        student = init_student_from_teacher(teacher)
        rng = np.random.default_rng(0)
        for _ in range(10):
            tokens = list(rng.integers(0, 20, size=6))
            assert np.array_equal(encode(student, tokens), encode(teacher, tokens))

    def test_mutating_student_leaves_teacher_unchanged(self):
        teacher = make_params(seed=11)
        frozen = {k: v.copy() for k, v in teacher.tensors().items()}
        student = init_student_from_teacher(teacher)
        for tensor in student.tensors().values():
            tensor += 1.0
        for name, tensor in teacher.tensors().items():
            assert np.array_equal(tensor, frozen[name])

    def test_copy_of_copy_equals_original_copy(self):
        teacher = make_params(seed=4)
        c1 = init_student_from_teacher(teacher)
        c2 = init_student_from_teacher(c1)
        for name in c1.tensors():
            assert np.array_equal(c1.tensors()[name], c2.tensors()[name])


class TestCheckpoints:
    def test_round_trip_preserves_float32_values(self, tmp_path):
        params = make_params(seed=6)
        config = EncoderConfig(d_emb=6, d_hid=5, d_out=4, seed=6)
        save_checkpoint(tmp_path / "enc.ckpt", params, config)
        loaded, cfg2 = load_checkpoint(tmp_path / "enc.ckpt")
        assert cfg2 == config
        for name, tensor in params.tensors().items():
            expected = tensor.astype(np.float32).astype(np.float64)
            assert np.array_equal(loaded.tensors()[name], expected)

    def test_double_round_trip_is_stable(self, tmp_path):
        params = make_params(seed=9)
        config = EncoderConfig(d_emb=6, d_hid=5, d_out=4, seed=9)
        save_checkpoint(tmp_path / "a.ckpt", params, config)
        p1, _ = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(tmp_path / "b.ckpt", p1, config)
        p2, _ = load_checkpoint(tmp_path / "b.ckpt")
        for name in p1.tensors():
            assert np.array_equal(p1.tensors()[name], p2.tensors()[name])
