"""Dual encoder: shared token embeddings, mean pooling, two-layer MLP head.

One encoder maps token-id lists (queries or documents) to fixed vectors;
relevance is a dot product in that space. Conversational inputs are the
current turn's raw tokens appended to all previous raw turns, separator
tokens between turns, truncated from the front to a token budget.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Array, Tape
from .corpus import SEP_ID, Conversation, atomic_write, read_tensor_block, write_tensor_block


@dataclass
class EncoderConfig:
    d_emb: int = 64
    d_hid: int = 128
    d_out: int = 64
    max_len: int = 256
    init_scale: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if min(self.d_emb, self.d_hid, self.d_out) < 1:
            raise ValueError("all encoder dimensions must be >= 1")
        if self.max_len < 4:
            raise ValueError("max_len must be >= 4")


@dataclass
class EncoderParams:
    embeddings: Array  # (vocab, d_emb)
    w1: Array          # (d_emb, d_hid)
    b1: Array          # (d_hid,)
    w2: Array          # (d_hid, d_out)
    b2: Array          # (d_out,)

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def tensors(self) -> dict[str, Array]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_tensors(cls, tensors: dict[str, Array]) -> "EncoderParams":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()})

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.tensors().items()})


def init_encoder_params(config: EncoderConfig, vocab_size: int) -> EncoderParams:
    """Uniform(-init_scale, init_scale) init, deterministic in config.seed."""
    config.validate()
    if vocab_size < 1:
        raise ValueError("vocab_size must be >= 1")
    rng = np.random.default_rng(config.seed)
    s = config.init_scale

    def uni(*shape):
        return rng.uniform(-s, s, shape)

    return EncoderParams(
        embeddings=uni(vocab_size, config.d_emb),
        w1=uni(config.d_emb, config.d_hid),
        b1=uni(config.d_hid),
        w2=uni(config.d_hid, config.d_out),
        b2=uni(config.d_out),
    )


def init_student_from_teacher(teacher: EncoderParams) -> EncoderParams:
    """Deep copy; training the student never touches the teacher arrays."""
    return teacher.copy()


# ---- conversational input assembly ----

def assemble_from_turns(turn_token_lists: list[list[int]], max_len: int) -> list[int]:
    """Join turns with <sep>; drop earliest turns over budget, keep the last."""
    turns = [list(t) for t in turn_token_lists]
    if not turns or any(not t for t in turns):
        raise ValueError("turns must be non-empty token lists")

    def total(ts) -> int:
        return sum(len(t) for t in ts) + (len(ts) - 1)

    while len(turns) > 1 and total(turns) > max_len:
        turns.pop(0)
    if len(turns) == 1 and len(turns[0]) > max_len:
        turns[0] = turns[0][-max_len:]
    out: list[int] = []
    for i, t in enumerate(turns):
        if i:
            out.append(SEP_ID)
        out.extend(t)
    return out


def assemble_conversational_input(conv: Conversation, k: int, max_len: int = 256) -> list[int]:
    """Raw turns 1..k joined with <sep>, truncated to max_len from the front."""
    if not 1 <= k <= len(conv.turns):
        raise IndexError(f"turn index {k} out of range 1..{len(conv.turns)}")
    return assemble_from_turns([t.raw_tokens for t in conv.turns[:k]], max_len)


# ---- encoding ----

def _check_tokens(params: EncoderParams, tokens) -> np.ndarray:
    idx = np.asarray(tokens, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("token list must be non-empty")
    if idx.min() < 0 or idx.max() >= params.vocab_size:
        raise IndexError("token id out of vocabulary range")
    return idx


def encode(params: EncoderParams, tokens) -> Array:
    """Mean token embedding through the MLP head; pure float64."""
    idx = _check_tokens(params, tokens)
    pooled = params.embeddings[idx].mean(axis=0)
    hidden = np.tanh(pooled @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2


def encode_batch(params: EncoderParams, token_lists) -> Array:
    """Row i is exactly encode(token_lists[i])."""
    if len(token_lists) == 0:
        return np.zeros((0, params.d_out))
    return np.stack([encode(params, tokens) for tokens in token_lists])


def encode_on_tape(tape: Tape, leaves: dict[str, int], tokens) -> int:
    """Differentiable encode; `leaves` maps tensor names to tape node ids."""
    gathered = tape.gather(leaves["embeddings"], np.asarray(tokens, dtype=np.intp))
    pooled = tape.mean_rows(gathered)
    hidden = tape.tanh(tape.add_bias(tape.matmul(pooled, leaves["w1"]), leaves["b1"]))
    return tape.add_bias(tape.matmul(hidden, leaves["w2"]), leaves["b2"])


def encode_many_on_tape(tape: Tape, leaves: dict[str, int], token_lists) -> int:
    """One (n_inputs, d_out) node for a whole batch; saves per-item tape nodes."""
    flat: list[int] = []
    offsets = [0]
    for tokens in token_lists:
        flat.extend(tokens)
        offsets.append(len(flat))
    gathered = tape.gather(leaves["embeddings"], np.asarray(flat, dtype=np.intp))
    pooled = tape.segment_mean(gathered, offsets)
    hidden = tape.tanh(tape.add_bias(tape.matmul(pooled, leaves["w1"]), leaves["b1"]))
    return tape.add_bias(tape.matmul(hidden, leaves["w2"]), leaves["b2"])


def params_on_tape(tape: Tape, params: EncoderParams, trainable: bool = True) -> dict[str, int]:
    push = tape.leaf if trainable else tape.constant
    return {name: push(tensor) for name, tensor in params.tensors().items()}


# ---- checkpoints: JSON header + CDR1 tensor blocks ----

def save_checkpoint(path, params, config, kind: str = "dual_encoder") -> None:
    tensors = params.tensors()
    header = {
        "kind": kind,
        "config": dataclasses.asdict(config),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with atomic_write(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for value in tensors.values():
            write_tensor_block(fh, value.reshape(1, -1))


def load_checkpoint_raw(path) -> tuple[dict, dict[str, Array]]:
    with open(path, "rb") as fh:
        size = struct.unpack("<I", fh.read(4))[0]
        header = json.loads(fh.read(size).decode("utf-8"))
        tensors: dict[str, Array] = {}
        for spec in header["tensors"]:
            block = read_tensor_block(fh)
            tensors[spec["name"]] = block.astype(np.float64).reshape(spec["shape"])
    return header, tensors


def load_checkpoint(path) -> tuple[EncoderParams, EncoderConfig]:
    header, tensors = load_checkpoint_raw(path)
    if header["kind"] != "dual_encoder":
        raise ValueError(f"checkpoint kind {header['kind']!r} is not a dual encoder")
    return EncoderParams.from_tensors(tensors), EncoderConfig(**header["config"])
