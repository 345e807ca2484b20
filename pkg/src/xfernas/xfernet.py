"""Sequence surrogate for architecture performance.

An LSTM encoder (embedding 32, hidden 96) reads the genome token sequence;
mean pooling over the hidden states yields a 96-dim architecture code z.
Performance prediction decomposes into a shared universal head plus one
low-capacity residual head per task: pred(z, task) = universal(z) +
residual_task(z). Residual output layers start at exactly zero, so an
untrained task predicts identically to the universal head. An LSTM decoder
with scaled dot-product attention over the encoder states reconstructs the
token sequence; its logits are masked to the tokens legal at each position,
so any greedy decode is a valid genome.

Training minimizes alpha * sum of squared prediction errors (each record
scored by its own task's head) plus (1 - alpha) * token cross-entropy with
teacher forcing, with Adam, decoupled weight decay on non-bias parameters,
and global-norm gradient clipping at 5.0. BLAS is pinned to one thread
inside training and batch prediction so results are bit-reproducible
regardless of process-level parallelism.
"""

from __future__ import annotations

import functools
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor_kernel as tk
from .archspace import NUM_OPERATIONS, seq_length, vocab_size

EMBED_SIZE = 32
HIDDEN_SIZE = 96
UNIVERSAL_HIDDEN = 64
RESIDUAL_HIDDEN = 32
GRAD_CLIP_NORM = 5.0

#: Sentinel task id selecting the universal head alone.
UNIVERSAL = "universal"

__all__ = [
    "ArchitectureCode",
    "TrainConfig",
    "XferNet",
    "UNIVERSAL",
    "UnknownTaskError",
]


class UnknownTaskError(LookupError):
    """Raised when a task id is not in the surrogate's registry."""


@dataclass
class ArchitectureCode:
    """Continuous architecture representation: the mean-pooled encoder
    output ``z`` plus, when it came from :meth:`XferNet.encode`, the
    per-position encoder states used as decoder attention memory."""

    z: np.ndarray
    states: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.z = np.asarray(self.z, dtype=tk.DTYPE)
        if self.z.shape != (HIDDEN_SIZE,):
            raise ValueError(f"code must have shape ({HIDDEN_SIZE},), got {self.z.shape}")
        if not np.isfinite(self.z).all():
            raise ValueError("code has non-finite entries")
        if self.states is not None:
            self.states = np.asarray(self.states, dtype=tk.DTYPE)


@dataclass
class TrainConfig:
    alpha: float = 0.8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@functools.lru_cache(maxsize=None)
def _legality_mask(num_blocks: int) -> np.ndarray:
    """(T, V) additive mask: 0 where a token is legal at the position,
    -inf elsewhere. Input slots of block b allow node indices 0..b; the
    other slots allow only operation tokens."""
    vocab = vocab_size(num_blocks)
    length = seq_length(num_blocks)
    op_base = num_blocks + 1
    mask = np.full((length, vocab), -np.inf, dtype=tk.DTYPE)
    for pos in range(length):
        q = pos % (4 * num_blocks)
        block = q // 4 + 1
        if q % 2 == 0:  # slots 0 and 2 are input slots
            mask[pos, : block + 1] = 0.0
        else:
            mask[pos, op_base : op_base + NUM_OPERATIONS] = 0.0
    return mask


def _decay_exempt(path: str) -> bool:
    # weight decay applies to everything except biases
    return path.rsplit("/", 1)[-1].startswith("b")


class XferNet:
    """Surrogate with one residual head per registered task.

    ``tasks`` is the ordered task registry and must contain ``target``.
    """

    def __init__(self, tasks: Sequence[str], target: str, num_blocks: int = 5, seed: int = 0):
        tasks = list(tasks)
        if not tasks:
            raise ValueError("task registry must not be empty")
        if len(set(tasks)) != len(tasks):
            raise ValueError("task registry contains duplicates")
        if UNIVERSAL in tasks:
            raise ValueError(f"{UNIVERSAL!r} is reserved and cannot be a task id")
        if target not in tasks:
            raise ValueError(f"target {target!r} missing from task registry")
        self.tasks = tasks
        self.target = target
        self.num_blocks = num_blocks
        self.seq_len = seq_length(num_blocks)
        self.vocab = vocab_size(num_blocks)
        self.sos_id = self.vocab  # extra embedding row used as decoder start
        self.store = tk.init_params(seed, self._param_spec())
        for enc_dec in ("enc", "dec"):
            # forget-gate bias starts at 1 so early steps retain cell state
            self.store.params[f"{enc_dec}/b"][HIDDEN_SIZE : 2 * HIDDEN_SIZE] = 1.0
        self.train_log: list[float] = []

    def _param_spec(self):
        h4 = 4 * HIDDEN_SIZE
        spec = [
            ("emb", (self.vocab + 1, EMBED_SIZE), ("uniform", EMBED_SIZE)),
            ("enc/W_ih", (EMBED_SIZE, h4), ("uniform", EMBED_SIZE)),
            ("enc/W_hh", (HIDDEN_SIZE, h4), ("uniform", HIDDEN_SIZE)),
            ("enc/b", (h4,), "zeros"),
            ("dec/W_ih", (EMBED_SIZE, h4), ("uniform", EMBED_SIZE)),
            ("dec/W_hh", (HIDDEN_SIZE, h4), ("uniform", HIDDEN_SIZE)),
            ("dec/b", (h4,), "zeros"),
            ("dec/W_att", (HIDDEN_SIZE, HIDDEN_SIZE), ("uniform", HIDDEN_SIZE)),
            ("dec/W_comb", (2 * HIDDEN_SIZE, HIDDEN_SIZE), ("uniform", 2 * HIDDEN_SIZE)),
            ("dec/b_comb", (HIDDEN_SIZE,), "zeros"),
            ("dec/W_out", (HIDDEN_SIZE, self.vocab), ("uniform", HIDDEN_SIZE)),
            ("dec/b_out", (self.vocab,), "zeros"),
            ("uni/W1", (HIDDEN_SIZE, UNIVERSAL_HIDDEN), ("uniform", HIDDEN_SIZE)),
            ("uni/b1", (UNIVERSAL_HIDDEN,), "zeros"),
            ("uni/W2", (UNIVERSAL_HIDDEN, 1), ("uniform", UNIVERSAL_HIDDEN)),
            ("uni/b2", (1,), "zeros"),
        ]
        for task in self.tasks:
            # residual output layers start at zero: a task with no training
            # signal predicts exactly what the universal head predicts
            spec.extend(
                [
                    (f"res/{task}/W1", (HIDDEN_SIZE, RESIDUAL_HIDDEN), ("uniform", HIDDEN_SIZE)),
                    (f"res/{task}/b1", (RESIDUAL_HIDDEN,), "zeros"),
                    (f"res/{task}/W2", (RESIDUAL_HIDDEN, 1), "zeros"),
                    (f"res/{task}/b2", (1,), "zeros"),
                ]
            )
        return spec

    def _check_task(self, task: str) -> None:
        if task not in self.tasks:
            raise UnknownTaskError(f"task {task!r} not in registry {self.tasks}")

    # ------------------------------------------------------------------
    # forward pieces (operate on a tensor dict so training and inference
    # share one evaluation path)

    def _check_tokens(self, toks: np.ndarray) -> None:
        if toks.shape[-1] != self.seq_len:
            raise ValueError(f"expected {self.seq_len} tokens, got {toks.shape[-1]}")
        if toks.min() < 0 or toks.max() >= self.vocab:
            raise ValueError("token outside vocabulary")

    def _encode_batch(self, params, toks: np.ndarray):
        """Returns the time-major (T, N, H) encoder states and the (N, H)
        mean-pooled codes."""
        n, length = toks.shape
        h4 = 4 * HIDDEN_SIZE
        emb = tk.embedding(params["emb"], toks.T)
        flat = tk.reshape(emb, (length * n, EMBED_SIZE))
        proj = tk.reshape(tk.linear(flat, params["enc/W_ih"], params["enc/b"]), (length, n, h4))
        h0 = tk.constant(np.zeros((n, HIDDEN_SIZE)))
        hs = tk.lstm_sequence(proj, params["enc/W_hh"], h0)
        z = tk.mean(hs, axis=0)
        return hs, z

    def _ffn(self, params, prefix: str, z):
        hidden = tk.tanh(tk.linear(z, params[f"{prefix}/W1"], params[f"{prefix}/b1"]))
        return tk.linear(hidden, params[f"{prefix}/W2"], params[f"{prefix}/b2"])

    def _decode_teacher(self, params, memory, h0, teacher: np.ndarray):
        """Teacher-forced decoder over a batch: fused LSTM+attention core,
        then batched combine/output layers and the legality mask. ``memory``
        is the (n, T, H) attention memory tensor. Returns the time-major
        (T, n, V) masked logits tensor."""
        n = teacher.shape[0]
        length = self.seq_len
        h4 = 4 * HIDDEN_SIZE
        ids = np.concatenate(
            [np.full((n, 1), self.sos_id, dtype=np.int64), teacher[:, :-1]], axis=1
        )
        emb = tk.embedding(params["emb"], ids.T)
        flat = tk.reshape(emb, (length * n, EMBED_SIZE))
        proj = tk.reshape(tk.linear(flat, params["dec/W_ih"], params["dec/b"]), (length, n, h4))
        core = tk.attn_lstm_sequence(proj, params["dec/W_hh"], params["dec/W_att"], memory, h0)
        comb = tk.tanh(
            tk.linear(
                tk.reshape(core, (length * n, 2 * HIDDEN_SIZE)),
                params["dec/W_comb"],
                params["dec/b_comb"],
            )
        )
        logits = tk.reshape(
            tk.linear(comb, params["dec/W_out"], params["dec/b_out"]), (length, n, self.vocab)
        )
        mask = _legality_mask(self.num_blocks)
        return tk.add(logits, tk.constant(mask[:, None, :]))

    def _decode_greedy_raw(self, states: np.ndarray):
        """Greedy stepwise decode of one sequence, feeding each argmax token
        back in; plain numpy (inference only). Returns (T, V) masked logits
        and the token sequence."""
        p = self.store.params
        length = self.seq_len
        hdim = HIDDEN_SIZE
        mask = _legality_mask(self.num_blocks)
        inv = 1.0 / np.sqrt(hdim)
        mem = states[None, :, :]
        h = states.mean(axis=0)[None, :]
        c = np.zeros((1, hdim))
        prev = self.sos_id
        logits_out = np.empty((length, self.vocab))
        tokens = np.empty(length, dtype=np.int64)
        with np.errstate(over="ignore"):
            for t in range(length):
                gates = p["emb"][prev][None, :] @ p["dec/W_ih"] + p["dec/b"] + h @ p["dec/W_hh"]
                tk._activate_gates(gates, hdim)
                i, f = gates[:, :hdim], gates[:, hdim : 2 * hdim]
                o, cand = gates[:, 2 * hdim : 3 * hdim], gates[:, 3 * hdim :]
                c = f * c + i * cand
                tc = np.tanh(c)
                h = o * tc
                q = h @ p["dec/W_att"]
                scores = (mem @ q[:, :, None])[:, :, 0] * inv
                scores -= scores.max(axis=1, keepdims=True)
                np.exp(scores, out=scores)
                scores /= scores.sum(axis=1, keepdims=True)
                ctx = (scores[:, None, :] @ mem)[:, 0, :]
                comb = np.tanh(
                    np.concatenate([h, ctx], axis=1) @ p["dec/W_comb"] + p["dec/b_comb"]
                )
                row = comb @ p["dec/W_out"] + p["dec/b_out"] + mask[t]
                logits_out[t] = row[0]
                prev = int(row[0].argmax())
                tokens[t] = prev
        return logits_out, tokens

    # ------------------------------------------------------------------
    # public single-sequence operations

    def encode(self, seq: Sequence[int]) -> tuple[np.ndarray, ArchitectureCode]:
        """Encode one token sequence; returns the (T, 96) hidden states and
        the mean-pooled architecture code."""
        toks = np.asarray(seq, dtype=np.int64)[None, :]
        self._check_tokens(toks)
        with tk.no_grad():
            hs, z = self._encode_batch(self.store.as_tensors(False), toks)
        states = hs.value[:, 0, :].copy()
        return states, ArchitectureCode(z.value[0], states)

    def residual(self, code: ArchitectureCode, task: str) -> float:
        self._check_task(task)
        z = np.asarray(code.z, dtype=tk.DTYPE)[None, :]
        with tk.no_grad():
            out = self._ffn(self.store.as_tensors(False), f"res/{task}", tk.constant(z))
        return float(out.value[0, 0])

    def predict(self, code: ArchitectureCode, task: str) -> float:
        """universal(z) + residual_task(z); ``task=UNIVERSAL`` gives the
        universal term alone."""
        z = np.asarray(code.z, dtype=tk.DTYPE)[None, :]
        with tk.no_grad():
            uni = self._ffn(self.store.as_tensors(False), "uni", tk.constant(z))
        value = float(uni.value[0, 0])
        if task == UNIVERSAL:
            return value
        return value + self.residual(code, task)

    def predict_batch(self, token_rows: np.ndarray, task: str) -> np.ndarray:
        """Predicted scores for a (n, T) array of token sequences."""
        if task != UNIVERSAL:
            self._check_task(task)
        toks = np.asarray(token_rows, dtype=np.int64)
        self._check_tokens(toks)
        with threadpool_limits(limits=1), tk.no_grad():
            params = self.store.as_tensors(False)
            _, z = self._encode_batch(params, toks)
            out = self._ffn(params, "uni", z)
            if task != UNIVERSAL:
                out = tk.add(out, self._ffn(params, f"res/{task}", z))
        return out.value[:, 0].copy()

    def code_gradient(self, code: ArchitectureCode, task: str) -> tuple[float, np.ndarray]:
        """Predicted score for ``task`` and its gradient with respect to z."""
        self._check_task(task)
        z = tk.Tensor(np.asarray(code.z, dtype=tk.DTYPE)[None, :], requires_grad=True)
        params = self.store.as_tensors(False)
        out = tk.add(self._ffn(params, "uni", z), self._ffn(params, f"res/{task}", z))
        scalar = tk.mean(tk.reshape(out, (1,)), axis=0)
        tk.backward(scalar)
        return float(out.value[0, 0]), z.grad[0].copy()

    def decode(
        self, states: np.ndarray, teacher: Optional[Sequence[int]] = None
    ) -> tuple[np.ndarray, tuple[int, ...]]:
        """Decode one sequence from (T, 96) encoder states (attention memory;
        the initial decoder state is their mean). Returns the (T, V) masked
        logits and the reconstructed token sequence, which is always legal.
        With ``teacher`` given the decoder inputs are the shifted teacher
        tokens; otherwise each greedy token feeds back in."""
        states = np.asarray(states, dtype=tk.DTYPE)
        if states.shape != (self.seq_len, HIDDEN_SIZE):
            raise ValueError(f"states must have shape ({self.seq_len}, {HIDDEN_SIZE})")
        if teacher is None:
            logits, tokens = self._decode_greedy_raw(states)
            return logits, tuple(int(t) for t in tokens)
        teach = np.asarray(teacher, dtype=np.int64)[None, :]
        self._check_tokens(teach)
        with tk.no_grad():
            memory = tk.constant(states[None, :, :])
            h0 = tk.constant(states.mean(axis=0)[None, :])
            logits = self._decode_teacher(self.store.as_tensors(False), memory, h0, teach)
        row = logits.value[:, 0, :]
        return row, tuple(int(t) for t in row.argmax(axis=1))

    def decode_code(self, code: ArchitectureCode) -> tuple[int, ...]:
        """Greedy decode straight from a code; codes without attached encoder
        states use the code tiled across all positions as memory."""
        states = code.states
        if states is None:
            states = np.tile(code.z, (self.seq_len, 1))
        return self.decode(states)[1]

    # ------------------------------------------------------------------
    # loss and training

    def loss(self, batch, alpha: float):
        """alpha * summed squared prediction error + (1 - alpha) * summed
        teacher-forced cross-entropy, as a scalar tensor. ``batch`` holds
        (token_seq, task_id, score) triples."""
        if not batch:
            raise ValueError("empty batch")
        toks = np.asarray([list(seq) for seq, _, _ in batch], dtype=np.int64)
        self._check_tokens(toks)
        tasks = [task for _, task, _ in batch]
        scores = np.asarray([score for _, _, score in batch], dtype=tk.DTYPE)
        for task in tasks:
            self._check_task(task)
        if scores.min() < 0.0 or scores.max() > 1.0:
            raise ValueError("scores must lie in [0, 1]")
        params = self.store.as_tensors(True)
        return self._loss_from_arrays(params, toks, tasks, scores, alpha)

    def _loss_from_arrays(self, params, toks, tasks, scores, alpha: float):
        hs, z = self._encode_batch(params, toks)
        task_arr = np.asarray(tasks)
        pred_loss = None
        for task in self.tasks:
            idx = np.flatnonzero(task_arr == task)
            if idx.size == 0:
                continue
            z_task = tk.gather_rows(z, idx)
            pred = tk.add(
                self._ffn(params, "uni", z_task), self._ffn(params, f"res/{task}", z_task)
            )
            err = tk.squared_error(pred, tk.constant(scores[idx][:, None]))
            pred_loss = err if pred_loss is None else tk.add(pred_loss, err)
        if pred_loss is None:
            pred_loss = tk.constant(np.zeros(()))
        memory = tk.transpose_01(hs)
        logits = self._decode_teacher(params, memory, z, toks)
        rec_loss = tk.cross_entropy(logits, toks.T)
        return tk.add(tk.scale(pred_loss, alpha), tk.scale(rec_loss, 1.0 - alpha))

    def train(self, history, cfg: TrainConfig) -> list[float]:
        """Adam minimization of the joint loss over shuffled mini-batches;
        appends per-epoch total losses to ``train_log`` and returns them."""
        records = history.all_records()
        if not records:
            raise ValueError("cannot train on an empty observation history")
        for rec in records:
            self._check_task(rec.task)
        from .archspace import tokenize  # local import to avoid cycle at module load

        toks = np.asarray([tokenize(rec.genome) for rec in records], dtype=np.int64)
        self._check_tokens(toks)
        tasks = np.asarray([rec.task for rec in records])
        scores = np.asarray([rec.score for rec in records], dtype=tk.DTYPE)
        if scores.min() < 0.0 or scores.max() > 1.0:
            raise ValueError("scores must lie in [0, 1]")
        n = len(records)
        rng = np.random.default_rng(cfg.seed)
        log: list[float] = []
        with threadpool_limits(limits=1):
            for _ in range(cfg.epochs):
                perm = rng.permutation(n)
                epoch_loss = 0.0
                for lo in range(0, n, cfg.batch_size):
                    sel = perm[lo : lo + cfg.batch_size]
                    params = self.store.as_tensors(True)
                    loss = self._loss_from_arrays(
                        params, toks[sel], list(tasks[sel]), scores[sel], cfg.alpha
                    )
                    tk.backward(loss)
                    grads = {p: t.grad for p, t in params.items() if t.grad is not None}
                    grads, _ = tk.clip_global_norm(grads, GRAD_CLIP_NORM)
                    tk.adam_step(
                        self.store,
                        grads,
                        lr=cfg.lr,
                        weight_decay=cfg.weight_decay,
                        decay_exempt=_decay_exempt,
                    )
                    epoch_loss += float(loss.value)
                self.store.assert_finite()
                log.append(epoch_loss)
        self.train_log.extend(log)
        return log

    # ------------------------------------------------------------------
    # persistence: ParamStore checkpoint plus a task-registry sidecar

    def save(self, prefix: str) -> None:
        self.store.save(prefix + ".params.json")
        sidecar = {
            "format_version": 1,
            "tasks": self.tasks,
            "target": self.target,
            "num_blocks": self.num_blocks,
        }
        with open(prefix + ".tasks.json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2)

    @classmethod
    def load(cls, prefix: str) -> "XferNet":
        with open(prefix + ".tasks.json", "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        if sidecar.get("format_version") != 1:
            raise ValueError("unsupported sidecar format_version")
        net = cls(sidecar["tasks"], sidecar["target"], num_blocks=sidecar["num_blocks"])
        store = tk.ParamStore.load(prefix + ".params.json")
        if store.paths() != net.store.paths():
            raise ValueError("checkpoint parameters do not match the task registry")
        for path in store.paths():
            if store.params[path].shape != net.store.params[path].shape:
                raise ValueError(f"checkpoint shape mismatch for {path!r}")
        net.store = store
        return net
