"""Cluster-gated mixture-of-experts transformer for explanation text.

A small decoder-only transformer whose feed-forward sublayer is a bank of
fine-grained experts shared across K routing gates. Each user-item pair is
assigned one gate (its latent cluster) before generation starts, and that
gate's routing matrix scores the experts at every block; only the top-k
experts run per position, combined with their raw softmax scores.

Splitting each of N experts of hidden width d into r slimmer experts of
width d/r leaves the expert weight-parameter count unchanged
(N*d == rN * d/r) while letting the router compose finer specializations.
Input-side expert biases also keep their total count (rN * d/r == N*d);
output-side biases grow by the factor r (rN vs N of width model_dim).

Prompts are token sequences of the form
    <bos> U: u:<id> I: i:<id> R: r:<bucket> F: <feature words...> EXP:
and the model is trained to continue after EXP: with the explanation.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ConfigError, ContextLimitError, ShapeError
from .rng import Rng
from . import tensor as T
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>", "U:", "I:", "R:", "F:", "EXP:"]
MARK_U, MARK_I, MARK_R, MARK_F, MARK_EXP = 4, 5, 6, 7, 8

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, punctuation becomes its own token."""
    return _WORD_RE.findall(text.lower())


def rating_bucket(rating: float, r_max: float = 5.0) -> int:
    return int(np.clip(round(rating), 1, int(math.ceil(r_max))))


class Vocab:
    """Bijective token/id map with fixed reserved tokens up front."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:9]) != RESERVED:
            raise ConfigError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @staticmethod
    def user_token(user: str) -> str:
        return f"u:{user}"

    @staticmethod
    def item_token(item: str) -> str:
        return f"i:{item}"

    @staticmethod
    def rating_token(bucket: int) -> str:
        return f"r:{bucket}"

    @classmethod
    def build(cls, records, users: Sequence[str], items: Sequence[str],
              r_max: float = 5.0) -> "Vocab":
        """Reserved tokens, then id tokens for every known user/item, rating
        buckets, and (sorted) words from the given training records."""
        words = set()
        for rec in records:
            words.update(tokenize(rec.explanation))
            for feat in rec.features:
                words.update(tokenize(feat))
        tokens = list(RESERVED)
        tokens += [cls.user_token(u) for u in sorted(set(users))]
        tokens += [cls.item_token(i) for i in sorted(set(items))]
        tokens += [cls.rating_token(b) for b in range(1, int(math.ceil(r_max)) + 1)]
        tokens += sorted(words)
        return cls(tokens)

    def encode(self, token: str) -> int:
        return self.index.get(token, UNK)

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line != "\n"])


def build_prompt(vocab: Vocab, user: str, item: str, rating: float,
                 features: Sequence[str], r_max: float = 5.0) -> List[int]:
    """Token ids for the structured prompt; unknown words map to <unk>.

    An empty feature list drops the F: section entirely.
    """
    ids = [BOS, MARK_U, vocab.encode(Vocab.user_token(user)),
           MARK_I, vocab.encode(Vocab.item_token(item)),
           MARK_R, vocab.encode(Vocab.rating_token(rating_bucket(rating, r_max)))]
    feature_words = [w for feat in features for w in tokenize(feat)]
    if feature_words:
        ids.append(MARK_F)
        ids.extend(vocab.encode(w) for w in feature_words)
    ids.append(MARK_EXP)
    return ids


# --- expert decomposition and routing ---

@dataclass(frozen=True)
class MoeLayerConfig:
    base_experts: int          # expert count before splitting
    base_hidden: int           # hidden width before splitting
    factor: int                # how many slices each expert splits into
    active: int                # experts evaluated per position (top-k)
    gates: int                 # routing matrices, one per latent cluster

    @property
    def expert_count(self) -> int:
        return self.factor * self.base_experts

    @property
    def expert_hidden(self) -> int:
        return self.base_hidden // self.factor


def expert_weight_count(model_dim: int, n_experts: int, hidden: int) -> int:
    """Weight-matrix parameters across a bank (biases excluded)."""
    return n_experts * (model_dim * hidden + hidden * model_dim)


def decompose_experts(base_experts: int, base_hidden: int, factor: int,
                      active: int = 2, gates: int = 1) -> MoeLayerConfig:
    """Validate and build the fine-grained expert layout.

    Requires factor >= 1 dividing the base hidden width; the resulting bank
    keeps the exact weight-parameter count of the undecomposed one.
    """
    if factor < 1:
        raise ConfigError(f"decomposition factor must be >= 1, got {factor}")
    if base_hidden % factor != 0:
        raise ConfigError(
            f"decomposition factor {factor} does not divide hidden width {base_hidden}")
    cfg = MoeLayerConfig(base_experts, base_hidden, factor, active, gates)
    if not 1 <= active <= cfg.expert_count:
        raise ConfigError(
            f"active experts {active} outside [1, {cfg.expert_count}]")
    assert (base_experts * base_hidden
            == cfg.expert_count * cfg.expert_hidden), "parameter identity broken"
    return cfg


class ExpertBank:
    """Shared two-layer experts; `eval_count` tallies (position, expert)
    evaluations so routing sparsity is observable."""

    def __init__(self, model_dim: int, cfg: MoeLayerConfig, rng: Rng):
        self.cfg = cfg
        self.experts = []
        h = cfg.expert_hidden
        for _ in range(cfg.expert_count):
            self.experts.append({
                "w1": Tensor(rng.normal(model_dim * h).reshape(model_dim, h)
                             / math.sqrt(model_dim), requires_grad=True),
                "b1": Tensor(np.zeros(h), requires_grad=True),
                "w2": Tensor(rng.normal(h * model_dim).reshape(h, model_dim)
                             / math.sqrt(h), requires_grad=True),
                "b2": Tensor(np.zeros(model_dim), requires_grad=True),
            })
        self.eval_count = 0

    def run(self, index: int, rows: Tensor) -> Tensor:
        e = self.experts[index]
        self.eval_count += rows.shape[0]
        return T.tanh(rows @ e["w1"] + e["b1"]) @ e["w2"] + e["b2"]


class GateRouter:
    """One routing matrix per gate; scores are a softmax over all experts."""

    def __init__(self, model_dim: int, cfg: MoeLayerConfig, rng: Rng):
        self.cfg = cfg
        self.weights = [
            Tensor(rng.normal(model_dim * cfg.expert_count)
                   .reshape(model_dim, cfg.expert_count) / math.sqrt(model_dim),
                   requires_grad=True)
            for _ in range(cfg.gates)
        ]

    def scores(self, gate: int, x: Tensor) -> Tensor:
        if not 0 <= gate < self.cfg.gates:
            raise ConfigError(f"gate index {gate} outside [0, {self.cfg.gates})")
        rows = x.reshape(1, -1) if x.data.ndim == 1 else x
        out = T.softmax(rows @ self.weights[gate], axis=-1)
        return out.reshape(-1) if x.data.ndim == 1 else out


def route(router: GateRouter, gate: int, x: Tensor) -> Tensor:
    """Expert-selection scores for one input under the given gate."""
    return router.scores(gate, x)


def top_k_select(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ascending; ties go to lower indices."""
    scores = np.asarray(scores)
    if k > scores.shape[-1]:
        raise ConfigError(f"k={k} exceeds {scores.shape[-1]} experts")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


def moe_forward(bank: ExpertBank, router: GateRouter, gate: int, x: Tensor,
                k: int, renormalize: bool = False) -> Tensor:
    """Top-k expert mixture for a single model_dim vector.

    Only the selected experts are evaluated; their outputs are combined
    with the raw softmax scores (no renormalization over the selection
    unless asked). Gradients reach the selected experts and, through the
    full softmax, every routing logit.
    """
    out = _moe_rows(bank, router, gate, x.reshape(1, -1), k, renormalize)
    return out.reshape(-1)


def _moe_rows(bank: ExpertBank, router: GateRouter, gate: int, rows: Tensor,
              k: int, renormalize: bool = False) -> Tensor:
    scores = router.scores(gate, rows)                      # (n, E)
    selected = top_k_select(scores.data, k)                 # (n, k)
    n = rows.shape[0]
    if renormalize:
        picked = T.gather_pairs(scores, np.repeat(np.arange(n), k),
                                selected.reshape(-1)).reshape(n, k)
        denom = picked.sum(axis=1, keepdims=True)
        scale_rows = picked / denom
    row_ids = np.arange(n)
    out = None
    for e in range(bank.cfg.expert_count):
        hits = selected == e                                # (n, k)
        mask = hits.any(axis=1)
        if not mask.any():
            continue
        idx = row_ids[mask]
        if renormalize:
            kpos = hits[mask].argmax(axis=1)
            weight = T.gather_pairs(scale_rows, idx, kpos).reshape(-1, 1)
        else:
            weight = T.gather_pairs(scores, idx, np.full(idx.shape, e)).reshape(-1, 1)
        expert_out = bank.run(e, rows[idx]) * weight
        term = T.scatter_rows(expert_out, idx, n)
        out = term if out is None else out + term
    return out


# --- transformer ---

@dataclass
class LmConfig:
    vocab_size: int
    model_dim: int = 64
    blocks: int = 2
    heads: int = 2
    context: int = 64
    moe: MoeLayerConfig = None
    renormalize_topk: bool = False

    def __post_init__(self):
        if self.moe is None:
            self.moe = decompose_experts(6, 128, 2, active=2, gates=1)
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"heads {self.heads} must divide model_dim {self.model_dim}")


def _rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    scale = T.sqrt((x * x).mean(axis=-1, keepdims=True) + 1e-6)
    return x / scale * gain


class TransformerBlock:
    """Pre-norm causal attention followed by a pre-norm MoE feed-forward."""

    def __init__(self, config: LmConfig, rng: Rng):
        m = config.model_dim
        self.config = config
        s = 1.0 / math.sqrt(m)
        self.norm1_g = Tensor(np.ones(m), requires_grad=True)
        self.wq = Tensor(rng.normal(m * m).reshape(m, m) * s, requires_grad=True)
        self.wk = Tensor(rng.normal(m * m).reshape(m, m) * s, requires_grad=True)
        self.wv = Tensor(rng.normal(m * m).reshape(m, m) * s, requires_grad=True)
        self.wo = Tensor(rng.normal(m * m).reshape(m, m) * s, requires_grad=True)
        self.norm2_g = Tensor(np.ones(m), requires_grad=True)
        self.bank = ExpertBank(m, config.moe, rng)
        self.router = GateRouter(m, config.moe, rng)

    def _attend_sequence(self, x: Tensor) -> Tensor:
        length, m = x.shape
        heads = self.config.heads
        dh = m // heads
        q, k, v = x @ self.wq, x @ self.wk, x @ self.wv
        mask = np.triu(np.full((length, length), -1e9), k=1)
        outs = []
        for h in range(heads):
            cols = slice(h * dh, (h + 1) * dh)
            scores = (q[:, cols] @ k[:, cols].T) * (1.0 / math.sqrt(dh)) + Tensor(mask)
            outs.append(T.softmax(scores, axis=-1) @ v[:, cols])
        return T.concat(outs, axis=1) @ self.wo

    def forward(self, rows: Tensor, batch: int, length: int,
                gates: np.ndarray) -> Tensor:
        normed = _rms_norm(rows, self.norm1_g)
        attended = T.concat(
            [self._attend_sequence(normed[b * length:(b + 1) * length])
             for b in range(batch)], axis=0)
        h = rows + attended
        normed2 = _rms_norm(h, self.norm2_g)
        n = normed2.shape[0]
        if batch == 1 or len(set(gates.tolist())) == 1:
            mixed = _moe_rows(self.bank, self.router, int(gates[0]), normed2,
                              self.config.moe.active, self.config.renormalize_topk)
        else:
            row_gates = np.repeat(gates, length)
            mixed = None
            for g in sorted(set(gates.tolist())):
                idx = np.nonzero(row_gates == g)[0]
                part = _moe_rows(self.bank, self.router, int(g), normed2[idx],
                                 self.config.moe.active, self.config.renormalize_topk)
                term = T.scatter_rows(part, idx, n)
                mixed = term if mixed is None else mixed + term
        return h + mixed


class LanguageModel:
    """Decoder-only transformer with cluster-gated MoE feed-forward layers."""

    def __init__(self, config: LmConfig, rng: Rng):
        self.config = config
        m = config.model_dim
        self.embed = Tensor(rng.normal(config.vocab_size * m).reshape(-1, m) * 0.1,
                            requires_grad=True)
        self.pos = Tensor(rng.normal(config.context * m).reshape(-1, m) * 0.1,
                          requires_grad=True)
        self.blocks = [TransformerBlock(config, rng.substream(f"block{b}"))
                       for b in range(config.blocks)]
        self.norm_f_g = Tensor(np.ones(m), requires_grad=True)
        self.head = Tensor(rng.normal(m * config.vocab_size).reshape(m, -1)
                           / math.sqrt(m), requires_grad=True)

    def params(self) -> dict:
        out = {"lm.embed": self.embed, "lm.pos": self.pos,
               "lm.norm_f.g": self.norm_f_g, "lm.head": self.head}
        for b, blk in enumerate(self.blocks):
            out[f"lm.block{b}.norm1.g"] = blk.norm1_g
            out[f"lm.block{b}.attn.wq"] = blk.wq
            out[f"lm.block{b}.attn.wk"] = blk.wk
            out[f"lm.block{b}.attn.wv"] = blk.wv
            out[f"lm.block{b}.attn.wo"] = blk.wo
            out[f"lm.block{b}.norm2.g"] = blk.norm2_g
            for e, exp in enumerate(blk.bank.experts):
                for part in ("w1", "b1", "w2", "b2"):
                    out[f"lm.block{b}.moe.expert{e}.{part}"] = exp[part]
            for c, w in enumerate(blk.router.weights):
                out[f"lm.block{b}.router.gate{c}"] = w
        return out

    def reset_eval_counters(self) -> None:
        for blk in self.blocks:
            blk.bank.eval_count = 0

    def expert_evaluations(self) -> int:
        return sum(blk.bank.eval_count for blk in self.blocks)

    def forward_rows(self, tokens: np.ndarray, gates: np.ndarray) -> Tensor:
        """Logits for a (batch, length) token matrix; one gate per sequence.

        Returns a (batch*length, vocab) tensor, rows in sequence-major
        order. Strictly causal: position t sees tokens at positions <= t.
        """
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        batch, length = tokens.shape
        if length > self.config.context:
            raise ContextLimitError(
                f"sequence length {length} exceeds context {self.config.context}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ShapeError("token id outside the vocabulary")
        gates = np.asarray(gates, dtype=np.int64).reshape(batch)
        flat = tokens.reshape(-1)
        pos_ids = np.tile(np.arange(length), batch)
        x = T.take_rows(self.embed, flat) + T.take_rows(self.pos, pos_ids)
        for blk in self.blocks:
            x = blk.forward(x, batch, length, gates)
        x = _rms_norm(x, self.norm_f_g)
        return x @ self.head

    def forward_lm(self, tokens: Sequence[int], gate: int) -> Tensor:
        """Next-token logits for one sequence: (length, vocab)."""
        return self.forward_rows(np.asarray(tokens)[None, :], np.array([gate]))

    def generate(self, prompt: Sequence[int], gate: int, max_len: int = 16,
                 mode: str = "greedy", temperature: float = 1.0,
                 seed: int = 0) -> List[int]:
        """Autoregressive continuation after the prompt, until <eos> or
        max_len; greedy mode is deterministic, sampling is seeded."""
        if mode not in ("greedy", "sample"):
            raise ConfigError(f"unknown generation mode {mode!r}")
        if len(prompt) >= self.config.context:
            raise ContextLimitError(
                f"prompt of {len(prompt)} tokens fills context "
                f"{self.config.context}; nothing can be generated")
        rng = Rng(seed)
        seq = list(prompt)
        out: List[int] = []
        while len(out) < max_len and len(seq) < self.config.context:
            logits = self.forward_lm(seq, gate).data[-1]
            if mode == "greedy":
                nxt = int(np.argmax(logits))
            else:
                z = (logits - logits.max()) / max(temperature, 1e-8)
                p = np.exp(z)
                p /= p.sum()
                nxt = int(np.searchsorted(np.cumsum(p), rng.uniform(1)[0], side="right"))
                nxt = min(nxt, len(p) - 1)
            if nxt == EOS:
                break
            out.append(nxt)
            seq.append(nxt)
        return out

    def explanation_nll(self, prompt: Sequence[int], reference: Sequence[int],
                        gate: int) -> Tensor:
        """Mean cross-entropy of the reference continuation (plus <eos>)
        under teacher forcing."""
        if len(reference) == 0:
            raise ShapeError("reference continuation must be non-empty")
        seq = np.array(list(prompt) + list(reference) + [EOS])
        logits = self.forward_lm(seq[:-1], gate)
        logp = T.log_softmax(logits, axis=-1)
        positions = np.arange(len(prompt) - 1, len(seq) - 1)
        return -T.gather_pairs(logp, positions, seq[positions + 1]).mean()

    def batched_nll(self, sequences: List[np.ndarray], prompt_lens: List[int],
                    gates: np.ndarray) -> Tensor:
        """Mean over records of each record's mean continuation NLL.

        Sequences already include the trailing <eos>; they are right-padded
        to a common length and pad positions never contribute to the loss.
        """
        batch = len(sequences)
        width = max(len(s) for s in sequences)
        tokens = np.full((batch, width), PAD, dtype=np.int64)
        for i, s in enumerate(sequences):
            tokens[i, : len(s)] = s
        logits = self.forward_rows(tokens[:, :-1], gates)
        logp = T.log_softmax(logits, axis=-1)
        rows, targets, weights = [], [], []
        for i, s in enumerate(sequences):
            span = np.arange(prompt_lens[i] - 1, len(s) - 1)
            rows.append(i * (width - 1) + span)
            targets.append(np.asarray(s)[span + 1])
            weights.append(np.full(span.shape, 1.0 / (span.size * batch)))
        picked = T.gather_pairs(logp, np.concatenate(rows), np.concatenate(targets))
        return -(picked * Tensor(np.concatenate(weights))).sum()
