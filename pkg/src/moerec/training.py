"""Two-stage training: preference learning, then explanation generation.

Stage 1 trains the variational preference model alone. It starts with a
warm-up phase under a single standard-normal prior component (the prior is
frozen there), fits the K-component mixture to the warmed-up latent means
(k-means++ seeding), then optimizes the full ELBO jointly, prior included.

Stage 2 adds the expert-routed language model. Every record's gate is its
hard cluster assignment along the deterministic mean path; the loss is

    alpha * elbo + (1 - alpha) * mean continuation NLL

and the preference model (mixture prior included, unless frozen) keeps
training because the ELBO term remains in the objective. The degenerate
mixing values are honored exactly: alpha=1 never touches the language
model, alpha=0 never touches the rating decoder.

Batch losses are means over records; with gradient accumulation each
micro-batch loss is divided by the accumulation count, so accumulating n
equal micro-batches is numerically the same step as one concatenated
batch. Every source of randomness derives from the stage seed through
labeled substreams, which makes whole runs bit-reproducible.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .config import RunConfig, StageConfig
from .data import DatasetSplit, InteractionRecord
from .errors import ContextLimitError, DataError, TrainingError
from .moe import EOS, LanguageModel, LmConfig, Vocab, build_prompt, decompose_experts, tokenize
from .optim import AdamW
from .rng import Rng
from .tensor import Tape, Tensor
from .vae import VaeConfig, VaeGmm, elbo_loss, init_gmm_prior


def normalized_ratings(records, r_max: float) -> np.ndarray:
    ratings = np.array([rec.rating for rec in records], dtype=np.float64)
    if ratings.size and ratings.max() > r_max:
        raise DataError(
            f"rating {ratings.max()} exceeds r_max={r_max}; fix the dataset metadata")
    return ratings / r_max


def _epoch_batches(n: int, batch_size: int, rng: Rng) -> List[np.ndarray]:
    order = np.array(rng.shuffle(list(range(n))), dtype=np.int64)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]


def _occupancy(model: VaeGmm, users: np.ndarray, items: np.ndarray) -> List[int]:
    gates = model.gates(users, items)
    return np.bincount(gates, minlength=model.prior.clusters).tolist()


def vae_config_from(run: RunConfig, split: DatasetSplit) -> VaeConfig:
    return VaeConfig(n_users=split.n_users, n_items=split.n_items,
                     d_emb=run.d_emb, latent_dim=run.latent_dim,
                     hidden=run.enc_hidden, clusters=run.clusters,
                     r_max=run.r_max, encoder_attention=run.encoder_attention)


def lm_config_from(run: RunConfig, vocab_size: int) -> LmConfig:
    moe = decompose_experts(run.base_experts, run.base_hidden, run.factor,
                            active=run.active_experts, gates=run.gates)
    return LmConfig(vocab_size=vocab_size, model_dim=run.model_dim,
                    blocks=run.blocks, heads=run.heads, context=run.context,
                    moe=moe, renormalize_topk=run.renormalize_topk)


def train_stage1(split: DatasetSplit, vae_config: VaeConfig,
                 cfg: StageConfig) -> tuple:
    """Returns (trained VaeGmm, run manifest dict)."""
    if not split.train:
        raise DataError("stage 1 needs a non-empty training split")
    root = Rng(cfg.seed)
    model = VaeGmm(vae_config, root.substream("init.vae"))
    users = split.user_ids(split.train)
    items = split.item_ids(split.train)
    ratings = normalized_ratings(split.train, vae_config.r_max)
    eps_rng = root.substream("stage1.eps")
    started = time.time()
    epochs: List[dict] = []

    def run_epoch(opt, epoch_rng, beta) -> float:
        losses = []
        micro = 0
        opt.zero_grad()
        for idx in _epoch_batches(len(split.train), cfg.batch_size, epoch_rng):
            with Tape() as tape:
                loss = elbo_loss(model, users[idx], items[idx], ratings[idx],
                                 beta, eps_rng)
                tape.backward(loss * (1.0 / cfg.grad_accum_steps))
            losses.append(loss.item())
            micro += 1
            if micro % cfg.grad_accum_steps == 0:
                opt.step(clip_norm=cfg.clip_norm)
                opt.zero_grad()
        if micro % cfg.grad_accum_steps:
            opt.step(clip_norm=cfg.clip_norm)
            opt.zero_grad()
        return float(np.mean(losses))

    # warm-up: single standard-normal component, prior frozen. The KL weight
    # here is usually zero (pure reconstruction): it lets the posterior
    # variances shrink below the cluster separation before the mixture is
    # fitted, which is what makes the fit informative at this scale.
    warm_params = {k: v for k, v in model.params().items()
                   if not k.startswith("vae.gmm.")}
    opt = AdamW(warm_params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    for epoch in range(cfg.warmup_epochs):
        loss = run_epoch(opt, root.substream(f"stage1.shuffle.warm{epoch}"),
                         cfg.warmup_beta)
        epochs.append({"phase": "warmup", "epoch": epoch, "loss": loss,
                       "occupancy": _occupancy(model, users, items)})

    mu_all, log_var_all = model.encode(users, items)
    point_vars = np.exp(np.clip(log_var_all.data, -10.0, 10.0))
    model.prior = init_gmm_prior(mu_all.data, vae_config.clusters,
                                 root.substream("init.gmm"),
                                 point_vars=point_vars)

    opt = AdamW(model.params(), lr=cfg.effective_joint_lr(),
                weight_decay=cfg.weight_decay)
    best_valid, stale = np.inf, 0
    for epoch in range(cfg.epochs):
        loss = run_epoch(opt, root.substream(f"stage1.shuffle.{epoch}"), cfg.beta)
        row = {"phase": "joint", "epoch": epoch, "loss": loss,
               "occupancy": _occupancy(model, users, items)}
        if cfg.early_stop and split.valid:
            row["valid_loss"] = _stage1_valid_loss(model, split, cfg, epoch)
            if row["valid_loss"] < best_valid - 1e-9:
                best_valid, stale = row["valid_loss"], 0
            else:
                stale += 1
        epochs.append(row)
        if cfg.early_stop and stale > cfg.patience:
            break

    manifest = {
        "stage": "stage1",
        "seed": cfg.seed,
        "config": vars(cfg) | {"latent_dim": vae_config.latent_dim,
                               "clusters": vae_config.clusters},
        "epochs": epochs,
        "wall_seconds": round(time.time() - started, 3),
    }
    return model, manifest


def _stage1_valid_loss(model, split, cfg, epoch) -> float:
    users = split.user_ids(split.valid)
    items = split.item_ids(split.valid)
    ratings = normalized_ratings(split.valid, model.config.r_max)
    loss = elbo_loss(model, users, items, ratings, cfg.beta,
                     Rng(cfg.seed).substream(f"stage1.valid.{epoch}"))
    return loss.item()


def prepare_sequence(vocab: Vocab, record: InteractionRecord, r_max: float,
                     context: int) -> tuple:
    """(token array prompt+reference+<eos>, prompt length); the reference is
    truncated when the sequence would exceed the model context."""
    prompt = build_prompt(vocab, record.user, record.item, record.rating,
                          record.features, r_max)
    if len(prompt) + 2 > context:
        raise ContextLimitError(
            f"prompt of {len(prompt)} tokens leaves no room in context {context}")
    reference = [vocab.encode(w) for w in tokenize(record.explanation)]
    room = context - len(prompt) - 1
    reference = reference[:room]
    if not reference:
        raise DataError(f"record {record.user}/{record.item} has no explanation tokens")
    seq = np.array(prompt + reference + [EOS], dtype=np.int64)
    return seq, len(prompt)


@dataclass
class ExplainerBundle:
    """Everything needed to explain: preference model, language model,
    vocabulary, and the id maps that bind records to table rows."""

    vae: VaeGmm
    lm: LanguageModel
    vocab: Vocab
    user_index: Dict[str, int]
    item_index: Dict[str, int]
    r_max: float = 5.0

    @property
    def clusters(self) -> int:
        return self.vae.prior.clusters

    @property
    def gates_count(self) -> int:
        return self.lm.config.moe.gates

    def ids_for(self, record: InteractionRecord) -> tuple:
        unk_u = len(self.user_index)
        unk_i = len(self.item_index)
        return (self.user_index.get(record.user, unk_u),
                self.item_index.get(record.item, unk_i))

    def gate_for(self, record: InteractionRecord) -> tuple:
        """(gate index, responsibilities) on the deterministic mean path."""
        u, i = self.ids_for(record)
        gamma = self.vae.posteriors(np.array([u]), np.array([i]))[0]
        return int(np.argmax(gamma)), gamma

    def prompt_text(self, record: InteractionRecord) -> str:
        return self.vocab.decode(build_prompt(
            self.vocab, record.user, record.item, record.rating,
            record.features, self.r_max))

    def generate_explanation(self, record: InteractionRecord, max_len: int = 16,
                             mode: str = "greedy", temperature: float = 1.0,
                             seed: int = 0) -> str:
        gate, _ = self.gate_for(record)
        prompt = build_prompt(self.vocab, record.user, record.item,
                              record.rating, record.features, self.r_max)
        ids = self.lm.generate(prompt, gate, max_len=max_len, mode=mode,
                               temperature=temperature, seed=seed)
        return self.vocab.decode(ids)

    def predict_norm_rating(self, record: InteractionRecord) -> float:
        u, i = self.ids_for(record)
        return float(self.vae.predict_rating(np.array([u]), np.array([i]))[0])

    def params(self) -> dict:
        return {**self.vae.params(), **self.lm.params()}


def train_stage2(split: DatasetSplit, vae: VaeGmm, run: RunConfig,
                 cfg: StageConfig) -> tuple:
    """Returns (ExplainerBundle, run manifest dict)."""
    if not split.train:
        raise DataError("stage 2 needs a non-empty training split")
    root = Rng(cfg.seed).substream("stage2")
    vocab = Vocab.build(split.train, list(split.user_index), list(split.item_index),
                        r_max=run.r_max)
    lm = LanguageModel(lm_config_from(run, len(vocab)), root.substream("init.lm"))
    bundle = ExplainerBundle(vae=vae, lm=lm, vocab=vocab,
                             user_index=split.user_index,
                             item_index=split.item_index, r_max=run.r_max)

    users = split.user_ids(split.train)
    items = split.item_ids(split.train)
    ratings = normalized_ratings(split.train, run.r_max)
    prepared = [prepare_sequence(vocab, rec, run.r_max, run.context)
                for rec in split.train]

    params = bundle.params()
    if cfg.freeze_gmm:
        params = {k: v for k, v in params.items() if not k.startswith("vae.gmm.")}
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    eps_rng = root.substream("eps")
    started = time.time()
    epochs: List[dict] = []
    best_valid, stale = np.inf, 0

    for epoch in range(cfg.epochs):
        losses = []
        micro = 0
        opt.zero_grad()
        for idx in _epoch_batches(len(split.train), cfg.batch_size,
                                  root.substream(f"shuffle.{epoch}")):
            gates = vae.gates(users[idx], items[idx])
            with Tape() as tape:
                loss = _stage2_loss(bundle, users[idx], items[idx], ratings[idx],
                                    [prepared[i] for i in idx], gates, cfg, eps_rng)
                tape.backward(loss * (1.0 / cfg.grad_accum_steps))
            losses.append(loss.item())
            micro += 1
            if micro % cfg.grad_accum_steps == 0:
                opt.step(clip_norm=cfg.clip_norm)
                opt.zero_grad()
        if micro % cfg.grad_accum_steps:
            opt.step(clip_norm=cfg.clip_norm)
            opt.zero_grad()
        row = {"epoch": epoch, "loss": float(np.mean(losses)),
               "occupancy": _occupancy(vae, users, items)}
        if cfg.early_stop and split.valid:
            row["valid_loss"] = _stage2_valid_loss(bundle, split, run, cfg, epoch)
            if row["valid_loss"] < best_valid - 1e-9:
                best_valid, stale = row["valid_loss"], 0
            else:
                stale += 1
        epochs.append(row)
        if cfg.early_stop and stale > cfg.patience:
            break

    manifest = {
        "stage": "stage2",
        "seed": cfg.seed,
        "config": vars(cfg) | {"clusters": run.clusters, "gates": run.gates},
        "epochs": epochs,
        "wall_seconds": round(time.time() - started, 3),
    }
    return bundle, manifest


def _stage2_loss(bundle: ExplainerBundle, users, items, ratings, prepared,
                 gates, cfg: StageConfig, eps_rng: Rng,
                 eps_override=None, gamma_override=None) -> Tensor:
    if cfg.alpha == 1.0:
        return elbo_loss(bundle.vae, users, items, ratings, cfg.beta, eps_rng,
                         eps_override=eps_override, gamma_override=gamma_override)
    sequences = [seq for seq, _ in prepared]
    prompt_lens = [plen for _, plen in prepared]
    nll = bundle.lm.batched_nll(sequences, prompt_lens, gates)
    if cfg.alpha == 0.0:
        return nll
    elbo = elbo_loss(bundle.vae, users, items, ratings, cfg.beta, eps_rng,
                     eps_override=eps_override, gamma_override=gamma_override)
    return elbo * cfg.alpha + nll * (1.0 - cfg.alpha)


def _stage2_valid_loss(bundle, split, run, cfg, epoch) -> float:
    users = split.user_ids(split.valid)
    items = split.item_ids(split.valid)
    ratings = normalized_ratings(split.valid, run.r_max)
    prepared = [prepare_sequence(bundle.vocab, rec, run.r_max, run.context)
                for rec in split.valid]
    gates = bundle.vae.gates(users, items)
    loss = _stage2_loss(bundle, users, items, ratings, prepared, gates, cfg,
                        Rng(cfg.seed).substream(f"stage2.valid.{epoch}"))
    return loss.item()


# --- persistence glue ---

def save_stage1(path, vae: VaeGmm, run: RunConfig, manifest: dict,
                user_index: Dict[str, int], item_index: Dict[str, int],
                f64: bool = False) -> None:
    # run manifests (which carry wall-clock times) live in the sidecar
    # manifest file, never in the checkpoint: checkpoint bytes must be a
    # pure function of config, seed, and data
    save_checkpoint(path, vae.params(), config=run.to_dict(), seed=run.seed,
                    stage="stage1",
                    extra={"users": sorted(user_index),
                           "items": sorted(item_index)},
                    f64=f64)


def load_stage1(path) -> tuple:
    """Returns (vae, run config, manifest, user_index, item_index)."""
    manifest, arrays = load_checkpoint(path)
    if manifest["stage"] != "stage1":
        raise TrainingError(f"expected a stage1 checkpoint, found {manifest['stage']!r}")
    run = RunConfig(**manifest["config"]).validate()
    users = manifest["extra"]["users"]
    items = manifest["extra"]["items"]
    cfg = VaeConfig(n_users=len(users), n_items=len(items),
                    d_emb=run.d_emb, latent_dim=run.latent_dim,
                    hidden=run.enc_hidden, clusters=run.clusters,
                    r_max=run.r_max, encoder_attention=run.encoder_attention)
    vae = VaeGmm(cfg, Rng(0))
    from .vae import GmmPrior
    vae.prior = GmmPrior.standard_normal(run.clusters, run.latent_dim)
    restore_params(vae.params(), arrays)
    user_index = {u: i for i, u in enumerate(users)}
    item_index = {it: i for i, it in enumerate(items)}
    return vae, run, manifest, user_index, item_index


def save_bundle(path, bundle: ExplainerBundle, run: RunConfig, manifest: dict,
                f64: bool = False) -> None:
    bundle.vocab.save(str(path) + ".vocab.txt")
    # the vocab sidecar is recorded by basename and resolved relative to the
    # checkpoint, so checkpoint bytes do not depend on the directory
    save_checkpoint(path, bundle.params(), config=run.to_dict(), seed=run.seed,
                    stage="stage2",
                    extra={"users": sorted(bundle.user_index),
                           "items": sorted(bundle.item_index),
                           "vocab_file": os.path.basename(str(path)) + ".vocab.txt"},
                    f64=f64)


def load_bundle(path) -> tuple:
    manifest, arrays = load_checkpoint(path)
    if manifest["stage"] != "stage2":
        raise TrainingError(f"expected a stage2 checkpoint, found {manifest['stage']!r}")
    run = RunConfig(**manifest["config"]).validate()
    users = manifest["extra"]["users"]
    items = manifest["extra"]["items"]
    vocab = Vocab.load(os.path.join(os.path.dirname(str(path)) or ".",
                                    manifest["extra"]["vocab_file"]))
    cfg = VaeConfig(n_users=len(users), n_items=len(items), d_emb=run.d_emb,
                    latent_dim=run.latent_dim, hidden=run.enc_hidden,
                    clusters=run.clusters, r_max=run.r_max,
                    encoder_attention=run.encoder_attention)
    vae = VaeGmm(cfg, Rng(0))
    from .vae import GmmPrior
    vae.prior = GmmPrior.standard_normal(run.clusters, run.latent_dim)
    lm = LanguageModel(lm_config_from(run, len(vocab)), Rng(0))
    bundle = ExplainerBundle(vae=vae, lm=lm, vocab=vocab,
                             user_index={u: i for i, u in enumerate(users)},
                             item_index={it: i for i, it in enumerate(items)},
                             r_max=run.r_max)
    restore_params(bundle.params(), arrays)
    return bundle, run, manifest
