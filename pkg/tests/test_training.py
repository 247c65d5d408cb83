"""Two-stage training: accumulation equivalence, decoupling, determinism."""

import numpy as np
import pytest

from moerec.config import RunConfig, StageConfig, reference_scale_config
from moerec.data import SynthSpec, generate_synthetic, split_records
from moerec.errors import ConfigError, DataError
from moerec.moe import EOS
from moerec.rng import Rng
from moerec.tensor import Tape
from moerec.training import (
    ExplainerBundle,
    _stage2_loss,
    load_bundle,
    load_stage1,
    normalized_ratings,
    prepare_sequence,
    save_bundle,
    save_stage1,
    train_stage1,
    train_stage2,
    vae_config_from,
)
from moerec.vae import VaeGmm, elbo_loss


def small_corpus(seed=0, users=24, items=12, per_user=6):
    spec = SynthSpec(n_users=users, n_items=items, records_per_user=per_user,
                     seed=seed)
    records, labels = generate_synthetic(spec)
    return split_records(records, seed=seed), labels


def small_run(**overrides) -> RunConfig:
    run = RunConfig(d_emb=8, latent_dim=4, clusters=2, gates=-1, enc_hidden=12,
                    model_dim=16, blocks=1, heads=2, context=32,
                    base_experts=2, base_hidden=16, factor=2, active_experts=2,
                    s1_epochs=3, s1_warmup_epochs=2, s1_batch=32,
                    s2_epochs=1, s2_batch=8)
    for key, value in overrides.items():
        setattr(run, key, value)
    return run.validate()


def test_normalized_ratings_validation():
    split, _ = small_corpus()
    values = normalized_ratings(split.train, 5.0)
    assert values.min() >= 0.0 and values.max() <= 1.0
    with pytest.raises(DataError):
        normalized_ratings(split.train, 2.0)


def test_gradient_accumulation_equivalence():
    split, _ = small_corpus()
    run = small_run()
    users = split.user_ids(split.train)[:16]
    items = split.item_ids(split.train)[:16]
    ratings = normalized_ratings(split.train, 5.0)[:16]

    def grads_with(accum):
        model = VaeGmm(vae_config_from(run, split), Rng(3))
        eps_rng = Rng(8).substream("eps")
        n = 16
        step = n // accum
        for p in model.params().values():
            p.grad = None
        for micro in range(accum):
            lo, hi = micro * step, (micro + 1) * step
            with Tape() as tape:
                loss = elbo_loss(model, users[lo:hi], items[lo:hi],
                                 ratings[lo:hi], 0.1, eps_rng)
                tape.backward(loss * (1.0 / accum))
        return {k: p.grad.copy() for k, p in model.params().items()
                if p.grad is not None}

    one = grads_with(1)
    four = grads_with(4)
    assert set(one) == set(four)
    for name in one:
        assert np.max(np.abs(one[name] - four[name])) <= 1e-9, name


def test_stage1_loss_decreases_and_occupancy_reported():
    split, _ = small_corpus()
    run = small_run(s1_epochs=6)
    vae, manifest = train_stage1(split, vae_config_from(run, split), run.stage1())
    rows = manifest["epochs"]
    assert rows[-1]["loss"] < rows[0]["loss"]
    assert all(len(r["occupancy"]) in (1, 2) for r in rows)
    joint = [r for r in rows if r["phase"] == "joint"]
    assert len(joint[0]["occupancy"]) == 2
    assert sum(joint[-1]["occupancy"]) == len(split.train)


def test_stage1_determinism_bit_identical():
    split, _ = small_corpus()
    run = small_run()
    a, _ = train_stage1(split, vae_config_from(run, split), run.stage1())
    b, _ = train_stage1(split, vae_config_from(run, split), run.stage1())
    for name, pa in a.params().items():
        assert np.array_equal(pa.data, b.params()[name].data), name


def test_stage1_empty_dataset_errors():
    split, _ = small_corpus()
    split.train = []
    run = small_run()
    with pytest.raises(DataError):
        train_stage1(split, vae_config_from(run, split), run.stage1())


def test_beta_ablation_reconstruction_report(capsys):
    # with beta=0 the reconstruction term should fit at least as tightly as
    # with beta=0.1; reported rather than asserted as a hard bound
    split, _ = small_corpus()
    run = small_run(s1_epochs=4)
    recon = {}
    for beta in (0.0, 0.1):
        run_b = small_run(s1_epochs=4, beta=beta)
        vae, _ = train_stage1(split, vae_config_from(run_b, split), run_b.stage1())
        users = split.user_ids(split.train)
        items = split.item_ids(split.train)
        ratings = normalized_ratings(split.train, 5.0)
        loss = elbo_loss(vae, users, items, ratings, 0.0, Rng(1), eps_override=0.0)
        recon[beta] = loss.item()
    print(f"reconstruction-only loss: beta=0 {recon[0.0]:.5f}, "
          f"beta=0.1 {recon[0.1]:.5f}")
    assert np.isfinite(recon[0.0]) and np.isfinite(recon[0.1])


def test_prepare_sequence_structure_and_truncation():
    split, _ = small_corpus()
    run = small_run()
    from moerec.moe import Vocab
    vocab = Vocab.build(split.train, list(split.user_index),
                        list(split.item_index), 5.0)
    rec = split.train[0]
    seq, plen = prepare_sequence(vocab, rec, 5.0, run.context)
    assert seq[-1] == EOS
    assert plen < len(seq) - 1
    tight, plen2 = prepare_sequence(vocab, rec, 5.0, plen + 3)
    assert len(tight) == plen2 + 3  # reference truncated to fit + eos


def trained_pair(seed=0, **run_overrides):
    split, labels = small_corpus(seed=seed)
    run = small_run(**run_overrides)
    vae, _ = train_stage1(split, vae_config_from(run, split), run.stage1())
    bundle, manifest = train_stage2(split, vae, run, run.stage2())
    return split, labels, run, bundle, manifest


def test_stage2_trains_and_reports():
    split, _, run, bundle, manifest = trained_pair()
    assert len(manifest["epochs"]) == 1
    assert np.isfinite(manifest["epochs"][0]["loss"])
    text = bundle.generate_explanation(split.test[0])
    assert isinstance(text, str)


def test_stage2_alpha_one_never_touches_lm():
    split, _ = small_corpus()
    run = small_run(alpha=1.0)
    vae, _ = train_stage1(split, vae_config_from(run, split), run.stage1())
    cfg = run.stage2()
    from moerec.moe import LanguageModel, Vocab
    from moerec.training import lm_config_from
    vocab = Vocab.build(split.train, list(split.user_index), list(split.item_index), 5.0)
    lm = LanguageModel(lm_config_from(run, len(vocab)), Rng(5))
    bundle = ExplainerBundle(vae, lm, vocab, split.user_index, split.item_index, 5.0)

    users = split.user_ids(split.train)[:6]
    items = split.item_ids(split.train)[:6]
    ratings = normalized_ratings(split.train, 5.0)[:6]
    prepared = [prepare_sequence(vocab, r, 5.0, run.context) for r in split.train[:6]]
    gates = vae.gates(users, items)
    with Tape() as tape:
        loss = _stage2_loss(bundle, users, items, ratings, prepared, gates, cfg, Rng(9))
        tape.backward(loss)
    for name, p in lm.params().items():
        assert p.grad is None or np.all(p.grad == 0.0), name
    assert any(p.grad is not None and np.any(p.grad != 0.0)
               for p in vae.params().values())


def test_stage2_alpha_zero_never_touches_rating_decoder():
    split, _ = small_corpus()
    run = small_run(alpha=0.0)
    vae, _ = train_stage1(split, vae_config_from(run, split), run.stage1())
    cfg = run.stage2()
    from moerec.moe import LanguageModel, Vocab
    from moerec.training import lm_config_from
    vocab = Vocab.build(split.train, list(split.user_index), list(split.item_index), 5.0)
    lm = LanguageModel(lm_config_from(run, len(vocab)), Rng(5))
    bundle = ExplainerBundle(vae, lm, vocab, split.user_index, split.item_index, 5.0)

    users = split.user_ids(split.train)[:6]
    items = split.item_ids(split.train)[:6]
    ratings = normalized_ratings(split.train, 5.0)[:6]
    prepared = [prepare_sequence(vocab, r, 5.0, run.context) for r in split.train[:6]]
    gates = vae.gates(users, items)
    with Tape() as tape:
        loss = _stage2_loss(bundle, users, items, ratings, prepared, gates, cfg, Rng(9))
        tape.backward(loss)
    for name in ("vae.decoder.w1", "vae.decoder.b1", "vae.decoder.w2", "vae.decoder.b2"):
        p = vae.params()[name]
        assert p.grad is None or np.all(p.grad == 0.0), name
    assert any(p.grad is not None and np.any(p.grad != 0.0)
               for p in lm.params().values())


def test_stage2_freeze_gmm_keeps_prior_fixed():
    split, _ = small_corpus()
    run = small_run(freeze_gmm=True)
    vae, _ = train_stage1(split, vae_config_from(run, split), run.stage1())
    before = {name: vae.params()[name].data.copy()
              for name in ("vae.gmm.pi_logits", "vae.gmm.mu", "vae.gmm.log_var")}
    train_stage2(split, vae, run, run.stage2())
    for name, data in before.items():
        assert np.array_equal(vae.params()[name].data, data), name


def test_stage2_determinism_bit_identical():
    a = trained_pair(seed=3)[3]
    b = trained_pair(seed=3)[3]
    for name, pa in a.params().items():
        assert np.array_equal(pa.data, b.params()[name].data), name


def test_stage2_early_stopping_runs():
    split, _ = small_corpus()
    run = small_run(early_stop=True, patience=0, s2_epochs=4)
    vae, _ = train_stage1(split, vae_config_from(run, split), run.stage1())
    bundle, manifest = train_stage2(split, vae, run, run.stage2())
    assert all("valid_loss" in row for row in manifest["epochs"])
    assert len(manifest["epochs"]) <= 4


def test_save_load_roundtrip_stage1(tmp_path):
    split, _ = small_corpus()
    run = small_run()
    vae, manifest = train_stage1(split, vae_config_from(run, split), run.stage1())
    path = tmp_path / "s1.ckpt"
    save_stage1(path, vae, run, manifest, split.user_index, split.item_index,
                f64=True)
    loaded, run2, _, user_index, item_index = load_stage1(path)
    assert user_index == split.user_index
    for name, p in vae.params().items():
        assert np.array_equal(p.data, loaded.params()[name].data), name


def test_save_load_roundtrip_bundle(tmp_path):
    split, _, run, bundle, manifest = trained_pair()
    path = tmp_path / "s2.ckpt"
    save_bundle(path, bundle, run, manifest, f64=True)
    loaded, _, _ = load_bundle(path)
    for name, p in bundle.params().items():
        assert np.array_equal(p.data, loaded.params()[name].data), name
    rec = split.test[0]
    assert loaded.generate_explanation(rec) == bundle.generate_explanation(rec)


def test_unknown_user_routes_through_fallback_row():
    split, _, run, bundle, _ = trained_pair()
    from moerec.data import InteractionRecord
    ghost = InteractionRecord("nobody", "nothing", 4.0, ["wifi"], "")
    gate, gamma = bundle.gate_for(ghost)
    assert 0 <= gate < run.clusters
    assert abs(gamma.sum() - 1.0) <= 1e-9
    text = bundle.generate_explanation(ghost)
    assert isinstance(text, str)


def test_reference_scale_settings_recorded():
    run = reference_scale_config().validate()
    s1 = run.stage1()
    assert (s1.batch_size, s1.lr, s1.beta, s1.epochs) == (4096, 1e-5, 0.1, 30)
    s2 = run.stage2()
    assert (s2.alpha, s2.batch_size, s2.lr) == (0.1, 1, 3e-5)
    assert (s2.grad_accum_steps, s2.clip_norm, s2.epochs) == (8, 0.3, 3)
    assert (run.base_experts, run.base_hidden, run.factor) == (6, 4096, 2)
    assert run.active_experts == 2 and run.blocks == 32
    assert run.d_emb == 768 and run.latent_dim == 128


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        StageConfig(stage=3, epochs=1, batch_size=1, lr=0.1)
    with pytest.raises(ConfigError):
        StageConfig(stage=1, epochs=1, batch_size=1, lr=0.1, beta=1.5)


def test_checkpoint_tensor_name_contract():
    split, _, run, bundle, _ = trained_pair()
    names = set(bundle.params())
    required = {
        "vae.embeddings.user", "vae.embeddings.item",
        "vae.encoder.w1", "vae.encoder.b1", "vae.encoder.w2", "vae.encoder.b2",
        "vae.decoder.w1", "vae.decoder.b1", "vae.decoder.w2", "vae.decoder.b2",
        "vae.gmm.pi_logits", "vae.gmm.mu", "vae.gmm.log_var",
        "lm.embed", "lm.head",
        "lm.block0.attn.wq", "lm.block0.attn.wk", "lm.block0.attn.wv",
        "lm.block0.attn.wo",
        "lm.block0.moe.expert0.w1", "lm.block0.moe.expert3.w2",
        "lm.block0.router.gate0", "lm.block0.router.gate1",
    }
    assert required <= names


def test_run_manifest_structure():
    _, _, _, _, manifest = trained_pair()
    assert manifest["stage"] == "stage2"
    assert "seed" in manifest and "config" in manifest
    assert all({"epoch", "loss", "occupancy"} <= set(row)
               for row in manifest["epochs"])


def test_prompt_text_rendering():
    split, _, run, bundle, _ = trained_pair()
    rec = split.test[0]
    text = bundle.prompt_text(rec)
    assert text.startswith("<bos> U: u:") and text.endswith("EXP:")


# the planted-users-get-distinct-gates end-to-end check lives in the
# acceptance suite where the full-sized corpus makes it reliable
