import json
import warnings

import numpy as np
import pytest
import torch

from lipvox import training
from lipvox.checkpoint import load_checkpoint, save_checkpoint
from lipvox.config import TrainConfig
from lipvox.corpus import batch_iterator
from lipvox.embedders import SurrogateError
from lipvox.models import SIGMA_MIN
from lipvox.training import (
    EarlyStopping,
    TrainingDivergedError,
    apply_crop,
    build_networks,
    finetune,
    generator_losses,
    new_state,
    state_from_checkpoint,
    state_to_checkpoint,
    train,
)


def small_config(**kw):
    base = dict(batch_size=2, learning_rate=1e-3, max_epochs=1, critic_iters_per_gen=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def first_batch(corpus, cfg):
    return next(batch_iterator(corpus, cfg.batch_size, cfg.seed, 0))


def test_early_stopping_patience_boundary():
    stop = EarlyStopping(patience=10, min_delta=1e-4)
    assert stop.update(1.0, 1)
    for epoch in range(2, 11):
        assert not stop.update(1.0 - 5e-5, epoch)
        assert not stop.should_stop
    stop.update(1.0, 11)
    assert stop.should_stop and stop.best_epoch == 1


def test_early_stopping_resets_on_improvement():
    stop = EarlyStopping(patience=2, min_delta=0.1)
    stop.update(1.0, 1)
    stop.update(1.0, 2)
    assert stop.update(0.85, 3)
    stop.update(0.9, 4)
    assert not stop.should_stop


def test_plateau_halts_at_patience(tiny_corpus, tiny_surrogates, monkeypatch):
    values = iter([5.0, 4.0, 3.0] + [3.0] * 50)

    def fake_epoch(state, corpus):
        state.epoch += 1
        state.step += 1
        return {"epoch": state.epoch, "step": state.step, "critic_objective": next(values), "l_r": 0.0,
                "l_kl_global": 0.0, "l_kl_local": 0.0, "l_voice": 0.0, "wasserstein": 0.0}

    monkeypatch.setattr(training, "run_epoch", fake_epoch)
    result = train(tiny_corpus, small_config(max_epochs=100, patience_epochs=10), surrogates=tiny_surrogates)
    assert result.stop_reason == "patience"
    assert result.best_epoch == 3
    assert len(result.history) == 13


def test_crop_modes():
    x = torch.arange(96, dtype=torch.float32)[None, None, :, None, None].expand(1, 2, 96, 96, 3)
    assert torch.equal(apply_crop(x, "full_face"), x)
    low = apply_crop(x, "lower_half")
    assert low.shape == x.shape
    assert low[0, 0, 0, 0, 0] == 48 and low[0, 0, 1, 0, 0] == 48 and low[0, 0, 95, 0, 0] == 95
    with pytest.raises(ValueError):
        apply_crop(x, "eyes")


def test_missing_surrogates():
    with pytest.raises(SurrogateError):
        new_state(small_config(), None)


def test_run_outputs(tiny_run):
    out = tiny_run.out_dir
    assert (out / "best.ckpt").exists() and (out / "last.ckpt").exists()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    for key in ("l_r", "l_kl_global", "l_kl_local", "l_voice", "l_adv_gen", "l_adv_critic", "l_gp",
                "total_gen", "wasserstein", "critic_objective"):
        assert np.isfinite(rec[key])
    ckpt = load_checkpoint(out / "last.ckpt")
    assert ckpt.epoch == 1 and ckpt.step == 2


def test_identical_seeds_identical_logs(tiny_corpus, tiny_surrogates, tiny_run, tmp_path):
    again = train(tiny_corpus, tiny_run.state.config, tmp_path, surrogates=tiny_surrogates)
    assert (tmp_path / "metrics.jsonl").read_bytes() == (tiny_run.out_dir / "metrics.jsonl").read_bytes()
    assert again.history == tiny_run.history


def test_checkpoint_forward_bit_identical(tiny_run, tmp_path):
    state = tiny_run.state
    save_checkpoint(state_to_checkpoint(state), tmp_path / "x.ckpt")
    net, critic, surrogates = build_networks(load_checkpoint(tmp_path / "x.ckpt").params)
    probe = torch.rand(1, 5, 96, 96, 3, generator=torch.Generator().manual_seed(0))
    state.net.eval()
    net.eval()
    with torch.no_grad():
        a = state.net.lip_distribution(probe)[0]
        b = net.lip_distribution(probe)[0]
        mel = torch.rand(1, 100, 80)
        assert torch.equal(state.critic(mel), critic(mel))
    assert torch.equal(a, b)
    assert surrogates.checksum() == state.surrogates.checksum()


def test_resume_continues_identically(tiny_corpus, tiny_surrogates, tmp_path):
    cfg = small_config(max_epochs=2)
    full = train(tiny_corpus, cfg, surrogates=tiny_surrogates)
    one = train(tiny_corpus, small_config(max_epochs=1), surrogates=tiny_surrogates)
    state = state_from_checkpoint(state_to_checkpoint(one.state), cfg)
    resumed = training._fit(state, tiny_corpus, None)
    assert resumed.history[-1] == pytest.approx(full.history[-1])


def test_gradient_provenance_content_source(tiny_corpus, tiny_surrogates):
    cfg = small_config()
    state = new_state(cfg, tiny_surrogates)
    batch = first_batch(tiny_corpus, cfg)
    for p in state.critic.parameters():
        p.requires_grad_(False)
    _, parts, _ = generator_losses(state, batch)
    decoder_terms = parts["l_r"] + parts["l_voice"] + parts["l_adv_gen"]
    decoder_terms.backward(retain_graph=True)
    assert all(p.grad is None or not p.grad.any() for p in state.net.proj_lip.parameters())
    assert all(p.grad is None or not p.grad.any() for p in state.net.visual.parameters())
    assert all(p.grad is None for p in state.critic.parameters())
    assert any(p.grad is not None and p.grad.any() for p in state.net.decoder.parameters())
    state.net.zero_grad()
    parts["l_kl_global"].backward()
    assert any(p.grad is not None and p.grad.any() for p in state.net.proj_lip.parameters())


def test_critic_step_leaves_generator_untouched(tiny_corpus, tiny_surrogates):
    cfg = small_config()
    state = new_state(cfg, tiny_surrogates)
    before = {k: v.clone() for k, v in state.net.state_dict().items()}
    critic_before = [p.clone() for p in state.critic.parameters()]
    training.critic_step(state, first_batch(tiny_corpus, cfg))
    assert all(torch.equal(v, state.net.state_dict()[k]) for k, v in before.items())
    assert any(not torch.equal(a, b) for a, b in zip(critic_before, state.critic.parameters()))
    assert all(p.grad is None or not p.grad.any() for p in state.net.parameters())


def test_generator_step_leaves_critic_untouched(tiny_corpus, tiny_surrogates):
    cfg = small_config()
    state = new_state(cfg, tiny_surrogates)
    before = [p.clone() for p in state.critic.parameters()]
    training.generator_step(state, first_batch(tiny_corpus, cfg))
    assert all(torch.equal(a, b) for a, b in zip(before, state.critic.parameters()))
    assert all(p.requires_grad for p in state.critic.parameters())


def test_alternate_schedule():
    cfg = small_config(sampling_source="alternate")
    assert [training._source_for_step(cfg, s) for s in range(4)] == ["content", "lip", "content", "lip"]
    assert training._source_for_step(small_config(sampling_source="lip"), 0) == "lip"


def test_non_variational_smoke(tiny_corpus, tiny_surrogates):
    cfg = small_config(variational=False)
    state = new_state(cfg, tiny_surrogates)
    batch = first_batch(tiny_corpus, cfg)
    content, lip = training._distributions(state, torch.as_tensor(batch.lips), torch.as_tensor(batch.mel))
    assert torch.all(content[1] == SIGMA_MIN) and torch.all(lip[1] == SIGMA_MIN)
    _, parts, _ = generator_losses(state, batch)
    assert parts["l_kl_global"].item() == 0.0 and parts["l_kl_local"].item() == 0.0
    result = train(tiny_corpus, cfg, surrogates=tiny_surrogates)
    assert np.isfinite(result.history[-1]["l_r"])


def test_divergence_names_term(tiny_corpus, tiny_surrogates):
    cfg = small_config()
    state = new_state(cfg, tiny_surrogates)
    with torch.no_grad():
        state.net.decoder.dense[-1].bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="l_r"):
        generator_losses(state, first_batch(tiny_corpus, cfg))


def test_batch_larger_than_corpus(tiny_corpus, tiny_surrogates):
    from lipvox.corpus import CorpusError
    with pytest.raises(CorpusError):
        train(tiny_corpus, small_config(batch_size=64), surrogates=tiny_surrogates)


def test_zero_step_finetune_is_identity(tiny_run, tiny_corpus):
    base = state_to_checkpoint(tiny_run.state)
    sub = tiny_corpus.subset(tiny_corpus.manifest.select(speakers=[tiny_corpus.speaker_ids[0]]))
    result = finetune(base, sub, small_config(max_steps=0))
    after = state_to_checkpoint(result.state)
    assert all(np.array_equal(base.params[k], after.params[k]) for k in base.params)
    assert result.state.step == 0


def test_finetune_keeps_surrogates_frozen(tiny_run, tiny_corpus):
    base = state_to_checkpoint(tiny_run.state)
    checksum = tiny_run.state.surrogates.checksum()
    sub = tiny_corpus.subset(tiny_corpus.manifest.select(speakers=[tiny_corpus.speaker_ids[0]]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        result = finetune(base, sub, small_config(max_steps=1))
    assert result.state.surrogates.checksum() == checksum
    changed = state_to_checkpoint(result.state).params
    assert any(not np.array_equal(base.params[k], changed[k]) for k in base.params if k.startswith("gen."))


def test_finetune_warns_on_multi_speaker(tiny_run, tiny_corpus):
    with pytest.warns(UserWarning, match="speakers"):
        finetune(state_to_checkpoint(tiny_run.state), tiny_corpus, small_config(max_steps=0))
