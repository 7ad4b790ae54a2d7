from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from odecorrect.checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from odecorrect.dataset import PromptInstance, generate_corpus, split_corpus
from odecorrect.integrators import integrate
from odecorrect.model import (PRESETS, CorrectionMode, CorrectorTransformer, ModelConfig, TrainConfig, Trainer,
                              TrainingDiverged, batch_loss, collate, correct_trajectory, forward_queries, grad,
                              load_model, loss, model_corrector, oracle_corrector, predict_correction,
                              predict_corrections, resume_trainer, save_model, warmup_cosine)
from odecorrect.tokenizer import Normalizer, TokenCategory as C, tokenize

from helpers import permute_sequence, toy_instance

SMALL = PRESETS["small"]


@pytest.fixture(scope="module")
def damped():
    corpus = generate_corpus("damped_oscillator", "pretrain", 3, 8, n_coarse=6, seed=4)
    return corpus, Normalizer.fit(corpus.records)


def run_full(model, seq):
    return forward_queries(model, seq).detach()


def test_config_validation_and_presets():
    with pytest.raises(ValueError):
        ModelConfig(n_heads=6, d_model=64)
    big = PRESETS["paper"]
    assert (big.n_heads, big.d_model, big.d_ff) == (6, 256, 1024)
    desk = PRESETS["desk"]
    assert (desk.n_layers, desk.n_heads, desk.d_model, desk.d_ff) == (2, 4, 64, 256)
    assert CorrectorTransformer(big).n_parameters() > 10 * CorrectorTransformer(desk).n_parameters()


def test_constant_network_returns_head_bias():
    model = CorrectorTransformer(SMALL, seed=1)
    b = torch.tensor([0.3, -1.25, 7.0], dtype=torch.float64)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.head[-1].bias.copy_(b)
    seq = tokenize(toy_instance(d=2, n_nodes=4), 3)
    out = run_full(model, seq)
    assert torch.equal(out, b.expand_as(out))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 3), st.integers(2, 5), st.integers(0, 1000))
def test_query_permutation_permutes_predictions(d, n, seed):
    model = CorrectorTransformer(SMALL, seed=seed)
    seq = tokenize(toy_instance(d=d, n_nodes=n, seed=seed), 3)
    perm = permute_sequence(seq, np.random.default_rng(seed))
    shuffled = seq.__class__(**{**seq.__dict__, **perm.fields})
    a = run_full(model, seq)
    b = run_full(model, shuffled)
    qs = seq.final_queries
    src = perm.order[qs] - qs[0]          # which original query each new slot holds
    assert torch.max(torch.abs(b - a[src])) <= 1e-10


def test_removing_other_queries_changes_nothing():
    model = CorrectorTransformer(SMALL, seed=3)
    inst = toy_instance(d=2, n_nodes=5)
    full = run_full(model, tokenize(inst, 3))
    for j in range(5):
        one = run_full(model, tokenize(inst, 3, query_nodes=[j]))
        assert torch.max(torch.abs(one[0] - full[j])) <= 1e-10


def test_final_targets_do_not_leak():
    model = CorrectorTransformer(SMALL, seed=2)
    seq = tokenize(toy_instance(d=2, n_nodes=4), 3)
    before = run_full(model, seq)
    errs = (seq.demo == seq.d) & (seq.category == C.ERROR)
    seq.values[errs] = np.random.default_rng(0).normal(size=seq.values[errs].shape) * 1e6
    assert torch.equal(run_full(model, seq), before)


def test_loss_examples():
    t = torch.randn(2, 5, 3, dtype=torch.float64)
    m = torch.ones_like(t, dtype=torch.bool)
    assert loss(t, t, m) == 0
    assert loss(t + 2, t, m) == pytest.approx(4.0, abs=1e-14)
    with pytest.raises(ValueError):
        loss(t, t, torch.zeros_like(m))


def test_loss_matches_brute_force():
    rng = np.random.default_rng(0)
    pred, target = rng.normal(size=(3, 7, 3)), rng.normal(size=(3, 7, 3))
    mask = rng.random((3, 7, 3)) > 0.4
    total, count = 0.0, 0
    for idx in np.ndindex(*pred.shape):
        if mask[idx]:
            total += (pred[idx] - target[idx]) ** 2
            count += 1
    got = float(loss(torch.as_tensor(pred), torch.as_tensor(target), torch.as_tensor(mask)))
    assert abs(got - total / count) <= 1e-12
    perm = rng.permutation(7)
    again = float(loss(torch.as_tensor(pred[:, perm]), torch.as_tensor(target[:, perm]),
                       torch.as_tensor(mask[:, perm])))
    assert abs(again - got) <= 1e-15


def test_unused_parameter_has_zero_gradient():
    model = CorrectorTransformer(SMALL, seed=0)
    # d=0 with no query errors: no ERROR tokens, so that positional row is never read
    seq = tokenize(toy_instance(d=0, n_nodes=4), 3, query_errors=False)
    seq.target_mask[seq.final_queries] = True
    g = grad(model, collate([seq], torch.float64))
    assert torch.all(g["embedding.positional"][C.ERROR] == 0)
    assert torch.any(g["embedding.positional"][C.QUERY] != 0)


def test_gradient_scales_linearly():
    model = CorrectorTransformer(SMALL, seed=0)
    batch = collate([tokenize(toy_instance(d=1, n_nodes=3), 3)], torch.float64)
    g1, g2 = grad(model, batch), grad(model, batch, scale=2.0)
    for k in g1:
        torch.testing.assert_close(g2[k], 2 * g1[k], rtol=1e-12, atol=0)


def test_gradient_matches_finite_differences():
    model = CorrectorTransformer(SMALL, seed=5)
    batch = collate([tokenize(toy_instance(d=1, n_nodes=3, seed=s), 3) for s in range(2)], torch.float64)
    g = grad(model, batch)
    params = dict(model.named_parameters())
    rng = np.random.default_rng(0)
    names = list(params)
    for _ in range(10):
        name = names[rng.integers(len(names))]
        flat = params[name].data.view(-1)
        i = int(rng.integers(flat.numel()))
        h = 1e-5
        with torch.no_grad():
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(batch_loss(model, batch))
            flat[i] = orig - h
            down = float(batch_loss(model, batch))
            flat[i] = orig
        fd = (up - down) / (2 * h)
        an = float(g[name].view(-1)[i])
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6), (name, i, fd, an)


def test_warmup_cosine_shape():
    total, peak = 100, 1e-3
    lrs = [warmup_cosine(s, total, peak) for s in range(total)]
    assert lrs[0] == pytest.approx(peak / 5)
    assert max(lrs) == pytest.approx(peak)
    assert lrs[-1] < 1e-3 * peak
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))


def test_zero_lr_keeps_parameters(damped):
    corpus, norm = damped
    model = CorrectorTransformer(SMALL, seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    trainer = Trainer(model, norm, corpus, TrainConfig(epochs=2, peak_lr=0.0, d=5))
    trainer.fit()
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])
    assert any(float(st["exp_avg_sq"].abs().sum()) > 0 for st in trainer.opt.state.values())


def test_training_is_reproducible(damped):
    corpus, norm = damped
    curves = []
    for _ in range(2):
        trainer = Trainer(CorrectorTransformer(SMALL, seed=0), norm, corpus, TrainConfig(epochs=3, d=5))
        curves.append([h["train_mse"] for h in trainer.fit()])
    assert curves[0] == curves[1]


def test_toy_training_reduces_loss():
    corpus = generate_corpus("damped_oscillator", "pretrain", 1, 24, n_coarse=10, seed=0)
    norm = Normalizer.fit(corpus.records)
    trainer = Trainer(CorrectorTransformer(PRESETS["desk"], seed=0), norm, corpus,
                      TrainConfig(epochs=200, peak_lr=1e-3, d=5))
    initial = trainer.initial_mse()
    trainer.fit()
    assert trainer.history[-1]["train_mse"] < 0.1 * initial


def test_divergence_restores_last_good(damped, monkeypatch):
    import odecorrect.model as m
    corpus, norm = damped
    model = CorrectorTransformer(SMALL, seed=0)
    trainer = Trainer(model, norm, corpus, TrainConfig(epochs=2, d=5, peak_lr=1e-2, batch_size=1))
    start = {k: v.clone() for k, v in model.state_dict().items()}
    real, calls = m.batch_loss, []

    def flaky(mdl, batch):
        calls.append(1)
        out = real(mdl, batch)
        return out * float("nan") if len(calls) == 2 else out

    monkeypatch.setattr(m, "batch_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        trainer.train_epoch()
    for k, v in model.state_dict().items():
        assert torch.equal(v, start[k]) and torch.equal(info.value.last_good_state[k], start[k])


# --- inference -------------------------------------------------------------

class CheatModel(torch.nn.Module):
    """Returns the normalised query-block labels at the query token slots."""

    def __init__(self, cfg, targets):
        super().__init__()
        self.cfg, self.targets = cfg, targets

    def forward(self, keys, values, category, node, mask, past=None, return_kv=False):
        B, T, _ = values.shape
        out = torch.zeros(B, T, self.cfg.max_dim, dtype=values.dtype)
        if return_kv:
            return out, [None]
        for b in range(B):
            n, dim = self.targets[b].shape
            out[b, T - n - 1:T - 1, :dim] = torch.as_tensor(self.targets[b])
        return out


def test_cheat_head_returns_labels(damped):
    corpus, _ = damped
    recs = corpus.variations()[0]
    cfg = replace(SMALL, prompt_scale=False)
    cheat = CheatModel(cfg, [r.errors for r in recs[5:]])
    preds = predict_corrections(cheat, Normalizer.identity(2), [r.demo() for r in recs[:5]],
                                [r.trajectory() for r in recs[5:]])
    for p, r in zip(preds, recs[5:]):
        assert np.array_equal(p, r.errors)


def test_prefix_cache_matches_full_forward(damped):
    corpus, norm = damped
    model = CorrectorTransformer(SMALL, seed=7)
    recs = corpus.variations()[1]
    demos = [r.demo() for r in recs[:5]]
    preds = predict_corrections(model, norm, demos, [r.trajectory() for r in recs[5:]], chunk=2)
    for p, r in zip(preds, recs[5:]):
        seq = tokenize(PromptInstance(demos, r.trajectory()), 3, norm, prompt_scale=SMALL.prompt_scale)
        full = run_full(model, seq).numpy()[:-1, :2] * seq.err_factor * norm.err_scale
        np.testing.assert_allclose(p, full, rtol=1e-10, atol=1e-14 * np.abs(full).max())


def test_zero_shot_prediction_is_finite(damped):
    corpus, norm = damped
    model = CorrectorTransformer(SMALL, seed=0)
    rec = corpus.records[0]
    p = predict_correction(model, norm, [], rec.trajectory())
    assert p.shape == rec.errors.shape and np.isfinite(p).all()


def test_prediction_checks_provenance(damped):
    corpus, norm = damped
    v = corpus.variations()
    model = CorrectorTransformer(SMALL)
    with pytest.raises(ValueError):
        predict_correction(model, norm, [v[0][0].demo()], v[1][0].trajectory())


def test_zero_labels_reproduce_coarse(damped):
    corpus, _ = damped
    rec = corpus.records[0]
    tr = correct_trajectory(rec.trajectory(), np.zeros_like(rec.errors), "teacher")
    assert np.array_equal(tr.states, rec.coarse)
    tr = correct_trajectory(rec.trajectory(), np.zeros_like(rec.errors), "rollout")
    assert np.array_equal(tr.states, rec.coarse)


def test_ground_truth_rollout_on_damped_oscillator():
    corpus = generate_corpus("damped_oscillator", "pretrain", 5, 4, n_coarse=100, seed=1)
    for rec in corpus.records:
        fine, _ = integrate(rec.system, rec.params, rec.ic, rec.dt, 1, rec.stride * rec.n_coarse, rec.scheme)
        nodes = fine[::rec.stride]
        tr = correct_trajectory(rec.trajectory(), None, CorrectionMode.ROLLOUT,
                                corrector=oracle_corrector(rec.trajectory(), nodes))
        np.testing.assert_allclose(tr.states, nodes, rtol=0, atol=1e-9)


def test_stored_labels_drift_in_rollout():
    # global labels refer to the uncorrected path, so feeding them back is not exact
    corpus = generate_corpus("damped_oscillator", "pretrain", 1, 1, n_coarse=50, seed=1)
    rec = corpus.records[0]
    teacher = correct_trajectory(rec.trajectory(), rec.errors, "teacher")
    rollout = correct_trajectory(rec.trajectory(), rec.errors, "rollout")
    assert np.max(np.abs(rollout.states - teacher.states)) > 1e-9


def test_live_rollout_corrector_runs(damped):
    corpus, norm = damped
    model = CorrectorTransformer(SMALL, seed=0)
    recs = corpus.variations()[0]
    live = model_corrector(model, norm, [r.demo() for r in recs[:5]], recs[5].trajectory())
    tr = correct_trajectory(recs[5].trajectory(), None, "rollout", corrector=live)
    assert np.isfinite(tr.states).all() and np.array_equal(tr.states[0], recs[5].coarse[0])


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path, damped):
    corpus, norm = damped
    model = CorrectorTransformer(SMALL, seed=9)
    save_model(tmp_path / "m.ckpt", model, norm)
    back, norm2, meta, _ = load_model(tmp_path / "m.ckpt")
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert a.numpy().tobytes() == b.numpy().tobytes(), k
    assert norm2.to_dict() == norm.to_dict()
    assert meta["config"] == SMALL.to_dict()


def test_checkpoint_errors(tmp_path):
    path = save_checkpoint(tmp_path / "x.ckpt", {"a": np.arange(3.0)}, {"kind": "x"})
    data = bytearray(path.read_bytes())
    data[0] ^= 1
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "short.ckpt")
    with pytest.raises(ValueError):
        load_model(path)


def test_resume_is_bit_identical(tmp_path, damped):
    corpus, norm = damped
    train, val = split_corpus(corpus, 0.34, 0)
    cfg = TrainConfig(epochs=4, d=5, peak_lr=1e-3)
    straight = Trainer(CorrectorTransformer(SMALL, seed=0), norm, train, cfg, val)
    straight.fit()

    first = Trainer(CorrectorTransformer(SMALL, seed=0), norm, train, cfg, val)
    first.fit(2)
    save_model(tmp_path / "half.ckpt", first.model, norm, first)
    resumed = resume_trainer(tmp_path / "half.ckpt", train, val)
    resumed.fit()
    assert [h["train_mse"] for h in resumed.history] == [h["train_mse"] for h in straight.history]
    for (k, a), (_, b) in zip(straight.model.state_dict().items(), resumed.model.state_dict().items()):
        assert torch.equal(a, b), k
