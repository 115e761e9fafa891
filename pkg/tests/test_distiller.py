import json

import numpy as np
import pytest

from era_kd import autodiff as ad
from era_kd import checkpoint as ck
from era_kd.autodiff import Tensor
from era_kd.data import Dataset, SyntheticSpec, generate, random_means
from era_kd.distiller import (
    EncoderSpec,
    TrainConfig,
    distill,
    era_loss,
    learning_rate_at,
    make_optimizer,
    metric_keys,
    train_step,
    train_teacher,
)
from era_kd.errors import InputError, NumericError
from era_kd.losses import LossWeights, cross_entropy, feature_mse, kl_distillation
from era_kd.model import build_era_model

from conftest import randomize_branches, toy_cfg, toy_model


def fresh_model(trained_teacher, K=2, seed=0, **kw):
    enc, head = trained_teacher
    # copy so runs never share teacher tensors
    pair = ck.ClassifierPair(enc, head)
    clone = ck.build_classifier(pair.topology())
    ck.restore(clone, ck.snapshot(pair))
    clone.encoder.freeze()
    clone.head.freeze()
    clone.encoder.eval()
    return build_era_model(clone.encoder, clone.head, [4], 3, K=K, seed=seed, **kw)


def test_metric_keys():
    assert metric_keys(1) == ["epoch", "loss_total", "loss_kd", "loss_fd_0", "loss_fd_1", "loss_cls_1",
                              "approx_error", "acc_s", "acc_t", "acc_st"]


def test_lr_schedule():
    cfg = TrainConfig(epochs=8, learning_rate=0.1)
    assert [learning_rate_at(cfg, e) for e in (0, 3, 4, 5, 6, 7)] == pytest.approx(
        [0.1, 0.1, 0.01, 0.01, 0.001, 0.001])


def test_teacher_reaches_095_on_separable_data():
    # reference geometry and teacher recipe, three classes
    spec = SyntheticSpec(3, 16, 100, random_means(3, 16, 4.0, 0), seed=0)
    train, test = generate(spec)
    cfg = TrainConfig()
    enc, head, hist = train_teacher(EncoderSpec(16, (64,), 32), 3, train, test, cfg)
    assert hist[-1]["acc_test"] >= 0.95
    assert enc.frozen and head.frozen
    _, _, hist2 = train_teacher(EncoderSpec(16, (64,), 32), 3, train, test, cfg)
    assert hist2[-1]["acc_test"] == hist[-1]["acc_test"]


def test_teacher_rejects_empty():
    empty = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int))
    with pytest.raises(InputError):
        train_teacher(EncoderSpec(4, (), 2), 2, empty, empty, TrainConfig(epochs=1))


def test_single_step_descends(rng):
    model = toy_model(K=2)
    randomize_branches(model)
    model.train()
    cfg = toy_cfg(K=2, learning_rate=1e-3)
    x, y = rng.normal(size=(16, 6)), rng.integers(0, 3, 16)
    opt = make_optimizer(model, cfg)
    before = era_loss(model, x, y, cfg)[0].item()
    train_step(model, opt, (x, y), cfg, 0.0, 1e-3)
    after = era_loss(model, x, y, cfg)[0].item()
    assert after < before


def test_zero_lr_leaves_parameters(rng):
    model = toy_model(K=2)
    model.train()
    cfg = toy_cfg(K=2)
    x, y = rng.normal(size=(16, 6)), rng.integers(0, 3, 16)
    opt = make_optimizer(model, cfg)
    before = [p.values.copy() for p in model.parameters()]
    losses = [train_step(model, opt, (x, y), cfg, 0.0, 0.0)["loss_total"] for _ in range(3)]
    for a, p in zip(before, model.parameters()):
        assert a.tobytes() == p.values.tobytes()
    # BN running stats move but the train-mode forward does not read them
    assert losses[0] == losses[1] == losses[2]


def test_step_reports_all_terms(rng):
    model = toy_model(K=2)
    model.train()
    cfg = toy_cfg(K=2)
    out = train_step(model, make_optimizer(model, cfg), (rng.normal(size=(8, 6)), rng.integers(0, 3, 8)),
                     cfg, 0.0, 0.01)
    assert set(out) == {"loss_total", "loss_kd", "loss_fd_0", "loss_fd_1", "loss_fd_2", "loss_cls_1",
                        "loss_cls_2", "approx_error"}


def test_divergence_names_the_term(rng):
    model = toy_model(K=1)
    model.train()
    model.projections[1].weight.values[...] = 1e200
    randomize_branches(model)
    cfg = toy_cfg(K=1)
    with pytest.raises(NumericError) as exc:
        train_step(model, make_optimizer(model, cfg), (rng.normal(size=(8, 6)), rng.integers(0, 3, 8)),
                   cfg, 0.0, 0.01)
    assert exc.value.term is not None
    assert exc.value.term in str(exc.value)


def test_epoch0_error_is_p0_distance(small_data, trained_teacher):
    train, test = small_data
    model = fresh_model(trained_teacher)
    with ad.no_tape(), model.evaluating():
        x = Tensor(test.features)
        f_t = model.teacher(x).values
        p0 = model.projections[0](model.student(x)).values
    expected = float(np.linalg.norm(f_t - p0, axis=1).mean())
    _, hist = distill(model, train, test, toy_cfg(K=2, epochs=0))
    assert hist[0]["approx_error"] == expected


def test_history_keys_and_length(small_data, trained_teacher):
    train, test = small_data
    _, hist = distill(fresh_model(trained_teacher), train, test, toy_cfg(K=2, epochs=2))
    assert [r["epoch"] for r in hist] == [0, 1, 2]
    assert all(list(r) == metric_keys(2) for r in hist)


def test_freeze_contract(small_data, trained_teacher):
    train, test = small_data
    model = fresh_model(trained_teacher)
    frozen = [(n, t.values.copy()) for n, t in model.teacher.named_state() + model.head_t.named_state()]
    distill(model, train, test, toy_cfg(K=2, epochs=3))
    after = dict(model.teacher.named_state() + model.head_t.named_state())
    for n, v in frozen:
        assert after[n].values.tobytes() == v.tobytes(), n


def test_learnable_head_moves(small_data, trained_teacher):
    train, test = small_data
    model = fresh_model(trained_teacher, head_t_frozen=False)
    w = model.head_t.linear.weight.values.copy()
    distill(model, train, test, toy_cfg(K=2, epochs=1, head_t_frozen=False))
    assert model.head_t.linear.weight.values.tobytes() != w.tobytes()


def test_determinism(small_data, trained_teacher):
    train, test = small_data
    runs = []
    for _ in range(2):
        model = fresh_model(trained_teacher)
        opt = make_optimizer(model, toy_cfg(K=2))
        _, hist = distill(model, train, test, toy_cfg(K=2, epochs=2), optimizer=opt)
        runs.append((json.dumps(hist), ck.dumps(ck.snapshot(model, 2, (0, 2), opt))))
    assert runs[0] == runs[1]


def test_resume_matches_straight_run(small_data, trained_teacher):
    train, test = small_data
    cfg = toy_cfg(K=2, epochs=4)
    model = fresh_model(trained_teacher)
    opt = make_optimizer(model, cfg)
    _, straight = distill(model, train, test, cfg, optimizer=opt)
    straight_ckpt = ck.dumps(ck.snapshot(model, 4, (0, 4), opt))

    first = fresh_model(trained_teacher)
    opt1 = make_optimizer(first, cfg)
    _, head = distill(first, train, test, cfg, optimizer=opt1, stop_epoch=2)
    saved = ck.loads(ck.dumps(ck.snapshot(first, 2, (0, 2), opt1)))

    second = fresh_model(trained_teacher, seed=99)  # different init, overwritten by restore
    opt2 = make_optimizer(second, cfg)
    ck.restore(second, saved, opt2)
    _, tail = distill(second, train, test, cfg, optimizer=opt2, start_epoch=2)
    assert json.dumps(head + tail) == json.dumps(straight)
    assert ck.dumps(ck.snapshot(second, 4, (0, 4), opt2)) == straight_ckpt


def test_k0_loss_equals_independent_composition(rng):
    model = toy_model(K=0)
    model.train()
    w = LossWeights(K=0, alpha=0.7, beta=1.3, gamma=0.9, temperature=3.0)
    cfg = toy_cfg(K=0, weights=w)
    for _ in range(10):
        x, y = rng.normal(size=(8, 6)), rng.integers(0, 3, 8)
        total = era_loss(model, x, y, cfg)[0].item()
        with ad.no_tape():
            f_s = model.student(Tensor(x))
            f_t = model.teacher(Tensor(x))
            ce = cross_entropy(ad.softmax_with_temperature(model.head_s(f_s), 1.0), y).item()
            kl = kl_distillation(model.head_t(f_t), model.head_s(f_s), w.temperature).item()
            fd = feature_mse(f_t, model.projections[0](f_s)).item()
        assert total == (w.alpha * ce + w.beta * kl) + w.gamma * fd


def test_k0_trajectory_matches_kd_plus_fitnet(small_data, trained_teacher):
    """Distilling with K = 0 retraces a hand-written KD + FitNet loop exactly."""
    from era_kd.data import batches
    train, test = small_data
    w = LossWeights(K=0, alpha=0.8, beta=1.5, gamma=0.6)
    cfg = toy_cfg(K=0, epochs=3, weights=w)
    era = fresh_model(trained_teacher, K=0)
    distill(era, train, test, cfg)

    ref = fresh_model(trained_teacher, K=0)
    opt = make_optimizer(ref, cfg)
    ref.train()
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        for x, y in batches(train, cfg.batch_size, cfg.seed, epoch):
            opt.zero_grad()
            with ad.Tape() as tape:
                f_s = ref.student(Tensor(x))
                with ad.no_tape():
                    f_t = ref.teacher(Tensor(x))
                    g_t = ref.head_t(f_t)
                g_s = ref.head_s(f_s)
                ce = cross_entropy(ad.softmax_with_temperature(g_s, 1.0), y)
                kd = ad.add(ad.scale(ce, w.alpha), ad.scale(kl_distillation(g_t, g_s, w.temperature), w.beta))
                loss = ad.add(kd, ad.scale(feature_mse(f_t, ref.projections[0](f_s)), w.gamma))
            tape.backward(loss)
            opt.step(lr)
    for (name, a), (_, b) in zip(era.named_state(), ref.named_state()):
        assert a.values.tobytes() == b.values.tobytes(), name
