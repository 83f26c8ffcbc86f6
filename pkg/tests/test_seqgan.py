"""Tests for the adversarial sequence model: penalty oracles, loss formulas,
training contracts, and sampling."""

import numpy as np
import pytest

from seqregen import tensor as tz
from seqregen.checkpoint import CheckpointContainer
from seqregen.errors import ShapeError, TrainingDiverged, ValidationError
from seqregen.optim import new_rng
from seqregen.seqdata import (
    Dataset,
    LabelVocabulary,
    SequenceRecord,
    write_fasta,
)
from seqregen.seqgan import (
    AuxClassifier,
    DiscriminatorModel,
    GanConfig,
    GanModels,
    GeneratorModel,
    adc_loglik,
    critic_loss,
    generator_loss,
    gradient_penalty,
    gumbel_noise,
    sample_sequences,
    train_gan,
)
from seqregen.tensor import Tape, backward


def _cfg(**kw):
    base = dict(max_len=5, alphabet_size=4, rep_dim=3, n_labels=2, n_z=4,
                gen_width=8, channels=4, kernel=3)
    base.update(kw)
    return GanConfig(**base)


def _cond(rng, cfg, B):
    r = rng.normal(size=(B, cfg.rep_dim))
    y = (rng.random((B, cfg.n_labels)) < 0.5).astype(np.float64)
    y[y.sum(axis=1) == 0, 0] = 1.0  # keep every row labeled
    return r, y


# ------------------------------------------------------- numpy transcriptions


def _lrelu_np(x):
    return np.where(x > 0, x, 0.2 * x)


def _conv_np(x, w, b):
    k = w.shape[0]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, k - 1 - pad), (0, 0)))
    L = x.shape[1]
    return sum(xp[:, o : o + L, :] @ w[o] for o in range(k)) + b


def _critic_np(D, x, u):
    B = x.shape[0]
    pos = np.broadcast_to(D.pos[None], (B,) + D.pos.shape)
    xin = np.concatenate([x, pos], axis=2)
    h = _lrelu_np(_conv_np(xin, D.w1.data, D.b1.data) + (u @ D.cinj1.w.data + D.cinj1.b.data)[:, None, :])
    h = _lrelu_np(_conv_np(h, D.w2.data, D.b2.data) + (u @ D.cinj2.w.data + D.cinj2.b.data)[:, None, :])
    phi = np.concatenate(
        [h.mean(axis=1), x.reshape(B, -1) @ D.dense.w.data + D.dense.b.data], axis=1)
    pairing = ((u @ D.proj.w.data + D.proj.b.data) * phi).sum(axis=1, keepdims=True)
    joint = _lrelu_np(np.concatenate([phi, u], axis=1) @ D.pair1.w.data + D.pair1.b.data)
    joint = joint @ D.pair2.w.data + D.pair2.b.data
    return ((phi @ D.head.w.data + D.head.b.data)
            + (u @ D.chead.w.data + D.chead.b.data) + pairing + joint)


def _generator_np(G, z, u):
    h = _lrelu_np((z @ G.l1.w.data + G.l1.b.data) + (u @ G.c1.w.data + G.c1.b.data))
    h = _lrelu_np((h @ G.l2.w.data + G.l2.b.data) + (u @ G.c2.w.data + G.c2.b.data))
    att = (u @ G.router.w.data + G.router.b.data) * G.ROUTER_GAIN
    att = np.exp(att - att.max(axis=-1, keepdims=True))
    att = att / att.sum(axis=-1, keepdims=True)
    trunk = ((h @ G.l3.w.data + G.l3.b.data) + (u @ G.c3.w.data + G.c3.b.data)
             + (z @ G.zskip.w.data + G.zskip.b.data))
    trunk = np.tanh(trunk / G.TRUNK_BOUND) * G.TRUNK_BOUND
    logits = trunk + att @ G.mem.data
    logits = logits.reshape(z.shape[0], G.cfg.max_len, G.cfg.alphabet_size)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------------ generator


def test_generator_rows_are_distributions():
    cfg = _cfg()
    G = GeneratorModel(cfg, new_rng(0))
    rng = np.random.default_rng(1)
    r, y = _cond(rng, cfg, 6)
    z = rng.normal(size=(6, cfg.n_z))
    out = G.forward(z, r, y)
    assert out.shape == (6, 5, 4)
    assert (out.data >= 0).all()
    assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-6


def test_generator_deterministic_and_shape_checked():
    cfg = _cfg()
    G = GeneratorModel(cfg, new_rng(0))
    rng = np.random.default_rng(2)
    r, y = _cond(rng, cfg, 3)
    z = rng.normal(size=(3, cfg.n_z))
    assert np.array_equal(G.forward(z, r, y).data, G.forward(z, r, y).data)
    with pytest.raises(ShapeError):
        G.forward(z[:, :2], r, y)
    with pytest.raises(ShapeError):
        G.forward(z, r[:, :1], y)


def test_generator_gumbel_option():
    cfg = _cfg(tau=0.5)
    G = GeneratorModel(cfg, new_rng(0))
    rng = np.random.default_rng(3)
    r, y = _cond(rng, cfg, 2)
    z = rng.normal(size=(2, cfg.n_z))
    g = gumbel_noise((2, cfg.max_len, cfg.alphabet_size), rng)
    out = G.forward(z, r, y, gumbel=g)
    assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-6
    assert not np.allclose(out.data, G.forward(z, r, y).data)
    with pytest.raises(ValidationError, match="temperature"):
        GeneratorModel(_cfg(), new_rng(0)).forward(z, r, y, gumbel=g)


def test_config_validation():
    with pytest.raises(ValidationError):
        _cfg(gp_weight=-1.0)
    with pytest.raises(ValidationError):
        _cfg(n_critic=0)
    with pytest.raises(ValidationError):
        _cfg(kernel=4)
    with pytest.raises(ValidationError):
        _cfg(n_z=0)


# ------------------------------------------------------------------ penalty


def test_penalty_zero_for_unit_gradient_critic():
    rng = np.random.default_rng(0)
    x_real = rng.random((3, 5, 4))
    x_fake = rng.random((3, 5, 4))
    v = np.zeros((5, 4))
    v[2, 1] = 1.0  # exact unit norm

    def critic(x_hat, u):
        return (x_hat * tz.constant(v)).sum(axis=(1, 2))

    pen = gradient_penalty(critic, x_real, x_fake, None, rng=new_rng(1))
    assert abs(pen.item()) <= 1e-10


def test_penalty_zero_for_normalized_random_direction():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(5, 4))
    v /= np.linalg.norm(v)

    def critic(x_hat, u):
        return (x_hat * tz.constant(v)).sum(axis=(1, 2))

    pen = gradient_penalty(critic, rng.random((4, 5, 4)), rng.random((4, 5, 4)),
                           None, rng=new_rng(2))
    assert abs(pen.item()) <= 1e-10


def test_penalty_one_for_constant_critic():
    rng = np.random.default_rng(1)

    def critic(x_hat, u):
        return tz.constant(np.full((3, 1), 7.0))

    pen = gradient_penalty(critic, rng.random((3, 5, 4)), rng.random((3, 5, 4)),
                           None, rng=new_rng(3))
    assert abs(pen.item() - 1.0) <= 1e-10


def test_penalty_matches_finite_difference_oracle():
    cfg = _cfg(dtype=np.float64)
    D = DiscriminatorModel(cfg, new_rng(7))
    rng = np.random.default_rng(8)
    B = 3
    x_real = rng.random((B, 5, 4))
    x_fake = rng.random((B, 5, 4))
    r, y = _cond(rng, cfg, B)
    u = np.concatenate([r, y], axis=1)
    eps = rng.random(B)
    pen = gradient_penalty(D.forward, x_real, x_fake, u, eps=eps).item()

    mix = eps[:, None, None] * x_real + (1.0 - eps[:, None, None]) * x_fake
    h = 1e-6
    grads = np.zeros_like(mix)
    for b in range(B):
        for i in range(5):
            for j in range(4):
                up = mix.copy()
                up[b, i, j] += h
                dn = mix.copy()
                dn[b, i, j] -= h
                fu = _critic_np(D, up, u)[b, 0]
                fd = _critic_np(D, dn, u)[b, 0]
                grads[b, i, j] = (fu - fd) / (2 * h)
    norms = np.sqrt((grads**2).sum(axis=(1, 2)))
    want = float(((norms - 1.0) ** 2).mean())
    assert abs(pen - want) / max(abs(want), 1e-12) < 1e-3


def test_penalty_parameter_gradient_matches_finite_difference():
    # the critic trains through the penalty, so its parameter gradient must
    # survive differentiating the inner input-gradient norm
    cfg = _cfg(dtype=np.float64)
    D = DiscriminatorModel(cfg, new_rng(11))
    rng = np.random.default_rng(12)
    B = 3
    x_real = rng.random((B, 5, 4))
    x_fake = rng.random((B, 5, 4))
    r, y = _cond(rng, cfg, B)
    u = np.concatenate([r, y], axis=1)
    eps = rng.random(B)

    with Tape() as tape:
        pen = gradient_penalty(D.forward, x_real, x_fake, u, eps=eps)
    gmap = backward(pen, tape)

    for param, coord in [(D.w2, (0, 0, 0)), (D.head.w, (1, 0)), (D.cinj1.w, (2, 1))]:
        h = 1e-6
        orig = param.data[coord]
        param.data[coord] = orig + h
        up = gradient_penalty(D.forward, x_real, x_fake, u, eps=eps).item()
        param.data[coord] = orig - h
        dn = gradient_penalty(D.forward, x_real, x_fake, u, eps=eps).item()
        param.data[coord] = orig
        fd = (up - dn) / (2 * h)
        got = gmap[param].data[coord]
        assert abs(got - fd) / max(abs(fd), 1e-8) < 1e-4


def test_penalty_shape_and_input_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        gradient_penalty(lambda x, u: x.sum(), rng.random((2, 3, 4)),
                         rng.random((2, 3, 5)), None, rng=new_rng(0))
    with pytest.raises(ValidationError):
        gradient_penalty(lambda x, u: x.sum(), rng.random((2, 3, 4)),
                         rng.random((2, 3, 4)), None)


# ------------------------------------------------------------------ adc


def test_adc_perfect_separation_approaches_zero():
    y = np.array([[1.0, 0.0], [1.0, 1.0]])
    hot = np.where(np.concatenate([y, -np.ones_like(y)], axis=1) > 0, 40.0, -40.0)
    ll_real = adc_loglik(tz.constant(hot), y, "real")
    assert -1e-9 < ll_real.item() < 0.0
    swapped = np.concatenate([hot[:, 2:], hot[:, :2]], axis=1)
    ll_gen = adc_loglik(tz.constant(swapped), y, "generated")
    assert -1e-9 < ll_gen.item() < 0.0


def test_adc_equal_channels_cancel_exactly():
    rng = np.random.default_rng(4)
    half = rng.normal(size=(5, 3))
    logits = tz.constant(np.concatenate([half, half], axis=1))
    y = (rng.random((5, 3)) < 0.6).astype(np.float64)
    y[y.sum(axis=1) == 0, 0] = 1.0
    a = adc_loglik(logits, y, "real").item()
    b = adc_loglik(logits, y, "generated").item()
    assert a == b


def test_adc_matches_direct_formula():
    rng = np.random.default_rng(6)
    d = 3
    logits = rng.normal(size=(4, 2 * d))
    y = (rng.random((4, d)) < 0.5).astype(np.float64)
    y[y.sum(axis=1) == 0, 0] = 1.0
    got = adc_loglik(tz.constant(logits), y, "real").item()
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    per = (np.log(sig(logits[:, :d])) + np.log(1 - sig(logits[:, d:]))) * y
    want = float((per.sum(axis=1) / y.sum(axis=1)).mean())
    assert abs(got - want) < 1e-10
    with pytest.raises(ValidationError):
        adc_loglik(tz.constant(logits), y, "bogus")
    with pytest.raises(ShapeError):
        adc_loglik(tz.constant(logits[:, :d]), y, "real")


# ------------------------------------------------------------------ losses


class _ZeroCritic:
    def forward(self, x, u):
        n = x.shape[0] if hasattr(x, "shape") else len(x)
        return tz.constant(np.zeros((n, 1)))


def test_critic_loss_all_zero_configuration():
    cfg = _cfg(gp_weight=0.0, cls_weight=0.0, dtype=np.float64)
    G = GeneratorModel(cfg, new_rng(0))
    C = AuxClassifier(cfg, new_rng(1))
    rng = np.random.default_rng(2)
    r, y = _cond(rng, cfg, 4)
    x_real = rng.random((4, 5, 4))
    z = rng.normal(size=(4, cfg.n_z))
    loss = critic_loss(G, _ZeroCritic(), C, x_real, r, y, cfg,
                       rng=new_rng(3), z=z)
    assert loss.item() == 0.0


def test_critic_loss_matches_oracle_without_classifier():
    cfg = _cfg(cls_weight=0.0, gp_weight=10.0, dtype=np.float64)
    G = GeneratorModel(cfg, new_rng(1))
    D = DiscriminatorModel(cfg, new_rng(2))
    C = AuxClassifier(cfg, new_rng(3))
    rng = np.random.default_rng(4)
    B = 6
    r, y = _cond(rng, cfg, B)
    x_real = rng.random((B, 5, 4))
    z = rng.normal(size=(B, cfg.n_z))
    eps = rng.random(B)
    got = critic_loss(G, D, C, x_real, r, y, cfg, z=z, eps=eps).item()

    u = np.concatenate([r, y], axis=1)
    fake = _generator_np(G, z, u)
    pen = gradient_penalty(D.forward, x_real, fake, u, eps=eps).item()
    want = (
        float(_critic_np(D, fake, u).mean())
        - float(_critic_np(D, x_real, u).mean())
        + cfg.gp_weight * pen
    )
    assert abs(got - want) <= 1e-8


def test_generator_loss_matches_oracle_without_classifier():
    cfg = _cfg(cls_weight=0.0, dtype=np.float64)
    G = GeneratorModel(cfg, new_rng(5))
    D = DiscriminatorModel(cfg, new_rng(6))
    C = AuxClassifier(cfg, new_rng(7))
    rng = np.random.default_rng(8)
    B = 5
    r, y = _cond(rng, cfg, B)
    z = rng.normal(size=(B, cfg.n_z))
    got = generator_loss(G, D, C, r, y, cfg, z=z).item()
    u = np.concatenate([r, y], axis=1)
    want = -float(_critic_np(D, _generator_np(G, z, u), u).mean())
    assert abs(got - want) <= 1e-8


def test_generator_loss_symmetric_classifier_cancels():
    cfg = _cfg(cls_weight=175.0, dtype=np.float64)
    G = GeneratorModel(cfg, new_rng(9))

    class _EqualClassifier:
        def forward(self, x):
            n = x.shape[0]
            half = np.ones((n, cfg.n_labels))
            return tz.constant(np.concatenate([half, half], axis=1))

    rng = np.random.default_rng(10)
    r, y = _cond(rng, cfg, 4)
    z = rng.normal(size=(4, cfg.n_z))
    loss = generator_loss(G, _ZeroCritic(), _EqualClassifier(), r, y, cfg, z=z)
    assert loss.item() == 0.0


def test_losses_finite_on_random_initialization():
    cfg = _cfg()
    models = GanModels(cfg, seed=3)
    rng = np.random.default_rng(11)
    r, y = _cond(rng, cfg, 4)
    x_real = np.eye(4)[np.random.default_rng(0).integers(0, 4, size=(4, 5))].astype(np.float32)
    c = critic_loss(models.generator, models.critic, models.classifier,
                    x_real, r, y, cfg, rng=new_rng(1))
    g = generator_loss(models.generator, models.critic, models.classifier,
                       r, y, cfg, rng=new_rng(2))
    assert np.isfinite(c.item())
    assert np.isfinite(g.item())


# ------------------------------------------------------------------ training


def _gan_dataset(seed=0, n_per=6, max_len=8):
    rng = np.random.default_rng(seed)
    vocab = LabelVocabulary(["t1", "t2"])
    recs = []
    for fam, (letters, term) in enumerate([("ACDE", "t1"), ("KLMN", "t2")]):
        for i in range(n_per):
            length = int(rng.integers(5, max_len + 1))
            seq = "".join(rng.choice(list(letters), size=length))
            recs.append(SequenceRecord(f"{term}_{i}", seq, labels=vocab.vector([term])))
    ds = Dataset(records=recs, train_indices=list(range(len(recs))), val_indices=[],
                 vocab=vocab, max_len=max_len)
    reps = {rec.id: rng.normal(size=4).astype(np.float32) for rec in recs}
    return ds, reps


def _tiny_kwargs(steps=2):
    return dict(n_z=4, gen_width=8, channels=4, kernel=3, n_critic=2,
                lr=1e-4, batch=6, steps=steps, seed=0)


def test_train_gan_same_seed_bit_identical():
    ds, reps = _gan_dataset()
    a = train_gan(ds, reps, **_tiny_kwargs())
    b = train_gan(ds, reps, **_tiny_kwargs())
    assert a.to_bytes() == b.to_bytes()


def test_train_gan_step_counters():
    ds, reps = _gan_dataset()
    ckpt = train_gan(ds, reps, **_tiny_kwargs(steps=3))
    assert ckpt.metadata["generator_steps"] == "3"
    assert ckpt.metadata["critic_steps"] == str(3 * 2)
    assert ckpt.metadata["kind"] == "gan"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_gan_divergence_carries_last_good():
    ds, reps = _gan_dataset()
    for rid in reps:
        reps[rid] = np.full(4, np.nan, dtype=np.float32)
    with pytest.raises(TrainingDiverged) as err:
        train_gan(ds, reps, **_tiny_kwargs())
    assert isinstance(err.value.last_good, CheckpointContainer)
    assert err.value.last_good.metadata["generator_steps"] == "0"


def test_train_gan_missing_representation():
    ds, reps = _gan_dataset()
    del reps[ds.records[0].id]
    with pytest.raises(ValidationError, match="no latent representation"):
        train_gan(ds, reps, **_tiny_kwargs())


def test_trained_generator_responds_to_labels():
    ds, reps = _gan_dataset()
    ckpt = train_gan(ds, reps, **_tiny_kwargs(steps=10))
    models = GanModels.from_container(ckpt)
    rng = np.random.default_rng(0)
    r = rng.normal(size=(8, 4)).astype(np.float32)
    z = rng.normal(size=(8, models.cfg.n_z)).astype(np.float32)
    y1 = np.tile(np.array([[1.0, 0.0]], dtype=np.float32), (8, 1))
    y2 = np.tile(np.array([[0.0, 1.0]], dtype=np.float32), (8, 1))
    a = models.generator.forward(z, r, y1).data
    b = models.generator.forward(z, r, y2).data
    assert np.abs(a - b).mean() > 0.0


# ------------------------------------------------------------------ sampling


def test_sample_sequences_contract():
    ds, reps = _gan_dataset()
    ckpt = train_gan(ds, reps, **_tiny_kwargs())
    y = np.array([1.0, 0.0], dtype=np.float32)
    latents = np.random.default_rng(1).normal(size=(3, 4)).astype(np.float32)
    recs = sample_sequences(ckpt, latents, y, seed=9)
    assert len(recs) == 3
    assert [r.id for r in recs] == ["gen_0", "gen_1", "gen_2"]
    for rec in recs:
        assert np.array_equal(rec.labels, y)
        assert "-" not in rec.residues

    again = sample_sequences(ckpt, latents, y, seed=9)
    assert write_fasta(recs) == write_fasta(again)
    different = sample_sequences(ckpt, latents, y, seed=10)
    assert write_fasta(recs) != write_fasta(different)


def test_sample_sequences_empty_and_mismatch():
    ds, reps = _gan_dataset()
    ckpt = train_gan(ds, reps, **_tiny_kwargs())
    y = np.array([1.0, 0.0], dtype=np.float32)
    assert sample_sequences(ckpt, np.zeros((0, 4), dtype=np.float32), y) == []
    with pytest.raises(ValidationError):
        sample_sequences(ckpt, np.zeros((2, 4), dtype=np.float32), y, n=5)


def test_gan_container_round_trip():
    ds, reps = _gan_dataset()
    ckpt = train_gan(ds, reps, **_tiny_kwargs())
    models = GanModels.from_container(ckpt)
    again = models.to_container(
        {k: v for k, v in ckpt.metadata.items() if k not in models.to_container().metadata}
    )
    for k in ckpt.tensors:
        assert np.array_equal(ckpt.tensors[k], again.tensors[k])
    with pytest.raises(ValidationError, match="not a gan"):
        GanModels.from_container(CheckpointContainer(metadata={"kind": "encoder"}))
