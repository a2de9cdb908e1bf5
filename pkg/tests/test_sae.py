import numpy as np
import pytest

from helpers import gradcheck_case, longdouble_gradcheck, planted_suite
from recsae.mathops import make_rng
from recsae.sae import (
    LossConfig,
    SaeBatch,
    SaeBundle,
    SaeModel,
    SaeTrainConfig,
    activation_rates,
    bundle_from_json,
    bundle_to_json,
    decode,
    encode,
    init_sae,
    kl_sparsity,
    loss_emb,
    loss_pred,
    loss_sparsity,
    matryoshka_sizes,
    reconstruct,
    sae_objective,
    train_sae,
)


def hand_sae():
    W = np.array([[1.0, 2.0], [-1.0, 0.5]])
    return SaeModel(W, np.array([0.5, -1.0]), np.array([0.1, -0.2]))


def test_encode_decode_hand_instance():
    sae = hand_sae()
    e = np.array([1.0, -1.0])
    # pre-activations: [1 - 2 + 0.5, -1 - 0.5 - 1] = [-0.5, -2.5]
    np.testing.assert_array_equal(encode(sae, e), [0.0, 0.0])
    e = np.array([2.0, 1.0])
    z = encode(sae, e)  # [2 + 2 + 0.5, -2 + 0.5 - 1] -> [4.5, 0]
    np.testing.assert_array_equal(z, [4.5, 0.0])
    np.testing.assert_allclose(decode(sae, z), [4.5 + 0.1, 9.0 - 0.2])
    assert sae.decoder_weight.shape == (2, 2)


def test_shape_errors():
    sae = hand_sae()
    with pytest.raises(ValueError):
        encode(sae, np.ones(3))
    with pytest.raises(ValueError):
        decode(sae, np.ones(3))
    with pytest.raises(ValueError):
        SaeModel(np.ones((2, 2)), np.ones(3), np.ones(2))


def test_matryoshka_sizes():
    assert matryoshka_sizes(16, 4) == (4, 8, 12, 16)
    assert matryoshka_sizes(22, 3) == (8, 15, 22)
    assert matryoshka_sizes(5, 1) == (5,)
    assert matryoshka_sizes(2, 4) == (1, 2)
    with pytest.raises(ValueError):
        SaeModel(np.ones((4, 2)), np.zeros(4), np.zeros(2), (3, 2, 4))
    with pytest.raises(ValueError):
        SaeModel(np.ones((4, 2)), np.zeros(4), np.zeros(2), (1, 3))


def test_full_level_decode_is_bitwise_plain_decode():
    rng = make_rng(0)
    sae = init_sae(6, 12, rng, rng.normal(size=6), matryoshka_sizes(12, 3))
    z = encode(sae, rng.normal(size=(20, 6)))
    assert np.array_equal(decode(sae, z, level=3), decode(sae, z))
    # level k ignores units beyond its prefix
    z2 = z.copy()
    z2[:, 4:] = 123.0
    assert np.array_equal(decode(sae, z2, level=1), decode(sae, z, level=1))
    with pytest.raises(ValueError):
        decode(sae, z, level=4)


def exact_sae(d, nested=None):
    """W = [I; -I] with zero biases reconstructs any input exactly."""
    W = np.vstack([np.eye(d), -np.eye(d)])
    return SaeModel(W, np.zeros(2 * d), np.zeros(d), nested)


def test_exact_reconstruction_gives_zero_prediction_loss():
    _, ds, model = planted_suite(0)
    sae = exact_sae(model.d)
    np.testing.assert_array_equal(reconstruct(sae, model.user_embeddings), model.user_embeddings)
    pairs = np.array([[0, 1], [5, 7], [10, 100]])
    assert loss_pred(model, pairs, sae) == 0.0
    assert loss_emb(model.user_embeddings[3], reconstruct(sae, model.user_embeddings[3])) == 0.0


def test_kl_zero_at_target_rate():
    rho = 0.25
    assert kl_sparsity(np.full(7, rho), rho) == 0.0
    z = np.zeros((8, 3))
    z[[0, 3], 0] = 2.0
    z[[1, 5], 1] = 1.0
    z[[2, 6], 2] = 1.5
    p = activation_rates(z, "soft")
    np.testing.assert_array_equal(p, [0.25, 0.25, 0.25])
    _, kl = loss_sparsity(z, LossConfig(rho=rho))
    assert kl == 0.0


def test_kl_matches_formula_and_is_finite_at_extremes():
    rho, p = 0.1, np.array([0.3, 0.0, 1.0])
    got = kl_sparsity(p, rho)
    pc = np.clip(p, 1e-6, 1 - 1e-6)
    ref = np.sum(rho * np.log(rho / pc) + (1 - rho) * np.log((1 - rho) / (1 - pc)))
    assert np.isfinite(got) and got == pytest.approx(ref, rel=1e-14)


def test_soft_and_indicator_rates():
    z = np.array([[0.0, 0.5, 3.0], [0.2, 0.0, 1.0]])
    np.testing.assert_allclose(activation_rates(z, "soft"), [0.1, 0.25, 1.0])
    np.testing.assert_allclose(activation_rates(z, "indicator"), [0.5, 0.5, 1.0])


def _batch_from_indices(model, rng, b=8):
    uu, ii = rng.integers(0, model.n_users, b), rng.integers(0, model.n_items, b)
    pu, pi = rng.integers(0, model.n_users, b), rng.integers(0, model.n_items, b)
    U, I = model.user_embeddings, model.item_embeddings
    return (uu, ii, np.stack([pu, pi], 1)), SaeBatch(U[uu], I[ii], U[pu], I[pi])


@pytest.mark.parametrize("nested", [None, (3, 6, 10)])
@pytest.mark.parametrize("shared", [True, False])
def test_total_loss_composition_against_component_oracles(nested, shared):
    _, _, model = planted_suite(0)
    rng = make_rng(3)
    mk = lambda: init_sae(model.d, 10, rng, rng.normal(0, 0.1, model.d), nested)
    s = mk()
    bundle = SaeBundle(s, s) if shared else SaeBundle(s, mk())
    (uu, ii, pairs), batch = _batch_from_indices(model, rng)
    cfg = LossConfig(alpha=0.7, beta=3.0, lambda1=0.02, lambda2=0.3, rho=0.1)
    parts, _ = sae_objective(model, bundle, batch, cfg)
    levels = [None] if nested is None else [1, 2, 3]
    U, I = model.user_embeddings, model.item_embeddings
    emb = np.mean([
        np.mean([loss_emb(U[u], reconstruct(bundle.user, U[u], lv)) for u in uu])
        + np.mean([loss_emb(I[i], reconstruct(bundle.item, I[i], lv)) for i in ii])
        for lv in levels
    ])
    pred = np.mean([loss_pred(model, pairs, bundle.user, bundle.item, lv) for lv in levels])
    zu, zi = encode(bundle.user, U[uu]), encode(bundle.item, I[ii])
    if shared:
        l1, kl = loss_sparsity(np.vstack([zu, zi]), cfg)
    else:
        (l1u, klu), (l1i, kli) = loss_sparsity(zu, cfg), loss_sparsity(zi, cfg)
        l1, kl = l1u + l1i, klu + kli
    assert parts.emb == pytest.approx(emb, abs=1e-12)
    assert parts.pred == pytest.approx(pred, abs=1e-12)
    assert parts.l1 == pytest.approx(l1, abs=1e-12)
    assert parts.kl == pytest.approx(kl, abs=1e-12)
    expected = cfg.alpha * emb + cfg.beta * pred + cfg.lambda1 * l1 + cfg.lambda2 * kl
    assert parts.total == pytest.approx(expected, abs=1e-12)


def test_without_sparsity_total_is_weighted_reconstruction():
    _, _, model = planted_suite(0)
    rng = make_rng(4)
    s = init_sae(model.d, 10, rng)
    _, batch = _batch_from_indices(model, rng)
    cfg = LossConfig(alpha=2.0, beta=5.0, lambda1=0.0, lambda2=0.0)
    parts, _ = sae_objective(model, SaeBundle(s, s), batch, cfg)
    assert parts.total == pytest.approx(2.0 * parts.emb + 5.0 * parts.pred, abs=1e-12)


@pytest.mark.parametrize("c", range(8))
def test_gradient_sample(c):
    kind = "MF" if c % 2 == 0 else "NCF"
    nested = matryoshka_sizes(6, 2) if c % 3 == 0 else None
    model, bundle, batch, cfg = gradcheck_case(c, d=4, m=6, kind=kind, nested=nested, shared=c % 4 != 3)
    rep = longdouble_gradcheck(model, bundle, batch, cfg)
    assert rep.passed, f"max rel error {rep.max_rel_error:.2e} at {rep.worst_index}"


def test_indicator_statistic_passes_no_kl_gradient():
    model, bundle, batch, cfg = gradcheck_case(1, d=4, m=6, kind="MF")
    ind = LossConfig(alpha=cfg.alpha, beta=cfg.beta, lambda1=cfg.lambda1, lambda2=cfg.lambda2, rho=cfg.rho,
                     activation_stat="indicator")
    off = LossConfig(alpha=cfg.alpha, beta=cfg.beta, lambda1=cfg.lambda1, lambda2=0.0, rho=cfg.rho)
    _, g_ind = sae_objective(model, bundle, batch, ind)
    _, g_off = sae_objective(model, bundle, batch, off)
    for k in g_ind:
        np.testing.assert_array_equal(g_ind[k], g_off[k])


def test_separate_mode_parameter_names():
    rng = make_rng(0)
    b = SaeBundle(init_sae(3, 4, rng), init_sae(3, 4, rng))
    assert not b.shared
    assert sorted(b.params()) == sorted(f"{s}.{k}" for s in ("user", "item") for k in ("W", "b_enc", "b_dec"))
    s = init_sae(3, 4, rng)
    assert SaeBundle(s, s).shared


def test_training_keeps_recommender_frozen_and_lowers_loss():
    _, ds, model = planted_suite(0)
    before = model.fingerprint()
    snapshot = {k: v.copy() for k, v in model.params().items()}
    cfg = SaeTrainConfig(m=8, epochs=15, seed=1, loss=LossConfig(alpha=0.1, beta=16.0, lambda1=0.01, lambda2=0.1))
    bundle, report = train_sae(model, ds, cfg)
    assert model.fingerprint() == before
    for k, v in model.params().items():
        assert np.array_equal(v, snapshot[k])
    assert report.final["total"] < report.epochs[0]["total"]
    assert 0.0 <= report.final["dead_fraction"] <= 1.0
    assert len(report.final["activation_rates"]) == 8


def test_training_deterministic_and_checkpoint_roundtrip():
    _, ds, model = planted_suite(1)
    cfg = SaeTrainConfig(m=6, levels=2, shared=False, epochs=3, seed=2)
    a, _ = train_sae(model, ds, cfg)
    b, _ = train_sae(model, ds, cfg)
    for k, v in a.params().items():
        assert np.array_equal(v, b.params()[k])
    doc = bundle_to_json(a, cfg, model.fingerprint())
    back, cfg2, fp = bundle_from_json(doc)
    assert fp == model.fingerprint() and cfg2 == cfg
    assert not back.shared and back.user.nested_sizes == (3, 6)
    for k, v in a.params().items():
        assert np.array_equal(v, back.params()[k])


def test_mismatched_dataset_rejected():
    _, ds, model = planted_suite(0)
    small = model.copy()
    small.user_embeddings = small.user_embeddings[:10]
    with pytest.raises(ValueError, match="users"):
        train_sae(small, ds, SaeTrainConfig(m=4, epochs=1))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(rho=0.0)
    with pytest.raises(ValueError):
        LossConfig(beta=-1.0)
    with pytest.raises(ValueError):
        LossConfig(activation_stat="hard")
    assert LossConfig(batch_size=32).n_pairs == 32
    assert LossConfig(batch_size=32, pred_pairs_per_batch=5).n_pairs == 5
